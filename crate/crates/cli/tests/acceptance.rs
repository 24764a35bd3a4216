//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use graphreason::checkpoint;
use graphreason::datagen::{
    default_templates, generate_dataset, synthetic_graph, DatagenConfig, QaRecord,
    SyntheticKgConfig,
};
use graphreason::encoder::{GradientSet, Mode, Tape, TrainablePolicy};
use graphreason::head::{
    kl_divergence, kl_loss, kl_loss_grad, target_from_mask, TargetDistribution,
};
use graphreason::kg::GraphBuilder;
use graphreason::mask::{build_mask_with, NEG_INF};
use graphreason::retrieval::{
    answers_covered, mine_training_pairs, relation_example, retrieve_subgraph, ModelScorer,
    RetrievalConfig,
};
use graphreason::sequencer::{build_input, InputSequence};
use graphreason::train::{
    adapt_tune, evaluate, fine_tune, fine_tune_examples, reasoning_examples, Example, Task,
    TrainConfig, RETRIEVAL_ADAPTER,
};
use graphreason::{
    serialize_subgraph, EntityId, GraphAttention, KnowledgeGraph, ModelConfig, ModelParameters,
    NodeToken, Split, Subgraph, Triple, Vocabulary,
};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! require {
    ($cond:expr, $($fmt:tt)+) => {{
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    }};
}

fn main() {
    let work = tempfile::tempdir().expect("temp dir");
    let mut e2e: Option<EndToEnd> = None;
    let mut failed = 0;
    let mut report = |id: usize,
                      name: &str,
                      limit: Option<Duration>,
                      f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let result = match (result, limit) {
            (Ok(d), Some(l)) if took > l => Err(format!("{d}; took {took:.1?}, limit {l:?}")),
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS {id:>2} {name}: {detail} [{:.1}s]", took.as_secs_f64()),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name}: {detail} [{:.1}s]", took.as_secs_f64());
            }
        }
    };

    report(
        1,
        "mask rules",
        Some(Duration::from_secs(60)),
        &mut mask_rules,
    );
    report(
        2,
        "question isolation",
        Some(Duration::from_secs(60)),
        &mut question_isolation,
    );
    report(
        3,
        "serialization",
        Some(Duration::from_secs(60)),
        &mut serialization,
    );
    report(
        4,
        "gradient check",
        Some(Duration::from_secs(120)),
        &mut gradient_check,
    );
    report(5, "loss properties", None, &mut loss_properties);
    report(
        6,
        "synthetic end-to-end learning",
        Some(Duration::from_secs(15 * 60)),
        &mut || {
            let (detail, state) = end_to_end(work.path())?;
            e2e = Some(state);
            detail
        },
    );
    report(7, "adapter fine-tuning", None, &mut || match &e2e {
        Some(s) => adapter_fine_tuning(s),
        None => Err("criterion 6 produced no checkpoint".into()),
    });
    report(8, "retrieval", None, &mut || match &e2e {
        Some(s) => retrieval(s),
        None => Err("criterion 6 produced no checkpoint".into()),
    });
    report(9, "ablation mechanics", None, &mut || {
        ablations(work.path())
    });
    report(10, "determinism", None, &mut || determinism(work.path()));

    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}

// ---------------------------------------------------------------- helpers

fn random_graph(
    rng: &mut ChaCha8Rng,
    max_ents: usize,
    max_rels: usize,
    max_triples: usize,
) -> KnowledgeGraph {
    let n_ent = rng.random_range(2..=max_ents);
    let n_rel = rng.random_range(1..=max_rels);
    let want = rng.random_range(1..=max_triples);
    let mut b = GraphBuilder::new();
    for _ in 0..want * 3 {
        if b.num_triples() >= want {
            break;
        }
        let h = rng.random_range(0..n_ent);
        let t = rng.random_range(0..n_ent);
        let r = rng.random_range(0..n_rel);
        b.add(&format!("e{h}"), &format!("r{r}"), &format!("e{t}"));
    }
    b.build().expect("non-empty graph")
}

fn random_subgraph(rng: &mut ChaCha8Rng, g: &KnowledgeGraph) -> Subgraph {
    let mut triples = g.triples().to_vec();
    triples.shuffle(rng);
    let ents = Subgraph::new(vec![], triples.clone()).entities();
    let topic = *ents.choose(rng).expect("entities");
    Subgraph::new(vec![topic], triples)
}

fn question_vocab() -> (Vocabulary, Vec<&'static str>) {
    let words = vec![
        "what", "is", "the", "of", "which", "entity", "follow", "then", "?", "e0", "r0", "r1",
    ];
    let mut texts: Vec<String> = words.iter().map(|w| w.to_string()).collect();
    texts.extend((0..30).map(|i| format!("e{i}")));
    texts.extend((0..6).map(|i| format!("r{i}")));
    (Vocabulary::build(texts.iter().map(String::as_str)), words)
}

fn small_config(vocab: &Vocabulary, seed: u64) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        max_len: 128,
        vocab_size: vocab.len(),
        adapter_width: 4,
        dropout: 0.0,
        seed,
        ..ModelConfig::default()
    }
}

// ------------------------------------------------------------ criterion 1

/// Expected mask cell from the segment rules, with triple co-membership read
/// off the token list independently of the serializer's adjacency.
fn expected_allowed(i: usize, j: usize, n_q: usize, triples_pos: &[[usize; 3]]) -> bool {
    match (i < n_q, j < n_q) {
        (true, true) => true,
        (false, true) => true,
        (true, false) => false,
        (false, false) => {
            i == j
                || triples_pos
                    .iter()
                    .any(|t| t.contains(&(i - n_q)) && t.contains(&(j - n_q)))
        }
    }
}

fn mask_rules() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (vocab, words) = question_vocab();
    let mut max_blocked: f64 = 0.0;
    let mut cells = 0usize;
    for inst in 0..1000 {
        let g = random_graph(&mut rng, 12, 4, 20);
        let sg = random_subgraph(&mut rng, &g);
        let ser = serialize_subgraph(&g, &sg).map_err(|e| e.to_string())?;
        let n_q = rng.random_range(1..=12);
        let question: Vec<&str> = (0..n_q).map(|_| *words.choose(&mut rng).unwrap()).collect();
        let question = question.join(" ");
        let pos_of: HashMap<NodeToken, usize> = ser
            .tokens()
            .iter()
            .enumerate()
            .map(|(p, &t)| (t, p))
            .collect();
        let triples_pos: Vec<[usize; 3]> = sg
            .triples
            .iter()
            .map(|t| {
                [
                    pos_of[&NodeToken::Entity(t.head)],
                    pos_of[&NodeToken::Relation(t.relation)],
                    pos_of[&NodeToken::Entity(t.tail)],
                ]
            })
            .collect();
        let mask =
            build_mask_with(n_q, &ser, GraphAttention::Structural).map_err(|e| e.to_string())?;
        let l = n_q + ser.len();
        require!(
            mask.len() == l,
            "instance {inst}: mask size {} != {l}",
            mask.len()
        );
        for i in 0..l {
            for j in 0..l {
                let want = if expected_allowed(i, j, n_q, &triples_pos) {
                    0.0
                } else {
                    NEG_INF
                };
                let got = mask.values()[[i, j]];
                require!(
                    got.to_bits() == want.to_bits(),
                    "instance {inst}: cell ({i},{j}) is {got}, expected {want}"
                );
                cells += 1;
            }
        }
        // every tenth instance: post-softmax weight on blocked cells
        if inst % 10 == 0 {
            let cfg = small_config(&vocab, inst as u64);
            let m = ModelParameters::new(cfg).map_err(|e| e.to_string())?;
            let input = build_input(&vocab, &question, &ser, 128, GraphAttention::Structural)
                .map_err(|e| e.to_string())?;
            require!(
                input.question_len() == n_q,
                "question tokenized to {} ids",
                input.question_len()
            );
            for layer in m
                .attention_probabilities(&input)
                .map_err(|e| e.to_string())?
            {
                for head in layer {
                    for i in 0..l {
                        for j in 0..l {
                            if !expected_allowed(i, j, n_q, &triples_pos) {
                                max_blocked = max_blocked.max(head[[i, j]]);
                            }
                        }
                    }
                }
            }
        }
    }
    require!(
        max_blocked < 1e-30,
        "blocked attention weight {max_blocked:e}"
    );
    Ok(format!(
        "1000 instances, {cells} cells exact, max blocked weight {max_blocked:e}"
    ))
}

// ------------------------------------------------------------ criterion 2

fn question_isolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (vocab, words) = question_vocab();
    for draw in 0..100 {
        let m =
            ModelParameters::new(small_config(&vocab, 1000 + draw)).map_err(|e| e.to_string())?;
        let n_q = rng.random_range(1..=10);
        let question: Vec<&str> = (0..n_q).map(|_| *words.choose(&mut rng).unwrap()).collect();
        let question = question.join(" ");
        let mut reference: Option<Vec<u64>> = None;
        for _ in 0..5 {
            let g = random_graph(&mut rng, 10, 4, 15);
            let sg = random_subgraph(&mut rng, &g);
            let ser = serialize_subgraph(&g, &sg).map_err(|e| e.to_string())?;
            let input = build_input(&vocab, &question, &ser, 128, GraphAttention::Structural)
                .map_err(|e| e.to_string())?;
            let h = m.forward(&input, Mode::Eval).map_err(|e| e.to_string())?;
            let bits: Vec<u64> = h
                .rows()
                .into_iter()
                .take(n_q)
                .flatten()
                .map(|x| x.to_bits())
                .collect();
            match &reference {
                None => reference = Some(bits),
                Some(r) => require!(
                    *r == bits,
                    "draw {draw}: question rows differ across subgraphs"
                ),
            }
        }
    }
    Ok("100 draws x 5 subgraphs bitwise identical".into())
}

// ------------------------------------------------------------ criterion 3

fn hop_distances(topics: &[EntityId], triples: &[Triple]) -> HashMap<EntityId, usize> {
    // fixed-point relaxation, deliberately not a queue-based BFS
    let mut d: HashMap<EntityId, usize> = topics.iter().map(|&t| (t, 0)).collect();
    loop {
        let mut changed = false;
        for t in triples {
            for (a, b) in [(t.head, t.tail), (t.tail, t.head)] {
                if let Some(&da) = d.get(&a) {
                    if d.get(&b).is_none_or(|&db| db > da + 1) {
                        d.insert(b, da + 1);
                        changed = true;
                    }
                }
            }
        }
        if !changed {
            return d;
        }
    }
}

fn check_serialization(g: &KnowledgeGraph, sg: &Subgraph) -> Result<(), String> {
    let s = serialize_subgraph(g, sg).map_err(|e| e.to_string())?;
    let d = hop_distances(&sg.topics, &sg.triples);
    let hop = |t: &Triple| {
        let a = d.get(&t.head).copied().unwrap_or(usize::MAX);
        let b = d.get(&t.tail).copied().unwrap_or(usize::MAX);
        a.min(b)
    };
    let mut order: Vec<usize> = (0..sg.triples.len()).collect();
    order.sort_by_key(|&i| (hop(&sg.triples[i]), i));
    let mut tokens: Vec<NodeToken> = sg.topics.iter().map(|&t| NodeToken::Entity(t)).collect();
    tokens.dedup();
    for &i in &order {
        let t = sg.triples[i];
        for tok in [
            NodeToken::Entity(t.head),
            NodeToken::Relation(t.relation),
            NodeToken::Entity(t.tail),
        ] {
            if !tokens.contains(&tok) {
                tokens.push(tok);
            }
        }
    }
    require!(
        s.tokens() == tokens.as_slice(),
        "token order differs for {sg:?}"
    );
    let distinct: HashSet<_> = s.tokens().iter().collect();
    require!(distinct.len() == s.len(), "duplicate tokens for {sg:?}");
    let ent_hops: Vec<usize> = s
        .tokens()
        .iter()
        .filter_map(|t| match t {
            NodeToken::Entity(e) => Some(d.get(e).copied().unwrap_or(usize::MAX)),
            NodeToken::Relation(_) => None,
        })
        .collect();
    require!(
        ent_hops.windows(2).all(|w| w[0] <= w[1]),
        "hop order {ent_hops:?}"
    );
    let pos = |tok: NodeToken| tokens.iter().position(|&x| x == tok).unwrap();
    let mut adj = BTreeSet::new();
    for t in &sg.triples {
        let ps = [
            pos(NodeToken::Entity(t.head)),
            pos(NodeToken::Relation(t.relation)),
            pos(NodeToken::Entity(t.tail)),
        ];
        for &a in &ps {
            for &b in &ps {
                if a < b {
                    adj.insert((a, b));
                }
            }
        }
    }
    let sound = s.adjacency().is_subset(&adj);
    let complete = adj.is_subset(s.adjacency());
    require!(
        sound && complete,
        "adjacency sound={sound} complete={complete} for {sg:?}"
    );
    Ok(())
}

fn connected(triples: &[Triple]) -> bool {
    let Some(first) = triples.first() else {
        return false;
    };
    let d = hop_distances(&[first.head], triples);
    triples
        .iter()
        .all(|t| d.contains_key(&t.head) && d.contains_key(&t.tail))
}

fn serialization() -> Outcome {
    let mut b = GraphBuilder::new();
    let ents = ["a", "b", "c", "d"];
    for h in ents {
        for r in ["p", "q"] {
            for t in ents {
                b.add(h, r, t);
            }
        }
    }
    let g = b.build().map_err(|e| e.to_string())?;
    let all = g.triples().to_vec();
    let mut exhaustive = 0usize;
    let mut stack: Vec<(Vec<usize>, usize)> = vec![(Vec::new(), 0)];
    while let Some((chosen, next)) = stack.pop() {
        if !chosen.is_empty() {
            let triples: Vec<Triple> = chosen.iter().map(|&i| all[i]).collect();
            if connected(&triples) {
                for topic in Subgraph::new(vec![], triples.clone()).entities() {
                    check_serialization(&g, &Subgraph::new(vec![topic], triples.clone()))?;
                    exhaustive += 1;
                }
            }
        }
        if chosen.len() < 4 {
            for i in next..all.len() {
                let mut c = chosen.clone();
                c.push(i);
                stack.push((c, i + 1));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let g = random_graph(&mut rng, 30, 6, 50);
        let sg = random_subgraph(&mut rng, &g);
        check_serialization(&g, &sg)?;
    }
    Ok(format!("{exhaustive} exhaustive cases + 100 random graphs"))
}

// ------------------------------------------------------------ criterion 4

fn gradient_check() -> Outcome {
    let mut b = GraphBuilder::new();
    b.add("A", "r", "B");
    b.add("B", "s", "C");
    b.add("A", "s", "D");
    b.add("C", "r", "E");
    let g = b.build().map_err(|e| e.to_string())?;
    let sg = Subgraph::new(vec![g.entity_id("A").unwrap()], g.triples().to_vec());
    let ser = serialize_subgraph(&g, &sg).map_err(|e| e.to_string())?;
    let question = "what is the r of the s of the r of A?";
    let vocab = Vocabulary::build([question, "a b c d e r s"]);
    let mut m = ModelParameters::new(ModelConfig {
        max_len: 32,
        ..small_config(&vocab, 21)
    })
    .map_err(|e| e.to_string())?;
    m.add_adapter_set("reasoning").map_err(|e| e.to_string())?;
    m.set_active_adapter(Some("reasoning"))
        .map_err(|e| e.to_string())?;
    m.set_trainable(TrainablePolicy::Full)
        .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for t in m.tensors_mut() {
        if t.name.starts_with("adapters.") {
            t.value.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
    let input = build_input(&vocab, question, &ser, 32, GraphAttention::Structural)
        .map_err(|e| e.to_string())?;
    let ents = input.entity_positions();
    let is_answer: Vec<bool> = (0..ents.len()).map(|i| i == 1 || i == 4).collect();
    let target = target_from_mask(ents, &is_answer).ok_or("no answer")?;
    let loss = |m: &ModelParameters, input: &InputSequence, target: &TargetDistribution| -> f64 {
        let h = m.forward(input, Mode::Eval).unwrap();
        kl_loss(target, &m.score_positions(&h, &target.positions).unwrap()).unwrap()
    };
    let mut grads = GradientSet::zeros_like(&m);
    let mut tape = Tape::new();
    let h = m
        .forward_recorded(&input, Mode::Eval, &mut tape)
        .map_err(|e| e.to_string())?;
    let s = m
        .score_positions(&h, &target.positions)
        .map_err(|e| e.to_string())?;
    let dh = m.head_backward(
        &h,
        &target.positions,
        &kl_loss_grad(&target, &s),
        &mut grads,
    );
    tape.backward(&m, &dh, &mut grads)
        .map_err(|e| e.to_string())?;

    let used: Vec<usize> = input
        .question_ids
        .iter()
        .copied()
        .chain(input.node_ids.iter().flatten().copied())
        .collect();
    let groups = [
        "embeddings.token",
        "embeddings.position",
        "layers.0.attn.q.weight",
        "layers.0.attn.k.weight",
        "layers.1.attn.v.bias",
        "layers.1.attn.o.weight",
        "layers.0.ln1.gamma",
        "layers.0.ffn.in.weight",
        "layers.1.ffn.out.weight",
        "layers.1.ln2.beta",
        "adapters.reasoning.layers.0.attn.down.weight",
        "adapters.reasoning.layers.0.ffn.up.weight",
        "adapters.reasoning.layers.1.attn.up.bias",
        "adapters.reasoning.head.weight",
    ];
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for name in groups {
        let id = m.find(name).ok_or_else(|| format!("no tensor {name}"))?;
        let (rows, cols) = m.value(id).dim();
        for _ in 0..2 {
            let r = match name {
                "embeddings.token" => *used.choose(&mut rng).unwrap(),
                "embeddings.position" => rng.random_range(0..input.len()),
                _ => rng.random_range(0..rows),
            };
            let c = rng.random_range(0..cols);
            let analytic = grads.get(id).ok_or("missing gradient")?[[r, c]];
            let base = m.value(id)[[r, c]];
            m.tensors_mut()[id.index()].value[[r, c]] = base + eps;
            let up = loss(&m, &input, &target);
            m.tensors_mut()[id.index()].value[[r, c]] = base - eps;
            let down = loss(&m, &input, &target);
            m.tensors_mut()[id.index()].value[[r, c]] = base;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            n += 1;
        }
    }
    require!(n >= 20, "only {n} coordinates");
    require!(worst < 1e-4, "max relative error {worst:e}");
    Ok(format!(
        "{n} coordinates over {} tensors, max relative error {worst:.2e}",
        groups.len()
    ))
}

// ------------------------------------------------------------ criterion 5

fn random_distribution(rng: &mut ChaCha8Rng, n: usize, sparse: bool) -> Vec<f64> {
    let mut p: Vec<f64> = (0..n)
        .map(|_| {
            if sparse && rng.random_bool(0.3) {
                0.0
            } else {
                rng.random::<f64>() + 1e-3
            }
        })
        .collect();
    if p.iter().all(|&x| x == 0.0) {
        p[0] = 1.0;
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

fn loss_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut min_kl = f64::INFINITY;
    for _ in 0..1000 {
        let n = rng.random_range(1..12);
        let t = random_distribution(&mut rng, n, true);
        let p = random_distribution(&mut rng, n, false);
        let kl = kl_divergence(&t, &p);
        require!(kl >= 0.0, "negative KL {kl:e}");
        min_kl = min_kl.min(kl);
        let self_kl = kl_divergence(&t, &t);
        require!(self_kl.abs() <= 1e-12, "KL(t,t) = {self_kl:e}");
        if t.iter().zip(&p).any(|(a, b)| (a - b).abs() > 1e-6) {
            require!(kl > 1e-12, "KL of distinct distributions is {kl:e}");
        }
    }
    for n in 1..=64 {
        for _ in 0..20 {
            let is_answer: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            let k = is_answer.iter().filter(|&&b| b).count();
            match target_from_mask((0..n).collect(), &is_answer) {
                None => require!(k == 0, "no target despite {k} answers"),
                Some(t) => {
                    let share = 1.0 / k as f64;
                    for (&p, &a) in t.probs.iter().zip(&is_answer) {
                        let want = if a { share } else { 0.0 };
                        require!(p.to_bits() == want.to_bits(), "target entry {p} != {want}");
                    }
                    let sum: f64 = t.probs.iter().sum();
                    require!(
                        (sum - 1.0).abs() <= k as f64 * f64::EPSILON,
                        "target sums to {sum}"
                    );
                }
            }
        }
    }
    Ok(format!(
        "1000 pairs non-negative (min {min_kl:.2e}), self-KL 0, targets exactly uniform"
    ))
}

// ------------------------------------------------------------ criteria 6-8

const KG_ENTITIES: usize = 240;
const KG_RELATIONS: usize = 16;
const TRAIN: usize = 2000;
const VALIDATION: usize = 100;
const HELD_OUT: usize = 200;
const ENTITY_BUDGET: usize = 6;

struct EndToEnd {
    graph: KnowledgeGraph,
    vocab: Vocabulary,
    checkpoint: PathBuf,
    train: Vec<QaRecord>,
    held_out: Vec<QaRecord>,
}

fn datagen(min_hops: usize, max_hops: usize, val_fraction: f64) -> DatagenConfig {
    DatagenConfig {
        min_hops,
        max_hops,
        entity_budget: ENTITY_BUDGET,
        val_fraction,
        ..DatagenConfig::default()
    }
}

fn make_vocab<'a>(records: impl IntoIterator<Item = &'a QaRecord>) -> Vocabulary {
    let texts: Vec<&str> = records
        .into_iter()
        .flat_map(|r| {
            std::iter::once(r.question.as_str())
                .chain(r.triples.iter().flat_map(|t| t.iter().map(String::as_str)))
        })
        .collect();
    Vocabulary::build(texts)
}

fn hits_by_hops(
    model: &ModelParameters,
    vocab: &Vocabulary,
    records: &[QaRecord],
) -> Result<(f64, String), String> {
    let exs = reasoning_examples(vocab, model.config(), records).map_err(|e| e.to_string())?;
    let ev = evaluate(model, &exs, 0.5).map_err(|e| e.to_string())?;
    let mut per = Vec::new();
    for h in 1..=3 {
        let rows: Vec<u8> = ev
            .rows
            .iter()
            .zip(records)
            .filter(|(_, r)| r.hops() == h)
            .map(|(s, _)| s.hits1)
            .collect();
        if !rows.is_empty() {
            per.push(format!(
                "{h}-hop {:.3}",
                rows.iter().map(|&x| x as f64).sum::<f64>() / rows.len() as f64
            ));
        }
    }
    Ok((ev.hits1, per.join(", ")))
}

fn end_to_end(dir: &Path) -> Result<(Outcome, EndToEnd), String> {
    let graph = synthetic_graph(&SyntheticKgConfig {
        entities: KG_ENTITIES,
        relations: KG_RELATIONS,
        ..SyntheticKgConfig::default()
    })
    .map_err(|e| e.to_string())?;
    require!(
        graph.num_entities() >= 200 && graph.num_relations() >= 15,
        "KG too small"
    );
    let pool: Vec<EntityId> = graph.entities().collect();
    let templates = default_templates();
    let total = TRAIN + VALIDATION;
    let ds = generate_dataset(
        &graph,
        total,
        &pool,
        &datagen(1, 3, VALIDATION as f64 / total as f64),
        &templates,
        1,
    )
    .map_err(|e| e.to_string())?;
    let held_out = generate_dataset(&graph, HELD_OUT, &pool, &datagen(1, 3, 0.0), &templates, 2)
        .map_err(|e| e.to_string())?
        .records;
    let n_train = ds.split(Split::Train).count();
    require!(n_train == TRAIN, "{n_train} training records");
    let vocab = make_vocab(ds.records.iter().chain(&held_out));
    let mut model = ModelParameters::new(ModelConfig {
        vocab_size: vocab.len(),
        ..e2e_model_config()
    })
    .map_err(|e| e.to_string())?;
    require!(
        model.config().layers == 2 && model.config().d_model == 64,
        "model shape"
    );
    let report = adapt_tune(&mut model, &vocab, &ds.records, &e2e_train_config())
        .map_err(|e| e.to_string())?;
    require!(
        report.aborted.is_none(),
        "training aborted: {:?}",
        report.aborted
    );
    let epochs = report.epochs.len();
    require!(epochs <= 30, "{epochs} epochs");
    let checkpoint = dir.join("adapted.ckpt");
    checkpoint::save(&checkpoint, &model, &vocab).map_err(|e| e.to_string())?;
    let (hits, per) = hits_by_hops(&model, &vocab, &held_out)?;
    let detail = format!(
        "held-out Hits@1 {hits:.3} ({per}) after {epochs} epochs, best epoch {:?}",
        report.best_epoch
    );
    let outcome = if hits >= 0.90 {
        Ok(detail)
    } else {
        Err(format!("{detail}; need >= 0.90"))
    };
    let train = ds.records;
    Ok((
        outcome,
        EndToEnd {
            graph,
            vocab,
            checkpoint,
            train,
            held_out,
        },
    ))
}

fn e2e_model_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 64,
        heads: 4,
        d_ff: 512,
        max_len: 512,
        dropout: 0.1,
        seed: 0,
        separate_graph_positions: true,
        ..ModelConfig::default()
    }
}

fn e2e_train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        epochs: 30,
        patience: 0,
        ..TrainConfig::for_task(Task::Adapt)
    }
}

fn adapter_fine_tuning(s: &EndToEnd) -> Outcome {
    let mut model = checkpoint::load(&s.checkpoint, Some(&s.vocab)).map_err(|e| e.to_string())?;
    let pool: Vec<EntityId> = s.graph.entities().collect();
    let templates = default_templates();
    let two_hop = generate_dataset(
        &s.graph,
        600,
        &pool,
        &datagen(2, 2, 100.0 / 600.0),
        &templates,
        3,
    )
    .map_err(|e| e.to_string())?;
    let held_out = generate_dataset(&s.graph, 200, &pool, &datagen(2, 2, 0.0), &templates, 4)
        .map_err(|e| e.to_string())?
        .records;
    let unknown = two_hop
        .records
        .iter()
        .chain(&held_out)
        .flat_map(|r| graphreason::sequencer::split_words(&r.question))
        .find(|w| s.vocab.id(w).is_none());
    require!(
        unknown.is_none(),
        "word {unknown:?} missing from the vocabulary"
    );
    let base_before = model.base_tensor_hash();
    let (before, _) = hits_by_hops(&model, &s.vocab, &held_out)?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        epochs: 20,
        patience: 0,
        ..TrainConfig::for_task(Task::FinetuneReason)
    };
    let report =
        fine_tune(&mut model, &s.vocab, &two_hop.records, &cfg).map_err(|e| e.to_string())?;
    require!(report.aborted.is_none(), "aborted: {:?}", report.aborted);
    let base_after = model.base_tensor_hash();
    require!(base_before == base_after, "base tensors changed");
    let frac = report.updated_fraction;
    require!(frac < 0.10, "updated fraction {frac:.4}");
    let (hits, _) = hits_by_hops(&model, &s.vocab, &held_out)?;
    let detail = format!(
        "2-hop Hits@1 {before:.3} -> {hits:.3}, base hash unchanged, updated fraction {:.2}% ({} of {})",
        100.0 * frac,
        report.params_updated,
        report.params_total
    );
    if hits >= 0.85 {
        Ok(detail)
    } else {
        Err(format!("{detail}; need >= 0.85"))
    }
}

fn retrieval(s: &EndToEnd) -> Outcome {
    let mut model = checkpoint::load(&s.checkpoint, Some(&s.vocab)).map_err(|e| e.to_string())?;
    let g = &s.graph;
    let (train_recs, val_recs): (Vec<QaRecord>, Vec<QaRecord>) = s
        .train
        .iter()
        .cloned()
        .partition(|r| r.split == Split::Train);
    let max_len = model.config().max_len;
    let examples = |recs: &[QaRecord], seed| -> Result<Vec<Example>, String> {
        let mined = mine_training_pairs(g, recs, 3, 8, seed).map_err(|e| e.to_string())?;
        mined
            .pairs
            .iter()
            .map(|p| relation_example(&s.vocab, g, max_len, p).map_err(|e| e.to_string()))
            .collect()
    };
    let train = examples(&train_recs, 5)?;
    let val = examples(&val_recs, 6)?;
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 16,
        epochs: 15,
        patience: 0,
        ..TrainConfig::for_task(Task::FinetuneRetrieve)
    };
    let report = fine_tune_examples(&mut model, &train, &val, &cfg).map_err(|e| e.to_string())?;
    require!(report.aborted.is_none(), "aborted: {:?}", report.aborted);
    model
        .set_active_adapter(Some(RETRIEVAL_ADAPTER))
        .map_err(|e| e.to_string())?;
    let scorer = ModelScorer::new(&model, &s.vocab).map_err(|e| e.to_string())?;
    let rcfg = |k| RetrievalConfig {
        k,
        max_hops: 3,
        ..RetrievalConfig::default()
    };
    let mut covered = 0usize;
    let mut triples = 0usize;
    let mut monotone_checks = 0usize;
    for (i, rec) in s.held_out.iter().enumerate() {
        let topics: Vec<EntityId> = rec.topics.iter().map(|t| g.entity_id(t).unwrap()).collect();
        let sg = retrieve_subgraph(&scorer, g, &rec.question, &topics, &rcfg(3))
            .map_err(|e| e.to_string())?;
        covered += answers_covered(g, rec, &sg) as usize;
        triples += sg.triples.len();
        if i % 10 == 0 {
            let mut prev: Option<BTreeSet<Triple>> = None;
            for k in 1..=6 {
                let sgk = retrieve_subgraph(&scorer, g, &rec.question, &topics, &rcfg(k))
                    .map_err(|e| e.to_string())?;
                let set: BTreeSet<Triple> = sgk.triples.iter().copied().collect();
                if let Some(p) = &prev {
                    require!(
                        p.is_subset(&set),
                        "record {}: k={} not contained in k={k}",
                        rec.id,
                        k - 1
                    );
                }
                prev = Some(set);
                monotone_checks += 1;
            }
        }
    }
    let recall = covered as f64 / s.held_out.len() as f64;
    let detail = format!(
        "answer recall {recall:.3} at k=3 (mean {:.1} triples, best val {:?}), monotone over {monotone_checks} (record, k) pairs",
        triples as f64 / s.held_out.len() as f64,
        report.best_val_hits1
    );
    if recall >= 0.90 {
        Ok(detail)
    } else {
        Err(format!("{detail}; need >= 0.90"))
    }
}

// ------------------------------------------------------------ criteria 9-10

fn cli(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_graphreason"))
        .args(args)
        .arg("--quiet")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`graphreason {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn json_file(path: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

const TINY_MODEL: [&str; 8] = [
    "--d-model",
    "16",
    "--heads",
    "2",
    "--d-ff",
    "32",
    "--max-len",
    "64",
];

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

fn ablations(dir: &Path) -> Outcome {
    let dir = dir.join("ablation");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let data = dir.join("data.jsonl");
    let test = dir.join("test.jsonl");
    cli(&[
        "gen-data",
        "--synthetic",
        "--samples",
        "240",
        "--seed",
        "7",
        "--val-fraction",
        "0.1",
        "--out",
        p(&data),
    ])?;
    cli(&[
        "gen-data",
        "--synthetic",
        "--samples",
        "60",
        "--seed",
        "8",
        "--split",
        "test",
        "--out",
        p(&test),
    ])?;
    let train = ["--epochs", "2", "--seed", "1"];
    let mut variants: Vec<(&str, bool, bool, PathBuf)> = Vec::new();
    for (name, structural, adapted) in [
        ("full", true, true),
        ("no-mask", false, true),
        ("no-adapt", true, false),
        ("neither", false, false),
    ] {
        let model_dir = dir.join(name);
        let out = dir.join(format!("{name}-ft"));
        if adapted {
            let mut a = vec!["adapt", "--data", p(&data), "--out", p(&model_dir)];
            a.extend(TINY_MODEL);
            a.extend(train);
            if !structural {
                a.push("--no-structural-mask");
            }
            cli(&a)?;
        }
        let mut f = vec![
            "finetune",
            "--task",
            "reason",
            "--data",
            p(&data),
            "--out",
            p(&out),
        ];
        if adapted {
            f.extend(["--model", p(&model_dir)]);
        } else {
            f.push("--skip-adapt");
            f.extend(TINY_MODEL);
        }
        if !structural {
            f.push("--no-structural-mask");
        }
        f.extend(train);
        cli(&f)?;
        variants.push((name, structural, adapted, out));
    }
    let mut rows = Vec::new();
    for (name, structural, adapted, out) in &variants {
        let report = out.join("eval.json");
        cli(&[
            "eval",
            "--model",
            p(out),
            "--data",
            p(&test),
            "--report",
            p(&report),
        ])?;
        let r = json_file(&report)?;
        for field in [
            "hits1",
            "f1",
            "structural_mask",
            "adapted",
            "params_total",
            "params_updated",
            "samples",
        ] {
            require!(r.get(field).is_some(), "{name}: eval report lacks {field}");
        }
        require!(
            r["structural_mask"] == *structural,
            "{name}: structural_mask is {}",
            r["structural_mask"]
        );
        require!(
            r["adapted"] == *adapted,
            "{name}: adapted is {}",
            r["adapted"]
        );
        let train_report = json_file(&out.join("report.json"))?;
        require!(
            train_report["adapted"] == *adapted,
            "{name}: training report adapted flag"
        );
        require!(
            train_report["structural_mask"] == *structural,
            "{name}: training report mask flag"
        );
        rows.push(format!(
            "{name} {:.2}",
            r["hits1"].as_f64().unwrap_or(f64::NAN)
        ));
    }
    Ok(format!(
        "4 variants completed with reports (Hits@1: {})",
        rows.join(", ")
    ))
}

fn determinism(dir: &Path) -> Outcome {
    let dir = dir.join("determinism");
    std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let mut hashes = Vec::new();
    for run in 0..2 {
        let d = dir.join(format!("run{run}"));
        std::fs::create_dir_all(&d).map_err(|e| e.to_string())?;
        let data = d.join("data.jsonl");
        let kg = d.join("kg.tsv");
        cli(&[
            "gen-data",
            "--synthetic",
            "--samples",
            "200",
            "--seed",
            "11",
            "--val-fraction",
            "0.1",
            "--out",
            p(&data),
            "--save-kg",
            p(&kg),
        ])?;
        let adapted = d.join("adapted");
        let mut a = vec![
            "adapt",
            "--data",
            p(&data),
            "--out",
            p(&adapted),
            "--epochs",
            "2",
            "--seed",
            "3",
        ];
        a.extend(TINY_MODEL);
        cli(&a)?;
        let reason = d.join("reason");
        cli(&[
            "finetune",
            "--task",
            "reason",
            "--model",
            p(&adapted),
            "--data",
            p(&data),
            "--out",
            p(&reason),
            "--epochs",
            "2",
            "--seed",
            "3",
        ])?;
        let retr = d.join("retr");
        cli(&[
            "finetune",
            "--task",
            "retrieve",
            "--model",
            p(&reason),
            "--kg",
            p(&kg),
            "--data",
            p(&data),
            "--out",
            p(&retr),
            "--epochs",
            "1",
            "--seed",
            "3",
        ])?;
        let eval = cli(&["eval", "--model", p(&retr), "--data", p(&data)])?;
        let retrieved = d.join("retrieved.jsonl");
        let retrieve = cli(&[
            "retrieve",
            "--model",
            p(&retr),
            "--kg",
            p(&kg),
            "--data",
            p(&data),
            "--out",
            p(&retrieved),
        ])?;
        let infer = cli(&[
            "infer",
            "--model",
            p(&retr),
            "--kg",
            p(&kg),
            "--question",
            "what is the parent of e0?",
            "--topic",
            "e0",
        ])?;
        let mut files = Vec::new();
        for f in [data.clone(), kg.clone(), retrieved.clone()] {
            files.push(std::fs::read(&f).map_err(|e| e.to_string())?);
        }
        let mut ckpts = Vec::new();
        let mut reports = Vec::new();
        for m in [&adapted, &reason, &retr] {
            ckpts.push(checkpoint::file_hash(m.join("model.ckpt")).map_err(|e| e.to_string())?);
            let mut r = json_file(&m.join("report.json"))?;
            r.as_object_mut()
                .ok_or("report is not an object")?
                .remove("wall_clock_secs");
            reports.push(r);
        }
        hashes.push((files, ckpts, reports, eval, retrieve, infer));
    }
    let (a, b) = (&hashes[0], &hashes[1]);
    require!(a.0 == b.0, "generated or retrieved files differ");
    require!(
        a.1 == b.1,
        "checkpoint hashes differ: {:?} vs {:?}",
        a.1,
        b.1
    );
    require!(a.2 == b.2, "training reports differ");
    require!(a.3 == b.3, "eval metrics differ");
    require!(a.4 == b.4, "retrieval summaries differ");
    require!(a.5 == b.5, "inference output differs");
    Ok(format!(
        "gen-data, adapt, finetune x2, eval, retrieve, infer identical across runs; checkpoints {}",
        a.1.iter().map(|h| &h[..12]).collect::<Vec<_>>().join(" ")
    ))
}
