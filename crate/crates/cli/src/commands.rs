use std::collections::HashSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use graphreason::checkpoint;
use graphreason::datagen::{
    apply_question_overrides, default_templates, generate_dataset, read_records, synthetic_graph,
    write_records,
};
use graphreason::encoder::ModelConfig;
use graphreason::pipeline::infer;
use graphreason::retrieval::{
    answers_covered, mine_training_pairs, relation_example, retrieve_subgraph, retrieved_record,
    ModelScorer, RetrievalConfig,
};
use graphreason::train::{
    adapt_tune, evaluate, fine_tune, fine_tune_examples, reasoning_examples, EvalReport, Example,
    RunReport, Task, REASONING_ADAPTER, RETRIEVAL_ADAPTER,
};
use graphreason::{GraphAttention, KnowledgeGraph, ModelParameters, QaRecord, Split, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::config::FileConfig;
use crate::{
    usage, AdaptArgs, Cli, Command, EvalArgs, FinetuneArgs, FinetuneTask, GenDataArgs, InferArgs,
    ModelArgs, RetrievalArgs, RetrieveArgs,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance of a model directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Whether the base weights went through adaptation tuning.
    pub adapted: bool,
    /// Training stages applied, in order.
    pub stages: Vec<Task>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutput {
    #[serde(flatten)]
    pub run: RunReport,
    pub checkpoint_sha256: String,
    pub stages: Vec<Task>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalOutput {
    pub adapter: Option<String>,
    pub adapted: bool,
    pub checkpoint_sha256: String,
    #[serde(flatten)]
    pub eval: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrieveSummary {
    pub samples: usize,
    /// Fraction of samples whose gold answers all lie in the retrieved subgraph.
    pub answer_recall: f64,
    pub mean_triples: f64,
    pub mean_entities: f64,
    pub topic_only: usize,
    pub k: usize,
    pub max_hops: usize,
    pub entity_cap: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => gen_data(&file, a),
        Command::Adapt(a) => adapt(&file, a),
        Command::Finetune(a) => finetune(&file, a),
        Command::Retrieve(a) => retrieve(&file, a),
        Command::Eval(a) => eval(&file, a),
        Command::Infer(a) => infer_cmd(&file, a),
        Command::Selftest => crate::selftest::run(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn load_kg(path: &Path) -> Result<KnowledgeGraph> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let ents = dir.join("entities.txt");
    let rels = dir.join("relations.txt");
    let g = if ents.is_file() && rels.is_file() {
        KnowledgeGraph::load_with_symbols(path, Some(&ents), Some(&rels))
    } else {
        KnowledgeGraph::load(path)
    };
    g.with_context(|| format!("loading KG {}", path.display()))
}

fn load_records(path: &Path) -> Result<Vec<QaRecord>> {
    read_records(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn gen_data(file: &FileConfig, a: GenDataArgs) -> Result<()> {
    let mut dcfg = file.datagen.clone();
    if let Some(v) = a.min_hops {
        dcfg.min_hops = v;
    }
    if let Some(v) = a.max_hops {
        dcfg.max_hops = v;
    }
    if let Some(v) = a.entity_budget {
        dcfg.entity_budget = v;
    }
    if let Some(v) = a.val_fraction {
        dcfg.val_fraction = v;
    }
    if let Some(v) = a.topic_quantile {
        dcfg.topic_quantile = v;
    }
    if !(0.0..1.0).contains(&dcfg.val_fraction) {
        return Err(usage("--val-fraction must lie in [0, 1)"));
    }
    if !(dcfg.topic_quantile > 0.0 && dcfg.topic_quantile <= 1.0) {
        return Err(usage("--topic-quantile must lie in (0, 1]"));
    }
    if a.samples == 0 {
        return Err(usage("--samples must be at least 1"));
    }
    let g = if let Some(path) = &a.kg {
        load_kg(path)?
    } else {
        let mut scfg = file.synthetic.clone();
        if let Some(v) = a.entities {
            scfg.entities = v;
        }
        if let Some(v) = a.relations {
            scfg.relations = v;
        }
        if let Some(v) = a.kg_seed {
            scfg.seed = v;
        }
        synthetic_graph(&scfg).map_err(|e| usage(e.to_string()))?
    };
    log::info!(
        "KG: {} entities, {} relations, {} triples",
        g.num_entities(),
        g.num_relations(),
        g.triples().len()
    );
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let pool = g.top_degree_entities(dcfg.topic_quantile);
    let mut ds = generate_dataset(&g, a.samples, &pool, &dcfg, &default_templates(), seed)?;
    if let Some(split) = a.split {
        for r in &mut ds.records {
            r.split = split.into();
        }
    }
    if let Some(q) = &a.questions {
        let n = apply_question_overrides(&mut ds.records, q)?;
        log::info!("replaced {n} questions from {}", q.display());
    }
    write_records(&a.out, &ds.records)?;
    if let Some(p) = &a.save_kg {
        g.save(p)?;
    }
    let count = |s| ds.records.iter().filter(|r| r.split == s).count();
    print_json(&serde_json::json!({
        "records": ds.records.len(),
        "train": count(Split::Train),
        "validation": count(Split::Validation),
        "test": count(Split::Test),
        "seed": seed,
    }))
}

fn model_config(
    file: &FileConfig,
    m: &ModelArgs,
    vocab: &Vocabulary,
    structural: bool,
) -> Result<ModelConfig> {
    let mut c = file.model.clone();
    if let Some(v) = m.layers {
        c.layers = v;
    }
    if let Some(v) = m.d_model {
        c.d_model = v;
    }
    if let Some(v) = m.heads {
        c.heads = v;
    }
    if let Some(v) = m.d_ff {
        c.d_ff = v;
    }
    if let Some(v) = m.max_len {
        c.max_len = v;
    }
    if let Some(v) = m.adapter_width {
        c.adapter_width = v;
    }
    if let Some(v) = m.dropout {
        c.dropout = v;
    }
    if let Some(v) = m.separate_graph_positions {
        c.separate_graph_positions = v;
    }
    if !structural {
        c.graph_attention = GraphAttention::Full;
    }
    c.vocab_size = vocab.len();
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn build_vocab(records: &[QaRecord]) -> Vocabulary {
    Vocabulary::build(records.iter().flat_map(|r| {
        std::iter::once(r.question.as_str())
            .chain(r.triples.iter().flat_map(|t| t.iter().map(String::as_str)))
    }))
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    if !p.is_file() {
        return Ok(Manifest::default());
    }
    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
}

pub fn load_model_dir(dir: &Path) -> Result<(ModelParameters, Vocabulary, Manifest)> {
    if !dir.is_dir() {
        return Err(usage(format!(
            "model directory {} does not exist",
            dir.display()
        )));
    }
    let vocab = Vocabulary::load(dir.join(VOCAB_FILE))?;
    let model = checkpoint::load(dir.join(CHECKPOINT_FILE), Some(&vocab))?;
    Ok((model, vocab, read_manifest(dir)?))
}

fn save_model_dir(
    dir: &Path,
    model: &ModelParameters,
    vocab: &Vocabulary,
    manifest: &Manifest,
    run: RunReport,
) -> Result<TrainOutput> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    checkpoint::save(&ckpt, model, vocab)?;
    vocab.save(dir.join(VOCAB_FILE))?;
    write_json(&dir.join(MANIFEST_FILE), manifest)?;
    let out = TrainOutput {
        run,
        checkpoint_sha256: checkpoint::file_hash(&ckpt)?,
        stages: manifest.stages.clone(),
    };
    write_json(&dir.join(REPORT_FILE), &out)?;
    Ok(out)
}

fn summarize(out: &TrainOutput) -> Result<()> {
    if let Some(reason) = &out.run.aborted {
        bail!("training aborted: {reason}");
    }
    print_json(&serde_json::json!({
        "task": out.run.task,
        "best_epoch": out.run.best_epoch,
        "best_val_hits1": out.run.best_val_hits1,
        "params_total": out.run.params_total,
        "params_updated": out.run.params_updated,
        "structural_mask": out.run.structural_mask,
        "adapted": out.run.adapted,
        "checkpoint_sha256": out.checkpoint_sha256,
    }))
}

fn adapt(file: &FileConfig, a: AdaptArgs) -> Result<()> {
    let records = load_records(&a.data)?;
    let vocab = build_vocab(&records);
    let mc = model_config(file, &a.model, &vocab, !a.no_structural_mask)?;
    let seed = a.train.seed.or(file.seed).unwrap_or(0);
    let tc = file.train_config(Task::Adapt, &a.train.section(), seed)?;
    let mut model = ModelParameters::new(mc)?;
    let run = adapt_tune(&mut model, &vocab, &records, &tc)?;
    let manifest = Manifest {
        adapted: true,
        stages: vec![Task::Adapt],
    };
    let out = save_model_dir(&a.out, &model, &vocab, &manifest, run)?;
    summarize(&out)
}

fn split_records(records: &[QaRecord], split: Split) -> Vec<QaRecord> {
    records
        .iter()
        .filter(|r| r.split == split)
        .cloned()
        .collect()
}

fn relation_examples(
    vocab: &Vocabulary,
    g: &KnowledgeGraph,
    max_len: usize,
    records: &[QaRecord],
    max_hops: usize,
    max_negatives: usize,
    seed: u64,
) -> Result<Vec<Example>> {
    let mined = mine_training_pairs(g, records, max_hops, max_negatives, seed)?;
    if mined.skipped > 0 {
        log::warn!(
            "{} records have no topic-answer path and were skipped",
            mined.skipped
        );
    }
    mined
        .pairs
        .iter()
        .map(|p| relation_example(vocab, g, max_len, p).map_err(Into::into))
        .collect()
}

fn finetune(file: &FileConfig, a: FinetuneArgs) -> Result<()> {
    let task = match a.task {
        FinetuneTask::Reason => Task::FinetuneReason,
        FinetuneTask::Retrieve => Task::FinetuneRetrieve,
    };
    let g = match (&a.kg, task) {
        (Some(p), _) => Some(load_kg(p)?),
        (None, Task::FinetuneRetrieve) => return Err(usage("--task retrieve needs --kg")),
        (None, _) => None,
    };
    let records = load_records(&a.data)?;
    let seed = a.train.seed.or(file.seed).unwrap_or(0);
    let (mut model, vocab, mut manifest) = match &a.model {
        Some(dir) => load_model_dir(dir)?,
        None => {
            let vocab = build_vocab(&records);
            let mc = model_config(file, &a.model_args, &vocab, !a.no_structural_mask)?;
            (ModelParameters::new(mc)?, vocab, Manifest::default())
        }
    };
    if a.no_structural_mask {
        model.set_graph_attention(GraphAttention::Full);
    }
    let tc = file.train_config(task, &a.train.section(), seed)?;
    let mut run = match task {
        Task::FinetuneReason => fine_tune(&mut model, &vocab, &records, &tc)?,
        _ => {
            let g = g.as_ref().expect("checked above");
            let section = file.train_section(task);
            let max_negatives = a.max_negatives.or(section.max_negatives).unwrap_or(8);
            let max_hops = a.max_hops.unwrap_or(file.retrieval.max_hops);
            let max_len = model.config().max_len;
            let train = relation_examples(
                &vocab,
                g,
                max_len,
                &split_records(&records, Split::Train),
                max_hops,
                max_negatives,
                seed,
            )?;
            let val = relation_examples(
                &vocab,
                g,
                max_len,
                &split_records(&records, Split::Validation),
                max_hops,
                max_negatives,
                seed ^ 1,
            )?;
            if train.is_empty() {
                return Err(usage(
                    "no relation supervision could be mined from the training split",
                ));
            }
            fine_tune_examples(&mut model, &train, &val, &tc)?
        }
    };
    run.adapted = manifest.adapted;
    manifest.stages.push(task);
    let out = save_model_dir(&a.out, &model, &vocab, &manifest, run)?;
    summarize(&out)
}

fn retrieval_config(file: &FileConfig, r: &RetrievalArgs) -> Result<RetrievalConfig> {
    let mut c = file.retrieval.clone();
    if let Some(v) = r.k {
        c.k = v;
    }
    if let Some(v) = r.max_hops {
        c.max_hops = v;
    }
    if let Some(v) = r.entity_cap {
        c.entity_cap = v;
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn retrieve(file: &FileConfig, a: RetrieveArgs) -> Result<()> {
    let cfg = retrieval_config(file, &a.retrieval)?;
    let (mut model, vocab, _) = load_model_dir(&a.model)?;
    if !model.has_adapter(RETRIEVAL_ADAPTER) {
        bail!("model has no retrieval adapter; run `finetune --task retrieve` first");
    }
    model.set_active_adapter(Some(RETRIEVAL_ADAPTER))?;
    let g = load_kg(&a.kg)?;
    let mut records = load_records(&a.data)?;
    if let Some(s) = a.split {
        let s: Split = s.into();
        records.retain(|r| r.split == s);
    }
    if records.is_empty() {
        return Err(usage("no records to retrieve for"));
    }
    let scorer = ModelScorer::new(&model, &vocab)?;
    let mut out = Vec::with_capacity(records.len());
    let (mut covered, mut triples, mut entities, mut topic_only) = (0usize, 0usize, 0usize, 0usize);
    for r in &records {
        let topics = r
            .topics
            .iter()
            .map(|t| {
                g.entity_id(t)
                    .with_context(|| format!("record {}: topic {t:?} not in KG", r.id))
            })
            .collect::<Result<Vec<_>>>()?;
        let sg = retrieve_subgraph(&scorer, &g, &r.question, &topics, &cfg)?;
        covered += answers_covered(&g, r, &sg) as usize;
        triples += sg.triples.len();
        entities += sg.entities().len();
        topic_only += sg.triples.is_empty() as usize;
        out.push(retrieved_record(&g, r, &sg));
    }
    write_records(&a.out, &out)?;
    let n = records.len() as f64;
    let summary = RetrieveSummary {
        samples: records.len(),
        answer_recall: covered as f64 / n,
        mean_triples: triples as f64 / n,
        mean_entities: entities as f64 / n,
        topic_only,
        k: cfg.k,
        max_hops: cfg.max_hops,
        entity_cap: cfg.entity_cap,
    };
    if let Some(p) = &a.report {
        write_json(p, &summary)?;
    }
    print_json(&summary)
}

fn eval(file: &FileConfig, a: EvalArgs) -> Result<()> {
    let (mut model, vocab, manifest) = load_model_dir(&a.model)?;
    let adapter = match a.adapter.as_deref() {
        Some("base") => None,
        Some(name) => {
            if !model.has_adapter(name) {
                return Err(usage(format!("model has no adapter set {name:?}")));
            }
            Some(name.to_string())
        }
        None => model
            .has_adapter(REASONING_ADAPTER)
            .then(|| REASONING_ADAPTER.to_string()),
    };
    model.set_active_adapter(adapter.as_deref())?;
    let mut records = load_records(&a.data)?;
    if let Some(s) = a.split {
        let s: Split = s.into();
        records.retain(|r| r.split == s);
    }
    if records.is_empty() {
        return Err(usage("no records to evaluate"));
    }
    let tau = a.tau.or(file.finetune_reason.tau).unwrap_or(0.5);
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(usage("--tau must lie in (0, 1]"));
    }
    let examples = reasoning_examples(&vocab, model.config(), &records)?;
    let report = evaluate(&model, &examples, tau)?;
    let out = EvalOutput {
        adapter,
        adapted: manifest.adapted,
        checkpoint_sha256: checkpoint::file_hash(a.model.join(CHECKPOINT_FILE))?,
        eval: report,
    };
    if let Some(p) = &a.report {
        write_json(p, &out)?;
    }
    print_json(&serde_json::json!({
        "samples": out.eval.samples,
        "hits1": out.eval.hits1,
        "f1": out.eval.f1,
        "precision": out.eval.precision,
        "recall": out.eval.recall,
        "answer_coverage": out.eval.answer_coverage,
        "structural_mask": out.eval.structural_mask,
        "adapted": out.adapted,
        "adapter": out.adapter,
        "params_total": out.eval.params_total,
        "params_updated": out.eval.params_updated,
    }))
}

fn infer_cmd(file: &FileConfig, a: InferArgs) -> Result<()> {
    let cfg = retrieval_config(file, &a.retrieval)?;
    let (model, vocab, _) = load_model_dir(&a.model)?;
    let g = load_kg(&a.kg)?;
    let mut seen = HashSet::new();
    let mut topics = Vec::new();
    for t in &a.topic {
        let id = g
            .entity_id(t)
            .ok_or_else(|| usage(format!("topic {t:?} is not an entity of the KG")))?;
        if seen.insert(id) {
            topics.push(id);
        }
    }
    let mut result = infer(&model, &vocab, &g, &a.question, &topics, &cfg)?;
    result.table.truncate(a.top);
    print_json(&result)
}
