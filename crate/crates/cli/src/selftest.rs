//! Fast sanity checks of the installed build on a four-entity graph.

use anyhow::{ensure, Result};
use graphreason::checkpoint;
use graphreason::encoder::{GradientSet, Mode, Tape, TrainablePolicy};
use graphreason::head::{kl_divergence, kl_loss, kl_loss_grad, target_from_mask};
use graphreason::kg::GraphBuilder;
use graphreason::mask::build_mask;
use graphreason::sequencer::build_input;
use graphreason::{
    serialize_subgraph, GraphAttention, ModelConfig, ModelParameters, Subgraph, Vocabulary,
};

fn check(name: &str, f: impl FnOnce() -> Result<()>) -> Result<()> {
    match f() {
        Ok(()) => {
            println!("ok    {name}");
            Ok(())
        }
        Err(e) => {
            println!("FAIL  {name}: {e:#}");
            Err(e.context(format!("selftest {name}")))
        }
    }
}

pub fn run() -> Result<()> {
    let mut b = GraphBuilder::new();
    b.add("A", "r", "B");
    b.add("B", "s", "C");
    b.add("A", "s", "D");
    let g = b.build()?;
    let sg = Subgraph::new(vec![g.entity_id("A").unwrap()], g.triples().to_vec());
    let ser = serialize_subgraph(&g, &sg)?;
    let question = "what is the s of the r of A?";
    let vocab = Vocabulary::build([question, "A r B s C D"]);

    check("serialization", || {
        let labels = ser.labels();
        ensure!(
            labels == ["A", "r", "B", "s", "D", "C"],
            "tokens {labels:?}"
        );
        Ok(())
    })?;

    check("attention mask", || {
        let n_q = vocab.tokenize(question).len();
        let m = build_mask(n_q, &ser)?;
        let (a, r, b, d, c) = (n_q, n_q + 1, n_q + 2, n_q + 4, n_q + 5);
        ensure!(m.allows(0, n_q - 1), "question rows see the question");
        ensure!(!m.allows(0, a), "question rows must not see the graph");
        ensure!(m.allows(c, 0), "graph rows see the question");
        ensure!(
            m.allows(a, r) && m.allows(r, b),
            "triple members see each other"
        );
        ensure!(
            !m.allows(a, c) && !m.allows(b, d),
            "no attention across triples"
        );
        Ok(())
    })?;

    check("kl loss", || {
        let p = [0.2, 0.3, 0.5];
        ensure!(kl_divergence(&p, &p).abs() < 1e-12, "KL(p, p) must vanish");
        ensure!(
            kl_divergence(&p, &[0.5, 0.3, 0.2]) > 0.0,
            "KL must be positive"
        );
        Ok(())
    })?;

    let cfg = ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        d_ff: 32,
        max_len: 32,
        vocab_size: vocab.len(),
        adapter_width: 4,
        dropout: 0.0,
        seed: 5,
        ..ModelConfig::default()
    };
    let input = build_input(&vocab, question, &ser, 32, GraphAttention::Structural)?;

    check("gradients", || {
        let mut m = ModelParameters::new(cfg.clone())?;
        m.set_trainable(TrainablePolicy::Full)?;
        let ents = input.entity_positions();
        let answer: Vec<bool> = (0..ents.len()).map(|i| i == 3).collect();
        let target = target_from_mask(ents, &answer).expect("one answer");
        let loss = |m: &ModelParameters| -> Result<f64> {
            let h = m.forward(&input, Mode::Eval)?;
            Ok(kl_loss(
                &target,
                &m.score_positions(&h, &target.positions)?,
            )?)
        };
        let mut grads = GradientSet::zeros_like(&m);
        let mut tape = Tape::new();
        let h = m.forward_recorded(&input, Mode::Eval, &mut tape)?;
        let s = m.score_positions(&h, &target.positions)?;
        let dh = m.head_backward(
            &h,
            &target.positions,
            &kl_loss_grad(&target, &s),
            &mut grads,
        );
        tape.backward(&m, &dh, &mut grads)?;
        let eps = 1e-5;
        for name in [
            "layers.0.attn.q.weight",
            "layers.1.ffn.in.weight",
            "head.weight",
        ] {
            let id = m.find(name).expect("tensor");
            let analytic = grads.get(id).expect("gradient")[[0, 0]];
            let orig = m.value(id)[[0, 0]];
            let t = &mut m.tensors_mut()[id.index()];
            t.value[[0, 0]] = orig + eps;
            let up = loss(&m)?;
            m.tensors_mut()[id.index()].value[[0, 0]] = orig - eps;
            let down = loss(&m)?;
            m.tensors_mut()[id.index()].value[[0, 0]] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            ensure!(rel < 1e-4, "{name}: analytic {analytic} numeric {numeric}");
        }
        Ok(())
    })?;

    check("checkpoint round trip", || {
        let m = ModelParameters::new(cfg.clone())?;
        let bytes = checkpoint::to_bytes(&m, &vocab)?;
        let back = checkpoint::from_bytes(&bytes, Some(&vocab))?;
        ensure!(
            back.tensor_hash() == m.tensor_hash(),
            "tensors differ after reload"
        );
        ensure!(
            checkpoint::to_bytes(&back, &vocab)? == bytes,
            "re-saved bytes differ"
        );
        Ok(())
    })?;

    println!("selftest passed");
    Ok(())
}
