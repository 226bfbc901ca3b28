//! In-context negatives, both InfoNCE objectives and negative assembly.

use clbd_core::contrastive::{
    assemble_negatives, dual_encoder_infonce, sample_incontext_negatives, seq2seq_contrastive_loss, total_loss, Candidate,
    LossParams, ModelKind, PreBatchRing,
};
use clbd_core::corpus::TaskKind;
use clbd_core::synthetic::{synthetic_corpus, SyntheticConfig};
use clbd_core::workflow::build_dataset;

fn main() -> clbd_core::Result<()> {
    let dataset = build_dataset(&synthetic_corpus(&SyntheticConfig::default()), Default::default())?;
    for task in [TaskKind::Sentence, TaskKind::Node] {
        let inst = &dataset.splits(task).train[0];
        println!("{task} gold {:?}", inst.gold());
        for kind in [ModelKind::Seq2Seq, ModelKind::DualEncoder] {
            println!("  {kind:?} negatives: {:?}", sample_incontext_negatives(inst, kind, 0));
        }
    }

    // pooled scores 0.8 vs {0.3, 0.5}: a one-unit hidden state at the logit
    let params = LossParams::new(vec![1.0], 0.0, 1.0, 0.0)?;
    let pos = vec![vec![4f64.ln()]];
    let n1 = vec![vec![(3.0f64 / 7.0).ln()]];
    let n2 = vec![vec![0.0]];
    let s = seq2seq_contrastive_loss(&pos, &[&n1, &n2], &params)?;
    println!("seq2seq: ratio {:.5} loss {:.5} dW {:?}", s.ratio, s.loss, s.grad_weight);

    let d = dual_encoder_infonce(1.0, &[1.0], 0.02, 0.05)?;
    println!("dual encoder: ratio {:.5} loss {:.5}", d.ratio, d.loss);
    println!("total with ce 2.0: {:.5}", total_loss(2.0, d.loss, 1.0));

    let cand = |id: &str| Candidate { id: id.into(), vector: vec![0.0; 4] };
    let mut ring = PreBatchRing::default();
    ring.push(vec![cand("old a"), cand("old b")]);
    ring.push(vec![cand("older c")]);
    ring.push(vec![cand("recent d")]);
    let batch = vec![cand("gold"), cand("other x"), cand("other y")];
    let negs = assemble_negatives(&batch, 0, &ring, Some(cand("seed term")), &["ctx term".to_string()]);
    println!(
        "negatives: self {:?}, in-batch {}, pre-batch {}, in-context {:?}",
        negs.self_negative.map(|c| c.id),
        negs.in_batch.len(),
        negs.pre_batch.len(),
        negs.in_context
    );
    Ok(())
}
