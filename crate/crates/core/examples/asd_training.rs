//! Trains the baseline detector and the SCAN-equipped detector with a
//! ground-truth library on a small hard corpus and compares validation AP.
//!
//! `cargo run --release --example asd_training -- [steps]`

use scan_asd::harness::{
    enroll_stage, evaluate_arm, generate_corpora, train_arm, train_embedder_stage, train_face_stage, Arm,
    ExperimentConfig,
};

fn main() -> scan_asd::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.corpus.train.n_scenarios = 32;
    cfg.corpus.face.n_scenarios = 64;
    cfg.face.steps = 500;
    if let Some(steps) = std::env::args().nth(1).and_then(|a| a.parse().ok()) {
        cfg.asd.steps = steps;
    }
    let seed = 1;
    let corpora = generate_corpora(&cfg, seed)?;
    let (embedder, _) = train_embedder_stage(&cfg, seed)?;
    let face = train_face_stage(&cfg, &corpora, seed)?;
    let libraries = enroll_stage(&cfg, &face.finetuned, &corpora)?;

    for arm in [Arm::Baseline, Arm::ScanOracle] {
        let trained = train_arm(&cfg, arm, &embedder, &corpora, &libraries, seed)?;
        let (m, preds) = evaluate_arm(&cfg, &trained, &embedder, &corpora.val, &libraries, seed)?;
        println!(
            "{:<12} loss {:.3}  AP {:.1}  track mAP {:.1}  noise-video score during confuser speech {}",
            arm.name(),
            trained.final_loss,
            100.0 * m.ap,
            100.0 * m.track_ap,
            m.false_positive_score.map_or("n/a".into(), |v| format!("{v:.3}"))
        );
        let p = &preds[0];
        let shown: Vec<String> = p
            .scores
            .iter()
            .zip(&p.labels)
            .step_by(15)
            .map(|(s, &l)| format!("{s:.2}{}", if l { "*" } else { "" }))
            .collect();
        println!("  track {} every 15th frame (* = speaking): {}", p.track, shown.join(" "));
    }
    Ok(())
}
