//! Full ablation: baseline versus SCAN with hypothesised and ground-truth
//! identity-speech libraries, averaged over seeds.
//!
//! `cargo run --release --example asd_ablation -- [runs] [base-seed]`

use scan_asd::harness::{render_report, run_ablation, ExperimentConfig};

fn main() -> scan_asd::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut cfg = ExperimentConfig::default();
    if let Some(runs) = args.next().and_then(|a| a.parse().ok()) {
        cfg.ablation.runs = runs;
    }
    let base = args.next().and_then(|a| a.parse().ok()).unwrap_or(0);
    let (report, timings) = run_ablation(&cfg, &cfg.seeds(base))?;
    print!("{}", render_report(&report));
    for (stage, secs) in &timings.stages {
        eprintln!("{stage:<28} {secs:>8.1}s");
    }
    Ok(())
}
