//! Fine-tunes the face embedder with the impostor-frame objective, then
//! enrolls an identity-speech library and compares it with the ground-truth
//! library.
//!
//! `cargo run --release --example face_library -- [seed]`

use scan_asd::harness::{enroll_stage, generate_corpora, library_quality, train_face_stage, ExperimentConfig};

fn main() -> scan_asd::Result<()> {
    let seed = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(0);
    let cfg = ExperimentConfig::default();
    let corpora = generate_corpora(&cfg, seed)?;
    let face = train_face_stage(&cfg, &corpora, seed)?;
    if let Some(pre) = &face.report.pretrain {
        println!("pretrained frame classifier accuracy {:.3}", pre.accuracy);
    }
    let losses = &face.report.losses;
    println!("impostor loss {:.3} -> {:.3}", losses[0], losses[losses.len() - 1]);
    if let Some(acc) = face.report.held_out_accuracy {
        println!("held-out impostor-frame accuracy {acc:.3}");
    }

    let libraries = enroll_stage(&cfg, &face.finetuned, &corpora)?;
    let q = library_quality(&cfg, &face, &corpora.val, &libraries)?;
    println!("validation silhouette: frame-mean {:.3}, temporal {:.3}", q.frame_mean_silhouette, q.temporal_silhouette);
    println!("same-identity mean cosine {:.3}, different {:.3}", q.temporal_same, q.temporal_different);
    println!(
        "hypothesised {} identities, ground truth {}, partitions equal: {}",
        q.hypothesised_identities, q.oracle_identities, q.partition_matches_oracle
    );
    for e in &libraries.val_hypothesised.entries {
        let speech: f64 = e.segments.iter().map(|s| s.end - s.start).sum();
        println!("  identity {}: tracks {:?}, {speech:.1} s of speech", e.identity, e.members);
    }
    Ok(())
}
