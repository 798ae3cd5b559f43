//! Trains the speaker embedder on a disjoint speaker population and scores
//! verification trials with cosine similarity.
//!
//! `cargo run --release --example speaker_embedder`

use scan_asd::spkembed::{make_trials, train_embedder, verification_eer, EmbedderConfig};
use scan_asd::synthcorpus::{generate_population, World, WorldConfig};

fn main() -> scan_asd::Result<()> {
    let world = World::new(WorldConfig::default())?;
    let cfg = EmbedderConfig::default();
    let (embedder, report) = train_embedder(&world, &cfg, 7)?;
    println!(
        "{} training speakers, loss {:.3} -> {:.3}, held-out window accuracy {:.3}",
        report.speakers,
        report.losses[0],
        report.losses[report.losses.len() - 1],
        report.held_out_accuracy
    );

    let unseen = generate_population(&world, 10, 99, 500_000)?;
    let trials = make_trials(&world, &unseen, 20, 3);
    let eer = verification_eer(&embedder, &trials)?;
    println!("EER on {} trials between unseen speakers: {:.2}%", trials.len(), 100.0 * eer);
    println!("embedder frozen: {}", embedder.is_frozen());
    Ok(())
}
