//! Generates a small hard corpus, prints what a scenario contains and
//! round-trips it through the binary corpus format.
//!
//! `cargo run --release --example synthetic_corpus -- [out.corpus]`

use scan_asd::synthcorpus::{generate_corpus, generate_population, read_corpus, write_corpus, ScenarioConfig, World, WorldConfig};

fn main() -> scan_asd::Result<()> {
    let world = World::new(WorldConfig::default())?;
    let population = generate_population(&world, 8, 1, 0)?;
    let cfg = ScenarioConfig {
        n_scenarios: 4,
        ..ScenarioConfig::hard()
    };
    let corpus = generate_corpus(&world, &population, &cfg, 42)?;

    let s = &corpus.scenarios[0];
    println!(
        "scenario {}: {:.1} s audio at {} Hz, on-screen {:?}, off-screen {:?}",
        s.id,
        s.audio.duration(),
        s.audio.sample_rate,
        s.visible,
        s.offscreen
    );
    for u in &s.utterances {
        let tag = if s.offscreen.contains(&u.speaker) { "confuser" } else { "on-screen" };
        println!("  speaker {:>2} {:>5.2}-{:>5.2} s ({tag})", u.speaker, u.start, u.end);
    }
    for t in &s.tracks {
        let speaking = t.labels.iter().filter(|&&l| l).count();
        let occluded = t.corruption_mask.iter().filter(|&&m| m).count();
        println!(
            "  track {} speaker {}: {} frames, {speaking} speaking, {occluded} corrupted",
            t.id,
            t.speaker,
            t.len()
        );
    }

    let path = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("demo.corpus").display().to_string());
    write_corpus(path.as_ref(), &corpus)?;
    let back = read_corpus(path.as_ref())?;
    println!("wrote {path}, round trip equal: {}", back == corpus);
    Ok(())
}
