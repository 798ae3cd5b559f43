//! Cross-attention between per-frame speech embeddings and a reference set
//! of the candidate's enrolled speech.
//!
//! `cargo run --release --example scan_attention`

use scan_asd::numerics::{ParamStore, Tensor};
use scan_asd::rng::rng_from;
use scan_asd::scan::{attention_entropy, ScanModule};
use scan_asd::spkembed::{train_embedder, EmbedderConfig};
use scan_asd::synthcorpus::{generate_population, render_clean_speech, World, WorldConfig};

fn main() -> scan_asd::Result<()> {
    let world = World::new(WorldConfig::default())?;
    let (embedder, _) = train_embedder(&world, &EmbedderConfig::default(), 1)?;
    let speakers = generate_population(&world, 2, 5, 300_000)?;
    let mut rng = rng_from(9);

    // Three reference windows of speaker A, then frames of A, B and silence.
    let sr = world.config.sample_rate as usize;
    let clips = |s: usize, seed: u64| render_clean_speech(&world, &speakers[s], 5.0, seed).samples;
    let (a, b) = (clips(0, 1), clips(1, 2));
    let window = |x: &[f64], i: usize| embedder.embed(&x[i * sr..(i + 1) * sr]);
    let refs = vec![window(&a, 0)?, window(&a, 1)?, window(&a, 2)?];
    let frames = vec![window(&a, 3)?, window(&a, 4)?, window(&b, 0)?, window(&b, 1)?, embedder.embed(&vec![0.0; sr])?];

    let mut store = ParamStore::new();
    let module = ScanModule::new(&mut store, "scan", embedder.dim(), 16, &mut rng);
    let q = Tensor::matrix(frames.len(), embedder.dim(), frames.concat())?;
    let k = Tensor::matrix(refs.len(), embedder.dim(), refs.concat())?;
    let out = module.apply(&store, &q, &k)?;
    for (t, label) in ["A", "A", "B", "B", "silence"].iter().enumerate() {
        let w = out.attention.row(t);
        let row = Tensor::matrix(1, w.len(), w.to_vec())?;
        let cos = scan_asd::numerics::cosine(q.row(t), k.row(0));
        println!(
            "frame {t} ({label:>7}): cos to reference {cos:>6.3}, weights {:.3?}, entropy {:.4}",
            w,
            attention_entropy(&row)
        );
    }
    println!("untrained auxiliary scores {:.3?}", out.aux_scores);
    Ok(())
}
