//! Frozen speaker embedder `f_φ` and per-frame audio windowing.
//!
//! The embedder frames a waveform into chunks on the absolute emission grid,
//! averages them, and maps the mean chunk through a linear lift and two dense
//! layers to a unit-norm embedding. Since the lift is linear, lifting each
//! chunk and then pooling equals lifting the pooled chunk; the latter is what
//! runs. The pooled chunk is L2-normalised first, which makes embeddings
//! invariant to input gain.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::equal_error_rate;
use crate::numerics::{cosine, Adam, AdamConfig, Checkpoint, Dense, ParamStore, Tape, Tensor, Var};
use crate::rng::{derive_named, derive_seed, normal, rng_from};
use crate::synthcorpus::{generate_population, render_clean_speech, AudioSignal, SyntheticSpeaker, World};

/// One window of `window_seconds` per video frame.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedAudio {
    /// T × W_s
    pub matrix: Tensor,
    /// First sample index of every row; negative when left-padded.
    pub starts: Vec<i64>,
    pub centers: Vec<f64>,
    pub window_seconds: f64,
    pub sample_rate: u32,
}

impl WindowedAudio {
    pub fn frames(&self) -> usize {
        self.starts.len()
    }
}

/// Samples per window.
pub fn window_len(sample_rate: u32, window_seconds: f64) -> usize {
    (window_seconds * f64::from(sample_rate)).round() as usize
}

/// Start sample of the window centred on frame `t`.
pub fn window_start(t: usize, fps: u32, sample_rate: u32, window_seconds: f64) -> i64 {
    let center = (t as f64 + 0.5) / f64::from(fps);
    (center * f64::from(sample_rate)).round() as i64 - (window_len(sample_rate, window_seconds) / 2) as i64
}

/// Reads `len` samples starting at `start`, zero outside the signal.
pub fn padded_slice(samples: &[f64], start: i64, len: usize) -> Vec<f64> {
    let mut out = vec![0.0; len];
    let lo = start.max(0);
    let hi = (start + len as i64).min(samples.len() as i64);
    if lo < hi {
        let (lo, hi) = (lo as usize, hi as usize);
        let off = (lo as i64 - start) as usize;
        out[off..off + hi - lo].copy_from_slice(&samples[lo..hi]);
    }
    out
}

pub fn window_audio(audio: &AudioSignal, frames: usize, fps: u32, window_seconds: f64) -> Result<WindowedAudio> {
    if audio.samples.is_empty() {
        return Err(Error::contract("window_audio: empty audio"));
    }
    if frames == 0 || !(window_seconds > 0.0) || fps == 0 {
        return Err(Error::contract("window_audio: need T ≥ 1, fps ≥ 1 and a positive window"));
    }
    let w = window_len(audio.sample_rate, window_seconds);
    let mut data = Vec::with_capacity(frames * w);
    let mut starts = Vec::with_capacity(frames);
    let mut centers = Vec::with_capacity(frames);
    for t in 0..frames {
        let s = window_start(t, fps, audio.sample_rate, window_seconds);
        data.extend(padded_slice(&audio.samples, s, w));
        starts.push(s);
        centers.push((t as f64 + 0.5) / f64::from(fps));
    }
    Ok(WindowedAudio {
        matrix: Tensor::matrix(frames, w, data)?,
        starts,
        centers,
        window_seconds,
        sample_rate: audio.sample_rate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub dim: usize,
    pub lift_dim: usize,
    pub hidden: usize,
    pub window_seconds: f64,
    /// Size of the pretraining speaker population.
    pub speakers: usize,
    pub seconds_per_speaker: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            lift_dim: 32,
            hidden: 64,
            window_seconds: 1.0,
            speakers: 24,
            seconds_per_speaker: 12.0,
            steps: 300,
            batch: 32,
            lr: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerEmbedder {
    pub store: ParamStore,
    lift: Dense,
    hidden: Dense,
    out: Dense,
    chunk_len: usize,
}

/// Mean of the whole `chunk_len` blocks of `waveform`, where the block grid
/// starts `phase` samples into the waveform.
pub fn pooled_chunk(waveform: &[f64], chunk_len: usize, phase: usize) -> Vec<f64> {
    let mut acc = vec![0.0; chunk_len];
    let tail = waveform.get(phase..).unwrap_or(&[]);
    let mut n = 0usize;
    for chunk in tail.chunks_exact(chunk_len) {
        for (a, b) in acc.iter_mut().zip(chunk) {
            *a += b;
        }
        n += 1;
    }
    if n > 0 {
        for a in acc.iter_mut() {
            *a /= n as f64;
        }
    }
    acc
}

/// Offset of the first chunk boundary at or after absolute sample `start`.
pub fn grid_phase(start: i64, chunk_len: usize) -> usize {
    ((-start).rem_euclid(chunk_len as i64)) as usize
}

impl SpeakerEmbedder {
    pub fn new(cfg: &EmbedderConfig, chunk_len: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let lift = Dense::new(&mut store, "embedder.lift", chunk_len, cfg.lift_dim, rng);
        let hidden = Dense::new(&mut store, "embedder.hidden", cfg.lift_dim, cfg.hidden, rng);
        let out = Dense::new(&mut store, "embedder.out", cfg.hidden, cfg.dim, rng);
        Self {
            store,
            lift,
            hidden,
            out,
            chunk_len,
        }
    }

    pub fn dim(&self) -> usize {
        self.out.out_dim(&self.store)
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn freeze(&mut self) {
        self.store.set_frozen(true);
    }

    pub fn is_frozen(&self) -> bool {
        self.store.all_frozen()
    }

    /// Differentiable forward from pooled chunks (N × chunk_len).
    pub fn forward_pooled(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        let x = tape.normalize_rows(pooled)?;
        let h = self.lift.forward(tape, &self.store, x)?;
        let h = self.hidden.forward(tape, &self.store, h)?;
        let h = tape.relu(h)?;
        let h = self.out.forward(tape, &self.store, h)?;
        tape.normalize_rows(h)
    }

    /// Embeds pooled chunks on a scratch tape.
    pub fn embed_pooled(&self, pooled: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(pooled);
        let y = self.forward_pooled(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Embeds a waveform whose first sample sits on a chunk boundary.
    pub fn embed(&self, waveform: &[f64]) -> Result<Vec<f64>> {
        self.embed_at(waveform, 0)
    }

    /// Embeds a waveform whose first sample is absolute sample `start`.
    pub fn embed_at(&self, waveform: &[f64], start: i64) -> Result<Vec<f64>> {
        let phase = grid_phase(start, self.chunk_len);
        if waveform.len() < phase + self.chunk_len {
            return Err(Error::contract(format!(
                "embed: waveform of {} samples holds no whole {}-sample chunk",
                waveform.len(),
                self.chunk_len
            )));
        }
        let pooled = pooled_chunk(waveform, self.chunk_len, phase);
        Ok(self.embed_pooled(Tensor::row_vector(pooled))?.into_data())
    }

    /// One embedding per window row (T × d_φ).
    pub fn embed_windows(&self, windows: &WindowedAudio) -> Result<Tensor> {
        let mut pooled = Vec::with_capacity(windows.frames() * self.chunk_len);
        for (t, &s) in windows.starts.iter().enumerate() {
            pooled.extend(pooled_chunk(windows.matrix.row(t), self.chunk_len, grid_phase(s, self.chunk_len)));
        }
        self.embed_pooled(Tensor::matrix(windows.frames(), self.chunk_len, pooled)?)
    }

    /// Per-frame embeddings straight from a signal, without materialising
    /// the T × W_s window matrix.
    pub fn embed_frames(&self, audio: &AudioSignal, frames: usize, fps: u32, window_seconds: f64) -> Result<Tensor> {
        if audio.samples.is_empty() || frames == 0 {
            return Err(Error::contract("embed_frames: empty input"));
        }
        let w = window_len(audio.sample_rate, window_seconds);
        let mut pooled = Vec::with_capacity(frames * self.chunk_len);
        for t in 0..frames {
            let s = window_start(t, fps, audio.sample_rate, window_seconds);
            let window = padded_slice(&audio.samples, s, w);
            pooled.extend(pooled_chunk(&window, self.chunk_len, grid_phase(s, self.chunk_len)));
        }
        self.embed_pooled(Tensor::matrix(frames, self.chunk_len, pooled)?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "speaker-embedder".into());
        meta.insert("chunk_len".into(), self.chunk_len.to_string());
        meta.insert("frozen".into(), self.is_frozen().to_string());
        Checkpoint {
            meta,
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("kind").map(String::as_str) != Some("speaker-embedder") {
            return Err(Error::Format("checkpoint does not hold a speaker embedder".into()));
        }
        let chunk_len = ckpt
            .meta
            .get("chunk_len")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("embedder checkpoint lacks chunk_len".into()))?;
        let store = ckpt.params.clone();
        let dense = |name: &str| -> Result<Dense> {
            let w = store.find(&format!("{name}.w"));
            let b = store.find(&format!("{name}.b"));
            match (w, b) {
                (Some(w), Some(b)) => Ok(Dense { w, b }),
                _ => Err(Error::Format(format!("embedder checkpoint lacks {name}"))),
            }
        };
        Ok(Self {
            lift: dense("embedder.lift")?,
            hidden: dense("embedder.hidden")?,
            out: dense("embedder.out")?,
            store,
            chunk_len,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbedderReport {
    pub speakers: usize,
    pub losses: Vec<f64>,
    pub held_out_accuracy: f64,
}

/// Pooled chunks of random whole-chunk-aligned windows from clean speech,
/// with gain and additive-noise augmentation.
fn sample_windows(
    world: &World,
    speakers: &[SyntheticSpeaker],
    cfg: &EmbedderConfig,
    per_speaker: usize,
    seed: u64,
) -> Result<(Tensor, Vec<usize>)> {
    let chunk = world.config.chunk_len;
    let w = window_len(world.config.sample_rate, cfg.window_seconds);
    let chunks_per_window = w / chunk;
    if chunks_per_window == 0 {
        return Err(Error::config("embedder window shorter than one chunk"));
    }
    let mut rng = rng_from(seed);
    let mut pooled = Vec::with_capacity(speakers.len() * per_speaker * chunk);
    let mut labels = Vec::with_capacity(speakers.len() * per_speaker);
    for (class, spk) in speakers.iter().enumerate() {
        let seconds = cfg.seconds_per_speaker.max(cfg.window_seconds * 2.0);
        let audio = render_clean_speech(world, spk, seconds, derive_seed(seed, class as u64));
        let total_chunks = audio.samples.len() / chunk;
        for _ in 0..per_speaker {
            let first = rng.random_range(0..=total_chunks - chunks_per_window);
            let slice = &audio.samples[first * chunk..(first + chunks_per_window) * chunk];
            let mut p = pooled_chunk(slice, chunk, 0);
            let gain = rng.random_range(0.3..1.5);
            let snr_db = rng.random_range(0.0..20.0);
            let noise = world.noise_std(snr_db) / (chunks_per_window as f64).sqrt();
            for v in p.iter_mut() {
                *v = gain * *v + noise * normal(&mut rng);
            }
            pooled.extend(p);
            labels.push(class);
        }
    }
    Ok((Tensor::matrix(labels.len(), chunk, pooled)?, labels))
}

/// Trains on a fresh pretraining population drawn from the world.
pub fn train_embedder(world: &World, cfg: &EmbedderConfig, seed: u64) -> Result<(SpeakerEmbedder, EmbedderReport)> {
    let speakers = generate_population(world, cfg.speakers, derive_named(seed, "embedder-population"), 100_000)?;
    train_embedder_on(world, &speakers, cfg, seed)
}

/// Speaker classification with softmax cross-entropy on 1 s clean windows.
/// The classification head is discarded and the embedder returned frozen.
pub fn train_embedder_on(
    world: &World,
    speakers: &[SyntheticSpeaker],
    cfg: &EmbedderConfig,
    seed: u64,
) -> Result<(SpeakerEmbedder, EmbedderReport)> {
    if speakers.len() < 2 {
        return Err(Error::contract("train_embedder needs at least 2 speakers"));
    }
    let mut rng = rng_from(derive_named(seed, "embedder-init"));
    let mut model = SpeakerEmbedder::new(cfg, world.config.chunk_len, &mut rng);
    let head = Dense::new(&mut model.store, "embedder.head", cfg.dim, speakers.len(), &mut rng);
    let (train_x, train_y) = sample_windows(world, speakers, cfg, 64, derive_named(seed, "embedder-train"))?;
    let (test_x, test_y) = sample_windows(world, speakers, cfg, 16, derive_named(seed, "embedder-test"))?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut cursor = order.len();
    let scale = 8.0;
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let x = train_x.select_rows(&batch);
        let y: Vec<usize> = batch.iter().map(|&i| train_y[i]).collect();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let e = model.forward_pooled(&mut tape, xv)?;
        let e = tape.scale(e, scale)?;
        let logits = head.forward(&mut tape, &model.store, e)?;
        let loss = tape.softmax_cross_entropy(logits, &y)?;
        losses.push(tape.value(loss).item());
        let grads = tape.backward(loss, &model.store)?;
        adam.step(&mut model.store, &grads)?;
    }
    let mut tape = Tape::new();
    let xv = tape.constant(test_x);
    let e = model.forward_pooled(&mut tape, xv)?;
    let e = tape.scale(e, scale)?;
    let logits = head.forward(&mut tape, &model.store, e)?;
    let logits = tape.value(logits);
    let correct = (0..test_y.len())
        .filter(|&i| {
            let row = logits.row(i);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            best == test_y[i]
        })
        .count();
    let held_out_accuracy = correct as f64 / test_y.len() as f64;

    let mut store = ParamStore::new();
    let keep = |d: Dense, store: &mut ParamStore, name: &str| Dense {
        w: store.add(format!("{name}.w"), model.store.get(d.w).clone()),
        b: store.add(format!("{name}.b"), model.store.get(d.b).clone()),
    };
    let lift = keep(model.lift, &mut store, "embedder.lift");
    let hidden = keep(model.hidden, &mut store, "embedder.hidden");
    let out = keep(model.out, &mut store, "embedder.out");
    let mut embedder = SpeakerEmbedder {
        store,
        lift,
        hidden,
        out,
        chunk_len: model.chunk_len,
    };
    embedder.freeze();
    Ok((
        embedder,
        EmbedderReport {
            speakers: speakers.len(),
            losses,
            held_out_accuracy,
        },
    ))
}

/// A verification trial between two chunk-aligned waveforms.
#[derive(Clone, Debug)]
pub struct Trial {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub same: bool,
}

pub fn verification_eer(embedder: &SpeakerEmbedder, trials: &[Trial]) -> Result<f64> {
    let mut scored = Vec::with_capacity(trials.len());
    for t in trials {
        let ea = embedder.embed(&t.a)?;
        let eb = embedder.embed(&t.b)?;
        scored.push((cosine(&ea, &eb), t.same));
    }
    equal_error_rate(&scored)
}

/// Same/different trials over 1 s clean excerpts of `speakers`.
pub fn make_trials(world: &World, speakers: &[SyntheticSpeaker], per_pair: usize, seed: u64) -> Vec<Trial> {
    let sr = world.config.sample_rate as usize;
    let clips: Vec<Vec<Vec<f64>>> = speakers
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let a = render_clean_speech(world, s, (2 * per_pair) as f64, derive_seed(seed, i as u64));
            a.samples.chunks_exact(sr).map(<[f64]>::to_vec).collect()
        })
        .collect();
    let mut trials = Vec::new();
    for i in 0..speakers.len() {
        for j in i..speakers.len() {
            for k in 0..per_pair {
                let (a, b) = if i == j {
                    (clips[i][2 * k].clone(), clips[i][2 * k + 1].clone())
                } else {
                    (clips[i][k].clone(), clips[j][k + per_pair].clone())
                };
                trials.push(Trial { a, b, same: i == j });
            }
        }
    }
    trials
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{decode_checkpoint, encode_checkpoint, l2_norm};
    use crate::synthcorpus::WorldConfig;

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    fn signal(n: usize) -> AudioSignal {
        AudioSignal {
            samples: (0..n).map(|i| (i as f64 * 0.001).sin() * 0.5).collect(),
            sample_rate: 16_000,
        }
    }

    #[test]
    fn first_window_is_left_padded() {
        let a = signal(16_000);
        let w = window_audio(&a, 30, 30, 1.0).unwrap();
        assert_eq!(w.matrix.shape(), &[30, 16_000]);
        assert_eq!(w.starts[0], 267 - 8000);
        assert_eq!(w.starts[0], -7733);
        assert!(w.matrix.row(0)[..7733].iter().all(|&v| v == 0.0));
        assert_eq!(w.matrix.row(0)[7733], a.samples[0]);
    }

    #[test]
    fn centred_window_equals_raw_slice() {
        let a = signal(32_000);
        // one frame at 1 fps is centred at 0.5 s; a 1 s window spans [0, 16000)
        let w = window_audio(&a, 1, 1, 1.0).unwrap();
        assert_eq!(w.starts[0], 0);
        assert_eq!(w.matrix.row(0), &a.samples[..16_000]);
    }

    #[test]
    fn adjacent_rows_overlap_by_window_minus_hop() {
        let a = signal(64_000);
        let w = window_audio(&a, 20, 30, 1.0).unwrap();
        let hop = (16_000.0f64 / 30.0).round() as i64;
        for t in 1..20 {
            let d = w.starts[t] - w.starts[t - 1];
            assert!((d - hop).abs() <= 1);
        }
        assert_eq!(w.starts[2] - w.starts[1], hop);
        assert_eq!(16_000 - hop, 16_000 - 533);
    }

    #[test]
    fn empty_audio_rejected() {
        let a = AudioSignal {
            samples: vec![],
            sample_rate: 16_000,
        };
        assert!(window_audio(&a, 3, 30, 1.0).is_err());
    }

    #[test]
    fn pooled_chunk_follows_grid() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        assert_eq!(pooled_chunk(&x, 4, 0), vec![2.0, 3.0, 4.0, 5.0]);
        assert_eq!(pooled_chunk(&x, 4, 1), vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(grid_phase(-7733, 160), 53);
        assert_eq!(grid_phase(320, 160), 0);
    }

    #[test]
    fn untrained_embedder_contracts() {
        let w = world();
        let mut rng = rng_from(3);
        let e = SpeakerEmbedder::new(&EmbedderConfig::default(), 160, &mut rng);
        let x: Vec<f64> = (0..16_000).map(|i| ((i * 7919) % 101) as f64 / 100.0 - 0.5).collect();
        let a = e.embed(&x).unwrap();
        assert_eq!(a, e.embed(&x).unwrap());
        assert!((l2_norm(&a) - 1.0).abs() < 1e-9);
        let z = e.embed(&vec![0.0; 16_000]).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
        assert!(e.embed(&[0.0; 100]).is_err());
        let _ = w;
    }

    #[test]
    fn frame_embeddings_match_window_embeddings() {
        let w = world();
        let p = generate_population(&w, 2, 5, 0).unwrap();
        let audio = render_clean_speech(&w, &p[0], 2.0, 1);
        let e = SpeakerEmbedder::new(&EmbedderConfig::default(), 160, &mut rng_from(1));
        let windows = window_audio(&audio, 12, 30, 1.0).unwrap();
        let a = e.embed_windows(&windows).unwrap();
        let b = e.embed_frames(&audio, 12, 30, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_speaker_is_rejected() {
        let w = world();
        let p = generate_population(&w, 1, 5, 0).unwrap();
        assert!(train_embedder_on(&w, &p, &EmbedderConfig::default(), 1).is_err());
    }

    #[test]
    fn four_speakers_classified_after_training() {
        let w = world();
        let p = generate_population(&w, 4, 5, 0).unwrap();
        let cfg = EmbedderConfig::default();
        let (e, report) = train_embedder_on(&w, &p, &cfg, 11).unwrap();
        assert!(report.held_out_accuracy >= 0.9, "{}", report.held_out_accuracy);
        assert!(e.is_frozen());
        assert!(report.losses.last().unwrap() < &report.losses[0]);
        let (e2, _) = train_embedder_on(&w, &p, &cfg, 11).unwrap();
        assert_eq!(e.store, e2.store);
    }

    #[test]
    fn trained_embedder_verifies_unseen_speakers() {
        let w = world();
        let (e, _) = train_embedder(&w, &EmbedderConfig::default(), 21).unwrap();
        let held_out = generate_population(&w, 6, 999, 500).unwrap();
        let trials = make_trials(&w, &held_out, 4, 3);
        let eer = verification_eer(&e, &trials).unwrap();
        assert!(eer <= 0.1, "EER {eer}");

        let clip = &trials[0].a;
        let half: Vec<f64> = clip.iter().map(|v| 0.5 * v).collect();
        let c = cosine(&e.embed(clip).unwrap(), &e.embed(&half).unwrap());
        assert!(c >= 0.99, "{c}");

        let bytes = encode_checkpoint(&e.to_checkpoint()).unwrap();
        let back = SpeakerEmbedder::from_checkpoint(&decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(back, e);
        assert!(back.is_frozen());
    }

    #[test]
    fn eer_extremes() {
        let separated = vec![(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        assert_eq!(equal_error_rate(&separated).unwrap(), 0.0);
        let mut rng = rng_from(5);
        let shuffled: Vec<(f64, bool)> = (0..4000).map(|_| (rng.random::<f64>(), rng.random_bool(0.5))).collect();
        let eer = equal_error_rate(&shuffled).unwrap();
        assert!((eer - 0.5).abs() < 0.05, "{eer}");
        assert!(equal_error_rate(&[(0.3, true)]).is_err());
    }
}
