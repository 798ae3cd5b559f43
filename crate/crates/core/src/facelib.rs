//! Identity-speech library generation.
//!
//! A frame embedder (pretrained by face classification on its own
//! population) feeds a stack of pre-norm transformer encoder layers that is
//! fine-tuned to spot impostor frames inserted into a track. The mean of the
//! last-layer states is the track's identity embedding; tracks are clustered
//! by cosine threshold and each cluster collects its members' diarised speech.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    cosine, glorot, normalize_in_place, scaled_dot_attention, Adam, AdamConfig, Checkpoint, Dense, Gradients,
    LayerNormParams, ParamId, ParamStore, Tape, Tensor, Var,
};
use crate::rng::{derive_named, derive_seed, rng_from};
use crate::synthcorpus::{generate_population, rate_count, render_clean_faces, Corpus, Track, World};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Incremental enrollment against re-normalised running-mean centroids.
    Centroid,
    /// Transitive closure of pairwise threshold matches.
    UnionFind,
}

/// Where impostor frames come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImpostorSource {
    /// Other identities' tracks in the parent's scenario, falling back to
    /// the whole corpus when the scenario has none.
    Scenario,
    /// Other identities' tracks anywhere in the corpus.
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaceConfig {
    pub frame_dim: usize,
    /// Full-scale models use 1024.
    pub model_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub impostor_rate: f64,
    pub impostor_source: ImpostorSource,
    pub threshold: f64,
    pub min_speech_s: f64,
    pub aggregation: Aggregation,
    pub crop_frames: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fine-tuning learning rate decays along a half cosine to
    /// `lr · lr_final_ratio`.
    pub lr_final_ratio: f64,
    pub finetune_frame_embedder: bool,
    /// Train against native targets instead of impostor targets.
    pub invert_labels: bool,
    pub pretrain_speakers: usize,
    pub pretrain_frames: usize,
    pub pretrain_steps: usize,
}

impl Default for FaceConfig {
    fn default() -> Self {
        Self {
            frame_dim: 32,
            model_dim: 32,
            heads: 8,
            layers: 4,
            ff_dim: 64,
            impostor_rate: 0.3,
            impostor_source: ImpostorSource::Scenario,
            threshold: 0.9,
            min_speech_s: 2.5,
            aggregation: Aggregation::Centroid,
            crop_frames: 30,
            steps: 2000,
            batch: 4,
            lr: 2e-3,
            lr_final_ratio: 0.05,
            finetune_frame_embedder: true,
            invert_labels: false,
            pretrain_speakers: 24,
            pretrain_frames: 40,
            pretrain_steps: 300,
        }
    }
}

impl FaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config("model_dim must be a positive multiple of heads"));
        }
        if !(0.0..=1.0).contains(&self.impostor_rate) {
            return Err(Error::config("impostor_rate must lie in [0, 1]"));
        }
        if !(self.threshold > -1.0 && self.threshold <= 1.0) {
            return Err(Error::config("threshold must lie in (-1, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lr_final_ratio) {
            return Err(Error::config("lr_final_ratio must lie in [0, 1]"));
        }
        if self.crop_frames == 0 || self.batch == 0 {
            return Err(Error::config("crop_frames and batch must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct EncoderLayer {
    ln1: LayerNormParams,
    q: Dense,
    /// Key projection, no bias.
    k: ParamId,
    v: Dense,
    o: Dense,
    ln2: LayerNormParams,
    ff1: Dense,
    ff2: Dense,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, name: &str, dm: usize, ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNormParams::new(store, &format!("{name}.ln1"), dm),
            q: Dense::new(store, &format!("{name}.q"), dm, dm, rng),
            k: store.add(format!("{name}.k.w"), glorot(rng, dm, dm)),
            v: Dense::new(store, &format!("{name}.v"), dm, dm, rng),
            o: Dense::new(store, &format!("{name}.o"), dm, dm, rng),
            ln2: LayerNormParams::new(store, &format!("{name}.ln2"), dm),
            ff1: Dense::new(store, &format!("{name}.ff1"), dm, ff, rng),
            ff2: Dense::new(store, &format!("{name}.ff2"), ff, dm, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, heads: usize) -> Result<(Var, Vec<Var>)> {
        let h = self.ln1.forward(tape, store, x)?;
        let q = self.q.forward(tape, store, h)?;
        let wk = tape.param(store, self.k);
        let k = tape.matmul(h, wk)?;
        let v = self.v.forward(tape, store, h)?;
        let dm = tape.shape(q)[1];
        let dk = dm / heads;
        let mut outs = Vec::with_capacity(heads);
        let mut weights = Vec::with_capacity(heads);
        for i in 0..heads {
            let qi = tape.slice_cols(q, i * dk, (i + 1) * dk)?;
            let ki = tape.slice_cols(k, i * dk, (i + 1) * dk)?;
            let vi = tape.slice_cols(v, i * dk, (i + 1) * dk)?;
            let (o, w) = scaled_dot_attention(tape, qi, ki, vi)?;
            outs.push(o);
            weights.push(w);
        }
        let cat = tape.concat(&outs, 1)?;
        let a = self.o.forward(tape, store, cat)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, store, x)?;
        let h = self.ff1.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let h = self.ff2.forward(tape, store, h)?;
        Ok((tape.add(x, h)?, weights))
    }
}

/// Frame embedder, transformer encoder stack and impostor head.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceModel {
    pub store: ParamStore,
    frame: Dense,
    input: Dense,
    layers: Vec<EncoderLayer>,
    head: Dense,
    heads: usize,
    pixels: usize,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct VbfrVars {
    /// T′ × 1 impostor probabilities.
    pub probs: Var,
    /// T′ × d_m last-layer states.
    pub states: Var,
    /// Per layer, per head T′ × T′ attention weights.
    pub attention: Vec<Vec<Var>>,
}

impl FaceModel {
    pub fn new(cfg: &FaceConfig, pixels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let frame = Dense::new(&mut store, "face.frame", pixels, cfg.frame_dim, rng);
        let input = Dense::new(&mut store, "face.input", cfg.frame_dim, cfg.model_dim, rng);
        let layers = (0..cfg.layers)
            .map(|l| EncoderLayer::new(&mut store, &format!("face.layer{l}"), cfg.model_dim, cfg.ff_dim, rng))
            .collect();
        let head = Dense::new(&mut store, "face.head", cfg.model_dim, 1, rng);
        Ok(Self {
            store,
            frame,
            input,
            layers,
            head,
            heads: cfg.heads,
            pixels,
        })
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn model_dim(&self) -> usize {
        self.store.get(self.head.w).rows()
    }

    pub fn frame_embed(&self, tape: &mut Tape, frames: Var) -> Result<Var> {
        let h = self.frame.forward(tape, &self.store, frames)?;
        tape.relu(h)
    }

    /// Frames (T′ × pixels) through the encoder stack and impostor head.
    pub fn forward(&self, tape: &mut Tape, frames: Var) -> Result<VbfrVars> {
        let e = self.frame_embed(tape, frames)?;
        let mut x = self.input.forward(tape, &self.store, e)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, w) = layer.forward(tape, &self.store, x, self.heads)?;
            x = y;
            attention.push(w);
        }
        let logits = self.head.forward(tape, &self.store, x)?;
        let probs = tape.sigmoid(logits)?;
        Ok(VbfrVars {
            probs,
            states: x,
            attention,
        })
    }

    fn frame_params(&self) -> [ParamId; 2] {
        [self.frame.w, self.frame.b]
    }

    pub fn to_checkpoint(&self, cfg: &FaceConfig) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "face-model".into());
        meta.insert("pixels".into(), self.pixels.to_string());
        meta.insert("config".into(), serde_json::to_string(cfg).unwrap_or_default());
        Checkpoint {
            meta,
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, FaceConfig)> {
        if ckpt.meta.get("kind").map(String::as_str) != Some("face-model") {
            return Err(Error::Format("checkpoint does not hold a face model".into()));
        }
        let pixels: usize = ckpt
            .meta
            .get("pixels")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format("face checkpoint lacks pixels".into()))?;
        let cfg: FaceConfig = ckpt
            .meta
            .get("config")
            .and_then(|v| serde_json::from_str(v).ok())
            .ok_or_else(|| Error::Format("face checkpoint lacks config".into()))?;
        let mut model = Self::new(&cfg, pixels, &mut rng_from(0))?;
        model.store.load_from(&ckpt.params)?;
        Ok((model, cfg))
    }
}

fn flat_frames(frames: &Tensor) -> Result<Tensor> {
    let t = frames.rows();
    frames.clone().reshape(vec![t, frames.cols()])
}

/// Impostor probabilities and last-layer states for a frame sequence.
pub fn vbfr_forward(model: &FaceModel, frames: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if frames.rank() < 2 || frames.rows() == 0 {
        return Err(Error::contract("vbfr_forward needs at least one frame"));
    }
    if frames.cols() != model.pixels {
        return Err(Error::shape("vbfr_forward", frames.shape(), &[model.pixels]));
    }
    let mut tape = Tape::new();
    let x = tape.constant(flat_frames(frames)?);
    let out = model.forward(&mut tape, x)?;
    Ok((tape.value(out.probs).data().to_vec(), tape.value(out.states).clone()))
}

/// Unit-normalised temporal mean of the last-layer states.
pub fn identity_embedding(model: &FaceModel, track: &Track) -> Result<Vec<f64>> {
    if track.is_empty() {
        return Err(Error::contract("identity_embedding: empty track"));
    }
    let (_, states) = vbfr_forward(model, &track.frames)?;
    Ok(mean_rows_normalized(&states))
}

/// Unit-normalised temporal mean of per-frame embeddings, without the
/// encoder stack.
pub fn frame_mean_embedding(model: &FaceModel, track: &Track) -> Result<Vec<f64>> {
    if track.is_empty() {
        return Err(Error::contract("frame_mean_embedding: empty track"));
    }
    let mut tape = Tape::new();
    let x = tape.constant(flat_frames(&track.frames)?);
    let e = model.frame_embed(&mut tape, x)?;
    Ok(mean_rows_normalized(tape.value(e)))
}

fn mean_rows_normalized(m: &Tensor) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (a, v) in acc.iter_mut().zip(m.row(r)) {
            *a += v;
        }
    }
    for a in acc.iter_mut() {
        *a /= m.rows() as f64;
    }
    normalize_in_place(&mut acc);
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub accuracy: f64,
}

/// Builds a face model whose frame embedder is pretrained by cosine-softmax
/// face classification on a population disjoint from any corpus.
pub fn pretrained_face_model(world: &World, cfg: &FaceConfig, seed: u64) -> Result<(FaceModel, PretrainReport)> {
    let mut rng = rng_from(derive_named(seed, "face-init"));
    let mut model = FaceModel::new(cfg, world.pixels(), &mut rng)?;
    if cfg.pretrain_steps == 0 {
        return Ok((
            model,
            PretrainReport {
                losses: vec![],
                accuracy: 0.0,
            },
        ));
    }
    let people = generate_population(world, cfg.pretrain_speakers, derive_named(seed, "face-population"), 200_000)?;
    let mouth: Vec<bool> = (0..world.pixels()).map(|p| world.in_mouth(p)).collect();
    let make = |frames_per: usize, s: u64| -> Result<(Tensor, Vec<usize>)> {
        let mut r = rng_from(s);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (class, p) in people.iter().enumerate() {
            let faces = render_clean_faces(world, p, frames_per, derive_seed(s, class as u64));
            for f in 0..frames_per {
                let amp = if r.random_bool(0.5) { r.random_range(0.0..world.config.mouth_amplitude) } else { 0.0 };
                data.extend(faces.row(f).iter().zip(&mouth).map(|(&v, &m)| if m { v + amp } else { v }));
                labels.push(class);
            }
        }
        Ok((Tensor::matrix(labels.len(), world.pixels(), data)?, labels))
    };
    let (train_x, train_y) = make(cfg.pretrain_frames, derive_named(seed, "face-pretrain"))?;
    let (test_x, test_y) = make(10, derive_named(seed, "face-pretrain-test"))?;
    let mut head_store = ParamStore::new();
    let head = Dense::new(&mut head_store, "pretrain.head", cfg.frame_dim, people.len(), &mut rng);
    let [fw, fb] = model.frame_params();
    let head_w = model.store.add("pretrain.head.w", head_store.get(head.w).clone());
    let head_b = model.store.add("pretrain.head.b", head_store.get(head.b).clone());
    let tmp_head = Dense { w: head_w, b: head_b };
    for id in model.store.ids().collect::<Vec<_>>() {
        let keep = id == fw || id == fb || id == head_w || id == head_b;
        model.store.set_param_frozen(id, !keep);
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let logits_of = |model: &FaceModel, tape: &mut Tape, x: Tensor| -> Result<Var> {
        let xv = tape.constant(x);
        let e = model.frame_embed(tape, xv)?;
        let e = tape.normalize_rows(e)?;
        let e = tape.scale(e, 8.0)?;
        tmp_head.forward(tape, &model.store, e)
    };
    let mut order: Vec<usize> = (0..train_y.len()).collect();
    let mut losses = Vec::with_capacity(cfg.pretrain_steps);
    let batch = 64;
    let mut cursor = order.len();
    for _ in 0..cfg.pretrain_steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
        let mut tape = Tape::new();
        let logits = logits_of(&model, &mut tape, train_x.select_rows(&idx))?;
        let loss = tape.softmax_cross_entropy(logits, &y)?;
        losses.push(tape.value(loss).item());
        let g = tape.backward(loss, &model.store)?;
        adam.step(&mut model.store, &g)?;
    }
    let mut tape = Tape::new();
    let logits = logits_of(&model, &mut tape, test_x)?;
    let l = tape.value(logits);
    let correct = (0..test_y.len())
        .filter(|&i| {
            let row = l.row(i);
            (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])) == Some(test_y[i])
        })
        .count();
    let accuracy = correct as f64 / test_y.len() as f64;

    // Rebuild without the temporary head, keeping initial encoder weights.
    let mut fresh = FaceModel::new(cfg, world.pixels(), &mut rng_from(derive_named(seed, "face-init")))?;
    let (fw2, fb2) = (fresh.frame.w, fresh.frame.b);
    *fresh.store.get_mut(fw2) = model.store.get(fw).clone();
    *fresh.store.get_mut(fb2) = model.store.get(fb).clone();
    Ok((fresh, PretrainReport { losses, accuracy }))
}

/// Parent track with impostor frames inserted.
#[derive(Clone, Debug, PartialEq)]
pub struct PollutedTrack {
    /// T′ × H × W
    pub frames: Tensor,
    pub native_mask: Vec<bool>,
    pub parent: u32,
    /// Source track of every impostor frame, in order of appearance.
    pub impostors: Vec<u32>,
}

impl PollutedTrack {
    pub fn len(&self) -> usize {
        self.native_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.native_mask.is_empty()
    }

    /// Native frames in order.
    pub fn native_frames(&self) -> Tensor {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| self.native_mask[i]).collect();
        self.frames.select_rows(&idx)
    }
}

/// Inserts `round(rate·T)` frames drawn uniformly over all pool frames at
/// uniformly random positions; the track lengthens to `T + n`.
pub fn pollute_track(parent: &Track, pool: &[&Track], rate: f64, seed: u64) -> Result<PollutedTrack> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::config("impostor rate must lie in [0, 1]"));
    }
    if pool.iter().any(|t| t.speaker == parent.speaker) {
        return Err(Error::contract("impostor pool must not contain the parent's identity"));
    }
    let t = parent.len();
    let n = rate_count(rate, t);
    let total: usize = pool.iter().map(|p| p.len()).sum();
    if n > 0 && total == 0 {
        return Err(Error::contract("empty impostor pool"));
    }
    let mut rng = rng_from(seed);
    let mut draws = Vec::with_capacity(n);
    for _ in 0..n {
        let mut k = rng.random_range(0..total);
        let mut src = 0;
        while k >= pool[src].len() {
            k -= pool[src].len();
            src += 1;
        }
        draws.push((src, k));
    }
    let mut slots = vec![false; t + n];
    for s in sample(&mut rng, t + n, n).into_vec() {
        slots[s] = true;
    }
    let (h, w) = parent.frame_size();
    let mut data = Vec::with_capacity((t + n) * h * w);
    let mut native_mask = Vec::with_capacity(t + n);
    let mut impostors = Vec::with_capacity(n);
    let (mut next_native, mut next_imp) = (0, 0);
    for &is_imp in &slots {
        if is_imp {
            let (src, k) = draws[next_imp];
            next_imp += 1;
            data.extend_from_slice(pool[src].frame(k));
            impostors.push(pool[src].id);
            native_mask.push(false);
        } else {
            data.extend_from_slice(parent.frame(next_native));
            next_native += 1;
            native_mask.push(true);
        }
    }
    Ok(PollutedTrack {
        frames: Tensor::new(vec![t + n, h, w], data)?,
        native_mask,
        parent: parent.id,
        impostors,
    })
}

/// Frames `start..start+len` of a track.
pub fn crop_track(track: &Track, start: usize, len: usize) -> Track {
    let end = (start + len).min(track.len());
    Track {
        id: track.id,
        scenario: track.scenario,
        speaker: track.speaker,
        fps: track.fps,
        frames: track.frames.slice_rows(start, end),
        labels: track.labels[start..end].to_vec(),
        corruption_mask: track.corruption_mask[start..end].to_vec(),
    }
}

fn random_crop(track: &Track, len: usize, rng: &mut impl Rng) -> Track {
    if track.len() <= len {
        return track.clone();
    }
    let start = rng.random_range(0..=track.len() - len);
    crop_track(track, start, len)
}

fn impostor_pool<'a>(tracks: &[&'a Track], parent: &Track, source: ImpostorSource) -> Vec<&'a Track> {
    let others = tracks.iter().copied().filter(|t| t.speaker != parent.speaker);
    if source == ImpostorSource::Scenario {
        let local: Vec<&Track> = others.clone().filter(|t| t.scenario == parent.scenario).collect();
        if !local.is_empty() {
            return local;
        }
    }
    others.collect()
}

fn targets(p: &PollutedTrack, invert: bool) -> Vec<f64> {
    p.native_mask
        .iter()
        .map(|&native| if native == invert { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VbfrReport {
    pub pretrain: Option<PretrainReport>,
    pub losses: Vec<f64>,
    pub held_out_accuracy: Option<f64>,
}

fn distinct_identities(corpus: &Corpus) -> usize {
    corpus.tracks().map(|t| t.speaker).collect::<BTreeSet<_>>().len()
}

/// Self-supervised impostor-frame training on crops of the corpus tracks.
pub fn vbfr_train(
    model: &mut FaceModel,
    corpus: &Corpus,
    held_out: Option<&Corpus>,
    cfg: &FaceConfig,
    seed: u64,
) -> Result<VbfrReport> {
    cfg.validate()?;
    if distinct_identities(corpus) < 2 {
        return Err(Error::contract("vbfr_train needs at least 2 distinct identities"));
    }
    let tracks: Vec<&Track> = corpus.tracks().collect();
    model.store.set_frozen(false);
    if !cfg.finetune_frame_embedder {
        for id in model.frame_params() {
            model.store.set_param_frozen(id, true);
        }
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut rng = rng_from(derive_named(seed, "vbfr"));
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let r = cfg.lr_final_ratio;
        let progress = step as f64 / cfg.steps as f64;
        adam.config.lr = cfg.lr * (r + (1.0 - r) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut grads = Gradients::zeros_like(&model.store);
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch {
            let parent = tracks[rng.random_range(0..tracks.len())];
            let pool = impostor_pool(&tracks, parent, cfg.impostor_source);
            let crop = random_crop(parent, cfg.crop_frames, &mut rng);
            let polluted = pollute_track(&crop, &pool, cfg.impostor_rate, rng.random())?;
            let mut tape = Tape::new();
            let x = tape.constant(flat_frames(&polluted.frames)?);
            let out = model.forward(&mut tape, x)?;
            let y = targets(&polluted, cfg.invert_labels);
            let loss = tape.bce(out.probs, Tensor::new(vec![y.len(), 1], y)?)?;
            step_loss += tape.value(loss).item() / cfg.batch as f64;
            grads.accumulate(&tape.backward(loss, &model.store)?, 1.0 / cfg.batch as f64);
        }
        losses.push(step_loss);
        adam.step(&mut model.store, &grads)?;
    }
    model.store.set_frozen(false);
    let held_out_accuracy = match held_out {
        Some(c) => Some(impostor_accuracy(model, c, cfg, derive_named(seed, "vbfr-eval"))?),
        None => None,
    };
    Ok(VbfrReport {
        pretrain: None,
        losses,
        held_out_accuracy,
    })
}

/// Frame accuracy of native/impostor decisions on one polluted crop per
/// track of `corpus`, measured against the configured target polarity.
pub fn impostor_accuracy(model: &FaceModel, corpus: &Corpus, cfg: &FaceConfig, seed: u64) -> Result<f64> {
    let tracks: Vec<&Track> = corpus.tracks().collect();
    let mut rng = rng_from(seed);
    let (mut correct, mut total) = (0usize, 0usize);
    for parent in &tracks {
        let pool = impostor_pool(&tracks, parent, cfg.impostor_source);
        if pool.is_empty() {
            continue;
        }
        let crop = random_crop(parent, cfg.crop_frames, &mut rng);
        let polluted = pollute_track(&crop, &pool, cfg.impostor_rate, rng.random())?;
        let (probs, _) = vbfr_forward(model, &polluted.frames)?;
        for (p, y) in probs.iter().zip(targets(&polluted, cfg.invert_labels)) {
            correct += usize::from((*p >= 0.5) == (y == 1.0));
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::contract("impostor_accuracy: no evaluable tracks"));
    }
    Ok(correct as f64 / total as f64)
}

/// One hypothesised identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub members: Vec<u32>,
    pub centroid: Vec<f64>,
}

/// Clusters `(track-id, embedding)` pairs in the given order.
pub fn aggregate_identities(embeddings: &[(u32, Vec<f64>)], threshold: f64, mode: Aggregation) -> Result<Vec<Cluster>> {
    if !(threshold > -1.0 && threshold <= 1.0) {
        return Err(Error::config("threshold must lie in (-1, 1]"));
    }
    match mode {
        Aggregation::Centroid => Ok(aggregate_centroid(embeddings, threshold)),
        Aggregation::UnionFind => Ok(aggregate_union_find(embeddings, threshold)),
    }
}

fn aggregate_centroid(embeddings: &[(u32, Vec<f64>)], threshold: f64) -> Vec<Cluster> {
    let mut clusters: Vec<(Cluster, Vec<f64>)> = Vec::new();
    for (id, e) in embeddings {
        let best = clusters
            .iter()
            .enumerate()
            .map(|(i, (c, _))| (i, cosine(e, &c.centroid)))
            .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((i, s)),
            });
        match best {
            Some((i, s)) if s >= threshold => {
                let (c, sum) = &mut clusters[i];
                c.members.push(*id);
                for (a, v) in sum.iter_mut().zip(e) {
                    *a += v;
                }
                c.centroid = sum.clone();
                normalize_in_place(&mut c.centroid);
            }
            _ => {
                let mut centroid = e.clone();
                normalize_in_place(&mut centroid);
                clusters.push((
                    Cluster {
                        members: vec![*id],
                        centroid,
                    },
                    e.clone(),
                ));
            }
        }
    }
    clusters.into_iter().map(|(c, _)| c).collect()
}

fn aggregate_union_find(embeddings: &[(u32, Vec<f64>)], threshold: f64) -> Vec<Cluster> {
    let n = embeddings.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    for i in 0..n {
        for j in i + 1..n {
            if cosine(&embeddings[i].1, &embeddings[j].1) >= threshold {
                let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let r = root(&mut parent, i);
        groups.entry(r).or_default().push(i);
    }
    groups
        .into_values()
        .map(|idx| {
            let mut centroid = vec![0.0; embeddings[idx[0]].1.len()];
            for &i in &idx {
                for (a, v) in centroid.iter_mut().zip(&embeddings[i].1) {
                    *a += v;
                }
            }
            normalize_in_place(&mut centroid);
            Cluster {
                members: idx.iter().map(|&i| embeddings[i].0).collect(),
                centroid,
            }
        })
        .collect()
}

/// A diarised speech segment within a scenario.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct SegmentRef {
    pub scenario: u32,
    pub start: f64,
    pub end: f64,
}

impl SegmentRef {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    fn key(&self) -> (u32, u64, u64) {
        (self.scenario, self.start.to_bits(), self.end.to_bits())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LibraryEntry {
    pub identity: u32,
    pub centroid: Vec<f64>,
    pub members: Vec<u32>,
    pub segments: Vec<SegmentRef>,
    pub speechless: bool,
}

/// Mapping from enrolled identities to reference speech.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct IdentitySpeechLibrary {
    pub entries: Vec<LibraryEntry>,
}

pub const LIBRARY_VERSION: u32 = 1;

impl IdentitySpeechLibrary {
    pub fn entry(&self, identity: u32) -> Option<&LibraryEntry> {
        self.entries.iter().find(|e| e.identity == identity)
    }

    /// Identity a track was enrolled under.
    pub fn identity_of(&self, track: u32) -> Option<u32> {
        self.entries.iter().find(|e| e.members.contains(&track)).map(|e| e.identity)
    }

    /// Segments available to a track, empty when its identity is unknown or
    /// speechless.
    pub fn segments_for_track(&self, track: u32) -> &[SegmentRef] {
        self.identity_of(track)
            .and_then(|i| self.entry(i))
            .map_or(&[], |e| e.segments.as_slice())
    }

    pub fn segment_count(&self) -> usize {
        self.entries.iter().map(|e| e.segments.len()).sum()
    }

    /// Library structure with identity labels and centroids erased.
    pub fn partition(&self) -> BTreeSet<(Vec<u32>, Vec<(u32, u64, u64)>)> {
        self.entries
            .iter()
            .map(|e| {
                let mut m = e.members.clone();
                m.sort_unstable();
                (m, e.segments.iter().map(SegmentRef::key).collect())
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = LibraryFile {
            version: LIBRARY_VERSION,
            entries: self
                .entries
                .iter()
                .map(|e| EntryFile {
                    identity: e.identity,
                    centroid: e.centroid.iter().map(|v| hex::encode(v.to_bits().to_be_bytes())).collect(),
                    members: e.members.clone(),
                    segments: e
                        .segments
                        .iter()
                        .map(|s| SegmentFile {
                            scenario: s.scenario,
                            start: s.start,
                            end: s.end,
                        })
                        .collect(),
                    speechless: e.speechless,
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LibraryFile = serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        if file.version != LIBRARY_VERSION {
            return Err(Error::Version {
                found: file.version,
                expected: LIBRARY_VERSION,
            });
        }
        let entries = file
            .entries
            .into_iter()
            .map(|e| {
                let centroid = e
                    .centroid
                    .iter()
                    .map(|h| {
                        let bytes = hex::decode(h).map_err(|err| Error::Format(err.to_string()))?;
                        let arr: [u8; 8] = bytes
                            .try_into()
                            .map_err(|_| Error::Format(format!("centroid value {h:?} is not 8 bytes")))?;
                        Ok(f64::from_bits(u64::from_be_bytes(arr)))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                Ok(LibraryEntry {
                    identity: e.identity,
                    centroid,
                    members: e.members,
                    segments: e
                        .segments
                        .into_iter()
                        .map(|s| SegmentRef {
                            scenario: s.scenario,
                            start: s.start,
                            end: s.end,
                        })
                        .collect(),
                    speechless: e.speechless,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.display().to_string()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct LibraryFile {
    version: u32,
    entries: Vec<EntryFile>,
}

#[derive(Serialize, Deserialize)]
struct EntryFile {
    identity: u32,
    centroid: Vec<String>,
    members: Vec<u32>,
    segments: Vec<SegmentFile>,
    speechless: bool,
}

#[derive(Serialize, Deserialize)]
struct SegmentFile {
    scenario: u32,
    start: f64,
    end: f64,
}

/// Each cluster collects the diarised segments of its member tracks'
/// speakers in their scenarios, keeping those of at least `min_duration`
/// seconds. Identity ids are cluster indices.
pub fn build_library(clusters: &[Cluster], corpus: &Corpus, min_duration: f64) -> Result<IdentitySpeechLibrary> {
    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(clusters.len());
    for (i, c) in clusters.iter().enumerate() {
        let mut segments = Vec::new();
        for &tid in &c.members {
            if !seen.insert(tid) {
                return Err(Error::contract(format!("track {tid} assigned to two identities")));
            }
            let track = corpus
                .track(tid)
                .ok_or_else(|| Error::contract(format!("track {tid} not in corpus")))?;
            let scenario = corpus
                .scenario(track.scenario)
                .ok_or_else(|| Error::contract(format!("scenario {} not in corpus", track.scenario)))?;
            for u in scenario.diarisation() {
                if u.speaker == track.speaker && u.duration() >= min_duration {
                    segments.push(SegmentRef {
                        scenario: scenario.id,
                        start: u.start,
                        end: u.end,
                    });
                }
            }
        }
        segments.sort_by(|a, b| a.key().cmp(&b.key()));
        segments.dedup_by(|a, b| a.key() == b.key());
        let mut members = c.members.clone();
        members.sort_unstable();
        entries.push(LibraryEntry {
            identity: i as u32,
            centroid: c.centroid.clone(),
            members,
            speechless: segments.is_empty(),
            segments,
        });
    }
    Ok(IdentitySpeechLibrary { entries })
}

/// Library from the generator's speaker ids; identity ids are speaker ids.
pub fn build_library_oracle(corpus: &Corpus, min_duration: f64) -> Result<IdentitySpeechLibrary> {
    let mut by_speaker: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for t in corpus.tracks() {
        by_speaker.entry(t.speaker).or_default().push(t.id);
    }
    let clusters: Vec<Cluster> = by_speaker
        .values()
        .map(|members| Cluster {
            members: members.clone(),
            centroid: vec![],
        })
        .collect();
    let mut lib = build_library(&clusters, corpus, min_duration)?;
    for (entry, speaker) in lib.entries.iter_mut().zip(by_speaker.keys()) {
        entry.identity = *speaker;
    }
    Ok(lib)
}

/// Identity embeddings for every track of the corpus, in track-id order.
pub fn track_embeddings(model: &FaceModel, corpus: &Corpus, temporal: bool) -> Result<Vec<(u32, Vec<f64>)>> {
    let mut tracks: Vec<&Track> = corpus.tracks().collect();
    tracks.sort_by_key(|t| t.id);
    tracks
        .into_iter()
        .map(|t| {
            let e = if temporal {
                identity_embedding(model, t)?
            } else {
                frame_mean_embedding(model, t)?
            };
            Ok((t.id, e))
        })
        .collect()
}

/// Embeds, clusters and builds the hypothesised library for a corpus.
pub fn enroll(model: &FaceModel, corpus: &Corpus, cfg: &FaceConfig) -> Result<IdentitySpeechLibrary> {
    let embeddings = track_embeddings(model, corpus, true)?;
    let clusters = aggregate_identities(&embeddings, cfg.threshold, cfg.aggregation)?;
    build_library(&clusters, corpus, cfg.min_speech_s)
}

/// Uniform noise-free copy of `track` used by property tests: every frame
/// replaced by frame 0.
pub fn constant_track(track: &Track) -> Track {
    let mut out = track.clone();
    let first = track.frame(0).to_vec();
    let c = first.len();
    for r in 0..track.len() {
        out.frames.data_mut()[r * c..(r + 1) * c].copy_from_slice(&first);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal;
    use crate::synthcorpus::{generate_corpus, ScenarioConfig, WorldConfig};

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    fn tiny_cfg() -> FaceConfig {
        FaceConfig {
            frame_dim: 8,
            model_dim: 8,
            heads: 2,
            layers: 2,
            ff_dim: 8,
            ..FaceConfig::default()
        }
    }

    fn corpus(cfg: ScenarioConfig, seed: u64) -> Corpus {
        let w = world();
        let p = generate_population(&w, cfg.population, 7, 0).unwrap();
        generate_corpus(&w, &p, &cfg, seed).unwrap()
    }

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            n_scenarios: 3,
            duration_s: 1.0,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn pollution_counts_and_round_trip() {
        let c = corpus(small(), 1);
        let tracks: Vec<&Track> = c.tracks().collect();
        let parent = crop_track(tracks[0], 0, 10);
        let pool: Vec<&Track> = tracks.iter().copied().filter(|t| t.speaker != parent.speaker).collect();
        let p = pollute_track(&parent, &pool, 0.3, 5).unwrap();
        assert_eq!(p.len(), 13);
        assert_eq!(p.native_mask.iter().filter(|&&m| !m).count(), 3);
        assert_eq!(p.native_frames(), parent.frames);
        let p0 = pollute_track(&parent, &pool, 0.0, 5).unwrap();
        assert_eq!(p0.frames, parent.frames);
        assert!(p0.native_mask.iter().all(|&m| m));
        assert!(pollute_track(&parent, &[], 0.3, 5).is_err());
        assert!(pollute_track(&parent, &[], 0.0, 5).is_ok());
        let same: Vec<&Track> = tracks.iter().copied().filter(|t| t.speaker == parent.speaker).collect();
        assert!(pollute_track(&parent, &same, 0.3, 5).is_err());
    }

    #[test]
    fn encoder_is_permutation_equivariant() {
        let mut rng = rng_from(2);
        let m = FaceModel::new(&tiny_cfg(), 256, &mut rng).unwrap();
        let frames = Tensor::new(vec![5, 16, 16], (0..5 * 256).map(|_| normal(&mut rng)).collect()).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted = frames.select_rows(&perm);
        let (pa, sa) = vbfr_forward(&m, &frames).unwrap();
        let (pb, sb) = vbfr_forward(&m, &permuted).unwrap();
        for (i, &src) in perm.iter().enumerate() {
            assert!((pa[src] - pb[i]).abs() < 1e-12);
            for (x, y) in sa.row(src).iter().zip(sb.row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let (p1, s1) = vbfr_forward(&m, &frames.slice_rows(0, 1)).unwrap();
        assert_eq!(p1.len(), 1);
        assert_eq!(s1.rows(), 1);
    }

    #[test]
    fn identity_embedding_properties() {
        let c = corpus(small(), 1);
        let m = FaceModel::new(&tiny_cfg(), 256, &mut rng_from(2)).unwrap();
        let t = c.tracks().next().unwrap();
        let e = identity_embedding(&m, t).unwrap();
        assert!((crate::numerics::l2_norm(&e) - 1.0).abs() < 1e-9);

        let constant = constant_track(t);
        let (_, states) = vbfr_forward(&m, &constant.frames.slice_rows(0, 1)).unwrap();
        let mut single = states.row(0).to_vec();
        normalize_in_place(&mut single);
        let ec = identity_embedding(&m, &constant).unwrap();
        for (a, b) in ec.iter().zip(&single) {
            assert!((a - b).abs() < 1e-9);
        }

        let rev: Vec<usize> = (0..t.len()).rev().collect();
        let mut flipped = t.clone();
        flipped.frames = t.frames.select_rows(&rev);
        let ef = identity_embedding(&m, &flipped).unwrap();
        for (a, b) in e.iter().zip(&ef) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregation_rules() {
        let e1 = vec![1.0, 0.0, 0.0];
        let e2 = vec![0.95, (1.0f64 - 0.95 * 0.95).sqrt(), 0.0];
        let e3 = vec![0.0, 0.0, 1.0];
        let same = aggregate_identities(&[(0, e1.clone()), (1, e1.clone())], 0.9, Aggregation::Centroid).unwrap();
        assert_eq!(same.len(), 1);
        let orth = aggregate_identities(&[(0, e1.clone()), (1, e3.clone())], 0.9, Aggregation::Centroid).unwrap();
        assert_eq!(orth.len(), 2);
        let three = aggregate_identities(&[(0, e1), (1, e2), (2, e3)], 0.9, Aggregation::Centroid).unwrap();
        let members: Vec<Vec<u32>> = three.iter().map(|c| c.members.clone()).collect();
        assert_eq!(members, vec![vec![0, 1], vec![2]]);
        assert!(aggregate_identities(&[], -1.0, Aggregation::Centroid).is_err());
    }

    #[test]
    fn union_find_chains_where_centroids_do_not() {
        let a = |deg: f64| vec![deg.to_radians().cos(), deg.to_radians().sin()];
        // neighbours 20° apart (cos 0.94); the third sits 30° from the {0°, 20°} centroid (cos 0.87)
        let e = vec![(0, a(0.0)), (1, a(20.0)), (2, a(40.0))];
        assert_eq!(aggregate_identities(&e, 0.9, Aggregation::UnionFind).unwrap().len(), 1);
        let ce = aggregate_identities(&e, 0.9, Aggregation::Centroid).unwrap();
        let members: Vec<Vec<u32>> = ce.iter().map(|c| c.members.clone()).collect();
        assert_eq!(members, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn library_respects_minimum_duration() {
        let cfg = ScenarioConfig {
            n_scenarios: 4,
            duration_s: 6.0,
            ..ScenarioConfig::default()
        };
        let c = corpus(cfg, 3);
        let lib = build_library_oracle(&c, 2.5).unwrap();
        for e in &lib.entries {
            assert!(e.segments.iter().all(|s| s.duration() >= 2.5));
            assert_eq!(e.speechless, e.segments.is_empty());
        }
        let huge = build_library_oracle(&c, 100.0).unwrap();
        assert!(huge.entries.iter().all(|e| e.speechless && e.segments.is_empty()));
        assert_eq!(huge.entries.len(), lib.entries.len());

        // oracle partitions the long diarised segments of on-screen speakers
        let mut expected = BTreeSet::new();
        for sc in &c.scenarios {
            for u in sc.diarisation() {
                if sc.visible.contains(&u.speaker) && u.duration() >= 2.5 {
                    expected.insert((sc.id, u.start.to_bits(), u.end.to_bits()));
                }
            }
        }
        let mut got = BTreeSet::new();
        for e in &lib.entries {
            for s in &e.segments {
                assert!(got.insert(s.key()), "segment in two entries");
            }
        }
        assert_eq!(got, expected);
        for e in &lib.entries {
            assert_eq!(e.members.len(), c.tracks().filter(|t| t.speaker == e.identity).count());
        }
    }

    #[test]
    fn perfect_clusters_reproduce_oracle() {
        let c = corpus(
            ScenarioConfig {
                n_scenarios: 4,
                ..ScenarioConfig::easy()
            },
            3,
        );
        let oracle = build_library_oracle(&c, 2.5).unwrap();
        let mut by: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for t in c.tracks() {
            by.entry(t.speaker).or_default().push(t.id);
        }
        let embeddings: Vec<(u32, Vec<f64>)> = {
            let mut v: Vec<(u32, Vec<f64>)> = c
                .tracks()
                .map(|t| {
                    let mut e = vec![0.0; 16];
                    e[t.speaker as usize] = 1.0;
                    (t.id, e)
                })
                .collect();
            v.sort_by_key(|x| x.0);
            v
        };
        let clusters = aggregate_identities(&embeddings, 0.9, Aggregation::Centroid).unwrap();
        let hyp = build_library(&clusters, &c, 2.5).unwrap();
        assert_eq!(hyp.partition(), oracle.partition());
    }

    #[test]
    fn library_file_round_trip() {
        let c = corpus(small(), 3);
        let mut lib = build_library_oracle(&c, 0.5).unwrap();
        lib.entries[0].centroid = vec![0.1, -1.0 / 3.0, f64::MIN_POSITIVE];
        let text = lib.to_json().unwrap();
        assert_eq!(IdentitySpeechLibrary::from_json(&text).unwrap(), lib);
        let bumped = text.replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(IdentitySpeechLibrary::from_json(&bumped), Err(Error::Version { found: 2, .. })));
    }
}
