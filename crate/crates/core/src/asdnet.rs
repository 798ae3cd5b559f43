//! Baseline audiovisual active speaker detection with an optional SCAN
//! branch.
//!
//! Audio and video encoders each map a track to T × d features with a
//! dense lift, a width-3 temporal convolution, layer norm and relu. The two
//! are fused by concatenation or summation and decoded framewise by two
//! temporal convolutions, a dense layer and a sigmoid.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::facelib::{IdentitySpeechLibrary, SegmentRef};
use crate::numerics::{
    Adam, AdamConfig, Checkpoint, Conv1dLayer, Dense, Gradients, LayerNormParams, ParamStore, Tape, Tensor, Var,
};
use crate::rng::{derive_named, derive_seed, rng_from};
use crate::scan::{sample_reference, scan_aux_loss, ReferenceSpeech, ScanConfig, ScanModule};
use crate::spkembed::{grid_phase, window_len, window_start, SpeakerEmbedder};
use crate::synthcorpus::{AudioSignal, Corpus, Track};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    Concat,
    Sum,
}

/// How speaker comparison enters the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScanMode {
    /// Baseline only.
    Off,
    /// SCAN features feed only the auxiliary loss.
    AuxOnly,
    /// SCAN features feed the auxiliary loss and the decoder.
    #[serde(rename = "aux+fuse")]
    AuxFuse,
    /// A single mean reference embedding, projected and broadcast over
    /// time, joins the fused features. No attention, no auxiliary loss.
    TsFuse,
}

impl ScanMode {
    pub fn enabled(self) -> bool {
        self != ScanMode::Off
    }

    fn feeds_decoder(self) -> bool {
        matches!(self, ScanMode::AuxFuse | ScanMode::TsFuse)
    }

    fn has_aux(self) -> bool {
        matches!(self, ScanMode::AuxOnly | ScanMode::AuxFuse)
    }

    pub fn label(self) -> &'static str {
        match self {
            ScanMode::Off => "off",
            ScanMode::AuxOnly => "aux-only",
            ScanMode::AuxFuse => "aux+fuse",
            ScanMode::TsFuse => "tsfuse",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Replace the audio with another scenario's and zero the labels.
    pub negative_prob: f64,
    pub flip_prob: f64,
    pub shift_prob: f64,
    pub max_shift: usize,
    pub rotate_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            negative_prob: 0.1,
            flip_prob: 0.5,
            shift_prob: 0.5,
            max_shift: 2,
            rotate_prob: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AsdConfig {
    pub dim: usize,
    pub fusion: Fusion,
    pub scan_mode: ScanMode,
    pub lambda_aux: f64,
    pub scan: ScanConfig,
    pub window_seconds: f64,
    pub decimation: usize,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate decays along a half cosine to `lr · lr_final_ratio`.
    pub lr_final_ratio: f64,
    pub crop_frames: usize,
    pub augment: AugmentConfig,
}

impl Default for AsdConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            fusion: Fusion::Concat,
            scan_mode: ScanMode::AuxFuse,
            lambda_aux: 0.3,
            scan: ScanConfig::default(),
            window_seconds: 1.0,
            decimation: 100,
            steps: 2000,
            batch: 8,
            lr: 2e-3,
            lr_final_ratio: 0.05,
            crop_frames: 60,
            augment: AugmentConfig::default(),
        }
    }
}

impl AsdConfig {
    pub fn validate(&self) -> Result<()> {
        self.scan.validate()?;
        if self.dim == 0 || self.decimation == 0 || self.batch == 0 || self.crop_frames == 0 {
            return Err(Error::config("asd dim, decimation, batch and crop_frames must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.lr_final_ratio) {
            return Err(Error::config("lr_final_ratio must lie in [0, 1]"));
        }
        if !(self.window_seconds > 0.0) || !(self.lr > 0.0) || !(self.lambda_aux >= 0.0) {
            return Err(Error::config("asd window_seconds and lr must be positive, lambda_aux non-negative"));
        }
        let a = &self.augment;
        for (name, p) in [
            ("negative_prob", a.negative_prob),
            ("flip_prob", a.flip_prob),
            ("shift_prob", a.shift_prob),
            ("rotate_prob", a.rotate_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    /// Audio features per frame after decimation.
    pub fn audio_features(&self, sample_rate: u32) -> usize {
        window_len(sample_rate, self.window_seconds) / self.decimation
    }
}

/// Decimated per-frame audio windows (T × W_s/decimation).
///
/// Each window is snapped forward to the first emission-chunk boundary at or
/// after its start so that feature j always samples the same chunk phase.
pub fn audio_features(
    audio: &AudioSignal,
    frames: usize,
    fps: u32,
    window_seconds: f64,
    decimation: usize,
    chunk_len: usize,
) -> Result<Tensor> {
    if audio.samples.is_empty() || frames == 0 || decimation == 0 {
        return Err(Error::contract("audio_features: empty input"));
    }
    let n = window_len(audio.sample_rate, window_seconds) / decimation;
    let mut out = Vec::with_capacity(frames * n);
    for t in 0..frames {
        let s = window_start(t, fps, audio.sample_rate, window_seconds);
        let aligned = s + grid_phase(s, chunk_len) as i64;
        for j in 0..n {
            let at = aligned + (j * decimation) as i64;
            out.push(if at >= 0 { audio.samples.get(at as usize).copied().unwrap_or(0.0) } else { 0.0 });
        }
    }
    Tensor::matrix(frames, n, out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Encoder {
    lift: Dense,
    conv: Conv1dLayer,
    ln: LayerNormParams,
}

impl Encoder {
    fn new(store: &mut ParamStore, name: &str, input: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            lift: Dense::new(store, &format!("{name}.lift"), input, d, rng),
            conv: Conv1dLayer::new(store, &format!("{name}.conv"), d, d, rng),
            ln: LayerNormParams::new(store, &format!("{name}.ln"), d),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.lift.forward(tape, store, x)?;
        let h = self.conv.forward(tape, store, h)?;
        let h = self.ln.forward(tape, store, h)?;
        tape.relu(h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Decoder {
    conv1: Conv1dLayer,
    conv2: Conv1dLayer,
    out: Dense,
}

impl Decoder {
    fn new(store: &mut ParamStore, input: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv1dLayer::new(store, "decoder.conv1", input, d, rng),
            conv2: Conv1dLayer::new(store, "decoder.conv2", d, d, rng),
            out: Dense::new(store, "decoder.out", d, 1, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, store, h)?;
        let h = tape.relu(h)?;
        let logits = self.out.forward(tape, store, h)?;
        tape.sigmoid(logits)
    }
}

/// One track's network inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct AsdInput {
    /// T × pixels.
    pub frames: Tensor,
    /// T × audio features.
    pub audio: Tensor,
    /// T × d_φ per-frame speaker embeddings of the candidate audio.
    pub queries: Option<Tensor>,
    /// K × d_φ reference embeddings. `None` means the identity is unknown.
    pub refs: Option<Tensor>,
}

impl AsdInput {
    pub fn frames(&self) -> usize {
        self.frames.rows()
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AsdVars {
    pub fa: Var,
    pub fv: Var,
    pub fused: Var,
    /// T × 1 speaking probabilities.
    pub scores: Var,
    /// T × 1 SCAN auxiliary probabilities when computed.
    pub aux: Option<Var>,
    pub scan_features: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AsdModel {
    pub store: ParamStore,
    audio: Encoder,
    video: Encoder,
    decoder: Decoder,
    scan: Option<ScanModule>,
    fusion: Fusion,
    mode: ScanMode,
    pixels: usize,
    audio_dim: usize,
    embed_dim: usize,
}

/// `F_ASV` from `F_A` and `F_V`.
pub fn fuse(tape: &mut Tape, fa: Var, fv: Var, mode: Fusion) -> Result<Var> {
    if tape.shape(fa) != tape.shape(fv) {
        return Err(Error::shape("fuse", tape.shape(fa), tape.shape(fv)));
    }
    match mode {
        Fusion::Concat => tape.concat(&[fa, fv], 1),
        Fusion::Sum => tape.add(fa, fv),
    }
}

impl AsdModel {
    /// `embed_dim` is d_φ and is ignored when SCAN is off.
    pub fn new(cfg: &AsdConfig, pixels: usize, audio_dim: usize, embed_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = rng_from(derive_named(seed, "asd-init"));
        let d = cfg.dim;
        let audio = Encoder::new(&mut store, "audio", audio_dim, d, &mut rng);
        let video = Encoder::new(&mut store, "video", pixels, d, &mut rng);
        let fused = match cfg.fusion {
            Fusion::Concat => 2 * d,
            Fusion::Sum => d,
        };
        let extra = if cfg.scan_mode.feeds_decoder() { cfg.scan.feature_dim } else { 0 };
        let decoder = Decoder::new(&mut store, fused + extra, d, &mut rng);
        let scan = cfg.scan_mode.enabled().then(|| {
            let mut rng = rng_from(derive_named(seed, "scan-init"));
            ScanModule::new(&mut store, "scan", embed_dim, cfg.scan.feature_dim, &mut rng)
        });
        Ok(Self {
            store,
            audio,
            video,
            decoder,
            scan,
            fusion: cfg.fusion,
            mode: cfg.scan_mode,
            pixels,
            audio_dim,
            embed_dim,
        })
    }

    pub fn mode(&self) -> ScanMode {
        self.mode
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn audio_dim(&self) -> usize {
        self.audio_dim
    }

    pub fn scan_module(&self) -> Option<&ScanModule> {
        self.scan.as_ref()
    }

    /// Sets every decoder weight to zero and the output bias to `bias`.
    pub fn set_constant_decoder(&mut self, bias: f64) {
        let d = self.decoder;
        for id in [d.conv1.w, d.conv1.b, d.conv2.w, d.conv2.b, d.out.w] {
            let shape = self.store.get(id).shape().to_vec();
            *self.store.get_mut(id) = Tensor::zeros(&shape);
        }
        *self.store.get_mut(d.out.b) = Tensor::filled(&[1, 1], bias);
    }

    pub fn forward(&self, tape: &mut Tape, input: &AsdInput) -> Result<AsdVars> {
        let t = input.frames();
        if input.audio.rows() != t {
            return Err(Error::shape("asd_forward", input.frames.shape(), input.audio.shape()));
        }
        if input.frames.cols() != self.pixels || input.audio.cols() != self.audio_dim {
            return Err(Error::shape("asd_forward", &[self.pixels, self.audio_dim], &[input.frames.cols(), input.audio.cols()]));
        }
        let a = tape.constant(input.audio.clone());
        let v = tape.constant(input.frames.clone());
        let fa = self.audio.forward(tape, &self.store, a)?;
        let fv = self.video.forward(tape, &self.store, v)?;
        let fused = fuse(tape, fa, fv, self.fusion)?;
        let (mut aux, mut scan_features) = (None, None);
        let decoder_in = match (self.scan, self.mode) {
            (Some(scan), mode) if mode.enabled() => {
                let width = scan.feature_dim(&self.store);
                let features = match (&input.queries, &input.refs, mode) {
                    (_, Some(refs), ScanMode::TsFuse) => Some(self.ts_features(tape, &scan, refs, t)?),
                    (Some(q), Some(refs), _) => {
                        if q.rows() != t {
                            return Err(Error::shape("asd_forward", input.frames.shape(), q.shape()));
                        }
                        let qv = tape.constant(q.clone());
                        let kv = tape.constant(refs.clone());
                        let out = scan.forward(tape, &self.store, qv, kv)?;
                        if mode.has_aux() {
                            aux = Some(out.aux);
                        }
                        Some(out.features)
                    }
                    _ => None,
                };
                scan_features = features;
                if mode.feeds_decoder() {
                    let f = match features {
                        Some(f) => f,
                        None => tape.constant(Tensor::zeros(&[t, width])),
                    };
                    tape.concat(&[fused, f], 1)?
                } else {
                    fused
                }
            }
            _ => fused,
        };
        let scores = self.decoder.forward(tape, &self.store, decoder_in)?;
        Ok(AsdVars {
            fa,
            fv,
            fused,
            scores,
            aux,
            scan_features,
        })
    }

    fn ts_features(&self, tape: &mut Tape, scan: &ScanModule, refs: &Tensor, t: usize) -> Result<Var> {
        if refs.rows() == 0 {
            return Err(Error::EmptyReference);
        }
        let mut mean = vec![0.0; refs.cols()];
        for r in 0..refs.rows() {
            for (m, v) in mean.iter_mut().zip(refs.row(r)) {
                *m += v / refs.rows() as f64;
            }
        }
        crate::numerics::normalize_in_place(&mut mean);
        let e = tape.constant(Tensor::row_vector(mean));
        let h = scan.proj.forward(tape, &self.store, e)?;
        let h = tape.relu(h)?;
        let ones = tape.constant(Tensor::filled(&[t, 1], 1.0));
        tape.matmul(ones, h)
    }

    /// Framewise speaking probabilities.
    pub fn predict(&self, input: &AsdInput) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, input)?;
        Ok(tape.value(v.scores).data().to_vec())
    }

    /// Framewise loss: BCE on scores plus `lambda_aux` × auxiliary BCE when
    /// SCAN supplies one.
    pub fn loss(&self, tape: &mut Tape, input: &AsdInput, labels: &[bool], lambda_aux: f64) -> Result<Var> {
        let v = self.forward(tape, input)?;
        let target = Tensor::matrix(labels.len(), 1, labels.iter().map(|&l| f64::from(u8::from(l))).collect())?;
        let main = tape.bce(v.scores, target)?;
        match v.aux {
            Some(aux) if lambda_aux > 0.0 => {
                let a = scan_aux_loss(tape, aux, labels)?;
                let a = tape.scale(a, lambda_aux)?;
                tape.add(main, a)
            }
            _ => Ok(main),
        }
    }

    pub fn to_checkpoint(&self, cfg: &AsdConfig) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("kind".into(), "asd-model".into());
        meta.insert("pixels".into(), self.pixels.to_string());
        meta.insert("audio_dim".into(), self.audio_dim.to_string());
        meta.insert("embed_dim".into(), self.embed_dim.to_string());
        meta.insert("config".into(), serde_json::to_string(cfg).unwrap_or_default());
        Checkpoint {
            meta,
            params: self.store.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, AsdConfig)> {
        if ckpt.meta.get("kind").map(String::as_str) != Some("asd-model") {
            return Err(Error::Format("checkpoint does not hold an ASD model".into()));
        }
        let num = |key: &str| -> Result<usize> {
            ckpt.meta
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("ASD checkpoint lacks {key}")))
        };
        let cfg: AsdConfig = ckpt
            .meta
            .get("config")
            .and_then(|v| serde_json::from_str(v).ok())
            .ok_or_else(|| Error::Format("ASD checkpoint lacks config".into()))?;
        let mut model = Self::new(&cfg, num("pixels")?, num("audio_dim")?, num("embed_dim")?, 0)?;
        model.store.load_from(&ckpt.params)?;
        Ok((model, cfg))
    }
}

/// Cached per-scenario audio features and query embeddings, plus embedded
/// reference segments.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    audio: BTreeMap<u32, Tensor>,
    queries: BTreeMap<u32, Tensor>,
    refs: BTreeMap<(u32, u64, u64), Vec<f64>>,
}

fn seg_key(s: &SegmentRef) -> (u32, u64, u64) {
    (s.scenario, s.start.to_bits(), s.end.to_bits())
}

impl FeatureBank {
    /// Precomputes features for every scenario. Query and reference
    /// embeddings need an embedder and are skipped without one.
    pub fn build(
        corpus: &Corpus,
        cfg: &AsdConfig,
        embedder: Option<&SpeakerEmbedder>,
        library: Option<&IdentitySpeechLibrary>,
    ) -> Result<Self> {
        let fps = corpus.world.fps;
        let chunk = corpus.world.chunk_len;
        let mut audio = BTreeMap::new();
        let mut queries = BTreeMap::new();
        for s in &corpus.scenarios {
            let t = s.tracks.first().map_or(0, Track::len);
            if t == 0 {
                continue;
            }
            audio.insert(s.id, audio_features(&s.audio, t, fps, cfg.window_seconds, cfg.decimation, chunk)?);
            if let Some(e) = embedder {
                queries.insert(s.id, e.embed_frames(&s.audio, t, fps, cfg.window_seconds)?);
            }
        }
        let mut refs = BTreeMap::new();
        if let (Some(e), Some(lib)) = (embedder, library) {
            let all: Vec<SegmentRef> = lib.entries.iter().flat_map(|en| en.segments.iter().copied()).collect();
            let speech = ReferenceSpeech::from_corpus(corpus, &all)?;
            for seg in &speech.segments {
                refs.insert(seg_key(&seg.source), e.embed_at(&seg.samples, seg.start_sample)?);
            }
        }
        Ok(Self { audio, queries, refs })
    }

    pub fn audio(&self, scenario: u32) -> Result<&Tensor> {
        self.audio
            .get(&scenario)
            .ok_or_else(|| Error::contract(format!("no audio features for scenario {scenario}")))
    }

    pub fn queries(&self, scenario: u32) -> Option<&Tensor> {
        self.queries.get(&scenario)
    }

    pub fn reference_matrix(&self, segments: &[SegmentRef]) -> Result<Tensor> {
        if segments.is_empty() {
            return Err(Error::EmptyReference);
        }
        let rows = segments
            .iter()
            .map(|s| {
                self.refs
                    .get(&seg_key(s))
                    .cloned()
                    .ok_or_else(|| Error::contract("reference segment missing from feature bank"))
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::from_rows(&rows)
    }

    /// Reference embeddings for a track: `None` when its identity is not
    /// enrolled or has no speech.
    pub fn sample_refs(
        &self,
        library: &IdentitySpeechLibrary,
        track: u32,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Option<Tensor>> {
        let Some(identity) = library.identity_of(track) else {
            return Ok(None);
        };
        let segs = sample_reference(library, identity, rng, k)?;
        if segs.is_empty() {
            return Ok(None);
        }
        self.reference_matrix(&segs).map(Some)
    }
}

/// Inputs for a full track, with references drawn from `rng`.
pub fn track_input(
    track: &Track,
    bank: &FeatureBank,
    library: Option<&IdentitySpeechLibrary>,
    cfg: &AsdConfig,
    rng: &mut impl Rng,
) -> Result<AsdInput> {
    let t = track.len();
    let frames = track.frames.clone().reshape(vec![t, track.frames.cols()])?;
    let audio = bank.audio(track.scenario)?.slice_rows(0, t);
    let (queries, refs) = if cfg.scan_mode.enabled() {
        let q = bank.queries(track.scenario).map(|q| q.slice_rows(0, t));
        let r = match library {
            Some(lib) => bank.sample_refs(lib, track.id, cfg.scan.max_refs, rng)?,
            None => None,
        };
        (q, r)
    } else {
        (None, None)
    };
    Ok(AsdInput {
        frames,
        audio,
        queries,
        refs,
    })
}

fn flip_frames(frames: &mut Tensor, h: usize, w: usize) {
    for f in frames.data_mut().chunks_mut(h * w) {
        for row in f.chunks_mut(w) {
            row.reverse();
        }
    }
}

fn shift_frames(frames: &mut Tensor, h: usize, w: usize, dy: i64, dx: i64) {
    for f in frames.data_mut().chunks_mut(h * w) {
        let src = f.to_vec();
        for r in 0..h as i64 {
            for c in 0..w as i64 {
                let (sr, sc) = (r - dy, c - dx);
                f[(r * w as i64 + c) as usize] = if sr >= 0 && sc >= 0 && sr < h as i64 && sc < w as i64 {
                    src[(sr * w as i64 + sc) as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn rotate_frames(frames: &mut Tensor, n: usize) {
    for f in frames.data_mut().chunks_mut(n * n) {
        let src = f.to_vec();
        for r in 0..n {
            for c in 0..n {
                f[c * n + (n - 1 - r)] = src[r * n + c];
            }
        }
    }
}

/// Applies the video augmentations in place. All are label-preserving.
pub fn augment_video(frames: &mut Tensor, h: usize, w: usize, aug: &AugmentConfig, rng: &mut impl Rng) {
    if rng.random::<f64>() < aug.flip_prob {
        flip_frames(frames, h, w);
    }
    if aug.max_shift > 0 && rng.random::<f64>() < aug.shift_prob {
        let m = aug.max_shift as i64;
        let (dy, dx) = (rng.random_range(-m..=m), rng.random_range(-m..=m));
        shift_frames(frames, h, w, dy, dx);
    }
    if h == w && rng.random::<f64>() < aug.rotate_prob {
        rotate_frames(frames, h);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AsdTrainingReport {
    pub losses: Vec<f64>,
    /// Mean loss per pass over the trainable tracks.
    pub epoch_losses: Vec<f64>,
    /// Tracks excluded because their identity has no reference speech.
    pub skipped_tracks: usize,
    pub negatives: usize,
}

/// Minibatch Adam on random temporal crops with augmentation.
pub fn train_asd(
    model: &mut AsdModel,
    corpus: &Corpus,
    bank: &FeatureBank,
    library: Option<&IdentitySpeechLibrary>,
    cfg: &AsdConfig,
    seed: u64,
) -> Result<AsdTrainingReport> {
    cfg.validate()?;
    if model.mode != cfg.scan_mode {
        return Err(Error::config("model and config disagree on scan mode"));
    }
    let scan = cfg.scan_mode.enabled();
    if scan && library.is_none() {
        return Err(Error::contract("SCAN training needs an identity-speech library"));
    }
    let mut tracks: Vec<&Track> = corpus.tracks().collect();
    tracks.sort_by_key(|t| t.id);
    let total = tracks.len();
    if scan {
        let lib = library.expect("checked above");
        tracks.retain(|t| !lib.segments_for_track(t.id).is_empty());
    }
    let skipped_tracks = total - tracks.len();
    if tracks.is_empty() {
        return Err(Error::contract("no trainable tracks"));
    }
    let scenarios: Vec<u32> = corpus.scenarios.iter().map(|s| s.id).collect();
    let (h, w) = tracks[0].frame_size();
    let mut rng = rng_from(derive_named(seed, "asd-train"));
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let steps_per_epoch = tracks.len().div_ceil(cfg.batch).max(1);
    let mut order: Vec<usize> = (0..tracks.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut negatives = 0;
    for step in 0..cfg.steps {
        let progress = step as f64 / cfg.steps as f64;
        let r = cfg.lr_final_ratio;
        adam.config.lr = cfg.lr * (r + (1.0 - r) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut grads = Gradients::zeros_like(&model.store);
        let mut step_loss = 0.0;
        for _ in 0..cfg.batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let track = tracks[order[cursor]];
            cursor += 1;
            let n = track.len();
            let len = cfg.crop_frames.min(n);
            let start = rng.random_range(0..=n - len);
            let mut frames = track.frames.clone().reshape(vec![n, h * w])?.slice_rows(start, start + len);
            augment_video(&mut frames, h, w, &cfg.augment, &mut rng);
            let mut labels = track.labels[start..start + len].to_vec();
            let mut source = track.scenario;
            if scenarios.len() > 1 && rng.random::<f64>() < cfg.augment.negative_prob {
                let others: Vec<u32> = scenarios.iter().copied().filter(|&s| s != track.scenario).collect();
                source = others[rng.random_range(0..others.len())];
                labels.iter_mut().for_each(|l| *l = false);
                negatives += 1;
            }
            let src_audio = bank.audio(source)?;
            if src_audio.rows() < start + len {
                return Err(Error::contract("negative sample audio shorter than the crop"));
            }
            let audio = src_audio.slice_rows(start, start + len);
            let (queries, refs) = if scan {
                let q = bank.queries(source).map(|q| q.slice_rows(start, start + len));
                let r = bank.sample_refs(library.expect("checked above"), track.id, cfg.scan.max_refs, &mut rng)?;
                (q, r)
            } else {
                (None, None)
            };
            let input = AsdInput {
                frames,
                audio,
                queries,
                refs,
            };
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &input, &labels, cfg.lambda_aux)?;
            step_loss += tape.value(loss).item() / cfg.batch as f64;
            let g = tape.backward(loss, &model.store)?;
            grads.accumulate(&g, 1.0 / cfg.batch as f64);
        }
        adam.step(&mut model.store, &grads)?;
        losses.push(step_loss);
    }
    let epoch_losses = losses
        .chunks(steps_per_epoch)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    Ok(AsdTrainingReport {
        losses,
        epoch_losses,
        skipped_tracks,
        negatives,
    })
}

/// Framewise scores of one track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FramePredictions {
    pub track: u32,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Scores every track of the corpus. References are drawn per track from
/// a seed derived from the track id.
pub fn predict_corpus(
    model: &AsdModel,
    corpus: &Corpus,
    bank: &FeatureBank,
    library: Option<&IdentitySpeechLibrary>,
    cfg: &AsdConfig,
    seed: u64,
) -> Result<Vec<FramePredictions>> {
    let mut tracks: Vec<&Track> = corpus.tracks().collect();
    tracks.sort_by_key(|t| t.id);
    tracks
        .into_iter()
        .map(|track| {
            let mut rng = rng_from(derive_seed(derive_named(seed, "asd-eval-refs"), u64::from(track.id)));
            let input = track_input(track, bank, library, cfg, &mut rng)?;
            Ok(FramePredictions {
                track: track.id,
                scores: model.predict(&input)?,
                labels: track.labels.clone(),
            })
        })
        .collect()
}

/// One record per frame: track id, frame index, score, label.
pub fn predictions_to_text(preds: &[FramePredictions]) -> String {
    let mut out = String::from("track\tframe\tscore\tlabel\n");
    for p in preds {
        for (i, (s, l)) in p.scores.iter().zip(&p.labels).enumerate() {
            out.push_str(&format!("{}\t{}\t{:.9}\t{}\n", p.track, i, s, u8::from(*l)));
        }
    }
    out
}
