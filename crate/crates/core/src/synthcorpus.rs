//! Deterministic synthetic audiovisual scenarios.
//!
//! Every speaker carries a latent voiceprint and faceprint. Audio is emitted
//! in 10 ms chunks as `envelope · (G·voiceprint + jitter)` with a corpus-wide
//! projection `G`; a candidate's face frame is `reshape(P·faceprint) + noise`
//! plus a 4×4 mouth patch whose amplitude follows the candidate's own speech
//! envelope while (and only while) they speak. Off-screen confusers speak
//! into the mixture without owning a track.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, normalize_in_place, Tensor};
use crate::rng::{derive_named, derive_seed, normal, rng_from};

/// Shape of the synthetic world shared by every corpus of an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub voice_dim: usize,
    pub face_dim: usize,
    pub height: usize,
    pub width: usize,
    pub sample_rate: u32,
    pub fps: u32,
    pub chunk_len: usize,
    pub emission_scale: f64,
    pub jitter: f64,
    pub face_noise: f64,
    pub mouth_amplitude: f64,
    pub mouth_row: usize,
    pub mouth_col: usize,
    /// Rank of the per-scenario lighting pattern.
    pub lighting_dim: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            voice_dim: 8,
            face_dim: 8,
            height: 16,
            width: 16,
            sample_rate: 16_000,
            fps: 30,
            chunk_len: 160,
            emission_scale: 0.1,
            jitter: 0.3,
            face_noise: 0.5,
            mouth_amplitude: 1.5,
            mouth_row: 10,
            mouth_col: 6,
            lighting_dim: 4,
            seed: 1,
        }
    }
}

pub const MOUTH_SIZE: usize = 4;

/// The fixed projections of a world.
#[derive(Clone, Debug, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    /// chunk_len × voice_dim
    pub emission: Tensor,
    /// (height·width) × face_dim
    pub face_projection: Tensor,
    /// (height·width) × lighting_dim
    pub lighting_projection: Tensor,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        if config.voice_dim == 0 || config.face_dim == 0 || config.chunk_len == 0 || config.fps == 0 {
            return Err(Error::config("world dimensions must be positive"));
        }
        if config.mouth_row + MOUTH_SIZE > config.height || config.mouth_col + MOUTH_SIZE > config.width {
            return Err(Error::config("mouth patch does not fit in the frame"));
        }
        let mut rng = rng_from(derive_named(config.seed, "world"));
        let gauss = |rng: &mut crate::rng::Rng, n: usize, s: f64| -> Vec<f64> {
            (0..n).map(|_| s * normal(rng)).collect::<Vec<f64>>()
        };
        let emission = Tensor::matrix(
            config.chunk_len,
            config.voice_dim,
            gauss(&mut rng, config.chunk_len * config.voice_dim, config.emission_scale),
        )?;
        let pixels = config.height * config.width;
        let face_projection = Tensor::matrix(pixels, config.face_dim, gauss(&mut rng, pixels * config.face_dim, 1.0))?;
        let k = config.lighting_dim;
        let lighting_projection = Tensor::new(
            vec![pixels, k],
            gauss(&mut rng, pixels * k, 1.0 / (k.max(1) as f64).sqrt()),
        )?;
        Ok(Self {
            config,
            emission,
            face_projection,
            lighting_projection,
        })
    }

    pub fn pixels(&self) -> usize {
        self.config.height * self.config.width
    }

    pub fn samples_per_frame(&self) -> f64 {
        f64::from(self.config.sample_rate) / f64::from(self.config.fps)
    }

    /// `G·voiceprint`, one chunk of unit-envelope speech without jitter.
    pub fn voice_chunk(&self, voiceprint: &[f64]) -> Vec<f64> {
        let g = &self.emission;
        (0..g.rows())
            .map(|r| g.row(r).iter().zip(voiceprint).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `reshape(P·faceprint)` flattened.
    pub fn face_pattern(&self, faceprint: &[f64]) -> Vec<f64> {
        let p = &self.face_projection;
        (0..p.rows())
            .map(|r| p.row(r).iter().zip(faceprint).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// A scenario's additive lighting pattern, one value per pixel.
    pub fn lighting_pattern(&self, scale: f64, seed: u64) -> Vec<f64> {
        let k = self.config.lighting_dim;
        if k == 0 || scale == 0.0 {
            return vec![0.0; self.pixels()];
        }
        let mut rng = rng_from(seed);
        let z: Vec<f64> = (0..k).map(|_| scale * normal(&mut rng)).collect();
        let r = &self.lighting_projection;
        (0..r.rows())
            .map(|p| r.row(p).iter().zip(&z).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn in_mouth(&self, pixel: usize) -> bool {
        let (r, c) = (pixel / self.config.width, pixel % self.config.width);
        (self.config.mouth_row..self.config.mouth_row + MOUTH_SIZE).contains(&r)
            && (self.config.mouth_col..self.config.mouth_col + MOUTH_SIZE).contains(&c)
    }

    /// Standard deviation of additive noise for a given SNR relative to a
    /// unit-envelope single speaker.
    pub fn noise_std(&self, snr_db: f64) -> f64 {
        self.config.emission_scale / 10f64.powf(snr_db / 20.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpeaker {
    pub id: u32,
    pub voiceprint: Vec<f64>,
    pub faceprint: Vec<f64>,
}

/// Draws unit voice/face prints whose pairwise cosines stay below 0.5.
pub fn generate_population(world: &World, count: usize, seed: u64, first_id: u32) -> Result<Vec<SyntheticSpeaker>> {
    let mut rng = rng_from(seed);
    let mut draw = |dim: usize, existing: &[Vec<f64>]| -> Result<Vec<f64>> {
        for _ in 0..100_000 {
            let mut v: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
            normalize_in_place(&mut v);
            if existing.iter().all(|e| cosine(e, &v) < 0.5) {
                return Ok(v);
            }
        }
        Err(Error::config(format!("cannot place {count} prints with cosine < 0.5 in {dim} dimensions")))
    };
    let mut voices: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut faces: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let v = draw(world.config.voice_dim, &voices)?;
        voices.push(v);
        let f = draw(world.config.face_dim, &faces)?;
        faces.push(f);
    }
    Ok(voices
        .into_iter()
        .zip(faces)
        .enumerate()
        .map(|(i, (voiceprint, faceprint))| SyntheticSpeaker {
            id: first_id + i as u32,
            voiceprint,
            faceprint,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    /// Samples in `[start_s, end_s)`, clamped to the signal.
    pub fn slice_seconds(&self, start_s: f64, end_s: f64) -> Vec<f64> {
        let sr = f64::from(self.sample_rate);
        let a = ((start_s * sr).round().max(0.0) as usize).min(self.samples.len());
        let b = ((end_s * sr).round().max(0.0) as usize).min(self.samples.len());
        self.samples[a..b.max(a)].to_vec()
    }
}

/// One utterance (or diarised segment) on the scenario timeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: u32,
    pub start: f64,
    pub end: f64,
}

impl Utterance {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    pub fn covers(&self, t: f64) -> bool {
        self.start <= t && t < self.end
    }
}

/// Identity-homogeneous candidate face track with framewise labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Track {
    pub id: u32,
    pub scenario: u32,
    /// Ground truth; models never read it.
    pub speaker: u32,
    pub fps: u32,
    /// T × H × W
    pub frames: Tensor,
    pub labels: Vec<bool>,
    pub corruption_mask: Vec<bool>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    pub fn frame_size(&self) -> (usize, usize) {
        (self.frames.shape()[1], self.frames.shape()[2])
    }

    pub fn frame_center(&self, t: usize) -> f64 {
        (t as f64 + 0.5) / f64::from(self.fps)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub id: u32,
    pub visible: Vec<u32>,
    pub offscreen: Vec<u32>,
    pub utterances: Vec<Utterance>,
    pub audio: AudioSignal,
    pub tracks: Vec<Track>,
}

impl Scenario {
    /// Ground-truth diarisation, ordered by start time.
    pub fn diarisation(&self) -> &[Utterance] {
        &self.utterances
    }

    pub fn duration(&self) -> f64 {
        self.audio.duration()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    /// On-screen speakers, one track each.
    pub n_speakers: usize,
    /// Off-screen confusers available per scenario.
    pub n_offscreen: usize,
    /// Corpus-wide speaker population the scenarios draw from.
    pub population: usize,
    pub n_scenarios: usize,
    pub duration_s: f64,
    pub overlap_prob: f64,
    pub confuser_prob: f64,
    pub occlusion_rate: f64,
    /// Per-track occlusion rates are drawn from `rate ± spread`.
    pub occlusion_spread: f64,
    pub blur_rate: f64,
    pub snr_db: f64,
    /// Scale of the per-scenario lighting pattern added to every face.
    pub lighting_scale: f64,
    pub utterance_min_s: f64,
    pub utterance_max_s: f64,
    pub gap_min_s: f64,
    pub gap_max_s: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_speakers: 2,
            n_offscreen: 1,
            population: 8,
            n_scenarios: 16,
            duration_s: 6.0,
            overlap_prob: 0.2,
            confuser_prob: 0.3,
            occlusion_rate: 0.2,
            occlusion_spread: 0.0,
            blur_rate: 0.1,
            snr_db: 10.0,
            lighting_scale: 1.0,
            utterance_min_s: 1.5,
            utterance_max_s: 4.0,
            gap_min_s: 0.2,
            gap_max_s: 1.0,
        }
    }
}

impl ScenarioConfig {
    /// Low SNR, heavy occlusion and frequent off-screen speech.
    pub fn hard() -> Self {
        Self {
            occlusion_rate: 0.4,
            confuser_prob: 0.5,
            snr_db: 5.0,
            ..Self::default()
        }
    }

    /// Clean video, no confusers.
    pub fn easy() -> Self {
        Self {
            occlusion_rate: 0.0,
            blur_rate: 0.0,
            confuser_prob: 0.0,
            n_offscreen: 0,
            snr_db: 20.0,
            lighting_scale: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        unit("overlap_prob", self.overlap_prob)?;
        unit("confuser_prob", self.confuser_prob)?;
        unit("occlusion_rate", self.occlusion_rate)?;
        unit("occlusion_spread", self.occlusion_spread)?;
        unit("blur_rate", self.blur_rate)?;
        if self.n_speakers == 0 {
            return Err(Error::config("n_speakers must be ≥ 1"));
        }
        if self.n_speakers + self.n_offscreen > self.population {
            return Err(Error::config("population smaller than speakers per scenario"));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::config("duration_s must be positive"));
        }
        if !(self.lighting_scale >= 0.0 && self.lighting_scale.is_finite()) {
            return Err(Error::config("lighting_scale must be finite and non-negative"));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::config("snr_db must be finite"));
        }
        if !(self.utterance_min_s > 0.0 && self.utterance_min_s <= self.utterance_max_s) {
            return Err(Error::config("utterance duration range is empty"));
        }
        if !(self.gap_min_s >= 0.0 && self.gap_min_s <= self.gap_max_s) {
            return Err(Error::config("gap range is empty"));
        }
        if self.confuser_prob > 0.0 && self.n_offscreen == 0 {
            return Err(Error::config("confuser_prob > 0 needs n_offscreen ≥ 1"));
        }
        Ok(())
    }
}

/// `round(rate · n)` with ties to even.
pub fn rate_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).round_ties_even().max(0.0) as usize).min(n)
}

#[derive(Clone, Copy, Debug)]
struct Envelope {
    rate_hz: f64,
    phase: f64,
}

impl Envelope {
    fn at(&self, u: &Utterance, t: f64) -> f64 {
        0.35 + 0.65 * (std::f64::consts::PI * self.rate_hz * (t - u.start) + self.phase).sin().abs()
    }
}

/// Timeline and envelopes of a scenario before rendering.
struct Plan {
    utterances: Vec<Utterance>,
    envelopes: Vec<Envelope>,
}

fn plan_timeline(cfg: &ScenarioConfig, visible: &[u32], offscreen: &[u32], rng: &mut impl Rng) -> Plan {
    let mut utterances = Vec::new();
    let mut envelopes = Vec::new();
    let mut t = rng.random_range(0.0..0.5);
    let mut previous: Option<u32> = None;
    let mut overlapping = false;
    while t < cfg.duration_s {
        let pick = |pool: &[u32], rng: &mut dyn rand::RngCore| -> u32 {
            let candidates: Vec<u32> = pool
                .iter()
                .copied()
                .filter(|&s| !(overlapping && Some(s) == previous))
                .collect();
            let pool = if candidates.is_empty() { pool.to_vec() } else { candidates };
            pool[rng.random_range(0..pool.len())]
        };
        let speaker = if !offscreen.is_empty() && rng.random_bool(cfg.confuser_prob) {
            pick(offscreen, rng)
        } else {
            pick(visible, rng)
        };
        let dur = rng.random_range(cfg.utterance_min_s..=cfg.utterance_max_s);
        let end = (t + dur).min(cfg.duration_s);
        utterances.push(Utterance { speaker, start: t, end });
        envelopes.push(Envelope {
            rate_hz: rng.random_range(3.0..5.0),
            phase: rng.random_range(0.0..std::f64::consts::PI),
        });
        previous = Some(speaker);
        let speakers_total = visible.len() + offscreen.len();
        overlapping = speakers_total > 1 && rng.random_bool(cfg.overlap_prob);
        t = if overlapping {
            (end - rng.random_range(0.3..0.8)).max(t + 0.5)
        } else {
            end + rng.random_range(cfg.gap_min_s..=cfg.gap_max_s)
        };
    }
    Plan { utterances, envelopes }
}

/// Envelope of `speaker` at time `t`, or `None` when silent.
fn speaking_envelope(plan: &Plan, speaker: u32, t: f64) -> Option<f64> {
    plan.utterances
        .iter()
        .zip(&plan.envelopes)
        .filter(|(u, _)| u.speaker == speaker && u.covers(t))
        .map(|(u, e)| e.at(u, t))
        .reduce(f64::max)
}

fn render_audio(
    world: &World,
    plan: &Plan,
    speakers: &[SyntheticSpeaker],
    cfg: &ScenarioConfig,
    seed: u64,
    muted: Option<u32>,
) -> AudioSignal {
    let sr = f64::from(world.config.sample_rate);
    let n = (cfg.duration_s * sr).round() as usize;
    let chunk = world.config.chunk_len;
    let mut samples = vec![0.0; n];
    let jitter_std = world.config.jitter * world.config.emission_scale;
    for (ui, (u, env)) in plan.utterances.iter().zip(&plan.envelopes).enumerate() {
        let spk = speakers.iter().find(|s| s.id == u.speaker).expect("speaker in population");
        let base = world.voice_chunk(&spk.voiceprint);
        let mut jrng = rng_from(derive_seed(seed, 1000 + ui as u64));
        let first = (u.start * sr / chunk as f64).floor() as usize;
        let last = ((u.end * sr / chunk as f64).ceil() as usize).min(n.div_ceil(chunk));
        for c in first..last {
            let center = (c as f64 + 0.5) * chunk as f64 / sr;
            let jitter: Vec<f64> = (0..chunk).map(|_| jitter_std * normal(&mut jrng)).collect::<Vec<f64>>();
            if !u.covers(center) || muted == Some(u.speaker) {
                continue;
            }
            let e = env.at(u, center);
            for k in 0..chunk {
                let idx = c * chunk + k;
                if idx < n {
                    samples[idx] += e * (base[k] + jitter[k]);
                }
            }
        }
    }
    let noise_std = world.noise_std(cfg.snr_db);
    let mut nrng = rng_from(derive_named(seed, "noise"));
    for s in samples.iter_mut() {
        let z: f64 = normal(&mut nrng);
        *s = (*s + noise_std * z).clamp(-1.0, 1.0);
    }
    AudioSignal {
        samples,
        sample_rate: world.config.sample_rate,
    }
}

fn render_track(
    world: &World,
    plan: &Plan,
    speaker: &SyntheticSpeaker,
    id: u32,
    scenario: u32,
    frames_total: usize,
    lighting: &[f64],
    rng: &mut impl Rng,
) -> Result<Track> {
    let wc = &world.config;
    let pattern: Vec<f64> = world
        .face_pattern(&speaker.faceprint)
        .iter()
        .zip(lighting)
        .map(|(a, b)| a + b)
        .collect();
    let pixels = world.pixels();
    let mut frames = Vec::with_capacity(frames_total * pixels);
    let mut labels = Vec::with_capacity(frames_total);
    for t in 0..frames_total {
        let center = (t as f64 + 0.5) / f64::from(wc.fps);
        let env = speaking_envelope(plan, speaker.id, center);
        labels.push(env.is_some());
        for (p, &base) in pattern.iter().enumerate() {
            let noise: f64 = normal(rng);
            let mut v = base + wc.face_noise * noise;
            if let (Some(e), true) = (env, world.in_mouth(p)) {
                v += wc.mouth_amplitude * e;
            }
            frames.push(v);
        }
    }
    Ok(Track {
        id,
        scenario,
        speaker: speaker.id,
        fps: wc.fps,
        frames: Tensor::new(vec![frames_total, wc.height, wc.width], frames)?,
        labels,
        corruption_mask: vec![false; frames_total],
    })
}

/// Replaces a contiguous burst of `round(occlusion_rate·T)` frames with pure
/// noise and box-blurs `round(blur_rate·T)` of the remaining frames.
/// Labels are never touched.
pub fn corrupt_video(track: &Track, occlusion_rate: f64, blur_rate: f64, seed: u64) -> Result<Track> {
    if !(0.0..=1.0).contains(&occlusion_rate) || !(0.0..=1.0).contains(&blur_rate) {
        return Err(Error::config("corruption rates must lie in [0, 1]"));
    }
    let mut out = track.clone();
    let n = track.len();
    let (h, w) = track.frame_size();
    let mut rng = rng_from(seed);
    let occluded = rate_count(occlusion_rate, n);
    let start = if occluded < n { rng.random_range(0..=n - occluded) } else { 0 };
    for t in start..start + occluded {
        out.corruption_mask[t] = true;
        let frame = &mut out.frames.data_mut()[t * h * w..(t + 1) * h * w];
        for v in frame.iter_mut() {
            *v = normal(&mut rng);
        }
    }
    let clean: Vec<usize> = (0..n).filter(|&t| !out.corruption_mask[t]).collect();
    let blurred = rate_count(blur_rate, n).min(clean.len());
    for pick in sample(&mut rng, clean.len(), blurred).into_vec() {
        let t = clean[pick];
        out.corruption_mask[t] = true;
        let src = track.frame(t).to_vec();
        let dst = &mut out.frames.data_mut()[t * h * w..(t + 1) * h * w];
        box_blur(&src, dst, h, w);
    }
    Ok(out)
}

fn box_blur(src: &[f64], dst: &mut [f64], h: usize, w: usize) {
    for r in 0..h {
        for c in 0..w {
            let (mut sum, mut count) = (0.0, 0.0);
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        sum += src[rr as usize * w + cc as usize];
                        count += 1.0;
                    }
                }
            }
            dst[r * w + c] = sum / count;
        }
    }
}

/// Builds one scenario from a speaker population. Deterministic in
/// `(world, population, cfg, seed, id)`.
pub fn generate_scenario(
    world: &World,
    population: &[SyntheticSpeaker],
    cfg: &ScenarioConfig,
    seed: u64,
    id: u32,
) -> Result<Scenario> {
    generate_scenario_muted(world, population, cfg, seed, id, None)
}

/// Same as [`generate_scenario`] with one speaker's emissions removed from
/// the mixture (timeline, noise and video unchanged).
pub fn generate_scenario_muted(
    world: &World,
    population: &[SyntheticSpeaker],
    cfg: &ScenarioConfig,
    seed: u64,
    id: u32,
    muted: Option<u32>,
) -> Result<Scenario> {
    cfg.validate()?;
    if population.len() < cfg.n_speakers + cfg.n_offscreen {
        return Err(Error::config("population smaller than speakers per scenario"));
    }
    let mut rng = rng_from(derive_named(seed, "cast"));
    let cast: Vec<u32> = sample(&mut rng, population.len(), cfg.n_speakers + cfg.n_offscreen)
        .into_iter()
        .map(|i| population[i].id)
        .collect();
    let (visible, offscreen) = cast.split_at(cfg.n_speakers);
    let plan = plan_timeline(cfg, visible, offscreen, &mut rng_from(derive_named(seed, "timeline")));
    let audio = render_audio(world, &plan, population, cfg, seed, muted);
    let frames_total = (cfg.duration_s * f64::from(world.config.fps)).round() as usize;
    let lighting = world.lighting_pattern(cfg.lighting_scale, derive_named(seed, "lighting"));
    let mut tracks = Vec::with_capacity(visible.len());
    for (k, &spk) in visible.iter().enumerate() {
        let speaker = population.iter().find(|s| s.id == spk).expect("cast from population");
        let mut vrng = rng_from(derive_seed(derive_named(seed, "video"), k as u64));
        let track_id = id * 16 + k as u32;
        let clean = render_track(world, &plan, speaker, track_id, id, frames_total, &lighting, &mut vrng)?;
        let spread = cfg.occlusion_spread;
        let rate = if spread > 0.0 {
            (cfg.occlusion_rate + vrng.random_range(-spread..=spread)).clamp(0.0, 1.0)
        } else {
            cfg.occlusion_rate
        };
        let corruption_seed = derive_seed(derive_named(seed, "corrupt"), k as u64);
        tracks.push(corrupt_video(&clean, rate, cfg.blur_rate, corruption_seed)?);
    }
    Ok(Scenario {
        id,
        visible: visible.to_vec(),
        offscreen: offscreen.to_vec(),
        utterances: plan.utterances,
        audio,
        tracks,
    })
}

/// Renders `seconds` of one speaker talking continuously with no noise or
/// other speakers. Used for embedder pretraining data and sanity checks.
pub fn render_clean_speech(world: &World, speaker: &SyntheticSpeaker, seconds: f64, seed: u64) -> AudioSignal {
    let cfg = ScenarioConfig {
        duration_s: seconds,
        snr_db: 300.0,
        ..ScenarioConfig::default()
    };
    let mut rng = rng_from(seed);
    let u = Utterance {
        speaker: speaker.id,
        start: 0.0,
        end: seconds,
    };
    let plan = Plan {
        utterances: vec![u],
        envelopes: vec![Envelope {
            rate_hz: rng.random_range(3.0..5.0),
            phase: rng.random_range(0.0..std::f64::consts::PI),
        }],
    };
    render_audio(world, &plan, std::slice::from_ref(speaker), &cfg, seed, None)
}

/// Renders `count` clean frames of a face (no mouth activity).
pub fn render_clean_faces(world: &World, speaker: &SyntheticSpeaker, count: usize, seed: u64) -> Tensor {
    let pattern = world.face_pattern(&speaker.faceprint);
    let mut rng = rng_from(seed);
    let mut data = Vec::with_capacity(count * pattern.len());
    for _ in 0..count {
        for &b in &pattern {
            let z: f64 = normal(&mut rng);
            data.push(b + world.config.face_noise * z);
        }
    }
    Tensor::new(vec![count, world.config.height, world.config.width], data).expect("face frames shape")
}

/// A set of scenarios over one speaker population.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub world: WorldConfig,
    pub config: ScenarioConfig,
    pub seed: u64,
    pub speakers: Vec<SyntheticSpeaker>,
    pub scenarios: Vec<Scenario>,
}

impl Corpus {
    pub fn empty(world: WorldConfig, config: ScenarioConfig, seed: u64) -> Self {
        Self {
            world,
            config,
            seed,
            speakers: Vec::new(),
            scenarios: Vec::new(),
        }
    }

    pub fn tracks(&self) -> impl Iterator<Item = &Track> {
        self.scenarios.iter().flat_map(|s| s.tracks.iter())
    }

    pub fn scenario(&self, id: u32) -> Option<&Scenario> {
        self.scenarios.iter().find(|s| s.id == id)
    }

    pub fn track(&self, id: u32) -> Option<&Track> {
        self.tracks().find(|t| t.id == id)
    }

    pub fn speaker(&self, id: u32) -> Option<&SyntheticSpeaker> {
        self.speakers.iter().find(|s| s.id == id)
    }
}

/// Generates `cfg.n_scenarios` scenarios with per-scenario seeds
/// `derive_seed(seed, index)`.
pub fn generate_corpus(world: &World, population: &[SyntheticSpeaker], cfg: &ScenarioConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let scenarios = (0..cfg.n_scenarios)
        .map(|i| generate_scenario(world, population, cfg, derive_seed(seed, i as u64), i as u32))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        world: world.config.clone(),
        config: cfg.clone(),
        seed,
        speakers: population.to_vec(),
        scenarios,
    })
}

// ---------------------------------------------------------------------------
// Corpus file
//
// "SCANCORP" | u32 version | u64 body_len | body | u32 crc32(body)
// body = u64 header_len | header JSON | speakers | scenarios

const CORPUS_MAGIC: &[u8; 8] = b"SCANCORP";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    version: u32,
    seed: u64,
    speakers: usize,
    scenarios: usize,
    world: WorldConfig,
    config: ScenarioConfig,
}

fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) -> Result<()> {
    buf.write_u64::<LittleEndian>(values.len() as u64)?;
    for &v in values {
        buf.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn put_bools(buf: &mut Vec<u8>, values: &[bool]) -> Result<()> {
    buf.write_u64::<LittleEndian>(values.len() as u64)?;
    buf.extend(values.iter().map(|&b| u8::from(b)));
    Ok(())
}

fn put_u32s(buf: &mut Vec<u8>, values: &[u32]) -> Result<()> {
    buf.write_u64::<LittleEndian>(values.len() as u64)?;
    for &v in values {
        buf.write_u32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn get_len(cur: &mut Cursor<&[u8]>, elem: usize) -> Result<usize> {
    let n = cur.read_u64::<LittleEndian>()? as usize;
    let remaining = cur.get_ref().len() - cur.position() as usize;
    if n.checked_mul(elem).is_none_or(|b| b > remaining) {
        return Err(Error::Format(format!("array of {n} elements exceeds remaining {remaining} bytes")));
    }
    Ok(n)
}

fn get_f64s(cur: &mut Cursor<&[u8]>) -> Result<Vec<f64>> {
    let n = get_len(cur, 8)?;
    let mut v = vec![0.0; n];
    cur.read_f64_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

fn get_bools(cur: &mut Cursor<&[u8]>) -> Result<Vec<bool>> {
    let n = get_len(cur, 1)?;
    let mut v = vec![0u8; n];
    cur.read_exact(&mut v)?;
    Ok(v.into_iter().map(|b| b != 0).collect())
}

fn get_u32s(cur: &mut Cursor<&[u8]>) -> Result<Vec<u32>> {
    let n = get_len(cur, 4)?;
    let mut v = vec![0u32; n];
    cur.read_u32_into::<LittleEndian>(&mut v)?;
    Ok(v)
}

pub fn encode_corpus(corpus: &Corpus) -> Result<Vec<u8>> {
    let header = CorpusHeader {
        version: CORPUS_VERSION,
        seed: corpus.seed,
        speakers: corpus.speakers.len(),
        scenarios: corpus.scenarios.len(),
        world: corpus.world.clone(),
        config: corpus.config.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut body = Vec::new();
    body.write_u64::<LittleEndian>(header.len() as u64)?;
    body.extend_from_slice(&header);
    for s in &corpus.speakers {
        body.write_u32::<LittleEndian>(s.id)?;
        put_f64s(&mut body, &s.voiceprint)?;
        put_f64s(&mut body, &s.faceprint)?;
    }
    for sc in &corpus.scenarios {
        body.write_u32::<LittleEndian>(sc.id)?;
        put_u32s(&mut body, &sc.visible)?;
        put_u32s(&mut body, &sc.offscreen)?;
        body.write_u64::<LittleEndian>(sc.utterances.len() as u64)?;
        for u in &sc.utterances {
            body.write_u32::<LittleEndian>(u.speaker)?;
            body.write_f64::<LittleEndian>(u.start)?;
            body.write_f64::<LittleEndian>(u.end)?;
        }
        body.write_u32::<LittleEndian>(sc.audio.sample_rate)?;
        put_f64s(&mut body, &sc.audio.samples)?;
        body.write_u64::<LittleEndian>(sc.tracks.len() as u64)?;
        for t in &sc.tracks {
            body.write_u32::<LittleEndian>(t.id)?;
            body.write_u32::<LittleEndian>(t.scenario)?;
            body.write_u32::<LittleEndian>(t.speaker)?;
            body.write_u32::<LittleEndian>(t.fps)?;
            let shape = t.frames.shape();
            for &d in shape {
                body.write_u32::<LittleEndian>(d as u32)?;
            }
            put_f64s(&mut body, t.frames.data())?;
            put_bools(&mut body, &t.labels)?;
            put_bools(&mut body, &t.corruption_mask)?;
        }
    }
    let mut out = Vec::with_capacity(body.len() + 24);
    out.extend_from_slice(CORPUS_MAGIC);
    out.write_u32::<LittleEndian>(CORPUS_VERSION)?;
    out.write_u64::<LittleEndian>(body.len() as u64)?;
    out.extend_from_slice(&body);
    out.write_u32::<LittleEndian>(crc32fast::hash(&body))?;
    Ok(out)
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Corpus> {
    if bytes.len() < 8 + 4 {
        return Err(Error::Truncated("corpus shorter than its magic and version".into()));
    }
    if &bytes[..8] != CORPUS_MAGIC {
        return Err(Error::Format("not a corpus file".into()));
    }
    let version = (&bytes[8..12]).read_u32::<LittleEndian>()?;
    if version != CORPUS_VERSION {
        return Err(Error::Version { found: version, expected: CORPUS_VERSION });
    }
    if bytes.len() < 20 {
        return Err(Error::Truncated("corpus header cut short".into()));
    }
    let body_len = (&bytes[12..20]).read_u64::<LittleEndian>()? as usize;
    if bytes.len() != 20 + body_len + 4 {
        return Err(Error::Truncated(format!(
            "declared body of {body_len} bytes, file holds {}",
            bytes.len().saturating_sub(24)
        )));
    }
    let body = &bytes[20..20 + body_len];
    let stored = (&bytes[20 + body_len..]).read_u32::<LittleEndian>()?;
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut cur = Cursor::new(body);
    let hlen = get_len(&mut cur, 1)?;
    let mut hbytes = vec![0u8; hlen];
    cur.read_exact(&mut hbytes)?;
    let header: CorpusHeader = serde_json::from_slice(&hbytes).map_err(|e| Error::Format(e.to_string()))?;
    if header.version != CORPUS_VERSION {
        return Err(Error::Version { found: header.version, expected: CORPUS_VERSION });
    }
    let mut speakers = Vec::with_capacity(header.speakers);
    for _ in 0..header.speakers {
        let id = cur.read_u32::<LittleEndian>()?;
        let voiceprint = get_f64s(&mut cur)?;
        let faceprint = get_f64s(&mut cur)?;
        speakers.push(SyntheticSpeaker { id, voiceprint, faceprint });
    }
    let mut scenarios = Vec::with_capacity(header.scenarios);
    for _ in 0..header.scenarios {
        let id = cur.read_u32::<LittleEndian>()?;
        let visible = get_u32s(&mut cur)?;
        let offscreen = get_u32s(&mut cur)?;
        let nu = get_len(&mut cur, 20)?;
        let mut utterances = Vec::with_capacity(nu);
        for _ in 0..nu {
            utterances.push(Utterance {
                speaker: cur.read_u32::<LittleEndian>()?,
                start: cur.read_f64::<LittleEndian>()?,
                end: cur.read_f64::<LittleEndian>()?,
            });
        }
        let sample_rate = cur.read_u32::<LittleEndian>()?;
        let samples = get_f64s(&mut cur)?;
        let nt = get_len(&mut cur, 16)?;
        let mut tracks = Vec::with_capacity(nt);
        for _ in 0..nt {
            let tid = cur.read_u32::<LittleEndian>()?;
            let scenario = cur.read_u32::<LittleEndian>()?;
            let speaker = cur.read_u32::<LittleEndian>()?;
            let fps = cur.read_u32::<LittleEndian>()?;
            let mut shape = [0usize; 3];
            for d in shape.iter_mut() {
                *d = cur.read_u32::<LittleEndian>()? as usize;
            }
            let frames = Tensor::new(shape.to_vec(), get_f64s(&mut cur)?)?;
            let labels = get_bools(&mut cur)?;
            let corruption_mask = get_bools(&mut cur)?;
            tracks.push(Track {
                id: tid,
                scenario,
                speaker,
                fps,
                frames,
                labels,
                corruption_mask,
            });
        }
        scenarios.push(Scenario {
            id,
            visible,
            offscreen,
            utterances,
            audio: AudioSignal { samples, sample_rate },
            tracks,
        });
    }
    if (cur.position() as usize) != body.len() {
        return Err(Error::Format("trailing bytes after last scenario".into()));
    }
    Ok(Corpus {
        world: header.world,
        config: header.config,
        seed: header.seed,
        speakers,
        scenarios,
    })
}

pub fn write_corpus(path: &Path, corpus: &Corpus) -> Result<()> {
    let bytes = encode_corpus(corpus)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<Corpus> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    decode_corpus(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> World {
        World::new(WorldConfig::default()).unwrap()
    }

    fn small_cfg() -> ScenarioConfig {
        ScenarioConfig {
            duration_s: 3.0,
            n_scenarios: 2,
            ..ScenarioConfig::default()
        }
    }

    fn pop(w: &World, n: usize) -> Vec<SyntheticSpeaker> {
        generate_population(w, n, 42, 0).unwrap()
    }

    #[test]
    fn population_respects_cosine_bound() {
        let w = world();
        let p = pop(&w, 16);
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                assert!(cosine(&p[i].voiceprint, &p[j].voiceprint) < 0.5);
                assert!(cosine(&p[i].faceprint, &p[j].faceprint) < 0.5);
            }
        }
    }

    #[test]
    fn single_speaker_labels_match_timeline() {
        let w = world();
        let p = pop(&w, 4);
        let cfg = ScenarioConfig {
            n_speakers: 1,
            n_offscreen: 0,
            confuser_prob: 0.0,
            overlap_prob: 0.0,
            occlusion_rate: 0.0,
            blur_rate: 0.0,
            ..small_cfg()
        };
        let sc = generate_scenario(&w, &p, &cfg, 3, 0).unwrap();
        assert_eq!(sc.tracks.len(), 1);
        let track = &sc.tracks[0];
        assert_eq!(track.len(), 90);
        assert_eq!(sc.audio.samples.len(), 48_000);
        for t in 0..track.len() {
            let c = track.frame_center(t);
            let expected = sc.utterances.iter().any(|u| u.speaker == track.speaker && u.covers(c));
            assert_eq!(track.labels[t], expected);
        }
        assert!(track.corruption_mask.iter().all(|&m| !m));
    }

    #[test]
    fn labels_consistent_on_default_config() {
        let w = world();
        let p = pop(&w, 8);
        let corpus = generate_corpus(&w, &p, &small_cfg(), 9).unwrap();
        for sc in &corpus.scenarios {
            for tr in &sc.tracks {
                for t in 0..tr.len() {
                    let c = (t as f64 + 0.5) / f64::from(tr.fps);
                    let covered = sc.utterances.iter().any(|u| u.speaker == tr.speaker && u.covers(c));
                    assert_eq!(tr.labels[t], covered);
                }
            }
            for u in &sc.utterances {
                assert!(!sc.tracks.iter().any(|t| t.speaker == u.speaker) == sc.offscreen.contains(&u.speaker));
            }
        }
    }

    #[test]
    fn full_occlusion_masks_everything_with_pure_noise() {
        let w = world();
        let p = pop(&w, 4);
        let cfg = ScenarioConfig {
            occlusion_rate: 1.0,
            ..small_cfg()
        };
        let sc = generate_scenario(&w, &p, &cfg, 5, 0).unwrap();
        for tr in &sc.tracks {
            assert!(tr.corruption_mask.iter().all(|&m| m));
            let pattern = w.face_pattern(&p.iter().find(|s| s.id == tr.speaker).unwrap().faceprint);
            let mean_corr: f64 = (0..tr.len()).map(|t| cosine(tr.frame(t), &pattern)).sum::<f64>() / tr.len() as f64;
            assert!(mean_corr.abs() < 0.05, "{mean_corr}");
        }
    }

    #[test]
    fn occluded_mouth_energy_at_noise_floor() {
        let w = world();
        let p = pop(&w, 4);
        let cfg = ScenarioConfig {
            occlusion_rate: 0.0,
            blur_rate: 0.0,
            ..small_cfg()
        };
        let sc = generate_scenario(&w, &p, &cfg, 5, 0).unwrap();
        let tr = &sc.tracks[0];
        let occluded = corrupt_video(tr, 1.0, 0.0, 77).unwrap();
        let mouth_mean = |frame: &[f64]| {
            let mut s = 0.0;
            for r in 0..MOUTH_SIZE {
                for c in 0..MOUTH_SIZE {
                    s += frame[(w.config.mouth_row + r) * w.config.width + w.config.mouth_col + c];
                }
            }
            s / (MOUTH_SIZE * MOUTH_SIZE) as f64
        };
        for t in 0..tr.len() {
            // mean of 16 unit-variance samples: 4σ ≈ 1.0, below the smallest mouth amplitude of 0.525
            assert!(mouth_mean(occluded.frame(t)).abs() < 1.0);
        }
        assert_eq!(occluded.labels, tr.labels);
    }

    #[test]
    fn zero_rates_leave_track_unchanged() {
        let w = world();
        let p = pop(&w, 4);
        let sc = generate_scenario(&w, &p, &small_cfg(), 5, 0).unwrap();
        let tr = &sc.tracks[0];
        assert_eq!(&corrupt_video(tr, 0.0, 0.0, 1).unwrap(), tr);
    }

    #[test]
    fn occlusion_count_follows_rounding_rule() {
        let w = world();
        let p = pop(&w, 4);
        let cfg = ScenarioConfig {
            duration_s: 100.0 / 30.0,
            occlusion_rate: 0.0,
            blur_rate: 0.0,
            ..small_cfg()
        };
        let sc = generate_scenario(&w, &p, &cfg, 5, 0).unwrap();
        let tr = &sc.tracks[0];
        assert_eq!(tr.len(), 100);
        let c = corrupt_video(tr, 0.4, 0.0, 3).unwrap();
        assert_eq!(c.corruption_mask.iter().filter(|&&m| m).count(), 40);
        assert_eq!(rate_count(0.25, 10), 2);
        assert_eq!(rate_count(0.35, 10), 4);
        assert_eq!(rate_count(0.3, 10), 3);
    }

    #[test]
    fn invalid_rates_are_config_errors() {
        let w = world();
        let p = pop(&w, 4);
        let cfg = ScenarioConfig {
            occlusion_rate: 1.5,
            ..small_cfg()
        };
        assert!(matches!(generate_scenario(&w, &p, &cfg, 1, 0), Err(Error::Config(_))));
        let sc = generate_scenario(&w, &p, &small_cfg(), 1, 0).unwrap();
        assert!(corrupt_video(&sc.tracks[0], -0.1, 0.0, 1).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let w = world();
        let p = pop(&w, 8);
        let a = encode_corpus(&generate_corpus(&w, &p, &small_cfg(), 17).unwrap()).unwrap();
        let b = encode_corpus(&generate_corpus(&w, &p, &small_cfg(), 17).unwrap()).unwrap();
        assert_eq!(a, b);
        let c = encode_corpus(&generate_corpus(&w, &p, &small_cfg(), 18).unwrap()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn muting_a_speaker_never_adds_energy() {
        let w = world();
        let p = pop(&w, 8);
        for seed in 0..6 {
            let full = generate_scenario(&w, &p, &small_cfg(), seed, 0).unwrap();
            for &spk in full.visible.iter().chain(&full.offscreen) {
                let muted = generate_scenario_muted(&w, &p, &small_cfg(), seed, 0, Some(spk)).unwrap();
                assert_eq!(muted.utterances, full.utterances);
                assert!(muted.audio.energy() <= full.audio.energy());
            }
        }
    }

    #[test]
    fn empty_corpus_round_trips() {
        let c = Corpus::empty(WorldConfig::default(), ScenarioConfig::default(), 3);
        let bytes = encode_corpus(&c).unwrap();
        assert_eq!(decode_corpus(&bytes).unwrap(), c);
    }

    #[test]
    fn corpus_round_trip_and_fault_injection() {
        let w = world();
        let p = pop(&w, 8);
        let corpus = generate_corpus(&w, &p, &small_cfg(), 4).unwrap();
        let bytes = encode_corpus(&corpus).unwrap();
        let back = decode_corpus(&bytes).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(encode_corpus(&back).unwrap(), bytes);

        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 0x01;
        assert!(matches!(decode_corpus(&bad), Err(Error::Checksum { .. })));
        assert!(matches!(decode_corpus(&bytes[..bytes.len() - 100]), Err(Error::Truncated(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(matches!(decode_corpus(&wrong_version), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn file_round_trip() {
        let w = world();
        let p = pop(&w, 8);
        let corpus = generate_corpus(&w, &p, &small_cfg(), 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        write_corpus(&path, &corpus).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), corpus);
        assert!(matches!(read_corpus(&dir.path().join("none")), Err(Error::MissingArtifact(_))));
    }

    /// Nearest-centroid speaker identification from the mean 10 ms chunk of
    /// one-second clean excerpts.
    #[test]
    fn identity_recoverable_from_clean_audio() {
        let w = world();
        let p = pop(&w, 8);
        let chunk = w.config.chunk_len;
        let feature = |samples: &[f64]| {
            let mut m = vec![0.0; chunk];
            for c in samples.chunks_exact(chunk) {
                for (a, b) in m.iter_mut().zip(c) {
                    *a += b;
                }
            }
            normalize_in_place(&mut m);
            m
        };
        let sr = w.config.sample_rate as usize;
        let mut centroids = Vec::new();
        for s in &p {
            let a = render_clean_speech(&w, s, 5.0, 100 + u64::from(s.id));
            let mut c = vec![0.0; chunk];
            for sec in a.samples.chunks_exact(sr) {
                for (x, y) in c.iter_mut().zip(feature(sec)) {
                    *x += y;
                }
            }
            centroids.push(c);
        }
        let (mut correct, mut total) = (0, 0);
        for s in &p {
            let a = render_clean_speech(&w, s, 10.0, 900 + u64::from(s.id));
            for sec in a.samples.chunks_exact(sr) {
                let f = feature(sec);
                let best = (0..p.len())
                    .max_by(|&i, &j| cosine(&f, &centroids[i]).total_cmp(&cosine(&f, &centroids[j])))
                    .unwrap();
                correct += usize::from(p[best].id == s.id);
                total += 1;
            }
        }
        assert!(correct as f64 / total as f64 >= 0.95, "{correct}/{total}");
    }
}
