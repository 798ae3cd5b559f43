//! Experiment configuration, per-stage recipes, the ablation runner and
//! report rendering.
//!
//! Every stage derives its randomness from one base seed, so a config and a
//! seed fully determine every artifact.

pub mod cli;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::asdnet::{predict_corpus, track_input, train_asd, AsdConfig, AsdModel, FeatureBank, ScanMode};
use crate::facelib::{
    build_library_oracle, enroll, pretrained_face_model, track_embeddings, vbfr_train, FaceConfig, FaceModel,
    IdentitySpeechLibrary, PretrainReport, VbfrReport,
};
use crate::metrics::{average_precision, mean_group_ap, silhouette, similarity_histogram, DistanceMetric, ScoredFrame};
use crate::rng::{derive_named, derive_seed, normal, rng_from};
use crate::spkembed::{train_embedder, EmbedderConfig, EmbedderReport, SpeakerEmbedder};
use crate::synthcorpus::{generate_corpus, generate_population, Corpus, ScenarioConfig, World, WorldConfig};
use crate::{Error, Result};

/// Scenario settings for every corpus an experiment generates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Speakers shared by the train, validation and face corpora.
    pub population: usize,
    /// ASD training scenarios.
    pub train: ScenarioConfig,
    /// ASD validation scenarios.
    pub val: ScenarioConfig,
    /// Face fine-tuning scenarios.
    pub face: ScenarioConfig,
    /// Held-out scenarios for impostor classification accuracy.
    pub face_held_out: ScenarioConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            population: 8,
            train: ScenarioConfig {
                n_scenarios: 64,
                ..ScenarioConfig::hard()
            },
            val: ScenarioConfig {
                n_scenarios: 16,
                ..ScenarioConfig::hard()
            },
            face: ScenarioConfig {
                n_scenarios: 256,
                occlusion_rate: 0.4,
                ..ScenarioConfig::default()
            },
            face_held_out: ScenarioConfig::default(),
        }
    }
}

/// Ablation arm, one row of the results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Baseline,
    ScanHypothesised,
    ScanOracle,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::ScanHypothesised => "scan-hypothesised",
            Arm::ScanOracle => "scan-oracle",
        }
    }

    pub fn uses_scan(self) -> bool {
        self != Arm::Baseline
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    /// Seeds run are `seed, seed + 1, ...`.
    pub runs: usize,
    pub arms: Vec<Arm>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            runs: 3,
            arms: vec![Arm::Baseline, Arm::ScanHypothesised, Arm::ScanOracle],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Score every validation track with pure-noise video and report the
    /// mean score on silent frames during off-screen speech.
    pub false_positive_probe: bool,
    /// Bins of the similarity histograms.
    pub histogram_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            false_positive_probe: true,
            histogram_bins: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub corpus: CorpusConfig,
    pub embedder: EmbedderConfig,
    pub face: FaceConfig,
    pub asd: AsdConfig,
    pub ablation: AblationConfig,
    pub eval: EvalConfig,
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Parses TOML on top of the defaults: keys absent from the file keep
    /// their default values at every nesting level.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let overlay: toml::Value = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let mut base = toml::Value::try_from(Self::default()).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut base, overlay);
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        World::new(self.world.clone())?;
        for c in [&self.corpus.train, &self.corpus.val, &self.corpus.face, &self.corpus.face_held_out] {
            c.validate()?;
            if self.corpus.population < c.n_speakers + c.n_offscreen {
                return Err(Error::config("population smaller than speakers per scenario"));
            }
        }
        self.face.validate()?;
        self.asd.validate()?;
        if self.ablation.runs == 0 {
            return Err(Error::config("ablation.runs must be ≥ 1"));
        }
        if self.ablation.arms.is_empty() {
            return Err(Error::config("ablation.arms must not be empty"));
        }
        if self.ablation.arms.iter().any(|a| a.uses_scan()) && !self.asd.scan_mode.enabled() {
            return Err(Error::config("SCAN arms need asd.scan_mode other than off"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn seeds(&self, base: u64) -> Vec<u64> {
        (0..self.ablation.runs as u64).map(|i| base.wrapping_add(i)).collect()
    }

    /// ASD settings of one arm.
    pub fn arm_config(&self, arm: Arm) -> AsdConfig {
        let mut cfg = self.asd.clone();
        if !arm.uses_scan() {
            cfg.scan_mode = ScanMode::Off;
        }
        cfg
    }
}

/// All corpora of one seed.
#[derive(Clone, Debug)]
pub struct Corpora {
    pub train: Corpus,
    pub val: Corpus,
    pub face: Corpus,
    pub face_held_out: Corpus,
}

impl Corpora {
    pub fn named(&self) -> [(&'static str, &Corpus); 4] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("face", &self.face),
            ("face-held-out", &self.face_held_out),
        ]
    }
}

pub fn generate_corpora(cfg: &ExperimentConfig, seed: u64) -> Result<Corpora> {
    let world = World::new(cfg.world.clone())?;
    let population = generate_population(&world, cfg.corpus.population, derive_named(seed, "population"), 0)?;
    let gen = |c: &ScenarioConfig, stage: &str| generate_corpus(&world, &population, c, derive_named(seed, stage));
    Ok(Corpora {
        train: gen(&cfg.corpus.train, "train-corpus")?,
        val: gen(&cfg.corpus.val, "val-corpus")?,
        face: gen(&cfg.corpus.face, "face-corpus")?,
        face_held_out: gen(&cfg.corpus.face_held_out, "face-held-out-corpus")?,
    })
}

pub fn train_embedder_stage(cfg: &ExperimentConfig, seed: u64) -> Result<(SpeakerEmbedder, EmbedderReport)> {
    let world = World::new(cfg.world.clone())?;
    train_embedder(&world, &cfg.embedder, derive_named(seed, "embedder"))
}

/// Pretrained and fine-tuned face models with the fine-tuning report.
pub struct FaceStage {
    pub pretrained: FaceModel,
    pub finetuned: FaceModel,
    pub report: VbfrReport,
}

pub fn train_face_stage(cfg: &ExperimentConfig, corpora: &Corpora, seed: u64) -> Result<FaceStage> {
    let world = World::new(cfg.world.clone())?;
    let (pretrained, pre): (FaceModel, PretrainReport) =
        pretrained_face_model(&world, &cfg.face, derive_named(seed, "face-pretrain"))?;
    let mut finetuned = pretrained.clone();
    let mut report = vbfr_train(
        &mut finetuned,
        &corpora.face,
        Some(&corpora.face_held_out),
        &cfg.face,
        derive_named(seed, "face-finetune"),
    )?;
    report.pretrain = Some(pre);
    Ok(FaceStage {
        pretrained,
        finetuned,
        report,
    })
}

/// Hypothesised and ground-truth libraries for the ASD corpora.
#[derive(Clone, Debug, PartialEq)]
pub struct Libraries {
    pub train_hypothesised: IdentitySpeechLibrary,
    pub val_hypothesised: IdentitySpeechLibrary,
    pub train_oracle: IdentitySpeechLibrary,
    pub val_oracle: IdentitySpeechLibrary,
}

impl Libraries {
    pub fn for_arm(&self, arm: Arm) -> (Option<&IdentitySpeechLibrary>, Option<&IdentitySpeechLibrary>) {
        match arm {
            Arm::Baseline => (None, None),
            Arm::ScanHypothesised => (Some(&self.train_hypothesised), Some(&self.val_hypothesised)),
            Arm::ScanOracle => (Some(&self.train_oracle), Some(&self.val_oracle)),
        }
    }

    pub fn named(&self) -> [(&'static str, &IdentitySpeechLibrary); 4] {
        [
            ("train-hypothesised", &self.train_hypothesised),
            ("val-hypothesised", &self.val_hypothesised),
            ("train-oracle", &self.train_oracle),
            ("val-oracle", &self.val_oracle),
        ]
    }
}

pub fn enroll_stage(cfg: &ExperimentConfig, face: &FaceModel, corpora: &Corpora) -> Result<Libraries> {
    Ok(Libraries {
        train_hypothesised: enroll(face, &corpora.train, &cfg.face)?,
        val_hypothesised: enroll(face, &corpora.val, &cfg.face)?,
        train_oracle: build_library_oracle(&corpora.train, cfg.face.min_speech_s)?,
        val_oracle: build_library_oracle(&corpora.val, cfg.face.min_speech_s)?,
    })
}

/// Separability of track identity embeddings on the validation corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryQuality {
    /// Pretrained frame embedder, frame-averaged.
    pub frame_mean_silhouette: f64,
    /// Fine-tuned encoder stack, temporally averaged.
    pub temporal_silhouette: f64,
    pub frame_mean_same: f64,
    pub frame_mean_different: f64,
    pub temporal_same: f64,
    pub temporal_different: f64,
    pub hypothesised_identities: usize,
    pub oracle_identities: usize,
    pub partition_matches_oracle: bool,
}

pub fn library_quality(
    cfg: &ExperimentConfig,
    face: &FaceStage,
    val: &Corpus,
    libraries: &Libraries,
) -> Result<LibraryQuality> {
    let stats = |model: &FaceModel, temporal: bool| -> Result<(f64, f64, f64)> {
        let emb = track_embeddings(model, val, temporal)?;
        let labels: Vec<usize> = emb
            .iter()
            .map(|(id, _)| val.track(*id).map(|t| t.speaker as usize).unwrap_or(usize::MAX))
            .collect();
        let vecs: Vec<Vec<f64>> = emb.into_iter().map(|(_, e)| e).collect();
        let s = silhouette(&vecs, &labels, DistanceMetric::Cosine)?;
        let h = similarity_histogram(&vecs, &labels, cfg.eval.histogram_bins)?;
        Ok((s, h.same_mean, h.different_mean))
    };
    let (fs, fsame, fdiff) = stats(&face.pretrained, false)?;
    let (ts, tsame, tdiff) = stats(&face.finetuned, true)?;
    Ok(LibraryQuality {
        frame_mean_silhouette: fs,
        temporal_silhouette: ts,
        frame_mean_same: fsame,
        frame_mean_different: fdiff,
        temporal_same: tsame,
        temporal_different: tdiff,
        hypothesised_identities: libraries.val_hypothesised.entries.len(),
        oracle_identities: libraries.val_oracle.entries.len(),
        partition_matches_oracle: libraries.val_hypothesised.partition() == libraries.val_oracle.partition(),
    })
}

/// A trained arm.
pub struct TrainedArm {
    pub arm: Arm,
    pub config: AsdConfig,
    pub model: AsdModel,
    pub skipped_tracks: usize,
    pub final_loss: f64,
}

pub fn train_arm(
    cfg: &ExperimentConfig,
    arm: Arm,
    embedder: &SpeakerEmbedder,
    corpora: &Corpora,
    libraries: &Libraries,
    seed: u64,
) -> Result<TrainedArm> {
    let asd = cfg.arm_config(arm);
    let (train_lib, _) = libraries.for_arm(arm);
    let emb = asd.scan_mode.enabled().then_some(embedder);
    let bank = FeatureBank::build(&corpora.train, &asd, emb, train_lib)?;
    let world = World::new(cfg.world.clone())?;
    let asd_seed = derive_named(seed, "asd");
    let mut model = AsdModel::new(&asd, world.pixels(), asd.audio_features(world.config.sample_rate), embedder.dim(), asd_seed)?;
    let report = train_asd(&mut model, &corpora.train, &bank, train_lib, &asd, asd_seed)?;
    let tail = report.losses.len().min(20).max(1);
    let final_loss = report.losses.iter().rev().take(tail).sum::<f64>() / tail as f64;
    Ok(TrainedArm {
        arm,
        config: asd,
        model,
        skipped_tracks: report.skipped_tracks,
        final_loss,
    })
}

/// Validation metrics of one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    /// AP over all validation frames pooled.
    pub ap: f64,
    /// Mean of per-track AP over tracks with speech.
    pub track_ap: f64,
    /// Mean score on silent frames during off-screen speech with
    /// pure-noise video.
    pub false_positive_score: Option<f64>,
}

pub fn evaluate_arm(
    cfg: &ExperimentConfig,
    trained: &TrainedArm,
    embedder: &SpeakerEmbedder,
    val: &Corpus,
    libraries: &Libraries,
    seed: u64,
) -> Result<(ArmMetrics, Vec<crate::asdnet::FramePredictions>)> {
    let (_, val_lib) = libraries.for_arm(trained.arm);
    let asd = &trained.config;
    let emb = asd.scan_mode.enabled().then_some(embedder);
    let bank = FeatureBank::build(val, asd, emb, val_lib)?;
    let eval_seed = derive_named(seed, "asd-eval");
    let preds = predict_corpus(&trained.model, val, &bank, val_lib, asd, eval_seed)?;
    let groups: Vec<Vec<ScoredFrame>> = preds
        .iter()
        .map(|p| p.scores.iter().zip(&p.labels).map(|(&score, &label)| ScoredFrame { score, label }).collect())
        .collect();
    let ap = average_precision(&groups.concat())?;
    let track_ap = mean_group_ap(&groups)?;
    let false_positive_score = if cfg.eval.false_positive_probe {
        false_positive_probe(&trained.model, val, &bank, val_lib, asd, eval_seed)?
    } else {
        None
    };
    Ok((
        ArmMetrics {
            ap,
            track_ap,
            false_positive_score,
        },
        preds,
    ))
}

/// Replaces every frame with unit Gaussian noise and averages the scores
/// of frames where the candidate is silent and an off-screen speaker talks.
/// `None` when no such frame exists.
pub fn false_positive_probe(
    model: &AsdModel,
    val: &Corpus,
    bank: &FeatureBank,
    library: Option<&IdentitySpeechLibrary>,
    cfg: &AsdConfig,
    seed: u64,
) -> Result<Option<f64>> {
    let (mut sum, mut count) = (0.0, 0usize);
    for s in &val.scenarios {
        for t in &s.tracks {
            let mut rng = rng_from(derive_seed(derive_named(seed, "asd-eval-refs"), u64::from(t.id)));
            let mut input = track_input(t, bank, library, cfg, &mut rng)?;
            let mut noise = rng_from(derive_seed(derive_named(seed, "noise-video"), u64::from(t.id)));
            for v in input.frames.data_mut() {
                *v = normal(&mut noise);
            }
            let scores = model.predict(&input)?;
            for (i, score) in scores.iter().enumerate() {
                let time = t.frame_center(i);
                let confuser = s.utterances.iter().any(|u| s.offscreen.contains(&u.speaker) && u.covers(time));
                if !t.labels[i] && confuser {
                    sum += score;
                    count += 1;
                }
            }
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub ap: Option<f64>,
    pub track_ap: Option<f64>,
    pub false_positive_score: Option<f64>,
    pub skipped_tracks: usize,
    pub final_loss: Option<f64>,
    /// Set when the arm failed; the other arms still run.
    pub diagnosis: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub embedder_accuracy: f64,
    pub face_held_out_accuracy: Option<f64>,
    pub library: LibraryQuality,
    pub arms: Vec<ArmResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub ap_mean: Option<f64>,
    pub ap_std: Option<f64>,
    pub track_ap_mean: Option<f64>,
    pub false_positive_mean: Option<f64>,
    pub completed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
    pub per_seed: Vec<SeedReport>,
}

/// Wall-clock seconds per stage, kept out of the report so that reports
/// stay byte-reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
}

impl Timings {
    fn time<T>(&mut self, name: String, f: impl FnOnce() -> T) -> T {
        let start = std::time::Instant::now();
        let out = f();
        self.stages.push((name, start.elapsed().as_secs_f64()));
        out
    }
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (Some(m), Some(v.sqrt()))
}

/// Runs every configured arm for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, timings: &mut Timings) -> Result<SeedReport> {
    let corpora = timings.time(format!("{seed}/corpora"), || generate_corpora(cfg, seed))?;
    let (embedder, er) = timings.time(format!("{seed}/embedder"), || train_embedder_stage(cfg, seed))?;
    let face = timings.time(format!("{seed}/face"), || train_face_stage(cfg, &corpora, seed))?;
    let libraries = timings.time(format!("{seed}/enroll"), || enroll_stage(cfg, &face.finetuned, &corpora))?;
    let library = library_quality(cfg, &face, &corpora.val, &libraries)?;
    let mut arms = Vec::with_capacity(cfg.ablation.arms.len());
    for &arm in &cfg.ablation.arms {
        let result = timings.time(format!("{seed}/{}", arm.name()), || -> Result<ArmResult> {
            let trained = train_arm(cfg, arm, &embedder, &corpora, &libraries, seed)?;
            let (m, _) = evaluate_arm(cfg, &trained, &embedder, &corpora.val, &libraries, seed)?;
            Ok(ArmResult {
                arm,
                ap: Some(m.ap),
                track_ap: Some(m.track_ap),
                false_positive_score: m.false_positive_score,
                skipped_tracks: trained.skipped_tracks,
                final_loss: Some(trained.final_loss),
                diagnosis: None,
            })
        });
        arms.push(result.unwrap_or_else(|e| ArmResult {
            arm,
            ap: None,
            track_ap: None,
            false_positive_score: None,
            skipped_tracks: 0,
            final_loss: None,
            diagnosis: Some(e.to_string()),
        }));
    }
    Ok(SeedReport {
        seed,
        embedder_accuracy: er.held_out_accuracy,
        face_held_out_accuracy: face.report.held_out_accuracy,
        library,
        arms,
    })
}

pub fn run_ablation(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<(ExperimentReport, Timings)> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("run_ablation needs at least one seed"));
    }
    let mut timings = Timings::default();
    let per_seed = seeds
        .iter()
        .map(|&s| run_seed(cfg, s, &mut timings))
        .collect::<Result<Vec<_>>>()?;
    let arms = cfg
        .ablation
        .arms
        .iter()
        .map(|&arm| {
            let results: Vec<&ArmResult> = per_seed.iter().flat_map(|s| s.arms.iter().filter(|a| a.arm == arm)).collect();
            let aps: Vec<f64> = results.iter().filter_map(|r| r.ap).collect();
            let track: Vec<f64> = results.iter().filter_map(|r| r.track_ap).collect();
            let fps: Vec<f64> = results.iter().filter_map(|r| r.false_positive_score).collect();
            let (ap_mean, ap_std) = mean_std(&aps);
            ArmSummary {
                arm,
                ap_mean,
                ap_std,
                track_ap_mean: mean_std(&track).0,
                false_positive_mean: mean_std(&fps).0,
                completed: aps.len(),
            }
        })
        .collect();
    Ok((
        ExperimentReport {
            config_hash: cfg.hash(),
            seeds: seeds.to_vec(),
            arms,
            per_seed,
        },
        timings,
    ))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "failed".to_string(), |x| format!("{:.1}", 100.0 * x))
}

fn num(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.3}"))
}

/// Human-readable tables: ASD arms, then library quality per seed.
pub fn render_report(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let seeds: Vec<String> = report.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "config {}", report.config_hash);
    let _ = writeln!(out, "seeds {}", seeds.join(", "));
    let _ = writeln!(out);
    let _ = writeln!(out, "Active speaker detection, validation fold");
    let _ = writeln!(
        out,
        "{:<18} {:<16} {:>12} {:>8} {:>12} {:>10}",
        "System", "Library", "AP (=mAP)", "std", "track mAP", "FP score"
    );
    for a in &report.arms {
        let (system, library) = match a.arm {
            Arm::Baseline => ("baseline", "-"),
            Arm::ScanHypothesised => ("baseline + SCAN", "hypothesised"),
            Arm::ScanOracle => ("baseline + SCAN", "ground truth"),
        };
        let _ = writeln!(
            out,
            "{:<18} {:<16} {:>12} {:>8} {:>12} {:>10}",
            system,
            library,
            pct(a.ap_mean),
            pct(a.ap_std),
            pct(a.track_ap_mean),
            num(a.false_positive_mean)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "AP per seed");
    for s in &report.per_seed {
        let cells: Vec<String> = s.arms.iter().map(|a| format!("{}={}", a.arm.name(), pct(a.ap))).collect();
        let _ = writeln!(out, "  seed {:<6} {}", s.seed, cells.join("  "));
        for a in s.arms.iter().filter(|a| a.diagnosis.is_some()) {
            let _ = writeln!(out, "    {} failed: {}", a.arm.name(), a.diagnosis.as_deref().unwrap_or(""));
        }
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Identity-speech library, validation fold");
    let _ = writeln!(
        out,
        "{:<8} {:>12} {:>12} {:>10} {:>10} {:>8}",
        "seed", "frame-mean", "temporal", "same", "different", "ids"
    );
    for s in &report.per_seed {
        let l = &s.library;
        let _ = writeln!(
            out,
            "{:<8} {:>12.3} {:>12.3} {:>10.3} {:>10.3} {:>8}",
            s.seed,
            l.frame_mean_silhouette,
            l.temporal_silhouette,
            l.temporal_same,
            l.temporal_different,
            format!("{}/{}", l.hypothesised_identities, l.oracle_identities)
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "Stand-in models");
    for s in &report.per_seed {
        let _ = writeln!(
            out,
            "  seed {:<6} speaker accuracy {:.3}  impostor accuracy {}",
            s.seed,
            s.embedder_accuracy,
            num(s.face_held_out_accuracy)
        );
    }
    out
}

pub fn report_to_json(report: &ExperimentReport) -> Result<String> {
    serde_json::to_string_pretty(report).map_err(|e| Error::Format(e.to_string()))
}

pub fn report_from_json(text: &str) -> Result<ExperimentReport> {
    serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_nested_defaults() {
        let cfg = ExperimentConfig::from_toml_str("[corpus.train]\nn_scenarios = 5\n[asd]\nlambda_aux = 0.5\n").unwrap();
        assert_eq!(cfg.corpus.train.n_scenarios, 5);
        assert_eq!(cfg.corpus.train.occlusion_rate, 0.4);
        assert_eq!(cfg.asd.lambda_aux, 0.5);
        assert_eq!(cfg.asd.dim, 32);
        assert_eq!(cfg.face.threshold, 0.9);
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        let other = ExperimentConfig::from_toml_str("[asd]\nlambda_aux = 0.1\n").unwrap();
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_toml_str("[ablation]\nruns = 0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[asd]\nscan_mode = \"off\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str("[corpus.val]\nocclusion_rate = 2.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("not toml [").is_err());
        assert!(ExperimentConfig::from_toml_str("[asd]\nscan_mode = \"off\"\n[ablation]\narms = [\"baseline\"]\n").is_ok());
    }

    #[test]
    fn defaults_carry_the_documented_values() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.face.impostor_rate, 0.3);
        assert_eq!(cfg.face.layers, 4);
        assert_eq!(cfg.face.heads, 8);
        assert_eq!(cfg.face.min_speech_s, 2.5);
        assert_eq!(cfg.asd.scan.feature_dim, 64);
        assert_eq!(cfg.asd.window_seconds, 1.0);
        assert_eq!(cfg.embedder.window_seconds, 1.0);
        assert_eq!(cfg.seeds(7), vec![7, 8, 9]);
        assert_eq!(cfg.arm_config(Arm::Baseline).scan_mode, ScanMode::Off);
    }
}
