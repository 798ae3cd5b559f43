//! Command-line driver. Every stage reads its inputs from and writes its
//! outputs under `--out`, so stages can run in separate processes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    enroll_stage, evaluate_arm, generate_corpora, library_quality, render_report, report_from_json, report_to_json,
    run_ablation, train_arm, train_embedder_stage, train_face_stage, Arm, ArmMetrics, ArmSummary, Corpora, ExperimentConfig,
    FaceStage, Libraries, TrainedArm,
};
use crate::asdnet::{predictions_to_text, AsdModel};
use crate::facelib::{FaceModel, IdentitySpeechLibrary};
use crate::numerics::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::spkembed::SpeakerEmbedder;
use crate::synthcorpus::{read_corpus, write_corpus};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "scan-asd", version, about = "Speaker-informed active speaker detection experiments")]
struct Cli {
    /// TOML experiment config; missing keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Base seed for every stage.
    #[arg(long, global = true, value_name = "N", default_value_t = 0)]
    seed: u64,
    /// Artifact directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the train, validation and face corpora.
    Gen,
    /// Train and freeze the speaker embedder.
    TrainEmbedder,
    /// Pretrain the face embedder and fine-tune it on the face corpus.
    TrainFace,
    /// Build hypothesised and ground-truth identity-speech libraries.
    Enroll,
    /// Train one ASD arm.
    TrainAsd {
        #[arg(long, default_value = "scan-oracle", value_parser = parse_arm)]
        arm: Arm,
    },
    /// Score the validation corpus with a trained arm.
    Eval {
        #[arg(long, default_value = "scan-oracle", value_parser = parse_arm)]
        arm: Arm,
    },
    /// Run every arm over `runs` seeds end to end.
    Ablate {
        /// Overrides `ablation.runs`.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Print the tables of the last ablation.
    Report,
    /// Repeat the ablation for several auxiliary loss weights.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.3,1")]
        lambdas: Vec<f64>,
        #[arg(long, default_value = "scan-oracle", value_parser = parse_arm)]
        arm: Arm,
        #[arg(long)]
        runs: Option<usize>,
    },
}

fn parse_arm(s: &str) -> std::result::Result<Arm, String> {
    [Arm::Baseline, Arm::ScanHypothesised, Arm::ScanOracle]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| format!("unknown arm {s:?} (baseline, scan-hypothesised, scan-oracle)"))
}

/// Provenance of one artifact file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArtifactRecord {
    config_hash: String,
    seed: u64,
    sha256: String,
}

struct Workspace {
    root: PathBuf,
    cfg: ExperimentConfig,
    hash: String,
    seed: u64,
}

const CORPORA: [&str; 4] = ["train", "val", "face", "face-held-out"];

impl Workspace {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    fn manifest(&self) -> Result<BTreeMap<String, ArtifactRecord>> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(BTreeMap::new());
        }
        serde_json::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Format(format!("manifest: {e}")))
    }

    /// Records provenance of freshly written files.
    fn register(&self, rels: &[String]) -> Result<()> {
        let mut m = self.manifest()?;
        for rel in rels {
            let bytes = fs::read(self.path(rel))?;
            m.insert(
                rel.clone(),
                ArtifactRecord {
                    config_hash: self.hash.clone(),
                    seed: self.seed,
                    sha256: hex::encode(Sha256::digest(&bytes)),
                },
            );
        }
        let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(self.manifest_path(), json)?;
        Ok(())
    }

    /// Fails unless `rel` exists and was produced by this config and seed.
    fn require(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            return Err(Error::MissingArtifact(p.display().to_string()));
        }
        if let Some(r) = self.manifest()?.get(rel) {
            if r.config_hash != self.hash || r.seed != self.seed {
                return Err(Error::Config(format!(
                    "{} was produced by config {} seed {}, current is {} seed {}",
                    p.display(),
                    r.config_hash,
                    r.seed,
                    self.hash,
                    self.seed
                )));
            }
        }
        Ok(p)
    }

    fn write(&self, rel: &str, contents: &str) -> Result<String> {
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(p, contents)?;
        Ok(rel.to_string())
    }

    fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<String> {
        let json = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        self.write(rel, &json)
    }

    fn save_ckpt(&self, rel: &str, mut ckpt: Checkpoint) -> Result<String> {
        ckpt.meta.insert("config_hash".into(), self.hash.clone());
        ckpt.meta.insert("seed".into(), self.seed.to_string());
        let p = self.path(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        save_checkpoint(&p, &ckpt)?;
        Ok(rel.to_string())
    }

    fn stamp<T: Serialize>(&self, body: T) -> StageReport<'_, T> {
        StageReport {
            config_hash: &self.hash,
            seed: self.seed,
            body,
        }
    }

    fn load_ckpt(&self, rel: &str) -> Result<Checkpoint> {
        load_checkpoint(&self.require(rel)?)
    }

    fn corpora(&self) -> Result<Corpora> {
        let load = |name: &str| read_corpus(&self.require(&format!("corpus/{name}.corpus"))?);
        Ok(Corpora {
            train: load("train")?,
            val: load("val")?,
            face: load("face")?,
            face_held_out: load("face-held-out")?,
        })
    }

    fn embedder(&self) -> Result<SpeakerEmbedder> {
        let mut e = SpeakerEmbedder::from_checkpoint(&self.load_ckpt("models/embedder.ckpt")?)?;
        e.freeze();
        Ok(e)
    }

    fn face_model(&self, rel: &str) -> Result<FaceModel> {
        Ok(FaceModel::from_checkpoint(&self.load_ckpt(rel)?)?.0)
    }

    fn libraries(&self) -> Result<Libraries> {
        let load = |name: &str| IdentitySpeechLibrary::read(&self.require(&format!("libraries/{name}.json"))?);
        Ok(Libraries {
            train_hypothesised: load("train-hypothesised")?,
            val_hypothesised: load("val-hypothesised")?,
            train_oracle: load("train-oracle")?,
            val_oracle: load("val-oracle")?,
        })
    }
}

#[derive(Serialize)]
struct StageReport<'a, T: Serialize> {
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize)]
struct SweepRow {
    lambda_aux: f64,
    summary: ArmSummary,
}

#[derive(Serialize)]
struct SweepReport {
    rows: Vec<SweepRow>,
}

fn execute(cli: Cli) -> Result<String> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    fs::create_dir_all(&cli.out)?;
    let ws = Workspace {
        root: cli.out.clone(),
        hash: cfg.hash(),
        cfg,
        seed: cli.seed,
    };
    let mut msg = String::new();
    match cli.command {
        Command::Gen => {
            let corpora = generate_corpora(&ws.cfg, ws.seed)?;
            fs::create_dir_all(ws.path("corpus"))?;
            let mut written = Vec::new();
            for ((name, corpus), expected) in corpora.named().into_iter().zip(CORPORA) {
                debug_assert_eq!(name, expected);
                let rel = format!("corpus/{name}.corpus");
                write_corpus(&ws.path(&rel), corpus)?;
                let _ = writeln!(msg, "{rel}: {} scenarios, {} tracks", corpus.scenarios.len(), corpus.tracks().count());
                written.push(rel);
            }
            written.push(ws.write("config.toml", &ws.cfg.to_toml_string()?)?);
            ws.register(&written)?;
        }
        Command::TrainEmbedder => {
            let (embedder, report) = train_embedder_stage(&ws.cfg, ws.seed)?;
            let written = vec![
                ws.save_ckpt("models/embedder.ckpt", embedder.to_checkpoint())?,
                ws.write_json("reports/embedder.json", &ws.stamp(&report))?,
            ];
            ws.register(&written)?;
            let _ = writeln!(msg, "speaker accuracy {:.3}", report.held_out_accuracy);
        }
        Command::TrainFace => {
            let corpora = ws.corpora()?;
            let face = train_face_stage(&ws.cfg, &corpora, ws.seed)?;
            let written = vec![
                ws.save_ckpt("models/face-pretrained.ckpt", face.pretrained.to_checkpoint(&ws.cfg.face))?,
                ws.save_ckpt("models/face.ckpt", face.finetuned.to_checkpoint(&ws.cfg.face))?,
                ws.write_json("reports/face.json", &ws.stamp(&face.report))?,
            ];
            ws.register(&written)?;
            if let Some(acc) = face.report.held_out_accuracy {
                let _ = writeln!(msg, "impostor accuracy {acc:.3}");
            }
        }
        Command::Enroll => {
            let corpora = ws.corpora()?;
            let face = FaceStage {
                pretrained: ws.face_model("models/face-pretrained.ckpt")?,
                finetuned: ws.face_model("models/face.ckpt")?,
                report: Default::default(),
            };
            let libraries = enroll_stage(&ws.cfg, &face.finetuned, &corpora)?;
            let quality = library_quality(&ws.cfg, &face, &corpora.val, &libraries)?;
            let mut written = Vec::new();
            fs::create_dir_all(ws.path("libraries"))?;
            for (name, lib) in libraries.named() {
                let rel = format!("libraries/{name}.json");
                lib.write(&ws.path(&rel))?;
                let _ = writeln!(msg, "{rel}: {} identities", lib.entries.len());
                written.push(rel);
            }
            written.push(ws.write_json("reports/library.json", &ws.stamp(&quality))?);
            ws.register(&written)?;
            let _ = writeln!(
                msg,
                "silhouette frame-mean {:.3} temporal {:.3}",
                quality.frame_mean_silhouette, quality.temporal_silhouette
            );
        }
        Command::TrainAsd { arm } => {
            let corpora = ws.corpora()?;
            let embedder = ws.embedder()?;
            let libraries = if arm.uses_scan() { ws.libraries()? } else { empty_libraries() };
            let trained = train_arm(&ws.cfg, arm, &embedder, &corpora, &libraries, ws.seed)?;
            let rel = format!("models/asd-{}.ckpt", arm.name());
            ws.register(&[ws.save_ckpt(&rel, trained.model.to_checkpoint(&trained.config))?])?;
            let _ = writeln!(msg, "{rel}: final loss {:.4}", trained.final_loss);
        }
        Command::Eval { arm } => {
            let (model, config) = AsdModel::from_checkpoint(&ws.load_ckpt(&format!("models/asd-{}.ckpt", arm.name()))?)?;
            let embedder = ws.embedder()?;
            let val = read_corpus(&ws.require("corpus/val.corpus")?)?;
            let libraries = if arm.uses_scan() { ws.libraries()? } else { empty_libraries() };
            let trained = TrainedArm {
                arm,
                config,
                model,
                skipped_tracks: 0,
                final_loss: f64::NAN,
            };
            let (metrics, preds): (ArmMetrics, _) = evaluate_arm(&ws.cfg, &trained, &embedder, &val, &libraries, ws.seed)?;
            let written = vec![
                ws.write(&format!("predictions/{}.tsv", arm.name()), &predictions_to_text(&preds))?,
                ws.write_json(&format!("reports/eval-{}.json", arm.name()), &ws.stamp(&metrics))?,
            ];
            ws.register(&written)?;
            let _ = writeln!(msg, "{}: AP {:.2} track mAP {:.2}", arm.name(), 100.0 * metrics.ap, 100.0 * metrics.track_ap);
        }
        Command::Ablate { runs } => {
            let mut cfg = ws.cfg.clone();
            if let Some(r) = runs {
                cfg.ablation.runs = r;
            }
            let (report, timings) = run_ablation(&cfg, &cfg.seeds(ws.seed))?;
            let text = render_report(&report);
            let written = vec![
                ws.write("reports/ablation.json", &report_to_json(&report)?)?,
                ws.write("reports/ablation.txt", &text)?,
                ws.write_json("reports/timings.json", &timings)?,
            ];
            ws.register(&written)?;
            msg.push_str(&text);
        }
        Command::Report => {
            let p = ws.path("reports/ablation.json");
            if !p.exists() {
                return Err(Error::MissingArtifact(p.display().to_string()));
            }
            msg.push_str(&render_report(&report_from_json(&fs::read_to_string(p)?)?));
        }
        Command::Sweep { lambdas, arm, runs } => {
            let mut table = String::from("lambda_aux  AP (=mAP)  std\n");
            let mut rows = Vec::new();
            for &l in &lambdas {
                let mut cfg = ws.cfg.clone();
                cfg.asd.lambda_aux = l;
                cfg.ablation.arms = vec![arm];
                if let Some(r) = runs {
                    cfg.ablation.runs = r;
                }
                let (report, _) = run_ablation(&cfg, &cfg.seeds(ws.seed))?;
                let s = &report.arms[0];
                let _ = writeln!(
                    table,
                    "{l:<11} {:>9} {:>5}",
                    s.ap_mean.map_or("failed".into(), |v| format!("{:.1}", 100.0 * v)),
                    s.ap_std.map_or("-".into(), |v| format!("{:.1}", 100.0 * v))
                );
                rows.push(SweepRow {
                    lambda_aux: l,
                    summary: s.clone(),
                });
            }
            let written = vec![
                ws.write_json("reports/sweep.json", &ws.stamp(SweepReport { rows }))?,
                ws.write("reports/sweep.txt", &table)?,
            ];
            ws.register(&written)?;
            msg.push_str(&table);
        }
    }
    Ok(msg)
}

fn empty_libraries() -> Libraries {
    let e = IdentitySpeechLibrary::default();
    Libraries {
        train_hypothesised: e.clone(),
        val_hypothesised: e.clone(),
        train_oracle: e.clone(),
        val_oracle: e,
    }
}

/// Runs the CLI and returns the process exit code: 0 success, 1 usage
/// error, 2 runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(msg) => {
            print!("{msg}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

