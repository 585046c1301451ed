//! `auscult` subcommands. Every command that writes to `--out` also leaves a
//! `run.json` there with the command line and the resolved configuration.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use auscult_core::corpus::{load_manifest, read_all, synth_corpus, write_corpus, SynthSpec};
use auscult_core::harness::config::RunConfig;
use auscult_core::harness::data::{label_subset, prepare, LabeledSplit, SealedSplit};
use auscult_core::harness::efficiency::efficiency_curve;
use auscult_core::harness::evaluate::{evaluate, export_embeddings, freeze_threshold, ThresholdPolicy};
use auscult_core::harness::model::{derive_seed, Model, Stage};
use auscult_core::harness::train::{pretrain, train_linear, train_proto, LinearInit};
use auscult_core::harness::Dataset;
use auscult_core::stats;
use auscult_core::windows::{load_window_set, save_window_set, SplitAssignment, Window};
use auscult_tensor::Checkpoint;
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

type Res<T> = Result<T, Box<dyn std::error::Error>>;

#[derive(Debug, Parser)]
#[command(name = "auscult", about = "Self-supervised murmur detection from heart-sound recordings")]
pub struct Cli {
    /// Seed for every random stream; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Head {
    Proto,
    Linear,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus (manifest.jsonl + WAV files).
    Synth {
        #[arg(long, default_value_t = 64)]
        patients: usize,
        #[arg(long, default_value_t = 1)]
        recordings_per_patient: usize,
        #[arg(long, default_value_t = 6.0)]
        duration: f64,
        #[arg(long, default_value_t = 0.4)]
        prevalence: f64,
        #[arg(long, default_value_t = 0.0)]
        murmur_snr_db: f64,
    },
    /// Cut windows and split patients; writes train/, val/, test/ window sets.
    Prepare {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Contrastive pretraining on the training windows.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
    },
    /// Prototype head on a pretrained extractor.
    TrainProto {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Linear baseline, from a pretrained extractor or from scratch.
    TrainLinear {
        #[arg(long)]
        data: PathBuf,
        /// Omit to train from random initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score the held-out split at the checkpoint's frozen threshold.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Paired comparison of two prediction files (`patient_id,true_label,score`).
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold_a: f64,
        #[arg(long, default_value_t = 0.5)]
        threshold_b: f64,
    },
    /// SSL versus from-scratch F1 at several label fractions.
    Efficiency {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75,1.0")]
        fractions: Vec<f64>,
    },
    /// Export embeddings of one split as little-endian float32 plus a JSON sidecar.
    Embed {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitName,
    },
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn parse<I, T>(argv: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    Cli::try_parse_from(argv)
}

pub fn resolve_config(cli: &Cli) -> Res<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl Serialize) -> Res<()> {
    fs::write(path, serde_json::to_vec_pretty(value)?).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn log_line(s: &str) {
    eprintln!("{s}");
}

pub fn execute(cli: &Cli) -> Res<()> {
    let cfg = resolve_config(cli)?;
    let out = &cli.out;
    fs::create_dir_all(out).map_err(|e| format!("{}: {e}", out.display()))?;
    let args: Vec<String> = std::env::args().collect();
    write_json(
        &out.join("run.json"),
        &json!({ "command": format!("{:?}", cli.command), "argv": args, "config": cfg.resolved() }),
    )?;
    let mut log = log_line;
    match &cli.command {
        Command::Synth {
            patients,
            recordings_per_patient,
            duration,
            prevalence,
            murmur_snr_db,
        } => {
            let spec = SynthSpec {
                n_patients: *patients,
                recordings_per_patient: *recordings_per_patient,
                duration_s: *duration,
                murmur_prevalence: *prevalence,
                murmur_snr_db: *murmur_snr_db,
                seed: cfg.seed,
                ..SynthSpec::default()
            };
            let (m, recs) = synth_corpus(&spec)?;
            let path = write_corpus(out, &m, &recs)?;
            println!("{}", path.display());
        }
        Command::Prepare { manifest } => {
            let m = load_manifest(manifest)?;
            let recs = read_all(&m)?;
            let p = prepare(&m, &recs, cfg.data.split, &cfg.data.windows, cfg.seed)?;
            let mut parts: [Vec<Window>; 3] = Default::default();
            for w in p.windows {
                if let Some(k) = p.split.split_of(&w.patient_id) {
                    parts[k].push(w);
                }
            }
            for (name, w) in ["train", "val", "test"].iter().zip(&parts) {
                save_window_set(&out.join(name), w)?;
            }
            write_json(&out.join("split.json"), &p.split)?;
            println!(
                "windows: train {}, val {}, test {} ({} interval warnings)",
                parts[0].len(),
                parts[1].len(),
                parts[2].len(),
                p.warnings
            );
        }
        Command::Pretrain { data } => {
            let d = load_dataset(data)?;
            let o = pretrain(&cfg, &d.train.samples(), Some(&mut log))?;
            o.checkpoint().save(out.join("pretrain.ckpt"))?;
            write_json(&out.join("pretrain_history.json"), &o.history)?;
        }
        Command::TrainProto { data, checkpoint } => {
            let d = load_dataset(data)?;
            let base = load_pretrained(&cfg, checkpoint)?;
            let train = labeled_train(&cfg, &d)?;
            let (mut m, hist) = train_proto(base, &train, &d.val, Some(&mut log))?;
            freeze_threshold(&mut m, &d.val, ThresholdPolicy::ValidationMaxF1)?;
            m.to_checkpoint().save(out.join("proto.ckpt"))?;
            write_json(&out.join("proto_history.json"), &hist)?;
        }
        Command::TrainLinear { data, checkpoint } => {
            let d = load_dataset(data)?;
            let train = labeled_train(&cfg, &d)?;
            let (base, init) = match checkpoint {
                Some(p) => (load_pretrained(&cfg, p)?, LinearInit::Pretrained),
                None => (Model::new(&cfg)?, LinearInit::Scratch),
            };
            let (mut m, hist) = train_linear(base, &train, &d.val, init, Some(&mut log))?;
            freeze_threshold(&mut m, &d.val, ThresholdPolicy::ValidationMaxF1)?;
            m.to_checkpoint().save(out.join("linear.ckpt"))?;
            write_json(&out.join("linear_history.json"), &hist)?;
        }
        Command::Eval { data, checkpoint } => {
            let d = load_dataset(data)?;
            let m = Model::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            let (report, scores) = evaluate(&m, &d.test)?;
            write_json(&out.join("eval.json"), &report)?;
            fs::write(out.join("predictions.csv"), d.test.prediction_lines(&scores)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Compare {
            a,
            b,
            threshold_a,
            threshold_b,
        } => {
            let pa = read_predictions(a)?;
            let pb = read_predictions(b)?;
            if pa.patients != pb.patients || pa.labels != pb.labels {
                return Err("prediction files do not list the same samples in the same order".into());
            }
            let report = stats::compare(
                &pa.scores,
                &pb.scores,
                &pa.labels,
                &pa.patients,
                *threshold_a,
                *threshold_b,
                cfg.eval.bootstrap_resamples,
                derive_seed(cfg.seed, &[50]),
            )?;
            write_json(&out.join("comparison.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Efficiency {
            data,
            checkpoint,
            fractions,
        } => {
            let d = load_dataset(data)?;
            let base = load_pretrained(&cfg, checkpoint)?;
            let rows = efficiency_curve(&base, &d, fractions, Some(&mut log))?;
            write_json(&out.join("efficiency.json"), &rows)?;
            println!("{}", serde_json::to_string_pretty(&rows)?);
        }
        Command::Embed { data, checkpoint, split } => {
            let d = load_dataset(data)?;
            let m = Model::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
            let part = match split {
                SplitName::Train => d.train,
                SplitName::Val => d.val,
                SplitName::Test => LabeledSplit {
                    windows: load_window_set(&data.join("test"))?,
                },
            };
            let side = export_embeddings(&m, &part, &out.join("embeddings.f32"))?;
            println!("{} rows x {} dims", side.rows, side.dims);
        }
    }
    Ok(())
}

/// Reads a directory written by `prepare`.
pub fn load_dataset(dir: &Path) -> Res<Dataset> {
    let split: SplitAssignment = serde_json::from_slice(&fs::read(dir.join("split.json")).map_err(|e| format!("{}: {e}", dir.display()))?)?;
    Ok(Dataset {
        train: LabeledSplit {
            windows: load_window_set(&dir.join("train"))?,
        },
        val: LabeledSplit {
            windows: load_window_set(&dir.join("val"))?,
        },
        test: SealedSplit::seal(load_window_set(&dir.join("test"))?),
        split,
    })
}

/// A fresh model for `cfg` with the extractor and fusion copied from a
/// pretraining checkpoint; fails when the architectures differ.
fn load_pretrained(cfg: &RunConfig, path: &Path) -> Res<Model> {
    let ck = Checkpoint::load(path)?;
    let mut m = Model::new(cfg)?;
    m.load_encoder_from(&ck)?;
    m.stage = Stage::Pretrained;
    Ok(m)
}

fn labeled_train(cfg: &RunConfig, d: &Dataset) -> Res<LabeledSplit> {
    Ok(if cfg.label_fraction < 1.0 {
        label_subset(&d.train, cfg.label_fraction, derive_seed(cfg.seed, &[40]))?
    } else {
        d.train.clone()
    })
}

#[derive(Debug, Default, PartialEq)]
pub struct Predictions {
    pub patients: Vec<String>,
    pub labels: Vec<u8>,
    pub scores: Vec<f64>,
}

pub fn parse_predictions(text: &str) -> Res<Predictions> {
    let mut p = Predictions::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [patient, label, score] = fields[..] else {
            return Err(format!("line {}: expected patient_id,true_label,score", i + 1).into());
        };
        let label: u8 = match label {
            "0" => 0,
            "1" => 1,
            other => return Err(format!("line {}: label `{other}` is not 0 or 1", i + 1).into()),
        };
        let score: f64 = score.parse().map_err(|_| format!("line {}: bad score `{score}`", i + 1))?;
        p.patients.push(patient.to_string());
        p.labels.push(label);
        p.scores.push(score);
    }
    Ok(p)
}

pub fn read_predictions(path: &Path) -> Res<Predictions> {
    parse_predictions(&fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?)
}
