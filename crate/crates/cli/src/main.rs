//! Command-line front end: dataset synthesis, training, segmentation,
//! evaluation, K sweeps, and SVG timelines.

mod config;
mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::RunConfig;
use skelseg::checkpoint;
use skelseg::data::{
    generate_synthetic, load_labels, load_manifest, save_labels, save_manifest, save_skel1,
    DatasetManifest, SkeletonSequence, SyntheticSpec,
};
use skelseg::metrics::evaluate;
use skelseg::pipeline::{segment, sweep_k, train, TrainedModel};

#[derive(Parser)]
#[command(name = "skelseg", version, about = "Unsupervised skeleton action segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// key=value config file; command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long = "patch-seconds")]
    patch_seconds: Option<f64>,
    /// inter_joint | mse | root_distance
    #[arg(long)]
    loss: Option<String>,
    /// random | kmeans
    #[arg(long)]
    init: Option<String>,
    #[arg(long = "entangled-encoder")]
    entangled_encoder: bool,
    #[arg(long = "entangled-decoder")]
    entangled_decoder: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    standardize: bool,
    #[arg(long = "eval-every")]
    eval_every: Option<usize>,
    #[arg(long = "dead-word-restart")]
    dead_word_restart: Option<usize>,
    /// global | local
    #[arg(long)]
    scope: Option<String>,
    /// Comma-separated ground-truth labels to exclude from evaluation.
    #[arg(long = "exclude-labels")]
    exclude_labels: Option<String>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($field:expr, $key:literal) => {
                if let Some(v) = &$field {
                    cfg.set($key, &v.to_string())?;
                }
            };
        }
        over!(self.seed, "seed");
        over!(self.k, "k");
        over!(self.lambda, "lambda");
        over!(self.alpha, "alpha");
        over!(self.patch_seconds, "patch_seconds");
        over!(self.loss, "loss");
        over!(self.init, "init");
        over!(self.epochs, "epochs");
        over!(self.batch_size, "batch_size");
        over!(self.lr, "lr");
        over!(self.eval_every, "eval_every");
        over!(self.dead_word_restart, "dead_word_restart");
        over!(self.scope, "scope");
        over!(self.exclude_labels, "exclude_labels");
        if self.entangled_encoder {
            cfg.set("entangled_encoder", "true")?;
        }
        if self.entangled_decoder {
            cfg.set("entangled_decoder", "true")?;
        }
        if self.standardize {
            cfg.set("standardize", "true")?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled synthetic dataset (SKEL1 + SKLL + manifest).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 20)]
        seqs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50.0)]
        fps: f32,
        #[arg(long, default_value_t = 3)]
        joints: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 0.5)]
        noise: f32,
        #[arg(long = "seg-len-min", default_value_t = 2.0)]
        seg_len_min: f32,
        #[arg(long = "seg-len-max", default_value_t = 6.0)]
        seg_len_max: f32,
        #[arg(long = "segs-min", default_value_t = 4)]
        segs_min: usize,
        #[arg(long = "segs-max", default_value_t = 6)]
        segs_max: usize,
    },
    /// Train a model on a dataset manifest.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Write per-frame cluster labels for every sequence.
    Segment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate predictions against ground-truth labels (JSON to stdout).
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "pred")]
        checkpoint: Option<PathBuf>,
        /// Directory of predicted label files (<stem>.pred.skll or <stem>.skll).
        #[arg(long)]
        pred: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train once per K in a range, reporting silhouette (and metrics when
    /// labels exist).
    Sweepk {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "k-min")]
        k_min: usize,
        #[arg(long = "k-max")]
        k_max: usize,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Render prediction and ground truth as colored SVG timelines.
    Plot {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<SkeletonSequence>)> {
    let manifest = load_manifest(manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let seqs = manifest.load_sequences(base).context("loading sequences")?;
    Ok((manifest, seqs))
}

fn gt_labels(seqs: &[SkeletonSequence]) -> Result<Vec<Vec<usize>>> {
    seqs.iter()
        .map(|s| {
            s.labels
                .as_ref()
                .map(|l| l.iter().map(|&x| x as usize).collect())
                .with_context(|| format!("sequence '{}' has no ground-truth labels", s.id))
        })
        .collect()
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            k,
            seqs,
            seed,
            fps,
            joints,
            channels,
            noise,
            seg_len_min,
            seg_len_max,
            segs_min,
            segs_max,
        } => {
            let mut spec = SyntheticSpec::well_separated(k, channels, joints, fps, seqs, seed)?;
            spec.noise_sigma = noise;
            spec.seg_len_range = (seg_len_min, seg_len_max);
            spec.segs_per_seq = (segs_min, segs_max);
            let dataset = generate_synthetic(&spec)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let mut paths = Vec::new();
            for seq in &dataset {
                let name = format!("{}.skl1", seq.id);
                save_skel1(seq, out.join(&name))?;
                save_labels(seq.labels.as_ref().unwrap(), out.join(format!("{}.skll", seq.id)))?;
                paths.push(PathBuf::from(name));
            }
            save_manifest(&DatasetManifest { k, paths }, out.join("manifest.txt"))?;
            let resolved = format!(
                "k={k}\nseqs={seqs}\nseed={seed}\nfps={fps}\njoints={joints}\nchannels={channels}\n\
                 noise={noise}\nseg_len_min={seg_len_min}\nseg_len_max={seg_len_max}\n\
                 segs_min={segs_min}\nsegs_max={segs_max}\n"
            );
            std::fs::write(out.join("synth.resolved"), resolved)?;
            println!("wrote {} sequences to {}", dataset.len(), out.display());
            Ok(())
        }

        Command::Train { data, out, overrides } => {
            let mut cfg = overrides.resolve()?;
            let (manifest, seqs) = load_dataset(&data)?;
            if !cfg.k_explicit {
                cfg.train.k = manifest.k;
            }
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.resolved"), cfg.to_key_values())?;
            let (trained, log) = train::<f32>(&seqs, &cfg.train)?;
            checkpoint::save(&trained, out.join("model.ckpt"))?;
            log.write_jsonl(out.join("train_log.jsonl"))?;
            let last = log.steps.last();
            println!(
                "trained {} epochs ({} steps); final L_total = {}",
                cfg.train.epochs,
                log.steps.len(),
                last.map_or("n/a".into(), |s| format!("{:.6e}", s.l_total)),
            );
            println!("checkpoint: {}", out.join("model.ckpt").display());
            Ok(())
        }

        Command::Segment { data, checkpoint: ckpt, out } => {
            let (_, seqs) = load_dataset(&data)?;
            let trained: TrainedModel<f32> = checkpoint::load(&ckpt)?;
            let labels = segment(&seqs, &trained)?;
            std::fs::create_dir_all(&out)?;
            for (seq, seq_labels) in seqs.iter().zip(&labels) {
                let as_u16: Vec<u16> = seq_labels.iter().map(|&l| l as u16).collect();
                save_labels(&as_u16, out.join(format!("{}.pred.skll", seq.id)))?;
            }
            println!("wrote {} prediction files to {}", labels.len(), out.display());
            Ok(())
        }

        Command::Eval {
            data,
            checkpoint: ckpt,
            pred,
            overrides,
        } => {
            let cfg = overrides.resolve()?;
            let (manifest, seqs) = load_dataset(&data)?;
            let gt = gt_labels(&seqs)?;
            let k_gt = manifest
                .k
                .max(gt.iter().flatten().copied().max().unwrap_or(0) + 1);
            let (pred_labels, k_pred) = match (ckpt, pred) {
                (Some(ckpt), None) => {
                    let trained: TrainedModel<f32> = checkpoint::load(&ckpt)?;
                    (segment(&seqs, &trained)?, trained.k)
                }
                (None, Some(dir)) => {
                    let mut labels = Vec::with_capacity(seqs.len());
                    for seq in &seqs {
                        let candidates = [
                            dir.join(format!("{}.pred.skll", seq.id)),
                            dir.join(format!("{}.skll", seq.id)),
                        ];
                        let path = candidates
                            .iter()
                            .find(|p| p.exists())
                            .with_context(|| {
                                format!("no prediction file for '{}' in {}", seq.id, dir.display())
                            })?;
                        let l = load_labels(path)?;
                        if l.len() != seq.frames {
                            bail!(
                                "prediction for '{}' has {} frames, expected {}",
                                seq.id,
                                l.len(),
                                seq.frames
                            );
                        }
                        labels.push(l.iter().map(|&x| x as usize).collect::<Vec<usize>>());
                    }
                    let k_pred = labels.iter().flatten().copied().max().unwrap_or(0) + 1;
                    (labels, k_pred)
                }
                _ => bail!("eval needs exactly one of --checkpoint or --pred"),
            };
            let report = evaluate(
                &pred_labels,
                &gt,
                k_pred,
                k_gt,
                cfg.scope,
                &cfg.exclude_labels,
            )?;
            println!("{}", report.to_json());
            Ok(())
        }

        Command::Sweepk {
            data,
            out,
            k_min,
            k_max,
            overrides,
        } => {
            if k_min < 1 || k_max < k_min {
                bail!("invalid K range {k_min}..{k_max}");
            }
            let cfg = overrides.resolve()?;
            let (_, seqs) = load_dataset(&data)?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.resolved"), cfg.to_key_values())?;
            let rows = sweep_k::<f32>(&seqs, &cfg.train, k_min..=k_max)?;
            println!("{:>4} {:>12} {:>8} {:>8} {:>8}", "K", "silhouette", "MoF", "edit", "F1@50");
            for row in &rows {
                match &row.report {
                    Some(r) => println!(
                        "{:>4} {:>12.4} {:>8.2} {:>8.2} {:>8.2}",
                        row.k, row.silhouette, r.mof, r.edit, r.f1_50
                    ),
                    None => println!("{:>4} {:>12.4} {:>8} {:>8} {:>8}", row.k, row.silhouette, "-", "-", "-"),
                }
            }
            std::fs::write(
                out.join("sweep.json"),
                serde_json::to_string_pretty(&rows)?,
            )?;
            Ok(())
        }

        Command::Plot { pred, gt, out } => {
            let pred_labels: Vec<usize> = load_labels(&pred)?.iter().map(|&x| x as usize).collect();
            let gt_labels: Vec<usize> = load_labels(&gt)?.iter().map(|&x| x as usize).collect();
            let svg = plot::render(&pred_labels, &gt_labels)?;
            std::fs::write(&out, svg)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}
