//! Flat key=value run configuration. Command-line flags override file
//! values; unknown keys are rejected; every run serializes its fully
//! resolved config next to its outputs.

use anyhow::{bail, Context, Result};
use std::path::Path;

use skelseg::losses::ReconstructionVariant;
use skelseg::metrics::Scope;
use skelseg::pipeline::{InitMethod, TrainConfig};

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub scope: Scope,
    pub exclude_labels: Vec<usize>,
    /// True once `k` was set explicitly (file or flag), as opposed to the
    /// built-in default that a manifest's K may replace.
    pub k_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            scope: Scope::Global,
            exclude_labels: Vec::new(),
            k_explicit: false,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected key=value, got '{line}'", lineno + 1))?;
            cfg.set(key.trim(), value.trim())
                .with_context(|| format!("line {}", lineno + 1))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "epochs" => t.epochs = value.parse()?,
            "batch_size" => t.batch_size = value.parse()?,
            "lr" => t.lr = value.parse()?,
            "lambda" => t.lambda = value.parse()?,
            "alpha" => t.alpha = value.parse()?,
            "patch_seconds" => t.patch_seconds = value.parse()?,
            "k" => {
                t.k = value.parse()?;
                self.k_explicit = true;
            }
            "seed" => t.seed = value.parse()?,
            "loss" => t.loss_variant = value.parse::<ReconstructionVariant>()?,
            "init" => t.init = value.parse::<InitMethod>()?,
            "stages" => t.model.stages = value.parse()?,
            "layers_per_stage" => t.model.layers_per_stage = value.parse()?,
            "hidden_dim" => t.model.hidden_dim = value.parse()?,
            "latent_dim" => t.model.latent_dim = value.parse()?,
            "entangled_encoder" => t.model.disentangled_encoder = !parse_bool(value)?,
            "entangled_decoder" => t.model.disentangled_decoder = !parse_bool(value)?,
            "standardize" => t.standardize = parse_bool(value)?,
            "eval_every" => t.eval_every = value.parse()?,
            "dead_word_restart" => {
                let n: usize = value.parse()?;
                t.dead_word_restart = if n == 0 { None } else { Some(n) };
            }
            "position_channels" => {
                let channels = parse_csv(value)?;
                t.position_channels = if channels.is_empty() { None } else { Some(channels) };
            }
            "scope" => self.scope = parse_scope(value)?,
            "exclude_labels" => self.exclude_labels = parse_csv(value)?,
            other => bail!("unknown config key '{other}'"),
        }
        Ok(())
    }

    /// key=value form, keys in a fixed order; re-parseable by `from_file`.
    pub fn to_key_values(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut push = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        push("epochs", t.epochs.to_string());
        push("batch_size", t.batch_size.to_string());
        push("lr", t.lr.to_string());
        push("lambda", t.lambda.to_string());
        push("alpha", t.alpha.to_string());
        push("patch_seconds", t.patch_seconds.to_string());
        push("k", t.k.to_string());
        push("seed", t.seed.to_string());
        push(
            "loss",
            match t.loss_variant {
                ReconstructionVariant::InterJoint => "inter_joint".into(),
                ReconstructionVariant::PlainMse => "mse".into(),
                ReconstructionVariant::RootDistance => "root_distance".into(),
            },
        );
        push(
            "init",
            match t.init {
                InitMethod::Random => "random".into(),
                InitMethod::Kmeans => "kmeans".into(),
            },
        );
        push("stages", t.model.stages.to_string());
        push("layers_per_stage", t.model.layers_per_stage.to_string());
        push("hidden_dim", t.model.hidden_dim.to_string());
        push("latent_dim", t.model.latent_dim.to_string());
        push(
            "entangled_encoder",
            (!t.model.disentangled_encoder).to_string(),
        );
        push(
            "entangled_decoder",
            (!t.model.disentangled_decoder).to_string(),
        );
        push("standardize", t.standardize.to_string());
        push("eval_every", t.eval_every.to_string());
        push(
            "dead_word_restart",
            t.dead_word_restart.unwrap_or(0).to_string(),
        );
        push(
            "position_channels",
            t.position_channels
                .as_ref()
                .map(|cs| cs.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","))
                .unwrap_or_default(),
        );
        push(
            "scope",
            match self.scope {
                Scope::Global => "global".into(),
                Scope::Local => "local".into(),
            },
        );
        push(
            "exclude_labels",
            self.exclude_labels
                .iter()
                .map(|l| l.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        s
    }
}

pub fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "on" => Ok(true),
        "false" | "0" | "off" => Ok(false),
        other => bail!("expected boolean, got '{other}'"),
    }
}

pub fn parse_scope(v: &str) -> Result<Scope> {
    match v {
        "global" => Ok(Scope::Global),
        "local" => Ok(Scope::Local),
        other => bail!("unknown scope '{other}' (expected global|local)"),
    }
}

pub fn parse_csv(v: &str) -> Result<Vec<usize>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .with_context(|| format!("bad label '{s}'"))
        })
        .collect()
}
