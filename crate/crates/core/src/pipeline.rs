//! End-to-end wiring: encode -> patchify -> quantize -> EMA -> straight
//! through -> decode -> losses -> Adam, plus inference and the K sweep.
//!
//! Training is single-threaded over batches (the codebook has one writer);
//! everything is deterministic under a fixed seed, down to checkpoint bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::{make_batches, Batch, ChannelStats, SkeletonSequence};
use crate::error::{Error, Result};
use crate::losses::{commitment, reconstruction, total_loss, LossConfig, ReconstructionVariant};
use crate::metrics::{evaluate, silhouette, MetricsReport, Scope};
use crate::model::{Autoencoder, ModelConfig};
use crate::quantizer::{
    depatchify, ema_update, patch_validity, patchify, quantize, segmentation_from_assignment,
    Codebook,
};
use crate::tensor::{real, AdamState, Real, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Random,
    Kmeans,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "kmeans" => Ok(Self::Kmeans),
            other => Err(Error::InvalidArg(format!(
                "unknown init '{other}' (expected random|kmeans)"
            ))),
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub patch_seconds: f64,
    pub k: usize,
    pub seed: u64,
    pub loss_variant: ReconstructionVariant,
    pub init: InitMethod,
    pub model: ModelConfig,
    /// Evaluate on ground-truth labels every this many epochs (0 = off).
    pub eval_every: usize,
    pub standardize: bool,
    /// Reseed a word from a random batch patch after this many consecutive
    /// batches with no assignments (None = off).
    pub dead_word_restart: Option<usize>,
    /// Channels treated as positions in the distance losses; None picks the
    /// first three (or all, when C < 3).
    pub position_channels: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            lr: 0.0005,
            lambda: 0.001,
            alpha: 0.5,
            patch_seconds: 1.0,
            k: 4,
            seed: 0,
            loss_variant: ReconstructionVariant::InterJoint,
            init: InitMethod::Random,
            model: ModelConfig::default(),
            eval_every: 0,
            standardize: false,
            dead_word_restart: None,
            position_channels: None,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l_rec: f64,
    pub l_commit: f64,
    pub l_total: f64,
    /// Valid-patch count assigned to each word this step.
    pub usage: Vec<usize>,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainLog {
    /// Line-delimited JSON: one record per line, steps and evals tagged.
    pub fn write_jsonl(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        use std::io::Write;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
        for s in &self.steps {
            let mut v = serde_json::to_value(s).expect("step serializes");
            v["type"] = "step".into();
            writeln!(w, "{v}")?;
        }
        for e in &self.evals {
            let mut v = serde_json::to_value(e).expect("eval serializes");
            v["type"] = "eval".into();
            writeln!(w, "{v}")?;
        }
        Ok(())
    }
}

/// Everything needed to run inference: trained weights, codebook, patch
/// length, and preprocessing state.
#[derive(Clone, Debug)]
pub struct TrainedModel<F> {
    pub model: Autoencoder<F>,
    pub codebook: Codebook<F>,
    pub patch_len: usize,
    pub k: usize,
    pub loss: LossConfig,
    pub fps: f32,
    pub stats: Option<ChannelStats>,
}

fn batch_tensors<F: Real>(batch: &Batch) -> (Tensor<F>, Tensor<F>) {
    let x = Tensor::new(
        vec![batch.n, batch.channels, batch.t_max, batch.joints],
        batch.data.iter().map(|&v| real::<F>(v as f64)).collect(),
    )
    .unwrap();
    let mask = Tensor::new(
        vec![batch.n, batch.t_max],
        batch.mask.iter().map(|&v| real::<F>(v as f64)).collect(),
    )
    .unwrap();
    (x, mask)
}

fn check_dataset(dataset: &[SkeletonSequence]) -> Result<(usize, usize, f32, usize)> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidArg("empty dataset".into()))?;
    for s in dataset {
        if s.channels != first.channels || s.joints != first.joints {
            return Err(Error::Shape("dataset mixes C or V across sequences".into()));
        }
        if s.fps != first.fps {
            return Err(Error::InvalidArg(
                "dataset mixes frame rates; resample first".into(),
            ));
        }
    }
    Ok((first.channels, first.joints, first.fps, first.root_joint))
}

fn patch_frames(patch_seconds: f64, fps: f32) -> Result<usize> {
    let p = (patch_seconds * fps as f64).round() as isize;
    if p < 1 {
        return Err(Error::InvalidArg(format!(
            "patch of {patch_seconds}s at {fps} fps yields no frames"
        )));
    }
    Ok(p as usize)
}

/// Collect valid latent patch vectors from the current encoder, in dataset
/// order. Returns flattened `P*(V*D)` vectors.
fn collect_latent_patches<F: Real>(
    model: &Autoencoder<F>,
    dataset: &[SkeletonSequence],
    patch_len: usize,
    batch_size: usize,
) -> Result<Vec<Vec<F>>> {
    let mut out = Vec::new();
    for batch in make_batches(dataset, batch_size, None)? {
        let (x, _) = batch_tensors::<F>(&batch);
        let mut tape = Tape::new();
        let ids = model.register(&mut tape, false);
        let xi = tape.constant(x);
        let z = model.encode(&mut tape, &ids, xi)?;
        let (patches, _) = patchify(&mut tape, z, patch_len)?;
        let valid = patch_validity(&batch.lengths, batch.t_max, patch_len);
        let values = tape.value(patches);
        let word_len: usize = values.shape()[2] * values.shape()[3];
        for (pi, &ok) in valid.iter().enumerate() {
            if ok {
                out.push(values.data()[pi * word_len..(pi + 1) * word_len].to_vec());
            }
        }
    }
    Ok(out)
}

/// Train on a dataset; deterministic under the seed.
pub fn train<F: Real>(
    dataset: &[SkeletonSequence],
    cfg: &TrainConfig,
) -> Result<(TrainedModel<F>, TrainLog)> {
    if cfg.k < 1 {
        return Err(Error::InvalidArg("K must be >= 1".into()));
    }
    cfg.model.validate()?;
    let (c, v, fps, root_joint) = check_dataset(dataset)?;
    let patch_len = patch_frames(cfg.patch_seconds, fps)?;
    let mut loss_cfg = LossConfig::new(cfg.loss_variant, cfg.lambda, c, root_joint);
    if let Some(channels) = &cfg.position_channels {
        loss_cfg.position_channels = channels.clone();
    }

    let stats = if cfg.standardize {
        Some(ChannelStats::fit(dataset)?)
    } else {
        None
    };
    let data: Vec<SkeletonSequence> = match &stats {
        Some(st) => dataset
            .iter()
            .map(|s| st.apply(s))
            .collect::<Result<_>>()?,
        None => dataset.to_vec(),
    };

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut model = Autoencoder::<F>::new(cfg.model.clone(), c, v, &mut rng)?;
    let dim = v * cfg.model.latent_dim;
    let mut codebook = match cfg.init {
        InitMethod::Random => Codebook::kaiming_init(cfg.k, patch_len, dim, &mut rng)?,
        InitMethod::Kmeans => {
            let sample = collect_latent_patches(&model, &data, patch_len, cfg.batch_size)?;
            Codebook::kmeans_init(&sample, cfg.k, patch_len, dim, cfg.seed)?
        }
    };

    let mut adam = AdamState::new(real::<F>(cfg.lr), model.params());
    let mut restart_rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(0x7265_7374_6172_74));
    let mut empty_steps = vec![0usize; cfg.k];
    let mut log = TrainLog::default();
    let mut step = 0usize;

    let gt_labels: Option<Vec<Vec<usize>>> = dataset
        .iter()
        .map(|s| {
            s.labels
                .as_ref()
                .map(|l| l.iter().map(|&x| x as usize).collect())
        })
        .collect();

    for epoch in 0..cfg.epochs {
        let shuffle_seed = cfg
            .seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(epoch as u64 + 1);
        for batch in make_batches(&data, cfg.batch_size, Some(shuffle_seed))? {
            let (x, mask) = batch_tensors::<F>(&batch);
            let mut tape = Tape::new();
            let ids = model.register(&mut tape, true);
            let xi = tape.constant(x.clone());
            let z = model.encode(&mut tape, &ids, xi)?;
            let (patches, _) = patchify(&mut tape, z, patch_len)?;
            let valid = patch_validity(&batch.lengths, batch.t_max, patch_len);
            let patch_values = tape.value(patches).clone();
            let (quantized, assignment) = quantize(&patch_values, &codebook, &valid)?;

            // Codebook update precedes the gradient step; the straight
            // through target stays consistent with the distances that
            // produced this assignment.
            ema_update(&mut codebook, &patch_values, &assignment, cfg.alpha)?;
            if let Some(limit) = cfg.dead_word_restart {
                let usage = assignment.usage(cfg.k);
                restart_dead_words(
                    &mut codebook,
                    &patch_values,
                    &assignment,
                    &usage,
                    &mut empty_steps,
                    limit,
                    &mut restart_rng,
                );
            }

            let st = crate::quantizer::straight_through(&mut tape, patches, quantized.clone())?;
            let deq = depatchify(&mut tape, st, batch.t_max)?;
            let xhat = model.decode(&mut tape, &ids, deq)?;
            let l_rec = reconstruction(&mut tape, &loss_cfg, &x, xhat, &mask)?;
            let l_com = commitment(&mut tape, patches, &quantized, &valid)?;
            let l_total = total_loss(&mut tape, l_rec, l_com, cfg.lambda)?;

            let rec_v = tape.value(l_rec).item().to_f64().unwrap();
            let com_v = tape.value(l_com).item().to_f64().unwrap();
            let tot_v = tape.value(l_total).item().to_f64().unwrap();
            if !tot_v.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    rec: rec_v,
                    commit: com_v,
                    total: tot_v,
                });
            }

            tape.backward(l_total)?;
            let grads: Vec<Option<&[F]>> = ids.iter().map(|&id| tape.grad(id)).collect();
            adam.step(model.params_mut(), &grads)?;

            log.steps.push(StepRecord {
                step,
                epoch,
                l_rec: rec_v,
                l_commit: com_v,
                l_total: tot_v,
                usage: assignment.usage(cfg.k),
            });
            step += 1;
        }

        if cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0 {
            if let Some(gt) = &gt_labels {
                let trained = TrainedModel {
                    model: model.clone(),
                    codebook: codebook.clone(),
                    patch_len,
                    k: cfg.k,
                    loss: loss_cfg.clone(),
                    fps,
                    stats: stats.clone(),
                };
                let pred = segment(dataset, &trained)?;
                let k_gt = gt.iter().flatten().copied().max().unwrap_or(0) + 1;
                let report = evaluate(&pred, gt, cfg.k, k_gt, Scope::Global, &[])?;
                log.evals.push(EvalRecord { epoch, report });
            }
        }
    }

    Ok((
        TrainedModel {
            model,
            codebook,
            patch_len,
            k: cfg.k,
            loss: loss_cfg,
            fps,
            stats,
        },
        log,
    ))
}

#[allow(clippy::too_many_arguments)]
fn restart_dead_words<F: Real>(
    codebook: &mut Codebook<F>,
    patch_values: &Tensor<F>,
    assignment: &crate::quantizer::PatchAssignment,
    usage: &[usize],
    empty_steps: &mut [usize],
    limit: usize,
    rng: &mut ChaCha20Rng,
) {
    let valid_indices: Vec<usize> = (0..assignment.valid.len())
        .filter(|&i| assignment.valid[i])
        .collect();
    if valid_indices.is_empty() {
        return;
    }
    let word_len = codebook.patch_len() * codebook.dim();
    for w in 0..usage.len() {
        if usage[w] > 0 {
            empty_steps[w] = 0;
            continue;
        }
        empty_steps[w] += 1;
        if empty_steps[w] >= limit {
            let pick = valid_indices[rng.gen_range(0..valid_indices.len())];
            let data = patch_values.data()[pick * word_len..(pick + 1) * word_len].to_vec();
            codebook.set_word(
                w,
                Tensor::new(vec![codebook.patch_len(), codebook.dim()], data).unwrap(),
            );
            empty_steps[w] = 0;
        }
    }
}

/// Deterministic inference: per-frame word labels for every sequence, in
/// dataset order, truncated to each original length. Never mutates the
/// codebook.
pub fn segment<F: Real>(
    dataset: &[SkeletonSequence],
    trained: &TrainedModel<F>,
) -> Result<Vec<Vec<usize>>> {
    check_dataset(dataset)?;
    let data: Vec<SkeletonSequence> = match &trained.stats {
        Some(st) => dataset
            .iter()
            .map(|s| st.apply(s))
            .collect::<Result<_>>()?,
        None => dataset.to_vec(),
    };
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); dataset.len()];
    for batch in make_batches(&data, 8, None)? {
        let (x, _) = batch_tensors::<F>(&batch);
        let mut tape = Tape::new();
        let ids = trained.model.register(&mut tape, false);
        let xi = tape.constant(x);
        let z = trained.model.encode(&mut tape, &ids, xi)?;
        let (patches, _) = patchify(&mut tape, z, trained.patch_len)?;
        let valid = patch_validity(&batch.lengths, batch.t_max, trained.patch_len);
        let values = tape.value(patches).clone();
        let (_, assignment) = quantize(&values, &trained.codebook, &valid)?;
        let labels = segmentation_from_assignment(&assignment, trained.patch_len, &batch.lengths)?;
        for (slot, labels) in batch.indices.iter().zip(labels) {
            out[*slot] = labels;
        }
    }
    Ok(out)
}

/// Latent patch vectors plus their word assignments over a whole dataset
/// (valid patches only), e.g. for silhouette computation or export.
pub fn latent_assignments<F: Real>(
    dataset: &[SkeletonSequence],
    trained: &TrainedModel<F>,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let data: Vec<SkeletonSequence> = match &trained.stats {
        Some(st) => dataset
            .iter()
            .map(|s| st.apply(s))
            .collect::<Result<_>>()?,
        None => dataset.to_vec(),
    };
    let mut points = Vec::new();
    let mut assignments = Vec::new();
    for batch in make_batches(&data, 8, None)? {
        let (x, _) = batch_tensors::<F>(&batch);
        let mut tape = Tape::new();
        let ids = trained.model.register(&mut tape, false);
        let xi = tape.constant(x);
        let z = trained.model.encode(&mut tape, &ids, xi)?;
        let (patches, _) = patchify(&mut tape, z, trained.patch_len)?;
        let valid = patch_validity(&batch.lengths, batch.t_max, trained.patch_len);
        let values = tape.value(patches).clone();
        let (_, assignment) = quantize(&values, &trained.codebook, &valid)?;
        let word_len = trained.codebook.patch_len() * trained.codebook.dim();
        for (pi, &ok) in valid.iter().enumerate() {
            if ok {
                points.push(
                    values.data()[pi * word_len..(pi + 1) * word_len]
                        .iter()
                        .map(|&v| v.to_f64().unwrap())
                        .collect(),
                );
                assignments.push(assignment.word[pi]);
            }
        }
    }
    Ok((points, assignments))
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct SweepRow {
    pub k: usize,
    pub silhouette: f64,
    pub report: Option<MetricsReport>,
}

/// Train one model per K (same seed policy), reporting silhouette and, when
/// ground-truth labels exist, the evaluation metrics.
pub fn sweep_k<F: Real>(
    dataset: &[SkeletonSequence],
    base: &TrainConfig,
    k_range: std::ops::RangeInclusive<usize>,
) -> Result<Vec<SweepRow>> {
    if k_range.is_empty() {
        return Err(Error::InvalidArg("empty K range".into()));
    }
    let gt: Option<Vec<Vec<usize>>> = dataset
        .iter()
        .map(|s| {
            s.labels
                .as_ref()
                .map(|l| l.iter().map(|&x| x as usize).collect())
        })
        .collect();
    let mut rows = Vec::new();
    for k in k_range {
        let cfg = TrainConfig {
            k,
            ..base.clone()
        };
        let (trained, _) = train::<F>(dataset, &cfg)?;
        let (points, assignments) = latent_assignments(dataset, &trained)?;
        let sil = silhouette(&points, &assignments, 5000, cfg.seed)?;
        let report = match &gt {
            Some(gt) => {
                let pred = segment(dataset, &trained)?;
                let k_gt = gt.iter().flatten().copied().max().unwrap_or(0) + 1;
                Some(evaluate(&pred, gt, k, k_gt, Scope::Global, &[])?)
            }
            None => None,
        };
        rows.push(SweepRow {
            k,
            silhouette: sil,
            report,
        });
    }
    Ok(rows)
}
