//! Skeleton sequence data: types, file I/O, preprocessing, batching, and a
//! labeled synthetic generator for desk-scale verification.

mod batch;
mod format;
mod synth;

pub use batch::{make_batches, Batch};
pub use format::{load_labels, load_manifest, load_skel1, save_labels, save_manifest, save_skel1};
pub use synth::{generate_synthetic, ActionParams, SyntheticSpec};

use crate::error::{Error, Result};

/// A multivariate skeleton time series of shape `C x T x V` (channels per
/// joint, frames, joints), stored row-major in `[c][t][v]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub id: String,
    pub channels: usize,
    pub frames: usize,
    pub joints: usize,
    pub fps: f32,
    pub root_joint: usize,
    data: Vec<f32>,
    pub labels: Option<Vec<u16>>,
}

impl SkeletonSequence {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: impl Into<String>,
        channels: usize,
        frames: usize,
        joints: usize,
        fps: f32,
        root_joint: usize,
        data: Vec<f32>,
        labels: Option<Vec<u16>>,
    ) -> Result<Self> {
        if channels < 1 || frames < 1 || joints < 1 {
            return Err(Error::InvalidArg(format!(
                "sequence dims must be >= 1, got C={channels} T={frames} V={joints}"
            )));
        }
        if !fps.is_finite() || fps <= 0.0 {
            return Err(Error::InvalidArg(format!("fps must be positive, got {fps}")));
        }
        if root_joint >= joints {
            return Err(Error::InvalidArg(format!(
                "root joint {root_joint} out of range for {joints} joints"
            )));
        }
        if data.len() != channels * frames * joints {
            return Err(Error::Shape(format!(
                "data length {} != C*T*V = {}",
                data.len(),
                channels * frames * joints
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArg("sequence contains non-finite values".into()));
        }
        if let Some(l) = &labels {
            if l.len() != frames {
                return Err(Error::Shape(format!(
                    "label length {} != T = {frames}",
                    l.len()
                )));
            }
        }
        Ok(SkeletonSequence {
            id: id.into(),
            channels,
            frames,
            joints,
            fps,
            root_joint,
            data,
            labels,
        })
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize, v: usize) -> f32 {
        self.data[(c * self.frames + t) * self.joints + v]
    }

    #[inline]
    fn get_mut(&mut self, c: usize, t: usize, v: usize) -> &mut f32 {
        &mut self.data[(c * self.frames + t) * self.joints + v]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// An on-disk dataset: sequence files plus the declared cluster count.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub k: usize,
    pub paths: Vec<std::path::PathBuf>,
}

impl DatasetManifest {
    /// Load every referenced sequence (labels picked up from sibling `.skll`
    /// files when present).
    pub fn load_sequences(&self, base: &std::path::Path) -> Result<Vec<SkeletonSequence>> {
        let mut seqs = Vec::with_capacity(self.paths.len());
        for rel in &self.paths {
            let path = base.join(rel);
            let mut seq = load_skel1(&path)?;
            let label_path = path.with_extension("skll");
            if label_path.exists() {
                let labels = load_labels(&label_path)?;
                if labels.len() != seq.frames {
                    return Err(Error::Shape(format!(
                        "label file {} has {} entries for {} frames",
                        label_path.display(),
                        labels.len(),
                        seq.frames
                    )));
                }
                seq.labels = Some(labels);
            }
            seqs.push(seq);
        }
        Ok(seqs)
    }
}

/// Subtract the root joint's positional channels from every joint, per frame.
/// Non-positional channels are untouched; the root ends at exactly zero.
pub fn root_center(seq: &SkeletonSequence, position_channels: &[usize]) -> Result<SkeletonSequence> {
    for &c in position_channels {
        if c >= seq.channels {
            return Err(Error::InvalidArg(format!(
                "position channel {c} out of range for C={}",
                seq.channels
            )));
        }
    }
    let mut out = seq.clone();
    let root = seq.root_joint;
    for &c in position_channels {
        for t in 0..seq.frames {
            let offset = seq.get(c, t, root);
            for v in 0..seq.joints {
                *out.get_mut(c, t, v) -= offset;
            }
        }
    }
    Ok(out)
}

/// Keep frames `0, factor, 2*factor, ...`; fps divides by the factor and
/// labels are strided identically.
pub fn downsample(seq: &SkeletonSequence, factor: usize) -> Result<SkeletonSequence> {
    if factor < 1 {
        return Err(Error::InvalidArg("downsample factor must be >= 1".into()));
    }
    if factor == 1 {
        return Ok(seq.clone());
    }
    let kept: Vec<usize> = (0..seq.frames).step_by(factor).collect();
    let new_t = kept.len();
    let mut data = Vec::with_capacity(seq.channels * new_t * seq.joints);
    for c in 0..seq.channels {
        for &t in &kept {
            for v in 0..seq.joints {
                data.push(seq.get(c, t, v));
            }
        }
    }
    let labels = seq
        .labels
        .as_ref()
        .map(|l| kept.iter().map(|&t| l[t]).collect());
    SkeletonSequence::new(
        seq.id.clone(),
        seq.channels,
        new_t,
        seq.joints,
        seq.fps / factor as f32,
        seq.root_joint,
        data,
        labels,
    )
}

/// Per-channel mean and standard deviation over a training set.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Fit over all frames of all sequences.
    pub fn fit(seqs: &[SkeletonSequence]) -> Result<Self> {
        let c = seqs
            .first()
            .ok_or_else(|| Error::InvalidArg("empty dataset".into()))?
            .channels;
        let mut sum = vec![0.0f64; c];
        let mut sum_sq = vec![0.0f64; c];
        let mut count = vec![0.0f64; c];
        for seq in seqs {
            if seq.channels != c {
                return Err(Error::Shape("mixed channel counts in dataset".into()));
            }
            for ch in 0..c {
                for t in 0..seq.frames {
                    for v in 0..seq.joints {
                        let x = seq.get(ch, t, v) as f64;
                        sum[ch] += x;
                        sum_sq[ch] += x * x;
                        count[ch] += 1.0;
                    }
                }
            }
        }
        let mean: Vec<f32> = (0..c).map(|ch| (sum[ch] / count[ch]) as f32).collect();
        let std: Vec<f32> = (0..c)
            .map(|ch| {
                let var = sum_sq[ch] / count[ch] - (sum[ch] / count[ch]).powi(2);
                (var.max(0.0).sqrt() as f32).max(1e-6)
            })
            .collect();
        Ok(ChannelStats { mean, std })
    }

    pub fn apply(&self, seq: &SkeletonSequence) -> Result<SkeletonSequence> {
        if seq.channels != self.mean.len() {
            return Err(Error::Shape("channel stats do not match sequence".into()));
        }
        let mut out = seq.clone();
        for c in 0..seq.channels {
            let (m, s) = (self.mean[c], self.std[c]);
            for t in 0..seq.frames {
                for v in 0..seq.joints {
                    *out.get_mut(c, t, v) = (seq.get(c, t, v) - m) / s;
                }
            }
        }
        Ok(out)
    }
}
