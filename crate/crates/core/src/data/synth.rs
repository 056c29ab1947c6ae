//! Labeled synthetic skeleton data for desk-scale verification.
//!
//! Each action is a per-(channel, joint) sinusoid table; a sequence is a
//! concatenation of action segments sampled from those tables plus Gaussian
//! noise. Frequencies are whole cycles per second (0 = a constant pose
//! offset) and segment lengths are whole seconds, so every one-second window
//! of an action traces the same waveform regardless of where the segment
//! falls in the sequence. That makes the action classes separable by
//! construction, which the end-to-end checks rely on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use super::SkeletonSequence;
use crate::error::{Error, Result};

/// Sinusoid parameters for one action: `freq`, `amp`, `phase` are `C*V`
/// tables in `[c][v]` order. Frequency is in cycles per second.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionParams {
    pub freq: Vec<f32>,
    pub amp: Vec<f32>,
    pub phase: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub k: usize,
    pub channels: usize,
    pub joints: usize,
    pub fps: f32,
    pub num_sequences: usize,
    pub actions: Vec<ActionParams>,
    /// Segment length bounds in seconds; lengths are drawn as whole seconds
    /// within the bounds.
    pub seg_len_range: (f32, f32),
    pub segs_per_seq: (usize, usize),
    pub noise_sigma: f32,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Random action tables with pairwise-distinct parameters: integer
    /// frequencies in 0..=3 (0 yields a constant pose offset) and amplitudes
    /// large enough that reconstruction error dominates the commitment term
    /// at the default loss weighting.
    pub fn well_separated(
        k: usize,
        channels: usize,
        joints: usize,
        fps: f32,
        num_sequences: usize,
        seed: u64,
    ) -> Result<Self> {
        if k < 1 {
            return Err(Error::InvalidArg("synthetic K must be >= 1".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
        let table = channels * joints;
        let mut actions: Vec<ActionParams> = Vec::with_capacity(k);
        while actions.len() < k {
            let mut freq = Vec::with_capacity(table);
            let mut amp = Vec::with_capacity(table);
            let mut phase = Vec::with_capacity(table);
            for _ in 0..table {
                let f = *[0.0f32, 1.0, 2.0, 3.0]
                    .get(rng.gen_range(0usize..4))
                    .unwrap();
                freq.push(f);
                amp.push(rng.gen_range(20.0f32..60.0));
                phase.push(rng.gen_range(0.0f32..std::f32::consts::TAU));
            }
            let candidate = ActionParams { freq, amp, phase };
            if actions.iter().all(|a| table_distance(a, &candidate) > 1.0) {
                actions.push(candidate);
            }
        }
        Ok(SyntheticSpec {
            k,
            channels,
            joints,
            fps,
            num_sequences,
            actions,
            seg_len_range: (2.0, 6.0),
            segs_per_seq: (4, 6),
            noise_sigma: 0.5,
            seed,
        })
    }
}

fn table_distance(a: &ActionParams, b: &ActionParams) -> f32 {
    let mut d = 0.0f32;
    for i in 0..a.freq.len() {
        d += (a.freq[i] - b.freq[i]).powi(2)
            + (a.amp[i] - b.amp[i]).powi(2)
            + (a.phase[i] - b.phase[i]).powi(2);
    }
    d.sqrt()
}

/// Generate labeled sequences. Deterministic for a fixed spec and seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<SkeletonSequence>> {
    if spec.k == 0 || spec.actions.len() != spec.k {
        return Err(Error::InvalidArg(format!(
            "spec needs one action table per class: K={}, tables={}",
            spec.k,
            spec.actions.len()
        )));
    }
    if spec.num_sequences == 0 {
        return Err(Error::InvalidArg("num_sequences must be >= 1".into()));
    }
    if spec.segs_per_seq.0 < 1 || spec.segs_per_seq.1 < spec.segs_per_seq.0 {
        return Err(Error::InvalidArg("empty segments-per-sequence range".into()));
    }
    if !spec.seg_len_range.0.is_finite()
        || spec.seg_len_range.0 <= 0.0
        || spec.seg_len_range.1 < spec.seg_len_range.0
    {
        return Err(Error::InvalidArg("empty segment-length range".into()));
    }

    // Whole-second lengths within the configured range.
    let lo = spec.seg_len_range.0.ceil().max(1.0) as u32;
    let hi = spec.seg_len_range.1.floor().max(lo as f32) as u32;

    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(spec.num_sequences);
    for i in 0..spec.num_sequences {
        let n_segs = rng.gen_range(spec.segs_per_seq.0..=spec.segs_per_seq.1);
        let mut frame_actions: Vec<u16> = Vec::new();
        let mut prev_action: Option<usize> = None;
        for _ in 0..n_segs {
            let action = loop {
                let a = rng.gen_range(0..spec.k);
                if spec.k == 1 || Some(a) != prev_action {
                    break a;
                }
            };
            prev_action = Some(action);
            let secs = rng.gen_range(lo..=hi);
            let frames = ((secs as f32 * spec.fps).round() as usize).max(1);
            frame_actions.extend(std::iter::repeat_n(action as u16, frames));
        }
        let t_total = frame_actions.len();
        let mut data = vec![0.0f32; spec.channels * t_total * spec.joints];
        for c in 0..spec.channels {
            for t in 0..t_total {
                let action = &spec.actions[frame_actions[t] as usize];
                let time = t as f64 / spec.fps as f64;
                for v in 0..spec.joints {
                    let idx = c * spec.joints + v;
                    let base = action.amp[idx] as f64
                        * (std::f64::consts::TAU * action.freq[idx] as f64 * time
                            + action.phase[idx] as f64)
                            .sin();
                    let noise: f64 = <StandardNormal as Distribution<f64>>::sample(
                        &StandardNormal,
                        &mut rng,
                    ) * spec.noise_sigma as f64;
                    data[(c * t_total + t) * spec.joints + v] = (base + noise) as f32;
                }
            }
        }
        out.push(SkeletonSequence::new(
            format!("synth_{i:03}"),
            spec.channels,
            t_total,
            spec.joints,
            spec.fps,
            0,
            data,
            Some(frame_actions),
        )?);
    }
    Ok(out)
}
