//! Training objectives: inter-joint distance MSE (default), plain MSE and
//! root-distance MSE (ablations), the commitment term, and the weighted
//! total. All losses exclude padded frames via the mask and are
//! differentiable w.r.t. the reconstruction / latent patches.

use crate::error::{Error, Result};
use crate::tensor::{real, Real, Tape, Tensor, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionVariant {
    InterJoint,
    PlainMse,
    RootDistance,
}

impl std::str::FromStr for ReconstructionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inter_joint" => Ok(Self::InterJoint),
            "mse" | "plain_mse" => Ok(Self::PlainMse),
            "root_distance" => Ok(Self::RootDistance),
            other => Err(Error::InvalidArg(format!(
                "unknown loss variant '{other}' (expected inter_joint|mse|root_distance)"
            ))),
        }
    }
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub variant: ReconstructionVariant,
    pub lambda: f64,
    pub position_channels: Vec<usize>,
    pub root_joint: usize,
}

impl LossConfig {
    pub fn new(variant: ReconstructionVariant, lambda: f64, channels: usize, root_joint: usize) -> Self {
        LossConfig {
            variant,
            lambda,
            position_channels: default_position_channels(channels),
            root_joint,
        }
    }
}

/// The first three channels are treated as positions when more channels
/// exist (e.g. orientation angles); otherwise all channels are positional.
pub fn default_position_channels(channels: usize) -> Vec<usize> {
    (0..channels.min(3)).collect()
}

fn check_mask_total<F: Real>(mask: &Tensor<F>) -> Result<f64> {
    let total: f64 = mask.data().iter().map(|&m| m.to_f64().unwrap()).sum();
    if total <= 0.0 {
        return Err(Error::InvalidArg("empty mask: no valid frames".into()));
    }
    Ok(total)
}

fn check_x_shapes<F: Real>(tape: &Tape<F>, x: &Tensor<F>, xhat: TensorId) -> Result<Vec<usize>> {
    let shape = x.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("expected [N,C,T,V], got {shape:?}")));
    }
    if tape.value(xhat).shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "reconstruction shape {:?} != input shape {shape:?}",
            tape.value(xhat).shape()
        )));
    }
    Ok(shape)
}

/// Per-channel `[N,T]` views of one joint of `xhat`, for the requested
/// channels.
fn joint_channel_slices<F: Real>(
    tape: &mut Tape<F>,
    xhat: TensorId,
    shape: &[usize],
    joint: usize,
    channels: &[usize],
) -> Result<Vec<TensorId>> {
    let (n, t) = (shape[0], shape[2]);
    let jslice = tape.slice(xhat, 3, joint, 1)?; // [N,C,T,1]
    channels
        .iter()
        .map(|&c| {
            let cs = tape.slice(jslice, 1, c, 1)?; // [N,1,T,1]
            tape.reshape(cs, vec![n, t])
        })
        .collect()
}

/// Host-side pairwise joint distance of the reference input: `[N,T]` values
/// of `|| X[n,:,t,v] - X[n,:,t,w] ||` over the position channels.
fn reference_distance<F: Real>(
    x: &Tensor<F>,
    shape: &[usize],
    v: usize,
    w: usize,
    channels: &[usize],
) -> Tensor<F> {
    let (n, c, t, joints) = (shape[0], shape[1], shape[2], shape[3]);
    let _ = c;
    let mut out = vec![F::zero(); n * t];
    for ni in 0..n {
        for ti in 0..t {
            let mut d2 = 0.0f64;
            for &ci in channels {
                let a = x.data()[((ni * shape[1] + ci) * t + ti) * joints + v]
                    .to_f64()
                    .unwrap();
                let b = x.data()[((ni * shape[1] + ci) * t + ti) * joints + w]
                    .to_f64()
                    .unwrap();
                d2 += (a - b) * (a - b);
            }
            out[ni * t + ti] = real::<F>(d2.sqrt());
        }
    }
    Tensor::new(vec![n, t], out).unwrap()
}

/// Squared distance-error `[N,T]` for one joint pair, on the tape.
fn pair_error_term<F: Real>(
    tape: &mut Tape<F>,
    slices_v: &[TensorId],
    slices_w: &[TensorId],
    dx_ref: Tensor<F>,
) -> Result<TensorId> {
    let mut d2: Option<TensorId> = None;
    for (sv, sw) in slices_v.iter().zip(slices_w.iter()) {
        let diff = tape.sub(*sv, *sw)?;
        let sq = tape.square(diff);
        d2 = Some(match d2 {
            None => sq,
            Some(acc) => tape.add(acc, sq)?,
        });
    }
    let dhat = tape.sqrt(d2.expect("at least one position channel"));
    let dx = tape.constant(dx_ref);
    let err = tape.sub(dx, dhat)?;
    Ok(tape.square(err))
}

/// Mean squared error over all ordered joint pairs of per-frame inter-joint
/// distances, masked and normalized by `valid_frames * V^2`. Diagonal terms
/// contribute zero but count in the normalization.
pub fn inter_joint_mse<F: Real>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    xhat: TensorId,
    mask: &Tensor<F>,
    position_channels: &[usize],
) -> Result<TensorId> {
    let shape = check_x_shapes(tape, x, xhat)?;
    let total_valid = check_mask_total(mask)?;
    let joints = shape[3];
    validate_channels(position_channels, shape[1])?;

    let mask_id = tape.constant(mask.clone());
    let slices: Vec<Vec<TensorId>> = (0..joints)
        .map(|v| joint_channel_slices(tape, xhat, &shape, v, position_channels))
        .collect::<Result<_>>()?;

    let mut total: Option<TensorId> = None;
    for v in 0..joints {
        for w in v + 1..joints {
            let dx = reference_distance(x, &shape, v, w, position_channels);
            let sq = pair_error_term(tape, &slices[v], &slices[w], dx)?;
            let masked = tape.mul(sq, mask_id)?;
            let s = tape.sum(masked, &[0, 1])?;
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s)?,
            });
        }
    }
    let norm = 2.0 / (total_valid * (joints * joints) as f64);
    match total {
        Some(t) => Ok(tape.scale(t, real::<F>(norm))),
        // Single joint: every pair is diagonal, the loss is exactly zero.
        None => Ok(tape.constant(Tensor::scalar(F::zero()))),
    }
}

/// As [`inter_joint_mse`] with the second joint fixed to the root;
/// normalized by `valid_frames * V`.
pub fn root_distance_mse<F: Real>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    xhat: TensorId,
    mask: &Tensor<F>,
    root_joint: usize,
    position_channels: &[usize],
) -> Result<TensorId> {
    let shape = check_x_shapes(tape, x, xhat)?;
    let total_valid = check_mask_total(mask)?;
    let joints = shape[3];
    if root_joint >= joints {
        return Err(Error::InvalidArg(format!(
            "root joint {root_joint} out of range for V={joints}"
        )));
    }
    validate_channels(position_channels, shape[1])?;

    let mask_id = tape.constant(mask.clone());
    let root_slices = joint_channel_slices(tape, xhat, &shape, root_joint, position_channels)?;
    let mut total: Option<TensorId> = None;
    for v in 0..joints {
        if v == root_joint {
            continue;
        }
        let slices_v = joint_channel_slices(tape, xhat, &shape, v, position_channels)?;
        let dx = reference_distance(x, &shape, v, root_joint, position_channels);
        let sq = pair_error_term(tape, &slices_v, &root_slices, dx)?;
        let masked = tape.mul(sq, mask_id)?;
        let s = tape.sum(masked, &[0, 1])?;
        total = Some(match total {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    let norm = 1.0 / (total_valid * joints as f64);
    match total {
        Some(t) => Ok(tape.scale(t, real::<F>(norm))),
        None => Ok(tape.constant(Tensor::scalar(F::zero()))),
    }
}

/// Masked mean of squared elementwise differences over all channels.
pub fn plain_mse<F: Real>(
    tape: &mut Tape<F>,
    x: &Tensor<F>,
    xhat: TensorId,
    mask: &Tensor<F>,
) -> Result<TensorId> {
    let shape = check_x_shapes(tape, x, xhat)?;
    let total_valid = check_mask_total(mask)?;
    let (n, c, t, v) = (shape[0], shape[1], shape[2], shape[3]);
    // Frame mask expanded to the full [N,C,T,V] grid.
    let mut mask4 = vec![F::zero(); n * c * t * v];
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                let m = mask.data()[ni * t + ti];
                for vi in 0..v {
                    mask4[((ni * c + ci) * t + ti) * v + vi] = m;
                }
            }
        }
    }
    let mask_id = tape.constant(Tensor::new(shape.clone(), mask4)?);
    let x_id = tape.constant(x.clone());
    let diff = tape.sub(xhat, x_id)?;
    let sq = tape.square(diff);
    let masked = tape.mul(sq, mask_id)?;
    let s = tape.sum(masked, &[0, 1, 2, 3])?;
    Ok(tape.scale(s, real::<F>(1.0 / (total_valid * (c * v) as f64))))
}

/// Commitment term: the sum over valid patches of the squared distance
/// between each patch and its (stop-gradient) assigned word. Gradient
/// reaches only the encoder.
pub fn commitment<F: Real>(
    tape: &mut Tape<F>,
    patches: TensorId,
    quantized: &Tensor<F>,
    valid: &[bool],
) -> Result<TensorId> {
    let shape = tape.value(patches).shape().to_vec();
    if quantized.shape() != shape.as_slice() {
        return Err(Error::Shape(format!(
            "commitment shapes differ: {:?} vs {shape:?}",
            quantized.shape()
        )));
    }
    let (n, m) = (shape[0], shape[1]);
    if valid.len() != n * m {
        return Err(Error::Shape("validity grid does not match patches".into()));
    }
    let q = tape.constant(quantized.clone());
    let diff = tape.sub(q, patches)?;
    let sq = tape.square(diff);
    let per_patch = tape.sum(sq, &[2, 3])?; // [N,M]
    let vmask: Vec<F> = valid
        .iter()
        .map(|&b| if b { F::one() } else { F::zero() })
        .collect();
    let vmask_id = tape.constant(Tensor::new(vec![n, m], vmask)?);
    let masked = tape.mul(per_patch, vmask_id)?;
    tape.sum(masked, &[0, 1])
}

/// `L_total = lambda * L_rec + L_commit`.
pub fn total_loss<F: Real>(
    tape: &mut Tape<F>,
    l_rec: TensorId,
    l_commit: TensorId,
    lambda: f64,
) -> Result<TensorId> {
    if lambda < 0.0 {
        return Err(Error::InvalidArg("lambda must be >= 0".into()));
    }
    let scaled = tape.scale(l_rec, real::<F>(lambda));
    tape.add(scaled, l_commit)
}

/// Dispatch on the configured reconstruction variant.
pub fn reconstruction<F: Real>(
    tape: &mut Tape<F>,
    cfg: &LossConfig,
    x: &Tensor<F>,
    xhat: TensorId,
    mask: &Tensor<F>,
) -> Result<TensorId> {
    match cfg.variant {
        ReconstructionVariant::InterJoint => {
            inter_joint_mse(tape, x, xhat, mask, &cfg.position_channels)
        }
        ReconstructionVariant::PlainMse => plain_mse(tape, x, xhat, mask),
        ReconstructionVariant::RootDistance => {
            root_distance_mse(tape, x, xhat, mask, cfg.root_joint, &cfg.position_channels)
        }
    }
}

fn validate_channels(channels: &[usize], c: usize) -> Result<()> {
    if channels.is_empty() {
        return Err(Error::InvalidArg("no position channels configured".into()));
    }
    for &ch in channels {
        if ch >= c {
            return Err(Error::InvalidArg(format!(
                "position channel {ch} out of range for C={c}"
            )));
        }
    }
    Ok(())
}
