//! Shared test utilities: finite-difference oracles, rigid transforms, and
//! the synthetic acceptance dataset.

#![allow(dead_code)]

use skelseg::data::{generate_synthetic, SkeletonSequence, SyntheticSpec};
use skelseg::losses::{commitment, reconstruction, total_loss, LossConfig};
use skelseg::model::Autoencoder;
use skelseg::quantizer::{depatchify, patchify, quantize, Codebook};
use skelseg::tensor::{Tape, Tensor};

/// Central finite differences of a scalar function at `x0`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x0.len()];
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst relative error between analytic and numeric gradients. Near-zero
/// pairs compare absolutely so a true zero gradient does not blow up the
/// ratio.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs());
        let err = if denom < 1e-7 {
            (a - n).abs()
        } else {
            (a - n).abs() / denom
        };
        worst = worst.max(err);
    }
    worst
}

/// Apply a rotation (axis-angle) plus translation to the position channels
/// of an `[N,C,T,V]` buffer (first three channels).
pub fn rigid_transform(
    data: &[f64],
    shape: &[usize],
    axis: [f64; 3],
    angle: f64,
    translation: [f64; 3],
) -> Vec<f64> {
    let (n, c, t, v) = (shape[0], shape[1], shape[2], shape[3]);
    assert!(c >= 3);
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let u = [axis[0] / norm, axis[1] / norm, axis[2] / norm];
    let (s, co) = (angle.sin(), angle.cos());
    let mut out = data.to_vec();
    for ni in 0..n {
        for ti in 0..t {
            for vi in 0..v {
                let idx = |ci: usize| ((ni * c + ci) * t + ti) * v + vi;
                let p = [data[idx(0)], data[idx(1)], data[idx(2)]];
                let dot = u[0] * p[0] + u[1] * p[1] + u[2] * p[2];
                let cross = [
                    u[1] * p[2] - u[2] * p[1],
                    u[2] * p[0] - u[0] * p[2],
                    u[0] * p[1] - u[1] * p[0],
                ];
                for ci in 0..3 {
                    out[idx(ci)] = p[ci] * co
                        + cross[ci] * s
                        + u[ci] * dot * (1.0 - co)
                        + translation[ci];
                }
            }
        }
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for i in 0..a.len() {
        num += (ra[i] - mean) * (rb[i] - mean);
        da += (ra[i] - mean).powi(2);
        db += (rb[i] - mean).powi(2);
    }
    num / (da.sqrt() * db.sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// The synthetic end-to-end dataset: K=4 actions, 20 sequences around
/// T=1000 at 50 fps, low noise, fixed seed.
pub fn acceptance_dataset() -> Vec<SkeletonSequence> {
    let spec = SyntheticSpec::well_separated(4, 3, 3, 50.0, 20, 2024).unwrap();
    generate_synthetic(&spec).unwrap()
}

/// The full pipeline loss with the quantizer's discrete parts pinned at a
/// base point, which is the function whose gradient the tape actually
/// computes. The straight-through pass uses the value of the stop-gradient
/// correction `q - p` at the base parameters; finite differences of the
/// composed function only match the tape when that detached value is held
/// constant, exactly as `detach` defines it.
pub struct FrozenGraph {
    pub x: Tensor<f64>,
    pub mask: Tensor<f64>,
    pub patch_len: usize,
    pub lambda: f64,
    pub loss: LossConfig,
    /// Quantized patches at the base point (the commitment target).
    quantized: Tensor<f64>,
    /// `q - p` at the base point, the frozen detach() output.
    delta: Tensor<f64>,
    num_patches: usize,
}

impl FrozenGraph {
    /// Quantize once at the base model to pin the assignment, the
    /// commitment target, and the stop-gradient correction.
    pub fn new(
        model: &Autoencoder<f64>,
        codebook: &Codebook<f64>,
        x: Tensor<f64>,
        mask: Tensor<f64>,
        patch_len: usize,
        lambda: f64,
        loss: LossConfig,
    ) -> Self {
        let mut tape = Tape::new();
        let ids = model.register(&mut tape, false);
        let xi = tape.constant(x.clone());
        let z = model.encode(&mut tape, &ids, xi).unwrap();
        let (patches, _) = patchify(&mut tape, z, patch_len).unwrap();
        let pv = tape.value(patches).clone();
        let m = pv.shape()[1];
        let n = pv.shape()[0];
        let (quantized, _) = quantize(&pv, codebook, &vec![true; n * m]).unwrap();
        let delta_data: Vec<f64> = quantized
            .data()
            .iter()
            .zip(pv.data())
            .map(|(q, p)| q - p)
            .collect();
        let delta = Tensor::new(pv.shape().to_vec(), delta_data).unwrap();
        FrozenGraph {
            x,
            mask,
            patch_len,
            lambda,
            loss,
            quantized,
            delta,
            num_patches: n * m,
        }
    }

    /// Evaluate L_total and, optionally, collect gradients of every model
    /// parameter.
    pub fn eval(
        &self,
        model: &Autoencoder<f64>,
        want_grads: bool,
    ) -> (f64, Option<Vec<Vec<f64>>>) {
        let mut tape = Tape::new();
        let ids = model.register(&mut tape, want_grads);
        let xi = tape.constant(self.x.clone());
        let z = model.encode(&mut tape, &ids, xi).unwrap();
        let (patches, _) = patchify(&mut tape, z, self.patch_len).unwrap();

        // st = p + frozen(q - p): at the base point this equals the
        // production straight-through output and gradient.
        let delta = tape.constant(self.delta.clone());
        let st = tape.add(patches, delta).unwrap();
        let t = self.x.shape()[2];
        let deq = depatchify(&mut tape, st, t).unwrap();
        let xhat = model.decode(&mut tape, &ids, deq).unwrap();
        let l_rec = reconstruction(&mut tape, &self.loss, &self.x, xhat, &self.mask).unwrap();
        let valid = vec![true; self.num_patches];
        let l_com = commitment(&mut tape, patches, &self.quantized, &valid).unwrap();
        let l_total = total_loss(&mut tape, l_rec, l_com, self.lambda).unwrap();
        let loss = tape.value(l_total).item();
        if !want_grads {
            return (loss, None);
        }
        tape.backward(l_total).unwrap();
        let grads = ids
            .iter()
            .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_default())
            .collect();
        (loss, Some(grads))
    }
}
