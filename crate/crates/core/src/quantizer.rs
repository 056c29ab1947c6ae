//! Latent patching, motion-word assignment, EMA codebook learning, and the
//! segmentation labels that fall out of the assignment.
//!
//! The codebook never receives gradients: words move only through convex EMA
//! blending toward the mean of their assigned patches, while the encoder is
//! trained through the straight-through path and the commitment loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{real, Real, Tape, Tensor, TensorId};

/// K learnable motion words, each a `P x (V*D)` latent patch prototype.
#[derive(Clone, Debug)]
pub struct Codebook<F> {
    patch_len: usize,
    dim: usize,
    words: Vec<Tensor<F>>,
}

impl<F: Real> Codebook<F> {
    /// Kaiming-uniform init with fan-in equal to the flattened word size.
    pub fn kaiming_init(k: usize, patch_len: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if k < 1 || patch_len < 1 || dim < 1 {
            return Err(Error::InvalidArg("codebook needs K, P, dim >= 1".into()));
        }
        let bound = (6.0 / (patch_len * dim) as f64).sqrt();
        let words = (0..k)
            .map(|_| {
                let data: Vec<F> = (0..patch_len * dim)
                    .map(|_| real::<F>(rng.gen_range(-bound..bound)))
                    .collect();
                Tensor::new(vec![patch_len, dim], data).unwrap()
            })
            .collect();
        Ok(Codebook {
            patch_len,
            dim,
            words,
        })
    }

    /// Build words from k-means centroids over a sample of flattened patches.
    pub fn kmeans_init(
        sample: &[Vec<F>],
        k: usize,
        patch_len: usize,
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let centroids = kmeans(sample, k, 100, 4, seed)?.centroids;
        let words = centroids
            .into_iter()
            .map(|c| Tensor::new(vec![patch_len, dim], c).unwrap())
            .collect();
        Ok(Codebook {
            patch_len,
            dim,
            words,
        })
    }

    pub fn from_words(words: Vec<Tensor<F>>) -> Result<Self> {
        let first = words
            .first()
            .ok_or_else(|| Error::InvalidArg("empty codebook".into()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape("codebook words must be P x dim".into()));
        }
        if words.iter().any(|w| w.shape() != shape.as_slice()) {
            return Err(Error::Shape("codebook words must share one shape".into()));
        }
        Ok(Codebook {
            patch_len: shape[0],
            dim: shape[1],
            words,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn patch_len(&self) -> usize {
        self.patch_len
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn word(&self, k: usize) -> &Tensor<F> {
        &self.words[k]
    }

    pub fn words(&self) -> &[Tensor<F>] {
        &self.words
    }

    pub fn set_word(&mut self, k: usize, word: Tensor<F>) {
        debug_assert_eq!(word.shape(), [self.patch_len, self.dim]);
        self.words[k] = word;
    }

    pub fn all_finite(&self) -> bool {
        self.words.iter().all(|w| w.all_finite())
    }
}

/// Per-patch assignment over a flattened `N*M` patch grid.
#[derive(Clone, Debug)]
pub struct PatchAssignment {
    pub n: usize,
    pub m: usize,
    /// Assigned word per patch; meaningful only where `valid` is true.
    pub word: Vec<usize>,
    pub dist2: Vec<f64>,
    pub valid: Vec<bool>,
}

impl PatchAssignment {
    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Word usage counts over valid patches.
    pub fn usage(&self, k: usize) -> Vec<usize> {
        let mut hist = vec![0usize; k];
        for (w, &ok) in self.word.iter().zip(&self.valid) {
            if ok {
                hist[*w] += 1;
            }
        }
        hist
    }
}

/// Split `Z [N,T,dim]` into `M = ceil(T/P)` non-overlapping patches with
/// trailing zero padding: returns `([N,M,P,dim], pad_frames)`.
pub fn patchify<F: Real>(
    tape: &mut Tape<F>,
    z: TensorId,
    patch_len: usize,
) -> Result<(TensorId, usize)> {
    if patch_len < 1 {
        return Err(Error::InvalidArg("patch size must be >= 1".into()));
    }
    let shape = tape.value(z).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("patchify expects [N,T,dim], got {shape:?}")));
    }
    let (n, t, dim) = (shape[0], shape[1], shape[2]);
    let m = t.div_ceil(patch_len);
    let pad = m * patch_len - t;
    let padded = if pad > 0 {
        let zeros = tape.constant(Tensor::zeros(vec![n, pad, dim]));
        tape.concat(&[z, zeros], 1)?
    } else {
        z
    };
    let patches = tape.reshape(padded, vec![n, m, patch_len, dim])?;
    Ok((patches, pad))
}

/// Inverse of [`patchify`]: `[N,M,P,dim]` back to `[N,T,dim]`, truncating
/// the `pad` frames that were appended.
pub fn depatchify<F: Real>(
    tape: &mut Tape<F>,
    patches: TensorId,
    original_t: usize,
) -> Result<TensorId> {
    let shape = tape.value(patches).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "depatchify expects [N,M,P,dim], got {shape:?}"
        )));
    }
    let (n, m, p, dim) = (shape[0], shape[1], shape[2], shape[3]);
    let flat = tape.reshape(patches, vec![n, m * p, dim])?;
    if original_t > m * p {
        return Err(Error::InvalidArg(format!(
            "original T {original_t} exceeds padded length {}",
            m * p
        )));
    }
    tape.slice(flat, 1, 0, original_t)
}

/// Patch validity from the frame mask: a patch is valid iff it overlaps at
/// least one real frame. Returns a flattened `[n][m]` grid.
pub fn patch_validity(lengths: &[usize], t_max: usize, patch_len: usize) -> Vec<bool> {
    let m = t_max.div_ceil(patch_len);
    let mut valid = Vec::with_capacity(lengths.len() * m);
    for &len in lengths {
        for mi in 0..m {
            valid.push(mi * patch_len < len);
        }
    }
    valid
}

/// Nearest-word assignment under flattened Euclidean distance; ties break to
/// the lowest word index. Invalid patches are passed through unchanged.
/// Returns the quantized patch tensor (same shape as the input values).
pub fn quantize<F: Real>(
    patches: &Tensor<F>,
    codebook: &Codebook<F>,
    valid: &[bool],
) -> Result<(Tensor<F>, PatchAssignment)> {
    if codebook.is_empty() {
        return Err(Error::InvalidArg("empty codebook".into()));
    }
    let shape = patches.shape();
    if shape.len() != 4 {
        return Err(Error::Shape(format!(
            "quantize expects [N,M,P,dim], got {shape:?}"
        )));
    }
    let (n, m, p, dim) = (shape[0], shape[1], shape[2], shape[3]);
    if p != codebook.patch_len() || dim != codebook.dim() {
        return Err(Error::Shape(format!(
            "patch inner shape {p}x{dim} does not match word shape {}x{}",
            codebook.patch_len(),
            codebook.dim()
        )));
    }
    if valid.len() != n * m {
        return Err(Error::Shape(format!(
            "validity length {} != N*M = {}",
            valid.len(),
            n * m
        )));
    }
    let word_len = p * dim;
    let mut quantized = patches.data().to_vec();
    let mut word = vec![0usize; n * m];
    let mut dist2 = vec![0.0f64; n * m];

    let results: Vec<(usize, f64)> = (0..n * m)
        .into_par_iter()
        .map(|pi| {
            if !valid[pi] {
                return (0usize, 0.0f64);
            }
            let patch = &patches.data()[pi * word_len..(pi + 1) * word_len];
            let mut best = (0usize, f64::INFINITY);
            for (k, w) in codebook.words().iter().enumerate() {
                let mut d = 0.0f64;
                for (a, b) in patch.iter().zip(w.data().iter()) {
                    let diff = (*a - *b).to_f64().unwrap();
                    d += diff * diff;
                }
                if d < best.1 {
                    best = (k, d);
                }
            }
            best
        })
        .collect();

    for (pi, (k, d)) in results.into_iter().enumerate() {
        if valid[pi] {
            word[pi] = k;
            dist2[pi] = d;
            quantized[pi * word_len..(pi + 1) * word_len]
                .copy_from_slice(codebook.word(k).data());
        }
    }

    Ok((
        Tensor::new(shape.to_vec(), quantized)?,
        PatchAssignment {
            n,
            m,
            word,
            dist2,
            valid: valid.to_vec(),
        },
    ))
}

/// Forward value equals the quantized patches; gradients flow to the encoder
/// patches unchanged (`p + detach(q - p)`). The codebook sits behind the
/// detach, so it never receives gradient.
pub fn straight_through<F: Real>(
    tape: &mut Tape<F>,
    patches: TensorId,
    quantized: Tensor<F>,
) -> Result<TensorId> {
    if quantized.shape() != tape.value(patches).shape() {
        return Err(Error::Shape(format!(
            "straight-through shapes differ: {:?} vs {:?}",
            quantized.shape(),
            tape.value(patches).shape()
        )));
    }
    let q = tape.constant(quantized);
    let diff = tape.sub(q, patches)?;
    let sg = tape.detach(diff);
    tape.add(patches, sg)
}

/// Blend each word toward the mean of its assigned valid patches:
/// `c_k <- alpha * c_k + (1 - alpha) * mean(P_k)`. Words with no assigned
/// patches this batch stay unchanged.
pub fn ema_update<F: Real>(
    codebook: &mut Codebook<F>,
    patches: &Tensor<F>,
    assignment: &PatchAssignment,
    alpha: f64,
) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArg(format!("alpha must be in [0,1], got {alpha}")));
    }
    let word_len = codebook.patch_len() * codebook.dim();
    let k = codebook.len();
    let mut sums = vec![vec![F::zero(); word_len]; k];
    let mut counts = vec![0usize; k];
    for pi in 0..assignment.word.len() {
        if !assignment.valid[pi] {
            continue;
        }
        let w = assignment.word[pi];
        counts[w] += 1;
        let patch = &patches.data()[pi * word_len..(pi + 1) * word_len];
        for (s, &x) in sums[w].iter_mut().zip(patch.iter()) {
            *s += x;
        }
    }
    let a = real::<F>(alpha);
    let one_minus = real::<F>(1.0 - alpha);
    for wi in 0..k {
        if counts[wi] == 0 {
            continue;
        }
        let inv = real::<F>(1.0 / counts[wi] as f64);
        let mut word = codebook.word(wi).clone();
        for (c, s) in word.data_mut().iter_mut().zip(sums[wi].iter()) {
            *c = a * *c + one_minus * (*s * inv);
        }
        codebook.set_word(wi, word);
    }
    Ok(())
}

/// Per-frame cluster labels: frame `t` takes the word of patch `t / P`,
/// truncated to each sequence's original length.
pub fn segmentation_from_assignment(
    assignment: &PatchAssignment,
    patch_len: usize,
    lengths: &[usize],
) -> Result<Vec<Vec<usize>>> {
    if lengths.len() != assignment.n {
        return Err(Error::InvalidArg(format!(
            "{} lengths for a batch of {}",
            lengths.len(),
            assignment.n
        )));
    }
    let mut out = Vec::with_capacity(assignment.n);
    for (ni, &len) in lengths.iter().enumerate() {
        let mut labels = Vec::with_capacity(len);
        for t in 0..len {
            let mi = t / patch_len;
            debug_assert!(mi < assignment.m && assignment.valid[ni * assignment.m + mi]);
            labels.push(assignment.word[ni * assignment.m + mi]);
        }
        out.push(labels);
    }
    Ok(out)
}

/// K-means result over flattened points.
pub struct KmeansFit<F> {
    pub centroids: Vec<Vec<F>>,
    pub assignment: Vec<usize>,
    pub inertia: f64,
}

/// Lloyd's algorithm with k-means++ seeding, an iteration cap, and a few
/// deterministic restarts (best inertia wins). Ties in the assignment step
/// break to the lowest centroid index.
pub fn kmeans<F: Real>(
    points: &[Vec<F>],
    k: usize,
    max_iters: usize,
    restarts: usize,
    seed: u64,
) -> Result<KmeansFit<F>> {
    if k < 1 {
        return Err(Error::InvalidArg("k must be >= 1".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidArg(format!(
            "k-means needs at least k={k} points, got {}",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("k-means points must share one dimension".into()));
    }

    let mut best: Option<KmeansFit<F>> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed.wrapping_add(r as u64));
        let fit = kmeans_single(points, k, max_iters, &mut rng);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.unwrap())
}

fn dist2<F: Real>(a: &[F], b: &[F]) -> f64 {
    let mut d = 0.0f64;
    for (x, y) in a.iter().zip(b.iter()) {
        let diff = (*x - *y).to_f64().unwrap();
        d += diff * diff;
    }
    d
}

fn kmeans_single<F: Real>(
    points: &[Vec<F>],
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha20Rng,
) -> KmeansFit<F> {
    // k-means++ seeding.
    let mut centroids: Vec<Vec<F>> = Vec::with_capacity(k);
    centroids.push(points[rng.gen_range(0..points.len())].clone());
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut idx = 0;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
                idx = i;
            }
            idx
        };
        centroids.push(points[next].clone());
        let c = centroids.last().unwrap();
        for (slot, p) in d2.iter_mut().zip(points.iter()) {
            *slot = slot.min(dist2(p, c));
        }
    }

    let dim = points[0].len();
    let mut assignment = vec![0usize; points.len()];
    for _ in 0..max_iters {
        let new_assignment: Vec<usize> = points
            .par_iter()
            .map(|p| {
                let mut best = (0usize, f64::INFINITY);
                for (ci, c) in centroids.iter().enumerate() {
                    let d = dist2(p, c);
                    if d < best.1 {
                        best = (ci, d);
                    }
                }
                best.0
            })
            .collect();
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&new_assignment) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p.iter()) {
                *s += x.to_f64().unwrap();
            }
        }
        for ci in 0..k {
            if counts[ci] > 0 {
                centroids[ci] = sums[ci]
                    .iter()
                    .map(|&s| real::<F>(s / counts[ci] as f64))
                    .collect();
            }
        }
        let converged = new_assignment == assignment;
        assignment = new_assignment;
        if converged {
            break;
        }
    }
    let inertia: f64 = points
        .iter()
        .zip(&assignment)
        .map(|(p, &a)| dist2(p, &centroids[a]))
        .sum();
    KmeansFit {
        centroids,
        assignment,
        inertia,
    }
}
