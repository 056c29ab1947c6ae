//! Zero-padded batching with frame validity masks.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::SkeletonSequence;
use crate::error::{Error, Result};

/// Sequences stacked to `N x C x T_max x V` with zero padding. `mask[n][t]`
/// is 1 exactly on frames `t < lengths[n]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub n: usize,
    pub channels: usize,
    pub t_max: usize,
    pub joints: usize,
    /// Row-major `[n][c][t][v]`.
    pub data: Vec<f32>,
    pub lengths: Vec<usize>,
    /// Row-major `[n][t]`, 1.0 on valid frames and 0.0 on padding.
    pub mask: Vec<f32>,
    /// Positions of the batched sequences in the source dataset.
    pub indices: Vec<usize>,
}

impl Batch {
    fn stack(seqs: &[&SkeletonSequence], indices: Vec<usize>) -> Result<Self> {
        let first = seqs[0];
        let (c, v) = (first.channels, first.joints);
        for s in seqs {
            if s.channels != c || s.joints != v {
                return Err(Error::Shape(
                    "all sequences in a batch must share C and V".into(),
                ));
            }
        }
        let n = seqs.len();
        let t_max = seqs.iter().map(|s| s.frames).max().unwrap();
        let mut data = vec![0.0f32; n * c * t_max * v];
        let mut mask = vec![0.0f32; n * t_max];
        let mut lengths = Vec::with_capacity(n);
        for (i, s) in seqs.iter().enumerate() {
            lengths.push(s.frames);
            for ch in 0..c {
                for t in 0..s.frames {
                    for j in 0..v {
                        data[((i * c + ch) * t_max + t) * v + j] = s.get(ch, t, j);
                    }
                }
            }
            for t in 0..s.frames {
                mask[i * t_max + t] = 1.0;
            }
        }
        Ok(Batch {
            n,
            channels: c,
            t_max,
            joints: v,
            data,
            lengths,
            mask,
            indices,
        })
    }
}

/// Chunk a dataset into padded batches. When `shuffle_seed` is set, the
/// sequence order is a seeded permutation (reproducible across runs);
/// otherwise source order is kept.
pub fn make_batches(
    seqs: &[SkeletonSequence],
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Vec<Batch>> {
    if seqs.is_empty() {
        return Err(Error::InvalidArg("cannot batch an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArg("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    if let Some(seed) = shuffle_seed {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let refs: Vec<&SkeletonSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
            Batch::stack(&refs, chunk.to_vec())
        })
        .collect()
}
