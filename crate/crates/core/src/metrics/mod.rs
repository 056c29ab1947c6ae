//! Unsupervised evaluation protocol: Hungarian cluster-to-class matching
//! (global or per-sequence), MoF, edit score, segmental F1@tau, and the
//! silhouette statistic for K selection.

mod hungarian;
mod silhouette;

pub use hungarian::{max_value_assignment, min_cost_assignment};
pub use silhouette::silhouette;

use crate::error::{Error, Result};

/// Contiguous run of one label: `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentRun {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

/// Collapse a frame-label array into its maximal runs.
pub fn segments(labels: &[usize]) -> Vec<SegmentRun> {
    let mut runs = Vec::new();
    let mut start = 0usize;
    for t in 1..=labels.len() {
        if t == labels.len() || labels[t] != labels[start] {
            runs.push(SegmentRun {
                label: labels[start],
                start,
                end: t,
            });
            start = t;
        }
    }
    runs
}

/// Injective partial map from predicted cluster ids to ground-truth classes.
/// Clusters matched to zero-padded columns stay unmapped.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ClusterMapping {
    pub map: Vec<Option<usize>>,
}

impl ClusterMapping {
    /// Relabel a frame sequence; unmapped clusters keep distinct identities
    /// above the class range so they never collide with a real class.
    pub fn apply(&self, pred: &[usize], k_gt: usize) -> Vec<usize> {
        pred.iter()
            .map(|&p| match self.map.get(p).copied().flatten() {
                Some(class) => class,
                None => k_gt + p,
            })
            .collect()
    }
}

/// Overlap-maximizing one-to-one matching between predicted clusters and
/// ground-truth classes, computed on the `K_pred x K_gt` frame-overlap
/// matrix zero-padded to square.
pub fn hungarian_match(
    pred: &[Vec<usize>],
    gt: &[Vec<usize>],
    k_pred: usize,
    k_gt: usize,
) -> Result<ClusterMapping> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predicted sequences vs {} ground-truth sequences",
            pred.len(),
            gt.len()
        )));
    }
    let dim = k_pred.max(k_gt);
    if dim == 0 {
        return Err(Error::InvalidArg("need at least one cluster and class".into()));
    }
    let mut overlap = vec![vec![0i64; dim]; dim];
    for (p_seq, g_seq) in pred.iter().zip(gt.iter()) {
        if p_seq.len() != g_seq.len() {
            return Err(Error::Shape(format!(
                "sequence length mismatch: {} vs {}",
                p_seq.len(),
                g_seq.len()
            )));
        }
        for (&p, &g) in p_seq.iter().zip(g_seq.iter()) {
            if p < k_pred && g < k_gt {
                overlap[p][g] += 1;
            }
        }
    }
    let assign = max_value_assignment(&overlap);
    let map = (0..k_pred)
        .map(|p| {
            let col = assign[p];
            if col < k_gt && overlap[p][col] >= 0 {
                Some(col)
            } else {
                None
            }
        })
        .collect();
    Ok(ClusterMapping { map })
}

/// Percentage of frames whose mapped prediction equals the ground truth.
pub fn mof(mapped_pred: &[Vec<usize>], gt: &[Vec<usize>]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (p_seq, g_seq) in mapped_pred.iter().zip(gt.iter()) {
        total += g_seq.len();
        correct += p_seq
            .iter()
            .zip(g_seq.iter())
            .filter(|(p, g)| p == g)
            .count();
    }
    if total == 0 {
        return 0.0;
    }
    100.0 * correct as f64 / total as f64
}

fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Edit score of one sequence: `100 * (1 - Lev(S_pred, S_gt) / max(|S|))`
/// over collapsed segment-label sequences, floored at 0.
pub fn edit_score_single(mapped_pred: &[usize], gt: &[usize]) -> f64 {
    let s_pred: Vec<usize> = segments(mapped_pred).iter().map(|r| r.label).collect();
    let s_gt: Vec<usize> = segments(gt).iter().map(|r| r.label).collect();
    let denom = s_pred.len().max(s_gt.len());
    if denom == 0 {
        return 100.0;
    }
    let lev = levenshtein(&s_pred, &s_gt);
    (1.0 - lev as f64 / denom as f64).max(0.0) * 100.0
}

/// Dataset edit score: mean of per-sequence scores.
pub fn edit_score(mapped_pred: &[Vec<usize>], gt: &[Vec<usize>]) -> f64 {
    if mapped_pred.is_empty() {
        return 0.0;
    }
    let sum: f64 = mapped_pred
        .iter()
        .zip(gt.iter())
        .map(|(p, g)| edit_score_single(p, g))
        .sum();
    sum / mapped_pred.len() as f64
}

/// TP/FP/FN of one sequence at IoU threshold `tau`: each predicted segment
/// (in temporal order) claims its best-IoU unclaimed ground-truth segment of
/// the same class; IoU below `tau` or no segment left means a false
/// positive, and unclaimed ground-truth segments are false negatives.
pub fn f1_counts_single(mapped_pred: &[usize], gt: &[usize], tau: f64) -> (usize, usize, usize) {
    let pred_runs = segments(mapped_pred);
    let gt_runs = segments(gt);
    let mut used = vec![false; gt_runs.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    for pr in &pred_runs {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gr) in gt_runs.iter().enumerate() {
            if gr.label != pr.label || used[gi] {
                continue;
            }
            let inter = pr.end.min(gr.end).saturating_sub(pr.start.max(gr.start));
            let union = pr.end.max(gr.end) - pr.start.min(gr.start);
            let iou = inter as f64 / union as f64;
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, iou)) if iou >= tau => {
                tp += 1;
                used[gi] = true;
            }
            _ => fp += 1,
        }
    }
    let fn_ = used.iter().filter(|&&u| !u).count();
    (tp, fp, fn_)
}

fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        return 100.0;
    }
    100.0 * 2.0 * tp as f64 / denom as f64
}

/// Segmental F1 at threshold `tau` with counts accumulated over the dataset.
pub fn f1_at(mapped_pred: &[Vec<usize>], gt: &[Vec<usize>], tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidArg(format!("tau must be in (0,1], got {tau}")));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (p, g) in mapped_pred.iter().zip(gt.iter()) {
        let (t, f, n) = f1_counts_single(p, g, tau);
        tp += t;
        fp += f;
        fn_ += n;
    }
    Ok(f1_from_counts(tp, fp, fn_))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Global,
    Local,
}

/// Evaluation result with the mapping that produced it.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MetricsReport {
    pub mof: f64,
    pub edit: f64,
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    pub scope: Scope,
    pub mapping: ClusterMapping,
    #[serde(skip)]
    pub per_class_frames: Vec<usize>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Drop frames whose ground-truth label is excluded (e.g. background).
fn filter_excluded(
    pred: &[Vec<usize>],
    gt: &[Vec<usize>],
    exclude: &[usize],
) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    if exclude.is_empty() {
        return (pred.to_vec(), gt.to_vec());
    }
    let mut fp = Vec::with_capacity(pred.len());
    let mut fg = Vec::with_capacity(gt.len());
    for (p_seq, g_seq) in pred.iter().zip(gt.iter()) {
        let mut kp = Vec::new();
        let mut kg = Vec::new();
        for (&p, &g) in p_seq.iter().zip(g_seq.iter()) {
            if !exclude.contains(&g) {
                kp.push(p);
                kg.push(g);
            }
        }
        fp.push(kp);
        fg.push(kg);
    }
    (fp, fg)
}

/// Full evaluation under the chosen matching scope.
pub fn evaluate(
    pred: &[Vec<usize>],
    gt: &[Vec<usize>],
    k_pred: usize,
    k_gt: usize,
    scope: Scope,
    exclude: &[usize],
) -> Result<MetricsReport> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "evaluation needs matched nonempty sequence lists ({} vs {})",
            pred.len(),
            gt.len()
        )));
    }
    let (pred, gt) = filter_excluded(pred, gt, exclude);

    let mut per_class_frames = vec![0usize; k_gt];
    for g_seq in &gt {
        for &g in g_seq {
            if g < k_gt {
                per_class_frames[g] += 1;
            }
        }
    }

    match scope {
        Scope::Global => {
            let mapping = hungarian_match(&pred, &gt, k_pred, k_gt)?;
            let mapped: Vec<Vec<usize>> =
                pred.iter().map(|p| mapping.apply(p, k_gt)).collect();
            Ok(MetricsReport {
                mof: mof(&mapped, &gt),
                edit: edit_score(&mapped, &gt),
                f1_10: f1_at(&mapped, &gt, 0.10)?,
                f1_25: f1_at(&mapped, &gt, 0.25)?,
                f1_50: f1_at(&mapped, &gt, 0.50)?,
                scope,
                mapping,
                per_class_frames,
            })
        }
        Scope::Local => {
            let n = pred.len() as f64;
            let mut sums = [0.0f64; 5];
            for (p_seq, g_seq) in pred.iter().zip(gt.iter()) {
                let p_slice = std::slice::from_ref(p_seq);
                let g_slice = std::slice::from_ref(g_seq);
                let mapping = hungarian_match(p_slice, g_slice, k_pred, k_gt)?;
                let mapped = vec![mapping.apply(p_seq, k_gt)];
                sums[0] += mof(&mapped, g_slice);
                sums[1] += edit_score(&mapped, g_slice);
                sums[2] += f1_at(&mapped, g_slice, 0.10)?;
                sums[3] += f1_at(&mapped, g_slice, 0.25)?;
                sums[4] += f1_at(&mapped, g_slice, 0.50)?;
            }
            Ok(MetricsReport {
                mof: sums[0] / n,
                edit: sums[1] / n,
                f1_10: sums[2] / n,
                f1_25: sums[3] / n,
                f1_50: sums[4] / n,
                scope,
                // No single dataset-level mapping exists under local scope.
                mapping: ClusterMapping { map: Vec::new() },
                per_class_frames,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hungarian_swaps_flipped_labels() {
        let gt = vec![vec![0, 0, 1, 1]];
        let pred = vec![vec![1, 1, 0, 0]];
        let mapping = hungarian_match(&pred, &gt, 2, 2).unwrap();
        assert_eq!(mapping.map, vec![Some(1), Some(0)]);
        let mapped = mapping.apply(&pred[0], 2);
        assert_eq!(mapped, gt[0]);
    }

    #[test]
    fn hungarian_identity_when_pred_equals_gt() {
        let gt = vec![vec![0, 1, 2, 1, 0]];
        let mapping = hungarian_match(&gt, &gt, 3, 3).unwrap();
        assert_eq!(mapping.map, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn hungarian_rejects_length_mismatch() {
        let gt = vec![vec![0, 1]];
        let pred = vec![vec![0, 1, 1]];
        assert!(hungarian_match(&pred, &gt, 2, 2).is_err());
    }

    #[test]
    fn hungarian_matches_factorial_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(31);
        for _ in 0..50 {
            let k = rng.gen_range(2..=6);
            let t = rng.gen_range(10..60);
            let gt = vec![(0..t).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>()];
            let pred = vec![(0..t).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>()];
            let mapping = hungarian_match(&pred, &gt, k, k).unwrap();
            let got: usize = pred[0]
                .iter()
                .zip(&gt[0])
                .filter(|(&p, &g)| mapping.map[p] == Some(g))
                .count();
            let best = brute_force_overlap(&pred[0], &gt[0], k);
            assert_eq!(got, best);
        }
    }

    fn brute_force_overlap(pred: &[usize], gt: &[usize], k: usize) -> usize {
        let mut perm: Vec<usize> = (0..k).collect();
        let mut best = 0usize;
        fn rec(
            perm: &mut Vec<usize>,
            i: usize,
            pred: &[usize],
            gt: &[usize],
            best: &mut usize,
        ) {
            if i == perm.len() {
                let score = pred
                    .iter()
                    .zip(gt.iter())
                    .filter(|(&p, &g)| perm[p] == g)
                    .count();
                *best = (*best).max(score);
                return;
            }
            for j in i..perm.len() {
                perm.swap(i, j);
                rec(perm, i + 1, pred, gt, best);
                perm.swap(i, j);
            }
        }
        rec(&mut perm, 0, pred, gt, &mut best);
        best
    }

    #[test]
    fn mof_examples() {
        assert_eq!(mof(&[vec![0, 1, 2]], &[vec![0, 1, 2]]), 100.0);
        assert_eq!(mof(&[vec![0, 0, 1, 1]], &[vec![0, 1, 1, 1]]), 75.0);
    }

    #[test]
    fn unmatched_clusters_count_as_wrong() {
        // Three predicted clusters, two classes: one cluster goes unmapped
        // and its frames can never be correct.
        let gt = vec![vec![0, 0, 1, 1, 1, 1]];
        let pred = vec![vec![0, 0, 1, 1, 2, 2]];
        let mapping = hungarian_match(&pred, &gt, 3, 2).unwrap();
        let unmapped = mapping.map.iter().filter(|m| m.is_none()).count();
        assert_eq!(unmapped, 1);
        let mapped = mapping.apply(&pred[0], 2);
        assert!(mapped[4] >= 2 && mapped[5] >= 2);
        assert!((mof(&[mapped], &gt) - 100.0 * 4.0 / 6.0).abs() < 1e-9);
    }

    #[test]
    fn edit_score_hand_case() {
        // S_gt = [A,B,A], S_pred = [A,B]: Lev = 1, score = (1 - 1/3)*100.
        let gt = vec![vec![0, 0, 1, 1, 0, 0]];
        let pred = vec![vec![0, 0, 1, 1, 1, 1]];
        let got = edit_score(&pred, &gt);
        assert!((got - 200.0 / 3.0).abs() < 1e-9, "got {got}");
        assert_eq!(edit_score(&gt, &gt), 100.0);
    }

    #[test]
    fn oversegmentation_drives_edit_toward_zero() {
        let gt = vec![vec![0usize; 40]];
        let pred = vec![(0..40).map(|t| t % 2).collect::<Vec<usize>>()];
        assert!(edit_score(&pred, &gt) < 5.0);
    }

    #[test]
    fn f1_hand_cases() {
        // gt: class 0 on [0,10). pred [0,5): IoU 0.5 -> TP at tau=0.5.
        let gt = vec![[vec![0usize; 10], vec![9usize; 10]].concat()];
        let pred_half = vec![[vec![0usize; 5], vec![9usize; 15]].concat()];
        assert_eq!(f1_counts_single(&pred_half[0], &gt[0], 0.5), (2, 0, 0));
        assert_eq!(f1_at(&pred_half, &gt, 0.5).unwrap(), 100.0);

        // pred [0,4): IoU 0.4 -> FP + FN at tau=0.5 for class 0.
        let pred_small = vec![[vec![0usize; 4], vec![9usize; 16]].concat()];
        let (tp, fp, fn_) = f1_counts_single(&pred_small[0], &gt[0], 0.5);
        assert_eq!((tp, fp, fn_), (1, 1, 1));
        let f1 = f1_at(&pred_small, &gt, 0.5).unwrap();
        assert!((f1 - 50.0).abs() < 1e-9);

        // Isolate the class-0 segment only.
        let gt1 = vec![vec![0usize; 10]];
        let pred1 = vec![[vec![0usize; 4], vec![7usize; 6]].concat()];
        assert_eq!(f1_at(&pred1, &gt1, 0.5).unwrap(), 0.0);

        assert_eq!(f1_at(&gt, &gt, 0.25).unwrap(), 100.0);
        assert!(f1_at(&gt, &gt, 0.0).is_err());
        assert!(f1_at(&gt, &gt, 1.5).is_err());
    }

    #[test]
    fn f1_monotone_nonincreasing_in_tau() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(13);
        let gt = vec![(0..60).map(|t| (t / 12) % 3).collect::<Vec<usize>>()];
        let pred = vec![(0..60).map(|_| rng.gen_range(0..3)).collect::<Vec<usize>>()];
        let mut prev = f64::INFINITY;
        for tau in [0.1, 0.25, 0.5, 0.75, 1.0] {
            let f = f1_at(&pred, &gt, tau).unwrap();
            assert!(f <= prev + 1e-12);
            prev = f;
        }
    }

    #[test]
    fn metrics_invariant_under_pred_relabeling() {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(44);
        let k = 4usize;
        let gt: Vec<Vec<usize>> = (0..3)
            .map(|s| (0..80).map(|t| ((t + s * 7) / 10) % k).collect())
            .collect();
        let pred: Vec<Vec<usize>> = gt
            .iter()
            .map(|seq| seq.iter().map(|&g| (g + 1) % k).collect())
            .collect();
        let mut relabel: Vec<usize> = (0..k).collect();
        relabel.shuffle(&mut rng);
        let pred2: Vec<Vec<usize>> = pred
            .iter()
            .map(|seq| seq.iter().map(|&p| relabel[p]).collect())
            .collect();
        let a = evaluate(&pred, &gt, k, k, Scope::Global, &[]).unwrap();
        let b = evaluate(&pred2, &gt, k, k, Scope::Global, &[]).unwrap();
        assert_eq!(a.mof, b.mof);
        assert_eq!(a.edit, b.edit);
        assert_eq!(a.f1_50, b.f1_50);
    }

    #[test]
    fn local_scope_forgives_global_inconsistency() {
        // Sequence 1 uses cluster ids (0,1), sequence 2 swaps them. Locally
        // each is perfect; globally no single mapping fits both.
        let gt = vec![
            [vec![0usize; 10], vec![1usize; 10]].concat(),
            [vec![0usize; 10], vec![1usize; 10]].concat(),
        ];
        let pred = vec![
            [vec![0usize; 10], vec![1usize; 10]].concat(),
            [vec![1usize; 10], vec![0usize; 10]].concat(),
        ];
        let local = evaluate(&pred, &gt, 2, 2, Scope::Local, &[]).unwrap();
        let global = evaluate(&pred, &gt, 2, 2, Scope::Global, &[]).unwrap();
        assert_eq!(local.mof, 100.0);
        assert_eq!(local.edit, 100.0);
        assert_eq!(local.f1_50, 100.0);
        assert!(global.mof < 100.0);
    }

    #[test]
    fn local_equals_global_on_single_sequence() {
        let gt = vec![(0..30).map(|t| (t / 10) % 3).collect::<Vec<usize>>()];
        let pred = vec![(0..30).map(|t| ((t + 3) / 10) % 3).collect::<Vec<usize>>()];
        let local = evaluate(&pred, &gt, 3, 3, Scope::Local, &[]).unwrap();
        let global = evaluate(&pred, &gt, 3, 3, Scope::Global, &[]).unwrap();
        assert_eq!(local.mof, global.mof);
        assert_eq!(local.edit, global.edit);
        assert_eq!(local.f1_25, global.f1_25);
    }

    #[test]
    fn perfect_prediction_scores_100_everywhere() {
        let gt = vec![
            (0..50).map(|t| (t / 10) % 4).collect::<Vec<usize>>(),
            (0..35).map(|t| (t / 7) % 4).collect::<Vec<usize>>(),
        ];
        for scope in [Scope::Global, Scope::Local] {
            let r = evaluate(&gt, &gt, 4, 4, scope, &[]).unwrap();
            assert_eq!(r.mof, 100.0);
            assert_eq!(r.edit, 100.0);
            assert_eq!(r.f1_10, 100.0);
            assert_eq!(r.f1_25, 100.0);
            assert_eq!(r.f1_50, 100.0);
        }
    }

    #[test]
    fn excluded_labels_are_dropped() {
        let gt = vec![[vec![0usize; 10], vec![9usize; 10], vec![1usize; 10]].concat()];
        let pred = vec![[vec![0usize; 10], vec![0usize; 10], vec![1usize; 10]].concat()];
        let with = evaluate(&pred, &gt, 2, 10, Scope::Global, &[]).unwrap();
        let without = evaluate(&pred, &gt, 2, 10, Scope::Global, &[9]).unwrap();
        assert!(without.mof > with.mof);
        assert_eq!(without.mof, 100.0);
    }

    #[test]
    fn report_serializes_fixed_keys() {
        let gt = vec![vec![0, 1]];
        let r = evaluate(&gt, &gt, 2, 2, Scope::Global, &[]).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["mof", "edit", "f1_10", "f1_25", "f1_50", "scope", "mapping"] {
            assert!(json.get(key).is_some(), "missing key {key}");
        }
        assert_eq!(json["scope"], "global");
    }
}
