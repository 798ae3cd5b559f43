//! Evaluation mathematics: VOC2012-style average precision over scored
//! frames, silhouette, pairwise similarity histograms and equal error rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::cosine;

/// One evaluated frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredFrame {
    pub score: f64,
    pub label: bool,
}

/// Ranks frames by descending score; ties keep their original order.
fn ranking(frames: &[ScoredFrame]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..frames.len()).collect();
    idx.sort_by(|&a, &b| frames[b].score.total_cmp(&frames[a].score).then(a.cmp(&b)));
    idx
}

/// All-point interpolated average precision of the single "speaking" class.
///
/// Precision is replaced by its monotone envelope `max_{r' >= r} p(r')` and
/// integrated over the distinct recall steps.
pub fn average_precision(frames: &[ScoredFrame]) -> Result<f64> {
    let positives = frames.iter().filter(|f| f.label).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let order = ranking(frames);
    let mut precision = Vec::with_capacity(frames.len());
    let mut recall = Vec::with_capacity(frames.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if frames[i].label {
            tp += 1;
        }
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Ok(ap)
}

/// Mean of per-group AP over groups that contain a positive frame.
pub fn mean_group_ap(groups: &[Vec<ScoredFrame>]) -> Result<f64> {
    let aps = groups
        .iter()
        .filter(|g| g.iter().any(|f| f.label))
        .map(|g| average_precision(g))
        .collect::<Result<Vec<_>>>()?;
    if aps.is_empty() {
        return Err(Error::NoPositives);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Cosine,
    Euclidean,
}

impl DistanceMetric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Cosine => 1.0 - cosine(a, b),
            DistanceMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        }
    }
}

/// Mean silhouette `(b - a) / max(a, b)`. Points alone in their cluster
/// score 0.
pub fn silhouette(embeddings: &[Vec<f64>], labels: &[usize], metric: DistanceMetric) -> Result<f64> {
    if embeddings.len() != labels.len() {
        return Err(Error::contract(format!(
            "silhouette: {} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    if clusters.len() < 2 {
        return Err(Error::contract("silhouette needs at least two clusters"));
    }
    let n = embeddings.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = metric.distance(&embeddings[i], &embeddings[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; clusters.len()];
        let mut counts = vec![0usize; clusters.len()];
        for j in 0..n {
            if j == i {
                continue;
            }
            let c = clusters.binary_search(&labels[j]).expect("label present");
            sums[c] += dist[i * n + j];
            counts[c] += 1;
        }
        let own = clusters.binary_search(&labels[i]).expect("label present");
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..clusters.len())
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Same- and different-identity cosine similarity counts over `[-1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistogram {
    pub edges: Vec<f64>,
    pub same: Vec<usize>,
    pub different: Vec<usize>,
    pub same_mean: f64,
    pub different_mean: f64,
}

impl SimilarityHistogram {
    pub fn total_pairs(&self) -> usize {
        self.same.iter().sum::<usize>() + self.different.iter().sum::<usize>()
    }
}

pub fn similarity_histogram(embeddings: &[Vec<f64>], labels: &[usize], bins: usize) -> Result<SimilarityHistogram> {
    if embeddings.len() < 2 || embeddings.len() != labels.len() || bins == 0 {
        return Err(Error::contract("similarity_histogram needs ≥ 2 labelled points and ≥ 1 bin"));
    }
    let width = 2.0 / bins as f64;
    let edges = (0..=bins).map(|i| -1.0 + i as f64 * width).collect();
    let mut same = vec![0; bins];
    let mut different = vec![0; bins];
    let (mut same_sum, mut diff_sum) = (0.0, 0.0);
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let s = cosine(&embeddings[i], &embeddings[j]);
            let bin = (((s + 1.0) / width).floor().max(0.0) as usize).min(bins - 1);
            if labels[i] == labels[j] {
                same[bin] += 1;
                same_sum += s;
            } else {
                different[bin] += 1;
                diff_sum += s;
            }
        }
    }
    let mean = |sum: f64, counts: &[usize]| {
        let n: usize = counts.iter().sum();
        if n == 0 {
            f64::NAN
        } else {
            sum / n as f64
        }
    };
    Ok(SimilarityHistogram {
        same_mean: mean(same_sum, &same),
        different_mean: mean(diff_sum, &different),
        edges,
        same,
        different,
    })
}

/// Equal error rate of verification trials `(score, is_target)`.
///
/// Sweeps the acceptance threshold over every distinct score and returns the
/// smallest achievable `max(false accept rate, false reject rate)`.
pub fn equal_error_rate(trials: &[(f64, bool)]) -> Result<f64> {
    let targets = trials.iter().filter(|t| t.1).count();
    let impostors = trials.len() - targets;
    if targets == 0 || impostors == 0 {
        return Err(Error::contract("EER needs both target and impostor trials"));
    }
    let mut sorted = trials.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut best = 1.0_f64;
    let (mut accepted_targets, mut accepted_impostors) = (0usize, 0usize);
    let mut k = 0;
    loop {
        let far = accepted_impostors as f64 / impostors as f64;
        let frr = (targets - accepted_targets) as f64 / targets as f64;
        best = best.min(far.max(frr));
        if k == sorted.len() {
            break;
        }
        let s = sorted[k].0;
        while k < sorted.len() && sorted[k].0 == s {
            if sorted[k].1 {
                accepted_targets += 1;
            } else {
                accepted_impostors += 1;
            }
            k += 1;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn frames(scores: &[f64], labels: &[u8]) -> Vec<ScoredFrame> {
        scores
            .iter()
            .zip(labels)
            .map(|(&score, &l)| ScoredFrame { score, label: l == 1 })
            .collect()
    }

    #[test]
    fn group_ap_skips_groups_without_positives() {
        let a = frames(&[0.9, 0.1], &[1, 0]);
        let b = frames(&[0.9, 0.1], &[0, 1]);
        let c = frames(&[0.3], &[0]);
        let m = mean_group_ap(&[a, b, c.clone()]).unwrap();
        assert!((m - 0.75).abs() < 1e-15);
        assert!(matches!(mean_group_ap(&[c]), Err(Error::NoPositives)));
    }

    /// For each distinct recall level, the best precision reachable at any
    /// cutoff with at least that recall.
    fn naive_ap(frames: &[ScoredFrame]) -> f64 {
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.sort_by(|&a, &b| {
            if frames[a].score != frames[b].score {
                frames[b].score.partial_cmp(&frames[a].score).unwrap()
            } else {
                a.cmp(&b)
            }
        });
        let positives = frames.iter().filter(|f| f.label).count();
        let at_cutoff = |n: usize| {
            let tp = order[..n].iter().filter(|&&i| frames[i].label).count();
            (tp as f64 / n as f64, tp)
        };
        let mut ap = 0.0;
        for k in 1..=positives {
            let best = (1..=frames.len())
                .map(at_cutoff)
                .filter(|&(_, tp)| tp >= k)
                .map(|(p, _)| p)
                .fold(0.0, f64::max);
            ap += best / positives as f64;
        }
        ap
    }

    #[test]
    fn perfect_ranking() {
        let f = frames(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]);
        assert_eq!(average_precision(&f).unwrap(), 1.0);
    }

    #[test]
    fn hand_cases() {
        let ap = average_precision(&frames(&[0.9, 0.8, 0.7], &[1, 0, 1])).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15, "{ap}");
        assert_eq!(average_precision(&frames(&[0.9, 0.8], &[0, 1])).unwrap(), 0.5);
    }

    #[test]
    fn no_positives_is_an_error() {
        assert!(matches!(average_precision(&frames(&[0.3], &[0])), Err(Error::NoPositives)));
    }

    #[test]
    fn ties_break_by_original_index() {
        let ap = average_precision(&frames(&[0.5, 0.5], &[0, 1])).unwrap();
        assert_eq!(ap, 0.5);
        let ap = average_precision(&frames(&[0.5, 0.5], &[1, 0])).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn matches_naive_oracle_on_random_sets() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let n = rng.random_range(1..=12);
            let mut f: Vec<ScoredFrame> = (0..n)
                .map(|_| ScoredFrame {
                    score: (rng.random_range(0..6) as f64) / 5.0,
                    label: rng.random_bool(0.4),
                })
                .collect();
            f[0].label = true;
            let ap = average_precision(&f).unwrap();
            assert!((ap - naive_ap(&f)).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn invariant_under_monotone_transform(
            raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 1..20)
        ) {
            let mut f: Vec<ScoredFrame> = raw.iter().map(|&(score, label)| ScoredFrame { score, label }).collect();
            f[0].label = true;
            let g: Vec<ScoredFrame> = f.iter().map(|x| ScoredFrame { score: (3.0 * x.score).exp() - 7.0, ..*x }).collect();
            prop_assert_eq!(average_precision(&f).unwrap(), average_precision(&g).unwrap());
        }

        #[test]
        fn removing_a_negative_never_hurts(
            raw in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..20)
        ) {
            let mut f: Vec<ScoredFrame> = raw.iter().map(|&(score, label)| ScoredFrame { score, label }).collect();
            f[0].label = true;
            if let Some(pos) = f.iter().position(|x| !x.label) {
                let before = average_precision(&f).unwrap();
                f.remove(pos);
                prop_assert!(average_precision(&f).unwrap() >= before - 1e-15);
            }
        }

        #[test]
        fn all_positive_is_one(scores in prop::collection::vec(-5.0f64..5.0, 1..15)) {
            let f: Vec<ScoredFrame> = scores.iter().map(|&score| ScoredFrame { score, label: true }).collect();
            prop_assert_eq!(average_precision(&f).unwrap(), 1.0);
        }
    }

    #[test]
    fn silhouette_duplicated_points_is_one() {
        let e = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let s = silhouette(&e, &[0, 0, 1, 1], DistanceMetric::Cosine).unwrap();
        assert_eq!(s, 1.0);
    }

    #[test]
    fn silhouette_one_dimensional_hand_case() {
        let e = vec![vec![0.0], vec![1.0], vec![10.0], vec![11.0]];
        let s = silhouette(&e, &[0, 0, 1, 1], DistanceMetric::Euclidean).unwrap();
        let expected = (9.5 / 10.5 + 8.5 / 9.5) / 2.0;
        assert!((s - expected).abs() < 1e-12);
        assert!((s - 0.8997).abs() < 1e-4);
    }

    #[test]
    fn silhouette_singleton_scores_zero_and_single_cluster_errors() {
        let e = vec![vec![0.0], vec![1.0], vec![10.0]];
        let s = silhouette(&e, &[0, 0, 1], DistanceMetric::Euclidean).unwrap();
        assert!((s - (9.0 / 10.0 + 8.0 / 9.0) / 3.0).abs() < 1e-12);
        assert!(silhouette(&e, &[4, 4, 4], DistanceMetric::Euclidean).is_err());
    }

    #[test]
    fn silhouette_shuffled_labels_near_zero_or_negative() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut e = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3 {
            for _ in 0..10 {
                e.push(vec![c as f64 * 10.0 + rng.random::<f64>(), rng.random::<f64>()]);
                labels.push(c);
            }
        }
        assert!(silhouette(&e, &labels, DistanceMetric::Euclidean).unwrap() > 0.8);
        let shuffled: Vec<usize> = (0..30).map(|_| rng.random_range(0..3)).collect();
        assert!(silhouette(&e, &shuffled, DistanceMetric::Euclidean).unwrap() < 0.1);
    }

    proptest! {
        #[test]
        fn silhouette_isometry_and_scale_invariance(
            pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..10),
            shift in prop::collection::vec(-5.0f64..5.0, 3),
            scales in prop::collection::vec(0.1f64..10.0, 10),
        ) {
            let labels: Vec<usize> = (0..pts.len()).map(|i| i % 2).collect();
            let base = silhouette(&pts, &labels, DistanceMetric::Euclidean).unwrap();
            let moved: Vec<Vec<f64>> = pts.iter().map(|p| vec![-(p[1] + shift[1]), p[0] + shift[0], p[2] + shift[2]]).collect();
            prop_assert!((silhouette(&moved, &labels, DistanceMetric::Euclidean).unwrap() - base).abs() < 1e-9);
            let cos = silhouette(&pts, &labels, DistanceMetric::Cosine).unwrap();
            let scaled: Vec<Vec<f64>> = pts.iter().zip(&scales).map(|(p, s)| p.iter().map(|v| v * s).collect()).collect();
            prop_assert!((silhouette(&scaled, &labels, DistanceMetric::Cosine).unwrap() - cos).abs() < 1e-9);
        }
    }

    #[test]
    fn histogram_counts_pairs() {
        let e = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let h = similarity_histogram(&e, &[3, 3], 10).unwrap();
        assert_eq!(h.same[9], 1);
        assert_eq!(h.total_pairs(), 1);
        let e: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, 1.0 - i as f64]).collect();
        let h = similarity_histogram(&e, &[0, 1, 0, 1, 2, 2, 0], 8).unwrap();
        assert_eq!(h.total_pairs(), 7 * 6 / 2);
    }

    #[test]
    fn eer_extremes() {
        let perfect = [(0.9, true), (0.8, true), (0.1, false), (0.2, false)];
        assert_eq!(equal_error_rate(&perfect).unwrap(), 0.0);
        assert!(equal_error_rate(&[(0.3, true)]).is_err());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let shuffled: Vec<(f64, bool)> = (0..4000).map(|_| (rng.random::<f64>(), rng.random_bool(0.5))).collect();
        let eer = equal_error_rate(&shuffled).unwrap();
        assert!((eer - 0.5).abs() < 0.05, "{eer}");
    }
}
