//! Objectives and their closed-form gradients with respect to embeddings.
//!
//! All distances are plain Euclidean. The gradient of `||a - b||` at `a == b`
//! is taken as zero, and a hinge sitting exactly at zero is inactive.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affinity::SoftLabelRow;
use crate::error::{Error, Result};

/// Lower clamp applied to probabilities inside the logarithm.
pub const LOG_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Gradient with respect to each embedding row of the batch.
    pub grad: Array2<f64>,
    pub active: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mining {
    #[default]
    Hard,
    Random,
}

fn distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let sq: f64 = match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        _ => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    };
    sq.sqrt()
}

/// `(a - b) / ||a - b||`, zero when the points coincide.
fn unit_direction(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let d = distance(a, b);
    if d > 0.0 {
        (&a - &b) / d
    } else {
        Array1::zeros(a.len())
    }
}

fn check_triplet_batch(emb: ArrayView2<f64>, persons: &[usize]) -> Result<()> {
    if emb.nrows() != persons.len() {
        return Err(Error::Contract(format!(
            "{} embeddings but {} person labels",
            emb.nrows(),
            persons.len()
        )));
    }
    let mut distinct: Vec<usize> = persons.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::Contract("triplet batch needs at least 2 persons".into()));
    }
    for p in distinct {
        if persons.iter().filter(|&&q| q == p).count() < 2 {
            return Err(Error::Contract(format!("person {p} has fewer than 2 samples in the batch")));
        }
    }
    Ok(())
}

fn add_hinge_grad(grad: &mut Array2<f64>, emb: ArrayView2<f64>, a: usize, p: usize, n: usize) {
    let gp = unit_direction(emb.row(a), emb.row(p));
    let gn = unit_direction(emb.row(a), emb.row(n));
    {
        let mut ga = grad.row_mut(a);
        ga += &gp;
        ga -= &gn;
    }
    {
        let mut gpos = grad.row_mut(p);
        gpos -= &gp;
    }
    let mut gneg = grad.row_mut(n);
    gneg += &gn;
}

/// Batch-hard triplet loss summed over anchors: for each anchor the farthest
/// same-person sample and the closest other-person sample.
pub fn intra_triplet_loss(emb: ArrayView2<f64>, persons: &[usize], margin: f64) -> Result<LossValue> {
    check_triplet_batch(emb, persons)?;
    let n = emb.nrows();
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = distance(emb.row(i), emb.row(j));
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    let mut grad = Array2::zeros(emb.raw_dim());
    let (mut loss, mut active) = (0.0, 0usize);
    for a in 0..n {
        let mut pos = (a, f64::NEG_INFINITY);
        let mut neg = (a, f64::INFINITY);
        for j in 0..n {
            let d = dist[[a, j]];
            if persons[j] == persons[a] {
                if d > pos.1 {
                    pos = (j, d);
                }
            } else if d < neg.1 {
                neg = (j, d);
            }
        }
        let hinge = margin + pos.1 - neg.1;
        if hinge > 0.0 {
            loss += hinge;
            active += 1;
            add_hinge_grad(&mut grad, emb, a, pos.0, neg.0);
        }
    }
    Ok(LossValue {
        loss,
        grad,
        active,
        skipped: 0,
    })
}

/// Triplet loss with a uniformly random positive (another sample of the
/// anchor's person) and a uniformly random negative per anchor.
pub fn random_triplet_loss(emb: ArrayView2<f64>, persons: &[usize], margin: f64, rng: &mut impl Rng) -> Result<LossValue> {
    check_triplet_batch(emb, persons)?;
    let n = emb.nrows();
    let mut grad = Array2::zeros(emb.raw_dim());
    let (mut loss, mut active) = (0.0, 0usize);
    for a in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != a && persons[j] == persons[a]).collect();
        let negatives: Vec<usize> = (0..n).filter(|&j| persons[j] != persons[a]).collect();
        let p = *positives.choose(rng).expect("checked batch");
        let q = *negatives.choose(rng).expect("checked batch");
        let hinge = margin + distance(emb.row(a), emb.row(p)) - distance(emb.row(a), emb.row(q));
        if hinge > 0.0 {
            loss += hinge;
            active += 1;
            add_hinge_grad(&mut grad, emb, a, p, q);
        }
    }
    Ok(LossValue {
        loss,
        grad,
        active,
        skipped: 0,
    })
}

pub fn mined_triplet_loss(emb: ArrayView2<f64>, persons: &[usize], margin: f64, mining: Mining, rng: &mut impl Rng) -> Result<LossValue> {
    match mining {
        Mining::Hard => intra_triplet_loss(emb, persons, margin),
        Mining::Random => random_triplet_loss(emb, persons, margin, rng),
    }
}

/// Numerically stable softmax.
pub fn softmax_probs(scores: ArrayView1<f64>) -> Array1<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = scores.mapv(|s| (s - max).exp());
    let total = exp.sum();
    exp / total
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossEntropyValue {
    pub loss: f64,
    /// `probs - W_z`.
    pub grad_scores: Array1<f64>,
    /// Number of target classes whose probability hit [`LOG_PROB_FLOOR`].
    pub floored: usize,
}

/// `-sum_c W_z(c) log P(c|x)` for softmax probabilities `probs`.
pub fn weighted_cross_entropy(probs: ArrayView1<f64>, row: &SoftLabelRow) -> Result<CrossEntropyValue> {
    if row.degenerate {
        return Err(Error::DegenerateRow(row.class));
    }
    let mut grad_scores = probs.to_owned();
    let (mut loss, mut floored) = (0.0, 0usize);
    for &(c, w) in &row.weights {
        if c >= probs.len() {
            return Err(Error::Contract(format!("soft label class {c} >= {} scores", probs.len())));
        }
        let p = probs[c];
        if p < LOG_PROB_FLOOR {
            floored += 1;
        }
        loss -= w * p.max(LOG_PROB_FLOOR).ln();
        grad_scores[c] -= w;
    }
    Ok(CrossEntropyValue {
        loss,
        grad_scores,
        floored,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Every positive weighted `1 / N_K`.
    #[default]
    Aw,
    /// Weights proportional to affinity, renormalized over the drawn set.
    W,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositiveSampling {
    /// Uniform draw from the row's nonzero neighbours.
    #[default]
    Random,
    /// The highest-affinity neighbours.
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Positive {
    pub class: usize,
    pub sample: usize,
    pub weight: f64,
}

/// Draws `n_k` positive persons from the anchor's soft-label row and one
/// random sample of each.
///
/// With fewer than `n_k` neighbours the draw is with replacement (random
/// mode) or cycles through the ranked neighbours (nearest mode).
pub fn select_positives(
    row: &SoftLabelRow,
    samples_by_class: &[Vec<usize>],
    n_k: usize,
    weighting: Weighting,
    sampling: PositiveSampling,
    rng: &mut impl Rng,
) -> Result<Vec<Positive>> {
    if row.degenerate || row.weights.is_empty() {
        return Err(Error::DegenerateRow(row.class));
    }
    if n_k == 0 {
        return Err(Error::Contract("n_k must be positive".into()));
    }
    let candidates = &row.weights;
    let drawn: Vec<(usize, f64)> = match sampling {
        PositiveSampling::Random if candidates.len() >= n_k => {
            candidates.choose_multiple(rng, n_k).copied().collect()
        }
        PositiveSampling::Random => (0..n_k).map(|_| *candidates.choose(rng).expect("nonempty")).collect(),
        PositiveSampling::Nearest => {
            let mut ranked = candidates.clone();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            (0..n_k).map(|i| ranked[i % ranked.len()]).collect()
        }
    };
    let total: f64 = drawn.iter().map(|d| d.1).sum();
    drawn
        .into_iter()
        .map(|(class, w)| {
            let pool = samples_by_class
                .get(class)
                .filter(|p| !p.is_empty())
                .ok_or_else(|| Error::Contract(format!("class {class} has no samples")))?;
            let weight = match weighting {
                Weighting::Aw => 1.0 / n_k as f64,
                Weighting::W => w / total,
            };
            Ok(Positive {
                class,
                sample: *pool.choose(rng).expect("nonempty"),
                weight,
            })
        })
        .collect()
}

/// Index of the closest batch sample belonging to a different person.
pub fn select_hardest_negative(anchor: ArrayView1<f64>, batch: ArrayView2<f64>, persons: &[usize], anchor_person: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, row) in batch.rows().into_iter().enumerate() {
        if persons[j] == anchor_person {
            continue;
        }
        let d = distance(anchor, row);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|b| b.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedTripletValue {
    pub loss: f64,
    pub grad_anchor: Array1<f64>,
    pub grad_positives: Vec<Array1<f64>>,
    pub grad_negative: Array1<f64>,
    pub active: bool,
}

/// `[sum_p w_p D(a, p) - D(a, n) + m]_+`.
pub fn weighted_triplet_loss(
    anchor: ArrayView1<f64>,
    positives: &[(ArrayView1<f64>, f64)],
    negative: ArrayView1<f64>,
    margin: f64,
) -> Result<WeightedTripletValue> {
    let wsum: f64 = positives.iter().map(|p| p.1).sum();
    if positives.is_empty() || (wsum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "positive weights must sum to 1, got {wsum} over {} positives",
            positives.len()
        )));
    }
    let d = anchor.len();
    let pos_term: f64 = positives.iter().map(|(p, w)| w * distance(anchor, *p)).sum();
    let hinge = pos_term - distance(anchor, negative) + margin;
    if hinge <= 0.0 {
        return Ok(WeightedTripletValue {
            loss: 0.0,
            grad_anchor: Array1::zeros(d),
            grad_positives: vec![Array1::zeros(d); positives.len()],
            grad_negative: Array1::zeros(d),
            active: false,
        });
    }
    let gn = unit_direction(anchor, negative);
    let mut grad_anchor = -&gn;
    let grad_positives = positives
        .iter()
        .map(|(p, w)| {
            let g = unit_direction(anchor, *p) * *w;
            grad_anchor += &g;
            -g
        })
        .collect();
    Ok(WeightedTripletValue {
        loss: hinge,
        grad_anchor,
        grad_positives,
        grad_negative: gn,
        active: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn four_anchor_example_sums_to_one_point_six() {
        let emb = array![[0.0, 0.0], [1.0, 0.0], [1.5, 0.0], [2.5, 0.0]];
        let v = intra_triplet_loss(emb.view(), &[0, 0, 1, 1], 0.3).unwrap();
        assert!((v.loss - 1.6).abs() < 1e-12);
        assert_eq!(v.active, 2);
    }

    #[test]
    fn separated_clusters_give_zero_loss() {
        let emb = array![[0.0, 0.0], [0.1, 0.0], [5.0, 0.0], [5.1, 0.0]];
        let v = intra_triplet_loss(emb.view(), &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(v.loss, 0.0);
        assert!(v.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn triplet_preconditions() {
        let emb = array![[0.0], [1.0], [2.0]];
        assert!(intra_triplet_loss(emb.view(), &[0, 0, 0], 0.3).is_err());
        assert!(intra_triplet_loss(emb.view(), &[0, 0, 1], 0.3).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_probs(array![2.0, 2.0, 2.0, 2.0].view());
        assert!(p.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let p = softmax_probs(array![1.0, 0.0].view());
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let shifted = softmax_probs(array![1001.0, 1000.0].view());
        assert!((shifted[0] - p[0]).abs() < 1e-15);
        assert!((shifted.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_hot_row_is_plain_cross_entropy() {
        let probs = softmax_probs(array![0.3, -1.0, 2.0].view());
        let v = weighted_cross_entropy(probs.view(), &SoftLabelRow::one_hot(0, 2)).unwrap();
        assert_eq!(v.loss, -probs[2].ln());
        assert_eq!(v.grad_scores[2], probs[2] - 1.0);
    }

    #[test]
    fn uniform_probs_give_log_c() {
        let probs = Array1::from_elem(5, 0.2);
        let row = SoftLabelRow {
            class: 0,
            weights: vec![(1, 0.3), (3, 0.7)],
            degenerate: false,
        };
        let v = weighted_cross_entropy(probs.view(), &row).unwrap();
        assert!((v.loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn chained_soft_label_cross_entropy() {
        let probs = softmax_probs(array![1.0, 0.0].view());
        let a12 = (-1.0f64 / 1.5).exp();
        let a23 = (-2.0f64 / 1.5).exp();
        let row = SoftLabelRow {
            class: 2,
            weights: vec![(0, a12 / (a12 + a23)), (1, a23 / (a12 + a23))],
            degenerate: false,
        };
        let v = weighted_cross_entropy(probs.view(), &row).unwrap();
        let expected = -row.weights[0].1 * probs[0].ln() - row.weights[1].1 * probs[1].ln();
        assert!((v.loss - expected).abs() < 1e-15);
        assert!((v.loss - 0.6526).abs() < 1e-4);
    }

    #[test]
    fn floor_prevents_infinite_loss() {
        let probs = array![1.0, 0.0];
        let v = weighted_cross_entropy(probs.view(), &SoftLabelRow::one_hot(0, 1)).unwrap();
        assert!(v.loss.is_finite());
        assert_eq!(v.floored, 1);
        assert!((v.loss + LOG_PROB_FLOOR.ln()).abs() < 1e-12);
    }

    #[test]
    fn degenerate_row_is_refused() {
        let row = SoftLabelRow {
            class: 4,
            weights: vec![],
            degenerate: true,
        };
        assert!(matches!(
            weighted_cross_entropy(array![1.0].view(), &row),
            Err(Error::DegenerateRow(4))
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(select_positives(&row, &[], 4, Weighting::Aw, PositiveSampling::Random, &mut rng).is_err());
    }

    fn row_of(weights: Vec<(usize, f64)>) -> SoftLabelRow {
        SoftLabelRow {
            class: 0,
            weights,
            degenerate: false,
        }
    }

    #[test]
    fn exactly_n_k_neighbours_are_all_selected() {
        let row = row_of(vec![(1, 0.1), (2, 0.2), (3, 0.3), (4, 0.4)]);
        let pools: Vec<Vec<usize>> = (0..5).map(|c| vec![10 * c, 10 * c + 1]).collect();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sel = select_positives(&row, &pools, 4, Weighting::Aw, PositiveSampling::Random, &mut rng).unwrap();
            let mut classes: Vec<usize> = sel.iter().map(|p| p.class).collect();
            classes.sort_unstable();
            assert_eq!(classes, vec![1, 2, 3, 4]);
            assert!(sel.iter().all(|p| p.weight == 0.25));
            assert!(sel.iter().all(|p| pools[p.class].contains(&p.sample)));
        }
    }

    #[test]
    fn affinity_weighting_renormalizes_the_drawn_set() {
        let a12 = (-1.0f64 / 1.5).exp();
        let a23 = (-2.0f64 / 1.5).exp();
        let row = row_of(vec![(1, a12 / (a12 + a23)), (2, a23 / (a12 + a23))]);
        let pools = vec![vec![], vec![0], vec![1]];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sel = select_positives(&row, &pools, 2, Weighting::W, PositiveSampling::Random, &mut rng).unwrap();
        sel.sort_by_key(|p| p.class);
        assert!((sel[0].weight - 0.6607).abs() < 1e-4);
        assert!((sel[1].weight - 0.3393).abs() < 1e-4);
        assert!((sel[0].weight - a12 / (a12 + a23)).abs() < 1e-15);
    }

    #[test]
    fn nearest_sampling_takes_highest_affinities() {
        let row = row_of(vec![(1, 0.1), (2, 0.5), (3, 0.4)]);
        let pools: Vec<Vec<usize>> = (0..4).map(|c| vec![c]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sel = select_positives(&row, &pools, 2, Weighting::Aw, PositiveSampling::Nearest, &mut rng).unwrap();
        assert_eq!(sel.iter().map(|p| p.class).collect::<Vec<_>>(), vec![2, 3]);
        // fewer neighbours than n_k: cycle through the ranking
        let sel = select_positives(&row, &pools, 5, Weighting::Aw, PositiveSampling::Nearest, &mut rng).unwrap();
        assert_eq!(sel.iter().map(|p| p.class).collect::<Vec<_>>(), vec![2, 3, 1, 2, 3]);
    }

    #[test]
    fn hardest_negative_examples() {
        let batch = array![[0.0, 0.0], [3.0, 0.0], [1.0, 0.0]];
        let persons = [0, 1, 2];
        assert_eq!(select_hardest_negative(batch.row(0), batch.view(), &persons, 0), Some(2));
        let two = array![[0.0, 0.0], [3.0, 0.0]];
        assert_eq!(select_hardest_negative(two.row(0), two.view(), &[0, 1], 0), Some(1));
        assert_eq!(select_hardest_negative(two.row(0), two.view(), &[0, 0], 0), None);
    }

    #[test]
    fn weighted_triplet_hand_value() {
        let a = array![0.0, 0.0];
        let p1 = array![2.0, 0.0];
        let p2 = array![0.0, 3.0];
        let n = array![0.0, -2.0];
        let v = weighted_triplet_loss(a.view(), &[(p1.view(), 0.5), (p2.view(), 0.5)], n.view(), 0.3).unwrap();
        assert!((v.loss - 0.8).abs() < 1e-12);
        assert!(v.active);
    }

    #[test]
    fn ideal_geometry_has_zero_weighted_loss() {
        let a = array![1.0, 1.0];
        let n = array![5.0, 1.0];
        let v = weighted_triplet_loss(a.view(), &[(a.view(), 0.5), (a.view(), 0.5)], n.view(), 0.3).unwrap();
        assert_eq!(v.loss, 0.0);
        assert!(!v.active);
    }

    #[test]
    fn single_positive_reduces_to_plain_triplet() {
        let a = array![0.0, 1.0];
        let p = array![1.0, 1.0];
        let n = array![0.0, 0.5];
        let v = weighted_triplet_loss(a.view(), &[(p.view(), 1.0)], n.view(), 0.3).unwrap();
        assert!((v.loss - (0.3 + 1.0 - 0.5)).abs() < 1e-15);
        let bad = weighted_triplet_loss(a.view(), &[(p.view(), 0.7)], n.view(), 0.3);
        assert!(matches!(bad, Err(Error::Contract(_))));
    }
}
