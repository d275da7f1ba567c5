//! Regression and ranking objectives with gradients with respect to the
//! predictions.
//!
//! The ranking term compares every unordered pair `(i, j)`, `i < j`, inside a
//! batch. With `x1 = pred_i`, `x2 = pred_j` and `y = +1` when sample `i`
//! ranks at or above sample `j`, each pair contributes
//! `max(0, −y·(x1 − x2) + m)`; the term is the mean over pairs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cast, Scalar};

pub const DEFAULT_MARGIN: f64 = 0.02;

/// What decides the pair order `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabels {
    /// Order of the ground-truth magnitudes.
    #[default]
    GroundTruth,
    /// Order of the predictions themselves. Debug variant only: with this
    /// choice the hinge reduces to `max(0, m − |x1 − x2|)` and ignores labels.
    Predictions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingOptions {
    pub margin: f64,
    /// Skip pairs with equal labels instead of assigning them `y = +1`.
    pub exclude_ties: bool,
    pub labels: PairLabels,
}

impl Default for RankingOptions {
    fn default() -> Self {
        RankingOptions {
            margin: DEFAULT_MARGIN,
            exclude_ties: false,
            labels: PairLabels::GroundTruth,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingPairBatch<T> {
    pub x1: Vec<T>,
    pub x2: Vec<T>,
    /// Each entry is `+1` or `−1`.
    pub y: Vec<i8>,
    pub margin: T,
    pub pair_index: Vec<(usize, usize)>,
}

impl<T> RankingPairBatch<T> {
    pub fn len(&self) -> usize {
        self.pair_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pair_index.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingGrad<T> {
    pub loss: T,
    pub d_x1: Vec<T>,
    pub d_x2: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput<T> {
    pub total: T,
    pub mse: T,
    pub ranking: T,
    pub grad_wrt_predictions: Vec<T>,
}

fn check_batch<T: Scalar>(pred: &[T], target: &[T]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("batch".into()));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::Domain("loss inputs must be finite".into()));
    }
    Ok(())
}

/// `(1/B)·Σ(pred − target)²` and its gradient `2(pred − target)/B`.
pub fn mse_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    check_batch(pred, target)?;
    let b = cast::<T>(pred.len() as f64);
    let two = cast::<T>(2.0);
    let mut sum = T::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (p, t) in pred.iter().zip(target) {
        let d = *p - *t;
        sum += d * d;
        grad.push(two * d / b);
    }
    Ok((sum / b, grad))
}

/// All `B(B−1)/2` within-batch pairs with the default label source.
pub fn build_pairs<T: Scalar>(
    pred: &[T],
    target: &[T],
    margin: f64,
) -> Result<RankingPairBatch<T>> {
    build_pairs_with(
        pred,
        target,
        &RankingOptions {
            margin,
            ..Default::default()
        },
    )
}

pub fn build_pairs_with<T: Scalar>(
    pred: &[T],
    target: &[T],
    opts: &RankingOptions,
) -> Result<RankingPairBatch<T>> {
    check_batch(pred, target)?;
    if pred.len() < 2 {
        return Err(Error::Config(
            "ranking pairs need a batch of at least 2".into(),
        ));
    }
    if !(opts.margin >= 0.0) || !opts.margin.is_finite() {
        return Err(Error::Config(format!(
            "margin must be >= 0, got {}",
            opts.margin
        )));
    }
    let order = match opts.labels {
        PairLabels::GroundTruth => target,
        PairLabels::Predictions => pred,
    };
    let n = pred.len();
    let cap = n * (n - 1) / 2;
    let mut batch = RankingPairBatch {
        x1: Vec::with_capacity(cap),
        x2: Vec::with_capacity(cap),
        y: Vec::with_capacity(cap),
        margin: cast(opts.margin),
        pair_index: Vec::with_capacity(cap),
    };
    for i in 0..n {
        for j in i + 1..n {
            if opts.exclude_ties && order[i] == order[j] {
                continue;
            }
            batch.x1.push(pred[i]);
            batch.x2.push(pred[j]);
            batch.y.push(if order[i] >= order[j] { 1 } else { -1 });
            batch.pair_index.push((i, j));
        }
    }
    Ok(batch)
}

/// Mean hinge over pairs. Pairs sitting exactly on the hinge (term == 0)
/// take the zero subgradient.
pub fn margin_ranking_loss<T: Scalar>(pairs: &RankingPairBatch<T>) -> Result<RankingGrad<T>> {
    let p = pairs.len();
    if p == 0 {
        return Err(Error::Empty("pair set".into()));
    }
    if pairs.x1.len() != p || pairs.x2.len() != p || pairs.y.len() != p {
        return Err(Error::Shape("pair vectors differ in length".into()));
    }
    if pairs.y.iter().any(|y| *y != 1 && *y != -1) {
        return Err(Error::Domain("pair labels must be +1 or -1".into()));
    }
    if !(pairs.margin >= T::zero()) {
        return Err(Error::Config("margin must be non-negative".into()));
    }
    let pf = cast::<T>(p as f64);
    let mut sum = T::zero();
    let mut d_x1 = vec![T::zero(); p];
    let mut d_x2 = vec![T::zero(); p];
    for k in 0..p {
        let y = cast::<T>(pairs.y[k] as f64);
        let term = -y * (pairs.x1[k] - pairs.x2[k]) + pairs.margin;
        if term > T::zero() {
            sum += term;
            d_x1[k] = -y / pf;
            d_x2[k] = y / pf;
        }
    }
    Ok(RankingGrad {
        loss: sum / pf,
        d_x1,
        d_x2,
    })
}

/// `L = L_MSE + L_MR` with the paper-default pairing.
pub fn composite_loss<T: Scalar>(
    pred: &[T],
    target: &[T],
    margin: f64,
    ranking_enabled: bool,
) -> Result<LossOutput<T>> {
    let opts = RankingOptions {
        margin,
        ..Default::default()
    };
    composite_loss_with(pred, target, ranking_enabled.then_some(&opts))
}

/// Composite objective; `ranking = None` is the MSE-only arm. If tie
/// exclusion leaves no pairs the ranking term is zero.
pub fn composite_loss_with<T: Scalar>(
    pred: &[T],
    target: &[T],
    ranking: Option<&RankingOptions>,
) -> Result<LossOutput<T>> {
    let (mse, mut grad) = mse_loss(pred, target)?;
    let mut rank = T::zero();
    if let Some(opts) = ranking {
        let pairs = build_pairs_with(pred, target, opts)?;
        if !pairs.is_empty() {
            let r = margin_ranking_loss(&pairs)?;
            rank = r.loss;
            for (k, &(i, j)) in pairs.pair_index.iter().enumerate() {
                grad[i] += r.d_x1[k];
                grad[j] += r.d_x2[k];
            }
        }
    }
    Ok(LossOutput {
        total: mse + rank,
        mse,
        ranking: rank,
        grad_wrt_predictions: grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn single(x1: f64, x2: f64, y: i8, m: f64) -> RankingPairBatch<f64> {
        RankingPairBatch {
            x1: vec![x1],
            x2: vec![x2],
            y: vec![y],
            margin: m,
            pair_index: vec![(0, 1)],
        }
    }

    #[test]
    fn mse_closed_forms() {
        let (l, g) = mse_loss(&[1.0, 3.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 5.0);
        assert_eq!(g, vec![1.0, 3.0]);
        let (l, g) = mse_loss(&[2.5f64, -1.0], &[2.5, -1.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(matches!(
            mse_loss::<f64>(&[], &[]).unwrap_err(),
            Error::Empty(_)
        ));
    }

    #[test]
    fn mse_matches_finite_differences() {
        let mut rng = crate::rng::stream(1, "test/mse");
        let pred: Vec<f64> = (0..8).map(|_| rng.gen_range(3.0..8.0)).collect();
        let target: Vec<f64> = (0..8).map(|_| rng.gen_range(4.0..7.0)).collect();
        let (_, grad) = mse_loss(&pred, &target).unwrap();
        let h = 1e-5;
        for i in 0..8 {
            let mut up = pred.clone();
            up[i] += h;
            let mut dn = pred.clone();
            dn[i] -= h;
            let fd =
                (mse_loss(&up, &target).unwrap().0 - mse_loss(&dn, &target).unwrap().0) / (2.0 * h);
            assert!((fd - grad[i]).abs() < 1e-8, "{i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn pair_construction() {
        let p = build_pairs(&[0.0f64, 1.0, 2.0], &[5.0, 4.0, 6.0], 0.02).unwrap();
        assert_eq!(p.pair_index, vec![(0, 1), (0, 2), (1, 2)]);
        assert_eq!(p.y, vec![1, -1, -1]);
        assert_eq!(p.x1, vec![0.0, 0.0, 1.0]);
        assert_eq!(p.x2, vec![1.0, 2.0, 2.0]);
        assert_eq!(
            build_pairs(&[1.0f64, 2.0], &[5.0, 5.0], 0.02).unwrap().y,
            vec![1]
        );
        assert_eq!(
            build_pairs(&[1.0f64, 2.0], &[4.0, 6.0], 0.02).unwrap().y,
            vec![-1]
        );
        assert!(build_pairs(&[1.0f64], &[4.0], 0.02).is_err());
    }

    #[test]
    fn tie_exclusion_and_prediction_labels() {
        let opts = RankingOptions {
            exclude_ties: true,
            ..Default::default()
        };
        let p = build_pairs_with(&[1.0f64, 2.0, 3.0], &[5.0, 5.0, 6.0], &opts).unwrap();
        assert_eq!(p.pair_index, vec![(0, 2), (1, 2)]);

        let opts = RankingOptions {
            labels: PairLabels::Predictions,
            ..Default::default()
        };
        let p = build_pairs_with(&[3.0f64, 2.0], &[4.0, 6.0], &opts).unwrap();
        assert_eq!(p.y, vec![1]);

        let all_tied = RankingOptions {
            exclude_ties: true,
            ..Default::default()
        };
        let out = composite_loss_with(&[1.0f64, 2.0], &[5.0, 5.0], Some(&all_tied)).unwrap();
        assert_eq!(out.ranking, 0.0);
    }

    #[test]
    fn hinge_hand_cases() {
        assert_eq!(
            margin_ranking_loss(&single(0.5, 0.3, 1, 0.02))
                .unwrap()
                .loss,
            0.0
        );
        let r = margin_ranking_loss(&single(0.3, 0.5, 1, 0.02)).unwrap();
        assert_eq!(r.loss, -(0.3f64 - 0.5) + 0.02);
        assert!((r.loss - 0.22).abs() < 1e-15);
        assert_eq!((r.d_x1[0], r.d_x2[0]), (-1.0, 1.0));
        assert_eq!(
            margin_ranking_loss(&single(0.4, 0.4, 1, 0.02))
                .unwrap()
                .loss,
            0.02
        );
        // Exactly on the hinge: zero branch.
        let r = margin_ranking_loss(&single(0.5, 0.0, 1, 0.5)).unwrap();
        assert_eq!((r.loss, r.d_x1[0]), (0.0, 0.0));
        assert!(margin_ranking_loss(&RankingPairBatch::<f64> {
            x1: vec![],
            x2: vec![],
            y: vec![],
            margin: 0.02,
            pair_index: vec![],
        })
        .is_err());
    }

    #[test]
    fn hinge_gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream(2, "test/hinge");
        let n = 12;
        let x1: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let x2: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect();
        let y: Vec<i8> = (0..n)
            .map(|_| if rng.gen_bool(0.5) { 1 } else { -1 })
            .collect();
        let mk = |x1: Vec<f64>, x2: Vec<f64>| RankingPairBatch {
            x1,
            x2,
            y: y.clone(),
            margin: 0.02,
            pair_index: (0..n).map(|k| (k, k)).collect(),
        };
        let base = mk(x1.clone(), x2.clone());
        let g = margin_ranking_loss(&base).unwrap();
        let h = 1e-7;
        for k in 0..n {
            let term = -(y[k] as f64) * (x1[k] - x2[k]) + 0.02;
            if term.abs() <= 1e-6 {
                continue;
            }
            let f = |dx1: f64, dx2: f64| {
                let mut a = x1.clone();
                let mut b = x2.clone();
                a[k] += dx1;
                b[k] += dx2;
                margin_ranking_loss(&mk(a, b)).unwrap().loss
            };
            let fd1 = (f(h, 0.0) - f(-h, 0.0)) / (2.0 * h);
            let fd2 = (f(0.0, h) - f(0.0, -h)) / (2.0 * h);
            assert!((fd1 - g.d_x1[k]).abs() < 1e-8, "x1[{k}]");
            assert!((fd2 - g.d_x2[k]).abs() < 1e-8, "x2[{k}]");
        }
    }

    #[test]
    fn composite_ablation_arm() {
        let out = composite_loss(&[4.0f64, 6.5, 5.0], &[5.0, 6.0, 5.5], 0.02, false).unwrap();
        assert_eq!(out.ranking, 0.0);
        assert_eq!(out.total, out.mse);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let t = [4.0f64, 4.5, 5.7, 6.9];
        let out = composite_loss(&t, &t, 0.02, true).unwrap();
        assert_eq!((out.total, out.mse, out.ranking), (0.0, 0.0, 0.0));
        // Labels closer than the margin leave a residual ranking cost.
        let t = [4.0f64, 4.01];
        assert!(composite_loss(&t, &t, 0.02, true).unwrap().ranking > 0.0);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = crate::rng::stream(3, "test/composite");
        let target: Vec<f64> = (0..6).map(|_| rng.gen_range(4.0..7.0)).collect();
        let pred: Vec<f64> = (0..6).map(|_| rng.gen_range(4.0..7.0)).collect();
        let pairs = build_pairs(&pred, &target, 0.02).unwrap();
        for k in 0..pairs.len() {
            let term = -(pairs.y[k] as f64) * (pairs.x1[k] - pairs.x2[k]) + 0.02;
            assert!(term.abs() > 1e-6, "draw hit a hinge kink");
        }
        let out = composite_loss(&pred, &target, 0.02, true).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut up = pred.clone();
            up[i] += h;
            let mut dn = pred.clone();
            dn[i] -= h;
            let fd = (composite_loss(&up, &target, 0.02, true).unwrap().total
                - composite_loss(&dn, &target, 0.02, true).unwrap().total)
                / (2.0 * h);
            assert!((fd - out.grad_wrt_predictions[i]).abs() < 1e-7, "{i}");
        }
    }

    fn batch() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..12).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(0.0f64..10.0, n),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn components_nonnegative_and_additive((pred, target) in batch()) {
            let out = composite_loss(&pred, &target, 0.02, true).unwrap();
            prop_assert!(out.mse >= 0.0 && out.ranking >= 0.0 && out.total >= 0.0);
            prop_assert_eq!(out.total.to_bits(), (out.mse + out.ranking).to_bits());
        }

        #[test]
        fn ranking_zero_iff_all_pairs_separated((pred, target) in batch()) {
            let pairs = build_pairs(&pred, &target, 0.02).unwrap();
            let separated = (0..pairs.len())
                .all(|k| pairs.y[k] as f64 * (pairs.x1[k] - pairs.x2[k]) >= 0.02);
            let r = margin_ranking_loss(&pairs).unwrap().loss;
            prop_assert_eq!(r == 0.0, separated);
        }

        #[test]
        fn ranking_shift_invariant((pred, target) in batch(), c in -3.0f64..3.0) {
            // Dyadic shift keeps the differences exact in floating point.
            let c = (c * 64.0).round() / 64.0;
            let shifted: Vec<f64> = pred.iter().map(|p| p + c).collect();
            let a = composite_loss(&pred, &target, 0.02, true).unwrap();
            let b = composite_loss(&shifted, &target, 0.02, true).unwrap();
            prop_assert!((a.ranking - b.ranking).abs() < 1e-12);
            if c != 0.0 {
                prop_assert!(a.mse != b.mse);
            }
        }

        #[test]
        fn composite_permutation_invariant((pred, target) in batch(), seed: u64) {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..pred.len()).collect();
            idx.shuffle(&mut crate::rng::stream(seed, "perm"));
            let p2: Vec<f64> = idx.iter().map(|&i| pred[i]).collect();
            let t2: Vec<f64> = idx.iter().map(|&i| target[i]).collect();
            let a = composite_loss(&pred, &target, 0.02, true).unwrap();
            let b = composite_loss(&p2, &t2, 0.02, true).unwrap();
            prop_assert!((a.mse - b.mse).abs() < 1e-12);
            prop_assert!((a.ranking - b.ranking).abs() < 1e-12);
            prop_assert!((a.total - b.total).abs() < 1e-12);
            for (k, &i) in idx.iter().enumerate() {
                prop_assert!((a.grad_wrt_predictions[i] - b.grad_wrt_predictions[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn composite_gradient_is_sum_of_parts((pred, target) in batch()) {
            let out = composite_loss(&pred, &target, 0.02, true).unwrap();
            let (_, mut g) = mse_loss(&pred, &target).unwrap();
            let pairs = build_pairs(&pred, &target, 0.02).unwrap();
            let r = margin_ranking_loss(&pairs).unwrap();
            for (k, &(i, j)) in pairs.pair_index.iter().enumerate() {
                g[i] += r.d_x1[k];
                g[j] += r.d_x2[k];
            }
            prop_assert_eq!(out.grad_wrt_predictions, g);
        }
    }
}
