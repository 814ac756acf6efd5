use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::config::{AvgaeConfig, Reduction};
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, Tensor2};

/// Weights and shape of the regularizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub kl_weight: f64,
    pub smooth_weight: f64,
    pub smooth_window: usize,
    pub reduction: Reduction,
}

impl From<&AvgaeConfig> for LossWeights {
    fn from(c: &AvgaeConfig) -> Self {
        LossWeights {
            kl_weight: c.kl_weight,
            smooth_weight: c.smooth_weight,
            smooth_window: c.smooth_window,
            reduction: c.smoothness_reduction,
        }
    }
}

/// Unweighted components plus the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub smoothness: f64,
}

pub(crate) struct LossNodes {
    pub total: NodeId,
    pub reconstruction: NodeId,
    pub kl: NodeId,
    pub smoothness: NodeId,
}

impl LossNodes {
    pub(crate) fn breakdown(&self, g: &Graph) -> LossBreakdown {
        let v = |id| g.value(id).data()[0];
        LossBreakdown {
            total: v(self.total),
            reconstruction: v(self.reconstruction),
            kl: v(self.kl),
            smoothness: v(self.smoothness),
        }
    }
}

/// Mean over nodes of `0.5 Σ_d (μ² + σ² − 1 − 2 ln σ)`.
pub(crate) fn kl_node(g: &mut Graph, mu: NodeId, sigma: NodeId) -> Result<NodeId> {
    let n = g.value(mu).rows() as f64;
    let mu2 = g.square(mu);
    let s2 = g.square(sigma);
    let ls = g.log(sigma);
    let ls = g.scale(ls, 2.0);
    let a = g.add(mu2, s2)?;
    let a = g.sub(a, ls)?;
    let a = g.add_scalar(a, -1.0);
    let total = g.sum(a);
    Ok(g.scale(total, 0.5 / n))
}

/// Number of ordered (i, j, k) triples with `0 < |j − k| ≤ w`.
pub fn smoothness_triples(n: usize, t: usize, window: usize) -> usize {
    (1..=window.min(t.saturating_sub(1))).map(|d| 2 * n * (t - d)).sum()
}

pub(crate) fn smoothness_node(g: &mut Graph, x: NodeId, window: usize, reduction: Reduction) -> Result<NodeId> {
    let (n, t) = g.value(x).shape();
    let mut acc: Option<NodeId> = None;
    for d in 1..=window.min(t.saturating_sub(1)) {
        let late = g.slice_cols(x, d, t - d)?;
        let early = g.slice_cols(x, 0, t - d)?;
        let diff = g.sub(late, early)?;
        let sq = g.square(diff);
        let s = g.sum(sq);
        // each unordered pair appears twice among ordered pairs
        let s = g.scale(s, 2.0 * (-(d as f64)).exp());
        acc = Some(match acc {
            Some(a) => g.add(a, s)?,
            None => s,
        });
    }
    let Some(total) = acc else {
        return Ok(g.constant(Tensor2::scalar(0.0)));
    };
    Ok(match reduction {
        Reduction::Sum => total,
        Reduction::Mean => g.scale(total, 1.0 / smoothness_triples(n, t, window) as f64),
    })
}

/// Masked mean absolute error over `positions` (flat row-major indices).
pub(crate) fn mae_node(g: &mut Graph, x_tilde: NodeId, target: NodeId, positions: Arc<Vec<usize>>) -> Result<NodeId> {
    if positions.is_empty() {
        return Err(Error::invalid("training mask is empty"));
    }
    let diff = g.sub(x_tilde, target)?;
    let picked = g.select(diff, positions)?;
    let a = g.abs(picked);
    Ok(g.mean(a))
}

pub(crate) fn loss_nodes(
    g: &mut Graph,
    target: NodeId,
    positions: Arc<Vec<usize>>,
    x_tilde: NodeId,
    mu: NodeId,
    sigma: NodeId,
    w: &LossWeights,
) -> Result<LossNodes> {
    let reconstruction = mae_node(g, x_tilde, target, positions)?;
    let kl = kl_node(g, mu, sigma)?;
    let smoothness = smoothness_node(g, x_tilde, w.smooth_window, w.reduction)?;
    let a = g.scale(kl, w.kl_weight);
    let b = g.scale(smoothness, w.smooth_weight);
    let total = g.add(reconstruction, a)?;
    let total = g.add(total, b)?;
    Ok(LossNodes {
        total,
        reconstruction,
        kl,
        smoothness,
    })
}

fn check_sigma(sigma: &Tensor2) -> Result<()> {
    if sigma.data().iter().any(|&s| s <= 0.0 || s.is_nan()) {
        return Err(Error::invalid("σ must be strictly positive"));
    }
    Ok(())
}

/// KL divergence of `N(μ, σ²)` from the unit Gaussian, averaged over nodes.
pub fn kl_divergence(mu: &Tensor2, sigma: &Tensor2) -> Result<f64> {
    mu.check_same_shape(sigma, "kl_divergence")?;
    check_sigma(sigma)?;
    let mut g = Graph::new();
    let (m, s) = (g.constant(mu.clone()), g.constant(sigma.clone()));
    let kl = kl_node(&mut g, m, s)?;
    Ok(g.value(kl).data()[0])
}

/// Exponentially weighted squared differences between nearby time slots of each row.
pub fn smoothness_penalty(x_tilde: &Tensor2, window: usize, reduction: Reduction) -> Result<f64> {
    if window == 0 || window >= x_tilde.cols() {
        return Err(Error::invalid(format!(
            "smoothing window {window} must lie in [1, {})",
            x_tilde.cols()
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(x_tilde.clone());
    let s = smoothness_node(&mut g, x, window, reduction)?;
    Ok(g.value(s).data()[0])
}

/// Full objective: masked MAE in raw units plus weighted KL and smoothness.
pub fn loss(
    x: &Tensor2,
    train_mask: &[bool],
    x_tilde: &Tensor2,
    mu: &Tensor2,
    sigma: &Tensor2,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    x.check_same_shape(x_tilde, "loss")?;
    mu.check_same_shape(sigma, "loss")?;
    if train_mask.len() != x.len() {
        return Err(Error::invalid("training mask does not match the matrix"));
    }
    check_sigma(sigma)?;
    if weights.smooth_window == 0 || weights.smooth_window >= x.cols() {
        return Err(Error::invalid("smoothing window out of range"));
    }
    let mut g = Graph::new();
    let target = g.constant(x.clone());
    let xt = g.constant(x_tilde.clone());
    let m = g.constant(mu.clone());
    let s = g.constant(sigma.clone());
    let nodes = loss_nodes(&mut g, target, Graph::mask_positions(train_mask), xt, m, s, weights)?;
    Ok(nodes.breakdown(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn t(rows: &[Vec<f64>]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    const E1: f64 = 0.36787944117144233;

    #[test]
    fn kl_closed_form_examples() {
        assert_eq!(
            kl_divergence(&Tensor2::zeros(3, 4), &Tensor2::filled(3, 4, 1.0)).unwrap(),
            0.0
        );
        let kl = kl_divergence(&t(&[vec![1.0]]), &t(&[vec![1.0]])).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
        assert!(kl_divergence(&t(&[vec![1.0]]), &t(&[vec![0.0]])).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // E_q[log q(z) − log p(z)] estimated by sampling z ~ q
        let mu = t(&[vec![0.8, -0.3], vec![0.1, 1.2]]);
        let sigma = t(&[vec![0.6, 0.9], vec![0.4, 0.7]]);
        let closed = kl_divergence(&mu, &sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            for (&m, &s) in mu.data().iter().zip(sigma.data()) {
                let e: f64 = StandardNormal.sample(&mut rng);
                let z = m + s * e;
                let log_q = -0.5 * e * e - s.ln();
                let log_p = -0.5 * z * z;
                acc += log_q - log_p;
            }
        }
        let mc = acc / draws as f64 / mu.rows() as f64;
        assert!((mc - closed).abs() / closed < 0.01, "mc {mc} closed {closed}");
    }

    #[test]
    fn smoothness_examples() {
        let row = t(&[vec![1.0, 2.0, 3.0]]);
        let s = smoothness_penalty(&row, 1, Reduction::Sum).unwrap();
        assert!((s - 4.0 * E1).abs() < 1e-12, "{s}");
        let m = smoothness_penalty(&row, 1, Reduction::Mean).unwrap();
        assert!((m - E1).abs() < 1e-12, "{m}");
        assert_eq!(
            smoothness_penalty(&Tensor2::filled(2, 5, 3.3), 3, Reduction::Sum).unwrap(),
            0.0
        );
        assert!(smoothness_penalty(&row, 3, Reduction::Sum).is_err());
        assert!(smoothness_penalty(&row, 0, Reduction::Sum).is_err());
    }

    /// Literal enumeration of (i, j, k) triples.
    fn smoothness_oracle(x: &Tensor2, w: usize, reduction: Reduction) -> f64 {
        let (mut total, mut count) = (0.0, 0usize);
        for i in 0..x.rows() {
            for j in 0..x.cols() {
                for k in 0..x.cols() {
                    let d = j.abs_diff(k);
                    if d > 0 && d <= w {
                        total += (-(d as f64)).exp() * (x.get(i, j) - x.get(i, k)).powi(2);
                        count += 1;
                    }
                }
            }
        }
        match reduction {
            Reduction::Sum => total,
            Reduction::Mean => total / count as f64,
        }
    }

    #[test]
    fn triple_count_matches_enumeration() {
        for (n, tt, w) in [(1usize, 3usize, 1usize), (4, 8, 3), (2, 5, 4), (3, 10, 2)] {
            let mut count = 0;
            for _ in 0..n {
                for j in 0..tt {
                    for k in 0..tt {
                        let d = j.abs_diff(k);
                        count += usize::from(d > 0 && d <= w);
                    }
                }
            }
            assert_eq!(smoothness_triples(n, tt, w), count);
        }
    }

    #[test]
    fn loss_degenerate_cases() {
        let x = t(&[vec![1.0, 1.0, 1.0], vec![5.0, 5.0, 5.0]]);
        let mask = vec![true, false, true, true, true, false];
        let w = LossWeights {
            kl_weight: 0.1,
            smooth_weight: 0.8,
            smooth_window: 2,
            reduction: Reduction::Mean,
        };
        let zero = loss(&x, &mask, &x, &Tensor2::zeros(2, 3), &Tensor2::filled(2, 3, 1.0), &w).unwrap();
        assert_eq!(zero.total, 0.0);

        let xt = t(&[vec![2.0, 0.0, 4.0], vec![5.0, 1.0, 0.0]]);
        let plain = LossWeights {
            kl_weight: 0.0,
            smooth_weight: 0.0,
            ..w
        };
        let mu = t(&[vec![0.3, 0.1, -1.0], vec![0.0, 0.2, 0.4]]);
        let sigma = Tensor2::filled(2, 3, 0.5);
        let l = loss(&x, &mask, &xt, &mu, &sigma, &plain).unwrap();
        // |2−1| + |4−1| + |5−5| + |1−5| over 4 entries; unmasked entries ignored
        assert!((l.total - 8.0 / 4.0).abs() < 1e-12);
        assert_eq!(l.total, l.reconstruction);

        let full = loss(&x, &mask, &xt, &mu, &sigma, &w).unwrap();
        let want = l.reconstruction
            + 0.1 * kl_divergence(&mu, &sigma).unwrap()
            + 0.8 * smoothness_oracle(&xt, 2, Reduction::Mean);
        assert!((full.total - want).abs() < 1e-12);

        assert!(loss(&x, &[false; 6], &xt, &mu, &sigma, &w).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn smoothness_agrees_with_enumeration(
            vals in prop::collection::vec(-50.0f64..50.0, 12),
            w in 1usize..6,
            shift in -100.0f64..100.0,
            sum_mode in any::<bool>(),
        ) {
            let x = Tensor2::new(2, 6, vals).unwrap();
            let w = w.min(5);
            let red = if sum_mode { Reduction::Sum } else { Reduction::Mean };
            let got = smoothness_penalty(&x, w, red).unwrap();
            let want = smoothness_oracle(&x, w, red);
            prop_assert!(got >= 0.0);
            prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0));
            let shifted = smoothness_penalty(&x.map(|v| v + shift), w, red).unwrap();
            prop_assert!((shifted - got).abs() <= 1e-7 * got.max(1.0));
        }

        #[test]
        fn kl_nonnegative(
            mu in prop::collection::vec(-3.0f64..3.0, 6),
            sigma in prop::collection::vec(0.01f64..0.999, 6),
        ) {
            let kl = kl_divergence(&Tensor2::new(2, 3, mu).unwrap(), &Tensor2::new(2, 3, sigma).unwrap()).unwrap();
            prop_assert!(kl > 0.0);
        }
    }
}
