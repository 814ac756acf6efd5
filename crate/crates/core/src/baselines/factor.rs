use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ObservationMatrix;
use crate::numcore::Tensor2;

/// `X_ij ≈ global + b_i + c_j + u_i · v_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorModel {
    pub row_factors: Tensor2,
    pub col_factors: Tensor2,
    pub row_bias: Vec<f64>,
    pub col_bias: Vec<f64>,
    pub global_mean: f64,
}

impl FactorModel {
    pub fn rank(&self) -> usize {
        self.row_factors.cols()
    }

    pub fn predict(&self, i: usize, j: usize) -> f64 {
        let dot: f64 = self
            .row_factors
            .row(i)
            .iter()
            .zip(self.col_factors.row(j))
            .map(|(a, b)| a * b)
            .sum();
        self.global_mean + self.row_bias[i] + self.col_bias[j] + dot
    }

    pub fn complete(&self) -> Tensor2 {
        Tensor2::from_fn(self.row_factors.rows(), self.col_factors.rows(), |i, j| {
            self.predict(i, j)
        })
    }

    pub fn is_finite(&self) -> bool {
        self.row_factors.all_finite()
            && self.col_factors.all_finite()
            && self.row_bias.iter().chain(&self.col_bias).all(|v| v.is_finite())
            && self.global_mean.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvdConfig {
    pub k: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for SvdConfig {
    fn default() -> Self {
        SvdConfig {
            k: 20,
            lambda: 0.02,
            learning_rate: 0.005,
            epochs: 100,
            seed: 0,
        }
    }
}

/// Regularized biased factorization trained by per-entry SGD over shuffled Ω.
pub fn fit_svd_mf(obs: &ObservationMatrix, config: &SvdConfig) -> Result<FactorModel> {
    if config.k == 0 {
        return Err(Error::invalid("svd: rank must be at least 1"));
    }
    let (n, t) = (obs.n_locations(), obs.n_slots());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 0.1).expect("valid normal");
    let mut u = Tensor2::from_fn(n, config.k, |_, _| init.sample(&mut rng));
    let mut v = Tensor2::from_fn(t, config.k, |_, _| init.sample(&mut rng));
    let mut bu = vec![0.0; n];
    let mut bv = vec![0.0; t];
    let mu = obs.known_mean();
    let mut entries = obs.known_positions();
    let (lr, lam) = (config.learning_rate, config.lambda);
    for epoch in 0..config.epochs {
        entries.shuffle(&mut rng);
        for &pos in &entries {
            let (i, j) = (pos / t, pos % t);
            let ui = u.row(i).to_vec();
            let vj = v.row(j).to_vec();
            let dot: f64 = ui.iter().zip(&vj).map(|(a, b)| a * b).sum();
            let err = obs.values().data()[pos] - (mu + bu[i] + bv[j] + dot);
            bu[i] += lr * (err - lam * bu[i]);
            bv[j] += lr * (err - lam * bv[j]);
            let k = config.k;
            let (ur, vr) = (&mut u.data_mut()[i * k..(i + 1) * k], &mut vec![0.0; k]);
            for f in 0..k {
                ur[f] += lr * (err * vj[f] - lam * ui[f]);
                vr[f] = vj[f] + lr * (err * ui[f] - lam * vj[f]);
            }
            v.data_mut()[j * k..(j + 1) * k].copy_from_slice(vr);
        }
        if !(u.all_finite() && v.all_finite() && bu.iter().chain(&bv).all(|x| x.is_finite())) {
            return Err(Error::Diverged {
                epoch,
                detail: "svd factors became non-finite".into(),
            });
        }
    }
    Ok(FactorModel {
        row_factors: u,
        col_factors: v,
        row_bias: bu,
        col_bias: bv,
        global_mean: mu,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmfConfig {
    pub k: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for NmfConfig {
    fn default() -> Self {
        NmfConfig {
            k: 15,
            epochs: 200,
            seed: 0,
        }
    }
}

const NMF_FLOOR: f64 = 1e-12;

/// Masked squared error `Σ_Ω (X − W Hᵀ)²`.
pub fn masked_sse(obs: &ObservationMatrix, w: &Tensor2, h: &Tensor2) -> Result<f64> {
    let approx = w.matmul_nt(h)?;
    Ok(obs
        .known_positions()
        .into_iter()
        .map(|k| (obs.values().data()[k] - approx.data()[k]).powi(2))
        .sum())
}

/// One round of masked multiplicative updates, W then H.
fn nmf_step(x: &Tensor2, m: &Tensor2, w: &mut Tensor2, h: &mut Tensor2) -> Result<()> {
    // x is already masked
    let approx = w.matmul_nt(h)?.zip_map(m, |a, b| a * b)?;
    let num = x.matmul(h)?;
    let den = approx.matmul(h)?;
    for ((w, n), d) in w.data_mut().iter_mut().zip(num.data()).zip(den.data()) {
        *w *= n / (d + NMF_FLOOR);
    }
    let approx = w.matmul_nt(h)?.zip_map(m, |a, b| a * b)?;
    let num = x.matmul_tn(w)?;
    let den = approx.matmul_tn(w)?;
    for ((h, n), d) in h.data_mut().iter_mut().zip(num.data()).zip(den.data()) {
        *h *= n / (d + NMF_FLOOR);
    }
    Ok(())
}

/// Nonnegative factorization of the known entries; biases and global mean are zero.
pub fn fit_nmf(obs: &ObservationMatrix, config: &NmfConfig) -> Result<FactorModel> {
    fit_nmf_monitored(obs, config, |_, _| {})
}

/// [`fit_nmf`] with a callback receiving `(epoch, objective)` after every update.
pub fn fit_nmf_monitored(
    obs: &ObservationMatrix,
    config: &NmfConfig,
    mut monitor: impl FnMut(usize, f64),
) -> Result<FactorModel> {
    if config.k == 0 {
        return Err(Error::invalid("nmf: rank must be at least 1"));
    }
    if obs.known_positions().into_iter().any(|k| obs.values().data()[k] < 0.0) {
        return Err(Error::invalid("nmf: known entries must be nonnegative"));
    }
    let (n, t) = (obs.n_locations(), obs.n_slots());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = (obs.known_mean().max(0.0) / config.k as f64).sqrt().max(1e-3);
    let mut w = Tensor2::from_fn(n, config.k, |_, _| scale * rng.random_range(0.1..1.0));
    let mut h = Tensor2::from_fn(t, config.k, |_, _| scale * rng.random_range(0.1..1.0));
    let m = Tensor2::from_fn(n, t, |i, j| if obs.is_known(i, j) { 1.0 } else { 0.0 });
    let x = obs.values().zip_map(&m, |a, b| a * b)?;
    for epoch in 0..config.epochs {
        nmf_step(&x, &m, &mut w, &mut h)?;
        if !(w.all_finite() && h.all_finite()) {
            return Err(Error::Diverged {
                epoch,
                detail: "nmf factors became non-finite".into(),
            });
        }
        monitor(epoch, masked_sse(obs, &w, &h)?);
    }
    Ok(FactorModel {
        row_factors: w,
        col_factors: h,
        row_bias: vec![0.0; n],
        col_bias: vec![0.0; t],
        global_mean: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;

    fn obs(vals: Tensor2, mask: Vec<bool>) -> ObservationMatrix {
        let o = GeoPoint::new(51.0, 4.0).unwrap();
        let locs = (0..vals.rows())
            .map(|i| o.offset(0.0, 150.0 * i as f64).unwrap())
            .collect();
        let times = (0..vals.cols() as i64).collect();
        ObservationMatrix::new(vals, mask, locs, times).unwrap()
    }

    fn rank_one(n: usize, t: usize) -> Tensor2 {
        Tensor2::from_fn(n, t, |i, j| (1.0 + 0.1 * i as f64) * (2.0 + (j as f64 * 0.7).sin()))
    }

    fn rmse(a: &Tensor2, b: &Tensor2) -> f64 {
        (a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
    }

    #[test]
    fn svd_recovers_rank_one() {
        let x = rank_one(12, 10);
        let o = obs(x.clone(), vec![true; 120]);
        let cfg = SvdConfig {
            k: 2,
            lambda: 0.0,
            learning_rate: 0.02,
            epochs: 3000,
            seed: 1,
        };
        let m = fit_svd_mf(&o, &cfg).unwrap();
        let e = rmse(&m.complete(), &x);
        assert!(e < 1e-2, "{e}");
    }

    #[test]
    fn svd_heavy_regularization_collapses_to_biases() {
        let x = rank_one(8, 6);
        let o = obs(x, vec![true; 48]);
        let cfg = SvdConfig {
            lambda: 1e3,
            learning_rate: 1e-4,
            epochs: 200,
            ..SvdConfig::default()
        };
        let m = fit_svd_mf(&o, &cfg).unwrap();
        assert!(m
            .row_factors
            .data()
            .iter()
            .chain(m.col_factors.data())
            .all(|v| v.abs() < 1e-3));
        let center = m.global_mean;
        assert!(m.complete().data().iter().all(|v| (v - center).abs() < 0.1));
    }

    #[test]
    fn svd_is_seeded() {
        let x = rank_one(6, 5);
        let mut mask = vec![true; 30];
        mask[4] = false;
        let o = obs(x, mask);
        let cfg = SvdConfig {
            epochs: 20,
            ..SvdConfig::default()
        };
        assert_eq!(fit_svd_mf(&o, &cfg).unwrap(), fit_svd_mf(&o, &cfg).unwrap());
        let other = SvdConfig { seed: 9, ..cfg };
        assert_ne!(fit_svd_mf(&o, &cfg).unwrap(), fit_svd_mf(&o, &other).unwrap());
    }

    #[test]
    fn svd_divergence_is_reported() {
        let o = obs(rank_one(6, 5), vec![true; 30]);
        let cfg = SvdConfig {
            learning_rate: 1e6,
            ..SvdConfig::default()
        };
        assert!(matches!(fit_svd_mf(&o, &cfg), Err(Error::Diverged { .. })));
    }

    #[test]
    fn nmf_recovers_rank_one_and_descends() {
        let x = rank_one(12, 10);
        let o = obs(x.clone(), vec![true; 120]);
        let cfg = NmfConfig {
            k: 15,
            epochs: 2000,
            seed: 3,
        };
        let mut prev = f64::INFINITY;
        let m = fit_nmf_monitored(&o, &cfg, |epoch, obj| {
            assert!(obj <= prev + 1e-9, "epoch {epoch}: {obj} > {prev}");
            prev = obj;
        })
        .unwrap();
        assert!(m
            .row_factors
            .data()
            .iter()
            .chain(m.col_factors.data())
            .all(|&v| v >= 0.0));
        let e = rmse(&m.complete(), &x);
        assert!(e < 1e-2, "{e}");
    }

    #[test]
    fn nmf_masked_objective_monotone_and_nonnegative() {
        let x = rank_one(10, 8).map(|v| v + 0.3);
        let mask: Vec<bool> = (0..80).map(|k| k % 3 != 0).collect();
        let o = obs(x, mask);
        let mut prev = f64::INFINITY;
        let m = fit_nmf_monitored(&o, &NmfConfig::default(), |_, obj| {
            assert!(obj <= prev + 1e-9);
            prev = obj;
        })
        .unwrap();
        assert!(m.row_factors.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn nmf_rejects_negative_entries() {
        let x = Tensor2::from_rows(&[vec![1.0, -2.0], vec![3.0, 4.0]]).unwrap();
        assert!(fit_nmf(&obs(x.clone(), vec![true; 4]), &NmfConfig::default()).is_err());
        // unknown negatives are irrelevant
        assert!(fit_nmf(&obs(x, vec![true, false, true, true]), &NmfConfig::default()).is_ok());
    }
}
