use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{haversine_distance, GeoPoint};
use crate::ingest::ObservationMatrix;
use crate::numcore::Tensor2;

pub const VARIOGRAM_BINS: usize = 15;
/// Fewest points a variogram is fitted to; sparser columns use their mean.
pub const MIN_VARIOGRAM_POINTS: usize = 5;
const RIDGE_JITTER: f64 = 1e-10;
const RANGE_GRID: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariogramKind {
    Linear,
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Variogram {
    Linear {
        nugget: f64,
        slope: f64,
    },
    /// `n + s (1 − e^{−h/a})`, without the practical-range factor.
    Exponential {
        nugget: f64,
        sill: f64,
        range: f64,
    },
}

impl Variogram {
    pub fn nugget(&self) -> f64 {
        match *self {
            Variogram::Linear { nugget, .. } | Variogram::Exponential { nugget, .. } => nugget,
        }
    }

    /// Semivariance at lag `h` meters; `γ(0)` is the nugget.
    pub fn gamma(&self, h: f64) -> f64 {
        match *self {
            Variogram::Linear { nugget, slope } => nugget + slope * h,
            Variogram::Exponential { nugget, sill, range } => nugget + sill * (1.0 - (-h / range).exp()),
        }
    }
}

/// Binned empirical semivariogram as (mean lag, semivariance) per non-empty bin.
pub fn empirical_semivariogram(points: &[(GeoPoint, f64)], bins: usize) -> Vec<(f64, f64)> {
    let mut pairs = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    let mut hmax: f64 = 0.0;
    for (a, (pa, va)) in points.iter().enumerate() {
        for (pb, vb) in &points[a + 1..] {
            let h = haversine_distance(*pa, *pb);
            hmax = hmax.max(h);
            pairs.push((h, 0.5 * (va - vb).powi(2)));
        }
    }
    let cutoff = hmax / 2.0;
    if cutoff <= 0.0 {
        return Vec::new();
    }
    let width = cutoff / bins as f64;
    let mut acc = vec![(0.0, 0.0, 0usize); bins];
    for (h, g) in pairs {
        if h > cutoff {
            continue;
        }
        let b = ((h / width) as usize).min(bins - 1);
        acc[b].0 += h;
        acc[b].1 += g;
        acc[b].2 += 1;
    }
    acc.into_iter()
        .filter(|a| a.2 > 0)
        .map(|(h, g, c)| (h / c as f64, g / c as f64))
        .collect()
}

/// Least squares for `y ≈ n + s·f` with n, s ≥ 0. Returns (n, s, sse).
fn nonneg_line(f: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let k = f.len() as f64;
    let sse = |n: f64, s: f64| f.iter().zip(y).map(|(f, y)| (y - n - s * f).powi(2)).sum::<f64>();
    let (mf, my) = (f.iter().sum::<f64>() / k, y.iter().sum::<f64>() / k);
    let sff: f64 = f.iter().map(|f| (f - mf).powi(2)).sum();
    let sfy: f64 = f.iter().zip(y).map(|(f, y)| (f - mf) * (y - my)).sum();
    let mut candidates = Vec::new();
    if sff > 0.0 {
        let s = sfy / sff;
        let n = my - s * mf;
        if s >= 0.0 && n >= 0.0 {
            candidates.push((n, s));
        }
        let sf2: f64 = f.iter().map(|f| f * f).sum();
        if sf2 > 0.0 {
            let s0 = (f.iter().zip(y).map(|(f, y)| f * y).sum::<f64>() / sf2).max(0.0);
            candidates.push((0.0, s0));
        }
    }
    candidates.push((my.max(0.0), 0.0));
    candidates
        .into_iter()
        .map(|(n, s)| (n, s, sse(n, s)))
        .min_by(|a, b| a.2.total_cmp(&b.2))
        .expect("at least one candidate")
}

/// Fits a variogram of `kind` to the binned semivariances of `points`.
///
/// Errors when fewer than [`MIN_VARIOGRAM_POINTS`] points are given; callers fall back
/// to the column mean.
pub fn fit_variogram(points: &[(GeoPoint, f64)], kind: VariogramKind) -> Result<Variogram> {
    if points.len() < MIN_VARIOGRAM_POINTS {
        return Err(Error::invalid(format!(
            "variogram needs at least {MIN_VARIOGRAM_POINTS} points, got {}",
            points.len()
        )));
    }
    let emp = empirical_semivariogram(points, VARIOGRAM_BINS);
    if emp.is_empty() {
        // every point at the same spot: pure nugget
        let mean = points.iter().map(|p| p.1).sum::<f64>() / points.len() as f64;
        let var = points.iter().map(|p| (p.1 - mean).powi(2)).sum::<f64>() / points.len() as f64;
        return Ok(match kind {
            VariogramKind::Linear => Variogram::Linear {
                nugget: var,
                slope: 0.0,
            },
            VariogramKind::Exponential => Variogram::Exponential {
                nugget: var,
                sill: f64::MIN_POSITIVE,
                range: 1.0,
            },
        });
    }
    let h: Vec<f64> = emp.iter().map(|e| e.0).collect();
    let g: Vec<f64> = emp.iter().map(|e| e.1).collect();
    Ok(match kind {
        VariogramKind::Linear => {
            let (nugget, slope, _) = nonneg_line(&h, &g);
            Variogram::Linear { nugget, slope }
        }
        VariogramKind::Exponential => {
            let hmax = h.iter().copied().fold(0.0, f64::max).max(1.0);
            let (lo, hi) = ((hmax / 100.0).ln(), (4.0 * hmax).ln());
            let mut best = (f64::INFINITY, 0.0, 0.0, 1.0);
            for step in 0..RANGE_GRID {
                let a = (lo + (hi - lo) * step as f64 / (RANGE_GRID - 1) as f64).exp();
                let f: Vec<f64> = h.iter().map(|h| 1.0 - (-h / a).exp()).collect();
                let (n, s, sse) = nonneg_line(&f, &g);
                if sse < best.0 {
                    best = (sse, n, s, a);
                }
            }
            Variogram::Exponential {
                nugget: best.1,
                sill: best.2.max(f64::MIN_POSITIVE),
                range: best.3,
            }
        }
    })
}

/// Ordinary-kriging weights system, factored once per column.
struct KrigingSystem {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl KrigingSystem {
    fn build(points: &[GeoPoint], v: &Variogram) -> Option<Self> {
        let m = points.len();
        let mut jitter = 0.0;
        for _ in 0..8 {
            let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
            for i in 0..m {
                for j in 0..m {
                    let h = if i == j {
                        0.0
                    } else {
                        haversine_distance(points[i], points[j])
                    };
                    a[(i, j)] = v.gamma(h);
                }
                a[(i, i)] += jitter;
                a[(i, m)] = 1.0;
                a[(m, i)] = 1.0;
            }
            let lu = a.lu();
            if lu.is_invertible() {
                let probe = DVector::from_element(m + 1, 1.0);
                if lu.solve(&probe).is_some_and(|x| x.iter().all(|v| v.is_finite())) {
                    return Some(KrigingSystem { lu });
                }
            }
            jitter = if jitter == 0.0 { RIDGE_JITTER } else { jitter * 100.0 };
        }
        None
    }
}

/// Ordinary kriging predictions at `targets` from `known` (location, value) pairs.
///
/// One known point yields its value everywhere; none is an error.
pub fn krige_column(known: &[(GeoPoint, f64)], targets: &[GeoPoint], v: &Variogram) -> Result<Vec<f64>> {
    match known.len() {
        0 => return Err(Error::invalid("kriging needs at least one known point")),
        1 => return Ok(vec![known[0].1; targets.len()]),
        _ => {}
    }
    let mean = known.iter().map(|k| k.1).sum::<f64>() / known.len() as f64;
    if known.iter().all(|k| k.1 == known[0].1) {
        return Ok(vec![known[0].1; targets.len()]);
    }
    let pts: Vec<GeoPoint> = known.iter().map(|k| k.0).collect();
    let Some(sys) = KrigingSystem::build(&pts, v) else {
        return Ok(vec![mean; targets.len()]);
    };
    let m = pts.len();
    let mut rhs = DMatrix::<f64>::zeros(m + 1, targets.len());
    for (c, t) in targets.iter().enumerate() {
        for (r, p) in pts.iter().enumerate() {
            rhs[(r, c)] = v.gamma(haversine_distance(*p, *t));
        }
        rhs[(m, c)] = 1.0;
    }
    let w = sys
        .lu
        .solve(&rhs)
        .ok_or_else(|| Error::invalid("kriging system is singular"))?;
    Ok((0..targets.len())
        .map(|c| {
            let p: f64 = (0..m).map(|r| w[(r, c)] * known[r].1).sum();
            if p.is_finite() {
                p
            } else {
                mean
            }
        })
        .collect())
}

/// Per-column ordinary kriging over every location.
///
/// Columns with fewer than [`MIN_VARIOGRAM_POINTS`] known entries use their
/// mean; empty columns use the global mean of known entries.
pub fn kriging_complete(obs: &ObservationMatrix, kind: VariogramKind) -> Result<Tensor2> {
    let (n, t) = (obs.n_locations(), obs.n_slots());
    let global = obs.known_mean();
    let cols: Vec<Vec<f64>> = (0..t)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let known: Vec<(GeoPoint, f64)> = (0..n)
                .filter(|&i| obs.is_known(i, j))
                .map(|i| (obs.locations()[i], obs.value(i, j)))
                .collect();
            if known.is_empty() {
                return Ok(vec![global; n]);
            }
            if known.len() < MIN_VARIOGRAM_POINTS {
                let mean = known.iter().map(|k| k.1).sum::<f64>() / known.len() as f64;
                return Ok(vec![mean; n]);
            }
            let v = fit_variogram(&known, kind)?;
            krige_column(&known, obs.locations(), &v)
        })
        .collect::<Result<_>>()?;
    Ok(Tensor2::from_fn(n, t, |i, j| cols[j][i]))
}
