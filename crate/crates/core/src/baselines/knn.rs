use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ObservationMatrix;
use crate::numcore::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    /// Fewest co-observed slots for a similarity to count.
    pub min_overlap: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        KnnConfig { k: 40, min_overlap: 3 }
    }
}

/// Item-based neighborhood model over locations.
#[derive(Debug, Clone)]
pub struct KnnModel {
    config: KnnConfig,
    /// Known (slot, value) per location, ascending by slot.
    rows: Vec<Vec<(usize, f64)>>,
    row_means: Vec<Option<f64>>,
    global_mean: f64,
    /// Positive similarities per location, descending.
    neighbors: Vec<Vec<(usize, f64)>>,
    n_slots: usize,
}

/// Pearson correlation over slots observed in both rows, if the overlap suffices
/// and both restricted rows vary.
pub fn pearson_overlap(a: &[(usize, f64)], b: &[(usize, f64)], min_overlap: usize) -> Option<f64> {
    let mut pairs = Vec::new();
    let (mut x, mut y) = (0, 0);
    while x < a.len() && y < b.len() {
        match a[x].0.cmp(&b[y].0) {
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
            std::cmp::Ordering::Equal => {
                pairs.push((a[x].1, b[y].1));
                x += 1;
                y += 1;
            }
        }
    }
    if pairs.len() < min_overlap.max(2) {
        return None;
    }
    let k = pairs.len() as f64;
    let ma = pairs.iter().map(|p| p.0).sum::<f64>() / k;
    let mb = pairs.iter().map(|p| p.1).sum::<f64>() / k;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (u, v) in pairs {
        sab += (u - ma) * (v - mb);
        saa += (u - ma).powi(2);
        sbb += (v - mb).powi(2);
    }
    let denom = (saa * sbb).sqrt();
    (denom > 1e-12).then(|| (sab / denom).clamp(-1.0, 1.0))
}

pub fn fit_knn_cf(obs: &ObservationMatrix, config: KnnConfig) -> Result<KnnModel> {
    if config.k == 0 {
        return Err(Error::invalid("knn: k must be at least 1"));
    }
    let (n, t) = (obs.n_locations(), obs.n_slots());
    let rows: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            (0..t)
                .filter(|&j| obs.is_known(i, j))
                .map(|j| (j, obs.value(i, j)))
                .collect()
        })
        .collect();
    let row_means = rows
        .iter()
        .map(|r| (!r.is_empty()).then(|| r.iter().map(|e| e.1).sum::<f64>() / r.len() as f64))
        .collect();
    let neighbors = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut sims: Vec<(usize, f64)> = (0..n)
                .filter(|&l| l != i)
                .filter_map(|l| pearson_overlap(&rows[i], &rows[l], config.min_overlap).map(|s| (l, s)))
                .filter(|&(_, s)| s > 0.0)
                .collect();
            sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            sims
        })
        .collect();
    Ok(KnnModel {
        config,
        rows,
        row_means,
        global_mean: obs.known_mean(),
        neighbors,
        n_slots: t,
    })
}

impl KnnModel {
    pub fn similarity(&self, i: usize, l: usize) -> Option<f64> {
        self.neighbors[i].iter().find(|e| e.0 == l).map(|e| e.1)
    }

    fn known(&self, l: usize, j: usize) -> Option<f64> {
        self.rows[l]
            .binary_search_by_key(&j, |e| e.0)
            .ok()
            .map(|k| self.rows[l][k].1)
    }

    pub fn predict(&self, i: usize, j: usize) -> f64 {
        let Some(base) = self.row_means[i] else {
            return self.global_mean;
        };
        let (mut num, mut den) = (0.0, 0.0);
        let mut used = 0;
        for &(l, s) in &self.neighbors[i] {
            if used == self.config.k {
                break;
            }
            if let (Some(v), Some(m)) = (self.known(l, j), self.row_means[l]) {
                num += s * (v - m);
                den += s;
                used += 1;
            }
        }
        if den > 0.0 {
            base + num / den
        } else {
            base
        }
    }

    pub fn complete(&self) -> Tensor2 {
        Tensor2::from_fn(self.rows.len(), self.n_slots, |i, j| self.predict(i, j))
    }
}
