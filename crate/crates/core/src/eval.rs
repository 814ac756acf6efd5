//! Holdout splits, error metrics and the repeated benchmark protocol.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::avgae::{self, AvgaeConfig};
use crate::baselines::{self, KnnConfig, NmfConfig, SvdConfig, VariogramKind};
use crate::error::{Error, Result};
use crate::graph::PropagationOperator;
use crate::ingest::ObservationMatrix;
use crate::numcore::Tensor2;

/// Smallest known-entry set the holdout split accepts.
pub const MIN_SPLIT_ENTRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub n_repeats: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.9,
            n_repeats: 5,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::invalid("train_fraction must lie strictly between 0 and 1"));
        }
        if self.n_repeats == 0 {
            return Err(Error::invalid("n_repeats must be at least 1"));
        }
        Ok(())
    }
}

/// Random train/test partition of `known` (flat positions), deterministic per
/// `(spec.seed, repeat)`. Both halves come back sorted.
pub fn split(known: &[usize], spec: &SplitSpec, repeat: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    if known.len() < MIN_SPLIT_ENTRIES {
        return Err(Error::invalid(format!(
            "need at least {MIN_SPLIT_ENTRIES} known entries to split, got {}",
            known.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(repeat as u64);
    let mut shuffled = known.to_vec();
    shuffled.shuffle(&mut rng);
    let n_train = (spec.train_fraction * known.len() as f64).floor() as usize;
    let mut train = shuffled[..n_train].to_vec();
    let mut test = shuffled[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

fn masked_errors<'a>(
    pred: &'a Tensor2,
    truth: &'a Tensor2,
    mask: &'a [bool],
) -> Result<impl Iterator<Item = f64> + 'a> {
    pred.check_same_shape(truth, "metric")?;
    if mask.len() != pred.len() {
        return Err(Error::invalid("metric mask does not match the matrix"));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::invalid("metric mask is empty"));
    }
    Ok(mask
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(k, _)| pred.data()[k] - truth.data()[k]))
}

pub fn mae(pred: &Tensor2, truth: &Tensor2, mask: &[bool]) -> Result<f64> {
    let (mut s, mut c) = (0.0, 0usize);
    for e in masked_errors(pred, truth, mask)? {
        s += e.abs();
        c += 1;
    }
    Ok(s / c as f64)
}

pub fn rmse(pred: &Tensor2, truth: &Tensor2, mask: &[bool]) -> Result<f64> {
    let (mut s, mut c) = (0.0, 0usize);
    for e in masked_errors(pred, truth, mask)? {
        s += e * e;
        c += 1;
    }
    Ok((s / c as f64).sqrt())
}

pub fn positions_to_mask(positions: &[usize], len: usize) -> Vec<bool> {
    let mut mask = vec![false; len];
    for &p in positions {
        mask[p] = true;
    }
    mask
}

/// `Σ_ij (X_{i,j+1} − X_{i,j})²`.
pub fn temporal_roughness(x: &Tensor2) -> f64 {
    (0..x.rows())
        .map(|i| x.row(i).windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>())
        .sum()
}

/// Hides every entry of about `fraction` of the observed rows.
/// Returns the reduced matrix and the blanked row indices.
pub fn blank_rows(obs: &ObservationMatrix, fraction: f64, seed: u64) -> Result<(ObservationMatrix, Vec<usize>)> {
    let observed: Vec<usize> = (0..obs.n_locations())
        .filter(|&i| (0..obs.n_slots()).any(|j| obs.is_known(i, j)))
        .collect();
    let count = ((fraction * observed.len() as f64).round() as usize).clamp(1, observed.len().saturating_sub(1).max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows: Vec<usize> = observed.choose_multiple(&mut rng, count).copied().collect();
    rows.sort_unstable();
    let t = obs.n_slots();
    let mut mask = obs.mask().to_vec();
    for &i in &rows {
        mask[i * t..(i + 1) * t].fill(false);
    }
    Ok((obs.with_mask(mask)?, rows))
}

/// A matrix-completion method that can take part in a benchmark.
pub trait Completer: Sync {
    fn name(&self) -> String;

    /// Settings echoed into the report.
    fn config(&self) -> serde_json::Value {
        serde_json::Value::Null
    }

    /// Predicts every cell from the known entries of `train`. `repeat` lets
    /// seeded methods draw fresh randomness per split.
    fn complete(&self, train: &ObservationMatrix, op: &PropagationOperator, repeat: usize) -> Result<Tensor2>;
}

/// Built-in methods.
#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Avgae(AvgaeConfig),
    KrigingLinear,
    KrigingExp,
    Knn(KnnConfig),
    Svd(SvdConfig),
    Nmf(NmfConfig),
    GlobalMean,
}

impl Method {
    pub const NAMES: [&'static str; 7] = [
        "avgae",
        "kriging-linear",
        "kriging-exp",
        "knn",
        "svd",
        "nmf",
        "global-mean",
    ];

    /// Method with default settings for `name`.
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "avgae" => Method::Avgae(AvgaeConfig::default()),
            "kriging-linear" => Method::KrigingLinear,
            "kriging-exp" => Method::KrigingExp,
            "knn" => Method::Knn(KnnConfig::default()),
            "svd" => Method::Svd(SvdConfig::default()),
            "nmf" => Method::Nmf(NmfConfig::default()),
            "global-mean" => Method::GlobalMean,
            other => {
                return Err(Error::invalid(format!(
                    "unknown method {other:?}; valid names: {}",
                    Method::NAMES.join(", ")
                )))
            }
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::Avgae(_) => "avgae",
            Method::KrigingLinear => "kriging-linear",
            Method::KrigingExp => "kriging-exp",
            Method::Knn(_) => "knn",
            Method::Svd(_) => "svd",
            Method::Nmf(_) => "nmf",
            Method::GlobalMean => "global-mean",
        }
    }
}

impl Completer for Method {
    fn name(&self) -> String {
        self.label().to_string()
    }

    fn config(&self) -> serde_json::Value {
        match self {
            Method::Avgae(c) => json!(c),
            Method::Knn(c) => json!(c),
            Method::Svd(c) => json!(c),
            Method::Nmf(c) => json!(c),
            Method::KrigingLinear | Method::KrigingExp => json!({ "bins": baselines::VARIOGRAM_BINS }),
            Method::GlobalMean => serde_json::Value::Null,
        }
    }

    fn complete(&self, train: &ObservationMatrix, op: &PropagationOperator, repeat: usize) -> Result<Tensor2> {
        let r = repeat as u64;
        match self {
            Method::Avgae(c) => {
                let c = AvgaeConfig {
                    seed: c.seed.wrapping_add(r),
                    ..c.clone()
                };
                let model = avgae::train(train, op, &c)?;
                avgae::infer(&model, train, op)
            }
            Method::KrigingLinear => baselines::kriging_complete(train, VariogramKind::Linear),
            Method::KrigingExp => baselines::kriging_complete(train, VariogramKind::Exponential),
            Method::Knn(c) => Ok(baselines::fit_knn_cf(train, *c)?.complete()),
            Method::Svd(c) => {
                let c = SvdConfig {
                    seed: c.seed.wrapping_add(r),
                    ..*c
                };
                Ok(baselines::fit_svd_mf(train, &c)?.complete())
            }
            Method::Nmf(c) => {
                let c = NmfConfig {
                    seed: c.seed.wrapping_add(r),
                    ..*c
                };
                Ok(baselines::fit_nmf(train, &c)?.complete())
            }
            Method::GlobalMean => Ok(Tensor2::filled(
                train.n_locations(),
                train.n_slots(),
                train.known_mean(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatResult {
    pub repeat: usize,
    pub mae: f64,
    pub rmse: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub name: String,
    pub mae_mean: f64,
    pub mae_sd: f64,
    pub rmse_mean: f64,
    pub rmse_sd: f64,
    pub repeats: Vec<RepeatResult>,
}

/// Published figures kept for context; they come from a private dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublishedReference {
    pub method: String,
    pub pollutant: String,
    pub mae: f64,
    pub rmse: f64,
    pub reproducible: bool,
}

pub fn published_reference() -> Vec<PublishedReference> {
    let row = |p: &str, mae, rmse| PublishedReference {
        method: "avgae".into(),
        pollutant: p.into(),
        mae,
        rmse,
        reproducible: false,
    };
    vec![row("NO2", 14.92, 24.33), row("PM2.5", 2.56, 6.42)]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub methods: Vec<MethodResult>,
    pub config: serde_json::Value,
    pub reference: Vec<PublishedReference>,
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Scores every method on `spec.n_repeats` random holdouts of the known entries.
///
/// Test entries are hidden by mask only. Jobs run in parallel; the report
/// order follows `methods` and does not depend on scheduling.
pub fn run_benchmark(
    dataset: &str,
    obs: &ObservationMatrix,
    op: &PropagationOperator,
    methods: &[&dyn Completer],
    spec: &SplitSpec,
) -> Result<EvalReport> {
    spec.validate()?;
    if methods.is_empty() {
        return Err(Error::invalid("no methods to evaluate"));
    }
    let known = obs.known_positions();
    let len = obs.values().len();
    let splits: Vec<(ObservationMatrix, Vec<bool>, usize, usize)> = (0..spec.n_repeats)
        .map(|r| {
            let (train, test) = split(&known, spec, r)?;
            let train_obs = obs.with_mask(positions_to_mask(&train, len))?;
            Ok((train_obs, positions_to_mask(&test, len), train.len(), test.len()))
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(usize, usize)> = (0..methods.len())
        .flat_map(|m| (0..spec.n_repeats).map(move |r| (m, r)))
        .collect();
    let results: Vec<RepeatResult> = jobs
        .par_iter()
        .map(|&(m, r)| {
            let (train_obs, test_mask, n_train, n_test) = &splits[r];
            let method = methods[m];
            let wrap = |e: Error| Error::Method {
                method: method.name(),
                source: Box::new(e),
            };
            let pred = method.complete(train_obs, op, r).map_err(wrap)?;
            let pred_mae = mae(&pred, obs.values(), test_mask).map_err(wrap)?;
            let pred_rmse = rmse(&pred, obs.values(), test_mask).map_err(wrap)?;
            log::info!("{} repeat {r}: mae {pred_mae:.4} rmse {pred_rmse:.4}", method.name());
            Ok(RepeatResult {
                repeat: r,
                mae: pred_mae,
                rmse: pred_rmse,
                n_train: *n_train,
                n_test: *n_test,
            })
        })
        .collect::<Result<_>>()?;

    let method_results = methods
        .iter()
        .enumerate()
        .map(|(m, method)| {
            let repeats = results[m * spec.n_repeats..(m + 1) * spec.n_repeats].to_vec();
            let (mae_mean, mae_sd) = mean_sd(&repeats.iter().map(|r| r.mae).collect::<Vec<_>>());
            let (rmse_mean, rmse_sd) = mean_sd(&repeats.iter().map(|r| r.rmse).collect::<Vec<_>>());
            MethodResult {
                name: method.name(),
                mae_mean,
                mae_sd,
                rmse_mean,
                rmse_sd,
                repeats,
            }
        })
        .collect();
    let config = json!({
        "split": spec,
        "matrix": { "locations": obs.n_locations(), "slots": obs.n_slots(), "known": known.len() },
        "methods": methods.iter().map(|m| json!({ "name": m.name(), "config": m.config() })).collect::<Vec<_>>(),
    });
    Ok(EvalReport {
        dataset: dataset.to_string(),
        methods: method_results,
        config,
        reference: published_reference(),
    })
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// Aligned plain-text table.
    pub fn table(&self) -> String {
        let width = self.methods.iter().map(|m| m.name.len()).max().unwrap_or(6).max(6);
        let mut out = String::new();
        let _ = writeln!(out, "dataset: {}", self.dataset);
        let _ = writeln!(
            out,
            "{:<width$}  {:>10}  {:>8}  {:>10}  {:>8}  {:>7}",
            "method", "MAE", "±sd", "RMSE", "±sd", "repeats"
        );
        for m in &self.methods {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.4}  {:>8.4}  {:>10.4}  {:>8.4}  {:>7}",
                m.name,
                m.mae_mean,
                m.mae_sd,
                m.rmse_mean,
                m.rmse_sd,
                m.repeats.len()
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format {
            what: "report",
            detail: e.to_string(),
        })
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format {
            what: "report",
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}
