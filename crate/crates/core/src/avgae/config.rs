use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the temporal smoothness term is reduced over its (i, j, k) triples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain full-batch gradient descent at a fixed rate.
    Sgd,
    /// Adam with the usual (0.9, 0.999, 1e-8) moments.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvgaeConfig {
    /// Width of every hidden GCN layer and of the latent code.
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub learning_rate: f64,
    pub kl_weight: f64,
    pub smooth_weight: f64,
    /// Temporal neighborhood half-width in slots.
    pub smooth_window: usize,
    pub dropout: f64,
    pub epochs: usize,
    /// Early stop after this many epochs without validation improvement.
    pub patience: usize,
    pub seed: u64,
    pub smoothness_reduction: Reduction,
    pub standardize_values: bool,
    pub optimizer: Optimizer,
    /// Share of training entries held back for early stopping.
    pub validation_fraction: f64,
}

impl Default for AvgaeConfig {
    fn default() -> Self {
        AvgaeConfig {
            latent_dim: 512,
            encoder_layers: 4,
            decoder_layers: 1,
            learning_rate: 0.005,
            kl_weight: 0.1,
            smooth_weight: 0.8,
            smooth_window: 3,
            dropout: 0.4,
            epochs: 2000,
            patience: 200,
            seed: 0,
            smoothness_reduction: Reduction::Mean,
            standardize_values: true,
            optimizer: Optimizer::Sgd,
            validation_fraction: 0.1,
        }
    }
}

impl AvgaeConfig {
    /// Narrower network without dropout, for matrices of a hundred-odd rows.
    pub fn desk_scale() -> Self {
        AvgaeConfig {
            latent_dim: 64,
            dropout: 0.0,
            ..AvgaeConfig::default()
        }
    }

    /// Checks the config against a matrix with `n_slots` columns.
    pub fn validate(&self, n_slots: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("avgae config: {m}")));
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1");
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return bad("encoder and decoder need at least one layer");
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("kl_weight", self.kl_weight),
            ("smooth_weight", self.smooth_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if self.smooth_window == 0 || self.smooth_window >= n_slots {
            return bad(&format!(
                "smooth_window must satisfy 1 <= w < T = {n_slots}, got {}",
                self.smooth_window
            ));
        }
        Ok(())
    }
}
