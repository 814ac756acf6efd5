use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::AvgaeConfig;
use super::model::{AvgaeParams, InputScaling};
use super::train::{TrainedModel, TrainingLog};
use crate::error::{Error, Result};
use crate::numcore::Tensor2;

pub const CHECKPOINT_FORMAT: &str = "aqinfer-avgae/1";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: AvgaeConfig,
    n_slots: usize,
    scaling: InputScaling,
    params: AvgaeParams,
    log: TrainingLog,
}

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn check_chain(name: &str, ws: &[Tensor2], first_in: usize, last_out: usize, hidden: usize) -> Result<()> {
    if ws.is_empty() {
        return Err(bad(format!("{name}: no layers")));
    }
    let mut width = first_in;
    for (k, w) in ws.iter().enumerate() {
        let out = if k + 1 == ws.len() { last_out } else { hidden };
        if w.shape() != (width, out) {
            return Err(bad(format!(
                "{name} layer {k}: shape {:?}, expected {:?}",
                w.shape(),
                (width, out)
            )));
        }
        if w.data().len() != w.rows() * w.cols() || !w.all_finite() {
            return Err(bad(format!("{name} layer {k}: corrupt or non-finite weights")));
        }
        width = out;
    }
    Ok(())
}

impl TrainedModel {
    pub fn to_json(&self) -> Result<String> {
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            config: self.config.clone(),
            n_slots: self.n_slots(),
            scaling: self.scaling,
            params: self.params.clone(),
            log: self.log.clone(),
        };
        serde_json::to_string(&file).map_err(|e| bad(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: CheckpointFile = serde_json::from_str(s).map_err(|e| bad(e.to_string()))?;
        if f.format != CHECKPOINT_FORMAT {
            return Err(bad(format!("unsupported format tag {:?}", f.format)));
        }
        let c = &f.config;
        let (t, d) = (f.n_slots, c.latent_dim);
        if f.params.mu.len() != c.encoder_layers
            || f.params.sigma.len() != c.encoder_layers
            || f.params.decoder.len() != c.decoder_layers
        {
            return Err(bad("layer count does not match config"));
        }
        check_chain("mu", &f.params.mu, t + 2, d, d)?;
        check_chain("sigma", &f.params.sigma, t + 2, d, d)?;
        check_chain("decoder", &f.params.decoder, d, t, d)?;
        let s = &f.scaling;
        if ![
            s.value_shift,
            s.value_scale,
            s.lat_min,
            s.lat_span,
            s.lon_min,
            s.lon_span,
        ]
        .iter()
        .all(|v| v.is_finite())
            || s.value_scale <= 0.0
        {
            return Err(bad("invalid scaling constants"));
        }
        Ok(TrainedModel {
            config: f.config,
            params: f.params,
            scaling: f.scaling,
            log: f.log,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }
}
