use std::sync::Arc;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AvgaeConfig, Optimizer};
use super::loss::{loss_nodes, LossNodes, LossWeights};
use super::model::{
    decode_node, encode_nodes, reparameterize_node, sample_noise, AvgaeParams, DropoutMasks, InputScaling, ParamNodes,
};
use crate::error::{Error, Result};
use crate::graph::PropagationOperator;
use crate::ingest::ObservationMatrix;
use crate::numcore::{check_gradients, Graph, NodeId, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub kl: f64,
    pub smoothness: f64,
    /// MAE on the held-back entries after this epoch's update.
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Everything needed to run inference later.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: AvgaeConfig,
    pub params: AvgaeParams,
    pub scaling: InputScaling,
    pub log: TrainingLog,
}

impl TrainedModel {
    pub fn n_slots(&self) -> usize {
        self.params.output_width()
    }
}

/// Full stochastic forward pass: encoder with dropout, sampled Z, decoder, loss.
#[allow(clippy::too_many_arguments)]
pub(crate) fn forward_loss(
    g: &mut Graph,
    p: &PropagationOperator,
    x_in: NodeId,
    target: NodeId,
    positions: Arc<Vec<usize>>,
    params: &ParamNodes,
    masks: Option<&DropoutMasks>,
    noise: &Tensor2,
    scaling: &InputScaling,
    weights: &LossWeights,
) -> Result<LossNodes> {
    let (mu, sigma) = encode_nodes(g, p, x_in, params, masks)?;
    let z = reparameterize_node(g, mu, sigma, noise)?;
    let x_tilde = decode_node(g, p, z, params, scaling, masks)?;
    loss_nodes(g, target, positions, x_tilde, mu, sigma, weights)
}

/// Largest relative gap between tape and central-difference gradients of the
/// full training loss (reconstruction, KL and smoothness) at freshly
/// initialized parameters. Noise and dropout masks are drawn once from `seed`
/// and frozen; every known entry of `obs` counts as a fitting entry.
pub fn loss_gradient_error(
    obs: &ObservationMatrix,
    p: &PropagationOperator,
    config: &AvgaeConfig,
    seed: u64,
    eps: f64,
) -> Result<f64> {
    let (n, t) = (obs.n_locations(), obs.n_slots());
    config.validate(t)?;
    if p.n() != n {
        return Err(Error::Shape {
            op: "loss_gradient_error",
            left: (p.n(), p.n()),
            right: (n, t),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AvgaeParams::init(config, t, &mut rng);
    let masks = DropoutMasks::sample(&params, n, config.dropout, &mut rng);
    let noise = sample_noise(n, config.latent_dim, &mut rng);
    let scaling = InputScaling::fit(obs, config.standardize_values);
    let x_in = scaling.build_input(obs);
    let positions = Graph::mask_positions(obs.mask());
    let weights = LossWeights::from(config);
    let flat: Vec<Tensor2> = params.flat().into_iter().cloned().collect();
    check_gradients(
        |g, ids| {
            let nodes = ParamNodes::from_ids(&params, ids);
            let x = g.constant(x_in.clone());
            let target = g.constant(obs.values().clone());
            let l = forward_loss(
                g,
                p,
                x,
                target,
                positions.clone(),
                &nodes,
                Some(&masks),
                &noise,
                &scaling,
                &weights,
            )?;
            Ok(l.total)
        },
        &flat,
        eps,
    )
}

/// Deterministic reconstruction with Z = μ.
pub(crate) fn predict(
    p: &PropagationOperator,
    x_in: &Tensor2,
    params: &AvgaeParams,
    scaling: &InputScaling,
) -> Result<Tensor2> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.flat().into_iter().map(|t| g.constant(t.clone())).collect();
    let nodes = ParamNodes::from_ids(params, &ids);
    let x = g.constant(x_in.clone());
    let (mu, _) = encode_nodes(&mut g, p, x, &nodes, None)?;
    let out = decode_node(&mut g, p, mu, &nodes, scaling, None)?;
    Ok(g.value(out).clone())
}

enum Stepper {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        t: i32,
        m: Vec<Tensor2>,
        v: Vec<Tensor2>,
    },
}

impl Stepper {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(config: &AvgaeConfig, params: &AvgaeParams) -> Self {
        let lr = config.learning_rate;
        match config.optimizer {
            Optimizer::Sgd => Stepper::Sgd { lr },
            Optimizer::Adam => {
                let zeros: Vec<Tensor2> = params
                    .flat()
                    .iter()
                    .map(|w| Tensor2::zeros(w.rows(), w.cols()))
                    .collect();
                Stepper::Adam {
                    lr,
                    t: 0,
                    m: zeros.clone(),
                    v: zeros,
                }
            }
        }
    }

    fn step(&mut self, params: &mut AvgaeParams, grads: &[Tensor2]) {
        match self {
            Stepper::Sgd { lr } => {
                for (w, g) in params.flat_mut().into_iter().zip(grads) {
                    for (w, g) in w.data_mut().iter_mut().zip(g.data()) {
                        *w -= *lr * g;
                    }
                }
            }
            Stepper::Adam { lr, t, m, v } => {
                *t += 1;
                let c1 = 1.0 - Self::B1.powi(*t);
                let c2 = 1.0 - Self::B2.powi(*t);
                for (((w, g), m), v) in params
                    .flat_mut()
                    .into_iter()
                    .zip(grads)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    let it = w
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
                    for ((w, &g), (m, v)) in it {
                        *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                        *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                        *w -= *lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                    }
                }
            }
        }
    }
}

fn masked_mae(pred: &Tensor2, truth: &Tensor2, positions: &[usize]) -> f64 {
    let total: f64 = positions
        .iter()
        .map(|&k| (pred.data()[k] - truth.data()[k]).abs())
        .sum();
    total / positions.len() as f64
}

/// Splits the known entries of `obs` into a fitting mask and held-back positions.
fn carve_validation(obs: &ObservationMatrix, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<bool>, Vec<usize>) {
    let mut known = obs.known_positions();
    known.shuffle(rng);
    let n_val = (fraction * known.len() as f64).round() as usize;
    // keep at least one entry to fit on
    let n_val = if known.len() > 1 { n_val.min(known.len() - 1) } else { 0 };
    let mut val: Vec<usize> = known[..n_val].to_vec();
    val.sort_unstable();
    let mut fit = obs.mask().to_vec();
    for &k in &val {
        fit[k] = false;
    }
    (fit, val)
}

/// Fits the model on the known entries of `obs`.
///
/// A share of the known entries is hidden from both the input and the loss and
/// used for early stopping. The parameters with the best validation MAE are
/// returned; without a validation share the last parameters are kept.
pub fn train(obs: &ObservationMatrix, p: &PropagationOperator, config: &AvgaeConfig) -> Result<TrainedModel> {
    let (n, t) = (obs.n_locations(), obs.n_slots());
    config.validate(t)?;
    if p.n() != n {
        return Err(Error::Shape {
            op: "train",
            left: (p.n(), p.n()),
            right: (n, t),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (fit_mask, val_positions) = carve_validation(obs, config.validation_fraction, &mut rng);
    let fit_obs = obs.with_mask(fit_mask)?;
    let scaling = InputScaling::fit(&fit_obs, config.standardize_values);
    let x_in = scaling.build_input(&fit_obs);
    let positions = Graph::mask_positions(fit_obs.mask());
    let weights = LossWeights::from(config);

    let mut params = AvgaeParams::init(config, t, &mut rng);
    let mut stepper = Stepper::new(config, &params);
    let mut log = TrainingLog::default();
    let mut best: Option<(f64, AvgaeParams)> = None;
    let mut since_best = 0usize;

    info!(
        "training on {n}x{t}: {} fit entries, {} validation entries",
        positions.len(),
        val_positions.len()
    );

    for epoch in 0..config.epochs {
        let masks = (config.dropout > 0.0).then(|| DropoutMasks::sample(&params, n, config.dropout, &mut rng));
        let noise = sample_noise(n, config.latent_dim, &mut rng);

        let mut g = Graph::new();
        let ids: Vec<NodeId> = params.flat().into_iter().map(|w| g.param(w.clone())).collect();
        let nodes = ParamNodes::from_ids(&params, &ids);
        let x = g.constant(x_in.clone());
        let target = g.constant(obs.values().clone());
        let lossn = forward_loss(
            &mut g,
            p,
            x,
            target,
            Arc::clone(&positions),
            &nodes,
            masks.as_ref(),
            &noise,
            &scaling,
            &weights,
        )?;
        let parts = lossn.breakdown(&g);
        if !parts.total.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("loss is {}", parts.total),
            });
        }
        g.backward(lossn.total)?;
        let grads: Vec<Tensor2> = ids
            .iter()
            .map(|&id| g.grad(id).cloned().expect("params always receive gradients"))
            .collect();
        drop(g);
        stepper.step(&mut params, &grads);
        if !params.all_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "non-finite weights after update".into(),
            });
        }

        let val_mae = if val_positions.is_empty() {
            None
        } else {
            let pred = predict(p, &x_in, &params, &scaling)?;
            let v = masked_mae(&pred, obs.values(), &val_positions);
            if !v.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("validation MAE is {v}"),
                });
            }
            Some(v)
        };
        log.epochs.push(EpochLog {
            epoch,
            loss: parts.total,
            reconstruction: parts.reconstruction,
            kl: parts.kl,
            smoothness: parts.smoothness,
            val_mae,
        });
        if epoch % 50 == 0 {
            debug!(
                "epoch {epoch}: loss {:.4} mae {:.4} kl {:.4} smooth {:.4} val {:?}",
                parts.total, parts.reconstruction, parts.kl, parts.smoothness, val_mae
            );
        }

        match val_mae {
            Some(v) if best.as_ref().is_none_or(|(b, _)| v < *b) => {
                best = Some((v, params.clone()));
                log.best_epoch = epoch;
                since_best = 0;
            }
            Some(_) => {
                since_best += 1;
                if since_best >= config.patience {
                    log.stopped_early = true;
                    info!("early stop at epoch {epoch}, best {}", log.best_epoch);
                    break;
                }
            }
            None => log.best_epoch = epoch,
        }
    }

    let params = best.map_or(params, |(_, p)| p);
    Ok(TrainedModel {
        config: config.clone(),
        params,
        scaling,
        log,
    })
}

/// Completes the matrix from the known entries of `obs` with Z = μ.
pub fn infer(model: &TrainedModel, obs: &ObservationMatrix, p: &PropagationOperator) -> Result<Tensor2> {
    if obs.n_slots() != model.n_slots() {
        return Err(Error::Shape {
            op: "infer",
            left: (obs.n_locations(), obs.n_slots()),
            right: (obs.n_locations(), model.n_slots()),
        });
    }
    if p.n() != obs.n_locations() {
        return Err(Error::Shape {
            op: "infer",
            left: (p.n(), p.n()),
            right: (obs.n_locations(), obs.n_slots()),
        });
    }
    let x_in = model.scaling.build_input(obs);
    let out = predict(p, &x_in, &model.params, &model.scaling)?;
    if !out.all_finite() {
        return Err(Error::Diverged {
            epoch: model.log.best_epoch,
            detail: "non-finite prediction".into(),
        });
    }
    Ok(out)
}
