use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use super::config::AvgaeConfig;
use crate::error::{Error, Result};
use crate::graph::PropagationOperator;
use crate::ingest::ObservationMatrix;
use crate::numcore::{dropout_mask, Graph, NodeId, Tensor2};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

impl Activation {
    fn apply(self, g: &mut Graph, x: NodeId) -> NodeId {
        match self {
            Activation::Identity => x,
            Activation::Relu => g.relu(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// Weights of the two encoder branches and the decoder. No biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvgaeParams {
    pub mu: Vec<Tensor2>,
    pub sigma: Vec<Tensor2>,
    pub decoder: Vec<Tensor2>,
}

impl AvgaeParams {
    /// Glorot-uniform weights for inputs of width `n_slots + 2`.
    pub fn init<R: Rng + ?Sized>(config: &AvgaeConfig, n_slots: usize, rng: &mut R) -> Self {
        let d = config.latent_dim;
        let stack = |widths: &[usize], rng: &mut R| -> Vec<Tensor2> {
            widths.windows(2).map(|w| glorot(w[0], w[1], rng)).collect()
        };
        let mut enc = vec![n_slots + 2];
        enc.extend(std::iter::repeat_n(d, config.encoder_layers));
        let mut dec = vec![d; config.decoder_layers];
        dec.push(n_slots);
        let mu = stack(&enc, rng);
        let sigma = stack(&enc, rng);
        let decoder = stack(&dec, rng);
        AvgaeParams { mu, sigma, decoder }
    }

    /// Every weight in a fixed order: μ branch, σ branch, decoder.
    pub fn flat(&self) -> Vec<&Tensor2> {
        self.mu.iter().chain(&self.sigma).chain(&self.decoder).collect()
    }

    pub fn flat_mut(&mut self) -> Vec<&mut Tensor2> {
        self.mu
            .iter_mut()
            .chain(self.sigma.iter_mut())
            .chain(self.decoder.iter_mut())
            .collect()
    }

    pub fn from_flat(&self, flat: Vec<Tensor2>) -> Self {
        let (a, b) = (self.mu.len(), self.sigma.len());
        let mut it = flat.into_iter();
        AvgaeParams {
            mu: it.by_ref().take(a).collect(),
            sigma: it.by_ref().take(b).collect(),
            decoder: it.collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.mu[0].rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mu.last().expect("non-empty encoder").cols()
    }

    pub fn output_width(&self) -> usize {
        self.decoder.last().expect("non-empty decoder").cols()
    }

    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|t| t.all_finite())
    }
}

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor2 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Tensor2::from_fn(fan_in, fan_out, |_, _| dist.sample(rng))
}

/// Constants that map raw observations to network inputs and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    /// Raw value = `value_scale * standardized + value_shift`.
    pub value_shift: f64,
    pub value_scale: f64,
    pub lat_min: f64,
    pub lat_span: f64,
    pub lon_min: f64,
    pub lon_span: f64,
}

impl InputScaling {
    /// z-scores from the known entries of `obs` (identity when `standardize` is off)
    /// and min-max bounds of its coordinates.
    pub fn fit(obs: &ObservationMatrix, standardize: bool) -> Self {
        let (value_shift, value_scale) = if standardize {
            let vals: Vec<f64> = obs
                .values()
                .data()
                .iter()
                .zip(obs.mask())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            let sd = var.sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        } else {
            (0.0, 1.0)
        };
        let bounds = |f: fn(&crate::geo::GeoPoint) -> f64| {
            let lo = obs.locations().iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = obs.locations().iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            (lo, hi - lo)
        };
        let (lat_min, lat_span) = bounds(|p| p.lat());
        let (lon_min, lon_span) = bounds(|p| p.lon());
        InputScaling {
            value_shift,
            value_scale,
            lat_min,
            lat_span,
            lon_min,
            lon_span,
        }
    }

    pub fn identity_for(obs: &ObservationMatrix) -> Self {
        InputScaling::fit(obs, false)
    }

    fn unit(v: f64, lo: f64, span: f64) -> f64 {
        if span > 0.0 {
            (v - lo) / span
        } else {
            0.0
        }
    }

    /// `[X ‖ S]`: standardized known values (0 elsewhere) next to scaled coordinates.
    pub fn build_input(&self, obs: &ObservationMatrix) -> Tensor2 {
        let t = obs.n_slots();
        Tensor2::from_fn(obs.n_locations(), t + 2, |i, j| {
            if j < t {
                if obs.is_known(i, j) {
                    (obs.value(i, j) - self.value_shift) / self.value_scale
                } else {
                    0.0
                }
            } else {
                let p = obs.locations()[i];
                if j == t {
                    Self::unit(p.lat(), self.lat_min, self.lat_span)
                } else {
                    Self::unit(p.lon(), self.lon_min, self.lon_span)
                }
            }
        })
    }
}

/// Per-layer dropout masks for one training step, in layer order.
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub mu: Vec<Arc<Tensor2>>,
    pub sigma: Vec<Arc<Tensor2>>,
    pub decoder: Vec<Arc<Tensor2>>,
}

impl DropoutMasks {
    pub fn sample<R: Rng + ?Sized>(params: &AvgaeParams, n: usize, p: f64, rng: &mut R) -> Self {
        let mut masks = |ws: &[Tensor2]| -> Vec<Arc<Tensor2>> {
            ws.iter().map(|w| Arc::new(dropout_mask(n, w.rows(), p, rng))).collect()
        };
        let mu = masks(&params.mu);
        let sigma = masks(&params.sigma);
        let decoder = masks(&params.decoder);
        DropoutMasks { mu, sigma, decoder }
    }
}

/// Standard-normal noise matrix for the reparameterized sample.
pub fn sample_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor2 {
    Tensor2::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Param nodes mirroring [`AvgaeParams`] on a tape.
#[derive(Debug, Clone)]
pub(crate) struct ParamNodes {
    pub mu: Vec<NodeId>,
    pub sigma: Vec<NodeId>,
    pub decoder: Vec<NodeId>,
}

impl ParamNodes {
    pub(crate) fn from_ids(params: &AvgaeParams, ids: &[NodeId]) -> Self {
        let (a, b) = (params.mu.len(), params.sigma.len());
        ParamNodes {
            mu: ids[..a].to_vec(),
            sigma: ids[a..a + b].to_vec(),
            decoder: ids[a + b..].to_vec(),
        }
    }
}

/// One GCN layer on the tape: `act(P · drop(H) · W)`.
pub(crate) fn gcn_node(
    g: &mut Graph,
    p: &PropagationOperator,
    h: NodeId,
    w: NodeId,
    act: Activation,
    mask: Option<&Arc<Tensor2>>,
) -> Result<NodeId> {
    let h = match mask {
        Some(m) => g.dropout(h, Arc::clone(m))?,
        None => h,
    };
    let hw = g.matmul(h, w)?;
    let out = g.propagate_symmetric(p.matrix(), hw)?;
    Ok(act.apply(g, out))
}

fn stack_node(
    g: &mut Graph,
    p: &PropagationOperator,
    input: NodeId,
    weights: &[NodeId],
    last: Activation,
    masks: Option<&[Arc<Tensor2>]>,
) -> Result<NodeId> {
    let mut h = input;
    for (k, &w) in weights.iter().enumerate() {
        let act = if k + 1 == weights.len() { last } else { Activation::Relu };
        h = gcn_node(g, p, h, w, act, masks.map(|m| &m[k]))?;
    }
    Ok(h)
}

/// (μ, σ) nodes from the two independent encoder stacks.
pub(crate) fn encode_nodes(
    g: &mut Graph,
    p: &PropagationOperator,
    x_in: NodeId,
    params: &ParamNodes,
    masks: Option<&DropoutMasks>,
) -> Result<(NodeId, NodeId)> {
    let mu = stack_node(
        g,
        p,
        x_in,
        &params.mu,
        Activation::Identity,
        masks.map(|m| m.mu.as_slice()),
    )?;
    let sigma = stack_node(
        g,
        p,
        x_in,
        &params.sigma,
        Activation::Sigmoid,
        masks.map(|m| m.sigma.as_slice()),
    )?;
    Ok((mu, sigma))
}

/// `Z = μ + σ ⊙ ε` with ε a constant leaf.
pub(crate) fn reparameterize_node(g: &mut Graph, mu: NodeId, sigma: NodeId, noise: &Tensor2) -> Result<NodeId> {
    let eps = g.constant(noise.clone());
    let spread = g.mul(sigma, eps)?;
    g.add(mu, spread)
}

/// Decoder stack followed by de-standardization into raw units.
pub(crate) fn decode_node(
    g: &mut Graph,
    p: &PropagationOperator,
    z: NodeId,
    params: &ParamNodes,
    scaling: &InputScaling,
    masks: Option<&DropoutMasks>,
) -> Result<NodeId> {
    let out = stack_node(
        g,
        p,
        z,
        &params.decoder,
        Activation::Identity,
        masks.map(|m| m.decoder.as_slice()),
    )?;
    let out = g.scale(out, scaling.value_scale);
    Ok(g.add_scalar(out, scaling.value_shift))
}

fn check_operator(p: &PropagationOperator, rows: usize) -> Result<()> {
    if p.n() != rows {
        return Err(Error::Shape {
            op: "propagation",
            left: (p.n(), p.n()),
            right: (rows, 0),
        });
    }
    Ok(())
}

/// `act(P · H · W)`.
pub fn gcn_layer(p: &PropagationOperator, h: &Tensor2, w: &Tensor2, act: Activation) -> Result<Tensor2> {
    check_operator(p, h.rows())?;
    let mut g = Graph::new();
    let hn = g.constant(h.clone());
    let wn = g.constant(w.clone());
    let out = gcn_node(&mut g, p, hn, wn, act, None)?;
    Ok(g.value(out).clone())
}

fn constant_params(g: &mut Graph, params: &AvgaeParams) -> ParamNodes {
    let ids: Vec<NodeId> = params.flat().into_iter().map(|t| g.constant(t.clone())).collect();
    ParamNodes::from_ids(params, &ids)
}

fn guard_finite(t: &Tensor2, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch: 0,
            detail: format!("non-finite {what}"),
        })
    }
}

/// Deterministic encoder pass (no dropout). Returns (μ, σ), each N×D.
pub fn encode(x_in: &Tensor2, p: &PropagationOperator, params: &AvgaeParams) -> Result<(Tensor2, Tensor2)> {
    check_operator(p, x_in.rows())?;
    if x_in.cols() != params.input_width() {
        return Err(Error::Shape {
            op: "encode",
            left: x_in.shape(),
            right: params.mu[0].shape(),
        });
    }
    let mut g = Graph::new();
    let nodes = constant_params(&mut g, params);
    let x = g.constant(x_in.clone());
    let (mu, sigma) = encode_nodes(&mut g, p, x, &nodes, None)?;
    let (mu, sigma) = (g.value(mu).clone(), g.value(sigma).clone());
    guard_finite(&mu, "μ")?;
    guard_finite(&sigma, "σ")?;
    Ok((mu, sigma))
}

/// `Z = μ + σ ⊙ ε`, ε ~ N(0, I) drawn from `rng`.
pub fn reparameterize<R: Rng + ?Sized>(mu: &Tensor2, sigma: &Tensor2, rng: &mut R) -> Result<Tensor2> {
    mu.check_same_shape(sigma, "reparameterize")?;
    if sigma.data().iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid("σ must be strictly positive"));
    }
    let eps = sample_noise(mu.rows(), mu.cols(), rng);
    let mut z = mu.clone();
    for ((z, s), e) in z.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
        *z += s * e;
    }
    Ok(z)
}

/// Decoder pass in raw units (no dropout).
pub fn decode(z: &Tensor2, p: &PropagationOperator, params: &AvgaeParams, scaling: &InputScaling) -> Result<Tensor2> {
    check_operator(p, z.rows())?;
    if z.cols() != params.decoder[0].rows() {
        return Err(Error::Shape {
            op: "decode",
            left: z.shape(),
            right: params.decoder[0].shape(),
        });
    }
    let mut g = Graph::new();
    let nodes = constant_params(&mut g, params);
    let zn = g.constant(z.clone());
    let out = decode_node(&mut g, p, zn, &nodes, scaling, None)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::GeoPoint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn half_op() -> PropagationOperator {
        PropagationOperator::from_dense(&Tensor2::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap()).unwrap()
    }

    fn t(rows: &[Vec<f64>]) -> Tensor2 {
        Tensor2::from_rows(rows).unwrap()
    }

    #[test]
    fn gcn_layer_hand_values() {
        let p = PropagationOperator::identity(1);
        let out = gcn_layer(&p, &t(&[vec![2.0]]), &t(&[vec![3.0]]), Activation::Identity).unwrap();
        assert_eq!(out.data(), &[6.0]);

        let out = gcn_layer(
            &half_op(),
            &t(&[vec![2.0], vec![0.0]]),
            &t(&[vec![1.0]]),
            Activation::Identity,
        )
        .unwrap();
        assert_eq!(out.data(), &[1.0, 1.0]);

        let out = gcn_layer(
            &half_op(),
            &t(&[vec![2.0], vec![0.0]]),
            &t(&[vec![-1.0]]),
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);
    }

    #[test]
    fn gcn_layer_shape_errors() {
        let p = PropagationOperator::identity(3);
        assert!(gcn_layer(&p, &Tensor2::zeros(2, 2), &Tensor2::zeros(2, 2), Activation::Relu).is_err());
        let p = PropagationOperator::identity(2);
        assert!(gcn_layer(&p, &Tensor2::zeros(2, 2), &Tensor2::zeros(3, 2), Activation::Relu).is_err());
    }

    fn zero_params(cfg: &AvgaeConfig, t: usize) -> AvgaeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = AvgaeParams::init(cfg, t, &mut rng);
        for w in p.flat_mut() {
            w.data_mut().fill(0.0);
        }
        p
    }

    #[test]
    fn zero_weights_give_unit_gaussian_center() {
        let cfg = AvgaeConfig {
            latent_dim: 5,
            ..AvgaeConfig::default()
        };
        let params = zero_params(&cfg, 6);
        let p = PropagationOperator::identity(4);
        let x = Tensor2::filled(4, 8, 0.3);
        let (mu, sigma) = encode(&x, &p, &params).unwrap();
        assert_eq!(mu.shape(), (4, 5));
        assert_eq!(sigma.shape(), (4, 5));
        assert!(mu.data().iter().all(|&v| v == 0.0));
        assert!(sigma.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_decoder_returns_shift() {
        let cfg = AvgaeConfig {
            latent_dim: 3,
            ..AvgaeConfig::default()
        };
        let params = zero_params(&cfg, 6);
        let scaling = InputScaling {
            value_shift: 42.0,
            value_scale: 7.0,
            lat_min: 0.0,
            lat_span: 1.0,
            lon_min: 0.0,
            lon_span: 1.0,
        };
        let out = decode(
            &Tensor2::zeros(4, 3),
            &PropagationOperator::identity(4),
            &params,
            &scaling,
        )
        .unwrap();
        assert_eq!(out.shape(), (4, 6));
        assert!(out.data().iter().all(|&v| v == 42.0));
    }

    #[test]
    fn init_shapes() {
        let cfg = AvgaeConfig {
            latent_dim: 7,
            encoder_layers: 4,
            decoder_layers: 2,
            ..AvgaeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = AvgaeParams::init(&cfg, 10, &mut rng);
        let shapes = |v: &[Tensor2]| v.iter().map(Tensor2::shape).collect::<Vec<_>>();
        assert_eq!(shapes(&p.mu), vec![(12, 7), (7, 7), (7, 7), (7, 7)]);
        assert_eq!(shapes(&p.sigma), shapes(&p.mu));
        assert_eq!(shapes(&p.decoder), vec![(7, 7), (7, 10)]);
        let limit = (6.0f64 / 19.0).sqrt();
        assert!(p.mu[0].data().iter().all(|v| v.abs() <= limit));
        assert_ne!(p.mu[0], p.sigma[0]);
    }

    /// Per-row dense MLP: what the model must reduce to when P = I.
    fn row_mlp(x: &[f64], ws: &[Tensor2], last: fn(f64) -> f64) -> Vec<f64> {
        let mut h = x.to_vec();
        for (k, w) in ws.iter().enumerate() {
            let mut out = vec![0.0; w.cols()];
            for (a, hv) in h.iter().enumerate() {
                for (b, o) in out.iter_mut().enumerate() {
                    *o += hv * w.get(a, b);
                }
            }
            let act: fn(f64) -> f64 = if k + 1 == ws.len() { last } else { |v| v.max(0.0) };
            h = out.into_iter().map(act).collect();
        }
        h
    }

    #[test]
    fn identity_operator_reduces_to_row_mlps() {
        let cfg = AvgaeConfig {
            latent_dim: 4,
            decoder_layers: 2,
            ..AvgaeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let params = AvgaeParams::init(&cfg, 5, &mut rng);
        let x = Tensor2::from_fn(3, 7, |i, j| ((i * 7 + j) as f64 * 0.37).sin());
        let p = PropagationOperator::identity(3);
        let (mu, sigma) = encode(&x, &p, &params).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let id = |v: f64| v;
        for i in 0..3 {
            let want_mu = row_mlp(x.row(i), &params.mu, id);
            let want_sigma = row_mlp(x.row(i), &params.sigma, sig);
            for d in 0..4 {
                assert!((mu.get(i, d) - want_mu[d]).abs() < 1e-12);
                assert!((sigma.get(i, d) - want_sigma[d]).abs() < 1e-12);
            }
        }
        let scaling = InputScaling {
            value_shift: 1.0,
            value_scale: 2.0,
            lat_min: 0.0,
            lat_span: 1.0,
            lon_min: 0.0,
            lon_span: 1.0,
        };
        let out = decode(&mu, &p, &params, &scaling).unwrap();
        for i in 0..3 {
            let want = row_mlp(mu.row(i), &params.decoder, id);
            for (j, w) in want.iter().enumerate() {
                assert!((out.get(i, j) - (2.0 * w + 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node_rows_are_independent() {
        let cfg = AvgaeConfig {
            latent_dim: 4,
            ..AvgaeConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = AvgaeParams::init(&cfg, 3, &mut rng);
        let x = Tensor2::from_fn(3, 5, |i, j| (i + j) as f64 * 0.1);
        let mut x2 = x.clone();
        x2.set(2, 1, 9.0);
        let p = PropagationOperator::identity(3);
        let (a, _) = encode(&x, &p, &params).unwrap();
        let (b, _) = encode(&x2, &p, &params).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn reparameterize_behaviour() {
        let mu = Tensor2::from_fn(3, 2, |i, j| (i as f64) - (j as f64));
        let tiny = Tensor2::filled(3, 2, 1e-300);
        let z = reparameterize(&mu, &tiny, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(z.max_abs_diff(&mu) < 1e-250);
        let s = Tensor2::filled(3, 2, 0.5);
        let a = reparameterize(&mu, &s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = reparameterize(&mu, &s, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert!(reparameterize(&mu, &Tensor2::zeros(3, 2), &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn reparameterized_mean_matches_mu() {
        let mu = Tensor2::from_rows(&[vec![1.5, -0.7]]).unwrap();
        let sigma = Tensor2::from_rows(&[vec![0.3, 0.9]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 100_000;
        let mut sums = [0.0; 2];
        for _ in 0..draws {
            let z = reparameterize(&mu, &sigma, &mut rng).unwrap();
            sums[0] += z.data()[0];
            sums[1] += z.data()[1];
        }
        for (d, s) in sums.iter().enumerate() {
            let mean = s / draws as f64;
            let se = sigma.data()[d] / (draws as f64).sqrt();
            assert!((mean - mu.data()[d]).abs() < 3.0 * se, "dim {d}: {mean}");
        }
    }

    #[test]
    fn input_layout() {
        let o = GeoPoint::new(51.0, 4.0).unwrap();
        let obs = ObservationMatrix::new(
            t(&[vec![10.0, 0.0], vec![0.0, 30.0]]),
            vec![true, false, false, true],
            vec![o, o.offset(100.0, 100.0).unwrap()],
            vec![0, 3600],
        )
        .unwrap();
        let s = InputScaling::fit(&obs, true);
        assert_eq!((s.value_shift, s.value_scale), (20.0, 10.0));
        let x = s.build_input(&obs);
        assert_eq!(x.to_rows(), vec![vec![-1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 1.0, 1.0]]);
        let raw = InputScaling::fit(&obs, false);
        assert_eq!(raw.build_input(&obs).row(0)[0], 10.0);
    }
}
