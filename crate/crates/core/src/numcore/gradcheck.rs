use super::tape::{Graph, NodeId};
use super::tensor::Tensor2;
use crate::error::{Error, Result};

/// Compares tape gradients against central differences.
///
/// `build` must construct the same scalar loss on a fresh graph from the
/// given parameter nodes; any randomness (dropout masks, noise) has to be
/// fixed outside of it. Returns the largest
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
pub fn check_gradients<F>(build: F, params: &[Tensor2], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor2]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<_> = values.iter().map(|v| g.param(v.clone())).collect();
        let loss = build(&mut g, &ids)?;
        let v = g
            .value(loss)
            .item()
            .ok_or_else(|| Error::invalid("loss is not a scalar"))?;
        if !v.is_finite() {
            return Err(Error::invalid(format!("non-finite loss {v}")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let ids: Vec<_> = params.iter().map(|v| g.param(v.clone())).collect();
    let loss = build(&mut g, &ids)?;
    if !g.value(loss).item().is_some_and(f64::is_finite) {
        return Err(Error::invalid("non-finite loss"));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor2> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            g.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor2::zeros(p.rows(), p.cols()))
        })
        .collect();

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..params[pi].len() {
            let orig = params[pi].data()[k];
            work[pi].data_mut()[k] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (grad.data()[k] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2 {
        Tensor2::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn quadratic_form_is_exact() {
        // f(x) = xᵀ A x with fixed A
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 4, 4);
        let x = random(&mut rng, 4, 1);
        let err = check_gradients(
            |g, p| {
                let a = g.constant(a.clone());
                let ax = g.matmul(a, p[0])?;
                let prod = g.mul(ax, p[0])?;
                Ok(g.sum(prod))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn abs_away_from_kink() {
        let x = Tensor2::from_rows(&[vec![0.5, -0.5]]).unwrap();
        let err = check_gradients(
            |g, p| {
                let a = g.abs(p[0]);
                Ok(g.sum(a))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn three_layer_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 5, 4);
        let params = vec![
            random(&mut rng, 4, 6),
            random(&mut rng, 1, 6),
            random(&mut rng, 6, 3),
            random(&mut rng, 3, 2),
        ];
        let mask = Arc::new(super::super::tape::dropout_mask(5, 6, 0.3, &mut rng));
        let err = check_gradients(
            |g, p| {
                let x = g.constant(x.clone());
                let h = g.matmul(x, p[0])?;
                let h = g.add_row(h, p[1])?;
                let h = g.sigmoid(h);
                let h = g.dropout(h, mask.clone())?;
                let h = g.matmul(h, p[2])?;
                let h = g.exp(h);
                let h2 = g.square(h);
                let h = g.add(h, h2)?;
                let h = g.log(h);
                let h = g.matmul(h, p[3])?;
                let h = g.scale(h, 0.7);
                let h = g.add_scalar(h, 3.0);
                let sl = g.slice_cols(h, 1, 1)?;
                let s1 = g.mean(h);
                let s2 = g.sum(sl);
                g.sub(s1, s2)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn non_finite_loss_errors() {
        let x = Tensor2::from_rows(&[vec![-1.0]]).unwrap();
        let r = check_gradients(
            |g, p| {
                let l = g.log(p[0]);
                Ok(g.sum(l))
            },
            &[x],
            1e-5,
        );
        assert!(r.is_err());
    }
}
