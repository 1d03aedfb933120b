//! Central finite-difference verification of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::graph::{Graph, Var};
use crate::autodiff::params::{Bound, ParamStore};
use crate::autodiff::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients below this size are compared absolutely: central differences
/// cannot resolve them, and some (attention key biases) are exactly zero.
pub const REL_ERR_FLOOR: f64 = 1e-5;

fn rel_err(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / (ad.abs() + fd.abs()).max(REL_ERR_FLOOR)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Argument(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

fn scalar_of(g: &Graph, y: Var) -> Result<f64> {
    let v = g.value(y);
    if v.numel() != 1 {
        return Err(Error::Argument(format!(
            "function under check must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.item())
}

/// Maximum relative error between the backward-pass gradient of `f` at
/// `point` and central differences with step `eps`, over all coordinates.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let x = g.input(point.clone(), true);
    let y = f(&mut g, x)?;
    scalar_of(&g, y)?;
    let analytic = g.backward(y)?.wrt(x).cloned().expect("input leaf has a gradient");

    let eval = |p: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(p, false);
        let y = f(&mut g, x)?;
        scalar_of(&g, y)
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic.data()[i], fd));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct ParamCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub coordinates: usize,
}

/// Finite-difference check of the gradient of a scalar loss with respect to
/// every trainable parameter of `store`.
///
/// With `per_param = Some(k)`, at most `k` coordinates per parameter are
/// checked, chosen by `seed`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    eps: f64,
    per_param: Option<usize>,
    seed: u64,
) -> Result<ParamCheckReport>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let y = f(&mut g, &bound)?;
    scalar_of(&g, y)?;
    let grads = g.backward(y)?;
    let mut analytic: Vec<Option<Tensor>> = vec![None; store.len()];
    for (k, t) in grads.params() {
        match &mut analytic[k] {
            Some(acc) => acc.add_assign(t),
            slot => *slot = Some(t.clone()),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let eval = |work: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let bound = work.bind(&mut g);
        let y = f(&mut g, &bound)?;
        scalar_of(&g, y)
    };
    let mut report = ParamCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        coordinates: 0,
    };
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let n = p.value.numel();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let ad = analytic[id.0].clone().unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()));
        for i in coords {
            let orig = p.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let e = rel_err(ad.data()[i], (up - down) / (2.0 * eps));
            report.coordinates += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = p.name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

type Primitive = fn(&mut Graph, Var, &Consts) -> Result<Var>;

/// Fixed operands shared by the primitive checks at one random point.
struct Consts {
    other: Tensor,
    right: Tensor,
    weights: Tensor,
    weights_t: Tensor,
    row: Tensor,
}

fn weighted(g: &mut Graph, y: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(y, wv)?;
    Ok(g.sum_all(p))
}

fn fit(g: &mut Graph, y: Var, c: &Consts) -> Result<Var> {
    // weight whatever comes out with a deterministic pattern of matching size
    let shape = g.value(y).shape().to_vec();
    let n = g.value(y).numel();
    let w: Vec<f64> = c.weights.data().iter().cycle().take(n).copied().collect();
    weighted(g, y, &Tensor::new(shape, w)?)
}

fn primitives() -> Vec<(&'static str, Primitive)> {
    vec![
        ("matmul_left", |g, x, c| {
            let r = g.constant(c.right.clone());
            let y = g.matmul(x, r)?;
            fit(g, y, c)
        }),
        ("matmul_right", |g, x, c| {
            let l = g.constant(c.weights_t.clone());
            let y = g.matmul(l, x)?;
            fit(g, y, c)
        }),
        ("matmul_self", |g, x, c| {
            let t = g.transpose(x)?;
            let y = g.matmul(x, t)?;
            fit(g, y, c)
        }),
        ("add", |g, x, c| {
            let o = g.constant(c.other.clone());
            let y = g.add(x, o)?;
            weighted(g, y, &c.weights)
        }),
        ("add_bias", |g, x, c| {
            let o = g.constant(c.other.clone());
            let row = g.slice(x, 0, 1, 2)?;
            let y = g.add_bias(o, row)?;
            weighted(g, y, &c.weights)
        }),
        ("mul", |g, x, c| {
            let y = g.mul(x, x)?;
            weighted(g, y, &c.weights)
        }),
        ("scale", |g, x, c| {
            let y = g.scale(x, -2.5);
            weighted(g, y, &c.weights)
        }),
        ("transpose", |g, x, c| {
            let y = g.transpose(x)?;
            weighted(g, y, &c.weights_t)
        }),
        ("concat_rows", |g, x, c| {
            let o = g.constant(c.other.clone());
            let y = g.concat(&[o, x], 0)?;
            fit(g, y, c)
        }),
        ("concat_cols", |g, x, c| {
            let o = g.constant(c.other.clone());
            let y = g.concat(&[x, o, x], 1)?;
            fit(g, y, c)
        }),
        ("slice_rows", |g, x, c| {
            let y = g.slice(x, 0, 1, 3)?;
            fit(g, y, c)
        }),
        ("slice_cols", |g, x, c| {
            let y = g.slice(x, 1, 2, 5)?;
            fit(g, y, c)
        }),
        ("softmax_rows", |g, x, c| {
            let y = g.softmax(x, 1)?;
            weighted(g, y, &c.weights)
        }),
        ("softmax_cols", |g, x, c| {
            let y = g.softmax(x, 0)?;
            weighted(g, y, &c.weights)
        }),
        ("log_softmax_rows", |g, x, c| {
            let y = g.log_softmax(x, 1)?;
            weighted(g, y, &c.weights)
        }),
        ("log_softmax_cols", |g, x, c| {
            let y = g.log_softmax(x, 0)?;
            weighted(g, y, &c.weights)
        }),
        ("layer_norm_input", |g, x, c| {
            let gamma = g.constant(c.row.clone());
            let beta = g.constant(c.row.clone());
            let y = g.layer_norm(x, gamma, beta, 1e-5)?;
            weighted(g, y, &c.weights)
        }),
        ("layer_norm_affine", |g, x, c| {
            let gamma = g.slice(x, 0, 0, 1)?;
            let beta = g.slice(x, 0, 2, 3)?;
            let o = g.constant(c.other.clone());
            let y = g.layer_norm(o, gamma, beta, 1e-5)?;
            weighted(g, y, &c.weights)
        }),
        ("gelu", |g, x, c| {
            let y = g.gelu(x);
            weighted(g, y, &c.weights)
        }),
        ("embedding", |g, x, c| {
            let y = g.embedding(x, &[2, 0, 2, 3])?;
            fit(g, y, c)
        }),
        ("mean_rows", |g, x, c| {
            let y = g.mean(x, 0)?;
            fit(g, y, c)
        }),
        ("mean_cols", |g, x, c| {
            let y = g.mean(x, 1)?;
            fit(g, y, c)
        }),
        ("sum_rows", |g, x, c| {
            let y = g.sum(x, 0)?;
            fit(g, y, c)
        }),
        ("sum_cols", |g, x, c| {
            let y = g.sum(x, 1)?;
            fit(g, y, c)
        }),
        ("select", |g, x, c| {
            let y = g.select(x, &[5, 0, 3, 1])?;
            fit(g, y, c)
        }),
    ]
}

/// Runs every primitive through [`grad_check`] at `points` random 4×6
/// inputs and reports the worst relative error per primitive.
pub fn check_primitives(seed: u64, points: usize, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    const R: usize = 4;
    const C: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<(&'static str, f64)> = primitives().iter().map(|(n, _)| (*n, 0.0)).collect();
    for _ in 0..points {
        let point = Tensor::randn([R, C], 1.0, &mut rng);
        let consts = Consts {
            other: Tensor::randn([R, C], 1.0, &mut rng),
            right: Tensor::randn([C, 3], 1.0, &mut rng),
            weights: Tensor::randn([R, C], 1.0, &mut rng),
            weights_t: Tensor::randn([C, R], 1.0, &mut rng),
            row: Tensor::randn([C], 1.0, &mut rng),
        };
        for (slot, (_, prim)) in worst.iter_mut().zip(primitives()) {
            let e = grad_check(|g, x| prim(g, x, &consts), &point, eps)?;
            slot.1 = slot.1.max(e);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_analytic_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([1, 8], 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new([1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let s = g.scale(v, 0.5);
                Ok(g.sum_all(s))
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn rejects_non_scalar_and_bad_step() {
        let x = Tensor::zeros([2, 2]);
        assert!(matches!(grad_check(|_, v| Ok(v), &x, 1e-5), Err(Error::Argument(_))));
        assert!(matches!(
            grad_check(|g, v| Ok(g.sum_all(v)), &x, 0.1),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn every_primitive_passes_at_ten_points() {
        for (name, err) in check_primitives(11, 10, 1e-5).unwrap() {
            assert!(err < 1e-5, "{name}: {err}");
        }
    }
}
