//! Central finite-difference checks of analytic gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Per parameter tensor, at most this many coordinates are perturbed
    /// (chosen by a seeded draw); `usize::MAX` checks everything.
    pub max_coords: usize,
    pub seed: u64,
    pub fault: Option<&'static str>,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-5,
            max_coords: usize::MAX,
            seed: 0,
            fault: None,
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn scalar_of(g: &mut Graph, out: Var) -> Result<f64> {
    let out = if g.value(out).len() == 1 { out } else { g.sum_all(out) };
    let v = g.value(out).data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("gradcheck objective = {v}")));
    }
    Ok(v)
}

fn run_scalar(g: &mut Graph, out: Var) -> Result<Var> {
    let out = if g.value(out).len() == 1 { out } else { g.sum_all(out) };
    if !g.value(out).data()[0].is_finite() {
        return Err(Error::NonFinite("gradcheck objective".into()));
    }
    Ok(out)
}

fn pick_coords(n: usize, max: usize, rng: &mut Rng) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..max {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(max);
    idx.sort_unstable();
    idx
}

impl GradCheck {
    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn with_max_coords(mut self, max: usize) -> Self {
        self.max_coords = max;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_fault(mut self, fault: Option<&'static str>) -> Self {
        self.fault = fault;
        self
    }

    /// Max relative error of `d f / d x` for an input tensor `x`. Non-scalar
    /// outputs of `f` are summed.
    pub fn input<F>(&self, store: &ParamStore, x: &Tensor, f: F) -> Result<f64>
    where
        F: Fn(&mut Graph, Var) -> Result<Var>,
    {
        let mut g = Graph::new(store);
        if let Some(op) = self.fault {
            g.inject_fault(op);
        }
        let xv = g.input(x.clone());
        let out = f(&mut g, xv)?;
        let out = run_scalar(&mut g, out)?;
        let analytic = g
            .backward(out)
            .wrt(xv)
            .unwrap_or_else(|| Tensor::zeros(x.shape()));

        let eval = |t: Tensor| -> Result<f64> {
            let mut g = Graph::new(store);
            let v = g.input(t);
            let out = f(&mut g, v)?;
            scalar_of(&mut g, out)
        };
        let mut rng = Rng::new(self.seed);
        let mut worst = 0f64;
        for i in pick_coords(x.len(), self.max_coords, &mut rng) {
            let mut plus = x.clone();
            plus.data_mut()[i] += self.step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= self.step;
            let numeric = (eval(plus)? - eval(minus)?) / (2.0 * self.step);
            worst = worst.max(rel_error(analytic.data()[i], numeric));
        }
        Ok(worst)
    }

    /// Max relative error over the gradients of the given parameters (all
    /// trainable parameters when `ids` is empty). Returns the error and the
    /// name of the worst parameter.
    pub fn params<F>(&self, store: &ParamStore, ids: &[ParamId], f: F) -> Result<(f64, String)>
    where
        F: Fn(&mut Graph) -> Result<Var>,
    {
        let ids: Vec<ParamId> = if ids.is_empty() {
            store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
        } else {
            ids.to_vec()
        };
        let mut g = Graph::new(store);
        if let Some(op) = self.fault {
            g.inject_fault(op);
        }
        let out = f(&mut g)?;
        let out = run_scalar(&mut g, out)?;
        let grads = g.backward(out).into_param_grads(store.len());

        let mut work = store.clone();
        let mut rng = Rng::new(self.seed);
        let mut worst = (0f64, String::new());
        for id in ids {
            let n = store.tensor(id).len();
            for i in pick_coords(n, self.max_coords, &mut rng) {
                let orig = store.tensor(id).data()[i];
                work.tensor_mut(id).data_mut()[i] = orig + self.step;
                let fp = {
                    let mut g = Graph::new(&work);
                    let out = f(&mut g)?;
                    scalar_of(&mut g, out)?
                };
                work.tensor_mut(id).data_mut()[i] = orig - self.step;
                let fm = {
                    let mut g = Graph::new(&work);
                    let out = f(&mut g)?;
                    scalar_of(&mut g, out)?
                };
                work.tensor_mut(id).data_mut()[i] = orig;
                let numeric = (fp - fm) / (2.0 * self.step);
                let analytic = grads.get(id).map_or(0.0, |t| t.data()[i]);
                let e = rel_error(analytic, numeric);
                if e > worst.0 || worst.1.is_empty() {
                    worst = (e.max(worst.0), store.get(id).name.clone());
                }
            }
        }
        Ok(worst)
    }
}

/// Gradient check of `f` with respect to an input tensor using default settings.
pub fn finite_diff_gradcheck<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let store = ParamStore::new();
    GradCheck::default().with_step(step).input(&store, x, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let store = ParamStore::new();
        let x = Tensor::scalar(3.0);
        let mut g = Graph::new(&store);
        let v = g.input(x.clone());
        let y = g.mul(v, v);
        let grad = g.backward(y).wrt(v).unwrap();
        assert_eq!(grad.data()[0], 6.0);
        let err = finite_diff_gradcheck(|g, x| Ok(g.mul(x, x)), &x, 1e-5).unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn sum_has_unit_gradient() {
        let store = ParamStore::new();
        let x = Rng::new(1).normal_tensor(&[3, 4], 1.0);
        let mut g = Graph::new(&store);
        let v = g.input(x);
        let s = g.sum_all(v);
        let grad = g.backward(s).wrt(v).unwrap();
        assert!(grad.data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::row(&[f64::NAN]);
        assert!(matches!(
            finite_diff_gradcheck(|g, x| Ok(g.scale(x, 1.0)), &x, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn injected_fault_is_detected() {
        let x = Rng::new(2).normal_tensor(&[2, 3], 1.0);
        let store = ParamStore::new();
        let ok = GradCheck::default().input(&store, &x, |g, x| Ok(g.tanh(x))).unwrap();
        let bad = GradCheck::default()
            .with_fault(Some("tanh"))
            .input(&store, &x, |g, x| Ok(g.tanh(x)))
            .unwrap();
        assert!(ok < 1e-6);
        assert!(bad > 1e-2);
    }
}
