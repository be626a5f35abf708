//! Central finite-difference verification of reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamStore, Parameter, Var};
use crate::error::{Error, Result};

/// Anything that exposes a list of parameters.
pub trait ParamSet<F> {
    fn params(&self) -> Vec<&Parameter<F>>;
    fn params_mut(&mut self) -> Vec<&mut Parameter<F>>;
}

impl<F: super::Scalar> ParamSet<F> for ParamStore<F> {
    fn params(&self) -> Vec<&Parameter<F>> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<F>> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// Parameter and flat index where the max was attained.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    /// Frozen parameters; their analytic gradient is zero by contract and
    /// they are not perturbed.
    pub frozen: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per parameter (all of them when smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: 16,
            seed: 0,
        }
    }
}

fn scalar_value<S>(state: &S, build: &impl Fn(&S, &mut Graph<f64>) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let root = build(state, &mut g)?;
    let v = g.value(root);
    if v.numel() != 1 {
        return Err(Error::NonScalarRoot(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compares analytic gradients of the scalar built by `build` against
/// central differences `(f(w + h) - f(w - h)) / 2h` on sampled coordinates.
pub fn finite_difference_check<S, B>(state: &S, build: B, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    S: ParamSet<f64> + Clone,
    B: Fn(&S, &mut Graph<f64>) -> Result<Var>,
{
    if !(opts.step > 0.0 && opts.step <= 1e-2) {
        return Err(Error::Invalid(format!(
            "finite-difference step {} outside (0, 1e-2]",
            opts.step
        )));
    }
    let mut g = Graph::new();
    let root = build(state, &mut g)?;
    let grads = g.backward(root)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        frozen: Vec::new(),
    };
    let mut work = state.clone();
    let n_params = state.params().len();
    for pi in 0..n_params {
        let (name, numel, trainable) = {
            let p = state.params()[pi];
            (p.name.clone(), p.tensor.numel(), p.trainable)
        };
        if !trainable {
            report.frozen.push(name);
            continue;
        }
        let analytic = grads.param(&name).map(|t| t.data().to_vec());
        let coords: Vec<usize> = if numel <= opts.coords_per_param {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, opts.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = work.params()[pi].tensor.data()[i];
            work.params_mut()[pi].tensor.data_mut()[i] = orig + opts.step;
            let plus = scalar_value(&work, &build)?;
            work.params_mut()[pi].tensor.data_mut()[i] = orig - opts.step;
            let minus = scalar_value(&work, &build)?;
            work.params_mut()[pi].tensor.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.as_ref().map_or(0.0, |g| g[i]);
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if !rel.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("finite difference of `{name}`[{i}]"),
                });
            }
            report.coords_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
