//! Codebook, nearest-code quantization, the two-sided VQ objective, and
//! straight-through gradient routing.
//!
//! Usage bookkeeping distinguishes two things per code: when it was last
//! *selected* (drives [`Codebook::utilization`]) and when it was last
//! *selected or (re)initialized* (drives [`Codebook::dead_codes`]). A freshly
//! initialized code is therefore neither active nor dead until either it gets
//! picked or `staleness` steps pass.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Parameter, Scalar, Tensor, Var};

pub const CODEBOOK_PARAM: &str = "codebook";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeUsage {
    pub select_count: u64,
    pub last_used_step: Option<u64>,
    pub born_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F> {
    pub codes: Parameter<F>,
    usage: Vec<CodeUsage>,
    current_step: u64,
}

/// Quantized rows and the code index each one came from.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPrompt<F> {
    pub vectors: Tensor<F>,
    pub indices: Vec<usize>,
}

/// Squared Euclidean distance.
pub fn sq_distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter()
        .zip(b)
        .fold(F::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

impl<F: Scalar> Codebook<F> {
    pub fn new(codes: Tensor<F>) -> Result<Self> {
        if codes.shape().len() != 2 || codes.shape()[0] < 2 {
            return Err(Error::Invalid(format!(
                "codebook must be [K >= 2, D], got {:?}",
                codes.shape()
            )));
        }
        if !codes.is_finite() {
            return Err(Error::NonFinite {
                op: "codebook".into(),
            });
        }
        let k = codes.shape()[0];
        Ok(Self {
            codes: Parameter::new(CODEBOOK_PARAM, codes),
            usage: vec![
                CodeUsage {
                    select_count: 0,
                    last_used_step: None,
                    born_step: 0,
                };
                k
            ],
            current_step: 0,
        })
    }

    /// Codes drawn i.i.d. from `N(0, std^2)`.
    pub fn random_normal(k: usize, width: usize, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let data = (0..k * width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::from_f64(z * std)
            })
            .collect();
        Self::new(Tensor::new(vec![k, width], data)?)
    }

    /// Rebuilds a codebook from persisted parts.
    pub fn from_parts(codes: Parameter<F>, usage: Vec<CodeUsage>, current_step: u64) -> Result<Self> {
        let mut cb = Self::new(codes.tensor)?;
        if usage.len() != cb.size() {
            return Err(Error::Invalid(format!(
                "{} usage records for {} codes",
                usage.len(),
                cb.size()
            )));
        }
        cb.codes.trainable = codes.trainable;
        cb.usage = usage;
        cb.current_step = current_step;
        Ok(cb)
    }

    pub fn size(&self) -> usize {
        self.codes.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.codes.tensor.shape()[1]
    }

    pub fn code(&self, k: usize) -> &[F] {
        self.codes.tensor.row(k)
    }

    pub fn usage(&self) -> &[CodeUsage] {
        &self.usage
    }

    pub fn current_step(&self) -> u64 {
        self.current_step
    }

    /// Moves the step clock forward by one training step.
    pub fn advance(&mut self) {
        self.current_step += 1;
    }

    /// Index of the closest code by squared L2 distance; ties go to the
    /// smallest index.
    pub fn nearest(&self, v: &[F]) -> usize {
        let mut best = 0;
        let mut best_d = sq_distance(v, self.code(0));
        for k in 1..self.size() {
            let d = sq_distance(v, self.code(k));
            if d < best_d {
                best = k;
                best_d = d;
            }
        }
        best
    }

    /// Quantizes each row of `r` without touching usage statistics.
    pub fn quantize_untracked(&self, r: &Tensor<F>) -> Result<QuantizedPrompt<F>> {
        if r.cols() != self.width() {
            return Err(Error::shape(
                "quantize",
                format!("rows of width {} for codes of width {}", r.cols(), self.width()),
            ));
        }
        if !r.is_finite() {
            return Err(Error::NonFinite {
                op: "quantize input".into(),
            });
        }
        let indices: Vec<usize> = (0..r.rows()).map(|i| self.nearest(r.row(i))).collect();
        let mut data = Vec::with_capacity(r.numel());
        for &k in &indices {
            data.extend_from_slice(self.code(k));
        }
        Ok(QuantizedPrompt {
            vectors: Tensor::new(r.shape().to_vec(), data)?,
            indices,
        })
    }

    /// Quantizes each row of `r` and records the selections at the current step.
    pub fn quantize(&mut self, r: &Tensor<F>) -> Result<QuantizedPrompt<F>> {
        let q = self.quantize_untracked(r)?;
        self.record(&q.indices);
        Ok(q)
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &k in indices {
            let u = &mut self.usage[k];
            u.select_count += 1;
            u.last_used_step = Some(self.current_step);
        }
    }

    /// Number of codes selected within the trailing `window` steps.
    pub fn active_count(&self, window: u64) -> usize {
        self.usage
            .iter()
            .filter(|u| {
                u.last_used_step
                    .is_some_and(|s| self.current_step - s < window.max(1))
            })
            .count()
    }

    /// Fraction of codes selected within the trailing `window` steps.
    pub fn utilization(&self, window: u64) -> f64 {
        self.active_count(window) as f64 / self.size() as f64
    }

    /// Codes idle (neither selected nor re-initialized) for at least `staleness` steps.
    pub fn dead_codes(&self, staleness: u64) -> Vec<usize> {
        let staleness = staleness.max(1);
        self.usage
            .iter()
            .enumerate()
            .filter(|(_, u)| {
                let seen = u.last_used_step.map_or(u.born_step, |s| s.max(u.born_step));
                self.current_step - seen >= staleness
            })
            .map(|(k, _)| k)
            .collect()
    }

    /// Overwrites code `k` and restarts its usage record at the current step.
    pub fn replace_code(&mut self, k: usize, values: &[F]) -> Result<()> {
        if values.len() != self.width() {
            return Err(Error::shape(
                "replace_code",
                format!("{} values for width {}", values.len(), self.width()),
            ));
        }
        self.codes.tensor.row_mut(k).copy_from_slice(values);
        self.usage[k] = CodeUsage {
            select_count: 0,
            last_used_step: None,
            born_step: self.current_step,
        };
        Ok(())
    }

    /// Clears usage statistics and the step clock.
    pub fn reset_usage(&mut self) {
        for u in &mut self.usage {
            *u = CodeUsage {
                select_count: 0,
                last_used_step: None,
                born_step: 0,
            };
        }
        self.current_step = 0;
    }

    pub fn total_selections(&self) -> u64 {
        self.usage.iter().map(|u| u.select_count).sum()
    }
}

/// The two halves of the VQ objective as plain numbers:
/// `(||sg(r) - q||^2, ||r - sg(q)||^2)`. They are equal in value and differ
/// only in where their gradients go.
pub fn vq_loss<F: Scalar>(r: &Tensor<F>, q: &Tensor<F>) -> Result<(f64, f64)> {
    if r.shape() != q.shape() {
        return Err(Error::shape(
            "vq_loss",
            format!("{:?} vs {:?}", r.shape(), q.shape()),
        ));
    }
    let d = sq_distance(r.data(), q.data()).as_f64();
    Ok((d, d))
}

/// Graph nodes produced by quantizing a prompt inside a computation.
#[derive(Debug, Clone)]
pub struct QuantizedVars {
    /// Prompt value passed downstream: equals the codes, routes gradient to `r`.
    pub prompt: Var,
    /// `||sg(r) - q||^2`; gradient reaches only the codebook.
    pub codebook_term: Var,
    /// `||r - sg(q)||^2`; gradient reaches only the encoder.
    pub commitment_term: Var,
    pub indices: Vec<usize>,
}

/// Records the VQ objective terms for continuous rows `r` against codes `q`.
pub fn vq_terms<F: Scalar>(g: &mut Graph<F>, r: Var, q: Var) -> Result<(Var, Var)> {
    let r_sg = g.stop_gradient(r)?;
    let q_sg = g.stop_gradient(q)?;
    let codebook_term = g.sq_dist(r_sg, q)?;
    let commitment_term = g.sq_dist(r, q_sg)?;
    Ok((codebook_term, commitment_term))
}

/// Quantizes the rows of `r` (a `[rows, D]` node) against `codebook`,
/// optionally recording usage, and wires up the straight-through prompt and
/// both VQ terms.
pub fn quantize_in_graph<F: Scalar>(
    g: &mut Graph<F>,
    r: Var,
    codebook: &mut Codebook<F>,
    track_usage: bool,
) -> Result<QuantizedVars> {
    let indices = if track_usage {
        codebook.quantize(g.value(r))?.indices
    } else {
        codebook.quantize_untracked(g.value(r))?.indices
    };
    let table = g.param(&codebook.codes)?;
    let q = g.embedding(table, &indices)?;
    let q = g.reshape(q, &g.shape(r).to_vec())?;
    let prompt = g.straight_through(r, q)?;
    let (codebook_term, commitment_term) = vq_terms(g, r, q)?;
    Ok(QuantizedVars {
        prompt,
        codebook_term,
        commitment_term,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn book(rows: &[&[f64]]) -> Codebook<f64> {
        let w = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Codebook::new(Tensor::new(vec![rows.len(), w], data).unwrap()).unwrap()
    }

    fn rows(v: &[&[f64]]) -> Tensor<f64> {
        let w = v[0].len();
        Tensor::new(vec![v.len(), w], v.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn exact_code_quantizes_to_itself() {
        let mut cb = book(&[&[0.0, 1.0], &[0.25, -3.5], &[2.0, 2.0]]);
        let r = rows(&[&[0.25, -3.5]]);
        let q = cb.quantize(&r).unwrap();
        assert_eq!(q.indices, vec![1]);
        assert_eq!(q.vectors, r);
        assert_eq!(vq_loss(&r, &q.vectors).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn ties_go_to_smallest_index() {
        let mut codes: Vec<Vec<f64>> = (0..6).map(|i| vec![10.0 + i as f64, 10.0]).collect();
        codes[2] = vec![1.0, 0.0];
        codes[5] = vec![-1.0, 0.0];
        let refs: Vec<&[f64]> = codes.iter().map(|c| c.as_slice()).collect();
        let cb = book(&refs);
        let q = cb.quantize_untracked(&rows(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(q.indices, vec![2]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Codebook::new(Tensor::<f64>::zeros(&[1, 3])).is_err());
        let cb = book(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert!(cb.quantize_untracked(&rows(&[&[0.0, 1.0, 2.0]])).is_err());
        assert!(cb.quantize_untracked(&rows(&[&[f64::NAN, 1.0]])).is_err());
    }

    #[test]
    fn vq_loss_hand_value() {
        let (a, b) = vq_loss(&rows(&[&[1.0, 0.0]]), &rows(&[&[0.0, 0.0]])).unwrap();
        assert_eq!((a, b), (1.0, 1.0));
    }

    #[test]
    fn utilization_counts_recent_selections() {
        let mut cb = Codebook::<f64>::random_normal(8, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(cb.utilization(200), 0.0);
        cb.record(&[0, 1, 2]);
        cb.advance();
        cb.record(&[2, 3, 4]);
        assert_eq!(cb.utilization(200), 5.0 / 8.0);
        cb.record(&[5, 6, 7]);
        assert_eq!(cb.utilization(1), 6.0 / 8.0);
        assert_eq!(cb.total_selections(), 9);
    }

    #[test]
    fn all_used_this_step_is_full_utilization() {
        let mut cb = Codebook::<f64>::random_normal(4, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        cb.record(&[0, 1, 2, 3]);
        assert_eq!(cb.utilization(1), 1.0);
    }

    #[test]
    fn dead_codes_after_idle_period() {
        let mut cb = Codebook::<f64>::random_normal(3, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(cb.dead_codes(5).is_empty());
        for _ in 0..5 {
            cb.record(&[0]);
            cb.advance();
        }
        assert_eq!(cb.dead_codes(5), vec![1, 2]);
        cb.replace_code(1, &[0.5, 0.5]).unwrap();
        assert_eq!(cb.dead_codes(5), vec![2]);
        assert_eq!(cb.usage()[1].select_count, 0);
    }
}
