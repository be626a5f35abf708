//! Lloyd's K-means with k-means++ seeding, used to initialize the codebook
//! from warmed-up encoder outputs and to revive dead codes.

use std::collections::HashSet;

use log::warn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::VqPromptModel;
use crate::numerics::{Scalar, Tensor};
use crate::vq::Codebook;

pub const DEFAULT_MAX_ITER: usize = 10;
pub const DEFAULT_BUFFER_CAPACITY: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            max_iter: DEFAULT_MAX_ITER,
            seed,
        }
    }
}

/// Points stored row-major as `n` rows of width `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    pub data: Vec<f64>,
    pub dim: usize,
}

impl Points {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::shape("kmeans", format!("{} values for width {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "kmeans".into() });
        }
        Ok(Self { data, dim })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::shape("kmeans", "rows of unequal width".to_string()));
        }
        Self::new(rows.concat(), dim)
    }

    pub fn from_tensor<F: Scalar>(t: &Tensor<F>) -> Result<Self> {
        Self::new(t.data().iter().map(|v| v.as_f64()).collect(), t.cols())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn distinct(&self) -> usize {
        (0..self.len())
            .map(|i| self.row(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<HashSet<_>>()
            .len()
    }
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center and its squared distance; lowest index on ties.
fn nearest(p: &[f64], centers: &Points) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centers.len() {
        let d = sq(p, centers.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Points,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after each assignment step, then after
    /// the final center update.
    pub wcss: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Within-cluster sum of squares of `points` under `centers`.
pub fn wcss(points: &Points, centers: &Points) -> f64 {
    (0..points.len()).map(|i| nearest(points.row(i), centers).1).sum()
}

/// k-means++ seeding: the first center uniformly, each next one with
/// probability proportional to squared distance from the chosen set.
pub fn kmeans_pp(points: &Points, k: usize, rng: &mut impl Rng) -> Result<Points> {
    check(points, k)?;
    let n = points.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|i| sq(points.row(i), points.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                pick = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
        }
        let pick = pick.expect("k <= distinct points leaves positive mass");
        chosen.push(pick);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq(points.row(i), points.row(pick)));
        }
    }
    let data = chosen.iter().flat_map(|&i| points.row(i).iter().copied()).collect();
    Points::new(data, points.dim)
}

fn check(points: &Points, k: usize) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Invalid("k-means on an empty point set".into()));
    }
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let distinct = points.distinct();
    if k > distinct {
        return Err(Error::TooFewPoints { k, distinct });
    }
    Ok(())
}

/// Lloyd iterations from given initial centers.
pub fn lloyd_from(points: &Points, init: Points, max_iter: usize) -> Result<KMeansResult> {
    if init.dim != points.dim {
        return Err(Error::shape("kmeans", format!("centers width {} vs points {}", init.dim, points.dim)));
    }
    let (n, k, dim) = (points.len(), init.len(), points.dim);
    let mut centers = init;
    let mut assignments: Vec<usize> = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut dist = vec![0.0; n];
        let mut changed = false;
        for i in 0..n {
            let (j, d) = nearest(points.row(i), &centers);
            changed |= assignments[i] != j;
            assignments[i] = j;
            dist[i] = d;
        }
        repair_empty(&mut assignments, &mut dist, k);
        history.push(dist.iter().sum());
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignments[i];
            counts[j] += 1;
            for (s, &v) in sums[j * dim..(j + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            let c = counts[j] as f64;
            sums[j * dim..(j + 1) * dim].iter_mut().for_each(|s| *s /= c);
        }
        centers = Points::new(sums, dim)?;
    }
    history.push(
        (0..n)
            .map(|i| sq(points.row(i), centers.row(assignments[i])))
            .sum(),
    );
    Ok(KMeansResult {
        centers,
        assignments,
        wcss: history,
        iterations,
        converged,
    })
}

/// Gives every empty cluster the point currently farthest from its center,
/// taken from a cluster that keeps at least one other member.
fn repair_empty(assignments: &mut [usize], dist: &mut [f64], k: usize) {
    let mut counts = vec![0usize; k];
    for &a in assignments.iter() {
        counts[a] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let donor = (0..assignments.len())
            .filter(|&i| counts[assignments[i]] > 1)
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if dist[b] >= dist[i] => Some(b),
                _ => Some(i),
            });
        if let Some(i) = donor {
            counts[assignments[i]] -= 1;
            assignments[i] = j;
            counts[j] = 1;
            dist[i] = 0.0;
        }
    }
}

/// k-means++ seeding followed by Lloyd iterations.
///
/// ```
/// use vqprompt::kmeans::{lloyd_kmeans, KMeansConfig, Points};
/// let p = Points::new(vec![0.0, 1.0, 10.0, 11.0], 1).unwrap();
/// let r = lloyd_kmeans(&p, &KMeansConfig::new(2, 0)).unwrap();
/// let mut c = r.centers.data.clone();
/// c.sort_by(f64::total_cmp);
/// assert_eq!(c, vec![0.5, 10.5]);
/// ```
pub fn lloyd_kmeans(points: &Points, config: &KMeansConfig) -> Result<KMeansResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = kmeans_pp(points, config.k, &mut rng)?;
    lloyd_from(points, init, config.max_iter)
}

/// Ring buffer of recent continuous prompt rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeBuffer {
    capacity: usize,
    dim: usize,
    rows: Vec<Vec<f64>>,
    cursor: usize,
}

impl CodeBuffer {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            dim,
            rows: Vec::new(),
            cursor: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Appends one row, overwriting the oldest once full.
    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.dim);
        if self.rows.len() < self.capacity {
            self.rows.push(row);
        } else {
            self.rows[self.cursor] = row;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
    }

    pub fn extend<F: Scalar>(&mut self, t: &Tensor<F>) {
        for i in 0..t.rows() {
            self.push(t.row(i).iter().map(|v| v.as_f64()).collect());
        }
    }

    /// Contents from oldest to newest.
    pub fn points(&self) -> Result<Points> {
        let n = self.rows.len();
        let start = if n < self.capacity { 0 } else { self.cursor };
        let data = (0..n).flat_map(|i| self.rows[(start + i) % n].iter().copied()).collect();
        Points::new(data, self.dim)
    }
}

/// K-means centers of the continuous prompts of `sample` (token ids
/// without framing), as a fresh codebook with zeroed usage.
pub fn init_codebook<F: Scalar>(
    model: &VqPromptModel<F>,
    sample: &[Vec<usize>],
    k: usize,
    seed: u64,
) -> Result<Codebook<F>> {
    let mut data = Vec::new();
    let mut dim = model.config().d_model;
    for chunk in sample.chunks(64) {
        let r = model.continuous_prompts(chunk)?;
        dim = r.cols();
        data.extend(r.data().iter().map(|v| v.as_f64()));
    }
    let points = Points::new(data, dim)?;
    let have = points.len();
    if have < k {
        return Err(Error::TooFewPoints {
            k,
            distinct: points.distinct(),
        });
    }
    let res = lloyd_kmeans(&points, &KMeansConfig::new(k, seed))?;
    Codebook::new(Tensor::from_f64(&[k, dim], &res.centers.data)?)
}

/// Outcome of one revival check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revival {
    pub active_before: usize,
    pub dead: usize,
    /// Codes overwritten, ascending.
    pub replaced: Vec<usize>,
}

/// When fewer than `threshold` codes were used within `window` steps,
/// overwrites the dead codes with K-means centers of the buffer.
pub fn revive_dead_codes<F: Scalar>(
    codebook: &mut Codebook<F>,
    buffer: &CodeBuffer,
    threshold: usize,
    staleness: u64,
    window: u64,
    seed: u64,
) -> Result<Revival> {
    let active_before = codebook.active_count(window);
    let mut out = Revival {
        active_before,
        dead: 0,
        replaced: Vec::new(),
    };
    if active_before >= threshold {
        return Ok(out);
    }
    let dead = codebook.dead_codes(staleness);
    out.dead = dead.len();
    if dead.is_empty() {
        return Ok(out);
    }
    if buffer.is_empty() {
        return Err(Error::Invalid("revival triggered with an empty code buffer".into()));
    }
    let points = buffer.points()?;
    let k = dead.len().min(points.distinct());
    if k < dead.len() {
        warn!(
            "buffer holds {} distinct vectors for {} dead codes; replacing {k}",
            points.distinct(),
            dead.len()
        );
    }
    let res = lloyd_kmeans(&points, &KMeansConfig::new(k, seed))?;
    let values: Vec<F> = res.centers.data.iter().map(|&v| F::from_f64(v)).collect();
    for (j, &code) in dead.iter().take(k).enumerate() {
        codebook.replace_code(code, &values[j * points.dim..(j + 1) * points.dim])?;
        out.replaced.push(code);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sorted(c: &Points) -> Vec<Vec<f64>> {
        let mut rows: Vec<Vec<f64>> = (0..c.len()).map(|i| c.row(i).to_vec()).collect();
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows
    }

    #[test]
    fn k_equal_to_points_returns_points() {
        let p = Points::from_rows(&[vec![0.0, 1.0], vec![3.0, -2.0], vec![5.0, 5.0]]).unwrap();
        let r = lloyd_kmeans(&p, &KMeansConfig::new(3, 9)).unwrap();
        assert_eq!(sorted(&r.centers), sorted(&p));
        assert!(r.converged);
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let p = Points::from_rows(&[vec![1.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            lloyd_kmeans(&p, &KMeansConfig::new(3, 0)),
            Err(Error::TooFewPoints { k: 3, distinct: 2 })
        ));
    }

    #[test]
    fn empty_cluster_is_repaired() {
        // the middle center captures nothing at the first assignment
        let p = Points::from_rows(&[vec![0.0], vec![0.1], vec![10.0], vec![10.2]]).unwrap();
        let init = Points::from_rows(&[vec![0.05], vec![100.0], vec![10.1]]).unwrap();
        let r = lloyd_from(&p, init, 10).unwrap();
        let mut counts = [0; 3];
        r.assignments.iter().for_each(|&a| counts[a] += 1);
        assert!(counts.iter().all(|&c| c > 0));
        assert!(r.centers.data.iter().all(|&c| c != 100.0));
    }

    #[test]
    fn buffer_overwrites_oldest() {
        let mut b = CodeBuffer::new(3, 1);
        for v in 0..5 {
            b.push(vec![v as f64]);
        }
        assert_eq!(b.len(), 3);
        assert_eq!(b.points().unwrap().data, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn revival_respects_threshold_and_live_codes() {
        let codes = Tensor::from_f64(&[4, 1], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let mut cb = Codebook::<f64>::new(codes).unwrap();
        for _ in 0..10 {
            cb.record(&[0]);
            cb.advance();
        }
        let mut buf = CodeBuffer::new(8, 1);
        for v in [5.0, 6.0, 7.0, 8.0] {
            buf.push(vec![v]);
        }
        let before = cb.codes.tensor.clone();
        let r = revive_dead_codes(&mut cb, &buf, 1, 5, 5, 0).unwrap();
        assert!(r.replaced.is_empty());
        assert_eq!(cb.codes.tensor, before);

        let r = revive_dead_codes(&mut cb, &buf, 2, 5, 5, 0).unwrap();
        assert_eq!(r.replaced, vec![1, 2, 3]);
        assert_eq!(cb.code(0), &[0.0]);
        assert!(cb.code(1)[0] >= 5.0 && cb.code(3)[0] <= 8.0);
    }
}
