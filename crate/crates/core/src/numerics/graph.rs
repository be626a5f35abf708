//! Tape of recorded operations and its reverse sweep.
//!
//! Supported operations, grouped the way the model uses them:
//!
//! * linear algebra: [`Graph::matmul`] (2-D, or batched 3-D, with optional
//!   transposes)
//! * addition family: [`Graph::add`], [`Graph::sub`], [`Graph::add_row`],
//!   [`Graph::mul`], [`Graph::scale`], [`Graph::sum`]
//! * elementwise nonlinearities: [`Graph::relu`], [`Graph::gelu`], [`Graph::tanh`]
//! * [`Graph::softmax`] and [`Graph::layer_norm`] over the trailing axis
//! * [`Graph::embedding`] row lookup and [`Graph::concat`]
//! * losses: [`Graph::sq_dist`] and [`Graph::cross_entropy`]
//! * gradient routing: [`Graph::stop_gradient`], [`Graph::straight_through`]
//! * data movement: [`Graph::reshape`], [`Graph::permute`], [`Graph::repeat`]
//!
//! Gradients accumulate by summation over every use of a value.

use std::collections::BTreeMap;

use super::gemm::strides;
use super::{Parameter, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    Sum(Var),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    SqDist(Var, Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
    StopGradient,
    StraightThrough { r: Var },
    Reshape(Var),
    Permute { a: Var, perm: Vec<usize> },
    Repeat { a: Var, times: usize },
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Sum(..) => "sum",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Tanh(..) => "tanh",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Concat { .. } => "concat",
            Op::SqDist(..) => "sq_dist",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough { .. } => "straight_through",
            Op::Reshape(..) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Repeat { .. } => "repeat",
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug)]
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    params: BTreeMap<String, Var>,
    variables: Vec<Var>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<F> {
    params: BTreeMap<String, Tensor<F>>,
    frozen: Vec<String>,
    variables: BTreeMap<usize, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    /// Gradient of a trainable parameter that took part in the computation.
    pub fn param(&self, name: &str) -> Option<&Tensor<F>> {
        self.params.get(name)
    }

    /// Gradient for `name`, materializing zeros for frozen parameters.
    pub fn param_or_zeros(&self, p: &Parameter<F>) -> Tensor<F> {
        self.params
            .get(&p.name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(p.tensor.shape()))
    }

    /// Whether `name` took part in the computation as a frozen parameter.
    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|n| n == name)
    }

    /// Gradient with respect to a leaf created by [`Graph::variable`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.variables.get(&v.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Runs `build` on a fresh graph, differentiates the scalar it returns, and
/// hands back the value together with all parameter gradients.
pub fn evaluate_with_gradients<F, B>(build: B) -> Result<(Tensor<F>, Gradients<F>)>
where
    F: Scalar,
    B: FnOnce(&mut Graph<F>) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = build(&mut g)?;
    let grads = g.backward(root)?;
    Ok((g.value(root).clone(), grads))
}

fn same_shape<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    // tanh approximation
    let c = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let one = F::one();
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + F::from_f64(3.0) * k * x * x);
    (y, dy)
}

fn permuted_shape(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    perm.iter().map(|&p| shape[p]).collect()
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Writes `dst[j] = src[gather(j)]` for the permutation `perm` of `shape`.
fn permute_into<F: Copy>(src: &[F], shape: &[usize], perm: &[usize], dst: &mut [F], acc: bool)
where
    F: std::ops::Add<Output = F>,
{
    let in_strides = row_major_strides(shape);
    let out_shape = permuted_shape(shape, perm);
    let nd = out_shape.len();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for slot in dst.iter_mut() {
        if acc {
            *slot = *slot + src[offset];
        } else {
            *slot = src[offset];
        }
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            variables: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant input; receives no gradient.
    pub fn leaf(&mut self, t: Tensor<F>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<F>) -> Result<Var> {
        let v = self.push(t, Op::Leaf, true)?;
        self.variables.push(v);
        Ok(v)
    }

    /// Registers a parameter; repeated registration of the same name returns
    /// the same node so uses accumulate into one gradient.
    pub fn param(&mut self, p: &Parameter<F>) -> Result<Var> {
        if let Some(&v) = self.params.get(&p.name) {
            return Ok(v);
        }
        let v = self.push(p.tensor.clone(), Op::Param, p.trainable)?;
        self.params.insert(p.name.clone(), v);
        Ok(v)
    }

    /// `op(a) @ op(b)` for 2-D operands, or per batch entry for 3-D operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, a2, b2) = match (sa.len(), sb.len()) {
            (2, 2) => (1, &sa[..], &sb[..]),
            (3, 3) if sa[0] == sb[0] => (sa[0], &sa[1..], &sb[1..]),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("unsupported operand ranks {sa:?} x {sb:?}"),
                ))
            }
        };
        let (m, ka) = if ta { (a2[1], a2[0]) } else { (a2[0], a2[1]) };
        let (kb, n) = if tb { (b2[1], b2[0]) } else { (b2[0], b2[1]) };
        if ka != kb {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {sa:?} (t={ta}) x {sb:?} (t={tb})"),
            ));
        }
        let k = ka;
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (rsa, csa) = strides(a2[1], ta);
            let (rsb, csb) = strides(b2[1], tb);
            for i in 0..batch {
                F::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    rsa,
                    csa,
                    &bv[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    F::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, ta, tb }, ng)
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        same_shape(op_name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(t, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a vector to every row (trailing axis) of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_row",
                format!("bias {:?} for rows of width {n}", self.shape(bias)),
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(&bv) {
                *o = *o + b;
            }
        }
        let ng = self.needs(x) || self.needs(bias);
        self.push(t, Op::AddRow(x, bias), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = F::from_f64(c);
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v = *v * c);
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self
            .value(a)
            .data()
            .iter()
            .fold(F::zero(), |acc, &v| acc + v);
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    fn map(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let ng = self.needs(a);
        self.push(t, op, ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |v| v.max(F::zero()), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |v| gelu_parts(v).0, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, |v| v.tanh(), Op::Tanh(a))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).cols();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(n) {
            let mx = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
            let mut z = F::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let ng = self.needs(a);
        self.push(t, Op::Softmax(a), ng)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} for rows of width {n}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let eps = F::from_f64(eps);
        let nf = F::from_f64(n as f64);
        let xv = self.value(x);
        let rows = xv.rows();
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        for (r, (src, dst)) in xv.data().chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
            let mean = src.iter().fold(F::zero(), |a, &v| a + v) / nf;
            let var = src
                .iter()
                .fold(F::zero(), |a, &v| a + (v - mean) * (v - mean))
                / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - mean) * rs;
            }
        }
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xhat.clone();
        for row in out.chunks_mut(n) {
            for ((o, &g), &b) in row.iter_mut().zip(gv).zip(bv) {
                *o = *o * g + b;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// Gathers rows of a 2-D `table`; output is `[ids.len(), width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape(
                "embedding",
                format!("table must be 2-D, got {:?}", tv.shape()),
            ));
        }
        let (rows, width) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfRange {
                    what: "embedding table",
                    index: id,
                    size: rows,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let t = Tensor::new(vec![ids.len(), width], out)?;
        let ng = self.needs(table);
        self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Squared Euclidean distance summed over all entries: `sum((a - b)^2)`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sq_dist", self.value(a), self.value(b))?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .fold(F::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y));
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(s), Op::SqDist(a, b), ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[n, vocab]`), over rows where `mask` is true.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.shape()[0] != targets.len() || mask.len() != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!(
                    "logits {:?}, {} targets, {} mask entries",
                    lv.shape(),
                    targets.len(),
                    mask.len()
                ),
            ));
        }
        let v = lv.shape()[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::shape("cross_entropy", "every position is masked"));
        }
        let mut probs = vec![F::zero(); lv.numel()];
        let mut total = F::zero();
        for (i, (row, prow)) in lv.data().chunks(v).zip(probs.chunks_mut(v)).enumerate() {
            let mx = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut z = F::zero();
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (x - mx).exp();
                z = z + *p;
            }
            for p in prow.iter_mut() {
                *p = *p / z;
            }
            if mask[i] {
                let t = targets[i];
                if t >= v {
                    return Err(Error::OutOfRange {
                        what: "cross_entropy targets",
                        index: t,
                        size: v,
                    });
                }
                total = total - (row[t] - mx - z.ln());
            }
        }
        let mean = total / F::from_f64(count as f64);
        let ng = self.needs(logits);
        self.push(
            Tensor::scalar(mean),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            ng,
        )
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).clone();
        self.push(t, Op::StopGradient, false)
    }

    /// Forwards the value of `q` and passes incoming gradient to `r` unchanged.
    pub fn straight_through(&mut self, r: Var, q: Var) -> Result<Var> {
        same_shape("straight_through", self.value(r), self.value(q))?;
        let t = self.value(q).clone();
        let ng = self.needs(r);
        self.push(t, Op::StraightThrough { r }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let ng = self.needs(a);
        self.push(t, Op::Reshape(a), ng)
    }

    /// Reorders axes so that output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let mut out = vec![F::zero(); self.value(a).numel()];
        permute_into(self.value(a).data(), &shape, perm, &mut out, false);
        let t = Tensor::new(permuted_shape(&shape, perm), out)?;
        let ng = self.needs(a);
        self.push(
            t,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            ng,
        )
    }

    /// Stacks `times` copies of `a` along a new leading axis.
    pub fn repeat(&mut self, a: Var, times: usize) -> Result<Var> {
        let src = self.value(a);
        let mut shape = vec![times];
        shape.extend_from_slice(src.shape());
        let mut out = Vec::with_capacity(times * src.numel());
        for _ in 0..times {
            out.extend_from_slice(src.data());
        }
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(a);
        self.push(t, Op::Repeat { a, times }, ng)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop_node(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }

        let mut out = Gradients::default();
        for (name, &v) in &self.params {
            if self.nodes[v.0].needs_grad {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| vec![F::zero(); self.value(v).numel()]);
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
                out.params
                    .insert(name.clone(), Tensor::new(self.shape(v).to_vec(), g)?);
            } else {
                out.frozen.push(name.clone());
            }
        }
        for &v in &self.variables {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| vec![F::zero(); self.value(v).numel()]);
            out.variables
                .insert(v.0, Tensor::new(self.shape(v).to_vec(), g)?);
        }
        Ok(out)
    }

    fn backprop_node(&self, node: &Node<F>, dy: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param | Op::StopGradient => {}
            Op::MatMul { a, b, ta, tb } => self.back_matmul(*a, *b, *ta, *tb, dy, grads),
            Op::Add(a, b) => {
                self.accum(*a, grads, |g| add_into(g, dy));
                self.accum(*b, grads, |g| add_into(g, dy));
            }
            Op::Sub(a, b) => {
                self.accum(*a, grads, |g| add_into(g, dy));
                self.accum(*b, grads, |g| {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g - d)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum(*a, grads, |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(bv) {
                        *g = *g + d * y;
                    }
                });
                self.accum(*b, grads, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                        *g = *g + d * x;
                    }
                });
            }
            Op::AddRow(x, bias) => {
                self.accum(*x, grads, |g| add_into(g, dy));
                let n = self.value(*bias).numel();
                self.accum(*bias, grads, |g| {
                    for row in dy.chunks(n) {
                        add_into(g, row);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accum(*a, grads, |g| {
                    g.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d * *c)
                });
            }
            Op::Sum(a) => {
                let d = dy[0];
                self.accum(*a, grads, |g| g.iter_mut().for_each(|g| *g = *g + d));
            }
            Op::Relu(a) => {
                let xv = self.value(*a).data();
                self.accum(*a, grads, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(xv) {
                        if x > F::zero() {
                            *g = *g + d;
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                self.accum(*a, grads, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(xv) {
                        *g = *g + d * gelu_parts(x).1;
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = node.value.data();
                self.accum(*a, grads, |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(yv) {
                        *g = *g + d * (F::one() - y * y);
                    }
                });
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let yv = node.value.data();
                self.accum(*a, grads, |g| {
                    for ((grow, drow), yrow) in g.chunks_mut(n).zip(dy.chunks(n)).zip(yv.chunks(n)) {
                        let dot = drow
                            .iter()
                            .zip(yrow)
                            .fold(F::zero(), |acc, (&d, &y)| acc + d * y);
                        for ((g, &d), &y) in grow.iter_mut().zip(drow).zip(yrow) {
                            *g = *g + y * (d - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gv = self.value(*gamma).data();
                self.accum(*gamma, grads, |g| {
                    for (drow, xrow) in dy.chunks(n).zip(xhat.chunks(n)) {
                        for ((g, &d), &xh) in g.iter_mut().zip(drow).zip(xrow) {
                            *g = *g + d * xh;
                        }
                    }
                });
                self.accum(*beta, grads, |g| {
                    for drow in dy.chunks(n) {
                        add_into(g, drow);
                    }
                });
                let nf = F::from_f64(n as f64);
                self.accum(*x, grads, |g| {
                    for (r, ((grow, drow), xrow)) in g
                        .chunks_mut(n)
                        .zip(dy.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut mean_d = F::zero();
                        let mut mean_dx = F::zero();
                        for ((&d, &gm), &xh) in drow.iter().zip(gv).zip(xrow) {
                            let dxh = d * gm;
                            mean_d = mean_d + dxh;
                            mean_dx = mean_dx + dxh * xh;
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for (((g, &d), &gm), &xh) in grow.iter_mut().zip(drow).zip(gv).zip(xrow) {
                            *g = *g + rstd[r] * (d * gm - mean_d - xh * mean_dx);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let w = node.value.cols();
                self.accum(*table, grads, |g| {
                    for (&id, drow) in ids.iter().zip(dy.chunks(w)) {
                        add_into(&mut g[id * w..(id + 1) * w], drow);
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut start = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    self.accum(p, grads, |g| {
                        for o in 0..outer {
                            add_into(
                                &mut g[o * chunk..(o + 1) * chunk],
                                &dy[o * row + start..o * row + start + chunk],
                            );
                        }
                    });
                    start += chunk;
                }
            }
            Op::SqDist(a, b) => {
                let two = F::from_f64(2.0) * dy[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum(*a, grads, |g| {
                    for ((g, &x), &y) in g.iter_mut().zip(av).zip(bv) {
                        *g = *g + two * (x - y);
                    }
                });
                self.accum(*b, grads, |g| {
                    for ((g, &x), &y) in g.iter_mut().zip(av).zip(bv) {
                        *g = *g - two * (x - y);
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = dy[0] / F::from_f64(*count as f64);
                self.accum(*logits, grads, |g| {
                    for (i, (grow, prow)) in g.chunks_mut(v).zip(probs.chunks(v)).enumerate() {
                        if !mask[i] {
                            continue;
                        }
                        for (g, &p) in grow.iter_mut().zip(prow) {
                            *g = *g + scale * p;
                        }
                        grow[targets[i]] = grow[targets[i]] - scale;
                    }
                });
            }
            Op::StraightThrough { r } => self.accum(*r, grads, |g| add_into(g, dy)),
            Op::Reshape(a) => self.accum(*a, grads, |g| add_into(g, dy)),
            Op::Permute { a, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let out_shape = node.value.shape();
                self.accum(*a, grads, |g| permute_into(dy, out_shape, &inverse, g, true));
            }
            Op::Repeat { a, times } => {
                let n = self.value(*a).numel();
                self.accum(*a, grads, |g| {
                    for t in 0..*times {
                        add_into(g, &dy[t * n..(t + 1) * n]);
                    }
                });
            }
        }
        Ok(())
    }

    fn accum(&self, v: Var, grads: &mut [Option<Vec<F>>], f: impl FnOnce(&mut [F])) {
        if !self.needs(v) {
            return;
        }
        let n = self.value(v).numel();
        let g = grads[v.0].get_or_insert_with(|| vec![F::zero(); n]);
        f(g);
    }

    #[allow(clippy::too_many_arguments)]
    fn back_matmul(&self, a: Var, b: Var, ta: bool, tb: bool, dy: &[F], grads: &mut [Option<Vec<F>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (batch, a2, b2) = if sa.len() == 3 {
            (sa[0], &sa[1..], &sb[1..])
        } else {
            (1, sa, sb)
        };
        let (m, k) = if ta { (a2[1], a2[0]) } else { (a2[0], a2[1]) };
        let n = if tb { b2[0] } else { b2[1] };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let (rsa, csa) = strides(a2[1], ta);
        let (rsb, csb) = strides(b2[1], tb);
        let (rsd, csd) = strides(n, false);

        self.accum(a, grads, |g| {
            for i in 0..batch {
                let d = &dy[i * m * n..(i + 1) * m * n];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let ga = &mut g[i * m * k..(i + 1) * m * k];
                if ta {
                    // dA_stored[k, m] = op(B)[k, n] @ dC^T[n, m]
                    F::gemm(k, n, m, bb, rsb, csb, d, csd, rsd, F::one(), ga);
                } else {
                    // dA[m, k] = dC[m, n] @ op(B)^T[n, k]
                    F::gemm(m, n, k, d, rsd, csd, bb, csb, rsb, F::one(), ga);
                }
            }
        });
        self.accum(b, grads, |g| {
            for i in 0..batch {
                let d = &dy[i * m * n..(i + 1) * m * n];
                let aa = &av[i * m * k..(i + 1) * m * k];
                let gb = &mut g[i * k * n..(i + 1) * k * n];
                if tb {
                    // dB_stored[n, k] = dC^T[n, m] @ op(A)[m, k]
                    F::gemm(n, m, k, d, csd, rsd, aa, rsa, csa, F::one(), gb);
                } else {
                    // dB[k, n] = op(A)^T[k, m] @ dC[m, n]
                    F::gemm(k, m, n, aa, csa, rsa, d, rsd, csd, F::one(), gb);
                }
            }
        });
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
