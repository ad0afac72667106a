//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation as a node holding its forward value and
//! a pullback closure. [`Graph::backward`] walks the tape in reverse from a
//! scalar node and accumulates adjoints into every node that depends on a
//! parameter leaf.

use std::fmt;

use crate::error::{DermError, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pullback of one node: `(upstream adjoint, parent values, own value, which
/// parents need an adjoint) -> adjoint per parent`.
pub type Pullback = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    pullback: Option<Pullback>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph").field("nodes", &self.nodes.len()).finish()
    }
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros shaped like `v` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Concatenates the adjoints of `vars` in order.
    pub fn flatten(&self, vars: &[Var]) -> Vec<f64> {
        let mut out = Vec::new();
        for &v in vars {
            match self.get(v) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, self.shapes[v.0].iter().product::<usize>())),
            }
        }
        out
    }
}

fn col_sums(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut out = vec![0.0; c];
    for row in t.data().chunks_exact(c.max(1)).take(r) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::matrix(1, c, out)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(DermError::Dimension(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, parents: Vec<usize>, pullback: Option<Pullback>) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        let pullback = if needs_grad { pullback } else { None };
        self.nodes.push(Node {
            value,
            parents,
            pullback,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            pullback: None,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            pullback: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers an operation with a caller-supplied pullback.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, pullback: Pullback) -> Var {
        self.push(value, inputs.iter().map(|v| v.0).collect(), Some(pullback))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, k) = (ta.rows(), ta.cols());
        let (k2, m) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(DermError::Dimension(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        gemm(ta.data(), (n, k), false, tb.data(), (k, m), false, &mut out, 0.0);
        Ok(self.push(
            Tensor::matrix(n, m, out),
            vec![a.0, b.0],
            Some(Box::new(move |g, p, _, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![0.0; n * k];
                    gemm(g.data(), (n, m), false, p[1].data(), (k, m), true, &mut d, 0.0);
                    Tensor::matrix(n, k, d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![0.0; k * m];
                    gemm(p[0].data(), (n, k), true, g.data(), (n, m), false, &mut d, 0.0);
                    Tensor::matrix(k, m, d)
                });
                vec![ga, gb]
            })),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "add")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _, needs| vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())])),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|x| -x))]
            })),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, p, _, needs| {
                vec![
                    needs[0].then(|| g.zip_map(p[1], |x, y| x * y)),
                    needs[1].then(|| g.zip_map(p[0], |x, y| x * y)),
                ]
            })),
        ))
    }

    /// `x (n x m) + b (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let m = tx.cols();
        if tb.len() != m {
            return Err(DermError::Dimension(format!("add_row: {} columns vs bias of {}", m, tb.len())));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(m) {
            for (o, bi) in row.iter_mut().zip(tb.data()) {
                *o += bi;
            }
        }
        let b_shape = tb.shape().to_vec();
        Ok(self.push(
            out,
            vec![x.0, b.0],
            Some(Box::new(move |g, _, _, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| col_sums(g).reshape(&b_shape).expect("bias shape")),
                ]
            })),
        ))
    }

    /// `x (n x m) * s (1 x m)` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let m = tx.cols();
        if ts.len() != m {
            return Err(DermError::Dimension(format!("mul_row: {} columns vs scale of {}", m, ts.len())));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_exact_mut(m) {
            for (o, si) in row.iter_mut().zip(ts.data()) {
                *o *= si;
            }
        }
        let s_shape = ts.shape().to_vec();
        Ok(self.push(
            out,
            vec![x.0, s.0],
            Some(Box::new(move |g, p, _, needs| {
                let gx = needs[0].then(|| {
                    let mut d = g.clone();
                    for row in d.data_mut().chunks_exact_mut(m) {
                        for (o, si) in row.iter_mut().zip(p[1].data()) {
                            *o *= si;
                        }
                    }
                    d
                });
                let gs = needs[1].then(|| col_sums(&g.zip_map(p[0], |a, b| a * b)).reshape(&s_shape).expect("scale shape"));
                vec![gx, gs]
            })),
        ))
    }

    /// Repeats a `1 x m` row `n` times.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Var {
        let tv = self.value(v);
        let m = tv.len();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(tv.data());
        }
        let shape = tv.shape().to_vec();
        self.push(
            Tensor::matrix(n, m, out),
            vec![v.0],
            Some(Box::new(move |g, _, _, _| vec![Some(col_sums(g).reshape(&shape).expect("row shape"))])),
        )
    }

    /// `x + s` for a `1 x 1` variable `s`.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(DermError::Dimension(format!("add_scalar_var: expected scalar, got {:?}", ts.shape())));
        }
        let c = ts.item();
        let value = self.value(x).map(|v| v + c);
        let s_shape = ts.shape().to_vec();
        Ok(self.push(
            value,
            vec![x.0, s.0],
            Some(Box::new(move |g, _, _, needs| {
                vec![needs[0].then(|| g.clone()), needs[1].then(|| Tensor::full(&s_shape, g.sum()))]
            })),
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, vec![x.0], Some(Box::new(move |g, _, _, _| vec![Some(g.map(|v| v * c))])))
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, vec![x.0], Some(Box::new(|g, _, _, _| vec![Some(g.clone())])))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        same_shape(self.value(x), c, "mul_const")?;
        let value = self.value(x).zip_map(c, |a, b| a * b);
        let c = c.clone();
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g, _, _, _| vec![Some(g.zip_map(&c, |a, b| a * b))])),
        ))
    }

    /// Elementwise `x - c` for a constant tensor `c`.
    pub fn sub_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        same_shape(self.value(x), c, "sub_const")?;
        let value = self.value(x).zip_map(c, |a, b| a - b);
        Ok(self.push(value, vec![x.0], Some(Box::new(|g, _, _, _| vec![Some(g.clone())]))))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|g, p, _, _| {
                // subgradient 0 at the kink
                vec![Some(g.zip_map(p[0], |gi, xi| if xi > 0.0 { gi } else { 0.0 }))]
            })),
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|g, _, y, _| vec![Some(g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)))])),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|g, _, y, _| vec![Some(g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)))])),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, vec![x.0], Some(Box::new(|g, _, y, _| vec![Some(g.zip_map(y, |a, b| a * b))])))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        self.push(
            value,
            vec![x.0],
            Some(Box::new(|g, p, _, _| vec![Some(g.zip_map(p[0], |gi, xi| 2.0 * gi * xi))])),
        )
    }

    /// Clamp into `[lo, hi]`; the adjoint vanishes outside the open interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g, p, _, _| {
                vec![Some(g.zip_map(p[0], |gi, xi| if xi > lo && xi < hi { gi } else { 0.0 }))]
            })),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let shape = self.value(x).shape().to_vec();
        self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g, _, _, _| vec![Some(Tensor::full(&shape, g.item()))])),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums: `n x m -> n x 1`.
    pub fn row_sums(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let sums: Vec<f64> = t.data().chunks_exact(c.max(1)).map(|row| row.iter().sum()).collect();
        self.push(
            Tensor::matrix(r, 1, sums),
            vec![x.0],
            Some(Box::new(move |g, _, _, _| {
                let mut d = Vec::with_capacity(r * c);
                for &gi in g.data() {
                    d.extend(std::iter::repeat_n(gi, c));
                }
                vec![Some(Tensor::matrix(r, c, d))]
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let orig = self.value(x).shape().to_vec();
        Ok(self.push(
            value,
            vec![x.0],
            Some(Box::new(move |g, _, _, _| vec![Some(g.clone().reshape(&orig).expect("reshape back"))])),
        ))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).cols()).collect();
        if xs.iter().any(|&v| self.value(v).rows() != rows) {
            return Err(DermError::Dimension("concat_cols: row counts differ".into()));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&v, &w) in xs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.push(
            Tensor::matrix(rows, total, out),
            xs.iter().map(|v| v.0).collect(),
            Some(Box::new(move |g, _, _, needs| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    grads.push(needs[i].then(|| {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        Tensor::matrix(rows, w, d)
                    }));
                    offset += w;
                }
                grads
            })),
        ))
    }

    /// Batch normalization over rows using the batch statistics.
    ///
    /// Returns the normalized, scaled and shifted output together with the
    /// per-column batch mean and (biased) variance.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let tx = self.value(x);
        let (n, m) = (tx.rows(), tx.cols());
        if self.value(gamma).len() != m || self.value(beta).len() != m {
            return Err(DermError::Dimension("batch_norm: scale/shift width".into()));
        }
        let nf = n as f64;
        let mut mean = vec![0.0; m];
        for row in tx.data().chunks_exact(m) {
            for (mu, v) in mean.iter_mut().zip(row) {
                *mu += v;
            }
        }
        mean.iter_mut().for_each(|mu| *mu /= nf);
        let mut var = vec![0.0; m];
        for row in tx.data().chunks_exact(m) {
            for ((s, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        var.iter_mut().for_each(|s| *s /= nf);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut xhat = tx.clone();
        for row in xhat.data_mut().chunks_exact_mut(m) {
            for j in 0..m {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_exact_mut(m) {
            for j in 0..m {
                row[j] = row[j] * g[j] + b[j];
            }
        }
        let g_shape = self.value(gamma).shape().to_vec();
        let b_shape = self.value(beta).shape().to_vec();
        let inv = inv_std.clone();
        let y = self.push(
            out,
            vec![x.0, gamma.0, beta.0],
            Some(Box::new(move |gout, p, _, needs| {
                let gamma = p[1].data();
                let gx = needs[0].then(|| {
                    let mut sum_d = vec![0.0; m];
                    let mut sum_dx = vec![0.0; m];
                    for (grow, xrow) in gout.data().chunks_exact(m).zip(xhat.data().chunks_exact(m)) {
                        for j in 0..m {
                            let d = grow[j] * gamma[j];
                            sum_d[j] += d;
                            sum_dx[j] += d * xrow[j];
                        }
                    }
                    let mut d = vec![0.0; n * m];
                    for (i, (grow, xrow)) in gout.data().chunks_exact(m).zip(xhat.data().chunks_exact(m)).enumerate() {
                        for j in 0..m {
                            let dxhat = grow[j] * gamma[j];
                            d[i * m + j] = inv[j] / nf * (nf * dxhat - sum_d[j] - xrow[j] * sum_dx[j]);
                        }
                    }
                    Tensor::matrix(n, m, d)
                });
                let ggamma = needs[1].then(|| col_sums(&gout.zip_map(&xhat, |a, b| a * b)).reshape(&g_shape).expect("gamma shape"));
                let gbeta = needs[2].then(|| col_sums(gout).reshape(&b_shape).expect("beta shape"));
                vec![gx, ggamma, gbeta]
            })),
        );
        Ok((y, mean, var))
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(DermError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(pullback) = node.pullback.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parents: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect();
            let pgrads = pullback(&g, &parents, &node.value, &needs);
            for ((&p, pg), need) in node.parents.iter().zip(pgrads).zip(needs) {
                if !need {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
