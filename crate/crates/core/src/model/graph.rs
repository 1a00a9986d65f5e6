//! Reverse-mode tape over 2-D tensors.
//!
//! Only the operations the toy transformer uses are supported. Values are
//! computed eagerly when a node is pushed; `backward` walks the tape once in
//! reverse.

use std::ops::Range;
use std::sync::Arc;

use crate::tensor::{gelu_grad_scalar, Float, Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Position of the node on the tape; indexes the output of `backward`.
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    /// Softmax of input plus a constant additive mask; the node value is the
    /// softmax output.
    Softmax(Var),
    /// Normalisation without affine terms; keeps per-row inverse std.
    LayerNorm(Var, Vec<F>),
    Gelu(Var),
    /// Pairwise rotation with per-row, per-pair angles (cos, sin), applied
    /// independently to every `head_dim` block of columns.
    Rope {
        x: Var,
        cos: Arc<Vec<F>>,
        sin: Arc<Vec<F>>,
        head_dim: usize,
    },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, Range<usize>),
    SliceCols(Var, Range<usize>),
    Gather(Var, Vec<usize>),
    Mse(Var, Tensor<F>),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<F: Float> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(row))?;
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.value(a).mul_row(self.value(row))?;
        Ok(self.push(v, Op::MulRow(a, row)))
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn softmax_masked(&mut self, a: Var, mask: Option<&Tensor<F>>) -> Result<Var> {
        let v = self.value(a).softmax_rows(mask)?;
        Ok(self.push(v, Op::Softmax(a)))
    }

    pub fn layer_norm(&mut self, a: Var, eps: F) -> Var {
        let x = self.value(a);
        let cols = x.cols();
        let n = F::from_usize(cols).unwrap();
        let mut out = x.data().to_vec();
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in out.chunks_mut(cols) {
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let inv = F::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let v = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::LayerNorm(a, inv_std))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).gelu();
        self.push(v, Op::Gelu(a))
    }

    /// `cos`/`sin` hold `rows × head_dim/2` angles.
    pub fn rope(
        &mut self,
        a: Var,
        cos: Arc<Vec<F>>,
        sin: Arc<Vec<F>>,
        head_dim: usize,
    ) -> Result<Var> {
        let x = self.value(a);
        let (rows, cols) = (x.rows(), x.cols());
        let half = head_dim / 2;
        if head_dim % 2 != 0 || cols % head_dim != 0 || cos.len() != rows * half {
            return Err(shape_err("rope", x.shape(), &[cos.len(), head_dim]));
        }
        let mut out = x.data().to_vec();
        for r in 0..rows {
            let row = &mut out[r * cols..(r + 1) * cols];
            for block in row.chunks_mut(head_dim) {
                for p in 0..half {
                    let (c, s) = (cos[r * half + p], sin[r * half + p]);
                    let (x0, x1) = (block[2 * p], block[2 * p + 1]);
                    block[2 * p] = x0 * c - x1 * s;
                    block[2 * p + 1] = x0 * s + x1 * c;
                }
            }
        }
        let v = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::Rope {
                x: a,
                cos,
                sin,
                head_dim,
            },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, 0)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat(&vals, 1)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: Var, span: Range<usize>) -> Result<Var> {
        let v = self.value(a).slice(0, span.clone())?;
        Ok(self.push(v, Op::SliceRows(a, span)))
    }

    pub fn slice_cols(&mut self, a: Var, span: Range<usize>) -> Result<Var> {
        let v = self.value(a).slice(1, span.clone())?;
        Ok(self.push(v, Op::SliceCols(a, span)))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let cols = t.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            if i >= t.rows() {
                return Err(TensorError::Span {
                    start: i,
                    end: i + 1,
                    len: t.rows(),
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::new([ids.len(), cols], data)?;
        Ok(self.push(v, Op::Gather(table, ids.to_vec())))
    }

    /// Mean squared error against a constant target; a `1 × 1` node.
    pub fn mse(&mut self, a: Var, target: &Tensor<F>) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != target.shape() {
            return Err(shape_err("mse", x.shape(), target.shape()));
        }
        let n = F::from_usize(x.len()).unwrap();
        let s = x
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<F>()
            / n;
        let v = Tensor::new([1, 1], vec![s])?;
        Ok(self.push(v, Op::Mse(a, target.clone())))
    }

    /// Gradients of the scalar node `out` with respect to every node.
    /// Entries are `None` for nodes that do not influence `out`.
    pub fn backward(&self, out: Var) -> Vec<Option<Tensor<F>>> {
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(out).shape().to_vec();
        grads[out.0] = Some(Tensor::full(shape, F::one()).expect("non-empty"));

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let ga = g.matmul(&bv.transpose().unwrap()).unwrap();
                    let gb = av.transpose().unwrap().matmul(&g).unwrap();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    let gr = column_sums(&g, self.value(*row).shape());
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *row, gr);
                }
                Op::MulRow(a, row) => {
                    let rv = self.value(*row);
                    let ga = g.mul_row(rv).unwrap();
                    let gr = column_sums(&g.mul(self.value(*a)).unwrap(), rv.shape());
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *row, gr);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Softmax(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut gx = vec![F::zero(); y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>();
                        for c in 0..cols {
                            gx[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(y.shape().to_vec(), gx).unwrap());
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let n = F::from_usize(cols).unwrap();
                    let mut gx = vec![F::zero(); y.len()];
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let mean_g = gr.iter().copied().sum::<F>() / n;
                        let mean_gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>() / n;
                        for c in 0..cols {
                            gx[r * cols + c] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(y.shape().to_vec(), gx).unwrap());
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let gx: Vec<F> = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| gv * gelu_grad_scalar(xv))
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), gx).unwrap());
                }
                Op::Rope {
                    x,
                    cos,
                    sin,
                    head_dim,
                } => {
                    let (rows, cols) = (g.rows(), g.cols());
                    let half = head_dim / 2;
                    let mut gx = g.data().to_vec();
                    for r in 0..rows {
                        let row = &mut gx[r * cols..(r + 1) * cols];
                        for block in row.chunks_mut(*head_dim) {
                            for p in 0..half {
                                let (c, s) = (cos[r * half + p], sin[r * half + p]);
                                let (g0, g1) = (block[2 * p], block[2 * p + 1]);
                                block[2 * p] = g0 * c + g1 * s;
                                block[2 * p + 1] = g1 * c - g0 * s;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(g.shape().to_vec(), gx).unwrap());
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose().unwrap()),
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).rows();
                        accumulate(&mut grads, p, g.slice(0, start..start + n).unwrap());
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).cols();
                        accumulate(&mut grads, p, g.slice(1, start..start + n).unwrap());
                        start += n;
                    }
                }
                Op::SliceRows(a, span) => {
                    let src = self.value(*a);
                    let cols = src.cols();
                    let mut full = vec![F::zero(); src.len()];
                    full[span.start * cols..span.end * cols].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, Tensor::new(src.shape().to_vec(), full).unwrap());
                }
                Op::SliceCols(a, span) => {
                    let src = self.value(*a);
                    let cols = src.cols();
                    let w = span.len();
                    let mut full = vec![F::zero(); src.len()];
                    for r in 0..src.rows() {
                        full[r * cols + span.start..r * cols + span.end]
                            .copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(src.shape().to_vec(), full).unwrap());
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let cols = t.cols();
                    let mut full = vec![F::zero(); t.len()];
                    for (k, &i) in ids.iter().enumerate() {
                        for c in 0..cols {
                            full[i * cols + c] = full[i * cols + c] + g.data()[k * cols + c];
                        }
                    }
                    accumulate(&mut grads, *table, Tensor::new(t.shape().to_vec(), full).unwrap());
                }
                Op::Mse(a, target) => {
                    let x = self.value(*a);
                    let n = F::from_usize(x.len()).unwrap();
                    let two = F::from_f64_lossy(2.0);
                    let gs = g.data()[0];
                    let gx: Vec<F> = x
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| gs * two * (p - t) / n)
                        .collect();
                    accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), gx).unwrap());
                }
            }
            grads[idx] = Some(g);
        }
        grads
    }
}

fn accumulate<F: Float>(grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
    match &mut grads[v.0] {
        Some(existing) => *existing = existing.add(&g).expect("gradient shapes agree"),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums<F: Float>(g: &Tensor<F>, shape: &[usize]) -> Tensor<F> {
    let cols = g.cols();
    let mut s = vec![F::zero(); cols];
    for r in 0..g.rows() {
        for (acc, &v) in s.iter_mut().zip(g.row(r)) {
            *acc = *acc + v;
        }
    }
    Tensor::new(shape.to_vec(), s).expect("row vector shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for a unary graph op.
    fn check_unary(build: impl Fn(&mut Graph<f64>, Var) -> Var, shape: [usize; 2], seed: u64) {
        let mut rng = Rng::new(seed);
        let x = Tensor::<f64>::randn(&mut rng, shape).unwrap();
        let probe = Tensor::<f64>::randn(&mut rng, [256]).unwrap();
        let eval = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let mut g = Graph::new();
            let xv = g.leaf(x.clone());
            let y = build(&mut g, xv);
            let out_shape = g.value(y).shape().to_vec();
            let w = Tensor::new(out_shape, probe.data()[..g.value(y).len()].to_vec()).unwrap();
            // loss = mean((y - w)^2) exercises Mse as well
            let l = g.mse(y, &w).unwrap();
            let grads = g.backward(l);
            (g.value(l).data()[0], grads[xv.0].clone())
        };
        let (_, analytic) = eval(&x);
        let analytic = analytic.unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone().into_data();
            let mut xm = xp.clone();
            xp[i] += h;
            xm[i] -= h;
            let fp = eval(&Tensor::new(shape, xp).unwrap()).0;
            let fm = eval(&Tensor::new(shape, xm).unwrap()).0;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-3),
                "entry {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn unary_op_gradients() {
        check_unary(|g, x| g.gelu(x), [3, 4], 1);
        check_unary(|g, x| g.layer_norm(x, 1e-5), [3, 5], 2);
        check_unary(|g, x| g.softmax_masked(x, None).unwrap(), [2, 4], 3);
        check_unary(|g, x| g.transpose(x).unwrap(), [2, 3], 4);
        check_unary(|g, x| g.scale(x, 0.37), [2, 3], 5);
        check_unary(|g, x| g.slice_cols(x, 1..3).unwrap(), [2, 4], 6);
        check_unary(|g, x| g.slice_rows(x, 1..2).unwrap(), [3, 4], 7);
        check_unary(|g, x| g.gather(x, &[2, 0, 2]).unwrap(), [3, 2], 8);
        check_unary(
            |g, x| {
                let t = g.transpose(x).unwrap();
                g.matmul(x, t).unwrap()
            },
            [3, 2],
            9,
        );
        check_unary(
            |g, x| {
                let a = g.slice_cols(x, 0..2).unwrap();
                let b = g.slice_cols(x, 2..4).unwrap();
                let c = g.concat_cols(&[b, a]).unwrap();
                let ab = g.concat_cols(&[a, b]).unwrap();
                g.concat_rows(&[c, ab, c]).unwrap()
            },
            [2, 4],
            10,
        );
        let cos = Arc::new(vec![0.3, -0.8, 0.5, 0.1, 0.9, -0.2]);
        let sin = Arc::new(vec![0.95, 0.6, -0.86, 0.99, 0.43, 0.97]);
        check_unary(
            move |g, x| g.rope(x, cos.clone(), sin.clone(), 4).unwrap(),
            [3, 8],
            11,
        );
        let mask = Tensor::from_f64([2, 3], &[0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, 0.0]).unwrap();
        check_unary(
            move |g, x| g.softmax_masked(x, Some(&mask)).unwrap(),
            [2, 3],
            12,
        );
    }

    #[test]
    fn binary_row_ops_gradients() {
        let row = Tensor::<f64>::randn(&mut Rng::new(20), [1, 4]).unwrap();
        let r1 = row.clone();
        check_unary(
            move |g, x| {
                let r = g.leaf(r1.clone());
                let y = g.mul_row(x, r).unwrap();
                g.add_row(y, r).unwrap()
            },
            [3, 4],
            21,
        );
        // gradient w.r.t. the row operand
        let x = Tensor::<f64>::randn(&mut Rng::new(22), [3, 4]).unwrap();
        check_unary(
            move |g, r| {
                let xv = g.leaf(x.clone());
                let y = g.mul_row(xv, r).unwrap();
                let y = g.add_row(y, r).unwrap();
                g.add(y, xv).unwrap()
            },
            [1, 4],
            23,
        );
    }
}
