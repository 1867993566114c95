//! Primitive differentiable operations.

use std::sync::Arc;

use super::{Op, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::sparse::{conv_forward, conv_input_grad, conv_weight_grad, KernelMap};

fn same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::invalid(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.value(a).shape(),
            tape.value(b).shape()
        )));
    }
    Ok(())
}

fn map_values(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        rows: t.rows,
        cols: t.cols,
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip_values(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct AddOp;
impl Op for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad.clone()), Some(grad.clone())])
    }
}

struct MulOp;
impl Op for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![
            needs[0].then(|| zip_values(grad, inputs[1], |g, b| g * b)),
            needs[1].then(|| zip_values(grad, inputs[0], |g, a| g * a)),
        ])
    }
}

struct ScaleOp(f64);
impl Op for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(map_values(grad, |g| g * self.0))])
    }
}

struct SumOp;
impl Op for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = grad.data[0];
        Ok(vec![Some(map_values(inputs[0], |_| g))])
    }
}

struct ReluOp;
impl Op for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(zip_values(grad, output, |g, y| {
            if y > 0.0 {
                g
            } else {
                0.0
            }
        }))])
    }
}

struct SigmoidOp;
impl Op for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(zip_values(grad, output, |g, y| {
            g * y * (1.0 - y)
        }))])
    }
}

struct ShiftedSoftplusOp;
impl Op for ShiftedSoftplusOp {
    fn name(&self) -> &'static str {
        "shifted_softplus"
    }
    fn backward(
        &self,
        _: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        // d/dx log(1 + e^(x+b)) = 1 - e^(-y)
        Ok(vec![Some(zip_values(grad, output, |g, y| {
            g * -(-y).exp_m1()
        }))])
    }
}

struct MatMulOp;
impl Op for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (n, k, m) = (a.rows, a.cols, b.cols);
        let da = needs[0].then(|| {
            let mut d = Tensor::zeros(n, k);
            for i in 0..n {
                for j in 0..k {
                    d.data[i * k + j] = (0..m)
                        .map(|c| grad.data[i * m + c] * b.data[j * m + c])
                        .sum();
                }
            }
            d
        });
        let db = needs[1].then(|| {
            let mut d = Tensor::zeros(k, m);
            for i in 0..n {
                for j in 0..k {
                    let av = a.data[i * k + j];
                    for c in 0..m {
                        d.data[j * m + c] += av * grad.data[i * m + c];
                    }
                }
            }
            d
        });
        Ok(vec![da, db])
    }
}

struct SliceOp {
    start: usize,
}
impl Op for SliceOp {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut d = Tensor::zeros(inputs[0].rows, inputs[0].cols);
        d.data[self.start..self.start + grad.len()].copy_from_slice(&grad.data);
        Ok(vec![Some(d)])
    }
}

struct SparseConvOp {
    map: Arc<KernelMap>,
    c_in: usize,
    c_out: usize,
}
impl Op for SparseConvOp {
    fn name(&self) -> &'static str {
        "sparse_conv"
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let dx = needs[0].then(|| Tensor {
            rows: x.rows,
            cols: x.cols,
            data: conv_input_grad(&self.map, &grad.data, self.c_out, &w.data, self.c_in),
        });
        let dw = needs[1].then(|| Tensor {
            rows: w.rows,
            cols: w.cols,
            data: conv_weight_grad(&self.map, &x.data, self.c_in, &grad.data, self.c_out),
        });
        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut db = Tensor::zeros(1, self.c_out);
                for r in 0..grad.rows {
                    for (a, g) in db.data.iter_mut().zip(grad.row(r)) {
                        *a += g;
                    }
                }
                db
            }));
        }
        Ok(out)
    }
}

struct ConcatGatherOp {
    b_rows: Arc<Vec<Option<u32>>>,
}
impl Op for ConcatGatherOp {
    fn name(&self) -> &'static str {
        "concat_gather"
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let width = a.cols + b.cols;
        let da = needs[0].then(|| {
            let mut d = Tensor::zeros(a.rows, a.cols);
            for r in 0..a.rows {
                d.data[r * a.cols..(r + 1) * a.cols]
                    .copy_from_slice(&grad.data[r * width..r * width + a.cols]);
            }
            d
        });
        let db = needs[1].then(|| {
            let mut d = Tensor::zeros(b.rows, b.cols);
            for (r, src) in self.b_rows.iter().enumerate() {
                if let Some(q) = src {
                    let q = *q as usize;
                    for (dst, g) in d.data[q * b.cols..(q + 1) * b.cols]
                        .iter_mut()
                        .zip(&grad.data[r * width + a.cols..(r + 1) * width])
                    {
                        *dst += g;
                    }
                }
            }
            d
        });
        Ok(vec![da, db])
    }
}

struct GatherRowsOp {
    rows: Arc<Vec<u32>>,
}
impl Op for GatherRowsOp {
    fn name(&self) -> &'static str {
        "gather_rows"
    }
    fn backward(
        &self,
        inputs: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let c = x.cols;
        let mut d = Tensor::zeros(x.rows, c);
        for (r, &src) in self.rows.iter().enumerate() {
            let s = src as usize;
            for (dst, g) in d.data[s * c..(s + 1) * c].iter_mut().zip(grad.row(r)) {
                *dst += g;
            }
        }
        Ok(vec![Some(d)])
    }
}

struct ScaleColumnsOp {
    factors: Vec<f64>,
}
impl Op for ScaleColumnsOp {
    fn name(&self) -> &'static str {
        "scale_columns"
    }
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut d = grad.clone();
        for row in d.data.chunks_mut(grad.cols.max(1)) {
            for (v, f) in row.iter_mut().zip(&self.factors) {
                *v *= f;
            }
        }
        Ok(vec![Some(d)])
    }
}

struct WeightedSumOp {
    weights: Vec<f64>,
}
impl Op for WeightedSumOp {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }
    fn backward(
        &self,
        _: &[&Tensor],
        _: &Tensor,
        grad: &Tensor,
        _: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let g = grad.data[0];
        Ok(self
            .weights
            .iter()
            .map(|w| Some(Tensor::scalar(g * w)))
            .collect())
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = zip_values(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(AddOp, &[a, b], v))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = zip_values(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(MulOp, &[a, b], v))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = map_values(self.value(a), |x| x * factor);
        self.record(ScaleOp(factor), &[a], v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.record(SumOp, &[a], Tensor::scalar(s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = map_values(self.value(a), |x| x.max(0.0));
        self.record(ReluOp, &[a], v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = map_values(self.value(a), sigmoid);
        self.record(SigmoidOp, &[a], v)
    }

    /// Elementwise `log(1 + exp(x + shift))`.
    pub fn shifted_softplus(&mut self, a: Var, shift: f64) -> Var {
        let v = map_values(self.value(a), |x| softplus(x + shift));
        self.record(ShiftedSoftplusOp, &[a], v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(Error::invalid(format!(
                "matmul: {:?} x {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (n, k, m) = (ta.rows, ta.cols, tb.cols);
        let mut out = Tensor::zeros(n, m);
        for i in 0..n {
            for j in 0..k {
                let av = ta.data[i * k + j];
                for c in 0..m {
                    out.data[i * m + c] += av * tb.data[j * m + c];
                }
            }
        }
        Ok(self.record(MatMulOp, &[a, b], out))
    }

    /// Reinterprets `rows * cols` consecutive values starting at `start` as a matrix.
    pub fn slice(&mut self, a: Var, start: usize, rows: usize, cols: usize) -> Result<Var> {
        let src = self.value(a);
        if start + rows * cols > src.len() {
            return Err(Error::invalid("slice exceeds tensor"));
        }
        let v = Tensor::from_vec(rows, cols, src.data[start..start + rows * cols].to_vec())?;
        Ok(self.record(SliceOp { start }, &[a], v))
    }

    /// Sparse (transposed) convolution driven by `map`; `w` is `(volume * c_in) x c_out`.
    pub fn sparse_conv(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        map: Arc<KernelMap>,
    ) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let c_in = tx.cols;
        let c_out = tw.cols;
        if tx.rows != map.n_in() {
            return Err(Error::invalid(format!(
                "sparse_conv: {} input rows for a map over {}",
                tx.rows,
                map.n_in()
            )));
        }
        if tw.rows != map.volume() * c_in {
            return Err(Error::invalid(format!(
                "sparse_conv: weight rows {} != volume {} x channels {c_in}",
                tw.rows,
                map.volume()
            )));
        }
        let b = match bias {
            Some(b) => {
                if self.value(b).shape() != (1, c_out) {
                    return Err(Error::invalid("sparse_conv: bias must be 1 x c_out"));
                }
                Some(self.value(b).data.as_slice())
            }
            None => None,
        };
        let data = conv_forward(&map, &tx.data, c_in, &tw.data, c_out, b);
        let out = Tensor {
            rows: map.n_out(),
            cols: c_out,
            data,
        };
        let op = SparseConvOp { map, c_in, c_out };
        Ok(match bias {
            Some(b) => self.record(op, &[x, w, b], out),
            None => self.record(op, &[x, w], out),
        })
    }

    /// Row `r` of the result is `[a[r], b[b_rows[r]]]`, with zeros where `b_rows[r]` is `None`.
    pub fn concat_gather(&mut self, a: Var, b: Var, b_rows: Arc<Vec<Option<u32>>>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if b_rows.len() != ta.rows {
            return Err(Error::invalid("concat_gather: row map length mismatch"));
        }
        let width = ta.cols + tb.cols;
        let mut out = Tensor::zeros(ta.rows, width);
        for (r, src) in b_rows.iter().enumerate() {
            out.data[r * width..r * width + ta.cols].copy_from_slice(ta.row(r));
            if let Some(q) = src {
                let q = *q as usize;
                if q >= tb.rows {
                    return Err(Error::invalid("concat_gather: row index out of range"));
                }
                out.data[r * width + ta.cols..(r + 1) * width].copy_from_slice(tb.row(q));
            }
        }
        Ok(self.record(ConcatGatherOp { b_rows }, &[a, b], out))
    }

    pub fn gather_rows(&mut self, a: Var, rows: Arc<Vec<u32>>) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows.iter() {
            if r as usize >= ta.rows {
                return Err(Error::invalid("gather_rows: row index out of range"));
            }
            data.extend_from_slice(ta.row(r as usize));
        }
        let out = Tensor {
            rows: rows.len(),
            cols: c,
            data,
        };
        Ok(self.record(GatherRowsOp { rows }, &[a], out))
    }

    pub fn scale_columns(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let ta = self.value(a);
        if factors.len() != ta.cols {
            return Err(Error::invalid("scale_columns: factor count mismatch"));
        }
        let mut out = ta.clone();
        for row in out.data.chunks_mut(ta.cols.max(1)) {
            for (v, f) in row.iter_mut().zip(&factors) {
                *v *= f;
            }
        }
        Ok(self.record(ScaleColumnsOp { factors }, &[a], out))
    }

    /// `sum_i weights[i] * terms[i]` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[Var], weights: &[f64]) -> Result<Var> {
        if terms.len() != weights.len() {
            return Err(Error::invalid("weighted_sum: term/weight count mismatch"));
        }
        let mut total = 0.0;
        for (&t, w) in terms.iter().zip(weights) {
            let v = self
                .value(t)
                .item()
                .ok_or_else(|| Error::invalid("weighted_sum terms must be scalars"))?;
            total += w * v;
        }
        Ok(self.record(
            WeightedSumOp {
                weights: weights.to_vec(),
            },
            terms,
            Tensor::scalar(total),
        ))
    }
}
