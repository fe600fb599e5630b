use std::ops::Range;

use super::{c, gemm, Function, Graph, Scalar, Tensor, Tr, Var};
use crate::error::{shape_err, Error, Result};

struct AddN(usize);

impl<F: Scalar> Function<F> for AddN {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, g: &[F], needs: &[bool]) -> Vec<Option<Vec<F>>> {
        (0..self.0).map(|i| needs[i].then(|| g.to_vec())).collect()
    }
}

struct Scale<F>(F);

impl<F: Scalar> Function<F> for Scale<F> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, g: &[F], _: &[bool]) -> Vec<Option<Vec<F>>> {
        vec![Some(g.iter().map(|&v| v * self.0).collect())]
    }
}

struct Mul;

impl<F: Scalar> Function<F> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[&Tensor<F>], _: &Tensor<F>, g: &[F], needs: &[bool]) -> Vec<Option<Vec<F>>> {
        let prod = |other: &Tensor<F>| g.iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        vec![needs[0].then(|| prod(x[1])), needs[1].then(|| prod(x[0]))]
    }
}

struct SumAll;

impl<F: Scalar> Function<F> for SumAll {
    fn name(&self) -> &'static str {
        "sum_all"
    }
    fn backward(&self, x: &[&Tensor<F>], _: &Tensor<F>, g: &[F], _: &[bool]) -> Vec<Option<Vec<F>>> {
        vec![Some(vec![g[0]; x[0].numel()])]
    }
}

struct Reshape;

impl<F: Scalar> Function<F> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, g: &[F], _: &[bool]) -> Vec<Option<Vec<F>>> {
        vec![Some(g.to_vec())]
    }
}

struct Matmul {
    m: usize,
    k: usize,
    n: usize,
}

impl<F: Scalar> Function<F> for Matmul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, x: &[&Tensor<F>], _: &Tensor<F>, g: &[F], needs: &[bool]) -> Vec<Option<Vec<F>>> {
        let Matmul { m, k, n } = *self;
        let da = needs[0].then(|| {
            let mut da = vec![F::zero(); m * k];
            gemm(m, n, k, g, Tr::N, x[1].data(), Tr::T, F::zero(), &mut da);
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![F::zero(); k * n];
            gemm(k, m, n, x[0].data(), Tr::T, g, Tr::N, F::zero(), &mut db);
            db
        });
        vec![da, db]
    }
}

struct SoftmaxLastDim {
    n: usize,
}

impl<F: Scalar> Function<F> for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "softmax_lastdim"
    }
    fn backward(&self, _: &[&Tensor<F>], y: &Tensor<F>, g: &[F], _: &[bool]) -> Vec<Option<Vec<F>>> {
        let mut dx = vec![F::zero(); g.len()];
        for ((yr, gr), dr) in y
            .data()
            .chunks(self.n)
            .zip(g.chunks(self.n))
            .zip(dx.chunks_mut(self.n))
        {
            softmax_row_backward(yr, gr, dr);
        }
        vec![Some(dx)]
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row<F: Scalar>(x: &[F], out: &mut [F]) {
    let mx = x.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - mx).exp();
        sum += *o;
    }
    let inv = F::one() / sum;
    out.iter_mut().for_each(|o| *o *= inv);
}

/// `dx = y ⊙ (dy - <dy, y>)`, accumulated into `dx`.
pub(crate) fn softmax_row_backward<F: Scalar>(y: &[F], dy: &[F], dx: &mut [F]) {
    let dot: F = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((d, &yv), &gv) in dx.iter_mut().zip(y).zip(dy) {
        *d += yv * (gv - dot);
    }
}

struct AvgPoolRegion {
    h: usize,
    w: usize,
    rows: Range<usize>,
    cols: Range<usize>,
}

impl<F: Scalar> Function<F> for AvgPoolRegion {
    fn name(&self) -> &'static str {
        "avg_pool_2d"
    }
    fn backward(&self, x: &[&Tensor<F>], _: &Tensor<F>, g: &[F], _: &[bool]) -> Vec<Option<Vec<F>>> {
        let plane = self.h * self.w;
        let inv = F::one() / c::<F>((self.rows.len() * self.cols.len()) as f64);
        let mut dx = vec![F::zero(); x[0].numel()];
        for (l, &gl) in g.iter().enumerate() {
            let base = l * plane;
            let v = gl * inv;
            for r in self.rows.clone() {
                for cc in self.cols.clone() {
                    dx[base + r * self.w + cc] = v;
                }
            }
        }
        vec![Some(dx)]
    }
}

struct MeanAxis0 {
    t: usize,
}

impl<F: Scalar> Function<F> for MeanAxis0 {
    fn name(&self) -> &'static str {
        "mean_axis0"
    }
    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, g: &[F], _: &[bool]) -> Vec<Option<Vec<F>>> {
        let inv = F::one() / c::<F>(self.t as f64);
        let row: Vec<F> = g.iter().map(|&v| v * inv).collect();
        let mut dx = Vec::with_capacity(row.len() * self.t);
        for _ in 0..self.t {
            dx.extend_from_slice(&row);
        }
        vec![Some(dx)]
    }
}

struct IndexAxis0 {
    index: usize,
    t: usize,
}

impl<F: Scalar> Function<F> for IndexAxis0 {
    fn name(&self) -> &'static str {
        "index_axis0"
    }
    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, g: &[F], _: &[bool]) -> Vec<Option<Vec<F>>> {
        let inner = g.len();
        let mut dx = vec![F::zero(); inner * self.t];
        dx[self.index * inner..(self.index + 1) * inner].copy_from_slice(g);
        vec![Some(dx)]
    }
}

impl<F: Scalar> Graph<F> {
    fn same_shape(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        let s0 = self.shape(vars[0]);
        for &v in &vars[1..] {
            if self.shape(v) != s0 {
                return shape_err(op, format!("{:?} vs {:?}", s0, self.shape(v)));
            }
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Element-wise sum of equally shaped tensors.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        if vars.is_empty() {
            return Err(Error::InvalidArgument("add_n of nothing".into()));
        }
        self.same_shape("add", vars)?;
        let mut out = self.value(vars[0]).clone();
        for &v in &vars[1..] {
            out.data_mut()
                .iter_mut()
                .zip(self.value(v).data())
                .for_each(|(o, &x)| *o += x);
        }
        Ok(self.apply(vars, out, AddN(vars.len())))
    }

    /// Arithmetic mean of equally shaped tensors.
    pub fn mean_n(&mut self, vars: &[Var]) -> Result<Var> {
        let s = self.add_n(vars)?;
        Ok(self.scale(s, c(1.0 / vars.len() as f64)))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= k);
        self.apply(&[a], out, Scale(k))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", &[a, b])?;
        let mut out = self.value(a).clone();
        out.data_mut()
            .iter_mut()
            .zip(self.value(b).data())
            .for_each(|(o, &x)| *o *= x);
        Ok(self.apply(&[a, b], out, Mul))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: F = self.value(a).data().iter().copied().sum();
        self.apply(&[a], Tensor::scalar(s), SumAll)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.apply(&[a], out, Reshape))
    }

    /// `[m×k]·[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), Tr::N, self.value(b).data(), Tr::N, F::zero(), &mut out);
        Ok(self.apply(&[a, b], Tensor::new(vec![m, n], out)?, Matmul { m, k, n }))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| Error::InvalidArgument("softmax of a scalar".into()))?;
        if n == 0 {
            return shape_err("softmax_lastdim", "empty last axis");
        }
        let mut out = vec![F::zero(); self.value(x).numel()];
        for (xr, or) in self.value(x).data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_row(xr, or);
        }
        Ok(self.apply(&[x], Tensor::new(shape, out)?, SoftmaxLastDim { n }))
    }

    /// Mean over a rectangle of the last two axes: `[..., H, W] -> [...]`.
    pub fn avg_pool_2d(&mut self, x: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("avg_pool_2d", format!("need >= 2 axes, got {shape:?}"));
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if rows.is_empty() || cols.is_empty() || rows.end > h || cols.end > w {
            return Err(Error::InvalidArgument(format!(
                "pooling region {rows:?}x{cols:?} invalid for {h}x{w}"
            )));
        }
        let lead = &shape[..shape.len() - 2];
        let inv = F::one() / c::<F>((rows.len() * cols.len()) as f64);
        let data = self.value(x).data();
        let out: Vec<F> = data
            .chunks(h * w)
            .map(|plane| {
                let mut s = F::zero();
                for r in rows.clone() {
                    for cc in cols.clone() {
                        s += plane[r * w + cc];
                    }
                }
                s * inv
            })
            .collect();
        let out = Tensor::new(lead.to_vec(), out)?;
        Ok(self.apply(&[x], out, AvgPoolRegion { h, w, rows, cols }))
    }

    /// Mean over the leading axis: `[T, ...] -> [...]`.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&t, rest)) = shape.split_first() else {
            return shape_err("mean_axis0", "scalar input");
        };
        let inner: usize = rest.iter().product();
        let inv = F::one() / c::<F>(t as f64);
        let mut out = vec![F::zero(); inner];
        for chunk in self.value(x).data().chunks(inner) {
            out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.apply(&[x], Tensor::new(rest.to_vec(), out)?, MeanAxis0 { t }))
    }

    /// Slice `x[index]` along the leading axis.
    pub fn index_axis0(&mut self, x: Var, index: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let Some((&t, rest)) = shape.split_first() else {
            return shape_err("index_axis0", "scalar input");
        };
        if index >= t {
            return shape_err("index_axis0", format!("index {index} out of {t}"));
        }
        let inner: usize = rest.iter().product();
        let out = self.value(x).data()[index * inner..(index + 1) * inner].to_vec();
        Ok(self.apply(&[x], Tensor::new(rest.to_vec(), out)?, IndexAxis0 { index, t }))
    }
}
