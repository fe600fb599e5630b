//! Spike-guided spatiotemporal attention.
//!
//! Each time step of a stage's feature map is a set of `N = H·W` tokens with
//! `C` channels. Queries, keys and values are spiking projections of the
//! tokens. The attention weight between the tokens of step `t'` (rows) and
//! step `t` (columns) is
//!
//! ```text
//! A[t',t] = Q[t']ᵀ K[t] / sqrt(C)          t' < t
//! A[t',t] = Q[t']ᵀ K[t] / sqrt(C) + B      t' = t
//! A[t',t] = 0                              t' > t
//! ```
//!
//! where `B[i,j]` is a learned bias indexed by the 2-D displacement between
//! tokens `i` and `j`. The output at step `t` sums the row-softmaxed blocks of
//! all admitted `t'` and applies them to the values, then re-spikes:
//! `O[t] = LIF(Σ_{t'} softmax(A[t',t]) · V)`.
//!
//! Tensors are stored `[C, N]` per step; the attention blocks are `N×N`
//! (tokens as rows).

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::nn::{kaiming, AttentionTap, ParamId, ParamStore};
use crate::rng::Rng;
use crate::spiking::Fwd;
use crate::tensor::{gemm, softmax_row, softmax_row_backward, Function, Graph, Scalar, Tensor, Tr, Var};

/// Which `(t', t)` blocks take part in the attention, and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    /// Causal: blocks with `t' > t` are zero and excluded.
    Staw,
    /// Full: every step attends to every step; bias on the diagonal block.
    Faw,
    /// All attention logits are zero (uniform mixing over tokens).
    Zaw,
}

impl FromStr for AttentionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "staw" => Ok(Self::Staw),
            "faw" => Ok(Self::Faw),
            "zaw" => Ok(Self::Zaw),
            _ => Err(Error::Config(format!("unknown attention variant {s:?} (staw|faw|zaw)"))),
        }
    }
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Staw => "staw",
            Self::Faw => "faw",
            Self::Zaw => "zaw",
        })
    }
}

impl AttentionVariant {
    /// Steps `t'` whose blocks contribute to output step `t`.
    pub fn sources(self, t: usize, steps: usize) -> std::ops::Range<usize> {
        match self {
            Self::Staw | Self::Zaw => 0..t + 1,
            Self::Faw => 0..steps,
        }
    }
}

/// Which step the values are taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueMode {
    /// `V[t]`: the values of the current step, for every `t'`.
    Literal,
    /// `V[t']`: each block weights the values of its own source step.
    StandardCausal,
}

impl FromStr for ValueMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "literal" => Ok(Self::Literal),
            "standard-causal" | "standard_causal" => Ok(Self::StandardCausal),
            _ => Err(Error::Config(format!(
                "unknown value mode {s:?} (literal|standard-causal)"
            ))),
        }
    }
}

impl fmt::Display for ValueMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Literal => "literal",
            Self::StandardCausal => "standard-causal",
        })
    }
}

/// Row/column of displacement `(dh, dw)` in a `(2H-1)×(2W-1)` bias table.
pub fn relative_index(dh: isize, dw: isize, h: usize, w: usize) -> Result<(usize, usize)> {
    let (hi, wi) = (h as isize, w as isize);
    if dh.abs() > hi - 1 || dw.abs() > wi - 1 {
        return Err(Error::InvalidArgument(format!(
            "displacement ({dh}, {dw}) outside a {h}x{w} grid"
        )));
    }
    Ok(((dh + hi - 1) as usize, (dw + wi - 1) as usize))
}

/// Flat table offset for every token pair, tokens enumerated row-major.
fn bias_gather(h: usize, w: usize) -> Vec<usize> {
    let n = h * w;
    let tw = 2 * w - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let dh = (i / w) as isize - (j / w) as isize;
            let dw = (i % w) as isize - (j % w) as isize;
            let (r, c) = relative_index(dh, dw, h, w).expect("in-grid displacement");
            idx.push(r * tw + c);
        }
    }
    idx
}

/// `B[i,j] = P[relative_index(h_i - h_j, w_i - w_j)]`.
pub fn compute_bias_matrix<F: Scalar>(table: &Tensor<F>, h: usize, w: usize) -> Result<Tensor<F>> {
    if table.shape() != [2 * h - 1, 2 * w - 1] {
        return shape_err("bias_matrix", format!("table {:?} for {h}x{w} tokens", table.shape()));
    }
    let n = h * w;
    let data = bias_gather(h, w).into_iter().map(|k| table.data()[k]).collect();
    Tensor::new(vec![n, n], data)
}

struct BiasGather {
    index: Vec<usize>,
    table_len: usize,
}

impl<F: Scalar> Function<F> for BiasGather {
    fn name(&self) -> &'static str {
        "bias_matrix"
    }
    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, g: &[F], _: &[bool]) -> Vec<Option<Vec<F>>> {
        let mut dt = vec![F::zero(); self.table_len];
        for (&k, &gv) in self.index.iter().zip(g) {
            dt[k] += gv;
        }
        vec![Some(dt)]
    }
}

/// One attention block `A[t',t]` for a single sequence. `q`, `k` are
/// `[T, C, N]`, `bias` is `[N, N]`; time indices are 0-based.
pub fn compute_staw<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    bias: &Tensor<F>,
    t_prime: usize,
    t: usize,
    variant: AttentionVariant,
) -> Result<Tensor<F>> {
    let s = q.shape();
    if s.len() != 3 || k.shape() != s || bias.shape() != [s[2], s[2]] || t_prime >= s[0] || t >= s[0] {
        return shape_err(
            "compute_staw",
            format!("q {:?}, k {:?}, bias {:?}, t'={t_prime}, t={t}", s, k.shape(), bias.shape()),
        );
    }
    let (c, n) = (s[1], s[2]);
    let mut a = vec![F::zero(); n * n];
    let masked = match variant {
        AttentionVariant::Zaw => true,
        AttentionVariant::Staw => t_prime > t,
        AttentionVariant::Faw => false,
    };
    if !masked {
        logits_block(
            &q.data()[t_prime * c * n..(t_prime + 1) * c * n],
            &k.data()[t * c * n..(t + 1) * c * n],
            (t_prime == t).then_some(bias.data()),
            c,
            n,
            &mut a,
        );
    }
    Tensor::new(vec![n, n], a)
}

/// Full `(T·N)×(T·N)` weight matrix of one sequence, block `(t', t)` at rows
/// `t'·N..` and columns `t·N..`.
pub fn staw_block_matrix<F: Scalar>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    bias: &Tensor<F>,
    variant: AttentionVariant,
) -> Result<Tensor<F>> {
    let (steps, n) = (q.shape()[0], q.shape()[2]);
    let side = steps * n;
    let mut out = vec![F::zero(); side * side];
    for tp in 0..steps {
        for t in 0..steps {
            let block = compute_staw(q, k, bias, tp, t, variant)?;
            for i in 0..n {
                let row = (tp * n + i) * side + t * n;
                out[row..row + n].copy_from_slice(&block.data()[i * n..(i + 1) * n]);
            }
        }
    }
    Tensor::new(vec![side, side], out)
}

/// `a = qᵀk / sqrt(C) (+ bias)` for `[C,N]` step slices.
fn logits_block<F: Scalar>(q: &[F], k: &[F], bias: Option<&[F]>, c: usize, n: usize, a: &mut [F]) {
    gemm(n, c, n, q, Tr::T, k, Tr::N, F::zero(), a);
    let scale = F::one() / F::of_f64(c as f64).sqrt();
    match bias {
        Some(b) => a.iter_mut().zip(b).for_each(|(x, &bv)| *x = *x * scale + bv),
        None => a.iter_mut().for_each(|x| *x *= scale),
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnDims {
    steps: usize,
    batch: usize,
    c: usize,
    n: usize,
}

impl AttnDims {
    fn frame(&self, t: usize, b: usize) -> std::ops::Range<usize> {
        let f = t * self.batch + b;
        f * self.c * self.n..(f + 1) * self.c * self.n
    }
}

struct CausalAttention<F> {
    dims: AttnDims,
    variant: AttentionVariant,
    value_mode: ValueMode,
    /// Softmaxed blocks, keyed by (b, t, t'); empty for ZAW.
    probs: Vec<Vec<F>>,
    /// Per (b, t): sum of the admitted blocks (literal value mode).
    sums: Vec<Vec<F>>,
}

impl<F: Scalar> CausalAttention<F> {
    fn block_slot(&self, b: usize, t: usize, tp: usize) -> usize {
        let AttnDims { steps, .. } = self.dims;
        (b * steps + t) * steps + tp
    }
}

fn uniform_block<F: Scalar>(n: usize) -> Vec<F> {
    vec![F::one() / F::of_f64(n as f64); n * n]
}

impl<F: Scalar> Function<F> for CausalAttention<F> {
    fn name(&self) -> &'static str {
        "causal_attention"
    }

    fn backward(&self, x: &[&Tensor<F>], _: &Tensor<F>, g: &[F], needs: &[bool]) -> Vec<Option<Vec<F>>> {
        let d = self.dims;
        let (c, n) = (d.c, d.n);
        let (q, k, v) = (x[0].data(), x[1].data(), x[2].data());
        let mut dq = vec![F::zero(); q.len()];
        let mut dk = vec![F::zero(); k.len()];
        let mut dv = vec![F::zero(); v.len()];
        let mut dbias = vec![F::zero(); n * n];
        let scale = F::one() / F::of_f64(c as f64).sqrt();
        let zaw = self.variant == AttentionVariant::Zaw;
        let uniform = uniform_block::<F>(n);
        let mut dp = vec![F::zero(); n * n];
        let mut da = vec![F::zero(); n * n];

        for b in 0..d.batch {
            for t in 0..d.steps {
                let gout = &g[d.frame(t, b)];
                if self.value_mode == ValueMode::Literal {
                    // out = V_t · Sᵀ  ⇒  dV_t += G·S,  dS = Gᵀ·V_t
                    let s = &self.sums[b * d.steps + t];
                    gemm(c, n, n, gout, Tr::N, s, Tr::N, F::one(), &mut dv[d.frame(t, b)]);
                    gemm(n, c, n, gout, Tr::T, &v[d.frame(t, b)], Tr::N, F::zero(), &mut dp);
                }
                for tp in self.variant.sources(t, d.steps) {
                    let p: &[F] = if zaw { &uniform } else { &self.probs[self.block_slot(b, t, tp)] };
                    if self.value_mode == ValueMode::StandardCausal {
                        gemm(c, n, n, gout, Tr::N, p, Tr::N, F::one(), &mut dv[d.frame(tp, b)]);
                        gemm(n, c, n, gout, Tr::T, &v[d.frame(tp, b)], Tr::N, F::zero(), &mut dp);
                    }
                    if zaw {
                        continue;
                    }
                    da.fill(F::zero());
                    for i in 0..n {
                        let r = i * n..(i + 1) * n;
                        softmax_row_backward(&p[r.clone()], &dp[r.clone()], &mut da[r]);
                    }
                    if tp == t {
                        dbias.iter_mut().zip(&da).for_each(|(a, &b)| *a += b);
                    }
                    da.iter_mut().for_each(|x| *x *= scale);
                    // A = Q_{t'}ᵀ K_t  ⇒  dQ_{t'} += K_t · dAᵀ,  dK_t += Q_{t'} · dA
                    if needs[0] {
                        gemm(c, n, n, &k[d.frame(t, b)], Tr::N, &da, Tr::T, F::one(), &mut dq[d.frame(tp, b)]);
                    }
                    if needs[1] {
                        gemm(c, n, n, &q[d.frame(tp, b)], Tr::N, &da, Tr::N, F::one(), &mut dk[d.frame(t, b)]);
                    }
                }
            }
        }
        vec![
            needs[0].then_some(dq),
            needs[1].then_some(dk),
            needs[2].then_some(dv),
            needs[3].then_some(dbias),
        ]
    }
}

impl<F: Scalar> Graph<F> {
    /// Bias matrix `[N, N]` gathered from a `(2H-1)×(2W-1)` table.
    pub fn bias_matrix(&mut self, table: Var, h: usize, w: usize) -> Result<Var> {
        let out = compute_bias_matrix(self.value(table), h, w)?;
        let func = BiasGather {
            index: bias_gather(h, w),
            table_len: self.value(table).numel(),
        };
        Ok(self.apply(&[table], out, func))
    }

    /// Pre-activation attention output `Σ_{t'} softmax(A[t',t]) · V` for
    /// time-major `[T·B, C, N]` queries, keys and values.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Var,
        steps: usize,
        variant: AttentionVariant,
        value_mode: ValueMode,
    ) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s || self.shape(v) != s || steps == 0 || s[0] % steps != 0 {
            return shape_err("causal_attention", format!("q {s:?}, k {:?}, v {:?}, T={steps}", self.shape(k), self.shape(v)));
        }
        let dims = AttnDims {
            steps,
            batch: s[0] / steps,
            c: s[1],
            n: s[2],
        };
        let (c, n) = (dims.c, dims.n);
        if self.shape(bias) != [n, n] {
            return shape_err("causal_attention", format!("bias {:?} for {n} tokens", self.shape(bias)));
        }
        let zaw = variant == AttentionVariant::Zaw;
        let (qd, kd, vd, bd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            self.value(bias).data(),
        );
        let mut out = vec![F::zero(); qd.len()];
        let mut probs = Vec::new();
        let mut sums = Vec::new();
        let uniform = uniform_block::<F>(n);
        let mut logits = vec![F::zero(); n * n];

        for b in 0..dims.batch {
            for t in 0..steps {
                let mut sum = vec![F::zero(); n * n];
                for tp in 0..steps {
                    let admitted = variant.sources(t, steps).contains(&tp);
                    let p = if !admitted || zaw {
                        Vec::new()
                    } else {
                        logits_block(&qd[dims.frame(tp, b)], &kd[dims.frame(t, b)], (tp == t).then_some(bd), c, n, &mut logits);
                        let mut p = vec![F::zero(); n * n];
                        for i in 0..n {
                            softmax_row(&logits[i * n..(i + 1) * n], &mut p[i * n..(i + 1) * n]);
                        }
                        p
                    };
                    if admitted {
                        let pb: &[F] = if zaw { &uniform } else { &p };
                        match value_mode {
                            ValueMode::Literal => sum.iter_mut().zip(pb).for_each(|(s, &x)| *s += x),
                            // out_t[c,i] += Σ_j P[i,j] V_{t'}[c,j]
                            ValueMode::StandardCausal => {
                                gemm(c, n, n, &vd[dims.frame(tp, b)], Tr::N, pb, Tr::T, F::one(), &mut out[dims.frame(t, b)]);
                            }
                        }
                    }
                    probs.push(p);
                }
                if value_mode == ValueMode::Literal {
                    gemm(c, n, n, &vd[dims.frame(t, b)], Tr::N, &sum, Tr::T, F::zero(), &mut out[dims.frame(t, b)]);
                    sums.push(sum);
                }
            }
        }
        let func = CausalAttention {
            dims,
            variant,
            value_mode,
            probs,
            sums,
        };
        Ok(self.apply(&[q, k, v, bias], Tensor::new(s, out)?, func))
    }
}

/// Parameters and settings of one attention insertion point.
#[derive(Debug, Clone)]
pub struct AttentionStage {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bias_table: ParamId,
    pub variant: AttentionVariant,
    pub value_mode: ValueMode,
    pub residual: bool,
}

impl AttentionStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        name: &str,
        channels: usize,
        height: usize,
        width: usize,
        variant: AttentionVariant,
        value_mode: ValueMode,
        residual: bool,
    ) -> Self {
        let mut proj = |which: &str| {
            store.add_weight(
                format!("{name}.{which}.weight"),
                kaiming(rng, &[channels, channels], channels),
            )
        };
        let (wq, wk, wv) = (proj("q"), proj("k"), proj("v"));
        let bias_table = store.add_weight(
            format!("{name}.bias_table"),
            Tensor::zeros(&[2 * height - 1, 2 * width - 1]),
        );
        Self {
            name: name.to_string(),
            channels,
            height,
            width,
            wq,
            wk,
            wv,
            bias_table,
            variant,
            value_mode,
            residual,
        }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Spiking Q, K, V from flattened `[T·B, C, N]` tokens, each through its
    /// own projection and its own LIF layer.
    pub fn project_qkv<F: Scalar>(&self, f: &mut Fwd<'_, F>, x: Var) -> Result<(Var, Var, Var)> {
        let mut one = |w: ParamId, which: &str| -> Result<Var> {
            let y = f.g.conv1x1_tokens(x, f.bound.var(w))?;
            f.lif(y, &format!("{}.{which}", self.name))
        };
        Ok((one(self.wq, "q")?, one(self.wk, "k")?, one(self.wv, "v")?))
    }

    /// `[T·B, C, H, W] -> [T·B, C, H, W]`.
    pub fn forward<F: Scalar>(&self, f: &mut Fwd<'_, F>, x: Var) -> Result<Var> {
        let shape = f.g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels || shape[2] != self.height || shape[3] != self.width {
            return shape_err(
                "ssam",
                format!(
                    "stage {} expects [*, {}, {}, {}], got {shape:?}",
                    self.name, self.channels, self.height, self.width
                ),
            );
        }
        let n = self.tokens();
        let tokens = f.g.reshape(x, &[shape[0], self.channels, n])?;
        let (q, k, v) = self.project_qkv(f, tokens)?;
        let bias = f.g.bias_matrix(f.bound.var(self.bias_table), self.height, self.width)?;
        let mixed = f.g.causal_attention(q, k, v, bias, f.steps, self.variant, self.value_mode)?;
        let out = f.lif(mixed, &format!("{}.out", self.name))?;
        if let Some(taps) = f.ctx.taps.as_mut() {
            taps.push(AttentionTap {
                stage: self.name.clone(),
                steps: f.steps,
                batch: shape[0] / f.steps,
                channels: self.channels,
                height: self.height,
                width: self.width,
                q: f.g.value(q).clone(),
                k: f.g.value(k).clone(),
                v: f.g.value(v).clone(),
                bias: f.g.value(bias).clone(),
                output: f.g.value(out).clone(),
            });
        }
        let out = f.g.reshape(out, &shape)?;
        if self.residual {
            f.g.add(x, out)
        } else {
            Ok(out)
        }
    }
}

/// Extracts sequence `b` of a time-major `[T·B, C, N]` tensor as `[T, C, N]`.
pub fn sequence_slice<F: Scalar>(x: &Tensor<F>, steps: usize, b: usize) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() != 3 || s[0] % steps != 0 || b >= s[0] / steps {
        return shape_err("sequence_slice", format!("{s:?}, T={steps}, b={b}"));
    }
    let batch = s[0] / steps;
    let frame = s[1] * s[2];
    let mut out = Vec::with_capacity(steps * frame);
    for t in 0..steps {
        let f = t * batch + b;
        out.extend_from_slice(&x.data()[f * frame..(f + 1) * frame]);
    }
    Tensor::new(vec![steps, s[1], s[2]], out)
}
