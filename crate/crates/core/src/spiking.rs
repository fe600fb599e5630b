//! Leaky integrate-and-fire dynamics, the surrogate derivative used for the
//! spike nonlinearity, and the spike-element-wise (SEW) residual block.
//!
//! Per step, with `alpha = dt / tau_m`:
//!
//! ```text
//! v' = v + alpha * (-(v - v_rest) + x)
//! spike = v' > v_th
//! v  <- v_reset if spike else v'
//! ```
//!
//! In backward the carried membrane is treated as a constant, so the gradient
//! of a spike reaches only the input of the same step:
//! `d spike / d x = alpha * tri(v' - v_th)`.

use crate::error::{shape_err, Error, Result};
use crate::nn::{kaiming, Bound, BnUpdate, ForwardCtx, MembraneTrace, ParamId, ParamStore, SpikeRate};
use crate::rng::Rng;
use crate::tensor::{Function, Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifParams {
    pub tau_m: f64,
    pub dt: f64,
    pub v_rest: f64,
    pub v_th: f64,
    pub v_reset: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau_m: 2.0,
            dt: 1.0,
            v_rest: 0.0,
            v_th: 1.0,
            v_reset: 0.0,
        }
    }
}

impl LifParams {
    pub fn new(tau_m: f64, dt: f64, v_rest: f64, v_th: f64, v_reset: f64) -> Result<Self> {
        let p = Self {
            tau_m,
            dt,
            v_rest,
            v_th,
            v_reset,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.alpha();
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::InvalidArgument(format!("dt/tau_m = {a} must lie in (0, 1]")));
        }
        if !(self.v_th > self.v_reset && self.v_th > self.v_rest) {
            return Err(Error::InvalidArgument(
                "v_th must exceed both v_reset and v_rest".into(),
            ));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        self.dt / self.tau_m
    }
}

/// Triangular window of half-width `width` centred on the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateSpec {
    pub width: f64,
}

impl Default for SurrogateSpec {
    fn default() -> Self {
        Self { width: 1.0 }
    }
}

impl SurrogateSpec {
    /// `max(0, 1 - |u|/a) / a` for `u = v - v_th`.
    #[inline]
    pub fn derivative(&self, u: f64) -> f64 {
        let a = self.width;
        (1.0 - u.abs() / a).max(0.0) / a
    }

    /// Antiderivative of [`derivative`](Self::derivative), rising from 0 to 1
    /// across `[-a, a]`.
    #[inline]
    pub fn smooth_step(&self, u: f64) -> f64 {
        let a = self.width;
        if u <= -a {
            0.0
        } else if u <= 0.0 {
            (u + a) * (u + a) / (2.0 * a * a)
        } else if u < a {
            1.0 - (a - u) * (a - u) / (2.0 * a * a)
        } else {
            1.0
        }
    }
}

/// Surrogate `d spike / d v` evaluated element-wise at membrane values `v`.
pub fn surrogate_grad<F: Scalar>(v: &Tensor<F>, params: &LifParams, spec: &SurrogateSpec) -> Result<Tensor<F>> {
    if spec.width <= 0.0 {
        return Err(Error::InvalidArgument("surrogate width must be positive".into()));
    }
    Ok(Tensor::from_fn(v.shape(), |i| {
        F::of_f64(spec.derivative(v.data()[i].as_f64() - params.v_th))
    }))
}

/// Spike nonlinearity used in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SpikeMode {
    /// Heaviside on `v' - v_th` (strict), the normal operating mode.
    #[default]
    Hard,
    /// The surrogate's antiderivative in place of the Heaviside. Makes the
    /// network a smooth function whose exact derivative equals the surrogate
    /// gradient; used to verify backward against finite differences.
    Smooth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifState<F> {
    pub v: Tensor<F>,
}

impl<F: Scalar> LifState<F> {
    pub fn at_rest(shape: &[usize], params: &LifParams) -> Self {
        Self {
            v: Tensor::full(shape, F::of_f64(params.v_rest)),
        }
    }
}

/// One integration step over a whole layer.
pub fn lif_step<F: Scalar>(
    state: &LifState<F>,
    input: &Tensor<F>,
    params: &LifParams,
) -> Result<(Tensor<F>, LifState<F>)> {
    if state.v.shape() != input.shape() {
        return shape_err("lif_step", format!("state {:?} vs input {:?}", state.v.shape(), input.shape()));
    }
    let (alpha, rest, th, reset) = consts::<F>(params);
    let mut spikes = Tensor::zeros(input.shape());
    let mut v = state.v.clone();
    for ((vi, &x), s) in v.data_mut().iter_mut().zip(input.data()).zip(spikes.data_mut()) {
        let cand = *vi + alpha * (-(*vi - rest) + x);
        if cand > th {
            *s = F::one();
            *vi = reset;
        } else {
            *vi = cand;
        }
    }
    Ok((spikes, LifState { v }))
}

/// Runs a layer of neurons from rest over `[T, ...]` inputs.
pub fn lif_sequence_forward<F: Scalar>(inputs: &Tensor<F>, params: &LifParams) -> Result<Tensor<F>> {
    let Some((&t, rest)) = inputs.shape().split_first() else {
        return shape_err("lif_sequence_forward", "need a leading time axis");
    };
    if t == 0 {
        return Err(Error::InvalidArgument("T must be at least 1".into()));
    }
    let inner: usize = rest.iter().product();
    let mut state = LifState::at_rest(rest, params);
    let mut out = Vec::with_capacity(inputs.numel());
    for step in inputs.data().chunks(inner) {
        let x = Tensor::new(rest.to_vec(), step.to_vec())?;
        let (s, next) = lif_step(&state, &x, params)?;
        out.extend_from_slice(s.data());
        state = next;
    }
    Tensor::new(inputs.shape().to_vec(), out)
}

fn consts<F: Scalar>(p: &LifParams) -> (F, F, F, F) {
    (
        F::of_f64(p.alpha()),
        F::of_f64(p.v_rest),
        F::of_f64(p.v_th),
        F::of_f64(p.v_reset),
    )
}

struct LifSeq<F> {
    /// `d spike_t / d x_t` per element.
    slope: Vec<F>,
}

impl<F: Scalar> Function<F> for LifSeq<F> {
    fn name(&self) -> &'static str {
        "lif"
    }
    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, g: &[F], _: &[bool]) -> Vec<Option<Vec<F>>> {
        vec![Some(g.iter().zip(&self.slope).map(|(&a, &b)| a * b).collect())]
    }
}

impl<F: Scalar> Graph<F> {
    /// LIF layer over a time-major input whose leading axis has `steps * k`
    /// entries (time outermost). Starts from rest.
    pub fn lif(
        &mut self,
        x: Var,
        steps: usize,
        params: &LifParams,
        ctx: &mut ForwardCtx<F>,
    ) -> Result<Var> {
        let numel = self.value(x).numel();
        if steps == 0 || numel % steps != 0 {
            return shape_err("lif", format!("{numel} values not divisible into {steps} steps"));
        }
        let inner = numel / steps;
        let (alpha, rest, th, reset) = consts::<F>(params);
        let spec = ctx.surrogate;
        let mode = ctx.spike;

        let mut replay = match &mut ctx.membrane {
            MembraneTrace::Replay { states, cursor } => {
                let r = states.get(*cursor..*cursor + steps).map(|s| s.to_vec());
                *cursor += steps;
                Some(r.ok_or_else(|| Error::InvalidArgument("membrane replay exhausted".into()))?)
            }
            _ => None,
        };
        let mut recorded = Vec::new();

        let input = self.value(x).data();
        let mut v = vec![rest; inner];
        let mut out = vec![F::zero(); numel];
        let mut slope = vec![F::zero(); numel];
        for t in 0..steps {
            if let Some(states) = replay.as_mut() {
                v.copy_from_slice(&states[t]);
            }
            if matches!(ctx.membrane, MembraneTrace::Record(_)) {
                recorded.push(v.clone());
            }
            let xs = &input[t * inner..(t + 1) * inner];
            let os = &mut out[t * inner..(t + 1) * inner];
            let ss = &mut slope[t * inner..(t + 1) * inner];
            for i in 0..inner {
                let cand = v[i] + alpha * (-(v[i] - rest) + xs[i]);
                let u = (cand - th).as_f64();
                ss[i] = alpha * F::of_f64(spec.derivative(u));
                match mode {
                    SpikeMode::Hard => {
                        if cand > th {
                            os[i] = F::one();
                            v[i] = reset;
                        } else {
                            v[i] = cand;
                        }
                    }
                    SpikeMode::Smooth => {
                        let s = F::of_f64(spec.smooth_step(u));
                        os[i] = s;
                        v[i] = cand * (F::one() - s) + reset * s;
                    }
                }
            }
        }
        if let MembraneTrace::Record(log) = &mut ctx.membrane {
            log.extend(recorded);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.apply(&[x], Tensor::new(shape, out)?, LifSeq { slope }))
    }
}

/// Bundles what every layer needs during one forward pass.
pub struct Fwd<'a, F: Scalar> {
    pub g: &'a mut Graph<F>,
    pub bound: &'a Bound,
    pub store: &'a ParamStore<F>,
    pub ctx: &'a mut ForwardCtx<F>,
    /// Time steps folded into the leading axis.
    pub steps: usize,
    pub lif: LifParams,
}

impl<F: Scalar> Fwd<'_, F> {
    /// LIF layer; `name` labels its firing-rate record when rates are collected.
    pub fn lif(&mut self, x: Var, name: &str) -> Result<Var> {
        let lif = self.lif;
        let y = self.g.lif(x, self.steps, &lif, self.ctx)?;
        if let Some(rates) = self.ctx.spike_rates.as_mut() {
            let data = self.g.value(y).data();
            let per = data.len() / self.steps;
            rates.push(SpikeRate {
                layer: name.to_string(),
                per_step: data
                    .chunks(per)
                    .map(|c| c.iter().map(|v| v.as_f64()).sum::<f64>() / per as f64)
                    .collect(),
            });
        }
        Ok(y)
    }
}

/// Convolution followed by batch norm with per-channel affine.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub name: String,
    pub weight: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
    ) -> Self {
        let weight = store.add_weight(
            format!("{prefix}.conv.weight"),
            kaiming(rng, &[cout, cin, kernel, kernel], cin * kernel * kernel),
        );
        Self {
            name: prefix.to_string(),
            weight,
            gamma: store.add_weight(format!("{prefix}.bn.weight"), Tensor::full(&[cout], F::one())),
            beta: store.add_weight(format!("{prefix}.bn.bias"), Tensor::zeros(&[cout])),
            running_mean: store.add_buffer(format!("{prefix}.bn.running_mean"), Tensor::zeros(&[cout])),
            running_var: store.add_buffer(format!("{prefix}.bn.running_var"), Tensor::full(&[cout], F::one())),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<F: Scalar>(&self, f: &mut Fwd<'_, F>, x: Var) -> Result<Var> {
        let y = f.g.conv2d(x, f.bound.var(self.weight), self.stride, self.pad)?;
        let mode = f.ctx.bn_mode(f.store, self.running_mean, self.running_var);
        let eps = f.ctx.bn_eps;
        let (y, stats) = f.g.batch_norm(y, f.bound.var(self.gamma), f.bound.var(self.beta), mode, eps)?;
        if let Some(stats) = stats {
            f.ctx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
        }
        Ok(y)
    }

    /// conv → BN → LIF.
    pub fn forward_spiking<F: Scalar>(&self, f: &mut Fwd<'_, F>, x: Var) -> Result<Var> {
        let y = self.forward(f, x)?;
        f.lif(y, &self.name)
    }
}

/// SEW residual block with ADD combiner:
/// `out = LIF(BN(conv(LIF(BN(conv(x)))))) + shortcut(x)`, where the
/// shortcut is the identity or, when shape changes, 1×1 conv → BN → LIF.
#[derive(Debug, Clone)]
pub struct SewBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub downsample: Option<ConvBn>,
}

impl SewBlock {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        rng: &mut Rng,
        prefix: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = ConvBn::new(store, rng, &format!("{prefix}.conv1"), cin, cout, 3, stride);
        let conv2 = ConvBn::new(store, rng, &format!("{prefix}.conv2"), cout, cout, 3, 1);
        let downsample = (stride != 1 || cin != cout)
            .then(|| ConvBn::new(store, rng, &format!("{prefix}.downsample"), cin, cout, 1, stride));
        Self {
            conv1,
            conv2,
            downsample,
        }
    }

    pub fn forward<F: Scalar>(&self, f: &mut Fwd<'_, F>, x: Var) -> Result<Var> {
        let a = self.conv1.forward_spiking(f, x)?;
        let b = self.conv2.forward_spiking(f, a)?;
        let shortcut = match &self.downsample {
            Some(d) => d.forward_spiking(f, x)?,
            None => x,
        };
        f.g.add(b, shortcut).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::Shape {
                op: "sew_block",
                detail: format!("residual branches disagree: {detail}"),
            },
            other => other,
        })
    }
}
