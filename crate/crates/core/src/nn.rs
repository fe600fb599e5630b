//! Named parameter storage and the per-forward context shared by all layers.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::rng::{Rng, SamplerSeed};
use crate::spiking::{SpikeMode, SurrogateSpec};
use crate::tensor::{BatchNormMode, BatchStats, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learnable, receives gradients.
    Weight,
    /// Non-learnable state saved with the model (running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Param<F> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<F>,
    pub grad: Option<Vec<F>>,
}

/// Ordered, uniquely named tensors. Names double as checkpoint keys.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<F> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    fn push(&mut self, name: String, kind: ParamKind, value: Tensor<F>) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            kind,
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_weight(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.push(name.into(), ParamKind::Weight, value)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        self.push(name.into(), ParamKind::Buffer, value)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<F> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    /// Number of learnable scalars.
    pub fn num_weights(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Weight)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Registers every weight as a differentiable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<F>) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| (p.kind == ParamKind::Weight).then(|| g.param(p.value.clone())))
            .collect();
        Bound { vars }
    }

    /// Adds the leaf gradients of `g` into the stored gradients.
    pub fn accumulate_grads(&mut self, g: &Graph<F>, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(&bound.vars) {
            let Some(v) = v else { continue };
            let Some(gr) = g.grad(*v) else { continue };
            match &mut p.grad {
                Some(acc) => acc.iter_mut().zip(gr).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(gr.to_vec()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.grad = None);
    }

    /// Copies values from `other` by name, checking shapes.
    pub fn load_from(&mut self, other: &ParamStore<F>) -> Result<()> {
        for p in &mut self.params {
            let src = other
                .params
                .iter()
                .find(|q| q.name == p.name)
                .ok_or_else(|| Error::Format(format!("missing block {}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "block {}: shape {:?}, expected {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    grad: None,
                })
                .collect(),
        }
    }
}

/// Graph leaves for the weights of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Option<Var>>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0].expect("buffers are not bound into the graph")
    }
}

/// Kaiming-normal initialization for a weight with the given fan-in.
pub fn kaiming<F: Scalar>(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| F::of_f64(normal.sample(rng)))
}

pub fn uniform<F: Scalar>(rng: &mut Rng, shape: &[usize], bound: f64) -> Tensor<F> {
    Tensor::from_fn(shape, |_| F::of_f64(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// What the LIF layers do with the membrane carried between time steps.
#[derive(Debug, Clone, Default)]
pub enum MembraneTrace<F> {
    #[default]
    Off,
    /// Store the pre-step membrane of every LIF call, in call order.
    Record(Vec<Vec<F>>),
    /// Use previously recorded pre-step membranes instead of the live carry.
    Replay { states: Vec<Vec<F>>, cursor: usize },
}

#[derive(Debug, Clone)]
pub struct BnUpdate<F> {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats<F>,
}

/// Mutable state threaded through one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCtx<F> {
    pub phase: Phase,
    pub spike: SpikeMode,
    pub surrogate: SurrogateSpec,
    pub membrane: MembraneTrace<F>,
    pub bn_updates: Vec<BnUpdate<F>>,
    pub sampler: SamplerSeed,
    /// Number of stochastic sampler invocations made during this pass.
    pub sampler_calls: usize,
    pub bn_eps: F,
    /// When set, LIF layers append their per-step firing rates here.
    pub spike_rates: Option<Vec<SpikeRate>>,
    /// When set, attention stages append their intermediate tensors here.
    pub taps: Option<Vec<AttentionTap<F>>>,
}

#[derive(Debug, Clone)]
pub struct SpikeRate {
    pub layer: String,
    /// Fraction of units that fired (or mean output for graded layers), per step.
    pub per_step: Vec<f64>,
}

/// Intermediate tensors of one attention stage for one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTap<F> {
    pub stage: String,
    pub steps: usize,
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// `[T·B, C, N]`, time-major.
    pub q: Tensor<F>,
    pub k: Tensor<F>,
    pub v: Tensor<F>,
    /// `[N, N]`.
    pub bias: Tensor<F>,
    /// Output spikes before the residual, `[T·B, C, N]`.
    pub output: Tensor<F>,
}

impl<F: Scalar> ForwardCtx<F> {
    pub fn new(phase: Phase, sampler: SamplerSeed) -> Self {
        Self {
            phase,
            spike: SpikeMode::Hard,
            surrogate: SurrogateSpec::default(),
            membrane: MembraneTrace::Off,
            bn_updates: Vec::new(),
            sampler,
            sampler_calls: 0,
            bn_eps: F::of_f64(1e-5),
            spike_rates: None,
            taps: None,
        }
    }

    pub fn eval() -> Self {
        Self::new(Phase::Eval, SamplerSeed::new(0))
    }

    pub fn train(sampler: SamplerSeed) -> Self {
        Self::new(Phase::Train, sampler)
    }

    pub fn is_train(&self) -> bool {
        self.phase == Phase::Train
    }

    /// Batch-norm statistics mode for a layer with the given running buffers.
    pub(crate) fn bn_mode(&self, store: &ParamStore<F>, mean: ParamId, var: ParamId) -> BatchNormMode<F> {
        match self.phase {
            Phase::Train => BatchNormMode::Train,
            Phase::Eval => BatchNormMode::Eval {
                mean: store.value(mean).data().to_vec(),
                var: store.value(var).data().to_vec(),
            },
        }
    }
}

/// Folds observed batch statistics into running buffers.
pub fn apply_bn_updates<F: Scalar>(store: &mut ParamStore<F>, updates: &[BnUpdate<F>], momentum: F) {
    for u in updates {
        for (id, fresh) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            let buf = store.get_mut(id).value.data_mut();
            for (b, &f) in buf.iter_mut().zip(fresh) {
                *b = (F::one() - momentum) * *b + momentum * f;
            }
        }
    }
}
