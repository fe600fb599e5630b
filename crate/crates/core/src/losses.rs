//! Batch-hard triplet loss, label-smoothed cross-entropy, and their weighted
//! combination over the sampled descriptor branches.

use std::collections::HashMap;

use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Bound, ParamId, ParamStore};
use crate::rng::Rng;
use crate::stfs::BranchDescriptors;
use crate::tensor::{softmax_row, Function, Graph, Scalar, Tensor, Var};

/// Squared distances below this are clamped before the square root.
const DIST_FLOOR: f64 = 1e-12;
/// Norms below this are clamped before normalizing.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub margin: f64,
    pub epsilon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.1,
            margin: 0.3,
            epsilon: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda1, self.lambda2, self.margin, self.epsilon]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0)
            && self.epsilon < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid loss weights {self:?}")))
        }
    }
}

/// `max(0, d_ap - d_an + margin)`.
pub fn hinge(d_ap: f64, d_an: f64, margin: f64) -> f64 {
    (d_ap - d_an + margin).max(0.0)
}

/// Checks that the batch has at least two identities, each with at least two
/// samples.
pub fn check_pk(labels: &[usize]) -> Result<()> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    if counts.len() < 2 || counts.values().any(|&n| n < 2) {
        return Err(Error::InvalidArgument(format!(
            "triplet loss needs >= 2 identities with >= 2 samples each, got counts {counts:?}"
        )));
    }
    Ok(())
}

struct TripletBatchHard<F> {
    normed: Vec<F>,
    norms: Vec<F>,
    dim: usize,
    /// (anchor, positive, negative, d_ap, d_an) for anchors with an active hinge.
    active: Vec<(usize, usize, usize, F, F)>,
}

impl<F: Scalar> Function<F> for TripletBatchHard<F> {
    fn name(&self) -> &'static str {
        "triplet_batch_hard"
    }

    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, g: &[F], _: &[bool]) -> Vec<Option<Vec<F>>> {
        let d = self.dim;
        let n = self.norms.len();
        let scale = g[0] / F::of_f64(n as f64);
        let floor = F::of_f64(DIST_FLOOR.sqrt());
        let mut dhat = vec![F::zero(); n * d];
        let row = |i: usize| &self.normed[i * d..(i + 1) * d];
        let push = |i: usize, j: usize, dist: F, coef: F, dhat: &mut [F]| {
            if dist <= floor {
                return;
            }
            let k = coef / dist;
            for c in 0..d {
                let diff = row(i)[c] - row(j)[c];
                dhat[i * d + c] += k * diff;
                dhat[j * d + c] -= k * diff;
            }
        };
        for &(a, p, ng, dap, dan) in &self.active {
            push(a, p, dap, scale, &mut dhat);
            push(a, ng, dan, -scale, &mut dhat);
        }
        // through x̂ = x/|x|: dx = (dx̂ - x̂ <x̂, dx̂>) / |x|. A zero row has no
        // direction to move along; it gets no gradient.
        let mut dx = vec![F::zero(); n * d];
        for i in 0..n {
            if self.norms[i] <= F::of_f64(NORM_FLOOR) {
                continue;
            }
            let xi = row(i);
            let gi = &dhat[i * d..(i + 1) * d];
            let dot: F = xi.iter().zip(gi).map(|(&a, &b)| a * b).sum();
            for c in 0..d {
                dx[i * d + c] = (gi[c] - xi[c] * dot) / self.norms[i];
            }
        }
        vec![Some(dx)]
    }
}

/// Euclidean distance matrix of L2-normalized rows.
pub fn normalized_distances<F: Scalar>(x: &Tensor<F>) -> Result<(Tensor<F>, Vec<F>, Vec<F>)> {
    if x.ndim() != 2 {
        return shape_err("triplet", format!("expected [B, D], got {:?}", x.shape()));
    }
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let mut normed = x.data().to_vec();
    let mut norms = Vec::with_capacity(n);
    for r in normed.chunks_mut(d) {
        let nr = r.iter().map(|&v| v * v).sum::<F>().sqrt().max(F::of_f64(NORM_FLOOR));
        r.iter_mut().for_each(|v| *v /= nr);
        norms.push(nr);
    }
    let mut dist = vec![F::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let sq: F = (0..d)
                .map(|c| {
                    let e = normed[i * d + c] - normed[j * d + c];
                    e * e
                })
                .sum();
            dist[i * n + j] = sq.max(F::of_f64(DIST_FLOOR)).sqrt();
        }
    }
    Ok((Tensor::new(vec![n, n], dist)?, normed, norms))
}

impl<F: Scalar> Graph<F> {
    /// Mean over anchors of the batch-hard hinge on normalized embeddings `[B, D]`.
    pub fn triplet_batch_hard(&mut self, emb: Var, labels: &[usize], margin: F) -> Result<Var> {
        let x = self.value(emb);
        if x.ndim() != 2 || x.shape()[0] != labels.len() {
            return shape_err("triplet", format!("{:?} with {} labels", x.shape(), labels.len()));
        }
        check_pk(labels)?;
        let n = labels.len();
        let (dist, normed, norms) = normalized_distances(x)?;
        let dm = dist.data();
        let mut total = F::zero();
        let mut active = Vec::new();
        for a in 0..n {
            let mut pos: Option<(usize, F)> = None;
            let mut neg: Option<(usize, F)> = None;
            for j in 0..n {
                let dv = dm[a * n + j];
                if labels[j] == labels[a] {
                    if j != a && pos.is_none_or(|(_, best)| dv > best) {
                        pos = Some((j, dv));
                    }
                } else if neg.is_none_or(|(_, best)| dv < best) {
                    neg = Some((j, dv));
                }
            }
            let ((p, dap), (ng, dan)) = (pos.expect("checked"), neg.expect("checked"));
            let l = dap - dan + margin;
            if l > F::zero() {
                total += l;
                active.push((a, p, ng, dap, dan));
            }
        }
        let out = Tensor::scalar(total / F::of_f64(n as f64));
        let func = TripletBatchHard {
            normed,
            norms,
            dim: x.shape()[1],
            active,
        };
        Ok(self.apply(&[emb], out, func))
    }

    /// Mean over rows of `-Σ_k q_k log softmax(logits)_k` with
    /// `q_k = ε/K + (1-ε)·[k = y]`.
    pub fn label_smoothing_ce(&mut self, logits: Var, targets: &[usize], epsilon: F) -> Result<Var> {
        let x = self.value(logits);
        if x.ndim() != 2 || x.shape()[0] != targets.len() {
            return shape_err("label_smoothing_ce", format!("{:?} with {} targets", x.shape(), targets.len()));
        }
        let (b, k) = (x.shape()[0], x.shape()[1]);
        if k < 2 {
            return Err(Error::InvalidArgument(format!("need >= 2 classes, got {k}")));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::InvalidArgument(format!("target {t} out of range for {k} classes")));
        }
        let mut probs = vec![F::zero(); b * k];
        let mut total = F::zero();
        let off = epsilon / F::of_f64(k as f64);
        for (r, (xr, pr)) in x.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            softmax_row(xr, pr);
            let mx = xr.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = mx + xr.iter().map(|&v| (v - mx).exp()).sum::<F>().ln();
            for (c, &v) in xr.iter().enumerate() {
                let q = off + if c == targets[r] { F::one() - epsilon } else { F::zero() };
                total -= q * (v - lse);
            }
        }
        let out = Tensor::scalar(total / F::of_f64(b as f64));
        let func = SmoothedCe {
            probs,
            targets: targets.to_vec(),
            classes: k,
            epsilon,
        };
        Ok(self.apply(&[logits], out, func))
    }
}

struct SmoothedCe<F> {
    probs: Vec<F>,
    targets: Vec<usize>,
    classes: usize,
    epsilon: F,
}

impl<F: Scalar> Function<F> for SmoothedCe<F> {
    fn name(&self) -> &'static str {
        "label_smoothing_ce"
    }

    fn backward(&self, _: &[&Tensor<F>], _: &Tensor<F>, g: &[F], _: &[bool]) -> Vec<Option<Vec<F>>> {
        let k = self.classes;
        let scale = g[0] / F::of_f64(self.targets.len() as f64);
        let off = self.epsilon / F::of_f64(k as f64);
        let mut dx = self.probs.clone();
        for (r, &t) in self.targets.iter().enumerate() {
            for c in 0..k {
                let q = off + if c == t { F::one() - self.epsilon } else { F::zero() };
                dx[r * k + c] = (dx[r * k + c] - q) * scale;
            }
        }
        vec![Some(dx)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchKind {
    Temporal,
    Spatial,
    Global,
}

/// Bias-free linear classifiers, one per branch kind, stored `[C, classes]`.
/// All three exist regardless of which branches are sampled.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub temporal: ParamId,
    pub spatial: ParamId,
    pub global: ParamId,
    pub classes: usize,
}

impl ClassifierHead {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, rng: &mut Rng, channels: usize, classes: usize) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("finite std");
        let mut make = |name: &str| {
            let w = Tensor::from_fn(&[channels, classes], |_| F::of_f64(normal.sample(rng)));
            store.add_weight(format!("head.{name}.weight"), w)
        };
        Self {
            temporal: make("temporal"),
            spatial: make("spatial"),
            global: make("global"),
            classes,
        }
    }

    pub fn weight(&self, kind: BranchKind) -> ParamId {
        match kind {
            BranchKind::Temporal => self.temporal,
            BranchKind::Spatial => self.spatial,
            BranchKind::Global => self.global,
        }
    }

    pub fn logits<F: Scalar>(&self, g: &mut Graph<F>, bound: &Bound, kind: BranchKind, x: Var) -> Result<Var> {
        g.matmul(x, bound.var(self.weight(kind)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub tri: Var,
    pub cls: Var,
}

/// `λ1·L_tri + λ2·L_cls`, each term averaged within a branch kind and then
/// across the kinds present.
pub fn total_loss<F: Scalar>(
    g: &mut Graph<F>,
    bound: &Bound,
    branches: &BranchDescriptors,
    heads: &ClassifierHead,
    labels: &[usize],
    w: &LossWeights,
) -> Result<LossParts> {
    let groups = [
        (BranchKind::Temporal, branches.temporal.clone()),
        (BranchKind::Spatial, branches.spatial.clone()),
        (BranchKind::Global, vec![branches.global]),
    ];
    let (mut tri, mut cls) = (Vec::new(), Vec::new());
    for (kind, vecs) in groups {
        if vecs.is_empty() {
            continue;
        }
        let mut t = Vec::with_capacity(vecs.len());
        let mut c = Vec::with_capacity(vecs.len());
        for v in vecs {
            t.push(g.triplet_batch_hard(v, labels, F::of_f64(w.margin))?);
            let logits = heads.logits(g, bound, kind, v)?;
            c.push(g.label_smoothing_ce(logits, labels, F::of_f64(w.epsilon))?);
        }
        tri.push(g.mean_n(&t)?);
        cls.push(g.mean_n(&c)?);
    }
    let tri = g.mean_n(&tri)?;
    let cls = g.mean_n(&cls)?;
    let a = g.scale(tri, F::of_f64(w.lambda1));
    let b = g.scale(cls, F::of_f64(w.lambda2));
    let total = g.add(a, b)?;
    Ok(LossParts { total, tri, cls })
}
