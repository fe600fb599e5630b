//! Training-time feature sampling on the deepest feature map.
//!
//! Besides the global descriptor (mean over time and space), training can add
//! `k = floor(T/2)` temporal descriptors, one per randomly chosen time step,
//! and four spatial descriptors from the quadrants around a random split
//! point. Sampling adds no parameters and never runs at evaluation time.
//!
//! One draw is made per batch forward and shared by all sequences in it.

use rand::seq::index;
use rand::Rng as _;

use crate::error::{shape_err, Error, Result};
use crate::nn::ForwardCtx;
use crate::rng::Rng;
use crate::tensor::{Graph, Scalar, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StfsConfig {
    pub enabled: bool,
    pub temporal: bool,
    pub spatial: bool,
}

impl Default for StfsConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            temporal: true,
            spatial: true,
        }
    }
}

impl StfsConfig {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }
}

/// Descriptors of one batch, each `[B, C]`.
#[derive(Debug, Clone)]
pub struct BranchDescriptors {
    pub temporal: Vec<Var>,
    /// Upper-left, upper-right, lower-left, lower-right.
    pub spatial: Vec<Var>,
    pub global: Var,
}

/// `floor(T/2)` distinct time indices, in ascending order.
pub fn temporal_indices(rng: &mut Rng, steps: usize) -> Result<Vec<usize>> {
    if steps < 2 {
        return Err(Error::InvalidArgument(format!("temporal sampling needs T >= 2, got {steps}")));
    }
    let mut idx = index::sample(rng, steps, steps / 2).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Split point `(H_r, W_r)` uniform on `{1..H-1} x {1..W-1}`.
pub fn split_point(rng: &mut Rng, h: usize, w: usize) -> Result<(usize, usize)> {
    if h < 2 || w < 2 {
        return Err(Error::InvalidArgument(format!("spatial sampling needs H, W >= 2, got {h}x{w}")));
    }
    Ok((rng.random_range(1..h), rng.random_range(1..w)))
}

/// Row and column ranges of the four quadrants around `(hr, wr)`.
pub fn quadrants(h: usize, w: usize, hr: usize, wr: usize) -> [(std::ops::Range<usize>, std::ops::Range<usize>); 4] {
    [(0..hr, 0..wr), (0..hr, wr..w), (hr..h, 0..wr), (hr..h, wr..w)]
}

/// Views time-major `[T·B, C, H, W]` as `[T, B, C, H, W]`.
fn split_time<F: Scalar>(g: &mut Graph<F>, y2: Var, steps: usize) -> Result<(Var, [usize; 4])> {
    let s = g.shape(y2).to_vec();
    if s.len() != 4 || steps == 0 || s[0] % steps != 0 {
        return shape_err("stfs", format!("expected [T*B, C, H, W] with T={steps}, got {s:?}"));
    }
    let dims = [s[0] / steps, s[1], s[2], s[3]];
    let v = g.reshape(y2, &[steps, dims[0], dims[1], dims[2], dims[3]])?;
    Ok((v, dims))
}

/// Spatial mean of each selected time step: `k` tensors of `[B, C]`.
pub fn sample_temporal<F: Scalar>(g: &mut Graph<F>, y2: Var, steps: usize, ctx: &mut ForwardCtx<F>) -> Result<Vec<Var>> {
    let (v, [_, _, h, w]) = split_time(g, y2, steps)?;
    let idx = temporal_indices(&mut ctx.sampler.next_rng(), steps)?;
    ctx.sampler_calls += 1;
    let pooled = g.avg_pool_2d(v, 0..h, 0..w)?;
    idx.into_iter().map(|t| g.index_axis0(pooled, t)).collect()
}

/// Time-and-space mean of the four quadrants: 4 tensors of `[B, C]`.
pub fn sample_spatial<F: Scalar>(g: &mut Graph<F>, y2: Var, steps: usize, ctx: &mut ForwardCtx<F>) -> Result<Vec<Var>> {
    let (v, [_, _, h, w]) = split_time(g, y2, steps)?;
    let (hr, wr) = split_point(&mut ctx.sampler.next_rng(), h, w)?;
    ctx.sampler_calls += 1;
    quadrants(h, w, hr, wr)
        .into_iter()
        .map(|(rows, cols)| {
            let p = g.avg_pool_2d(v, rows, cols)?;
            g.mean_axis0(p)
        })
        .collect()
}

/// Time-and-space mean: `[B, C]`.
pub fn global_descriptor<F: Scalar>(g: &mut Graph<F>, y2: Var, steps: usize) -> Result<Var> {
    let (v, [_, _, h, w]) = split_time(g, y2, steps)?;
    let p = g.avg_pool_2d(v, 0..h, 0..w)?;
    g.mean_axis0(p)
}

/// All descriptors for one training forward. Evaluation-phase contexts only
/// ever get the global descriptor.
pub fn branch_descriptors<F: Scalar>(
    g: &mut Graph<F>,
    y2: Var,
    steps: usize,
    cfg: &StfsConfig,
    ctx: &mut ForwardCtx<F>,
) -> Result<BranchDescriptors> {
    let global = global_descriptor(g, y2, steps)?;
    let sample = cfg.enabled && ctx.is_train();
    let temporal = if sample && cfg.temporal {
        sample_temporal(g, y2, steps, ctx)?
    } else {
        Vec::new()
    };
    let spatial = if sample && cfg.spatial {
        sample_spatial(g, y2, steps, ctx)?
    } else {
        Vec::new()
    };
    Ok(BranchDescriptors {
        temporal,
        spatial,
        global,
    })
}
