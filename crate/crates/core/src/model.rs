//! The full network: spiking stem, SEW stages, attention insertions, and the
//! descriptor/classifier heads.
//!
//! Inputs are time-major `[T·B, 2, H, W]`; frame `t·B + b` holds step `t` of
//! sequence `b`.

use crate::config::Config;
use crate::error::{shape_err, Error, Result};
use crate::losses::ClassifierHead;
use crate::nn::{Bound, ForwardCtx, ParamStore};
use crate::rng::stream;
use crate::spiking::{ConvBn, Fwd, SewBlock};
use crate::ssam::AttentionStage;
use crate::stfs::{branch_descriptors, BranchDescriptors};
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Network<F: Scalar> {
    pub cfg: Config,
    pub classes: usize,
    pub store: ParamStore<F>,
    stem: ConvBn,
    stages: Vec<Vec<SewBlock>>,
    /// Attention stage and the backbone stage index it follows.
    attention: Vec<(usize, AttentionStage)>,
    pub heads: ClassifierHead,
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// Final feature map `[T·B, C, h, w]` before any pooling.
    pub y2: Var,
    pub branches: BranchDescriptors,
}

impl<F: Scalar> Network<F> {
    /// Fresh network with weights drawn from the `init` stream of `cfg.seed`.
    pub fn new(cfg: &Config, classes: usize) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = stream(cfg.seed, "init");
        let mut store = ParamStore::new();
        let stem = ConvBn::new(&mut store, &mut rng, "stem", 2, cfg.widths[0], 3, 1);
        let mut stages = Vec::new();
        let mut attention = Vec::new();
        let mut cin = cfg.widths[0];
        for (i, (&width, (&blocks, &stride))) in cfg.widths.iter().zip(cfg.blocks.iter().zip(&cfg.strides)).enumerate() {
            let stage = (0..blocks)
                .map(|j| {
                    let (c, s) = if j == 0 { (cin, stride) } else { (width, 1) };
                    SewBlock::new(&mut store, &mut rng, &format!("stage{}.{j}", i + 1), c, width, s)
                })
                .collect();
            stages.push(stage);
            cin = width;
            for site in cfg.ssam_stages.iter().filter(|s| s.after_stage() == i) {
                let (h, w) = cfg.feature_size(i + 1);
                let a = AttentionStage::new(
                    &mut store,
                    &mut rng,
                    &format!("ssam.{}", site.name()),
                    width,
                    h,
                    w,
                    cfg.ssam_variant,
                    cfg.ssam_value_mode,
                    cfg.ssam_residual,
                );
                attention.push((i, a));
            }
        }
        let heads = ClassifierHead::new(&mut store, &mut rng, cin, classes);
        Ok(Self {
            cfg: cfg.clone(),
            classes,
            store,
            stem,
            stages,
            attention,
            heads,
        })
    }

    /// Same layers with values converted to another precision.
    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            cfg: self.cfg.clone(),
            classes: self.classes,
            store: self.store.cast(),
            stem: self.stem.clone(),
            stages: self.stages.clone(),
            attention: self.attention.clone(),
            heads: self.heads.clone(),
        }
    }

    pub fn attention_stages(&self) -> impl Iterator<Item = &AttentionStage> {
        self.attention.iter().map(|(_, a)| a)
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, p)| p.name.clone()).collect()
    }

    /// Expected `[T·B, 2, H, W]` with `T·B` a multiple of `T`.
    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let c = &self.cfg;
        if shape.len() != 4 || shape[0] == 0 || shape[0] % c.steps != 0 || shape[1..] != [2, c.height, c.width] {
            return shape_err(
                "model",
                format!("expected [T*B, 2, {}, {}] with T={}, got {shape:?}", c.height, c.width, c.steps),
            );
        }
        Ok(())
    }

    /// Backbone and attention up to the final feature map, then descriptors.
    /// Training-phase contexts also get the sampled branches.
    pub fn forward(&self, g: &mut Graph<F>, bound: &Bound, ctx: &mut ForwardCtx<F>, x: Var) -> Result<ForwardOut> {
        self.check_input(g.shape(x))?;
        ctx.surrogate.width = self.cfg.surrogate_width;
        let mut f = Fwd {
            g,
            bound,
            store: &self.store,
            ctx,
            steps: self.cfg.steps,
            lif: self.cfg.lif,
        };
        let mut y = self.stem.forward_spiking(&mut f, x)?;
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                y = block.forward(&mut f, y)?;
            }
            for (_, a) in self.attention.iter().filter(|(after, _)| *after == i) {
                y = a.forward(&mut f, y)?;
            }
        }
        let branches = branch_descriptors(f.g, y, self.cfg.steps, &self.cfg.stfs, f.ctx)?;
        Ok(ForwardOut { y2: y, branches })
    }

    /// Evaluation-phase forward on a constant input; returns the graph and its
    /// output handles. A pure function of parameters and input.
    pub fn run_eval(&self, x: &Tensor<F>, ctx: &mut ForwardCtx<F>) -> Result<(Graph<F>, ForwardOut)> {
        let mut g = Graph::new();
        let bound = self.store.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &bound, ctx, xv)?;
        Ok((g, out))
    }

    /// Global descriptors of a time-major batch, one row per sequence.
    pub fn embed(&self, x: &Tensor<F>) -> Result<Vec<Vec<f64>>> {
        let (g, out) = self.run_eval(x, &mut ForwardCtx::eval())?;
        let d = g.value(out.branches.global);
        let c = d.shape()[1];
        Ok(d.data().chunks(c).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect())
    }

    /// Final feature map `[T·B, C, h, w]` in evaluation phase.
    pub fn features(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let (g, out) = self.run_eval(x, &mut ForwardCtx::eval())?;
        Ok(g.value(out.y2).clone())
    }
}
