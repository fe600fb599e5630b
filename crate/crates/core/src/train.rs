//! Optimizer, identity-balanced batching, the epoch loop, and held-out
//! evaluation.

use rand::seq::{index, SliceRandom};
use rand::Rng as _;

use crate::config::Config;
use crate::data::{stack_time_major, Dataset, Sequence};
use crate::error::{Error, Result};
use crate::eval::{compute_map_cmc, Label, RetrievalResult};
use crate::losses::total_loss;
use crate::model::Network;
use crate::nn::{apply_bn_updates, ForwardCtx, ParamKind, ParamStore};
use crate::rng::{derive_seed, stream, Rng, SamplerSeed};
use crate::tensor::{Graph, Scalar};

/// Sequences per evaluation forward.
const EVAL_CHUNK: usize = 16;

/// Adaptive-moment optimizer with bias correction. Moments are kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of every weight that holds a gradient.
    pub fn step<F: Scalar>(&mut self, store: &mut ParamStore<F>, lr: f64) {
        if self.m.is_empty() {
            for p in store.iter_mut() {
                self.m.push(vec![0.0; p.value.numel()]);
                self.v.push(vec![0.0; p.value.numel()]);
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if p.kind != ParamKind::Weight {
                continue;
            }
            let Some(grad) = p.grad.as_ref() else { continue };
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let upd = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *w = F::of_f64(w.as_f64() - upd);
            }
        }
    }
}

/// Step-decayed learning rate for a 0-based epoch.
pub fn lr_at(cfg: &Config, epoch: usize) -> f64 {
    cfg.lr * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

fn eligible(groups: &[Vec<usize>], p: usize, k: usize) -> Result<Vec<&Vec<usize>>> {
    let eligible: Vec<&Vec<usize>> = groups.iter().filter(|g| g.len() >= k).collect();
    if eligible.len() < p {
        return Err(Error::Dataset(format!(
            "only {} identities have at least K={k} training sequences, batch.P={p}",
            eligible.len()
        )));
    }
    Ok(eligible)
}

/// `seed` followed by `k - 1` other members of its class.
fn k_group(rng: &mut Rng, class: &[usize], seed: usize, k: usize) -> Vec<usize> {
    let others: Vec<usize> = class.iter().copied().filter(|&i| i != seed).collect();
    let mut g = vec![seed];
    g.extend(index::sample(rng, others.len(), k - 1).into_iter().map(|i| others[i]));
    g
}

/// Batches of one epoch, as indices into the training list grouped by class.
///
/// Every sequence of a class with at least `k` members seeds one group of `k`
/// distinct same-class sequences. Groups are taken in shuffled order and
/// packed `p` per batch with distinct classes; a final batch short of classes
/// is completed with freshly drawn groups.
pub fn epoch_batches(rng: &mut Rng, groups: &[Vec<usize>], p: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    let eligible = eligible(groups, p, k)?;
    let mut seeds: Vec<(usize, usize)> = eligible
        .iter()
        .enumerate()
        .flat_map(|(c, g)| g.iter().map(move |&i| (c, i)))
        .collect();
    seeds.shuffle(rng);
    let mut queue: Vec<(usize, Vec<usize>)> = seeds
        .into_iter()
        .map(|(c, seed)| (c, k_group(rng, eligible[c], seed, k)))
        .collect();
    let mut batches = Vec::new();
    while !queue.is_empty() {
        let mut used = Vec::with_capacity(p);
        let mut batch = Vec::with_capacity(p * k);
        let mut i = 0;
        while i < queue.len() && used.len() < p {
            if used.contains(&queue[i].0) {
                i += 1;
                continue;
            }
            let (c, g) = queue.remove(i);
            used.push(c);
            batch.extend(g);
        }
        let free: Vec<usize> = (0..eligible.len()).filter(|c| !used.contains(c)).collect();
        for j in index::sample(rng, free.len(), p - used.len()) {
            let class = eligible[free[j]];
            let seed = class[rng.random_range(0..class.len())];
            batch.extend(k_group(rng, class, seed, k));
        }
        batches.push(batch);
    }
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLosses {
    pub total: f64,
    pub tri: f64,
    pub cls: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub losses: EpochLosses,
    /// Held-out `(mAP, rank-1)` when evaluated this epoch.
    pub retrieval: Option<(f64, f64)>,
}

pub const METRICS_HEADER: &str = "epoch,loss_total,loss_tri,loss_cls,map,rank1";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let (map, r1) = self
            .retrieval
            .map_or((String::new(), String::new()), |(m, r)| (format!("{m:.6}"), format!("{r:.6}")));
        format!(
            "{},{:.6},{:.6},{:.6},{map},{r1}",
            self.epoch, self.losses.total, self.losses.tri, self.losses.cls
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Network plus optimizer and random streams; everything a run advances.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub net: Network<f32>,
    pub adam: Adam,
    /// Completed epochs.
    pub epoch: usize,
    batch_rng: Rng,
    sampler: SamplerSeed,
}

impl Trainer {
    pub fn new(cfg: &Config, classes: usize) -> Result<Self> {
        Ok(Self {
            net: Network::new(cfg, classes)?,
            adam: Adam::new(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps),
            epoch: 0,
            batch_rng: stream(cfg.seed, "batch"),
            sampler: SamplerSeed::new(derive_seed(cfg.seed, "sampler")),
        })
    }

    /// Forward, backward and one optimizer step on the given training
    /// sequences. Returns `(total, tri, cls)`.
    pub fn step(&mut self, batch: &[&Sequence], lr: f64) -> Result<EpochLosses> {
        let cfg = &self.net.cfg;
        let x = stack_time_major(&batch.iter().map(|s| &s.input).collect::<Vec<_>>())?;
        let labels: Vec<usize> = batch.iter().map(|s| s.class).collect();
        let mut g = Graph::new();
        let bound = self.net.store.bind(&mut g);
        let xv = g.constant(x);
        let mut ctx = ForwardCtx::train(self.sampler);
        let out = self.net.forward(&mut g, &bound, &mut ctx, xv)?;
        let parts = total_loss(&mut g, &bound, &out.branches, &self.net.heads, &labels, &cfg.loss)?;
        let value = |v| f64::from(g.value(v).item());
        let losses = EpochLosses {
            total: value(parts.total),
            tri: value(parts.tri),
            cls: value(parts.cls),
        };
        if !(losses.total.is_finite() && losses.tri.is_finite() && losses.cls.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite loss at epoch {} (total={}, tri={}, cls={})",
                self.epoch + 1,
                losses.total,
                losses.tri,
                losses.cls
            )));
        }
        g.backward(parts.total)?;
        self.sampler = ctx.sampler;
        self.net.store.zero_grads();
        self.net.store.accumulate_grads(&g, &bound);
        self.adam.step(&mut self.net.store, lr);
        // cumulative average until it becomes smaller than the momentum
        let momentum = cfg.bn_momentum.max(1.0 / self.adam.t as f64) as f32;
        apply_bn_updates(&mut self.net.store, &ctx.bn_updates, momentum);
        Ok(losses)
    }

    /// One epoch of identity-balanced batches; returns mean losses.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochLosses> {
        let cfg = self.net.cfg.clone();
        let groups = data.train_by_class();
        let lr = lr_at(&cfg, self.epoch);
        let batches = epoch_batches(&mut self.batch_rng, &groups, cfg.batch_p, cfg.batch_k)?;
        let mut sum = EpochLosses {
            total: 0.0,
            tri: 0.0,
            cls: 0.0,
        };
        for idx in &batches {
            let batch: Vec<&Sequence> = idx.iter().map(|&i| &data.train[i]).collect();
            let l = self.step(&batch, lr)?;
            sum.total += l.total;
            sum.tri += l.tri;
            sum.cls += l.cls;
        }
        self.epoch += 1;
        let k = batches.len() as f64;
        Ok(EpochLosses {
            total: sum.total / k,
            tri: sum.tri / k,
            cls: sum.cls / k,
        })
    }
}

/// Global descriptors of the given sequences, in order.
pub fn embed_sequences<F: Scalar>(net: &Network<F>, seqs: &[&Sequence]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(seqs.len());
    for chunk in seqs.chunks(EVAL_CHUNK) {
        let x = stack_time_major(&chunk.iter().map(|s| &s.input).collect::<Vec<_>>())?;
        out.extend(net.embed(&x.cast())?);
    }
    Ok(out)
}

/// Cosine similarity that scores a zero descriptor as 0 against everything
/// instead of failing, so a silent network still gets a (poor) ranking.
pub fn lenient_cosine(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let unit = |v: &Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            v.iter().map(|x| x / n).collect()
        } else {
            vec![0.0; v.len()]
        }
    };
    let q: Vec<Vec<f64>> = queries.iter().map(unit).collect();
    let g: Vec<Vec<f64>> = gallery.iter().map(unit).collect();
    q.iter()
        .map(|a| g.iter().map(|b| a.iter().zip(b).map(|(x, y)| x * y).sum()).collect())
        .collect()
}

/// Retrieval of `queries` against `gallery` under the cross-camera protocol.
pub fn evaluate_sets<F: Scalar>(net: &Network<F>, queries: &[&Sequence], gallery: &[&Sequence]) -> Result<RetrievalResult> {
    let qe = embed_sequences(net, queries)?;
    let ge = embed_sequences(net, gallery)?;
    let silent = qe.iter().chain(&ge).filter(|v| v.iter().all(|&x| x == 0.0)).count();
    if silent > 0 {
        log::warn!("{silent} descriptors are all zero; scored as orthogonal to everything");
    }
    let sim = lenient_cosine(&qe, &ge);
    let ql: Vec<Label> = queries.iter().map(|s| s.label()).collect();
    let gl: Vec<Label> = gallery.iter().map(|s| s.label()).collect();
    compute_map_cmc(&sim, &ql, &gl)
}

/// Held-out query set against held-out gallery.
pub fn evaluate<F: Scalar>(net: &Network<F>, data: &Dataset) -> Result<RetrievalResult> {
    evaluate_sets(net, &data.queries(), &data.gallery())
}

/// Runs `cfg.epochs` epochs from scratch, calling `on_epoch` after each.
pub fn train(
    cfg: &Config,
    data: &Dataset,
    mut on_epoch: impl FnMut(&Trainer, &EpochMetrics) -> Result<()>,
) -> Result<(Trainer, Vec<EpochMetrics>)> {
    let mut trainer = Trainer::new(cfg, data.num_classes())?;
    let mut rows = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let losses = trainer.train_epoch(data)?;
        let epoch = trainer.epoch;
        let due = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let retrieval = if due {
            let r = evaluate(&trainer.net, data)?;
            Some((r.map, r.rank1()))
        } else {
            None
        };
        let row = EpochMetrics {
            epoch,
            losses,
            retrieval,
        };
        log::info!("{}", row.csv_row());
        on_epoch(&trainer, &row)?;
        rows.push(row);
    }
    Ok((trainer, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn lr_schedule() {
        let cfg = Config::default();
        assert_eq!(lr_at(&cfg, 0), 3.5e-4);
        assert_eq!(lr_at(&cfg, 29), 3.5e-4);
        assert!((lr_at(&cfg, 30) - 3.5e-4 / 3.0).abs() < 1e-18);
        assert!((lr_at(&cfg, 65) - 3.5e-4 / 9.0).abs() < 1e-18);
    }

    #[test]
    fn adam_matches_closed_form() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add_weight("w", Tensor::from_f64(&[2], &[1.0, -2.0]).unwrap());
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let grads = [[0.5, -0.25], [0.1, 0.3]];
        let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
        let mut want = [1.0, -2.0];
        for (t, g) in grads.iter().enumerate() {
            s.get_mut(w).grad = Some(g.to_vec());
            adam.step(&mut s, 0.01);
            for i in 0..2 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(t as i32 + 1));
                let vh = v[i] / (1.0 - 0.999f64.powi(t as i32 + 1));
                want[i] -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
        }
        for i in 0..2 {
            assert!((s.value(w).data()[i] - want[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn epoch_covers_every_sequence_as_seed() {
        // class sizes 6, 6, 5, 4, 3; the last is too small for K=4
        let sizes = [6, 6, 5, 4, 3];
        let groups: Vec<Vec<usize>> = sizes.iter().enumerate().map(|(c, &n)| (c * 10..c * 10 + n).collect()).collect();
        let mut rng = Rng::seed_from_u64(1);
        let batches = epoch_batches(&mut rng, &groups, 3, 4).unwrap();
        let seeds: usize = sizes.iter().filter(|&&n| n >= 4).sum();
        assert!(batches.len() >= seeds.div_ceil(3));
        let mut seen = Vec::new();
        for b in &batches {
            assert_eq!(b.len(), 12);
            let mut classes = Vec::new();
            for chunk in b.chunks(4) {
                let c = chunk[0] / 10;
                assert!(c < 4);
                assert!(chunk.iter().all(|&i| i / 10 == c));
                let mut u = chunk.to_vec();
                u.sort();
                u.dedup();
                assert_eq!(u.len(), 4);
                classes.push(c);
                seen.push(chunk[0]);
            }
            classes.sort();
            classes.dedup();
            assert_eq!(classes.len(), 3);
        }
        for g in &groups[..4] {
            assert!(g.iter().all(|i| seen.contains(i)));
        }
        assert!(matches!(epoch_batches(&mut rng, &groups, 5, 4), Err(Error::Dataset(_))));
        assert!(epoch_batches(&mut rng, &groups, 2, 7).is_err());
    }

    #[test]
    fn lenient_cosine_zero_rows() {
        let s = lenient_cosine(&[vec![0.0, 0.0], vec![3.0, 4.0]], &[vec![3.0, 4.0]]);
        assert_eq!(s[0][0], 0.0);
        assert!((s[1][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn metrics_rows() {
        let r = EpochMetrics {
            epoch: 2,
            losses: EpochLosses {
                total: 1.5,
                tri: 0.5,
                cls: 10.0,
            },
            retrieval: None,
        };
        assert_eq!(r.csv_row(), "2,1.500000,0.500000,10.000000,,");
        assert!(metrics_csv(&[r]).starts_with(METRICS_HEADER));
    }
}
