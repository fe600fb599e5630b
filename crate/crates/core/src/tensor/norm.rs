use super::{c, Function, Graph, Scalar, Tensor, Var};
use crate::error::{shape_err, Result};

/// How a batch-norm call gets its statistics.
#[derive(Debug, Clone)]
pub enum BatchNormMode<F> {
    /// Normalize with statistics of the current batch.
    Train,
    /// Normalize with frozen running statistics.
    Eval { mean: Vec<F>, var: Vec<F> },
}

/// Per-channel statistics observed in a training-mode call; the caller folds
/// them into its running buffers.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    /// Unbiased variance.
    pub var: Vec<F>,
}

struct BatchNorm<F> {
    channels: usize,
    inner: usize,
    xhat: Vec<F>,
    inv_std: Vec<F>,
    batch_stats: bool,
}

impl<F: Scalar> Function<F> for BatchNorm<F> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, x: &[&Tensor<F>], _: &Tensor<F>, g: &[F], needs: &[bool]) -> Vec<Option<Vec<F>>> {
        let (cn, inner) = (self.channels, self.inner);
        let gamma = x[1].data();
        let outer = g.len() / (cn * inner);
        let count = c::<F>((outer * inner) as f64);
        let mut dgamma = vec![F::zero(); cn];
        let mut dbeta = vec![F::zero(); cn];
        for o in 0..outer {
            for ch in 0..cn {
                let base = (o * cn + ch) * inner;
                for i in base..base + inner {
                    dgamma[ch] += g[i] * self.xhat[i];
                    dbeta[ch] += g[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![F::zero(); g.len()];
            for o in 0..outer {
                for ch in 0..cn {
                    let base = (o * cn + ch) * inner;
                    let k = gamma[ch] * self.inv_std[ch];
                    if self.batch_stats {
                        // dx = γ/σ · (dy - mean(dy) - x̂·mean(dy·x̂))
                        let mdy = dbeta[ch] / count;
                        let mdyx = dgamma[ch] / count;
                        for i in base..base + inner {
                            dx[i] = k * (g[i] - mdy - self.xhat[i] * mdyx);
                        }
                    } else {
                        for i in base..base + inner {
                            dx[i] = k * g[i];
                        }
                    }
                }
            }
            dx
        });
        vec![dx, needs[1].then_some(dgamma), needs[2].then_some(dbeta)]
    }
}

impl<F: Scalar> Graph<F> {
    /// Per-channel normalization of `[M, C, ...]` with affine `gamma`, `beta`
    /// of shape `[C]`. Statistics pool over every axis except the channel.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<F>,
        eps: F,
    ) -> Result<(Var, Option<BatchStats<F>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("batch_norm", format!("need [M, C, ...], got {shape:?}"));
        }
        let cn = shape[1];
        if self.shape(gamma) != [cn] || self.shape(beta) != [cn] {
            return shape_err(
                "batch_norm",
                format!("affine {:?}/{:?} for {cn} channels", self.shape(gamma), self.shape(beta)),
            );
        }
        let inner: usize = shape[2..].iter().product();
        let outer = shape[0];
        let data = self.value(x).data();
        let count = outer * inner;

        let (mean, var_biased, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![F::zero(); cn];
                let mut var = vec![F::zero(); cn];
                for o in 0..outer {
                    for ch in 0..cn {
                        let base = (o * cn + ch) * inner;
                        mean[ch] += data[base..base + inner].iter().copied().sum::<F>();
                    }
                }
                let inv_n = F::one() / c::<F>(count as f64);
                mean.iter_mut().for_each(|m| *m *= inv_n);
                for o in 0..outer {
                    for ch in 0..cn {
                        let base = (o * cn + ch) * inner;
                        for &v in &data[base..base + inner] {
                            let d = v - mean[ch];
                            var[ch] += d * d;
                        }
                    }
                }
                let unbiased: Vec<F> = var
                    .iter()
                    .map(|&s| s / c::<F>(count.saturating_sub(1).max(1) as f64))
                    .collect();
                var.iter_mut().for_each(|v| *v *= inv_n);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != cn || var.len() != cn {
                    return shape_err("batch_norm", "running statistics length");
                }
                (mean, var, None)
            }
        };

        let inv_std: Vec<F> = var_biased.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![F::zero(); data.len()];
        let mut out = vec![F::zero(); data.len()];
        for o in 0..outer {
            for ch in 0..cn {
                let base = (o * cn + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (data[i] - mean[ch]) * inv_std[ch];
                    out[i] = gm[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let func = BatchNorm {
            channels: cn,
            inner,
            xhat,
            inv_std,
            batch_stats: stats.is_some(),
        };
        let y = self.apply(&[x, gamma, beta], Tensor::new(shape, out)?, func);
        Ok((y, stats))
    }
}
