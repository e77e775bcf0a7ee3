use super::tape::{acc_grad, Node, Op, Tape, Var};
use super::Real;
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const LN_EPS: f64 = 1e-5;

/// Which statistics a batchnorm call normalizes with.
pub enum BnStats<'a, T> {
    /// Batch statistics; running estimates are updated in place.
    Batch {
        running_mean: &'a mut [T],
        running_var: &'a mut [T],
    },
    /// Stored running estimates.
    Running {
        running_mean: &'a [T],
        running_var: &'a [T],
    },
}

impl<T: Real> Tape<T> {
    /// Per-channel normalization of `x` viewed as `[N, C, rest...]`.
    ///
    /// `keep` (length `N * prod(rest)`) excludes positions from the batch
    /// statistics; excluded positions are still normalized.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: BnStats<'_, T>,
        keep: Option<&[bool]>,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("batchnorm", format!("need rank >= 2, got {s:?}")));
        }
        let (outer, channels) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        for p in [gamma, beta] {
            if self.shape(p) != [channels] {
                return Err(Error::Dimension {
                    op: "batchnorm",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        if let Some(m) = keep {
            if m.len() != outer * inner {
                return Err(Error::shape(
                    "batchnorm",
                    format!("mask length {} for {outer}x{inner} positions", m.len()),
                ));
            }
        }
        let count = match keep {
            Some(m) => m.iter().filter(|&&k| k).count(),
            None => outer * inner,
        };
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let eps = T::lit(BN_EPS);
        let mut inv_std = vec![T::zero(); channels];
        let mut mean = vec![T::zero(); channels];
        let batch_stats = matches!(stats, BnStats::Batch { .. });
        match stats {
            BnStats::Batch {
                running_mean,
                running_var,
            } => {
                if count < 2 {
                    return Err(Error::DegenerateVariance(count));
                }
                let cnt = T::lit(count as f64);
                let mom = T::lit(BN_MOMENTUM);
                for c in 0..channels {
                    let mut sum = T::zero();
                    for o in 0..outer {
                        let plane = &xv[(o * channels + c) * inner..][..inner];
                        sum += masked_sum(plane, keep.map(|m| &m[o * inner..][..inner]), |v| v);
                    }
                    let mu = sum / cnt;
                    let mut sq = T::zero();
                    for o in 0..outer {
                        let plane = &xv[(o * channels + c) * inner..][..inner];
                        sq += masked_sum(plane, keep.map(|m| &m[o * inner..][..inner]), |v| {
                            (v - mu) * (v - mu)
                        });
                    }
                    let var = sq / cnt;
                    mean[c] = mu;
                    inv_std[c] = T::one() / (var + eps).sqrt();
                    let unbiased = sq / T::lit((count - 1) as f64);
                    running_mean[c] = (T::one() - mom) * running_mean[c] + mom * mu;
                    running_var[c] = (T::one() - mom) * running_var[c] + mom * unbiased;
                }
            }
            BnStats::Running {
                running_mean,
                running_var,
            } => {
                for c in 0..channels {
                    mean[c] = running_mean[c];
                    inv_std[c] = T::one() / (running_var[c] + eps).sqrt();
                }
            }
        }
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                let (mu, is, ga, be) = (mean[c], inv_std[c], gv[c], bv[c]);
                let src = &xv[base..base + inner];
                for ((h, y), &v) in xhat[base..base + inner].iter_mut().zip(&mut out[base..base + inner]).zip(src) {
                    *h = (v - mu) * is;
                    *y = ga * *h + be;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        Ok(self.push(
            s,
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                outer,
                channels,
                inner,
                xhat,
                inv_std,
                batch_stats,
                mask: keep.map(|m| m.to_vec()),
                counts: vec![count; channels],
            },
        ))
    }

    /// Normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Dimension {
                    op: "layernorm",
                    lhs: s.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let xv = self.value(x);
        let rows = xv.len() / d;
        let dd = T::lit(d as f64);
        let eps = T::lit(LN_EPS);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<T>() / dd;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / dd;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        Ok(self.push(
            s,
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn batchnorm_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    op: &Op<T>,
    g: &[T],
) {
    let Op::BatchNorm {
        x,
        gamma,
        beta,
        outer,
        channels,
        inner,
        xhat,
        inv_std,
        batch_stats,
        mask,
        counts,
    } = op
    else {
        unreachable!()
    };
    let (outer, channels, inner) = (*outer, *channels, *inner);
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    let gv = &nodes[gamma.0].value;
    for o in 0..outer {
        for c in 0..channels {
            let base = (o * channels + c) * inner;
            for (&dy, &h) in g[base..base + inner].iter().zip(&xhat[base..base + inner]) {
                dbeta[c] += dy;
                dgamma[c] += dy * h;
            }
        }
    }
    // Every output depends on the statistics, so both sums run over all
    // positions; only kept positions move the statistics.
    let s1: Vec<T> = dbeta.iter().zip(gv).map(|(&a, &gc)| a * gc).collect();
    let s2: Vec<T> = dgamma.iter().zip(gv).map(|(&b, &gc)| b * gc).collect();
    acc_grad(nodes, grads, *gamma, |d| {
        d.iter_mut().zip(&dgamma).for_each(|(a, &b)| *a += b)
    });
    acc_grad(nodes, grads, *beta, |d| {
        d.iter_mut().zip(&dbeta).for_each(|(a, &b)| *a += b)
    });
    acc_grad(nodes, grads, *x, |dx| {
        for o in 0..outer {
            let m = mask.as_ref().map(|m| &m[o * inner..][..inner]);
            for c in 0..channels {
                let base = (o * channels + c) * inner;
                let cnt = T::lit(counts[c] as f64);
                let (gc, is) = (gv[c], inv_std[c]);
                let (gp, hp) = (&g[base..base + inner], &xhat[base..base + inner]);
                let d = &mut dx[base..base + inner];
                if !*batch_stats {
                    for (d, &dy) in d.iter_mut().zip(gp) {
                        *d += dy * gc * is;
                    }
                    continue;
                }
                let (a, b) = (is / cnt * s1[c], is / cnt * s2[c]);
                let sc = gc * is;
                for i in 0..inner {
                    let full = sc * gp[i];
                    d[i] += if m.is_none_or(|m| m[i]) { full - a - hp[i] * b } else { full };
                }
            }
        }
    });
}

/// Sum of `f(v)` over the entries of `plane` that `keep` marks (all when `None`).
fn masked_sum<T: Real>(plane: &[T], keep: Option<&[bool]>, f: impl Fn(T) -> T) -> T {
    match keep {
        None => plane.iter().map(|&v| f(v)).sum(),
        Some(m) => plane.iter().zip(m).filter(|(_, &k)| k).map(|(&v, _)| f(v)).sum(),
    }
}

pub(crate) fn layernorm_backward<T: Real>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    op: &Op<T>,
    g: &[T],
) {
    let Op::LayerNorm {
        x,
        gamma,
        beta,
        xhat,
        inv_std,
    } = op
    else {
        unreachable!()
    };
    let gv = &nodes[gamma.0].value;
    let d = gv.len();
    let rows = g.len() / d;
    acc_grad(nodes, grads, *gamma, |dg| {
        for r in 0..rows {
            for j in 0..d {
                dg[j] += g[r * d + j] * xhat[r * d + j];
            }
        }
    });
    acc_grad(nodes, grads, *beta, |db| {
        for r in 0..rows {
            for j in 0..d {
                db[j] += g[r * d + j];
            }
        }
    });
    acc_grad(nodes, grads, *x, |dx| {
        let dd = T::lit(d as f64);
        for r in 0..rows {
            let (mut s1, mut s2) = (T::zero(), T::zero());
            for j in 0..d {
                let dh = g[r * d + j] * gv[j];
                s1 += dh;
                s2 += dh * xhat[r * d + j];
            }
            for j in 0..d {
                let dh = g[r * d + j] * gv[j];
                dx[r * d + j] += inv_std[r] / dd * (dd * dh - s1 - xhat[r * d + j] * s2);
            }
        }
    });
}
