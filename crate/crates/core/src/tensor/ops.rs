//! Forward rules. Backward rules live in `backward.rs`.

use super::real::matmul_into;
use super::tape::{Op, Tape, Var};
use super::Real;
use crate::error::{Error, Result};

impl<T: Real> Tape<T> {
    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// `[M,K] x [K,N] -> [M,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b }))
    }

    /// Batched product `[B,M,K] x [B,K,P] -> [B,M,P]`; with `trans_b` the
    /// right operand is `[B,P,K]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Dimension {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); bsz * m * p];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..bsz {
                matmul_into(
                    m,
                    k,
                    p,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * p..(i + 1) * k * p],
                    trans_b,
                    &mut out[i * m * p..(i + 1) * m * p],
                    false,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![bsz, m, p], out, rg, Op::BatchMatMul { a, b, trans_b }))
    }

    /// Adds `bias` to every leading-axis slice of `x`; `bias` must have
    /// shape `x.shape[1..]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sx.len() < 2 || &sx[1..] != sb {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: sx.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let bv = self.value(bias);
        let out: Vec<T> = self
            .value(x)
            .chunks(bv.len())
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(sx.to_vec(), out, rg, Op::AddBias { x, bias }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add { a, b }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s], rg, Op::Mean { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(shape.to_vec(), out, rg, Op::Reshape { x }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Sigmoid { x })
    }

    /// Elementwise `|a - b|`; the subgradient at `a == b` is zero.
    pub fn abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("abs_diff", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y).abs())
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AbsDiff { a, b }))
    }

    /// Global average pooling: `[N,C,H,W] -> [N,C]` or `[C,H,W] -> [C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (out_shape, inner) = match s.len() {
            3 => (vec![s[0]], s[1] * s[2]),
            4 => (vec![s[0], s[1]], s[2] * s[3]),
            _ => return Err(Error::shape("gap", format!("need rank 3 or 4 input, got {s:?}"))),
        };
        let inv = T::one() / T::lit(inner as f64);
        let out = self
            .value(x)
            .chunks(inner)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(out_shape, out, rg, Op::Gap { x, inner }))
    }

    /// Mean over the sequence axis of `[N,L,C]`, restricted to positions
    /// where `keep` is true. A sequence with nothing kept falls back to
    /// its first position.
    pub fn masked_seq_mean(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || keep.len() != s[0] * s[1] {
            return Err(Error::shape(
                "masked_seq_mean",
                format!("input {s:?} with mask of length {}", keep.len()),
            ));
        }
        let (n, l, c) = (s[0], s[1], s[2]);
        let mut weights = vec![T::zero(); n * l];
        for b in 0..n {
            let row = &keep[b * l..(b + 1) * l];
            let cnt = row.iter().filter(|&&k| k).count();
            if cnt == 0 {
                weights[b * l] = T::one();
            } else {
                let w = T::one() / T::lit(cnt as f64);
                for (j, &k) in row.iter().enumerate() {
                    if k {
                        weights[b * l + j] = w;
                    }
                }
            }
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            for j in 0..l {
                let w = weights[b * l + j];
                if w == T::zero() {
                    continue;
                }
                let src = &xv[(b * l + j) * c..(b * l + j + 1) * c];
                for (o, &v) in out[b * c..(b + 1) * c].iter_mut().zip(src) {
                    *o += w * v;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![n, c], out, rg, Op::MaskedSeqMean { x, weights, len: l }))
    }

    /// Softmax over the last axis. Entries where `keep` is false get zero
    /// probability; a row with nothing kept is all zeros.
    pub fn softmax(&mut self, x: Var, keep: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let k = *s.last().unwrap();
        let xv = self.value(x);
        if let Some(m) = keep {
            if m.len() != xv.len() {
                return Err(Error::shape(
                    "softmax",
                    format!("mask length {} for input {s:?}", m.len()),
                ));
            }
        }
        let mut out = vec![T::zero(); xv.len()];
        for (r, (row, o)) in xv.chunks(k).zip(out.chunks_mut(k)).enumerate() {
            let kept = |j: usize| keep.is_none_or(|m| m[r * k + j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) {
                    o[j] = (v - mx).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|p| *p /= z);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(s, out, rg, Op::Softmax { x }))
    }

    /// Row gather from an embedding table `[V,D]`; output `[ids.len(), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be rank 2, got {s:?}")));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocabulary { id: bad, size: v });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {s:?} with {} targets", targets.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::TargetOutOfRange {
                index: bad,
                classes: k,
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for (i, row) in lv.chunks(k).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[targets[i]];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        loss /= T::lit(n as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean binary cross-entropy on sigmoid(logits) over all entries.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.len() != lv.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", lv.len(), targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != T::zero() && t != T::one()) {
            return Err(Error::NonBinaryTarget(bad.to_f64().unwrap()));
        }
        let mut loss = T::zero();
        for (&x, &y) in lv.iter().zip(targets) {
            loss += x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p();
        }
        loss /= T::lit(lv.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
