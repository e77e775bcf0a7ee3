use super::conv::conv2d_backward;
use super::norm::{batchnorm_backward, layernorm_backward};
use super::ops::sigmoid;
use super::real::matmul_into;
use super::tape::{acc_grad, Node, Op};
use super::Real;

/// Propagates the output gradient `g` of node `i` into its inputs.
pub(crate) fn apply<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: super::Var| &nodes[v.0].value;
    let shp = |v: super::Var| &nodes[v.0].shape;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul { a, b } => {
            let (m, k) = (shp(*a)[0], shp(*a)[1]);
            let n = shp(*b)[1];
            acc_grad(nodes, grads, *a, |da| {
                matmul_into(m, n, k, g, false, val(*b), true, da, true)
            });
            acc_grad(nodes, grads, *b, |db| {
                matmul_into(k, m, n, val(*a), true, g, false, db, true)
            });
        }
        Op::BatchMatMul { a, b, trans_b } => {
            let (bsz, m, k) = (shp(*a)[0], shp(*a)[1], shp(*a)[2]);
            let p = node.shape[2];
            let (av, bv) = (val(*a), val(*b));
            acc_grad(nodes, grads, *a, |da| {
                for t in 0..bsz {
                    let gi = &g[t * m * p..][..m * p];
                    let bi = &bv[t * k * p..][..k * p];
                    // trans_b: B is [P,K] so dA = dC * B; otherwise dA = dC * B^T.
                    matmul_into(m, p, k, gi, false, bi, !trans_b, &mut da[t * m * k..][..m * k], true);
                }
            });
            acc_grad(nodes, grads, *b, |db| {
                for t in 0..bsz {
                    let gi = &g[t * m * p..][..m * p];
                    let ai = &av[t * m * k..][..m * k];
                    let dbi = &mut db[t * k * p..][..k * p];
                    if *trans_b {
                        matmul_into(p, m, k, gi, true, ai, false, dbi, true);
                    } else {
                        matmul_into(k, m, p, ai, true, gi, false, dbi, true);
                    }
                }
            });
        }
        Op::AddBias { x, bias } => {
            acc_grad(nodes, grads, *x, |dx| add_into(dx, g));
            acc_grad(nodes, grads, *bias, |db| {
                for row in g.chunks(db.len()) {
                    add_into(db, row);
                }
            });
        }
        Op::Add { a, b } => {
            acc_grad(nodes, grads, *a, |d| add_into(d, g));
            acc_grad(nodes, grads, *b, |d| add_into(d, g));
        }
        Op::Mul { a, b } => {
            acc_grad(nodes, grads, *a, |d| {
                for ((d, &gg), &bb) in d.iter_mut().zip(g).zip(val(*b)) {
                    *d += gg * bb;
                }
            });
            acc_grad(nodes, grads, *b, |d| {
                for ((d, &gg), &aa) in d.iter_mut().zip(g).zip(val(*a)) {
                    *d += gg * aa;
                }
            });
        }
        Op::Scale { x, c } => {
            acc_grad(nodes, grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * *c)
            });
        }
        Op::Sum { x } => {
            acc_grad(nodes, grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean { x } => {
            acc_grad(nodes, grads, *x, |d| {
                let s = g[0] / T::lit(d.len() as f64);
                d.iter_mut().for_each(|d| *d += s)
            });
        }
        Op::Reshape { x } => acc_grad(nodes, grads, *x, |d| add_into(d, g)),
        Op::Relu { x } => {
            acc_grad(nodes, grads, *x, |d| {
                for ((d, &gg), &xx) in d.iter_mut().zip(g).zip(val(*x)) {
                    if xx > T::zero() {
                        *d += gg;
                    }
                }
            });
        }
        Op::Sigmoid { x } => {
            acc_grad(nodes, grads, *x, |d| {
                for ((d, &gg), &y) in d.iter_mut().zip(g).zip(&node.value) {
                    *d += gg * y * (T::one() - y);
                }
            });
        }
        Op::AbsDiff { a, b } => {
            let sign: Vec<T> = val(*a)
                .iter()
                .zip(val(*b))
                .map(|(&x, &y)| {
                    if x > y {
                        T::one()
                    } else if x < y {
                        -T::one()
                    } else {
                        T::zero()
                    }
                })
                .collect();
            acc_grad(nodes, grads, *a, |d| {
                for ((d, &gg), &s) in d.iter_mut().zip(g).zip(&sign) {
                    *d += gg * s;
                }
            });
            acc_grad(nodes, grads, *b, |d| {
                for ((d, &gg), &s) in d.iter_mut().zip(g).zip(&sign) {
                    *d -= gg * s;
                }
            });
        }
        Op::Gap { x, inner } => {
            acc_grad(nodes, grads, *x, |d| {
                let inv = T::one() / T::lit(*inner as f64);
                for (plane, &gg) in d.chunks_mut(*inner).zip(g) {
                    let v = gg * inv;
                    plane.iter_mut().for_each(|p| *p += v);
                }
            });
        }
        Op::MaskedSeqMean { x, weights, len } => {
            let c = shp(*x)[2];
            acc_grad(nodes, grads, *x, |d| {
                for (pos, &w) in weights.iter().enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    let b = pos / len;
                    let src = &g[b * c..(b + 1) * c];
                    for (dd, &gg) in d[pos * c..(pos + 1) * c].iter_mut().zip(src) {
                        *dd += w * gg;
                    }
                }
            });
        }
        Op::Softmax { x } => {
            let k = *node.shape.last().unwrap();
            acc_grad(nodes, grads, *x, |d| {
                for ((dr, gr), yr) in d.chunks_mut(k).zip(g.chunks(k)).zip(node.value.chunks(k)) {
                    let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        dr[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            let d = shp(*table)[1];
            acc_grad(nodes, grads, *table, |dt| {
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            });
        }
        Op::Conv2d { x, w, geom } => conv2d_backward(nodes, grads, *x, *w, geom, g),
        op @ Op::BatchNorm { .. } => batchnorm_backward(nodes, grads, op, g),
        op @ Op::LayerNorm { .. } => layernorm_backward(nodes, grads, op, g),
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let k = shp(*logits)[1];
            let scale = g[0] / T::lit(targets.len() as f64);
            acc_grad(nodes, grads, *logits, |d| {
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let y = if j == t { T::one() } else { T::zero() };
                        d[r * k + j] += (probs[r * k + j] - y) * scale;
                    }
                }
            });
        }
        Op::BceLogits { logits, targets } => {
            let scale = g[0] / T::lit(targets.len() as f64);
            acc_grad(nodes, grads, *logits, |d| {
                for ((d, &x), &y) in d.iter_mut().zip(val(*logits)).zip(targets) {
                    *d += (sigmoid(x) - y) * scale;
                }
            });
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}
