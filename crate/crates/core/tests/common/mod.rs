//! Finite-difference checks and independent oracles shared by the
//! integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use timnet::cam::{normalize, upsample_bilinear, Heatmap};
use timnet::downstream::{DownstreamConfig, DownstreamModel, Task};
use timnet::encoders::{leaf_batch, ImageEncoderConfig};
use timnet::layers::Mode;
use timnet::seed;
use timnet::tensor::{BnStats, Tape, Tensor, Var};
use timnet::Result;

pub type R = seed::Rng;

/// Largest accepted relative error in 64-bit mode.
pub const GRAD_TOL: f64 = 1e-5;
/// Random cases per differentiable op.
pub const CASES: usize = 100;

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps components that are
/// zero up to round-off from dividing by nothing.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

pub fn uniform(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Uniform values whose magnitude is at least `gap`, keeping samples away
/// from kinks at zero.
pub fn away_from_zero(rng: &mut R, shape: &[usize], gap: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Scalar `sum(w * f(inputs))` for a fixed random projection `w`.
fn projected(inputs: &[Tensor<f64>], f: &Build<'_>, w: &mut Option<Vec<f64>>, rng: &mut R, grad: bool) -> (Tape<f64>, Vec<Var>, Var) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let t = if grad { t.clone().with_grad() } else { t.clone() };
            tape.leaf(&t)
        })
        .collect();
    let out = f(&mut tape, &vars).expect("op under test");
    let shape = tape.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w = w.get_or_insert_with(|| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let wv = tape.constant(&shape, w.clone()).unwrap();
    let p = tape.mul(out, wv).unwrap();
    let loss = tape.sum(p);
    (tape, vars, loss)
}

/// Largest relative error between autodiff and central differences over
/// every element of every input.
pub fn gradcheck(inputs: &[Tensor<f64>], rng: &mut R, f: &Build<'_>) -> f64 {
    let mut w = None;
    let (mut tape, vars, loss) = projected(inputs, f, &mut w, rng, true);
    tape.backward_local(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or(vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();
    let eval = |xs: &[Tensor<f64>], w: &mut Option<Vec<f64>>, rng: &mut R| {
        let (tape, _, loss) = projected(xs, f, w, rng, false);
        tape.value(loss)[0]
    };
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        #[allow(clippy::needless_range_loop)]
        for j in 0..xs[i].len() {
            let x0 = xs[i].data()[j];
            let h = 1e-6 * x0.abs().max(1.0);
            xs[i].data_mut()[j] = x0 + h;
            let up = eval(&xs, &mut w, rng);
            xs[i].data_mut()[j] = x0 - h;
            let down = eval(&xs, &mut w, rng);
            xs[i].data_mut()[j] = x0;
            worst = worst.max(rel_err(a[j], (up - down) / (2.0 * h)));
        }
    }
    worst
}

pub fn dims(rng: &mut R, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// One differentiable op under test: draws a random case and returns its
/// worst relative error.
pub struct OpCheck {
    pub name: &'static str,
    pub case: fn(&mut R) -> f64,
}

pub fn op_checks() -> Vec<OpCheck> {
    vec![
        OpCheck { name: "matmul", case: matmul_case },
        OpCheck { name: "bmm", case: bmm_case },
        OpCheck { name: "add_bias", case: add_bias_case },
        OpCheck { name: "add", case: add_case },
        OpCheck { name: "mul", case: mul_case },
        OpCheck { name: "scale", case: scale_case },
        OpCheck { name: "sum", case: sum_case },
        OpCheck { name: "mean", case: mean_case },
        OpCheck { name: "reshape", case: reshape_case },
        OpCheck { name: "relu", case: relu_case },
        OpCheck { name: "sigmoid", case: sigmoid_case },
        OpCheck { name: "abs_diff", case: abs_diff_case },
        OpCheck { name: "gap", case: gap_case },
        OpCheck { name: "masked_seq_mean", case: masked_seq_mean_case },
        OpCheck { name: "softmax", case: softmax_case },
        OpCheck { name: "embedding", case: embedding_case },
        OpCheck { name: "cross_entropy", case: cross_entropy_case },
        OpCheck { name: "bce_with_logits", case: bce_case },
        OpCheck { name: "conv2d", case: conv2d_case },
        OpCheck { name: "batchnorm_train", case: bn_train_case },
        OpCheck { name: "batchnorm_masked", case: bn_masked_case },
        OpCheck { name: "batchnorm_eval", case: bn_eval_case },
        OpCheck { name: "layernorm", case: layernorm_case },
        OpCheck { name: "composition", case: composition_case },
    ]
}

/// Worst error of `cases` random instances of `op`.
pub fn run_op(op: &OpCheck, cases: usize) -> f64 {
    let mut rng = seed::rng(&[seed::label("gradcheck"), seed::label(op.name)]);
    (0..cases).map(|_| (op.case)(&mut rng)).fold(0.0, f64::max)
}

fn matmul_case(rng: &mut R) -> f64 {
    let (m, k, n) = (dims(rng, 1, 5), dims(rng, 1, 5), dims(rng, 1, 5));
    let xs = [uniform(rng, &[m, k], -2.0, 2.0), uniform(rng, &[k, n], -2.0, 2.0)];
    gradcheck(&xs, rng, &|t, v| t.matmul(v[0], v[1]))
}

fn bmm_case(rng: &mut R) -> f64 {
    let (b, m, k, p) = (dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4));
    let trans = rng.random_bool(0.5);
    let rhs = if trans { [b, p, k] } else { [b, k, p] };
    let xs = [uniform(rng, &[b, m, k], -2.0, 2.0), uniform(rng, &rhs, -2.0, 2.0)];
    gradcheck(&xs, rng, &|t, v| t.bmm(v[0], v[1], trans))
}

fn add_bias_case(rng: &mut R) -> f64 {
    let (n, c, l) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 3));
    let xs = [uniform(rng, &[n, c, l], -2.0, 2.0), uniform(rng, &[c, l], -2.0, 2.0)];
    gradcheck(&xs, rng, &|t, v| t.add_bias(v[0], v[1]))
}

fn pair(rng: &mut R) -> [Tensor<f64>; 2] {
    let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
    [uniform(rng, &s, -2.0, 2.0), uniform(rng, &s, -2.0, 2.0)]
}

fn add_case(rng: &mut R) -> f64 {
    let xs = pair(rng);
    gradcheck(&xs, rng, &|t, v| t.add(v[0], v[1]))
}

fn mul_case(rng: &mut R) -> f64 {
    let xs = pair(rng);
    gradcheck(&xs, rng, &|t, v| t.mul(v[0], v[1]))
}

fn single(rng: &mut R) -> [Tensor<f64>; 1] {
    let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
    [uniform(rng, &s, -2.0, 2.0)]
}

fn scale_case(rng: &mut R) -> f64 {
    let c = rng.random_range(-3.0..3.0);
    let xs = single(rng);
    gradcheck(&xs, rng, &|t, v| Ok(t.scale(v[0], c)))
}

fn sum_case(rng: &mut R) -> f64 {
    let xs = single(rng);
    gradcheck(&xs, rng, &|t, v| Ok(t.sum(v[0])))
}

fn mean_case(rng: &mut R) -> f64 {
    let xs = single(rng);
    gradcheck(&xs, rng, &|t, v| Ok(t.mean(v[0])))
}

fn reshape_case(rng: &mut R) -> f64 {
    let (a, b) = (dims(rng, 1, 4), dims(rng, 1, 4));
    let xs = [uniform(rng, &[a, b, 2], -2.0, 2.0)];
    gradcheck(&xs, rng, &|t, v| {
        let r = t.reshape(v[0], &[b, 2 * a])?;
        let w = t.constant(&[b, 2 * a], (0..2 * a * b).map(|i| i as f64 - 1.5).collect())?;
        t.mul(r, w)
    })
}

fn relu_case(rng: &mut R) -> f64 {
    let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
    let xs = [away_from_zero(rng, &s, 1e-3)];
    gradcheck(&xs, rng, &|t, v| Ok(t.relu(v[0])))
}

fn sigmoid_case(rng: &mut R) -> f64 {
    let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
    let xs = [uniform(rng, &s, -5.0, 5.0)];
    gradcheck(&xs, rng, &|t, v| Ok(t.sigmoid(v[0])))
}

fn abs_diff_case(rng: &mut R) -> f64 {
    let s = [dims(rng, 1, 4), dims(rng, 1, 5)];
    let a = uniform(rng, &s, -2.0, 2.0);
    let d = away_from_zero(rng, &s, 1e-3);
    let b = Tensor::new(&s, a.data().iter().zip(d.data()).map(|(x, y)| x + y).collect()).unwrap();
    gradcheck(&[a, b], rng, &|t, v| t.abs_diff(v[0], v[1]))
}

fn gap_case(rng: &mut R) -> f64 {
    let shape: Vec<usize> = if rng.random_bool(0.5) {
        vec![dims(rng, 1, 3), dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4)]
    } else {
        vec![dims(rng, 1, 3), dims(rng, 1, 4), dims(rng, 1, 4)]
    };
    let xs = [uniform(rng, &shape, -2.0, 2.0)];
    gradcheck(&xs, rng, &|t, v| t.gap(v[0]))
}

fn mask(rng: &mut R, n: usize, p: f64) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(p)).collect()
}

fn masked_seq_mean_case(rng: &mut R) -> f64 {
    let (n, l, c) = (dims(rng, 1, 3), dims(rng, 1, 5), dims(rng, 1, 4));
    let keep = mask(rng, n * l, 0.7);
    let xs = [uniform(rng, &[n, l, c], -2.0, 2.0)];
    gradcheck(&xs, rng, &|t, v| t.masked_seq_mean(v[0], &keep))
}

fn softmax_case(rng: &mut R) -> f64 {
    let (r, c) = (dims(rng, 1, 4), dims(rng, 1, 6));
    let keep = rng.random_bool(0.5).then(|| mask(rng, r * c, 0.7));
    let xs = [uniform(rng, &[r, c], -3.0, 3.0)];
    gradcheck(&xs, rng, &|t, v| t.softmax(v[0], keep.as_deref()))
}

fn embedding_case(rng: &mut R) -> f64 {
    let (vocab, d, n) = (dims(rng, 1, 6), dims(rng, 1, 4), dims(rng, 1, 6));
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    let xs = [uniform(rng, &[vocab, d], -2.0, 2.0)];
    gradcheck(&xs, rng, &|t, v| t.embedding(v[0], &ids))
}

fn cross_entropy_case(rng: &mut R) -> f64 {
    let (n, k) = (dims(rng, 1, 5), dims(rng, 2, 5));
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let xs = [uniform(rng, &[n, k], -4.0, 4.0)];
    gradcheck(&xs, rng, &|t, v| t.cross_entropy(v[0], &targets))
}

fn bce_case(rng: &mut R) -> f64 {
    let (n, k) = (dims(rng, 1, 5), dims(rng, 1, 4));
    let targets: Vec<f64> = (0..n * k).map(|_| f64::from(u8::from(rng.random_bool(0.5)))).collect();
    let xs = [uniform(rng, &[n, k], -4.0, 4.0)];
    gradcheck(&xs, rng, &|t, v| t.bce_with_logits(v[0], &targets))
}

fn conv2d_case(rng: &mut R) -> f64 {
    let k = [1, 3][rng.random_range(0..2)];
    let stride = dims(rng, 1, 2);
    let pad = rng.random_range(0..=1);
    let (c_in, c_out) = (dims(rng, 1, 2), dims(rng, 1, 3));
    let (h, w) = (dims(rng, k.max(2), 5), dims(rng, k.max(2), 5));
    let mut x_shape = vec![c_in, h, w];
    if rng.random_bool(0.5) {
        x_shape.insert(0, dims(rng, 1, 2));
    }
    let xs = [uniform(rng, &x_shape, -2.0, 2.0), uniform(rng, &[c_out, c_in, k, k], -1.0, 1.0)];
    gradcheck(&xs, rng, &|t, v| t.conv2d(v[0], v[1], stride, pad))
}

fn bn_inputs(rng: &mut R) -> ([Tensor<f64>; 3], usize, usize) {
    let (n, c) = (dims(rng, 2, 3), dims(rng, 1, 3));
    let rest: Vec<usize> = if rng.random_bool(0.5) { vec![dims(rng, 1, 3), dims(rng, 1, 3)] } else { vec![] };
    let mut shape = vec![n, c];
    shape.extend(&rest);
    let inner: usize = rest.iter().product();
    (
        [
            uniform(rng, &shape, -2.0, 2.0),
            uniform(rng, &[c], 0.5, 1.5),
            uniform(rng, &[c], -1.0, 1.0),
        ],
        c,
        n * inner,
    )
}

fn bn_train_case(rng: &mut R) -> f64 {
    let (xs, c, _) = bn_inputs(rng);
    gradcheck(&xs, rng, &|t, v| {
        let (mut m, mut s) = (vec![0.0; c], vec![1.0; c]);
        t.batchnorm(v[0], v[1], v[2], BnStats::Batch { running_mean: &mut m, running_var: &mut s }, None)
    })
}

fn bn_masked_case(rng: &mut R) -> f64 {
    let (xs, c, positions) = bn_inputs(rng);
    let mut keep = mask(rng, positions, 0.6);
    keep[0] = true;
    keep[positions - 1] = true;
    gradcheck(&xs, rng, &|t, v| {
        let (mut m, mut s) = (vec![0.0; c], vec![1.0; c]);
        t.batchnorm(v[0], v[1], v[2], BnStats::Batch { running_mean: &mut m, running_var: &mut s }, Some(&keep))
    })
}

fn bn_eval_case(rng: &mut R) -> f64 {
    let (xs, c, _) = bn_inputs(rng);
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    gradcheck(&xs, rng, &|t, v| {
        t.batchnorm(v[0], v[1], v[2], BnStats::Running { running_mean: &mean, running_var: &var }, None)
    })
}

fn layernorm_case(rng: &mut R) -> f64 {
    let (r, d) = (dims(rng, 1, 4), dims(rng, 2, 6));
    let xs = [
        uniform(rng, &[r, d], -2.0, 2.0),
        uniform(rng, &[d], 0.5, 1.5),
        uniform(rng, &[d], -1.0, 1.0),
    ];
    gradcheck(&xs, rng, &|t, v| t.layernorm(v[0], v[1], v[2]))
}

/// Linear, sigmoid, linear, softmax and cross-entropy stacked.
fn composition_case(rng: &mut R) -> f64 {
    let (n, d, hdim, k) = (dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 1, 4), dims(rng, 2, 4));
    let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    let xs = [
        uniform(rng, &[n, d], -2.0, 2.0),
        uniform(rng, &[d, hdim], -1.0, 1.0),
        uniform(rng, &[hdim], -1.0, 1.0),
        uniform(rng, &[hdim, k], -1.0, 1.0),
    ];
    gradcheck(&xs, rng, &|t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.add_bias(h, v[2])?;
        let h = t.sigmoid(h);
        let o = t.matmul(h, v[3])?;
        t.cross_entropy(o, &targets)
    })
}

/// Direct six-loop cross-correlation of `[C_in,H,W]` with
/// `[C_out,C_in,k,k]`, zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv_oracle(x: &[f64], c_in: usize, h: usize, w: usize, k_: &[f64], c_out: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for co in 0..c_out {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                acc += x[(ci * h + iy as usize) * w + ix as usize] * k_[((co * c_in + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    out
}

/// O(n^2) Mann-Whitney count over every (positive, negative) pair.
pub fn pairwise_auroc(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] && !l[j] {
                den += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / den
}

/// Rank of each item counted directly: higher scores first, ties by index.
pub fn rank_walk_ap(s: &[f64], l: &[bool]) -> f64 {
    let rank = |i: usize| 1 + (0..s.len()).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count();
    let pos: Vec<usize> = (0..s.len()).filter(|&i| l[i]).collect();
    let total: f64 = pos
        .iter()
        .map(|&i| {
            let r = rank(i);
            let above = pos.iter().filter(|&&j| rank(j) <= r).count();
            above as f64 / r as f64
        })
        .sum();
    total / pos.len() as f64
}

/// Random instance with deliberate duplicate scores and both classes.
pub fn ranking_instance(rng: &mut R) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(1..=n.max(2));
    let mut s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
    l[0] = true;
    l[1] = false;
    if rng.random_bool(0.5) {
        s.iter_mut().for_each(|v| *v += rng.random_range(0.0..1e-3));
    }
    (s, l)
}

/// Closed-form first Adam update: the bias-corrected moments reduce to
/// `g` and `g^2`.
pub fn adam_first_step(p: f64, g: f64, lr: f64, beta1: f64, beta2: f64, eps: f64) -> f64 {
    let m = (1.0 - beta1) * g / (1.0 - beta1);
    let v = (1.0 - beta2) * g * g / (1.0 - beta2);
    p - lr * m / (v.sqrt() + eps)
}

/// Worst |autodiff conv - nested loops| over the fixed 2x5x5 / 3x2x3x3 case
/// and 200 random geometries (batched and unbatched).
pub fn conv_oracle_worst() -> f64 {
    let mut rng = seed::rng(&[seed::label("conv_oracle")]);
    let mut geoms = vec![(1, 2, 5, 5, 3, 3, 1, 1)];
    for _ in 0..200 {
        let k = [1, 3, 5][rng.random_range(0..3)];
        geoms.push((
            dims(&mut rng, 1, 3),
            dims(&mut rng, 1, 4),
            dims(&mut rng, k, 9),
            dims(&mut rng, k, 9),
            dims(&mut rng, 1, 4),
            k,
            dims(&mut rng, 1, 3),
            rng.random_range(0..=k / 2 + 1),
        ));
    }
    let mut worst = 0.0f64;
    for (n, c_in, h, w, c_out, k, stride, pad) in geoms {
        let x = uniform(&mut rng, &[n, c_in, h, w], -2.0, 2.0);
        let kern = uniform(&mut rng, &[c_out, c_in, k, k], -1.0, 1.0);
        let mut tape = Tape::new();
        let (xv, kv) = (tape.leaf(&x), tape.leaf(&kern));
        let out = tape.conv2d(xv, kv, stride, pad).unwrap();
        let got = tape.value(out);
        let per = got.len() / n;
        for i in 0..n {
            let sample = &x.data()[i * c_in * h * w..(i + 1) * c_in * h * w];
            let want = conv_oracle(sample, c_in, h, w, kern.data(), c_out, k, stride, pad);
            assert_eq!(want.len(), per);
            for (a, b) in got[i * per..(i + 1) * per].iter().zip(&want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

/// Worst |library - closed form| of a first Adam step over random
/// hyperparameters and gradients spanning many magnitudes.
pub fn adam_oracle_worst() -> f64 {
    use timnet::tensor::{AdamConfig, AdamState, ParamStore};
    let mut rng = seed::rng(&[seed::label("adam_oracle")]);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let cfg = AdamConfig {
            lr: 10f64.powf(rng.random_range(-5.0..-1.0)),
            beta1: rng.random_range(0.5..0.99),
            beta2: rng.random_range(0.9..0.9999),
            eps: 10f64.powf(rng.random_range(-10.0..-6.0)),
        };
        let n = dims(&mut rng, 1, 20);
        let p0 = uniform(&mut rng, &[n], -3.0, 3.0);
        let g: Vec<f64> = (0..n)
            .map(|_| rng.random_range(-1.0..1.0) * 10f64.powf(rng.random_range(-9.0..2.0)))
            .collect();
        let mut store = ParamStore::new();
        let id = store.trainable("w", p0.clone());
        store.get_mut(id).accumulate_grad(&g);
        AdamState::new(cfg).step(&mut store).unwrap();
        for ((&got, &p), &gi) in store.get(id).data().iter().zip(p0.data()).zip(&g) {
            let want = adam_first_step(p, gi, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
            worst = worst.max((got - want).abs());
        }
    }
    worst
}

/// Worst |library - oracle| of auROC and AP over 1,000 random rankings each.
pub fn ranking_oracle_worst() -> (f64, f64) {
    use timnet::metrics::{auroc, average_precision};
    let mut rng = seed::rng(&[seed::label("ranking_oracle")]);
    let (mut wa, mut wp) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let (s, l) = ranking_instance(&mut rng);
        wa = wa.max((auroc(&s, &l).unwrap() - pairwise_auroc(&s, &l)).abs());
        wp = wp.max((average_precision(&s, &l).unwrap() - rank_walk_ap(&s, &l)).abs());
    }
    (wa, wp)
}

/// Worst relative error of autodiff parameter gradients against central
/// differences, over `samples` randomly chosen trainable entries.
pub fn param_gradcheck(
    store: &mut timnet::tensor::ParamStore<f64>,
    loss: &dyn Fn(&timnet::tensor::ParamStore<f64>, &mut Tape<f64>) -> Var,
    samples: usize,
    rng: &mut R,
) -> f64 {
    use timnet::tensor::{ParamId, ParamKind};
    store.zero_grad();
    let mut tape = Tape::new();
    let l = loss(store, &mut tape);
    tape.backward(l, store).unwrap();
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|p| p.kind == ParamKind::Trainable)
        .map(|p| store.id(&p.name).unwrap())
        .collect();
    let eval = |store: &timnet::tensor::ParamStore<f64>| {
        let mut tape = Tape::new();
        let l = loss(store, &mut tape);
        tape.value(l)[0]
    };
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..store.get(id).len());
        let a = store.get(id).grad().map_or(0.0, |g| g[j]);
        let x0 = store.get(id).data()[j];
        let h = 1e-6 * x0.abs().max(1.0);
        store.get_mut(id).data_mut()[j] = x0 + h;
        let up = eval(store);
        store.get_mut(id).data_mut()[j] = x0 - h;
        let down = eval(store);
        store.get_mut(id).data_mut()[j] = x0;
        worst = worst.max(rel_err(a, (up - down) / (2.0 * h)));
    }
    worst
}

/// Downstream config whose pooled vector feeds the output layer directly.
pub fn linear_head(task: Task) -> DownstreamConfig {
    DownstreamConfig {
        image: ImageEncoderConfig {
            in_channels: 1,
            base_width: 4,
            stages: 2,
            feature_channels: 6,
            d_emb: 6,
        },
        task,
        num_classes: 3,
        head_channels: 5,
        hidden: None,
    }
}

pub fn randomized_linear(cfg: &DownstreamConfig, seed: u64) -> DownstreamModel<f64> {
    let mut m = DownstreamModel::<f64>::new(cfg, seed);
    let mut rng = R::seed_from_u64(seed);
    for name in ["head.out.weight", "head.out.bias"] {
        let t = m.store.by_name(name).unwrap().clone();
        let v: Vec<f64> = (0..t.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.store.assign(name, &Tensor::new(t.shape(), v).unwrap()).unwrap();
    }
    m
}

/// With no hidden layer the class weights are the output row, so the map is
/// `sum_c W[c, class] * A_c` before rectification.
pub fn linear_cam_reference(m: &DownstreamModel<f64>, x: &Tensor<f64>, class: usize) -> Heatmap {
    let mut tape = Tape::new();
    let xv = leaf_batch(&mut tape, x).unwrap();
    let parts = m.forward_parts(&mut tape, xv, Mode::Eval).unwrap();
    let shape = tape.shape(parts.acts).to_vec();
    let (c, hf, wf) = (shape[1], shape[2], shape[3]);
    let acts = tape.value(parts.acts);
    let w = m.store.by_name("head.out.weight").unwrap();
    let k = w.shape()[1];
    let mut raw = vec![0.0; hf * wf];
    for ch in 0..c {
        for (p, r) in raw.iter_mut().enumerate() {
            *r += w.data()[ch * k + class] * acts[ch * hf * wf + p];
        }
    }
    let rect: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let up = upsample_bilinear(&rect, hf, wf, x.shape()[1], x.shape()[2]);
    Heatmap {
        height: x.shape()[1],
        width: x.shape()[2],
        values: normalize(&up),
        source_class: class,
        raw_min: up.iter().cloned().fold(f64::INFINITY, f64::min),
        raw_max: up.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}
