//! Class activation maps weighted by the gradient of a logit with respect
//! to the pooled activations. For a head that maps the pooled vector
//! linearly to logits this is the classic CAM.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;

use crate::datagen::GrayImage;
use crate::downstream::DownstreamModel;
use crate::encoders::leaf_batch;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::matcher::{TimNet, MATCH};
use crate::tensor::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major values in `[0,1]`.
    pub values: Vec<f64>,
    pub source_class: usize,
    /// Extremes of the upsampled map before normalization.
    pub raw_min: f64,
    pub raw_max: f64,
}

/// Min-max scaling to `[0,1]`; a constant map becomes all zeros.
pub fn normalize(values: &[f64]) -> Vec<f64> {
    let (lo, hi) = min_max(values);
    if hi > lo {
        values.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; values.len()]
    }
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Bilinear resize of a row-major `h x w` map to `out_h x out_w`, sampling
/// at pixel centers (corners not aligned) with edge clamping.
pub fn upsample_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |dst: usize, n_in: usize, n_out: usize| {
        let s = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// `sum_c g_c * A_c` over `[C, H_f, W_f]` activations.
pub fn weighted_sum(acts: &[f64], weights: &[f64]) -> Vec<f64> {
    let c = weights.len();
    let hw = acts.len() / c;
    let mut out = vec![0.0; hw];
    for (plane, &g) in acts.chunks(hw).zip(weights) {
        for (o, &a) in out.iter_mut().zip(plane) {
            *o += g * a;
        }
    }
    out
}

fn finish(raw: &[f64], (hf, wf): (usize, usize), (h, w): (usize, usize), class: usize) -> Heatmap {
    let rect: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
    let up = upsample_bilinear(&rect, hf, wf, h, w);
    let (raw_min, raw_max) = min_max(&up);
    Heatmap {
        height: h,
        width: w,
        values: normalize(&up),
        source_class: class,
        raw_min,
        raw_max,
    }
}

/// Scalar `logits[0, class]`.
fn select_logit<T: Real>(tape: &mut Tape<T>, logits: Var, class: usize) -> Result<Var> {
    let k = tape.shape(logits)[1];
    if class >= k {
        return Err(Error::TargetOutOfRange { index: class, classes: k });
    }
    let mut onehot = vec![T::zero(); k];
    onehot[class] = T::one();
    let mask = tape.constant(&[1, k], onehot)?;
    let picked = tape.mul(logits, mask)?;
    Ok(tape.sum(picked))
}

fn image_hw<T: Real>(image: &Tensor<T>) -> Result<(usize, usize)> {
    match image.shape() {
        [_, h, w] => Ok((*h, *w)),
        s => Err(Error::shape("cam", format!("expected one [C,H,W] image, got {s:?}"))),
    }
}

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64().unwrap()).collect()
}

/// Heatmap of `class` for one `[C,H,W]` image. The activations are the
/// head's pointwise conv output; weights are the logit's gradient at the
/// pooled vector.
pub fn compute_cam<T: Real>(model: &DownstreamModel<T>, image: &Tensor<T>, class: usize) -> Result<Heatmap> {
    let hw = image_hw(image)?;
    let k = model.config.outputs();
    if class >= k {
        return Err(Error::TargetOutOfRange { index: class, classes: k });
    }
    let mut tape = Tape::new();
    let x = leaf_batch(&mut tape, image)?;
    let maps = model.extractor.forward(&model.store, &mut tape, x, Mode::Eval)?;
    let acts = model.head.activations(&model.store, &mut tape, maps, Mode::Eval)?;
    let shape = tape.shape(acts).to_vec();
    let a = Tensor::new(&shape, tape.value(acts).to_vec())?.with_grad();

    let mut tape = Tape::new();
    let av = tape.leaf(&a);
    let (pooled, logits) = model.head.classify(&model.store, &mut tape, av)?;
    let score = select_logit(&mut tape, logits, class)?;
    tape.backward_local(score)?;
    let g = to_f64(tape.grad(pooled).ok_or_else(|| Error::MissingGrad("pooled activations".into()))?);
    let raw = weighted_sum(&to_f64(a.data()), &g);
    Ok(finish(&raw, (shape[2], shape[3]), hw, class))
}

/// Heatmap of the match logit for `image` paired with the fixed report
/// `ids`, over the image extractor's output maps.
pub fn compute_match_cam<T: Real>(net: &TimNet<T>, ids: &[usize], image: &Tensor<T>) -> Result<Heatmap> {
    let hw = image_hw(image)?;
    let mut tape = Tape::new();
    let x = leaf_batch(&mut tape, image)?;
    let maps = net.image.extractor.forward(&net.store, &mut tape, x, Mode::Eval)?;
    let shape = tape.shape(maps).to_vec();
    let a = Tensor::new(&shape, tape.value(maps).to_vec())?.with_grad();

    let mut tape = Tape::new();
    let vt = net.text.forward(&net.store, &mut tape, ids, Mode::Eval)?;
    let av = tape.leaf(&a);
    let vi = net.image.embed_from_maps(&net.store, &mut tape, av)?;
    let d = tape.abs_diff(vt, vi)?;
    let logits = net.head.forward(&net.store, &mut tape, d)?;
    let score = select_logit(&mut tape, logits, MATCH)?;
    tape.backward_local(score)?;
    // The maps reach the logit only through average pooling, so the gradient
    // at the pooled vector is the per-channel sum of the map gradient.
    let ga = to_f64(tape.grad(av).ok_or_else(|| Error::MissingGrad("feature maps".into()))?);
    let plane = shape[2] * shape[3];
    let g: Vec<f64> = ga.chunks(plane).map(|c| c.iter().sum()).collect();
    let raw = weighted_sum(&to_f64(a.data()), &g);
    Ok(finish(&raw, (shape[2], shape[3]), hw, MATCH))
}

/// Original on the left, heatmap on the right, two white columns between.
pub fn heatmap_panel(h: &Heatmap, image: &GrayImage) -> Result<GrayImage> {
    if image.width != h.width || image.height != h.height {
        return Err(Error::Dimension {
            op: "render_heatmap",
            lhs: vec![image.height, image.width],
            rhs: vec![h.height, h.width],
        });
    }
    let w = 2 * h.width + 2;
    let mut pixels = Vec::with_capacity(w * h.height);
    for y in 0..h.height {
        pixels.extend_from_slice(&image.pixels[y * image.width..(y + 1) * image.width]);
        pixels.extend_from_slice(&[255, 255]);
        pixels.extend(h.values[y * h.width..(y + 1) * h.width].iter().map(|&v| (255.0 * v).round() as u8));
    }
    Ok(GrayImage::new(w, h.height, pixels))
}

pub fn render_heatmap(h: &Heatmap, image: &GrayImage, path: &Path) -> Result<()> {
    heatmap_panel(h, image)?.write(path)
}

/// Indices of the `count` largest values (ties by index).
pub fn top_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order.truncate(count);
    order
}

/// Logit drops from zeroing the top `area` fraction of the heatmap versus a
/// uniformly random pixel set of the same size.
pub fn occlusion_trial<T: Real, R: Rng + ?Sized>(
    model: &DownstreamModel<T>,
    image: &Tensor<T>,
    class: usize,
    area: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let heat = compute_cam(model, image, class)?;
    let n = heat.values.len();
    let count = ((area * n as f64).round() as usize).clamp(1, n);
    let logit = |img: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = leaf_batch(&mut tape, img)?;
        let logits = model.forward(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(logits)[class].to_f64().unwrap())
    };
    let occlude = |pixels: &[usize]| {
        let mut img = image.clone();
        let plane = n;
        for c in 0..img.len() / plane {
            for &p in pixels {
                img.data_mut()[c * plane + p] = T::zero();
            }
        }
        img
    };
    let base = logit(image)?;
    let cam_drop = base - logit(&occlude(&top_indices(&heat.values, count)))?;
    let random = sample(rng, n, count).into_vec();
    let rand_drop = base - logit(&occlude(&random))?;
    Ok((cam_drop, rand_drop))
}
