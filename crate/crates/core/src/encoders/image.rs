use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{ConvBn, Init, Linear, Mode};
use crate::tensor::{ParamStore, Real, Tape, Tensor, Var};

pub const IMAGE_PREFIX: &str = "image_encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageEncoderConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of residual stages; every stage after the first halves the
    /// spatial size and doubles the width.
    pub stages: usize,
    /// Channels of the final pointwise conv (the extractor output).
    pub feature_channels: usize,
    pub d_emb: usize,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            base_width: 16,
            stages: 3,
            feature_channels: 64,
            d_emb: 64,
        }
    }
}

impl ImageEncoderConfig {
    pub fn stage_width(&self, s: usize) -> usize {
        self.base_width << s
    }

    /// Spatial size of the feature maps for an `h x w` input.
    pub fn feature_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = 1 << self.stages.saturating_sub(1);
        (h / f, w / f)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = 1usize << self.stages.saturating_sub(1);
        let (c, h, w) = match shape.len() {
            3 => (shape[0], shape[1], shape[2]),
            4 => (shape[1], shape[2], shape[3]),
            _ => return Err(Error::shape("encode_image", format!("image must be rank 3 or 4, got {shape:?}"))),
        };
        if c != self.in_channels {
            return Err(Error::shape(
                "encode_image",
                format!("expected {} channels, got {c}", self.in_channels),
            ));
        }
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(
                "encode_image",
                format!("{h}x{w} not divisible by {f} for {} stages", self.stages),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
}

impl ResidualBlock {
    fn forward<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv1.forward(store, tape, x, mode, true)?;
        let y = self.conv2.forward(store, tape, y, mode, false)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(store, tape, x, mode, false)?,
            None => x,
        };
        let y = tape.add(y, skip)?;
        Ok(tape.relu(y))
    }
}

/// Every convolutional layer of the image branch: stem, residual stages and
/// the final pointwise conv + batchnorm + ReLU. This is the part that
/// transfers to downstream models.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub config: ImageEncoderConfig,
    stem: ConvBn,
    stages: Vec<ResidualBlock>,
    feature: ConvBn,
}

impl FeatureExtractor {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &ImageEncoderConfig, rng: &mut R) -> Self {
        let p = IMAGE_PREFIX;
        let stem = ConvBn::new(store, &format!("{p}.stem"), config.in_channels, config.base_width, 3, 1, rng);
        let mut stages = Vec::with_capacity(config.stages);
        let mut c_in = config.base_width;
        for s in 0..config.stages {
            let c_out = config.stage_width(s);
            let stride = if s == 0 { 1 } else { 2 };
            let name = format!("{p}.stage{}", s + 1);
            let shortcut = (stride != 1 || c_in != c_out)
                .then(|| ConvBn::new(store, &format!("{name}.shortcut"), c_in, c_out, 1, stride, rng));
            stages.push(ResidualBlock {
                conv1: ConvBn::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, rng),
                conv2: ConvBn::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, rng),
                shortcut,
            });
            c_in = c_out;
        }
        let feature = ConvBn::new(store, &format!("{p}.feature"), c_in, config.feature_channels, 1, 1, rng);
        Self {
            config: config.clone(),
            stem,
            stages,
            feature,
        }
    }

    /// `[N,C,H,W] -> [N,C_f,H_f,W_f]`.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        self.config.check_input(tape.shape(x))?;
        let mut y = self.stem.forward(store, tape, x, mode, true)?;
        for block in &self.stages {
            y = block.forward(store, tape, y, mode)?;
        }
        self.feature.forward(store, tape, y, mode, true)
    }

    /// Trainable scalar count implied by the architecture.
    pub fn expected_params(&self) -> usize {
        let c = &self.config;
        let convbn = |ci: usize, co: usize, k: usize| ci * co * k * k + 2 * co;
        let mut n = convbn(c.in_channels, c.base_width, 3);
        let mut c_in = c.base_width;
        for s in 0..c.stages {
            let c_out = c.stage_width(s);
            n += convbn(c_in, c_out, 3) + convbn(c_out, c_out, 3);
            if s != 0 || c_in != c_out {
                n += convbn(c_in, c_out, 1);
            }
            c_in = c_out;
        }
        n + convbn(c_in, c.feature_channels, 1)
    }

    /// True for store names that belong to the extractor.
    pub fn owns(name: &str) -> bool {
        name.starts_with(&format!("{IMAGE_PREFIX}.")) && !name.starts_with(&format!("{IMAGE_PREFIX}.fc."))
    }
}

/// Image branch: feature extractor, global average pooling, FC projection.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub extractor: FeatureExtractor,
    fc: Linear,
}

impl ImageEncoder {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: &ImageEncoderConfig, rng: &mut R) -> Self {
        let extractor = FeatureExtractor::new(store, config, rng);
        let fc = Linear::new(
            store,
            &format!("{IMAGE_PREFIX}.fc"),
            config.feature_channels,
            config.d_emb,
            Init::Default,
            rng,
        );
        Self { extractor, fc }
    }

    pub fn config(&self) -> &ImageEncoderConfig {
        &self.extractor.config
    }

    /// `[N,C,H,W] -> [N, d_emb]`.
    pub fn forward<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let maps = self.extractor.forward(store, tape, x, mode)?;
        self.embed_from_maps(store, tape, maps)
    }

    /// GAP + FC applied to extractor output.
    pub fn embed_from_maps<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, maps: Var) -> Result<Var> {
        let pooled = tape.gap(maps)?;
        let pooled = if tape.shape(pooled).len() == 1 {
            let c = tape.shape(pooled)[0];
            tape.reshape(pooled, &[1, c])?
        } else {
            pooled
        };
        self.fc.forward(store, tape, pooled)
    }

    pub fn expected_params(&self) -> usize {
        let c = self.config();
        self.extractor.expected_params() + c.feature_channels * c.d_emb + c.d_emb
    }

    /// Embedding of one `[C,H,W]` image in eval mode.
    pub fn encode<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let x = leaf_batch(&mut tape, image)?;
        let y = self.forward(store, &mut tape, x, Mode::Eval)?;
        Ok(tape.value(y).to_vec())
    }

    /// Extractor output `[C_f,H_f,W_f]` for one image in eval mode.
    pub fn feature_maps<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = leaf_batch(&mut tape, image)?;
        let y = self.extractor.forward(store, &mut tape, x, Mode::Eval)?;
        let s = tape.shape(y).to_vec();
        Tensor::new(&s[1..], tape.value(y).to_vec())
    }
}

/// Puts a `[C,H,W]` image (or an `[N,C,H,W]` batch) on the tape as `[N,C,H,W]`.
pub fn leaf_batch<T: Real>(tape: &mut Tape<T>, image: &Tensor<T>) -> Result<Var> {
    match image.rank() {
        3 => {
            let mut s = vec![1];
            s.extend_from_slice(image.shape());
            let mut t = image.reshaped(&s)?;
            t.requires_grad = image.requires_grad;
            Ok(tape.leaf(&t))
        }
        4 => Ok(tape.leaf(image)),
        _ => Err(Error::shape("encode_image", format!("image must be rank 3 or 4, got {:?}", image.shape()))),
    }
}

/// Stacks same-shape `[C,H,W]` images into one `[N,C,H,W]` tensor.
pub fn stack_images<T: Real>(images: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::Data("cannot stack an empty image list".into()))?;
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(images.len() * first.len());
    for img in images {
        if img.shape() != first.shape() {
            return Err(Error::Dimension {
                op: "stack_images",
                lhs: first.shape().to_vec(),
                rhs: img.shape().to_vec(),
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&shape, data)
}
