//! The multi-task network: a shifted-window transformer encoder, a
//! convolutional residual decoder with skip connections, a segmentation head
//! and a motion-grade classification head.
//!
//! Data flow for an input `[1, z, y, x]` (widths for base width `F`):
//!
//! ```text
//! x  ──────────────────────────────── enc0 (1→F) ───────────────┐
//! patch embed → h0 (F,  /2)  ──────── enc1 ─────────────────┐   │
//! stage 0     → h1 (2F, /4)  ──────── enc2 ─────────────┐   │   │
//! stage 1     → h2 (4F, /8)  ──────── enc3 ─────────┐   │   │   │
//! stage 2     → h3 (8F, /16) ───────────────────┐   │   │   │   │
//! stage 3     → h4 (16F,/32) → dec4 → up(8F) ⊕ h3 → up ⊕ … → up ⊕ enc0 → head
//!                            └─ GAP → dropout → linear → motion logits
//! ```
//!
//! Every stage runs its transformer blocks at the stage's resolution and
//! then merges 2×2×2 neighbourhoods. Hidden states feeding the decoder are
//! layer-normalised without affine parameters.

mod checkpoint;
mod config;
mod decoder;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ClsSource, ModelConfig, Profile, STAGES};
pub use decoder::{residual_block, up_block, ResBlockParams, UpBlockParams};

use crate::error::{Error, Result};
use crate::impl_module;
use crate::params::{ConvParams, LinearParams, Module};
use crate::rng::Rng;
use crate::swin::{patch_embed, patch_merging, swin_block, PatchMergingParams, SwinPair};
use crate::tensor::{no_grad, Scalar, Tensor};

pub struct StageParams<T: Scalar = f32> {
    pub blocks: Vec<SwinPair<T>>,
    pub merge: PatchMergingParams<T>,
}
impl_module!(StageParams { blocks, merge });

/// All learnable weights plus the config that shaped them.
pub struct ModelParams<T: Scalar = f32> {
    pub config: ModelConfig,
    pub embed: LinearParams<T>,
    pub stages: Vec<StageParams<T>>,
    pub enc0: ResBlockParams<T>,
    pub enc1: ResBlockParams<T>,
    pub enc2: ResBlockParams<T>,
    pub enc3: ResBlockParams<T>,
    pub dec4: ResBlockParams<T>,
    /// Upsampling path from the bottleneck towards full resolution.
    pub up: Vec<UpBlockParams<T>>,
    pub seg_head: ConvParams<T>,
    pub cls_head: LinearParams<T>,
}
impl_module!(ModelParams { embed, stages, enc0, enc1, enc2, enc3, dec4, up, seg_head, cls_head });

/// Deterministic initialisation: truncated normal (std 0.02) for
/// transformer and classifier weights, uniform ±1/√fan_in for convolutions,
/// zero biases, unit layer-norm scales.
pub fn build_model<T: Scalar>(config: &ModelConfig, rng: &mut Rng) -> Result<ModelParams<T>> {
    config.validate()?;
    let f = config.base_features;
    let p = config.patch;
    let embed = LinearParams::init(config.in_channels * p * p * p, f, true, rng);
    let mut stages = Vec::with_capacity(STAGES);
    for i in 0..STAGES {
        let w = config.stage_width(i);
        let blocks = (0..config.stage_depths[i])
            .map(|_| SwinPair::init(w, config.num_heads[i], rng))
            .collect::<Result<_>>()?;
        stages.push(StageParams { blocks, merge: PatchMergingParams::init(w, rng) });
    }
    let enc0 = ResBlockParams::init(config.in_channels, f, rng);
    let enc1 = ResBlockParams::init(f, f, rng);
    let enc2 = ResBlockParams::init(2 * f, 2 * f, rng);
    let enc3 = ResBlockParams::init(4 * f, 4 * f, rng);
    let dec4 = ResBlockParams::init(16 * f, 16 * f, rng);
    let up = [(16, 8), (8, 4), (4, 2), (2, 1), (1, 1)]
        .iter()
        .map(|&(a, b)| UpBlockParams::init(a * f, b * f, rng))
        .collect();
    let seg_head = ConvParams::init([config.seg_classes, f, 1, 1, 1], f, true, rng);
    let cls_in = match config.cls_source {
        ClsSource::EncoderBottleneck => 16 * f,
        ClsSource::DecoderOutput => f,
    };
    let cls_head = LinearParams::init(cls_in, config.cls_classes, true, rng);
    Ok(ModelParams { config: config.clone(), embed, stages, enc0, enc1, enc2, enc3, dec4, up, seg_head, cls_head })
}

/// Training mode carries the dropout stream.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

pub struct ModelOutput<T: Scalar = f32> {
    /// `[seg_classes, z, y, x]`
    pub seg_logits: Tensor<T>,
    /// `[cls_classes]`
    pub cls_logits: Tensor<T>,
}

/// Encoder outputs: patch embedding followed by one entry per stage, each
/// channel-last `[z, y, x, C]`.
pub fn encoder_forward<T: Scalar>(params: &ModelParams<T>, volume: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let cfg = &params.config;
    let mut h = patch_embed(volume, &params.embed, cfg.patch)?;
    finite(&h, "patch_embed")?;
    let mut hidden = vec![h.clone()];
    for (i, stage) in params.stages.iter().enumerate() {
        for pair in &stage.blocks {
            h = swin_block(&h, pair, cfg.window)?;
        }
        h = patch_merging(&h, &stage.merge)?;
        finite(&h, &format!("stage {i}"))?;
        hidden.push(h.clone());
    }
    Ok(hidden)
}

/// Decoder over the five-level pyramid plus the padded input. `hidden` are
/// the normalised channel-first encoder states `h0..h4`. Returns the
/// full-resolution `F`-channel feature map at the padded input size.
pub fn decoder_forward<T: Scalar>(params: &ModelParams<T>, input: &Tensor<T>, hidden: &[Tensor<T>]) -> Result<Tensor<T>> {
    if hidden.len() != STAGES + 1 {
        return Err(Error::dim(format!("decoder needs {} levels, got {}", STAGES + 1, hidden.len())));
    }
    let skips = [
        hidden[3].clone(),
        residual_block(&hidden[2], &params.enc3)?,
        residual_block(&hidden[1], &params.enc2)?,
        residual_block(&hidden[0], &params.enc1)?,
        residual_block(input, &params.enc0)?,
    ];
    let mut d = residual_block(&hidden[4], &params.dec4)?;
    for (blk, skip) in params.up.iter().zip(&skips) {
        d = up_block(&d, skip, blk)?;
    }
    finite(&d, "decoder")?;
    Ok(d)
}

fn finite<T: Scalar>(t: &Tensor<T>, layer: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite activations after {layer}")))
    }
}

/// Pads `[c, z, y, x]` at the trailing side to multiples of `p`.
fn pad_input<T: Scalar>(volume: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = volume.shape();
    let pads: Vec<(usize, usize)> = s.iter().enumerate().map(|(i, &n)| (0, if i == 0 { 0 } else { n.div_ceil(p) * p - n })).collect();
    if pads.iter().all(|q| q.1 == 0) {
        return Ok(volume.clone());
    }
    volume.pad_constant(&pads, T::zero())
}

/// Full forward pass for one volume `[in_channels, z, y, x]`.
pub fn forward<T: Scalar>(params: &ModelParams<T>, volume: &Tensor<T>, mode: Mode<'_>) -> Result<ModelOutput<T>> {
    let cfg = &params.config;
    let dims = match volume.shape() {
        [c, z, y, x] if *c == cfg.in_channels => [*z, *y, *x],
        s => {
            return Err(Error::dim(format!(
                "model input must be [{}, z, y, x], got {s:?}",
                cfg.in_channels
            )))
        }
    };
    let input = pad_input(volume, cfg.patch)?;
    let hidden: Vec<Tensor<T>> = encoder_forward(params, &input)?
        .iter()
        .map(|h| h.layer_norm(None, None, crate::params::LAYER_NORM_EPS)?.permute(&[3, 0, 1, 2]))
        .collect::<Result<_>>()?;
    let features = decoder_forward(params, &input, &hidden)?;
    let f = cfg.base_features;
    let features = features.crop(&[0, 0, 0, 0], &[f, dims[0], dims[1], dims[2]])?;
    let seg_logits = features.conv3d(&params.seg_head.weight, params.seg_head.bias.as_ref(), 1, 0)?;
    finite(&seg_logits, "segmentation head")?;
    let pooled = match cfg.cls_source {
        ClsSource::EncoderBottleneck => hidden[STAGES].global_avg_pool()?,
        ClsSource::DecoderOutput => features.global_avg_pool()?,
    };
    let pooled = match mode {
        Mode::Eval => pooled,
        Mode::Train(rng) => pooled.dropout(cfg.dropout_p, rng, true)?,
    };
    let cls_logits = params.cls_head.forward(&pooled)?;
    finite(&cls_logits, "classification head")?;
    Ok(ModelOutput { seg_logits, cls_logits })
}

/// Mean of per-model softmax probabilities for both heads:
/// `([seg_classes, z, y, x], [cls_classes])`.
pub fn ensemble_predict<T: Scalar>(models: &[ModelParams<T>], volume: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let first = models.first().ok_or_else(|| Error::Config("ensemble needs at least one model".into()))?;
    if let Some((i, _)) = models.iter().enumerate().find(|(_, m)| m.config != first.config) {
        return Err(Error::Config(format!("ensemble member {i} has a different model config")));
    }
    let _guard = no_grad();
    let mut seg: Option<Vec<T>> = None;
    let mut cls: Option<Vec<T>> = None;
    let mut shapes = (Vec::new(), Vec::new());
    for m in models {
        let out = forward(m, volume, Mode::Eval)?;
        let sp = out.seg_logits.softmax(0)?;
        let cp = out.cls_logits.softmax(0)?;
        shapes = (sp.shape().to_vec(), cp.shape().to_vec());
        accumulate(&mut seg, sp.data());
        accumulate(&mut cls, cp.data());
    }
    let inv = T::from_f64(1.0 / models.len() as f64);
    let mean = |v: Option<Vec<T>>| v.unwrap_or_default().into_iter().map(|x| x * inv).collect();
    Ok((Tensor::new(&shapes.0, mean(seg))?, Tensor::new(&shapes.1, mean(cls))?))
}

fn accumulate<T: Scalar>(acc: &mut Option<Vec<T>>, v: &[T]) {
    match acc {
        None => *acc = Some(v.to_vec()),
        Some(a) => a.iter_mut().zip(v).for_each(|(a, &b)| *a = *a + b),
    }
}

impl<T: Scalar> ModelParams<T> {
    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut out = build_model::<U>(&self.config, &mut Rng::new(0)).expect("config already validated");
        out.load_named(&self.named_params()).expect("identical architecture");
        out
    }

    /// True when every parameter is finite.
    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, t| ok &= t.all_finite());
        ok
    }
}

#[cfg(test)]
mod tests;
