use std::fmt;
use std::str::FromStr;

use crate::config::{self, Entry};
use crate::error::{Error, Result};

/// Where the classification head reads its features from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClsSource {
    /// Deepest encoder stage.
    EncoderBottleneck,
    /// Full-resolution decoder features before the segmentation head.
    DecoderOutput,
}

impl FromStr for ClsSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder_bottleneck" => Ok(ClsSource::EncoderBottleneck),
            "decoder_output" => Ok(ClsSource::DecoderOutput),
            _ => Err(Error::Config(format!(
                "cls_source must be encoder_bottleneck or decoder_output, got {s:?}"
            ))),
        }
    }
}

impl fmt::Display for ClsSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClsSource::EncoderBottleneck => "encoder_bottleneck",
            ClsSource::DecoderOutput => "decoder_output",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("profile must be desk or paper, got {s:?}"))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

pub const STAGES: usize = 4;

/// Hyperparameters that fix the network's shapes.
///
/// `input_shape` is `x × y × z` (in-plane first, slices last); tensors hold
/// volumes as `[c, z, y, x]`. Each entry of `stage_depths` counts
/// regular/shifted sub-block pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub base_features: usize,
    pub stage_depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub seg_classes: usize,
    pub cls_classes: usize,
    pub dropout_p: f64,
    pub cls_source: ClsSource,
    pub input_shape: [usize; 3],
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            base_features: 12,
            stage_depths: vec![1; STAGES],
            num_heads: vec![3, 6, 12, 24],
            window: 2,
            patch: 2,
            in_channels: 1,
            seg_classes: 4,
            cls_classes: 3,
            dropout_p: 0.3,
            cls_source: ClsSource::EncoderBottleneck,
            input_shape: [64, 64, 16],
        }
    }

    pub fn paper() -> Self {
        ModelConfig {
            base_features: 60,
            stage_depths: vec![2; STAGES],
            window: 7,
            input_shape: [256, 256, 32],
            ..Self::desk()
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Paper => Self::paper(),
        }
    }

    /// Channel width of encoder stage `i` (0 = patch embedding).
    pub fn stage_width(&self, i: usize) -> usize {
        self.base_features << i
    }

    /// Spatial tensor dims `[z, y, x]` for `input_shape`.
    pub fn tensor_dims(&self) -> [usize; 3] {
        let [x, y, z] = self.input_shape;
        [z, y, x]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.base_features == 0 {
            return bad("base_features must be positive".into());
        }
        if self.stage_depths.len() != STAGES || self.stage_depths.contains(&0) {
            return bad(format!("stage_depths needs {STAGES} positive entries, got {:?}", self.stage_depths));
        }
        if self.num_heads.len() != STAGES {
            return bad(format!("num_heads needs {STAGES} entries, got {:?}", self.num_heads));
        }
        for (i, &h) in self.num_heads.iter().enumerate() {
            let w = self.stage_width(i);
            if h == 0 || w % h != 0 {
                return bad(format!("stage {i}: {h} heads do not divide width {w}"));
            }
        }
        if self.window == 0 || self.patch == 0 {
            return bad("window and patch must be positive".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.seg_classes < 2 || self.cls_classes < 2 {
            return bad("seg_classes and cls_classes must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p must lie in [0, 1), got {}", self.dropout_p));
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input_shape {:?} has a zero dim", self.input_shape));
        }
        Ok(())
    }

    /// Applies one config entry; returns false for keys this struct does not
    /// own.
    pub fn apply(&mut self, e: &Entry) -> Result<bool> {
        let (k, v) = (e.key.as_str(), e.value.as_str());
        match k {
            "base_features" => self.base_features = config::value(k, v)?,
            "stage_depths" => self.stage_depths = config::list(k, v)?,
            "num_heads" => self.num_heads = config::list(k, v)?,
            "window" => self.window = config::value(k, v)?,
            "patch" => self.patch = config::value(k, v)?,
            "in_channels" => self.in_channels = config::value(k, v)?,
            "seg_classes" => self.seg_classes = config::value(k, v)?,
            "cls_classes" => self.cls_classes = config::value(k, v)?,
            "dropout_p" => self.dropout_p = config::value(k, v)?,
            "cls_source" => self.cls_source = v.parse()?,
            "input_shape" => self.input_shape = config::dims3(k, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Canonical text form; parsing it back gives an equal config.
    pub fn to_text(&self) -> String {
        let [x, y, z] = self.input_shape;
        format!(
            "base_features = {}\nstage_depths = {}\nnum_heads = {}\nwindow = {}\npatch = {}\n\
             in_channels = {}\nseg_classes = {}\ncls_classes = {}\ndropout_p = {}\n\
             cls_source = {}\ninput_shape = {x}x{y}x{z}\n",
            self.base_features,
            config::join(&self.stage_depths, ","),
            config::join(&self.num_heads, ","),
            self.window,
            self.patch,
            self.in_channels,
            self.seg_classes,
            self.cls_classes,
            self.dropout_p,
            self.cls_source,
        )
    }

    /// Parses model keys only, starting from the desk defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for e in config::parse_kv(text)? {
            if !cfg.apply(&e)? {
                return Err(Error::Config(format!("line {}: unknown model key {}", e.line, e.key)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
