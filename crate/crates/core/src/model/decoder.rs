use crate::error::{Error, Result};
use crate::impl_module;
use crate::params::ConvParams;
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.01;

/// Two 3×3×3 convolutions with instance norm and leaky ReLU, plus a 1×1×1
/// projection on the residual path when the channel count changes.
pub struct ResBlockParams<T: Scalar = f32> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub skip: Option<ConvParams<T>>,
}
impl_module!(ResBlockParams { conv1, conv2, skip });

impl<T: Scalar> ResBlockParams<T> {
    pub fn init(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        ResBlockParams {
            conv1: ConvParams::init([c_out, c_in, 3, 3, 3], c_in * 27, false, rng),
            conv2: ConvParams::init([c_out, c_out, 3, 3, 3], c_out * 27, false, rng),
            skip: (c_in != c_out).then(|| ConvParams::init([c_out, c_in, 1, 1, 1], c_in, false, rng)),
        }
    }
}

/// Stride-2 transposed convolution followed by a residual block over the
/// concatenation with the skip features.
pub struct UpBlockParams<T: Scalar = f32> {
    /// `[c_in, c_out, 2, 2, 2]`
    pub up: ConvParams<T>,
    pub res: ResBlockParams<T>,
}
impl_module!(UpBlockParams { up, res });

impl<T: Scalar> UpBlockParams<T> {
    pub fn init(c_in: usize, c_out: usize, rng: &mut Rng) -> Self {
        // Each output voxel of a kernel-2 stride-2 transposed conv sees c_in inputs.
        let up = ConvParams::init([c_in, c_out, 2, 2, 2], c_in, false, rng);
        UpBlockParams { up, res: ResBlockParams::init(2 * c_out, c_out, rng) }
    }
}

fn conv<T: Scalar>(x: &Tensor<T>, p: &ConvParams<T>, pad: usize) -> Result<Tensor<T>> {
    x.conv3d(&p.weight, p.bias.as_ref(), 1, pad)
}

/// `[c_in, z, y, x]` → `[c_out, z, y, x]`.
pub fn residual_block<T: Scalar>(x: &Tensor<T>, p: &ResBlockParams<T>) -> Result<Tensor<T>> {
    let h = conv(x, &p.conv1, 1)?.instance_norm(INSTANCE_NORM_EPS)?.leaky_relu(LEAKY_SLOPE);
    let h = conv(&h, &p.conv2, 1)?.instance_norm(INSTANCE_NORM_EPS)?;
    let r = match &p.skip {
        Some(s) => conv(x, s, 0)?.instance_norm(INSTANCE_NORM_EPS)?,
        None => x.clone(),
    };
    Ok(h.add(&r)?.leaky_relu(LEAKY_SLOPE))
}

/// Upsamples `deep` by 2, crops it to the skip's extent, concatenates
/// `[up, skip]` on channels and fuses them with a residual block.
pub fn up_block<T: Scalar>(deep: &Tensor<T>, skip: &Tensor<T>, p: &UpBlockParams<T>) -> Result<Tensor<T>> {
    let up = deep.conv_transpose3d(&p.up.weight, p.up.bias.as_ref(), 2)?;
    let (us, ss) = (up.shape(), skip.shape());
    if us.len() != 4 || ss.len() != 4 || (1..4).any(|i| us[i] < ss[i]) || us[0] != ss[0] {
        return Err(Error::dim(format!("up block: upsampled {us:?} cannot match skip {ss:?}")));
    }
    let up = if us[1..] == ss[1..] {
        up
    } else {
        up.crop(&[0, 0, 0, 0], &[us[0], ss[1], ss[2], ss[3]])?
    };
    residual_block(&Tensor::concat(&[up, skip.clone()], 0)?, &p.res)
}
