//! Encoder/decoder that restores the metal-affected part of a sinogram,
//! with fast Fourier convolution blocks at the bottleneck.

use alloc::string::String;
use alloc::vec::Vec;

use super::ffc::{FfcBlock, GlobalKind};
use super::layers::{halved, upsample_to, Conv2d, ConvBnRelu};
use super::params::{Ctx, Init, ParamKind};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// What the network sees of the corrupted sinogram.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SinogramMode {
    /// In-trace bins are zeroed; the binary trace is the second channel.
    Completion,
    /// Full corrupted sinogram plus the binary trace.
    EnhanceTrace,
    /// Full corrupted sinogram plus the continuous metal-mask projection.
    EnhanceProjection,
}

impl SinogramMode {
    pub const ALL: [SinogramMode; 3] = [SinogramMode::Completion, SinogramMode::EnhanceTrace, SinogramMode::EnhanceProjection];

    pub fn name(self) -> &'static str {
        match self {
            SinogramMode::Completion => "completion",
            SinogramMode::EnhanceTrace => "enhance_trace",
            SinogramMode::EnhanceProjection => "enhance_projection",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinogramNetConfig {
    pub width: usize,
    pub blocks: usize,
    pub global: GlobalKind,
    pub mode: SinogramMode,
}

impl SinogramNetConfig {
    pub fn new(width: usize, mode: SinogramMode) -> Self {
        Self { width, blocks: 3, global: GlobalKind::Fourier, mode }
    }
}

/// Two stride-2 stages, a stack of [`FfcBlock`]s and two upsampling stages
/// with concatenated skips. The zero-initialized head makes the initial
/// output exactly zero.
///
/// Inputs are scaled by fixed buffers `<prefix>.input_scale = [sinogram,
/// auxiliary]`; the output is divided by the sinogram scale.
#[derive(Clone, Debug, PartialEq)]
pub struct SinogramNet {
    pub config: SinogramNetConfig,
    pub scale: String,
    head: ConvBnRelu,
    down1: ConvBnRelu,
    down2: ConvBnRelu,
    blocks: Vec<FfcBlock>,
    up1: ConvBnRelu,
    up0: ConvBnRelu,
    out: Conv2d,
}

impl SinogramNet {
    pub fn new<T: Real>(init: &mut Init<T>, prefix: &str, config: SinogramNetConfig) -> Result<Self> {
        let w = config.width;
        if w < 1 {
            return Err(Error::invalid("sinogram_net", "width must be positive"));
        }
        init.scoped(prefix, |init| {
            let scale = init.add("input_scale", ParamKind::Buffer, Tensor::ones(&[2]))?;
            let head = ConvBnRelu::new(init, "head", 2, w, 3, 1)?;
            let down1 = ConvBnRelu::new(init, "down1", w, 2 * w, 3, 2)?;
            let down2 = ConvBnRelu::new(init, "down2", 2 * w, 4 * w, 3, 2)?;
            let blocks = (0..config.blocks)
                .map(|i| FfcBlock::new(init, &alloc::format!("block{i}"), 4 * w, config.global))
                .collect::<Result<Vec<_>>>()?;
            let up1 = ConvBnRelu::new(init, "up1", 4 * w, 2 * w, 3, 1)?;
            let up0 = ConvBnRelu::new(init, "up0", 4 * w, w, 3, 1)?;
            let out = Conv2d::zeroed(init, "out", 2 * w, 1, 3)?;
            Ok(Self { config, scale, head, down1, down2, blocks, up1, up0, out })
        })
    }

    /// Builds the two-channel network input `(B, 2, D, V)` from batched
    /// `(B, 1, D, V)` tensors according to the mode.
    pub fn prepare_input<T: Real>(&self, corrupted: &Tensor<T>, trace: &Tensor<T>, projection: &Tensor<T>) -> Result<Tensor<T>> {
        prepare_input(self.config.mode, corrupted, trace, projection)
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, input: &Tensor<T>) -> Result<Var<'t, T>> {
        self.forward_var(ctx, ctx.tape().constant(input.clone()))
    }

    /// Forward pass on a tape value `(B, 2, D, V)` in sinogram units.
    pub fn forward_var<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, input: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = input.shape();
        if shape.len() != 4 || shape[1] != 2 {
            return Err(Error::shape("sinogram_net", &shape, &[0, 2, 0, 0]));
        }
        let (h, w) = (shape[2], shape[3]);
        let scale = ctx.buffer(&self.scale)?.data().to_vec();
        let factors = Tensor::from_fn(&shape, |i| scale[(i / (h * w)) % 2]);
        let x = input.mul(ctx.tape().constant(factors))?;
        let x0 = self.head.forward(ctx, x)?;
        let x1 = self.down1.forward(ctx, x0)?;
        let mut z = self.down2.forward(ctx, x1)?;
        for b in &self.blocks {
            z = b.forward(ctx, z)?;
        }
        let (h1, w1) = (halved(h), halved(w));
        let u1 = self.up1.forward(ctx, upsample_to(z, h1, w1)?)?;
        let u1 = Var::concat(&[u1, x1])?;
        let u0 = self.up0.forward(ctx, upsample_to(u1, h, w)?)?;
        let u0 = Var::concat(&[u0, x0])?;
        self.out.forward(ctx, u0)?.scale(T::one() / scale[0])
    }

    /// Sets the fixed input scales in `store`.
    pub fn set_input_scale<T: Real>(&self, store: &mut super::ParamStore<T>, sinogram: T, auxiliary: T) -> Result<()> {
        store.set(&self.scale, Tensor::from_parts(&[2], alloc::vec![sinogram, auxiliary]))
    }
}

/// Mode-dependent two-channel input; completion zeroes every in-trace bin
/// so in-trace values cannot influence the output.
pub fn prepare_input<T: Real>(mode: SinogramMode, corrupted: &Tensor<T>, trace: &Tensor<T>, projection: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = corrupted.dims4()?;
    for t in [trace, projection] {
        if t.shape() != corrupted.shape() {
            return Err(Error::shape("sinogram_input", corrupted.shape(), t.shape()));
        }
    }
    if c != 1 {
        return Err(Error::shape("sinogram_input", corrupted.shape(), &[b, 1, h, w]));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(2 * b * plane);
    for bi in 0..b {
        let s = &corrupted.data()[bi * plane..][..plane];
        let m = &trace.data()[bi * plane..][..plane];
        match mode {
            SinogramMode::Completion => data.extend(s.iter().zip(m).map(|(&v, &t)| if t > T::zero() { T::zero() } else { v })),
            _ => data.extend_from_slice(s),
        }
        match mode {
            SinogramMode::EnhanceProjection => data.extend_from_slice(&projection.data()[bi * plane..][..plane]),
            _ => data.extend_from_slice(m),
        }
    }
    Tensor::new(&[b, 2, h, w], data)
}
