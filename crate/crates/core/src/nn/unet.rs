//! Depth-2 image U-Net, optionally with spectral skip connections.

use super::ffc::FourierSkip;
use super::layers::{halved, upsample_to, Conv2d, ConvBnRelu};
use super::params::{Ctx, Init};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub width: usize,
    /// Route encoder features through [`FourierSkip`] before concatenation.
    pub fourier_skips: bool,
}

/// Two stride-2 encoder stages, two upsampling decoder stages and a
/// zero-initialized single-channel head; [`UNet::forward`] returns the head
/// output, which callers add to a base image.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet {
    pub config: UNetConfig,
    enc0: [ConvBnRelu; 2],
    enc1: [ConvBnRelu; 2],
    enc2: [ConvBnRelu; 2],
    skips: Option<[FourierSkip; 2]>,
    up1: ConvBnRelu,
    dec1: ConvBnRelu,
    up0: ConvBnRelu,
    dec0: ConvBnRelu,
    head: Conv2d,
}

impl UNet {
    pub fn new<T: Real>(init: &mut Init<T>, prefix: &str, config: UNetConfig) -> Result<Self> {
        let (c, w) = (config.in_channels, config.width);
        if c == 0 || w == 0 {
            return Err(Error::invalid("unet", "channels and width must be positive"));
        }
        init.scoped(prefix, |init| {
            let enc0 = [ConvBnRelu::new(init, "enc0a", c, w, 3, 1)?, ConvBnRelu::new(init, "enc0b", w, w, 3, 1)?];
            let enc1 = [ConvBnRelu::new(init, "enc1a", w, 2 * w, 3, 2)?, ConvBnRelu::new(init, "enc1b", 2 * w, 2 * w, 3, 1)?];
            let enc2 = [ConvBnRelu::new(init, "enc2a", 2 * w, 4 * w, 3, 2)?, ConvBnRelu::new(init, "enc2b", 4 * w, 4 * w, 3, 1)?];
            let skips = if config.fourier_skips {
                Some([FourierSkip::new(init, "skip0", w)?, FourierSkip::new(init, "skip1", 2 * w)?])
            } else {
                None
            };
            Ok(Self {
                config,
                enc0,
                enc1,
                enc2,
                skips,
                up1: ConvBnRelu::new(init, "up1", 4 * w, 2 * w, 3, 1)?,
                dec1: ConvBnRelu::new(init, "dec1", 4 * w, 2 * w, 3, 1)?,
                up0: ConvBnRelu::new(init, "up0", 2 * w, w, 3, 1)?,
                dec0: ConvBnRelu::new(init, "dec0", 2 * w, w, 3, 1)?,
                head: Conv2d::zeroed(init, "head", w, 1, 3)?,
            })
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::shape("unet", &shape, &[0, self.config.in_channels, 0, 0]));
        }
        let (h, w) = (shape[2], shape[3]);
        let stage = |pair: &[ConvBnRelu; 2], x| -> Result<Var<'t, T>> { pair[1].forward(ctx, pair[0].forward(ctx, x)?) };
        let e0 = stage(&self.enc0, x)?;
        let e1 = stage(&self.enc1, e0)?;
        let e2 = stage(&self.enc2, e1)?;
        let (s0, s1) = match &self.skips {
            Some([k0, k1]) => (k0.forward(ctx, e0)?, k1.forward(ctx, e1)?),
            None => (e0, e1),
        };
        let d1 = self.up1.forward(ctx, upsample_to(e2, halved(h), halved(w))?)?;
        let d1 = self.dec1.forward(ctx, Var::concat(&[d1, s1])?)?;
        let d0 = self.up0.forward(ctx, upsample_to(d1, h, w)?)?;
        let d0 = self.dec0.forward(ctx, Var::concat(&[d0, s0])?)?;
        self.head.forward(ctx, d0)
    }
}

/// Residual image network on one normalized image: `x + U(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageNet {
    pub unet: UNet,
}

impl ImageNet {
    pub fn new<T: Real>(init: &mut Init<T>, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self { unet: UNet::new(init, prefix, UNetConfig { in_channels: 1, width, fourier_skips: false })? })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.add(self.unet.forward(ctx, x)?)
    }
}

/// Fuses the sinogram-domain reconstruction with the image-domain estimate
/// through spectral skips. Both inputs are clamped to `[0, 1]` before the
/// network; the head output is added to the unclamped estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionNet {
    pub unet: UNet,
}

impl FusionNet {
    pub fn new<T: Real>(init: &mut Init<T>, prefix: &str, width: usize) -> Result<Self> {
        Ok(Self { unet: UNet::new(init, prefix, UNetConfig { in_channels: 2, width, fourier_skips: true })? })
    }

    /// `base + U([recon, base])`, both inputs `(B, 1, H, W)`.
    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, recon: Var<'t, T>, base: Var<'t, T>) -> Result<Var<'t, T>> {
        let unit = |v: Var<'t, T>| v.clamp(T::zero(), T::one());
        let x = Var::concat(&[unit(recon)?, unit(base)?])?;
        base.add(self.unet.forward(ctx, x)?)
    }
}

