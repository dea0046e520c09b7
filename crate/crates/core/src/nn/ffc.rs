//! Spectral convolution units and the fast Fourier convolution block.

use alloc::vec::Vec;

use super::layers::{BatchNorm, Conv2d, ConvBnRelu};
use super::params::{Ctx, Init, ParamKind};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::fft::FftNorm;
use crate::real::Real;
use crate::tensor::Tensor;

/// Pointwise convolution applied to the stacked real/imaginary half
/// spectrum, followed by BN and ReLU unless bypassed.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierUnit {
    pub conv: Conv2d,
    pub bn: Option<BatchNorm>,
    pub activate: bool,
}

impl FourierUnit {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, c: usize) -> Result<Self> {
        Self::build(init, name, c, true)
    }

    /// Conv and ReLU, with BN only when `norm` is set.
    pub fn build<T: Real>(init: &mut Init<T>, name: &str, c: usize, norm: bool) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                conv: Conv2d::new(init, "conv", 2 * c, 2 * c, 1, 1)?,
                bn: if norm { Some(BatchNorm::new(init, "bn", 2 * c)?) } else { None },
                activate: true,
            })
        })
    }

    /// Spectral filter without BN or ReLU; its convolution weight is set to
    /// the identity so the unit reduces to an FFT round trip.
    pub fn identity<T: Real>(init: &mut Init<T>, name: &str, c: usize) -> Result<Self> {
        let conv = init.scoped(name, |init| {
            let w = Tensor::from_fn(&[2 * c, 2 * c, 1, 1], |i| if i / (2 * c) == i % (2 * c) { T::one() } else { T::zero() });
            let weight = init.add("conv.w", ParamKind::Weight, w)?;
            Ok(Conv2d { weight, bias: None, stride: 1, padding: 0 })
        })?;
        Ok(Self { conv, bn: None, activate: false })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let (h, w) = (shape[2], shape[3]);
        if h < 2 || w < 2 {
            return Err(Error::invalid("fourier_unit", "spatial size must be at least 2×2"));
        }
        let (ph, pw) = (h % 2, w % 2);
        let xp = if ph + pw > 0 { x.pad_reflect([0, ph, 0, pw])? } else { x };
        let spec = xp.rfft2_stacked(FftNorm::Ortho)?;
        let mut y = self.conv.forward(ctx, spec)?;
        if let Some(bn) = &self.bn {
            y = bn.forward(ctx, y)?;
        }
        if self.activate {
            y = y.relu()?;
        }
        let back = y.irfft2_stacked((h + ph, w + pw), FftNorm::Ortho)?;
        if ph + pw > 0 {
            back.crop(h, w)
        } else {
            Ok(back)
        }
    }
}

/// Operator used on the global channels of an [`FfcBlock`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalKind {
    /// Spectral filtering with a global receptive field.
    Fourier,
    /// Two-group 3×3 spatial convolution with a matching parameter budget.
    Spatial,
}

impl GlobalKind {
    pub fn name(self) -> &'static str {
        match self {
            GlobalKind::Fourier => "fourier",
            GlobalKind::Spatial => "spatial",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "fourier" => Some(GlobalKind::Fourier),
            "spatial" => Some(GlobalKind::Spatial),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum GlobalBranch {
    Fourier(FourierUnit),
    Spatial { groups: Vec<(usize, Conv2d)>, bn: BatchNorm },
}

impl GlobalBranch {
    pub fn new<T: Real>(init: &mut Init<T>, kind: GlobalKind, c: usize) -> Result<Self> {
        match kind {
            GlobalKind::Fourier => Ok(GlobalBranch::Fourier(FourierUnit::new(init, "fu", c)?)),
            GlobalKind::Spatial => init.scoped("sr", |init| {
                let half = c / 2;
                let mut groups = Vec::new();
                for (i, width) in [half, c - half].into_iter().enumerate() {
                    if width > 0 {
                        let name = if i == 0 { "g0" } else { "g1" };
                        groups.push((width, Conv2d::new(init, name, width, width, 3, 1)?));
                    }
                }
                Ok(GlobalBranch::Spatial { groups, bn: BatchNorm::new(init, "bn", c)? })
            }),
        }
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        match self {
            GlobalBranch::Fourier(fu) => fu.forward(ctx, x),
            GlobalBranch::Spatial { groups, bn } => {
                let mut start = 0;
                let mut parts = Vec::with_capacity(groups.len());
                for (width, conv) in groups {
                    parts.push(conv.forward(ctx, x.slice_channels(start, start + width)?)?);
                    start += width;
                }
                let y = if parts.len() == 1 { parts[0] } else { Var::concat(&parts)? };
                bn.forward(ctx, y)?.relu()
            }
        }
    }
}

/// Channel split `(local, global)` with three quarters going global.
pub fn ffc_split(c: usize) -> (usize, usize) {
    let g = 3 * c / 4;
    (c - g, g)
}

/// Residual fast Fourier convolution block.
///
/// With `x = [x_l, x_g]`:
/// `y_l = ReLU(BN(conv(x_l) + conv(x_g)))`,
/// `y_g = ReLU(BN(conv(x_l) + G(x_g)))` and the output is `x + [y_l, y_g]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfcBlock {
    pub channels: usize,
    pub local: usize,
    pub l2l: Conv2d,
    pub g2l: Conv2d,
    pub l2g: Conv2d,
    pub global: GlobalBranch,
    pub bn_local: BatchNorm,
    pub bn_global: BatchNorm,
}

impl FfcBlock {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, c: usize, kind: GlobalKind) -> Result<Self> {
        let (cl, cg) = ffc_split(c);
        if cl == 0 || cg == 0 {
            return Err(Error::invalid("ffc_block", "need at least 2 channels"));
        }
        init.scoped(name, |init| {
            Ok(Self {
                channels: c,
                local: cl,
                l2l: Conv2d::new(init, "l2l", cl, cl, 3, 1)?,
                g2l: Conv2d::new(init, "g2l", cg, cl, 3, 1)?,
                l2g: Conv2d::new(init, "l2g", cl, cg, 3, 1)?,
                global: GlobalBranch::new(init, kind, cg)?,
                bn_local: BatchNorm::new(init, "bn_l", cl)?,
                bn_global: BatchNorm::new(init, "bn_g", cg)?,
            })
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::shape("ffc_block", &shape, &[0, self.channels, 0, 0]));
        }
        if shape[2] < 2 || shape[3] < 2 {
            return Err(Error::invalid("ffc_block", "spatial size must be at least 2×2"));
        }
        let xl = x.slice_channels(0, self.local)?;
        let xg = x.slice_channels(self.local, self.channels)?;
        let yl = self.l2l.forward(ctx, xl)?.add(self.g2l.forward(ctx, xg)?)?;
        let yl = self.bn_local.forward(ctx, yl)?.relu()?;
        let yg = self.l2g.forward(ctx, xl)?.add(self.global.forward(ctx, xg)?)?;
        let yg = self.bn_global.forward(ctx, yg)?.relu()?;
        x.add(Var::concat(&[yl, yg])?)
    }
}

/// Skip connection that sums a local `ReLU(BN(conv3×3))` path and a global
/// `irfft(ReLU(conv1×1(rfft)))` path.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierSkip {
    pub local: ConvBnRelu,
    pub spectral: FourierUnit,
}

impl FourierSkip {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, c: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                local: ConvBnRelu::new(init, "local", c, c, 3, 1)?,
                spectral: FourierUnit::build(init, "global", c, false)?,
            })
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.local.forward(ctx, x)?.add(self.spectral.forward(ctx, x)?)
    }
}
