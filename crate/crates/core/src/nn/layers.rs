//! Convolution, batch normalization and their common composite.

use alloc::string::String;

use super::params::{BnUpdate, Ctx, Init, ParamKind};
use crate::autodiff::Var;
use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Square-kernel 2-D convolution with "same" padding for stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: String,
    pub bias: Option<String>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        let weight = init.kaiming(&[name, ".w"].concat(), &[cout, cin, k, k])?;
        Ok(Self { weight, bias: None, stride, padding: k / 2 })
    }

    /// Output head: zero weight and zero bias.
    pub fn zeroed<T: Real>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let weight = init.add(&[name, ".w"].concat(), ParamKind::Weight, Tensor::zeros(&[cout, cin, k, k]))?;
        let bias = init.add(&[name, ".b"].concat(), ParamKind::Weight, Tensor::zeros(&[cout]))?;
        Ok(Self { weight, bias: Some(bias), stride: 1, padding: k / 2 })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(&self.weight)?;
        let b = match &self.bias {
            Some(n) => Some(ctx.param(n)?),
            None => None,
        };
        x.conv2d(w, b, self.stride, self.padding)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub name: String,
}

impl BatchNorm {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, c: usize) -> Result<Self> {
        init.add(&[name, ".gamma"].concat(), ParamKind::Weight, Tensor::ones(&[c]))?;
        init.add(&[name, ".beta"].concat(), ParamKind::Weight, Tensor::zeros(&[c]))?;
        init.add(&[name, ".running_mean"].concat(), ParamKind::Buffer, Tensor::zeros(&[c]))?;
        init.add(&[name, ".running_var"].concat(), ParamKind::Buffer, Tensor::ones(&[c]))?;
        Ok(Self { name: init.name(name) })
    }

    fn key(&self, suffix: &str) -> String {
        [self.name.as_str(), ".", suffix].concat()
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let gamma = ctx.param(&self.key("gamma"))?;
        let beta = ctx.param(&self.key("beta"))?;
        let eps = T::of(BN_EPS);
        if ctx.is_train() {
            let (y, mean, var) = x.batch_norm_train(gamma, beta, eps)?;
            ctx.push_update(BnUpdate { layer: self.name.clone(), mean, var });
            Ok(y)
        } else {
            let mean = ctx.buffer(&self.key("running_mean"))?;
            let var = ctx.buffer(&self.key("running_var"))?;
            x.batch_norm_eval(gamma, beta, mean.data(), var.data(), eps)
        }
    }
}

/// `ReLU(BN(conv(x)))` with a bias-free convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new<T: Real>(init: &mut Init<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        init.scoped(name, |init| {
            Ok(Self {
                conv: Conv2d::new(init, "conv", cin, cout, k, stride)?,
                bn: BatchNorm::new(init, "bn", cout)?,
            })
        })
    }

    pub fn forward<'t, T: Real>(&self, ctx: &Ctx<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.bn.forward(ctx, self.conv.forward(ctx, x)?)?.relu()
    }
}

/// Nearest ×2 upsampling cropped to `(h, w)`.
pub fn upsample_to<'t, T: Real>(x: Var<'t, T>, h: usize, w: usize) -> Result<Var<'t, T>> {
    let up = x.upsample2()?;
    let s = up.shape();
    if s[2] == h && s[3] == w {
        Ok(up)
    } else {
        up.crop(h, w)
    }
}

/// Shape of a tensor after one stride-2, padding-1, 3×3 convolution.
pub fn halved(n: usize) -> usize {
    n.div_ceil(2)
}

