//! The dual-domain pipeline: sinogram restoration, splice-and-reconstruct,
//! image-domain estimate and fusion.

use alloc::sync::Arc;
use alloc::vec::Vec;

use super::ffc::GlobalKind;
use super::params::{Ctx, Init, ParamStore};
use super::sinogram::{SinogramMode, SinogramNet, SinogramNetConfig};
use super::unet::{FusionNet, ImageNet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::{fbp_var, FanBeamGeometry, FbpOperator};
use crate::losses::mu_to_normalized;
use crate::physics::DataSample;
use crate::real::Real;
use crate::tensor::Tensor;

pub const SINOGRAM_PREFIX: &str = "sinogram";
pub const IMAGE_PREFIX: &str = "image";
pub const FUSION_PREFIX: &str = "fusion";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineConfig {
    pub sinogram: SinogramNetConfig,
    pub image_width: usize,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(width: usize, mode: SinogramMode) -> Self {
        Self { sinogram: SinogramNetConfig::new(width, mode), image_width: width, seed: 0 }
    }

    pub fn with_global(mut self, kind: GlobalKind) -> Self {
        self.sinogram.global = kind;
        self
    }
}

/// Constant per-batch inputs, all batched as `(B, C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineInput<T> {
    /// Mode-dependent two-channel sinogram network input.
    pub sinogram_input: Tensor<T>,
    pub corrupted: Tensor<T>,
    pub trace: Tensor<T>,
    /// Reconstruction of the corrupted sinogram in normalized units.
    pub uncorrected: Tensor<T>,
}

/// Every intermediate of one forward pass. Images are in normalized units.
#[derive(Clone, Copy, Debug)]
pub struct PipelineOutputs<'t, T> {
    pub restored: Var<'t, T>,
    pub recon: Var<'t, T>,
    pub image: Var<'t, T>,
    pub fused: Var<'t, T>,
}

/// Plain-tensor copy of [`PipelineOutputs`].
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineValues<T> {
    pub restored: Tensor<T>,
    pub recon: Tensor<T>,
    pub image: Tensor<T>,
    pub fused: Tensor<T>,
}

#[derive(Clone)]
pub struct Pipeline<T> {
    pub config: PipelineConfig,
    pub sinogram: SinogramNet,
    pub image: ImageNet,
    pub fusion: FusionNet,
    fbp: Arc<FbpOperator<T>>,
}

/// `fbp(restored ⊙ M + corrupted ⊙ (1 - M))` in attenuation units.
/// Gradients reach `restored` only at bins where `trace` is nonzero.
pub fn replace_and_recon<'t, T: Real>(
    restored: Var<'t, T>,
    corrupted: &Tensor<T>,
    trace: &Tensor<T>,
    fbp: &Arc<FbpOperator<T>>,
) -> Result<Var<'t, T>> {
    if restored.shape() != corrupted.shape() || trace.shape() != corrupted.shape() {
        return Err(Error::shape("replace_and_recon", &restored.shape(), corrupted.shape()));
    }
    let tape = restored.tape();
    let kept = corrupted.zip_map(trace, |s, m| s * (T::one() - m))?;
    let spliced = restored.mul(tape.constant(trace.clone()))?.add(tape.constant(kept))?;
    fbp_var(spliced, fbp)
}

fn stack<T: Real>(planes: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = planes.first().ok_or_else(|| Error::invalid("pipeline", "empty batch"))?;
    let s = first.shape();
    if s.len() != 2 {
        return Err(Error::invalid("pipeline", "expected 2-D planes"));
    }
    let mut data = Vec::with_capacity(planes.len() * first.len());
    for p in planes {
        if p.shape() != s {
            return Err(Error::shape("pipeline", s, p.shape()));
        }
        data.extend_from_slice(p.data());
    }
    Tensor::new(&[planes.len(), 1, s[0], s[1]], data)
}

impl<T: Real> Pipeline<T> {
    /// Registers freshly initialized parameters in `store`.
    pub fn new(config: PipelineConfig, geometry: &FanBeamGeometry, store: &mut ParamStore<T>) -> Result<Self> {
        let fbp = Arc::new(FbpOperator::new(geometry)?);
        Self::with_operator(config, fbp, store)
    }

    pub fn with_operator(config: PipelineConfig, fbp: Arc<FbpOperator<T>>, store: &mut ParamStore<T>) -> Result<Self> {
        let mut init = Init::new(store, config.seed);
        Ok(Self {
            config,
            sinogram: SinogramNet::new(&mut init, SINOGRAM_PREFIX, config.sinogram)?,
            image: ImageNet::new(&mut init, IMAGE_PREFIX, config.image_width)?,
            fusion: FusionNet::new(&mut init, FUSION_PREFIX, config.image_width)?,
            fbp,
        })
    }

    /// Rebuilds the structure and checks that `store` has exactly the
    /// expected names, kinds and shapes.
    pub fn for_store(config: PipelineConfig, geometry: &FanBeamGeometry, store: &ParamStore<T>) -> Result<Self> {
        let mut fresh = ParamStore::new();
        let net = Self::new(config, geometry, &mut fresh)?;
        if fresh.len() != store.len() {
            return Err(Error::invalid("pipeline", "parameter set does not match the configuration"));
        }
        for ((a, ka, ta), (b, kb, tb)) in fresh.iter().zip(store.iter()) {
            if a != b || ka != kb || ta.shape() != tb.shape() {
                return Err(Error::invalid("pipeline", alloc::format!("parameter `{b}` does not match the configuration")));
            }
        }
        Ok(net)
    }

    pub fn fbp(&self) -> &Arc<FbpOperator<T>> {
        &self.fbp
    }

    /// Batches samples into constant network inputs.
    pub fn prepare(&self, samples: &[&DataSample<T>]) -> Result<PipelineInput<T>> {
        let corrupted = stack(&samples.iter().map(|s| &s.corrupted).collect::<Vec<_>>())?;
        let trace = stack(&samples.iter().map(|s| &s.trace).collect::<Vec<_>>())?;
        let projection = stack(&samples.iter().map(|s| &s.mask_projection).collect::<Vec<_>>())?;
        self.prepare_tensors(corrupted, trace, &projection)
    }

    /// Same as [`Pipeline::prepare`] from already batched `(B, 1, D, V)`
    /// tensors.
    pub fn prepare_tensors(&self, corrupted: Tensor<T>, trace: Tensor<T>, projection: &Tensor<T>) -> Result<PipelineInput<T>> {
        let sinogram_input = self.sinogram.prepare_input(&corrupted, &trace, projection)?;
        let (a, b) = mu_to_normalized();
        let uncorrected = self.fbp.apply(&corrupted)?.map(|v| T::of(a) * v + T::of(b));
        Ok(PipelineInput { sinogram_input, corrupted, trace, uncorrected })
    }

    /// Restored sinogram and its spliced reconstruction (normalized units).
    pub fn forward_sinogram<'t>(&self, ctx: &Ctx<'t, '_, T>, input: &PipelineInput<T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let restored = self.sinogram.forward(ctx, &input.sinogram_input)?;
        let (a, b) = mu_to_normalized();
        let recon = replace_and_recon(restored, &input.corrupted, &input.trace, &self.fbp)?.affine(T::of(a), T::of(b))?;
        Ok((restored, recon))
    }

    /// Image-domain estimate from the windowed uncorrected reconstruction.
    pub fn forward_image<'t>(&self, ctx: &Ctx<'t, '_, T>, input: &PipelineInput<T>) -> Result<Var<'t, T>> {
        let base = ctx.tape().constant(input.uncorrected.map(|v| v.max(T::zero()).min(T::one())));
        self.image.forward(ctx, base)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t, '_, T>, input: &PipelineInput<T>) -> Result<PipelineOutputs<'t, T>> {
        let (restored, recon) = self.forward_sinogram(ctx, input)?;
        let image = self.forward_image(ctx, input)?;
        let fused = self.fusion.forward(ctx, recon, image)?;
        Ok(PipelineOutputs { restored, recon, image, fused })
    }

    /// Evaluation-mode forward pass returning plain tensors.
    pub fn infer(&self, store: &ParamStore<T>, input: &PipelineInput<T>) -> Result<PipelineValues<T>> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, false).trainable(&[]);
        let out = self.forward(&ctx, input)?;
        Ok(PipelineValues {
            restored: out.restored.value(),
            recon: out.recon.value(),
            image: out.image.value(),
            fused: out.fused.value(),
        })
    }
}
