//! Network building blocks, the three networks and their composition.

mod ffc;
pub mod gradcases;
mod layers;
mod params;
mod pipeline;
mod sinogram;
mod unet;

pub use ffc::{ffc_split, FfcBlock, FourierSkip, FourierUnit, GlobalBranch, GlobalKind};
pub use layers::{upsample_to, BatchNorm, Conv2d, ConvBnRelu, BN_EPS, BN_MOMENTUM};
pub use params::{BnUpdate, Ctx, Init, ParamKind, ParamStore};
pub use pipeline::{
    replace_and_recon, Pipeline, PipelineConfig, PipelineInput, PipelineOutputs, PipelineValues, FUSION_PREFIX, IMAGE_PREFIX,
    SINOGRAM_PREFIX,
};
pub use sinogram::{prepare_input, SinogramMode, SinogramNet, SinogramNetConfig};
pub use unet::{FusionNet, ImageNet, UNet, UNetConfig};

#[cfg(test)]
mod tests;
