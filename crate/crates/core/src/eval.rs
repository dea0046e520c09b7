//! Scoring of pipeline outputs and classical baselines against clean images.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::{FanBeamGeometry, FbpOperator};
use crate::losses::{normalize_mu, WindowSpec};
use crate::mar::{fsnmar, li_complete, nmar, FsnmarConfig, NmarConfig};
use crate::metrics::{mean_psnr, metric_report, MetricReport, Scores};
use crate::nn::{ParamStore, Pipeline};
use crate::physics::DataSample;
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-sample reports of one method.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodScores {
    pub name: String,
    pub reports: Vec<MetricReport>,
}

impl MethodScores {
    /// Three-window-average scores averaged over samples.
    pub fn mean(&self) -> Scores {
        let n = self.reports.len().max(1) as f64;
        let psnrs: Vec<f64> = self.reports.iter().map(|r| r.mean.psnr).collect();
        Scores {
            rmse: self.reports.iter().map(|r| r.mean.rmse).sum::<f64>() / n,
            psnr: mean_psnr(&psnrs),
            ssim: self.reports.iter().map(|r| r.mean.ssim).sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Evaluation {
    pub methods: Vec<MethodScores>,
}

impl Evaluation {
    pub fn get(&self, name: &str) -> Option<&MethodScores> {
        self.methods.iter().find(|m| m.name == name)
    }

    pub fn mean(&self, name: &str) -> Result<Scores> {
        self.get(name)
            .map(MethodScores::mean)
            .ok_or_else(|| Error::invalid("evaluation", alloc::format!("no method `{name}`")))
    }

    fn push(&mut self, name: &str, report: MetricReport) {
        match self.methods.iter_mut().find(|m| m.name == name) {
            Some(m) => m.reports.push(report),
            None => self.methods.push(MethodScores { name: String::from(name), reports: alloc::vec![report] }),
        }
    }
}

fn plane<T: Real>(t: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    t.reshape(&[n, n])
}

/// Scores a normalized-unit image of one sample; metal pixels are excluded
/// when `exclude_metal` is set.
pub fn score_image<T: Real>(image: &Tensor<T>, sample: &DataSample<T>, exclude_metal: bool) -> Result<MetricReport> {
    let n = sample.clean_image.shape()[0];
    let target = normalize_mu(&sample.clean_image);
    let exclude = if exclude_metal { Some(&sample.mask) } else { None };
    metric_report(&plane(image, n)?, &target, &WindowSpec::ALL, exclude)
}

/// Normalized reconstructions of the uncorrected sinogram and of the
/// linear-interpolation completion.
pub fn classical_images<T: Real>(sample: &DataSample<T>, fbp: &FbpOperator<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let uncorrected = normalize_mu(&fbp.apply(&sample.corrupted)?);
    let li = normalize_mu(&fbp.apply(&li_complete(&sample.corrupted, &sample.trace)?)?);
    Ok((uncorrected, li))
}

/// Scores `uncorrected`, `li`, `recon`, `image` and `fused` on every sample.
pub fn evaluate_pipeline<T: Real>(pipeline: &Pipeline<T>, store: &ParamStore<T>, data: &[DataSample<T>], exclude_metal: bool) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    for s in data {
        let (uncorrected, li) = classical_images(s, pipeline.fbp())?;
        let out = pipeline.infer(store, &pipeline.prepare(&[s])?)?;
        ev.push("uncorrected", score_image(&uncorrected, s, exclude_metal)?);
        ev.push("li", score_image(&li, s, exclude_metal)?);
        ev.push("recon", score_image(&out.recon, s, exclude_metal)?);
        ev.push("image", score_image(&out.image, s, exclude_metal)?);
        ev.push("fused", score_image(&out.fused, s, exclude_metal)?);
    }
    Ok(ev)
}

/// Scores `uncorrected`, `li`, `nmar` and `fsnmar` on every sample.
pub fn evaluate_baselines<T: Real>(data: &[DataSample<T>], geom: &FanBeamGeometry, fbp: &FbpOperator<T>, exclude_metal: bool) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    let ncfg = NmarConfig::default();
    let fcfg = FsnmarConfig::for_size(geom.image_size);
    for s in data {
        let (uncorrected, li) = classical_images(s, fbp)?;
        let x_mc = fbp.apply(&s.corrupted)?;
        let x_nmar = fbp.apply(&nmar(&s.corrupted, &s.trace, geom, fbp, &ncfg)?)?;
        let x_fs = fsnmar(&x_nmar, &x_mc, &s.mask, &fcfg)?;
        ev.push("uncorrected", score_image(&uncorrected, s, exclude_metal)?);
        ev.push("li", score_image(&li, s, exclude_metal)?);
        ev.push("nmar", score_image(&normalize_mu(&x_nmar), s, exclude_metal)?);
        ev.push("fsnmar", score_image(&normalize_mu(&x_fs), s, exclude_metal)?);
    }
    Ok(ev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{PipelineConfig, SinogramMode};
    use crate::physics::{make_dataset, metal_library, SimulationConfig};

    #[test]
    fn untrained_pipeline_reproduces_uncorrected_splice() {
        let geom = FanBeamGeometry::desk().with_views(64);
        let data = make_dataset::<f32>(1, &geom, &SimulationConfig::default(), &metal_library(), 3).unwrap();
        let mut store = ParamStore::new();
        let p = Pipeline::new(PipelineConfig::new(2, SinogramMode::Completion), &geom, &mut store).unwrap();
        let ev = evaluate_pipeline(&p, &store, &data, true).unwrap();
        // zero heads: recon is the reconstruction with the trace zeroed and
        // the fused image equals the image-network output
        assert_eq!(ev.mean("fused").unwrap(), ev.mean("image").unwrap());
        assert!(ev.mean("li").unwrap().psnr > ev.mean("uncorrected").unwrap().psnr);
        let b = evaluate_baselines(&data, &geom, p.fbp(), true).unwrap();
        assert_eq!(b.mean("li").unwrap(), ev.mean("li").unwrap());
        assert!(b.mean("nmar").unwrap().psnr.is_finite());
        assert!(ev.mean("missing").is_err());
    }
}
