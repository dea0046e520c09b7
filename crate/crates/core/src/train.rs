//! Adam, staged and joint training schedules, and the pipeline trainer.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::losses::{fusion_loss, normalize_mu, sinogram_loss, total_loss, unet_loss, FeatureExtractor, FusionLossConfig, LossInputs};
use crate::nn::{Ctx, ParamStore, Pipeline, PipelineInput, SinogramMode, BN_MOMENTUM, FUSION_PREFIX, IMAGE_PREFIX, SINOGRAM_PREFIX};
use crate::physics::DataSample;
use crate::real::Real;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates of one parameter and its update count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub t: u64,
}

/// Adam with per-parameter bias correction, so parameters that start
/// training late get the usual warm-up.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: BTreeMap<String, AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, state: BTreeMap::new() }
    }

    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[(String, Tensor<T>)], lr: f64) -> Result<()> {
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        for (name, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "adam" });
            }
            let p = store.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam", p.shape(), g.shape()));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| AdamState {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                t: 0,
            });
            st.t += 1;
            let c1 = 1.0 - libm::pow(beta1, st.t as f64);
            let c2 = 1.0 - libm::pow(beta2, st.t as f64);
            let mut next = p.clone();
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (i, out) in next.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i].f64();
                let mi = beta1 * m[i].f64() + (1.0 - beta1) * gi;
                let vi = beta2 * v[i].f64() + (1.0 - beta2) * gi * gi;
                m[i] = T::of(mi);
                v[i] = T::of(vi);
                *out = T::of(out.f64() - lr * (mi / c1) / (libm::sqrt(vi / c2) + eps));
            }
            store.set(name, next)?;
        }
        Ok(())
    }
}

/// Which networks a step optimizes and against which objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    /// Sinogram network alone on its own objective.
    Sinogram,
    /// Image network alone on its own objective.
    Image,
    /// Fusion network on cached outputs of the other two (evaluation mode).
    Fusion,
    /// All three networks on the summed objective.
    Joint,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Sinogram => "sinogram",
            Stage::Image => "image",
            Stage::Fusion => "fusion",
            Stage::Joint => "joint",
        }
    }
}

/// Step counts of the consecutive stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub sinogram: usize,
    pub image: usize,
    pub fusion: usize,
    pub joint: usize,
}

impl Schedule {
    pub fn joint(steps: usize) -> Self {
        Self { sinogram: 0, image: 0, fusion: 0, joint: steps }
    }

    /// Sinogram-network-only schedule.
    pub fn sinogram_only(steps: usize) -> Self {
        Self { sinogram: steps, image: 0, fusion: 0, joint: 0 }
    }

    pub fn total(&self) -> usize {
        self.sinogram + self.image + self.fusion + self.joint
    }

    fn stages(&self) -> [(Stage, usize); 4] {
        [
            (Stage::Sinogram, self.sinogram),
            (Stage::Image, self.image),
            (Stage::Fusion, self.fusion),
            (Stage::Joint, self.joint),
        ]
    }

    /// Stage, index within it and its length for a global step.
    pub fn locate(&self, step: usize) -> Option<(Stage, usize, usize)> {
        let mut start = 0;
        for (stage, len) in self.stages() {
            if step < start + len {
                return Some((stage, step - start, len));
            }
            start += len;
        }
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub schedule: Schedule,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Learning-rate halvings spread evenly over each stage.
    pub lr_halvings: usize,
    pub seed: u64,
    pub fusion_loss: FusionLossConfig,
    pub extractor_seed: u64,
}

impl TrainConfig {
    pub fn new(schedule: Schedule) -> Self {
        Self {
            schedule,
            batch_size: 1,
            adam: AdamConfig::default(),
            lr_halvings: 2,
            seed: 0,
            fusion_loss: FusionLossConfig::default(),
            extractor_seed: 0,
        }
    }

    /// Learning rate at `index` of a stage of `len` steps.
    pub fn lr_at(&self, index: usize, len: usize) -> f64 {
        let phase = (index * (self.lr_halvings + 1)) / len.max(1);
        self.adam.lr / (1u64 << phase.min(60)) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    pub lr: f64,
}

/// Per-sample network inputs and targets, batch size 1.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub input: PipelineInput<T>,
    pub clean_sinogram: Tensor<T>,
    /// Clean image in normalized units.
    pub clean_image: Tensor<T>,
}

pub fn prepare_samples<T: Real>(pipeline: &Pipeline<T>, data: &[DataSample<T>]) -> Result<Vec<PreparedSample<T>>> {
    data.iter()
        .map(|s| {
            let [d, v] = [s.clean_sinogram.shape()[0], s.clean_sinogram.shape()[1]];
            let [h, w] = [s.clean_image.shape()[0], s.clean_image.shape()[1]];
            Ok(PreparedSample {
                input: pipeline.prepare(&[s])?,
                clean_sinogram: s.clean_sinogram.reshape(&[1, 1, d, v])?,
                clean_image: normalize_mu(&s.clean_image).reshape(&[1, 1, h, w])?,
            })
        })
        .collect()
}

/// Sets the sinogram network's fixed input scales from the data: the
/// inverse of the largest clean line integral and, for the projection
/// mode, the inverse of the largest metal path length.
pub fn calibrate_input_scale<T: Real>(pipeline: &Pipeline<T>, store: &mut ParamStore<T>, data: &[DataSample<T>]) -> Result<()> {
    let max_of = |f: &dyn Fn(&DataSample<T>) -> &Tensor<T>| {
        data.iter()
            .flat_map(|s| f(s).data().iter().copied())
            .fold(T::zero(), |a, b| a.max(b.abs()))
    };
    let sino = max_of(&|s| &s.clean_sinogram);
    if sino <= T::zero() {
        return Err(Error::invalid("calibrate", "clean sinograms are all zero"));
    }
    let aux = match pipeline.config.sinogram.mode {
        SinogramMode::EnhanceProjection => {
            let p = max_of(&|s| &s.mask_projection);
            if p > T::zero() { T::one() / p } else { T::one() }
        }
        _ => T::one(),
    };
    pipeline.sinogram.set_input_scale(store, T::one() / sino, aux)
}

fn batch_of<T: Real>(items: &[&PreparedSample<T>]) -> Result<PreparedSample<T>> {
    let cat = |f: &dyn Fn(&PreparedSample<T>) -> &Tensor<T>| -> Result<Tensor<T>> {
        Tensor::concat_batch(&items.iter().map(|p| f(p)).collect::<Vec<_>>())
    };
    Ok(PreparedSample {
        input: PipelineInput {
            sinogram_input: cat(&|p| &p.input.sinogram_input)?,
            corrupted: cat(&|p| &p.input.corrupted)?,
            trace: cat(&|p| &p.input.trace)?,
            uncorrected: cat(&|p| &p.input.uncorrected)?,
        },
        clean_sinogram: cat(&|p| &p.clean_sinogram)?,
        clean_image: cat(&|p| &p.clean_image)?,
    })
}

/// Runs a [`Schedule`] over a fixed training set.
pub struct Trainer<T: Real> {
    pub pipeline: Pipeline<T>,
    pub store: ParamStore<T>,
    pub adam: Adam<T>,
    pub config: TrainConfig,
    pub step: usize,
    extractor: FeatureExtractor<T>,
    data: Vec<PreparedSample<T>>,
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
    /// Frozen-network outputs `(recon, image)` for the fusion stage.
    cache: Option<Vec<(Tensor<T>, Tensor<T>)>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(pipeline: Pipeline<T>, store: ParamStore<T>, config: TrainConfig, data: &[DataSample<T>]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("trainer", "empty training set"));
        }
        if config.batch_size == 0 {
            return Err(Error::invalid("trainer", "batch size must be positive"));
        }
        let prepared = prepare_samples(&pipeline, data)?;
        Ok(Self {
            adam: Adam::new(config.adam),
            extractor: FeatureExtractor::new(config.extractor_seed),
            rng: rng::seeded(rng::derive_seed(config.seed, 0x7a11)),
            order: Vec::new(),
            cursor: 0,
            cache: None,
            step: 0,
            pipeline,
            store,
            config,
            data: prepared,
        })
    }

    pub fn finished(&self) -> bool {
        self.step >= self.config.schedule.total()
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.config.batch_size);
        while out.len() < self.config.batch_size {
            if self.cursor >= self.order.len() {
                self.order = (0..self.data.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }

    fn fill_cache(&mut self) -> Result<()> {
        if self.cache.is_some() {
            return Ok(());
        }
        let mut cache = Vec::with_capacity(self.data.len());
        for p in &self.data {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &self.store, false).trainable(&[]);
            let (_, recon) = self.pipeline.forward_sinogram(&ctx, &p.input)?;
            let image = self.pipeline.forward_image(&ctx, &p.input)?;
            cache.push((recon.value(), image.value()));
        }
        self.cache = Some(cache);
        Ok(())
    }

    /// One optimizer step; errors once the schedule is exhausted.
    pub fn train_step(&mut self) -> Result<StepLog> {
        let (stage, index, len) = self
            .config
            .schedule
            .locate(self.step)
            .ok_or_else(|| Error::invalid("trainer", "schedule finished"))?;
        if stage == Stage::Fusion {
            self.fill_cache()?;
        } else {
            self.cache = None;
        }
        let idx = self.next_batch();
        let batch = batch_of(&idx.iter().map(|&i| &self.data[i]).collect::<Vec<_>>())?;
        let lr = self.config.lr_at(index, len);
        let tape = Tape::new();
        let prefixes: &[&str] = match stage {
            Stage::Sinogram => &[SINOGRAM_PREFIX],
            Stage::Image => &[IMAGE_PREFIX],
            Stage::Fusion => &[FUSION_PREFIX],
            Stage::Joint => &[SINOGRAM_PREFIX, IMAGE_PREFIX, FUSION_PREFIX],
        };
        let ctx = Ctx::new(&tape, &self.store, true).trainable(prefixes);
        let clean_sino = tape.constant(batch.clean_sinogram.clone());
        let clean_img = tape.constant(batch.clean_image.clone());
        let loss = match stage {
            Stage::Sinogram => {
                let (restored, recon) = self.pipeline.forward_sinogram(&ctx, &batch.input)?;
                sinogram_loss(restored, clean_sino, recon, clean_img)?
            }
            Stage::Image => unet_loss(self.pipeline.forward_image(&ctx, &batch.input)?, clean_img)?,
            Stage::Fusion => {
                let cache = self.cache.as_ref().ok_or_else(|| Error::invalid("trainer", "missing cache"))?;
                let recon = Tensor::concat_batch(&idx.iter().map(|&i| &cache[i].0).collect::<Vec<_>>())?;
                let image = Tensor::concat_batch(&idx.iter().map(|&i| &cache[i].1).collect::<Vec<_>>())?;
                let fused = self.pipeline.fusion.forward(&ctx, tape.constant(recon), tape.constant(image))?;
                fusion_loss(fused, clean_img, &self.config.fusion_loss, &self.extractor)?
            }
            Stage::Joint => {
                let out = self.pipeline.forward(&ctx, &batch.input)?;
                let inputs = LossInputs {
                    restored: out.restored,
                    clean_sinogram: clean_sino,
                    recon: out.recon,
                    unet: out.image,
                    fused: out.fused,
                    clean_image: clean_img,
                };
                total_loss(inputs, &self.config.fusion_loss, &self.extractor)?.total
            }
        };
        let value = loss.value().item().f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "training loss" });
        }
        let grads = tape.backward(loss)?;
        let named = ctx.gradients(&grads);
        let updates = ctx.take_bn_updates();
        drop(ctx);
        self.adam.update(&mut self.store, &named, lr)?;
        self.store.apply_bn_updates(&updates, T::of(BN_MOMENTUM))?;
        let log = StepLog { step: self.step, stage, loss: value, lr };
        self.step += 1;
        Ok(log)
    }

    /// Runs the remaining schedule, reporting every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
        let mut logs = Vec::with_capacity(self.config.schedule.total() - self.step.min(self.config.schedule.total()));
        while !self.finished() {
            let log = self.train_step()?;
            on_step(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    pub fn prepared(&self) -> &[PreparedSample<T>] {
        &self.data
    }
}
