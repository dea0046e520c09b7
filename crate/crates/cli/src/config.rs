//! Line-oriented `key = value` configuration with `[section]` headers.
//!
//! `#` starts a comment. Keys before the first header belong to the
//! unnamed section. Unknown sections and keys are rejected when a config is
//! converted to [`RunConfig`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use marnet_core::geometry::FanBeamGeometry;
use marnet_core::mar::NmarConfig;
use marnet_core::nn::{GlobalKind, PipelineConfig, SinogramMode};
use marnet_core::physics::{NoiseMode, SimulationConfig};
use marnet_core::train::{AdamConfig, Schedule, TrainConfig};

use crate::error::{IoError, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section = String::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| IoError::Config(format!("line {}: {msg}: `{}`", no + 1, raw.trim()));
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| err("unterminated section header"))?.trim();
                if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                    return Err(err("bad section name"));
                }
                section = name.to_string();
                cfg.sections.entry(section.clone()).or_default();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected `key = value`"))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || !k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                return Err(err("bad key"));
            }
            if cfg.sections.entry(section.clone()).or_default().insert(k.to_string(), v.to_string()).is_some() {
                return Err(err("duplicate key"));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| IoError::at(path, e))?;
        Self::parse(&text).map_err(|e| e.context(path))
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn set(&mut self, section: &str, key: &str, value: impl ToString) {
        self.sections.entry(section.to_string()).or_default().insert(key.to_string(), value.to_string());
    }

    pub fn remove_section(&mut self, section: &str) {
        self.sections.remove(section);
    }

    /// Parses a value, `None` when the key is absent.
    pub fn value<V: FromStr>(&self, section: &str, key: &str) -> Result<Option<V>> {
        self.get(section, key)
            .map(|s| s.parse().map_err(|_| IoError::Config(format!("[{section}] {key}: cannot parse `{s}`"))))
            .transpose()
    }

    fn value_or<V: FromStr>(&self, section: &str, key: &str, default: V) -> Result<V> {
        Ok(self.value(section, key)?.unwrap_or(default))
    }

    /// Canonical text: sections and keys sorted, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, kv) in &self.sections {
            if kv.is_empty() {
                continue;
            }
            if !name.is_empty() {
                let _ = writeln!(s, "[{name}]");
            }
            for (k, v) in kv {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Errors on any section or key outside `schema`.
    pub fn check_keys(&self, schema: &[(&str, &[&str])]) -> Result<()> {
        for (s, kv) in &self.sections {
            let allowed = schema
                .iter()
                .find(|(name, _)| name == s)
                .ok_or_else(|| IoError::Config(format!("unknown section [{s}]")))?
                .1;
            if let Some(k) = kv.keys().find(|k| !allowed.contains(&k.as_str())) {
                return Err(IoError::Config(format!("unknown key `{k}` in [{s}]")));
            }
        }
        Ok(())
    }
}

const GEOMETRY_KEYS: &[&str] = &[
    "preset",
    "source_to_center",
    "num_views",
    "num_detectors",
    "detector_spacing",
    "image_size",
    "pixel_spacing",
    "angular_range",
];

pub const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["seed"]),
    ("data", &["dataset"]),
    ("geometry", GEOMETRY_KEYS),
    ("simulate", &["samples", "noise"]),
    ("model", &["mode", "width", "image_width", "global", "blocks"]),
    ("train", &["sinogram_steps", "image_steps", "fusion_steps", "joint_steps", "lr", "batch_size", "lr_halvings", "checkpoint_every"]),
    ("eval", &["exclude_metal"]),
    ("nmar", &["air_below_hu", "bone_above_hu", "floor_fraction"]),
];

pub const PRESET_DESK: &str = include_str!("../../../configs/geometry.desk");
pub const PRESET_ABLATION: &str = include_str!("../../../configs/geometry.ablation");
pub const PRESET_FULLSCALE: &str = include_str!("../../../configs/geometry.fullscale");

/// A named preset (`desk`, `ablation`, `fullscale`) or a path to a
/// geometry config file.
pub fn geometry_source(name_or_path: &str) -> Result<Config> {
    match name_or_path {
        "desk" => Config::parse(PRESET_DESK),
        "ablation" => Config::parse(PRESET_ABLATION),
        "fullscale" => Config::parse(PRESET_FULLSCALE),
        path => Config::load(Path::new(path)),
    }
}

/// Geometry from a `[geometry]` section: the optional `preset` first, then
/// any explicit fields.
pub fn geometry_from(cfg: &Config) -> Result<FanBeamGeometry> {
    let base = match cfg.get("geometry", "preset") {
        Some(p) => geometry_fields(&geometry_source(p)?, FanBeamGeometry::desk())?,
        None => FanBeamGeometry::desk(),
    };
    let g = geometry_fields(cfg, base)?;
    g.validate()?;
    Ok(g)
}

fn geometry_fields(cfg: &Config, base: FanBeamGeometry) -> Result<FanBeamGeometry> {
    let s = "geometry";
    Ok(FanBeamGeometry {
        source_to_center: cfg.value_or(s, "source_to_center", base.source_to_center)?,
        num_views: cfg.value_or(s, "num_views", base.num_views)?,
        num_detectors: cfg.value_or(s, "num_detectors", base.num_detectors)?,
        detector_spacing: cfg.value_or(s, "detector_spacing", base.detector_spacing)?,
        image_size: cfg.value_or(s, "image_size", base.image_size)?,
        pixel_spacing: cfg.value_or(s, "pixel_spacing", base.pixel_spacing)?,
        angular_range: cfg.value_or(s, "angular_range", base.angular_range)?,
    })
}

/// Writes every geometry field explicitly.
pub fn geometry_to(cfg: &mut Config, g: &FanBeamGeometry) {
    let s = "geometry";
    if let Some(sec) = cfg.sections.get_mut(s) {
        sec.remove("preset");
    }
    cfg.set(s, "source_to_center", g.source_to_center);
    cfg.set(s, "num_views", g.num_views);
    cfg.set(s, "num_detectors", g.num_detectors);
    cfg.set(s, "detector_spacing", g.detector_spacing);
    cfg.set(s, "image_size", g.image_size);
    cfg.set(s, "pixel_spacing", g.pixel_spacing);
    cfg.set(s, "angular_range", g.angular_range);
}

/// Everything a command needs, resolved from a validated [`Config`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub geometry: FanBeamGeometry,
    pub samples: usize,
    pub simulation: SimulationConfig,
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub checkpoint_every: usize,
    pub exclude_metal: bool,
    pub nmar: NmarConfig,
}

fn parse_with<V>(cfg: &Config, section: &str, key: &str, default: V, f: impl Fn(&str) -> Option<V>) -> Result<V> {
    match cfg.get(section, key) {
        None => Ok(default),
        Some(s) => f(s).ok_or_else(|| IoError::Config(format!("[{section}] {key}: unknown value `{s}`"))),
    }
}

impl RunConfig {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.check_keys(SCHEMA)?;
        let seed = cfg.value_or("run", "seed", 0u64)?;
        let noise = parse_with(cfg, "simulate", "noise", NoiseMode::Poisson, |s| match s {
            "poisson" => Some(NoiseMode::Poisson),
            "off" => Some(NoiseMode::Off),
            _ => None,
        })?;
        let mode = parse_with(cfg, "model", "mode", SinogramMode::Completion, SinogramMode::parse)?;
        let width = cfg.value_or("model", "width", 16usize)?;
        let mut pipeline = PipelineConfig::new(width, mode)
            .with_global(parse_with(cfg, "model", "global", GlobalKind::Fourier, GlobalKind::parse)?);
        pipeline.image_width = cfg.value_or("model", "image_width", width)?;
        pipeline.sinogram.blocks = cfg.value_or("model", "blocks", pipeline.sinogram.blocks)?;
        pipeline.seed = seed;
        let t = "train";
        let schedule = Schedule {
            sinogram: cfg.value_or(t, "sinogram_steps", 800)?,
            image: cfg.value_or(t, "image_steps", 400)?,
            fusion: cfg.value_or(t, "fusion_steps", 600)?,
            joint: cfg.value_or(t, "joint_steps", 0)?,
        };
        let mut train = TrainConfig::new(schedule);
        train.adam = AdamConfig { lr: cfg.value_or(t, "lr", 1e-3)?, ..AdamConfig::default() };
        train.batch_size = cfg.value_or(t, "batch_size", train.batch_size)?;
        train.lr_halvings = cfg.value_or(t, "lr_halvings", train.lr_halvings)?;
        train.seed = seed;
        let d = NmarConfig::default();
        Ok(RunConfig {
            seed,
            geometry: geometry_from(cfg)?,
            samples: cfg.value_or("simulate", "samples", 8)?,
            simulation: SimulationConfig { noise, ..SimulationConfig::default() },
            pipeline,
            train,
            checkpoint_every: cfg.value_or(t, "checkpoint_every", 0)?,
            exclude_metal: cfg.value_or("eval", "exclude_metal", true)?,
            nmar: NmarConfig {
                air_below_hu: cfg.value_or("nmar", "air_below_hu", d.air_below_hu)?,
                bone_above_hu: cfg.value_or("nmar", "bone_above_hu", d.bone_above_hu)?,
                floor_fraction: cfg.value_or("nmar", "floor_fraction", d.floor_fraction)?,
            },
        })
    }
}

/// Splits a total step count over the sinogram, image and fusion stages in
/// the ratio 4 : 2 : 3.
pub fn split_steps(total: usize) -> Schedule {
    let sinogram = total * 4 / 9;
    let image = total * 2 / 9;
    Schedule { sinogram, image, fusion: total - sinogram - image, joint: 0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_comments_and_rejects_junk() {
        let c = Config::parse("top = 1\n# note\n[model]\nwidth = 8 # inline\n\n[train]\nlr=0.5\n").unwrap();
        assert_eq!(c.get("", "top"), Some("1"));
        assert_eq!(c.value::<usize>("model", "width").unwrap(), Some(8));
        assert_eq!(c.value::<f64>("train", "lr").unwrap(), Some(0.5));
        assert!(Config::parse("[model\n").is_err());
        assert!(Config::parse("width 8\n").is_err());
        assert!(Config::parse("a = 1\na = 2\n").is_err());
        assert!(c.value::<usize>("train", "lr").is_err());
    }

    #[test]
    fn canonical_text_round_trips_and_hash_is_order_free() {
        let a = Config::parse("[b]\ny = 2\nx = 1\n[a]\nz = 3\n").unwrap();
        let b = Config::parse("[a]\nz=3\n[b]\nx=1\ny=2\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(Config::parse(&a.to_text()).unwrap(), a);
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_and_sections_are_errors() {
        let bad_key = Config::parse("[model]\nwidht = 8\n").unwrap();
        let e = RunConfig::from_config(&bad_key).unwrap_err().to_string();
        assert!(e.contains("widht"), "{e}");
        assert!(RunConfig::from_config(&Config::parse("[modle]\nwidth = 8\n").unwrap()).is_err());
        assert!(RunConfig::from_config(&Config::parse("[model]\nmode = inpaint\n").unwrap()).is_err());
    }

    #[test]
    fn preset_files_match_builtin_geometries() {
        for (name, g) in [
            ("desk", FanBeamGeometry::desk()),
            ("ablation", FanBeamGeometry::ablation()),
            ("fullscale", FanBeamGeometry::fullscale()),
        ] {
            let mut c = Config::default();
            c.set("geometry", "preset", name);
            assert_eq!(geometry_from(&c).unwrap(), g, "{name}");
            let mut explicit = Config::default();
            geometry_to(&mut explicit, &g);
            assert_eq!(geometry_from(&explicit).unwrap(), g);
        }
    }

    #[test]
    fn defaults_and_overrides() {
        let r = RunConfig::from_config(&Config::default()).unwrap();
        assert_eq!(r.geometry, FanBeamGeometry::desk());
        assert_eq!(r.pipeline.sinogram.mode, SinogramMode::Completion);
        let c = Config::parse("[run]\nseed = 3\n[model]\nmode = enhance_projection\nglobal = spatial\n[geometry]\npreset = desk\nnum_views = 90\n").unwrap();
        let r = RunConfig::from_config(&c).unwrap();
        assert_eq!(r.geometry.num_views, 90);
        assert_eq!(r.pipeline.sinogram.global, GlobalKind::Spatial);
        assert_eq!(r.train.seed, 3);
        let s = split_steps(1800);
        assert_eq!((s.sinogram, s.image, s.fusion), (800, 400, 600));
    }
}
