//! Dataset directories: `manifest.txt` (one `index seed metal_bin` line per
//! sample), `geometry.cfg`, and one QNT1 file per sample field under
//! `samples/`.

use std::fs;
use std::path::Path;

use marnet_core::geometry::FanBeamGeometry;
use marnet_core::physics::DataSample;
use marnet_core::real::Real;

use crate::config::{geometry_from, geometry_to, Config};
use crate::error::{IoError, Result};
use crate::qnt;

pub const FIELDS: [&str; 6] = ["corrupted", "trace", "mask_projection", "clean_sinogram", "clean_image", "mask"];

fn field<'a, T>(s: &'a DataSample<T>, name: &str) -> &'a marnet_core::tensor::Tensor<T> {
    match name {
        "corrupted" => &s.corrupted,
        "trace" => &s.trace,
        "mask_projection" => &s.mask_projection,
        "clean_sinogram" => &s.clean_sinogram,
        "clean_image" => &s.clean_image,
        _ => &s.mask,
    }
}

pub fn sample_file(dir: &Path, index: usize, field: &str) -> std::path::PathBuf {
    dir.join("samples").join(format!("{index:05}.{field}.qnt"))
}

pub fn write_dataset<T: Real>(dir: &Path, geom: &FanBeamGeometry, samples: &[DataSample<T>]) -> Result<()> {
    fs::create_dir_all(dir.join("samples")).map_err(|e| IoError::at(dir, e))?;
    let mut manifest = String::from("# index seed metal_bin\n");
    for (i, s) in samples.iter().enumerate() {
        manifest.push_str(&format!("{i} {} {}\n", s.seed, s.metal_bin));
        for f in FIELDS {
            qnt::write(&sample_file(dir, i, f), field(s, f))?;
        }
    }
    let mut g = Config::default();
    geometry_to(&mut g, geom);
    write_text(&dir.join("geometry.cfg"), &g.to_text())?;
    write_text(&dir.join("manifest.txt"), &manifest)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| IoError::at(path, e))
}

/// `(index, seed, metal_bin)` rows of a manifest.
pub fn read_manifest(dir: &Path) -> Result<Vec<(usize, u64, usize)>> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| IoError::at(&path, e))?;
    let mut rows = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = || IoError::Format(format!("{}: bad manifest line `{line}`", path.display()));
        if parts.len() != 3 {
            return Err(bad());
        }
        rows.push((
            parts[0].parse().map_err(|_| bad())?,
            parts[1].parse().map_err(|_| bad())?,
            parts[2].parse().map_err(|_| bad())?,
        ));
    }
    Ok(rows)
}

pub fn read_geometry(dir: &Path) -> Result<FanBeamGeometry> {
    geometry_from(&Config::load(&dir.join("geometry.cfg"))?)
}

pub fn read_dataset<T: Real>(dir: &Path) -> Result<(FanBeamGeometry, Vec<DataSample<T>>)> {
    let geom = read_geometry(dir)?;
    let mut out = Vec::new();
    for (i, seed, metal_bin) in read_manifest(dir)? {
        let load = |f: &str| qnt::read_as::<T>(&sample_file(dir, i, f));
        let s = DataSample {
            seed,
            metal_bin,
            corrupted: load("corrupted")?,
            trace: load("trace")?,
            mask_projection: load("mask_projection")?,
            clean_sinogram: load("clean_sinogram")?,
            clean_image: load("clean_image")?,
            mask: load("mask")?,
        };
        let sino = geom.sinogram_shape();
        let img = [geom.image_size, geom.image_size];
        for (name, t, want) in [
            ("corrupted", &s.corrupted, &sino[..]),
            ("trace", &s.trace, &sino[..]),
            ("mask_projection", &s.mask_projection, &sino[..]),
            ("clean_sinogram", &s.clean_sinogram, &sino[..]),
            ("clean_image", &s.clean_image, &img[..]),
            ("mask", &s.mask, &img[..]),
        ] {
            if t.shape() != want {
                return Err(IoError::Format(format!("sample {i} {name}: shape {:?}, geometry expects {want:?}", t.shape())));
            }
        }
        out.push(s);
    }
    Ok((geom, out))
}
