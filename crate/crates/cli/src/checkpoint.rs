//! Checkpoints: a text index followed by concatenated QNT1 records.
//!
//! ```text
//! QNT1-CHECKPOINT 1
//! config_hash <hex>
//! step <n>
//! param <name> <weight|buffer> <offset> <length>
//! adam <name> <t> <m offset> <m length> <v offset> <v length>
//! end
//! <QNT1 records>
//! ```
//!
//! Offsets are relative to the first byte after the `end` line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use marnet_core::nn::{ParamKind, ParamStore};
use marnet_core::real::Real;
use marnet_core::train::AdamState;

use crate::error::{IoError, Result};
use crate::qnt;

const HEADER: &str = "QNT1-CHECKPOINT 1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config_hash: String,
    pub step: u64,
    pub params: ParamStore<T>,
    pub adam: BTreeMap<String, AdamState<T>>,
}

impl<T: Real> Checkpoint<T> {
    pub fn encode(&self) -> Vec<u8> {
        let mut index = format!("{HEADER}\nconfig_hash {}\nstep {}\n", self.config_hash, self.step);
        let mut blob = Vec::new();
        let mut push = |t: &marnet_core::tensor::Tensor<T>| {
            let start = blob.len();
            blob.extend_from_slice(&qnt::encode(t));
            (start, blob.len() - start)
        };
        for (name, kind, t) in self.params.iter() {
            let (o, l) = push(t);
            index.push_str(&format!("param {name} {} {o} {l}\n", kind.name()));
        }
        for (name, s) in &self.adam {
            let (mo, ml) = push(&s.m);
            let (vo, vl) = push(&s.v);
            index.push_str(&format!("adam {name} {} {mo} {ml} {vo} {vl}\n", s.t));
        }
        index.push_str("end\n");
        let mut out = index.into_bytes();
        out.extend_from_slice(&blob);
        out
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let bad = |m: String| IoError::Format(format!("checkpoint: {m}"));
        let end = find_subslice(buf, b"\nend\n").ok_or_else(|| bad("missing `end` line".into()))?;
        let index = std::str::from_utf8(&buf[..end]).map_err(|_| bad("index is not UTF-8".into()))?;
        let blob = &buf[end + 5..];
        let mut lines = index.lines();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header".into()));
        }
        let slice = |o: &str, l: &str| -> Result<marnet_core::tensor::Tensor<T>> {
            let o: usize = o.parse().map_err(|_| bad(format!("bad offset `{o}`")))?;
            let l: usize = l.parse().map_err(|_| bad(format!("bad length `{l}`")))?;
            let bytes = o.checked_add(l).and_then(|e| blob.get(o..e)).ok_or_else(|| bad("record out of range".into()))?;
            Ok(qnt::decode(bytes)?.cast())
        };
        let mut ck = Checkpoint { config_hash: String::new(), step: 0, params: ParamStore::new(), adam: BTreeMap::new() };
        for line in lines {
            let f: Vec<&str> = line.split(' ').collect();
            match f.as_slice() {
                ["config_hash", h] => ck.config_hash = h.to_string(),
                ["step", s] => ck.step = s.parse().map_err(|_| bad(format!("bad step `{s}`")))?,
                ["param", name, kind, o, l] => {
                    let kind = ParamKind::parse(kind).ok_or_else(|| bad(format!("bad kind `{kind}`")))?;
                    ck.params.insert(name, kind, slice(o, l)?)?;
                }
                ["adam", name, t, mo, ml, vo, vl] => {
                    let t = t.parse().map_err(|_| bad(format!("bad count `{t}`")))?;
                    ck.adam.insert(name.to_string(), AdamState { m: slice(mo, ml)?, v: slice(vo, vl)?, t });
                }
                _ => return Err(bad(format!("bad index line `{line}`"))),
            }
        }
        Ok(ck)
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| IoError::at(path, e))?;
        Self::decode(&buf).map_err(|e| e.context(path))
    }
}

fn find_subslice(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| IoError::at(dir, e))?;
    tmp.write_all(bytes).map_err(|e| IoError::at(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| IoError::at(path, e))?;
    tmp.persist(path).map_err(|e| IoError::at(path, e.error))?;
    Ok(())
}
