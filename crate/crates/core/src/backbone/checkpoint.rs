//! Versioned key→array checkpoint container.
//!
//! Layout of a checkpoint file:
//!
//! ```text
//! magic      8 bytes   b"CSRDACKP"
//! version    u32 LE    currently 1
//! header_len u64 LE    byte length of the JSON header
//! header     JSON      { architecture_id, iteration, extra, arrays: [{ key, shape, offset, len }] }
//! payload    f32 LE    arrays back to back; `offset`/`len` count f32 elements
//! ```
//!
//! Array keys are `student/<param>`, `teacher/<param>`, `adam.m/<param>` and
//! `adam.v/<param>`; parameter order within each prefix is the model layout
//! order. Writes go to a temporary file that is renamed into place.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::adam::AdamMoments;
use super::state::{ModelState, ParamLayout};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CSRDACKP";
pub const VERSION: u32 = 1;

const PREFIXES: [&str; 4] = ["student", "teacher", "adam.m", "adam.v"];

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    key: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    architecture_id: String,
    iteration: u64,
    #[serde(default)]
    extra: BTreeMap<String, String>,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub student: ModelState<f32>,
    pub teacher: ModelState<f32>,
    pub moments: AdamMoments,
    /// Free-form string metadata (cycle, epoch, ...).
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        self.student.ensure_compatible(&self.teacher)?;
        let layout = &self.student.layout;
        let n = layout.total();
        if self.moments.m.len() != n || self.moments.v.len() != n {
            return Err(Error::Checkpoint(
                "optimizer moments do not match parameters".into(),
            ));
        }
        let buffers: [&[f32]; 4] = [
            &self.student.values,
            &self.teacher.values,
            &self.moments.m,
            &self.moments.v,
        ];
        let mut arrays = Vec::new();
        let mut offset = 0;
        for prefix in PREFIXES {
            for spec in layout.specs() {
                arrays.push(ArrayEntry {
                    key: format!("{prefix}/{}", spec.name),
                    shape: spec.shape.clone(),
                    offset,
                    len: spec.len,
                });
                offset += spec.len;
            }
        }
        let header = serde_json::to_vec(&Header {
            architecture_id: self.student.architecture_id.clone(),
            iteration: self.iteration,
            extra: self.extra.clone(),
            arrays,
        })?;
        let mut bytes = Vec::with_capacity(20 + header.len() + 4 * offset);
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&header);
        for buf in buffers {
            for v in buf {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let payload = &bytes[20 + hlen..];
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values"));
        }
        let floats: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();

        let mut layout = ParamLayout::new();
        for a in header
            .arrays
            .iter()
            .filter(|a| a.key.starts_with("student/"))
        {
            layout.push(&a.key["student/".len()..], &a.shape);
        }
        let layout = Arc::new(layout);
        let mut parts: Vec<Vec<f32>> = Vec::new();
        for prefix in PREFIXES {
            let mut values = Vec::with_capacity(layout.total());
            for spec in layout.specs() {
                let key = format!("{prefix}/{}", spec.name);
                let entry = header
                    .arrays
                    .iter()
                    .find(|a| a.key == key)
                    .ok_or_else(|| bad(&format!("missing array `{key}`")))?;
                if entry.shape != spec.shape || entry.len != spec.len {
                    return Err(bad(&format!("shape mismatch for `{key}`")));
                }
                let slice = floats
                    .get(entry.offset..entry.offset + entry.len)
                    .ok_or_else(|| bad(&format!("array `{key}` out of bounds")))?;
                values.extend_from_slice(slice);
            }
            parts.push(values);
        }
        let v = parts.pop().expect("4 parts");
        let m = parts.pop().expect("4 parts");
        let teacher = parts.pop().expect("4 parts");
        let student = parts.pop().expect("4 parts");
        Ok(Self {
            iteration: header.iteration,
            student: ModelState::new(header.architecture_id.clone(), Arc::clone(&layout), student)?,
            teacher: ModelState::new(header.architecture_id, layout, teacher)?,
            moments: AdamMoments { m, v },
            extra: header.extra,
        })
    }
}
