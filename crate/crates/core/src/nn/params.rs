//! Named parameter tensors and their on-disk format.
//!
//! File layout: a UTF-8 manifest
//!
//! ```text
//! ziplab-params 1
//! <name> <d0>x<d1>x... <byte offset>
//! ...
//! end
//! ```
//!
//! followed by the concatenated little-endian `f32` payloads. Offsets are
//! relative to the first byte after the `end` line.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "ziplab-params 1";

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Ordered collection of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return invalid(format!("parameter name `{name}` must be non-empty without whitespace"));
        }
        if self.index.contains_key(&name) {
            return invalid(format!("duplicate parameter name `{name}`"));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entry(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].tensor)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named `{name}`")))?;
        self.entries[i].trainable = trainable;
        Ok(())
    }

    pub fn freeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = false;
        }
    }

    pub fn unfreeze_all(&mut self) {
        for e in &mut self.entries {
            e.trainable = true;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ParamEntry> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = format!("{MAGIC}\n");
        let mut offset = 0usize;
        for e in &self.entries {
            let shape: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{} {} {}\n", e.name, shape.join("x"), offset));
            offset += e.tensor.len() * 4;
        }
        manifest.push_str("end\n");
        let mut out = manifest.into_bytes();
        out.reserve(offset);
        for e in &self.entries {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses the persisted format; every loaded tensor is marked trainable.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |m: &str| Error::Parse(format!("parameter file: {m}"));
        let mut pos = 0usize;
        let mut lines = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| parse("unterminated manifest"))?;
            let line = std::str::from_utf8(&rest[..nl]).map_err(|_| parse("manifest is not UTF-8"))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line.to_string());
        }
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(parse("bad magic line"));
        }
        let payload = &bytes[pos..];
        let mut set = ParamSet::new();
        for line in &lines[1..] {
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 3 {
                return Err(parse(&format!("bad manifest line `{line}`")));
            }
            let shape: Vec<usize> = fields[1]
                .split('x')
                .map(|d| d.parse().map_err(|_| parse(&format!("bad shape `{}`", fields[1]))))
                .collect::<Result<_>>()?;
            let offset: usize = fields[2]
                .parse()
                .map_err(|_| parse(&format!("bad offset `{}`", fields[2])))?;
            let n: usize = shape.iter().product();
            let end = offset + 4 * n;
            if end > payload.len() {
                return Err(parse(&format!("`{}` runs past the payload", fields[0])));
            }
            let data = payload[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            set.insert(fields[0], Tensor::new(shape, data)?, true)?;
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// FNV-1a digest of the serialized bytes, used for freeze checks.
    pub fn fingerprint(&self) -> u64 {
        crate::io::fnv1a(&self.to_bytes())
    }

    /// Writes the serialized form to any sink.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }
}
