//! Checkpoint files: a text manifest plus a little-endian `f32` blob.
//!
//! Manifest lines are tab-separated `name  f32  [d0,d1,..]  byte_offset`, in
//! blob order; lines starting with `#` are comments. Values are stored as
//! `f32` (round-to-nearest from the in-memory `f64`), so a save → load → save
//! cycle is byte-exact.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const HEADER: &str = "# xmamba checkpoint v1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            entries: store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone().with_requires_grad(false)))
                .collect(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn manifest_text(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            out.push_str(&format!("{name}\tf32\t[{}]\t{offset}\n", dims.join(",")));
            offset += t.numel() * 4;
        }
        out
    }

    pub fn blob_bytes(&self) -> Result<Vec<u8>> {
        let total: usize = self.entries.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(total * 4);
        for (name, t) in &self.entries {
            for &v in t.data() {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(bad(format!("{name}: {v} does not fit in f32")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn parse(manifest: &str, blob: &[u8]) -> Result<Self> {
        let mut entries = Vec::new();
        let mut expected_offset = 0usize;
        for (lineno, line) in manifest.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [name, dtype, shape, offset] = fields[..] else {
                return Err(bad(format!("line {}: expected 4 fields", lineno + 1)));
            };
            if dtype != "f32" {
                return Err(bad(format!(
                    "line {}: unsupported dtype {dtype}",
                    lineno + 1
                )));
            }
            let shape = shape
                .strip_prefix('[')
                .and_then(|s| s.strip_suffix(']'))
                .ok_or_else(|| bad(format!("line {}: malformed shape", lineno + 1)))?;
            let shape: Vec<usize> = if shape.is_empty() {
                vec![]
            } else {
                shape
                    .split(',')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?
            };
            let offset: usize = offset
                .parse()
                .map_err(|e| bad(format!("line {}: {e}", lineno + 1)))?;
            if offset != expected_offset {
                return Err(bad(format!(
                    "{name}: offset {offset}, expected {expected_offset}"
                )));
            }
            let n: usize = shape.iter().product();
            let end = offset + n * 4;
            let bytes = blob
                .get(offset..end)
                .ok_or_else(|| bad(format!("{name}: blob too short")))?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            entries.push((name.to_string(), Tensor::new(&shape, data)?));
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(bad(format!(
                "blob has {} bytes, manifest covers {expected_offset}",
                blob.len()
            )));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, manifest: &Path, blob: &Path) -> Result<()> {
        let bytes = self.blob_bytes()?;
        fs::write(manifest, self.manifest_text())?;
        fs::write(blob, bytes)?;
        Ok(())
    }

    pub fn read(manifest: &Path, blob: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest)?;
        let bytes = fs::read(blob)?;
        Self::parse(&text, &bytes)
    }

    /// `<dir>/<stem>.manifest` and `<dir>/<stem>.bin`.
    pub fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
        (
            dir.join(format!("{stem}.manifest")),
            dir.join(format!("{stem}.bin")),
        )
    }

    pub fn save_dir(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let (m, b) = Self::paths(dir, stem);
        self.write(&m, &b)
    }

    pub fn load_dir(dir: &Path, stem: &str) -> Result<Self> {
        let (m, b) = Self::paths(dir, stem);
        Self::read(&m, &b)
    }

    /// Copies every entry into the same-named parameter. Names and shapes
    /// must match exactly, in both directions.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.entries.len() != store.len() {
            return Err(bad(format!(
                "checkpoint has {} tensors, model has {}",
                self.entries.len(),
                store.len()
            )));
        }
        for (name, t) in &self.entries {
            let id = store
                .find(name)
                .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            store.set(id, t.clone())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::default();
        c.push("a/w", Tensor::matrix(2, 2, &[1.0, -2.5, 0.1, 3.0]).unwrap());
        c.push("omega", Tensor::scalar(0.3).unwrap());
        c.push("empty", Tensor::zeros(&[0, 4]));
        c
    }

    #[test]
    fn manifest_layout() {
        let text = sample().manifest_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], HEADER);
        assert_eq!(lines[1], "a/w\tf32\t[2,2]\t0");
        assert_eq!(lines[2], "omega\tf32\t[]\t16");
        assert_eq!(lines[3], "empty\tf32\t[0,4]\t20");
    }

    #[test]
    fn roundtrip_is_f32_exact() {
        let c = sample();
        let blob = c.blob_bytes().unwrap();
        let back = Checkpoint::parse(&c.manifest_text(), &blob).unwrap();
        assert_eq!(back.get("omega").unwrap().item(), 0.3f32 as f64);
        assert_eq!(back.blob_bytes().unwrap(), blob);
        assert_eq!(back.manifest_text(), c.manifest_text());
    }

    #[test]
    fn rejects_truncated_blob_and_bad_lines() {
        let c = sample();
        let blob = c.blob_bytes().unwrap();
        assert!(Checkpoint::parse(&c.manifest_text(), &blob[..blob.len() - 1]).is_err());
        assert!(Checkpoint::parse("x\tf64\t[1]\t0\n", &[0; 8]).is_err());
        assert!(Checkpoint::parse("x\tf32\t1\t0\n", &[0; 4]).is_err());
        assert!(Checkpoint::parse("x\tf32\t[1]\n", &[0; 4]).is_err());
    }

    #[test]
    fn rejects_f32_overflow() {
        let mut c = Checkpoint::default();
        c.push("big", Tensor::scalar(1e300).unwrap());
        assert!(c.blob_bytes().is_err());
    }

    #[test]
    fn apply_requires_matching_names() {
        let mut store = ParamStore::new();
        store.add("a/w", Tensor::zeros(&[2, 2]));
        let mut c = Checkpoint::default();
        c.push("a/w", Tensor::matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap());
        c.apply_to(&mut store).unwrap();
        assert_eq!(
            store.get(crate::params::ParamId(0)).data(),
            &[1.0, 2.0, 3.0, 4.0]
        );

        c.push("b", Tensor::zeros(&[1]));
        assert!(c.apply_to(&mut store).is_err());
    }
}
