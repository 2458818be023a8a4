//! Named parameter storage, tape binding, and checkpoint serialization.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use crate::error::{KvqError, Result};
use crate::tensor::{read_tensor_from, write_tensor_to, Tape, Tensor, TensorId};

/// Insertion-ordered collection of named parameter tensors. Iteration order
/// is creation order, which keeps optimizer updates and checkpoints
/// deterministic.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        if let Some(&i) = self.index.get(name) {
            self.entries[i].1 = t;
        } else {
            self.index.insert(name.to_string(), self.entries.len());
            self.entries.push((name.to_string(), t));
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Applies an in-place update to every parameter in insertion order.
    pub fn update_each(&mut self, mut f: impl FnMut(&str, &mut Vec<f64>)) {
        for (name, t) in &mut self.entries {
            let (shape, mut data) = std::mem::replace(t, Tensor::scalar(0.0)).into_parts();
            f(name, &mut data);
            *t = Tensor::new(shape, data).expect("update preserves shape");
        }
    }

    /// Writes all parameters as concatenated KVQT records plus a text manifest
    /// (`name<TAB>offset` lines). Both files are written atomically via a
    /// temp-file rename. `header` lines are embedded as `#`-comments at the
    /// top of the manifest.
    pub fn save(&self, blob_path: &Path, manifest_path: &Path, header: &[(&str, &str)]) -> Result<()> {
        let tmp_blob = append_ext(blob_path, ".tmp");
        let tmp_manifest = append_ext(manifest_path, ".tmp");
        {
            let mut blob = BufWriter::new(fs::File::create(&tmp_blob)?);
            let mut manifest = String::new();
            for (k, v) in header {
                manifest.push_str(&format!("# {k}={v}\n"));
            }
            let mut offset = 0u64;
            for (name, t) in &self.entries {
                manifest.push_str(&format!("{name}\t{offset}\n"));
                let mut buf = Vec::new();
                write_tensor_to(&mut buf, t)?;
                blob.write_all(&buf)?;
                offset += buf.len() as u64;
            }
            blob.flush()?;
            fs::write(&tmp_manifest, manifest)?;
        }
        fs::rename(&tmp_blob, blob_path)?;
        fs::rename(&tmp_manifest, manifest_path)?;
        Ok(())
    }

    /// Reads a checkpoint written by [`ParamStore::save`]. Returns the store
    /// and the parsed header pairs.
    pub fn load(blob_path: &Path, manifest_path: &Path) -> Result<(Self, Vec<(String, String)>)> {
        let manifest = fs::read_to_string(manifest_path)?;
        let mut store = ParamStore::new();
        let mut header = Vec::new();
        let mut blob = fs::File::open(blob_path)?;
        for line in manifest.lines() {
            if let Some(rest) = line.strip_prefix("# ") {
                if let Some((k, v)) = rest.split_once('=') {
                    header.push((k.to_string(), v.to_string()));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (name, off) = line
                .split_once('\t')
                .ok_or_else(|| KvqError::Format(format!("bad manifest line: {line}")))?;
            let off: u64 = off
                .parse()
                .map_err(|_| KvqError::Format(format!("bad offset in manifest: {line}")))?;
            blob.seek(SeekFrom::Start(off))?;
            let t = read_tensor_from(&mut ReadAdapter(&mut blob))?;
            store.insert(name, t);
        }
        Ok((store, header))
    }
}

fn append_ext(path: &Path, suffix: &str) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

struct ReadAdapter<'a>(&'a mut fs::File);

impl Read for ReadAdapter<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        self.0.read(buf)
    }
}

/// Tape handles for a bound parameter set.
pub struct BoundParams {
    ids: HashMap<String, TensorId>,
}

impl BoundParams {
    /// Inserts every parameter as a tape leaf. With `trainable` the leaves
    /// accumulate gradients; otherwise they are constants (cheaper for
    /// evaluation and for a frozen branch).
    pub fn bind(tape: &mut Tape, store: &ParamStore, trainable: bool) -> Self {
        let mut ids = HashMap::with_capacity(store.len());
        for (name, t) in store.iter() {
            let id = tape.leaf(t.clone(), trainable);
            ids.insert(name.to_string(), id);
        }
        BoundParams { ids }
    }

    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from bound set"))
    }

    pub fn try_id(&self, name: &str) -> Option<TensorId> {
        self.ids.get(name).copied()
    }

    /// Redirects a parameter name to a different tape node (used by gradient
    /// checks to substitute a probed tensor for one parameter).
    pub fn set(&mut self, name: &str, id: TensorId) {
        self.ids.insert(name.to_string(), id);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(n, &id)| (n.as_str(), id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_preserves_bits_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("a.w", Tensor::from_fn(&[3, 2], |i| (i as f64).exp()));
        store.insert("b.bias", Tensor::from_fn(&[4], |i| -(i as f64) / 7.0));
        let blob = dir.path().join("ckpt.kvqt");
        let manifest = dir.path().join("ckpt.manifest");
        store
            .save(&blob, &manifest, &[("config_hash", "abc123"), ("seed", "7")])
            .unwrap();
        let (loaded, header) = ParamStore::load(&blob, &manifest).unwrap();
        assert_eq!(header[0], ("config_hash".to_string(), "abc123".to_string()));
        assert_eq!(header[1], ("seed".to_string(), "7".to_string()));
        for (name, t) in store.iter() {
            let l = loaded.get(name).unwrap();
            assert_eq!(l.shape(), t.shape());
            for (a, b) in l.data().iter().zip(t.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn insert_replaces_existing_entry_in_place() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0));
        store.insert("y", Tensor::scalar(2.0));
        store.insert("x", Tensor::scalar(3.0));
        assert_eq!(store.len(), 2);
        assert_eq!(store.get("x").unwrap().item().unwrap(), 3.0);
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["x", "y"]);
    }
}
