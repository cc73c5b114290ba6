// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation store: a manifest describing words, senses and sentences, plus
//! one LEXA matrix per (site, layer) whose rows follow the global sentence
//! index.
//!
//! ```text
//! store/
//!   manifest.json
//!   mlp_intermediate__layer0.lexa
//!   mlp_intermediate__layer1.lexa
//!   token_embedding__layer0.lexa
//! ```
//!
//! Matrices are read lazily on first access and cached; a store is immutable
//! once opened and can be shared across threads.

pub mod lexa;
pub mod manifest;
pub mod validate;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use sha2::{Digest, Sha256};

use crate::error::{LexError, Result};
pub use lexa::Matrix;
pub use manifest::{
    LinkSource, Manifest, PartOfSpeech, SenseLabel, SentenceRecord, SiteDescriptor, WordEntry,
};
pub use validate::{validate, Severity, ValidationEntry, ValidationReport};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MatrixKey {
    pub site: String,
    pub layer: usize,
}

impl MatrixKey {
    pub fn new(site: impl Into<String>, layer: usize) -> Self {
        MatrixKey {
            site: site.into(),
            layer,
        }
    }

    pub fn file_name(&self) -> String {
        format!("{}__layer{}.lexa", self.site, self.layer)
    }
}

#[derive(Debug)]
struct Slot {
    path: Option<PathBuf>,
    dim: usize,
    cell: OnceLock<Arc<Matrix>>,
}

/// Word and sense owning a sentence row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowOwner {
    pub word: usize,
    pub sense: SenseLabel,
}

#[derive(Debug)]
pub struct ActivationStore {
    manifest: Manifest,
    root: Option<PathBuf>,
    slots: BTreeMap<MatrixKey, Slot>,
    owners: Vec<RowOwner>,
}

fn expected_slots(manifest: &Manifest) -> Vec<(MatrixKey, usize)> {
    let mut out = Vec::new();
    for site in &manifest.sites {
        for layer in site.captured_layers() {
            out.push((MatrixKey::new(&site.site_id, layer), site.dim_per_layer[layer]));
        }
    }
    out.sort();
    out
}

fn row_owners(manifest: &Manifest) -> Vec<RowOwner> {
    let mut owners = vec![
        RowOwner {
            word: 0,
            sense: SenseLabel::A
        };
        manifest.n_sentences()
    ];
    for (wi, w) in manifest.words.iter().enumerate() {
        for s in &w.sentences {
            owners[s.sentence_id] = RowOwner {
                word: wi,
                sense: s.sense,
            };
        }
    }
    owners
}

impl ActivationStore {
    /// Open a store directory. The manifest is parsed and checked and every
    /// matrix header is verified against it; payloads load on first use.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let root = path.as_ref().to_path_buf();
        let manifest_path = root.join(MANIFEST_FILE);
        let bytes = std::fs::read(&manifest_path).map_err(|e| LexError::io(&manifest_path, e))?;
        let manifest = Manifest::parse(&manifest_path.display().to_string(), &bytes)?;
        let n_rows = manifest.n_sentences();

        let mut slots = BTreeMap::new();
        for (key, dim) in expected_slots(&manifest) {
            let file = root.join(key.file_name());
            let name = file.display().to_string();
            let mut header = [0u8; lexa::HEADER_LEN];
            let len = read_prefix(&file, &mut header)?;
            let h = lexa::decode_header(&name, &header[..len])?;
            if h.n_rows != n_rows as u64 || h.dim != dim as u64 {
                return Err(LexError::DimensionMismatch(format!(
                    "{name}: header says {}x{}, manifest expects {n_rows}x{dim}",
                    h.n_rows, h.dim
                )));
            }
            let on_disk = std::fs::metadata(&file)
                .map_err(|e| LexError::io(&file, e))?
                .len();
            let expected = h
                .payload_len()
                .map(|p| (p + lexa::HEADER_LEN) as u64)
                .unwrap_or(u64::MAX);
            if on_disk != expected {
                return Err(LexError::format(
                    name,
                    format!("file is {on_disk} bytes, header implies {expected}"),
                ));
            }
            slots.insert(
                key,
                Slot {
                    path: Some(file),
                    dim,
                    cell: OnceLock::new(),
                },
            );
        }
        let owners = row_owners(&manifest);
        Ok(ActivationStore {
            manifest,
            root: Some(root),
            slots,
            owners,
        })
    }

    /// In-memory store. Every (site, layer) the manifest declares must be
    /// supplied with matching shape; extra matrices are an error.
    pub fn from_parts(manifest: Manifest, matrices: BTreeMap<MatrixKey, Matrix>) -> Result<Self> {
        manifest
            .check_structure()
            .map_err(|cause| LexError::format("manifest", cause))?;
        check_matrices(&manifest, &matrices)?;
        let owners = row_owners(&manifest);
        let slots = matrices
            .into_iter()
            .map(|(k, m)| {
                let cell = OnceLock::new();
                let dim = m.cols();
                let _ = cell.set(Arc::new(m));
                (
                    k,
                    Slot {
                        path: None,
                        dim,
                        cell,
                    },
                )
            })
            .collect();
        Ok(ActivationStore {
            manifest,
            root: None,
            slots,
            owners,
        })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn root(&self) -> Option<&Path> {
        self.root.as_deref()
    }

    pub fn n_layers(&self) -> usize {
        self.manifest.n_layers
    }

    pub fn n_sentences(&self) -> usize {
        self.owners.len()
    }

    pub fn keys(&self) -> impl Iterator<Item = &MatrixKey> {
        self.slots.keys()
    }

    pub fn owner(&self, sentence_id: usize) -> Option<RowOwner> {
        self.owners.get(sentence_id).copied()
    }

    pub fn has_matrix(&self, site: &str, layer: usize) -> bool {
        self.slots.contains_key(&MatrixKey::new(site, layer))
    }

    /// Neuron count at (site, layer).
    pub fn dim(&self, site: &str, layer: usize) -> Result<usize> {
        self.slots
            .get(&MatrixKey::new(site, layer))
            .map(|s| s.dim)
            .ok_or_else(|| no_matrix(site, layer))
    }

    /// Full matrix at (site, layer), loading it if needed.
    pub fn matrix(&self, site: &str, layer: usize) -> Result<Arc<Matrix>> {
        let key = MatrixKey::new(site, layer);
        let slot = self.slots.get(&key).ok_or_else(|| no_matrix(site, layer))?;
        if let Some(m) = slot.cell.get() {
            return Ok(Arc::clone(m));
        }
        let path = slot
            .path
            .as_ref()
            .expect("in-memory slots are always initialized");
        let m = lexa::read_file(path)?;
        if m.rows() != self.n_sentences() || m.cols() != slot.dim {
            return Err(LexError::DimensionMismatch(format!(
                "{} changed on disk since open",
                path.display()
            )));
        }
        // A concurrent loader may win; both decoded the same bytes.
        let _ = slot.cell.set(Arc::new(m));
        Ok(Arc::clone(slot.cell.get().unwrap()))
    }

    /// Rows `sentence_ids` of (site, layer), in the requested order.
    pub fn slice_activations(&self, layer: usize, site: &str, sentence_ids: &[usize]) -> Result<Matrix> {
        if layer >= self.n_layers() {
            return Err(LexError::OutOfRange(format!(
                "layer {layer} (store has {})",
                self.n_layers()
            )));
        }
        let m = self.matrix(site, layer)?;
        let mut out = Vec::with_capacity(sentence_ids.len() * m.cols());
        for &id in sentence_ids {
            if id >= m.rows() {
                return Err(LexError::OutOfRange(format!(
                    "sentence {id} (store has {})",
                    m.rows()
                )));
            }
            out.extend_from_slice(m.row(id));
        }
        Matrix::new(sentence_ids.len(), m.cols(), out)
    }

    /// All matrices, loaded.
    pub fn load_all(&self) -> Result<BTreeMap<MatrixKey, Matrix>> {
        self.slots
            .keys()
            .map(|k| Ok((k.clone(), (*self.matrix(&k.site, k.layer)?).clone())))
            .collect()
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        write_store(&self.manifest, &self.load_all()?, path)
    }

    /// SHA-256 over the canonical manifest bytes and every matrix file as
    /// `write_store` would produce it, in key order. Lowercase hex.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.manifest.to_json_bytes());
        for key in self.slots.keys() {
            let m = self.matrix(&key.site, key.layer)?;
            h.update(key.file_name().as_bytes());
            h.update(lexa::encode(&m));
        }
        Ok(hex(&h.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn no_matrix(site: &str, layer: usize) -> LexError {
    LexError::OutOfRange(format!("no matrix for site {site} at layer {layer}"))
}

fn read_prefix(path: &Path, buf: &mut [u8]) -> Result<usize> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| LexError::io(path, e))?;
    let mut filled = 0;
    while filled < buf.len() {
        let n = f.read(&mut buf[filled..]).map_err(|e| LexError::io(path, e))?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

fn check_matrices(manifest: &Manifest, matrices: &BTreeMap<MatrixKey, Matrix>) -> Result<()> {
    let expected = expected_slots(manifest);
    let n_rows = manifest.n_sentences();
    for (key, dim) in &expected {
        let m = matrices.get(key).ok_or_else(|| {
            LexError::DimensionMismatch(format!("missing matrix {}", key.file_name()))
        })?;
        if m.rows() != n_rows || m.cols() != *dim {
            return Err(LexError::DimensionMismatch(format!(
                "{} is {}x{}, manifest expects {n_rows}x{dim}",
                key.file_name(),
                m.rows(),
                m.cols()
            )));
        }
    }
    if matrices.len() != expected.len() {
        let extra = matrices
            .keys()
            .find(|k| !expected.iter().any(|(e, _)| e == *k))
            .map(|k| k.file_name())
            .unwrap_or_default();
        return Err(LexError::DimensionMismatch(format!(
            "matrix {extra} is not declared by the manifest"
        )));
    }
    Ok(())
}

/// Write a store directory. Output bytes depend only on the inputs.
pub fn write_store(
    manifest: &Manifest,
    matrices: &BTreeMap<MatrixKey, Matrix>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let root = path.as_ref();
    manifest
        .check_structure()
        .map_err(|cause| LexError::format("manifest", cause))?;
    check_matrices(manifest, matrices)?;
    for (key, m) in matrices {
        if let Some((r, c)) = m.first_non_finite() {
            return Err(LexError::InvalidInput(format!(
                "{}: non-finite value at row {r}, col {c}",
                key.file_name()
            )));
        }
    }
    std::fs::create_dir_all(root).map_err(|e| LexError::io(root, e))?;
    let manifest_path = root.join(MANIFEST_FILE);
    std::fs::write(&manifest_path, manifest.to_json_bytes())
        .map_err(|e| LexError::io(&manifest_path, e))?;
    for (key, m) in matrices {
        lexa::write_file(&root.join(key.file_name()), m)?;
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::fixtures::tiny_store;
    use super::*;

    #[test]
    fn write_then_open_round_trips() {
        let (manifest, matrices) = tiny_store();
        let dir = tempfile::tempdir().unwrap();
        write_store(&manifest, &matrices, dir.path()).unwrap();
        let store = ActivationStore::open(dir.path()).unwrap();
        assert_eq!(store.n_layers(), 2);
        assert_eq!(store.manifest(), &manifest);
        for (k, m) in &matrices {
            let back = store.matrix(&k.site, k.layer).unwrap();
            let same_bits = back
                .as_slice()
                .iter()
                .zip(m.as_slice())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            assert!(same_bits);
        }
    }

    #[test]
    fn writes_are_byte_identical() {
        let (manifest, matrices) = tiny_store();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_store(&manifest, &matrices, a.path()).unwrap();
        write_store(&manifest, &matrices, b.path()).unwrap();
        for name in ["manifest.json", "mlp_intermediate__layer0.lexa", "mlp_intermediate__layer1.lexa"] {
            assert_eq!(
                std::fs::read(a.path().join(name)).unwrap(),
                std::fs::read(b.path().join(name)).unwrap()
            );
        }
    }

    #[test]
    fn open_rejects_header_dim_mismatch() {
        let (mut manifest, matrices) = tiny_store();
        let dir = tempfile::tempdir().unwrap();
        write_store(&manifest, &matrices, dir.path()).unwrap();
        manifest.sites[0].dim_per_layer = vec![8, 8];
        std::fs::write(dir.path().join(MANIFEST_FILE), manifest.to_json_bytes()).unwrap();
        let err = ActivationStore::open(dir.path()).unwrap_err();
        assert!(matches!(err, LexError::DimensionMismatch(_)), "{err}");
    }

    #[test]
    fn open_rejects_missing_file_and_bad_version() {
        let (manifest, matrices) = tiny_store();
        let dir = tempfile::tempdir().unwrap();
        write_store(&manifest, &matrices, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("mlp_intermediate__layer1.lexa")).unwrap();
        assert!(matches!(
            ActivationStore::open(dir.path()).unwrap_err(),
            LexError::Io { .. }
        ));

        let dir = tempfile::tempdir().unwrap();
        let mut m2 = manifest.clone();
        write_store(&manifest, &matrices, dir.path()).unwrap();
        m2.format_version = 7;
        std::fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_vec(&m2).unwrap(),
        )
        .unwrap();
        let err = ActivationStore::open(dir.path()).unwrap_err().to_string();
        assert!(err.contains("format_version"), "{err}");
    }

    #[test]
    fn open_names_file_with_bad_magic() {
        let (manifest, matrices) = tiny_store();
        let dir = tempfile::tempdir().unwrap();
        write_store(&manifest, &matrices, dir.path()).unwrap();
        let f = dir.path().join("mlp_intermediate__layer0.lexa");
        let mut bytes = std::fs::read(&f).unwrap();
        bytes[1] = b'Z';
        std::fs::write(&f, bytes).unwrap();
        let err = ActivationStore::open(dir.path()).unwrap_err().to_string();
        assert!(err.contains("mlp_intermediate__layer0.lexa") && err.contains("magic"), "{err}");
    }

    #[test]
    fn write_rejects_inf_before_touching_disk() {
        let (manifest, mut matrices) = tiny_store();
        matrices.values_mut().next().unwrap().as_mut_slice()[5] = f32::INFINITY;
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("out");
        assert!(write_store(&manifest, &matrices, &target).is_err());
        assert!(!target.exists());
    }

    #[test]
    fn slicing() {
        let (manifest, matrices) = tiny_store();
        let store = ActivationStore::from_parts(manifest, matrices.clone()).unwrap();
        let m0 = &matrices[&MatrixKey::new("mlp_intermediate", 0)];

        let empty = store.slice_activations(0, "mlp_intermediate", &[]).unwrap();
        assert_eq!((empty.rows(), empty.cols()), (0, 4));

        let one = store.slice_activations(0, "mlp_intermediate", &[5]).unwrap();
        assert_eq!(one.row(0), m0.row(5));

        let rep = store.slice_activations(0, "mlp_intermediate", &[2, 2]).unwrap();
        assert_eq!(rep.row(0), rep.row(1));

        assert!(store.slice_activations(2, "mlp_intermediate", &[0]).is_err());
        assert!(store.slice_activations(0, "mlp_intermediate", &[999]).is_err());
        assert!(store.slice_activations(0, "nope", &[0]).is_err());
    }

    #[test]
    fn concurrent_slices_agree() {
        let (manifest, matrices) = tiny_store();
        let dir = tempfile::tempdir().unwrap();
        write_store(&manifest, &matrices, dir.path()).unwrap();
        let store = ActivationStore::open(dir.path()).unwrap();
        let ids: Vec<usize> = (0..store.n_sentences()).rev().collect();
        let results: Vec<Matrix> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..4)
                .map(|_| s.spawn(|| store.slice_activations(1, "mlp_intermediate", &ids).unwrap()))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });
        assert!(results.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn content_hash_matches_between_disk_and_memory() {
        let (manifest, matrices) = tiny_store();
        let dir = tempfile::tempdir().unwrap();
        write_store(&manifest, &matrices, dir.path()).unwrap();
        let disk = ActivationStore::open(dir.path()).unwrap();
        let mem = ActivationStore::from_parts(manifest, matrices).unwrap();
        assert_eq!(disk.content_hash().unwrap(), mem.content_hash().unwrap());
        assert_eq!(disk.content_hash().unwrap().len(), 64);
    }

    #[test]
    fn from_parts_rejects_missing_or_extra_matrices() {
        let (manifest, mut matrices) = tiny_store();
        let extra = matrices.values().next().unwrap().clone();
        matrices.insert(MatrixKey::new("other", 0), extra);
        assert!(ActivationStore::from_parts(manifest.clone(), matrices).is_err());
        let (_, mut matrices) = tiny_store();
        matrices.pop_first();
        assert!(ActivationStore::from_parts(manifest, matrices).is_err());
    }
}
