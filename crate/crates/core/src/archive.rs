//! Single-file archive of named f32 tensors with a JSON manifest.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a u64
//! manifest length, the manifest JSON, then the raw blob section. Every blob
//! is row-major little-endian f32 and carries a CRC-32 in the manifest so a
//! truncated or bit-flipped file fails loudly instead of loading garbage.
//! Both backbone weight files and training checkpoints use this container,
//! distinguished by `meta.kind`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CYCSTYAR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
    crc32: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    tensors: Vec<TensorEntry>,
    meta: serde_json::Value,
}

/// An archive being assembled or already decoded: named tensors plus a
/// free-form JSON metadata object.
#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    tensors: BTreeMap<String, Tensor<f32>>,
    pub meta: serde_json::Value,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        TensorArchive {
            tensors: BTreeMap::new(),
            meta,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Schema(format!("missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut blob_section: Vec<u8> = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        // BTreeMap iteration is sorted by name: identical archives are
        // byte-identical regardless of insertion order.
        for (name, tensor) in &self.tensors {
            let offset = blob_section.len() as u64;
            let mut hasher = crc32fast::Hasher::new();
            for v in tensor.data() {
                let bytes = v.to_le_bytes();
                hasher.update(&bytes);
                blob_section.extend_from_slice(&bytes);
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                offset,
                byte_len: (tensor.len() * 4) as u64,
                crc32: hasher.finalize(),
            });
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            tensors: entries,
            meta: self.meta.clone(),
        };
        let manifest_bytes = serde_json::to_vec(&manifest)
            .map_err(|e| Error::Schema(format!("manifest encode: {e}")))?;

        let mut file = std::fs::File::create(path)?;
        file.write_all(MAGIC)?;
        file.write_all(&FORMAT_VERSION.to_le_bytes())?;
        file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&manifest_bytes)?;
        file.write_all(&blob_section)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path)?;
        let mut header = [0u8; 20];
        file.read_exact(&mut header).map_err(|_| {
            Error::Integrity(format!("{}: file too short for header", path.display()))
        })?;
        if &header[0..8] != MAGIC {
            return Err(Error::Schema(format!(
                "{}: not a tensor archive (bad magic)",
                path.display()
            )));
        }
        let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "archive format v{version}, this build reads v{FORMAT_VERSION}"
            )));
        }
        let manifest_len = u64::from_le_bytes(header[12..20].try_into().unwrap()) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        file.read_exact(&mut manifest_bytes)
            .map_err(|_| Error::Integrity("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
            .map_err(|e| Error::Schema(format!("manifest decode: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "manifest format v{}, this build reads v{FORMAT_VERSION}",
                manifest.format_version
            )));
        }
        let mut blob_section = Vec::new();
        file.read_to_end(&mut blob_section)?;

        let mut tensors = BTreeMap::new();
        for entry in &manifest.tensors {
            let start = entry.offset as usize;
            let end = start + entry.byte_len as usize;
            let blob = blob_section.get(start..end).ok_or_else(|| {
                Error::Integrity(format!("tensor {:?}: blob out of range", entry.name))
            })?;
            let mut hasher = crc32fast::Hasher::new();
            hasher.update(blob);
            if hasher.finalize() != entry.crc32 {
                return Err(Error::Integrity(format!(
                    "tensor {:?}: CRC-32 mismatch",
                    entry.name
                )));
            }
            let count: usize = entry.shape.iter().product();
            if count * 4 != blob.len() {
                return Err(Error::Integrity(format!(
                    "tensor {:?}: {} bytes for shape {:?}",
                    entry.name,
                    blob.len(),
                    entry.shape
                )));
            }
            let data: Vec<f32> = blob
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.insert(entry.name.clone(), Tensor::from_vec(&entry.shape, data));
        }
        Ok(TensorArchive {
            tensors,
            meta: manifest.meta,
        })
    }
}

/// FNV-1a over all tensor bytes in name order; used to fingerprint a
/// backbone so checkpoints can warn when evaluated against a different one.
pub fn fingerprint(archive_like: impl Iterator<Item = (String, Vec<u8>)>) -> String {
    let mut hash: u64 = 0xcbf29ce484222325;
    for (name, bytes) in archive_like {
        for b in name.as_bytes().iter().chain(bytes.iter()) {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
    }
    format!("{hash:016x}")
}
