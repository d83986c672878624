//! Deterministic, seekable payload generation with integrity digests.
//!
//! Object content is a counter construction over the splitmix64 finalizer:
//! block `k` of an object seeded with `s` is `mix64(s + (k+1)*GAMMA)` and the
//! byte stream is the little-endian concatenation of blocks 0,1,2,... This
//! makes any byte range computable without replaying the stream, which the
//! mock origin needs to honor HTTP Range requests.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::SizeClass;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// Chunk size used for streamed generation and hashing.
pub const CHUNK_BYTES: usize = 64 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("integrity mismatch for {object_name}: expected {expected}, got {actual}")]
    Integrity {
        object_name: String,
        expected: String,
        actual: String,
    },
    #[error("manifest error: {0}")]
    Manifest(String),
}

fn io_err(path: &Path, source: std::io::Error) -> DatagenError {
    DatagenError::Io { path: path.to_path_buf(), source }
}

/// splitmix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// The `k`-th 64-bit block of the object stream for `seed`.
pub fn payload_block(seed: u64, k: u64) -> u64 {
    mix64(seed.wrapping_add(k.wrapping_add(1).wrapping_mul(GAMMA)))
}

/// Fill `buf` with object bytes starting at stream `offset`.
pub fn fill_range(seed: u64, offset: u64, buf: &mut [u8]) {
    let mut pos = 0usize;
    let mut stream_pos = offset;
    while pos < buf.len() {
        let block_index = stream_pos / 8;
        let within = (stream_pos % 8) as usize;
        let block = payload_block(seed, block_index).to_le_bytes();
        let take = (8 - within).min(buf.len() - pos);
        buf[pos..pos + take].copy_from_slice(&block[within..within + take]);
        pos += take;
        stream_pos += take as u64;
    }
}

/// SHA-256 over exactly the first `size_bytes` bytes of the stream.
pub fn object_digest(seed: u64, size_bytes: u64) -> String {
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; CHUNK_BYTES];
    let mut remaining = size_bytes;
    let mut offset = 0u64;
    while remaining > 0 {
        let take = remaining.min(CHUNK_BYTES as u64) as usize;
        fill_range(seed, offset, &mut buf[..take]);
        hasher.update(&buf[..take]);
        offset += take as u64;
        remaining -= take as u64;
    }
    hex::encode(hasher.finalize())
}

/// One generated object: name, size, generation seed, and content digest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub object_name: String,
    pub size_bytes: u64,
    pub seed: u64,
    pub sha256_hex: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn lookup(&self, object_name: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.object_name == object_name)
    }

    /// A manifest for in-memory (synthetic) serving; no files are written.
    pub fn synthetic(profile: &[SizeClass], seed: u64) -> Self {
        let entries = profile
            .iter()
            .map(|&class| {
                let object_seed = per_object_seed(seed, class);
                ManifestEntry {
                    object_name: class.object_name(),
                    size_bytes: class.bytes(),
                    seed: object_seed,
                    sha256_hex: object_digest(object_seed, class.bytes()),
                }
            })
            .collect();
        CorpusManifest { entries }
    }

    pub fn load(path: &Path) -> Result<Self, DatagenError> {
        let data = std::fs::read(path).map_err(|e| io_err(path, e))?;
        serde_json::from_slice(&data)
            .map_err(|e| DatagenError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<(), DatagenError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| DatagenError::Manifest(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| io_err(path, e))
    }
}

/// Distinct per-object seed so classes do not share prefixes.
fn per_object_seed(corpus_seed: u64, class: SizeClass) -> u64 {
    mix64(corpus_seed ^ class.bytes())
}

/// Write one file per size class plus `manifest.json`, streaming in chunks.
pub fn materialize_corpus(
    profile: &[SizeClass],
    directory: &Path,
    seed: u64,
) -> Result<CorpusManifest, DatagenError> {
    std::fs::create_dir_all(directory).map_err(|e| io_err(directory, e))?;
    let mut manifest = CorpusManifest::default();
    for &class in profile {
        let object_seed = per_object_seed(seed, class);
        let name = class.object_name();
        let path = directory.join(&name);
        let sha256_hex = write_object(&path, object_seed, class.bytes())?;
        manifest.entries.push(ManifestEntry {
            object_name: name,
            size_bytes: class.bytes(),
            seed: object_seed,
            sha256_hex,
        });
    }
    manifest.save(&directory.join("manifest.json"))?;
    Ok(manifest)
}

/// Stream one object to disk, returning the digest of the written bytes.
fn write_object(path: &Path, seed: u64, size_bytes: u64) -> Result<String, DatagenError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = BufWriter::new(file);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; CHUNK_BYTES];
    let mut remaining = size_bytes;
    let mut offset = 0u64;
    while remaining > 0 {
        let take = remaining.min(CHUNK_BYTES as u64) as usize;
        fill_range(seed, offset, &mut buf[..take]);
        hasher.update(&buf[..take]);
        writer.write_all(&buf[..take]).map_err(|e| io_err(path, e))?;
        offset += take as u64;
        remaining -= take as u64;
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    Ok(hex::encode(hasher.finalize()))
}

/// Re-read every file in the manifest and confirm its digest.
pub fn verify_corpus(manifest: &CorpusManifest, directory: &Path) -> Result<(), DatagenError> {
    let mut buf = vec![0u8; CHUNK_BYTES];
    for entry in &manifest.entries {
        let path = directory.join(&entry.object_name);
        let mut file = File::open(&path).map_err(|e| io_err(&path, e))?;
        let mut hasher = Sha256::new();
        loop {
            let n = file.read(&mut buf).map_err(|e| io_err(&path, e))?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
        }
        let actual = hex::encode(hasher.finalize());
        if actual != entry.sha256_hex {
            return Err(DatagenError::Integrity {
                object_name: entry.object_name.clone(),
                expected: entry.sha256_hex.clone(),
                actual,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SizeClass;

    /// Independent splitmix64: the textbook stateful generator. The counter
    /// construction's block k for seed s must equal the (k+1)-th output of a
    /// generator whose state starts at s.
    struct RefSplitMix64 {
        state: u64,
    }

    impl RefSplitMix64 {
        fn next(&mut self) -> u64 {
            self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = self.state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^ (z >> 31)
        }
    }

    #[test]
    fn block_zero_matches_reference_splitmix64() {
        // First output of splitmix64 seeded with 0, a published test vector.
        assert_eq!(payload_block(0, 0), 0xE220_A839_7B1D_CDAF);
        let mut gen = RefSplitMix64 { state: 42 };
        for k in 0..64 {
            assert_eq!(payload_block(42, k), gen.next(), "block {k}");
        }
    }

    #[test]
    fn distinct_seeds_give_distinct_blocks() {
        assert_ne!(payload_block(0, 0), payload_block(1, 0));
    }

    #[test]
    fn range_read_matches_block_layout() {
        let mut buf = [0u8; 8];
        fill_range(0, 8, &mut buf);
        assert_eq!(buf, payload_block(0, 1).to_le_bytes());
    }

    #[test]
    fn unaligned_range_reads_agree_with_full_stream() {
        let mut full = vec![0u8; 4096];
        fill_range(7, 0, &mut full);
        for (offset, len) in [(0usize, 1usize), (1, 7), (3, 13), (8, 8), (1000, 999)] {
            let mut part = vec![0u8; len];
            fill_range(7, offset as u64, &mut part);
            assert_eq!(&part[..], &full[offset..offset + len], "offset {offset} len {len}");
        }
    }

    #[test]
    fn empty_digest_is_the_known_constant() {
        assert_eq!(
            object_digest(1234, 0),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn digest_1024_matches_frozen_golden() {
        // Frozen from an independent hash (python hashlib over the reference
        // splitmix64 stream for seed 0).
        assert_eq!(
            object_digest(0, 1024),
            "79b857605c8e365750212fa51d6257014da97adebb16f980754f9252f5721de3"
        );
    }

    #[test]
    fn digest_changes_when_one_byte_is_appended() {
        assert_ne!(object_digest(0, 1024), object_digest(0, 1025));
    }

    #[test]
    fn materialize_and_verify_desk_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let profile = [SizeClass::K1, SizeClass::M1];
        let manifest = materialize_corpus(&profile, dir.path(), 99).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        verify_corpus(&manifest, dir.path()).unwrap();

        let loaded = CorpusManifest::load(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(loaded, manifest);
    }

    #[test]
    fn empty_profile_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = materialize_corpus(&[], dir.path(), 0).unwrap();
        assert!(manifest.entries.is_empty());
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn synthetic_manifest_matches_materialized_digests() {
        let dir = tempfile::tempdir().unwrap();
        let profile = [SizeClass::K1];
        let on_disk = materialize_corpus(&profile, dir.path(), 7).unwrap();
        let synthetic = CorpusManifest::synthetic(&profile, 7);
        assert_eq!(on_disk, synthetic);
    }
}
