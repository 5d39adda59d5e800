//! On-disk knowledge-base store: an entries file (line-delimited records,
//! embeddings elided) plus a binary embedding matrix with a version byte,
//! dimension, and count header. Little-endian f32 rows.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::taxonomy::Taxonomy;

use super::{EmbeddingMatrix, KbEntry, KbError, KnowledgeBase};

pub const STORE_VERSION: u8 = 1;
const ENTRIES_FILE: &str = "entries.jsonl";
const EMBEDDINGS_FILE: &str = "embeddings.bin";

impl KnowledgeBase {
    /// Writes the store into `dir`. Refuses to clobber an existing store
    /// unless `force` is set.
    pub fn save(&self, dir: impl AsRef<Path>, force: bool) -> Result<(), KbError> {
        let dir = dir.as_ref();
        let entries_path = dir.join(ENTRIES_FILE);
        if entries_path.exists() && !force {
            return Err(KbError::StoreExists(dir.display().to_string()));
        }
        std::fs::create_dir_all(dir)?;

        let mut entries_out = String::new();
        for entry in self.entries() {
            entries_out.push_str(&serde_json::to_string(entry).expect("entry serializes"));
            entries_out.push('\n');
        }
        std::fs::write(&entries_path, entries_out)?;

        let matrix = self.matrix();
        let mut bin: Vec<u8> =
            Vec::with_capacity(9 + std::mem::size_of_val(matrix.raw()));
        bin.push(STORE_VERSION);
        bin.extend_from_slice(&(matrix.dim() as u32).to_le_bytes());
        bin.extend_from_slice(&(matrix.count() as u32).to_le_bytes());
        for value in matrix.raw() {
            bin.extend_from_slice(&value.to_le_bytes());
        }
        std::fs::write(dir.join(EMBEDDINGS_FILE), bin)?;
        Ok(())
    }

    /// Loads a store written by [`KnowledgeBase::save`], rebuilding the pool
    /// partition from the taxonomy.
    pub fn load(dir: impl AsRef<Path>, taxonomy: Arc<Taxonomy>) -> Result<Self, KbError> {
        let dir = dir.as_ref();
        let entries_text = std::fs::read_to_string(dir.join(ENTRIES_FILE))?;
        let mut entries: Vec<KbEntry> = Vec::new();
        for (lineno, line) in entries_text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: KbEntry = serde_json::from_str(line).map_err(|e| {
                KbError::StoreCorrupt(format!("{ENTRIES_FILE} line {}: {e}", lineno + 1))
            })?;
            entries.push(entry);
        }

        let mut file = std::fs::File::open(dir.join(EMBEDDINGS_FILE))?;
        let mut header = [0u8; 9];
        file.read_exact(&mut header)
            .map_err(|e| KbError::StoreCorrupt(format!("{EMBEDDINGS_FILE} header: {e}")))?;
        if header[0] != STORE_VERSION {
            return Err(KbError::StoreVersionMismatch {
                found: header[0],
                expected: STORE_VERSION,
            });
        }
        let dim = u32::from_le_bytes(header[1..5].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(header[5..9].try_into().unwrap()) as usize;
        if count != entries.len() {
            return Err(KbError::StoreCorrupt(format!(
                "matrix holds {count} rows but {} entries listed",
                entries.len()
            )));
        }
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;
        let expected_bytes = dim * count * std::mem::size_of::<f32>();
        if payload.len() != expected_bytes {
            return Err(KbError::StoreCorrupt(format!(
                "matrix payload is {} bytes, expected {expected_bytes}",
                payload.len()
            )));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|chunk| f32::from_le_bytes(chunk.try_into().unwrap()))
            .collect();
        KnowledgeBase::assemble(entries, EmbeddingMatrix::from_rows(dim, data), taxonomy)
    }
}

/// Writes a human-readable store summary (pool sizes, dimension, count).
pub fn write_summary(kb: &KnowledgeBase, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "entries: {}", kb.len())?;
    writeln!(out, "dimension: {}", kb.dim())?;
    writeln!(out, "clean pool: {}", kb.clean_pool_len())?;
    for category in kb.taxonomy().categories() {
        writeln!(
            out,
            "category pool {}: {}",
            category.id,
            kb.category_pool_len(&category.id).unwrap_or(0)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CodeSample, LabeledDataset};
    use crate::structuring::Structurer;
    use crate::test_support::{hash_gateway, two_category_taxonomy};
    use tempfile::TempDir;

    fn sample_kb() -> (KnowledgeBase, Arc<Taxonomy>) {
        let taxonomy = two_category_taxonomy();
        let samples = vec![
            CodeSample::new("b1", "void log(char *m) { puts(m); }", "BENIGN"),
            CodeSample::new("m1", "void f() { char b[4]; strcpy(b, in); }", "CWE-119"),
            CodeSample::new("i1", "void h() { system(cmd); }", "CWE-79"),
        ];
        let dataset = LabeledDataset::from_samples(samples, Arc::clone(&taxonomy)).unwrap();
        let kb = KnowledgeBase::build(&dataset, &Structurer::rules(), &hash_gateway(32)).unwrap();
        (kb, taxonomy)
    }

    #[test]
    fn round_trips_through_disk() {
        let (kb, taxonomy) = sample_kb();
        let dir = TempDir::new().unwrap();
        kb.save(dir.path(), false).unwrap();
        let loaded = KnowledgeBase::load(dir.path(), taxonomy).unwrap();
        assert_eq!(loaded.len(), kb.len());
        assert_eq!(loaded.dim(), kb.dim());
        assert_eq!(loaded.matrix().raw(), kb.matrix().raw());
        assert_eq!(loaded.clean_pool_len(), 1);
        assert_eq!(loaded.category_pool_len("memory"), Some(1));
        assert!(loaded.validate_partition());
    }

    #[test]
    fn refuses_overwrite_without_force() {
        let (kb, _) = sample_kb();
        let dir = TempDir::new().unwrap();
        kb.save(dir.path(), false).unwrap();
        assert!(matches!(
            kb.save(dir.path(), false),
            Err(KbError::StoreExists(_))
        ));
        kb.save(dir.path(), true).unwrap();
    }

    #[test]
    fn rejects_version_mismatch() {
        let (kb, taxonomy) = sample_kb();
        let dir = TempDir::new().unwrap();
        kb.save(dir.path(), false).unwrap();
        let bin_path = dir.path().join(EMBEDDINGS_FILE);
        let mut bytes = std::fs::read(&bin_path).unwrap();
        bytes[0] = 99;
        std::fs::write(&bin_path, bytes).unwrap();
        assert!(matches!(
            KnowledgeBase::load(dir.path(), taxonomy),
            Err(KbError::StoreVersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn rejects_truncated_matrix() {
        let (kb, taxonomy) = sample_kb();
        let dir = TempDir::new().unwrap();
        kb.save(dir.path(), false).unwrap();
        let bin_path = dir.path().join(EMBEDDINGS_FILE);
        let bytes = std::fs::read(&bin_path).unwrap();
        std::fs::write(&bin_path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            KnowledgeBase::load(dir.path(), taxonomy),
            Err(KbError::StoreCorrupt(_))
        ));
    }
}
