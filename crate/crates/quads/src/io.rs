//! Persistence and dataset plumbing: the packed model container, PCM16
//! WAV reading/writing, the synthetic spoken-command corpus, and CSV
//! manifests.

pub mod corpus;
pub mod packed;
pub mod wav;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at offset 0: expected \"QDSM\", got {got:?}")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported format version {got} (expected {expected})")]
    BadVersion { got: u16, expected: u16 },
    #[error("file truncated at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error(
        "crc mismatch at byte offset {offset}: stored {stored:#010x}, computed {computed:#010x}"
    )]
    CrcMismatch {
        offset: usize,
        stored: u32,
        computed: u32,
    },
    #[error("malformed file at byte offset {offset}: {what}")]
    Malformed { offset: usize, what: String },
    #[error("wav {path}: field {field} has unsupported value {value}")]
    WavField {
        path: PathBuf,
        field: &'static str,
        value: String,
    },
    #[error("manifest {path} line {line}: {what}")]
    Manifest {
        path: PathBuf,
        line: usize,
        what: String,
    },
    #[error(transparent)]
    Quant(#[from] crate::quant::QuantError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// CRC-32 (IEEE 802.3: reflected polynomial 0xEDB88320, init and xorout
/// 0xFFFFFFFF), the checksum trailing every packed file.
pub fn crc32(bytes: &[u8]) -> u32 {
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc ^= b as u32;
        for _ in 0..8 {
            let mask = (crc & 1).wrapping_neg();
            crc = (crc >> 1) ^ (0xEDB8_8320 & mask);
        }
    }
    !crc
}

/// Dataset index: `(relative audio path, label)` rows plus the derived
/// label vocabulary. Labels map to contiguous class indices by collecting
/// first-seen labels and sorting them, so every split of one corpus agrees
/// on the same indices.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub rows: Vec<(String, String)>,
    pub vocab: Vec<String>,
    /// Directory the relative paths resolve against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn from_rows(rows: Vec<(String, String)>, base_dir: &Path) -> Self {
        let mut vocab: Vec<String> = Vec::new();
        for (_, label) in &rows {
            if !vocab.contains(label) {
                vocab.push(label.clone());
            }
        }
        vocab.sort();
        Self {
            rows,
            vocab,
            base_dir: base_dir.to_path_buf(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.vocab.len()
    }

    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.vocab.iter().position(|l| l == label)
    }

    pub fn audio_path(&self, row: usize) -> PathBuf {
        self.base_dir.join(&self.rows[row].0)
    }

    /// Writes `path,label` rows under a header line.
    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        let mut out = String::from("path,label\n");
        for (p, l) in &self.rows {
            out.push_str(p);
            out.push(',');
            out.push_str(l);
            out.push('\n');
        }
        let mut f = fs::File::create(path).map_err(io_err(path))?;
        f.write_all(out.as_bytes()).map_err(io_err(path))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let base_dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line.trim() != "path,label" {
                    return Err(IoError::Manifest {
                        path: path.to_path_buf(),
                        line: 1,
                        what: format!("expected header \"path,label\", got {line:?}"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (p, l) = line.split_once(',').ok_or_else(|| IoError::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                what: "expected two comma-separated fields".into(),
            })?;
            rows.push((p.to_string(), l.to_string()));
        }
        Ok(Self::from_rows(rows, &base_dir))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc32_known_vector() {
        // the classic check value
        assert_eq!(crc32(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn vocab_is_sorted_and_contiguous() {
        let m = Manifest::from_rows(
            vec![
                ("a.wav".into(), "up".into()),
                ("b.wav".into(), "down".into()),
                ("c.wav".into(), "up".into()),
                ("d.wav".into(), "left".into()),
            ],
            Path::new("."),
        );
        assert_eq!(m.vocab, vec!["down", "left", "up"]);
        assert_eq!(m.class_index("up"), Some(2));
        assert_eq!(m.n_classes(), 3);
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest::from_rows(
            vec![
                ("x/1.wav".into(), "go".into()),
                ("x/2.wav".into(), "stop".into()),
            ],
            dir.path(),
        );
        let p = dir.path().join("manifest.csv");
        m.save(&p).unwrap();
        let loaded = Manifest::load(&p).unwrap();
        assert_eq!(loaded.rows, m.rows);
        assert_eq!(loaded.vocab, m.vocab);
        assert_eq!(loaded.base_dir, dir.path());
    }

    #[test]
    fn malformed_manifest_lines_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        fs::write(&p, "path,label\nno-comma-here\n").unwrap();
        let err = Manifest::load(&p).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }
}
