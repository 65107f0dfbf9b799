//! Reading and writing unembedding matrices (UFPM container) and integer
//! token corpora.
//!
//! A UFPM file is laid out as:
//!
//! ```text
//! offset 0   "UFPM"               magic
//! offset 4   0x01                 version
//! offset 5   u32 little-endian    header length L
//! offset 9   L bytes              UTF-8 JSON {"rows":R,"cols":C,"labels":[...]}
//! offset 9+L R*C f32 little-endian row-major payload
//! ```

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"UFPM";
pub const VERSION: u8 = 0x01;

#[derive(Debug, Error)]
pub enum TensorIoError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload holds {actual} bytes but header declares {rows}x{cols} f32 values ({expected} bytes)")]
    SizeMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value {value} at row {row}, col {col}")]
    NonFiniteValue { row: usize, col: usize, value: f32 },
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("line {line}: cannot parse {field:?} as a token id")]
    ParseError { line: usize, field: String },
    #[error("line {line}: token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange {
        line: usize,
        id: u64,
        vocab_size: usize,
    },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path, source: io::Error) -> TensorIoError {
    TensorIoError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

/// Index of a vocabulary row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(v: u32) -> Self {
        TokenId(v)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Dense row-major f32 matrix with one row per vocabulary token.
#[derive(Debug, Clone, PartialEq)]
pub struct UnembeddingMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    labels: Option<Vec<String>>,
}

impl UnembeddingMatrix {
    /// Builds a matrix, checking shape and finiteness.
    ///
    /// The container accepts a single row (the detector sidecar is 1 x rows);
    /// the detector itself insists on at least two.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, TensorIoError> {
        if rows == 0 || cols == 0 {
            return Err(TensorIoError::InvalidMatrix(format!(
                "shape {rows}x{cols} has no elements"
            )));
        }
        if data.len() != rows * cols {
            return Err(TensorIoError::SizeMismatch {
                rows,
                cols,
                expected: rows * cols * 4,
                actual: data.len() * 4,
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorIoError::NonFiniteValue {
                row: pos / cols,
                col: pos % cols,
                value: data[pos],
            });
        }
        Ok(Self {
            rows,
            cols,
            data,
            labels: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, TensorIoError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorIoError::InvalidMatrix("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self, TensorIoError> {
        if labels.len() != self.rows {
            return Err(TensorIoError::InvalidMatrix(format!(
                "{} labels for {} rows",
                labels.len(),
                self.rows
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Returns `Some` when `index` addresses a row of this matrix.
    pub fn token(&self, index: usize) -> Option<TokenId> {
        (index < self.rows).then_some(TokenId(index as u32))
    }

    /// Widens every value to f64, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    /// Raw payload bytes exactly as written to disk.
    pub fn payload_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    rows: usize,
    cols: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

/// Serializes a matrix into UFPM bytes.
pub fn encode_matrix(m: &UnembeddingMatrix) -> Vec<u8> {
    let header = serde_json::to_vec(&Header {
        rows: m.rows,
        cols: m.cols,
        labels: m.labels.clone(),
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(9 + header.len() + m.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&m.payload_bytes());
    out
}

/// Parses UFPM bytes.
pub fn decode_matrix(bytes: &[u8]) -> Result<UnembeddingMatrix, TensorIoError> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(TensorIoError::MalformedHeader("missing UFPM magic".into()));
    }
    if bytes[4] != VERSION {
        return Err(TensorIoError::MalformedHeader(format!(
            "unsupported version {:#04x}",
            bytes[4]
        )));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let header_end = 9usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| TensorIoError::MalformedHeader("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[9..header_end])
        .map_err(|e| TensorIoError::MalformedHeader(e.to_string()))?;
    if header.rows == 0 || header.cols == 0 {
        return Err(TensorIoError::MalformedHeader(format!(
            "shape {}x{} has no elements",
            header.rows, header.cols
        )));
    }
    let payload = &bytes[header_end..];
    let expected = header
        .rows
        .checked_mul(header.cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| TensorIoError::MalformedHeader("shape overflows".into()))?;
    if payload.len() != expected {
        return Err(TensorIoError::SizeMismatch {
            rows: header.rows,
            cols: header.cols,
            expected,
            actual: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = UnembeddingMatrix::new(header.rows, header.cols, data)?;
    match header.labels {
        Some(labels) => m
            .with_labels(labels)
            .map_err(|e| TensorIoError::MalformedHeader(e.to_string())),
        None => Ok(m),
    }
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<UnembeddingMatrix, TensorIoError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode_matrix(&bytes)
}

pub fn save_matrix(m: &UnembeddingMatrix, path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    fs::write(path, encode_matrix(m)).map_err(|e| io_err(path, e))
}

/// Parses corpus text: one sequence per line, whitespace-separated decimal
/// ids. Blank lines and `#` comments are skipped.
pub fn parse_corpus(text: &str, vocab_size: usize) -> Result<Vec<Vec<TokenId>>, TensorIoError> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let seq = trimmed
            .split_whitespace()
            .map(|field| {
                let id: u64 = field.parse().map_err(|_| TensorIoError::ParseError {
                    line: line_num,
                    field: field.to_string(),
                })?;
                if id >= vocab_size as u64 {
                    return Err(TensorIoError::TokenOutOfRange {
                        line: line_num,
                        id,
                        vocab_size,
                    });
                }
                Ok(TokenId(id as u32))
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push(seq);
    }
    Ok(out)
}

pub fn load_corpus(
    path: impl AsRef<Path>,
    vocab_size: usize,
) -> Result<Vec<Vec<TokenId>>, TensorIoError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_corpus(&text, vocab_size)
}

pub fn save_corpus(corpus: &[Vec<TokenId>], path: impl AsRef<Path>) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    let mut file = io::BufWriter::new(fs::File::create(path).map_err(|e| io_err(path, e))?);
    for seq in corpus {
        let line = seq
            .iter()
            .map(|t| t.0.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(file, "{line}").map_err(|e| io_err(path, e))?;
    }
    file.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn identity_round_trip() {
        let dir = tmp();
        let path = dir.path().join("eye.ufpm");
        let eye = UnembeddingMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        save_matrix(&eye, &path).unwrap();
        assert_eq!(load_matrix(&path).unwrap(), eye);
    }

    #[test]
    fn scalar_round_trip() {
        let dir = tmp();
        let path = dir.path().join("one.ufpm");
        let m = UnembeddingMatrix::new(1, 1, vec![42.0]).unwrap();
        save_matrix(&m, &path).unwrap();
        assert_eq!(load_matrix(&path).unwrap().data(), &[42.0]);
    }

    #[test]
    fn short_payload_is_size_mismatch() {
        let mut bytes = encode_matrix(&UnembeddingMatrix::new(3, 4, vec![0.5; 12]).unwrap());
        bytes.truncate(bytes.len() - 8); // 10 floats left
        assert!(matches!(
            decode_matrix(&bytes),
            Err(TensorIoError::SizeMismatch {
                rows: 3,
                cols: 4,
                expected: 48,
                actual: 40
            })
        ));
    }

    #[test]
    fn trailing_bytes_are_size_mismatch() {
        let mut bytes = encode_matrix(&UnembeddingMatrix::new(2, 2, vec![0.5; 4]).unwrap());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(
            decode_matrix(&bytes),
            Err(TensorIoError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn bad_magic_and_version() {
        let good = encode_matrix(&UnembeddingMatrix::new(2, 1, vec![1.0, 2.0]).unwrap());
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_matrix(&bad_magic),
            Err(TensorIoError::MalformedHeader(_))
        ));
        let mut bad_version = good;
        bad_version[4] = 2;
        assert!(matches!(
            decode_matrix(&bad_version),
            Err(TensorIoError::MalformedHeader(_))
        ));
        assert!(matches!(
            decode_matrix(b"UF"),
            Err(TensorIoError::MalformedHeader(_))
        ));
    }

    #[test]
    fn nan_payload_rejected() {
        let mut bytes = encode_matrix(&UnembeddingMatrix::new(2, 2, vec![1.0; 4]).unwrap());
        let n = bytes.len();
        bytes[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(
            decode_matrix(&bytes),
            Err(TensorIoError::NonFiniteValue { row: 1, col: 1, .. })
        ));
    }

    #[test]
    fn labels_survive() {
        let m = UnembeddingMatrix::new(2, 1, vec![1.0, 2.0])
            .unwrap()
            .with_labels(vec!["<a>".into(), "b".into()])
            .unwrap();
        assert_eq!(decode_matrix(&encode_matrix(&m)).unwrap(), m);
    }

    #[test]
    fn random_100x8_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..800).map(|_| rng.random_range(-5.0f32..5.0)).collect();
        let m = UnembeddingMatrix::new(100, 8, data).unwrap();
        let dir = tmp();
        let path = dir.path().join("r.ufpm");
        save_matrix(&m, &path).unwrap();
        let back = load_matrix(&path).unwrap();
        assert_eq!(back.payload_bytes(), m.payload_bytes());
        // The file tail is exactly the payload.
        let raw = fs::read(&path).unwrap();
        assert_eq!(&raw[raw.len() - 3200..], m.payload_bytes().as_slice());
    }

    #[test]
    fn large_512x64_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f32> = (0..512 * 64)
            .map(|_| rng.random::<f32>() * 1e-3 - 5e-4)
            .collect();
        let m = UnembeddingMatrix::new(512, 64, data).unwrap();
        let back = decode_matrix(&encode_matrix(&m)).unwrap();
        assert!(back
            .data()
            .iter()
            .zip(m.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn unwritable_path_is_io_failure() {
        let m = UnembeddingMatrix::new(1, 1, vec![42.0]).unwrap();
        let err = save_matrix(&m, "/nonexistent-dir/for/sure/m.ufpm").unwrap_err();
        assert!(matches!(err, TensorIoError::IoFailure { .. }));
    }

    #[test]
    fn corpus_parsing() {
        assert_eq!(
            parse_corpus("3 1 4\n", 10).unwrap(),
            vec![vec![TokenId(3), TokenId(1), TokenId(4)]]
        );
        assert!(matches!(
            parse_corpus("3 99\n", 10),
            Err(TensorIoError::TokenOutOfRange {
                line: 1,
                id: 99,
                ..
            })
        ));
        assert!(matches!(
            parse_corpus("# header\n\n1 x\n", 10),
            Err(TensorIoError::ParseError { line: 3, .. })
        ));
        assert!(parse_corpus("# only a comment\n\n", 10).unwrap().is_empty());
    }

    #[test]
    fn thousand_line_corpus_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let corpus: Vec<Vec<TokenId>> = (0..1000)
            .map(|_| {
                let len = rng.random_range(1..40);
                (0..len)
                    .map(|_| TokenId(rng.random_range(0..300)))
                    .collect()
            })
            .collect();
        let dir = tmp();
        let path = dir.path().join("c.txt");
        save_corpus(&corpus, &path).unwrap();
        let back = load_corpus(&path, 300).unwrap();
        assert_eq!(back.len(), 1000);
        assert!(back.iter().zip(&corpus).all(|(a, b)| a.len() == b.len()));
        assert_eq!(back, corpus);
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            rows in 1usize..12,
            cols in 1usize..12,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..rows * cols)
                .map(|_| f32::from_bits(rng.random::<u32>()))
                .map(|v| if v.is_finite() { v } else { 0.0 })
                .collect();
            let m = UnembeddingMatrix::new(rows, cols, data).unwrap();
            let back = decode_matrix(&encode_matrix(&m)).unwrap();
            prop_assert_eq!(back.payload_bytes(), m.payload_bytes());
        }

        #[test]
        fn element_count_follows_payload(extra in 0usize..16) {
            // Header says 2x2; any payload other than 16 bytes is rejected.
            let mut bytes = encode_matrix(&UnembeddingMatrix::new(2, 2, vec![1.0; 4]).unwrap());
            bytes.truncate(bytes.len() - 16);
            bytes.extend(std::iter::repeat_n(0u8, extra));
            let rejected = matches!(decode_matrix(&bytes), Err(TensorIoError::SizeMismatch { .. }));
            prop_assert!(rejected);
        }
    }
}
