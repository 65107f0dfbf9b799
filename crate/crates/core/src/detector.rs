//! Under-trained token detection from an unembedding matrix.
//!
//! The pipeline removes the dominant (uncentered) principal direction from
//! every row, averages the rows of the known-unused tokens into a reference
//! vector, and ranks all tokens by cosine distance to that reference. Tokens
//! at or below the nearest-rank `percentile` quantile are flagged.
//!
//! All arithmetic is f64 and serial so reports are bit-reproducible.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensorio::{self, TensorIoError, TokenId, UnembeddingMatrix};

pub const DEFAULT_PERCENTILE: f64 = 0.02;
pub const POWER_TOLERANCE: f64 = 1e-10;
pub const POWER_MAX_ITERS: usize = 10_000;
/// Distances within this absolute amount of τ count as ties with τ.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Rows whose norm after projection falls below this fraction of their
/// original norm are snapped to exactly zero.
const ZERO_RESIDUAL_RATIO: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("matrix is identically zero")]
    ZeroMatrix,
    #[error(
        "power iteration did not converge in {iterations} iterations (last step {last_step:e})"
    )]
    NoConvergence { iterations: usize, last_step: f64 },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("the unused-token set is empty")]
    EmptyUnusedSet,
    #[error("unused token {id} out of range for {rows} rows")]
    UnusedOutOfRange { id: TokenId, rows: usize },
    #[error("reference vector has zero norm")]
    ZeroReferenceVector,
    #[error("percentile {0} must lie strictly between 0 and 1")]
    InvalidPercentile(f64),
    #[error("detection needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("report file: {0}")]
    Io(#[from] TensorIoError),
    #[error("report json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report is inconsistent: {0}")]
    Inconsistent(String),
}

/// A row-major f64 matrix, the 64-bit working copy of `U` and `U'`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl ProjectedMatrix {
    pub fn from_unembedding(u: &UnembeddingMatrix) -> Self {
        Self {
            rows: u.rows(),
            cols: u.cols(),
            data: u.to_f64(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `UᵀU`, accumulated row by row in index order.
fn gram(u: &ProjectedMatrix) -> Vec<f64> {
    let c = u.cols;
    let mut g = vec![0.0; c * c];
    for i in 0..u.rows {
        let row = u.row(i);
        for a in 0..c {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            let g_row = &mut g[a * c..(a + 1) * c];
            for (gv, &rb) in g_row.iter_mut().zip(row) {
                *gv += ra * rb;
            }
        }
    }
    g
}

fn sym_matvec(g: &[f64], v: &[f64]) -> Vec<f64> {
    g.chunks_exact(v.len()).map(|row| dot(row, v)).collect()
}

/// Flips `v` so that its largest-magnitude coordinate is positive (first
/// such coordinate on ties).
fn canonical_sign(v: &mut [f64]) {
    let mut best = 0usize;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Dominant right singular vector of `U` (no mean-centering) by power
/// iteration on `UᵀU`.
///
/// Starts from the normalized all-ones vector. If that start lies in the
/// null space of `UᵀU`, the standard basis vectors are tried in order.
pub fn first_principal_component(u: &UnembeddingMatrix) -> Result<Vec<f64>, DetectError> {
    principal_component_f64(&ProjectedMatrix::from_unembedding(u))
}

pub(crate) fn principal_component_f64(u: &ProjectedMatrix) -> Result<Vec<f64>, DetectError> {
    if u.data.iter().all(|&x| x == 0.0) {
        return Err(DetectError::ZeroMatrix);
    }
    let c = u.cols;
    let g = gram(u);

    let ones = vec![1.0 / (c as f64).sqrt(); c];
    let basis = (0..c).map(|i| {
        let mut e = vec![0.0; c];
        e[i] = 1.0;
        e
    });
    let mut v = std::iter::once(ones)
        .chain(basis)
        .find(|start| norm(&sym_matvec(&g, start)) > 0.0)
        .ok_or(DetectError::ZeroMatrix)?;

    let mut last_step = f64::INFINITY;
    for _ in 0..POWER_MAX_ITERS {
        let mut w = sym_matvec(&g, &v);
        let n = norm(&w);
        w.iter_mut().for_each(|x| *x /= n);
        last_step = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        v = w;
        if last_step < POWER_TOLERANCE {
            canonical_sign(&mut v);
            return Ok(v);
        }
    }
    Err(DetectError::NoConvergence {
        iterations: POWER_MAX_ITERS,
        last_step,
    })
}

/// Removes the projection on `c1` from every row: `U'ᵢ = Uᵢ − (Uᵢ·c1) c1`.
pub fn remove_component(u: &UnembeddingMatrix, c1: &[f64]) -> Result<ProjectedMatrix, DetectError> {
    remove_component_f64(&ProjectedMatrix::from_unembedding(u), c1)
}

pub(crate) fn remove_component_f64(
    u: &ProjectedMatrix,
    c1: &[f64],
) -> Result<ProjectedMatrix, DetectError> {
    if c1.len() != u.cols {
        return Err(DetectError::DimensionMismatch {
            expected: u.cols,
            actual: c1.len(),
        });
    }
    let mut data = Vec::with_capacity(u.data.len());
    for i in 0..u.rows {
        let row = u.row(i);
        let coef = dot(row, c1);
        let start = data.len();
        data.extend(row.iter().zip(c1).map(|(x, c)| x - coef * c));
        // Second pass removes the rounding left in nearly parallel rows.
        let out = &mut data[start..];
        let again = dot(out, c1);
        out.iter_mut().zip(c1).for_each(|(x, c)| *x -= again * c);
        let residual = norm(out);
        if residual <= ZERO_RESIDUAL_RATIO * norm(row) {
            out.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok(ProjectedMatrix {
        rows: u.rows,
        cols: u.cols,
        data,
    })
}

/// Arithmetic mean of the selected rows, summed in ascending id order.
pub fn mean_reference_vector(
    u_prime: &ProjectedMatrix,
    unused: &BTreeSet<TokenId>,
) -> Result<Vec<f64>, DetectError> {
    if unused.is_empty() {
        return Err(DetectError::EmptyUnusedSet);
    }
    let mut acc = vec![0.0; u_prime.cols];
    for &id in unused {
        if id.index() >= u_prime.rows {
            return Err(DetectError::UnusedOutOfRange {
                id,
                rows: u_prime.rows,
            });
        }
        for (a, x) in acc.iter_mut().zip(u_prime.row(id.index())) {
            *a += x;
        }
    }
    let n = unused.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// `1 − cos(row, reference)` per row, clamped to `[0, 2]`. Zero rows get 0.
pub fn cosine_distances(
    u_prime: &ProjectedMatrix,
    reference: &[f64],
) -> Result<Vec<f64>, DetectError> {
    if reference.len() != u_prime.cols {
        return Err(DetectError::DimensionMismatch {
            expected: u_prime.cols,
            actual: reference.len(),
        });
    }
    let ref_norm = norm(reference);
    if ref_norm == 0.0 {
        return Err(DetectError::ZeroReferenceVector);
    }
    Ok((0..u_prime.rows)
        .map(|i| {
            let row = u_prime.row(i);
            let row_norm = norm(row);
            if row_norm == 0.0 {
                0.0
            } else {
                (1.0 - dot(row, reference) / (row_norm * ref_norm)).clamp(0.0, 2.0)
            }
        })
        .collect())
}

/// Nearest-rank position `k = ⌈p·n⌉`, clamped to `[1, n]`.
///
/// A relative slack of 1e-9 absorbs representation error such as
/// `0.04 * 500 = 20.000000000000004`.
pub fn nearest_rank(percentile: f64, n: usize) -> usize {
    let raw = percentile * n as f64;
    let k = (raw - raw.abs() * 1e-9).ceil() as usize;
    k.clamp(1, n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionReport {
    pub principal_component: Vec<f64>,
    pub reference_vector: Vec<f64>,
    pub distances: Vec<f64>,
    pub tau: f64,
    /// Ordered ascending by `(distance, id)`.
    pub flagged: Vec<TokenId>,
    pub unused_ids: Vec<TokenId>,
    pub percentile: f64,
}

pub fn detect(
    u: &UnembeddingMatrix,
    unused: &BTreeSet<TokenId>,
    percentile: f64,
) -> Result<DetectionReport, DetectError> {
    if !(percentile > 0.0 && percentile < 1.0) {
        return Err(DetectError::InvalidPercentile(percentile));
    }
    if u.rows() < 2 {
        return Err(DetectError::TooFewRows(u.rows()));
    }
    if unused.is_empty() {
        return Err(DetectError::EmptyUnusedSet);
    }
    if let Some(&id) = unused.iter().find(|id| id.index() >= u.rows()) {
        return Err(DetectError::UnusedOutOfRange { id, rows: u.rows() });
    }
    let base = ProjectedMatrix::from_unembedding(u);
    let c1 = principal_component_f64(&base)?;
    let u_prime = remove_component_f64(&base, &c1)?;
    let reference = mean_reference_vector(&u_prime, unused)?;
    let distances = if norm(&reference) == 0.0 {
        // The unused rows are pure constant component: every other row that
        // also vanished matches them exactly, anything else is unrelated.
        (0..u_prime.rows)
            .map(|i| {
                if norm(u_prime.row(i)) == 0.0 {
                    0.0
                } else {
                    1.0
                }
            })
            .collect()
    } else {
        cosine_distances(&u_prime, &reference)?
    };
    let (tau, flagged) = threshold(&distances, percentile);
    Ok(DetectionReport {
        principal_component: c1,
        reference_vector: reference,
        distances,
        tau,
        flagged,
        unused_ids: unused.iter().copied().collect(),
        percentile,
    })
}

/// τ is the k-th smallest distance; every token at or below τ (up to
/// [`TIE_TOLERANCE`]) is flagged.
pub fn threshold(distances: &[f64], percentile: f64) -> (f64, Vec<TokenId>) {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let k = nearest_rank(percentile, distances.len());
    let tau = distances[order[k - 1]];
    let flagged = order
        .into_iter()
        .take_while(|&i| distances[i] <= tau + TIE_TOLERANCE)
        .map(|i| TokenId(i as u32))
        .collect();
    (tau, flagged)
}

#[derive(Serialize, Deserialize)]
struct ReportDocument {
    percentile: f64,
    tau: f64,
    flagged: Vec<TokenId>,
    unused: Vec<TokenId>,
    distances_path: String,
    rows: usize,
    principal_component: Vec<f64>,
    reference_vector: Vec<f64>,
}

impl DetectionReport {
    pub fn rows(&self) -> usize {
        self.distances.len()
    }

    pub fn is_flagged(&self, id: TokenId) -> bool {
        self.flagged.contains(&id)
    }

    fn distances_matrix(&self) -> UnembeddingMatrix {
        let data = self.distances.iter().map(|&d| d as f32).collect();
        UnembeddingMatrix::new(1, self.distances.len(), data).expect("distances are finite")
    }

    /// SHA-256 over the persisted content (JSON fields plus the f32 sidecar
    /// payload), so a saved and reloaded report hashes identically.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"tokenprint-detection-report-v1\0");
        h.update(self.percentile.to_bits().to_le_bytes());
        h.update(self.tau.to_bits().to_le_bytes());
        for list in [&self.flagged, &self.unused_ids] {
            h.update((list.len() as u64).to_le_bytes());
            for id in list {
                h.update(id.0.to_le_bytes());
            }
        }
        for v in [&self.principal_component, &self.reference_vector] {
            h.update((v.len() as u64).to_le_bytes());
            for x in v {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        h.update(self.distances_matrix().payload_bytes());
        hex::encode(h.finalize())
    }

    /// Writes `<path>` (JSON) and its distance sidecar next to it.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<PathBuf, DetectError> {
        let path = path.as_ref();
        let sidecar = sidecar_path(path);
        let doc = ReportDocument {
            percentile: self.percentile,
            tau: self.tau,
            flagged: self.flagged.clone(),
            unused: self.unused_ids.clone(),
            distances_path: sidecar
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            rows: self.rows(),
            principal_component: self.principal_component.clone(),
            reference_vector: self.reference_vector.clone(),
        };
        tensorio::save_matrix(&self.distances_matrix(), &sidecar)?;
        let json = serde_json::to_string_pretty(&doc)?;
        fs::write(path, json).map_err(|source| TensorIoError::IoFailure {
            path: path.display().to_string(),
            source,
        })?;
        Ok(sidecar)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| TensorIoError::IoFailure {
            path: path.display().to_string(),
            source,
        })?;
        let doc: ReportDocument = serde_json::from_str(&text)?;
        let sidecar = path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&doc.distances_path);
        let dist = tensorio::load_matrix(sidecar)?;
        if dist.rows() != 1 || dist.cols() != doc.rows {
            return Err(DetectError::Inconsistent(format!(
                "sidecar is {}x{}, expected 1x{}",
                dist.rows(),
                dist.cols(),
                doc.rows
            )));
        }
        if let Some(id) = doc
            .flagged
            .iter()
            .chain(&doc.unused)
            .find(|id| id.index() >= doc.rows)
        {
            return Err(DetectError::Inconsistent(format!(
                "token {id} out of range"
            )));
        }
        Ok(Self {
            principal_component: doc.principal_component,
            reference_vector: doc.reference_vector,
            distances: dist.to_f64(),
            tau: doc.tau,
            flagged: doc.flagged,
            unused_ids: doc.unused,
            percentile: doc.percentile,
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "report".into());
    path.with_file_name(format!("{stem}.distances.ufpm"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn matrix(rows: usize, cols: usize, data: Vec<f32>) -> UnembeddingMatrix {
        UnembeddingMatrix::new(rows, cols, data).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> UnembeddingMatrix {
        let data = (0..rows * cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        matrix(rows, cols, data)
    }

    fn ids(v: impl IntoIterator<Item = u32>) -> BTreeSet<TokenId> {
        v.into_iter().map(TokenId).collect()
    }

    /// Dominant eigenvector of UᵀU from a dense symmetric eigensolver.
    fn oracle_c1(u: &UnembeddingMatrix) -> Vec<f64> {
        let a = nalgebra::DMatrix::from_row_slice(u.rows(), u.cols(), &u.to_f64());
        let eig = nalgebra::SymmetricEigen::new(a.transpose() * &a);
        let (best, _) = eig
            .eigenvalues
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.total_cmp(y.1))
            .unwrap();
        eig.eigenvectors.column(best).iter().copied().collect()
    }

    fn assert_close_up_to_sign(a: &[f64], b: &[f64], tol: f64) {
        let plus = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let minus = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x + y).abs())
            .fold(0.0, f64::max);
        assert!(plus.min(minus) <= tol, "plus {plus:e} minus {minus:e}");
    }

    #[test]
    fn rank_one_rows() {
        let u = matrix(3, 2, vec![0.6, 0.8, -1.2, -1.6, 3.0, 4.0]);
        let c1 = first_principal_component(&u).unwrap();
        // f32 storage of 0.6 / 0.8 is off by ~2e-8.
        assert!(
            (c1[0] - 0.6).abs() < 1e-7 && (c1[1] - 0.8).abs() < 1e-7,
            "{c1:?}"
        );
    }

    #[test]
    fn identity_gives_deterministic_unit_vector() {
        let u = matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let c1 = first_principal_component(&u).unwrap();
        assert!((norm(&c1) - 1.0).abs() < 1e-12);
        assert_eq!(c1, first_principal_component(&u).unwrap());
        let h = 1.0 / 2f64.sqrt();
        assert!((c1[0] - h).abs() < 1e-12 && (c1[1] - h).abs() < 1e-12);
    }

    #[test]
    fn ones_orthogonal_start_falls_back() {
        // Row space is spanned by (1, -1), orthogonal to the all-ones start.
        let u = matrix(2, 2, vec![1.0, -1.0, -2.0, 2.0]);
        let c1 = first_principal_component(&u).unwrap();
        assert_close_up_to_sign(&c1, &[0.5f64.sqrt(), -(0.5f64.sqrt())], 1e-9);
    }

    #[test]
    fn zero_matrix_rejected() {
        let u = matrix(2, 3, vec![0.0; 6]);
        assert!(matches!(
            first_principal_component(&u),
            Err(DetectError::ZeroMatrix)
        ));
    }

    #[test]
    fn random_50x6_matches_dense_eigensolver() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..10 {
            let u = random_matrix(&mut rng, 50, 6);
            let c1 = first_principal_component(&u).unwrap();
            assert_close_up_to_sign(&c1, &oracle_c1(&u), 1e-6);
        }
    }

    #[test]
    fn sign_convention() {
        let u = matrix(2, 2, vec![-3.0, -1.0, -3.1, -0.9]);
        let c1 = first_principal_component(&u).unwrap();
        assert!(c1[0] > 0.0);
    }

    #[test]
    fn orthogonal_row_unchanged_and_parallel_row_zeroed() {
        let c1 = [0.6, 0.8];
        let u = ProjectedMatrix {
            rows: 2,
            cols: 2,
            data: vec![-0.8, 0.6, 3.0 * 0.6, 3.0 * 0.8],
        };
        let p = remove_component_f64(&u, &c1).unwrap();
        let row0 = p.row(0);
        assert!((row0[0] + 0.8).abs() < 1e-15 && (row0[1] - 0.6).abs() < 1e-15);
        assert_eq!(p.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn remove_component_dimension_checked() {
        let u = matrix(2, 2, vec![1.0; 4]);
        assert!(matches!(
            remove_component(&u, &[1.0, 0.0, 0.0]),
            Err(DetectError::DimensionMismatch {
                expected: 2,
                actual: 3
            })
        ));
    }

    #[test]
    fn projection_is_orthogonal_on_random_20x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let u = random_matrix(&mut rng, 20, 5);
        let c1 = first_principal_component(&u).unwrap();
        let p = remove_component(&u, &c1).unwrap();
        for i in 0..p.rows {
            let r = p.row(i);
            assert!(dot(r, &c1).abs() <= 1e-8 * norm(r));
        }
    }

    #[test]
    fn mean_vector_cases() {
        let p = ProjectedMatrix {
            rows: 3,
            cols: 2,
            data: vec![1.5, -2.0, -1.5, 2.0, 7.0, 7.0],
        };
        assert_eq!(
            mean_reference_vector(&p, &ids([2])).unwrap(),
            vec![7.0, 7.0]
        );
        assert_eq!(
            mean_reference_vector(&p, &ids([0, 1])).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(matches!(
            mean_reference_vector(&p, &BTreeSet::new()),
            Err(DetectError::EmptyUnusedSet)
        ));
    }

    #[test]
    fn mean_vector_matches_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let u = random_matrix(&mut rng, 30, 7);
        let p = ProjectedMatrix::from_unembedding(&u);
        let chosen = ids([1, 4, 9, 16, 25]);
        let mean = mean_reference_vector(&p, &chosen).unwrap();
        for (c, m) in mean.iter().enumerate() {
            let oracle: f64 = chosen
                .iter()
                .map(|id| f64::from(u.data()[id.index() * 7 + c]))
                .sum::<f64>()
                / 5.0;
            assert!((m - oracle).abs() <= 1e-12);
        }
    }

    #[test]
    fn cosine_distance_cases() {
        let p = ProjectedMatrix {
            rows: 4,
            cols: 2,
            data: vec![2.0, 0.0, -1.0, 0.0, 0.0, 5.0, 0.0, 0.0],
        };
        let d = cosine_distances(&p, &[1.0, 0.0]).unwrap();
        assert_eq!(d, vec![0.0, 2.0, 1.0, 0.0]);
        assert!(matches!(
            cosine_distances(&p, &[0.0, 0.0]),
            Err(DetectError::ZeroReferenceVector)
        ));
    }

    #[test]
    fn nearest_rank_rule() {
        assert_eq!(nearest_rank(0.02, 512), 11);
        assert_eq!(nearest_rank(0.04, 500), 20);
        assert_eq!(nearest_rank(0.5, 2), 1);
        assert_eq!(nearest_rank(1e-9, 10), 1);
        assert_eq!(nearest_rank(0.999, 10), 10);
    }

    #[test]
    fn default_percentile_is_two_percent() {
        assert_eq!(DEFAULT_PERCENTILE, 0.02);
    }

    #[test]
    fn identical_rows_flag_everything() {
        let u = matrix(6, 3, [1.0f32, 2.0, 3.0].repeat(6));
        let r = detect(&u, &ids([0]), 0.02).unwrap();
        assert!(r.distances.iter().all(|&d| d == r.distances[0]));
        assert_eq!(r.flagged.len(), 6);
        assert_eq!(r.flagged, (0..6).map(TokenId).collect::<Vec<_>>());
    }

    #[test]
    fn two_column_rows_tie_exactly_under_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = random_matrix(&mut rng, 300, 2);
        let tripled = matrix(300, 2, u.data().iter().map(|x| 3.0 * x).collect());
        for p in [0.02, 0.1, 0.5] {
            let a = detect(&u, &ids([4, 9]), p).unwrap();
            let b = detect(&tripled, &ids([4, 9]), p).unwrap();
            let sa: BTreeSet<_> = a.flagged.iter().collect();
            let sb: BTreeSet<_> = b.flagged.iter().collect();
            assert_eq!(sa, sb);
            assert!(a.flagged.len() > 1);
        }
    }

    #[test]
    fn detect_rejects_bad_inputs() {
        let u = matrix(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.5]);
        assert!(matches!(
            detect(&u, &ids([0]), 0.0),
            Err(DetectError::InvalidPercentile(_))
        ));
        assert!(matches!(
            detect(&u, &ids([0]), 1.0),
            Err(DetectError::InvalidPercentile(_))
        ));
        assert!(matches!(
            detect(&u, &ids([]), 0.5),
            Err(DetectError::EmptyUnusedSet)
        ));
        assert!(matches!(
            detect(&u, &ids([4]), 0.5),
            Err(DetectError::UnusedOutOfRange { .. })
        ));
        let one = matrix(1, 2, vec![1.0, 2.0]);
        assert!(matches!(
            detect(&one, &ids([0]), 0.5),
            Err(DetectError::TooFewRows(1))
        ));
    }

    /// Rows 190..200 are small perturbations of a hidden direction; the rest
    /// are random around a large shared offset.
    fn planted_matrix() -> UnembeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let cols = 16;
        let offset: Vec<f64> = (0..cols).map(|_| 4.0 + rng.random::<f64>()).collect();
        let hidden: Vec<f64> = (0..cols)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let mut data = Vec::new();
        for r in 0..200 {
            for c in 0..cols {
                let noise: f64 = rng.sample(StandardNormal);
                let v = if r < 190 {
                    offset[c] + noise
                } else {
                    offset[c] + 2.0 * hidden[c] + 0.05 * noise
                };
                data.push(v as f32);
            }
        }
        matrix(200, cols, data)
    }

    #[test]
    fn planted_tokens_are_flagged() {
        let u = planted_matrix();
        let r = detect(&u, &ids(195..200), 0.02).unwrap();
        assert_eq!(r.rows(), 200);
        assert!(r.flagged.len() >= 4);

        // Exhaustive oracle: the 10 planted rows are the 10 closest.
        let c1 = oracle_c1(&u);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                let row: Vec<f64> = u.row(i).iter().map(|&x| f64::from(x)).collect();
                let coef = dot(&row, &c1);
                row.iter().zip(&c1).map(|(x, c)| x - coef * c).collect()
            })
            .collect();
        let mut mean = vec![0.0; 16];
        for row in &rows[195..200] {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x / 5.0;
            }
        }
        let mut dist: Vec<(f64, usize)> = rows
            .iter()
            .enumerate()
            .map(|(i, row)| (1.0 - dot(row, &mean) / (norm(row) * norm(&mean)), i))
            .collect();
        dist.sort_by(|a, b| a.0.total_cmp(&b.0));
        let closest: BTreeSet<usize> = dist[..10].iter().map(|d| d.1).collect();
        assert_eq!(closest, (190..200).collect());

        // At a percentile covering 10 rows the detector agrees.
        let r = detect(&u, &ids(195..200), 0.05).unwrap();
        let flagged: BTreeSet<u32> = r.flagged.iter().map(|t| t.0).collect();
        assert!((190..200).all(|i| flagged.contains(&i)), "{flagged:?}");
    }

    #[test]
    fn flagged_is_ordered_and_thresholded() {
        let u = planted_matrix();
        let r = detect(&u, &ids(195..200), 0.1).unwrap();
        assert!(r.flagged.len() >= nearest_rank(0.1, 200));
        for w in r.flagged.windows(2) {
            let (a, b) = (r.distances[w[0].index()], r.distances[w[1].index()]);
            assert!(a < b || (a == b && w[0] < w[1]));
        }
        let expected: BTreeSet<TokenId> = (0..200)
            .filter(|&i| r.distances[i] <= r.tau)
            .map(|i| TokenId(i as u32))
            .collect();
        assert_eq!(r.flagged.iter().copied().collect::<BTreeSet<_>>(), expected);
        assert!((norm(&r.principal_component) - 1.0).abs() < 1e-9);
        assert!(r.distances.iter().all(|d| (0.0..=2.0).contains(d)));
    }

    #[test]
    fn report_save_load_preserves_digest() {
        let u = planted_matrix();
        let r = detect(&u, &ids(195..200), 0.05).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let sidecar = r.save(&path).unwrap();
        assert!(sidecar.exists());
        let back = DetectionReport::load(&path).unwrap();
        assert_eq!(back.digest(), r.digest());
        assert_eq!(back.flagged, r.flagged);
        assert_eq!(back.tau.to_bits(), r.tau.to_bits());

        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        for key in ["percentile", "tau", "flagged", "unused", "distances_path"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn distinct_reports_have_distinct_digests() {
        let u = planted_matrix();
        let a = detect(&u, &ids(195..200), 0.05).unwrap();
        let b = detect(&u, &ids(195..200), 0.06).unwrap();
        assert_ne!(a.digest(), b.digest());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn scale_invariant_flagged_set(seed in any::<u64>(), alpha in 0.1f32..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_matrix(&mut rng, 40, 5);
            let scaled = matrix(40, 5, u.data().iter().map(|x| x * alpha).collect());
            let a = detect(&u, &ids([0, 1, 2]), 0.1).unwrap();
            let b = detect(&scaled, &ids([0, 1, 2]), 0.1).unwrap();
            let sa: BTreeSet<_> = a.flagged.iter().collect();
            let sb: BTreeSet<_> = b.flagged.iter().collect();
            prop_assert_eq!(sa, sb);
        }

        #[test]
        fn percentile_monotone(seed in any::<u64>(), p in 0.01f64..0.5, dp in 0.0f64..0.4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_matrix(&mut rng, 60, 4);
            let lo = detect(&u, &ids([3, 7]), p).unwrap();
            let hi = detect(&u, &ids([3, 7]), p + dp).unwrap();
            let big: BTreeSet<_> = hi.flagged.iter().collect();
            prop_assert!(lo.flagged.iter().all(|t| big.contains(t)));
        }

        #[test]
        fn orthogonality_after_projection(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_matrix(&mut rng, 25, 6);
            let c1 = first_principal_component(&u).unwrap();
            let p = remove_component(&u, &c1).unwrap();
            for i in 0..p.rows {
                let r = p.row(i);
                let n = norm(r);
                if n > 0.0 {
                    prop_assert!(dot(r, &c1).abs() / n <= 1e-8);
                }
            }
        }

        #[test]
        fn deterministic_reports(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = random_matrix(&mut rng, 30, 4);
            let a = detect(&u, &ids([1]), 0.2).unwrap();
            let b = detect(&u, &ids([1]), 0.2).unwrap();
            prop_assert_eq!(a.digest(), b.digest());
            prop_assert!(a.distances.iter().zip(&b.distances).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}
