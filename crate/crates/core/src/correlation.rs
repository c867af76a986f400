//! Pairwise device similarity and peer-group selection.
//!
//! Two views are combined: cosine similarity between the latest report
//! vectors, and a Mahalanobis distance between device windows. The cosine is
//! scaled by the inverse distance to give the ensemble score `f_c`, and the
//! `k` devices with the highest score form the peer group.

use nalgebra::{DMatrix, DVector};

use crate::error::{ImputeError, Result};
use crate::stream::WindowStore;

/// Absolute lower bound on the covariance ridge, used when every pooled row is identical.
pub const RIDGE_FLOOR: f64 = 1e-12;

/// How the device-level Mahalanobis distance is formed from two windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MdMode {
    /// Distance between the two window mean vectors.
    #[default]
    Mean,
    /// Sum of per-tick distances over timestamps both windows share.
    TickSum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationParams {
    pub k: usize,
    pub epsilon_md: f64,
    /// Relative ridge: `lambda = ridge * mean(diag(S))`, floored at [`RIDGE_FLOOR`].
    pub ridge: f64,
    pub md_mode: MdMode,
    pub cs_clamp: bool,
}

impl Default for CorrelationParams {
    fn default() -> Self {
        Self {
            k: 4,
            epsilon_md: 1e-9,
            ridge: 1e-6,
            md_mode: MdMode::Mean,
            cs_clamp: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationResult {
    pub peer_id: usize,
    pub cs: f64,
    pub md: f64,
    pub f_c: f64,
    pub dims_used: Vec<usize>,
}

/// Top-k peers of a target device, highest `f_c` first.
#[derive(Debug, Clone, PartialEq)]
pub struct PeerGroup {
    pub target_id: usize,
    pub members: Vec<CorrelationResult>,
}

impl PeerGroup {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }
}

/// Cosine of the angle between `a` and `b` restricted to `dims`, clamped to `[0, 1]`.
pub fn cosine_similarity(a: &[f64], b: &[f64], dims: &[usize]) -> Result<f64> {
    cosine_similarity_unclamped(a, b, dims).map(|cs| cs.clamp(0.0, 1.0))
}

/// Cosine similarity without the positive-space clamp; result lies in `[-1, 1]` up to rounding.
///
/// A zero vector against a nonzero one has similarity 0. Two zero vectors are undefined.
pub fn cosine_similarity_unclamped(a: &[f64], b: &[f64], dims: &[usize]) -> Result<f64> {
    if dims.is_empty() {
        return Err(ImputeError::InsufficientOverlap);
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for &d in dims {
        let (x, y) = (a[d], b[d]);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    match (na > 0.0, nb > 0.0) {
        (false, false) => Err(ImputeError::UndefinedSimilarity),
        (true, true) => Ok(dot / (na.sqrt() * nb.sqrt())),
        _ => Ok(0.0),
    }
}

/// `sqrt((x - y)^T cov^-1 (x - y))`, via a Cholesky solve.
pub fn mahalanobis(x: &[f64], y: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    let n = x.len();
    if y.len() != n || cov.nrows() != n || cov.ncols() != n {
        return Err(ImputeError::Schema(format!(
            "mahalanobis: vectors of length {} and {} against a {}x{} covariance",
            n,
            y.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cov
        .clone()
        .cholesky()
        .ok_or(ImputeError::SingularCovariance)?;
    let diff = DVector::from_iterator(n, x.iter().zip(y).map(|(a, b)| a - b));
    if diff.iter().all(|&d| d == 0.0) {
        return Ok(0.0);
    }
    // With cov = L L^T, the quadratic form equals |L^-1 diff|^2.
    let z = chol
        .l_dirty()
        .solve_lower_triangular(&diff)
        .ok_or(ImputeError::SingularCovariance)?;
    let md = z.norm();
    if md.is_finite() {
        Ok(md)
    } else {
        Err(ImputeError::SingularCovariance)
    }
}

/// Rows of a device window that are observed on every dimension in `dims`.
fn usable_rows(store: &WindowStore, device: usize, dims: &[usize]) -> Vec<(i64, Vec<f64>)> {
    store
        .reports(device)
        .filter_map(|r| {
            let row: Option<Vec<f64>> = dims.iter().map(|&d| r.value(d)).collect();
            row.map(|row| (r.timestamp, row))
        })
        .collect()
}

fn pooled_covariance<'a>(
    rows: impl Iterator<Item = &'a [f64]> + Clone,
    dims: usize,
    ridge: f64,
) -> Result<DMatrix<f64>> {
    let count = rows.clone().count();
    if count < 2 {
        return Err(ImputeError::InsufficientHistory(format!(
            "{count} usable row(s) for covariance, need 2"
        )));
    }
    let mut mean = vec![0.0; dims];
    for row in rows.clone() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);

    let mut cov = DMatrix::<f64>::zeros(dims, dims);
    for row in rows {
        for a in 0..dims {
            let da = row[a] - mean[a];
            for b in a..dims {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (count - 1) as f64;
    for a in 0..dims {
        for b in a..dims {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let mean_diag = cov.diagonal().mean();
    let lambda = (ridge * mean_diag).max(RIDGE_FLOOR);
    for a in 0..dims {
        cov[(a, a)] += lambda;
    }
    Ok(cov)
}

/// Sample covariance of the pooled windows of devices `i` and `j` on `dims`, plus a ridge.
pub fn estimate_covariance(
    store: &WindowStore,
    i: usize,
    j: usize,
    dims: &[usize],
    ridge: f64,
) -> Result<DMatrix<f64>> {
    let a = usable_rows(store, i, dims);
    let b = usable_rows(store, j, dims);
    pooled_covariance(
        a.iter().chain(b.iter()).map(|(_, row)| row.as_slice()),
        dims.len(),
        ridge,
    )
}

fn column_means(rows: &[(i64, Vec<f64>)], dims: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dims];
    for (_, row) in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    mean
}

fn md_from_rows(
    target_rows: &[(i64, Vec<f64>)],
    peer_rows: &[(i64, Vec<f64>)],
    dims: usize,
    params: &CorrelationParams,
) -> Result<f64> {
    for (rows, who) in [(target_rows, "target"), (peer_rows, "peer")] {
        if rows.len() < 2 {
            return Err(ImputeError::InsufficientHistory(format!(
                "{who} has {} usable report(s), need 2",
                rows.len()
            )));
        }
    }
    let cov = pooled_covariance(
        target_rows
            .iter()
            .chain(peer_rows)
            .map(|(_, row)| row.as_slice()),
        dims,
        params.ridge,
    )?;
    match params.md_mode {
        MdMode::Mean => mahalanobis(
            &column_means(target_rows, dims),
            &column_means(peer_rows, dims),
            &cov,
        ),
        MdMode::TickSum => {
            let mut total = 0.0;
            let mut matched = 0usize;
            let mut p = 0;
            for (t, row) in target_rows {
                while p < peer_rows.len() && peer_rows[p].0 < *t {
                    p += 1;
                }
                if p < peer_rows.len() && peer_rows[p].0 == *t {
                    total += mahalanobis(row, &peer_rows[p].1, &cov)?;
                    matched += 1;
                }
            }
            if matched == 0 {
                return Err(ImputeError::InsufficientHistory(
                    "no shared timestamps between windows".into(),
                ));
            }
            Ok(total)
        }
    }
}

/// Device-level Mahalanobis distance between the windows of `target` and `peer`.
pub fn device_md(
    store: &WindowStore,
    target: usize,
    peer: usize,
    dims: &[usize],
    params: &CorrelationParams,
) -> Result<f64> {
    if dims.is_empty() {
        return Err(ImputeError::InsufficientOverlap);
    }
    md_from_rows(
        &usable_rows(store, target, dims),
        &usable_rows(store, peer, dims),
        dims.len(),
        params,
    )
}

/// `cs / max(md, epsilon)`.
pub fn ensemble_score(cs: f64, md: f64, epsilon: f64) -> f64 {
    cs / md.max(epsilon)
}

/// Score every other device against `target` and keep the top `k`.
///
/// A peer is skipped when the shared observed dimensions are empty, the cosine is
/// undefined, or either window lacks the history for a distance.
pub fn select_peers(
    store: &WindowStore,
    target: usize,
    missing_dims: &[usize],
    params: &CorrelationParams,
) -> Result<PeerGroup> {
    if params.k == 0 {
        return Err(ImputeError::Config("k must be at least 1".into()));
    }
    let target_latest = store.latest(target)?;
    let base_dims: Vec<usize> = (0..target_latest.dims())
        .filter(|d| !missing_dims.contains(d) && !target_latest.is_missing(*d))
        .collect();

    let mut members = Vec::new();
    for peer in store.device_ids().filter(|&p| p != target) {
        let Ok(peer_latest) = store.latest(peer) else {
            continue;
        };
        let dims_used: Vec<usize> = base_dims
            .iter()
            .copied()
            .filter(|&d| !peer_latest.is_missing(d))
            .collect();
        let a = target_latest.raw_values();
        let b = peer_latest.raw_values();
        let cs = if params.cs_clamp {
            cosine_similarity(a, b, &dims_used)
        } else {
            cosine_similarity_unclamped(a, b, &dims_used)
        };
        let Ok(cs) = cs else { continue };
        let Ok(md) = device_md(store, target, peer, &dims_used, params) else {
            continue;
        };
        members.push(CorrelationResult {
            peer_id: peer,
            cs,
            md,
            f_c: ensemble_score(cs, md, params.epsilon_md),
            dims_used,
        });
    }
    members.sort_by(|x, y| y.f_c.total_cmp(&x.f_c).then(x.peer_id.cmp(&y.peer_id)));
    members.truncate(params.k);
    Ok(PeerGroup {
        target_id: target,
        members,
    })
}
