//! Replacement values for missing cells.
//!
//! The prediction-based model (PBM) blends two views of the missing value:
//! a local autoregressive forecast from the device's own window and a group
//! estimate, the weighted geometric mean of the top-k peers' latest values.
//! A sigmoid of the window deviation decides how much the local view is
//! trusted. Two baselines share the peer selection: DBM (group view only)
//! and AM (arithmetic mean of the peers).

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use nalgebra::{DMatrix, DVector};
use web_time::Instant;

use crate::correlation::{select_peers, CorrelationParams, MdMode, PeerGroup};
use crate::error::{ImputeError, Result};
use crate::stream::{StreamSlice, WindowStore};

/// Relative ridge added to the centered Gram matrix of the lagged system.
const OLS_RIDGE: f64 = 1e-8;
/// Refinement passes that remove the ridge bias inside the range of the Gram matrix.
const OLS_REFINEMENTS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Model {
    Pbm,
    Dbm,
    Am,
}

impl Model {
    pub const ALL: [Model; 3] = [Model::Pbm, Model::Dbm, Model::Am];
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Model::Pbm => "PBM",
            Model::Dbm => "DBM",
            Model::Am => "AM",
        })
    }
}

impl FromStr for Model {
    type Err = ImputeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PBM" => Ok(Model::Pbm),
            "DBM" => Ok(Model::Dbm),
            "AM" => Ok(Model::Am),
            other => Err(ImputeError::Config(format!("unknown model '{other}'"))),
        }
    }
}

/// Whether the window deviation feeds the sigmoid raw or divided by the mean magnitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SigmaMode {
    Absolute,
    #[default]
    Relative,
}

/// Exponents used for the peers in the geometric mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WgmWeighting {
    /// `1 / max(md, epsilon)`: nearer peers weigh more.
    #[default]
    Inverse,
    /// The distances themselves.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlendParams {
    pub alpha: f64,
    pub beta: f64,
    pub k: usize,
    pub epsilon_md: f64,
    pub ridge: f64,
    /// Autoregressive order of the local model.
    pub order: usize,
    pub sigma_mode: SigmaMode,
    pub wgm_weighting: WgmWeighting,
    pub md_mode: MdMode,
    pub cs_clamp: bool,
}

impl Default for BlendParams {
    fn default() -> Self {
        let corr = CorrelationParams::default();
        Self {
            alpha: 20.0,
            beta: 2.0,
            k: corr.k,
            epsilon_md: corr.epsilon_md,
            ridge: corr.ridge,
            order: 3,
            sigma_mode: SigmaMode::default(),
            wgm_weighting: WgmWeighting::default(),
            md_mode: corr.md_mode,
            cs_clamp: corr.cs_clamp,
        }
    }
}

impl BlendParams {
    pub fn correlation(&self) -> CorrelationParams {
        CorrelationParams {
            k: self.k,
            epsilon_md: self.epsilon_md,
            ridge: self.ridge,
            md_mode: self.md_mode,
            cs_clamp: self.cs_clamp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(ImputeError::Config(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !self.beta.is_finite() {
            return Err(ImputeError::Config("beta must be finite".into()));
        }
        if self.k == 0 {
            return Err(ImputeError::Config("k must be at least 1".into()));
        }
        if !(self.epsilon_md > 0.0) {
            return Err(ImputeError::Config("epsilon_md must be > 0".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(ImputeError::Config("ridge must be >= 0".into()));
        }
        if self.order == 0 {
            return Err(ImputeError::Config("order must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalMethod {
    LaggedOls,
    LinearTrend,
    LastValue,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalEstimate {
    pub value: f64,
    /// Sample standard deviation of the slice.
    pub sigma: f64,
    pub method: LocalMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationOutcome {
    pub model: Model,
    pub device: usize,
    pub dimension: usize,
    pub pd: f64,
    pub local: Option<LocalEstimate>,
    pub wgm: Option<f64>,
    pub w_local: f64,
    pub group: PeerGroup,
    pub elapsed: Duration,
}

fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    (ss / (n - 1) as f64).sqrt()
}

/// Least squares on lagged rows `x[t-p..t] -> x[t]` with intercept.
///
/// Solved on centered data through the normal equations with a small relative
/// ridge, followed by refinement steps against the unregularized system.
fn lagged_ols(values: &[f64], order: usize) -> f64 {
    let n = values.len();
    let rows = n - order;
    let mut x_mean = vec![0.0; order];
    let mut y_mean = 0.0;
    for t in order..n {
        for j in 0..order {
            x_mean[j] += values[t - order + j];
        }
        y_mean += values[t];
    }
    x_mean.iter_mut().for_each(|m| *m /= rows as f64);
    y_mean /= rows as f64;

    let mut gram = DMatrix::<f64>::zeros(order, order);
    let mut rhs = DVector::<f64>::zeros(order);
    for t in order..n {
        let yc = values[t] - y_mean;
        for a in 0..order {
            let xa = values[t - order + a] - x_mean[a];
            rhs[a] += xa * yc;
            for b in 0..order {
                gram[(a, b)] += xa * (values[t - order + b] - x_mean[b]);
            }
        }
    }
    let trace = gram.trace();
    let coeffs = if trace > 0.0 {
        let lambda = OLS_RIDGE * trace / order as f64;
        let regularized = &gram + DMatrix::<f64>::identity(order, order) * lambda;
        match regularized.cholesky() {
            Some(chol) => {
                let mut b = chol.solve(&rhs);
                for _ in 0..OLS_REFINEMENTS {
                    let residual = &rhs - &gram * &b;
                    b += chol.solve(&residual);
                }
                b
            }
            None => DVector::zeros(order),
        }
    } else {
        DVector::zeros(order)
    };

    let last = &values[n - order..];
    y_mean
        + (0..order)
            .map(|j| coeffs[j] * (last[j] - x_mean[j]))
            .sum::<f64>()
}

fn linear_trend(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let y_mean = values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (t, &y) in values.iter().enumerate() {
        let dt = t as f64 - t_mean;
        sxy += dt * (y - y_mean);
        sxx += dt * dt;
    }
    y_mean + sxy / sxx * (n - t_mean)
}

/// Forecast the value that follows `slice`.
///
/// Masked gaps are ignored: the observed values are treated as consecutive.
/// Uses lagged OLS of order `order` when at least `order + 2` rows can be
/// formed, a straight-line trend when at least three points exist, and the
/// last value otherwise.
pub fn local_regress(slice: &StreamSlice, order: usize) -> Result<LocalEstimate> {
    let values = &slice.values;
    let n = values.len();
    if n == 0 {
        return Err(ImputeError::NoLocalData);
    }
    let sigma = sample_std(values);
    let (value, method) = if n < 3 {
        (values[n - 1], LocalMethod::LastValue)
    } else if order >= 1 && n > order && n - order >= order + 2 {
        (lagged_ols(values, order), LocalMethod::LaggedOls)
    } else {
        (linear_trend(values), LocalMethod::LinearTrend)
    };
    Ok(LocalEstimate {
        value,
        sigma,
        method,
    })
}

/// `(prod v_i^w_i)^(1 / sum w_i)`, evaluated in the log domain.
pub fn weighted_geometric_mean(values: &[f64], weights: &[f64]) -> Result<f64> {
    if values.is_empty() || values.len() != weights.len() {
        return Err(ImputeError::DegenerateWeights(format!(
            "{} values against {} weights",
            values.len(),
            weights.len()
        )));
    }
    if let Some(&bad) = values.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
        return Err(ImputeError::Domain(bad));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(ImputeError::DegenerateWeights(
            "weights must be finite and non-negative".into(),
        ));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(ImputeError::DegenerateWeights("weights sum to zero".into()));
    }
    if values.iter().all(|&v| v == values[0]) {
        return Ok(values[0]);
    }
    let log_sum: f64 = values.iter().zip(weights).map(|(v, w)| w * v.ln()).sum();
    Ok((log_sum / total).exp())
}

/// Weighted geometric mean of the peers' latest values in `dimension`.
///
/// Peers whose latest report lacks the dimension are dropped. When any value
/// is non-positive the set is shifted by `|min| + 1` before the mean and
/// shifted back after. `None` when no peer has the value.
pub fn group_estimate(
    group: &PeerGroup,
    store: &WindowStore,
    dimension: usize,
    params: &BlendParams,
) -> Option<f64> {
    let mut values = Vec::with_capacity(group.len());
    let mut distances = Vec::with_capacity(group.len());
    for member in &group.members {
        if let Some(v) = store
            .latest(member.peer_id)
            .ok()
            .and_then(|r| r.value(dimension))
        {
            values.push(v);
            distances.push(member.md);
        }
    }
    if values.is_empty() {
        return None;
    }
    let mut weights: Vec<f64> = match params.wgm_weighting {
        WgmWeighting::Inverse => distances
            .iter()
            .map(|md| 1.0 / md.max(params.epsilon_md))
            .collect(),
        WgmWeighting::Literal => distances.clone(),
    };
    if weights.iter().sum::<f64>() <= 0.0 {
        // every literal exponent is zero: plain geometric mean
        weights.iter_mut().for_each(|w| *w = 1.0);
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if min <= 0.0 { min.abs() + 1.0 } else { 0.0 };
    let shifted: Vec<f64> = values.iter().map(|v| v + shift).collect();
    weighted_geometric_mean(&shifted, &weights)
        .ok()
        .map(|g| g - shift)
}

/// Sigmoid weight of the local view: `1 / (1 + exp(alpha * sigma - beta))`.
pub fn local_weight(sigma: f64, params: &BlendParams) -> f64 {
    // alpha * (sigma - beta / alpha) is zero exactly at sigma = beta / alpha
    let exponent = params.alpha * (sigma - params.beta / params.alpha);
    1.0 / (1.0 + exponent.exp())
}

/// Deviation fed to the sigmoid for a given slice under the configured mode.
pub fn effective_sigma(slice: &StreamSlice, sigma: f64, mode: SigmaMode) -> f64 {
    match mode {
        SigmaMode::Absolute => sigma,
        SigmaMode::Relative => {
            let scale =
                slice.values.iter().map(|v| v.abs()).sum::<f64>() / slice.len().max(1) as f64;
            if scale > 0.0 {
                sigma / scale
            } else {
                sigma
            }
        }
    }
}

fn check_missing(store: &WindowStore, target: usize, dimension: usize) -> Result<()> {
    let latest = store.latest(target)?;
    if dimension >= latest.dims() {
        return Err(ImputeError::DimensionOutOfRange {
            dimension,
            dims: latest.dims(),
        });
    }
    if !latest.is_missing(dimension) {
        return Err(ImputeError::NotMissing {
            device: target,
            dimension,
        });
    }
    Ok(())
}

pub fn impute(
    store: &WindowStore,
    target: usize,
    dimension: usize,
    model: Model,
    params: &BlendParams,
) -> Result<ImputationOutcome> {
    match model {
        Model::Pbm => impute_pbm(store, target, dimension, params),
        Model::Dbm => impute_dbm(store, target, dimension, params),
        Model::Am => impute_am(store, target, dimension, params),
    }
}

/// Blend of the local forecast and the peer-group estimate.
///
/// Without peers the local forecast is used alone (`w_local = 1`); without
/// local history the group estimate is used alone (`w_local = 0`).
pub fn impute_pbm(
    store: &WindowStore,
    target: usize,
    dimension: usize,
    params: &BlendParams,
) -> Result<ImputationOutcome> {
    let start = Instant::now();
    check_missing(store, target, dimension)?;
    let group = select_peers(store, target, &[dimension], &params.correlation())?;
    let wgm = group_estimate(&group, store, dimension, params);
    let slice = store.window(target, dimension)?;
    let local = match local_regress(&slice, params.order) {
        Ok(est) => Some(est),
        Err(ImputeError::NoLocalData) => None,
        Err(e) => return Err(e),
    };
    let (pd, w_local) = match (local, wgm) {
        (Some(l), Some(g)) => {
            let w = local_weight(effective_sigma(&slice, l.sigma, params.sigma_mode), params);
            (w * l.value + (1.0 - w) * g, w)
        }
        (Some(l), None) => (l.value, 1.0),
        (None, Some(g)) => (g, 0.0),
        (None, None) => {
            return Err(ImputeError::ImputationImpossible {
                device: target,
                dimension,
                reason: "no local history and no peer value",
            })
        }
    };
    Ok(ImputationOutcome {
        model: Model::Pbm,
        device: target,
        dimension,
        pd,
        local,
        wgm,
        w_local,
        group,
        elapsed: start.elapsed(),
    })
}

/// Group view only: the peers' weighted geometric mean.
pub fn impute_dbm(
    store: &WindowStore,
    target: usize,
    dimension: usize,
    params: &BlendParams,
) -> Result<ImputationOutcome> {
    let start = Instant::now();
    check_missing(store, target, dimension)?;
    let group = select_peers(store, target, &[dimension], &params.correlation())?;
    let wgm = group_estimate(&group, store, dimension, params).ok_or(
        ImputeError::ImputationImpossible {
            device: target,
            dimension,
            reason: "no peer reports the dimension",
        },
    )?;
    Ok(ImputationOutcome {
        model: Model::Dbm,
        device: target,
        dimension,
        pd: wgm,
        local: None,
        wgm: Some(wgm),
        w_local: 0.0,
        group,
        elapsed: start.elapsed(),
    })
}

/// Arithmetic mean of the peers' latest values.
pub fn impute_am(
    store: &WindowStore,
    target: usize,
    dimension: usize,
    params: &BlendParams,
) -> Result<ImputationOutcome> {
    let start = Instant::now();
    check_missing(store, target, dimension)?;
    let group = select_peers(store, target, &[dimension], &params.correlation())?;
    let values: Vec<f64> = group
        .members
        .iter()
        .filter_map(|m| {
            store
                .latest(m.peer_id)
                .ok()
                .and_then(|r| r.value(dimension))
        })
        .collect();
    if values.is_empty() {
        return Err(ImputeError::ImputationImpossible {
            device: target,
            dimension,
            reason: "no peer reports the dimension",
        });
    }
    let pd = values.iter().sum::<f64>() / values.len() as f64;
    Ok(ImputationOutcome {
        model: Model::Am,
        device: target,
        dimension,
        pd,
        local: None,
        wgm: None,
        w_local: 0.0,
        group,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::CorrelationResult;
    use crate::stream::DeviceReport;
    use proptest::prelude::*;

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn constant_slice_is_a_fixed_point() {
        let est = local_regress(&StreamSlice::from_values(vec![4.25; 10]), 3).unwrap();
        assert_eq!(est.value, 4.25);
        assert_eq!(est.sigma, 0.0);
        assert_eq!(est.method, LocalMethod::LaggedOls);
    }

    #[test]
    fn ramp_predicts_next_term() {
        let ramp: Vec<f64> = (1..=10).map(f64::from).collect();
        let est = local_regress(&StreamSlice::from_values(ramp), 3).unwrap();
        assert_eq!(est.method, LocalMethod::LaggedOls);
        assert!((est.value - 11.0).abs() < 1e-9, "{}", est.value);
    }

    #[test]
    fn fallback_tiers() {
        let two = local_regress(&StreamSlice::from_values(vec![3.0, 5.0]), 3).unwrap();
        assert_eq!((two.value, two.method), (5.0, LocalMethod::LastValue));
        let trend = local_regress(&StreamSlice::from_values(vec![1.0, 3.0, 5.0, 7.0]), 3).unwrap();
        assert_eq!(trend.method, LocalMethod::LinearTrend);
        assert!((trend.value - 9.0).abs() < 1e-12);
        assert_eq!(
            local_regress(&StreamSlice::from_values(vec![]), 3).unwrap_err(),
            ImputeError::NoLocalData
        );
    }

    #[test]
    fn wgm_examples() {
        assert!(rel_close(
            weighted_geometric_mean(&[2.0, 8.0], &[1.0, 1.0]).unwrap(),
            4.0,
            1e-15
        ));
        assert_eq!(weighted_geometric_mean(&[7.5], &[0.3]).unwrap(), 7.5);
        let v = weighted_geometric_mean(&[1.0, 2.0, 4.0], &[1.0, 2.0, 1.0]).unwrap();
        assert!(rel_close(v, 2.0, 1e-15));
    }

    #[test]
    fn wgm_errors() {
        assert_eq!(
            weighted_geometric_mean(&[1.0, -2.0], &[1.0, 1.0]).unwrap_err(),
            ImputeError::Domain(-2.0)
        );
        assert!(matches!(
            weighted_geometric_mean(&[1.0, 2.0], &[0.0, 0.0]),
            Err(ImputeError::DegenerateWeights(_))
        ));
        assert!(matches!(
            weighted_geometric_mean(&[1.0], &[1.0, 2.0]),
            Err(ImputeError::DegenerateWeights(_))
        ));
    }

    #[test]
    fn local_weight_examples() {
        let p = BlendParams::default();
        assert_eq!(local_weight(0.1, &p), 0.5);
        assert!((local_weight(0.0, &p) - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((local_weight(0.0, &p) - 0.8807970779778823).abs() < 1e-15);
        assert!(local_weight(10.0, &p) < 1e-80);
    }

    fn group_of(store: &WindowStore, peers: &[(usize, f64)]) -> PeerGroup {
        PeerGroup {
            target_id: 0,
            members: peers
                .iter()
                .map(|&(peer_id, md)| CorrelationResult {
                    peer_id,
                    cs: 1.0,
                    md,
                    f_c: 1.0 / md,
                    dims_used: vec![],
                })
                .filter(|m| store.latest(m.peer_id).is_ok())
                .collect(),
        }
    }

    fn latest_store(values: &[f64]) -> WindowStore {
        let mut store = WindowStore::new(10);
        for (i, &v) in values.iter().enumerate() {
            store.ingest(DeviceReport::new(i + 1, 0, vec![v])).unwrap();
        }
        store
    }

    #[test]
    fn group_estimate_examples() {
        let p = BlendParams::default();
        let one = latest_store(&[6.5]);
        assert_eq!(
            group_estimate(&group_of(&one, &[(1, 2.0)]), &one, 0, &p),
            Some(6.5)
        );

        let two = latest_store(&[2.0, 8.0]);
        let g = group_estimate(&group_of(&two, &[(1, 1.5), (2, 1.5)]), &two, 0, &p).unwrap();
        assert!(rel_close(g, 4.0, 1e-14));

        let weighted = latest_store(&[10.0, 20.0]);
        let g = group_estimate(
            &group_of(&weighted, &[(1, 1.0), (2, 3.0)]),
            &weighted,
            0,
            &p,
        )
        .unwrap();
        let oracle = ((10f64.ln() + 20f64.ln() / 3.0) / (4.0 / 3.0)).exp();
        assert!(rel_close(g, oracle, 1e-14));
        assert!((g - 11.89).abs() < 0.005);

        let literal = BlendParams {
            wgm_weighting: WgmWeighting::Literal,
            ..p
        };
        let g = group_estimate(
            &group_of(&weighted, &[(1, 1.0), (2, 3.0)]),
            &weighted,
            0,
            &literal,
        )
        .unwrap();
        let oracle = ((10f64.ln() + 3.0 * 20f64.ln()) / 4.0).exp();
        assert!(rel_close(g, oracle, 1e-14));
    }

    #[test]
    fn group_estimate_shifts_non_positive_values() {
        let p = BlendParams::default();
        let store = latest_store(&[-3.0, 1.0]);
        let g = group_estimate(&group_of(&store, &[(1, 1.0), (2, 1.0)]), &store, 0, &p).unwrap();
        // shift 4: sqrt(1 * 5) - 4
        assert!(rel_close(g, 5f64.sqrt() - 4.0, 1e-14));
        assert!(g > -3.0 && g < 1.0);
    }

    #[test]
    fn group_estimate_drops_masked_members() {
        let p = BlendParams::default();
        let mut store = latest_store(&[5.0]);
        store
            .ingest(DeviceReport::with_mask(2, 0, vec![9.0], vec![true]).unwrap())
            .unwrap();
        let g = group_estimate(&group_of(&store, &[(1, 1.0), (2, 1.0)]), &store, 0, &p);
        assert_eq!(g, Some(5.0));
        let only_masked = group_of(&store, &[(2, 1.0)]);
        assert_eq!(group_estimate(&only_masked, &store, 0, &p), None);
    }

    /// Devices 0..n over `ticks` ticks, value per device and tick from `f`;
    /// the target's last report has dimension 0 masked.
    fn scenario(n: usize, ticks: i64, f: impl Fn(usize, i64) -> [f64; 2]) -> WindowStore {
        let mut store = WindowStore::new(10);
        for t in 0..ticks {
            for d in 0..n {
                let values = f(d, t).to_vec();
                let report = if d == 0 && t == ticks - 1 {
                    DeviceReport::with_mask(d, t, values, vec![true, false]).unwrap()
                } else {
                    DeviceReport::new(d, t, values)
                };
                store.ingest(report).unwrap();
            }
        }
        store
    }

    #[test]
    fn blend_arithmetic() {
        let p = BlendParams::default();
        let w = local_weight(0.1, &p);
        assert_eq!(w * 10.0 + (1.0 - w) * 20.0, 15.0);
    }

    #[test]
    fn identical_constant_streams_give_the_constant() {
        let store = scenario(5, 12, |_, _| [3.5, 7.0]);
        let p = BlendParams::default();
        for model in Model::ALL {
            let out = impute(&store, 0, 0, model, &p).unwrap();
            assert_eq!(out.pd, 3.5, "{model}");
        }
    }

    #[test]
    fn empty_group_falls_back_to_local() {
        let store = scenario(1, 11, |_, t| [1.0 + t as f64, 2.0]);
        let p = BlendParams::default();
        let out = impute_pbm(&store, 0, 0, &p).unwrap();
        assert!(out.group.is_empty());
        assert_eq!(out.wgm, None);
        assert_eq!(out.w_local, 1.0);
        // window holds ticks 1..=10 with the last masked: values 2..=10, next is 11
        assert!((out.pd - 11.0).abs() < 1e-9, "{}", out.pd);
        assert!(matches!(
            impute_dbm(&store, 0, 0, &p),
            Err(ImputeError::ImputationImpossible { .. })
        ));
        assert!(matches!(
            impute_am(&store, 0, 0, &p),
            Err(ImputeError::ImputationImpossible { .. })
        ));
    }

    #[test]
    fn no_local_history_uses_group_only() {
        // target only ever reports with dimension 0 masked
        let mut store = WindowStore::new(10);
        for t in 0..5 {
            store
                .ingest(
                    DeviceReport::with_mask(0, t, vec![0.0, 2.0 + t as f64], vec![true, false])
                        .unwrap(),
                )
                .unwrap();
            store
                .ingest(DeviceReport::new(1, t, vec![4.0, 2.0 + t as f64]))
                .unwrap();
        }
        let out = impute_pbm(&store, 0, 0, &BlendParams::default()).unwrap();
        assert_eq!(out.local, None);
        assert_eq!(out.w_local, 0.0);
        assert_eq!(out.pd, 4.0);
    }

    #[test]
    fn am_and_dbm_single_peer_and_means() {
        let store = scenario(2, 10, |d, t| {
            [10.0 + d as f64 + 0.1 * t as f64, 1.0 + 0.01 * t as f64]
        });
        let p = BlendParams::default();
        let peer_value = store.latest(1).unwrap().value(0).unwrap();
        assert_eq!(impute_dbm(&store, 0, 0, &p).unwrap().pd, peer_value);
        assert_eq!(impute_am(&store, 0, 0, &p).unwrap().pd, peer_value);

        let four = scenario(5, 10, |d, t| {
            [d as f64, 1.0 + 0.5 * ((d + t as usize) % 2) as f64]
        });
        let out = impute_am(&four, 0, 0, &p).unwrap();
        assert_eq!(out.group.len(), 4);
        assert_eq!(out.pd, 2.5);
    }

    #[test]
    fn not_missing_is_rejected() {
        let store = scenario(2, 5, |_, _| [1.0, 1.0]);
        assert_eq!(
            impute_pbm(&store, 1, 0, &BlendParams::default()).unwrap_err(),
            ImputeError::NotMissing {
                device: 1,
                dimension: 0
            }
        );
    }

    #[test]
    fn pbm_limits() {
        let store = scenario(5, 12, |d, t| {
            [
                5.0 + (t as f64 * 0.7).sin() + 0.2 * d as f64,
                3.0 + (t as f64 * 0.7).cos(),
            ]
        });
        let dbm = impute_dbm(&store, 0, 0, &BlendParams::default()).unwrap();
        let steep = BlendParams {
            alpha: 1e12,
            ..Default::default()
        };
        let pbm = impute_pbm(&store, 0, 0, &steep).unwrap();
        assert!(pbm.local.unwrap().sigma > 0.0);
        assert_eq!(pbm.pd, dbm.pd);

        let trusting = BlendParams {
            beta: 1e3,
            ..Default::default()
        };
        let pbm = impute_pbm(&store, 0, 0, &trusting).unwrap();
        assert_eq!(pbm.pd, pbm.local.unwrap().value);
    }

    #[test]
    fn model_names_round_trip() {
        for m in Model::ALL {
            assert_eq!(m.to_string().parse::<Model>().unwrap(), m);
        }
        assert!("XYZ".parse::<Model>().is_err());
    }

    proptest! {
        #[test]
        fn local_weight_decreasing_and_half_at_ratio(
            alpha in 0.1f64..100.0, beta in -10.0f64..10.0, s1 in 0.0f64..2.0, s2 in 0.0f64..2.0
        ) {
            let p = BlendParams { alpha, beta, ..Default::default() };
            prop_assert_eq!(local_weight(beta / alpha, &p), 0.5);
            let (lo, hi) = if s1 < s2 { (s1, s2) } else { (s2, s1) };
            prop_assert!(local_weight(hi, &p) <= local_weight(lo, &p));
            if hi > lo {
                let a = local_weight(lo, &p);
                let b = local_weight(hi, &p);
                prop_assert!(b < a || a == 0.0 || b == 1.0);
            }
        }

        #[test]
        fn wgm_scale_invariant_and_below_arithmetic(
            pairs in proptest::collection::vec((0.01f64..1e3, 0.01f64..10.0), 1..12),
            c in 0.001f64..1e3,
        ) {
            let (values, weights): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let g = weighted_geometric_mean(&values, &weights).unwrap();
            let scaled: Vec<f64> = weights.iter().map(|w| w * c).collect();
            prop_assert!(rel_close(weighted_geometric_mean(&values, &scaled).unwrap(), g, 1e-12));
            let wsum: f64 = weights.iter().sum();
            let am = values.iter().zip(&weights).map(|(v, w)| v * w).sum::<f64>() / wsum;
            prop_assert!(g <= am * (1.0 + 1e-12));
        }

        #[test]
        fn affine_sequences_are_reproduced(a in -1e3f64..1e3, b in -1e2f64..1e2, n in 3usize..20) {
            let values: Vec<f64> = (0..n).map(|t| a + b * t as f64).collect();
            let next = a + b * n as f64;
            let est = local_regress(&StreamSlice::from_values(values), 3).unwrap();
            prop_assert!((est.value - next).abs() <= 1e-8 * next.abs().max(1.0),
                "{:?} vs {}", est, next);
        }
    }
}
