//! Browser demo: three interactive views over synthetic traces.
//!
//! The plain functions build serializable results and are tested natively;
//! the `#[wasm_bindgen]` wrappers hand JSON strings to the page.

use std::collections::BTreeMap;

use edge_impute::evaluation::{run_experiment, run_experiment_with};
use edge_impute::imputation::{local_weight, BlendParams, Model};
use edge_impute::ingestion::{synth_trace, SynthParams, Trace};
use edge_impute::{ExperimentConfig, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Synthetic trace plus the knobs the page exposes for every experiment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scenario {
    pub devices: usize,
    pub ticks: usize,
    pub dims: usize,
    pub noise: f64,
    pub device_spread: f64,
    pub v: f64,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            devices: 5,
            ticks: 300,
            dims: 4,
            noise: 0.05,
            device_spread: 0.0,
            v: 5.0,
            alpha: 20.0,
            beta: 2.0,
            seed: 1,
        }
    }
}

impl Scenario {
    fn trace(&self) -> Result<Trace> {
        synth_trace(&SynthParams {
            device_spread: self.device_spread,
            ..SynthParams::new(self.devices, self.ticks, self.dims, self.noise, self.seed)
        })
    }

    fn config(&self, model: Model) -> ExperimentConfig {
        ExperimentConfig {
            model,
            v: self.v,
            n: self.devices,
            m: self.dims,
            k: ExperimentConfig::default()
                .k
                .min(self.devices.saturating_sub(1))
                .max(1),
            alpha: self.alpha,
            beta: self.beta,
            seeds: vec![self.seed],
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CurvePoint {
    pub sigma: f64,
    pub weight: f64,
}

/// Local-view weight over `points` evenly spaced deviations in `[0, sigma_max]`.
pub fn weight_curve(alpha: f64, beta: f64, sigma_max: f64, points: usize) -> Vec<CurvePoint> {
    let params = BlendParams {
        alpha,
        beta,
        ..BlendParams::default()
    };
    let steps = points.max(2) - 1;
    (0..=steps)
        .map(|i| {
            let sigma = sigma_max * i as f64 / steps as f64;
            CurvePoint {
                sigma,
                weight: local_weight(sigma, &params),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ModelScore {
    pub model: String,
    pub replacements: usize,
    pub failures: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub mean_time_us: Option<f64>,
}

/// Error of every model on one masked synthetic trace.
pub fn score_models(scenario: &Scenario) -> Result<Vec<ModelScore>> {
    let trace = scenario.trace()?;
    Model::ALL
        .iter()
        .map(|&model| {
            let report = run_experiment(&trace, &scenario.config(model))?;
            Ok(ModelScore {
                model: model.to_string(),
                replacements: report.replacements,
                failures: report.failures,
                mae: report.mae,
                rmse: report.rmse,
                mean_time_us: report.mean_time().map(|d| d.as_secs_f64() * 1e6),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ImputedCell {
    pub timestamp: i64,
    pub truth: f64,
    pub pbm: Option<f64>,
    pub dbm: Option<f64>,
    pub am: Option<f64>,
    /// Weight PBM gave its local forecast.
    pub w_local: Option<f64>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct DeviceSeries {
    pub device: usize,
    pub dimension: usize,
    pub timestamps: Vec<i64>,
    pub values: Vec<f64>,
    pub cells: Vec<ImputedCell>,
}

/// One device's stream in one dimension with every masked cell imputed by each model.
pub fn device_series(scenario: &Scenario, device: usize, dimension: usize) -> Result<DeviceSeries> {
    let trace = scenario.trace()?;
    let mut cells: BTreeMap<i64, ImputedCell> = BTreeMap::new();
    for model in Model::ALL {
        run_experiment_with(&trace, &scenario.config(model), |_, result| {
            let c = result.cell;
            if c.device != device || c.dimension != dimension {
                return;
            }
            let entry = cells.entry(c.timestamp).or_insert(ImputedCell {
                timestamp: c.timestamp,
                truth: c.truth,
                pbm: None,
                dbm: None,
                am: None,
                w_local: None,
            });
            let Ok(out) = result.outcome else { return };
            match model {
                Model::Pbm => {
                    entry.pbm = Some(out.pd);
                    entry.w_local = Some(out.w_local);
                }
                Model::Dbm => entry.dbm = Some(out.pd),
                Model::Am => entry.am = Some(out.pd),
            }
        })?;
    }
    let (timestamps, values) = trace
        .reports
        .iter()
        .filter(|r| r.device_id == device)
        .filter_map(|r| r.value(dimension).map(|v| (r.timestamp, v)))
        .unzip();
    Ok(DeviceSeries {
        device,
        dimension,
        timestamps,
        values,
        cells: cells.into_values().collect(),
    })
}

fn to_json<T: Serialize>(result: Result<T>) -> std::result::Result<String, JsError> {
    let value = result.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = weightCurve)]
pub fn weight_curve_js(
    alpha: f64,
    beta: f64,
    sigma_max: f64,
    points: usize,
) -> std::result::Result<String, JsError> {
    to_json(Ok(weight_curve(alpha, beta, sigma_max, points)))
}

#[allow(clippy::too_many_arguments)]
fn scenario(
    devices: usize,
    ticks: usize,
    noise: f64,
    device_spread: f64,
    v: f64,
    alpha: f64,
    beta: f64,
    seed: u32,
) -> Scenario {
    Scenario {
        devices,
        ticks,
        noise,
        device_spread,
        v,
        alpha,
        beta,
        seed: u64::from(seed),
        ..Scenario::default()
    }
}

#[wasm_bindgen(js_name = scoreModels)]
#[allow(clippy::too_many_arguments)]
pub fn score_models_js(
    devices: usize,
    ticks: usize,
    noise: f64,
    device_spread: f64,
    v: f64,
    alpha: f64,
    beta: f64,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_json(score_models(&scenario(
        devices,
        ticks,
        noise,
        device_spread,
        v,
        alpha,
        beta,
        seed,
    )))
}

#[wasm_bindgen(js_name = deviceSeries)]
#[allow(clippy::too_many_arguments)]
pub fn device_series_js(
    devices: usize,
    ticks: usize,
    noise: f64,
    device_spread: f64,
    v: f64,
    alpha: f64,
    beta: f64,
    seed: u32,
    device: usize,
    dimension: usize,
) -> std::result::Result<String, JsError> {
    let s = scenario(devices, ticks, noise, device_spread, v, alpha, beta, seed);
    to_json(device_series(&s, device, dimension))
}
