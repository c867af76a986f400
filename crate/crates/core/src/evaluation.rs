//! Replay of masked traces through the window store, and error/latency scoring.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use crate::config::{ExperimentConfig, FeedMode};
use crate::error::{ImputeError, Result};
use crate::imputation::{impute, ImputationOutcome};
use crate::ingestion::{inject_missing, InjectionOptions, InjectionPlan, MaskedCell, Trace};
use crate::kv::KvDoc;
use crate::stream::{DeviceReport, WindowStore};

fn check_lengths(predicted: &[f64], actual: &[f64]) -> Result<()> {
    if predicted.is_empty() {
        return Err(ImputeError::UndefinedMetric("no values to score"));
    }
    if predicted.len() != actual.len() {
        return Err(ImputeError::UndefinedMetric(
            "predicted and actual differ in length",
        ));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(predicted, actual)?;
    let sum: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a).abs())
        .sum();
    Ok(sum / predicted.len() as f64)
}

/// Root mean square error.
pub fn rmse(predicted: &[f64], actual: &[f64]) -> Result<f64> {
    check_lengths(predicted, actual)?;
    let sum: f64 = predicted
        .iter()
        .zip(actual)
        .map(|(p, a)| (p - a).powi(2))
        .sum();
    Ok((sum / predicted.len() as f64).sqrt())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SeedMetrics {
    pub seed: u64,
    pub masked: usize,
    pub replacements: usize,
    pub failures: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub total_time: Duration,
}

impl SeedMetrics {
    pub fn mean_time(&self) -> Option<Duration> {
        (self.replacements > 0).then(|| self.total_time / self.replacements as u32)
    }
}

/// Scores of one grid cell, pooled over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub config: ExperimentConfig,
    pub replacements: usize,
    pub failures: usize,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub total_time: Duration,
    pub per_seed: Vec<SeedMetrics>,
}

impl MetricsReport {
    pub fn mean_time(&self) -> Option<Duration> {
        (self.replacements > 0).then(|| self.total_time / self.replacements as u32)
    }
}

/// Result of firing the imputer at one masked cell.
#[derive(Debug)]
pub struct CellResult<'a> {
    pub cell: &'a MaskedCell,
    pub outcome: Result<ImputationOutcome>,
}

/// Replay `masked` tick by tick and impute every cell listed in `plan`.
///
/// At each tick all reports are ingested first, then every planned cell of
/// that tick is imputed against the same store state, and only then are the
/// cells filled back (with the truth or the imputation, per `config.feed`).
/// Masked cells without ground truth are left alone. `observe` sees every
/// cell in (tick, device, dimension) order.
pub fn replay<F>(
    masked: &[DeviceReport],
    plan: &InjectionPlan,
    config: &ExperimentConfig,
    observe: F,
) -> Result<SeedMetrics>
where
    F: FnMut(CellResult<'_>),
{
    replay_scored(masked, plan, config, observe).map(|(metrics, _)| metrics)
}

/// [`replay`] that also returns the scored `(predicted, actual)` pairs.
fn replay_scored<F>(
    masked: &[DeviceReport],
    plan: &InjectionPlan,
    config: &ExperimentConfig,
    mut observe: F,
) -> Result<(SeedMetrics, Vec<(f64, f64)>)>
where
    F: FnMut(CellResult<'_>),
{
    let params = config.blend_params();
    let cells: HashMap<(usize, i64, usize), &MaskedCell> = plan
        .cells
        .iter()
        .map(|c| ((c.device, c.timestamp, c.dimension), c))
        .collect();

    let mut order: Vec<&DeviceReport> = masked.iter().collect();
    order.sort_by_key(|r| (r.timestamp, r.device_id));

    let mut store = WindowStore::new(config.w);
    let mut predicted = Vec::new();
    let mut actual = Vec::new();
    let mut metrics = SeedMetrics {
        seed: plan.seed,
        masked: plan.cells.len(),
        ..Default::default()
    };

    for tick in order.chunk_by(|a, b| a.timestamp == b.timestamp) {
        for report in tick {
            store.ingest((*report).clone())?;
        }
        let mut fills = Vec::new();
        for report in tick {
            for dim in report.missing_dims() {
                let Some(cell) = cells.get(&(report.device_id, report.timestamp, dim)) else {
                    continue;
                };
                let outcome = impute(&store, report.device_id, dim, config.model, &params);
                match &outcome {
                    Ok(out) => {
                        predicted.push(out.pd);
                        actual.push(cell.truth);
                        metrics.total_time += out.elapsed;
                        let fill = match config.feed {
                            FeedMode::Truth => cell.truth,
                            FeedMode::Imputed => out.pd,
                        };
                        fills.push((cell.device, dim, fill));
                    }
                    Err(ImputeError::ImputationImpossible { .. }) => {
                        metrics.failures += 1;
                        if config.feed == FeedMode::Truth {
                            fills.push((cell.device, dim, cell.truth));
                        }
                    }
                    Err(e) => return Err(e.clone()),
                }
                observe(CellResult { cell, outcome });
            }
        }
        for (device, dim, value) in fills {
            store.fill_latest(device, dim, value)?;
        }
    }

    metrics.replacements = predicted.len();
    if !predicted.is_empty() {
        metrics.mae = Some(mae(&predicted, &actual)?);
        metrics.rmse = Some(rmse(&predicted, &actual)?);
    }
    Ok((metrics, predicted.into_iter().zip(actual).collect()))
}

/// Subset the trace to the config's N and M, then mask and replay once per seed.
pub fn run_experiment(trace: &Trace, config: &ExperimentConfig) -> Result<MetricsReport> {
    run_experiment_with(trace, config, |_, _| {})
}

/// [`run_experiment`] with a per-cell observer that also receives the seed.
pub fn run_experiment_with<F>(
    trace: &Trace,
    config: &ExperimentConfig,
    mut observe: F,
) -> Result<MetricsReport>
where
    F: FnMut(u64, CellResult<'_>),
{
    config.validate()?;
    let sub = trace
        .subset(config.n, config.m)
        .map_err(|e| ImputeError::Config(format!("cell [{}]: {e}", config.label())))?;
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    let mut pooled = Vec::new();
    for &seed in &config.seeds {
        let (masked, plan) = inject_missing(
            &sub.reports,
            &InjectionOptions {
                rate: config.v,
                seed,
                warmup: config.w,
                unit: config.unit,
            },
        )?;
        let (metrics, scored) = replay_scored(&masked, &plan, config, |cell| observe(seed, cell))?;
        pooled.extend(scored);
        per_seed.push(metrics);
    }
    let (predicted, actual): (Vec<f64>, Vec<f64>) = pooled.into_iter().unzip();
    Ok(MetricsReport {
        config: config.clone(),
        replacements: predicted.len(),
        failures: per_seed.iter().map(|s| s.failures).sum(),
        mae: mae(&predicted, &actual).ok(),
        rmse: rmse(&predicted, &actual).ok(),
        total_time: per_seed.iter().map(|s| s.total_time).sum(),
        per_seed,
    })
}

/// Rows of a model comparison, one per grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub rows: Vec<MetricsReport>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.9}"))
}

fn fmt_ms(d: Option<Duration>) -> String {
    d.map_or_else(
        || "NA".to_string(),
        |d| format!("{:.6}", d.as_secs_f64() * 1e3),
    )
}

impl ComparisonTable {
    pub const METRICS_HEADER: &'static str =
        "model,V,W,k,N,M,alpha,beta,seeds,masked,replacements,failures,mae,rmse";
    pub const TIMING_HEADER: &'static str =
        "model,V,W,k,N,M,replacements,mean_time_ms,total_time_ms";

    /// Error metrics; byte-identical across reruns of the same manifest.
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(Self::METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            let c = &r.config;
            let seeds = c
                .seeds
                .iter()
                .map(u64::to_string)
                .collect::<Vec<_>>()
                .join(";");
            let masked: usize = r.per_seed.iter().map(|s| s.masked).sum();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                c.model,
                c.v,
                c.w,
                c.k,
                c.n,
                c.m,
                c.alpha,
                c.beta,
                seeds,
                masked,
                r.replacements,
                r.failures,
                fmt_opt(r.mae),
                fmt_opt(r.rmse)
            );
        }
        out
    }

    /// Wall-clock latency per replacement; varies between runs.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from(Self::TIMING_HEADER);
        out.push('\n');
        for r in &self.rows {
            let c = &r.config;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.model,
                c.v,
                c.w,
                c.k,
                c.n,
                c.m,
                r.replacements,
                fmt_ms(r.mean_time()),
                fmt_ms(Some(r.total_time))
            );
        }
        out
    }

    /// Structured key-value form with the per-seed breakdown; like the CSV it carries no timings.
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::default();
        doc.push("cells", self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            let c = &r.config;
            let p = format!("cell.{i}");
            doc.push(format!("{p}.model"), c.model);
            doc.push(format!("{p}.V"), c.v);
            doc.push(format!("{p}.N"), c.n);
            doc.push(format!("{p}.M"), c.m);
            doc.push(format!("{p}.replacements"), r.replacements);
            doc.push(format!("{p}.failures"), r.failures);
            doc.push(format!("{p}.mae"), fmt_opt(r.mae));
            doc.push(format!("{p}.rmse"), fmt_opt(r.rmse));
            for s in &r.per_seed {
                let q = format!("{p}.seed.{}", s.seed);
                doc.push(format!("{q}.masked"), s.masked);
                doc.push(format!("{q}.replacements"), s.replacements);
                doc.push(format!("{q}.failures"), s.failures);
                doc.push(format!("{q}.mae"), fmt_opt(s.mae));
                doc.push(format!("{q}.rmse"), fmt_opt(s.rmse));
            }
        }
        doc
    }
}

/// Config validation plus a size check of the cell against the trace.
pub fn check_cell(trace: &Trace, cell: &ExperimentConfig) -> Result<()> {
    cell.validate()?;
    if cell.n > trace.n_devices() || cell.m > trace.dims() {
        return Err(ImputeError::Config(format!(
            "cell [{}]: trace has only N = {}, M = {}",
            cell.label(),
            trace.n_devices(),
            trace.dims()
        )));
    }
    Ok(())
}

/// Run every grid cell on the same trace; masks depend only on (seed, V, N, M, W).
pub fn compare_models(trace: &Trace, grid: &[ExperimentConfig]) -> Result<ComparisonTable> {
    for cell in grid {
        check_cell(trace, cell)?;
    }
    let rows = grid
        .iter()
        .map(|cell| run_experiment(trace, cell))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable { rows })
}

/// [`compare_models`] with cells spread over `jobs` threads.
///
/// Rows keep grid order, so the metrics table does not depend on `jobs`.
/// Timings are only comparable across runs with `jobs == 1`.
pub fn compare_models_parallel(
    trace: &Trace,
    grid: &[ExperimentConfig],
    jobs: usize,
) -> Result<ComparisonTable> {
    if jobs <= 1 || grid.len() <= 1 {
        return compare_models(trace, grid);
    }
    for cell in grid {
        check_cell(trace, cell)?;
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<MetricsReport>>> = vec![None; grid.len()];
    let done = Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(grid.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cell) = grid.get(i) else { break };
                let result = run_experiment(trace, cell);
                done.lock().expect("worker panicked")[i] = Some(result);
            });
        }
    });
    let rows = slots
        .into_iter()
        .map(|slot| slot.expect("every cell is visited"))
        .collect::<Result<Vec<_>>>()?;
    Ok(ComparisonTable { rows })
}
