//! Trace loading, synthetic traces, and seeded missing-value injection.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::error::{ImputeError, Result};
use crate::kv::{parse_bool, parse_list, KvDoc};
use crate::stream::DeviceReport;

/// Name of the sampling procedure, recorded in run manifests.
pub const RNG_ALGORITHM: &str =
    "ChaCha8Rng(rand_chacha 0.9) seed_from_u64 + rand::seq::index::sample(rand 0.9)";

const EMPTY_TOKEN: &str = "<empty>";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnRef {
    Name(String),
    Index(usize),
}

impl ColumnRef {
    fn parse(raw: &str, header: bool) -> Result<Self> {
        if header {
            Ok(ColumnRef::Name(raw.to_string()))
        } else {
            raw.parse().map(ColumnRef::Index).map_err(|_| {
                ImputeError::Config(format!(
                    "column '{raw}' must be a zero-based index when header = false"
                ))
            })
        }
    }

    fn label(&self) -> String {
        match self {
            ColumnRef::Name(n) => n.clone(),
            ColumnRef::Index(i) => i.to_string(),
        }
    }
}

/// Declarative column mapping for delimiter-separated trace files.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSchema {
    pub delimiter: u8,
    pub header: bool,
    pub device_column: ColumnRef,
    pub timestamp_column: ColumnRef,
    pub value_columns: Vec<ColumnRef>,
    pub na_tokens: Vec<String>,
}

impl TraceSchema {
    /// Schema of the files written by [`write_trace`].
    pub fn canonical(value_names: &[String]) -> Self {
        Self {
            delimiter: b',',
            header: true,
            device_column: ColumnRef::Name("device".into()),
            timestamp_column: ColumnRef::Name("timestamp".into()),
            value_columns: value_names.iter().cloned().map(ColumnRef::Name).collect(),
            na_tokens: vec!["NA".into()],
        }
    }

    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let delimiter = match doc.get("delimiter").unwrap_or(",") {
            "tab" | "\\t" => b'\t',
            "space" => b' ',
            "comma" => b',',
            "semicolon" => b';',
            d if d.len() == 1 => d.as_bytes()[0],
            d => {
                return Err(ImputeError::Config(format!(
                    "delimiter must be a single byte or tab/space/comma/semicolon, got '{d}'"
                )))
            }
        };
        let header = match doc.get("header") {
            Some(v) => parse_bool("header", v)?,
            None => true,
        };
        let device_column = ColumnRef::parse(doc.require("device_column")?, header)?;
        let timestamp_column = ColumnRef::parse(doc.require("timestamp_column")?, header)?;
        let value_columns = parse_list(doc.require("value_columns")?)
            .iter()
            .map(|c| ColumnRef::parse(c, header))
            .collect::<Result<Vec<_>>>()?;
        let na_tokens = doc
            .get("na_tokens")
            .map(parse_list)
            .unwrap_or_default()
            .into_iter()
            .map(|t| if t == EMPTY_TOKEN { String::new() } else { t })
            .collect();
        let schema = Self {
            delimiter,
            header,
            device_column,
            timestamp_column,
            value_columns,
            na_tokens,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvDoc::parse(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ImputeError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.value_columns.is_empty() {
            return Err(ImputeError::Config(
                "schema needs at least one value column".into(),
            ));
        }
        let mut all = vec![&self.device_column, &self.timestamp_column];
        all.extend(self.value_columns.iter());
        for (i, a) in all.iter().enumerate() {
            if all[i + 1..].contains(a) {
                return Err(ImputeError::Config(format!(
                    "column '{}' is mapped more than once",
                    a.label()
                )));
            }
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::default();
        let delimiter = match self.delimiter {
            b'\t' => "tab".to_string(),
            b' ' => "space".to_string(),
            b',' => "comma".to_string(),
            d => (d as char).to_string(),
        };
        doc.push("delimiter", delimiter);
        doc.push("header", self.header);
        doc.push("device_column", self.device_column.label());
        doc.push("timestamp_column", self.timestamp_column.label());
        doc.push(
            "value_columns",
            self.value_columns
                .iter()
                .map(ColumnRef::label)
                .collect::<Vec<_>>()
                .join(", "),
        );
        doc.push(
            "na_tokens",
            self.na_tokens
                .iter()
                .map(|t| {
                    if t.is_empty() {
                        EMPTY_TOKEN
                    } else {
                        t.as_str()
                    }
                })
                .collect::<Vec<_>>()
                .join(", "),
        );
        doc
    }

    pub fn dims(&self) -> usize {
        self.value_columns.len()
    }
}

/// Reports of every device, ordered by dense device index then timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub reports: Vec<DeviceReport>,
    /// Original device identifiers, indexed by dense device index.
    pub device_labels: Vec<String>,
    pub value_names: Vec<String>,
}

impl Trace {
    pub fn n_devices(&self) -> usize {
        self.device_labels.len()
    }

    pub fn dims(&self) -> usize {
        self.value_names.len()
    }

    pub fn canonical_schema(&self) -> TraceSchema {
        TraceSchema::canonical(&self.value_names)
    }

    /// Keep devices `0..n_devices` and dimensions `0..dims`.
    pub fn subset(&self, n_devices: usize, dims: usize) -> Result<Trace> {
        if n_devices > self.n_devices() || dims > self.dims() || n_devices == 0 || dims == 0 {
            return Err(ImputeError::Config(format!(
                "requested N = {n_devices}, M = {dims} but trace has N = {}, M = {}",
                self.n_devices(),
                self.dims()
            )));
        }
        let reports = self
            .reports
            .iter()
            .filter(|r| r.device_id < n_devices)
            .map(|r| {
                let mask = r.missing_mask()[..dims].to_vec();
                let values = r.raw_values()[..dims].to_vec();
                DeviceReport::with_mask(r.device_id, r.timestamp, values, mask)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Trace {
            reports,
            device_labels: self.device_labels[..n_devices].to_vec(),
            value_names: self.value_names[..dims].to_vec(),
        })
    }
}

fn resolve(col: &ColumnRef, header: Option<&csv::StringRecord>) -> Result<usize> {
    match (col, header) {
        (ColumnRef::Index(i), _) => Ok(*i),
        (ColumnRef::Name(name), Some(h)) => h
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| ImputeError::Config(format!("column '{name}' not found in header"))),
        (ColumnRef::Name(name), None) => Err(ImputeError::Config(format!(
            "column '{name}' referenced by name but the file has no header"
        ))),
    }
}

/// Parse a delimiter-separated trace.
pub fn parse_trace<R: Read>(input: R, schema: &TraceSchema) -> Result<Trace> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = reader.records();

    let header = if schema.header {
        match records.next() {
            Some(rec) => Some(rec.map_err(|e| parse_err(1, e.to_string()))?),
            None => return Err(parse_err(1, "missing header line".into())),
        }
    } else {
        None
    };
    let device_idx = resolve(&schema.device_column, header.as_ref())?;
    let time_idx = resolve(&schema.timestamp_column, header.as_ref())?;
    let value_idx = schema
        .value_columns
        .iter()
        .map(|c| resolve(c, header.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let width = value_idx
        .iter()
        .chain([&device_idx, &time_idx])
        .max()
        .copied()
        .unwrap_or(0)
        + 1;

    let mut labels: Vec<String> = Vec::new();
    let mut dense: HashMap<String, usize> = HashMap::new();
    // per device: (timestamp, line, report)
    let mut rows: Vec<Vec<(i64, u64, DeviceReport)>> = Vec::new();

    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() < width {
            return Err(parse_err(
                line,
                format!(
                    "malformed row: {} fields, schema needs at least {width}",
                    rec.len()
                ),
            ));
        }
        let label = &rec[device_idx];
        let timestamp: i64 = rec[time_idx].parse().map_err(|_| {
            parse_err(
                line,
                format!("timestamp '{}' is not an integer", &rec[time_idx]),
            )
        })?;
        let mut values = Vec::with_capacity(value_idx.len());
        let mut missing = Vec::with_capacity(value_idx.len());
        for &c in &value_idx {
            let cell = &rec[c];
            if schema.na_tokens.iter().any(|t| t == cell) {
                values.push(0.0);
                missing.push(true);
            } else {
                let v: f64 = cell
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| {
                        parse_err(line, format!("value '{cell}' is not a finite number"))
                    })?;
                values.push(v);
                missing.push(false);
            }
        }
        let device = *dense.entry(label.to_string()).or_insert_with(|| {
            labels.push(label.to_string());
            rows.push(Vec::new());
            labels.len() - 1
        });
        let report = DeviceReport::with_mask(device, timestamp, values, missing)?;
        rows[device].push((timestamp, line, report));
    }

    let mut reports = Vec::new();
    for (device, mut device_rows) in rows.into_iter().enumerate() {
        device_rows.sort_by_key(|(t, line, _)| (*t, *line));
        for pair in device_rows.windows(2) {
            if pair[0].0 == pair[1].0 {
                return Err(ImputeError::Duplicate {
                    line: pair[1].1,
                    device: labels[device].clone(),
                    timestamp: pair[1].0,
                });
            }
        }
        reports.extend(device_rows.into_iter().map(|(_, _, r)| r));
    }

    let value_names = match &header {
        Some(h) => value_idx.iter().map(|&i| h[i].to_string()).collect(),
        None => (0..value_idx.len()).map(|d| format!("v{d}")).collect(),
    };
    Ok(Trace {
        reports,
        device_labels: labels,
        value_names,
    })
}

fn parse_err(line: u64, message: String) -> ImputeError {
    ImputeError::Parse { line, message }
}

pub fn load_trace(path: &Path, schema: &TraceSchema) -> Result<Trace> {
    let file = std::fs::File::open(path)
        .map_err(|e| ImputeError::Io(format!("{}: {e}", path.display())))?;
    parse_trace(std::io::BufReader::new(file), schema)
}

/// Write a trace in the canonical layout read back by [`Trace::canonical_schema`].
pub fn write_trace<W: Write>(trace: &Trace, mut out: W) -> Result<()> {
    let mut line = String::from("device,timestamp");
    for name in &trace.value_names {
        line.push(',');
        line.push_str(name);
    }
    line.push('\n');
    out.write_all(line.as_bytes())?;
    for r in &trace.reports {
        line.clear();
        let _ = write!(line, "{},{}", trace.device_labels[r.device_id], r.timestamp);
        for d in 0..r.dims() {
            match r.value(d) {
                Some(v) => {
                    let _ = write!(line, ",{v}");
                }
                None => line.push_str(",NA"),
            }
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskUnit {
    /// Single scalar cells.
    #[default]
    Cell,
    /// Every observed dimension of a sampled report.
    Vector,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InjectionOptions {
    /// Percentage V in `[0, 100)`.
    pub rate: f64,
    pub seed: u64,
    /// Leading reports per device that are never masked.
    pub warmup: usize,
    pub unit: MaskUnit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskedCell {
    pub device: usize,
    pub timestamp: i64,
    pub dimension: usize,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionPlan {
    pub rate: f64,
    pub seed: u64,
    pub unit: MaskUnit,
    /// Sorted by (device, timestamp, dimension) in trace order.
    pub cells: Vec<MaskedCell>,
}

impl InjectionPlan {
    pub fn export<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "device,timestamp,dimension,truth")?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{}",
                c.device, c.timestamp, c.dimension, c.truth
            )?;
        }
        Ok(())
    }
}

/// Mask a seeded uniform sample of `round(rate / 100 * eligible)` cells (or reports).
///
/// Eligible cells are currently observed cells outside each device's first
/// `warmup` reports.
pub fn inject_missing(
    reports: &[DeviceReport],
    opts: &InjectionOptions,
) -> Result<(Vec<DeviceReport>, InjectionPlan)> {
    if !(0.0..100.0).contains(&opts.rate) {
        return Err(ImputeError::Config(format!(
            "missing rate V must lie in [0, 100), got {}",
            opts.rate
        )));
    }
    // rank of each report within its device, by timestamp
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by_key(|&i| (reports[i].device_id, reports[i].timestamp));
    let mut rank = vec![0usize; reports.len()];
    let mut prev: Option<usize> = None;
    let mut count = 0;
    for &i in &order {
        if prev != Some(reports[i].device_id) {
            prev = Some(reports[i].device_id);
            count = 0;
        }
        rank[i] = count;
        count += 1;
    }

    let eligible: Vec<(usize, Option<usize>)> = match opts.unit {
        MaskUnit::Cell => reports
            .iter()
            .enumerate()
            .filter(|(i, _)| rank[*i] >= opts.warmup)
            .flat_map(|(i, r)| {
                (0..r.dims())
                    .filter(|&d| !r.is_missing(d))
                    .map(move |d| (i, Some(d)))
            })
            .collect(),
        MaskUnit::Vector => reports
            .iter()
            .enumerate()
            .filter(|(i, r)| rank[*i] >= opts.warmup && (0..r.dims()).any(|d| !r.is_missing(d)))
            .map(|(i, _)| (i, None))
            .collect(),
    };
    let take = (opts.rate / 100.0 * eligible.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picked = index::sample(&mut rng, eligible.len(), take).into_vec();
    picked.sort_unstable();

    let mut masked = reports.to_vec();
    let mut cells = Vec::new();
    for p in picked {
        let (i, dim) = eligible[p];
        let dims: Vec<usize> = match dim {
            Some(d) => vec![d],
            None => (0..masked[i].dims())
                .filter(|&d| !masked[i].is_missing(d))
                .collect(),
        };
        for d in dims {
            let truth = masked[i].value(d).expect("eligible cells are observed");
            masked[i].mask(d);
            cells.push(MaskedCell {
                device: masked[i].device_id,
                timestamp: masked[i].timestamp,
                dimension: d,
                truth,
            });
        }
    }
    cells.sort_by_key(|c| (c.device, c.timestamp, c.dimension));
    Ok((
        masked,
        InjectionPlan {
            rate: opts.rate,
            seed: opts.seed,
            unit: opts.unit,
            cells,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub n_devices: usize,
    pub n_ticks: usize,
    pub dims: usize,
    /// Standard deviation of the per-device Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    /// Mean level of the latent signal.
    pub level: f64,
    /// Standard deviation of a constant per-device, per-dimension offset.
    /// Zero makes the devices exchangeable.
    pub device_spread: f64,
}

impl SynthParams {
    pub fn new(n_devices: usize, n_ticks: usize, dims: usize, noise: f64, seed: u64) -> Self {
        Self {
            n_devices,
            n_ticks,
            dims,
            noise,
            seed,
            level: 20.0,
            device_spread: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_devices == 0 || self.n_ticks == 0 || self.dims == 0 {
            return Err(ImputeError::Config(
                "synthetic trace needs at least one device, tick and dimension".into(),
            ));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(ImputeError::Config(format!(
                "noise must be >= 0, got {}",
                self.noise
            )));
        }
        if !(self.device_spread >= 0.0) || !self.device_spread.is_finite() {
            return Err(ImputeError::Config(format!(
                "device_spread must be >= 0, got {}",
                self.device_spread
            )));
        }
        if !self.level.is_finite() {
            return Err(ImputeError::Config("level must be finite".into()));
        }
        Ok(())
    }
}

const SINUSOIDS: usize = 3;

struct Latent {
    // per dimension: (amplitude, angular frequency, phase)
    components: Vec<[(f64, f64, f64); SINUSOIDS]>,
    level: f64,
}

impl Latent {
    fn draw(params: &SynthParams, rng: &mut ChaCha8Rng) -> Self {
        let period = Uniform::new(40.0, 400.0).expect("valid range");
        let phase = Uniform::new(0.0, std::f64::consts::TAU).expect("valid range");
        let components = (0..params.dims)
            .map(|_| {
                std::array::from_fn(|c| {
                    // amplitudes 0.5, 0.3, 0.2 sum to one
                    let amp = [0.5, 0.3, 0.2][c];
                    (
                        amp,
                        std::f64::consts::TAU / period.sample(rng),
                        phase.sample(rng),
                    )
                })
            })
            .collect();
        Self {
            components,
            level: params.level,
        }
    }

    fn value(&self, tick: usize, dim: usize) -> f64 {
        let t = tick as f64;
        self.level
            + self.components[dim]
                .iter()
                .map(|(a, w, p)| a * (w * t + p).sin())
                .sum::<f64>()
    }
}

/// The shared noise-free signal of [`synth_trace`], indexed `[tick][dim]`.
pub fn synth_latent(params: &SynthParams) -> Result<Vec<Vec<f64>>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let latent = Latent::draw(params, &mut rng);
    Ok((0..params.n_ticks)
        .map(|t| (0..params.dims).map(|d| latent.value(t, d)).collect())
        .collect())
}

/// Devices observing one smooth latent signal per dimension plus i.i.d. Gaussian noise.
///
/// With `device_spread > 0` every device also carries a constant offset per dimension.
pub fn synth_trace(params: &SynthParams) -> Result<Trace> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let latent = Latent::draw(params, &mut rng);
    let offsets: Vec<Vec<f64>> = (0..params.n_devices)
        .map(|_| {
            (0..params.dims)
                .map(|_| {
                    if params.device_spread > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        params.device_spread * z
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut per_device: Vec<Vec<DeviceReport>> =
        vec![Vec::with_capacity(params.n_ticks); params.n_devices];
    for t in 0..params.n_ticks {
        for (device, reports) in per_device.iter_mut().enumerate() {
            let values = (0..params.dims)
                .map(|d| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    latent.value(t, d) + offsets[device][d] + params.noise * z
                })
                .collect();
            reports.push(DeviceReport::new(device, t as i64, values));
        }
    }
    let reports = per_device.into_iter().flatten().collect();
    Ok(Trace {
        reports,
        device_labels: (0..params.n_devices).map(|d| d.to_string()).collect(),
        value_names: (0..params.dims).map(|d| format!("v{d}")).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn schema(text: &str) -> TraceSchema {
        TraceSchema::parse(text).unwrap()
    }

    const BASIC: &str = "delimiter = ,\nheader = true\ndevice_column = dev\ntimestamp_column = t\nvalue_columns = a, b\nna_tokens = NaN, NA\n";

    #[test]
    fn loads_small_trace() {
        let csv = "dev,t,a,b\ns1,1,0.5,2\ns1,2,0.6,2.5\ns1,3,0.7,3\n";
        let trace = parse_trace(csv.as_bytes(), &schema(BASIC)).unwrap();
        assert_eq!(trace.reports.len(), 3);
        assert!(trace.reports.iter().all(|r| r.dims() == 2));
        assert_eq!(trace.reports[2].value(1), Some(3.0));
        assert_eq!(trace.value_names, vec!["a", "b"]);
    }

    #[test]
    fn na_token_is_masked() {
        let csv = "dev,t,a,b\ns1,1,NaN,2\n";
        let trace = parse_trace(csv.as_bytes(), &schema(BASIC)).unwrap();
        assert!(trace.reports[0].is_missing(0));
        assert_eq!(trace.reports[0].value(1), Some(2.0));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad_value = "dev,t,a,b\ns1,1,0.5,2\ns1,2,abc,2\n";
        match parse_trace(bad_value.as_bytes(), &schema(BASIC)) {
            Err(ImputeError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let short = "dev,t,a,b\ns1,1,0.5\n";
        assert!(matches!(
            parse_trace(short.as_bytes(), &schema(BASIC)),
            Err(ImputeError::Parse { line: 2, .. })
        ));
        let nan_unlisted = "dev,t,a,b\ns1,1,inf,2\n";
        assert!(parse_trace(nan_unlisted.as_bytes(), &schema(BASIC)).is_err());
        let dup = "dev,t,a,b\ns1,1,0.5,2\ns2,1,0.5,2\ns1,1,0.7,2\n";
        assert!(matches!(
            parse_trace(dup.as_bytes(), &schema(BASIC)),
            Err(ImputeError::Duplicate {
                line: 4,
                timestamp: 1,
                ..
            })
        ));
    }

    #[test]
    fn devices_are_reindexed_and_sorted() {
        let csv = "dev,t,a,b\nzz,5,1,1\naa,1,2,2\nzz,2,3,3\n";
        let trace = parse_trace(csv.as_bytes(), &schema(BASIC)).unwrap();
        assert_eq!(trace.device_labels, vec!["zz", "aa"]);
        let keys: Vec<_> = trace
            .reports
            .iter()
            .map(|r| (r.device_id, r.timestamp))
            .collect();
        assert_eq!(keys, vec![(0, 2), (0, 5), (1, 1)]);
    }

    #[test]
    fn headerless_schema_uses_indices() {
        let s = schema("delimiter = tab\nheader = false\ndevice_column = 3\ntimestamp_column = 0\nvalue_columns = 1, 2\n");
        let trace = parse_trace("7\t1.5\t2.5\tmote\n8\t1.0\t2.0\tmote\n".as_bytes(), &s).unwrap();
        assert_eq!(trace.reports.len(), 2);
        assert_eq!(trace.value_names, vec!["v0", "v1"]);
        assert!(TraceSchema::parse(
            "header = false\ndevice_column = dev\ntimestamp_column = 0\nvalue_columns = 1\n"
        )
        .is_err());
    }

    #[test]
    fn schema_rejects_duplicate_columns() {
        assert!(
            TraceSchema::parse("device_column = a\ntimestamp_column = b\nvalue_columns = a\n")
                .is_err()
        );
        assert!(
            TraceSchema::parse("device_column = a\ntimestamp_column = b\nvalue_columns = \n")
                .is_err()
        );
    }

    #[test]
    fn schema_text_round_trip() {
        let s = schema(BASIC);
        assert_eq!(TraceSchema::from_kv(&s.to_kv()).unwrap(), s);
        let tabbed = schema("delimiter = tab\ndevice_column = d\ntimestamp_column = t\nvalue_columns = x\nna_tokens = <empty>\n");
        assert_eq!(tabbed.na_tokens, vec![String::new()]);
        assert_eq!(TraceSchema::from_kv(&tabbed.to_kv()).unwrap(), tabbed);
    }

    fn grid_reports(devices: usize, ticks: usize, dims: usize) -> Vec<DeviceReport> {
        (0..devices)
            .flat_map(|d| {
                (0..ticks).map(move |t| {
                    DeviceReport::new(
                        d,
                        t as i64,
                        (0..dims).map(|m| (d * 1000 + t * 10 + m) as f64).collect(),
                    )
                })
            })
            .collect()
    }

    #[test]
    fn injects_exact_count() {
        let reports = grid_reports(10, 25, 4); // 1000 cells
        let opts = InjectionOptions {
            rate: 10.0,
            seed: 7,
            warmup: 0,
            unit: MaskUnit::Cell,
        };
        let (masked, plan) = inject_missing(&reports, &opts).unwrap();
        assert_eq!(plan.cells.len(), 100);
        let masked_count: usize = masked.iter().map(|r| r.missing_dims().count()).sum();
        assert_eq!(masked_count, 100);
    }

    #[test]
    fn injection_is_deterministic_per_seed() {
        let reports = grid_reports(10, 25, 4);
        let opts = InjectionOptions {
            rate: 5.0,
            seed: 11,
            warmup: 0,
            unit: MaskUnit::Cell,
        };
        assert_eq!(
            inject_missing(&reports, &opts).unwrap(),
            inject_missing(&reports, &opts).unwrap()
        );
    }

    #[test]
    fn distinct_seeds_give_distinct_masks() {
        // 10 cells from 1000: two independent draws coincide with probability 1 / C(1000, 10) ~ 3.8e-24
        let reports = grid_reports(10, 25, 4);
        for pair in 0..5u64 {
            let a = InjectionOptions {
                rate: 1.0,
                seed: 2 * pair,
                warmup: 0,
                unit: MaskUnit::Cell,
            };
            let b = InjectionOptions {
                seed: 2 * pair + 1,
                ..a
            };
            let pa = inject_missing(&reports, &a).unwrap().1;
            let pb = inject_missing(&reports, &b).unwrap().1;
            assert_eq!(pa.cells.len(), 10);
            assert_ne!(pa.cells, pb.cells);
        }
    }

    #[test]
    fn rate_out_of_range_is_config_error() {
        let reports = grid_reports(1, 5, 1);
        for rate in [-1.0, 100.0, 150.0, f64::NAN] {
            let opts = InjectionOptions {
                rate,
                seed: 0,
                warmup: 0,
                unit: MaskUnit::Cell,
            };
            assert!(matches!(
                inject_missing(&reports, &opts),
                Err(ImputeError::Config(_))
            ));
        }
        let zero = InjectionOptions {
            rate: 0.0,
            seed: 0,
            warmup: 0,
            unit: MaskUnit::Cell,
        };
        assert!(inject_missing(&reports, &zero).unwrap().1.cells.is_empty());
    }

    #[test]
    fn warmup_reports_are_never_masked() {
        let reports = grid_reports(3, 20, 2);
        let opts = InjectionOptions {
            rate: 50.0,
            seed: 3,
            warmup: 10,
            unit: MaskUnit::Cell,
        };
        let (_, plan) = inject_missing(&reports, &opts).unwrap();
        assert_eq!(plan.cells.len(), 30); // half of 3 * 10 * 2
        assert!(plan.cells.iter().all(|c| c.timestamp >= 10));
    }

    #[test]
    fn vector_unit_masks_whole_reports() {
        let reports = grid_reports(2, 50, 3);
        let opts = InjectionOptions {
            rate: 10.0,
            seed: 1,
            warmup: 0,
            unit: MaskUnit::Vector,
        };
        let (masked, plan) = inject_missing(&reports, &opts).unwrap();
        assert_eq!(plan.cells.len(), 30);
        let fully: usize = masked
            .iter()
            .filter(|r| r.missing_dims().count() == 3)
            .count();
        assert_eq!(fully, 10);
    }

    #[test]
    fn plan_export_format() {
        let reports = grid_reports(1, 3, 1);
        let opts = InjectionOptions {
            rate: 50.0,
            seed: 0,
            warmup: 1,
            unit: MaskUnit::Cell,
        };
        let (_, plan) = inject_missing(&reports, &opts).unwrap();
        let mut buf = Vec::new();
        plan.export(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "device,timestamp,dimension,truth");
        assert_eq!(lines.len(), 2);
    }

    #[test]
    fn synth_without_noise_is_identical_across_devices() {
        let trace = synth_trace(&SynthParams::new(4, 50, 3, 0.0, 9)).unwrap();
        assert_eq!(trace.reports.len(), 200);
        for t in 0..50 {
            let at_t: Vec<&DeviceReport> =
                trace.reports.iter().filter(|r| r.timestamp == t).collect();
            assert_eq!(at_t.len(), 4);
            assert!(at_t.iter().all(|r| r.raw_values() == at_t[0].raw_values()));
        }
    }

    #[test]
    fn synth_noise_level_matches() {
        let params = SynthParams::new(3, 1000, 2, 0.1, 5);
        let trace = synth_trace(&params).unwrap();
        let latent = synth_latent(&params).unwrap();
        for device in 0..3 {
            let resid: Vec<f64> = trace
                .reports
                .iter()
                .filter(|r| r.device_id == device)
                .flat_map(|r| (0..2).map(move |d| (r, d)))
                .map(|(r, d)| r.value(d).unwrap() - latent[r.timestamp as usize][d])
                .collect();
            let mean = resid.iter().sum::<f64>() / resid.len() as f64;
            let sd = (resid.iter().map(|x| (x - mean).powi(2)).sum::<f64>()
                / (resid.len() - 1) as f64)
                .sqrt();
            assert!((sd - 0.1).abs() < 0.02, "device {device}: {sd}");
        }
    }

    #[test]
    fn synth_rejects_bad_params() {
        assert!(synth_trace(&SynthParams::new(0, 10, 1, 0.0, 0)).is_err());
        assert!(synth_trace(&SynthParams::new(1, 10, 1, -0.5, 0)).is_err());
        let spread = SynthParams {
            device_spread: -1.0,
            ..SynthParams::new(1, 10, 1, 0.0, 0)
        };
        assert!(synth_trace(&spread).is_err());
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn device_spread_adds_a_constant_offset() {
        let params = SynthParams {
            device_spread: 2.0,
            ..SynthParams::new(3, 40, 2, 0.0, 6)
        };
        let trace = synth_trace(&params).unwrap();
        let latent = synth_latent(&params).unwrap();
        let mut offsets = Vec::new();
        for device in 0..3 {
            for d in 0..2 {
                let diffs: Vec<f64> = trace
                    .reports
                    .iter()
                    .filter(|r| r.device_id == device)
                    .map(|r| r.value(d).unwrap() - latent[r.timestamp as usize][d])
                    .collect();
                assert!(diffs.iter().all(|x| (x - diffs[0]).abs() < 1e-12));
                offsets.push(diffs[0]);
            }
        }
        assert!(offsets.iter().any(|o| o.abs() > 0.1), "{offsets:?}");
        // without spread the draws are unchanged
        let plain = synth_trace(&SynthParams::new(3, 40, 2, 0.05, 6)).unwrap();
        let zero = SynthParams {
            device_spread: 0.0,
            ..SynthParams::new(3, 40, 2, 0.05, 6)
        };
        assert_eq!(synth_trace(&zero).unwrap(), plain);
    }

    #[test]
    fn subset_checks_bounds() {
        let trace = synth_trace(&SynthParams::new(4, 5, 3, 0.1, 1)).unwrap();
        let sub = trace.subset(2, 2).unwrap();
        assert_eq!(sub.reports.len(), 10);
        assert!(sub.reports.iter().all(|r| r.dims() == 2));
        assert!(trace.subset(5, 2).is_err());
    }

    proptest! {
        #[test]
        fn write_then_load_is_identity(seed in 0u64..500, rate in 0.0f64..60.0) {
            let trace = synth_trace(&SynthParams::new(3, 12, 3, 0.3, seed)).unwrap();
            let (masked, _) = inject_missing(&trace.reports, &InjectionOptions {
                rate, seed, warmup: 0, unit: MaskUnit::Cell,
            }).unwrap();
            let trace = Trace { reports: masked, ..trace };
            let mut buf = Vec::new();
            write_trace(&trace, &mut buf).unwrap();
            let back = parse_trace(buf.as_slice(), &trace.canonical_schema()).unwrap();
            prop_assert_eq!(back.reports.len(), trace.reports.len());
            for (a, b) in back.reports.iter().zip(&trace.reports) {
                prop_assert_eq!((a.device_id, a.timestamp), (b.device_id, b.timestamp));
                prop_assert_eq!(a.missing_mask(), b.missing_mask());
                for d in 0..a.dims() {
                    prop_assert_eq!(a.value(d), b.value(d));
                }
            }
            prop_assert_eq!(back.device_labels, trace.device_labels);
        }

        #[test]
        fn injection_only_masks_and_truth_restores(seed in 0u64..1000, rate in 0.0f64..99.0, warmup in 0usize..4) {
            let mut reports = grid_reports(3, 8, 3);
            reports[4].mask(1); // pre-existing gap
            let opts = InjectionOptions { rate, seed, warmup, unit: MaskUnit::Cell };
            let (masked, plan) = inject_missing(&reports, &opts).unwrap();
            let eligible = reports.iter().filter(|r| r.timestamp as usize >= warmup)
                .map(|r| r.dims() - r.missing_dims().count()).sum::<usize>();
            prop_assert_eq!(plan.cells.len(), (rate / 100.0 * eligible as f64).round() as usize);
            prop_assert!(plan.cells.iter().all(|c| !(c.device == reports[4].device_id && c.timestamp == reports[4].timestamp && c.dimension == 1)));
            let mut restored = masked.clone();
            for (orig, m) in reports.iter().zip(&masked) {
                for d in 0..orig.dims() {
                    if !m.is_missing(d) {
                        prop_assert_eq!(m.value(d), orig.value(d));
                    }
                }
            }
            for c in &plan.cells {
                let r = restored.iter_mut().find(|r| r.device_id == c.device && r.timestamp == c.timestamp).unwrap();
                r.fill(c.dimension, c.truth);
            }
            prop_assert_eq!(restored, reports);
        }
    }
}
