//! Experiment configuration and the parameter grid, with their text forms.
//!
//! A single experiment file and a grid file share the same keys; in a grid
//! `model`, `V`, `N` and `M` may hold comma-separated lists and the grid is
//! their cartesian product.

use std::fmt;

use crate::correlation::MdMode;
use crate::error::{ImputeError, Result};
use crate::imputation::{BlendParams, Model, SigmaMode, WgmWeighting};
use crate::ingestion::MaskUnit;
use crate::kv::{parse_bool, parse_list, parse_num, KvDoc};

/// What re-enters the window after a masked cell has been scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeedMode {
    #[default]
    Truth,
    Imputed,
}

macro_rules! text_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl std::str::FromStr for $ty {
            type Err = ImputeError;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($variant),)+
                    other => Err(ImputeError::Config(format!(concat!("unknown ", $what, " '{}'"), other))),
                }
            }
        }
    };
}

text_enum!(FeedMode, "feed mode", FeedMode::Truth => "truth", FeedMode::Imputed => "imputed");
text_enum!(SigmaMode, "sigma mode", SigmaMode::Absolute => "absolute", SigmaMode::Relative => "relative");
text_enum!(WgmWeighting, "wgm weighting", WgmWeighting::Inverse => "inverse", WgmWeighting::Literal => "literal");
text_enum!(MdMode, "md mode", MdMode::Mean => "mean", MdMode::TickSum => "tick_sum");
text_enum!(MaskUnit, "mask unit", MaskUnit::Cell => "cell", MaskUnit::Vector => "vector");

/// One cell of the experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: Model,
    /// Missing-value percentage V.
    pub v: f64,
    /// Window size W.
    pub w: usize,
    pub k: usize,
    /// Devices N taken from the trace.
    pub n: usize,
    /// Dimensions M taken from the trace.
    pub m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub order: usize,
    pub sigma_mode: SigmaMode,
    pub wgm_weighting: WgmWeighting,
    pub md_mode: MdMode,
    pub cs_clamp: bool,
    pub feed: FeedMode,
    pub unit: MaskUnit,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let blend = BlendParams::default();
        Self {
            model: Model::Pbm,
            v: 5.0,
            w: 10,
            k: blend.k,
            n: 5,
            m: 4,
            alpha: blend.alpha,
            beta: blend.beta,
            order: blend.order,
            sigma_mode: blend.sigma_mode,
            wgm_weighting: blend.wgm_weighting,
            md_mode: blend.md_mode,
            cs_clamp: blend.cs_clamp,
            feed: FeedMode::Truth,
            unit: MaskUnit::Cell,
            seeds: vec![1, 2, 3],
        }
    }
}

impl ExperimentConfig {
    pub fn blend_params(&self) -> BlendParams {
        BlendParams {
            alpha: self.alpha,
            beta: self.beta,
            k: self.k,
            order: self.order,
            sigma_mode: self.sigma_mode,
            wgm_weighting: self.wgm_weighting,
            md_mode: self.md_mode,
            cs_clamp: self.cs_clamp,
            ..BlendParams::default()
        }
    }

    /// Short label naming the grid cell in diagnostics.
    pub fn label(&self) -> String {
        format!("{} V={} N={} M={}", self.model, self.v, self.n, self.m)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| {
            Err(ImputeError::Config(format!(
                "cell [{}]: {msg}",
                self.label()
            )))
        };
        if !(0.0..100.0).contains(&self.v) {
            return fail(format!("V must lie in [0, 100), got {}", self.v));
        }
        if self.w < 2 {
            return fail(format!("W must be at least 2, got {}", self.w));
        }
        if self.k == 0 || self.k >= self.n {
            return fail(format!(
                "need 1 <= k < N, got k = {} and N = {}",
                self.k, self.n
            ));
        }
        if self.m == 0 {
            return fail("M must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return fail("at least one seed is required".into());
        }
        self.blend_params()
            .validate()
            .or_else(|e| fail(e.to_string()))
    }

    /// Keys absent from `doc` keep their [`Default`] values.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        let cells = GridSpec::from(&ExperimentConfig::default())
            .overlay(doc)?
            .expand();
        match cells.len() {
            1 => {
                let cell = cells.into_iter().next().expect("one cell");
                cell.validate()?;
                Ok(cell)
            }
            n => Err(ImputeError::Config(format!(
                "an experiment config must describe one cell, this one expands to {n}"
            ))),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvDoc::parse(text)?)
    }

    pub fn to_kv(&self) -> KvDoc {
        GridSpec::from(self).to_kv()
    }
}

/// Cartesian experiment grid; defaults reproduce the published parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub models: Vec<Model>,
    pub vs: Vec<f64>,
    pub ns: Vec<usize>,
    pub ms: Vec<usize>,
    /// Everything but model, V, N and M is shared by all cells.
    pub base: ExperimentConfig,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            models: Model::ALL.to_vec(),
            vs: vec![1.0, 5.0, 10.0],
            ns: vec![5, 7, 15],
            ms: vec![4, 9],
            base: ExperimentConfig {
                w: 10,
                k: 4,
                alpha: 20.0,
                beta: 2.0,
                ..ExperimentConfig::default()
            },
        }
    }
}

impl From<&ExperimentConfig> for GridSpec {
    fn from(cfg: &ExperimentConfig) -> Self {
        Self {
            models: vec![cfg.model],
            vs: vec![cfg.v],
            ns: vec![cfg.n],
            ms: vec![cfg.m],
            base: cfg.clone(),
        }
    }
}

fn num_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    let items = parse_list(value);
    if items.is_empty() {
        return Err(ImputeError::Config(format!("'{key}' is empty")));
    }
    items.iter().map(|s| parse_num(key, s)).collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(", ")
}

impl GridSpec {
    /// Cells ordered by N, then M, then model, then V.
    pub fn expand(&self) -> Vec<ExperimentConfig> {
        let mut cells = Vec::new();
        for &n in &self.ns {
            for &m in &self.ms {
                for &model in &self.models {
                    for &v in &self.vs {
                        cells.push(ExperimentConfig {
                            model,
                            v,
                            n,
                            m,
                            ..self.base.clone()
                        });
                    }
                }
            }
        }
        cells
    }

    /// Keys absent from `doc` keep the published defaults.
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        GridSpec::default().overlay(doc)
    }

    fn overlay(mut self, doc: &KvDoc) -> Result<Self> {
        const KNOWN: [&str; 16] = [
            "model",
            "V",
            "W",
            "k",
            "N",
            "M",
            "alpha",
            "beta",
            "order",
            "sigma_mode",
            "wgm_weighting",
            "md_mode",
            "cs_clamp",
            "feed",
            "unit",
            "seeds",
        ];
        if let Some(unknown) = doc.keys().find(|k| !KNOWN.contains(k)) {
            return Err(ImputeError::Config(format!("unknown key '{unknown}'")));
        }
        let grid = &mut self;
        let base = &mut grid.base;
        if let Some(v) = doc.get("model") {
            grid.models = parse_list(v)
                .iter()
                .map(|m| m.parse())
                .collect::<Result<_>>()?;
            if grid.models.is_empty() {
                return Err(ImputeError::Config("'model' is empty".into()));
            }
        }
        if let Some(v) = doc.get("V") {
            grid.vs = num_list("V", v)?;
        }
        if let Some(v) = doc.get("N") {
            grid.ns = num_list("N", v)?;
        }
        if let Some(v) = doc.get("M") {
            grid.ms = num_list("M", v)?;
        }
        if let Some(v) = doc.get("W") {
            base.w = parse_num("W", v)?;
        }
        if let Some(v) = doc.get("k") {
            base.k = parse_num("k", v)?;
        }
        if let Some(v) = doc.get("alpha") {
            base.alpha = parse_num("alpha", v)?;
        }
        if let Some(v) = doc.get("beta") {
            base.beta = parse_num("beta", v)?;
        }
        if let Some(v) = doc.get("order") {
            base.order = parse_num("order", v)?;
        }
        if let Some(v) = doc.get("sigma_mode") {
            base.sigma_mode = v.parse()?;
        }
        if let Some(v) = doc.get("wgm_weighting") {
            base.wgm_weighting = v.parse()?;
        }
        if let Some(v) = doc.get("md_mode") {
            base.md_mode = v.parse()?;
        }
        if let Some(v) = doc.get("cs_clamp") {
            base.cs_clamp = parse_bool("cs_clamp", v)?;
        }
        if let Some(v) = doc.get("feed") {
            base.feed = v.parse()?;
        }
        if let Some(v) = doc.get("unit") {
            base.unit = v.parse()?;
        }
        if let Some(v) = doc.get("seeds") {
            base.seeds = num_list("seeds", v)?;
        }
        Ok(self)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KvDoc::parse(text)?)
    }

    pub fn to_kv(&self) -> KvDoc {
        let b = &self.base;
        let mut doc = KvDoc::default();
        doc.push("model", join(&self.models));
        doc.push("V", join(&self.vs));
        doc.push("W", b.w);
        doc.push("k", b.k);
        doc.push("N", join(&self.ns));
        doc.push("M", join(&self.ms));
        doc.push("alpha", b.alpha);
        doc.push("beta", b.beta);
        doc.push("order", b.order);
        doc.push("sigma_mode", b.sigma_mode);
        doc.push("wgm_weighting", b.wgm_weighting);
        doc.push("md_mode", b.md_mode);
        doc.push("cs_clamp", if b.cs_clamp { "on" } else { "off" });
        doc.push("feed", b.feed);
        doc.push("unit", b.unit);
        doc.push("seeds", join(&b.seeds));
        doc
    }
}
