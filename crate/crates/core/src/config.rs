//! Run configuration in TOML.
//!
//! ```toml
//! [model]
//! class = "1"                  # 1-4 or "joint"
//! response = "pm10_max"
//! covariates = ["altitude", "precipitation"]
//!
//! [joint]
//! shared = ["altitude", "precipitation"]
//! nonshared = ["intercept", "temperature"]
//!
//! [mesh]
//! nx = 12
//! ny = 12
//! padding = 0.15
//!
//! [priors]
//! range_r0 = 0.05
//!
//! [start]
//! a = 0.7
//!
//! [fixed]
//! beta2 = 1.0
//!
//! [split]
//! min_valid = 0.6
//! train_years = [2017, 2018, 2019, 2020]
//! validation_years = [2021]
//! ```
//!
//! Unknown keys are rejected with the nearest valid key.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{MeshConfig, PrepareOptions, SimulationConfig, COVARIATES, RESPONSE_MAX};
use crate::error::{Error, Result};
use crate::excursion::Direction;
use crate::inference::FitOptions;
use crate::joint::{build_joint_spec, SharingLink};
use crate::model::{ModelClass, ModelSpec, PriorConfig, INTERCEPT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub class: String,
    pub response: String,
    pub covariates: Vec<String>,
    pub label: Option<String>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            class: "1".into(),
            response: RESPONSE_MAX.into(),
            covariates: COVARIATES.iter().map(|s| s.to_string()).collect(),
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointSection {
    pub shared: Vec<String>,
    pub nonshared: Vec<String>,
}

impl Default for JointSection {
    fn default() -> Self {
        Self {
            shared: vec!["altitude".into(), "precipitation".into()],
            nonshared: vec![
                INTERCEPT.into(),
                "longitude".into(),
                "latitude".into(),
                "temperature".into(),
                "vapour_pressure".into(),
                "population_density".into(),
            ],
        }
    }
}

/// Overrides of [`PriorConfig`]; unset keys keep the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorsSection {
    pub likelihood_sd_u: Option<f64>,
    pub likelihood_sd_alpha: Option<f64>,
    pub ar_sd_u: Option<f64>,
    pub ar_sd_alpha: Option<f64>,
    pub range_r0: Option<f64>,
    pub range_alpha: Option<f64>,
    pub field_sd_u: Option<f64>,
    pub field_sd_alpha: Option<f64>,
    pub cor_p0: Option<f64>,
    pub coefficient_sd: Option<f64>,
    pub shape_mean: Option<f64>,
    pub shape_sd: Option<f64>,
    pub shape_bound: Option<f64>,
    pub sharing_sd: Option<f64>,
}

impl PriorsSection {
    pub fn resolve(&self) -> PriorConfig {
        let d = PriorConfig::default();
        PriorConfig {
            likelihood_sd: (
                self.likelihood_sd_u.unwrap_or(d.likelihood_sd.0),
                self.likelihood_sd_alpha.unwrap_or(d.likelihood_sd.1),
            ),
            ar_sd: (self.ar_sd_u.unwrap_or(d.ar_sd.0), self.ar_sd_alpha.unwrap_or(d.ar_sd.1)),
            range: (self.range_r0.or(d.range.0), self.range_alpha.unwrap_or(d.range.1)),
            field_sd: (self.field_sd_u.unwrap_or(d.field_sd.0), self.field_sd_alpha.unwrap_or(d.field_sd.1)),
            cor_p0: self.cor_p0.unwrap_or(d.cor_p0),
            coefficient_sd: self.coefficient_sd.unwrap_or(d.coefficient_sd),
            shape: (
                self.shape_mean.unwrap_or(d.shape.0),
                self.shape_sd.unwrap_or(d.shape.1),
                self.shape_bound.unwrap_or(d.shape.2),
            ),
            sharing_sd: self.sharing_sd.unwrap_or(d.sharing_sd),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub min_valid: f64,
    pub train_years: Vec<i32>,
    pub validation_years: Vec<i32>,
}

impl Default for SplitSection {
    fn default() -> Self {
        let d = PrepareOptions::default();
        Self { min_valid: d.min_valid, train_years: d.train_years, validation_years: d.validation_years }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub grid_step: f64,
    pub drop_below: f64,
    pub max_full_grid_dim: usize,
    pub max_internal_sd: f64,
    pub max_evals: usize,
}

impl Default for FitSection {
    fn default() -> Self {
        let d = FitOptions::default();
        Self {
            grid_step: d.grid_step,
            drop_below: d.drop_below,
            max_full_grid_dim: d.max_full_grid_dim,
            max_internal_sd: d.max_internal_sd,
            max_evals: d.optimizer.max_evals,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExcursionSection {
    pub samples: usize,
    /// Response-scale thresholds (μg/m³).
    pub thresholds: Vec<f64>,
    /// `+` or `-`.
    pub direction: String,
    pub mix_grid: bool,
    /// Regular prediction grid over the station bounding box.
    pub grid_nx: usize,
    pub grid_ny: usize,
    /// Map year; defaults to the last training year.
    pub year: Option<i32>,
    pub include_stations: bool,
}

impl Default for ExcursionSection {
    fn default() -> Self {
        Self {
            samples: 10_000,
            thresholds: vec![50.0, 100.0],
            direction: "+".into(),
            mix_grid: false,
            grid_nx: 20,
            grid_ny: 20,
            year: None,
            include_stations: true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelSection,
    pub joint: JointSection,
    pub mesh: MeshConfig,
    pub priors: PriorsSection,
    /// Natural-scale starting values by hyperparameter name.
    pub start: BTreeMap<String, f64>,
    /// Hyperparameters held fixed at the given natural-scale values.
    pub fixed: BTreeMap<String, f64>,
    pub split: SplitSection,
    pub fit: FitSection,
    pub excursion: ExcursionSection,
    pub simulate: SimulationConfig,
}

enum Schema {
    Leaf,
    Table(&'static [(&'static str, Schema)]),
    /// Table with user-chosen keys.
    Free,
}

const MESH: &[(&str, Schema)] = &[("nx", Schema::Leaf), ("ny", Schema::Leaf), ("padding", Schema::Leaf)];

const SCHEMA: &[(&str, Schema)] = &[
    (
        "model",
        Schema::Table(&[
            ("class", Schema::Leaf),
            ("response", Schema::Leaf),
            ("covariates", Schema::Leaf),
            ("label", Schema::Leaf),
        ]),
    ),
    ("joint", Schema::Table(&[("shared", Schema::Leaf), ("nonshared", Schema::Leaf)])),
    ("mesh", Schema::Table(MESH)),
    (
        "priors",
        Schema::Table(&[
            ("likelihood_sd_u", Schema::Leaf),
            ("likelihood_sd_alpha", Schema::Leaf),
            ("ar_sd_u", Schema::Leaf),
            ("ar_sd_alpha", Schema::Leaf),
            ("range_r0", Schema::Leaf),
            ("range_alpha", Schema::Leaf),
            ("field_sd_u", Schema::Leaf),
            ("field_sd_alpha", Schema::Leaf),
            ("cor_p0", Schema::Leaf),
            ("coefficient_sd", Schema::Leaf),
            ("shape_mean", Schema::Leaf),
            ("shape_sd", Schema::Leaf),
            ("shape_bound", Schema::Leaf),
            ("sharing_sd", Schema::Leaf),
        ]),
    ),
    ("start", Schema::Free),
    ("fixed", Schema::Free),
    (
        "split",
        Schema::Table(&[
            ("min_valid", Schema::Leaf),
            ("train_years", Schema::Leaf),
            ("validation_years", Schema::Leaf),
        ]),
    ),
    (
        "fit",
        Schema::Table(&[
            ("grid_step", Schema::Leaf),
            ("drop_below", Schema::Leaf),
            ("max_full_grid_dim", Schema::Leaf),
            ("max_internal_sd", Schema::Leaf),
            ("max_evals", Schema::Leaf),
        ]),
    ),
    (
        "excursion",
        Schema::Table(&[
            ("samples", Schema::Leaf),
            ("thresholds", Schema::Leaf),
            ("direction", Schema::Leaf),
            ("mix_grid", Schema::Leaf),
            ("grid_nx", Schema::Leaf),
            ("grid_ny", Schema::Leaf),
            ("year", Schema::Leaf),
            ("include_stations", Schema::Leaf),
        ]),
    ),
    (
        "simulate",
        Schema::Table(&[
            ("model", Schema::Leaf),
            ("stations", Schema::Leaf),
            ("first_year", Schema::Leaf),
            ("train_years", Schema::Leaf),
            ("validation_years", Schema::Leaf),
            ("domain", Schema::Leaf),
            ("mesh", Schema::Table(MESH)),
            ("a", Schema::Leaf),
            ("range_fraction", Schema::Leaf),
            ("sigma", Schema::Leaf),
            ("ar_precision", Schema::Leaf),
            ("scale", Schema::Leaf),
            ("xi", Schema::Leaf),
            ("mean_sd", Schema::Leaf),
            ("coefficients", Schema::Free),
            ("mean_coefficients", Schema::Free),
            ("shared", Schema::Free),
            ("beta1", Schema::Free),
            ("beta2", Schema::Leaf),
            ("invalid_fraction", Schema::Leaf),
            ("min_valid", Schema::Leaf),
        ]),
    ),
];

fn all_paths(schema: &[(&str, Schema)], prefix: &str, out: &mut Vec<String>) {
    for (k, s) in schema {
        let p = if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        out.push(p.clone());
        if let Schema::Table(inner) = s {
            all_paths(inner, &p, out);
        }
    }
}

fn check_keys(table: &toml::Table, schema: &[(&str, Schema)], prefix: &str) -> Result<()> {
    for (key, value) in table {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match schema.iter().find(|(k, _)| k == key) {
            None => {
                let mut candidates = Vec::new();
                all_paths(SCHEMA, "", &mut candidates);
                let nearest = candidates
                    .iter()
                    .min_by_key(|c| (strsim::levenshtein(c, &path), c.len()))
                    .expect("schema is not empty");
                return Err(Error::Config(format!("unknown key `{path}`; did you mean `{nearest}`?")));
            }
            Some((_, Schema::Table(inner))) => {
                let t = value.as_table().ok_or_else(|| Error::Config(format!("`{path}` must be a table")))?;
                check_keys(t, inner, &path)?;
            }
            Some((_, Schema::Free)) => {
                if !value.is_table() {
                    return Err(Error::Config(format!("`{path}` must be a table")));
                }
            }
            Some((_, Schema::Leaf)) => {}
        }
    }
    Ok(())
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        check_keys(&table, SCHEMA, "")?;
        let mut cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let sim = table.get("simulate").and_then(|v| v.as_table());
        if cfg.simulate.is_joint() && !sim.is_some_and(|s| s.contains_key("coefficients")) {
            cfg.simulate.coefficients = SimulationConfig::joint_default().coefficients;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn is_joint(&self) -> bool {
        self.model.class.trim().eq_ignore_ascii_case("joint")
    }

    pub fn check(&self) -> Result<()> {
        if self.is_joint() {
            SharingLink { shared: self.joint.shared.clone(), nonshared: self.joint.nonshared.clone() }.check()?;
        } else {
            ModelClass::parse(&self.model.class)?;
        }
        for c in self.model_covariates() {
            if !COVARIATES.contains(&c.as_str()) {
                return Err(Error::Config(format!("unknown covariate `{c}`; known: {}", COVARIATES.join(", "))));
            }
        }
        Direction::parse(&self.excursion.direction)?;
        self.simulate.check()?;
        if self.excursion.grid_nx < 1 || self.excursion.grid_ny < 1 {
            return Err(Error::Config("excursion grid needs at least one cell per axis".into()));
        }
        Ok(())
    }

    /// Covariates the configured model uses, intercept excluded.
    pub fn model_covariates(&self) -> Vec<String> {
        let mut out: Vec<String> = if self.is_joint() {
            self.joint.shared.iter().chain(&self.joint.nonshared).cloned().collect()
        } else {
            self.model.covariates.clone()
        };
        out.retain(|c| c != INTERCEPT);
        out.sort();
        out.dedup();
        out
    }

    pub fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions {
            min_valid: self.split.min_valid,
            train_years: self.split.train_years.clone(),
            validation_years: self.split.validation_years.clone(),
            covariates: self.model_covariates(),
        }
    }

    pub fn fit_options(&self, threads: usize) -> FitOptions {
        let mut o = FitOptions::default();
        o.grid_step = self.fit.grid_step;
        o.drop_below = self.fit.drop_below;
        o.max_full_grid_dim = self.fit.max_full_grid_dim;
        o.max_internal_sd = self.fit.max_internal_sd;
        o.optimizer.max_evals = self.fit.max_evals;
        o.threads = threads.max(1);
        o
    }

    /// Model spec with starting values and fixed hyperparameters applied.
    pub fn model_spec(&self, diameter: f64) -> Result<ModelSpec> {
        let priors = self.priors.resolve();
        let mut spec = if self.is_joint() {
            let link = SharingLink { shared: self.joint.shared.clone(), nonshared: self.joint.nonshared.clone() };
            build_joint_spec(&link, &priors, diameter)?
        } else {
            let class = ModelClass::parse(&self.model.class)?;
            let covs: Vec<&str> =
                self.model.covariates.iter().map(String::as_str).filter(|c| *c != INTERCEPT).collect();
            ModelSpec::single(class, &self.model.response, &covs, &priors, diameter)?
        };
        if let Some(l) = &self.model.label {
            spec.label = l.clone();
        }
        for (k, v) in &self.start {
            spec.set_start(k, *v)?;
        }
        for (k, v) in &self.fixed {
            spec.fix(k, *v)?;
        }
        Ok(spec)
    }
}
