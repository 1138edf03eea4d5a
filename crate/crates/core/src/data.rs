//! Observation tables, preprocessing and synthetic data.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::assemble_fem;
use crate::likelihoods::Family;
use crate::mesh::{BoundingBox, TriangularMesh};
use crate::model::{BlockData, ModelData, ModelSpec, INTERCEPT};
use crate::spde::{sample_gmrf_stream, spde_precision, MaternParams};

pub const RESPONSE_MEAN: &str = "pm10_mean";
pub const RESPONSE_MAX: &str = "pm10_max";

/// Column order of the observation CSV.
pub const COLUMNS: [&str; 12] = [
    "station_id",
    "lon",
    "lat",
    "altitude",
    "year",
    "pm10_mean",
    "pm10_max",
    "temperature",
    "precipitation",
    "vapour_pressure",
    "population_density",
    "valid_fraction",
];

/// Covariates a model may use. `longitude` and `latitude` are the
/// station coordinates.
pub const COVARIATES: [&str; 7] =
    ["longitude", "latitude", "altitude", "temperature", "precipitation", "vapour_pressure", "population_density"];

#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub station_id: String,
    pub lon: f64,
    pub lat: f64,
    pub altitude: Option<f64>,
    pub year: i32,
    pub pm10_mean: Option<f64>,
    pub pm10_max: Option<f64>,
    pub temperature: Option<f64>,
    pub precipitation: Option<f64>,
    pub vapour_pressure: Option<f64>,
    pub population_density: Option<f64>,
    pub valid_fraction: f64,
}

impl ObservationRow {
    pub fn covariate(&self, name: &str) -> Option<f64> {
        match name {
            "longitude" => Some(self.lon),
            "latitude" => Some(self.lat),
            "altitude" => self.altitude,
            "temperature" => self.temperature,
            "precipitation" => self.precipitation,
            "vapour_pressure" => self.vapour_pressure,
            "population_density" => self.population_density,
            _ => None,
        }
    }

    pub fn response(&self, name: &str) -> Option<f64> {
        match name {
            RESPONSE_MEAN => self.pm10_mean,
            RESPONSE_MAX => self.pm10_max,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowError {
    /// 1-based line in the file (the header is line 1).
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObservationTable {
    pub rows: Vec<ObservationRow>,
    pub rejected: Vec<RowError>,
}

fn parse_opt(field: &str, col: &str) -> std::result::Result<Option<f64>, String> {
    let f = field.trim();
    if f.is_empty() || f.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    f.parse::<f64>().map(Some).map_err(|_| format!("column `{col}`: `{f}` is not a number"))
}

fn parse_req(field: &str, col: &str) -> std::result::Result<f64, String> {
    parse_opt(field, col)?.ok_or_else(|| format!("column `{col}` is empty"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl ObservationTable {
    pub fn read_from<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
        let mut idx = BTreeMap::new();
        for col in COLUMNS {
            let pos = header
                .iter()
                .position(|h| h == col)
                .ok_or_else(|| Error::Parse { line: 1, message: format!("missing mandatory column `{col}`") })?;
            idx.insert(col, pos);
        }
        let mut table = ObservationTable::default();
        let mut seen = BTreeSet::new();
        for (k, rec) in rdr.records().enumerate() {
            let line = k + 2;
            let rec = match rec {
                Ok(r) => r,
                Err(e) => {
                    table.rejected.push(RowError { line, message: e.to_string() });
                    continue;
                }
            };
            let get = |c: &str| rec.get(idx[c]).unwrap_or("");
            let parsed = (|| -> std::result::Result<ObservationRow, String> {
                let station_id = get("station_id").to_string();
                if station_id.is_empty() {
                    return Err("empty station_id".into());
                }
                let year_s = get("year");
                let year = year_s.parse::<i32>().map_err(|_| format!("column `year`: `{year_s}` is not an integer"))?;
                let row = ObservationRow {
                    station_id,
                    lon: parse_req(get("lon"), "lon")?,
                    lat: parse_req(get("lat"), "lat")?,
                    altitude: parse_opt(get("altitude"), "altitude")?,
                    year,
                    pm10_mean: parse_opt(get("pm10_mean"), "pm10_mean")?,
                    pm10_max: parse_opt(get("pm10_max"), "pm10_max")?,
                    temperature: parse_opt(get("temperature"), "temperature")?,
                    precipitation: parse_opt(get("precipitation"), "precipitation")?,
                    vapour_pressure: parse_opt(get("vapour_pressure"), "vapour_pressure")?,
                    population_density: parse_opt(get("population_density"), "population_density")?,
                    valid_fraction: parse_req(get("valid_fraction"), "valid_fraction")?,
                };
                for (col, v) in [("pm10_mean", row.pm10_mean), ("pm10_max", row.pm10_max)] {
                    if let Some(v) = v {
                        if !(v > 0.0) || !v.is_finite() {
                            return Err(format!("`{col}` must be positive, got {v}"));
                        }
                    }
                }
                if !(0.0..=1.0).contains(&row.valid_fraction) {
                    return Err(format!("`valid_fraction` must lie in [0, 1], got {}", row.valid_fraction));
                }
                if !row.lon.is_finite() || !row.lat.is_finite() {
                    return Err("non-finite coordinates".into());
                }
                Ok(row)
            })();
            match parsed {
                Ok(row) => {
                    if !seen.insert((row.station_id.clone(), row.year)) {
                        table.rejected.push(RowError {
                            line,
                            message: format!("duplicate station-year ({}, {})", row.station_id, row.year),
                        });
                    } else {
                        table.rows.push(row);
                    }
                }
                Err(message) => table.rejected.push(RowError { line, message }),
            }
        }
        for r in &table.rejected {
            log::warn!("rejected line {}: {}", r.line, r.message);
        }
        Ok(table)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.as_ref().display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }

    pub fn write_to<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let csv_err = |e: csv::Error| Error::Data(format!("writing CSV: {e}"));
        w.write_record(COLUMNS).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.station_id.clone(),
                r.lon.to_string(),
                r.lat.to_string(),
                fmt_opt(r.altitude),
                r.year.to_string(),
                fmt_opt(r.pm10_mean),
                fmt_opt(r.pm10_max),
                fmt_opt(r.temperature),
                fmt_opt(r.precipitation),
                fmt_opt(r.vapour_pressure),
                fmt_opt(r.population_density),
                r.valid_fraction.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref())?;
        self.write_to(std::io::BufWriter::new(f))
    }
}

/// Column means and sds computed on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardizer {
    /// Sample mean and sd (n − 1 denominator) of each column over `rows`.
    pub fn fit(names: &[String], rows: &[&ObservationRow]) -> Result<Self> {
        let mut means = Vec::new();
        let mut sds = Vec::new();
        for name in names {
            let vals: Vec<f64> = rows
                .iter()
                .map(|r| r.covariate(name).ok_or_else(|| Error::Data(format!("missing `{name}` on a training row"))))
                .collect::<Result<_>>()?;
            if vals.len() < 2 {
                return Err(Error::Data(format!("cannot standardize `{name}` on fewer than two training rows")));
            }
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if !(sd > 1e-12 * m.abs().max(1.0)) {
                return Err(Error::Data(format!(
                    "covariate `{name}` is constant on the training rows; cannot standardize"
                )));
            }
            means.push(m);
            sds.push(sd);
        }
        Ok(Self { names: names.to_vec(), means, sds })
    }

    pub fn apply(&self, name: &str, value: f64) -> Option<f64> {
        let k = self.names.iter().position(|n| n == name)?;
        Some((value - self.means[k]) / self.sds[k])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareOptions {
    pub min_valid: f64,
    pub train_years: Vec<i32>,
    pub validation_years: Vec<i32>,
    pub covariates: Vec<String>,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            min_valid: 0.6,
            train_years: (2017..=2020).collect(),
            validation_years: vec![2021],
            covariates: COVARIATES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedRow {
    pub station_id: String,
    pub location: [f64; 2],
    pub year: i32,
    /// Index counted from the first training year.
    pub time: usize,
    /// Natural-log responses.
    pub y_mean: Option<f64>,
    pub y_max: Option<f64>,
    /// Standardized covariates.
    pub covariates: BTreeMap<String, f64>,
    pub train: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrepareReport {
    pub low_validity: usize,
    pub missing_covariate: usize,
    pub outside_split: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDataset {
    pub rows: Vec<PreparedRow>,
    pub standardizer: Standardizer,
    pub first_year: i32,
    /// Number of years spanned by the training set.
    pub n_times: usize,
    pub report: PrepareReport,
}

/// Rows passing the validity and split filters, with the training subset.
fn filter_rows<'a>(
    table: &'a ObservationTable,
    opts: &PrepareOptions,
    report: &mut PrepareReport,
) -> Vec<(&'a ObservationRow, bool)> {
    let mut out = Vec::new();
    for r in &table.rows {
        let train = opts.train_years.contains(&r.year);
        if !train && !opts.validation_years.contains(&r.year) {
            report.outside_split += 1;
            continue;
        }
        if r.valid_fraction < opts.min_valid {
            report.low_validity += 1;
            continue;
        }
        if opts.covariates.iter().any(|c| r.covariate(c).is_none()) {
            report.missing_covariate += 1;
            continue;
        }
        out.push((r, train));
    }
    out
}

fn check_options(opts: &PrepareOptions) -> Result<()> {
    if let Some(y) = opts.train_years.iter().find(|y| opts.validation_years.contains(y)) {
        return Err(Error::Config(format!("year {y} is in both the training and validation sets")));
    }
    if opts.train_years.is_empty() {
        return Err(Error::Config("no training years given".into()));
    }
    if !(0.0..=1.0).contains(&opts.min_valid) {
        return Err(Error::Config(format!("min_valid must lie in [0, 1], got {}", opts.min_valid)));
    }
    for c in &opts.covariates {
        if !COVARIATES.contains(&c.as_str()) {
            return Err(Error::Config(format!("unknown covariate `{c}`; known: {}", COVARIATES.join(", "))));
        }
    }
    Ok(())
}

/// Standardization fitted on the training rows that survive filtering.
pub fn training_standardizer(table: &ObservationTable, opts: &PrepareOptions) -> Result<Standardizer> {
    check_options(opts)?;
    let mut report = PrepareReport::default();
    let kept = filter_rows(table, opts, &mut report);
    let train: Vec<&ObservationRow> = kept.iter().filter(|(_, t)| *t).map(|(r, _)| *r).collect();
    if train.is_empty() {
        return Err(Error::Data("training set is empty after filtering".into()));
    }
    Standardizer::fit(&opts.covariates, &train)
}

pub fn prepare(table: &ObservationTable, opts: &PrepareOptions) -> Result<PreparedDataset> {
    check_options(opts)?;
    let mut report = PrepareReport::default();
    let kept = filter_rows(table, opts, &mut report);
    let train: Vec<&ObservationRow> = kept.iter().filter(|(_, t)| *t).map(|(r, _)| *r).collect();
    if train.is_empty() {
        return Err(Error::Data("training set is empty after filtering".into()));
    }
    let standardizer = Standardizer::fit(&opts.covariates, &train)?;
    let first_year = *opts.train_years.iter().min().expect("non-empty");
    let last_train = *opts.train_years.iter().max().expect("non-empty");
    let n_times = (last_train - first_year + 1) as usize;
    let mut rows = Vec::with_capacity(kept.len());
    for (r, is_train) in kept {
        if r.year < first_year {
            report.outside_split += 1;
            continue;
        }
        let covariates = opts
            .covariates
            .iter()
            .map(|c| (c.clone(), standardizer.apply(c, r.covariate(c).expect("filtered")).expect("fitted")))
            .collect();
        rows.push(PreparedRow {
            station_id: r.station_id.clone(),
            location: [r.lon, r.lat],
            year: r.year,
            time: (r.year - first_year) as usize,
            y_mean: r.pm10_mean.map(f64::ln),
            y_max: r.pm10_max.map(f64::ln),
            covariates,
            train: is_train,
        });
    }
    if report.low_validity > 0 || report.missing_covariate > 0 {
        log::info!(
            "dropped {} station-years below the validity threshold and {} with missing covariates",
            report.low_validity,
            report.missing_covariate
        );
    }
    Ok(PreparedDataset { rows, standardizer, first_year, n_times, report })
}

impl PreparedDataset {
    pub fn train_mask(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.train).collect()
    }

    pub fn validation_mask(&self) -> Vec<bool> {
        self.rows.iter().map(|r| !r.train).collect()
    }

    pub fn bbox(&self) -> Result<BoundingBox<f64>> {
        let pts: Vec<[f64; 2]> = self.rows.iter().map(|r| r.location).collect();
        BoundingBox::of_points(&pts).ok_or_else(|| Error::Data("no observation locations".into()))
    }

    /// Rows with the block's response present, on the training or
    /// validation side, as row indices per block.
    pub fn block_rows(&self, spec: &ModelSpec, train: bool) -> Result<Vec<Vec<usize>>> {
        spec.blocks
            .iter()
            .map(|b| {
                if b.response != RESPONSE_MEAN && b.response != RESPONSE_MAX {
                    return Err(Error::Config(format!(
                        "unknown response `{}` (expected {RESPONSE_MEAN} or {RESPONSE_MAX})",
                        b.response
                    )));
                }
                Ok((0..self.rows.len())
                    .filter(|&i| self.rows[i].train == train && self.response(i, &b.response).is_some())
                    .collect())
            })
            .collect()
    }

    pub fn response(&self, row: usize, name: &str) -> Option<f64> {
        let r = &self.rows[row];
        match name {
            RESPONSE_MEAN => r.y_mean,
            RESPONSE_MAX => r.y_max,
            _ => None,
        }
    }

    /// Training data in the layout expected by the inference engine.
    pub fn model_data(&self, spec: &ModelSpec) -> Result<ModelData> {
        let sets = self.block_rows(spec, true)?;
        let mut blocks = Vec::new();
        for (b, idx) in spec.blocks.iter().zip(sets) {
            let covs: Vec<String> =
                spec.block_covariates(blocks.len()).into_iter().filter(|c| c != INTERCEPT).collect();
            let mut bd = BlockData::default();
            for c in &covs {
                if !self.standardizer.names.contains(c) {
                    return Err(Error::Config(format!("model covariate `{c}` was not prepared")));
                }
                bd.covariates.insert(c.clone(), Vec::with_capacity(idx.len()));
            }
            for &i in &idx {
                let r = &self.rows[i];
                bd.y.push(self.response(i, &b.response).expect("filtered"));
                bd.locations.push(r.location);
                bd.times.push(r.time);
                for c in &covs {
                    bd.covariates.get_mut(c).expect("inserted").push(r.covariates[c]);
                }
            }
            blocks.push(bd);
        }
        Ok(ModelData { blocks, n_times: self.n_times })
    }
}

/// Structured mesh over the padded bounding box of the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MeshConfig {
    pub nx: usize,
    pub ny: usize,
    /// Padding on every side as a fraction of the data bounding-box diagonal.
    pub padding: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { nx: 12, ny: 12, padding: 0.15 }
    }
}

impl MeshConfig {
    pub fn build(&self, bbox: &BoundingBox<f64>) -> Result<TriangularMesh<f64>> {
        if self.nx < 2 || self.ny < 2 {
            return Err(Error::Config(format!("mesh needs at least 2×2 nodes, got {}×{}", self.nx, self.ny)));
        }
        if !(self.padding >= 0.0) {
            return Err(Error::Config(format!("mesh padding must be non-negative, got {}", self.padding)));
        }
        let d = bbox.diagonal();
        let d = if d > 0.0 { d } else { 1.0 };
        TriangularMesh::structured(bbox.padded(self.padding * d), self.nx, self.ny)
    }
}

/// Generative settings for synthetic datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// `1`–`4` or `joint`.
    pub model: String,
    pub stations: usize,
    pub first_year: i32,
    pub train_years: usize,
    pub validation_years: usize,
    /// Station coordinates are uniform on this box (lon, lat).
    pub domain: [f64; 4],
    pub mesh: MeshConfig,
    pub a: f64,
    /// Matérn range as a fraction of the station bounding-box diagonal.
    pub range_fraction: f64,
    pub sigma: f64,
    /// Innovation precision of `f(t)` (Models 2 and 4).
    pub ar_precision: f64,
    /// Gumbel/GEV scale of the log maxima.
    pub scale: f64,
    pub xi: f64,
    /// Gaussian sd of the log means (joint model).
    pub mean_sd: f64,
    /// Coefficients of the maxima block on standardized covariates,
    /// including `intercept`.
    pub coefficients: BTreeMap<String, f64>,
    /// Joint model: non-shared coefficients of the mean block.
    pub mean_coefficients: BTreeMap<String, f64>,
    /// Joint model: shared coefficients β^S.
    pub shared: BTreeMap<String, f64>,
    /// Joint model: sharing scale β₁ per shared covariate.
    pub beta1: BTreeMap<String, f64>,
    pub beta2: f64,
    /// Share of station-years drawn below the validity threshold.
    pub invalid_fraction: f64,
    pub min_valid: f64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            model: "1".into(),
            stations: 100,
            first_year: 2017,
            train_years: 4,
            validation_years: 1,
            domain: [8.0, 47.0, 12.0, 50.0],
            mesh: MeshConfig::default(),
            a: 0.8,
            range_fraction: 0.3,
            sigma: 0.58,
            ar_precision: 25.0,
            scale: 0.25,
            xi: 0.0,
            mean_sd: 0.15,
            coefficients: BTreeMap::from([
                (INTERCEPT.to_string(), 4.0),
                ("altitude".to_string(), -0.15),
                ("precipitation".to_string(), 0.1),
            ]),
            mean_coefficients: BTreeMap::from([(INTERCEPT.to_string(), 3.2), ("temperature".to_string(), 0.1)]),
            shared: BTreeMap::from([("altitude".to_string(), -0.2), ("precipitation".to_string(), 0.15)]),
            beta1: BTreeMap::from([("altitude".to_string(), -0.5), ("precipitation".to_string(), 0.7)]),
            beta2: 1.0,
            invalid_fraction: 0.05,
            min_valid: 0.6,
        }
    }
}

impl SimulationConfig {
    /// Defaults for the joint model: maxima block coefficients exclude the
    /// shared covariates.
    pub fn joint_default() -> Self {
        Self {
            model: "joint".into(),
            coefficients: BTreeMap::from([(INTERCEPT.to_string(), 4.0), ("temperature".to_string(), 0.05)]),
            ..Default::default()
        }
    }

    pub fn is_joint(&self) -> bool {
        self.model.trim().eq_ignore_ascii_case("joint")
    }

    pub fn train_year_list(&self) -> Vec<i32> {
        (0..self.train_years as i32).map(|k| self.first_year + k).collect()
    }

    pub fn validation_year_list(&self) -> Vec<i32> {
        (0..self.validation_years as i32).map(|k| self.first_year + self.train_years as i32 + k).collect()
    }

    /// Every covariate whose coefficient the simulation uses.
    pub fn covariates(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        let maps: Vec<&BTreeMap<String, f64>> = if self.is_joint() {
            vec![&self.coefficients, &self.mean_coefficients, &self.shared]
        } else {
            vec![&self.coefficients]
        };
        for m in maps {
            set.extend(m.keys().filter(|k| k.as_str() != INTERCEPT).cloned());
        }
        set.into_iter().collect()
    }

    pub fn check(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !self.is_joint() {
            crate::model::ModelClass::parse(&self.model)?;
        }
        if self.stations < 2 {
            return bad(format!("need at least 2 stations, got {}", self.stations));
        }
        if self.train_years == 0 {
            return bad("need at least one training year".into());
        }
        if !(self.a.abs() < 1.0) {
            return bad(format!("a must lie in (-1, 1), got {}", self.a));
        }
        if !(self.range_fraction > 0.0) || !(self.sigma >= 0.0) || !(self.scale > 0.0) || !(self.mean_sd > 0.0) {
            return bad("range_fraction, scale and mean_sd must be positive and sigma non-negative".into());
        }
        if !(self.ar_precision > 0.0) {
            return bad(format!("ar_precision must be positive, got {}", self.ar_precision));
        }
        if !(self.domain[2] > self.domain[0] && self.domain[3] > self.domain[1]) {
            return bad(format!("domain {:?} is empty", self.domain));
        }
        if !(0.0..=1.0).contains(&self.invalid_fraction) {
            return bad(format!("invalid_fraction must lie in [0, 1], got {}", self.invalid_fraction));
        }
        for c in self.covariates() {
            if !COVARIATES.contains(&c.as_str()) {
                return bad(format!("unknown covariate `{c}` in simulation coefficients"));
            }
        }
        if self.is_joint() {
            for k in self.shared.keys() {
                if self.coefficients.contains_key(k) || self.mean_coefficients.contains_key(k) {
                    return bad(format!("covariate `{k}` is both shared and non-shared"));
                }
                if !self.beta1.contains_key(k) {
                    return bad(format!("shared covariate `{k}` lacks a beta1 value"));
                }
            }
            if let Some(k) = self.beta1.keys().find(|k| !self.shared.contains_key(*k)) {
                return bad(format!("beta1 given for `{k}`, which is not shared"));
            }
        }
        Ok(())
    }
}

/// Generating values, on the scales the fitted models report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub model: String,
    pub seed: u64,
    /// Natural-scale hyperparameters keyed by their model names.
    pub hypers: BTreeMap<String, f64>,
    /// Coefficients keyed by their model names.
    pub coefficients: BTreeMap<String, f64>,
    pub standardizer: Standardizer,
}

impl GroundTruth {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Data(format!("serializing truth record: {e}")))
    }
}

/// Raw covariates for one station-year.
struct RawCovariates {
    altitude: f64,
    temperature: f64,
    precipitation: f64,
    vapour_pressure: f64,
    population_density: f64,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// AR(1) in time with Matérn innovations on the mesh, `u_t = a u_{t−1} + w_t`,
/// started from the stationary law.
fn space_time_field(
    mesh: &TriangularMesh<f64>,
    matern: &MaternParams<f64>,
    a: f64,
    times: usize,
    seed: u64,
    stream: u64,
) -> Result<Vec<Vec<f64>>> {
    let n = mesh.num_nodes();
    if matern.sigma == 0.0 {
        return Ok(vec![vec![0.0; n]; times]);
    }
    let fem = assemble_fem(mesh)?;
    let q = spde_precision(&fem, matern)?;
    let w = sample_gmrf_stream(&q, times, seed, stream);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(times);
    for (t, wt) in w.into_iter().enumerate() {
        if t == 0 {
            let s = 1.0 / (1.0 - a * a).sqrt();
            out.push(wt.iter().map(|v| v * s).collect());
        } else {
            let prev = &out[t - 1];
            out.push(prev.iter().zip(&wt).map(|(p, v)| a * p + v).collect());
        }
    }
    Ok(out)
}

/// Draws a synthetic observation table and the generating values.
pub fn simulate_dataset(cfg: &SimulationConfig, seed: u64) -> Result<(ObservationTable, GroundTruth)> {
    cfg.check()?;
    let joint = cfg.is_joint();
    let n_years = cfg.train_years + cfg.validation_years;
    let stream_rng = |stream: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(stream);
        r
    };

    // Stations and raw covariates.
    let mut rng = stream_rng(1);
    let [x0, y0, x1, y1] = cfg.domain;
    let stations: Vec<[f64; 2]> = (0..cfg.stations)
        .map(|_| [x0 + (x1 - x0) * rng.random::<f64>(), y0 + (y1 - y0) * rng.random::<f64>()])
        .collect();
    let mut rng = stream_rng(2);
    let span = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
    let altitude: Vec<f64> = stations
        .iter()
        .map(|s| {
            let relief = 400.0 * ((s[0] - x0) / span * 3.0).sin().abs();
            (5.3 + 0.5 * normal(&mut rng)).exp() + relief
        })
        .collect();
    let density: Vec<f64> = (0..cfg.stations).map(|_| (4.5 + 1.0 * normal(&mut rng)).exp()).collect();
    let year_temp: Vec<f64> = (0..n_years).map(|_| 0.4 * normal(&mut rng)).collect();
    let year_prec: Vec<f64> = (0..n_years).map(|_| 6.0 * normal(&mut rng)).collect();
    let mut raw: Vec<Vec<RawCovariates>> = Vec::with_capacity(n_years);
    for t in 0..n_years {
        let mut row = Vec::with_capacity(cfg.stations);
        for s in 0..cfg.stations {
            let temperature = 12.0 - 0.006 * altitude[s] + year_temp[t] + 0.5 * normal(&mut rng);
            let precipitation = 60.0 + 0.03 * altitude[s] + year_prec[t] + 8.0 * normal(&mut rng);
            row.push(RawCovariates {
                altitude: altitude[s],
                temperature,
                precipitation: precipitation.max(1.0),
                vapour_pressure: 11.0 + 0.6 * (temperature - 12.0) + 0.5 * normal(&mut rng),
                population_density: density[s] * (1.0 + 0.01 * normal(&mut rng)),
            });
        }
        raw.push(row);
    }
    let mut rng = stream_rng(3);
    let valid: Vec<Vec<f64>> = (0..n_years)
        .map(|_| {
            (0..cfg.stations)
                .map(|_| {
                    if rng.random::<f64>() < cfg.invalid_fraction {
                        0.3 + 0.29 * rng.random::<f64>()
                    } else {
                        cfg.min_valid + (1.0 - cfg.min_valid) * rng.random::<f64>()
                    }
                })
                .collect()
        })
        .collect();

    // Table without responses, to fix the standardization.
    let mut table = ObservationTable::default();
    for t in 0..n_years {
        for s in 0..cfg.stations {
            let c = &raw[t][s];
            table.rows.push(ObservationRow {
                station_id: format!("S{:04}", s + 1),
                lon: stations[s][0],
                lat: stations[s][1],
                altitude: Some(c.altitude),
                year: cfg.first_year + t as i32,
                pm10_mean: None,
                pm10_max: None,
                temperature: Some(c.temperature),
                precipitation: Some(c.precipitation),
                vapour_pressure: Some(c.vapour_pressure),
                population_density: Some(c.population_density),
                valid_fraction: valid[t][s],
            });
        }
    }
    let covs = cfg.covariates();
    let popts = PrepareOptions {
        min_valid: cfg.min_valid,
        train_years: cfg.train_year_list(),
        validation_years: cfg.validation_year_list(),
        covariates: covs.clone(),
    };
    let standardizer = if covs.is_empty() {
        Standardizer { names: Vec::new(), means: Vec::new(), sds: Vec::new() }
    } else {
        training_standardizer(&table, &popts)?
    };

    // Random effects on the mesh.
    let bbox = BoundingBox::of_points(&stations).ok_or_else(|| Error::Config("no stations".into()))?;
    let mesh = cfg.mesh.build(&bbox)?;
    let range = cfg.range_fraction * bbox.diagonal();
    let matern = MaternParams::new(range, cfg.sigma.max(f64::MIN_POSITIVE))?;
    let matern = if cfg.sigma == 0.0 { MaternParams { sigma: 0.0, ..matern } } else { matern };
    let u_nodes = space_time_field(&mesh, &matern, cfg.a, n_years, seed, 4)?;
    let class = if joint { None } else { Some(crate::model::ModelClass::parse(&cfg.model)?) };
    let separable = class.is_some_and(|c| c.separable());
    let (w_nodes, f_time) = if separable {
        let w = space_time_field(&mesh, &matern, 0.0, 1, seed, 5)?.remove(0);
        let mut rng = stream_rng(6);
        let mut f = Vec::with_capacity(n_years);
        let sd = 1.0 / cfg.ar_precision.sqrt();
        for t in 0..n_years {
            let innov = sd * normal(&mut rng);
            f.push(if t == 0 { innov / (1.0 - cfg.a * cfg.a).sqrt() } else { cfg.a * f[t - 1] + innov });
        }
        let m = f[..cfg.train_years].iter().sum::<f64>() / cfg.train_years as f64;
        for v in &mut f {
            *v -= m;
        }
        (w, f)
    } else {
        (vec![0.0; mesh.num_nodes()], vec![0.0; n_years])
    };
    let proj = mesh.projection_matrix(&stations)?;
    let u_sites: Vec<Vec<f64>> = u_nodes.iter().map(|u| proj.apply(u)).collect();
    let w_sites = proj.apply(&w_nodes);

    // Responses.
    let lin = |coefs: &BTreeMap<String, f64>, row: &ObservationRow, mult: Option<&BTreeMap<String, f64>>| -> f64 {
        coefs
            .iter()
            .map(|(k, b)| {
                let x = if k == INTERCEPT {
                    1.0
                } else {
                    standardizer.apply(k, row.covariate(k).expect("simulated")).expect("standardized")
                };
                let m = mult.map(|m| m[k]).unwrap_or(1.0);
                b * m * x
            })
            .sum()
    };
    let max_family = match class.map(|c| c.family()) {
        Some(crate::model::FamilyKind::Gev) => Family::Gev { scale: cfg.scale, shape: cfg.xi },
        _ => Family::Gumbel { scale: cfg.scale },
    };
    let mean_family = Family::Gaussian { sd: cfg.mean_sd };
    let mut rng = stream_rng(7);
    for (k, row) in table.rows.iter_mut().enumerate() {
        let t = k / cfg.stations;
        let s = k % cfg.stations;
        let u = u_sites[t][s];
        let (eta_mean, eta_max) = if joint {
            let shared = lin(&cfg.shared, row, None);
            let shared_scaled = lin(&cfg.shared, row, Some(&cfg.beta1));
            (
                lin(&cfg.mean_coefficients, row, None) + shared + u,
                lin(&cfg.coefficients, row, None) + shared_scaled + cfg.beta2 * u,
            )
        } else {
            (0.0, lin(&cfg.coefficients, row, None) + u + w_sites[s] + f_time[t])
        };
        let p_max: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
        row.pm10_max = Some(max_family.quantile(p_max, eta_max)?.exp());
        let p_mean: f64 = rng.random::<f64>().clamp(1e-12, 1.0 - 1e-12);
        if joint {
            row.pm10_mean = Some(mean_family.quantile(p_mean, eta_mean)?.exp());
        }
    }

    // Truth on the fitted models' naming.
    let mut hypers =
        BTreeMap::from([("a".to_string(), cfg.a), ("range".to_string(), range), ("sigma".to_string(), cfg.sigma)]);
    let mut coefficients = BTreeMap::new();
    if joint {
        hypers.insert("precision.mean".into(), 1.0 / (cfg.mean_sd * cfg.mean_sd));
        hypers.insert("precision.max".into(), 1.0 / (cfg.scale * cfg.scale));
        for (k, v) in &cfg.beta1 {
            hypers.insert(format!("beta1.{k}"), *v);
        }
        hypers.insert("beta2".into(), cfg.beta2);
        for (k, v) in &cfg.mean_coefficients {
            coefficients.insert(format!("mean.{k}"), *v);
        }
        for (k, v) in &cfg.coefficients {
            coefficients.insert(format!("max.{k}"), *v);
        }
        for (k, v) in &cfg.shared {
            coefficients.insert(format!("shared.{k}"), *v);
        }
    } else {
        hypers.insert("precision".into(), 1.0 / (cfg.scale * cfg.scale));
        if class.is_some_and(|c| c.family() == crate::model::FamilyKind::Gev) {
            hypers.insert("xi".into(), cfg.xi);
        }
        if separable {
            hypers.insert("ar_precision".into(), cfg.ar_precision);
        }
        coefficients = cfg.coefficients.clone();
    }
    let truth = GroundTruth { model: cfg.model.clone(), seed, hypers, coefficients, standardizer };
    Ok((table, truth))
}
