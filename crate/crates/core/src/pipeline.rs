//! End-to-end runs: config and observations in, fits and reports out.

use std::io::Write;

use crate::artifact::{FitArtifact, SymmetricTriplets};
use crate::config::Config;
use crate::data::{prepare, ObservationTable, PreparedDataset};
use crate::error::{Error, Result};
use crate::evaluation::{self, EvaluationReport, PredictedValue, CRITERIA_HEADER};
use crate::excursion::{excursion_function, Direction, ExcursionRequest, ExcursionResult};
use crate::inference::{fit, predict, FitResult, LatentSystem, PredictionRow, PredictionTarget};
use crate::mesh::TriangularMesh;
use crate::model::ModelSpec;

/// Names of the prediction quantiles written by [`Pipeline::write_predictions`].
pub const PREDICTION_LEVELS: [f64; 3] = [0.025, 0.5, 0.975];

/// Everything derived deterministically from a config and an observation
/// file.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: Config,
    pub config_text: String,
    pub observations_text: String,
    pub table: ObservationTable,
    pub data: PreparedDataset,
    pub mesh: TriangularMesh<f64>,
    pub spec: ModelSpec,
    pub system: LatentSystem,
    /// Prepared-row index of each system observation.
    pub obs_rows: Vec<usize>,
}

/// One prediction request tied to its source row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledTarget {
    pub id: String,
    pub year: i32,
    pub train: bool,
    /// Observed log response for the target's block, if any.
    pub observed: Option<f64>,
    pub target: PredictionTarget,
}

fn write_err(e: csv::Error) -> Error {
    Error::Data(format!("writing CSV: {e}"))
}

impl Pipeline {
    pub fn build(config_text: &str, observations_text: &str) -> Result<Self> {
        let config = Config::parse(config_text)?;
        let table = ObservationTable::read_from(observations_text.as_bytes())?;
        if !table.rejected.is_empty() {
            log::warn!("{} observation rows rejected", table.rejected.len());
            for r in table.rejected.iter().take(5) {
                log::warn!("line {}: {}", r.line, r.message);
            }
        }
        let data = prepare(&table, &config.prepare_options())?;
        let bbox = data.bbox()?;
        let mesh = config.mesh.build(&bbox)?;
        let spec = config.model_spec(bbox.diagonal())?;
        let model_data = data.model_data(&spec)?;
        let obs_rows = data.block_rows(&spec, true)?.concat();
        let system = LatentSystem::new(&spec, &mesh, &model_data)?;
        for w in system.warnings() {
            log::warn!("{w}");
        }
        Ok(Self {
            config,
            config_text: config_text.to_string(),
            observations_text: observations_text.to_string(),
            table,
            data,
            mesh,
            spec,
            system,
            obs_rows,
        })
    }

    pub fn fit(&self, threads: usize) -> Result<FitResult> {
        fit(&self.system, &self.config.fit_options(threads))
    }

    pub fn artifact(&self, fit: &FitResult, seed: u64) -> Result<FitArtifact> {
        Ok(FitArtifact {
            seed,
            config: self.config_text.clone(),
            observations: self.observations_text.clone(),
            fit: fit.clone(),
            precision: SymmetricTriplets::modal_precision(&self.system, fit)?,
        })
    }

    /// Rebuilds the pipeline stored in an artifact and checks that it
    /// reproduces the stored fit's structure.
    pub fn from_artifact(a: &FitArtifact) -> Result<Self> {
        let p = Self::build(&a.config, &a.observations)?;
        let names: Vec<&str> = p.spec.hypers.iter().map(|h| h.name.as_str()).collect();
        let mismatch = |what: &str| Error::Data(format!("fit artifact does not match its embedded inputs ({what})"));
        if a.fit.hyper_names.iter().map(String::as_str).ne(names.iter().copied()) {
            return Err(mismatch("hyperparameters"));
        }
        if a.fit.latent_mean.len() != p.system.dim() || a.fit.eta_mean.len() != p.system.num_obs() {
            return Err(mismatch("dimensions"));
        }
        let q = SymmetricTriplets::modal_precision(&p.system, &a.fit)?;
        let close = q.rows == a.precision.rows
            && q.cols == a.precision.cols
            && q.values.iter().zip(&a.precision.values).all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs()));
        if !close {
            return Err(mismatch("posterior precision"));
        }
        Ok(p)
    }

    /// Block used for hold-out metrics and maps: the configured response's
    /// block in the joint model, the only block otherwise.
    pub fn report_block(&self) -> usize {
        self.spec
            .blocks
            .iter()
            .position(|b| b.response == self.config.model.response)
            .unwrap_or(self.spec.blocks.len() - 1)
    }

    /// Prepared rows of one split as prediction targets for `block`.
    /// Rows more than one year past the training range are skipped.
    pub fn row_targets(&self, block: usize, train: bool) -> Vec<LabeledTarget> {
        let response = &self.spec.blocks[block].response;
        let mut skipped = 0;
        let mut out = Vec::new();
        for (i, r) in self.data.rows.iter().enumerate() {
            if r.train != train {
                continue;
            }
            if r.time > self.data.n_times {
                skipped += 1;
                continue;
            }
            out.push(LabeledTarget {
                id: r.station_id.clone(),
                year: r.year,
                train: r.train,
                observed: self.data.response(i, response),
                target: PredictionTarget {
                    block,
                    location: r.location,
                    time: r.time,
                    covariates: r.covariates.clone(),
                },
            });
        }
        if skipped > 0 {
            log::warn!("{skipped} rows lie more than one year past the training range and were not predicted");
        }
        out
    }

    /// Targets for the rows of another table, standardized with this fit's
    /// training parameters.
    pub fn table_targets(&self, table: &ObservationTable, block: usize) -> Result<Vec<LabeledTarget>> {
        let response = &self.spec.blocks[block].response;
        let st = &self.data.standardizer;
        let mut out = Vec::new();
        for r in &table.rows {
            let time = r.year - self.data.first_year;
            if time < 0 || time as usize > self.data.n_times {
                return Err(Error::Data(format!(
                    "station `{}` year {} is outside the fitted years plus one",
                    r.station_id, r.year
                )));
            }
            let mut covariates = std::collections::BTreeMap::new();
            for name in &st.names {
                let v = r
                    .covariate(name)
                    .ok_or_else(|| Error::Data(format!("station `{}` year {} lacks `{name}`", r.station_id, r.year)))?;
                covariates.insert(name.clone(), st.apply(name, v).expect("fitted column"));
            }
            out.push(LabeledTarget {
                id: r.station_id.clone(),
                year: r.year,
                train: self.config.split.train_years.contains(&r.year),
                observed: r.response(response).map(f64::ln),
                target: PredictionTarget { block, location: [r.lon, r.lat], time: time as usize, covariates },
            });
        }
        Ok(out)
    }

    pub fn predict(&self, fit: &FitResult, targets: &[LabeledTarget]) -> Result<Vec<PredictionRow>> {
        let t: Vec<PredictionTarget> = targets.iter().map(|t| t.target.clone()).collect();
        predict(&self.system, fit, &t, &PREDICTION_LEVELS)
    }

    /// Log-scale 95% predictive intervals on the validation rows.
    pub fn validation_predictions(&self, fit: &FitResult) -> Result<Vec<PredictedValue>> {
        let targets: Vec<LabeledTarget> =
            self.row_targets(self.report_block(), false).into_iter().filter(|t| t.observed.is_some()).collect();
        if targets.is_empty() {
            return Ok(Vec::new());
        }
        let rows = self.predict(fit, &targets)?;
        Ok(rows
            .iter()
            .zip(&targets)
            .map(|(r, t)| PredictedValue {
                mean: r.response_mean,
                lower: r.response_quantiles[0],
                upper: r.response_quantiles[2],
                observed: t.observed.expect("filtered"),
            })
            .collect())
    }

    pub fn evaluate(&self, fit: &FitResult) -> Result<EvaluationReport> {
        let val = self.validation_predictions(fit)?;
        evaluation::evaluate(&self.system, fit, (!val.is_empty()).then_some(val.as_slice()))
    }

    /// `(station_id, year)` of each training observation.
    pub fn observation_labels(&self) -> Vec<(String, i32)> {
        self.obs_rows.iter().map(|&i| (self.data.rows[i].station_id.clone(), self.data.rows[i].year)).collect()
    }

    pub fn write_observations<W: Write>(&self, out: W, fit: &FitResult, report: &EvaluationReport) -> Result<()> {
        evaluation::write_observation_csv(out, &self.system, fit, report, Some(&self.observation_labels()))
    }

    /// Posterior summary table. Coefficients act on the log scale per
    /// standard deviation of their covariate; `raw_*` columns give the
    /// matching multiplicative effects on the response scale.
    pub fn write_summary<W: Write>(&self, out: W, fit: &FitResult) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["parameter", "kind", "mean", "sd", "q025", "q50", "q975", "raw_q025", "raw_q50", "raw_q975"])
            .map_err(write_err)?;
        let f = |x: f64| format!("{x:.6}");
        for c in &fit.coefficients {
            w.write_record([
                c.name.clone(),
                "coefficient".into(),
                f(c.mean),
                f(c.sd),
                f(c.q025),
                f(c.q50),
                f(c.q975),
                f(c.q025.exp()),
                f(c.q50.exp()),
                f(c.q975.exp()),
            ])
            .map_err(write_err)?;
        }
        for h in &fit.hypers {
            let m = &h.summary;
            let kind = format!("{:?}", h.kind).to_lowercase();
            let kind = if h.fixed { format!("{kind} (fixed)") } else { kind };
            w.write_record([
                h.name.clone(),
                kind,
                f(m.mean),
                f(m.sd),
                f(m.q025),
                f(m.q50),
                f(m.q975),
                String::new(),
                String::new(),
                String::new(),
            ])
            .map_err(write_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Predictions as CSV, log scale with response-scale quantiles.
    pub fn write_predictions<W: Write>(&self, out: W, targets: &[LabeledTarget], rows: &[PredictionRow]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "station_id",
            "year",
            "split",
            "block",
            "eta_mean",
            "eta_sd",
            "log_mean",
            "log_q025",
            "log_q50",
            "log_q975",
            "raw_q025",
            "raw_q50",
            "raw_q975",
            "observed_log",
        ])
        .map_err(write_err)?;
        let f = |x: f64| format!("{x:.8}");
        for (t, r) in targets.iter().zip(rows) {
            let q = &r.response_quantiles;
            w.write_record([
                t.id.clone(),
                t.year.to_string(),
                if t.train { "train" } else { "validation" }.into(),
                self.spec.blocks[t.target.block].name.clone(),
                f(r.eta_mean),
                f(r.eta_sd),
                f(r.response_mean),
                f(q[0]),
                f(q[1]),
                f(q[2]),
                f(q[0].exp()),
                f(q[1].exp()),
                f(q[2].exp()),
                t.observed.map(f).unwrap_or_default(),
            ])
            .map_err(write_err)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Regular grid of cell centres over the station bounding box, plus the
    /// stations themselves, for the map year. Grid covariates are
    /// inverse-squared-distance averages of that year's station values;
    /// longitude and latitude are exact.
    pub fn map_targets(&self, year: Option<i32>) -> Result<Vec<LabeledTarget>> {
        let ex = &self.config.excursion;
        let year = year.or(ex.year).unwrap_or(self.data.first_year + self.data.n_times as i32 - 1);
        let time = year - self.data.first_year;
        if time < 0 || time as usize > self.data.n_times {
            return Err(Error::InvalidArgument(format!("map year {year} is outside the fitted years plus one")));
        }
        let block = self.report_block();
        let rows: Vec<usize> = (0..self.data.rows.len()).filter(|&i| self.data.rows[i].year == year).collect();
        if rows.is_empty() {
            return Err(Error::Data(format!("no prepared station rows in map year {year}")));
        }
        let bbox = self.data.bbox()?;
        let st = &self.data.standardizer;
        let mut out = Vec::new();
        for iy in 0..ex.grid_ny {
            for ix in 0..ex.grid_nx {
                let lon = bbox.min[0] + (ix as f64 + 0.5) / ex.grid_nx as f64 * bbox.width();
                let lat = bbox.min[1] + (iy as f64 + 0.5) / ex.grid_ny as f64 * bbox.height();
                let w: Vec<f64> = rows
                    .iter()
                    .map(|&i| {
                        let l = self.data.rows[i].location;
                        1.0 / ((l[0] - lon).powi(2) + (l[1] - lat).powi(2)).max(1e-12)
                    })
                    .collect();
                let total: f64 = w.iter().sum();
                let covariates = st
                    .names
                    .iter()
                    .map(|name| {
                        let v = match name.as_str() {
                            "longitude" => st.apply(name, lon).expect("fitted"),
                            "latitude" => st.apply(name, lat).expect("fitted"),
                            _ => {
                                rows.iter().zip(&w).map(|(&i, wi)| wi * self.data.rows[i].covariates[name]).sum::<f64>()
                                    / total
                            }
                        };
                        (name.clone(), v)
                    })
                    .collect();
                out.push(LabeledTarget {
                    id: format!("grid_{ix}_{iy}"),
                    year,
                    train: self.config.split.train_years.contains(&year),
                    observed: None,
                    target: PredictionTarget { block, location: [lon, lat], time: time as usize, covariates },
                });
            }
        }
        if ex.include_stations {
            let response = &self.spec.blocks[block].response;
            for &i in &rows {
                let r = &self.data.rows[i];
                out.push(LabeledTarget {
                    id: r.station_id.clone(),
                    year,
                    train: r.train,
                    observed: self.data.response(i, response),
                    target: PredictionTarget {
                        block,
                        location: r.location,
                        time: time as usize,
                        covariates: r.covariates.clone(),
                    },
                });
            }
        }
        Ok(out)
    }

    pub fn excursion(
        &self,
        fit: &FitResult,
        targets: &[LabeledTarget],
        threshold: f64,
        seed: u64,
        threads: usize,
    ) -> Result<ExcursionResult> {
        let ex = &self.config.excursion;
        let req = ExcursionRequest {
            threshold,
            direction: Direction::parse(&ex.direction)?,
            targets: targets.iter().map(|t| t.target.clone()).collect(),
            samples: ex.samples,
            seed,
            mix_grid: ex.mix_grid,
            threads: threads.max(1),
        };
        excursion_function(&self.system, fit, &req)
    }
}

pub fn write_criteria<W: Write>(out: W, reports: &[EvaluationReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CRITERIA_HEADER).map_err(write_err)?;
    for r in reports {
        w.write_record(evaluation::criteria_row(r)).map_err(write_err)?;
    }
    w.flush()?;
    Ok(())
}

/// 1-based ranks, ties sharing the better rank; missing values rank last.
fn ranks(values: &[Option<f64>], lower_is_better: bool) -> Vec<Option<usize>> {
    values
        .iter()
        .map(|v| {
            v.map(|x| {
                1 + values.iter().filter(|o| o.is_some_and(|y| if lower_is_better { y < x } else { y > x })).count()
            })
        })
        .collect()
}

/// Criteria with per-criterion ranks. DIC, WAIC, LS and RMSE rank lowest
/// first; coverage ranks by distance from 0.95, correlation highest first.
pub fn write_comparison<W: Write>(out: W, reports: &[EvaluationReport]) -> Result<()> {
    let col = |f: &dyn Fn(&EvaluationReport) -> Option<f64>| reports.iter().map(f).collect::<Vec<_>>();
    let dic = col(&|r| Some(r.dic.dic));
    let waic = col(&|r| Some(r.waic.waic));
    let ls = col(&|r| Some(r.cpo.ls));
    let rmse = col(&|r| Some(r.rmse));
    let cov = col(&|r| r.validation.map(|v| v.coverage));
    let cov_gap: Vec<Option<f64>> = cov.iter().map(|c| c.map(|c| (c - 0.95).abs())).collect();
    let cor = col(&|r| r.validation.map(|v| v.correlation));
    let vrmse = col(&|r| r.validation.map(|v| v.rmse));
    let rk = [
        ranks(&dic, true),
        ranks(&waic, true),
        ranks(&ls, true),
        ranks(&rmse, true),
        ranks(&cov_gap, true),
        ranks(&cor, false),
        ranks(&vrmse, true),
    ];
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "model",
        "dic",
        "waic",
        "ls",
        "rmse",
        "coverage",
        "correlation",
        "validation_rmse",
        "rank_dic",
        "rank_waic",
        "rank_ls",
        "rank_rmse",
        "rank_coverage",
        "rank_correlation",
        "rank_validation_rmse",
    ])
    .map_err(write_err)?;
    let f = |x: Option<f64>| x.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (i, r) in reports.iter().enumerate() {
        let mut rec =
            vec![r.label.clone(), f(dic[i]), f(waic[i]), f(ls[i]), f(rmse[i]), f(cov[i]), f(cor[i]), f(vrmse[i])];
        rec.extend(rk.iter().map(|c| c[i].map(|k| k.to_string()).unwrap_or_default()));
        w.write_record(rec).map_err(write_err)?;
    }
    w.flush()?;
    Ok(())
}

/// File-name form of a threshold: `50`, `12.5`.
pub fn threshold_tag(u: f64) -> String {
    let s = format!("{u}");
    s.replace('-', "m")
}
