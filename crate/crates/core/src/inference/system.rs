//! The latent linear system of a model: fixed sparsity pattern of the
//! posterior precision, prior precision components and observation rows.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::assemble_fem;
use crate::likelihoods::Family;
use crate::mesh::TriangularMesh;
use crate::model::{EffectKind, FamilyKind, ModelData, ModelSpec, Target, INTERCEPT};
use crate::sparse::{CscMatrix, SymbolicCholesky, Triplets};
use crate::spde::{MaternParams, SpdeOperator};
use crate::temporal::{ar1_components, kronecker_st_matrix};

/// Precision of the soft sum-to-zero penalty on `f(t)`.
pub const SUM_TO_ZERO_PRECISION: f64 = 1e4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub col: usize,
    pub base: f64,
    /// Index of a sharing hyperparameter scaling this entry.
    pub scale: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObsRow {
    pub entries: Vec<Entry>,
    /// Pattern position of every ordered entry pair `(e, f)`, row-major.
    pair_pos: Vec<usize>,
}

/// How the weight of one prior component depends on the hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Weight {
    /// `a^p · c_q(ρ, σ)` for a space–time field.
    SpaceTime {
        effect: usize,
        power: i32,
        part: usize,
    },
    /// `τ a^p` for an AR(1) term.
    Temporal {
        effect: usize,
        power: i32,
    },
    /// `c_q(ρ, σ)` for a spatial field.
    Spatial {
        effect: usize,
        part: usize,
    },
    Constant(f64),
}

#[derive(Debug, Clone)]
struct Component {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    pos: Vec<usize>,
    weight: Weight,
}

/// Offset and length of every latent block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub effects: Vec<(usize, usize)>,
    pub coefficients: usize,
    pub dim: usize,
}

/// Natural-scale parameters of one random effect at a given θ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EffectParams {
    SpaceTime { a: f64, matern: MaternParams<f64> },
    Temporal { a: f64, tau: f64 },
    Spatial { matern: MaternParams<f64> },
}

/// Hyperparameters resolved to natural scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperState {
    pub internal: Vec<f64>,
    pub natural: Vec<f64>,
    pub effects: Vec<EffectParams>,
    pub families: Vec<Family<f64>>,
}

#[derive(Debug, Clone)]
pub struct LatentSystem {
    pub spec: ModelSpec,
    pub layout: Layout,
    pub mesh: TriangularMesh<f64>,
    pub n_times: usize,
    pub y: Vec<f64>,
    pub obs_block: Vec<usize>,
    pub obs_locations: Vec<[f64; 2]>,
    pub obs_times: Vec<usize>,
    pub rows: Vec<ObsRow>,
    /// Latent index of each block's unscaled intercept, if any.
    pub intercepts: Vec<Option<usize>>,
    pattern: CscMatrix<f64>,
    symbolic: Arc<SymbolicCholesky>,
    components: Vec<Component>,
    spde: Option<SpdeOperator<f64>>,
    warnings: Vec<String>,
}

fn effect_len(kind: &EffectKind, n_space: usize, n_times: usize) -> usize {
    match kind {
        EffectKind::SpaceTime { .. } => n_space * n_times,
        EffectKind::Temporal { .. } => n_times,
        EffectKind::Spatial { .. } => n_space,
    }
}

impl LatentSystem {
    pub fn new(spec: &ModelSpec, mesh: &TriangularMesh<f64>, data: &ModelData) -> Result<Self> {
        spec.validate()?;
        if data.blocks.len() != spec.blocks.len() {
            return Err(Error::Config(format!(
                "model has {} blocks but data has {}",
                spec.blocks.len(),
                data.blocks.len()
            )));
        }
        if data.n_times == 0 {
            return Err(Error::Config("data must cover at least one year".into()));
        }
        let n_space = mesh.num_nodes();
        let n_times = data.n_times;
        let mut warnings = Vec::new();

        let mut offset = 0;
        let mut effects = Vec::new();
        for e in &spec.effects {
            let len = effect_len(&e.kind, n_space, n_times);
            effects.push((offset, len));
            offset += len;
        }
        let layout = Layout { effects, coefficients: offset, dim: offset + spec.coefficients.len() };
        let hyper_of = |name: &str| spec.hyper_index(name).expect("validated");

        // Observation rows.
        let mut rows = Vec::new();
        let mut y = Vec::new();
        let mut obs_block = Vec::new();
        let mut obs_locations = Vec::new();
        let mut obs_times = Vec::new();
        let mut intercepts = Vec::new();
        for (b, (bs, bd)) in spec.blocks.iter().zip(&data.blocks).enumerate() {
            bd.check(&bs.name)?;
            if let Some(&t) = bd.times.iter().find(|&&t| t >= n_times) {
                return Err(Error::Config(format!("block `{}` has year index {t} beyond {n_times}", bs.name)));
            }
            for cov in spec.block_covariates(b) {
                if cov != INTERCEPT && !bd.covariates.contains_key(&cov) {
                    return Err(Error::Config(format!(
                        "block `{}` needs covariate `{cov}` missing from the data",
                        bs.name
                    )));
                }
            }
            check_design_rank(spec, b, bd, &mut warnings)?;
            let proj = mesh.projection_matrix(&bd.locations)?;
            intercepts.push(bs.terms.iter().find_map(|t| match &t.target {
                Target::Coefficient { coefficient, covariate } if covariate == INTERCEPT && t.scale.is_none() => {
                    Some(layout.coefficients + spec.coefficient_index(coefficient).expect("validated"))
                }
                _ => None,
            }));
            for i in 0..bd.len() {
                let mut entries = Vec::new();
                for term in &bs.terms {
                    let scale = term.scale.as_deref().map(hyper_of);
                    match &term.target {
                        Target::Coefficient { coefficient, covariate } => {
                            let col = layout.coefficients + spec.coefficient_index(coefficient).expect("validated");
                            let base = bd.covariate(covariate, i).expect("checked above");
                            entries.push(Entry { col, base, scale });
                        }
                        Target::Effect(name) => {
                            let e = spec.effect_index(name).expect("validated");
                            let (off, _) = layout.effects[e];
                            let t = bd.times[i];
                            match spec.effects[e].kind {
                                EffectKind::Temporal { .. } => entries.push(Entry { col: off + t, base: 1.0, scale }),
                                EffectKind::SpaceTime { .. } | EffectKind::Spatial { .. } => {
                                    let shift = if matches!(spec.effects[e].kind, EffectKind::SpaceTime { .. }) {
                                        t * n_space
                                    } else {
                                        0
                                    };
                                    let (nodes, w) = proj.row(i);
                                    for (&node, &wv) in nodes.iter().zip(w) {
                                        entries.push(Entry { col: off + shift + node, base: wv, scale });
                                    }
                                }
                            }
                        }
                    }
                }
                rows.push(ObsRow { entries, pair_pos: Vec::new() });
                y.push(bd.y[i]);
                obs_block.push(b);
                obs_locations.push(bd.locations[i]);
                obs_times.push(bd.times[i]);
            }
        }

        // Prior components in latent coordinates.
        let fem = assemble_fem(mesh)?;
        let needs_spde = spec.effects.iter().any(|e| !matches!(e.kind, EffectKind::Temporal { .. }));
        let spde = if needs_spde { Some(SpdeOperator::new(&fem)?) } else { None };
        let mut components = Vec::new();
        let push_csc = |m: &CscMatrix<f64>, off: usize, weight: Weight, out: &mut Vec<Component>| {
            let mut c = Component { rows: Vec::new(), cols: Vec::new(), vals: Vec::new(), pos: Vec::new(), weight };
            for j in 0..m.ncols {
                for (i, v) in m.col(j) {
                    c.rows.push(off + i);
                    c.cols.push(off + j);
                    c.vals.push(v);
                }
            }
            out.push(c);
        };
        for (e, es) in spec.effects.iter().enumerate() {
            let (off, _) = layout.effects[e];
            match &es.kind {
                EffectKind::SpaceTime { .. } => {
                    let op = spde.as_ref().expect("built above");
                    let time = ar1_components::<f64>(n_times)?;
                    for (power, tm) in time.iter().enumerate() {
                        for (part, vals) in op.components().iter().enumerate() {
                            let mut sm = op.pattern().clone();
                            sm.values = vals.to_vec();
                            let k = kronecker_st_matrix(tm, &sm)?;
                            push_csc(
                                &k,
                                off,
                                Weight::SpaceTime { effect: e, power: power as i32, part },
                                &mut components,
                            );
                        }
                    }
                }
                EffectKind::Temporal { .. } => {
                    let time = ar1_components::<f64>(n_times)?;
                    for (power, tm) in time.iter().enumerate() {
                        push_csc(tm, off, Weight::Temporal { effect: e, power: power as i32 }, &mut components);
                    }
                    if intercepts.iter().any(Option::is_some) && n_times > 1 {
                        let mut ones = Triplets::new(n_times, n_times);
                        for i in 0..n_times {
                            for j in 0..n_times {
                                ones.push(i, j, 1.0);
                            }
                        }
                        push_csc(&ones.to_csc(), off, Weight::Constant(SUM_TO_ZERO_PRECISION), &mut components);
                    }
                }
                EffectKind::Spatial { .. } => {
                    let op = spde.as_ref().expect("built above");
                    for (part, vals) in op.components().iter().enumerate() {
                        let mut sm = op.pattern().clone();
                        sm.values = vals.to_vec();
                        push_csc(&sm, off, Weight::Spatial { effect: e, part }, &mut components);
                    }
                }
            }
        }
        let mut coef_diag = Component {
            rows: Vec::new(),
            cols: Vec::new(),
            vals: Vec::new(),
            pos: Vec::new(),
            weight: Weight::Constant(1.0),
        };
        for (k, c) in spec.coefficients.iter().enumerate() {
            let idx = layout.coefficients + k;
            coef_diag.rows.push(idx);
            coef_diag.cols.push(idx);
            coef_diag.vals.push(1.0 / (c.prior_sd * c.prior_sd));
        }
        components.push(coef_diag);

        // Union pattern.
        let dim = layout.dim;
        let mut trip = Triplets::new(dim, dim);
        for i in 0..dim {
            trip.push(i, i, 0.0);
        }
        for c in &components {
            for (&r, &col) in c.rows.iter().zip(&c.cols) {
                trip.push(r, col, 0.0);
            }
        }
        for row in &rows {
            for a in &row.entries {
                for b in &row.entries {
                    trip.push(a.col, b.col, 0.0);
                }
            }
        }
        let pattern = trip.to_csc();
        for c in &mut components {
            c.pos = c
                .rows
                .iter()
                .zip(&c.cols)
                .map(|(&r, &col)| pattern.position(r, col).expect("in union pattern"))
                .collect();
        }
        for row in &mut rows {
            let mut pos = Vec::with_capacity(row.entries.len() * row.entries.len());
            for a in &row.entries {
                for b in &row.entries {
                    pos.push(pattern.position(a.col, b.col).expect("in union pattern"));
                }
            }
            row.pair_pos = pos;
        }
        let symbolic = Arc::new(SymbolicCholesky::analyze(&pattern)?);
        log::debug!("latent dimension {dim}, pattern nnz {}, factor nnz {}", pattern.nnz(), symbolic.factor_nnz());
        Ok(Self {
            spec: spec.clone(),
            layout,
            mesh: mesh.clone(),
            n_times,
            y,
            obs_block,
            obs_locations,
            obs_times,
            rows,
            intercepts,
            pattern,
            symbolic,
            components,
            spde,
            warnings,
        })
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn num_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_space(&self) -> usize {
        self.mesh.num_nodes()
    }

    pub fn pattern(&self) -> &CscMatrix<f64> {
        &self.pattern
    }

    pub fn symbolic(&self) -> &Arc<SymbolicCholesky> {
        &self.symbolic
    }

    pub fn spde(&self) -> Option<&SpdeOperator<f64>> {
        self.spde.as_ref()
    }

    /// Warnings raised while building the system (for example, covariates
    /// carrying no information).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Latent index of coefficient `name`.
    pub fn coefficient_col(&self, name: &str) -> Option<usize> {
        self.spec.coefficient_index(name).map(|k| self.layout.coefficients + k)
    }

    /// Resolves an internal-scale vector (one entry per hyperparameter).
    pub fn hyper_state(&self, internal: &[f64]) -> Result<HyperState> {
        let spec = &self.spec;
        if internal.len() != spec.hypers.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} hyperparameters, got {}",
                spec.hypers.len(),
                internal.len()
            )));
        }
        if let Some(i) = internal.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("hyperparameter `{}` is not finite", spec.hypers[i].name)));
        }
        let natural: Vec<f64> = spec.hypers.iter().zip(internal).map(|(h, &t)| h.kind.from_internal(t)).collect();
        let get = |name: &str| natural[spec.hyper_index(name).expect("validated")];
        let clamp_a = |a: f64| a.clamp(-1.0 + 1e-12, 1.0 - 1e-12);
        let mut effects = Vec::new();
        for e in &spec.effects {
            effects.push(match &e.kind {
                EffectKind::SpaceTime { a, range, sigma } => {
                    EffectParams::SpaceTime { a: clamp_a(get(a)), matern: MaternParams::new(get(range), get(sigma))? }
                }
                EffectKind::Temporal { a, precision } => {
                    EffectParams::Temporal { a: clamp_a(get(a)), tau: get(precision) }
                }
                EffectKind::Spatial { range, sigma } => {
                    EffectParams::Spatial { matern: MaternParams::new(get(range), get(sigma))? }
                }
            });
        }
        let families = spec
            .blocks
            .iter()
            .map(|b| {
                let scale = 1.0 / get(&b.precision).sqrt();
                match b.family {
                    FamilyKind::Gaussian => Family::Gaussian { sd: scale },
                    FamilyKind::Gumbel => Family::Gumbel { scale },
                    FamilyKind::Gev => Family::Gev { scale, shape: get(b.shape.as_deref().expect("validated")) },
                }
            })
            .collect();
        Ok(HyperState { internal: internal.to_vec(), natural, effects, families })
    }

    fn component_weight(&self, w: Weight, hs: &HyperState, spde_coef: &[Option<[f64; 3]>]) -> f64 {
        match w {
            Weight::SpaceTime { effect, power, part } => {
                let EffectParams::SpaceTime { a, .. } = hs.effects[effect] else { unreachable!() };
                a.powi(power) * spde_coef[effect].expect("set")[part]
            }
            Weight::Temporal { effect, power } => {
                let EffectParams::Temporal { a, tau } = hs.effects[effect] else { unreachable!() };
                tau * a.powi(power)
            }
            Weight::Spatial { effect, part } => spde_coef[effect].expect("set")[part],
            Weight::Constant(c) => c,
        }
    }

    fn spde_coefficients(&self, hs: &HyperState) -> Result<Vec<Option<[f64; 3]>>> {
        hs.effects
            .iter()
            .map(|e| match e {
                EffectParams::SpaceTime { matern, .. } | EffectParams::Spatial { matern } => {
                    SpdeOperator::coefficients(matern).map(Some)
                }
                EffectParams::Temporal { .. } => Ok(None),
            })
            .collect()
    }

    /// Prior precision values on the shared pattern.
    pub fn prior_values(&self, hs: &HyperState) -> Result<Vec<f64>> {
        let coef = self.spde_coefficients(hs)?;
        let mut out = vec![0.0; self.pattern.nnz()];
        for c in &self.components {
            let w = self.component_weight(c.weight, hs, &coef);
            for (&p, &v) in c.pos.iter().zip(&c.vals) {
                out[p] += w * v;
            }
        }
        Ok(out)
    }

    /// `log det Q_prior` from per-block closed forms.
    pub fn prior_log_determinant(&self, hs: &HyperState) -> Result<f64> {
        let n_space = self.n_space() as f64;
        let n_times = self.n_times;
        let mut total = 0.0;
        for (e, p) in hs.effects.iter().enumerate() {
            total += match *p {
                EffectParams::SpaceTime { a, matern } => {
                    let ld = self.spde.as_ref().expect("built").log_determinant(&matern)?;
                    n_space * (1.0 - a * a).ln() + n_times as f64 * ld
                }
                EffectParams::Spatial { matern } => self.spde.as_ref().expect("built").log_determinant(&matern)?,
                EffectParams::Temporal { a, tau } => self.temporal_log_determinant(e, a, tau)?,
            };
        }
        for c in &self.spec.coefficients {
            total -= 2.0 * c.prior_sd.ln();
        }
        Ok(total)
    }

    fn temporal_log_determinant(&self, effect: usize, a: f64, tau: f64) -> Result<f64> {
        let t = self.n_times;
        let (off, _) = self.layout.effects[effect];
        let mut dense = nalgebra::DMatrix::<f64>::zeros(t, t);
        for c in &self.components {
            let w = match c.weight {
                Weight::Temporal { effect: e, power } if e == effect => tau * a.powi(power),
                Weight::Constant(v) if c.rows.first().is_some_and(|&r| r >= off && r < off + t) => v,
                _ => continue,
            };
            for ((&r, &col), &v) in c.rows.iter().zip(&c.cols).zip(&c.vals) {
                dense[(r - off, col - off)] += w * v;
            }
        }
        let chol = nalgebra::Cholesky::new(dense)
            .ok_or_else(|| Error::Factorization("temporal prior precision is not positive definite".into()))?;
        Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    /// `y = Q x` for a symmetric matrix with values on the pattern.
    pub fn pattern_matvec(&self, values: &[f64], x: &[f64]) -> Vec<f64> {
        let p = &self.pattern;
        let mut y = vec![0.0; p.nrows];
        for j in 0..p.ncols {
            let xj = x[j];
            for k in p.colptr[j]..p.colptr[j + 1] {
                y[p.rowidx[k]] += values[k] * xj;
            }
        }
        y
    }

    fn entry_value(e: &Entry, hs: &HyperState) -> f64 {
        match e.scale {
            Some(h) => e.base * hs.natural[h],
            None => e.base,
        }
    }

    /// Linear predictor of every observation.
    pub fn eta(&self, x: &[f64], hs: &HyperState) -> Vec<f64> {
        self.rows.iter().map(|r| r.entries.iter().map(|e| Self::entry_value(e, hs) * x[e.col]).sum()).collect()
    }

    /// `Aᵀ v` for a per-observation vector.
    pub fn transpose_apply(&self, v: &[f64], hs: &HyperState) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (r, &vi) in self.rows.iter().zip(v) {
            for e in &r.entries {
                out[e.col] += Self::entry_value(e, hs) * vi;
            }
        }
        out
    }

    /// Observation row `i` as (latent index, coefficient) pairs.
    pub fn row_coefficients(&self, i: usize, hs: &HyperState) -> (Vec<usize>, Vec<f64>) {
        let r = &self.rows[i];
        (r.entries.iter().map(|e| e.col).collect(), r.entries.iter().map(|e| Self::entry_value(e, hs)).collect())
    }

    /// Adds `Aᵀ diag(d) A` to `values` (a copy of the prior values).
    pub fn add_data_precision(&self, values: &mut [f64], d: &[f64], hs: &HyperState) {
        for (r, &di) in self.rows.iter().zip(d) {
            if di == 0.0 {
                continue;
            }
            let k = r.entries.len();
            let a: Vec<f64> = r.entries.iter().map(|e| Self::entry_value(e, hs)).collect();
            for (ia, &va) in a.iter().enumerate() {
                let s = di * va;
                for (ib, &vb) in a.iter().enumerate() {
                    values[r.pair_pos[ia * k + ib]] += s * vb;
                }
            }
        }
    }

    /// Mesh-based prior precision of one spatial innovation field.
    pub fn spatial_precision(&self, matern: &MaternParams<f64>) -> Result<CscMatrix<f64>> {
        self.spde
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model has no spatial field".into()))?
            .precision_matrix(matern)
    }
}

/// Refuses collinear fixed-effect designs, naming the first dependent
/// column; all-zero columns only warn.
fn check_design_rank(
    spec: &ModelSpec,
    block: usize,
    data: &crate::model::BlockData,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let names = spec.block_covariates(block);
    let n = data.len();
    if n == 0 {
        return Ok(());
    }
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for name in &names {
        let col: Vec<f64> = (0..n).map(|i| data.covariate(name, i).unwrap_or(0.0)).collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            let msg = format!(
                "covariate `{name}` in block `{}` is identically zero; its coefficient is prior-dominated",
                spec.blocks[block].name
            );
            log::warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let mut r = col.clone();
        for q in &basis {
            let d: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
            for (ri, qi) in r.iter_mut().zip(q) {
                *ri -= d * qi;
            }
        }
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if rn < 1e-8 * norm {
            return Err(Error::Config(format!(
                "covariate `{name}` in block `{}` is collinear with earlier columns",
                spec.blocks[block].name
            )));
        }
        basis.push(r.into_iter().map(|v| v / rn).collect());
    }
    Ok(())
}
