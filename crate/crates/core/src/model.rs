//! Model specifications: likelihood blocks, latent terms and hyperparameters.

use std::collections::BTreeMap;

use crate::error::{invalid, Error, Result};
use crate::priors::{
    default_gev_shape_prior, default_sharing_prior, PcCor1, PcMatern, PcSd, PriorSpec, TruncatedGaussian,
    VAGUE_COEFFICIENT_SD,
};

/// Name of the implicit all-ones covariate.
pub const INTERCEPT: &str = "intercept";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FamilyKind {
    Gaussian,
    Gumbel,
    Gev,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Gumbel => "gumbel",
            FamilyKind::Gev => "gev",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(FamilyKind::Gaussian),
            "gumbel" => Ok(FamilyKind::Gumbel),
            "gev" => Ok(FamilyKind::Gev),
            other => Err(Error::Config(format!("unknown family `{other}` (expected gaussian, gumbel or gev)"))),
        }
    }
}

/// How a hyperparameter maps to the unconstrained internal scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperKind {
    /// Likelihood or AR precision `τ`, internally `ln τ`; prior on `1/√τ`.
    Precision,
    /// Matérn range, internally `ln ρ`.
    Range,
    /// Matérn marginal sd, internally `ln σ`.
    Sd,
    /// Autocorrelation, internally `ln((1+a)/(1−a))`.
    Correlation,
    /// GEV tail, identity.
    Shape,
    /// Sharing (scaling) coefficient, identity.
    Sharing,
}

impl HyperKind {
    pub fn name(self) -> &'static str {
        match self {
            HyperKind::Precision => "precision",
            HyperKind::Range => "range",
            HyperKind::Sd => "sd",
            HyperKind::Correlation => "correlation",
            HyperKind::Shape => "shape",
            HyperKind::Sharing => "sharing",
        }
    }

    pub fn to_internal(self, x: f64) -> Result<f64> {
        let ok = match self {
            HyperKind::Precision | HyperKind::Range | HyperKind::Sd => x > 0.0,
            HyperKind::Correlation => x.abs() < 1.0,
            HyperKind::Shape | HyperKind::Sharing => x.is_finite(),
        };
        if !ok || !x.is_finite() {
            return invalid(format!("value {x} is outside the domain of a {} parameter", self.name()));
        }
        Ok(match self {
            HyperKind::Precision | HyperKind::Range | HyperKind::Sd => x.ln(),
            HyperKind::Correlation => ((1.0 + x) / (1.0 - x)).ln(),
            HyperKind::Shape | HyperKind::Sharing => x,
        })
    }

    pub fn from_internal(self, theta: f64) -> f64 {
        match self {
            HyperKind::Precision | HyperKind::Range | HyperKind::Sd => theta.exp(),
            HyperKind::Correlation => (theta / 2.0).tanh(),
            HyperKind::Shape | HyperKind::Sharing => theta,
        }
    }

    /// Log prior density on the internal scale, including the Jacobian.
    pub fn log_prior_internal(self, theta: f64, prior: &PriorSpec) -> f64 {
        match self {
            HyperKind::Precision => {
                let sigma = (-theta / 2.0).exp();
                prior.log_density(sigma) + (sigma / 2.0).ln()
            }
            HyperKind::Range | HyperKind::Sd => prior.log_density(theta.exp()) + theta,
            HyperKind::Correlation => {
                let a = (theta / 2.0).tanh();
                prior.log_density(a) + ((1.0 - a * a) / 2.0).ln()
            }
            HyperKind::Shape | HyperKind::Sharing => prior.log_density(theta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperSpec {
    pub name: String,
    pub kind: HyperKind,
    pub prior: PriorSpec,
    /// Natural-scale start; `None` picks a data-driven default.
    pub start: Option<f64>,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EffectKind {
    /// `u(s,t) = a u(s,t−1) + w(s,t)` with Matérn innovations.
    SpaceTime { a: String, range: String, sigma: String },
    /// AR(1) `f(t)`.
    Temporal { a: String, precision: String },
    /// Matérn `w(s)`.
    Spatial { range: String, sigma: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EffectSpec {
    pub name: String,
    pub kind: EffectKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    /// A scalar coefficient multiplying `covariate`.
    Coefficient { coefficient: String, covariate: String },
    /// A random effect evaluated at the observation's site/year.
    Effect(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Term {
    pub target: Target,
    /// Hyperparameter multiplying this term.
    pub scale: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockSpec {
    pub name: String,
    pub family: FamilyKind,
    pub response: String,
    pub terms: Vec<Term>,
    /// Hyperparameter holding the family precision `1/σ²`.
    pub precision: String,
    /// Hyperparameter holding the GEV tail.
    pub shape: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSpec {
    pub name: String,
    pub prior_sd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub label: String,
    pub blocks: Vec<BlockSpec>,
    pub effects: Vec<EffectSpec>,
    pub coefficients: Vec<CoefficientSpec>,
    pub hypers: Vec<HyperSpec>,
}

/// User-level prior settings shared by all model builders.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorConfig {
    /// `Prob(1/√τ > u) = α` for likelihood precisions.
    pub likelihood_sd: (f64, f64),
    /// `Prob(1/√τ_AR > u) = α`.
    pub ar_sd: (f64, f64),
    /// `Prob(ρ_M < ρ₀) = α`; `None` uses 1% of the domain diameter.
    pub range: (Option<f64>, f64),
    /// `Prob(σ_M > u) = α`.
    pub field_sd: (f64, f64),
    /// `Prob(a > 0)`.
    pub cor_p0: f64,
    pub coefficient_sd: f64,
    /// Mean, sd and symmetric bound of the truncated-normal tail prior.
    pub shape: (f64, f64, f64),
    pub sharing_sd: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            likelihood_sd: (3.0, 0.01),
            ar_sd: (5.0, 0.01),
            range: (None, 0.01),
            field_sd: (3.0, 0.01),
            cor_p0: 0.9,
            coefficient_sd: VAGUE_COEFFICIENT_SD,
            shape: (0.0, 0.25, 0.5),
            sharing_sd: 5.0,
        }
    }
}

impl PriorConfig {
    pub fn likelihood_prior(&self) -> Result<PriorSpec> {
        Ok(PriorSpec::PcSd(PcSd::new(self.likelihood_sd.0, self.likelihood_sd.1)?))
    }

    pub fn ar_precision_prior(&self) -> Result<PriorSpec> {
        Ok(PriorSpec::PcSd(PcSd::new(self.ar_sd.0, self.ar_sd.1)?))
    }

    pub fn range_prior(&self, diameter: f64) -> Result<PriorSpec> {
        let r0 = self.range.0.unwrap_or(0.01 * diameter);
        Ok(PriorSpec::PcRange(PcMatern::new(r0, self.range.1, self.field_sd.0, self.field_sd.1)?))
    }

    pub fn field_sd_prior(&self) -> Result<PriorSpec> {
        Ok(PriorSpec::PcSd(PcSd::new(self.field_sd.0, self.field_sd.1)?))
    }

    pub fn cor_prior(&self) -> Result<PriorSpec> {
        Ok(PriorSpec::PcCor1(PcCor1::new(self.cor_p0)?))
    }

    pub fn shape_prior(&self) -> Result<PriorSpec> {
        let (m, sd, b) = self.shape;
        if (m, sd, b) == (0.0, 0.25, 0.5) {
            return Ok(default_gev_shape_prior());
        }
        Ok(PriorSpec::TruncatedGaussian(TruncatedGaussian::new(m, sd, -b, b)?))
    }

    pub fn sharing_prior(&self) -> Result<PriorSpec> {
        if self.sharing_sd == 5.0 {
            return Ok(default_sharing_prior());
        }
        PriorSpec::gaussian(0.0, self.sharing_sd)
    }
}

/// The four single-response model classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelClass {
    /// Gumbel, fixed effects plus AR(1)⊗SPDE field.
    M1,
    /// Gumbel, fixed effects plus `f(t) + w(s) + u(s,t)`.
    M2,
    /// GEV version of M1.
    M3,
    /// GEV version of M2.
    M4,
}

impl ModelClass {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().trim_start_matches("model").trim() {
            "1" | "m1" => Ok(ModelClass::M1),
            "2" | "m2" => Ok(ModelClass::M2),
            "3" | "m3" => Ok(ModelClass::M3),
            "4" | "m4" => Ok(ModelClass::M4),
            _ => Err(Error::Config(format!("unknown model class `{s}` (expected 1-4 or joint)"))),
        }
    }

    pub fn family(self) -> FamilyKind {
        match self {
            ModelClass::M1 | ModelClass::M2 => FamilyKind::Gumbel,
            ModelClass::M3 | ModelClass::M4 => FamilyKind::Gev,
        }
    }

    pub fn separable(self) -> bool {
        matches!(self, ModelClass::M2 | ModelClass::M4)
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelClass::M1 => "model1",
            ModelClass::M2 => "model2",
            ModelClass::M3 => "model3",
            ModelClass::M4 => "model4",
        }
    }
}

impl ModelSpec {
    /// Single-block spec for one of the four classes. Covariates exclude the
    /// intercept, which is always added.
    pub fn single(
        class: ModelClass,
        response: &str,
        covariates: &[&str],
        priors: &PriorConfig,
        diameter: f64,
    ) -> Result<Self> {
        let mut b = SpecBuilder::new(class.label(), priors, diameter);
        b.space_time("u", "a", "range", "sigma")?;
        if class.separable() {
            // a, range and sigma are shared by name between the three terms.
            b.temporal("f", "a", "ar_precision")?;
            b.spatial("w", "range", "sigma")?;
        }
        let precision = "precision".to_string();
        b.likelihood_precision(&precision)?;
        let shape = if class.family() == FamilyKind::Gev {
            b.shape("xi")?;
            Some("xi".to_string())
        } else {
            None
        };
        let mut terms = vec![b.coefficient_term(INTERCEPT, INTERCEPT, None)];
        for c in covariates {
            terms.push(b.coefficient_term(c, c, None));
        }
        let mut effects = vec!["u".to_string()];
        if class.separable() {
            effects.push("f".into());
            effects.push("w".into());
        }
        for e in effects {
            terms.push(Term { target: Target::Effect(e), scale: None });
        }
        b.blocks.push(BlockSpec {
            name: "max".into(),
            family: class.family(),
            response: response.to_string(),
            terms,
            precision,
            shape,
        });
        b.finish()
    }

    /// Fully Gaussian spec with intercept, covariates and optional
    /// space–time field: the conjugate case.
    pub fn gaussian(
        response: &str,
        covariates: &[&str],
        space_time: bool,
        priors: &PriorConfig,
        diameter: f64,
    ) -> Result<Self> {
        let mut b = SpecBuilder::new("gaussian", priors, diameter);
        b.likelihood_precision("precision")?;
        let mut terms = vec![b.coefficient_term(INTERCEPT, INTERCEPT, None)];
        for c in covariates {
            terms.push(b.coefficient_term(c, c, None));
        }
        if space_time {
            b.space_time("u", "a", "range", "sigma")?;
            terms.push(Term { target: Target::Effect("u".into()), scale: None });
        }
        b.blocks.push(BlockSpec {
            name: "mean".into(),
            family: FamilyKind::Gaussian,
            response: response.to_string(),
            terms,
            precision: "precision".into(),
            shape: None,
        });
        b.finish()
    }

    pub fn hyper_index(&self, name: &str) -> Option<usize> {
        self.hypers.iter().position(|h| h.name == name)
    }

    pub fn effect_index(&self, name: &str) -> Option<usize> {
        self.effects.iter().position(|e| e.name == name)
    }

    pub fn coefficient_index(&self, name: &str) -> Option<usize> {
        self.coefficients.iter().position(|c| c.name == name)
    }

    pub fn hyper_mut(&mut self, name: &str) -> Result<&mut HyperSpec> {
        let names: Vec<String> = self.hypers.iter().map(|h| h.name.clone()).collect();
        self.hypers
            .iter_mut()
            .find(|h| h.name == name)
            .ok_or_else(|| Error::Config(format!("unknown hyperparameter `{name}` (known: {})", names.join(", "))))
    }

    /// Fixes a hyperparameter at a natural-scale value.
    pub fn fix(&mut self, name: &str, value: f64) -> Result<()> {
        let h = self.hyper_mut(name)?;
        h.kind.to_internal(value)?;
        h.start = Some(value);
        h.fixed = true;
        Ok(())
    }

    pub fn set_start(&mut self, name: &str, value: f64) -> Result<()> {
        let h = self.hyper_mut(name)?;
        h.kind.to_internal(value)?;
        h.start = Some(value);
        Ok(())
    }

    /// Covariate names used by a block, intercept included.
    pub fn block_covariates(&self, block: usize) -> Vec<String> {
        let mut out = Vec::new();
        for t in &self.blocks[block].terms {
            if let Target::Coefficient { covariate, .. } = &t.target {
                if !out.contains(covariate) {
                    out.push(covariate.clone());
                }
            }
        }
        out
    }

    /// Checks cross-references between blocks, terms, effects and hypers.
    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("model has no likelihood blocks".into()));
        }
        let mut seen = BTreeMap::new();
        for h in &self.hypers {
            if seen.insert(h.name.clone(), ()).is_some() {
                return Err(Error::Config(format!("duplicate hyperparameter `{}`", h.name)));
            }
        }
        let need_hyper = |name: &str, kind: HyperKind| -> Result<()> {
            match self.hypers.iter().find(|h| h.name == name) {
                Some(h) if h.kind == kind => Ok(()),
                Some(h) => Err(Error::Config(format!(
                    "hyperparameter `{name}` is a {} parameter, expected {}",
                    h.kind.name(),
                    kind.name()
                ))),
                None => Err(Error::Config(format!("missing hyperparameter `{name}`"))),
            }
        };
        for e in &self.effects {
            match &e.kind {
                EffectKind::SpaceTime { a, range, sigma } => {
                    need_hyper(a, HyperKind::Correlation)?;
                    need_hyper(range, HyperKind::Range)?;
                    need_hyper(sigma, HyperKind::Sd)?;
                }
                EffectKind::Temporal { a, precision } => {
                    need_hyper(a, HyperKind::Correlation)?;
                    need_hyper(precision, HyperKind::Precision)?;
                }
                EffectKind::Spatial { range, sigma } => {
                    need_hyper(range, HyperKind::Range)?;
                    need_hyper(sigma, HyperKind::Sd)?;
                }
            }
        }
        for c in &self.coefficients {
            if !(c.prior_sd > 0.0) {
                return Err(Error::Config(format!("coefficient `{}` needs a positive prior sd", c.name)));
            }
        }
        for b in &self.blocks {
            need_hyper(&b.precision, HyperKind::Precision)?;
            match (&b.shape, b.family) {
                (Some(s), FamilyKind::Gev) => need_hyper(s, HyperKind::Shape)?,
                (None, FamilyKind::Gev) => {
                    return Err(Error::Config(format!("GEV block `{}` needs a shape parameter", b.name)))
                }
                (Some(_), _) => {
                    return Err(Error::Config(format!("block `{}` is not GEV but has a shape parameter", b.name)))
                }
                (None, _) => {}
            }
            for t in &b.terms {
                match &t.target {
                    Target::Coefficient { coefficient, .. } => {
                        if self.coefficient_index(coefficient).is_none() {
                            return Err(Error::Config(format!(
                                "block `{}` references unknown coefficient `{coefficient}`",
                                b.name
                            )));
                        }
                    }
                    Target::Effect(e) => {
                        if self.effect_index(e).is_none() {
                            return Err(Error::Config(format!("block `{}` references unknown effect `{e}`", b.name)));
                        }
                    }
                }
                if let Some(s) = &t.scale {
                    need_hyper(s, HyperKind::Sharing)?;
                }
            }
        }
        Ok(())
    }
}

/// Incremental construction of a [`ModelSpec`] with de-duplicated hypers.
pub struct SpecBuilder<'a> {
    pub label: String,
    pub priors: &'a PriorConfig,
    pub diameter: f64,
    pub blocks: Vec<BlockSpec>,
    pub effects: Vec<EffectSpec>,
    pub coefficients: Vec<CoefficientSpec>,
    pub hypers: Vec<HyperSpec>,
}

impl<'a> SpecBuilder<'a> {
    pub fn new(label: &str, priors: &'a PriorConfig, diameter: f64) -> Self {
        Self {
            label: label.to_string(),
            priors,
            diameter,
            blocks: Vec::new(),
            effects: Vec::new(),
            coefficients: Vec::new(),
            hypers: Vec::new(),
        }
    }

    pub fn hyper(&mut self, name: &str, kind: HyperKind, prior: PriorSpec) {
        if self.hypers.iter().any(|h| h.name == name) {
            return;
        }
        self.hypers.push(HyperSpec { name: name.to_string(), kind, prior, start: None, fixed: false });
    }

    pub fn likelihood_precision(&mut self, name: &str) -> Result<()> {
        let p = self.priors.likelihood_prior()?;
        self.hyper(name, HyperKind::Precision, p);
        Ok(())
    }

    pub fn shape(&mut self, name: &str) -> Result<()> {
        let p = self.priors.shape_prior()?;
        self.hyper(name, HyperKind::Shape, p);
        Ok(())
    }

    pub fn sharing(&mut self, name: &str) -> Result<()> {
        let p = self.priors.sharing_prior()?;
        self.hyper(name, HyperKind::Sharing, p);
        Ok(())
    }

    fn matern_hypers(&mut self, range: &str, sigma: &str) -> Result<()> {
        let rp = self.priors.range_prior(self.diameter)?;
        let sp = self.priors.field_sd_prior()?;
        self.hyper(range, HyperKind::Range, rp);
        self.hyper(sigma, HyperKind::Sd, sp);
        Ok(())
    }

    pub fn space_time(&mut self, name: &str, a: &str, range: &str, sigma: &str) -> Result<()> {
        let cp = self.priors.cor_prior()?;
        self.hyper(a, HyperKind::Correlation, cp);
        self.matern_hypers(range, sigma)?;
        self.effects.push(EffectSpec {
            name: name.into(),
            kind: EffectKind::SpaceTime { a: a.into(), range: range.into(), sigma: sigma.into() },
        });
        Ok(())
    }

    pub fn temporal(&mut self, name: &str, a: &str, precision: &str) -> Result<()> {
        let cp = self.priors.cor_prior()?;
        let pp = self.priors.ar_precision_prior()?;
        self.hyper(a, HyperKind::Correlation, cp);
        self.hyper(precision, HyperKind::Precision, pp);
        self.effects.push(EffectSpec {
            name: name.into(),
            kind: EffectKind::Temporal { a: a.into(), precision: precision.into() },
        });
        Ok(())
    }

    pub fn spatial(&mut self, name: &str, range: &str, sigma: &str) -> Result<()> {
        self.matern_hypers(range, sigma)?;
        self.effects.push(EffectSpec {
            name: name.into(),
            kind: EffectKind::Spatial { range: range.into(), sigma: sigma.into() },
        });
        Ok(())
    }

    /// Registers the coefficient if new and returns a term using it.
    pub fn coefficient_term(&mut self, coefficient: &str, covariate: &str, scale: Option<&str>) -> Term {
        if !self.coefficients.iter().any(|c| c.name == coefficient) {
            self.coefficients
                .push(CoefficientSpec { name: coefficient.to_string(), prior_sd: self.priors.coefficient_sd });
        }
        Term {
            target: Target::Coefficient { coefficient: coefficient.into(), covariate: covariate.into() },
            scale: scale.map(str::to_string),
        }
    }

    pub fn finish(self) -> Result<ModelSpec> {
        let spec = ModelSpec {
            label: self.label,
            blocks: self.blocks,
            effects: self.effects,
            coefficients: self.coefficients,
            hypers: self.hypers,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Observations of one likelihood block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockData {
    pub y: Vec<f64>,
    /// Named covariate columns (the intercept is implicit).
    pub covariates: BTreeMap<String, Vec<f64>>,
    pub locations: Vec<[f64; 2]>,
    /// Year index in `0..n_times`.
    pub times: Vec<usize>,
}

impl BlockData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Value of covariate `name` at row `i`.
    pub fn covariate(&self, name: &str, i: usize) -> Option<f64> {
        if name == INTERCEPT {
            return Some(1.0);
        }
        self.covariates.get(name).map(|c| c[i])
    }

    pub fn check(&self, block: &str) -> Result<()> {
        let n = self.y.len();
        if self.locations.len() != n || self.times.len() != n {
            return Err(Error::Config(format!(
                "block `{block}` has {n} responses but {} locations and {} times",
                self.locations.len(),
                self.times.len()
            )));
        }
        for (name, col) in &self.covariates {
            if col.len() != n {
                return Err(Error::Config(format!(
                    "covariate `{name}` in block `{block}` has {} values for {n} responses",
                    col.len()
                )));
            }
        }
        if let Some(i) = self.y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("block `{block}` response {i} is not finite")));
        }
        Ok(())
    }
}

/// Data for all blocks plus the number of years covered by time indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelData {
    pub blocks: Vec<BlockData>,
    pub n_times: usize,
}

impl ModelData {
    pub fn num_observations(&self) -> usize {
        self.blocks.iter().map(BlockData::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms_roundtrip() {
        for (kind, x) in [
            (HyperKind::Precision, 2.5),
            (HyperKind::Range, 0.3),
            (HyperKind::Correlation, -0.8),
            (HyperKind::Shape, 0.1),
        ] {
            let t = kind.to_internal(x).unwrap();
            assert!((kind.from_internal(t) - x).abs() < 1e-14);
        }
        assert!(HyperKind::Correlation.to_internal(1.0).is_err());
        assert!(HyperKind::Range.to_internal(-1.0).is_err());
    }

    #[test]
    fn separable_classes_share_hypers_by_name() {
        let p = PriorConfig::default();
        let m2 = ModelSpec::single(ModelClass::M2, "y", &["x1"], &p, 1.0).unwrap();
        let names: Vec<_> = m2.hypers.iter().map(|h| h.name.as_str()).collect();
        assert_eq!(names, ["a", "range", "sigma", "ar_precision", "precision"]);
        let m3 = ModelSpec::single(ModelClass::M3, "y", &[], &p, 1.0).unwrap();
        assert!(m3.hyper_index("xi").is_some());
        let mut bad = m3.clone();
        bad.blocks[0].shape = None;
        assert!(bad.validate().is_err());
    }
}
