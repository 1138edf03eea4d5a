//! Joint Gaussian–Gumbel model of annual means and maxima.
//!
//! Block `mean` (Gaussian) has `η = x^Sᵀβ^S + x^NSᵀβ_mean + u`; block `max`
//! (Gumbel) has `η = Σ β₁ⱼ x^S_j β^S_j + x^NSᵀβ_max + β₂ u`, with the same
//! latent `u` entering block `max` through the scale `β₂`.

use std::collections::BTreeSet;

use crate::data::{RESPONSE_MAX, RESPONSE_MEAN};
use crate::error::{Error, Result};
use crate::inference::{FitResult, Marginal};
use crate::model::{BlockSpec, FamilyKind, ModelSpec, PriorConfig, SpecBuilder, Target, Term, INTERCEPT};
use crate::numeric::normal_cdf;

pub const BETA2: &str = "beta2";

pub fn beta1_name(covariate: &str) -> String {
    format!("beta1.{covariate}")
}

/// Shared and block-specific covariate sets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SharingLink {
    pub shared: Vec<String>,
    pub nonshared: Vec<String>,
}

impl SharingLink {
    pub fn new(shared: &[&str], nonshared: &[&str]) -> Result<Self> {
        let link = Self {
            shared: shared.iter().map(|s| s.to_string()).collect(),
            nonshared: nonshared.iter().map(|s| s.to_string()).collect(),
        };
        link.check()?;
        Ok(link)
    }

    pub fn check(&self) -> Result<()> {
        let s: BTreeSet<&String> = self.shared.iter().collect();
        if s.len() != self.shared.len() {
            return Err(Error::Config("duplicate covariate in the shared set".into()));
        }
        let ns: BTreeSet<&String> = self.nonshared.iter().collect();
        if ns.len() != self.nonshared.len() {
            return Err(Error::Config("duplicate covariate in the non-shared set".into()));
        }
        if let Some(c) = s.intersection(&ns).next() {
            return Err(Error::Config(format!("covariate `{c}` is in both the shared and non-shared sets")));
        }
        Ok(())
    }
}

/// Two-block spec. Each block gets its own intercept unless `intercept` is
/// listed as shared.
pub fn build_joint_spec(link: &SharingLink, priors: &PriorConfig, diameter: f64) -> Result<ModelSpec> {
    link.check()?;
    let mut b = SpecBuilder::new("joint", priors, diameter);
    b.space_time("u", "a", "range", "sigma")?;
    b.likelihood_precision("precision.mean")?;
    b.likelihood_precision("precision.max")?;
    let mut nonshared: Vec<String> = link.nonshared.clone();
    if !nonshared.iter().any(|c| c == INTERCEPT) && !link.shared.iter().any(|c| c == INTERCEPT) {
        nonshared.insert(0, INTERCEPT.into());
    }
    let mut mean_terms = Vec::new();
    let mut max_terms = Vec::new();
    for c in &nonshared {
        mean_terms.push(b.coefficient_term(&format!("mean.{c}"), c, None));
        max_terms.push(b.coefficient_term(&format!("max.{c}"), c, None));
    }
    for c in &link.shared {
        let scale = beta1_name(c);
        b.sharing(&scale)?;
        mean_terms.push(b.coefficient_term(&format!("shared.{c}"), c, None));
        max_terms.push(b.coefficient_term(&format!("shared.{c}"), c, Some(&scale)));
    }
    b.sharing(BETA2)?;
    mean_terms.push(Term { target: Target::Effect("u".into()), scale: None });
    max_terms.push(Term { target: Target::Effect("u".into()), scale: Some(BETA2.into()) });
    b.blocks.push(BlockSpec {
        name: "mean".into(),
        family: FamilyKind::Gaussian,
        response: RESPONSE_MEAN.into(),
        terms: mean_terms,
        precision: "precision.mean".into(),
        shape: None,
    });
    b.blocks.push(BlockSpec {
        name: "max".into(),
        family: FamilyKind::Gumbel,
        response: RESPONSE_MAX.into(),
        terms: max_terms,
        precision: "precision.max".into(),
        shape: None,
    });
    b.finish()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharingPosterior {
    pub summary: Marginal,
    pub prob_negative: f64,
    /// `(value, density)` pairs over ±4 sd, for plotting.
    pub density: Vec<(f64, f64)>,
    pub prior_dominated: bool,
}

/// Posterior summaries of the sharing coefficients β₁ and β₂.
pub fn sharing_posteriors(spec: &ModelSpec, fit: &FitResult) -> Result<Vec<SharingPosterior>> {
    let mut out = Vec::new();
    for h in &spec.hypers {
        if h.kind != crate::model::HyperKind::Sharing {
            continue;
        }
        let m = fit
            .hyper(&h.name)
            .ok_or_else(|| Error::InvalidArgument(format!("fit has no hyperparameter `{}`", h.name)))?;
        let (mu, sd) = (m.mode_internal, m.sd_internal);
        let prob_negative = if sd > 0.0 {
            normal_cdf(-mu / sd)
        } else if mu < 0.0 {
            1.0
        } else {
            0.0
        };
        let density = (0..=80)
            .map(|k| {
                let x = mu + sd * (k as f64 / 10.0 - 4.0);
                let d = if sd > 0.0 {
                    (-0.5 * ((x - mu) / sd).powi(2)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
                } else {
                    0.0
                };
                (x, d)
            })
            .collect();
        let prior_sd = match h.prior {
            crate::priors::PriorSpec::Gaussian { sd, .. } => Some(sd),
            _ => None,
        };
        let prior_dominated = !h.fixed && (m.flat || prior_sd.is_some_and(|s| sd >= 0.9 * s));
        if prior_dominated {
            log::warn!("sharing coefficient `{}` is prior-dominated (posterior sd {sd:.3})", h.name);
        }
        out.push(SharingPosterior { summary: m.summary.clone(), prob_negative, density, prior_dominated });
    }
    Ok(out)
}
