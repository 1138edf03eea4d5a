//! Versioned binary artifact holding a fitted model.
//!
//! Layout (all integers `u64` little-endian unless noted, `f64` as IEEE-754
//! little-endian bytes, strings as length-prefixed UTF-8):
//!
//! ```text
//! magic    8 bytes  "STEVMFIT"
//! version  u32
//! then sections, each: tag (4 ASCII bytes), payload length, payload
//!   HEAD  label, seed, config text, observation CSV text
//!   THET  hyper names, θ mode, free indices, covariance rows,
//!         log marginal at mode, evaluations, diagnostics
//!   GRID  per point: θ, log posterior, weight, damped flag, x,
//!         latent variances, per-observation (mean, var, grad, curv)
//!   FACT  modal posterior precision as triplets: dim, nnz, then
//!         (row, col, value) for the lower triangle
//!   MARG  hyper marginals (name, kind, fixed, flat, mode, sd, summary),
//!         coefficient summaries, latent mean/sd, linear-predictor mean/sd
//! ```
//!
//! The embedded config and data let a reader rebuild the latent system
//! without refitting.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::inference::{FitResult, GridPoint, HyperMarginal, LatentSystem, Marginal, ObsMoments};
use crate::model::HyperKind;

pub const MAGIC: &[u8; 8] = b"STEVMFIT";
pub const VERSION: u32 = 1;

/// Lower-triangle triplets of a symmetric sparse matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SymmetricTriplets {
    pub dim: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
    pub values: Vec<f64>,
}

impl SymmetricTriplets {
    /// Posterior precision `Q(θ) + Aᵀ diag(c) A` at the modal grid point.
    pub fn modal_precision(sys: &LatentSystem, fit: &FitResult) -> Result<Self> {
        let g = fit.modal_point();
        let hs = sys.hyper_state(&g.theta)?;
        let mut values = sys.prior_values(&hs)?;
        let curv: Vec<f64> = g.obs.iter().map(|o| o.curv).collect();
        sys.add_data_precision(&mut values, &curv, &hs);
        let p = sys.pattern();
        let mut t = Self { dim: p.ncols, ..Default::default() };
        for j in 0..p.ncols {
            for k in p.colptr[j]..p.colptr[j + 1] {
                let i = p.rowidx[k];
                if i >= j {
                    t.rows.push(i);
                    t.cols.push(j);
                    t.values.push(values[k]);
                }
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitArtifact {
    pub seed: u64,
    pub config: String,
    pub observations: String,
    pub fit: FitResult,
    pub precision: SymmetricTriplets,
}

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.0.push(v as u8);
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }
    fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        for &x in v {
            self.usize(x);
        }
    }
    fn strs(&mut self, v: &[String]) {
        self.usize(v.len());
        for s in v {
            self.str(s);
        }
    }
    fn marginal(&mut self, m: &Marginal) {
        self.str(&m.name);
        for v in [m.mean, m.sd, m.q025, m.q50, m.q975] {
            self.f64(v);
        }
    }
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

fn corrupt(msg: &str) -> Error {
    Error::Data(format!("corrupt fit artifact: {msg}"))
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(corrupt("unexpected end of data"));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length overflow"))
    }
    /// Length prefix of a sequence whose items take at least `item` bytes.
    fn len(&mut self, item: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(item) > self.data.len() - self.pos {
            return Err(corrupt("length exceeds data"));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.take(1)?[0] {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(corrupt("bad flag")),
        }
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| corrupt("invalid UTF-8"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn strs(&mut self) -> Result<Vec<String>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.str()).collect()
    }
    fn marginal(&mut self) -> Result<Marginal> {
        Ok(Marginal {
            name: self.str()?,
            mean: self.f64()?,
            sd: self.f64()?,
            q025: self.f64()?,
            q50: self.f64()?,
            q975: self.f64()?,
        })
    }
    fn section(&mut self, tag: &[u8; 4]) -> Result<Cursor<'a>> {
        let t = self.take(4)?;
        if t != tag {
            return Err(corrupt(&format!("expected section {}", String::from_utf8_lossy(tag))));
        }
        let n = self.len(1)?;
        Ok(Cursor { data: self.take(n)?, pos: 0 })
    }
}

const KINDS: [HyperKind; 6] = [
    HyperKind::Precision,
    HyperKind::Range,
    HyperKind::Sd,
    HyperKind::Correlation,
    HyperKind::Shape,
    HyperKind::Sharing,
];

fn kind_code(k: HyperKind) -> u64 {
    KINDS.iter().position(|&x| x == k).expect("listed") as u64
}

fn section(out: &mut Buf, tag: &[u8; 4], body: Buf) {
    out.0.extend_from_slice(tag);
    out.usize(body.0.len());
    out.0.extend_from_slice(&body.0);
}

impl FitArtifact {
    pub fn to_bytes(&self) -> Vec<u8> {
        let f = &self.fit;
        let mut out = Buf::default();
        out.0.extend_from_slice(MAGIC);
        out.0.extend_from_slice(&VERSION.to_le_bytes());

        let mut b = Buf::default();
        b.str(&f.label);
        b.u64(self.seed);
        b.str(&self.config);
        b.str(&self.observations);
        section(&mut out, b"HEAD", b);

        let mut b = Buf::default();
        b.strs(&f.hyper_names);
        b.f64s(&f.theta_mode);
        b.usizes(&f.free);
        b.usize(f.covariance.len());
        for r in &f.covariance {
            b.f64s(r);
        }
        b.f64(f.log_marginal_mode);
        b.usize(f.evaluations);
        b.strs(&f.diagnostics);
        section(&mut out, b"THET", b);

        let mut b = Buf::default();
        b.usize(f.grid.len());
        for g in &f.grid {
            b.f64s(&g.theta);
            b.f64(g.log_post);
            b.f64(g.weight);
            b.bool(g.damped);
            b.f64s(&g.x);
            b.f64s(&g.latent_var);
            b.usize(g.obs.len());
            for o in &g.obs {
                for v in [o.mean, o.var, o.grad, o.curv] {
                    b.f64(v);
                }
            }
        }
        section(&mut out, b"GRID", b);

        let mut b = Buf::default();
        let p = &self.precision;
        b.usize(p.dim);
        b.usize(p.values.len());
        for k in 0..p.values.len() {
            b.usize(p.rows[k]);
            b.usize(p.cols[k]);
            b.f64(p.values[k]);
        }
        section(&mut out, b"FACT", b);

        let mut b = Buf::default();
        b.usize(f.hypers.len());
        for h in &f.hypers {
            b.str(&h.name);
            b.u64(kind_code(h.kind));
            b.bool(h.fixed);
            b.bool(h.flat);
            b.f64(h.mode_internal);
            b.f64(h.sd_internal);
            b.marginal(&h.summary);
        }
        b.usize(f.coefficients.len());
        for c in &f.coefficients {
            b.marginal(c);
        }
        b.f64s(&f.latent_mean);
        b.f64s(&f.latent_sd);
        b.f64s(&f.eta_mean);
        b.f64s(&f.eta_sd);
        section(&mut out, b"MARG", b);
        out.0
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut c = Cursor { data, pos: 0 };
        if c.take(8).map_err(|_| corrupt("too short"))? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Data(format!("unsupported fit artifact version {version} (expected {VERSION})")));
        }

        let mut s = c.section(b"HEAD")?;
        let label = s.str()?;
        let seed = s.u64()?;
        let config = s.str()?;
        let observations = s.str()?;

        let mut s = c.section(b"THET")?;
        let hyper_names = s.strs()?;
        let theta_mode = s.f64s()?;
        let free = s.usizes()?;
        let n = s.len(8)?;
        let covariance = (0..n).map(|_| s.f64s()).collect::<Result<Vec<_>>>()?;
        let log_marginal_mode = s.f64()?;
        let evaluations = s.usize()?;
        let diagnostics = s.strs()?;

        let mut s = c.section(b"GRID")?;
        let n = s.len(8)?;
        let mut grid = Vec::with_capacity(n);
        for _ in 0..n {
            let theta = s.f64s()?;
            let log_post = s.f64()?;
            let weight = s.f64()?;
            let damped = s.bool()?;
            let x = s.f64s()?;
            let latent_var = s.f64s()?;
            let m = s.len(32)?;
            let obs = (0..m)
                .map(|_| Ok(ObsMoments { mean: s.f64()?, var: s.f64()?, grad: s.f64()?, curv: s.f64()? }))
                .collect::<Result<Vec<_>>>()?;
            grid.push(GridPoint { theta, log_post, weight, x, latent_var, obs, damped });
        }

        let mut s = c.section(b"FACT")?;
        let dim = s.usize()?;
        let nnz = s.len(24)?;
        let mut precision = SymmetricTriplets { dim, ..Default::default() };
        for _ in 0..nnz {
            let (i, j, v) = (s.usize()?, s.usize()?, s.f64()?);
            if i >= dim || j > i {
                return Err(corrupt("precision triplet out of range"));
            }
            precision.rows.push(i);
            precision.cols.push(j);
            precision.values.push(v);
        }

        let mut s = c.section(b"MARG")?;
        let n = s.len(8)?;
        let mut hypers = Vec::with_capacity(n);
        for _ in 0..n {
            let name = s.str()?;
            let kind = *KINDS.get(s.usize()?).ok_or_else(|| corrupt("bad hyperparameter kind"))?;
            hypers.push(HyperMarginal {
                name,
                kind,
                fixed: s.bool()?,
                flat: s.bool()?,
                mode_internal: s.f64()?,
                sd_internal: s.f64()?,
                summary: s.marginal()?,
            });
        }
        let n = s.len(8)?;
        let coefficients = (0..n).map(|_| s.marginal()).collect::<Result<Vec<_>>>()?;
        let latent_mean = s.f64s()?;
        let latent_sd = s.f64s()?;
        let eta_mean = s.f64s()?;
        let eta_sd = s.f64s()?;
        if c.pos != data.len() {
            return Err(corrupt("trailing bytes"));
        }
        if theta_mode.len() != hyper_names.len() || grid.is_empty() {
            return Err(corrupt("inconsistent hyperparameter section"));
        }

        let fit = FitResult {
            label,
            hyper_names,
            theta_mode,
            free,
            covariance,
            grid,
            hypers,
            coefficients,
            latent_mean,
            latent_sd,
            eta_mean,
            eta_sd,
            log_marginal_mode,
            evaluations,
            diagnostics,
        };
        Ok(Self { seed, config, observations, fit, precision })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path.as_ref())?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut data = Vec::new();
        std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.as_ref().display())))?
            .read_to_end(&mut data)?;
        Self::from_bytes(&data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn marginal(name: &str, m: f64) -> Marginal {
        Marginal { name: name.into(), mean: m, sd: 0.5, q025: m - 1.0, q50: m, q975: m + 1.0 }
    }

    fn sample() -> FitArtifact {
        let g = GridPoint {
            theta: vec![0.1, -0.2],
            log_post: -10.5,
            weight: 1.0,
            x: vec![1.0, 2.0, 3.0],
            latent_var: vec![0.1, 0.2, 0.3],
            obs: vec![ObsMoments { mean: 1.0, var: 0.1, grad: -0.5, curv: 2.0 }],
            damped: false,
        };
        let fit = FitResult {
            label: "toy".into(),
            hyper_names: vec!["precision".into(), "xi".into()],
            theta_mode: vec![0.1, -0.2],
            free: vec![0],
            covariance: vec![vec![0.04]],
            grid: vec![g],
            hypers: vec![HyperMarginal {
                name: "precision".into(),
                kind: HyperKind::Precision,
                fixed: false,
                flat: false,
                mode_internal: 0.1,
                sd_internal: 0.2,
                summary: marginal("precision", 1.1),
            }],
            coefficients: vec![marginal("intercept", 3.0)],
            latent_mean: vec![1.0, 2.0, 3.0],
            latent_sd: vec![0.3; 3],
            eta_mean: vec![1.0],
            eta_sd: vec![0.3],
            log_marginal_mode: -12.0,
            evaluations: 42,
            diagnostics: vec!["note".into()],
        };
        let precision =
            SymmetricTriplets { dim: 3, rows: vec![0, 1, 2], cols: vec![0, 0, 2], values: vec![2.0, -1.0, 1.5] };
        FitArtifact { seed: 7, config: "[model]\n".into(), observations: "a,b\n1,2\n".into(), fit, precision }
    }

    #[test]
    fn roundtrip() {
        let a = sample();
        let bytes = a.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(FitArtifact::from_bytes(&bytes).unwrap(), a);
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let bytes = sample().to_bytes();
        for cut in [0, 5, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(FitArtifact::from_bytes(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        bad[8] = 99;
        assert!(FitArtifact::from_bytes(&bad).unwrap_err().to_string().contains("version"));
    }
}
