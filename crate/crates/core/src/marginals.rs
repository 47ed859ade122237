//! Ordinal cumulative-link marginals and their Gaussian copula intervals.
//!
//! Each group × trait gets its own model
//! `P(Y ≤ c | x) = F(η_c − γᵀx)` with `F` the logistic or normal CDF, so a
//! positive coefficient shifts mass toward higher categories. Models are
//! fitted once by maximum likelihood and then frozen for the whole chain.

use std::fs::File;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{GroupData, SurveyDataset};
use crate::error::{Error, Result};
use crate::stats::{logistic, norm_cdf, norm_pdf, norm_ppf};

const MAX_ITER: usize = 200;
const GRAD_TOL: f64 = 1e-6;
/// Smallest tail probability passed to the normal quantile.
const TAIL_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    #[default]
    Logit,
    Probit,
}

impl Link {
    pub fn cdf(self, t: f64) -> f64 {
        match self {
            Link::Logit => logistic(t),
            Link::Probit => norm_cdf(t),
        }
    }

    fn pdf(self, t: f64) -> f64 {
        if !t.is_finite() {
            return 0.0;
        }
        match self {
            Link::Logit => {
                let f = logistic(t);
                f * logistic(-t)
            }
            Link::Probit => norm_pdf(t),
        }
    }

    fn pdf_derivative(self, t: f64) -> f64 {
        if !t.is_finite() {
            return 0.0;
        }
        match self {
            Link::Logit => {
                let f = logistic(t);
                f * (1.0 - f) * (1.0 - 2.0 * f)
            }
            Link::Probit => -t * norm_pdf(t),
        }
    }

    fn quantile(self, p: f64) -> f64 {
        match self {
            Link::Logit => (p / (1.0 - p)).ln(),
            Link::Probit => norm_ppf(p),
        }
    }

    /// `F(a) − F(b)` for `b < a`, computed on whichever tail is more accurate.
    fn mass(self, b: f64, a: f64) -> f64 {
        if b > 0.0 {
            self.cdf(-b) - self.cdf(-a)
        } else {
            self.cdf(a) - self.cdf(b)
        }
    }

    /// `Φ⁻¹(F(t))` without losing the tails.
    fn to_normal_scale(self, t: f64) -> f64 {
        match self {
            Link::Probit => t,
            Link::Logit => {
                if t <= 0.0 {
                    norm_ppf(logistic(t).max(TAIL_FLOOR))
                } else {
                    -norm_ppf(logistic(-t).max(TAIL_FLOOR))
                }
            }
        }
    }
}

impl std::str::FromStr for Link {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(Link::Logit),
            "probit" => Ok(Link::Probit),
            other => Err(Error::Invalid(format!("unknown link `{other}`"))),
        }
    }
}

/// Fitted cumulative-link model for one trait in one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrdinalMarginalModel {
    pub trait_id: String,
    pub link: Link,
    /// `η_1 < … < η_{C−1}` on the link scale.
    pub thresholds: Vec<f64>,
    /// Covariate effects, no intercept.
    pub gamma: Vec<f64>,
    pub covariate_names: Vec<String>,
    pub loglik: f64,
}

/// Half-open interval `(lo, hi]` of the latent normal coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopulaInterval {
    pub lo: f64,
    pub hi: f64,
}

impl CopulaInterval {
    pub const FULL: CopulaInterval = CopulaInterval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub fn contains(&self, z: f64) -> bool {
        z > self.lo && z <= self.hi
    }

    pub fn is_full(&self) -> bool {
        self.lo == f64::NEG_INFINITY && self.hi == f64::INFINITY
    }
}

impl OrdinalMarginalModel {
    pub fn n_categories(&self) -> usize {
        self.thresholds.len() + 1
    }

    fn linear(&self, x: &[f64]) -> f64 {
        self.gamma.iter().zip(x).map(|(g, v)| g * v).sum()
    }

    /// Threshold `c` (0..=C) minus the linear predictor, ±∞ at the ends.
    fn shifted_threshold(&self, c: usize, lin: f64) -> f64 {
        if c == 0 {
            f64::NEG_INFINITY
        } else if c >= self.n_categories() {
            f64::INFINITY
        } else {
            self.thresholds[c - 1] - lin
        }
    }

    /// Log-probability of category `y` (1-based) at covariates `x`.
    pub fn log_prob(&self, y: u16, x: &[f64]) -> f64 {
        let lin = self.linear(x);
        let y = y as usize;
        let a = self.shifted_threshold(y, lin);
        let b = self.shifted_threshold(y - 1, lin);
        self.link.mass(b, a).ln()
    }

    /// Number of free parameters (thresholds plus coefficients).
    pub fn n_parameters(&self) -> usize {
        self.thresholds.len() + self.gamma.len()
    }
}

/// `F(c | x)`: probability of a response at or below category `c`.
pub fn cumulative_prob(model: &OrdinalMarginalModel, c: usize, x: &[f64]) -> f64 {
    assert!(c <= model.n_categories(), "category index {c} out of range");
    if c == 0 {
        0.0
    } else if c == model.n_categories() {
        1.0
    } else {
        model.link.cdf(model.thresholds[c - 1] - model.linear(x))
    }
}

/// Latent interval for response `y` at covariates `x`; missing maps to the whole line.
pub fn copula_interval(model: &OrdinalMarginalModel, y: Option<u16>, x: &[f64]) -> CopulaInterval {
    let Some(y) = y else {
        return CopulaInterval::FULL;
    };
    let lin = model.linear(x);
    let bound = |c: usize| {
        let t = model.shifted_threshold(c, lin);
        if t.is_infinite() {
            t
        } else {
            model.link.to_normal_scale(t)
        }
    };
    CopulaInterval {
        lo: bound(y as usize - 1),
        hi: bound(y as usize),
    }
}

/// Coefficient per one-standard-deviation change of each covariate.
pub fn standardized_coefficients(
    model: &OrdinalMarginalModel,
    covariate_sds: &[f64],
) -> Result<Vec<f64>> {
    if covariate_sds.len() != model.gamma.len() {
        return Err(Error::Invalid(format!(
            "{} standard deviations for {} coefficients",
            covariate_sds.len(),
            model.gamma.len()
        )));
    }
    if let Some(sd) = covariate_sds.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Invalid(format!(
            "covariate standard deviation must be positive, got {sd}"
        )));
    }
    Ok(model
        .gamma
        .iter()
        .zip(covariate_sds)
        .map(|(g, s)| g * s)
        .collect())
}

/// Maximum-likelihood fit of the cumulative-link model on the observed rows.
///
/// `covariates` is n × m row-major. Newton iterations run on
/// `(η_1, log(η_2 − η_1), …, γ)` so the thresholds stay ordered.
pub fn fit_ordinal(
    trait_id: &str,
    responses: &[Option<u16>],
    covariates: &[f64],
    n_covariates: usize,
    covariate_names: &[String],
    n_categories: usize,
    link: Link,
) -> Result<OrdinalMarginalModel> {
    let m = n_covariates;
    let n_thr = n_categories - 1;
    let rows: Vec<(u16, &[f64])> = responses
        .iter()
        .enumerate()
        .filter_map(|(i, y)| y.map(|y| (y, &covariates[i * m..(i + 1) * m])))
        .collect();
    let fail = |message: String, trace: Vec<f64>| Error::FitFailed {
        message: format!("trait `{trait_id}`: {message}"),
        trace,
    };

    let mut counts = vec![0usize; n_categories];
    for &(y, _) in &rows {
        counts[y as usize - 1] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(fail("fewer than two distinct observed categories".into(), vec![]));
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(fail(format!("category {} is never observed", c + 1), vec![]));
    }
    if rows.len() < m + n_thr {
        return Err(fail(
            format!("{} observed rows for {} parameters", rows.len(), m + n_thr),
            vec![],
        ));
    }

    // Saturated no-covariate solution as the starting point.
    let n_obs = rows.len() as f64;
    let mut cum = 0.0;
    let mut eta0 = Vec::with_capacity(n_thr);
    for c in 0..n_thr {
        cum += counts[c] as f64;
        eta0.push(link.quantile(cum / n_obs));
    }
    let mut theta = vec![0.0; n_thr + m];
    theta[0] = eta0[0];
    for c in 1..n_thr {
        theta[c] = (eta0[c] - eta0[c - 1]).ln();
    }

    let objective = |theta: &[f64]| -> f64 {
        let (eta, gamma) = unpack(theta, n_thr);
        rows.iter()
            .map(|&(y, x)| obs_mass(link, &eta, &gamma, y, x).ln())
            .sum()
    };

    let mut trace = Vec::new();
    let mut ll = objective(&theta);
    for _ in 0..MAX_ITER {
        trace.push(ll);
        let (grad, hess) = derivatives(link, &theta, n_thr, &rows);
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(fail("non-finite gradient".into(), trace));
        }
        if grad.norm() < GRAD_TOL {
            let (eta, gamma) = unpack(&theta, n_thr);
            return Ok(OrdinalMarginalModel {
                trait_id: trait_id.to_string(),
                link,
                thresholds: eta,
                gamma,
                covariate_names: covariate_names.to_vec(),
                loglik: ll,
            });
        }
        let step = newton_step(&grad, &hess)
            .ok_or_else(|| fail("singular Hessian".into(), trace.clone()))?;

        let mut scale = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
            let cand_ll = objective(&cand);
            if cand_ll.is_finite() && cand_ll >= ll - 1e-12 * ll.abs() {
                theta = cand;
                ll = cand_ll;
                improved = true;
                break;
            }
            scale *= 0.5;
        }
        if !improved {
            return Err(fail("line search failed (possible separation)".into(), trace));
        }
    }
    Err(fail(format!("no convergence in {MAX_ITER} iterations"), trace))
}

fn unpack(theta: &[f64], n_thr: usize) -> (Vec<f64>, Vec<f64>) {
    let mut eta = Vec::with_capacity(n_thr);
    eta.push(theta[0]);
    for c in 1..n_thr {
        eta.push(eta[c - 1] + theta[c].exp());
    }
    (eta, theta[n_thr..].to_vec())
}

fn obs_mass(link: Link, eta: &[f64], gamma: &[f64], y: u16, x: &[f64]) -> f64 {
    let lin: f64 = gamma.iter().zip(x).map(|(g, v)| g * v).sum();
    let y = y as usize;
    let a = if y <= eta.len() { eta[y - 1] - lin } else { f64::INFINITY };
    let b = if y >= 2 { eta[y - 2] - lin } else { f64::NEG_INFINITY };
    link.mass(b, a)
}

/// Gradient and Hessian of the log-likelihood with respect to the
/// unconstrained parameters.
fn derivatives(
    link: Link,
    theta: &[f64],
    n_thr: usize,
    rows: &[(u16, &[f64])],
) -> (DVector<f64>, DMatrix<f64>) {
    let m = theta.len() - n_thr;
    let dim = n_thr + m;
    let (eta, gamma) = unpack(theta, n_thr);
    let mut g = DVector::<f64>::zeros(dim);
    let mut h = DMatrix::<f64>::zeros(dim, dim);

    for &(y, x) in rows {
        let y = y as usize;
        let lin: f64 = gamma.iter().zip(x).map(|(g, v)| g * v).sum();
        let upper = (y <= n_thr).then(|| y - 1);
        let lower = (y >= 2).then(|| y - 2);
        let a = upper.map_or(f64::INFINITY, |c| eta[c] - lin);
        let b = lower.map_or(f64::NEG_INFINITY, |c| eta[c] - lin);
        let p = link.mass(b, a);
        let ga = link.pdf(a) / p;
        let gb = -link.pdf(b) / p;
        let haa = link.pdf_derivative(a) / p - ga * ga;
        let hbb = -link.pdf_derivative(b) / p - gb * gb;
        let hab = -ga * gb;

        if let Some(u) = upper {
            g[u] += ga;
            h[(u, u)] += haa;
        }
        if let Some(l) = lower {
            g[l] += gb;
            h[(l, l)] += hbb;
        }
        if let (Some(u), Some(l)) = (upper, lower) {
            h[(u, l)] += hab;
            h[(l, u)] += hab;
        }
        let sa = haa + hab;
        let sb = hbb + hab;
        let sab = haa + hbb + 2.0 * hab;
        for r in 0..m {
            g[n_thr + r] -= x[r] * (ga + gb);
            if let Some(u) = upper {
                h[(u, n_thr + r)] -= x[r] * sa;
                h[(n_thr + r, u)] -= x[r] * sa;
            }
            if let Some(l) = lower {
                h[(l, n_thr + r)] -= x[r] * sb;
                h[(n_thr + r, l)] -= x[r] * sb;
            }
            for s in 0..m {
                h[(n_thr + r, n_thr + s)] += x[r] * x[s] * sab;
            }
        }
    }

    // Chain rule to (η_1, log increments).
    let mut jac = DMatrix::<f64>::identity(dim, dim);
    for c in 0..n_thr {
        for l in 1..=c {
            jac[(c, l)] = theta[l].exp();
        }
    }
    let gt = jac.transpose() * &g;
    let mut ht = jac.transpose() * &h * &jac;
    for l in 1..n_thr {
        let tail: f64 = (l..n_thr).map(|c| g[c]).sum();
        ht[(l, l)] += tail * theta[l].exp();
    }
    (gt, ht)
}

/// Ascent direction: Newton when the Hessian is negative definite,
/// otherwise Levenberg-damped.
fn newton_step(grad: &DVector<f64>, hess: &DMatrix<f64>) -> Option<DVector<f64>> {
    let neg = -hess;
    let scale = neg.diagonal().abs().max().max(1.0);
    let mut damping = 0.0;
    for _ in 0..30 {
        let mut a = neg.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += damping;
        }
        if let Some(chol) = a.cholesky() {
            return Some(chol.solve(grad));
        }
        damping = if damping == 0.0 { 1e-8 * scale } else { damping * 10.0 };
    }
    None
}

/// Fitted models for every group and trait, indexed `[group][trait]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSet {
    pub groups: Vec<String>,
    pub models: Vec<Vec<OrdinalMarginalModel>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRecord {
    pub group: String,
    #[serde(rename = "trait")]
    pub trait_id: String,
    pub link: Link,
    pub thresholds: Vec<f64>,
    pub gamma: Vec<f64>,
    pub loglik: f64,
}

impl MarginalSet {
    /// Fits all K × p models; fits are independent and run in parallel.
    pub fn fit(dataset: &SurveyDataset, link: Link) -> Result<Self> {
        let p = dataset.n_traits();
        let jobs: Vec<(usize, usize)> = (0..dataset.n_groups())
            .flat_map(|g| (0..p).map(move |j| (g, j)))
            .collect();
        let fitted: Vec<Result<OrdinalMarginalModel>> = jobs
            .par_iter()
            .map(|&(g, j)| fit_group_trait(dataset, &dataset.groups[g], j, link))
            .collect();
        let mut models: Vec<Vec<OrdinalMarginalModel>> = vec![Vec::with_capacity(p); dataset.n_groups()];
        for ((g, _), res) in jobs.into_iter().zip(fitted) {
            let model = res.map_err(|e| match e {
                Error::FitFailed { message, trace } => Error::FitFailed {
                    message: format!("group `{}`, {message}", dataset.groups[g].id),
                    trace,
                },
                other => other,
            })?;
            models[g].push(model);
        }
        Ok(MarginalSet {
            groups: dataset.group_ids(),
            models,
        })
    }

    /// n × p row-major copula intervals for group `g`.
    pub fn intervals(&self, group: &GroupData, g: usize) -> Vec<CopulaInterval> {
        let p = group.n_traits;
        let mut out = Vec::with_capacity(group.n() * p);
        for i in 0..group.n() {
            let x = group.covariate_row(i);
            for j in 0..p {
                out.push(copula_interval(&self.models[g][j], group.response(i, j), x));
            }
        }
        out
    }

    pub fn records(&self) -> Vec<MarginalRecord> {
        self.groups
            .iter()
            .zip(&self.models)
            .flat_map(|(gid, ms)| {
                ms.iter().map(move |m| MarginalRecord {
                    group: gid.clone(),
                    trait_id: m.trait_id.clone(),
                    link: m.link,
                    thresholds: m.thresholds.clone(),
                    gamma: m.gamma.clone(),
                    loglik: m.loglik,
                })
            })
            .collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, &self.records()).map_err(|e| Error::parse(path, e))
    }

    /// Rebuilds a set from JSON records, ordered by the dataset's groups and traits.
    pub fn read_json(path: impl AsRef<Path>, dataset: &SurveyDataset) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<MarginalRecord> =
            serde_json::from_reader(file).map_err(|e| Error::parse(path, e))?;
        let mut models = Vec::with_capacity(dataset.n_groups());
        for g in &dataset.groups {
            let mut row = Vec::with_capacity(dataset.n_traits());
            for t in &dataset.traits {
                let r = records
                    .iter()
                    .find(|r| r.group == g.id && r.trait_id == t.trait_id)
                    .ok_or_else(|| {
                        Error::parse(path, format!("no model for ({}, {})", g.id, t.trait_id))
                    })?;
                row.push(OrdinalMarginalModel {
                    trait_id: r.trait_id.clone(),
                    link: r.link,
                    thresholds: r.thresholds.clone(),
                    gamma: r.gamma.clone(),
                    covariate_names: dataset.covariate_names.clone(),
                    loglik: r.loglik,
                });
            }
            models.push(row);
        }
        Ok(MarginalSet {
            groups: dataset.group_ids(),
            models,
        })
    }
}

fn fit_group_trait(
    dataset: &SurveyDataset,
    group: &GroupData,
    j: usize,
    link: Link,
) -> Result<OrdinalMarginalModel> {
    let t = &dataset.traits[j];
    fit_ordinal(
        &t.trait_id,
        &group.trait_column(j),
        &group.covariates,
        group.n_covariates,
        &dataset.covariate_names,
        t.n_categories,
        link,
    )
}
