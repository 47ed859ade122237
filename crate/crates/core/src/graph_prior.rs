//! Latent probit random-graph prior linking the group graphs.
//!
//! Edge `e` of group `k` is present with probability `Φ(score)`, where
//! `score = α_k + βᵀ Σ_{k'≠k} sim_{kk'} s_{k',e} + c_kᵀ Σ_{k'≠k} c_{k'} s_{k',e}`
//! and `s_{k',e} = ±1` according to whether group `k'` has the edge.
//! Parameters are updated by probit data augmentation on the product of
//! these conditionals.

use std::fmt;
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::copula_latent::truncated_normal_sample;
use crate::dataset::ProximityData;
use crate::error::{Error, Result};
use crate::graph::{edge_slots, n_slots, Graph};
use crate::stats::{ln_norm_cdf, norm_cdf, norm_ppf};

pub const LATENT_DIM: usize = 2;
pub const PRIOR_VARIANCE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "intercepts")]
    Intercepts,
    #[serde(rename = "intercepts+ls")]
    InterceptsLatent,
    #[serde(rename = "intercepts+prox")]
    InterceptsProximity,
    #[serde(rename = "intercepts+prox+ls")]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Intercepts,
        Variant::InterceptsLatent,
        Variant::InterceptsProximity,
        Variant::Full,
    ];

    pub fn uses_proximity(self) -> bool {
        matches!(self, Variant::InterceptsProximity | Variant::Full)
    }

    pub fn uses_latent(self) -> bool {
        matches!(self, Variant::InterceptsLatent | Variant::Full)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Intercepts => "intercepts",
            Variant::InterceptsLatent => "intercepts+ls",
            Variant::InterceptsProximity => "intercepts+prox",
            Variant::Full => "intercepts+prox+ls",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "int" | "intercepts" => Ok(Variant::Intercepts),
            "int+ls" | "intercepts+ls" => Ok(Variant::InterceptsLatent),
            "int+prox" | "intercepts+prox" => Ok(Variant::InterceptsProximity),
            "full" | "intercepts+prox+ls" | "intercepts+ls+prox" | "int+prox+ls" => Ok(Variant::Full),
            other => Err(Error::Invalid(format!(
                "unknown variant `{other}` (expected int, int+ls, int+prox or full)"
            ))),
        }
    }
}

/// One graph per group over a common node set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphFamily {
    pub graphs: Vec<Graph>,
}

impl GraphFamily {
    pub fn new(graphs: Vec<Graph>) -> Result<Self> {
        if let Some(first) = graphs.first() {
            if graphs.iter().any(|g| g.p() != first.p()) {
                return Err(Error::Invalid("graphs in a family must share their node set".into()));
            }
        }
        Ok(GraphFamily { graphs })
    }

    pub fn empty(k: usize, p: usize) -> Self {
        GraphFamily {
            graphs: vec![Graph::empty(p); k],
        }
    }

    pub fn n_groups(&self) -> usize {
        self.graphs.len()
    }

    pub fn p(&self) -> usize {
        self.graphs.first().map_or(0, Graph::p)
    }

    /// `±1` edge indicators, one row of slots per group.
    pub fn signs(&self) -> Vec<Vec<f64>> {
        self.graphs
            .iter()
            .map(|g| g.slots().into_iter().map(|on| if on { 1.0 } else { -1.0 }).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorParams {
    pub variant: Variant,
    pub alpha: Vec<f64>,
    /// Empty unless the variant uses proximity.
    pub beta: Vec<f64>,
    /// Empty unless the variant uses latent positions.
    pub c: Vec<[f64; LATENT_DIM]>,
}

impl PriorParams {
    pub fn zeros(variant: Variant, k: usize, d: usize) -> Self {
        PriorParams {
            variant,
            alpha: vec![0.0; k],
            beta: if variant.uses_proximity() { vec![0.0; d] } else { Vec::new() },
            c: if variant.uses_latent() { vec![[0.0; LATENT_DIM]; k] } else { Vec::new() },
        }
    }

    /// Intercepts from the density of a warm-start family, small random
    /// positions and zero proximity effects.
    pub fn initialize<R: Rng + ?Sized>(variant: Variant, family: &GraphFamily, d: usize, rng: &mut R) -> Self {
        let mut params = PriorParams::zeros(variant, family.n_groups(), d);
        let slots = n_slots(family.p()).max(1) as f64;
        for (a, g) in params.alpha.iter_mut().zip(&family.graphs) {
            let density = g.n_edges() as f64 / slots;
            *a = norm_ppf(density.clamp(1.0 / slots, 1.0 - 1.0 / slots));
        }
        let jitter = Normal::new(0.0, 0.1).expect("valid normal");
        for c in params.c.iter_mut() {
            for v in c.iter_mut() {
                *v = jitter.sample(rng);
            }
        }
        params
    }

    pub fn validate(&self, k: usize, prox: Option<&ProximityData>) -> Result<()> {
        if self.alpha.len() != k {
            return Err(Error::Invalid(format!("{} intercepts for {k} groups", self.alpha.len())));
        }
        if self.variant.uses_proximity() {
            let prox = prox.ok_or_else(|| {
                Error::Invalid(format!("variant {} requires proximity data", self.variant))
            })?;
            if prox.n_groups() != k || prox.dim() != self.beta.len() {
                return Err(Error::Invalid(format!(
                    "proximity has {} groups and {} measures, expected {k} and {}",
                    prox.n_groups(),
                    prox.dim(),
                    self.beta.len()
                )));
            }
        } else if !self.beta.is_empty() {
            return Err(Error::Invalid(format!("variant {} has no proximity effects", self.variant)));
        }
        let want_c = if self.variant.uses_latent() { k } else { 0 };
        if self.c.len() != want_c {
            return Err(Error::Invalid(format!("{} latent positions, expected {want_c}", self.c.len())));
        }
        let finite = self.alpha.iter().chain(&self.beta).chain(self.c.iter().flatten()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::Numerical("non-finite graph prior parameter".into()));
        }
        Ok(())
    }
}

/// Covariates of the probit regression for every group and edge slot.
struct Design {
    k: usize,
    e: usize,
    /// `x[k][s]`: proximity covariate vector (length d).
    x: Vec<Vec<Vec<f64>>>,
    signs: Vec<Vec<f64>>,
}

impl Design {
    fn new(family: &GraphFamily, params: &PriorParams, prox: Option<&ProximityData>) -> Self {
        let k = family.n_groups();
        let e = n_slots(family.p());
        let signs = family.signs();
        let d = params.beta.len();
        let mut x = vec![vec![vec![0.0; d]; e]; k];
        if let (true, Some(prox)) = (params.variant.uses_proximity(), prox) {
            for (g, xg) in x.iter_mut().enumerate() {
                for other in (0..k).filter(|&o| o != g) {
                    let sim = prox.sim(g, other);
                    for (s, xs) in xg.iter_mut().enumerate() {
                        let sign = signs[other][s];
                        for (v, w) in xs.iter_mut().zip(sim) {
                            *v += w * sign;
                        }
                    }
                }
            }
        }
        Design { k, e, x, signs }
    }

    /// `Σ_{k'≠k} c_{k'} s_{k',e}`.
    fn latent_sum(&self, c: &[[f64; LATENT_DIM]], g: usize, s: usize) -> [f64; LATENT_DIM] {
        let mut u = [0.0; LATENT_DIM];
        for other in (0..self.k).filter(|&o| o != g) {
            for (ud, cd) in u.iter_mut().zip(&c[other]) {
                *ud += cd * self.signs[other][s];
            }
        }
        u
    }

    fn score(&self, params: &PriorParams, g: usize, s: usize) -> f64 {
        let mut score = params.alpha[g];
        score += params.beta.iter().zip(&self.x[g][s]).map(|(b, x)| b * x).sum::<f64>();
        if params.variant.uses_latent() {
            let u = self.latent_sum(&params.c, g, s);
            score += params.c[g].iter().zip(&u).map(|(a, b)| a * b).sum::<f64>();
        }
        score
    }
}

fn slot_of(p: usize, j1: usize, j2: usize) -> Result<usize> {
    if j1 == j2 || j1 >= p || j2 >= p {
        return Err(Error::Invalid(format!("({j1}, {j2}) is not an edge slot on {p} nodes")));
    }
    Ok(crate::graph::slot_index(p, j1, j2))
}

/// Probit argument for edge `(j1, j2)` of group `k`.
pub fn edge_score(
    k: usize,
    edge: (usize, usize),
    family: &GraphFamily,
    params: &PriorParams,
    prox: Option<&ProximityData>,
) -> Result<f64> {
    let s = slot_of(family.p(), edge.0, edge.1)?;
    let mut score = params.alpha[k];
    if params.variant.uses_proximity() {
        let prox = prox.ok_or_else(|| Error::Invalid("proximity data required".into()))?;
        for (other, g) in family.graphs.iter().enumerate().filter(|&(o, _)| o != k) {
            let sign = if g.has_edge(edge.0, edge.1) { 1.0 } else { -1.0 };
            score += sign * params.beta.iter().zip(prox.sim(k, other)).map(|(b, w)| b * w).sum::<f64>();
        }
    }
    if params.variant.uses_latent() {
        for (other, g) in family.graphs.iter().enumerate().filter(|&(o, _)| o != k) {
            let sign = if g.has_edge(edge.0, edge.1) { 1.0 } else { -1.0 };
            score += sign * params.c[k].iter().zip(&params.c[other]).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    debug_assert_eq!(s, crate::graph::slot_index(family.p(), edge.0, edge.1));
    Ok(score)
}

pub fn edge_prior_prob(
    k: usize,
    edge: (usize, usize),
    family: &GraphFamily,
    params: &PriorParams,
    prox: Option<&ProximityData>,
) -> Result<f64> {
    edge_score(k, edge, family, params, prox).map(norm_cdf)
}

/// Scores of every edge slot of group `k`, in slot order.
pub fn group_scores(
    k: usize,
    family: &GraphFamily,
    params: &PriorParams,
    prox: Option<&ProximityData>,
) -> Vec<f64> {
    let design = Design::new(family, params, prox);
    (0..design.e).map(|s| design.score(params, k, s)).collect()
}

/// Scores of every group and slot, computed in one pass.
pub fn all_group_scores(family: &GraphFamily, params: &PriorParams, prox: Option<&ProximityData>) -> Vec<Vec<f64>> {
    let design = Design::new(family, params, prox);
    let sums = params.variant.uses_latent().then(|| LatentSums::new(&design, &params.c));
    (0..design.k)
        .map(|g| {
            (0..design.e)
                .map(|s| {
                    let mut score = params.alpha[g] + dot(&params.beta, &design.x[g][s]);
                    if let Some(sums) = &sums {
                        score += dot(&params.c[g], &sums.others(&design, &params.c, g, s));
                    }
                    score
                })
                .collect()
        })
        .collect()
}

/// `ln Φ(score) − ln Φ(−score)`, accurate far into both tails.
pub fn log_prior_odds(score: f64) -> f64 {
    ln_norm_cdf(score) - ln_norm_cdf(-score)
}

/// Composite log-likelihood `Σ_k Σ_e ln Φ(±score)` of a family.
pub fn composite_loglik(family: &GraphFamily, params: &PriorParams, prox: Option<&ProximityData>) -> f64 {
    let design = Design::new(family, params, prox);
    let mut total = 0.0;
    for g in 0..design.k {
        for s in 0..design.e {
            total += ln_norm_cdf(design.signs[g][s] * design.score(params, g, s));
        }
    }
    total
}

fn draw_mvn<R: Rng + ?Sized>(precision: DMatrix<f64>, rhs: DVector<f64>, rng: &mut R, what: &str) -> Result<DVector<f64>> {
    let chol = precision.clone().cholesky().ok_or_else(|| {
        Error::Numerical(format!("singular full conditional for {what}: precision {precision}"))
    })?;
    let mean = chol.solve(&rhs);
    // x = mean + L⁻ᵀ ε has covariance (L Lᵀ)⁻¹.
    let eps = DVector::from_fn(rhs.len(), |_, _| StandardNormal.sample(rng));
    let shift = chol
        .l()
        .transpose()
        .solve_upper_triangular(&eps)
        .ok_or_else(|| Error::Numerical(format!("triangular solve failed for {what}")))?;
    Ok(mean + shift)
}

/// Mean and covariance of β given utilities `z` (one row of slots per group).
pub fn beta_full_conditional(
    family: &GraphFamily,
    params: &PriorParams,
    prox: Option<&ProximityData>,
    z: &[Vec<f64>],
    prior_variance: f64,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let design = Design::new(family, params, prox);
    let (prec, rhs) = beta_system(&design, params, z, prior_variance);
    let cov = prec
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular full conditional for beta".into()))?;
    let mean = &cov * rhs;
    Ok((mean, cov))
}

fn beta_system(design: &Design, params: &PriorParams, z: &[Vec<f64>], prior_variance: f64) -> (DMatrix<f64>, DVector<f64>) {
    let d = params.beta.len();
    let mut prec = DMatrix::<f64>::identity(d, d) / prior_variance;
    let mut rhs = DVector::<f64>::zeros(d);
    for g in 0..design.k {
        let u_dot = |s: usize| -> f64 {
            if params.variant.uses_latent() {
                let u = design.latent_sum(&params.c, g, s);
                params.c[g].iter().zip(&u).map(|(a, b)| a * b).sum()
            } else {
                0.0
            }
        };
        for s in 0..design.e {
            let x = &design.x[g][s];
            let r = z[g][s] - params.alpha[g] - u_dot(s);
            for a in 0..d {
                rhs[a] += x[a] * r;
                for b in 0..d {
                    prec[(a, b)] += x[a] * x[b];
                }
            }
        }
    }
    (prec, rhs)
}

/// Running sums `T_s = Σ_k c_k s_{k,s}` so that latent terms cost O(1).
struct LatentSums {
    t: Vec<[f64; LATENT_DIM]>,
}

impl LatentSums {
    fn new(design: &Design, c: &[[f64; LATENT_DIM]]) -> Self {
        let mut t = vec![[0.0; LATENT_DIM]; design.e];
        for (g, cg) in c.iter().enumerate() {
            for (s, ts) in t.iter_mut().enumerate() {
                for a in 0..LATENT_DIM {
                    ts[a] += cg[a] * design.signs[g][s];
                }
            }
        }
        LatentSums { t }
    }

    /// `Σ_{k'≠g} c_{k'} s_{k',s}`.
    fn others(&self, design: &Design, c: &[[f64; LATENT_DIM]], g: usize, s: usize) -> [f64; LATENT_DIM] {
        let sign = design.signs[g][s];
        [self.t[s][0] - c[g][0] * sign, self.t[s][1] - c[g][1] * sign]
    }

    fn replace(&mut self, design: &Design, g: usize, old: [f64; LATENT_DIM], new: [f64; LATENT_DIM]) {
        for (s, ts) in self.t.iter_mut().enumerate() {
            for a in 0..LATENT_DIM {
                ts[a] += (new[a] - old[a]) * design.signs[g][s];
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One scan of data augmentation followed by conjugate updates of the
/// intercepts, the proximity effects and each latent position.
pub fn gibbs_update_params<R: Rng + ?Sized>(
    family: &GraphFamily,
    params: &PriorParams,
    prox: Option<&ProximityData>,
    prior_variance: f64,
    rng: &mut R,
) -> Result<PriorParams> {
    params.validate(family.n_groups(), prox)?;
    let design = Design::new(family, params, prox);
    let (k, e) = (design.k, design.e);
    let latent = params.variant.uses_latent();
    let mut next = params.clone();

    let prox_part = |beta: &[f64]| -> Vec<Vec<f64>> {
        (0..k).map(|g| (0..e).map(|s| dot(beta, &design.x[g][s])).collect()).collect()
    };
    let latent_part = |c: &[[f64; LATENT_DIM]]| -> Vec<Vec<f64>> {
        if !latent {
            return vec![vec![0.0; e]; k];
        }
        let sums = LatentSums::new(&design, c);
        (0..k)
            .map(|g| (0..e).map(|s| dot(&c[g], &sums.others(&design, c, g, s))).collect())
            .collect()
    };
    let mut lin = prox_part(&next.beta);
    let lat = latent_part(&next.c);

    let mut z = vec![vec![0.0; e]; k];
    for g in 0..k {
        for s in 0..e {
            let score = next.alpha[g] + lin[g][s] + lat[g][s];
            z[g][s] = if design.signs[g][s] > 0.0 {
                truncated_normal_sample(score, 1.0, 0.0, f64::INFINITY, rng)?
            } else {
                truncated_normal_sample(score, 1.0, f64::NEG_INFINITY, 0.0, rng)?
            };
        }
    }

    // Intercepts: each α_k enters only its own group's scores.
    for g in 0..k {
        let resid: f64 = (0..e).map(|s| z[g][s] - lin[g][s] - lat[g][s]).sum();
        let prec = 1.0 / prior_variance + e as f64;
        let eps: f64 = StandardNormal.sample(rng);
        next.alpha[g] = resid / prec + eps / prec.sqrt();
    }

    if next.variant.uses_proximity() && !next.beta.is_empty() {
        let d = next.beta.len();
        let mut prec = DMatrix::<f64>::identity(d, d) / prior_variance;
        let mut rhs = DVector::<f64>::zeros(d);
        for g in 0..k {
            for s in 0..e {
                let x = &design.x[g][s];
                let r = z[g][s] - next.alpha[g] - lat[g][s];
                for a in 0..d {
                    rhs[a] += x[a] * r;
                    for b in 0..d {
                        prec[(a, b)] += x[a] * x[b];
                    }
                }
            }
        }
        next.beta = draw_mvn(prec, rhs, rng, "beta")?.iter().copied().collect();
        lin = prox_part(&next.beta);
    }

    if latent {
        let mut sums = LatentSums::new(&design, &next.c);
        for g in 0..k {
            let cg = next.c[g];
            let mut prec = DMatrix::<f64>::identity(LATENT_DIM, LATENT_DIM) / prior_variance;
            let mut rhs = DVector::<f64>::zeros(LATENT_DIM);
            let mut add = |row: [f64; LATENT_DIM], resid: f64| {
                for a in 0..LATENT_DIM {
                    rhs[a] += row[a] * resid;
                    for b in 0..LATENT_DIM {
                        prec[(a, b)] += row[a] * row[b];
                    }
                }
            };
            for s in 0..e {
                // Own score: c_gᵀ u_{g,s}.
                let u = sums.others(&design, &next.c, g, s);
                add(u, z[g][s] - next.alpha[g] - lin[g][s] - dot(&cg, &u));
                // Every other group's score contains c_hᵀ c_g s_{g,s}.
                let sign = design.signs[g][s];
                for h in (0..k).filter(|&h| h != g) {
                    let row = [next.c[h][0] * sign, next.c[h][1] * sign];
                    let uh = sums.others(&design, &next.c, h, s);
                    let rest = dot(&next.c[h], &uh) - dot(&row, &cg);
                    add(row, z[h][s] - next.alpha[h] - lin[h][s] - rest);
                }
            }
            let draw = draw_mvn(prec, rhs, rng, &format!("latent position {g}"))?;
            next.c[g] = [draw[0], draw[1]];
            sums.replace(&design, g, cg, next.c[g]);
        }
    }
    Ok(next)
}

/// Streams parameter draws as CSV rows.
pub struct ParamTraceWriter {
    writer: csv::Writer<File>,
}

impl ParamTraceWriter {
    pub fn create(path: impl AsRef<Path>, params: &PriorParams) -> Result<Self> {
        let path = path.as_ref();
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
        let mut header = vec!["iteration".to_string(), "variant".to_string()];
        header.extend((0..params.alpha.len()).map(|k| format!("alpha_{k}")));
        header.extend((0..params.beta.len()).map(|a| format!("beta_{a}")));
        for k in 0..params.c.len() {
            header.extend((0..LATENT_DIM).map(|a| format!("c_{k}_{a}")));
        }
        writer.write_record(&header).map_err(|e| Error::parse(path, e))?;
        Ok(ParamTraceWriter { writer })
    }

    pub fn append(&mut self, iteration: u64, params: &PriorParams) -> Result<()> {
        let mut row = vec![iteration.to_string(), params.variant.to_string()];
        row.extend(
            params
                .alpha
                .iter()
                .chain(&params.beta)
                .chain(params.c.iter().flatten())
                .map(|v| format!("{v:.17e}")),
        );
        self.writer
            .write_record(&row)
            .map_err(|e| Error::Numerical(format!("trace write failed: {e}")))
    }

    /// Re-emits a row previously read back from a trace file.
    pub fn append_raw(&mut self, line: &str) -> Result<()> {
        self.writer
            .write_record(line.split(','))
            .map_err(|e| Error::Numerical(format!("trace write failed: {e}")))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer
            .flush()
            .map_err(|e| Error::Numerical(format!("trace flush failed: {e}")))
    }
}

/// All edge slots as `(j1, j2)` pairs.
pub fn slots(p: usize) -> Vec<(usize, usize)> {
    edge_slots(p).collect()
}
