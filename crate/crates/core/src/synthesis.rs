//! Forward simulation of every model layer, plus an exact posterior over
//! graphs for small problems.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::copula_latent::LatentMatrix;
use crate::dataset::{GroupData, ProximityData, SurveyDataset, TraitSpec};
use crate::error::{Error, Result};
use crate::graph::{edge_slots, n_slots, Graph};
use crate::graph_prior::{edge_score, GraphFamily, PriorParams, Variant, LATENT_DIM};
use crate::gwishart::{ln_normalizer_decomposable, GWishartParams};
use crate::marginals::{cumulative_prob, Link, OrdinalMarginalModel};
use crate::rng::{stream, Purpose};
use crate::stats::norm_cdf;

pub const DEFAULT_SWEEPS: usize = 500;

fn default_sweeps() -> usize {
    DEFAULT_SWEEPS
}
fn default_categories() -> usize {
    4
}
fn default_strength() -> f64 {
    0.5
}
fn default_clusters() -> usize {
    3
}
fn default_radius() -> f64 {
    0.35
}

/// Scenario description, read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub k: usize,
    pub p: usize,
    pub n_k: usize,
    pub variant: Variant,
    /// One intercept per group, or a single value for all.
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    /// True latent positions; generated around cluster centres when absent.
    #[serde(default)]
    pub c: Option<Vec<[f64; LATENT_DIM]>>,
    #[serde(default = "default_radius")]
    pub latent_radius: f64,
    #[serde(default = "default_clusters")]
    pub n_clusters: usize,
    #[serde(default)]
    pub n_covariates: usize,
    #[serde(default = "default_categories")]
    pub n_categories: usize,
    #[serde(default)]
    pub missing_rate: f64,
    /// Absolute size of off-diagonal precision entries on edges.
    #[serde(default = "default_strength")]
    pub edge_strength: f64,
    /// Edges forced into every group graph, 0-based.
    #[serde(default)]
    pub shared_edges: Vec<(usize, usize)>,
    #[serde(default = "default_sweeps")]
    pub n_sweeps: usize,
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.k == 0 || self.p < 2 || self.n_k == 0 {
            return bad(format!("scenario needs k ≥ 1, p ≥ 2, n_k ≥ 1 (got {}, {}, {})", self.k, self.p, self.n_k));
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return bad(format!("missing_rate must lie in [0, 1), got {}", self.missing_rate));
        }
        if self.alpha.len() != 1 && self.alpha.len() != self.k {
            return bad(format!("alpha needs 1 or {} values, got {}", self.k, self.alpha.len()));
        }
        if self.variant.uses_proximity() == self.beta.is_empty() {
            return bad(format!("variant {} and beta of length {} disagree", self.variant, self.beta.len()));
        }
        if self.beta.len() > 2 {
            return bad("at most two simulated proximity measures are supported".into());
        }
        if let Some(c) = &self.c {
            if c.len() != self.k {
                return bad(format!("{} latent positions for {} groups", c.len(), self.k));
            }
        }
        if self.n_categories < 2 {
            return bad("n_categories must be at least 2".into());
        }
        if self.n_sweeps == 0 {
            return bad("n_sweeps must be at least 1".into());
        }
        if let Some(&(a, b)) = self.shared_edges.iter().find(|&&(a, b)| a == b || a >= self.p || b >= self.p) {
            return bad(format!("shared edge ({a}, {b}) is not an edge slot"));
        }
        if !(self.edge_strength > 0.0) {
            return bad("edge_strength must be positive".into());
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: ScenarioConfig = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ground truth of a simulated study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScenario {
    pub config: ScenarioConfig,
    pub params: PriorParams,
    pub proximity: Option<ProximityData>,
    pub graphs: Vec<Graph>,
    pub precisions: Vec<DMatrix<f64>>,
    /// `marginals[k][j]`.
    pub marginals: Vec<Vec<OrdinalMarginalModel>>,
}

impl SyntheticScenario {
    pub fn family(&self) -> GraphFamily {
        GraphFamily { graphs: self.graphs.clone() }
    }

    pub fn write_truth(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::parse(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

pub fn group_names(k: usize) -> Vec<String> {
    (0..k).map(|g| format!("G{:02}", g + 1)).collect()
}

pub fn trait_names(p: usize) -> Vec<String> {
    (0..p).map(|j| format!("T{}", j + 1)).collect()
}

/// Two proximity measures: geographic closeness of random sites in the unit
/// square and a shared-cluster indicator scaled by cluster size.
pub fn generate_proximity<R: Rng + ?Sized>(k: usize, d: usize, n_clusters: usize, rng: &mut R) -> Result<ProximityData> {
    let sites: Vec<(f64, f64)> = (0..k).map(|_| (rng.random(), rng.random())).collect();
    let clusters: Vec<usize> = (0..k).map(|g| g % n_clusters.max(1)).collect();
    let size = |c: usize| clusters.iter().filter(|&&x| x == c).count() as f64;
    let all = ["geographic", "cluster"];
    ProximityData::from_fn(group_names(k), all[..d].iter().map(|s| s.to_string()).collect(), |a, b| {
        let dist = ((sites[a].0 - sites[b].0).powi(2) + (sites[a].1 - sites[b].1).powi(2)).sqrt();
        let same = if clusters[a] == clusters[b] { 1.0 / size(clusters[a]) } else { 0.0 };
        [(-dist / 0.1).exp(), same][..d].to_vec()
    })
}

/// Positions around `n_clusters` centres on a circle of the given radius.
pub fn generate_positions<R: Rng + ?Sized>(k: usize, n_clusters: usize, radius: f64, rng: &mut R) -> Vec<[f64; LATENT_DIM]> {
    let spread = Normal::new(0.0, 0.2 * radius).expect("valid normal");
    let m = n_clusters.max(1);
    (0..k)
        .map(|g| {
            let angle = std::f64::consts::TAU * (g % m) as f64 / m as f64;
            [radius * angle.cos() + spread.sample(rng), radius * angle.sin() + spread.sample(rng)]
        })
        .collect()
}

/// Gibbs sweeps over the conditional edge model, starting from independent
/// draws with the intercept-only probabilities.
pub fn generate_graph_family<R: Rng + ?Sized>(
    params: &PriorParams,
    p: usize,
    prox: Option<&ProximityData>,
    rng: &mut R,
    n_sweeps: usize,
) -> Result<GraphFamily> {
    let k = params.alpha.len();
    params.validate(k, prox)?;
    let mut family = GraphFamily {
        graphs: params
            .alpha
            .iter()
            .map(|&a| {
                let on: Vec<bool> = (0..n_slots(p)).map(|_| rng.random::<f64>() < norm_cdf(a)).collect();
                Graph::from_slots(p, &on)
            })
            .collect(),
    };
    for _ in 0..n_sweeps {
        for g in 0..k {
            for (j1, j2) in edge_slots(p) {
                let prob = norm_cdf(edge_score(g, (j1, j2), &family, params, prox)?);
                let on = rng.random::<f64>() < prob;
                family.graphs[g].set(j1, j2, on);
            }
        }
    }
    Ok(family)
}

/// Precision with `±strength` on the edges of `graph` (positive on
/// `positive` edges), shifted along the diagonal until its smallest
/// eigenvalue is at least 0.1 above zero.
pub fn construct_precision<R: Rng + ?Sized>(
    graph: &Graph,
    strength: f64,
    positive: &[(usize, usize)],
    rng: &mut R,
) -> DMatrix<f64> {
    let p = graph.p();
    let mut k = DMatrix::<f64>::identity(p, p);
    for (i, j) in edge_slots(p) {
        if graph.has_edge(i, j) {
            let forced = positive.iter().any(|&(a, b)| (a, b) == (i, j) || (b, a) == (i, j));
            // A negative precision entry is a positive partial correlation.
            let sign = if forced || rng.random::<bool>() { -1.0 } else { 1.0 };
            k[(i, j)] = sign * strength;
            k[(j, i)] = sign * strength;
        }
    }
    let min_eig = k.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < 0.1 {
        for i in 0..p {
            k[(i, i)] += 0.1 - min_eig;
        }
    }
    k
}

/// Cumulative-logit marginals with evenly spread thresholds.
pub fn generate_marginals<R: Rng + ?Sized>(p: usize, n_categories: usize, n_covariates: usize, rng: &mut R) -> Vec<OrdinalMarginalModel> {
    let effect = Normal::new(0.0, 0.3).expect("valid normal");
    (0..p)
        .map(|j| {
            let shift: f64 = rng.random::<f64>() - 0.5;
            let thresholds = (1..n_categories)
                .map(|c| {
                    let q = c as f64 / n_categories as f64;
                    (q / (1.0 - q)).ln() + shift
                })
                .collect();
            OrdinalMarginalModel {
                trait_id: trait_names(p)[j].clone(),
                link: Link::Logit,
                thresholds,
                gamma: (0..n_covariates).map(|_| effect.sample(rng)).collect(),
                covariate_names: (0..n_covariates).map(|m| format!("x{}", m + 1)).collect(),
                loglik: 0.0,
            }
        })
        .collect()
}

/// Draws `n` ordinal rows from the Gaussian copula with precision `omega`.
///
/// `covariates` is n × m row-major. Entries go missing completely at random
/// with probability `missing_rate`.
pub fn generate_survey<R: Rng + ?Sized>(
    omega: &DMatrix<f64>,
    marginals: &[OrdinalMarginalModel],
    covariates: &[f64],
    n: usize,
    missing_rate: f64,
    rng: &mut R,
) -> Result<Vec<Option<u16>>> {
    let p = omega.nrows();
    if marginals.len() != p {
        return Err(Error::Invalid(format!("{} marginals for {p} traits", marginals.len())));
    }
    if !(0.0..1.0).contains(&missing_rate) {
        return Err(Error::Invalid(format!("missing_rate must lie in [0, 1), got {missing_rate}")));
    }
    let m = if n == 0 { 0 } else { covariates.len() / n };
    let sigma = omega
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("generating precision".into()))?;
    let l = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("generating covariance".into()))?
        .l();
    let sd: Vec<f64> = (0..p).map(|j| sigma[(j, j)].sqrt()).collect();
    let mut out = Vec::with_capacity(n * p);
    for i in 0..n {
        let eps = nalgebra::DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
        let z = &l * eps;
        let x = &covariates[i * m..(i + 1) * m];
        for (j, model) in marginals.iter().enumerate() {
            let u = norm_cdf(z[j] / sd[j]);
            let c = model.n_categories();
            let y = (1..c).find(|&c| u <= cumulative_prob(model, c, x)).unwrap_or(c);
            out.push(Some(y as u16));
        }
    }
    for v in out.iter_mut() {
        if rng.random::<f64>() < missing_rate {
            *v = None;
        }
    }
    Ok(out)
}

/// Generates the full scenario and its survey.
pub fn generate_scenario(config: &ScenarioConfig) -> Result<(SyntheticScenario, SurveyDataset)> {
    config.validate()?;
    let (k, p) = (config.k, config.p);
    let mut rng = stream(config.seed, Purpose::Synthesis, 0, 0);
    let d = config.beta.len();
    let prox = if config.variant.uses_proximity() {
        Some(generate_proximity(k, d, config.n_clusters, &mut rng)?)
    } else {
        None
    };
    let alpha = if config.alpha.len() == 1 { vec![config.alpha[0]; k] } else { config.alpha.clone() };
    let c = if config.variant.uses_latent() {
        config
            .c
            .clone()
            .unwrap_or_else(|| generate_positions(k, config.n_clusters, config.latent_radius, &mut rng))
    } else {
        Vec::new()
    };
    let params = PriorParams {
        variant: config.variant,
        alpha,
        beta: config.beta.clone(),
        c,
    };
    let mut family = generate_graph_family(&params, p, prox.as_ref(), &mut rng, config.n_sweeps)?;
    for g in family.graphs.iter_mut() {
        for &(a, b) in &config.shared_edges {
            g.set(a, b, true);
        }
    }

    let traits: Vec<TraitSpec> = trait_names(p)
        .into_iter()
        .map(|t| TraitSpec {
            trait_id: t,
            n_categories: config.n_categories,
            description: String::new(),
        })
        .collect();
    let covariate_names: Vec<String> = (0..config.n_covariates).map(|m| format!("x{}", m + 1)).collect();
    let mut precisions = Vec::with_capacity(k);
    let mut marginals = Vec::with_capacity(k);
    let mut groups = Vec::with_capacity(k);
    for (g, name) in group_names(k).into_iter().enumerate() {
        let mut grng = stream(config.seed, Purpose::Synthesis, 1, g as u64);
        let omega = construct_precision(&family.graphs[g], config.edge_strength, &config.shared_edges, &mut grng);
        let models = generate_marginals(p, config.n_categories, config.n_covariates, &mut grng);
        let covariates: Vec<f64> = (0..config.n_k * config.n_covariates)
            .map(|_| StandardNormal.sample(&mut grng))
            .collect();
        let responses = generate_survey(&omega, &models, &covariates, config.n_k, config.missing_rate, &mut grng)?;
        groups.push(GroupData {
            id: name.clone(),
            respondent_ids: (0..config.n_k).map(|i| format!("{name}-{:05}", i + 1)).collect(),
            responses,
            covariates,
            n_traits: p,
            n_covariates: config.n_covariates,
        });
        precisions.push(omega);
        marginals.push(models);
    }
    let scenario = SyntheticScenario {
        config: config.clone(),
        params,
        proximity: prox,
        graphs: family.graphs,
        precisions,
        marginals,
    };
    let dataset = SurveyDataset {
        traits,
        covariate_names,
        groups,
    };
    Ok((scenario, dataset))
}

/// Exact posterior over all graphs on p ≤ 3 nodes given Gaussian data.
///
/// Entry `m` of the result is the graph whose edge slot `s` is present iff
/// bit `s` of `m` is set. `edge_priors` holds one prior inclusion
/// probability per slot.
pub fn enumerate_posterior(z: &LatentMatrix, prior: &GWishartParams, edge_priors: &[f64]) -> Result<Vec<f64>> {
    let p = z.p;
    if p > 3 {
        return Err(Error::Invalid(format!("exact enumeration supports p ≤ 3, got {p}")));
    }
    if prior.p() != p || edge_priors.len() != n_slots(p) {
        return Err(Error::Invalid("dimensions of data, prior and edge priors disagree".into()));
    }
    let post = crate::gwishart::posterior_params(prior, z);
    let n_graphs = 1usize << n_slots(p);
    let mut logw = Vec::with_capacity(n_graphs);
    for mask in 0..n_graphs {
        let on: Vec<bool> = (0..n_slots(p)).map(|s| mask & (1 << s) != 0).collect();
        let g = Graph::from_slots(p, &on);
        let mut lw = ln_normalizer_decomposable(&g, post.b, &post.d)? - ln_normalizer_decomposable(&g, prior.b, &prior.d)?;
        for (&present, &q) in on.iter().zip(edge_priors) {
            lw += if present { q.ln() } else { (1.0 - q).ln() };
        }
        logw.push(lw);
    }
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|x| x / total).collect())
}

/// Correlation matrix of `omega⁻¹`.
pub fn implied_correlation(omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sigma = omega
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("precision".into()))?;
    let p = sigma.nrows();
    Ok(DMatrix::from_fn(p, p, |i, j| sigma[(i, j)] / (sigma[(i, i)] * sigma[(j, j)]).sqrt()))
}
