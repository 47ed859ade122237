//! Deviance and DIC, latent-space alignment and export of posterior summaries.

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Matrix2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bdmcmc::{edge_posterior, ChainInput, PosteriorAccumulator, Snapshot};
use crate::dataset::{ProximityData, SurveyDataset};
use crate::error::{Error, Result};
use crate::graph::{edge_slots, Graph};
use crate::graph_prior::{GraphFamily, PriorParams, Variant, LATENT_DIM};
use crate::gwishart::project_to_graph;
use crate::marginals::{standardized_coefficients, CopulaInterval, MarginalSet};
use crate::rng::{stream, Purpose};
use crate::stats::{norm_cdf, norm_ppf, sample_variance};

/// Deviance draws and the deviance at the posterior-mean parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DevianceTrace {
    pub draws: Vec<f64>,
    pub at_mean: f64,
}

impl DevianceTrace {
    pub fn count(&self) -> usize {
        self.draws.len()
    }
}

/// `D(Θ̂) + 2·Var(D)` with the sample variance of the draws.
pub fn dic(trace: &DevianceTrace) -> Result<f64> {
    if trace.draws.len() < 2 {
        return Err(Error::Invalid(format!(
            "DIC needs at least two deviance draws, got {}",
            trace.draws.len()
        )));
    }
    if trace.draws.iter().chain([&trace.at_mean]).any(|d| !d.is_finite()) {
        return Err(Error::Numerical("non-finite deviance".into()));
    }
    Ok(trace.at_mean + 2.0 * sample_variance(&trace.draws))
}

/// Randomized lattice rule settings for rectangle probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GhkConfig {
    pub rel_tol: f64,
    pub n_shifts: usize,
    pub initial_points: usize,
    pub max_points: usize,
    pub seed: u64,
}

impl Default for GhkConfig {
    fn default() -> Self {
        GhkConfig {
            rel_tol: 1e-3,
            n_shifts: 8,
            initial_points: 64,
            max_points: 1 << 14,
            seed: 0x9e37_79b9,
        }
    }
}

const LATTICE_PRIMES: [f64; 24] = [
    2.0, 3.0, 5.0, 7.0, 11.0, 13.0, 17.0, 19.0, 23.0, 29.0, 31.0, 37.0, 41.0, 43.0, 47.0, 53.0, 59.0, 61.0,
    67.0, 71.0, 73.0, 79.0, 83.0, 89.0,
];

/// Rectangle probabilities under a Gaussian with a given correlation matrix.
pub struct RectangleIntegrator {
    cfg: GhkConfig,
    corr: DMatrix<f64>,
    shifts: Vec<Vec<f64>>,
}

impl RectangleIntegrator {
    pub fn new(corr: DMatrix<f64>, cfg: GhkConfig) -> Result<Self> {
        let p = corr.nrows();
        if p > LATTICE_PRIMES.len() + 1 {
            return Err(Error::Invalid(format!("rectangle integration supports up to {} traits", LATTICE_PRIMES.len() + 1)));
        }
        let mut rng = stream(cfg.seed, Purpose::Diagnostics, 0, 0);
        let shifts = (0..cfg.n_shifts).map(|_| (0..p).map(|_| rng.random::<f64>()).collect()).collect();
        Ok(RectangleIntegrator { cfg, corr, shifts })
    }

    /// `ln P(lo < Z ≤ hi)`; coordinates with a full interval are
    /// marginalized out.
    pub fn log_prob(&self, intervals: &[CopulaInterval]) -> Result<f64> {
        let idx: Vec<usize> = (0..intervals.len()).filter(|&j| !intervals[j].is_full()).collect();
        let q = idx.len();
        if q == 0 {
            return Ok(0.0);
        }
        let mut lo: Vec<f64> = idx.iter().map(|&j| intervals[j].lo).collect();
        let mut hi: Vec<f64> = idx.iter().map(|&j| intervals[j].hi).collect();
        if q == 1 {
            return Ok(interval_mass(lo[0], hi[0]).max(f64::MIN_POSITIVE).ln());
        }
        let mut sub = DMatrix::from_fn(q, q, |a, b| self.corr[(idx[a], idx[b])]);
        let l = ordered_cholesky(&mut sub, &mut lo, &mut hi)?;
        let rows: Vec<f64> = (0..q).flat_map(|i| (0..q).map(move |j| (i, j))).map(|(i, j)| l[(i, j)]).collect();
        let gen: Vec<f64> = LATTICE_PRIMES[..q - 1].iter().map(|p| p.sqrt().fract()).collect();
        let s = self.shifts.len();
        let mut sums = vec![0.0; s];
        let mut n = 0usize;
        let mut target = self.cfg.initial_points.max(1);
        let mut e = vec![0.0; q];
        let mut u = vec![0.0; q];
        loop {
            for i in n..target {
                for (k, shift) in self.shifts.iter().enumerate() {
                    for d in 0..q - 1 {
                        let x = (i as f64 * gen[d] + shift[d]).fract();
                        u[d] = 1.0 - (2.0 * x - 1.0).abs();
                    }
                    sums[k] += ghk_point(&rows, q, &lo, &hi, &u, &mut e);
                }
            }
            n = target;
            let ests: Vec<f64> = sums.iter().map(|v| v / n as f64).collect();
            let mean = ests.iter().sum::<f64>() / s as f64;
            let se = if s > 1 { (sample_variance(&ests) / s as f64).sqrt() } else { 0.0 };
            if se <= self.cfg.rel_tol * mean || n >= self.cfg.max_points {
                return Ok(mean.max(f64::MIN_POSITIVE).ln());
            }
            target = (2 * n).min(self.cfg.max_points);
        }
    }
}

/// Cholesky factor of `cov` with variables reordered so that the most
/// constrained coordinate (given the expected values of those before it)
/// comes first; `lo` and `hi` are permuted to match.
fn ordered_cholesky(cov: &mut DMatrix<f64>, lo: &mut [f64], hi: &mut [f64]) -> Result<DMatrix<f64>> {
    let q = cov.nrows();
    let mut l = DMatrix::<f64>::zeros(q, q);
    let mut y = vec![0.0; q];
    for j in 0..q {
        let mut best = (j, f64::INFINITY);
        for i in j..q {
            let var = cov[(i, i)] - (0..j).map(|m| l[(i, m)] * l[(i, m)]).sum::<f64>();
            if var <= 0.0 {
                return Err(Error::NotPositiveDefinite("copula correlation".into()));
            }
            let sd = var.sqrt();
            let mean: f64 = (0..j).map(|m| l[(i, m)] * y[m]).sum();
            let mass = interval_mass((lo[i] - mean) / sd, (hi[i] - mean) / sd);
            if mass < best.1 {
                best = (i, mass);
            }
        }
        let b = best.0;
        if b != j {
            cov.swap_rows(j, b);
            cov.swap_columns(j, b);
            l.swap_rows(j, b);
            lo.swap(j, b);
            hi.swap(j, b);
        }
        let var = cov[(j, j)] - (0..j).map(|m| l[(j, m)] * l[(j, m)]).sum::<f64>();
        if var <= 0.0 {
            return Err(Error::NotPositiveDefinite("copula correlation".into()));
        }
        l[(j, j)] = var.sqrt();
        for i in j + 1..q {
            let dot: f64 = (0..j).map(|m| l[(i, m)] * l[(j, m)]).sum();
            l[(i, j)] = (cov[(i, j)] - dot) / l[(j, j)];
        }
        let mean: f64 = (0..j).map(|m| l[(j, m)] * y[m]).sum();
        let (a, bb) = ((lo[j] - mean) / l[(j, j)], (hi[j] - mean) / l[(j, j)]);
        let mass = interval_mass(a, bb);
        let pdf = |t: f64| if t.is_finite() { crate::stats::norm_pdf(t) } else { 0.0 };
        y[j] = if mass > 0.0 {
            (pdf(a) - pdf(bb)) / mass
        } else if a.is_finite() {
            a
        } else {
            bb
        };
    }
    Ok(l)
}

/// `Φ(b) − Φ(a)` evaluated on the tail that keeps precision.
fn interval_mass(a: f64, b: f64) -> f64 {
    if a > 0.0 {
        norm_cdf(-a) - norm_cdf(-b)
    } else {
        norm_cdf(b) - norm_cdf(a)
    }
}

fn ghk_point(l: &[f64], q: usize, lo: &[f64], hi: &[f64], u: &[f64], e: &mut [f64]) -> f64 {
    let mut w = 1.0;
    for j in 0..q {
        let row = &l[j * q..j * q + j + 1];
        let mean: f64 = row[..j].iter().zip(&e[..j]).map(|(a, b)| a * b).sum();
        let a = (lo[j] - mean) / row[j];
        let b = (hi[j] - mean) / row[j];
        // Work in the upper tail when the interval lies right of zero.
        let flip = a > 0.0;
        let (fa, fb) = if flip { (norm_cdf(-a), norm_cdf(-b)) } else { (norm_cdf(a), norm_cdf(b)) };
        let mass = if flip { fa - fb } else { fb - fa };
        if !(mass > 0.0) {
            return 0.0;
        }
        w *= mass;
        if j + 1 < q {
            let v = if flip { -norm_ppf(fa - u[j] * mass) } else { norm_ppf(fa + u[j] * mass) };
            // Rounding at the far ends can push the draw off the interval.
            e[j] = if v.is_finite() {
                v.max(a).min(b)
            } else if a.is_finite() {
                a
            } else {
                b
            };
        }
    }
    w
}

/// Correlation form of `omega⁻¹`.
pub fn copula_correlation(omega: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sigma = omega
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("precision".into()))?;
    let p = sigma.nrows();
    Ok(DMatrix::from_fn(p, p, |i, j| sigma[(i, j)] / (sigma[(i, i)] * sigma[(j, j)]).sqrt()))
}

/// Observed-data log-likelihood of one group under precision `omega`.
///
/// Respondents with identical copula rectangles are evaluated once.
pub fn group_loglik(intervals: &[CopulaInterval], p: usize, omega: &DMatrix<f64>, cfg: GhkConfig) -> Result<f64> {
    let integrator = RectangleIntegrator::new(copula_correlation(omega)?, cfg)?;
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique: Vec<&[CopulaInterval]> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for row in intervals.chunks(p) {
        let key: Vec<u64> = row.iter().flat_map(|iv| [iv.lo.to_bits(), iv.hi.to_bits()]).collect();
        let next = unique.len();
        let slot = *index.entry(key).or_insert(next);
        if slot == next {
            unique.push(row);
            counts.push(0.0);
        }
        counts[slot] += 1.0;
    }
    let logs: Vec<Result<f64>> = unique.par_iter().map(|row| integrator.log_prob(row)).collect();
    let mut total = 0.0;
    for (lp, c) in logs.into_iter().zip(counts) {
        total += c * lp?;
    }
    Ok(total)
}

/// Copula intervals for every group, computed once per dataset.
pub fn dataset_intervals(dataset: &SurveyDataset, marginals: &MarginalSet) -> Vec<Vec<CopulaInterval>> {
    dataset
        .groups
        .iter()
        .enumerate()
        .map(|(g, group)| marginals.intervals(group, g))
        .collect()
}

/// `−2 Σ log P(y | Ω, marginals)` over every group of a snapshot.
pub fn snapshot_deviance(state: &Snapshot, intervals: &[Vec<CopulaInterval>], p: usize, cfg: GhkConfig) -> Result<f64> {
    let mut total = 0.0;
    for (iv, omega) in intervals.iter().zip(&state.omegas) {
        total += group_loglik(iv, p, omega, cfg)?;
    }
    Ok(-2.0 * total)
}

/// Deviance of the observed responses at one parameter state.
pub fn deviance(state: &Snapshot, dataset: &SurveyDataset, marginals: &MarginalSet) -> Result<f64> {
    let intervals = dataset_intervals(dataset, marginals);
    snapshot_deviance(state, &intervals, dataset.n_traits(), GhkConfig::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedLatentSpace {
    pub mean: Vec<[f64; LATENT_DIM]>,
    pub reference: usize,
    pub aligned: Vec<Vec<[f64; LATENT_DIM]>>,
    pub rotations: Vec<[[f64; LATENT_DIM]; LATENT_DIM]>,
}

/// Orthogonal Procrustes alignment of each draw to the first.
pub fn procrustes_align(samples: &[Vec<[f64; LATENT_DIM]>]) -> Result<AlignedLatentSpace> {
    let reference = samples.first().ok_or_else(|| Error::Invalid("no latent-position draws to align".into()))?;
    let k = reference.len();
    if samples.iter().any(|s| s.len() != k) {
        return Err(Error::Invalid("latent-position draws have different group counts".into()));
    }
    let norm: f64 = reference.iter().flatten().map(|v| v * v).sum();
    if !(norm > 0.0) {
        return Err(Error::Invalid("reference latent positions are all zero".into()));
    }
    let mut aligned = Vec::with_capacity(samples.len());
    let mut rotations = Vec::with_capacity(samples.len());
    for draw in samples {
        let mut m = Matrix2::<f64>::zeros();
        for (x, r) in draw.iter().zip(reference) {
            for a in 0..2 {
                for b in 0..2 {
                    m[(a, b)] += x[a] * r[b];
                }
            }
        }
        let svd = m.svd(true, true);
        let q = svd.u.expect("u requested") * svd.v_t.expect("v requested");
        aligned.push(
            draw.iter()
                .map(|x| [x[0] * q[(0, 0)] + x[1] * q[(1, 0)], x[0] * q[(0, 1)] + x[1] * q[(1, 1)]])
                .collect::<Vec<_>>(),
        );
        rotations.push([[q[(0, 0)], q[(0, 1)]], [q[(1, 0)], q[(1, 1)]]]);
    }
    let n = samples.len() as f64;
    let mean = (0..k)
        .map(|g| {
            let mut s = [0.0; 2];
            for draw in &aligned {
                s[0] += draw[g][0];
                s[1] += draw[g][1];
            }
            [s[0] / n, s[1] / n]
        })
        .collect();
    Ok(AlignedLatentSpace {
        mean,
        reference: 0,
        aligned,
        rotations,
    })
}

/// Graphs holding every edge with posterior probability above one half.
pub fn median_graphs(acc: &PosteriorAccumulator) -> Result<Vec<Graph>> {
    Ok(edge_posterior(acc)?
        .iter()
        .map(|m| {
            let mut g = Graph::empty(acc.p);
            for (i, j) in edge_slots(acc.p) {
                g.set(i, j, m[(i, j)] > 0.5);
            }
            g
        })
        .collect())
}

/// Point estimate used for `D(Θ̂)`.
pub fn posterior_point_estimate(acc: &PosteriorAccumulator) -> Result<Snapshot> {
    if acc.is_empty() {
        return Err(Error::Invalid("no post-burn-in draws accumulated".into()));
    }
    let graphs = median_graphs(acc)?;
    let omegas = graphs
        .iter()
        .zip(acc.omega_mean())
        .map(|(g, mean)| {
            let sigma = mean
                .try_inverse()
                .ok_or_else(|| Error::NotPositiveDefinite("posterior-mean precision".into()))?;
            project_to_graph(g, &sigma)
        })
        .collect::<Result<Vec<_>>>()?;
    let c = if acc.variant.uses_latent() {
        let draws: Vec<Vec<[f64; LATENT_DIM]>> = acc.draws.iter().map(|d| d.params.c.clone()).collect();
        procrustes_align(&draws)?.mean
    } else {
        Vec::new()
    };
    Ok(Snapshot {
        iteration: u64::MAX,
        params: PriorParams {
            variant: acc.variant,
            alpha: acc.alpha_mean(),
            beta: acc.beta_mean(),
            c,
        },
        family: GraphFamily { graphs },
        omegas,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DicReport {
    pub variant: Variant,
    pub description: String,
    pub dic: f64,
    pub deviance_at_mean: f64,
    pub deviance_variance: f64,
    pub deviance_draws: Vec<f64>,
    pub draw_iterations: Vec<u64>,
}

pub fn variant_description(v: Variant) -> &'static str {
    match v {
        Variant::Intercepts => "group-specific intercepts",
        Variant::InterceptsLatent => "group-specific intercepts + latent space",
        Variant::InterceptsProximity => "group-specific intercepts + proximity measures",
        Variant::Full => "group-specific intercepts + proximity measures + latent space",
    }
}

/// DIC from the snapshots kept by the sampler.
pub fn compute_dic(acc: &PosteriorAccumulator, input: ChainInput<'_>, cfg: GhkConfig) -> Result<DicReport> {
    let intervals = dataset_intervals(input.dataset, input.marginals);
    let p = input.dataset.n_traits();
    let draws = acc
        .snapshots
        .iter()
        .map(|s| snapshot_deviance(s, &intervals, p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let point = posterior_point_estimate(acc)?;
    let trace = DevianceTrace {
        draws: draws.clone(),
        at_mean: snapshot_deviance(&point, &intervals, p, cfg)?,
    };
    Ok(DicReport {
        variant: acc.variant,
        description: variant_description(acc.variant).to_string(),
        dic: dic(&trace)?,
        deviance_at_mean: trace.at_mean,
        deviance_variance: sample_variance(&draws),
        deviance_draws: draws,
        draw_iterations: acc.snapshots.iter().map(|s| s.iteration).collect(),
    })
}

pub const EDGES_FILE: &str = "edges.csv";
pub const COEF_FILE: &str = "coef_standardized.csv";
pub const LATENT_FILE: &str = "latent_positions.csv";
pub const BETA_FILE: &str = "beta_draws.csv";
pub const DIC_FILE: &str = "dic.json";
pub const SUMMARY_FILE: &str = "summary.json";

/// Column labels of the edge table, in slot order.
pub fn edge_labels(trait_ids: &[String]) -> Vec<String> {
    edge_slots(trait_ids.len())
        .map(|(i, j)| format!("{}–{}", trait_ids[i], trait_ids[j]))
        .collect()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))
}

fn csv_row<I, S>(w: &mut csv::Writer<File>, path: &Path, row: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| Error::parse(path, e))
}

pub fn write_edge_table(path: &Path, groups: &[String], trait_ids: &[String], probs: &[DMatrix<f64>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    csv_row(&mut w, path, std::iter::once("group".to_string()).chain(edge_labels(trait_ids)))?;
    for (gid, m) in groups.iter().zip(probs) {
        let row = std::iter::once(gid.clone()).chain(edge_slots(trait_ids.len()).map(|(i, j)| format!("{}", m[(i, j)])));
        csv_row(&mut w, path, row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group: String,
    pub edge_probabilities: Vec<Vec<f64>>,
    pub alpha_mean: f64,
    pub alpha_sd: f64,
    pub time: f64,
    pub jumps: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub traits: Vec<String>,
    pub n_draws: u64,
    pub groups: Vec<GroupSummary>,
    pub proximity_names: Vec<String>,
    pub beta_mean: Vec<f64>,
    pub beta_sd: Vec<f64>,
    pub latent_positions: Vec<[f64; LATENT_DIM]>,
}

/// Writes the summary bundle: edge probabilities, standardized covariate
/// effects, aligned latent positions, proximity-effect draws, DIC and a
/// JSON digest.
pub fn export_summaries(
    dir: &Path,
    acc: &PosteriorAccumulator,
    dataset: &SurveyDataset,
    marginals: &MarginalSet,
    prox: Option<&ProximityData>,
    dic_report: Option<&DicReport>,
) -> Result<RunSummary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probs = edge_posterior(acc)?;
    let trait_ids: Vec<String> = dataset.traits.iter().map(|t| t.trait_id.clone()).collect();
    write_edge_table(&dir.join(EDGES_FILE), &acc.groups, &trait_ids, &probs)?;

    let path = dir.join(COEF_FILE);
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, ["group", "trait", "covariate", "coefficient"])?;
    for (g, group) in dataset.groups.iter().enumerate() {
        let sds = group.covariate_sds();
        for model in &marginals.models[g] {
            // Constant covariates have no standardized effect.
            let usable: Vec<f64> = sds.iter().map(|&s| if s > 0.0 { s } else { f64::NAN }).collect();
            let coefs = if usable.iter().all(|s| s.is_finite()) {
                standardized_coefficients(model, &usable)?
            } else {
                model.gamma.iter().zip(&usable).map(|(g, s)| g * s).collect()
            };
            for (name, c) in dataset.covariate_names.iter().zip(coefs) {
                csv_row(&mut w, &path, [group.id.clone(), model.trait_id.clone(), name.clone(), format!("{c}")])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let latent = if acc.variant.uses_latent() && !acc.draws.is_empty() {
        let draws: Vec<Vec<[f64; LATENT_DIM]>> = acc.draws.iter().map(|d| d.params.c.clone()).collect();
        Some(procrustes_align(&draws)?)
    } else {
        None
    };
    let path = dir.join(LATENT_FILE);
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, ["group", "dim1", "dim2"])?;
    if let Some(space) = &latent {
        for (gid, c) in acc.groups.iter().zip(&space.mean) {
            csv_row(&mut w, &path, [gid.clone(), format!("{}", c[0]), format!("{}", c[1])])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join(BETA_FILE);
    let names: Vec<String> = match prox {
        Some(p) if acc.variant.uses_proximity() => p.names.clone(),
        _ => Vec::new(),
    };
    let mut w = csv_writer(&path)?;
    csv_row(&mut w, &path, std::iter::once("iteration".to_string()).chain(names.iter().map(|n| format!("beta_{n}"))))?;
    if !names.is_empty() {
        for d in &acc.draws {
            csv_row(
                &mut w,
                &path,
                std::iter::once(d.iteration.to_string()).chain(d.params.beta.iter().map(|b| format!("{b}"))),
            )?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    if let Some(report) = dic_report {
        write_json(&dir.join(DIC_FILE), report)?;
    }

    let alpha_mean = acc.alpha_mean();
    let alpha_sd = acc.alpha_sd();
    let summary = RunSummary {
        variant: acc.variant,
        traits: trait_ids,
        n_draws: acc.n_draws,
        groups: acc
            .groups
            .iter()
            .enumerate()
            .map(|(g, gid)| GroupSummary {
                group: gid.clone(),
                edge_probabilities: (0..acc.p).map(|i| (0..acc.p).map(|j| probs[g][(i, j)]).collect()).collect(),
                alpha_mean: alpha_mean[g],
                alpha_sd: alpha_sd[g],
                time: acc.total_time[g],
                jumps: acc.jumps[g],
            })
            .collect(),
        proximity_names: names,
        beta_mean: acc.beta_mean(),
        beta_sd: acc.beta_sd(),
        latent_positions: latent.map(|l| l.mean).unwrap_or_default(),
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))
}

pub fn read_dic(path: &Path) -> Result<DicReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// Area under the ROC curve of `scores` for binary `labels`, with ties
/// counted as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(s, _)| *s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(s, _)| *s).collect();
    if pos.is_empty() || neg.is_empty() {
        return f64::NAN;
    }
    let mut wins = 0.0;
    for a in &pos {
        for b in &neg {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest};
    use crate::marginals::{copula_interval, Link, OrdinalMarginalModel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dic_arithmetic() {
        let constant = DevianceTrace {
            draws: vec![100.0; 5],
            at_mean: 100.0,
        };
        assert_eq!(dic(&constant).unwrap(), 100.0);
        let two = DevianceTrace {
            draws: vec![98.0, 102.0],
            at_mean: 99.0,
        };
        assert_eq!(dic(&two).unwrap(), 115.0);
        let one = DevianceTrace {
            draws: vec![98.0],
            at_mean: 99.0,
        };
        assert!(dic(&one).is_err());
    }

    #[test]
    fn dic_ignores_draw_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws: Vec<f64> = (0..50).map(|_| 1000.0 + rng.random::<f64>() * 10.0).collect();
        let mut rev = draws.clone();
        rev.reverse();
        let a = dic(&DevianceTrace { draws, at_mean: 990.0 }).unwrap();
        let b = dic(&DevianceTrace { draws: rev, at_mean: 990.0 }).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    fn orthant(n: usize) -> Vec<CopulaInterval> {
        vec![CopulaInterval { lo: 0.0, hi: f64::INFINITY }; n]
    }

    #[test]
    fn orthant_probabilities_match_closed_forms() {
        let tight = GhkConfig { rel_tol: 1e-4, ..GhkConfig::default() };
        let rho = 0.6f64;
        let corr = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        let ghk = RectangleIntegrator::new(corr, tight).unwrap();
        let exact = 0.25 + rho.asin() / (2.0 * std::f64::consts::PI);
        let got = ghk.log_prob(&orthant(2)).unwrap().exp();
        assert!((got / exact - 1.0).abs() < 2e-3, "{got} vs {exact}");

        let (r12, r13, r23) = (0.5f64, 0.3f64, -0.2f64);
        let corr = DMatrix::from_row_slice(3, 3, &[1.0, r12, r13, r12, 1.0, r23, r13, r23, 1.0]);
        let ghk = RectangleIntegrator::new(corr, tight).unwrap();
        let exact = 0.125 + (r12.asin() + r13.asin() + r23.asin()) / (4.0 * std::f64::consts::PI);
        let got = ghk.log_prob(&orthant(3)).unwrap().exp();
        assert!((got / exact - 1.0).abs() < 2e-3, "{got} vs {exact}");
    }

    #[test]
    fn independent_rectangles_factorize_and_missing_coordinates_drop_out() {
        let ghk = RectangleIntegrator::new(DMatrix::identity(3, 3), GhkConfig::default()).unwrap();
        let ivs = [
            CopulaInterval { lo: -0.5, hi: 1.0 },
            CopulaInterval::FULL,
            CopulaInterval { lo: 1.5, hi: 2.5 },
        ];
        let exact = (norm_cdf(1.0) - norm_cdf(-0.5)) * (norm_cdf(2.5) - norm_cdf(1.5));
        let got = ghk.log_prob(&ivs).unwrap().exp();
        assert!((got / exact - 1.0).abs() < 1e-9);
        assert_eq!(ghk.log_prob(&[CopulaInterval::FULL; 3]).unwrap(), 0.0);
    }

    fn one_trait_model() -> OrdinalMarginalModel {
        OrdinalMarginalModel {
            trait_id: "t".into(),
            link: Link::Logit,
            thresholds: vec![-1.0, 0.3, 1.2],
            gamma: vec![],
            covariate_names: vec![],
            loglik: 0.0,
        }
    }

    #[test]
    fn single_trait_deviance_is_ordinal_loglik() {
        let model = one_trait_model();
        let ys = [1u16, 2, 2, 3, 4, 4, 4, 1, 3];
        let intervals: Vec<CopulaInterval> = ys.iter().map(|&y| copula_interval(&model, Some(y), &[])).collect();
        let ll = group_loglik(&intervals, 1, &(DMatrix::identity(1, 1) * 2.0), GhkConfig::default()).unwrap();
        let exact: f64 = ys.iter().map(|&y| model.log_prob(y, &[])).sum();
        assert!((ll - exact).abs() < 1e-10, "{ll} vs {exact}");
    }

    #[test]
    fn duplicated_data_doubles_the_deviance() {
        let omega = DMatrix::from_row_slice(3, 3, &[1.5, -0.5, 0.2, -0.5, 1.2, -0.3, 0.2, -0.3, 1.0]);
        let model = one_trait_model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<CopulaInterval> = (0..60)
            .map(|_| copula_interval(&model, Some(rng.random_range(1..=4u16)), &[]))
            .collect();
        let mut doubled = rows.clone();
        doubled.extend_from_slice(&rows);
        let a = group_loglik(&rows, 3, &omega, GhkConfig::default()).unwrap();
        let b = group_loglik(&doubled, 3, &omega, GhkConfig::default()).unwrap();
        assert!((b / a - 2.0).abs() < 1e-6);
    }

    fn rotate(c: &[[f64; 2]], theta: f64, reflect: bool) -> Vec<[f64; 2]> {
        let (s, co) = theta.sin_cos();
        c.iter()
            .map(|x| {
                let y = [co * x[0] - s * x[1], s * x[0] + co * x[1]];
                if reflect {
                    [y[0], -y[1]]
                } else {
                    y
                }
            })
            .collect()
    }

    #[test]
    fn procrustes_recovers_known_rotations() {
        let reference = vec![[0.3, -0.1], [0.5, 0.4], [-0.2, 0.25], [0.0, -0.6]];
        let samples = vec![
            reference.clone(),
            rotate(&reference, 1.1, false),
            rotate(&reference, -2.3, true),
        ];
        let out = procrustes_align(&samples).unwrap();
        for draw in &out.aligned {
            for (a, b) in draw.iter().zip(&reference) {
                assert!((a[0] - b[0]).abs() < 1e-8 && (a[1] - b[1]).abs() < 1e-8);
            }
        }
        for q in &out.rotations {
            let m = Matrix2::new(q[0][0], q[0][1], q[1][0], q[1][1]);
            assert!((m.transpose() * m - Matrix2::identity()).norm() < 1e-10);
        }
    }

    #[test]
    fn procrustes_preserves_inner_products_and_single_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<Vec<[f64; 2]>> = (0..5)
            .map(|_| (0..6).map(|_| [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5]).collect())
            .collect();
        let out = procrustes_align(&samples).unwrap();
        for (orig, al) in samples.iter().zip(&out.aligned) {
            for a in 0..6 {
                for b in 0..6 {
                    let x = orig[a][0] * orig[b][0] + orig[a][1] * orig[b][1];
                    let y = al[a][0] * al[b][0] + al[a][1] * al[b][1];
                    assert!((x - y).abs() < 1e-10);
                }
            }
        }
        let single = procrustes_align(&samples[..1]).unwrap();
        for (a, b) in single.mean.iter().zip(&samples[0]) {
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
        assert!(procrustes_align(&[vec![[0.0, 0.0]; 3]]).is_err());
    }

    #[test]
    fn edge_table_shape_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.csv");
        let traits: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let ones = DMatrix::from_fn(3, 3, |i, j| if i == j { 0.0 } else { 1.0 });
        write_edge_table(&path, &["G1".into(), "G2".into()], &traits, &[ones.clone(), ones]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "group,a–b,a–c,b–c");
        assert_eq!(lines[1], "G1,1,1,1");
    }

    #[test]
    fn auc_of_perfect_and_tied_scores() {
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[true, true, false]), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[true, false]), 0.5);
    }

    proptest! {
        #[test]
        fn dic_is_permutation_invariant_and_penalizes_spread(
            draws in proptest::collection::vec(50.0f64..150.0, 2..20),
            at_mean in 50.0f64..150.0,
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let base = dic(&DevianceTrace { draws: draws.clone(), at_mean }).unwrap();
            let mut shuffled = draws.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let again = dic(&DevianceTrace { draws: shuffled, at_mean }).unwrap();
            prop_assert!((base - again).abs() <= 1e-9 * base.abs());
            prop_assert!(base >= at_mean);
        }
    }
}
