//! The full sampler: graph-prior parameters, latent data, precisions and
//! continuous-time birth-death moves over each group graph.
//!
//! Each outer iteration runs, in order: one Gibbs scan of the graph-prior
//! parameters; then, for every group in parallel, one latent-data sweep,
//! a fresh G-Wishart precision draw and a birth-death trajectory of fixed
//! duration. Edge posteriors are time averages over those trajectories.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::copula_latent::{gibbs_sweep_latent, LatentMatrix};
use crate::dataset::{ProximityData, SurveyDataset};
use crate::error::{Error, Result};
use crate::graph::{edge_slots, n_slots, Graph};
use crate::graph_prior::{
    all_group_scores, gibbs_update_params, log_prior_odds, GraphFamily, ParamTraceWriter, PriorParams, Variant,
    PRIOR_VARIANCE,
};
use crate::gwishart::{
    edge_conditional, log_normalizer_ratio, posterior_params, redraw_edge_block, sample_gwishart, GWishartParams,
    DEFAULT_DF, DEFAULT_MAX_SWEEPS,
};
use crate::marginals::{CopulaInterval, MarginalSet};
use crate::rng::{stream, Purpose};

const MIN_RATE: f64 = 1e-12;
const MAX_RATE: f64 = 1e12;
const CHECKPOINT_MAGIC: &[u8; 8] = b"GCGMCKPT";
const CHECKPOINT_VERSION: u32 = 1;
/// Graph occupancy is tracked exactly when a group graph has at most this many slots.
const OCCUPANCY_MAX_SLOTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iterations: u64,
    pub burn_in: u64,
    pub seed: u64,
    pub variant: Variant,
    /// Stride for stored parameter draws and trace rows.
    pub thin: u64,
    /// Cap on covariance-completion sweeps per G-Wishart draw.
    pub gwishart_max_sweeps: usize,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub checkpoint_every: u64,
    pub n_deviance_draws: usize,
    pub prior_variance: f64,
    /// G-Wishart prior degrees of freedom; the scale is the identity.
    pub gwishart_df: f64,
}

impl ChainConfig {
    /// Desk-scale defaults: 50k iterations, 10k burn-in.
    pub fn desk(variant: Variant, seed: u64) -> Self {
        ChainConfig {
            n_iterations: 50_000,
            burn_in: 10_000,
            seed,
            variant,
            thin: 10,
            gwishart_max_sweeps: DEFAULT_MAX_SWEEPS,
            threads: 0,
            checkpoint_every: 10_000,
            n_deviance_draws: 50,
            prior_variance: PRIOR_VARIANCE,
            gwishart_df: DEFAULT_DF,
        }
    }

    /// Full-scale run lengths: 2M iterations, 500k burn-in.
    pub fn full_scale(variant: Variant, seed: u64) -> Self {
        ChainConfig {
            n_iterations: 2_000_000,
            burn_in: 500_000,
            thin: 100,
            ..ChainConfig::desk(variant, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in > self.n_iterations {
            return Err(Error::Invalid(format!(
                "burn-in {} exceeds the {} iterations",
                self.burn_in, self.n_iterations
            )));
        }
        if self.thin == 0 {
            return Err(Error::Invalid("thinning stride must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Invalid("checkpoint interval must be at least 1".into()));
        }
        if self.gwishart_max_sweeps == 0 {
            return Err(Error::Invalid("G-Wishart sweeps must be at least 1".into()));
        }
        if !(self.prior_variance > 0.0) || !(self.gwishart_df > 2.0) {
            return Err(Error::Invalid("prior variance must be positive and df above 2".into()));
        }
        Ok(())
    }

    /// Post-burn-in iterations at which full parameter snapshots are kept.
    pub fn snapshot_iterations(&self) -> BTreeSet<u64> {
        let span = self.n_iterations - self.burn_in;
        let m = (self.n_deviance_draws as u64).min(span);
        (0..m).map(|j| self.burn_in + (2 * j + 1) * span / (2 * m)).collect()
    }
}

/// Birth and death rates over every edge slot of one graph.
#[derive(Debug, Clone, PartialEq)]
pub struct RateTable {
    pub slots: Vec<(usize, usize)>,
    pub present: Vec<bool>,
    pub rates: Vec<f64>,
    /// Log posterior odds of presence vs absence for each slot.
    pub log_odds: Vec<f64>,
}

impl RateTable {
    pub fn total(&self) -> f64 {
        self.rates.iter().sum()
    }
}

/// Rates at `(graph, omega)` under posterior parameters `post` and prior
/// degrees of freedom `prior_b`.
///
/// Each rate is `min(1, odds)` where `odds` is the conditional posterior
/// ratio of the toggled state to the current one, integrating out the
/// toggled entry and the matching diagonal Schur complement. `prior_log_odds`
/// are the graph-prior log odds of presence per slot.
pub fn birth_death_rates(
    graph: &Graph,
    omega: &DMatrix<f64>,
    post: &GWishartParams,
    prior_b: f64,
    prior_log_odds: &[f64],
) -> Result<RateTable> {
    let p = graph.p();
    if prior_log_odds.len() != n_slots(p) {
        return Err(Error::Invalid(format!(
            "{} prior odds for {} slots",
            prior_log_odds.len(),
            n_slots(p)
        )));
    }
    let sigma = omega
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("precision in rate computation".into()))?;
    let slots: Vec<(usize, usize)> = edge_slots(p).collect();
    let mut present = Vec::with_capacity(slots.len());
    let mut rates = Vec::with_capacity(slots.len());
    let mut log_odds = Vec::with_capacity(slots.len());
    let mut clamped = 0usize;
    for (s, &(i, j)) in slots.iter().enumerate() {
        let cond = edge_conditional(omega, &sigma, &post.d, i, j);
        let lo = prior_log_odds[s] + cond.log_integral() - log_normalizer_ratio(prior_b, graph.common_neighbors(i, j));
        if lo.is_nan() {
            return Err(Error::Numerical(format!("undefined rate for edge ({i}, {j})")));
        }
        let on = graph.has_edge(i, j);
        let toward = if on { -lo } else { lo };
        let raw = toward.min(0.0).exp();
        if raw < MIN_RATE || raw > MAX_RATE {
            clamped += 1;
        }
        present.push(on);
        rates.push(raw.clamp(MIN_RATE, MAX_RATE));
        log_odds.push(lo);
    }
    if clamped > 0 {
        log::trace!("{clamped} birth-death rates clamped to [{MIN_RATE:e}, {MAX_RATE:e}]");
    }
    Ok(RateTable {
        slots,
        present,
        rates,
        log_odds,
    })
}

/// Draws the next move: a slot chosen with probability proportional to its
/// rate and an exponential holding time with the total rate.
pub fn bd_jump<R: Rng + ?Sized>(rates: &[f64], rng: &mut R) -> Result<(usize, f64)> {
    let total: f64 = rates.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numerical(format!("birth-death rates sum to {total}")));
    }
    let u: f64 = rng.random();
    let hold = -(1.0 - u).ln() / total;
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (s, &r) in rates.iter().enumerate() {
        acc += r;
        if target < acc {
            return Ok((s, hold));
        }
    }
    let last = rates.iter().rposition(|&r| r > 0.0).expect("positive total");
    Ok((last, hold))
}

/// Result of one fixed-duration birth-death trajectory.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryStats {
    pub jumps: u64,
    /// Total rate at the starting state.
    pub initial_rate: f64,
}

/// Runs the birth-death process for `horizon` time units, calling
/// `record(graph, duration)` for every state visited.
#[allow(clippy::too_many_arguments)]
pub fn bd_trajectory<R: Rng + ?Sized>(
    graph: &mut Graph,
    omega: &mut DMatrix<f64>,
    post: &GWishartParams,
    prior_b: f64,
    prior_log_odds: &[f64],
    horizon: f64,
    rng: &mut R,
    mut record: impl FnMut(&Graph, f64),
) -> Result<TrajectoryStats> {
    let mut elapsed = 0.0;
    let mut jumps = 0;
    let mut initial_rate = None;
    loop {
        let table = birth_death_rates(graph, omega, post, prior_b, prior_log_odds)?;
        initial_rate.get_or_insert(table.total());
        let (s, hold) = bd_jump(&table.rates, rng)?;
        if elapsed + hold >= horizon {
            record(graph, horizon - elapsed);
            break;
        }
        record(graph, hold);
        elapsed += hold;
        let (i, j) = table.slots[s];
        graph.toggle(i, j);
        redraw_edge_block(omega, &post.d, post.b, i, j, graph.has_edge(i, j), rng)?;
        jumps += 1;
    }
    Ok(TrajectoryStats {
        jumps,
        initial_rate: initial_rate.unwrap_or(0.0),
    })
}

/// Complete sampler state between iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    /// Index of the next iteration to run.
    pub iteration: u64,
    pub params: PriorParams,
    pub family: GraphFamily,
    pub omegas: Vec<DMatrix<f64>>,
    pub latents: Vec<LatentMatrix>,
    /// Birth-death trajectory length per group.
    pub horizons: Vec<f64>,
    rate_sums: Vec<f64>,
    rate_count: u64,
}

/// Parameter values at one stored iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDraw {
    pub iteration: u64,
    pub params: PriorParams,
}

/// Everything needed to evaluate the deviance at one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: u64,
    pub params: PriorParams,
    pub family: GraphFamily,
    pub omegas: Vec<DMatrix<f64>>,
}

/// Post-burn-in summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorAccumulator {
    pub groups: Vec<String>,
    pub p: usize,
    pub variant: Variant,
    /// Time with each slot present, per group.
    pub edge_time: Vec<Vec<f64>>,
    pub total_time: Vec<f64>,
    /// Time spent in each graph (keyed by slot mask), for small p.
    pub graph_time: Vec<BTreeMap<u64, f64>>,
    /// Number of visits to each graph, for small p.
    pub graph_visits: Vec<BTreeMap<u64, u64>>,
    pub jumps: Vec<u64>,
    /// Iterations accumulated.
    pub n_draws: u64,
    pub omega_sum: Vec<DMatrix<f64>>,
    pub alpha_sum: Vec<f64>,
    pub alpha_sq: Vec<f64>,
    pub beta_sum: Vec<f64>,
    pub beta_sq: Vec<f64>,
    /// Thinned parameter draws.
    pub draws: Vec<ParamDraw>,
    pub snapshots: Vec<Snapshot>,
}

impl PosteriorAccumulator {
    fn new(groups: Vec<String>, p: usize, params: &PriorParams) -> Self {
        let k = groups.len();
        let track = n_slots(p) <= OCCUPANCY_MAX_SLOTS;
        PosteriorAccumulator {
            groups,
            p,
            variant: params.variant,
            edge_time: vec![vec![0.0; n_slots(p)]; k],
            total_time: vec![0.0; k],
            graph_time: vec![BTreeMap::new(); if track { k } else { 0 }],
            graph_visits: vec![BTreeMap::new(); if track { k } else { 0 }],
            jumps: vec![0; k],
            n_draws: 0,
            omega_sum: vec![DMatrix::zeros(p, p); k],
            alpha_sum: vec![0.0; k],
            alpha_sq: vec![0.0; k],
            beta_sum: vec![0.0; params.beta.len()],
            beta_sq: vec![0.0; params.beta.len()],
            draws: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n_draws == 0
    }

    pub fn alpha_mean(&self) -> Vec<f64> {
        self.alpha_sum.iter().map(|s| s / self.n_draws as f64).collect()
    }

    pub fn alpha_sd(&self) -> Vec<f64> {
        moment_sd(&self.alpha_sum, &self.alpha_sq, self.n_draws)
    }

    pub fn beta_mean(&self) -> Vec<f64> {
        self.beta_sum.iter().map(|s| s / self.n_draws as f64).collect()
    }

    pub fn beta_sd(&self) -> Vec<f64> {
        moment_sd(&self.beta_sum, &self.beta_sq, self.n_draws)
    }

    pub fn omega_mean(&self) -> Vec<DMatrix<f64>> {
        self.omega_sum.iter().map(|s| s / self.n_draws as f64).collect()
    }

    fn record_graph(&mut self, g: usize, graph: &Graph, dt: f64) {
        self.total_time[g] += dt;
        for (s, on) in graph.slots().into_iter().enumerate() {
            if on {
                self.edge_time[g][s] += dt;
            }
        }
        if let Some(times) = self.graph_time.get_mut(g) {
            let mask = graph.slot_mask() as u64;
            *times.entry(mask).or_insert(0.0) += dt;
            *self.graph_visits[g].entry(mask).or_insert(0) += 1;
        }
    }
}

fn moment_sd(sum: &[f64], sq: &[f64], n: u64) -> Vec<f64> {
    let n = n as f64;
    sum.iter()
        .zip(sq)
        .map(|(s, q)| {
            if n < 2.0 {
                return f64::NAN;
            }
            let m = s / n;
            ((q - n * m * m) / (n - 1.0)).max(0.0).sqrt()
        })
        .collect()
}

/// Time-weighted edge inclusion probabilities as symmetric p × p matrices
/// with a zero diagonal.
pub fn edge_posterior(acc: &PosteriorAccumulator) -> Result<Vec<DMatrix<f64>>> {
    acc.edge_time
        .iter()
        .zip(&acc.total_time)
        .zip(&acc.groups)
        .map(|((times, &total), id)| {
            if !(total > 0.0) {
                return Err(Error::Invalid(format!("group {id}: no post-burn-in time accumulated")));
            }
            let mut m = DMatrix::zeros(acc.p, acc.p);
            for ((i, j), t) in edge_slots(acc.p).zip(times) {
                let q = (t / total).clamp(0.0, 1.0);
                m[(i, j)] = q;
                m[(j, i)] = q;
            }
            Ok(m)
        })
        .collect()
}

/// Normalized time-weighted occupancy over graphs (slot-mask keyed).
pub fn graph_occupancy(acc: &PosteriorAccumulator, g: usize) -> Option<BTreeMap<u64, f64>> {
    let times = acc.graph_time.get(g)?;
    let total: f64 = times.values().sum();
    Some(times.iter().map(|(&m, &t)| (m, t / total)).collect())
}

/// Where the sampler writes checkpoints, traces and its progress log.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub dir: Option<PathBuf>,
    /// Continue from `dir/checkpoint.bin` when it exists.
    pub resume: bool,
}

impl RunOutputs {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        RunOutputs {
            dir: Some(dir.into()),
            resume: false,
        }
    }
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PARAM_TRACE_FILE: &str = "trace_params.csv";
pub const LOG_FILE: &str = "log.jsonl";

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config: ChainConfig,
    state: ChainState,
    acc: PosteriorAccumulator,
}

pub fn write_checkpoint(path: &Path, config: &ChainConfig, state: &ChainState, acc: &PosteriorAccumulator) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(&tmp, e))?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(|e| Error::io(&tmp, e))?;
        let payload = Checkpoint {
            config: config.clone(),
            state: state.clone(),
            acc: acc.clone(),
        };
        ciborium::into_writer(&payload, &mut w).map_err(|e| Error::Checkpoint(e.to_string()))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint file", path.display())));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version).map_err(|e| Error::io(path, e))?;
    let version = u32::from_le_bytes(version);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    ciborium::from_reader(r).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Everything the sampler reads.
#[derive(Clone, Copy)]
pub struct ChainInput<'a> {
    pub dataset: &'a SurveyDataset,
    pub marginals: &'a MarginalSet,
    pub prox: Option<&'a ProximityData>,
}

/// Sampler plus its accumulated output.
pub struct Chain<'a> {
    input: ChainInput<'a>,
    config: ChainConfig,
    intervals: Vec<Vec<CopulaInterval>>,
    prior: GWishartParams,
    snapshot_at: BTreeSet<u64>,
    pub state: ChainState,
    pub acc: PosteriorAccumulator,
}

struct GroupUpdate {
    latent: LatentMatrix,
    omega: DMatrix<f64>,
    graph: Graph,
    segments: Vec<(Graph, f64)>,
    stats: TrajectoryStats,
}

impl<'a> Chain<'a> {
    pub fn new(input: ChainInput<'a>, config: ChainConfig) -> Result<Self> {
        config.validate()?;
        let ds = input.dataset;
        let (k, p) = (ds.n_groups(), ds.n_traits());
        if k == 0 || p < 2 {
            return Err(Error::Invalid("the sampler needs at least one group and two traits".into()));
        }
        if input.marginals.models.len() != k {
            return Err(Error::Invalid("marginals do not match the dataset".into()));
        }
        let prox = if config.variant.uses_proximity() {
            let prox = input.prox.ok_or_else(|| {
                Error::Invalid(format!("variant {} requires proximity data (--proximity)", config.variant))
            })?;
            Some(prox)
        } else {
            None
        };
        let input = ChainInput { prox, ..input };
        let d = prox.map_or(0, ProximityData::dim);
        let intervals: Vec<Vec<CopulaInterval>> = ds
            .groups
            .iter()
            .enumerate()
            .map(|(g, group)| input.marginals.intervals(group, g))
            .collect();
        let family = GraphFamily::empty(k, p);
        let mut rng = stream(config.seed, Purpose::Init, 0, 0);
        let params = PriorParams::initialize(config.variant, &family, d, &mut rng);
        params.validate(k, prox)?;
        let latents = ds
            .groups
            .iter()
            .zip(&intervals)
            .map(|(group, iv)| LatentMatrix::initialize(group.n(), p, iv))
            .collect();
        let state = ChainState {
            iteration: 0,
            params: params.clone(),
            family,
            omegas: vec![DMatrix::identity(p, p); k],
            latents,
            horizons: vec![0.0; k],
            rate_sums: vec![0.0; k],
            rate_count: 0,
        };
        let acc = PosteriorAccumulator::new(ds.group_ids(), p, &params);
        Ok(Chain {
            input,
            prior: GWishartParams::new(config.gwishart_df, DMatrix::identity(p, p))?,
            snapshot_at: config.snapshot_iterations(),
            config,
            intervals,
            state,
            acc,
        })
    }

    /// Restores state and accumulator from a checkpoint written by a run
    /// with the same configuration.
    pub fn resume(input: ChainInput<'a>, config: ChainConfig, path: &Path) -> Result<Self> {
        let mut chain = Chain::new(input, config)?;
        let ckpt = read_checkpoint(path)?;
        let mut theirs = ckpt.config.clone();
        theirs.threads = chain.config.threads;
        if theirs != chain.config {
            return Err(Error::Checkpoint(format!(
                "{} was written with a different configuration",
                path.display()
            )));
        }
        let k = chain.input.dataset.n_groups();
        if ckpt.state.latents.len() != k
            || ckpt
                .state
                .latents
                .iter()
                .zip(&chain.input.dataset.groups)
                .any(|(z, g)| z.n != g.n() || z.p != g.n_traits)
        {
            return Err(Error::Checkpoint("checkpoint does not match the dataset".into()));
        }
        chain.state = ckpt.state;
        chain.acc = ckpt.acc;
        Ok(chain)
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.config.n_iterations
    }

    /// Runs one outer iteration.
    pub fn step(&mut self) -> Result<()> {
        let t = self.state.iteration;
        let seed = self.config.seed;
        let prox = self.input.prox;

        let mut rng = stream(seed, Purpose::PriorParams, t, 0);
        let params = gibbs_update_params(&self.state.family, &self.state.params, prox, self.config.prior_variance, &mut rng)?;
        let scores = all_group_scores(&self.state.family, &params, prox);

        let burning = t < self.config.burn_in;
        let first_frozen = !burning && self.state.rate_count == 0;
        let state = &self.state;
        let intervals = &self.intervals;
        let prior = &self.prior;
        let max_sweeps = self.config.gwishart_max_sweeps;
        let updates: Vec<Result<GroupUpdate>> = (0..state.family.n_groups())
            .into_par_iter()
            .map(|g| {
                let mut latent = state.latents[g].clone();
                let mut rng = stream(seed, Purpose::Latent, t, g as u64);
                gibbs_sweep_latent(&mut latent, &state.omegas[g], &intervals[g], &mut rng)?;
                let post = posterior_params(prior, &latent);
                let mut graph = state.family.graphs[g].clone();
                let mut rng = stream(seed, Purpose::Precision, t, g as u64);
                let mut omega = sample_gwishart(&graph, &post, &mut rng, max_sweeps)?;
                let odds: Vec<f64> = scores[g].iter().map(|&s| log_prior_odds(s)).collect();
                let horizon = if burning || first_frozen {
                    let table = birth_death_rates(&graph, &omega, &post, prior.b, &odds)?;
                    let mean = (state.rate_sums[g] + table.total()) / (state.rate_count + 1) as f64;
                    1.0 / mean
                } else {
                    state.horizons[g]
                };
                let mut rng = stream(seed, Purpose::BirthDeath, t, g as u64);
                let mut segments = Vec::new();
                let stats = bd_trajectory(&mut graph, &mut omega, &post, prior.b, &odds, horizon, &mut rng, |gr, dt| {
                    segments.push((gr.clone(), dt))
                })?;
                Ok(GroupUpdate {
                    latent,
                    omega,
                    graph,
                    segments,
                    stats,
                })
            })
            .collect();
        let updates: Vec<GroupUpdate> = updates.into_iter().collect::<Result<_>>()?;

        let post_burn = !burning;
        for (g, u) in updates.into_iter().enumerate() {
            if burning || first_frozen {
                self.state.rate_sums[g] += u.stats.initial_rate;
                if first_frozen || t + 1 == self.config.burn_in {
                    let count = self.state.rate_count + 1;
                    self.state.horizons[g] = count as f64 / self.state.rate_sums[g];
                }
            }
            if post_burn {
                for (graph, dt) in &u.segments {
                    self.acc.record_graph(g, graph, *dt);
                }
                self.acc.jumps[g] += u.stats.jumps;
            }
            self.state.latents[g] = u.latent;
            self.state.omegas[g] = u.omega;
            self.state.family.graphs[g] = u.graph;
        }
        if burning || first_frozen {
            self.state.rate_count += 1;
        }
        self.state.params = params;

        if post_burn {
            let acc = &mut self.acc;
            acc.n_draws += 1;
            for (s, o) in acc.omega_sum.iter_mut().zip(&self.state.omegas) {
                *s += o;
            }
            for (g, a) in self.state.params.alpha.iter().enumerate() {
                acc.alpha_sum[g] += a;
                acc.alpha_sq[g] += a * a;
            }
            for (l, b) in self.state.params.beta.iter().enumerate() {
                acc.beta_sum[l] += b;
                acc.beta_sq[l] += b * b;
            }
            if (t - self.config.burn_in) % self.config.thin == 0 {
                acc.draws.push(ParamDraw {
                    iteration: t,
                    params: self.state.params.clone(),
                });
            }
            if self.snapshot_at.contains(&t) {
                acc.snapshots.push(Snapshot {
                    iteration: t,
                    params: self.state.params.clone(),
                    family: self.state.family.clone(),
                    omegas: self.state.omegas.clone(),
                });
            }
        }
        self.state.iteration += 1;
        Ok(())
    }

    /// Runs to completion, writing checkpoints, traces and a JSON-lines
    /// progress log when `outputs.dir` is set.
    pub fn run(&mut self, outputs: &RunOutputs) -> Result<()> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.threads)
            .build()
            .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?;
        pool.install(|| self.run_inner(outputs))
    }

    fn run_inner(&mut self, outputs: &RunOutputs) -> Result<()> {
        let mut sinks = match &outputs.dir {
            Some(dir) => Some(Sinks::open(dir, &self.state)?),
            None => None,
        };
        while !self.is_finished() {
            let started = Instant::now();
            if let Err(e) = self.step() {
                if let Some(dir) = &outputs.dir {
                    let path = dir.join(CHECKPOINT_FILE);
                    if let Err(ce) = write_checkpoint(&path, &self.config, &self.state, &self.acc) {
                        log::error!("could not write checkpoint after failure: {ce}");
                    }
                }
                return Err(e);
            }
            let t = self.state.iteration - 1;
            if let Some(sinks) = sinks.as_mut() {
                sinks.after_iteration(t, &self.state, &self.acc, self.config.thin, started.elapsed().as_secs_f64())?;
                if self.state.iteration % self.config.checkpoint_every == 0 || self.is_finished() {
                    sinks.flush()?;
                    let dir = outputs.dir.as_ref().expect("sinks imply a directory");
                    write_checkpoint(&dir.join(CHECKPOINT_FILE), &self.config, &self.state, &self.acc)?;
                }
            }
            if self.state.iteration % 1000 == 0 {
                log::info!("iteration {}/{}", self.state.iteration, self.config.n_iterations);
            }
        }
        Ok(())
    }
}

struct Sinks {
    trace: ParamTraceWriter,
    log: BufWriter<File>,
    log_path: PathBuf,
}

impl Sinks {
    fn open(dir: &Path, state: &ChainState) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let trace_path = dir.join(PARAM_TRACE_FILE);
        let log_path = dir.join(LOG_FILE);
        // Drop rows written after the state being resumed from.
        let kept_trace = keep_rows_before(&trace_path, state.iteration, true)?;
        let kept_log = keep_rows_before(&log_path, state.iteration, false)?;
        let mut trace = ParamTraceWriter::create(&trace_path, &state.params)?;
        for row in kept_trace {
            trace.append_raw(&row)?;
        }
        let file = File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        for line in kept_log {
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
        }
        Ok(Sinks { trace, log, log_path })
    }

    fn after_iteration(&mut self, t: u64, state: &ChainState, acc: &PosteriorAccumulator, thin: u64, seconds: f64) -> Result<()> {
        if t % thin == 0 {
            self.trace.append(t, &state.params)?;
        }
        let jumps: u64 = acc.jumps.iter().sum();
        let entry = serde_json::json!({
            "iteration": t,
            "seconds": seconds,
            "edges": state.family.graphs.iter().map(Graph::n_edges).collect::<Vec<_>>(),
            "jumps_total": jumps,
        });
        writeln!(self.log, "{entry}").map_err(|e| Error::io(&self.log_path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.trace.flush()?;
        self.log.flush().map_err(|e| Error::io(&self.log_path, e))
    }
}

/// Lines of an existing trace (CSV, skipping its header) or log whose
/// iteration is below `before`.
fn keep_rows_before(path: &Path, before: u64, has_header: bool) -> Result<Vec<String>> {
    if before == 0 || !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(usize::from(has_header))
        .filter(|line| {
            let it = if has_header {
                line.split(',').next().and_then(|v| v.parse::<u64>().ok())
            } else {
                serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("iteration").and_then(|i| i.as_u64()))
            };
            it.is_some_and(|i| i < before)
        })
        .map(str::to_string)
        .collect())
}

/// Fits the model, writing nothing to disk.
pub fn run_chain(
    dataset: &SurveyDataset,
    marginals: &MarginalSet,
    prox: Option<&ProximityData>,
    config: &ChainConfig,
) -> Result<PosteriorAccumulator> {
    let mut chain = Chain::new(ChainInput { dataset, marginals, prox }, config.clone())?;
    chain.run(&RunOutputs::default())?;
    Ok(chain.acc)
}

/// Output of a structure-only chain on fixed Gaussian data.
#[derive(Debug, Clone)]
pub struct StructureRun {
    pub graph_time: BTreeMap<u64, f64>,
    pub graph_visits: BTreeMap<u64, u64>,
    pub edge_time: Vec<f64>,
    pub total_time: f64,
    pub jumps: u64,
}

impl StructureRun {
    pub fn occupancy(&self) -> BTreeMap<u64, f64> {
        self.graph_time.iter().map(|(&m, &t)| (m, t / self.total_time)).collect()
    }

    pub fn visit_frequencies(&self) -> BTreeMap<u64, f64> {
        let n: u64 = self.graph_visits.values().sum();
        self.graph_visits.iter().map(|(&m, &c)| (m, c as f64 / n as f64)).collect()
    }
}

/// Alternates G-Wishart precision draws and birth-death trajectories for a
/// single graph given fixed Gaussian data `z` and fixed prior log odds,
/// until `min_jumps` post-burn-in jumps have been made.
pub fn run_structure_chain(
    z: &LatentMatrix,
    prior: &GWishartParams,
    prior_log_odds: &[f64],
    burn_in: u64,
    min_jumps: u64,
    seed: u64,
) -> Result<StructureRun> {
    let p = z.p;
    let post = posterior_params(prior, z);
    let mut graph = Graph::empty(p);
    let mut run = StructureRun {
        graph_time: BTreeMap::new(),
        graph_visits: BTreeMap::new(),
        edge_time: vec![0.0; n_slots(p)],
        total_time: 0.0,
        jumps: 0,
    };
    let mut rate_sum = 0.0;
    let mut horizon = 0.0;
    let mut t = 0u64;
    while run.jumps < min_jumps {
        let mut rng = stream(seed, Purpose::Precision, t, 0);
        let mut omega = sample_gwishart(&graph, &post, &mut rng, DEFAULT_MAX_SWEEPS)?;
        let burning = t < burn_in;
        if burning || t == burn_in && burn_in == 0 {
            let table = birth_death_rates(&graph, &omega, &post, prior.b, prior_log_odds)?;
            rate_sum += table.total();
            horizon = (t + 1) as f64 / rate_sum;
        }
        let mut rng = stream(seed, Purpose::BirthDeath, t, 0);
        let mut segments = Vec::new();
        let stats = bd_trajectory(&mut graph, &mut omega, &post, prior.b, prior_log_odds, horizon, &mut rng, |g, dt| {
            segments.push((g.slot_mask() as u64, g.slots(), dt))
        })?;
        if !burning {
            for (mask, slots, dt) in segments {
                run.total_time += dt;
                *run.graph_time.entry(mask).or_insert(0.0) += dt;
                *run.graph_visits.entry(mask).or_insert(0) += 1;
                for (s, on) in slots.into_iter().enumerate() {
                    if on {
                        run.edge_time[s] += dt;
                    }
                }
            }
            run.jumps += stats.jumps;
        }
        t += 1;
    }
    Ok(run)
}
