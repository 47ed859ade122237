use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use gcgm::bdmcmc::*;
use gcgm::copula_latent::{truncated_normal_sample, LatentMatrix};
use gcgm::diagnostics::*;
use gcgm::graph::{edge_slots, Graph};
use gcgm::graph_prior::*;
use gcgm::gwishart::{sample_gwishart, GWishartParams, DEFAULT_MAX_SWEEPS};
use gcgm::marginals::{copula_interval, CopulaInterval, Link, MarginalSet};
use gcgm::rng::{stream, Purpose};
use gcgm::stats::{mean, pearson, quantile};
use gcgm::synthesis::*;

fn report(criterion: u32, pass: bool, detail: String) {
    let line = format!("{} [{criterion}] {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::stdout().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {criterion}: {detail}");
}

fn rng(seed: u64, index: u64) -> gcgm::rng::ChainRng {
    stream(seed, Purpose::Test, 0, index)
}

fn gaussian_data(omega: &DMatrix<f64>, n: usize, seed: u64) -> LatentMatrix {
    let p = omega.nrows();
    let l = omega.clone().try_inverse().unwrap().cholesky().unwrap().l();
    let mut r = rng(seed, 0);
    let mut data = Vec::with_capacity(n * p);
    for _ in 0..n {
        let eps = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut r));
        data.extend((&l * eps).iter());
    }
    LatentMatrix { n, p, data }
}

#[test]
fn bd_occupancy_matches_exhaustive_enumeration() {
    let t0 = Instant::now();
    let omega = DMatrix::from_row_slice(3, 3, &[1.0, -0.35, 0.0, -0.35, 1.0, -0.2, 0.0, -0.2, 1.0]);
    let z = gaussian_data(&omega, 50, 1);
    let prior = GWishartParams::default_prior(3);
    let exact = enumerate_posterior(&z, &prior, &[0.5; 3]).unwrap();
    let run = run_structure_chain(&z, &prior, &[0.0; 3], 1_000, 50_000, 2).unwrap();
    let occ = run.occupancy();
    let tv = 0.5
        * exact
            .iter()
            .enumerate()
            .map(|(m, q)| (occ.get(&(m as u64)).copied().unwrap_or(0.0) - q).abs())
            .sum::<f64>();
    let elapsed = t0.elapsed();
    report(
        1,
        tv < 0.05 && run.jumps >= 50_000 && elapsed < Duration::from_secs(120),
        format!("TV {tv:.4} over {} jumps in {elapsed:.2?}", run.jumps),
    );
}

#[test]
fn saturated_marginals_reproduce_empirical_cdfs() {
    let cfg = ScenarioConfig {
        k: 3,
        p: 4,
        n_k: 400,
        variant: Variant::Intercepts,
        alpha: vec![-0.3],
        beta: vec![],
        c: None,
        latent_radius: 0.35,
        n_clusters: 1,
        n_covariates: 0,
        n_categories: 5,
        missing_rate: 0.1,
        edge_strength: 0.5,
        shared_edges: vec![],
        n_sweeps: 20,
        seed: 2,
    };
    let (_, ds) = generate_scenario(&cfg).unwrap();
    let mut worst = 0.0f64;
    let mut tiled = true;
    let mut missing_full = true;
    for link in [Link::Logit, Link::Probit] {
        let m = MarginalSet::fit(&ds, link).unwrap();
        for (g, group) in ds.groups.iter().enumerate() {
            for j in 0..ds.n_traits() {
                let model = &m.models[g][j];
                let col: Vec<u16> = group.trait_column(j).into_iter().flatten().collect();
                let n = col.len() as f64;
                for c in 1..model.n_categories() {
                    let ecdf = col.iter().filter(|&&y| y as usize <= c).count() as f64 / n;
                    let target = match link {
                        Link::Logit => (ecdf / (1.0 - ecdf)).ln(),
                        Link::Probit => gcgm::stats::norm_ppf(ecdf),
                    };
                    worst = worst.max((model.thresholds[c - 1] - target).abs());
                }
                let cats: Vec<CopulaInterval> =
                    (1..=model.n_categories() as u16).map(|y| copula_interval(model, Some(y), &[])).collect();
                tiled &= cats[0].lo == f64::NEG_INFINITY && cats.last().unwrap().hi == f64::INFINITY;
                tiled &= cats.windows(2).all(|w| w[0].hi == w[1].lo && w[0].lo < w[0].hi);
                missing_full &= copula_interval(model, None, &[]).is_full();
            }
            for (i, iv) in m.intervals(group, g).iter().enumerate() {
                if group.responses[i].is_none() {
                    missing_full &= iv.is_full();
                }
            }
        }
    }
    report(
        2,
        worst < 1e-6 && tiled && missing_full,
        format!("max threshold error {worst:.2e}, tiling {tiled}, missing full {missing_full}"),
    );
}

fn within_se(draws: &[f64], target: f64) -> (bool, f64) {
    let m = mean(draws);
    let se = (gcgm::stats::sample_variance(draws) / draws.len() as f64).sqrt();
    let z = (m - target).abs() / se;
    (z < 3.0, z)
}

#[test]
fn sampler_moments_match_closed_forms() {
    let mut r = rng(3, 0);
    let n = 1_000_000;
    let tn_mean = (0..n).map(|_| truncated_normal_sample(0.0, 1.0, 0.0, f64::INFINITY, &mut r).unwrap()).sum::<f64>() / n as f64;
    let tn_ok = (tn_mean - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.005;

    let p = 4;
    let b = 5.0;
    let d = DMatrix::from_fn(p, p, |i, j| if i == j { 1.0 + 0.5 * i as f64 } else { 0.3 / (1.0 + (i + j) as f64) });
    let params = GWishartParams::new(b, d.clone()).unwrap();
    let target = d.clone().try_inverse().unwrap() * (b + p as f64 - 1.0);
    let full = Graph::complete(p);
    let m = 20_000;
    let draws: Vec<DMatrix<f64>> = (0..m).map(|_| sample_gwishart(&full, &params, &mut r, DEFAULT_MAX_SWEEPS).unwrap()).collect();
    let mut worst_z = 0.0f64;
    let mut full_ok = true;
    for i in 0..p {
        for j in i..p {
            let xs: Vec<f64> = draws.iter().map(|w| w[(i, j)]).collect();
            let (ok, z) = within_se(&xs, target[(i, j)]);
            full_ok &= ok;
            worst_z = worst_z.max(z);
        }
    }

    let (b1, d1) = (4.0, 2.5);
    let one = GWishartParams::new(b1, DMatrix::from_element(1, 1, d1)).unwrap();
    let xs: Vec<f64> = (0..m).map(|_| sample_gwishart(&Graph::empty(1), &one, &mut r, DEFAULT_MAX_SWEEPS).unwrap()[(0, 0)]).collect();
    let (gamma_ok, gz) = within_se(&xs, b1 / d1);

    report(
        3,
        tn_ok && full_ok && gamma_ok,
        format!("truncated-normal mean {tn_mean:.5}, full-graph worst |z| {worst_z:.2}, p=1 |z| {gz:.2}"),
    );
}

struct PriorChain {
    beta: Vec<Vec<f64>>,
    c: Vec<Vec<[f64; LATENT_DIM]>>,
}

fn run_prior_chain(
    family: &GraphFamily,
    variant: Variant,
    prox: Option<&gcgm::dataset::ProximityData>,
    d: usize,
    seed: u64,
    burn: usize,
    keep: usize,
) -> PriorChain {
    let mut r = rng(seed, 1);
    let mut params = PriorParams::initialize(variant, family, d, &mut r);
    let mut out = PriorChain { beta: vec![], c: vec![] };
    for t in 0..burn + keep {
        params = gibbs_update_params(family, &params, prox, PRIOR_VARIANCE, &mut r).unwrap();
        if t >= burn {
            out.beta.push(params.beta.clone());
            out.c.push(params.c.clone());
        }
    }
    out
}

#[test]
fn proximity_effects_are_recovered() {
    let truth = [1.0, -0.5];
    let mut passes = 0;
    let mut slowest = Duration::ZERO;
    for rep in 0..10u64 {
        let t0 = Instant::now();
        let mut r = stream(400 + rep, Purpose::Synthesis, 0, 0);
        let prox = generate_proximity(30, 2, 3, &mut r).unwrap();
        let params = PriorParams {
            variant: Variant::InterceptsProximity,
            alpha: vec![0.0; 30],
            beta: truth.to_vec(),
            c: vec![],
        };
        let family = generate_graph_family(&params, 10, Some(&prox), &mut r, DEFAULT_SWEEPS).unwrap();
        let chain = run_prior_chain(&family, Variant::InterceptsProximity, Some(&prox), 2, 500 + rep, 500, 3000);
        let mut ok = true;
        let mut line = String::new();
        for (i, &b) in truth.iter().enumerate() {
            let xs: Vec<f64> = chain.beta.iter().map(|v| v[i]).collect();
            let (m, lo, hi) = (mean(&xs), quantile(&xs, 0.05), quantile(&xs, 0.95));
            ok &= (m - b).abs() < 0.25 && lo <= b && b <= hi;
            line.push_str(&format!(" beta{} {m:.3} [{lo:.3}, {hi:.3}]", i + 1));
        }
        slowest = slowest.max(t0.elapsed());
        println!("  replicate {rep}:{line} {}", if ok { "ok" } else { "miss" });
        passes += ok as u32;
    }
    report(
        4,
        passes >= 8 && slowest < Duration::from_secs(600),
        format!("{passes}/10 replicates recovered beta, slowest {slowest:.2?}"),
    );
}

fn random_rotation(r: &mut impl Rng) -> Matrix2<f64> {
    let theta = r.random::<f64>() * std::f64::consts::TAU;
    let (s, c) = theta.sin_cos();
    if r.random::<bool>() {
        Matrix2::new(c, -s, s, c)
    } else {
        Matrix2::new(c, s, s, -c)
    }
}

fn rotate(c: &[[f64; LATENT_DIM]], q: &Matrix2<f64>) -> Vec<[f64; LATENT_DIM]> {
    c.iter()
        .map(|x| [x[0] * q[(0, 0)] + x[1] * q[(1, 0)], x[0] * q[(0, 1)] + x[1] * q[(1, 1)]])
        .collect()
}

fn inner_products(c: &[[f64; LATENT_DIM]]) -> Vec<f64> {
    let mut out = vec![];
    for a in 0..c.len() {
        for b in a..c.len() {
            out.push(c[a][0] * c[b][0] + c[a][1] * c[b][1]);
        }
    }
    out
}

#[test]
fn latent_positions_are_recovered_up_to_rotation() {
    let k = 20;
    let mut r = stream(600, Purpose::Synthesis, 0, 0);
    let c = generate_positions(k, 3, 0.4, &mut r);
    let params = PriorParams {
        variant: Variant::InterceptsLatent,
        alpha: vec![-0.3; k],
        beta: vec![],
        c: c.clone(),
    };
    let family = generate_graph_family(&params, 15, None, &mut r, DEFAULT_SWEEPS).unwrap();
    let chain = run_prior_chain(&family, Variant::InterceptsLatent, None, 0, 601, 1000, 4000);
    let aligned = procrustes_align(&chain.c).unwrap();
    let n = aligned.aligned.len() as f64;
    let truth = inner_products(&c);
    let mut post = vec![0.0; truth.len()];
    for draw in &aligned.aligned {
        for (acc, v) in post.iter_mut().zip(inner_products(draw)) {
            *acc += v / n;
        }
    }
    let corr = pearson(&post, &truth);

    let mut invariant = true;
    for _ in 0..100 {
        let q = random_rotation(&mut r);
        let mut rotated = params.clone();
        rotated.c = rotate(&params.c, &q);
        let random: Vec<[f64; LATENT_DIM]> = (0..k).map(|_| [r.random::<f64>() - 0.5, r.random::<f64>() - 0.5]).collect();
        let mut base = params.clone();
        base.c = random.clone();
        let mut turned = params.clone();
        turned.c = rotate(&random, &q);
        for g in 0..k {
            for slot in edge_slots(15) {
                let a = edge_score(g, slot, &family, &base, None).unwrap();
                let b = edge_score(g, slot, &family, &turned, None).unwrap();
                invariant &= (a - b).abs() <= 1e-12 * (1.0 + a.abs());
                let a = edge_score(g, slot, &family, &params, None).unwrap();
                let b = edge_score(g, slot, &family, &rotated, None).unwrap();
                invariant &= (a - b).abs() <= 1e-12 * (1.0 + a.abs());
            }
        }
    }
    report(
        5,
        corr > 0.9 && invariant,
        format!("inner-product correlation {corr:.3}, rotation invariance over 100 Q {invariant}"),
    );
}

fn flatten_probs(probs: &[DMatrix<f64>], graphs: &[Graph]) -> (Vec<f64>, Vec<bool>) {
    let p = graphs[0].p();
    let mut scores = vec![];
    let mut labels = vec![];
    for (pm, g) in probs.iter().zip(graphs) {
        for (i, j) in edge_slots(p) {
            scores.push(pm[(i, j)]);
            labels.push(g.has_edge(i, j));
        }
    }
    (scores, labels)
}

#[test]
fn pipeline_recovers_group_structures() {
    let cfg = ScenarioConfig {
        k: 6,
        p: 5,
        n_k: 500,
        variant: Variant::Intercepts,
        alpha: vec![-0.4],
        beta: vec![],
        c: None,
        latent_radius: 0.35,
        n_clusters: 1,
        n_covariates: 0,
        n_categories: 4,
        missing_rate: 0.0,
        edge_strength: 0.5,
        shared_edges: vec![(0, 1)],
        n_sweeps: 50,
        seed: 6,
    };
    let (truth, ds) = generate_scenario(&cfg).unwrap();
    let m = MarginalSet::fit(&ds, Link::Logit).unwrap();
    let mut cc = ChainConfig::desk(Variant::Intercepts, 7);
    cc.n_iterations = 3000;
    cc.burn_in = 1000;
    let acc = run_chain(&ds, &m, None, &cc).unwrap();
    let probs = edge_posterior(&acc).unwrap();
    let (scores, labels) = flatten_probs(&probs, &truth.graphs);
    let a = auc(&scores, &labels);
    let shared_min = probs.iter().map(|pm| pm[(0, 1)]).fold(f64::INFINITY, f64::min);
    report(
        6,
        a > 0.9 && shared_min > 0.9,
        format!("AUC {a:.3}, smallest shared-edge probability {shared_min:.3}"),
    );
}

#[test]
fn dic_prefers_proximity_on_proximity_driven_data() {
    let trace = DevianceTrace {
        draws: vec![98.0, 102.0],
        at_mean: 99.0,
    };
    let arithmetic = dic(&trace).unwrap();
    let arithmetic_ok = arithmetic == 115.0;

    let mut wins = 0;
    for rep in 0..10u64 {
        let cfg = ScenarioConfig {
            k: 12,
            p: 6,
            n_k: 50,
            variant: Variant::InterceptsProximity,
            alpha: vec![-0.25],
            beta: vec![0.5, 1.5],
            c: None,
            latent_radius: 0.35,
            n_clusters: 3,
            n_covariates: 0,
            n_categories: 3,
            missing_rate: 0.0,
            edge_strength: 0.5,
            shared_edges: vec![],
            n_sweeps: 200,
            seed: 100 + rep,
        };
        let (truth, ds) = generate_scenario(&cfg).unwrap();
        let m = MarginalSet::fit(&ds, Link::Logit).unwrap();
        let prox = truth.proximity.as_ref();
        let mut dics = BTreeMap::new();
        for v in [Variant::Intercepts, Variant::InterceptsProximity] {
            let mut cc = ChainConfig::desk(v, 7 + rep);
            cc.n_iterations = 3000;
            cc.burn_in = 1000;
            let acc = run_chain(&ds, &m, prox, &cc).unwrap();
            let input = ChainInput {
                dataset: &ds,
                marginals: &m,
                prox,
            };
            dics.insert(v.name(), compute_dic(&acc, input, GhkConfig::default()).unwrap().dic);
        }
        let (plain, with_prox) = (dics["intercepts"], dics["intercepts+prox"]);
        let win = with_prox < plain;
        println!("  replicate {rep}: intercepts {plain:.1}, intercepts+prox {with_prox:.1}");
        wins += win as u32;
    }
    report(
        7,
        wins >= 9 && arithmetic_ok,
        format!("intercepts+prox preferred in {wins}/10 replicates, hand-computed DIC {arithmetic}"),
    );
}

fn bundle_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    [EDGES_FILE, COEF_FILE, LATENT_FILE, BETA_FILE, DIC_FILE, SUMMARY_FILE, "marginals.json", PARAM_TRACE_FILE]
        .iter()
        .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap_or_default()))
        .collect()
}

#[test]
fn identical_seeds_give_identical_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("input");
    let sim = |args: &[&str]| gcgm::cli::run(args.iter().map(|s| s.to_string()));
    let scenario = dir.path().join("scenario.json");
    let cfg = serde_json::json!({
        "k": 4, "p": 4, "n_k": 80, "variant": "intercepts+prox+ls", "alpha": [-0.3],
        "beta": [0.5, 0.5], "n_covariates": 1, "missing_rate": 0.05, "seed": 8
    });
    std::fs::write(&scenario, cfg.to_string()).unwrap();
    let code = sim(&["gcgm", "simulate", "--scenario", scenario.to_str().unwrap(), "--out", input.to_str().unwrap()]);
    assert_eq!(code, 0);
    let fit = |name: &str| {
        let out = dir.path().join(name);
        let code = sim(&[
            "gcgm",
            "fit",
            "--data",
            input.join("survey.csv").to_str().unwrap(),
            "--schema",
            input.join("schema.json").to_str().unwrap(),
            "--proximity",
            input.join("proximity.csv").to_str().unwrap(),
            "--variant",
            "full",
            "--iters",
            "400",
            "--burnin",
            "100",
            "--seed",
            "9",
            "--deviance-draws",
            "10",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        out
    };
    let (a, b) = (fit("a"), fit("b"));
    let (ba, bb) = (bundle_bytes(&a), bundle_bytes(&b));
    let nonempty = ba.values().all(|v| !v.is_empty());
    let differing: Vec<&String> = ba.keys().filter(|k| ba[*k] != bb[*k]).collect();
    report(
        8,
        nonempty && differing.is_empty(),
        format!("{} bundle files compared, differing {differing:?}", ba.len()),
    );
}
