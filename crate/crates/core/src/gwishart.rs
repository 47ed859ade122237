//! G-Wishart sampling and the local quantities used by birth-death moves.
//!
//! `W_G(b, D)` has density proportional to
//! `|K|^{(b−2)/2} exp(−tr(DK)/2)` on positive-definite `K` with zeros at the
//! non-edges of `G`. Draws are exact: a full Wishart sample is converted to
//! the G-constrained one by iterative covariance completion.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::copula_latent::LatentMatrix;
use crate::error::{Error, Result};
use crate::graph::Graph;

pub const DEFAULT_DF: f64 = 3.0;
pub const DEFAULT_MAX_SWEEPS: usize = 200;
const COMPLETION_TOL: f64 = 1e-12;
const JITTER: f64 = 1e-10;
const JITTER_RETRIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GWishartParams {
    pub b: f64,
    pub d: DMatrix<f64>,
}

impl GWishartParams {
    pub fn new(b: f64, d: DMatrix<f64>) -> Result<Self> {
        if !(b > 2.0) {
            return Err(Error::Invalid(format!("G-Wishart degrees of freedom must exceed 2, got {b}")));
        }
        if d.nrows() != d.ncols() || d.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite("G-Wishart scale".into()));
        }
        Ok(GWishartParams { b, d })
    }

    /// `W_G(3, I_p)`.
    pub fn default_prior(p: usize) -> Self {
        GWishartParams {
            b: DEFAULT_DF,
            d: DMatrix::identity(p, p),
        }
    }

    pub fn p(&self) -> usize {
        self.d.nrows()
    }
}

/// Conjugate update `(b + n, D + ZᵀZ)`.
pub fn posterior_params(prior: &GWishartParams, z: &LatentMatrix) -> GWishartParams {
    GWishartParams {
        b: prior.b + z.n as f64,
        d: &prior.d + z.cross_product(),
    }
}

/// Unconstrained Wishart draw in the same parameterization (full graph).
pub fn sample_wishart<R: Rng + ?Sized>(params: &GWishartParams, rng: &mut R) -> Result<DMatrix<f64>> {
    let p = params.p();
    let df = params.b + p as f64 - 1.0;
    let scale = params
        .d
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("G-Wishart scale".into()))?;
    let l = scale
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("inverse G-Wishart scale".into()))?
        .l();
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).map_err(|e| Error::Numerical(e.to_string()))?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    Ok(&la * la.transpose())
}

/// Exact draw from `W_G(params)`.
///
/// `max_sweeps` caps the completion iterations; they normally stop earlier
/// once entries change by less than a relative 1e-12.
pub fn sample_gwishart<R: Rng + ?Sized>(
    graph: &Graph,
    params: &GWishartParams,
    rng: &mut R,
    max_sweeps: usize,
) -> Result<DMatrix<f64>> {
    let p = params.p();
    if graph.p() != p {
        return Err(Error::Invalid(format!("graph has {} nodes, scale is {p}×{p}", graph.p())));
    }
    let k_full = sample_wishart(params, rng)?;
    if graph.n_edges() == p * p.saturating_sub(1) / 2 {
        return Ok(symmetrized(k_full));
    }
    let sigma = k_full
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("Wishart draw".into()))?;
    let w = complete_covariance(graph, &sigma, max_sweeps);
    precision_from_completion(graph, &w)
}

/// The covariance `W` that agrees with `sigma` on the diagonal and on the
/// edges of `graph` and whose inverse vanishes on the non-edges.
pub fn complete_covariance(graph: &Graph, sigma: &DMatrix<f64>, max_sweeps: usize) -> DMatrix<f64> {
    let p = sigma.nrows();
    let mut w = sigma.clone();
    let neighbors: Vec<Vec<usize>> = (0..p).map(|j| graph.neighbors(j)).collect();
    let scale = (0..p).map(|j| sigma[(j, j)]).fold(0.0, f64::max);
    for _ in 0..max_sweeps {
        let mut change: f64 = 0.0;
        for j in 0..p {
            let nb = &neighbors[j];
            let mut new_col = vec![0.0; p];
            if !nb.is_empty() {
                let w_nn = DMatrix::from_fn(nb.len(), nb.len(), |a, b| w[(nb[a], nb[b])]);
                let s_nj = nalgebra::DVector::from_fn(nb.len(), |a, _| sigma[(nb[a], j)]);
                let beta = match w_nn.clone().cholesky() {
                    Some(ch) => ch.solve(&s_nj),
                    None => w_nn.lu().solve(&s_nj).unwrap_or_else(|| s_nj.clone()),
                };
                for (l, col) in new_col.iter_mut().enumerate() {
                    if l != j {
                        *col = nb.iter().zip(beta.iter()).map(|(&n, bv)| w[(l, n)] * bv).sum();
                    }
                }
            }
            for l in 0..p {
                if l == j {
                    continue;
                }
                change = change.max((w[(l, j)] - new_col[l]).abs());
                w[(l, j)] = new_col[l];
                w[(j, l)] = new_col[l];
            }
        }
        if change <= COMPLETION_TOL * scale {
            break;
        }
    }
    w
}

fn precision_from_completion(graph: &Graph, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = w.nrows();
    let mut k = w
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("completed covariance".into()))?;
    for i in 0..p {
        for j in 0..p {
            if i != j && !graph.has_edge(i, j) {
                k[(i, j)] = 0.0;
            }
        }
    }
    let mut k = symmetrized(k);
    for attempt in 0..=JITTER_RETRIES {
        if k.clone().cholesky().is_some() {
            return Ok(k);
        }
        if attempt < JITTER_RETRIES {
            for i in 0..p {
                k[(i, i)] += JITTER;
            }
        }
    }
    Err(Error::NotPositiveDefinite(format!(
        "G-Wishart draw after {JITTER_RETRIES} jitter retries"
    )))
}

fn symmetrized(k: DMatrix<f64>) -> DMatrix<f64> {
    (&k + k.transpose()) * 0.5
}

/// Projection of a covariance-scale estimate onto `P_G`: the precision whose
/// inverse matches `sigma` on the diagonal and on the edges of `graph`.
pub fn project_to_graph(graph: &Graph, sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let w = complete_covariance(graph, sigma, 10_000);
    precision_from_completion(graph, &w)
}

/// `ln I_G(b, I) − ln I_{G−e}(b, I)` for adding an edge whose endpoints
/// share `common` neighbours. Exact whenever both graphs are decomposable
/// and the edge lies in at most one clique, in particular for p ≤ 3.
pub fn log_normalizer_ratio(b: f64, common: usize) -> f64 {
    let d = common as f64;
    (2.0 * std::f64::consts::PI.sqrt()).ln() + ln_gamma((b + d + 1.0) / 2.0) - ln_gamma((b + d) / 2.0)
}

/// Conditional posterior of the `(i, j)` entry given every other free
/// entry, after integrating out the `j`-th Schur complement.
#[derive(Debug, Clone, Copy)]
pub struct EdgeConditional {
    pub i: usize,
    pub j: usize,
    /// Precision of `K_ij` in its conditional normal.
    pub a: f64,
    /// Linear coefficient: the conditional mean is `−m / a`.
    pub m: f64,
}

impl EdgeConditional {
    /// `ln ∫ exp(−(a x² + 2 m x)/2) dx`, the data part of the edge log-odds.
    pub fn log_integral(&self) -> f64 {
        0.5 * (2.0 * std::f64::consts::PI / self.a).ln() + self.m * self.m / (2.0 * self.a)
    }
}

/// Local quantities for edge `(i, j)` at precision `k` (with inverse
/// `sigma`) under posterior scale `d_star`. The larger index plays the
/// role of the eliminated node.
pub fn edge_conditional(
    k: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    d_star: &DMatrix<f64>,
    i: usize,
    j: usize,
) -> EdgeConditional {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    let p = k.nrows();
    // Row i of (K_{−j,−j})⁻¹ = Σ_{−j,−j} − Σ_{−j,j} Σ_{j,−j} / Σ_jj.
    let m_row = |l: usize| sigma[(i, l)] - sigma[(i, j)] * sigma[(l, j)] / sigma[(j, j)];
    let a = d_star[(j, j)] * m_row(i);
    let mut lin = 0.0;
    for l in 0..p {
        if l != i && l != j {
            lin += m_row(l) * k[(l, j)];
        }
    }
    EdgeConditional {
        i,
        j,
        a,
        m: d_star[(j, j)] * lin + d_star[(i, j)],
    }
}

/// Redraws `K_ij` (or sets it to zero) and the `j`-th diagonal from their
/// conditional posterior under the graph in which the edge is `present`.
pub fn redraw_edge_block<R: Rng + ?Sized>(
    k: &mut DMatrix<f64>,
    d_star: &DMatrix<f64>,
    b_star: f64,
    i: usize,
    j: usize,
    present: bool,
    rng: &mut R,
) -> Result<()> {
    let (i, j) = if i < j { (i, j) } else { (j, i) };
    let sigma = k
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("precision before edge redraw".into()))?;
    let cond = edge_conditional(k, &sigma, d_star, i, j);
    let kij = if present {
        let z: f64 = StandardNormal.sample(rng);
        -cond.m / cond.a + z / cond.a.sqrt()
    } else {
        0.0
    };
    k[(i, j)] = kij;
    k[(j, i)] = kij;

    let p = k.nrows();
    let rest: Vec<usize> = (0..p).filter(|&l| l != j).collect();
    let minv = |x: usize, y: usize| sigma[(x, y)] - sigma[(x, j)] * sigma[(y, j)] / sigma[(j, j)];
    let mut quad = 0.0;
    for &x in &rest {
        for &y in &rest {
            quad += k[(x, j)] * minv(x, y) * k[(y, j)];
        }
    }
    let gamma = Gamma::new(b_star / 2.0, 2.0 / d_star[(j, j)])
        .map_err(|e| Error::Numerical(e.to_string()))?;
    let c: f64 = gamma.sample(rng);
    k[(j, j)] = c + quad;
    Ok(())
}

fn ln_multivariate_gamma(q: usize, x: f64) -> f64 {
    let qf = q as f64;
    qf * (qf - 1.0) / 4.0 * std::f64::consts::PI.ln()
        + (0..q).map(|i| ln_gamma(x - i as f64 / 2.0)).sum::<f64>()
}

/// `ln I` of a complete block with scale `d` (any size, empty gives 0).
fn ln_normalizer_complete(b: f64, d: &DMatrix<f64>) -> f64 {
    let q = d.nrows();
    if q == 0 {
        return 0.0;
    }
    let nu = b + q as f64 - 1.0;
    let logdet = d.clone().cholesky().map(|c| 2.0 * c.l().diagonal().map(f64::ln).sum()).unwrap_or(f64::NAN);
    nu * q as f64 / 2.0 * std::f64::consts::LN_2 + ln_multivariate_gamma(q, nu / 2.0) - nu / 2.0 * logdet
}

/// `ln I_G(b, D)` for a decomposable graph, via a perfect elimination order.
pub fn ln_normalizer_decomposable(graph: &Graph, b: f64, d: &DMatrix<f64>) -> Result<f64> {
    let p = graph.p();
    // Maximum cardinality search.
    let mut numbered = vec![false; p];
    let mut weight = vec![0usize; p];
    let mut total = 0.0;
    for _ in 0..p {
        let v = (0..p)
            .filter(|&v| !numbered[v])
            .max_by_key(|&v| (weight[v], std::cmp::Reverse(v)))
            .expect("unnumbered vertex");
        let earlier: Vec<usize> = (0..p).filter(|&u| numbered[u] && graph.has_edge(u, v)).collect();
        for (x, &u) in earlier.iter().enumerate() {
            for &w in &earlier[x + 1..] {
                if !graph.has_edge(u, w) {
                    return Err(Error::Invalid("graph is not decomposable".into()));
                }
            }
        }
        let mut family = earlier.clone();
        family.push(v);
        let sub = |idx: &[usize]| DMatrix::from_fn(idx.len(), idx.len(), |a, c| d[(idx[a], idx[c])]);
        total += ln_normalizer_complete(b, &sub(&family)) - ln_normalizer_complete(b, &sub(&earlier));
        numbered[v] = true;
        for u in 0..p {
            if !numbered[u] && graph.has_edge(u, v) {
                weight[u] += 1;
            }
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{edge_slots, n_slots};
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn posterior_update_arithmetic() {
        let prior = GWishartParams::default_prior(2);
        let z0 = LatentMatrix { n: 0, p: 2, data: vec![] };
        assert_eq!(posterior_params(&prior, &z0), prior);
        let z1 = LatentMatrix { n: 1, p: 2, data: vec![0.0, 0.0] };
        let post = posterior_params(&prior, &z1);
        assert_eq!(post.b, 4.0);
        assert_eq!(post.d, DMatrix::identity(2, 2));
    }

    #[test]
    fn posterior_scale_tracks_sample_covariance() {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..200).map(|_| StandardNormal.sample(&mut rng)).collect();
        let z = LatentMatrix { n: 100, p: 2, data };
        let post = posterior_params(&GWishartParams::default_prior(2), &z);
        // I + ZᵀZ with ZᵀZ ≈ 100·I.
        assert!((post.d[(0, 0)] - 101.0).abs() < 30.0);
        assert!((post.d[(1, 1)] - 101.0).abs() < 30.0);
        assert!(post.d[(0, 1)].abs() < 30.0);
    }

    #[test]
    fn one_dimensional_draws_are_gamma() {
        // p = 1: density ∝ ω^{1/2} e^{−ω/2}, mean b = 3, variance 2b = 6.
        let params = GWishartParams::default_prior(1);
        let g = Graph::empty(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| sample_gwishart(&g, &params, &mut rng, 10).unwrap()[(0, 0)])
            .collect();
        let m = crate::stats::mean(&xs);
        assert!((m - 3.0).abs() < 0.05, "{m}");
    }

    #[test]
    fn empty_graph_gives_diagonal() {
        let params = GWishartParams::default_prior(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = sample_gwishart(&Graph::empty(3), &params, &mut rng, 50).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(k[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn zero_pattern_and_spd_over_many_draws() {
        let p = 10;
        let edges: Vec<(usize, usize)> = (0..p).map(|i| (i, (i + 1) % p)).chain([(0, 5), (2, 7)]).collect();
        let g = Graph::from_edges(p, &edges);
        let params = GWishartParams::new(3.0, DMatrix::identity(p, p)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..2_000 {
            let k = sample_gwishart(&g, &params, &mut rng, DEFAULT_MAX_SWEEPS).unwrap();
            assert!(k.clone().cholesky().is_some());
            for i in 0..p {
                for j in 0..p {
                    if i != j && !g.has_edge(i, j) {
                        assert_eq!(k[(i, j)], 0.0);
                    }
                    assert!((k[(i, j)] - k[(j, i)]).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn decomposable_clique_covariance_moments() {
        // For a decomposable G, each clique block of K⁻¹ is inverse Wishart
        // with mean D_C / (b − 2).
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]);
        let b = 20.0;
        let params = GWishartParams::new(b, DMatrix::identity(3, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let mut sums = DMatrix::<f64>::zeros(3, 3);
        let mut sq = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..n {
            let s = sample_gwishart(&g, &params, &mut rng, 200).unwrap().try_inverse().unwrap();
            sums += &s;
            sq += s.component_mul(&s);
        }
        for &(x, y) in &[(0, 0), (1, 1), (2, 2), (0, 1), (1, 2)] {
            let mean = sums[(x, y)] / n as f64;
            let se = ((sq[(x, y)] / n as f64 - mean * mean) / n as f64).sqrt();
            let expected = if x == y { 1.0 / (b - 2.0) } else { 0.0 };
            assert!((mean - expected).abs() < 3.0 * se + 1e-12, "({x},{y}) {mean} vs {expected} ± {se}");
        }
    }

    #[test]
    fn normalizer_ratio_matches_decomposable_constants() {
        let b = 3.0;
        let d = DMatrix::identity(3, 3);
        let cases = [
            (Graph::empty(3), Graph::from_edges(3, &[(0, 1)])),
            (Graph::from_edges(3, &[(0, 2)]), Graph::from_edges(3, &[(0, 2), (0, 1)])),
            (Graph::from_edges(3, &[(0, 2), (1, 2)]), Graph::complete(3)),
        ];
        for (without, with) in cases {
            let exact = ln_normalizer_decomposable(&with, b, &d).unwrap()
                - ln_normalizer_decomposable(&without, b, &d).unwrap();
            let approx = log_normalizer_ratio(b, with.common_neighbors(0, 1));
            assert!((exact - approx).abs() < 1e-12, "{exact} vs {approx}");
        }
    }

    #[test]
    fn non_decomposable_graph_is_rejected() {
        let cycle = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        assert!(ln_normalizer_decomposable(&cycle, 3.0, &DMatrix::identity(4, 4)).is_err());
    }

    #[test]
    fn projection_keeps_zero_pattern() {
        let g = Graph::from_edges(3, &[(0, 1), (1, 2)]);
        let sigma = DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.4, 0.5, 1.0, 0.5, 0.4, 0.5, 1.0]);
        let k = project_to_graph(&g, &sigma).unwrap();
        assert_eq!(k[(0, 2)], 0.0);
        let back = k.try_inverse().unwrap();
        assert!((back[(0, 1)] - 0.5).abs() < 1e-9);
        assert!((back[(0, 0)] - 1.0).abs() < 1e-9);
        // Markov completion: Σ_02 = Σ_01 Σ_12 / Σ_11.
        assert!((back[(0, 2)] - 0.25).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn draws_are_spd_with_the_graph_zero_pattern(p in 2usize..7, bits in any::<u32>(), seed in any::<u64>()) {
            let on: Vec<bool> = (0..n_slots(p)).map(|s| bits >> s & 1 == 1).collect();
            let graph = Graph::from_slots(p, &on);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = sample_gwishart(&graph, &GWishartParams::default_prior(p), &mut rng, DEFAULT_MAX_SWEEPS).unwrap();
            prop_assert!(k.clone().cholesky().is_some());
            for (i, j) in edge_slots(p) {
                prop_assert_eq!(k[(i, j)], k[(j, i)]);
                if !graph.has_edge(i, j) {
                    prop_assert!(k[(i, j)].abs() < 1e-8 * (1.0 + k[(i, i)].abs()), "{}", k[(i, j)]);
                }
            }
        }
    }
}
