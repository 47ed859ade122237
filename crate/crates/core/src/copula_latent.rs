//! Truncated-normal Gibbs updates of the latent Gaussian data.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marginals::CopulaInterval;
use crate::stats::{norm_cdf, norm_isf, norm_pdf, norm_ppf, norm_sf};

/// Standardized bound beyond which the exponential tail sampler takes over.
const TAIL_SWITCH: f64 = 5.0;
const MAX_TRIES: usize = 10_000;

/// Draws from `N(mu, sigma²)` conditioned on `(lo, hi)`.
pub fn truncated_normal_sample<R: Rng + ?Sized>(
    mu: f64,
    sigma: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() || !mu.is_finite() {
        return Err(Error::Invalid(format!("bad normal parameters ({mu}, {sigma})")));
    }
    if !(lo < hi) {
        return Err(Error::Numerical(format!("empty truncation interval ({lo}, {hi})")));
    }
    let a = (lo - mu) / sigma;
    let b = (hi - mu) / sigma;
    if !(a < b) {
        return Err(Error::Numerical(format!(
            "truncation interval ({lo}, {hi}) has zero width relative to sigma {sigma}"
        )));
    }
    for _ in 0..MAX_TRIES {
        let x = standard_truncated(a, b, rng);
        let v = mu + sigma * x;
        if v > lo && v < hi {
            return Ok(v);
        }
    }
    Err(Error::Numerical(format!(
        "could not place a draw strictly inside ({lo}, {hi})"
    )))
}

fn standard_truncated<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a >= TAIL_SWITCH {
        return upper_tail(a, b, rng);
    }
    if b <= -TAIL_SWITCH {
        return -upper_tail(-b, -a, rng);
    }
    let u: f64 = rng.random();
    let x = if a >= 0.0 {
        let (qa, qb) = (norm_sf(a), norm_sf(b));
        if qa - qb < 1e-12 * qa {
            return narrow(a, b, rng);
        }
        norm_isf(qb + u * (qa - qb))
    } else if b <= 0.0 {
        let (pa, pb) = (norm_cdf(a), norm_cdf(b));
        if pb - pa < 1e-12 * pb {
            return narrow(a, b, rng);
        }
        norm_ppf(pa + u * (pb - pa))
    } else {
        let (pa, pb) = (norm_cdf(a), norm_cdf(b));
        norm_ppf(pa + u * (pb - pa))
    };
    x.clamp(a, b)
}

/// Rejection from a uniform proposal; efficient when the interval is short.
fn narrow<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let mode = if a > 0.0 {
        a
    } else if b < 0.0 {
        b
    } else {
        0.0
    };
    let peak = norm_pdf(mode);
    loop {
        let x = a + (b - a) * rng.random::<f64>();
        if rng.random::<f64>() * peak <= norm_pdf(x) {
            return x;
        }
    }
}

/// Draw from the standard normal restricted to `(a, b)` with `a ≥ 5`.
fn upper_tail<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if b - a < 1.0 / a {
        loop {
            let x = a + (b - a) * rng.random::<f64>();
            if x > a && rng.random::<f64>() <= (-0.5 * (x * x - a * a)).exp() {
                return x;
            }
        }
    }
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let x = a + exp.sample(rng);
        if x < b && rng.random::<f64>() <= (-0.5 * (x - rate) * (x - rate)).exp() {
            return x;
        }
    }
}

/// Latent data of one group, n × p row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentMatrix {
    pub n: usize,
    pub p: usize,
    pub data: Vec<f64>,
}

impl LatentMatrix {
    /// Starts every coordinate at the probability-scale midpoint of its interval.
    pub fn initialize(n: usize, p: usize, intervals: &[CopulaInterval]) -> Self {
        assert_eq!(intervals.len(), n * p);
        let data = intervals.iter().map(interval_midpoint).collect();
        LatentMatrix { n, p, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    /// `ZᵀZ`.
    pub fn cross_product(&self) -> DMatrix<f64> {
        let mut s = DMatrix::<f64>::zeros(self.p, self.p);
        for i in 0..self.n {
            let r = self.row(i);
            for a in 0..self.p {
                for b in a..self.p {
                    s[(a, b)] += r[a] * r[b];
                }
            }
        }
        for a in 0..self.p {
            for b in 0..a {
                s[(a, b)] = s[(b, a)];
            }
        }
        s
    }

    /// Debug dump: `GCGMZ001`, n and p as u64 LE, then row-major f64 LE.
    pub fn write_dump(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
        );
        let mut write = |bytes: &[u8]| f.write_all(bytes).map_err(|e| Error::io(path, e));
        write(b"GCGMZ001")?;
        write(&(self.n as u64).to_le_bytes())?;
        write(&(self.p as u64).to_le_bytes())?;
        for v in &self.data {
            write(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

fn interval_midpoint(iv: &CopulaInterval) -> f64 {
    if iv.is_full() {
        return 0.0;
    }
    let z = if iv.lo >= 0.0 {
        let q = 0.5 * (norm_sf(iv.lo) + norm_sf(iv.hi));
        norm_isf(q.clamp(1e-300, 1.0 - 1e-12))
    } else {
        let p = 0.5 * (norm_cdf(iv.lo) + norm_cdf(iv.hi));
        norm_ppf(p.clamp(1e-300, 1.0 - 1e-12))
    };
    if iv.contains(z) && z < iv.hi {
        z
    } else if iv.lo.is_finite() && iv.hi.is_finite() {
        0.5 * (iv.lo + iv.hi)
    } else if iv.lo.is_finite() {
        iv.lo + 1.0
    } else {
        iv.hi - 1.0
    }
}

/// One systematic-scan Gibbs sweep: every `Z_ij` is redrawn from its
/// full conditional under `N(0, Ω⁻¹)`, truncated to its interval.
pub fn gibbs_sweep_latent<R: Rng + ?Sized>(
    z: &mut LatentMatrix,
    omega: &DMatrix<f64>,
    intervals: &[CopulaInterval],
    rng: &mut R,
) -> Result<()> {
    let p = z.p;
    if omega.nrows() != p || omega.ncols() != p || intervals.len() != z.data.len() {
        return Err(Error::Invalid("latent sweep: dimension mismatch".into()));
    }
    if omega.clone().cholesky().is_none() {
        return Err(Error::NotPositiveDefinite("precision in latent sweep".into()));
    }
    let sd: Vec<f64> = (0..p).map(|j| 1.0 / omega[(j, j)].sqrt()).collect();
    let weights: Vec<f64> = (0..p)
        .flat_map(|j| (0..p).map(move |l| (j, l)))
        .map(|(j, l)| if j == l { 0.0 } else { -omega[(j, l)] / omega[(j, j)] })
        .collect();

    for i in 0..z.n {
        let row = &mut z.data[i * p..(i + 1) * p];
        for j in 0..p {
            let w = &weights[j * p..(j + 1) * p];
            let mu: f64 = w.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
            let iv = intervals[i * p + j];
            row[j] = if iv.is_full() {
                {
                    let e: f64 = rand_distr::StandardNormal.sample(rng);
                    mu + sd[j] * e
                }
            } else {
                truncated_normal_sample(mu, sd[j], iv.lo, iv.hi, rng)?
            };
        }
    }
    Ok(())
}
