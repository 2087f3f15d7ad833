//! Measure estimates for resonance zones and the excluded frequency set.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gevrey::ApproximationFunction;
use crate::kam::{divisor_matrices, mode_box};

pub const MIN_SAMPLES: usize = 10_000;

/// Determinant conditions attached to a zone.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixCondition {
    pub m: DMatrix<f64>,
    pub gamma: f64,
    pub delta: ApproximationFunction,
}

/// `𝒯_k(β) = {ω ∈ [0,1]^l : |⟨ω,k⟩| ≤ β, |det A₁| ≤ θ₁, |det A₂| ≤ θ₂}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoneSpec {
    pub k: Vec<i32>,
    pub beta: f64,
    pub matrix: Option<MatrixCondition>,
}

impl ZoneSpec {
    pub fn strip(k: &[i32], beta: f64) -> Result<Self> {
        let z = ZoneSpec { k: k.to_vec(), beta, matrix: None };
        z.validate()?;
        Ok(z)
    }

    fn validate(&self) -> Result<()> {
        if self.k.iter().all(|&v| v == 0) {
            return Err(Error::InvalidInput("zone mode must be nonzero".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidInput("zone width must be non-negative".into()));
        }
        Ok(())
    }

    pub fn contains(&self, omega: &[f64]) -> bool {
        let kw: f64 = self.k.iter().zip(omega).map(|(&a, b)| a as f64 * b).sum();
        if kw.abs() > self.beta {
            return false;
        }
        match &self.matrix {
            None => true,
            Some(mc) => {
                let d0 = mc.m.nrows() / 2;
                let knorm: u32 = self.k.iter().map(|v| v.unsigned_abs()).sum();
                let base = mc.gamma / mc.delta.eval(knorm as f64);
                let (a1, a2) = divisor_matrices(kw, &mc.m);
                a1.determinant().norm() <= base.powi(2 * d0 as i32) && a2.determinant().norm() <= base.powi(4 * (d0 * d0) as i32)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub estimate: f64,
    pub ci95: f64,
    pub samples: usize,
}

fn binomial(hits: usize, n: usize) -> McEstimate {
    let p = hits as f64 / n as f64;
    McEstimate { estimate: p, ci95: 1.96 * (p * (1.0 - p) / n as f64).sqrt(), samples: n }
}

fn check_samples(samples: usize) -> Result<()> {
    if samples < MIN_SAMPLES {
        return Err(Error::InvalidInput(format!("at least {MIN_SAMPLES} samples are required")));
    }
    Ok(())
}

/// Uniform Monte-Carlo measure of a zone in `[0,1]^l`.
pub fn zone_measure_mc(spec: &ZoneSpec, samples: usize, seed: u64) -> Result<McEstimate> {
    spec.validate()?;
    check_samples(samples)?;
    let l = spec.k.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![0.0; l];
    let mut hits = 0;
    for _ in 0..samples {
        for x in w.iter_mut() {
            *x = rng.gen::<f64>();
        }
        if spec.contains(&w) {
            hits += 1;
        }
    }
    Ok(binomial(hits, samples))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcludedSetEstimate {
    pub mc: McEstimate,
    /// `Σ_{0<|k|_∞≤K} 2γ₁ / (Δ(|k|₁) |k|_∞)`, a bound on the union via
    /// `|{|⟨ω,k⟩| ≤ β} ∩ [0,1]^l| ≤ 2β/|k|_∞`.
    pub majorant: f64,
    /// `γ₁ Σ_{m ≤ K} m^{d−1}/Δ(m)`.
    pub shell_majorant: f64,
    pub modes: usize,
}

/// Measure of `⋃_{0<|k|_∞≤K} 𝒯_k(γ₁/Δ(|k|₁))` in `[0,1]^l`.
#[allow(clippy::too_many_arguments)]
pub fn excluded_set_measure(
    gamma1: f64,
    delta: &ApproximationFunction,
    kmax: u32,
    l: usize,
    d: usize,
    samples: usize,
    seed: u64,
    matrix: Option<&MatrixCondition>,
) -> Result<ExcludedSetEstimate> {
    check_samples(samples)?;
    if !(gamma1 >= 0.0) || kmax == 0 || l == 0 {
        return Err(Error::InvalidInput("need γ₁ ≥ 0, K ≥ 1 and l ≥ 1".into()));
    }
    let modes = mode_box(l, kmax);
    let zones: Vec<ZoneSpec> = modes
        .iter()
        .map(|k| {
            let m: u32 = k.iter().map(|v| v.unsigned_abs()).sum();
            ZoneSpec { k: k.clone(), beta: gamma1 / delta.eval(m as f64), matrix: matrix.cloned() }
        })
        .collect();
    let majorant: f64 = zones
        .iter()
        .map(|z| {
            let sup = z.k.iter().map(|v| v.unsigned_abs()).max().unwrap() as f64;
            2.0 * z.beta / sup
        })
        .sum();
    let shell_majorant = gamma1 * (1..=kmax).map(|m| (m as f64).powi(d as i32 - 1) / delta.eval(m as f64)).sum::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![0.0; l];
    let mut hits = 0;
    for _ in 0..samples {
        for x in w.iter_mut() {
            *x = rng.gen::<f64>();
        }
        if zones.iter().any(|z| z.contains(&w)) {
            hits += 1;
        }
    }
    Ok(ExcludedSetEstimate { mc: binomial(hits, samples), majorant, shell_majorant, modes: modes.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summability {
    pub converges: bool,
    pub partial: f64,
    pub tail_bound: f64,
    pub last_m: u64,
}

const MAX_TERMS: u64 = 50_000_000;

/// `∫_{t0}^∞ g(t) dt` per decade in `ln t`; `None` when the decade pieces
/// stop shrinking geometrically.
pub fn decade_tail_integral<G: Fn(f64) -> f64>(t0: f64, g: G, rel_tol: f64) -> Option<f64> {
    let nodes = 256;
    let step = std::f64::consts::LN_10;
    let mut s0 = t0.ln();
    let mut total = 0.0;
    let mut prev = f64::NAN;
    for _ in 0..300 {
        let hstep = step / nodes as f64;
        let mut piece = 0.0;
        for i in 0..=nodes {
            let s = s0 + i as f64 * hstep;
            let w = if i == 0 || i == nodes {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            piece += w * g(s.exp()) * s.exp();
        }
        piece *= hstep / 3.0;
        if !piece.is_finite() {
            return None;
        }
        total += piece;
        if prev.is_finite() && prev > 0.0 {
            let r = piece / prev;
            if r < 0.9 && piece * r / (1.0 - r) <= rel_tol * total {
                return Some(total + piece * r / (1.0 - r));
            }
        }
        if piece == 0.0 {
            return Some(total);
        }
        prev = piece;
        s0 += step;
        if s0 > 690.0 {
            break;
        }
    }
    None
}

/// Sums `Σ_{m≥1} m^{d−1}/Δ(m)` until the term drops below `tol · partial`
/// and bounds the tail by the integral of the (eventually decreasing)
/// summand.
pub fn summability_check(delta: &ApproximationFunction, d: usize, tol: f64) -> Result<Summability> {
    if d == 0 || !(tol > 0.0) {
        return Err(Error::InvalidInput("need d ≥ 1 and tol > 0".into()));
    }
    let a = |t: f64| t.powi(d as i32 - 1) / delta.eval(t);
    let mut partial = 0.0;
    let mut m = 1u64;
    loop {
        let term = a(m as f64);
        partial += term;
        if term < tol * partial || m >= MAX_TERMS {
            break;
        }
        m += 1;
    }
    let decreasing = a(m as f64 + 1.0) <= a(m as f64);
    let tail = if decreasing { decade_tail_integral(m as f64, a, 1e-6) } else { None };
    Ok(match tail {
        Some(t) if m < MAX_TERMS => Summability { converges: true, partial, tail_bound: t, last_m: m },
        _ => Summability { converges: false, partial, tail_bound: f64::INFINITY, last_m: m },
    })
}

pub fn results_csv(rows: &[(String, f64, McEstimate, Option<f64>, Option<f64>)]) -> String {
    let mut s = String::from("k,beta,estimate,ci95,exact_if_known,majorant\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.17e}")).unwrap_or_default();
    for (k, beta, mc, exact, maj) in rows {
        s.push_str(&format!("{k},{beta:.17e},{:.17e},{:.17e},{},{}\n", mc.estimate, mc.ci95, opt(*exact), opt(*maj)));
    }
    s
}
