//! Finite-h scarring diagnostics: quasi-eigenvalue tables, separation,
//! energy-window census, quasimode overlaps and mass on a torus window.

use nalgebra::{DMatrix, DVector, SVD};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gevrey::ApproximationFunction;
use crate::kam::{iterate, IterateOptions, NormalFormState, Schedule};
use crate::oracle::{build_operator, eigenpairs, ModelOperator, SymbolSpec};
use crate::quantize::oscillator_frequencies;
use crate::series::{FourierTaylorSeries, PhaseGeometry, Truncation};

/// Quasi-eigenvalue map `K⁰(I; ε)` on action space.
pub trait K0Evaluator: Sync {
    fn dim(&self) -> usize;
    fn k0(&self, action: &[f64], epsilon: f64) -> Result<f64>;
}

/// Closure-backed evaluator.
pub struct FnK0<F: Fn(&[f64], f64) -> f64 + Sync> {
    pub d: usize,
    pub f: F,
}

impl<F: Fn(&[f64], f64) -> f64 + Sync> K0Evaluator for FnK0<F> {
    fn dim(&self) -> usize {
        self.d
    }

    fn k0(&self, action: &[f64], epsilon: f64) -> Result<f64> {
        Ok((self.f)(action, epsilon))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiEntry {
    pub m: Vec<i64>,
    pub action: Vec<f64>,
    pub mu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasiEigenvalueTable {
    pub entries: Vec<QuasiEntry>,
    pub h: f64,
    pub epsilon: f64,
    pub maslov: Vec<u32>,
}

/// All `m ∈ ℤ^d` with `h(m + ϑ/4)` inside the box `[lo, hi]`.
pub fn index_set_in_box(lo: &[f64], hi: &[f64], h: f64, maslov: &[u32]) -> Result<Vec<Vec<i64>>> {
    let d = lo.len();
    if hi.len() != d || maslov.len() != d {
        return Err(Error::GeometryMismatch("box and Maslov data must share the dimension".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidInput("h must be positive".into()));
    }
    let ranges: Vec<(i64, i64)> = (0..d)
        .map(|j| {
            let s = maslov[j] as f64 / 4.0;
            ((lo[j] / h - s).ceil() as i64, (hi[j] / h - s).floor() as i64)
        })
        .collect();
    if ranges.iter().any(|(a, b)| a > b) {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    let mut cur: Vec<i64> = ranges.iter().map(|r| r.0).collect();
    loop {
        out.push(cur.clone());
        let mut j = d;
        loop {
            if j == 0 {
                return Ok(out);
            }
            j -= 1;
            if cur[j] < ranges[j].1 {
                cur[j] += 1;
                for (c, r) in cur[j + 1..].iter_mut().zip(&ranges[j + 1..]) {
                    *c = r.0;
                }
                break;
            }
        }
    }
}

fn action_of(m: &[i64], h: f64, maslov: &[u32]) -> Vec<f64> {
    m.iter().zip(maslov).map(|(&mj, &t)| h * (mj as f64 + t as f64 / 4.0)).collect()
}

impl QuasiEigenvalueTable {
    /// Tabulates `μ_m = K⁰(I_m)` for the indices whose action lies in `[lo, hi]`.
    pub fn build(k0: &dyn K0Evaluator, ms: &[Vec<i64>], h: f64, epsilon: f64, maslov: &[u32], lo: &[f64], hi: &[f64]) -> Result<Self> {
        let d = k0.dim();
        if maslov.len() != d || lo.len() != d || hi.len() != d {
            return Err(Error::GeometryMismatch("table data must match the evaluator dimension".into()));
        }
        let mut entries = Vec::new();
        for m in ms {
            if m.len() != d {
                return Err(Error::GeometryMismatch("index dimension mismatch".into()));
            }
            let action = action_of(m, h, maslov);
            if action.iter().zip(lo.iter().zip(hi)).any(|(a, (l, u))| a < l || a > u) {
                continue;
            }
            let mu = k0.k0(&action, epsilon)?;
            entries.push(QuasiEntry { m: m.clone(), action, mu });
        }
        Ok(QuasiEigenvalueTable { entries, h, epsilon, maslov: maslov.to_vec() })
    }

    /// Largest `|μ_m − K⁰(I_m)|` when recomputed from the actions.
    pub fn recompute_defect(&self, k0: &dyn K0Evaluator) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for e in &self.entries {
            worst = worst.max((k0.k0(&e.action, self.epsilon)? - e.mu).abs());
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffeoReport {
    pub min_singular: f64,
    pub argmin: Vec<f64>,
    pub g1: f64,
    pub g2: f64,
    pub singular: bool,
}

/// `∂_ε^j K⁰` by central differences with step `s`.
fn eps_derivative(k0: &dyn K0Evaluator, i: &[f64], eps: f64, j: usize, s: f64) -> Result<f64> {
    let f = |e: f64| k0.k0(i, e);
    Ok(match j {
        0 => f(eps)?,
        1 => (f(eps + s)? - f(eps - s)?) / (2.0 * s),
        2 => (f(eps + s)? - 2.0 * f(eps)? + f(eps - s)?) / (s * s),
        3 => (f(eps + 2.0 * s)? - 2.0 * f(eps + s)? + 2.0 * f(eps - s)? - f(eps - 2.0 * s)?) / (2.0 * s * s * s),
        _ => return Err(Error::InvalidInput("ε-derivatives above third order are not supported".into())),
    })
}

/// `η(I) = (K⁰, ∂_εK⁰, …, ∂_ε^{d−1}K⁰)`.
pub fn eta(k0: &dyn K0Evaluator, i: &[f64], eps: f64, eps_step: f64) -> Result<Vec<f64>> {
    (0..k0.dim()).map(|j| eps_derivative(k0, i, eps, j, eps_step)).collect()
}

/// Minimum Jacobian singular value of `η` over a tensor grid in `[lo, hi]`
/// and bi-Lipschitz constants from `pairs` random pairs.
#[allow(clippy::too_many_arguments)]
pub fn local_diffeo_check(
    k0: &dyn K0Evaluator,
    lo: &[f64],
    hi: &[f64],
    eps: f64,
    grid_n: usize,
    pairs: usize,
    seed: u64,
    eps_step: f64,
) -> Result<DiffeoReport> {
    let d = k0.dim();
    if d == 0 || lo.len() != d || hi.len() != d || grid_n < 2 {
        return Err(Error::InvalidInput("diffeomorphism check needs d ≥ 1, a matching box and grid_n ≥ 2".into()));
    }
    let di = 1e-5 * hi.iter().zip(lo).map(|(a, b)| (a - b).abs()).fold(1e-3, f64::max);
    let mut min_singular = f64::INFINITY;
    let mut argmin = lo.to_vec();
    let total = grid_n.pow(d as u32);
    for mut idx in 0..total {
        let mut p = vec![0.0; d];
        for j in (0..d).rev() {
            p[j] = lo[j] + (hi[j] - lo[j]) * (idx % grid_n) as f64 / (grid_n - 1) as f64;
            idx /= grid_n;
        }
        let mut jac = DMatrix::zeros(d, d);
        for c in 0..d {
            let mut a = p.clone();
            let mut b = p.clone();
            a[c] += di;
            b[c] -= di;
            let ea = eta(k0, &a, eps, eps_step)?;
            let eb = eta(k0, &b, eps, eps_step)?;
            for r in 0..d {
                jac[(r, c)] = (ea[r] - eb[r]) / (2.0 * di);
            }
        }
        let sv = SVD::new(jac, false, false).singular_values.min();
        if sv < min_singular {
            min_singular = sv;
            argmin = p;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut g1, mut g2) = (f64::INFINITY, 0.0f64);
    for _ in 0..pairs {
        let a: Vec<f64> = (0..d).map(|j| rng.gen_range(lo[j]..=hi[j])).collect();
        let b: Vec<f64> = (0..d).map(|j| rng.gen_range(lo[j]..=hi[j])).collect();
        let di = dist(&a, &b);
        let de = dist(&eta(k0, &a, eps, eps_step)?, &eta(k0, &b, eps, eps_step)?);
        if di == 0.0 || de == 0.0 {
            continue;
        }
        g1 = g1.min(di / de);
        g2 = g2.max(di / de);
    }
    Ok(DiffeoReport { min_singular, argmin, g1, g2, singular: !(min_singular > 1e-10) })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub a: Vec<i64>,
    pub b: Vec<i64>,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// `hΔ⁻¹(C₁h^{−1/2})`.
    pub radius: f64,
    pub pairs_checked: usize,
    /// `min |μ_m − μ_{m′}| / h^{3/2}` over the checked pairs.
    pub c2_measured: f64,
    pub violations: Vec<Violation>,
}

/// Checks `|μ_m − μ_{m′}| ≥ C₂h^{3/2}` for pairs with `|I_m − I_{m′}| ≤ hΔ⁻¹(C₁h^{−1/2})`.
/// Without `c2_required` a pair violates only when the levels coincide.
pub fn separation_check(
    table: &QuasiEigenvalueTable,
    c1: f64,
    delta: &ApproximationFunction,
    c2_required: Option<f64>,
) -> Result<SeparationReport> {
    let h = table.h;
    let radius = h * delta.inverse(c1 * h.powf(-0.5))?;
    let scale = h.powf(1.5);
    let mut pairs_checked = 0;
    let mut min_gap = f64::INFINITY;
    let mut violations = Vec::new();
    let es = &table.entries;
    for i in 0..es.len() {
        for j in i + 1..es.len() {
            if dist(&es[i].action, &es[j].action) > radius * (1.0 + 1e-12) {
                continue;
            }
            pairs_checked += 1;
            let gap = (es[i].mu - es[j].mu).abs();
            min_gap = min_gap.min(gap);
            let floor = match c2_required {
                Some(c2) => c2 * scale,
                None => 1e-13 * (1.0 + es[i].mu.abs()),
            };
            if gap < floor || gap == 0.0 {
                violations.push(Violation { a: es[i].m.clone(), b: es[j].m.clone(), gap });
            }
        }
    }
    Ok(SeparationReport { radius, pairs_checked, c2_measured: min_gap / scale, violations })
}

/// `C₁γh^{−1/2} / (Δ⁻¹(C₁h^{−1/2}))²` along a sequence of `h`.
pub fn aj_hypothesis_ratios(delta: &ApproximationFunction, c1: f64, gamma: f64, hs: &[f64]) -> Result<Vec<(f64, f64)>> {
    hs.iter()
        .map(|&h| {
            let t = c1 * h.powf(-0.5);
            Ok((h, gamma * t / delta.inverse(t)?.powi(2)))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyWindow {
    pub m: Vec<i64>,
    pub center: f64,
    pub halfwidth: f64,
    pub delta_exp: f64,
}

impl EnergyWindow {
    pub fn contains(&self, e: f64) -> bool {
        (e - self.center).abs() <= self.halfwidth
    }
}

/// Default window exponent `7/4 + 2d + 0.1`.
pub fn default_delta_exp(d: usize) -> f64 {
    1.75 + 2.0 * d as f64 + 0.1
}

/// Windows `[μ_m ± h^δ/3]`, checked pairwise disjoint.
pub fn energy_windows(table: &QuasiEigenvalueTable, delta_exp: f64) -> Result<Vec<EnergyWindow>> {
    if !(delta_exp > 1.75) {
        return Err(Error::InvalidInput(format!("window exponent must exceed 7/4, got {delta_exp}")));
    }
    let halfwidth = table.h.powf(delta_exp) / 3.0;
    let ws: Vec<EnergyWindow> = table.entries.iter().map(|e| EnergyWindow { m: e.m.clone(), center: e.mu, halfwidth, delta_exp }).collect();
    let mut order: Vec<usize> = (0..ws.len()).collect();
    order.sort_by(|&a, &b| ws[a].center.total_cmp(&ws[b].center));
    for w in order.windows(2) {
        if ws[w[1]].center - ws[w[0]].center <= 2.0 * halfwidth {
            return Err(Error::WindowsOverlap { a: ws[w[0]].m.clone(), b: ws[w[1]].m.clone() });
        }
    }
    Ok(ws)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub counts: Vec<usize>,
    /// Indices into the table of `m ∈ 𝓜̃_h(λ)`.
    pub mtilde: Vec<usize>,
    pub fraction: f64,
    pub lambda: f64,
    pub r: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Counts eigenvalues per window and forms `𝓜̃_h(λ) = {m : 𝒩_m < λR}`.
pub fn window_census(table: &QuasiEigenvalueTable, delta_exp: f64, eigs: &[f64], lambda: f64, r: f64) -> Result<Census> {
    if !(lambda > 1.0) || !(r > 0.0) {
        return Err(Error::InvalidInput("census needs λ > 1 and R > 0".into()));
    }
    let ws = energy_windows(table, delta_exp)?;
    let mut sorted = eigs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let counts: Vec<usize> = ws
        .iter()
        .map(|w| sorted.partition_point(|&e| e <= w.center + w.halfwidth) - sorted.partition_point(|&e| e < w.center - w.halfwidth))
        .collect();
    let mtilde: Vec<usize> = (0..counts.len()).filter(|&i| (counts[i] as f64) < lambda * r).collect();
    let fraction = if counts.is_empty() { 1.0 } else { mtilde.len() as f64 / counts.len() as f64 };
    let bound = 1.0 - 2.0 / lambda;
    Ok(Census { counts, mtilde, fraction, lambda, r, bound, holds: fraction >= bound })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TorusMass {
    pub mass: f64,
    pub empty_window: bool,
}

/// Torus modes of the operator basis in index order.
pub fn torus_modes(op: &ModelOperator) -> Vec<Vec<i64>> {
    let side = 2 * op.nt + 1;
    (0..side.pow(op.d as u32))
        .map(|mut idx| {
            let mut n = vec![0i64; op.d];
            for j in (0..op.d).rev() {
                n[j] = (idx % side) as i64 - op.nt as i64;
                idx /= side;
            }
            n
        })
        .collect()
}

/// `Σ |c|²` over basis states whose torus mode satisfies `window`.
pub fn mass_on_torus(vec: &DVector<Complex64>, op: &ModelOperator, window: &dyn Fn(&[i64]) -> bool) -> Result<TorusMass> {
    if vec.len() != op.dim() {
        return Err(Error::GeometryMismatch("vector length does not match the operator basis".into()));
    }
    let nz = op.nh.pow(op.d0 as u32);
    let mut mass = 0.0;
    let mut any = false;
    for (t, n) in torus_modes(op).iter().enumerate() {
        if window(n) {
            any = true;
            mass += (0..nz).map(|z| vec[t * nz + z].norm_sqr()).sum::<f64>();
        }
    }
    Ok(TorusMass { mass, empty_window: !any })
}

/// Predicate `|h n_j − I_j| ≤ width` for all `j`.
pub fn action_window(center: Vec<f64>, h: f64, width: f64) -> impl Fn(&[i64]) -> bool {
    move |n: &[i64]| n.iter().zip(&center).all(|(&nj, &c)| (h * nj as f64 - c).abs() <= width * (1.0 + 1e-12))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossingReport {
    pub eps_points: usize,
    pub pairs: usize,
    /// Largest fraction of ε-grid points inside `𝓒_{m,m′}(h)` over pairs.
    pub max_fraction: f64,
    pub mean_fraction: f64,
    /// `h^{δ−7/4} / Δ⁻¹(C₁h^{−1/2})`.
    pub scale: f64,
}

/// ε-sweep for near crossings `|μ_m(ε) − μ_{m′}(ε)| < h^δ` among pairs within
/// the separation radius.
pub fn crossing_sweep(
    k0: &dyn K0Evaluator,
    ms: &[Vec<i64>],
    h: f64,
    maslov: &[u32],
    delta_exp: f64,
    c1: f64,
    delta: &ApproximationFunction,
    eps_grid: &[f64],
) -> Result<CrossingReport> {
    let tinv = delta.inverse(c1 * h.powf(-0.5))?;
    let radius = h * tinv;
    let acts: Vec<Vec<f64>> = ms.iter().map(|m| action_of(m, h, maslov)).collect();
    let pairs: Vec<(usize, usize)> = (0..ms.len())
        .flat_map(|i| (i + 1..ms.len()).map(move |j| (i, j)))
        .filter(|&(i, j)| dist(&acts[i], &acts[j]) <= radius * (1.0 + 1e-12))
        .collect();
    let thr = h.powf(delta_exp);
    let mut hits = vec![0usize; pairs.len()];
    for &eps in eps_grid {
        let mus: Vec<f64> = acts.iter().map(|a| k0.k0(a, eps)).collect::<Result<_>>()?;
        for (c, &(i, j)) in hits.iter_mut().zip(&pairs) {
            if (mus[i] - mus[j]).abs() < thr {
                *c += 1;
            }
        }
    }
    let n = eps_grid.len().max(1) as f64;
    let fr: Vec<f64> = hits.iter().map(|&c| c as f64 / n).collect();
    Ok(CrossingReport {
        eps_points: eps_grid.len(),
        pairs: pairs.len(),
        max_fraction: fr.iter().copied().fold(0.0, f64::max),
        mean_fraction: if fr.is_empty() { 0.0 } else { fr.iter().sum::<f64>() / fr.len() as f64 },
        scale: h.powf(delta_exp - 1.75) / tinv,
    })
}

/// `N(ε;h)`: number of `m` with another level closer than `h^δ`.
pub fn near_degenerate_count(mus: &[f64], h: f64, delta_exp: f64) -> usize {
    let thr = h.powf(delta_exp);
    let mut s = mus.to_vec();
    s.sort_by(f64::total_cmp);
    (0..s.len()).filter(|&i| (i > 0 && s[i] - s[i - 1] < thr) || (i + 1 < s.len() && s[i + 1] - s[i] < thr)).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroProxy {
    pub samples: usize,
    /// Fraction of sampled ε for which some tested `h` has `N(ε;h) = 0`.
    pub fraction: f64,
}

/// Finite proxy for the full-measure set of ε with vanishing `N(ε;h)`.
#[allow(clippy::too_many_arguments)]
pub fn zero_count_proxy(
    k0: &dyn K0Evaluator,
    lo: &[f64],
    hi: &[f64],
    maslov: &[u32],
    hs: &[f64],
    eps_range: (f64, f64),
    samples: usize,
    delta_exp: f64,
    seed: u64,
) -> Result<ZeroProxy> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sets: Vec<Vec<Vec<f64>>> = hs
        .iter()
        .map(|&h| Ok(index_set_in_box(lo, hi, h, maslov)?.iter().map(|m| action_of(m, h, maslov)).collect()))
        .collect::<Result<_>>()?;
    let mut good = 0;
    for _ in 0..samples {
        let eps = rng.gen_range(eps_range.0..=eps_range.1);
        for (h, acts) in hs.iter().zip(&sets) {
            let mus: Vec<f64> = acts.iter().map(|a| k0.k0(a, eps)).collect::<Result<_>>()?;
            if near_degenerate_count(&mus, *h, delta_exp) == 0 {
                good += 1;
                break;
            }
        }
    }
    Ok(ZeroProxy { samples, fraction: if samples == 0 { 0.0 } else { good as f64 / samples as f64 } })
}

/// Twisted rotor `ωy + ½βy²` coupled to one oscillator `(ε/2)(λu² + λ̃v²)`
/// and perturbed by `ε cos x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskModel {
    pub omega: f64,
    pub beta: f64,
    pub lambda: f64,
    pub lambda_tilde: f64,
    pub epsilon: f64,
    pub h: f64,
    /// Energy band `[a, b]`.
    pub band: (f64, f64),
    pub nt: usize,
    pub nh: usize,
}

impl DeskModel {
    pub fn e0(&self, i: f64) -> f64 {
        self.omega * i + 0.5 * self.beta * i * i
    }

    pub fn frequency(&self, i: f64) -> f64 {
        self.omega + self.beta * i
    }

    /// Action on the increasing branch with `E₀(I) = e`.
    pub fn action_of_energy(&self, e: f64) -> Result<f64> {
        if self.beta == 0.0 {
            return Ok(e / self.omega);
        }
        let disc = self.omega * self.omega + 2.0 * self.beta * e;
        if disc < 0.0 {
            return Err(Error::InvalidInput(format!("energy {e} is below the twist minimum")));
        }
        Ok((-self.omega + disc.sqrt()) / self.beta)
    }

    /// Action interval `E₀⁻¹([a, b])`.
    pub fn action_band(&self) -> Result<(f64, f64)> {
        Ok((self.action_of_energy(self.band.0)?, self.action_of_energy(self.band.1)?))
    }

    pub fn symbol(&self) -> SymbolSpec {
        let mut s = SymbolSpec::new(1, 1);
        s.add(self.omega, 0, &[0], &[1], &[0], &[0])
            .add(0.5 * self.beta, 0, &[0], &[2], &[0], &[0])
            .add(0.5 * self.lambda, 1, &[0], &[0], &[2], &[0])
            .add(0.5 * self.lambda_tilde, 1, &[0], &[0], &[0], &[2])
            .add_cos(1.0, 1, &[1], &[0], &[0], &[0]);
        s
    }

    /// Rotor part alone (`d₀ = 0`).
    pub fn torus_symbol(&self) -> SymbolSpec {
        let mut s = SymbolSpec::new(1, 0);
        s.add(self.omega, 0, &[0], &[1], &[], &[]).add(0.5 * self.beta, 0, &[0], &[2], &[], &[]).add_cos(1.0, 1, &[1], &[0], &[], &[]);
        s
    }

    /// Oscillator frequency `√(λλ̃)`.
    pub fn nu(&self) -> f64 {
        (self.lambda * self.lambda_tilde).sqrt()
    }

    /// Second-order averaged normal form `E₀ + εhν/2 + ε²β/(4ω(I)²)` with the
    /// oscillator in its ground level.
    pub fn k0_second_order(&self, i: f64, eps: f64) -> f64 {
        let w = self.frequency(i);
        self.e0(i) + 0.5 * eps * self.h * self.nu() + eps * eps * self.beta / (4.0 * w * w)
    }

    /// Normal-form problem centred at the action `i` (`y = i + y′`).
    pub fn local_state(&self, i: f64, eps: f64, ctx: Truncation) -> Result<NormalFormState> {
        let geom = PhaseGeometry::new(1, 1)?;
        let rint = FourierTaylorSeries::zero_in(geom, ctx).with_term(&[0], &[2], &[0, 0], Complex64::new(0.5 * self.beta, 0.0))?;
        let q = FourierTaylorSeries::cosine(geom, ctx.kmax, ctx.degmax, &[1], eps)?;
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![self.lambda, self.lambda_tilde]));
        NormalFormState::new(geom, ctx, eps, eps, self.e0(i), vec![self.frequency(i)], m, rint, q)
    }
}

/// `K⁰` from a KAM iteration at each action, with the oscillator in its
/// ground level.
#[derive(Clone, Debug)]
pub struct DeskKam {
    pub model: DeskModel,
    pub ctx: Truncation,
    pub opts: IterateOptions,
}

impl DeskKam {
    pub fn new(model: DeskModel) -> Result<Self> {
        Ok(DeskKam {
            model,
            ctx: Truncation { kmax: 6, degmax: 3 },
            opts: IterateOptions {
                schedule: Schedule { k: 2, rho: 1.0, sigma: 1.0, alpha: 2.0 },
                gamma: 0.01,
                delta: ApproximationFunction::power_log(2.0, 2.0, 1.0)?,
                pmax: 3,
                target: 1e-16,
                lie_order: 8,
            },
        })
    }
}

impl K0Evaluator for DeskKam {
    fn dim(&self) -> usize {
        1
    }

    fn k0(&self, action: &[f64], epsilon: f64) -> Result<f64> {
        let st = self.model.local_state(action[0], epsilon, self.ctx)?;
        let out = iterate(&st, &self.opts)?;
        let m = out.state.m_p();
        let nus = oscillator_frequencies(&m.view((0, 0), (1, 1)).into_owned(), &m.view((1, 1), (1, 1)).into_owned())?;
        Ok(out.state.eps_p() + 0.5 * epsilon * self.model.h * nus.iter().sum::<f64>())
    }
}

/// Second-order averaged `K⁰` of the desk model.
pub struct DeskSecondOrder(pub DeskModel);

impl K0Evaluator for DeskSecondOrder {
    fn dim(&self) -> usize {
        1
    }

    fn k0(&self, action: &[f64], epsilon: f64) -> Result<f64> {
        Ok(self.0.k0_second_order(action[0], epsilon))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeylCheck {
    pub count: usize,
    pub predicted: f64,
    pub phase_volume: f64,
    pub relative_error: f64,
}

/// `meas{(x, y) : E₀(y) + ε cos x ∈ [a, b]}` by periodic trapezoid in `x`.
pub fn rotor_phase_volume(model: &DeskModel, nx: usize) -> Result<f64> {
    let mut acc = 0.0;
    for j in 0..nx {
        let c = model.epsilon * (2.0 * std::f64::consts::PI * j as f64 / nx as f64).cos();
        acc += model.action_of_energy(model.band.1 - c)? - model.action_of_energy(model.band.0 - c)?;
    }
    Ok(2.0 * std::f64::consts::PI * acc / nx as f64)
}

/// Rotor eigenvalue count in the band against `(2πh)^{-1}` times the phase volume.
pub fn weyl_check(model: &DeskModel, dim_cap: usize) -> Result<WeylCheck> {
    let op = build_operator(&model.torus_symbol(), model.h, model.epsilon, model.nt, 1, dim_cap)?;
    let (eigs, _) = eigenpairs(&op, dim_cap)?;
    let count = eigs.iter().filter(|&&e| e >= model.band.0 && e <= model.band.1).count();
    let phase_volume = rotor_phase_volume(model, 512)?;
    let predicted = phase_volume / (2.0 * std::f64::consts::PI * model.h);
    Ok(WeylCheck { count, predicted, phase_volume, relative_error: (count as f64 - predicted).abs() / predicted })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScarOptions {
    pub lambda: f64,
    pub delta_exp: f64,
    pub c1: f64,
    pub delta: ApproximationFunction,
    /// Torus window half-width in action units.
    pub torus_window: f64,
    /// `R` override; measured from the phase volume when absent.
    pub r: Option<f64>,
    pub dim_cap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub m: Vec<i64>,
    pub mu: f64,
    pub window_count: usize,
    pub eigen_index: Option<usize>,
    pub eigenvalue: Option<f64>,
    /// `|⟨u_k, v_m⟩|` for the quasimode `e^{imx} ⊗ |0⟩`.
    pub overlap: f64,
    pub mass: f64,
    pub passes: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScarReport {
    pub h: f64,
    pub epsilon: f64,
    pub delta_exp: f64,
    pub halfwidth: f64,
    pub r: f64,
    pub action_band: (f64, f64),
    pub table: QuasiEigenvalueTable,
    pub table_defect_vs_second_order: f64,
    pub weyl: WeylCheck,
    pub separation: SeparationReport,
    pub census: Census,
    pub matches: Vec<MatchRecord>,
    pub mass_threshold: f64,
    pub matched: usize,
    pub matched_passing: usize,
    pub empty: bool,
}

impl ScarReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.matched == 0 {
            0.0
        } else {
            self.matched_passing as f64 / self.matched as f64
        }
    }
}

/// Full diagnostic run on the desk model.
pub fn scar_run(k0: &dyn K0Evaluator, model: &DeskModel, opts: &ScarOptions) -> Result<ScarReport> {
    let (ia, ib) = model.action_band()?;
    let reach = ib.abs().max(ia.abs()) + opts.torus_window + 2.0 * model.h;
    if reach > model.h * model.nt as f64 {
        return Err(Error::Coverage(format!("action band with window reaches {reach:.4} beyond h·N_t = {:.4}", model.h * model.nt as f64)));
    }
    let maslov = [0u32];
    let ms = index_set_in_box(&[ia], &[ib], model.h, &maslov)?;
    let table = QuasiEigenvalueTable::build(k0, &ms, model.h, model.epsilon, &maslov, &[ia], &[ib])?;
    let table_defect_vs_second_order = table.recompute_defect(&DeskSecondOrder(model.clone()))?;
    let weyl = weyl_check(model, opts.dim_cap)?;
    let r = match opts.r {
        Some(r) => r,
        None => weyl.phase_volume / (2.0 * std::f64::consts::PI * (ib - ia)),
    };
    let separation = separation_check(&table, opts.c1, &opts.delta, None)?;
    let op = build_operator(&model.symbol(), model.h, model.epsilon, model.nt, model.nh, opts.dim_cap)?;
    let (eigs, vecs) = eigenpairs(&op, opts.dim_cap)?;
    let census = window_census(&table, opts.delta_exp, &eigs, opts.lambda, r)?;
    let halfwidth = model.h.powf(opts.delta_exp) / 3.0;
    let mass_threshold = (1.0 / (2.0 * opts.lambda)).powi(2) / (r * r);
    let mut matches = Vec::new();
    for &ti in &census.mtilde {
        let e = &table.entries[ti];
        let lo = eigs.partition_point(|&v| v < e.mu - halfwidth);
        let hi = eigs.partition_point(|&v| v <= e.mu + halfwidth);
        let q = op.index(&e.m, &[0]);
        let best = (lo..hi).max_by(|&a, &b| vecs[(q, a)].norm().total_cmp(&vecs[(q, b)].norm()));
        let (eigen_index, eigenvalue, overlap, mass) = match best {
            Some(k) => {
                let col = vecs.column(k).into_owned();
                let tm = mass_on_torus(&col, &op, &action_window(e.action.clone(), model.h, opts.torus_window))?;
                (Some(k), Some(eigs[k]), vecs[(q, k)].norm(), tm.mass)
            }
            None => (None, None, 0.0, 0.0),
        };
        matches.push(MatchRecord {
            m: e.m.clone(),
            mu: e.mu,
            window_count: census.counts[ti],
            eigen_index,
            eigenvalue,
            overlap,
            mass,
            passes: eigen_index.is_some() && mass >= mass_threshold,
        });
    }
    let matched = matches.iter().filter(|m| m.eigen_index.is_some()).count();
    let matched_passing = matches.iter().filter(|m| m.passes).count();
    Ok(ScarReport {
        h: model.h,
        epsilon: model.epsilon,
        delta_exp: opts.delta_exp,
        halfwidth,
        r,
        action_band: (ia, ib),
        empty: table.entries.is_empty(),
        table,
        table_defect_vs_second_order,
        weyl,
        separation,
        census,
        matches,
        mass_threshold,
        matched,
        matched_passing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::DEFAULT_DIM_CAP;
    use proptest::prelude::*;

    fn desk(h: f64, eps: f64) -> DeskModel {
        DeskModel { omega: 1.0, beta: 0.3, lambda: 1.0, lambda_tilde: 1.0, epsilon: eps, h, band: (-0.3, 0.3), nt: 30, nh: 3 }
    }

    fn table_of(mus: &[(i64, f64)], h: f64) -> QuasiEigenvalueTable {
        QuasiEigenvalueTable {
            entries: mus.iter().map(|&(m, mu)| QuasiEntry { m: vec![m], action: vec![h * m as f64], mu }).collect(),
            h,
            epsilon: 0.0,
            maslov: vec![0],
        }
    }

    #[test]
    fn index_set_counts_lattice_points() {
        let ms = index_set_in_box(&[-0.1, 0.0], &[0.1, 0.05], 0.02, &[0, 2]).unwrap();
        // first axis m ∈ [-5, 5], second h(m + 1/2) ∈ [0, 0.05] → m ∈ {0, 1, 2}
        assert_eq!(ms.len(), 11 * 3);
        assert!(index_set_in_box(&[0.305], &[0.31], 0.02, &[0]).unwrap().is_empty());
    }

    #[test]
    fn single_entry_separation_is_vacuous() {
        let t = table_of(&[(0, 1.0)], 0.02);
        let rep = separation_check(&t, 1.0, &ApproximationFunction::power_log(2.0, 2.0, 1.0).unwrap(), None).unwrap();
        assert_eq!(rep.pairs_checked, 0);
        assert!(rep.violations.is_empty());
    }

    #[test]
    fn duplicated_levels_are_violations() {
        let t = table_of(&[(0, 1.0), (1, 1.0), (2, 1.5)], 0.02);
        let rep = separation_check(&t, 1.0, &ApproximationFunction::power_log(2.0, 2.0, 1.0).unwrap(), None).unwrap();
        assert_eq!(rep.violations.len(), 1);
        assert_eq!((rep.violations[0].a[0], rep.violations[0].b[0]), (0, 1));
        assert!(matches!(energy_windows(&t, 3.0), Err(Error::WindowsOverlap { .. })));
    }

    #[test]
    fn linear_k0_separation_matches_diophantine_floor() {
        let w = [1.0, (5f64.sqrt() - 1.0) / 2.0];
        let k0 = FnK0 { d: 2, f: move |i: &[f64], _e: f64| w[0] * i[0] + w[1] * i[1] };
        let h = 0.01;
        let ms = index_set_in_box(&[-0.1, -0.1], &[0.1, 0.1], h, &[0, 0]).unwrap();
        let t = QuasiEigenvalueTable::build(&k0, &ms, h, 0.0, &[0, 0], &[-0.1, -0.1], &[0.1, 0.1]).unwrap();
        let delta = ApproximationFunction::power_log(2.0, 2.0, 1.0).unwrap();
        let rep = separation_check(&t, 1.0, &delta, None).unwrap();
        assert!(rep.pairs_checked > 0 && rep.violations.is_empty());
        // every checked gap equals h|⟨ω, m−m′⟩| ≥ h γ/|k|² with γ = 1/√5 · (1 − tiny) for the golden vector
        for a in &t.entries {
            for b in &t.entries {
                let k: Vec<i64> = a.m.iter().zip(&b.m).map(|(x, y)| x - y).collect();
                if k == [0, 0] || dist(&a.action, &b.action) > rep.radius {
                    continue;
                }
                let direct = h * (w[0] * k[0] as f64 + w[1] * k[1] as f64).abs();
                assert!(((a.mu - b.mu).abs() - direct).abs() < 1e-14);
                let kn = k[0].abs().max(k[1].abs()) as f64;
                assert!(direct >= h * 0.38 / (kn * kn) - 1e-15);
            }
        }
        assert!(rep.c2_measured > 0.0);
    }

    #[test]
    fn census_on_separated_spectrum() {
        let h = 0.1;
        let t = table_of(&[(0, 0.0), (1, 1.0), (2, 2.0)], h);
        let eigs = [0.0, 1e-9, 1.0, 2.5];
        let c = window_census(&t, 2.0, &eigs, 4.0, 1.0).unwrap();
        // h^2/3 ≈ 3.3e-3
        assert_eq!(c.counts, vec![2, 1, 0]);
        assert_eq!(c.mtilde.len(), 3);
        let tight = window_census(&t, 2.0, &eigs, 1.5, 1.0).unwrap();
        assert_eq!(tight.mtilde, vec![1, 2]);
        assert!((tight.bound - (1.0 - 2.0 / 1.5)).abs() < 1e-15);
        assert!(window_census(&t, 1.7, &eigs, 4.0, 1.0).is_err());
    }

    #[test]
    fn pure_states_and_partition_mass() {
        let m = desk(0.1, 0.0);
        let op = build_operator(&m.symbol(), m.h, 0.0, 4, 2, DEFAULT_DIM_CAP).unwrap();
        let mut v = DVector::zeros(op.dim());
        v[op.index(&[2], &[1])] = Complex64::new(1.0, 0.0);
        assert_eq!(mass_on_torus(&v, &op, &action_window(vec![0.2], 0.1, 0.05)).unwrap().mass, 1.0);
        assert_eq!(mass_on_torus(&v, &op, &action_window(vec![-0.2], 0.1, 0.05)).unwrap().mass, 0.0);
        let empty = mass_on_torus(&v, &op, &action_window(vec![0.25], 0.1, 0.01)).unwrap();
        assert!(empty.empty_window && empty.mass == 0.0);
        let w = DVector::from_fn(op.dim(), |i, _| Complex64::new((i as f64 + 1.0).sin(), (i as f64).cos()));
        let w = &w / Complex64::new(w.norm(), 0.0);
        let total: f64 = (-4..=4).map(|c| mass_on_torus(&w, &op, &move |n: &[i64]| n[0] == c).unwrap().mass).sum();
        assert!((total - 1.0).abs() < 1e-14);
    }

    #[test]
    fn unperturbed_eigenstates_sit_on_their_mode() {
        let m = desk(0.1, 0.0);
        let op = build_operator(&m.symbol(), m.h, 0.0, 5, 2, DEFAULT_DIM_CAP).unwrap();
        let (eigs, vecs) = eigenpairs(&op, DEFAULT_DIM_CAP).unwrap();
        for k in 0..eigs.len() {
            let col = vecs.column(k).into_owned();
            let (t, _) = (0..op.dim()).map(|i| (i, col[i].norm())).max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            let n = torus_modes(&op)[t / op.nh][0];
            let mass = mass_on_torus(&col, &op, &move |x: &[i64]| x[0] == n).unwrap().mass;
            assert!((mass - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_test_diffeo() {
        // d = 1: η = K⁰ = I + εI², ∂K⁰/∂I = 1 + 2εI
        let k0 = FnK0 { d: 1, f: |i: &[f64], e: f64| i[0] + e * i[0] * i[0] };
        let rep = local_diffeo_check(&k0, &[1.0], &[2.0], 0.1, 11, 10_000, 3, 1e-4).unwrap();
        assert!((rep.min_singular - 1.2).abs() < 1e-6);
        assert!(!rep.singular);
        // |ΔI|/|Δη| = 1/(1 + ε(I₁+I₂)) lies in [1/1.4, 1/1.2]
        assert!(rep.g1 >= 1.0 / 1.4 - 1e-9 && rep.g2 <= 1.0 / 1.2 + 1e-9 && rep.g1 <= rep.g2);
        // d = 2: η = (K⁰, ∂_εK⁰) with K⁰ = I₁ + I₂ + ε(I₁² − I₂²); Jacobian [[1+2εI₁, 1−2εI₂], [2I₁, −2I₂]]
        let k2 = FnK0 { d: 2, f: |i: &[f64], e: f64| i[0] + i[1] + e * (i[0] * i[0] - i[1] * i[1]) };
        let rep2 = local_diffeo_check(&k2, &[1.0, 1.0], &[2.0, 2.0], 0.1, 6, 2000, 5, 1e-3).unwrap();
        let oracle = (0..6)
            .flat_map(|a| (0..6).map(move |b| (1.0 + a as f64 / 5.0, 1.0 + b as f64 / 5.0)))
            .map(|(x, y)| {
                let j = DMatrix::from_row_slice(2, 2, &[1.0 + 0.2 * x, 1.0 - 0.2 * y, 2.0 * x, -2.0 * y]);
                SVD::new(j, false, false).singular_values.min()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(oracle > 0.0);
        assert!((rep2.min_singular - oracle).abs() < 1e-5 * (1.0 + oracle));
    }

    #[test]
    fn singular_jacobian_is_flagged_with_location() {
        let k0 = FnK0 { d: 1, f: |i: &[f64], _e: f64| (i[0] - 0.5).powi(2) };
        let rep = local_diffeo_check(&k0, &[0.0], &[1.0], 0.0, 11, 10, 1, 1e-4).unwrap();
        assert!(rep.singular);
        assert!((rep.argmin[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kam_quasi_eigenvalue_matches_second_order_formula() {
        let m = desk(0.02, 1e-3);
        let kam = DeskKam::new(m.clone()).unwrap();
        for &i in &[-0.2, 0.0, 0.24] {
            let a = kam.k0(&[i], m.epsilon).unwrap();
            let b = m.k0_second_order(i, m.epsilon);
            // fourth-order terms are O(ε⁴)
            assert!((a - b).abs() < 1e-11, "I = {i}: {a} vs {b}");
        }
    }

    #[test]
    fn quasi_eigenvalues_match_rotor_eigenvalues() {
        let m = desk(0.02, 1e-3);
        let op = build_operator(&m.symbol(), m.h, m.epsilon, m.nt, m.nh, DEFAULT_DIM_CAP).unwrap();
        let (eigs, _) = eigenpairs(&op, DEFAULT_DIM_CAP).unwrap();
        for mm in -10..=10 {
            let mu = m.k0_second_order(m.h * mm as f64, m.epsilon);
            let near = eigs.iter().map(|e| (e - mu).abs()).fold(f64::INFINITY, f64::min);
            assert!(near < m.h.powf(default_delta_exp(1)) / 3.0, "m = {mm}: {near}");
        }
    }

    #[test]
    fn weyl_law_on_rotor() {
        let w = weyl_check(&desk(0.02, 1e-3), DEFAULT_DIM_CAP).unwrap();
        assert!(w.relative_error < 0.15, "{w:?}");
    }

    #[test]
    fn crossing_and_zero_proxy_on_twist_map() {
        let m = desk(0.02, 1e-3);
        let k0 = DeskSecondOrder(m.clone());
        let delta = ApproximationFunction::power_log(2.0, 2.0, 1.0).unwrap();
        let ms = index_set_in_box(&[-0.2], &[0.2], m.h, &[0]).unwrap();
        let grid: Vec<f64> = (0..50).map(|i| 1e-3 * i as f64 / 49.0).collect();
        let cr = crossing_sweep(&k0, &ms, m.h, &[0], default_delta_exp(1), 1.0, &delta, &grid).unwrap();
        assert!(cr.pairs > 0);
        assert_eq!(cr.max_fraction, 0.0);
        let zp = zero_count_proxy(&k0, &[-0.2], &[0.2], &[0], &[0.04, 0.02], (0.0, 1e-3), 50, default_delta_exp(1), 9).unwrap();
        assert_eq!(zp.fraction, 1.0);
        assert_eq!(near_degenerate_count(&[0.0, 1e-12, 1.0], 0.1, 2.0), 2);
    }

    #[test]
    fn aj_ratio_trends() {
        let hs = [1e-2, 1e-4, 1e-6, 1e-8];
        // Δ(t) = (1+t)³: ratio ~ T^{1/3} grows
        let cubic = aj_hypothesis_ratios(&ApproximationFunction::power_log(2.0, 3.0, 0.0).unwrap(), 1.0, 0.1, &hs).unwrap();
        assert!(cubic.windows(2).all(|w| w[1].1 > w[0].1));
        // exp(t^0.4): Δ⁻¹(T)² = (log T)^5, the ratio dips before growing
        let sub = ApproximationFunction::subgevrey_exp(2.0, 0.4).unwrap();
        let early = aj_hypothesis_ratios(&sub, 1.0, 0.1, &[1e-2, 1e-4]).unwrap();
        assert!(early[1].1 < early[0].1);
        let late = aj_hypothesis_ratios(&sub, 1.0, 0.1, &[1e-40, 1e-60, 1e-80]).unwrap();
        assert!(late.windows(2).all(|w| w[1].1 > w[0].1));
        // Δ(t) = (1+t)^1.5 gives Δ⁻¹(T)² ~ T^{4/3} and the ratio decays
        let slow = aj_hypothesis_ratios(&ApproximationFunction::power_log(2.0, 1.5, 0.0).unwrap(), 1.0, 0.1, &hs).unwrap();
        assert!(slow.windows(2).all(|w| w[1].1 < w[0].1));
    }

    #[test]
    fn desk_scar_run() {
        let m = desk(0.02, 1e-3);
        let opts = ScarOptions {
            lambda: 4.0,
            delta_exp: default_delta_exp(1),
            c1: 1.0,
            delta: ApproximationFunction::power_log(2.0, 2.0, 1.0).unwrap(),
            torus_window: 2.0 * m.h,
            r: None,
            dim_cap: DEFAULT_DIM_CAP,
        };
        let rep = scar_run(&DeskSecondOrder(m.clone()), &m, &opts).unwrap();
        assert!(rep.separation.violations.is_empty());
        assert!(rep.census.holds);
        assert!(rep.matched > 0 && rep.matched == rep.table.entries.len());
        assert!(rep.pass_fraction() >= 0.8);
        assert!((rep.r - 1.0).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn census_fraction_monotone_in_lambda(mus in proptest::collection::vec(0.0f64..10.0, 1..20), eigs in proptest::collection::vec(0.0f64..10.0, 0..60), l1 in 1.01f64..10.0, dl in 0.0f64..10.0) {
            let mut s = mus.clone();
            s.sort_by(f64::total_cmp);
            s.dedup_by(|a, b| (*a - *b).abs() < 1e-2);
            let t = table_of(&s.iter().enumerate().map(|(i, &m)| (i as i64, m)).collect::<Vec<_>>(), 0.1);
            let a = window_census(&t, 2.0, &eigs, l1, 1.0).unwrap();
            let b = window_census(&t, 2.0, &eigs, l1 + dl, 1.0).unwrap();
            prop_assert!(b.fraction >= a.fraction);
            let inf = window_census(&t, 2.0, &eigs, 1e9, 1.0).unwrap();
            prop_assert_eq!(inf.fraction, 1.0);
        }
    }
}
