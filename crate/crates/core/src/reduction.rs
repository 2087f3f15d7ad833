//! Classical resonant reduction: from `H₀(y) + ε P₀(x, y)` near a resonant
//! action `y₀` to `εN₁(0) + ⟨ω₁,y⟩ + (ε₁/2)⟨z,M₁z⟩ + εR₁ + εP₁`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gevrey::ApproximationFunction;
use crate::series::{lie_series_in, FourierTaylorSeries, Monomial, PhaseGeometry, Truncation};

/// Tolerance of the resonance test `⟨τ, ω(y₀)⟩ = 0`.
pub const RESONANCE_TOL: f64 = 1e-10;

fn gcd(a: i128, b: i128) -> i128 {
    let (mut a, mut b) = (a.abs(), b.abs());
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Determinant of a square integer matrix by fraction-free elimination.
pub fn int_det(m: &[Vec<i64>]) -> i128 {
    let n = m.len();
    if n == 0 {
        return 1;
    }
    let mut a: Vec<Vec<i128>> = m.iter().map(|r| r.iter().map(|&v| v as i128).collect()).collect();
    let mut sign = 1i128;
    let mut prev = 1i128;
    for k in 0..n - 1 {
        if a[k][k] == 0 {
            match (k + 1..n).find(|&i| a[i][k] != 0) {
                Some(i) => {
                    a.swap(i, k);
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for i in k + 1..n {
            for j in k + 1..n {
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) / prev;
            }
        }
        prev = a[k][k];
    }
    sign * a[n - 1][n - 1]
}

fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn rec(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, r, cur, out);
            cur.pop();
        }
    }
    rec(0, n, r, &mut cur, &mut out);
    out
}

/// gcd of all maximal minors of the `l × r` matrix whose columns are `cols`;
/// equals 1 exactly when the columns span a direct summand of `ℤ^l`.
pub fn maximal_minor_gcd(cols: &[Vec<i64>]) -> i128 {
    let r = cols.len();
    if r == 0 {
        return 1;
    }
    let l = cols[0].len();
    let mut g = 0i128;
    for rows in combinations(l, r) {
        let sub: Vec<Vec<i64>> = rows.iter().map(|&i| cols.iter().map(|c| c[i]).collect()).collect();
        g = gcd(g, int_det(&sub));
        if g == 1 {
            break;
        }
    }
    g
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResonanceModule {
    pub generators: Vec<Vec<i64>>,
    pub completion: Vec<Vec<i64>>,
    /// Row-major `l × l` matrix `(K_*, K')`: completion columns first.
    pub k0: Vec<Vec<i64>>,
    /// Exact integer inverse of `K₀`.
    pub k0_inv: Vec<Vec<i64>>,
}

impl ResonanceModule {
    pub fn l(&self) -> usize {
        self.k0.len()
    }

    pub fn d0(&self) -> usize {
        self.generators.len()
    }

    pub fn d(&self) -> usize {
        self.l() - self.d0()
    }

    /// `k' = K₀⁻¹ k`: the mode in the angles `θ = K₀ᵀ x`.
    pub fn mode_to_theta(&self, k: &[i32]) -> Vec<i32> {
        self.k0_inv.iter().map(|row| row.iter().zip(k).map(|(&a, &b)| a * b as i64).sum::<i64>() as i32).collect()
    }

    /// `k = K₀ k'`.
    pub fn mode_from_theta(&self, kt: &[i32]) -> Vec<i32> {
        self.k0.iter().map(|row| row.iter().zip(kt).map(|(&a, &b)| a * b as i64).sum::<i64>() as i32).collect()
    }

    pub fn k0_f64(&self) -> DMatrix<f64> {
        let l = self.l();
        DMatrix::from_fn(l, l, |i, j| self.k0[i][j] as f64)
    }
}

fn columns_to_matrix(cols: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let l = cols[0].len();
    (0..l).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
}

fn int_inverse(m: &[Vec<i64>]) -> Result<Vec<Vec<i64>>> {
    let n = m.len();
    let f = DMatrix::from_fn(n, n, |i, j| m[i][j] as f64);
    let inv = f.try_inverse().ok_or_else(|| Error::Singular("K₀ is singular".into()))?;
    let out: Vec<Vec<i64>> = (0..n).map(|i| (0..n).map(|j| inv[(i, j)].round() as i64).collect()).collect();
    for i in 0..n {
        for j in 0..n {
            let s: i64 = (0..n).map(|k| m[i][k] * out[k][j]).sum();
            if s != (i == j) as i64 {
                return Err(Error::Invariant("integer inverse of K₀ failed".into()));
            }
        }
    }
    Ok(out)
}

/// Completion through unimodular row reduction of the generator matrix.
fn completion_by_row_reduction(gens: &[Vec<i64>]) -> Result<Vec<Vec<i64>>> {
    let l = gens[0].len();
    let r = gens.len();
    let mut t: Vec<Vec<i128>> = (0..l).map(|i| gens.iter().map(|g| g[i] as i128).collect()).collect();
    // `uinv` tracks the inverse of the accumulated row operations.
    let mut uinv: Vec<Vec<i128>> = (0..l).map(|i| (0..l).map(|j| (i == j) as i128).collect()).collect();
    for c in 0..r {
        loop {
            let nz: Vec<usize> = (c..l).filter(|&i| t[i][c] != 0).collect();
            if nz.is_empty() {
                return Err(Error::NotSummand { factor: 0 });
            }
            let p = *nz.iter().min_by_key(|&&i| t[i][c].abs()).unwrap();
            if p != c {
                t.swap(p, c);
                for row in uinv.iter_mut() {
                    row.swap(p, c);
                }
            }
            let mut done = true;
            for i in c + 1..l {
                if t[i][c] != 0 {
                    let q = t[i][c] / t[c][c];
                    for j in 0..r {
                        t[i][j] -= q * t[c][j];
                    }
                    // Row op R_i -= q R_c corresponds to column op C_c += q C_i on the inverse.
                    for row in uinv.iter_mut() {
                        row[c] += q * row[i];
                    }
                    if t[i][c] != 0 {
                        done = false;
                    }
                }
            }
            if done {
                break;
            }
        }
        if t[c][c].abs() != 1 {
            return Err(Error::NotSummand { factor: t[c][c].abs() as i64 });
        }
    }
    Ok((r..l).map(|j| (0..l).map(|i| uinv[i][j] as i64).collect()).collect())
}

/// Extends resonance generators to a unimodular basis `K₀ = (K_*, K')`
/// with `det K₀ = 1`.
pub fn unimodular_completion(generators: &[Vec<i64>]) -> Result<ResonanceModule> {
    if generators.is_empty() {
        return Err(Error::InvalidInput("at least one generator is required".into()));
    }
    let l = generators[0].len();
    if generators.iter().any(|g| g.len() != l) {
        return Err(Error::GeometryMismatch("generators differ in length".into()));
    }
    if generators.len() >= l {
        return Err(Error::InvalidInput(format!("{} generators leave no angle in dimension {l}", generators.len())));
    }
    let g = maximal_minor_gcd(generators);
    if g != 1 {
        return Err(Error::NotSummand { factor: g as i64 });
    }
    let d = l - generators.len();
    // Greedy choice of standard basis vectors keeps simple completions simple.
    let mut chosen: Vec<Vec<i64>> = Vec::new();
    for i in 0..l {
        if chosen.len() == d {
            break;
        }
        let mut e = vec![0i64; l];
        e[i] = 1;
        let mut trial: Vec<Vec<i64>> = chosen.clone();
        trial.push(e.clone());
        trial.extend(generators.iter().cloned());
        if maximal_minor_gcd(&trial) == 1 {
            chosen.push(e);
        }
    }
    let mut completion = if chosen.len() == d { chosen } else { completion_by_row_reduction(generators)? };
    let mut cols: Vec<Vec<i64>> = completion.clone();
    cols.extend(generators.iter().cloned());
    let mut k0 = columns_to_matrix(&cols);
    let det = int_det(&k0);
    if det == -1 {
        for v in completion[0].iter_mut() {
            *v = -*v;
        }
        for row in k0.iter_mut() {
            row[0] = -row[0];
        }
    } else if det != 1 {
        return Err(Error::Invariant(format!("completion has determinant {det}")));
    }
    let k0_inv = int_inverse(&k0)?;
    Ok(ResonanceModule { generators: generators.to_vec(), completion, k0, k0_inv })
}

/// Applies the linear symplectic change `y = K₀ Y`, `θ = K₀ᵀ x` to a series
/// on geometry `(l, 0)`.
pub fn transform_linear(f: &FourierTaylorSeries, module: &ResonanceModule, ctx: Truncation) -> Result<FourierTaylorSeries> {
    let l = module.l();
    let geom = f.geometry();
    if geom.d() != l || geom.d0() != 0 {
        return Err(Error::GeometryMismatch(format!("expected geometry ({l}, 0)")));
    }
    let poly_ctx = Truncation { kmax: 0, degmax: ctx.degmax };
    let lin: Vec<FourierTaylorSeries> = (0..l)
        .map(|i| {
            let mut s = FourierTaylorSeries::zero_in(geom, poly_ctx);
            for j in 0..l {
                if module.k0[i][j] != 0 {
                    let mut m = Monomial::constant(geom);
                    m.pow[j] = 1;
                    s.add_term(m, Complex64::new(module.k0[i][j] as f64, 0.0)).unwrap();
                }
            }
            s
        })
        .collect();
    let mut powers: BTreeMap<(usize, u32), FourierTaylorSeries> = BTreeMap::new();
    let one = FourierTaylorSeries::constant(geom, 0, ctx.degmax, 1.0);
    let mut out = FourierTaylorSeries::zero_in(geom, ctx);
    for (m, c) in f.terms() {
        let mut poly = one.clone();
        for (i, &p) in m.pow.iter().enumerate() {
            if p == 0 {
                continue;
            }
            if let std::collections::btree_map::Entry::Vacant(e) = powers.entry((i, p)) {
                let mut acc = one.clone();
                for _ in 0..p {
                    acc = acc.mul_in(&lin[i], poly_ctx)?;
                }
                e.insert(acc);
            }
            poly = poly.mul_in(&powers[&(i, p)], poly_ctx)?;
        }
        let kt = module.mode_to_theta(&m.k);
        for (pm, pc) in poly.terms() {
            let mono = Monomial::new(kt.clone(), pm.pow.clone());
            if mono.k_sup() > ctx.kmax || mono.degree() > ctx.degmax {
                return Err(Error::OutOfBounds(format!("transformed mode {:?} exceeds the context", kt)));
            }
            out.add_term(mono, c * pc)?;
        }
    }
    Ok(out)
}

/// The modes of `P₀` lying in the resonance module, at `y = y₀`, as a
/// function of `φ = K'ᵀ x` (geometry `(d0, 0)`).
pub fn resonant_average(p0: &FourierTaylorSeries, module: &ResonanceModule) -> Result<FourierTaylorSeries> {
    let l = module.l();
    let d = module.d();
    let d0 = module.d0();
    if p0.geometry().d() != l || p0.geometry().d0() != 0 {
        return Err(Error::GeometryMismatch(format!("P₀ must live on geometry ({l}, 0)")));
    }
    let geom = PhaseGeometry::new(d0, 0)?;
    let mut terms: Vec<(Vec<i32>, Complex64)> = Vec::new();
    for (m, c) in p0.terms() {
        if m.degree() != 0 {
            continue;
        }
        let kt = module.mode_to_theta(&m.k);
        if kt[..d].iter().all(|&v| v == 0) {
            terms.push((kt[d..].to_vec(), *c));
        }
    }
    let kmax = terms.iter().map(|(k, _)| k.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)).max().unwrap_or(0);
    let mut out = FourierTaylorSeries::zero(geom, kmax, 0);
    for (k, c) in terms {
        out.add_term(Monomial::new(k, vec![0; d0]), c)?;
    }
    Ok(out)
}

/// Inverse re-indexing of [`resonant_average`]: `φ`-modes `n` become
/// `x`-modes `K' n`.
pub fn embed_resonant(h0: &FourierTaylorSeries, module: &ResonanceModule, kmax: u32) -> Result<FourierTaylorSeries> {
    let l = module.l();
    let d = module.d();
    let geom = PhaseGeometry::new(l, 0)?;
    let mut out = FourierTaylorSeries::zero(geom, kmax, 0);
    for (m, c) in h0.terms() {
        let mut kt = vec![0i32; l];
        kt[d..].copy_from_slice(&m.k);
        out.add_term(Monomial::new(module.mode_from_theta(&kt), vec![0; l]), *c)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub phi: Vec<f64>,
    pub value: f64,
    /// Row-major `d0 × d0` Hessian.
    pub hessian: Vec<Vec<f64>>,
    pub nondegenerate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPointSet {
    pub points: Vec<CriticalPoint>,
    pub dropped_seeds: usize,
    pub degenerate_family: bool,
}

fn angle_only_derivs(h0: &FourierTaylorSeries, phi: &[f64]) -> (f64, Vec<f64>, DMatrix<f64>) {
    let n = phi.len();
    let mut v = 0.0;
    let mut g = vec![0.0; n];
    let mut h = DMatrix::zeros(n, n);
    for (m, c) in h0.terms() {
        let ph: f64 = m.k.iter().zip(phi).map(|(&k, &p)| k as f64 * p).sum();
        let e = c * Complex64::from_polar(1.0, ph);
        v += e.re;
        for i in 0..n {
            let ki = m.k[i] as f64;
            g[i] += (e * Complex64::new(0.0, ki)).re;
            for j in 0..n {
                h[(i, j)] -= ki * m.k[j] as f64 * e.re;
            }
        }
    }
    (v, g, h)
}

fn wrap_angle(a: f64) -> f64 {
    let t = a.rem_euclid(std::f64::consts::TAU);
    if std::f64::consts::TAU - t < 1e-12 {
        0.0
    } else {
        t
    }
}

/// Critical points of an angle-only function on `𝕋^{d0}` by grid seeding
/// and Newton refinement.
pub fn critical_points(h0: &FourierTaylorSeries, d0: usize, grid_per_dim: usize) -> Result<CriticalPointSet> {
    if h0.geometry().d() != d0 || h0.terms().any(|(m, _)| m.degree() != 0) {
        return Err(Error::InvalidInput("h₀ must be an angle-only series on 𝕋^{d0}".into()));
    }
    let scale: f64 = h0.terms().filter(|(m, _)| !m.is_zero_mode()).map(|(m, c)| c.norm() * (m.k_l1() as f64).powi(2)).sum();
    if scale == 0.0 {
        return Ok(CriticalPointSet { points: Vec::new(), dropped_seeds: 0, degenerate_family: true });
    }
    let total = grid_per_dim.pow(d0 as u32);
    let mut points: Vec<CriticalPoint> = Vec::new();
    let mut dropped = 0usize;
    for idx in 0..total {
        let mut rem = idx;
        let mut phi: Vec<f64> = (0..d0)
            .map(|_| {
                let i = rem % grid_per_dim;
                rem /= grid_per_dim;
                std::f64::consts::TAU * i as f64 / grid_per_dim as f64
            })
            .collect();
        let mut converged = false;
        for _ in 0..60 {
            let (_, g, h) = angle_only_derivs(h0, &phi);
            let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if gn <= 1e-13 * scale {
                converged = true;
                break;
            }
            let Some(step) = h.clone().lu().solve(&nalgebra::DVector::from_vec(g.clone())) else { break };
            let sn = step.norm();
            let damp = if sn > 0.5 { 0.5 / sn } else { 1.0 };
            for i in 0..d0 {
                phi[i] -= damp * step[i];
            }
        }
        if !converged {
            dropped += 1;
            continue;
        }
        let phi: Vec<f64> = phi.into_iter().map(wrap_angle).collect();
        let dup = points.iter().any(|p| {
            p.phi.iter().zip(&phi).all(|(a, b)| {
                let dd = (a - b).abs();
                dd.min(std::f64::consts::TAU - dd) < 1e-7
            })
        });
        if dup {
            continue;
        }
        let (v, _, h) = angle_only_derivs(h0, &phi);
        let det = h.determinant();
        points.push(CriticalPoint {
            phi,
            value: v,
            hessian: (0..d0).map(|i| (0..d0).map(|j| h[(i, j)]).collect()).collect(),
            nondegenerate: det.abs() > 1e-10 * scale.powi(d0 as i32),
        });
    }
    points.sort_by(|a, b| a.phi.partial_cmp(&b.phi).unwrap());
    Ok(CriticalPointSet { points, dropped_seeds: dropped, degenerate_family: false })
}

/// Taylor data of `H₀` at `y₀`; `third` is optional (`l × l × l`, symmetric).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorData {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
    #[serde(default)]
    pub third: Vec<Vec<Vec<f64>>>,
}

impl TaylorData {
    fn l(&self) -> usize {
        self.gradient.len()
    }

    fn validate(&self) -> Result<()> {
        let l = self.l();
        if self.hessian.len() != l || self.hessian.iter().any(|r| r.len() != l) {
            return Err(Error::GeometryMismatch("Hessian of H₀ has wrong shape".into()));
        }
        for i in 0..l {
            for j in 0..l {
                if (self.hessian[i][j] - self.hessian[j][i]).abs() > 1e-12 * (1.0 + self.hessian[i][j].abs()) {
                    return Err(Error::InvalidInput("Hessian of H₀ is not symmetric".into()));
                }
            }
        }
        if !self.third.is_empty() && (self.third.len() != l || self.third.iter().any(|a| a.len() != l || a.iter().any(|b| b.len() != l))) {
            return Err(Error::GeometryMismatch("third derivative of H₀ has wrong shape".into()));
        }
        Ok(())
    }

    /// `H₀(y₀ + Δy)` as a polynomial in `Δy` (geometry `(l, 0)`).
    pub fn to_series(&self, ctx: Truncation) -> Result<FourierTaylorSeries> {
        self.validate()?;
        let l = self.l();
        let geom = PhaseGeometry::new(l, 0)?;
        let mut s = FourierTaylorSeries::constant(geom, ctx.kmax, ctx.degmax, self.value);
        let mut add = |pow: Vec<u32>, c: f64| -> Result<()> {
            if c != 0.0 {
                s.add_term(Monomial::new(vec![0; l], pow), Complex64::new(c, 0.0))?;
            }
            Ok(())
        };
        for i in 0..l {
            let mut p = vec![0; l];
            p[i] = 1;
            add(p, self.gradient[i])?;
        }
        for i in 0..l {
            for j in 0..l {
                let mut p = vec![0; l];
                p[i] += 1;
                p[j] += 1;
                add(p, 0.5 * self.hessian[i][j])?;
            }
        }
        if !self.third.is_empty() {
            for i in 0..l {
                for j in 0..l {
                    for k in 0..l {
                        let mut p = vec![0; l];
                        p[i] += 1;
                        p[j] += 1;
                        p[k] += 1;
                        add(p, self.third[i][j][k] / 6.0)?;
                    }
                }
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionOptions {
    /// Actions are scaled as `I = ε^a Ī`.
    pub action_scaling_exponent: f64,
    pub gamma: f64,
    pub delta: ApproximationFunction,
    pub lie_order: usize,
    /// Index into the critical point list; `None` picks the minimizer of `h₀`.
    pub critical_index: Option<usize>,
    pub grid_per_dim: usize,
    pub degmax: u32,
}

impl ReductionOptions {
    pub fn new(delta: ApproximationFunction) -> Self {
        ReductionOptions {
            action_scaling_exponent: 0.5,
            gamma: 0.05,
            delta,
            lie_order: 4,
            critical_index: None,
            grid_per_dim: 64,
            degmax: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionDiagnostics {
    pub mu: f64,
    pub gamma_matrix: Vec<Vec<f64>>,
    pub gamma11_norm: f64,
    pub gamma12_norm: f64,
    pub critical_points: CriticalPointSet,
    pub min_averaging_divisor: Option<f64>,
    pub dropped_terms: usize,
    pub dropped_mass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReducedHamiltonian {
    pub geometry: PhaseGeometry,
    pub epsilon: f64,
    /// Small parameter of the reduced problem, `ε^{1/2}` for `ε > 0`.
    pub reduced_epsilon: f64,
    /// Multiplier of `½⟨z, M₁ z⟩`: the reduced parameter, or 1 when `ε = 0`.
    pub quad_scale: f64,
    pub energy_offset: f64,
    pub epsilon_n0: f64,
    pub omega1: Vec<f64>,
    pub m1: DMatrix<f64>,
    pub rterm: FourierTaylorSeries,
    pub p1: FourierTaylorSeries,
    pub phi0: Vec<f64>,
    pub diagnostics: ReductionDiagnostics,
}

impl ReducedHamiltonian {
    /// The integrable part `εN₁(0) + ⟨ω₁,y⟩ + (quad_scale/2)⟨z,M₁z⟩` as a series.
    pub fn normal_part(&self) -> Result<FourierTaylorSeries> {
        let (kmax, degmax) = (self.p1.kmax(), self.p1.degmax().max(2));
        let mut s = FourierTaylorSeries::linear_action(self.geometry, kmax, degmax, &self.omega1)?;
        s = s.try_add(&FourierTaylorSeries::constant(self.geometry, kmax, degmax, self.epsilon_n0))?;
        if self.geometry.d0() > 0 {
            let q = FourierTaylorSeries::half_quadratic_z(self.geometry, kmax, degmax, &(&self.m1 * self.quad_scale))?;
            s = s.try_add(&q)?;
        }
        Ok(s)
    }

    /// Full reduced Hamiltonian without the energy offset.
    pub fn assemble(&self) -> Result<FourierTaylorSeries> {
        self.normal_part()?.try_add(&self.rterm)?.try_add(&self.p1)
    }
}

fn sym_min_sv_ratio(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    if max == 0.0 {
        0.0
    } else {
        sv.min() / max
    }
}

/// Resonant reduction of `H₀ + εP₀`; `P₀` is a series on geometry `(l, 0)`
/// whose polynomial part is in `Δy = y − y₀`.
pub fn reduce(
    h0: &TaylorData,
    p0: &FourierTaylorSeries,
    module: &ResonanceModule,
    epsilon: f64,
    opts: &ReductionOptions,
) -> Result<ReducedHamiltonian> {
    h0.validate()?;
    let l = module.l();
    let d = module.d();
    let d0 = module.d0();
    if h0.l() != l || p0.geometry().d() != l || p0.geometry().d0() != 0 {
        return Err(Error::GeometryMismatch(format!("H₀, P₀ and the module must share dimension {l}")));
    }
    let omega = &h0.gradient;
    for g in &module.generators {
        let dot: f64 = g.iter().zip(omega).map(|(&a, &b)| a as f64 * b).sum();
        if dot.abs() > RESONANCE_TOL {
            return Err(Error::NotResonant(format!("⟨{g:?}, ω(y₀)⟩ = {dot:e}")));
        }
    }
    let hess = DMatrix::from_fn(l, l, |i, j| h0.hessian[i][j]);
    let r = sym_min_sv_ratio(&hess);
    if r < 1e-10 {
        return Err(Error::Singular(format!("∂²H₀/∂y² is degenerate (singular value ratio {r:e})")));
    }
    let k0 = module.k0_f64();
    let gamma = k0.transpose() * &hess * &k0;
    let g22 = gamma.view((d, d), (d0, d0)).into_owned();
    let r22 = sym_min_sv_ratio(&g22);
    if d0 > 0 && r22 < 1e-10 {
        return Err(Error::Singular(format!("Γ₂₂ is degenerate (singular value ratio {r22:e})")));
    }
    let omega_star: Vec<f64> = (0..d).map(|i| (0..l).map(|r| k0[(r, i)] * omega[r]).sum()).collect();

    // Context in the θ angles.
    let kt_max = p0.terms().map(|(m, _)| module.mode_to_theta(&m.k).iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)).max().unwrap_or(0);
    let degmax = opts.degmax.max(3).max(p0.degmax());
    let ctx = Truncation { kmax: (2 * kt_max).max(1), degmax };
    let h_theta0 = transform_linear(&h0.to_series(Truncation { kmax: 0, degmax })?, module, ctx)?;
    let p_theta = transform_linear(p0, module, ctx)?;

    // Averaging over the non-resonant angles θ'.
    let gl = PhaseGeometry::new(l, 0)?;
    let mut gen = FourierTaylorSeries::zero_in(gl, ctx);
    let mut min_div: Option<f64> = None;
    for (m, c) in p_theta.terms() {
        if m.degree() != 0 || m.k[..d].iter().all(|&v| v == 0) {
            continue;
        }
        let ks = &m.k[..d];
        let kw: f64 = ks.iter().zip(&omega_star).map(|(&k, &w)| k as f64 * w).sum();
        let knorm: u32 = ks.iter().map(|v| v.unsigned_abs()).sum();
        let thr = opts.gamma / opts.delta.eval(knorm as f64);
        if kw.abs() < thr {
            return Err(Error::SmallDivisor {
                k: module.mode_from_theta(&m.k),
                detail: format!("|⟨k,ω*⟩| = {:e} below γ/Δ(|k|) = {thr:e}", kw.abs()),
            });
        }
        min_div = Some(min_div.map_or(kw.abs(), |v: f64| v.min(kw.abs())));
        gen.add_term(m.clone(), c * Complex64::new(0.0, 1.0 / kw))?;
    }
    let h_theta = h_theta0.try_add(&p_theta.scale_real(epsilon))?;
    let h_theta = if epsilon != 0.0 && !gen.is_empty() { lie_series_in(&h_theta, &gen, epsilon, opts.lie_order, ctx)? } else { h_theta };

    // Critical point of the resonant average.
    let (phi0, crit) = if d0 > 0 {
        let havg = resonant_average(p0, module)?;
        let crit = critical_points(&havg, d0, opts.grid_per_dim)?;
        if crit.degenerate_family {
            (vec![0.0; d0], crit)
        } else {
            let nondeg: Vec<&CriticalPoint> = crit.points.iter().filter(|p| p.nondegenerate).collect();
            let chosen = match opts.critical_index {
                Some(i) => crit.points.get(i).ok_or_else(|| Error::InvalidInput(format!("critical point index {i} out of range")))?,
                None => *nondeg
                    .iter()
                    .min_by(|a, b| a.value.partial_cmp(&b.value).unwrap())
                    .ok_or_else(|| Error::Singular("h₀ has no nondegenerate critical point".into()))?,
            };
            if !chosen.nondegenerate {
                return Err(Error::Singular(format!("critical point {:?} is degenerate, Hessian {:?}", chosen.phi, chosen.hessian)));
            }
            (chosen.phi.clone(), crit.clone())
        }
    } else {
        (Vec::new(), CriticalPointSet { points: Vec::new(), dropped_seeds: 0, degenerate_family: false })
    };

    // Scaling I = μ Ī with H divided by μ.
    let a = opts.action_scaling_exponent;
    let mu = if epsilon > 0.0 { epsilon.powf(a) } else { 1.0 };
    let reduced_epsilon = if epsilon > 0.0 { epsilon.sqrt() } else { 0.0 };
    let quad_scale = if epsilon > 0.0 { reduced_epsilon } else { 1.0 };

    let geom = PhaseGeometry::new(d, d0)?;
    let mut full = FourierTaylorSeries::zero_in(geom, ctx);
    let vgeom_ctx = Truncation { kmax: 0, degmax };
    // Linear forms ⟨n, v⟩ for the Taylor expansion of e^{i⟨n,θ''⟩} at φ₀.
    for (m, c) in h_theta.terms() {
        let yd = m.degree();
        let n_res = &m.k[d..];
        let phase: f64 = n_res.iter().zip(&phi0).map(|(&n, &p)| n as f64 * p).sum();
        let base = c * Complex64::from_polar(1.0, phase) * mu.powi(yd as i32) / mu;
        let mut pow = vec![0u32; geom.n_poly()];
        pow[..d].copy_from_slice(&m.pow[..d]);
        pow[d..d + d0].copy_from_slice(&m.pow[d..]);
        let kx = m.k[..d].to_vec();
        if n_res.iter().all(|&v| v == 0) {
            full.add_term(Monomial::new(kx, pow), base)?;
            continue;
        }
        let mut lin = FourierTaylorSeries::zero_in(geom, vgeom_ctx);
        for j in 0..d0 {
            if n_res[j] != 0 {
                let mut p = vec![0u32; geom.n_poly()];
                p[d + d0 + j] = 1;
                lin.add_term(Monomial::new(vec![0; d], p), Complex64::new(0.0, n_res[j] as f64))?;
            }
        }
        let room = degmax - yd;
        let mut term = FourierTaylorSeries::constant(geom, 0, degmax, 1.0);
        let mut expo = term.clone();
        for q in 1..=room {
            term = term.mul_in(&lin, vgeom_ctx)?.scale_real(1.0 / q as f64);
            expo = expo.try_add(&term)?;
        }
        for (em, ec) in expo.terms() {
            let mut p = pow.clone();
            for j in 0..d0 {
                p[d + d0 + j] += em.pow[d + d0 + j];
            }
            full.add_term(Monomial::new(kx.clone(), p), base * ec)?;
        }
    }

    // Classification.
    let energy_offset = h0.value / mu;
    let mut epsilon_n0 = -energy_offset;
    let mut omega1 = vec![0.0; d];
    let mut m1 = DMatrix::zeros(2 * d0, 2 * d0);
    let mut rterm = FourierTaylorSeries::zero_in(geom, ctx);
    let mut p1 = FourierTaylorSeries::zero_in(geom, ctx);
    for (m, c) in full.terms() {
        if !m.is_zero_mode() {
            p1.add_term(m.clone(), *c)?;
            continue;
        }
        let (yd, zd) = (m.y_degree(geom), m.z_degree(geom));
        match (yd, zd) {
            (0, 0) => epsilon_n0 += c.re,
            (1, 0) => {
                let i = m.pow[..d].iter().position(|&p| p == 1).unwrap();
                omega1[i] += c.re;
            }
            (0, 1) => p1.add_term(m.clone(), *c)?,
            (0, 2) => {
                let idx: Vec<usize> = m.pow[d..].iter().enumerate().flat_map(|(i, &p)| std::iter::repeat_n(i, p as usize)).collect();
                let (i, j) = (idx[0], idx[1]);
                if i == j {
                    m1[(i, i)] += 2.0 * c.re / quad_scale;
                } else {
                    m1[(i, j)] += c.re / quad_scale;
                    m1[(j, i)] += c.re / quad_scale;
                }
            }
            _ => rterm.add_term(m.clone(), *c)?,
        }
    }
    let norm_block = |r0: usize, c0: usize, nr: usize, nc: usize| gamma.view((r0, c0), (nr, nc)).norm();
    let log = full.log().merge(h_theta.log());
    Ok(ReducedHamiltonian {
        geometry: geom,
        epsilon,
        reduced_epsilon,
        quad_scale,
        energy_offset,
        epsilon_n0,
        omega1,
        m1,
        rterm,
        p1,
        phi0,
        diagnostics: ReductionDiagnostics {
            mu,
            gamma_matrix: (0..l).map(|i| (0..l).map(|j| gamma[(i, j)]).collect()).collect(),
            gamma11_norm: norm_block(0, 0, d, d),
            gamma12_norm: norm_block(0, d, d, d0),
            critical_points: crit,
            min_averaging_divisor: min_div,
            dropped_terms: log.dropped_terms,
            dropped_mass: log.dropped_mass,
        },
    })
}
