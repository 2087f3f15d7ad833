//! KAM iteration: divisor sets, the homological equation, single steps and
//! the iterated normal form.
//!
//! The Hamiltonian at every stage is stored as
//! `H = c + ⟨ω,y⟩ + ½⟨z, M_q z⟩ + R_int + Q`, where `M_q = quad_scale · M`
//! is the effective quadratic matrix, `R_int` the angle-independent
//! remainder and `Q` the perturbation. All coefficients carry their powers
//! of ε; the ε-series of the normal form are recovered by dividing the
//! per-step shifts by `ε^s`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gevrey::{majorant_norm, ApproximationFunction, GevreyWeights};
use crate::reduction::ReducedHamiltonian;
use crate::series::{
    average_over_angles, cutoff, lie_series_in, poisson_bracket_in, FourierTaylorSeries, GeneratingSeries, Monomial, PhaseGeometry,
    Truncation,
};

/// The symplectic matrix `J = [[0, I], [−I, 0]]` of size `2d0`.
pub fn symplectic_j(d0: usize) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(2 * d0, 2 * d0);
    for i in 0..d0 {
        j[(i, d0 + i)] = 1.0;
        j[(d0 + i, i)] = -1.0;
    }
    j
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisorReport {
    pub k: Vec<i32>,
    pub kw: f64,
    pub det_a1: (f64, f64),
    pub det_a2: (f64, f64),
    pub threshold_kw: f64,
    pub threshold_a1: f64,
    pub threshold_a2: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivisorCheck {
    pub member: bool,
    pub reports: Vec<DivisorReport>,
    pub min_kw: f64,
    pub min_det_a1: f64,
    pub min_det_a2: f64,
}

/// All `k ∈ ℤ^d` with `0 < |k|_∞ ≤ kplus`, in lexicographic order.
pub fn mode_box(d: usize, kplus: u32) -> Vec<Vec<i32>> {
    let side = 2 * kplus as i64 + 1;
    let total = side.pow(d as u32);
    let mut out = Vec::with_capacity(total as usize);
    for idx in 0..total {
        let mut rem = idx;
        let k: Vec<i32> = (0..d)
            .map(|_| {
                let v = (rem % side) as i32 - kplus as i32;
                rem /= side;
                v
            })
            .collect();
        if k.iter().any(|&v| v != 0) {
            out.push(k);
        }
    }
    out
}

fn complex_det(m: DMatrix<Complex64>) -> Complex64 {
    if m.nrows() == 0 {
        Complex64::new(1.0, 0.0)
    } else {
        m.determinant()
    }
}

/// `A₁ = −i⟨k,ω⟩ I + MJ` and `A₂ = −i⟨k,ω⟩ I + MJ ⊗ I + I ⊗ MJ`.
pub fn divisor_matrices(kw: f64, m: &DMatrix<f64>) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let n = m.nrows();
    let d0 = n / 2;
    let mj = (m * symplectic_j(d0)).map(|v| Complex64::new(v, 0.0));
    let shift = Complex64::new(0.0, -kw);
    let a1 = DMatrix::<Complex64>::identity(n, n) * shift + &mj;
    let id = DMatrix::<Complex64>::identity(n, n);
    let a2 = DMatrix::<Complex64>::identity(n * n, n * n) * shift + mj.kronecker(&id) + id.kronecker(&mj);
    (a1, a2)
}

pub fn divisor_report(k: &[i32], omega: &[f64], m: &DMatrix<f64>, gamma: f64, delta: &ApproximationFunction) -> DivisorReport {
    let d0 = m.nrows() / 2;
    let kw: f64 = k.iter().zip(omega).map(|(&a, &b)| a as f64 * b).sum();
    let knorm: u32 = k.iter().map(|v| v.unsigned_abs()).sum();
    let base = gamma / delta.eval(knorm as f64);
    let (a1, a2) = divisor_matrices(kw, m);
    let det_a1 = complex_det(a1);
    let det_a2 = complex_det(a2);
    let threshold_a1 = base.powi(2 * d0 as i32);
    let threshold_a2 = base.powi(4 * (d0 * d0) as i32);
    let pass = kw.abs() >= base && (d0 == 0 || (det_a1.norm() > threshold_a1 && det_a2.norm() > threshold_a2));
    DivisorReport {
        k: k.to_vec(),
        kw,
        det_a1: (det_a1.re, det_a1.im),
        det_a2: (det_a2.re, det_a2.im),
        threshold_kw: base,
        threshold_a1,
        threshold_a2,
        pass,
    }
}

/// Membership of `(ω, M)` in the divisor set over `0 < |k|_∞ ≤ K₊`.
pub fn check_divisors(omega: &[f64], m: &DMatrix<f64>, kplus: u32, gamma: f64, delta: &ApproximationFunction) -> Result<DivisorCheck> {
    if kplus < 1 {
        return Err(Error::InvalidInput("K₊ must be >= 1".into()));
    }
    let d0 = m.nrows() / 2;
    let reports: Vec<DivisorReport> = mode_box(omega.len(), kplus).iter().map(|k| divisor_report(k, omega, m, gamma, delta)).collect();
    let min_kw = reports.iter().map(|r| r.kw.abs()).fold(f64::INFINITY, f64::min);
    let cnorm = |c: (f64, f64)| c.0.hypot(c.1);
    let (min_det_a1, min_det_a2) = if d0 == 0 {
        (f64::NAN, f64::NAN)
    } else {
        (
            reports.iter().map(|r| cnorm(r.det_a1)).fold(f64::INFINITY, f64::min),
            reports.iter().map(|r| cnorm(r.det_a2)).fold(f64::INFINITY, f64::min),
        )
    };
    Ok(DivisorCheck { member: reports.iter().all(|r| r.pass), reports, min_kw, min_det_a1, min_det_a2 })
}

/// Frequency and effective quadratic matrix of `N = ⟨ω,y⟩ + ½⟨z, M_q z⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrableNormal {
    pub omega: Vec<f64>,
    pub mq: DMatrix<f64>,
}

impl IntegrableNormal {
    pub fn series(&self, geom: PhaseGeometry, ctx: Truncation) -> Result<FourierTaylorSeries> {
        let lin = FourierTaylorSeries::linear_action(geom, ctx.kmax, ctx.degmax.max(2), &self.omega)?;
        if geom.d0() == 0 {
            return Ok(lin);
        }
        lin.try_add(&FourierTaylorSeries::half_quadratic_z(geom, ctx.kmax, ctx.degmax.max(2), &self.mq)?)
    }
}

/// Exponent vectors of all z-monomials of total degree `deg` in `2d0` variables.
fn z_monomials(d0: usize, deg: u32) -> Vec<Vec<u32>> {
    let n = 2 * d0;
    let mut out = Vec::new();
    let mut cur = vec![0u32; n];
    fn rec(i: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if i + 1 == cur.len() {
            cur[i] = left;
            out.push(cur.clone());
            return;
        }
        for v in (0..=left).rev() {
            cur[i] = v;
            rec(i + 1, left - v, cur, out);
        }
    }
    if n == 0 {
        if deg == 0 {
            out.push(Vec::new());
        }
        return out;
    }
    rec(0, deg, &mut cur, &mut out);
    out
}

/// Matrix of `G ↦ {½⟨z,M_q z⟩, G}` on z-monomials of fixed degree.
fn quad_action_matrix(geom: PhaseGeometry, mq: &DMatrix<f64>, basis: &[Vec<u32>]) -> Result<DMatrix<Complex64>> {
    let n = basis.len();
    let deg = basis.first().map(|b| b.iter().sum::<u32>()).unwrap_or(0);
    let ctx = Truncation { kmax: 0, degmax: deg.max(2) };
    let quad = FourierTaylorSeries::half_quadratic_z(geom, 0, ctx.degmax, mq)?;
    let mut mat = DMatrix::zeros(n, n);
    let d = geom.d();
    for (col, q) in basis.iter().enumerate() {
        let mut pow = vec![0u32; d];
        pow.extend_from_slice(q);
        let mut b = FourierTaylorSeries::zero_in(geom, ctx);
        b.add_term(Monomial::new(vec![0; d], pow), Complex64::new(1.0, 0.0))?;
        let br = poisson_bracket_in(&quad, &b, ctx)?;
        for (m, c) in br.terms() {
            let row = basis.iter().position(|bq| bq[..] == m.pow[d..]).ok_or_else(|| Error::Invariant("bracket left the block".into()))?;
            mat[(row, col)] += *c;
        }
    }
    Ok(mat)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HomologicalSolution {
    pub generator: GeneratingSeries,
    /// Majorant norm of `{N,F} + R̃ + ⟨P₀₀₁,z⟩`.
    pub residual: f64,
    pub r_norm: f64,
}

/// Ansatz block key: `(k, y-index or none, z-degree)`.
fn block_of(m: &Monomial, geom: PhaseGeometry) -> Option<(Vec<i32>, Option<usize>, u32)> {
    let d = geom.d();
    let yd = m.y_degree(geom);
    let zd = m.z_degree(geom);
    match (yd, zd) {
        (0, 0) | (0, 1) | (0, 2) => Some((m.k.clone(), None, zd)),
        (1, 0) => Some((m.k.clone(), m.pow[..d].iter().position(|&p| p == 1), 0)),
        _ => None,
    }
}

/// Solves `{N,F} + R̃ + ⟨P₀₀₁,z⟩ = 0` block by block, where `R̃` is the
/// angle-dependent part of the ansatz series `R` and `P₀₀₁` its `k = 0`
/// linear-z coefficient. Every mode of `R` must pass the divisor test.
pub fn solve_homological(
    normal: &IntegrableNormal,
    r: &FourierTaylorSeries,
    gamma: f64,
    delta: &ApproximationFunction,
    weights: &GevreyWeights,
) -> Result<HomologicalSolution> {
    let geom = r.geometry();
    let d0 = geom.d0();
    if normal.omega.len() != geom.d() || normal.mq.nrows() != 2 * d0 {
        return Err(Error::GeometryMismatch("normal form does not match the series geometry".into()));
    }
    let ctx = r.truncation();
    // Group R's terms by block.
    let mut blocks: std::collections::BTreeMap<(Vec<i32>, Option<usize>, u32), Vec<(Vec<u32>, Complex64)>> = Default::default();
    for (m, c) in r.terms() {
        let key = block_of(m, geom).ok_or_else(|| Error::InvalidInput(format!("term {:?} is outside the ansatz", m)))?;
        if m.is_zero_mode() && key.2 != 1 {
            continue;
        }
        blocks.entry(key).or_default().push((m.pow.clone(), *c));
    }
    let mut quad_mats: std::collections::BTreeMap<u32, (Vec<Vec<u32>>, DMatrix<Complex64>)> = Default::default();
    for deg in 1..=2u32 {
        if d0 > 0 {
            let basis = z_monomials(d0, deg);
            let mat = quad_action_matrix(geom, &normal.mq, &basis)?;
            quad_mats.insert(deg, (basis, mat));
        }
    }
    let mut f = FourierTaylorSeries::zero_in(geom, ctx);
    let mut checked: std::collections::BTreeSet<Vec<i32>> = Default::default();
    for ((k, yi, zd), terms) in &blocks {
        let kw: f64 = k.iter().zip(&normal.omega).map(|(&a, &b)| a as f64 * b).sum();
        if !k.iter().all(|&v| v == 0) && checked.insert(k.clone()) {
            let rep = divisor_report(k, &normal.omega, &normal.mq, gamma, delta);
            if !rep.pass {
                return Err(Error::SmallDivisor { k: k.clone(), detail: format!("{rep:?}") });
            }
        }
        let shift = Complex64::new(0.0, kw);
        if *zd == 0 {
            // {⟨ω,y⟩, e^{ikx} y^j} = i⟨k,ω⟩ e^{ikx} y^j.
            for (pow, c) in terms {
                let _ = yi;
                f.add_term(Monomial::new(k.clone(), pow.clone()), -c / shift)?;
            }
            continue;
        }
        let (basis, lz) = &quad_mats[zd];
        let n = basis.len();
        let a = DMatrix::<Complex64>::identity(n, n) * shift + lz;
        let mut rhs = DVector::<Complex64>::zeros(n);
        for (pow, c) in terms {
            let row = basis.iter().position(|b| b[..] == pow[geom.d()..]).unwrap();
            rhs[row] = -c;
        }
        let sol = a.clone().lu().solve(&rhs).ok_or_else(|| {
            if k.iter().all(|&v| v == 0) {
                Error::Singular("effective quadratic matrix is singular; the k = 0 linear term cannot be removed".into())
            } else {
                Error::SmallDivisor { k: k.clone(), detail: "homological block is singular".into() }
            }
        })?;
        for (i, b) in basis.iter().enumerate() {
            if sol[i].norm() > 0.0 {
                let mut pow = vec![0u32; geom.d()];
                pow.extend_from_slice(b);
                f.add_term(Monomial::new(k.clone(), pow), sol[i])?;
            }
        }
    }
    let generator = GeneratingSeries::new(f)?;
    // Residual {N,F} + R minus the parts that move into N.
    let nser = normal.series(geom, ctx)?;
    let moved = r.filter(|m| m.is_zero_mode() && block_of(m, geom).map(|b| b.2 != 1).unwrap_or(false));
    let target = r.try_sub(&moved)?;
    let br = poisson_bracket_in(&nser, generator.series(), ctx)?;
    let res = br.try_add(&target)?;
    Ok(HomologicalSolution { residual: majorant_norm(&res, weights, 1.0), r_norm: majorant_norm(r, weights, 1.0), generator })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub p: usize,
    pub kplus: u32,
    pub const_shift: f64,
    pub omega_shift: Vec<f64>,
    /// Shift of `M` (in units of the quadratic multiplier).
    pub m_shift: Vec<Vec<f64>>,
    pub norm_before: f64,
    pub norm_after: f64,
    pub residual: f64,
    pub min_divisor: f64,
    pub min_det_a1: f64,
    pub min_det_a2: f64,
    pub dropped_mass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalFormState {
    pub geometry: PhaseGeometry,
    pub ctx: Truncation,
    pub epsilon: f64,
    pub quad_scale: f64,
    pub p: usize,
    pub const_base: f64,
    pub omega_base: Vec<f64>,
    pub m_base: DMatrix<f64>,
    pub constant: f64,
    pub omega: Vec<f64>,
    pub m: DMatrix<f64>,
    pub rint: FourierTaylorSeries,
    pub rterms: Vec<FourierTaylorSeries>,
    pub q: FourierTaylorSeries,
    pub steps: Vec<StepRecord>,
    pub generators: Vec<FourierTaylorSeries>,
    pub norms: Vec<f64>,
}

impl NormalFormState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        geometry: PhaseGeometry,
        ctx: Truncation,
        epsilon: f64,
        quad_scale: f64,
        constant: f64,
        omega: Vec<f64>,
        m: DMatrix<f64>,
        rint: FourierTaylorSeries,
        q: FourierTaylorSeries,
    ) -> Result<Self> {
        if omega.len() != geometry.d() || m.nrows() != 2 * geometry.d0() || m.ncols() != 2 * geometry.d0() {
            return Err(Error::GeometryMismatch("normal form data do not match the geometry".into()));
        }
        if rint.geometry() != geometry || q.geometry() != geometry {
            return Err(Error::GeometryMismatch("series do not match the geometry".into()));
        }
        if (&m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
            return Err(Error::InvalidInput("quadratic matrix must be symmetric".into()));
        }
        Ok(NormalFormState {
            geometry,
            ctx,
            epsilon,
            quad_scale,
            p: 0,
            const_base: constant,
            omega_base: omega.clone(),
            m_base: m.clone(),
            constant,
            omega,
            m,
            rint: rint.retruncate(ctx),
            rterms: Vec::new(),
            q: q.retruncate(ctx),
            steps: Vec::new(),
            generators: Vec::new(),
            norms: Vec::new(),
        })
    }

    /// Initial state from a reduced Hamiltonian in the context `ctx`.
    pub fn from_reduced(red: &ReducedHamiltonian, ctx: Truncation) -> Result<Self> {
        Self::new(
            red.geometry,
            ctx,
            red.reduced_epsilon,
            red.quad_scale,
            red.epsilon_n0,
            red.omega1.clone(),
            red.m1.clone(),
            red.rterm.clone(),
            red.p1.clone(),
        )
    }

    pub fn normal(&self) -> IntegrableNormal {
        IntegrableNormal { omega: self.omega.clone(), mq: &self.m * self.quad_scale }
    }

    /// `c + ⟨ω,y⟩ + ½⟨z, M_q z⟩ + R_int + Q`.
    pub fn hamiltonian(&self) -> Result<FourierTaylorSeries> {
        let n = self.normal().series(self.geometry, self.ctx)?;
        n.try_add(&FourierTaylorSeries::constant(self.geometry, 0, 0, self.constant))?
            .try_add(&self.rint)?
            .try_add(&self.q)
            .map(|s| s.retruncate(self.ctx))
    }

    fn eps_pow(&self, s: usize) -> f64 {
        self.epsilon.powi(s as i32)
    }

    /// `N_s(0)` for `s = 1..p`, such that `ε_p = Σ N_s(0) ε^s`.
    pub fn eps_coeffs(&self) -> Vec<f64> {
        self.steps.iter().enumerate().map(|(i, st)| if self.epsilon == 0.0 { 0.0 } else { st.const_shift / self.eps_pow(i + 1) }).collect()
    }

    /// `ω_s` with `ω_p = ω + Σ ω_s ε^s`.
    pub fn omega_coeffs(&self) -> Vec<Vec<f64>> {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, st)| st.omega_shift.iter().map(|v| if self.epsilon == 0.0 { 0.0 } else { v / self.eps_pow(i + 1) }).collect())
            .collect()
    }

    /// `∇²_z N_s(0)` with `M_p = M + Σ ∇²_z N_s(0) ε^s`.
    pub fn m_coeffs(&self) -> Vec<DMatrix<f64>> {
        let n = self.m.nrows();
        self.steps
            .iter()
            .enumerate()
            .map(|(i, st)| DMatrix::from_fn(n, n, |a, b| if self.epsilon == 0.0 { 0.0 } else { st.m_shift[a][b] / self.eps_pow(i + 1) }))
            .collect()
    }

    pub fn eps_p(&self) -> f64 {
        self.const_base + self.eps_coeffs().iter().enumerate().map(|(i, c)| c * self.eps_pow(i + 1)).sum::<f64>()
    }

    pub fn omega_p(&self) -> Vec<f64> {
        let mut w = self.omega_base.clone();
        for (i, c) in self.omega_coeffs().iter().enumerate() {
            for (a, b) in w.iter_mut().zip(c) {
                *a += b * self.eps_pow(i + 1);
            }
        }
        w
    }

    pub fn m_p(&self) -> DMatrix<f64> {
        let mut m = self.m_base.clone();
        for (i, c) in self.m_coeffs().iter().enumerate() {
            m += c * self.eps_pow(i + 1);
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOptions {
    pub kplus: u32,
    pub gamma: f64,
    pub delta: ApproximationFunction,
    /// Weights of the domain before the step.
    pub weights: GevreyWeights,
    /// Weights of the domain after the step (the weight loss `(r, s)`).
    pub weights_after: GevreyWeights,
    pub lie_order: usize,
    pub reject_on_growth: bool,
}

fn split_integrable(h: &FourierTaylorSeries) -> (f64, Vec<f64>, DMatrix<f64>, FourierTaylorSeries, FourierTaylorSeries) {
    let geom = h.geometry();
    let d = geom.d();
    let d0 = geom.d0();
    let mut c0 = 0.0;
    let mut w = vec![0.0; d];
    let mut mq = DMatrix::zeros(2 * d0, 2 * d0);
    let avg = average_over_angles(h);
    let rest = h.filter(|m| !m.is_zero_mode());
    let mut rint = FourierTaylorSeries::zero_in(geom, h.truncation());
    let mut q = rest;
    for (m, c) in avg.terms() {
        match (m.y_degree(geom), m.z_degree(geom)) {
            (0, 0) => c0 += c.re,
            (1, 0) => w[m.pow[..d].iter().position(|&p| p == 1).unwrap()] += c.re,
            (0, 2) => {
                let idx: Vec<usize> = m.pow[d..].iter().enumerate().flat_map(|(i, &p)| std::iter::repeat_n(i, p as usize)).collect();
                let (i, j) = (idx[0], idx[1]);
                if i == j {
                    mq[(i, i)] += 2.0 * c.re;
                } else {
                    mq[(i, j)] += c.re;
                    mq[(j, i)] += c.re;
                }
            }
            (0, 1) => q.add_term(m.clone(), *c).unwrap(),
            _ => rint.add_term(m.clone(), *c).unwrap(),
        }
    }
    (c0, w, mq, rint, q)
}

/// One KAM step. On rejection the input state is left untouched and an
/// error is returned.
pub fn kam_step(state: &NormalFormState, opts: &StepOptions) -> Result<NormalFormState> {
    let geom = state.geometry;
    let ctx = state.ctx;
    let norm_before = majorant_norm(&state.q, &opts.weights, 1.0);
    let mut next = state.clone();
    next.p += 1;
    let normal = state.normal();
    let div = check_divisors(&normal.omega, &normal.mq, opts.kplus, opts.gamma, &opts.delta)?;
    if !div.member {
        let bad = div.reports.iter().find(|r| !r.pass).unwrap();
        return Err(Error::SmallDivisor { k: bad.k.clone(), detail: format!("{bad:?}") });
    }
    let (r, _tail) = cutoff(&state.q, opts.kplus)?;
    let mut record = StepRecord {
        p: next.p,
        kplus: opts.kplus,
        const_shift: 0.0,
        omega_shift: vec![0.0; geom.d()],
        m_shift: vec![vec![0.0; 2 * geom.d0()]; 2 * geom.d0()],
        norm_before,
        norm_after: norm_before,
        residual: 0.0,
        min_divisor: div.min_kw,
        min_det_a1: div.min_det_a1,
        min_det_a2: div.min_det_a2,
        dropped_mass: 0.0,
    };
    if state.q.is_empty() {
        record.norm_after = 0.0;
        next.steps.push(record);
        next.rterms.push(FourierTaylorSeries::zero_in(geom, ctx));
        next.generators.push(FourierTaylorSeries::zero_in(geom, ctx));
        next.norms.push(0.0);
        return Ok(next);
    }
    let sol = solve_homological(&normal, &r, opts.gamma, &opts.delta, &opts.weights)?;
    if sol.residual > 1e-10 * sol.r_norm {
        return Err(Error::Invariant(format!("homological residual {} exceeds 1e-10 · ‖R‖ = {}", sol.residual, 1e-10 * sol.r_norm)));
    }
    let h = state.hamiltonian()?;
    let h_new = lie_series_in(&h, sol.generator.series(), 1.0, opts.lie_order, ctx)?;
    let (c0, w, mq, rint, q) = split_integrable(&h_new);
    let norm_after = majorant_norm(&q, &opts.weights_after, 1.0);
    if opts.reject_on_growth && norm_after > norm_before {
        return Err(Error::StepRejected(format!("perturbation norm grew from {norm_before:e} to {norm_after:e}")));
    }
    let qs = state.quad_scale;
    record.const_shift = c0 - state.constant;
    record.omega_shift = w.iter().zip(&state.omega).map(|(a, b)| a - b).collect();
    let new_m = &mq / qs;
    let dm = &new_m - &state.m;
    record.m_shift = (0..dm.nrows()).map(|i| (0..dm.ncols()).map(|j| dm[(i, j)]).collect()).collect();
    record.norm_after = norm_after;
    record.residual = sol.residual;
    record.dropped_mass = h_new.log().dropped_mass - h.log().dropped_mass;
    next.constant = c0;
    next.omega = w;
    next.m = (&new_m + new_m.transpose()) * 0.5;
    next.rterms.push(rint.try_sub(&state.rint.retruncate(ctx))?);
    next.rint = rint;
    next.q = q;
    next.steps.push(record);
    next.generators.push(sol.generator.into_series());
    next.norms.push(norm_after);
    Ok(next)
}

/// Parameter schedule `σ_p = σ/4p²`, `ρ_p = ρ/4p²`, `K_p = pK`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub k: u32,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl Schedule {
    pub fn k_p(&self, p: usize) -> u32 {
        p as u32 * self.k
    }

    /// Domain weights `(r_p, s_p)` after `p` steps.
    pub fn weights(&self, p: usize) -> GevreyWeights {
        let sum: f64 = (1..=p).map(|i| 1.0 / (4.0 * (i * i) as f64)).sum();
        GevreyWeights { rho: self.rho * (1.0 - sum), sigma: self.sigma * (1.0 - sum), alpha: self.alpha }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterateOptions {
    pub schedule: Schedule,
    pub gamma: f64,
    pub delta: ApproximationFunction,
    pub pmax: usize,
    pub target: f64,
    pub lie_order: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub p: usize,
    pub norm: f64,
    pub min_divisor: f64,
    pub min_det_a1: f64,
    pub min_det_a2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationOutcome {
    pub state: NormalFormState,
    pub trajectory: Vec<TrajectoryRow>,
    /// Wall time per step in seconds (kept apart from the deterministic outputs).
    pub step_seconds: Vec<f64>,
    pub stop_reason: String,
}

/// Runs KAM steps until `pmax`, until `‖P_p‖ < target`, or until a step is
/// rejected for norm growth. Divisor failures propagate as errors.
pub fn iterate(state: &NormalFormState, opts: &IterateOptions) -> Result<IterationOutcome> {
    let w0 = opts.schedule.weights(state.p);
    let mut cur = state.clone();
    let mut trajectory = vec![TrajectoryRow {
        p: cur.p + 1,
        norm: majorant_norm(&cur.q, &w0, 1.0),
        min_divisor: f64::NAN,
        min_det_a1: f64::NAN,
        min_det_a2: f64::NAN,
    }];
    let mut step_seconds = Vec::new();
    let mut stop_reason = "pmax reached".to_string();
    for _ in 0..opts.pmax {
        if trajectory.last().unwrap().norm < opts.target {
            stop_reason = "target reached".into();
            break;
        }
        let p = cur.p + 1;
        let step = StepOptions {
            kplus: opts.schedule.k_p(p),
            gamma: opts.gamma,
            delta: opts.delta.clone(),
            weights: opts.schedule.weights(p - 1),
            weights_after: opts.schedule.weights(p),
            lie_order: opts.lie_order,
            reject_on_growth: true,
        };
        let t0 = Instant::now();
        match kam_step(&cur, &step) {
            Ok(next) => {
                step_seconds.push(t0.elapsed().as_secs_f64());
                let rec = next.steps.last().unwrap();
                trajectory.push(TrajectoryRow {
                    p: next.p + 1,
                    norm: rec.norm_after,
                    min_divisor: rec.min_divisor,
                    min_det_a1: rec.min_det_a1,
                    min_det_a2: rec.min_det_a2,
                });
                cur = next;
            }
            Err(Error::StepRejected(msg)) => {
                stop_reason = format!("step rejected: {msg}");
                break;
            }
            Err(e) => return Err(e),
        }
    }
    if opts.pmax > 0 && trajectory.last().unwrap().norm < opts.target && stop_reason == "pmax reached" {
        stop_reason = "target reached".into();
    }
    Ok(IterationOutcome { state: cur, trajectory, step_seconds, stop_reason })
}

/// Smallest `C` with `‖P_{p+1}‖ ≤ C ‖P_p‖^{order}` along a trajectory.
pub fn contraction_constant(norms: &[f64], order: f64) -> f64 {
    norms.windows(2).filter(|w| w[0] > 0.0).map(|w| w[1] / w[0].powf(order)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::poisson_bracket;
    use proptest::prelude::*;

    fn golden() -> f64 {
        (1.0 + 5f64.sqrt()) / 2.0
    }

    fn delta2() -> ApproximationFunction {
        ApproximationFunction::power_log(2.0, 2.0, 0.0).unwrap()
    }

    fn w() -> GevreyWeights {
        GevreyWeights::new(1.0, 1.0, 2.0).unwrap()
    }

    #[test]
    fn d0_zero_reduces_to_frequency_condition() {
        let m = DMatrix::zeros(0, 0);
        let chk = check_divisors(&[1.0, golden()], &m, 3, 0.01, &delta2()).unwrap();
        for r in &chk.reports {
            assert_eq!(r.pass, r.kw.abs() >= r.threshold_kw);
        }
    }

    #[test]
    fn det_a1_closed_form() {
        let (l, lt, kappa) = (0.7, 1.9, 0.3);
        let m = DMatrix::from_row_slice(2, 2, &[l, 0.0, 0.0, lt]);
        let (a1, _) = divisor_matrices(kappa, &m);
        let det = a1.determinant();
        assert!((det - Complex64::new(l * lt - kappa * kappa, 0.0)).norm() < 1e-14);
    }

    #[test]
    fn golden_frequency_is_member() {
        let omega = [1.0, golden()];
        let chk = check_divisors(&omega, &DMatrix::zeros(0, 0), 20, 0.01, &delta2()).unwrap();
        assert!(chk.member);
        // Oracle: the closest approaches come from Fibonacci pairs, where
        // |F_{n} φ − F_{n+1}| = φ^{−n}.
        let fib = [1i32, 1, 2, 3, 5, 8, 13, 21];
        let mut worst = f64::INFINITY;
        for n in 1..fib.len() - 1 {
            let (q, p) = (fib[n], fib[n + 1]);
            if q.max(p) <= 20 {
                let kw = (q as f64 * golden() - p as f64).abs();
                worst = worst.min(kw * (1.0 + (p + q) as f64).powi(2));
            }
        }
        assert!(worst >= 0.01);
    }

    #[test]
    fn zero_r_gives_zero_f() {
        let g = PhaseGeometry::new(1, 0).unwrap();
        let n = IntegrableNormal { omega: vec![1.0], mq: DMatrix::zeros(0, 0) };
        let sol = solve_homological(&n, &FourierTaylorSeries::zero(g, 2, 2), 0.01, &delta2(), &w()).unwrap();
        assert!(sol.generator.series().is_empty());
    }

    #[test]
    fn cosine_homological_solution() {
        let g = PhaseGeometry::new(1, 0).unwrap();
        let eps = 1e-2;
        let n = IntegrableNormal { omega: vec![1.0], mq: DMatrix::zeros(0, 0) };
        let r = FourierTaylorSeries::cosine(g, 2, 2, &[1], eps).unwrap();
        let sol = solve_homological(&n, &r, 0.01, &delta2(), &w()).unwrap();
        // F = −ε sin x.
        let expect = FourierTaylorSeries::zero(g, 2, 2)
            .with_term(&[1], &[0], &[], Complex64::new(0.0, 0.5 * eps))
            .unwrap()
            .with_term(&[-1], &[0], &[], Complex64::new(0.0, -0.5 * eps))
            .unwrap();
        assert!(sol.generator.series().try_sub(&expect).unwrap().max_abs() < 1e-17);
        let res = poisson_bracket(&n.series(g, r.truncation()).unwrap(), sol.generator.series()).unwrap().try_add(&r).unwrap();
        assert!(res.max_abs() < 1e-17);
    }

    #[test]
    fn k0_linear_term() {
        let g = PhaseGeometry::new(1, 1).unwrap();
        let eps = 0.1;
        let mq = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let n = IntegrableNormal { omega: vec![1.0], mq };
        let r = FourierTaylorSeries::zero(g, 1, 2).with_term(&[0], &[0], &[1, 0], Complex64::new(eps, 0.0)).unwrap();
        let sol = solve_homological(&n, &r, 0.01, &delta2(), &w()).unwrap();
        let f = sol.generator.series();
        // {½⟨z,Mz⟩, ⟨F,z⟩} = ⟨MJF, z⟩, so F = −J⁻¹M⁻¹P = (0, −ε/2).
        assert!(f.coeff_of(&[0], &[0], &[1, 0]).norm() < 1e-16);
        assert!((f.coeff_of(&[0], &[0], &[0, 1]) - Complex64::new(-eps / 2.0, 0.0)).norm() < 1e-16);
        assert!(sol.residual < 1e-16);
    }

    fn arb_ansatz(geom: PhaseGeometry) -> impl Strategy<Value = FourierTaylorSeries> {
        let d = geom.d();
        let n = geom.n_poly();
        proptest::collection::vec((proptest::collection::vec(-3i32..=3, d), 0usize..4, 0usize..8, -1.0f64..1.0, -1.0f64..1.0), 1..12)
            .prop_map(move |terms| {
                let mut s = FourierTaylorSeries::zero(geom, 3, 2);
                for (k, shape, var, re, im) in terms {
                    let mut pow = vec![0u32; n];
                    match shape {
                        0 => {}
                        1 => pow[var % d] = 1,
                        2 => pow[d + var % (n - d)] = 1,
                        _ => {
                            pow[d + var % (n - d)] += 1;
                            pow[d + (var / 2) % (n - d)] += 1;
                        }
                    }
                    s.add_term(Monomial::new(k, pow), Complex64::new(re, im)).unwrap();
                }
                s
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn homological_residual_is_tiny(r in arb_ansatz(PhaseGeometry::new(2, 1).unwrap())) {
            let mq = DMatrix::from_row_slice(2, 2, &[0.031, 0.004, 0.004, 0.017]);
            let n = IntegrableNormal { omega: vec![1.0, golden()], mq };
            let weak = ApproximationFunction::power_log(2.0, 1.0, 0.0).unwrap();
            let sol = solve_homological(&n, &r, 1e-4, &weak, &w()).unwrap();
            prop_assert!(sol.residual <= 1e-10 * sol.r_norm, "{} vs {}", sol.residual, sol.r_norm);
        }
    }

    fn pendulum_state(eps: f64, with_y: bool) -> NormalFormState {
        let g = PhaseGeometry::new(1, 0).unwrap();
        let ctx = Truncation { kmax: 24, degmax: 2 };
        let mut q = FourierTaylorSeries::cosine(g, ctx.kmax, ctx.degmax, &[1], eps).unwrap();
        if with_y {
            let qy = FourierTaylorSeries::zero(g, ctx.kmax, ctx.degmax)
                .with_term(&[1], &[1], &[], Complex64::new(eps / 2.0, 0.0))
                .unwrap()
                .with_term(&[-1], &[1], &[], Complex64::new(eps / 2.0, 0.0))
                .unwrap();
            q = q.try_add(&qy).unwrap();
        }
        NormalFormState::new(g, ctx, eps, 1.0, 0.0, vec![golden()], DMatrix::zeros(0, 0), FourierTaylorSeries::zero_in(g, ctx), q).unwrap()
    }

    fn step_opts(kplus: u32) -> StepOptions {
        StepOptions {
            kplus,
            gamma: 0.05,
            delta: delta2(),
            weights: w(),
            weights_after: GevreyWeights::new(0.75, 0.75, 2.0).unwrap(),
            lie_order: 8,
            reject_on_growth: true,
        }
    }

    #[test]
    fn empty_perturbation_step_only_counts() {
        let mut s = pendulum_state(1e-3, false);
        s.q = FourierTaylorSeries::zero_in(s.geometry, s.ctx);
        let next = kam_step(&s, &step_opts(8)).unwrap();
        assert_eq!(next.p, 1);
        assert_eq!(next.omega, s.omega);
        assert_eq!(next.eps_p(), s.eps_p());
    }

    #[test]
    fn literal_pendulum_is_removed_in_one_step() {
        let s = pendulum_state(1e-3, false);
        let next = kam_step(&s, &step_opts(8)).unwrap();
        assert!(next.q.max_abs() < 1e-15);
    }

    #[test]
    fn step_is_quadratic_and_reversible() {
        let s = pendulum_state(1e-3, true);
        let next = kam_step(&s, &step_opts(8)).unwrap();
        let rec = &next.steps[0];
        assert!(rec.norm_after < 10.0 * rec.norm_before.powi(2), "{} vs {}", rec.norm_after, rec.norm_before);
        // Inverse Lie transform recovers the input Hamiltonian.
        let back = lie_series_in(&next.hamiltonian().unwrap(), &next.generators[0], -1.0, 8, s.ctx).unwrap();
        let diff = back.try_sub(&s.hamiltonian().unwrap()).unwrap();
        assert!(diff.max_abs() < 1e-8);
        // ε-series reproduce the accumulated normal form.
        assert!((next.eps_p() - next.constant).abs() < 1e-12);
        assert!((next.omega_p()[0] - next.omega[0]).abs() < 1e-12);
    }

    #[test]
    fn resonant_state_reconstructs_and_stays_symmetric() {
        let g = PhaseGeometry::new(1, 1).unwrap();
        let ctx = Truncation { kmax: 12, degmax: 3 };
        let eps = 0.05;
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.3]);
        let q = FourierTaylorSeries::cosine(g, ctx.kmax, ctx.degmax, &[1], 1e-3)
            .unwrap()
            .try_add(&FourierTaylorSeries::zero(g, ctx.kmax, ctx.degmax).with_term(&[0], &[0], &[1, 0], Complex64::new(1e-4, 0.0)).unwrap())
            .unwrap()
            .try_add(
                &FourierTaylorSeries::zero(g, ctx.kmax, ctx.degmax)
                    .with_term(&[1], &[0], &[1, 1], Complex64::new(1e-3, 0.0))
                    .unwrap()
                    .with_term(&[-1], &[0], &[1, 1], Complex64::new(1e-3, 0.0))
                    .unwrap(),
            )
            .unwrap();
        let s = NormalFormState::new(g, ctx, eps, eps, 0.0, vec![golden()], m, FourierTaylorSeries::zero_in(g, ctx), q).unwrap();
        let opts = IterateOptions {
            schedule: Schedule { k: 4, rho: 1.0, sigma: 1.0, alpha: 2.0 },
            gamma: 0.01,
            delta: delta2(),
            pmax: 3,
            target: 1e-14,
            lie_order: 8,
        };
        let out = iterate(&s, &opts).unwrap();
        let st = &out.state;
        assert!(st.p >= 1);
        assert!((&st.m - st.m.transpose()).abs().max() == 0.0);
        assert!((st.m_p() - &st.m).abs().max() < 1e-12);
        assert!(st.omega_p().iter().zip(&st.omega).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!((st.eps_p() - st.constant).abs() < 1e-12);
        assert!(out.trajectory.windows(2).all(|w| w[1].norm <= w[0].norm));
    }

    #[test]
    fn zero_pmax_is_identity() {
        let s = pendulum_state(1e-3, true);
        let opts = IterateOptions {
            schedule: Schedule { k: 8, rho: 1.0, sigma: 1.0, alpha: 2.0 },
            gamma: 0.05,
            delta: delta2(),
            pmax: 0,
            target: 1e-14,
            lie_order: 8,
        };
        let out = iterate(&s, &opts).unwrap();
        assert_eq!(out.state, s);
        assert_eq!(out.trajectory.len(), 1);
    }

    #[test]
    fn schedule_sums_stay_below_budget() {
        let sch = Schedule { k: 8, rho: 1.0, sigma: 2.0, alpha: 2.0 };
        for p in [1, 5, 50, 5000] {
            let wp = sch.weights(p);
            assert!(wp.rho > 0.0 && wp.sigma > 0.0);
            assert!(sch.rho - wp.rho < sch.rho * std::f64::consts::PI.powi(2) / 24.0 + 1e-15);
        }
        assert_eq!(sch.k_p(3), 24);
    }

    #[test]
    fn small_divisor_is_reported() {
        let s = pendulum_state(1e-3, false);
        let mut opts = step_opts(8);
        opts.gamma = 10.0;
        assert!(matches!(kam_step(&s, &opts), Err(Error::SmallDivisor { .. })));
    }
}
