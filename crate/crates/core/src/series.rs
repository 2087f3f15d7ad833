//! Truncated Fourier–Taylor series over phase space.
//!
//! A series is a finite sum of terms `c · e^{i⟨k,x⟩} · y^j · u^a · v^b` with
//! `x ∈ 𝕋^d` (angles), `y ∈ ℝ^d` (actions) and `z = (u, v) ∈ ℝ^{2 d0}`
//! (resonant canonical pairs). Coefficients are stored sparsely in a
//! `BTreeMap` so iteration order, and therefore every floating point
//! reduction, is deterministic.
//!
//! The Poisson bracket convention is
//!
//! ```text
//! {f, g} = Σ_i (∂f/∂y_i ∂g/∂x_i − ∂f/∂x_i ∂g/∂y_i)
//!        + Σ_j (∂f/∂u_j ∂g/∂v_j − ∂f/∂v_j ∂g/∂u_j)
//! ```
//!
//! so that `{⟨ω,y⟩, e^{i⟨k,x⟩}} = i⟨k,ω⟩ e^{i⟨k,x⟩}`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::{Add, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients with magnitude below this are pruned after arithmetic.
pub const PRUNE_THRESHOLD: f64 = 1e-15;

/// Hard cap on the order of a Lie series.
pub const LIE_ORDER_CAP: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhaseGeometry {
    d: usize,
    d0: usize,
}

impl PhaseGeometry {
    pub fn new(d: usize, d0: usize) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidInput("phase geometry needs d >= 1".into()));
        }
        Ok(PhaseGeometry { d, d0 })
    }

    /// Number of angle/action pairs that are not resonant.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of resonant canonical pairs `(u_j, v_j)`.
    pub fn d0(&self) -> usize {
        self.d0
    }

    /// Original number of degrees of freedom, `d + d0`.
    pub fn l(&self) -> usize {
        self.d + self.d0
    }

    /// Number of polynomial variables `(y, u, v)`.
    pub fn n_poly(&self) -> usize {
        self.d + 2 * self.d0
    }
}

/// Multi-index of one term: Fourier mode `k` and exponents `(j, q)` laid out
/// as `[j_1..j_d, u_1..u_d0, v_1..v_d0]`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Monomial {
    pub k: Vec<i32>,
    pub pow: Vec<u32>,
}

impl Monomial {
    pub fn new(k: Vec<i32>, pow: Vec<u32>) -> Self {
        Monomial { k, pow }
    }

    pub fn constant(geom: PhaseGeometry) -> Self {
        Monomial { k: vec![0; geom.d], pow: vec![0; geom.n_poly()] }
    }

    /// Sup-norm of the Fourier mode.
    pub fn k_sup(&self) -> u32 {
        self.k.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0)
    }

    /// ℓ¹-norm of the Fourier mode.
    pub fn k_l1(&self) -> u32 {
        self.k.iter().map(|v| v.unsigned_abs()).sum()
    }

    pub fn degree(&self) -> u32 {
        self.pow.iter().sum()
    }

    pub fn y_degree(&self, geom: PhaseGeometry) -> u32 {
        self.pow[..geom.d].iter().sum()
    }

    pub fn z_degree(&self, geom: PhaseGeometry) -> u32 {
        self.pow[geom.d..].iter().sum()
    }

    pub fn is_zero_mode(&self) -> bool {
        self.k.iter().all(|&v| v == 0)
    }

    fn reflected(&self) -> Monomial {
        Monomial { k: self.k.iter().map(|v| -v).collect(), pow: self.pow.clone() }
    }
}

/// Bookkeeping for coefficients lost to truncation or pruning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TruncationLog {
    pub dropped_terms: usize,
    pub dropped_mass: f64,
    pub pruned_terms: usize,
}

impl TruncationLog {
    pub fn merge(&self, other: &TruncationLog) -> TruncationLog {
        TruncationLog {
            dropped_terms: self.dropped_terms + other.dropped_terms,
            dropped_mass: self.dropped_mass + other.dropped_mass,
            pruned_terms: self.pruned_terms + other.pruned_terms,
        }
    }
}

/// Truncation context `(kmax, degmax)` of a result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub kmax: u32,
    pub degmax: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FourierTaylorSeries {
    geom: PhaseGeometry,
    kmax: u32,
    degmax: u32,
    coeffs: BTreeMap<Monomial, Complex64>,
    log: TruncationLog,
}

impl FourierTaylorSeries {
    pub fn zero(geom: PhaseGeometry, kmax: u32, degmax: u32) -> Self {
        FourierTaylorSeries { geom, kmax, degmax, coeffs: BTreeMap::new(), log: TruncationLog::default() }
    }

    pub fn zero_in(geom: PhaseGeometry, ctx: Truncation) -> Self {
        Self::zero(geom, ctx.kmax, ctx.degmax)
    }

    pub fn geometry(&self) -> PhaseGeometry {
        self.geom
    }

    pub fn kmax(&self) -> u32 {
        self.kmax
    }

    pub fn degmax(&self) -> u32 {
        self.degmax
    }

    pub fn truncation(&self) -> Truncation {
        Truncation { kmax: self.kmax, degmax: self.degmax }
    }

    pub fn log(&self) -> &TruncationLog {
        &self.log
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Monomial, &Complex64)> {
        self.coeffs.iter()
    }

    pub fn coeffs_vec(&self) -> Vec<(Monomial, Complex64)> {
        self.coeffs.iter().map(|(m, c)| (m.clone(), *c)).collect()
    }

    pub fn coeff(&self, mono: &Monomial) -> Complex64 {
        self.coeffs.get(mono).copied().unwrap_or_default()
    }

    /// Coefficient addressed by `(k, j, q)`.
    pub fn coeff_of(&self, k: &[i32], j: &[u32], q: &[u32]) -> Complex64 {
        let mut pow = j.to_vec();
        pow.extend_from_slice(q);
        self.coeff(&Monomial::new(k.to_vec(), pow))
    }

    fn check_mono(&self, mono: &Monomial) -> Result<()> {
        if mono.k.len() != self.geom.d || mono.pow.len() != self.geom.n_poly() {
            return Err(Error::GeometryMismatch(format!(
                "multi-index {:?}/{:?} does not fit d = {}, d0 = {}",
                mono.k, mono.pow, self.geom.d, self.geom.d0
            )));
        }
        if mono.k_sup() > self.kmax || mono.degree() > self.degmax {
            return Err(Error::OutOfBounds(format!(
                "k = {:?}, degree {} against kmax = {}, degmax = {}",
                mono.k,
                mono.degree(),
                self.kmax,
                self.degmax
            )));
        }
        Ok(())
    }

    /// Adds `c` to the coefficient of `mono`; rejects indices outside the bounds.
    pub fn add_term(&mut self, mono: Monomial, c: Complex64) -> Result<()> {
        self.check_mono(&mono)?;
        self.accumulate(mono, c);
        Ok(())
    }

    pub fn add_kjq(&mut self, k: &[i32], j: &[u32], q: &[u32], c: Complex64) -> Result<()> {
        let mut pow = j.to_vec();
        pow.extend_from_slice(q);
        self.add_term(Monomial::new(k.to_vec(), pow), c)
    }

    pub fn with_term(mut self, k: &[i32], j: &[u32], q: &[u32], c: Complex64) -> Result<Self> {
        self.add_kjq(k, j, q, c)?;
        Ok(self)
    }

    fn accumulate(&mut self, mono: Monomial, c: Complex64) {
        *self.coeffs.entry(mono).or_default() += c;
    }

    /// Adds a term, dropping it into the truncation log when it falls outside
    /// the bounds.
    fn accumulate_truncated(&mut self, mono: Monomial, c: Complex64) {
        if mono.k_sup() > self.kmax || mono.degree() > self.degmax {
            self.log.dropped_terms += 1;
            self.log.dropped_mass += c.norm();
        } else {
            self.accumulate(mono, c);
        }
    }

    fn prune(mut self) -> Self {
        let before = self.coeffs.len();
        self.coeffs.retain(|_, c| c.norm() >= PRUNE_THRESHOLD);
        self.log.pruned_terms += before - self.coeffs.len();
        self
    }

    /// Copies the terms into a (possibly different) truncation context.
    pub fn retruncate(&self, ctx: Truncation) -> Self {
        let mut out = FourierTaylorSeries::zero_in(self.geom, ctx);
        out.log = self.log;
        for (m, c) in &self.coeffs {
            out.accumulate_truncated(m.clone(), *c);
        }
        out
    }

    pub fn constant(geom: PhaseGeometry, kmax: u32, degmax: u32, c: f64) -> Self {
        let mut s = Self::zero(geom, kmax, degmax);
        if c != 0.0 {
            s.accumulate(Monomial::constant(geom), Complex64::new(c, 0.0));
        }
        s
    }

    /// The linear form `⟨ω, y⟩`.
    pub fn linear_action(geom: PhaseGeometry, kmax: u32, degmax: u32, omega: &[f64]) -> Result<Self> {
        if omega.len() != geom.d {
            return Err(Error::GeometryMismatch("frequency vector length differs from d".into()));
        }
        let mut s = Self::zero(geom, kmax, degmax);
        for (i, &w) in omega.iter().enumerate() {
            if w != 0.0 {
                let mut m = Monomial::constant(geom);
                m.pow[i] = 1;
                s.add_term(m, Complex64::new(w, 0.0))?;
            }
        }
        Ok(s)
    }

    /// The quadratic form `½ ⟨z, S z⟩` for a symmetric `2d0 × 2d0` matrix `S`.
    pub fn half_quadratic_z(geom: PhaseGeometry, kmax: u32, degmax: u32, s: &nalgebra::DMatrix<f64>) -> Result<Self> {
        let n = 2 * geom.d0;
        if s.nrows() != n || s.ncols() != n {
            return Err(Error::GeometryMismatch("quadratic form has wrong size".into()));
        }
        let mut out = Self::zero(geom, kmax, degmax);
        for a in 0..n {
            for b in a..n {
                let c = if a == b { 0.5 * s[(a, a)] } else { 0.5 * (s[(a, b)] + s[(b, a)]) };
                if c != 0.0 {
                    let mut m = Monomial::constant(geom);
                    m.pow[geom.d + a] += 1;
                    m.pow[geom.d + b] += 1;
                    out.add_term(m, Complex64::new(c, 0.0))?;
                }
            }
        }
        Ok(out)
    }

    /// `amp · cos⟨k,x⟩` as the pair of modes `±k`.
    pub fn cosine(geom: PhaseGeometry, kmax: u32, degmax: u32, k: &[i32], amp: f64) -> Result<Self> {
        let mut s = Self::zero(geom, kmax, degmax);
        let neg: Vec<i32> = k.iter().map(|v| -v).collect();
        let zero = vec![0u32; geom.n_poly()];
        s.add_term(Monomial::new(k.to_vec(), zero.clone()), Complex64::new(0.5 * amp, 0.0))?;
        s.add_term(Monomial::new(neg, zero), Complex64::new(0.5 * amp, 0.0))?;
        Ok(s.prune())
    }

    pub fn scale(&self, a: Complex64) -> Self {
        let mut out = self.clone();
        for c in out.coeffs.values_mut() {
            *c *= a;
        }
        out.prune()
    }

    pub fn scale_real(&self, a: f64) -> Self {
        self.scale(Complex64::new(a, 0.0))
    }

    fn same_geom(&self, other: &Self) -> Result<()> {
        if self.geom != other.geom {
            return Err(Error::GeometryMismatch(format!("{:?} vs {:?}", self.geom, other.geom)));
        }
        Ok(())
    }

    /// Sum in the wider of the two truncation contexts.
    pub fn try_add(&self, other: &Self) -> Result<Self> {
        self.same_geom(other)?;
        let ctx = Truncation { kmax: self.kmax.max(other.kmax), degmax: self.degmax.max(other.degmax) };
        let mut out = self.retruncate(ctx);
        out.log = self.log.merge(&other.log);
        for (m, c) in &other.coeffs {
            out.accumulate(m.clone(), *c);
        }
        Ok(out.prune())
    }

    pub fn try_sub(&self, other: &Self) -> Result<Self> {
        self.try_add(&other.scale_real(-1.0))
    }

    /// Product truncated to `ctx`.
    pub fn mul_in(&self, other: &Self, ctx: Truncation) -> Result<Self> {
        self.same_geom(other)?;
        let mut out = FourierTaylorSeries::zero_in(self.geom, ctx);
        out.log = self.log.merge(&other.log);
        for (mf, cf) in &self.coeffs {
            for (mg, cg) in &other.coeffs {
                let k = mf.k.iter().zip(&mg.k).map(|(a, b)| a + b).collect();
                let pow = mf.pow.iter().zip(&mg.pow).map(|(a, b)| a + b).collect();
                out.accumulate_truncated(Monomial::new(k, pow), cf * cg);
            }
        }
        Ok(out.prune())
    }

    /// Product with the summed truncation context.
    pub fn try_mul(&self, other: &Self) -> Result<Self> {
        let ctx = Truncation { kmax: self.kmax + other.kmax, degmax: self.degmax + other.degmax };
        self.mul_in(other, ctx)
    }

    /// Keeps only the terms selected by `keep`.
    pub fn filter<F: Fn(&Monomial) -> bool>(&self, keep: F) -> Self {
        let mut out = FourierTaylorSeries::zero(self.geom, self.kmax, self.degmax);
        out.log = self.log;
        for (m, c) in &self.coeffs {
            if keep(m) {
                out.coeffs.insert(m.clone(), *c);
            }
        }
        out
    }

    /// `c_{k} ↦ conj(c_{-k})`; equals `self` exactly when the series is real-valued.
    pub fn conj_reflect(&self) -> Self {
        let mut out = FourierTaylorSeries::zero(self.geom, self.kmax, self.degmax);
        out.log = self.log;
        for (m, c) in &self.coeffs {
            out.coeffs.insert(m.reflected(), c.conj());
        }
        out
    }

    /// Real part of the function, `(f + conj_reflect f) / 2`.
    pub fn real_part(&self) -> Self {
        let mut out = self.clone();
        for (m, c) in self.conj_reflect().coeffs {
            out.accumulate(m, c);
        }
        out.scale_real(0.5)
    }

    /// Whether `c_{-k} = conj(c_k)` holds to absolute tolerance `tol`.
    pub fn is_real(&self, tol: f64) -> bool {
        self.coeffs.iter().all(|(m, c)| (self.coeff(&m.reflected()) - c.conj()).norm() <= tol)
    }

    /// Largest coefficient magnitude.
    pub fn max_abs(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).fold(0.0, f64::max)
    }

    /// Sum of coefficient magnitudes.
    pub fn l1_norm(&self) -> f64 {
        self.coeffs.values().map(|c| c.norm()).sum()
    }

    /// Evaluates the series at `(x, y, z)`.
    pub fn eval(&self, x: &[f64], y: &[f64], z: &[f64]) -> Complex64 {
        let mut acc = Complex64::default();
        for (m, c) in &self.coeffs {
            let phase: f64 = m.k.iter().zip(x).map(|(&k, &xi)| k as f64 * xi).sum();
            let mut mono = 1.0;
            for (p, &v) in m.pow.iter().zip(y.iter().chain(z)) {
                mono *= v.powi(*p as i32);
            }
            acc += c * Complex64::from_polar(1.0, phase) * mono;
        }
        acc
    }

    /// Partial derivative with respect to the angle `x_i`.
    pub fn d_angle(&self, i: usize) -> Self {
        let mut out = FourierTaylorSeries::zero(self.geom, self.kmax, self.degmax);
        for (m, c) in &self.coeffs {
            if m.k[i] != 0 {
                out.coeffs.insert(m.clone(), c * Complex64::new(0.0, m.k[i] as f64));
            }
        }
        out
    }

    /// Partial derivative with respect to polynomial variable `var`
    /// (index into `[y, u, v]`).
    pub fn d_poly(&self, var: usize) -> Self {
        let mut out = FourierTaylorSeries::zero(self.geom, self.kmax, self.degmax);
        for (m, c) in &self.coeffs {
            let p = m.pow[var];
            if p > 0 {
                let mut mm = m.clone();
                mm.pow[var] -= 1;
                out.accumulate(mm, c * p as f64);
            }
        }
        out
    }

    /// Serializes to the line-oriented text format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# fourier-taylor series: k | j | q | re im");
        let _ = writeln!(s, "{} {} {} {}", self.geom.d, self.geom.d0, self.kmax, self.degmax);
        let d = self.geom.d;
        for (m, c) in &self.coeffs {
            let k: Vec<String> = m.k.iter().map(|v| v.to_string()).collect();
            let j: Vec<String> = m.pow[..d].iter().map(|v| v.to_string()).collect();
            let q: Vec<String> = m.pow[d..].iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{} | {} | {} | {:?} {:?}", k.join(" "), j.join(" "), q.join(" "), c.re, c.im);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (hline, header) = lines.next().ok_or(Error::Parse { line: 0, msg: "missing header".into() })?;
        let nums: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse { line: hline, msg: e.to_string() })?;
        if nums.len() != 4 {
            return Err(Error::Parse { line: hline, msg: "header must be `d d0 kmax degmax`".into() });
        }
        let geom = PhaseGeometry::new(nums[0], nums[1]).map_err(|e| Error::Parse { line: hline, msg: e.to_string() })?;
        let mut out = FourierTaylorSeries::zero(geom, nums[2] as u32, nums[3] as u32);
        for (ln, line) in lines {
            let perr = |msg: String| Error::Parse { line: ln, msg };
            let parts: Vec<&str> = line.split('|').collect();
            if parts.len() != 4 {
                return Err(perr("expected 4 `|`-separated fields".into()));
            }
            let ints =
                |p: &str| -> Result<Vec<i64>> { p.split_whitespace().map(|t| t.parse::<i64>().map_err(|e| perr(e.to_string()))).collect() };
            let k = ints(parts[0])?;
            let j = ints(parts[1])?;
            let q = ints(parts[2])?;
            let c: Vec<f64> =
                parts[3].split_whitespace().map(|t| t.parse::<f64>().map_err(|e| perr(e.to_string()))).collect::<Result<_>>()?;
            if k.len() != geom.d || j.len() != geom.d || q.len() != 2 * geom.d0 || c.len() != 2 {
                return Err(perr("field sizes do not match the header".into()));
            }
            if j.iter().chain(&q).any(|&v| v < 0) {
                return Err(perr("negative exponent".into()));
            }
            let mono = Monomial::new(k.iter().map(|&v| v as i32).collect(), j.iter().chain(&q).map(|&v| v as u32).collect());
            out.add_term(mono, Complex64::new(c[0], c[1])).map_err(|e| perr(e.to_string()))?;
        }
        Ok(out)
    }
}

impl Add for &FourierTaylorSeries {
    type Output = FourierTaylorSeries;
    fn add(self, rhs: Self) -> FourierTaylorSeries {
        self.try_add(rhs).expect("geometry mismatch in series addition")
    }
}

impl Sub for &FourierTaylorSeries {
    type Output = FourierTaylorSeries;
    fn sub(self, rhs: Self) -> FourierTaylorSeries {
        self.try_sub(rhs).expect("geometry mismatch in series subtraction")
    }
}

impl Neg for &FourierTaylorSeries {
    type Output = FourierTaylorSeries;
    fn neg(self) -> FourierTaylorSeries {
        self.scale_real(-1.0)
    }
}

/// Generating function restricted to the homological ansatz: modes
/// `0 < |k| ≤ K₊` carrying constant, linear-`y`, linear-`z` and quadratic-`z`
/// terms, plus a `k = 0` term linear in `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratingSeries(FourierTaylorSeries);

impl GeneratingSeries {
    pub fn new(series: FourierTaylorSeries) -> Result<Self> {
        let geom = series.geometry();
        for (m, _) in series.terms() {
            if !is_generator_shape(m, geom) {
                return Err(Error::InvalidInput(format!(
                    "term k = {:?}, pow = {:?} is outside the generating-function ansatz",
                    m.k, m.pow
                )));
            }
        }
        Ok(GeneratingSeries(series))
    }

    pub fn series(&self) -> &FourierTaylorSeries {
        &self.0
    }

    pub fn into_series(self) -> FourierTaylorSeries {
        self.0
    }
}

/// Degree pattern shared by the cutoff and the generating function:
/// constant, linear in `y`, linear in `z` or quadratic in `z` (no mixing).
pub fn is_ansatz_degree(m: &Monomial, geom: PhaseGeometry) -> bool {
    let jy = m.y_degree(geom);
    let qz = m.z_degree(geom);
    matches!((jy, qz), (0, 0) | (1, 0) | (0, 1) | (0, 2))
}

fn is_generator_shape(m: &Monomial, geom: PhaseGeometry) -> bool {
    if m.is_zero_mode() {
        m.y_degree(geom) == 0 && m.z_degree(geom) == 1
    } else {
        is_ansatz_degree(m, geom)
    }
}

fn bracket_into(f: &FourierTaylorSeries, g: &FourierTaylorSeries, out: &mut FourierTaylorSeries) {
    let geom = f.geom;
    let d = geom.d;
    let d0 = geom.d0;
    for (mf, cf) in &f.coeffs {
        for (mg, cg) in &g.coeffs {
            let cc = cf * cg;
            let k: Vec<i32> = mf.k.iter().zip(&mg.k).map(|(a, b)| a + b).collect();
            let base: Vec<u32> = mf.pow.iter().zip(&mg.pow).map(|(a, b)| a + b).collect();
            for i in 0..d {
                let w = mf.pow[i] as f64 * mg.k[i] as f64 - mf.k[i] as f64 * mg.pow[i] as f64;
                if w != 0.0 {
                    let mut pow = base.clone();
                    pow[i] -= 1;
                    out.accumulate_truncated(Monomial::new(k.clone(), pow), cc * Complex64::new(0.0, w));
                }
            }
            for jj in 0..d0 {
                let (iu, iv) = (d + jj, d + d0 + jj);
                let w = mf.pow[iu] as f64 * mg.pow[iv] as f64 - mf.pow[iv] as f64 * mg.pow[iu] as f64;
                if w != 0.0 {
                    let mut pow = base.clone();
                    pow[iu] -= 1;
                    pow[iv] -= 1;
                    out.accumulate_truncated(Monomial::new(k.clone(), pow), cc * w);
                }
            }
        }
    }
}

/// Poisson bracket in the default context
/// `(kmax_f + kmax_g, degmax_f + degmax_g − 2)`.
pub fn poisson_bracket(f: &FourierTaylorSeries, g: &FourierTaylorSeries) -> Result<FourierTaylorSeries> {
    let ctx = Truncation { kmax: f.kmax + g.kmax, degmax: (f.degmax + g.degmax).saturating_sub(2) };
    poisson_bracket_in(f, g, ctx)
}

/// Poisson bracket truncated to an explicit result context.
pub fn poisson_bracket_in(f: &FourierTaylorSeries, g: &FourierTaylorSeries, ctx: Truncation) -> Result<FourierTaylorSeries> {
    f.same_geom(g)?;
    let mut out = FourierTaylorSeries::zero_in(f.geom, ctx);
    out.log = f.log.merge(&g.log);
    bracket_into(f, g, &mut out);
    Ok(out.prune())
}

/// `Σ_{m=0}^{order} (ε^m / m!) ad_F^m(H)` with `ad_F(H) = {H, F}`; the
/// result lives in the wider of the contexts of `H` and `F`.
pub fn lie_transform(h: &FourierTaylorSeries, f: &GeneratingSeries, epsilon: f64, order: usize) -> Result<FourierTaylorSeries> {
    let g = f.series();
    let ctx = Truncation { kmax: h.kmax.max(g.kmax), degmax: h.degmax.max(g.degmax) };
    lie_series_in(h, g, epsilon, order, ctx)
}

/// Lie series with an arbitrary generator and explicit truncation context.
pub fn lie_series_in(
    h: &FourierTaylorSeries,
    f: &FourierTaylorSeries,
    epsilon: f64,
    order: usize,
    ctx: Truncation,
) -> Result<FourierTaylorSeries> {
    if order > LIE_ORDER_CAP {
        return Err(Error::OrderCap { order, cap: LIE_ORDER_CAP });
    }
    h.same_geom(f)?;
    let mut total = h.retruncate(ctx);
    if epsilon == 0.0 || f.is_empty() {
        return Ok(total);
    }
    let mut term = total.clone();
    for m in 1..=order {
        term = poisson_bracket_in(&term, f, ctx)?.scale_real(epsilon / m as f64);
        if term.is_empty() {
            break;
        }
        total = total.try_add(&term)?;
    }
    total.log = total.log.merge(&term.log);
    Ok(total)
}

/// Splits `P` into the homological ansatz part `R` (modes `|k|_∞ ≤ K₊` of
/// ansatz degree) and the tail `P − R`.
pub fn cutoff(p: &FourierTaylorSeries, kplus: u32) -> Result<(FourierTaylorSeries, FourierTaylorSeries)> {
    if kplus < 1 {
        return Err(Error::InvalidInput("cutoff radius must be >= 1".into()));
    }
    let geom = p.geom;
    let keep = |m: &Monomial| m.k_sup() <= kplus && is_ansatz_degree(m, geom);
    let r = p.filter(keep);
    let tail = p.filter(|m| !keep(m));
    Ok((r, tail))
}

/// Angle average: keeps exactly the `k = 0` coefficients.
pub fn average_over_angles(p: &FourierTaylorSeries) -> FourierTaylorSeries {
    p.filter(|m| m.is_zero_mode())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn g10() -> PhaseGeometry {
        PhaseGeometry::new(1, 0).unwrap()
    }

    fn close(a: &FourierTaylorSeries, b: &FourierTaylorSeries, tol: f64) -> bool {
        a.try_sub(b).unwrap().max_abs() <= tol
    }

    #[test]
    fn bracket_of_frequency_with_mode() {
        let g = PhaseGeometry::new(2, 0).unwrap();
        let omega = [1.0, 2f64.sqrt()];
        let n = FourierTaylorSeries::linear_action(g, 4, 4, &omega).unwrap();
        let e = FourierTaylorSeries::zero(g, 4, 4).with_term(&[2, -1], &[0, 0], &[], c(1.0, 0.0)).unwrap();
        let br = poisson_bracket(&n, &e).unwrap();
        let kw = 2.0 - 2f64.sqrt();
        assert_eq!(br.len(), 1);
        assert!((br.coeff_of(&[2, -1], &[0, 0], &[]) - c(0.0, kw)).norm() < 1e-15);
    }

    #[test]
    fn canonical_pair_bracket() {
        let g = PhaseGeometry::new(1, 1).unwrap();
        let u2 = FourierTaylorSeries::zero(g, 0, 4).with_term(&[0], &[0], &[2, 0], c(1.0, 0.0)).unwrap();
        let v = FourierTaylorSeries::zero(g, 0, 4).with_term(&[0], &[0], &[0, 1], c(1.0, 0.0)).unwrap();
        let br = poisson_bracket(&u2, &v).unwrap();
        assert_eq!(br.len(), 1);
        assert_eq!(br.coeff_of(&[0], &[0], &[1, 0]), c(2.0, 0.0));
    }

    #[test]
    fn lie_transform_examples() {
        let g = g10();
        let h = FourierTaylorSeries::linear_action(g, 2, 2, &[1.0]).unwrap();
        let f = GeneratingSeries::new(FourierTaylorSeries::zero(g, 1, 2).with_term(&[1], &[0], &[], c(1.0, 0.0)).unwrap()).unwrap();
        assert_eq!(lie_transform(&h, &f, 0.0, 3).unwrap(), h.retruncate(Truncation { kmax: 2, degmax: 2 }));
        let eps = 0.3;
        let out = lie_transform(&h, &f, eps, 2).unwrap();
        // {y, e^{ix}} = i e^{ix}; the next bracket vanishes.
        assert!((out.coeff_of(&[1], &[0], &[]) - c(0.0, eps)).norm() < 1e-15);
        assert_eq!(out.coeff_of(&[0], &[1], &[]), c(1.0, 0.0));
        assert_eq!(out.len(), 2);
        assert!(matches!(lie_transform(&h, &f, eps, 99), Err(Error::OrderCap { .. })));
    }

    #[test]
    fn cutoff_examples() {
        let g = g10();
        let p = FourierTaylorSeries::zero(g, 3, 4).with_term(&[2], &[0], &[], c(1.0, 0.0)).unwrap();
        let (r, t) = cutoff(&p, 1).unwrap();
        assert!(r.is_empty());
        assert_eq!(t, p);
        let p3 = FourierTaylorSeries::zero(g, 3, 4).with_term(&[1], &[3], &[], c(1.0, 0.0)).unwrap();
        let (r, t) = cutoff(&p3, 2).unwrap();
        assert!(r.is_empty());
        assert_eq!(t, p3);
        let gz = PhaseGeometry::new(1, 1).unwrap();
        let lin = FourierTaylorSeries::zero(gz, 2, 3)
            .with_term(&[0], &[0], &[1, 0], c(0.7, 0.0))
            .unwrap()
            .with_term(&[0], &[0], &[0, 1], c(-0.2, 0.0))
            .unwrap();
        let (r, t) = cutoff(&lin, 5).unwrap();
        assert_eq!(r, lin);
        assert!(t.is_empty());
        assert!(cutoff(&lin, 0).is_err());
    }

    #[test]
    fn averaging_examples() {
        let g = g10();
        let e = FourierTaylorSeries::zero(g, 1, 1).with_term(&[1], &[0], &[], c(1.0, 0.0)).unwrap();
        assert!(average_over_angles(&e).is_empty());
        let p = FourierTaylorSeries::zero(g, 1, 1)
            .with_term(&[0], &[1], &[], c(1.0, 0.0))
            .unwrap()
            .with_term(&[1], &[1], &[], c(1.0, 0.0))
            .unwrap();
        let avg = average_over_angles(&p);
        assert_eq!(avg.len(), 1);
        assert_eq!(avg.coeff_of(&[0], &[1], &[]), c(1.0, 0.0));
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let a = FourierTaylorSeries::zero(g10(), 1, 1);
        let b = FourierTaylorSeries::zero(PhaseGeometry::new(2, 0).unwrap(), 1, 1);
        assert!(matches!(poisson_bracket(&a, &b), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn out_of_bounds_term_rejected() {
        let mut s = FourierTaylorSeries::zero(g10(), 1, 1);
        assert!(s.add_kjq(&[2], &[0], &[], c(1.0, 0.0)).is_err());
        assert!(s.add_kjq(&[0], &[2], &[], c(1.0, 0.0)).is_err());
    }

    #[test]
    fn generating_series_shape() {
        let g = PhaseGeometry::new(1, 1).unwrap();
        let bad = FourierTaylorSeries::zero(g, 1, 3).with_term(&[0], &[1], &[0, 0], c(1.0, 0.0)).unwrap();
        assert!(GeneratingSeries::new(bad).is_err());
        let mixed = FourierTaylorSeries::zero(g, 1, 3).with_term(&[1], &[1], &[1, 0], c(1.0, 0.0)).unwrap();
        assert!(GeneratingSeries::new(mixed).is_err());
        let ok = FourierTaylorSeries::zero(g, 1, 3)
            .with_term(&[0], &[0], &[1, 0], c(1.0, 0.0))
            .unwrap()
            .with_term(&[1], &[0], &[1, 1], c(1.0, 0.0))
            .unwrap();
        assert!(GeneratingSeries::new(ok).is_ok());
    }

    #[test]
    fn text_round_trip_is_bit_exact() {
        let g = PhaseGeometry::new(2, 1).unwrap();
        let s = FourierTaylorSeries::zero(g, 3, 4)
            .with_term(&[1, -2], &[0, 1], &[1, 0], c(0.1 + 0.2, -1.0 / 3.0))
            .unwrap()
            .with_term(&[0, 0], &[0, 0], &[0, 2], c(1e-300, 6.02e23))
            .unwrap();
        let back = FourierTaylorSeries::from_text(&s.to_text()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn malformed_text_reports_line() {
        let text = "1 0 2 2\n1 | 0 |  | 1.0\n";
        assert!(matches!(FourierTaylorSeries::from_text(text), Err(Error::Parse { line: 2, .. })));
    }

    // Independent nested-bracket oracle: evaluates ad_F^m(H) by direct
    // differentiation of the closed forms via d_angle / d_poly products.
    fn bracket_by_derivatives(f: &FourierTaylorSeries, g: &FourierTaylorSeries, ctx: Truncation) -> FourierTaylorSeries {
        let geom = f.geometry();
        let mut acc = FourierTaylorSeries::zero_in(geom, ctx);
        for i in 0..geom.d() {
            let a = f.d_poly(i).mul_in(&g.d_angle(i), ctx).unwrap();
            let b = f.d_angle(i).mul_in(&g.d_poly(i), ctx).unwrap();
            acc = acc.try_add(&a.try_sub(&b).unwrap()).unwrap();
        }
        for j in 0..geom.d0() {
            let (iu, iv) = (geom.d() + j, geom.d() + geom.d0() + j);
            let a = f.d_poly(iu).mul_in(&g.d_poly(iv), ctx).unwrap();
            let b = f.d_poly(iv).mul_in(&g.d_poly(iu), ctx).unwrap();
            acc = acc.try_add(&a.try_sub(&b).unwrap()).unwrap();
        }
        acc.retruncate(ctx)
    }

    fn arb_series(geom: PhaseGeometry, kmax: u32, degmax: u32, nterms: usize) -> impl Strategy<Value = FourierTaylorSeries> {
        let n = geom.n_poly();
        let d = geom.d();
        proptest::collection::vec(
            (
                proptest::collection::vec(-(kmax as i32)..=kmax as i32, d),
                proptest::collection::vec(0u32..=degmax, n),
                -1.0f64..1.0,
                -1.0f64..1.0,
            ),
            1..=nterms,
        )
        .prop_map(move |terms| {
            let mut s = FourierTaylorSeries::zero(geom, kmax, degmax);
            for (k, mut pow, re, im) in terms {
                while pow.iter().sum::<u32>() > degmax {
                    let i = pow.iter().position(|&p| p > 0).unwrap();
                    pow[i] -= 1;
                }
                s.add_term(Monomial::new(k, pow), Complex64::new(re, im)).unwrap();
            }
            s
        })
    }

    fn g11() -> PhaseGeometry {
        PhaseGeometry::new(1, 1).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn bracket_antisymmetric_and_matches_derivative_oracle(
            f in arb_series(g11(), 2, 3, 5), g in arb_series(g11(), 2, 3, 5)
        ) {
            let ctx = Truncation { kmax: 4, degmax: 4 };
            let fg = poisson_bracket_in(&f, &g, ctx).unwrap();
            let gf = poisson_bracket_in(&g, &f, ctx).unwrap();
            prop_assert!(close(&fg, &gf.scale_real(-1.0), 1e-12));
            prop_assert!(close(&fg, &bracket_by_derivatives(&f, &g, ctx), 1e-12));
            prop_assert!(poisson_bracket_in(&f, &f, ctx).unwrap().max_abs() < 1e-12);
        }

        #[test]
        fn bracket_bilinear(
            f in arb_series(g11(), 2, 2, 4), g in arb_series(g11(), 2, 2, 4),
            h in arb_series(g11(), 2, 2, 4), a in -2.0f64..2.0
        ) {
            let ctx = Truncation { kmax: 4, degmax: 2 };
            let lhs = poisson_bracket_in(&f.try_add(&g.scale_real(a)).unwrap(), &h, ctx).unwrap();
            let rhs = poisson_bracket_in(&f, &h, ctx).unwrap()
                .try_add(&poisson_bracket_in(&g, &h, ctx).unwrap().scale_real(a)).unwrap();
            prop_assert!(close(&lhs, &rhs, 1e-12));
        }

        #[test]
        fn jacobi_identity(
            f in arb_series(g11(), 1, 2, 3), g in arb_series(g11(), 1, 2, 3), h in arb_series(g11(), 1, 2, 3)
        ) {
            // Wide context: nothing is dropped.
            let ctx = Truncation { kmax: 3, degmax: 6 };
            let b = |a: &FourierTaylorSeries, c: &FourierTaylorSeries| poisson_bracket_in(a, c, ctx).unwrap();
            let sum = b(&f, &b(&g, &h)).try_add(&b(&g, &b(&h, &f))).unwrap().try_add(&b(&h, &b(&f, &g))).unwrap();
            prop_assert!(sum.max_abs() < 1e-11);
        }

        #[test]
        fn leibniz_rule(
            f in arb_series(g11(), 1, 2, 3), g in arb_series(g11(), 1, 2, 3), h in arb_series(g11(), 1, 2, 3)
        ) {
            let ctx = Truncation { kmax: 3, degmax: 6 };
            let gh = g.mul_in(&h, ctx).unwrap();
            let lhs = poisson_bracket_in(&f, &gh, ctx).unwrap();
            let rhs = poisson_bracket_in(&f, &g, ctx).unwrap().mul_in(&h, ctx).unwrap()
                .try_add(&g.mul_in(&poisson_bracket_in(&f, &h, ctx).unwrap(), ctx).unwrap()).unwrap();
            prop_assert!(close(&lhs, &rhs, 1e-11));
        }

        #[test]
        fn cutoff_recombines_exactly(p in arb_series(g11(), 3, 3, 8), kp in 1u32..4) {
            let (r, t) = cutoff(&p, kp).unwrap();
            let mut rec = r.clone();
            for (m, c) in t.terms() {
                prop_assert!(r.coeff(m) == Complex64::default());
                rec.add_term(m.clone(), *c).unwrap();
            }
            prop_assert_eq!(rec.coeffs, p.coeffs);
        }

        #[test]
        fn averaging_is_idempotent_projection(p in arb_series(g11(), 2, 2, 6), q in arb_series(g11(), 0, 1, 2)) {
            let a = average_over_angles(&p);
            prop_assert_eq!(average_over_angles(&a), a.clone());
            // Commutes with multiplication by angle-independent factors.
            let ctx = Truncation { kmax: 2, degmax: 3 };
            let lhs = average_over_angles(&p.mul_in(&q, ctx).unwrap());
            let rhs = a.mul_in(&q, ctx).unwrap();
            prop_assert!(close(&lhs, &rhs, 1e-14));
        }

        #[test]
        fn lie_series_matches_nested_bracket_oracle(
            h in arb_series(g11(), 1, 2, 3), f in arb_series(g11(), 1, 2, 2), eps in -0.5f64..0.5
        ) {
            let ctx = Truncation { kmax: 4, degmax: 3 };
            let got = lie_series_in(&h, &f, eps, 3, ctx).unwrap();
            let mut expect = h.retruncate(ctx);
            let mut nested = h.retruncate(ctx);
            let mut fact = 1.0;
            for m in 1..=3 {
                nested = bracket_by_derivatives(&nested, &f, ctx);
                fact *= m as f64;
                expect = expect.try_add(&nested.scale_real(eps.powi(m) / fact)).unwrap();
            }
            prop_assert!(close(&got, &expect, 1e-11));
        }

        #[test]
        fn real_part_is_real(p in arb_series(g11(), 2, 2, 5)) {
            prop_assert!(p.real_part().is_real(1e-15));
        }
    }
}
