//! Approximation functions Δ, the extremal function Γ_{r,n}(η) with its
//! integral bound, and a Gevrey-type majorant norm on truncated series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{poisson_bracket, FourierTaylorSeries};

/// Built-in and tabulated Δ families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DeltaFamily {
    /// `(1+t)^a · log^b(e+t)`.
    PowerLog { a: f64, b: f64 },
    /// `exp(t^β)` with `β < 1/α`.
    SubgevreyExp { beta: f64 },
    /// Monotone samples `(t_i, Δ_i)` joined by monotone cubic interpolation;
    /// beyond the last node the last log-log slope is continued.
    Tabulated { t: Vec<f64>, values: Vec<f64> },
    /// `Δ ≡ 1`; not admissible, kept for degenerate checks of Γ.
    Unit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApproximationFunction {
    pub alpha: f64,
    pub varsigma: f64,
    pub family: DeltaFamily,
    #[serde(skip)]
    slopes: Vec<f64>,
}

/// Sampling and quadrature settings for admissibility checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityConfig {
    pub nodes_per_decade: usize,
    pub t_max: f64,
    pub quad_rel_tol: f64,
}

impl Default for AdmissibilityConfig {
    fn default() -> Self {
        AdmissibilityConfig { nodes_per_decade: 64, t_max: 1e6, quad_rel_tol: 1e-9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub starts_at_least_one: bool,
    pub strictly_increasing: bool,
    pub unbounded: bool,
    /// `log Δ(t) / t^{1/α}` is non-increasing after its sampled maximum and
    /// ends strictly below it.
    pub ratio_eventually_decreasing: bool,
    pub ratio_argmax: f64,
    /// `∫_ς^∞ log Δ(t) / t^{1+1/α} dt`, `None` when the quadrature diverges.
    pub integral: Option<f64>,
}

impl AdmissibilityReport {
    pub fn admissible(&self) -> bool {
        self.starts_at_least_one
            && self.strictly_increasing
            && self.unbounded
            && self.ratio_eventually_decreasing
            && self.integral.is_some()
    }
}

fn pchip_slopes(t: &[f64], v: &[f64]) -> Vec<f64> {
    let n = t.len();
    let h: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    let del: Vec<f64> = (0..n - 1).map(|i| (v[i + 1] - v[i]) / h[i]).collect();
    let mut m = vec![0.0; n];
    if n == 2 {
        m[0] = del[0];
        m[1] = del[0];
        return m;
    }
    for i in 1..n - 1 {
        if del[i - 1] * del[i] > 0.0 {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            m[i] = (w1 + w2) / (w1 / del[i - 1] + w2 / del[i]);
        }
    }
    let end = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            0.0
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            3.0 * d0
        } else {
            s
        }
    };
    m[0] = end(h[0], h[1], del[0], del[1]);
    m[n - 1] = end(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
    m
}

impl ApproximationFunction {
    pub fn new(alpha: f64, varsigma: f64, family: DeltaFamily) -> Result<Self> {
        if !(alpha > 1.0) {
            return Err(Error::InvalidInput(format!("Gevrey index must exceed 1, got {alpha}")));
        }
        if !(varsigma > 0.0) {
            return Err(Error::InvalidInput("lower cutoff ς must be positive".into()));
        }
        let mut slopes = Vec::new();
        match &family {
            DeltaFamily::PowerLog { a, b } => {
                if *a < 0.0 || *b < 0.0 || (*a == 0.0 && *b == 0.0) {
                    return Err(Error::InvalidInput("power_log needs a, b >= 0, not both zero".into()));
                }
            }
            DeltaFamily::SubgevreyExp { beta } => {
                if !(*beta > 0.0 && *beta < 1.0 / alpha) {
                    return Err(Error::InvalidInput(format!("subgevrey_exp needs 0 < β < 1/α, got β = {beta}")));
                }
            }
            DeltaFamily::Tabulated { t, values } => {
                if t.len() < 3 || t.len() != values.len() {
                    return Err(Error::InvalidInput("tabulated Δ needs >= 3 matching samples".into()));
                }
                if t[0] != 0.0 || t.windows(2).any(|w| w[1] <= w[0]) || values.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::InvalidInput("tabulated Δ must start at t = 0 and be strictly increasing".into()));
                }
                slopes = pchip_slopes(t, values);
            }
            DeltaFamily::Unit => {}
        }
        Ok(ApproximationFunction { alpha, varsigma, family, slopes })
    }

    pub fn power_log(alpha: f64, a: f64, b: f64) -> Result<Self> {
        Self::new(alpha, 1.0, DeltaFamily::PowerLog { a, b })
    }

    pub fn subgevrey_exp(alpha: f64, beta: f64) -> Result<Self> {
        Self::new(alpha, 1.0, DeltaFamily::SubgevreyExp { beta })
    }

    pub fn unit(alpha: f64) -> Result<Self> {
        Self::new(alpha, 1.0, DeltaFamily::Unit)
    }

    /// `log Δ(t)` for `t ≥ 0`.
    pub fn log_eval(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        match &self.family {
            DeltaFamily::PowerLog { a, b } => a * t.ln_1p() + b * (std::f64::consts::E + t).ln().ln(),
            DeltaFamily::SubgevreyExp { beta } => t.powf(*beta),
            DeltaFamily::Unit => 0.0,
            DeltaFamily::Tabulated { .. } => self.eval(t).ln(),
        }
    }

    pub fn eval(&self, t: f64) -> f64 {
        let t = t.max(0.0);
        match &self.family {
            DeltaFamily::Tabulated { t: ts, values } => {
                let n = ts.len();
                if t >= ts[n - 1] {
                    let slope = (values[n - 1] / values[n - 2]).ln() / (ts[n - 1] / ts[n - 2]).ln();
                    return values[n - 1] * (t / ts[n - 1]).powf(slope);
                }
                let i = ts.partition_point(|&x| x <= t) - 1;
                let h = ts[i + 1] - ts[i];
                let s = (t - ts[i]) / h;
                let h00 = (1.0 + 2.0 * s) * (1.0 - s) * (1.0 - s);
                let h10 = s * (1.0 - s) * (1.0 - s);
                let h01 = s * s * (3.0 - 2.0 * s);
                let h11 = s * s * (s - 1.0);
                h00 * values[i] + h10 * h * self.slopes[i] + h01 * values[i + 1] + h11 * h * self.slopes[i + 1]
            }
            _ => self.log_eval(t).exp(),
        }
    }

    /// Smallest `t ≥ 0` with `Δ(t) ≥ y`, by bisection (0 when `y ≤ Δ(0)`).
    pub fn inverse(&self, y: f64) -> Result<f64> {
        if y <= self.eval(0.0) {
            return Ok(0.0);
        }
        let mut hi = 1.0;
        while self.eval(hi) < y {
            hi *= 2.0;
            if hi > 1e300 {
                return Err(Error::Divergent(format!("Δ never reaches {y}")));
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.eval(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * hi {
                break;
            }
        }
        Ok(hi)
    }

    fn grid(&self, cfg: &AdmissibilityConfig) -> Vec<f64> {
        let decades = (cfg.t_max / self.varsigma).log10();
        let n = (decades * cfg.nodes_per_decade as f64).ceil().max(1.0) as usize;
        (0..=n).map(|i| self.varsigma * 10f64.powf(decades * i as f64 / n as f64)).collect()
    }

    /// Sampled admissibility checks and the integral of condition (ac).
    pub fn check_admissible(&self, cfg: &AdmissibilityConfig) -> AdmissibilityReport {
        let grid = self.grid(cfg);
        let vals: Vec<f64> = grid.iter().map(|&t| self.eval(t)).collect();
        let strictly_increasing = self.eval(0.0) < vals[0] && vals.windows(2).all(|w| w[1] > w[0]);
        let last = *grid.last().unwrap();
        let unbounded = self.eval(last) > self.eval(last / 10.0) && self.eval(10.0 * last) > self.eval(last);
        let ratio: Vec<f64> = grid.iter().map(|&t| self.log_eval(t) / t.powf(1.0 / self.alpha)).collect();
        let (imax, rmax) = ratio.iter().enumerate().fold((0, f64::MIN), |acc, (i, &r)| if r > acc.1 { (i, r) } else { acc });
        let ratio_eventually_decreasing =
            ratio[imax..].windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)) && *ratio.last().unwrap() < rmax && imax + 1 < ratio.len();
        let integral = self.tail_integral(self.varsigma, |t| self.log_eval(t), cfg.quad_rel_tol).ok();
        AdmissibilityReport {
            starts_at_least_one: self.eval(0.0) >= 1.0,
            strictly_increasing,
            unbounded,
            ratio_eventually_decreasing,
            ratio_argmax: grid[imax],
            integral,
        }
    }

    pub fn ensure_admissible(&self, cfg: &AdmissibilityConfig) -> Result<AdmissibilityReport> {
        let rep = self.check_admissible(cfg);
        if rep.admissible() {
            Ok(rep)
        } else {
            Err(Error::InvalidInput(format!("approximation function is not admissible: {rep:?}")))
        }
    }

    /// `∫_T^∞ g(t) / t^{1+1/α} dt` for a slowly growing `g`, integrated per
    /// decade in `s = ln t` with a geometric tail from the decade ratios.
    pub fn tail_integral<G: Fn(f64) -> f64>(&self, t0: f64, g: G, rel_tol: f64) -> Result<f64> {
        if !(t0 > 0.0) {
            return Err(Error::Quadrature("lower limit must be positive".into()));
        }
        let inv_a = 1.0 / self.alpha;
        let f = |s: f64| {
            let t = s.exp();
            g(t) * (-s * inv_a).exp()
        };
        let step = std::f64::consts::LN_10;
        let mut s = t0.ln();
        let mut total = 0.0;
        let mut prev: Option<f64> = None;
        let mut ratios: Vec<f64> = Vec::new();
        for _ in 0..600 {
            let piece = adaptive_simpson(&f, s, s + step, rel_tol * 1e-2, 40);
            total += piece;
            if let Some(p) = prev {
                if p > 0.0 {
                    ratios.push(piece / p);
                }
            }
            prev = Some(piece);
            s += step;
            if let Some(&r) = ratios.last() {
                if r < 1.0 && piece.abs() * r / (1.0 - r) <= rel_tol * total.abs() {
                    return Ok(total + piece * r / (1.0 - r));
                }
            }
            if s > 690.0 {
                break;
            }
        }
        match ratios.last() {
            Some(&r) if r < 1.0 => Ok(total + prev.unwrap() * r / (1.0 - r)),
            _ => Err(Error::Divergent("integral of log Δ / t^{1+1/α} does not converge".into())),
        }
    }
}

fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: usize) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let diff = left + right - whole;
        if depth == 0 || diff.abs() <= 15.0 * tol {
            return left + right + diff / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = simpson(fa, fm, fb, a, b);
    let tol = (tol * whole.abs()).max(1e-300);
    rec(f, a, b, fa, fm, fb, whole, tol, depth)
}

/// `log[(1+t)^r Δ(t)^n e^{−η t^{1/α}}]`.
fn gamma_log_objective(r: u32, n: u32, eta: f64, delta: &ApproximationFunction, t: f64) -> f64 {
    let mut g = -eta * t.powf(1.0 / delta.alpha);
    if r > 0 {
        g += r as f64 * t.ln_1p();
    }
    if n > 0 {
        g += n as f64 * delta.log_eval(t);
    }
    g
}

/// `log Γ_{r,n}(η)` together with the maximizing `t`.
pub fn log_gamma_extremal(r: u32, n: u32, eta: f64, delta: &ApproximationFunction) -> Result<(f64, f64)> {
    if !(eta > 0.0) {
        return Err(Error::InvalidInput("η must be positive".into()));
    }
    let obj = |t: f64| gamma_log_objective(r, n, eta, delta, t);
    // Coarse geometric grid in s = ln t, extended until the objective has
    // clearly turned down.
    let per_decade = 32usize;
    let mut ts: Vec<f64> = vec![0.0];
    let mut vals: Vec<f64> = vec![obj(0.0)];
    let mut s = (1e-8f64).ln();
    let ds = std::f64::consts::LN_10 / per_decade as f64;
    let mut best = vals[0];
    let mut decreasing_run = 0usize;
    loop {
        let t = s.exp();
        let v = obj(t);
        if !v.is_finite() {
            return Err(Error::Divergent(format!("Γ objective not finite at t = {t:e}")));
        }
        if v > best {
            best = v;
        }
        decreasing_run = if v < *vals.last().unwrap() { decreasing_run + 1 } else { 0 };
        ts.push(t);
        vals.push(v);
        if t > 10.0 && decreasing_run >= 4 * per_decade && v < best - 50.0 {
            break;
        }
        s += ds;
        if s > 690.0 {
            return Err(Error::Divergent("Γ supremum not attained below t = 1e300".into()));
        }
    }
    // Multi-start golden-section refinement around the best grid local maxima.
    let mut peaks: Vec<usize> =
        (0..vals.len()).filter(|&i| (i == 0 || vals[i] >= vals[i - 1]) && (i + 1 == vals.len() || vals[i] >= vals[i + 1])).collect();
    peaks.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).unwrap());
    peaks.truncate(8);
    let mut best_t = ts[peaks[0]];
    let mut best_v = vals[peaks[0]];
    for &i in &peaks {
        if i == 0 {
            continue;
        }
        let lo = ts[i - 1].max(1e-300).ln();
        let hi = if i + 1 < ts.len() { ts[i + 1].ln() } else { ts[i].ln() + ds };
        let f = |s: f64| obj(s.exp());
        let (sm, vm) = golden_max(&f, lo, hi, 1e-13);
        if vm > best_v {
            best_v = vm;
            best_t = sm.exp();
        }
        if i == 1 {
            // The peak may sit between 0 and the first positive node.
            let (tm, vm) = golden_max(&obj, 0.0, ts[2], 1e-15);
            if vm > best_v {
                best_v = vm;
                best_t = tm;
            }
        }
    }
    Ok((best_v, best_t))
}

fn golden_max<F: Fn(f64) -> f64>(f: &F, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..300 {
        if (b - a).abs() <= tol * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

/// `Γ_{r,n}(η) = sup_{t≥0} (1+t)^r Δ(t)^n e^{−η t^{1/α}}`.
pub fn gamma_extremal(r: u32, n: u32, eta: f64, delta: &ApproximationFunction) -> Result<f64> {
    let (lv, _) = log_gamma_extremal(r, n, eta, delta)?;
    let v = lv.exp();
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Divergent(format!("Γ overflows (log value {lv})")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaBound {
    pub a: f64,
    pub c: f64,
    pub eta: f64,
    pub bound: f64,
    pub log_bound: f64,
}

/// Constants of the Γ bound: `a`, `c` from the integrals over `[T, ∞)`,
/// `η = n a + r c` and `bound = e^{η T^{1/α}}`.
pub fn lemma_ba_bound(delta: &ApproximationFunction, kappa: f64, t_lower: f64, n: u32, r: u32) -> Result<LemmaBound> {
    if !(kappa > 1.0 && kappa <= 2.0) {
        return Err(Error::InvalidInput(format!("κ must lie in (1, 2], got {kappa}")));
    }
    if t_lower < delta.varsigma {
        return Err(Error::InvalidInput(format!("T = {t_lower} is below ς = {}", delta.varsigma)));
    }
    let tol = 1e-11;
    let lk = kappa.ln();
    let a = if n > 0 { delta.tail_integral(t_lower, |t| delta.log_eval(t), tol)? / lk } else { 0.0 };
    let c = if r > 0 { delta.tail_integral(t_lower, |t| t.ln_1p(), tol)? / lk } else { 0.0 };
    let eta = n as f64 * a + r as f64 * c;
    let log_bound = eta * t_lower.powf(1.0 / delta.alpha);
    Ok(LemmaBound { a, c, eta, bound: log_bound.exp(), log_bound })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GevreyWeights {
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
}

impl GevreyWeights {
    pub fn new(rho: f64, sigma: f64, alpha: f64) -> Result<Self> {
        if !(rho >= 0.0 && sigma >= 0.0) {
            return Err(Error::InvalidInput("weights ρ, σ must be non-negative".into()));
        }
        if !(alpha > 1.0) {
            return Err(Error::InvalidInput("Gevrey index must exceed 1".into()));
        }
        Ok(GevreyWeights { rho, sigma, alpha })
    }
}

/// `Σ |c_{kjq}| e^{ρ|k|₁^{1/α}} radius^{|j|+|q|} e^{σ(|j|+|q|)^{1/α}}`.
pub fn majorant_norm(f: &FourierTaylorSeries, w: &GevreyWeights, radius: f64) -> f64 {
    let ia = 1.0 / w.alpha;
    f.terms()
        .map(|(m, c)| {
            let k = m.k_l1() as f64;
            let deg = m.degree() as f64;
            c.norm() * (w.rho * k.powf(ia)).exp() * radius.powf(deg) * (w.sigma * deg.powf(ia)).exp()
        })
        .sum()
}

/// `‖{f,g}‖_{w'} (ρ−ρ')(σ−σ') / (‖f‖_w ‖g‖_w)`: the constant that the
/// bracket inequality needs for this pair.
pub fn bracket_constant(
    f: &FourierTaylorSeries,
    g: &FourierTaylorSeries,
    w: &GevreyWeights,
    w_inner: &GevreyWeights,
    radius: f64,
) -> Result<f64> {
    if !(w_inner.rho < w.rho && w_inner.sigma < w.sigma) {
        return Err(Error::InvalidInput("inner weights must be strictly smaller".into()));
    }
    let nf = majorant_norm(f, w, radius);
    let ng = majorant_norm(g, w, radius);
    if nf == 0.0 || ng == 0.0 {
        return Ok(0.0);
    }
    let br = poisson_bracket(f, g)?;
    Ok(majorant_norm(&br, w_inner, radius) * (w.rho - w_inner.rho) * (w.sigma - w_inner.sigma) / (nf * ng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{Monomial, PhaseGeometry};
    use num_complex::Complex64;
    use proptest::prelude::*;

    fn dense_grid_max<F: Fn(f64) -> f64>(f: F, t_max: f64, n: usize) -> f64 {
        (0..=n).map(|i| f(t_max * i as f64 / n as f64)).fold(f64::MIN, f64::max)
    }

    #[test]
    fn unit_delta_gives_one_at_zero() {
        let d = ApproximationFunction::unit(2.0).unwrap();
        let (lv, t) = log_gamma_extremal(0, 1, 0.7, &d).unwrap();
        assert_eq!(lv, 0.0);
        assert_eq!(t, 0.0);
    }

    #[test]
    fn gamma_matches_dense_grid_oracle() {
        let d = ApproximationFunction::unit(2.0).unwrap();
        let got = gamma_extremal(1, 0, 1.0, &d).unwrap();
        let oracle = dense_grid_max(|t| (1.0 + t) * (-t.sqrt()).exp(), 20.0, 2_000_000);
        assert!((got - oracle).abs() <= 1e-8 * oracle, "{got} vs {oracle}");
        // The log-derivative 1/(1+t) − 1/(2√t) is never positive, so the
        // supremum sits at t = 0.
        assert_eq!(got, 1.0);
    }

    #[test]
    fn power_log_gamma_matches_dense_grid_oracle() {
        let d = ApproximationFunction::power_log(2.0, 2.0, 1.0).unwrap();
        let got = gamma_extremal(1, 1, 0.8, &d).unwrap();
        let oracle = dense_grid_max(|t| (1.0 + t) * d.eval(t) * (-0.8 * t.sqrt()).exp(), 400.0, 4_000_000);
        assert!((got - oracle).abs() <= 1e-8 * oracle, "{got} vs {oracle}");
    }

    #[test]
    fn closed_form_integral_constant() {
        let d = ApproximationFunction::subgevrey_exp(2.0, 0.25).unwrap();
        let lb = lemma_ba_bound(&d, 2.0, 1.0, 1, 0).unwrap();
        let exact = 4.0 / 2f64.ln();
        assert!((lb.a - exact).abs() < 1e-9 * exact, "{} vs {exact}", lb.a);
        assert!((lb.eta - exact).abs() < 1e-9 * exact);
    }

    #[test]
    fn trivial_bound_for_zero_orders() {
        let d = ApproximationFunction::power_log(2.0, 1.0, 0.0).unwrap();
        let lb = lemma_ba_bound(&d, 1.5, 1.0, 0, 0).unwrap();
        assert_eq!(lb.eta, 0.0);
        assert_eq!(lb.bound, 1.0);
        let unit = ApproximationFunction::unit(2.0).unwrap();
        for eta in [1e-1, 1e-3, 1e-6] {
            assert_eq!(gamma_extremal(0, 0, eta, &unit).unwrap(), 1.0);
        }
    }

    #[test]
    fn bound_monotone_in_t() {
        let d = ApproximationFunction::power_log(2.0, 2.0, 1.0).unwrap();
        let b1 = lemma_ba_bound(&d, 2.0, 1.0, 1, 1).unwrap();
        let b2 = lemma_ba_bound(&d, 2.0, 10.0, 1, 1).unwrap();
        assert!(b2.a < b1.a);
        assert!(b2.bound > b1.bound);
    }

    #[test]
    fn lemma_bound_dominates() {
        for d in [ApproximationFunction::power_log(2.0, 2.0, 1.0).unwrap(), ApproximationFunction::subgevrey_exp(2.0, 0.25).unwrap()] {
            for (n, r) in [(1, 0), (1, 1), (2, 3)] {
                let lb = lemma_ba_bound(&d, 2.0, 10.0, n, r).unwrap();
                let (lg, _) = log_gamma_extremal(r, n, lb.eta, &d).unwrap();
                assert!(lg <= lb.log_bound + 1e-8, "{lg} > {}", lb.log_bound);
            }
        }
    }

    #[test]
    fn admissibility_of_builtins() {
        let cfg = AdmissibilityConfig::default();
        for d in [
            ApproximationFunction::power_log(2.0, 2.0, 1.0).unwrap(),
            ApproximationFunction::power_log(1.5, 3.0, 0.0).unwrap(),
            ApproximationFunction::subgevrey_exp(3.0, 0.15).unwrap(),
        ] {
            let rep = d.check_admissible(&cfg);
            assert!(rep.admissible(), "{rep:?}");
        }
        let rep = ApproximationFunction::unit(2.0).unwrap().check_admissible(&cfg);
        assert!(!rep.admissible());
        assert!(ApproximationFunction::subgevrey_exp(2.0, 0.6).is_err());
    }

    #[test]
    fn tabulated_interpolation_is_monotone() {
        let ts: Vec<f64> = (0..40).map(|i| if i == 0 { 0.0 } else { 1.5f64.powi(i - 1) }).collect();
        let vs: Vec<f64> = ts.iter().map(|t| (1.0 + t) * (1.0 + t)).collect();
        let d = ApproximationFunction::new(2.0, 1.0, DeltaFamily::Tabulated { t: ts.clone(), values: vs.clone() }).unwrap();
        for (t, v) in ts.iter().zip(&vs) {
            assert!((d.eval(*t) - v).abs() <= 1e-12 * v);
        }
        let mut prev = d.eval(0.0);
        for i in 1..20_000 {
            let x = i as f64 * 0.05;
            let y = d.eval(x);
            assert!(y >= prev);
            prev = y;
        }
        assert!(d.check_admissible(&AdmissibilityConfig::default()).admissible());
    }

    #[test]
    fn inverse_round_trips() {
        let d = ApproximationFunction::power_log(2.0, 2.0, 1.0).unwrap();
        for t in [0.5, 3.0, 170.0] {
            let back = d.inverse(d.eval(t)).unwrap();
            assert!((back - t).abs() < 1e-9 * t.max(1.0));
        }
    }

    #[test]
    fn majorant_examples() {
        let g = PhaseGeometry::new(2, 0).unwrap();
        let w = GevreyWeights::new(0.7, 0.3, 2.0).unwrap();
        let e = FourierTaylorSeries::zero(g, 2, 2).with_term(&[1, 0], &[0, 0], &[], Complex64::new(1.0, 0.0)).unwrap();
        assert!((majorant_norm(&e, &w, 1.0) - 0.7f64.exp()).abs() < 1e-15);
        assert_eq!(majorant_norm(&FourierTaylorSeries::zero(g, 2, 2), &w, 1.0), 0.0);
    }

    fn arb(geom: PhaseGeometry) -> impl Strategy<Value = FourierTaylorSeries> {
        proptest::collection::vec((-2i32..=2, 0u32..=2, 0u32..=1, 0u32..=1, -1.0f64..1.0, -1.0f64..1.0), 1..6).prop_map(move |terms| {
            let mut s = FourierTaylorSeries::zero(geom, 2, 4);
            for (k, j, u, v, re, im) in terms {
                s.add_term(Monomial::new(vec![k], vec![j, u, v]), Complex64::new(re, im)).unwrap();
            }
            s
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn gamma_monotonicity(eta in 0.2f64..3.0, r in 0u32..3, n in 0u32..3) {
            let d = ApproximationFunction::power_log(2.0, 1.5, 1.0).unwrap();
            let g = |r, n, e| log_gamma_extremal(r, n, e, &d).unwrap().0;
            let base = g(r, n, eta);
            prop_assert!(g(r, n, eta * 1.3) <= base + 1e-9);
            prop_assert!(g(r + 1, n, eta) >= base - 1e-9);
            prop_assert!(g(r, n + 1, eta) >= base - 1e-9);
        }

        #[test]
        fn majorant_is_a_norm(f in arb(PhaseGeometry::new(1, 1).unwrap()), g in arb(PhaseGeometry::new(1, 1).unwrap()), a in -3.0f64..3.0) {
            let w = GevreyWeights::new(0.5, 0.5, 2.0).unwrap();
            let nf = majorant_norm(&f, &w, 1.2);
            let ng = majorant_norm(&g, &w, 1.2);
            prop_assert!((majorant_norm(&f.scale_real(a), &w, 1.2) - a.abs() * nf).abs() <= 1e-12 * (1.0 + nf));
            prop_assert!(majorant_norm(&f.try_add(&g).unwrap(), &w, 1.2) <= nf + ng + 1e-12);
        }

        #[test]
        fn bracket_constant_is_finite(f in arb(PhaseGeometry::new(1, 1).unwrap()), g in arb(PhaseGeometry::new(1, 1).unwrap())) {
            let w = GevreyWeights::new(1.0, 1.0, 2.0).unwrap();
            let wi = GevreyWeights::new(0.5, 0.5, 2.0).unwrap();
            let c = bracket_constant(&f, &g, &w, &wi, 1.0).unwrap();
            prop_assert!(c.is_finite() && c >= 0.0);
            prop_assert!(c < 50.0, "constant {}", c);
        }
    }
}
