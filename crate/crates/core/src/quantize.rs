//! Quantization formula: predicted eigenvalues from a normal form, the
//! exponentially small remainder bound and the action index set.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kam::NormalFormState;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct QuantumNumbers {
    pub n_y: Vec<i64>,
    pub n_u: Vec<u32>,
    pub n_v: Vec<u32>,
    pub maslov: Vec<u32>,
}

/// How the resonant quadratic form `(ε/2)⟨z, M z⟩` is quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResonantScaling {
    /// `(ε/2)(Σ λ_j (n_u + ½) + Σ λ̃_j (n_v + ½))`.
    #[default]
    Direct,
    /// Weyl quantization of `(ε/2)(⟨u,Uu⟩ + ⟨v,Vv⟩)`: `ε h Σ ν_j (n_j + ½)`
    /// with `ν_j² ∈ spec(UV)`; `n_v` is fixed at zero.
    OscillatorStandard,
}

/// Reading of the remainder exponent `exp(−c h^{±1/(α−1)})`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ExponentReading {
    #[default]
    NegativePower,
    PositivePower,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RemainderConstants {
    pub c: f64,
    pub big_c: f64,
    pub reading: ExponentReading,
}

impl Default for RemainderConstants {
    fn default() -> Self {
        RemainderConstants { c: 1.0, big_c: 1.0, reading: ExponentReading::NegativePower }
    }
}

/// `C ε exp(−c h^{∓1/(α−1)})`.
pub fn remainder_bound(h: f64, epsilon: f64, alpha: f64, k: &RemainderConstants) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::InvalidInput("Gevrey index must exceed 1".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidInput("h must be positive".into()));
    }
    let e = 1.0 / (alpha - 1.0);
    let p = match k.reading {
        ExponentReading::NegativePower => h.powf(-e),
        ExponentReading::PositivePower => h.powf(e),
    };
    Ok(k.big_c * epsilon.abs() * (-k.c * p).exp())
}

/// `ln(C^{n+1} n!^{α−1} δ^n)`.
pub fn log_remainder_term(n: u32, big_c: f64, delta: f64, alpha: f64) -> f64 {
    let lfact: f64 = (2..=n).map(|i| (i as f64).ln()).sum();
    (n as f64 + 1.0) * big_c.ln() + (alpha - 1.0) * lfact + n as f64 * delta.ln()
}

/// Minimizer of `C^{n+1} n!^{α−1} δ^n` over `0 ≤ n ≤ nmax`.
pub fn optimal_n_bruteforce(big_c: f64, delta: f64, alpha: f64, nmax: u32) -> u32 {
    let mut best = (0, f64::INFINITY);
    for n in 0..=nmax {
        let v = log_remainder_term(n, big_c, delta, alpha);
        if v < best.1 {
            best = (n, v);
        }
    }
    best.0
}

/// Stirling stationary point `n* = (Cδ)^{−1/(α−1)}`.
pub fn optimal_n_stirling(big_c: f64, delta: f64, alpha: f64) -> f64 {
    (big_c * delta).powf(-1.0 / (alpha - 1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEntry {
    pub qn: QuantumNumbers,
    pub energy: f64,
    pub cluster_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPrediction {
    pub entries: Vec<SpectrumEntry>,
    pub epsilon: f64,
    pub h: f64,
    pub remainder_bound: f64,
    pub lambdas: Vec<f64>,
    pub lambdas_tilde: Vec<f64>,
    /// Oscillator frequencies `ν_j` (`√spec(UV)`), ascending.
    pub nus: Vec<f64>,
    /// Norm of the discarded `u`–`v` coupling block of `M_p`.
    pub cross_block_norm: f64,
    pub scaling: ResonantScaling,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBounds {
    pub ny_min: Vec<i64>,
    pub ny_max: Vec<i64>,
    /// Largest resonant quantum number per component.
    pub nres_max: u32,
    pub window: Option<(f64, f64)>,
}

pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::InvalidInput("matrix must be square".into()));
    }
    if m.nrows() == 0 {
        return Ok(Vec::new());
    }
    if (m - m.transpose()).abs().max() > 1e-12 * (1.0 + m.abs().max()) {
        return Err(Error::InvalidInput("quadratic matrix is not symmetric".into()));
    }
    let mut ev: Vec<f64> = SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// `ν_j = √spec(UV)` for symmetric positive definite `U`, `V`.
pub fn oscillator_frequencies(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = u.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    // spec(UV) = spec(V^{1/2} U V^{1/2}), which is symmetric.
    let se = SymmetricEigen::new(v.clone());
    if se.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::InvalidInput("V must be positive definite for the oscillator scaling".into()));
    }
    let sq = &se.eigenvectors * DMatrix::from_diagonal(&se.eigenvalues.map(f64::sqrt)) * se.eigenvectors.transpose();
    let s = &sq * u * &sq;
    let ev = sym_eigenvalues(&((&s + s.transpose()) * 0.5))?;
    if ev.iter().any(|&l| l <= 0.0) {
        return Err(Error::InvalidInput("U must be positive definite for the oscillator scaling".into()));
    }
    Ok(ev.into_iter().map(f64::sqrt).collect())
}

fn odometer(mins: &[i64], maxs: &[i64]) -> Vec<Vec<i64>> {
    let mut out = Vec::new();
    if mins.iter().zip(maxs).any(|(a, b)| a > b) {
        return out;
    }
    let mut cur = mins.to_vec();
    loop {
        out.push(cur.clone());
        let mut i = cur.len();
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < maxs[i] {
                cur[i] += 1;
                for c in cur.iter_mut().skip(i + 1).zip(mins.iter().skip(i + 1)) {
                    *c.0 = *c.1;
                }
                break;
            }
        }
    }
}

/// Enumerates the quantization formula over `bounds`, sorted by energy.
pub fn predict_spectrum(
    state: &NormalFormState,
    h: f64,
    epsilon: f64,
    maslov: &[u32],
    bounds: &SpectrumBounds,
    scaling: ResonantScaling,
    alpha: f64,
    rc: &RemainderConstants,
) -> Result<SpectrumPrediction> {
    let d = state.geometry.d();
    let d0 = state.geometry.d0();
    if maslov.len() != d || bounds.ny_min.len() != d || bounds.ny_max.len() != d {
        return Err(Error::GeometryMismatch("quantum number dimensions do not match the geometry".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidInput("h must be positive".into()));
    }
    let m = state.m_p();
    sym_eigenvalues(&m)?;
    let u = m.view((0, 0), (d0, d0)).into_owned();
    let v = m.view((d0, d0), (d0, d0)).into_owned();
    let cross_block_norm = m.view((0, d0), (d0, d0)).norm();
    let lambdas = sym_eigenvalues(&u)?;
    let lambdas_tilde = sym_eigenvalues(&v)?;
    let nus = match scaling {
        ResonantScaling::OscillatorStandard => oscillator_frequencies(&u, &v)?,
        ResonantScaling::Direct => Vec::new(),
    };
    let omega = state.omega_p();
    let offset = state.eps_p();
    let nres = bounds.nres_max as i64;
    let res_states: Vec<(Vec<u32>, Vec<u32>, f64)> = match scaling {
        ResonantScaling::Direct => odometer(&vec![0; 2 * d0], &vec![nres; 2 * d0])
            .into_iter()
            .map(|n| {
                let nu: Vec<u32> = n[..d0].iter().map(|&x| x as u32).collect();
                let nv: Vec<u32> = n[d0..].iter().map(|&x| x as u32).collect();
                let e = 0.5
                    * epsilon
                    * (lambdas.iter().zip(&nu).map(|(l, &k)| l * (k as f64 + 0.5)).sum::<f64>()
                        + lambdas_tilde.iter().zip(&nv).map(|(l, &k)| l * (k as f64 + 0.5)).sum::<f64>());
                (nu, nv, e)
            })
            .collect(),
        ResonantScaling::OscillatorStandard => odometer(&vec![0; d0], &vec![nres; d0])
            .into_iter()
            .map(|n| {
                let nu: Vec<u32> = n.iter().map(|&x| x as u32).collect();
                let e = epsilon * h * nus.iter().zip(&nu).map(|(l, &k)| l * (k as f64 + 0.5)).sum::<f64>();
                (nu, vec![0; d0], e)
            })
            .collect(),
    };
    let mut entries = Vec::new();
    for (cid, ny) in odometer(&bounds.ny_min, &bounds.ny_max).into_iter().enumerate() {
        let torus: f64 = h * omega.iter().zip(&ny).zip(maslov).map(|((w, &n), &t)| w * (n as f64 + t as f64 / 4.0)).sum::<f64>();
        for (nu, nv, eres) in &res_states {
            let energy = offset + torus + eres;
            if let Some((lo, hi)) = bounds.window {
                if energy < lo || energy > hi {
                    continue;
                }
            }
            entries.push(SpectrumEntry {
                qn: QuantumNumbers { n_y: ny.clone(), n_u: nu.clone(), n_v: nv.clone(), maslov: maslov.to_vec() },
                energy,
                cluster_id: cid,
            });
        }
    }
    entries.sort_by(|a, b| a.energy.total_cmp(&b.energy).then_with(|| a.qn.cmp(&b.qn)));
    Ok(SpectrumPrediction {
        entries,
        epsilon,
        h,
        remainder_bound: remainder_bound(h, epsilon, alpha, rc)?,
        lambdas,
        lambdas_tilde,
        nus,
        cross_block_norm,
        scaling,
    })
}

impl SpectrumPrediction {
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        if let Some(e) = self.entries.first() {
            let mut cols = Vec::new();
            cols.extend((0..e.qn.n_y.len()).map(|i| format!("n_y{i}")));
            cols.extend((0..e.qn.n_u.len()).map(|i| format!("n_u{i}")));
            cols.extend((0..e.qn.n_v.len()).map(|i| format!("n_v{i}")));
            cols.extend(["E".to_string(), "cluster_id".into(), "remainder_bound".into()]);
            s.push_str(&cols.join(","));
            s.push('\n');
        }
        for e in &self.entries {
            let mut row: Vec<String> = e.qn.n_y.iter().map(|v| v.to_string()).collect();
            row.extend(e.qn.n_u.iter().map(|v| v.to_string()));
            row.extend(e.qn.n_v.iter().map(|v| v.to_string()));
            row.push(format!("{:.17e}", e.energy));
            row.push(e.cluster_id.to_string());
            row.push(format!("{:.17e}", self.remainder_bound));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// A compact set of admissible actions with a distance oracle.
pub trait ActionSet {
    fn dim(&self) -> usize;
    fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)>;
    fn distance(&self, p: &[f64]) -> f64;
}

pub struct PointCloud(pub Vec<Vec<f64>>);

impl ActionSet for PointCloud {
    fn dim(&self) -> usize {
        self.0.first().map(|p| p.len()).unwrap_or(0)
    }
    fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let first = self.0.first()?;
        let mut lo = first.clone();
        let mut hi = first.clone();
        for p in &self.0 {
            for i in 0..p.len() {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        Some((lo, hi))
    }
    fn distance(&self, p: &[f64]) -> f64 {
        self.0.iter().map(|q| q.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()).fold(f64::INFINITY, f64::min)
    }
}

/// The segment `[a, b]` in action space.
pub struct Segment {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl ActionSet for Segment {
    fn dim(&self) -> usize {
        self.a.len()
    }
    fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((self.a.iter().zip(&self.b).map(|(x, y)| x.min(*y)).collect(), self.a.iter().zip(&self.b).map(|(x, y)| x.max(*y)).collect()))
    }
    fn distance(&self, p: &[f64]) -> f64 {
        let ab: Vec<f64> = self.b.iter().zip(&self.a).map(|(x, y)| x - y).collect();
        let ap: Vec<f64> = p.iter().zip(&self.a).map(|(x, y)| x - y).collect();
        let l2: f64 = ab.iter().map(|v| v * v).sum();
        let t = if l2 > 0.0 { (ab.iter().zip(&ap).map(|(x, y)| x * y).sum::<f64>() / l2).clamp(0.0, 1.0) } else { 0.0 };
        ap.iter().zip(&ab).map(|(x, y)| (x - t * y).powi(2)).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionIndexSet {
    pub members: Vec<Vec<i64>>,
    pub empty_input: bool,
}

/// All `m ∈ ℤ^d` with `dist(E_γ, h(m + ϑ/4)) ≤ L h`.
pub fn action_index_set(egamma: &dyn ActionSet, h: f64, l: f64, maslov: &[u32]) -> Result<ActionIndexSet> {
    if !(h > 0.0) || !(l >= 0.0) {
        return Err(Error::InvalidInput("h must be positive and L non-negative".into()));
    }
    let Some((lo, hi)) = egamma.bounding_box() else {
        return Ok(ActionIndexSet { members: Vec::new(), empty_input: true });
    };
    if maslov.len() != egamma.dim() {
        return Err(Error::GeometryMismatch("Maslov vector does not match the action dimension".into()));
    }
    let shift: Vec<f64> = maslov.iter().map(|&t| t as f64 / 4.0).collect();
    let mins: Vec<i64> = lo.iter().zip(&shift).map(|(a, s)| ((a - l * h) / h - s).floor() as i64).collect();
    let maxs: Vec<i64> = hi.iter().zip(&shift).map(|(b, s)| ((b + l * h) / h - s).ceil() as i64).collect();
    let members = odometer(&mins, &maxs)
        .into_iter()
        .filter(|m| {
            let p: Vec<f64> = m.iter().zip(&shift).map(|(&k, s)| h * (k as f64 + s)).collect();
            egamma.distance(&p) <= l * h
        })
        .collect();
    Ok(ActionIndexSet { members, empty_input: false })
}
