//! Spectral ground truth: Weyl-quantized model operators on a torus plane
//! wave ⊗ Hermite basis, dense diagonalization and cluster matching.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::SpectrumPrediction;

pub const DEFAULT_DIM_CAP: usize = 4096;
const MAX_Z_DEGREE: u32 = 4;

/// One symbol term `c ε^e e^{i⟨k,x⟩} Π η_j^{a_j} Π_i u_i^{p_i} v_i^{q_i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolTerm {
    pub coeff: (f64, f64),
    pub eps_power: u32,
    pub k: Vec<i32>,
    pub eta_pow: Vec<u32>,
    pub u_pow: Vec<u32>,
    pub v_pow: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolSpec {
    pub d: usize,
    pub d0: usize,
    pub terms: Vec<SymbolTerm>,
}

impl SymbolSpec {
    pub fn new(d: usize, d0: usize) -> Self {
        SymbolSpec { d, d0, terms: Vec::new() }
    }

    pub fn add(&mut self, coeff: f64, eps_power: u32, k: &[i32], eta_pow: &[u32], u_pow: &[u32], v_pow: &[u32]) -> &mut Self {
        self.terms.push(SymbolTerm {
            coeff: (coeff, 0.0),
            eps_power,
            k: k.to_vec(),
            eta_pow: eta_pow.to_vec(),
            u_pow: u_pow.to_vec(),
            v_pow: v_pow.to_vec(),
        });
        self
    }

    /// `c ε^e cos⟨k,x⟩ Π η^a Π u^p v^q` as two exponential terms.
    pub fn add_cos(&mut self, coeff: f64, eps_power: u32, k: &[i32], eta_pow: &[u32], u_pow: &[u32], v_pow: &[u32]) -> &mut Self {
        let neg: Vec<i32> = k.iter().map(|v| -v).collect();
        self.add(coeff / 2.0, eps_power, k, eta_pow, u_pow, v_pow);
        self.add(coeff / 2.0, eps_power, &neg, eta_pow, u_pow, v_pow)
    }

    /// `Σ ω_j η_j`.
    pub fn add_linear_torus(&mut self, omega: &[f64]) -> &mut Self {
        let d = self.d;
        let d0 = self.d0;
        for (j, &w) in omega.iter().enumerate() {
            let mut a = vec![0; d];
            a[j] = 1;
            self.add(w, 0, &vec![0; d], &a, &vec![0; d0], &vec![0; d0]);
        }
        self
    }

    fn validate(&self) -> Result<()> {
        for t in &self.terms {
            if t.k.len() != self.d || t.eta_pow.len() != self.d || t.u_pow.len() != self.d0 || t.v_pow.len() != self.d0 {
                return Err(Error::GeometryMismatch("symbol term does not match (d, d0)".into()));
            }
            if t.u_pow.iter().zip(&t.v_pow).any(|(p, q)| p + q > MAX_Z_DEGREE) {
                return Err(Error::InvalidInput(format!("resonant degree above {MAX_Z_DEGREE}")));
            }
        }
        Ok(())
    }

    /// Checks the symbol is real: every term has its conjugate partner.
    pub fn is_real(&self, tol: f64) -> bool {
        let mut acc: BTreeMap<(Vec<i32>, Vec<u32>, Vec<u32>, Vec<u32>, u32), Complex64> = BTreeMap::new();
        for t in &self.terms {
            let key = (t.k.clone(), t.eta_pow.clone(), t.u_pow.clone(), t.v_pow.clone(), t.eps_power);
            *acc.entry(key).or_default() += Complex64::new(t.coeff.0, t.coeff.1);
        }
        acc.iter().all(|((k, a, p, q, e), c)| {
            let neg: Vec<i32> = k.iter().map(|v| -v).collect();
            let partner = acc.get(&(neg, a.clone(), p.clone(), q.clone(), *e)).copied().unwrap_or_default();
            (c - partner.conj()).norm() <= tol
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelOperator {
    pub nt: usize,
    pub nh: usize,
    pub d: usize,
    pub d0: usize,
    pub h: f64,
    pub epsilon: f64,
    pub matrix: DMatrix<Complex64>,
    pub provenance: SymbolSpec,
}

impl ModelOperator {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// Index of torus mode `n` (each `|n_j| ≤ N_t`) and Hermite levels `m`.
    pub fn index(&self, n: &[i64], m: &[usize]) -> usize {
        let side = 2 * self.nt + 1;
        let mut t = 0;
        for &nj in n {
            t = t * side + (nj + self.nt as i64) as usize;
        }
        let mut z = 0;
        for &mi in m {
            z = z * self.nh + mi;
        }
        t * self.nh.pow(self.d0 as u32) + z
    }

    pub fn hermitian_defect(&self) -> f64 {
        let a = &self.matrix;
        max_modulus(&(a - a.adjoint())) / max_modulus(a).max(f64::MIN_POSITIVE)
    }
}

pub fn max_modulus(a: &DMatrix<Complex64>) -> f64 {
    a.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// Position and momentum ladder matrices on `n` Hermite levels:
/// `u = √(h/2)(a + a†)`, `v = i√(h/2)(a† − a)`.
pub fn ladder_uv(n: usize, h: f64) -> (DMatrix<Complex64>, DMatrix<Complex64>) {
    let s = (h / 2.0).sqrt();
    let mut u = DMatrix::zeros(n, n);
    let mut v = DMatrix::zeros(n, n);
    for m in 1..n {
        let a = (m as f64).sqrt() * s;
        u[(m - 1, m)] = Complex64::new(a, 0.0);
        u[(m, m - 1)] = Complex64::new(a, 0.0);
        v[(m - 1, m)] = Complex64::new(0.0, -a);
        v[(m, m - 1)] = Complex64::new(0.0, a);
    }
    (u, v)
}

fn word_orderings(p: u32, q: u32) -> Vec<Vec<bool>> {
    let n = (p + q) as usize;
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        if mask.count_ones() == q {
            out.push((0..n).map(|i| mask >> i & 1 == 1).collect());
        }
    }
    out
}

/// Weyl quantization of `u^p v^q` on `n` Hermite levels (symmetric product).
pub fn weyl_uv(p: u32, q: u32, n: usize, h: f64) -> DMatrix<Complex64> {
    let pad = n + (p + q) as usize;
    let (u, v) = ladder_uv(pad, h);
    let words = word_orderings(p, q);
    let mut acc = DMatrix::<Complex64>::zeros(pad, pad);
    for w in &words {
        let mut m = DMatrix::<Complex64>::identity(pad, pad);
        for &is_v in w {
            m = if is_v { m * &v } else { m * &u };
        }
        acc += m;
    }
    acc /= Complex64::new(words.len() as f64, 0.0);
    acc.view((0, 0), (n, n)).into_owned()
}

/// Assembles the Weyl quantization of `spec` with `|n_j| ≤ N_t` torus modes
/// and `N_h` Hermite levels per resonant dof. Couplings leaving the torus
/// box are dropped (Galerkin truncation).
pub fn build_operator(spec: &SymbolSpec, h: f64, epsilon: f64, nt: usize, nh: usize, dim_cap: usize) -> Result<ModelOperator> {
    spec.validate()?;
    if !(h > 0.0) {
        return Err(Error::InvalidInput("h must be positive".into()));
    }
    if spec.d0 > 0 && nh == 0 {
        return Err(Error::InvalidInput("N_h must be positive".into()));
    }
    let kmax = spec.terms.iter().flat_map(|t| t.k.iter().map(|v| v.unsigned_abs() as usize)).max().unwrap_or(0);
    if kmax > nt {
        return Err(Error::BasisTooSmall { required: kmax, msg: format!("coupling |k| = {kmax} exceeds N_t = {nt}") });
    }
    let side = 2 * nt + 1;
    let nz = nh.pow(spec.d0 as u32);
    let ntor = side.pow(spec.d as u32);
    let dim = ntor * nz;
    if dim > dim_cap {
        return Err(Error::DimensionCap { dim, cap: dim_cap });
    }
    let mut op = ModelOperator { nt, nh, d: spec.d, d0: spec.d0, h, epsilon, matrix: DMatrix::zeros(dim, dim), provenance: spec.clone() };
    let tor_modes: Vec<Vec<i64>> = (0..ntor)
        .map(|mut idx| {
            let mut n = vec![0i64; spec.d];
            for j in (0..spec.d).rev() {
                n[j] = (idx % side) as i64 - nt as i64;
                idx /= side;
            }
            n
        })
        .collect();
    let mut zcache: BTreeMap<(u32, u32), DMatrix<Complex64>> = BTreeMap::new();
    for t in &spec.terms {
        let c = Complex64::new(t.coeff.0, t.coeff.1) * epsilon.powi(t.eps_power as i32);
        if c == Complex64::new(0.0, 0.0) {
            continue;
        }
        // Resonant factor as a dense matrix on the Hermite product basis.
        let mut z = DMatrix::<Complex64>::identity(1, 1);
        for i in 0..spec.d0 {
            let f = zcache.entry((t.u_pow[i], t.v_pow[i])).or_insert_with(|| weyl_uv(t.u_pow[i], t.v_pow[i], nh, h)).clone();
            z = z.kronecker(&f);
        }
        let znz: Vec<(usize, usize, Complex64)> = (0..nz)
            .flat_map(|a| (0..nz).map(move |b| (a, b)))
            .filter(|&(a, b)| z[(a, b)].norm() > 0.0)
            .map(|(a, b)| (a, b, z[(a, b)]))
            .collect();
        for (col, n) in tor_modes.iter().enumerate() {
            let target: Vec<i64> = n.iter().zip(&t.k).map(|(a, &b)| a + b as i64).collect();
            if target.iter().any(|v| v.unsigned_abs() as usize > nt) {
                continue;
            }
            let row = target.iter().fold(0usize, |acc, &v| acc * side + (v + nt as i64) as usize);
            let f: f64 =
                n.iter().zip(&t.k).zip(&t.eta_pow).map(|((&nj, &kj), &a)| (h * (nj as f64 + kj as f64 / 2.0)).powi(a as i32)).product();
            let cf = c * f;
            for &(a, b, zv) in &znz {
                op.matrix[(row * nz + a, col * nz + b)] += cf * zv;
            }
        }
    }
    Ok(op)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagonalization {
    pub eigenvalues: Vec<f64>,
    pub max_residual: f64,
    pub matrix_norm: f64,
}

/// Full Hermitian eigensolve with a residual spot check on 10 seeded pairs.
pub fn diagonalize(op: &ModelOperator, dim_cap: usize, seed: u64) -> Result<Diagonalization> {
    diagonalize_matrix(&op.matrix, dim_cap, seed)
}

pub fn diagonalize_matrix(a: &DMatrix<Complex64>, dim_cap: usize, seed: u64) -> Result<Diagonalization> {
    let n = a.nrows();
    if n > dim_cap {
        return Err(Error::DimensionCap { dim: n, cap: dim_cap });
    }
    if n == 0 {
        return Ok(Diagonalization { eigenvalues: Vec::new(), max_residual: 0.0, matrix_norm: 0.0 });
    }
    let norm = a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    let real = a.iter().all(|c| c.im == 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, n, n.min(10)).into_vec();
    let (mut eigs, max_residual) = if real {
        let ar = a.map(|c| c.re);
        let ar = (&ar + ar.transpose()) * 0.5;
        let se = SymmetricEigen::new(ar.clone());
        let res = picks
            .iter()
            .map(|&i| {
                let v: DVector<f64> = se.eigenvectors.column(i).into_owned();
                (&ar * &v - &v * se.eigenvalues[i]).norm()
            })
            .fold(0.0, f64::max);
        (se.eigenvalues.iter().copied().collect::<Vec<f64>>(), res)
    } else {
        let ah = (a + a.adjoint()) * Complex64::new(0.5, 0.0);
        let se = SymmetricEigen::new(ah.clone());
        let res = picks
            .iter()
            .map(|&i| {
                let v: DVector<Complex64> = se.eigenvectors.column(i).into_owned();
                (&ah * &v - &v * Complex64::new(se.eigenvalues[i], 0.0)).norm()
            })
            .fold(0.0, f64::max);
        (se.eigenvalues.iter().copied().collect::<Vec<f64>>(), res)
    };
    if max_residual > 1e-10 * norm.max(1.0) {
        return Err(Error::Invariant(format!("eigen residual {max_residual:e} exceeds 1e-10 · ‖A‖")));
    }
    eigs.sort_by(f64::total_cmp);
    Ok(Diagonalization { eigenvalues: eigs, max_residual, matrix_norm: norm })
}

/// Eigenvalues (ascending) with unit eigenvectors as columns.
pub fn eigenpairs(op: &ModelOperator, dim_cap: usize) -> Result<(Vec<f64>, DMatrix<Complex64>)> {
    let a = &op.matrix;
    let n = a.nrows();
    if n > dim_cap {
        return Err(Error::DimensionCap { dim: n, cap: dim_cap });
    }
    let (vals, vecs): (Vec<f64>, DMatrix<Complex64>) = if a.iter().all(|c| c.im == 0.0) {
        let ar = a.map(|c| c.re);
        let se = SymmetricEigen::new((&ar + ar.transpose()) * 0.5);
        (se.eigenvalues.iter().copied().collect(), se.eigenvectors.map(|v| Complex64::new(v, 0.0)))
    } else {
        let se = SymmetricEigen::new((a + a.adjoint()) * Complex64::new(0.5, 0.0));
        (se.eigenvalues.iter().copied().collect(), se.eigenvectors)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| vals[i].total_cmp(&vals[j]).then(i.cmp(&j)));
    let sorted = order.iter().map(|&i| vals[i]).collect();
    let cols: Vec<DVector<Complex64>> = order.iter().map(|&i| vecs.column(i).into_owned()).collect();
    Ok((sorted, DMatrix::from_columns(&cols)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub center: f64,
    pub width: f64,
    pub count: usize,
    pub members: Vec<f64>,
}

/// Groups sorted values into clusters separated by gaps above `threshold`.
pub fn gap_clusters(sorted: &[f64], threshold: f64) -> Vec<Cluster> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (i, &e) in sorted.iter().enumerate() {
        if i == 0 || e - sorted[i - 1] > threshold {
            out.push(vec![e]);
        } else {
            out.last_mut().unwrap().push(e);
        }
    }
    out.into_iter()
        .map(|m| Cluster { center: m.iter().sum::<f64>() / m.len() as f64, width: m[m.len() - 1] - m[0], count: m.len(), members: m })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum ClusterMode {
    /// Gap threshold `gap_factor · s_res` with `s_res` the predicted resonant spacing.
    Fine { gap_factor: f64 },
    /// Gap threshold `½ h min ω_j`.
    Coarse { h_omega_min: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMatch {
    pub oracle_cluster: usize,
    pub predicted_cluster: usize,
    pub center_error: f64,
    pub width_error: f64,
    pub count_oracle: usize,
    pub count_predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub clusters: Vec<Cluster>,
    pub predicted: Vec<(usize, Cluster)>,
    pub matched: Vec<ClusterMatch>,
    pub max_center_error: f64,
    pub max_width_error: f64,
    pub count_mismatch: bool,
    pub threshold: f64,
}

/// Smallest positive level spacing inside any predicted cluster.
pub fn predicted_resonant_spacing(pred: &SpectrumPrediction) -> Option<f64> {
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for e in &pred.entries {
        by.entry(e.cluster_id).or_default().push(e.energy);
    }
    let scale = pred.entries.iter().map(|e| e.energy.abs()).fold(0.0, f64::max).max(1.0);
    by.values()
        .flat_map(|v| {
            let mut v = v.clone();
            v.sort_by(f64::total_cmp);
            v.windows(2).map(|w| w[1] - w[0]).collect::<Vec<_>>()
        })
        .filter(|&g| g > 1e-12 * scale)
        .min_by(f64::total_cmp)
}

/// Clusters the oracle eigenvalues and matches them greedily to the
/// prediction's clusters by nearest center.
pub fn match_spectrum(eigs: &[f64], pred: &SpectrumPrediction, mode: ClusterMode) -> Result<ClusterReport> {
    if eigs.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::InvalidInput("eigenvalues must be ascending".into()));
    }
    let threshold = match mode {
        ClusterMode::Fine { gap_factor } => {
            gap_factor * predicted_resonant_spacing(pred).ok_or_else(|| Error::InvalidInput("prediction has no resonant spacing".into()))?
        }
        ClusterMode::Coarse { h_omega_min } => 0.5 * h_omega_min,
    };
    let clusters = gap_clusters(eigs, threshold);
    let mut by: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for e in &pred.entries {
        by.entry(e.cluster_id).or_default().push(e.energy);
    }
    let predicted: Vec<(usize, Cluster)> = by
        .into_iter()
        .map(|(id, mut m)| {
            m.sort_by(f64::total_cmp);
            let c = Cluster { center: m.iter().sum::<f64>() / m.len() as f64, width: m[m.len() - 1] - m[0], count: m.len(), members: m };
            (id, c)
        })
        .collect();
    let mut used = vec![false; predicted.len()];
    let mut matched = Vec::new();
    for (i, c) in clusters.iter().enumerate() {
        let best = predicted
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .min_by(|a, b| (a.1 .1.center - c.center).abs().total_cmp(&(b.1 .1.center - c.center).abs()));
        if let Some((j, (id, pc))) = best {
            used[j] = true;
            matched.push(ClusterMatch {
                oracle_cluster: i,
                predicted_cluster: *id,
                center_error: (pc.center - c.center).abs(),
                width_error: (pc.width - c.width).abs(),
                count_oracle: c.count,
                count_predicted: pc.count,
            });
        }
    }
    Ok(ClusterReport {
        max_center_error: matched.iter().map(|m| m.center_error).fold(0.0, f64::max),
        max_width_error: matched.iter().map(|m| m.width_error).fold(0.0, f64::max),
        count_mismatch: clusters.len() != predicted.len() || matched.iter().any(|m| m.count_oracle != m.count_predicted),
        clusters,
        predicted,
        matched,
        threshold,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelPair {
    pub e_pred: f64,
    pub e_oracle: f64,
    pub abs_diff: f64,
    pub cluster_id: usize,
}

/// Rank pairing of predicted and oracle levels, both sorted ascending.
pub fn pair_levels(pred: &SpectrumPrediction, eigs: &[f64]) -> Vec<LevelPair> {
    pred.entries
        .iter()
        .zip(eigs)
        .map(|(p, &e)| LevelPair { e_pred: p.energy, e_oracle: e, abs_diff: (p.energy - e).abs(), cluster_id: p.cluster_id })
        .collect()
}

pub fn level_pairs_csv(pairs: &[LevelPair]) -> String {
    let mut s = String::from("E_pred,E_oracle,abs_diff,cluster_id\n");
    for p in pairs {
        s.push_str(&format!("{:.17e},{:.17e},{:.17e},{}\n", p.e_pred, p.e_oracle, p.abs_diff, p.cluster_id));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantize::{QuantumNumbers, ResonantScaling, SpectrumEntry};
    use proptest::prelude::*;

    fn torus_spec(omega: &[f64]) -> SymbolSpec {
        let mut s = SymbolSpec::new(omega.len(), 0);
        s.add_linear_torus(omega);
        s
    }

    #[test]
    fn linear_torus_is_diagonal() {
        let (h, w, nt) = (0.1, 1.3, 6);
        let op = build_operator(&torus_spec(&[w]), h, 0.0, nt, 1, DEFAULT_DIM_CAP).unwrap();
        let d = diagonalize(&op, DEFAULT_DIM_CAP, 0).unwrap();
        let mut expect: Vec<f64> = (-(nt as i64)..=nt as i64).map(|n| h * w * n as f64).collect();
        expect.sort_by(f64::total_cmp);
        for (a, b) in d.eigenvalues.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn harmonic_oscillator_ladder() {
        let (h, nh) = (0.05, 30);
        let mut s = SymbolSpec::new(0, 1);
        s.add(0.5, 0, &[], &[], &[2], &[0]).add(0.5, 0, &[], &[], &[0], &[2]);
        let op = build_operator(&s, h, 0.0, 0, nh, DEFAULT_DIM_CAP).unwrap();
        let d = diagonalize(&op, DEFAULT_DIM_CAP, 1).unwrap();
        for (n, e) in d.eigenvalues.iter().enumerate() {
            assert!((e - h * (n as f64 + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn weyl_uv_is_uv_minus_half_commutator() {
        // Weyl(uv) = (uv + vu)/2 = uv − [u,v]/2 = uv − ih/2.
        let (h, n) = (0.1, 8);
        let w = weyl_uv(1, 1, n, h);
        let (u, v) = ladder_uv(n + 2, h);
        let uv = (&u * &v).view((0, 0), (n, n)).into_owned();
        let expect = uv - DMatrix::<Complex64>::identity(n, n) * Complex64::new(0.0, h / 2.0);
        assert!(max_modulus(&(w - expect)) < 1e-14);
    }

    #[test]
    fn weyl_u2v_symmetric_product() {
        let (h, n) = (0.2, 6);
        let (u, v) = ladder_uv(n + 3, h);
        let avg = (&u * &u * &v + &u * &v * &u + &v * &u * &u) / Complex64::new(3.0, 0.0);
        let w = weyl_uv(2, 1, n, h);
        assert!(max_modulus(&(w - avg.view((0, 0), (n, n)))) < 1e-14);
    }

    #[test]
    fn mathieu_second_order() {
        let (h, eps, nt) = (0.1, 1e-3, 12);
        let mut s = SymbolSpec::new(1, 0);
        s.add(0.5, 0, &[0], &[2], &[], &[]).add_cos(1.0, 1, &[1], &[0], &[], &[]);
        let op = build_operator(&s, h, eps, nt, 1, DEFAULT_DIM_CAP).unwrap();
        let d = diagonalize(&op, DEFAULT_DIM_CAP, 2).unwrap();
        let e0 = |n: f64| 0.5 * h * h * n * n;
        for n in 3..=6 {
            let nf = n as f64;
            let rs = e0(nf) + 0.25 * eps * eps * (1.0 / (e0(nf) - e0(nf + 1.0)) + 1.0 / (e0(nf) - e0(nf - 1.0)));
            // ±n are degenerate and split only at order 2n.
            let close = d.eigenvalues.iter().filter(|&&e| (e - rs).abs() < 1e-8).count();
            assert_eq!(close, 2, "n = {n}");
        }
    }

    #[test]
    fn linear_torus_plus_cosine_is_fourth_order() {
        let (h, w, eps, nt) = (0.1, 1.0, 1e-3, 20);
        let mut s = torus_spec(&[w]);
        s.add_cos(1.0, 1, &[1], &[0], &[], &[]);
        let op = build_operator(&s, h, eps, nt, 1, DEFAULT_DIM_CAP).unwrap();
        let d = diagonalize(&op, DEFAULT_DIM_CAP, 3).unwrap();
        // Second-order shifts cancel between the two neighbours.
        for n in -5i64..=5 {
            let e = h * w * n as f64;
            let near = d.eigenvalues.iter().map(|x| (x - e).abs()).fold(f64::INFINITY, f64::min);
            assert!(near < 10.0 * eps.powi(4) / (h * w).powi(3));
        }
    }

    #[test]
    fn too_small_basis_and_cap() {
        let mut s = SymbolSpec::new(1, 0);
        s.add_cos(1.0, 0, &[3], &[0], &[], &[]);
        assert!(matches!(build_operator(&s, 0.1, 0.0, 2, 1, DEFAULT_DIM_CAP), Err(Error::BasisTooSmall { required: 3, .. })));
        assert!(matches!(build_operator(&s, 0.1, 0.0, 40, 1, 50), Err(Error::DimensionCap { .. })));
    }

    #[test]
    fn diagonalize_trivial() {
        let a = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -1.0, 2.0])).map(|v| Complex64::new(v, 0.0));
        assert_eq!(diagonalize_matrix(&a, 10, 0).unwrap().eigenvalues, vec![-1.0, 2.0, 3.0]);
        let b = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]).map(|v| Complex64::new(v, 0.0));
        let e = diagonalize_matrix(&b, 10, 0).unwrap().eigenvalues;
        assert!((e[0] + 1.0).abs() < 1e-15 && (e[1] - 1.0).abs() < 1e-15);
    }

    fn pred_from(levels: &[(usize, f64)]) -> SpectrumPrediction {
        let mut entries: Vec<SpectrumEntry> = levels
            .iter()
            .map(|&(c, e)| SpectrumEntry {
                qn: QuantumNumbers { n_y: vec![c as i64], n_u: vec![], n_v: vec![], maslov: vec![0] },
                energy: e,
                cluster_id: c,
            })
            .collect();
        entries.sort_by(|a, b| a.energy.total_cmp(&b.energy));
        SpectrumPrediction {
            entries,
            epsilon: 0.0,
            h: 0.1,
            remainder_bound: 0.0,
            lambdas: vec![],
            lambdas_tilde: vec![],
            nus: vec![],
            cross_block_norm: 0.0,
            scaling: ResonantScaling::Direct,
        }
    }

    fn levels() -> Vec<(usize, f64)> {
        let mut v = Vec::new();
        for c in 0..4 {
            for j in 0..5 {
                v.push((c, c as f64 * 1.0 + j as f64 * 0.01));
            }
        }
        v
    }

    #[test]
    fn match_exact_and_shifted() {
        let p = pred_from(&levels());
        let eigs: Vec<f64> = p.entries.iter().map(|e| e.energy).collect();
        let r = match_spectrum(&eigs, &p, ClusterMode::Fine { gap_factor: 3.0 }).unwrap();
        assert_eq!(r.clusters.len(), 4);
        assert_eq!(r.max_center_error, 0.0);
        assert!(!r.count_mismatch);
        let delta = 0.003;
        let shifted: Vec<f64> = eigs.iter().map(|e| e + delta).collect();
        let r = match_spectrum(&shifted, &p, ClusterMode::Fine { gap_factor: 3.0 }).unwrap();
        assert!((r.max_center_error - delta).abs() < 1e-12);
        assert!(r.max_width_error < 1e-12);
    }

    #[test]
    fn count_mismatch_is_reported() {
        let p = pred_from(&levels());
        let eigs: Vec<f64> = p.entries.iter().map(|e| e.energy).take(12).collect();
        let r = match_spectrum(&eigs, &p, ClusterMode::Coarse { h_omega_min: 1.0 }).unwrap();
        assert!(r.count_mismatch);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn assembled_matrices_are_hermitian(w in 0.5f64..2.0, c in -1.0f64..1.0, lam in 0.2f64..2.0, k in 1i32..3, h in 0.01f64..0.2) {
            let mut s = SymbolSpec::new(1, 1);
            s.add(w, 0, &[0], &[1], &[0], &[0])
                .add(0.5 * lam, 1, &[0], &[0], &[2], &[0])
                .add(0.5, 1, &[0], &[0], &[0], &[2])
                .add_cos(c, 1, &[k], &[1], &[1], &[1])
                .add_cos(c, 1, &[k], &[0], &[2], &[0]);
            prop_assert!(s.is_real(1e-15));
            let op = build_operator(&s, h, 0.1, 4, 6, DEFAULT_DIM_CAP).unwrap();
            prop_assert!(op.hermitian_defect() < 1e-12);
        }

        #[test]
        fn trace_equals_eigen_sum(seed in 0u64..1000) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 12;
            let mut a = DMatrix::<Complex64>::zeros(n, n);
            for i in 0..n {
                a[(i, i)] = Complex64::new(rng.gen_range(-1.0..1.0), 0.0);
                for j in 0..i {
                    let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                    a[(i, j)] = z;
                    a[(j, i)] = z.conj();
                }
            }
            let d = diagonalize_matrix(&a, 100, seed).unwrap();
            let tr: f64 = (0..n).map(|i| a[(i, i)].re).sum();
            let s: f64 = d.eigenvalues.iter().sum();
            prop_assert!((tr - s).abs() <= 1e-10 * tr.abs().max(1.0));
        }
    }
}
