//! TOML run configuration.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use qkam::gevrey::ApproximationFunction;
use qkam::kam::{IterateOptions, Schedule};
use qkam::oracle::{ClusterMode, SymbolSpec, DEFAULT_DIM_CAP};
use qkam::quantize::{ExponentReading, RemainderConstants, ResonantScaling, SpectrumBounds};
use qkam::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    #[serde(default)]
    pub delta: DeltaSection,
    pub reduce: Option<ReduceSection>,
    pub model: Option<ModelSection>,
    #[serde(default)]
    pub iterate: IterateSection,
    pub spectrum: Option<SpectrumSection>,
    pub oracle: Option<OracleSection>,
    pub measure: Option<MeasureSection>,
    pub scar: Option<ScarSection>,
    pub gamma: Option<GammaSection>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub threads: usize,
    pub output: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { seed: 1, threads: 1, output: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeltaSection {
    /// `power_log` or `subgevrey_exp`.
    pub family: String,
    pub alpha: f64,
    pub a: f64,
    pub b: f64,
    pub beta: f64,
}

impl Default for DeltaSection {
    fn default() -> Self {
        DeltaSection { family: "power_log".into(), alpha: 2.0, a: 2.0, b: 1.0, beta: 0.4 }
    }
}

impl DeltaSection {
    pub fn build(&self) -> Result<ApproximationFunction> {
        self.build_with_alpha(self.alpha)
    }

    pub fn build_with_alpha(&self, alpha: f64) -> Result<ApproximationFunction> {
        match self.family.as_str() {
            "power_log" => ApproximationFunction::power_log(alpha, self.a, self.b),
            "subgevrey_exp" => ApproximationFunction::subgevrey_exp(alpha, self.beta),
            other => Err(Error::Config(format!("unknown Δ family `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReduceSection {
    #[serde(default)]
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<Vec<f64>>,
    #[serde(default)]
    pub third: Vec<Vec<Vec<f64>>>,
    /// Path of the `P₀` series file, relative to the config file.
    pub p0: String,
    pub generators: Vec<Vec<i64>>,
    pub epsilon: f64,
    pub action_scaling_exponent: Option<f64>,
    pub gamma: Option<f64>,
    pub lie_order: Option<usize>,
    pub grid_per_dim: Option<usize>,
    pub degmax: Option<u32>,
    pub critical_index: Option<usize>,
}

/// A normal-form problem given directly: `c + ⟨ω,y⟩ + ½ε_q⟨z,Mz⟩ + R_int + Q`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d: usize,
    #[serde(default)]
    pub d0: usize,
    pub epsilon: f64,
    pub quad_scale: Option<f64>,
    #[serde(default)]
    pub constant: f64,
    pub omega: Vec<f64>,
    #[serde(default)]
    pub m: Vec<Vec<f64>>,
    /// Path of the perturbation series `Q`.
    pub perturbation: String,
    /// Optional path of the integrable remainder `R_int`.
    pub rint: Option<String>,
    pub kmax: u32,
    pub degmax: u32,
}

impl ModelSection {
    pub fn m_matrix(&self) -> Result<DMatrix<f64>> {
        let n = 2 * self.d0;
        if self.m.len() != n || self.m.iter().any(|r| r.len() != n) {
            return Err(Error::Config(format!("model.m must be {n}×{n}")));
        }
        Ok(DMatrix::from_fn(n, n, |i, j| self.m[i][j]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IterateSection {
    /// `model` or `reduce`.
    pub source: String,
    pub k: u32,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub pmax: usize,
    pub target: f64,
    pub lie_order: usize,
}

impl Default for IterateSection {
    fn default() -> Self {
        IterateSection { source: "model".into(), k: 4, rho: 1.0, sigma: 1.0, alpha: 2.0, gamma: 0.05, pmax: 4, target: 1e-14, lie_order: 8 }
    }
}

impl IterateSection {
    pub fn options(&self, delta: ApproximationFunction) -> IterateOptions {
        IterateOptions {
            schedule: Schedule { k: self.k, rho: self.rho, sigma: self.sigma, alpha: self.alpha },
            gamma: self.gamma,
            delta,
            pmax: self.pmax,
            target: self.target,
            lie_order: self.lie_order,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumSection {
    pub h: f64,
    pub maslov: Vec<u32>,
    pub ny_min: Vec<i64>,
    pub ny_max: Vec<i64>,
    #[serde(default)]
    pub nres_max: u32,
    pub window: Option<[f64; 2]>,
    /// `oscillator_standard` or `direct`.
    #[serde(default = "default_scaling")]
    pub scaling: String,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub remainder_c: f64,
    #[serde(default = "one")]
    pub remainder_big_c: f64,
    #[serde(default)]
    pub positive_power: bool,
}

fn default_scaling() -> String {
    "oscillator_standard".into()
}

fn default_alpha() -> f64 {
    2.0
}

fn one() -> f64 {
    1.0
}

impl SpectrumSection {
    pub fn scaling(&self) -> Result<ResonantScaling> {
        match self.scaling.as_str() {
            "oscillator_standard" => Ok(ResonantScaling::OscillatorStandard),
            "direct" => Ok(ResonantScaling::Direct),
            other => Err(Error::Config(format!("unknown scaling `{other}`"))),
        }
    }

    pub fn bounds(&self) -> SpectrumBounds {
        SpectrumBounds {
            ny_min: self.ny_min.clone(),
            ny_max: self.ny_max.clone(),
            nres_max: self.nres_max,
            window: self.window.map(|w| (w[0], w[1])),
        }
    }

    pub fn remainder(&self) -> RemainderConstants {
        RemainderConstants {
            c: self.remainder_c,
            big_c: self.remainder_big_c,
            reading: if self.positive_power { ExponentReading::PositivePower } else { ExponentReading::NegativePower },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub coeff: f64,
    #[serde(default)]
    pub eps_power: u32,
    pub k: Vec<i32>,
    pub eta: Vec<u32>,
    #[serde(default)]
    pub u: Vec<u32>,
    #[serde(default)]
    pub v: Vec<u32>,
    /// Adds `coeff cos⟨k,x⟩ …` instead of a single exponential.
    #[serde(default)]
    pub cos: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    pub nt: usize,
    #[serde(default = "one_usize")]
    pub nh: usize,
    #[serde(default = "default_cap")]
    pub dim_cap: usize,
    /// Operator ε; defaults to the model ε.
    pub epsilon: Option<f64>,
    /// `coarse` or `fine`.
    #[serde(default = "default_cluster")]
    pub cluster: String,
    #[serde(default = "half")]
    pub gap_factor: f64,
    /// Torus modes kept clear of the basis edge.
    #[serde(default = "two")]
    pub margin: usize,
    pub terms: Vec<TermSpec>,
}

fn one_usize() -> usize {
    1
}

fn default_cap() -> usize {
    DEFAULT_DIM_CAP
}

fn default_cluster() -> String {
    "coarse".into()
}

fn half() -> f64 {
    0.5
}

fn two() -> usize {
    2
}

impl OracleSection {
    pub fn symbol(&self, d: usize, d0: usize) -> SymbolSpec {
        let mut s = SymbolSpec::new(d, d0);
        for t in &self.terms {
            let u = if t.u.is_empty() { vec![0; d0] } else { t.u.clone() };
            let v = if t.v.is_empty() { vec![0; d0] } else { t.v.clone() };
            if t.cos {
                s.add_cos(t.coeff, t.eps_power, &t.k, &t.eta, &u, &v);
            } else {
                s.add(t.coeff, t.eps_power, &t.k, &t.eta, &u, &v);
            }
        }
        s
    }

    pub fn cluster_mode(&self, h_omega_min: f64) -> Result<ClusterMode> {
        match self.cluster.as_str() {
            "coarse" => Ok(ClusterMode::Coarse { h_omega_min }),
            "fine" => Ok(ClusterMode::Fine { gap_factor: self.gap_factor }),
            other => Err(Error::Config(format!("unknown cluster mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZoneToml {
    pub k: Vec<i32>,
    pub beta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasureSection {
    pub gamma1: Vec<f64>,
    pub kmax: u32,
    pub l: usize,
    pub d: usize,
    pub samples: usize,
    #[serde(default)]
    pub zones: Vec<ZoneToml>,
    #[serde(default = "sum_tol")]
    pub summability_tol: f64,
}

fn sum_tol() -> f64 {
    1e-10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScarSection {
    pub omega: f64,
    pub beta: f64,
    pub lambda_u: f64,
    pub lambda_v: f64,
    pub epsilon: f64,
    pub h: f64,
    pub band: [f64; 2],
    pub nt: usize,
    pub nh: usize,
    /// Census parameter `λ`.
    pub lambda: f64,
    pub delta_exp: Option<f64>,
    pub c1: f64,
    pub torus_window: Option<f64>,
    pub r: Option<f64>,
    /// `kam` or `second_order`.
    pub evaluator: String,
    pub dim_cap: usize,
    /// Extra `h` values for the near-degeneracy proxy.
    pub proxy_h: Vec<f64>,
    pub proxy_samples: usize,
    pub sweep_points: usize,
    pub diffeo_grid: usize,
    pub diffeo_pairs: usize,
}

impl Default for ScarSection {
    fn default() -> Self {
        ScarSection {
            omega: 1.0,
            beta: 0.3,
            lambda_u: 1.0,
            lambda_v: 1.0,
            epsilon: 1e-3,
            h: 0.02,
            band: [-0.3, 0.3],
            nt: 30,
            nh: 3,
            lambda: 4.0,
            delta_exp: None,
            c1: 1.0,
            torus_window: None,
            r: None,
            evaluator: "kam".into(),
            dim_cap: DEFAULT_DIM_CAP,
            proxy_h: vec![0.04, 0.02],
            proxy_samples: 100,
            sweep_points: 50,
            diffeo_grid: 21,
            diffeo_pairs: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GammaSection {
    pub r: Vec<u32>,
    pub n: Vec<u32>,
    pub eta: Vec<f64>,
    #[serde(default)]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub kappa: Vec<f64>,
    #[serde(default)]
    pub t_lower: Vec<f64>,
}

impl RunConfig {
    pub fn from_str_in(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((Self::from_str_in(&text, &base)?, text))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Reads a file referenced by the config (missing files are config errors).
    pub fn read_file(&self, rel: &str) -> Result<String> {
        let p = self.resolve(rel);
        std::fs::read_to_string(&p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.run.threads == 0 {
            return bad("run.threads must be >= 1".into());
        }
        self.delta.build()?;
        if !["model", "reduce"].contains(&self.iterate.source.as_str()) {
            return bad(format!("iterate.source must be `model` or `reduce`, got `{}`", self.iterate.source));
        }
        if let Some(s) = &self.spectrum {
            s.scaling()?;
            if !(s.h > 0.0) {
                return bad("spectrum.h must be positive".into());
            }
            if s.ny_min.len() != s.ny_max.len() || s.ny_min.len() != s.maslov.len() {
                return bad("spectrum.ny_min, ny_max and maslov must have the same length".into());
            }
        }
        if let Some(m) = &self.measure {
            if m.gamma1.is_empty() {
                return bad("measure.gamma1 must be non-empty".into());
            }
        }
        if let Some(s) = &self.scar {
            if !["kam", "second_order"].contains(&s.evaluator.as_str()) {
                return bad(format!("scar.evaluator must be `kam` or `second_order`, got `{}`", s.evaluator));
            }
            if !(s.h > 0.0) || !(s.lambda > 1.0) || s.band[0] >= s.band[1] {
                return bad("scar needs h > 0, λ > 1 and a non-empty band".into());
            }
        }
        if let Some(g) = &self.gamma {
            if g.r.is_empty() || g.n.is_empty() || g.eta.is_empty() {
                return bad("gamma.r, gamma.n and gamma.eta must be non-empty".into());
            }
        }
        Ok(())
    }
}
