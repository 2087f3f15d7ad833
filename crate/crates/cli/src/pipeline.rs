//! Command implementations. Every command writes deterministic CSV/JSON
//! files plus `manifest.json` into the output directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;

use qkam::freqsets::{excluded_set_measure, results_csv, summability_check, zone_measure_mc, ZoneSpec};
use qkam::gevrey::{lemma_ba_bound, log_gamma_extremal};
use qkam::kam::{check_divisors, iterate, IterationOutcome, NormalFormState};
use qkam::oracle::{build_operator, diagonalize, match_spectrum, ClusterReport};
use qkam::quantize::{predict_spectrum, SpectrumPrediction};
use qkam::reduction::{reduce, unimodular_completion, ReducedHamiltonian, ReductionOptions, TaylorData};
use qkam::scarring::{
    crossing_sweep, default_delta_exp, index_set_in_box, local_diffeo_check, scar_run, zero_count_proxy, DeskKam, DeskModel,
    DeskSecondOrder, K0Evaluator, ScarOptions,
};
use qkam::series::{FourierTaylorSeries, PhaseGeometry, Truncation};
use qkam::{Error, Result};

use crate::config::{RunConfig, ScarSection};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Reduce,
    Iterate,
    Spectrum,
    Compare,
    Measure,
    Scar,
    Gamma,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Reduce => "reduce",
            Command::Iterate => "iterate",
            Command::Spectrum => "spectrum",
            Command::Compare => "compare",
            Command::Measure => "measure",
            Command::Scar => "scar",
            Command::Gamma => "gamma",
        }
    }
}

/// Output directory plus the list of files written so far.
pub struct Output {
    pub dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Output { dir: dir.to_path_buf(), files: Vec::new() })
    }

    pub fn write(&mut self, name: &str, content: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), content)?;
        self.files.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Invariant(e.to_string()))?;
        s.push('\n');
        self.write(name, &s)
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }
}

fn fmt(x: f64) -> String {
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:e}")
}

/// Runs one command and writes its manifest.
pub fn run(command: Command, cfg: &RunConfig, config_text: &str, out_dir: &Path) -> Result<()> {
    let mut out = Output::new(out_dir)?;
    let t0 = Instant::now();
    let result = match command {
        Command::Reduce => cmd_reduce(cfg, &mut out).map(|_| ()),
        Command::Iterate => cmd_iterate(cfg, &mut out).map(|_| ()),
        Command::Spectrum => cmd_spectrum(cfg, &mut out).map(|_| ()),
        Command::Compare => cmd_compare(cfg, &mut out).map(|_| ()),
        Command::Measure => cmd_measure(cfg, &mut out),
        Command::Scar => cmd_scar(cfg, &mut out),
        Command::Gamma => cmd_gamma(cfg, &mut out),
    };
    log::info!("{} finished in {:.3} s", command.name(), t0.elapsed().as_secs_f64());
    let manifest = json!({
        "command": command.name(),
        "status": match &result { Ok(()) => "ok".to_string(), Err(e) => format!("error: {e}") },
        "seed": cfg.run.seed,
        "threads": cfg.run.threads,
        "versions": { "qkam": env!("CARGO_PKG_VERSION") },
        "outputs": out.files().to_vec(),
        "config": config_text,
    });
    out.write_json("manifest.json", &manifest)?;
    result
}

fn reduction_inputs(cfg: &RunConfig) -> Result<(TaylorData, FourierTaylorSeries, ReductionOptions)> {
    let r = cfg.reduce.as_ref().ok_or_else(|| Error::Config("missing [reduce] section".into()))?;
    let h0 = TaylorData { value: r.value, gradient: r.gradient.clone(), hessian: r.hessian.clone(), third: r.third.clone() };
    let p0 = FourierTaylorSeries::from_text(&cfg.read_file(&r.p0)?)?;
    let mut opts = ReductionOptions::new(cfg.delta.build()?);
    if let Some(v) = r.action_scaling_exponent {
        opts.action_scaling_exponent = v;
    }
    if let Some(v) = r.gamma {
        opts.gamma = v;
    }
    if let Some(v) = r.lie_order {
        opts.lie_order = v;
    }
    if let Some(v) = r.grid_per_dim {
        opts.grid_per_dim = v;
    }
    if let Some(v) = r.degmax {
        opts.degmax = v;
    }
    opts.critical_index = r.critical_index;
    Ok((h0, p0, opts))
}

fn reduce_only(cfg: &RunConfig) -> Result<ReducedHamiltonian> {
    let (h0, p0, opts) = reduction_inputs(cfg)?;
    let module = unimodular_completion(&cfg.reduce.as_ref().unwrap().generators)?;
    reduce(&h0, &p0, &module, cfg.reduce.as_ref().unwrap().epsilon, &opts)
}

pub fn cmd_reduce(cfg: &RunConfig, out: &mut Output) -> Result<ReducedHamiltonian> {
    let red = reduce_only(cfg)?;
    out.write("p1.txt", &red.p1.to_text())?;
    out.write("rterm.txt", &red.rterm.to_text())?;
    let m1: Vec<Vec<f64>> = (0..red.m1.nrows()).map(|i| red.m1.row(i).iter().copied().collect()).collect();
    out.write_json(
        "reduced.json",
        &json!({
            "d": red.geometry.d(),
            "d0": red.geometry.d0(),
            "epsilon": red.epsilon,
            "reduced_epsilon": red.reduced_epsilon,
            "quad_scale": red.quad_scale,
            "energy_offset": red.energy_offset,
            "epsilon_n0": red.epsilon_n0,
            "omega1": red.omega1,
            "m1": m1,
            "phi0": red.phi0,
            "diagnostics": red.diagnostics,
        }),
    )?;
    Ok(red)
}

/// Initial normal-form state from `[model]` or from the reduction.
pub fn initial_state(cfg: &RunConfig) -> Result<NormalFormState> {
    match cfg.iterate.source.as_str() {
        "reduce" => {
            let red = reduce_only(cfg)?;
            let ctx = Truncation { kmax: red.p1.kmax(), degmax: red.p1.degmax().max(2) };
            NormalFormState::from_reduced(&red, ctx)
        }
        _ => {
            let m = cfg.model.as_ref().ok_or_else(|| Error::Config("missing [model] section".into()))?;
            let geom = PhaseGeometry::new(m.d, m.d0).map_err(|e| Error::Config(e.to_string()))?;
            let ctx = Truncation { kmax: m.kmax, degmax: m.degmax };
            let q = FourierTaylorSeries::from_text(&cfg.read_file(&m.perturbation)?)?;
            let rint = match &m.rint {
                Some(p) => FourierTaylorSeries::from_text(&cfg.read_file(p)?)?,
                None => FourierTaylorSeries::zero_in(geom, ctx),
            };
            if q.geometry() != geom || rint.geometry() != geom {
                return Err(Error::Config("series files do not match the model geometry".into()));
            }
            NormalFormState::new(
                geom,
                ctx,
                m.epsilon,
                m.quad_scale.unwrap_or(m.epsilon),
                m.constant,
                m.omega.clone(),
                m.m_matrix()?,
                rint,
                q,
            )
        }
    }
}

fn first_failing_divisors(cfg: &RunConfig, state: &NormalFormState) -> Result<serde_json::Value> {
    let delta = cfg.delta.build()?;
    for p in 0..cfg.iterate.pmax {
        let mut opts = cfg.iterate.options(delta.clone());
        opts.pmax = p;
        let st = match iterate(state, &opts) {
            Ok(o) => o.state,
            Err(_) => break,
        };
        let n = st.normal();
        let chk = check_divisors(&n.omega, &n.mq, opts.schedule.k_p(st.p + 1), opts.gamma, &delta)?;
        if !chk.member {
            let failing: Vec<_> = chk.reports.iter().filter(|r| !r.pass).cloned().collect();
            return Ok(
                json!({ "step": st.p + 1, "min_kw": chk.min_kw, "min_det_a1": chk.min_det_a1, "min_det_a2": chk.min_det_a2, "failing": failing }),
            );
        }
    }
    Ok(json!({ "step": null }))
}

fn state_json(st: &NormalFormState) -> serde_json::Value {
    let mat = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> { (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect() };
    json!({
        "d": st.geometry.d(),
        "d0": st.geometry.d0(),
        "kmax": st.ctx.kmax,
        "degmax": st.ctx.degmax,
        "epsilon": st.epsilon,
        "quad_scale": st.quad_scale,
        "p": st.p,
        "constant": st.constant,
        "omega": st.omega,
        "m": mat(&st.m),
        "eps_p": st.eps_p(),
        "omega_p": st.omega_p(),
        "m_p": mat(&st.m_p()),
        "eps_coeffs": st.eps_coeffs(),
        "omega_coeffs": st.omega_coeffs(),
        "steps": st.steps,
    })
}

pub fn cmd_iterate(cfg: &RunConfig, out: &mut Output) -> Result<IterationOutcome> {
    let state = initial_state(cfg)?;
    let opts = cfg.iterate.options(cfg.delta.build()?);
    let outcome = match iterate(&state, &opts) {
        Ok(o) => o,
        Err(e @ Error::SmallDivisor { .. }) => {
            out.write_json("divisors.json", &first_failing_divisors(cfg, &state)?)?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let mut csv = String::from("p,norm,min_divisor,min_det_a1,min_det_a2\n");
    for r in &outcome.trajectory {
        let _ = writeln!(csv, "{},{},{},{},{}", r.p, fmt(r.norm), fmt(r.min_divisor), fmt(r.min_det_a1), fmt(r.min_det_a2));
    }
    out.write("trajectory.csv", &csv)?;
    out.write("q.txt", &outcome.state.q.to_text())?;
    out.write("rint.txt", &outcome.state.rint.to_text())?;
    let mut sj = state_json(&outcome.state);
    sj["stop_reason"] = json!(outcome.stop_reason);
    out.write_json("state.json", &sj)?;
    Ok(outcome)
}

fn predict(cfg: &RunConfig, state: &NormalFormState) -> Result<SpectrumPrediction> {
    let s = cfg.spectrum.as_ref().ok_or_else(|| Error::Config("missing [spectrum] section".into()))?;
    predict_spectrum(state, s.h, state.quad_scale, &s.maslov, &s.bounds(), s.scaling()?, s.alpha, &s.remainder())
}

fn spectrum_meta(pred: &SpectrumPrediction) -> serde_json::Value {
    json!({
        "epsilon": pred.epsilon,
        "h": pred.h,
        "remainder_bound": pred.remainder_bound,
        "lambdas": pred.lambdas,
        "lambdas_tilde": pred.lambdas_tilde,
        "nus": pred.nus,
        "cross_block_norm": pred.cross_block_norm,
        "scaling": pred.scaling,
        "levels": pred.entries.len(),
    })
}

pub fn cmd_spectrum(cfg: &RunConfig, out: &mut Output) -> Result<SpectrumPrediction> {
    let outcome = cmd_iterate(cfg, out)?;
    let pred = predict(cfg, &outcome.state)?;
    out.write("spectrum.csv", &pred.to_csv())?;
    out.write_json("spectrum.json", &spectrum_meta(&pred))?;
    Ok(pred)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareSummary {
    pub levels: usize,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    pub dim: usize,
    pub max_residual: f64,
    pub clusters: Option<ClusterReport>,
}

pub fn cmd_compare(cfg: &RunConfig, out: &mut Output) -> Result<CompareSummary> {
    let oc = cfg.oracle.as_ref().ok_or_else(|| Error::Config("missing [oracle] section".into()))?;
    let sc = cfg.spectrum.as_ref().ok_or_else(|| Error::Config("missing [spectrum] section".into()))?;
    let limit = oc.nt as i64 - oc.margin as i64;
    if sc.ny_min.iter().chain(&sc.ny_max).any(|&n| n.abs() > limit) {
        return Err(Error::Coverage(format!("torus quantum numbers reach beyond N_t − margin = {limit}")));
    }
    let pred = cmd_spectrum(cfg, out)?;
    let st_eps = cfg.model.as_ref().map(|m| m.epsilon).or(cfg.reduce.as_ref().map(|r| r.epsilon)).unwrap_or(0.0);
    let d = sc.maslov.len();
    let d0 = pred.entries.first().map(|e| e.qn.n_u.len()).unwrap_or(0);
    if d0 > 0 && (sc.nres_max as usize + oc.margin) > oc.nh {
        return Err(Error::Coverage(format!("resonant levels up to {} need N_h ≥ {}", sc.nres_max, sc.nres_max as usize + oc.margin)));
    }
    let op = build_operator(&oc.symbol(d, d0), sc.h, oc.epsilon.unwrap_or(st_eps), oc.nt, oc.nh, oc.dim_cap)?;
    let diag = diagonalize(&op, oc.dim_cap, cfg.run.seed)?;
    let eigs = &diag.eigenvalues;
    if eigs.is_empty() {
        return Err(Error::Coverage("oracle basis is empty".into()));
    }
    let mut csv = String::from("index,predicted,oracle,abs_error\n");
    let (mut max_err, mut sum_err) = (0.0f64, 0.0);
    for (i, e) in pred.entries.iter().enumerate() {
        let j = eigs.partition_point(|&v| v < e.energy);
        let near = [j.saturating_sub(1), j.min(eigs.len() - 1)]
            .into_iter()
            .min_by(|&a, &b| (eigs[a] - e.energy).abs().total_cmp(&(eigs[b] - e.energy).abs()))
            .unwrap();
        let err = (eigs[near] - e.energy).abs();
        max_err = max_err.max(err);
        sum_err += err;
        let _ = writeln!(csv, "{i},{},{},{}", fmt(e.energy), fmt(eigs[near]), fmt(err));
    }
    out.write("compare.csv", &csv)?;
    let mut ev = String::from("index,eigenvalue\n");
    for (i, e) in eigs.iter().enumerate() {
        let _ = writeln!(ev, "{i},{}", fmt(*e));
    }
    out.write("oracle_eigenvalues.csv", &ev)?;
    let clusters = if d0 > 0 {
        let wmin = cfg.model.as_ref().map(|m| m.omega.iter().map(|w| w.abs()).fold(f64::INFINITY, f64::min)).unwrap_or(1.0);
        let lo = pred.entries.first().map(|e| e.energy).unwrap_or(0.0) - 0.5 * sc.h * wmin;
        let hi = pred.entries.last().map(|e| e.energy).unwrap_or(0.0) + 0.5 * sc.h * wmin;
        let inside: Vec<f64> = eigs.iter().copied().filter(|&e| e >= lo && e <= hi).collect();
        Some(match_spectrum(&inside, &pred, oc.cluster_mode(sc.h * wmin)?)?)
    } else {
        None
    };
    let summary = CompareSummary {
        levels: pred.entries.len(),
        max_abs_error: max_err,
        mean_abs_error: if pred.entries.is_empty() { 0.0 } else { sum_err / pred.entries.len() as f64 },
        dim: op.dim(),
        max_residual: diag.max_residual,
        clusters,
    };
    out.write_json("compare.json", &summary)?;
    Ok(summary)
}

pub fn cmd_measure(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let m = cfg.measure.as_ref().ok_or_else(|| Error::Config("missing [measure] section".into()))?;
    let delta = cfg.delta.build()?;
    let mut rows = Vec::new();
    for (i, z) in m.zones.iter().enumerate() {
        let spec = ZoneSpec::strip(&z.k, z.beta)?;
        let mc = zone_measure_mc(&spec, m.samples, cfg.run.seed.wrapping_add(i as u64))?;
        let sup = z.k.iter().map(|v| v.unsigned_abs()).max().unwrap_or(0) as f64;
        let label = z.k.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
        rows.push((label, z.beta, mc, None, (sup > 0.0).then(|| 2.0 * z.beta / sup)));
    }
    out.write("zones.csv", &results_csv(&rows))?;
    let mut csv = String::from("gamma1,estimate,ci95,majorant,shell_majorant,ratio_to_previous\n");
    let mut prev: Option<f64> = None;
    for &g in &m.gamma1 {
        let est = excluded_set_measure(g, &delta, m.kmax, m.l, m.d, m.samples, cfg.run.seed, None)?;
        let ratio = prev.filter(|&p| p > 0.0).map(|p| fmt(est.mc.estimate / p)).unwrap_or_default();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{ratio}",
            fmt(g),
            fmt(est.mc.estimate),
            fmt(est.mc.ci95),
            fmt(est.majorant),
            fmt(est.shell_majorant)
        );
        prev = Some(est.mc.estimate);
    }
    out.write("excluded.csv", &csv)?;
    out.write_json("summability.json", &summability_check(&delta, m.d, m.summability_tol)?)?;
    Ok(())
}

/// Desk model and scar options described by the `[scar]` section.
pub fn scar_setup(cfg: &RunConfig) -> Result<(ScarSection, DeskModel, ScarOptions)> {
    let s = cfg.scar.clone().unwrap_or_default();
    let model = DeskModel {
        omega: s.omega,
        beta: s.beta,
        lambda: s.lambda_u,
        lambda_tilde: s.lambda_v,
        epsilon: s.epsilon,
        h: s.h,
        band: (s.band[0], s.band[1]),
        nt: s.nt,
        nh: s.nh,
    };
    let delta = cfg.delta.build()?;
    let delta_exp = s.delta_exp.unwrap_or(default_delta_exp(1));
    let opts = ScarOptions {
        lambda: s.lambda,
        delta_exp,
        c1: s.c1,
        delta: delta.clone(),
        torus_window: s.torus_window.unwrap_or(2.0 * s.h),
        r: s.r,
        dim_cap: s.dim_cap,
    };
    Ok((s, model, opts))
}

pub fn cmd_scar(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let (s, model, opts) = scar_setup(cfg)?;
    let delta = opts.delta.clone();
    let delta_exp = opts.delta_exp;
    let kam;
    let second = DeskSecondOrder(model.clone());
    let k0: &dyn K0Evaluator = if s.evaluator == "kam" {
        kam = DeskKam::new(model.clone())?;
        &kam
    } else {
        &second
    };
    let report = scar_run(k0, &model, &opts)?;
    let (ia, ib) = report.action_band;
    let diffeo =
        local_diffeo_check(&second, &[ia], &[ib], s.epsilon, s.diffeo_grid, s.diffeo_pairs, cfg.run.seed, 1e-4 * s.epsilon.max(1e-6))?;
    let ms = index_set_in_box(&[ia], &[ib], s.h, &[0])?;
    let grid: Vec<f64> = (0..s.sweep_points).map(|i| 2.0 * s.epsilon * i as f64 / (s.sweep_points.max(2) - 1) as f64).collect();
    let sweep = crossing_sweep(&second, &ms, s.h, &[0], delta_exp, s.c1, &delta, &grid)?;
    let proxy =
        zero_count_proxy(&second, &[ia], &[ib], &[0], &s.proxy_h, (0.0, 2.0 * s.epsilon), s.proxy_samples, delta_exp, cfg.run.seed)?;
    let mut csv = String::from("m,mu,window_count,eigenvalue,overlap,mass,passes\n");
    for r in &report.matches {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{}",
            r.m[0],
            fmt(r.mu),
            r.window_count,
            r.eigenvalue.map(fmt).unwrap_or_default(),
            fmt(r.overlap),
            fmt(r.mass),
            r.passes
        );
    }
    out.write("matches.csv", &csv)?;
    if report.empty {
        log::warn!("the index set 𝓜_h is empty for this band");
    }
    out.write_json(
        "scar.json",
        &json!({
            "empty": report.empty,
            "h": report.h,
            "epsilon": report.epsilon,
            "delta_exp": report.delta_exp,
            "halfwidth": report.halfwidth,
            "r": report.r,
            "action_band": [ia, ib],
            "weyl": report.weyl,
            "separation": report.separation,
            "census": report.census,
            "mass_threshold": report.mass_threshold,
            "matched": report.matched,
            "matched_passing": report.matched_passing,
            "pass_fraction": report.pass_fraction(),
            "table_defect_vs_second_order": report.table_defect_vs_second_order,
            "table": report.table,
            "diffeo": diffeo,
            "crossing_sweep": sweep,
            "zero_count_proxy": proxy,
        }),
    )
}

pub fn cmd_gamma(cfg: &RunConfig, out: &mut Output) -> Result<()> {
    let g = cfg.gamma.as_ref().ok_or_else(|| Error::Config("missing [gamma] section".into()))?;
    let alphas = if g.alphas.is_empty() { vec![cfg.delta.alpha] } else { g.alphas.clone() };
    let mut csv = String::from("alpha,r,n,eta,log_gamma,argmax_t\n");
    for &a in &alphas {
        let delta = cfg.delta.build_with_alpha(a)?;
        for &r in &g.r {
            for &n in &g.n {
                for &eta in &g.eta {
                    let (lg, t) = log_gamma_extremal(r, n, eta, &delta)?;
                    let _ = writeln!(csv, "{},{r},{n},{},{},{}", fmt(a), fmt(eta), fmt(lg), fmt(t));
                }
            }
        }
    }
    out.write("gamma.csv", &csv)?;
    if !g.kappa.is_empty() && !g.t_lower.is_empty() {
        let mut lcsv = String::from("alpha,kappa,t_lower,r,n,eta,log_gamma,log_bound,holds\n");
        for &a in &alphas {
            let delta = cfg.delta.build_with_alpha(a)?;
            for &kappa in &g.kappa {
                for &t in &g.t_lower {
                    for &r in &g.r {
                        for &n in &g.n {
                            let lb = lemma_ba_bound(&delta, kappa, t, n, r)?;
                            if !(lb.eta > 0.0) {
                                continue;
                            }
                            let (lg, _) = log_gamma_extremal(r, n, lb.eta, &delta)?;
                            let _ = writeln!(
                                lcsv,
                                "{},{},{},{r},{n},{},{},{},{}",
                                fmt(a),
                                fmt(kappa),
                                fmt(t),
                                fmt(lb.eta),
                                fmt(lg),
                                fmt(lb.log_bound),
                                lg <= lb.log_bound + 1e-8
                            );
                        }
                    }
                }
            }
        }
        out.write("lemma.csv", &lcsv)?;
    }
    Ok(())
}
