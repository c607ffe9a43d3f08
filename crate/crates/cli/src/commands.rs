//! Subcommand implementations. Each command is a pure-ish function from
//! config (plus input artifacts) to output artifacts, so the binary and
//! the integration tests share one code path.

use std::path::{Path, PathBuf};

use dpdiff_core::autodiff::ParamStore;
use dpdiff_core::data::{block_mask, random_mask, stride_mask, MaskSpec};
use dpdiff_core::diagnostics::{
    clip_stats, ecdf_ccdf_export, rho_emp, ClipStats, GradLog, Partition, TailQuantile,
    TailSummary,
};
use dpdiff_core::diffusion::{build_schedule, sample_conditional};
use dpdiff_core::metrics::{metric_report, MetricReport};
use dpdiff_core::model::{
    condition_features, BoundConfig, BoundOpKind, ComponentSwitches, Denoiser,
};
use dpdiff_core::rng::CounterRng;
use dpdiff_core::sensitivity::{
    brute_force_grad_max, convex_ratio, rho_bound, s_aware, MicroNet, ReferenceMagnitudes,
};
use dpdiff_core::tensor::Tensor;
use dpdiff_core::train::{train, TrainMode, TrainOutcome};
use dpdiff_core::{CoreError, Result};

use crate::artifacts::{
    checkpoint_from_string, checkpoint_to_string, ecdf_to_csv, fmt, grad_log_from_csv,
    grad_log_to_csv, load_into, write_atomic,
};
use crate::config::RunConfig;
use crate::data_io::load_dataset;

/// Paths produced by a training run.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub checkpoint: PathBuf,
    pub grad_log: PathBuf,
    pub report: PathBuf,
}

/// Train per the config and persist checkpoint, gradient log, and a run
/// report into `out_dir`.
pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<RunArtifacts> {
    let dataset = load_dataset(cfg)?;
    let outcome = train(&cfg.train, &dataset.train)?;

    let artifacts = RunArtifacts {
        checkpoint: out_dir.join("checkpoint.txt"),
        grad_log: out_dir.join("grad_log.csv"),
        report: out_dir.join("train_report.txt"),
    };
    write_atomic(
        &artifacts.checkpoint,
        &checkpoint_to_string(cfg, &outcome.params, &outcome.ema),
    )?;
    let logged_c = match cfg.train.mode {
        TrainMode::NonDp => f64::INFINITY,
        _ => cfg.train.dp.clip_c,
    };
    write_atomic(&artifacts.grad_log, &grad_log_to_csv(&outcome.log, logged_c))?;
    write_atomic(&artifacts.report, &train_report(cfg, &outcome))?;
    Ok(artifacts)
}

fn train_report(cfg: &RunConfig, outcome: &TrainOutcome) -> String {
    let mut s = String::new();
    s.push_str("# training run report\n");
    s.push_str(&format!("mode = {}\n", cfg.train.mode.name()));
    s.push_str(&format!("steps = {}\n", cfg.train.steps));
    s.push_str(&format!("seed = {}\n", cfg.train.seed));
    s.push_str(&format!("first_loss = {}\n", fmt(outcome.losses[0])));
    s.push_str(&format!("final_loss = {}\n", fmt(outcome.final_loss())));
    if !outcome.val_losses.is_empty() {
        s.push_str("\n# validation (step, loss)\n");
        for (step, loss) in &outcome.val_losses {
            s.push_str(&format!("val {} {}\n", step, fmt(*loss)));
        }
    }
    s
}

/// Compare two gradient logs (Table 3 / Table 4 layouts) and export
/// ECDF/CCDF tables for both.
pub fn cmd_diagnose(vanilla_log: &Path, aware_log: &Path, out_dir: &Path) -> Result<String> {
    let read = |p: &Path| -> Result<(GradLog, f64)> {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CoreError::InvalidArgument(format!("reading {}: {e}", p.display())))?;
        grad_log_from_csv(&text)
    };
    let (van, c_van) = read(vanilla_log)?;
    let (aw, c_aw) = read(aware_log)?;
    if c_van != c_aw {
        return Err(CoreError::InvalidArgument(format!(
            "clip thresholds differ: vanilla C = {}, aware C = {}; runs are not comparable",
            fmt(c_van),
            fmt(c_aw)
        )));
    }
    let report = diagnose_report(&van, &aw, c_van)?;

    let norms = |log: &GradLog| -> Vec<f64> {
        log.records().iter().map(|r| r.total_norm).collect()
    };
    write_atomic(
        &out_dir.join("ecdf_vanilla.csv"),
        &ecdf_to_csv(&ecdf_ccdf_export(&norms(&van), 200)?),
    )?;
    write_atomic(
        &out_dir.join("ecdf_aware.csv"),
        &ecdf_to_csv(&ecdf_ccdf_export(&norms(&aw), 200)?),
    )?;
    write_atomic(&out_dir.join("diagnose_report.txt"), &report)?;
    Ok(report)
}

/// The Table-3 / Table-4 style comparison text.
pub fn diagnose_report(van: &GradLog, aw: &GradLog, clip_c: f64) -> Result<String> {
    let tv = TailSummary::from_log(van)?;
    let ta = TailSummary::from_log(aw)?;
    let mut s = String::new();
    s.push_str(&format!("# gradient tail comparison (clip_c = {})\n", fmt(clip_c)));
    s.push_str("# columns: S_other S_cond S_total rho_emp rho_cond\n");
    for (label, q) in [("p95", TailQuantile::P95), ("p99", TailQuantile::P99)] {
        let re = rho_emp(&ta, &tv, Partition::Total, q)?;
        let rc = rho_emp(&ta, &tv, Partition::Cond, q)?;
        s.push_str(&format!(
            "{label} vanilla {} {} {} - -\n",
            fmt(tv.other.at(q)),
            fmt(tv.cond.at(q)),
            fmt(tv.total.at(q)),
        ));
        s.push_str(&format!(
            "{label} aware {} {} {} {} {}\n",
            fmt(ta.other.at(q)),
            fmt(ta.cond.at(q)),
            fmt(ta.total.at(q)),
            fmt(re),
            fmt(rc),
        ));
    }
    s.push_str("\n# clipping behavior\n");
    s.push_str("# columns: p_clip eta_p10 eta_p50 eta_p90 eta_p99 eta_mean\n");
    let line = |label: &str, c: &ClipStats| {
        format!(
            "{label} {} {} {} {} {} {}\n",
            fmt(c.p_clip),
            fmt(c.eta_q10),
            fmt(c.eta_q50),
            fmt(c.eta_q90),
            fmt(c.eta_q99),
            fmt(c.eta_mean)
        )
    };
    s.push_str(&line("vanilla", &clip_stats(van, clip_c)?));
    s.push_str(&line("aware", &clip_stats(aw, clip_c)?));
    Ok(s)
}

/// Evaluation task kinds, mapped to mask families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTask {
    /// Random and stride masks (imputation / structured missingness).
    Interpolation,
    /// Suffix block masks (forecasting).
    Forecasting,
}

impl EvalTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "interpolation" => Ok(EvalTask::Interpolation),
            "forecasting" => Ok(EvalTask::Forecasting),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown task `{other}` (expected interpolation or forecasting)"
            ))),
        }
    }
}

/// Evaluate a checkpoint on its configured test split: sample each test
/// window conditionally, score against the reference.
pub fn cmd_evaluate(checkpoint: &Path, task: EvalTask, out_dir: &Path) -> Result<String> {
    let text = std::fs::read_to_string(checkpoint).map_err(|e| {
        CoreError::InvalidArgument(format!("reading {}: {e}", checkpoint.display()))
    })?;
    let ckpt = checkpoint_from_string(&text)?;
    let cfg = &ckpt.config;
    let den = Denoiser::build(
        cfg.train.model.clone(),
        cfg.train.bounds,
        match cfg.train.mode {
            TrainMode::DpAware => cfg.train.switches,
            _ => ComponentSwitches::none(),
        },
    )?;
    // Evaluate the EMA parameters, which is what checkpoints are for.
    let mut params = den.init_params(&mut CounterRng::new(0, "scratch"));
    load_into(&mut params, &ckpt.ema)?;

    let dataset = load_dataset(cfg)?;
    if dataset.test.is_empty() {
        return Err(CoreError::Empty(
            "no test windows; increase data.n or lower data.train_frac".into(),
        ));
    }
    let report = evaluate_model(&den, &params, &dataset.test, cfg, task)?;
    let text = metric_report_text(&report, task);
    write_atomic(&out_dir.join("metrics_report.txt"), &text)?;
    Ok(text)
}

/// Core of `evaluate`, shared with ablation rows.
pub fn evaluate_model(
    den: &Denoiser,
    params: &ParamStore,
    test: &[Tensor],
    cfg: &RunConfig,
    task: EvalTask,
) -> Result<MetricReport> {
    let l = cfg.train.model.seq_len;
    let sched = build_schedule(
        cfg.train.diffusion_t,
        dpdiff_core::diffusion::BETA_START,
        dpdiff_core::diffusion::BETA_END,
    )?;
    let mut rng = CounterRng::new(cfg.train.seed, "eval");
    let n_eval = test.len().min(16);
    let mut pred_flat = Vec::new();
    let mut target_flat = Vec::new();
    let mut mask_flat = Vec::new();
    for (i, window) in test.iter().take(n_eval).enumerate() {
        let mask: MaskSpec = match task {
            EvalTask::Forecasting => block_mask(l, l / 3)?,
            EvalTask::Interpolation => {
                if i % 2 == 0 {
                    random_mask(l, 0.5, &mut rng)?
                } else {
                    stride_mask(l, 2, &mut rng)?
                }
            }
        };
        let sample = sample_conditional(den, params, window, &mask, &sched, &mut rng)?;
        let k = cfg.train.model.channels;
        for pos in 0..l {
            for ch in 0..k {
                pred_flat.push(sample.data()[pos * k + ch]);
                target_flat.push(window.data()[pos * k + ch]);
                mask_flat.push(mask.bits[pos]);
            }
        }
    }
    metric_report(&pred_flat, &target_flat, &mask_flat)
}

fn metric_report_text(r: &MetricReport, task: EvalTask) -> String {
    let mut s = String::new();
    s.push_str("# evaluation report (divergences pooled over all masked values)\n");
    s.push_str(&format!(
        "task = {}\n",
        match task {
            EvalTask::Interpolation => "interpolation",
            EvalTask::Forecasting => "forecasting",
        }
    ));
    s.push_str(&format!("point_rmse = {}\n", fmt(r.point.rmse)));
    s.push_str(&format!("point_mae = {}\n", fmt(r.point.mae)));
    s.push_str(&format!("point_mape = {}\n", fmt(r.point.mape)));
    s.push_str(&format!("point_r2 = {}\n", fmt(r.point.r2)));
    s.push_str(&format!("dist_kl = {}\n", fmt(r.dist.kl)));
    s.push_str(&format!("dist_js = {}\n", fmt(r.dist.js)));
    s.push_str(&format!("dist_ws = {}\n", fmt(r.dist.ws)));
    s.push_str(&format!("dist_ks = {}\n", fmt(r.dist.ks)));
    s.push_str(&format!("dist_mmd = {}\n", fmt(r.dist.mmd)));
    s.push_str(&format!("temp_spec_dist = {}\n", fmt(r.spectral_dist)));
    // CSV row form for aggregation across runs.
    s.push_str("\n# csv: rmse,mae,mape,r2,kl,js,ws,ks,mmd,spec\n");
    s.push_str(&format!(
        "{},{},{},{},{},{},{},{},{},{}\n",
        fmt(r.point.rmse),
        fmt(r.point.mae),
        fmt(r.point.mape),
        fmt(r.point.r2),
        fmt(r.dist.kl),
        fmt(r.dist.js),
        fmt(r.dist.ws),
        fmt(r.dist.ks),
        fmt(r.dist.mmd),
        fmt(r.spectral_dist)
    ));
    s
}

/// Ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblateAxis {
    Components,
    Operator,
    Tightness,
    ClipC,
}

impl AblateAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(AblateAxis::Components),
            "operator" => Ok(AblateAxis::Operator),
            "tightness" => Ok(AblateAxis::Tightness),
            "clip_C" | "clip_c" => Ok(AblateAxis::ClipC),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown ablation axis `{other}` (expected components, operator, tightness, clip_C)"
            ))),
        }
    }
}

/// Tightness scales of the published ablation.
pub const TIGHTNESS_SCALES: [f64; 4] = [1.00, 0.90, 0.75, 0.50];
/// Clip thresholds of the published sensitivity study.
pub const CLIP_GRID: [f64; 3] = [0.5, 1.0, 2.0];

/// Run the matched grid along one axis and emit a comparison table.
pub fn cmd_ablate(base: &RunConfig, axis: AblateAxis, out_dir: &Path) -> Result<String> {
    let dataset = load_dataset(base)?;
    let mut rows: Vec<(String, RunConfig)> = Vec::new();
    match axis {
        AblateAxis::Components => {
            let mut vanilla = base.clone();
            vanilla.train.mode = TrainMode::DpVanilla;
            rows.push(("DP-vanilla".into(), vanilla));
            for (name, sw) in [
                ("DP-aware (only c-bounding)", ComponentSwitches::only_c()),
                (
                    "DP-aware (only AdaLN bounding)",
                    ComponentSwitches::only_modulation(),
                ),
                ("DP-aware (full)", ComponentSwitches::full()),
            ] {
                let mut cfg = base.clone();
                cfg.train.mode = TrainMode::DpAware;
                cfg.train.switches = sw;
                rows.push((name.into(), cfg));
            }
        }
        AblateAxis::Operator => {
            for op in BoundOpKind::all() {
                let mut cfg = base.clone();
                cfg.train.mode = TrainMode::DpAware;
                cfg.train.bounds.operator = op;
                if op == BoundOpKind::SoftClampBand && cfg.train.bounds.band_eps <= 0.0 {
                    cfg.train.bounds.band_eps =
                        BoundConfig::default_band_eps(cfg.train.bounds.alpha_max);
                }
                rows.push((op.name().to_string(), cfg));
            }
        }
        AblateAxis::Tightness => {
            for scale in TIGHTNESS_SCALES {
                let mut cfg = base.clone();
                cfg.train.mode = TrainMode::DpAware;
                cfg.train.bounds = base.train.bounds.scaled(scale);
                rows.push((format!("scale {scale:.2}"), cfg));
            }
        }
        AblateAxis::ClipC => {
            for c in CLIP_GRID {
                let mut cfg = base.clone();
                cfg.train.dp.clip_c = c;
                rows.push((format!("C {c}"), cfg));
            }
        }
    }

    let mut s = String::new();
    s.push_str(&format!("# ablation axis: {axis:?}\n"));
    s.push_str("# columns: variant final_loss grad_p99 p_clip eta_mean\n");
    for (name, cfg) in &rows {
        let outcome = train(&cfg.train, &dataset.train)?;
        let tail = TailSummary::from_log(&outcome.log)?;
        let cs = clip_stats(&outcome.log, cfg.train.dp.clip_c)?;
        s.push_str(&format!(
            "{name} | {} {} {} {}\n",
            fmt(outcome.final_loss()),
            fmt(tail.total.p99),
            fmt(cs.p_clip),
            fmt(cs.eta_mean)
        ));
    }
    write_atomic(&out_dir.join("ablation_report.txt"), &s)?;
    Ok(s)
}

/// Sensitivity bound report: calibration-run reference magnitudes, a
/// micro-network dominance check at the configured bounds, and the
/// Appendix-B convex decomposition.
pub fn cmd_bounds(cfg: &RunConfig, calibration_steps: usize, out_dir: &Path) -> Result<String> {
    let refs = calibrate_references(cfg, calibration_steps)?;

    let mut rng = CounterRng::new(cfg.train.seed, "bounds.micro");
    let mut bounds = cfg.train.bounds;
    if bounds.operator == BoundOpKind::SoftClampBand && bounds.band_eps <= 0.0 {
        bounds.band_eps = BoundConfig::default_band_eps(bounds.alpha_max);
    }
    if !bounds.c_max.is_finite()
        || !bounds.gamma_max.is_finite()
        || !bounds.beta_max.is_finite()
        || !bounds.alpha_max.is_finite()
    {
        return Err(CoreError::InvalidArgument(
            "bounds report requires finite limits (infinite sentinel has no S_aware)".into(),
        ));
    }
    let micro = MicroNet::random(6, 4, 3, 8, bounds, &mut rng)?;
    let x_max = 2.0;
    let consts = micro.constants(x_max);
    let s = s_aware(&consts, &bounds);
    let observed = brute_force_grad_max(&micro, 200, x_max, &mut rng)?;
    let rho = rho_bound(s, cfg.train.dp.clip_c)?;
    let cr = convex_ratio(&consts, &bounds, &refs)?;

    let mut out = String::new();
    out.push_str("# sensitivity bound report (micro-network protocol)\n");
    out.push_str(&format!("operator = {}\n", bounds.operator.name()));
    out.push_str(&format!(
        "bounds: c_max = {}, gamma_max = {}, beta_max = {}, alpha_max = {}\n",
        fmt(bounds.c_max),
        fmt(bounds.gamma_max),
        fmt(bounds.beta_max),
        fmt(bounds.alpha_max)
    ));
    out.push_str(&format!(
        "constants: A0 = {}, a_c = {}, a_gamma = {}, a_beta = {}, a_alpha = {}\n",
        fmt(consts.a0),
        fmt(consts.a_c),
        fmt(consts.a_gamma),
        fmt(consts.a_beta),
        fmt(consts.a_alpha)
    ));
    out.push_str(&format!(
        "constants: L_LN = {}, L_F = {}, U_max = {}, H_max = {}, G_ell = {}\n",
        fmt(consts.l_ln),
        fmt(consts.l_f),
        fmt(consts.u_max),
        fmt(consts.h_max),
        fmt(consts.g_ell)
    ));
    out.push_str(&format!("S_aware = {}\n", fmt(s)));
    out.push_str(&format!("brute_force_max = {}\n", fmt(observed)));
    out.push_str(&format!(
        "dominance = {}\n",
        if observed <= s { "holds" } else { "VIOLATED" }
    ));
    out.push_str(&format!("rho_bound = {} (C = {})\n", fmt(rho), fmt(cfg.train.dp.clip_c)));
    out.push_str(&format!(
        "references: C_ref = {}, Gamma_ref = {}, B_ref = {}, A_ref = {}\n",
        fmt(refs.c_ref),
        fmt(refs.gamma_ref),
        fmt(refs.b_ref),
        fmt(refs.a_ref)
    ));
    out.push_str(&format!(
        "lambda = ({}, {}, {}, {}, {})\n",
        fmt(cr.lambdas[0]),
        fmt(cr.lambdas[1]),
        fmt(cr.lambdas[2]),
        fmt(cr.lambdas[3]),
        fmt(cr.lambdas[4])
    ));
    out.push_str(&format!(
        "r = ({}, {}, {}, {})\n",
        fmt(cr.rs[0]),
        fmt(cr.rs[1]),
        fmt(cr.rs[2]),
        fmt(cr.rs[3])
    ));
    out.push_str(&format!("convex_ratio = {}\n", fmt(cr.ratio)));
    write_atomic(&out_dir.join("bound_report.txt"), &out)?;
    Ok(out)
}

/// Reference magnitudes: p99 of the pre-bound conditioning quantities
/// measured on a short non-private calibration run, floored at 1e-3 so
/// zero-initialized gates cannot produce degenerate references.
pub fn calibrate_references(cfg: &RunConfig, steps: usize) -> Result<ReferenceMagnitudes> {
    let mut calib = cfg.clone();
    calib.train.mode = TrainMode::NonDp;
    calib.train.steps = steps.max(1);
    calib.train.log_stride = calib.train.steps; // log only step 0
    calib.train.val_every = 0;
    let dataset = load_dataset(&calib)?;
    let outcome = train(&calib.train, &dataset.train)?;

    // Measure on the trained parameters over a sample of windows.
    let model = &calib.train.model;
    let den = Denoiser::build(model.clone(), calib.train.bounds, ComponentSwitches::none())?;
    let _ = &den; // graph not needed; measurements use the stores directly
    let params = &outcome.params;
    let embed_w = params.get("cond.embed.w").ok_or_else(|| {
        CoreError::InvalidArgument("calibration: missing cond.embed.w".into())
    })?;
    let embed_b = params.get("cond.embed.b").unwrap();
    let mut rng = CounterRng::new(cfg.train.seed, "calibration");
    let sched_t = calib.train.diffusion_t;
    let mut c_norms = Vec::new();
    let mut gamma_abs = Vec::new();
    let mut beta_abs = Vec::new();
    let mut alpha_abs = Vec::new();
    let samples = 64usize;
    for _ in 0..samples {
        let window = &dataset.train[rng.below(dataset.train.len())];
        let mask = random_mask(model.seq_len, 0.5, &mut rng)?;
        let t = rng.below(sched_t);
        let feat = condition_features(window, &mask.bits, t, sched_t, model)?;
        // Pre-clip condition embedding c = W f + b.
        let (k, f_dim) = embed_w.dims2()?;
        debug_assert_eq!(f_dim, feat.len());
        let mut c = vec![0.0f64; k];
        for (i, ci) in c.iter_mut().enumerate() {
            *ci = embed_b.data()[i]
                + embed_w
                    .row(i)
                    .iter()
                    .zip(&feat)
                    .map(|(w, x)| w * x)
                    .sum::<f64>();
        }
        c_norms.push(c.iter().map(|x| x * x).sum::<f64>().sqrt());
        // Pre-bound modulation magnitudes per block.
        for blk in 0..model.depth {
            for (comp, sink) in [
                ("gamma", &mut gamma_abs),
                ("beta", &mut beta_abs),
                ("alpha", &mut alpha_abs),
            ] {
                let w = params
                    .get(&format!("cond.block{blk}.{comp}_w"))
                    .ok_or_else(|| {
                        CoreError::InvalidArgument(format!(
                            "calibration: missing cond.block{blk}.{comp}_w"
                        ))
                    })?;
                let b = params.get(&format!("cond.block{blk}.{comp}_b")).unwrap();
                let (d, _) = w.dims2()?;
                let mut max_abs = 0.0f64;
                for r in 0..d {
                    let v = b.data()[r]
                        + w.row(r).iter().zip(&c).map(|(wij, cj)| wij * cj).sum::<f64>();
                    max_abs = max_abs.max(v.abs());
                }
                sink.push(max_abs);
            }
        }
    }
    let p99 = |v: &[f64]| -> Result<f64> {
        Ok(dpdiff_core::diagnostics::percentile(v, 0.99)?.max(1e-3))
    };
    Ok(ReferenceMagnitudes {
        c_ref: p99(&c_norms)?,
        gamma_ref: p99(&gamma_abs)?,
        b_ref: p99(&beta_abs)?,
        a_ref: p99(&alpha_abs)?,
    })
}
