//! Matched-stream training loops for the three run modes.
//!
//! The diagnostic contract of the comparison experiments is that a
//! DP-vanilla and a DP-aware run with the same seed consume identical
//! random streams for data order, mask generation, diffusion noise, and
//! DP noise. Each stream is a named counter-based generator, and the
//! loop records every stream position per step so tests can assert the
//! two trajectories stayed aligned. Under that contract any difference
//! between the runs is attributable to the bounded conditioning alone.

use crate::autodiff::{GradientVector, ParamStore};
use crate::data::{block_mask, random_mask, stride_mask, MaskKind, MaskSpec};
use crate::diagnostics::{GradLog, GradLogRecord};
use crate::diffusion::{assemble_inputs, build_schedule, DiffusionSchedule, BETA_END, BETA_START};
use crate::dp::{clip_gradient, privatize_batch, DPConfig, OptimConfig, OptimState};
use crate::error::{CoreError, Result};
use crate::model::{
    partition_gradient, BoundConfig, ComponentSwitches, Denoiser, ModelConfig, ParamPartition,
};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Which mechanism the run applies to per-example gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Plain mean gradient; no clipping, no noise. Bounds follow the
    /// configured switches.
    NonDp,
    /// DP-SGD (clip + noise) on the unbounded architecture.
    DpVanilla,
    /// Identical DP-SGD mechanism plus bounded conditioning.
    DpAware,
}

impl TrainMode {
    pub fn name(&self) -> &'static str {
        match self {
            TrainMode::NonDp => "non_dp",
            TrainMode::DpVanilla => "dp_vanilla",
            TrainMode::DpAware => "dp_aware",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "non_dp" => Ok(TrainMode::NonDp),
            "dp_vanilla" => Ok(TrainMode::DpVanilla),
            "dp_aware" => Ok(TrainMode::DpAware),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown train mode `{other}` (expected non_dp, dp_vanilla, dp_aware)"
            ))),
        }
    }
}

/// Everything needed to reproduce a run bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub bounds: BoundConfig,
    /// Component switches used when `mode` is [`TrainMode::DpAware`];
    /// the other modes always run unbounded.
    pub switches: ComponentSwitches,
    pub mode: TrainMode,
    pub dp: DPConfig,
    pub optim: OptimConfig,
    pub diffusion_t: usize,
    pub steps: usize,
    pub seed: u64,
    pub mask: MaskKind,
    /// Log per-example gradient records every `log_stride` steps.
    pub log_stride: usize,
    /// Compute a validation loss every `val_every` steps (0 disables).
    pub val_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.bounds.validate()?;
        if self.mode != TrainMode::NonDp {
            self.dp.validate()?;
        }
        if self.steps == 0 {
            return Err(CoreError::InvalidArgument("steps must be positive".into()));
        }
        if self.log_stride == 0 {
            return Err(CoreError::InvalidArgument(
                "log_stride must be positive".into(),
            ));
        }
        if self.diffusion_t == 0 {
            return Err(CoreError::InvalidArgument(
                "diffusion_t must be positive".into(),
            ));
        }
        Ok(())
    }

    fn effective_switches(&self) -> ComponentSwitches {
        match self.mode {
            // The DP-vanilla baseline is the unbounded architecture by
            // definition; non-DP runs honor the configured switches so
            // expressiveness studies can compare bounded against
            // unbounded models without any privacy mechanism.
            TrainMode::DpVanilla => ComponentSwitches::none(),
            _ => self.switches,
        }
    }

    /// DP mechanism parameters actually applied: non-DP degenerates to
    /// the exact mean (infinite clip, zero noise).
    fn effective_dp(&self) -> DPConfig {
        match self.mode {
            TrainMode::NonDp => DPConfig {
                clip_c: f64::INFINITY,
                noise_sigma: 0.0,
                batch_b: self.dp.batch_b,
            },
            _ => self.dp,
        }
    }
}

/// Stream positions recorded at the start of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamTrace {
    pub step: usize,
    pub data: u64,
    pub mask: u64,
    pub diffusion: u64,
    pub dp: u64,
}

/// Everything a run produces in memory.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub ema: ParamStore,
    pub log: GradLog,
    /// Mean batch training loss per step.
    pub losses: Vec<f64>,
    /// (step, validation loss) pairs.
    pub val_losses: Vec<(usize, f64)>,
    pub trace: Vec<StreamTrace>,
}

impl TrainOutcome {
    /// Summary training loss of the run: mean over the last
    /// min(100, steps) steps, which smooths per-batch noise.
    pub fn final_loss(&self) -> f64 {
        let n = self.losses.len().min(100);
        self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64
    }
}

fn draw_mask(kind: &MaskKind, l: usize, rng: &mut CounterRng) -> Result<MaskSpec> {
    match kind {
        MaskKind::Random { ratio } => random_mask(l, *ratio, rng),
        MaskKind::Block { pred_len } => {
            // Consume one draw regardless so stream alignment does not
            // depend on the mask kind.
            let _ = rng.next_u64();
            block_mask(l, *pred_len)
        }
        MaskKind::Stride { num_blocks } => stride_mask(l, *num_blocks, rng),
    }
}

fn validation_loss(
    den: &Denoiser,
    params: &ParamStore,
    windows: &[Tensor],
    cfg: &TrainConfig,
    sched: &DiffusionSchedule,
    step: usize,
) -> Result<f64> {
    // A dedicated stream keyed by the step keeps validation fully
    // deterministic without touching the training streams.
    let mut rng = CounterRng::new(cfg.seed, &format!("validation.{step}"));
    let l = cfg.model.seq_len;
    let k = cfg.model.channels;
    let n_val = 8.min(windows.len());
    let mut total = 0.0;
    let mut ws = den.graph.workspace();
    for _ in 0..n_val {
        let x0 = &windows[rng.below(windows.len())];
        let mask = draw_mask(&cfg.mask, l, &mut rng)?;
        let t = rng.below(sched.t_steps());
        let mut eps = Tensor::zeros(vec![l, k]);
        rng.fill_normal(eps.data_mut());
        let inputs = assemble_inputs(den, x0, &mask, t, &eps, sched)?;
        den.graph.forward(params, &inputs, &mut ws)?;
        total += den.graph.loss_value(&ws)?;
    }
    Ok(total / n_val as f64)
}

/// Run one training loop over pre-windowed data.
pub fn train(cfg: &TrainConfig, windows: &[Tensor]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(CoreError::Empty("training requires at least one window".into()));
    }
    let l = cfg.model.seq_len;
    let k = cfg.model.channels;
    for (i, w) in windows.iter().enumerate() {
        if w.shape() != [l, k] {
            return Err(CoreError::ShapeMismatch {
                context: format!("training window {i}"),
                expected: vec![l, k],
                got: w.shape().to_vec(),
            });
        }
    }

    let den = Denoiser::build(cfg.model.clone(), cfg.bounds, cfg.effective_switches())?;
    let sched = build_schedule(cfg.diffusion_t, BETA_START, BETA_END)?;
    let dp = cfg.effective_dp();
    let partition: ParamPartition = den.partition();

    // Named streams; vanilla and aware runs with the same seed share them.
    let mut init_rng = CounterRng::new(cfg.seed, "init");
    let mut data_rng = CounterRng::new(cfg.seed, "data_order");
    let mut mask_rng = CounterRng::new(cfg.seed, "mask");
    let mut diff_rng = CounterRng::new(cfg.seed, "diffusion_noise");
    let mut dp_rng = CounterRng::new(cfg.seed, "dp_noise");

    let mut params = den.init_params(&mut init_rng);
    let mut optim = OptimState::new(&params, cfg.optim);
    let mut ws = den.graph.workspace();

    let mut log = GradLog::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut val_losses = Vec::new();
    let mut trace = Vec::with_capacity(cfg.steps);

    let b = dp.batch_b;
    let mut grads: Vec<GradientVector> = Vec::with_capacity(b);
    for step in 0..cfg.steps {
        trace.push(StreamTrace {
            step,
            data: data_rng.position(),
            mask: mask_rng.position(),
            diffusion: diff_rng.position(),
            dp: dp_rng.position(),
        });

        grads.clear();
        let mut batch_loss = 0.0;
        let log_this = step % cfg.log_stride == 0;
        for _ in 0..b {
            let x0 = &windows[data_rng.below(windows.len())];
            let mask = draw_mask(&cfg.mask, l, &mut mask_rng)?;
            let t = diff_rng.below(sched.t_steps());
            let mut eps = Tensor::zeros(vec![l, k]);
            diff_rng.fill_normal(eps.data_mut());

            let inputs = assemble_inputs(&den, x0, &mask, t, &eps, &sched)?;
            den.graph.forward(&params, &inputs, &mut ws)?;
            batch_loss += den.graph.loss_value(&ws)?;
            let g = den.graph.backward(&params, &inputs, &ws)?;

            if log_this {
                let (_, _, norms) = partition_gradient(&g, &partition)?;
                let (_, eta) = clip_gradient(&g, dp.clip_c);
                log.push(GradLogRecord {
                    step,
                    total_norm: norms.total,
                    cond_norm: norms.cond,
                    other_norm: norms.other,
                    eta,
                })?;
            }
            grads.push(g);
        }
        losses.push(batch_loss / b as f64);

        let update = privatize_batch(&grads, &dp, &mut dp_rng)?;
        optim.apply(&mut params, &update)?;

        if cfg.val_every > 0 && step % cfg.val_every == 0 {
            val_losses.push((
                step,
                validation_loss(&den, &params, windows, cfg, &sched, step)?,
            ));
        }
    }

    let ema = optim.ema_params().clone();
    Ok(TrainOutcome {
        params,
        ema,
        log,
        losses,
        val_losses,
        trace,
    })
}
