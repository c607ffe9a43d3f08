//! Run configuration: flat `key = value` files with `[section]` headers.
//!
//! Every hyperparameter has a named key; the `paper` profile defaults
//! match the published training setup (lr 7e-4, weight decay 2e-5,
//! warmup 1000, EMA 0.999, batch 96, 1000 diffusion steps), the `desk`
//! profile shrinks the model and schedule to laptop scale. Explicit keys
//! override profile defaults. Unknown keys are rejected by name so typos
//! fail loudly instead of silently training the wrong model.

use dpdiff_core::data::MaskKind;
use dpdiff_core::diffusion::{DESK_T, PAPER_T};
use dpdiff_core::dp::{DPConfig, OptimConfig};
use dpdiff_core::model::{BoundConfig, BoundOpKind, ComponentSwitches, ModelConfig};
use dpdiff_core::train::{TrainConfig, TrainMode};
use dpdiff_core::{CoreError, Result};

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    /// Built-in rare-event generator.
    Synthetic {
        n: usize,
        rare_event_prob: f64,
        rare_scale: f64,
    },
    /// ETT-style CSV: first column timestamp (ignored), remaining columns
    /// numeric channels; the first `channels` columns are used.
    Csv { path: String },
}

/// Full description of one run; replayable bit-exactly from this plus
/// nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub profile: String,
    pub train: TrainConfig,
    pub data: DataSource,
    /// Fraction of windows used for training (chronological split).
    pub train_frac: f64,
}

impl RunConfig {
    /// Desk-profile defaults: small model, short schedule.
    pub fn desk() -> Self {
        RunConfig {
            profile: "desk".into(),
            train: TrainConfig {
                model: ModelConfig::desk(),
                bounds: BoundConfig::medium(),
                switches: ComponentSwitches::full(),
                mode: TrainMode::DpAware,
                dp: DPConfig {
                    clip_c: 1.0,
                    noise_sigma: 0.05,
                    batch_b: 8,
                },
                optim: OptimConfig::desk(),
                diffusion_t: DESK_T,
                steps: 2000,
                seed: 1,
                mask: MaskKind::Random { ratio: 0.5 },
                log_stride: 1,
                val_every: 50,
            },
            data: DataSource::Synthetic {
                n: 1024,
                rare_event_prob: 0.02,
                rare_scale: 8.0,
            },
            train_frac: 0.8,
        }
    }

    /// Paper-profile defaults matching the published setup.
    pub fn paper() -> Self {
        RunConfig {
            profile: "paper".into(),
            train: TrainConfig {
                model: ModelConfig::paper(),
                bounds: BoundConfig::medium(),
                switches: ComponentSwitches::full(),
                mode: TrainMode::DpAware,
                dp: DPConfig {
                    clip_c: 1.0,
                    noise_sigma: 0.05,
                    batch_b: 96,
                },
                optim: OptimConfig::paper(),
                diffusion_t: PAPER_T,
                steps: 20_000,
                seed: 1,
                mask: MaskKind::Random { ratio: 0.5 },
                log_stride: 1,
                val_every: 1000,
            },
            data: DataSource::Synthetic {
                n: 8192,
                rare_event_prob: 0.02,
                rare_scale: 8.0,
            },
            train_frac: 0.8,
        }
    }

    pub fn for_profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(CoreError::InvalidArgument(format!(
                "run.profile: unknown profile `{other}` (expected desk or paper)"
            ))),
        }
    }

    /// Parse a config file body. The profile key is applied first (it
    /// resets all defaults), then every other key overrides in order.
    pub fn parse(text: &str) -> Result<Self> {
        let entries = tokenize(text)?;
        let profile = entries
            .iter()
            .find(|(k, _)| k == "run.profile")
            .map(|(_, v)| v.as_str())
            .unwrap_or("desk");
        let mut cfg = Self::for_profile(profile)?;
        for (key, value) in &entries {
            cfg.apply(key, value)?;
        }
        cfg.train.validate()?;
        if !(cfg.train_frac > 0.0 && cfg.train_frac <= 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "data.train_frac: must lie in (0, 1], got {}",
                cfg.train_frac
            )));
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |k: &str, v: &str| {
            CoreError::InvalidArgument(format!("{k}: cannot parse value `{v}`"))
        };
        let p_usize = |k: &str, v: &str| v.parse::<usize>().map_err(|_| bad(k, v));
        let p_u64 = |k: &str, v: &str| v.parse::<u64>().map_err(|_| bad(k, v));
        let p_f64 = |k: &str, v: &str| -> Result<f64> {
            if v == "inf" {
                Ok(f64::INFINITY)
            } else {
                v.parse::<f64>().map_err(|_| bad(k, v))
            }
        };
        let p_bool = |k: &str, v: &str| v.parse::<bool>().map_err(|_| bad(k, v));

        let t = &mut self.train;
        match key {
            "run.profile" => {} // consumed up front
            "run.mode" => t.mode = TrainMode::parse(value)?,
            "run.steps" => t.steps = p_usize(key, value)?,
            "run.seed" => t.seed = p_u64(key, value)?,
            "run.log_stride" => t.log_stride = p_usize(key, value)?,
            "run.val_every" => t.val_every = p_usize(key, value)?,

            "model.depth" => t.model.depth = p_usize(key, value)?,
            "model.hidden" => t.model.hidden = p_usize(key, value)?,
            "model.heads" => t.model.heads = p_usize(key, value)?,
            "model.seq_len" => t.model.seq_len = p_usize(key, value)?,
            "model.channels" => t.model.channels = p_usize(key, value)?,
            "model.cond_dim" => t.model.cond_dim = p_usize(key, value)?,
            "model.mlp_hidden" => t.model.mlp_hidden = p_usize(key, value)?,
            "model.t_embed" => t.model.t_embed = p_usize(key, value)?,

            "bounds.c_max" => t.bounds.c_max = p_f64(key, value)?,
            "bounds.gamma_max" => t.bounds.gamma_max = p_f64(key, value)?,
            "bounds.beta_max" => t.bounds.beta_max = p_f64(key, value)?,
            "bounds.alpha_max" => t.bounds.alpha_max = p_f64(key, value)?,
            "bounds.operator" => t.bounds.operator = BoundOpKind::parse(value)?,
            "bounds.band_eps" => t.bounds.band_eps = p_f64(key, value)?,
            "bounds.scale" => t.bounds = t.bounds.scaled(p_f64(key, value)?),
            "bounds.bound_c" => t.switches.bound_c = p_bool(key, value)?,
            "bounds.bound_modulation" => t.switches.bound_modulation = p_bool(key, value)?,

            "dp.clip_c" => t.dp.clip_c = p_f64(key, value)?,
            "dp.noise_sigma" => t.dp.noise_sigma = p_f64(key, value)?,
            "dp.batch" => t.dp.batch_b = p_usize(key, value)?,

            "optim.lr" => t.optim.lr = p_f64(key, value)?,
            "optim.weight_decay" => t.optim.weight_decay = p_f64(key, value)?,
            "optim.warmup_steps" => t.optim.warmup_steps = p_u64(key, value)?,
            "optim.ema_decay" => t.optim.ema_decay = p_f64(key, value)?,

            "diffusion.t" => t.diffusion_t = p_usize(key, value)?,

            "data.source" => match value {
                "synthetic" => {
                    if !matches!(self.data, DataSource::Synthetic { .. }) {
                        self.data = DataSource::Synthetic {
                            n: 1024,
                            rare_event_prob: 0.02,
                            rare_scale: 8.0,
                        };
                    }
                }
                "csv" => {
                    if !matches!(self.data, DataSource::Csv { .. }) {
                        self.data = DataSource::Csv { path: String::new() };
                    }
                }
                other => {
                    return Err(CoreError::InvalidArgument(format!(
                        "data.source: unknown source `{other}` (expected synthetic or csv)"
                    )))
                }
            },
            "data.n" => {
                if let DataSource::Synthetic { n, .. } = &mut self.data {
                    *n = p_usize(key, value)?;
                } else {
                    return Err(CoreError::InvalidArgument(
                        "data.n: only valid for the synthetic source".into(),
                    ));
                }
            }
            "data.rare_event_prob" => {
                if let DataSource::Synthetic { rare_event_prob, .. } = &mut self.data {
                    *rare_event_prob = p_f64(key, value)?;
                } else {
                    return Err(CoreError::InvalidArgument(
                        "data.rare_event_prob: only valid for the synthetic source".into(),
                    ));
                }
            }
            "data.rare_scale" => {
                if let DataSource::Synthetic { rare_scale, .. } = &mut self.data {
                    *rare_scale = p_f64(key, value)?;
                } else {
                    return Err(CoreError::InvalidArgument(
                        "data.rare_scale: only valid for the synthetic source".into(),
                    ));
                }
            }
            "data.csv_path" => {
                if let DataSource::Csv { path } = &mut self.data {
                    *path = value.to_string();
                } else {
                    return Err(CoreError::InvalidArgument(
                        "data.csv_path: only valid for the csv source".into(),
                    ));
                }
            }
            "data.train_frac" => self.train_frac = p_f64(key, value)?,
            "data.mask" => {
                t.mask = match value {
                    "random" => MaskKind::Random { ratio: 0.5 },
                    "block" => MaskKind::Block {
                        pred_len: t.model.seq_len / 3,
                    },
                    "stride" => MaskKind::Stride { num_blocks: 2 },
                    other => {
                        return Err(CoreError::InvalidArgument(format!(
                            "data.mask: unknown kind `{other}` (expected random, block, stride)"
                        )))
                    }
                }
            }
            "data.mask_ratio" => {
                if let MaskKind::Random { ratio } = &mut t.mask {
                    *ratio = p_f64(key, value)?;
                } else {
                    return Err(CoreError::InvalidArgument(
                        "data.mask_ratio: only valid for the random mask".into(),
                    ));
                }
            }
            "data.mask_pred_len" => {
                if let MaskKind::Block { pred_len } = &mut t.mask {
                    *pred_len = p_usize(key, value)?;
                } else {
                    return Err(CoreError::InvalidArgument(
                        "data.mask_pred_len: only valid for the block mask".into(),
                    ));
                }
            }
            "data.mask_blocks" => {
                if let MaskKind::Stride { num_blocks } = &mut t.mask {
                    *num_blocks = p_usize(key, value)?;
                } else {
                    return Err(CoreError::InvalidArgument(
                        "data.mask_blocks: only valid for the stride mask".into(),
                    ));
                }
            }
            other => {
                return Err(CoreError::InvalidArgument(format!(
                    "unknown config key `{other}`"
                )))
            }
        }
        Ok(())
    }

    /// Serialize in the same flat format `parse` accepts; round-trips.
    pub fn serialize(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let f = |v: f64| {
            if v.is_infinite() {
                "inf".to_string()
            } else {
                format!("{v}")
            }
        };
        s.push_str("[run]\n");
        s.push_str(&format!("profile = {}\n", self.profile));
        s.push_str(&format!("mode = {}\n", t.mode.name()));
        s.push_str(&format!("steps = {}\n", t.steps));
        s.push_str(&format!("seed = {}\n", t.seed));
        s.push_str(&format!("log_stride = {}\n", t.log_stride));
        s.push_str(&format!("val_every = {}\n", t.val_every));
        s.push_str("\n[model]\n");
        s.push_str(&format!("depth = {}\n", t.model.depth));
        s.push_str(&format!("hidden = {}\n", t.model.hidden));
        s.push_str(&format!("heads = {}\n", t.model.heads));
        s.push_str(&format!("seq_len = {}\n", t.model.seq_len));
        s.push_str(&format!("channels = {}\n", t.model.channels));
        s.push_str(&format!("cond_dim = {}\n", t.model.cond_dim));
        s.push_str(&format!("mlp_hidden = {}\n", t.model.mlp_hidden));
        s.push_str(&format!("t_embed = {}\n", t.model.t_embed));
        s.push_str("\n[bounds]\n");
        s.push_str(&format!("c_max = {}\n", f(t.bounds.c_max)));
        s.push_str(&format!("gamma_max = {}\n", f(t.bounds.gamma_max)));
        s.push_str(&format!("beta_max = {}\n", f(t.bounds.beta_max)));
        s.push_str(&format!("alpha_max = {}\n", f(t.bounds.alpha_max)));
        s.push_str(&format!("operator = {}\n", t.bounds.operator.name()));
        s.push_str(&format!("band_eps = {}\n", f(t.bounds.band_eps)));
        s.push_str(&format!("bound_c = {}\n", t.switches.bound_c));
        s.push_str(&format!("bound_modulation = {}\n", t.switches.bound_modulation));
        s.push_str("\n[dp]\n");
        s.push_str(&format!("clip_c = {}\n", f(t.dp.clip_c)));
        s.push_str(&format!("noise_sigma = {}\n", f(t.dp.noise_sigma)));
        s.push_str(&format!("batch = {}\n", t.dp.batch_b));
        s.push_str("\n[optim]\n");
        s.push_str(&format!("lr = {}\n", f(t.optim.lr)));
        s.push_str(&format!("weight_decay = {}\n", f(t.optim.weight_decay)));
        s.push_str(&format!("warmup_steps = {}\n", t.optim.warmup_steps));
        s.push_str(&format!("ema_decay = {}\n", f(t.optim.ema_decay)));
        s.push_str("\n[diffusion]\n");
        s.push_str(&format!("t = {}\n", t.diffusion_t));
        s.push_str("\n[data]\n");
        match &self.data {
            DataSource::Synthetic {
                n,
                rare_event_prob,
                rare_scale,
            } => {
                s.push_str("source = synthetic\n");
                s.push_str(&format!("n = {n}\n"));
                s.push_str(&format!("rare_event_prob = {}\n", f(*rare_event_prob)));
                s.push_str(&format!("rare_scale = {}\n", f(*rare_scale)));
            }
            DataSource::Csv { path } => {
                s.push_str("source = csv\n");
                s.push_str(&format!("csv_path = {path}\n"));
            }
        }
        s.push_str(&format!("train_frac = {}\n", f(self.train_frac)));
        match &t.mask {
            MaskKind::Random { ratio } => {
                s.push_str("mask = random\n");
                s.push_str(&format!("mask_ratio = {}\n", f(*ratio)));
            }
            MaskKind::Block { pred_len } => {
                s.push_str("mask = block\n");
                s.push_str(&format!("mask_pred_len = {pred_len}\n"));
            }
            MaskKind::Stride { num_blocks } => {
                s.push_str("mask = stride\n");
                s.push_str(&format!("mask_blocks = {num_blocks}\n"));
            }
        }
        s
    }
}

/// Split the file into (section.key, value) pairs in order.
fn tokenize(text: &str) -> Result<Vec<(String, String)>> {
    let mut section = String::new();
    let mut out = Vec::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CoreError::InvalidArgument(format!(
                "config line {}: expected `key = value`, got `{line}`",
                ln + 1
            )));
        };
        if section.is_empty() {
            return Err(CoreError::InvalidArgument(format!(
                "config line {}: key before any [section] header",
                ln + 1
            )));
        }
        out.push((
            format!("{section}.{}", key.trim()),
            value.trim().to_string(),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_profile_matches_published_settings() {
        let cfg = RunConfig::paper();
        assert_eq!(cfg.train.optim.lr, 7e-4);
        assert_eq!(cfg.train.optim.weight_decay, 2e-5);
        assert_eq!(cfg.train.optim.warmup_steps, 1000);
        assert_eq!(cfg.train.optim.ema_decay, 0.999);
        assert_eq!(cfg.train.dp.batch_b, 96);
        assert_eq!(cfg.train.steps, 20_000);
        assert_eq!(cfg.train.diffusion_t, 1000);
    }

    #[test]
    fn parse_overrides_and_roundtrip() {
        let text = "\
[run]
profile = desk
mode = dp_vanilla
steps = 40   # short smoke run
seed = 9
[dp]
clip_c = 0.5
[bounds]
operator = hard_clamp
[data]
mask = block
mask_pred_len = 6
";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.mode, TrainMode::DpVanilla);
        assert_eq!(cfg.train.steps, 40);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.dp.clip_c, 0.5);
        assert_eq!(cfg.train.bounds.operator, BoundOpKind::HardClamp);
        assert_eq!(cfg.train.mask, MaskKind::Block { pred_len: 6 });

        let round = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn unknown_keys_and_values_are_named() {
        let err = RunConfig::parse("[run]\nstepz = 10\n").unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        let err = RunConfig::parse("[run]\nsteps = soon\n").unwrap_err();
        assert!(err.to_string().contains("run.steps"), "{err}");
        let err = RunConfig::parse("[run]\nmode = dp_secret\n").unwrap_err();
        assert!(err.to_string().contains("dp_secret"), "{err}");
        assert!(RunConfig::parse("steps = 1\n").is_err()); // no section
    }

    #[test]
    fn scale_key_scales_all_bounds() {
        let base = RunConfig::desk().train.bounds;
        let cfg = RunConfig::parse("[bounds]\nscale = 0.5\n").unwrap();
        assert_eq!(cfg.train.bounds.c_max, base.c_max * 0.5);
        assert_eq!(cfg.train.bounds.alpha_max, base.alpha_max * 0.5);
    }

    #[test]
    fn infinite_sentinel_parses() {
        let cfg = RunConfig::parse("[bounds]\nc_max = inf\ngamma_max = inf\nbeta_max = inf\nalpha_max = inf\n").unwrap();
        assert!(cfg.train.bounds.c_max.is_infinite());
    }
}
