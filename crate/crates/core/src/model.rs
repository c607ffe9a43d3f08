//! Conditional diffusion transformer with DP-aware bounded AdaLN conditioning.
//!
//! The denoiser is a stack of AdaLN-Zero blocks. Each block computes
//!
//! ```text
//! u = LN(x),  v = gamma (*) u + beta,  h = F(v),  y = x + alpha (*) h
//! ```
//!
//! where F is one self-attention plus MLP sub-network and the per-block
//! modulation triple (gamma, beta, alpha) is an affine function of the
//! global condition vector. DP-aware mode first projects the condition
//! onto an l2 ball of radius `c_max` and then pushes every modulation
//! coordinate through a coordinatewise bounding operator, so worst-case
//! gradient magnitudes admit the structural bounds of the sensitivity
//! module.
//!
//! Parameter identifiers carry the partition: everything under `cond.`
//! is the conditioning pathway (condition embedding plus modulation
//! projections), everything under `net.` is the rest.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use crate::autodiff::{soft_clamp_band_scalar, Graph, GradientVector, NodeId, ParamStore};
use crate::error::{CoreError, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Coordinatewise bounding operator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundOpKind {
    /// M * tanh(x / M): smooth, saturating, 1-Lipschitz.
    Tanh,
    /// min(M, max(-M, x)): exact but kinked, zero gradient outside.
    HardClamp,
    /// Identity up to M - band_eps, smooth blend across the band.
    SoftClampBand,
    /// Forward hard clamp, straight-through unit gradient.
    ClampSte,
}

impl BoundOpKind {
    pub fn all() -> [BoundOpKind; 4] {
        [
            BoundOpKind::Tanh,
            BoundOpKind::HardClamp,
            BoundOpKind::SoftClampBand,
            BoundOpKind::ClampSte,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            BoundOpKind::Tanh => "tanh",
            BoundOpKind::HardClamp => "hard_clamp",
            BoundOpKind::SoftClampBand => "soft_clamp_band",
            BoundOpKind::ClampSte => "clamp_ste",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(BoundOpKind::Tanh),
            "hard_clamp" => Ok(BoundOpKind::HardClamp),
            "soft_clamp_band" => Ok(BoundOpKind::SoftClampBand),
            "clamp_ste" => Ok(BoundOpKind::ClampSte),
            other => Err(CoreError::InvalidArgument(format!(
                "unknown bound operator `{other}`"
            ))),
        }
    }
}

/// DP-aware conditioning limits (condition radius and modulation bounds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundConfig {
    pub c_max: f64,
    pub gamma_max: f64,
    pub beta_max: f64,
    pub alpha_max: f64,
    pub operator: BoundOpKind,
    /// Half-width of the soft clamp transition band.
    pub band_eps: f64,
}

impl BoundConfig {
    /// Medium defaults used throughout the desk profile.
    pub fn medium() -> Self {
        BoundConfig {
            c_max: 2.0,
            gamma_max: 1.5,
            beta_max: 1.0,
            alpha_max: 1.0,
            operator: BoundOpKind::Tanh,
            band_eps: 0.0,
        }
    }

    /// Every limit multiplied by `scale` (tightness ablation axis).
    pub fn scaled(&self, scale: f64) -> Self {
        BoundConfig {
            c_max: self.c_max * scale,
            gamma_max: self.gamma_max * scale,
            beta_max: self.beta_max * scale,
            alpha_max: self.alpha_max * scale,
            operator: self.operator,
            band_eps: self.band_eps * scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("c_max", self.c_max),
            ("gamma_max", self.gamma_max),
            ("beta_max", self.beta_max),
            ("alpha_max", self.alpha_max),
        ] {
            if !(v > 0.0) {
                return Err(CoreError::InvalidArgument(format!(
                    "bound limit {name} must be strictly positive, got {v}"
                )));
            }
        }
        if self.band_eps < 0.0 {
            return Err(CoreError::InvalidArgument(format!(
                "band_eps must be non-negative, got {}",
                self.band_eps
            )));
        }
        if self.operator == BoundOpKind::SoftClampBand {
            let min_limit = self
                .gamma_max
                .min(self.beta_max)
                .min(self.alpha_max)
                .min(self.c_max);
            if self.band_eps >= min_limit && min_limit.is_finite() {
                return Err(CoreError::InvalidArgument(format!(
                    "band_eps {} must be below the smallest limit {min_limit}",
                    self.band_eps
                )));
            }
        }
        Ok(())
    }

    /// Default transition half-width for the soft operator: 0.1 * M.
    pub fn default_band_eps(m: f64) -> f64 {
        0.1 * m
    }
}

/// Which forward-pass control components are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentSwitches {
    /// l2-project the condition vector to the c_max ball.
    pub bound_c: bool,
    /// Bound the per-block modulation coordinates.
    pub bound_modulation: bool,
}

impl ComponentSwitches {
    pub fn full() -> Self {
        ComponentSwitches {
            bound_c: true,
            bound_modulation: true,
        }
    }

    pub fn none() -> Self {
        ComponentSwitches {
            bound_c: false,
            bound_modulation: false,
        }
    }

    pub fn only_c() -> Self {
        ComponentSwitches {
            bound_c: true,
            bound_modulation: false,
        }
    }

    pub fn only_modulation() -> Self {
        ComponentSwitches {
            bound_c: false,
            bound_modulation: true,
        }
    }
}

/// Architecture of the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub channels: usize,
    pub cond_dim: usize,
    pub mlp_hidden: usize,
    /// Width of the sinusoidal timestep embedding inside the condition
    /// feature vector.
    pub t_embed: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: small enough for exhaustive finite-difference
    /// checks on one core.
    pub fn desk() -> Self {
        ModelConfig {
            depth: 2,
            hidden: 32,
            heads: 4,
            seq_len: 24,
            channels: 3,
            cond_dim: 16,
            mlp_hidden: 32,
            t_embed: 8,
        }
    }

    /// Full-scale profile (8 layers, hidden 256, 8 heads, windows of 168).
    pub fn paper() -> Self {
        ModelConfig {
            depth: 8,
            hidden: 256,
            heads: 8,
            seq_len: 168,
            channels: 7,
            cond_dim: 16,
            mlp_hidden: 512,
            t_embed: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(CoreError::InvalidArgument("depth must be >= 1".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.seq_len == 0 || self.channels == 0 || self.cond_dim == 0 {
            return Err(CoreError::InvalidArgument(
                "seq_len, channels, cond_dim must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Length of the raw condition feature vector consumed by the
    /// condition embedding: observed fraction, per-channel mean and std
    /// of observed entries, sinusoidal timestep embedding.
    pub fn cond_feat_dim(&self) -> usize {
        1 + 2 * self.channels + self.t_embed
    }
}

/// Per-block modulation triple after bounding.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Scalar bounding operator (forward value).
pub fn bound_op(x: f64, m: f64, kind: BoundOpKind, band_eps: f64) -> f64 {
    if m.is_infinite() {
        return x;
    }
    match kind {
        BoundOpKind::Tanh => m * (x / m).tanh(),
        BoundOpKind::HardClamp | BoundOpKind::ClampSte => x.clamp(-m, m),
        BoundOpKind::SoftClampBand => soft_clamp_band_scalar(x, m, band_eps),
    }
}

/// l2-project a condition vector onto the ball of radius `c_max`.
pub fn project_condition(c: &[f64], c_max: f64) -> Vec<f64> {
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= c_max || c_max.is_infinite() {
        c.to_vec()
    } else {
        let s = c_max / norm;
        c.iter().map(|x| s * x).collect()
    }
}

/// Eager modulation map: raw = W c_hat + b stacked as (gamma, beta, alpha)
/// rows, each coordinate bounded by its respective limit.
///
/// `w` is (3d, k) and `b` is a 3d-vector; rows 0..d are gamma, d..2d beta,
/// 2d..3d alpha.
pub fn modulation(
    c_hat: &[f64],
    w: &Tensor,
    b: &[f64],
    bounds: &BoundConfig,
) -> Result<ModulationParams> {
    let (rows, k) = w.dims2()?;
    if rows % 3 != 0 || k != c_hat.len() || b.len() != rows {
        return Err(CoreError::ShapeMismatch {
            context: "modulation".into(),
            expected: vec![rows, c_hat.len()],
            got: vec![b.len(), k],
        });
    }
    let d = rows / 3;
    let mut raw = vec![0.0; rows];
    for (i, r) in raw.iter_mut().enumerate() {
        *r = b[i]
            + w.row(i)
                .iter()
                .zip(c_hat)
                .map(|(wij, cj)| wij * cj)
                .sum::<f64>();
    }
    let apply = |xs: &[f64], m: f64| -> Vec<f64> {
        xs.iter()
            .map(|&x| bound_op(x, m, bounds.operator, bounds.band_eps))
            .collect()
    };
    Ok(ModulationParams {
        gamma: apply(&raw[..d], bounds.gamma_max),
        beta: apply(&raw[d..2 * d], bounds.beta_max),
        alpha: apply(&raw[2 * d..], bounds.alpha_max),
    })
}

/// Condition feature vector for one window: observed fraction, per-channel
/// mean and std over observed positions, sinusoidal timestep embedding.
///
/// Deterministic and mask-aware; the heavy-tail behavior of rare covariate
/// bursts flows into the mean/std entries.
pub fn condition_features(
    values: &Tensor,
    mask_bits: &[u8],
    t: usize,
    t_total: usize,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let (l, k) = values.dims2()?;
    if mask_bits.len() != l {
        return Err(CoreError::ShapeMismatch {
            context: "condition_features mask".into(),
            expected: vec![l],
            got: vec![mask_bits.len()],
        });
    }
    let observed: Vec<usize> = (0..l).filter(|&i| mask_bits[i] == 0).collect();
    let mut feat = Vec::with_capacity(cfg.cond_feat_dim());
    feat.push(observed.len() as f64 / l as f64);
    for ch in 0..k {
        let (mean, std) = if observed.is_empty() {
            (0.0, 0.0)
        } else {
            let n = observed.len() as f64;
            let mean = observed
                .iter()
                .map(|&i| values.data()[i * k + ch])
                .sum::<f64>()
                / n;
            let var = observed
                .iter()
                .map(|&i| {
                    let d = values.data()[i * k + ch] - mean;
                    d * d
                })
                .sum::<f64>()
                / n;
            (mean, var.sqrt())
        };
        feat.push(mean);
        feat.push(std);
    }
    let frac = if t_total > 1 {
        t as f64 / (t_total - 1) as f64
    } else {
        0.0
    };
    for j in 0..cfg.t_embed / 2 {
        let freq = (2.0f64).powi(j as i32) * PI;
        feat.push((freq * frac).sin());
        feat.push((freq * frac).cos());
    }
    // Odd t_embed widths pad with the raw fraction.
    while feat.len() < cfg.cond_feat_dim() {
        feat.push(frac);
    }
    Ok(feat)
}

/// Partition of parameter identifiers into conditioning-path and other.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamPartition {
    pub cond_ids: BTreeSet<String>,
    pub other_ids: BTreeSet<String>,
}

impl ParamPartition {
    /// Derive the partition from identifier prefixes (`cond.` vs `net.`).
    pub fn from_names<'a>(names: impl Iterator<Item = &'a str>) -> Self {
        let mut cond_ids = BTreeSet::new();
        let mut other_ids = BTreeSet::new();
        for n in names {
            if n.starts_with("cond.") {
                cond_ids.insert(n.to_string());
            } else {
                other_ids.insert(n.to_string());
            }
        }
        ParamPartition { cond_ids, other_ids }
    }
}

/// Squared-norm split of a gradient along a partition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionNorms {
    pub total: f64,
    pub cond: f64,
    pub other: f64,
}

/// Split a gradient into conditioning-path and other components.
///
/// Returns the two sub-gradients plus their norms; the Pythagorean
/// identity total^2 = cond^2 + other^2 holds by construction.
pub fn partition_gradient(
    g: &GradientVector,
    part: &ParamPartition,
) -> Result<(GradientVector, GradientVector, PartitionNorms)> {
    for (name, _) in g.iter() {
        if !part.cond_ids.contains(name) && !part.other_ids.contains(name) {
            return Err(CoreError::InvalidArgument(format!(
                "parameter `{name}` not covered by the partition"
            )));
        }
    }
    let mut g_cond = GradientVector::zeros_like(g);
    let mut g_other = GradientVector::zeros_like(g);
    let mut sq_cond = 0.0;
    let mut sq_other = 0.0;
    for (name, t) in g_cond.entries_mut() {
        if part.cond_ids.contains(name) {
            let src = g.get(name).expect("aligned names");
            t.data_mut().copy_from_slice(src.data());
            sq_cond += src.data().iter().map(|x| x * x).sum::<f64>();
        }
    }
    for (name, t) in g_other.entries_mut() {
        if part.other_ids.contains(name) {
            let src = g.get(name).expect("aligned names");
            t.data_mut().copy_from_slice(src.data());
            sq_other += src.data().iter().map(|x| x * x).sum::<f64>();
        }
    }
    let norms = PartitionNorms {
        total: (sq_cond + sq_other).sqrt(),
        cond: sq_cond.sqrt(),
        other: sq_other.sqrt(),
    };
    Ok((g_cond, g_other, norms))
}

#[derive(Debug, Clone, Copy)]
enum InitKind {
    Zero,
    Normal { std: f64 },
}

/// The full conditional denoiser as a reusable autodiff graph.
///
/// Inputs per example:
/// - `x_in`: (L, K+1) noisy window with clean observed entries plus the
///   mask bit as an extra channel,
/// - `cond_feat`: raw condition feature vector,
/// - `target_eps`: (L, K) noise target,
/// - `loss_mask`: (L, K) per-entry loss weights (masked positions carry
///   1 / (masked_count * K), observed positions 0).
///
/// The scalar loss node is the weighted squared error, i.e. the masked MSE.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub graph: Graph,
    pub config: ModelConfig,
    pub bounds: BoundConfig,
    pub switches: ComponentSwitches,
    pub eps_pred: NodeId,
    inits: Vec<(String, InitKind)>,
}

impl Denoiser {
    pub fn build(
        config: ModelConfig,
        bounds: BoundConfig,
        switches: ComponentSwitches,
    ) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        let mut g = Graph::new();
        let mut inits: Vec<(String, InitKind)> = Vec::new();
        let l = config.seq_len;
        let k = config.channels;
        let d = config.hidden;
        let dh = config.head_dim();
        let kc = config.cond_dim;
        let f = config.cond_feat_dim();

        let x_in = g.input("x_in", vec![l, k + 1]);
        let cond_feat = g.input("cond_feat", vec![f]);
        let target_eps = g.input("target_eps", vec![l, k]);
        let loss_mask = g.input("loss_mask", vec![l, k]);

        let param = |g: &mut Graph,
                         inits: &mut Vec<(String, InitKind)>,
                         name: String,
                         shape: Vec<usize>,
                         init: InitKind|
         -> Result<NodeId> {
            let id = g.param(&name, shape)?;
            inits.push((name, init));
            Ok(id)
        };
        let wstd = |fan_in: usize| InitKind::Normal {
            std: 1.0 / (fan_in as f64).sqrt(),
        };

        // Condition embedding: feat -> k-dim condition, then optional
        // l2 projection (Eq. 5 analogue).
        let ce_w = param(&mut g, &mut inits, "cond.embed.w".into(), vec![kc, f], wstd(f))?;
        let ce_b = param(&mut g, &mut inits, "cond.embed.b".into(), vec![kc], InitKind::Zero)?;
        let c_raw = g.matvec(ce_w, cond_feat)?;
        let c_lin = g.add(c_raw, ce_b)?;
        let c_hat = if switches.bound_c && bounds.c_max.is_finite() {
            g.l2_clip(c_lin, bounds.c_max)
        } else {
            c_lin
        };

        // Input projection plus learned positional embedding.
        let win = param(&mut g, &mut inits, "net.in.w".into(), vec![k + 1, d], wstd(k + 1))?;
        let bin = param(&mut g, &mut inits, "net.in.b".into(), vec![d], InitKind::Zero)?;
        let pos = param(
            &mut g,
            &mut inits,
            "net.pos_embed".into(),
            vec![l, d],
            InitKind::Normal { std: 0.02 },
        )?;
        let xp = g.matmul(x_in, win)?;
        let xb = g.add_row(xp, bin)?;
        let mut x = g.add(xb, pos)?;

        let bound_vec = |g: &mut Graph, node: NodeId, m: f64| -> NodeId {
            if !switches.bound_modulation || m.is_infinite() {
                return node;
            }
            match bounds.operator {
                BoundOpKind::Tanh => g.bound_tanh(node, m),
                BoundOpKind::HardClamp => g.hard_clamp(node, m),
                BoundOpKind::SoftClampBand => g.soft_clamp_band(node, m, bounds.band_eps),
                BoundOpKind::ClampSte => g.clamp_ste(node, m),
            }
        };

        for blk in 0..config.depth {
            // Modulation projections (Eq. 6); the alpha projection is
            // zero-initialized so every block starts as the identity.
            let mod_vec = |g: &mut Graph,
                               inits: &mut Vec<(String, InitKind)>,
                               which: &str,
                               m: f64,
                               init_w: InitKind|
             -> Result<NodeId> {
                let w = param(
                    g,
                    inits,
                    format!("cond.block{blk}.{which}_w"),
                    vec![d, kc],
                    init_w,
                )?;
                let b = param(
                    g,
                    inits,
                    format!("cond.block{blk}.{which}_b"),
                    vec![d],
                    InitKind::Zero,
                )?;
                let raw = g.matvec(w, c_hat)?;
                let lin = g.add(raw, b)?;
                Ok(bound_vec(g, lin, m))
            };
            let gamma = mod_vec(&mut g, &mut inits, "gamma", bounds.gamma_max, wstd(kc))?;
            let beta = mod_vec(&mut g, &mut inits, "beta", bounds.beta_max, wstd(kc))?;
            let alpha = mod_vec(&mut g, &mut inits, "alpha", bounds.alpha_max, InitKind::Zero)?;

            // v = gamma (*) LN(x) + beta
            let u = g.layer_norm_rows(x)?;
            let scaled = g.mul_row(u, gamma)?;
            let v = g.add_row(scaled, beta)?;

            // F: multi-head self-attention followed by a 2-layer MLP.
            let mut head_outs = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let wq = param(&mut g, &mut inits, format!("net.block{blk}.head{h}.wq"), vec![d, dh], wstd(d))?;
                let wk = param(&mut g, &mut inits, format!("net.block{blk}.head{h}.wk"), vec![d, dh], wstd(d))?;
                let wv = param(&mut g, &mut inits, format!("net.block{blk}.head{h}.wv"), vec![d, dh], wstd(d))?;
                let q = g.matmul(v, wq)?;
                let kk = g.matmul(v, wk)?;
                let vv = g.matmul(v, wv)?;
                let scores = g.matmul_trans_b(q, kk)?;
                let scaled_scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
                let attn = g.softmax_rows(scaled_scores)?;
                head_outs.push(g.matmul(attn, vv)?);
            }
            let concat = g.concat_cols(&head_outs)?;
            let wo = param(&mut g, &mut inits, format!("net.block{blk}.wo"), vec![d, d], wstd(d))?;
            let bo = param(&mut g, &mut inits, format!("net.block{blk}.bo"), vec![d], InitKind::Zero)?;
            let ao = g.matmul(concat, wo)?;
            let a = g.add_row(ao, bo)?;

            let w1 = param(&mut g, &mut inits, format!("net.block{blk}.mlp.w1"), vec![d, config.mlp_hidden], wstd(d))?;
            let b1 = param(&mut g, &mut inits, format!("net.block{blk}.mlp.b1"), vec![config.mlp_hidden], InitKind::Zero)?;
            let w2 = param(&mut g, &mut inits, format!("net.block{blk}.mlp.w2"), vec![config.mlp_hidden, d], wstd(config.mlp_hidden))?;
            let b2 = param(&mut g, &mut inits, format!("net.block{blk}.mlp.b2"), vec![d], InitKind::Zero)?;
            let m1 = g.matmul(a, w1)?;
            let m1b = g.add_row(m1, b1)?;
            let act = g.softsign(m1b);
            let m2 = g.matmul(act, w2)?;
            let h_out = g.add_row(m2, b2)?;

            // y = x + alpha (*) h
            let gated = g.mul_row(h_out, alpha)?;
            x = g.add(x, gated)?;
        }

        let wh = param(&mut g, &mut inits, "net.head.w".into(), vec![d, k], wstd(d))?;
        let bh = param(&mut g, &mut inits, "net.head.b".into(), vec![k], InitKind::Zero)?;
        let hp = g.matmul(x, wh)?;
        let eps_pred = g.add_row(hp, bh)?;

        // Masked MSE: loss_mask already carries the 1/(m*K) normalization.
        let diff = g.sub(eps_pred, target_eps)?;
        let sq = g.mul(diff, diff)?;
        let weighted = g.mul(sq, loss_mask)?;
        let loss = g.sum(weighted);
        g.set_loss(loss)?;

        Ok(Denoiser {
            graph: g,
            config,
            bounds,
            switches,
            eps_pred,
            inits,
        })
    }

    /// Deterministic initialization: small Gaussian weights, zero biases,
    /// zero alpha projection (AdaLN-Zero).
    pub fn init_params(&self, rng: &mut CounterRng) -> ParamStore {
        let mut params = ParamStore::zeros(&self.graph);
        for (name, init) in &self.inits {
            match init {
                InitKind::Zero => {}
                InitKind::Normal { std } => {
                    let t = params.get_mut(name).expect("init name registered");
                    for v in t.data_mut() {
                        *v = std * rng.normal();
                    }
                }
            }
        }
        params
    }

    pub fn partition(&self) -> ParamPartition {
        ParamPartition::from_names(self.graph.param_slots().iter().map(|s| s.name.as_str()))
    }
}
