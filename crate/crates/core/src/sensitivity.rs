//! Structural sensitivity bounds: the per-example gradient bound S_aware,
//! the sensitivity-ratio bound rho, the block Jacobian bound, and the
//! convex-combination ratio, verified against brute-force gradient search
//! on one-block micro-networks.
//!
//! The affine form
//!
//! ```text
//! S_aware = A0 + a_c c_max + a_gamma gamma_max + a_beta beta_max + a_alpha alpha_max
//! ```
//!
//! leaves the constants unreduced; for micro-networks this module derives
//! them from worst-case chain-rule algebra with Frobenius norms as safe
//! operator-norm surrogates, so dominance over the brute-force gradient
//! maximum is a provable inequality rather than a fit. The constants for
//! one bound absorb the remaining limits of the same configuration (the
//! abstract form permits this; it is flagged as non-canonical).

use crate::autodiff::{Graph, InputBindings, NodeId, ParamStore};
use crate::error::{CoreError, Result};
use crate::model::{BoundConfig, BoundOpKind};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Architecture-dependent constants of Eq. 9 / Appendix A.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchConstants {
    pub a0: f64,
    pub a_c: f64,
    pub a_gamma: f64,
    pub a_beta: f64,
    pub a_alpha: f64,
    pub l_ln: f64,
    pub l_f: f64,
    pub u_max: f64,
    pub h_max: f64,
    pub g_ell: f64,
    pub omega_max: f64,
    pub x_max: f64,
}

impl ArchConstants {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.a0,
            self.a_c,
            self.a_gamma,
            self.a_beta,
            self.a_alpha,
            self.l_ln,
            self.l_f,
            self.u_max,
            self.h_max,
            self.g_ell,
            self.omega_max,
            self.x_max,
        ];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(CoreError::InvalidArgument(
                "architecture constants must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Reference magnitudes summarizing typical scales (Appendix B).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceMagnitudes {
    pub c_ref: f64,
    pub gamma_ref: f64,
    pub b_ref: f64,
    pub a_ref: f64,
}

impl ReferenceMagnitudes {
    pub fn validate(&self) -> Result<()> {
        for v in [self.c_ref, self.gamma_ref, self.b_ref, self.a_ref] {
            if !(v > 0.0) {
                return Err(CoreError::InvalidArgument(format!(
                    "reference magnitudes must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Appendix A: ||dy/dx|| <= 1 + alpha_max L_F gamma_max L_LN.
pub fn block_jacobian_bound(consts: &ArchConstants, bounds: &BoundConfig) -> f64 {
    1.0 + bounds.alpha_max * consts.l_f * bounds.gamma_max * consts.l_ln
}

/// Eq. 9: affine worst-case per-example gradient bound.
pub fn s_aware(consts: &ArchConstants, bounds: &BoundConfig) -> f64 {
    consts.a0
        + consts.a_c * bounds.c_max
        + consts.a_gamma * bounds.gamma_max
        + consts.a_beta * bounds.beta_max
        + consts.a_alpha * bounds.alpha_max
}

/// Eq. 10: sensitivity-ratio bound rho <= S_aware / C.
pub fn rho_bound(s_aware: f64, c: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "clip threshold must be positive, got {c}"
        )));
    }
    Ok(s_aware / c)
}

/// Output of the Appendix-B convex-combination decomposition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvexRatio {
    pub ratio: f64,
    /// lambda_0, lambda_c, lambda_gamma, lambda_beta, lambda_alpha.
    pub lambdas: [f64; 5],
    /// r_c, r_gamma, r_beta, r_alpha.
    pub rs: [f64; 4],
}

/// Appendix B: ratio = lambda_0 + sum lambda_* r_* with weights from the
/// reference decomposition of S_aware.
pub fn convex_ratio(
    consts: &ArchConstants,
    bounds: &BoundConfig,
    refs: &ReferenceMagnitudes,
) -> Result<ConvexRatio> {
    consts.validate()?;
    refs.validate()?;
    let u = [
        consts.a0,
        consts.a_c * refs.c_ref,
        consts.a_gamma * refs.gamma_ref,
        consts.a_beta * refs.b_ref,
        consts.a_alpha * refs.a_ref,
    ];
    let d: f64 = u.iter().sum();
    if d <= 0.0 {
        return Err(CoreError::InvalidArgument(
            "convex_ratio: all constants zero (D = 0)".into(),
        ));
    }
    let lambdas = [u[0] / d, u[1] / d, u[2] / d, u[3] / d, u[4] / d];
    let rs = [
        bounds.c_max / refs.c_ref,
        bounds.gamma_max / refs.gamma_ref,
        bounds.beta_max / refs.b_ref,
        bounds.alpha_max / refs.a_ref,
    ];
    let ratio = lambdas[0]
        + lambdas[1] * rs[0]
        + lambdas[2] * rs[1]
        + lambdas[3] * rs[2]
        + lambdas[4] * rs[3];
    let lambda_sum: f64 = lambdas.iter().sum();
    debug_assert!((lambda_sum - 1.0).abs() <= 1e-12);
    if (lambda_sum - 1.0).abs() > 1e-9 {
        return Err(CoreError::InvalidArgument(format!(
            "convex weights sum to {lambda_sum}, expected 1"
        )));
    }
    Ok(ConvexRatio { ratio, lambdas, rs })
}

/// One-block AdaLN micro-network used as the Proposition-1 oracle.
///
/// Structure: u = LN(x), v = gamma (*) u + beta, h = softsign(v W1) W2,
/// y = x + alpha (*) h, loss = |y|_F^2 / (L d). The modulation triple is
/// produced from the l2-projected condition exactly as in the full model.
#[derive(Debug, Clone)]
pub struct MicroNet {
    pub graph: Graph,
    pub params: ParamStore,
    pub bounds: BoundConfig,
    pub seq_len: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    pub mlp_hidden: usize,
}

impl MicroNet {
    pub fn random(
        seq_len: usize,
        hidden: usize,
        cond_dim: usize,
        mlp_hidden: usize,
        bounds: BoundConfig,
        rng: &mut CounterRng,
    ) -> Result<Self> {
        bounds.validate()?;
        let (l, d, k, dh) = (seq_len, hidden, cond_dim, mlp_hidden);
        let mut g = Graph::new();
        let x = g.input("x", vec![l, d]);
        let c = g.input("c", vec![k]);
        let c_hat = g.l2_clip(c, bounds.c_max);

        let bound_vec = |g: &mut Graph, node: NodeId, m: f64| -> NodeId {
            match bounds.operator {
                BoundOpKind::Tanh => g.bound_tanh(node, m),
                BoundOpKind::HardClamp => g.hard_clamp(node, m),
                BoundOpKind::SoftClampBand => g.soft_clamp_band(node, m, bounds.band_eps),
                BoundOpKind::ClampSte => g.clamp_ste(node, m),
            }
        };
        let mod_vec = |g: &mut Graph, which: &str, m: f64| -> Result<NodeId> {
            let w = g.param(&format!("cond.{which}_w"), vec![d, k])?;
            let b = g.param(&format!("cond.{which}_b"), vec![d])?;
            let raw = g.matvec(w, c_hat)?;
            let lin = g.add(raw, b)?;
            Ok(bound_vec(g, lin, m))
        };
        let gamma = mod_vec(&mut g, "gamma", bounds.gamma_max)?;
        let beta = mod_vec(&mut g, "beta", bounds.beta_max)?;
        let alpha = mod_vec(&mut g, "alpha", bounds.alpha_max)?;

        let u = g.layer_norm_rows(x)?;
        let su = g.mul_row(u, gamma)?;
        let v = g.add_row(su, beta)?;
        let w1 = g.param("net.w1", vec![d, dh])?;
        let w2 = g.param("net.w2", vec![dh, d])?;
        let z = g.matmul(v, w1)?;
        let s = g.softsign(z);
        let h = g.matmul(s, w2)?;
        let gated = g.mul_row(h, alpha)?;
        let y = g.add(x, gated)?;
        let sq = g.mul(y, y)?;
        let total = g.sum(sq);
        let loss = g.scale(total, 1.0 / (l * d) as f64);
        g.set_loss(loss)?;

        let params = ParamStore::init_normal(&g, rng, 1.0);
        Ok(MicroNet {
            graph: g,
            params,
            bounds,
            seq_len: l,
            hidden: d,
            cond_dim: k,
            mlp_hidden: dh,
        })
    }

    fn frob(t: &Tensor) -> f64 {
        t.l2_norm()
    }

    fn max_col_norm(t: &Tensor) -> f64 {
        let (rows, cols) = t.dims2().expect("matrix");
        (0..cols)
            .map(|j| {
                (0..rows)
                    .map(|i| {
                        let v = t.data()[i * cols + j];
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Assemble Eq.-9 constants for this micro-network from worst-case
    /// chain-rule algebra with inputs bounded entrywise by `x_max`.
    ///
    /// Every coefficient is a provable upper bound on the l2 norm of the
    /// corresponding parameter-group gradient (Frobenius norms bound
    /// operator norms; bounding operators are 1-Lipschitz in the backward
    /// pass, including the straight-through variant). The sum of group
    /// bounds dominates the total gradient norm.
    pub fn constants(&self, x_max: f64) -> ArchConstants {
        let (l, d, dh) = (
            self.seq_len as f64,
            self.hidden as f64,
            self.mlp_hidden as f64,
        );
        let b = &self.bounds;
        let wf1 = Self::frob(self.params.get("net.w1").unwrap());
        let wf2 = Self::frob(self.params.get("net.w2").unwrap());
        let w2_col = Self::max_col_norm(self.params.get("net.w2").unwrap());

        // |y|_F <= sqrt(Ld) x_max + alpha_max |h|_F with
        // |h|_F <= |s|_F |W2|_op <= sqrt(L dh) |W2|_F (|softsign| <= 1).
        let h_f = (l * dh).sqrt() * wf2;
        let d_y = (2.0 / (l * d)) * ((l * d).sqrt() * x_max + b.alpha_max * h_f);
        // dl/dh = alpha (*) dl/dy, dl/dz through softsign' <= 1 and W2,
        // dl/dv through W1 as well.
        let d_z = wf2 * b.alpha_max * d_y;
        let d_v = wf1 * d_z;

        // LayerNorm output: row norms <= sqrt(d), entries <= sqrt(d - 1),
        // so column norms <= min(sqrt(L (d-1)), sqrt(L d)).
        let u_col = (l * (d - 1.0)).sqrt();
        let u_max = d.sqrt();

        // Modulation-path magnitudes: gamma head sees u, beta head sees
        // ones, alpha head sees h columns.
        let p_gamma = u_col * d_v;
        let p_beta = l.sqrt() * d_v;
        let h_col = (l * dh).sqrt() * w2_col;
        let p_alpha = h_col * d_y;

        // W1 sees v with |v|_F <= gamma_max |u|_F + sqrt(L) |beta|
        //             <= sqrt(Ld) (gamma_max + beta_max).
        let t_w1 = (l * d).sqrt() * d_z; // per unit of (gamma_max + beta_max)
        let t_w2 = (l * dh).sqrt() * d_y; // per unit of alpha_max

        ArchConstants {
            // Bias projections of the three modulation heads.
            a0: p_gamma + p_beta + p_alpha,
            // Weight projections scale with |c_hat| <= c_max.
            a_c: p_gamma + p_beta + p_alpha,
            a_gamma: t_w1,
            a_beta: t_w1,
            a_alpha: t_w2,
            l_ln: u_max, // coarse surrogate; measured variants available
            l_f: wf1 * wf2,
            u_max,
            h_max: h_f,
            g_ell: d_y,
            omega_max: wf1.max(wf2),
            x_max,
        }
    }

    /// Gradient norm at one (x, c) point via the reverse pass.
    pub fn grad_norm(&self, x: &Tensor, c: &Tensor) -> Result<f64> {
        let inputs =
            InputBindings::for_graph(&self.graph, &[("x", x.clone()), ("c", c.clone())])?;
        let mut ws = self.graph.workspace();
        self.graph.forward(&self.params, &inputs, &mut ws)?;
        let g = self.graph.backward(&self.params, &inputs, &ws)?;
        Ok(g.l2_norm())
    }
}

/// Max gradient norm over a random grid of admissible inputs: x entries
/// uniform in [-x_max, x_max], conditions drawn wider than c_max so the
/// projection saturates on part of the grid.
pub fn brute_force_grad_max(
    micro: &MicroNet,
    grid_points: usize,
    x_max: f64,
    rng: &mut CounterRng,
) -> Result<f64> {
    if micro.params.dim() > 200 {
        return Err(CoreError::InvalidArgument(format!(
            "micro model too large for brute force ({} parameters)",
            micro.params.dim()
        )));
    }
    let mut max_norm = 0.0f64;
    for _ in 0..grid_points {
        let mut x = Tensor::zeros(vec![micro.seq_len, micro.hidden]);
        for v in x.data_mut() {
            *v = x_max * (2.0 * rng.uniform() - 1.0);
        }
        let mut c = Tensor::zeros(vec![micro.cond_dim]);
        for v in c.data_mut() {
            *v = 3.0 * micro.bounds.c_max * rng.normal();
        }
        max_norm = max_norm.max(micro.grad_norm(&x, &c)?);
    }
    Ok(max_norm)
}

/// Empirical Lipschitz estimates for the block sub-maps at sampled points,
/// inflated by a safety margin; used by the Jacobian-bound check and the
/// CLI bound report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredLipschitz {
    pub l_ln: f64,
    pub l_f: f64,
}

/// Estimate L_LN and L_F by randomized directional finite differences at
/// `points` random states, inflated by 10%.
pub fn measure_lipschitz(
    micro: &MicroNet,
    points: usize,
    x_max: f64,
    rng: &mut CounterRng,
) -> Result<MeasuredLipschitz> {
    let (l, d) = (micro.seq_len, micro.hidden);
    let eps = 1e-5;
    let mut l_ln = 0.0f64;
    let mut l_f = 0.0f64;
    let w1 = micro.params.get("net.w1").unwrap();
    let w2 = micro.params.get("net.w2").unwrap();
    let dh = micro.mlp_hidden;
    for _ in 0..points {
        let mut x = Tensor::zeros(vec![l, d]);
        for v in x.data_mut() {
            *v = x_max * (2.0 * rng.uniform() - 1.0);
        }
        let mut dir = Tensor::zeros(vec![l, d]);
        rng.fill_normal(dir.data_mut());
        let dn = dir.l2_norm();
        for v in dir.data_mut() {
            *v /= dn;
        }
        // LN directional difference.
        let ln = |t: &Tensor| -> Tensor {
            let mut out = t.clone();
            for i in 0..l {
                let row = &t.data()[i * d..(i + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let inv = 1.0 / (var + crate::autodiff::LN_EPS).sqrt();
                for j in 0..d {
                    out.data_mut()[i * d + j] = (row[j] - mean) * inv;
                }
            }
            out
        };
        let mut xp = x.clone();
        let mut xm = x.clone();
        for i in 0..xp.len() {
            xp.data_mut()[i] += eps * dir.data()[i];
            xm.data_mut()[i] -= eps * dir.data()[i];
        }
        let diff_ln = {
            let a = ln(&xp);
            let b = ln(&xm);
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
                / (2.0 * eps)
        };
        l_ln = l_ln.max(diff_ln);

        // F directional difference at a random v state.
        let f_map = |v: &Tensor| -> Tensor {
            let mut z = Tensor::zeros(vec![l, dh]);
            for i in 0..l {
                for j in 0..dh {
                    let mut acc = 0.0;
                    for kk in 0..d {
                        acc += v.data()[i * d + kk] * w1.data()[kk * dh + j];
                    }
                    let s = acc / (1.0 + acc.abs());
                    z.data_mut()[i * dh + j] = s;
                }
            }
            let mut h = Tensor::zeros(vec![l, d]);
            for i in 0..l {
                for j in 0..d {
                    let mut acc = 0.0;
                    for kk in 0..dh {
                        acc += z.data()[i * dh + kk] * w2.data()[kk * d + j];
                    }
                    h.data_mut()[i * d + j] = acc;
                }
            }
            h
        };
        let diff_f = {
            let a = f_map(&xp);
            let b = f_map(&xm);
            a.data()
                .iter()
                .zip(b.data())
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
                / (2.0 * eps)
        };
        l_f = l_f.max(diff_f);
    }
    Ok(MeasuredLipschitz {
        l_ln: 1.1 * l_ln,
        l_f: 1.1 * l_f,
    })
}
