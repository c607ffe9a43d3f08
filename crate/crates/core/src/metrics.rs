//! Evaluation suite: point metrics over generated positions, distributional
//! divergences between pooled samples, and a temporal spectral distance.
//!
//! Where the underlying definitions admit choices (histogram binning, MMD
//! kernel bandwidth, periodogram normalization) the choices are fixed here:
//! 50 equal-width bins over the union range, Gaussian kernel with the
//! median-heuristic bandwidth, and magnitude periodograms normalized to
//! sum one. Divergences are pooled over all values rather than averaged
//! per window.

use crate::error::{CoreError, Result};

/// Number of equal-width histogram bins for KL/JS.
pub const HIST_BINS: usize = 50;
/// Additive histogram smoothing before normalization.
pub const HIST_SMOOTHING: f64 = 1e-12;
/// Targets below this magnitude are skipped by MAPE.
pub const MAPE_FLOOR: f64 = 1e-6;

/// Point metrics over masked (generated) positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMetrics {
    pub rmse: f64,
    pub mae: f64,
    /// Mean absolute percentage error over targets with |t| >= 1e-6;
    /// NaN if no such target exists.
    pub mape: f64,
    pub r2: f64,
}

/// Distributional divergences between two pooled samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistMetrics {
    pub kl: f64,
    pub js: f64,
    pub ws: f64,
    pub ks: f64,
    pub mmd: f64,
}

/// Full evaluation report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub point: PointMetrics,
    pub dist: DistMetrics,
    pub spectral_dist: f64,
}

/// RMSE / MAE / MAPE / R2 over positions where `mask` is non-zero.
pub fn point_metrics(pred: &[f64], target: &[f64], mask: &[u8]) -> Result<PointMetrics> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(CoreError::ShapeMismatch {
            context: "point_metrics: pred/target/mask lengths".into(),
            expected: vec![pred.len()],
            got: vec![target.len(), mask.len()],
        });
    }
    let mut n = 0usize;
    let (mut sse, mut sae, mut spe, mut npe) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    let mut tsum = 0.0f64;
    for i in 0..pred.len() {
        if mask[i] == 0 {
            continue;
        }
        n += 1;
        let e = pred[i] - target[i];
        sse += e * e;
        sae += e.abs();
        tsum += target[i];
        if target[i].abs() >= MAPE_FLOOR {
            spe += (e / target[i]).abs();
            npe += 1;
        }
    }
    if n == 0 {
        return Err(CoreError::Empty("point_metrics: no masked positions".into()));
    }
    let tmean = tsum / n as f64;
    let sst: f64 = (0..pred.len())
        .filter(|&i| mask[i] != 0)
        .map(|i| (target[i] - tmean) * (target[i] - tmean))
        .sum();
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else if sse == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    Ok(PointMetrics {
        rmse: (sse / n as f64).sqrt(),
        mae: sae / n as f64,
        mape: if npe > 0 { spe / npe as f64 } else { f64::NAN },
        r2,
    })
}

fn histogram(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut h = vec![HIST_SMOOTHING; bins];
    let width = (hi - lo).max(f64::MIN_POSITIVE);
    for &v in samples {
        let idx = (((v - lo) / width) * bins as f64) as usize;
        h[idx.min(bins - 1)] += 1.0;
    }
    let total: f64 = h.iter().sum();
    for v in &mut h {
        *v /= total;
    }
    h
}

fn kl_of(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pi, &qi)| if pi > 0.0 { pi * (pi / qi).ln() } else { 0.0 })
        .sum()
}

/// Histogram KL(p || q) and Jensen-Shannon divergence (natural log) over
/// shared equal-width bins spanning the union range.
pub fn hist_divergences(p_samples: &[f64], q_samples: &[f64], bins: usize) -> Result<(f64, f64)> {
    if p_samples.is_empty() || q_samples.is_empty() {
        return Err(CoreError::Empty("hist_divergences: empty sample".into()));
    }
    if bins == 0 {
        return Err(CoreError::InvalidArgument("hist_divergences: zero bins".into()));
    }
    let all = p_samples.iter().chain(q_samples.iter());
    let lo = all.clone().cloned().fold(f64::INFINITY, f64::min);
    let hi = all.cloned().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let p = histogram(p_samples, lo, hi, bins);
    let q = histogram(q_samples, lo, hi, bins);
    let kl = kl_of(&p, &q);
    let m: Vec<f64> = p.iter().zip(&q).map(|(a, b)| 0.5 * (a + b)).collect();
    let js = 0.5 * kl_of(&p, &m) + 0.5 * kl_of(&q, &m);
    Ok((kl, js))
}

/// 1-D Wasserstein-1 (sorted quantile integral) and Kolmogorov-Smirnov
/// statistic (max absolute ECDF gap).
pub fn ws_ks(p_samples: &[f64], q_samples: &[f64]) -> Result<(f64, f64)> {
    if p_samples.is_empty() || q_samples.is_empty() {
        return Err(CoreError::Empty("ws_ks: empty sample".into()));
    }
    let mut p = p_samples.to_vec();
    let mut q = q_samples.to_vec();
    p.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN"));
    q.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN"));

    // Wasserstein-1 as the integral of |F_p^{-1}(u) - F_q^{-1}(u)| over a
    // merged breakpoint grid of both empirical quantile functions.
    let (np, nq) = (p.len(), q.len());
    let mut ws = 0.0f64;
    let (mut i, mut j, mut u) = (0usize, 0usize, 0.0f64);
    while i < np && j < nq {
        let up = (i + 1) as f64 / np as f64;
        let uq = (j + 1) as f64 / nq as f64;
        let next = up.min(uq);
        ws += (p[i] - q[j]).abs() * (next - u);
        u = next;
        if up <= next {
            i += 1;
        }
        if uq <= next {
            j += 1;
        }
    }

    // KS over the pooled support.
    let mut ks = 0.0f64;
    let (mut i, mut j) = (0usize, 0usize);
    while i < np || j < nq {
        let t = match (p.get(i), q.get(j)) {
            (Some(&a), Some(&b)) => a.min(b),
            (Some(&a), None) => a,
            (None, Some(&b)) => b,
            (None, None) => break,
        };
        while i < np && p[i] <= t {
            i += 1;
        }
        while j < nq && q[j] <= t {
            j += 1;
        }
        let gap = (i as f64 / np as f64 - j as f64 / nq as f64).abs();
        ks = ks.max(gap);
    }
    Ok((ws, ks))
}

/// Median pairwise absolute distance between the pooled samples; used as
/// the default MMD bandwidth. Falls back to 1 if the median degenerates.
pub fn median_heuristic_bandwidth(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).cloned().collect();
    let mut dists = Vec::with_capacity(pooled.len() * (pooled.len() - 1) / 2);
    for i in 0..pooled.len() {
        for j in (i + 1)..pooled.len() {
            dists.push((pooled[i] - pooled[j]).abs());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN"));
    let med = dists[dists.len() / 2];
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Unbiased MMD estimate with Gaussian kernel exp(-(a-b)^2 / (2 bw^2)),
/// clamped at zero before the square root.
pub fn mmd_rbf(x: &[f64], y: &[f64], bandwidth: f64) -> Result<f64> {
    if x.len() < 2 || y.len() < 2 {
        return Err(CoreError::InvalidArgument(
            "mmd_rbf: unbiased estimator needs at least 2 samples per side".into(),
        ));
    }
    if !(bandwidth > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "mmd_rbf: bandwidth must be positive, got {bandwidth}"
        )));
    }
    let k = |a: f64, b: f64| (-(a - b) * (a - b) / (2.0 * bandwidth * bandwidth)).exp();
    let (m, n) = (x.len() as f64, y.len() as f64);
    let mut kxx = 0.0;
    for i in 0..x.len() {
        for j in 0..x.len() {
            if i != j {
                kxx += k(x[i], x[j]);
            }
        }
    }
    let mut kyy = 0.0;
    for i in 0..y.len() {
        for j in 0..y.len() {
            if i != j {
                kyy += k(y[i], y[j]);
            }
        }
    }
    let mut kxy = 0.0;
    for &a in x {
        for &b in y {
            kxy += k(a, b);
        }
    }
    let mmd2 = kxx / (m * (m - 1.0)) + kyy / (n * (n - 1.0)) - 2.0 * kxy / (m * n);
    Ok(mmd2.max(0.0).sqrt())
}

/// Normalized magnitude periodogram via the naive DFT.
fn periodogram_normalized(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut power = vec![0.0f64; n];
    for k in 0..n {
        let (mut re, mut im) = (0.0f64, 0.0f64);
        for (t, &v) in x.iter().enumerate() {
            let ang = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            re += v * ang.cos();
            im += v * ang.sin();
        }
        power[k] = re * re + im * im;
    }
    let total: f64 = power.iter().sum();
    if total > 0.0 {
        for p in &mut power {
            *p /= total;
        }
    }
    power
}

/// Mean squared difference of normalized periodograms; invariant to
/// circular shifts of either argument.
pub fn spectral_distance(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(CoreError::ShapeMismatch {
            context: "spectral_distance: series lengths".into(),
            expected: vec![pred.len()],
            got: vec![target.len()],
        });
    }
    if pred.len() < 4 {
        return Err(CoreError::InvalidArgument(format!(
            "spectral_distance needs length >= 4, got {}",
            pred.len()
        )));
    }
    let a = periodogram_normalized(pred);
    let b = periodogram_normalized(target);
    Ok(a.iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64)
}

/// Assemble the full report from generated/reference series. `pred` and
/// `target` are flattened windows with `mask` marking generated positions;
/// the distributional metrics pool masked values from both sides.
pub fn metric_report(pred: &[f64], target: &[f64], mask: &[u8]) -> Result<MetricReport> {
    let point = point_metrics(pred, target, mask)?;
    let gen: Vec<f64> = pred
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m != 0)
        .map(|(&v, _)| v)
        .collect();
    let refv: Vec<f64> = target
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m != 0)
        .map(|(&v, _)| v)
        .collect();
    let (kl, js) = hist_divergences(&gen, &refv, HIST_BINS)?;
    let (ws, ks) = ws_ks(&gen, &refv)?;
    let bw = median_heuristic_bandwidth(&gen, &refv);
    let mmd = mmd_rbf(&gen, &refv, bw)?;
    let spectral = spectral_distance(pred, target)?;
    Ok(MetricReport {
        point,
        dist: DistMetrics { kl, js, ws, ks, mmd },
        spectral_dist: spectral,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    #[test]
    fn point_metrics_exact_cases() {
        let t = [1.0, 2.0, 3.0, 4.0];
        let m = [1u8, 1, 1, 1];
        let p = point_metrics(&t, &t, &m).unwrap();
        assert_eq!(p.rmse, 0.0);
        assert_eq!(p.mae, 0.0);
        assert_eq!(p.mape, 0.0);
        assert_eq!(p.r2, 1.0);

        // Predicting the mean gives r2 = 0 by definition.
        let mean = [2.5; 4];
        let p = point_metrics(&mean, &t, &m).unwrap();
        assert!(p.r2.abs() < 1e-15);

        // Offset by one everywhere.
        let off = [2.0, 3.0, 4.0, 5.0];
        let p = point_metrics(&off, &t, &m).unwrap();
        assert!((p.rmse - 1.0).abs() < 1e-15);
        assert!((p.mae - 1.0).abs() < 1e-15);

        // Mask selects a subset; tiny targets skipped by MAPE.
        let t2 = [1e-9, 2.0, 3.0];
        let p2 = [1.0, 2.5, 99.0];
        let m2 = [1u8, 1, 0];
        let pm = point_metrics(&p2, &t2, &m2).unwrap();
        assert!((pm.mape - 0.25).abs() < 1e-12); // only the 2.0 target counts

        assert!(point_metrics(&t, &t, &[0, 0, 0, 0]).is_err());
    }

    #[test]
    fn hist_divergence_cases() {
        let mut rng = CounterRng::new(21, "hist");
        let a: Vec<f64> = (0..2000).map(|_| rng.normal()).collect();
        let (kl, js) = hist_divergences(&a, &a, HIST_BINS).unwrap();
        assert!(kl.abs() < 1e-9);
        assert!(js.abs() < 1e-9);

        // Disjoint supports: JS approaches ln 2.
        let left: Vec<f64> = (0..500).map(|i| i as f64 / 500.0).collect();
        let right: Vec<f64> = left.iter().map(|v| v + 10.0).collect();
        let (_, js) = hist_divergences(&left, &right, HIST_BINS).unwrap();
        assert!((js - std::f64::consts::LN_2).abs() < 1e-6, "{js}");

        // Hand-computed 3-bin case. Samples placed so the bins receive
        // p = (2/4, 1/4, 1/4) and q = (1/4, 1/4, 2/4) over range [0, 3).
        let p_s = [0.1, 0.2, 1.1, 2.1];
        let q_s = [0.1, 1.1, 2.1, 2.2];
        let (kl, js) = hist_divergences(&p_s, &q_s, 3).unwrap();
        let hand_kl = 0.5 * (0.5f64 / 0.25).ln() + 0.25 * 1.0f64.ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert!((kl - hand_kl).abs() < 1e-9, "{kl} vs {hand_kl}");
        let m = [0.375, 0.25, 0.375];
        let hand_js = 0.5
            * (0.5 * (0.5f64 / m[0]).ln() + 0.25 * (0.25f64 / m[1]).ln() + 0.25 * (0.25f64 / m[2]).ln())
            + 0.5
                * (0.25 * (0.25f64 / m[0]).ln()
                    + 0.25 * (0.25f64 / m[1]).ln()
                    + 0.5 * (0.5f64 / m[2]).ln());
        assert!((js - hand_js).abs() < 1e-9);
    }

    #[test]
    fn ws_ks_cases() {
        let a = [3.0, 1.0, 2.0];
        let (ws, ks) = ws_ks(&a, &a).unwrap();
        assert_eq!(ws, 0.0);
        assert_eq!(ks, 0.0);

        let (ws, ks) = ws_ks(&[0.0], &[1.0]).unwrap();
        assert!((ws - 1.0).abs() < 1e-15);
        assert_eq!(ks, 1.0);

        // Sorted-difference oracle: equal sizes reduce to mean |p_i - q_i|.
        let (ws, _) = ws_ks(&[0.0, 1.0], &[0.5, 1.5]).unwrap();
        assert!((ws - 0.5).abs() < 1e-15);

        // Unequal sizes against a closed form: {0} vs {0, 1} has W1 = 0.5.
        let (ws, _) = ws_ks(&[0.0], &[0.0, 1.0]).unwrap();
        assert!((ws - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mmd_cases() {
        let x = [0.3, -1.2, 0.8, 2.0];
        assert!(mmd_rbf(&x, &x, 1.0).unwrap() < 1e-9);

        // Huge bandwidth: kernel constant 1, MMD vanishes.
        let y = [5.0, 6.0, 7.0, 8.0];
        assert!(mmd_rbf(&x, &y, 1e9).unwrap() < 1e-6);

        // Brute-force double-sum oracle on two 3-point sets.
        let a = [0.0, 1.0, 2.0];
        let b = [0.5, 1.5, 3.0];
        let bw = 0.8;
        let k = |p: f64, q: f64| (-(p - q) * (p - q) / (2.0 * bw * bw)).exp();
        let mut kxx = 0.0;
        let mut kyy = 0.0;
        let mut kxy = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    kxx += k(a[i], a[j]);
                    kyy += k(b[i], b[j]);
                }
                kxy += k(a[i], b[j]);
            }
        }
        let oracle = (kxx / 6.0 + kyy / 6.0 - 2.0 * kxy / 9.0).max(0.0).sqrt();
        assert!((mmd_rbf(&a, &b, bw).unwrap() - oracle).abs() < 1e-12);

        assert!(mmd_rbf(&[1.0], &x, 1.0).is_err());
        assert!(mmd_rbf(&x, &y, 0.0).is_err());
    }

    #[test]
    fn spectral_distance_cases() {
        let x = [1.0, -0.5, 2.0, 0.25, -1.0, 0.75];
        assert_eq!(spectral_distance(&x, &x).unwrap(), 0.0);

        // Circular shift leaves the magnitude periodogram unchanged.
        let shifted = [0.75, 1.0, -0.5, 2.0, 0.25, -1.0];
        assert!(spectral_distance(&x, &shifted).unwrap() < 1e-24);

        // Hand 4-point DFT oracle: a = [1,0,0,0] has flat periodogram
        // (1/4 each); b = [1,1,1,1] concentrates at frequency zero.
        let a = [1.0, 0.0, 0.0, 0.0];
        let b = [1.0, 1.0, 1.0, 1.0];
        let got = spectral_distance(&a, &b).unwrap();
        // Normalized spectra: (0.25, 0.25, 0.25, 0.25) vs (1, 0, 0, 0).
        let hand = ((0.75f64).powi(2) + 3.0 * (0.25f64).powi(2)) / 4.0;
        assert!((got - hand).abs() < 1e-12, "{got} vs {hand}");

        assert!(spectral_distance(&a, &x).is_err());
        assert!(spectral_distance(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn divergence_symmetry_and_bounds() {
        let mut rng = CounterRng::new(31, "sym");
        for _ in 0..25 {
            let n = 20 + rng.below(30) as usize;
            let m = 20 + rng.below(30) as usize;
            let a: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.normal() + 0.5).collect();
            let (_, js_ab) = hist_divergences(&a, &b, HIST_BINS).unwrap();
            let (_, js_ba) = hist_divergences(&b, &a, HIST_BINS).unwrap();
            assert!((js_ab - js_ba).abs() < 1e-12);
            assert!(js_ab >= 0.0 && js_ab <= std::f64::consts::LN_2 + 1e-9);

            let (ws_ab, ks_ab) = ws_ks(&a, &b).unwrap();
            let (ws_ba, ks_ba) = ws_ks(&b, &a).unwrap();
            assert!((ws_ab - ws_ba).abs() < 1e-12);
            assert!((ks_ab - ks_ba).abs() < 1e-12);

            let bw = median_heuristic_bandwidth(&a, &b);
            let m_ab = mmd_rbf(&a, &b, bw).unwrap();
            let m_ba = mmd_rbf(&b, &a, bw).unwrap();
            assert!((m_ab - m_ba).abs() < 1e-12);
            assert!(m_ab >= 0.0);
        }
    }

    #[test]
    fn ws_triangle_inequality() {
        let mut rng = CounterRng::new(32, "tri");
        for _ in 0..50 {
            let gen = |rng: &mut CounterRng| -> Vec<f64> {
                let n = 5 + rng.below(20) as usize;
                (0..n).map(|_| rng.normal() * (1.0 + rng.uniform())).collect()
            };
            let (a, b, c) = (gen(&mut rng), gen(&mut rng), gen(&mut rng));
            let (ab, _) = ws_ks(&a, &b).unwrap();
            let (bc, _) = ws_ks(&b, &c).unwrap();
            let (ac, _) = ws_ks(&a, &c).unwrap();
            assert!(ac <= ab + bc + 1e-9, "{ac} > {ab} + {bc}");
        }
    }

    #[test]
    fn full_report_self_comparison() {
        let mut rng = CounterRng::new(33, "rep");
        let n = 48;
        let target: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let mask: Vec<u8> = (0..n).map(|i| u8::from(i % 3 != 0)).collect();
        let r = metric_report(&target, &target, &mask).unwrap();
        assert_eq!(r.point.rmse, 0.0);
        assert!(r.dist.kl.abs() < 1e-9);
        assert!(r.dist.ws.abs() < 1e-15);
        assert!(r.dist.mmd < 1e-9);
        assert_eq!(r.spectral_dist, 0.0);
    }
}
