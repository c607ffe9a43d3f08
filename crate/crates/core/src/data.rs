//! Windowed time-series data, observation masks, and the synthetic
//! rare-event generator.
//!
//! Masks follow the three-task scheme: random subsets (imputation), a
//! contiguous suffix (forecasting), and regularly strided blocks
//! (structured missingness). The synthetic generator injects rare
//! covariate bursts so conditioning statistics develop the heavy tails
//! the diagnostics are designed to expose.

use crate::error::{CoreError, Result};
use crate::rng::CounterRng;
use crate::tensor::Tensor;

/// Mask task family with its generating parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaskKind {
    Random { ratio: f64 },
    Block { pred_len: usize },
    Stride { num_blocks: usize },
}

/// Observation mask over a window: bit 1 = masked (to generate),
/// bit 0 = observed (conditioning).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub bits: Vec<u8>,
    pub kind: MaskKind,
}

impl MaskSpec {
    fn checked(bits: Vec<u8>, kind: MaskKind) -> Result<Self> {
        let masked: usize = bits.iter().map(|&b| b as usize).sum();
        if masked == 0 || masked == bits.len() {
            return Err(CoreError::InvalidArgument(format!(
                "mask must leave at least one observed and one masked position \
                 (masked {masked} of {})",
                bits.len()
            )));
        }
        Ok(MaskSpec { bits, kind })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i] == 1).collect()
    }
}

/// Uniform random mask with exactly round(ratio * L) masked positions.
pub fn random_mask(l: usize, ratio: f64, rng: &mut CounterRng) -> Result<MaskSpec> {
    let count = (ratio * l as f64).round() as usize;
    if count == 0 || count >= l {
        return Err(CoreError::InvalidArgument(format!(
            "random_mask: ratio {ratio} over length {l} yields degenerate count {count}"
        )));
    }
    let mut bits = vec![0u8; l];
    for i in rng.choose_distinct(l, count) {
        bits[i] = 1;
    }
    MaskSpec::checked(bits, MaskKind::Random { ratio })
}

/// Forecasting mask: the last `pred_len` positions are masked.
pub fn block_mask(l: usize, pred_len: usize) -> Result<MaskSpec> {
    if pred_len == 0 || pred_len >= l {
        return Err(CoreError::InvalidArgument(format!(
            "block_mask: pred_len {pred_len} must be in [1, {})",
            l
        )));
    }
    let mut bits = vec![0u8; l];
    for b in bits[l - pred_len..].iter_mut() {
        *b = 1;
    }
    MaskSpec::checked(bits, MaskKind::Block { pred_len })
}

/// Structured-stride mask: `num_blocks` equal-length disjoint intervals on
/// a regular stride with a random phase.
///
/// Interval length is floor(L / (2 * num_blocks)); block i starts at
/// i * floor(L / num_blocks) + phase.
pub fn stride_mask(l: usize, num_blocks: usize, rng: &mut CounterRng) -> Result<MaskSpec> {
    if num_blocks == 0 || num_blocks * 2 > l {
        return Err(CoreError::InvalidArgument(format!(
            "stride_mask: {num_blocks} blocks cannot fit in length {l}"
        )));
    }
    let len = l / (2 * num_blocks);
    let stride = l / num_blocks;
    debug_assert!(len >= 1 && len <= stride);
    let phase = rng.below(stride - len + 1);
    let mut bits = vec![0u8; l];
    for b in 0..num_blocks {
        let start = b * stride + phase;
        for bit in bits[start..start + len].iter_mut() {
            *bit = 1;
        }
    }
    MaskSpec::checked(bits, MaskKind::Stride { num_blocks })
}

/// One training/evaluation window cut from a longer series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    pub values: Tensor,
    pub origin: usize,
}

/// Sliding windows at offsets 0, stride, 2*stride, ...
pub fn window_dataset(series: &Tensor, l: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
    let (n, k) = series.dims2()?;
    if n < l {
        return Err(CoreError::InvalidArgument(format!(
            "series length {n} shorter than window {l}"
        )));
    }
    if stride == 0 {
        return Err(CoreError::InvalidArgument("window stride must be >= 1".into()));
    }
    let count = (n - l) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let origin = w * stride;
        let data = series.data()[origin * k..(origin + l) * k].to_vec();
        out.push(SeriesWindow {
            values: Tensor::new(vec![l, k], data)?,
            origin,
        });
    }
    Ok(out)
}

/// Per-channel standardization statistics from the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(series: &Tensor) -> Result<Self> {
        let (n, k) = series.dims2()?;
        if n == 0 {
            return Err(CoreError::Empty("NormStats::fit on empty series".into()));
        }
        let mut mean = vec![0.0; k];
        let mut std = vec![0.0; k];
        for ch in 0..k {
            let m = (0..n).map(|i| series.data()[i * k + ch]).sum::<f64>() / n as f64;
            let v = (0..n)
                .map(|i| {
                    let d = series.data()[i * k + ch] - m;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            if v <= 0.0 {
                return Err(CoreError::InvalidArgument(format!(
                    "channel {ch} is degenerate (zero variance)"
                )));
            }
            mean[ch] = m;
            std[ch] = v.sqrt();
        }
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, series: &Tensor) -> Result<Tensor> {
        let (n, k) = series.dims2()?;
        self.check_channels(k)?;
        let mut out = series.clone();
        for i in 0..n {
            for ch in 0..k {
                let v = &mut out.data_mut()[i * k + ch];
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
        Ok(out)
    }

    pub fn invert(&self, series: &Tensor) -> Result<Tensor> {
        let (n, k) = series.dims2()?;
        self.check_channels(k)?;
        let mut out = series.clone();
        for i in 0..n {
            for ch in 0..k {
                let v = &mut out.data_mut()[i * k + ch];
                *v = *v * self.std[ch] + self.mean[ch];
            }
        }
        Ok(out)
    }

    fn check_channels(&self, k: usize) -> Result<()> {
        if k != self.mean.len() {
            return Err(CoreError::ShapeMismatch {
                context: "NormStats channels".into(),
                expected: vec![self.mean.len()],
                got: vec![k],
            });
        }
        Ok(())
    }
}

/// Chronological split boundaries (train, validation, test) by fractions.
pub fn split_chronological(n: usize, train_frac: f64, val_frac: f64) -> (usize, usize) {
    let train_end = (n as f64 * train_frac).floor() as usize;
    let val_end = train_end + (n as f64 * val_frac).floor() as usize;
    (train_end, val_end.min(n))
}

const BURST_REGION: usize = 24;
const BURST_LEN: usize = 12;

/// Synthetic multivariate series with rare covariate bursts.
///
/// Channel 0 is the target: a seasonal sinusoid driven by the covariates
/// plus AR(1) noise. Channels 1.. are covariates: AR(1) noise that, with
/// probability `rare_event_prob` per length-24 region, carries a burst of
/// magnitude `rare_scale` times the base noise scale. Bursts make the
/// observed-statistics condition features heavy-tailed.
pub fn synth_series(
    n: usize,
    k: usize,
    rare_event_prob: f64,
    rare_scale: f64,
    rng: &mut CounterRng,
) -> Result<Tensor> {
    if k < 2 {
        return Err(CoreError::InvalidArgument(
            "synth_series needs a target plus at least one covariate channel".into(),
        ));
    }
    if !(0.0..=0.1).contains(&rare_event_prob) {
        return Err(CoreError::InvalidArgument(format!(
            "rare_event_prob {rare_event_prob} outside [0, 0.1]"
        )));
    }
    if rare_scale < 1.0 {
        return Err(CoreError::InvalidArgument(format!(
            "rare_scale {rare_scale} must be >= 1"
        )));
    }
    let mut out = Tensor::zeros(vec![n, k]);
    let noise_sigma = 0.3;
    let ar = 0.8;

    // Covariates first so the target can depend on them.
    for ch in 1..k {
        let mut state = 0.0;
        for i in 0..n {
            if i % BURST_REGION == 0 && rng.uniform() < rare_event_prob {
                // Burst: an additive plateau of rare_scale sigmas with
                // random sign, long enough to register in tail quantiles.
                let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                let offset = rng.below(BURST_REGION - BURST_LEN + 1);
                for j in 0..BURST_LEN {
                    let pos = i + offset + j;
                    if pos < n {
                        out.data_mut()[pos * k + ch] += sign * rare_scale * noise_sigma;
                    }
                }
            }
            state = ar * state + noise_sigma * rng.normal();
            out.data_mut()[i * k + ch] += state;
        }
    }
    let mut ar_state = 0.0;
    for i in 0..n {
        let season = (2.0 * std::f64::consts::PI * i as f64 / 24.0).sin();
        let cov_drive: f64 = (1..k).map(|ch| out.data()[i * k + ch]).sum::<f64>() / (k - 1) as f64;
        ar_state = ar * ar_state + 0.2 * rng.normal();
        out.data_mut()[i * k] = season + 0.5 * cov_drive + ar_state;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_mask_counts() {
        let mut rng = CounterRng::new(1, "mask");
        let m = random_mask(10, 0.5, &mut rng).unwrap();
        assert_eq!(m.masked_count(), 5);
        let m2 = random_mask(10, 0.1, &mut rng).unwrap();
        assert_eq!(m2.masked_count(), 1);
        assert!(random_mask(10, 0.01, &mut rng).is_err());
        assert!(random_mask(10, 0.99, &mut rng).is_err());
    }

    #[test]
    fn random_mask_reproducible() {
        let mut a = CounterRng::new(9, "m");
        let mut b = CounterRng::new(9, "m");
        assert_eq!(
            random_mask(24, 0.3, &mut a).unwrap(),
            random_mask(24, 0.3, &mut b).unwrap()
        );
    }

    #[test]
    fn block_mask_is_suffix() {
        let m = block_mask(168, 24).unwrap();
        assert!(m.bits[..144].iter().all(|&b| b == 0));
        assert!(m.bits[144..].iter().all(|&b| b == 1));
        let tiny = block_mask(5, 1).unwrap();
        assert_eq!(tiny.bits, vec![0, 0, 0, 0, 1]);
        assert!(block_mask(5, 5).is_err());
    }

    #[test]
    fn stride_mask_geometry() {
        let mut rng = CounterRng::new(2, "stride");
        for _ in 0..50 {
            let m = stride_mask(24, 4, &mut rng).unwrap();
            assert_eq!(m.masked_count(), 12); // 4 blocks of length 3
            // Disjoint contiguous runs: count transitions 0 -> 1.
            let mut runs = 0;
            let mut prev = 0;
            for &b in &m.bits {
                if b == 1 && prev == 0 {
                    runs += 1;
                }
                prev = b;
            }
            assert_eq!(runs, 4);
        }
        let single = stride_mask(10, 1, &mut rng).unwrap();
        assert_eq!(single.masked_count(), 5);
        assert!(stride_mask(6, 4, &mut rng).is_err());
    }

    #[test]
    fn window_counts() {
        let s = Tensor::zeros(vec![168, 3]);
        assert_eq!(window_dataset(&s, 168, 24).unwrap().len(), 1);
        let s2 = Tensor::zeros(vec![192, 3]);
        let ws = window_dataset(&s2, 168, 24).unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1].origin, 24);
        let s3 = Tensor::zeros(vec![167, 3]);
        assert!(window_dataset(&s3, 168, 24).is_err());
    }

    #[test]
    fn normalize_round_trip() {
        let mut rng = CounterRng::new(4, "norm");
        let mut s = Tensor::zeros(vec![200, 3]);
        rng.fill_normal(s.data_mut());
        for i in 0..200 {
            s.data_mut()[i * 3] = s.data()[i * 3] * 5.0 + 10.0;
        }
        let stats = NormStats::fit(&s).unwrap();
        let normed = stats.apply(&s).unwrap();
        let back = stats.invert(&normed).unwrap();
        for (a, b) in s.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-10);
        }
        // Normalized channels have mean ~0, std ~1.
        let restats = NormStats::fit(&normed).unwrap();
        assert!(restats.mean.iter().all(|m| m.abs() < 1e-10));
        assert!(restats.std.iter().all(|s| (s - 1.0).abs() < 1e-10));
    }

    #[test]
    fn degenerate_channel_rejected() {
        let s = Tensor::zeros(vec![50, 2]);
        assert!(NormStats::fit(&s).is_err());
    }

    #[test]
    fn synth_bursts_fatten_the_tail() {
        // p99/p50 of covariate magnitude grows when bursts are enabled.
        let ratio = |prob: f64| -> f64 {
            let mut rng = CounterRng::new(7, "synth");
            let s = synth_series(20_000, 3, prob, 8.0, &mut rng).unwrap();
            let mut mags: Vec<f64> = (0..20_000).map(|i| s.data()[i * 3 + 1].abs()).collect();
            mags.sort_by(|a, b| a.partial_cmp(b).unwrap());
            mags[(0.99 * (mags.len() - 1) as f64) as usize]
                / mags[(0.50 * (mags.len() - 1) as f64) as usize]
        };
        let burst_free = ratio(0.0);
        let bursty = ratio(0.05);
        assert!(
            bursty > burst_free * 1.2,
            "bursty {bursty} vs burst-free {burst_free}"
        );
    }

    #[test]
    fn synth_validates_arguments() {
        let mut rng = CounterRng::new(0, "v");
        assert!(synth_series(100, 1, 0.02, 8.0, &mut rng).is_err());
        assert!(synth_series(100, 3, 0.5, 8.0, &mut rng).is_err());
        assert!(synth_series(100, 3, 0.02, 0.5, &mut rng).is_err());
    }

    #[test]
    fn split_boundaries() {
        let (a, b) = split_chronological(100, 0.7, 0.15);
        assert_eq!((a, b), (70, 85));
    }
}
