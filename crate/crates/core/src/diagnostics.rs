//! Gradient-dynamics instrumentation: per-example norm logging, robust
//! percentile summaries, the empirical reduction factors rho_emp and
//! rho_cond, clipping-rate statistics, and ECDF/CCDF table export.
//!
//! The quantile method is fixed to linear interpolation at rank q(n - 1)
//! so tabulated numbers are comparable across implementations.

use crate::error::{CoreError, Result};

/// One logged per-example observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradLogRecord {
    pub step: usize,
    pub total_norm: f64,
    pub cond_norm: f64,
    pub other_norm: f64,
    pub eta: f64,
}

/// Ordered sink for gradient-log records; validates the partition identity
/// and the clipping-factor range at ingest.
#[derive(Debug, Clone, Default)]
pub struct GradLog {
    records: Vec<GradLogRecord>,
}

impl GradLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append one record, enforcing total^2 = cond^2 + other^2 within
    /// 1e-9 relative and 0 < eta <= 1.
    pub fn push(&mut self, rec: GradLogRecord) -> Result<()> {
        let lhs = rec.total_norm * rec.total_norm;
        let rhs = rec.cond_norm * rec.cond_norm + rec.other_norm * rec.other_norm;
        let scale = lhs.abs().max(rhs.abs()).max(1e-300);
        if (lhs - rhs).abs() / scale > 1e-9 {
            return Err(CoreError::InvalidArgument(format!(
                "gradient log record at step {} violates the partition identity: \
                 total^2 = {lhs}, cond^2 + other^2 = {rhs}",
                rec.step
            )));
        }
        if !(rec.eta > 0.0 && rec.eta <= 1.0) {
            return Err(CoreError::InvalidArgument(format!(
                "clipping factor must lie in (0, 1], got {} at step {}",
                rec.eta, rec.step
            )));
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[GradLogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Linear-interpolation percentile: rank = q (n - 1), interpolated between
/// the neighbouring order statistics.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CoreError::Empty("percentile of empty list".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(CoreError::InvalidArgument(format!(
            "quantile fraction must lie in [0, 1], got {q}"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-NaN values"));
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Robust tail summary of one partition's norm sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quantiles {
    pub p50: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
}

impl Quantiles {
    fn from_values(values: &[f64]) -> Result<Self> {
        Ok(Quantiles {
            p50: percentile(values, 0.50)?,
            p90: percentile(values, 0.90)?,
            p95: percentile(values, 0.95)?,
            p99: percentile(values, 0.99)?,
        })
    }

    pub fn at(&self, q: TailQuantile) -> f64 {
        match q {
            TailQuantile::P50 => self.p50,
            TailQuantile::P90 => self.p90,
            TailQuantile::P95 => self.p95,
            TailQuantile::P99 => self.p99,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TailQuantile {
    P50,
    P90,
    P95,
    P99,
}

/// Which norm partition a statistic refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    Total,
    Cond,
    Other,
}

/// p50/p90/p95/p99 for each of the total, conditioning, and backbone
/// gradient-norm partitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailSummary {
    pub total: Quantiles,
    pub cond: Quantiles,
    pub other: Quantiles,
}

impl TailSummary {
    pub fn from_log(log: &GradLog) -> Result<Self> {
        if log.is_empty() {
            return Err(CoreError::Empty("tail summary of empty gradient log".into()));
        }
        let pick = |f: fn(&GradLogRecord) -> f64| -> Vec<f64> {
            log.records().iter().map(f).collect()
        };
        Ok(TailSummary {
            total: Quantiles::from_values(&pick(|r| r.total_norm))?,
            cond: Quantiles::from_values(&pick(|r| r.cond_norm))?,
            other: Quantiles::from_values(&pick(|r| r.other_norm))?,
        })
    }

    pub fn partition(&self, p: Partition) -> &Quantiles {
        match p {
            Partition::Total => &self.total,
            Partition::Cond => &self.cond,
            Partition::Other => &self.other,
        }
    }
}

/// Eq. 12: empirical reduction factor S_aware / S_vanilla at the chosen
/// quantile and partition.
pub fn rho_emp(
    aware: &TailSummary,
    vanilla: &TailSummary,
    which: Partition,
    q: TailQuantile,
) -> Result<f64> {
    let denom = vanilla.partition(which).at(q);
    if denom <= 0.0 {
        return Err(CoreError::InvalidArgument(format!(
            "vanilla statistic must be positive for rho_emp, got {denom}"
        )));
    }
    Ok(aware.partition(which).at(q) / denom)
}

/// Clipping-rate and clipping-severity statistics of the logged run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipStats {
    /// Fraction of records with total_norm > C.
    pub p_clip: f64,
    /// eta quantiles at {10, 50, 90, 99} percent.
    pub eta_q10: f64,
    pub eta_q50: f64,
    pub eta_q90: f64,
    pub eta_q99: f64,
    pub eta_mean: f64,
}

pub fn clip_stats(log: &GradLog, c: f64) -> Result<ClipStats> {
    if log.is_empty() {
        return Err(CoreError::Empty("clip stats of empty gradient log".into()));
    }
    let n = log.len() as f64;
    let clipped = log.records().iter().filter(|r| r.total_norm > c).count();
    let etas: Vec<f64> = log.records().iter().map(|r| r.eta).collect();
    Ok(ClipStats {
        p_clip: clipped as f64 / n,
        eta_q10: percentile(&etas, 0.10)?,
        eta_q50: percentile(&etas, 0.50)?,
        eta_q90: percentile(&etas, 0.90)?,
        eta_q99: percentile(&etas, 0.99)?,
        eta_mean: etas.iter().sum::<f64>() / n,
    })
}

/// One row of the exported distribution table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EcdfRow {
    pub t: f64,
    pub ecdf: f64,
    pub ccdf: f64,
}

/// Evaluate ECDF and CCDF of `values` on an explicit grid. CCDF is
/// computed as the complementary count so ECDF + CCDF = 1 exactly.
pub fn ecdf_ccdf_on_grid(values: &[f64], grid: &[f64]) -> Result<Vec<EcdfRow>> {
    if values.is_empty() {
        return Err(CoreError::Empty("ECDF of empty sample".into()));
    }
    let n = values.len() as f64;
    Ok(grid
        .iter()
        .map(|&t| {
            let le = values.iter().filter(|&&v| v <= t).count();
            EcdfRow {
                t,
                ecdf: le as f64 / n,
                ccdf: (values.len() - le) as f64 / n,
            }
        })
        .collect())
}

/// Export the tail distribution on a logarithmic grid spanning
/// [p50 / 10, 10 max] with `grid_points` rows (matches log-scale tail
/// plots). Requires strictly positive values, as norms are.
pub fn ecdf_ccdf_export(values: &[f64], grid_points: usize) -> Result<Vec<EcdfRow>> {
    if values.is_empty() {
        return Err(CoreError::Empty("ECDF export of empty sample".into()));
    }
    if grid_points < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "ECDF grid needs at least 2 points, got {grid_points}"
        )));
    }
    let p50 = percentile(values, 0.5)?;
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(p50 > 0.0 && max > 0.0) {
        return Err(CoreError::InvalidArgument(
            "ECDF log grid requires positive p50 and max".into(),
        ));
    }
    let (lo, hi) = ((p50 / 10.0).ln(), (10.0 * max).ln());
    let grid: Vec<f64> = (0..grid_points)
        .map(|i| (lo + (hi - lo) * i as f64 / (grid_points - 1) as f64).exp())
        .collect();
    ecdf_ccdf_on_grid(values, &grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;

    fn rec(total: f64, cond: f64, eta: f64) -> GradLogRecord {
        let other = (total * total - cond * cond).max(0.0).sqrt();
        GradLogRecord {
            step: 0,
            total_norm: total,
            cond_norm: cond,
            other_norm: other,
            eta,
        }
    }

    #[test]
    fn ingest_enforces_partition_identity() {
        let mut log = GradLog::new();
        log.push(rec(5.0, 3.0, 1.0)).unwrap(); // other = 4, 3-4-5 triple
        let bad = GradLogRecord {
            step: 1,
            total_norm: 5.0,
            cond_norm: 3.0,
            other_norm: 4.1,
            eta: 1.0,
        };
        assert!(log.push(bad).is_err());
        let bad_eta = rec(1.0, 0.5, 0.0);
        assert!(log.push(bad_eta).is_err());
        assert_eq!(log.len(), 1);
    }

    #[test]
    fn percentile_examples() {
        assert_eq!(percentile(&[5.0], 0.0).unwrap(), 5.0);
        assert_eq!(percentile(&[5.0], 0.73).unwrap(), 5.0);
        let v: Vec<f64> = (1..=100).map(|i| i as f64).collect();
        // rank 0.5 * 99 = 49.5 between 50 and 51.
        assert!((percentile(&v, 0.5).unwrap() - 50.5).abs() < 1e-12);
        // rank 0.99 * 99 = 98.01 between 99 and 100.
        assert!((percentile(&v, 0.99).unwrap() - 99.01).abs() < 1e-12);
        assert!(percentile(&[], 0.5).is_err());
        assert!(percentile(&[1.0], 1.5).is_err());
    }

    #[test]
    fn percentile_unsorted_input() {
        let v = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6];
        let mut s = v;
        s.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(percentile(&v, 0.0).unwrap(), s[0]);
        assert_eq!(percentile(&v, 1.0).unwrap(), s[5]);
    }

    #[test]
    fn tail_summary_monotone_in_q() {
        let mut rng = CounterRng::new(3, "tail");
        let mut log = GradLog::new();
        for i in 0..500 {
            let cond = rng.uniform() * 2.0;
            let other = rng.uniform() * 5.0;
            let total = (cond * cond + other * other).sqrt();
            log.push(GradLogRecord {
                step: i,
                total_norm: total,
                cond_norm: cond,
                other_norm: other,
                eta: 1.0f64.min(1.0 / total.max(1e-12)),
            })
            .unwrap();
        }
        let s = TailSummary::from_log(&log).unwrap();
        for part in [Partition::Total, Partition::Cond, Partition::Other] {
            let q = s.partition(part);
            assert!(q.p50 <= q.p90 && q.p90 <= q.p95 && q.p95 <= q.p99);
        }
    }

    #[test]
    fn rho_emp_identity_and_table3_rows() {
        let mut log = GradLog::new();
        for i in 0..10 {
            log.push(rec(1.0 + i as f64, 0.5, 1.0)).unwrap();
        }
        let s = TailSummary::from_log(&log).unwrap();
        assert_eq!(rho_emp(&s, &s, Partition::Total, TailQuantile::P99).unwrap(), 1.0);

        // Table-3-style p99 ratios recomputed from the quoted numerators
        // and denominators.
        let mk = |p99: f64| TailSummary {
            total: Quantiles { p50: p99, p90: p99, p95: p99, p99 },
            cond: Quantiles { p50: p99, p90: p99, p95: p99, p99 },
            other: Quantiles { p50: p99, p90: p99, p95: p99, p99 },
        };
        let r_total =
            rho_emp(&mk(71.9), &mk(86.6), Partition::Total, TailQuantile::P99).unwrap();
        assert!((r_total - 0.830).abs() < 5e-4, "{r_total}");
        let r_cond =
            rho_emp(&mk(54.8), &mk(64.5), Partition::Cond, TailQuantile::P99).unwrap();
        assert!((r_cond - 0.850).abs() < 5e-4, "{r_cond}");
        assert!(rho_emp(&mk(1.0), &mk(0.0), Partition::Total, TailQuantile::P99).is_err());
    }

    #[test]
    fn clip_stats_examples() {
        // All norms below C: nothing clips, every eta is 1.
        let mut log = GradLog::new();
        for _ in 0..5 {
            log.push(rec(0.5, 0.3, 1.0)).unwrap();
        }
        let s = clip_stats(&log, 1.0).unwrap();
        assert_eq!(s.p_clip, 0.0);
        assert_eq!(s.eta_q10, 1.0);
        assert_eq!(s.eta_q99, 1.0);
        assert_eq!(s.eta_mean, 1.0);

        // Norms {0.5, 2.0} at C = 1: half clip, etas {1.0, 0.5}.
        let mut log2 = GradLog::new();
        log2.push(rec(0.5, 0.0, 1.0)).unwrap();
        log2.push(rec(2.0, 0.0, 0.5)).unwrap();
        let s2 = clip_stats(&log2, 1.0).unwrap();
        assert_eq!(s2.p_clip, 0.5);
        assert_eq!(s2.eta_q10, 0.55); // interpolated between 0.5 and 1.0
        assert_eq!(s2.eta_mean, 0.75);

        assert!(clip_stats(&GradLog::new(), 1.0).is_err());
    }

    #[test]
    fn ecdf_ccdf_basic_and_complement() {
        let rows = ecdf_ccdf_on_grid(&[2.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(rows[0].ecdf, 0.0);
        assert_eq!(rows[0].ccdf, 1.0);
        assert_eq!(rows[1].ccdf, 0.0); // t = max value
        assert_eq!(rows[2].ecdf, 1.0);

        let mut rng = CounterRng::new(11, "ecdf");
        let sample: Vec<f64> = (0..10_000).map(|_| rng.uniform()).collect();
        let rows = ecdf_ccdf_on_grid(&sample, &[0.5]).unwrap();
        assert!((rows[0].ecdf - 0.5).abs() < 0.02);
        assert_eq!(rows[0].ecdf + rows[0].ccdf, 1.0);
    }

    #[test]
    fn ecdf_export_grid_and_monotonicity() {
        let mut rng = CounterRng::new(12, "grid");
        let sample: Vec<f64> = (0..300).map(|_| rng.uniform() * 4.0 + 0.1).collect();
        let rows = ecdf_ccdf_export(&sample, 200).unwrap();
        assert_eq!(rows.len(), 200);
        let p50 = percentile(&sample, 0.5).unwrap();
        let max = sample.iter().cloned().fold(f64::MIN, f64::max);
        assert!((rows[0].t - p50 / 10.0).abs() < 1e-12 * p50);
        assert!((rows[199].t - 10.0 * max).abs() < 1e-9 * max);
        for w in rows.windows(2) {
            assert!(w[0].t < w[1].t);
            assert!(w[0].ecdf <= w[1].ecdf);
            assert!(w[0].ccdf >= w[1].ccdf);
        }
        for r in &rows {
            assert_eq!(r.ecdf + r.ccdf, 1.0); // exact complement by count
        }
        assert_eq!(rows[199].ccdf, 0.0);
    }
}
