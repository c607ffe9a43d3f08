//! Artifact persistence: atomic file writes, the versioned text
//! checkpoint format, and the CSV formats for gradient logs and
//! distribution tables.
//!
//! Checkpoints store every f64 as its IEEE-754 bit pattern in hex, so a
//! save/load cycle is bit-exact and the determinism contract (same
//! config + seed, byte-identical artifacts) holds across machines.

use std::fs;
use std::path::{Path, PathBuf};

use dpdiff_core::autodiff::ParamStore;
use dpdiff_core::diagnostics::{EcdfRow, GradLog, GradLogRecord};
use dpdiff_core::tensor::Tensor;
use dpdiff_core::{CoreError, Result};

use crate::config::RunConfig;

const CHECKPOINT_MAGIC: &str = "dpdiff-checkpoint v1";

/// Write `contents` to `path` atomically (temp file in the same
/// directory, then rename).
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)
        .map_err(|e| CoreError::InvalidArgument(format!("creating {}: {e}", dir.display())))?;
    let tmp: PathBuf = dir.join(format!(
        ".{}.tmp.{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact"),
        std::process::id()
    ));
    fs::write(&tmp, contents)
        .map_err(|e| CoreError::InvalidArgument(format!("writing {}: {e}", tmp.display())))?;
    fs::rename(&tmp, path)
        .map_err(|e| CoreError::InvalidArgument(format!("renaming to {}: {e}", path.display())))?;
    Ok(())
}

fn f64_to_hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn f64_from_hex(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| CoreError::InvalidArgument(format!("bad f64 hex `{s}`")))
}

/// Serialize a checkpoint: magic line, embedded run config (indented so
/// it cannot be confused with param lines), then per-parameter blocks.
pub fn checkpoint_to_string(cfg: &RunConfig, params: &ParamStore, ema: &ParamStore) -> String {
    let mut s = String::new();
    s.push_str(CHECKPOINT_MAGIC);
    s.push('\n');
    s.push_str("config-begin\n");
    for line in cfg.serialize().lines() {
        s.push_str("  ");
        s.push_str(line);
        s.push('\n');
    }
    s.push_str("config-end\n");
    for (section, store) in [("params", params), ("ema", ema)] {
        s.push_str(&format!("section {section}\n"));
        for (name, t) in store.iter() {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("param {name} {}\n", dims.join("x")));
            let words: Vec<String> = t.data().iter().map(|&v| f64_to_hex(v)).collect();
            s.push_str(&words.join(" "));
            s.push('\n');
        }
    }
    s
}

/// Parsed checkpoint.
pub struct Checkpoint {
    pub config: RunConfig,
    pub params: Vec<(String, Tensor)>,
    pub ema: Vec<(String, Tensor)>,
}

pub fn checkpoint_from_string(text: &str) -> Result<Checkpoint> {
    let mut lines = text.lines().peekable();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(CoreError::InvalidArgument(
            "not a dpdiff checkpoint (bad magic line)".into(),
        ));
    }
    if lines.next() != Some("config-begin") {
        return Err(CoreError::InvalidArgument("missing config block".into()));
    }
    let mut cfg_text = String::new();
    for line in lines.by_ref() {
        if line == "config-end" {
            break;
        }
        cfg_text.push_str(line.trim_start());
        cfg_text.push('\n');
    }
    let config = RunConfig::parse(&cfg_text)?;

    let mut params = Vec::new();
    let mut ema = Vec::new();
    let mut current: Option<&mut Vec<(String, Tensor)>> = None;
    while let Some(line) = lines.next() {
        if let Some(sec) = line.strip_prefix("section ") {
            current = match sec {
                "params" => Some(&mut params),
                "ema" => Some(&mut ema),
                other => {
                    return Err(CoreError::InvalidArgument(format!(
                        "unknown checkpoint section `{other}`"
                    )))
                }
            };
            continue;
        }
        let Some(rest) = line.strip_prefix("param ") else {
            return Err(CoreError::InvalidArgument(format!(
                "unexpected checkpoint line `{line}`"
            )));
        };
        let mut it = rest.split_whitespace();
        let (Some(name), Some(dims)) = (it.next(), it.next()) else {
            return Err(CoreError::InvalidArgument(format!(
                "malformed param header `{rest}`"
            )));
        };
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| CoreError::InvalidArgument(format!("bad shape `{dims}`")))
            })
            .collect::<Result<_>>()?;
        let data_line = lines.next().ok_or_else(|| {
            CoreError::InvalidArgument(format!("missing data for param `{name}`"))
        })?;
        let data: Vec<f64> = data_line
            .split_whitespace()
            .map(f64_from_hex)
            .collect::<Result<_>>()?;
        let tensor = Tensor::new(shape, data)?;
        match current.as_deref_mut() {
            Some(store) => store.push((name.to_string(), tensor)),
            None => {
                return Err(CoreError::InvalidArgument(
                    "param outside any checkpoint section".into(),
                ))
            }
        }
    }
    Ok(Checkpoint { config, params, ema })
}

/// Copy loaded values into a store built for the same graph; errors name
/// missing or shape-mismatched parameters.
pub fn load_into(store: &mut ParamStore, values: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in values {
        let slot = store.get_mut(name).ok_or_else(|| {
            CoreError::InvalidArgument(format!("checkpoint parameter `{name}` not in model"))
        })?;
        if slot.shape() != t.shape() {
            return Err(CoreError::ShapeMismatch {
                context: format!("checkpoint parameter `{name}`"),
                expected: slot.shape().to_vec(),
                got: t.shape().to_vec(),
            });
        }
        slot.data_mut().copy_from_slice(t.data());
    }
    Ok(())
}

/// Gradient log CSV: a clip-threshold metadata comment, then the header
/// `step,total_norm,cond_norm,other_norm,eta`.
pub fn grad_log_to_csv(log: &GradLog, clip_c: f64) -> String {
    let mut s = String::new();
    s.push_str(&format!("# clip_c = {}\n", fmt(clip_c)));
    s.push_str("step,total_norm,cond_norm,other_norm,eta\n");
    for r in log.records() {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step,
            fmt(r.total_norm),
            fmt(r.cond_norm),
            fmt(r.other_norm),
            fmt(r.eta)
        ));
    }
    s
}

/// Parse a gradient log CSV back, returning the log and its clip
/// threshold. Validation at ingest re-checks the partition identity.
pub fn grad_log_from_csv(text: &str) -> Result<(GradLog, f64)> {
    let mut lines = text.lines();
    let meta = lines
        .next()
        .ok_or_else(|| CoreError::Empty("empty gradient log".into()))?;
    let clip_c = meta
        .strip_prefix("# clip_c =")
        .map(str::trim)
        .ok_or_else(|| {
            CoreError::InvalidArgument("gradient log missing `# clip_c =` metadata".into())
        })
        .and_then(parse_f64)?;
    let header = lines.next().unwrap_or("");
    if header != "step,total_norm,cond_norm,other_norm,eta" {
        return Err(CoreError::InvalidArgument(format!(
            "unexpected gradient log header `{header}`"
        )));
    }
    let mut log = GradLog::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(CoreError::InvalidArgument(format!(
                "gradient log row {}: expected 5 columns, got {}",
                i + 3,
                cols.len()
            )));
        }
        log.push(GradLogRecord {
            step: cols[0]
                .parse()
                .map_err(|_| CoreError::InvalidArgument(format!("bad step `{}`", cols[0])))?,
            total_norm: parse_f64(cols[1])?,
            cond_norm: parse_f64(cols[2])?,
            other_norm: parse_f64(cols[3])?,
            eta: parse_f64(cols[4])?,
        })?;
    }
    Ok((log, clip_c))
}

/// ECDF/CCDF CSV with header `t,ecdf,ccdf`.
pub fn ecdf_to_csv(rows: &[EcdfRow]) -> String {
    let mut s = String::from("t,ecdf,ccdf\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", fmt(r.t), fmt(r.ecdf), fmt(r.ccdf)));
    }
    s
}

/// Shortest round-trip f64 formatting; `inf` spelled out for the
/// config-compatible sentinel.
pub fn fmt(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn parse_f64(s: &str) -> Result<f64> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => s
            .parse::<f64>()
            .map_err(|_| CoreError::InvalidArgument(format!("bad number `{s}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dpdiff_core::model::{ComponentSwitches, Denoiser};
    use dpdiff_core::rng::CounterRng;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = RunConfig::desk();
        let den = Denoiser::build(
            cfg.train.model.clone(),
            cfg.train.bounds,
            ComponentSwitches::full(),
        )
        .unwrap();
        let mut rng = CounterRng::new(3, "ckpt");
        let params = den.init_params(&mut rng);
        let mut ema = den.init_params(&mut rng);
        // Perturb EMA so the two sections differ.
        for (_, t) in ema.iter_mut() {
            for v in t.data_mut() {
                *v *= 1.000000000000123;
            }
        }
        let text = checkpoint_to_string(&cfg, &params, &ema);
        let loaded = checkpoint_from_string(&text).unwrap();
        assert_eq!(loaded.config, cfg);

        let mut restored = den.init_params(&mut CounterRng::new(99, "other"));
        load_into(&mut restored, &loaded.params).unwrap();
        for ((na, ta), (nb, tb)) in params.iter().zip(restored.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "bit mismatch in {na}");
        }
        let mut restored_ema = den.init_params(&mut CounterRng::new(98, "other2"));
        load_into(&mut restored_ema, &loaded.ema).unwrap();
        for ((_, ta), (_, tb)) in ema.iter().zip(restored_ema.iter()) {
            assert_eq!(ta.data(), tb.data());
        }

        // Serialization itself is deterministic.
        assert_eq!(text, checkpoint_to_string(&cfg, &params, &ema));
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(checkpoint_from_string("nope").is_err());
        let cfg = RunConfig::desk();
        let den = Denoiser::build(
            cfg.train.model.clone(),
            cfg.train.bounds,
            ComponentSwitches::full(),
        )
        .unwrap();
        let params = den.init_params(&mut CounterRng::new(1, "x"));
        let text = checkpoint_to_string(&cfg, &params, &params);
        let truncated = &text[..text.len() / 2];
        assert!(checkpoint_from_string(truncated).is_err());
    }

    #[test]
    fn grad_log_csv_roundtrip() {
        let mut log = GradLog::new();
        for i in 0..20 {
            let cond = 0.1 * i as f64;
            let other = 1.0 + 0.05 * i as f64;
            let total = (cond * cond + other * other).sqrt();
            log.push(GradLogRecord {
                step: i,
                total_norm: total,
                cond_norm: cond,
                other_norm: other,
                eta: (1.0f64).min(1.0 / total),
            })
            .unwrap();
        }
        let csv = grad_log_to_csv(&log, 1.0);
        let (back, c) = grad_log_from_csv(&csv).unwrap();
        assert_eq!(c, 1.0);
        assert_eq!(back.records(), log.records());
        // Byte-stable re-serialization.
        assert_eq!(grad_log_to_csv(&back, c), csv);
    }

    #[test]
    fn grad_log_csv_rejects_bad_input() {
        assert!(grad_log_from_csv("").is_err());
        assert!(grad_log_from_csv("step,total\n1,2\n").is_err());
        let bad = "# clip_c = 1\nstep,total_norm,cond_norm,other_norm,eta\n0,5,3,4.5,1\n";
        assert!(grad_log_from_csv(bad).is_err()); // partition identity fails
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        write_atomic(&path, "first").unwrap();
        write_atomic(&path, "second").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "second");
        // No temp droppings left behind.
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains("tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
