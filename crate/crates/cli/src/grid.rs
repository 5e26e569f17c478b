//! Sweep grid files: `key=value` lines, one record per blank-line-separated
//! paragraph, `#` starts a comment.
//!
//! ```text
//! alpha=1
//! beta=1
//!
//! preset=object_insert
//! alpha=0.9
//! beta=1.1
//! ```

use painterly::attention::MaskEntry;
use painterly::pipeline::{PipelineConfig, TaskPreset};

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
}

fn apply(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<(), String> {
    match key {
        "preset" => {
            let p: TaskPreset = value.parse().map_err(|e| format!("{e}"))?;
            cfg.preset = p;
            cfg.t_share = p.t_share();
        }
        "alpha" => cfg.alpha = value.parse::<MaskEntry>().map_err(|e| format!("alpha: {e}"))?,
        "beta" => cfg.beta = value.parse::<MaskEntry>().map_err(|e| format!("beta: {e}"))?,
        "t_share" => cfg.t_share = parse(key, value)?,
        "l_share" => cfg.l_share = parse(key, value)?,
        "steps" => cfg.steps = parse(key, value)?,
        "seed" => cfg.seed = parse(key, value)?,
        "size" | "image_size" => cfg.image_size = parse(key, value)?,
        _ => return Err(format!("unknown key {key:?}")),
    }
    Ok(())
}

/// Parses every record on top of `base`. A `preset` line is applied before
/// the other keys of its record, so explicit values win regardless of order.
/// Without an explicit `t_share` the inherited one is capped at `steps`.
pub fn parse_grid(text: &str, base: &PipelineConfig) -> Result<Vec<PipelineConfig>, String> {
    let mut records: Vec<Vec<(usize, String, String)>> = vec![Vec::new()];
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            if raw.trim().is_empty() && !records.last().is_some_and(Vec::is_empty) {
                records.push(Vec::new());
            }
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", n + 1))?;
        let key = k.trim().to_ascii_lowercase().replace('-', "_");
        records
            .last_mut()
            .expect("records is never empty")
            .push((n + 1, key, v.trim().to_string()));
    }
    records.retain(|r| !r.is_empty());
    if records.is_empty() {
        return Err("grid has no records".into());
    }
    records
        .iter()
        .map(|rec| {
            let mut cfg = base.clone();
            let (presets, rest): (Vec<_>, Vec<_>) = rec.iter().partition(|(_, k, _)| k == "preset");
            for (line, k, v) in presets.into_iter().chain(rest) {
                apply(&mut cfg, k, v).map_err(|e| format!("line {line}: {e}"))?;
            }
            if !rec.iter().any(|(_, k, _)| k == "t_share") {
                cfg.t_share = cfg.t_share.min(cfg.steps);
            }
            cfg.validate().map_err(|e| format!("record ending line {}: {e}", rec[rec.len() - 1].0))?;
            Ok(cfg)
        })
        .collect()
}
