//! Text checkpoints:
//!
//! ```text
//! GUARDIAN-CKPT-1
//! config {"k":64,"d":32,...}
//! param <name> <rows> <cols>
//! <rows*cols whitespace-separated values>
//! ...
//! end
//! ```
//!
//! Values are written with Rust's shortest round-trip formatting, so a
//! save/load cycle is lossless. Optimizer moments are not stored.

use std::fmt::Write as _;
use std::path::Path;

use super::model::{Detector, DetectorConfig};
use crate::error::{GuardianError, Result};
use crate::numerics::{ParamStore, Tensor2D};

pub const CHECKPOINT_MAGIC: &str = "GUARDIAN-CKPT-1";

pub fn encode(detector: &Detector) -> Result<String> {
    let mut out = String::new();
    writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
    writeln!(out, "config {}", serde_json::to_string(detector.config())?).unwrap();
    for (name, p) in detector.params().iter() {
        let (r, c) = p.value.shape();
        writeln!(out, "param {name} {r} {c}").unwrap();
        let line: Vec<String> = p.value.values().iter().map(f64::to_string).collect();
        writeln!(out, "{}", line.join(" ")).unwrap();
    }
    writeln!(out, "end").unwrap();
    Ok(out)
}

pub fn decode(text: &str) -> Result<Detector> {
    let bad = |m: String| GuardianError::Checkpoint(m);
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, CHECKPOINT_MAGIC)) => {}
        other => return Err(bad(format!("missing magic header, found {:?}", other.map(|l| l.1)))),
    }
    let cfg: DetectorConfig = match lines.next() {
        Some((_, l)) if l.starts_with("config ") => serde_json::from_str(&l["config ".len()..])
            .map_err(|e| bad(format!("line 2: {e}")))?,
        _ => return Err(bad("line 2: expected config".into())),
    };
    let mut params = ParamStore::new();
    loop {
        let Some((no, line)) = lines.next() else {
            return Err(bad("truncated checkpoint (no end marker)".into()));
        };
        if line == "end" {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [kind, name, rows, cols] = fields[..] else {
            return Err(bad(format!("line {}: expected `param <name> <rows> <cols>`", no + 1)));
        };
        if kind != "param" {
            return Err(bad(format!("line {}: unexpected record {kind:?}", no + 1)));
        }
        let parse_dim = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", no + 1)));
        let (rows, cols) = (parse_dim(rows)?, parse_dim(cols)?);
        let (vno, vline) = lines
            .next()
            .ok_or_else(|| bad(format!("line {}: missing values for {name}", no + 2)))?;
        let values = vline
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("line {}: {e}", vno + 1)))?;
        let tensor = Tensor2D::new(rows, cols, values).map_err(|e| bad(format!("line {}: {e}", vno + 1)))?;
        params.insert(name, tensor);
    }
    Detector::from_parts(cfg, params)
}

pub fn save(detector: &Detector, path: &Path) -> Result<()> {
    std::fs::write(path, encode(detector)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Detector> {
    decode(&std::fs::read_to_string(path)?)
}
