//! Training config files: a `format_version` field next to the flattened
//! [`TrainConfig`].

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use zoomseg_core::train::{StageConfig, TrainConfig};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("unsupported config version {0}")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    Invalid(#[from] zoomseg_core::train::TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    pub format_version: u32,
    #[serde(flatten)]
    pub config: TrainConfig,
}

pub fn to_json(cfg: &TrainConfig) -> String {
    let file = ConfigFile { format_version: FORMAT_VERSION, config: cfg.clone() };
    serde_json::to_string_pretty(&file).expect("config serializes") + "\n"
}

pub fn parse(text: &str, origin: &str) -> Result<TrainConfig, ConfigError> {
    let file: ConfigFile = serde_json::from_str(text).map_err(|source| ConfigError::Json { path: origin.into(), source })?;
    if file.format_version != FORMAT_VERSION {
        return Err(ConfigError::UnsupportedVersion(file.format_version));
    }
    file.config.validate()?;
    Ok(file.config)
}

/// Loads a config file, or a built-in preset when `spec` is `paper` or
/// `desk` and no such file exists.
pub fn load(spec: &str) -> Result<TrainConfig, ConfigError> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Some(cfg) = TrainConfig::preset(spec) {
            return Ok(cfg);
        }
    }
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: spec.into(), source })?;
    parse(&text, spec)
}

/// `1.00E-03` style, as hyperparameter tables print learning rates.
pub fn sci(x: f64) -> String {
    let s = format!("{x:.2E}");
    match s.split_once('E') {
        Some((m, e)) => {
            let (sign, digits) = e.strip_prefix('-').map_or(("+", e), |d| ("-", d));
            format!("{m}E{sign}{digits:0>2}")
        }
        None => s,
    }
}

fn extents(e: [usize; 3]) -> String {
    format!("{}x{}x{}", e[0], e[1], e[2])
}

fn stage_line(s: &StageConfig, full: [usize; 3]) -> String {
    let patch: usize = s.patch_extents.iter().product();
    let whole: usize = full.iter().product();
    let snaps = if s.snapshot_epochs.is_empty() {
        "none".to_string()
    } else {
        s.snapshot_epochs.iter().map(u64::to_string).collect::<Vec<_>>().join(",")
    };
    format!(
        "{:?}: input {} ({:.1}% of {}), {} epochs, initial lr {}, restart every {} epochs, batch {}, snapshots {}",
        s.name,
        extents(s.patch_extents),
        100.0 * patch as f64 / whole as f64,
        extents(full),
        s.epochs,
        sci(s.schedule.eta_max),
        s.schedule.t0,
        s.batch_size,
        snaps,
    )
}

/// Hyperparameter block printed at the start of a training run.
/// `scan_extents` is the size the patch fractions are relative to.
pub fn run_header(cfg: &TrainConfig, scan_extents: [usize; 3]) -> String {
    let mut s = String::new();
    let a = &cfg.arch;
    let _ = writeln!(s, "architecture: {} ({} levels, base {} channels)", a.preset_name, a.levels, a.base_channels);
    let _ = writeln!(s, "optimizer: Adam (beta1 {}, beta2 {}, eps {})", cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps);
    let _ = writeln!(s, "loss: {} * BCE + {} * Dice", cfg.loss.alpha, 1.0 - cfg.loss.alpha);
    let _ = writeln!(s, "{}", stage_line(&cfg.zoom_in, scan_extents));
    let _ = writeln!(s, "{}", stage_line(&cfg.zoom_out, scan_extents));
    let _ = writeln!(s, "inference crop {}, threshold {}, seed {}", extents(cfg.inference_crop), cfg.threshold, cfg.seed);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip() {
        for cfg in [TrainConfig::paper(), TrainConfig::desk()] {
            assert_eq!(parse(&to_json(&cfg), "mem").unwrap(), cfg);
        }
    }

    #[test]
    fn shipped_files_match_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["paper", "desk"] {
            let text = std::fs::read_to_string(dir.join(format!("{name}.json"))).unwrap();
            assert_eq!(parse(&text, name).unwrap(), TrainConfig::preset(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn version_and_validation() {
        let text = to_json(&TrainConfig::desk()).replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(parse(&text, "m"), Err(ConfigError::UnsupportedVersion(2))));
        let mut bad = TrainConfig::desk();
        bad.threshold = 1.5;
        assert!(matches!(parse(&to_json(&bad), "m"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn scientific_format() {
        assert_eq!(sci(1e-3), "1.00E-03");
        assert_eq!(sci(1e-4), "1.00E-04");
        assert_eq!(sci(3e-3), "3.00E-03");
        assert_eq!(sci(12.5), "1.25E+01");
    }

    #[test]
    fn paper_header_lists_the_table_values() {
        let h = run_header(&TrainConfig::paper(), [197, 233, 189]);
        for needle in ["1200 epochs", "150 epochs", "1.00E-03", "1.00E-04", "128x128x128 (24.2%", "144x172x168 (48.0%", "snapshots 50,100,150"] {
            assert!(h.contains(needle), "{needle} missing from\n{h}");
        }
    }
}
