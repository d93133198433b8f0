//! Fit configuration: a flat TOML document with the fields of
//! [`CalibrationConfig`], overridden field by field by command-line flags.

use std::path::Path;

use chrono::{DateTime, TimeZone, Utc};
use whiteguard_core::{CalibrationConfig, WhiteningMode};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub k: Option<usize>,
    pub samples_per_category: Option<usize>,
    pub split_fraction: Option<f64>,
    pub seed: Option<u64>,
    pub eigenvalue_floor: Option<f64>,
    pub global: bool,
}

pub fn parse_config(text: &str) -> CliResult<CalibrationConfig> {
    toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))
}

pub fn load_config(path: Option<&Path>, overrides: &Overrides) -> CliResult<CalibrationConfig> {
    let mut config = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            parse_config(&text).map_err(|e| e.with_path(p))?
        }
        None => CalibrationConfig::default(),
    };
    let o = overrides;
    if let Some(v) = o.k {
        config.k = v;
    }
    if let Some(v) = o.samples_per_category {
        config.samples_per_category = v;
    }
    if let Some(v) = o.split_fraction {
        config.split_fraction = v;
    }
    if let Some(v) = o.seed {
        config.seed = v;
    }
    if let Some(v) = o.eigenvalue_floor {
        config.eigenvalue_floor = v;
    }
    if o.global {
        config.mode = WhiteningMode::Global;
    }
    config.validate()?;
    Ok(config)
}

/// Bundle timestamp: the explicit value, else `SOURCE_DATE_EPOCH`, else now.
pub fn resolve_created_at(explicit: Option<&str>) -> CliResult<DateTime<Utc>> {
    if let Some(s) = explicit {
        return DateTime::parse_from_rfc3339(s)
            .map(|t| t.with_timezone(&Utc))
            .map_err(|e| CliError::config(format!("--created-at {s:?}: {e}")));
    }
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => {
            let secs: i64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::config(format!("SOURCE_DATE_EPOCH {v:?} is not an integer")))?;
            Utc.timestamp_opt(secs, 0)
                .single()
                .ok_or_else(|| CliError::config(format!("SOURCE_DATE_EPOCH {v:?} out of range")))
        }
        Err(_) => Ok(Utc::now()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_when_empty() {
        assert_eq!(parse_config("").unwrap(), CalibrationConfig::default());
    }

    #[test]
    fn flat_keys_and_mode() {
        let c = parse_config("k = 10\nseed = 7\nmode = \"global\"\n").unwrap();
        assert_eq!((c.k, c.seed, c.mode), (10, 7, WhiteningMode::Global));
        assert_eq!(c.samples_per_category, 100);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = parse_config("kk = 3").unwrap_err();
        assert_eq!(e.exit_code, crate::error::EXIT_DATA);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "k = 10\nsplit_fraction = 0.7\n").unwrap();
        let o = Overrides {
            k: Some(12),
            ..Default::default()
        };
        let c = load_config(Some(&path), &o).unwrap();
        assert_eq!((c.k, c.split_fraction), (12, 0.7));
        let bad = Overrides {
            split_fraction: Some(1.5),
            ..Default::default()
        };
        assert!(load_config(None, &bad).is_err());
    }

    #[test]
    fn explicit_timestamp() {
        let t = resolve_created_at(Some("2024-05-01T12:00:00Z")).unwrap();
        assert_eq!(t.timestamp(), 1_714_564_800);
        assert!(resolve_created_at(Some("yesterday")).is_err());
    }
}
