//! TOML scenario files: parsing with line-anchored errors, serialisation,
//! and single-key overrides for parameter sweeps.

use std::path::Path;

use crate::sim::ScenarioConfig;
use crate::{Error, Result};

/// Parse and validate a scenario. Errors carry the 1-based line of the
/// offending entry when it can be located.
pub fn parse_config(text: &str) -> Result<ScenarioConfig> {
    let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig {
        line: e.span().map(|s| line_of_offset(text, s.start)),
        msg: e.message().trim().to_string(),
    })?;
    cfg.check().map_err(|(key, msg)| Error::InvalidConfig { line: find_key_line(text, key), msg })?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Full scenario as TOML, defaults included.
pub fn to_toml(cfg: &ScenarioConfig) -> String {
    toml::to_string(cfg).expect("scenario config is always representable as TOML")
}

/// Copy of `cfg` with the dotted `key` set to `value`. Integer fields take
/// the value only if it is integral.
pub fn with_override(cfg: &ScenarioConfig, key: &str, value: f64) -> Result<ScenarioConfig> {
    let bad = |msg: String| Error::InvalidConfig { line: None, msg };
    let mut root = toml::Value::try_from(cfg).map_err(|e| bad(e.to_string()))?;
    let mut slot = &mut root;
    for part in key.split('.') {
        slot = slot
            .as_table_mut()
            .and_then(|t| t.get_mut(part))
            .ok_or_else(|| bad(format!("unknown key `{key}`")))?;
    }
    *slot = match slot {
        toml::Value::Float(_) => toml::Value::Float(value),
        toml::Value::Integer(_) if value.fract() == 0.0 && value.abs() < i64::MAX as f64 => {
            toml::Value::Integer(value as i64)
        }
        toml::Value::Integer(_) => return Err(bad(format!("`{key}` needs an integer, got {value}"))),
        _ => return Err(bad(format!("`{key}` is not a scalar number"))),
    };
    let out: ScenarioConfig = root.try_into().map_err(|e: toml::de::Error| bad(e.message().to_string()))?;
    out.check().map_err(|(_, msg)| bad(msg))?;
    Ok(out)
}

fn line_of_offset(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

/// Line of the entry whose dotted path equals `key`, or of the closest
/// enclosing entry or section header.
fn find_key_line(text: &str, key: &str) -> Option<usize> {
    let mut section = String::new();
    let mut best: Option<(usize, usize)> = None;
    let mut consider = |path: &str, line: usize| {
        if key == path || key.starts_with(&format!("{path}.")) {
            let depth = path.split('.').count();
            if best.is_none_or(|(d, _)| depth > d) {
                best = Some((depth, line));
            }
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            section = h.trim().to_string();
            consider(&section, i + 1);
            continue;
        }
        let Some((k, _)) = line.split_once('=') else { continue };
        let k = k.trim().trim_matches('"');
        if k.is_empty() || k.starts_with('#') {
            continue;
        }
        let path = if section.is_empty() { k.to_string() } else { format!("{section}.{k}") };
        consider(&path, i + 1);
    }
    best.map(|(_, l)| l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::ScenarioKind;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn round_trip() {
        for cfg in [ScenarioConfig::default(), ScenarioConfig::highway()] {
            let text = to_toml(&cfg);
            let back = parse_config(&text).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(to_toml(&back), text);
        }
    }

    #[test]
    fn syntax_error_has_line() {
        let err = parse_config("dt = 0.04\nduration = \n").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { line: Some(2), .. }), "{err}");
    }

    #[test]
    fn unknown_key_has_line() {
        let err = parse_config("dt = 0.04\n\n[highway]\nlanes = 3\n").unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { line: Some(4), .. }), "{err}");
    }

    #[test]
    fn semantic_error_points_at_key() {
        let text = "kind = \"intersection\"\n[highway]\nlane_width = 3.5\n\n[intersection]\nthroughput_vph = 1000\nlane_width = -1.0\n";
        let err = parse_config(text).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { line: Some(7), .. }), "{err}");
        assert!(err.to_string().contains("line 7"));
    }

    #[test]
    fn override_keeps_types() {
        let base = ScenarioConfig::highway();
        let c = with_override(&base, "highway.vgr", 0.25).unwrap();
        assert_eq!(c.highway.vgr, 0.25);
        assert_eq!(c.kind, ScenarioKind::Highway);
        let c = with_override(&base, "rng_seed", 9.0).unwrap();
        assert_eq!(c.rng_seed, 9);
        assert!(with_override(&base, "rng_seed", 1.5).is_err());
        assert!(with_override(&base, "highway.nope", 1.0).is_err());
        assert!(with_override(&base, "dt", -1.0).is_err());
    }
}
