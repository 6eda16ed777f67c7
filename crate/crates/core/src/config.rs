//! Scenario files: a TOML document with sections `model`, `topology`
//! (`links`), `policer` (`htb` / `ietf` / `lin`), `banks`, `flows`,
//! `mapping` (`slices`) and the per-flow schedule carried on the flows.
//! Rates are bits per second, sizes bytes, times nanoseconds.

use std::path::Path;

use thiserror::Error;

use crate::engine::{Scenario, ValidationError};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

/// Parses and validates a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario, LoadError> {
    let body = std::fs::read_to_string(path)
        .map_err(|e| LoadError::Io(path.display().to_string(), e))?;
    let sc: Scenario = toml::from_str(&body)?;
    sc.validate()?;
    Ok(sc)
}

/// Renders a scenario back to TOML (presets use this so a file-based run
/// can start from a known-good document).
pub fn to_toml(sc: &Scenario) -> String {
    toml::to_string_pretty(sc).expect("scenario serializes")
}

/// Compares two metric CSV exports. Rows are matched on (window, key);
/// values must agree within `tolerance_pct` relative (with a small absolute
/// floor for near-zero values). Returns the offending rows.
pub fn compare_csv(out: &str, golden: &str, tolerance_pct: f64) -> Result<Vec<String>, String> {
    let a = crate::metrics::parse_csv(out)?;
    let b = crate::metrics::parse_csv(golden)?;
    let mut issues = Vec::new();
    if a.len() != b.len() {
        issues.push(format!("row count {} vs golden {}", a.len(), b.len()));
    }
    let key = |t: f64, k: &str| format!("{t:.3}/{k}");
    let mut golden_map = std::collections::BTreeMap::new();
    for (t, k, v) in &b {
        golden_map.insert(key(*t, k), *v);
    }
    for (t, k, v) in &a {
        match golden_map.get(&key(*t, k)) {
            None => issues.push(format!("row {t:.3},{k} missing from golden")),
            Some(gv) => {
                let tol = (tolerance_pct / 100.0 * gv.abs().max(v.abs())).max(0.0015);
                if (v - gv).abs() > tol {
                    issues.push(format!("{t:.3},{k}: {v:.3} vs golden {gv:.3}"));
                }
            }
        }
    }
    Ok(issues)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn presets_round_trip_through_toml() {
        let sc = presets::preset("exp_a_hctns").unwrap();
        let text = to_toml(&sc);
        let parsed: Scenario = toml::from_str(&text).unwrap();
        parsed.validate().unwrap();
        assert_eq!(parsed.name, sc.name);
        assert_eq!(parsed.flows.len(), sc.flows.len());
        assert_eq!(parsed.htb.unwrap().global.cir, sc.htb.unwrap().global.cir);
    }

    #[test]
    fn load_rejects_missing_model_section() {
        let text = r#"
name = "broken"
duration = 1000000000

[[slices]]
name = "s"
vlan = 1
classes = []

[pe1_bank]
priority_classes = ["A"]
drr_classes = []

[p_bank]
priority_classes = ["A"]
drr_classes = []

[links.gnb_pe1]
rate = 1000000000
[links.pe1_p]
rate = 100000000
[links.p_pe2]
rate = 1000000000
[links.pe2_upf]
rate = 1000000000
"#;
        // serde requires the `model` field at parse time
        assert!(toml::from_str::<Scenario>(text).is_err());
    }

    #[test]
    fn validation_catches_cir_oversubscription() {
        let mut sc = presets::preset("exp_a_hctns").unwrap();
        if let Some(htb) = &mut sc.htb {
            htb.slices[1].params.cir = crate::model::Rate::mbps(80.0);
        }
        assert!(matches!(sc.validate(), Err(ValidationError::Build(_))));
    }

    #[test]
    fn compare_accepts_equal_and_flags_deviation() {
        let a = "t_start,flow_or_queue,value\n0.000,f,10.000\n1.000,f,12.000\n";
        assert!(compare_csv(a, a, 1.0).unwrap().is_empty());
        let b = "t_start,flow_or_queue,value\n0.000,f,10.000\n1.000,f,13.000\n";
        assert_eq!(compare_csv(a, b, 1.0).unwrap().len(), 1);
        assert!(compare_csv(a, b, 10.0).unwrap().is_empty());
    }
}
