use super::config::ExperimentConfig;
use crate::error::{Error, Result};

/// Shipped experiment configs, by name.
pub const PRESETS: [(&str, &str); 6] = [
    ("table2-desk", include_str!("../../presets/table2-desk.toml")),
    ("table4-desk", include_str!("../../presets/table4-desk.toml")),
    ("table5-desk", include_str!("../../presets/table5-desk.toml")),
    ("fig5-desk", include_str!("../../presets/fig5-desk.toml")),
    ("fig6-desk", include_str!("../../presets/fig6-desk.toml")),
    ("appendixE-desk", include_str!("../../presets/appendixE-desk.toml")),
];

pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let (_, text) = PRESETS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
        Error::InvalidArgument(format!("unknown preset `{name}`; available: {}", names.join(", ")))
    })?;
    ExperimentConfig::from_toml_str(text).map_err(|e| e.context(format!("preset {name}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_parses_and_sweeps() {
        for (name, _) in PRESETS {
            let cfg = preset(name).unwrap();
            assert!(!super::super::sweep_points(&cfg).unwrap().is_empty(), "{name}");
        }
        assert!(preset("nope").is_err());
    }
}
