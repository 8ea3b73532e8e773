//! Experiment configuration: parsing, validation and command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use lbl_core::env::{generate_instance, GeneratorSpec, LatentModel};
use lbl_core::policies::PolicySpec;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub policies: Vec<PolicySpec>,
    /// Number of mini-sessions per run.
    pub sessions: u64,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Worker threads; all available cores when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    /// Also write every interaction record of each cell.
    #[serde(default)]
    pub write_records: bool,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// Either a model file or the dimensions of a generated instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub users: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub generator: GeneratorSpec,
}

/// Command-line settings that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub literal_gate: bool,
    pub rebuild_on_refresh: bool,
    pub parallelism: Option<usize>,
}

impl ExperimentConfig {
    /// Reads a TOML file, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let mut cfg = if is_json { Self::from_json(&text) } else { Self::from_toml(&text) }
            .map_err(|e| match e {
                CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
                other => other,
            })?;
        if let Some(file) = &cfg.model.file {
            if file.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.model.file = Some(dir.join(file));
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(dir) = &o.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(seeds) = &o.seeds {
            self.seeds = seeds.clone();
        }
        if let Some(k) = o.parallelism {
            self.parallelism = Some(k);
        }
        for p in &mut self.policies {
            p.literal_gate |= o.literal_gate;
            p.rebuild_on_refresh |= o.rebuild_on_refresh;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, msg: String| Err(CliError::Config(format!("field `{field}`: {msg}")));
        if self.sessions == 0 {
            return bad("sessions", "must be at least 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds", "must list at least one seed".into());
        }
        let distinct: BTreeSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return bad("seeds", "contains duplicates".into());
        }
        if self.policies.is_empty() {
            return bad("policies", "must list at least one policy".into());
        }
        if self.parallelism == Some(0) {
            return bad("parallelism", "must be at least 1".into());
        }
        let mut labels = BTreeSet::new();
        for (i, p) in self.policies.iter().enumerate() {
            let label = p.label();
            if !labels.insert(label.clone()) {
                return bad(&format!("policies[{i}]"), format!("duplicate label `{label}`; set `name`"));
            }
            if label.is_empty() || label.contains(['/', '\\']) {
                return bad(&format!("policies[{i}].name"), format!("`{label}` is not a usable file name"));
            }
            if let Err(e) = p.oful.validate() {
                return bad(&format!("policies[{i}].oful"), e.to_string());
            }
            if let Err(e) = p.rtp.validate() {
                return bad(&format!("policies[{i}].rtp"), e.to_string());
            }
        }
        let m = &self.model;
        match (&m.file, m.arms, m.users, m.classes) {
            (Some(_), None, None, None) => Ok(()),
            (None, Some(_), Some(_), Some(_)) => Ok(()),
            (Some(_), ..) => bad("model", "give either `file` or `arms`/`users`/`classes`, not both".into()),
            _ => bad("model", "needs `file` or all of `arms`, `users`, `classes`".into()),
        }
    }

    pub fn resolve_model(&self) -> Result<LatentModel, CliError> {
        let m = &self.model;
        if let Some(file) = &m.file {
            return read_model(file);
        }
        let (Some(a), Some(b), Some(c)) = (m.arms, m.users, m.classes) else {
            return Err(CliError::Config("field `model`: incomplete".into()));
        };
        generate_instance(a, b, c, &m.generator, m.seed)
            .map_err(|e| CliError::Config(format!("field `model`: {e}")))
    }
}

pub fn read_model(path: &Path) -> Result<LatentModel, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let model: LatentModel = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    model.validate().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(model)
}

/// Parses `--seeds 1,2,3`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    s.split(',')
        .map(|x| x.trim().parse::<u64>().map_err(|e| format!("bad seed `{x}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
sessions = 10
seeds = [1, 2]

[model]
arms = 6
users = 3
classes = 2

[[policies]]
kind = "ucb_per_user"
"#;

    #[test]
    fn minimal_toml_parses() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.sessions, 10);
        assert_eq!(cfg.policies[0].label(), "ucb_per_user");
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
        let model = cfg.resolve_model().unwrap();
        assert_eq!((model.arms(), model.users(), model.classes()), (6, 3, 2));
    }

    #[test]
    fn unknown_field_names_the_line() {
        let text = MINIMAL.replace("classes = 2", "classes = 2\nclases = 3");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("clases"), "{err}");
        assert!(err.contains("line"), "{err}");
    }

    #[test]
    fn duplicate_labels_rejected() {
        let text = format!("{MINIMAL}\n[[policies]]\nkind = \"ucb_per_user\"\n");
        let err = ExperimentConfig::from_toml(&text).unwrap_err().to_string();
        assert!(err.contains("duplicate label"), "{err}");
    }

    #[test]
    fn empty_seeds_rejected() {
        let text = MINIMAL.replace("seeds = [1, 2]", "seeds = []");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let o = Overrides {
            seeds: Some(vec![7]),
            literal_gate: true,
            parallelism: Some(2),
            ..Overrides::default()
        };
        cfg.apply(&o).unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.parallelism, Some(2));
        assert!(cfg.policies[0].literal_gate);
    }

    #[test]
    fn seed_list_parsing() {
        assert_eq!(parse_seeds("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_seeds("1,x").is_err());
    }
}
