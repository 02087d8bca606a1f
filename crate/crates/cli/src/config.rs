//! Run configuration: a sectioned `key = value` file (TOML) plus
//! `--section.key=value` overrides, resolved before any stage runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::exit::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Root seed; every stage draws from a named substream of it.
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("zip-lab-run"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Images the generator is trained on.
    pub n_train: usize,
    /// Held-out images to edit; the edited attribute is always absent.
    pub n_test: usize,
    pub prior_glasses: f64,
    pub prior_smiling: f64,
    pub prior_old: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_train: 4000,
            n_test: 200,
            prior_glasses: 0.3,
            prior_smiling: 0.5,
            prior_old: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        Self {
            epochs: 128,
            batch_size: 32,
            lr: 2e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub attribute: String,
    pub lambda_clip: f32,
    pub lambda_recon: f32,
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub pool_size: usize,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = ziplab::zip::EditConfig::default();
        Self {
            attribute: "glasses".into(),
            lambda_clip: d.lambda_clip,
            lambda_recon: d.lambda_recon,
            lr: d.lr,
            epochs: d.epochs,
            batch_size: d.batch_size,
            pool_size: d.pool_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EditSection {
    pub weight: f32,
    pub t_hi: usize,
    pub t_lo: usize,
    /// Inversion and sampling steps.
    pub steps: usize,
    /// Image to edit (`edit` subcommand).
    pub input: Option<PathBuf>,
    /// Also write the predicted clean image of every step.
    pub save_steps: bool,
}

impl Default for EditSection {
    fn default() -> Self {
        let d = ziplab::zip::EditConfig::default();
        Self {
            weight: d.weight,
            t_hi: d.t_hi,
            t_lo: d.t_lo,
            steps: d.inversion_steps,
            input: None,
            save_steps: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoremSection {
    /// Dimension of the standard-Gaussian substrate for the trajectory check.
    pub dim: usize,
    pub trajectories: usize,
    /// Shift weights of the trajectory summary.
    pub weights: Vec<f32>,
}

impl Default for TheoremSection {
    fn default() -> Self {
        Self {
            dim: 2,
            trajectories: 16,
            weights: vec![0.0, 0.1, 0.2, 0.3],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub generator: GeneratorSection,
    pub encoder: EncoderSection,
    pub edit: EditSection,
    pub theorem: TheoremSection,
}

/// Short flags accepted in place of the full `section.key`.
const ALIASES: [(&str, &str); 7] = [
    ("seed", "run.seed"),
    ("out", "run.out_dir"),
    ("out-dir", "run.out_dir"),
    ("attr", "encoder.attribute"),
    ("input", "edit.input"),
    ("steps", "edit.steps"),
    ("weight", "edit.weight"),
];

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Splits `--key=value` / `--key value` arguments into pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let Some(body) = arg.strip_prefix("--") else {
            return Err(CliError::bad_argument(format!("expected --key=value, got `{arg}`")));
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::bad_argument(format!("`--{body}` needs a value")))?;
                (body.to_string(), v.clone())
            }
        };
        let key = ALIASES
            .iter()
            .find(|(a, _)| *a == key)
            .map_or(key, |(_, full)| full.to_string());
        out.push((key, value));
    }
    Ok(out)
}

impl RunConfig {
    /// Loads `path` (if any), applies overrides in order, and validates.
    pub fn resolve(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::io(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::bad_argument(format!("config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for (key, raw) in overrides {
            let Some((section, field)) = key.split_once('.') else {
                return Err(CliError::bad_argument(format!(
                    "override key `{key}` must be section.key"
                )));
            };
            let entry = table
                .entry(section.to_string())
                .or_insert_with(|| Value::Table(Table::new()));
            let Value::Table(sec) = entry else {
                return Err(CliError::bad_argument(format!("`{section}` is not a section")));
            };
            let value = match field {
                // Paths and names stay strings even when they look like numbers.
                "out_dir" | "input" | "attribute" => Value::String(raw.clone()),
                _ => parse_value(raw),
            };
            sec.insert(field.to_string(), value);
        }
        let cfg: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::bad_argument(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        for (name, p) in [
            ("prior_glasses", self.data.prior_glasses),
            ("prior_smiling", self.data.prior_smiling),
            ("prior_old", self.data.prior_old),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CliError::bad_argument(format!("data.{name} = {p} is outside [0, 1]")));
            }
        }
        self.edit_config()
            .validate()
            .map_err(|e| CliError::bad_argument(e.to_string()))?;
        if self.edit.steps > ziplab::schedule::DEFAULT_T {
            return Err(CliError::bad_argument("edit.steps exceeds the schedule length"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn edit_config(&self) -> ziplab::zip::EditConfig {
        ziplab::zip::EditConfig {
            weight: self.edit.weight,
            t_hi: self.edit.t_hi,
            t_lo: self.edit.t_lo,
            lambda_clip: self.encoder.lambda_clip,
            lambda_recon: self.encoder.lambda_recon,
            inversion_steps: self.edit.steps,
            lr: self.encoder.lr,
            epochs: self.encoder.epochs,
            batch_size: self.encoder.batch_size,
            pool_size: self.encoder.pool_size,
            seed: ziplab::rng::derive_seed(self.run.seed, "train-encoder"),
        }
    }

    pub fn priors(&self) -> ziplab::toyworld::AttributePriors {
        ziplab::toyworld::AttributePriors([
            self.data.prior_glasses,
            self.data.prior_smiling,
            self.data.prior_old,
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_and_aliases() {
        let o = parse_overrides(&args(&["--edit.weight=0", "--seed", "9", "--attr=smiling"])).unwrap();
        let cfg = RunConfig::resolve(None, &o).unwrap();
        assert_eq!(cfg.edit.weight, 0.0);
        assert_eq!(cfg.run.seed, 9);
        assert_eq!(cfg.encoder.attribute, "smiling");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let o = parse_overrides(&args(&["--edit.wieght=0.1"])).unwrap();
        assert_eq!(RunConfig::resolve(None, &o).unwrap_err().code, 4);
        assert!(parse_overrides(&args(&["weight=1"])).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }
}
