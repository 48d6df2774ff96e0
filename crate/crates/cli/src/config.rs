//! Config file + environment + flag merging.
//!
//! Precedence, lowest first: preset defaults, the `--config` file, then
//! `CDC_<SECTION>_<KEY>` environment variables, then command-line flags.
//! Unknown sections and keys are errors wherever they come from.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Result;
use cdc_core::codec::DecodeSettings;
use cdc_core::trainer::TrainConfig;
use cdc_core::Parameterization;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

const ENV_PREFIX: &str = "CDC_";
const SECTIONS: [&str; 3] = ["train", "decode", "coder"];

/// A mistake in how the tool was invoked; exits with status 1.
#[derive(Debug)]
pub struct Usage(pub String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

impl From<cdc_core::Error> for Usage {
    fn from(e: cdc_core::Error) -> Self {
        Usage(e.to_string())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    pub steps: Option<usize>,
    pub gamma: Option<f64>,
    pub seed: Option<u64>,
    pub dump_steps: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoderSection {
    pub library: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CliConfig {
    /// Raw `[train]` keys; merged onto the chosen preset later.
    pub train: Table,
    pub decode: DecodeSection,
    pub coder: CoderSection,
}

/// Parse an environment value as a TOML literal, falling back to a string.
fn env_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}")).ok().and_then(|mut t| t.remove("v")).unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_env(root: &mut Table, vars: impl Iterator<Item = (String, String)>) -> Result<()> {
    for (k, v) in vars {
        let Some(rest) = k.strip_prefix(ENV_PREFIX) else { continue };
        let rest = rest.to_ascii_lowercase();
        let Some(section) = SECTIONS.iter().find(|s| rest.starts_with(&format!("{s}_"))) else { continue };
        let key = &rest[section.len() + 1..];
        let tbl = root.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
        let Value::Table(tbl) = tbl else { return Err(Usage(format!("`{section}` must be a table")).into()) };
        log::debug!("{k} overrides {section}.{key}");
        tbl.insert(key.to_string(), env_value(&v));
    }
    Ok(())
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut root = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Usage(format!("config {}: {e}", p.display())))?;
                toml::from_str::<Table>(&text).map_err(|e| Usage(format!("config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        // CDC_CONFIG names the file itself; CDC_FAST_CODER belongs to the coder loader.
        apply_env(&mut root, std::env::vars())?;
        Self::from_table(root)
    }

    pub fn from_table(mut root: Table) -> Result<Self> {
        if let Some(k) = root.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Usage(format!("unknown config section `{k}` (expected {})", SECTIONS.join(", "))).into());
        }
        let section = |root: &mut Table, name: &str| -> Result<Table> {
            match root.remove(name) {
                None => Ok(Table::new()),
                Some(Value::Table(t)) => Ok(t),
                Some(_) => Err(Usage(format!("`{name}` must be a table")).into()),
            }
        };
        let train = section(&mut root, "train")?;
        let decode: DecodeSection = Value::Table(section(&mut root, "decode")?).try_into().map_err(|e| Usage(format!("[decode]: {e}")))?;
        let coder: CoderSection = Value::Table(section(&mut root, "coder")?).try_into().map_err(|e| Usage(format!("[coder]: {e}")))?;
        let cfg = Self { train, decode, coder };
        log::info!("resolved config:\n{}", cfg.render());
        Ok(cfg)
    }

    /// The merged configuration as TOML, for the log.
    pub fn render(&self) -> String {
        let mut t = Table::new();
        t.insert("train".into(), Value::Table(self.train.clone()));
        t.insert("decode".into(), Value::try_from(&self.decode).unwrap_or(Value::Table(Table::new())));
        t.insert("coder".into(), Value::try_from(&self.coder).unwrap_or(Value::Table(Table::new())));
        toml::to_string(&t).unwrap_or_default()
    }

    /// Preset, then `[train]`, then flags.
    pub fn train_config(&self, preset: Option<&str>, steps: Option<u64>, seed: Option<u64>) -> Result<TrainConfig> {
        let name = match (preset, self.train.get("preset")) {
            (Some(p), _) => p.to_string(),
            (None, Some(Value::String(p))) => p.clone(),
            (None, Some(_)) => return Err(Usage("train.preset must be a string".into()).into()),
            (None, None) => "desk".to_string(),
        };
        let base = TrainConfig::preset(&name).map_err(Usage::from)?;
        let Value::Table(mut merged) = Value::try_from(&base)? else { unreachable!("struct serializes to a table") };
        for (k, v) in &self.train {
            merged.insert(k.clone(), v.clone());
        }
        merged.insert("preset".into(), Value::String(name));
        if let Some(s) = steps {
            merged.insert("n_train_steps".into(), Value::Integer(s as i64));
            // A short run keeps the preset's warm-up shape where it can.
            if let Some(Value::Integer(w)) = merged.get("lambda_warmup_steps") {
                if *w as u64 > s {
                    merged.insert("lambda_warmup_steps".into(), Value::Integer(s as i64));
                }
            }
        }
        if let Some(s) = seed {
            merged.insert("seed".into(), Value::Integer(s as i64));
        }
        let cfg: TrainConfig = Value::Table(merged).try_into().map_err(|e| Usage(format!("[train]: {e}")))?;
        cfg.validate().map_err(Usage::from)?;
        Ok(cfg)
    }

    /// Model default, then `[decode]`, then flags.
    pub fn decode_settings(&self, p: Parameterization, steps: Option<usize>, gamma: Option<f64>, seed: Option<u64>) -> Result<DecodeSettings> {
        let d = &self.decode;
        let mut s = DecodeSettings::for_model(p);
        s.n_test = steps.or(d.steps).unwrap_or(s.n_test);
        s.gamma = gamma.or(d.gamma).unwrap_or(s.gamma);
        s.seed = seed.or(d.seed);
        s.dump_steps = d.dump_steps.clone().unwrap_or_default();
        s.validate().map_err(Usage::from)?;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(s: &str) -> Table {
        toml::from_str(s).unwrap()
    }

    fn is_usage(e: &anyhow::Error) -> bool {
        e.downcast_ref::<Usage>().is_some()
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(is_usage(&CliConfig::from_table(table("[trian]\nx = 1")).unwrap_err()));
        assert!(is_usage(&CliConfig::from_table(table("[decode]\nstep = 3")).unwrap_err()));
        let c = CliConfig::from_table(table("[train]\nlr_intial = 1e-3")).unwrap();
        assert!(is_usage(&c.train_config(None, None, None).unwrap_err()));
    }

    #[test]
    fn precedence() {
        let mut root = table("[train]\npreset = \"desk\"\nlr_initial = 5e-4\nbatch_size = 2\n[decode]\ngamma = 0.8");
        let env = [("CDC_TRAIN_BATCH_SIZE", "4"), ("CDC_DECODE_STEPS", "9"), ("CDC_FAST_CODER", "/x.so"), ("HOME", "/root")];
        apply_env(&mut root, env.iter().map(|(k, v)| (k.to_string(), v.to_string()))).unwrap();
        let c = CliConfig::from_table(root).unwrap();
        let t = c.train_config(None, Some(100), Some(3)).unwrap();
        assert_eq!((t.lr_initial, t.batch_size, t.n_train_steps, t.seed), (5e-4, 4, 100, 3));
        assert_eq!(t.lambda_warmup_steps, 100);
        assert_eq!(t.crop_size, 64);
        let d = c.decode_settings(Parameterization::XPred, None, None, None).unwrap();
        assert_eq!((d.n_test, d.gamma), (9, 0.8));
        let d = c.decode_settings(Parameterization::XPred, Some(4), Some(0.0), None).unwrap();
        assert_eq!((d.n_test, d.gamma), (4, 0.0));
        assert_eq!(c.train_config(Some("paper"), None, None).unwrap().crop_size, 256);
        assert!(c.render().contains("gamma = 0.8"));
    }

    #[test]
    fn env_values_are_typed() {
        assert_eq!(env_value("3"), Value::Integer(3));
        assert_eq!(env_value("1e-3"), Value::Float(1e-3));
        assert_eq!(env_value("small"), Value::String("small".into()));
        assert_eq!(env_value("[0.0, 1.0]"), Value::Array(vec![Value::Float(0.0), Value::Float(1.0)]));
    }
}
