//! One TOML file configures every subcommand; `key=value` overrides patch it.

use std::path::{Path, PathBuf};

use nvib_core::analysis::Perturbation;
use nvib_core::model::ModelConfig;
use nvib_core::probing::{ProbeConfig, ProbeKind};
use nvib_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Where training text comes from and how it is evaluated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// UTF-8 text, one sequence per line. Without it a synthetic corpus is generated.
    pub corpus: Option<PathBuf>,
    pub valid_fraction: f64,
    /// Validation sequences scored at each evaluation.
    pub eval_size: usize,
    pub eval_every: usize,
    pub synthetic_lines: usize,
    pub synthetic_lexicon: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            valid_fraction: 0.05,
            eval_size: 200,
            eval_every: 100,
            synthetic_lines: 20_000,
            synthetic_lexicon: 400,
        }
    }
}

/// Settings for `segment`, `perturb` and `export-attention`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub rates: Vec<f64>,
    pub kinds: Vec<Perturbation>,
    /// Cap on the number of evaluation sequences.
    pub max_sequences: usize,
    /// Encoder layer whose attention is segmented; the last layer when unset.
    pub segment_layer: Option<usize>,
    /// Heatmap pixels per attention weight.
    pub heatmap_cell: u32,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            rates: vec![0.0, 0.05, 0.1, 0.2, 0.3],
            kinds: Perturbation::ALL.to_vec(),
            max_sequences: 200,
            segment_layer: None,
            heatmap_cell: 12,
        }
    }
}

/// Probe settings; unset fields take the per-kind defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub kinds: Vec<ProbeKind>,
    pub hidden: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            kinds: vec![ProbeKind::Aggregating, ProbeKind::Attention],
            hidden: None,
            epochs: None,
            batch_size: None,
            lr: None,
        }
    }
}

impl ProbeSection {
    /// Applies the overrides to a per-kind default configuration.
    pub fn apply(&self, cfg: &mut ProbeConfig) {
        if let Some(h) = self.hidden {
            cfg.hidden = h;
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub analysis: AnalysisConfig,
    pub probe: ProbeSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    /// Applies `section.field=value` overrides. Values are parsed as TOML
    /// and fall back to strings.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        let mut doc: toml::Table = toml::from_str(&self.to_toml()).expect("config round-trips");
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{ov}` is not key=value")))?;
            let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            let mut parts = key.trim().split('.').peekable();
            let mut table = &mut doc;
            while let Some(part) = parts.next() {
                if parts.peek().is_none() {
                    table.insert(part.to_string(), value.clone());
                } else {
                    table = table
                        .entry(part.to_string())
                        .or_insert_with(|| toml::Value::Table(Default::default()))
                        .as_table_mut()
                        .ok_or_else(|| Error::Usage(format!("override `{key}`: `{part}` is not a section")))?;
                }
            }
        }
        *self = doc
            .try_into()
            .map_err(|e: toml::de::Error| Error::Usage(format!("invalid override: {}", e.message())))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.analysis.rates.iter().any(|r| !(0.0..1.0).contains(r)) || self.analysis.heatmap_cell == 0 {
            return Err(Error::Usage(
                "analysis.rates must lie in [0, 1) and analysis.heatmap_cell be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.data.valid_fraction) || self.data.eval_every == 0 {
            return Err(Error::Usage(
                "data.valid_fraction must lie in [0, 1) and data.eval_every be positive".into(),
            ));
        }
        Ok(())
    }

    /// The same configuration with the bottleneck disabled: every NVIB field
    /// falls back to its standard-Transformer meaning and nothing else changes.
    pub fn baseline(&self) -> Self {
        let mut b = self.clone();
        b.model.n_nvib_layers = 0;
        b
    }
}

/// Names of the fields whose values differ between two configs.
pub fn diff(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &toml::Value, b: Option<&toml::Value>, out: &mut Vec<String>) {
        match (a, b) {
            (toml::Value::Table(ta), Some(toml::Value::Table(tb))) => {
                for (k, va) in ta {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, va, tb.get(k), out);
                }
                for k in tb.keys().filter(|k| !ta.contains_key(*k)) {
                    out.push(if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") });
                }
            }
            (va, Some(vb)) if va == vb => {}
            _ => out.push(prefix.to_string()),
        }
    }
    let va = toml::Value::try_from(a).expect("config serialises");
    let vb = toml::Value::try_from(b).expect("config serialises");
    let mut out = Vec::new();
    walk("", &va, Some(&vb), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_patch_fields() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["train.lr=0.01".into(), "model.p=32".into(), "data.corpus=a b.txt".into()])
            .unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.model.p, 32);
        assert_eq!(c.data.corpus.as_deref(), Some(Path::new("a b.txt")));
        assert!(c.apply_overrides(&["train.nope=1".into()]).is_err());
        assert!(c.apply_overrides(&["noequals".into()]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn baseline_differs_only_in_bottleneck() {
        let c = RunConfig::default();
        assert_eq!(diff(&c, &c.baseline()), vec!["model.n_nvib_layers".to_string()]);
    }
}
