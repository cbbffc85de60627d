//! Experiment manifests: one TOML document describing a whole run.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::{AttackConfig, Metric, Variant};
use crate::contrastive::PretrainConfig;
use crate::dataio::known_dataset;
use crate::defense::{DefenseConfig, PoisonConfig};
use crate::downstream::{ClassifierConfig, SweepPoint};
use crate::eaas::DEFAULT_PRICE_PER_1000;
use crate::util::digest_of;
use crate::{Error, Result};

/// Environment variable consulted when `data.root` is unset.
pub const DATA_ROOT_ENV: &str = "ENCSTEAL_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset store; synthetic datasets are generated when absent there.
    pub root: Option<PathBuf>,
    pub pretrain: String,
    pub pretrain_size: Option<usize>,
    pub surrogate: String,
    pub surrogate_size: usize,
    pub downstream: Vec<String>,
    pub downstream_train: Option<usize>,
    pub downstream_test: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: None,
            pretrain: "SynthObjects".into(),
            pretrain_size: None,
            surrogate: "SynthScenes".into(),
            surrogate_size: 500,
            downstream: vec!["SynthDigits".into(), "SynthSigns".into()],
            downstream_train: None,
            downstream_test: None,
        }
    }
}

impl DataConfig {
    /// `root`, else the data-root environment variable.
    pub fn effective_root(&self) -> Option<PathBuf> {
        self.root
            .clone()
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    pub price_per_1000: f64,
    /// Per-account query cap for attacker accounts.
    pub budget_cap: Option<u64>,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            price_per_1000: DEFAULT_PRICE_PER_1000,
            budget_cap: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Lambda,
    SurrogateSize,
    TopK,
    Rounding,
    PoisonEps,
    Metric,
    Variant,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Lambda => "lambda",
            SweepAxis::SurrogateSize => "surrogate_size",
            SweepAxis::TopK => "top_k",
            SweepAxis::Rounding => "rounding",
            SweepAxis::PoisonEps => "poison_eps",
            SweepAxis::Metric => "metric",
            SweepAxis::Variant => "variant",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SweepValue {
    Int(i64),
    Num(f64),
    Text(String),
}

impl SweepValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            SweepValue::Int(i) => Some(*i as f64),
            SweepValue::Num(x) => Some(*x),
            SweepValue::Text(t) => t.parse().ok(),
        }
    }

    fn as_count(&self, axis: SweepAxis) -> Result<usize> {
        match self {
            SweepValue::Int(i) if *i >= 0 => Ok(*i as usize),
            other => Err(Error::config(format!("{axis} sweep needs non-negative integers, got `{other}`"))),
        }
    }

    fn as_real(&self, axis: SweepAxis) -> Result<f64> {
        self.as_f64()
            .ok_or_else(|| Error::config(format!("{axis} sweep needs numbers, got `{self}`")))
    }
}

impl fmt::Display for SweepValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SweepValue::Int(i) => write!(f, "{i}"),
            SweepValue::Num(x) => write!(f, "{x}"),
            SweepValue::Text(t) => f.write_str(t),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub axis: SweepAxis,
    pub values: Vec<SweepValue>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentManifest {
    pub name: String,
    pub output_dir: PathBuf,
    /// Seed for surrogate sampling and synthetic data generation.
    pub seed: u64,
    pub deterministic: bool,
    /// Skips pre-training and serves this checkpoint instead.
    pub target_checkpoint: Option<PathBuf>,
    pub variants: Vec<Variant>,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub service: ServiceSection,
    pub defense: DefenseConfig,
    pub attack: AttackConfig,
    pub downstream: ClassifierConfig,
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentManifest {
    fn default() -> Self {
        ExperimentManifest {
            name: "experiment".into(),
            output_dir: PathBuf::from("runs/experiment"),
            seed: 0,
            deterministic: true,
            target_checkpoint: None,
            variants: vec![Variant::StolenEncoder],
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            service: ServiceSection::default(),
            defense: DefenseConfig::None,
            attack: AttackConfig::default(),
            downstream: ClassifierConfig::default(),
            sweep: None,
        }
    }
}

impl ExperimentManifest {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let m: ExperimentManifest = toml::from_str(text).map_err(|e| Error::config(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::load(path, msg),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize manifest: {e}")))
    }

    /// Content digest. The output location is not part of the content.
    pub fn digest(&self) -> String {
        let mut m = self.clone();
        m.output_dir = PathBuf::new();
        digest_of(&m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(format!("manifest name `{}` must be a plain non-empty word", self.name)));
        }
        if self.variants.is_empty() {
            return Err(Error::config("manifest requests no attack variants"));
        }
        if self.data.downstream.is_empty() {
            return Err(Error::config("manifest names no downstream datasets"));
        }
        for name in [&self.data.pretrain, &self.data.surrogate].into_iter().chain(&self.data.downstream) {
            if known_dataset(name).is_none() {
                return Err(Error::config(format!("unknown dataset `{name}`")));
            }
        }
        self.pretrain.validate()?;
        self.attack.validate()?;
        self.downstream.validate()?;
        self.defense.validate(self.pretrain.feature_dim)?;
        if self.service.price_per_1000 < 0.0 || !self.service.price_per_1000.is_finite() {
            return Err(Error::config("price_per_1000 must be a non-negative number"));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.is_empty() {
                return Err(Error::config(format!("{} sweep has no values", sweep.axis)));
            }
            for v in &sweep.values {
                self.with_point(sweep.axis, v)?;
            }
        } else if self.data.surrogate_size < self.attack.batch_size {
            return Err(Error::config(format!(
                "surrogate_size {} is below the attack batch size {}",
                self.data.surrogate_size, self.attack.batch_size
            )));
        }
        Ok(())
    }

    /// A copy with one sweep coordinate applied.
    pub fn with_point(&self, axis: SweepAxis, value: &SweepValue) -> Result<ExperimentManifest> {
        let mut m = self.clone();
        m.sweep = None;
        match axis {
            SweepAxis::Lambda => m.attack.lambda = value.as_real(axis)?,
            SweepAxis::SurrogateSize => m.data.surrogate_size = value.as_count(axis)?,
            SweepAxis::TopK => {
                m.defense = DefenseConfig::TopK {
                    k: value.as_count(axis)?,
                }
            }
            SweepAxis::Rounding => {
                m.defense = DefenseConfig::Rounding {
                    m: value.as_count(axis)? as u32,
                }
            }
            SweepAxis::PoisonEps => {
                let eps = value.as_real(axis)?;
                let base = match &self.defense {
                    DefenseConfig::Poisoning(p) => p.clone(),
                    _ => PoisonConfig::default(),
                };
                m.defense = DefenseConfig::Poisoning(PoisonConfig { eps, ..base });
            }
            SweepAxis::Metric => m.attack.metric = value.to_string().parse::<Metric>()?,
            SweepAxis::Variant => m.variants = vec![value.to_string().parse::<Variant>()?],
        }
        m.validate()?;
        Ok(m)
    }

    /// The concrete runs this manifest expands to, each with its sweep
    /// coordinate when the manifest is a sweep.
    pub fn points(&self) -> Result<Vec<(Option<SweepPoint>, ExperimentManifest)>> {
        match &self.sweep {
            None => Ok(vec![(None, self.clone())]),
            Some(sweep) => sweep
                .values
                .iter()
                .map(|v| {
                    let point = SweepPoint {
                        axis: sweep.axis.to_string(),
                        value: v.to_string(),
                        x: v.as_f64(),
                    };
                    Ok((Some(point), self.with_point(sweep.axis, v)?))
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
name = "desk"
output_dir = "runs/desk"
seed = 3
variants = ["stolen_encoder", "no_aug"]

[data]
surrogate_size = 128
downstream = ["SynthDigits"]

[pretrain]
epochs = 2
temperature = 0.2

[defense]
kind = "top_k"
k = 10

[attack]
lambda = 5.0
epochs = 3

[downstream]
epochs = 4

[sweep]
axis = "lambda"
values = [0, 0.5, 20]
"#;

    #[test]
    fn parses_and_expands() {
        let m = ExperimentManifest::from_toml_str(SAMPLE).unwrap();
        assert_eq!(m.variants, vec![Variant::StolenEncoder, Variant::NoAug]);
        assert_eq!(m.defense, DefenseConfig::TopK { k: 10 });
        assert_eq!(m.pretrain.temperature, Some(0.2));
        let points = m.points().unwrap();
        assert_eq!(points.len(), 3);
        let lambdas: Vec<f64> = points.iter().map(|(_, p)| p.attack.lambda).collect();
        assert_eq!(lambdas, vec![0.0, 0.5, 20.0]);
        let p = points[1].0.as_ref().unwrap();
        assert_eq!((p.axis.as_str(), p.value.as_str(), p.x), ("lambda", "0.5", Some(0.5)));
        assert!(points.iter().all(|(_, p)| p.sweep.is_none()));
    }

    #[test]
    fn unknown_keys_rejected() {
        let typo = SAMPLE.replace("lambda = 5.0", "lamda = 5.0");
        assert!(matches!(ExperimentManifest::from_toml_str(&typo), Err(Error::Config(_))));
        let top = format!("bogus = 1\n{SAMPLE}");
        assert!(ExperimentManifest::from_toml_str(&top).is_err());
    }

    #[test]
    fn toml_round_trip_preserves_digest() {
        let m = ExperimentManifest::from_toml_str(SAMPLE).unwrap();
        let back = ExperimentManifest::from_toml_str(&m.to_toml().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.digest(), m.digest());
        let moved = ExperimentManifest {
            output_dir: "elsewhere".into(),
            ..m.clone()
        };
        assert_eq!(moved.digest(), m.digest());
        let changed = ExperimentManifest { seed: 4, ..m };
        assert_ne!(changed.digest(), moved.digest());
    }

    #[test]
    fn defense_axes_and_bad_values() {
        let m = ExperimentManifest::from_toml_str(SAMPLE).unwrap();
        let p = m.with_point(SweepAxis::PoisonEps, &SweepValue::Num(0.5)).unwrap();
        assert!(matches!(p.defense, DefenseConfig::Poisoning(ref c) if c.eps == 0.5));
        let r = m.with_point(SweepAxis::Rounding, &SweepValue::Int(2)).unwrap();
        assert_eq!(r.defense, DefenseConfig::Rounding { m: 2 });
        let v = m.with_point(SweepAxis::Variant, &SweepValue::Text("query_aug".into())).unwrap();
        assert_eq!(v.variants, vec![Variant::QueryAug]);
        assert!(m.with_point(SweepAxis::TopK, &SweepValue::Int(0)).is_err());
        assert!(m.with_point(SweepAxis::TopK, &SweepValue::Num(1.5)).is_err());
        assert!(m.with_point(SweepAxis::SurrogateSize, &SweepValue::Int(8)).is_err());
        assert!(m.with_point(SweepAxis::Metric, &SweepValue::Text("l7".into())).is_err());
    }
}
