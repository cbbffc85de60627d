//! Response-perturbation defenses applied by the service to every reply.

pub mod poison;

pub use poison::{project_l2, project_linf, Norm, PoisonConfig, PoisonDefense};

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView4};
use serde::{Deserialize, Serialize};

use crate::attack::{steal, AttackConfig, Variant};
use crate::dataio::ImageSet;
use crate::eaas::{EaasService, ServiceConfig};
use crate::encoder::{EncoderParams, EncoderProvenance};
use crate::{Error, Result};

/// Which defense the service applies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseConfig {
    #[default]
    None,
    TopK {
        k: usize,
    },
    Rounding {
        m: u32,
    },
    Poisoning(PoisonConfig),
}

impl DefenseConfig {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        match self {
            DefenseConfig::None => Ok(()),
            DefenseConfig::TopK { k } => {
                if (1..=feature_dim).contains(k) {
                    Ok(())
                } else {
                    Err(Error::config(format!("top_k needs 1 ≤ k ≤ {feature_dim}, got {k}")))
                }
            }
            DefenseConfig::Rounding { m } => {
                if *m >= 1 {
                    Ok(())
                } else {
                    Err(Error::config("rounding needs m ≥ 1"))
                }
            }
            DefenseConfig::Poisoning(p) => p.validate(),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, DefenseConfig::None)
    }

    pub fn needs_surrogate(&self) -> bool {
        matches!(self, DefenseConfig::Poisoning(_))
    }
}

impl fmt::Display for DefenseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DefenseConfig::None => f.write_str("none"),
            DefenseConfig::TopK { k } => write!(f, "top_k:k={k}"),
            DefenseConfig::Rounding { m } => write!(f, "round:m={m}"),
            DefenseConfig::Poisoning(p) => write!(f, "{p}"),
        }
    }
}

pub(crate) fn parse_kv(body: &str) -> Result<Vec<(String, String)>> {
    body.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.trim().to_ascii_lowercase(), v.trim().to_string()))
                .ok_or_else(|| Error::config(format!("expected key=value, got `{kv}`")))
        })
        .collect()
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value `{value}` for `{key}`")))
}

impl FromStr for DefenseConfig {
    type Err = Error;

    /// `none`, `top_k:k=50`, `round:m=1`, `poison:eps=5,norm=l2`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, body) = s.split_once(':').unwrap_or((s, ""));
        let kv = parse_kv(body)?;
        let single = |name: &str| -> Result<&str> {
            match kv.as_slice() {
                [(k, v)] if k == name => Ok(v.as_str()),
                _ => Err(Error::config(format!("`{kind}` takes exactly `{name}=…`"))),
            }
        };
        match kind.to_ascii_lowercase().as_str() {
            "none" if kv.is_empty() => Ok(DefenseConfig::None),
            "top_k" | "topk" => Ok(DefenseConfig::TopK {
                k: parse_num("k", single("k")?)?,
            }),
            "round" | "rounding" => Ok(DefenseConfig::Rounding {
                m: parse_num("m", single("m")?)?,
            }),
            "poison" | "poisoning" => PoisonConfig::from_pairs(&kv).map(DefenseConfig::Poisoning),
            _ => Err(Error::config(format!("unknown defense `{s}`"))),
        }
    }
}

/// A transformation of clean target features, applied per query batch.
pub trait Defense: Send + Sync + fmt::Debug {
    fn descriptor(&self) -> String;

    /// `images` are the queried images, `clean` the target's features for them.
    fn apply(&self, images: ArrayView4<'_, f64>, clean: Array2<f64>) -> Result<Array2<f64>>;
}

#[derive(Debug)]
pub struct NoDefense;

impl Defense for NoDefense {
    fn descriptor(&self) -> String {
        "none".into()
    }

    fn apply(&self, _: ArrayView4<'_, f64>, clean: Array2<f64>) -> Result<Array2<f64>> {
        Ok(clean)
    }
}

#[derive(Debug)]
pub struct TopKDefense {
    pub k: usize,
}

impl Defense for TopKDefense {
    fn descriptor(&self) -> String {
        format!("top_k:k={}", self.k)
    }

    fn apply(&self, _: ArrayView4<'_, f64>, mut clean: Array2<f64>) -> Result<Array2<f64>> {
        for mut row in clean.rows_mut() {
            let kept = top_k(row.view(), self.k)?;
            row.assign(&kept);
        }
        Ok(clean)
    }
}

#[derive(Debug)]
pub struct RoundingDefense {
    pub m: u32,
}

impl Defense for RoundingDefense {
    fn descriptor(&self) -> String {
        format!("round:m={}", self.m)
    }

    fn apply(&self, _: ArrayView4<'_, f64>, mut clean: Array2<f64>) -> Result<Array2<f64>> {
        for mut row in clean.rows_mut() {
            let r = round_features(row.view(), self.m);
            row.assign(&r);
        }
        Ok(clean)
    }
}

/// Builds the runtime defense. Poisoning requires the defender surrogate.
pub fn build_defense(cfg: &DefenseConfig, surrogate: Option<Arc<EncoderParams>>) -> Result<Box<dyn Defense>> {
    Ok(match cfg {
        DefenseConfig::None => Box::new(NoDefense),
        DefenseConfig::TopK { k } => Box::new(TopKDefense { k: *k }),
        DefenseConfig::Rounding { m } => Box::new(RoundingDefense { m: *m }),
        DefenseConfig::Poisoning(p) => {
            let s = surrogate.ok_or_else(|| Error::config("feature poisoning needs a defender surrogate encoder"))?;
            Box::new(PoisonDefense::new(p.clone(), s)?)
        }
    })
}

/// Keeps the `k` largest-magnitude entries, zeroing the rest. Ties go to the
/// lower index.
pub fn top_k(v: ArrayView1<'_, f64>, k: usize) -> Result<Array1<f64>> {
    if k == 0 || k > v.len() {
        return Err(Error::precondition(format!("top_k needs 1 ≤ k ≤ {}, got {k}", v.len())));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = Array1::<f64>::zeros(v.len());
    for &i in &order[..k] {
        out[i] = v[i];
    }
    Ok(out)
}

/// Rounds each entry to `m` decimals, half away from zero.
pub fn round_features(v: ArrayView1<'_, f64>, m: u32) -> Array1<f64> {
    let scale = 10f64.powi(m as i32);
    v.mapv(|x| (x * scale).round() / scale)
}

/// Trains the defender's own stolen copy of the target by running the attack
/// loop against the undefended target on the defender's data.
pub fn train_defender_surrogate(
    pretraining_set: &ImageSet,
    target: &EncoderParams,
    mirror: &AttackConfig,
) -> Result<EncoderParams> {
    let service = Arc::new(EaasService::new(target.clone(), Box::new(NoDefense), ServiceConfig::default()));
    service.open_account("defender", None)?;
    let api = service.client("defender");
    let cfg = AttackConfig {
        variant: match mirror.variant {
            Variant::NoAug => Variant::NoAug,
            _ => Variant::StolenEncoder,
        },
        ..mirror.clone()
    };
    let mut outcome = steal(&api, pretraining_set, &cfg)?.ensure_complete()?;
    outcome.encoder.provenance = EncoderProvenance::DefenderSurrogate;
    Ok(outcome.encoder)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn top_k_examples() {
        let v = array![0.5, -2.0, 0.1, 1.0];
        assert_eq!(top_k(v.view(), 2).unwrap(), array![0.0, -2.0, 0.0, 1.0]);
        assert_eq!(top_k(v.view(), 4).unwrap(), v);
        assert_eq!(top_k(array![0.0, 0.0, 0.0].view(), 2).unwrap(), array![0.0, 0.0, 0.0]);
        assert_eq!(top_k(array![1.0, -1.0, 1.0].view(), 2).unwrap(), array![1.0, -1.0, 0.0]);
        assert!(matches!(top_k(v.view(), 0), Err(Error::Precondition(_))));
        assert!(top_k(v.view(), 5).is_err());
    }

    #[test]
    fn rounding_examples() {
        assert_eq!(round_features(array![0.0123].view(), 2), array![0.01]);
        assert_eq!(round_features(array![0.25, -0.25, 0.35].view(), 1), array![0.3, -0.3, 0.4]);
        let r = round_features(array![1.0, 0.5, -3.25].view(), 2);
        assert_eq!(round_features(r.view(), 2), r);
    }

    #[test]
    fn parse_and_display() {
        for s in ["none", "top_k:k=50", "round:m=1"] {
            let cfg: DefenseConfig = s.parse().unwrap();
            assert_eq!(cfg.to_string(), s);
        }
        let p: DefenseConfig = "poison:eps=5,norm=l2".parse().unwrap();
        match &p {
            DefenseConfig::Poisoning(c) => {
                assert_eq!(c.eps, 5.0);
                assert_eq!(c.norm, Norm::L2);
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(p.to_string().parse::<DefenseConfig>().unwrap(), p);
        for bad in ["top_k", "top_k:k=x", "round:n=2", "blur:r=1", "none:k=1"] {
            assert!(bad.parse::<DefenseConfig>().is_err(), "{bad}");
        }
        assert!(DefenseConfig::TopK { k: 600 }.validate(512).is_err());
        assert!(DefenseConfig::Rounding { m: 0 }.validate(512).is_err());
    }

    #[test]
    fn poison_without_surrogate_is_config_error() {
        let cfg: DefenseConfig = "poison:eps=1,norm=linf".parse().unwrap();
        assert!(matches!(build_defense(&cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn toml_form() {
        let cfg: DefenseConfig = toml::from_str("kind = \"top_k\"\nk = 8").unwrap();
        assert_eq!(cfg, DefenseConfig::TopK { k: 8 });
        let p: DefenseConfig = toml::from_str("kind = \"poisoning\"\neps = 2.0\nnorm = \"linf\"").unwrap();
        assert!(matches!(p, DefenseConfig::Poisoning(_)));
    }

    fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(prop_oneof![-5.0f64..5.0, Just(0.0), Just(1.0), Just(-1.0)], 1..40)
    }

    proptest! {
        #[test]
        fn top_k_properties(v in vec_strategy(), k_frac in 0.0f64..1.0) {
            let v = Array1::from(v);
            let k = 1 + ((v.len() - 1) as f64 * k_frac) as usize;
            let out = top_k(v.view(), k).unwrap();
            prop_assert!(out.iter().filter(|x| **x != 0.0).count() <= k);
            prop_assert_eq!(top_k(out.view(), k).unwrap(), out.clone());
            // oracle: stable sort by descending magnitude
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].abs().partial_cmp(&v[a].abs()).unwrap());
            let mut expect = Array1::<f64>::zeros(v.len());
            for &i in &idx[..k] {
                expect[i] = v[i];
            }
            prop_assert_eq!(&out, &expect);
            prop_assert_eq!(top_k(v.view(), v.len()).unwrap(), v);
        }

        #[test]
        fn rounding_bound_and_idempotence(v in proptest::collection::vec(-100.0f64..100.0, 1..200), m in 1u32..6) {
            let v = Array1::from(v);
            let r = round_features(v.view(), m);
            let bound = 0.5 * 10f64.powi(-(m as i32));
            for (&a, &b) in r.iter().zip(v.iter()) {
                prop_assert!((a - b).abs() <= bound * (1.0 + 1e-9) + 1e-12);
            }
            prop_assert_eq!(round_features(r.view(), m), r);
        }
    }
}
