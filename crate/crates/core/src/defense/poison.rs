//! Feature poisoning: perturb each returned vector within an ℓp ball so as
//! to maximize a defender-trained surrogate's stealing loss.

use std::fmt;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{parse_num, Defense};
use crate::attack::{distance_grad, Metric};
use crate::dataio::AugmentationSpec;
use crate::encoder::EncoderParams;
use crate::rng::{stream_rng, Stream};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    #[default]
    L2,
    Linf,
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonConfig {
    pub eps: f64,
    pub norm: Norm,
    pub lambda: f64,
    pub metric: Metric,
    pub augmentation: AugmentationSpec,
    pub steps: usize,
    /// Defaults to `eps / 10`.
    pub step_size: Option<f64>,
    /// Seeds the per-query augmented view.
    pub seed: u64,
}

impl Default for PoisonConfig {
    fn default() -> Self {
        PoisonConfig {
            eps: 1.0,
            norm: Norm::L2,
            lambda: 20.0,
            metric: Metric::L2,
            augmentation: AugmentationSpec::attack_default(),
            steps: 20,
            step_size: None,
            seed: 0,
        }
    }
}

impl PoisonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(Error::config(format!("poisoning eps must be ≥ 0, got {}", self.eps)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::config("poisoning lambda must be ≥ 0"));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::config("poisoning step_size must be positive"));
            }
        }
        self.augmentation.validate()
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.eps / 10.0)
    }

    pub(crate) fn from_pairs(kv: &[(String, String)]) -> Result<Self> {
        let mut cfg = PoisonConfig::default();
        for (k, v) in kv {
            match k.as_str() {
                "eps" => cfg.eps = parse_num(k, v)?,
                "norm" => {
                    cfg.norm = match v.to_ascii_lowercase().as_str() {
                        "l2" => Norm::L2,
                        "linf" | "inf" => Norm::Linf,
                        _ => return Err(Error::config(format!("unknown norm `{v}`"))),
                    }
                }
                "lambda" => cfg.lambda = parse_num(k, v)?,
                "metric" => cfg.metric = v.parse()?,
                "steps" => cfg.steps = parse_num(k, v)?,
                "step" | "step_size" => cfg.step_size = Some(parse_num(k, v)?),
                "seed" => cfg.seed = parse_num(k, v)?,
                "aug" => cfg.augmentation = v.replace('+', ",").parse()?,
                _ => return Err(Error::config(format!("unknown poisoning option `{k}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for PoisonConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "poison:eps={},norm={},lambda={},metric={},steps={}",
            self.eps, self.norm, self.lambda, self.metric, self.steps
        )?;
        if let Some(s) = self.step_size {
            write!(f, ",step={s}")?;
        }
        write!(f, ",seed={},aug={}", self.seed, self.augmentation.to_string().replace(',', "+"))
    }
}

/// Euclidean projection onto the radius-`eps` ball; the result never
/// exceeds `eps` in floating point.
pub fn project_l2(delta: &Array1<f64>, eps: f64) -> Array1<f64> {
    let norm = delta.dot(delta).sqrt();
    if norm <= eps {
        return delta.clone();
    }
    if eps == 0.0 {
        return Array1::zeros(delta.len());
    }
    let mut out = delta * (eps / norm);
    while out.dot(&out).sqrt() > eps {
        out *= 1.0 - f64::EPSILON;
    }
    out
}

pub fn project_linf(delta: &Array1<f64>, eps: f64) -> Array1<f64> {
    delta.mapv(|x| x.clamp(-eps, eps))
}

fn project(norm: Norm, delta: &Array1<f64>, eps: f64) -> Array1<f64> {
    match norm {
        Norm::L2 => project_l2(delta, eps),
        Norm::Linf => project_linf(delta, eps),
    }
}

pub fn norm_of(norm: Norm, delta: ArrayView1<'_, f64>) -> f64 {
    match norm {
        Norm::L2 => delta.dot(&delta).sqrt(),
        Norm::Linf => delta.iter().fold(0.0, |m, x| f64::max(m, x.abs())),
    }
}

/// `d(v+δ, a) + λ·d(v+δ, b)` and its gradient in `δ`.
fn objective(cfg: &PoisonConfig, w: ArrayView1<'_, f64>, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)> {
    let (da, mut g) = distance_grad(cfg.metric, w, a)?;
    if cfg.lambda == 0.0 {
        return Ok((da, g));
    }
    let (db, gb) = distance_grad(cfg.metric, w, b)?;
    g.scaled_add(cfg.lambda, &gb);
    Ok((da + cfg.lambda * db, g))
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoisonResult {
    pub output: Array1<f64>,
    pub delta: Array1<f64>,
    pub objective_zero: f64,
    pub objective: f64,
}

/// Projected gradient ascent on `δ`, keeping the best iterate (starting
/// from `δ = 0`). `a` and `b` are the surrogate's features of the image and
/// of its augmented view.
pub fn poison_vector(
    v: ArrayView1<'_, f64>,
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
    cfg: &PoisonConfig,
) -> Result<PoisonResult> {
    let mut delta = Array1::<f64>::zeros(v.len());
    let (obj0, mut grad) = objective(cfg, v, a, b)?;
    let mut best = (obj0, delta.clone());
    if cfg.eps > 0.0 {
        let step = cfg.step();
        for _ in 0..cfg.steps {
            let dir = match cfg.norm {
                Norm::Linf => grad.mapv(|g| if g > 0.0 { 1.0 } else if g < 0.0 { -1.0 } else { 0.0 }),
                Norm::L2 => {
                    let n = grad.dot(&grad).sqrt();
                    if n == 0.0 {
                        break;
                    }
                    &grad / n
                }
            };
            delta = project(cfg.norm, &(&delta + &(dir * step)), cfg.eps);
            let w = &v + &delta;
            let (obj, g) = objective(cfg, w.view(), a, b)?;
            if obj > best.0 {
                best = (obj, delta.clone());
            }
            grad = g;
        }
    }
    let (objective, delta) = best;
    Ok(PoisonResult {
        output: &v + &delta,
        delta,
        objective_zero: obj0,
        objective,
    })
}

fn content_key(image: ArrayView3<'_, f64>) -> u64 {
    let mut h = Sha256::new();
    for x in image.iter() {
        h.update(x.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Serving-time poisoning with a read-only defender surrogate.
#[derive(Debug)]
pub struct PoisonDefense {
    cfg: PoisonConfig,
    surrogate: Arc<EncoderParams>,
}

impl PoisonDefense {
    pub fn new(cfg: PoisonConfig, surrogate: Arc<EncoderParams>) -> Result<Self> {
        cfg.validate()?;
        Ok(PoisonDefense { cfg, surrogate })
    }

    pub fn config(&self) -> &PoisonConfig {
        &self.cfg
    }

    /// The augmented view used for `image`: a function of its content only.
    fn view(&self, image: ArrayView3<'_, f64>) -> ndarray::Array3<f64> {
        let mut rng = stream_rng(self.cfg.seed, Stream::Poison, &[content_key(image)]);
        self.cfg.augmentation.apply(image, &mut rng)
    }

    fn surrogate_features(&self, images: ArrayView4<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.surrogate.check_batch(&images)?;
        let a = self.surrogate.forward_with(&self.surrogate.weights, images);
        let mut aug = Array4::<f64>::zeros(images.raw_dim());
        for (i, img) in images.axis_iter(Axis(0)).enumerate() {
            aug.index_axis_mut(Axis(0), i).assign(&self.view(img));
        }
        let b = self.surrogate.forward_with(&self.surrogate.weights, aug.view());
        Ok((a, b))
    }
}

impl Defense for PoisonDefense {
    fn descriptor(&self) -> String {
        self.cfg.to_string()
    }

    fn apply(&self, images: ArrayView4<'_, f64>, mut clean: Array2<f64>) -> Result<Array2<f64>> {
        if self.cfg.eps == 0.0 {
            return Ok(clean);
        }
        if clean.ncols() != self.surrogate.feature_dim {
            return Err(Error::config(format!(
                "defender surrogate emits {} features, target emits {}",
                self.surrogate.feature_dim,
                clean.ncols()
            )));
        }
        let (a, b) = self.surrogate_features(images)?;
        for (i, mut row) in clean.rows_mut().into_iter().enumerate() {
            let r = poison_vector(row.view(), a.row(i), b.row(i), &self.cfg)?;
            row.assign(&r.output);
        }
        Ok(clean)
    }
}

/// Poisons a single feature vector `f_t(x)` for image `x`.
pub fn poison(x: ArrayView3<'_, f64>, clean: ArrayView1<'_, f64>, cfg: &PoisonConfig, surrogate: Option<&EncoderParams>) -> Result<Array1<f64>> {
    let surrogate = surrogate.ok_or_else(|| Error::config("feature poisoning needs a defender surrogate encoder"))?;
    let d = PoisonDefense::new(cfg.clone(), Arc::new(surrogate.clone()))?;
    let batch = x.insert_axis(Axis(0));
    let out = d.apply(batch, clean.insert_axis(Axis(0)).to_owned())?;
    Ok(out.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::ImageShape;
    use crate::encoder::{init_encoder, EncoderProvenance};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l2_projection_closed_form() {
        let d = array![3.0, 4.0];
        assert_eq!(project_l2(&d, 10.0), d);
        let p = project_l2(&d, 1.0);
        assert_abs_diff_eq!(p[0], 0.6, epsilon = 1e-12);
        assert_abs_diff_eq!(p[1], 0.8, epsilon = 1e-12);
        assert!(p.dot(&p).sqrt() <= 1.0);
        assert_eq!(project_l2(&d, 0.0), array![0.0, 0.0]);
    }

    #[test]
    fn linf_projection_closed_form() {
        assert_eq!(project_linf(&array![3.0, -0.5, -4.0], 1.0), array![1.0, -0.5, -1.0]);
    }

    #[test]
    fn zero_eps_is_identity() {
        let v = array![0.3, -1.0, 2.0];
        let cfg = PoisonConfig {
            eps: 0.0,
            ..Default::default()
        };
        let r = poison_vector(v.view(), array![1.0, 1.0, 1.0].view(), array![0.0, 1.0, 0.0].view(), &cfg).unwrap();
        assert_eq!(r.output, v);
    }

    #[test]
    fn single_linf_step_is_signed_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let v = Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0));
        let a = Array1::from_shape_fn(16, |_| rng.gen_range(-1.0..1.0));
        let cfg = PoisonConfig {
            eps: 0.25,
            norm: Norm::Linf,
            lambda: 0.0,
            steps: 1,
            step_size: Some(0.25),
            ..Default::default()
        };
        let r = poison_vector(v.view(), a.view(), a.view(), &cfg).unwrap();
        let expect = (&v - &a).mapv(|x| 0.25 * x.signum());
        assert_eq!(r.delta, expect);
        // the direction agrees with a numeric gradient of the objective
        for i in 0..16 {
            let h = 1e-6;
            let f = |s: f64| {
                let mut w = v.clone();
                w[i] += s;
                feature_distance_l2(&w, &a)
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            assert_eq!(fd.signum() * 0.25, r.delta[i]);
        }
    }

    fn feature_distance_l2(u: &Array1<f64>, v: &Array1<f64>) -> f64 {
        let d = u - v;
        d.dot(&d).sqrt()
    }

    #[test]
    fn defense_shifts_features_within_budget() {
        let shape = ImageShape::new(8, 8, 3);
        let s = init_encoder("mlp", 12, shape, 1, EncoderProvenance::DefenderSurrogate).unwrap();
        let t = init_encoder("mlp", 12, shape, 2, EncoderProvenance::PretrainedTarget).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array4::from_shape_fn((5, 8, 8, 3), |_| rng.gen::<f64>());
        let clean = t.encode(x.view()).unwrap().vectors;
        for norm in [Norm::L2, Norm::Linf] {
            let cfg = PoisonConfig {
                eps: 0.5,
                norm,
                ..Default::default()
            };
            let d = PoisonDefense::new(cfg.clone(), Arc::new(s.clone())).unwrap();
            let out = d.apply(x.view(), clean.clone()).unwrap();
            assert_ne!(out, clean);
            for i in 0..5 {
                let delta = &out.row(i) - &clean.row(i);
                assert!(norm_of(norm, delta.view()) <= 0.5);
            }
            // deterministic: same images, same answer
            assert_eq!(d.apply(x.view(), clean.clone()).unwrap(), out);
            let single = poison(x.index_axis(Axis(0), 2), clean.row(2), &cfg, Some(&s)).unwrap();
            assert_eq!(single, out.row(2));
        }
        assert!(poison(x.index_axis(Axis(0), 0), clean.row(0), &PoisonConfig::default(), None).is_err());
    }

    fn vecs(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, n)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn budget_and_ascent_hold(
            v in vecs(10), a in vecs(10), b in vecs(10),
            eps in 0.0f64..5.0, linf in any::<bool>(), lambda in 0.0f64..30.0, metric in 0usize..3,
        ) {
            let metric = [Metric::L2, Metric::L1, Metric::Cosine][metric];
            prop_assume!(metric != Metric::Cosine || (a.iter().any(|x| *x != 0.0) && b.iter().any(|x| *x != 0.0)));
            let norm = if linf { Norm::Linf } else { Norm::L2 };
            let cfg = PoisonConfig { eps, norm, lambda, metric, ..Default::default() };
            let (v, a, b) = (Array1::from(v), Array1::from(a), Array1::from(b));
            match poison_vector(v.view(), a.view(), b.view(), &cfg) {
                Ok(r) => {
                    prop_assert!(norm_of(norm, r.delta.view()) <= eps);
                    prop_assert!(r.objective >= r.objective_zero);
                }
                // cosine can meet an exactly-zero iterate
                Err(Error::Domain(_)) => prop_assert_eq!(metric, Metric::Cosine),
                Err(e) => return Err(TestCaseError::fail(e.to_string())),
            }
        }

        #[test]
        fn projections_land_in_ball(d in vecs(7), eps in 0.0f64..4.0) {
            let d = Array1::from(d);
            let p2 = project_l2(&d, eps);
            prop_assert!(norm_of(Norm::L2, p2.view()) <= eps);
            let pi = project_linf(&d, eps);
            prop_assert!(norm_of(Norm::Linf, pi.view()) <= eps);
            if norm_of(Norm::L2, d.view()) <= eps {
                prop_assert_eq!(p2, d);
            }
        }
    }
}
