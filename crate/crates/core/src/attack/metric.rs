//! Distances between feature vectors.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    L2,
    L1,
    /// Minus cosine similarity, in `[-1, 1]`.
    Cosine,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::L2 => "l2",
            Metric::L1 => "l1",
            Metric::Cosine => "cosine",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "l2" | "euclidean" => Ok(Metric::L2),
            "l1" | "manhattan" => Ok(Metric::L1),
            "cosine" | "cos" => Ok(Metric::Cosine),
            other => Err(Error::config(format!("unknown distance metric `{other}`"))),
        }
    }
}

pub fn feature_distance(metric: Metric, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<f64> {
    distance_grad(metric, u, v).map(|(d, _)| d)
}

/// Distance and its gradient with respect to `u`.
///
/// At `u == v` the ℓ2 and ℓ1 gradients are taken as zero.
pub fn distance_grad(metric: Metric, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)> {
    if u.len() != v.len() {
        return Err(Error::precondition(format!(
            "feature vectors differ in length ({} vs {})",
            u.len(),
            v.len()
        )));
    }
    let diff = &u - &v;
    Ok(match metric {
        Metric::L2 => {
            let d = diff.dot(&diff).sqrt();
            let g = if d > 0.0 { diff / d } else { Array1::zeros(u.len()) };
            (d, g)
        }
        Metric::L1 => (diff.iter().map(|x| x.abs()).sum(), diff.mapv(sign)),
        Metric::Cosine => {
            let (nu, nv) = (u.dot(&u).sqrt(), v.dot(&v).sqrt());
            if nu == 0.0 || nv == 0.0 {
                return Err(Error::Domain("cosine distance of an all-zero vector".into()));
            }
            let c = u.dot(&v) / (nu * nv);
            let mut g = v.to_owned() / (nu * nv);
            g.scaled_add(-c / (nu * nu), &u);
            (-c, -g)
        }
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Row-wise distances between `pred` and `target` plus gradients w.r.t. `pred`.
pub fn batch_distance_grad(
    metric: Metric,
    pred: ArrayView2<'_, f64>,
    target: ArrayView2<'_, f64>,
) -> Result<(Vec<f64>, Array2<f64>)> {
    if pred.dim() != target.dim() {
        return Err(Error::precondition(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.dim(),
            target.dim()
        )));
    }
    let mut grad = Array2::<f64>::zeros(pred.raw_dim());
    let mut dists = Vec::with_capacity(pred.nrows());
    let mut failure = None;
    Zip::from(grad.rows_mut())
        .and(pred.rows())
        .and(target.rows())
        .for_each(|mut g, p, t| {
            if failure.is_some() {
                return;
            }
            match distance_grad(metric, p, t) {
                Ok((d, gr)) => {
                    dists.push(d);
                    g.assign(&gr);
                }
                Err(e) => failure = Some(e),
            }
        });
    match failure {
        Some(e) => Err(e),
        None => Ok((dists, grad)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn identical_vectors() {
        let u = array![0.3, -1.0, 2.0];
        assert_eq!(feature_distance(Metric::L2, u.view(), u.view()).unwrap(), 0.0);
        assert_eq!(feature_distance(Metric::L1, u.view(), u.view()).unwrap(), 0.0);
        assert_abs_diff_eq!(feature_distance(Metric::Cosine, u.view(), u.view()).unwrap(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn orthogonal_units() {
        let (u, v) = (array![1.0, 0.0], array![0.0, 1.0]);
        assert_abs_diff_eq!(feature_distance(Metric::L2, u.view(), v.view()).unwrap(), 2f64.sqrt());
        assert_eq!(feature_distance(Metric::L1, u.view(), v.view()).unwrap(), 2.0);
        assert_eq!(feature_distance(Metric::Cosine, u.view(), v.view()).unwrap(), 0.0);
    }

    #[test]
    fn zero_vector_under_cosine_is_domain_error() {
        let (u, z) = (array![1.0, 2.0], array![0.0, 0.0]);
        assert!(matches!(feature_distance(Metric::Cosine, u.view(), z.view()), Err(Error::Domain(_))));
        assert!(matches!(feature_distance(Metric::L2, u.view(), array![1.0].view()), Err(Error::Precondition(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let u = array![0.4, -1.3, 2.2, 0.7];
        let v = array![1.0, 0.5, -0.2, 0.9];
        for metric in [Metric::L2, Metric::L1, Metric::Cosine] {
            let (_, g) = distance_grad(metric, u.view(), v.view()).unwrap();
            for i in 0..u.len() {
                let h = 1e-6;
                let mut a = u.clone();
                a[i] += h;
                let mut b = u.clone();
                b[i] -= h;
                let fd = (feature_distance(metric, a.view(), v.view()).unwrap()
                    - feature_distance(metric, b.view(), v.view()).unwrap())
                    / (2.0 * h);
                assert_abs_diff_eq!(fd, g[i], epsilon = 1e-6);
            }
        }
    }

    fn vecs(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0f64..10.0, dim)
    }

    proptest! {
        #[test]
        fn norm_inequalities(u in vecs(8), v in vecs(8)) {
            let (u, v) = (Array1::from(u), Array1::from(v));
            let l2 = feature_distance(Metric::L2, u.view(), v.view()).unwrap();
            let l1 = feature_distance(Metric::L1, u.view(), v.view()).unwrap();
            prop_assert!(l2 <= l1 + 1e-9);
            prop_assert!(l1 <= 8f64.sqrt() * l2 + 1e-9);
        }

        #[test]
        fn symmetric_and_triangle(u in vecs(5), v in vecs(5), w in vecs(5)) {
            let (u, v, w) = (Array1::from(u), Array1::from(v), Array1::from(w));
            for m in [Metric::L1, Metric::L2] {
                let uv = feature_distance(m, u.view(), v.view()).unwrap();
                prop_assert!((uv - feature_distance(m, v.view(), u.view()).unwrap()).abs() < 1e-12);
                let uw = feature_distance(m, u.view(), w.view()).unwrap();
                let wv = feature_distance(m, w.view(), v.view()).unwrap();
                prop_assert!(uv <= uw + wv + 1e-9);
            }
        }

        #[test]
        fn cosine_in_range(u in vecs(6), v in vecs(6)) {
            prop_assume!(u.iter().any(|x| *x != 0.0) && v.iter().any(|x| *x != 0.0));
            let d = feature_distance(Metric::Cosine, Array1::from(u).view(), Array1::from(v).view()).unwrap();
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&d));
        }
    }
}
