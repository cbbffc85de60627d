//! Contrastive objectives over cosine similarity, with analytic gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::{Error, Result};

/// Row-normalizes `z`; fails on an all-zero row.
pub(crate) fn normalize_rows(z: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::Domain(format!("row {i} has zero or non-finite norm")));
    }
    let mut u = z.to_owned();
    Zip::from(u.rows_mut()).and(&norms).for_each(|mut r, &n| r /= n);
    Ok((u, norms))
}

/// Pulls a gradient w.r.t. normalized rows back to the raw rows.
pub(crate) fn normalize_backward(u: &Array2<f64>, norms: &Array1<f64>, mut gu: Array2<f64>) -> Array2<f64> {
    Zip::from(gu.rows_mut())
        .and(u.rows())
        .and(norms)
        .for_each(|mut g, ur, &n| {
            let along = g.dot(&ur);
            g.scaled_add(-along, &ur);
            g /= n;
        });
    gu
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::precondition(format!("temperature must be positive, got {tau}")))
    }
}

/// The usual two-view pairing: row `i` pairs with row `i + n`.
pub fn two_view_pairing(n: usize) -> Vec<usize> {
    (0..2 * n).map(|i| if i < n { i + n } else { i - n }).collect()
}

fn check_pairing(rows: usize, pairing: &[usize]) -> Result<()> {
    if pairing.len() != rows || rows % 2 != 0 {
        return Err(Error::precondition(format!(
            "pairing covers {} of {rows} rows (need an even row count)",
            pairing.len()
        )));
    }
    for (i, &j) in pairing.iter().enumerate() {
        if j >= rows || j == i || pairing[j] != i {
            return Err(Error::precondition(format!("pairing is not a perfect matching at row {i}")));
        }
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Summed SimCLR loss over all ordered positive pairs.
pub fn simclr_loss(z: ArrayView2<'_, f64>, pairing: &[usize], tau: f64) -> Result<f64> {
    simclr_loss_grad(z, pairing, tau).map(|(l, _)| l)
}

/// SimCLR loss and its gradient w.r.t. `z`.
pub fn simclr_loss_grad(z: ArrayView2<'_, f64>, pairing: &[usize], tau: f64) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    let rows = z.nrows();
    check_pairing(rows, pairing)?;
    let (u, norms) = normalize_rows(z)?;
    let s = u.dot(&u.t()) / tau;
    let mut g = Array2::<f64>::zeros((rows, rows));
    let mut loss = 0.0;
    for i in 0..rows {
        let others = (0..rows).filter(|&k| k != i).map(|k| s[[i, k]]);
        let lse = log_sum_exp(others);
        loss += lse - s[[i, pairing[i]]];
        for k in (0..rows).filter(|&k| k != i) {
            g[[i, k]] = (s[[i, k]] - lse).exp();
        }
        g[[i, pairing[i]]] -= 1.0;
    }
    let sym = &g + &g.t();
    let gu = sym.dot(&u) / tau;
    Ok((loss, normalize_backward(&u, &norms, gu)))
}

/// Summed MoCo loss. `dictionary` is the full denominator set and should
/// already contain the current keys.
pub fn moco_loss(queries: ArrayView2<'_, f64>, keys: ArrayView2<'_, f64>, dictionary: ArrayView2<'_, f64>, tau: f64) -> Result<f64> {
    moco_loss_grad(queries, keys, dictionary, tau).map(|(l, _)| l)
}

/// MoCo loss and its gradient w.r.t. the queries; keys and dictionary are
/// constants (they come from the momentum encoder).
pub fn moco_loss_grad(
    queries: ArrayView2<'_, f64>,
    keys: ArrayView2<'_, f64>,
    dictionary: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    if queries.dim() != keys.dim() {
        return Err(Error::precondition(format!(
            "queries {:?} and keys {:?} differ in shape",
            queries.dim(),
            keys.dim()
        )));
    }
    if dictionary.nrows() == 0 {
        return Err(Error::precondition("MoCo dictionary is empty"));
    }
    if dictionary.ncols() != queries.ncols() {
        return Err(Error::precondition("dictionary width differs from query width"));
    }
    let (uq, nq) = normalize_rows(queries)?;
    let (uk, _) = normalize_rows(keys)?;
    let (ud, _) = normalize_rows(dictionary)?;
    let sd = uq.dot(&ud.t()) / tau;
    let mut gu = Array2::<f64>::zeros(uq.raw_dim());
    let mut loss = 0.0;
    for i in 0..uq.nrows() {
        let row = sd.row(i);
        let lse = log_sum_exp(row.iter().copied());
        let pos = uq.row(i).dot(&uk.row(i)) / tau;
        loss += lse - pos;
        let p = row.mapv(|v| (v - lse).exp());
        let mut g = gu.row_mut(i);
        g.assign(&(p.dot(&ud) / tau));
        g.scaled_add(-1.0 / tau, &uk.row(i));
    }
    Ok((loss, normalize_backward(&uq, &nq, gu)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
        m.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    /// Direct per-pair evaluation, no shared intermediates.
    fn simclr_oracle(z: &Array2<f64>, pairing: &[usize], tau: f64) -> f64 {
        let z = rows(z);
        (0..z.len())
            .map(|i| {
                let num = (cos(&z[i], &z[pairing[i]]) / tau).exp();
                let den: f64 = (0..z.len()).filter(|&k| k != i).map(|k| (cos(&z[i], &z[k]) / tau).exp()).sum();
                -(num / den).ln()
            })
            .sum()
    }

    fn moco_oracle(q: &Array2<f64>, k: &Array2<f64>, dict: &Array2<f64>, tau: f64) -> f64 {
        let (q, k, dict) = (rows(q), rows(k), rows(dict));
        (0..q.len())
            .map(|i| {
                let num = (cos(&q[i], &k[i]) / tau).exp();
                let den: f64 = dict.iter().map(|d| (cos(&q[i], d) / tau).exp()).sum();
                -(num / den).ln()
            })
            .sum()
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_pair_is_zero() {
        let z = array![[1.0, 2.0, 0.5], [0.3, -1.0, 2.0]];
        let l = simclr_loss(z.view(), &two_view_pairing(1), 0.5).unwrap();
        assert_abs_diff_eq!(l, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn simclr_matches_oracle() {
        let z = array![[1.0, 0.0, 0.5], [0.2, 1.0, -0.3], [0.9, 0.1, 0.4], [-0.1, 0.8, 0.0]];
        let p = two_view_pairing(2);
        assert_abs_diff_eq!(simclr_loss(z.view(), &p, 0.5).unwrap(), simclr_oracle(&z, &p, 0.5), epsilon = 1e-6);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=4 {
            let z = random(&mut rng, 2 * n, 5);
            let p = two_view_pairing(n);
            for tau in [0.07, 0.5, 2.0] {
                assert_abs_diff_eq!(simclr_loss(z.view(), &p, tau).unwrap(), simclr_oracle(&z, &p, tau), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn simclr_custom_pairing_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random(&mut rng, 4, 3);
        let p = vec![1, 0, 3, 2];
        assert_abs_diff_eq!(simclr_loss(z.view(), &p, 0.5).unwrap(), simclr_oracle(&z, &p, 0.5), epsilon = 1e-6);
        assert!(matches!(simclr_loss(z.view(), &p, 0.0), Err(Error::Precondition(_))));
        assert!(matches!(simclr_loss(z.view(), &[1, 2, 3, 0], 0.5), Err(Error::Precondition(_))));
        assert!(matches!(simclr_loss(z.view(), &[0, 1, 2, 3], 0.5), Err(Error::Precondition(_))));
        assert!(simclr_loss(z.slice(ndarray::s![..3, ..]), &[1, 0, 2], 0.5).is_err());
    }

    #[test]
    fn losses_are_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = random(&mut rng, 6, 4);
        let p = two_view_pairing(3);
        let a = simclr_loss(z.view(), &p, 0.5).unwrap();
        let b = simclr_loss((&z * 7.5).view(), &p, 0.5).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        let (q, k, d) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 6, 4));
        let a = moco_loss(q.view(), k.view(), d.view(), 0.07).unwrap();
        let b = moco_loss((&q * 3.0).view(), (&k * 0.2).view(), (&d * 11.0).view(), 0.07).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-9);
    }

    #[test]
    fn moco_only_positive_in_dictionary_is_zero() {
        let q = array![[0.3, 1.0]];
        let k = array![[1.0, -0.5]];
        assert_abs_diff_eq!(moco_loss(q.view(), k.view(), k.view(), 0.07).unwrap(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn moco_matches_oracle() {
        let q = array![[1.0, 0.2, 0.0], [0.0, 1.0, 0.5]];
        let k = array![[0.9, 0.1, 0.1], [0.1, 0.8, 0.4]];
        let d = array![[0.9, 0.1, 0.1], [0.1, 0.8, 0.4], [-1.0, 0.0, 0.3], [0.2, -0.7, 1.0]];
        assert_abs_diff_eq!(
            moco_loss(q.view(), k.view(), d.view(), 0.07).unwrap(),
            moco_oracle(&q, &k, &d, 0.07),
            epsilon = 1e-6
        );
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=4 {
            for m in [1, 4, 8] {
                let (q, k, d) = (random(&mut rng, n, 5), random(&mut rng, n, 5), random(&mut rng, m, 5));
                assert_abs_diff_eq!(
                    moco_loss(q.view(), k.view(), d.view(), 0.2).unwrap(),
                    moco_oracle(&q, &k, &d, 0.2),
                    epsilon = 1e-6
                );
            }
        }
    }

    #[test]
    fn duplicating_dictionary_adds_n_log_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (q, k, d) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 4, 4));
        let dd = ndarray::concatenate(Axis(0), &[d.view(), d.view()]).unwrap();
        let a = moco_loss(q.view(), k.view(), d.view(), 0.5).unwrap();
        let b = moco_loss(q.view(), k.view(), dd.view(), 0.5).unwrap();
        assert_abs_diff_eq!(b - a, 3.0 * 2f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(b, moco_oracle(&q, &k, &dd, 0.5), epsilon = 1e-6);
    }

    #[test]
    fn moco_empty_dictionary_rejected() {
        let q = array![[1.0, 0.0]];
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(matches!(moco_loss(q.view(), q.view(), empty.view(), 0.1), Err(Error::Precondition(_))));
    }

    fn check_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>, g: &Array2<f64>) {
        let h = 1e-5;
        for idx in [(0, 0), (1, 2), (x.nrows() - 1, x.ncols() - 1), (x.nrows() / 2, 1)] {
            let mut a = x.clone();
            a[idx] += h;
            let mut b = x.clone();
            b[idx] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let rel = (fd - g[idx]).abs() / fd.abs().max(g[idx].abs()).max(1e-8);
            assert!(rel < 1e-4, "coord {idx:?}: fd {fd} analytic {}", g[idx]);
        }
    }

    #[test]
    fn simclr_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let z = random(&mut rng, 8, 5);
        let p = two_view_pairing(4);
        let (_, g) = simclr_loss_grad(z.view(), &p, 0.5).unwrap();
        check_grad(|z| simclr_loss(z.view(), &p, 0.5).unwrap(), &z, &g);
    }

    #[test]
    fn moco_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (q, k, d) = (random(&mut rng, 4, 5), random(&mut rng, 4, 5), random(&mut rng, 8, 5));
        let (_, g) = moco_loss_grad(q.view(), k.view(), d.view(), 0.2).unwrap();
        check_grad(|q| moco_loss(q.view(), k.view(), d.view(), 0.2).unwrap(), &q, &g);
    }
}
