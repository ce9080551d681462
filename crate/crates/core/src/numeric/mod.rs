//! Probability kernels, the softmax Jacobian, Adam and a central-difference
//! gradient oracle.

mod adam;

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{NegprError, Result};

pub use adam::AdamState;

/// Floor applied to every log/divide argument.
pub const LOG_FLOOR: f64 = 1e-300;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Max-shifted softmax.
pub fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut p = z.mapv(|v| (v - max).exp());
    let sum = p.sum();
    p /= sum;
    p
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(z.raw_dim());
    for (src, mut dst) in z.rows().into_iter().zip(out.rows_mut()) {
        dst.assign(&softmax(src));
    }
    out
}

/// `J[c][k] = dp_c / dz_k = p_c (delta_ck - p_k)`.
pub fn softmax_jacobian(p: ArrayView1<f64>) -> Array2<f64> {
    let c = p.len();
    Array2::from_shape_fn((c, c), |(i, k)| {
        let delta = if i == k { 1.0 } else { 0.0 };
        p[i] * (delta - p[k])
    })
}

/// `-log p_y` and its gradient with respect to the logits, `p - onehot(y)`.
pub fn cross_entropy(p: ArrayView1<f64>, y: usize) -> (f64, Array1<f64>) {
    let loss = -p[y].max(LOG_FLOOR).ln();
    let mut grad = p.to_owned();
    grad[y] -= 1.0;
    (loss, grad)
}

pub fn kl_div(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pc, _)| pc > 0.0)
        .map(|(&pc, &qc)| pc * (pc.max(LOG_FLOOR).ln() - qc.max(LOG_FLOOR).ln()))
        .sum()
}

pub fn cosine_sim(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    // first maximum wins
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(NegprError::NonFinite(format!(
                "objective at coordinate {i} (f+ = {up}, f- = {down})"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = l2_norm(a).max(l2_norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn l2_norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_uniform() {
        let p = softmax(array![0.0, 0.0, 0.0].view());
        assert!(p.iter().all(|&v| close(v, 1.0 / 3.0, 1e-15)));
    }

    #[test]
    fn softmax_shift_invariant() {
        let z = array![0.3, -1.2, 2.0];
        let shifted = &z + 5.0;
        let a = softmax(z.view());
        let b = softmax(shifted.view());
        for (x, y) in a.iter().zip(&b) {
            assert!(close(*x, *y, 1e-15));
        }
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // direct exp / normalise without max shift
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        let p = softmax(array![1.0, 2.0, 3.0].view());
        for (pi, ei) in p.iter().zip(&e) {
            assert!(close(*pi, ei / s, 1e-15));
        }
        // 0.09003057317038046, 0.24472847105479767, 0.6652409557748219
        assert!(close(p[0], 0.090_030_573_170_380_46, 1e-15));
        assert!(close(p[2], 0.665_240_955_774_821_9, 1e-15));
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(z in prop::collection::vec(-1e8f64..1e8, 2..10)) {
            let p = softmax(Array1::from(z).view());
            prop_assert!((p.sum() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
        }

        #[test]
        fn kl_nonnegative(a in prop::collection::vec(-5f64..5.0, 4), b in prop::collection::vec(-5f64..5.0, 4)) {
            let p = softmax(Array1::from(a).view());
            let q = softmax(Array1::from(b).view());
            prop_assert!(kl_div(p.view(), q.view()) >= -1e-12);
            prop_assert!(kl_div(p.view(), p.view()).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_uniform_binary() {
        let j = softmax_jacobian(array![0.5, 0.5].view());
        assert_eq!(j, array![[0.25, -0.25], [-0.25, 0.25]]);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = softmax(Array1::from(z.clone()).view());
        let j = softmax_jacobian(p.view());
        for c in 0..4 {
            let fd = finite_diff_grad(|x| softmax(Array1::from(x.to_vec()).view())[c], &z, FD_STEP).unwrap();
            for k in 0..4 {
                assert!(close(j[[c, k]], fd[k], 1e-9), "J[{c}][{k}]");
            }
            assert!(j.row(c).sum().abs() < 1e-12);
        }
        assert_eq!(j, j.t());
    }

    #[test]
    fn cross_entropy_limits() {
        let eps = 1e-12;
        let (loss, grad) = cross_entropy(array![1.0 - 2.0 * eps, eps, eps].view(), 0);
        assert!(loss < 1e-10);
        assert!(grad.iter().all(|g| g.abs() < 1e-10));
        let (loss, _) = cross_entropy(array![0.25, 0.25, 0.25, 0.25].view(), 2);
        assert!(close(loss, 4f64.ln(), 1e-15));
        let (loss, _) = cross_entropy(array![1.0, 0.0].view(), 1);
        assert!(close(loss, -LOG_FLOOR.ln(), 1e-9));
    }

    #[test]
    fn cross_entropy_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let c = rng.random_range(2..=6);
            let y = rng.random_range(0..c);
            let z: Vec<f64> = (0..c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (_, g) = cross_entropy(softmax(Array1::from(z.clone()).view()).view(), y);
            let fd = finite_diff_grad(|x| -softmax(Array1::from(x.to_vec()).view())[y].ln(), &z, FD_STEP).unwrap();
            assert!(relative_error(g.as_slice().unwrap(), &fd) < 1e-5);
        }
    }

    #[test]
    fn kl_matches_formula() {
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let got = kl_div(array![0.5, 0.5].view(), array![0.9, 0.1].view());
        assert!(close(got, expected, 1e-15));
        // 0.5108256237659907
        assert!(close(got, 0.510_825_623_765_990_7, 1e-14));
    }

    #[test]
    fn cosine_cases() {
        let v = array![0.3, -2.0, 1.0];
        assert!(close(cosine_sim(v.view(), v.view()), 1.0, 1e-15));
        assert_eq!(cosine_sim(array![1.0, 0.0].view(), array![0.0, 1.0].view()), 0.0);
        let got = cosine_sim(array![1.0, 1.0].view(), array![1.0, 0.0].view());
        assert!(close(got, 1.0 / 2f64.sqrt(), 1e-15));
        assert_eq!(
            cosine_sim(array![0.0, 0.0].view(), v.view().slice(ndarray::s![..2])),
            0.0
        );
    }

    #[test]
    fn fd_simple_functions() {
        let g = finite_diff_grad(|x| x.iter().sum(), &[0.3, -7.0, 2.0], FD_STEP).unwrap();
        assert!(g.iter().all(|v| close(*v, 1.0, 1e-9)));
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], FD_STEP).unwrap();
        assert!(close(g[0], 2.0, 1e-8) && close(g[1], 4.0, 1e-8));
        assert!(finite_diff_grad(|x| x[0].ln(), &[0.0], FD_STEP).is_err());
    }

    #[test]
    fn argmax_first_on_ties() {
        assert_eq!(argmax(array![0.5, 0.5].view()), 0);
        assert_eq!(argmax(array![0.1, 0.7, 0.7].view()), 1);
    }
}
