use super::{Scalar, Tensor};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<T: Scalar>(mut f: impl FnMut(&Tensor<T>) -> T, x: &Tensor<T>, h: T) -> Tensor<T> {
    assert!(h > T::zero(), "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (h + h));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("same shape as input")
}

/// Largest elementwise `|a - n| / max(|a|, 1e-6)`.
pub fn max_rel_error<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| {
            let (a, n) = (a.to_f64().unwrap(), n.to_f64().unwrap());
            (a - n).abs() / a.abs().max(1e-6)
        })
        .fold(0.0, f64::max)
}
