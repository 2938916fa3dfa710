use super::Tensor;

/// Central-difference gradient estimate of a scalar function.
///
/// Each coordinate costs two evaluations of `f`:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    assert!(h > 0.0, "finite difference step must be positive");
    let base = x.data().to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let fp = f(&Tensor::new(x.shape().to_vec(), plus).expect("same shape"));
        let fm = f(&Tensor::new(x.shape().to_vec(), minus).expect("same shape"));
        out.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out).expect("same shape")
}

/// Relative error `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
///
/// The floor keeps the ratio meaningful when both gradients are near zero.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / a.norm().max(b.norm()).max(floor)
}
