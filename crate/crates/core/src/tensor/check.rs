use super::Tensor;

/// Central finite-difference gradient of a scalar function of one tensor.
///
/// Uses only forward evaluations of `f`, so it stays independent of the
/// tape's backward rules.
pub fn numeric_gradient(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// `|a - b| / max(|a| + |b|, 1e-6)`: relative for ordinary magnitudes, with a
/// small floor so that two near-zero gradients compare as equal.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

/// Worst relative error between `analytic` gradients and central differences
/// of `loss`, probed at up to `per_tensor` random coordinates of each tensor.
/// The denominator floor grows with the loss magnitude, matching the
/// round-off level of the difference quotient.
pub fn sampled_gradient_error<R: rand::Rng + ?Sized>(
    tensors: &[Tensor],
    analytic: &[Tensor],
    loss: impl Fn(&[Tensor]) -> f64,
    per_tensor: usize,
    h: f64,
    rng: &mut R,
) -> f64 {
    let mut probe = tensors.to_vec();
    let mut worst: f64 = 0.0;
    for (k, t) in tensors.iter().enumerate() {
        let picks: Vec<usize> = if t.len() <= per_tensor {
            (0..t.len()).collect()
        } else {
            rand::seq::index::sample(rng, t.len(), per_tensor).into_vec()
        };
        for i in picks {
            let orig = t.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let up = loss(&probe);
            probe[k].data_mut()[i] = orig - h;
            let down = loss(&probe);
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[i];
            let floor = 1e-6 * up.abs().max(down.abs()).max(1.0);
            worst = worst.max((numeric - a).abs() / (numeric.abs() + a.abs()).max(floor));
        }
    }
    worst
}
