use super::tensor::{Real, Tensor};
use super::NnError;

/// Mean Huber loss and its gradient with respect to `pred`.
pub fn huber_loss<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    delta: f64,
) -> Result<(f64, Tensor<T>), NnError> {
    if pred.shape != target.shape {
        return Err(NnError::ShapeMismatch {
            layer: "huber_loss".into(),
            expected: pred.shape.clone(),
            found: target.shape.clone(),
        });
    }
    let n = pred.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&pred.shape);
    for ((g, &p), &t) in grad.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let e = p.to_f64() - t.to_f64();
        if e.abs() <= delta {
            loss += 0.5 * e * e;
            *g = T::from_f64(e / n);
        } else {
            loss += delta * (e.abs() - 0.5 * delta);
            *g = T::from_f64(delta * e.signum() / n);
        }
    }
    Ok((loss / n, grad))
}
