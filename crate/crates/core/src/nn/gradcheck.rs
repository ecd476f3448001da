use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Gradients, Graph};
use super::tensor::Tensor;
use super::NnError;

/// Result of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Location of the worst entry, e.g. `param 2 [17]` or `input 0 [3]`.
    pub worst: String,
    pub checked: usize,
}

const REL_FLOOR: f64 = 1e-6;
/// Below this the first step is trusted and no smaller step is tried.
const RETRY_ABOVE: f64 = 1e-7;

/// Relative error between `analytic` and central differences of `f(h) = loss(x + h)`.
///
/// A step that straddles a ReLU or max-pool kink gives a meaningless difference,
/// so the step is shrunk twice by 10x and the best agreement is kept. A wrong
/// gradient disagrees at every step size.
pub fn fd_rel_error<E>(analytic: f64, eps: f64, mut f: impl FnMut(f64) -> Result<f64, E>) -> Result<f64, E> {
    let mut best = f64::INFINITY;
    let mut h = eps;
    for _ in 0..3 {
        let n = (f(h)? - f(-h)?) / (2.0 * h);
        let rel = (analytic - n).abs() / analytic.abs().max(n.abs()).max(REL_FLOOR);
        if rel.is_finite() {
            best = best.min(rel);
        }
        if best < RETRY_ABOVE {
            break;
        }
        h /= 10.0;
    }
    Ok(best)
}

fn head_weights(graph: &Graph<f64>, batch: usize) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9);
    graph
        .outputs
        .iter()
        .map(|&o| {
            let mut shape = vec![batch];
            shape.extend_from_slice(&graph.nodes[o].shape);
            let mut t = Tensor::zeros(&shape);
            t.data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            t
        })
        .collect()
}

fn scalar_head(graph: &Graph<f64>, inputs: &[&Tensor<f64>], weights: &[Tensor<f64>]) -> Result<f64, NnError> {
    let outs = graph.infer(inputs)?;
    Ok(outs
        .iter()
        .zip(weights)
        .map(|(o, w)| o.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>())
        .sum())
}

/// Analytic gradients of the scalar head `sum_i c_i * y_i` used by the checker.
pub fn head_gradients(graph: &Graph<f64>, inputs: &[&Tensor<f64>]) -> Result<Gradients<f64>, NnError> {
    let batch = inputs.first().map(|t| t.batch()).unwrap_or(0);
    let weights = head_weights(graph, batch);
    let (_, cache) = graph.forward(inputs)?;
    let grads: Vec<Option<&Tensor<f64>>> = weights.iter().map(Some).collect();
    graph.backward(&cache, &grads)
}

/// Compares `analytic` against central differences of the scalar head over every
/// parameter and input entry.
pub fn compare_gradients(
    graph: &Graph<f64>,
    inputs: &[&Tensor<f64>],
    analytic: &Gradients<f64>,
    eps: f64,
) -> Result<GradCheckReport, NnError> {
    let batch = inputs.first().map(|t| t.batch()).unwrap_or(0);
    let weights = head_weights(graph, batch);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut record = |rel: f64, label: String| {
        report.checked += 1;
        if rel > report.max_rel_error || !rel.is_finite() {
            report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
            report.worst = label;
        }
    };

    let mut probe = graph.clone();
    for p in 0..graph.params.len() {
        for k in 0..graph.params[p].len() {
            let orig = graph.params[p].data[k];
            let rel = fd_rel_error(analytic.params[p].data[k], eps, |h| {
                probe.params[p].data[k] = orig + h;
                scalar_head(&probe, inputs, &weights)
            })?;
            probe.params[p].data[k] = orig;
            record(rel, format!("param {p} [{k}]"));
        }
    }

    let mut owned: Vec<Tensor<f64>> = inputs.iter().map(|t| (*t).clone()).collect();
    for s in 0..owned.len() {
        for k in 0..owned[s].len() {
            let orig = owned[s].data[k];
            let rel = fd_rel_error(analytic.inputs[s].data[k], eps, |h| {
                owned[s].data[k] = orig + h;
                scalar_head(graph, &owned.iter().collect::<Vec<_>>(), &weights)
            })?;
            owned[s].data[k] = orig;
            record(rel, format!("input {s} [{k}]"));
        }
    }
    Ok(report)
}

/// Maximum relative error between backward and central differences (first step `eps`).
pub fn grad_check(graph: &Graph<f64>, inputs: &[&Tensor<f64>], eps: f64) -> Result<GradCheckReport, NnError> {
    let analytic = head_gradients(graph, inputs)?;
    compare_gradients(graph, inputs, &analytic, eps)
}
