//! Central finite differences, for checking analytic gradients.
//!
//! These helpers only evaluate the function being checked; they share no code
//! with [`Graph::backward`](super::Graph::backward).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, NumericsError, Tensor, Var};

/// Step used by the checks in this crate.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`], so that gradients that are
/// numerically zero compare by absolute difference.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn numeric_gradient<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let plus = f(&probe);
            probe[i] = orig - h;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Checks every input gradient of a graph computation.
///
/// `build` records an op on fresh leaves holding `inputs` and returns its
/// output `y`. The checked scalar is `sum(y * r)` for a fixed random `r`
/// drawn from `seed`, so every output element contributes. Returns the worst
/// [`relative_error`] over all input elements.
pub fn check_graph<F>(inputs: &[Tensor], seed: u64, build: F) -> Result<f64, NumericsError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, NumericsError>,
{
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = build(&mut g, &leaves)?;
    let shape = g.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::new(
        shape.clone(),
        (0..g.value(y).len())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )?;
    let rv = g.constant(r.clone());
    let prod = g.mul(y, rv)?;
    let loss = g.sum(prod)?;
    let mut grads = g.backward(loss)?;

    let value_at = |values: &[Tensor]| -> Result<f64, NumericsError> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = values.iter().map(|t| g.constant(t.clone())).collect();
        let y = build(&mut g, &leaves)?;
        Ok(g.value(y)
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a * b)
            .sum())
    };
    let mut worst = 0.0f64;
    for (k, leaf) in leaves.iter().enumerate() {
        let analytic = grads
            .take(*leaf)
            .unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        let mut failure = None;
        let numeric = numeric_gradient(
            |x| {
                let mut probe = inputs.to_vec();
                probe[k] =
                    Tensor::new(inputs[k].shape().to_vec(), x.to_vec()).expect("same length");
                value_at(&probe).unwrap_or_else(|e| {
                    failure = Some(e);
                    f64::NAN
                })
            },
            inputs[k].data(),
            DEFAULT_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}
