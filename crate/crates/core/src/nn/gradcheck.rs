//! Central finite-difference checks of the analytic gradients.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{LayerSpec, Params};
use super::model::CnnModel;
use crate::{Error, Result, Tensor};

pub const FD_STEP: f64 = 1e-5;
const BATCH: usize = 2;
/// Inputs to kinked layers are kept at least this far from a kink.
const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Default)]
struct Tally {
    max_rel: f64,
    max_abs: f64,
    checked: usize,
}

impl Tally {
    fn add(&mut self, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        // Entries that are both ~0 compare absolutely.
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-6);
        self.max_abs = self.max_abs.max(abs);
        self.max_rel = self.max_rel.max(rel);
        self.checked += 1;
    }

    fn report(self, tolerance: f64) -> GradCheckReport {
        GradCheckReport {
            max_rel_error: self.max_rel,
            max_abs_error: self.max_abs,
            checked: self.checked,
            tolerance,
            passed: self.max_rel < tolerance,
        }
    }
}

fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

/// Check one layer on a random instance with per-sample input `input_shape`.
///
/// The scalar objective is `Σ output ⊙ R` for a fixed random `R`. A softmax
/// layer is checked twice: through that objective, and as the fused
/// softmax/cross-entropy head used in training.
pub fn grad_check(
    layer: &LayerSpec,
    input_shape: &[usize],
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out_shape = layer.output_shape(input_shape)?;
    let in_len: usize = input_shape.iter().product::<usize>() * BATCH;
    let out_len: usize = out_shape.iter().product::<usize>() * BATCH;

    let mut input: Vec<f64> = (0..in_len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    match layer {
        LayerSpec::Relu => {
            for v in &mut input {
                while v.abs() < KINK_MARGIN {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
        }
        LayerSpec::MaxPool { window } => separate_pool_maxima(&mut input, input_shape, *window),
        _ => {}
    }

    let mut params = layer.param_shapes().map(|(ws, bs)| {
        let mut t = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        Params {
            weight: t(ws),
            bias: t(bs),
        }
    });
    let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let objective = |p: Option<&Params>, x: &[f64]| -> f64 {
        layer
            .forward(p, x, BATCH, input_shape)
            .iter()
            .zip(&weights)
            .map(|(o, r)| o * r)
            .sum()
    };

    let output = layer.forward(params.as_ref(), &input, BATCH, input_shape);
    let mut grads = params.as_ref().map(|p| Params {
        weight: Tensor::zeros(p.weight.shape()),
        bias: Tensor::zeros(p.bias.shape()),
    });
    let grad_in = layer.backward(
        params.as_ref(),
        grads.as_mut(),
        &input,
        &output,
        &weights,
        BATCH,
        input_shape,
    );

    let mut tally = Tally::default();
    for i in 0..in_len {
        let numeric = central(
            |v| {
                let mut x = input.clone();
                x[i] = v;
                objective(params.as_ref(), &x)
            },
            input[i],
        );
        tally.add(grad_in[i], numeric);
    }
    if let (Some(p), Some(g)) = (params.as_mut(), grads.as_ref()) {
        for (which, analytic) in [(0, g.weight.data()), (1, g.bias.data())] {
            for (i, &a) in analytic.iter().enumerate() {
                let x0 = if which == 0 {
                    p.weight.data()[i]
                } else {
                    p.bias.data()[i]
                };
                let numeric = central(
                    |v| {
                        let slot = if which == 0 {
                            &mut p.weight.data_mut()[i]
                        } else {
                            &mut p.bias.data_mut()[i]
                        };
                        *slot = v;
                        objective(Some(p), &input)
                    },
                    x0,
                );
                if which == 0 {
                    p.weight.data_mut()[i] = x0;
                } else {
                    p.bias.data_mut()[i] = x0;
                }
                tally.add(a, numeric);
            }
        }
    }

    if *layer == LayerSpec::Softmax {
        softmax_xent(&input, input_shape[0], &mut rng, &mut tally);
    }
    Ok(tally.report(tolerance))
}

/// Mean cross-entropy over softmax against `(p − onehot) / batch`.
fn softmax_xent(logits: &[f64], classes: usize, rng: &mut ChaCha8Rng, tally: &mut Tally) {
    let labels: Vec<usize> = (0..BATCH).map(|_| rng.gen_range(0..classes)).collect();
    let loss = |z: &[f64]| -> f64 {
        let p = LayerSpec::Softmax.forward(None, z, BATCH, &[classes]);
        labels
            .iter()
            .enumerate()
            .map(|(b, &l)| -p[b * classes + l].ln())
            .sum::<f64>()
            / BATCH as f64
    };
    let p = LayerSpec::Softmax.forward(None, logits, BATCH, &[classes]);
    for i in 0..logits.len() {
        let (b, j) = (i / classes, i % classes);
        let onehot = if labels[b] == j { 1.0 } else { 0.0 };
        let analytic = (p[i] - onehot) / BATCH as f64;
        let numeric = central(
            |v| {
                let mut z = logits.to_vec();
                z[i] = v;
                loss(&z)
            },
            logits[i],
        );
        tally.add(analytic, numeric);
    }
}

/// Spread pooling windows so the maximum leads the runner-up by a margin.
fn separate_pool_maxima(input: &mut [f64], shape: &[usize], window: usize) {
    let (h, w) = (shape[1], shape[2]);
    for plane in input.chunks_exact_mut(h * w) {
        for oy in 0..h / window {
            for ox in 0..w / window {
                let mut idx: Vec<usize> = (0..window * window)
                    .map(|k| (oy * window + k / window) * w + ox * window + k % window)
                    .collect();
                idx.sort_by(|&a, &b| plane[b].total_cmp(&plane[a]));
                plane[idx[0]] = plane[idx[0]].max(plane[idx[1]]) + 10.0 * KINK_MARGIN;
            }
        }
    }
}

/// Check every weight gradient of a whole model on one batch.
pub fn grad_check_model(
    model: &CnnModel,
    batch: &Tensor,
    labels: &[usize],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = model.backward(batch, labels)?;
    let mut probe = model.clone();
    let mut tally = Tally::default();
    for (li, g) in grads.iter().enumerate() {
        for which in 0..2 {
            let analytic = if which == 0 {
                g.weight.data()
            } else {
                g.bias.data()
            };
            for (i, &a) in analytic.iter().enumerate() {
                let x0 = slot(&mut probe, li, which, i);
                let mut loss_at = |v: f64| -> Result<f64> {
                    *slot_mut(&mut probe, li, which, i) = v;
                    Ok(probe.backward(batch, labels)?.0)
                };
                let plus = loss_at(x0 + FD_STEP)?;
                let minus = loss_at(x0 - FD_STEP)?;
                *slot_mut(&mut probe, li, which, i) = x0;
                tally.add(a, (plus - minus) / (2.0 * FD_STEP));
            }
        }
    }
    if tally.checked == 0 {
        return Err(Error::invalid("model has no parameters to check"));
    }
    Ok(tally.report(tolerance))
}

fn slot(m: &mut CnnModel, layer: usize, which: usize, i: usize) -> f64 {
    *slot_mut(m, layer, which, i)
}

fn slot_mut(m: &mut CnnModel, layer: usize, which: usize, i: usize) -> &mut f64 {
    let p = &mut m.params_mut()[layer];
    if which == 0 {
        &mut p.weight.data_mut()[i]
    } else {
        &mut p.bias.data_mut()[i]
    }
}
