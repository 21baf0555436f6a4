use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{LayerSpec, Params};
use crate::{Error, Result, Tensor};

/// Width of the feature emission for the standard digit architecture.
pub const EMISSION_DIM: usize = 3136;
/// Flattened convolutional output feeding the emission layer.
pub const FLATTEN_DIM: usize = 576;
pub const NUM_CLASSES: usize = 10;

/// Scores and feature emission for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[batch, classes]` softmax probabilities.
    pub scores: Tensor,
    /// `[batch, emission_dim]` activations of the emission layer.
    pub emission: Tensor,
}

/// Gradients with the same layout as [`CnnModel::params`].
pub type Grads = Vec<Params>;

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    params: Vec<Params>,
    emission_layer: usize,
    // derived
    shapes: Vec<Vec<usize>>,
    param_index: Vec<Option<usize>>,
    emission_output: usize,
}

impl CnnModel {
    /// The 28×28 digit network:
    /// conv5×5/8 → relu → pool2 → conv3×3/16 (pad 1) → relu → pool2 →
    /// flatten (576) → fc 3136 → relu → fc 10 → softmax.
    pub fn digit_layers() -> Vec<LayerSpec> {
        vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out_channels: 8,
                kernel: 5,
                padding: 0,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Conv2d {
                in_channels: 8,
                out_channels: 16,
                kernel: 3,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::MaxPool { window: 2 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: FLATTEN_DIM,
                out_dim: EMISSION_DIM,
            },
            LayerSpec::Relu,
            LayerSpec::Dense {
                in_dim: EMISSION_DIM,
                out_dim: NUM_CLASSES,
            },
            LayerSpec::Softmax,
        ]
    }

    /// Freshly initialized digit network.
    pub fn digit(seed: u64) -> Self {
        Self::initialized([1, 28, 28], Self::digit_layers(), 7, seed)
            .expect("digit architecture is valid")
    }

    /// Build with He-uniform weights, `U(±√(6/fan_in))`, and zero biases.
    pub fn initialized(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        emission_layer: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = layers
            .iter()
            .filter_map(|l| {
                let (ws, bs) = l.param_shapes()?;
                let fan_in = l.fan_in()?;
                let limit = (6.0 / fan_in as f64).sqrt();
                let n: usize = ws.iter().product();
                let w = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
                Some(Params {
                    weight: Tensor::new(ws, w).ok()?,
                    bias: Tensor::zeros(&bs),
                })
            })
            .collect();
        Self::from_parts(input_shape, layers, params, emission_layer)
    }

    /// Validate and assemble a model from explicit weights.
    pub fn from_parts(
        input_shape: [usize; 3],
        layers: Vec<LayerSpec>,
        params: Vec<Params>,
        emission_layer: usize,
    ) -> Result<Self> {
        if layers.last() != Some(&LayerSpec::Softmax) {
            return Err(Error::invalid("the last layer must be softmax"));
        }
        if layers.iter().filter(|l| **l == LayerSpec::Softmax).count() != 1 {
            return Err(Error::invalid("softmax may only appear as the last layer"));
        }
        match layers.get(emission_layer) {
            Some(LayerSpec::Dense { .. }) => {}
            _ => {
                return Err(Error::invalid(format!(
                    "emission layer {emission_layer} is not a dense layer"
                )))
            }
        }

        let mut shapes = vec![input_shape.to_vec()];
        for (i, layer) in layers.iter().enumerate() {
            let next = layer
                .output_shape(&shapes[i])
                .map_err(|e| Error::dim(format!("layer {i}: {e}")))?;
            shapes.push(next);
        }

        let mut param_index = Vec::with_capacity(layers.len());
        let mut next_param = 0;
        for layer in &layers {
            if layer.has_params() {
                param_index.push(Some(next_param));
                next_param += 1;
            } else {
                param_index.push(None);
            }
        }
        if params.len() != next_param {
            return Err(Error::dim(format!(
                "{} parameterized layers but {} weight pairs",
                next_param,
                params.len()
            )));
        }
        for (layer, idx) in layers.iter().zip(&param_index) {
            if let (Some((ws, bs)), Some(i)) = (layer.param_shapes(), idx) {
                let p = &params[*i];
                if p.weight.shape() != ws.as_slice() || p.bias.shape() != bs.as_slice() {
                    return Err(Error::dim(format!(
                        "weights for {layer:?} have shapes {:?}/{:?}, expected {ws:?}/{bs:?}",
                        p.weight.shape(),
                        p.bias.shape()
                    )));
                }
            }
        }

        let emission_output = match layers.get(emission_layer + 1) {
            Some(LayerSpec::Relu) => emission_layer + 1,
            _ => emission_layer,
        };

        Ok(Self {
            input_shape,
            layers,
            params,
            emission_layer,
            shapes,
            param_index,
            emission_output,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Params] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Params] {
        &mut self.params
    }

    pub fn emission_layer(&self) -> usize {
        self.emission_layer
    }

    pub fn emission_dim(&self) -> usize {
        self.shapes[self.emission_output + 1][0]
    }

    pub fn num_classes(&self) -> usize {
        self.shapes.last().unwrap()[0]
    }

    /// Checks the emission layer is the 576 → 3136 projection.
    pub fn has_digit_emission(&self) -> bool {
        matches!(
            self.layers[self.emission_layer],
            LayerSpec::Dense {
                in_dim: FLATTEN_DIM,
                out_dim: EMISSION_DIM
            }
        )
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let s = batch.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::dim(format!(
                "batch shape {s:?} does not match model input [B, {}, {}, {}]",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        Ok(s[0])
    }

    fn layer_params(&self, i: usize) -> Option<&Params> {
        self.param_index[i].map(|p| &self.params[p])
    }

    pub fn forward(&self, batch: &Tensor) -> Result<ForwardOutput> {
        let n = self.check_batch(batch)?;
        let mut act = batch.data().to_vec();
        let mut emission = None;
        for (i, layer) in self.layers.iter().enumerate() {
            act = layer.forward(self.layer_params(i), &act, n, &self.shapes[i]);
            if i == self.emission_output {
                emission = Some(act.clone());
            }
        }
        let emission = emission.expect("emission layer precedes softmax");
        Ok(ForwardOutput {
            scores: Tensor::new(vec![n, self.num_classes()], act)?,
            emission: Tensor::new(vec![n, self.emission_dim()], emission)?,
        })
    }

    /// Class predictions by maximum score, first index on ties.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let out = self.forward(batch)?;
        let k = self.num_classes();
        Ok(out.scores.data().chunks_exact(k).map(argmax).collect())
    }

    /// Mean cross-entropy loss and its gradient for every weight.
    pub fn backward(&self, batch: &Tensor, labels: &[usize]) -> Result<(f64, Grads)> {
        let n = self.check_batch(batch)?;
        if labels.len() != n {
            return Err(Error::dim(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        let k = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid(format!("label {bad} outside [0, {k})")));
        }

        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(batch.data().to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let out = layer.forward(self.layer_params(i), &acts[i], n, &self.shapes[i]);
            acts.push(out);
        }

        let probs = acts.last().unwrap();
        let scale = 1.0 / n as f64;
        let mut loss = 0.0;
        // Softmax and cross-entropy fold into (p - onehot) / n at the logits.
        let mut grad = probs.clone();
        for (b, &label) in labels.iter().enumerate() {
            loss -= probs[b * k + label].ln();
            grad[b * k + label] -= 1.0;
        }
        loss *= scale;
        for g in &mut grad {
            *g *= scale;
        }

        let mut grads = self.zero_grads();
        let last = self.layers.len() - 1;
        for i in (0..last).rev() {
            let g_slot = self.param_index[i].map(|p| &mut grads[p]);
            grad = self.layers[i].backward(
                self.layer_params(i),
                g_slot,
                &acts[i],
                &acts[i + 1],
                &grad,
                n,
                &self.shapes[i],
            );
        }
        Ok((loss, grads))
    }

    pub fn zero_grads(&self) -> Grads {
        self.params
            .iter()
            .map(|p| Params {
                weight: Tensor::zeros(p.weight.shape()),
                bias: Tensor::zeros(p.bias.shape()),
            })
            .collect()
    }

    /// `w ← w − lr·g` for every weight and bias.
    pub fn sgd_step(&mut self, grads: &[Params], learning_rate: f64) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::dim("gradient list does not match model"));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if p.weight.shape() != g.weight.shape() || p.bias.shape() != g.bias.shape() {
                return Err(Error::dim("gradient shapes do not match weights"));
            }
        }
        if learning_rate == 0.0 {
            return Ok(());
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (w, d) in p.weight.data_mut().iter_mut().zip(g.weight.data()) {
                *w -= learning_rate * d;
            }
            for (w, d) in p.bias.data_mut().iter_mut().zip(g.bias.data()) {
                *w -= learning_rate * d;
            }
        }
        Ok(())
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 784).map(|_| rng.gen::<f64>()).collect();
        Tensor::new(vec![n, 1, 28, 28], data).unwrap()
    }

    fn zeroed_digit() -> CnnModel {
        let mut m = CnnModel::digit(0);
        for p in m.params_mut() {
            p.weight.data_mut().fill(0.0);
            p.bias.data_mut().fill(0.0);
        }
        m
    }

    #[test]
    fn digit_architecture_dims() {
        let m = CnnModel::digit(1);
        assert!(m.has_digit_emission());
        assert_eq!(m.emission_dim(), EMISSION_DIM);
        assert_eq!(m.num_classes(), 10);
        assert_eq!(m.params().len(), 4);
    }

    #[test]
    fn score_rows_sum_to_one_and_emission_non_negative() {
        let m = CnnModel::digit(3);
        let out = m.forward(&random_batch(3, 9)).unwrap();
        assert_eq!(out.scores.shape(), &[3, 10]);
        assert_eq!(out.emission.shape(), &[3, EMISSION_DIM]);
        for row in out.scores.data().chunks(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        assert!(out.emission.data().iter().all(|&v| v >= 0.0));
        assert!(out.scores.is_finite() && out.emission.is_finite());
    }

    #[test]
    fn zero_weights_give_uniform_scores_and_ln10_loss() {
        let m = zeroed_digit();
        let batch = random_batch(2, 4);
        let out = m.forward(&batch).unwrap();
        for &s in out.scores.data() {
            assert!((s - 0.1).abs() < 1e-15);
        }
        let (loss, _) = m.backward(&batch, &[3, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let m = CnnModel::digit(11);
        let b = random_batch(2, 5);
        assert_eq!(m.forward(&b).unwrap(), m.forward(&b).unwrap());
        assert_eq!(CnnModel::digit(11), m);
    }

    #[test]
    fn duplicated_sample_has_same_loss() {
        let m = CnnModel::digit(2);
        let one = random_batch(1, 6);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let two = Tensor::new(vec![2, 1, 28, 28], two).unwrap();
        let (l1, _) = m.backward(&one, &[4]).unwrap();
        let (l2, _) = m.backward(&two, &[4, 4]).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn batch_shape_and_label_errors() {
        let m = CnnModel::digit(0);
        let bad = Tensor::zeros(&[1, 1, 27, 28]);
        assert!(matches!(m.forward(&bad), Err(Error::Dimension(_))));
        let ok = Tensor::zeros(&[1, 1, 28, 28]);
        assert!(matches!(m.backward(&ok, &[10]), Err(Error::Validation(_))));
    }

    #[test]
    fn sgd_step_arithmetic() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: 1,
                out_dim: 1,
            },
            LayerSpec::Softmax,
        ];
        let params = vec![Params {
            weight: Tensor::filled(&[1, 1], 1.0),
            bias: Tensor::filled(&[1], 1.0),
        }];
        let mut m = CnnModel::from_parts([1, 1, 1], layers, params, 1).unwrap();
        let g = vec![Params {
            weight: Tensor::filled(&[1, 1], 0.5),
            bias: Tensor::filled(&[1], 0.5),
        }];
        let before = m.clone();
        m.sgd_step(&g, 0.0).unwrap();
        assert_eq!(m, before);
        m.sgd_step(&g, 0.01).unwrap();
        assert!((m.params()[0].weight.data()[0] - 0.995).abs() < 1e-15);
    }

    #[test]
    fn rejects_inconsistent_stacks() {
        let layers = vec![
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_dim: 5,
                out_dim: 2,
            },
            LayerSpec::Softmax,
        ];
        assert!(CnnModel::initialized([1, 2, 2], layers.clone(), 1, 0).is_err());
        assert!(CnnModel::initialized([1, 1, 5], layers.clone(), 0, 0).is_err());
        let no_softmax = layers[..2].to_vec();
        assert!(CnnModel::initialized([1, 1, 5], no_softmax, 1, 0).is_err());
        assert!(CnnModel::initialized([1, 1, 5], layers, 1, 0).is_ok());
    }
}
