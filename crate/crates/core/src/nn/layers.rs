//! Layer kinds and their batched forward/backward kernels.
//!
//! Activations are row-major `[batch, ...]` buffers. Per-sample shapes are
//! `[channels, height, width]` for spatial layers and `[features]` after
//! flattening.

use serde::{Deserialize, Serialize};

use crate::tensor::{matmul_ab, matmul_abt, matmul_atb};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
    },
    Flatten,
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Softmax,
}

/// Weight and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. })
    }

    /// Weight and bias shapes for parameterized layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            )),
            LayerSpec::Dense { in_dim, out_dim } => Some((vec![out_dim, in_dim], vec![out_dim])),
            _ => None,
        }
    }

    /// Inputs feeding each output unit.
    pub fn fan_in(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => Some(in_channels * kernel * kernel),
            LayerSpec::Dense { in_dim, .. } => Some(in_dim),
            _ => None,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let [c, h, w] = spatial(input, "conv2d")?;
                if c != in_channels {
                    return Err(Error::dim(format!(
                        "conv2d expects {in_channels} input channels, got {c}"
                    )));
                }
                if kernel == 0 || h + 2 * padding < kernel || w + 2 * padding < kernel {
                    return Err(Error::dim(format!(
                        "conv2d kernel {kernel} does not fit {h}x{w} with padding {padding}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    h + 2 * padding - kernel + 1,
                    w + 2 * padding - kernel + 1,
                ])
            }
            LayerSpec::MaxPool { window } => {
                let [c, h, w] = spatial(input, "maxpool")?;
                if window == 0 || h < window || w < window {
                    return Err(Error::dim(format!(
                        "maxpool window {window} does not fit {h}x{w}"
                    )));
                }
                Ok(vec![c, h / window, w / window])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::Dense { in_dim, out_dim } => {
                if input.len() != 1 || input[0] != in_dim {
                    return Err(Error::dim(format!(
                        "dense expects [{in_dim}], got {input:?}"
                    )));
                }
                Ok(vec![out_dim])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::Softmax => {
                if input.len() != 1 {
                    return Err(Error::dim(format!(
                        "softmax expects a vector, got {input:?}"
                    )));
                }
                Ok(input.to_vec())
            }
        }
    }

    /// Batched forward pass. `input` holds `batch` samples of `in_shape`.
    pub fn forward(
        &self,
        params: Option<&Params>,
        input: &[f64],
        batch: usize,
        in_shape: &[usize],
    ) -> Vec<f64> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let p = params.expect("conv2d without params");
                let geo = ConvGeometry::new(in_channels, in_shape[1], in_shape[2], kernel, padding);
                conv_forward(&geo, out_channels, p, input, batch)
            }
            LayerSpec::Relu => input.iter().map(|&v| v.max(0.0)).collect(),
            LayerSpec::MaxPool { window } => {
                maxpool_forward(input, batch, in_shape[0], in_shape[1], in_shape[2], window)
            }
            LayerSpec::Flatten => input.to_vec(),
            LayerSpec::Dense { in_dim, out_dim } => {
                let p = params.expect("dense without params");
                let mut out = vec![0.0; batch * out_dim];
                matmul_abt(input, p.weight.data(), &mut out, batch, in_dim, out_dim);
                let bias = p.bias.data();
                for row in out.chunks_exact_mut(out_dim) {
                    for (o, b) in row.iter_mut().zip(bias) {
                        *o += b;
                    }
                }
                out
            }
            LayerSpec::Softmax => {
                let n = in_shape[0];
                let mut out = input.to_vec();
                for row in out.chunks_exact_mut(n) {
                    softmax_in_place(row);
                }
                out
            }
        }
    }

    /// Batched backward pass given the layer's forward input and output.
    ///
    /// Returns the gradient with respect to the input. Parameter gradients are
    /// accumulated into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward(
        &self,
        params: Option<&Params>,
        grads: Option<&mut Params>,
        input: &[f64],
        output: &[f64],
        grad_out: &[f64],
        batch: usize,
        in_shape: &[usize],
    ) -> Vec<f64> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                padding,
            } => {
                let p = params.expect("conv2d without params");
                let g = grads.expect("conv2d without grad buffer");
                let geo = ConvGeometry::new(in_channels, in_shape[1], in_shape[2], kernel, padding);
                conv_backward(&geo, out_channels, p, g, input, grad_out, batch)
            }
            LayerSpec::Relu => input
                .iter()
                .zip(grad_out)
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect(),
            LayerSpec::MaxPool { window } => maxpool_backward(
                input,
                grad_out,
                batch,
                in_shape[0],
                in_shape[1],
                in_shape[2],
                window,
            ),
            LayerSpec::Flatten => grad_out.to_vec(),
            LayerSpec::Dense { in_dim, out_dim } => {
                let p = params.expect("dense without params");
                let g = grads.expect("dense without grad buffer");
                matmul_atb(
                    grad_out,
                    input,
                    g.weight.data_mut(),
                    out_dim,
                    batch,
                    in_dim,
                    true,
                );
                let gb = g.bias.data_mut();
                for row in grad_out.chunks_exact(out_dim) {
                    for (b, v) in gb.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                let mut grad_in = vec![0.0; batch * in_dim];
                matmul_ab(
                    grad_out,
                    p.weight.data(),
                    &mut grad_in,
                    batch,
                    out_dim,
                    in_dim,
                    false,
                );
                grad_in
            }
            LayerSpec::Softmax => {
                let n = in_shape[0];
                let mut grad_in = vec![0.0; grad_out.len()];
                for ((gi, go), p) in grad_in
                    .chunks_exact_mut(n)
                    .zip(grad_out.chunks_exact(n))
                    .zip(output.chunks_exact(n))
                {
                    let dot: f64 = go.iter().zip(p).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        gi[j] = p[j] * (go[j] - dot);
                    }
                }
                grad_in
            }
        }
    }
}

fn spatial(input: &[usize], what: &str) -> Result<[usize; 3]> {
    match *input {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::dim(format!(
            "{what} expects [C, H, W], got {input:?}"
        ))),
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn new(channels: usize, height: usize, width: usize, kernel: usize, padding: usize) -> Self {
        Self {
            channels,
            height,
            width,
            kernel,
            padding,
            out_h: height + 2 * padding - kernel + 1,
            out_w: width + 2 * padding - kernel + 1,
        }
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Visit `(column row, output position, input offset)` for every
    /// in-bounds tap of the kernel.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, p) = (self.kernel as isize, self.padding as isize);
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * self.kernel + ky as usize) * self.kernel + kx as usize;
                    for oy in 0..self.out_h as isize {
                        let iy = oy + ky - p;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..self.out_w as isize {
                            let ix = ox + kx - p;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let pos = oy as usize * self.out_w + ox as usize;
                            let src = (c * self.height + iy as usize) * self.width + ix as usize;
                            f(row, pos, src);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], col: &mut [f64]) {
        col.fill(0.0);
        let n = self.out_len();
        self.for_each_tap(|row, pos, src| col[row * n + pos] = x[src]);
    }

    fn col2im_add(&self, col: &[f64], dx: &mut [f64]) {
        let n = self.out_len();
        self.for_each_tap(|row, pos, src| dx[src] += col[row * n + pos]);
    }
}

fn conv_forward(
    geo: &ConvGeometry,
    out_channels: usize,
    p: &Params,
    input: &[f64],
    batch: usize,
) -> Vec<f64> {
    let (patch, npos) = (geo.patch_len(), geo.out_len());
    let mut col = vec![0.0; patch * npos];
    let mut out = vec![0.0; batch * out_channels * npos];
    for (x, y) in input
        .chunks_exact(geo.in_len())
        .zip(out.chunks_exact_mut(out_channels * npos))
    {
        geo.im2col(x, &mut col);
        matmul_ab(p.weight.data(), &col, y, out_channels, patch, npos, false);
        for (plane, b) in y.chunks_exact_mut(npos).zip(p.bias.data()) {
            for v in plane {
                *v += b;
            }
        }
    }
    out
}

fn conv_backward(
    geo: &ConvGeometry,
    out_channels: usize,
    p: &Params,
    g: &mut Params,
    input: &[f64],
    grad_out: &[f64],
    batch: usize,
) -> Vec<f64> {
    let (patch, npos) = (geo.patch_len(), geo.out_len());
    let mut col = vec![0.0; patch * npos];
    let mut dcol = vec![0.0; patch * npos];
    let mut grad_in = vec![0.0; batch * geo.in_len()];
    for ((x, dy), dx) in input
        .chunks_exact(geo.in_len())
        .zip(grad_out.chunks_exact(out_channels * npos))
        .zip(grad_in.chunks_exact_mut(geo.in_len()))
    {
        geo.im2col(x, &mut col);
        // dW += dY · colᵀ
        accumulate_abt(dy, &col, g.weight.data_mut(), out_channels, npos, patch);
        for (b, plane) in g.bias.data_mut().iter_mut().zip(dy.chunks_exact(npos)) {
            *b += plane.iter().sum::<f64>();
        }
        matmul_atb(
            p.weight.data(),
            dy,
            &mut dcol,
            patch,
            out_channels,
            npos,
            false,
        );
        geo.col2im_add(&dcol, dx);
    }
    grad_in
}

/// `c += a · bᵀ` for `a: m×k`, `b: n×k`.
fn accumulate_abt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let mut tmp = vec![0.0; m * n];
    matmul_abt(a, b, &mut tmp, m, k, n);
    for (ci, ti) in c.iter_mut().zip(&tmp) {
        *ci += ti;
    }
}

fn maxpool_forward(
    input: &[f64],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    for plane in input.chunks_exact(h * w).take(batch * c) {
        for oy in 0..oh {
            for ox in 0..ow {
                let (_, v) = pool_argmax(plane, w, oy, ox, window);
                out.push(v);
            }
        }
    }
    out
}

fn maxpool_backward(
    input: &[f64],
    grad_out: &[f64],
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    window: usize,
) -> Vec<f64> {
    let (oh, ow) = (h / window, w / window);
    let mut grad_in = vec![0.0; input.len()];
    for ((plane, dplane), gplane) in input
        .chunks_exact(h * w)
        .zip(grad_in.chunks_exact_mut(h * w))
        .zip(grad_out.chunks_exact(oh * ow))
        .take(batch * c)
    {
        for oy in 0..oh {
            for ox in 0..ow {
                let (idx, _) = pool_argmax(plane, w, oy, ox, window);
                dplane[idx] += gplane[oy * ow + ox];
            }
        }
    }
    grad_in
}

/// First maximum in scan order wins.
fn pool_argmax(plane: &[f64], w: usize, oy: usize, ox: usize, window: usize) -> (usize, f64) {
    let mut best = (oy * window * w + ox * window, f64::NEG_INFINITY);
    for dy in 0..window {
        for dx in 0..window {
            let idx = (oy * window + dy) * w + ox * window + dx;
            if plane[idx] > best.1 {
                best = (idx, plane[idx]);
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(spec: &LayerSpec, f: impl Fn(usize) -> f64) -> Params {
        let (ws, bs) = spec.param_shapes().unwrap();
        let wn: usize = ws.iter().product();
        let bn: usize = bs.iter().product();
        Params {
            weight: Tensor::new(ws, (0..wn).map(&f).collect()).unwrap(),
            bias: Tensor::new(bs, (0..bn).map(|i| f(i + wn)).collect()).unwrap(),
        }
    }

    /// Direct convolution, independent of im2col.
    fn conv_naive(
        x: &[f64],
        p: &Params,
        c: usize,
        h: usize,
        w: usize,
        o: usize,
        k: usize,
        pad: usize,
    ) -> Vec<f64> {
        let (oh, ow) = (h + 2 * pad - k + 1, w + 2 * pad - k + 1);
        let wt = p.weight.data();
        let mut out = vec![0.0; o * oh * ow];
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = p.bias.data()[oc];
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - pad as isize;
                                let ix = ox as isize + kx as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                s += wt[((oc * c + ic) * k + ky) * k + kx]
                                    * x[(ic * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_convolution() {
        for &(pad, k) in &[(0, 3), (1, 3), (0, 5), (2, 3)] {
            let spec = LayerSpec::Conv2d {
                in_channels: 2,
                out_channels: 3,
                kernel: k,
                padding: pad,
            };
            let p = params(&spec, |i| ((i * 7 % 13) as f64 - 6.0) / 10.0);
            let x: Vec<f64> = (0..2 * 2 * 7 * 6).map(|i| (i as f64 * 0.3).sin()).collect();
            let out = spec.forward(Some(&p), &x, 2, &[2, 7, 6]);
            let per = out.len() / 2;
            for b in 0..2 {
                let want = conv_naive(&x[b * 84..(b + 1) * 84], &p, 2, 7, 6, 3, k, pad);
                for (a, w) in out[b * per..(b + 1) * per].iter().zip(&want) {
                    assert!((a - w).abs() < 1e-12, "pad {pad} k {k}");
                }
            }
        }
    }

    #[test]
    fn output_shapes_chain() {
        let conv = LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: 8,
            kernel: 5,
            padding: 0,
        };
        assert_eq!(conv.output_shape(&[1, 28, 28]).unwrap(), vec![8, 24, 24]);
        assert_eq!(
            LayerSpec::MaxPool { window: 2 }
                .output_shape(&[8, 24, 24])
                .unwrap(),
            vec![8, 12, 12]
        );
        assert_eq!(
            LayerSpec::Flatten.output_shape(&[16, 6, 6]).unwrap(),
            vec![576]
        );
        assert!(conv.output_shape(&[2, 28, 28]).is_err());
        assert!(LayerSpec::Dense {
            in_dim: 5,
            out_dim: 2
        }
        .output_shape(&[4])
        .is_err());
    }

    #[test]
    fn maxpool_routes_gradient_to_first_max() {
        let x = vec![1.0, 3.0, 3.0, 0.0];
        let spec = LayerSpec::MaxPool { window: 2 };
        assert_eq!(spec.forward(None, &x, 1, &[1, 2, 2]), vec![3.0]);
        let g = spec.backward(None, None, &x, &[3.0], &[1.0], 1, &[1, 2, 2]);
        assert_eq!(g, vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = vec![1000.0, 0.0, -1000.0, 0.5, 0.25, 0.125];
        let out = LayerSpec::Softmax.forward(None, &x, 2, &[3]);
        for row in out.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|v| v.is_finite()));
        }
    }
}
