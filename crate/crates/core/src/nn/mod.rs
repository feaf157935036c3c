//! Small feed-forward networks with hand-written reverse-mode gradients.
//!
//! A [`Network`] is a stack of [`Layer`]s acting on row-major batches
//! (`batch x width`). Weights live outside the network in one flat `f64`
//! slice so optimizers and checkpoints only ever see a vector. Convolutional
//! activations are stored channel-major: entry `c * length + i`.

mod adam;

pub use adam::{Adam, AdamConfig};

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Relu {
        width: usize,
    },
    /// Stride-1 convolution with circular "same" padding.
    Conv1d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        length: usize,
    },
    AvgPool1d {
        channels: usize,
        length: usize,
        kernel: usize,
        stride: usize,
    },
}

impl Layer {
    pub fn input_width(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Relu { width } => width,
            Layer::Conv1d {
                in_channels, length, ..
            } => in_channels * length,
            Layer::AvgPool1d {
                channels, length, ..
            } => channels * length,
        }
    }

    pub fn output_width(&self) -> usize {
        match *self {
            Layer::Dense { outputs, .. } => outputs,
            Layer::Relu { width } => width,
            Layer::Conv1d {
                out_channels,
                length,
                ..
            } => out_channels * length,
            Layer::AvgPool1d { channels, .. } => channels * self.pooled_length(),
        }
    }

    fn pooled_length(&self) -> usize {
        match *self {
            Layer::AvgPool1d {
                length,
                kernel,
                stride,
                ..
            } => (length - kernel) / stride + 1,
            _ => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Layer::Dense { inputs, outputs } => outputs * inputs + outputs,
            Layer::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel + out_channels,
            _ => 0,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            Layer::Dense { inputs, .. } => inputs,
            Layer::Conv1d {
                in_channels, kernel, ..
            } => in_channels * kernel,
            _ => 1,
        }
    }
}

/// Intermediate activations of one forward pass. `acts[0]` is the input.
#[derive(Clone, Debug)]
pub struct Trace {
    pub acts: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("trace holds the input")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    input_width: usize,
}

impl Network {
    pub fn new(input_width: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut width = input_width;
        for (i, l) in layers.iter().enumerate() {
            if l.input_width() != width {
                return Err(Error::structural(format!(
                    "layer {i} expects width {}, previous layer gives {width}",
                    l.input_width()
                )));
            }
            if let Layer::AvgPool1d {
                length,
                kernel,
                stride,
                ..
            } = *l
            {
                if kernel == 0 || stride == 0 || kernel > length {
                    return Err(Error::structural(format!("invalid pooling at layer {i}")));
                }
            }
            if let Layer::Conv1d { kernel, .. } = *l {
                if kernel % 2 == 0 {
                    return Err(Error::structural("convolution kernels must have odd size"));
                }
            }
            width = l.output_width();
        }
        Ok(Self {
            layers,
            input_width,
        })
    }

    /// Dense layers of the given widths with ReLU after each hidden layer.
    /// When `relu_last` is set the final layer is followed by a ReLU as well.
    pub fn mlp(input_width: usize, widths: &[usize], relu_last: bool) -> Result<Self> {
        let mut layers = Vec::new();
        let mut prev = input_width;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Layer::Dense {
                inputs: prev,
                outputs: w,
            });
            if relu_last || i + 1 < widths.len() {
                layers.push(Layer::Relu { width: w });
            }
            prev = w;
        }
        Self::new(input_width, layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(self.input_width, Layer::output_width)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    /// Uniform fan-in initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// layer by layer from a ChaCha8 stream seeded with `seed`.
    pub fn init_params(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            let bound = 1.0 / (l.fan_in() as f64).sqrt();
            params.extend((0..l.param_count()).map(|_| rng.random_range(-bound..bound)));
        }
        params
    }

    pub fn forward(&self, params: &[f64], input: Array2<f64>) -> Trace {
        debug_assert_eq!(params.len(), self.param_count());
        debug_assert_eq!(input.ncols(), self.input_width);
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input);
        let mut offset = 0;
        for l in &self.layers {
            let p = &params[offset..offset + l.param_count()];
            offset += l.param_count();
            let y = layer_forward(l, p, acts.last().unwrap().view());
            acts.push(y);
        }
        Trace { acts }
    }

    /// Accumulate parameter gradients into `grads` given `d loss / d output`.
    /// Returns the gradient with respect to the input when requested.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        grad_out: Array2<f64>,
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut o = 0;
        for l in &self.layers {
            offsets.push(o);
            o += l.param_count();
        }
        let mut g = grad_out;
        for (i, l) in self.layers.iter().enumerate().rev() {
            let (off, n) = (offsets[i], l.param_count());
            let need_dx = want_input_grad || i > 0;
            match layer_backward(
                l,
                &params[off..off + n],
                trace.acts[i].view(),
                trace.acts[i + 1].view(),
                g.view(),
                &mut grads[off..off + n],
                need_dx,
            ) {
                Some(dx) => g = dx,
                None => return None,
            }
        }
        Some(g)
    }
}

fn layer_forward(layer: &Layer, p: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
    let batch = x.nrows();
    match *layer {
        Layer::Dense { inputs, outputs } => {
            let w = ArrayView2::from_shape((outputs, inputs), &p[..outputs * inputs]).unwrap();
            let b = &p[outputs * inputs..];
            let mut y = Array2::zeros((batch, outputs));
            for mut row in y.rows_mut() {
                row.as_slice_mut().unwrap().copy_from_slice(b);
            }
            general_mat_mul(1.0, &x, &w.t(), 1.0, &mut y);
            y
        }
        Layer::Relu { .. } => x.mapv(|v| v.max(0.0)),
        Layer::Conv1d {
            in_channels,
            out_channels,
            kernel,
            length,
        } => {
            let rows = in_channels * kernel;
            let w = ArrayView2::from_shape((out_channels, rows), &p[..out_channels * rows]).unwrap();
            let bias = &p[out_channels * rows..];
            let mut y = Array2::zeros((batch, out_channels * length));
            let mut col = Array2::zeros((rows, length));
            for (xr, mut yr) in x.rows().into_iter().zip(y.rows_mut()) {
                im2col(xr.as_slice().expect("contiguous rows"), in_channels, kernel, &mut col);
                let ys = yr.as_slice_mut().unwrap();
                for (o, b) in bias.iter().enumerate() {
                    ys[o * length..(o + 1) * length].fill(*b);
                }
                let mut yo = ArrayViewMut2::from_shape((out_channels, length), ys).unwrap();
                general_mat_mul(1.0, &w, &col, 1.0, &mut yo);
            }
            y
        }
        Layer::AvgPool1d {
            channels,
            length,
            kernel,
            stride,
        } => {
            let out_len = layer.pooled_length();
            let scale = 1.0 / kernel as f64;
            let mut y = Array2::zeros((batch, channels * out_len));
            for (xr, mut yr) in x.rows().into_iter().zip(y.rows_mut()) {
                let xs = xr.as_slice().expect("contiguous rows");
                let ys = yr.as_slice_mut().unwrap();
                for c in 0..channels {
                    for m in 0..out_len {
                        let start = c * length + m * stride;
                        ys[c * out_len + m] = xs[start..start + kernel].iter().sum::<f64>() * scale;
                    }
                }
            }
            y
        }
    }
}

fn layer_backward(
    layer: &Layer,
    p: &[f64],
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    grads: &mut [f64],
    need_dx: bool,
) -> Option<Array2<f64>> {
    match *layer {
        Layer::Dense { inputs, outputs } => {
            let (gw, gb) = grads.split_at_mut(outputs * inputs);
            let mut gw = ArrayViewMut2::from_shape((outputs, inputs), gw).unwrap();
            general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut gw);
            for (b, col) in gb.iter_mut().zip(dy.axis_iter(Axis(1))) {
                *b += col.sum();
            }
            need_dx.then(|| {
                let w = ArrayView2::from_shape((outputs, inputs), &p[..outputs * inputs]).unwrap();
                dy.dot(&w)
            })
        }
        Layer::Relu { .. } => {
            need_dx.then(|| Zip::from(&dy).and(&y).map_collect(|&d, &out| if out > 0.0 { d } else { 0.0 }))
        }
        Layer::Conv1d {
            in_channels,
            out_channels,
            kernel,
            length,
        } => {
            let rows = in_channels * kernel;
            let nw = out_channels * rows;
            let w = ArrayView2::from_shape((out_channels, rows), &p[..nw]).unwrap();
            let (gw, gb) = grads.split_at_mut(nw);
            let mut gw = ArrayViewMut2::from_shape((out_channels, rows), gw).unwrap();
            let mut dx = need_dx.then(|| Array2::zeros(x.raw_dim()));
            let mut col = Array2::zeros((rows, length));
            let mut dcol = Array2::zeros((rows, length));
            for (r, (xr, dyr)) in x.rows().into_iter().zip(dy.rows()).enumerate() {
                let dyo = dyr.into_shape_with_order((out_channels, length)).unwrap();
                for (b, row) in gb.iter_mut().zip(dyo.rows()) {
                    *b += row.sum();
                }
                im2col(xr.as_slice().expect("contiguous rows"), in_channels, kernel, &mut col);
                general_mat_mul(1.0, &dyo, &col.t(), 1.0, &mut gw);
                if let Some(dx) = dx.as_mut() {
                    general_mat_mul(1.0, &w.t(), &dyo, 0.0, &mut dcol);
                    let mut row = dx.row_mut(r);
                    col2im_add(&dcol, in_channels, kernel, row.as_slice_mut().unwrap());
                }
            }
            dx
        }
        Layer::AvgPool1d {
            channels,
            length,
            kernel,
            stride,
        } => need_dx.then(|| {
            let out_len = layer.pooled_length();
            let scale = 1.0 / kernel as f64;
            let mut dx = Array2::zeros(x.raw_dim());
            for (mut dxr, dyr) in dx.rows_mut().into_iter().zip(dy.rows()) {
                let dxs = dxr.as_slice_mut().unwrap();
                for c in 0..channels {
                    for m in 0..out_len {
                        let g = dyr[c * out_len + m] * scale;
                        let start = c * length + m * stride;
                        dxs[start..start + kernel].iter_mut().for_each(|d| *d += g);
                    }
                }
            }
            dx
        }),
    }
}

/// Circular patches of a channel-major row: `col[c * kernel + j, i] =
/// x[c, (i + j - kernel / 2) mod length]`.
fn im2col(x: &[f64], in_channels: usize, kernel: usize, col: &mut Array2<f64>) {
    let length = col.ncols();
    let half = kernel / 2;
    for c in 0..in_channels {
        let xc = &x[c * length..(c + 1) * length];
        for j in 0..kernel {
            let mut row = col.row_mut(c * kernel + j);
            let dst = row.as_slice_mut().unwrap();
            let s = (j + length - half % length) % length;
            dst[..length - s].copy_from_slice(&xc[s..]);
            dst[length - s..].copy_from_slice(&xc[..s]);
        }
    }
}

/// Adjoint of [`im2col`], accumulated into `dx`.
fn col2im_add(dcol: &Array2<f64>, in_channels: usize, kernel: usize, dx: &mut [f64]) {
    let length = dcol.ncols();
    let half = kernel / 2;
    for c in 0..in_channels {
        let dxc = &mut dx[c * length..(c + 1) * length];
        for j in 0..kernel {
            let row = dcol.row(c * kernel + j);
            let src = row.as_slice().unwrap();
            let s = (j + length - half % length) % length;
            for (d, v) in dxc[s..].iter_mut().zip(&src[..length - s]) {
                *d += v;
            }
            for (d, v) in dxc[..s].iter_mut().zip(&src[length - s..]) {
                *d += v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_net() -> Network {
        Network::new(
            2 * 24,
            vec![
                Layer::Conv1d {
                    in_channels: 2,
                    out_channels: 3,
                    kernel: 3,
                    length: 24,
                },
                Layer::Relu { width: 72 },
                Layer::AvgPool1d {
                    channels: 3,
                    length: 24,
                    kernel: 4,
                    stride: 4,
                },
                Layer::Dense {
                    inputs: 18,
                    outputs: 2,
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn widths_checked() {
        let bad = Network::new(
            10,
            vec![Layer::Dense {
                inputs: 9,
                outputs: 2,
            }],
        );
        assert!(bad.is_err());
        let net = Network::mlp(2000, &[128, 32, 16], true).unwrap();
        assert_eq!(net.output_width(), 16);
        assert_eq!(net.param_count(), 2000 * 128 + 128 + 128 * 32 + 32 + 32 * 16 + 16);
    }

    #[test]
    fn init_is_seeded() {
        let net = conv_net();
        assert_eq!(net.init_params(3), net.init_params(3));
        assert_ne!(net.init_params(3), net.init_params(4));
    }

    #[test]
    fn conv_commutes_with_circular_shift() {
        let net = Network::new(
            30,
            vec![Layer::Conv1d {
                in_channels: 1,
                out_channels: 2,
                kernel: 5,
                length: 30,
            }],
        )
        .unwrap();
        let p = net.init_params(1);
        let x: Vec<f64> = (0..30).map(|i| ((i * i) % 7) as f64 - 3.0).collect();
        let mut rolled = vec![0.0; 30];
        for i in 0..30 {
            rolled[(i + 1) % 30] = x[i];
        }
        let y = net.forward(&p, Array2::from_shape_vec((1, 30), x).unwrap());
        let yr = net.forward(&p, Array2::from_shape_vec((1, 30), rolled).unwrap());
        for o in 0..2 {
            for i in 0..30 {
                assert_eq!(yr.output()[[0, o * 30 + (i + 1) % 30]], y.output()[[0, o * 30 + i]]);
            }
        }
    }

    #[test]
    fn conv_matches_direct_sum() {
        let net = conv_net();
        let p = net.init_params(5);
        let x = Array2::from_shape_fn((2, 48), |(r, i)| ((r * 31 + i * 7) % 11) as f64 / 5.0 - 1.0);
        let y = layer_forward(&net.layers[0], &p[..net.layers[0].param_count()], x.view());
        for r in 0..2 {
            for o in 0..3 {
                for i in 0..24 {
                    let mut s = p[3 * 2 * 3 + o];
                    for c in 0..2 {
                        for j in 0..3 {
                            let idx = (i as isize + j as isize - 1).rem_euclid(24) as usize;
                            s += p[(o * 2 + c) * 3 + j] * x[[r, c * 24 + idx]];
                        }
                    }
                    assert!((y[[r, o * 24 + i]] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = conv_net();
        let p = net.init_params(2);
        let x = Array2::from_shape_fn((3, 48), |(r, i)| (((r + 1) * (i + 3)) % 13) as f64 / 6.0 - 1.0);
        // loss = sum(output * c) with fixed c
        let c = Array2::from_shape_fn((3, 2), |(r, j)| 0.3 + r as f64 - 0.7 * j as f64);
        let loss = |p: &[f64], x: &Array2<f64>| (net.forward(p, x.clone()).output() * &c).sum();
        let tr = net.forward(&p, x.clone());
        let mut g = vec![0.0; p.len()];
        let dx = net.backward(&p, &tr, c.clone(), &mut g, true).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
        for idx in [(0, 0), (1, 17), (2, 47)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}
