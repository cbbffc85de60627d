//! Minimal feed-forward network engine with hand-written backpropagation.
//!
//! Activations are kept in NHWC order as a 2-D matrix of shape
//! `(n * h * w, c)`, so convolutions reduce to a single GEMM over im2col
//! patches and dense layers are plain row-wise matrix products. All
//! parameters of a network live in one flat `Vec<f64>`; layers address
//! their tensors by offset.

mod optim;

pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};

use ndarray::{s, Array2, ArrayView2, ArrayView4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// A batch of activations in NHWC order, stored as `(n*h*w, c)`.
#[derive(Clone, Debug)]
pub struct Act {
    pub data: Array2<f64>,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Act {
    pub fn from_images(images: ArrayView4<'_, f64>) -> Self {
        let (n, h, w, c) = images.dim();
        let data = images
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n * h * w, c))
            .expect("standard layout reshape");
        Act { data, n, h, w }
    }

    /// Wraps a `(n, features)` matrix as a 1×1 spatial activation.
    pub fn from_rows(rows: Array2<f64>) -> Self {
        let n = rows.nrows();
        Act {
            data: standard(rows),
            n,
            h: 1,
            w: 1,
        }
    }

    pub fn channels(&self) -> usize {
        self.data.ncols()
    }

    /// Returns the activation as `(n, h*w*c)` rows.
    pub fn into_rows(self) -> Array2<f64> {
        let cols = self.h * self.w * self.data.ncols();
        standard(self.data)
            .into_shape_with_order((self.n, cols))
            .expect("standard layout reshape")
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Layer {
    Conv {
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        cin: usize,
        cout: usize,
    },
    Relu,
    /// 2×2 average pooling with stride 2.
    AvgPool2,
    GlobalAvgPool,
    Flatten,
    /// `body(x) + shortcut(x)`; the shortcut is the identity when `None`.
    Residual {
        body: Vec<Layer>,
        shortcut: Option<Box<Layer>>,
    },
}

impl Layer {
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Conv {
                cin, cout, kernel, ..
            } => kernel * kernel * cin * cout + cout,
            Layer::Dense { cin, cout } => cin * cout + cout,
            Layer::Residual { body, shortcut } => {
                body.iter().map(Layer::param_count).sum::<usize>()
                    + shortcut.as_ref().map_or(0, |s| s.param_count())
            }
            _ => 0,
        }
    }

    fn init(&self, params: &mut [f64], rng: &mut impl Rng) {
        match self {
            Layer::Conv {
                cin, cout, kernel, ..
            } => he_normal(params, kernel * kernel * cin, kernel * kernel * cin * cout, rng),
            Layer::Dense { cin, cout } => he_normal(params, *cin, cin * cout, rng),
            Layer::Residual { body, shortcut } => {
                let mut off = 0;
                for layer in body {
                    let n = layer.param_count();
                    layer.init(&mut params[off..off + n], rng);
                    off += n;
                }
                if let Some(sc) = shortcut {
                    sc.init(&mut params[off..], rng);
                }
            }
            _ => {}
        }
    }

    /// Output shape `(h, w, c)` for an input of shape `(h, w, c)`.
    pub fn output_shape(&self, (h, w, c): (usize, usize, usize)) -> Option<(usize, usize, usize)> {
        match self {
            Layer::Conv {
                cin,
                cout,
                kernel,
                stride,
                pad,
            } => {
                if *cin != c || h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                    return None;
                }
                Some((
                    (h + 2 * pad - kernel) / stride + 1,
                    (w + 2 * pad - kernel) / stride + 1,
                    *cout,
                ))
            }
            Layer::Dense { cin, cout } => (*cin == c).then_some((h, w, *cout)),
            Layer::Relu => Some((h, w, c)),
            Layer::AvgPool2 => (h % 2 == 0 && w % 2 == 0).then_some((h / 2, w / 2, c)),
            Layer::GlobalAvgPool => Some((1, 1, c)),
            Layer::Flatten => Some((1, 1, h * w * c)),
            Layer::Residual { body, shortcut } => {
                let mut shape = (h, w, c);
                for layer in body {
                    shape = layer.output_shape(shape)?;
                }
                let side = match shortcut {
                    Some(sc) => sc.output_shape((h, w, c))?,
                    None => (h, w, c),
                };
                (side == shape).then_some(shape)
            }
        }
    }
}

fn he_normal(params: &mut [f64], fan_in: usize, weights: usize, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    for p in &mut params[..weights] {
        *p = normal.sample(rng);
    }
    for p in &mut params[weights..] {
        *p = 0.0;
    }
}

/// Per-layer values saved during a recorded forward pass.
#[derive(Debug)]
enum Cache {
    Conv {
        col: Option<Array2<f64>>,
        input_dims: (usize, usize, usize),
        out_hw: (usize, usize),
    },
    Dense {
        input: Array2<f64>,
    },
    Relu {
        output: Array2<f64>,
    },
    Pool {
        input_dims: (usize, usize, usize),
    },
    Flatten {
        input_dims: (usize, usize, usize),
    },
    Residual {
        body: Vec<Cache>,
        shortcut: Option<Box<Cache>>,
    },
}

/// Saved state of a recorded forward pass, consumed by [`Network::backward`].
#[derive(Debug)]
pub struct Tape {
    caches: Vec<Cache>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    layers: Vec<Layer>,
    input: (usize, usize, usize),
    output: (usize, usize, usize),
    param_count: usize,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input: (usize, usize, usize)) -> Option<Self> {
        let mut shape = input;
        for layer in &layers {
            shape = layer.output_shape(shape)?;
        }
        let param_count = layers.iter().map(Layer::param_count).sum();
        Some(Network {
            layers,
            input,
            output: shape,
            param_count,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input
    }

    /// Flattened output width per example.
    pub fn output_dim(&self) -> usize {
        self.output.0 * self.output.1 * self.output.2
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count];
        let mut off = 0;
        for layer in &self.layers {
            let n = layer.param_count();
            layer.init(&mut params[off..off + n], rng);
            off += n;
        }
        params
    }

    /// Inference pass; returns `(n, output_dim)` rows.
    pub fn forward(&self, params: &[f64], x: Act) -> Array2<f64> {
        debug_assert_eq!(params.len(), self.param_count);
        forward_seq(&self.layers, params, x, None).into_rows()
    }

    /// Forward pass that records what `backward` needs.
    pub fn forward_train(&self, params: &[f64], x: Act) -> (Array2<f64>, Tape) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let out = forward_seq(&self.layers, params, x, Some(&mut caches));
        (out.into_rows(), Tape { caches })
    }

    /// Accumulates parameter gradients into `grads` given `d loss / d output`
    /// as `(n, output_dim)` rows. Returns the input gradient when requested.
    pub fn backward(
        &self,
        params: &[f64],
        tape: Tape,
        grad_out: Array2<f64>,
        grads: &mut [f64],
        want_input_grad: bool,
    ) -> Option<Array2<f64>> {
        let n = grad_out.nrows();
        let (h, w, c) = self.output;
        let g = Act {
            data: standard(grad_out)
                .into_shape_with_order((n * h * w, c))
                .expect("output gradient shape"),
            n,
            h,
            w,
        };
        backward_seq(&self.layers, params, tape.caches, g, grads, want_input_grad)
            .map(Act::into_rows)
    }
}

fn forward_seq(layers: &[Layer], params: &[f64], mut x: Act, mut tape: Option<&mut Vec<Cache>>) -> Act {
    let mut off = 0;
    for layer in layers {
        let n = layer.param_count();
        let p = &params[off..off + n];
        off += n;
        let (y, cache) = forward_layer(layer, p, x, tape.is_some());
        if let (Some(t), Some(c)) = (tape.as_deref_mut(), cache) {
            t.push(c);
        }
        x = y;
    }
    x
}

fn backward_seq(
    layers: &[Layer],
    params: &[f64],
    caches: Vec<Cache>,
    mut g: Act,
    grads: &mut [f64],
    want_input_grad: bool,
) -> Option<Act> {
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for layer in layers {
        offsets.push(off);
        off += layer.param_count();
    }
    let count = layers.len();
    for (i, (layer, cache)) in layers.iter().zip(caches).enumerate().rev() {
        let n = layer.param_count();
        let o = offsets[i];
        let need = want_input_grad || i > 0;
        match backward_layer(layer, &params[o..o + n], cache, g, &mut grads[o..o + n], need) {
            Some(next) => g = next,
            None => {
                debug_assert!(i == 0 || count == 0);
                return None;
            }
        }
    }
    Some(g)
}

fn forward_layer(layer: &Layer, p: &[f64], x: Act, record: bool) -> (Act, Option<Cache>) {
    match layer {
        Layer::Conv {
            cin,
            cout,
            kernel,
            stride,
            pad,
        } => {
            let (n, h, w) = (x.n, x.h, x.w);
            let ho = (h + 2 * pad - kernel) / stride + 1;
            let wo = (w + 2 * pad - kernel) / stride + 1;
            let kk = kernel * kernel * cin;
            let weight = ArrayView2::from_shape((kk, *cout), &p[..kk * cout]).expect("conv weight");
            let bias = &p[kk * cout..];
            let pointwise = *kernel == 1 && *stride == 1 && *pad == 0;
            let col = if pointwise {
                None
            } else {
                Some(im2col(&x, *kernel, *stride, *pad, ho, wo))
            };
            let mut out = match &col {
                Some(col) => col.dot(&weight),
                None => x.data.dot(&weight),
            };
            add_bias(&mut out, bias);
            let cache = record.then(|| Cache::Conv {
                col: if pointwise { Some(x.data) } else { col },
                input_dims: (n, h, w),
                out_hw: (ho, wo),
            });
            (Act { data: out, n, h: ho, w: wo }, cache)
        }
        Layer::Dense { cin, cout } => {
            let weight = ArrayView2::from_shape((*cin, *cout), &p[..cin * cout]).expect("dense weight");
            let mut out = x.data.dot(&weight);
            add_bias(&mut out, &p[cin * cout..]);
            let (n, h, w) = (x.n, x.h, x.w);
            let cache = record.then(|| Cache::Dense { input: x.data });
            (Act { data: out, n, h, w }, cache)
        }
        Layer::Relu => {
            let mut data = x.data;
            data.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
            let cache = record.then(|| Cache::Relu { output: data.clone() });
            (Act { data, ..x }, cache)
        }
        Layer::AvgPool2 => {
            let (n, h, w) = (x.n, x.h, x.w);
            let c = x.channels();
            let (ho, wo) = (h / 2, w / 2);
            let mut out = Array2::<f64>::zeros((n * ho * wo, c));
            {
                let xs = x.data.as_slice().expect("standard layout");
                let os = out.as_slice_mut().expect("standard layout");
                for b in 0..n {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let dst = ((b * ho + oy) * wo + ox) * c;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let src = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                                for ch in 0..c {
                                    os[dst + ch] += 0.25 * xs[src + ch];
                                }
                            }
                        }
                    }
                }
            }
            let cache = record.then_some(Cache::Pool { input_dims: (n, h, w) });
            (Act { data: out, n, h: ho, w: wo }, cache)
        }
        Layer::GlobalAvgPool => {
            let (n, h, w) = (x.n, x.h, x.w);
            let c = x.channels();
            let hw = h * w;
            let out = x
                .data
                .into_shape_with_order((n, hw, c))
                .expect("standard layout")
                .mean_axis(Axis(1))
                .expect("non-empty spatial extent");
            let cache = record.then_some(Cache::Pool { input_dims: (n, h, w) });
            (Act { data: out, n, h: 1, w: 1 }, cache)
        }
        Layer::Flatten => {
            let dims = (x.n, x.h, x.w);
            let rows = x.into_rows();
            let cache = record.then_some(Cache::Flatten { input_dims: dims });
            (Act::from_rows(rows), cache)
        }
        Layer::Residual { body, shortcut } => {
            let body_params = body.iter().map(Layer::param_count).sum::<usize>();
            let mut body_tape = record.then(Vec::new);
            let y = forward_seq(body, &p[..body_params], x.clone(), body_tape.as_mut());
            let (side, sc_cache) = match shortcut {
                Some(sc) => {
                    let (s, c) = forward_layer(sc, &p[body_params..], x, record);
                    (s, c.map(Box::new))
                }
                None => (x, None),
            };
            let data = y.data + &side.data;
            let cache = body_tape.map(|body| Cache::Residual {
                body,
                shortcut: sc_cache,
            });
            (Act { data, ..y }, cache)
        }
    }
}

fn backward_layer(
    layer: &Layer,
    p: &[f64],
    cache: Cache,
    g: Act,
    grads: &mut [f64],
    need_input: bool,
) -> Option<Act> {
    match (layer, cache) {
        (
            Layer::Conv {
                cin,
                cout,
                kernel,
                stride,
                pad,
            },
            Cache::Conv {
                col,
                input_dims: (n, h, w),
                out_hw: (ho, wo),
            },
        ) => {
            let kk = kernel * kernel * cin;
            let col = col.expect("conv cache");
            let (gw, gb) = grads.split_at_mut(kk * cout);
            accumulate_weight_grad(gw, &col, &g.data);
            accumulate_bias_grad(gb, &g.data);
            if !need_input {
                return None;
            }
            let weight = ArrayView2::from_shape((kk, *cout), &p[..kk * cout]).expect("conv weight");
            let gcol = g.data.dot(&weight.t());
            let pointwise = *kernel == 1 && *stride == 1 && *pad == 0;
            let data = if pointwise {
                gcol
            } else {
                col2im(&gcol, (n, h, w, *cin), *kernel, *stride, *pad, ho, wo)
            };
            Some(Act { data, n, h, w })
        }
        (Layer::Dense { cin, cout }, Cache::Dense { input }) => {
            let (gw, gb) = grads.split_at_mut(cin * cout);
            accumulate_weight_grad(gw, &input, &g.data);
            accumulate_bias_grad(gb, &g.data);
            if !need_input {
                return None;
            }
            let weight = ArrayView2::from_shape((*cin, *cout), &p[..cin * cout]).expect("dense weight");
            let data = g.data.dot(&weight.t());
            Some(Act { data, ..g })
        }
        (Layer::Relu, Cache::Relu { output }) => {
            if !need_input {
                return None;
            }
            let mut data = g.data;
            data.zip_mut_with(&output, |d, &o| {
                if o <= 0.0 {
                    *d = 0.0
                }
            });
            Some(Act { data, ..g })
        }
        (Layer::AvgPool2, Cache::Pool { input_dims: (n, h, w) }) => {
            if !need_input {
                return None;
            }
            let c = g.channels();
            let (ho, wo) = (h / 2, w / 2);
            let mut data = Array2::<f64>::zeros((n * h * w, c));
            {
                let gs = g.data.as_slice().expect("standard layout");
                let ds = data.as_slice_mut().expect("standard layout");
                for b in 0..n {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let src = ((b * ho + oy) * wo + ox) * c;
                            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let dst = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                                for ch in 0..c {
                                    ds[dst + ch] += 0.25 * gs[src + ch];
                                }
                            }
                        }
                    }
                }
            }
            Some(Act { data, n, h, w })
        }
        (Layer::GlobalAvgPool, Cache::Pool { input_dims: (n, h, w) }) => {
            if !need_input {
                return None;
            }
            let c = g.channels();
            let hw = (h * w) as f64;
            let mut data = Array2::<f64>::zeros((n * h * w, c));
            for b in 0..n {
                let src = g.data.row(b);
                data.slice_mut(s![b * h * w..(b + 1) * h * w, ..])
                    .rows_mut()
                    .into_iter()
                    .for_each(|mut r| r.zip_mut_with(&src, |d, &s| *d = s / hw));
            }
            Some(Act { data, n, h, w })
        }
        (Layer::Flatten, Cache::Flatten { input_dims: (n, h, w) }) => {
            if !need_input {
                return None;
            }
            let c = g.data.ncols() / (h * w);
            let data = standard(g.data)
                .into_shape_with_order((n * h * w, c))
                .expect("flatten gradient");
            Some(Act { data, n, h, w })
        }
        (Layer::Residual { body, shortcut }, Cache::Residual { body: bc, shortcut: sc }) => {
            let body_params = body.iter().map(Layer::param_count).sum::<usize>();
            let (gbody, gsc) = grads.split_at_mut(body_params);
            let through_body = backward_seq(body, &p[..body_params], bc, g.clone(), gbody, need_input);
            let through_side = match (shortcut, sc) {
                (Some(layer), Some(cache)) => {
                    backward_layer(layer, &p[body_params..], *cache, g, gsc, need_input)
                }
                _ => need_input.then_some(g),
            };
            match (through_body, through_side) {
                (Some(a), Some(b)) => Some(Act {
                    data: a.data + &b.data,
                    ..a
                }),
                _ => None,
            }
        }
        (layer, cache) => panic!("tape does not match network: {layer:?} vs {cache:?}"),
    }
}

fn add_bias(out: &mut Array2<f64>, bias: &[f64]) {
    for mut row in out.rows_mut() {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn accumulate_weight_grad(gw: &mut [f64], input: &Array2<f64>, g: &Array2<f64>) {
    let shape = (input.ncols(), g.ncols());
    let mut view = ndarray::ArrayViewMut2::from_shape(shape, gw).expect("weight grad shape");
    ndarray::linalg::general_mat_mul(1.0, &input.t(), g, 1.0, &mut view);
}

fn accumulate_bias_grad(gb: &mut [f64], g: &Array2<f64>) {
    for row in g.rows() {
        for (acc, v) in gb.iter_mut().zip(row) {
            *acc += v;
        }
    }
}

fn im2col(x: &Act, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Array2<f64> {
    let (n, h, w) = (x.n, x.h, x.w);
    let c = x.channels();
    let cols = k * k * c;
    let mut col = Array2::<f64>::zeros((n * ho * wo, cols));
    let xs = x.data.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * cols;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    col
}

fn col2im(
    gcol: &Array2<f64>,
    (n, h, w, c): (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let cols = k * k * c;
    let mut out = Array2::<f64>::zeros((n * h * w, c));
    let gs = gcol.as_slice().expect("standard layout");
    let os = out.as_slice_mut().expect("standard layout");
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * cols;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for ch in 0..c {
                            os[dst + ch] += gs[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}
