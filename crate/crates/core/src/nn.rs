//! Small layer library on top of [`crate::tensor::Graph`].

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Var};

/// How parameters enter a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    /// Gradients are collected for the parameter.
    Train,
    /// Parameter is a constant; gradients still flow to the layer input.
    Frozen,
}

pub fn bind(g: &mut Graph, store: &ParamStore, id: ParamId, mode: Bind) -> Var {
    match mode {
        Bind::Train => g.param(store, id),
        Bind::Frozen => g.frozen(store, id),
    }
}

/// Affine map `x·W + b` with `W: in×out`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.add_glorot(format!("{name}.w"), inputs, outputs, rng);
        let b = store.add_zeros(format!("{name}.b"), 1, outputs);
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn zeros(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let w = store.add_zeros(format!("{name}.w"), inputs, outputs);
        let b = store.add_zeros(format!("{name}.b"), 1, outputs);
        Self {
            w,
            b,
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Bind) -> Var {
        let w = bind(g, store, self.w, mode);
        let b = bind(g, store, self.b, mode);
        g.affine(x, w, b)
    }
}

/// Row layer normalization with learnable gain and bias.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add_ones(format!("{name}.gain"), 1, width),
            bias: store.add_zeros(format!("{name}.bias"), 1, width),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Bind) -> Var {
        let n = g.layer_norm(x, self.eps);
        let gain = bind(g, store, self.gain, mode);
        let bias = bind(g, store, self.bias, mode);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }
}

/// Spatial layout of a batch of feature grids stored as `(batch·h·w)×channels`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
}

impl GridShape {
    pub fn rows(&self) -> usize {
        self.batch * self.h * self.w
    }

    /// Output shape of a `kernel×kernel` convolution with `stride` and `pad`.
    pub fn conv_out(&self, kernel: usize, stride: usize, pad: usize) -> GridShape {
        GridShape {
            batch: self.batch,
            h: (self.h + 2 * pad - kernel) / stride + 1,
            w: (self.w + 2 * pad - kernel) / stride + 1,
        }
    }
}

/// Row gather table turning a grid batch into im2col patches.
pub fn im2col_index(shape: GridShape, kernel: usize, stride: usize, pad: usize) -> Vec<Option<usize>> {
    let out = shape.conv_out(kernel, stride, pad);
    let mut index = Vec::with_capacity(out.rows() * kernel * kernel);
    for b in 0..shape.batch {
        for oy in 0..out.h {
            for ox in 0..out.w {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let inside = iy >= 0
                            && ix >= 0
                            && (iy as usize) < shape.h
                            && (ix as usize) < shape.w;
                        index.push(inside.then(|| {
                            (b * shape.h + iy as usize) * shape.w + ix as usize
                        }));
                    }
                }
            }
        }
    }
    index
}

/// Nearest-neighbour resize table from `from` to a `to_h×to_w` grid.
pub fn resize_index(from: GridShape, to_h: usize, to_w: usize) -> Vec<Option<usize>> {
    let mut index = Vec::with_capacity(from.batch * to_h * to_w);
    for b in 0..from.batch {
        for y in 0..to_h {
            let sy = y * from.h / to_h;
            for x in 0..to_w {
                let sx = x * from.w / to_w;
                index.push(Some((b * from.h + sy) * from.w + sx));
            }
        }
    }
    index
}

/// 2-D convolution over a grid batch, lowered to gather + reshape + matmul.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        let weight = store.add_glorot(format!("{name}.w"), fan_in, out_channels, rng);
        let bias = store.add_zeros(format!("{name}.b"), 1, out_channels);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        shape: GridShape,
        mode: Bind,
    ) -> (Var, GridShape) {
        assert_eq!(g.value(x).nrows(), shape.rows(), "grid rows mismatch");
        assert_eq!(g.value(x).ncols(), self.in_channels, "channel mismatch");
        let out = shape.conv_out(self.kernel, self.stride, self.pad);
        let index: Arc<[Option<usize>]> = im2col_index(shape, self.kernel, self.stride, self.pad).into();
        let cols = g.gather_windows(x, index, self.kernel * self.kernel);
        let w = bind(g, store, self.weight, mode);
        let b = bind(g, store, self.bias, mode);
        let y = g.matmul(cols, w);
        (g.add_row(y, b), out)
    }
}

/// Nearest-neighbour upsampling of a grid batch.
pub fn resize(g: &mut Graph, x: Var, from: GridShape, to_h: usize, to_w: usize) -> (Var, GridShape) {
    let index: Arc<[Option<usize>]> = resize_index(from, to_h, to_w).into();
    let y = g.gather_rows(x, index);
    (
        y,
        GridShape {
            batch: from.batch,
            h: to_h,
            w: to_w,
        },
    )
}
