use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{resize, Bind, Conv2d, GridShape};
use crate::params::ParamStore;
use crate::tensor::{Graph, Var};

/// Convolutional autoencoder over the `H×W×D` feature grid.
///
/// The encoder halves the grid with each strided 3×3 convolution; the decoder
/// mirrors it with nearest-neighbour upsampling followed by 3×3 convolutions.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GlobalExpert {
    encoder: Vec<Conv2d>,
    decoder: Vec<Conv2d>,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub bottleneck_channels: usize,
}

impl GlobalExpert {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        grid_h: usize,
        grid_w: usize,
        downsamples: usize,
        bottleneck_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if downsamples == 0 || bottleneck_channels == 0 {
            return Err(Error::Config(
                "global expert needs at least one downsample and one bottleneck channel".into(),
            ));
        }
        // Channel schedule: D → … → bottleneck, halving until the bottleneck.
        let mut channels = vec![dim];
        for i in 1..downsamples {
            channels.push((dim >> i).max(bottleneck_channels));
        }
        channels.push(bottleneck_channels);
        let mut shape = GridShape {
            batch: 1,
            h: grid_h,
            w: grid_w,
        };
        let mut encoder = Vec::with_capacity(downsamples);
        for i in 0..downsamples {
            encoder.push(Conv2d::new(
                store,
                &format!("{name}.enc{i}"),
                channels[i],
                channels[i + 1],
                3,
                2,
                1,
                rng,
            ));
            shape = shape.conv_out(3, 2, 1);
        }
        if shape.h * shape.w >= grid_h * grid_w {
            return Err(Error::Config(format!(
                "global bottleneck {}x{} does not shrink the {grid_h}x{grid_w} grid",
                shape.h, shape.w
            )));
        }
        let mut decoder = Vec::with_capacity(downsamples);
        for i in 0..downsamples {
            let cin = channels[downsamples - i];
            let cout = channels[downsamples - i - 1];
            decoder.push(Conv2d::new(store, &format!("{name}.dec{i}"), cin, cout, 3, 1, 1, rng));
        }
        Ok(Self {
            encoder,
            decoder,
            dim,
            grid_h,
            grid_w,
            bottleneck_channels,
        })
    }

    /// Spatial sizes visited by the encoder, input first.
    fn pyramid(&self, batch: usize) -> Vec<GridShape> {
        let mut shapes = vec![GridShape {
            batch,
            h: self.grid_h,
            w: self.grid_w,
        }];
        for c in &self.encoder {
            let last = *shapes.last().expect("non-empty");
            shapes.push(last.conv_out(c.kernel, c.stride, c.pad));
        }
        shapes
    }

    /// Reconstruct a batch of grids stored as `(batch·H·W)×D`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, batch: usize, mode: Bind) -> Var {
        let shapes = self.pyramid(batch);
        let mut h = x;
        let mut shape = shapes[0];
        for conv in &self.encoder {
            let (y, s) = conv.forward(g, store, h, shape, mode);
            h = g.gelu(y);
            shape = s;
        }
        let n = self.decoder.len();
        for (i, conv) in self.decoder.iter().enumerate() {
            let target = shapes[n - 1 - i];
            let (up, s) = resize(g, h, shape, target.h, target.w);
            let (y, s) = conv.forward(g, store, up, s, mode);
            h = if i + 1 < n { g.gelu(y) } else { y };
            shape = s;
        }
        h
    }
}
