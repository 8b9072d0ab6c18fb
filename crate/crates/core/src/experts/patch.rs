use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Bind, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::tensor::{Graph, Var};

/// Denominator guard for linear attention.
pub const ATTENTION_EPS: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DecoderBlock {
    attn_norm: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    /// Zero-initialized so the block starts as the identity.
    attn_out: Linear,
    ff_norm: LayerNorm,
    ff_in: Linear,
    /// Zero-initialized so the block starts as the identity.
    ff_out: Linear,
}

/// Pre-norm residual decoder with linear attention.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchExpert {
    blocks: Vec<DecoderBlock>,
    pub dim: usize,
    pub hidden: usize,
}

impl PatchExpert {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        depth: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..depth)
            .map(|i| {
                let p = format!("{name}.block{i}");
                DecoderBlock {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), dim),
                    query: Linear::new(store, &format!("{p}.query"), dim, dim, rng),
                    key: Linear::new(store, &format!("{p}.key"), dim, dim, rng),
                    value: Linear::new(store, &format!("{p}.value"), dim, dim, rng),
                    attn_out: Linear::zeros(store, &format!("{p}.attn_out"), dim, dim),
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), dim),
                    ff_in: Linear::new(store, &format!("{p}.ff_in"), dim, hidden, rng),
                    ff_out: Linear::zeros(store, &format!("{p}.ff_out"), hidden, dim),
                }
            })
            .collect();
        Self { blocks, dim, hidden }
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Reconstruct stacked samples; attention never crosses a segment boundary.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        segments: &Arc<[Range<usize>]>,
        mode: Bind,
    ) -> Var {
        let mut x = input;
        for b in &self.blocks {
            let h = b.attn_norm.forward(g, store, x, mode);
            let q = b.query.forward(g, store, h, mode);
            let k = b.key.forward(g, store, h, mode);
            let v = b.value.forward(g, store, h, mode);
            let fq = g.elu1(q);
            let fk = g.elu1(k);
            let a = g.linear_attention(fq, fk, v, segments.clone(), ATTENTION_EPS);
            let o = b.attn_out.forward(g, store, a, mode);
            x = g.add(x, o);
            let h = b.ff_norm.forward(g, store, x, mode);
            let f = b.ff_in.forward(g, store, h, mode);
            let f = g.gelu(f);
            let o = b.ff_out.forward(g, store, f, mode);
            x = g.add(x, o);
        }
        x
    }
}
