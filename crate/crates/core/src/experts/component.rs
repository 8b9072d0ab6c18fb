use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Bind, Linear};
use crate::params::ParamStore;
use crate::tensor::{Graph, Var};

/// MLP autoencoder over pooled component embeddings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComponentExpert {
    enc_hidden: Linear,
    enc_code: Linear,
    dec_hidden: Linear,
    dec_out: Linear,
    pub dim: usize,
    pub bottleneck: usize,
}

impl ComponentExpert {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        bottleneck: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= dim {
            return Err(Error::Config(format!(
                "component bottleneck {bottleneck} must lie in [1, {dim})"
            )));
        }
        let hidden = (dim / 2).max(bottleneck);
        Ok(Self {
            enc_hidden: Linear::new(store, &format!("{name}.enc_hidden"), dim, hidden, rng),
            enc_code: Linear::new(store, &format!("{name}.enc_code"), hidden, bottleneck, rng),
            dec_hidden: Linear::new(store, &format!("{name}.dec_hidden"), bottleneck, hidden, rng),
            dec_out: Linear::new(store, &format!("{name}.dec_out"), hidden, dim, rng),
            dim,
            bottleneck,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Bind) -> Var {
        let h = self.enc_hidden.forward(g, store, x, mode);
        let h = g.gelu(h);
        let code = self.enc_code.forward(g, store, h, mode);
        let h = self.dec_hidden.forward(g, store, code, mode);
        let h = g.gelu(h);
        self.dec_out.forward(g, store, h, mode)
    }
}
