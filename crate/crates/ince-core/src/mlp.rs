//! Multi-layer perceptron built from `depth` linear layers with relu between
//! them and a linear final layer (so outputs can be negative, which the
//! residual updates in the encoders rely on).
//!
//! `depth = 1` is a single linear map. Hidden widths are all equal.

use crate::adam::ParamStore;
use crate::error::Result;
use crate::mat::Mat;
use crate::rng::{uniform_symmetric, EngineRng};
use crate::tape::{NodeId, ParamId, Tape};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    /// (weight in x out, bias 1 x out) per linear layer.
    pub layers: Vec<(ParamId, ParamId)>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Mlp {
    /// `dims` lists the widths layer by layer: in, h1, ..., out.
    pub fn init(store: &mut ParamStore, rng: &mut EngineRng, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least in/out dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, win) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (win[0], win[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut w = Mat::zeros(fan_in, fan_out);
            for v in w.data_mut() {
                *v = uniform_symmetric(rng, bound);
            }
            let wid = store.add(format!("{}.linear{}.w", name, i), w);
            let bid = store.add(format!("{}.linear{}.b", name, i), Mat::zeros(1, fan_out));
            layers.push((wid, bid));
        }
        Mlp { layers, in_dim: dims[0], out_dim: *dims.last().unwrap() }
    }

    /// Uniform-width MLP: in_dim -> l -> ... -> l with `depth` linear layers.
    pub fn init_uniform(
        store: &mut ParamStore,
        rng: &mut EngineRng,
        name: &str,
        in_dim: usize,
        width: usize,
        depth: usize,
    ) -> Self {
        assert!(depth >= 1);
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(width).take(depth));
        Self::init(store, rng, name, &dims)
    }

    /// relu between layers, linear output.
    pub fn forward(&self, tape: &mut Tape, bound: &[NodeId], x: NodeId) -> Result<NodeId> {
        let mut cur = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            cur = tape.linear(cur, bound[w], bound[b])?;
            if i != last {
                cur = tape.relu(cur)?;
            }
        }
        Ok(cur)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.value(id).len()).sum()
    }
}
