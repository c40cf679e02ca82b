//! Transformer-encoder contextual embedding, the drop-in baseline that
//! replaces the interaction-network stack while sharing the columnar
//! embedder and the decoder.
//!
//! Per layer: h independent heads with l x l Q/K/V projections (with bias),
//! scores softmax((X Q)(X K)^T / sqrt(l)) within each row's graph, heads
//! concatenated then projected back to l, residual; then a relu feed-forward
//! l -> f -> l with residual. No normalization layers anywhere, which keeps
//! the closed-form parameter count exact.

use crate::adam::ParamStore;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::{uniform_symmetric, EngineRng};
use crate::tape::{NodeId, ParamId, Tape};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionHead {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerLayer {
    pub heads: Vec<AttentionHead>,
    /// Output projection (h*l) x l plus bias.
    pub wo: ParamId,
    pub bo: ParamId,
    /// Feed-forward l -> f -> l.
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerEncoder {
    pub layers: Vec<TransformerLayer>,
    pub latent: usize,
    pub ff: usize,
}

fn init_mat(store: &mut ParamStore, rng: &mut EngineRng, name: String, rows: usize, cols: usize) -> ParamId {
    let bound = 1.0 / (rows as f64).sqrt();
    let mut w = Mat::zeros(rows, cols);
    for v in w.data_mut() {
        *v = uniform_symmetric(rng, bound);
    }
    store.add(name, w)
}

impl TransformerEncoder {
    pub fn init(
        store: &mut ParamStore,
        rng: &mut EngineRng,
        latent: usize,
        heads: usize,
        ff: usize,
        stack: usize,
    ) -> Self {
        assert!(latent >= 1 && heads >= 1 && ff >= 1 && stack >= 1);
        let mut layers = Vec::with_capacity(stack);
        for i in 0..stack {
            let mut head_params = Vec::with_capacity(heads);
            for h in 0..heads {
                let p = |store: &mut ParamStore, rng: &mut EngineRng, tag: &str| {
                    init_mat(store, rng, format!("tr{}.h{}.{}", i, h, tag), latent, latent)
                };
                let wq = p(store, rng, "wq");
                let bq = store.add(format!("tr{}.h{}.bq", i, h), Mat::zeros(1, latent));
                let wk = p(store, rng, "wk");
                let bk = store.add(format!("tr{}.h{}.bk", i, h), Mat::zeros(1, latent));
                let wv = p(store, rng, "wv");
                let bv = store.add(format!("tr{}.h{}.bv", i, h), Mat::zeros(1, latent));
                head_params.push(AttentionHead { wq, bq, wk, bk, wv, bv });
            }
            let wo = init_mat(store, rng, format!("tr{}.wo", i), heads * latent, latent);
            let bo = store.add(format!("tr{}.bo", i), Mat::zeros(1, latent));
            let w1 = init_mat(store, rng, format!("tr{}.ffn.w1", i), latent, ff);
            let b1 = store.add(format!("tr{}.ffn.b1", i), Mat::zeros(1, ff));
            let w2 = init_mat(store, rng, format!("tr{}.ffn.w2", i), ff, latent);
            let b2 = store.add(format!("tr{}.ffn.b2", i), Mat::zeros(1, latent));
            layers.push(TransformerLayer { heads: head_params, wo, bo, w1, b1, w2, b2 });
        }
        TransformerEncoder { layers, latent, ff }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for layer in &self.layers {
            for h in &layer.heads {
                ids.extend([h.wq, h.bq, h.wk, h.bk, h.wv, h.bv]);
            }
            ids.extend([layer.wo, layer.bo, layer.w1, layer.b1, layer.w2, layer.b2]);
        }
        ids
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().iter().map(|&id| store.value(id).len()).sum()
    }

    /// Run the stack over batch-flattened node states ((B*(M+1)) x l), with
    /// attention confined to each consecutive group of `group` rows.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        mut nodes: NodeId,
        group: usize,
    ) -> Result<NodeId> {
        if tape.value(nodes).rows() % group != 0 {
            return Err(Error::contract("transformer forward: rows not divisible by group"));
        }
        let scale = 1.0 / (self.latent as f64).sqrt();
        for layer in &self.layers {
            let mut head_outputs = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                let q = tape.linear(nodes, bound[head.wq], bound[head.bq])?;
                let k = tape.linear(nodes, bound[head.wk], bound[head.bk])?;
                let v = tape.linear(nodes, bound[head.wv], bound[head.bv])?;
                let raw = tape.grouped_matmul_nt(q, k, group)?;
                let scaled = tape.scale(raw, scale)?;
                let weights = tape.softmax_rows(scaled)?;
                head_outputs.push(tape.grouped_matmul_nn(weights, v, group)?);
            }
            let concat = if head_outputs.len() == 1 {
                head_outputs[0]
            } else {
                tape.concat_cols(&head_outputs)?
            };
            let projected = tape.linear(concat, bound[layer.wo], bound[layer.bo])?;
            nodes = tape.add(nodes, projected)?;

            let f1 = tape.linear(nodes, bound[layer.w1], bound[layer.b1])?;
            let f1r = tape.relu(f1)?;
            let f2 = tape.linear(f1r, bound[layer.w2], bound[layer.b2])?;
            nodes = tape.add(nodes, f2)?;
        }
        Ok(nodes)
    }

    /// Attention weights of one layer/head over a single graph's states
    /// ((M+1) x l), for inspection and tests.
    pub fn attention_weights(
        &self,
        store: &ParamStore,
        layer: usize,
        head: usize,
        states: &Mat,
    ) -> Result<Mat> {
        let lay = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::contract(format!("no layer {}", layer)))?;
        let h = lay
            .heads
            .get(head)
            .ok_or_else(|| Error::contract(format!("no head {}", head)))?;
        let mut tape = Tape::new();
        let bound: Vec<NodeId> =
            store.params.iter().map(|p| tape.input(p.value.clone())).collect();
        let x = tape.input(states.clone());
        let q = tape.linear(x, bound[h.wq], bound[h.bq])?;
        let k = tape.linear(x, bound[h.wk], bound[h.bk])?;
        let raw = tape.grouped_matmul_nt(q, k, states.rows())?;
        let scaled = tape.scale(raw, 1.0 / (self.latent as f64).sqrt())?;
        let weights = tape.softmax_rows(scaled)?;
        Ok(tape.value(weights).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn forward_states(store: &ParamStore, enc: &TransformerEncoder, states: &Mat) -> Mat {
        let mut tape = Tape::new();
        let bound: Vec<NodeId> =
            store.params.iter().enumerate().map(|(i, p)| tape.param(p.value.clone(), i)).collect();
        let x = tape.input(states.clone());
        let out = enc.forward(&mut tape, &bound, x, states.rows()).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn identical_states_give_uniform_attention() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(7);
        let enc = TransformerEncoder::init(&mut store, &mut rng, 3, 2, 8, 1);
        let m1 = 5; // 4 features + CLS
        let mut states = Mat::zeros(m1, 3);
        for r in 0..m1 {
            states.row_mut(r).copy_from_slice(&[0.4, -0.2, 1.0]);
        }
        let w = enc.attention_weights(&store, 0, 0, &states).unwrap();
        for r in 0..m1 {
            for c in 0..m1 {
                assert!((w.at(r, c) - 1.0 / m1 as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(8);
        let enc = TransformerEncoder::init(&mut store, &mut rng, 4, 2, 16, 1);
        let states =
            Mat::from_vec(6, 4, (0..24).map(|i| (i as f64 * 0.77).sin() * 2.0).collect());
        let w = enc.attention_weights(&store, 0, 1, &states).unwrap();
        for r in 0..6 {
            let s: f64 = w.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {} sums to {}", r, s);
            assert!(w.row(r).iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn hand_computed_two_node_attention() {
        // l=1, h=1, Q=K=V=1 (biases 0), states [0], [1]:
        //   row scores: [0,0] -> [.5,.5]; [0,1] -> softmax
        //   ctx = [0.5, e/(1+e)]; output proj identity; residual adds input;
        //   FFN zeroed -> final [0.5, 1 + e/(1+e)]
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(9);
        let enc = TransformerEncoder::init(&mut store, &mut rng, 1, 1, 2, 1);
        let lay = &enc.layers[0];
        let h = &lay.heads[0];
        for pid in [h.wq, h.wk, h.wv, lay.wo] {
            store.params[pid].value = Mat::scalar(1.0);
        }
        for pid in [h.bq, h.bk, h.bv, lay.bo, lay.b2] {
            store.params[pid].value = Mat::zeros(1, 1);
        }
        store.params[lay.w1].value = Mat::zeros(1, 2);
        store.params[lay.b1].value = Mat::zeros(1, 2);
        store.params[lay.w2].value = Mat::zeros(2, 1);

        let states = Mat::from_vec(2, 1, vec![0.0, 1.0]);
        let out = forward_states(&store, &enc, &states);
        let e = std::f64::consts::E;
        let expect1 = 0.5;
        let expect2 = 1.0 + e / (1.0 + e);
        assert!((out.at(0, 0) - expect1).abs() < 1e-12, "{}", out.at(0, 0));
        assert!((out.at(1, 0) - expect2).abs() < 1e-12, "{}", out.at(1, 0));
    }

    #[test]
    fn zeroed_weights_are_exact_identity() {
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(10);
        let enc = TransformerEncoder::init(&mut store, &mut rng, 3, 2, 8, 2);
        for p in store.params.iter_mut() {
            p.value = Mat::zeros(p.value.rows(), p.value.cols());
        }
        let states = Mat::from_vec(4, 3, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect());
        let out = forward_states(&store, &enc, &states);
        assert_eq!(out, states);
    }

    #[test]
    fn cls_invariant_under_feature_permutation() {
        let (m, l) = (4, 3);
        let mut store = ParamStore::new();
        let mut rng = rng_from_seed(11);
        let enc = TransformerEncoder::init(&mut store, &mut rng, l, 2, 8, 2);
        let n = m + 1;
        let states =
            Mat::from_vec(n, l, (0..n * l).map(|i| ((i * 13 % 7) as f64 * 0.4).cos()).collect());
        let base = forward_states(&store, &enc, &states);

        let perm = [3usize, 1, 0, 2];
        let mut permuted = Mat::zeros(n, l);
        for j in 0..m {
            permuted.row_mut(j).copy_from_slice(states.row(perm[j]));
        }
        permuted.row_mut(m).copy_from_slice(states.row(m));
        let out = forward_states(&store, &enc, &permuted);
        for c in 0..l {
            assert!((base.at(m, c) - out.at(m, c)).abs() < 1e-9);
        }
    }
}
