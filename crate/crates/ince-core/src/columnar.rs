//! Per-feature ("columnar") embeddings: every heterogeneous column is
//! projected into the shared l-dimensional latent space, independently of
//! all other columns.
//!
//! Numerical feature j:  c = relu(b_j + x * W_j)   (W_j a learnable vector)
//! Categorical feature j: c = b_j + table_j[code]  (no activation)

use crate::adam::ParamStore;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::{uniform_symmetric, EngineRng};
use crate::tape::{NodeId, ParamId, Tape};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnarEmbedder {
    pub l: usize,
    /// (weight 1xl, bias 1xl) per numerical feature, schema order.
    pub numerical: Vec<(ParamId, ParamId)>,
    /// (lookup table card x l, bias 1xl) per categorical feature.
    pub categorical: Vec<(ParamId, ParamId)>,
    /// Table cardinalities (observed values + 1 reserved missing code).
    pub cardinalities: Vec<usize>,
}

impl ColumnarEmbedder {
    /// Register one independent parameter set per feature.
    pub fn init(
        store: &mut ParamStore,
        rng: &mut EngineRng,
        l: usize,
        n_numerical: usize,
        cardinalities: &[usize],
    ) -> Self {
        let bound = 1.0 / (l as f64).sqrt();
        let mut numerical = Vec::with_capacity(n_numerical);
        for j in 0..n_numerical {
            let mut w = Mat::zeros(1, l);
            for v in w.data_mut() {
                *v = uniform_symmetric(rng, bound);
            }
            let wid = store.add(format!("embed.num{}.w", j), w);
            let bid = store.add(format!("embed.num{}.b", j), Mat::zeros(1, l));
            numerical.push((wid, bid));
        }
        let mut categorical = Vec::with_capacity(cardinalities.len());
        for (j, &card) in cardinalities.iter().enumerate() {
            let mut table = Mat::zeros(card, l);
            for v in table.data_mut() {
                *v = uniform_symmetric(rng, bound);
            }
            let tid = store.add(format!("embed.cat{}.table", j), table);
            let bid = store.add(format!("embed.cat{}.b", j), Mat::zeros(1, l));
            categorical.push((tid, bid));
        }
        ColumnarEmbedder { l, numerical, categorical, cardinalities: cardinalities.to_vec() }
    }

    pub fn n_features(&self) -> usize {
        self.numerical.len() + self.categorical.len()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for &(w, b) in &self.numerical {
            ids.push(w);
            ids.push(b);
        }
        for &(t, b) in &self.categorical {
            ids.push(t);
            ids.push(b);
        }
        ids
    }

    /// Embed a batch: one B x l tape node per feature, ordered numericals
    /// then categoricals (schema feature order).
    ///
    /// `bound[pid]` must map parameter ids to their tape leaves.
    pub fn embed_batch(
        &self,
        tape: &mut Tape,
        bound: &[NodeId],
        numerical: &Mat,
        cat_codes: &[u32],
        batch: usize,
    ) -> Result<Vec<NodeId>> {
        if numerical.rows() != batch || numerical.cols() != self.numerical.len() {
            return Err(Error::contract(format!(
                "embed_batch: numerical {}x{}, expected {}x{}",
                numerical.rows(),
                numerical.cols(),
                batch,
                self.numerical.len()
            )));
        }
        let n_cat = self.categorical.len();
        if cat_codes.len() != batch * n_cat {
            return Err(Error::contract(format!(
                "embed_batch: {} codes, expected {}",
                cat_codes.len(),
                batch * n_cat
            )));
        }
        let mut features = Vec::with_capacity(self.n_features());
        for (j, &(wid, bid)) in self.numerical.iter().enumerate() {
            let col: Vec<f64> = (0..batch).map(|r| numerical.at(r, j)).collect();
            let x = tape.input(Mat::from_vec(batch, 1, col));
            let lin = tape.linear(x, bound[wid], bound[bid])?;
            features.push(tape.relu(lin)?);
        }
        for (j, &(tid, bid)) in self.categorical.iter().enumerate() {
            let card = self.cardinalities[j] as u32;
            let mut idx = Vec::with_capacity(batch);
            for r in 0..batch {
                let code = cat_codes[r * n_cat + j];
                if code >= card {
                    return Err(Error::contract(format!(
                        "embed_batch: code {} out of range for categorical feature {} (cardinality {})",
                        code, j, card
                    )));
                }
                idx.push(code);
            }
            let gathered = tape.gather_rows(bound[tid], Arc::new(idx))?;
            features.push(tape.add_row_broadcast(gathered, bound[bid])?);
        }
        Ok(features)
    }

    /// Embed a single row into an M x l matrix (forward values only).
    pub fn embed_row(
        &self,
        store: &ParamStore,
        numerical: &[f64],
        cat_codes: &[u32],
    ) -> Result<Mat> {
        let mut tape = Tape::new();
        let bound: Vec<NodeId> =
            store.params.iter().map(|p| tape.input(p.value.clone())).collect();
        let num = Mat::from_vec(1, numerical.len(), numerical.to_vec());
        let features = self.embed_batch(&mut tape, &bound, &num, cat_codes, 1)?;
        let mut out = Mat::zeros(features.len(), self.l);
        for (j, &f) in features.iter().enumerate() {
            out.row_mut(j).copy_from_slice(tape.value(f).row(0));
        }
        Ok(out)
    }
}
