//! Closed-form trainable-parameter counts for both contextual encoders,
//! verified against actually constructed models.
//!
//! Interaction stack (per layer i, latent l, MLP depth d):
//!   TP(MLP_N) = (2l^2 + l) + (d-1)(l^2 + l)
//!   TP(MLP_E^i) = (K_i l^2 + l) + (d-1)(l^2 + l),  K_1 = 2, K_i = 3 for i > 1
//! (the first layer's MLP_E sees no incoming edge state, so its input is 2l).
//!
//! Transformer (per layer): 3hl(l+1) QKV + l(hl+1) output projection +
//! (2fl + f + l) feed-forward. Normalization layers do not exist in these
//! encoders, so the formulas are exact.

use crate::adam::ParamStore;
use crate::error::{Error, Result};
use crate::in_encoder::InEncoder;
use crate::rng::rng_from_seed;
use crate::transformer::TransformerEncoder;
use serde::{Deserialize, Serialize};

/// Trainable parameters of a stack of interaction-network layers.
pub fn tp_in(l: u64, d: u64, n: u64) -> Result<u64> {
    if l == 0 || d == 0 || n == 0 {
        return Err(Error::contract("tp_in: l, d, n must all be >= 1"));
    }
    let hidden = (d - 1) * (l * l + l);
    let mlp_n = (2 * l * l + l) + hidden;
    let mut total = 0;
    for i in 1..=n {
        let k = if i == 1 { 2 } else { 3 };
        let mlp_e = (k * l * l + l) + hidden;
        total += mlp_e + mlp_n;
    }
    Ok(total)
}

/// Trainable parameters of a stack of transformer-encoder layers.
pub fn tp_transformer(l: u64, h: u64, f: u64, n: u64) -> Result<u64> {
    if l == 0 || h == 0 || f == 0 || n == 0 {
        return Err(Error::contract("tp_transformer: l, h, f, n must all be >= 1"));
    }
    let qkv = 3 * h * l * (l + 1);
    let multi = l * (h * l + 1);
    let ff = 2 * f * l + f + l;
    Ok(n * (qkv + multi + ff))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockCount {
    pub block: String,
    pub count: u64,
}

/// Analytic-vs-constructed comparison for one encoder configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCountReport {
    pub encoder: String,
    pub latent: u64,
    pub depth: Option<u64>,
    pub stack: u64,
    pub heads: Option<u64>,
    pub ff: Option<u64>,
    pub analytic: u64,
    pub constructed: u64,
    pub per_block: Vec<BlockCount>,
    /// analytic / analytic(baseline), when a baseline was given.
    pub normalized: Option<f64>,
    pub matches: bool,
}

/// Build a real interaction encoder and compare its parameter count with the
/// closed form, block by block.
pub fn verify_in_counts(l: u64, d: u64, n: u64, baseline: Option<u64>) -> Result<ParamCountReport> {
    let analytic = tp_in(l, d, n)?;
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(0);
    let enc = InEncoder::init(&mut store, &mut rng, l as usize, d as usize, n as usize);
    let constructed = enc.param_count(&store) as u64;
    let mut per_block = Vec::new();
    for (i, layer) in enc.layers.iter().enumerate() {
        per_block.push(BlockCount {
            block: format!("layer{}.mlp_e", i + 1),
            count: layer.mlp_e.param_count(&store) as u64,
        });
        per_block.push(BlockCount {
            block: format!("layer{}.mlp_n", i + 1),
            count: layer.mlp_n.param_count(&store) as u64,
        });
    }
    let normalized = baseline.map(|b| analytic as f64 / b as f64);
    Ok(ParamCountReport {
        encoder: "in".to_string(),
        latent: l,
        depth: Some(d),
        stack: n,
        heads: None,
        ff: None,
        analytic,
        constructed,
        per_block,
        normalized,
        matches: analytic == constructed,
    })
}

/// Build a real transformer encoder and compare with the closed form.
pub fn verify_transformer_counts(
    l: u64,
    h: u64,
    f: u64,
    n: u64,
    baseline: Option<u64>,
) -> Result<ParamCountReport> {
    let analytic = tp_transformer(l, h, f, n)?;
    let mut store = ParamStore::new();
    let mut rng = rng_from_seed(0);
    let enc =
        TransformerEncoder::init(&mut store, &mut rng, l as usize, h as usize, f as usize, n as usize);
    let constructed = enc.param_count(&store) as u64;
    let mut per_block = Vec::new();
    for (i, layer) in enc.layers.iter().enumerate() {
        let qkv: usize = layer
            .heads
            .iter()
            .flat_map(|hd| [hd.wq, hd.bq, hd.wk, hd.bk, hd.wv, hd.bv])
            .map(|id| store.value(id).len())
            .sum();
        let multi = store.value(layer.wo).len() + store.value(layer.bo).len();
        let ffn = store.value(layer.w1).len()
            + store.value(layer.b1).len()
            + store.value(layer.w2).len()
            + store.value(layer.b2).len();
        per_block.push(BlockCount { block: format!("layer{}.qkv", i + 1), count: qkv as u64 });
        per_block.push(BlockCount {
            block: format!("layer{}.multi_attention", i + 1),
            count: multi as u64,
        });
        per_block.push(BlockCount {
            block: format!("layer{}.feed_forward", i + 1),
            count: ffn as u64,
        });
    }
    let normalized = baseline.map(|b| analytic as f64 / b as f64);
    Ok(ParamCountReport {
        encoder: "transformer".to_string(),
        latent: l,
        depth: None,
        stack: n,
        heads: Some(h),
        ff: Some(f),
        analytic,
        constructed,
        per_block,
        normalized,
        matches: analytic == constructed,
    })
}

/// Render a report as an aligned text table.
pub fn report_table(report: &ParamCountReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "encoder={} l={} {}n={}{}\n",
        report.encoder,
        report.latent,
        report.depth.map(|d| format!("d={} ", d)).unwrap_or_default(),
        report.stack,
        match (report.heads, report.ff) {
            (Some(h), Some(f)) => format!(" h={} f={}", h, f),
            _ => String::new(),
        }
    ));
    let width = report.per_block.iter().map(|b| b.block.len()).max().unwrap_or(10).max(11);
    for b in &report.per_block {
        out.push_str(&format!("  {:width$}  {:>12}\n", b.block, b.count, width = width));
    }
    out.push_str(&format!("  {:width$}  {:>12}\n", "analytic", report.analytic, width = width));
    out.push_str(&format!(
        "  {:width$}  {:>12}\n",
        "constructed",
        report.constructed,
        width = width
    ));
    if let Some(nz) = report.normalized {
        out.push_str(&format!("  {:width$}  {:>12.6}\n", "normalized", nz, width = width));
    }
    out.push_str(&format!(
        "  {:width$}  {:>12}\n",
        "match",
        if report.matches { "yes" } else { "NO" },
        width = width
    ));
    out
}
