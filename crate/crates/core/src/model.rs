//! Sequence model over fused check-in embeddings: sinusoidal positional
//! encoding, a causal multi-head transformer encoder, three affine decoder
//! heads (next POI, next visit time, next category), the transition-score
//! residual on POI logits, the operational-hours filter, and the joint loss
//! L_final = L_poi + 10 * L_time + L_cat.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::hours::OperationalHoursTable;
use crate::dataio::PoiCatalog;
use crate::embeddings::EmbedConfig;
use crate::error::{CoreError, Result};
use crate::gnn::{uniform_init, GcnConfig};
use crate::numcore::rng::Rng;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub user_count: usize,
    pub poi_count: usize,
    pub category_count: usize,
    /// Width of raw graph node features (one-hot category + 3).
    pub feature_dim: usize,
    pub gcn_layers: usize,
    pub omega: usize,
    pub psi: usize,
    pub sigma: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// Check-in embedding width d = 2*Omega + 2*Psi + 2*Sigma.
    pub fn d(&self) -> usize {
        self.embed_config().checkin_dim()
    }

    pub fn gcn_config(&self) -> GcnConfig {
        GcnConfig {
            layers: self.gcn_layers,
            hidden: self.omega,
            dropout: self.dropout,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn embed_config(&self) -> EmbedConfig {
        EmbedConfig {
            omega: self.omega,
            psi: self.psi,
            sigma: self.sigma,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d() % self.heads != 0 {
            return Err(CoreError::contract(format!(
                "embedding width {} must be divisible by head count {}",
                self.d(),
                self.heads
            )));
        }
        if self.poi_count == 0 || self.user_count == 0 || self.category_count == 0 {
            return Err(CoreError::contract(
                "model needs at least one user, POI, and category",
            ));
        }
        Ok(())
    }
}

/// Initialize every parameter tensor of the full model, keyed by name.
pub fn init_model_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<BTreeMap<String, Tensor>> {
    cfg.validate()?;
    let mut params = BTreeMap::new();
    crate::gnn::init_gcn_params(&cfg.gcn_config(), cfg.feature_dim, rng, &mut params);
    crate::gnn::init_attention_params(cfg.feature_dim, rng, &mut params);
    crate::embeddings::init_embedding_params(
        &cfg.embed_config(),
        cfg.user_count,
        cfg.category_count,
        rng,
        &mut params,
    );
    let d = cfg.d();
    let dh = d / cfg.heads;
    for l in 1..=cfg.encoder_layers {
        for h in 1..=cfg.heads {
            params.insert(format!("enc{l}.h{h}.wq"), uniform_init(rng, d, dh));
            params.insert(format!("enc{l}.h{h}.wk"), uniform_init(rng, d, dh));
            params.insert(format!("enc{l}.h{h}.wv"), uniform_init(rng, d, dh));
        }
        params.insert(format!("enc{l}.wo"), uniform_init(rng, d, d));
        params.insert(format!("enc{l}.ln1.g"), Tensor::vector(vec![1.0; d]));
        params.insert(format!("enc{l}.ln1.b"), Tensor::zeros(vec![d]));
        params.insert(format!("enc{l}.ffn.w1"), uniform_init(rng, d, cfg.ff_dim));
        params.insert(format!("enc{l}.ffn.b1"), Tensor::zeros(vec![cfg.ff_dim]));
        params.insert(format!("enc{l}.ffn.w2"), uniform_init(rng, cfg.ff_dim, d));
        params.insert(format!("enc{l}.ffn.b2"), Tensor::zeros(vec![d]));
        params.insert(format!("enc{l}.ln2.g"), Tensor::vector(vec![1.0; d]));
        params.insert(format!("enc{l}.ln2.b"), Tensor::zeros(vec![d]));
    }
    params.insert("head.poi.w".into(), uniform_init(rng, d, cfg.poi_count));
    params.insert("head.poi.b".into(), Tensor::zeros(vec![cfg.poi_count]));
    params.insert("head.time.w".into(), uniform_init(rng, d, 1));
    params.insert("head.time.b".into(), Tensor::zeros(vec![1]));
    params.insert("head.cat.w".into(), uniform_init(rng, d, cfg.category_count));
    params.insert("head.cat.b".into(), Tensor::zeros(vec![cfg.category_count]));
    Ok(params)
}

/// Fixed sinusoidal positional encodings for k positions of width d.
pub fn positional_encoding(k: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(vec![k, d]);
    for pos in 0..k {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            pe.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}

/// Add fixed sinusoidal position encodings to the input sequence.
pub fn positional_encode(tape: &mut Tape, x: Var) -> Result<Var> {
    let (k, d) = (tape.value(x).rows(), tape.value(x).cols());
    let pe = tape.constant(positional_encoding(k, d));
    tape.add(x, pe)
}

/// allowed[i][j]: position i may attend to j iff j <= i and j is a real
/// (non-padded) position.
fn causal_mask(k: usize, valid_len: usize) -> Vec<bool> {
    let mut allowed = vec![false; k * k];
    for i in 0..k {
        for j in 0..k {
            allowed[i * k + j] = j <= i && j < valid_len.max(1);
        }
    }
    allowed
}

/// Causal multi-head encoder stack. `valid_len` marks how many leading rows
/// of `x` are real check-ins; padded rows never serve as attention keys.
pub fn encoder_forward(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    x: Var,
    valid_len: usize,
    training: bool,
    rng: &mut Rng,
) -> Result<Var> {
    cfg.validate()?;
    let k = tape.value(x).rows();
    let allowed = causal_mask(k, valid_len);
    let mut h = x;
    for l in 1..=cfg.encoder_layers {
        let mut heads = Vec::with_capacity(cfg.heads);
        for hd in 1..=cfg.heads {
            let q = tape.matmul(h, vars[&format!("enc{l}.h{hd}.wq")])?;
            let key = tape.matmul(h, vars[&format!("enc{l}.h{hd}.wk")])?;
            let v = tape.matmul(h, vars[&format!("enc{l}.h{hd}.wv")])?;
            let kt = tape.transpose(key);
            let scores = tape.matmul(q, kt)?;
            let attn = tape.masked_softmax_rows(scores, allowed.clone())?;
            let attn = tape.dropout(attn, cfg.dropout, training, rng)?;
            heads.push(tape.matmul(attn, v)?);
        }
        let multi = tape.concat_cols(&heads)?;
        let mixed = tape.matmul(multi, vars[&format!("enc{l}.wo")])?;
        let res1 = tape.add(h, mixed)?;
        let norm1 = tape.layer_norm(
            res1,
            vars[&format!("enc{l}.ln1.g")],
            vars[&format!("enc{l}.ln1.b")],
        )?;
        let f1 = tape.matmul(norm1, vars[&format!("enc{l}.ffn.w1")])?;
        let f1 = tape.add_row_bias(f1, vars[&format!("enc{l}.ffn.b1")])?;
        let f1 = tape.relu(f1);
        let f2 = tape.matmul(f1, vars[&format!("enc{l}.ffn.w2")])?;
        let f2 = tape.add_row_bias(f2, vars[&format!("enc{l}.ffn.b2")])?;
        let f2 = tape.dropout(f2, cfg.dropout, training, rng)?;
        let res2 = tape.add(norm1, f2)?;
        h = tape.layer_norm(
            res2,
            vars[&format!("enc{l}.ln2.g")],
            vars[&format!("enc{l}.ln2.b")],
        )?;
    }
    Ok(h)
}

/// Decoder head outputs: POI logits (k x N), visit time (k x 1), category
/// logits (k x |cat|).
#[derive(Clone, Copy, Debug)]
pub struct PredictionTriple {
    pub poi: Var,
    pub time: Var,
    pub cat: Var,
}

pub fn decode(tape: &mut Tape, vars: &BTreeMap<String, Var>, x_out: Var) -> Result<PredictionTriple> {
    let affine = |tape: &mut Tape, w: Var, b: Var| -> Result<Var> {
        let y = tape.matmul(x_out, w)?;
        tape.add_row_bias(y, b)
    };
    Ok(PredictionTriple {
        poi: affine(tape, vars["head.poi.w"], vars["head.poi.b"])?,
        time: affine(tape, vars["head.time.w"], vars["head.time.b"])?,
        cat: affine(tape, vars["head.cat.w"], vars["head.cat.b"])?,
    })
}

/// adjusted[i] = poi_logits[i] + Phi[current_poi_ids[i], :].
pub fn apply_transition_residual(
    tape: &mut Tape,
    poi_logits: Var,
    phi: Var,
    current_poi_ids: &[usize],
) -> Result<Var> {
    if current_poi_ids.len() != tape.value(poi_logits).rows() {
        return Err(CoreError::contract(
            "one current POI id required per logit row",
        ));
    }
    let rows = tape.gather_rows(phi, current_poi_ids.to_vec())?;
    tape.add(poi_logits, rows)
}

/// Inference-only masking of closed POIs: returns the filtered logits and a
/// flag set when every POI was closed (in which case the input is returned
/// unchanged as a fallback).
pub fn operational_filter(
    logits: &[f64],
    catalog: &PoiCatalog,
    table: &OperationalHoursTable,
    query_local_ts: i64,
) -> (Vec<f64>, bool) {
    let filtered: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(poi, &v)| {
            if table.is_open(poi, catalog.pois[poi].category_id, query_local_ts) {
                v
            } else {
                f64::NEG_INFINITY
            }
        })
        .collect();
    if filtered.iter().all(|v| *v == f64::NEG_INFINITY) {
        (logits.to_vec(), true)
    } else {
        (filtered, false)
    }
}

/// Supervision for one trajectory: position i predicts check-in i+1. The
/// final position (and any padding) is masked out.
#[derive(Clone, Debug)]
pub struct SequenceTargets {
    pub next_poi: Vec<usize>,
    pub next_cat: Vec<usize>,
    /// Normalized next time-of-day in [0,1), as a k x 1 tensor.
    pub next_time: Tensor,
    pub mask: Vec<bool>,
}

/// Scalar loss node plus component values for logging.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub poi: f64,
    pub time: f64,
    pub cat: f64,
    pub positions: usize,
}

impl LossBreakdown {
    pub fn total_value(&self, tape: &Tape) -> f64 {
        tape.value(self.total).scalar_value()
    }
}

/// L_final = L_poi + 10 * L_time + L_cat, means over unmasked positions.
/// `poi_logits` should already carry the transition residual; the operational
/// filter is never applied here.
pub fn joint_loss(
    tape: &mut Tape,
    preds: &PredictionTriple,
    targets: &SequenceTargets,
    poi_logits: Var,
) -> Result<LossBreakdown> {
    let count = targets.mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(CoreError::DegenerateBatch(
            "no supervised positions in batch".into(),
        ));
    }
    let inv = 1.0 / count as f64;
    let poi_sum = tape.cross_entropy_sum(poi_logits, targets.next_poi.clone(), targets.mask.clone())?;
    let poi = tape.scale(poi_sum, inv);
    let time_sum = tape.mse_sum(preds.time, targets.next_time.clone(), targets.mask.clone())?;
    let time = tape.scale(time_sum, inv);
    let cat_sum = tape.cross_entropy_sum(preds.cat, targets.next_cat.clone(), targets.mask.clone())?;
    let cat = tape.scale(cat_sum, inv);
    let time10 = tape.scale(time, 10.0);
    let pt = tape.add(poi, time10)?;
    let total = tape.add(pt, cat)?;
    Ok(LossBreakdown {
        total,
        poi: tape.value(poi).scalar_value(),
        time: tape.value(time).scalar_value(),
        cat: tape.value(cat).scalar_value(),
        positions: count,
    })
}
