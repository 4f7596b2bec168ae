//! Contextual embedding fusion: each check-in becomes
//! e_q = [e_pu ; e_ct ; e_sp] where the three blocks fuse POI-user,
//! time-category, and season-POI embeddings through square affine layers
//! with LeakyReLU.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::gnn::uniform_init;
use crate::numcore::rng::Rng;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct EmbedConfig {
    /// POI / user embedding width.
    pub omega: usize,
    /// Time / category embedding width.
    pub psi: usize,
    /// Season embedding width.
    pub sigma: usize,
    pub leaky_slope: f64,
}

impl EmbedConfig {
    /// Check-in embedding width d = 2*Omega + 2*Psi + 2*Sigma.
    pub fn checkin_dim(&self) -> usize {
        2 * (self.omega + self.psi + self.sigma)
    }
}

pub fn normal_init(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.normal(std)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn init_embedding_params(
    cfg: &EmbedConfig,
    user_count: usize,
    category_count: usize,
    rng: &mut Rng,
    params: &mut BTreeMap<String, Tensor>,
) {
    params.insert("emb.user".into(), normal_init(rng, user_count, cfg.omega, 0.02));
    params.insert("emb.cat".into(), normal_init(rng, category_count, cfg.psi, 0.02));
    params.insert("emb.season".into(), normal_init(rng, 4, cfg.sigma, 0.02));
    params.insert("time.omega".into(), Tensor::vector((0..cfg.psi).map(|_| rng.uniform(-1.0, 1.0)).collect()));
    params.insert("time.phi".into(), Tensor::vector((0..cfg.psi).map(|_| rng.uniform(-1.0, 1.0)).collect()));
    for (name, w) in [("pu", cfg.omega), ("ct", cfg.psi), ("sp", cfg.sigma)] {
        params.insert(format!("fuse.{name}.w"), uniform_init(rng, 2 * w, 2 * w));
        params.insert(format!("fuse.{name}.b"), Tensor::zeros(vec![2 * w]));
    }
    if cfg.sigma != cfg.omega {
        params.insert("fuse.sp.proj".into(), uniform_init(rng, cfg.omega, cfg.sigma));
    }
}

/// Concatenate two equal-row blocks, apply the square affine transform, then
/// LeakyReLU.
fn fuse(
    tape: &mut Tape,
    left: Var,
    right: Var,
    weight: Var,
    bias: Var,
    slope: f64,
) -> Result<Var> {
    let cat = tape.concat_cols(&[left, right])?;
    let affine = tape.matmul(cat, weight)?;
    let biased = tape.add_row_bias(affine, bias)?;
    tape.leaky_relu(biased, slope)
}

/// Per-check-in inputs of one trajectory, already resolved to dense ids.
#[derive(Clone, Debug)]
pub struct SequenceInputs {
    pub user_id: usize,
    pub poi_ids: Vec<usize>,
    pub category_ids: Vec<usize>,
    pub season_ids: Vec<usize>,
    /// Local time-of-day in [0,1) per check-in.
    pub t_norms: Vec<f64>,
}

impl SequenceInputs {
    pub fn len(&self) -> usize {
        self.poi_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poi_ids.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let k = self.poi_ids.len();
        if self.category_ids.len() != k || self.season_ids.len() != k || self.t_norms.len() != k {
            return Err(CoreError::contract(
                "sequence input columns have unequal lengths",
            ));
        }
        Ok(())
    }
}

/// Embed a whole check-in sequence: k x d matrix of fused embeddings.
/// `poi_embeddings` is the current GCN output (N x Omega) on the same tape.
pub fn sequence_embedding(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &EmbedConfig,
    poi_embeddings: Var,
    seq: &SequenceInputs,
) -> Result<Var> {
    seq.validate()?;
    let k = seq.len();
    let poi_rows = tape.gather_rows(poi_embeddings, seq.poi_ids.clone())?;
    let user_rows = tape.gather_rows(vars["emb.user"], vec![seq.user_id; k])?;
    let cat_rows = tape.gather_rows(vars["emb.cat"], seq.category_ids.clone())?;
    let season_rows = tape.gather_rows(vars["emb.season"], seq.season_ids.clone())?;
    let time_rows = tape.time2vec(seq.t_norms.clone(), vars["time.omega"], vars["time.phi"])?;

    let e_pu = fuse(
        tape,
        poi_rows,
        user_rows,
        vars["fuse.pu.w"],
        vars["fuse.pu.b"],
        cfg.leaky_slope,
    )?;
    let e_ct = fuse(
        tape,
        time_rows,
        cat_rows,
        vars["fuse.ct.w"],
        vars["fuse.ct.b"],
        cfg.leaky_slope,
    )?;
    let poi_for_season = if cfg.sigma != cfg.omega {
        tape.matmul(poi_rows, vars["fuse.sp.proj"])?
    } else {
        poi_rows
    };
    let e_sp = fuse(
        tape,
        season_rows,
        poi_for_season,
        vars["fuse.sp.w"],
        vars["fuse.sp.b"],
        cfg.leaky_slope,
    )?;
    tape.concat_cols(&[e_pu, e_ct, e_sp])
}
