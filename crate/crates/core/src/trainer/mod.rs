//! Training, evaluation, and the alpha/beta sweep.

pub mod baselines;
pub mod checkpoint;
pub mod metrics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dataio::preprocess::DatasetSplit;
use crate::dataio::{PoiCatalog, Trajectory};
use crate::embeddings::SequenceInputs;
use crate::error::{CoreError, Result};
use crate::flowgraph::{build_flow_map, normalized_laplacian, EdgeWeightMode};
use crate::model::{
    apply_transition_residual, decode, encoder_forward, joint_loss, positional_encode,
    ModelConfig, SequenceTargets,
};
use crate::numcore::optim::AdamW;
use crate::numcore::rng::{Rng, Stream};
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;
use crate::popularity::{compute_popularity, default_cutoff, PopularityParams, PopularityTable};
use crate::trainer::metrics::{rank_of, report_from_ranks, EvalReport};

pub const LR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub lr_scheduler_factor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub alpha: f64,
    pub beta: f64,
    pub scheduler_patience: usize,
    pub eval_ks: Vec<usize>,
    pub omega: usize,
    pub psi: usize,
    pub sigma: usize,
    pub gcn_layers: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    /// Feed-forward width; 0 means 4*d.
    pub ff_dim: usize,
    /// Trailing window (days) separating "recent" from "past" popularity.
    pub recent_days: i64,
    pub leaky_slope: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 200,
            dropout: 0.3,
            lr_scheduler_factor: 0.1,
            weight_decay: 5e-4,
            seed: 42,
            alpha: 0.5,
            beta: 0.33,
            scheduler_patience: 5,
            eval_ks: vec![1, 5, 10, 20],
            omega: 128,
            psi: 32,
            sigma: 32,
            gcn_layers: 2,
            encoder_layers: 2,
            heads: 2,
            ff_dim: 0,
            recent_days: 90,
            leaky_slope: 0.2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.heads == 0 {
            return Err(CoreError::contract(
                "batch_size and heads must be positive",
            ));
        }
        if self.learning_rate <= 0.0 || self.lr_scheduler_factor <= 0.0 {
            return Err(CoreError::contract(
                "learning rate and scheduler factor must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(CoreError::contract(format!(
                "alpha and beta must lie in [0,1], got alpha={} beta={}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Apply one `key = value` setting; unknown keys are rejected.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| CoreError::contract(format!("bad value for {key}: {what}"));
        macro_rules! parse {
            () => {
                value.trim().parse().map_err(|_| bad(value))?
            };
        }
        match key.trim() {
            "learning_rate" => self.learning_rate = parse!(),
            "batch_size" => self.batch_size = parse!(),
            "epochs" => self.epochs = parse!(),
            "dropout" => self.dropout = parse!(),
            "lr_scheduler_factor" => self.lr_scheduler_factor = parse!(),
            "weight_decay" => self.weight_decay = parse!(),
            "seed" => self.seed = parse!(),
            "alpha" => self.alpha = parse!(),
            "beta" => self.beta = parse!(),
            "scheduler_patience" => self.scheduler_patience = parse!(),
            "eval_ks" => {
                self.eval_ks = value
                    .split(',')
                    .map(|v| v.trim().parse().map_err(|_| bad(v)))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "omega" => self.omega = parse!(),
            "psi" => self.psi = parse!(),
            "sigma" => self.sigma = parse!(),
            "gcn_layers" => self.gcn_layers = parse!(),
            "encoder_layers" => self.encoder_layers = parse!(),
            "heads" => self.heads = parse!(),
            "ff_dim" => self.ff_dim = parse!(),
            "recent_days" => self.recent_days = parse!(),
            "leaky_slope" => self.leaky_slope = parse!(),
            other => {
                return Err(CoreError::contract(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn model_config(&self, split: &DatasetSplit) -> ModelConfig {
        let mut cfg = ModelConfig {
            user_count: split.user_count(),
            poi_count: split.poi_count(),
            category_count: split.category_count(),
            feature_dim: split.category_count() + 3,
            gcn_layers: self.gcn_layers,
            omega: self.omega,
            psi: self.psi,
            sigma: self.sigma,
            encoder_layers: self.encoder_layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
            leaky_slope: self.leaky_slope,
        };
        if cfg.ff_dim == 0 {
            cfg.ff_dim = 4 * cfg.d();
        }
        cfg
    }
}

/// Immutable graph-side inputs shared by every forward pass.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub features: Tensor,
    pub laplacian: Tensor,
    pub laplacian_shifted: Tensor,
    pub popularity: PopularityTable,
}

pub fn build_graph_context(
    split: &DatasetSplit,
    catalog: &PoiCatalog,
    cfg: &TrainConfig,
) -> Result<GraphContext> {
    let train_checkins: Vec<_> = split
        .train
        .iter()
        .flat_map(|t| t.checkins.iter().cloned())
        .collect();
    let cutoff = default_cutoff(&train_checkins, cfg.recent_days);
    let popularity = compute_popularity(
        &train_checkins,
        catalog.poi_count(),
        PopularityParams {
            alpha: cfg.alpha,
            beta: cfg.beta,
            recent_cutoff: cutoff,
        },
    )?;
    let map = build_flow_map(&split.train, catalog, &popularity, EdgeWeightMode::TransitionCount)?;
    let laplacian = normalized_laplacian(&map.adjacency())?;
    let laplacian_shifted = crate::gnn::shift_laplacian(&laplacian);
    Ok(GraphContext {
        features: map.node_features(),
        laplacian,
        laplacian_shifted,
        popularity,
    })
}

/// Trained model snapshot.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

pub fn sequence_inputs(traj: &Trajectory) -> SequenceInputs {
    SequenceInputs {
        user_id: traj.user_id,
        poi_ids: traj.checkins.iter().map(|c| c.poi_id).collect(),
        category_ids: traj.checkins.iter().map(|c| c.category_id).collect(),
        season_ids: traj
            .checkins
            .iter()
            .map(|c| {
                crate::dataio::assign_season(c.local_timestamp(), crate::dataio::Hemisphere::North)
                    .index()
            })
            .collect(),
        t_norms: traj.checkins.iter().map(|c| c.time_of_day_norm()).collect(),
    }
}

/// Position i predicts check-in i+1; the last position is masked.
pub fn sequence_targets(traj: &Trajectory) -> SequenceTargets {
    let k = traj.len();
    let mut next_poi = vec![0; k];
    let mut next_cat = vec![0; k];
    let mut next_time = vec![0.0; k];
    let mut mask = vec![false; k];
    for i in 0..k.saturating_sub(1) {
        let nxt = &traj.checkins[i + 1];
        next_poi[i] = nxt.poi_id;
        next_cat[i] = nxt.category_id;
        next_time[i] = nxt.time_of_day_norm();
        mask[i] = true;
    }
    SequenceTargets {
        next_poi,
        next_cat,
        next_time: Tensor::matrix(k, 1, next_time).unwrap(),
        mask,
    }
}

fn register(tape: &mut Tape, params: &BTreeMap<String, Tensor>) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(k, v.clone())))
        .collect()
}

struct SequenceOutcome {
    adjusted_logits: Var,
    loss: Option<crate::model::LossBreakdown>,
}

/// One full forward over a trajectory on an existing tape with GCN output and
/// transition map already computed.
#[allow(clippy::too_many_arguments)]
fn trajectory_forward(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &ModelConfig,
    e_p: Var,
    phi: Var,
    traj: &Trajectory,
    training: bool,
    with_loss: bool,
    rng: &mut Rng,
) -> Result<SequenceOutcome> {
    let seq = sequence_inputs(traj);
    let e_q = crate::embeddings::sequence_embedding(tape, vars, &cfg.embed_config(), e_p, &seq)?;
    let x0 = positional_encode(tape, e_q)?;
    let out = encoder_forward(tape, vars, cfg, x0, seq.len(), training, rng)?;
    let preds = decode(tape, vars, out)?;
    let adjusted = apply_transition_residual(tape, preds.poi, phi, &seq.poi_ids)?;
    let loss = if with_loss {
        let targets = sequence_targets(traj);
        Some(joint_loss(tape, &preds, &targets, adjusted)?)
    } else {
        None
    };
    Ok(SequenceOutcome {
        adjusted_logits: adjusted,
        loss,
    })
}

/// Mean L_final over a set of trajectories with dropout off; also returns
/// component means.
fn evaluate_loss(
    state: &ModelState,
    ctx: &GraphContext,
    trajectories: &[Trajectory],
) -> Result<(f64, f64, f64, f64)> {
    if trajectories.is_empty() {
        return Err(CoreError::DegenerateDataset(
            "loss evaluation needs at least one trajectory".into(),
        ));
    }
    let mut tape = Tape::new();
    let vars: BTreeMap<String, Var> = state
        .params
        .iter()
        .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
        .collect();
    let xv = tape.constant(ctx.features.clone());
    let lv = tape.constant(ctx.laplacian.clone());
    let sv = tape.constant(ctx.laplacian_shifted.clone());
    let mut rng = Rng::new(0, Stream::Dropout);
    let e_p = crate::gnn::gcn_forward(
        &mut tape, &vars, xv, lv, &state.config.gcn_config(), false, &mut rng,
    )?;
    let phi = crate::gnn::transition_attention(&mut tape, &vars, xv, sv)?;
    let (mut total, mut poi, mut time, mut cat) = (0.0, 0.0, 0.0, 0.0);
    for traj in trajectories {
        let out = trajectory_forward(
            &mut tape, &vars, &state.config, e_p, phi, traj, false, true, &mut rng,
        )?;
        let l = out.loss.unwrap();
        total += l.total_value(&tape);
        poi += l.poi;
        time += l.time;
        cat += l.cat;
    }
    let n = trajectories.len() as f64;
    Ok((total / n, poi / n, time / n, cat / n))
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_poi: f64,
    pub train_time: f64,
    pub train_cat: f64,
    pub train_total: f64,
    pub val_total: f64,
}

pub fn epoch_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_l_poi,train_l_time,train_l_cat,train_l_final,val_l_final\n");
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.learning_rate, r.train_poi, r.train_time, r.train_cat, r.train_total, r.val_total
        )
        .unwrap();
    }
    out
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-validation snapshot (falls back to the last finite state).
    pub state: ModelState,
    pub log: Vec<EpochRecord>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    /// Set when training aborted on a non-finite loss; the state carries the
    /// last good parameters.
    pub nan_abort: Option<String>,
}

pub fn train(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    catalog: &PoiCatalog,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(CoreError::DegenerateDataset("empty training split".into()));
    }
    let model_cfg = cfg.model_config(split);
    let ctx = build_graph_context(split, catalog, cfg)?;
    let mut init_rng = Rng::new(cfg.seed, Stream::Init);
    let mut params = crate::model::init_model_params(&model_cfg, &mut init_rng)?;
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut shuffle_rng = Rng::new(cfg.seed, Stream::Shuffle);
    let mut dropout_rng = Rng::new(cfg.seed, Stream::Dropout);

    // validation set for model selection; fall back to train when absent
    let val_set: &[Trajectory] = if split.validation.is_empty() {
        &split.train
    } else {
        &split.validation
    };

    let mut best = ModelState {
        config: model_cfg.clone(),
        params: params.clone(),
    };
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_improved = 0usize;
    let mut log = Vec::new();
    let mut nan_abort = None;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let (mut ep_total, mut ep_poi, mut ep_time, mut ep_cat) = (0.0, 0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = register(&mut tape, &params);
            let xv = tape.constant(ctx.features.clone());
            let lv = tape.constant(ctx.laplacian.clone());
            let sv = tape.constant(ctx.laplacian_shifted.clone());
            let e_p = crate::gnn::gcn_forward(
                &mut tape, &vars, xv, lv, &model_cfg.gcn_config(), true, &mut dropout_rng,
            )?;
            let phi = crate::gnn::transition_attention(&mut tape, &vars, xv, sv)?;
            let mut totals = Vec::with_capacity(chunk.len());
            let (mut b_poi, mut b_time, mut b_cat) = (0.0, 0.0, 0.0);
            for &i in chunk {
                let out = trajectory_forward(
                    &mut tape, &vars, &model_cfg, e_p, phi, &split.train[i], true, true,
                    &mut dropout_rng,
                )?;
                let l = out.loss.unwrap();
                totals.push(l.total);
                b_poi += l.poi;
                b_time += l.time;
                b_cat += l.cat;
            }
            let mut acc = totals[0];
            for &t in &totals[1..] {
                acc = tape.add(acc, t)?;
            }
            let loss = tape.scale(acc, 1.0 / chunk.len() as f64);
            let loss_val = tape.value(loss).scalar_value();
            if !loss_val.is_finite() {
                nan_abort = Some(format!(
                    "non-finite loss at epoch {epoch}; keeping the best checkpoint from epoch {best_epoch}"
                ));
                break 'epochs;
            }
            let table = tape.backward(loss)?;
            let grads = tape.param_grads(&table);
            opt.learning_rate = opt.learning_rate.max(LR_FLOOR);
            if let Err(e) = opt.step(&mut params, &grads) {
                nan_abort = Some(format!(
                    "{e}; keeping the best checkpoint from epoch {best_epoch}"
                ));
                break 'epochs;
            }
            ep_total += loss_val;
            ep_poi += b_poi / chunk.len() as f64;
            ep_time += b_time / chunk.len() as f64;
            ep_cat += b_cat / chunk.len() as f64;
            batches += 1;
        }
        let n = batches.max(1) as f64;
        let current = ModelState {
            config: model_cfg.clone(),
            params: params.clone(),
        };
        let (val_total, _, _, _) = evaluate_loss(&current, &ctx, val_set)?;
        log.push(EpochRecord {
            epoch,
            learning_rate: opt.learning_rate,
            train_poi: ep_poi / n,
            train_time: ep_time / n,
            train_cat: ep_cat / n,
            train_total: ep_total / n,
            val_total,
        });
        if val_total.is_finite() && val_total < best_val {
            best_val = val_total;
            best_epoch = epoch;
            best = current;
            since_improved = 0;
        } else {
            since_improved += 1;
            if since_improved >= cfg.scheduler_patience {
                opt.learning_rate = (opt.learning_rate * cfg.lr_scheduler_factor).max(LR_FLOOR);
                since_improved = 0;
            }
        }
    }

    if cfg.epochs == 0 {
        // untouched initialization is the result
        best = ModelState {
            config: model_cfg,
            params,
        };
        best_val = f64::NAN;
    }
    Ok(TrainOutcome {
        state: best,
        log,
        best_val_loss: best_val,
        best_epoch,
        nan_abort,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalGranularity {
    /// Every prefix position of every test trajectory contributes.
    PerPosition,
    /// Only the final transition of each trajectory contributes.
    FinalOnly,
}

/// Precomputed inference context: POI embeddings and the transition map as
/// plain tensors, derived once from a model state.
pub struct InferenceEngine {
    pub state: ModelState,
    pub poi_embeddings: Tensor,
    pub phi: Tensor,
}

impl InferenceEngine {
    pub fn new(state: ModelState, ctx: &GraphContext) -> Result<Self> {
        let mut tape = Tape::new();
        let vars: BTreeMap<String, Var> = state
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        let xv = tape.constant(ctx.features.clone());
        let lv = tape.constant(ctx.laplacian.clone());
        let sv = tape.constant(ctx.laplacian_shifted.clone());
        let mut rng = Rng::new(0, Stream::Dropout);
        let e_p = crate::gnn::gcn_forward(
            &mut tape, &vars, xv, lv, &state.config.gcn_config(), false, &mut rng,
        )?;
        let phi = crate::gnn::transition_attention(&mut tape, &vars, xv, sv)?;
        let poi_embeddings = tape.value(e_p).clone();
        let phi = tape.value(phi).clone();
        Ok(InferenceEngine {
            state,
            poi_embeddings,
            phi,
        })
    }

    /// Residual-adjusted POI logits for every position of a trajectory
    /// (row i scores the check-in following position i).
    pub fn sequence_logits(&self, traj: &Trajectory) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: BTreeMap<String, Var> = self
            .state
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.constant(v.clone())))
            .collect();
        let e_p = tape.constant(self.poi_embeddings.clone());
        let phi = tape.constant(self.phi.clone());
        let mut rng = Rng::new(0, Stream::Dropout);
        let out = trajectory_forward(
            &mut tape, &vars, &self.state.config, e_p, phi, traj, false, false, &mut rng,
        )?;
        Ok(tape.value(out.adjusted_logits).clone())
    }
}

pub fn evaluate(
    engine: &InferenceEngine,
    test: &[Trajectory],
    ks: &[usize],
    granularity: EvalGranularity,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(CoreError::DegenerateDataset("empty evaluation split".into()));
    }
    let mut ranks = Vec::new();
    for traj in test {
        if traj.len() < 2 {
            continue;
        }
        let logits = engine.sequence_logits(traj)?;
        let positions: Vec<usize> = match granularity {
            EvalGranularity::PerPosition => (0..traj.len() - 1).collect(),
            EvalGranularity::FinalOnly => vec![traj.len() - 2],
        };
        for i in positions {
            let target = traj.checkins[i + 1].poi_id;
            ranks.push(rank_of(logits.row(i), target));
        }
    }
    report_from_ranks(&ranks, ks)
}

/// Train and evaluate once per (alpha, beta) pair with a shared seed.
pub fn sweep_alpha_beta(
    base: &TrainConfig,
    split: &DatasetSplit,
    catalog: &PoiCatalog,
    alphas: &[f64],
    betas: &[f64],
) -> Result<Vec<((f64, f64), EvalReport)>> {
    if alphas.is_empty() || betas.is_empty() {
        return Err(CoreError::contract("sweep grid must be non-empty"));
    }
    let mut out = Vec::new();
    for &alpha in alphas {
        for &beta in betas {
            let mut cfg = base.clone();
            cfg.alpha = alpha;
            cfg.beta = beta;
            let outcome = train(&cfg, split, catalog)?;
            let ctx = build_graph_context(split, catalog, &cfg)?;
            let engine = InferenceEngine::new(outcome.state, &ctx)?;
            let report = evaluate(&engine, &split.test, &cfg.eval_ks, EvalGranularity::PerPosition)?;
            out.push(((alpha, beta), report));
        }
    }
    Ok(out)
}

/// Aligned text table: alpha and beta first, then Acc@k columns and MRR.
pub fn sweep_table(results: &[((f64, f64), EvalReport)]) -> String {
    let mut out = String::from("alpha  beta   ");
    if let Some((_, first)) = results.first() {
        for k in &first.ks {
            write!(out, "Acc@{k:<6}").unwrap();
        }
        out.push_str("MRR\n");
    }
    for ((a, b), r) in results {
        write!(out, "{a:<6.2} {b:<6.2}").unwrap();
        for acc in &r.acc {
            write!(out, " {acc:<9.4}").unwrap();
        }
        writeln!(out, " {:.4}", r.mrr).unwrap();
    }
    out
}

pub fn sweep_csv(results: &[((f64, f64), EvalReport)]) -> String {
    let mut out = String::from("alpha,beta,");
    if let Some((_, first)) = results.first() {
        out.push_str(&first.csv_header());
    }
    out.push('\n');
    for ((a, b), r) in results {
        writeln!(out, "{a},{b},{}", r.csv_row()).unwrap();
    }
    out
}
