//! POI embedding GCN over the flow map and the transition attention map.
//!
//! The GCN propagates node features through stacked layers
//! H(l) = LeakyReLU(L H(l-1) W(l) + b(l)), applies dropout before the final
//! projection, and emits e_p = L H(l*) W(l*+1) + b(l*+1) with no activation.
//!
//! The attention map scores every ordered POI pair:
//! Phi = (phi1 1^T + 1 phi2^T) .* (L + J), phi_i = (X W_i) a_i.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::numcore::rng::Rng;
use crate::numcore::tape::{Tape, Var};
use crate::numcore::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GcnConfig {
    /// Number of hidden propagation layers (l*).
    pub layers: usize,
    /// Embedding width Omega.
    pub hidden: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            layers: 2,
            hidden: 128,
            dropout: 0.3,
            leaky_slope: 0.2,
        }
    }
}

pub fn uniform_init(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// GCN parameters: layer weights C->Omega then Omega->Omega, plus the output
/// projection.
pub fn init_gcn_params(
    cfg: &GcnConfig,
    input_dim: usize,
    rng: &mut Rng,
    params: &mut BTreeMap<String, Tensor>,
) {
    let mut fan_in = input_dim;
    for l in 1..=cfg.layers {
        params.insert(format!("gcn.w{l}"), uniform_init(rng, fan_in, cfg.hidden));
        params.insert(format!("gcn.b{l}"), Tensor::zeros(vec![cfg.hidden]));
        fan_in = cfg.hidden;
    }
    params.insert("gcn.out_w".into(), uniform_init(rng, cfg.hidden, cfg.hidden));
    params.insert("gcn.out_b".into(), Tensor::zeros(vec![cfg.hidden]));
}

/// Attention-map parameters over raw node features of width h.
pub fn init_attention_params(
    feature_dim: usize,
    rng: &mut Rng,
    params: &mut BTreeMap<String, Tensor>,
) {
    params.insert("attn.w1".into(), uniform_init(rng, feature_dim, feature_dim));
    params.insert("attn.w2".into(), uniform_init(rng, feature_dim, feature_dim));
    params.insert("attn.a1".into(), uniform_init(rng, feature_dim, 1));
    params.insert("attn.a2".into(), uniform_init(rng, feature_dim, 1));
}

/// Forward pass producing the N x Omega POI embedding matrix.
pub fn gcn_forward(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    x: Var,
    laplacian: Var,
    cfg: &GcnConfig,
    training: bool,
    dropout_rng: &mut Rng,
) -> Result<Var> {
    let mut h = x;
    for l in 1..=cfg.layers {
        let lh = tape.matmul(laplacian, h)?;
        let lhw = tape.matmul(lh, vars[&format!("gcn.w{l}")])?;
        let pre = tape.add_row_bias(lhw, vars[&format!("gcn.b{l}")])?;
        h = tape.leaky_relu(pre, cfg.leaky_slope)?;
    }
    h = tape.dropout(h, cfg.dropout, training, dropout_rng)?;
    let lh = tape.matmul(laplacian, h)?;
    let lhw = tape.matmul(lh, vars["gcn.out_w"])?;
    tape.add_row_bias(lhw, vars["gcn.out_b"])
}

/// N x N transition score matrix; `lap_shifted` is L + J (entries in [1,2]).
pub fn transition_attention(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    x_attn: Var,
    lap_shifted: Var,
) -> Result<Var> {
    let xw1 = tape.matmul(x_attn, vars["attn.w1"])?;
    let phi1 = tape.matmul(xw1, vars["attn.a1"])?;
    let xw2 = tape.matmul(x_attn, vars["attn.w2"])?;
    let phi2 = tape.matmul(xw2, vars["attn.a2"])?;
    let pairs = tape.outer_sum(phi1, phi2)?;
    tape.mul_elem(pairs, lap_shifted)
}

/// Row of unnormalized transition scores out of `poi_id`.
pub fn attention_row_for(phi: &Tensor, poi_id: usize) -> Result<Vec<f64>> {
    if poi_id >= phi.rows() {
        return Err(crate::error::CoreError::contract(format!(
            "poi id {poi_id} out of range for {} rows",
            phi.rows()
        )));
    }
    Ok(phi.row(poi_id).to_vec())
}

/// L + J in one tensor.
pub fn shift_laplacian(laplacian: &Tensor) -> Tensor {
    laplacian.map(|v| v + 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::gradcheck::{check_gradients, DEFAULT_H, DEFAULT_TOL};
    use crate::numcore::rng::Stream;

    fn register(tape: &mut Tape, params: &BTreeMap<String, Tensor>) -> BTreeMap<String, Var> {
        params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k, v.clone())))
            .collect()
    }

    #[test]
    fn identity_collapse_on_empty_graph() {
        // l*=1, W=I, b=0, L=I, non-negative X => e_p = X W_out
        let cfg = GcnConfig { layers: 1, hidden: 3, dropout: 0.0, leaky_slope: 0.2 };
        let mut params = BTreeMap::new();
        params.insert("gcn.w1".into(), Tensor::identity(3));
        params.insert("gcn.b1".into(), Tensor::zeros(vec![3]));
        params.insert(
            "gcn.out_w".into(),
            Tensor::matrix(3, 3, vec![2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0]).unwrap(),
        );
        params.insert("gcn.out_b".into(), Tensor::zeros(vec![3]));
        let x = Tensor::matrix(2, 3, vec![1.0, 0.5, 0.0, 0.25, 2.0, 1.0]).unwrap();
        let mut tape = Tape::new();
        let vars = register(&mut tape, &params);
        let xv = tape.constant(x.clone());
        let lap = tape.constant(Tensor::identity(2));
        let mut rng = Rng::new(0, Stream::Dropout);
        let e = gcn_forward(&mut tape, &vars, xv, lap, &cfg, false, &mut rng).unwrap();
        let expect = x.matmul(params.get("gcn.out_w").unwrap()).unwrap();
        assert_eq!(tape.value(e), &expect);
    }

    #[test]
    fn chain_graph_matches_layer_by_layer_oracle() {
        // 3-node chain 0->1->2; hand-set weights; oracle evaluates the
        // propagation rule step by step with plain tensor ops
        let a = Tensor::matrix(3, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let lap = crate::flowgraph::normalized_laplacian(&a).unwrap();
        let x = Tensor::matrix(3, 2, vec![1.0, -0.5, 0.25, 0.75, -1.0, 0.5]).unwrap();
        let cfg = GcnConfig { layers: 2, hidden: 2, dropout: 0.0, leaky_slope: 0.2 };
        let mut rng = Rng::new(11, Stream::Init);
        let mut params = BTreeMap::new();
        init_gcn_params(&cfg, 2, &mut rng, &mut params);

        let mut tape = Tape::new();
        let vars = register(&mut tape, &params);
        let xv = tape.constant(x.clone());
        let lv = tape.constant(lap.clone());
        let mut drop_rng = Rng::new(0, Stream::Dropout);
        let e = gcn_forward(&mut tape, &vars, xv, lv, &cfg, false, &mut drop_rng).unwrap();

        let leaky = |t: &Tensor| t.map(|v| if v >= 0.0 { v } else { 0.2 * v });
        let affine = |h: &Tensor, w: &Tensor, b: &Tensor| {
            let mut out = lap.matmul(h).unwrap().matmul(w).unwrap();
            for i in 0..out.rows() {
                for j in 0..out.cols() {
                    let v = out.at(i, j) + b.data()[j];
                    out.set(i, j, v);
                }
            }
            out
        };
        let h1 = leaky(&affine(&x, &params["gcn.w1"], &params["gcn.b1"]));
        let h2 = leaky(&affine(&h1, &params["gcn.w2"], &params["gcn.b2"]));
        let out = affine(&h2, &params["gcn.out_w"], &params["gcn.out_b"]);
        for (a, b) in tape.value(e).data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = GcnConfig { layers: 2, hidden: 4, dropout: 0.3, leaky_slope: 0.2 };
        let mut rng = Rng::new(3, Stream::Init);
        let mut params = BTreeMap::new();
        init_gcn_params(&cfg, 3, &mut rng, &mut params);
        let x = uniform_init(&mut rng, 5, 3);
        let lap = Tensor::identity(5);
        let run = || {
            let mut tape = Tape::new();
            let vars = register(&mut tape, &params);
            let xv = tape.constant(x.clone());
            let lv = tape.constant(lap.clone());
            let mut drop_rng = Rng::new(7, Stream::Dropout);
            let e = gcn_forward(&mut tape, &vars, xv, lv, &cfg, false, &mut drop_rng).unwrap();
            tape.value(e).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn attention_zero_weights_zero_map() {
        let mut params = BTreeMap::new();
        params.insert("attn.w1".into(), Tensor::zeros(vec![2, 2]));
        params.insert("attn.w2".into(), Tensor::zeros(vec![2, 2]));
        params.insert("attn.a1".into(), Tensor::zeros(vec![2, 1]));
        params.insert("attn.a2".into(), Tensor::zeros(vec![2, 1]));
        let mut tape = Tape::new();
        let vars = register(&mut tape, &params);
        let x = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let ls = tape.constant(Tensor::matrix(2, 2, vec![1.5, 1.5, 1.0, 2.0]).unwrap());
        let phi = transition_attention(&mut tape, &vars, x, ls).unwrap();
        assert!(tape.value(phi).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_hand_case_and_structure() {
        // N=2, W1=W2=I, a1=a2=[1,1]^T
        let mut params = BTreeMap::new();
        params.insert("attn.w1".into(), Tensor::identity(2));
        params.insert("attn.w2".into(), Tensor::identity(2));
        params.insert("attn.a1".into(), Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        params.insert("attn.a2".into(), Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let x = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let lap = Tensor::matrix(2, 2, vec![0.5, 0.5, 0.0, 1.0]).unwrap();
        let shifted = shift_laplacian(&lap);
        let mut tape = Tape::new();
        let vars = register(&mut tape, &params);
        let xv = tape.constant(x.clone());
        let lv = tape.constant(shifted.clone());
        let phi = transition_attention(&mut tape, &vars, xv, lv).unwrap();
        // phi1 = row sums of X = [3, 7]; phi2 likewise
        let expect = |i: usize, j: usize| {
            let p = [3.0, 7.0];
            (p[i] + p[j]) * shifted.at(i, j)
        };
        for i in 0..2 {
            for j in 0..2 {
                assert!((tape.value(phi).at(i, j) - expect(i, j)).abs() < 1e-12);
            }
        }
        // row extraction
        let row = attention_row_for(tape.value(phi), 0).unwrap();
        assert_eq!(row, vec![expect(0, 0), expect(0, 1)]);
        assert!(attention_row_for(tape.value(phi), 5).is_err());
        // rank-1-plus structure: Phi ./ (L+J) == phi1 1^T + 1 phi2^T
        for i in 0..2 {
            for j in 0..2 {
                let ratio = tape.value(phi).at(i, j) / shifted.at(i, j);
                let p = [3.0, 7.0];
                assert!((ratio - (p[i] + p[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gcn_and_attention_gradients_match_finite_differences() {
        let cfg = GcnConfig { layers: 2, hidden: 3, dropout: 0.0, leaky_slope: 0.2 };
        let mut rng = Rng::new(21, Stream::Init);
        let mut params = BTreeMap::new();
        init_gcn_params(&cfg, 4, &mut rng, &mut params);
        init_attention_params(4, &mut rng, &mut params);
        let x = uniform_init(&mut rng, 4, 4);
        let a = uniform_init(&mut rng, 4, 4).map(f64::abs);
        let lap = crate::flowgraph::normalized_laplacian(&a).unwrap();
        let shifted = shift_laplacian(&lap);

        let run = |p: &BTreeMap<String, Tensor>| -> Result<f64> {
            let mut tape = Tape::new();
            let vars = register(&mut tape, p);
            let xv = tape.constant(x.clone());
            let lv = tape.constant(lap.clone());
            let sv = tape.constant(shifted.clone());
            let mut drop_rng = Rng::new(0, Stream::Dropout);
            let e = gcn_forward(&mut tape, &vars, xv, lv, &cfg, false, &mut drop_rng)?;
            let phi = transition_attention(&mut tape, &vars, xv, sv)?;
            let e2 = tape.mul_elem(e, e)?;
            let p2 = tape.mul_elem(phi, phi)?;
            let s1 = tape.sum_all(e2);
            let s2 = tape.sum_all(p2);
            let total = tape.add(s1, s2)?;
            Ok(tape.value(total).scalar_value())
        };

        let mut tape = Tape::new();
        let vars = register(&mut tape, &params);
        let xv = tape.constant(x.clone());
        let lv = tape.constant(lap.clone());
        let sv = tape.constant(shifted.clone());
        let mut drop_rng = Rng::new(0, Stream::Dropout);
        let e = gcn_forward(&mut tape, &vars, xv, lv, &cfg, false, &mut drop_rng).unwrap();
        let phi = transition_attention(&mut tape, &vars, xv, sv).unwrap();
        let e2 = tape.mul_elem(e, e).unwrap();
        let p2 = tape.mul_elem(phi, phi).unwrap();
        let s1 = tape.sum_all(e2);
        let s2 = tape.sum_all(p2);
        let total = tape.add(s1, s2).unwrap();
        let table = tape.backward(total).unwrap();
        let analytic = tape.param_grads(&table);
        let report = check_gradients(&params, &analytic, DEFAULT_H, run).unwrap();
        assert!(report.max_rel_err < DEFAULT_TOL, "{report:?}");
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = GcnConfig { layers: 1, hidden: 3, dropout: 0.0, leaky_slope: 0.2 };
        let mut rng = Rng::new(5, Stream::Init);
        let mut params = BTreeMap::new();
        init_gcn_params(&cfg, 2, &mut rng, &mut params);
        let x = uniform_init(&mut rng, 3, 2);
        let a = uniform_init(&mut rng, 3, 3).map(f64::abs);
        let lap = crate::flowgraph::normalized_laplacian(&a).unwrap();
        // permutation (0 1 2) -> (2 0 1)
        let perm = [2usize, 0, 1];
        let mut xp = Tensor::zeros(vec![3, 2]);
        let mut ap = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            for j in 0..2 {
                xp.set(i, j, x.at(perm[i], j));
            }
            for j in 0..3 {
                ap.set(i, j, a.at(perm[i], perm[j]));
            }
        }
        let lap_p = crate::flowgraph::normalized_laplacian(&ap).unwrap();
        let run = |x: &Tensor, lap: &Tensor| {
            let mut tape = Tape::new();
            let vars = register(&mut tape, &params);
            let xv = tape.constant(x.clone());
            let lv = tape.constant(lap.clone());
            let mut drop_rng = Rng::new(0, Stream::Dropout);
            let e = gcn_forward(&mut tape, &vars, xv, lv, &cfg, false, &mut drop_rng).unwrap();
            tape.value(e).clone()
        };
        let e = run(&x, &lap);
        let ep = run(&xp, &lap_p);
        for i in 0..3 {
            for j in 0..3 {
                assert!((ep.at(i, j) - e.at(perm[i], j)).abs() < 1e-12);
            }
        }
    }
}
