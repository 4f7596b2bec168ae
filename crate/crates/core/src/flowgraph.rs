//! Attributed weighted directed trajectory flow map and its dense matrix
//! views: adjacency, row-stochastic normalized Laplacian, node features.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::dataio::{PoiCatalog, Trajectory};
use crate::error::{CoreError, Result};
use crate::numcore::tensor::Tensor;
use crate::popularity::PopularityTable;

/// How edge weights are derived from adjacent trajectory pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeWeightMode {
    /// Raw transition count (default).
    TransitionCount,
    /// Count scaled by mean endpoint popularity (ablation variant).
    PopularityProduct,
}

#[derive(Clone, Debug)]
pub struct NodeAttr {
    pub lat: f64,
    pub lon: f64,
    pub category_id: usize,
    pub popularity_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrajectoryFlowMap {
    pub node_count: usize,
    pub category_count: usize,
    /// (src, dst) -> weight; deterministic iteration order.
    pub edges: BTreeMap<(usize, usize), f64>,
    pub attrs: Vec<NodeAttr>,
}

/// Every adjacent pair (p1, p2) in every training trajectory contributes to
/// the edge p1 -> p2. Immediate repeats produce self-edges and are kept.
pub fn build_flow_map(
    train: &[Trajectory],
    catalog: &PoiCatalog,
    popularity: &PopularityTable,
    mode: EdgeWeightMode,
) -> Result<TrajectoryFlowMap> {
    if train.is_empty() {
        return Err(CoreError::DegenerateDataset(
            "flow map needs a non-empty training split".into(),
        ));
    }
    let n = catalog.poi_count();
    let mut edges: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for t in train {
        for pair in t.checkins.windows(2) {
            let (a, b) = (pair[0].poi_id, pair[1].poi_id);
            let w = match mode {
                EdgeWeightMode::TransitionCount => 1.0,
                EdgeWeightMode::PopularityProduct => {
                    0.5 * (popularity.norm(a) + popularity.norm(b))
                }
            };
            *edges.entry((a, b)).or_default() += w;
        }
    }
    let attrs = catalog
        .pois
        .iter()
        .enumerate()
        .map(|(i, p)| NodeAttr {
            lat: p.lat,
            lon: p.lon,
            category_id: p.category_id,
            popularity_norm: popularity.norm(i),
        })
        .collect();
    Ok(TrajectoryFlowMap {
        node_count: n,
        category_count: catalog.category_count,
        edges,
        attrs,
    })
}

impl TrajectoryFlowMap {
    pub fn adjacency(&self) -> Tensor {
        let n = self.node_count;
        let mut a = Tensor::zeros(vec![n, n]);
        for (&(i, j), &w) in &self.edges {
            a.set(i, j, w);
        }
        a
    }

    /// Node features: one-hot category, then popularity_norm, lat, lon
    /// (coordinates min-max normalized over the node set, ties -> 0.5).
    pub fn node_features(&self) -> Tensor {
        let n = self.node_count;
        let c = self.category_count + 3;
        let minmax = |get: &dyn Fn(&NodeAttr) -> f64| {
            let lo = self.attrs.iter().map(|a| get(a)).fold(f64::INFINITY, f64::min);
            let hi = self.attrs.iter().map(|a| get(a)).fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        };
        let (lat_lo, lat_hi) = minmax(&|a: &NodeAttr| a.lat);
        let (lon_lo, lon_hi) = minmax(&|a: &NodeAttr| a.lon);
        let norm = |v: f64, lo: f64, hi: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        let mut x = Tensor::zeros(vec![n, c]);
        for (i, a) in self.attrs.iter().enumerate() {
            x.set(i, a.category_id, 1.0);
            x.set(i, self.category_count, a.popularity_norm);
            x.set(i, self.category_count + 1, norm(a.lat, lat_lo, lat_hi));
            x.set(i, self.category_count + 2, norm(a.lon, lon_lo, lon_hi));
        }
        x
    }

    pub fn edge_list_csv(&self) -> String {
        let mut out = String::from("src,dst,weight\n");
        for (&(i, j), &w) in &self.edges {
            writeln!(out, "{i},{j},{w}").unwrap();
        }
        out
    }

    pub fn node_attr_csv(&self) -> String {
        let mut out = String::from("poi_id,category_id,lat,lon,popularity_norm\n");
        for (i, a) in self.attrs.iter().enumerate() {
            writeln!(out, "{i},{},{},{},{}", a.category_id, a.lat, a.lon, a.popularity_norm)
                .unwrap();
        }
        out
    }
}

/// L = (D + I)^-1 (A + I) with D the out-degree (row-sum) diagonal of the
/// weighted adjacency; rows of the result sum to 1.
pub fn normalized_laplacian(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    if a.cols() != n {
        return Err(CoreError::Shape {
            op: "normalized_laplacian",
            lhs: a.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    let mut l = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        let deg: f64 = a.row(i).iter().sum();
        let inv = 1.0 / (deg + 1.0);
        for j in 0..n {
            let aij = a.at(i, j) + if i == j { 1.0 } else { 0.0 };
            l.set(i, j, aij * inv);
        }
    }
    Ok(l)
}
