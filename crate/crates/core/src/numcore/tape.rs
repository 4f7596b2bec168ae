//! Reverse-mode differentiation over a linear tape.
//!
//! A forward pass records every operation into `Tape`; `backward` walks the
//! tape in reverse and accumulates gradients via the chain rule. Parameters
//! are registered by name so a gradient table keyed by parameter name can be
//! handed to the optimizer.

use std::collections::BTreeMap;

use crate::error::{CoreError, Result};
use crate::numcore::rng::Rng;
use crate::numcore::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Transpose { x: Var },
    Add { a: Var, b: Var },
    AddRowBias { x: Var, bias: Var },
    Scale { x: Var, factor: f64 },
    MulElem { a: Var, b: Var },
    LeakyRelu { x: Var, slope: f64 },
    Relu { x: Var },
    MaskedSoftmaxRows { x: Var, allowed: Vec<bool> },
    LayerNorm { x: Var, gain: Var, bias: Var },
    Dropout { x: Var, scaled_mask: Vec<f64> },
    GatherRows { x: Var, indices: Vec<usize> },
    ConcatCols { parts: Vec<Var> },
    OuterSum { col: Var, row: Var },
    Time2Vec { times: Vec<f64>, omega: Var, phi: Var },
    SumAll { x: Var },
    CrossEntropySum { logits: Var, targets: Vec<usize>, mask: Vec<bool> },
    MseSum { pred: Var, target: Tensor, mask: Vec<bool> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
}

/// Per-node gradients produced by `Tape::backward`.
pub struct GradTable {
    grads: Vec<Option<Tensor>>,
}

impl GradTable {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input: participates in forward only.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Learnable leaf; its gradient is reported under `name`.
    pub fn param(&mut self, name: &str, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push((name.to_string(), v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Matmul { a, b }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        let needs = self.needs(x);
        self.push(out, Op::Transpose { x }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    /// x: k×d plus a d-wide bias added to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.cols() != bv.len() {
            return Err(CoreError::Shape {
                op: "add_row_bias",
                lhs: xv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let cols = xv.cols();
        let mut data = xv.data().to_vec();
        for (i, v) in data.iter_mut().enumerate() {
            *v += bv.data()[i % cols];
        }
        let out = Tensor::new(xv.shape().to_vec(), data).unwrap();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddRowBias { x, bias }, needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).scale(factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale { x, factor }, needs)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(CoreError::Shape {
                op: "mul_elem",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MulElem { a, b }, needs))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&slope) || slope == 0.0 {
            return Err(CoreError::contract(format!(
                "leaky_relu slope must be in (0,1), got {slope}"
            )));
        }
        let out = self.value(x).map(|v| if v >= 0.0 { v } else { slope * v });
        let needs = self.needs(x);
        Ok(self.push(out, Op::LeakyRelu { x, slope }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    /// Row softmax with per-row max subtraction for stability.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.masked_softmax_rows(x, vec![true; n])
    }

    /// Row softmax restricted to `allowed` entries; disallowed outputs are 0
    /// and excluded from normalization. Every row needs >= 1 allowed entry.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        let (k, c) = (xv.rows(), xv.cols());
        if allowed.len() != k * c {
            return Err(CoreError::contract(
                "softmax mask length must match tensor",
            ));
        }
        let mut out = vec![0.0; k * c];
        for i in 0..k {
            let row = &xv.data()[i * c..(i + 1) * c];
            let arow = &allowed[i * c..(i + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..c {
                if arow[j] && row[j] > mx {
                    mx = row[j];
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(CoreError::contract(format!(
                    "softmax row {i} has no allowed entries"
                )));
            }
            let mut z = 0.0;
            for j in 0..c {
                if arow[j] {
                    let e = (row[j] - mx).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out).unwrap();
        let needs = self.needs(x);
        Ok(self.push(out, Op::MaskedSoftmaxRows { x, allowed }, needs))
    }

    /// Per-row normalization (epsilon 1e-5) followed by affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let (k, d) = (xv.rows(), xv.cols());
        if d < 2 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(CoreError::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data().to_vec();
        let mut out = vec![0.0; k * d];
        for i in 0..k {
            let row = &xv.data()[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let std = (var + LN_EPS).sqrt();
            for j in 0..d {
                out[i * d + j] = gv[j] * (row[j] - mu) / std + bv[j];
            }
        }
        let out = Tensor::matrix(k, d, out).unwrap();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias }, needs))
    }

    /// Inverted dropout: zero with probability p, scale survivors by 1/(1-p).
    /// Identity (no node recorded) when not training or p == 0.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(CoreError::contract(format!(
                "dropout p must be in [0,1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let scaled_mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&scaled_mask)
            .map(|(v, m)| v * m)
            .collect();
        let out = Tensor::new(self.value(x).shape().to_vec(), data).unwrap();
        let needs = self.needs(x);
        Ok(self.push(out, Op::Dropout { x, scaled_mask }, needs))
    }

    /// Select rows of x by index; repeated indices accumulate gradient.
    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(CoreError::contract(format!(
                "gather_rows index {bad} out of range for {n} rows"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            data.extend_from_slice(&xv.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::matrix(indices.len(), c, data).unwrap();
        let needs = self.needs(x);
        Ok(self.push(out, Op::GatherRows { x, indices }, needs))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let k = self.value(parts[0]).rows();
        for &p in parts {
            if self.value(p).rows() != k {
                return Err(CoreError::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(k * total);
        for i in 0..k {
            for &p in parts {
                let pv = self.value(p);
                let c = pv.cols();
                data.extend_from_slice(&pv.data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::matrix(k, total, data).unwrap();
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// out[i][j] = col[i] + row[j] for N-element column/row score vectors.
    pub fn outer_sum(&mut self, col: Var, row: Var) -> Result<Var> {
        let (cv, rv) = (self.value(col), self.value(row));
        let n = cv.len();
        if rv.len() != n {
            return Err(CoreError::Shape {
                op: "outer_sum",
                lhs: cv.shape().to_vec(),
                rhs: rv.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = cv.data()[i] + rv.data()[j];
            }
        }
        let out = Tensor::matrix(n, n, data).unwrap();
        let needs = self.needs(col) || self.needs(row);
        Ok(self.push(out, Op::OuterSum { col, row }, needs))
    }

    /// Learned temporal encoding of normalized times in [0,1): column 0 is
    /// linear (w0*t + p0), remaining columns are sin(wi*t + pi).
    pub fn time2vec(&mut self, times: Vec<f64>, omega: Var, phi: Var) -> Result<Var> {
        if let Some(&bad) = times.iter().find(|t| !(0.0..1.0).contains(*t)) {
            return Err(CoreError::contract(format!(
                "time2vec input {bad} outside [0,1)"
            )));
        }
        let psi = self.value(omega).len();
        if self.value(phi).len() != psi {
            return Err(CoreError::Shape {
                op: "time2vec",
                lhs: self.value(omega).shape().to_vec(),
                rhs: self.value(phi).shape().to_vec(),
            });
        }
        let (ov, pv) = (self.value(omega).data(), self.value(phi).data());
        let mut data = Vec::with_capacity(times.len() * psi);
        for &t in &times {
            for i in 0..psi {
                let arg = ov[i] * t + pv[i];
                data.push(if i == 0 { arg } else { arg.sin() });
            }
        }
        let out = Tensor::matrix(times.len(), psi, data).unwrap();
        let needs = self.needs(omega) || self.needs(phi);
        Ok(self.push(out, Op::Time2Vec { times, omega, phi }, needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, needs)
    }

    /// Sum over unmasked rows of -log softmax(logits)[target]; pair with a
    /// `scale` by 1/count for the mean.
    pub fn cross_entropy_sum(
        &mut self,
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (k, c) = (lv.rows(), lv.cols());
        if targets.len() != k || mask.len() != k {
            return Err(CoreError::contract(
                "cross_entropy targets/mask length mismatch",
            ));
        }
        if !mask.iter().any(|&m| m) {
            return Err(CoreError::DegenerateBatch(
                "cross_entropy: all positions masked".into(),
            ));
        }
        let mut total = 0.0;
        for i in 0..k {
            if !mask[i] {
                continue;
            }
            if targets[i] >= c {
                return Err(CoreError::contract(format!(
                    "cross_entropy target {} out of range for {c} classes",
                    targets[i]
                )));
            }
            let row = &lv.data()[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropySum {
                logits,
                targets,
                mask,
            },
            needs,
        ))
    }

    /// Sum over unmasked rows of squared error against a fixed target.
    pub fn mse_sum(&mut self, pred: Var, target: Tensor, mask: Vec<bool>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(CoreError::Shape {
                op: "mse",
                lhs: pv.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let k = pv.rows();
        if mask.len() != k {
            return Err(CoreError::contract("mse mask length mismatch"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(CoreError::DegenerateBatch("mse: all positions masked".into()));
        }
        let c = pv.cols();
        let mut total = 0.0;
        for i in 0..k {
            if !mask[i] {
                continue;
            }
            for j in 0..c {
                let d = pv.at(i, j) - target.at(i, j);
                total += d * d;
            }
        }
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(total),
            Op::MseSum { pred, target, mask },
            needs,
        ))
    }

    /// Reverse sweep from a scalar loss. Every registered parameter gets an
    /// entry in the result; parameters unreachable from the loss get zeros.
    pub fn backward(&mut self, loss: Var) -> Result<GradTable> {
        if !self.value(loss).is_scalar() {
            return Err(CoreError::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[idx].needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.accumulate_inputs(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(GradTable { grads })
    }

    /// Gradients keyed by parameter name; unreachable parameters get zeros.
    pub fn param_grads(&self, table: &GradTable) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.params {
            let g = table
                .get(*var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(self.value(*var).shape().to_vec()));
            out.insert(name.clone(), g);
        }
        out
    }

    fn add_into(grads: &mut Vec<Option<Tensor>>, target: Var, contribution: Tensor) {
        match &mut grads[target.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(contribution.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_inputs(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut Vec<Option<Tensor>>,
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                if self.needs(*a) {
                    let bt = self.value(*b).transpose();
                    let mut ga = g.matmul(&bt)?;
                    // matmul promotes vectors to single-row matrices; fold back
                    if self.value(*a).shape().len() == 1 {
                        ga = Tensor::vector(ga.data().to_vec());
                    }
                    Self::add_into(grads, *a, ga);
                }
                if self.needs(*b) {
                    let at = self.value(*a).transpose();
                    let mut gb = at.matmul(g)?;
                    if self.value(*b).shape().len() == 1 {
                        gb = Tensor::vector(gb.data().to_vec());
                    }
                    Self::add_into(grads, *b, gb);
                }
            }
            Op::Transpose { x } => {
                if self.needs(*x) {
                    Self::add_into(grads, *x, g.transpose());
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let mut gg = g.clone();
                        gg = Tensor::new(self.value(*v).shape().to_vec(), gg.data().to_vec())
                            .unwrap();
                        Self::add_into(grads, *v, gg);
                    }
                }
            }
            Op::AddRowBias { x, bias } => {
                if self.needs(*x) {
                    Self::add_into(grads, *x, g.clone());
                }
                if self.needs(*bias) {
                    let c = self.value(*x).cols();
                    let mut gb = vec![0.0; c];
                    for (i, v) in g.data().iter().enumerate() {
                        gb[i % c] += v;
                    }
                    Self::add_into(
                        grads,
                        *bias,
                        Tensor::new(self.value(*bias).shape().to_vec(), gb).unwrap(),
                    );
                }
            }
            Op::Scale { x, factor } => {
                if self.needs(*x) {
                    Self::add_into(grads, *x, g.scale(*factor));
                }
            }
            Op::MulElem { a, b } => {
                if self.needs(*a) {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gg, bb)| gg * bb)
                        .collect();
                    Self::add_into(
                        grads,
                        *a,
                        Tensor::new(self.value(*a).shape().to_vec(), data).unwrap(),
                    );
                }
                if self.needs(*b) {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gg, aa)| gg * aa)
                        .collect();
                    Self::add_into(
                        grads,
                        *b,
                        Tensor::new(self.value(*b).shape().to_vec(), data).unwrap(),
                    );
                }
            }
            Op::LeakyRelu { x, slope } => {
                if self.needs(*x) {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gg, xx)| if *xx >= 0.0 { *gg } else { gg * slope })
                        .collect();
                    Self::add_into(
                        grads,
                        *x,
                        Tensor::new(self.value(*x).shape().to_vec(), data).unwrap(),
                    );
                }
            }
            Op::Relu { x } => {
                if self.needs(*x) {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gg, xx)| if *xx > 0.0 { *gg } else { 0.0 })
                        .collect();
                    Self::add_into(
                        grads,
                        *x,
                        Tensor::new(self.value(*x).shape().to_vec(), data).unwrap(),
                    );
                }
            }
            Op::MaskedSoftmaxRows { x, allowed } => {
                if self.needs(*x) {
                    let s = &self.nodes[idx].value;
                    let (k, c) = (s.rows(), s.cols());
                    let mut gx = vec![0.0; k * c];
                    for i in 0..k {
                        let mut dot = 0.0;
                        for j in 0..c {
                            if allowed[i * c + j] {
                                dot += g.data()[i * c + j] * s.data()[i * c + j];
                            }
                        }
                        for j in 0..c {
                            if allowed[i * c + j] {
                                gx[i * c + j] =
                                    s.data()[i * c + j] * (g.data()[i * c + j] - dot);
                            }
                        }
                    }
                    Self::add_into(
                        grads,
                        *x,
                        Tensor::new(self.value(*x).shape().to_vec(), gx).unwrap(),
                    );
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(*x);
                let (k, d) = (xv.rows(), xv.cols());
                let gv = self.value(*gain).data();
                let df = d as f64;
                let mut gx = vec![0.0; k * d];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for i in 0..k {
                    let row = &xv.data()[i * d..(i + 1) * d];
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let mu = row.iter().sum::<f64>() / df;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / df;
                    let std = (var + LN_EPS).sqrt();
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mu) / std).collect();
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        sum_dxhat += dxh;
                        sum_dxhat_xhat += dxh * xhat[j];
                        ggain[j] += grow[j] * xhat[j];
                        gbias[j] += grow[j];
                    }
                    for j in 0..d {
                        let dxh = grow[j] * gv[j];
                        gx[i * d + j] =
                            (dxh - sum_dxhat / df - xhat[j] * sum_dxhat_xhat / df) / std;
                    }
                }
                if self.needs(*x) {
                    Self::add_into(grads, *x, Tensor::matrix(k, d, gx).unwrap());
                }
                if self.needs(*gain) {
                    Self::add_into(
                        grads,
                        *gain,
                        Tensor::new(self.value(*gain).shape().to_vec(), ggain).unwrap(),
                    );
                }
                if self.needs(*bias) {
                    Self::add_into(
                        grads,
                        *bias,
                        Tensor::new(self.value(*bias).shape().to_vec(), gbias).unwrap(),
                    );
                }
            }
            Op::Dropout { x, scaled_mask } => {
                if self.needs(*x) {
                    let data = g
                        .data()
                        .iter()
                        .zip(scaled_mask)
                        .map(|(gg, m)| gg * m)
                        .collect();
                    Self::add_into(
                        grads,
                        *x,
                        Tensor::new(self.value(*x).shape().to_vec(), data).unwrap(),
                    );
                }
            }
            Op::GatherRows { x, indices } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    let c = xv.cols();
                    let mut gx = vec![0.0; xv.len()];
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += g.data()[r * c + j];
                        }
                    }
                    Self::add_into(
                        grads,
                        *x,
                        Tensor::new(xv.shape().to_vec(), gx).unwrap(),
                    );
                }
            }
            Op::ConcatCols { parts } => {
                let k = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(k * c);
                        for i in 0..k {
                            gp.extend_from_slice(
                                &g.data()[i * total + offset..i * total + offset + c],
                            );
                        }
                        Self::add_into(grads, p, Tensor::matrix(k, c, gp).unwrap());
                    }
                    offset += c;
                }
            }
            Op::OuterSum { col, row } => {
                let n = self.value(*col).len();
                if self.needs(*col) {
                    let mut gc = vec![0.0; n];
                    for i in 0..n {
                        gc[i] = g.data()[i * n..(i + 1) * n].iter().sum();
                    }
                    Self::add_into(
                        grads,
                        *col,
                        Tensor::new(self.value(*col).shape().to_vec(), gc).unwrap(),
                    );
                }
                if self.needs(*row) {
                    let mut gr = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..n {
                            gr[j] += g.data()[i * n + j];
                        }
                    }
                    Self::add_into(
                        grads,
                        *row,
                        Tensor::new(self.value(*row).shape().to_vec(), gr).unwrap(),
                    );
                }
            }
            Op::Time2Vec { times, omega, phi } => {
                let psi = self.value(*omega).len();
                let ov = self.value(*omega).data();
                let pv = self.value(*phi).data();
                let mut go = vec![0.0; psi];
                let mut gp = vec![0.0; psi];
                for (r, &t) in times.iter().enumerate() {
                    for i in 0..psi {
                        let gg = g.data()[r * psi + i];
                        let d_arg = if i == 0 {
                            1.0
                        } else {
                            (ov[i] * t + pv[i]).cos()
                        };
                        go[i] += gg * d_arg * t;
                        gp[i] += gg * d_arg;
                    }
                }
                if self.needs(*omega) {
                    Self::add_into(
                        grads,
                        *omega,
                        Tensor::new(self.value(*omega).shape().to_vec(), go).unwrap(),
                    );
                }
                if self.needs(*phi) {
                    Self::add_into(
                        grads,
                        *phi,
                        Tensor::new(self.value(*phi).shape().to_vec(), gp).unwrap(),
                    );
                }
            }
            Op::SumAll { x } => {
                if self.needs(*x) {
                    let xv = self.value(*x);
                    Self::add_into(
                        grads,
                        *x,
                        Tensor::new(xv.shape().to_vec(), vec![g.scalar_value(); xv.len()])
                            .unwrap(),
                    );
                }
            }
            Op::CrossEntropySum {
                logits,
                targets,
                mask,
            } => {
                if self.needs(*logits) {
                    let lv = self.value(*logits);
                    let (k, c) = (lv.rows(), lv.cols());
                    let gs = g.scalar_value();
                    let mut gx = vec![0.0; k * c];
                    for i in 0..k {
                        if !mask[i] {
                            continue;
                        }
                        let row = &lv.data()[i * c..(i + 1) * c];
                        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - mx).exp() / z;
                            gx[i * c + j] = gs * (p - if j == targets[i] { 1.0 } else { 0.0 });
                        }
                    }
                    Self::add_into(grads, *logits, Tensor::matrix(k, c, gx).unwrap());
                }
            }
            Op::MseSum { pred, target, mask } => {
                if self.needs(*pred) {
                    let pv = self.value(*pred);
                    let (k, c) = (pv.rows(), pv.cols());
                    let gs = g.scalar_value();
                    let mut gx = vec![0.0; k * c];
                    for i in 0..k {
                        if !mask[i] {
                            continue;
                        }
                        for j in 0..c {
                            gx[i * c + j] = gs * 2.0 * (pv.at(i, j) - target.at(i, j));
                        }
                    }
                    Self::add_into(
                        grads,
                        *pred,
                        Tensor::new(pv.shape().to_vec(), gx).unwrap(),
                    );
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::rng::Stream;

    #[test]
    fn backward_sum_of_param_is_ones() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let loss = tape.sum_all(w);
        let table = tape.backward(loss).unwrap();
        assert_eq!(table.get(w).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_linear_rows_equal_x() {
        // loss = sum(W * x) for fixed column x => grad(W) rows equal x^T
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::matrix(2, 3, vec![0.3; 6]).unwrap());
        let x = tape.constant(Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.matmul(w, x).unwrap();
        let loss = tape.sum_all(y);
        let table = tape.backward(loss).unwrap();
        assert_eq!(
            table.get(w).unwrap().data(),
            &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::matrix(2, 2, vec![1.0; 4]).unwrap());
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::vector(vec![1.0, 2.0]));
        let _unused = tape.param("unused", Tensor::vector(vec![5.0]));
        let loss = tape.sum_all(w);
        let table = tape.backward(loss).unwrap();
        let grads = tape.param_grads(&table);
        assert_eq!(grads["unused"].data(), &[0.0]);
        assert_eq!(grads["w"].data(), &[1.0, 1.0]);
    }

    #[test]
    fn leaky_relu_values_and_grad() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::vector(vec![1.0, -1.0, 0.0, -2.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -0.2, 0.0, -0.4]);
        let loss = tape.sum_all(y);
        let table = tape.backward(loss).unwrap();
        assert_eq!(table.get(x).unwrap().data(), &[1.0, 0.2, 1.0, 0.2]);
    }

    #[test]
    fn softmax_uniform_and_stability() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![0.0, 0.0, 0.0, 1000.0, 0.0, 0.0]).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        let sv = tape.value(s);
        for j in 0..3 {
            assert!((sv.at(0, j) - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((sv.at(1, 0) - 1.0).abs() < 1e-9);
        assert!(sv.at(1, 1) < 1e-9);
        assert!(sv.all_finite());
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let s = tape.softmax_rows(x).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            let expect = ((j + 1) as f64).exp() / z;
            assert!((tape.value(s).at(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let bias = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        // constant row maps to zeros via epsilon
        let x = tape.constant(Tensor::matrix(1, 2, vec![3.0, 3.0]).unwrap());
        let y = tape.layer_norm(x, gain, bias).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() < 1e-9));
        // [1,3] -> [-1,1]
        let x2 = tape.constant(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap());
        let y2 = tape.layer_norm(x2, gain, bias).unwrap();
        assert!((tape.value(y2).at(0, 0) + 1.0).abs() < 1e-4);
        assert!((tape.value(y2).at(0, 1) - 1.0).abs() < 1e-4);
        // gain=0, bias=5 collapses to 5
        let g0 = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let b5 = tape.constant(Tensor::vector(vec![5.0, 5.0]));
        let y3 = tape.layer_norm(x2, g0, b5).unwrap();
        assert_eq!(tape.value(y3).data(), &[5.0, 5.0]);
    }

    #[test]
    fn dropout_eval_identity_and_survivor_fraction() {
        let mut rng = Rng::new(3, Stream::Dropout);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0; 100_000]));
        let same = tape.dropout(x, 0.3, false, &mut rng).unwrap();
        assert_eq!(same, x);
        let p0 = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(p0, x);
        let dropped = tape.dropout(x, 0.3, true, &mut rng).unwrap();
        let survivors = tape.value(dropped).data().iter().filter(|v| **v != 0.0).count();
        let frac = survivors as f64 / 100_000.0;
        assert!((frac - 0.7).abs() < 0.01, "survivor fraction {frac}");
    }

    #[test]
    fn cross_entropy_analytic_cases() {
        let mut tape = Tape::new();
        // one-hot huge at target -> ~0
        let l1 = tape.constant(Tensor::matrix(1, 3, vec![1000.0, 0.0, 0.0]).unwrap());
        let c1 = tape.cross_entropy_sum(l1, vec![0], vec![true]).unwrap();
        assert!(tape.value(c1).scalar_value() < 1e-9);
        // uniform logits, C=4 -> ln 4
        let l2 = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
        let c2 = tape.cross_entropy_sum(l2, vec![2], vec![true]).unwrap();
        assert!((tape.value(c2).scalar_value() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let vals: Vec<f64> = (0..15).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(3, 5, vals.clone()).unwrap());
        let targets = vec![1, 4, 0];
        let ce = tape
            .cross_entropy_sum(l, targets.clone(), vec![true; 3])
            .unwrap();
        let mean = tape.scale(ce, 1.0 / 3.0);
        let mut expect = 0.0;
        for i in 0..3 {
            let row = &vals[i * 5..(i + 1) * 5];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            expect += lse - row[targets[i]];
        }
        expect /= 3.0;
        assert!((tape.value(mean).scalar_value() - expect).abs() < 1e-10);
    }

    #[test]
    fn cross_entropy_all_masked_is_degenerate() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let err = tape.cross_entropy_sum(l, vec![0], vec![false]).unwrap_err();
        assert!(matches!(err, CoreError::DegenerateBatch(_)));
    }

    #[test]
    fn mse_cases() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(1, 1, vec![0.0]).unwrap());
        let t = Tensor::matrix(1, 1, vec![2.0]).unwrap();
        let m = tape.mse_sum(p, t, vec![true]).unwrap();
        assert_eq!(tape.value(m).scalar_value(), 4.0);
        let same = tape.constant(Tensor::matrix(2, 1, vec![1.5, -0.5]).unwrap());
        let m2 = tape
            .mse_sum(same, Tensor::matrix(2, 1, vec![1.5, -0.5]).unwrap(), vec![true; 2])
            .unwrap();
        assert_eq!(tape.value(m2).scalar_value(), 0.0);
    }

    #[test]
    fn mse_matches_loop_oracle() {
        let pred: Vec<f64> = (0..7).map(|i| (i as f64) * 0.37 - 1.0).collect();
        let target: Vec<f64> = (0..7).map(|i| (i as f64) * -0.21 + 0.5).collect();
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::matrix(7, 1, pred.clone()).unwrap());
        let m = tape
            .mse_sum(p, Tensor::matrix(7, 1, target.clone()).unwrap(), vec![true; 7])
            .unwrap();
        let mean = tape.scale(m, 1.0 / 7.0);
        let expect: f64 = pred
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 7.0;
        assert!((tape.value(mean).scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_accumulates_repeats() {
        let mut tape = Tape::new();
        let w = tape.param("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let g = tape.gather_rows(w, vec![0, 0, 1]).unwrap();
        let loss = tape.sum_all(g);
        let table = tape.backward(loss).unwrap();
        assert_eq!(table.get(w).unwrap().data(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn time2vec_analytic() {
        let mut tape = Tape::new();
        // omega_1 = 2*pi, phi_1 = 0, t = 0.25 -> sin(pi/2) = 1
        let omega = tape.constant(Tensor::vector(vec![0.0, 2.0 * std::f64::consts::PI]));
        let phi = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let e = tape.time2vec(vec![0.25], omega, phi).unwrap();
        assert!((tape.value(e).at(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(tape.value(e).at(0, 0), 0.0);
    }
}
