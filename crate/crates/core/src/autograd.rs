//! A small reverse-mode tape over [`Tensor`]s.
//!
//! Only the operations the detector needs are provided. Losses are fused ops
//! with hand-written backward passes; every one of them is checked against
//! central differences in the tests below.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::metricreg;
use crate::revgrad;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter storage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    RoiPool {
        x: Var,
        mode: PoolMode,
        /// Per output element: argmax flat index (max) or bin bounds (mean).
        argmax: Vec<usize>,
        bins: Vec<[usize; 4]>,
        channels: usize,
        cells: usize,
    },
    Reverse {
        x: Var,
        lambda: f64,
    },
    DomainBce {
        logits: Var,
        labels: Vec<f64>,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SmoothL1 {
        pred: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
        norm: f64,
    },
    Triplet {
        anchor: Var,
        positive: Var,
        negative: Var,
        rows: usize,
        margin: f64,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Probabilities fed to domain BCE are clamped to `[EPS, 1 - EPS]`.
pub const PROB_EPS: f64 = 1e-7;

pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p Params {
        self.params
    }

    fn push(&mut self, value: Option<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Some(t), Op::Leaf, false)
    }

    /// Input leaf whose gradient is reported by [`Gradients::node`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Some(t), Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(None, Op::Param(id), true);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::Shape(format!("conv2d input {xs:?} weight {ws:?}")));
        }
        if self.value(b).numel() != ws[0] {
            return Err(Error::Shape(format!("conv2d bias for {} outputs", ws[0])));
        }
        let k = ws[2];
        if xs[1] + 2 * pad < k || xs[2] + 2 * pad < k {
            return Err(Error::Shape(format!("conv2d kernel {k} larger than input {xs:?}")));
        }
        let geom = ConvGeom {
            in_c: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            k,
            stride,
            pad,
            out_h: (xs[1] + 2 * pad - k) / stride + 1,
            out_w: (xs[2] + 2 * pad - k) / stride + 1,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let out_c = ws[0];
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; out_c * ncols];
        for (o, chunk) in out.chunks_mut(ncols).enumerate() {
            chunk.fill(self.value(b).data()[o]);
        }
        gemm(
            out_c,
            rows,
            ncols,
            self.value(w).data(),
            (rows as isize, 1),
            &cols,
            (ncols as isize, 1),
            &mut out,
            (ncols as isize, 1),
            1.0,
        );
        let value = Tensor::new(&[out_c, geom.out_h, geom.out_w], out)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            Some(value),
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(Some(value), Op::Relu(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(Some(value), Op::Reshape(x), needs))
    }

    /// `x: [n, in]`, `w: [out, in]`, `b: [out]` to `[n, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || self.value(b).numel() != ws[0] {
            return Err(Error::Shape(format!("linear input {xs:?} weight {ws:?}")));
        }
        let (n, fan_in, out) = (xs[0], xs[1], ws[0]);
        let mut y = vec![0.0; n * out];
        for row in y.chunks_mut(out.max(1)) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            n,
            fan_in,
            out,
            self.value(x).data(),
            (fan_in as isize, 1),
            self.value(w).data(),
            (1, fan_in as isize),
            &mut y,
            (out as isize, 1),
            1.0,
        );
        let value = Tensor::new(&[n, out], y)?;
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Some(value), Op::Linear { x, w, b }, needs))
    }

    /// Pools each box (in feature-map cell coordinates, `[x0, y0, x1, y1)`)
    /// into `out × out` bins. Output is `[boxes, channels * out * out]`.
    pub fn roi_pool(
        &mut self,
        x: Var,
        cell_boxes: &[[usize; 4]],
        out: usize,
        mode: PoolMode,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 3 {
            return Err(Error::Shape(format!("roi_pool expects [c, h, w], got {xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let cells = out * out;
        let src = self.value(x).data();
        let mut data = vec![0.0; cell_boxes.len() * c * cells];
        let mut argmax = Vec::new();
        let mut bins = Vec::with_capacity(cell_boxes.len() * cells);
        for (r, bx) in cell_boxes.iter().enumerate() {
            for bin in pool_bins(*bx, out, h, w) {
                bins.push(bin);
            }
            for ch in 0..c {
                for (cell, &[x0, y0, x1, y1]) in bins[r * cells..(r + 1) * cells].iter().enumerate() {
                    let dst = (r * c + ch) * cells + cell;
                    match mode {
                        PoolMode::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_i = 0;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    let i = (ch * h + yy) * w + xx;
                                    if src[i] > best {
                                        best = src[i];
                                        best_i = i;
                                    }
                                }
                            }
                            data[dst] = best;
                            argmax.push(best_i);
                        }
                        PoolMode::Mean => {
                            let mut acc = 0.0;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    acc += src[(ch * h + yy) * w + xx];
                                }
                            }
                            data[dst] = acc / ((y1 - y0) * (x1 - x0)) as f64;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(&[cell_boxes.len(), c * cells], data)?;
        let needs = self.needs(x);
        Ok(self.push(
            Some(value),
            Op::RoiPool {
                x,
                mode,
                argmax,
                bins,
                channels: c,
                cells,
            },
            needs,
        ))
    }

    /// Gradient reversal: identity forward, `-lambda` times the gradient backward.
    /// The weight can be replaced before calling [`Tape::backward`].
    pub fn reverse_grad(&mut self, x: Var, lambda: f64) -> Var {
        let value = Tensor::new(self.value(x).shape(), revgrad::grl_forward(self.value(x).data()))
            .expect("same shape");
        let needs = self.needs(x);
        self.push(Some(value), Op::Reverse { x, lambda }, needs)
    }

    pub fn set_reverse_lambda(&mut self, v: Var, new_lambda: f64) {
        match &mut self.nodes[v.0].op {
            Op::Reverse { lambda, .. } => *lambda = new_lambda,
            _ => panic!("set_reverse_lambda on a node that is not a reversal"),
        }
    }

    /// Domain classification loss summed over samples.
    ///
    /// `logits` holds `labels.len()` equal groups; each group's sigmoid
    /// outputs are averaged into one probability, clamped to
    /// `[PROB_EPS, 1 - PROB_EPS]`, and scored with binary cross-entropy.
    pub fn domain_bce(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if labels.is_empty() || z.len() % labels.len() != 0 || z.is_empty() {
            return Err(Error::Shape(format!(
                "{} logits cannot be split into {} samples",
                z.len(),
                labels.len()
            )));
        }
        check_binary(labels)?;
        let m = z.len() / labels.len();
        let loss: f64 = labels
            .iter()
            .enumerate()
            .map(|(n, &g)| {
                let p = group_probability(&z[n * m..(n + 1) * m]);
                crate::daheads::bce(p, g)
            })
            .sum();
        let needs = self.needs(logits);
        Ok(self.push(
            Some(Tensor::scalar(loss)),
            Op::DomainBce {
                logits,
                labels: labels.to_vec(),
            },
            needs,
        ))
    }

    /// Weighted binary cross-entropy on logits, divided by `norm`.
    pub fn bce_logits(
        &mut self,
        logits: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
    ) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() || z.len() != weights.len() {
            return Err(Error::Shape("bce_logits target length".into()));
        }
        let loss: f64 = z
            .iter()
            .zip(&targets)
            .zip(&weights)
            .filter(|(_, w)| **w != 0.0)
            .map(|((&z, &t), &w)| w * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum::<f64>()
            / norm;
        let needs = self.needs(logits);
        Ok(self.push(
            Some(Tensor::scalar(loss)),
            Op::BceLogits {
                logits,
                targets,
                weights,
                norm,
            },
            needs,
        ))
    }

    /// Mean softmax cross-entropy over the rows of `logits: [rows, classes]`.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.value(logits).shape().to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || targets.iter().any(|&t| t >= shape[1]) {
            return Err(Error::Shape(format!(
                "softmax_ce logits {shape:?} with {} targets",
                targets.len()
            )));
        }
        let k = shape[1];
        let z = self.value(logits).data();
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &z[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[r * k + j] = (row[j] - max).exp() / sum;
            }
            loss += sum.ln() + max - row[t];
        }
        let rows = targets.len().max(1) as f64;
        let needs = self.needs(logits);
        Ok(self.push(
            Some(Tensor::scalar(loss / rows)),
            Op::SoftmaxCe {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// `sum(weights * smooth_l1(pred - targets)) / norm`.
    pub fn smooth_l1(
        &mut self,
        pred: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        beta: f64,
        norm: f64,
    ) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != targets.len() || p.len() != weights.len() {
            return Err(Error::Shape("smooth_l1 target length".into()));
        }
        let loss: f64 = p
            .iter()
            .zip(&targets)
            .zip(&weights)
            .map(|((p, t), w)| w * smooth_l1(p - t, beta))
            .sum::<f64>()
            / norm;
        let needs = self.needs(pred);
        Ok(self.push(
            Some(Tensor::scalar(loss)),
            Op::SmoothL1 {
                pred,
                targets,
                weights,
                beta,
                norm,
            },
            needs,
        ))
    }

    /// Mean over `rows` of the triplet hinge on normalized L2 distances.
    pub fn triplet(
        &mut self,
        anchor: Var,
        positive: Var,
        negative: Var,
        rows: usize,
        margin: f64,
    ) -> Result<Var> {
        let (a, p, n) = (self.value(anchor), self.value(positive), self.value(negative));
        if a.numel() != p.numel() || a.numel() != n.numel() || rows == 0 || a.numel() % rows != 0 {
            return Err(Error::Shape(format!(
                "triplet features {:?} {:?} {:?} in {rows} rows",
                a.shape(),
                p.shape(),
                n.shape()
            )));
        }
        let d = a.numel() / rows;
        let mut total = 0.0;
        for r in 0..rows {
            let s = r * d..(r + 1) * d;
            total += metricreg::triplet_hinge(
                metricreg::normalized_l2(&a.data()[s.clone()], &p.data()[s.clone()]),
                metricreg::normalized_l2(&a.data()[s.clone()], &n.data()[s]),
                margin,
            );
        }
        let needs = self.needs(anchor) || self.needs(positive) || self.needs(negative);
        Ok(self.push(
            Some(Tensor::scalar(total / rows as f64)),
            Op::Triplet {
                anchor,
                positive,
                negative,
                rows,
                margin,
            },
            needs,
        ))
    }

    /// `sum(weight * term)` over scalar terms.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let value: f64 = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Some(Tensor::scalar(value)), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// Back-propagates from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0; self.value(root).numel()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut params = vec![None; self.params.len()];
        for (pid, var) in self.param_vars.iter().enumerate() {
            if let Some(v) = var {
                params[pid] = grads[v.0].take();
            }
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let out_c = self.value(*w).shape()[0];
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                if self.needs(*b) {
                    let gb = acc(grads, *b, out_c);
                    for (o, chunk) in g.chunks(ncols).enumerate() {
                        gb[o] += chunk.iter().sum::<f64>();
                    }
                }
                if self.needs(*w) {
                    let gw = acc(grads, *w, out_c * rows);
                    gemm(
                        out_c,
                        ncols,
                        rows,
                        g,
                        (ncols as isize, 1),
                        cols,
                        (1, ncols as isize),
                        gw,
                        (rows as isize, 1),
                        1.0,
                    );
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; rows * ncols];
                    gemm(
                        rows,
                        out_c,
                        ncols,
                        self.value(*w).data(),
                        (1, rows as isize),
                        g,
                        (ncols as isize, 1),
                        &mut dcols,
                        (ncols as isize, 1),
                        0.0,
                    );
                    let gx = acc(grads, *x, geom.in_c * geom.in_h * geom.in_w);
                    col2im(&dcols, geom, gx);
                }
            }
            Op::Reshape(x) => {
                let gx = acc(grads, *x, g.len());
                for (a, b) in gx.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, xv.len());
                for ((d, &v), &gi) in gx.iter_mut().zip(xv).zip(g) {
                    if v > 0.0 {
                        *d += gi;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, fan_in) = (xs[0], xs[1]);
                let out = self.value(*w).shape()[0];
                if self.needs(*b) {
                    let gb = acc(grads, *b, out);
                    for row in g.chunks(out.max(1)) {
                        for (d, v) in gb.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                if self.needs(*w) {
                    let gw = acc(grads, *w, out * fan_in);
                    gemm(
                        out,
                        n,
                        fan_in,
                        g,
                        (1, out as isize),
                        self.value(*x).data(),
                        (fan_in as isize, 1),
                        gw,
                        (fan_in as isize, 1),
                        1.0,
                    );
                }
                if self.needs(*x) {
                    let gx = acc(grads, *x, n * fan_in);
                    gemm(
                        n,
                        out,
                        fan_in,
                        g,
                        (out as isize, 1),
                        self.value(*w).data(),
                        (fan_in as isize, 1),
                        gx,
                        (fan_in as isize, 1),
                        1.0,
                    );
                }
            }
            Op::RoiPool {
                x,
                mode,
                argmax,
                bins,
                channels,
                cells,
            } => {
                let xs = self.value(*x).shape().to_vec();
                let (h, w) = (xs[1], xs[2]);
                let gx = acc(grads, *x, xs.iter().product());
                match mode {
                    PoolMode::Max => {
                        for (&src, &gi) in argmax.iter().zip(g) {
                            gx[src] += gi;
                        }
                    }
                    PoolMode::Mean => {
                        for (j, &gi) in g.iter().enumerate() {
                            let cell = j % cells;
                            let ch = (j / cells) % channels;
                            let r = j / (cells * channels);
                            let [x0, y0, x1, y1] = bins[r * cells + cell];
                            let share = gi / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    gx[(ch * h + yy) * w + xx] += share;
                                }
                            }
                        }
                    }
                }
            }
            Op::Reverse { x, lambda } => {
                let back = revgrad::grl_backward(g, *lambda);
                let gx = acc(grads, *x, back.len());
                for (d, v) in gx.iter_mut().zip(back) {
                    *d += v;
                }
            }
            Op::DomainBce { logits, labels } => {
                let z = self.value(*logits).data();
                let m = z.len() / labels.len();
                let gz = acc(grads, *logits, z.len());
                for (n, &label) in labels.iter().enumerate() {
                    let group = &z[n * m..(n + 1) * m];
                    let raw = group.iter().map(|&v| sigmoid(v)).sum::<f64>() / m as f64;
                    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&raw) {
                        continue;
                    }
                    let dp = g[0] * (-label / raw + (1.0 - label) / (1.0 - raw));
                    for (d, &v) in gz[n * m..(n + 1) * m].iter_mut().zip(group) {
                        let s = sigmoid(v);
                        *d += dp * s * (1.0 - s) / m as f64;
                    }
                }
            }
            Op::BceLogits {
                logits,
                targets,
                weights,
                norm,
            } => {
                let z = self.value(*logits).data();
                let gz = acc(grads, *logits, z.len());
                for (((d, &v), &t), &w) in gz.iter_mut().zip(z).zip(targets).zip(weights) {
                    *d += g[0] * w * (sigmoid(v) - t) / norm;
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                let k = self.value(*logits).shape()[1];
                let rows = targets.len().max(1) as f64;
                let gz = acc(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        gz[r * k + j] += g[0] * (probs[r * k + j] - onehot) / rows;
                    }
                }
            }
            Op::SmoothL1 {
                pred,
                targets,
                weights,
                beta,
                norm,
            } => {
                let p = self.value(*pred).data();
                let gp = acc(grads, *pred, p.len());
                for (((d, &pv), &t), &w) in gp.iter_mut().zip(p).zip(targets).zip(weights) {
                    *d += g[0] * w * smooth_l1_grad(pv - t, *beta) / norm;
                }
            }
            Op::Triplet {
                anchor,
                positive,
                negative,
                rows,
                margin,
            } => {
                let a = self.value(*anchor).data();
                let p = self.value(*positive).data();
                let n = self.value(*negative).data();
                let d = a.len() / rows;
                let scale = g[0] / *rows as f64;
                let mut ga = vec![0.0; a.len()];
                let mut gp = vec![0.0; a.len()];
                let mut gn = vec![0.0; a.len()];
                for r in 0..*rows {
                    let s = r * d..(r + 1) * d;
                    let dap = metricreg::normalized_l2(&a[s.clone()], &p[s.clone()]);
                    let dan = metricreg::normalized_l2(&a[s.clone()], &n[s.clone()]);
                    if dap - dan + margin <= 0.0 {
                        continue;
                    }
                    for j in s {
                        // d/da of ||a - b|| / sqrt(D) is (a - b) / (D * dist).
                        let up = if dap > 0.0 { (a[j] - p[j]) / (d as f64 * dap) } else { 0.0 };
                        let un = if dan > 0.0 { (a[j] - n[j]) / (d as f64 * dan) } else { 0.0 };
                        ga[j] += scale * (up - un);
                        gp[j] -= scale * up;
                        gn[j] += scale * un;
                    }
                }
                for (v, gv) in [(*anchor, ga), (*positive, gp), (*negative, gn)] {
                    if self.needs(v) {
                        for (d, x) in acc(grads, v, gv.len()).iter_mut().zip(gv) {
                            *d += x;
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if self.needs(v) {
                        acc(grads, v, 1)[0] += g[0] * w;
                    }
                }
            }
        }
    }
}

pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params[id.0].as_deref()
    }

    pub fn node(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].as_deref()
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn check_binary(labels: &[f64]) -> Result<()> {
    match labels.iter().find(|&&g| g != 0.0 && g != 1.0) {
        Some(bad) => Err(Error::Input(format!("domain label must be 0 or 1, got {bad}"))),
        None => Ok(()),
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean of the sigmoid outputs, clamped away from 0 and 1.
pub fn group_probability(logits: &[f64]) -> f64 {
    let p = logits.iter().map(|&v| sigmoid(v)).sum::<f64>() / logits.len() as f64;
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn smooth_l1(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        0.5 * x * x / beta
    } else {
        x.abs() - 0.5 * beta
    }
}

fn smooth_l1_grad(x: f64, beta: f64) -> f64 {
    if x.abs() < beta {
        x / beta
    } else {
        x.signum()
    }
}

/// Splits `[x0, x1) × [y0, y1)` into `out × out` bins of at least one cell each.
fn pool_bins(cell_box: [usize; 4], out: usize, h: usize, w: usize) -> Vec<[usize; 4]> {
    let [bx0, by0, bx1, by1] = cell_box;
    let x0 = bx0.min(w - 1);
    let y0 = by0.min(h - 1);
    let x1 = bx1.clamp(x0 + 1, w);
    let y1 = by1.clamp(y0 + 1, h);
    let (bw, bh) = (x1 - x0, y1 - y0);
    let mut bins = Vec::with_capacity(out * out);
    for py in 0..out {
        let ys = y0 + (py * bh) / out;
        let ye = (y0 + ((py + 1) * bh).div_ceil(out)).max(ys + 1).min(y1);
        for px in 0..out {
            let xs = x0 + (px * bw) / out;
            let xe = (x0 + ((px + 1) * bw).div_ceil(out)).max(xs + 1).min(x1);
            bins.push([xs, ys, xe, ye]);
        }
    }
    bins
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut cols = vec![0.0; rows * ncols];
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &x[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let ncols = g.col_cols();
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut gx[(c * g.in_h + iy as usize) * g.in_w..][..g.in_w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            dst_row[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b + beta · c` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(extent(m, k, rsa, csa) as usize <= a.len());
    assert!(extent(k, n, rsb, csb) as usize <= b.len());
    assert!(extent(m, n, rsc, csc) as usize <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}
