//! Reverse-mode tape over [`Array`] values.
//!
//! Every primitive records its operands and a vector-Jacobian product on the
//! tape. A backward sweep visits the records exactly once in reverse
//! insertion order, which is already a topological order because operands
//! must exist before their consumers. Evaluation order is deterministic, so
//! repeated runs with one seed are bit-reproducible.

use std::rc::Rc;

use super::array::{matmul, matmul_nt, matmul_tn, Array};

pub type NodeId = usize;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("non-finite value produced by op `{op}`")]
    NonFinite { op: &'static str },
    #[error("loss must be a scalar node, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

type BackwardFn = dyn Fn(&Array, &[&Array], &Array) -> Vec<Array>;

struct Node {
    value: Array,
    parents: Vec<NodeId>,
    backward: Option<Box<BackwardFn>>,
}

/// One forward computation. Tapes are confined to a single worker.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    poison: Option<&'static str>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, id: NodeId) -> &Array {
        &self.nodes[id].value
    }

    /// First op that produced a non-finite value, if any.
    pub fn poisoned(&self) -> Option<&'static str> {
        self.poison
    }

    /// Records an input. Leaves receive gradients but propagate nothing.
    pub fn leaf(&mut self, value: Array) -> NodeId {
        self.record("leaf", value, vec![], None)
    }

    pub fn constant(&mut self, value: f64) -> NodeId {
        self.leaf(Array::scalar(value))
    }

    fn record(
        &mut self,
        op: &'static str,
        value: Array,
        parents: Vec<NodeId>,
        backward: Option<Box<BackwardFn>>,
    ) -> NodeId {
        if self.poison.is_none() && !value.all_finite() {
            self.poison = Some(op);
        }
        self.nodes.push(Node {
            value,
            parents,
            backward,
        });
        self.nodes.len() - 1
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let mut out = va.clone();
        out.axpy(1.0, vb);
        self.record(
            "add",
            out,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let mut out = va.clone();
        out.axpy(-1.0, vb);
        self.record(
            "sub",
            out,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.map(|v| -v)])),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let out = Array::new(
            va.shape().to_vec(),
            va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect(),
        );
        self.record(
            "mul",
            out,
            vec![a, b],
            Some(Box::new(|g, inputs, _| {
                let da = Array::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(inputs[1].data())
                        .map(|(gi, y)| gi * y)
                        .collect(),
                );
                let db = Array::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(inputs[0].data())
                        .map(|(gi, x)| gi * x)
                        .collect(),
                );
                vec![da, db]
            })),
        )
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(|v| -v);
        self.record(
            "neg",
            out,
            vec![a],
            Some(Box::new(|g, _, _| vec![g.map(|v| -v)])),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a].value.map(|v| c * v);
        self.record(
            "scale",
            out,
            vec![a],
            Some(Box::new(move |g, _, _| vec![g.map(|v| c * v)])),
        )
    }

    /// Broadcast-add a `1 x m` row vector to every row of an `n x m` matrix.
    pub fn add_row(&mut self, mat: NodeId, row: NodeId) -> NodeId {
        let (vm, vr) = (&self.nodes[mat].value, &self.nodes[row].value);
        assert_eq!(vm.cols(), vr.cols(), "add_row width mismatch");
        assert_eq!(vr.rows(), 1, "add_row expects a single row");
        let cols = vm.cols();
        let out = Array::from_fn(vm.rows(), cols, |i, j| vm.at(i, j) + vr.at(0, j));
        self.record(
            "add_row",
            out,
            vec![mat, row],
            Some(Box::new(|g, _, _| {
                let mut drow = Array::zeros(&[1, g.cols()]);
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        drow.data_mut()[j] += g.at(i, j);
                    }
                }
                vec![g.clone(), drow]
            })),
        )
    }

    /// Broadcast-subtract an `n x 1` column vector from every column.
    pub fn sub_col(&mut self, mat: NodeId, col: NodeId) -> NodeId {
        let (vm, vc) = (&self.nodes[mat].value, &self.nodes[col].value);
        assert_eq!(vm.rows(), vc.rows(), "sub_col height mismatch");
        assert_eq!(vc.cols(), 1, "sub_col expects a single column");
        let out = Array::from_fn(vm.rows(), vm.cols(), |i, j| vm.at(i, j) - vc.at(i, 0));
        self.record(
            "sub_col",
            out,
            vec![mat, col],
            Some(Box::new(|g, _, _| {
                let mut dcol = Array::zeros(&[g.rows(), 1]);
                for i in 0..g.rows() {
                    let mut s = 0.0;
                    for j in 0..g.cols() {
                        s += g.at(i, j);
                    }
                    dcol.data_mut()[i] = -s;
                }
                vec![g.clone(), dcol]
            })),
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = matmul(&self.nodes[a].value, &self.nodes[b].value);
        self.record(
            "matmul",
            out,
            vec![a, b],
            Some(Box::new(|g, inputs, _| {
                vec![matmul_nt(g, inputs[1]), matmul_tn(inputs[0], g)]
            })),
        )
    }

    /// `a * b^T`, used for attention scores.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = matmul_nt(&self.nodes[a].value, &self.nodes[b].value);
        self.record(
            "matmul_nt",
            out,
            vec![a, b],
            Some(Box::new(|g, inputs, _| {
                vec![matmul(g, inputs[1]), matmul_tn(g, inputs[0])]
            })),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.transposed();
        self.record(
            "transpose",
            out,
            vec![a],
            Some(Box::new(|g, _, _| vec![g.transposed()])),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(f64::tanh);
        self.record(
            "tanh",
            out,
            vec![a],
            Some(Box::new(|g, _, y| {
                vec![Array::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| gi * (1.0 - yi * yi))
                        .collect(),
                )]
            })),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(|v| v.max(0.0));
        self.record(
            "relu",
            out,
            vec![a],
            Some(Box::new(|g, inputs, _| {
                vec![Array::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(inputs[0].data())
                        .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                )]
            })),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a].value.map(f64::exp);
        self.record(
            "exp",
            out,
            vec![a],
            Some(Box::new(|g, _, y| {
                vec![Array::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(y.data())
                        .map(|(gi, yi)| gi * yi)
                        .collect(),
                )]
            })),
        )
    }

    /// Per-row layer normalization with learned gain and bias (`1 x m` each).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let (vx, vg, vb) = (
            &self.nodes[x].value,
            &self.nodes[gain].value,
            &self.nodes[bias].value,
        );
        let (n, m) = (vx.rows(), vx.cols());
        assert_eq!(vg.cols(), m, "layer_norm gain width mismatch");
        assert_eq!(vb.cols(), m, "layer_norm bias width mismatch");
        let mut out = Array::zeros(&[n, m]);
        for i in 0..n {
            let row = &vx.data()[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..m {
                out.data_mut()[i * m + j] = (row[j] - mean) * inv * vg.at(0, j) + vb.at(0, j);
            }
        }
        self.record(
            "layer_norm",
            out,
            vec![x, gain, bias],
            Some(Box::new(move |g, inputs, _| {
                let (vx, vg) = (inputs[0], inputs[1]);
                let (n, m) = (vx.rows(), vx.cols());
                let mut dx = Array::zeros(&[n, m]);
                let mut dgain = Array::zeros(&[1, m]);
                let mut dbias = Array::zeros(&[1, m]);
                for i in 0..n {
                    let row = &vx.data()[i * m..(i + 1) * m];
                    let mean = row.iter().sum::<f64>() / m as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let mut dxhat = vec![0.0; m];
                    let mut dxhat_mean = 0.0;
                    let mut dxhat_dot_xhat = 0.0;
                    for j in 0..m {
                        let gij = g.at(i, j);
                        dgain.data_mut()[j] += gij * xhat[j];
                        dbias.data_mut()[j] += gij;
                        dxhat[j] = gij * vg.at(0, j);
                        dxhat_mean += dxhat[j];
                        dxhat_dot_xhat += dxhat[j] * xhat[j];
                    }
                    dxhat_mean /= m as f64;
                    dxhat_dot_xhat /= m as f64;
                    for j in 0..m {
                        dx.data_mut()[i * m + j] =
                            inv * (dxhat[j] - dxhat_mean - xhat[j] * dxhat_dot_xhat);
                    }
                }
                vec![dx, dgain, dbias]
            })),
        )
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        self.softmax_impl(x, None)
    }

    /// Row softmax with an attention mask: `mask[i * m + j] == false` forces
    /// entry `(i, j)` to exactly zero before and after normalization, so no
    /// gradient ever crosses a masked-out pair. Every row must keep at least
    /// one admissible entry.
    pub fn masked_softmax_rows(&mut self, x: NodeId, mask: Rc<Vec<bool>>) -> NodeId {
        self.softmax_impl(x, Some(mask))
    }

    fn softmax_impl(&mut self, x: NodeId, mask: Option<Rc<Vec<bool>>>) -> NodeId {
        let vx = &self.nodes[x].value;
        let (n, m) = (vx.rows(), vx.cols());
        if let Some(mask) = &mask {
            assert_eq!(mask.len(), n * m, "mask size mismatch");
            for i in 0..n {
                assert!(
                    mask[i * m..(i + 1) * m].iter().any(|&b| b),
                    "softmax row {i} fully masked"
                );
            }
        }
        let admissible = |i: usize, j: usize| mask.as_ref().map_or(true, |ma| ma[i * m + j]);
        let mut out = Array::zeros(&[n, m]);
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                if admissible(i, j) {
                    max = max.max(vx.at(i, j));
                }
            }
            let mut total = 0.0;
            for j in 0..m {
                if admissible(i, j) {
                    let e = (vx.at(i, j) - max).exp();
                    out.data_mut()[i * m + j] = e;
                    total += e;
                }
            }
            for j in 0..m {
                out.data_mut()[i * m + j] /= total;
            }
        }
        self.record(
            "softmax",
            out,
            vec![x],
            Some(Box::new(move |g, _, y| {
                let (n, m) = (y.rows(), y.cols());
                let mut dx = Array::zeros(&[n, m]);
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in 0..m {
                        dot += g.at(i, j) * y.at(i, j);
                    }
                    for j in 0..m {
                        dx.data_mut()[i * m + j] = y.at(i, j) * (g.at(i, j) - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Row-wise log-sum-exp, returning an `n x 1` column.
    pub fn log_sum_exp_rows(&mut self, x: NodeId) -> NodeId {
        let vx = &self.nodes[x].value;
        let (n, m) = (vx.rows(), vx.cols());
        let mut out = Array::zeros(&[n, 1]);
        for i in 0..n {
            let row = &vx.data()[i * m..(i + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
            out.data_mut()[i] = max + s.ln();
        }
        self.record(
            "log_sum_exp",
            out,
            vec![x],
            Some(Box::new(|g, inputs, y| {
                let vx = inputs[0];
                let (n, m) = (vx.rows(), vx.cols());
                let mut dx = Array::zeros(&[n, m]);
                for i in 0..n {
                    for j in 0..m {
                        dx.data_mut()[i * m + j] = g.at(i, 0) * (vx.at(i, j) - y.at(i, 0)).exp();
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Select whole rows by index (duplicates allowed).
    pub fn gather_rows(&mut self, x: NodeId, indices: Rc<Vec<usize>>) -> NodeId {
        let vx = &self.nodes[x].value;
        let m = vx.cols();
        let out = Array::from_fn(indices.len(), m, |i, j| vx.at(indices[i], j));
        let idx = indices.clone();
        self.record(
            "gather_rows",
            out,
            vec![x],
            Some(Box::new(move |g, inputs, _| {
                let mut dx = Array::zeros(inputs[0].shape());
                let m = inputs[0].cols();
                for (i, &r) in idx.iter().enumerate() {
                    for j in 0..m {
                        dx.data_mut()[r * m + j] += g.at(i, j);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Pick one column per row, returning an `n x 1` column.
    pub fn take_per_row(&mut self, x: NodeId, cols: Rc<Vec<usize>>) -> NodeId {
        let vx = &self.nodes[x].value;
        assert_eq!(cols.len(), vx.rows(), "take_per_row needs one column per row");
        let out = Array::from_fn(vx.rows(), 1, |i, _| vx.at(i, cols[i]));
        let cols2 = cols.clone();
        self.record(
            "take_per_row",
            out,
            vec![x],
            Some(Box::new(move |g, inputs, _| {
                let mut dx = Array::zeros(inputs[0].shape());
                let m = inputs[0].cols();
                for (i, &c) in cols2.iter().enumerate() {
                    dx.data_mut()[i * m + c] += g.at(i, 0);
                }
                vec![dx]
            })),
        )
    }

    /// Stack matrices vertically.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let m = self.nodes[parts[0]].value.cols();
        let mut data = Vec::new();
        let mut heights = Vec::new();
        for &p in parts {
            let v = &self.nodes[p].value;
            assert_eq!(v.cols(), m, "concat_rows width mismatch");
            heights.push(v.rows());
            data.extend_from_slice(v.data());
        }
        let out = Array::matrix(heights.iter().sum(), m, data);
        self.record(
            "concat_rows",
            out,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let m = g.cols();
                let mut offset = 0;
                heights
                    .iter()
                    .map(|&h| {
                        let part = Array::matrix(
                            h,
                            m,
                            g.data()[offset * m..(offset + h) * m].to_vec(),
                        );
                        offset += h;
                        part
                    })
                    .collect()
            })),
        )
    }

    /// Stack matrices horizontally (e.g. attention heads).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = self.nodes[parts[0]].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let v = &self.nodes[p].value;
                assert_eq!(v.rows(), n, "concat_cols height mismatch");
                v.cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Array::zeros(&[n, total]);
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = &self.nodes[p].value;
            for i in 0..n {
                for j in 0..w {
                    out.data_mut()[i * total + offset + j] = v.at(i, j);
                }
            }
            offset += w;
        }
        self.record(
            "concat_cols",
            out,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let n = g.rows();
                let total = g.cols();
                let mut offset = 0;
                widths
                    .iter()
                    .map(|&w| {
                        let part = Array::from_fn(n, w, |i, j| g.data()[i * total + offset + j]);
                        offset += w;
                        part
                    })
                    .collect()
            })),
        )
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let out = Array::scalar(v.data().iter().sum());
        self.record(
            "sum_all",
            out,
            vec![a],
            Some(Box::new(|g, inputs, _| {
                let gv = g.scalar_value();
                vec![inputs[0].map(|_| gv)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a].value;
        let n = v.len() as f64;
        let out = Array::scalar(v.data().iter().sum::<f64>() / n);
        self.record(
            "mean_all",
            out,
            vec![a],
            Some(Box::new(move |g, inputs, _| {
                let gv = g.scalar_value() / n;
                vec![inputs[0].map(|_| gv)]
            })),
        )
    }

    /// Element-wise minimum; ties route the gradient to the first operand.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(va.shape(), vb.shape(), "minimum shape mismatch");
        let out = Array::new(
            va.shape().to_vec(),
            va.data()
                .iter()
                .zip(vb.data())
                .map(|(x, y)| x.min(*y))
                .collect(),
        );
        self.record(
            "minimum",
            out,
            vec![a, b],
            Some(Box::new(|g, inputs, _| {
                let (va, vb) = (inputs[0], inputs[1]);
                let mut da = Array::zeros(g.shape());
                let mut db = Array::zeros(g.shape());
                for i in 0..g.len() {
                    if va.data()[i] <= vb.data()[i] {
                        da.data_mut()[i] = g.data()[i];
                    } else {
                        db.data_mut()[i] = g.data()[i];
                    }
                }
                vec![da, db]
            })),
        )
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let out = self.nodes[a].value.map(|v| v.clamp(lo, hi));
        self.record(
            "clamp",
            out,
            vec![a],
            Some(Box::new(move |g, inputs, _| {
                let mut dx = Array::zeros(g.shape());
                for i in 0..g.len() {
                    let x = inputs[0].data()[i];
                    if x >= lo && x <= hi {
                        dx.data_mut()[i] = g.data()[i];
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Loss value plus gradients for the listed parameter nodes. Parameters
    /// the loss does not reach receive zero gradients; parameters used twice
    /// receive the sum of both contributions.
    pub fn value_and_grad(
        &self,
        loss: NodeId,
        params: &[NodeId],
    ) -> Result<(f64, Vec<Array>), DiffError> {
        if let Some(op) = self.poison {
            return Err(DiffError::NonFinite { op });
        }
        let loss_value = &self.nodes[loss].value;
        if loss_value.len() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Array>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Array::new(loss_value.shape().to_vec(), vec![1.0]));
        for id in (0..=loss).rev() {
            let node = &self.nodes[id];
            let (backward, grad) = match (&node.backward, &grads[id]) {
                (Some(b), Some(g)) => (b, g),
                _ => continue,
            };
            let parent_values: Vec<&Array> =
                node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let parent_grads = backward(grad, &parent_values, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[p] {
                    Some(acc) => acc.axpy(1.0, &pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        let out = params
            .iter()
            .map(|&p| {
                grads[p]
                    .take()
                    .unwrap_or_else(|| Array::zeros(self.nodes[p].value.shape()))
            })
            .collect::<Vec<_>>();
        for g in &out {
            if !g.all_finite() {
                return Err(DiffError::NonFinite { op: "backward" });
            }
        }
        Ok((loss_value.scalar_value(), out))
    }
}
