//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding the
//! op's output tensor, the node ids of its inputs, and a closure that maps the
//! gradient at the output back onto the inputs. [`Tape::backward`] walks the
//! nodes in reverse topological order (which is simply reverse insertion
//! order) and accumulates gradients.
//!
//! Parameter tensors enter the graph through [`Tape::leaf_arc`] without being
//! copied; ops with no closed-form rule here (e.g. a CRF likelihood) attach a
//! hand-written rule through [`Tape::custom`].

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Error, Result};

use super::tensor::{ew_add, ew_mul, matmul as t_matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
}

/// Read-only access to the input values of the node being differentiated.
pub struct Parents<'a> {
    ids: &'a [usize],
    nodes: &'a [Node],
}

impl Parents<'_> {
    pub fn value(&self, k: usize) -> &Tensor {
        &self.nodes[self.ids[k]].value
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Gradient accumulator offered to backward rules.
///
/// Indexing is by parent ordinal (position in the op's input list), not node
/// id; accumulation is element-wise over the flattened tensor.
pub struct GradSink<'a> {
    ids: &'a [usize],
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
}

impl GradSink<'_> {
    /// Run `f` over the (created-on-first-use) gradient buffer of parent `k`.
    pub fn with<F: FnOnce(&mut [f64])>(&mut self, k: usize, f: F) {
        let id = self.ids[k];
        let nodes = self.nodes;
        let g = self.grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
        f(g.data_mut());
    }

    /// Add `contrib` element-wise into the gradient of parent `k`.
    pub fn add(&mut self, k: usize, contrib: &Tensor) {
        debug_assert_eq!(
            contrib.len(),
            self.nodes[self.ids[k]].value.len(),
            "gradient contribution size mismatch"
        );
        self.with(k, |g| {
            for (gi, ci) in g.iter_mut().zip(contrib.data()) {
                *gi += ci;
            }
        });
    }
}

/// Backward rule: `(grad_at_output, output_value, input_values, sink)`.
type BackwardFn = Box<dyn Fn(&Tensor, &Tensor, &Parents, &mut GradSink)>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Gradients produced by one [`Tape::backward`] call, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to `v`, if `v` influenced it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Remove and return the gradient for `v`.
    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> Arc<Tensor> {
        self.nodes.borrow()[v.id].value.clone()
    }

    fn push(&self, value: Arc<Tensor>, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        debug_assert!(parents.iter().all(|&p| p < id));
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var { id }
    }

    /// Introduce an owned tensor as a graph input.
    pub fn leaf(&self, t: Tensor) -> Var {
        self.push(Arc::new(t), vec![], None)
    }

    /// Introduce a shared tensor (typically a model parameter) without
    /// copying its storage.
    pub fn leaf_arc(&self, t: Arc<Tensor>) -> Var {
        self.push(t, vec![], None)
    }

    /// Element-wise sum; `b` may also be a single row broadcast over the rows
    /// of `a` (the bias pattern).
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let broadcast = av.shape() != bv.shape();
        let out = if !broadcast {
            ew_add(&av, &bv)
        } else if bv.rows() == 1 && av.cols() == bv.cols() {
            let (m, n) = (av.rows(), av.cols());
            let mut data = av.data().to_vec();
            for r in 0..m {
                for c in 0..n {
                    data[r * n + c] += bv.data()[c];
                }
            }
            Tensor::new(vec![m, n], data)?
        } else {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        };
        Ok(self.push(
            Arc::new(out),
            vec![a.id, b.id],
            Some(Box::new(move |g, _, _, sink| {
                sink.add(0, g);
                if broadcast {
                    sink.with(1, |gb| {
                        for r in 0..g.rows() {
                            for (c, gb_c) in gb.iter_mut().enumerate() {
                                *gb_c += g.at(r, c);
                            }
                        }
                    });
                } else {
                    sink.add(1, g);
                }
            })),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| c * x);
        self.push(
            Arc::new(out),
            vec![a.id],
            Some(Box::new(move |g, _, _, sink| {
                sink.with(0, |ga| {
                    for (ga_i, g_i) in ga.iter_mut().zip(g.data()) {
                        *ga_i += c * g_i;
                    }
                });
            })),
        )
    }

    /// Element-wise (Hadamard) product of equal-shaped tensors.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let out = ew_mul(&av, &bv);
        Ok(self.push(
            Arc::new(out),
            vec![a.id, b.id],
            Some(Box::new(|g, _, p, sink| {
                let (a, b) = (p.value(0), p.value(1));
                sink.with(0, |ga| {
                    for ((ga_i, g_i), b_i) in ga.iter_mut().zip(g.data()).zip(b.data()) {
                        *ga_i += g_i * b_i;
                    }
                });
                sink.with(1, |gb| {
                    for ((gb_i, g_i), a_i) in gb.iter_mut().zip(g.data()).zip(a.data()) {
                        *gb_i += g_i * a_i;
                    }
                });
            })),
        ))
    }

    /// Element-wise product with a fixed tensor (e.g. a dropout mask) that
    /// receives no gradient.
    pub fn mul_const(&self, a: Var, m: &Tensor) -> Result<Var> {
        let av = self.value(a);
        if av.shape() != m.shape() {
            return Err(Error::ShapeMismatch {
                op: "mul_const",
                lhs: av.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        let out = ew_mul(&av, m);
        let m = m.clone();
        Ok(self.push(
            Arc::new(out),
            vec![a.id],
            Some(Box::new(move |g, _, _, sink| {
                sink.with(0, |ga| {
                    for ((ga_i, g_i), m_i) in ga.iter_mut().zip(g.data()).zip(m.data()) {
                        *ga_i += g_i * m_i;
                    }
                });
            })),
        ))
    }

    /// Matrix product.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let out = t_matmul(&av, &bv)?;
        Ok(self.push(
            Arc::new(out),
            vec![a.id, b.id],
            Some(Box::new(|g, _, p, sink| {
                let (a, b) = (p.value(0), p.value(1));
                sink.add(0, &matmul_nt(g, b));
                sink.add(1, &matmul_tn(a, g));
            })),
        ))
    }

    /// Logistic sigmoid, element-wise.
    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(
            Arc::new(out),
            vec![a.id],
            Some(Box::new(|g, y, _, sink| {
                sink.with(0, |ga| {
                    for ((ga_i, g_i), y_i) in ga.iter_mut().zip(g.data()).zip(y.data()) {
                        *ga_i += g_i * y_i * (1.0 - y_i);
                    }
                });
            })),
        )
    }

    /// Hyperbolic tangent, element-wise.
    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(
            Arc::new(out),
            vec![a.id],
            Some(Box::new(|g, y, _, sink| {
                sink.with(0, |ga| {
                    for ((ga_i, g_i), y_i) in ga.iter_mut().zip(g.data()).zip(y.data()) {
                        *ga_i += g_i * (1.0 - y_i * y_i);
                    }
                });
            })),
        )
    }

    /// Row-wise log-softmax of a matrix (a vector is one row).
    pub fn log_softmax_rows(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::EmptyInput("log_softmax_rows"));
        }
        let (m, n) = (av.rows(), av.cols());
        let mut data = av.data().to_vec();
        for r in 0..m {
            let lse = super::tensor::logsumexp(&data[r * n..(r + 1) * n]);
            for v in &mut data[r * n..(r + 1) * n] {
                *v -= lse;
            }
        }
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(
            Arc::new(out),
            vec![a.id],
            Some(Box::new(move |g, y, _, sink| {
                sink.with(0, |ga| {
                    for r in 0..m {
                        let row = r * n;
                        let gsum: f64 = g.data()[row..row + n].iter().sum();
                        for c in 0..n {
                            ga[row + c] +=
                                g.data()[row + c] - y.data()[row + c].exp() * gsum;
                        }
                    }
                });
            })),
        ))
    }

    /// Concatenate along columns; all parts must have the same row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_cols"));
        }
        let values: Vec<Arc<Tensor>> = parts.iter().map(|&v| self.value(v)).collect();
        let m = values[0].rows();
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        for v in &values {
            if v.rows() != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let mut o = 0;
            for v in &values {
                let w = v.cols();
                data[r * n + o..r * n + o + w].copy_from_slice(v.row_slice(r));
                o += w;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(
            Arc::new(out),
            parts.iter().map(|v| v.id).collect(),
            Some(Box::new(move |g, _, _, sink| {
                let mut o = 0;
                for (k, &w) in widths.iter().enumerate() {
                    sink.with(k, |gp| {
                        for r in 0..m {
                            for c in 0..w {
                                gp[r * w + c] += g.at(r, o + c);
                            }
                        }
                    });
                    o += w;
                }
            })),
        ))
    }

    /// Stack single-row tensors into a matrix.
    pub fn stack_rows(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("stack_rows"));
        }
        let values: Vec<Arc<Tensor>> = parts.iter().map(|&v| self.value(v)).collect();
        let n = values[0].cols();
        for v in &values {
            if v.rows() != 1 || v.cols() != n {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    lhs: values[0].shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
        }
        let m = values.len();
        let mut data = Vec::with_capacity(m * n);
        for v in &values {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(
            Arc::new(out),
            parts.iter().map(|v| v.id).collect(),
            Some(Box::new(move |g, _, _, sink| {
                for k in 0..m {
                    sink.with(k, |gp| {
                        for (gp_c, g_c) in gp.iter_mut().zip(g.row_slice(k)) {
                            *gp_c += g_c;
                        }
                    });
                }
            })),
        ))
    }

    /// Select rows of a matrix by index (an embedding lookup). Repeated
    /// indices accumulate gradient.
    pub fn gather_rows(&self, a: Var, indices: &[usize]) -> Result<Var> {
        if indices.is_empty() {
            return Err(Error::EmptyInput("gather_rows"));
        }
        let av = self.value(a);
        let n = av.cols();
        for &i in indices {
            assert!(i < av.rows(), "gather_rows: index {i} out of {}", av.rows());
        }
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(av.row_slice(i));
        }
        let out = Tensor::new(vec![indices.len(), n], data)?;
        let indices = indices.to_vec();
        Ok(self.push(
            Arc::new(out),
            vec![a.id],
            Some(Box::new(move |g, _, _, sink| {
                sink.with(0, |ga| {
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..n {
                            ga[i * n + c] += g.at(r, c);
                        }
                    }
                });
            })),
        ))
    }

    /// All full-width sliding windows of `w` consecutive rows, each flattened
    /// into one row: `[m, n] -> [m - w + 1, w·n]`.
    pub fn windows(&self, a: Var, w: usize) -> Result<Var> {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        if w == 0 || w > m {
            return Err(Error::ShapeMismatch {
                op: "windows",
                lhs: av.shape().to_vec(),
                rhs: vec![w],
            });
        }
        let rows = m - w + 1;
        let mut data = Vec::with_capacity(rows * w * n);
        for r in 0..rows {
            data.extend_from_slice(&av.data()[r * n..(r + w) * n]);
        }
        let out = Tensor::new(vec![rows, w * n], data)?;
        Ok(self.push(
            Arc::new(out),
            vec![a.id],
            Some(Box::new(move |g, _, _, sink| {
                sink.with(0, |ga| {
                    for r in 0..rows {
                        for k in 0..w {
                            for c in 0..n {
                                ga[(r + k) * n + c] += g.at(r, k * n + c);
                            }
                        }
                    }
                });
            })),
        ))
    }

    /// Column-wise maximum over rows: `[m, n] -> [1, n]`. Ties resolve to the
    /// first (lowest-index) maximal row, which also receives the gradient.
    pub fn max_over_rows(&self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut data = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0usize; n];
        for r in 0..m {
            for c in 0..n {
                let v = av.at(r, c);
                if v > data[c] {
                    data[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let out = Tensor::row(data);
        self.push(
            Arc::new(out),
            vec![a.id],
            Some(Box::new(move |g, _, _, sink| {
                sink.with(0, |ga| {
                    for (c, &r) in argmax.iter().enumerate() {
                        ga[r * n + c] += g.data()[c];
                    }
                });
            })),
        )
    }

    /// Sum of all elements, as a 1x1 tensor.
    pub fn sum(&self, a: Var) -> Var {
        let av = self.value(a);
        let out = Tensor::scalar(av.data().iter().sum());
        self.push(
            Arc::new(out),
            vec![a.id],
            Some(Box::new(|g, _, _, sink| {
                let gv = g.data()[0];
                sink.with(0, |ga| {
                    for ga_i in ga.iter_mut() {
                        *ga_i += gv;
                    }
                });
            })),
        )
    }

    /// Single element `(r, c)` as a 1x1 tensor.
    pub fn pick(&self, a: Var, r: usize, c: usize) -> Var {
        self.pick_sum(a, &[(r, c)])
    }

    /// Sum of the selected elements, as a 1x1 tensor. Repeats accumulate.
    pub fn pick_sum(&self, a: Var, at: &[(usize, usize)]) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let total: f64 = at.iter().map(|&(r, c)| av.at(r, c)).sum();
        let at = at.to_vec();
        self.push(
            Arc::new(Tensor::scalar(total)),
            vec![a.id],
            Some(Box::new(move |g, _, _, sink| {
                let gv = g.data()[0];
                sink.with(0, |ga| {
                    for &(r, c) in &at {
                        ga[r * n + c] += gv;
                    }
                });
            })),
        )
    }

    /// Copy of row `r` as a `[1, n]` tensor.
    pub fn row(&self, a: Var, r: usize) -> Var {
        let av = self.value(a);
        let n = av.cols();
        let out = Tensor::row(av.row_slice(r).to_vec());
        self.push(
            Arc::new(out),
            vec![a.id],
            Some(Box::new(move |g, _, _, sink| {
                sink.with(0, |ga| {
                    for (c, g_c) in g.data().iter().enumerate() {
                        ga[r * n + c] += g_c;
                    }
                });
            })),
        )
    }

    /// Record an externally computed op with a hand-written backward rule.
    pub fn custom<F>(&self, parents: &[Var], value: Tensor, backward: F) -> Var
    where
        F: Fn(&Tensor, &Tensor, &Parents, &mut GradSink) + 'static,
    {
        self.push(
            Arc::new(value),
            parents.iter().map(|v| v.id).collect(),
            Some(Box::new(backward)),
        )
    }

    /// Reverse-mode sweep from a single-element `output` node. Returns the
    /// gradient of `output` with respect to every node that influenced it.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out_len = nodes[output.id].value.len();
        if out_len != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                lhs: nodes[output.id].value.shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[output.id] = Some(Tensor::filled(nodes[output.id].value.shape(), 1.0));
        for i in (0..=output.id).rev() {
            let (before, rest) = grads.split_at_mut(i);
            let g = match &rest[0] {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            if let Some(bw) = &node.backward {
                let parents = Parents {
                    ids: &node.parents,
                    nodes: &nodes[..i],
                };
                let mut sink = GradSink {
                    ids: &node.parents,
                    nodes: &nodes[..i],
                    grads: before,
                };
                bw(g, &node.value, &parents, &mut sink);
            }
        }
        Ok(Gradients { grads })
    }
}
