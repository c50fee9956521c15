//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the result
//! value and a backward closure. Appending order is a topological order, so
//! the backward pass is a single reverse sweep. Graphs are built per training
//! step and dropped afterwards; nothing is retained across steps.
//!
//! Execution of a single graph is sequential, which keeps forward and
//! backward passes bitwise deterministic. Independent graphs (one per batch
//! sample, one per tile) can run on separate threads.

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{CoreError, Result};
use crate::tensor::{numel, strides, Tensor};

type BackFn = Box<dyn Fn(&Tensor) -> Vec<(usize, Tensor)>>;

struct Node {
    value: Tensor,
    requires_grad: bool,
    backward: Option<BackFn>,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// Tape of recorded operations, reset by dropping.
#[derive(Default)]
pub struct Graph {
    inner: RefCell<Inner>,
}

/// Handle to a node on some graph. Cheap to copy.
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    /// Insert a value that does not require gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, None)
    }

    /// Insert a leaf that accumulates gradients (a parameter or probed input).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, None)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, backward: Option<BackFn>) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            requires_grad,
            backward,
        });
        Var { graph: self, id }
    }

    /// Reverse sweep from a scalar root. Gradients accumulate on every node
    /// that requires them and stay readable until the next backward call.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(root.graph, self), "var from another graph");
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        assert_eq!(
            inner.nodes[root.id].value.numel(),
            1,
            "backward root must be scalar"
        );
        inner.nodes[root.id]
            .value
            .validate("backward root")
            .map_err(|_| CoreError::NonFinite {
                context: "backward root (loss is NaN or infinite)".to_string(),
            })?;

        inner.grads = vec![None; n];
        inner.grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let Some(grad) = inner.grads[id].take() else {
                continue;
            };
            let node = &inner.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let contributions = match &node.backward {
                Some(back) => {
                    let grad_t = Tensor::from_vec(node.value.shape(), grad.clone());
                    back(&grad_t)
                }
                None => Vec::new(),
            };
            inner.grads[id] = Some(grad);
            for (parent, contrib) in contributions {
                if !inner.nodes[parent].requires_grad {
                    continue;
                }
                debug_assert_eq!(contrib.numel(), inner.nodes[parent].value.numel());
                match &mut inner.grads[parent] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib.to_vec()),
                }
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `var`, zeros if untouched.
    pub fn grad(&self, var: Var<'_>) -> Tensor {
        let inner = self.inner.borrow();
        let shape = inner.nodes[var.id].value.shape().to_vec();
        match inner.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_vec(&shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }
}

impl<'g> Var<'g> {
    pub fn value(&self) -> Tensor {
        self.graph.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    fn unary(
        &self,
        value: Tensor,
        back: impl Fn(&Tensor) -> Tensor + 'static,
    ) -> Var<'g> {
        let id = self.id;
        let rg = self.requires_grad();
        let backward: Option<BackFn> = if rg {
            Some(Box::new(move |g| vec![(id, back(g))]))
        } else {
            None
        };
        self.graph.push(value, rg, backward)
    }

    // ---- elementwise arithmetic (numpy-style broadcasting) ----

    pub fn add(&self, rhs: Var<'g>) -> Var<'g> {
        self.binary_broadcast(rhs, "add", |a, b| a + b, |_a, _b| (1.0, 1.0))
    }

    pub fn sub(&self, rhs: Var<'g>) -> Var<'g> {
        self.binary_broadcast(rhs, "sub", |a, b| a - b, |_a, _b| (1.0, -1.0))
    }

    pub fn mul(&self, rhs: Var<'g>) -> Var<'g> {
        self.binary_broadcast(rhs, "mul", |a, b| a * b, |a, b| (b, a))
    }

    pub fn div(&self, rhs: Var<'g>) -> Var<'g> {
        self.binary_broadcast(rhs, "div", |a, b| a / b, |a, b| (1.0 / b, -a / (b * b)))
    }

    /// `a * x + b` with scalar constants.
    pub fn affine(&self, a: f64, b: f64) -> Var<'g> {
        let value = self.value().map(|v| a * v + b);
        self.unary(value, move |g| g.map(|gv| gv * a))
    }

    pub fn neg(&self) -> Var<'g> {
        self.affine(-1.0, 0.0)
    }

    pub fn exp(&self) -> Var<'g> {
        let value = self.value().map(f64::exp);
        let out = value.clone();
        self.unary(value, move |g| {
            zip_map(g, &out, |gv, y| gv * y)
        })
    }

    pub fn sqrt(&self) -> Var<'g> {
        let value = self.value().map(f64::sqrt);
        let out = value.clone();
        self.unary(value, move |g| zip_map(g, &out, |gv, y| gv * 0.5 / y))
    }

    pub fn square(&self) -> Var<'g> {
        self.mul(*self)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let value = self.value().map(sigmoid);
        let out = value.clone();
        self.unary(value, move |g| zip_map(g, &out, |gv, y| gv * y * (1.0 - y)))
    }

    /// x * sigmoid(x), the activation used throughout the models here.
    pub fn silu(&self) -> Var<'g> {
        let input = self.value();
        let value = input.map(|v| v * sigmoid(v));
        self.unary(value, move |g| {
            zip_map(g, &input, |gv, x| {
                let s = sigmoid(x);
                gv * (s + x * s * (1.0 - s))
            })
        })
    }

    /// log(1 + e^x), a smooth non-negative squashing for magnitude outputs.
    pub fn softplus(&self) -> Var<'g> {
        let input = self.value();
        let value = input.map(softplus);
        self.unary(value, move |g| zip_map(g, &input, |gv, x| gv * sigmoid(x)))
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Var<'g> {
        let input_shape = self.shape();
        let total: f64 = self.value().data().iter().sum();
        self.unary(Tensor::scalar(total), move |g| {
            Tensor::full(&input_shape, g.data()[0])
        })
    }

    pub fn mean_all(&self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum_all().affine(1.0 / n, 0.0)
    }

    /// Sum over the given axes. `keepdim` keeps the reduced axes at length 1.
    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Var<'g> {
        let value = self.value();
        let in_shape = value.shape().to_vec();
        let mut reduce = vec![false; in_shape.len()];
        for &a in axes {
            assert!(a < in_shape.len(), "axis {a} out of range");
            reduce[a] = true;
        }
        let kept_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(i, &s)| if reduce[i] { 1 } else { s })
            .collect();
        let out_shape: Vec<usize> = if keepdim {
            kept_shape.clone()
        } else {
            in_shape
                .iter()
                .enumerate()
                .filter(|(i, _)| !reduce[*i])
                .map(|(_, &s)| s)
                .collect()
        };
        let out_shape = if out_shape.is_empty() {
            vec![1]
        } else {
            out_shape
        };

        let in_strides = strides(&in_shape);
        let kept_strides = strides(&kept_shape);
        let mut out = vec![0.0; numel(&kept_shape)];
        for (flat, &v) in value.data().iter().enumerate() {
            let mut rem = flat;
            let mut kept_flat = 0;
            for (i, &st) in in_strides.iter().enumerate() {
                let idx = rem / st;
                rem %= st;
                if !reduce[i] {
                    kept_flat += idx * kept_strides[i];
                }
            }
            out[kept_flat] += v;
        }
        let result = Tensor::from_vec(&out_shape, out);

        let in_shape_b = in_shape.clone();
        let kept_shape_b = kept_shape.clone();
        self.unary(result, move |g| {
            // broadcast the (kept-dims) gradient back over the reduced axes
            let g = g.reshaped(&kept_shape_b);
            let in_strides = strides(&in_shape_b);
            let kept_strides = strides(&kept_shape_b);
            let mut out = vec![0.0; numel(&in_shape_b)];
            for (flat, slot) in out.iter_mut().enumerate() {
                let mut rem = flat;
                let mut kept_flat = 0;
                for (i, &st) in in_strides.iter().enumerate() {
                    let idx = rem / st;
                    rem %= st;
                    if kept_shape_b[i] != 1 {
                        kept_flat += idx * kept_strides[i];
                    }
                }
                *slot = g.data()[kept_flat];
            }
            Tensor::from_vec(&in_shape_b, out)
        })
    }

    // ---- shape manipulation ----

    pub fn reshape(&self, shape: &[usize]) -> Var<'g> {
        let value = self.value().reshaped(shape);
        let in_shape = self.shape();
        self.unary(value, move |g| g.reshaped(&in_shape))
    }

    pub fn permute(&self, perm: &[usize]) -> Var<'g> {
        let value = permute_tensor(&self.value(), perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.unary(value, move |g| permute_tensor(g, &inverse))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'g> {
        let value = self.value();
        let in_shape = value.shape().to_vec();
        assert!(axis < in_shape.len() && start + len <= in_shape[axis]);
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;

        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(numel(&out_shape));
        let src = value.data();
        for o in 0..outer {
            let base = (o * in_shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let result = Tensor::from_vec(&out_shape, out);

        let in_shape_b = in_shape.clone();
        self.unary(result, move |g| {
            let mut out = vec![0.0; numel(&in_shape_b)];
            let gd = g.data();
            for o in 0..outer {
                let dst = (o * in_shape_b[axis] + start) * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            Tensor::from_vec(&in_shape_b, out)
        })
    }

    /// Gather flat elements through a precomputed plan; index -1 reads 0.
    /// Covers im2col for the causal convolutions and patch (un)folding.
    pub fn gather(&self, plan: &GatherPlan) -> Var<'g> {
        let value = self.value();
        assert_eq!(
            value.numel(),
            plan.in_numel,
            "gather plan built for a different input size"
        );
        let src = value.data();
        let out: Vec<f64> = plan
            .indices
            .iter()
            .map(|&i| if i < 0 { 0.0 } else { src[i as usize] })
            .collect();
        let result = Tensor::from_vec(&plan.out_shape, out);

        let indices = Arc::clone(&plan.indices);
        let in_shape = value.shape().to_vec();
        self.unary(result, move |g| {
            let mut out = vec![0.0; numel(&in_shape)];
            for (&i, &gv) in indices.iter().zip(g.data()) {
                if i >= 0 {
                    out[i as usize] += gv;
                }
            }
            Tensor::from_vec(&in_shape, out)
        })
    }

    // ---- matrix products ----

    /// 2-D matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, rhs: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.rank(), 2, "matmul lhs must be 2-D");
        assert_eq!(b.rank(), 2, "matmul rhs must be 2-D");
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");

        let mut out = vec![0.0; m * n];
        mm_nn(a.data(), b.data(), &mut out, m, k, n);
        let result = Tensor::from_vec(&[m, n], out);

        let (lhs_id, rhs_id) = (self.id, rhs.id);
        let (lhs_rg, rhs_rg) = (self.requires_grad(), rhs.requires_grad());
        let rg = lhs_rg || rhs_rg;
        let backward: Option<BackFn> = if rg {
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut contributions = Vec::new();
                if lhs_rg {
                    let mut da = vec![0.0; m * k];
                    mm_nt(gd, b.data(), &mut da, m, n, k);
                    contributions.push((lhs_id, Tensor::from_vec(&[m, k], da)));
                }
                if rhs_rg {
                    let mut db = vec![0.0; k * n];
                    mm_tn(a.data(), gd, &mut db, m, k, n);
                    contributions.push((rhs_id, Tensor::from_vec(&[k, n], db)));
                }
                contributions
            }))
        } else {
            None
        };
        self.graph.push(result, rg, backward)
    }

    /// Batched matrix product: `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// identical leading dimensions.
    pub fn bmm(&self, rhs: Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = rhs.value();
        assert!(a.rank() >= 2 && b.rank() == a.rank(), "bmm rank mismatch");
        let lead = &a.shape()[..a.rank() - 2];
        assert_eq!(lead, &b.shape()[..b.rank() - 2], "bmm leading dims differ");
        let (m, k) = (a.shape()[a.rank() - 2], a.shape()[a.rank() - 1]);
        let (k2, n) = (b.shape()[b.rank() - 2], b.shape()[b.rank() - 1]);
        assert_eq!(k, k2, "bmm inner dims {k} vs {k2}");
        let batch: usize = lead.iter().product();

        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            mm_nn(
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let result = Tensor::from_vec(&out_shape, out);

        let (lhs_id, rhs_id) = (self.id, rhs.id);
        let (lhs_rg, rhs_rg) = (self.requires_grad(), rhs.requires_grad());
        let rg = lhs_rg || rhs_rg;
        let a_shape = a.shape().to_vec();
        let b_shape = b.shape().to_vec();
        let backward: Option<BackFn> = if rg {
            Some(Box::new(move |g| {
                let gd = g.data();
                let mut contributions = Vec::new();
                if lhs_rg {
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        mm_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &b.data()[bi * k * n..(bi + 1) * k * n],
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    contributions.push((lhs_id, Tensor::from_vec(&a_shape, da)));
                }
                if rhs_rg {
                    let mut db = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        mm_tn(
                            &a.data()[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            &mut db[bi * k * n..(bi + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    contributions.push((rhs_id, Tensor::from_vec(&b_shape, db)));
                }
                contributions
            }))
        } else {
            None
        };
        self.graph.push(result, rg, backward)
    }

    // ---- softmax ----

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'g> {
        let value = self.value();
        let shape = value.shape().to_vec();
        let width = *shape.last().expect("softmax on rank-0 tensor");
        assert!(width > 0, "softmax over empty axis");
        let mut out = value.to_vec();
        for row in out.chunks_exact_mut(width) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let result = Tensor::from_vec(&shape, out);
        let y = result.clone();
        self.unary(result, move |g| {
            let mut out = g.to_vec();
            let yd = y.data();
            for (row, yrow) in out.chunks_exact_mut(width).zip(yd.chunks_exact(width)) {
                let dot: f64 = row.iter().zip(yrow).map(|(gv, yv)| gv * yv).sum();
                for (gv, yv) in row.iter_mut().zip(yrow) {
                    *gv = yv * (*gv - dot);
                }
            }
            Tensor::from_vec(&g.shape().to_vec(), out)
        })
    }

    // ---- rotary position application ----

    /// Rotate consecutive coordinate pairs of the last axis by the angles in
    /// `table`; the second-to-last axis must match the table length. The
    /// adjoint is the rotation by the negated angles, so norms are preserved
    /// in both passes.
    pub fn rope(&self, table: &RotationTable) -> Var<'g> {
        let value = self.value();
        let result = table.apply(&value, false);
        let table = table.clone();
        self.unary(result, move |g| table.apply(g, true))
    }

    fn binary_broadcast(
        &self,
        rhs: Var<'g>,
        op: &'static str,
        f: fn(f64, f64) -> f64,
        dfdab: fn(f64, f64) -> (f64, f64),
    ) -> Var<'g> {
        let a = self.value();
        let b = rhs.value();
        let out_shape = broadcast_shapes(a.shape(), b.shape())
            .unwrap_or_else(|| panic!("{op}: cannot broadcast {:?} vs {:?}", a.shape(), b.shape()));

        let value = broadcast_apply(&a, &b, &out_shape, f);
        let (lhs_id, rhs_id) = (self.id, rhs.id);
        let (lhs_rg, rhs_rg) = (self.requires_grad(), rhs.requires_grad());
        let rg = lhs_rg || rhs_rg;
        let backward: Option<BackFn> = if rg {
            let a_shape = a.shape().to_vec();
            let b_shape = b.shape().to_vec();
            let out_shape_b = out_shape.clone();
            Some(Box::new(move |g| {
                let ga = broadcast_apply3(&a, &b, g, &out_shape_b, |av, bv, gv| {
                    gv * dfdab(av, bv).0
                });
                let gb = broadcast_apply3(&a, &b, g, &out_shape_b, |av, bv, gv| {
                    gv * dfdab(av, bv).1
                });
                let mut contributions = Vec::new();
                if lhs_rg {
                    contributions.push((lhs_id, reduce_to_shape(&ga, &a_shape)));
                }
                if rhs_rg {
                    contributions.push((rhs_id, reduce_to_shape(&gb, &b_shape)));
                }
                contributions
            }))
        } else {
            None
        };
        self.graph.push(value, rg, backward)
    }
}

/// Precomputed flat gather indices; -1 denotes an implicit zero (padding).
#[derive(Clone)]
pub struct GatherPlan {
    pub indices: Arc<Vec<i64>>,
    pub out_shape: Vec<usize>,
    pub in_numel: usize,
}

impl GatherPlan {
    pub fn new(indices: Vec<i64>, out_shape: Vec<usize>, in_numel: usize) -> GatherPlan {
        assert_eq!(indices.len(), numel(&out_shape));
        for &i in &indices {
            assert!(i >= -1 && (i as i128) < in_numel as i128, "gather index {i} out of range");
        }
        GatherPlan {
            indices: Arc::new(indices),
            out_shape,
            in_numel,
        }
    }
}

/// Per-position cos/sin tables for pairwise rotations of the last axis.
#[derive(Clone)]
pub struct RotationTable {
    cos: Arc<Vec<f64>>,
    sin: Arc<Vec<f64>>,
    pub seq: usize,
    pub half: usize,
}

impl RotationTable {
    /// `angles[t][i]` rotates the pair `(2i, 2i+1)` of position `t`.
    pub fn from_angles(angles: &[Vec<f64>]) -> RotationTable {
        let seq = angles.len();
        let half = angles.first().map_or(0, Vec::len);
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for row in angles {
            assert_eq!(row.len(), half, "ragged angle table");
            for &a in row {
                cos.push(a.cos());
                sin.push(a.sin());
            }
        }
        RotationTable {
            cos: Arc::new(cos),
            sin: Arc::new(sin),
            seq,
            half,
        }
    }

    /// Value-level rotation, used by tests and the probe suite.
    pub fn rotate(&self, x: &Tensor) -> Tensor {
        self.apply(x, false)
    }

    fn apply(&self, x: &Tensor, inverse: bool) -> Tensor {
        let shape = x.shape();
        let rank = shape.len();
        assert!(rank >= 2, "rope input must have at least 2 axes");
        let width = shape[rank - 1];
        let seq = shape[rank - 2];
        assert_eq!(seq, self.seq, "rope table length {} vs seq {}", self.seq, seq);
        assert_eq!(width, 2 * self.half, "rope width {} vs table {}", width, 2 * self.half);
        let lead: usize = shape[..rank - 2].iter().product();

        let mut out = x.to_vec();
        let sign = if inverse { -1.0 } else { 1.0 };
        for l in 0..lead {
            for t in 0..seq {
                let row = (l * seq + t) * width;
                let tab = t * self.half;
                for i in 0..self.half {
                    let c = self.cos[tab + i];
                    let s = sign * self.sin[tab + i];
                    let x0 = out[row + 2 * i];
                    let x1 = out[row + 2 * i + 1];
                    out[row + 2 * i] = c * x0 - s * x1;
                    out[row + 2 * i + 1] = s * x0 + c * x1;
                }
            }
        }
        Tensor::from_vec(shape, out)
    }
}

// ---- kernels ----

/// c += a x b, all row-major, c pre-zeroed.
fn mm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[i,p] = sum_j a[i,j] * b[p,j]  (a: m x n, b: k x n, c: m x k)
fn mm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (p, cv) in crow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[p,j] = sum_i a[i,p] * b[i,j]  (a: m x k, b: m x n, c: k x n)
fn mm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let out = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&gv, &ov)| f(gv, ov))
        .collect();
    Tensor::from_vec(g.shape(), out)
}

/// Numpy-style right-aligned broadcast shape, None if incompatible.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let av = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let bv = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if av == bv || bv == 1 {
            av
        } else if av == 1 {
            bv
        } else {
            return None;
        };
    }
    Some(out)
}

/// Strides of `shape` viewed as `out_shape`, zero where broadcast.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out_shape.len() - shape.len();
    let mut out = vec![0; out_shape.len()];
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 { 0 } else { own[i] };
    }
    out
}

fn broadcast_apply(a: &Tensor, b: &Tensor, out_shape: &[usize], f: fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == out_shape && b.shape() == out_shape {
        return Tensor::from_vec(
            out_shape,
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        );
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let so = strides(out_shape);
    let n = numel(out_shape);
    let (ad, bd) = (a.data(), b.data());
    let mut out = Vec::with_capacity(n);
    for flat in 0..n {
        let mut rem = flat;
        let (mut ia, mut ib) = (0, 0);
        for (d, &st) in so.iter().enumerate() {
            let idx = rem / st;
            rem %= st;
            ia += idx * sa[d];
            ib += idx * sb[d];
        }
        out.push(f(ad[ia], bd[ib]));
    }
    Tensor::from_vec(out_shape, out)
}

fn broadcast_apply3(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    out_shape: &[usize],
    f: impl Fn(f64, f64, f64) -> f64,
) -> Tensor {
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let so = strides(out_shape);
    let n = numel(out_shape);
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut out = Vec::with_capacity(n);
    for flat in 0..n {
        let mut rem = flat;
        let (mut ia, mut ib) = (0, 0);
        for (d, &st) in so.iter().enumerate() {
            let idx = rem / st;
            rem %= st;
            ia += idx * sa[d];
            ib += idx * sb[d];
        }
        out.push(f(ad[ia], bd[ib], gd[flat]));
    }
    Tensor::from_vec(out_shape, out)
}

/// Sum a broadcast gradient back down to the original operand shape.
fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let gs = g.shape().to_vec();
    let offset = gs.len() - shape.len();
    let target_strides = strides(shape);
    let g_strides = strides(&gs);
    let mut out = vec![0.0; numel(shape)];
    for (flat, &v) in g.data().iter().enumerate() {
        let mut rem = flat;
        let mut tgt = 0;
        for (d, &st) in g_strides.iter().enumerate() {
            let idx = rem / st;
            rem %= st;
            if d >= offset && shape[d - offset] != 1 {
                tgt += idx * target_strides[d - offset];
            }
        }
        out[tgt] += v;
    }
    Tensor::from_vec(shape, out)
}

fn permute_tensor(x: &Tensor, perm: &[usize]) -> Tensor {
    let in_shape = x.shape();
    assert_eq!(perm.len(), in_shape.len());
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![0.0; x.numel()];
    let src = x.data();
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src_flat = 0;
        for (d, &st) in out_strides.iter().enumerate() {
            let idx = rem / st;
            rem %= st;
            src_flat += idx * in_strides[perm[d]];
        }
        *slot = src[src_flat];
    }
    Tensor::from_vec(&out_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!(
                (x - y).abs() <= tol,
                "index {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn add_and_mul_grads() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let y = g.leaf(Tensor::from_vec(&[2], vec![3.0, 4.0]));
        // f = sum(x * y + x)
        let f = x.mul(y).add(x).sum_all();
        assert_eq!(f.value().data()[0], 3.0 + 8.0 + 1.0 + 2.0);
        g.backward(f).unwrap();
        assert_close(g.grad(x).data(), &[4.0, 5.0], 1e-15);
        assert_close(g.grad(y).data(), &[1.0, 2.0], 1e-15);
    }

    #[test]
    fn broadcast_row_vector_grad_sums_over_rows() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let b = g.leaf(Tensor::from_vec(&[3], vec![10., 20., 30.]));
        let f = x.add(b).sum_all();
        g.backward(f).unwrap();
        assert_close(g.grad(b).data(), &[2.0, 2.0, 2.0], 1e-15);
        assert_close(g.grad(x).data(), &[1.0; 6], 1e-15);
    }

    #[test]
    fn matmul_matches_triple_loop_and_grad_checks() {
        let mut rng = seeded_rng(42, &[0]);
        let a = Tensor::randn(&[3, 4], &mut rng);
        let b = Tensor::randn(&[4, 5], &mut rng);
        let g = Graph::new();
        let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let c = va.matmul(vb);
        // independent triple-loop oracle
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for p in 0..4 {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((c.value().at(&[i, j]) - acc).abs() < 1e-12);
            }
        }
        let f = c.square().sum_all();
        g.backward(f).unwrap();
        // finite-difference check on one coordinate of each operand
        let h = 1e-6;
        for (t, var, idx) in [(a.clone(), va, 5usize), (b.clone(), vb, 7usize)] {
            let eval = |delta: f64| {
                let mut data = t.to_vec();
                data[idx] += delta;
                let g2 = Graph::new();
                let xa = if std::ptr::eq(t.data(), a.data()) {
                    g2.constant(Tensor::from_vec(&[3, 4], data.clone()))
                } else {
                    g2.constant(a.clone())
                };
                let xb = if std::ptr::eq(t.data(), a.data()) {
                    g2.constant(b.clone())
                } else {
                    g2.constant(Tensor::from_vec(&[4, 5], data.clone()))
                };
                xa.matmul(xb).square().sum_all().value().data()[0]
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let ad = g.grad(var).data()[idx];
            assert!((fd - ad).abs() / (ad.abs() + 1e-8) < 1e-6, "fd {fd} vs ad {ad}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad_is_centered() {
        let mut rng = seeded_rng(1, &[1]);
        let x = Tensor::randn(&[4, 7], &mut rng);
        let g = Graph::new();
        let v = g.leaf(x);
        let y = v.softmax_last();
        for row in y.value().data().chunks_exact(7) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // sum(softmax) is constant 4, so the gradient w.r.t. x must vanish
        let f = y.sum_all();
        g.backward(f).unwrap();
        for &gv in g.grad(v).data() {
            assert!(gv.abs() < 1e-12);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let mut rng = seeded_rng(3, &[0]);
        let x = Tensor::randn(&[2, 3, 4], &mut rng);
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let y = v.permute(&[2, 0, 1]);
        assert_eq!(y.shape(), vec![4, 2, 3]);
        let z = y.permute(&[1, 2, 0]);
        assert_eq!(z.value().data(), x.data());
        let f = z.mul(z).sum_all();
        g.backward(f).unwrap();
        let expect: Vec<f64> = x.data().iter().map(|v| 2.0 * v).collect();
        assert_close(g.grad(v).data(), &expect, 1e-14);
    }

    #[test]
    fn narrow_grad_zero_pads() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 4], vec![1., 2., 3., 4., 5., 6., 7., 8.]));
        let y = x.narrow(1, 1, 2);
        assert_eq!(y.value().data(), &[2., 3., 6., 7.]);
        g.backward(y.sum_all()).unwrap();
        assert_close(g.grad(x).data(), &[0., 1., 1., 0., 0., 1., 1., 0.], 1e-15);
    }

    #[test]
    fn gather_scatters_gradient_and_zero_index_reads_zero() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[3], vec![10., 20., 30.]));
        let plan = GatherPlan::new(vec![2, 2, -1, 0], vec![4], 3);
        let y = x.gather(&plan);
        assert_eq!(y.value().data(), &[30., 30., 0., 10.]);
        g.backward(y.sum_all()).unwrap();
        assert_close(g.grad(x).data(), &[1., 0., 2.], 1e-15);
    }

    #[test]
    fn rope_preserves_norm_and_backward_inverts() {
        let mut rng = seeded_rng(9, &[2]);
        let x = Tensor::randn(&[3, 5, 8], &mut rng);
        let angles: Vec<Vec<f64>> = (0..5)
            .map(|t| (0..4).map(|i| 0.3 * t as f64 + 0.1 * i as f64).collect())
            .collect();
        let table = RotationTable::from_angles(&angles);
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let y = v.rope(&table);
        let norm_in: f64 = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm_out: f64 = y.value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm_in - norm_out).abs() < 1e-12);
        // d(sum y.x0)/dx equals inverse rotation of that seed
        g.backward(y.sum_all()).unwrap();
        let grad = g.grad(v);
        let ones = Tensor::full(&[3, 5, 8], 1.0);
        let expect = table.apply(&ones, true);
        assert_close(grad.data(), expect.data(), 1e-12);
    }

    #[test]
    fn sum_axes_keepdim_and_grad() {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]));
        let s = x.sum_axes(&[0], true);
        assert_eq!(s.shape(), vec![1, 3]);
        assert_eq!(s.value().data(), &[5., 7., 9.]);
        let s2 = x.sum_axes(&[1], false);
        assert_eq!(s2.shape(), vec![2]);
        assert_eq!(s2.value().data(), &[6., 15.]);
        g.backward(s2.square().sum_all()).unwrap();
        assert_close(g.grad(x).data(), &[12., 12., 12., 30., 30., 30.], 1e-13);
    }

    #[test]
    fn backward_rejects_nan_loss() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(f64::NAN));
        let f = x.sum_all();
        assert!(g.backward(f).is_err());
    }

    fn apply_unary<'g>(g: &'g Graph, fwd: usize, x: f64) -> (Var<'g>, Var<'g>) {
        let v = g.leaf(Tensor::scalar(x));
        let y = match fwd {
            0 => v.silu(),
            1 => v.softplus(),
            2 => v.sigmoid(),
            3 => v.exp(),
            _ => v.sqrt(),
        };
        (v, y.sum_all())
    }

    #[test]
    fn silu_softplus_sigmoid_finite_difference() {
        for (name, fwd) in [
            ("silu", 0usize),
            ("softplus", 1),
            ("sigmoid", 2),
            ("exp", 3),
            ("sqrt", 4),
        ] {
            let xs = if name == "sqrt" {
                vec![0.5, 1.0, 2.3]
            } else {
                vec![-1.7, -0.2, 0.0, 1.3]
            };
            for &x0 in &xs {
                let eval = |x: f64| {
                    let g = Graph::new();
                    apply_unary(&g, fwd, x).1.value().data()[0]
                };
                let g = Graph::new();
                let (v, f) = apply_unary(&g, fwd, x0);
                g.backward(f).unwrap();
                let ad = g.grad(v).data()[0];
                let h = 1e-6;
                let fd = (eval(x0 + h) - eval(x0 - h)) / (2.0 * h);
                assert!(
                    (fd - ad).abs() < 1e-6,
                    "{name} at {x0}: fd {fd} vs ad {ad}"
                );
            }
        }
    }
}
