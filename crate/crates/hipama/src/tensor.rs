//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are row-major, immutable once created (except leaf parameters,
//! which the optimizer updates in place between graph builds). Every
//! operation records a backward closure when any input requires a gradient;
//! `backward` on a scalar loss accumulates gradients additively into every
//! reachable tensor with `requires_grad`. Callers zero gradients explicitly.
//!
//! Graph construction, backward, and in-place updates are single-threaded:
//! a live graph must not be shared across threads.

use std::cell::{Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

/// Per-parent gradient contributions; `None` for parents that do not
/// require a gradient.
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward_fn: Option<BackwardFn>,
}

/// A dense multi-dimensional f64 array participating in an autodiff graph.
///
/// Cloning is cheap (shared node). Shape violations panic with a message
/// naming the primitive and the offending shapes.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// A constant tensor (no gradient tracking).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Self::make_leaf(data, shape, false)
    }

    /// A leaf tensor that accumulates gradients (a trainable parameter).
    pub fn new_grad(data: Vec<f64>, shape: &[usize]) -> Tensor {
        Self::make_leaf(data, shape, true)
    }

    fn make_leaf(data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Tensor {
        assert_eq!(
            data.len(),
            numel_of(shape),
            "tensor: data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            node: Rc::new(Node {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents: Vec::new(),
                backward_fn: None,
            }),
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(vec![0.0; numel_of(shape)], shape)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new(vec![value; numel_of(shape)], shape)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![value], &[1])
    }

    /// Interior node; backward closure is only built when a parent needs it.
    fn make_op<F>(shape: Vec<usize>, data: Vec<f64>, parents: Vec<Tensor>, build: F) -> Tensor
    where
        F: FnOnce() -> BackwardFn,
    {
        debug_assert_eq!(data.len(), numel_of(&shape));
        let requires_grad = parents.iter().any(|p| p.node.requires_grad);
        let backward_fn = if requires_grad { Some(build()) } else { None };
        Tensor {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                parents,
                backward_fn,
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.numel(),
            1,
            "item: expected a scalar, got shape {:?}",
            self.shape()
        );
        self.node.data.borrow()[0]
    }

    /// Overwrite the stored values (optimizer updates on leaves).
    pub fn set_data(&self, values: &[f64]) {
        let mut data = self.node.data.borrow_mut();
        assert_eq!(
            values.len(),
            data.len(),
            "set_data: length {} does not match shape {:?}",
            values.len(),
            self.shape()
        );
        data.copy_from_slice(values);
    }

    /// Mutate the stored values in place.
    pub fn with_data_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.node.data.borrow_mut())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    /// Reset the accumulated gradient to zero (keeps the buffer if present).
    pub fn zero_grad(&self) {
        if let Some(g) = self.node.grad.borrow_mut().as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn ptr(&self) -> *const Node {
        Rc::as_ptr(&self.node)
    }

    // ── Elementwise binary ops (broadcasting over leading axes) ─────────

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.binary_op(rhs, "add", |a, b| a + b, |g, _, _| (g, g), false)
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.binary_op(rhs, "sub", |a, b| a - b, |g, _, _| (g, -g), false)
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.binary_op(rhs, "mul", |a, b| a * b, |g, a, b| (g * b, g * a), true)
    }

    /// Shared kernel: forward map plus per-element gradient factors.
    /// Gradients of broadcast operands are reduced in the same sweep.
    fn binary_op(
        &self,
        rhs: &Tensor,
        name: &'static str,
        fwd: impl Fn(f64, f64) -> f64,
        bwd: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
        needs_inputs: bool,
    ) -> Tensor {
        let a_shape = self.shape().to_vec();
        let b_shape = rhs.shape().to_vec();
        let out_shape = broadcast_shape(name, &a_shape, &b_shape);
        let out_numel = numel_of(&out_shape);
        let mut data = vec![0.0; out_numel];
        {
            let a = self.data();
            let b = rhs.data();
            for_each_broadcast_row(&out_shape, &a_shape, &b_shape, |o, ab, sa, bb, sb, len| {
                if sa == 1 && sb == 1 {
                    for j in 0..len {
                        data[o + j] = fwd(a[ab + j], b[bb + j]);
                    }
                } else if sa == 1 {
                    let bv = b[bb];
                    for j in 0..len {
                        data[o + j] = fwd(a[ab + j], bv);
                    }
                } else if sb == 1 {
                    let av = a[ab];
                    for j in 0..len {
                        data[o + j] = fwd(av, b[bb + j]);
                    }
                } else {
                    let v = fwd(a[ab], b[bb]);
                    data[o..o + len].iter_mut().for_each(|x| *x = v);
                }
            });
        }
        let parents = vec![self.clone(), rhs.clone()];
        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        let a_numel = self.numel();
        let b_numel = rhs.numel();
        let (a_cap, b_cap) = if needs_inputs {
            (self.to_vec(), rhs.to_vec())
        } else {
            (Vec::new(), Vec::new())
        };
        Tensor::make_op(out_shape.clone(), data, parents, move || {
            Box::new(move |g: &[f64]| {
                let mut ga = if need_a { vec![0.0; a_numel] } else { Vec::new() };
                let mut gb = if need_b { vec![0.0; b_numel] } else { Vec::new() };
                let with_inputs = !a_cap.is_empty();
                for_each_broadcast_row(&out_shape, &a_shape, &b_shape, |o, ab, sa, bb, sb, len| {
                    for j in 0..len {
                        let (ia, ib) = (ab + j * sa, bb + j * sb);
                        let (av, bv) = if with_inputs {
                            (a_cap[ia], b_cap[ib])
                        } else {
                            (0.0, 0.0)
                        };
                        let (da, db) = bwd(g[o + j], av, bv);
                        if need_a {
                            ga[ia] += da;
                        }
                        if need_b {
                            gb[ib] += db;
                        }
                    }
                });
                vec![need_a.then_some(ga), need_b.then_some(gb)]
            })
        })
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data().iter().map(|&v| v * c).collect();
        let shape = self.shape().to_vec();
        let need = self.requires_grad();
        Tensor::make_op(shape, data, vec![self.clone()], move || {
            Box::new(move |g: &[f64]| {
                vec![need.then(|| g.iter().map(|&v| v * c).collect())]
            })
        })
    }

    // ── Elementwise unary ops ────────────────────────────────────────────

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape().to_vec();
        let need = self.requires_grad();
        let input = self.to_vec();
        Tensor::make_op(shape, data, vec![self.clone()], move || {
            Box::new(move |g: &[f64]| {
                vec![need.then(|| {
                    g.iter()
                        .zip(&input)
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect()
                })]
            })
        })
    }

    pub fn tanh(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| v.tanh()).collect();
        let shape = self.shape().to_vec();
        let need = self.requires_grad();
        let out = data.clone();
        Tensor::make_op(shape, data, vec![self.clone()], move || {
            Box::new(move |g: &[f64]| {
                vec![need.then(|| {
                    g.iter()
                        .zip(&out)
                        .map(|(&gv, &y)| gv * (1.0 - y * y))
                        .collect()
                })]
            })
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f64> = self
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.shape().to_vec();
        let need = self.requires_grad();
        let out = data.clone();
        Tensor::make_op(shape, data, vec![self.clone()], move || {
            Box::new(move |g: &[f64]| {
                vec![need.then(|| {
                    g.iter()
                        .zip(&out)
                        .map(|(&gv, &y)| gv * y * (1.0 - y))
                        .collect()
                })]
            })
        })
    }

    pub fn exp(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| v.exp()).collect();
        let shape = self.shape().to_vec();
        let need = self.requires_grad();
        let out = data.clone();
        Tensor::make_op(shape, data, vec![self.clone()], move || {
            Box::new(move |g: &[f64]| {
                vec![need.then(|| g.iter().zip(&out).map(|(&gv, &y)| gv * y).collect())]
            })
        })
    }

    pub fn log(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&v| v.ln()).collect();
        let shape = self.shape().to_vec();
        let need = self.requires_grad();
        let input = self.to_vec();
        Tensor::make_op(shape, data, vec![self.clone()], move || {
            Box::new(move |g: &[f64]| {
                vec![need.then(|| g.iter().zip(&input).map(|(&gv, &x)| gv / x).collect())]
            })
        })
    }

    // ── Matrix multiplication ────────────────────────────────────────────

    /// Batched matrix product over the last two axes. Leading axes must be
    /// equal, or absent on one side (that side is broadcast).
    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        let a_shape = self.shape().to_vec();
        let b_shape = rhs.shape().to_vec();
        assert!(
            a_shape.len() >= 2 && b_shape.len() >= 2,
            "matmul: operands must be at least 2-d, got {:?} x {:?}",
            a_shape,
            b_shape
        );
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (k2, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        assert_eq!(
            k, k2,
            "matmul: inner dimensions disagree, {:?} x {:?}",
            a_shape, b_shape
        );
        let batch_a: Vec<usize> = a_shape[..a_shape.len() - 2].to_vec();
        let batch_b: Vec<usize> = b_shape[..b_shape.len() - 2].to_vec();
        let batch: Vec<usize> = if batch_a == batch_b || batch_b.is_empty() {
            batch_a.clone()
        } else if batch_a.is_empty() {
            batch_b.clone()
        } else {
            panic!(
                "matmul: leading batch dimensions disagree, {:?} x {:?}",
                a_shape, b_shape
            );
        };
        let nb = numel_of(&batch);
        let a_batched = !batch_a.is_empty();
        let b_batched = !batch_b.is_empty();

        let mut data = vec![0.0; nb * m * n];
        {
            let a = self.data();
            let b = rhs.data();
            for i in 0..nb {
                let a_off = if a_batched { i * m * k } else { 0 };
                let b_off = if b_batched { i * k * n } else { 0 };
                mm_acc(
                    &mut data[i * m * n..(i + 1) * m * n],
                    &a[a_off..a_off + m * k],
                    &b[b_off..b_off + k * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut out_shape = batch;
        out_shape.push(m);
        out_shape.push(n);

        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        let a_cap = if need_b { self.to_vec() } else { Vec::new() };
        let b_cap = if need_a { rhs.to_vec() } else { Vec::new() };
        let parents = vec![self.clone(), rhs.clone()];
        Tensor::make_op(out_shape, data, parents, move || {
            Box::new(move |g: &[f64]| {
                let ga = need_a.then(|| {
                    let mut ga = vec![0.0; if a_batched { nb } else { 1 } * m * k];
                    for i in 0..nb {
                        let g_off = i * m * n;
                        let b_off = if b_batched { i * k * n } else { 0 };
                        let a_off = if a_batched { i * m * k } else { 0 };
                        // dA += G · Bᵀ
                        mm_bt_acc(
                            &mut ga[a_off..a_off + m * k],
                            &g[g_off..g_off + m * n],
                            &b_cap[b_off..b_off + k * n],
                            m,
                            n,
                            k,
                        );
                    }
                    ga
                });
                let gb = need_b.then(|| {
                    let mut gb = vec![0.0; if b_batched { nb } else { 1 } * k * n];
                    for i in 0..nb {
                        let g_off = i * m * n;
                        let a_off = if a_batched { i * m * k } else { 0 };
                        let b_off = if b_batched { i * k * n } else { 0 };
                        // dB += Aᵀ · G
                        mm_at_acc(
                            &mut gb[b_off..b_off + k * n],
                            &a_cap[a_off..a_off + m * k],
                            &g[g_off..g_off + m * n],
                            m,
                            k,
                            n,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            })
        })
    }

    // ── Softmax ──────────────────────────────────────────────────────────

    /// Softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        self.softmax_impl(axis, None)
    }

    /// Softmax along `axis` with positions excluded where `mask` is zero.
    /// The mask must broadcast to this tensor's shape; excluded positions
    /// receive exactly zero weight. Panics if a full slice is masked out.
    pub fn softmax_masked(&self, axis: usize, mask: &Tensor) -> Tensor {
        self.softmax_impl(axis, Some(mask))
    }

    fn softmax_impl(&self, axis: usize, mask: Option<&Tensor>) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(
            axis < shape.len(),
            "softmax: axis {} out of range for shape {:?}",
            axis,
            shape
        );
        // Expand the mask (if any) to a dense keep/drop buffer.
        let keep: Option<Vec<bool>> = mask.map(|m| {
            let m_shape = m.shape().to_vec();
            let out = broadcast_shape("softmax mask", &shape, &m_shape);
            assert_eq!(
                out, shape,
                "softmax: mask shape {:?} does not broadcast to {:?}",
                m_shape, shape
            );
            let mut keep = vec![false; self.numel()];
            let md = m.data();
            for_each_broadcast(&shape, &shape, &m_shape, |o, _, ib| {
                keep[o] = md[ib] != 0.0;
            });
            keep
        });

        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.to_vec();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = f64::NEG_INFINITY;
                let mut any_kept = false;
                for a in 0..len {
                    let idx = at(a);
                    if keep.as_ref().map_or(true, |k| k[idx]) {
                        any_kept = true;
                        if x[idx] > max {
                            max = x[idx];
                        }
                    }
                }
                assert!(
                    any_kept,
                    "softmax: fully masked slice at axis {} (shape {:?})",
                    axis,
                    shape
                );
                // Non-finite logits (a diverged model) poison the output
                // with NaN instead of panicking here.
                if !max.is_finite() {
                    max = 0.0;
                }
                let mut sum = 0.0;
                for a in 0..len {
                    let idx = at(a);
                    let e = if keep.as_ref().map_or(true, |k| k[idx]) {
                        (x[idx] - max).exp()
                    } else {
                        0.0
                    };
                    data[idx] = e;
                    sum += e;
                }
                for a in 0..len {
                    data[at(a)] /= sum;
                }
            }
        }
        let out = data.clone();
        let need = self.requires_grad();
        let shape_cap = shape.clone();
        let mut parents = vec![self.clone()];
        if let Some(m) = mask {
            parents.push(m.clone()); // mask is constant; kept for graph bookkeeping
        }
        let n_parents = parents.len();
        Tensor::make_op(shape, data, parents, move || {
            Box::new(move |g: &[f64]| {
                let gx = need.then(|| {
                    let (outer, len, inner) = axis_split(&shape_cap, axis);
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let mut dot = 0.0;
                            for a in 0..len {
                                let idx = at(a);
                                dot += g[idx] * out[idx];
                            }
                            for a in 0..len {
                                let idx = at(a);
                                gx[idx] = out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                    gx
                });
                let mut grads = vec![gx];
                grads.resize_with(n_parents, || None);
                grads
            })
        })
    }

    // ── Reductions ───────────────────────────────────────────────────────

    /// Sum along `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Tensor {
        self.reduce_axis(axis, false)
    }

    /// Mean along `axis`, removing it from the shape.
    pub fn mean_axis(&self, axis: usize) -> Tensor {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(
            axis < shape.len(),
            "reduce: axis {} out of range for shape {:?}",
            axis,
            shape
        );
        let (outer, len, inner) = axis_split(&shape, axis);
        let denom = if mean { len as f64 } else { 1.0 };
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![0.0; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for a in 0..len {
                    for i in 0..inner {
                        data[o * inner + i] += x[(o * len + a) * inner + i];
                    }
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v /= denom);
        }
        let need = self.requires_grad();
        Tensor::make_op(out_shape, data, vec![self.clone()], move || {
            Box::new(move |g: &[f64]| {
                vec![need.then(|| {
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for a in 0..len {
                            for i in 0..inner {
                                gx[(o * len + a) * inner + i] = g[o * inner + i] / denom;
                            }
                        }
                    }
                    gx
                })]
            })
        })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        let need = self.requires_grad();
        Tensor::make_op(vec![1], vec![s], vec![self.clone()], move || {
            Box::new(move |g: &[f64]| vec![need.then(|| vec![g[0]; n])])
        })
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        let need = self.requires_grad();
        Tensor::make_op(vec![1], vec![s / n as f64], vec![self.clone()], move || {
            Box::new(move |g: &[f64]| vec![need.then(|| vec![g[0] / n as f64; n])])
        })
    }

    // ── Shape ops ────────────────────────────────────────────────────────

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat: no operands");
        let base = parts[0].shape().to_vec();
        assert!(
            axis < base.len(),
            "concat: axis {} out of range for shape {:?}",
            axis,
            base
        );
        let mut axis_total = 0;
        for p in parts {
            let s = p.shape();
            assert!(
                s.len() == base.len()
                    && s.iter()
                        .zip(&base)
                        .enumerate()
                        .all(|(d, (a, b))| d == axis || a == b),
                "concat: incompatible shapes {:?} and {:?} on axis {}",
                base,
                s,
                axis
            );
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0; numel_of(&out_shape)];
        let part_lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        {
            let mut offset = 0;
            for (p, &plen) in parts.iter().zip(&part_lens) {
                let src = p.data();
                for o in 0..outer {
                    let dst_start = (o * axis_total + offset) * inner;
                    let src_start = o * plen * inner;
                    data[dst_start..dst_start + plen * inner]
                        .copy_from_slice(&src[src_start..src_start + plen * inner]);
                }
                offset += plen;
            }
        }
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Tensor::make_op(out_shape, data, parents, move || {
            Box::new(move |g: &[f64]| {
                let mut out = Vec::with_capacity(part_lens.len());
                let mut offset = 0;
                for (&plen, &need) in part_lens.iter().zip(&needs) {
                    out.push(need.then(|| {
                        let mut gp = vec![0.0; outer * plen * inner];
                        for o in 0..outer {
                            let src_start = (o * axis_total + offset) * inner;
                            let dst_start = o * plen * inner;
                            gp[dst_start..dst_start + plen * inner]
                                .copy_from_slice(&g[src_start..src_start + plen * inner]);
                        }
                        gp
                    }));
                    offset += plen;
                }
                out
            })
        })
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(
            axis < shape.len() && start + len <= shape[axis],
            "slice: range {}..{} out of bounds on axis {} of shape {:?}",
            start,
            start + len,
            axis,
            shape
        );
        let (outer, full, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        {
            let x = self.data();
            for o in 0..outer {
                let src = (o * full + start) * inner;
                data[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&x[src..src + len * inner]);
            }
        }
        let need = self.requires_grad();
        Tensor::make_op(out_shape, data, vec![self.clone()], move || {
            Box::new(move |g: &[f64]| {
                vec![need.then(|| {
                    let mut gx = vec![0.0; outer * full * inner];
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        gx[dst..dst + len * inner]
                            .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                    }
                    gx
                })]
            })
        })
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Tensor {
        let shape = self.shape().to_vec();
        assert!(
            shape.len() >= 2,
            "transpose: needs at least 2 axes, got {:?}",
            shape
        );
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = numel_of(&shape[..shape.len() - 2]);
        let mut out_shape = shape.clone();
        let nd = out_shape.len();
        out_shape.swap(nd - 2, nd - 1);
        let mut data = vec![0.0; self.numel()];
        {
            let x = self.data();
            for bi in 0..batch {
                let off = bi * r * c;
                for i in 0..r {
                    for j in 0..c {
                        data[off + j * r + i] = x[off + i * c + j];
                    }
                }
            }
        }
        let need = self.requires_grad();
        Tensor::make_op(out_shape, data, vec![self.clone()], move || {
            Box::new(move |g: &[f64]| {
                vec![need.then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for bi in 0..batch {
                        let off = bi * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[off + i * c + j] = g[off + j * r + i];
                            }
                        }
                    }
                    gx
                })]
            })
        })
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&self, new_shape: &[usize]) -> Tensor {
        assert_eq!(
            self.numel(),
            numel_of(new_shape),
            "reshape: cannot view shape {:?} as {:?}",
            self.shape(),
            new_shape
        );
        let data = self.to_vec();
        let need = self.requires_grad();
        Tensor::make_op(new_shape.to_vec(), data, vec![self.clone()], move || {
            Box::new(move |g: &[f64]| vec![need.then(|| g.to_vec())])
        })
    }

    /// Row lookup: `table` is `[rows, d]`, `ids` selects one row per output
    /// position; result is `leading ++ [d]`. Gradients scatter-add into the
    /// selected rows.
    pub fn embedding(table: &Tensor, ids: &[usize], leading: &[usize]) -> Tensor {
        let t_shape = table.shape();
        assert_eq!(
            t_shape.len(),
            2,
            "embedding: table must be 2-d, got {:?}",
            t_shape
        );
        let (rows, d) = (t_shape[0], t_shape[1]);
        assert_eq!(
            ids.len(),
            numel_of(leading),
            "embedding: {} ids do not fill leading shape {:?}",
            ids.len(),
            leading
        );
        let mut out_shape = leading.to_vec();
        out_shape.push(d);
        let mut data = vec![0.0; ids.len() * d];
        {
            let t = table.data();
            for (i, &id) in ids.iter().enumerate() {
                assert!(
                    id < rows,
                    "embedding: id {} out of range for {} rows",
                    id,
                    rows
                );
                data[i * d..(i + 1) * d].copy_from_slice(&t[id * d..(id + 1) * d]);
            }
        }
        let need = table.requires_grad();
        let ids_cap: Vec<usize> = ids.to_vec();
        Tensor::make_op(out_shape, data, vec![table.clone()], move || {
            Box::new(move |g: &[f64]| {
                vec![need.then(|| {
                    let mut gt = vec![0.0; rows * d];
                    for (i, &id) in ids_cap.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[i * d + j];
                        }
                    }
                    gt
                })]
            })
        })
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients are *added* into
    /// every reachable tensor with `requires_grad`; call `zero_grad` between
    /// passes that should not accumulate.
    pub fn backward(&self) {
        assert_eq!(
            self.numel(),
            1,
            "backward: loss must be a scalar, got shape {:?}",
            self.shape()
        );
        if !self.node.requires_grad {
            return;
        }
        // Topological order over the grad-requiring subgraph.
        enum Visit {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut topo: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<*const Node> = HashSet::new();
        let mut stack = vec![Visit::Enter(self.clone())];
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(t) => {
                    if !visited.insert(t.ptr()) {
                        continue;
                    }
                    stack.push(Visit::Exit(t.clone()));
                    for p in &t.node.parents {
                        if p.node.requires_grad && !visited.contains(&p.ptr()) {
                            stack.push(Visit::Enter(p.clone()));
                        }
                    }
                }
                Visit::Exit(t) => topo.push(t),
            }
        }

        // Transient flow gradients for this sweep only.
        let mut flow: HashMap<*const Node, Vec<f64>> = HashMap::new();
        flow.insert(self.ptr(), vec![1.0]);
        for t in topo.iter().rev() {
            let Some(g) = flow.remove(&t.ptr()) else {
                continue;
            };
            {
                let mut slot = t.node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g.clone()),
                }
            }
            if let Some(f) = &t.node.backward_fn {
                let parent_grads = f(&g);
                for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                    if let Some(pg) = pg {
                        debug_assert_eq!(pg.len(), p.numel());
                        match flow.entry(p.ptr()) {
                            std::collections::hash_map::Entry::Occupied(mut e) => {
                                e.get_mut().iter_mut().zip(&pg).for_each(|(a, b)| *a += b);
                            }
                            std::collections::hash_map::Entry::Vacant(e) => {
                                e.insert(pg);
                            }
                        }
                    }
                }
            }
        }
    }
}

// ── Shape helpers ────────────────────────────────────────────────────────

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel_of(&shape[..axis]);
    let inner = numel_of(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Right-aligned broadcast shape; panics (naming `op`) on mismatch.
pub(crate) fn broadcast_shape(op: &str, a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
        let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            panic!("{}: shapes {:?} and {:?} do not broadcast", op, a, b);
        }
    }
    out
}

/// Zero-on-broadcast-axis strides for a shape right-aligned into `nd` dims.
fn broadcast_strides(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut padded = vec![1usize; nd];
    padded[nd - shape.len()..].copy_from_slice(shape);
    let mut st = vec![0usize; nd];
    let mut acc = 1;
    for d in (0..nd).rev() {
        st[d] = if padded[d] == 1 { 0 } else { acc };
        acc *= padded[d];
    }
    st
}

/// Walk the broadcast output one trailing-axis row at a time. `f` receives
/// (out offset, a offset, a stride, b offset, b stride, row length); the
/// per-element strides are 0 on a broadcast last axis and 1 otherwise.
fn for_each_broadcast_row(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize, usize, usize, usize),
) {
    let nd = out_shape.len();
    let asr = broadcast_strides(a_shape, nd);
    let bsr = broadcast_strides(b_shape, nd);
    let last = out_shape[nd - 1];
    let rows: usize = out_shape[..nd - 1].iter().product();
    let mut coords = vec![0usize; nd.saturating_sub(1)];
    let (mut a_base, mut b_base) = (0usize, 0usize);
    for r in 0..rows {
        f(r * last, a_base, asr[nd - 1], b_base, bsr[nd - 1], last);
        for d in (0..nd - 1).rev() {
            coords[d] += 1;
            a_base += asr[d];
            b_base += bsr[d];
            if coords[d] < out_shape[d] {
                break;
            }
            a_base -= asr[d] * out_shape[d];
            b_base -= bsr[d] * out_shape[d];
            coords[d] = 0;
        }
    }
}

/// Walk the broadcast output in row-major order, yielding the flat output
/// index and the flat index into each operand.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    for_each_broadcast_row(out_shape, a_shape, b_shape, |o, ab, sa, bb, sb, len| {
        for j in 0..len {
            f(o + j, ab + j * sa, bb + j * sb);
        }
    });
}

// ── Matmul kernels (row-major, accumulate into the output) ───────────────

/// C[m,n] += A[m,k] · B[k,n]
fn mm_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    c_row[j] += av * b_row[j];
                }
            }
        }
    }
}

/// C[m,k] += G[m,n] · B[k,n]ᵀ
fn mm_bt_acc(c: &mut [f64], g: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += g_row[j] * b_row[j];
            }
            c_row[p] += s;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · G[m,n]
fn mm_at_acc(c: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let c_row = &mut c[p * n..(p + 1) * n];
                for j in 0..n {
                    c_row[j] += av * g_row[j];
                }
            }
        }
    }
}
