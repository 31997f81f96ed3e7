//! Reverse-mode tape over [`Tensor`], rebuilt each training step.
//!
//! Every primitive validates shapes, checks its output for NaN/Inf, and (when
//! recording) pushes a backward closure onto the tape. [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients additively.

use crate::error::DpmError;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type Grads<T> = Vec<Option<Vec<T>>>;
type BackFn<T> = Box<dyn Fn(&[Tensor<T>], &[T], &mut Grads<T>)>;

struct Entry<T> {
    needs_grad: bool,
    back: Option<BackFn<T>>,
}

pub struct Graph<T> {
    values: Vec<Tensor<T>>,
    entries: Vec<Entry<T>>,
    grads: Grads<T>,
    recording: bool,
}

fn acc<'a, T: Scalar>(grads: &'a mut Grads<T>, id: usize, n: usize) -> &'a mut [T] {
    grads[id].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice()
}

// Raw matmul kernels, accumulate into `out`.
fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for p in 0..k {
                s = s + arow[p] * brow[p];
            }
            out[i * n + j] = out[i * n + j] + s;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
fn mm_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = arow[p];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + aip * brow[j];
            }
        }
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { values: Vec::new(), entries: Vec::new(), grads: Vec::new(), recording: true }
    }

    /// Forward-only mode; no backward closures are recorded. Used by the
    /// finite-difference oracle and by evaluation.
    pub fn no_grad() -> Self {
        Graph { values: Vec::new(), entries: Vec::new(), grads: Vec::new(), recording: false }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    /// Gradient of the last backward()'s loss w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.value(v).shape().to_vec(), g.clone()).unwrap())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leaf that participates in differentiation.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.values.push(t);
        self.entries.push(Entry { needs_grad: true, back: None });
        Var(self.values.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.values.push(t);
        self.entries.push(Entry { needs_grad: false, back: None });
        Var(self.values.len() - 1)
    }

    fn push(
        &mut self,
        op: &'static str,
        out: Tensor<T>,
        needs_grad: bool,
        back: Option<BackFn<T>>,
    ) -> Result<Var, DpmError> {
        if !out.is_finite() {
            return Err(DpmError::non_finite(op));
        }
        let record = needs_grad && self.recording;
        self.values.push(out);
        self.entries.push(Entry { needs_grad: record, back: if record { back } else { None } });
        Ok(Var(self.values.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.entries[v.0].needs_grad)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across uses; leaf gradients are retrievable afterwards via [`grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), DpmError> {
        if self.value(loss).numel() != 1 {
            return Err(DpmError::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Grads<T> = Vec::new();
        grads.resize_with(self.values.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(back) = self.entries[id].back.as_ref() {
                let gout = grads[id].take().unwrap();
                back(&self.values, &gout, &mut grads);
            }
        }
        self.grads = grads;
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(usize, usize, usize), DpmError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DpmError::shape(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok((a.0, b.0, self.value(a).numel()))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DpmError> {
        let (ia, ib, n) = self.binary_same_shape("add", a, b)?;
        let data = self.values[ia]
            .data()
            .iter()
            .zip(self.values[ib].data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(self.values[ia].shape().to_vec(), data)?;
        self.push(
            "add",
            out,
            self.needs(&[a, b]),
            Some(Box::new(move |_vals, g, grads| {
                for (dst, &gi) in acc(grads, ia, n).iter_mut().zip(g) {
                    *dst = *dst + gi;
                }
                for (dst, &gi) in acc(grads, ib, n).iter_mut().zip(g) {
                    *dst = *dst + gi;
                }
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DpmError> {
        let (ia, ib, n) = self.binary_same_shape("sub", a, b)?;
        let data = self.values[ia]
            .data()
            .iter()
            .zip(self.values[ib].data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::new(self.values[ia].shape().to_vec(), data)?;
        self.push(
            "sub",
            out,
            self.needs(&[a, b]),
            Some(Box::new(move |_vals, g, grads| {
                for (dst, &gi) in acc(grads, ia, n).iter_mut().zip(g) {
                    *dst = *dst + gi;
                }
                for (dst, &gi) in acc(grads, ib, n).iter_mut().zip(g) {
                    *dst = *dst - gi;
                }
            })),
        )
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DpmError> {
        let (ia, ib, n) = self.binary_same_shape("mul", a, b)?;
        let data = self.values[ia]
            .data()
            .iter()
            .zip(self.values[ib].data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.values[ia].shape().to_vec(), data)?;
        self.push(
            "mul",
            out,
            self.needs(&[a, b]),
            Some(Box::new(move |vals, g, grads| {
                for i in 0..n {
                    let (xa, xb) = (vals[ia].data()[i], vals[ib].data()[i]);
                    acc(grads, ia, n)[i] = acc(grads, ia, n)[i] + g[i] * xb;
                    acc(grads, ib, n)[i] = acc(grads, ib, n)[i] + g[i] * xa;
                }
            })),
        )
    }

    pub fn scale(&mut self, a: Var, k: T) -> Result<Var, DpmError> {
        let ia = a.0;
        let n = self.value(a).numel();
        let out = self.value(a).map(|v| v * k);
        self.push(
            "scale",
            out,
            self.needs(&[a]),
            Some(Box::new(move |_vals, g, grads| {
                for (dst, &gi) in acc(grads, ia, n).iter_mut().zip(g) {
                    *dst = *dst + gi * k;
                }
            })),
        )
    }

    pub fn add_const(&mut self, a: Var, k: T) -> Result<Var, DpmError> {
        let ia = a.0;
        let n = self.value(a).numel();
        let out = self.value(a).map(|v| v + k);
        self.push(
            "add_const",
            out,
            self.needs(&[a]),
            Some(Box::new(move |_vals, g, grads| {
                for (dst, &gi) in acc(grads, ia, n).iter_mut().zip(g) {
                    *dst = *dst + gi;
                }
            })),
        )
    }

    /// Broadcast-add a length-c vector to every row of a [.., c] tensor.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var, DpmError> {
        let c = *self.value(m).shape().last().unwrap_or(&0);
        if self.value(v).shape() != [c] {
            return Err(DpmError::shape(
                "add_row",
                format!("{:?} vs {:?}", self.value(m).shape(), self.value(v).shape()),
            ));
        }
        let (im, iv) = (m.0, v.0);
        let n = self.value(m).numel();
        let data = self.values[im]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.values[iv].data()[i % c])
            .collect();
        let out = Tensor::new(self.values[im].shape().to_vec(), data)?;
        self.push(
            "add_row",
            out,
            self.needs(&[m, v]),
            Some(Box::new(move |_vals, g, grads| {
                for (dst, &gi) in acc(grads, im, n).iter_mut().zip(g) {
                    *dst = *dst + gi;
                }
                let gv = acc(grads, iv, c);
                for (i, &gi) in g.iter().enumerate() {
                    gv[i % c] = gv[i % c] + gi;
                }
            })),
        )
    }

    /// Broadcast-multiply every row of a [.., c] tensor by a length-c vector.
    pub fn mul_row(&mut self, m: Var, v: Var) -> Result<Var, DpmError> {
        let c = *self.value(m).shape().last().unwrap_or(&0);
        if self.value(v).shape() != [c] {
            return Err(DpmError::shape(
                "mul_row",
                format!("{:?} vs {:?}", self.value(m).shape(), self.value(v).shape()),
            ));
        }
        let (im, iv) = (m.0, v.0);
        let n = self.value(m).numel();
        let data = self.values[im]
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * self.values[iv].data()[i % c])
            .collect();
        let out = Tensor::new(self.values[im].shape().to_vec(), data)?;
        self.push(
            "mul_row",
            out,
            self.needs(&[m, v]),
            Some(Box::new(move |vals, g, grads| {
                for i in 0..n {
                    let gm = acc(grads, im, n);
                    gm[i] = gm[i] + g[i] * vals[iv].data()[i % c];
                }
                let gv = acc(grads, iv, c);
                for (i, &gi) in g.iter().enumerate() {
                    gv[i % c] = gv[i % c] + gi * vals[im].data()[i];
                }
            })),
        )
    }

    /// Scalar variable times a constant tensor.
    pub fn scalar_times(&mut self, s: Var, t: &Tensor<T>) -> Result<Var, DpmError> {
        if self.value(s).numel() != 1 {
            return Err(DpmError::shape(
                "scalar_times",
                format!("expected scalar, got {:?}", self.value(s).shape()),
            ));
        }
        let is = s.0;
        let sv = self.value(s).item();
        let out = t.map(|v| v * sv);
        let tc = t.clone();
        self.push(
            "scalar_times",
            out,
            self.needs(&[s]),
            Some(Box::new(move |_vals, g, grads| {
                let mut dot = T::zero();
                for (gi, ti) in g.iter().zip(tc.data()) {
                    dot = dot + *gi * *ti;
                }
                acc(grads, is, 1)[0] = acc(grads, is, 1)[0] + dot;
            })),
        )
    }

    fn unary(
        &mut self,
        op: &'static str,
        a: Var,
        fwd: impl Fn(T) -> T,
        // (x, y) -> dy/dx
        dfdx: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var, DpmError> {
        let ia = a.0;
        let n = self.value(a).numel();
        let out = self.value(a).map(&fwd);
        let out_id = self.values.len();
        self.push(
            op,
            out,
            self.needs(&[a]),
            Some(Box::new(move |vals, g, grads| {
                let ga = acc(grads, ia, n);
                for i in 0..n {
                    let x = vals[ia].data()[i];
                    let y = vals[out_id].data()[i];
                    ga[i] = ga[i] + g[i] * dfdx(x, y);
                }
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DpmError> {
        self.unary(
            "sigmoid",
            a,
            |x| T::one() / (T::one() + (-x).exp()),
            |_x, y| y * (T::one() - y),
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, DpmError> {
        let c = T::from_f64c(0.7978845608028654); // sqrt(2/pi)
        let k = T::from_f64c(0.044715);
        let half = T::from_f64c(0.5);
        let three = T::from_f64c(3.0);
        self.unary(
            "gelu",
            a,
            move |x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()),
            move |x, _y| {
                let u = c * (x + k * x * x * x);
                let t = u.tanh();
                let du = c * (T::one() + three * k * x * x);
                half * (T::one() + t) + half * x * (T::one() - t * t) * du
            },
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DpmError> {
        self.unary(
            "relu",
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _y| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, DpmError> {
        let half = T::from_f64c(0.5);
        self.unary("sqrt", a, |x| x.sqrt(), move |_x, y| half / y)
    }

    pub fn cos(&mut self, a: Var) -> Result<Var, DpmError> {
        self.unary("cos", a, |x| x.cos(), |x, _y| -x.sin())
    }

    /// Arccosine with inputs clamped to [-1+1e-7, 1-1e-7]; the derivative is
    /// evaluated at the clamped value so it stays finite at the boundary.
    pub fn acos_clamped(&mut self, a: Var) -> Result<Var, DpmError> {
        let lim = T::one() - T::from_f64c(1e-7);
        let clamp = move |x: T| {
            if x > lim {
                lim
            } else if x < -lim {
                -lim
            } else {
                x
            }
        };
        self.unary(
            "acos",
            a,
            move |x| clamp(x).acos(),
            move |x, _y| {
                let xc = clamp(x);
                -T::one() / (T::one() - xc * xc).sqrt()
            },
        )
    }

    // ── Shape manipulation ──────────────────────────────────────────

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, DpmError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).numel() {
            return Err(DpmError::shape(
                "reshape",
                format!("{:?} -> {:?}", self.value(a).shape(), shape),
            ));
        }
        let ia = a.0;
        let out = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        self.push(
            "reshape",
            out,
            self.needs(&[a]),
            Some(Box::new(move |_vals, g, grads| {
                for (dst, &gi) in acc(grads, ia, g.len()).iter_mut().zip(g) {
                    *dst = *dst + gi;
                }
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DpmError> {
        let shape = self.value(a).shape();
        if shape.len() != 2 {
            return Err(DpmError::shape("transpose", format!("expected rank 2, got {:?}", shape)));
        }
        let (r, c) = (shape[0], shape[1]);
        let ia = a.0;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data)?;
        self.push(
            "transpose",
            out,
            self.needs(&[a]),
            Some(Box::new(move |_vals, g, grads| {
                let ga = acc(grads, ia, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                    }
                }
            })),
        )
    }

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var, DpmError> {
        if parts.is_empty() {
            return Err(DpmError::shape("concat", "no inputs".to_string()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(DpmError::shape("concat", format!("axis {axis} out of range for {:?}", first)));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(DpmError::shape("concat", format!("{:?} vs {:?} on axis {axis}", s, first)));
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::zero(); outer * axis_total * inner];
        // (part id, its axis extent, offset along the axis)
        let mut layout = Vec::with_capacity(parts.len());
        let mut off = 0usize;
        for &p in parts {
            let ext = self.value(p).shape()[axis];
            layout.push((p.0, ext, off));
            let src = self.value(p).data();
            for o in 0..outer {
                let dst_start = (o * axis_total + off) * inner;
                let src_start = o * ext * inner;
                data[dst_start..dst_start + ext * inner]
                    .copy_from_slice(&src[src_start..src_start + ext * inner]);
            }
            off += ext;
        }
        let out = Tensor::new(out_shape, data)?;
        let needs = self.needs(parts);
        self.push(
            "concat",
            out,
            needs,
            Some(Box::new(move |_vals, g, grads| {
                for &(pid, ext, off) in &layout {
                    let gp = acc(grads, pid, outer * ext * inner);
                    for o in 0..outer {
                        let src_start = (o * axis_total + off) * inner;
                        let dst_start = o * ext * inner;
                        for i in 0..ext * inner {
                            gp[dst_start + i] = gp[dst_start + i] + g[src_start + i];
                        }
                    }
                }
            })),
        )
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, DpmError> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(DpmError::shape(
                "slice",
                format!("axis {axis} range {start}..{} of {:?}", start + len, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src_start = (o * ext + start) * inner;
            let dst_start = o * len * inner;
            data[dst_start..dst_start + len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let ia = a.0;
        let total = outer * ext * inner;
        let out = Tensor::new(out_shape, data)?;
        self.push(
            "slice",
            out,
            self.needs(&[a]),
            Some(Box::new(move |_vals, g, grads| {
                let ga = acc(grads, ia, total);
                for o in 0..outer {
                    let dst_start = (o * ext + start) * inner;
                    let src_start = o * len * inner;
                    for i in 0..len * inner {
                        ga[dst_start + i] = ga[dst_start + i] + g[src_start + i];
                    }
                }
            })),
        )
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DpmError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DpmError::shape("matmul", format!("{:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ia, ib) = (a.0, b.0);
        let mut data = vec![T::zero(); m * n];
        mm(self.value(a).data(), self.value(b).data(), m, k, n, &mut data);
        let out = Tensor::new(vec![m, n], data)?;
        self.push(
            "matmul",
            out,
            self.needs(&[a, b]),
            Some(Box::new(move |vals, g, grads| {
                // dA = dC * B^T; dB = A^T * dC
                mm_nt(g, vals[ib].data(), m, n, k, acc(grads, ia, m * k));
                mm_tn(vals[ia].data(), g, m, k, n, acc(grads, ib, k * n));
            })),
        )
    }

    /// a[m,k] times b[n,k] transposed -> [m,n].
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, DpmError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(DpmError::shape("matmul_nt", format!("{:?} x {:?}^T", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let (ia, ib) = (a.0, b.0);
        let mut data = vec![T::zero(); m * n];
        mm_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut data);
        let out = Tensor::new(vec![m, n], data)?;
        self.push(
            "matmul_nt",
            out,
            self.needs(&[a, b]),
            Some(Box::new(move |vals, g, grads| {
                // dA = dC * B; dB = dC^T * A
                mm(g, vals[ib].data(), m, n, k, acc(grads, ia, m * k));
                mm_tn(g, vals[ia].data(), m, n, k, acc(grads, ib, n * k));
            })),
        )
    }

    // ── Normalizations and reductions ───────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, DpmError> {
        let shape = self.value(a).shape().to_vec();
        let c = *shape.last().ok_or_else(|| DpmError::shape("softmax", "rank 0".to_string()))?;
        let rows = self.value(a).numel() / c;
        let ia = a.0;
        let mut data = self.value(a).data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z = z + *v;
            }
            for v in row.iter_mut() {
                *v = *v / z;
            }
        }
        let out = Tensor::new(shape, data)?;
        let out_id = self.values.len();
        self.push(
            "softmax",
            out,
            self.needs(&[a]),
            Some(Box::new(move |vals, g, grads| {
                let y = vals[out_id].data();
                let ga = acc(grads, ia, rows * c);
                for r in 0..rows {
                    let yr = &y[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut dot = T::zero();
                    for i in 0..c {
                        dot = dot + yr[i] * gr[i];
                    }
                    for i in 0..c {
                        ga[r * c + i] = ga[r * c + i] + yr[i] * (gr[i] - dot);
                    }
                }
            })),
        )
    }

    /// log(sum(exp(row))) per row of a [r, c] matrix -> [r].
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var, DpmError> {
        let shape = self.value(a).shape();
        if shape.len() != 2 {
            return Err(DpmError::shape("logsumexp", format!("expected rank 2, got {:?}", shape)));
        }
        let (rows, c) = (shape[0], shape[1]);
        let ia = a.0;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            data[r] = mx + z.ln();
        }
        let out = Tensor::new(vec![rows], data)?;
        self.push(
            "logsumexp",
            out,
            self.needs(&[a]),
            Some(Box::new(move |vals, g, grads| {
                let x = vals[ia].data();
                let ga = acc(grads, ia, rows * c);
                for r in 0..rows {
                    let row = &x[r * c..(r + 1) * c];
                    let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                    for i in 0..c {
                        ga[r * c + i] = ga[r * c + i] + g[r] * (row[i] - mx).exp() / z;
                    }
                }
            })),
        )
    }

    /// Picks a[i, cols[i]] per row -> [r].
    pub fn row_gather(&mut self, a: Var, cols: &[usize]) -> Result<Var, DpmError> {
        let shape = self.value(a).shape();
        if shape.len() != 2 || shape[0] != cols.len() {
            return Err(DpmError::shape(
                "row_gather",
                format!("{:?} with {} indices", shape, cols.len()),
            ));
        }
        let (rows, c) = (shape[0], shape[1]);
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(DpmError::shape("row_gather", format!("index {bad} out of {c}")));
        }
        let ia = a.0;
        let src = self.value(a).data();
        let data = cols.iter().enumerate().map(|(r, &j)| src[r * c + j]).collect();
        let out = Tensor::new(vec![rows], data)?;
        let cols = cols.to_vec();
        self.push(
            "row_gather",
            out,
            self.needs(&[a]),
            Some(Box::new(move |_vals, g, grads| {
                let ga = acc(grads, ia, rows * c);
                for (r, &j) in cols.iter().enumerate() {
                    ga[r * c + j] = ga[r * c + j] + g[r];
                }
            })),
        )
    }

    /// LayerNorm over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, DpmError> {
        let shape = self.value(x).shape().to_vec();
        let c = *shape.last().ok_or_else(|| DpmError::shape("layer_norm", "rank 0".to_string()))?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(DpmError::shape(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    shape,
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let rows = self.value(x).numel() / c;
        let eps = T::from_f64c(1e-6);
        let (ix, ig, ib) = (x.0, gamma.0, beta.0);
        let src = self.value(x).data();
        let gam = self.value(gamma).data();
        let bet = self.value(beta).data();
        let cn = T::from_f64c(c as f64);
        let mut data = vec![T::zero(); rows * c];
        let mut xhat = vec![T::zero(); rows * c];
        let mut istd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean: T = row.iter().cloned().sum::<T>() / cn;
            let var: T = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let inv = T::one() / (var + eps).sqrt();
            istd[r] = inv;
            for i in 0..c {
                let h = (row[i] - mean) * inv;
                xhat[r * c + i] = h;
                data[r * c + i] = h * gam[i] + bet[i];
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(
            "layer_norm",
            out,
            self.needs(&[x, gamma, beta]),
            Some(Box::new(move |vals, g, grads| {
                let gam = vals[ig].data();
                {
                    let gx = acc(grads, ix, rows * c);
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let hr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = T::zero(); // mean of dxhat
                        let mut m2 = T::zero(); // mean of dxhat .* xhat
                        for i in 0..c {
                            let dh = gr[i] * gam[i];
                            m1 = m1 + dh;
                            m2 = m2 + dh * hr[i];
                        }
                        m1 = m1 / cn;
                        m2 = m2 / cn;
                        for i in 0..c {
                            let dh = gr[i] * gam[i];
                            gx[r * c + i] = gx[r * c + i] + istd[r] * (dh - m1 - hr[i] * m2);
                        }
                    }
                }
                {
                    let gg = acc(grads, ig, c);
                    for r in 0..rows {
                        for i in 0..c {
                            gg[i] = gg[i] + g[r * c + i] * xhat[r * c + i];
                        }
                    }
                }
                let gb = acc(grads, ib, c);
                for r in 0..rows {
                    for i in 0..c {
                        gb[i] = gb[i] + g[r * c + i];
                    }
                }
            })),
        )
    }

    /// L2-normalize over the last axis. A small epsilon inside the square
    /// root keeps the zero vector from dividing by zero; the backward rule
    /// differentiates the exact forward expression.
    pub fn l2norm_rows(&mut self, a: Var) -> Result<Var, DpmError> {
        let shape = self.value(a).shape().to_vec();
        let c = *shape.last().ok_or_else(|| DpmError::shape("l2norm", "rank 0".to_string()))?;
        let rows = self.value(a).numel() / c;
        let eps = T::from_f64c(1e-24);
        let ia = a.0;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); rows * c];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let s: T = row.iter().map(|&v| v * v).sum::<T>() + eps;
            let inv = T::one() / s.sqrt();
            for i in 0..c {
                data[r * c + i] = row[i] * inv;
            }
        }
        let out = Tensor::new(shape, data)?;
        self.push(
            "l2norm",
            out,
            self.needs(&[a]),
            Some(Box::new(move |vals, g, grads| {
                let x = vals[ia].data();
                let ga = acc(grads, ia, rows * c);
                for r in 0..rows {
                    let row = &x[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let s: T = row.iter().map(|&v| v * v).sum::<T>() + eps;
                    let inv = T::one() / s.sqrt();
                    let inv3 = inv * inv * inv;
                    let mut dot = T::zero();
                    for i in 0..c {
                        dot = dot + gr[i] * row[i];
                    }
                    for i in 0..c {
                        ga[r * c + i] = ga[r * c + i] + gr[i] * inv - row[i] * dot * inv3;
                    }
                }
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, DpmError> {
        let ia = a.0;
        let n = self.value(a).numel();
        let s: T = self.value(a).data().iter().cloned().sum();
        self.push(
            "sum",
            Tensor::scalar(s),
            self.needs(&[a]),
            Some(Box::new(move |_vals, g, grads| {
                let ga = acc(grads, ia, n);
                for v in ga.iter_mut() {
                    *v = *v + g[0];
                }
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, DpmError> {
        let ia = a.0;
        let n = self.value(a).numel();
        if n == 0 {
            return Err(DpmError::shape("mean", "empty tensor".to_string()));
        }
        let nn = T::from_f64c(n as f64);
        let s: T = self.value(a).data().iter().cloned().sum::<T>() / nn;
        self.push(
            "mean",
            Tensor::scalar(s),
            self.needs(&[a]),
            Some(Box::new(move |_vals, g, grads| {
                let ga = acc(grads, ia, n);
                for v in ga.iter_mut() {
                    *v = *v + g[0] / nn;
                }
            })),
        )
    }

    /// Column means of a [r, c] matrix -> [c]. Doubles as global average
    /// pooling once a spatial map is reshaped to (h*w) x channels.
    pub fn mean_axis0(&mut self, a: Var) -> Result<Var, DpmError> {
        let shape = self.value(a).shape();
        if shape.len() != 2 {
            return Err(DpmError::shape("mean_axis0", format!("expected rank 2, got {:?}", shape)));
        }
        let (rows, c) = (shape[0], shape[1]);
        if rows == 0 {
            return Err(DpmError::shape("mean_axis0", "zero rows".to_string()));
        }
        let ia = a.0;
        let rn = T::from_f64c(rows as f64);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); c];
        for r in 0..rows {
            for i in 0..c {
                data[i] = data[i] + src[r * c + i];
            }
        }
        for v in data.iter_mut() {
            *v = *v / rn;
        }
        let out = Tensor::new(vec![c], data)?;
        self.push(
            "mean_axis0",
            out,
            self.needs(&[a]),
            Some(Box::new(move |_vals, g, grads| {
                let ga = acc(grads, ia, rows * c);
                for r in 0..rows {
                    for i in 0..c {
                        ga[r * c + i] = ga[r * c + i] + g[i] / rn;
                    }
                }
            })),
        )
    }

    // ── Convolution ─────────────────────────────────────────────────

    /// 2-D convolution, channels-last: x [h,w,cin], w [kh,kw,cin,cout],
    /// b [cout], zero padding `pad`, stride 1 -> [h', w', cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var, DpmError> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 3 || ws.len() != 4 || xs[2] != ws[2] {
            return Err(DpmError::shape("conv2d", format!("x {:?}, w {:?}", xs, ws)));
        }
        let (h, wdt, cin) = (xs[0], xs[1], xs[2]);
        let (kh, kw, cout) = (ws[0], ws[1], ws[3]);
        if self.value(b).shape() != [cout] {
            return Err(DpmError::shape(
                "conv2d",
                format!("bias {:?}, expected [{}]", self.value(b).shape(), cout),
            ));
        }
        if h + 2 * pad < kh || wdt + 2 * pad < kw {
            return Err(DpmError::shape(
                "conv2d",
                format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * pad, wdt + 2 * pad),
            ));
        }
        let oh = h + 2 * pad - kh + 1;
        let ow = wdt + 2 * pad - kw + 1;
        let (ix, iw, ib) = (x.0, w.0, b.0);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut data = vec![T::zero(); oh * ow * cout];
        for oy in 0..oh {
            for ox in 0..ow {
                let orow = &mut data[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                orow.copy_from_slice(bv);
                for ky in 0..kh {
                    let iy = (oy + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ixp = (ox + kx) as isize - pad as isize;
                        if ixp < 0 || ixp >= wdt as isize {
                            continue;
                        }
                        let xoff = ((iy as usize) * wdt + ixp as usize) * cin;
                        let woff = (ky * kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xc = xv[xoff + ci];
                            let wrow = &wv[woff + ci * cout..woff + (ci + 1) * cout];
                            for co in 0..cout {
                                orow[co] = orow[co] + xc * wrow[co];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![oh, ow, cout], data)?;
        self.push(
            "conv2d",
            out,
            self.needs(&[x, w, b]),
            Some(Box::new(move |vals, g, grads| {
                let xv = vals[ix].data();
                let wv = vals[iw].data();
                {
                    let gb = acc(grads, ib, cout);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for co in 0..cout {
                                gb[co] = gb[co] + g[(oy * ow + ox) * cout + co];
                            }
                        }
                    }
                }
                {
                    let gw = acc(grads, iw, kh * kw * cin * cout);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let grow = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                            for ky in 0..kh {
                                let iy = (oy + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ixp = (ox + kx) as isize - pad as isize;
                                    if ixp < 0 || ixp >= wdt as isize {
                                        continue;
                                    }
                                    let xoff = ((iy as usize) * wdt + ixp as usize) * cin;
                                    let woff = (ky * kw + kx) * cin * cout;
                                    for ci in 0..cin {
                                        let xc = xv[xoff + ci];
                                        for co in 0..cout {
                                            gw[woff + ci * cout + co] =
                                                gw[woff + ci * cout + co] + xc * grow[co];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let gx = acc(grads, ix, h * wdt * cin);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let grow = &g[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                        for ky in 0..kh {
                            let iy = (oy + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ixp = (ox + kx) as isize - pad as isize;
                                if ixp < 0 || ixp >= wdt as isize {
                                    continue;
                                }
                                let xoff = ((iy as usize) * wdt + ixp as usize) * cin;
                                let woff = (ky * kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let mut s = T::zero();
                                    for co in 0..cout {
                                        s = s + wv[woff + ci * cout + co] * grow[co];
                                    }
                                    gx[xoff + ci] = gx[xoff + ci] + s;
                                }
                            }
                        }
                    }
                }
            })),
        )
    }

    // ── Compositions ────────────────────────────────────────────────

    /// Scaled dot-product attention for one head: q [s,d], k [t,d], v [t,e].
    /// Returns (output [s,e], attention weights [s,t]).
    pub fn sdpa(&mut self, q: Var, k: Var, v: Var) -> Result<(Var, Var), DpmError> {
        let d = self.value(q).shape()[1];
        let scores = self.matmul_nt(q, k)?;
        let scaled = self.scale(scores, T::one() / T::from_f64c((d as f64).sqrt()))?;
        let attn = self.softmax_rows(scaled)?;
        let out = self.matmul(attn, v)?;
        Ok((out, attn))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

/// Central-difference check of a scalar-valued function of one tensor.
/// Relative error per entry is |g_a - g_n| / max(|g_a|, |g_n|, 1e-8).
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64, tol: f64) -> Result<GradCheckReport, DpmError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, DpmError>,
{
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    if g.value(loss).numel() != 1 {
        return Err(DpmError::shape("grad_check", "f must return a scalar".to_string()));
    }
    g.backward(loss)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut max_rel = 0.0f64;
    let mut xp = x.clone();
    for i in 0..x.numel() {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + step;
        let fp = eval_scalar(&f, &xp)?;
        xp.data_mut()[i] = orig - step;
        let fm = eval_scalar(&f, &xp)?;
        xp.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(DpmError::non_finite("grad_check perturbed evaluation"));
        }
        let gn = (fp - fm) / (2.0 * step);
        let ga = analytic.data()[i];
        let rel = (ga - gn).abs() / ga.abs().max(gn.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(GradCheckReport { max_rel_err: max_rel, checked: x.numel(), pass: max_rel < tol })
}

fn eval_scalar<F>(f: &F, x: &Tensor<f64>) -> Result<f64, DpmError>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, DpmError>,
{
    let mut g = Graph::no_grad();
    let xv = g.leaf(x.clone());
    let loss = f(&mut g, xv)?;
    Ok(g.value(loss).item())
}
