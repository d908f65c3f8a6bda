//! Operation tape and reverse-mode sweep.
//!
//! Nodes are appended in evaluation order, which is already a topological
//! order; `backward` walks them once in reverse. Gradients are only formed
//! for nodes that transitively depend on a leaf created with
//! `requires_grad = true`, so frozen weights cost no backward work.

use super::{shape_err, Result, TensorError};

/// 64-bit working array recorded on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            [c] => Ok((1, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gather { table: Var, ids: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
}

struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

// ---- dense kernels (row-major) ------------------------------------------

/// out[m,n] += a[m,k] · b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// out[m,k] += g[m,n] · b[k,n]ᵀ
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    gemm(m, n, k, g, (n, 1), b, (1, n), out);
}

/// out[k,n] += a[m,k]ᵀ · g[m,n]
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    gemm(k, m, n, a, (1, k), g, (n, 1), out);
}

/// out[m,n] += lhs[m,k] · rhs[k,n] with (row, column) strides for the operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    lhs: &[f64],
    (lr, lc): (usize, usize),
    rhs: &[f64],
    (rr, rc): (usize, usize),
    out: &mut [f64],
) {
    assert!(lhs.len() >= m * k && rhs.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the assert above keeps every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            lhs.as_ptr(),
            lr as isize,
            lc as isize,
            rhs.as_ptr(),
            rr as isize,
            rc as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    // ---- forward ops -----------------------------------------------------

    /// `[m,k] · [k,n]`; 1-D operands are treated as a single row.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("[{m},{k}] x [{k2},{n}]"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::new(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let src = &self.value(a).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Array::new(vec![c, r], out), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        let data = self.value(a).data.clone();
        let rg = self.rg(&[a]);
        Ok(self.push(Array::new(shape.to_vec(), data), Op::Reshape(a), rg))
    }

    /// Flattens to a single row `[1, n]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        self.reshape(a, &[1, n])
    }

    /// Concatenates matrices along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() || axis > 1 {
            return Err(shape_err("concat", "need >= 1 input and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = inputs
            .iter()
            .map(|&v| self.value(v).dims2("concat"))
            .collect::<Result<_>>()?;
        let (r0, c0) = dims[0];
        let (rows, cols) = if axis == 0 {
            if dims.iter().any(|d| d.1 != c0) {
                return Err(shape_err("concat", format!("column counts differ: {dims:?}")));
            }
            (dims.iter().map(|d| d.0).sum(), c0)
        } else {
            if dims.iter().any(|d| d.0 != r0) {
                return Err(shape_err("concat", format!("row counts differ: {dims:?}")));
            }
            (r0, dims.iter().map(|d| d.1).sum())
        };
        let mut out = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &v in inputs {
                out.extend_from_slice(&self.value(v).data);
            }
        } else {
            for i in 0..rows {
                for (&v, &(_, c)) in inputs.iter().zip(&dims) {
                    out.extend_from_slice(&self.value(v).data[i * c..(i + 1) * c]);
                }
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(
            Array::new(vec![rows, cols], out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2("slice")?;
        let extent = if axis == 0 { r } else { c };
        if axis > 1 || start + len > extent || len == 0 {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) on axis {axis} of [{r},{c}]", start + len),
            ));
        }
        let src = &self.value(a).data;
        let (shape, out) = if axis == 0 {
            (vec![len, c], src[start * c..(start + len) * c].to_vec())
        } else {
            let mut out = Vec::with_capacity(r * len);
            for i in 0..r {
                out.extend_from_slice(&src[i * c + start..i * c + start + len]);
            }
            (vec![r, len], out)
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Array::new(shape, out), Op::Slice { input: a, axis, start }, rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = va.shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::new(shape, data), node, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, op: &'static str, a: Var, row: Var, mul: bool) -> Result<Var> {
        let (r, c) = self.value(a).dims2(op)?;
        if self.value(row).len() != c {
            return Err(shape_err(
                op,
                format!("row of {} for matrix [{r},{c}]", self.value(row).len()),
            ));
        }
        let va = &self.value(a).data;
        let vr = &self.value(row).data;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let x = va[i * c + j];
                out.push(if mul { x * vr[j] } else { x + vr[j] });
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, row]);
        let node = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        Ok(self.push(Array::new(shape, out), node, rg))
    }

    /// Adds a length-`c` row (bias) to every row of `[r, c]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, false)
    }

    /// Multiplies every row of `[r, c]` elementwise by a length-`c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, true)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let data = v.data.iter().map(|x| x * s).collect();
        let shape = v.shape.clone();
        let rg = self.rg(&[a]);
        self.push(Array::new(shape, data), Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a);
        let data = v.data.iter().map(|x| x + s).collect();
        let shape = v.shape.clone();
        let rg = self.rg(&[a]);
        self.push(Array::new(shape, data), Op::AddScalar(a), rg)
    }

    /// Max-subtracted softmax along axis 0 (columns) or 1 (rows).
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.value(a).dims2("softmax")?;
        if axis > 1 {
            return Err(shape_err("softmax", format!("axis {axis} on a matrix")));
        }
        let src = &self.value(a).data;
        let mut out = vec![0.0; r * c];
        let (lanes, len, lane_stride, elem_stride) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
        for lane in 0..lanes {
            let base = lane * lane_stride;
            let idx = |t: usize| base + t * elem_stride;
            let max = (0..len).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for t in 0..len {
                let e = (src[idx(t)] - max).exp();
                out[idx(t)] = e;
                sum += e;
            }
            for t in 0..len {
                out[idx(t)] /= sum;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Array::new(shape, out), Op::Softmax { input: a, axis }, rg))
    }

    /// Per-row normalization to zero mean, unit variance (epsilon 1e-5), no affine.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("layer_norm")?;
        let src = &self.value(a).data;
        let mut out = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mean) * rs;
            }
            rstd.push(rs);
        }
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Array::new(shape, out), Op::LayerNorm { input: a, rstd }, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let v = self.value(a);
        let data = v.data.iter().map(|&x| f(x)).collect();
        let shape = v.shape.clone();
        let rg = self.rg(&[a]);
        self.push(Array::new(shape, data), node, rg)
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Rows `ids` of a `[n, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.value(table).dims2("gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather", format!("row {bad} of a {n}-row table")));
        }
        let src = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Array::new(vec![ids.len(), d], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Array::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Array::scalar(s), Op::Mean(a), rg)
    }

    /// `mean((a - b)^2)` over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).len() != self.value(b).len() {
            return Err(shape_err(
                "mse",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let va = &self.value(a).data;
        let vb = &self.value(b).data;
        let n = va.len().max(1) as f64;
        let s = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::scalar(s), Op::Mse(a, b), rg))
    }

    /// Scaled dot-product attention `softmax(q kᵀ / sqrt(d)) v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let d = *self.shape(q).last().unwrap_or(&1);
        if self.shape(k).last() != Some(&d) {
            return Err(shape_err(
                "attention",
                format!("query {:?} vs key {:?}", self.shape(q), self.shape(k)),
            ));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, 1.0 / (d as f64).sqrt());
        let w = self.softmax(scaled, 1)?;
        self.matmul(w, v)
    }

    /// Errors if any element of `v` is NaN or infinite.
    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).data.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what.to_string()))
        }
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Precondition(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = va.dims2("matmul").unwrap();
                let n = vb.dims2("matmul").unwrap().1;
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(g, &vb.data, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(&va.data, g, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2("transpose").unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) | Op::AddScalar(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Concat { inputs, axis } => {
                let cols_out = out.shape[1];
                let mut offset = 0;
                for &v in inputs {
                    let (r, c) = self.value(v).dims2("concat").unwrap();
                    if let Some(gv) = self.acc(grads, v) {
                        if *axis == 0 {
                            add_into(gv, &g[offset * cols_out..(offset + r) * cols_out]);
                        } else {
                            for i in 0..r {
                                let src = &g[i * cols_out + offset..i * cols_out + offset + c];
                                add_into(&mut gv[i * c..(i + 1) * c], src);
                            }
                        }
                    }
                    offset += if *axis == 0 { r } else { c };
                }
            }
            Op::Slice { input, axis, start } => {
                let (_, c) = self.value(*input).dims2("slice").unwrap();
                let (ro, co) = (out.shape[0], out.shape[1]);
                if let Some(gi) = self.acc(grads, *input) {
                    if *axis == 0 {
                        add_into(&mut gi[start * c..(start + ro) * c], g);
                    } else {
                        for i in 0..ro {
                            add_into(
                                &mut gi[i * c + start..i * c + start + co],
                                &g[i * co..(i + 1) * co],
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(&vb.data) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(&va.data) {
                        *x += gi * ai;
                    }
                }
            }
            Op::AddRow(a, row) => {
                let c = out.shape.last().copied().unwrap_or(1);
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks_exact(c) {
                        add_into(gr, chunk);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let c = out.shape.last().copied().unwrap_or(1);
                let va = &self.value(*a).data;
                let vr = &self.value(*row).data;
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, (x, gi)) in ga.iter_mut().zip(g).enumerate() {
                        *x += gi * vr[i % c];
                    }
                }
                if let Some(gr) = self.acc(grads, *row) {
                    for (i, (gi, ai)) in g.iter().zip(va).enumerate() {
                        gr[i % c] += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, gi) in ga.iter_mut().zip(g) {
                        *x += gi * s;
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (r, c) = (out.shape[0], out.shape[1]);
                let y = &out.data;
                if let Some(gi) = self.acc(grads, *input) {
                    let (lanes, len, lane_stride, elem_stride) =
                        if *axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
                    for lane in 0..lanes {
                        let base = lane * lane_stride;
                        let dot: f64 = (0..len)
                            .map(|t| g[base + t * elem_stride] * y[base + t * elem_stride])
                            .sum();
                        for t in 0..len {
                            let j = base + t * elem_stride;
                            gi[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { input, rstd } => {
                let c = *out.shape.last().unwrap();
                let y = &out.data;
                if let Some(gi) = self.acc(grads, *input) {
                    for (i, rs) in rstd.iter().enumerate() {
                        let gr = &g[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            gi[i * c + j] += rs * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = &self.value(*a).data;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), xi) in ga.iter_mut().zip(g).zip(x) {
                        *o += gi * gelu_grad(*xi);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(&out.data) {
                        *o += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), yi) in ga.iter_mut().zip(g).zip(&out.data) {
                        *o += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = out.shape[1];
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let s = g[0] / ga.len().max(1) as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                let n = va.len().max(1) as f64;
                let coef = 2.0 * g[0] / n;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, x), y) in ga.iter_mut().zip(va).zip(vb) {
                        *o += coef * (x - y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, x), y) in gb.iter_mut().zip(va).zip(vb) {
                        *o -= coef * (x - y);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::new(shape.to_vec(), data.to_vec())
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[1, 2], &[0.0, 0.0]));
        let y = t.softmax(x, 1).unwrap();
        assert_eq!(t.value(y).data, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2, 2], &[1000.0, 1001.0, -1000.0, 5.0]));
        let y = t.softmax(x, 0).unwrap();
        assert!(t.value(y).data.iter().all(|v| v.is_finite()));
        let d = &t.value(y).data;
        assert!((d[0] + d[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_key_attention_returns_value_row() {
        let mut t = Tape::new();
        let q = t.constant(arr(&[3, 2], &[0.3, -2.0, 5.0, 1.0, 0.0, 0.0]));
        let k = t.constant(arr(&[1, 2], &[0.7, 0.1]));
        let v = t.constant(arr(&[1, 4], &[1.0, 2.0, 3.0, 4.0]));
        let o = t.attention(q, k, v).unwrap();
        assert_eq!(t.shape(o), &[3, 4]);
        for row in t.value(o).data.chunks(4) {
            assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(Array::scalar(3.0), true);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[6.0]);
        let f = |v: f64| v * v;
        let fd = (f(3.0 + 1e-3) - f(3.0 - 1e-3)) / 2e-3;
        assert!((fd - 6.0).abs() / 6.0 < 1e-3);
    }

    #[test]
    fn matmul_and_shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Array::zeros(&[2, 3]));
        let b = t.constant(Array::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().starts_with("matmul"), "{err}");
        let c = t_const(&mut t, &[3, 2]);
        assert!(t.add(a, c).unwrap_err().to_string().starts_with("add"));
        let d = t_const(&mut t, &[2, 2]);
        assert!(t.concat(&[a, d], 0).is_err());
        assert!(t.slice(a, 1, 2, 2).is_err());
    }

    fn t_const(t: &mut Tape, shape: &[usize]) -> Var {
        t.constant(Array::zeros(shape))
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let w = t.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = t.leaf(arr(&[1, 2], &[1.0, 1.0]), true);
        let y = t.matmul(x, w).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2, 4], &[1.0, 2.0, 3.0, 10.0, -5.0, 0.5, 0.25, 8.0]));
        let y = t.layer_norm(x).unwrap();
        for row in t.value(y).data.chunks(4) {
            let m = row.iter().sum::<f64>() / 4.0;
            let v = row.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(Array::zeros(&[2]), true);
        assert!(t.backward(x).is_err());
    }
}
