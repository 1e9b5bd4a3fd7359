//! Row-major 2-D tensors and a reverse-mode tape.

use super::params::{ParamId, Params};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match shape");
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a (n×k) · b (k×m)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = vec![0.0; a.rows * b.cols];
    for i in 0..a.rows {
        let o = &mut out[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (ov, &bv) in o.iter_mut().zip(b.row(k)) {
                *ov += av * bv;
            }
        }
    }
    Tensor::from_vec(a.rows, b.cols, out)
}

/// `a (n×k) · bᵀ` with `b (m×k)`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_bt shape mismatch");
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.push(ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum());
        }
    }
    Tensor::from_vec(a.rows, b.rows, out)
}

/// `aᵀ (k×n)ᵀ · b` with `a (n×k)`, `b (n×m)`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_at shape mismatch");
    let mut out = vec![0.0; a.cols * b.cols];
    for r in 0..a.rows {
        let br = b.row(r);
        for (k, &av) in a.row(r).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (ov, &bv) in out[k * b.cols..(k + 1) * b.cols].iter_mut().zip(br) {
                *ov += av * bv;
            }
        }
    }
    Tensor::from_vec(a.cols, b.cols, out)
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.data.clone();
    for r in out.chunks_mut(x.cols) {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in r.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::from_vec(x.rows, x.cols, out)
}

pub const LN_EPS: f64 = 1e-5;

/// Sinusoidal positional encoding value.
pub fn positional_encoding(pos: usize, i: usize, d_model: usize) -> f64 {
    let pair = (2 * (i / 2)) as f64;
    let angle = pos as f64 / 10000f64.powf(pair / d_model as f64);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Add a `1×c` row to every row.
    AddRow(NodeId, NodeId),
    /// Multiply every row elementwise by a `1×c` row.
    MulRow(NodeId, NodeId),
    /// Elementwise product with a constant.
    MulConst(NodeId, Vec<f64>),
    Scale(NodeId, f64),
    Relu(NodeId),
    SoftmaxRows(NodeId),
    /// Row normalization to zero mean and unit variance; keeps the inverse
    /// standard deviations for the backward pass.
    Normalize(NodeId, Vec<f64>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    MeanRows(NodeId),
    /// Repeat a `1×c` row `n` times.
    Broadcast(NodeId),
    /// Subtract the mean of all entries.
    Center(NodeId),
    /// Add a `1×1` scalar to every entry.
    AddScalar(NodeId, NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Tensor>,
}

/// Records a forward computation over parameters from one [`Params`] store.
pub struct Tape<'p> {
    params: &'p Params,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p Params) -> Self {
        Self { params, nodes: Vec::with_capacity(256) }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        match (&self.nodes[id].op, &self.nodes[id].value) {
            (Op::Param(p), _) => self.params.get(*p),
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter nodes hold values"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value: Some(value) });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Const, t)
    }

    pub fn param(&mut self, p: ParamId) -> NodeId {
        self.nodes.push(Node { op: Op::Param(p), value: None });
        self.nodes.len() - 1
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(Op::MatMulBt(a, b), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().zip(&y.data).map(|(p, q)| p + q).collect());
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "add_row shape mismatch");
        let mut data = x.data.clone();
        for chunk in data.chunks_mut(x.cols) {
            for (v, b) in chunk.iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        let v = Tensor::from_vec(x.rows, x.cols, data);
        self.push(Op::AddRow(a, row), v)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "mul_row shape mismatch");
        let mut data = x.data.clone();
        for chunk in data.chunks_mut(x.cols) {
            for (v, g) in chunk.iter_mut().zip(&r.data) {
                *v *= g;
            }
        }
        let v = Tensor::from_vec(x.rows, x.cols, data);
        self.push(Op::MulRow(a, row), v)
    }

    pub fn mul_const(&mut self, a: NodeId, c: Vec<f64>) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.data.len(), c.len(), "mul_const shape mismatch");
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().zip(&c).map(|(p, q)| p * q).collect());
        self.push(Op::MulConst(a, c), v)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let x = self.value(a);
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|p| p * s).collect());
        self.push(Op::Scale(a, s), v)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|p| p.max(0.0)).collect());
        self.push(Op::Relu(a), v)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows(self.value(a));
        self.push(Op::SoftmaxRows(a), v)
    }

    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut data = x.data.clone();
        let mut inv = Vec::with_capacity(x.rows);
        let n = x.cols as f64;
        for chunk in data.chunks_mut(x.cols) {
            let mean = chunk.iter().sum::<f64>() / n;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for v in chunk.iter_mut() {
                *v = (*v - mean) * s;
            }
            inv.push(s);
        }
        let v = Tensor::from_vec(x.rows, x.cols, data);
        self.push(Op::Normalize(a, inv), v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows, rows, "concat row mismatch");
                data.extend_from_slice(t.row(r));
            }
        }
        let v = Tensor::from_vec(rows, cols, data);
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice out of range");
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = Tensor::from_vec(x.rows, len, data);
        self.push(Op::SliceCols(a, start), v)
    }

    /// Rows of `table` selected by `idx`.
    pub fn gather(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * t.cols);
        for &i in idx {
            assert!(i < t.rows, "gather index out of range");
            data.extend_from_slice(t.row(i));
        }
        let v = Tensor::from_vec(idx.len(), t.cols, data);
        self.push(Op::Gather(table, idx.to_vec()), v)
    }

    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mut data = vec![0.0; x.cols];
        for r in 0..x.rows {
            for (d, v) in data.iter_mut().zip(x.row(r)) {
                *d += v;
            }
        }
        let n = x.rows as f64;
        data.iter_mut().for_each(|d| *d /= n);
        let v = Tensor::from_vec(1, x.cols, data);
        self.push(Op::MeanRows(a), v)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> NodeId {
        let x = self.value(a);
        assert_eq!(x.rows, 1, "broadcast needs a row");
        let v = Tensor::from_vec(n, x.cols, x.data.repeat(n));
        self.push(Op::Broadcast(a), v)
    }

    pub fn center(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let mean = x.data.iter().sum::<f64>() / x.data.len() as f64;
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|p| p - mean).collect());
        self.push(Op::Center(a), v)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let x = self.value(a);
        let sv = self.value(s);
        assert_eq!(sv.shape(), (1, 1), "add_scalar needs a 1x1 node");
        let c = sv.data[0];
        let v = Tensor::from_vec(x.rows, x.cols, x.data.iter().map(|p| p + c).collect());
        self.push(Op::AddScalar(a, s), v)
    }

    /// Back-propagate `seed` (the gradient of the loss with respect to
    /// `out`) and add parameter gradients into `grads`.
    pub fn backward(&self, out: NodeId, seed: Vec<f64>, grads: &mut Params) {
        let mut g: Vec<Option<Vec<f64>>> = vec![None; out + 1];
        assert_eq!(seed.len(), self.value(out).data.len(), "seed shape mismatch");
        g[out] = Some(seed);
        for id in (0..=out).rev() {
            let Some(gy) = g[id].take() else { continue };
            let y = self.value(id);
            match &self.nodes[id].op {
                Op::Const => {}
                Op::Param(p) => {
                    for (a, b) in grads.get_mut(*p).data.iter_mut().zip(&gy) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let gy = Tensor::from_vec(y.rows, y.cols, gy);
                    let ga = matmul_bt(&gy, self.value(*b));
                    let gb = matmul_at(self.value(*a), &gy);
                    accumulate(&mut g, *a, ga.data);
                    accumulate(&mut g, *b, gb.data);
                }
                Op::MatMulBt(a, b) => {
                    // y = a bᵀ: ga = gy b, gb = gyᵀ a.
                    let gy = Tensor::from_vec(y.rows, y.cols, gy);
                    let ga = matmul(&gy, self.value(*b));
                    let gb = matmul_at(&gy, self.value(*a));
                    accumulate(&mut g, *a, ga.data);
                    accumulate(&mut g, *b, gb.data);
                }
                Op::Add(a, b) => {
                    accumulate(&mut g, *b, gy.clone());
                    accumulate(&mut g, *a, gy);
                }
                Op::AddRow(a, row) => {
                    let mut gr = vec![0.0; y.cols];
                    for chunk in gy.chunks(y.cols) {
                        for (d, v) in gr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(&mut g, *row, gr);
                    accumulate(&mut g, *a, gy);
                }
                Op::MulRow(a, row) => {
                    let x = self.value(*a);
                    let r = self.value(*row);
                    let mut gr = vec![0.0; y.cols];
                    let mut ga = gy.clone();
                    for (i, chunk) in ga.chunks_mut(y.cols).enumerate() {
                        for (j, v) in chunk.iter_mut().enumerate() {
                            gr[j] += *v * x.data[i * y.cols + j];
                            *v *= r.data[j];
                        }
                    }
                    accumulate(&mut g, *row, gr);
                    accumulate(&mut g, *a, ga);
                }
                Op::MulConst(a, c) => {
                    accumulate(&mut g, *a, gy.iter().zip(c).map(|(p, q)| p * q).collect());
                }
                Op::Scale(a, s) => accumulate(&mut g, *a, gy.iter().map(|p| p * s).collect()),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    accumulate(&mut g, *a, gy.iter().zip(&x.data).map(|(p, &v)| if v > 0.0 { *p } else { 0.0 }).collect());
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = Vec::with_capacity(gy.len());
                    for (gr, yr) in gy.chunks(y.cols).zip(y.data.chunks(y.cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        ga.extend(gr.iter().zip(yr).map(|(p, q)| q * (p - dot)));
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::Normalize(a, inv) => {
                    let n = y.cols as f64;
                    let mut ga = Vec::with_capacity(gy.len());
                    for ((gr, yr), s) in gy.chunks(y.cols).zip(y.data.chunks(y.cols)).zip(inv) {
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / n;
                        ga.extend(gr.iter().zip(yr).map(|(p, q)| s * (p - mg - q * mgy)));
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = self.value(p).cols;
                        let mut gp = Vec::with_capacity(y.rows * c);
                        for r in 0..y.rows {
                            gp.extend_from_slice(&gy[r * y.cols + off..r * y.cols + off + c]);
                        }
                        accumulate(&mut g, p, gp);
                        off += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut ga = vec![0.0; x.data.len()];
                    for r in 0..y.rows {
                        ga[r * x.cols + start..r * x.cols + start + y.cols].copy_from_slice(&gy[r * y.cols..(r + 1) * y.cols]);
                    }
                    accumulate(&mut g, *a, ga);
                }
                Op::Gather(table, idx) => {
                    let t = self.value(*table);
                    let mut gt = vec![0.0; t.data.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (d, v) in gt[i * t.cols..(i + 1) * t.cols].iter_mut().zip(&gy[r * t.cols..(r + 1) * t.cols]) {
                            *d += v;
                        }
                    }
                    accumulate(&mut g, *table, gt);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.rows as f64;
                    let row: Vec<f64> = gy.iter().map(|v| v / n).collect();
                    accumulate(&mut g, *a, row.repeat(x.rows));
                }
                Op::Broadcast(a) => {
                    let mut gr = vec![0.0; y.cols];
                    for chunk in gy.chunks(y.cols) {
                        for (d, v) in gr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(&mut g, *a, gr);
                }
                Op::Center(a) => {
                    let m = gy.iter().sum::<f64>() / gy.len() as f64;
                    accumulate(&mut g, *a, gy.iter().map(|v| v - m).collect());
                }
                Op::AddScalar(a, s) => {
                    accumulate(&mut g, *s, vec![gy.iter().sum()]);
                    accumulate(&mut g, *a, gy);
                }
            }
        }
    }
}

fn accumulate(g: &mut [Option<Vec<f64>>], id: NodeId, v: Vec<f64>) {
    match &mut g[id] {
        Some(acc) => acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(v),
    }
}
