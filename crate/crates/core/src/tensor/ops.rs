use super::kernels::gemm;
use super::tape::{Contributions, Nodes, Op};
use super::{Tape, Var};
use crate::error::{Error, Result};

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_CUBIC: f32 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `src` (of `shape`) into the layout given by `perm`.
fn permute_data(src: &[f32], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(src.len());
    let mut counter = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..src.len() {
        out.push(src[offset]);
        for axis in (0..counter.len()).rev() {
            counter[axis] += 1;
            offset += step[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            offset -= step[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
    (out_shape, out)
}

impl Tape {
    /// `[m×k]·[k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, false);
        self.push(Op::MatMul { a, b, m, k, n }, vec![m, n], out)
    }

    /// Batched product `[g×m×k]·[g×k×n]`, or `[g×m×k]·[g×n×k]ᵀ` with `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("bmm", &sa, &sb);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (da, db) = (self.data(a), self.data(b));
            for g in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[g * m * k..(g + 1) * m * k],
                    false,
                    &db[g * k * n..(g + 1) * k * n],
                    trans_b,
                    &mut out[g * m * n..(g + 1) * m * n],
                    false,
                );
            }
        }
        self.push(
            Op::Bmm {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            vec![batch, m, n],
            out,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Add { a, b }, shape, out)
    }

    /// `x + bias`, with `bias` broadcast over every axis but the last.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let out = self
            .data(x)
            .chunks_exact(d)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::AddBias { x, bias }, shape, out)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(Op::Mul { a, b }, shape, out)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, factor }, shape, out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu { x }, shape, out)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Op::Gelu { x }, shape, out)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let out = self.data(x).to_vec();
        self.push(Op::Reshape { x }, shape.to_vec(), out)
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::invalid("permute", format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let (out_shape, out) = permute_data(self.data(x), &shape, perm);
        self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            out_shape,
            out,
        )
    }

    /// Select slices along the leading axis: `out[i] = table[index[i]]`.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let rows = shape[0];
        let row: usize = shape[1..].iter().product();
        if index.is_empty() {
            return Err(Error::invalid("gather", "empty index list"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("gather", format!("index {bad} out of range for {rows} rows")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(index.len() * row);
        for &i in index {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        let mut out_shape = vec![index.len()];
        out_shape.extend_from_slice(&shape[1..]);
        self.push(
            Op::Gather {
                table,
                index: index.to_vec(),
                row,
            },
            out_shape,
            out,
        )
    }

    /// Concatenate along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_rows", "nothing to concatenate"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat_rows", self.shape(*first), s));
            }
            rows += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        self.push(
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            shape,
            out,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        self.push(Op::Sum { x }, vec![1], vec![s as f32])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s: f64 = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        self.push(Op::Mean { x }, vec![1], vec![s as f32])
    }
}

pub(super) fn matmul_backward(
    nodes: &Nodes,
    a: Var,
    b: Var,
    m: usize,
    k: usize,
    n: usize,
    g: &[f32],
) -> Contributions {
    let mut out = Vec::new();
    if nodes.needs(a) {
        let mut da = vec![0.0; m * k];
        gemm(m, n, k, g, false, nodes.data(b), true, &mut da, false);
        out.push((a, da));
    }
    if nodes.needs(b) {
        let mut db = vec![0.0; k * n];
        gemm(k, m, n, nodes.data(a), true, g, false, &mut db, false);
        out.push((b, db));
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(super) fn bmm_backward(
    nodes: &Nodes,
    a: Var,
    b: Var,
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    g: &[f32],
) -> Contributions {
    let mut out = Vec::new();
    let (da_src, db_src) = (nodes.data(a), nodes.data(b));
    if nodes.needs(a) {
        let mut da = vec![0.0; batch * m * k];
        for i in 0..batch {
            // dA = G · op(B)ᵀ
            gemm(
                m,
                n,
                k,
                &g[i * m * n..(i + 1) * m * n],
                false,
                &db_src[i * k * n..(i + 1) * k * n],
                !trans_b,
                &mut da[i * m * k..(i + 1) * m * k],
                false,
            );
        }
        out.push((a, da));
    }
    if nodes.needs(b) {
        let mut db = vec![0.0; batch * k * n];
        for i in 0..batch {
            let ga = &g[i * m * n..(i + 1) * m * n];
            let aa = &da_src[i * m * k..(i + 1) * m * k];
            let dst = &mut db[i * k * n..(i + 1) * k * n];
            if trans_b {
                // B is stored n×k: dB = Gᵀ · A
                gemm(n, m, k, ga, true, aa, false, dst, false);
            } else {
                gemm(k, m, n, aa, true, ga, false, dst, false);
            }
        }
        out.push((b, db));
    }
    out
}

pub(super) fn add_backward(nodes: &Nodes, a: Var, b: Var, g: &[f32]) -> Contributions {
    let mut out = Vec::new();
    if nodes.needs(a) {
        out.push((a, g.to_vec()));
    }
    if nodes.needs(b) {
        out.push((b, g.to_vec()));
    }
    out
}

pub(super) fn add_bias_backward(nodes: &Nodes, x: Var, bias: Var, g: &[f32]) -> Contributions {
    let mut out = Vec::new();
    if nodes.needs(x) {
        out.push((x, g.to_vec()));
    }
    if nodes.needs(bias) {
        let d = nodes.value(bias).len();
        let mut acc = vec![0.0f64; d];
        for row in g.chunks_exact(d) {
            acc.iter_mut().zip(row).for_each(|(a, v)| *a += *v as f64);
        }
        out.push((bias, acc.into_iter().map(|v| v as f32).collect()));
    }
    out
}

pub(super) fn mul_backward(nodes: &Nodes, a: Var, b: Var, g: &[f32]) -> Contributions {
    let mut out = Vec::new();
    if nodes.needs(a) {
        out.push((a, g.iter().zip(nodes.data(b)).map(|(x, y)| x * y).collect()));
    }
    if nodes.needs(b) {
        out.push((b, g.iter().zip(nodes.data(a)).map(|(x, y)| x * y).collect()));
    }
    out
}

pub(super) fn relu_backward(nodes: &Nodes, x: Var, g: &[f32]) -> Contributions {
    let dx = g
        .iter()
        .zip(nodes.data(x))
        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
        .collect();
    vec![(x, dx)]
}

pub(super) fn gelu_backward(nodes: &Nodes, x: Var, g: &[f32]) -> Contributions {
    let dx = g
        .iter()
        .zip(nodes.data(x))
        .map(|(d, &v)| d * gelu_grad_scalar(v))
        .collect();
    vec![(x, dx)]
}

pub(super) fn permute_backward(nodes: &Nodes, x: Var, perm: &[usize], g: &[f32]) -> Contributions {
    let mut inverse = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inverse[p] = i;
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| nodes.value(x).shape()[p]).collect();
    let (_, dx) = permute_data(g, &out_shape, &inverse);
    vec![(x, dx)]
}

pub(super) fn gather_backward(
    nodes: &Nodes,
    table: Var,
    index: &[usize],
    row: usize,
    g: &[f32],
) -> Contributions {
    let mut dt = vec![0.0f32; nodes.value(table).len()];
    for (k, &i) in index.iter().enumerate() {
        dt[i * row..(i + 1) * row]
            .iter_mut()
            .zip(&g[k * row..(k + 1) * row])
            .for_each(|(d, v)| *d += *v);
    }
    vec![(table, dt)]
}

pub(super) fn concat_backward(nodes: &Nodes, parts: &[Var], g: &[f32]) -> Contributions {
    let mut out = Vec::new();
    let mut offset = 0;
    for &p in parts {
        let len = nodes.value(p).len();
        if nodes.needs(p) {
            out.push((p, g[offset..offset + len].to_vec()));
        }
        offset += len;
    }
    out
}
