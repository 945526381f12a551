//! Forward definitions of every differentiable operation. Backward rules live
//! next to the tape in `graph.rs`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::graph::{Graph, NodeId, Op};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

fn out(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("kernel output length matches shape")
}

impl Graph {
    fn expect_rank(&self, id: NodeId, rank: usize, op: &str) -> Result<&[usize]> {
        let s = self.shape(id);
        if s.len() != rank {
            return Err(dim_err!("{op} expects a rank-{rank} tensor, got shape {s:?}"));
        }
        Ok(s)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn map_unary(&mut self, x: NodeId, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<NodeId> {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| f(a)).collect();
        let t = out(v.shape(), data);
        self.push_op(t, op, name)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = {
            let s = self.expect_rank(a, 2, "matmul")?;
            (s[0], s[1])
        };
        let (k2, n) = {
            let s = self.expect_rank(b, 2, "matmul")?;
            (s[0], s[1])
        };
        if k != k2 {
            return Err(dim_err!("matmul inner extents differ: [{m}×{k}] · [{k2}×{n}]"));
        }
        let mut data = vec![0.0; m * n];
        kernels::gemm(&mut data, self.value(a).data(), self.value(b).data(), m, k, n, false);
        self.push_op(out(&[m, n], data), Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = {
            let s = self.expect_rank(x, 2, "transpose")?;
            (s[0], s[1])
        };
        let data = kernels::transpose(self.value(x).data(), r, c);
        self.push_op(out(&[c, r], data), Op::Transpose(x), "transpose")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push_op(t, Op::Reshape(x), "reshape")
    }

    /// Row-wise softmax over the last axis of a matrix, with per-row max
    /// subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let c = self.expect_rank(x, 2, "softmax_rows")?[1];
        let v = self.value(x);
        let mut data = v.data().to_vec();
        if c > 0 {
            for row in data.chunks_mut(c) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for e in row.iter_mut() {
                    *e = libm::exp(*e - m);
                    s += *e;
                }
                row.iter_mut().for_each(|e| *e /= s);
            }
        }
        let t = out(v.shape(), data);
        self.push_op(t, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// Cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.expect_rank(x, 3, "conv2d input")?.to_vec();
        let ws = self.expect_rank(w, 4, "conv2d weight")?.to_vec();
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, k) = (ws[0], ws[2]);
        if ws[1] != c_in || ws[3] != k {
            return Err(dim_err!("conv2d weight {ws:?} incompatible with input {xs:?}"));
        }
        if stride == 0 || k == 0 {
            return Err(dim_err!("conv2d stride and kernel must be positive"));
        }
        let extent = |n: usize| -> Result<usize> {
            let span = (n + 2 * pad)
                .checked_sub(k)
                .ok_or_else(|| dim_err!("conv2d kernel {k} larger than padded extent {}", n + 2 * pad))?;
            if span % stride != 0 {
                return Err(dim_err!(
                    "conv2d output extent ({n}+2·{pad}−{k})/{stride}+1 is not integral"
                ));
            }
            Ok(span / stride + 1)
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            k,
            stride,
            pad,
            h_out: extent(h)?,
            w_out: extent(wd)?,
        };
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut data = vec![0.0; c_out * geom.out_len()];
        kernels::gemm(
            &mut data,
            self.value(w).data(),
            &cols,
            c_out,
            geom.patch_len(),
            geom.out_len(),
            false,
        );
        let t = out(&[c_out, geom.h_out, geom.w_out], data);
        // Weight gradients need the columns; input-only gradients do not.
        let cols = if self.needs_grad(w) { cols } else { Vec::new() };
        self.push_op(t, Op::Conv2d { x, w, geom, cols }, "conv2d")
    }

    /// Non-overlapping patches of `x: [C, H, W]` as an `[N, C·k·k]` matrix.
    /// Only `stride == k` is supported.
    pub fn unfold(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let s = self.expect_rank(x, 3, "unfold")?.to_vec();
        if stride != k {
            return Err(dim_err!(
                "unfold supports only non-overlapping patches (stride = k), got k={k} stride={stride}"
            ));
        }
        if k == 0 || s[1] % k != 0 || s[2] % k != 0 {
            return Err(dim_err!(
                "unfold: k={k} does not divide spatial extent {}×{}",
                s[1],
                s[2]
            ));
        }
        let data = kernels::unfold(self.value(x).data(), s[0], s[1], s[2], k);
        let n = (s[1] / k) * (s[2] / k);
        self.push_op(out(&[n, s[0] * k * k], data), Op::Unfold { x, k }, "unfold")
    }

    /// Inverse of [`Graph::unfold`]: `[N, C·k·k]` back to `[C, H, W]`.
    pub fn fold(&mut self, p: NodeId, k: usize, stride: usize, h: usize, w: usize) -> Result<NodeId> {
        let s = self.expect_rank(p, 2, "fold")?.to_vec();
        if stride != k {
            return Err(dim_err!("fold supports only non-overlapping patches (stride = k)"));
        }
        if k == 0 || !h.is_multiple_of(k) || !w.is_multiple_of(k) {
            return Err(dim_err!("fold: k={k} does not divide {h}×{w}"));
        }
        let n = (h / k) * (w / k);
        if s[0] != n || s[1] % (k * k) != 0 {
            return Err(dim_err!("fold: patch matrix {s:?} inconsistent with {h}×{w} and k={k}"));
        }
        let c = s[1] / (k * k);
        let data = kernels::fold(self.value(p).data(), c, h, w, k);
        self.push_op(out(&[c, h, w], data), Op::Fold { p, k }, "fold")
    }

    /// Corner-aligned bilinear upsampling of `[C, H, W]` by 2 or 4.
    pub fn upsample(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.expect_rank(x, 3, "upsample")?.to_vec();
        if factor != 2 && factor != 4 {
            return Err(dim_err!("upsample factor must be 2 or 4, got {factor}"));
        }
        let data = kernels::upsample_bilinear(self.value(x).data(), s[0], s[1], s[2], factor);
        self.push_op(
            out(&[s[0], s[1] * factor, s[2] * factor], data),
            Op::Upsample { x, factor },
            "upsample",
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, |a| if a > 0.0 { a } else { 0.0 }, Op::Relu(x), "relu")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, libm::tanh, Op::Tanh(x), "tanh")
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, libm::exp, Op::Exp(x), "exp")
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        if let Some(v) = self.value(x).data().iter().find(|v| v.is_nan() || **v <= 0.0) {
            return Err(Error::Domain(alloc::format!("log of non-positive value {v}")));
        }
        self.map_unary(x, libm::log, Op::Log(x), "log")
    }

    /// `log(1 + eˣ)`, evaluated without overflow for large |x|.
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(
            x,
            |a| a.max(0.0) + libm::log1p(libm::exp(-libm::fabs(a))),
            Op::Softplus(x),
            "softplus",
        )
    }

    pub fn abs(&mut self, x: NodeId) -> Result<NodeId> {
        self.map_unary(x, libm::fabs, Op::Abs(x), "abs")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let t = out(self.shape(a), data);
        self.push_op(t, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let t = out(self.shape(a), data);
        self.push_op(t, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let t = out(self.shape(a), data);
        self.push_op(t, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.map_unary(x, |a| a * s, Op::Scale(x, s), "scale")
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        self.map_unary(x, |a| a + s, Op::AddScalar(x), "add_scalar")
    }

    /// Stacks `[C_i, H, W]` maps along the channel axis.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return Err(dim_err!("concat_channels of nothing"));
        };
        let s0 = self.expect_rank(first, 3, "concat_channels")?.to_vec();
        let mut c = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.expect_rank(x, 3, "concat_channels")?;
            if s[1..] != s0[1..] {
                return Err(dim_err!("concat_channels spatial mismatch {s:?} vs {s0:?}"));
            }
            c += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        self.push_op(
            out(&[c, s0[1], s0[2]], data),
            Op::ConcatChannels(xs.to_vec()),
            "concat_channels",
        )
    }

    /// Joins `[N, c_i]` matrices side by side.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = xs.first() else {
            return Err(dim_err!("concat_cols of nothing"));
        };
        let rows = self.expect_rank(first, 2, "concat_cols")?[0];
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let s = self.expect_rank(x, 2, "concat_cols")?;
            if s[0] != rows {
                return Err(dim_err!("concat_cols row mismatch {} vs {rows}", s[0]));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&x, &c) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(x).data()[r * c..(r + 1) * c]);
            }
        }
        self.push_op(out(&[rows, total], data), Op::ConcatCols(xs.to_vec()), "concat_cols")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.numel() == 0 {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(x), "mean")
    }

    /// Σ|x| over all elements.
    pub fn l1_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.value(x).data().iter().map(|v| libm::fabs(*v)).sum();
        self.push_op(Tensor::scalar(s), Op::L1Norm(x), "l1_norm")
    }

    /// Euclidean norm of each row: `[N, M] → [N, 1]`.
    pub fn l2_norm_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c) = {
            let s = self.expect_rank(x, 2, "l2_norm_rows")?;
            (s[0], s[1])
        };
        let data = row_norms(self.value(x).data(), c);
        self.push_op(out(&[n, 1], data), Op::L2NormRows(x), "l2_norm_rows")
    }

    /// Scales each row to unit length: `x / max(‖x‖, eps)`. Exactly invariant
    /// to positive row rescaling whenever the norm exceeds `eps`.
    pub fn normalize_rows(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let c = self.expect_rank(x, 2, "normalize_rows")?[1];
        let v = self.value(x);
        let norms = row_norms(v.data(), c);
        let mut data = v.data().to_vec();
        if c > 0 {
            for (row, &nrm) in data.chunks_mut(c).zip(&norms) {
                let d = nrm.max(eps);
                row.iter_mut().for_each(|e| *e /= d);
            }
        }
        let t = out(v.shape(), data);
        self.push_op(t, Op::NormalizeRows { x, norms, eps }, "normalize_rows")
    }

    /// Divides row `i` of `x: [N, M]` by `v[i]`, with `v: [N, 1]`.
    pub fn div_rows(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (n, c) = {
            let s = self.expect_rank(x, 2, "div_rows")?;
            (s[0], s[1])
        };
        if self.shape(v) != [n, 1] {
            return Err(dim_err!("div_rows divisor must be [{n}, 1], got {:?}", self.shape(v)));
        }
        let vv = self.value(v).data();
        let mut data = self.value(x).data().to_vec();
        if c > 0 {
            for (row, &d) in data.chunks_mut(c).zip(vv) {
                row.iter_mut().for_each(|e| *e /= d);
            }
        }
        self.push_op(out(&[n, c], data), Op::DivRows(x, v), "div_rows")
    }

    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c) = {
            let s = self.expect_rank(x, 2, "row_sum")?;
            (s[0], s[1])
        };
        let data = self.value(x).data().chunks(c.max(1)).map(|r| r.iter().sum()).collect();
        self.push_op(out(&[n, 1], data), Op::RowSum(x), "row_sum")
    }

    /// Minimum of each row, `[N, M] → [N, 1]`; ties resolve to the first index.
    pub fn row_min(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c) = {
            let s = self.expect_rank(x, 2, "row_min")?;
            (s[0], s[1])
        };
        if c == 0 {
            return Err(dim_err!("row_min over zero columns"));
        }
        let mut arg = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n);
        for row in self.value(x).data().chunks(c) {
            let (j, v) = row
                .iter()
                .enumerate()
                .fold((0, row[0]), |(bj, bv), (j, &v)| if v < bv { (j, v) } else { (bj, bv) });
            arg.push(j);
            data.push(v);
        }
        self.push_op(out(&[n, 1], data), Op::RowMin { x, arg }, "row_min")
    }

    /// Maximum down each column, `[N, M] → [1, M]`; ties resolve to the first row.
    pub fn col_max(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c) = {
            let s = self.expect_rank(x, 2, "col_max")?;
            (s[0], s[1])
        };
        if n == 0 {
            return Err(dim_err!("col_max over zero rows"));
        }
        let v = self.value(x).data();
        let mut arg = vec![0usize; c];
        let mut data = v[..c].to_vec();
        for r in 1..n {
            for j in 0..c {
                if v[r * c + j] > data[j] {
                    data[j] = v[r * c + j];
                    arg[j] = r;
                }
            }
        }
        self.push_op(out(&[1, c], data), Op::ColMax { x, arg }, "col_max")
    }

    /// Gathers the listed rows of an `[N, M]` matrix.
    pub fn select_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let (n, c) = {
            let s = self.expect_rank(x, 2, "select_rows")?;
            (s[0], s[1])
        };
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(dim_err!("select_rows index {r} out of range for {n} rows"));
            }
            data.extend_from_slice(&v[r * c..(r + 1) * c]);
        }
        let t = out(&[rows.len(), c], data);
        self.push_op(t, Op::SelectRows { x, rows: rows.to_vec() }, "select_rows")
    }
}

fn row_norms(data: &[f64], c: usize) -> Vec<f64> {
    if c == 0 {
        return vec![0.0; 0];
    }
    data.chunks(c)
        .map(|r| libm::sqrt(r.iter().map(|v| v * v).sum::<f64>()))
        .collect()
}
