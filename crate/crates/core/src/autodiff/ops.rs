//! Op table: forward evaluation and vector-Jacobian products.

use crate::error::AutodiffError;
use crate::tensor::Tensor;

/// Operations available in the computation graph.
///
/// Broadcasting is limited to scalar-times-tensor ([`Op::MulScalar`]) and
/// row-wise bias add ([`Op::AddBias`]); everything else requires exact
/// shapes, which keeps the correctness surface small.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Leaf node holding a bound value.
    Input,
    /// Select rows of a `[t,d]` matrix by index; duplicates allowed.
    GatherRows { indices: Vec<usize> },
    /// Row `i` of a matrix as a vector.
    Row(usize),
    /// Column `j` of a matrix as a vector.
    Col(usize),
    /// Element `i` of a vector as a scalar.
    Index(usize),
    /// Stack vectors (one row each) and matrices vertically.
    ConcatRows,
    /// Stack vectors (one column each) and matrices horizontally.
    ConcatCols,
    /// Columns `[start, start+len)` of a matrix.
    SliceCols { start: usize, len: usize },
    Transpose,
    /// `[m,k] x [k,n] -> [m,n]`, or `[m,k] x [k] -> [m]`.
    MatMul,
    /// Inner product of two equal-length vectors.
    Dot,
    Add,
    Sub,
    /// Elementwise product over identical shapes.
    Mul,
    /// Elementwise quotient over identical shapes.
    Div,
    /// Tensor times a one-element scalar node.
    MulScalar,
    /// Multiply by a compile-time constant.
    Scale(f64),
    /// Add a compile-time constant elementwise.
    AddConst(f64),
    /// `[m,d] + [d]` broadcast over rows.
    AddBias,
    /// Softmax over a vector.
    Softmax,
    /// Softmax over each row of a matrix.
    SoftmaxRows,
    /// Numerically stable `log(softmax(x))` over a vector.
    LogSoftmax,
    Relu,
    Sigmoid,
    Sqrt,
    Log,
    /// Mean of all elements, as a scalar.
    Mean,
    /// Sum of all elements, as a scalar.
    Sum,
    /// Euclidean norm of all elements, as a scalar.
    L2Norm,
    /// Gradient reversal: identity forward, gradient scaled by `-lambda`.
    Grl(f64),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::GatherRows { .. } => "gather_rows",
            Op::Row(_) => "row",
            Op::Col(_) => "col",
            Op::Index(_) => "index",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Transpose => "transpose",
            Op::MatMul => "matmul",
            Op::Dot => "dot",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MulScalar => "mul_scalar",
            Op::Scale(_) => "scale",
            Op::AddConst(_) => "add_const",
            Op::AddBias => "add_bias",
            Op::Softmax => "softmax",
            Op::SoftmaxRows => "softmax_rows",
            Op::LogSoftmax => "log_softmax",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Sqrt => "sqrt",
            Op::Log => "log",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::L2Norm => "l2norm",
            Op::Grl(_) => "grl",
        }
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn want_matrix<'a>(op: &'static str, t: &'a Tensor) -> Result<(usize, usize), AutodiffError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(mismatch(op, format!("expected matrix, got {s:?}"))),
    }
}

fn want_vector(op: &'static str, t: &Tensor) -> Result<usize, AutodiffError> {
    match t.shape() {
        [n] => Ok(*n),
        s => Err(mismatch(op, format!("expected vector, got {s:?}"))),
    }
}

fn want_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), AutodiffError> {
    if a.shape() != b.shape() {
        return Err(mismatch(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(x.iter()) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Forward-evaluate one op given its parent values.
pub fn eval(op: &Op, parents: &[&Tensor]) -> Result<Tensor, AutodiffError> {
    match op {
        Op::Input => Ok(parents
            .first()
            .map(|t| (*t).clone())
            .expect("input eval is handled by the graph")),
        Op::GatherRows { indices } => {
            let (rows, cols) = want_matrix("gather_rows", parents[0])?;
            let mut data = Vec::with_capacity(indices.len() * cols);
            for &i in indices {
                if i >= rows {
                    return Err(AutodiffError::IndexOutOfBounds {
                        op: "gather_rows",
                        index: i,
                        size: rows,
                    });
                }
                data.extend_from_slice(parents[0].row_slice(i));
            }
            Tensor::new(vec![indices.len(), cols], data)
        }
        Op::Row(i) => {
            let (rows, _) = want_matrix("row", parents[0])?;
            if *i >= rows {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "row",
                    index: *i,
                    size: rows,
                });
            }
            Ok(Tensor::vector(parents[0].row_slice(*i).to_vec()))
        }
        Op::Col(j) => {
            let (rows, cols) = want_matrix("col", parents[0])?;
            if *j >= cols {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "col",
                    index: *j,
                    size: cols,
                });
            }
            Ok(Tensor::vector(
                (0..rows).map(|i| parents[0].at2(i, *j)).collect(),
            ))
        }
        Op::Index(i) => {
            let n = want_vector("index", parents[0])?;
            if *i >= n {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "index",
                    index: *i,
                    size: n,
                });
            }
            Ok(Tensor::scalar(parents[0].data()[*i]))
        }
        Op::ConcatRows => {
            let cols = parents
                .first()
                .map(|t| t.cols())
                .ok_or_else(|| mismatch("concat_rows", "no parents".into()))?;
            let mut data = Vec::new();
            let mut rows = 0;
            for t in parents {
                match t.shape() {
                    [c] if *c == cols => {
                        data.extend_from_slice(t.data());
                        rows += 1;
                    }
                    [r, c] if *c == cols => {
                        data.extend_from_slice(t.data());
                        rows += r;
                    }
                    s => return Err(mismatch("concat_rows", format!("{s:?} with cols {cols}"))),
                }
            }
            Tensor::new(vec![rows, cols], data)
        }
        Op::ConcatCols => {
            let rows = match parents.first().map(|t| t.shape()) {
                Some([n]) => *n,
                Some([r, _]) => *r,
                _ => return Err(mismatch("concat_cols", "no parents".into())),
            };
            let widths: Vec<usize> = parents
                .iter()
                .map(|t| match t.shape() {
                    [_] => Ok(1),
                    [_, c] => Ok(*c),
                    s => Err(mismatch("concat_cols", format!("{s:?}"))),
                })
                .collect::<Result<_, _>>()?;
            for t in parents {
                let r = match t.shape() {
                    [n] => *n,
                    [r, _] => *r,
                    _ => unreachable!(),
                };
                if r != rows {
                    return Err(mismatch("concat_cols", format!("rows {r} != {rows}")));
                }
            }
            let total: usize = widths.iter().sum();
            let mut data = vec![0.0; rows * total];
            let mut offset = 0;
            for (t, w) in parents.iter().zip(widths.iter()) {
                for i in 0..rows {
                    for j in 0..*w {
                        let v = if t.rank() == 1 {
                            t.data()[i]
                        } else {
                            t.at2(i, j)
                        };
                        data[i * total + offset + j] = v;
                    }
                }
                offset += w;
            }
            Tensor::new(vec![rows, total], data)
        }
        Op::SliceCols { start, len } => {
            let (rows, cols) = want_matrix("slice_cols", parents[0])?;
            if start + len > cols {
                return Err(AutodiffError::IndexOutOfBounds {
                    op: "slice_cols",
                    index: start + len,
                    size: cols,
                });
            }
            let mut data = Vec::with_capacity(rows * len);
            for i in 0..rows {
                let row = parents[0].row_slice(i);
                data.extend_from_slice(&row[*start..start + len]);
            }
            Tensor::new(vec![rows, *len], data)
        }
        Op::Transpose => {
            want_matrix("transpose", parents[0])?;
            Ok(parents[0].transposed())
        }
        Op::MatMul => {
            let (m, k) = want_matrix("matmul", parents[0])?;
            match parents[1].shape() {
                [k2, n] => {
                    if k != *k2 {
                        return Err(mismatch("matmul", format!("[{m},{k}] x [{k2},{n}]")));
                    }
                    Ok(parents[0].matmul(parents[1]))
                }
                [k2] => {
                    if k != *k2 {
                        return Err(mismatch("matmul", format!("[{m},{k}] x [{k2}]")));
                    }
                    let mut out = vec![0.0; m];
                    for i in 0..m {
                        out[i] = parents[0]
                            .row_slice(i)
                            .iter()
                            .zip(parents[1].data())
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                    Ok(Tensor::vector(out))
                }
                s => Err(mismatch("matmul", format!("rhs {s:?}"))),
            }
        }
        Op::Dot => {
            let n = want_vector("dot", parents[0])?;
            let n2 = want_vector("dot", parents[1])?;
            if n != n2 {
                return Err(mismatch("dot", format!("{n} vs {n2}")));
            }
            Ok(Tensor::scalar(parents[0].dot(parents[1])))
        }
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            want_same(op.name(), parents[0], parents[1])?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |a, b| a + b,
                Op::Sub => |a, b| a - b,
                Op::Mul => |a, b| a * b,
                _ => |a, b| a / b,
            };
            Tensor::new(
                parents[0].shape().to_vec(),
                parents[0]
                    .data()
                    .iter()
                    .zip(parents[1].data())
                    .map(|(a, b)| f(*a, *b))
                    .collect(),
            )
        }
        Op::MulScalar => {
            if !parents[1].is_scalar() {
                return Err(mismatch(
                    "mul_scalar",
                    format!("scalar operand has shape {:?}", parents[1].shape()),
                ));
            }
            Ok(parents[0].scaled(parents[1].item()))
        }
        Op::Scale(c) => Ok(parents[0].scaled(*c)),
        Op::AddConst(c) => Tensor::new(
            parents[0].shape().to_vec(),
            parents[0].data().iter().map(|v| v + c).collect(),
        ),
        Op::AddBias => {
            let (rows, cols) = want_matrix("add_bias", parents[0])?;
            let n = want_vector("add_bias", parents[1])?;
            if n != cols {
                return Err(mismatch("add_bias", format!("bias {n} vs cols {cols}")));
            }
            let mut data = parents[0].data().to_vec();
            for i in 0..rows {
                for j in 0..cols {
                    data[i * cols + j] += parents[1].data()[j];
                }
            }
            Tensor::new(vec![rows, cols], data)
        }
        Op::Softmax => {
            let n = want_vector("softmax", parents[0])?;
            let mut out = vec![0.0; n];
            softmax_slice(parents[0].data(), &mut out);
            Ok(Tensor::vector(out))
        }
        Op::SoftmaxRows => {
            let (rows, cols) = want_matrix("softmax_rows", parents[0])?;
            let mut data = vec![0.0; rows * cols];
            for i in 0..rows {
                softmax_slice(
                    parents[0].row_slice(i),
                    &mut data[i * cols..(i + 1) * cols],
                );
            }
            Tensor::new(vec![rows, cols], data)
        }
        Op::LogSoftmax => {
            let n = want_vector("log_softmax", parents[0])?;
            let x = parents[0].data();
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            Ok(Tensor::vector((0..n).map(|i| x[i] - lse).collect()))
        }
        Op::Relu => Tensor::new(
            parents[0].shape().to_vec(),
            parents[0].data().iter().map(|v| v.max(0.0)).collect(),
        ),
        Op::Sigmoid => Tensor::new(
            parents[0].shape().to_vec(),
            parents[0]
                .data()
                .iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect(),
        ),
        Op::Sqrt => Tensor::new(
            parents[0].shape().to_vec(),
            parents[0].data().iter().map(|v| v.sqrt()).collect(),
        ),
        Op::Log => Tensor::new(
            parents[0].shape().to_vec(),
            parents[0].data().iter().map(|v| v.ln()).collect(),
        ),
        Op::Mean => Ok(Tensor::scalar(
            parents[0].data().iter().sum::<f64>() / parents[0].len() as f64,
        )),
        Op::Sum => Ok(Tensor::scalar(parents[0].data().iter().sum())),
        Op::L2Norm => Ok(Tensor::scalar(parents[0].l2_norm())),
        Op::Grl(_) => Ok(parents[0].clone()),
    }
}

/// Vector-Jacobian product: contribution of `upstream` to each parent's
/// gradient. `grl_identity` makes the gradient-reversal node behave as the
/// identity (used by the multiplier backward, which tracks forward behavior).
pub fn vjp(
    op: &Op,
    parents: &[&Tensor],
    output: &Tensor,
    upstream: &Tensor,
    grl_identity: bool,
) -> Vec<Tensor> {
    match op {
        Op::Input => vec![],
        Op::GatherRows { indices } => {
            let mut g = Tensor::zeros(parents[0].shape());
            let cols = parents[0].cols();
            for (pos, &i) in indices.iter().enumerate() {
                let src = &upstream.data()[pos * cols..(pos + 1) * cols];
                let dst = &mut g.data_mut()[i * cols..(i + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![g]
        }
        Op::Row(i) => {
            let mut g = Tensor::zeros(parents[0].shape());
            let cols = parents[0].cols();
            g.data_mut()[i * cols..(i + 1) * cols].copy_from_slice(upstream.data());
            vec![g]
        }
        Op::Col(j) => {
            let mut g = Tensor::zeros(parents[0].shape());
            let cols = parents[0].cols();
            for i in 0..parents[0].rows() {
                g.data_mut()[i * cols + j] = upstream.data()[i];
            }
            vec![g]
        }
        Op::Index(i) => {
            let mut g = Tensor::zeros(parents[0].shape());
            g.data_mut()[*i] = upstream.item();
            vec![g]
        }
        Op::ConcatRows => {
            let cols = output.cols();
            let mut offset = 0;
            parents
                .iter()
                .map(|t| {
                    let r = if t.rank() == 1 { 1 } else { t.rows() };
                    let g = Tensor::new(
                        t.shape().to_vec(),
                        upstream.data()[offset * cols..(offset + r) * cols].to_vec(),
                    )
                    .expect("concat_rows grad shape");
                    offset += r;
                    g
                })
                .collect()
        }
        Op::ConcatCols => {
            let rows = output.rows();
            let total = output.cols();
            let mut offset = 0;
            parents
                .iter()
                .map(|t| {
                    let w = if t.rank() == 1 { 1 } else { t.cols() };
                    let mut g = Tensor::zeros(t.shape());
                    for i in 0..rows {
                        for j in 0..w {
                            let v = upstream.data()[i * total + offset + j];
                            if t.rank() == 1 {
                                g.data_mut()[i] = v;
                            } else {
                                g.data_mut()[i * w + j] = v;
                            }
                        }
                    }
                    offset += w;
                    g
                })
                .collect()
        }
        Op::SliceCols { start, len } => {
            let mut g = Tensor::zeros(parents[0].shape());
            let cols = parents[0].cols();
            for i in 0..parents[0].rows() {
                for j in 0..*len {
                    g.data_mut()[i * cols + start + j] = upstream.data()[i * len + j];
                }
            }
            vec![g]
        }
        Op::Transpose => vec![upstream.transposed()],
        Op::MatMul => {
            let a = parents[0];
            let b = parents[1];
            if b.rank() == 2 {
                vec![
                    upstream.matmul(&b.transposed()),
                    a.transposed().matmul(upstream),
                ]
            } else {
                // [m,k] x [k] -> [m]: gA = outer(g, b), gB = A^T g
                let (m, k) = (a.rows(), a.cols());
                let mut ga = vec![0.0; m * k];
                let mut gb = vec![0.0; k];
                for i in 0..m {
                    let gi = upstream.data()[i];
                    for j in 0..k {
                        ga[i * k + j] = gi * b.data()[j];
                        gb[j] += gi * a.data()[i * k + j];
                    }
                }
                vec![
                    Tensor::new(vec![m, k], ga).expect("matmul grad shape"),
                    Tensor::vector(gb),
                ]
            }
        }
        Op::Dot => {
            let g = upstream.item();
            vec![parents[1].scaled(g), parents[0].scaled(g)]
        }
        Op::Add => vec![upstream.clone(), upstream.clone()],
        Op::Sub => vec![upstream.clone(), upstream.scaled(-1.0)],
        Op::Mul => vec![
            elementwise(upstream, parents[1], |g, b| g * b),
            elementwise(upstream, parents[0], |g, a| g * a),
        ],
        Op::Div => {
            let b = parents[1];
            vec![
                elementwise(upstream, b, |g, b| g / b),
                {
                    let mut t = Tensor::zeros(b.shape());
                    for i in 0..b.len() {
                        t.data_mut()[i] =
                            -upstream.data()[i] * output.data()[i] / b.data()[i];
                    }
                    t
                },
            ]
        }
        Op::MulScalar => {
            let s = parents[1].item();
            vec![
                upstream.scaled(s),
                Tensor::scalar(upstream.dot(parents[0])),
            ]
        }
        Op::Scale(c) => vec![upstream.scaled(*c)],
        Op::AddConst(_) => vec![upstream.clone()],
        Op::AddBias => {
            let (rows, cols) = (parents[0].rows(), parents[0].cols());
            let mut gb = vec![0.0; cols];
            for i in 0..rows {
                for j in 0..cols {
                    gb[j] += upstream.data()[i * cols + j];
                }
            }
            vec![upstream.clone(), Tensor::vector(gb)]
        }
        Op::Softmax => vec![softmax_vjp(output.data(), upstream.data())],
        Op::SoftmaxRows => {
            let (rows, cols) = (output.rows(), output.cols());
            let mut g = Tensor::zeros(output.shape());
            for i in 0..rows {
                let y = output.row_slice(i);
                let u = &upstream.data()[i * cols..(i + 1) * cols];
                let inner: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
                for j in 0..cols {
                    g.data_mut()[i * cols + j] = y[j] * (u[j] - inner);
                }
            }
            vec![g]
        }
        Op::LogSoftmax => {
            // d/dx_j = g_j - softmax(x)_j * sum(g)
            let gsum: f64 = upstream.data().iter().sum();
            let mut g = Tensor::zeros(output.shape());
            for j in 0..output.len() {
                let sm = output.data()[j].exp();
                g.data_mut()[j] = upstream.data()[j] - sm * gsum;
            }
            vec![g]
        }
        Op::Relu => vec![elementwise(upstream, parents[0], |g, x| {
            if x > 0.0 {
                g
            } else {
                0.0
            }
        })],
        Op::Sigmoid => vec![elementwise(upstream, output, |g, y| g * y * (1.0 - y))],
        Op::Sqrt => vec![elementwise(upstream, output, |g, y| {
            if y == 0.0 {
                0.0
            } else {
                g / (2.0 * y)
            }
        })],
        Op::Log => vec![elementwise(upstream, parents[0], |g, x| g / x)],
        Op::Mean => {
            let c = upstream.item() / parents[0].len() as f64;
            vec![Tensor::new(
                parents[0].shape().to_vec(),
                vec![c; parents[0].len()],
            )
            .expect("mean grad shape")]
        }
        Op::Sum => {
            let c = upstream.item();
            vec![Tensor::new(
                parents[0].shape().to_vec(),
                vec![c; parents[0].len()],
            )
            .expect("sum grad shape")]
        }
        Op::L2Norm => {
            let norm = output.item();
            if norm == 0.0 {
                vec![Tensor::zeros(parents[0].shape())]
            } else {
                vec![parents[0].scaled(upstream.item() / norm)]
            }
        }
        Op::Grl(lambda) => {
            if grl_identity {
                vec![upstream.clone()]
            } else {
                vec![upstream.scaled(-lambda)]
            }
        }
    }
}

fn elementwise(u: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let mut t = Tensor::zeros(u.shape());
    for i in 0..u.len() {
        t.data_mut()[i] = f(u.data()[i], other.data()[i]);
    }
    t
}

fn softmax_vjp(y: &[f64], u: &[f64]) -> Tensor {
    let inner: f64 = y.iter().zip(u).map(|(a, b)| a * b).sum();
    Tensor::vector(
        y.iter()
            .zip(u)
            .map(|(yj, uj)| yj * (uj - inner))
            .collect(),
    )
}
