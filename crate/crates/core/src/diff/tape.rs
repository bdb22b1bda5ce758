use std::collections::HashMap;

use super::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul {
        a: usize,
        b: usize,
        r: usize,
        k: usize,
        c: usize,
    },
    Transpose {
        a: usize,
        r: usize,
        c: usize,
    },
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    SliceCols {
        a: usize,
        start: usize,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    SumAxis {
        a: usize,
        axis: usize,
    },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Elu(usize),
    Log(usize),
    Exp(usize),
    Clip {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Softmax {
        a: usize,
        axis: usize,
    },
    LayerNorm {
        a: usize,
        inv_std: Vec<f64>,
    },
    PairwiseAdd {
        u: usize,
        v: usize,
        groups: usize,
        nu: usize,
        nv: usize,
        d: usize,
    },
    BlockMatMul {
        a: usize,
        b: usize,
        groups: usize,
        n: usize,
        d: usize,
    },
    Attention(Box<AttentionCache>),
}

#[derive(Debug)]
struct AttentionCache {
    q: usize,
    k: usize,
    v: usize,
    /// Total rows and rows per group; attention never crosses groups.
    rows: usize,
    n: usize,
    heads: usize,
    dk: usize,
    dv: usize,
    scale: f64,
    /// Row-stochastic attention weights, `heads × rows × n`.
    weights: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracks: bool,
}

/// Reverse-mode recording of tensor operations.
///
/// Every operation evaluates eagerly; nodes whose inputs track gradients keep
/// enough state for [`Tape::backward`] to replay the chain rule in reverse.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the tracked leaves of a tape.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    leaves: HashMap<Var, Vec<f64>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a non-parameter leaf; parameter gradients are under [`Gradients::param`].
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var).map(Vec::as_slice)
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }
}

/// `c ← α·a·b + β·c` for strided `m×k` and `k×n` operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    (m, k, n): (usize, usize, usize),
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access of a (m×k), b (k×n)
    // and the row-major m×n output.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a 2-D operand, got {s:?}"))),
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

    fn push(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        tracks: bool,
    ) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            tracks,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn tracks(&self, v: Var) -> bool {
        self.node(v).tracks
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// Records a leaf; it tracks gradients iff the tensor requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(
            "leaf",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: None },
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "constant",
                format!("{shape:?} vs {}", data.len()),
            ));
        }
        self.push(
            "constant",
            shape.to_vec(),
            data,
            Op::Leaf { param: None },
            false,
        )
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let t = store.get(id);
        self.push(
            "param",
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf { param: Some(id) },
            true,
        )
    }

    /// Copy of `a` that never propagates gradient.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a);
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push("detach", shape, value, Op::Leaf { param: None }, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape != nb.shape {
            return Err(Error::dim(
                name,
                format!("{:?} vs {:?}", na.shape, nb.shape),
            ));
        }
        let value = na
            .value
            .iter()
            .zip(&nb.value)
            .map(|(x, y)| f(*x, *y))
            .collect();
        let tracks = na.tracks || nb.tracks;
        let shape = na.shape.clone();
        self.push(name, shape, value, op, tracks)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a.0, b.0))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (r, c) = dims2(&self.node(a).shape, name)?;
        let (rr, rc) = dims2(&self.node(row).shape, name)?;
        if rr != 1 || rc != c {
            return Err(Error::dim(name, format!("row {rr}×{rc} against {r}×{c}")));
        }
        let (na, nr) = (self.node(a), self.node(row));
        let value = na
            .value
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(&nr.value).map(|(x, y)| f(*x, *y)))
            .collect();
        let tracks = na.tracks || nr.tracks;
        self.push(name, vec![r, c], value, op, tracks)
    }

    /// `a + row` with `row` (1×c) broadcast over every row of `a` (r×c).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("add_row", a, row, |x, y| x + y, Op::AddRow(a.0, row.0))
    }

    /// `a ⊙ row` with `row` (1×c) broadcast over every row of `a` (r×c).
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast("mul_row", a, row, |x, y| x * y, Op::MulRow(a.0, row.0))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let na = self.node(a);
        let value = na.value.iter().map(|x| f(*x)).collect();
        let (shape, tracks) = (na.shape.clone(), na.tracks);
        self.push(name, shape, value, op, tracks)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * s, Op::Scale(a.0, s))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.unary(
            "leaky_relu",
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a.0, slope),
        )
    }

    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "elu",
            a,
            |x| if x > 0.0 { x } else { x.exp_m1() },
            Op::Elu(a.0),
        )
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, f64::ln, Op::Log(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a.0))
    }

    /// Clamps into `[lo, hi]`; gradient is zero wherever the clamp is active.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::contract(format!(
                "clip interval [{lo}, {hi}] is empty"
            )));
        }
        self.unary("clip", a, |x| x.clamp(lo, hi), Op::Clip { a: a.0, lo, hi })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = dims2(&self.node(a).shape, "matmul")?;
        let (k2, c) = dims2(&self.node(b).shape, "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("{r}×{k} · {k2}×{c}")));
        }
        let mut value = vec![0.0; r * c];
        gemm(
            (r, k, c),
            &self.node(a).value,
            (k, 1),
            &self.node(b).value,
            (c, 1),
            0.0,
            &mut value,
        );
        let tracks = self.node(a).tracks || self.node(b).tracks;
        self.push(
            "matmul",
            vec![r, c],
            value,
            Op::MatMul {
                a: a.0,
                b: b.0,
                r,
                k,
                c,
            },
            tracks,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2(&self.node(a).shape, "transpose")?;
        let src = &self.node(a).value;
        let mut value = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                value[j * r + i] = src[i * c + j];
            }
        }
        let tracks = self.node(a).tracks;
        self.push(
            "transpose",
            vec![c, r],
            value,
            Op::Transpose { a: a.0, r, c },
            tracks,
        )
    }

    /// Concatenates 2-D operands along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no operands"))?;
        let (r0, c0) = dims2(&self.node(*first).shape, "concat")?;
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = dims2(&self.node(*p).shape, "concat")?;
            match axis {
                0 if c != c0 => return Err(Error::dim("concat", "column counts differ")),
                1 if r != r0 => return Err(Error::dim("concat", "row counts differ")),
                0 | 1 => {}
                _ => return Err(Error::dim("concat", format!("invalid axis {axis}"))),
            }
            dims.push((r, c));
        }
        let (shape, value) = if axis == 0 {
            let rows: usize = dims.iter().map(|d| d.0).sum();
            let value = parts
                .iter()
                .flat_map(|p| self.node(*p).value.iter().copied())
                .collect();
            (vec![rows, c0], value)
        } else {
            let cols: usize = dims.iter().map(|d| d.1).sum();
            let mut value = Vec::with_capacity(r0 * cols);
            for i in 0..r0 {
                for (p, (_, c)) in parts.iter().zip(&dims) {
                    value.extend_from_slice(&self.node(*p).value[i * c..(i + 1) * c]);
                }
            }
            (vec![r0, cols], value)
        };
        let tracks = parts.iter().any(|p| self.node(*p).tracks);
        let inputs = parts.iter().map(|p| p.0).collect();
        self.push("concat", shape, value, Op::Concat { inputs, axis }, tracks)
    }

    /// Columns `start..start + len` of a 2-D operand.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = dims2(&self.node(a).shape, "slice_cols")?;
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {c}")));
        }
        let src = &self.node(a).value;
        let value = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let tracks = self.node(a).tracks;
        self.push(
            "slice_cols",
            vec![r, len],
            value,
            Op::SliceCols { a: a.0, start },
            tracks,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let na = self.node(a);
        let numel: usize = shape.iter().product();
        if numel != na.value.len() {
            return Err(Error::dim("reshape", format!("{:?} → {shape:?}", na.shape)));
        }
        let (value, tracks) = (na.value.clone(), na.tracks);
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a.0), tracks)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a);
        let s = na.value.iter().sum();
        let tracks = na.tracks;
        self.push("sum", vec![1], vec![s], Op::Sum(a.0), tracks)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let na = self.node(a);
        if na.value.is_empty() {
            return Err(Error::dim("mean", "empty operand"));
        }
        let s = na.value.iter().sum::<f64>() / na.value.len() as f64;
        let tracks = na.tracks;
        self.push("mean", vec![1], vec![s], Op::Mean(a.0), tracks)
    }

    /// Sum over `axis` of a 2-D operand, keeping that axis with size 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = dims2(&self.node(a).shape, "sum_axis")?;
        let src = &self.node(a).value;
        let (shape, value) = match axis {
            0 => {
                let mut v = vec![0.0; c];
                for row in src.chunks(c) {
                    v.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                }
                (vec![1, c], v)
            }
            1 => (
                vec![r, 1],
                src.chunks(c).map(|row| row.iter().sum()).collect(),
            ),
            _ => return Err(Error::dim("sum_axis", format!("invalid axis {axis}"))),
        };
        let tracks = self.node(a).tracks;
        self.push(
            "sum_axis",
            shape,
            value,
            Op::SumAxis { a: a.0, axis },
            tracks,
        )
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = dims2(&self.node(a).shape, "mean_axis")?;
        let count = if axis == 0 { r } else { c };
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / count.max(1) as f64)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (r, c) = dims2(&self.node(a).shape, "softmax")?;
        if axis > 1 {
            return Err(Error::dim("softmax", format!("invalid axis {axis}")));
        }
        let mut value = self.node(a).value.clone();
        let (outer, inner, stride_o, stride_i) = if axis == 1 {
            (r, c, c, 1)
        } else {
            (c, r, 1, c)
        };
        for o in 0..outer {
            let idx = |t: usize| o * stride_o + t * stride_i;
            let max = (0..inner)
                .map(|t| value[idx(t)])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for t in 0..inner {
                let e = (value[idx(t)] - max).exp();
                value[idx(t)] = e;
                z += e;
            }
            for t in 0..inner {
                value[idx(t)] /= z;
            }
        }
        let tracks = self.node(a).tracks;
        self.push(
            "softmax",
            vec![r, c],
            value,
            Op::Softmax { a: a.0, axis },
            tracks,
        )
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, c) = dims2(&self.node(a).shape, "layer_norm")?;
        let src = &self.node(a).value;
        let mut value = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                value[i * c + j] = (row[j] - mu) * is;
            }
        }
        let tracks = self.node(a).tracks;
        self.push(
            "layer_norm",
            vec![r, c],
            value,
            Op::LayerNorm { a: a.0, inv_std },
            tracks,
        )
    }

    /// Row `i·nv + j` of the result is `u[i] + v[j]`; shapes `nu×d`, `nv×d` → `(nu·nv)×d`.
    pub fn pairwise_add(&mut self, u: Var, v: Var) -> Result<Var> {
        self.pairwise_add_grouped(u, v, 1)
    }

    /// [`Tape::pairwise_add`] applied independently to `groups` equal row blocks of `u` and `v`.
    pub fn pairwise_add_grouped(&mut self, u: Var, v: Var, groups: usize) -> Result<Var> {
        let (ru, d) = dims2(&self.node(u).shape, "pairwise_add")?;
        let (rv, d2) = dims2(&self.node(v).shape, "pairwise_add")?;
        if d != d2 || groups == 0 || ru % groups != 0 || rv % groups != 0 {
            return Err(Error::dim(
                "pairwise_add",
                format!("{ru}×{d} and {rv}×{d2} in {groups} groups"),
            ));
        }
        let (nu, nv) = (ru / groups, rv / groups);
        let (uv, vv) = (&self.node(u).value, &self.node(v).value);
        let mut value = Vec::with_capacity(groups * nu * nv * d);
        for g in 0..groups {
            for i in 0..nu {
                let ui = &uv[(g * nu + i) * d..(g * nu + i + 1) * d];
                for j in 0..nv {
                    let vj = &vv[(g * nv + j) * d..(g * nv + j + 1) * d];
                    value.extend(ui.iter().zip(vj).map(|(a, b)| a + b));
                }
            }
        }
        let tracks = self.node(u).tracks || self.node(v).tracks;
        self.push(
            "pairwise_add",
            vec![groups * nu * nv, d],
            value,
            Op::PairwiseAdd {
                u: u.0,
                v: v.0,
                groups,
                nu,
                nv,
                d,
            },
            tracks,
        )
    }

    /// Block-diagonal product: for each of the row blocks of size `n`,
    /// `out_g = a_g · b_g` with `a_g` of shape `n×n` and `b_g` of shape `n×d`.
    pub fn block_matmul(&mut self, a: Var, b: Var, n: usize) -> Result<Var> {
        let (ra, ca) = dims2(&self.node(a).shape, "block_matmul")?;
        let (rb, d) = dims2(&self.node(b).shape, "block_matmul")?;
        if n == 0 || ca != n || ra != rb || ra % n != 0 {
            return Err(Error::dim(
                "block_matmul",
                format!("{ra}×{ca} · {rb}×{d} in blocks of {n}"),
            ));
        }
        let groups = ra / n;
        let mut value = vec![0.0; ra * d];
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        for g in 0..groups {
            let (ao, bo) = (g * n * n, g * n * d);
            gemm(
                (n, n, d),
                &av[ao..ao + n * n],
                (n, 1),
                &bv[bo..bo + n * d],
                (d, 1),
                0.0,
                &mut value[bo..bo + n * d],
            );
        }
        let tracks = self.node(a).tracks || self.node(b).tracks;
        self.push(
            "block_matmul",
            vec![ra, d],
            value,
            Op::BlockMatMul {
                a: a.0,
                b: b.0,
                groups,
                n,
                d,
            },
            tracks,
        )
    }

    /// Multi-head scaled dot-product attention over the rows of its operands.
    ///
    /// `q`, `k` are `n × heads·dk`, `v` is `n × heads·dv`; column block `h` of
    /// each belongs to head `h`. Each head computes
    /// `softmax(q_h k_hᵀ / √dk + mask) v_h` row-wise, and head outputs are
    /// concatenated in head order. `mask`, when given, is an `n × n` additive
    /// bias (0 to keep, a large negative number to suppress).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&[f64]>,
    ) -> Result<Var> {
        let n = self.node(q).shape.first().copied().unwrap_or(0);
        self.attention_grouped(q, k, v, heads, n, mask)
    }

    /// [`Tape::attention`] restricted to consecutive row blocks of size `n`;
    /// the `n × n` mask applies to every block.
    pub fn attention_grouped(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        n: usize,
        mask: Option<&[f64]>,
    ) -> Result<Var> {
        let (rows, qw) = dims2(&self.node(q).shape, "attention")?;
        let (nk, kw) = dims2(&self.node(k).shape, "attention")?;
        let (nv, vw) = dims2(&self.node(v).shape, "attention")?;
        if heads == 0
            || qw != kw
            || rows != nk
            || rows != nv
            || qw % heads != 0
            || vw % heads != 0
            || n == 0
            || rows % n != 0
        {
            return Err(Error::dim(
                "attention",
                format!("q {rows}×{qw}, k {nk}×{kw}, v {nv}×{vw}, heads {heads}, group {n}"),
            ));
        }
        if let Some(m) = mask {
            if m.len() != n * n {
                return Err(Error::dim("attention", "mask must be n×n"));
            }
        }
        let (dk, dv) = (qw / heads, vw / heads);
        let scale = 1.0 / (dk as f64).sqrt();
        let (qv, kv, vv) = (
            &self.node(q).value,
            &self.node(k).value,
            &self.node(v).value,
        );
        let mut weights = vec![0.0; heads * rows * n];
        let mut out = vec![0.0; rows * vw];
        for h in 0..heads {
            let w = &mut weights[h * rows * n..(h + 1) * rows * n];
            for i in 0..rows {
                let base = i - i % n;
                let qi = &qv[i * qw + h * dk..i * qw + (h + 1) * dk];
                let row = &mut w[i * n..(i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    let kj = &kv[(base + j) * kw + h * dk..(base + j) * kw + (h + 1) * dk];
                    let mut s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    if let Some(m) = mask {
                        s += m[(i % n) * n + j];
                    }
                    row[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
                let orow = &mut out[i * vw + h * dv..i * vw + (h + 1) * dv];
                for j in 0..n {
                    let a = row[j];
                    let vj = &vv[(base + j) * vw + h * dv..(base + j) * vw + (h + 1) * dv];
                    orow.iter_mut().zip(vj).for_each(|(o, x)| *o += a * x);
                }
            }
        }
        let tracks = self.node(q).tracks || self.node(k).tracks || self.node(v).tracks;
        let cache = AttentionCache {
            q: q.0,
            k: k.0,
            v: v.0,
            rows,
            n,
            heads,
            dk,
            dv,
            scale,
            weights,
        };
        self.push(
            "attention",
            vec![rows, vw],
            out,
            Op::Attention(Box::new(cache)),
            tracks,
        )
    }

    /// Attention weights (`heads × rows × n`) of an [`Tape::attention`] node.
    pub fn attention_weights(&self, v: Var) -> Option<&[f64]> {
        match &self.node(v).op {
            Op::Attention(c) => Some(&c.weights),
            _ => None,
        }
    }

    /// Propagates d`loss`/d`leaf` for every tracked leaf, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes;
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::contract("loss does not belong to this tape"))?;
        if root.value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &nodes[idx];
            if !node.tracks {
                continue;
            }
            let y = &node.value;
            let mut slot = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
                if nodes[i].tracks {
                    let len = nodes[i].value.len();
                    f(grads[i].get_or_insert_with(|| vec![0.0; len]));
                }
            };
            match &node.op {
                Op::Leaf { param } => match param {
                    Some(p) => out.params.push((*p, g)),
                    None => {
                        out.leaves.insert(Var(idx), g);
                    }
                },
                Op::Add(a, b) => {
                    slot(*a, &mut |ga| axpy(ga, &g, 1.0));
                    slot(*b, &mut |gb| axpy(gb, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    slot(*a, &mut |ga| axpy(ga, &g, 1.0));
                    slot(*b, &mut |gb| axpy(gb, &g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    slot(*a, &mut |ga| {
                        for t in 0..g.len() {
                            ga[t] += g[t] * vb[t];
                        }
                    });
                    slot(*b, &mut |gb| {
                        for t in 0..g.len() {
                            gb[t] += g[t] * va[t];
                        }
                    });
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    slot(*a, &mut |ga| {
                        for t in 0..g.len() {
                            ga[t] += g[t] / vb[t];
                        }
                    });
                    slot(*b, &mut |gb| {
                        for t in 0..g.len() {
                            gb[t] -= g[t] * va[t] / (vb[t] * vb[t]);
                        }
                    });
                }
                Op::AddRow(a, row) => {
                    let c = nodes[*row].value.len();
                    slot(*a, &mut |ga| axpy(ga, &g, 1.0));
                    slot(*row, &mut |gr| {
                        for chunk in g.chunks(c) {
                            axpy(gr, chunk, 1.0);
                        }
                    });
                }
                Op::MulRow(a, row) => {
                    let (va, vr) = (&nodes[*a].value, &nodes[*row].value);
                    let c = vr.len();
                    slot(*a, &mut |ga| {
                        for t in 0..g.len() {
                            ga[t] += g[t] * vr[t % c];
                        }
                    });
                    slot(*row, &mut |gr| {
                        for t in 0..g.len() {
                            gr[t % c] += g[t] * va[t];
                        }
                    });
                }
                Op::Scale(a, s) => slot(*a, &mut |ga| axpy(ga, &g, *s)),
                Op::AddScalar(a) => slot(*a, &mut |ga| axpy(ga, &g, 1.0)),
                Op::MatMul { a, b, r, k, c } => {
                    let (r, k, c) = (*r, *k, *c);
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    // dA = dC · Bᵀ
                    slot(*a, &mut |ga| {
                        gemm((r, c, k), &g, (c, 1), vb, (1, c), 1.0, ga)
                    });
                    // dB = Aᵀ · dC
                    slot(*b, &mut |gb| {
                        gemm((k, r, c), va, (1, k), &g, (c, 1), 1.0, gb)
                    });
                }
                Op::Transpose { a, r, c } => {
                    let (r, c) = (*r, *c);
                    slot(*a, &mut |ga| {
                        for i in 0..r {
                            for j in 0..c {
                                ga[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
                Op::Concat { inputs, axis } => {
                    let cols = node.shape[1];
                    let mut offset = 0;
                    for &p in inputs {
                        let (pr, pc) = (nodes[p].shape[0], nodes[p].shape[1]);
                        if *axis == 0 {
                            let span = pr * pc;
                            slot(p, &mut |gp| axpy(gp, &g[offset..offset + span], 1.0));
                            offset += span;
                        } else {
                            slot(p, &mut |gp| {
                                for i in 0..pr {
                                    let src = &g[i * cols + offset..i * cols + offset + pc];
                                    axpy(&mut gp[i * pc..(i + 1) * pc], src, 1.0);
                                }
                            });
                            offset += pc;
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    let (r, len) = (node.shape[0], node.shape[1]);
                    let c = nodes[*a].shape[1];
                    slot(*a, &mut |ga| {
                        for i in 0..r {
                            axpy(
                                &mut ga[i * c + start..i * c + start + len],
                                &g[i * len..(i + 1) * len],
                                1.0,
                            );
                        }
                    });
                }
                Op::Reshape(a) => slot(*a, &mut |ga| axpy(ga, &g, 1.0)),
                Op::Sum(a) => slot(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
                Op::Mean(a) => {
                    let inv = 1.0 / nodes[*a].value.len() as f64;
                    slot(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] * inv));
                }
                Op::SumAxis { a, axis } => {
                    let c = nodes[*a].shape[1];
                    slot(*a, &mut |ga| {
                        for (t, x) in ga.iter_mut().enumerate() {
                            *x += if *axis == 0 { g[t % c] } else { g[t / c] };
                        }
                    });
                }
                Op::Sigmoid(a) => slot(*a, &mut |ga| {
                    for t in 0..g.len() {
                        ga[t] += g[t] * y[t] * (1.0 - y[t]);
                    }
                }),
                Op::Tanh(a) => slot(*a, &mut |ga| {
                    for t in 0..g.len() {
                        ga[t] += g[t] * (1.0 - y[t] * y[t]);
                    }
                }),
                Op::Relu(a) => {
                    let x = &nodes[*a].value;
                    slot(*a, &mut |ga| {
                        for t in 0..g.len() {
                            if x[t] > 0.0 {
                                ga[t] += g[t];
                            }
                        }
                    });
                }
                Op::LeakyRelu(a, slope) => {
                    let x = &nodes[*a].value;
                    slot(*a, &mut |ga| {
                        for t in 0..g.len() {
                            ga[t] += if x[t] > 0.0 { g[t] } else { slope * g[t] };
                        }
                    });
                }
                Op::Elu(a) => {
                    let x = &nodes[*a].value;
                    slot(*a, &mut |ga| {
                        for t in 0..g.len() {
                            ga[t] += if x[t] > 0.0 {
                                g[t]
                            } else {
                                g[t] * (y[t] + 1.0)
                            };
                        }
                    });
                }
                Op::Log(a) => {
                    let x = &nodes[*a].value;
                    slot(*a, &mut |ga| {
                        for t in 0..g.len() {
                            ga[t] += g[t] / x[t];
                        }
                    });
                }
                Op::Exp(a) => slot(*a, &mut |ga| {
                    for t in 0..g.len() {
                        ga[t] += g[t] * y[t];
                    }
                }),
                Op::Clip { a, lo, hi } => {
                    let x = &nodes[*a].value;
                    slot(*a, &mut |ga| {
                        for t in 0..g.len() {
                            if x[t] >= *lo && x[t] <= *hi {
                                ga[t] += g[t];
                            }
                        }
                    });
                }
                Op::Softmax { a, axis } => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    let (outer, inner, so, si) = if *axis == 1 {
                        (r, c, c, 1)
                    } else {
                        (c, r, 1, c)
                    };
                    slot(*a, &mut |ga| {
                        for o in 0..outer {
                            let idx = |t: usize| o * so + t * si;
                            let dot: f64 = (0..inner).map(|t| g[idx(t)] * y[idx(t)]).sum();
                            for t in 0..inner {
                                ga[idx(t)] += y[idx(t)] * (g[idx(t)] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { a, inv_std } => {
                    let (r, c) = (node.shape[0], node.shape[1]);
                    slot(*a, &mut |ga| {
                        for i in 0..r {
                            let gy = &g[i * c..(i + 1) * c];
                            let yy = &y[i * c..(i + 1) * c];
                            let mg = gy.iter().sum::<f64>() / c as f64;
                            let mgy = gy.iter().zip(yy).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                            for j in 0..c {
                                ga[i * c + j] += inv_std[i] * (gy[j] - mg - yy[j] * mgy);
                            }
                        }
                    });
                }
                Op::PairwiseAdd {
                    u,
                    v,
                    groups,
                    nu,
                    nv,
                    d,
                } => {
                    let (groups, nu, nv, d) = (*groups, *nu, *nv, *d);
                    slot(*u, &mut |gu| {
                        for gi in 0..groups {
                            for i in 0..nu {
                                let dst = &mut gu[(gi * nu + i) * d..(gi * nu + i + 1) * d];
                                for j in 0..nv {
                                    let r = (gi * nu + i) * nv + j;
                                    axpy(dst, &g[r * d..(r + 1) * d], 1.0);
                                }
                            }
                        }
                    });
                    slot(*v, &mut |gv| {
                        for gi in 0..groups {
                            for i in 0..nu {
                                for j in 0..nv {
                                    let r = (gi * nu + i) * nv + j;
                                    let dst = &mut gv[(gi * nv + j) * d..(gi * nv + j + 1) * d];
                                    axpy(dst, &g[r * d..(r + 1) * d], 1.0);
                                }
                            }
                        }
                    });
                }
                Op::BlockMatMul { a, b, groups, n, d } => {
                    let (groups, n, d) = (*groups, *n, *d);
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    slot(*a, &mut |ga| {
                        for gi in 0..groups {
                            let (ao, bo) = (gi * n * n, gi * n * d);
                            gemm(
                                (n, d, n),
                                &g[bo..bo + n * d],
                                (d, 1),
                                &vb[bo..bo + n * d],
                                (1, d),
                                1.0,
                                &mut ga[ao..ao + n * n],
                            );
                        }
                    });
                    slot(*b, &mut |gb| {
                        for gi in 0..groups {
                            let (ao, bo) = (gi * n * n, gi * n * d);
                            gemm(
                                (n, n, d),
                                &va[ao..ao + n * n],
                                (1, n),
                                &g[bo..bo + n * d],
                                (d, 1),
                                1.0,
                                &mut gb[bo..bo + n * d],
                            );
                        }
                    });
                }
                Op::Attention(cache) => {
                    let AttentionCache {
                        q,
                        k,
                        v,
                        rows,
                        n,
                        heads,
                        dk,
                        dv,
                        scale,
                        weights,
                    } = &**cache;
                    let (rows, n, heads, dk, dv, scale) = (*rows, *n, *heads, *dk, *dv, *scale);
                    let (qw, vw) = (heads * dk, heads * dv);
                    let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                    // Score gradients dS = P ⊙ (dP − rowsum(dP ⊙ P)), dP = dO · Vᵀ.
                    let mut ds = vec![0.0; heads * rows * n];
                    let mut dp = vec![0.0; n];
                    for h in 0..heads {
                        let w = &weights[h * rows * n..(h + 1) * rows * n];
                        for i in 0..rows {
                            let base = i - i % n;
                            let go = &g[i * vw + h * dv..i * vw + (h + 1) * dv];
                            for (j, d) in dp.iter_mut().enumerate() {
                                let vj =
                                    &vv[(base + j) * vw + h * dv..(base + j) * vw + (h + 1) * dv];
                                *d = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                            }
                            let dot: f64 = (0..n).map(|j| dp[j] * w[i * n + j]).sum();
                            for j in 0..n {
                                ds[h * rows * n + i * n + j] = w[i * n + j] * (dp[j] - dot) * scale;
                            }
                        }
                    }
                    slot(*v, &mut |gv| {
                        for h in 0..heads {
                            let w = &weights[h * rows * n..(h + 1) * rows * n];
                            for i in 0..rows {
                                let base = i - i % n;
                                let go = &g[i * vw + h * dv..i * vw + (h + 1) * dv];
                                for j in 0..n {
                                    let a = w[i * n + j];
                                    let r = base + j;
                                    axpy(&mut gv[r * vw + h * dv..r * vw + (h + 1) * dv], go, a);
                                }
                            }
                        }
                    });
                    slot(*q, &mut |gq| {
                        for h in 0..heads {
                            for i in 0..rows {
                                let base = i - i % n;
                                for j in 0..n {
                                    let s = ds[h * rows * n + i * n + j];
                                    let r = base + j;
                                    let kj = &kv[r * qw + h * dk..r * qw + (h + 1) * dk];
                                    axpy(&mut gq[i * qw + h * dk..i * qw + (h + 1) * dk], kj, s);
                                }
                            }
                        }
                    });
                    slot(*k, &mut |gk| {
                        for h in 0..heads {
                            for i in 0..rows {
                                let base = i - i % n;
                                let qi = &qv[i * qw + h * dk..i * qw + (h + 1) * dk];
                                for j in 0..n {
                                    let s = ds[h * rows * n + i * n + j];
                                    let r = base + j;
                                    axpy(&mut gk[r * qw + h * dk..r * qw + (h + 1) * dk], qi, s);
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and adds the parameter gradients into `store`.
    pub fn backward_into(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        store.accumulate(&grads)
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
