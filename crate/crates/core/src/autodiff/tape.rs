//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Every operation appends a node holding its value and whatever it needs for
//! the adjoint. [`Tape::backward`] walks the nodes in exact reverse creation
//! order, so the tape is acyclic and topologically sorted by construction.
//! A tape supports a single backward pass.

use std::collections::{BTreeMap, HashMap};

use num_complex::Complex64;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::fft;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
pub const LAYER_NORM_EPS: f64 = 1e-5;

pub(crate) enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    RepeatCols(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    FftConv {
        kernel: Var,
        signal: Var,
        batch: usize,
        len: usize,
        n: usize,
        kspec: Vec<Vec<Complex64>>,
        xspec: Vec<Vec<Vec<Complex64>>>,
    },
    GeomPowers {
        lam_re: Var,
        lam_im: Var,
        len: usize,
    },
    RealizeContract {
        w_re: Var,
        w_im: Var,
        powers: Var,
        factor: f64,
        len: usize,
    },
    CarryReadout {
        c_re: Var,
        c_im: Var,
        z: Vec<Complex64>,
        factor: f64,
    },
    Sum(Var),
    SqError {
        pred: Var,
        target: Var,
        weights: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    finished: bool,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [.., c] => (shape[..shape.len() - 1].iter().product(), *c),
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone())
            .expect("node shape matches value")
            .with_requires_grad(false)
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        match self.value(v) {
            [x] => Ok(*x),
            _ => Err(Error::shape("Tape::item", format!("shape {:?}", self.shape(v)))),
        }
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Registers a named parameter. Repeated registrations of the same name
    /// return the same node. Parameters with `requires_grad == false` are
    /// treated as constants and never appear in [`Gradients`].
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(name.to_string()),
            t.requires_grad(),
        );
        self.params.insert(name.to_string(), v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), value, mk, ng))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, mk: Op) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), value, mk, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| s * x, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), &mut out, false);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn row_vector_check(&self, op: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        let (m, n) = rows_cols(self.shape(x));
        if self.shape(v) != [n] {
            return Err(Error::shape(
                op,
                format!("{:?} with row vector {:?}", self.shape(x), self.shape(v)),
            ));
        }
        Ok((m, n))
    }

    /// Adds a length-`n` vector to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.row_vector_check("add_row", x, bias)?;
        let b = self.value(bias);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(self.shape(x).to_vec(), value, Op::AddRow(x, bias), ng))
    }

    /// Multiplies every row elementwise by a length-`n` vector.
    pub fn mul_row(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (_, n) = self.row_vector_check("mul_row", x, scale)?;
        let s = self.value(scale);
        let value = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * s[i % n])
            .collect();
        let ng = self.ng(x) || self.ng(scale);
        Ok(self.push(self.shape(x).to_vec(), value, Op::MulRow(x, scale), ng))
    }

    /// `[m] -> [m, n]`, copying each entry across its row.
    pub fn repeat_cols(&mut self, x: Var, n: usize) -> Result<Var> {
        if self.shape(x).len() != 1 {
            return Err(Error::shape("repeat_cols", format!("{:?}", self.shape(x))));
        }
        let m = self.shape(x)[0];
        let value = self
            .value(x)
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        let ng = self.ng(x);
        Ok(self.push(vec![m, n], value, Op::RepeatCols(x), ng))
    }

    /// Per-row normalization over the feature axis with learned scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.row_vector_check("layer_norm", x, gamma)?;
        self.row_vector_check("layer_norm", x, beta)?;
        let xs = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Inverted dropout with a counter-based mask: element `i` is dropped
    /// when `hash(seed, i)` falls below `p`. Identity when `!train` or `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {p}")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|i| if unit_hash(seed, i as u64) < p { 0.0 } else { keep })
            .collect();
        let value = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let ng = self.ng(x);
        Ok(self.push(self.shape(x).to_vec(), value, Op::Dropout { x, mask }, ng))
    }

    /// Causal per-channel convolution along time.
    ///
    /// `kernel` is `[H, K]`, `signal` is `[batch * len, H]` with row
    /// `b * len + t`. Output row `(b, t)`, channel `h` is
    /// `sum_{i < min(K, t + 1)} kernel[h, i] * signal[(b, t - i), h]`.
    /// Implemented with zero-padded FFTs, two real sequences per transform.
    pub fn fft_conv(&mut self, kernel: Var, signal: Var, batch: usize, len: usize) -> Result<Var> {
        let ks = self.shape(kernel);
        if ks.len() != 2 {
            return Err(Error::shape("fft_conv", format!("kernel shape {ks:?}")));
        }
        let (h, klen) = (ks[0], ks[1]);
        if self.shape(signal) != [batch * len, h] || klen == 0 || len == 0 {
            return Err(Error::shape(
                "fft_conv",
                format!(
                    "kernel {ks:?}, signal {:?}, batch {batch}, len {len}",
                    self.shape(signal)
                ),
            ));
        }
        let n = fft::conv_size(len, klen);
        let kv = self.value(kernel);
        let xv = self.value(signal);
        let inv = fft::inverse_plan(n);
        let scale = 1.0 / n as f64;
        let mut out = vec![0.0; batch * len * h];
        let mut kspec = Vec::with_capacity(h);
        let mut xspec = Vec::with_capacity(h);
        let mut col_a = vec![0.0; len];
        let mut col_b = vec![0.0; len];
        for c in 0..h {
            let kf = fft::real_spectrum(&kv[c * klen..(c + 1) * klen], n);
            let mut pairs = Vec::with_capacity(batch.div_ceil(2));
            for p in (0..batch).step_by(2) {
                gather_col(xv, h, c, p * len, len, &mut col_a);
                let second = p + 1 < batch;
                if second {
                    gather_col(xv, h, c, (p + 1) * len, len, &mut col_b);
                }
                let z = fft::packed_spectrum(&col_a, second.then_some(&col_b[..]), n);
                let mut y: Vec<Complex64> = z.iter().zip(&kf).map(|(a, b)| a * b).collect();
                inv.process(&mut y);
                for t in 0..len {
                    out[(p * len + t) * h + c] = y[t].re * scale;
                    if second {
                        out[((p + 1) * len + t) * h + c] = y[t].im * scale;
                    }
                }
                pairs.push(z);
            }
            kspec.push(kf);
            xspec.push(pairs);
        }
        let ng = self.ng(kernel) || self.ng(signal);
        Ok(self.push(
            vec![batch * len, h],
            out,
            Op::FftConv {
                kernel,
                signal,
                batch,
                len,
                n,
                kspec,
                xspec,
            },
            ng,
        ))
    }

    /// Geometric powers `lambda^l` for `l < len` of a complex vector given as
    /// real and imaginary parts of equal shape. Output is `[R, len, 2]` with
    /// `R` the number of entries and the last axis holding `(re, im)`.
    pub fn complex_geom_powers(&mut self, lam_re: Var, lam_im: Var, len: usize) -> Result<Var> {
        self.same_shape("complex_geom_powers", lam_re, lam_im)?;
        if len == 0 {
            return Err(Error::invalid("complex_geom_powers: len must be >= 1"));
        }
        let r = self.value(lam_re).len();
        let mut out = vec![0.0; r * len * 2];
        for i in 0..r {
            let lam = Complex64::new(self.value(lam_re)[i], self.value(lam_im)[i]);
            let mut p = Complex64::new(1.0, 0.0);
            for l in 0..len {
                out[(i * len + l) * 2] = p.re;
                out[(i * len + l) * 2 + 1] = p.im;
                p *= lam;
            }
        }
        let ng = self.ng(lam_re) || self.ng(lam_im);
        Ok(self.push(vec![r, len, 2], out, Op::GeomPowers { lam_re, lam_im, len }, ng))
    }

    /// `K[h, l] = factor * sum_n Re(w[h, n] * powers[h*N + n, l])`.
    ///
    /// With `factor = 2` this realizes a half-spectrum of conjugate pairs.
    pub fn realize_contract(&mut self, w_re: Var, w_im: Var, powers: Var, factor: f64) -> Result<Var> {
        self.same_shape("realize_contract", w_re, w_im)?;
        let ws = self.shape(w_re).to_vec();
        let ps = self.shape(powers).to_vec();
        if ws.len() != 2 || ps.len() != 3 || ps[0] != ws[0] * ws[1] || ps[2] != 2 {
            return Err(Error::shape("realize_contract", format!("w {ws:?}, powers {ps:?}")));
        }
        let (h, modes, len) = (ws[0], ws[1], ps[1]);
        let (wr, wi, pv) = (self.value(w_re), self.value(w_im), self.value(powers));
        let mut out = vec![0.0; h * len];
        for c in 0..h {
            let row = &mut out[c * len..(c + 1) * len];
            for m in 0..modes {
                let i = c * modes + m;
                let base = &pv[i * len * 2..(i + 1) * len * 2];
                for (l, o) in row.iter_mut().enumerate() {
                    *o += wr[i] * base[2 * l] - wi[i] * base[2 * l + 1];
                }
            }
            for o in row.iter_mut() {
                *o *= factor;
            }
        }
        let ng = self.ng(w_re) || self.ng(w_im) || self.ng(powers);
        Ok(self.push(
            vec![h, len],
            out,
            Op::RealizeContract {
                w_re,
                w_im,
                powers,
                factor,
                len,
            },
            ng,
        ))
    }

    /// `y[b, h] = factor * sum_n Re(c[h, n] * z[b, h, n])` for constant
    /// complex `z` of length `batch * H * N`.
    pub fn carry_readout(&mut self, c_re: Var, c_im: Var, z: Vec<Complex64>, factor: f64) -> Result<Var> {
        self.same_shape("carry_readout", c_re, c_im)?;
        let cs = self.shape(c_re).to_vec();
        if cs.len() != 2 || cs[0] * cs[1] == 0 || z.len() % (cs[0] * cs[1]) != 0 {
            return Err(Error::shape(
                "carry_readout",
                format!("c {cs:?}, {} state values", z.len()),
            ));
        }
        let (h, modes) = (cs[0], cs[1]);
        let batch = z.len() / (h * modes);
        let (cr, ci) = (self.value(c_re), self.value(c_im));
        let mut out = vec![0.0; batch * h];
        for b in 0..batch {
            for c in 0..h {
                let mut acc = 0.0;
                for m in 0..modes {
                    let i = c * modes + m;
                    let zz = z[b * h * modes + i];
                    acc += cr[i] * zz.re - ci[i] * zz.im;
                }
                out[b * h + c] = factor * acc;
            }
        }
        let ng = self.ng(c_re) || self.ng(c_im);
        Ok(self.push(vec![batch, h], out, Op::CarryReadout { c_re, c_im, z, factor }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let ng = self.ng(x);
        self.push(Vec::new(), vec![s], Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `sum_m weights[m] * |pred[m] - target[m]|^2` over rows `m`.
    pub fn weighted_sq_error(&mut self, pred: Var, target: Var, weights: Vec<f64>) -> Result<Var> {
        self.same_shape("weighted_sq_error", pred, target)?;
        let (m, n) = rows_cols(self.shape(pred));
        if weights.len() != m {
            return Err(Error::shape(
                "weighted_sq_error",
                format!("{m} rows, {} weights", weights.len()),
            ));
        }
        let (p, t) = (self.value(pred), self.value(target));
        let mut total = 0.0;
        for (r, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let sq: f64 = (0..n).map(|j| (p[r * n + j] - t[r * n + j]).powi(2)).sum();
            total += w * sq;
        }
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(Vec::new(), vec![total], Op::SqError { pred, target, weights }, ng))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (m, _) = rows_cols(self.shape(pred));
        let numel = self.value(pred).len().max(1);
        self.weighted_sq_error(pred, target, vec![1.0 / numel as f64; m])
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if let Some(bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let xv = self.value(x);
        let value = rows
            .iter()
            .flat_map(|&r| xv[r * n..(r + 1) * n].iter().copied())
            .collect();
        let ng = self.ng(x);
        Ok(self.push(vec![rows.len(), n], value, Op::GatherRows(x, rows.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ma, na) = rows_cols(self.shape(a));
        let (mb, nb) = rows_cols(self.shape(b));
        if ma != mb {
            return Err(Error::shape("concat_cols", format!("{ma} rows vs {mb} rows")));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut value = Vec::with_capacity(ma * (na + nb));
        for r in 0..ma {
            value.extend_from_slice(&av[r * na..(r + 1) * na]);
            value.extend_from_slice(&bv[r * nb..(r + 1) * nb]);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![ma, na + nb], value, Op::ConcatCols(a, b), ng))
    }

    /// Columns `[start, end)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = rows_cols(self.shape(x));
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", format!("[{start}, {end}) of {n} columns")));
        }
        let xv = self.value(x);
        let w = end - start;
        let mut value = Vec::with_capacity(m * w);
        for r in 0..m {
            value.extend_from_slice(&xv[r * n + start..r * n + end]);
        }
        let ng = self.ng(x);
        Ok(self.push(vec![m, w], value, Op::SliceCols(x, start), ng))
    }

    /// Accumulates `d loss / d p` for every trainable parameter on the tape.
    ///
    /// The loss must be a finite scalar. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.finished {
            return Err(Error::Backward(
                "backward already ran on this tape; build a new tape".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, shape is {:?}",
                self.shape(loss)
            )));
        }
        if !self.value(loss)[0].is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        self.finished = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |v: Var| nodes[v.0].needs_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Param(name) => {
                let t = Tensor::new(node.shape.clone(), g)?.with_requires_grad(false);
                match out.map.get_mut(name) {
                    Some(existing) => {
                        for (e, c) in existing.data_mut().iter_mut().zip(t.data()) {
                            *e += c;
                        }
                    }
                    None => {
                        out.map.insert(name.clone(), t);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if needs(*a) {
                    // dA = G B^T
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, &g, (n, 1), val(*b), (1, n), &mut da, false);
                    acc(*a, da);
                }
                if needs(*b) {
                    // dB = A^T G
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), (1, k), &g, (n, 1), &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.iter().map(|x| -x).collect());
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    acc(*a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if needs(*a) {
                    acc(*a, g.iter().zip(bv).map(|(g, b)| g / b).collect());
                }
                if needs(*b) {
                    acc(
                        *b,
                        g.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(g, (a, b))| -g * a / (b * b))
                            .collect(),
                    );
                }
            }
            Op::AddRow(x, bias) => {
                let n = nodes[bias.0].value.len();
                if needs(*bias) {
                    let mut db = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                    acc(*bias, db);
                }
                acc(*x, g);
            }
            Op::MulRow(x, s) => {
                let n = nodes[s.0].value.len();
                let (xv, sv) = (val(*x), val(*s));
                if needs(*s) {
                    let mut ds = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        ds[i % n] += gv * xv[i];
                    }
                    acc(*s, ds);
                }
                if needs(*x) {
                    acc(*x, g.iter().enumerate().map(|(i, gv)| gv * sv[i % n]).collect());
                }
            }
            Op::RepeatCols(x) => {
                let n = node.shape[1];
                acc(*x, g.chunks(n).map(|row| row.iter().sum()).collect());
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) => acc(*x, g),
            Op::Exp(x) => acc(*x, g.iter().zip(&node.value).map(|(g, y)| g * y).collect()),
            Op::Tanh(x) => acc(
                *x,
                g.iter().zip(&node.value).map(|(g, y)| g * (1.0 - y * y)).collect(),
            ),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Gelu(x) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(g, &v)| g * gelu_grad(v)).collect(),
            ),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = nodes[gamma.0].value.len();
                let m = inv_std.len();
                let gm = val(*gamma);
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (i, gv) in g.iter().enumerate() {
                        dg[i % n] += gv * xhat[i];
                        db[i % n] += gv;
                    }
                    acc(*gamma, dg);
                    acc(*beta, db);
                }
                if needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    for r in 0..m {
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..n {
                            let dh = g[r * n + j] * gm[j];
                            s1 += dh;
                            s2 += dh * xhat[r * n + j];
                        }
                        let k = inv_std[r] / n as f64;
                        for j in 0..n {
                            let dh = g[r * n + j] * gm[j];
                            dx[r * n + j] = k * (n as f64 * dh - s1 - xhat[r * n + j] * s2);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Dropout { x, mask } => acc(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect()),
            Op::FftConv {
                kernel,
                signal,
                batch,
                len,
                n,
                kspec,
                xspec,
            } => {
                let (batch, len, n) = (*batch, *len, *n);
                let h = kspec.len();
                let klen = nodes[kernel.0].shape[1];
                let inv = fft::inverse_plan(n);
                let scale = 1.0 / n as f64;
                let mut dx = needs(*signal).then(|| vec![0.0; batch * len * h]);
                let mut dk = needs(*kernel).then(|| vec![0.0; h * klen]);
                let mut col_a = vec![0.0; len];
                let mut col_b = vec![0.0; len];
                for c in 0..h {
                    let mut ksum = dk.as_ref().map(|_| vec![Complex64::new(0.0, 0.0); n]);
                    for (pi, p) in (0..batch).step_by(2).enumerate() {
                        gather_col(&g, h, c, p * len, len, &mut col_a);
                        let second = p + 1 < batch;
                        if second {
                            gather_col(&g, h, c, (p + 1) * len, len, &mut col_b);
                        }
                        let gz = fft::packed_spectrum(&col_a, second.then_some(&col_b[..]), n);
                        if let Some(dx) = dx.as_mut() {
                            let mut y: Vec<Complex64> =
                                gz.iter().zip(&kspec[c]).map(|(a, k)| a * k.conj()).collect();
                            inv.process(&mut y);
                            for t in 0..len {
                                dx[(p * len + t) * h + c] = y[t].re * scale;
                                if second {
                                    dx[((p + 1) * len + t) * h + c] = y[t].im * scale;
                                }
                            }
                        }
                        if let Some(ks) = ksum.as_mut() {
                            let xz = &xspec[c][pi];
                            for (k, s) in ks.iter_mut().enumerate() {
                                let (ga, gb) = fft::unpack_bin(&gz, k);
                                let (xa, xb) = fft::unpack_bin(xz, k);
                                *s += ga * xa.conj() + gb * xb.conj();
                            }
                        }
                    }
                    if let (Some(mut ks), Some(dk)) = (ksum, dk.as_mut()) {
                        inv.process(&mut ks);
                        for i in 0..klen {
                            dk[c * klen + i] = ks[i].re * scale;
                        }
                    }
                }
                if let Some(dx) = dx {
                    acc(*signal, dx);
                }
                if let Some(dk) = dk {
                    acc(*kernel, dk);
                }
            }
            Op::GeomPowers { lam_re, lam_im, len } => {
                let len = *len;
                let r = nodes[lam_re.0].value.len();
                let p = &node.value;
                let mut dre = vec![0.0; r];
                let mut dim = vec![0.0; r];
                for i in 0..r {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for l in 1..len {
                        // d(lambda^l) = l lambda^(l-1) d lambda
                        let prev = (i * len + l - 1) * 2;
                        let (dr, di) = (l as f64 * p[prev], l as f64 * p[prev + 1]);
                        let cur = (i * len + l) * 2;
                        let (gr, gi) = (g[cur], g[cur + 1]);
                        sr += gr * dr + gi * di;
                        si += gi * dr - gr * di;
                    }
                    dre[i] = sr;
                    dim[i] = si;
                }
                acc(*lam_re, dre);
                acc(*lam_im, dim);
            }
            Op::RealizeContract {
                w_re,
                w_im,
                powers,
                factor,
                len,
            } => {
                let len = *len;
                let (wr, wi, pv) = (val(*w_re), val(*w_im), val(*powers));
                let (h, modes) = (nodes[w_re.0].shape[0], nodes[w_re.0].shape[1]);
                let mut dwr = vec![0.0; h * modes];
                let mut dwi = vec![0.0; h * modes];
                let mut dp = needs(*powers).then(|| vec![0.0; pv.len()]);
                for c in 0..h {
                    let gr = &g[c * len..(c + 1) * len];
                    for m in 0..modes {
                        let i = c * modes + m;
                        let base = &pv[i * len * 2..(i + 1) * len * 2];
                        let (mut sr, mut si) = (0.0, 0.0);
                        for (l, gl) in gr.iter().enumerate() {
                            sr += gl * base[2 * l];
                            si += gl * base[2 * l + 1];
                        }
                        dwr[i] = factor * sr;
                        dwi[i] = -factor * si;
                        if let Some(dp) = dp.as_mut() {
                            for (l, gl) in gr.iter().enumerate() {
                                dp[(i * len + l) * 2] = factor * gl * wr[i];
                                dp[(i * len + l) * 2 + 1] = -factor * gl * wi[i];
                            }
                        }
                    }
                }
                acc(*w_re, dwr);
                acc(*w_im, dwi);
                if let Some(dp) = dp {
                    acc(*powers, dp);
                }
            }
            Op::CarryReadout { c_re, c_im, z, factor } => {
                let (h, modes) = (nodes[c_re.0].shape[0], nodes[c_re.0].shape[1]);
                let batch = z.len() / (h * modes);
                let mut dr = vec![0.0; h * modes];
                let mut di = vec![0.0; h * modes];
                for b in 0..batch {
                    for c in 0..h {
                        let gv = factor * g[b * h + c];
                        for m in 0..modes {
                            let i = c * modes + m;
                            let zz = z[b * h * modes + i];
                            dr[i] += gv * zz.re;
                            di[i] -= gv * zz.im;
                        }
                    }
                }
                acc(*c_re, dr);
                acc(*c_im, di);
            }
            Op::Sum(x) => {
                let n = nodes[x.0].value.len();
                acc(*x, vec![g[0]; n]);
            }
            Op::SqError { pred, target, weights } => {
                let (pv, tv) = (val(*pred), val(*target));
                let n = pv.len() / weights.len().max(1);
                let mut dp = vec![0.0; pv.len()];
                for (r, w) in weights.iter().enumerate() {
                    for j in 0..n {
                        let i = r * n + j;
                        dp[i] = 2.0 * g[0] * w * (pv[i] - tv[i]);
                    }
                }
                if needs(*target) {
                    acc(*target, dp.iter().map(|v| -v).collect());
                }
                acc(*pred, dp);
            }
            Op::GatherRows(x, rows) => {
                let n = node.shape[1];
                let mut dx = vec![0.0; nodes[x.0].value.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx[r * n + j] += g[k * n + j];
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatCols(a, b) => {
                let na = rows_cols(&nodes[a.0].shape).1;
                let nb = rows_cols(&nodes[b.0].shape).1;
                let m = node.shape[0];
                let mut da = Vec::with_capacity(m * na);
                let mut db = Vec::with_capacity(m * nb);
                for r in 0..m {
                    let row = &g[r * (na + nb)..(r + 1) * (na + nb)];
                    da.extend_from_slice(&row[..na]);
                    db.extend_from_slice(&row[na..]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::SliceCols(x, start) => {
                let (m, n) = rows_cols(&nodes[x.0].shape);
                let w = node.shape[1];
                let mut dx = vec![0.0; m * n];
                for r in 0..m {
                    dx[r * n + start..r * n + start + w].copy_from_slice(&g[r * w..(r + 1) * w]);
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }
}

fn gather_col(x: &[f64], h: usize, c: usize, row0: usize, len: usize, out: &mut [f64]) {
    for (t, o) in out.iter_mut().enumerate().take(len) {
        *o = x[(row0 + t) * h + c];
    }
}

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Uniform value in `[0, 1)` from a splitmix64 hash of `(seed, counter)`.
pub(crate) fn unit_hash(seed: u64, counter: u64) -> f64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(counter)
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

/// `c = a * b` (or `c += a * b`) with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_stride: (usize, usize),
    b: &[f64],
    b_stride: (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index reachable from the given sizes and
    // strides: `a` is m x k, `b` is k x n and `c` is a contiguous m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_stride.0 as isize,
            a_stride.1 as isize,
            b.as_ptr(),
            b_stride.0 as isize,
            b_stride.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
