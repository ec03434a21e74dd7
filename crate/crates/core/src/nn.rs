//! Small reverse-mode engine for the layer set used by the generators,
//! discriminators and denoisers.
//!
//! A forward pass records a [`Tape`]; `backward` replays it in reverse.
//! Tapes remember the parameter version they were recorded against and are
//! rejected once the state has been updated.

use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::Tensor;
use crate::{Error, Result};
use rand::Rng as _;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense { inp: usize, out: usize },
    /// Zero padding of `(k - 1) / 2` on each side.
    Conv2d { in_ch: usize, out_ch: usize, k: usize, stride: usize },
    /// Channel-to-space, `[c·r², h, w] → [c, h·r, w·r]`; channel
    /// `c·r² + i·r + j` lands at offset `(i, j)` of each `r×r` block.
    PixelShuffle { r: usize },
    Relu,
    Sigmoid,
    BatchNorm { ch: usize },
    /// Adds activation `from` (0 is the network input, `i` the output of
    /// layer `i - 1`) to the current one.
    Skip { from: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    /// Per-sample input shape, without the batch axis.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl NetSpec {
    pub fn mlp(inp: usize, hidden: &[usize], out: usize, seed: u64) -> NetSpec {
        let mut layers = Vec::new();
        let mut prev = inp;
        for &h in hidden {
            layers.push(LayerSpec::Dense { inp: prev, out: h });
            layers.push(LayerSpec::Relu);
            prev = h;
        }
        layers.push(LayerSpec::Dense { inp: prev, out });
        NetSpec { input_shape: vec![inp], layers, seed }
    }

    /// Per-sample shapes of every activation, input first.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Config("network input shape must be non-empty".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let bad = |msg: String| Error::Config(format!("layer {i} ({layer:?}): {msg}"));
            let next = match *layer {
                LayerSpec::Dense { inp, out } => {
                    let n: usize = cur.iter().product();
                    if n != inp || out == 0 {
                        return Err(bad(format!("expects {inp} inputs, gets {cur:?}")));
                    }
                    vec![out]
                }
                LayerSpec::Conv2d { in_ch, out_ch, k, stride } => {
                    if cur.len() != 3 || cur[0] != in_ch {
                        return Err(bad(format!("expects [{in_ch}, h, w], gets {cur:?}")));
                    }
                    if k % 2 == 0 || stride == 0 || out_ch == 0 {
                        return Err(bad("kernel must be odd, stride and channels positive".into()));
                    }
                    vec![out_ch, (cur[1] - 1) / stride + 1, (cur[2] - 1) / stride + 1]
                }
                LayerSpec::PixelShuffle { r } => {
                    if r == 0 || cur.len() != 3 || cur[0] % (r * r) != 0 {
                        return Err(bad(format!("cannot shuffle {cur:?}")));
                    }
                    vec![cur[0] / (r * r), cur[1] * r, cur[2] * r]
                }
                LayerSpec::Relu | LayerSpec::Sigmoid => cur,
                LayerSpec::BatchNorm { ch } => {
                    if cur[0] != ch {
                        return Err(bad(format!("expects {ch} channels, gets {cur:?}")));
                    }
                    cur
                }
                LayerSpec::Skip { from } => {
                    if from > i {
                        return Err(bad(format!("skip source {from} does not precede it")));
                    }
                    if shapes[from] != cur {
                        return Err(bad(format!("skip source shape {:?} differs from {cur:?}", shapes[from])));
                    }
                    cur
                }
            };
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }

    fn param_count(&self, i: usize) -> usize {
        match self.layers[i] {
            LayerSpec::Dense { inp, out } => out * inp + out,
            LayerSpec::Conv2d { in_ch, out_ch, k, .. } => out_ch * in_ch * k * k + out_ch,
            LayerSpec::BatchNorm { ch } => 2 * ch,
            _ => 0,
        }
    }

    fn feeds_relu(&self, i: usize) -> bool {
        self.layers[i + 1..]
            .iter()
            .find(|l| !matches!(l, LayerSpec::BatchNorm { .. }))
            .is_some_and(|l| matches!(l, LayerSpec::Relu))
    }
}

/// Parameters, batch-norm statistics and optimiser moments of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetState {
    pub spec: NetSpec,
    /// Per layer: dense `[W (out×in), b]`, conv `[W (out×in×k×k), b]`,
    /// batch norm `[γ, β]`, empty otherwise.
    pub params: Vec<Vec<f64>>,
    /// Running `(mean, var)` per batch-norm layer.
    pub running: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    pub moments: Vec<(Vec<f64>, Vec<f64>)>,
    pub steps: u64,
    version: u64,
}

impl NetState {
    pub fn init(spec: &NetSpec) -> Result<NetState> {
        let shapes = spec.shapes()?;
        let mut params = Vec::with_capacity(spec.layers.len());
        let mut running = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let mut rng = rng::derive(spec.seed, i as u64);
            let (fan_in, fan_out, n_w, n_b) = match *layer {
                LayerSpec::Dense { inp, out } => (inp, out, inp * out, out),
                LayerSpec::Conv2d { in_ch, out_ch, k, .. } => (in_ch * k * k, out_ch * k * k, out_ch * in_ch * k * k, out_ch),
                _ => (0, 0, 0, 0),
            };
            let mut p = Vec::new();
            if n_w > 0 {
                let bound = if spec.feeds_relu(i) {
                    (6.0 / fan_in as f64).sqrt()
                } else {
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                };
                p = (0..n_w).map(|_| rng.gen_range(-bound..bound)).collect();
                let b = 1.0 / (fan_in as f64).sqrt();
                p.extend((0..n_b).map(|_| rng.gen_range(-b..b)));
            }
            if let LayerSpec::BatchNorm { ch } = *layer {
                p = vec![1.0; ch];
                p.extend(std::iter::repeat(0.0).take(ch));
                running.push(Some((vec![0.0; ch], vec![1.0; ch])));
            } else {
                running.push(None);
            }
            debug_assert_eq!(p.len(), spec.param_count(i), "{:?}", shapes[i]);
            params.push(p);
        }
        let moments = params.iter().map(|p| (vec![0.0; p.len()], vec![0.0; p.len()])).collect();
        Ok(NetState { spec: spec.clone(), params, running, moments, steps: 0, version: 0 })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| vec![0.0; p.len()]).collect())
    }

    /// Parameters as one flat vector, layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch {
                context: "flat parameters",
                expected: vec![self.num_params()],
                actual: vec![flat.len()],
            });
        }
        let mut off = 0;
        for p in &mut self.params {
            let len = p.len();
            p.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        self.version += 1;
        Ok(())
    }

    /// Mutable access to the parameters; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut Vec<Vec<f64>> {
        self.version += 1;
        &mut self.params
    }
}

/// Parameter gradients, laid out like [`NetState::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.concat()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|g| g.is_finite())
    }
}

enum Aux {
    None,
    /// Normalised activations and `1/sqrt(var + eps)` per channel.
    Norm { xhat: Vec<f64>, inv_std: Vec<f64> },
}

/// Everything `backward` needs from a forward pass.
pub struct Tape {
    acts: Vec<Tensor>,
    aux: Vec<Aux>,
    mode: Mode,
    version: u64,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        self.acts.last().unwrap()
    }

    pub fn into_output(mut self) -> Tensor {
        self.acts.pop().unwrap()
    }

    /// Activation `i` (0 is the input).
    pub fn activation(&self, i: usize) -> &Tensor {
        &self.acts[i]
    }
}

/// Row-major `C (m×n) (+)= op(A) (m×k) · op(B) (k×n)`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], acc: bool) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            if acc { 1.0 } else { 0.0 },
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(in_shape: &[usize], k: usize, s: usize) -> ConvGeom {
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        ConvGeom { c, h, w, k, s, oh: (h - 1) / s + 1, ow: (w - 1) / s + 1 }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = (self.k / 2) as isize;
        let n = self.oh * self.ow;
        for ci in 0..self.c {
            for a in 0..self.k {
                for b in 0..self.k {
                    let row = (ci * self.k + a) * self.k + b;
                    let out = &mut cols[row * n..(row + 1) * n];
                    for i in 0..self.oh {
                        let hi = (i * self.s) as isize + a as isize - p;
                        for j in 0..self.ow {
                            let wj = (j * self.s) as isize + b as isize - p;
                            out[i * self.ow + j] = if hi < 0 || wj < 0 || hi >= self.h as isize || wj >= self.w as isize {
                                0.0
                            } else {
                                x[(ci * self.h + hi as usize) * self.w + wj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = (self.k / 2) as isize;
        let n = self.oh * self.ow;
        for ci in 0..self.c {
            for a in 0..self.k {
                for b in 0..self.k {
                    let row = (ci * self.k + a) * self.k + b;
                    let src = &cols[row * n..(row + 1) * n];
                    for i in 0..self.oh {
                        let hi = (i * self.s) as isize + a as isize - p;
                        if hi < 0 || hi >= self.h as isize {
                            continue;
                        }
                        for j in 0..self.ow {
                            let wj = (j * self.s) as isize + b as isize - p;
                            if wj >= 0 && wj < self.w as isize {
                                dx[(ci * self.h + hi as usize) * self.w + wj as usize] += src[i * self.ow + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn shuffle_index(c: usize, h: usize, w: usize, r: usize) -> impl Iterator<Item = (usize, usize)> {
    // (input flat index, output flat index) for one sample.
    let oc = c / (r * r);
    (0..c).flat_map(move |ci| {
        let (co, rest) = (ci / (r * r), ci % (r * r));
        let (di, dj) = (rest / r, rest % r);
        (0..h).flat_map(move |i| {
            (0..w).map(move |j| {
                let src = (ci * h + i) * w + j;
                let dst = (co * h * r + i * r + di) * (w * r) + j * r + dj;
                debug_assert!(co < oc);
                (src, dst)
            })
        })
    })
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Channel count and spatial size per channel for batch norm.
fn bn_layout(shape: &[usize]) -> (usize, usize) {
    (shape[0], shape[1..].iter().product())
}

/// Runs the network on a batch `[n, ...input_shape]`.
///
/// In train mode batch norm uses batch statistics and updates the running
/// averages in `state`; in eval mode it is a fixed affine map.
pub fn forward(state: &mut NetState, input: &Tensor, mode: Mode) -> Result<Tape> {
    let shapes = state.spec.shapes()?;
    let n = input.batch();
    let mut want = vec![n];
    want.extend_from_slice(&shapes[0]);
    input.expect_shape("network input", &want)?;
    input.check_finite("network input")?;

    let mut acts: Vec<Tensor> = vec![input.clone()];
    let mut aux = Vec::with_capacity(state.spec.layers.len());
    for (li, layer) in state.spec.layers.iter().enumerate() {
        let x = acts.last().unwrap();
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(&shapes[li + 1]);
        let mut y = Tensor::zeros(&out_shape);
        let mut a = Aux::None;
        let p = &state.params[li];
        match *layer {
            LayerSpec::Dense { inp, out } => {
                let (w, b) = p.split_at(out * inp);
                gemm(n, inp, out, x.data(), false, w, true, y.data_mut(), false);
                for row in y.data_mut().chunks_mut(out) {
                    for (v, bi) in row.iter_mut().zip(b) {
                        *v += bi;
                    }
                }
            }
            LayerSpec::Conv2d { out_ch, k, stride, .. } => {
                let g = ConvGeom::new(&shapes[li], k, stride);
                let (w, b) = p.split_at(out_ch * g.rows());
                let np = g.oh * g.ow;
                let mut cols = vec![0.0; g.rows() * np];
                let in_len = x.sample_len();
                for s in 0..n {
                    g.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
                    let ys = &mut y.data_mut()[s * out_ch * np..(s + 1) * out_ch * np];
                    gemm(out_ch, g.rows(), np, w, false, &cols, false, ys, false);
                    for (o, bo) in b.iter().enumerate() {
                        ys[o * np..(o + 1) * np].iter_mut().for_each(|v| *v += bo);
                    }
                }
            }
            LayerSpec::PixelShuffle { r } => {
                let (c, h, w) = (shapes[li][0], shapes[li][1], shapes[li][2]);
                let len = c * h * w;
                for s in 0..n {
                    let (xs, ys) = (&x.data()[s * len..(s + 1) * len], &mut y.data_mut()[s * len..(s + 1) * len]);
                    for (src, dst) in shuffle_index(c, h, w, r) {
                        ys[dst] = xs[src];
                    }
                }
            }
            LayerSpec::Relu => {
                for (o, v) in y.data_mut().iter_mut().zip(x.data()) {
                    *o = v.max(0.0);
                }
            }
            LayerSpec::Sigmoid => {
                for (o, v) in y.data_mut().iter_mut().zip(x.data()) {
                    *o = sigmoid(*v);
                }
            }
            LayerSpec::BatchNorm { ch } => {
                let (_, sp) = bn_layout(&shapes[li]);
                let (gamma, beta) = p.split_at(ch);
                let (mean, var) = match mode {
                    Mode::Train => {
                        let count = (n * sp) as f64;
                        let mut mean = vec![0.0; ch];
                        let mut var = vec![0.0; ch];
                        for s in 0..n {
                            for c in 0..ch {
                                let v = &x.data()[(s * ch + c) * sp..(s * ch + c + 1) * sp];
                                mean[c] += v.iter().sum::<f64>();
                            }
                        }
                        mean.iter_mut().for_each(|m| *m /= count);
                        for s in 0..n {
                            for c in 0..ch {
                                let v = &x.data()[(s * ch + c) * sp..(s * ch + c + 1) * sp];
                                var[c] += v.iter().map(|t| (t - mean[c]).powi(2)).sum::<f64>();
                            }
                        }
                        var.iter_mut().for_each(|v| *v /= count);
                        if let Some((rm, rv)) = &mut state.running[li] {
                            let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                            for c in 0..ch {
                                rm[c] = (1.0 - BN_MOMENTUM) * rm[c] + BN_MOMENTUM * mean[c];
                                rv[c] = (1.0 - BN_MOMENTUM) * rv[c] + BN_MOMENTUM * var[c] * unbias;
                            }
                        }
                        (mean, var)
                    }
                    Mode::Eval => state.running[li].clone().expect("batch norm has running statistics"),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = vec![0.0; x.len()];
                for s in 0..n {
                    for c in 0..ch {
                        let base = (s * ch + c) * sp;
                        for t in base..base + sp {
                            xhat[t] = (x.data()[t] - mean[c]) * inv_std[c];
                            y.data_mut()[t] = gamma[c] * xhat[t] + beta[c];
                        }
                    }
                }
                a = Aux::Norm { xhat, inv_std };
            }
            LayerSpec::Skip { from } => {
                for ((o, v), u) in y.data_mut().iter_mut().zip(x.data()).zip(acts[from].data()) {
                    *o = v + u;
                }
            }
        }
        if let Some(idx) = y.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("activation of layer {li}"), index: idx });
        }
        acts.push(y);
        aux.push(a);
    }
    Ok(Tape { acts, aux, mode, version: state.version })
}

/// Forward pass in eval mode, returning only the output.
pub fn predict(state: &mut NetState, input: &Tensor) -> Result<Tensor> {
    Ok(forward(state, input, Mode::Eval)?.into_output())
}

/// Gradients of `⟨upstream, output⟩` with respect to the parameters and the
/// input.
pub fn backward(state: &NetState, tape: &Tape, upstream: &Tensor) -> Result<(Grads, Tensor)> {
    backward_from(state, tape, state.spec.layers.len(), upstream)
}

/// As [`backward`], but for `⟨upstream, activation act⟩`; layers after
/// `act` receive zero gradient.
pub fn backward_from(state: &NetState, tape: &Tape, act: usize, upstream: &Tensor) -> Result<(Grads, Tensor)> {
    if tape.version != state.version {
        return Err(Error::StaleTape { tape: tape.version, state: state.version });
    }
    if act >= tape.acts.len() {
        return Err(Error::Config(format!("activation {act} out of range")));
    }
    let out = &tape.acts[act];
    upstream.expect_shape("upstream gradient", out.shape())?;
    upstream.check_finite("upstream gradient")?;
    let shapes = state.spec.shapes()?;
    let n = out.batch();
    let mut grads = state.zero_grads();
    // Pending gradients for skip sources, indexed by activation.
    let mut pending: Vec<Option<Tensor>> = vec![None; tape.acts.len()];
    let mut g = upstream.clone();
    for li in (0..act).rev() {
        if let Some(extra) = pending[li + 1].take() {
            g.add_assign(&extra)?;
        }
        let x = &tape.acts[li];
        let y = &tape.acts[li + 1];
        let p = &state.params[li];
        let gp = &mut grads.0[li];
        let mut gx = Tensor::zeros(x.shape());
        match state.spec.layers[li] {
            LayerSpec::Dense { inp, out } => {
                let (w, _) = p.split_at(out * inp);
                let (gw, gb) = gp.split_at_mut(out * inp);
                gemm(out, n, inp, g.data(), true, x.data(), false, gw, false);
                for row in g.data().chunks(out) {
                    for (b, v) in gb.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                gemm(n, out, inp, g.data(), false, w, false, gx.data_mut(), false);
            }
            LayerSpec::Conv2d { out_ch, k, stride, .. } => {
                let geo = ConvGeom::new(&shapes[li], k, stride);
                let (w, _) = p.split_at(out_ch * geo.rows());
                let (gw, gb) = gp.split_at_mut(out_ch * geo.rows());
                let np = geo.oh * geo.ow;
                let mut cols = vec![0.0; geo.rows() * np];
                let mut gcols = vec![0.0; geo.rows() * np];
                let in_len = x.sample_len();
                for s in 0..n {
                    let gs = &g.data()[s * out_ch * np..(s + 1) * out_ch * np];
                    geo.im2col(&x.data()[s * in_len..(s + 1) * in_len], &mut cols);
                    gemm(out_ch, np, geo.rows(), gs, false, &cols, true, gw, true);
                    for (o, b) in gb.iter_mut().enumerate() {
                        *b += gs[o * np..(o + 1) * np].iter().sum::<f64>();
                    }
                    gemm(geo.rows(), out_ch, np, w, true, gs, false, &mut gcols, false);
                    geo.col2im(&gcols, &mut gx.data_mut()[s * in_len..(s + 1) * in_len]);
                }
            }
            LayerSpec::PixelShuffle { r } => {
                let (c, h, w) = (shapes[li][0], shapes[li][1], shapes[li][2]);
                let len = c * h * w;
                for s in 0..n {
                    let gs = &g.data()[s * len..(s + 1) * len];
                    let gxs = &mut gx.data_mut()[s * len..(s + 1) * len];
                    for (src, dst) in shuffle_index(c, h, w, r) {
                        gxs[src] = gs[dst];
                    }
                }
            }
            LayerSpec::Relu => {
                for ((o, v), u) in gx.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
                    *o = if *v > 0.0 { *u } else { 0.0 };
                }
            }
            LayerSpec::Sigmoid => {
                for ((o, s), u) in gx.data_mut().iter_mut().zip(y.data()).zip(g.data()) {
                    *o = u * s * (1.0 - s);
                }
            }
            LayerSpec::BatchNorm { ch } => {
                let Aux::Norm { xhat, inv_std } = &tape.aux[li] else {
                    unreachable!("batch norm records its normalisation")
                };
                let (_, sp) = bn_layout(&shapes[li]);
                let gamma = &p[..ch];
                let count = (n * sp) as f64;
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for s in 0..n {
                    for c in 0..ch {
                        let base = (s * ch + c) * sp;
                        for t in base..base + sp {
                            sum_g[c] += g.data()[t];
                            sum_gx[c] += g.data()[t] * xhat[t];
                        }
                    }
                }
                gp[..ch].copy_from_slice(&sum_gx);
                gp[ch..].copy_from_slice(&sum_g);
                for s in 0..n {
                    for c in 0..ch {
                        let base = (s * ch + c) * sp;
                        for t in base..base + sp {
                            gx.data_mut()[t] = match tape.mode {
                                Mode::Train => {
                                    gamma[c] * inv_std[c] / count
                                        * (count * g.data()[t] - sum_g[c] - xhat[t] * sum_gx[c])
                                }
                                Mode::Eval => gamma[c] * inv_std[c] * g.data()[t],
                            };
                        }
                    }
                }
            }
            LayerSpec::Skip { from } => {
                match &mut pending[from] {
                    Some(t) => t.add_assign(&g)?,
                    slot => *slot = Some(g.clone()),
                }
                gx = g;
            }
        }
        g = gx;
    }
    if let Some(extra) = pending[0].take() {
        g.add_assign(&extra)?;
    }
    Ok((grads, g))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub algorithm: Algorithm,
    pub lr: f64,
    /// Learning rate reached after `iterations` steps, decaying
    /// geometrically; constant when unset.
    pub final_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            algorithm: Algorithm::Adam,
            lr: 1e-3,
            final_lr: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 256,
            iterations: 20_000,
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// Learning rate for the `step`-th update, counting from 1.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.final_lr {
            Some(f) if self.iterations > 0 => {
                let frac = ((step.saturating_sub(1)) as f64 / self.iterations as f64).min(1.0);
                self.lr * (f / self.lr).powf(frac)
            }
            _ => self.lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.final_lr.is_some_and(|f| !(f > 0.0 && f <= self.lr)) {
            return Err(Error::Config(format!("final_lr must lie in (0, lr], got {:?}", self.final_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("Adam needs betas in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }
}

/// One descent step. Non-finite gradients are rejected and leave `state`
/// untouched.
pub fn optimizer_step(state: &mut NetState, grads: &Grads, cfg: &OptimConfig) -> Result<()> {
    if grads.0.len() != state.params.len() || grads.0.iter().zip(&state.params).any(|(g, p)| g.len() != p.len()) {
        return Err(Error::ShapeMismatch {
            context: "parameter gradients",
            expected: state.params.iter().map(Vec::len).collect(),
            actual: grads.0.iter().map(Vec::len).collect(),
        });
    }
    for (li, g) in grads.0.iter().enumerate() {
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: format!("gradient of layer {li}"), index: i });
        }
    }
    state.steps += 1;
    let t = state.steps as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    let lr = cfg.lr_at(state.steps);
    for ((p, g), (m, v)) in state.params.iter_mut().zip(&grads.0).zip(state.moments.iter_mut()) {
        match cfg.algorithm {
            Algorithm::Sgd => {
                for (w, gi) in p.iter_mut().zip(g) {
                    *w -= lr * gi;
                }
            }
            Algorithm::Adam => {
                for i in 0..p.len() {
                    m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                    v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                }
            }
        }
    }
    state.version += 1;
    Ok(())
}
