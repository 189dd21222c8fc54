//! Four-direction state-space scanning over the view × time grid.
//!
//! A [`FeatureGrid`] is flattened into a token sequence in one of four
//! [`ScanOrder`]s, embedded by a width-3 convolution with ReLU, run through a
//! [`MambaLayer`] (linear → depthwise conv → selective scan, plus a linear
//! residual branch and an output projection), and scattered back into
//! canonical `(view, time)` order.
//!
//! The selective scan keeps a diagonal state per inner channel:
//!
//! ```text
//!   Δ_t   = softplus(x_t · w_Δ + b_Δ)          (one step size per token)
//!   Ā_t   = exp(Δ_t A),  A = −exp(A_log)       [C, N]
//!   h_t   = Ā_t ⊙ h_{t−1} + Δ_t (x_t W_B) x_t  [C, N]
//!   y_t   = h_t (x_t W_C) + D_skip ⊙ x_t       [C]
//! ```
//!
//! and is evaluated in one left-to-right pass, linear in sequence length.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, Linear, ParamId, ParamStore};
use crate::rng::Rng64;
use crate::tensor::{dot, Tensor};

/// Per-view, per-time feature vectors stored canonically as `[V, T, D]`:
/// vertex `(v, t)` is row `v * T + t` of the `[V*T, D]` view.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    views: usize,
    steps: usize,
    values: Tensor,
}

impl FeatureGrid {
    pub fn new(values: Tensor) -> Result<Self> {
        match *values.shape() {
            [v, t, _] if v >= 1 && t >= 1 => Ok(Self {
                views: v,
                steps: t,
                values,
            }),
            _ => Err(Error::dim(format!(
                "feature grid must be [V>=1, T>=1, D], got {:?}",
                values.shape()
            ))),
        }
    }

    /// Wraps a canonical `[V*T, D]` matrix.
    pub fn from_matrix(views: usize, steps: usize, m: Tensor) -> Result<Self> {
        let (n, d) = m.dims2()?;
        if n != views * steps {
            return Err(Error::dim(format!("{n} rows for a {views}x{steps} grid")));
        }
        Self::new(m.reshape(&[views, steps, d])?)
    }

    pub fn views(&self) -> usize {
        self.views
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn len(&self) -> usize {
        self.views * self.steps
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn vertex(&self, view: usize, step: usize) -> &[f64] {
        let d = self.width();
        let i = view * self.steps + step;
        &self.values.data()[i * d..(i + 1) * d]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    /// Canonical `[V*T, D]` matrix.
    pub fn to_matrix(&self) -> Tensor {
        self.values
            .clone()
            .reshape(&[self.len(), self.width()])
            .expect("grid shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScanOrder {
    ViewForward,
    ViewBackward,
    TimeForward,
    TimeBackward,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 4] = [
        ScanOrder::ViewForward,
        ScanOrder::ViewBackward,
        ScanOrder::TimeForward,
        ScanOrder::TimeBackward,
    ];

    /// Canonical vertex index at each sequence position.
    ///
    /// View-prioritized orders let the view index vary fastest
    /// (`(1,1), (2,1), …, (V,1), (1,2), …`); time-prioritized orders let time
    /// vary fastest. Backward orders are exact reversals.
    pub fn permutation(self, views: usize, steps: usize) -> Vec<usize> {
        let n = views * steps;
        let view_major = |s: usize| (s % views) * steps + s / views;
        match self {
            ScanOrder::ViewForward => (0..n).map(view_major).collect(),
            ScanOrder::ViewBackward => (0..n).rev().map(view_major).collect(),
            ScanOrder::TimeForward => (0..n).collect(),
            ScanOrder::TimeBackward => (0..n).rev().collect(),
        }
    }

    /// Sequence position of each canonical vertex.
    pub fn inverse_permutation(self, views: usize, steps: usize) -> Vec<usize> {
        let perm = self.permutation(views, steps);
        let mut inv = vec![0; perm.len()];
        for (pos, &c) in perm.iter().enumerate() {
            inv[c] = pos;
        }
        inv
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanOrder::ViewForward => "view_forward",
            ScanOrder::ViewBackward => "view_backward",
            ScanOrder::TimeForward => "time_forward",
            ScanOrder::TimeBackward => "time_backward",
        }
    }
}

impl fmt::Display for ScanOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which directional scans a bidirectional block runs, in order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    ViewPrioritized,
    TimePrioritized,
    ViewTime,
}

impl ScanMode {
    pub fn directions(self) -> &'static [ScanOrder] {
        match self {
            ScanMode::ViewPrioritized => &[ScanOrder::ViewForward, ScanOrder::ViewBackward],
            ScanMode::TimePrioritized => &[ScanOrder::TimeForward, ScanOrder::TimeBackward],
            ScanMode::ViewTime => &ScanOrder::ALL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ScanMode::ViewPrioritized => "view_prioritized",
            ScanMode::TimePrioritized => "time_prioritized",
            ScanMode::ViewTime => "view_time",
        }
    }
}

impl FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "view_prioritized" | "view" => Ok(ScanMode::ViewPrioritized),
            "time_prioritized" | "time" => Ok(ScanMode::TimePrioritized),
            "view_time" => Ok(ScanMode::ViewTime),
            other => Err(Error::config(format!(
                "unknown scan mode {other:?} (expected view_prioritized, time_prioritized or view_time)"
            ))),
        }
    }
}

pub fn flatten_grid(grid: &FeatureGrid, order: ScanOrder) -> Tensor {
    let perm = order.permutation(grid.views, grid.steps);
    crate::tensor::gather_rows(&grid.to_matrix(), &perm).expect("permutation in range")
}

pub fn restore_grid(seq: &Tensor, order: ScanOrder, views: usize, steps: usize) -> Result<FeatureGrid> {
    let (n, _) = seq.dims2()?;
    if n != views * steps {
        return Err(Error::dim(format!(
            "sequence of length {n} cannot fill a {views}x{steps} grid"
        )));
    }
    let inv = order.inverse_permutation(views, steps);
    FeatureGrid::from_matrix(views, steps, crate::tensor::gather_rows(seq, &inv)?)
}

// ----- selective scan -----

/// Borrowed selective-scan weights for `C` inner channels and state size `N`.
#[derive(Clone, Copy)]
pub struct SsmWeights<'a> {
    /// `[C, N]`, with `A = −exp(a_log)`.
    pub a_log: &'a Tensor,
    /// `[C, N]`
    pub w_b: &'a Tensor,
    /// `[C, N]`
    pub w_c: &'a Tensor,
    /// `[C, 1]`
    pub w_delta: &'a Tensor,
    /// `[1]`
    pub b_delta: &'a Tensor,
    /// `[C]`
    pub d_skip: &'a Tensor,
}

impl SsmWeights<'_> {
    fn dims(&self, x: &Tensor) -> Result<(usize, usize, usize)> {
        let (l, c) = x.dims2()?;
        let (ac, n) = self.a_log.dims2()?;
        let ok = ac == c
            && self.w_b.shape() == [c, n]
            && self.w_c.shape() == [c, n]
            && self.w_delta.len() == c
            && self.b_delta.len() == 1
            && self.d_skip.len() == c;
        if !ok {
            return Err(Error::dim(format!(
                "selective scan weights do not match {c} channels / state {n}"
            )));
        }
        if l == 0 {
            return Err(Error::dim("selective scan over an empty sequence"));
        }
        Ok((l, c, n))
    }
}

pub(crate) fn softplus(z: f64) -> f64 {
    if z > 30.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Runs the selective scan over `x: [L, C]`; returns `[L, C]`.
pub fn selective_scan(x: &Tensor, w: SsmWeights<'_>) -> Result<Tensor> {
    let (l, c, n) = w.dims(x)?;
    let a: Vec<f64> = w.a_log.data().iter().map(|v| -v.exp()).collect();
    let mut h = vec![0.0; c * n];
    let mut bv = vec![0.0; n];
    let mut cv = vec![0.0; n];
    let mut out = vec![0.0; l * c];
    for t in 0..l {
        let xt = x.row(t);
        let delta = softplus(dot(xt, w.w_delta.data()) + w.b_delta.data()[0]);
        project(xt, w.w_b.data(), n, &mut bv);
        project(xt, w.w_c.data(), n, &mut cv);
        let yt = &mut out[t * c..(t + 1) * c];
        for ch in 0..c {
            let hc = &mut h[ch * n..(ch + 1) * n];
            let ac = &a[ch * n..(ch + 1) * n];
            let drive = delta * xt[ch];
            let mut acc = 0.0;
            for k in 0..n {
                hc[k] = (delta * ac[k]).exp() * hc[k] + drive * bv[k];
                acc += cv[k] * hc[k];
            }
            yt[ch] = acc + w.d_skip.data()[ch] * xt[ch];
        }
    }
    let y = Tensor::new(vec![l, c], out)?;
    y.ensure_finite("selective scan state")?;
    Ok(y)
}

/// `out = x · W` for a single row `x: [C]` and `W: [C, N]`.
fn project(x: &[f64], w: &[f64], n: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for (ch, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (o, wv) in out.iter_mut().zip(&w[ch * n..(ch + 1) * n]) {
            *o += xv * wv;
        }
    }
}

fn scan_backward(x: &Tensor, w: SsmWeights<'_>, gy: &Tensor) -> Result<[Tensor; 7]> {
    let (l, c, n) = w.dims(x)?;
    let a: Vec<f64> = w.a_log.data().iter().map(|v| -v.exp()).collect();
    let (wb, wc, wd) = (w.w_b.data(), w.w_c.data(), w.w_delta.data());
    let d_skip = w.d_skip.data();

    // Forward replay, keeping every state.
    let mut z = vec![0.0; l];
    let mut delta = vec![0.0; l];
    let mut bvs = vec![0.0; l * n];
    let mut cvs = vec![0.0; l * n];
    let mut hs = vec![0.0; l * c * n];
    for t in 0..l {
        let xt = x.row(t);
        z[t] = dot(xt, wd) + w.b_delta.data()[0];
        delta[t] = softplus(z[t]);
        project(xt, wb, n, &mut bvs[t * n..(t + 1) * n]);
        project(xt, wc, n, &mut cvs[t * n..(t + 1) * n]);
        for ch in 0..c {
            for k in 0..n {
                let prev = if t == 0 { 0.0 } else { hs[((t - 1) * c + ch) * n + k] };
                let abar = (delta[t] * a[ch * n + k]).exp();
                hs[(t * c + ch) * n + k] = abar * prev + delta[t] * bvs[t * n + k] * xt[ch];
            }
        }
    }

    let mut gx = vec![0.0; l * c];
    let mut ga = vec![0.0; c * n];
    let mut gwb = vec![0.0; c * n];
    let mut gwc = vec![0.0; c * n];
    let mut gwd = vec![0.0; c];
    let mut gbd = 0.0;
    let mut gskip = vec![0.0; c];
    let mut carry = vec![0.0; c * n];
    let mut gb = vec![0.0; n];
    let mut gc = vec![0.0; n];
    for t in (0..l).rev() {
        let xt = x.row(t);
        let gyt = gy.row(t);
        let dt = delta[t];
        let bv = &bvs[t * n..(t + 1) * n];
        let cv = &cvs[t * n..(t + 1) * n];
        let ht = &hs[t * c * n..(t + 1) * c * n];
        gb.iter_mut().for_each(|v| *v = 0.0);
        gc.iter_mut().for_each(|v| *v = 0.0);
        let mut gdelta = 0.0;
        let gxt = &mut gx[t * c..(t + 1) * c];
        for ch in 0..c {
            gskip[ch] += gyt[ch] * xt[ch];
            gxt[ch] += gyt[ch] * d_skip[ch];
            for k in 0..n {
                let idx = ch * n + k;
                gc[k] += gyt[ch] * ht[idx];
                let gh = carry[idx] + gyt[ch] * cv[k];
                let abar = (dt * a[idx]).exp();
                let prev = if t == 0 { 0.0 } else { hs[(t - 1) * c * n + idx] };
                let gabar = gh * prev;
                gdelta += gh * bv[k] * xt[ch] + gabar * abar * a[idx];
                gb[k] += gh * dt * xt[ch];
                gxt[ch] += gh * dt * bv[k];
                ga[idx] += gabar * abar * dt;
                carry[idx] = gh * abar;
            }
        }
        let gz = gdelta * sigmoid(z[t]);
        gbd += gz;
        for ch in 0..c {
            gwd[ch] += gz * xt[ch];
            gxt[ch] += gz * wd[ch];
            let row = ch * n..(ch + 1) * n;
            gxt[ch] += dot(&wb[row.clone()], &gb) + dot(&wc[row.clone()], &gc);
            for k in 0..n {
                gwb[ch * n + k] += xt[ch] * gb[k];
                gwc[ch * n + k] += xt[ch] * gc[k];
            }
        }
    }
    let ga_log: Vec<f64> = ga.iter().zip(&a).map(|(g, av)| g * av).collect();
    Ok([
        Tensor::new(vec![l, c], gx)?,
        Tensor::new(vec![c, n], ga_log)?,
        Tensor::new(vec![c, n], gwb)?,
        Tensor::new(vec![c, n], gwc)?,
        Tensor::new(w.w_delta.shape().to_vec(), gwd)?,
        Tensor::new(w.b_delta.shape().to_vec(), vec![gbd])?,
        Tensor::new(w.d_skip.shape().to_vec(), gskip)?,
    ])
}

/// Records [`selective_scan`] on the tape. `w` holds the weight variables in
/// the order `a_log, w_b, w_c, w_delta, b_delta, d_skip`.
pub fn selective_scan_op(tape: &mut Tape, x: Var, w: [Var; 6]) -> Result<Var> {
    let value = {
        let weights = SsmWeights {
            a_log: tape.value(w[0]),
            w_b: tape.value(w[1]),
            w_c: tape.value(w[2]),
            w_delta: tape.value(w[3]),
            b_delta: tape.value(w[4]),
            d_skip: tape.value(w[5]),
        };
        selective_scan(tape.value(x), weights)?
    };
    let parents = [x, w[0], w[1], w[2], w[3], w[4], w[5]];
    Ok(tape.push(
        value,
        &parents,
        Box::new(|ctx| {
            let i = ctx.inputs;
            let weights = SsmWeights {
                a_log: i[1],
                w_b: i[2],
                w_c: i[3],
                w_delta: i[4],
                b_delta: i[5],
                d_skip: i[6],
            };
            Ok(scan_backward(i[0], weights, ctx.grad)?.into_iter().map(Some).collect())
        }),
    ))
}

// ----- layers -----

/// Widths of one directional scan unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanDims {
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    /// Width of the embedding convolution ahead of the Mamba layer.
    pub pre_conv_width: usize,
    /// Width of the depthwise convolution inside the Mamba layer.
    pub inner_conv_width: usize,
}

impl ScanDims {
    pub fn new(d_model: usize, d_state: usize) -> Self {
        Self {
            d_model,
            d_inner: 2 * d_model,
            d_state,
            pre_conv_width: 3,
            inner_conv_width: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_inner == 0 || self.d_state == 0 {
            return Err(Error::config("scan widths must be positive"));
        }
        for k in [self.pre_conv_width, self.inner_conv_width] {
            if k % 2 == 0 {
                return Err(Error::config(format!("convolution width must be odd, got {k}")));
            }
        }
        Ok(())
    }
}

/// Step size the Δ bias is initialized to produce.
const INIT_STEP: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a_log: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_delta: ParamId,
    pub b_delta: ParamId,
    pub d_skip: ParamId,
    pub d_state: usize,
}

impl SsmParams {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, state: usize, rng: &mut Rng64) -> Self {
        let bound = 1.0 / (channels as f64).sqrt();
        // A = -(k+1) along the state axis.
        let a_log: Vec<f64> = (0..channels)
            .flat_map(|_| (0..state).map(|k| ((k + 1) as f64).ln()))
            .collect();
        let a_log = store.add(
            format!("{name}.a_log"),
            Tensor::new(vec![channels, state], a_log).unwrap(),
        );
        let w_b = store.add(format!("{name}.w_b"), uniform(&[channels, state], bound, rng));
        let w_c = store.add(format!("{name}.w_c"), uniform(&[channels, state], bound, rng));
        let w_delta = store.add(format!("{name}.w_delta"), uniform(&[channels, 1], bound, rng));
        let b_delta = store.add(format!("{name}.b_delta"), Tensor::scalar(INIT_STEP.exp_m1().ln()));
        let d_skip = store.add(format!("{name}.d_skip"), Tensor::full(&[channels], 1.0));
        Self {
            a_log,
            w_b,
            w_c,
            w_delta,
            b_delta,
            d_skip,
            d_state: state,
        }
    }

    pub fn weights<'a>(&self, store: &'a ParamStore) -> SsmWeights<'a> {
        SsmWeights {
            a_log: store.get(self.a_log),
            w_b: store.get(self.w_b),
            w_c: store.get(self.w_c),
            w_delta: store.get(self.w_delta),
            b_delta: store.get(self.b_delta),
            d_skip: store.get(self.d_skip),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let w = [self.a_log, self.w_b, self.w_c, self.w_delta, self.b_delta, self.d_skip].map(|id| p.var(id));
        selective_scan_op(tape, x, w)
    }
}

/// `ReLU(Conv1D(P, W_c) + b)`.
#[derive(Clone, Debug)]
pub struct PreConv {
    pub kernel: ParamId,
    pub bias: ParamId,
}

impl PreConv {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, d: usize, rng: &mut Rng64) -> Self {
        let bound = 1.0 / ((width * d) as f64).sqrt();
        let kernel = store.add(format!("{name}.kernel"), uniform(&[width, d, d], bound, rng));
        let bias = store.add(format!("{name}.bias"), uniform(&[d], bound, rng));
        Self { kernel, bias }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, seq: Var) -> Result<Var> {
        let y = tape.conv1d_same(seq, p.var(self.kernel))?;
        let y = tape.add_bias(y, p.var(self.bias))?;
        Ok(tape.relu(y))
    }
}

/// `X = W_out(SSM(Conv(W_in P')) + W_res P')`, no multiplicative gate.
#[derive(Clone, Debug)]
pub struct MambaLayer {
    pub w_in: Linear,
    pub conv: ParamId,
    pub conv_bias: ParamId,
    pub ssm: SsmParams,
    pub w_res: Linear,
    pub w_out: Linear,
}

impl MambaLayer {
    pub fn new(store: &mut ParamStore, name: &str, dims: ScanDims, rng: &mut Rng64) -> Self {
        let w_in = Linear::new(store, &format!("{name}.in"), dims.d_model, dims.d_inner, true, rng);
        let bound = 1.0 / (dims.inner_conv_width as f64).sqrt();
        let conv = store.add(
            format!("{name}.conv"),
            uniform(&[dims.inner_conv_width, dims.d_inner], bound, rng),
        );
        let conv_bias = store.add(format!("{name}.conv_bias"), uniform(&[dims.d_inner], bound, rng));
        let ssm = SsmParams::new(store, &format!("{name}.ssm"), dims.d_inner, dims.d_state, rng);
        let w_res = Linear::new(store, &format!("{name}.res"), dims.d_model, dims.d_inner, true, rng);
        let w_out = Linear::new(store, &format!("{name}.out"), dims.d_inner, dims.d_model, true, rng);
        Self {
            w_in,
            conv,
            conv_bias,
            ssm,
            w_res,
            w_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, seq: Var) -> Result<Var> {
        let u = self.w_in.forward(tape, p, seq)?;
        let u = tape.depthwise_conv1d(u, p.var(self.conv))?;
        let u = tape.add_bias(u, p.var(self.conv_bias))?;
        let s = self.ssm.forward(tape, p, u)?;
        let r = self.w_res.forward(tape, p, seq)?;
        let sum = tape.add(s, r)?;
        self.w_out.forward(tape, p, sum)
    }
}

/// One directional scan: flatten in `order`, pre-conv, Mamba layer, restore.
#[derive(Clone, Debug)]
pub struct DirectionalScan {
    pub order: ScanOrder,
    pub pre_conv: PreConv,
    pub mamba: MambaLayer,
}

impl DirectionalScan {
    pub fn new(store: &mut ParamStore, name: &str, order: ScanOrder, dims: ScanDims, rng: &mut Rng64) -> Self {
        let pre_conv = PreConv::new(
            store,
            &format!("{name}.pre_conv"),
            dims.pre_conv_width,
            dims.d_model,
            rng,
        );
        let mamba = MambaLayer::new(store, &format!("{name}.mamba"), dims, rng);
        Self { order, pre_conv, mamba }
    }

    /// `x` is the canonical `[V*T, D]` grid; the result is canonical too.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var, views: usize, steps: usize) -> Result<Var> {
        let seq = tape.gather_rows(x, &self.order.permutation(views, steps))?;
        let y = self.pre_conv.forward(tape, p, seq)?;
        let y = self.mamba.forward(tape, p, y)?;
        tape.gather_rows(y, &self.order.inverse_permutation(views, steps))
    }
}

/// Applies `layers` in sequence, each consuming the previous one's output.
/// `layers` must follow `mode.directions()`.
pub fn bidirectional_block(
    grid: &FeatureGrid,
    mode: ScanMode,
    layers: &[DirectionalScan],
    store: &ParamStore,
) -> Result<FeatureGrid> {
    let dirs = mode.directions();
    if layers.len() != dirs.len() || layers.iter().zip(dirs).any(|(l, d)| l.order != *d) {
        return Err(Error::config(format!(
            "{} block needs layers in order {:?}",
            mode.name(),
            dirs
        )));
    }
    let mut tape = Tape::inference();
    let p = store.bind(&mut tape);
    let mut x = tape.constant(grid.to_matrix());
    for layer in layers {
        x = layer.forward(&mut tape, &p, x, grid.views(), grid.steps())?;
    }
    FeatureGrid::from_matrix(grid.views(), grid.steps(), tape.value(x).clone())
}
