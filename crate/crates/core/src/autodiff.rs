//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records each operation as a node holding its value, its parent
//! nodes and a backward rule. Nodes are appended in evaluation order, so
//! walking the node list from the end is a reverse topological order and
//! [`Tape::backward`] visits every recorded operation exactly once.
//! Gradients reaching a node through several consumers are summed.
//!
//! Kernels that are awkward to express with small ops (the selective scan,
//! blocked attention) register themselves through [`Tape::push`] with a
//! hand-written backward rule.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Inputs to a backward rule.
pub struct BackwardCtx<'a> {
    /// Gradient of the loss w.r.t. this node's value.
    pub grad: &'a Tensor,
    pub inputs: &'a [&'a Tensor],
    pub output: &'a Tensor,
    /// Whether each input needs a gradient; rules may return `None` otherwise.
    pub needs: &'a [bool],
}

pub type BackwardFn = Box<dyn Fn(&BackwardCtx<'_>) -> Result<Vec<Option<Tensor>>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

pub struct Tape {
    nodes: Vec<Node>,
    record: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that evaluates values but keeps no backward rules.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A differentiable leaf (parameter or input).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.insert(value, Vec::new(), self.record, None)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.insert(value, Vec::new(), false, None)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records a custom operation.
    pub fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let parents = parents.iter().map(|p| p.0).collect();
        self.insert(value, parents, requires, if requires { Some(backward) } else { None })
    }

    fn insert(&mut self, value: Tensor, parents: Vec<usize>, requires_grad: bool, backward: Option<BackwardFn>) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Propagates gradients from a scalar `loss` to every node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        loss_value.ensure_finite("loss")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(loss_value.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(rule) = node.backward.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.parents.iter().map(|&p| &self.nodes[p].value).collect();
            let needs: Vec<bool> = node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let parent_grads = rule(&BackwardCtx {
                grad: &grad,
                inputs: &inputs,
                output: &node.value,
                needs: &needs,
            })?;
            for ((&p, g), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            }
            grads[idx] = Some(grad);
        }
        Ok(Grads { grads })
    }

    // ----- operations -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(self.value(a), self.value(b))?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = ctx.needs[0].then(|| tensor::matmul_nt(ctx.grad, b)).transpose()?;
                let gb = ctx.needs[1].then(|| tensor::matmul_tn(a, ctx.grad)).transpose()?;
                Ok(vec![ga, gb])
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|ctx| Ok(vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())])),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(
            value,
            &[a, b],
            Box::new(|ctx| {
                let ga = ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y)?;
                let gb = ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x)?;
                Ok(vec![Some(ga), Some(gb)])
            }),
        ))
    }

    /// Adds a bias row `[n]` (or `[1, n]`) to every row of `x[m, n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(Error::dim(format!("bias of length {} for width {n}", b.len())));
        }
        let mut value = self.value(x).clone();
        for i in 0..m {
            for (o, bv) in value.data_mut()[i * n..(i + 1) * n].iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(
            value,
            &[x, bias],
            Box::new(move |ctx| {
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for (acc, g) in gb.iter_mut().zip(ctx.grad.row(i)) {
                        *acc += g;
                    }
                }
                let gb = Tensor::new(ctx.inputs[1].shape().to_vec(), gb)?;
                Ok(vec![Some(ctx.grad.clone()), Some(gb)])
            }),
        ))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.push(value, &[x], Box::new(move |ctx| Ok(vec![Some(ctx.grad.scale(c))])))
    }

    /// ReLU; the subgradient at zero is zero.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(
            value,
            &[x],
            Box::new(|ctx| {
                let g = ctx.grad.zip_map(ctx.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })?;
                Ok(vec![Some(g)])
            }),
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = tensor::softmax_rows(self.value(x))?;
        Ok(self.push(
            value,
            &[x],
            Box::new(|ctx| {
                let (r, c) = ctx.output.dims2()?;
                let s = ctx.output.data();
                let g = ctx.grad.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let inner = tensor::dot(&s[row.clone()], &g[row.clone()]);
                    for j in row {
                        out[j] = s[j] * (g[j] - inner);
                    }
                }
                Ok(vec![Some(Tensor::new(vec![r, c], out)?)])
            }),
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, &[x], Box::new(|ctx| Ok(vec![Some(ctx.grad.transpose()?)]))))
    }

    /// See [`tensor::conv1d_same`].
    pub fn conv1d_same(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let value = tensor::conv1d_same(self.value(x), self.value(kernel))?;
        Ok(self.push(
            value,
            &[x, kernel],
            Box::new(|ctx| {
                let (x, kernel) = (ctx.inputs[0], ctx.inputs[1]);
                let (l, d) = x.dims2()?;
                let (k, _, d_out) = tensor::conv_kernel_dims(kernel)?;
                let half = (k - 1) / 2;
                let g = ctx.grad.data();
                let mut gx = vec![0.0; l * d];
                let mut gk = vec![0.0; k * d * d_out];
                for t in 0..l {
                    let g_row = &g[t * d_out..(t + 1) * d_out];
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(half).filter(|&s| s < l) else {
                            continue;
                        };
                        for c in 0..d {
                            let base = (j * d + c) * d_out;
                            let w = &kernel.data()[base..base + d_out];
                            gx[src * d + c] += tensor::dot(g_row, w);
                            let xv = x.data()[src * d + c];
                            for (acc, gv) in gk[base..base + d_out].iter_mut().zip(g_row) {
                                *acc += xv * gv;
                            }
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::new(vec![l, d], gx)?),
                    Some(Tensor::new(vec![k, d, d_out], gk)?),
                ])
            }),
        ))
    }

    /// See [`tensor::depthwise_conv1d`].
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let value = tensor::depthwise_conv1d(self.value(x), self.value(kernel))?;
        Ok(self.push(
            value,
            &[x, kernel],
            Box::new(|ctx| {
                let (x, kernel) = (ctx.inputs[0], ctx.inputs[1]);
                let (l, c) = x.dims2()?;
                let (k, _) = kernel.dims2()?;
                let half = (k - 1) / 2;
                let g = ctx.grad.data();
                let mut gx = vec![0.0; l * c];
                let mut gk = vec![0.0; k * c];
                for t in 0..l {
                    for j in 0..k {
                        let Some(src) = (t + j).checked_sub(half).filter(|&s| s < l) else {
                            continue;
                        };
                        for ch in 0..c {
                            gx[src * c + ch] += g[t * c + ch] * kernel.data()[j * c + ch];
                            gk[j * c + ch] += g[t * c + ch] * x.data()[src * c + ch];
                        }
                    }
                }
                Ok(vec![
                    Some(Tensor::new(vec![l, c], gx)?),
                    Some(Tensor::new(vec![k, c], gk)?),
                ])
            }),
        ))
    }

    /// Output row `i` is input row `index[i]`; repeated indices accumulate.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let value = tensor::gather_rows(self.value(x), index)?;
        let index = index.to_vec();
        Ok(self.push(
            value,
            &[x],
            Box::new(move |ctx| {
                let (r, c) = ctx.inputs[0].dims2()?;
                let mut gx = vec![0.0; r * c];
                for (i, &src) in index.iter().enumerate() {
                    for (acc, g) in gx[src * c..(src + 1) * c].iter_mut().zip(ctx.grad.row(i)) {
                        *acc += g;
                    }
                }
                Ok(vec![Some(Tensor::new(vec![r, c], gx)?)])
            }),
        ))
    }

    /// Mean over rows, `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let value = tensor::mean_rows(self.value(x))?;
        Ok(self.push(
            value,
            &[x],
            Box::new(|ctx| {
                let (m, n) = ctx.inputs[0].dims2()?;
                let inv = 1.0 / m as f64;
                let row: Vec<f64> = ctx.grad.data().iter().map(|g| g * inv).collect();
                let mut gx = Vec::with_capacity(m * n);
                for _ in 0..m {
                    gx.extend_from_slice(&row);
                }
                Ok(vec![Some(Tensor::new(vec![m, n], gx)?)])
            }),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat_rows(&values)?;
        Ok(self.push(
            value,
            parts,
            Box::new(|ctx| {
                let c = ctx.grad.dims2()?.1;
                let mut offset = 0;
                let mut out = Vec::with_capacity(ctx.inputs.len());
                for input in ctx.inputs {
                    let n = input.len();
                    out.push(Some(Tensor::new(
                        input.shape().to_vec(),
                        ctx.grad.data()[offset * c..offset * c + n].to_vec(),
                    )?));
                    offset += n / c.max(1);
                }
                Ok(out)
            }),
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = tensor::concat_cols(&values)?;
        Ok(self.push(
            value,
            parts,
            Box::new(|ctx| {
                let (r, total) = ctx.grad.dims2()?;
                let mut out = Vec::with_capacity(ctx.inputs.len());
                let mut offset = 0;
                for input in ctx.inputs {
                    let w = input.dims2()?.1;
                    let mut g = Vec::with_capacity(r * w);
                    for i in 0..r {
                        g.extend_from_slice(&ctx.grad.data()[i * total + offset..i * total + offset + w]);
                    }
                    out.push(Some(Tensor::new(vec![r, w], g)?));
                    offset += w;
                }
                Ok(out)
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(
            value,
            &[x],
            Box::new(|ctx| {
                let g = ctx.grad.data()[0];
                Ok(vec![Some(Tensor::full(ctx.inputs[0].shape(), g))])
            }),
        )
    }

    /// Softmax cross-entropy of a single logit row against `label`.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let z = self.value(logits);
        let c = z.len();
        if label >= c {
            return Err(Error::input(format!("label {label} out of range for {c} classes")));
        }
        let mut probs = z.data().to_vec();
        tensor::softmax_in_place(&mut probs);
        let max = z.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.data().iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z.data()[label];
        Ok(self.push(
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad.data()[0];
                let mut out = probs.clone();
                out[label] -= 1.0;
                out.iter_mut().for_each(|v| *v *= g);
                Ok(vec![Some(Tensor::new(ctx.inputs[0].shape().to_vec(), out)?)])
            }),
        ))
    }
}

pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Denominator floor for the relative error; differences on gradients
/// smaller than this are measured in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares tape gradients of the scalar built by `f` against central finite
/// differences `(f(θ+h) − f(θ−h)) / 2h`, one scalar parameter at a time.
pub fn check_gradients<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite loss during gradient check".into()));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let slots: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.len()).map(move |e| (p, e)))
        .collect();
    let errors: Vec<(f64, (usize, usize))> = slots
        .par_iter()
        .map(|&(p, e)| -> Result<(f64, (usize, usize))> {
            let mut values = params.to_vec();
            let base = values[p].data()[e];
            values[p].data_mut()[e] = base + h;
            let up = eval(&values)?;
            values[p].data_mut()[e] = base - h;
            let down = eval(&values)?;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(vars[p]).map_or(0.0, |g| g.data()[e]);
            let scale = numeric.abs().max(analytic.abs()).max(GRAD_CHECK_FLOOR);
            Ok(((numeric - analytic).abs() / scale, (p, e)))
        })
        .collect::<Result<_>>()?;
    let (max_relative_error, worst) = errors
        .into_iter()
        .fold((0.0, (0, 0)), |acc, x| if x.0 > acc.0 { x } else { acc });
    Ok(GradCheckReport {
        max_relative_error,
        worst,
        checked: slots.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn assert_grads<F>(f: F, params: &[Tensor])
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
    {
        let report = check_gradients(f, params, 1e-5).unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "relative error {} at {:?}",
            report.max_relative_error,
            report.worst
        );
    }

    #[test]
    fn linear_loss_is_exact() {
        // loss = sum(W x): dL/dW[i][j] = x[j]
        let w = random(&[3, 4], 1);
        let x = random(&[4, 1], 2);
        let mut tape = Tape::new();
        let wv = tape.leaf(w.clone());
        let xv = tape.constant(x.clone());
        let y = tape.matmul(wv, xv).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(wv).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                assert_eq!(g.at(i, j), x.data()[j]);
            }
        }
        let report = check_gradients(
            |t, p| {
                let y = t.matmul(p[0], p[1])?;
                Ok(t.sum(y))
            },
            &[w, x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-10, "{}", report.max_relative_error);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::row_vector(&[0.0, 0.0]));
        let loss = tape.cross_entropy(z, 0).unwrap();
        assert!((tape.value(loss).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[-0.5, 0.5]);
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::row_vector(&[0.0, 0.0]));
        let loss = tape.cross_entropy(z, 1).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(z).unwrap().data(), &[0.5, -0.5]);
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = sum(x * x) via two uses of x.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[1.0, -2.0, 3.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn elementary_op_gradients() {
        let a = random(&[4, 3], 3);
        let b = random(&[3, 5], 4);
        let bias = random(&[5], 5);
        assert_grads(
            |t, p| {
                let y = t.matmul(p[0], p[1])?;
                let y = t.add_bias(y, p[2])?;
                let y = t.softmax_rows(y)?;
                let w = t.constant(random(&[4, 5], 6));
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            &[a.clone(), b.clone(), bias],
        );
        assert_grads(
            |t, p| {
                let at = t.transpose(p[0])?;
                let y = t.matmul(at, p[1])?;
                let y = t.scale(y, 0.7);
                let m = t.mean_rows(y)?;
                let s = t.mul(m, m)?;
                Ok(t.sum(s))
            },
            &[random(&[4, 3], 7), random(&[4, 2], 8)],
        );
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let x = Tensor::row_vector(&[0.5, -0.3, 1.2, -2.0]);
        assert_grads(
            |t, p| {
                let y = t.relu(p[0]);
                let w = t.constant(Tensor::row_vector(&[1.0, 2.0, 3.0, 4.0]));
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            &[x],
        );
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[0.0]));
        let y = tape.relu(x);
        let loss = tape.sum(y);
        assert_eq!(tape.backward(loss).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn conv_and_structural_op_gradients() {
        assert_grads(
            |t, p| {
                let y = t.conv1d_same(p[0], p[1])?;
                let y = t.depthwise_conv1d(y, p[2])?;
                let y = t.gather_rows(y, &[3, 0, 0, 2])?;
                let w = t.constant(random(&[4, 2], 20));
                let y = t.mul(y, w)?;
                let y = t.mul(y, y)?;
                Ok(t.sum(y))
            },
            &[random(&[5, 3], 21), random(&[3, 3, 2], 22), random(&[3, 2], 23)],
        );
        assert_grads(
            |t, p| {
                let r = t.concat_rows(&[p[0], p[1]])?;
                let c = t.concat_cols(&[r, p[2]])?;
                let w = t.constant(random(&[5, 4], 24));
                let y = t.mul(c, w)?;
                let y = t.mul(y, c)?;
                let logits = t.mean_rows(y)?;
                t.cross_entropy(logits, 2)
            },
            &[random(&[2, 3], 25), random(&[3, 3], 26), random(&[5, 1], 27)],
        );
    }

    #[test]
    fn inference_tape_records_no_rules() {
        let mut tape = Tape::inference();
        let x = tape.leaf(Tensor::row_vector(&[1.0]));
        let y = tape.scale(x, 2.0);
        assert_eq!(tape.value(y).data(), &[2.0]);
        let grads = tape.backward(y).unwrap();
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn non_finite_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row_vector(&[f64::NAN]));
        let loss = tape.sum(x);
        assert!(matches!(tape.backward(loss), Err(Error::Numeric(_))));
    }
}
