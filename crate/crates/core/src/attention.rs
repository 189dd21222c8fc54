//! Scaled dot-product attention as one fused tape operation.
//!
//! Probabilities are produced one query row at a time and never stored, so
//! memory stays linear in sequence length while compute stays quadratic for
//! [`KeyScope::All`]. The backward rule recomputes each probability row.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, softmax_in_place, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyScope {
    /// Every query attends over every key.
    All,
    /// Query `i` attends over keys `i*m .. (i+1)*m`.
    Blocks(usize),
}

impl KeyScope {
    fn range(self, query: usize, n_keys: usize) -> std::ops::Range<usize> {
        match self {
            KeyScope::All => 0..n_keys,
            KeyScope::Blocks(m) => query * m..(query + 1) * m,
        }
    }
}

fn check(q: &Tensor, k: &Tensor, v: &Tensor, scope: KeyScope) -> Result<(usize, usize, usize)> {
    let (lq, dk) = q.dims2()?;
    let (lk, dk2) = k.dims2()?;
    let (lv, dv) = v.dims2()?;
    if dk != dk2 {
        return Err(Error::dim(format!("query width {dk} vs key width {dk2}")));
    }
    if lk != lv {
        return Err(Error::dim(format!("{lk} keys but {lv} values")));
    }
    if lk == 0 {
        return Err(Error::dim("attention over zero keys"));
    }
    if let KeyScope::Blocks(m) = scope {
        if m == 0 || lq * m != lk {
            return Err(Error::dim(format!(
                "{lq} queries with blocks of {m} need {} keys, got {lk}",
                lq * m
            )));
        }
    }
    Ok((lq, dk, dv))
}

fn probs_row(q: &Tensor, k: &Tensor, i: usize, scope: KeyScope, scale: f64, buf: &mut Vec<f64>) {
    let (n_keys, _) = k.dims2().expect("checked");
    buf.clear();
    let qi = q.row(i);
    buf.extend(scope.range(i, n_keys).map(|j| dot(qi, k.row(j)) * scale));
    softmax_in_place(buf);
}

/// `softmax(Q Kᵀ / √d_k)` restricted to each query's key scope; rows are
/// the per-query weight vectors (`[Lq, Lk]` for `All`, `[Lq, m]` for `Blocks(m)`).
pub fn attention_weights(q: &Tensor, k: &Tensor, scope: KeyScope) -> Result<Tensor> {
    let (lq, dk, _) = check(q, k, k, scope)?;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut buf = Vec::new();
    let mut data = Vec::new();
    for i in 0..lq {
        probs_row(q, k, i, scope, scale, &mut buf);
        data.extend_from_slice(&buf);
    }
    let width = data.len() / lq.max(1);
    Tensor::new(vec![lq, width], data)
}

/// Attention output `A V` with `A = softmax(Q Kᵀ / √d_k)`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, scope: KeyScope) -> Result<Tensor> {
    let (lq, dk, dv) = check(q, k, v, scope)?;
    let (n_keys, _) = k.dims2()?;
    let scale = 1.0 / (dk as f64).sqrt();
    if scope == KeyScope::All {
        return Tensor::new(vec![lq, dv], attention_all_tiled(q, k, v, scale));
    }
    let mut out = vec![0.0; lq * dv];
    let mut buf = Vec::with_capacity(n_keys);
    for i in 0..lq {
        probs_row(q, k, i, scope, scale, &mut buf);
        let o = &mut out[i * dv..(i + 1) * dv];
        for (p, j) in buf.iter().zip(scope.range(i, n_keys)) {
            for (acc, vv) in o.iter_mut().zip(v.row(j)) {
                *acc += p * vv;
            }
        }
    }
    Tensor::new(vec![lq, dv], out)
}

const QUERY_TILE: usize = 16;
const KEY_TILE: usize = 128;

/// Full-scope forward over query and key tiles with a running max and
/// normalizer per query, so each key tile is reused while cached.
fn attention_all_tiled(q: &Tensor, k: &Tensor, v: &Tensor, scale: f64) -> Vec<f64> {
    let (lq, _) = q.dims2().expect("checked");
    let (lk, _) = k.dims2().expect("checked");
    let (_, dv) = v.dims2().expect("checked");
    let mut out = vec![0.0; lq * dv];
    let mut scores = vec![0.0; QUERY_TILE * KEY_TILE];
    for q0 in (0..lq).step_by(QUERY_TILE) {
        let qn = QUERY_TILE.min(lq - q0);
        let mut max = [f64::NEG_INFINITY; QUERY_TILE];
        let mut norm = [0.0; QUERY_TILE];
        let acc = &mut out[q0 * dv..(q0 + qn) * dv];
        for k0 in (0..lk).step_by(KEY_TILE) {
            let kn = KEY_TILE.min(lk - k0);
            for i in 0..qn {
                let qi = q.row(q0 + i);
                for j in 0..kn {
                    scores[i * KEY_TILE + j] = dot(qi, k.row(k0 + j)) * scale;
                }
            }
            for i in 0..qn {
                let row = &mut scores[i * KEY_TILE..i * KEY_TILE + kn];
                let tile_max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let new_max = max[i].max(tile_max);
                let o = &mut acc[i * dv..(i + 1) * dv];
                if max[i] != new_max && max[i] != f64::NEG_INFINITY {
                    let c = (max[i] - new_max).exp();
                    norm[i] *= c;
                    o.iter_mut().for_each(|x| *x *= c);
                }
                max[i] = new_max;
                for (j, s) in row.iter_mut().enumerate() {
                    let p = (*s - new_max).exp();
                    norm[i] += p;
                    for (x, vv) in o.iter_mut().zip(v.row(k0 + j)) {
                        *x += p * vv;
                    }
                }
            }
        }
        for i in 0..qn {
            acc[i * dv..(i + 1) * dv].iter_mut().for_each(|x| *x /= norm[i]);
        }
    }
    out
}

/// Records [`attention`] on the tape.
pub fn attend(tape: &mut Tape, q: Var, k: Var, v: Var, scope: KeyScope) -> Result<Var> {
    let value = attention(tape.value(q), tape.value(k), tape.value(v), scope)?;
    Ok(tape.push(
        value,
        &[q, k, v],
        Box::new(move |ctx| {
            let (q, k, v) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2]);
            let (lq, dk, dv) = check(q, k, v, scope)?;
            let (n_keys, _) = k.dims2()?;
            let scale = 1.0 / (dk as f64).sqrt();
            let mut gq = vec![0.0; lq * dk];
            let mut gk = vec![0.0; n_keys * dk];
            let mut gv = vec![0.0; n_keys * dv];
            let mut probs = Vec::with_capacity(n_keys);
            let mut gp = Vec::with_capacity(n_keys);
            for i in 0..lq {
                probs_row(q, k, i, scope, scale, &mut probs);
                let go = ctx.grad.row(i);
                let range = scope.range(i, n_keys);
                gp.clear();
                gp.extend(range.clone().map(|j| dot(go, v.row(j))));
                let inner = dot(&probs, &gp);
                let qi = q.row(i);
                for ((&p, &gpj), j) in probs.iter().zip(&gp).zip(range) {
                    for (acc, g) in gv[j * dv..(j + 1) * dv].iter_mut().zip(go) {
                        *acc += p * g;
                    }
                    let gs = p * (gpj - inner) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    for (acc, kv) in gq[i * dk..(i + 1) * dk].iter_mut().zip(k.row(j)) {
                        *acc += gs * kv;
                    }
                    for (acc, qv) in gk[j * dk..(j + 1) * dk].iter_mut().zip(qi) {
                        *acc += gs * qv;
                    }
                }
            }
            Ok(vec![
                Some(Tensor::new(vec![lq, dk], gq)?),
                Some(Tensor::new(vec![n_keys, dk], gk)?),
                Some(Tensor::new(vec![n_keys, dv], gv)?),
            ])
        }),
    ))
}
