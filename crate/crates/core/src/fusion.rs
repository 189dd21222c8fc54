//! Per-frame fusion of skeleton and RGB-patch tokens.
//!
//! In cross-attention mode the skeleton token of a frame queries that frame's
//! RGB patch tokens: `Q = z_sk W_q`, `K = P W_k`, `V = P W_v`, and the fused
//! token is `softmax(Q Kᵀ / √d_k) V`. The mean and linear modes are the
//! ablation baselines. No projection carries a bias, so an all-zero view
//! fuses to all-zero tokens.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, attention_weights, KeyScope};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamStore};
use crate::rng::Rng64;
use crate::tensor::{self, Tensor};

/// Tokens of one frame: `N_p` RGB patch tokens and one skeleton token.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameTokens {
    /// `[N_p, D_rgb]`
    pub rgb_patches: Tensor,
    /// `[1, D_sk]`
    pub skeleton_token: Tensor,
}

/// All frames of one view, stacked.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewTokens {
    /// `[T * N_p, D_rgb]`, frame-major.
    pub patches: Tensor,
    /// `[T, D_sk]`
    pub skeleton: Tensor,
    pub n_patches: usize,
}

impl ViewTokens {
    pub fn from_frames(frames: &[FrameTokens]) -> Result<Self> {
        let first = frames.first().ok_or_else(|| Error::input("no frames to fuse"))?;
        let (n_patches, d_rgb) = first.rgb_patches.dims2()?;
        if n_patches == 0 {
            return Err(Error::input("frames need at least one RGB patch"));
        }
        let d_sk = first.skeleton_token.len();
        for f in frames {
            if f.rgb_patches.shape() != [n_patches, d_rgb] || f.skeleton_token.len() != d_sk {
                return Err(Error::dim("frames of one view must share patch count and widths"));
            }
        }
        let patches: Vec<&Tensor> = frames.iter().map(|f| &f.rgb_patches).collect();
        let sk: Vec<Tensor> = frames
            .iter()
            .map(|f| f.skeleton_token.clone().reshape(&[1, d_sk]))
            .collect::<Result<_>>()?;
        let sk: Vec<&Tensor> = sk.iter().collect();
        Ok(Self {
            patches: tensor::concat_rows(&patches)?,
            skeleton: tensor::concat_rows(&sk)?,
            n_patches,
        })
    }

    pub fn frames(&self) -> usize {
        self.skeleton.shape()[0]
    }

    pub fn frame(&self, t: usize) -> FrameTokens {
        let np = self.n_patches;
        let idx: Vec<usize> = (t * np..(t + 1) * np).collect();
        FrameTokens {
            rgb_patches: tensor::gather_rows(&self.patches, &idx).expect("frame in range"),
            skeleton_token: tensor::gather_rows(&self.skeleton, &[t]).expect("frame in range"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    CrossAttention,
    Mean,
    Linear,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::CrossAttention, FusionMode::Mean, FusionMode::Linear];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::CrossAttention => "cross_attention",
            FusionMode::Mean => "mean",
            FusionMode::Linear => "linear",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_attention" => Ok(FusionMode::CrossAttention),
            "mean" => Ok(FusionMode::Mean),
            "linear" => Ok(FusionMode::Linear),
            other => Err(Error::config(format!(
                "unknown fusion mode {other:?} (expected cross_attention, mean or linear)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionDims {
    pub d_rgb: usize,
    pub d_sk: usize,
    pub d_key: usize,
    pub d_model: usize,
}

#[derive(Clone, Debug)]
pub enum FusionParams {
    CrossAttention { w_q: Linear, w_k: Linear, w_v: Linear },
    Mean { w_v: Linear, w_sk: Linear },
    Linear { w_lin: Linear },
}

impl FusionParams {
    pub fn new(store: &mut ParamStore, mode: FusionMode, dims: FusionDims, rng: &mut Rng64) -> Result<Self> {
        if dims.d_key == 0 || dims.d_model == 0 || dims.d_rgb == 0 || dims.d_sk == 0 {
            return Err(Error::config("fusion widths must be positive"));
        }
        Ok(match mode {
            FusionMode::CrossAttention => FusionParams::CrossAttention {
                w_q: Linear::new(store, "fusion.w_q", dims.d_sk, dims.d_key, false, rng),
                w_k: Linear::new(store, "fusion.w_k", dims.d_rgb, dims.d_key, false, rng),
                w_v: Linear::new(store, "fusion.w_v", dims.d_rgb, dims.d_model, false, rng),
            },
            FusionMode::Mean => FusionParams::Mean {
                w_v: Linear::new(store, "fusion.w_v", dims.d_rgb, dims.d_model, false, rng),
                w_sk: Linear::new(store, "fusion.w_sk", dims.d_sk, dims.d_model, false, rng),
            },
            FusionMode::Linear => FusionParams::Linear {
                w_lin: Linear::new(store, "fusion.w_lin", dims.d_sk + dims.d_rgb, dims.d_model, false, rng),
            },
        })
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            FusionParams::CrossAttention { .. } => FusionMode::CrossAttention,
            FusionParams::Mean { .. } => FusionMode::Mean,
            FusionParams::Linear { .. } => FusionMode::Linear,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            FusionParams::CrossAttention { w_q, w_k, w_v } => w_q.param_count() + w_k.param_count() + w_v.param_count(),
            FusionParams::Mean { w_v, w_sk } => w_v.param_count() + w_sk.param_count(),
            FusionParams::Linear { w_lin } => w_lin.param_count(),
        }
    }

    /// Fuses every frame of one view into a `[T, D]` sequence.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, view: &ViewTokens) -> Result<Var> {
        let t = view.frames();
        if t == 0 {
            return Err(Error::input("empty frame list"));
        }
        if view.patches.shape()[0] != t * view.n_patches {
            return Err(Error::dim("patch rows do not match frames x patches"));
        }
        let skeleton = tape.constant(view.skeleton.clone());
        match self {
            FusionParams::CrossAttention { w_q, w_k, w_v } => {
                let patches = tape.constant(view.patches.clone());
                let q = w_q.forward(tape, p, skeleton)?;
                let k = w_k.forward(tape, p, patches)?;
                let v = w_v.forward(tape, p, patches)?;
                attend(tape, q, k, v, KeyScope::Blocks(view.n_patches))
            }
            FusionParams::Mean { w_v, w_sk } => {
                let mean = tape.constant(tensor::group_mean_rows(&view.patches, view.n_patches)?);
                let a = w_v.forward(tape, p, mean)?;
                let b = w_sk.forward(tape, p, skeleton)?;
                let s = tape.add(a, b)?;
                Ok(tape.scale(s, 0.5))
            }
            FusionParams::Linear { w_lin } => {
                let mean = tape.constant(tensor::group_mean_rows(&view.patches, view.n_patches)?);
                let both = tape.concat_cols(&[skeleton, mean])?;
                w_lin.forward(tape, p, both)
            }
        }
    }

    /// Per-frame attention weights `[T, N_p]` (cross-attention mode only).
    pub fn attention_weights(&self, store: &ParamStore, view: &ViewTokens) -> Result<Tensor> {
        let FusionParams::CrossAttention { w_q, w_k, .. } = self else {
            return Err(Error::config("attention weights exist only in cross_attention mode"));
        };
        let q = view.skeleton.matmul(store.get(w_q.weight))?;
        let k = view.patches.matmul(store.get(w_k.weight))?;
        attention_weights(&q, &k, KeyScope::Blocks(view.n_patches))
    }
}

/// Fuses a frame sequence of one view, `[T, D]`.
pub fn fuse_sequence(frames: &[FrameTokens], params: &FusionParams, store: &ParamStore) -> Result<Tensor> {
    let view = ViewTokens::from_frames(frames)?;
    let mut tape = Tape::inference();
    let p = store.bind(&mut tape);
    let out = params.forward(&mut tape, &p, &view)?;
    Ok(tape.value(out).clone())
}

/// Cross-attention fusion of a single frame, `[D]`.
pub fn cross_attention_fuse(frame: &FrameTokens, params: &FusionParams, store: &ParamStore) -> Result<Tensor> {
    if params.mode() != FusionMode::CrossAttention {
        return Err(Error::config("cross_attention_fuse needs cross_attention parameters"));
    }
    let out = fuse_sequence(std::slice::from_ref(frame), params, store)?;
    let d = out.len();
    out.reshape(&[d])
}

/// Picks one frame index per segment of an equal partition of `0..length`.
pub fn sample_segments(length: usize, num_segments: usize, rng: &mut Rng64) -> Result<Vec<usize>> {
    if num_segments == 0 || length < num_segments {
        return Err(Error::input(format!(
            "cannot sample {num_segments} segments from {length} frames"
        )));
    }
    Ok((0..num_segments)
        .map(|i| {
            let lo = i * length / num_segments;
            let hi = (i + 1) * length / num_segments;
            rng.random_range(lo..hi)
        })
        .collect())
}

/// Skeleton index paired with each RGB frame: `i * (sk_count / rgb_count)`.
pub fn skeleton_indices(sk_count: usize, rgb_count: usize) -> Result<Vec<usize>> {
    if rgb_count == 0 || !sk_count.is_multiple_of(rgb_count) {
        return Err(Error::config(format!(
            "{sk_count} skeleton tokens cannot be paired with {rgb_count} RGB frames"
        )));
    }
    let stride = sk_count / rgb_count;
    Ok((0..rgb_count).map(|i| i * stride).collect())
}

/// Pairs `rgb: [T, N_p, D_rgb]` frames with `skeleton: [T_sk, D_sk]` tokens.
pub fn align_tokens(skeleton: &Tensor, rgb: &Tensor) -> Result<ViewTokens> {
    let [t, n_patches, d_rgb] = *rgb.shape() else {
        return Err(Error::dim(format!(
            "RGB features must be [T, N_p, D], got {:?}",
            rgb.shape()
        )));
    };
    let (t_sk, _) = skeleton.dims2()?;
    if n_patches == 0 {
        return Err(Error::input("RGB features need at least one patch"));
    }
    let idx = skeleton_indices(t_sk, t)?;
    Ok(ViewTokens {
        patches: rgb.clone().reshape(&[t * n_patches, d_rgb])?,
        skeleton: tensor::gather_rows(skeleton, &idx)?,
        n_patches,
    })
}
