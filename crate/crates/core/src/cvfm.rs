//! Conv/ViT deep fusion: align each conv stage to the ViT token grid, split it
//! into per-view counterparts and merge it into ViT hidden states through a
//! `tanh`-gated residual.

use hires_tensor::nn::{self, init_attention, init_linear};
use hires_tensor::{BoundParams, ConvGeom, Graph, ParamSet, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PREFIX: &str = "cvfm";

/// Channel multiplier applied by alignment at stages 1..4.
pub const STAGE_MULTIPLIERS: [usize; 4] = [16, 4, 4, 1];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// `h + tanh(a) * MLP(h ++ c)`.
    Channel,
    /// Cross-attention from the view's tokens to its own counterpart.
    LocalCa,
    /// Cross-attention to every view's counterpart tokens.
    GlobalCa,
    /// `h + tanh(a) * Linear(c)`.
    Add,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::Channel,
        FusionMode::LocalCa,
        FusionMode::GlobalCa,
        FusionMode::Add,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Channel => "channel",
            FusionMode::LocalCa => "local_ca",
            FusionMode::GlobalCa => "global_ca",
            FusionMode::Add => "add",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }
}

/// How stages 1 and 2 are halved before space-to-depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResizeMethod {
    Interp,
    /// Learned stride-2 2x2 convolution.
    Conv,
}

fn check_stage(stage: usize) -> Result<()> {
    if !(1..=4).contains(&stage) {
        return Err(Error::Usage(format!(
            "stage index must be 1..=4, got {stage}"
        )));
    }
    Ok(())
}

/// Channels after alignment.
pub fn aligned_channels(stage: usize, channels: usize) -> usize {
    channels * STAGE_MULTIPLIERS[stage - 1]
}

/// `(C', H', W')` after alignment of a `(C, H, W)` stage map, shape-only.
pub fn align_dims(stage: usize, dims: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    check_stage(stage)?;
    let (c, h, w) = dims;
    // stage 1: /2 then /4; stage 2: /2 then /2; stage 3: /2; stage 4: 1
    let shrink = [8, 4, 2, 1][stage - 1];
    if h % shrink != 0 || w % shrink != 0 {
        return Err(Error::Tensor(TensorError::Geometry {
            op: "align_stage",
            msg: format!("stage {stage} map {h}x{w} not divisible by {shrink}"),
        }));
    }
    Ok((aligned_channels(stage, c), h / shrink, w / shrink))
}

pub fn resize_prefix(stage: usize) -> String {
    format!("{PREFIX}.align.stage{stage}.resize")
}

/// Learned halving conv for stage 1 or 2, initialised to a 2x2 box average.
pub fn init_resize_conv(params: &mut ParamSet, stage: usize, channels: usize) -> Result<()> {
    let mut w = Tensor::zeros(vec![channels, channels, 2, 2])?;
    for c in 0..channels {
        for k in 0..4 {
            w.data_mut()[(c * channels + c) * 4 + k] = 0.25;
        }
    }
    let p = resize_prefix(stage);
    params.insert(format!("{p}.weight"), w)?;
    params.insert(format!("{p}.bias"), Tensor::zeros(vec![channels])?)?;
    Ok(())
}

fn halve(
    g: &mut Graph,
    params: &BoundParams,
    x: Var,
    stage: usize,
    method: ResizeMethod,
) -> Result<Var> {
    let (_, h, w) = g.value(x).chw()?;
    match method {
        ResizeMethod::Interp => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::Tensor(TensorError::Geometry {
                    op: "align_stage",
                    msg: format!("cannot halve {h}x{w}"),
                }));
            }
            Ok(g.interpolate_bilinear(x, h / 2, w / 2)?)
        }
        ResizeMethod::Conv => {
            let p = resize_prefix(stage);
            Ok(g.conv2d(
                x,
                params.get(&format!("{p}.weight"))?,
                Some(params.get(&format!("{p}.bias"))?),
                ConvGeom::new(2, 0, 1),
            )?)
        }
    }
}

/// Maps a stage output onto the token grid of the whole canvas,
/// `(C * m, g * n_h, g * n_w)`.
pub fn align_stage(
    g: &mut Graph,
    params: &BoundParams,
    feature: Var,
    stage: usize,
    method: ResizeMethod,
    grid_hw: (usize, usize),
) -> Result<Var> {
    let dims = g.value(feature).chw()?;
    let expect = align_dims(stage, dims)?;
    if (expect.1, expect.2) != grid_hw {
        return Err(Error::Tensor(TensorError::Shape {
            op: "align_stage",
            lhs: vec![dims.0, dims.1, dims.2],
            rhs: vec![expect.0, grid_hw.0, grid_hw.1],
        }));
    }
    let out = match stage {
        1 => {
            let x = halve(g, params, feature, stage, method)?;
            g.space_to_depth(x, 4)?
        }
        2 => {
            let x = halve(g, params, feature, stage, method)?;
            g.space_to_depth(x, 2)?
        }
        3 => g.space_to_depth(feature, 2)?,
        _ => feature,
    };
    Ok(out)
}

/// Global and per-tile counterparts of one aligned map, each `(C', g, g)`.
#[derive(Clone, Debug)]
pub struct CounterpartSet {
    pub global: Var,
    /// Row-major tile order.
    pub locals: Vec<Var>,
}

impl CounterpartSet {
    /// `[global, loc_0, ..]`, matching the view order.
    pub fn views(&self) -> Vec<Var> {
        std::iter::once(self.global)
            .chain(self.locals.iter().copied())
            .collect()
    }
}

/// Splits an aligned `(C', g*n_h, g*n_w)` map into `n_w * n_h` local `g x g`
/// tiles and a bilinear `g x g` summary of the whole map.
pub fn segment_views(
    g: &mut Graph,
    aligned: Var,
    grid: (usize, usize),
    token_grid: usize,
) -> Result<CounterpartSet> {
    let (c, h, w) = g.value(aligned).chw()?;
    let (n_w, n_h) = grid;
    if h != token_grid * n_h || w != token_grid * n_w {
        return Err(Error::Tensor(TensorError::Shape {
            op: "segment_views",
            lhs: vec![c, h, w],
            rhs: vec![c, token_grid * n_h, token_grid * n_w],
        }));
    }
    let mut locals = Vec::with_capacity(n_w * n_h);
    for row in 0..n_h {
        for col in 0..n_w {
            locals.push(g.crop(
                aligned,
                row * token_grid,
                col * token_grid,
                token_grid,
                token_grid,
            )?);
        }
    }
    let global = g.interpolate_bilinear(aligned, token_grid, token_grid)?;
    Ok(CounterpartSet { global, locals })
}

pub fn layer_prefix(layer: usize) -> String {
    format!("{PREFIX}.layer{layer:02}")
}

/// Width and gate settings for one interaction layer.
#[derive(Clone, Copy, Debug)]
pub struct FusionLayerSpec {
    pub mode: FusionMode,
    pub embed_dim: usize,
    pub counterpart_channels: usize,
    pub mlp_hidden: usize,
    pub gate_init: f64,
}

/// Gate, and the mode-specific weights, under `prefix`.
pub fn init_fusion_layer(
    params: &mut ParamSet,
    prefix: &str,
    spec: FusionLayerSpec,
    seed: u64,
) -> Result<()> {
    let d = spec.embed_dim;
    let c = spec.counterpart_channels;
    params.insert(format!("{prefix}.alpha"), Tensor::scalar(spec.gate_init))?;
    match spec.mode {
        FusionMode::Channel => {
            init_linear(
                params,
                &format!("{prefix}.mlp.fc1"),
                spec.mlp_hidden,
                d + c,
                seed,
            )?;
            init_linear(
                params,
                &format!("{prefix}.mlp.fc2"),
                d,
                spec.mlp_hidden,
                seed,
            )?;
        }
        FusionMode::LocalCa | FusionMode::GlobalCa => {
            init_linear(params, &format!("{prefix}.kv_proj"), d, c, seed)?;
            init_attention(params, &format!("{prefix}.attn"), d, seed)?;
        }
        FusionMode::Add => init_linear(params, &format!("{prefix}.proj"), d, c, seed)?,
    }
    Ok(())
}

/// Rewrites one view's hidden state with its counterpart.
///
/// `hidden` is `(g^2, d)` or `(1 + g^2, d)` with a leading class token, which
/// passes through untouched. `counterparts` holds every view's counterpart as
/// `(g^2, C')` token matrices in view order; `view` selects this view's own.
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    g: &mut Graph,
    params: &BoundParams,
    prefix: &str,
    mode: FusionMode,
    heads: usize,
    hidden: Var,
    counterparts: &[Var],
    view: usize,
) -> Result<Var> {
    let own = *counterparts
        .get(view)
        .ok_or_else(|| Error::Usage(format!("no counterpart for view {view}")))?;
    let (tokens, _) = g.value(own).rows_cols()?;
    let (rows, _) = g.value(hidden).rows_cols()?;
    let has_cls = if rows == tokens {
        false
    } else if rows == tokens + 1 {
        true
    } else {
        return Err(Error::Tensor(TensorError::Shape {
            op: "fuse",
            lhs: g.dims(hidden).to_vec(),
            rhs: g.dims(own).to_vec(),
        }));
    };
    let spatial = if has_cls {
        g.narrow(hidden, 0, 1, tokens)?
    } else {
        hidden
    };
    let delta = match mode {
        FusionMode::Channel => {
            let cat = g.concat(&[spatial, own], 1)?;
            let h = nn::linear(g, cat, params, &format!("{prefix}.mlp.fc1"))?;
            let h = g.gelu(h)?;
            nn::linear(g, h, params, &format!("{prefix}.mlp.fc2"))?
        }
        FusionMode::LocalCa => {
            let kv = nn::linear(g, own, params, &format!("{prefix}.kv_proj"))?;
            nn::attention_block(g, spatial, kv, params, &format!("{prefix}.attn"), heads)?
        }
        FusionMode::GlobalCa => {
            let kv = counterparts
                .iter()
                .map(|&c| nn::linear(g, c, params, &format!("{prefix}.kv_proj")))
                .collect::<hires_tensor::Result<Vec<_>>>()?;
            let kv = g.concat(&kv, 0)?;
            nn::attention_block(g, spatial, kv, params, &format!("{prefix}.attn"), heads)?
        }
        FusionMode::Add => nn::linear(g, own, params, &format!("{prefix}.proj"))?,
    };
    let gate = g.tanh(params.get(&format!("{prefix}.alpha"))?)?;
    let gated = g.scale_by(delta, gate)?;
    let fused = g.add(spatial, gated)?;
    if has_cls {
        let cls = g.narrow(hidden, 0, 0, 1)?;
        Ok(g.concat(&[cls, fused], 0)?)
    } else {
        Ok(fused)
    }
}

pub fn pyramid_prefix() -> String {
    format!("{PREFIX}.pyramid.proj")
}

pub fn init_pyramid(
    params: &mut ParamSet,
    in_channels: usize,
    width: usize,
    seed: u64,
) -> Result<()> {
    Ok(init_linear(
        params,
        &pyramid_prefix(),
        width,
        in_channels,
        seed,
    )?)
}

/// Concatenates the four aligned stages on channels and projects each
/// position to the pyramid width.
pub fn build_pyramid(g: &mut Graph, params: &BoundParams, aligned: &[Var]) -> Result<Var> {
    if aligned.len() != 4 {
        return Err(Error::Usage(format!(
            "pyramid needs 4 stages, got {}",
            aligned.len()
        )));
    }
    let (_, h, w) = g.value(aligned[0]).chw()?;
    let cat = g.concat_channels(aligned)?;
    let t = g.chw_to_tokens(cat)?;
    let t = nn::linear(g, t, params, &pyramid_prefix())?;
    Ok(g.tokens_to_chw(t, h, w)?)
}
