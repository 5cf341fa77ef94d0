//! Pre-norm vision transformer with per-layer hook points.

use std::fmt;

use hires_tensor::nn::{self, init_attention, init_layer_norm, init_linear, init_trunc_normal};
use hires_tensor::{BoundParams, ConvGeom, Graph, ParamSet, TensorError, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

pub const PREFIX: &str = "vit";
const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub tile_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// 1-indexed layers after which fusion may rewrite the hidden state.
    pub interaction_layers: Vec<usize>,
}

impl ViTConfig {
    /// CLIP ViT-L/14 at 336.
    pub fn full() -> Self {
        Self {
            tile_size: 336,
            patch_size: 14,
            embed_dim: 1024,
            depth: 24,
            heads: 16,
            interaction_layers: vec![2, 6, 12, 20],
        }
    }

    pub fn desk() -> Self {
        Self {
            tile_size: 48,
            patch_size: 8,
            embed_dim: 64,
            depth: 8,
            heads: 4,
            interaction_layers: vec![1, 2, 4, 6],
        }
    }

    pub fn token_grid(&self) -> usize {
        self.tile_size / self.patch_size
    }

    /// Spatial tokens per view, `g^2`.
    pub fn patch_tokens(&self) -> usize {
        self.token_grid().pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.tile_size == 0 || self.tile_size % self.patch_size != 0 {
            return config(format!(
                "tile_size {} not divisible by patch_size {}",
                self.tile_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.depth == 0 {
            return config("embed_dim and depth must be positive");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return config(format!(
                "{} heads do not divide embed_dim {}",
                self.heads, self.embed_dim
            ));
        }
        validate_layers(&self.interaction_layers, self.depth)
    }
}

pub(crate) fn validate_layers(layers: &[usize], depth: usize) -> Result<()> {
    if layers.windows(2).any(|w| w[0] >= w[1]) {
        return config(format!(
            "interaction layers must be strictly increasing, got {layers:?}"
        ));
    }
    if layers.iter().any(|&l| l == 0 || l > depth) {
        return config(format!(
            "interaction layers {layers:?} must lie in 1..={depth}"
        ));
    }
    Ok(())
}

/// Which view a hidden state belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ViewId {
    Global,
    /// Row-major tile index.
    Local(usize),
}

impl ViewId {
    /// Position in the `[global, loc_0, loc_1, ..]` ordering.
    pub fn position(self) -> usize {
        match self {
            ViewId::Global => 0,
            ViewId::Local(k) => k + 1,
        }
    }

    pub fn from_position(i: usize) -> Self {
        if i == 0 {
            ViewId::Global
        } else {
            ViewId::Local(i - 1)
        }
    }
}

impl fmt::Display for ViewId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViewId::Global => write!(f, "global"),
            ViewId::Local(k) => write!(f, "loc_{k}"),
        }
    }
}

/// Final hidden state of one view: class token row followed by `g^2` patch rows.
#[derive(Clone, Copy, Debug)]
pub struct ViewHiddenState {
    pub view: ViewId,
    pub hidden: Var,
}

/// Callback run after an interaction layer; returns the replacement hidden state.
pub type Hook<'a> = dyn FnMut(&mut Graph, usize, ViewId, Var) -> Result<Var> + 'a;

#[derive(Clone, Debug)]
pub struct VisionTransformer {
    config: ViTConfig,
}

fn block_prefix(l: usize) -> String {
    format!("{PREFIX}.blocks.{l:02}")
}

impl VisionTransformer {
    pub fn new(config: ViTConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let c = &self.config;
        let d = c.embed_dim;
        let p_sz = c.patch_size;
        let mut p = ParamSet::new();
        init_trunc_normal(
            &mut p,
            &format!("{PREFIX}.patch_embed.weight"),
            &[d, 3, p_sz, p_sz],
            seed,
        )?;
        p.insert(
            format!("{PREFIX}.patch_embed.bias"),
            hires_tensor::Tensor::zeros(vec![d])?,
        )?;
        init_trunc_normal(&mut p, &format!("{PREFIX}.cls_token"), &[1, d], seed)?;
        init_trunc_normal(
            &mut p,
            &format!("{PREFIX}.pos_embed"),
            &[c.patch_tokens() + 1, d],
            seed,
        )?;
        for l in 1..=c.depth {
            let bp = block_prefix(l);
            init_layer_norm(&mut p, &format!("{bp}.norm1"), d)?;
            init_attention(&mut p, &format!("{bp}.attn"), d, seed)?;
            init_layer_norm(&mut p, &format!("{bp}.norm2"), d)?;
            init_linear(&mut p, &format!("{bp}.mlp.fc1"), MLP_RATIO * d, d, seed)?;
            init_linear(&mut p, &format!("{bp}.mlp.fc2"), d, MLP_RATIO * d, seed)?;
        }
        init_layer_norm(&mut p, &format!("{PREFIX}.norm"), d)?;
        Ok(p)
    }

    /// Patchify, prepend the class token and add positional embeddings.
    pub fn embed(&self, g: &mut Graph, params: &BoundParams, view: Var) -> Result<Var> {
        let t = self.config.tile_size;
        if g.dims(view) != [3, t, t] {
            return Err(Error::Tensor(TensorError::Shape {
                op: "vit embed",
                lhs: g.dims(view).to_vec(),
                rhs: vec![3, t, t],
            }));
        }
        let p = self.config.patch_size;
        let x = g.conv2d(
            view,
            params.get(&format!("{PREFIX}.patch_embed.weight"))?,
            Some(params.get(&format!("{PREFIX}.patch_embed.bias"))?),
            ConvGeom::new(p, 0, 1),
        )?;
        let tokens = g.chw_to_tokens(x)?;
        let with_cls = g.concat(&[params.get(&format!("{PREFIX}.cls_token"))?, tokens], 0)?;
        Ok(g.add(with_cls, params.get(&format!("{PREFIX}.pos_embed"))?)?)
    }

    /// One pre-norm block, `l` is 1-indexed.
    pub fn block(&self, g: &mut Graph, params: &BoundParams, l: usize, x: Var) -> Result<Var> {
        let bp = block_prefix(l);
        let h = nn::layer_norm(g, x, params, &format!("{bp}.norm1"))?;
        let a = nn::attention_block(g, h, h, params, &format!("{bp}.attn"), self.config.heads)?;
        let x = g.add(x, a)?;
        let h = nn::layer_norm(g, x, params, &format!("{bp}.norm2"))?;
        let h = nn::linear(g, h, params, &format!("{bp}.mlp.fc1"))?;
        let h = g.gelu(h)?;
        let h = nn::linear(g, h, params, &format!("{bp}.mlp.fc2"))?;
        Ok(g.add(x, h)?)
    }

    pub fn final_norm(&self, g: &mut Graph, params: &BoundParams, x: Var) -> Result<Var> {
        nn::layer_norm(g, x, params, &format!("{PREFIX}.norm")).map_err(Into::into)
    }

    /// Encodes each view independently. After every layer listed in `layers`
    /// the hook receives `(layer, view, hidden)` and its return value replaces
    /// the hidden state. Layers run outermost, so hooks fire in increasing
    /// layer order and once per `(layer, view)`.
    pub fn forward_with_hooks(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        views: &[Var],
        layers: &[usize],
        hook: &mut Hook<'_>,
    ) -> Result<Vec<ViewHiddenState>> {
        validate_layers(layers, self.config.depth)?;
        let mut hidden = views
            .iter()
            .map(|&v| self.embed(g, params, v))
            .collect::<Result<Vec<_>>>()?;
        for l in 1..=self.config.depth {
            let hooked = layers.contains(&l);
            for (i, h) in hidden.iter_mut().enumerate() {
                let mut x = self.block(g, params, l, *h)?;
                if hooked {
                    let dims = g.dims(x).to_vec();
                    let y = hook(g, l, ViewId::from_position(i), x)?;
                    if g.dims(y) != dims.as_slice() {
                        return Err(Error::Tensor(TensorError::Shape {
                            op: "vit hook",
                            lhs: g.dims(y).to_vec(),
                            rhs: dims,
                        }));
                    }
                    x = y;
                }
                *h = x;
            }
        }
        hidden
            .into_iter()
            .enumerate()
            .map(|(i, h)| {
                Ok(ViewHiddenState {
                    view: ViewId::from_position(i),
                    hidden: self.final_norm(g, params, h)?,
                })
            })
            .collect()
    }

    /// Plain forward without hooks.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        views: &[Var],
    ) -> Result<Vec<ViewHiddenState>> {
        self.forward_with_hooks(g, params, views, &[], &mut |_, _, _, x| Ok(x))
    }
}

pub fn build_vit(config: ViTConfig, seed: u64) -> Result<(VisionTransformer, ParamSet)> {
    let vit = VisionTransformer::new(config)?;
    let params = vit.init_params(seed)?;
    Ok((vit, params))
}
