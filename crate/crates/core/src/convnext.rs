//! Four-stage ConvNeXt-style backbone run once over the high-resolution canvas.

use hires_tensor::nn::{self, init_layer_norm, init_linear, init_trunc_normal};
use hires_tensor::{BoundParams, ConvGeom, Graph, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

pub const PREFIX: &str = "conv";
const DW_KERNEL: usize = 7;
const EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBranchConfig {
    pub stem_stride: usize,
    pub stage_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
    /// Initial value of the per-channel residual scale in every block.
    pub layer_scale_init: f64,
}

impl ConvBranchConfig {
    /// ConvNeXt-L widths and depths.
    pub fn full() -> Self {
        Self {
            stem_stride: 4,
            stage_channels: [192, 384, 768, 1536],
            blocks_per_stage: [3, 3, 27, 3],
            layer_scale_init: 1e-6,
        }
    }

    pub fn desk() -> Self {
        Self {
            stem_stride: 4,
            stage_channels: [16, 32, 64, 128],
            blocks_per_stage: [1, 1, 2, 1],
            layer_scale_init: 0.1,
        }
    }

    /// Stem stride times three stride-2 transitions.
    pub fn total_stride(&self) -> usize {
        self.stem_stride * 8
    }

    /// Spatial stride of stage `i` (0-based) relative to the input.
    pub fn stage_stride(&self, i: usize) -> usize {
        self.stem_stride << i
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_stride() != 32 {
            return config(format!(
                "total stride must be 32, stem stride {} gives {}",
                self.stem_stride,
                self.total_stride()
            ));
        }
        if self.stage_channels[0] == 0 {
            return config("stage channels must be positive");
        }
        for i in 1..4 {
            if self.stage_channels[i] != 2 * self.stage_channels[i - 1] {
                return config(format!(
                    "stage channels must double per stage, got {:?}",
                    self.stage_channels
                ));
            }
        }
        if !self.layer_scale_init.is_finite() {
            return config("layer_scale_init must be finite");
        }
        Ok(())
    }

    /// `(C, H, W)` of each stage for a `height x width` input, without
    /// allocating anything.
    pub fn stage_dims(&self, height: usize, width: usize) -> Result<[(usize, usize, usize); 4]> {
        self.validate()?;
        let s = self.total_stride();
        if height % s != 0 || width % s != 0 || height == 0 || width == 0 {
            return Err(Error::Tensor(hires_tensor::TensorError::Geometry {
                op: "forward_stages",
                msg: format!("input {height}x{width} not divisible by total stride {s}"),
            }));
        }
        Ok(std::array::from_fn(|i| {
            let st = self.stage_stride(i);
            (self.stage_channels[i], height / st, width / st)
        }))
    }
}

/// The four stage outputs `F_vh^1..4`.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatureSet {
    pub features: [Var; 4],
}

fn stage_prefix(i: usize) -> String {
    format!("{PREFIX}.stages.{i}")
}

fn block_prefix(i: usize, j: usize) -> String {
    format!("{PREFIX}.stages.{i}.blocks.{j:02}")
}

#[derive(Clone, Debug)]
pub struct ConvBranch {
    config: ConvBranchConfig,
}

impl ConvBranch {
    pub fn new(config: ConvBranchConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ConvBranchConfig {
        &self.config
    }

    /// Seeded parameters: truncated-normal weights (std 0.02), zero biases,
    /// unit norms and constant layer scales.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let c = &self.config;
        let mut p = ParamSet::new();
        let s = c.stem_stride;
        init_trunc_normal(
            &mut p,
            &format!("{PREFIX}.stem.weight"),
            &[c.stage_channels[0], 3, s, s],
            seed,
        )?;
        p.insert(
            format!("{PREFIX}.stem.bias"),
            Tensor::zeros(vec![c.stage_channels[0]])?,
        )?;
        init_layer_norm(&mut p, &format!("{PREFIX}.stem.norm"), c.stage_channels[0])?;
        for i in 0..4 {
            let ch = c.stage_channels[i];
            if i > 0 {
                let prev = c.stage_channels[i - 1];
                let sp = stage_prefix(i);
                init_layer_norm(&mut p, &format!("{sp}.down.norm"), prev)?;
                init_trunc_normal(
                    &mut p,
                    &format!("{sp}.down.conv.weight"),
                    &[ch, prev, 2, 2],
                    seed,
                )?;
                p.insert(format!("{sp}.down.conv.bias"), Tensor::zeros(vec![ch])?)?;
            }
            for j in 0..c.blocks_per_stage[i] {
                let bp = block_prefix(i, j);
                init_trunc_normal(
                    &mut p,
                    &format!("{bp}.dw.weight"),
                    &[ch, 1, DW_KERNEL, DW_KERNEL],
                    seed,
                )?;
                p.insert(format!("{bp}.dw.bias"), Tensor::zeros(vec![ch])?)?;
                init_layer_norm(&mut p, &format!("{bp}.norm"), ch)?;
                init_linear(&mut p, &format!("{bp}.pw1"), EXPANSION * ch, ch, seed)?;
                init_linear(&mut p, &format!("{bp}.pw2"), ch, EXPANSION * ch, seed)?;
                p.insert(
                    format!("{bp}.gamma"),
                    Tensor::full(vec![ch], c.layer_scale_init)?,
                )?;
            }
        }
        Ok(p)
    }

    /// Layer norm over the channel axis of a `(C,H,W)` map.
    fn channel_norm(g: &mut Graph, x: Var, params: &BoundParams, prefix: &str) -> Result<Var> {
        let (_, h, w) = g.value(x).chw()?;
        let t = g.chw_to_tokens(x)?;
        let t = nn::layer_norm(g, t, params, prefix)?;
        Ok(g.tokens_to_chw(t, h, w)?)
    }

    /// depthwise 7x7 -> norm -> pointwise x4 -> gelu -> pointwise -> scale -> residual
    fn block(g: &mut Graph, x: Var, params: &BoundParams, prefix: &str) -> Result<Var> {
        let (c, h, w) = g.value(x).chw()?;
        let dw = g.conv2d(
            x,
            params.get(&format!("{prefix}.dw.weight"))?,
            Some(params.get(&format!("{prefix}.dw.bias"))?),
            ConvGeom::new(1, DW_KERNEL / 2, c),
        )?;
        let t = g.chw_to_tokens(dw)?;
        let t = nn::layer_norm(g, t, params, &format!("{prefix}.norm"))?;
        let t = nn::linear(g, t, params, &format!("{prefix}.pw1"))?;
        let t = g.gelu(t)?;
        let t = nn::linear(g, t, params, &format!("{prefix}.pw2"))?;
        let t = g.mul_row(t, params.get(&format!("{prefix}.gamma"))?)?;
        let y = g.tokens_to_chw(t, h, w)?;
        Ok(g.add(x, y)?)
    }

    /// Runs all four stages over a `(3,H,W)` input.
    pub fn forward_stages(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        image: Var,
    ) -> Result<StageFeatureSet> {
        let (c_in, h, w) = g.value(image).chw()?;
        if c_in != 3 {
            return Err(Error::Tensor(hires_tensor::TensorError::Shape {
                op: "forward_stages",
                lhs: g.dims(image).to_vec(),
                rhs: vec![3, h, w],
            }));
        }
        self.config.stage_dims(h, w)?;
        let c = &self.config;
        let s = c.stem_stride;
        let mut x = g.conv2d(
            image,
            params.get(&format!("{PREFIX}.stem.weight"))?,
            Some(params.get(&format!("{PREFIX}.stem.bias"))?),
            ConvGeom::new(s, 0, 1),
        )?;
        x = Self::channel_norm(g, x, params, &format!("{PREFIX}.stem.norm"))?;
        let mut features = Vec::with_capacity(4);
        for i in 0..4 {
            if i > 0 {
                let sp = stage_prefix(i);
                x = Self::channel_norm(g, x, params, &format!("{sp}.down.norm"))?;
                x = g.conv2d(
                    x,
                    params.get(&format!("{sp}.down.conv.weight"))?,
                    Some(params.get(&format!("{sp}.down.conv.bias"))?),
                    ConvGeom::new(2, 0, 1),
                )?;
            }
            for j in 0..c.blocks_per_stage[i] {
                x = Self::block(g, x, params, &block_prefix(i, j))?;
            }
            features.push(x);
        }
        Ok(StageFeatureSet {
            features: [features[0], features[1], features[2], features[3]],
        })
    }
}

/// Builds the branch and its seeded parameters.
pub fn build_conv_branch(config: ConvBranchConfig, seed: u64) -> Result<(ConvBranch, ParamSet)> {
    let branch = ConvBranch::new(config)?;
    let params = branch.init_params(seed)?;
    Ok((branch, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_dims_desk_and_full() {
        let desk = ConvBranchConfig::desk().stage_dims(384, 384).unwrap();
        assert_eq!(
            desk,
            [(16, 96, 96), (32, 48, 48), (64, 24, 24), (128, 12, 12)]
        );
        let full = ConvBranchConfig::full().stage_dims(768, 768).unwrap();
        assert_eq!(
            full,
            [
                (192, 192, 192),
                (384, 96, 96),
                (768, 48, 48),
                (1536, 24, 24)
            ]
        );
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ConvBranchConfig::desk();
        c.stem_stride = 2;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ConvBranchConfig::desk();
        c.stage_channels = [16, 24, 64, 128];
        assert!(c.validate().is_err());
        assert!(ConvBranchConfig::desk().stage_dims(100, 96).is_err());
    }
}
