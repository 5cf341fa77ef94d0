//! End-to-end hybrid encoder: crop plan, conv pass over the high-resolution
//! canvas, per-stage alignment and segmentation, and a tile-wise ViT whose
//! interaction layers are rewritten by the fusion module.

use std::collections::BTreeMap;

use hires_tensor::{BoundParams, Graph, ParamSet, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::convnext::{ConvBranch, ConvBranchConfig};
use crate::cvfm::{self, FusionLayerSpec, FusionMode, ResizeMethod};
use crate::error::{config, usage, Error, Result};
use crate::image::{ImageBuffer, Normalization};
use crate::planner::{apply_plan, build_crop_plan, CropPlan, PlannerConfig};
use crate::vit::{validate_layers, ViTConfig, ViewHiddenState, VisionTransformer};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Structure {
    /// Each interaction layer paired with its own conv stage.
    MultiLayer,
    /// Stage 4 only, after the last ViT layer.
    LastLayer,
    /// All four stages merged before any interaction.
    Pyramid,
}

impl Structure {
    pub fn as_str(self) -> &'static str {
        match self {
            Structure::MultiLayer => "multi",
            Structure::LastLayer => "last_layer",
            Structure::Pyramid => "pyramid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub enabled: bool,
    pub structure: Structure,
    pub mode: FusionMode,
    pub resize_method: ResizeMethod,
    /// 1-indexed ViT layers that run a fusion step.
    pub interaction_layers: Vec<usize>,
    /// Conv stage (1..=4) paired with each interaction layer; empty for pyramid.
    pub stages: Vec<usize>,
    /// Initial gate value `alpha`.
    pub gate_init: f64,
    /// Hidden width of the channel-mode MLP; the embedding width when absent.
    pub mlp_hidden: Option<usize>,
    /// Heads of the cross-attention modes.
    pub heads: usize,
    /// Channel width of the pyramid map.
    pub pyramid_width: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            structure: Structure::MultiLayer,
            mode: FusionMode::Channel,
            resize_method: ResizeMethod::Interp,
            interaction_layers: ViTConfig::desk().interaction_layers,
            stages: vec![1, 2, 3, 4],
            gate_init: 0.0,
            mlp_hidden: None,
            heads: 4,
            pyramid_width: 64,
        }
    }
}

impl FusionConfig {
    /// `(layer, stage)` pairs; stage is 0 for pyramid.
    pub fn interactions(&self) -> Vec<(usize, usize)> {
        if self.structure == Structure::Pyramid {
            self.interaction_layers.iter().map(|&l| (l, 0)).collect()
        } else {
            self.interaction_layers
                .iter()
                .copied()
                .zip(self.stages.iter().copied())
                .collect()
        }
    }

    /// Distinct conv stages whose aligned maps are needed.
    pub fn stages_used(&self) -> Vec<usize> {
        if !self.enabled {
            return Vec::new();
        }
        if self.structure == Structure::Pyramid {
            return vec![1, 2, 3, 4];
        }
        let mut s = self.stages.clone();
        s.sort_unstable();
        s.dedup();
        s
    }

    fn validate(&self, vit: &ViTConfig) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if self.interaction_layers.is_empty() {
            return config("fusion enabled with no interaction layers");
        }
        validate_layers(&self.interaction_layers, vit.depth)?;
        if !self.gate_init.is_finite() {
            return config("gate_init must be finite");
        }
        match self.structure {
            Structure::Pyramid => {
                if !self.stages.is_empty() {
                    return config("pyramid structure takes no per-layer stages");
                }
                if self.pyramid_width == 0 {
                    return config("pyramid_width must be positive");
                }
            }
            Structure::MultiLayer | Structure::LastLayer => {
                if self.stages.len() != self.interaction_layers.len() {
                    return config(format!(
                        "{} interaction layers but {} stages",
                        self.interaction_layers.len(),
                        self.stages.len()
                    ));
                }
                if self.stages.iter().any(|s| !(1..=4).contains(s)) {
                    return config(format!("stages must lie in 1..=4, got {:?}", self.stages));
                }
                if self.stages.windows(2).any(|w| w[0] > w[1]) {
                    return config("stages must be non-decreasing with layer depth");
                }
            }
        }
        if self.structure == Structure::LastLayer
            && (self.interaction_layers != [vit.depth] || self.stages != [4])
        {
            return config("last_layer structure pairs stage 4 with the final ViT layer only");
        }
        if matches!(self.mode, FusionMode::LocalCa | FusionMode::GlobalCa)
            && (self.heads == 0 || vit.embed_dim % self.heads != 0)
        {
            return config(format!(
                "{} fusion heads do not divide embed_dim {}",
                self.heads, vit.embed_dim
            ));
        }
        if self.mlp_hidden == Some(0) {
            return config("mlp_hidden must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub schema_version: u32,
    pub planner: PlannerConfig,
    pub vit: ViTConfig,
    pub conv: ConvBranchConfig,
    pub fusion: FusionConfig,
    pub normalization: Normalization,
    /// Resize the whole image into a single tile instead of cropping.
    pub force_single_tile: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            planner: PlannerConfig::desk(),
            vit: ViTConfig::desk(),
            conv: ConvBranchConfig::desk(),
            fusion: FusionConfig::default(),
            normalization: Normalization::default(),
            force_single_tile: false,
        }
    }

    pub fn full() -> Self {
        let vit = ViTConfig::full();
        Self {
            schema_version: SCHEMA_VERSION,
            planner: PlannerConfig::full(),
            fusion: FusionConfig {
                interaction_layers: vit.interaction_layers.clone(),
                heads: vit.heads,
                pyramid_width: vit.embed_dim,
                ..FusionConfig::default()
            },
            vit,
            conv: ConvBranchConfig::full(),
            normalization: Normalization::default(),
            force_single_tile: false,
        }
    }

    /// Smallest config with a 2x2 grid: 16px tiles, 8px patches, width 8.
    /// Sized for finite-difference checks.
    pub fn tiny() -> Self {
        let vit = ViTConfig {
            tile_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth: 6,
            heads: 2,
            interaction_layers: vec![1, 2, 4, 6],
        };
        Self {
            schema_version: SCHEMA_VERSION,
            planner: PlannerConfig {
                tile_size: 16,
                vit_patch_size: 8,
                conv_total_stride: 32,
                candidates: vec![[16, 32], [32, 16], [32, 32]],
            },
            fusion: FusionConfig {
                interaction_layers: vit.interaction_layers.clone(),
                heads: 2,
                pyramid_width: 8,
                ..FusionConfig::default()
            },
            vit,
            conv: ConvBranchConfig {
                stem_stride: 4,
                stage_channels: [2, 4, 8, 16],
                blocks_per_stage: [1, 1, 1, 1],
                layer_scale_init: 0.1,
            },
            normalization: Normalization::default(),
            force_single_tile: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        self.planner.validate()?;
        self.vit.validate()?;
        self.conv.validate()?;
        if self.planner.tile_size != self.vit.tile_size
            || self.planner.vit_patch_size != self.vit.patch_size
        {
            return config("planner tile/patch sizes disagree with the ViT config");
        }
        if self.planner.conv_total_stride != self.conv.total_stride() {
            return config("planner conv_total_stride disagrees with the conv branch");
        }
        self.fusion.validate(&self.vit)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// The planner geometry actually used by [`HybridEncoder::plan`].
    pub fn effective_planner(&self) -> PlannerConfig {
        if self.force_single_tile {
            self.planner.single_tile()
        } else {
            self.planner.clone()
        }
    }
}

/// Final per-view tokens, global view first, each `(g^2, d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualTokens {
    pub plan: CropPlan,
    pub views: Vec<Tensor>,
}

impl VisualTokens {
    /// `(views, tokens, dim)`.
    pub fn shape(&self) -> [usize; 3] {
        let d = self.views[0].dims();
        [self.views.len(), d[0], d[1]]
    }

    pub fn to_tensor(&self) -> Tensor {
        let data = self
            .views
            .iter()
            .flat_map(|v| v.data().iter().copied())
            .collect();
        Tensor::new(self.shape().to_vec(), data).expect("views share dims")
    }
}

/// Graph handles from one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub plan: CropPlan,
    /// Spatial tokens `(g^2, d)` per view.
    pub views: Vec<Var>,
    pub hidden: Vec<ViewHiddenState>,
}

/// One row of the alignment shape table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentRow {
    pub conv_stage: usize,
    pub input_dims: [usize; 3],
    pub output_dims: [usize; 3],
    pub vit_layer: usize,
    pub vit_dims: [usize; 3],
}

/// Shapes of a forward pass computed without allocating weights.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeReport {
    pub plan: CropPlan,
    pub conv_input: [usize; 3],
    pub stages: [[usize; 3]; 4],
    pub alignment: Vec<AlignmentRow>,
    pub views: usize,
    pub tokens_per_view: usize,
    pub embed_dim: usize,
}

#[derive(Clone, Debug)]
pub struct HybridEncoder {
    config: EncoderConfig,
    vit: VisionTransformer,
    conv: ConvBranch,
}

impl HybridEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            vit: VisionTransformer::new(config.vit.clone())?,
            conv: ConvBranch::new(config.conv.clone())?,
            config,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vit(&self) -> &VisionTransformer {
        &self.vit
    }

    pub fn conv(&self) -> &ConvBranch {
        &self.conv
    }

    /// Counterpart width seen at an interaction paired with `stage`.
    fn counterpart_channels(&self, stage: usize) -> usize {
        if self.config.fusion.structure == Structure::Pyramid {
            self.config.fusion.pyramid_width
        } else {
            cvfm::aligned_channels(stage, self.config.conv.stage_channels[stage - 1])
        }
    }

    /// Seeded parameters. Every tensor's values depend only on `(seed, name)`,
    /// so the ViT weights of a fused variant equal those of the plain baseline.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        let mut p = self.vit.init_params(seed)?;
        let f = &self.config.fusion;
        if !f.enabled {
            return Ok(p);
        }
        p.extend(self.conv.init_params(seed)?)?;
        let d = self.config.vit.embed_dim;
        for (layer, stage) in f.interactions() {
            let spec = FusionLayerSpec {
                mode: f.mode,
                embed_dim: d,
                counterpart_channels: self.counterpart_channels(stage),
                mlp_hidden: f.mlp_hidden.unwrap_or(d),
                gate_init: f.gate_init,
            };
            cvfm::init_fusion_layer(&mut p, &cvfm::layer_prefix(layer), spec, seed)?;
        }
        if f.resize_method == ResizeMethod::Conv {
            for stage in f.stages_used().into_iter().filter(|s| *s <= 2) {
                cvfm::init_resize_conv(&mut p, stage, self.config.conv.stage_channels[stage - 1])?;
            }
        }
        if f.structure == Structure::Pyramid {
            let total = (1..=4)
                .map(|s| cvfm::aligned_channels(s, self.config.conv.stage_channels[s - 1]))
                .sum();
            cvfm::init_pyramid(&mut p, total, f.pyramid_width, seed)?;
        }
        Ok(p)
    }

    pub fn plan(&self, width: usize, height: usize) -> Result<CropPlan> {
        build_crop_plan(width, height, &self.config.effective_planner())
    }

    /// Counterpart token matrices per interaction layer, each list in view order.
    fn counterparts(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        plan: &CropPlan,
        highres: Tensor,
    ) -> Result<BTreeMap<usize, Vec<Var>>> {
        let f = &self.config.fusion;
        let image = g.constant(highres);
        let stages = self.conv.forward_stages(g, params, image)?;
        let tg = plan.token_grid;
        let grid_hw = (tg * plan.grid.1, tg * plan.grid.0);
        let mut per_stage: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
        let to_tokens = |g: &mut Graph, aligned: Var| -> Result<Vec<Var>> {
            let set = cvfm::segment_views(g, aligned, plan.grid, tg)?;
            set.views()
                .into_iter()
                .map(|v| g.chw_to_tokens(v).map_err(Error::from))
                .collect()
        };
        if f.structure == Structure::Pyramid {
            let aligned = (1..=4)
                .map(|s| {
                    cvfm::align_stage(
                        g,
                        params,
                        stages.features[s - 1],
                        s,
                        f.resize_method,
                        grid_hw,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let pyramid = cvfm::build_pyramid(g, params, &aligned)?;
            per_stage.insert(0, to_tokens(g, pyramid)?);
        } else {
            for s in f.stages_used() {
                let aligned = cvfm::align_stage(
                    g,
                    params,
                    stages.features[s - 1],
                    s,
                    f.resize_method,
                    grid_hw,
                )?;
                per_stage.insert(s, to_tokens(g, aligned)?);
            }
        }
        Ok(f.interactions()
            .into_iter()
            .map(|(layer, stage)| (layer, per_stage[&stage].clone()))
            .collect())
    }

    /// Records a full forward pass on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        params: &BoundParams,
        image: &ImageBuffer,
    ) -> Result<EncoderOutput> {
        let plan = self.plan(image.width(), image.height())?;
        let planned = apply_plan(image, &plan)?;
        let views: Vec<Var> = std::iter::once(planned.global_view)
            .chain(planned.tiles)
            .map(|t| g.constant(t))
            .collect();
        let f = &self.config.fusion;
        let hidden = if f.enabled {
            let cps = self.counterparts(g, params, &plan, planned.highres)?;
            let layers: Vec<usize> = cps.keys().copied().collect();
            let (mode, heads) = (f.mode, f.heads);
            let mut hook =
                |g: &mut Graph, layer: usize, view: crate::vit::ViewId, h: Var| -> Result<Var> {
                    cvfm::fuse(
                        g,
                        params,
                        &cvfm::layer_prefix(layer),
                        mode,
                        heads,
                        h,
                        &cps[&layer],
                        view.position(),
                    )
                };
            self.vit
                .forward_with_hooks(g, params, &views, &layers, &mut hook)?
        } else {
            self.vit.forward(g, params, &views)?
        };
        let n = self.config.vit.patch_tokens();
        let spatial = hidden
            .iter()
            .map(|h| g.narrow(h.hidden, 0, 1, n).map_err(Error::from))
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderOutput {
            plan,
            views: spatial,
            hidden,
        })
    }

    /// Value-only encode.
    pub fn encode(&self, image: &ImageBuffer, params: &ParamSet) -> Result<VisualTokens> {
        let mut g = Graph::no_grad();
        let bound = g.bind(params);
        let out = self.forward(&mut g, &bound, image)?;
        Ok(VisualTokens {
            plan: out.plan,
            views: out.views.iter().map(|v| g.value(*v).clone()).collect(),
        })
    }

    /// Shape walk of [`HybridEncoder::forward`] for an image of the given size.
    pub fn dry_run(&self, width: usize, height: usize) -> Result<ShapeReport> {
        let plan = self.plan(width, height)?;
        let (hw, hh) = plan.highres_dims;
        let stage_dims = self.config.conv.stage_dims(hh, hw)?;
        let tg = plan.token_grid;
        let d = self.config.vit.embed_dim;
        let mut alignment = Vec::new();
        let f = &self.config.fusion;
        if f.enabled && f.structure != Structure::Pyramid {
            for (layer, stage) in f.interactions() {
                let input = stage_dims[stage - 1];
                let out = cvfm::align_dims(stage, input)?;
                if (out.1, out.2) != (tg * plan.grid.1, tg * plan.grid.0) {
                    return Err(Error::Tensor(hires_tensor::TensorError::Shape {
                        op: "dry_run",
                        lhs: vec![out.0, out.1, out.2],
                        rhs: vec![out.0, tg * plan.grid.1, tg * plan.grid.0],
                    }));
                }
                alignment.push(AlignmentRow {
                    conv_stage: stage,
                    input_dims: [input.0, input.1, input.2],
                    output_dims: [out.0, out.1, out.2],
                    vit_layer: layer,
                    vit_dims: [d, tg, tg],
                });
            }
        }
        Ok(ShapeReport {
            conv_input: [3, hh, hw],
            stages: stage_dims.map(|(c, h, w)| [c, h, w]),
            alignment,
            views: plan.view_count,
            tokens_per_view: tg * tg,
            embed_dim: d,
            plan,
        })
    }
}

/// Ablation ids of the default matrix.
pub fn ablation_matrix() -> Vec<String> {
    let mut ids = vec!["ds".to_string()];
    for mode in FusionMode::ALL {
        for (structure, with_conv) in [("multi", true), ("last_layer", false), ("pyramid", true)] {
            ids.push(format!("{structure}_{}", mode.as_str()));
            if with_conv {
                ids.push(format!("{structure}_{}_conv", mode.as_str()));
            }
        }
    }
    ids.push("multi_2".into());
    ids.push("multi_6".into());
    ids
}

/// Derives the config of one ablation row from `base`.
///
/// Ids: `ds`; `multi_2`, `multi_4`, `multi_6`; `pyramid`; and
/// `{multi|last_layer|pyramid}_{channel|local_ca|global_ca|add}` with an
/// optional `_conv` suffix selecting the learned resize (not defined for
/// `last_layer`, which never resizes).
pub fn make_variant(base: &EncoderConfig, id: &str) -> Result<EncoderConfig> {
    let mut cfg = base.clone();
    let layers = base.vit.interaction_layers.clone();
    let f = &mut cfg.fusion;
    f.enabled = true;
    f.resize_method = ResizeMethod::Interp;
    f.mode = FusionMode::Channel;
    let four = |layers: &[usize]| -> Result<[usize; 4]> {
        <[usize; 4]>::try_from(layers).map_err(|_| {
            Error::Usage(format!(
                "variant needs four base interaction layers, got {layers:?}"
            ))
        })
    };
    match id {
        "ds" => f.enabled = false,
        "multi_2" => {
            let l = four(&layers)?;
            f.structure = Structure::MultiLayer;
            f.interaction_layers = vec![l[0], l[3]];
            f.stages = vec![1, 4];
        }
        "multi_4" => set_multi(f, &layers)?,
        "multi_6" => {
            let l = four(&layers)?;
            let (m1, m2) = ((l[1] + l[2]) / 2, (l[2] + l[3]) / 2);
            if !(l[1] < m1 && m1 < l[2] && l[2] < m2 && m2 < l[3]) {
                return usage(format!("no room to interleave two layers into {layers:?}"));
            }
            f.structure = Structure::MultiLayer;
            f.interaction_layers = vec![l[0], l[1], m1, l[2], m2, l[3]];
            f.stages = vec![1, 2, 2, 3, 3, 4];
        }
        "pyramid" => set_pyramid(f, &layers),
        _ => {
            let (rest, conv) = match id.strip_suffix("_conv") {
                Some(r) => (r, true),
                None => (id, false),
            };
            let parsed = [
                ("multi_", Structure::MultiLayer),
                ("last_layer_", Structure::LastLayer),
                ("pyramid_", Structure::Pyramid),
            ]
            .into_iter()
            .find_map(|(p, s)| {
                rest.strip_prefix(p)
                    .and_then(FusionMode::parse)
                    .map(|m| (s, m))
            });
            let Some((structure, mode)) = parsed else {
                return usage(format!(
                    "unknown ablation `{id}`; valid: {}",
                    ablation_matrix().join(", ")
                ));
            };
            match structure {
                Structure::MultiLayer => set_multi(f, &layers)?,
                Structure::Pyramid => set_pyramid(f, &layers),
                Structure::LastLayer => {
                    if conv {
                        return usage(format!("`{id}` is undefined: last_layer uses stage 4 only"));
                    }
                    f.structure = Structure::LastLayer;
                    f.interaction_layers = vec![base.vit.depth];
                    f.stages = vec![4];
                }
            }
            f.mode = mode;
            if conv {
                f.resize_method = ResizeMethod::Conv;
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn set_multi(f: &mut FusionConfig, layers: &[usize]) -> Result<()> {
    if layers.len() != 4 {
        return usage(format!(
            "multi-layer fusion pairs four stages, base has {layers:?}"
        ));
    }
    f.structure = Structure::MultiLayer;
    f.interaction_layers = layers.to_vec();
    f.stages = vec![1, 2, 3, 4];
    Ok(())
}

fn set_pyramid(f: &mut FusionConfig, layers: &[usize]) {
    f.structure = Structure::Pyramid;
    f.interaction_layers = layers.to_vec();
    f.stages = Vec::new();
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStage {
    Pretrain,
    Finetune,
}

/// Parameter prefixes trained while both branches stay frozen.
pub const PRETRAIN_TRAINABLE: [&str; 2] = ["cvfm.", "head."];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub trainable: Vec<String>,
    pub frozen: Vec<String>,
}

/// Splits parameter names by training stage: pretraining trains only the
/// fusion module and the probe head, finetuning trains everything.
pub fn parameter_partition(params: &ParamSet, stage: TrainStage) -> Partition {
    let (trainable, frozen) =
        params
            .names()
            .map(str::to_string)
            .partition(|n: &String| match stage {
                TrainStage::Finetune => true,
                TrainStage::Pretrain => PRETRAIN_TRAINABLE.iter().any(|p| n.starts_with(p)),
            });
    Partition { trainable, frozen }
}
