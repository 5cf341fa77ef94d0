//! Dynamic crop planning: choose a predefined target resolution for an input
//! image, derive the tile grid and pad geometry, and cut the views the two
//! branches consume.
//!
//! Candidate scoring is done in exact rational arithmetic so that ties between
//! candidates are real ties rather than float accidents.

use std::cmp::Ordering;
use std::fmt;

use hires_tensor::{kernels, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config, usage, Result};
use crate::image::ImageBuffer;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    /// Side of one square tile in pixels (the ViT input size).
    pub tile_size: usize,
    pub vit_patch_size: usize,
    pub conv_total_stride: usize,
    /// Predefined target resolutions as `[width, height]`.
    pub candidates: Vec<[usize; 2]>,
}

impl PlannerConfig {
    pub fn full() -> Self {
        Self {
            tile_size: 336,
            vit_patch_size: 14,
            conv_total_stride: 32,
            candidates: vec![[336, 672], [672, 336], [672, 672], [1008, 336], [336, 1008]],
        }
    }

    pub fn desk() -> Self {
        Self {
            tile_size: 48,
            vit_patch_size: 8,
            conv_total_stride: 32,
            candidates: vec![[48, 96], [96, 48], [96, 96]],
        }
    }

    /// The same geometry restricted to a single tile (no cropping).
    pub fn single_tile(&self) -> Self {
        Self {
            candidates: vec![[self.tile_size, self.tile_size]],
            ..self.clone()
        }
    }

    /// Branch scale `conv_total_stride / vit_patch_size` as a reduced fraction.
    pub fn branch_scale(&self) -> (usize, usize) {
        let g = gcd(self.conv_total_stride as u128, self.vit_patch_size as u128) as usize;
        (self.conv_total_stride / g, self.vit_patch_size / g)
    }

    /// ViT token grid side `tile_size / vit_patch_size`.
    pub fn token_grid(&self) -> usize {
        self.tile_size / self.vit_patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 || self.vit_patch_size == 0 || self.conv_total_stride == 0 {
            return config("tile_size, vit_patch_size and conv_total_stride must be positive");
        }
        if self.tile_size % self.vit_patch_size != 0 {
            return config(format!(
                "tile_size {} not divisible by patch size {}",
                self.tile_size, self.vit_patch_size
            ));
        }
        if self.candidates.is_empty() {
            return usage("candidate list is empty");
        }
        for &[w, h] in &self.candidates {
            if w == 0 || h == 0 || w % self.tile_size != 0 || h % self.tile_size != 0 {
                return config(format!(
                    "candidate {w}x{h} is not a positive multiple of tile_size {}",
                    self.tile_size
                ));
            }
        }
        Ok(())
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Non-negative rational pixel area in lowest terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Area {
    num: u128,
    den: u128,
}

impl Area {
    fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Self {
            num: num / g,
            den: den / g,
        }
    }

    pub fn numer(&self) -> u128 {
        self.num
    }

    pub fn denom(&self) -> u128 {
        self.den
    }

    pub fn to_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl Ord for Area {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.num * other.den).cmp(&(other.num * self.den))
    }
}

impl PartialOrd for Area {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for Area {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

/// One predefined resolution scored against an input size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolutionCandidate {
    pub width: usize,
    pub height: usize,
    pub scale: f64,
    pub scaled_width: f64,
    pub scaled_height: f64,
    pub res_eff: f64,
    pub res_wasted: f64,
    #[serde(skip)]
    scale_exact: (usize, usize),
    #[serde(skip)]
    eff_exact: Area,
    #[serde(skip)]
    wasted_exact: Area,
}

impl ResolutionCandidate {
    /// Scores `(width, height)` for an input of `w_l x h_l`.
    pub fn score(width: usize, height: usize, w_l: usize, h_l: usize) -> Self {
        // scale = min(W_h / W_l, H_h / H_l) as (num, den)
        let (num, den) = if (width * h_l) <= (height * w_l) {
            (width, w_l)
        } else {
            (height, h_l)
        };
        let area_l = (w_l * h_l) as u128;
        let scaled = Area::new(area_l * (num as u128).pow(2), (den as u128).pow(2));
        let eff = scaled.min(Area::new(area_l, 1));
        let target = (width * height) as u128;
        let wasted = Area::new(target * eff.den - eff.num, eff.den);
        let scale = num as f64 / den as f64;
        Self {
            width,
            height,
            scale,
            scaled_width: (w_l * num) as f64 / den as f64,
            scaled_height: (h_l * num) as f64 / den as f64,
            res_eff: eff.to_f64(),
            res_wasted: wasted.to_f64(),
            scale_exact: (num, den),
            eff_exact: eff,
            wasted_exact: wasted,
        }
    }

    pub fn eff_area(&self) -> Area {
        self.eff_exact
    }

    pub fn wasted_area(&self) -> Area {
        self.wasted_exact
    }

    /// `(num, den)` of the resize scale.
    pub fn scale_fraction(&self) -> (usize, usize) {
        self.scale_exact
    }
}

/// Which criterion settled the selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// A single candidate had the largest effective area.
    EffectiveArea,
    /// Several tied on effective area; one wasted the least.
    WastedArea,
    /// Still tied after wasted area; the earliest in the list won.
    ListOrder,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Selection {
    pub chosen_index: usize,
    pub decided_by: TieBreak,
    /// Indices tied on maximal effective area.
    pub eff_ties: Vec<usize>,
    /// Indices among `eff_ties` tied on minimal wasted area.
    pub wasted_ties: Vec<usize>,
    pub candidates: Vec<ResolutionCandidate>,
}

impl Selection {
    pub fn chosen(&self) -> &ResolutionCandidate {
        &self.candidates[self.chosen_index]
    }
}

/// Scores every candidate and records how the winner was decided.
pub fn score_candidates(w_l: usize, h_l: usize, candidates: &[[usize; 2]]) -> Result<Selection> {
    if w_l == 0 || h_l == 0 {
        return usage(format!("image dims must be positive, got {w_l}x{h_l}"));
    }
    if candidates.is_empty() {
        return usage("candidate list is empty");
    }
    let scored: Vec<ResolutionCandidate> = candidates
        .iter()
        .map(|&[w, h]| ResolutionCandidate::score(w, h, w_l, h_l))
        .collect();
    let best_eff = scored.iter().map(|c| c.eff_exact).max().expect("non-empty");
    let eff_ties: Vec<usize> = (0..scored.len())
        .filter(|&i| scored[i].eff_exact == best_eff)
        .collect();
    let least_waste = eff_ties
        .iter()
        .map(|&i| scored[i].wasted_exact)
        .min()
        .expect("non-empty");
    let wasted_ties: Vec<usize> = eff_ties
        .iter()
        .copied()
        .filter(|&i| scored[i].wasted_exact == least_waste)
        .collect();
    let decided_by = if eff_ties.len() == 1 {
        TieBreak::EffectiveArea
    } else if wasted_ties.len() == 1 {
        TieBreak::WastedArea
    } else {
        TieBreak::ListOrder
    };
    Ok(Selection {
        chosen_index: wasted_ties[0],
        decided_by,
        eff_ties,
        wasted_ties,
        candidates: scored,
    })
}

/// The candidate with maximal effective area, then minimal wasted area, then
/// earliest list position.
pub fn select_resolution(
    w_l: usize,
    h_l: usize,
    candidates: &[[usize; 2]],
) -> Result<ResolutionCandidate> {
    let sel = score_candidates(w_l, h_l, candidates)?;
    Ok(sel.candidates[sel.chosen_index].clone())
}

/// Per-edge padding in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Pad {
    pub left: usize,
    pub top: usize,
    pub right: usize,
    pub bottom: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CropPlan {
    pub source: (usize, usize),
    pub chosen: ResolutionCandidate,
    pub tile_size: usize,
    /// `(n_w, n_h)`.
    pub grid: (usize, usize),
    /// Aspect-preserving resize of the input, `(w, h)`.
    pub resize_to: (usize, usize),
    pub pad: Pad,
    /// `conv_total_stride / vit_patch_size` as `(num, den)`.
    pub branch_scale: (usize, usize),
    /// High-resolution canvas `(w, h)`.
    pub highres_dims: (usize, usize),
    pub highres_resize_to: (usize, usize),
    pub highres_pad: Pad,
    pub token_grid: usize,
    pub view_count: usize,
}

impl CropPlan {
    pub fn tile_count(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Pixel rectangle `(left, top)` of tile `k` (row-major) on the canvas.
    pub fn tile_origin(&self, k: usize) -> (usize, usize) {
        let (col, row) = (k % self.grid.0, k / self.grid.0);
        (col * self.tile_size, row * self.tile_size)
    }

    /// Side of one tile on the high-resolution canvas.
    pub fn highres_tile(&self) -> usize {
        self.tile_size * self.branch_scale.0 / self.branch_scale.1
    }
}

/// `round(n * num / den)` with halves rounded up.
fn round_ratio(n: usize, num: usize, den: usize) -> usize {
    (2 * n * num + den) / (2 * den)
}

pub fn build_crop_plan(w_l: usize, h_l: usize, cfg: &PlannerConfig) -> Result<CropPlan> {
    cfg.validate()?;
    let sel = score_candidates(w_l, h_l, &cfg.candidates)?;
    let chosen = sel.chosen().clone();
    let (sn, sd) = chosen.scale_fraction();
    let (wh, hh) = (chosen.width, chosen.height);
    let resize_to = (
        round_ratio(w_l, sn, sd).clamp(1, wh),
        round_ratio(h_l, sn, sd).clamp(1, hh),
    );
    let (bn, bd) = cfg.branch_scale();
    let highres_dims = (wh * bn / bd, hh * bn / bd);
    let highres_resize_to = (
        round_ratio(resize_to.0, bn, bd).clamp(1, highres_dims.0),
        round_ratio(resize_to.1, bn, bd).clamp(1, highres_dims.1),
    );
    let grid = (wh / cfg.tile_size, hh / cfg.tile_size);
    Ok(CropPlan {
        source: (w_l, h_l),
        chosen,
        tile_size: cfg.tile_size,
        grid,
        resize_to,
        pad: Pad {
            left: 0,
            top: 0,
            right: wh - resize_to.0,
            bottom: hh - resize_to.1,
        },
        branch_scale: (bn, bd),
        highres_dims,
        highres_resize_to,
        highres_pad: Pad {
            left: 0,
            top: 0,
            right: highres_dims.0 - highres_resize_to.0,
            bottom: highres_dims.1 - highres_resize_to.1,
        },
        token_grid: cfg.token_grid(),
        view_count: 1 + grid.0 * grid.1,
    })
}

/// Everything the two branches read for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PlannedViews {
    /// Whole image resized to one tile, normalised.
    pub global_view: Tensor,
    /// Row-major tiles of the padded canvas.
    pub tiles: Vec<Tensor>,
    /// Resized, normalised and zero-padded low-resolution canvas.
    pub canvas: Tensor,
    /// Resized, normalised and zero-padded high-resolution canvas.
    pub highres: Tensor,
}

impl PlannedViews {
    /// Global view first, then tiles.
    pub fn views(&self) -> Vec<&Tensor> {
        std::iter::once(&self.global_view)
            .chain(&self.tiles)
            .collect()
    }
}

fn resized_canvas(
    image: &ImageBuffer,
    resize: (usize, usize),
    canvas: (usize, usize),
) -> Result<Tensor> {
    let mut resized = kernels::bilinear(image.pixels(), resize.1, resize.0)?;
    image.normalization().apply(&mut resized)?;
    let (cw, ch) = canvas;
    let mut out = Tensor::zeros(vec![3, ch, cw])?;
    let (rw, rh) = resize;
    let src = resized.data();
    let dst = out.data_mut();
    for c in 0..3 {
        for y in 0..rh {
            let s = (c * rh + y) * rw;
            let d = (c * ch + y) * cw;
            dst[d..d + rw].copy_from_slice(&src[s..s + rw]);
        }
    }
    Ok(out)
}

fn crop(t: &Tensor, left: usize, top: usize, w: usize, h: usize) -> Result<Tensor> {
    let (c, th, tw) = t.chw()?;
    debug_assert!(left + w <= tw && top + h <= th);
    let mut data = Vec::with_capacity(c * w * h);
    for ch in 0..c {
        for y in top..top + h {
            let base = (ch * th + y) * tw + left;
            data.extend_from_slice(&t.data()[base..base + w]);
        }
    }
    Ok(Tensor::new(vec![c, h, w], data)?)
}

/// Cuts the global view, the tiles and the high-resolution canvas.
pub fn apply_plan(image: &ImageBuffer, plan: &CropPlan) -> Result<PlannedViews> {
    if (image.width(), image.height()) != plan.source {
        return usage(format!(
            "image is {}x{} but plan was built for {}x{}",
            image.width(),
            image.height(),
            plan.source.0,
            plan.source.1
        ));
    }
    let t = plan.tile_size;
    let mut global_view = kernels::bilinear(image.pixels(), t, t)?;
    image.normalization().apply(&mut global_view)?;
    let canvas = resized_canvas(
        image,
        plan.resize_to,
        (plan.chosen.width, plan.chosen.height),
    )?;
    let tiles = (0..plan.tile_count())
        .map(|k| {
            let (left, top) = plan.tile_origin(k);
            crop(&canvas, left, top, t, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let highres = resized_canvas(image, plan.highres_resize_to, plan.highres_dims)?;
    Ok(PlannedViews {
        global_view,
        tiles,
        canvas,
        highres,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_ratio_is_half_up() {
        assert_eq!(round_ratio(5, 1, 2), 3);
        assert_eq!(round_ratio(3, 1, 2), 2);
        assert_eq!(round_ratio(7, 1, 3), 2);
        assert_eq!(round_ratio(600, 84, 100), 504);
    }

    #[test]
    fn empty_candidates_is_usage_error() {
        assert!(matches!(
            select_resolution(10, 10, &[]),
            Err(crate::Error::Usage(_))
        ));
        assert!(select_resolution(0, 10, &[[336, 336]]).is_err());
    }

    #[test]
    fn area_ordering_is_exact() {
        let a = Area::new(1, 3);
        let b = Area::new(2, 6);
        assert_eq!(a, b);
        assert!(Area::new(1, 3) < Area::new(334, 1000));
    }
}
