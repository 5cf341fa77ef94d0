//! Desk-scale fragmentation probes and a toy two-stage trainer on synthetic
//! glyph-counting images.

use std::collections::BTreeMap;

use hires_tensor::kernels::bilinear_taps;
use hires_tensor::{backward, Graph, ParamSet, Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoder::{parameter_partition, HybridEncoder, TrainStage};
use crate::error::{usage, Error, Result};
use crate::image::{ImageBuffer, Normalization};
use crate::planner::CropPlan;
use crate::vit::ViewId;

/// Name prefix of the probe head.
pub const HEAD_PREFIX: &str = "head";

/// 5x5 plus sign.
pub const PLUS_GLYPH: [&str; 5] = ["..#..", "..#..", "#####", "..#..", "..#.."];

/// A tile boundary on the canvas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Boundary {
    /// Line `x = col * tile` crossed inside tile row `row`.
    Vertical { col: usize, row: usize },
    /// Line `y = row * tile` crossed inside tile column `col`.
    Horizontal { row: usize, col: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Placement {
    /// Top-left corner on the canvas.
    At { x: usize, y: usize },
    /// Centred in one tile (row-major index).
    Interior { tile: usize },
    /// Centred across a boundary; `overlap` is the fraction of the glyph on
    /// the far side.
    Straddling { boundary: Boundary, overlap: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GlyphSpec {
    /// Rows of `#` (ink) and `.` (background).
    pub bitmap: Vec<String>,
    /// Pixels per bitmap cell.
    pub cell: usize,
    pub placement: Placement,
    /// Canvas `(w, h)`; probe images are drawn at canvas size so the crop
    /// plan applies no resize.
    pub canvas: (usize, usize),
    pub background: f64,
    pub ink: f64,
}

impl GlyphSpec {
    pub fn plus(placement: Placement, canvas: (usize, usize)) -> Self {
        Self {
            bitmap: PLUS_GLYPH.iter().map(|s| s.to_string()).collect(),
            cell: 2,
            placement,
            canvas,
            background: 0.0,
            ink: 1.0,
        }
    }

    /// Glyph size in pixels `(w, h)`.
    pub fn size(&self) -> (usize, usize) {
        let w = self.bitmap.first().map_or(0, |r| r.len());
        (w * self.cell, self.bitmap.len() * self.cell)
    }

    /// Top-left canvas position under `plan`.
    pub fn origin(&self, plan: &CropPlan) -> Result<(usize, usize)> {
        let (gw, gh) = self.size();
        let t = plan.tile_size;
        if gw == 0 || gh == 0 || gw > t || gh > t {
            return usage(format!("glyph {gw}x{gh} does not fit in a {t}px tile"));
        }
        let pos = match self.placement {
            Placement::At { x, y } => (x, y),
            Placement::Interior { tile } => {
                if tile >= plan.tile_count() {
                    return usage(format!("tile {tile} outside a {:?} grid", plan.grid));
                }
                let (l, tp) = plan.tile_origin(tile);
                (l + (t - gw) / 2, tp + (t - gh) / 2)
            }
            Placement::Straddling { boundary, overlap } => {
                if !(overlap > 0.0 && overlap < 1.0) {
                    return usage(format!("straddling overlap {overlap} must lie in (0, 1)"));
                }
                let far = |n: usize| ((n as f64 * overlap).round() as usize).clamp(1, n - 1);
                match boundary {
                    Boundary::Vertical { col, row } => {
                        if col == 0 || col >= plan.grid.0 || row >= plan.grid.1 || gw < 2 {
                            return usage(format!("no vertical boundary {col} in row {row}"));
                        }
                        (col * t - (gw - far(gw)), row * t + (t - gh) / 2)
                    }
                    Boundary::Horizontal { row, col } => {
                        if row == 0 || row >= plan.grid.1 || col >= plan.grid.0 || gh < 2 {
                            return usage(format!("no horizontal boundary {row} in column {col}"));
                        }
                        (col * t + (t - gw) / 2, row * t - (gh - far(gh)))
                    }
                }
            }
        };
        if pos.0 + gw > self.canvas.0 || pos.1 + gh > self.canvas.1 {
            return usage(format!(
                "glyph at {pos:?} leaves the {:?} canvas",
                self.canvas
            ));
        }
        Ok(pos)
    }

    /// Row-major tiles the glyph rectangle touches.
    pub fn tiles_touched(&self, plan: &CropPlan) -> Result<Vec<usize>> {
        let (x, y) = self.origin(plan)?;
        let (gw, gh) = self.size();
        Ok(tiles_in_rect(plan, x, y, x + gw - 1, y + gh - 1))
    }

    /// Ink cells on a canvas-sized pixel grid.
    pub fn draw(&self, pixels: &mut Tensor, origin: (usize, usize)) -> Result<()> {
        let (_, h, w) = pixels.chw()?;
        let (ox, oy) = origin;
        let data = pixels.data_mut();
        for (r, row) in self.bitmap.iter().enumerate() {
            for (c, ch) in row.chars().enumerate() {
                if ch != '#' {
                    continue;
                }
                for dy in 0..self.cell {
                    for dx in 0..self.cell {
                        let (px, py) = (ox + c * self.cell + dx, oy + r * self.cell + dy);
                        if px < w && py < h {
                            for k in 0..3 {
                                data[(k * h + py) * w + px] = self.ink;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Single-glyph image.
    pub fn render(&self, plan: &CropPlan, norm: Normalization) -> Result<ImageBuffer> {
        let origin = self.origin(plan)?;
        let mut img =
            ImageBuffer::constant(self.canvas.0, self.canvas.1, [self.background; 3], norm)?;
        self.draw(img.pixels_mut(), origin)?;
        Ok(img)
    }
}

fn tiles_in_rect(plan: &CropPlan, x0: usize, y0: usize, x1: usize, y1: usize) -> Vec<usize> {
    let t = plan.tile_size;
    let mut out = Vec::new();
    for row in y0 / t..=(y1 / t).min(plan.grid.1 - 1) {
        for col in x0 / t..=(x1 / t).min(plan.grid.0 - 1) {
            out.push(row * plan.grid.0 + col);
        }
    }
    out
}

/// Canvas index range reached by source index `i` through a bilinear resize
/// `n_in -> n_out` (taps with zero weight excluded).
fn footprint(i: usize, n_in: usize, n_out: usize) -> Option<(usize, usize)> {
    let hits: Vec<usize> = bilinear_taps(n_in, n_out)
        .iter()
        .enumerate()
        .filter(|(_, &(i0, i1, w0, w1))| (i0 == i && w0 != 0.0) || (i1 == i && w1 != 0.0))
        .map(|(o, _)| o)
        .collect();
    Some((*hits.first()?, *hits.last()?))
}

/// Tiles of the low-resolution canvas that image pixel `(x, y)` reaches.
pub fn pixel_tiles(plan: &CropPlan, x: usize, y: usize) -> Result<Vec<usize>> {
    let (w, h) = plan.source;
    if x >= w || y >= h {
        return usage(format!("probe pixel ({x}, {y}) outside the {w}x{h} image"));
    }
    let (fx, fy) = match (
        footprint(x, w, plan.resize_to.0),
        footprint(y, h, plan.resize_to.1),
    ) {
        (Some(fx), Some(fy)) => (fx, fy),
        _ => return Ok(Vec::new()),
    };
    Ok(tiles_in_rect(plan, fx.0, fy.0, fx.1, fy.1))
}

/// Token whose norm is differentiated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SaliencyTarget {
    pub view: ViewId,
    /// Row-major index into the view's `g x g` grid.
    pub token: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SaliencyReport {
    /// `|f(x+eps e) - f(x-eps e)| / (2 eps)` per probe pixel.
    pub responses: Vec<f64>,
    /// Max response per tile the probe pixels fall in.
    pub per_tile: BTreeMap<usize, f64>,
    pub max: f64,
}

fn token_norm(
    encoder: &HybridEncoder,
    params: &ParamSet,
    image: &ImageBuffer,
    target: SaliencyTarget,
) -> Result<f64> {
    let tokens = encoder.encode(image, params)?;
    let v = &tokens.views[target.view.position()];
    let d = v.dims()[1];
    let row = &v.data()[target.token * d..(target.token + 1) * d];
    Ok(row.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Central-difference response of one token's norm to single pixels outside
/// the token's tile. All three channels of a probe pixel move together.
pub fn cross_tile_saliency(
    encoder: &HybridEncoder,
    params: &ParamSet,
    image: &ImageBuffer,
    target: SaliencyTarget,
    probe_pixels: &[(usize, usize)],
    eps: f64,
) -> Result<SaliencyReport> {
    let plan = encoder.plan(image.width(), image.height())?;
    let ViewId::Local(k) = target.view else {
        return usage("the global view covers every pixel; target a local view");
    };
    if k >= plan.tile_count() || target.token >= plan.token_grid.pow(2) {
        return usage(format!("target {:?} outside the plan", target));
    }
    if !(eps > 0.0) {
        return usage("eps must be positive");
    }
    let mut memberships = Vec::with_capacity(probe_pixels.len());
    for &(x, y) in probe_pixels {
        let tiles = pixel_tiles(&plan, x, y)?;
        if tiles.contains(&k) {
            return usage(format!(
                "probe pixel ({x}, {y}) lies inside target tile {k}"
            ));
        }
        memberships.push(tiles);
    }
    let mut responses = Vec::with_capacity(probe_pixels.len());
    let mut per_tile = BTreeMap::new();
    for (&(x, y), tiles) in probe_pixels.iter().zip(&memberships) {
        let eval = |delta: f64| -> Result<f64> {
            let mut img = image.clone();
            for c in 0..3 {
                let i = img.index(c, y, x);
                img.pixels_mut().data_mut()[i] += delta;
            }
            token_norm(encoder, params, &img, target)
        };
        let r = ((eval(eps)? - eval(-eps)?) / (2.0 * eps)).abs();
        for &t in tiles {
            let e = per_tile.entry(t).or_insert(0.0f64);
            *e = e.max(r);
        }
        responses.push(r);
    }
    let max = responses.iter().copied().fold(0.0, f64::max);
    Ok(SaliencyReport {
        responses,
        per_tile,
        max,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftRow {
    pub shift: isize,
    /// `1 - cos` between the mean glyph-covering tokens at the base placement
    /// and at the shifted one.
    pub drift: f64,
}

/// Mean of the local tokens whose patch overlaps the rectangle.
fn covering_mean(
    views: &[Tensor],
    plan: &CropPlan,
    patch: usize,
    rect: (usize, usize, usize, usize),
) -> Vec<f64> {
    let (x0, y0, x1, y1) = rect;
    let g = plan.token_grid;
    let d = views[0].dims()[1];
    let mut acc = vec![0.0; d];
    let mut n = 0usize;
    for k in tiles_in_rect(plan, x0, y0, x1, y1) {
        let (left, top) = plan.tile_origin(k);
        for i in 0..g {
            for j in 0..g {
                let (px, py) = (left + j * patch, top + i * patch);
                if px + patch > x0 && px <= x1 && py + patch > y0 && py <= y1 {
                    let tok = i * g + j;
                    let row = &views[k + 1].data()[tok * d..(tok + 1) * d];
                    acc.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    n += 1;
                }
            }
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// `1 - a.b / sqrt(|a|^2 |b|^2)`; exactly zero for identical vectors.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return if aa == bb { 0.0 } else { 1.0 };
    }
    1.0 - dot / (aa * bb).sqrt()
}

/// Moves the glyph horizontally by each shift and reports the drift of its
/// covering tokens relative to the unshifted placement.
pub fn boundary_shift_probe(
    encoder: &HybridEncoder,
    params: &ParamSet,
    glyph: &GlyphSpec,
    shifts: &[isize],
) -> Result<Vec<DriftRow>> {
    let plan = encoder.plan(glyph.canvas.0, glyph.canvas.1)?;
    if plan.resize_to != plan.source {
        return usage("glyph canvas must match a candidate resolution");
    }
    let (ox, oy) = glyph.origin(&plan)?;
    let (gw, gh) = glyph.size();
    let patch = encoder.config().vit.patch_size;
    let norm = encoder.config().normalization.clone();
    let encode_at = |x: usize| -> Result<Vec<f64>> {
        let spec = GlyphSpec {
            placement: Placement::At { x, y: oy },
            ..glyph.clone()
        };
        let img = spec.render(&plan, norm.clone())?;
        let tokens = encoder.encode(&img, params)?;
        Ok(covering_mean(
            &tokens.views,
            &plan,
            patch,
            (x, oy, x + gw - 1, oy + gh - 1),
        ))
    };
    let base = encode_at(ox)?;
    shifts
        .iter()
        .map(|&s| {
            let x = ox
                .checked_add_signed(s)
                .filter(|x| x + gw <= glyph.canvas.0);
            let Some(x) = x else {
                return usage(format!("shift {s} moves the glyph off the canvas"));
            };
            Ok(DriftRow {
                shift: s,
                drift: cosine_distance(&base, &encode_at(x)?),
            })
        })
        .collect()
}

/// One labelled image of the counting task.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: ImageBuffer,
    pub count: usize,
    pub straddling: usize,
}

/// Seeded glyph-counting images: `count` glyphs, alternating straddling and
/// interior placements, no two glyph boxes overlapping.
pub fn glyph_count_dataset(
    plan: &CropPlan,
    norm: &Normalization,
    samples: usize,
    max_glyphs: usize,
    seed: u64,
) -> Result<Vec<Sample>> {
    let canvas = plan.source;
    if plan.resize_to != canvas || plan.tile_count() < 2 {
        return usage("dataset images must match a multi-tile candidate resolution");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proto = GlyphSpec::plus(Placement::At { x: 0, y: 0 }, canvas);
    let (gw, gh) = proto.size();
    let t = plan.tile_size;
    let mut boundaries = Vec::new();
    for row in 0..plan.grid.1 {
        for col in 1..plan.grid.0 {
            boundaries.push(Boundary::Vertical { col, row });
        }
    }
    for col in 0..plan.grid.0 {
        for row in 1..plan.grid.1 {
            boundaries.push(Boundary::Horizontal { row, col });
        }
    }
    let mut out = Vec::with_capacity(samples);
    for s in 0..samples {
        let count = s % (max_glyphs + 1);
        let mut img =
            ImageBuffer::constant(canvas.0, canvas.1, [proto.background; 3], norm.clone())?;
        let mut boxes: Vec<(usize, usize)> = Vec::new();
        let mut straddling = 0;
        for i in 0..count {
            let mut placed = None;
            for _ in 0..256 {
                let (x, y) = if i % 2 == 0 {
                    let b = boundaries[rng.random_range(0..boundaries.len())];
                    let slide = rng.random_range(0..=t - gh.max(gw));
                    let far = rng.random_range(1..gw.min(gh));
                    match b {
                        Boundary::Vertical { col, row } => (col * t - (gw - far), row * t + slide),
                        Boundary::Horizontal { row, col } => {
                            (col * t + slide, row * t - (gh - far))
                        }
                    }
                } else {
                    let k = rng.random_range(0..plan.tile_count());
                    let (l, tp) = plan.tile_origin(k);
                    (
                        l + rng.random_range(0..=t - gw),
                        tp + rng.random_range(0..=t - gh),
                    )
                };
                let clear = boxes.iter().all(|&(bx, by)| {
                    x + gw + 1 <= bx || bx + gw + 1 <= x || y + gh + 1 <= by || by + gh + 1 <= y
                });
                if clear && x + gw <= canvas.0 && y + gh <= canvas.1 {
                    placed = Some((x, y));
                    break;
                }
            }
            let Some(pos) = placed else {
                return usage(format!(
                    "could not place {count} glyphs on a {canvas:?} canvas"
                ));
            };
            if tiles_in_rect(plan, pos.0, pos.1, pos.0 + gw - 1, pos.1 + gh - 1).len() > 1 {
                straddling += 1;
            }
            proto.draw(img.pixels_mut(), pos)?;
            boxes.push(pos);
        }
        out.push(Sample {
            image: img,
            count,
            straddling,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Schedule {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_lr: f64,
    pub stage2_lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub stage: u8,
    /// Global step index, counting from 0 across both stages.
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub curve: Vec<CurvePoint>,
    /// Loss after the last update.
    pub final_loss: f64,
    pub params: ParamSet,
    /// Every parameter outside the pretrain partition is bitwise unchanged
    /// after stage 1.
    pub stage1_frozen_bit_identical: bool,
}

/// Linear head `(1, d) -> (1)` on mean-pooled tokens.
pub fn init_head(params: &mut ParamSet, d: usize, seed: u64) -> Result<()> {
    Ok(hires_tensor::nn::init_linear(
        params,
        HEAD_PREFIX,
        1,
        d,
        seed,
    )?)
}

fn divergence(step: usize, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { op }) => Error::Divergence {
            step,
            msg: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Mean squared error of the head over `data`, with gradients when `grad`.
fn loss_and_grads(
    encoder: &HybridEncoder,
    params: &ParamSet,
    data: &[Sample],
    grad: bool,
) -> Result<(f64, Option<BTreeMap<String, Tensor>>)> {
    let mut g = if grad { Graph::new() } else { Graph::no_grad() };
    let bound = g.bind(params);
    let mut total = None;
    for s in data {
        let out = encoder.forward(&mut g, &bound, &s.image)?;
        let all = g.concat(&out.views, 0)?;
        let pooled = g.mean_rows(all)?;
        let pred = g.linear(
            pooled,
            bound.get(&format!("{HEAD_PREFIX}.weight"))?,
            Some(bound.get(&format!("{HEAD_PREFIX}.bias"))?),
        )?;
        let target = g.constant(Tensor::new(vec![1, 1], vec![s.count as f64])?);
        let diff = g.sub(pred, target)?;
        let sq = g.mul(diff, diff)?;
        let l = g.sum(sq)?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    let Some(total) = total else {
        return usage("empty training set");
    };
    let loss = g.mul_const(total, 1.0 / data.len() as f64)?;
    let value = g.value(loss).item()?;
    let grads = if grad {
        Some(backward(&g, loss, &bound)?)
    } else {
        None
    };
    Ok((value, grads))
}

/// Plain gradient descent: stage 1 on the pretrain partition, stage 2 on
/// everything. The curve records the loss before each update.
pub fn toy_train(
    encoder: &HybridEncoder,
    params: ParamSet,
    data: &[Sample],
    schedule: Schedule,
) -> Result<TrainOutcome> {
    let init = params.clone();
    let mut params = params;
    let mut curve = Vec::with_capacity(schedule.stage1_steps + schedule.stage2_steps);
    let mut step = 0;
    let mut frozen_ok = true;
    for (stage, steps, lr, part) in [
        (
            1u8,
            schedule.stage1_steps,
            schedule.stage1_lr,
            TrainStage::Pretrain,
        ),
        (
            2u8,
            schedule.stage2_steps,
            schedule.stage2_lr,
            TrainStage::Finetune,
        ),
    ] {
        let trainable = parameter_partition(&params, part).trainable;
        for _ in 0..steps {
            let (loss, grads) =
                loss_and_grads(encoder, &params, data, true).map_err(|e| divergence(step, e))?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    msg: format!("loss {loss}"),
                });
            }
            curve.push(CurvePoint { stage, step, loss });
            let grads = grads.expect("recording graph");
            for name in &trainable {
                let gr = &grads[name];
                let p = params
                    .get_mut(name)
                    .expect("partition names come from params");
                for (w, d) in p.data_mut().iter_mut().zip(gr.data()) {
                    *w -= lr * d;
                }
                if !p.is_finite() {
                    return Err(Error::Divergence {
                        step,
                        msg: format!("parameter {name} became non-finite"),
                    });
                }
            }
            step += 1;
        }
        if stage == 1 {
            let frozen = parameter_partition(&params, TrainStage::Pretrain).frozen;
            frozen_ok = frozen.iter().all(|n| {
                let (a, b) = (params.get(n).expect("known"), init.get(n).expect("known"));
                a.data()
                    .iter()
                    .zip(b.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });
        }
    }
    let (final_loss, _) =
        loss_and_grads(encoder, &params, data, false).map_err(|e| divergence(step, e))?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            step,
            msg: format!("loss {final_loss}"),
        });
    }
    Ok(TrainOutcome {
        curve,
        final_loss,
        params,
        stage1_frozen_bit_identical: frozen_ok,
    })
}

/// Knobs of the boundary glyph-count probe.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeTask {
    pub samples: usize,
    pub max_glyphs: usize,
    pub schedule: Schedule,
    /// Horizontal glyph shifts, in pixels, for the drift probe.
    pub shifts: Vec<isize>,
    pub saliency_eps: f64,
}

impl Default for ProbeTask {
    fn default() -> Self {
        Self {
            samples: 8,
            max_glyphs: 3,
            schedule: Schedule {
                stage1_steps: 250,
                stage2_steps: 250,
                stage1_lr: 0.01,
                stage2_lr: 0.002,
            },
            shifts: vec![0, 2, 4, 6, 8],
            saliency_eps: 1e-3,
        }
    }
}

/// Target token and probe pixels for a plan: the token at the right edge of
/// tile 0, probed by pixels just across the boundaries into tiles 1 and
/// `n_w`.
pub fn default_saliency_setup(plan: &CropPlan) -> Result<(SaliencyTarget, Vec<(usize, usize)>)> {
    if plan.resize_to != plan.source || plan.tile_count() < 2 {
        return usage("saliency probe needs an unresized multi-tile plan");
    }
    let t = plan.tile_size;
    let g = plan.token_grid;
    let target = SaliencyTarget {
        view: ViewId::Local(0),
        token: (g / 2) * g + (g - 1),
    };
    let mut pixels = Vec::new();
    if plan.grid.0 > 1 {
        pixels.extend([(t, t / 2), (t + 1, t / 2 - 1), (t + 3, t / 2 + 1)]);
    }
    if plan.grid.1 > 1 {
        pixels.extend([(t - 2, t), (t / 2, t + 2)]);
    }
    Ok((target, pixels))
}

/// Report rows and metrics for one encoder config.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub variant: String,
    pub config_hash: String,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub stage1_frozen_bit_identical: bool,
    pub cross_tile_saliency_max: f64,
    pub saliency_per_tile: BTreeMap<usize, f64>,
    pub feature_drift: Vec<DriftRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metric {
    pub config_hash: String,
    pub variant: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeReport {
    pub task: String,
    pub seed: u64,
    pub probe: ProbeTask,
    pub rows: Vec<ProbeRow>,
    pub metrics: Vec<Metric>,
    #[serde(skip)]
    pub curves: Vec<(String, Vec<CurvePoint>)>,
}

impl ProbeReport {
    /// `variant,config_hash,stage,step,loss`.
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("variant,config_hash,stage,step,loss\n");
        for ((v, c), row) in self.curves.iter().zip(&self.rows) {
            for p in c {
                s.push_str(&format!(
                    "{v},{},{},{},{:e}\n",
                    row.config_hash, p.stage, p.step, p.loss
                ));
            }
        }
        s
    }
}

/// Trains and probes each `(variant name, encoder)`, in order.
pub fn run_probe(
    encoders: &[(String, HybridEncoder)],
    task: &ProbeTask,
    seed: u64,
) -> Result<ProbeReport> {
    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    let mut curves = Vec::new();
    for (name, enc) in encoders {
        let cfg = enc.config();
        let [w, h] = *cfg
            .effective_planner()
            .candidates
            .iter()
            .max_by_key(|[w, h]| w * h)
            .expect("validated candidates");
        let plan = enc.plan(w, h)?;
        let data = glyph_count_dataset(
            &plan,
            &cfg.normalization,
            task.samples,
            task.max_glyphs,
            seed,
        )?;
        let mut params = enc.init_params(seed)?;
        init_head(&mut params, cfg.vit.embed_dim, seed)?;
        let out = toy_train(enc, params, &data, task.schedule)?;
        let initial_loss = match out.curve.first() {
            Some(p) => p.loss,
            None => out.final_loss,
        };
        let base = &data[0].image;
        let (target, pixels) = default_saliency_setup(&plan)?;
        let sal = cross_tile_saliency(enc, &out.params, base, target, &pixels, task.saliency_eps)?;
        let glyph = GlyphSpec::plus(Placement::Interior { tile: 0 }, (w, h));
        let drift = boundary_shift_probe(enc, &out.params, &glyph, &task.shifts)?;
        let hash = cfg.hash();
        let mut push = |metric: String, value: f64| {
            metrics.push(Metric {
                config_hash: hash.clone(),
                variant: name.clone(),
                metric,
                value,
                seed,
            })
        };
        push("initial_loss".into(), initial_loss);
        push("final_loss".into(), out.final_loss);
        push("cross_tile_saliency_max".into(), sal.max);
        for d in &drift {
            push(format!("feature_drift_shift_{}", d.shift), d.drift);
        }
        rows.push(ProbeRow {
            variant: name.clone(),
            config_hash: hash,
            initial_loss,
            final_loss: out.final_loss,
            stage1_frozen_bit_identical: out.stage1_frozen_bit_identical,
            cross_tile_saliency_max: sal.max,
            saliency_per_tile: sal.per_tile,
            feature_drift: drift,
        });
        curves.push((name.clone(), out.curve));
    }
    if metrics.iter().any(|m| !m.value.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            msg: "non-finite probe metric".into(),
        });
    }
    Ok(ProbeReport {
        task: "boundary_glyph_count".into(),
        seed,
        probe: task.clone(),
        rows,
        metrics,
        curves,
    })
}
