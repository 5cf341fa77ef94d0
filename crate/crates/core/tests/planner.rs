use hires_core::image::{ImageBuffer, Normalization};
use hires_core::planner::*;
use hires_core::Error;
use hires_tensor::Tensor;
use num_rational::Ratio;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Q = Ratio<i128>;

/// Direct evaluation of the scoring rule with exact rationals.
fn oracle(w: usize, h: usize, cands: &[[usize; 2]]) -> (usize, Q, Q) {
    let (wl, hl) = (w as i128, h as i128);
    let mut best: Option<(usize, Q, Q)> = None;
    for (i, &[cw, ch]) in cands.iter().enumerate() {
        let (wh, hh) = (cw as i128, ch as i128);
        let scale = Q::new(wh, wl).min(Q::new(hh, hl));
        let ws = Q::from(wl) * scale;
        let hs = Q::from(hl) * scale;
        let eff = (ws * hs).min(Q::from(wl * hl));
        let wasted = Q::from(wh * hh) - eff;
        best = match best {
            Some((bi, be, bw)) if be > eff || (be == eff && bw <= wasted) => Some((bi, be, bw)),
            _ => Some((i, eff, wasted)),
        };
    }
    best.unwrap()
}

fn as_q(a: Area) -> Q {
    Q::new(a.numer() as i128, a.denom() as i128)
}

#[test]
fn matches_rational_oracle_on_random_sizes() {
    let cands = PlannerConfig::full().candidates;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let w = rng.random_range(1..=4000);
        let h = rng.random_range(1..=4000);
        let (idx, eff, wasted) = oracle(w, h, &cands);
        let sel = score_candidates(w, h, &cands).unwrap();
        assert_eq!(sel.chosen_index, idx, "{w}x{h}");
        assert_eq!(as_q(sel.chosen().eff_area()), eff, "{w}x{h}");
        assert_eq!(as_q(sel.chosen().wasted_area()), wasted, "{w}x{h}");
    }
}

#[test]
fn worked_example_800x600() {
    let sel = score_candidates(800, 600, &PlannerConfig::full().candidates).unwrap();
    let c = sel.chosen();
    assert_eq!((c.width, c.height), (672, 672));
    assert_eq!(c.res_eff, 338688.0);
    assert_eq!(c.res_wasted, 112896.0);
    assert_eq!(sel.decided_by, TieBreak::EffectiveArea);

    let plan = build_crop_plan(800, 600, &PlannerConfig::full()).unwrap();
    assert_eq!(plan.grid, (2, 2));
    assert_eq!(plan.resize_to, (672, 504));
    assert_eq!(
        plan.pad,
        Pad {
            left: 0,
            top: 0,
            right: 0,
            bottom: 168
        }
    );
    assert_eq!(plan.highres_dims, (1536, 1536));
    assert_eq!(plan.view_count, 5);
    assert_eq!(plan.token_grid, 24);
}

#[test]
fn worked_example_2000x500() {
    let plan = build_crop_plan(2000, 500, &PlannerConfig::full()).unwrap();
    assert_eq!((plan.chosen.width, plan.chosen.height), (1008, 336));
    assert_eq!(plan.chosen.res_eff, 254016.0);
    assert_eq!(plan.chosen.res_wasted, 84672.0);
    assert_eq!(plan.grid, (3, 1));
}

#[test]
fn worked_example_336_tie_chain() {
    let sel = score_candidates(336, 336, &PlannerConfig::full().candidates).unwrap();
    assert_eq!(sel.chosen_index, 0);
    assert_eq!(sel.decided_by, TieBreak::ListOrder);
    // every candidate keeps the full 336^2 ...
    assert_eq!(sel.eff_ties, vec![0, 1, 2, 3, 4]);
    // ... and the two 2-tile layouts waste the least
    assert_eq!(sel.wasted_ties, vec![0, 1]);
    let plan = build_crop_plan(336, 336, &PlannerConfig::full()).unwrap();
    assert_eq!((plan.chosen.width, plan.chosen.height), (336, 672));
    assert_eq!(plan.grid, (1, 2));
    assert_eq!(plan.pad.bottom, 336);
    assert_eq!(plan.pad.right, 0);
}

#[test]
fn rejects_bad_inputs() {
    let cfg = PlannerConfig::full();
    assert!(matches!(
        build_crop_plan(0, 600, &cfg),
        Err(Error::Usage(_))
    ));
    assert!(matches!(
        build_crop_plan(800, 0, &cfg),
        Err(Error::Usage(_))
    ));
    let mut bad = cfg.clone();
    bad.candidates = vec![[300, 336]];
    assert!(matches!(
        build_crop_plan(10, 10, &bad),
        Err(Error::Config(_))
    ));
}

fn ramp_image(w: usize, h: usize) -> ImageBuffer {
    let data = (0..3 * w * h).map(|i| (i % 97) as f64 / 97.0).collect();
    ImageBuffer::new(
        Tensor::new(vec![3, h, w], data).unwrap(),
        Normalization::default(),
    )
    .unwrap()
}

fn reassemble(tiles: &[Tensor], grid: (usize, usize), t: usize) -> Tensor {
    let (n_w, n_h) = grid;
    let (w, h) = (n_w * t, n_h * t);
    let mut out = Tensor::zeros(vec![3, h, w]).unwrap();
    for (k, tile) in tiles.iter().enumerate() {
        let (col, row) = (k % n_w, k / n_w);
        for c in 0..3 {
            for y in 0..t {
                for x in 0..t {
                    let dst = (c * h + row * t + y) * w + col * t + x;
                    out.data_mut()[dst] = tile.data()[(c * t + y) * t + x];
                }
            }
        }
    }
    out
}

#[test]
fn tiles_reassemble_the_padded_canvas() {
    for (w, h) in [(800, 600), (2000, 500), (336, 336), (100, 900)] {
        let cfg = PlannerConfig::full();
        let plan = build_crop_plan(w, h, &cfg).unwrap();
        let views = apply_plan(&ramp_image(w, h), &plan).unwrap();
        assert_eq!(views.tiles.len(), plan.tile_count());
        let back = reassemble(&views.tiles, plan.grid, plan.tile_size);
        assert_eq!(back, views.canvas, "{w}x{h}");
    }
}

#[test]
fn padding_is_zero_after_normalisation() {
    let plan = build_crop_plan(96, 40, &PlannerConfig::desk()).unwrap();
    assert_eq!((plan.chosen.width, plan.chosen.height), (96, 48));
    assert_eq!(plan.resize_to, (96, 40));
    let views = apply_plan(
        &ImageBuffer::constant(96, 40, [1.0; 3], Normalization::default()).unwrap(),
        &plan,
    )
    .unwrap();
    let c = &views.canvas;
    assert_eq!(
        c.at(&[0, 39, 5]),
        (1.0 - Normalization::default().mean[0]) / Normalization::default().std[0]
    );
    assert_eq!(c.at(&[0, 40, 5]), 0.0);
    assert_eq!(c.at(&[2, 47, 95]), 0.0);
    let hr = &views.highres;
    assert_eq!(hr.dims(), &[3, 192, 384]);
    assert_eq!(plan.highres_resize_to, (384, 160));
    assert_eq!(hr.at(&[1, 160, 0]), 0.0);
}

#[test]
fn single_tile_plan_has_two_views() {
    let cfg = PlannerConfig::full().single_tile();
    let plan = build_crop_plan(336, 336, &cfg).unwrap();
    assert_eq!(plan.grid, (1, 1));
    assert_eq!(plan.view_count, 2);
    assert_eq!(plan.highres_dims, (768, 768));
}

#[test]
fn image_plan_mismatch_is_usage_error() {
    let plan = build_crop_plan(96, 96, &PlannerConfig::desk()).unwrap();
    assert!(matches!(
        apply_plan(&ramp_image(90, 96), &plan),
        Err(Error::Usage(_))
    ));
}

proptest! {
    #[test]
    fn selection_invariants(w in 1usize..3000, h in 1usize..3000) {
        let cands = PlannerConfig::full().candidates;
        let sel = score_candidates(w, h, &cands).unwrap();
        let c = sel.chosen();
        for o in &sel.candidates {
            prop_assert!(o.eff_area() <= c.eff_area());
            prop_assert!(o.res_eff <= (w * h) as f64);
            prop_assert_eq!(o.res_eff + o.res_wasted, (o.width * o.height) as f64);
        }
        let plan = build_crop_plan(w, h, &PlannerConfig::full()).unwrap();
        prop_assert_eq!(plan.grid.0 * plan.tile_size, c.width);
        prop_assert_eq!(plan.grid.1 * plan.tile_size, c.height);
        prop_assert!(plan.resize_to.0 <= c.width && plan.resize_to.1 <= c.height);
        prop_assert_eq!(plan.pad.right + plan.resize_to.0, c.width);
        prop_assert_eq!(plan.view_count, 1 + plan.grid.0 * plan.grid.1);
        prop_assert_eq!(plan.highres_dims.0 * 14, c.width * 32);
    }

    #[test]
    fn desk_selection_matches_oracle(w in 1usize..500, h in 1usize..500) {
        let cands = PlannerConfig::desk().candidates;
        let (idx, eff, wasted) = oracle(w, h, &cands);
        let sel = score_candidates(w, h, &cands).unwrap();
        prop_assert_eq!(sel.chosen_index, idx);
        prop_assert_eq!(as_q(sel.chosen().eff_area()), eff);
        prop_assert_eq!(as_q(sel.chosen().wasted_area()), wasted);
    }
}
