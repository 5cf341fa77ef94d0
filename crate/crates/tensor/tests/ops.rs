use hires_tensor::kernels::{self, ConvGeom};
use hires_tensor::{nn, Graph, ParamSet, Tensor, TensorError};
use proptest::prelude::*;

fn ramp(dims: &[usize]) -> Tensor {
    let n: usize = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|i| i as f64).collect()).unwrap()
}

#[test]
fn tanh_of_zero_is_zero() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.tanh(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.0]);
}

#[test]
fn concat_channels_adds_channel_counts() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3, 3]).unwrap());
    let b = g.constant(Tensor::ones(vec![5, 3, 3]).unwrap());
    let c = g.concat_channels(&[a, b]).unwrap();
    assert_eq!(g.dims(c), &[7, 3, 3]);
    assert_eq!(g.value(c).at(&[1, 2, 2]), 0.0);
    assert_eq!(g.value(c).at(&[2, 0, 0]), 1.0);

    let bad = g.constant(Tensor::ones(vec![5, 3, 4]).unwrap());
    match g.concat_channels(&[a, bad]) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3, 3]);
            assert_eq!(rhs, vec![5, 3, 4]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn layer_norm_of_constant_row_is_shift() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![2, 4], 3.5).unwrap());
    let gamma = g.constant(Tensor::new(vec![4], vec![2.0, -1.0, 0.5, 3.0]).unwrap());
    let zero = g.constant(Tensor::zeros(vec![4]).unwrap());
    let y = g.layer_norm(x, gamma, zero).unwrap();
    assert!(g.value(y).data().iter().all(|v| *v == 0.0));

    let beta = g.constant(Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = g.layer_norm(x, gamma, beta).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn softmax_rows_sum_to_one_and_constants_are_uniform() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(vec![2, 5], 4.2).unwrap());
    let y = g.softmax(x).unwrap();
    assert!(g.value(y).data().iter().all(|v| (*v - 0.2).abs() < 1e-15));
}

#[test]
fn conv_sum_of_ones_is_nine() {
    let x = Tensor::ones(vec![1, 3, 3]).unwrap();
    let w = Tensor::ones(vec![1, 1, 3, 3]).unwrap();
    let y = kernels::conv2d(&x, &w, None, ConvGeom::new(1, 0, 1)).unwrap();
    assert_eq!(y.dims(), &[1, 1, 1]);
    assert_eq!(y.data(), &[9.0]);
}

#[test]
fn conv_identity_kernel_returns_input() {
    let x = ramp(&[3, 4, 5]);
    let mut w = Tensor::zeros(vec![3, 3, 1, 1]).unwrap();
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let y = kernels::conv2d(&x, &w, None, ConvGeom::new(1, 0, 1)).unwrap();
    assert_eq!(y, x);
}

#[test]
fn conv_stride_two_average_gives_block_means() {
    // ramp 0..15 on a 4x4 grid; block means evaluated by hand
    let x = ramp(&[1, 4, 4]);
    let w = Tensor::full(vec![1, 1, 2, 2], 0.25).unwrap();
    let y = kernels::conv2d(&x, &w, None, ConvGeom::new(2, 0, 1)).unwrap();
    assert_eq!(y.dims(), &[1, 2, 2]);
    assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn conv_output_extent_and_geometry_errors() {
    let x = Tensor::ones(vec![4, 9, 7]).unwrap();
    let w = Tensor::ones(vec![4, 1, 7, 7]).unwrap();
    let y = kernels::conv2d(&x, &w, None, ConvGeom::new(2, 3, 4)).unwrap();
    // floor((9 + 6 - 7)/2) + 1 = 5, floor((7 + 6 - 7)/2) + 1 = 4
    assert_eq!(y.dims(), &[4, 5, 4]);
    assert!(kernels::conv2d(&x, &w, None, ConvGeom::new(1, 0, 3)).is_err());
    let big = Tensor::ones(vec![4, 1, 11, 11]).unwrap();
    assert!(matches!(
        kernels::conv2d(&x, &big, None, ConvGeom::new(1, 0, 4)),
        Err(TensorError::Geometry { .. })
    ));
}

#[test]
fn depthwise_conv_keeps_channels_separate() {
    let mut x = Tensor::zeros(vec![2, 3, 3]).unwrap();
    x.data_mut()[4] = 1.0; // channel 0 centre
    let w = Tensor::ones(vec![2, 1, 3, 3]).unwrap();
    let y = kernels::conv2d(&x, &w, None, ConvGeom::new(1, 1, 2)).unwrap();
    assert!(y.data()[..9].iter().all(|v| *v == 1.0));
    assert!(y.data()[9..].iter().all(|v| *v == 0.0));
}

#[test]
fn bilinear_quadrant_means() {
    let x = ramp(&[1, 4, 4]);
    let y = kernels::bilinear(&x, 2, 2).unwrap();
    assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
}

#[test]
fn bilinear_single_pixel_upsamples_to_constant() {
    let x = Tensor::new(vec![2, 1, 1], vec![0.3, -1.5]).unwrap();
    let y = kernels::bilinear(&x, 3, 3).unwrap();
    assert!(y.data()[..9].iter().all(|v| *v == 0.3));
    assert!(y.data()[9..].iter().all(|v| *v == -1.5));
}

#[test]
fn space_to_depth_definition() {
    let x = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = kernels::space_to_depth(&x, 2).unwrap();
    assert_eq!(y.dims(), &[4, 1, 1]);
    assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(kernels::space_to_depth(&x, 1).unwrap(), x);
    assert!(kernels::space_to_depth(&ramp(&[1, 3, 4]), 2).is_err());
}

#[test]
fn attention_single_token_identity_projections_returns_value() {
    let d = 4;
    let mut params = ParamSet::new();
    let mut eye = Tensor::zeros(vec![d, d]).unwrap();
    for i in 0..d {
        eye.data_mut()[i * d + i] = 1.0;
    }
    for p in ["q", "k", "v", "out"] {
        params.insert(format!("a.{p}.weight"), eye.clone()).unwrap();
        params
            .insert(format!("a.{p}.bias"), Tensor::zeros(vec![d]).unwrap())
            .unwrap();
    }
    let mut g = Graph::new();
    let bound = g.bind(&params);
    let x = g.constant(Tensor::new(vec![1, d], vec![0.5, -1.0, 2.0, 0.25]).unwrap());
    let y = nn::attention_block(&mut g, x, x, &bound, "a", 2).unwrap();
    assert_eq!(g.value(y), g.value(x));
}

#[test]
fn attention_uniform_keys_give_mean_of_values() {
    let d = 2;
    let mut params = ParamSet::new();
    // k projection is zero: every score is equal
    params
        .insert("a.k.weight", Tensor::zeros(vec![d, d]).unwrap())
        .unwrap();
    let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    for p in ["q", "v", "out"] {
        params.insert(format!("a.{p}.weight"), eye.clone()).unwrap();
    }
    let mut g = Graph::new();
    let bound = g.bind(&params);
    let q = g.constant(Tensor::new(vec![1, 2], vec![3.0, 1.0]).unwrap());
    let kv = g.constant(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]).unwrap());
    let y = nn::attention_block(&mut g, q, kv, &bound, "a", 1).unwrap();
    let out = g.value(y).data();
    assert!((out[0] - 3.0).abs() < 1e-12 && (out[1] - 5.0).abs() < 1e-12);
}

/// Direct evaluation of single-head attention with explicit loops.
fn attention_oracle(
    q: &[Vec<f64>],
    kv: &[Vec<f64>],
    wq: &[Vec<f64>],
    wk: &[Vec<f64>],
    wv: &[Vec<f64>],
    wo: &[Vec<f64>],
) -> Vec<Vec<f64>> {
    let proj = |x: &[f64], w: &[Vec<f64>]| -> Vec<f64> {
        w.iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    };
    let d = q[0].len();
    let keys: Vec<Vec<f64>> = kv.iter().map(|x| proj(x, wk)).collect();
    let vals: Vec<Vec<f64>> = kv.iter().map(|x| proj(x, wv)).collect();
    q.iter()
        .map(|x| {
            let qq = proj(x, wq);
            let s: Vec<f64> = keys
                .iter()
                .map(|k| qq.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let m = s.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut o = vec![0.0; d];
            for (w, v) in e.iter().zip(&vals) {
                for j in 0..d {
                    o[j] += w / z * v[j];
                }
            }
            proj(&o, wo)
        })
        .collect()
}

#[test]
fn attention_three_tokens_matches_hand_evaluation() {
    let mat = |vals: [f64; 9]| -> Vec<Vec<f64>> { vals.chunks(3).map(|c| c.to_vec()).collect() };
    let wq = mat([0.3, -0.2, 0.5, 0.1, 0.4, -0.6, 0.7, 0.2, 0.1]);
    let wk = mat([-0.4, 0.3, 0.2, 0.5, -0.1, 0.3, 0.2, 0.6, -0.5]);
    let wv = mat([0.9, 0.1, -0.3, -0.2, 0.8, 0.4, 0.3, -0.7, 0.6]);
    let wo = mat([0.5, 0.5, 0.0, -0.3, 0.2, 0.9, 0.1, -0.4, 0.7]);
    let toks = mat([1.0, -0.5, 2.0, 0.3, 0.8, -1.2, -0.7, 1.5, 0.4]);
    let expected = attention_oracle(&toks, &toks, &wq, &wk, &wv, &wo);

    let flat = |m: &[Vec<f64>]| Tensor::new(vec![m.len(), m[0].len()], m.concat()).unwrap();
    let mut params = ParamSet::new();
    for (name, w) in [("q", &wq), ("k", &wk), ("v", &wv), ("out", &wo)] {
        params.insert(format!("a.{name}.weight"), flat(w)).unwrap();
    }
    let mut g = Graph::new();
    let bound = g.bind(&params);
    let x = g.constant(flat(&toks));
    let y = nn::attention_block(&mut g, x, x, &bound, "a", 1).unwrap();
    for (got, want) in g.value(y).data().iter().zip(expected.concat()) {
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }
}

#[test]
fn attention_rejects_bad_heads_and_dims() {
    let mut params = ParamSet::new();
    nn::init_attention(&mut params, "a", 6, 0).unwrap();
    let mut g = Graph::new();
    let bound = g.bind(&params);
    let q = g.constant(Tensor::ones(vec![2, 6]).unwrap());
    let kv = g.constant(Tensor::ones(vec![2, 4]).unwrap());
    assert!(matches!(
        nn::attention_block(&mut g, q, kv, &bound, "a", 2),
        Err(TensorError::Shape { .. })
    ));
    assert!(matches!(
        nn::attention_block(&mut g, q, q, &bound, "a", 4),
        Err(TensorError::Geometry { .. })
    ));
}

#[test]
fn non_finite_output_is_an_error() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::scalar(f64::MAX));
    assert!(matches!(
        g.mul_const(x, 10.0),
        Err(TensorError::NonFinite { .. })
    ));
}

proptest! {
    #[test]
    fn space_to_depth_round_trips(c in 1usize..4, hb in 1usize..5, wb in 1usize..5, block in 1usize..4, seed in 0u64..1000) {
        let dims = [c, hb * block, wb * block];
        let n: usize = dims.iter().product();
        let x = Tensor::new(dims.to_vec(), (0..n).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 7.0).collect()).unwrap();
        let y = kernels::space_to_depth(&x, block).unwrap();
        prop_assert_eq!(y.dims(), &[c * block * block, hb, wb]);
        prop_assert_eq!(kernels::depth_to_space(&y, block).unwrap(), x);
    }

    #[test]
    fn bilinear_same_size_is_bitwise_identity(c in 1usize..3, h in 1usize..9, w in 1usize..9, seed in 0u64..1000) {
        let n = c * h * w;
        let x = Tensor::new(vec![c, h, w], (0..n).map(|i| ((i as f64) * 0.37 + seed as f64).sin()).collect()).unwrap();
        let y = kernels::bilinear(&x, h, w).unwrap();
        prop_assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn tokens_layout_round_trips(c in 1usize..5, h in 1usize..6, w in 1usize..6) {
        let x = ramp(&[c, h, w]);
        let t = kernels::chw_to_tokens(&x).unwrap();
        prop_assert_eq!(t.dims(), &[h * w, c]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    prop_assert_eq!(t.at(&[y * w + xx, ch]), x.at(&[ch, y, xx]));
                }
            }
        }
        prop_assert_eq!(kernels::tokens_to_chw(&t, h, w).unwrap(), x);
    }
}
