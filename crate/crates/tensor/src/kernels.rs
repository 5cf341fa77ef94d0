//! Value-level kernels shared by the tape's forward and backward passes.
//!
//! Every function here is pure: inputs are borrowed, outputs freshly allocated.

use crate::error::{geometry_err, shape_err, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Geometry of a 2-D convolution over a `C,H,W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

struct ConvShape {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cin_g: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv_shape(input: &Tensor, weight: &Tensor, geom: ConvGeom) -> Result<ConvShape> {
    let (cin, h, w) = input.chw()?;
    let [cout, cin_g, kh, kw] = match weight.dims() {
        &[a, b, c, d] => [a, b, c, d],
        other => return geometry_err("conv2d", format!("weight must be rank 4, got {other:?}")),
    };
    if geom.groups == 0 || cin % geom.groups != 0 || cout % geom.groups != 0 {
        return geometry_err(
            "conv2d",
            format!(
                "channels in {cin} / out {cout} not divisible by groups {}",
                geom.groups
            ),
        );
    }
    if cin / geom.groups != cin_g {
        return shape_err("conv2d", input.dims(), weight.dims());
    }
    let (Some(oh), Some(ow)) = (
        conv_out_extent(h, kh, geom.stride, geom.padding),
        conv_out_extent(w, kw, geom.stride, geom.padding),
    ) else {
        return geometry_err(
            "conv2d",
            format!(
                "kernel {kh}x{kw} does not fit input {h}x{w} with padding {} stride {}",
                geom.padding, geom.stride
            ),
        );
    };
    Ok(ConvShape {
        cin,
        h,
        w,
        cout,
        cin_g,
        kh,
        kw,
        oh,
        ow,
    })
}

/// Valid output range along one axis for kernel tap `k`: output positions `o`
/// with `0 <= o*stride + k - pad < n`.
fn tap_range(n: usize, out: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    // o*stride >= pad - k
    let lo = if pad > k {
        (pad - k).div_ceil(stride)
    } else {
        0
    };
    // o*stride + k - pad <= n - 1  =>  o <= (n - 1 + pad - k) / stride
    let hi = if n + pad > k {
        ((n - 1 + pad - k) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Cross-correlation of a `C,H,W` input with an `O, C/groups, kh, kw` kernel.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    geom: ConvGeom,
) -> Result<Tensor> {
    let s = conv_shape(input, weight, geom)?;
    if let Some(b) = bias {
        if b.dims() != [s.cout] {
            return shape_err("conv2d bias", b.dims(), &[s.cout]);
        }
    }
    let cout_g = s.cout / geom.groups;
    let x = input.data();
    let wt = weight.data();
    let mut out = vec![0.0; s.cout * s.oh * s.ow];
    for oc in 0..s.cout {
        let g = oc / cout_g;
        let plane = &mut out[oc * s.oh * s.ow..(oc + 1) * s.oh * s.ow];
        if let Some(b) = bias {
            plane.fill(b.data()[oc]);
        }
        for icg in 0..s.cin_g {
            let ic = g * s.cin_g + icg;
            let xin = &x[ic * s.h * s.w..(ic + 1) * s.h * s.w];
            for ky in 0..s.kh {
                let (oy0, oy1) = tap_range(s.h, s.oh, ky, geom.stride, geom.padding);
                for kx in 0..s.kw {
                    let wv = wt[((oc * s.cin_g + icg) * s.kh + ky) * s.kw + kx];
                    let (ox0, ox1) = tap_range(s.w, s.ow, kx, geom.stride, geom.padding);
                    for oy in oy0..oy1 {
                        let iy = oy * geom.stride + ky - geom.padding;
                        let row = &xin[iy * s.w..(iy + 1) * s.w];
                        let orow = &mut plane[oy * s.ow..(oy + 1) * s.ow];
                        for ox in ox0..ox1 {
                            orow[ox] += wv * row[ox * geom.stride + kx - geom.padding];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![s.cout, s.oh, s.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    geom: ConvGeom,
) -> Result<(Tensor, Tensor, Tensor)> {
    let s = conv_shape(input, weight, geom)?;
    if grad_out.dims() != [s.cout, s.oh, s.ow] {
        return shape_err("conv2d backward", grad_out.dims(), &[s.cout, s.oh, s.ow]);
    }
    let cout_g = s.cout / geom.groups;
    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; s.cin * s.h * s.w];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; s.cout];
    for oc in 0..s.cout {
        let g = oc / cout_g;
        let plane = &go[oc * s.oh * s.ow..(oc + 1) * s.oh * s.ow];
        gb[oc] = plane.iter().sum();
        for icg in 0..s.cin_g {
            let ic = g * s.cin_g + icg;
            let xin = &x[ic * s.h * s.w..(ic + 1) * s.h * s.w];
            let gxin = &mut gx[ic * s.h * s.w..(ic + 1) * s.h * s.w];
            for ky in 0..s.kh {
                let (oy0, oy1) = tap_range(s.h, s.oh, ky, geom.stride, geom.padding);
                for kx in 0..s.kw {
                    let widx = ((oc * s.cin_g + icg) * s.kh + ky) * s.kw + kx;
                    let wv = wt[widx];
                    let (ox0, ox1) = tap_range(s.w, s.ow, kx, geom.stride, geom.padding);
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy * geom.stride + ky - geom.padding;
                        let grow = &plane[oy * s.ow..(oy + 1) * s.ow];
                        for ox in ox0..ox1 {
                            let ix = ox * geom.stride + kx - geom.padding;
                            acc += grow[ox] * xin[iy * s.w + ix];
                            gxin[iy * s.w + ix] += grow[ox] * wv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(input.dims().to_vec(), gx)?,
        Tensor::new(weight.dims().to_vec(), gw)?,
        Tensor::new(vec![s.cout], gb)?,
    ))
}

/// Per-output-index source taps `(i0, i1, w0, w1)` for half-pixel bilinear
/// sampling along one axis, clamped to the edges.
pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64, f64)> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Bilinear resize of a `C,H,W` tensor to `C,out_h,out_w`.
pub fn bilinear(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if out_h == 0 || out_w == 0 {
        return geometry_err("interpolate_bilinear", "output extents must be >= 1");
    }
    if out_h == h && out_w == w {
        return Ok(input.clone());
    }
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let x = input.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, wy0, wy1) in &ty {
            for &(x0, x1, wx0, wx1) in &tx {
                let top = wx0 * p[y0 * w + x0] + wx1 * p[y0 * w + x1];
                let bot = wx0 * p[y1 * w + x0] + wx1 * p[y1 * w + x1];
                out.push(wy0 * top + wy1 * bot);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

pub fn bilinear_backward(grad_out: &Tensor, in_h: usize, in_w: usize) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.chw()?;
    if oh == in_h && ow == in_w {
        return Ok(grad_out.clone());
    }
    let ty = bilinear_taps(in_h, oh);
    let tx = bilinear_taps(in_w, ow);
    let go = grad_out.data();
    let mut gx = vec![0.0; c * in_h * in_w];
    for ch in 0..c {
        let p = &mut gx[ch * in_h * in_w..(ch + 1) * in_h * in_w];
        let g = &go[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                p[y0 * in_w + x0] += v * wy0 * wx0;
                p[y0 * in_w + x1] += v * wy0 * wx1;
                p[y1 * in_w + x0] += v * wy1 * wx0;
                p[y1 * in_w + x1] += v * wy1 * wx1;
            }
        }
    }
    Tensor::new(vec![c, in_h, in_w], gx)
}

/// Moves each `block x block` spatial cell into channels:
/// `out[c*b*b + by*b + bx, y, x] = in[c, y*b + by, x*b + bx]`.
pub fn space_to_depth(input: &Tensor, block: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if block == 0 || h % block != 0 || w % block != 0 {
        return geometry_err(
            "space_to_depth",
            format!("extents {h}x{w} not divisible by block {block}"),
        );
    }
    let (oh, ow) = (h / block, w / block);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for by in 0..block {
            for bx in 0..block {
                let oc = ch * block * block + by * block + bx;
                for y in 0..oh {
                    for xx in 0..ow {
                        out[(oc * oh + y) * ow + xx] =
                            x[(ch * h + y * block + by) * w + xx * block + bx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * block * block, oh, ow], out)
}

/// Exact inverse of [`space_to_depth`].
pub fn depth_to_space(input: &Tensor, block: usize) -> Result<Tensor> {
    let (cb, oh, ow) = input.chw()?;
    if block == 0 || cb % (block * block) != 0 {
        return geometry_err(
            "depth_to_space",
            format!("channels {cb} not divisible by block^2 for block {block}"),
        );
    }
    let c = cb / (block * block);
    let (h, w) = (oh * block, ow * block);
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for by in 0..block {
            for bx in 0..block {
                let ic = ch * block * block + by * block + bx;
                for y in 0..oh {
                    for xx in 0..ow {
                        out[(ch * h + y * block + by) * w + xx * block + bx] =
                            x[(ic * oh + y) * ow + xx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// `C,H,W` -> `(H*W, C)` token matrix, row index `y*W + x`.
pub fn chw_to_tokens(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let hw = h * w;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for p in 0..hw {
            out[p * c + ch] = x[ch * hw + p];
        }
    }
    Tensor::new(vec![hw, c], out)
}

/// Inverse of [`chw_to_tokens`].
pub fn tokens_to_chw(input: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = input.rows_cols()?;
    if n != h * w {
        return shape_err("tokens_to_chw", input.dims(), &[h * w, c]);
    }
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for p in 0..n {
        for ch in 0..c {
            out[ch * n + p] = x[p * c + ch];
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn transpose(input: &Tensor) -> Result<Tensor> {
    let (r, c) = input.rows_cols()?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// `a (m,k) x b (k,n)`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.rows_cols()?;
    let (k2, n) = b.rows_cols()?;
    if k != k2 {
        return shape_err("matmul", a.dims(), b.dims());
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a (m,k) x b^T` for `b (n,k)`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.rows_cols()?;
    let (n, k2) = b.rows_cols()?;
    if k != k2 {
        return shape_err("matmul_nt", a.dims(), b.dims());
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a^T x b` for `a (k,m)`, `b (k,n)`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.rows_cols()?;
    let (k2, n) = b.rows_cols()?;
    if k != k2 {
        return shape_err("matmul_tn", a.dims(), b.dims());
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &ad[p * m..(p + 1) * m];
        let brow = &bd[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Row-wise softmax of a rank-2 tensor.
pub fn softmax_rows(input: &Tensor) -> Result<Tensor> {
    let (r, c) = input.rows_cols()?;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * c..(i + 1) * c];
        let mut z = 0.0;
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Normalized rows and reciprocal std per row, before scale/shift.
pub fn layer_norm_stats(input: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (r, c) = input.rows_cols()?;
    let x = input.data();
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; r];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        rstd[i] = rs;
        for (o, v) in xhat[i * c..(i + 1) * c].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    Ok((xhat, rstd))
}
