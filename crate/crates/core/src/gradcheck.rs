//! Backward pass versus central differences over the fusion parameters.

use hires_tensor::gradcheck::DEFAULT_EPS;
use hires_tensor::{
    backward, compare_gradients, finite_difference_entries, finite_difference_subset,
    GradCheckReport, Graph, ParamSet, Tensor,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cvfm;
use crate::encoder::{EncoderConfig, HybridEncoder};
use crate::error::{usage, Result};
use crate::image::ImageBuffer;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub seed: u64,
    /// Gate value used for every interaction layer. Zero would make the MLP
    /// and attention gradients vanish identically.
    pub gate: f64,
    pub rtol: f64,
    pub atol: f64,
    pub eps: f64,
    /// Scale one analytic gradient by 1.5 before comparing (negative control).
    pub corrupt: bool,
    /// Check this many seeded random coordinates of each parameter instead of
    /// all of them. Every parameter tensor is still visited.
    pub coords_per_param: Option<usize>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            gate: 0.3,
            rtol: 1e-3,
            atol: 1e-6,
            eps: DEFAULT_EPS,
            corrupt: false,
            coords_per_param: None,
        }
    }
}

/// Deterministic `[-1, 1)` image for checks that need no real content.
pub fn noise_image(
    width: usize,
    height: usize,
    seed: u64,
    config: &EncoderConfig,
) -> Result<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * width * height)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    ImageBuffer::new(
        Tensor::new(vec![3, height, width], data)?,
        config.normalization.clone(),
    )
}

/// Compares analytic and numeric gradients of `sum(W * tokens)` (fixed random
/// `W`) with respect to every `cvfm.*` parameter.
pub fn fusion_gradcheck(
    config: &EncoderConfig,
    image: &ImageBuffer,
    opts: GradcheckOptions,
) -> Result<GradCheckReport> {
    if !config.fusion.enabled {
        return usage("gradient check needs fusion enabled");
    }
    let mut cfg = config.clone();
    cfg.fusion.gate_init = opts.gate;
    let enc = HybridEncoder::new(cfg)?;
    let params = enc.init_params(opts.seed)?;
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with(&format!("{}.", cvfm::PREFIX)))
        .map(str::to_string)
        .collect();
    let plan = enc.plan(image.width(), image.height())?;
    let n = plan.view_count * plan.token_grid.pow(2) * enc.config().vit.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let weights = Tensor::new(
        vec![n / enc.config().vit.embed_dim, enc.config().vit.embed_dim],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;

    let loss_value = |p: &ParamSet| -> hires_tensor::Result<f64> {
        let toks = enc.encode(image, p).map_err(to_tensor_err)?.to_tensor();
        Ok(toks
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum())
    };

    let mut g = Graph::new();
    let bound = g.bind(&params);
    let out = enc.forward(&mut g, &bound, image)?;
    let all = g.concat(&out.views, 0)?;
    let w = g.constant(weights.clone());
    let prod = g.mul(all, w)?;
    let loss = g.sum(prod)?;
    let mut analytic = backward(&g, loss, &bound)?;
    analytic.retain(|k, _| names.contains(k));
    if opts.corrupt {
        if let Some(t) = names.first().and_then(|k| analytic.get_mut(k)) {
            for v in t.data_mut() {
                *v = *v * 1.5 + 1e-3;
            }
        }
    }
    let numeric = match opts.coords_per_param {
        None => finite_difference_subset(loss_value, &params, &names, opts.eps)?,
        Some(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xc00d);
            let mut entries = Vec::with_capacity(names.len());
            for name in &names {
                let n = params.get(name).expect("listed").numel();
                let mut idx = sample(&mut rng, n, k.min(n)).into_vec();
                idx.sort_unstable();
                let full = analytic
                    .get(name)
                    .expect("backward covers every bound param");
                let picked = idx.iter().map(|&i| full.data()[i]).collect();
                analytic.insert(name.clone(), Tensor::new(vec![idx.len()], picked)?);
                entries.push((name.clone(), idx));
            }
            finite_difference_entries(loss_value, &params, &entries, opts.eps)?
        }
    };
    Ok(compare_gradients(
        &analytic, &numeric, opts.rtol, opts.atol,
    )?)
}

fn to_tensor_err(e: crate::Error) -> hires_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => hires_tensor::TensorError::Usage(other.to_string()),
    }
}
