//! End-to-end float inference and seeded weight initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{CapsConfig, LayerKind};
use super::ops::{broadcast_predictions, conv2d_raw, dense_raw, route, squash_capsules_f32};
use crate::bundle::WeightBundle;
use crate::error::{Error, Result};
use crate::geometry::{EnvelopeImage, RfVolume};
use crate::tensor::Tensor;

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// Expected weight and bias dims for a trained layer; `None` for routing.
pub fn param_dims(kind: &LayerKind) -> Option<(Vec<usize>, Vec<usize>)> {
    match *kind {
        LayerKind::Conv(c) => Some((vec![c.kernel_h, c.kernel_w, c.in_ch, c.out_ch], vec![c.out_ch])),
        LayerKind::CapsConv(c) => Some((vec![c.kernel_h, c.kernel_w, c.in_ch, c.out_ch], vec![c.out_ch])),
        LayerKind::Routing(_) => None,
        LayerKind::Fc(f) => Some((vec![f.in_features, f.out_features], vec![f.out_features])),
    }
}

/// He-uniform weights and small uniform biases, deterministic in `seed`.
pub fn random_bundle(cfg: &CapsConfig, seed: u64) -> Result<WeightBundle> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bundle = WeightBundle::new();
    for layer in cfg.layers() {
        let Some((wd, bd)) = param_dims(&layer.kind) else { continue };
        let fan_in: usize = wd[..wd.len() - 1].iter().product();
        let limit = (6.0 / fan_in as f64).sqrt() as f32;
        let w = (0..wd.iter().product::<usize>()).map(|_| rng.random_range(-limit..limit)).collect();
        let b = (0..bd[0]).map(|_| rng.random_range(-0.1f32..0.1)).collect();
        bundle.insert(weight_name(&layer.name), Tensor::from_f32(wd, w)?)?;
        bundle.insert(bias_name(&layer.name), Tensor::from_f32(bd, b)?)?;
    }
    bundle.set_meta("init_seed", seed.to_string());
    Ok(bundle)
}

/// Fetches a layer's float weights and bias, checking dims.
pub(crate) fn layer_params<'a>(
    bundle: &'a WeightBundle,
    name: &str,
    kind: &LayerKind,
) -> Result<(&'a [f32], &'a [f32])> {
    let (wd, bd) = param_dims(kind).expect("trained layer");
    let w = bundle.require(&weight_name(name))?.expect_f32(&weight_name(name), &wd)?;
    let b = bundle.require(&bias_name(name))?.expect_f32(&bias_name(name), &bd)?;
    Ok((w, b))
}

/// Name of the activation each layer produces, as recorded during
/// calibration. Capsule layers also report their pre-squash value as
/// `<layer>.pre`.
pub fn activation_name(layer: &str) -> String {
    format!("{layer}.out")
}

pub const INPUT_ACTIVATION: &str = "input";

/// Runs the float network, calling `observe` with each named activation.
pub fn forward_observed(
    rf: &RfVolume,
    cfg: &CapsConfig,
    bundle: &WeightBundle,
    observe: &mut dyn FnMut(&str, &[f32]),
) -> Result<EnvelopeImage> {
    cfg.validate_for_inference()?;
    let grid = &rf.grid;
    let (rows, cols) = (grid.num_rows, grid.num_cols);
    if cfg.input_channels() != Some(rf.num_channels) {
        return Err(Error::ShapeMismatch(format!(
            "network expects {:?} input channels, rf has {}",
            cfg.input_channels(),
            rf.num_channels
        )));
    }
    let mut x: Vec<f32> = rf.data().to_vec();
    let mut width = rf.num_channels;
    observe(INPUT_ACTIVATION, &x);
    for layer in cfg.layers() {
        match layer.kind {
            LayerKind::Conv(c) => {
                let (w, b) = layer_params(bundle, &layer.name, &layer.kind)?;
                x = conv2d_raw(&x, rows, cols, width, w, c.kernel_h, c.kernel_w, c.out_ch, b, c.relu);
                width = c.out_ch;
            }
            LayerKind::CapsConv(c) => {
                let (w, b) = layer_params(bundle, &layer.name, &layer.kind)?;
                x = conv2d_raw(&x, rows, cols, width, w, c.kernel_h, c.kernel_w, c.out_ch, b, false);
                observe(&format!("{}.pre", layer.name), &x);
                squash_capsules_f32(&mut x, c.capsule_dim);
                width = c.out_ch;
            }
            LayerKind::Routing(r) => {
                let out_w = r.num_out_capsules * r.out_dim;
                let routed: Vec<Vec<f32>> = x
                    .par_chunks(width)
                    .map(|px| {
                        let caps: Vec<f64> = px.iter().map(|&v| v as f64).collect();
                        let u = broadcast_predictions(&caps, r.num_in_capsules, r.num_out_capsules, r.in_dim);
                        let st = route(&u, r.num_in_capsules, r.num_out_capsules, r.out_dim, r.num_iterations)
                            .expect("validated routing shape");
                        st.output_v.iter().map(|&v| v as f32).collect()
                    })
                    .collect();
                x = routed.concat();
                width = out_w;
            }
            LayerKind::Fc(f) => {
                let (w, b) = layer_params(bundle, &layer.name, &layer.kind)?;
                x = dense_raw(&x, width, w, f.out_features, b, f.relu);
                width = f.out_features;
            }
        }
        observe(&activation_name(&layer.name), &x);
    }
    let i = x.iter().step_by(2).copied().collect();
    let q = x.iter().skip(1).step_by(2).copied().collect();
    EnvelopeImage::from_parts(grid.clone(), i, q)
}

/// Float CapsBeam inference: RF cube in, per-pixel I/Q out.
pub fn infer(rf: &RfVolume, cfg: &CapsConfig, bundle: &WeightBundle) -> Result<EnvelopeImage> {
    forward_observed(rf, cfg, bundle, &mut |_, _| {})
}
