//! 16-bit fixed-point inference path.
//!
//! Every weight, bias and activation tensor gets one power-of-two scale
//! (a [`QuantPlan`]). Convolutions accumulate products exactly and saturate
//! to 32 bits at write-back, so results do not depend on summation order.

mod fixed;

pub use fixed::{
    dequantize, exp_taylor5, fixed_softmax, fixed_squash, isqrt, quantize, quantize_raw, round_div, round_shift, sat16,
    sat32, taylor5, FixedPoint16, SQRT_GUARD_BITS, TAYLOR_MIN_INPUT,
};

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::bundle::WeightBundle;
use crate::capsnet::{
    activation_name, bias_name, broadcast_predictions, forward_observed, weight_name, CapsConfig, LayerKind,
    RoutingSpec, INPUT_ACTIVATION,
};
use crate::error::{Error, Result};
use crate::geometry::{EnvelopeImage, RfVolume};
use crate::pruning::{expand_compacted, CompactLayer, INDEX_PAD};
use crate::tensor::Tensor;

/// Fraction bits of routing logits and coupling coefficients.
pub const ROUTING_FRAC: i32 = 12;

pub const MAX_SCALE_EXP: i32 = 15;
pub const MIN_SCALE_EXP: i32 = 0;

/// Scale for a tensor whose largest magnitude is `m`: one integer guard bit
/// above the observed range.
pub fn scale_for_max(m: f64) -> i32 {
    let m = m.max(2f64.powi(-14));
    (14 - m.log2().ceil() as i32).clamp(MIN_SCALE_EXP, MAX_SCALE_EXP)
}

pub fn scale_entry_name(tensor: &str) -> String {
    format!("{tensor}.scale")
}

pub fn pre_activation_name(layer: &str) -> String {
    format!("{layer}.pre")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuantPlan {
    pub scales: BTreeMap<String, i32>,
}

impl QuantPlan {
    pub fn get(&self, name: &str) -> Result<i32> {
        self.scales.get(name).copied().ok_or_else(|| Error::MissingScale(name.to_string()))
    }

    pub fn set(&mut self, name: impl Into<String>, f: i32) {
        self.scales.insert(name.into(), f);
    }

    /// Stores every scale as a `<name>.scale` fixed16 entry.
    pub fn write_to(&self, bundle: &mut WeightBundle) -> Result<()> {
        for (name, &f) in &self.scales {
            bundle.insert(scale_entry_name(name), Tensor::from_i16(vec![1], 0, vec![f as i16])?)?;
        }
        bundle.set_meta("quantization", "fixed16");
        Ok(())
    }

    pub fn from_bundle(bundle: &WeightBundle) -> Result<Self> {
        let mut plan = Self::default();
        for name in bundle.names() {
            let Some(base) = name.strip_suffix(".scale") else { continue };
            let t = bundle.require(name)?;
            let raw = t
                .as_i16()
                .filter(|r| r.len() == 1)
                .ok_or_else(|| Error::InvalidTensor(format!("{name} must be a single fixed16 value")))?;
            plan.set(base, raw[0] as i32);
        }
        Ok(plan)
    }
}

fn max_abs(v: &[f32]) -> f64 {
    v.iter().fold(0.0f64, |m, &x| m.max((x as f64).abs()))
}

/// Runs the float network on every sample and picks a scale for each
/// weight, bias and activation from its largest magnitude.
pub fn calibrate(bundle: &WeightBundle, samples: &[RfVolume], cfg: &CapsConfig) -> Result<QuantPlan> {
    if samples.is_empty() {
        return Err(Error::EmptyCalibration);
    }
    let dense = expand_compacted(bundle)?;
    let mut plan = QuantPlan::default();
    for layer in cfg.layers() {
        if matches!(layer.kind, LayerKind::Routing(_)) {
            continue;
        }
        for name in [weight_name(&layer.name), bias_name(&layer.name)] {
            let t = bundle.require(&name)?;
            plan.set(name, scale_for_max(max_abs(&t.to_f32_vec())));
        }
    }
    let mut peaks: BTreeMap<String, f64> = BTreeMap::new();
    for rf in samples {
        forward_observed(rf, cfg, &dense, &mut |name, values| {
            let m = peaks.entry(name.to_string()).or_insert(0.0);
            *m = m.max(max_abs(values));
        })?;
    }
    for (name, m) in peaks {
        plan.set(name, scale_for_max(m));
    }
    Ok(plan)
}

/// Order of the conv epilogue operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReluBiasOrder {
    #[default]
    BiasThenRelu,
    ReluThenBias,
}

/// Quantized conv (or pointwise FC) layer in compacted form.
#[derive(Debug, Clone, PartialEq)]
pub struct QConv {
    pub name: String,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub kmax: usize,
    pub filters: Vec<usize>,
    /// `[kmax][nf]`, -1 for padding.
    pub index: Vec<i16>,
    /// `[kh][kw][kmax][nf]` at scale `f_w`.
    pub weights: Vec<i16>,
    /// Bias aligned to the accumulator scale `f_in + f_w`.
    pub bias_acc: Vec<i64>,
    pub f_in: i32,
    pub f_w: i32,
    pub f_out: i32,
    pub relu: bool,
}

impl QConv {
    /// Quantizes a compacted layer. Scales are looked up as `<layer>.weight`,
    /// `<layer>.bias`, `input_scale` and `output_scale`.
    pub fn build(
        name: &str,
        layer: &CompactLayer,
        plan: &QuantPlan,
        input_scale: &str,
        output_scale: &str,
        relu: bool,
    ) -> Result<Self> {
        let f_in = plan.get(input_scale)?;
        let f_out = plan.get(output_scale)?;
        let f_w = plan.get(&weight_name(name))?;
        let f_b = plan.get(&bias_name(name))?;
        let weights = layer.weights.iter().map(|&w| quantize_raw(w as f64, f_w)).collect();
        let bias_acc =
            layer.bias.iter().map(|&b| round_shift(quantize_raw(b as f64, f_b) as i64, f_b - f_in - f_w)).collect();
        Ok(Self {
            name: name.to_string(),
            kh: layer.kh,
            kw: layer.kw,
            cin: layer.cin,
            cout: layer.cout,
            kmax: layer.kmax,
            filters: layer.filters.clone(),
            index: layer.index.clone(),
            weights,
            bias_acc,
            f_in,
            f_w,
            f_out,
            relu,
        })
    }

    pub fn num_filters(&self) -> usize {
        self.filters.len()
    }

    /// Right shift from the accumulator scale to the output scale.
    pub fn shift(&self) -> i32 {
        self.f_in + self.f_w - self.f_out
    }

    pub fn weight(&self, ky: usize, kx: usize, slot: usize, f: usize) -> i16 {
        self.weights[((ky * self.kw + kx) * self.kmax + slot) * self.num_filters() + f]
    }

    /// Input channel feeding `slot` of kept filter `f`, if any.
    pub fn channel(&self, slot: usize, f: usize) -> Option<usize> {
        let q = self.index[slot * self.num_filters() + f];
        (q != INDEX_PAD).then_some(q as usize)
    }

    /// Kept channels and weights of every kept filter, unpadded.
    pub fn filter_taps(&self) -> Vec<FilterTaps> {
        (0..self.num_filters())
            .map(|f| {
                let slots: Vec<usize> = (0..self.kmax).filter(|&s| self.channel(s, f).is_some()).collect();
                let channels = slots.iter().map(|&s| self.channel(s, f).expect("kept slot")).collect();
                let mut weights = Vec::with_capacity(self.kh * self.kw * slots.len());
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        weights.extend(slots.iter().map(|&s| self.weight(ky, kx, s, f)));
                    }
                }
                FilterTaps { channels, weights }
            })
            .collect()
    }

    /// Bias, ReLU, 32-bit write-back saturation and requantization of one
    /// exact product sum of kept filter `f`.
    pub fn finish(&self, acc: i64, f: usize, order: ReluBiasOrder) -> i16 {
        let a = match order {
            ReluBiasOrder::BiasThenRelu => {
                let a = sat32(acc + self.bias_acc[f]) as i64;
                if self.relu {
                    a.max(0)
                } else {
                    a
                }
            }
            ReluBiasOrder::ReluThenBias => {
                let a = if self.relu { acc.max(0) } else { acc };
                sat32(a + self.bias_acc[f]) as i64
            }
        };
        sat16(round_shift(a, self.shift()))
    }
}

/// One filter's kept input channels and its `[kh][kw][kept]` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTaps {
    pub channels: Vec<usize>,
    pub weights: Vec<i16>,
}

impl FilterTaps {
    /// Exact product sum of one kernel tap position against a pixel.
    pub fn dot(&self, tap: usize, px: &[i16]) -> i64 {
        let n = self.channels.len();
        let w = &self.weights[tap * n..(tap + 1) * n];
        match self.channels.first() {
            // dense run of channels: plain slice product, which vectorizes
            Some(&q0) if self.channels[n - 1] == q0 + n - 1 => {
                px[q0..q0 + n].iter().zip(w).map(|(&x, &w)| (x as i32 * w as i32) as i64).sum()
            }
            _ => self.channels.iter().zip(w).map(|(&q, &w)| (px[q] as i32 * w as i32) as i64).sum(),
        }
    }
}

/// Zero-padded "same" convolution of `[rows][cols][cin]` fixed16 input.
/// Removed filters produce zero channels.
pub fn qconv(input: &[i16], rows: usize, cols: usize, layer: &QConv, order: ReluBiasOrder) -> Result<Vec<i16>> {
    if input.len() != rows * cols * layer.cin {
        return Err(Error::ShapeMismatch(format!(
            "{}: input has {} values, expected {rows}x{cols}x{}",
            layer.name,
            input.len(),
            layer.cin
        )));
    }
    let (ph, pw) = ((layer.kh - 1) / 2, (layer.kw - 1) / 2);
    let taps = layer.filter_taps();
    let mut out = vec![0i16; rows * cols * layer.cout];
    out.par_chunks_mut(cols * layer.cout).enumerate().for_each(|(r, row_out)| {
        for c in 0..cols {
            for (f, t) in taps.iter().enumerate() {
                let mut acc = 0i64;
                for ky in 0..layer.kh {
                    let Some(ir) = (r + ky).checked_sub(ph).filter(|&v| v < rows) else { continue };
                    for kx in 0..layer.kw {
                        let Some(ic) = (c + kx).checked_sub(pw).filter(|&v| v < cols) else { continue };
                        acc += t.dot(ky * layer.kw + kx, &input[(ir * cols + ic) * layer.cin..][..layer.cin]);
                    }
                }
                row_out[c * layer.cout + layer.filters[f]] = layer.finish(acc, f, order);
            }
        }
    });
    Ok(out)
}

/// Fixed-point squash of every `dim`-sized capsule.
pub fn qsquash_capsules(x: &[i16], dim: usize, f_in: i32, f_out: i32) -> Result<Vec<i16>> {
    let parts: Vec<Vec<i16>> = x.par_chunks(dim).map(|cap| fixed_squash(cap, f_in, f_out)).collect::<Result<_>>()?;
    Ok(parts.concat())
}

/// Fixed-point dynamic routing of one pixel. `caps` holds `n_in` capsules at
/// scale `f_u`; predictions broadcast each input capsule to every output.
/// Returns the `n_out` output capsules at scale `f_v`.
pub fn qroute_pixel(caps: &[i16], r: &RoutingSpec, f_u: i32, f_v: i32) -> Result<Vec<i16>> {
    let (n_in, n_out, d) = (r.num_in_capsules, r.num_out_capsules, r.out_dim);
    if caps.len() != n_in * r.in_dim || r.in_dim != d {
        return Err(Error::ShapeMismatch(format!("routing pixel has {} values, expected {n_in}x{d}", caps.len())));
    }
    let u = broadcast_predictions(caps, n_in, n_out, d);
    let mut b = vec![0i16; n_in * n_out];
    let mut v = vec![0i16; n_out * d];
    for it in 0..r.num_iterations {
        let c: Vec<i16> = b.chunks(n_out).flat_map(|row| fixed_softmax(row, ROUTING_FRAC)).collect();
        for j in 0..n_out {
            let mut s = vec![0i16; d];
            for (k, sk) in s.iter_mut().enumerate() {
                let acc: i64 = (0..n_in).map(|i| c[i * n_out + j] as i64 * u[(i * n_out + j) * d + k] as i64).sum();
                *sk = sat16(round_shift(acc, ROUTING_FRAC));
            }
            v[j * d..(j + 1) * d].copy_from_slice(&fixed_squash(&s, f_u, f_v)?);
        }
        if it + 1 < r.num_iterations {
            for i in 0..n_in {
                for j in 0..n_out {
                    let dot: i64 = (0..d).map(|k| u[(i * n_out + j) * d + k] as i64 * v[j * d + k] as i64).sum();
                    let delta = round_shift(dot, f_u + f_v - ROUTING_FRAC);
                    b[i * n_out + j] = sat16(b[i * n_out + j] as i64 + delta);
                }
            }
        }
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq)]
pub enum QStage {
    Conv(QConv),
    CapsConv { conv: QConv, capsule_dim: usize, f_out: i32 },
    Routing { spec: RoutingSpec, f_u: i32, f_v: i32 },
    Fc(QConv),
}

/// A network quantized under a plan, ready for fixed-point inference.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedNet {
    pub input_channels: usize,
    pub f_input: i32,
    pub stages: Vec<(String, QStage)>,
}

impl QuantizedNet {
    /// Accepts dense or compacted (pruned) bundles.
    pub fn build(cfg: &CapsConfig, bundle: &WeightBundle, plan: &QuantPlan) -> Result<Self> {
        cfg.validate_for_inference()?;
        let input_channels = cfg.input_channels().unwrap_or(0);
        let mut prev = INPUT_ACTIVATION.to_string();
        let mut stages = Vec::new();
        for layer in cfg.layers() {
            let out = activation_name(&layer.name);
            let stage = match layer.kind {
                LayerKind::Conv(c) => {
                    let compact = CompactLayer::from_bundle(bundle, &layer.name)?;
                    check_dims(&layer.name, &compact, [c.kernel_h, c.kernel_w, c.in_ch, c.out_ch])?;
                    QStage::Conv(QConv::build(&layer.name, &compact, plan, &prev, &out, c.relu)?)
                }
                LayerKind::CapsConv(c) => {
                    let compact = CompactLayer::from_bundle(bundle, &layer.name)?;
                    check_dims(&layer.name, &compact, [c.kernel_h, c.kernel_w, c.in_ch, c.out_ch])?;
                    let pre = pre_activation_name(&layer.name);
                    let conv = QConv::build(&layer.name, &compact, plan, &prev, &pre, false)?;
                    QStage::CapsConv { conv, capsule_dim: c.capsule_dim, f_out: plan.get(&out)? }
                }
                LayerKind::Routing(r) => QStage::Routing { spec: r, f_u: plan.get(&prev)?, f_v: plan.get(&out)? },
                LayerKind::Fc(f) => {
                    let compact = CompactLayer::from_bundle(bundle, &layer.name)?;
                    check_dims(&layer.name, &compact, [1, 1, f.in_features, f.out_features])?;
                    QStage::Fc(QConv::build(&layer.name, &compact, plan, &prev, &out, f.relu)?)
                }
            };
            stages.push((layer.name.clone(), stage));
            prev = out;
        }
        Ok(Self { input_channels, f_input: plan.get(INPUT_ACTIVATION)?, stages })
    }

    pub fn quantize_input(&self, rf: &RfVolume) -> Result<Vec<i16>> {
        if rf.num_channels != self.input_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} input channels, rf has {}",
                self.input_channels, rf.num_channels
            )));
        }
        Ok(rf.data().par_iter().map(|&x| quantize_raw(x as f64, self.f_input)).collect())
    }

    /// Runs every stage, reporting each activation (and capsule pre-squash
    /// values) under the same names calibration uses.
    pub fn forward_observed(&self, rf: &RfVolume, observe: &mut dyn FnMut(&str, &[i16])) -> Result<EnvelopeImage> {
        let (rows, cols) = (rf.grid.num_rows, rf.grid.num_cols);
        let mut x = self.quantize_input(rf)?;
        observe(INPUT_ACTIVATION, &x);
        let mut f_last = self.f_input;
        for (name, stage) in &self.stages {
            match stage {
                QStage::Conv(conv) | QStage::Fc(conv) => {
                    x = qconv(&x, rows, cols, conv, ReluBiasOrder::BiasThenRelu)?;
                    f_last = conv.f_out;
                }
                QStage::CapsConv { conv, capsule_dim, f_out } => {
                    x = qconv(&x, rows, cols, conv, ReluBiasOrder::BiasThenRelu)?;
                    observe(&pre_activation_name(name), &x);
                    x = qsquash_capsules(&x, *capsule_dim, conv.f_out, *f_out)?;
                    f_last = *f_out;
                }
                QStage::Routing { spec, f_u, f_v } => {
                    let width = spec.num_in_capsules * spec.in_dim;
                    let parts: Vec<Vec<i16>> =
                        x.par_chunks(width).map(|px| qroute_pixel(px, spec, *f_u, *f_v)).collect::<Result<_>>()?;
                    x = parts.concat();
                    f_last = *f_v;
                }
            }
            observe(&activation_name(name), &x);
        }
        let i = x.iter().step_by(2).map(|&r| dequantize(r, f_last) as f32).collect();
        let q = x.iter().skip(1).step_by(2).map(|&r| dequantize(r, f_last) as f32).collect();
        EnvelopeImage::from_parts(rf.grid.clone(), i, q)
    }
}

fn check_dims(name: &str, c: &CompactLayer, want: [usize; 4]) -> Result<()> {
    if [c.kh, c.kw, c.cin, c.cout] != want {
        return Err(Error::ShapeMismatch(format!(
            "{name}: weights are {}x{}x{}x{}, config expects {want:?}",
            c.kh, c.kw, c.cin, c.cout
        )));
    }
    Ok(())
}

/// Fixed-point CapsBeam inference, dequantized to float I/Q.
pub fn infer_quantized(
    rf: &RfVolume,
    cfg: &CapsConfig,
    bundle: &WeightBundle,
    plan: &QuantPlan,
) -> Result<EnvelopeImage> {
    QuantizedNet::build(cfg, bundle, plan)?.forward_observed(rf, &mut |_, _| {})
}
