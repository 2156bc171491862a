//! Architecture description plus analytic parameter and operation counts.

use crate::error::{Error, Result};
use crate::geometry::PixelGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub relu: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub num_capsules: usize,
    pub capsule_dim: usize,
}

impl CapsConvSpec {
    pub fn as_conv(&self) -> ConvSpec {
        ConvSpec {
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            in_ch: self.in_ch,
            out_ch: self.out_ch,
            relu: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingSpec {
    pub num_in_capsules: usize,
    pub in_dim: usize,
    pub num_out_capsules: usize,
    pub out_dim: usize,
    pub num_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FcSpec {
    pub in_features: usize,
    pub out_features: usize,
    pub relu: bool,
}

/// Conv feature extractor, convolutional capsule layers, per-pixel routing
/// and a pointwise fully connected head. Stride 1 and zero "same" padding
/// everywhere.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CapsConfig {
    pub conv_layers: Vec<ConvSpec>,
    pub caps_conv_layers: Vec<CapsConvSpec>,
    pub routing: Option<RoutingSpec>,
    pub fc_layers: Vec<FcSpec>,
}

/// One entry of the flattened layer list, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv(ConvSpec),
    CapsConv(CapsConvSpec),
    Routing(RoutingSpec),
    Fc(FcSpec),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl CapsConfig {
    /// The full-size beamformer: 7x7 receptive field, 8x8 routing, two
    /// I/Q outputs per pixel.
    pub fn default_capsbeam() -> Self {
        Self {
            conv_layers: vec![
                ConvSpec { kernel_h: 1, kernel_w: 1, in_ch: 128, out_ch: 128, relu: true },
                ConvSpec { kernel_h: 3, kernel_w: 3, in_ch: 128, out_ch: 128, relu: true },
            ],
            caps_conv_layers: vec![
                CapsConvSpec { kernel_h: 3, kernel_w: 3, in_ch: 128, out_ch: 80, num_capsules: 10, capsule_dim: 8 },
                CapsConvSpec { kernel_h: 3, kernel_w: 3, in_ch: 80, out_ch: 64, num_capsules: 8, capsule_dim: 8 },
            ],
            routing: Some(RoutingSpec {
                num_in_capsules: 8,
                in_dim: 8,
                num_out_capsules: 8,
                out_dim: 8,
                num_iterations: 3,
            }),
            fc_layers: head(&[64, 32, 16, 8, 2]),
        }
    }

    /// Same topology at toy width, for `channels`-channel input.
    pub fn toy(channels: usize) -> Self {
        Self {
            conv_layers: vec![
                ConvSpec { kernel_h: 1, kernel_w: 1, in_ch: channels, out_ch: 8, relu: true },
                ConvSpec { kernel_h: 3, kernel_w: 3, in_ch: 8, out_ch: 8, relu: true },
            ],
            caps_conv_layers: vec![
                CapsConvSpec { kernel_h: 3, kernel_w: 3, in_ch: 8, out_ch: 8, num_capsules: 2, capsule_dim: 4 },
                CapsConvSpec { kernel_h: 3, kernel_w: 3, in_ch: 8, out_ch: 8, num_capsules: 2, capsule_dim: 4 },
            ],
            routing: Some(RoutingSpec {
                num_in_capsules: 2,
                in_dim: 4,
                num_out_capsules: 2,
                out_dim: 4,
                num_iterations: 3,
            }),
            fc_layers: head(&[8, 8, 4, 2]),
        }
    }

    pub fn input_channels(&self) -> Option<usize> {
        self.conv_layers
            .first()
            .map(|c| c.in_ch)
            .or_else(|| self.caps_conv_layers.first().map(|c| c.in_ch))
            .or_else(|| self.routing.map(|r| r.num_in_capsules * r.in_dim))
            .or_else(|| self.fc_layers.first().map(|f| f.in_features))
    }

    pub fn layers(&self) -> Vec<Layer> {
        let mut out = Vec::new();
        for (i, c) in self.conv_layers.iter().enumerate() {
            out.push(Layer { name: format!("conv{i}"), kind: LayerKind::Conv(*c) });
        }
        for (i, c) in self.caps_conv_layers.iter().enumerate() {
            out.push(Layer { name: format!("caps{i}"), kind: LayerKind::CapsConv(*c) });
        }
        if let Some(r) = self.routing {
            out.push(Layer { name: "routing".into(), kind: LayerKind::Routing(r) });
        }
        for (i, f) in self.fc_layers.iter().enumerate() {
            out.push(Layer { name: format!("fc{i}"), kind: LayerKind::Fc(*f) });
        }
        out
    }

    /// Structural checks: positive extents, odd kernels, channel chaining,
    /// capsule shapes.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let mut width: Option<usize> = None;
        let mut chain = |name: &str, cin: usize, cout: usize| -> Result<()> {
            if cin == 0 || cout == 0 {
                return Err(Error::InvalidConfig(format!("{name}: zero channel count")));
            }
            if let Some(w) = width {
                if w != cin {
                    return Err(Error::InvalidConfig(format!(
                        "{name}: expects {cin} input channels, previous layer gives {w}"
                    )));
                }
            }
            width = Some(cout);
            Ok(())
        };
        for layer in self.layers() {
            match layer.kind {
                LayerKind::Conv(c) => {
                    check_kernel(&layer.name, c.kernel_h, c.kernel_w)?;
                    chain(&layer.name, c.in_ch, c.out_ch)?;
                }
                LayerKind::CapsConv(c) => {
                    check_kernel(&layer.name, c.kernel_h, c.kernel_w)?;
                    if c.num_capsules * c.capsule_dim != c.out_ch || c.capsule_dim == 0 {
                        return bad(format!(
                            "{}: {} capsules x {} dims != {} channels",
                            layer.name, c.num_capsules, c.capsule_dim, c.out_ch
                        ));
                    }
                    chain(&layer.name, c.in_ch, c.out_ch)?;
                }
                LayerKind::Routing(r) => {
                    if r.num_iterations == 0 {
                        return bad("routing needs at least one iteration".into());
                    }
                    if r.in_dim != r.out_dim {
                        return bad(format!(
                            "routing forms predictions by broadcasting input capsules, so in_dim ({}) must equal out_dim ({})",
                            r.in_dim, r.out_dim
                        ));
                    }
                    if let Some(last) = self.caps_conv_layers.last() {
                        if last.num_capsules != r.num_in_capsules || last.capsule_dim != r.in_dim {
                            return bad("routing input does not match last capsule layer".into());
                        }
                    }
                    chain("routing", r.num_in_capsules * r.in_dim, r.num_out_capsules * r.out_dim)?;
                }
                LayerKind::Fc(f) => chain(&layer.name, f.in_features, f.out_features)?,
            }
        }
        Ok(())
    }

    /// Structural checks plus the inference contract: non-empty, ends in two
    /// outputs (I and Q).
    pub fn validate_for_inference(&self) -> Result<()> {
        self.validate()?;
        match self.layers().last().map(|l| l.kind) {
            Some(LayerKind::Fc(f)) if f.out_features == 2 => Ok(()),
            _ => Err(Error::InvalidConfig("network must end in an FC layer with 2 outputs".into())),
        }
    }

    pub fn receptive_field(&self) -> (usize, usize) {
        let mut h = 1;
        let mut w = 1;
        for c in &self.conv_layers {
            h += c.kernel_h - 1;
            w += c.kernel_w - 1;
        }
        for c in &self.caps_conv_layers {
            h += c.kernel_h - 1;
            w += c.kernel_w - 1;
        }
        (h, w)
    }
}

fn head(widths: &[usize]) -> Vec<FcSpec> {
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| FcSpec { in_features: w[0], out_features: w[1], relu: i + 2 < widths.len() })
        .collect()
}

fn check_kernel(name: &str, kh: usize, kw: usize) -> Result<()> {
    if kh == 0 || kw == 0 || kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidConfig(format!("{name}: kernel {kh}x{kw} must be odd")));
    }
    Ok(())
}

/// Trained scalars (weights plus biases) per layer; routing has none.
pub fn layer_params(kind: &LayerKind) -> u64 {
    match *kind {
        LayerKind::Conv(c) => (c.kernel_h * c.kernel_w * c.in_ch * c.out_ch + c.out_ch) as u64,
        LayerKind::CapsConv(c) => (c.kernel_h * c.kernel_w * c.in_ch * c.out_ch + c.out_ch) as u64,
        LayerKind::Routing(_) => 0,
        LayerKind::Fc(f) => (f.in_features * f.out_features + f.out_features) as u64,
    }
}

pub fn count_params(cfg: &CapsConfig) -> Result<u64> {
    cfg.validate()?;
    Ok(cfg.layers().iter().map(|l| layer_params(&l.kind)).sum())
}

/// Operations per pixel of one squash over `n` capsules of `d` dims:
/// norm (d mul + d add) and rescale (d mul).
pub fn squash_ops(n: usize, d: usize) -> u64 {
    (3 * n * d) as u64
}

/// Operations per pixel of the routing stage. Each exponential costs five
/// multiplies and five adds (Taylor form) plus one add into the row sum and
/// one divide; the weighted sum and the agreement are 2 ops per MAC; the
/// agreement is skipped after the last iteration.
pub fn routing_ops_per_pixel(r: &RoutingSpec) -> u64 {
    let pairs = (r.num_in_capsules * r.num_out_capsules) as u64;
    let d = r.out_dim as u64;
    let it = r.num_iterations as u64;
    let softmax = 12 * pairs;
    let weighted_sum = 2 * pairs * d;
    let squash = squash_ops(r.num_out_capsules, r.out_dim);
    let agreement = 2 * pairs * d;
    it * (softmax + weighted_sum + squash) + it.saturating_sub(1) * agreement
}

/// Operations per pixel of one layer: 2 per multiply-accumulate, plus the
/// capsule squash and routing costs.
pub fn layer_ops_per_pixel(kind: &LayerKind) -> u64 {
    match *kind {
        LayerKind::Conv(c) => 2 * (c.kernel_h * c.kernel_w * c.in_ch * c.out_ch) as u64,
        LayerKind::CapsConv(c) => {
            2 * (c.kernel_h * c.kernel_w * c.in_ch * c.out_ch) as u64 + squash_ops(c.num_capsules, c.capsule_dim)
        }
        LayerKind::Routing(r) => routing_ops_per_pixel(&r),
        LayerKind::Fc(f) => 2 * (f.in_features * f.out_features) as u64,
    }
}

pub fn count_flops(cfg: &CapsConfig, grid: &PixelGrid) -> Result<u64> {
    cfg.validate()?;
    grid.validate()?;
    let px = grid.num_pixels() as u64;
    Ok(cfg.layers().iter().map(|l| px * layer_ops_per_pixel(&l.kind)).sum())
}
