//! INI pipeline configuration. Every section and key is optional; unknown
//! sections and keys are rejected. Lengths are metres, times seconds,
//! angles radians, frequencies hertz.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use capsbeam_core::accel::{AccelConfig, WeightPolicy};
use capsbeam_core::beamform::MvdrParams;
use capsbeam_core::capsnet::{CapsConfig, CapsConvSpec, ConvSpec, FcSpec, RoutingSpec};
use capsbeam_core::metrics::{RegionRole, RegionSpec};
use capsbeam_core::phantom::{Cyst, Phantom, Pulse, Scatterer, SpeckleBox};
use capsbeam_core::pruning::PruneMethod;
use capsbeam_core::quant::ReluBiasOrder;
use capsbeam_core::{PixelGrid, ProbeGeometry};
use ini::Ini;

const KEYS: &[(&str, &[&str])] = &[
    (
        "probe",
        &[
            "num_elements",
            "pitch_m",
            "speed_of_sound_mps",
            "sample_rate_hz",
            "transmit_angle_rad",
            "transmit_angles_rad",
            "num_time_samples",
            "center_frequency_hz",
            "pulse_sigma_cycles",
        ],
    ),
    ("grid", &["num_rows", "num_cols", "row_spacing_m", "col_spacing_m", "depth_origin_m", "dynamic_range_db"]),
    ("phantom", &["scatterers", "cysts", "background_density", "speckle_box", "rng_seed", "noise_std"]),
    ("capsnet", &["preset", "input_channels", "conv", "caps", "routing", "fc"]),
    ("mvdr", &["subarray_len", "temporal_half_window", "diagonal_loading"]),
    ("prune", &["method", "ratio", "r"]),
    ("quant", &["mode", "relu_bias_order"]),
    (
        "accel",
        &["pe_rows", "pe_cols", "clock_hz", "dma_count", "dma_beat_bytes", "word_bits", "bram_budget_bytes", "policy"],
    ),
    // region keys are free-form ids
    ("regions", &[]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Float,
    Fixed,
}

impl FromStr for QuantMode {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Self::Float),
            "fixed" => Ok(Self::Fixed),
            _ => bail!("quant mode `{s}` is not one of float, fixed"),
        }
    }
}

pub fn parse_order(s: &str) -> Result<ReluBiasOrder> {
    match s {
        "bias_then_relu" => Ok(ReluBiasOrder::BiasThenRelu),
        "relu_then_bias" => Ok(ReluBiasOrder::ReluThenBias),
        _ => bail!("epilogue order `{s}` is not one of bias_then_relu, relu_then_bias"),
    }
}

/// A named image region: an area for contrast metrics or a point target
/// for resolution.
#[derive(Debug, Clone, PartialEq)]
pub enum Region {
    Area(RegionSpec),
    Point { name: String, x_m: f64, z_m: f64, window_m: f64 },
}

impl Region {
    pub fn name(&self) -> &str {
        match self {
            Region::Area(r) => &r.name,
            Region::Point { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneSettings {
    pub method: PruneMethod,
    pub ratio: f64,
    pub r: usize,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub probe: ProbeGeometry,
    pub transmit_angles_rad: Vec<f64>,
    pub num_time_samples: Option<usize>,
    pub pulse: Pulse,
    pub grid: PixelGrid,
    pub dynamic_range_db: f64,
    pub phantom: Phantom,
    pub noise_std: f64,
    pub capsnet: CapsConfig,
    pub mvdr: MvdrParams,
    pub prune: PruneSettings,
    pub quant_mode: QuantMode,
    pub order: ReluBiasOrder,
    pub accel: AccelConfig,
    pub policy: WeightPolicy,
    pub regions: Vec<Region>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            probe: ProbeGeometry::default(),
            transmit_angles_rad: vec![0.0],
            num_time_samples: None,
            pulse: Pulse::default(),
            grid: PixelGrid::default(),
            dynamic_range_db: 60.0,
            phantom: Phantom::default(),
            noise_std: 0.0,
            capsnet: CapsConfig::default_capsbeam(),
            mvdr: MvdrParams::default(),
            prune: PruneSettings { method: PruneMethod::LakpMl, ratio: 0.85, r: 2 },
            quant_mode: QuantMode::Float,
            order: ReluBiasOrder::BiasThenRelu,
            accel: AccelConfig::default(),
            policy: WeightPolicy::ReloadPerBlock,
            regions: Vec::new(),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.trim().parse().map_err(|e| anyhow!("`{key} = {v}`: {e}"))
}

/// `a, b, c` fields.
fn fields(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',').map(|f| num(key, f)).collect()
}

/// `a, b; c, d` records of exactly `n` numeric fields each.
fn records(key: &str, v: &str, n: usize) -> Result<Vec<Vec<f64>>> {
    v.split(';')
        .filter(|r| !r.trim().is_empty())
        .map(|r| {
            let f = fields(key, r)?;
            if f.len() != n {
                bail!("`{key}`: record `{}` needs {n} fields", r.trim());
            }
            Ok(f)
        })
        .collect()
}

fn count(key: &str, x: f64) -> Result<usize> {
    if x < 0.0 || x.fract() != 0.0 {
        bail!("`{key}`: {x} is not a whole count");
    }
    Ok(x as usize)
}

fn flag(key: &str, x: f64) -> Result<bool> {
    match x {
        0.0 => Ok(false),
        1.0 => Ok(true),
        _ => bail!("`{key}`: relu flag must be 0 or 1"),
    }
}

fn parse_region(name: &str, v: &str) -> Result<Region> {
    let parts: Vec<&str> = v.split(',').map(str::trim).collect();
    let nums =
        |range: std::ops::Range<usize>| -> Result<Vec<f64>> { parts[range].iter().map(|p| num(name, p)).collect() };
    let role = |s: &str| match s {
        "target_in" => Ok(RegionRole::TargetIn),
        "background_out" => Ok(RegionRole::BackgroundOut),
        _ => bail!("region `{name}`: role `{s}` is not one of target_in, background_out"),
    };
    match (parts.first().copied(), parts.len()) {
        (Some("circle"), 5) => {
            let n = nums(1..4)?;
            Ok(Region::Area(RegionSpec::circle(name, n[0], n[1], n[2], role(parts[4])?)))
        }
        (Some("rectangle"), 6) => {
            let n = nums(1..5)?;
            Ok(Region::Area(RegionSpec::rectangle(name, (n[0], n[1]), (n[2], n[3]), role(parts[5])?)))
        }
        (Some("point"), 4) => {
            let n = nums(1..4)?;
            Ok(Region::Point { name: name.to_string(), x_m: n[0], z_m: n[1], window_m: n[2] })
        }
        _ => bail!(
            "region `{name} = {v}`: expected `circle, x, z, radius, role`, `rectangle, x0, x1, z0, z1, role` or `point, x, z, window`"
        ),
    }
}

fn parse_capsnet(cfg: &mut CapsConfig, key: &str, v: &str, preset_channels: &mut Option<usize>) -> Result<()> {
    match key {
        "preset" => match v {
            "default" => *cfg = CapsConfig::default_capsbeam(),
            "toy" => *cfg = CapsConfig::toy(preset_channels.unwrap_or(128)),
            _ => bail!("capsnet preset `{v}` is not one of default, toy"),
        },
        "input_channels" => *preset_channels = Some(num(key, v)?),
        "conv" => {
            cfg.conv_layers = records(key, v, 5)?
                .into_iter()
                .map(|f| {
                    Ok(ConvSpec {
                        kernel_h: count(key, f[0])?,
                        kernel_w: count(key, f[1])?,
                        in_ch: count(key, f[2])?,
                        out_ch: count(key, f[3])?,
                        relu: flag(key, f[4])?,
                    })
                })
                .collect::<Result<_>>()?
        }
        "caps" => {
            cfg.caps_conv_layers = records(key, v, 6)?
                .into_iter()
                .map(|f| {
                    Ok(CapsConvSpec {
                        kernel_h: count(key, f[0])?,
                        kernel_w: count(key, f[1])?,
                        in_ch: count(key, f[2])?,
                        out_ch: count(key, f[3])?,
                        num_capsules: count(key, f[4])?,
                        capsule_dim: count(key, f[5])?,
                    })
                })
                .collect::<Result<_>>()?
        }
        "routing" => {
            cfg.routing = match v.trim() {
                "none" => None,
                _ => {
                    let f = fields(key, v)?;
                    if f.len() != 5 {
                        bail!("`routing` needs n_in, in_dim, n_out, out_dim, iterations");
                    }
                    Some(RoutingSpec {
                        num_in_capsules: count(key, f[0])?,
                        in_dim: count(key, f[1])?,
                        num_out_capsules: count(key, f[2])?,
                        out_dim: count(key, f[3])?,
                        num_iterations: count(key, f[4])?,
                    })
                }
            }
        }
        "fc" => {
            cfg.fc_layers = records(key, v, 3)?
                .into_iter()
                .map(|f| {
                    Ok(FcSpec {
                        in_features: count(key, f[0])?,
                        out_features: count(key, f[1])?,
                        relu: flag(key, f[2])?,
                    })
                })
                .collect::<Result<_>>()?
        }
        _ => unreachable!("key checked against the schema"),
    }
    Ok(())
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| anyhow!("config syntax: {e}"))?;
        let mut c = Self::default();
        let mut seen = BTreeSet::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    bail!("key `{k}` appears before any [section]");
                }
                continue;
            };
            let Some((_, allowed)) = KEYS.iter().find(|(s, _)| *s == section) else {
                let known: Vec<&str> = KEYS.iter().map(|(s, _)| *s).collect();
                bail!("unknown section [{section}]; known sections: {}", known.join(", "));
            };
            if !seen.insert(section.to_string()) {
                bail!("section [{section}] appears twice");
            }
            if section == "capsnet" {
                // preset first, so layer keys override it
                let mut channels = props.get("input_channels").map(|v| num("input_channels", v)).transpose()?;
                if let Some(p) = props.get("preset") {
                    parse_capsnet(&mut c.capsnet, "preset", p, &mut channels)?;
                }
                for (k, v) in props.iter() {
                    if !allowed.contains(&k) {
                        bail!("unknown key `{k}` in [capsnet]; allowed: {}", allowed.join(", "));
                    }
                    if k != "preset" && k != "input_channels" {
                        parse_capsnet(&mut c.capsnet, k, v, &mut channels)?;
                    }
                }
                continue;
            }
            for (k, v) in props.iter() {
                if section == "regions" {
                    if c.regions.iter().any(|r| r.name() == k) {
                        bail!("region `{k}` defined twice");
                    }
                    c.regions.push(parse_region(k, v)?);
                    continue;
                }
                if !allowed.contains(&k) {
                    bail!("unknown key `{k}` in [{section}]; allowed: {}", allowed.join(", "));
                }
                c.set(section, k, v)?;
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, section: &str, k: &str, v: &str) -> Result<()> {
        match (section, k) {
            ("probe", "num_elements") => self.probe.num_elements = num(k, v)?,
            ("probe", "pitch_m") => self.probe.pitch_m = num(k, v)?,
            ("probe", "speed_of_sound_mps") => self.probe.speed_of_sound_mps = num(k, v)?,
            ("probe", "sample_rate_hz") => self.probe.sample_rate_hz = num(k, v)?,
            ("probe", "transmit_angle_rad") => {
                self.probe.transmit_angle_rad = num(k, v)?;
                self.transmit_angles_rad = vec![self.probe.transmit_angle_rad];
            }
            ("probe", "transmit_angles_rad") => self.transmit_angles_rad = fields(k, v)?,
            ("probe", "num_time_samples") => self.num_time_samples = Some(num(k, v)?),
            ("probe", "center_frequency_hz") => self.pulse.center_frequency_hz = num(k, v)?,
            ("probe", "pulse_sigma_cycles") => self.pulse.sigma_cycles = num(k, v)?,
            ("grid", "num_rows") => self.grid.num_rows = num(k, v)?,
            ("grid", "num_cols") => self.grid.num_cols = num(k, v)?,
            ("grid", "row_spacing_m") => self.grid.row_spacing_m = num(k, v)?,
            ("grid", "col_spacing_m") => self.grid.col_spacing_m = num(k, v)?,
            ("grid", "depth_origin_m") => self.grid.depth_origin_m = num(k, v)?,
            ("grid", "dynamic_range_db") => self.dynamic_range_db = num(k, v)?,
            ("phantom", "scatterers") => {
                self.phantom.scatterers =
                    records(k, v, 3)?.into_iter().map(|f| Scatterer { x_m: f[0], z_m: f[1], amplitude: f[2] }).collect()
            }
            ("phantom", "cysts") => {
                self.phantom.cyst_regions = records(k, v, 4)?
                    .into_iter()
                    .map(|f| Cyst { center_x_m: f[0], center_z_m: f[1], radius_m: f[2], echogenicity: f[3] })
                    .collect()
            }
            ("phantom", "background_density") => self.phantom.background_density = num(k, v)?,
            ("phantom", "speckle_box") => {
                let f = fields(k, v)?;
                if f.len() != 4 {
                    bail!("`speckle_box` needs x_min, x_max, z_min, z_max");
                }
                self.phantom.speckle_box =
                    Some(SpeckleBox { x_min_m: f[0], x_max_m: f[1], z_min_m: f[2], z_max_m: f[3] });
            }
            ("phantom", "rng_seed") => self.phantom.rng_seed = num(k, v)?,
            ("phantom", "noise_std") => self.noise_std = num(k, v)?,
            ("mvdr", "subarray_len") => self.mvdr.subarray_len = num(k, v)?,
            ("mvdr", "temporal_half_window") => self.mvdr.temporal_half_window = num(k, v)?,
            ("mvdr", "diagonal_loading") => self.mvdr.diagonal_loading = num(k, v)?,
            ("prune", "method") => self.prune.method = v.parse()?,
            ("prune", "ratio") => self.prune.ratio = num(k, v)?,
            ("prune", "r") => self.prune.r = num(k, v)?,
            ("quant", "mode") => self.quant_mode = v.parse()?,
            ("quant", "relu_bias_order") => self.order = parse_order(v)?,
            ("accel", "pe_rows") => self.accel.pe_rows = num(k, v)?,
            ("accel", "pe_cols") => self.accel.pe_cols = num(k, v)?,
            ("accel", "clock_hz") => self.accel.clock_hz = num(k, v)?,
            ("accel", "dma_count") => self.accel.dma_count = num(k, v)?,
            ("accel", "dma_beat_bytes") => self.accel.dma_beat_bytes = num(k, v)?,
            ("accel", "word_bits") => self.accel.word_bits = num(k, v)?,
            ("accel", "bram_budget_bytes") => self.accel.bram_budget_bytes = num(k, v)?,
            ("accel", "policy") => self.policy = v.parse()?,
            _ => unreachable!("key checked against the schema"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.probe.validate()?;
        self.grid.validate()?;
        self.phantom.validate()?;
        self.capsnet.validate()?;
        self.accel.validate()?;
        if self.transmit_angles_rad.is_empty() {
            bail!("`transmit_angles_rad` is empty");
        }
        if !(self.dynamic_range_db > 0.0) {
            bail!("`dynamic_range_db` must be positive");
        }
        if !(0.0..1.0).contains(&self.prune.ratio) {
            bail!("prune ratio {} outside [0, 1)", self.prune.ratio);
        }
        if self.prune.r == 0 {
            bail!("prune neighbour depth r must be at least 1");
        }
        if !(self.noise_std >= 0.0) {
            bail!("`noise_std` must be non-negative");
        }
        Ok(())
    }

    pub fn probe_at(&self, angle_rad: f64) -> ProbeGeometry {
        self.probe.with_angle(angle_rad)
    }

    /// Configured sample count, or enough samples for the latest echo of
    /// any pixel or phantom scatterer on any element plus the pulse tail.
    pub fn time_samples(&self) -> usize {
        if let Some(n) = self.num_time_samples {
            return n;
        }
        let elements = self.probe.element_x();
        // Far corners of everything that can echo.
        let z = self.grid.max_depth_m();
        let mut pts = vec![(self.grid.x(0), z), (self.grid.x(self.grid.num_cols - 1), z)];
        pts.extend(self.phantom.scatterers.iter().map(|s| (s.x_m, s.z_m)));
        for c in &self.phantom.cyst_regions {
            let z = c.center_z_m + c.radius_m;
            pts.extend([(c.center_x_m - c.radius_m, z), (c.center_x_m + c.radius_m, z)]);
        }
        if let Some(b) = &self.phantom.speckle_box {
            pts.extend([(b.x_min_m, b.z_max_m), (b.x_max_m, b.z_max_m)]);
        }
        let mut t_max: f64 = 0.0;
        for &angle in &self.transmit_angles_rad {
            let geom = self.probe_at(angle);
            for &(x, z) in &pts {
                for &e in [elements[0], elements[elements.len() - 1]].iter() {
                    t_max = t_max.max(geom.delay_s(x, z, e));
                }
            }
        }
        ((t_max + self.pulse.support_s()) * self.probe.sample_rate_hz).ceil() as usize + 16
    }

    pub fn areas(&self) -> Vec<&RegionSpec> {
        self.regions
            .iter()
            .filter_map(|r| match r {
                Region::Area(a) => Some(a),
                Region::Point { .. } => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = PipelineConfig::parse("").unwrap();
        assert_eq!(c.grid, PixelGrid::default());
        assert_eq!(c.capsnet, CapsConfig::default_capsbeam());
        assert_eq!(c.transmit_angles_rad, vec![0.0]);
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let e = PipelineConfig::parse("[grid]\nnum_rowz = 3\n").unwrap_err();
        assert!(e.to_string().contains("num_rowz"), "{e}");
        let e = PipelineConfig::parse("[gird]\nnum_rows = 3\n").unwrap_err();
        assert!(e.to_string().contains("[gird]"), "{e}");
        assert!(PipelineConfig::parse("[capsnet]\nlayers = 3\n").is_err());
        assert!(PipelineConfig::parse("stray = 1\n").is_err());
    }

    #[test]
    fn values_parse_in_si_units() {
        let c = PipelineConfig::parse(
            "[probe]\ntransmit_angles_rad = -0.015, 0, 0.015\n[grid]\nnum_rows = 40\ndepth_origin_m = 12e-3\n\
             [phantom]\nscatterers = 0, 15e-3, 1; 1e-3, 16e-3, 0.5\ncysts = 0, 15e-3, 2e-3, 0\n\
             [prune]\nmethod = lakp\nratio = 0.5\n[quant]\nmode = fixed\n[accel]\npolicy = weights_resident\n",
        )
        .unwrap();
        assert_eq!(c.transmit_angles_rad, vec![-0.015, 0.0, 0.015]);
        assert_eq!(c.grid.num_rows, 40);
        assert_eq!(c.grid.depth_origin_m, 12e-3);
        assert_eq!(c.phantom.scatterers.len(), 2);
        assert_eq!(c.phantom.cyst_regions[0].radius_m, 2e-3);
        assert_eq!(c.prune.method, PruneMethod::Lakp);
        assert_eq!(c.quant_mode, QuantMode::Fixed);
        assert_eq!(c.policy, WeightPolicy::WeightsResident);
    }

    #[test]
    fn capsnet_layers_override_preset() {
        let c = PipelineConfig::parse("[capsnet]\npreset = toy\ninput_channels = 4\nfc = 8, 4, 1; 4, 2, 0\n").unwrap();
        let toy = CapsConfig::toy(4);
        assert_eq!(c.capsnet.conv_layers, toy.conv_layers);
        assert_eq!(c.capsnet.fc_layers.len(), 2);
        assert!(PipelineConfig::parse("[capsnet]\nconv = 1, 1, 128, 64, 2\n").is_err());
    }

    #[test]
    fn regions_parse() {
        let c = PipelineConfig::parse(
            "[regions]\ncyst = circle, 0, 15e-3, 1.5e-3, target_in\nbg = rectangle, -4e-3, -2e-3, 13e-3, 17e-3, background_out\n\
             pt = point, 0, 15e-3, 1e-3\n",
        )
        .unwrap();
        assert_eq!(c.regions.len(), 3);
        assert_eq!(c.areas().len(), 2);
        assert!(matches!(c.regions[2], Region::Point { window_m, .. } if window_m == 1e-3));
        assert!(PipelineConfig::parse("[regions]\nx = circle, 0, 1, 2, inside\n").is_err());
        assert!(PipelineConfig::parse("[regions]\nx = blob, 0\n").is_err());
    }

    #[test]
    fn auto_time_samples_cover_the_grid() {
        let c = PipelineConfig::default();
        let n = c.time_samples();
        let far = c.probe.delay_s(c.grid.x(0), c.grid.max_depth_m(), *c.probe.element_x().last().unwrap());
        assert!(n as f64 > far * c.probe.sample_rate_hz);
    }

    #[test]
    fn auto_time_samples_cover_speckle_outside_the_grid() {
        let c = PipelineConfig::parse(
            "[grid]\nnum_rows = 16\n[phantom]\nspeckle_box = -8e-3, 8e-3, 5e-3, 30e-3\nbackground_density = 1\n",
        )
        .unwrap();
        let far = c.probe.delay_s(-8e-3, 30e-3, *c.probe.element_x().last().unwrap());
        assert!(c.time_samples() as f64 > far * c.probe.sample_rate_hz);
    }
}
