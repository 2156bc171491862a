//! Functional and cycle-approximate model of the FPGA dataflow.
//!
//! Convolutions stream one input row at a time through a `kh`-row line
//! buffer; a `pe_rows x pe_cols` array produces `pe_rows` filters for
//! `pe_cols` output columns per cycle. Routing runs pixel by pixel. Two DMA
//! channels move weights and activations; stalls are charged when a layer's
//! transfers outlast its compute.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::capsnet::{layer_ops_per_pixel, routing_ops_per_pixel, squash_ops, CapsConfig, LayerKind, RoutingSpec};
use crate::error::{Error, Result};
use crate::geometry::PixelGrid;
use crate::geometry::{EnvelopeImage, RfVolume};
use crate::pruning::per_filter_quota;
use crate::quant::{
    dequantize, fixed_softmax, fixed_squash, qsquash_capsules, round_shift, sat16, QConv, QStage, QuantizedNet,
    ReluBiasOrder, ROUTING_FRAC,
};

/// Fixed pipeline latencies (cycles) of the routing engine stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingCosts {
    /// Taylor exponential (5 mul + 5 add) plus divide pipeline.
    pub softmax_latency: u64,
    /// Lane groups per softmax pass: one exponential pass and one divide pass.
    pub softmax_passes: u64,
    pub matvec_latency: u64,
    /// Square root and divide pipeline.
    pub squash_latency: u64,
    pub agreement_latency: u64,
}

impl Default for RoutingCosts {
    fn default() -> Self {
        Self { softmax_latency: 10, softmax_passes: 2, matvec_latency: 2, squash_latency: 12, agreement_latency: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccelConfig {
    pub pe_rows: usize,
    pub pe_cols: usize,
    pub clock_hz: f64,
    pub dma_count: usize,
    pub dma_beat_bytes: usize,
    pub word_bits: usize,
    pub bram_budget_bytes: u64,
    pub routing: RoutingCosts,
}

impl Default for AccelConfig {
    fn default() -> Self {
        Self {
            pe_rows: 4,
            pe_cols: 128,
            clock_hz: 1e8,
            dma_count: 2,
            dma_beat_bytes: 8,
            word_bits: 16,
            // 702 BRAM36 blocks of 2 KiB
            bram_budget_bytes: 1_437_696,
            routing: RoutingCosts::default(),
        }
    }
}

impl AccelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pe_rows == 0 || self.pe_cols == 0 || self.dma_count == 0 || self.dma_beat_bytes == 0 {
            return Err(Error::InvalidConfig("accelerator dimensions must be >= 1".into()));
        }
        if self.word_bits != 16 {
            return Err(Error::InvalidConfig(format!("word_bits must be 16, got {}", self.word_bits)));
        }
        if !(self.clock_hz > 0.0) {
            return Err(Error::InvalidConfig("clock_hz must be positive".into()));
        }
        Ok(())
    }

    pub fn word_bytes(&self) -> u64 {
        (self.word_bits / 8) as u64
    }

    pub fn words_per_beat(&self) -> u64 {
        ((self.dma_beat_bytes * 8 / self.word_bits) as u64).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WeightPolicy {
    /// Each row block reloads the layer's weights.
    #[default]
    ReloadPerBlock,
    /// Weights are loaded once and stay in BRAM.
    WeightsResident,
}

impl std::str::FromStr for WeightPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reload_per_block" => Ok(Self::ReloadPerBlock),
            "weights_resident" => Ok(Self::WeightsResident),
            other => Err(Error::InvalidConfig(format!("unknown weight policy `{other}`"))),
        }
    }
}

impl std::fmt::Display for WeightPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::ReloadPerBlock => "reload_per_block",
            Self::WeightsResident => "weights_resident",
        })
    }
}

/// Shape of one streamed convolution, after compaction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayerDesc {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    /// Widest kept-channel list (`cin` when unpruned).
    pub kmax: usize,
    /// Filters streamed out (`cout` when unpruned).
    pub kept_filters: usize,
    /// Kernels actually multiplied (`cin * cout` when unpruned).
    pub kept_kernels: usize,
    /// Extra per-pixel operations after the conv (capsule squash).
    pub extra_ops_per_pixel: u64,
}

impl ConvLayerDesc {
    pub fn dense(name: impl Into<String>, grid: &PixelGrid, kh: usize, kw: usize, cin: usize, cout: usize) -> Self {
        Self {
            name: name.into(),
            rows: grid.num_rows,
            cols: grid.num_cols,
            kh,
            kw,
            cin,
            cout,
            kmax: cin,
            kept_filters: cout,
            kept_kernels: cin * cout,
            extra_ops_per_pixel: 0,
        }
    }

    pub fn from_qconv(layer: &QConv, rows: usize, cols: usize) -> Self {
        let kept_kernels = layer.index.iter().filter(|&&q| q >= 0).count();
        Self {
            name: layer.name.clone(),
            rows,
            cols,
            kh: layer.kh,
            kw: layer.kw,
            cin: layer.cin,
            cout: layer.cout,
            kmax: layer.kmax,
            kept_filters: layer.num_filters(),
            kept_kernels,
            extra_ops_per_pixel: 0,
        }
    }

    /// Same layer with `floor(ratio * cin)` kernels pruned from every filter.
    pub fn with_quota(mut self, ratio: f64) -> Self {
        self.kmax = self.cin - per_filter_quota(ratio, self.cin);
        self.kept_kernels = self.kmax * self.kept_filters;
        self
    }

    /// Words of the compacted weight tensor.
    pub fn weight_words(&self) -> u64 {
        (self.kh * self.kw * self.kmax * self.kept_filters) as u64
    }

    pub fn input_words(&self) -> u64 {
        (self.rows * self.cols * self.cin) as u64
    }

    pub fn output_words(&self) -> u64 {
        (self.rows * self.cols * self.kept_filters) as u64
    }

    pub fn ops(&self) -> u64 {
        let px = (self.rows * self.cols) as u64;
        px * (2 * (self.kh * self.kw * self.kept_kernels) as u64 + self.extra_ops_per_pixel)
    }
}

/// External weight plus input words moved for one layer under `policy`.
pub fn count_transactions(desc: &ConvLayerDesc, policy: WeightPolicy) -> u64 {
    let weights = match policy {
        WeightPolicy::ReloadPerBlock => desc.rows as u64 * desc.weight_words(),
        WeightPolicy::WeightsResident => desc.weight_words(),
    };
    weights + desc.input_words()
}

fn div_ceil(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    pub name: String,
    pub weight_words: u64,
    pub input_words: u64,
    pub output_words: u64,
    /// Weight and input words read from external memory.
    pub external_word_transactions: u64,
    pub compute_cycles: u64,
    pub stall_cycles: u64,
    pub bram_bytes: u64,
    pub ops: u64,
}

impl LayerReport {
    pub fn cycles(&self) -> u64 {
        self.compute_cycles + self.stall_cycles
    }
}

fn transfer_cycles(accel: &AccelConfig, weight_words: u64, act_words: u64) -> u64 {
    let wpb = accel.words_per_beat();
    if accel.dma_count >= 2 {
        div_ceil(weight_words, wpb).max(div_ceil(act_words, wpb))
    } else {
        div_ceil(weight_words + act_words, wpb)
    }
}

pub fn conv_compute_cycles(desc: &ConvLayerDesc, accel: &AccelConfig) -> u64 {
    desc.rows as u64
        * div_ceil(desc.kept_filters as u64, accel.pe_rows as u64)
        * div_ceil(desc.cols as u64, accel.pe_cols as u64)
        * (desc.kh * desc.kw * desc.kmax) as u64
}

/// Cycle, transfer and BRAM model of one convolution.
pub fn conv_layer_report(desc: &ConvLayerDesc, accel: &AccelConfig, policy: WeightPolicy) -> Result<LayerReport> {
    accel.validate()?;
    let wb = accel.word_bytes();
    let resident_weights = match policy {
        WeightPolicy::WeightsResident => desc.weight_words(),
        WeightPolicy::ReloadPerBlock => (desc.kh * desc.kw * desc.kmax * accel.pe_rows.min(desc.kept_filters)) as u64,
    };
    let line_buffer = (desc.kh * desc.cols * desc.cin) as u64;
    let out_row = (desc.cols * desc.kept_filters) as u64;
    let bram_bytes = (resident_weights + line_buffer + out_row) * wb;
    if bram_bytes > accel.bram_budget_bytes {
        return Err(Error::BramOverflow { needed: bram_bytes, budget: accel.bram_budget_bytes });
    }
    let external = count_transactions(desc, policy);
    let weight_words = external - desc.input_words();
    let compute = conv_compute_cycles(desc, accel);
    let transfer = transfer_cycles(accel, weight_words, desc.input_words() + desc.output_words());
    Ok(LayerReport {
        name: desc.name.clone(),
        weight_words,
        input_words: desc.input_words(),
        output_words: desc.output_words(),
        external_word_transactions: external,
        compute_cycles: compute,
        stall_cycles: transfer.saturating_sub(compute),
        bram_bytes,
        ops: desc.ops(),
    })
}

/// Routing engine cycles for one pixel.
pub fn routing_cycles_per_pixel(r: &RoutingSpec, accel: &AccelConfig) -> u64 {
    let lanes = accel.pe_cols as u64;
    let c = &accel.routing;
    let pairs = (r.num_in_capsules * r.num_out_capsules) as u64;
    let d = r.out_dim as u64;
    let softmax = c.softmax_latency + c.softmax_passes * div_ceil(pairs, lanes);
    let matvec = c.matvec_latency + div_ceil(pairs * d, lanes);
    let squash = c.squash_latency + div_ceil(r.num_out_capsules as u64 * d, lanes);
    let agreement = c.agreement_latency + div_ceil(pairs * d, lanes);
    let it = r.num_iterations as u64;
    it * (softmax + matvec + squash) + it.saturating_sub(1) * agreement
}

pub fn routing_layer_report(name: &str, r: &RoutingSpec, pixels: usize, accel: &AccelConfig) -> Result<LayerReport> {
    accel.validate()?;
    let px = pixels as u64;
    let input_words = px * (r.num_in_capsules * r.in_dim) as u64;
    let output_words = px * (r.num_out_capsules * r.out_dim) as u64;
    let compute = px * routing_cycles_per_pixel(r, accel);
    let transfer = transfer_cycles(accel, 0, input_words + output_words);
    let block = (r.num_in_capsules * r.in_dim * (1 + r.num_out_capsules)
        + r.num_in_capsules * r.num_out_capsules * 2
        + r.num_out_capsules * r.out_dim) as u64;
    Ok(LayerReport {
        name: name.to_string(),
        weight_words: 0,
        input_words,
        output_words,
        external_word_transactions: input_words,
        compute_cycles: compute,
        stall_cycles: transfer.saturating_sub(compute),
        bram_bytes: block * accel.word_bytes(),
        ops: px * routing_ops_per_pixel(r),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimReport {
    pub clock_hz: f64,
    pub policy: WeightPolicy,
    pub layers: Vec<LayerReport>,
    pub external_word_transactions: u64,
    pub output_words: u64,
    pub cycle_count: u64,
    pub bram_bytes_peak: u64,
    pub total_ops: u64,
    pub modeled_latency_s: f64,
    pub modeled_gops: f64,
}

impl SimReport {
    pub fn from_layers(layers: Vec<LayerReport>, accel: &AccelConfig, policy: WeightPolicy) -> Self {
        let cycle_count: u64 = layers.iter().map(LayerReport::cycles).sum();
        let total_ops: u64 = layers.iter().map(|l| l.ops).sum();
        let latency = cycle_count as f64 / accel.clock_hz;
        let gops = if cycle_count == 0 { 0.0 } else { total_ops as f64 / latency / 1e9 };
        Self {
            clock_hz: accel.clock_hz,
            policy,
            external_word_transactions: layers.iter().map(|l| l.external_word_transactions).sum(),
            output_words: layers.iter().map(|l| l.output_words).sum(),
            cycle_count,
            bram_bytes_peak: layers.iter().map(|l| l.bram_bytes).max().unwrap_or(0),
            total_ops,
            modeled_latency_s: latency,
            modeled_gops: gops,
            layers,
        }
    }

    /// Whole-run totals as `(field, value)` pairs.
    pub fn summary(&self) -> Vec<(&'static str, String)> {
        vec![
            ("policy", self.policy.to_string()),
            ("external_word_transactions", self.external_word_transactions.to_string()),
            ("output_words", self.output_words.to_string()),
            ("cycle_count", self.cycle_count.to_string()),
            ("bram_bytes_peak", self.bram_bytes_peak.to_string()),
            ("total_ops", self.total_ops.to_string()),
            ("modeled_latency_s", format!("{:.9}", self.modeled_latency_s)),
            ("modeled_gops", format!("{:.6}", self.modeled_gops)),
        ]
    }

    /// Human-readable report: cost-model header, then `key=value` lines.
    pub fn to_text(&self, accel: &AccelConfig) -> String {
        let c = &accel.routing;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# accelerator model: {}x{} PE array at {} Hz, {} DMA x {} B beats, {} B BRAM",
            accel.pe_rows,
            accel.pe_cols,
            accel.clock_hz,
            accel.dma_count,
            accel.dma_beat_bytes,
            accel.bram_budget_bytes
        );
        let _ = writeln!(s, "# conv cycles = rows * ceil(filters/pe_rows) * ceil(cols/pe_cols) * kh * kw * kmax");
        let _ = writeln!(s, "# stall cycles = max(0, dma transfer beats - compute cycles)");
        let _ = writeln!(
            s,
            "# routing cycles/pixel = it*(softmax + matvec + squash) + (it-1)*agreement; softmax = {} + {}*ceil(pairs/pe_cols), matvec = {} + ceil(pairs*dim/pe_cols), squash = {} + ceil(n_out*dim/pe_cols), agreement = {} + ceil(pairs*dim/pe_cols)",
            c.softmax_latency, c.softmax_passes, c.matvec_latency, c.squash_latency, c.agreement_latency
        );
        for (k, v) in self.summary() {
            let _ = writeln!(s, "{k}={v}");
        }
        for l in &self.layers {
            let _ = writeln!(
                s,
                "layer {}: transactions={} weight_words={} input_words={} output_words={} compute_cycles={} stall_cycles={} bram_bytes={} ops={}",
                l.name, l.external_word_transactions, l.weight_words, l.input_words, l.output_words,
                l.compute_cycles, l.stall_cycles, l.bram_bytes, l.ops
            );
        }
        s
    }
}

/// Functional options of [`sim_conv_layer`].
#[derive(Debug, Clone, Default)]
pub struct ConvSimOptions {
    pub policy: WeightPolicy,
    pub order: ReluBiasOrder,
    /// Output rows to compute; all rows when `None`. Skipped rows stay zero
    /// but every row still streams through the line buffer.
    pub rows: Option<Vec<usize>>,
}

/// Streams a `[rows][cols][cin]` fixed16 input through the line buffer and
/// PE array. Output is `[rows][cols][cout]`; removed filters stay zero.
pub fn sim_conv_layer(
    input: &[i16],
    rows: usize,
    cols: usize,
    layer: &QConv,
    accel: &AccelConfig,
    opts: &ConvSimOptions,
) -> Result<(Vec<i16>, SimReport)> {
    accel.validate()?;
    let cin = layer.cin;
    if input.len() != rows * cols * cin || rows == 0 || cols == 0 {
        return Err(Error::ShapeMismatch(format!(
            "{}: stream has {} words, expected {rows}x{cols}x{cin}",
            layer.name,
            input.len()
        )));
    }
    let desc = ConvLayerDesc::from_qconv(layer, rows, cols);
    let report = conv_layer_report(&desc, accel, opts.policy)?;

    let mut wanted = vec![opts.rows.is_none(); rows];
    for &r in opts.rows.iter().flatten() {
        if r >= rows {
            return Err(Error::IndexOutOfRange(format!("output row {r} of {rows}")));
        }
        wanted[r] = true;
    }
    let (kh, kw) = (layer.kh, layer.kw);
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let row_words = cols * cin;
    let stream_row = |r: usize| -> Vec<i16> { input[r * row_words..(r + 1) * row_words].to_vec() };
    // Top rows of the buffer start as zero padding, the rest are streamed in.
    let mut line: Vec<Vec<i16>> = (0..kh)
        .map(|k| match k.checked_sub(ph).filter(|&r| r < rows) {
            Some(r) => stream_row(r),
            None => vec![0; row_words],
        })
        .collect();
    let nf = layer.num_filters();
    // weight buffer contents, one entry per PE lane
    let taps = layer.filter_taps();
    let mut out = vec![0i16; rows * cols * layer.cout];
    for r in 0..rows {
        if wanted[r] {
            let out_row = &mut out[r * cols * layer.cout..(r + 1) * cols * layer.cout];
            for group in (0..nf).step_by(accel.pe_rows) {
                let lanes = group..(group + accel.pe_rows).min(nf);
                // (num_cols, pe_rows) partial sums
                let mut partial = vec![0i64; cols * lanes.len()];
                for c0 in (0..cols).step_by(accel.pe_cols) {
                    for c in c0..(c0 + accel.pe_cols).min(cols) {
                        for (lane, f) in lanes.clone().enumerate() {
                            let mut acc = 0i64;
                            for (ky, buf) in line.iter().enumerate() {
                                for kx in 0..kw {
                                    let Some(ic) = (c + kx).checked_sub(pw).filter(|&v| v < cols) else { continue };
                                    acc += taps[f].dot(ky * kw + kx, &buf[ic * cin..(ic + 1) * cin]);
                                }
                            }
                            partial[c * lanes.len() + lane] = acc;
                        }
                    }
                }
                for c in 0..cols {
                    for (lane, f) in lanes.clone().enumerate() {
                        out_row[c * layer.cout + layer.filters[f]] =
                            layer.finish(partial[c * lanes.len() + lane], f, opts.order);
                    }
                }
            }
        }
        // Shift the buffer up one row and stream in the next (or zeros).
        line.rotate_left(1);
        let next = r + 1 + (kh - 1 - ph);
        line[kh - 1] = if next < rows { stream_row(next) } else { vec![0; row_words] };
    }
    Ok((out, SimReport::from_layers(vec![report], accel, opts.policy)))
}

/// Runs the routing engine over `pixels` blocks of `n_in` capsules at scale
/// `f_u`, producing `n_out` capsules per pixel at scale `f_v`.
pub fn sim_routing(
    input: &[i16],
    pixels: usize,
    r: &RoutingSpec,
    f_u: i32,
    f_v: i32,
    accel: &AccelConfig,
) -> Result<(Vec<i16>, SimReport)> {
    let (n_in, n_out, d) = (r.num_in_capsules, r.num_out_capsules, r.out_dim);
    if input.len() != pixels * n_in * r.in_dim || r.in_dim != d || r.num_iterations == 0 {
        return Err(Error::ShapeMismatch(format!(
            "routing stream has {} words, expected {pixels}x{n_in}x{d}",
            input.len()
        )));
    }
    let report = routing_layer_report("routing", r, pixels, accel)?;
    let mut out = Vec::with_capacity(pixels * n_out * d);
    for block in input.chunks(n_in * d) {
        // Initialize logits with zeros.
        let mut b = vec![0i16; n_in * n_out];
        let mut v = vec![0i16; n_out * d];
        for it in 0..r.num_iterations {
            let mut c = Vec::with_capacity(n_in * n_out);
            for i in 0..n_in {
                c.extend(fixed_softmax(&b[i * n_out..(i + 1) * n_out], ROUTING_FRAC));
            }
            for j in 0..n_out {
                let mut s = vec![0i64; d];
                for i in 0..n_in {
                    let u = &block[i * d..(i + 1) * d];
                    for (sk, &uk) in s.iter_mut().zip(u) {
                        *sk += c[i * n_out + j] as i64 * uk as i64;
                    }
                }
                let s: Vec<i16> = s.into_iter().map(|x| sat16(round_shift(x, ROUTING_FRAC))).collect();
                v[j * d..(j + 1) * d].copy_from_slice(&fixed_squash(&s, f_u, f_v)?);
            }
            if it + 1 < r.num_iterations {
                for i in 0..n_in {
                    let u = &block[i * d..(i + 1) * d];
                    for j in 0..n_out {
                        let dot: i64 = u.iter().zip(&v[j * d..(j + 1) * d]).map(|(&a, &b)| a as i64 * b as i64).sum();
                        let bij = &mut b[i * n_out + j];
                        *bij = sat16(*bij as i64 + round_shift(dot, f_u + f_v - ROUTING_FRAC));
                    }
                }
            }
        }
        // Stream out the output capsules.
        out.extend_from_slice(&v);
    }
    Ok((out, SimReport::from_layers(vec![report], accel, WeightPolicy::WeightsResident)))
}

/// Per-layer descriptions of every conv, capsule-conv and FC layer of a
/// config; FC layers run as 1x1 convolutions.
pub fn network_layers(cfg: &CapsConfig, grid: &PixelGrid) -> Result<Vec<(ConvLayerDesc, bool)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for layer in cfg.layers() {
        let (desc, prunable) = match layer.kind {
            LayerKind::Conv(c) => {
                (ConvLayerDesc::dense(&layer.name, grid, c.kernel_h, c.kernel_w, c.in_ch, c.out_ch), true)
            }
            LayerKind::CapsConv(c) => {
                let mut d = ConvLayerDesc::dense(&layer.name, grid, c.kernel_h, c.kernel_w, c.in_ch, c.out_ch);
                d.extra_ops_per_pixel = squash_ops(c.num_capsules, c.capsule_dim);
                (d, true)
            }
            LayerKind::Fc(f) => (ConvLayerDesc::dense(&layer.name, grid, 1, 1, f.in_features, f.out_features), false),
            LayerKind::Routing(_) => continue,
        };
        debug_assert_eq!(desc.ops(), grid.num_pixels() as u64 * layer_ops_per_pixel(&layer.kind));
        out.push((desc, prunable));
    }
    Ok(out)
}

/// Whole-network report. `overrides` replaces the dense description of a
/// layer by name (e.g. a compacted pruned layer).
pub fn network_report(
    cfg: &CapsConfig,
    grid: &PixelGrid,
    accel: &AccelConfig,
    policy: WeightPolicy,
    overrides: &BTreeMap<String, ConvLayerDesc>,
) -> Result<SimReport> {
    grid.validate()?;
    let mut layers = Vec::new();
    for layer in cfg.layers() {
        if let LayerKind::Routing(r) = layer.kind {
            layers.push(routing_layer_report(&layer.name, &r, grid.num_pixels(), accel)?);
            continue;
        }
        let Some((mut desc, _)) = network_layers(cfg, grid)?.into_iter().find(|(d, _)| d.name == layer.name) else {
            continue;
        };
        if let Some(o) = overrides.get(&layer.name) {
            let extra = desc.extra_ops_per_pixel;
            desc = o.clone();
            desc.extra_ops_per_pixel = extra;
        }
        layers.push(conv_layer_report(&desc, accel, policy)?);
    }
    Ok(SimReport::from_layers(layers, accel, policy))
}

/// Runs a quantized network end to end through the simulated dataflow.
/// Capsule squashing happens in the conv epilogue, as in the quantized path.
pub fn sim_network(
    net: &QuantizedNet,
    rf: &RfVolume,
    accel: &AccelConfig,
    policy: WeightPolicy,
    order: ReluBiasOrder,
) -> Result<(EnvelopeImage, SimReport)> {
    let (rows, cols) = (rf.grid.num_rows, rf.grid.num_cols);
    let opts = ConvSimOptions { policy, order, rows: None };
    let mut x = net.quantize_input(rf)?;
    let mut f_last = net.f_input;
    let mut layers = Vec::new();
    for (name, stage) in &net.stages {
        let (next, mut rep) = match stage {
            QStage::Conv(conv) | QStage::Fc(conv) => {
                f_last = conv.f_out;
                sim_conv_layer(&x, rows, cols, conv, accel, &opts)?
            }
            QStage::CapsConv { conv, capsule_dim, f_out } => {
                let (pre, rep) = sim_conv_layer(&x, rows, cols, conv, accel, &opts)?;
                f_last = *f_out;
                (qsquash_capsules(&pre, *capsule_dim, conv.f_out, *f_out)?, rep)
            }
            QStage::Routing { spec, f_u, f_v } => {
                f_last = *f_v;
                sim_routing(&x, rows * cols, spec, *f_u, *f_v, accel)?
            }
        };
        let mut l = rep.layers.remove(0);
        l.name = name.clone();
        layers.push(l);
        x = next;
    }
    let i = x.iter().step_by(2).map(|&r| dequantize(r, f_last) as f32).collect();
    let q = x.iter().skip(1).step_by(2).map(|&r| dequantize(r, f_last) as f32).collect();
    let env = EnvelopeImage::from_parts(rf.grid.clone(), i, q)?;
    Ok((env, SimReport::from_layers(layers, accel, policy)))
}

/// Default pruning ratio of the optimized plan.
pub const OPTIMIZED_PRUNE_RATIO: f64 = 0.85;

/// Modeled latency of the network. The optimized plan prunes every conv and
/// capsule-conv filter to its `0.85` quota and keeps weights resident; the
/// non-optimized plan is dense and reloads weights per row block.
pub fn estimate_latency(cfg: &CapsConfig, grid: &PixelGrid, accel: &AccelConfig, pruned: bool) -> Result<SimReport> {
    if cfg.layers().is_empty() {
        return Ok(SimReport::from_layers(Vec::new(), accel, WeightPolicy::ReloadPerBlock));
    }
    if !pruned {
        return network_report(cfg, grid, accel, WeightPolicy::ReloadPerBlock, &BTreeMap::new());
    }
    let overrides = network_layers(cfg, grid)?
        .into_iter()
        .filter(|(_, prunable)| *prunable)
        .map(|(d, _)| (d.name.clone(), d.with_quota(OPTIMIZED_PRUNE_RATIO)))
        .collect();
    network_report(cfg, grid, accel, WeightPolicy::WeightsResident, &overrides)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pruning::{CompactLayer, KernelLayer, LayerMask};
    use crate::quant::{qconv, qroute_pixel, QuantPlan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(rows: usize, cols: usize) -> PixelGrid {
        PixelGrid { num_rows: rows, num_cols: cols, ..Default::default() }
    }

    fn random_qconv(rng: &mut ChaCha8Rng, k: usize, cin: usize, cout: usize, prune: bool, relu: bool) -> QConv {
        let w: Vec<f32> = (0..k * k * cin * cout).map(|_| rng.random_range(-0.6..0.6)).collect();
        let bias: Vec<f32> = (0..cout).map(|_| rng.random_range(-0.3..0.3)).collect();
        let kl = KernelLayer::new("l", [k, k, cin, cout], w).unwrap();
        let mut mask = LayerMask::dense("l", cin, cout);
        if prune {
            for q in 0..cin {
                for p in 0..cout {
                    if (q + 2 * p) % 3 == 0 && q != p % cin {
                        mask.keep[q * cout + p] = false;
                    }
                }
            }
            mask.removed_filters[cout - 1] = true;
            for q in 0..cin {
                mask.keep[q * cout + cout - 1] = false;
            }
        }
        let compact = CompactLayer::compact(&kl, &bias, &mask).unwrap();
        let mut plan = QuantPlan::default();
        for (n, f) in [("in", 12), ("out", 12), ("l.weight", 15), ("l.bias", 14)] {
            plan.set(n, f);
        }
        QConv::build("l", &compact, &plan, "in", "out", relu).unwrap()
    }

    #[test]
    fn conv1_transaction_counts() {
        let g = PixelGrid::default();
        let d = ConvLayerDesc::dense("conv1", &g, 3, 3, 128, 128);
        assert_eq!(count_transactions(&d, WeightPolicy::ReloadPerBlock), 60_293_120);
        assert_eq!(count_transactions(&d, WeightPolicy::WeightsResident), 6_176_768);
        let p = d.clone().with_quota(0.85);
        assert!(count_transactions(&p, WeightPolicy::WeightsResident) < 6_176_768);
        assert_eq!(p.weight_words(), 9 * 20 * 128);
    }

    #[test]
    fn identity_1x1_single_row() {
        let kl = KernelLayer::new("l", [1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let compact = CompactLayer::compact(&kl, &[0.0, 0.0], &LayerMask::dense("l", 2, 2)).unwrap();
        let mut plan = QuantPlan::default();
        for (n, f) in [("in", 12), ("out", 12), ("l.weight", 14), ("l.bias", 14)] {
            plan.set(n, f);
        }
        let layer = QConv::build("l", &compact, &plan, "in", "out", false).unwrap();
        let input = vec![5, -7, 100, 3, -32768, 32767];
        let (out, rep) = sim_conv_layer(
            &input,
            1,
            3,
            &layer,
            &AccelConfig::default(),
            &ConvSimOptions { policy: WeightPolicy::WeightsResident, ..Default::default() },
        )
        .unwrap();
        assert_eq!(out, input);
        let l = &rep.layers[0];
        assert_eq!((l.weight_words, l.input_words, l.output_words), (4, 6, 6));
        assert_eq!(rep.external_word_transactions + rep.output_words, 4 + 6 + 6);
    }

    #[test]
    fn conv_sim_is_bit_exact_on_toy_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for (rows, cols) in [(1, 1), (2, 3), (5, 4), (8, 8)] {
            for (k, prune, relu) in [(1, false, true), (3, false, false), (3, true, true)] {
                let layer = random_qconv(&mut rng, k, 4, 5, prune, relu);
                let input: Vec<i16> = (0..rows * cols * 4).map(|_| rng.random()).collect();
                for order in [ReluBiasOrder::BiasThenRelu, ReluBiasOrder::ReluThenBias] {
                    let want = qconv(&input, rows, cols, &layer, order).unwrap();
                    let accel = AccelConfig { pe_rows: 2, pe_cols: 3, ..Default::default() };
                    let (got, _) = sim_conv_layer(
                        &input,
                        rows,
                        cols,
                        &layer,
                        &accel,
                        &ConvSimOptions { order, ..Default::default() },
                    )
                    .unwrap();
                    assert_eq!(got, want, "{rows}x{cols} k={k} prune={prune}");
                }
            }
        }
    }

    #[test]
    fn row_sampling_computes_only_requested_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let layer = random_qconv(&mut rng, 3, 3, 4, false, false);
        let input: Vec<i16> = (0..6 * 5 * 3).map(|_| rng.random_range(-5000..5000)).collect();
        let want = qconv(&input, 6, 5, &layer, ReluBiasOrder::BiasThenRelu).unwrap();
        let opts = ConvSimOptions { rows: Some(vec![0, 3, 5]), ..Default::default() };
        let (got, _) = sim_conv_layer(&input, 6, 5, &layer, &AccelConfig::default(), &opts).unwrap();
        let row = 5 * 4;
        for r in [0, 3, 5] {
            assert_eq!(got[r * row..(r + 1) * row], want[r * row..(r + 1) * row]);
        }
        assert!(got[row..2 * row].iter().all(|&v| v == 0));
    }

    #[test]
    fn bram_overflow_is_reported() {
        let d = ConvLayerDesc::dense("big", &PixelGrid::default(), 3, 3, 512, 512);
        let e = conv_layer_report(&d, &AccelConfig::default(), WeightPolicy::WeightsResident).unwrap_err();
        assert!(matches!(e, Error::BramOverflow { .. }));
    }

    #[test]
    fn routing_sim_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let r = RoutingSpec { num_in_capsules: 3, in_dim: 4, num_out_capsules: 2, out_dim: 4, num_iterations: 3 };
        let pixels = 50;
        let input: Vec<i16> = (0..pixels * 12).map(|_| rng.random_range(-9000..9000)).collect();
        let (got, rep) = sim_routing(&input, pixels, &r, 13, 15, &AccelConfig::default()).unwrap();
        let want: Vec<i16> = input.chunks(12).flat_map(|px| qroute_pixel(px, &r, 13, 15).unwrap()).collect();
        assert_eq!(got, want);
        assert_eq!(rep.cycle_count, pixels as u64 * routing_cycles_per_pixel(&r, &AccelConfig::default()));
    }

    #[test]
    fn single_capsule_routing_is_squash() {
        let r = RoutingSpec { num_in_capsules: 1, in_dim: 4, num_out_capsules: 1, out_dim: 4, num_iterations: 3 };
        let caps = [1000i16, -2000, 3000, 400];
        let (got, rep) = sim_routing(&caps, 1, &r, 12, 15, &AccelConfig::default()).unwrap();
        assert_eq!(got, fixed_squash(&caps, 12, 15).unwrap());
        let c = RoutingCosts::default();
        assert!(rep.cycle_count >= 3 * (c.softmax_latency + c.softmax_passes));
    }

    #[test]
    fn report_identity_and_orderings() {
        let cfg = CapsConfig::default_capsbeam();
        let g = PixelGrid::default();
        let accel = AccelConfig::default();
        let slow = estimate_latency(&cfg, &g, &accel, false).unwrap();
        let fast = estimate_latency(&cfg, &g, &accel, true).unwrap();
        assert!(fast.modeled_latency_s < slow.modeled_latency_s);
        for rep in [&slow, &fast] {
            let lhs = rep.modeled_gops * rep.modeled_latency_s;
            let rhs = 1e-9 * rep.total_ops as f64;
            assert!((lhs - rhs).abs() <= 1e-12 * rhs);
        }
        assert_eq!(slow.total_ops, crate::capsnet::count_flops(&cfg, &g).unwrap());
        let empty = CapsConfig::default();
        assert_eq!(estimate_latency(&empty, &g, &accel, false).unwrap().cycle_count, 0);
    }

    #[test]
    fn pe_scaling() {
        let d = ConvLayerDesc::dense("c", &PixelGrid::default(), 3, 3, 128, 128);
        let base = AccelConfig::default();
        let wide = AccelConfig { pe_rows: 8, ..base.clone() };
        let a = conv_compute_cycles(&d, &base);
        let b = conv_compute_cycles(&d, &wide);
        assert_eq!(a, 2 * b);
        let cycles = |pe_rows, pe_cols| {
            let acc = AccelConfig { pe_rows, pe_cols, ..base.clone() };
            conv_layer_report(&d, &acc, WeightPolicy::WeightsResident).unwrap().cycles()
        };
        for pe_rows in 2..=16 {
            assert!(cycles(pe_rows - 1, 128) >= cycles(pe_rows, 128));
        }
        for pe_cols in 2..=160 {
            assert!(cycles(4, pe_cols - 1) >= cycles(4, pe_cols));
        }
    }

    #[test]
    fn dma_stall_model() {
        let d = ConvLayerDesc::dense("c", &grid(4, 4), 1, 1, 2, 2);
        let rep = conv_layer_report(&d, &AccelConfig::default(), WeightPolicy::ReloadPerBlock).unwrap();
        // 32 input + 32 output words over 4-word beats, 16 weight words
        assert_eq!(rep.compute_cycles, 4 * 1 * 1 * 2);
        assert_eq!(rep.stall_cycles, 16 - 8);
        let single = AccelConfig { dma_count: 1, ..Default::default() };
        let rep1 = conv_layer_report(&d, &single, WeightPolicy::ReloadPerBlock).unwrap();
        assert_eq!(rep1.stall_cycles, 20 - 8);
    }
}
