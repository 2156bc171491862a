//! Structured kernel pruning.
//!
//! A kernel is one `kh x kw` slice of a filter along a single input channel.
//! Kernels are scored by their own L1 norm (magnitude), by the look-ahead
//! product with the connected kernels of the adjacent layers (LAKP), or by
//! the product over `r` neighbouring layers on each side (LAKP-ML). Pruning
//! removes a fixed quota of the lowest-scoring kernels from every filter,
//! then drops filters that end up with no kernels or no consumers.

use crate::bundle::WeightBundle;
use crate::capsnet::{bias_name, weight_name, CapsConfig, LayerKind};
use crate::error::{Error, Result};
use crate::geometry::PixelGrid;
use crate::tensor::Tensor;

/// Dense conv weights `[kh, kw, cin, cout]`. FC layers appear as 1x1.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelLayer {
    pub name: String,
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    pub weights: Vec<f32>,
}

impl KernelLayer {
    pub fn new(name: impl Into<String>, dims: [usize; 4], weights: Vec<f32>) -> Result<Self> {
        let [kh, kw, cin, cout] = dims;
        if weights.len() != kh * kw * cin * cout || weights.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "kernel layer {dims:?} needs {} weights, got {}",
                kh * kw * cin * cout,
                weights.len()
            )));
        }
        Ok(Self { name: name.into(), kh, kw, cin, cout, weights })
    }

    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self> {
        let dims: [usize; 4] = match t.dims() {
            [kh, kw, ci, co] => [*kh, *kw, *ci, *co],
            [ci, co] => [1, 1, *ci, *co],
            d => return Err(Error::ShapeMismatch(format!("expected conv or fc weights, got {d:?}"))),
        };
        let w = t.as_f32().ok_or_else(|| Error::InvalidTensor("pruning needs float32 weights".into()))?;
        Self::new(name, dims, w.to_vec())
    }

    pub fn kernel_size(&self) -> usize {
        self.kh * self.kw
    }

    /// L1 norm of every kernel, `[cin][cout]` row-major.
    pub fn l1_matrix(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cin * self.cout];
        for (i, &w) in self.weights.iter().enumerate() {
            // index = (k * cin + ci) * cout + co
            out[i % (self.cin * self.cout)] += (w as f64).abs();
        }
        out
    }
}

/// Sequential stack of kernel layers; layer `i`'s cout feeds layer `i+1`'s cin.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNetDescription {
    pub layers: Vec<KernelLayer>,
}

impl ConvNetDescription {
    pub fn new(layers: Vec<KernelLayer>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].cout != pair[1].cin {
                return Err(Error::ShapeMismatch(format!(
                    "{} produces {} channels, {} expects {}",
                    pair[0].name, pair[0].cout, pair[1].name, pair[1].cin
                )));
            }
        }
        Ok(Self { layers })
    }

    /// The convolutional stack (conv and capsule-conv layers) of a bundle.
    pub fn conv_stack(cfg: &CapsConfig, bundle: &WeightBundle) -> Result<Self> {
        let mut layers = Vec::new();
        for layer in cfg.layers() {
            if matches!(layer.kind, LayerKind::Conv(_) | LayerKind::CapsConv(_)) {
                let t = bundle.require(&weight_name(&layer.name))?;
                layers.push(KernelLayer::from_tensor(layer.name.clone(), t)?);
            }
        }
        Self::new(layers)
    }

    fn layer(&self, i: usize) -> Result<&KernelLayer> {
        self.layers.get(i).ok_or_else(|| Error::IndexOutOfRange(format!("layer {i} of {}", self.layers.len())))
    }
}

pub fn kernel_l1(layer: &KernelLayer, cin_idx: usize, cout_idx: usize) -> Result<f64> {
    if cin_idx >= layer.cin || cout_idx >= layer.cout {
        return Err(Error::IndexOutOfRange(format!(
            "kernel ({cin_idx}, {cout_idx}) in {} with {}x{} kernels",
            layer.name, layer.cin, layer.cout
        )));
    }
    Ok((0..layer.kernel_size())
        .map(|k| layer.weights[(k * layer.cin + cin_idx) * layer.cout + cout_idx].abs() as f64)
        .sum())
}

/// Products of connected-kernel sums on each side of a layer.
struct NeighbourFactors {
    /// indexed by cin of layer i (= filter index of layer i-1)
    upstream: Vec<f64>,
    /// indexed by cout of layer i (= channel index of layer i+1)
    downstream: Vec<f64>,
}

fn neighbour_factors(net: &ConvNetDescription, l1: &[Vec<f64>], i: usize, r: usize) -> NeighbourFactors {
    let n = net.layers.len();
    let this = &net.layers[i];
    let upstream = (0..this.cin)
        .map(|q| {
            // Reachable filters of layer j (cout space), starting at filter q of layer i-1.
            let mut reach = vec![false; this.cin];
            reach[q] = true;
            let mut prod = 1.0;
            for t in 1..=r {
                let Some(j) = i.checked_sub(t) else { break };
                let lay = &net.layers[j];
                let m = &l1[j];
                let mut sum = 0.0;
                let mut next = vec![false; lay.cin];
                for ci in 0..lay.cin {
                    for co in (0..lay.cout).filter(|&co| reach[co]) {
                        sum += m[ci * lay.cout + co];
                        next[ci] = true;
                    }
                }
                prod *= sum;
                reach = next;
            }
            prod
        })
        .collect();
    let downstream = (0..this.cout)
        .map(|p| {
            // Reachable input channels of layer j (cin space), starting at channel p.
            let mut reach = vec![false; this.cout];
            reach[p] = true;
            let mut prod = 1.0;
            for t in 1..=r {
                let j = i + t;
                if j >= n {
                    break;
                }
                let lay = &net.layers[j];
                let m = &l1[j];
                let mut sum = 0.0;
                let mut next = vec![false; lay.cout];
                for ci in (0..lay.cin).filter(|&ci| reach[ci]) {
                    for co in 0..lay.cout {
                        sum += m[ci * lay.cout + co];
                        next[co] = true;
                    }
                }
                prod *= sum;
                reach = next;
            }
            prod
        })
        .collect();
    NeighbourFactors { upstream, downstream }
}

fn check_kernel_index(net: &ConvNetDescription, i: usize, q: usize, p: usize) -> Result<()> {
    let layer = net.layer(i)?;
    if q >= layer.cin || p >= layer.cout {
        return Err(Error::IndexOutOfRange(format!(
            "kernel (cin {q}, cout {p}) in {} with {}x{} kernels",
            layer.name, layer.cin, layer.cout
        )));
    }
    Ok(())
}

/// Look-ahead score with one neighbour on each side: upstream kernels of
/// filter `q` in layer `i-1`, the kernel itself, downstream kernels reading
/// channel `p` in layer `i+1`. Missing neighbours contribute a factor 1.
pub fn lakp_score(net: &ConvNetDescription, i: usize, q: usize, p: usize) -> Result<f64> {
    check_kernel_index(net, i, q, p)?;
    let own = kernel_l1(&net.layers[i], q, p)?;
    let up = match i.checked_sub(1) {
        Some(j) => {
            let prev = &net.layers[j];
            (0..prev.cin).map(|ci| kernel_l1(prev, ci, q)).sum::<Result<f64>>()?
        }
        None => 1.0,
    };
    let down = match net.layers.get(i + 1) {
        Some(next) => (0..next.cout).map(|co| kernel_l1(next, p, co)).sum::<Result<f64>>()?,
        None => 1.0,
    };
    Ok(up * own * down)
}

/// Multi-layer look-ahead score over `r` neighbouring layers on each side.
/// Beyond distance one, the connected set is every kernel reachable through
/// the intermediate channels.
pub fn lakp_ml_score(net: &ConvNetDescription, i: usize, q: usize, p: usize, r: usize) -> Result<f64> {
    check_kernel_index(net, i, q, p)?;
    if r == 0 {
        return Err(Error::InvalidConfig("neighbour depth r must be >= 1".into()));
    }
    let l1: Vec<Vec<f64>> = net.layers.iter().map(KernelLayer::l1_matrix).collect();
    let f = neighbour_factors(net, &l1, i, r);
    let lay = &net.layers[i];
    Ok(f.upstream[q] * l1[i][q * lay.cout + p] * f.downstream[p])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMethod {
    Magnitude,
    Lakp,
    LakpMl,
}

impl std::str::FromStr for PruneMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Self::Magnitude),
            "lakp" => Ok(Self::Lakp),
            "lakp_ml" | "lakp-ml" => Ok(Self::LakpMl),
            other => Err(Error::InvalidConfig(format!("unknown prune method `{other}`"))),
        }
    }
}

/// Every kernel score of layer `i`, `[cin][cout]`.
pub fn layer_scores(net: &ConvNetDescription, i: usize, method: PruneMethod, r: usize) -> Result<Vec<f64>> {
    let lay = net.layer(i)?;
    let l1: Vec<Vec<f64>> = net.layers.iter().map(KernelLayer::l1_matrix).collect();
    let depth = match method {
        PruneMethod::Magnitude => return Ok(l1[i].clone()),
        PruneMethod::Lakp => 1,
        PruneMethod::LakpMl => {
            if r == 0 {
                return Err(Error::InvalidConfig("neighbour depth r must be >= 1".into()));
            }
            r
        }
    };
    let f = neighbour_factors(net, &l1, i, depth);
    let mut out = l1[i].clone();
    for q in 0..lay.cin {
        for p in 0..lay.cout {
            out[q * lay.cout + p] *= f.upstream[q] * f.downstream[p];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerMask {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    /// Kept kernels, `[cin][cout]` row-major.
    pub keep: Vec<bool>,
    pub removed_filters: Vec<bool>,
}

impl LayerMask {
    pub fn dense(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self { name: name.into(), cin, cout, keep: vec![true; cin * cout], removed_filters: vec![false; cout] }
    }

    pub fn kept(&self, q: usize, p: usize) -> bool {
        self.keep[q * self.cout + p]
    }

    /// Kept input channels of filter `p`, ascending.
    pub fn kept_cin(&self, p: usize) -> Vec<usize> {
        (0..self.cin).filter(|&q| self.kept(q, p)).collect()
    }

    pub fn kept_filters(&self) -> Vec<usize> {
        (0..self.cout).filter(|&p| !self.removed_filters[p]).collect()
    }

    pub fn kept_kernels(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// Widest kept-channel list over the kept filters.
    pub fn max_kept_cin(&self) -> usize {
        self.kept_filters().iter().map(|&p| self.kept_cin(p).len()).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneMask {
    pub layers: Vec<LayerMask>,
}

impl PruneMask {
    pub fn identity(net: &ConvNetDescription) -> Self {
        Self { layers: net.layers.iter().map(|l| LayerMask::dense(l.name.clone(), l.cin, l.cout)).collect() }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerMask> {
        self.layers.iter().find(|m| m.name == name)
    }
}

/// Per-filter quota of pruned kernels for `ratio` of `cin` kernels.
pub fn per_filter_quota(ratio: f64, cin: usize) -> usize {
    ((ratio * cin as f64) + 1e-9).floor() as usize
}

/// Plans structured pruning: in every filter of every layer, the
/// `floor(ratio * cin)` lowest-scoring kernels go (ties: lower cin index
/// first), then dead filters are removed until nothing changes.
pub fn plan_prune(net: &ConvNetDescription, ratio: f64, method: PruneMethod, r: usize) -> Result<PruneMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::RatioOutOfRange(ratio));
    }
    let mut mask = PruneMask::identity(net);
    for (i, lay) in net.layers.iter().enumerate() {
        let scores = layer_scores(net, i, method, r)?;
        let quota = per_filter_quota(ratio, lay.cin);
        let m = &mut mask.layers[i];
        for p in 0..lay.cout {
            let mut order: Vec<usize> = (0..lay.cin).collect();
            order.sort_by(|&a, &b| scores[a * lay.cout + p].total_cmp(&scores[b * lay.cout + p]).then(a.cmp(&b)));
            for &q in &order[..quota] {
                m.keep[q * lay.cout + p] = false;
            }
        }
    }
    remove_dead_filters(&mut mask);
    Ok(mask)
}

/// Removes filters with no kept kernel or whose output channel no kept
/// kernel downstream reads, and the downstream kernels reading removed
/// filters, until a fixed point.
pub fn remove_dead_filters(mask: &mut PruneMask) {
    loop {
        let mut changed = false;
        let n = mask.layers.len();
        for i in 0..n {
            for p in 0..mask.layers[i].cout {
                if mask.layers[i].removed_filters[p] {
                    continue;
                }
                let empty = (0..mask.layers[i].cin).all(|q| !mask.layers[i].kept(q, p));
                let unread = i + 1 < n && {
                    let next = &mask.layers[i + 1];
                    (0..next.cout).all(|o| !next.kept(p, o))
                };
                if empty || unread {
                    let m = &mut mask.layers[i];
                    m.removed_filters[p] = true;
                    for q in 0..m.cin {
                        m.keep[q * m.cout + p] = false;
                    }
                    if i + 1 < n {
                        let next = &mut mask.layers[i + 1];
                        for o in 0..next.cout {
                            next.keep[p * next.cout + o] = false;
                        }
                    }
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub ratio_requested: f64,
    /// Fraction of kernels pruned over the whole stack.
    pub ratio_achieved: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub flops_before: u64,
    pub flops_after: u64,
    /// `(layer, removed filter count)`
    pub removed_filters: Vec<(String, usize)>,
}

impl PruneReport {
    pub fn kept_param_fraction(&self) -> f64 {
        self.params_after as f64 / self.params_before as f64
    }

    pub fn flop_fraction(&self) -> f64 {
        self.flops_after as f64 / self.flops_before as f64
    }

    /// `(field, value)` rows for CSV output.
    pub fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("ratio_requested".to_string(), format!("{:.6}", self.ratio_requested)),
            ("ratio_achieved".to_string(), format!("{:.6}", self.ratio_achieved)),
            ("params_before".to_string(), self.params_before.to_string()),
            ("params_after".to_string(), self.params_after.to_string()),
            ("kept_param_fraction".to_string(), format!("{:.6}", self.kept_param_fraction())),
            ("flops_before".to_string(), self.flops_before.to_string()),
            ("flops_after".to_string(), self.flops_after.to_string()),
        ];
        for (name, n) in &self.removed_filters {
            rows.push((format!("removed_filters.{name}"), n.to_string()));
        }
        rows
    }
}

/// Weight and bias counts and multiply-add operations of the stack before
/// and after applying `mask` on `grid`.
pub fn prune_report(net: &ConvNetDescription, mask: &PruneMask, ratio: f64, grid: &PixelGrid) -> Result<PruneReport> {
    if mask.layers.len() != net.layers.len() {
        return Err(Error::MaskMismatch("layer count differs".into()));
    }
    let px = grid.num_pixels() as u64;
    let (mut pb, mut pa, mut fb, mut fa) = (0u64, 0u64, 0u64, 0u64);
    let (mut kernels, mut kept) = (0usize, 0usize);
    let mut removed = Vec::new();
    for (lay, m) in net.layers.iter().zip(&mask.layers) {
        if (m.cin, m.cout) != (lay.cin, lay.cout) {
            return Err(Error::MaskMismatch(format!("{} mask is {}x{}", lay.name, m.cin, m.cout)));
        }
        let k = lay.kernel_size() as u64;
        let kk = m.kept_kernels() as u64;
        pb += k * (lay.cin * lay.cout) as u64 + lay.cout as u64;
        pa += k * kk + m.kept_filters().len() as u64;
        fb += 2 * px * k * (lay.cin * lay.cout) as u64;
        fa += 2 * px * k * kk;
        kernels += lay.cin * lay.cout;
        kept += kk as usize;
        removed.push((lay.name.clone(), m.removed_filters.iter().filter(|&&r| r).count()));
    }
    Ok(PruneReport {
        ratio_requested: ratio,
        ratio_achieved: 1.0 - kept as f64 / kernels as f64,
        params_before: pb,
        params_after: pa,
        flops_before: fb,
        flops_after: fa,
        removed_filters: removed,
    })
}

/// Compacted pruned layer: only kept filters, each with its kept input
/// channels listed in ascending order. Filters with fewer kept channels
/// than the widest one are padded with zero weights and index -1.
#[derive(Debug, Clone, PartialEq)]
pub struct CompactLayer {
    pub kh: usize,
    pub kw: usize,
    pub cin: usize,
    pub cout: usize,
    /// Widest kept-channel list.
    pub kmax: usize,
    /// Original output channel of each kept filter.
    pub filters: Vec<usize>,
    /// `[kmax][nf]`, original input channel or -1 for padding.
    pub index: Vec<i16>,
    /// `[kh][kw][kmax][nf]`
    pub weights: Vec<f32>,
    /// `[nf]`
    pub bias: Vec<f32>,
}

pub const INDEX_PAD: i16 = -1;

impl CompactLayer {
    pub fn num_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn compact(dense: &KernelLayer, bias: &[f32], mask: &LayerMask) -> Result<Self> {
        if (mask.cin, mask.cout) != (dense.cin, dense.cout) || bias.len() != dense.cout {
            return Err(Error::MaskMismatch(format!("{}: mask/bias do not match weights", dense.name)));
        }
        if dense.cin > i16::MAX as usize {
            return Err(Error::MaskMismatch("channel index exceeds 16-bit range".into()));
        }
        let filters = mask.kept_filters();
        if filters.is_empty() {
            return Err(Error::MaskMismatch(format!("{} lost every filter", dense.name)));
        }
        let kmax = mask.max_kept_cin().max(1);
        let nf = filters.len();
        let k = dense.kernel_size();
        let mut index = vec![INDEX_PAD; kmax * nf];
        let mut weights = vec![0.0f32; k * kmax * nf];
        for (f, &p) in filters.iter().enumerate() {
            for (slot, q) in mask.kept_cin(p).into_iter().enumerate() {
                index[slot * nf + f] = q as i16;
                for kk in 0..k {
                    weights[(kk * kmax + slot) * nf + f] = dense.weights[(kk * dense.cin + q) * dense.cout + p];
                }
            }
        }
        let bias = filters.iter().map(|&p| bias[p]).collect();
        Ok(Self { kh: dense.kh, kw: dense.kw, cin: dense.cin, cout: dense.cout, kmax, filters, index, weights, bias })
    }

    /// Dense `[kh, kw, cin, cout]` weights and `[cout]` bias with zeros for
    /// pruned kernels and removed filters.
    pub fn expand(&self) -> (Vec<f32>, Vec<f32>) {
        let nf = self.num_filters();
        let k = self.kh * self.kw;
        let mut w = vec![0.0f32; k * self.cin * self.cout];
        let mut b = vec![0.0f32; self.cout];
        for (f, &p) in self.filters.iter().enumerate() {
            b[p] = self.bias[f];
            for slot in 0..self.kmax {
                let q = self.index[slot * nf + f];
                if q == INDEX_PAD {
                    continue;
                }
                for kk in 0..k {
                    w[(kk * self.cin + q as usize) * self.cout + p] = self.weights[(kk * self.kmax + slot) * nf + f];
                }
            }
        }
        (w, b)
    }

    /// Reads a layer from a bundle, compacted when it carries an index,
    /// otherwise dense (identity compaction).
    pub fn from_bundle(bundle: &WeightBundle, name: &str) -> Result<Self> {
        let wt = bundle.require(&weight_name(name))?;
        let bias = bundle.require(&bias_name(name))?.to_f32_vec();
        let Some(idx) = bundle.get(&index_name(name)) else {
            let dense = KernelLayer::from_tensor(name, wt)?;
            let mask = LayerMask::dense(name, dense.cin, dense.cout);
            return Self::compact(&dense, &bias, &mask);
        };
        let mask_t = bundle.require(&mask_name(name))?;
        let (cin, cout) = match mask_t.dims() {
            [a, b] => (*a, *b),
            d => return Err(Error::MaskMismatch(format!("{name} mask dims {d:?}"))),
        };
        let (kh, kw, kmax, nf) = match wt.dims() {
            [a, b, c, d] => (*a, *b, *c, *d),
            d => return Err(Error::MaskMismatch(format!("{name} compact weights dims {d:?}"))),
        };
        let filters: Vec<usize> = bundle
            .require(&filters_name(name))?
            .as_i16()
            .ok_or_else(|| Error::MaskMismatch(format!("{name} filter list is not fixed16")))?
            .iter()
            .map(|&f| f as usize)
            .collect();
        let index = idx.as_i16().ok_or_else(|| Error::MaskMismatch(format!("{name} index is not fixed16")))?.to_vec();
        if idx.dims() != [kmax, nf] || filters.len() != nf || bias.len() != nf {
            return Err(Error::MaskMismatch(format!("{name}: compact entries disagree")));
        }
        if filters.iter().any(|&f| f >= cout) || index.iter().any(|&q| q != INDEX_PAD && (q < 0 || q as usize >= cin)) {
            return Err(Error::MaskMismatch(format!("{name}: index out of range")));
        }
        Ok(Self { kh, kw, cin, cout, kmax, filters, index, weights: wt.to_f32_vec(), bias })
    }
}

pub fn index_name(layer: &str) -> String {
    format!("{layer}.index")
}

pub fn mask_name(layer: &str) -> String {
    format!("{layer}.mask")
}

pub fn filters_name(layer: &str) -> String {
    format!("{layer}.filters")
}

fn dense_layer_from_bundle(bundle: &WeightBundle, name: &str) -> Result<(KernelLayer, Vec<f32>)> {
    let wt = bundle.require(&weight_name(name))?;
    let dense = KernelLayer::from_tensor(name, wt)?;
    let bias = bundle.require(&bias_name(name))?.expect_f32(&bias_name(name), &[dense.cout])?.to_vec();
    Ok((dense, bias))
}

/// Replaces each masked layer's weights with the compacted form and adds
/// its `.index`, `.filters` and `.mask` entries.
pub fn apply_mask(bundle: &WeightBundle, mask: &PruneMask) -> Result<WeightBundle> {
    let mut out = bundle.clone();
    for m in &mask.layers {
        let (dense, bias) = dense_layer_from_bundle(bundle, &m.name)?;
        if dense.weights.len() != dense.kernel_size() * m.cin * m.cout || bundle.get(&index_name(&m.name)).is_some() {
            return Err(Error::MaskMismatch(format!("{} is already compacted or mismatched", m.name)));
        }
        let c = CompactLayer::compact(&dense, &bias, m)?;
        let nf = c.num_filters();
        let wdims = vec![c.kh, c.kw, c.kmax, nf];
        out.insert(weight_name(&m.name), Tensor::from_f32(wdims, c.weights)?)?;
        out.insert(bias_name(&m.name), Tensor::from_f32(vec![nf], c.bias)?)?;
        out.insert(index_name(&m.name), Tensor::from_i16(vec![c.kmax, nf], 0, c.index)?)?;
        let filters = c.filters.iter().map(|&f| f as i16).collect();
        out.insert(filters_name(&m.name), Tensor::from_i16(vec![nf], 0, filters)?)?;
        let bits = m.keep.iter().map(|&k| k as i16).collect();
        out.insert(mask_name(&m.name), Tensor::from_i16(vec![m.cin, m.cout], 0, bits)?)?;
    }
    let names: Vec<&str> = mask.layers.iter().map(|m| m.name.as_str()).collect();
    out.set_meta("pruned_layers", names.join(","));
    Ok(out)
}

/// Dense bundle with every pruned kernel (and removed filter's bias) zeroed.
pub fn zero_pruned(bundle: &WeightBundle, mask: &PruneMask) -> Result<WeightBundle> {
    let mut out = bundle.clone();
    for m in &mask.layers {
        let (dense, bias) = dense_layer_from_bundle(bundle, &m.name)?;
        let c = CompactLayer::compact(&dense, &bias, m)?;
        let (w, b) = c.expand();
        let dims = bundle.require(&weight_name(&m.name))?.dims().to_vec();
        out.insert(weight_name(&m.name), Tensor::from_f32(dims, w)?)?;
        out.insert(bias_name(&m.name), Tensor::from_f32(vec![m.cout], b)?)?;
    }
    Ok(out)
}

/// Inverse of [`apply_mask`]: dense weights for every compacted layer, with
/// the auxiliary entries dropped.
pub fn expand_compacted(bundle: &WeightBundle) -> Result<WeightBundle> {
    let mut out = bundle.clone();
    let compacted: Vec<String> = bundle.names().filter_map(|n| n.strip_suffix(".index").map(str::to_string)).collect();
    for name in compacted {
        let c = CompactLayer::from_bundle(bundle, &name)?;
        let (w, b) = c.expand();
        out.insert(weight_name(&name), Tensor::from_f32(vec![c.kh, c.kw, c.cin, c.cout], w)?)?;
        out.insert(bias_name(&name), Tensor::from_f32(vec![c.cout], b)?)?;
        out.remove(&index_name(&name));
        out.remove(&filters_name(&name));
        out.remove(&mask_name(&name));
    }
    Ok(out)
}

/// Reconstructs the prune mask stored in a compacted bundle.
pub fn mask_from_bundle(bundle: &WeightBundle, layer_names: &[String]) -> Result<PruneMask> {
    let mut layers = Vec::new();
    for name in layer_names {
        let t = bundle.require(&mask_name(name))?;
        let (cin, cout) = match t.dims() {
            [a, b] => (*a, *b),
            d => return Err(Error::MaskMismatch(format!("{name} mask dims {d:?}"))),
        };
        let keep: Vec<bool> =
            t.as_i16().ok_or_else(|| Error::MaskMismatch("mask not fixed16".into()))?.iter().map(|&b| b != 0).collect();
        let c = CompactLayer::from_bundle(bundle, name)?;
        let mut removed = vec![true; cout];
        for &f in &c.filters {
            removed[f] = false;
        }
        layers.push(LayerMask { name: name.clone(), cin, cout, keep, removed_filters: removed });
    }
    Ok(PruneMask { layers })
}
