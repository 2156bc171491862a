//! Synthetic scatterer phantoms, plane-wave channel-data simulation and
//! time-of-flight correction onto a pixel grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{PixelGrid, ProbeGeometry, RfVolume};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scatterer {
    pub x_m: f64,
    pub z_m: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cyst {
    pub center_x_m: f64,
    pub center_z_m: f64,
    pub radius_m: f64,
    /// Amplitude multiplier for scatterers inside; 0 is anechoic.
    pub echogenicity: f64,
}

impl Cyst {
    pub fn contains(&self, x: f64, z: f64) -> bool {
        (x - self.center_x_m).hypot(z - self.center_z_m) <= self.radius_m
    }
}

/// Rectangular region filled with random background speckle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeckleBox {
    pub x_min_m: f64,
    pub x_max_m: f64,
    pub z_min_m: f64,
    pub z_max_m: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Phantom {
    pub scatterers: Vec<Scatterer>,
    pub cyst_regions: Vec<Cyst>,
    /// Background scatterers per square millimetre inside `speckle_box`.
    pub background_density: f64,
    pub speckle_box: Option<SpeckleBox>,
    pub rng_seed: u64,
}

impl Phantom {
    pub fn point(x_m: f64, z_m: f64, amplitude: f64) -> Self {
        Self { scatterers: vec![Scatterer { x_m, z_m, amplitude }], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.scatterers {
            if !(s.z_m > 0.0) || !s.x_m.is_finite() || !s.amplitude.is_finite() {
                return Err(Error::InvalidConfig(format!("bad scatterer {s:?}")));
            }
        }
        for c in &self.cyst_regions {
            if !(c.radius_m > 0.0) || !(0.0..=1.0).contains(&c.echogenicity) {
                return Err(Error::InvalidConfig(format!("bad cyst {c:?}")));
            }
        }
        if self.background_density < 0.0 {
            return Err(Error::InvalidConfig("background density must be >= 0".into()));
        }
        if let Some(b) = self.speckle_box {
            if !(b.x_max_m > b.x_min_m && b.z_max_m > b.z_min_m && b.z_min_m > 0.0) {
                return Err(Error::InvalidConfig(format!("bad speckle box {b:?}")));
            }
        }
        Ok(())
    }

    /// Explicit scatterers followed by the seeded background speckle, with
    /// cyst echogenicity applied to every scatterer inside a cyst.
    pub fn realize(&self) -> Vec<Scatterer> {
        let mut out = self.scatterers.clone();
        if let (Some(b), true) = (self.speckle_box, self.background_density > 0.0) {
            let area_mm2 = (b.x_max_m - b.x_min_m) * (b.z_max_m - b.z_min_m) * 1e6;
            let count = (area_mm2 * self.background_density).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            out.reserve(count);
            for _ in 0..count {
                let x_m = rng.random_range(b.x_min_m..b.x_max_m);
                let z_m = rng.random_range(b.z_min_m..b.z_max_m);
                let amplitude = normal.sample(&mut rng);
                out.push(Scatterer { x_m, z_m, amplitude });
            }
        }
        for s in &mut out {
            for c in &self.cyst_regions {
                if c.contains(s.x_m, s.z_m) {
                    s.amplitude *= c.echogenicity;
                }
            }
        }
        out
    }
}

/// Transmit pulse: Gaussian-windowed cosine centered on t = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pulse {
    pub center_frequency_hz: f64,
    /// Gaussian standard deviation in periods of the center frequency.
    pub sigma_cycles: f64,
}

impl Default for Pulse {
    fn default() -> Self {
        Self { center_frequency_hz: 7.6e6, sigma_cycles: 0.5 }
    }
}

impl Pulse {
    pub fn sigma_s(&self) -> f64 {
        self.sigma_cycles / self.center_frequency_hz
    }

    pub fn eval(&self, t: f64) -> f64 {
        let sigma = self.sigma_s();
        (-(t * t) / (2.0 * sigma * sigma)).exp() * (2.0 * std::f64::consts::PI * self.center_frequency_hz * t).cos()
    }

    /// Half-width beyond which the pulse is treated as zero.
    pub fn support_s(&self) -> f64 {
        5.0 * self.sigma_s()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimOptions {
    pub pulse: Pulse,
    /// Standard deviation of additive white Gaussian noise; 0 disables it.
    pub noise_std: f64,
    pub noise_seed: u64,
}

/// Raw per-element traces, `[num_time_samples, num_elements]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawChannelData {
    pub geometry: ProbeGeometry,
    pub num_time_samples: usize,
    pub samples: Tensor,
}

impl RawChannelData {
    pub fn new(geometry: ProbeGeometry, samples: Tensor) -> Result<Self> {
        let num_time_samples = match samples.dims() {
            [t, e] if *e == geometry.num_elements => *t,
            d => {
                return Err(Error::ShapeMismatch(format!(
                    "raw data dims {d:?} do not match {} elements",
                    geometry.num_elements
                )))
            }
        };
        if samples.as_f32().is_none() {
            return Err(Error::InvalidTensor("raw channel data must be float32".into()));
        }
        Ok(Self { geometry, num_time_samples, samples })
    }

    pub fn data(&self) -> &[f32] {
        self.samples.as_f32().expect("validated float32")
    }
}

pub fn simulate_rx(
    phantom: &Phantom,
    geom: &ProbeGeometry,
    num_time_samples: usize,
    opts: &SimOptions,
) -> Result<RawChannelData> {
    geom.validate()?;
    phantom.validate()?;
    if num_time_samples == 0 {
        return Err(Error::InvalidConfig("need at least one time sample".into()));
    }
    let scatterers = phantom.realize();
    let fs = geom.sample_rate_hz;
    let last = num_time_samples - 1;
    let elems = geom.element_x();

    // Delays per (scatterer, element); also the out-of-field check.
    let mut delays = vec![0.0f64; scatterers.len() * elems.len()];
    for (si, s) in scatterers.iter().enumerate() {
        for (e, &ex) in elems.iter().enumerate() {
            let tau = geom.delay_s(s.x_m, s.z_m, ex);
            let sample = tau * fs;
            if sample > last as f64 {
                return Err(Error::OutOfField { x_m: s.x_m, z_m: s.z_m, sample, last });
            }
            delays[si * elems.len() + e] = tau;
        }
    }

    let support = opts.pulse.support_s();
    let num_elems = elems.len();
    let traces: Vec<Vec<f64>> = (0..num_elems)
        .into_par_iter()
        .map(|e| {
            let mut trace = vec![0.0f64; num_time_samples];
            for (si, s) in scatterers.iter().enumerate() {
                if s.amplitude == 0.0 {
                    continue;
                }
                let tau = delays[si * num_elems + e];
                let lo = ((tau - support) * fs).ceil().max(0.0) as usize;
                let hi = (((tau + support) * fs).floor() as usize).min(last);
                for (k, slot) in trace.iter_mut().enumerate().take(hi + 1).skip(lo) {
                    *slot += s.amplitude * opts.pulse.eval(k as f64 / fs - tau);
                }
            }
            trace
        })
        .collect();

    let mut data = vec![0.0f32; num_time_samples * num_elems];
    for (e, trace) in traces.iter().enumerate() {
        for (k, v) in trace.iter().enumerate() {
            data[k * num_elems + e] = *v as f32;
        }
    }
    if opts.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.noise_seed);
        let normal = Normal::new(0.0, opts.noise_std).map_err(|e| Error::InvalidConfig(format!("noise: {e}")))?;
        for v in &mut data {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    let samples = Tensor::from_f32(vec![num_time_samples, num_elems], data)?;
    RawChannelData::new(geom.clone(), samples)
}

/// Resamples each element trace at every pixel's two-way delay by linear
/// interpolation. Delays outside the recorded window give 0.
pub fn tof_correct(raw: &RawChannelData, grid: &PixelGrid) -> Result<RfVolume> {
    tof_correct_with_positions(raw, grid, &raw.geometry.element_x())
}

/// [`tof_correct`] with explicit element positions, one per channel.
pub fn tof_correct_with_positions(raw: &RawChannelData, grid: &PixelGrid, element_x: &[f64]) -> Result<RfVolume> {
    grid.validate()?;
    let geom = &raw.geometry;
    let ch = geom.num_elements;
    if element_x.len() != ch {
        return Err(Error::ShapeMismatch(format!("{} element positions for {ch} channels", element_x.len())));
    }
    let n_t = raw.num_time_samples;
    let fs = geom.sample_rate_hz;
    let src = raw.data();
    let cols = grid.num_cols;
    let mut out = vec![0.0f32; grid.num_rows * cols * ch];
    out.par_chunks_mut(cols * ch).enumerate().for_each(|(row, row_out)| {
        let z = grid.z(row);
        for col in 0..cols {
            let x = grid.x(col);
            let px = &mut row_out[col * ch..(col + 1) * ch];
            for (e, slot) in px.iter_mut().enumerate() {
                let s = geom.delay_s(x, z, element_x[e]) * fs;
                *slot = interp(src, n_t, ch, e, s);
            }
        }
    });
    let samples = Tensor::from_f32(vec![grid.num_rows, cols, ch], out)?;
    RfVolume::new(grid.clone(), ch, samples)
}

fn interp(src: &[f32], n_t: usize, ch: usize, e: usize, s: f64) -> f32 {
    if !(s >= 0.0) || s > (n_t - 1) as f64 {
        return 0.0;
    }
    let k = s.floor() as usize;
    let frac = s - k as f64;
    let a = src[k * ch + e] as f64;
    if k + 1 >= n_t {
        return a as f32;
    }
    let b = src[(k + 1) * ch + e] as f64;
    (a + frac * (b - a)) as f32
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_probe() -> ProbeGeometry {
        ProbeGeometry { num_elements: 16, ..Default::default() }
    }

    #[test]
    fn empty_phantom_is_silent() {
        let raw = simulate_rx(&Phantom::default(), &small_probe(), 200, &SimOptions::default()).unwrap();
        assert!(raw.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn on_element_scatterer_peaks_at_two_way_delay() {
        let geom = small_probe();
        let e = 5;
        let x = geom.element_x()[e];
        let z = 10e-3;
        let raw = simulate_rx(&Phantom::point(x, z, 1.0), &geom, 600, &SimOptions::default()).unwrap();
        let ch = geom.num_elements;
        let trace: Vec<f32> = (0..raw.num_time_samples).map(|k| raw.data()[k * ch + e]).collect();
        let peak = trace.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        let expect = (2.0 * z / geom.speed_of_sound_mps * geom.sample_rate_hz).round() as usize;
        assert_eq!(peak, expect);
    }

    #[test]
    fn superposition_of_coincident_scatterers() {
        let geom = small_probe();
        let one = simulate_rx(&Phantom::point(1e-3, 8e-3, 0.7), &geom, 500, &SimOptions::default()).unwrap();
        let mut both = Phantom::point(1e-3, 8e-3, 0.7);
        both.scatterers.push(Scatterer { x_m: 1e-3, z_m: 8e-3, amplitude: 1.4 });
        let sum = simulate_rx(&both, &geom, 500, &SimOptions::default()).unwrap();
        for (a, b) in one.data().iter().zip(sum.data()) {
            assert!((3.0 * a - b).abs() <= 1e-6 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn out_of_field_is_reported() {
        let err =
            simulate_rx(&Phantom::point(0.0, 0.05, 1.0), &small_probe(), 100, &SimOptions::default()).unwrap_err();
        assert!(matches!(err, Error::OutOfField { .. }));
    }

    #[test]
    fn seeded_speckle_is_deterministic() {
        let p = Phantom {
            background_density: 2.0,
            speckle_box: Some(SpeckleBox { x_min_m: -1e-3, x_max_m: 1e-3, z_min_m: 5e-3, z_max_m: 7e-3 }),
            rng_seed: 11,
            ..Default::default()
        };
        let opts = SimOptions { noise_std: 0.1, noise_seed: 3, ..Default::default() };
        let a = simulate_rx(&p, &small_probe(), 400, &opts).unwrap();
        let b = simulate_rx(&p, &small_probe(), 400, &opts).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(p.realize().len(), 8);
    }

    #[test]
    fn anechoic_cyst_silences_inside() {
        let p = Phantom {
            cyst_regions: vec![Cyst { center_x_m: 0.0, center_z_m: 6e-3, radius_m: 1e-3, echogenicity: 0.0 }],
            background_density: 20.0,
            speckle_box: Some(SpeckleBox { x_min_m: -2e-3, x_max_m: 2e-3, z_min_m: 4e-3, z_max_m: 8e-3 }),
            rng_seed: 1,
            ..Default::default()
        };
        for s in p.realize() {
            if p.cyst_regions[0].contains(s.x_m, s.z_m) {
                assert_eq!(s.amplitude, 0.0);
            }
        }
    }

    fn raw_from(geom: &ProbeGeometry, n_t: usize, f: impl Fn(usize, usize) -> f32) -> RawChannelData {
        let ch = geom.num_elements;
        let data = (0..n_t * ch).map(|i| f(i / ch, i % ch)).collect();
        RawChannelData::new(geom.clone(), Tensor::from_f32(vec![n_t, ch], data).unwrap()).unwrap()
    }

    fn tiny_grid() -> PixelGrid {
        PixelGrid { num_rows: 6, num_cols: 5, depth_origin_m: 3e-3, ..Default::default() }
    }

    #[test]
    fn constant_trace_interpolates_to_constant() {
        let geom = small_probe();
        let raw = raw_from(&geom, 400, |_, _| 2.5);
        let rf = tof_correct(&raw, &tiny_grid()).unwrap();
        assert!(rf.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn half_sample_delay_interpolates_half_delta() {
        // Choose sample rate so that one pixel's delay to element 0 is k + 0.5.
        let base = ProbeGeometry { num_elements: 2, ..Default::default() };
        let grid = PixelGrid { num_rows: 1, num_cols: 1, depth_origin_m: 4e-3, ..Default::default() };
        let ex = base.element_x()[0];
        let tau = base.delay_s(grid.x(0), grid.z(0), ex);
        let k = 100usize;
        let geom = ProbeGeometry { sample_rate_hz: (k as f64 + 0.5) / tau, ..base };
        let raw = raw_from(&geom, 300, |t, e| if t == k && e == 0 { 4.0 } else { 0.0 });
        let rf = tof_correct(&raw, &grid).unwrap();
        assert!((rf.pixel(0, 0)[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn out_of_range_delay_is_zero() {
        let geom = small_probe();
        let raw = raw_from(&geom, 10, |_, _| 1.0);
        let rf = tof_correct(&raw, &tiny_grid()).unwrap();
        assert!(rf.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_permutation_commutes() {
        let geom = small_probe();
        let grid = tiny_grid();
        let raw = simulate_rx(&Phantom::point(0.5e-3, 3.05e-3, 1.0), &geom, 400, &SimOptions::default()).unwrap();
        let ch = geom.num_elements;
        let perm: Vec<usize> = (0..ch).rev().collect();
        let pos = geom.element_x();
        let perm_pos: Vec<f64> = perm.iter().map(|&p| pos[p]).collect();
        let src = raw.data();
        let permuted: Vec<f32> = (0..raw.num_time_samples * ch).map(|i| src[(i / ch) * ch + perm[i % ch]]).collect();
        let raw_p =
            RawChannelData::new(geom.clone(), Tensor::from_f32(vec![raw.num_time_samples, ch], permuted).unwrap())
                .unwrap();
        let a = tof_correct(&raw, &grid).unwrap();
        let b = tof_correct_with_positions(&raw_p, &grid, &perm_pos).unwrap();
        for r in 0..grid.num_rows {
            for c in 0..grid.num_cols {
                let pa = a.pixel(r, c);
                let pb = b.pixel(r, c);
                for e in 0..ch {
                    assert_eq!(pb[e], pa[perm[e]]);
                }
            }
        }
    }
}
