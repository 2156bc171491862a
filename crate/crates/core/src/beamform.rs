//! Classical reference beamformers on time-of-flight corrected data:
//! delay-and-sum, subarray/temporal-averaged MVDR, coherent compounding,
//! Hilbert envelope detection and log compression.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::geometry::{EnvelopeImage, PixelGrid, RfVolume};
use crate::tensor::Tensor;

/// Beamsum per pixel, before envelope detection.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformedImage {
    pub grid: PixelGrid,
    pub values: Tensor,
}

impl BeamformedImage {
    pub fn new(grid: PixelGrid, values: Vec<f32>) -> Result<Self> {
        let values = Tensor::from_f32(vec![grid.num_rows, grid.num_cols], values)?;
        Ok(Self { grid, values })
    }

    pub fn from_tensor(grid: PixelGrid, values: Tensor) -> Result<Self> {
        values.expect_f32("beamformed image", &[grid.num_rows, grid.num_cols])?;
        Ok(Self { grid, values })
    }

    pub fn data(&self) -> &[f32] {
        self.values.as_f32().expect("validated float32")
    }
}

pub fn uniform_apodization(n: usize) -> Tensor {
    Tensor::from_f32(vec![n], vec![1.0; n]).expect("n >= 1")
}

/// Symmetric Hann window over the aperture (endpoints excluded so no
/// element gets exactly zero weight).
pub fn hann_apodization(n: usize) -> Tensor {
    let w = (0..n)
        .map(|e| {
            let x = (e as f64 + 1.0) / (n as f64 + 1.0);
            (0.5 - 0.5 * (2.0 * std::f64::consts::PI * x).cos()) as f32
        })
        .collect();
    Tensor::from_f32(vec![n], w).expect("n >= 1")
}

/// Normalized apodized sum across the channel axis.
pub fn das(rf: &RfVolume, apodization: &Tensor) -> Result<BeamformedImage> {
    let ch = rf.num_channels;
    let w = apodization.expect_f32("apodization", &[ch])?;
    let abs_sum: f64 = w.iter().map(|&x| (x as f64).abs()).sum();
    let sum: f64 = w.iter().map(|&x| x as f64).sum();
    if abs_sum == 0.0 || sum == 0.0 {
        return Err(Error::ZeroWeightSum);
    }
    let w: Vec<f64> = w.iter().map(|&x| x as f64 / sum).collect();
    let out: Vec<f32> = rf
        .data()
        .par_chunks(ch)
        .map(|px| px.iter().zip(&w).map(|(&v, &wi)| v as f64 * wi).sum::<f64>() as f32)
        .collect();
    BeamformedImage::new(rf.grid.clone(), out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MvdrParams {
    pub subarray_len: usize,
    pub temporal_half_window: usize,
    pub diagonal_loading: f64,
}

impl Default for MvdrParams {
    fn default() -> Self {
        Self { subarray_len: 48, temporal_half_window: 7, diagonal_loading: 0.01 }
    }
}

impl MvdrParams {
    pub fn validate(&self, num_channels: usize) -> Result<()> {
        if self.subarray_len == 0 || self.subarray_len > num_channels {
            return Err(Error::InvalidConfig(format!(
                "subarray length {} must be in 1..={num_channels}",
                self.subarray_len
            )));
        }
        if !(self.diagonal_loading > 0.0) {
            return Err(Error::InvalidConfig("diagonal loading must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel MVDR solution: the weights and the beamformed value.
#[derive(Debug, Clone, PartialEq)]
pub struct MvdrPixel {
    pub weights: Vec<f64>,
    pub value: f64,
    /// Number of row snapshots averaged (the temporal window after clamping).
    pub snapshots: usize,
}

/// Adaptive MVDR beamformer with spatial (subarray) and temporal averaging
/// of the covariance and diagonal loading proportional to its trace.
pub fn mvdr(rf: &RfVolume, params: &MvdrParams) -> Result<BeamformedImage> {
    params.validate(rf.num_channels)?;
    let grid = &rf.grid;
    let cols = grid.num_cols;
    let rows: Vec<Vec<f32>> = (0..grid.num_rows)
        .into_par_iter()
        .map(|row| {
            (0..cols).map(|col| mvdr_pixel(rf, params, row, col).map(|p| p.value as f32)).collect::<Result<Vec<f32>>>()
        })
        .collect::<Result<_>>()?;
    BeamformedImage::new(grid.clone(), rows.concat())
}

/// Solves MVDR at one pixel.
pub fn mvdr_pixel(rf: &RfVolume, params: &MvdrParams, row: usize, col: usize) -> Result<MvdrPixel> {
    let ch = rf.num_channels;
    let l = params.subarray_len;
    let groups = ch - l + 1;
    let k = params.temporal_half_window;
    let r0 = row.saturating_sub(k);
    let r1 = (row + k).min(rf.grid.num_rows - 1);

    // Full channel covariance summed over the temporal window.
    let mut full = vec![0.0f64; ch * ch];
    for r in r0..=r1 {
        let x = rf.pixel(r, col);
        for a in 0..ch {
            let xa = x[a] as f64;
            if xa == 0.0 {
                continue;
            }
            let line = &mut full[a * ch..(a + 1) * ch];
            for (b, slot) in line.iter_mut().enumerate().skip(a) {
                *slot += xa * x[b] as f64;
            }
        }
    }
    // Subarray averaging: R[a][b] = sum_g full[g + a][g + b], computed from
    // prefix sums along each diagonal of the full matrix.
    let norm = 1.0 / ((r1 - r0 + 1) * groups) as f64;
    let mut cov = DMatrix::<f64>::zeros(l, l);
    for d in 0..l {
        let diag_len = ch - d;
        let mut prefix = vec![0.0f64; diag_len + 1];
        for i in 0..diag_len {
            prefix[i + 1] = prefix[i] + full[i * ch + i + d];
        }
        for a in 0..l - d {
            let v = (prefix[a + groups] - prefix[a]) * norm;
            cov[(a, a + d)] = v;
            cov[(a + d, a)] = v;
        }
    }

    let center = rf.pixel(row, col);
    let mut mean_sub = DVector::<f64>::zeros(l);
    for g in 0..groups {
        for a in 0..l {
            mean_sub[a] += center[g + a] as f64;
        }
    }
    mean_sub /= groups as f64;

    let snapshots = r1 - r0 + 1;
    let trace = cov.trace();
    if trace == 0.0 {
        let weights = vec![1.0 / l as f64; l];
        let value = mean_sub.iter().sum::<f64>() / l as f64;
        return Ok(MvdrPixel { weights, value, snapshots });
    }
    let loading = params.diagonal_loading * trace / l as f64;
    for a in 0..l {
        cov[(a, a)] += loading;
    }
    let chol = cov.cholesky().ok_or(Error::SingularCovariance { row, col })?;
    let ones = DVector::<f64>::from_element(l, 1.0);
    let ria = chol.solve(&ones);
    let denom = ones.dot(&ria);
    if !(denom > 0.0 && denom.is_finite()) {
        return Err(Error::SingularCovariance { row, col });
    }
    let w = ria / denom;
    let value = w.dot(&mean_sub);
    Ok(MvdrPixel { weights: w.iter().copied().collect(), value, snapshots })
}

/// Pixel-wise mean of beamformed images on a shared grid.
pub fn compound(images: &[BeamformedImage]) -> Result<BeamformedImage> {
    let first = images.first().ok_or(Error::EmptyList)?;
    if images.iter().any(|im| im.grid != first.grid) {
        return Err(Error::GridMismatch);
    }
    let n = images.len() as f64;
    let out = (0..first.grid.num_pixels())
        .map(|p| (images.iter().map(|im| im.data()[p] as f64).sum::<f64>() / n) as f32)
        .collect();
    BeamformedImage::new(first.grid.clone(), out)
}

/// Analytic signal of one real sequence via the frequency-domain Hilbert
/// transform, zero-padded to the next power of two. Returns the quadrature
/// (Hilbert) part.
pub fn hilbert(signal: &[f64], planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let n = signal.len();
    let nfft = n.next_power_of_two();
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    buf.resize(nfft, Complex::new(0.0, 0.0));
    planner.plan_fft_forward(nfft).process(&mut buf);
    // h = [1, 2, .., 2, 1 (Nyquist), 0, .., 0]
    for (k, v) in buf.iter_mut().enumerate() {
        let h = if k == 0 || (nfft > 1 && k == nfft / 2) {
            1.0
        } else if k < nfft / 2 {
            2.0
        } else {
            0.0
        };
        *v *= h;
    }
    planner.plan_fft_inverse(nfft).process(&mut buf);
    let scale = 1.0 / nfft as f64;
    buf[..n].iter().map(|c| c.im * scale).collect()
}

/// Envelope detection along depth: I is the beamsum, Q its Hilbert transform.
pub fn envelope(img: &BeamformedImage) -> Result<EnvelopeImage> {
    let grid = &img.grid;
    let (rows, cols) = (grid.num_rows, grid.num_cols);
    if rows < 4 {
        return Err(Error::ShapeMismatch(format!("envelope needs >= 4 rows, got {rows}")));
    }
    let data = img.data();
    let q_cols: Vec<Vec<f64>> = (0..cols)
        .into_par_iter()
        .map_init(FftPlanner::new, |planner, c| {
            let column: Vec<f64> = (0..rows).map(|r| data[r * cols + c] as f64).collect();
            hilbert(&column, planner)
        })
        .collect();
    let mut q = vec![0.0f32; rows * cols];
    for (c, col) in q_cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            q[r * cols + c] = *v as f32;
        }
    }
    EnvelopeImage::from_parts(grid.clone(), data.to_vec(), q)
}

/// 20 log10(mag / max mag), clamped to `[-dynamic_range_db, 0]`.
pub fn log_compress(env: &EnvelopeImage, dynamic_range_db: f64) -> Result<Tensor> {
    if !(dynamic_range_db > 0.0) {
        return Err(Error::InvalidConfig("dynamic range must be positive".into()));
    }
    let mag = env.magnitude();
    let max = mag.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(Error::AllZeroImage);
    }
    let db = mag
        .iter()
        .map(|&m| {
            let v = if m > 0.0 { 20.0 * (m / max).log10() } else { f64::NEG_INFINITY };
            v.clamp(-dynamic_range_db, 0.0) as f32
        })
        .collect();
    Tensor::from_f32(vec![env.grid.num_rows, env.grid.num_cols], db)
}

/// Binary PGM (P5) of a dB image, mapping `[-range, 0]` linearly onto 0..=255.
pub fn to_pgm(db: &Tensor, dynamic_range_db: f64) -> Result<Vec<u8>> {
    let (rows, cols) = match db.dims() {
        [r, c] => (*r, *c),
        d => return Err(Error::ShapeMismatch(format!("pgm needs a 2-D image, got {d:?}"))),
    };
    let data = db.as_f32().ok_or_else(|| Error::InvalidTensor("pgm needs float32 data".into()))?;
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(data.iter().map(|&v| {
        let t = ((v as f64 + dynamic_range_db) / dynamic_range_db).clamp(0.0, 1.0);
        (t * 255.0).round() as u8
    }));
    Ok(out)
}
