//! Image-quality metrics on linear envelope magnitudes: FWHM resolution,
//! contrast ratio, CNR and generalized CNR.

use crate::error::{Error, Result};
use crate::geometry::{EnvelopeImage, PixelGrid};

/// Width between the half-maximum crossings on either side of the global
/// peak, each located by linear interpolation. A flat top counts as one
/// peak spanning the plateau.
pub fn fwhm(profile: &[f64], spacing_m: f64) -> Result<f64> {
    let (peak, max) =
        profile
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best });
    if profile.is_empty() || !(max > 0.0) {
        return Err(Error::NoPeak);
    }
    let half = max / 2.0;
    let mut lo = peak;
    while lo > 0 && profile[lo - 1] == max {
        lo -= 1;
    }
    let mut hi = peak;
    while hi + 1 < profile.len() && profile[hi + 1] == max {
        hi += 1;
    }
    let left = (0..lo)
        .rev()
        .find(|&i| profile[i] < half)
        .map(|i| i as f64 + (half - profile[i]) / (profile[i + 1] - profile[i]))
        .ok_or(Error::NoCrossing("left"))?;
    let right = (hi + 1..profile.len())
        .find(|&i| profile[i] < half)
        .map(|i| i as f64 - (half - profile[i]) / (profile[i - 1] - profile[i]))
        .ok_or(Error::NoCrossing("right"))?;
    Ok((right - left) * spacing_m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegionShape {
    Circle { x_m: f64, z_m: f64, radius_m: f64 },
    Rectangle { x0_m: f64, x1_m: f64, z0_m: f64, z1_m: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionRole {
    TargetIn,
    BackgroundOut,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub name: String,
    pub shape: RegionShape,
    pub role: RegionRole,
}

impl RegionSpec {
    pub fn circle(name: impl Into<String>, x_m: f64, z_m: f64, radius_m: f64, role: RegionRole) -> Self {
        Self { name: name.into(), shape: RegionShape::Circle { x_m, z_m, radius_m }, role }
    }

    pub fn rectangle(name: impl Into<String>, x: (f64, f64), z: (f64, f64), role: RegionRole) -> Self {
        let shape =
            RegionShape::Rectangle { x0_m: x.0.min(x.1), x1_m: x.0.max(x.1), z0_m: z.0.min(z.1), z1_m: z.0.max(z.1) };
        Self { name: name.into(), shape, role }
    }

    pub fn contains(&self, x: f64, z: f64) -> bool {
        match self.shape {
            RegionShape::Circle { x_m, z_m, radius_m } => (x - x_m).powi(2) + (z - z_m).powi(2) <= radius_m * radius_m,
            RegionShape::Rectangle { x0_m, x1_m, z0_m, z1_m } => x >= x0_m && x <= x1_m && z >= z0_m && z <= z1_m,
        }
    }

    /// Row-major indices of the pixels inside the region.
    pub fn pixels(&self, grid: &PixelGrid) -> Vec<usize> {
        let mut out = Vec::new();
        for r in 0..grid.num_rows {
            let z = grid.z(r);
            for c in 0..grid.num_cols {
                if self.contains(grid.x(c), z) {
                    out.push(r * grid.num_cols + c);
                }
            }
        }
        out
    }

    /// Envelope magnitudes inside the region.
    pub fn values(&self, env: &EnvelopeImage) -> Result<Vec<f64>> {
        let mag = env.magnitude();
        let v: Vec<f64> = self.pixels(&env.grid).into_iter().map(|i| mag[i]).collect();
        if v.is_empty() {
            return Err(Error::EmptyRegion(self.name.clone()));
        }
        Ok(v)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
}

fn non_empty(v: &[f64], what: &str) -> Result<()> {
    if v.is_empty() {
        return Err(Error::EmptyRegion(what.to_string()));
    }
    Ok(())
}

/// `|20 log10(mean_in / mean_out)|` in dB.
pub fn contrast_ratio_values(inside: &[f64], outside: &[f64]) -> Result<f64> {
    non_empty(inside, "inside")?;
    non_empty(outside, "outside")?;
    let (mi, mo) = (mean(inside), mean(outside));
    for (m, what) in [(mi, "inside"), (mo, "outside")] {
        if m <= 0.0 {
            return Err(Error::ZeroMean(what.to_string()));
        }
    }
    Ok((20.0 * (mi / mo).log10()).abs())
}

/// `|mean_in - mean_out| / sqrt(var_in + var_out)`.
pub fn cnr_values(inside: &[f64], outside: &[f64]) -> Result<f64> {
    non_empty(inside, "inside")?;
    non_empty(outside, "outside")?;
    let v = variance(inside) + variance(outside);
    if v <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((mean(inside) - mean(outside)).abs() / v.sqrt())
}

/// `1 - sum_b min(h_in(b), h_out(b))` with `num_bins` equal-width bins over
/// the pooled value range.
pub fn gcnr_values(inside: &[f64], outside: &[f64], num_bins: usize) -> Result<f64> {
    non_empty(inside, "inside")?;
    non_empty(outside, "outside")?;
    if num_bins < 2 {
        return Err(Error::InvalidConfig("gCNR needs at least 2 bins".into()));
    }
    let all = inside.iter().chain(outside);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(0.0);
    }
    let bin = |x: f64| (((x - lo) / (hi - lo) * num_bins as f64) as usize).min(num_bins - 1);
    Ok(overlap_complement(inside, outside, num_bins, bin))
}

/// gCNR with bins taken over pooled ranks instead of values, which makes it
/// invariant to any strictly increasing intensity map.
pub fn gcnr_rank_values(inside: &[f64], outside: &[f64], num_bins: usize) -> Result<f64> {
    non_empty(inside, "inside")?;
    non_empty(outside, "outside")?;
    if num_bins < 2 {
        return Err(Error::InvalidConfig("gCNR needs at least 2 bins".into()));
    }
    let mut pooled: Vec<f64> = inside.iter().chain(outside).copied().collect();
    pooled.sort_by(f64::total_cmp);
    pooled.dedup();
    if pooled.len() < 2 {
        return Ok(0.0);
    }
    let n = pooled.len();
    let bin = |x: f64| {
        let rank = pooled.partition_point(|&p| p < x);
        (rank * num_bins / n).min(num_bins - 1)
    };
    Ok(overlap_complement(inside, outside, num_bins, bin))
}

fn overlap_complement(a: &[f64], b: &[f64], num_bins: usize, bin: impl Fn(f64) -> usize) -> f64 {
    let mut ha = vec![0.0; num_bins];
    let mut hb = vec![0.0; num_bins];
    for &x in a {
        ha[bin(x)] += 1.0 / a.len() as f64;
    }
    for &x in b {
        hb[bin(x)] += 1.0 / b.len() as f64;
    }
    let overlap: f64 = ha.iter().zip(&hb).map(|(x, y)| x.min(*y)).sum();
    (1.0 - overlap).clamp(0.0, 1.0)
}

pub const DEFAULT_GCNR_BINS: usize = 256;

pub fn contrast_ratio(env: &EnvelopeImage, inside: &RegionSpec, outside: &RegionSpec) -> Result<f64> {
    contrast_ratio_values(&inside.values(env)?, &outside.values(env)?)
}

pub fn cnr(env: &EnvelopeImage, inside: &RegionSpec, outside: &RegionSpec) -> Result<f64> {
    cnr_values(&inside.values(env)?, &outside.values(env)?)
}

pub fn gcnr(env: &EnvelopeImage, inside: &RegionSpec, outside: &RegionSpec, num_bins: usize) -> Result<f64> {
    gcnr_values(&inside.values(env)?, &outside.values(env)?, num_bins)
}

/// Magnitudes in dB relative to the row peak, along the row nearest to
/// `depth_m`.
pub fn lateral_profile(env: &EnvelopeImage, depth_m: f64) -> Result<Vec<f64>> {
    let row = env.grid.row_of(depth_m).ok_or(Error::DepthOutOfRange(depth_m))?;
    let cols = env.grid.num_cols;
    let mag = env.magnitude();
    let line = &mag[row * cols..(row + 1) * cols];
    let max = line.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(Error::AllZeroImage);
    }
    Ok(line.iter().map(|&m| 20.0 * (m / max).max(1e-300).log10()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionReport {
    pub peak_row: usize,
    pub peak_col: usize,
    pub axial_fwhm_mm: f64,
    pub lateral_fwhm_mm: f64,
}

/// Finds the brightest pixel within `window_m` of `(x_m, z_m)` and measures
/// the FWHM of the column (axial) and row (lateral) through it.
pub fn point_resolution(env: &EnvelopeImage, x_m: f64, z_m: f64, window_m: f64) -> Result<ResolutionReport> {
    let g = &env.grid;
    let mag = env.magnitude();
    let mut best: Option<(usize, usize, f64)> = None;
    for r in 0..g.num_rows {
        if (g.z(r) - z_m).abs() > window_m {
            continue;
        }
        for c in 0..g.num_cols {
            if (g.x(c) - x_m).abs() > window_m {
                continue;
            }
            let v = mag[r * g.num_cols + c];
            if best.is_none_or(|b| v > b.2) {
                best = Some((r, c, v));
            }
        }
    }
    let (r, c, v) = best.ok_or(Error::NoPeak)?;
    if v <= 0.0 {
        return Err(Error::NoPeak);
    }
    let row: Vec<f64> = mag[r * g.num_cols..(r + 1) * g.num_cols].to_vec();
    let col: Vec<f64> = (0..g.num_rows).map(|rr| mag[rr * g.num_cols + c]).collect();
    Ok(ResolutionReport {
        peak_row: r,
        peak_col: c,
        axial_fwhm_mm: local_fwhm(&col, r, g.row_spacing_m)? * 1e3,
        lateral_fwhm_mm: local_fwhm(&row, c, g.col_spacing_m)? * 1e3,
    })
}

/// FWHM of the lobe around `peak`, ignoring brighter structures elsewhere.
fn local_fwhm(profile: &[f64], peak: usize, spacing_m: f64) -> Result<f64> {
    let half = profile[peak] / 2.0;
    let lo = (0..peak).rev().find(|&i| profile[i] < half).unwrap_or(0);
    let hi = (peak + 1..profile.len()).find(|&i| profile[i] < half).unwrap_or(profile.len() - 1);
    fwhm(&profile[lo..=hi], spacing_m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triangle_fwhm() {
        let p: Vec<f64> = (0..=20).map(|i| 1.0 - (i as f64 - 10.0).abs() / 10.0).collect();
        assert!((fwhm(&p, 0.1e-3).unwrap() - 1.0e-3).abs() < 1e-12);
    }

    #[test]
    fn gaussian_fwhm() {
        let p: Vec<f64> = (0..81).map(|i| (-((i as f64 - 40.0) / 4.0).powi(2) / 2.0).exp()).collect();
        let want = 2.0 * 4.0 * (2.0 * 2f64.ln()).sqrt();
        assert!((fwhm(&p, 1.0).unwrap() - want).abs() < 0.1);
    }

    #[test]
    fn plateau_and_invariances() {
        let p = [0.0, 0.2, 1.0, 1.0, 0.2, 0.0];
        let w = fwhm(&p, 1.0).unwrap();
        assert!(w >= 1.0);
        let scaled: Vec<f64> = p.iter().map(|x| x * 7.5).collect();
        assert!((fwhm(&scaled, 1.0).unwrap() - w).abs() < 1e-12);
        let rev: Vec<f64> = p.iter().rev().copied().collect();
        assert!((fwhm(&rev, 1.0).unwrap() - w).abs() < 1e-12);
    }

    #[test]
    fn fwhm_errors() {
        assert!(matches!(fwhm(&[], 1.0), Err(Error::NoPeak)));
        assert!(matches!(fwhm(&[0.0, 0.0], 1.0), Err(Error::NoPeak)));
        assert!(matches!(fwhm(&[1.0, 0.9, 0.1], 1.0), Err(Error::NoCrossing("left"))));
    }

    #[test]
    fn contrast_examples() {
        let a = [2.0, 2.0, 2.0];
        assert_eq!(contrast_ratio_values(&a, &a).unwrap(), 0.0);
        assert!((contrast_ratio_values(&[10.0], &[1.0]).unwrap() - 20.0).abs() < 1e-12);
        assert!(matches!(contrast_ratio_values(&[0.0], &[1.0]), Err(Error::ZeroMean(_))));
        assert!(matches!(contrast_ratio_values(&[], &[1.0]), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn cnr_examples() {
        let s = 0.5f64.sqrt() * 3.0;
        let a = [5.0 - s, 5.0 + s];
        let b = [2.0 - s, 2.0 + s];
        assert!((cnr_values(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(cnr_values(&a, &a).unwrap(), 0.0);
        assert!(matches!(cnr_values(&[1.0, 1.0], &[2.0, 2.0]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn gcnr_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(gcnr_values(&a, &a, 256).unwrap(), 0.0);
        assert_eq!(gcnr_values(&[0.0, 0.1], &[5.0, 6.0], 256).unwrap(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let u1: Vec<f64> = (0..200_000).map(|_| rng.random_range(0.0..1.0)).collect();
        let u2: Vec<f64> = (0..200_000).map(|_| rng.random_range(0.5..1.5)).collect();
        assert!((gcnr_values(&u1, &u2, 256).unwrap() - 0.5).abs() < 0.03);
    }

    #[test]
    fn metric_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a: Vec<f64> = (0..500).map(|_| rng.random_range(0.1..1.0)).collect();
        let b: Vec<f64> = (0..500).map(|_| rng.random_range(0.6..2.0)).collect();
        let k = 3.7;
        let ak: Vec<f64> = a.iter().map(|x| x * k).collect();
        let bk: Vec<f64> = b.iter().map(|x| x * k).collect();
        assert!((contrast_ratio_values(&a, &b).unwrap() - contrast_ratio_values(&ak, &bk).unwrap()).abs() < 1e-9);
        assert!((cnr_values(&a, &b).unwrap() - cnr_values(&ak, &bk).unwrap()).abs() < 1e-9);
        let g = gcnr_values(&a, &b, 64).unwrap();
        assert!((0.0..=1.0).contains(&g));
        let aff = |v: &[f64]| v.iter().map(|x| 2.0 * x + 5.0).collect::<Vec<_>>();
        assert!((gcnr_values(&aff(&a), &aff(&b), 64).unwrap() - g).abs() < 1e-9);
        let r = gcnr_rank_values(&a, &b, 64).unwrap();
        let cube = |v: &[f64]| v.iter().map(|x| x.powi(3)).collect::<Vec<_>>();
        assert_eq!(gcnr_rank_values(&cube(&a), &cube(&b), 64).unwrap(), r);
    }

    fn image(grid: PixelGrid, f: impl Fn(usize, usize) -> f32) -> EnvelopeImage {
        let i = (0..grid.num_pixels()).map(|k| f(k / grid.num_cols, k % grid.num_cols)).collect();
        let q = vec![0.0; grid.num_pixels()];
        EnvelopeImage::from_parts(grid, i, q).unwrap()
    }

    #[test]
    fn region_metrics_on_images() {
        let grid = PixelGrid { num_rows: 40, num_cols: 40, row_spacing_m: 0.3e-3, ..Default::default() };
        let cx = 0.0;
        let cz = grid.z(20);
        let env = image(grid.clone(), |r, c| if (r as f64 - 20.0).hypot(c as f64 - 19.5) < 6.0 { 0.1 } else { 1.0 });
        let inside = RegionSpec::circle("cyst", cx, cz, 3.0 * grid.col_spacing_m, RegionRole::TargetIn);
        let outside =
            RegionSpec::rectangle("bg", (grid.x(0), grid.x(5)), (grid.z(0), grid.z(39)), RegionRole::BackgroundOut);
        assert!((contrast_ratio(&env, &inside, &outside).unwrap() - 20.0).abs() < 1e-5);
        assert_eq!(gcnr(&env, &inside, &outside, DEFAULT_GCNR_BINS).unwrap(), 1.0);
        let nowhere = RegionSpec::circle("none", 1.0, 1.0, 1e-6, RegionRole::TargetIn);
        assert!(matches!(contrast_ratio(&env, &nowhere, &outside), Err(Error::EmptyRegion(_))));
    }

    #[test]
    fn lateral_profile_cases() {
        let grid = PixelGrid { num_rows: 10, num_cols: 9, ..Default::default() };
        let flat = image(grid.clone(), |_, _| 2.0);
        assert!(lateral_profile(&flat, grid.z(4)).unwrap().iter().all(|&d| d == 0.0));
        let point = image(grid.clone(), |r, c| if r == 4 && c == 6 { 1.0 } else { 0.01 });
        let p = lateral_profile(&point, grid.z(4)).unwrap();
        let peak = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(peak, 6);
        assert!(matches!(lateral_profile(&flat, 1.0), Err(Error::DepthOutOfRange(_))));
    }
}
