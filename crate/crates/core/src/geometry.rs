//! Probe and image geometry plus the RF and envelope data types built on it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear-array probe with a plane-wave transmit.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGeometry {
    pub num_elements: usize,
    pub pitch_m: f64,
    pub speed_of_sound_mps: f64,
    pub sample_rate_hz: f64,
    /// Transmit steering angle; 0 is the non-steered plane wave.
    pub transmit_angle_rad: f64,
}

impl Default for ProbeGeometry {
    fn default() -> Self {
        Self {
            num_elements: 128,
            pitch_m: 0.3e-3,
            speed_of_sound_mps: 1540.0,
            sample_rate_hz: 31.25e6,
            transmit_angle_rad: 0.0,
        }
    }
}

impl ProbeGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.num_elements == 0 {
            return Err(Error::InvalidConfig("probe needs at least one element".into()));
        }
        for (name, v) in [
            ("pitch_m", self.pitch_m),
            ("speed_of_sound_mps", self.speed_of_sound_mps),
            ("sample_rate_hz", self.sample_rate_hz),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.transmit_angle_rad.is_finite() {
            return Err(Error::InvalidConfig("transmit angle must be finite".into()));
        }
        Ok(())
    }

    /// Lateral element positions, centered on the array midpoint.
    pub fn element_x(&self) -> Vec<f64> {
        let mid = (self.num_elements as f64 - 1.0) / 2.0;
        (0..self.num_elements).map(|e| (e as f64 - mid) * self.pitch_m).collect()
    }

    pub fn with_angle(&self, angle_rad: f64) -> Self {
        Self { transmit_angle_rad: angle_rad, ..self.clone() }
    }

    /// Two-way delay in seconds from the plane-wave transmit to point
    /// `(x, z)` and back to an element at lateral position `element_x`.
    pub fn delay_s(&self, x: f64, z: f64, element_x: f64) -> f64 {
        let (s, c) = self.transmit_angle_rad.sin_cos();
        let tx = z * c + x * s;
        let rx = ((x - element_x).powi(2) + z * z).sqrt();
        (tx + rx) / self.speed_of_sound_mps
    }
}

/// Image pixel lattice: rows run along depth, columns laterally and are
/// centered on the probe axis.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    pub num_rows: usize,
    pub num_cols: usize,
    pub row_spacing_m: f64,
    pub col_spacing_m: f64,
    pub depth_origin_m: f64,
}

impl Default for PixelGrid {
    fn default() -> Self {
        // One RF sample of two-way travel per row at the default probe.
        Self {
            num_rows: 368,
            num_cols: 128,
            row_spacing_m: 1540.0 / (2.0 * 31.25e6),
            col_spacing_m: 0.3e-3,
            depth_origin_m: 5e-3,
        }
    }
}

impl PixelGrid {
    pub fn validate(&self) -> Result<()> {
        if self.num_rows == 0 || self.num_cols == 0 {
            return Err(Error::InvalidConfig("grid needs at least one row and column".into()));
        }
        if !(self.row_spacing_m > 0.0 && self.col_spacing_m > 0.0) {
            return Err(Error::InvalidConfig("grid spacings must be positive".into()));
        }
        if !self.depth_origin_m.is_finite() {
            return Err(Error::InvalidConfig("depth origin must be finite".into()));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.num_rows * self.num_cols
    }

    pub fn x(&self, col: usize) -> f64 {
        (col as f64 - (self.num_cols as f64 - 1.0) / 2.0) * self.col_spacing_m
    }

    pub fn z(&self, row: usize) -> f64 {
        self.depth_origin_m + row as f64 * self.row_spacing_m
    }

    /// Nearest column to lateral position `x`, if inside the grid.
    pub fn col_of(&self, x: f64) -> Option<usize> {
        let c = (x / self.col_spacing_m + (self.num_cols as f64 - 1.0) / 2.0).round();
        (c >= 0.0 && c < self.num_cols as f64).then_some(c as usize)
    }

    /// Nearest row to depth `z`, if inside the grid.
    pub fn row_of(&self, z: f64) -> Option<usize> {
        let r = ((z - self.depth_origin_m) / self.row_spacing_m).round();
        (r >= 0.0 && r < self.num_rows as f64).then_some(r as usize)
    }

    pub fn max_depth_m(&self) -> f64 {
        self.z(self.num_rows - 1)
    }
}

/// Time-of-flight corrected RF cube, `[rows, cols, channels]` with the
/// channel axis innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct RfVolume {
    pub grid: PixelGrid,
    pub num_channels: usize,
    pub samples: Tensor,
}

impl RfVolume {
    pub fn new(grid: PixelGrid, num_channels: usize, samples: Tensor) -> Result<Self> {
        let want = [grid.num_rows, grid.num_cols, num_channels];
        if samples.dims() != want {
            return Err(Error::ShapeMismatch(format!(
                "rf volume dims {:?} do not match grid/channels {want:?}",
                samples.dims()
            )));
        }
        if samples.as_f32().is_none() {
            return Err(Error::InvalidTensor("rf volume must be float32".into()));
        }
        Ok(Self { grid, num_channels, samples })
    }

    /// Wraps a `[rows, cols, channels]` tensor, inferring the channel count.
    pub fn from_tensor(grid: PixelGrid, samples: Tensor) -> Result<Self> {
        let ch = match samples.dims() {
            [_, _, c] => *c,
            d => return Err(Error::ShapeMismatch(format!("rf tensor must be 3-D, got {d:?}"))),
        };
        Self::new(grid, ch, samples)
    }

    pub fn data(&self) -> &[f32] {
        self.samples.as_f32().expect("validated float32")
    }

    /// Channel vector at one pixel.
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let ch = self.num_channels;
        let start = (row * self.grid.num_cols + col) * ch;
        &self.data()[start..start + ch]
    }
}

/// Per-pixel in-phase and quadrature pair.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeImage {
    pub grid: PixelGrid,
    pub i_part: Tensor,
    pub q_part: Tensor,
}

impl EnvelopeImage {
    pub fn new(grid: PixelGrid, i_part: Tensor, q_part: Tensor) -> Result<Self> {
        let want = [grid.num_rows, grid.num_cols];
        for (name, t) in [("i_part", &i_part), ("q_part", &q_part)] {
            if t.dims() != want {
                return Err(Error::ShapeMismatch(format!("{name} dims {:?}, grid wants {want:?}", t.dims())));
            }
            if t.as_f32().is_none() {
                return Err(Error::InvalidTensor(format!("{name} must be float32")));
            }
        }
        Ok(Self { grid, i_part, q_part })
    }

    pub fn from_parts(grid: PixelGrid, i: Vec<f32>, q: Vec<f32>) -> Result<Self> {
        let dims = vec![grid.num_rows, grid.num_cols];
        let i = Tensor::from_f32(dims.clone(), i)?;
        let q = Tensor::from_f32(dims, q)?;
        Self::new(grid, i, q)
    }

    pub fn i(&self) -> &[f32] {
        self.i_part.as_f32().expect("validated float32")
    }

    pub fn q(&self) -> &[f32] {
        self.q_part.as_f32().expect("validated float32")
    }

    /// sqrt(i^2 + q^2) per pixel, row-major.
    pub fn magnitude(&self) -> Vec<f64> {
        self.i().iter().zip(self.q()).map(|(&i, &q)| (i as f64).hypot(q as f64)).collect()
    }

    /// Stacks I and Q into one `[2, rows, cols]` tensor for file storage.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.i().to_vec();
        data.extend_from_slice(self.q());
        Tensor::from_f32(vec![2, self.grid.num_rows, self.grid.num_cols], data).expect("consistent dims")
    }

    pub fn from_tensor(grid: PixelGrid, t: &Tensor) -> Result<Self> {
        let want = [2, grid.num_rows, grid.num_cols];
        let data = t.expect_f32("envelope tensor", &want)?;
        let n = grid.num_pixels();
        Self::from_parts(grid, data[..n].to_vec(), data[n..].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_positions_are_centered() {
        let g = ProbeGeometry { num_elements: 4, pitch_m: 1.0, ..Default::default() };
        assert_eq!(g.element_x(), vec![-1.5, -0.5, 0.5, 1.5]);
    }

    #[test]
    fn on_axis_delay_is_two_way() {
        let g = ProbeGeometry::default();
        let t = g.delay_s(0.0, 0.02, 0.0);
        assert!((t - 0.04 / 1540.0).abs() < 1e-15);
    }

    #[test]
    fn grid_lookup_inverts_positions() {
        let g = PixelGrid { num_rows: 10, num_cols: 9, ..Default::default() };
        for c in 0..9 {
            assert_eq!(g.col_of(g.x(c)), Some(c));
        }
        assert_eq!(g.row_of(g.z(7)), Some(7));
        assert_eq!(g.row_of(g.z(0) - 1.0), None);
    }

    #[test]
    fn rejects_bad_geometry() {
        let g = ProbeGeometry { pitch_m: 0.0, ..Default::default() };
        assert!(g.validate().is_err());
        let g = PixelGrid { row_spacing_m: -1.0, ..Default::default() };
        assert!(g.validate().is_err());
    }
}
