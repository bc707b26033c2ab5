//! Uniform periodic grids on `[-L, L)^d`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest total point count we are willing to allocate (2^27 complex values, 2 GiB).
pub const MAX_POINTS: usize = 1 << 27;

/// A `d`-dimensional periodic box `[-L, L)^d` with `N` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridSpec", into = "GridSpec")]
pub struct SpatialGrid {
    dim: usize,
    n: usize,
    half_width: f64,
}

/// Plain serialized form of a grid; validated on conversion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dim: usize,
    pub n: usize,
    pub half_width: f64,
}

impl TryFrom<GridSpec> for SpatialGrid {
    type Error = Error;

    fn try_from(spec: GridSpec) -> Result<Self> {
        SpatialGrid::new(spec.dim, spec.n, spec.half_width)
    }
}

impl From<SpatialGrid> for GridSpec {
    fn from(g: SpatialGrid) -> Self {
        GridSpec {
            dim: g.dim,
            n: g.n,
            half_width: g.half_width,
        }
    }
}

impl SpatialGrid {
    pub fn new(dim: usize, n: usize, half_width: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension {dim} not in 1..=3")));
        }
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "points per axis {n} must be a power of two >= 8"
            )));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "half-width {half_width} must be positive"
            )));
        }
        let total = (0..dim).try_fold(1usize, |acc, _| acc.checked_mul(n));
        match total {
            Some(t) if t <= MAX_POINTS => {}
            _ => {
                return Err(Error::InvalidGrid(format!(
                    "{n}^{dim} points exceeds the allocation cap"
                )))
            }
        }
        Ok(Self { dim, n, half_width })
    }

    pub fn one_d(n: usize, half_width: f64) -> Result<Self> {
        Self::new(1, n, half_width)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Points per axis.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    /// Total number of grid points, `N^d`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Quadrature weight `h^d`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn volume(&self) -> f64 {
        (2.0 * self.half_width).powi(self.dim as i32)
    }

    /// Coordinates along one axis: `-L + i h`.
    pub fn axis(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.n)
            .map(|i| -self.half_width + i as f64 * h)
            .collect()
    }

    /// Angular wavenumbers along one axis in FFT order.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let n = self.n as i64;
        let dk = std::f64::consts::PI / self.half_width;
        (0..n)
            .map(|i| {
                let j = if i < n / 2 { i } else { i - n };
                j as f64 * dk
            })
            .collect()
    }

    /// Multi-index of a flat (row-major) index; unused trailing axes are zero.
    pub fn multi_index(&self, flat: usize) -> [usize; 3] {
        let mut idx = [0usize; 3];
        let mut rem = flat;
        for a in (0..self.dim).rev() {
            idx[a] = rem % self.n;
            rem /= self.n;
        }
        idx
    }

    /// Cartesian position of a flat index; unused axes are zero.
    pub fn position(&self, flat: usize) -> [f64; 3] {
        let h = self.spacing();
        let idx = self.multi_index(flat);
        let mut x = [0.0; 3];
        for a in 0..self.dim {
            x[a] = -self.half_width + idx[a] as f64 * h;
        }
        x
    }

    /// `|x|^2` at every grid point.
    pub fn radius_squared(&self) -> Vec<f64> {
        (0..self.len())
            .map(|i| self.position(i).iter().map(|c| c * c).sum())
            .collect()
    }

    /// `|k|^2` at every Fourier index.
    pub fn k_squared(&self) -> Vec<f64> {
        let k = self.wavenumbers();
        (0..self.len())
            .map(|i| {
                let idx = self.multi_index(i);
                (0..self.dim).map(|a| k[idx[a]] * k[idx[a]]).sum()
            })
            .collect()
    }

    /// Same spacing and dimension (fields can be restricted or embedded).
    pub fn same_spacing(&self, other: &SpatialGrid) -> bool {
        self.dim == other.dim && (self.spacing() - other.spacing()).abs() <= 1e-12 * self.spacing()
    }

    /// Hash-friendly key.
    pub(crate) fn key(&self) -> (usize, usize, u64) {
        (self.dim, self.n, self.half_width.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_parameters() {
        assert!(SpatialGrid::new(1, 12, 1.0).is_err());
        assert!(SpatialGrid::new(1, 4, 1.0).is_err());
        assert!(SpatialGrid::new(0, 16, 1.0).is_err());
        assert!(SpatialGrid::new(4, 16, 1.0).is_err());
        assert!(SpatialGrid::new(1, 16, 0.0).is_err());
        assert!(SpatialGrid::new(1, 16, f64::NAN).is_err());
        assert!(SpatialGrid::new(3, 1 << 12, 1.0).is_err());
    }

    #[test]
    fn spacing_and_positions() {
        let g = SpatialGrid::new(2, 8, 2.0).unwrap();
        assert_eq!(g.spacing(), 0.5);
        assert_eq!(g.len(), 64);
        assert_eq!(g.position(0), [-2.0, -2.0, 0.0]);
        assert_eq!(g.position(9), [-1.5, -1.5, 0.0]);
        assert_eq!(g.multi_index(63), [7, 7, 0]);
    }

    #[test]
    fn wavenumbers_follow_fft_order() {
        let g = SpatialGrid::one_d(8, std::f64::consts::PI).unwrap();
        assert_eq!(
            g.wavenumbers(),
            vec![0.0, 1.0, 2.0, 3.0, -4.0, -3.0, -2.0, -1.0]
        );
    }

    #[test]
    fn serde_validates() {
        let bad = r#"{"dim":1,"n":10,"half_width":1.0}"#;
        assert!(serde_json::from_str::<SpatialGrid>(bad).is_err());
        let good = r#"{"dim":1,"n":16,"half_width":1.0}"#;
        let g: SpatialGrid = serde_json::from_str(good).unwrap();
        assert_eq!(g.n(), 16);
    }
}
