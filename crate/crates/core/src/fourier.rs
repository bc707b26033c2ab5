//! Multi-dimensional FFTs on a [`SpatialGrid`].

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::grid::SpatialGrid;

type C64 = Complex64;

/// Cached FFT plans and wavenumber tables for one grid.
pub struct FourierOps {
    grid: SpatialGrid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    k2: Vec<f64>,
    scratch_len: usize,
}

impl std::fmt::Debug for FourierOps {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FourierOps")
            .field("grid", &self.grid)
            .finish()
    }
}

type PlanCache = Mutex<HashMap<(usize, usize, u64), Arc<FourierOps>>>;

/// Shared plans for `grid`, built on first use.
pub fn ops_for(grid: &SpatialGrid) -> Arc<FourierOps> {
    static CACHE: OnceLock<PlanCache> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut map = cache.lock().unwrap_or_else(|e| e.into_inner());
    map.entry(grid.key())
        .or_insert_with(|| Arc::new(FourierOps::new(*grid)))
        .clone()
}

impl FourierOps {
    pub fn new(grid: SpatialGrid) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(grid.n());
        let inv = planner.plan_fft_inverse(grid.n());
        let scratch_len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len())
            .max(grid.n());
        let k2 = grid.k_squared();
        Self {
            grid,
            fwd,
            inv,
            k2,
            scratch_len,
        }
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// `|k|^2` in FFT index order.
    pub fn k_squared(&self) -> &[f64] {
        &self.k2
    }

    /// Scratch buffer large enough for [`Self::forward_with`] and [`Self::inverse_with`].
    pub fn make_scratch(&self) -> Vec<C64> {
        vec![C64::new(0.0, 0.0); 2 * self.scratch_len]
    }

    /// Unnormalized forward transform.
    pub fn forward(&self, data: &mut [C64]) {
        let mut s = self.make_scratch();
        self.forward_with(data, &mut s);
    }

    /// Inverse transform including the `1/N^d` factor.
    pub fn inverse(&self, data: &mut [C64]) {
        let mut s = self.make_scratch();
        self.inverse_with(data, &mut s);
    }

    pub fn forward_with(&self, data: &mut [C64], scratch: &mut [C64]) {
        self.transform(&*self.fwd, data, scratch);
    }

    pub fn inverse_with(&self, data: &mut [C64], scratch: &mut [C64]) {
        self.transform(&*self.inv, data, scratch);
        let s = 1.0 / data.len() as f64;
        for z in data.iter_mut() {
            *z *= s;
        }
    }

    fn transform(&self, plan: &dyn Fft<f64>, data: &mut [C64], scratch: &mut [C64]) {
        let n = self.grid.n();
        let dim = self.grid.dim();
        assert_eq!(
            data.len(),
            self.grid.len(),
            "field length does not match grid"
        );
        assert!(scratch.len() >= 2 * self.scratch_len, "scratch too small");
        let (line, work) = scratch.split_at_mut(self.scratch_len);
        let work = &mut work[..plan.get_inplace_scratch_len()];

        // Last axis is contiguous.
        plan.process_with_scratch(data, work);

        // Remaining axes: gather each strided line, transform, scatter.
        for axis in (0..dim - 1).rev() {
            let stride = n.pow((dim - 1 - axis) as u32);
            let block = stride * n;
            let line = &mut line[..n];
            for start in (0..data.len()).step_by(block) {
                for off in 0..stride {
                    let base = start + off;
                    for (j, slot) in line.iter_mut().enumerate() {
                        *slot = data[base + j * stride];
                    }
                    plan.process_with_scratch(line, work);
                    for (j, v) in line.iter().enumerate() {
                        data[base + j * stride] = *v;
                    }
                }
            }
        }
    }

    /// Multiply by a real symbol in Fourier space: `F^{-1}[m(k) F f]`.
    pub fn apply_symbol(&self, data: &mut [C64], symbol: impl Fn(f64) -> C64, scratch: &mut [C64]) {
        self.forward_with(data, scratch);
        for (z, &k2) in data.iter_mut().zip(&self.k2) {
            *z *= symbol(k2);
        }
        self.inverse_with(data, scratch);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft_2d(g: &SpatialGrid, data: &[C64]) -> Vec<C64> {
        let n = g.n();
        let mut out = vec![C64::new(0.0, 0.0); n * n];
        for a in 0..n {
            for b in 0..n {
                let mut acc = C64::new(0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        let ph = -2.0 * std::f64::consts::PI * ((a * i + b * j) as f64) / n as f64;
                        acc += data[i * n + j] * C64::from_polar(1.0, ph);
                    }
                }
                out[a * n + b] = acc;
            }
        }
        out
    }

    #[test]
    fn two_d_matches_naive_dft() {
        let g = SpatialGrid::new(2, 8, 1.0).unwrap();
        let data: Vec<C64> = (0..64)
            .map(|i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let expect = naive_dft_2d(&g, &data);
        let mut got = data.clone();
        let ops = FourierOps::new(g);
        ops.forward(&mut got);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).norm() < 1e-10);
        }
        ops.inverse(&mut got);
        for (a, b) in got.iter().zip(&data) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn three_d_round_trip() {
        let g = SpatialGrid::new(3, 8, 2.0).unwrap();
        let data: Vec<C64> = (0..g.len())
            .map(|i| C64::new(i as f64, -(i as f64).sqrt()))
            .collect();
        let ops = ops_for(&g);
        let mut w = data.clone();
        ops.forward(&mut w);
        ops.inverse(&mut w);
        for (a, b) in w.iter().zip(&data) {
            assert!((a - b).norm() < 1e-9);
        }
    }
}
