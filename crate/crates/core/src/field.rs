//! Complex fields on a grid, norms, inner products and the spectral Laplacian.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::ops_for;
use crate::grid::SpatialGrid;

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);

/// Exponent `r0` of the weights `<x>^{±r0}`, `<x> = (1+|x|^2)^{1/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct WeightedNormSpec {
    r0: f64,
}

impl WeightedNormSpec {
    pub fn new(r0: f64) -> Result<Self> {
        if !(r0.is_finite() && r0 > 3.0) {
            return Err(Error::InvalidArgument(format!(
                "weight exponent {r0} must exceed 3"
            )));
        }
        Ok(Self { r0 })
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }
}

impl Default for WeightedNormSpec {
    fn default() -> Self {
        Self { r0: 4.0 }
    }
}

impl TryFrom<f64> for WeightedNormSpec {
    type Error = Error;
    fn try_from(r0: f64) -> Result<Self> {
        Self::new(r0)
    }
}

impl From<WeightedNormSpec> for f64 {
    fn from(w: WeightedNormSpec) -> f64 {
        w.r0
    }
}

/// Sign of the weight exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSign {
    /// `<x>^{+r0}`: the localized-data norm.
    Growing,
    /// `<x>^{-r0}`: the local norm `L^2_loc`.
    Decaying,
}

/// A complex amplitude at every point of a grid (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    grid: SpatialGrid,
    values: Vec<C64>,
}

impl ComplexField {
    pub fn new(grid: SpatialGrid, values: Vec<C64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "{} values for a grid of {} points",
                values.len(),
                grid.len()
            )));
        }
        if values
            .iter()
            .any(|z| !(z.re.is_finite() && z.im.is_finite()))
        {
            return Err(Error::InvalidArgument("non-finite field value".into()));
        }
        Ok(Self { grid, values })
    }

    /// Wraps values without the finiteness scan; caller guarantees the length.
    pub(crate) fn from_vec_unchecked(grid: SpatialGrid, values: Vec<C64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn zeros(grid: SpatialGrid) -> Self {
        Self {
            grid,
            values: vec![ZERO; grid.len()],
        }
    }

    /// Samples `f(x)` at every grid point.
    pub fn from_fn(grid: SpatialGrid, f: impl Fn([f64; 3]) -> C64) -> Self {
        let values = (0..grid.len()).map(|i| f(grid.position(i))).collect();
        Self { grid, values }
    }

    pub fn from_real(grid: SpatialGrid, re: &[f64]) -> Result<Self> {
        Self::new(grid, re.iter().map(|&r| C64::new(r, 0.0)).collect())
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn values(&self) -> &[C64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [C64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<C64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values
            .iter()
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }

    fn check_grid(&self, other: &ComplexField) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    pub fn norm_lp(&self, p: f64) -> Result<f64> {
        if p.is_nan() || p < 1.0 {
            return Err(Error::InvalidArgument(format!("p = {p} must be >= 1")));
        }
        if p.is_infinite() {
            return Ok(self.max_abs());
        }
        let dv = self.grid.cell_volume();
        let s: f64 = if p == 2.0 {
            self.values.iter().map(|z| z.norm_sqr()).sum()
        } else {
            self.values.iter().map(|z| z.norm().powf(p)).sum()
        };
        Ok((dv * s).powf(1.0 / p))
    }

    pub fn norm_l2(&self) -> f64 {
        (self.grid.cell_volume() * self.values.iter().map(|z| z.norm_sqr()).sum::<f64>()).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `||<x>^{±r0} f||_{L^2}`.
    pub fn norm_weighted(&self, w: WeightedNormSpec, sign: WeightSign) -> f64 {
        let e = match sign {
            WeightSign::Growing => w.r0,
            WeightSign::Decaying => -w.r0,
        };
        let s: f64 = self
            .values
            .iter()
            .enumerate()
            .map(|(i, z)| {
                let r2: f64 = self.grid.position(i).iter().map(|c| c * c).sum();
                (1.0 + r2).powf(e) * z.norm_sqr()
            })
            .sum();
        (self.grid.cell_volume() * s).sqrt()
    }

    /// Local norm `||<x>^{-4} f||_{L^2}`.
    pub fn norm_loc(&self) -> f64 {
        self.norm_weighted(WeightedNormSpec::default(), WeightSign::Decaying)
    }

    /// `||f||_{H^1}` computed from Fourier coefficients.
    pub fn norm_h1(&self) -> f64 {
        let ops = ops_for(&self.grid);
        let mut w = self.values.clone();
        ops.forward(&mut w);
        let s: f64 = w
            .iter()
            .zip(ops.k_squared())
            .map(|(z, k2)| (1.0 + k2) * z.norm_sqr())
            .sum();
        (self.grid.cell_volume() * s / self.len() as f64).sqrt()
    }

    /// `||f||_Y = ||f||_{H^1} + ||<x>^{r0} f||_{L^2}`.
    pub fn norm_y(&self, w: WeightedNormSpec) -> f64 {
        self.norm_h1() + self.norm_weighted(w, WeightSign::Growing)
    }

    /// `∫|∇f|^2`, spectrally.
    pub fn gradient_energy(&self) -> f64 {
        let ops = ops_for(&self.grid);
        let mut w = self.values.clone();
        ops.forward(&mut w);
        let s: f64 = w
            .iter()
            .zip(ops.k_squared())
            .map(|(z, k2)| k2 * z.norm_sqr())
            .sum();
        self.grid.cell_volume() * s / self.len() as f64
    }

    /// Spectral Laplacian with periodic boundary conditions.
    pub fn laplacian(&self) -> ComplexField {
        let ops = ops_for(&self.grid);
        let mut w = self.values.clone();
        let mut s = ops.make_scratch();
        ops.apply_symbol(&mut w, |k2| C64::new(-k2, 0.0), &mut s);
        Self::from_vec_unchecked(self.grid, w)
    }

    /// `h^d Σ conj(f_i) g_i`.
    pub fn inner(&self, other: &ComplexField) -> Result<C64> {
        self.check_grid(other)?;
        Ok(self.inner_unchecked(other))
    }

    pub(crate) fn inner_unchecked(&self, other: &ComplexField) -> C64 {
        self.grid.cell_volume() * dot(&self.values, &other.values)
    }

    /// `Re <f, g>`, the pairing for real-linear operators.
    pub fn inner_real(&self, other: &ComplexField) -> Result<f64> {
        Ok(self.inner(other)?.re)
    }

    pub fn scale(&self, a: C64) -> ComplexField {
        Self::from_vec_unchecked(self.grid, self.values.iter().map(|z| z * a).collect())
    }

    pub fn scale_real(&self, a: f64) -> ComplexField {
        Self::from_vec_unchecked(self.grid, self.values.iter().map(|z| z * a).collect())
    }

    pub fn add(&self, other: &ComplexField) -> Result<ComplexField> {
        self.check_grid(other)?;
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &ComplexField) -> Result<ComplexField> {
        self.check_grid(other)?;
        Ok(self.zip_with(other, |a, b| a - b))
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: C64, other: &ComplexField) -> Result<()> {
        self.check_grid(other)?;
        for (s, o) in self.values.iter_mut().zip(&other.values) {
            *s += a * o;
        }
        Ok(())
    }

    /// Pointwise product.
    pub fn mul(&self, other: &ComplexField) -> Result<ComplexField> {
        self.check_grid(other)?;
        Ok(self.zip_with(other, |a, b| a * b))
    }

    pub fn conj(&self) -> ComplexField {
        self.map(|z| z.conj())
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> ComplexField {
        Self::from_vec_unchecked(self.grid, self.values.iter().map(|&z| f(z)).collect())
    }

    fn zip_with(&self, other: &ComplexField, f: impl Fn(C64, C64) -> C64) -> ComplexField {
        Self::from_vec_unchecked(
            self.grid,
            self.values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn real_part(&self) -> Vec<f64> {
        self.values.iter().map(|z| z.re).collect()
    }

    pub fn imag_part(&self) -> Vec<f64> {
        self.values.iter().map(|z| z.im).collect()
    }

    /// Mass fraction in the outer shell `max_a |x_a| > frac * L`.
    pub fn outer_mass_fraction(&self, frac: f64) -> f64 {
        let cut = frac * self.grid.half_width();
        let mut outer = 0.0;
        let mut total = 0.0;
        for (i, z) in self.values.iter().enumerate() {
            let m = z.norm_sqr();
            total += m;
            let x = self.grid.position(i);
            if x.iter().take(self.grid.dim()).any(|c| c.abs() > cut) {
                outer += m;
            }
        }
        if total == 0.0 {
            0.0
        } else {
            outer / total
        }
    }

    /// Restricts to a centred smaller box with the same spacing.
    pub fn restrict(&self, target: &SpatialGrid) -> Result<ComplexField> {
        let (small, big) = (target, &self.grid);
        let off = centred_offset(small, big)?;
        let values = (0..small.len())
            .map(|i| self.values[shifted_index(small, big, i, off)])
            .collect();
        Ok(Self::from_vec_unchecked(*small, values))
    }

    /// Zero-pads into a centred larger box with the same spacing.
    pub fn embed(&self, target: &SpatialGrid) -> Result<ComplexField> {
        let (small, big) = (&self.grid, target);
        let off = centred_offset(small, big)?;
        let mut out = ComplexField::zeros(*big);
        for (i, v) in self.values.iter().enumerate() {
            out.values[shifted_index(small, big, i, off)] = *v;
        }
        Ok(out)
    }
}

fn centred_offset(small: &SpatialGrid, big: &SpatialGrid) -> Result<usize> {
    if !small.same_spacing(big) || small.n() > big.n() {
        return Err(Error::GridMismatch);
    }
    Ok((big.n() - small.n()) / 2)
}

fn shifted_index(small: &SpatialGrid, big: &SpatialGrid, i: usize, off: usize) -> usize {
    let idx = small.multi_index(i);
    (0..small.dim()).fold(0, |acc, a| acc * big.n() + idx[a] + off)
}

/// Unweighted `Σ conj(a_i) b_i`.
pub fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).fold(ZERO, |acc, (x, y)| acc + x.conj() * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gauss(grid: SpatialGrid) -> ComplexField {
        ComplexField::from_fn(grid, |x| C64::new((-0.5 * x[0] * x[0]).exp(), 0.0))
    }

    #[test]
    fn lp_examples() {
        let g = SpatialGrid::one_d(64, 1.0).unwrap();
        assert_eq!(ComplexField::zeros(g).norm_lp(2.0).unwrap(), 0.0);
        let one = ComplexField::from_fn(g, |_| C64::new(1.0, 0.0));
        assert!((one.norm_lp(2.0).unwrap() - 2f64.sqrt()).abs() < 1e-14);
        assert!(one.norm_lp(0.5).is_err());
        assert_eq!(one.norm_lp(f64::INFINITY).unwrap(), 1.0);

        let g = SpatialGrid::one_d(512, 20.0).unwrap();
        let f = gauss(g);
        let expect = std::f64::consts::PI.powf(0.25);
        assert!((f.norm_lp(2.0).unwrap() - expect).abs() < 1e-8);
    }

    #[test]
    fn point_mass_weight_is_sign_independent() {
        let g = SpatialGrid::one_d(16, 4.0).unwrap();
        let mut f = ComplexField::zeros(g);
        f.values_mut()[8] = C64::new(2.0, -1.0);
        let w = WeightedNormSpec::default();
        let a = f.norm_weighted(w, WeightSign::Growing);
        let b = f.norm_weighted(w, WeightSign::Decaying);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn weight_spec_validates() {
        assert!(WeightedNormSpec::new(3.0).is_err());
        assert!(WeightedNormSpec::new(3.5).is_ok());
    }

    #[test]
    fn plane_wave_h1() {
        let g = SpatialGrid::one_d(64, std::f64::consts::PI).unwrap();
        let k = 5.0;
        let f = ComplexField::from_fn(g, |x| C64::from_polar(1.0, k * x[0]));
        let expect = (1.0 + k * k).sqrt() * f.norm_l2();
        assert!((f.norm_h1() - expect).abs() < 1e-10 * expect);
    }

    #[test]
    fn laplacian_examples() {
        let g = SpatialGrid::one_d(32, 3.0).unwrap();
        let c = ComplexField::from_fn(g, |_| C64::new(2.0, 1.0));
        assert!(c.laplacian().max_abs() < 1e-13);

        let g = SpatialGrid::one_d(64, std::f64::consts::PI).unwrap();
        let f = ComplexField::from_fn(g, |x| C64::from_polar(1.0, 3.0 * x[0]));
        let lf = f.laplacian();
        for (a, b) in lf.values().iter().zip(f.values()) {
            assert!((a + 9.0 * b).norm() < 1e-11);
        }

        let g = SpatialGrid::one_d(512, 20.0).unwrap();
        let lf = gauss(g).laplacian();
        for (i, v) in lf.values().iter().enumerate() {
            let x = g.position(i)[0];
            let exact = (x * x - 1.0) * (-0.5 * x * x).exp();
            assert!((v.re - exact).abs() < 1e-8 && v.im.abs() < 1e-12);
        }
    }

    #[test]
    fn restrict_embed_round_trip() {
        let small = SpatialGrid::new(2, 8, 1.0).unwrap();
        let big = SpatialGrid::new(2, 32, 4.0).unwrap();
        let f = ComplexField::from_fn(small, |x| C64::new(x[0], x[1]));
        let e = f.embed(&big).unwrap();
        assert_eq!(e.restrict(&small).unwrap(), f);
        assert!((e.norm_l2() - f.norm_l2()).abs() < 1e-14);
        let i = (0..big.len()).find(|&i| e.values()[i] != ZERO).unwrap();
        let p = big.position(i);
        assert!((e.values()[i].re - p[0]).abs() < 1e-14);
        assert!(f.restrict(&big).is_err());
    }

    fn arb_field(n: usize) -> impl Strategy<Value = ComplexField> {
        proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n).prop_map(move |v| {
            let g = SpatialGrid::one_d(n, 3.0).unwrap();
            ComplexField::new(g, v.into_iter().map(|(a, b)| C64::new(a, b)).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn parseval(f in arb_field(64)) {
            let ops = ops_for(f.grid());
            let mut w = f.values().to_vec();
            ops.forward(&mut w);
            let fourier: f64 = w.iter().map(|z| z.norm_sqr()).sum::<f64>() / 64.0;
            let phys: f64 = f.values().iter().map(|z| z.norm_sqr()).sum();
            prop_assert!((fourier - phys).abs() <= 1e-10 * phys.max(1e-300));
        }

        #[test]
        fn laplacian_is_symmetric(f in arb_field(32), g in arb_field(32)) {
            let a = f.laplacian().inner(&g).unwrap();
            let b = f.inner(&g.laplacian()).unwrap();
            let scale = f.laplacian().norm_l2() * g.norm_l2() + 1e-300;
            prop_assert!((a - b).norm() <= 1e-10 * scale);
        }

        #[test]
        fn inner_is_conjugate_symmetric(f in arb_field(16), g in arb_field(16)) {
            let a = f.inner(&g).unwrap();
            let b = g.inner(&f).unwrap().conj();
            prop_assert!((a - b).norm() < 1e-14);
            let ff = f.inner(&f).unwrap();
            prop_assert!((ff.re - f.norm_l2().powi(2)).abs() < 1e-12 && ff.im.abs() < 1e-14);
        }

        #[test]
        fn norm_chain(f in arb_field(32)) {
            let loc = f.norm_loc();
            let l2 = f.norm_l2();
            let y = f.norm_y(WeightedNormSpec::default());
            prop_assert!(loc <= l2 * (1.0 + 1e-12));
            prop_assert!(l2 <= y * (1.0 + 1e-12));
        }
    }
}
