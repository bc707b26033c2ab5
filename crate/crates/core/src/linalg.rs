//! Krylov solvers on plain complex vectors.

use crate::error::{Error, Result};
use crate::field::{dot, C64, ZERO};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Final `||b - A x|| / ||b||`.
    pub residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct KrylovOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// GMRES restart length.
    pub restart: usize,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self {
            tol: 1e-11,
            max_iter: 5000,
            restart: 60,
        }
    }
}

pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn axpy(y: &mut [C64], a: C64, x: &[C64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Preconditioned conjugate gradients for a Hermitian positive definite `A`.
///
/// `precond` must also be Hermitian positive definite.
pub fn cg(
    apply: impl Fn(&[C64], &mut [C64]),
    precond: impl Fn(&[C64], &mut [C64]),
    b: &[C64],
    x0: Option<&[C64]>,
    opts: KrylovOptions,
    what: &'static str,
) -> Result<(Vec<C64>, SolveStats)> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok((
            vec![ZERO; n],
            SolveStats {
                iterations: 0,
                residual: 0.0,
            },
        ));
    }
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![ZERO; n]);
    let mut ax = vec![ZERO; n];
    apply(&x, &mut ax);
    let mut r: Vec<C64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let mut z = vec![ZERO; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z).re;
    let mut ap = vec![ZERO; n];
    let mut res = norm(&r) / bnorm;
    for it in 0..opts.max_iter {
        if res <= opts.tol {
            return Ok((
                x,
                SolveStats {
                    iterations: it,
                    residual: res,
                },
            ));
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap).re;
        if !(pap > 0.0) {
            return Err(Error::NotConverged {
                what,
                iterations: it,
                residual: res,
            });
        }
        let alpha = rz / pap;
        axpy(&mut x, C64::new(alpha, 0.0), &p);
        axpy(&mut r, C64::new(-alpha, 0.0), &ap);
        res = norm(&r) / bnorm;
        precond(&r, &mut z);
        let rz_new = dot(&r, &z).re;
        let beta = rz_new / rz;
        rz = rz_new;
        for (pi, zi) in p.iter_mut().zip(&z) {
            *pi = zi + beta * *pi;
        }
    }
    if res <= opts.tol {
        return Ok((
            x,
            SolveStats {
                iterations: opts.max_iter,
                residual: res,
            },
        ));
    }
    Err(Error::NotConverged {
        what,
        iterations: opts.max_iter,
        residual: res,
    })
}

/// Restarted GMRES with right preconditioning, `A M^{-1} y = b`, `x = M^{-1} y`.
pub fn gmres(
    apply: impl Fn(&[C64], &mut [C64]),
    precond: impl Fn(&[C64], &mut [C64]),
    b: &[C64],
    x0: Option<&[C64]>,
    opts: KrylovOptions,
    what: &'static str,
) -> Result<(Vec<C64>, SolveStats)> {
    let n = b.len();
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok((
            vec![ZERO; n],
            SolveStats {
                iterations: 0,
                residual: 0.0,
            },
        ));
    }
    let m = opts.restart.max(1);
    let mut x = x0.map(|v| v.to_vec()).unwrap_or_else(|| vec![ZERO; n]);
    let mut tmp = vec![ZERO; n];
    let mut w = vec![ZERO; n];
    let mut total = 0;
    let mut res;
    let mut stalled = 0;
    let mut last_cycle = f64::INFINITY;
    loop {
        apply(&x, &mut tmp);
        let r: Vec<C64> = b.iter().zip(&tmp).map(|(b, a)| b - a).collect();
        let beta = norm(&r);
        res = beta / bnorm;
        if res <= opts.tol {
            return Ok((
                x,
                SolveStats {
                    iterations: total,
                    residual: res,
                },
            ));
        }
        stalled = if res > 0.9 * last_cycle {
            stalled + 1
        } else {
            0
        };
        last_cycle = res;
        if total >= opts.max_iter || stalled >= 3 {
            return Err(Error::NotConverged {
                what,
                iterations: total,
                residual: res,
            });
        }
        let mut basis: Vec<Vec<C64>> = Vec::with_capacity(m + 1);
        basis.push(r.iter().map(|z| z / beta).collect());
        let mut h = vec![vec![ZERO; m]; m + 1];
        let mut cs = vec![ZERO; m];
        let mut sn = vec![ZERO; m];
        let mut g = vec![ZERO; m + 1];
        g[0] = C64::new(beta, 0.0);
        let mut k_used = 0;
        for k in 0..m {
            precond(&basis[k], &mut tmp);
            apply(&tmp, &mut w);
            // Modified Gram-Schmidt, twice for stability.
            for _ in 0..2 {
                for (j, v) in basis.iter().enumerate() {
                    let hj = dot(v, &w);
                    h[j][k] += hj;
                    axpy(&mut w, -hj, v);
                }
            }
            let hn = norm(&w);
            h[k + 1][k] = C64::new(hn, 0.0);
            for j in 0..k {
                let t = cs[j].conj() * h[j][k] + sn[j].conj() * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let (a, bb) = (h[k][k], h[k + 1][k]);
            let d = (a.norm_sqr() + bb.norm_sqr()).sqrt();
            if d == 0.0 {
                cs[k] = C64::new(1.0, 0.0);
                sn[k] = ZERO;
            } else {
                cs[k] = a / d;
                sn[k] = bb / d;
            }
            h[k][k] = cs[k].conj() * a + sn[k].conj() * bb;
            h[k + 1][k] = ZERO;
            g[k + 1] = -sn[k] * g[k];
            g[k] = cs[k].conj() * g[k];
            k_used = k + 1;
            total += 1;
            res = g[k + 1].norm() / bnorm;
            if res <= opts.tol || hn == 0.0 || total >= opts.max_iter {
                break;
            }
            basis.push(w.iter().map(|z| z / hn).collect());
        }
        let mut y = vec![ZERO; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in i + 1..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        let mut dx = vec![ZERO; n];
        for (yj, v) in y.iter().zip(&basis) {
            axpy(&mut dx, *yj, v);
        }
        precond(&dx, &mut tmp);
        axpy(&mut x, C64::new(1.0, 0.0), &tmp);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(shift: C64) -> impl Fn(&[C64], &mut [C64]) {
        move |x: &[C64], y: &mut [C64]| {
            let n = x.len();
            for i in 0..n {
                let mut s = (2.0 + i as f64 * 0.01) * x[i] - shift * x[i];
                if i > 0 {
                    s -= x[i - 1];
                }
                if i + 1 < n {
                    s -= x[i + 1];
                }
                y[i] = s;
            }
        }
    }

    fn ident(x: &[C64], y: &mut [C64]) {
        y.copy_from_slice(x);
    }

    #[test]
    fn cg_solves_spd() {
        let a = tridiag(C64::new(-0.5, 0.0));
        let b: Vec<C64> = (0..50).map(|i| C64::new((i as f64).sin(), 0.3)).collect();
        let (x, st) = cg(&a, ident, &b, None, KrylovOptions::default(), "test").unwrap();
        let mut ax = vec![ZERO; 50];
        a(&x, &mut ax);
        let err: f64 = ax
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-9 && st.residual <= 1e-11);
    }

    #[test]
    fn gmres_solves_complex_shifted() {
        let a = tridiag(C64::new(1.0, 0.2));
        let b: Vec<C64> = (0..80)
            .map(|i| C64::new((i as f64 * 0.3).cos(), 0.0))
            .collect();
        let opts = KrylovOptions {
            restart: 15,
            ..Default::default()
        };
        let (x, _) = gmres(&a, ident, &b, None, opts, "test").unwrap();
        let mut ax = vec![ZERO; 80];
        a(&x, &mut ax);
        let err: f64 = ax
            .iter()
            .zip(&b)
            .map(|(p, q)| (p - q).norm_sqr())
            .sum::<f64>()
            .sqrt();
        assert!(err < 1e-9 * norm(&b));
    }

    #[test]
    fn reports_non_convergence() {
        let a = tridiag(C64::new(1.0, 0.2));
        let b = vec![C64::new(1.0, 0.0); 80];
        let opts = KrylovOptions {
            restart: 3,
            max_iter: 4,
            tol: 1e-14,
        };
        assert!(matches!(
            gmres(&a, ident, &b, None, opts, "x"),
            Err(Error::NotConverged { .. })
        ));
    }
}
