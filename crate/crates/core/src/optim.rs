//! Quasi-Newton minimization (BFGS on the inverse Hessian) with a strong-Wolfe
//! line search.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_BRACKET: usize = 30;
const MAX_ZOOM: usize = 40;

#[derive(Debug, Clone)]
pub struct BfgsOutcome<T: Scalar> {
    pub x: DVector<T>,
    pub f: T,
    pub grad: DVector<T>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub message: String,
}

struct Point<T: Scalar> {
    a: T,
    f: T,
    g: DVector<T>,
    d: T,
}

struct Search<'a, T: Scalar, F> {
    fg: &'a mut F,
    x: &'a DVector<T>,
    dir: &'a DVector<T>,
    f0: T,
    d0: T,
    evals: usize,
}

impl<T, F> Search<'_, T, F>
where
    T: Scalar,
    F: FnMut(&DVector<T>) -> Result<(T, DVector<T>)>,
{
    /// Evaluation failures and non-finite values count as `+∞`.
    fn eval(&mut self, a: T) -> Option<Point<T>> {
        self.evals += 1;
        let xt = self.x + self.dir * a;
        match (self.fg)(&xt) {
            Ok((f, g)) if f.is_finite() && g.iter().all(|v| v.is_finite()) => {
                let d = g.dot(self.dir);
                Some(Point { a, f, g, d })
            }
            _ => None,
        }
    }

    fn armijo(&self, p: &Point<T>) -> bool {
        // Slack of a few ulps of f0 so that steps near the optimum, whose true
        // decrease is below rounding, are not rejected outright.
        let slack = T::default_epsilon() * T::lit(8.0) * self.f0.abs();
        p.f <= self.f0 + T::lit(C1) * p.a * self.d0 + slack
    }

    fn curvature(&self, p: &Point<T>) -> bool {
        p.d.abs() <= -T::lit(C2) * self.d0
    }

    fn run(&mut self, a_init: T) -> Option<Point<T>> {
        let mut prev = Point {
            a: T::zero(),
            f: self.f0,
            g: DVector::zeros(0),
            d: self.d0,
        };
        let mut a = a_init;
        let mut best: Option<Point<T>> = None;
        for i in 0..MAX_BRACKET {
            let Some(p) = self.eval(a) else {
                // Shrink toward the last good point.
                let hi_a = a;
                a = (prev.a + hi_a) * T::lit(0.5);
                if (hi_a - prev.a).abs() <= T::default_epsilon() * hi_a.abs() {
                    break;
                }
                continue;
            };
            if !self.armijo(&p) || (i > 0 && prev.a > T::zero() && p.f >= prev.f) {
                return self.zoom(prev, p, &mut best);
            }
            if self.curvature(&p) {
                return Some(p);
            }
            if p.d >= T::zero() {
                return self.zoom(p, prev, &mut best);
            }
            a = p.a * T::lit(2.0);
            best = Some(Point {
                a: p.a,
                f: p.f,
                g: p.g.clone(),
                d: p.d,
            });
            prev = p;
        }
        best
    }

    /// `lo` satisfies Armijo with the lowest value seen so far.
    fn zoom(&mut self, mut lo: Point<T>, mut hi: Point<T>, best: &mut Option<Point<T>>) -> Option<Point<T>> {
        for _ in 0..MAX_ZOOM {
            let width = hi.a - lo.a;
            if width.abs() <= T::default_epsilon() * (T::one() + lo.a.abs()) {
                break;
            }
            // Quadratic interpolation from (f_lo, d_lo, f_hi), safeguarded.
            let denom = T::lit(2.0) * (hi.f - lo.f - lo.d * width);
            let mut a = if denom > T::zero() && hi.f.is_finite() {
                lo.a - lo.d * width * width / denom
            } else {
                lo.a + width * T::lit(0.5)
            };
            let lo_b = lo.a + width * T::lit(0.1);
            let hi_b = hi.a - width * T::lit(0.1);
            let (mn, mx) = if lo_b < hi_b { (lo_b, hi_b) } else { (hi_b, lo_b) };
            if !(a >= mn && a <= mx) {
                a = lo.a + width * T::lit(0.5);
            }
            let Some(p) = self.eval(a) else {
                hi = Point {
                    a,
                    f: T::max_value().unwrap_or(T::one() / T::default_epsilon()),
                    g: DVector::zeros(0),
                    d: T::zero(),
                };
                continue;
            };
            if !self.armijo(&p) || p.f >= lo.f {
                hi = p;
            } else {
                if self.curvature(&p) {
                    return Some(p);
                }
                if p.d * (hi.a - lo.a) >= T::zero() {
                    hi = lo;
                }
                lo = p;
            }
        }
        if lo.a > T::zero() {
            Some(lo)
        } else {
            best.take()
        }
    }
}

/// Minimize `f` from `x0`. `fg` returns value and gradient; `done(x, f, g)`
/// decides convergence. Evaluation errors at trial points shrink the step;
/// an error at `x0` is returned.
pub fn minimize<T, F, C>(mut fg: F, x0: DVector<T>, max_iters: usize, mut done: C) -> Result<BfgsOutcome<T>>
where
    T: Scalar,
    F: FnMut(&DVector<T>) -> Result<(T, DVector<T>)>,
    C: FnMut(&DVector<T>, T, &DVector<T>) -> bool,
{
    let n = x0.len();
    let (mut f, mut g) = fg(&x0)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("objective at starting point"));
    }
    let mut x = x0;
    let mut h_inv = DMatrix::<T>::identity(n, n);
    let mut fresh = true;
    let mut evals = 1;
    let mut iterations = 0;
    let mut message = String::from("iteration limit reached");
    let mut converged = done(&x, f, &g);
    if converged {
        message = "converged".into();
    }
    while !converged && iterations < max_iters {
        let mut dir = -(&h_inv * &g);
        let mut d0 = g.dot(&dir);
        if !(d0 < T::zero()) {
            h_inv = DMatrix::identity(n, n);
            fresh = true;
            dir = -g.clone();
            d0 = g.dot(&dir);
        }
        let a_init = if fresh {
            T::one().min(T::one() / g.amax().max(T::default_epsilon()))
        } else {
            T::one()
        };
        let mut search = Search {
            fg: &mut fg,
            x: &x,
            dir: &dir,
            f0: f,
            d0,
            evals: 0,
        };
        let found = search.run(a_init);
        evals += search.evals;
        let Some(p) = found else {
            if fresh {
                message = "line search failed along steepest descent".into();
                break;
            }
            h_inv = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        iterations += 1;
        let s = &dir * p.a;
        let yv = &p.g - &g;
        let sy = s.dot(&yv);
        x += &s;
        f = p.f;
        g = p.g;
        if sy > T::default_epsilon() * s.norm() * yv.norm() {
            if fresh {
                let scale = sy / yv.dot(&yv);
                h_inv = DMatrix::identity(n, n) * scale;
            }
            let rho = T::one() / sy;
            let hy = &h_inv * &yv;
            let yhy = yv.dot(&hy);
            // H ← H − ρ(Hy sᵀ + s yᵀH) + (ρ²yᵀHy + ρ) s sᵀ
            h_inv.ger(-rho, &hy, &s, T::one());
            h_inv.ger(-rho, &s, &hy, T::one());
            h_inv.ger(rho * rho * yhy + rho, &s, &s, T::one());
            fresh = false;
        }
        if done(&x, f, &g) {
            converged = true;
            message = "converged".into();
        }
    }
    Ok(BfgsOutcome {
        x,
        f,
        grad: g,
        iterations,
        evaluations: evals,
        converged,
        message,
    })
}
