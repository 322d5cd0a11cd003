//! Adaptive Simpson quadrature.

use crate::error::{Error, Result};

/// Tolerances for [`adaptive_simpson`].
#[derive(Debug, Clone, Copy)]
pub struct SimpsonOptions {
    pub abs_tol: f64,
    /// Relative tolerance against the running magnitude of the integral.
    pub rel_tol: f64,
    /// Upper bound on the number of accepted subintervals.
    pub max_intervals: usize,
}

impl Default for SimpsonOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-12,
            rel_tol: 0.0,
            max_intervals: 1_000_000,
        }
    }
}

struct Panel {
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

/// Integrates `f` over `[a, b]`.
///
/// Each panel is accepted once `|S(left) + S(right) - S(whole)| <= 15 tol` where
/// `tol` is the panel's share of `max(abs_tol, rel_tol * |I_estimate|)`, and the
/// Richardson correction is added on acceptance.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, opts: SimpsonOptions) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if a == b {
        return Ok(0.0);
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::invalid("quadrature bounds must be finite"));
    }
    let (lo, hi, sign) = if a < b { (a, b, 1.0) } else { (b, a, -1.0) };

    let (fa, fb) = (f(lo), f(hi));
    let m = 0.5 * (lo + hi);
    let fm = f(m);
    let whole = simpson(lo, hi, fa, fm, fb);
    let global_tol = opts.abs_tol.max(opts.rel_tol * whole.abs());

    let mut stack = vec![Panel {
        a: lo,
        b: hi,
        fa,
        fm,
        fb,
        whole,
        tol: global_tol,
        depth: 0,
    }];
    let mut total = 0.0;
    let mut accepted = 0usize;

    while let Some(p) = stack.pop() {
        let m = 0.5 * (p.a + p.b);
        let lm = 0.5 * (p.a + m);
        let rm = 0.5 * (m + p.b);
        let flm = f(lm);
        let frm = f(rm);
        let left = simpson(p.a, m, p.fa, flm, p.fm);
        let right = simpson(m, p.b, p.fm, frm, p.fb);
        let delta = left + right - p.whole;
        if !delta.is_finite() {
            return Err(Error::QuadratureNonConvergence { a, b });
        }
        // Floating resolution floor: once the panel is too narrow to split or
        // the discrepancy is at rounding level, accept.
        let rounding = 64.0 * f64::EPSILON * (left.abs() + right.abs());
        let narrow = m <= p.a || m >= p.b || p.depth >= 60;
        if delta.abs() <= 15.0 * p.tol || delta.abs() <= rounding || narrow {
            total += left + right + delta / 15.0;
            accepted += 1;
            continue;
        }
        if accepted + stack.len() >= opts.max_intervals {
            return Err(Error::QuadratureNonConvergence { a, b });
        }
        let tol = 0.5 * p.tol;
        stack.push(Panel {
            a: m,
            b: p.b,
            fa: p.fm,
            fm: frm,
            fb: p.fb,
            whole: right,
            tol,
            depth: p.depth + 1,
        });
        stack.push(Panel {
            a: p.a,
            b: m,
            fa: p.fa,
            fm: flm,
            fb: p.fm,
            whole: left,
            tol,
            depth: p.depth + 1,
        });
    }
    Ok(sign * total)
}
