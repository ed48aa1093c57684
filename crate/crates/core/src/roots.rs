//! Bracketed root finding for strictly increasing scalar maps.
//!
//! Both the inverse mean map and the coordinate updates of the Sinkhorn
//! sweep reduce to finding the unique zero of an increasing function on an
//! open interval that may have one or two finite ends. The search first
//! grows a bracket outwards from a starting point (doubling the step on an
//! infinite side, halving the remaining distance on a finite side) and then
//! refines it with a Newton iteration that falls back to bisection whenever
//! the Newton step leaves the bracket or stalls.

/// Why a bracketed solve gave up.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum RootFailure {
    /// The function kept the same sign all the way to the domain boundary.
    Escape { below: bool },
    /// The function returned NaN at the probe point.
    NotFinite(f64),
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct RootConfig {
    pub max_expansions: usize,
    pub max_bisections: usize,
    pub newton_polish: usize,
}

impl Default for RootConfig {
    fn default() -> Self {
        Self {
            max_expansions: 200,
            max_bisections: 80,
            newton_polish: 5,
        }
    }
}

/// Shrinks a possibly infinite open interval to a closed one strictly inside
/// it, so that evaluations never touch the boundary.
pub(crate) fn guarded(lo: f64, hi: f64) -> (f64, f64) {
    let width = hi - lo;
    let eps = if width.is_finite() { 1e-12 * width } else { 1e-12 };
    let glo = if lo.is_finite() { lo + eps.max(lo.abs() * 4.0 * f64::EPSILON) } else { lo };
    let ghi = if hi.is_finite() { hi - eps.max(hi.abs() * 4.0 * f64::EPSILON) } else { hi };
    (glo, ghi)
}

/// Finds `x` in `(lo, hi)` with `|f(x)| <= tol`, where `f` returns the value
/// and derivative of a strictly increasing function.
pub(crate) fn solve_increasing<F>(
    f: F,
    start: f64,
    lo: f64,
    hi: f64,
    tol: f64,
    cfg: RootConfig,
) -> Result<f64, RootFailure>
where
    F: Fn(f64) -> (f64, f64),
{
    let (glo, ghi) = guarded(lo, hi);
    let mut x = if start.is_finite() { start } else { 0.0 };
    if x <= glo || x >= ghi {
        x = match (glo.is_finite(), ghi.is_finite()) {
            (true, true) => 0.5 * (glo + ghi),
            (true, false) => x.max(glo + 1.0),
            (false, true) => x.min(ghi - 1.0),
            (false, false) => 0.0,
        };
        x = x.clamp(glo, ghi);
    }

    let (fx, dfx) = f(x);
    if fx.is_nan() {
        return Err(RootFailure::NotFinite(x));
    }
    if fx.abs() <= tol {
        return Ok(x);
    }

    // Bracket [a, b] with f(a) < 0 < f(b).
    let newton_guess = if dfx > 0.0 && dfx.is_finite() { (fx / dfx).abs() } else { 1.0 };
    let mut step = (2.0 * newton_guess).max(1e-12 * (1.0 + x.abs()));
    let (mut a, mut fa, mut b, mut fb);
    if fx < 0.0 {
        a = x;
        fa = fx;
        let mut expansions = 0;
        loop {
            let mut cand = a + step;
            if cand >= ghi {
                cand = a + 0.5 * (ghi - a);
                if cand <= a {
                    return Err(RootFailure::Escape { below: false });
                }
            }
            let (fc, _) = f(cand);
            if fc.is_nan() {
                return Err(RootFailure::NotFinite(cand));
            }
            if fc >= 0.0 {
                b = cand;
                fb = fc;
                break;
            }
            a = cand;
            fa = fc;
            step *= 2.0;
            expansions += 1;
            if expansions >= cfg.max_expansions {
                return Err(RootFailure::Escape { below: false });
            }
        }
    } else {
        b = x;
        fb = fx;
        let mut expansions = 0;
        loop {
            let mut cand = b - step;
            if cand <= glo {
                cand = b - 0.5 * (b - glo);
                if cand >= b {
                    return Err(RootFailure::Escape { below: true });
                }
            }
            let (fc, _) = f(cand);
            if fc.is_nan() {
                return Err(RootFailure::NotFinite(cand));
            }
            if fc <= 0.0 {
                a = cand;
                fa = fc;
                break;
            }
            b = cand;
            fb = fc;
            step *= 2.0;
            expansions += 1;
            if expansions >= cfg.max_expansions {
                return Err(RootFailure::Escape { below: true });
            }
        }
    }
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }

    // Safeguarded Newton inside the bracket.
    let mut x = if fa.abs() < fb.abs() { a } else { b };
    let (mut fx, mut dfx) = f(x);
    let mut bisections = 0;
    let mut dx_old = b - a;
    for _ in 0..(cfg.max_bisections + 200) {
        if fx.abs() <= tol {
            return Ok(x);
        }
        let newton = x - fx / dfx;
        let use_newton = dfx > 0.0
            && dfx.is_finite()
            && newton > a
            && newton < b
            && (2.0 * fx).abs() <= (dx_old * dfx).abs();
        let next = if use_newton {
            dx_old = (newton - x).abs();
            newton
        } else {
            bisections += 1;
            dx_old = 0.5 * (b - a);
            a + 0.5 * (b - a)
        };
        if next == x || b - a <= 2.0 * f64::EPSILON * x.abs().max(1e-300) {
            break;
        }
        x = next;
        let (fv, dv) = f(x);
        if fv.is_nan() {
            return Err(RootFailure::NotFinite(x));
        }
        fx = fv;
        dfx = dv;
        if fx < 0.0 {
            a = x;
        } else {
            b = x;
        }
        if bisections >= cfg.max_bisections {
            break;
        }
    }

    for _ in 0..cfg.newton_polish {
        if fx.abs() <= tol || !(dfx > 0.0) {
            break;
        }
        let cand = x - fx / dfx;
        if !(cand > a && cand < b) {
            break;
        }
        let (fc, dc) = f(cand);
        if !(fc.abs() < fx.abs()) {
            break;
        }
        x = cand;
        fx = fc;
        dfx = dc;
    }
    Ok(x)
}
