//! One-dimensional search primitives shared by the cost machinery and the
//! solvers: geometric grids, golden-section maximization on a bracket,
//! bisection for monotone root finding, and a guarded Newton polish.

/// Inverse golden ratio, (sqrt(5) - 1) / 2.
const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Geometric grid of `count` points spanning `[lo, hi]`, both endpoints
/// included. Requires `0 < lo < hi`.
pub fn geometric_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi > lo && count >= 2);
    let log_lo = lo.ln();
    let step = (hi.ln() - log_lo) / (count - 1) as f64;
    let mut grid: Vec<f64> = (0..count)
        .map(|i| (log_lo + step * i as f64).exp())
        .collect();
    // pin the endpoints exactly
    grid[0] = lo;
    *grid.last_mut().unwrap() = hi;
    grid
}

/// Golden-section search for the maximum of a unimodal `f` on `[lo, hi]`.
/// Shrinks the bracket until its width is below `rel_tol * (hi - lo)`
/// (with an absolute floor near machine precision) and returns the best
/// point seen together with its value.
pub fn golden_max<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, rel_tol: f64) -> (f64, f64) {
    debug_assert!(hi >= lo);
    if hi <= lo {
        return (lo, f(lo));
    }
    let width0 = hi - lo;
    let tol = (rel_tol * width0).max(f64::EPSILON * (lo.abs() + hi.abs() + 1.0));
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let mut iters = 0usize;
    while b - a > tol && iters < 300 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
        }
        iters += 1;
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Bisection for a root of `f` on `[lo, hi]` assuming `f(lo) <= 0 <= f(hi)`.
/// Runs until the bracket width drops below `xtol * max(1, |x|)`.
pub fn bisect<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, xtol: f64) -> f64 {
    debug_assert!(lo <= hi);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hi - lo <= xtol * mid.abs().max(1.0) {
            return mid;
        }
        if f(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Newton polish for a root of `r` starting at `x0`, with the derivative
/// estimated by central differences. Steps falling outside `[lo, hi]` or
/// failing to shrink `|r|` are rejected; at most `max_steps` steps run.
pub fn newton_polish<F: FnMut(f64) -> f64>(
    mut r: F,
    x0: f64,
    lo: f64,
    hi: f64,
    max_steps: usize,
) -> f64 {
    let mut x = x0;
    let mut rx = r(x);
    for _ in 0..max_steps {
        let h = 1e-6 * x.abs().max(1e-12);
        let slope = (r(x + h) - r(x - h)) / (2.0 * h);
        if !slope.is_finite() || slope == 0.0 {
            break;
        }
        let cand = x - rx / slope;
        if !cand.is_finite() || cand <= lo || cand >= hi {
            break;
        }
        let rc = r(cand);
        if rc.abs() >= rx.abs() {
            break;
        }
        x = cand;
        rx = rc;
        if rx == 0.0 {
            break;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_finds_parabola_peak() {
        let (x, v) = golden_max(|u| -(u - 3.0) * (u - 3.0) + 2.0, 0.0, 10.0, 1e-12);
        // comparison search localizes a smooth peak to ~sqrt(eps); the value
        // is quadratically better (machine precision here)
        assert!((x - 3.0).abs() < 2e-8);
        assert!((v - 2.0).abs() < 1e-14);
    }

    #[test]
    fn bisect_solves_cubic() {
        let root = bisect(|x| x * x * x - 2.0, 0.0, 2.0, 1e-14);
        assert!((root - 2f64.powf(1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn geometric_grid_pins_endpoints() {
        let g = geometric_grid(1e-3, 1e3, 61);
        assert_eq!(g[0], 1e-3);
        assert_eq!(*g.last().unwrap(), 1e3);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn newton_polish_refines_root() {
        let x = newton_polish(|u| u * u - 2.0, 1.4, 0.5, 3.0, 5);
        assert!((x - 2f64.sqrt()).abs() < 1e-12);
    }
}
