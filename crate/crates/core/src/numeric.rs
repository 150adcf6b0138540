//! Small shared numerics: sphere constants, adaptive quadrature, stats
//! helpers and the decimal float formatting used by every artifact writer.

/// Surface area of the unit sphere S^{d-1} in R^d.
///
/// `2 pi^{d/2} / Gamma(d/2)`, evaluated in closed form for integer `d`.
pub fn sphere_surface_area(dim: usize) -> f64 {
    use std::f64::consts::PI;
    assert!(dim >= 1);
    2.0 * PI.powf(dim as f64 / 2.0) / gamma_half_integer(dim)
}

/// Gamma(d/2) for integer d >= 1.
fn gamma_half_integer(d: usize) -> f64 {
    use std::f64::consts::PI;
    if d % 2 == 0 {
        // Gamma(k) = (k-1)!
        let k = d / 2;
        (1..k).map(|i| i as f64).product()
    } else {
        // Gamma(k + 1/2) = (2k)! sqrt(pi) / (4^k k!)
        let k = (d - 1) / 2;
        let mut v = PI.sqrt();
        for i in 0..k {
            v *= i as f64 + 0.5;
        }
        v
    }
}

/// Normalisation constant of the Newtonian kernel, `c0 = 1 / ((d-2) omega_d)`.
pub fn newton_c0(dim: usize) -> f64 {
    assert!(dim >= 3);
    1.0 / ((dim as f64 - 2.0) * sphere_surface_area(dim))
}

/// Adaptive Simpson quadrature on [a, b] to absolute tolerance `tol`.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), fm)
    }
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (left, flm) = simpson(f, a, fa, m, fm);
        let (right, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, flm, 0.5 * tol, depth - 1)
                + recurse(f, m, fm, b, fb, right, frm, 0.5 * tol, depth - 1)
        }
    }
    let fa = f(a);
    let fb = f(b);
    let (whole, fm) = simpson(&f, a, fa, b, fb);
    recurse(&f, a, fa, b, fb, whole, fm, tol, 48)
}

/// Decimal formatting with 17 significant digits; round-trips any f64.
pub fn format_f64(x: f64) -> String {
    if x == 0.0 {
        // Normalise -0.0 so canonical forms are byte-stable.
        return "0.0000000000000000e0".to_string();
    }
    format!("{x:.16e}")
}

/// Median of a slice (not required sorted; copies).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Least-squares slope and intercept of y against x.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn sphere_areas_match_closed_forms() {
        assert_relative_eq!(sphere_surface_area(2), 2.0 * PI, max_relative = 1e-14);
        assert_relative_eq!(sphere_surface_area(3), 4.0 * PI, max_relative = 1e-14);
        assert_relative_eq!(sphere_surface_area(4), 2.0 * PI * PI, max_relative = 1e-14);
        assert_relative_eq!(
            sphere_surface_area(5),
            8.0 * PI * PI / 3.0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn simpson_integrates_polynomial_and_bump() {
        let v = adaptive_simpson(|x| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 1e-12);
        assert_relative_eq!(v, 2.0, epsilon = 1e-10);
        // smooth bump, compare against a fine midpoint sum
        let f = |r: f64| {
            if r < 1.0 {
                (-1.0 / (1.0 - r * r)).exp() * r * r
            } else {
                0.0
            }
        };
        let v = adaptive_simpson(f, 0.0, 1.0, 1e-12);
        let n = 2_000_000;
        let h = 1.0 / n as f64;
        let brute: f64 = (0..n).map(|i| f((i as f64 + 0.5) * h) * h).sum();
        assert_relative_eq!(v, brute, epsilon = 1e-9);
    }

    #[test]
    fn format_round_trips() {
        for &x in &[1.0, -0.1, 3.5e-300, f64::MIN_POSITIVE, 12345.678901234567] {
            let s = format_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x);
        }
        assert_eq!(format_f64(0.0), format_f64(-0.0));
    }

    #[test]
    fn median_and_fit() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let (m, b) = linear_fit(&x, &y);
        assert_relative_eq!(m, 2.0, epsilon = 1e-12);
        assert_relative_eq!(b, 1.0, epsilon = 1e-12);
    }
}
