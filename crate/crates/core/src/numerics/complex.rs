//! Complex helpers on top of [`num_complex::Complex64`].

pub use num_complex::Complex64 as Complex;

/// Below this magnitude `(e^z - 1)/z` is evaluated from its Taylor series.
pub const EXPREL_SERIES_RADIUS: f64 = 1e-4;

/// `e^z - 1` without cancellation in the real part for small `z`.
pub fn expm1(z: Complex) -> Complex {
    let (s, c) = z.im.sin_cos();
    let half_sin = (0.5 * z.im).sin();
    // e^x cos y - 1 = expm1(x) cos y - 2 sin^2(y/2)
    let re = z.re.exp_m1() * c - 2.0 * half_sin * half_sin;
    let im = z.re.exp() * s;
    Complex::new(re, im)
}

/// `(e^z - 1)/z`, the zero-order-hold input factor, with the removable
/// singularity at `z = 0` filled in.
pub fn exprel(z: Complex) -> Complex {
    if z.norm() < EXPREL_SERIES_RADIUS {
        // 1 + z/2 + z^2/6 + z^3/24
        Complex::new(1.0, 0.0) + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0)))
    } else {
        expm1(z) / z
    }
}

/// The textbook `(exp(z) - 1)/z`; kept for comparison against [`exprel`].
pub fn exprel_naive(z: Complex) -> Complex {
    (z.exp() - 1.0) / z
}

/// Derivative of [`exprel`]: `(e^z - exprel(z))/z`, series near zero.
pub fn exprel_derivative(z: Complex) -> Complex {
    if z.norm() < 1e-2 {
        // sum_{k>=1} k z^{k-1}/(k+1)!
        let coeffs = [
            1.0 / 2.0,
            1.0 / 3.0,
            1.0 / 8.0,
            1.0 / 30.0,
            1.0 / 144.0,
            1.0 / 840.0,
            1.0 / 5760.0,
        ];
        let mut acc = Complex::new(0.0, 0.0);
        for c in coeffs.iter().rev() {
            acc = acc * z + *c;
        }
        acc
    } else {
        (z.exp() - exprel(z)) / z
    }
}
