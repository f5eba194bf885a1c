//! Reference implementations used only by tests.
//!
//! Each oracle follows a different route than the library code it checks.

#![allow(dead_code)]

use num_complex::Complex64 as Complex;

/// Double-double real: `hi + lo` with `|lo| ≤ ulp(hi)/2`.
#[derive(Clone, Copy, Debug)]
struct Dd {
    hi: f64,
    lo: f64,
}

fn quick_two_sum(a: f64, b: f64) -> Dd {
    let s = a + b;
    Dd {
        hi: s,
        lo: b - (s - a),
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

impl Dd {
    const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    fn from(v: f64) -> Dd {
        Dd { hi: v, lo: 0.0 }
    }

    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        quick_two_sum(s, e + self.lo + o.lo)
    }

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }

    fn mul_f(self, c: f64) -> Dd {
        let p = self.hi * c;
        let e = self.hi.mul_add(c, -p) + self.lo * c;
        quick_two_sum(p, e)
    }

    fn div_f(self, k: f64) -> Dd {
        let q1 = self.hi / k;
        let r = self.add(Dd::from(q1).mul_f(k).neg());
        quick_two_sum(q1, (r.hi + r.lo) / k)
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

/// `(e^z − 1)/z = Σ_{k≥0} z^k/(k+1)!`, summed in double-double until the
/// terms drop below 1e-40 of the running sum.
pub fn exprel_series(z: Complex) -> Complex {
    let (mut re, mut im) = (Dd::from(1.0), Dd::ZERO);
    let (mut t_re, mut t_im) = (Dd::from(1.0), Dd::ZERO);
    for k in 1..400 {
        // term_k = term_{k−1} · z / (k + 1)
        let nr = t_re.mul_f(z.re).add(t_im.mul_f(z.im).neg());
        let ni = t_re.mul_f(z.im).add(t_im.mul_f(z.re));
        let div = (k + 1) as f64;
        t_re = nr.div_f(div);
        t_im = ni.div_f(div);
        re = re.add(t_re);
        im = im.add(t_im);
        let mag = t_re.hi.abs() + t_im.hi.abs();
        if k > 5 && mag < 1e-40 * (re.hi.abs() + im.hi.abs()) {
            break;
        }
    }
    Complex::new(re.to_f64(), im.to_f64())
}

/// Textbook causal convolution, `out[t] = Σ_{j ≤ t} k[j] x[t − j]`.
pub fn direct_causal_conv(x: &[f64], k: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|t| (0..=t.min(k.len() - 1)).map(|j| k[j] * x[t - j]).sum())
        .collect()
}

/// `max |a − b| / max |b|`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let num = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let den = b.iter().map(|y| y.abs()).fold(0.0, f64::max).max(1e-300);
    num / den
}

/// Central finite difference of `f` along each coordinate of `x`.
pub fn central_differences(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}
