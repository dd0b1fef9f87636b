//! Scalar type and the handful of transcendental functions the crate needs.
//!
//! Everything goes through `libm` so results do not depend on the platform's
//! libc and the crate builds without `std`.

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

#[cfg(not(feature = "f32"))]
mod imp {
    use super::Real;
    #[inline]
    pub fn exp(x: Real) -> Real {
        libm::exp(x)
    }
    #[inline]
    pub fn ln(x: Real) -> Real {
        libm::log(x)
    }
    #[inline]
    pub fn tanh(x: Real) -> Real {
        libm::tanh(x)
    }
    #[inline]
    pub fn sqrt(x: Real) -> Real {
        libm::sqrt(x)
    }
    #[inline]
    pub fn round(x: Real) -> Real {
        libm::round(x)
    }
}

#[cfg(feature = "f32")]
mod imp {
    use super::Real;
    #[inline]
    pub fn exp(x: Real) -> Real {
        libm::expf(x)
    }
    #[inline]
    pub fn ln(x: Real) -> Real {
        libm::logf(x)
    }
    #[inline]
    pub fn tanh(x: Real) -> Real {
        libm::tanhf(x)
    }
    #[inline]
    pub fn sqrt(x: Real) -> Real {
        libm::sqrtf(x)
    }
    #[inline]
    pub fn round(x: Real) -> Real {
        libm::roundf(x)
    }
}

pub use imp::{exp, ln, round, sqrt, tanh};

#[inline]
pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(sum(exp(xs)))`.
pub fn log_sum_exp(xs: &[Real]) -> Real {
    let max = xs.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if !max.is_finite() {
        return max;
    }
    let s: Real = xs.iter().map(|&x| exp(x - max)).sum();
    max + ln(s)
}

/// `C = A * B + beta * C` with arbitrary row/column strides (in elements).
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    rsa: isize,
    csa: isize,
    b: &[Real],
    rsb: isize,
    csb: isize,
    beta: Real,
    c: &mut [Real],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (i as isize * rsc + j as isize * csc) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    // Bounds: the furthest element each operand is read/written at must be in range.
    debug_assert!(((m - 1) as isize * rsa + (k - 1) as isize * csa) < a.len() as isize);
    debug_assert!(((k - 1) as isize * rsb + (n - 1) as isize * csb) < b.len() as isize);
    debug_assert!(((m - 1) as isize * rsc + (n - 1) as isize * csc) < c.len() as isize);
    // SAFETY: the debug assertions above spell out the contract; every caller in this
    // crate derives the strides from tensor shapes it has already validated.
    unsafe {
        #[cfg(not(feature = "f32"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
        #[cfg(feature = "f32")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct() {
        let xs = [0.5, -1.0, 2.0];
        let direct = ln(xs.iter().map(|&x| exp(x)).sum::<Real>());
        assert!((log_sum_exp(&xs) - direct).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for &x in &[-30.0, -2.0, 0.0, 0.7, 25.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-12);
        }
    }
}
