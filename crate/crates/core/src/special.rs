//! Scalar special functions: log-Bessel K, digamma/trigamma, normal and gamma
//! quantiles, generalized inverse Gaussian expectations and the degrees-of-freedom
//! root solver.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use libm::erfc;
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_lr, gamma_ur};

use crate::error::{Error, Result};

pub use statrs::function::gamma::ln_gamma;

const EPS: f64 = 1e-16;
const MAX_SERIES: usize = 10_000;

/// Taylor coefficients of `1/Gamma(z)` about zero (A&S 6.1.34); `1/Gamma(1+z) = sum c[k] z^k`.
const RECIP_GAMMA: [f64; 26] = [
    1.0,
    0.577_215_664_901_532_9,
    -0.655_878_071_520_253_8,
    -0.042_002_635_034_095_2,
    0.166_538_611_382_291_5,
    -0.042_197_734_555_544_3,
    -0.009_621_971_527_877_0,
    0.007_218_943_246_663_0,
    -0.001_165_167_591_859_1,
    -0.000_215_241_674_114_9,
    0.000_128_050_282_388_2,
    -0.000_020_134_854_780_7,
    -0.000_001_250_493_482_1,
    0.000_001_133_027_232_0,
    -0.000_000_205_633_841_7,
    0.000_000_006_116_095_0,
    0.000_000_005_002_007_5,
    -0.000_000_001_181_274_6,
    0.000_000_000_104_342_7,
    0.000_000_000_007_782_3,
    -0.000_000_000_003_696_8,
    0.000_000_000_000_510_0,
    -0.000_000_000_000_020_6,
    -0.000_000_000_000_005_4,
    0.000_000_000_000_001_4,
    0.000_000_000_000_000_1,
];

/// `ln K_order(x)` for the modified Bessel function of the third kind.
///
/// Uses Temme's series (`x < 2`) or Steed's continued fraction (`x >= 2`) for an order
/// in `[-1/2, 1/2]`, then forward recurrence on the ratio `K_{m+1}/K_m`, so the
/// result stays finite where `K` itself would under- or overflow.
pub fn log_bessel_k(order: f64, x: f64) -> Result<f64> {
    if !order.is_finite() {
        return Err(Error::domain(format!("Bessel order must be finite, got {order}")));
    }
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("Bessel argument must be positive and finite, got {x}")));
    }
    let nu = order.abs();
    let steps = (nu + 0.5).floor() as usize;
    let mu = nu - steps as f64;
    let (mut log_k, mut ratio) = if x < 2.0 {
        temme_k(mu, x)
    } else {
        steed_k(mu, x)
    };
    for i in 1..=steps {
        log_k += ratio.ln();
        ratio = 1.0 / ratio + 2.0 * (mu + i as f64) / x;
    }
    Ok(log_k)
}

/// Returns `(ln K_mu(x), K_{mu+1}(x)/K_mu(x))` for `|mu| <= 1/2`, `x < 2`.
fn temme_k(mu: f64, x: f64) -> (f64, f64) {
    let mu2 = mu * mu;
    let half_x = 0.5 * x;
    let pimu = PI * mu;
    let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
    let d = -half_x.ln();
    let e = mu * d;
    let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
    let (gam1, gam2, gampl, gammi) = temme_gammas(mu);
    let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
    let mut sum = ff;
    let ee = e.exp();
    let mut p = 0.5 * ee / gampl;
    let mut q = 0.5 / (ee * gammi);
    let mut c = 1.0;
    let dd = half_x * half_x;
    let mut sum1 = p;
    for i in 1..MAX_SERIES {
        let fi = i as f64;
        ff = (fi * ff + p + q) / (fi * fi - mu2);
        c *= dd / fi;
        p /= fi - mu;
        q /= fi + mu;
        let del = c * ff;
        sum += del;
        sum1 += c * (p - fi * ff);
        if del.abs() < sum.abs() * EPS {
            break;
        }
    }
    let k1 = sum1 * 2.0 / x;
    (sum.ln(), k1 / sum)
}

/// `(gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu))` as used by Temme's method.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    let mu2 = mu * mu;
    // Even and odd parts of 1/Gamma(1+z) in powers of mu^2.
    let mut even = 0.0;
    let mut odd = 0.0;
    let mut pow = 1.0;
    for k in (0..RECIP_GAMMA.len()).step_by(2) {
        even += RECIP_GAMMA[k] * pow;
        if k + 1 < RECIP_GAMMA.len() {
            odd += RECIP_GAMMA[k + 1] * pow;
        }
        pow *= mu2;
    }
    let gampl = even + mu * odd;
    let gammi = even - mu * odd;
    (-odd, even, gampl, gammi)
}

/// Returns `(ln K_mu(x), K_{mu+1}(x)/K_mu(x))` for `|mu| <= 1/2`, `x >= 2`.
fn steed_k(mu: f64, x: f64) -> (f64, f64) {
    let mu2 = mu * mu;
    let mut b = 2.0 * (1.0 + x);
    let mut d = 1.0 / b;
    let mut delh = d;
    let mut h = d;
    let mut q1 = 0.0;
    let mut q2 = 1.0;
    let a1 = 0.25 - mu2;
    let mut q = a1;
    let mut c = a1;
    let mut a = -a1;
    let mut s = 1.0 + q * delh;
    for i in 2..MAX_SERIES {
        let fi = i as f64;
        a -= 2.0 * (fi - 1.0);
        c = -a * c / fi;
        let qnew = (q1 - b * q2) / a;
        q1 = q2;
        q2 = qnew;
        q += c * qnew;
        b += 2.0;
        d = 1.0 / (b + a * d);
        delh *= b * d - 1.0;
        h += delh;
        let dels = q * delh;
        s += dels;
        if (dels / s).abs() < EPS {
            break;
        }
    }
    h *= a1;
    let log_k = 0.5 * (PI / (2.0 * x)).ln() - x - s.ln();
    (log_k, (mu + x + 0.5 - h) / x)
}

/// Digamma function `d/dx ln Gamma(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("digamma requires x > 0, got {x}")));
    }
    Ok(digamma_unchecked(x))
}

pub(crate) fn digamma_unchecked(x: f64) -> f64 {
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    acc + x.ln() - 0.5 * inv - series
}

/// Trigamma function, the derivative of [`digamma`].
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::domain(format!("trigamma requires x > 0, got {x}")));
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2
                            * (1.0 / 42.0
                                - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * 691.0 / 2730.0)))));
    Ok(acc + series)
}

/// Standard normal CDF.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal quantile; saturates to `±inf` at `0` and `1`.
pub fn norm_quantile(u: f64) -> f64 {
    let z = norm_quantile_fast(u);
    if !z.is_finite() {
        return z;
    }
    // one Halley step on the erfc-based CDF
    let dens = norm_pdf(z);
    if dens == 0.0 {
        return z;
    }
    let r = (norm_cdf(z) - u) / dens;
    z - r / (1.0 + 0.5 * z * r)
}

/// Normal quantile to about 1e-10 relative, for inner loops.
#[inline]
pub(crate) fn norm_quantile_fast(u: f64) -> f64 {
    if u <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if u >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * u)
}

/// A standard normal variable truncated to `(-inf, h]`.
#[derive(Debug, Clone, Copy)]
pub struct UpperTruncatedNormal {
    /// `ln Phi(h)`
    pub log_mass: f64,
    pub mean: f64,
    pub variance: f64,
}

const MILLS_FRACTION_BELOW: f64 = -5.0;

/// Log mass, mean and variance of `N(0, 1)` restricted to `(-inf, h]`, stable for
/// any finite `h`.
#[inline]
pub fn upper_truncated_normal(h: f64) -> UpperTruncatedNormal {
    const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
    if h >= MILLS_FRACTION_BELOW {
        let (mass, log_mass) = if h > 0.0 {
            let tail = 0.5 * erfc(h * FRAC_1_SQRT_2);
            (1.0 - tail, (-tail).ln_1p())
        } else {
            let mass = 0.5 * erfc(-h * FRAC_1_SQRT_2);
            (mass, mass.ln())
        };
        let mills = norm_pdf(h) / mass;
        let variance = (1.0 - h * mills - mills * mills).max(0.0);
        UpperTruncatedNormal {
            log_mass,
            mean: -mills,
            variance,
        }
    } else {
        let x = -h;
        let ratio = mills_ratio_fraction(x);
        let tail = 1.0 - x * ratio;
        let mills = 1.0 / ratio;
        UpperTruncatedNormal {
            log_mass: -0.5 * x * x - LN_SQRT_2PI + ratio.ln(),
            mean: -mills,
            variance: (1.0 - mills * mills * tail).max(0.0),
        }
    }
}

/// [`upper_truncated_normal`] with the mass itself in place of its log; the mass
/// underflows to zero below `h` of about -37.5.
#[inline]
pub fn upper_truncated_normal_mass(h: f64) -> (f64, f64, f64) {
    const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    if h >= MILLS_FRACTION_BELOW {
        let mass = if h > 0.0 {
            1.0 - 0.5 * erfc(h * FRAC_1_SQRT_2)
        } else {
            0.5 * erfc(-h * FRAC_1_SQRT_2)
        };
        let mills = norm_pdf(h) / mass;
        (mass, -mills, (1.0 - h * mills - mills * mills).max(0.0))
    } else {
        let x = -h;
        let ratio = mills_ratio_fraction(x);
        let mills = 1.0 / ratio;
        let mass = (-0.5 * x * x).exp() * FRAC_1_SQRT_2PI * ratio;
        (mass, -mills, (1.0 - mills * mills * (1.0 - x * ratio)).max(0.0))
    }
}

/// Mills ratio `(1 - Phi(x)) / phi(x)` for `x >= 5` by Lentz's method on
/// `1/(x + 1/(x + 2/(x + 3/(x + ...))))`.
fn mills_ratio_fraction(x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64;
        d = x + a * d;
        d = if d.abs() < TINY { 1.0 / TINY } else { 1.0 / d };
        c = x + a / c;
        if c.abs() < TINY {
            c = TINY;
        }
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// Quantile of the unit-rate gamma distribution with the given shape.
pub fn gamma_quantile(shape: f64, u: f64) -> f64 {
    if u <= 0.0 {
        return 0.0;
    }
    if u >= 1.0 {
        return f64::INFINITY;
    }
    let lg = ln_gamma(shape);
    let upper = u > 0.5;
    let target = if upper { 1.0 - u } else { u };
    // Residual that is increasing in x.
    let resid = |x: f64| {
        if upper {
            target - gamma_ur(shape, x)
        } else {
            gamma_lr(shape, x) - target
        }
    };

    let mut x = {
        let z = norm_quantile(u);
        let wh = shape * (1.0 - 1.0 / (9.0 * shape) + z / (3.0 * shape.sqrt())).powi(3);
        if wh > 0.0 && shape >= 1.0 {
            wh
        } else if !upper {
            let small = ((u.ln() + ln_gamma(shape + 1.0)) / shape).exp();
            if small < 1e-8 {
                // P(a, x) = x^a / Gamma(a+1) * (1 - a x/(a+1) + ...)
                return small * (1.0 + small / (shape + 1.0));
            }
            small
        } else {
            shape.max(1.0) - (1.0 - u).ln()
        }
    };

    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    for _ in 0..200 {
        let f = resid(x);
        if f == 0.0 {
            return x;
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let dens = ((shape - 1.0) * x.ln() - x - lg).exp();
        let mut next = if dens > 0.0 && dens.is_finite() {
            let step = f / dens;
            let corr = 1.0 - 0.5 * step * ((shape - 1.0) / x - 1.0);
            if corr > 0.2 && corr < 5.0 {
                x - step / corr
            } else {
                x - step
            }
        } else {
            f64::NAN
        };
        if !(next > lo && next < hi) {
            next = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * x.max(1.0) };
        }
        if (next - x).abs() <= 1e-14 * x.abs() {
            return next;
        }
        x = next;
    }
    x
}

/// Parameters of a generalized inverse Gaussian law with density proportional to
/// `y^(lambda-1) exp(-(chi/y + psi*y)/2)` on `y > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigParams {
    psi: f64,
    chi: f64,
    lambda: f64,
}

impl GigParams {
    /// Interior parameters only: `psi > 0` and `chi > 0`.
    pub fn new(psi: f64, chi: f64, lambda: f64) -> Result<Self> {
        if !(psi > 0.0 && psi.is_finite()) || !(chi > 0.0 && chi.is_finite()) {
            return Err(Error::domain(format!(
                "GIG requires psi > 0 and chi > 0, got psi={psi}, chi={chi}"
            )));
        }
        if !lambda.is_finite() {
            return Err(Error::domain("GIG index must be finite"));
        }
        Ok(Self { psi, chi, lambda })
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn chi(&self) -> f64 {
        self.chi
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn log_pdf(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let omega = (self.psi * self.chi).sqrt();
        let log_norm = 0.5 * self.lambda * (self.psi / self.chi).ln()
            - std::f64::consts::LN_2
            - log_bessel_k(self.lambda, omega).unwrap_or(f64::NAN);
        log_norm + (self.lambda - 1.0) * y.ln() - 0.5 * (self.chi / y + self.psi * y)
    }
}

/// Step in the order used for the central difference of `ln K_lambda` in `lambda`.
pub const BESSEL_ORDER_STEP: f64 = 1e-5;

/// Expectations of a GIG variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GigMoments {
    /// `E[Y]`
    pub mean: f64,
    /// `E[1/Y]`
    pub mean_inv: f64,
    /// `E[ln Y]`
    pub mean_log: f64,
}

/// `E[Y]`, `E[1/Y]` and `E[ln Y]` in Bessel-ratio form; the order derivative of
/// `K` is a central difference of [`log_bessel_k`].
pub fn gig_moments(params: &GigParams) -> Result<GigMoments> {
    let GigParams { psi, chi, lambda } = *params;
    let omega = (psi * chi).sqrt();
    let log_k = log_bessel_k(lambda, omega)?;
    let ratio = (log_bessel_k(lambda + 1.0, omega)? - log_k).exp();
    let mean = (chi / psi).sqrt() * ratio;
    let mean_inv = (psi / chi).sqrt() * ratio - 2.0 * lambda / chi;
    let h = BESSEL_ORDER_STEP;
    let dlog_k =
        (log_bessel_k(lambda + h, omega)? - log_bessel_k(lambda - h, omega)?) / (2.0 * h);
    let mean_log = 0.5 * (chi / psi).ln() + dlog_k;
    Ok(GigMoments {
        mean,
        mean_inv,
        mean_log,
    })
}

/// Default search bracket for the degrees of freedom.
pub const NU_BRACKET: (f64, f64) = (2.0001, 200.0);

/// Outcome of the degrees-of-freedom solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NuSolution {
    Root(f64),
    /// The estimating equation is positive on the whole bracket.
    SaturatedHigh(f64),
    /// The estimating equation is negative on the whole bracket.
    SaturatedLow(f64),
}

impl NuSolution {
    pub fn value(self) -> f64 {
        match self {
            NuSolution::Root(v) | NuSolution::SaturatedHigh(v) | NuSolution::SaturatedLow(v) => v,
        }
    }
}

/// Solves `ln(nu/2) - digamma(nu/2) - s + 1 = 0` for `nu` in `[nu_lo, nu_hi]`.
pub fn solve_nu(s: f64, nu_lo: f64, nu_hi: f64) -> Result<f64> {
    solve_nu_detailed(s, nu_lo, nu_hi).map(NuSolution::value)
}

pub fn solve_nu_detailed(s: f64, nu_lo: f64, nu_hi: f64) -> Result<NuSolution> {
    if !(nu_lo > 0.0) || !(nu_hi > nu_lo) || !nu_hi.is_finite() {
        return Err(Error::domain(format!(
            "invalid degrees-of-freedom bracket [{nu_lo}, {nu_hi}]"
        )));
    }
    if !s.is_finite() {
        return Err(Error::domain(format!("non-finite statistic {s}")));
    }
    let g = |nu: f64| (0.5 * nu).ln() - digamma_unchecked(0.5 * nu) - s + 1.0;
    let g_lo = g(nu_lo);
    let g_hi = g(nu_hi);
    if g_hi > 0.0 {
        return Ok(NuSolution::SaturatedHigh(nu_hi));
    }
    if g_lo < 0.0 {
        return Ok(NuSolution::SaturatedLow(nu_lo));
    }
    if g_hi == 0.0 {
        return Ok(NuSolution::Root(nu_hi));
    }
    // g decreasing: g(lo) >= 0 >= g(hi).
    let (mut lo, mut hi) = (nu_lo, nu_hi);
    let mut nu = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = g(nu);
        if f > 0.0 {
            lo = nu;
        } else {
            hi = nu;
        }
        let deriv = 1.0 / nu - 0.5 * trigamma(0.5 * nu)?;
        let newton = nu - f / deriv;
        let next = if deriv < 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - nu).abs() < 1e-12 * nu || hi - lo < 1e-12 * nu {
            return Ok(NuSolution::Root(next));
        }
        nu = next;
    }
    Ok(NuSolution::Root(nu))
}

/// `E|T|` for a univariate Student-t variable with `nu > 1` degrees of freedom.
pub fn t_abs_mean(nu: f64) -> f64 {
    ((nu / PI).ln() * 0.5 + ln_gamma(0.5 * (nu - 1.0)) - ln_gamma(0.5 * nu)).exp()
}
