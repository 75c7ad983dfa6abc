//! Seeded random streams and the non-uniform samplers used by the model and
//! the simulation designs.
//!
//! Conventions: gamma laws are parameterized by shape and *rate*; the inverse
//! gamma by shape `a` and scale `b` (density proportional to
//! `x^(-a-1) exp(-b/x)`); the generalized inverse Gaussian by `(nu, psi, chi)`
//! with density proportional to `x^(nu-1) exp(-(chi/x + psi x)/2)`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_ur, ln_gamma};

use crate::{BenelError, Result};

/// A reproducible uniform stream. Streams sharing a seed but differing in
/// `stream_id` are disjoint ChaCha8 keystreams.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform on (0, 1].
    pub fn open_unit(&mut self) -> f64 {
        1.0 - self.inner.random::<f64>()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Mixes a base seed with a tag into a new seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(BenelError::InvalidInput(format!("{name} must be positive and finite, got {v}")))
    }
}

pub fn sample_normal(mean: f64, sd: f64, rng: &mut RngStream) -> Result<f64> {
    if !mean.is_finite() || !(sd.is_finite() && sd >= 0.0) {
        return Err(BenelError::InvalidInput(format!("invalid normal parameters ({mean}, {sd})")));
    }
    let z: f64 = StandardNormal.sample(rng);
    Ok(mean + sd * z)
}

pub fn sample_gamma(shape: f64, rate: f64, rng: &mut RngStream) -> Result<f64> {
    positive("gamma shape", shape)?;
    positive("gamma rate", rate)?;
    let g = Gamma::new(shape, 1.0 / rate).map_err(|e| BenelError::InvalidInput(e.to_string()))?;
    Ok(g.sample(rng))
}

/// Inverse gamma with shape `a` and scale `b`; mean `b / (a - 1)` for `a > 1`.
pub fn sample_inverse_gamma(shape: f64, scale: f64, rng: &mut RngStream) -> Result<f64> {
    positive("inverse gamma scale", scale)?;
    Ok(1.0 / sample_gamma(shape, scale, rng)?)
}

pub fn sample_student_t(df: f64, rng: &mut RngStream) -> Result<f64> {
    positive("degrees of freedom", df)?;
    let t = StudentT::new(df).map_err(|e| BenelError::InvalidInput(e.to_string()))?;
    Ok(t.sample(rng))
}

/// One normal mixture component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalComponent {
    pub mean: f64,
    pub sd: f64,
}

pub fn sample_mixture_normal(
    components: &[NormalComponent],
    weights: &[f64],
    rng: &mut RngStream,
) -> Result<f64> {
    if components.is_empty() || components.len() != weights.len() {
        return Err(BenelError::InvalidInput(
            "mixture needs one weight per component and at least one component".into(),
        ));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(BenelError::InvalidInput("mixture weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    positive("total mixture weight", total)?;
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut pick = components.len() - 1;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            pick = k;
            break;
        }
    }
    let c = components[pick];
    sample_normal(c.mean, c.sd, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GigParams {
    pub nu: f64,
    pub psi: f64,
    pub chi: f64,
}

impl GigParams {
    pub fn new(nu: f64, psi: f64, chi: f64) -> Result<Self> {
        let p = Self { nu, psi, chi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { nu, psi, chi } = *self;
        if !(nu.is_finite() && psi.is_finite() && chi.is_finite()) || psi < 0.0 || chi < 0.0 {
            return Err(BenelError::InvalidInput(format!("invalid GIG parameters {self:?}")));
        }
        let ok = if nu > 0.0 {
            psi > 0.0
        } else if nu < 0.0 {
            chi > 0.0
        } else {
            psi > 0.0 && chi > 0.0
        };
        if ok {
            Ok(())
        } else {
            Err(BenelError::InvalidInput(format!("GIG parameters {self:?} give an improper law")))
        }
    }
}

/// Parameters this close to zero are treated as the gamma / inverse-gamma limit.
const GIG_ZERO: f64 = 10.0 * f64::EPSILON;

/// Draws from GIG(nu, psi, chi) with the rejection methods of Hörmann and
/// Leydold (2014): ratio-of-uniforms with mode shift for large `nu` or
/// `omega = sqrt(psi chi)`, ratio-of-uniforms without shift in the middle
/// region, and a three-piece hat for the non-log-concave corner.
pub fn sample_gig(params: GigParams, rng: &mut RngStream) -> Result<f64> {
    params.validate()?;
    let GigParams { nu, psi, chi } = params;
    if chi < GIG_ZERO {
        // Gamma(nu, rate psi/2); validation guarantees nu > 0 here.
        return sample_gamma(nu, psi / 2.0, rng);
    }
    if psi < GIG_ZERO {
        // nu < 0 here: reciprocal of Gamma(-nu, rate chi/2).
        return Ok(1.0 / sample_gamma(-nu, chi / 2.0, rng)?);
    }

    let lambda = nu.abs();
    let alpha = (chi / psi).sqrt();
    let omega = (psi * chi).sqrt();
    let x = if lambda > 2.0 || omega > 3.0 {
        gig_rou_shift(lambda, omega, rng)
    } else if lambda >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
        gig_rou_noshift(lambda, omega, rng)
    } else {
        gig_concave_hat(lambda, omega, rng)
    };
    Ok(if nu < 0.0 { alpha / x } else { alpha * x })
}

fn gig_mode(lambda: f64, omega: f64) -> f64 {
    if lambda >= 1.0 {
        (((lambda - 1.0).powi(2) + omega * omega).sqrt() + (lambda - 1.0)) / omega
    } else {
        omega / (((1.0 - lambda).powi(2) + omega * omega).sqrt() + (1.0 - lambda))
    }
}

fn gig_rou_noshift(lambda: f64, omega: f64, rng: &mut RngStream) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    let ym = ((lambda + 1.0) + ((lambda + 1.0).powi(2) + omega * omega).sqrt()) / omega;
    let um = (0.5 * (lambda + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();
    loop {
        let u = um * rng.open_unit();
        let v = rng.open_unit();
        let x = u / v;
        if v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn gig_rou_shift(lambda: f64, omega: f64, rng: &mut RngStream) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);

    // Extremes of (x - xm) sqrt(f(x)) via the roots of a depressed cubic.
    let a = -(2.0 * (lambda + 1.0) / omega + xm);
    let b = 2.0 * (lambda - 1.0) * xm / omega - 1.0;
    let c = xm;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let phi = (-q / (2.0 * (-(p * p * p) / 27.0).sqrt())).acos();
    let fak = 2.0 * (-p / 3.0).sqrt();
    let y1 = fak * (phi / 3.0).cos() - a / 3.0;
    let y2 = fak * (phi / 3.0 + 4.0 / 3.0 * std::f64::consts::PI).cos() - a / 3.0;
    let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
    let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();

    loop {
        let u = uminus + rng.open_unit() * (uplus - uminus);
        let v = rng.open_unit();
        let x = u / v + xm;
        if x > 0.0 && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn gig_concave_hat(lambda: f64, omega: f64, rng: &mut RngStream) -> f64 {
    let xm = gig_mode(lambda, omega);
    let x0 = omega / (1.0 - lambda);
    let k0 = ((lambda - 1.0) * xm.ln() - 0.5 * omega * (xm + 1.0 / xm)).exp();
    let a0 = k0 * x0;
    let (k1, a1, k2, a2);
    if x0 >= 2.0 / omega {
        k1 = 0.0;
        a1 = 0.0;
        k2 = x0.powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega;
    } else {
        k1 = (-omega).exp();
        a1 = if lambda == 0.0 {
            k1 * (2.0 / (omega * omega)).ln()
        } else {
            k1 / lambda * ((2.0 / omega).powf(lambda) - x0.powf(lambda))
        };
        k2 = (2.0 / omega).powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-1.0f64).exp() / omega;
    }
    let total = a0 + a1 + a2;

    loop {
        let mut v = total * rng.open_unit();
        let (x, hx);
        if v <= a0 {
            x = x0 * v / a0;
            hx = k0;
        } else {
            v -= a0;
            if v <= a1 {
                if lambda == 0.0 {
                    x = omega * (omega.exp() * v).exp();
                    hx = k1 / x;
                } else {
                    x = (x0.powf(lambda) + lambda / k1 * v).powf(1.0 / lambda);
                    hx = k1 * x.powf(lambda - 1.0);
                }
            } else {
                v -= a1;
                let a = x0.max(2.0 / omega);
                x = -2.0 / omega * ((-omega / 2.0 * a).exp() - omega / (2.0 * k2) * v).ln();
                hx = k2 * (-omega / 2.0 * x).exp();
            }
        }
        let u = rng.open_unit() * hx;
        if u.ln() <= (lambda - 1.0) * x.ln() - omega / 2.0 * (x + 1.0 / x) {
            return x;
        }
    }
}

/// Truncation mass below which inversion loses precision.
const TRUNC_INVERSION_MIN_MASS: f64 = 1e-12;

/// Gamma(shape, rate) conditioned on `(lower, inf)`.
///
/// Inverts the upper regularized incomplete gamma function on the truncated
/// region; when the tail mass is below `1e-12`, falls back to rejection from
/// a shifted exponential.
pub fn sample_truncated_gamma(shape: f64, rate: f64, lower: f64, rng: &mut RngStream) -> Result<f64> {
    positive("truncated gamma shape", shape)?;
    positive("truncated gamma rate", rate)?;
    if !(lower.is_finite() && lower >= 0.0) {
        return Err(BenelError::InvalidInput(format!("truncation point must be >= 0, got {lower}")));
    }
    if lower == 0.0 {
        return sample_gamma(shape, rate, rng);
    }
    let z_lo = rate * lower;
    let mass = gamma_ur(shape, z_lo);
    if mass < TRUNC_INVERSION_MIN_MASS || !mass.is_finite() {
        return Ok(truncated_gamma_tail_rejection(shape, rate, lower, rng));
    }
    let target = rng.open_unit() * mass;
    let z = invert_upper_gamma(shape, target, z_lo);
    let x = z / rate;
    // Inversion noise can land a hair below the truncation point.
    Ok(if x > lower { x } else { truncated_gamma_tail_rejection(shape, rate, lower, rng) })
}

/// Solves `Q(shape, z) = target` for `z >= z_lo`, where `Q(shape, z_lo) >= target`.
fn invert_upper_gamma(shape: f64, target: f64, z_lo: f64) -> f64 {
    let mut lo = z_lo;
    let mut hi = (z_lo + 1.0).max(2.0 * z_lo);
    while gamma_ur(shape, hi) > target {
        lo = hi;
        hi *= 2.0;
    }
    let log_norm = ln_gamma(shape);
    let mut z = 0.5 * (lo + hi);
    for _ in 0..200 {
        let q = gamma_ur(shape, z);
        let f = q - target;
        if f > 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        if (hi - lo) <= 1e-14 * hi.max(1.0) || f == 0.0 {
            break;
        }
        // Newton on Q, whose derivative is -z^(a-1) e^(-z) / Gamma(a).
        let dens = ((shape - 1.0) * z.ln() - z - log_norm).exp();
        let newton = z + f / dens;
        z = if dens > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
    }
    z
}

/// Rejection sampler for the far gamma tail using `lower + Exp(rate')`
/// proposals with an optimized exponential rate.
fn truncated_gamma_tail_rejection(shape: f64, rate: f64, lower: f64, rng: &mut RngStream) -> f64 {
    // Target on (l, inf): x^(a-1) e^(-b x). Proposal: rate lam <= b.
    let (a, b, l) = (shape, rate, lower);
    let lam = if a <= 1.0 {
        b
    } else {
        let c = b * l - a;
        ((c + (c * c + 4.0 * b * l).sqrt()) / (2.0 * l)).min(b)
    };
    // log of x^(a-1) e^(-(b - lam) x), maximized over x >= l.
    let log_ratio = |x: f64| (a - 1.0) * x.ln() - (b - lam) * x;
    let x_star = if a > 1.0 && b > lam { ((a - 1.0) / (b - lam)).max(l) } else { l };
    let log_m = log_ratio(x_star);
    loop {
        let x = l - rng.open_unit().ln() / lam;
        if rng.open_unit().ln() <= log_ratio(x) - log_m {
            return x;
        }
    }
}

/// Location and scale of the (unstandardized) Fernández–Steel skew Student t.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SkewTMoments {
    pub mean: f64,
    pub sd: f64,
}

pub fn skew_t_moments(nu: f64, xi: f64) -> Result<SkewTMoments> {
    if !(nu.is_finite() && nu > 2.0) {
        return Err(BenelError::InvalidInput(format!(
            "skew t needs nu > 2 for a finite variance, got {nu}"
        )));
    }
    positive("skew t xi", xi)?;
    // E|T| for Student t with nu degrees of freedom, and E[T^2].
    let m1 = 2.0 * nu.sqrt() * (ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0)).exp()
        / (std::f64::consts::PI.sqrt() * (nu - 1.0));
    let m2 = nu / (nu - 2.0);
    let mean = m1 * (xi - 1.0 / xi);
    let var = (m2 - m1 * m1) * (xi * xi + 1.0 / (xi * xi)) + 2.0 * m1 * m1 - m2;
    Ok(SkewTMoments { mean, sd: var.sqrt() })
}

/// Standardized (mean 0, variance 1) Fernández–Steel skew Student t draw.
pub fn sample_skew_t(nu: f64, xi: f64, rng: &mut RngStream) -> Result<f64> {
    let moments = skew_t_moments(nu, xi)?;
    let t = sample_student_t(nu, rng)?.abs();
    let p_pos = xi * xi / (1.0 + xi * xi);
    let raw = if rng.random::<f64>() < p_pos { xi * t } else { -t / xi };
    Ok((raw - moments.mean) / moments.sd)
}
