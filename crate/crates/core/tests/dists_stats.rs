mod common;

use benel::dists::*;
use benel::selection::ks_distance;
use common::{mean_and_se, GigQuadrature};
use statrs::distribution::{ContinuousCDF, Gamma, StudentsT};

fn draws(n: usize, mut f: impl FnMut() -> f64) -> Vec<f64> {
    (0..n).map(|_| f()).collect()
}

/// 1% KS critical value for `n` draws.
fn ks_critical(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

#[test]
fn gig_matches_quadrature_in_every_regime() {
    let settings = [
        (0.5, 1.0, 1.0),
        (0.5, 0.125, 0.0),
        (0.5, 0.01, 3.0),
        (2.5, 4.0, 0.5),
        (-1.5, 2.0, 3.0),
        (0.3, 0.02, 0.02),
        (0.9, 0.5, 0.01),
        (-0.4, 0.0, 2.0),
        (5.0, 10.0, 10.0),
    ];
    let n = 40_000;
    for (k, &(nu, psi, chi)) in settings.iter().enumerate() {
        let mut rng = RngStream::new(17, k as u64);
        let p = GigParams::new(nu, psi, chi).unwrap();
        let x = draws(n, || sample_gig(p, &mut rng).unwrap());
        assert!(x.iter().all(|v| *v > 0.0 && v.is_finite()));
        let q = GigQuadrature::new(nu, psi.max(1e-300), chi.max(1e-300));
        let ks = ks_distance(&x, |v| q.cdf(v));
        assert!(ks < ks_critical(n), "GIG({nu}, {psi}, {chi}): KS {ks}");
        if psi > 0.0 {
            let (m, se) = mean_and_se(&x);
            assert!((m - q.mean()).abs() < 4.0 * se, "GIG({nu}, {psi}, {chi}): mean {m} vs {}", q.mean());
        }
    }
}

#[test]
fn gig_reciprocal_swaps_parameters() {
    let (nu, psi, chi) = (1.3, 2.0, 0.7);
    let mut rng = RngStream::new(5, 0);
    let n = 40_000;
    let inv = draws(n, || 1.0 / sample_gig(GigParams::new(nu, psi, chi).unwrap(), &mut rng).unwrap());
    let q = GigQuadrature::new(-nu, chi, psi);
    let ks = ks_distance(&inv, |v| q.cdf(v));
    assert!(ks < ks_critical(n), "KS {ks}");
}

#[test]
fn gig_gamma_limit() {
    let mut rng = RngStream::new(6, 0);
    let n = 40_000;
    let x = draws(n, || sample_gig(GigParams::new(0.5, 0.25, 0.0).unwrap(), &mut rng).unwrap());
    let g = Gamma::new(0.5, 0.125).unwrap();
    assert!(ks_distance(&x, |v| g.cdf(v)) < ks_critical(n));
}

#[test]
fn truncated_gamma_matches_conditioned_gamma() {
    let n = 30_000;
    for (k, &(shape, rate, lower)) in [(0.5, 1.0, 1.0), (2.0, 0.5, 0.3), (0.5, 3.0, 12.0), (4.0, 2.0, 9.0)]
        .iter()
        .enumerate()
    {
        let mut rng = RngStream::new(21, k as u64);
        let x = draws(n, || sample_truncated_gamma(shape, rate, lower, &mut rng).unwrap());
        assert!(x.iter().all(|v| *v >= lower));
        let g = Gamma::new(shape, rate).unwrap();
        let tail = g.sf(lower);
        let ks = ks_distance(&x, |v| 1.0 - g.sf(v) / tail);
        assert!(ks < ks_critical(n), "TG({shape}, {rate}, {lower}): KS {ks}");
    }
}

#[test]
fn truncated_gamma_far_tail_uses_rejection_without_bias() {
    // Tail mass below 1e-12, so the rejection sampler is used.
    let (shape, rate, lower) = (0.5, 1.0, 40.0);
    let mut rng = RngStream::new(22, 0);
    let x = draws(50_000, || sample_truncated_gamma(shape, rate, lower, &mut rng).unwrap() - lower);
    let (m, se) = mean_and_se(&x);
    // E[X] = a Q(a+1, b l) / (b Q(a, b l)) with Q the regularized upper gamma.
    let upper_gamma_ratio = {
        let g1 = Gamma::new(shape + 1.0, rate).unwrap().sf(lower);
        let g0 = Gamma::new(shape, rate).unwrap().sf(lower);
        shape * g1 / (rate * g0)
    };
    let exact = upper_gamma_ratio - lower;
    assert!((m - exact).abs() < 4.0 * se, "{m} vs {exact}");
}

#[test]
fn inverse_gamma_moments() {
    let mut rng = RngStream::new(7, 0);
    let (a, b) = (11.0, 10.25);
    let x = draws(100_000, || sample_inverse_gamma(a, b, &mut rng).unwrap());
    let (m, se) = mean_and_se(&x);
    assert!((m - b / (a - 1.0)).abs() < 3.0 * se);
}

#[test]
fn skew_t_is_standardized() {
    for (k, &(nu, xi)) in [(30.0, 1.5), (5.0, 0.7), (10.0, 2.0)].iter().enumerate() {
        let mut rng = RngStream::new(8, k as u64);
        let x = draws(200_000, || sample_skew_t(nu, xi, &mut rng).unwrap());
        let (m, se) = mean_and_se(&x);
        assert!(m.abs() < 4.0 * se, "nu {nu} xi {xi}: mean {m}");
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let (v, vse) = mean_and_se(&sq);
        assert!((v - 1.0).abs() < 4.0 * vse, "nu {nu} xi {xi}: var {v}");
    }
}

#[test]
fn skew_t_raw_moments_match_closed_form() {
    // Unstandardized mean of the two-piece law by numerical integration of
    // its density 2/(xi + 1/xi) [f(x/xi) 1{x>=0} + f(x xi) 1{x<0}].
    let (nu, xi) = (30.0, 1.5);
    let t = StudentsT::new(0.0, 1.0, nu).unwrap();
    use statrs::distribution::Continuous;
    let c = 2.0 / (xi + 1.0 / xi);
    let h = 1e-3;
    let mut mean = 0.0;
    let mut second = 0.0;
    let mut x = -60.0;
    while x < 60.0 {
        let f = if x >= 0.0 { t.pdf(x / xi) } else { t.pdf(x * xi) } * c;
        mean += x * f * h;
        second += x * x * f * h;
        x += h;
    }
    let m = skew_t_moments(nu, xi).unwrap();
    assert!((m.mean - mean).abs() < 1e-4, "{} vs {mean}", m.mean);
    assert!((m.sd - (second - mean * mean).sqrt()).abs() < 1e-4);
}

#[test]
fn student_t_law() {
    let mut rng = RngStream::new(9, 0);
    let n = 40_000;
    let x = draws(n, || sample_student_t(3.0, &mut rng).unwrap());
    let t = StudentsT::new(0.0, 1.0, 3.0).unwrap();
    assert!(ks_distance(&x, |v| t.cdf(v)) < ks_critical(n));
}
