//! Samplers for the exogenous priors of the synthetic SCMs.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Open01, StandardNormal};

/// `Beta(a, b)` as `G_a / (G_a + G_b)` with Marsaglia–Tsang gamma draws.
pub fn sample_beta<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let ga = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
    let gb = Gamma::new(b, 1.0).expect("positive shape").sample(rng);
    ga / (ga + gb)
}

/// Von Mises on `(-pi, pi]` via the Best–Fisher wrapped-Cauchy rejection sampler.
pub fn sample_von_mises<R: Rng + ?Sized>(mu: f64, kappa: f64, rng: &mut R) -> f64 {
    use std::f64::consts::PI;
    if kappa < 1e-8 {
        let u: f64 = rng.sample(Open01);
        return wrap_angle(mu + PI * (2.0 * u - 1.0));
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.sample(Open01);
        let u2: f64 = rng.sample(Open01);
        let u3: f64 = rng.sample(Open01);
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let theta = f.clamp(-1.0, 1.0).acos();
            let theta = if u3 > 0.5 { theta } else { -theta };
            return wrap_angle(mu + theta);
        }
    }
}

fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

/// Continuous Bernoulli on `[0, 1]` by inverting its closed-form CDF.
pub fn sample_continuous_bernoulli<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    continuous_bernoulli_icdf(lambda, u)
}

/// Inverse CDF of the continuous Bernoulli with parameter `lambda`.
pub fn continuous_bernoulli_icdf(lambda: f64, u: f64) -> f64 {
    if (lambda - 0.5).abs() < 1e-6 {
        return u;
    }
    let ratio = lambda / (1.0 - lambda);
    let x = (1.0 + u * (2.0 * lambda - 1.0) / (1.0 - lambda)).ln() / ratio.ln();
    x.clamp(0.0, 1.0)
}

/// `Normal(0, variance)`.
pub fn sample_normal<R: Rng + ?Sized>(variance: f64, rng: &mut R) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * variance.sqrt()
}

/// Uniform on the open interval `(lo, hi)`.
pub fn sample_uniform<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    lo + (hi - lo) * u
}
