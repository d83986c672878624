//! Summary statistics over window rates and the two-sample Welch t-test used
//! for client/endpoint comparisons.

use serde::{Deserialize, Serialize};

use crate::model::ModelError;

/// Labelled collection of rate observations (B/s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub label: String,
    pub values: Vec<f64>,
}

impl SampleSet {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self, ModelError> {
        if values.is_empty() {
            return Err(ModelError::field("values", "sample set must be non-empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(ModelError::field("values", "rates must be finite and >= 0"));
        }
        Ok(SampleSet { label: label.into(), values })
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.n() as f64
    }

    /// Sample variance (n-1 denominator); 0 for a singleton.
    pub fn variance(&self) -> f64 {
        let n = self.n();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sdev_sample: f64,
    pub min: f64,
    pub max: f64,
    pub p50: f64,
    pub p95: f64,
    pub n: usize,
}

/// Mean, sample standard deviation, extremes, and nearest-rank percentiles.
pub fn summarize(set: &SampleSet) -> Summary {
    let mut sorted = set.values.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Summary {
        mean: set.mean(),
        sdev_sample: set.variance().sqrt(),
        min: sorted[0],
        max: *sorted.last().unwrap(),
        p50: nearest_rank(&sorted, 0.50),
        p95: nearest_rank(&sorted, 0.95),
        n: set.n(),
    }
}

/// Nearest-rank percentile over a sorted slice (rank = ceil(p*n), 1-based).
fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
    pub p_two_sided: f64,
    pub alpha: f64,
    pub significant: bool,
}

/// Welch's unequal-variance two-sample t-test with a two-sided p value.
pub fn welch_t(a: &SampleSet, b: &SampleSet, alpha: f64) -> Result<WelchResult, ModelError> {
    if a.n() < 2 || b.n() < 2 {
        return Err(ModelError::field(
            "values",
            "welch test needs at least 2 samples per group",
        ));
    }
    let (ma, mb) = (a.mean(), b.mean());
    let (va, vb) = (a.variance(), b.variance());
    let (na, nb) = (a.n() as f64, b.n() as f64);

    // Zero-variance conventions: identical deterministic groups compare
    // equal; any mean difference with no spread is treated as certain.
    if va == 0.0 && vb == 0.0 {
        let (t, p) = if ma == mb { (0.0, 1.0) } else { (f64::INFINITY * (ma - mb).signum(), 0.0) };
        return Ok(WelchResult { t, dof: na + nb - 2.0, p_two_sided: p, alpha, significant: p < alpha });
    }

    let se2 = va / na + vb / nb;
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let p = student_t_two_sided_p(t, dof);
    Ok(WelchResult { t, dof, p_two_sided: p, alpha, significant: p < alpha })
}

/// Two-sided p for Student's t: p = I_{v/(v+t^2)}(v/2, 1/2).
pub fn student_t_two_sided_p(t: f64, dof: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    let x = dof / (dof + t * t);
    reg_incomplete_beta(dof / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Regularized incomplete beta function I_x(a, b) by the Lentz continued
/// fraction, converged to 1e-10 relative tolerance.
pub fn reg_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    assert!(a > 0.0 && b > 0.0, "beta parameters must be positive");
    assert!((0.0..=1.0).contains(&x), "x must lie in [0,1]");
    if x == 0.0 {
        return 0.0;
    }
    if x == 1.0 {
        return 1.0;
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    // The continued fraction converges quickly for x < (a+1)/(a+b+2); use the
    // symmetry I_x(a,b) = 1 - I_{1-x}(b,a) otherwise.
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cont_frac(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cont_frac(b, a, 1.0 - x) / b
    }
}

fn beta_cont_frac(a: f64, b: f64, x: f64) -> f64 {
    const EPS: f64 = 1e-10;
    const TINY: f64 = 1e-300;
    const MAX_ITER: usize = 500;

    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // even step
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // odd step
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos approximation of ln Γ(x).
pub fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 6] = [
        76.18009172947146,
        -86.50532032941677,
        24.01409824083091,
        -1.231739572450155,
        0.1208650973866179e-2,
        -0.5395239384953e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000000000190015;
    for c in COEFFS {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.5066282746310005 * ser / x).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(values: &[f64]) -> SampleSet {
        SampleSet::new("test", values.to_vec()).unwrap()
    }

    /// Independent oracle: two-sided p by trapezoidal integration of the
    /// Student-t density over |x| > |t|, via 1 - integral of the central part.
    fn p_by_trapezoid(t: f64, dof: f64) -> f64 {
        let norm = (ln_gamma((dof + 1.0) / 2.0)
            - ln_gamma(dof / 2.0)
            - 0.5 * (dof * std::f64::consts::PI).ln())
        .exp();
        let density = |x: f64| norm * (1.0 + x * x / dof).powf(-(dof + 1.0) / 2.0);
        let (lo, hi) = (-t.abs(), t.abs());
        let steps = 2_000_000usize;
        let h = (hi - lo) / steps as f64;
        let mut central = (density(lo) + density(hi)) / 2.0;
        for i in 1..steps {
            central += density(lo + i as f64 * h);
        }
        1.0 - central * h
    }

    #[test]
    fn summarize_examples() {
        let s = summarize(&set(&[5.0]));
        assert_eq!((s.mean, s.sdev_sample, s.p50, s.p95), (5.0, 0.0, 5.0, 5.0));

        let s = summarize(&set(&[1.0, 2.0, 3.0]));
        assert_eq!(s.mean, 2.0);
        assert!((s.sdev_sample - 1.0).abs() < 1e-12);
        assert_eq!((s.min, s.max, s.p50, s.p95), (1.0, 3.0, 2.0, 3.0));

        let s = summarize(&set(&[0.0, 0.0, 0.0, 0.0]));
        assert_eq!((s.mean, s.sdev_sample, s.min, s.max, s.p50, s.p95), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_sample_set_rejected() {
        assert!(SampleSet::new("x", vec![]).is_err());
        assert!(SampleSet::new("x", vec![f64::NAN]).is_err());
    }

    #[test]
    fn welch_identical_sets_give_t0_p1() {
        let a = set(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let r = welch_t(&a, &a, 0.05).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p_two_sided, 1.0);
        assert!(!r.significant);
    }

    #[test]
    fn welch_hand_derived_example() {
        // m=3 vs m=4, both variances 2.5, n=5: t = -1 / sqrt(1) = -1, dof = 8.
        let a = set(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let b = set(&[2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = welch_t(&a, &b, 0.05).unwrap();
        assert!((r.t - (-1.0)).abs() < 1e-12, "t = {}", r.t);
        assert!((r.dof - 8.0).abs() < 1e-12, "dof = {}", r.dof);
    }

    #[test]
    fn p_matches_independent_integration_oracle() {
        let p = student_t_two_sided_p(-1.0, 8.0);
        let oracle = p_by_trapezoid(-1.0, 8.0);
        assert!((p - oracle).abs() < 1e-6, "p = {p}, oracle = {oracle}");
    }

    #[test]
    fn zero_variance_conventions() {
        let a = set(&[10.0, 10.0, 10.0]);
        let b = set(&[20.0, 20.0, 20.0]);
        let r = welch_t(&a, &b, 0.05).unwrap();
        assert_eq!(r.p_two_sided, 0.0);
        assert!(r.significant);

        let r = welch_t(&a, &a, 0.05).unwrap();
        assert_eq!(r.p_two_sided, 1.0);
    }

    #[test]
    fn welch_needs_two_samples_per_group() {
        let a = set(&[1.0]);
        let b = set(&[1.0, 2.0]);
        assert!(welch_t(&a, &b, 0.05).is_err());
    }

    #[test]
    fn welch_symmetry() {
        let a = set(&[1.0, 2.0, 3.5, 4.0]);
        let b = set(&[2.0, 2.5, 5.0, 7.0]);
        let ab = welch_t(&a, &b, 0.05).unwrap();
        let ba = welch_t(&b, &a, 0.05).unwrap();
        assert!((ab.t + ba.t).abs() < 1e-12);
        assert!((ab.p_two_sided - ba.p_two_sided).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn incomplete_beta_symmetry(a in 0.5f64..20.0, b in 0.5f64..20.0, x in 0.0f64..1.0) {
            let lhs = reg_incomplete_beta(a, b, x) + reg_incomplete_beta(b, a, 1.0 - x);
            prop_assert!((lhs - 1.0).abs() < 1e-9, "a={a} b={b} x={x} sum={lhs}");
        }

        #[test]
        fn welch_scale_invariance(
            vals_a in prop::collection::vec(1.0f64..100.0, 3..10),
            vals_b in prop::collection::vec(1.0f64..100.0, 3..10),
            scale in 0.1f64..1000.0,
        ) {
            let a = set(&vals_a);
            let b = set(&vals_b);
            let scaled_a = set(&vals_a.iter().map(|v| v * scale).collect::<Vec<_>>());
            let scaled_b = set(&vals_b.iter().map(|v| v * scale).collect::<Vec<_>>());
            let r1 = welch_t(&a, &b, 0.05).unwrap();
            let r2 = welch_t(&scaled_a, &scaled_b, 0.05).unwrap();
            if r1.t.is_finite() {
                prop_assert!((r1.t - r2.t).abs() < 1e-6 * (1.0 + r1.t.abs()));
                prop_assert!((r1.p_two_sided - r2.p_two_sided).abs() < 1e-7);
            }
        }

        #[test]
        fn p_monotone_in_mean_gap(base in 1.0f64..50.0, gap1 in 0.0f64..5.0, extra in 0.01f64..5.0) {
            // Same spread, larger mean separation never increases p.
            let a = set(&[base - 1.0, base, base + 1.0, base + 2.0]);
            let shift = |d: f64| set(&[base - 1.0 + d, base + d, base + 1.0 + d, base + 2.0 + d]);
            let p_near = welch_t(&a, &shift(gap1), 0.05).unwrap().p_two_sided;
            let p_far = welch_t(&a, &shift(gap1 + extra), 0.05).unwrap().p_two_sided;
            prop_assert!(p_far <= p_near + 1e-12, "p_near={p_near} p_far={p_far}");
        }
    }
}
