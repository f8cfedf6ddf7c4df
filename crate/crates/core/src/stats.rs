//! Hypothesis tests used to compare payment schemes: the pooled two-proportion
//! z-test and the two-sample t-test (Welch or pooled variance).
//!
//! The normal tail comes from the regularized upper incomplete gamma function
//! (`erfc(x) = Q(1/2, x^2)`), the Student t tail from the regularized
//! incomplete beta function. Both use Lentz continued fractions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("each sample needs at least two values")]
    InsufficientData,
    #[error("samples have zero variance but different means")]
    ZeroVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alternative {
    TwoSided,
    /// First group larger than the second.
    Greater,
    /// First group smaller than the second.
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TVariant {
    Welch,
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TestOutcome<S> {
    pub statistic: S,
    pub p_value: S,
    /// Degrees of freedom for t-tests.
    pub df: Option<S>,
    /// Set when the input left the statistic undefined and `p_value` was
    /// forced to 1.
    pub degenerate: bool,
}

impl<S: Scalar> TestOutcome<S> {
    fn degenerate(df: Option<S>) -> Self {
        Self {
            statistic: S::zero(),
            p_value: S::one(),
            df,
            degenerate: true,
        }
    }
}

const MAX_ITER: usize = 1000;

/// Natural log of the gamma function (Lanczos, g = 7, n = 9), for `x > 0`.
pub fn ln_gamma<S: Scalar>(x: S) -> S {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    let half = S::lit(0.5);
    if x < half {
        // Reflection: Γ(x)Γ(1-x) = π / sin(πx)
        let pi = S::lit(std::f64::consts::PI);
        return (pi / (pi * x).sin()).ln() - ln_gamma(S::one() - x);
    }
    let x = x - S::one();
    let mut acc = S::lit(COEF[0]);
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc = acc + S::lit(*c) / (x + S::from_count(i));
    }
    let t = x + S::lit(7.5);
    S::lit(0.918_938_533_204_672_7) + (x + half) * t.ln() - t + acc.ln()
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q<S: Scalar>(a: S, x: S) -> S {
    if x <= S::zero() {
        return S::one();
    }
    if x < a + S::one() {
        S::one() - gamma_p_series(a, x)
    } else {
        gamma_q_fraction(a, x)
    }
}

fn gamma_p_series<S: Scalar>(a: S, x: S) -> S {
    let mut ap = a;
    let mut term = S::one() / a;
    let mut sum = term;
    for _ in 0..MAX_ITER {
        ap = ap + S::one();
        term = term * x / ap;
        sum = sum + term;
        if term.abs() < sum.abs() * S::epsilon() {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_fraction<S: Scalar>(a: S, x: S) -> S {
    let tiny = S::min_positive_value() / S::epsilon();
    let mut b = x + S::one() - a;
    let mut c = S::one() / tiny;
    let mut d = S::one() / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let i = S::from_count(i);
        let an = -i * (i - a);
        b = b + S::lit(2.0);
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = S::one() / d;
        let delta = d * c;
        h = h * delta;
        if (delta - S::one()).abs() < S::epsilon() {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// Complementary error function.
pub fn erfc<S: Scalar>(x: S) -> S {
    let q = gamma_q(S::lit(0.5), x * x);
    if x >= S::zero() {
        q
    } else {
        S::lit(2.0) - q
    }
}

/// Standard normal upper tail `P(Z > z)`.
pub fn normal_sf<S: Scalar>(z: S) -> S {
    S::lit(0.5) * erfc(z / S::lit(std::f64::consts::SQRT_2))
}

pub fn normal_cdf<S: Scalar>(z: S) -> S {
    normal_sf(-z)
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn beta_inc<S: Scalar>(a: S, b: S, x: S) -> S {
    if x <= S::zero() {
        return S::zero();
    }
    if x >= S::one() {
        return S::one();
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (S::one() - x).ln();
    let front = ln_front.exp();
    if x < (a + S::one()) / (a + b + S::lit(2.0)) {
        front * beta_fraction(a, b, x) / a
    } else {
        S::one() - front * beta_fraction(b, a, S::one() - x) / b
    }
}

fn beta_fraction<S: Scalar>(a: S, b: S, x: S) -> S {
    let tiny = S::min_positive_value() / S::epsilon();
    let one = S::one();
    let two = S::lit(2.0);
    let qab = a + b;
    let qap = a + one;
    let qam = a - one;
    let mut c = one;
    let mut d = one - qab * x / qap;
    if d.abs() < tiny {
        d = tiny;
    }
    d = one / d;
    let mut h = d;
    for m in 1..MAX_ITER {
        let m = S::from_count(m);
        let m2 = two * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        h = h * d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = one + aa * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = one + aa / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = one / d;
        let delta = d * c;
        h = h * delta;
        if (delta - one).abs() < S::epsilon() {
            break;
        }
    }
    h
}

/// Student t upper tail `P(T > t)` with `df` degrees of freedom.
pub fn student_t_sf<S: Scalar>(t: S, df: S) -> S {
    if t.is_infinite() {
        return if t > S::zero() { S::zero() } else { S::one() };
    }
    let tail = S::lit(0.5) * beta_inc(df / S::lit(2.0), S::lit(0.5), df / (df + t * t));
    if t >= S::zero() {
        tail
    } else {
        S::one() - tail
    }
}

pub fn student_t_cdf<S: Scalar>(t: S, df: S) -> S {
    student_t_sf(-t, df)
}

fn p_from_tails<S: Scalar>(stat: S, alternative: Alternative, sf: impl Fn(S) -> S) -> S {
    let p = match alternative {
        Alternative::Greater => sf(stat),
        Alternative::Less => sf(-stat),
        Alternative::TwoSided => S::lit(2.0) * sf(stat.abs()),
    };
    p.max(S::zero()).min(S::one())
}

/// Pooled two-proportion z-test of `success_a / n_a` against `success_b / n_b`.
pub fn two_proportion_z<S: Scalar>(
    success_a: u64,
    n_a: u64,
    success_b: u64,
    n_b: u64,
    alternative: Alternative,
) -> Result<TestOutcome<S>, StatsError> {
    if n_a == 0 || n_b == 0 {
        return Err(StatsError::InvalidInput("group sizes must be positive".into()));
    }
    if success_a > n_a || success_b > n_b {
        return Err(StatsError::InvalidInput("successes exceed group size".into()));
    }
    let to = |v: u64| S::from_u64(v).expect("representable");
    let (sa, na, sb, nb) = (to(success_a), to(n_a), to(success_b), to(n_b));
    let pooled = (sa + sb) / (na + nb);
    if success_a + success_b == 0 || success_a + success_b == n_a + n_b {
        return Ok(TestOutcome::degenerate(None));
    }
    let se = (pooled * (S::one() - pooled) * (S::one() / na + S::one() / nb)).sqrt();
    let z = (sa / na - sb / nb) / se;
    Ok(TestOutcome {
        statistic: z,
        p_value: p_from_tails(z, alternative, normal_sf),
        df: None,
        degenerate: false,
    })
}

fn mean_var<S: Scalar>(xs: &[S]) -> (S, S) {
    let n = S::from_count(xs.len());
    let mean = xs.iter().fold(S::zero(), |a, &x| a + x) / n;
    let ss = xs.iter().fold(S::zero(), |a, &x| a + (x - mean) * (x - mean));
    (mean, ss / (n - S::one()))
}

/// Two-sample t-test of `sample_a` against `sample_b`.
pub fn t_test<S: Scalar>(
    sample_a: &[S],
    sample_b: &[S],
    alternative: Alternative,
    variant: TVariant,
) -> Result<TestOutcome<S>, StatsError> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(StatsError::InsufficientData);
    }
    if sample_a.iter().chain(sample_b).any(|x| !x.is_finite()) {
        return Err(StatsError::InvalidInput("non-finite value".into()));
    }
    let (ma, va) = mean_var(sample_a);
    let (mb, vb) = mean_var(sample_b);
    let na = S::from_count(sample_a.len());
    let nb = S::from_count(sample_b.len());
    let one = S::one();

    let (se2, df) = match variant {
        TVariant::Welch => {
            let (qa, qb) = (va / na, vb / nb);
            let se2 = qa + qb;
            let denom = qa * qa / (na - one) + qb * qb / (nb - one);
            let df = if denom > S::zero() { se2 * se2 / denom } else { na + nb - S::lit(2.0) };
            (se2, df)
        }
        TVariant::Pooled => {
            let df = na + nb - S::lit(2.0);
            let sp2 = ((na - one) * va + (nb - one) * vb) / df;
            (sp2 * (one / na + one / nb), df)
        }
    };
    if se2 <= S::zero() {
        return if ma == mb {
            Ok(TestOutcome::degenerate(Some(df)))
        } else {
            Err(StatsError::ZeroVariance)
        };
    }
    let t = (ma - mb) / se2.sqrt();
    Ok(TestOutcome {
        statistic: t,
        p_value: p_from_tails(t, alternative, |x| student_t_sf(x, df)),
        df: Some(df),
        degenerate: false,
    })
}
