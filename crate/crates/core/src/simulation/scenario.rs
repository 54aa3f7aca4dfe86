//! Two-stage data-generating laws and outcome-intercept calibration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, LogNormal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, StageRecord, Subject};
use crate::error::{GestError, Result};
use crate::nuisance::expit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Poisson outcome, one covariate per stage, log|x1| in the mean.
    LoglinearTwostage,
    /// Additive outcome, three covariates per stage.
    ContinuousTwostage,
    /// Poisson outcome, three shifted-mean covariates per stage.
    DiscreteQic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorDist {
    /// `exp(Z) - e^(1/2)`, a mean-zero right-skewed error.
    CenteredLognormal,
    StandardNormal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub n: usize,
    /// Per-stage blip coefficients with the intercept first:
    /// `gamma_j = a_j (psi_j0 + sum_k psi_jk x_jk)`.
    pub psi_true: Vec<Vec<f64>>,
    #[serde(default = "default_error")]
    pub error: ErrorDist,
    #[serde(default = "default_zero_prob")]
    pub zero_prob_target: f64,
    #[serde(default)]
    pub covariate_correlation: f64,
    /// Outcome intercept for the Poisson kinds; calibrated when absent.
    #[serde(default)]
    pub beta0: Option<f64>,
    pub seed: u64,
}

fn default_error() -> ErrorDist {
    ErrorDist::CenteredLognormal
}

fn default_zero_prob() -> f64 {
    0.1
}

/// Stream index reserved for calibration draws, far from replication indices.
const CALIBRATION_STREAM: u64 = u64::MAX - 1;

pub const CALIBRATION_DRAWS: usize = 1_000_000;
pub const BETA0_BRACKET: (f64, f64) = (-5.0, 10.0);

impl Scenario {
    pub fn loglinear(n: usize, zero_prob_target: f64, seed: u64) -> Self {
        Scenario {
            kind: ScenarioKind::LoglinearTwostage,
            n,
            psi_true: vec![vec![0.5, -0.5], vec![0.5, -0.5]],
            error: ErrorDist::CenteredLognormal,
            zero_prob_target,
            covariate_correlation: 0.0,
            beta0: None,
            seed,
        }
    }

    /// `stage1`/`stage2` are the covariate coefficients; the blip intercept is 1.
    pub fn continuous(n: usize, stage1: [f64; 3], stage2: [f64; 3], error: ErrorDist, seed: u64) -> Self {
        let full = |p: [f64; 3]| vec![1.0, p[0], p[1], p[2]];
        Scenario {
            kind: ScenarioKind::ContinuousTwostage,
            n,
            psi_true: vec![full(stage1), full(stage2)],
            error,
            zero_prob_target: 0.1,
            covariate_correlation: 0.0,
            beta0: None,
            seed,
        }
    }

    /// `stage1`/`stage2` are the covariate coefficients; the blip intercept is 0.5.
    pub fn discrete(n: usize, stage1: [f64; 3], stage2: [f64; 3], seed: u64) -> Self {
        let full = |p: [f64; 3]| vec![0.5, p[0], p[1], p[2]];
        Scenario {
            kind: ScenarioKind::DiscreteQic,
            n,
            psi_true: vec![full(stage1), full(stage2)],
            error: ErrorDist::CenteredLognormal,
            zero_prob_target: 0.1,
            covariate_correlation: 0.0,
            beta0: None,
            seed,
        }
    }

    pub fn n_covariates(&self) -> usize {
        match self.kind {
            ScenarioKind::LoglinearTwostage => 1,
            _ => 3,
        }
    }

    pub fn has_poisson_outcome(&self) -> bool {
        self.kind != ScenarioKind::ContinuousTwostage
    }

    /// Covariate names per stage; CSV columns read `x{j}_{name}`.
    pub fn covariate_names(&self) -> Vec<Vec<String>> {
        let names: Vec<String> = (1..=self.n_covariates()).map(|k| k.to_string()).collect();
        vec![names.clone(), names]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(GestError::Domain(m));
        if self.n == 0 {
            return bad("scenario needs n >= 1".into());
        }
        if self.psi_true.len() != 2 || self.psi_true.iter().any(|p| p.len() != self.n_covariates() + 1) {
            return bad(format!(
                "psi_true needs two stages of {} coefficients",
                self.n_covariates() + 1
            ));
        }
        if !(0.0..1.0).contains(&self.covariate_correlation) {
            return bad("covariate_correlation must lie in [0, 1)".into());
        }
        if self.has_poisson_outcome() && !(self.zero_prob_target > 0.0 && self.zero_prob_target < 1.0) {
            return bad("zero_prob_target must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Replication `rep`'s generator: a ChaCha stream keyed by the scenario
    /// seed, so draws never depend on scheduling.
    pub fn rng(&self, rep: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep);
        rng
    }
}

/// Covariates, treatments and the non-intercept part of the log mean (or the
/// mean, for the additive kind) for one subject.
struct Draw {
    x: [Vec<f64>; 2],
    a: [f64; 2],
    /// `log|x1| - regrets` (log-linear), `-regrets` (others).
    offset: f64,
}

fn correlated_normals<R: Rng>(rng: &mut R, means: &[f64], rho: f64) -> Vec<f64> {
    let shared: f64 = if rho > 0.0 { rng.sample(StandardNormal) } else { 0.0 };
    means
        .iter()
        .map(|m| {
            let z: f64 = rng.sample(StandardNormal);
            m + rho.sqrt() * shared + (1.0 - rho).sqrt() * z
        })
        .collect()
}

fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> f64 {
    let b = Bernoulli::new(p).expect("expit lies in [0, 1]");
    if b.sample(rng) {
        1.0
    } else {
        0.0
    }
}

fn regret(psi: &[f64], x: &[f64], a: f64) -> f64 {
    let c = psi[0] + psi[1..].iter().zip(x).map(|(p, v)| p * v).sum::<f64>();
    let opt = if c > 0.0 { 1.0 } else { 0.0 };
    (opt - a) * c
}

fn draw_subject<R: Rng>(s: &Scenario, rng: &mut R) -> Draw {
    let rho = s.covariate_correlation;
    let (x1, a1, x2, a2) = match s.kind {
        ScenarioKind::LoglinearTwostage => {
            let x1 = correlated_normals(rng, &[0.0], rho);
            let a1 = bernoulli(rng, expit(x1[0]));
            let x2 = correlated_normals(rng, &[a1], rho);
            let a2 = bernoulli(rng, expit(x2[0]));
            (x1, a1, x2, a2)
        }
        ScenarioKind::ContinuousTwostage => {
            let x1 = correlated_normals(rng, &[0.0; 3], rho);
            let a1 = bernoulli(rng, expit(x1.iter().sum()));
            let x2 = correlated_normals(rng, &[a1; 3], rho);
            let a2 = bernoulli(rng, expit(x2.iter().sum()));
            (x1, a1, x2, a2)
        }
        ScenarioKind::DiscreteQic => {
            let x1 = correlated_normals(rng, &[1.0, -1.0, 1.0], rho);
            let a1 = bernoulli(rng, expit(x1[0]));
            let x2 = correlated_normals(rng, &[a1, -1.0, 1.0], rho);
            let a2 = bernoulli(rng, expit(x2[0]));
            (x1, a1, x2, a2)
        }
    };
    let regrets = regret(&s.psi_true[0], &x1, a1) + regret(&s.psi_true[1], &x2, a2);
    let offset = match s.kind {
        ScenarioKind::LoglinearTwostage => x1[0].abs().ln() - regrets,
        _ => -regrets,
    };
    Draw {
        x: [x1, x2],
        a: [a1, a2],
        offset,
    }
}

/// Draws one dataset from the scenario using replication stream `rep`.
pub fn generate(s: &Scenario, rep: u64) -> Result<Dataset> {
    s.validate()?;
    let beta0 = if s.has_poisson_outcome() {
        match s.beta0 {
            Some(b) => b,
            None => calibrate_beta0(s, s.zero_prob_target, CALIBRATION_DRAWS, BETA0_BRACKET)?,
        }
    } else {
        0.0
    };
    let mut rng = s.rng(rep);
    let lognormal = LogNormal::new(0.0, 1.0).expect("valid lognormal");
    let shift = 0.5_f64.exp();
    let mut subjects = Vec::with_capacity(s.n);
    for _ in 0..s.n {
        let d = draw_subject(s, &mut rng);
        let outcome = if s.has_poisson_outcome() {
            let lambda = (beta0 + d.offset).exp();
            // lambda = 0 only when x1 is exactly 0; the outcome is then 0
            if lambda > 0.0 {
                Poisson::new(lambda)
                    .map_err(|e| GestError::Domain(format!("Poisson mean {lambda}: {e}")))?
                    .sample(&mut rng)
            } else {
                0.0
            }
        } else {
            let eps = match s.error {
                ErrorDist::CenteredLognormal => lognormal.sample(&mut rng) - shift,
                ErrorDist::StandardNormal => rng.sample::<f64, _>(StandardNormal),
            };
            d.offset + eps
        };
        let [x1, x2] = d.x;
        subjects.push(Subject {
            stages: vec![
                StageRecord {
                    covariates: x1,
                    treatment: d.a[0],
                },
                StageRecord {
                    covariates: x2,
                    treatment: d.a[1],
                },
            ],
            outcome,
        });
    }
    Dataset::new(s.covariate_names(), subjects, None)
}

/// Intercept making `P(Y = 0)` hit `target`, by bisection over `bracket`.
///
/// The covariate and treatment draws do not depend on the intercept, so one
/// set of `draws` subjects is reused for every trial value and `P(Y = 0)` is
/// averaged exactly as `E[exp(-lambda)]` over them.
pub fn calibrate_beta0(s: &Scenario, target: f64, draws: usize, bracket: (f64, f64)) -> Result<f64> {
    if !s.has_poisson_outcome() {
        return Err(GestError::Calibration("only Poisson scenarios have an outcome intercept".into()));
    }
    if !(target > 0.0 && target < 1.0) || draws == 0 {
        return Err(GestError::Calibration(format!("target {target} must lie in (0, 1)")));
    }
    let mut rng = s.rng(CALIBRATION_STREAM);
    let offsets: Vec<f64> = (0..draws).map(|_| draw_subject(s, &mut rng).offset.exp()).collect();
    let p_zero = |b0: f64| {
        let scale = b0.exp();
        offsets.iter().map(|e| (-scale * e).exp()).sum::<f64>() / draws as f64
    };
    let (mut lo, mut hi) = bracket;
    let (p_lo, p_hi) = (p_zero(lo), p_zero(hi));
    if !(p_lo >= target && target >= p_hi) {
        return Err(GestError::Calibration(format!(
            "P(Y=0) spans [{p_hi:.4}, {p_lo:.4}] over intercepts [{lo}, {hi}], which misses {target}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if p_zero(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regret_is_zero_on_the_optimal_treatment() {
        assert_eq!(regret(&[0.5, -0.5], &[0.2], 1.0), 0.0);
        assert_eq!(regret(&[0.5, -0.5], &[2.0], 0.0), 0.0);
        assert!((regret(&[0.5, -0.5], &[0.2], 0.0) - 0.4).abs() < 1e-15);
        assert!((regret(&[0.5, -0.5], &[2.0], 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn generation_is_deterministic_per_stream() {
        let mut s = Scenario::continuous(20, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], ErrorDist::StandardNormal, 9);
        let a = generate(&s, 3).unwrap();
        let b = generate(&s, 3).unwrap();
        let c = generate(&s, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        s.n = 0;
        assert!(generate(&s, 0).is_err());
    }

    #[test]
    fn calibration_errors() {
        let s = Scenario::loglinear(10, 0.1, 1);
        assert!(matches!(
            calibrate_beta0(&s, 0.9999, 10_000, (0.0, 0.1)),
            Err(GestError::Calibration(_))
        ));
        let c = Scenario::continuous(10, [1.0, 0.0, 0.0], [1.0, 0.0, 0.0], ErrorDist::StandardNormal, 1);
        assert!(calibrate_beta0(&c, 0.1, 100, BETA0_BRACKET).is_err());
    }
}
