//! Empirical checks of why averaging an ensemble helps: convex-loss dominance,
//! variance of correlated ensemble means, the finite-class generalization bound and
//! train/test error gaps of toy detectors.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossModel {
    Squared,
    Absolute,
    /// `ln(1 + exp(-y f))`, convex in `f` for every real `y`.
    Logistic,
}

impl LossModel {
    pub const ALL: [LossModel; 3] = [LossModel::Squared, LossModel::Absolute, LossModel::Logistic];

    pub fn eval(self, f: f64, y: f64) -> f64 {
        match self {
            LossModel::Squared => (f - y).powi(2),
            LossModel::Absolute => (f - y).abs(),
            LossModel::Logistic => {
                let z = -y * f;
                // Stable softplus.
                z.max(0.0) + (-z.abs()).exp().ln_1p()
            }
        }
    }
}

impl fmt::Display for LossModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossModel::Squared => "squared",
            LossModel::Absolute => "absolute",
            LossModel::Logistic => "logistic",
        })
    }
}

/// `(loss of the mean output, mean of the individual losses)`.
pub fn jensen_check(loss: LossModel, outputs: &[f64], y: f64) -> Result<(f64, f64)> {
    if outputs.is_empty() {
        return Err(Error::invalid("need at least one model output"));
    }
    let n = outputs.len() as f64;
    let mean = outputs.iter().sum::<f64>() / n;
    let individual = outputs.iter().map(|&o| loss.eval(o, y)).sum::<f64>() / n;
    Ok((loss.eval(mean, y), individual))
}

/// Gaussian `M`-vectors with variance `sigma^2` and pairwise correlation `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelatedEnsembleSampler {
    pub m: usize,
    pub sigma: f64,
    pub rho: f64,
    pub seed: u64,
}

impl CorrelatedEnsembleSampler {
    pub fn new(m: usize, sigma: f64, rho: f64, seed: u64) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid("an ensemble sampler needs M >= 2"));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
        }
        let lo = -1.0 / (m as f64 - 1.0);
        if !(rho >= lo && rho <= 1.0) {
            return Err(Error::invalid(format!(
                "rho = {rho} makes the covariance indefinite; it must lie in [{lo}, 1]"
            )));
        }
        Ok(Self { m, sigma, rho, seed })
    }

    /// One draw. With `z` standard normal and `zbar` its mean, the vector
    /// `sigma * (a (z - zbar 1) + b zbar 1)` has the target covariance when
    /// `a^2 = 1 - rho` and `b^2 = 1 + (M - 1) rho`.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        let m = self.m as f64;
        let z: Vec<f64> = (0..self.m).map(|_| rng.sample(StandardNormal)).collect();
        let zbar = z.iter().sum::<f64>() / m;
        let a = (1.0 - self.rho).max(0.0).sqrt();
        let b = (1.0 + (m - 1.0) * self.rho).max(0.0).sqrt();
        z.iter()
            .map(|zi| self.sigma * (a * (zi - zbar) + b * zbar))
            .collect()
    }

    /// `sigma^2 / M + (M - 1) / M * rho * sigma^2`.
    pub fn bienayme_variance(&self) -> f64 {
        let m = self.m as f64;
        let s2 = self.sigma * self.sigma;
        s2 / m + (m - 1.0) / m * self.rho * s2
    }

    /// `sigma^2 / M * (1 + 2 rho)`, the form that counts only `2M` covariance terms.
    pub fn two_rho_variance(&self) -> f64 {
        self.sigma * self.sigma / self.m as f64 * (1.0 + 2.0 * self.rho)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub empirical: f64,
    /// Standard error of `empirical` under normality.
    pub standard_error: f64,
    pub bienayme: f64,
    pub two_rho: f64,
}

const BLOCK: usize = 4096;

/// Monte Carlo variance of the ensemble mean. Blocks of draws use RNG streams keyed by
/// block index, so the result does not depend on thread scheduling.
pub fn ensemble_variance_mc(sampler: &CorrelatedEnsembleSampler, n_samples: usize) -> Result<VarianceEstimate> {
    if n_samples < 10_000 {
        return Err(Error::invalid(format!(
            "variance estimate needs at least 10000 samples, got {n_samples}"
        )));
    }
    let sampler = CorrelatedEnsembleSampler::new(sampler.m, sampler.sigma, sampler.rho, sampler.seed)?;
    let blocks = n_samples.div_ceil(BLOCK);
    let means: Vec<f64> = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(sampler.seed);
            rng.set_stream(b as u64);
            let count = BLOCK.min(n_samples - b * BLOCK);
            (0..count)
                .map(|_| {
                    let x = sampler.sample(&mut rng);
                    x.iter().sum::<f64>() / x.len() as f64
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let n = means.len() as f64;
    let mean = means.iter().sum::<f64>() / n;
    let var = means.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(VarianceEstimate {
        empirical: var,
        standard_error: var * (2.0 / (n - 1.0)).sqrt(),
        bienayme: sampler.bienayme_variance(),
        two_rho: sampler.two_rho_variance(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationBoundParams {
    pub m: u64,
    pub n: u64,
    pub gamma_conf: f64,
}

/// `sqrt((ln M + ln(1 / gamma)) / (2N))` with natural logarithms.
pub fn generalization_bound(p: &GeneralizationBoundParams) -> Result<f64> {
    if p.m == 0 || p.n == 0 {
        return Err(Error::invalid("M and N must be at least 1"));
    }
    if !(p.gamma_conf > 0.0 && p.gamma_conf <= 1.0) {
        return Err(Error::invalid(format!(
            "confidence parameter must lie in (0, 1], got {}",
            p.gamma_conf
        )));
    }
    let num = (p.m as f64).ln() + (1.0 / p.gamma_conf).ln();
    Ok((num / (2.0 * p.n as f64)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationGap {
    /// Error rate on held-out data, the estimate of the expected error.
    pub expected: f64,
    /// Error rate on the training data.
    pub empirical: f64,
    pub gap: f64,
}

/// Error rates of `is_error` on held-out and training items and their difference.
pub fn generalization_gap<T, F>(is_error: F, train: &[T], test: &[T]) -> Result<GeneralizationGap>
where
    T: Sync,
    F: Fn(&T) -> Result<bool> + Sync,
{
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("train and test splits must be nonempty"));
    }
    let rate = |items: &[T]| -> Result<f64> {
        let errors = items
            .par_iter()
            .map(&is_error)
            .collect::<Result<Vec<bool>>>()?;
        Ok(errors.iter().filter(|&&e| e).count() as f64 / items.len() as f64)
    };
    let empirical = rate(train)?;
    let expected = rate(test)?;
    Ok(GeneralizationGap {
        expected,
        empirical,
        gap: expected - empirical,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    /// Reported for comparison, not a contract.
    Info,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Info => "info",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryRow {
    pub claim: String,
    pub predicted: f64,
    pub observed: f64,
    pub verdict: Verdict,
}

impl TheoryRow {
    fn check(claim: String, predicted: f64, observed: f64, ok: bool) -> Self {
        Self {
            claim,
            predicted,
            observed,
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        }
    }
}

/// Outcome of `trials` random convexity trials for one loss: the number of trials in
/// which the loss of the mean was at most the mean loss, and how many of those were
/// ties with unequal outputs (which must not happen for strictly convex losses).
pub fn jensen_trials(loss: LossModel, trials: usize, seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = 0;
    let mut bad_ties = 0;
    for _ in 0..trials {
        let m = rng.random_range(1..=8);
        let outputs: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y = if loss == LossModel::Logistic {
            if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        } else {
            rng.random_range(-2.0..2.0)
        };
        let (ens, ind) = jensen_check(loss, &outputs, y).expect("nonempty outputs");
        let slack = 1e-12 * ind.abs().max(1.0);
        if ens <= ind + slack {
            held += 1;
        }
        let all_equal = outputs.iter().all(|&o| o == outputs[0]);
        if loss == LossModel::Squared && !all_equal && (ind - ens).abs() <= slack {
            bad_ties += 1;
        }
    }
    (held, bad_ties)
}

/// The claims checked by the `verify-theory` command.
pub fn theory_suite(trials: usize, seed: u64) -> Result<Vec<TheoryRow>> {
    let mut rows = Vec::new();
    for (k, loss) in LossModel::ALL.into_iter().enumerate() {
        let (held, bad_ties) = jensen_trials(loss, trials, seed.wrapping_add(k as u64));
        rows.push(TheoryRow::check(
            format!("jensen_{loss}"),
            trials as f64,
            held as f64,
            held == trials && bad_ties == 0,
        ));
    }
    for (k, rho) in [0.0, 0.3, 0.9].into_iter().enumerate() {
        let sampler = CorrelatedEnsembleSampler::new(5, 1.0, rho, seed.wrapping_add(100 + k as u64))?;
        let est = ensemble_variance_mc(&sampler, 100_000)?;
        let rel = (est.empirical - est.bienayme).abs() / est.bienayme;
        rows.push(TheoryRow::check(
            format!("variance_m5_rho{rho}"),
            est.bienayme,
            est.empirical,
            rel <= 0.03,
        ));
        rows.push(TheoryRow {
            claim: format!("variance_two_rho_form_m5_rho{rho}"),
            predicted: est.two_rho,
            observed: est.empirical,
            verdict: Verdict::Info,
        });
    }
    let t = generalization_bound(&GeneralizationBoundParams {
        m: 5,
        n: 614,
        gamma_conf: 0.05,
    })?;
    rows.push(TheoryRow::check("bound_m5_n614_g0.05".into(), 0.0612, t, (t - 0.0612).abs() <= 1e-4));
    Ok(rows)
}

/// `claim,predicted,observed,verdict` rows.
pub fn theory_csv(rows: &[TheoryRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["claim", "predicted", "observed", "verdict"])
        .expect("in-memory csv");
    for r in rows {
        w.write_record([
            r.claim.clone(),
            format!("{:.6}", r.predicted),
            format!("{:.6}", r.observed),
            r.verdict.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush to vec")).expect("utf-8 csv")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jensen_examples() {
        assert_eq!(jensen_check(LossModel::Squared, &[0.0, 2.0], 1.0).unwrap(), (0.0, 1.0));
        for loss in LossModel::ALL {
            let (a, b) = jensen_check(loss, &[0.7, 0.7, 0.7], 1.0).unwrap();
            assert!((a - b).abs() < 1e-15);
        }
        assert!(jensen_check(LossModel::Absolute, &[], 0.0).is_err());
    }

    #[test]
    fn jensen_monte_carlo() {
        for loss in LossModel::ALL {
            assert_eq!(jensen_trials(loss, 1000, 3), (1000, 0));
        }
    }

    #[test]
    fn logistic_is_stable() {
        assert!((LossModel::Logistic.eval(0.0, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!(LossModel::Logistic.eval(-800.0, 1.0).is_finite());
        assert!(LossModel::Logistic.eval(800.0, 1.0) < 1e-300);
    }

    #[test]
    fn sampler_rejects_indefinite_covariance() {
        assert!(CorrelatedEnsembleSampler::new(5, 1.0, -0.3, 0).is_err());
        assert!(CorrelatedEnsembleSampler::new(5, 1.0, -0.25, 0).is_ok());
        assert!(CorrelatedEnsembleSampler::new(1, 1.0, 0.0, 0).is_err());
        assert!(CorrelatedEnsembleSampler::new(3, 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn variance_cases() {
        let independent = CorrelatedEnsembleSampler::new(5, 1.0, 0.0, 1).unwrap();
        let est = ensemble_variance_mc(&independent, 100_000).unwrap();
        assert_eq!(est.bienayme, est.two_rho);
        assert!((est.empirical - 0.2).abs() / 0.2 < 0.03, "{est:?}");

        let corr = CorrelatedEnsembleSampler::new(5, 1.0, 0.3, 2).unwrap();
        let est = ensemble_variance_mc(&corr, 100_000).unwrap();
        assert!((est.bienayme - 0.44).abs() < 1e-12);
        assert!((est.two_rho - 0.32).abs() < 1e-12);
        assert!((est.empirical - 0.44).abs() / 0.44 < 0.03, "{est:?}");

        let full = CorrelatedEnsembleSampler::new(7, 2.0, 1.0, 3).unwrap();
        let est = ensemble_variance_mc(&full, 20_000).unwrap();
        assert!((est.bienayme - 4.0).abs() < 1e-12);
        assert!((est.empirical - 4.0).abs() / 4.0 < 0.05);
        assert!(ensemble_variance_mc(&full, 100).is_err());
    }

    #[test]
    fn variance_is_deterministic() {
        let s = CorrelatedEnsembleSampler::new(4, 1.0, 0.5, 9).unwrap();
        assert_eq!(ensemble_variance_mc(&s, 10_000).unwrap(), ensemble_variance_mc(&s, 10_000).unwrap());
    }

    #[test]
    fn bound_values_and_shape() {
        let t = |m, n, g| generalization_bound(&GeneralizationBoundParams { m, n, gamma_conf: g }).unwrap();
        assert!((t(5, 614, 0.05) - 0.0612).abs() < 1e-4);
        assert_eq!(t(1, 10, 1.0), 0.0);
        assert!(t(1, 10, 0.999999) < 1e-3);
        assert!(t(5, 100, 0.05) > t(5, 200, 0.05));
        assert!(t(6, 100, 0.05) > t(5, 100, 0.05));
        // Depends on M and gamma only through ln(M / gamma).
        assert!((t(2, 50, 0.1) - t(4, 50, 0.2)).abs() < 1e-15);
    }

    #[test]
    fn gap_cases() {
        let items: Vec<u32> = (0..10).collect();
        let g = generalization_gap(|&i| Ok(i % 3 == 0), &items, &items).unwrap();
        assert_eq!(g.gap, 0.0);
        let never = generalization_gap(|_| Ok(true), &items[..4], &items[4..]).unwrap();
        assert_eq!((never.expected, never.empirical, never.gap), (1.0, 1.0, 0.0));
        assert!(generalization_gap(|_| Ok(true), &items[..0], &items).is_err());
    }

    #[test]
    fn suite_passes() {
        let rows = theory_suite(200, 1).unwrap();
        assert!(rows.iter().all(|r| r.verdict != Verdict::Fail), "{rows:?}");
        let csv = theory_csv(&rows);
        assert!(csv.starts_with("claim,predicted,observed,verdict\n"));
    }
}
