//! Built-in numerical checks: analytic loss gradients against central
//! finite differences, and histogram matching against its defining
//! properties. Shared by the `selfcheck` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{random_filter_bank, ActivationSet, NetworkSpec};
use crate::stats::{
    compute_histogram, content_loss, gram_loss_to_targets, histogram_loss_to_targets,
    histogram_match, histogram_remap_to_targets, mean_activation_loss_to_targets, target_stats,
    tv_loss, LayerWeights, TargetStats,
};
use crate::tensor::{finite_diff_gradient, relative_error, Tensor};

/// Deliberate defects for testing that the checks can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negates the analytic Gram gradient.
    GramSign,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, cases: usize, max_error: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.to_string(),
            cases,
            max_error,
            tolerance,
            passed: max_error <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfCheckReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

/// Relative error bound for the gradient checks.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-6;
const TAGS: [&str; 2] = ["relu1_1", "relu2_1"];

fn random_image(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(3, 8, 8, |_, _, _| rng.random_range(0.0..1.0))
}

fn weights(w: f64) -> LayerWeights<f64> {
    TAGS.iter().map(|t| (t.to_string(), w)).collect()
}

struct Case {
    net: NetworkSpec<f64>,
    targets: TargetStats<f64>,
    content: ActivationSet<f64>,
    x: Tensor<f64>,
}

impl Case {
    fn new(seed: u64) -> Result<Self> {
        let net = random_filter_bank(seed, &[3, 4, 6])?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let source = random_image(&mut rng);
        let content = random_image(&mut rng);
        let x = random_image(&mut rng);
        Ok(Case {
            targets: target_stats(&net.forward(&source, &TAGS)?),
            content: net.forward(&content, &TAGS)?,
            net,
            x,
        })
    }

    fn acts(&self, x: &Tensor<f64>) -> ActivationSet<f64> {
        self.net.forward(x, &TAGS).expect("valid fixture")
    }

    fn to_image(&self, grads: &ActivationSet<f64>) -> Result<Tensor<f64>> {
        self.net.backward_to_image(&self.x, grads)
    }
}

/// Relative error of each loss gradient, composed through a 2-block random
/// filter bank to image space, over `seeds` random `3x8x8` inputs.
pub fn gradient_checks(seeds: u64, fault: Option<Fault>) -> Result<Vec<CheckResult>> {
    let names = ["gram", "histogram", "content", "mean", "tv"];
    let mut worst = [0.0f64; 5];
    let w = weights(1.0);
    let bins = 32;
    for seed in 0..seeds {
        let case = Case::new(seed)?;
        let acts = case.acts(&case.x);

        let (_, g) = gram_loss_to_targets(&case.targets, &acts, &w)?;
        let mut analytic = case.to_image(&g)?;
        if fault == Some(Fault::GramSign) {
            analytic.scale(-1.0);
        }
        let numeric = finite_diff_gradient(
            |t| gram_loss_to_targets(&case.targets, &case.acts(t), &w).unwrap().0,
            &case.x,
            FD_STEP,
        );
        worst[0] = worst[0].max(relative_error(&analytic, &numeric, 1e-300));

        // the remap is frozen at the base point
        let h = histogram_loss_to_targets(&case.targets, &acts, &w, bins)?;
        let analytic = case.to_image(&h.grads)?;
        let frozen = histogram_remap_to_targets(&case.targets, &acts, &TAGS, bins)?;
        let numeric = finite_diff_gradient(
            |t| {
                let o = case.acts(t);
                TAGS.iter()
                    .map(|tag| {
                        let (a, r) = (&o[*tag], &frozen[*tag]);
                        let d: f64 = a.data().iter().zip(r.data()).map(|(x, y)| (x - y) * (x - y)).sum();
                        d / a.plane_len() as f64
                    })
                    .sum()
            },
            &case.x,
            FD_STEP,
        );
        worst[1] = worst[1].max(relative_error(&analytic, &numeric, 1e-300));

        let (_, g) = content_loss(&case.content, &acts, &w)?;
        let analytic = case.to_image(&g)?;
        let numeric = finite_diff_gradient(
            |t| content_loss(&case.content, &case.acts(t), &w).unwrap().0,
            &case.x,
            FD_STEP,
        );
        worst[2] = worst[2].max(relative_error(&analytic, &numeric, 1e-300));

        let (_, g) = mean_activation_loss_to_targets(&case.targets, &acts, &w)?;
        let analytic = case.to_image(&g)?;
        let numeric = finite_diff_gradient(
            |t| mean_activation_loss_to_targets(&case.targets, &case.acts(t), &w).unwrap().0,
            &case.x,
            FD_STEP,
        );
        worst[3] = worst[3].max(relative_error(&analytic, &numeric, 1e-300));

        let (_, analytic) = tv_loss(&case.x, 1.0);
        let numeric = finite_diff_gradient(|t| tv_loss(t, 1.0).0, &case.x, FD_STEP);
        worst[4] = worst[4].max(relative_error(&analytic, &numeric, 1e-300));
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, e)| CheckResult::new(&format!("gradient/{n}"), seeds as usize, e, GRADIENT_TOLERANCE))
        .collect())
}

/// Worst-case statistics of the histogram matching oracle.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MatchingErrors {
    /// Largest per-bin count difference between matched output and target.
    pub bin_count_deviation: f64,
    /// Largest `|R(x) − x| / bin width` when matching a sample to itself.
    pub self_match_bin_widths: f64,
    /// Number of ordered input pairs whose matched values are out of order.
    pub order_violations: usize,
}

/// Matches `pairs` seeded random inputs of `n` values to random targets
/// with `bins` bins.
pub fn matching_errors(pairs: u64, n: usize, bins: usize) -> Result<MatchingErrors> {
    let mut e = MatchingErrors::default();
    for seed in 0..pairs {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7_000);
        let normal = Normal::new(rng.random_range(-2.0..2.0), rng.random_range(0.1..3.0)).expect("valid");
        let input: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let exp = Exp::new(rng.random_range(0.5..4.0)).expect("valid");
        let shift = rng.random_range(-1.0..1.0);
        let target: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    rng.random_range(2.0..3.0)
                } else {
                    exp.sample(&mut rng) + shift
                }
            })
            .collect();

        let th = compute_histogram(&target, bins, None)?;
        let matched = histogram_match(&input, &th);
        let out = th.rebin(&matched);
        for (a, b) in out.counts().iter().zip(th.counts()) {
            e.bin_count_deviation = e.bin_count_deviation.max((a - b).abs());
        }

        let own = compute_histogram(&input, bins, None)?;
        let selfm = histogram_match(&input, &own);
        for (r, x) in selfm.iter().zip(&input) {
            e.self_match_bin_widths = e.self_match_bin_widths.max((r - x).abs() / own.bin_width());
        }

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| input[a].total_cmp(&input[b]));
        for w in order.windows(2) {
            if input[w[0]] < input[w[1]] && matched[w[0]] > matched[w[1]] {
                e.order_violations += 1;
            }
        }
    }
    Ok(e)
}

pub fn histogram_checks(pairs: u64) -> Result<Vec<CheckResult>> {
    let e = matching_errors(pairs, 4096, 256)?;
    Ok(vec![
        CheckResult::new("histogram/bin-count-deviation", pairs as usize, e.bin_count_deviation, 1.0),
        CheckResult::new("histogram/self-match-bin-widths", pairs as usize, e.self_match_bin_widths, 1.0),
        CheckResult::new("histogram/order-violations", pairs as usize, e.order_violations as f64, 0.0),
    ])
}

/// Runs the gradient suite (20 inputs) and the matching oracle (50 pairs).
pub fn run_selfcheck(fault: Option<Fault>) -> Result<SelfCheckReport> {
    let mut checks = gradient_checks(20, fault)?;
    checks.extend(histogram_checks(50)?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(SelfCheckReport { checks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradients_pass_and_injected_fault_is_caught() {
        let ok = gradient_checks(3, None).unwrap();
        assert!(ok.iter().all(|c| c.passed), "{ok:?}");
        let bad = gradient_checks(3, Some(Fault::GramSign)).unwrap();
        assert!(!bad[0].passed);
        assert!(bad[1..].iter().all(|c| c.passed));
    }

    #[test]
    fn matching_oracle_on_a_few_pairs() {
        let e = matching_errors(3, 1024, 64).unwrap();
        assert!(e.bin_count_deviation <= 1.0);
        assert!(e.self_match_bin_widths <= 1.0);
        assert_eq!(e.order_violations, 0);
    }
}
