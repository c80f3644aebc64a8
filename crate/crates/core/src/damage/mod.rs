//! Sparsification procedures: training under fixed patterns, regularize then
//! prune then fine-tune, and the gradual controller with an adaptive θ.

mod patterns;
mod report;

pub use patterns::{make_predefined_pattern, patterns_for_network, PatternName, PredefinedPattern};
pub use report::{
    layer_summaries, parse_epoch_csv, ControllerStep, EpochRecord, LayerSummary, PhaseAccuracy,
    SparsifyReport,
};

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::lowering::SparsityPatternSet;
use crate::net::{evaluate, train_epoch, ExtraGrad, Network, SgdConfig, SgdState};
use crate::sparsity::{group_norms, prune_smallest_groups, quantile_threshold, RegularizerConfig};
use report::densities;

/// Optimizer and data-order settings shared by every procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub sgd: SgdConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            sgd: SgdConfig::default(),
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainSettings {
    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

/// Regularizer gradient for every convolution.
fn regularizer_hook(reg: Option<RegularizerConfig>) -> impl FnMut(&Network) -> Option<ExtraGrad> {
    move |net: &Network| {
        let reg = reg?;
        let mut extra = ExtraGrad::for_network(net);
        for idx in net.conv_indices() {
            extra.layers[idx] = Some(reg.gradient(&net.conv(idx).expect("conv index").kernel));
        }
        Some(extra)
    }
}

#[allow(clippy::too_many_arguments)]
fn run_epochs(
    net: &mut Network,
    state: &mut SgdState,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    settings: &TrainSettings,
    rng: &mut ChaCha8Rng,
    reg: Option<RegularizerConfig>,
    log: &mut Vec<EpochRecord>,
) -> Result<()> {
    for _ in 0..epochs {
        let stats = train_epoch(net, state, train, settings.batch_size, rng, regularizer_hook(reg))?;
        let acc = evaluate(net, test)?;
        let epoch = log.len() + 1;
        log::info!(
            "epoch {epoch}: loss {:.4}, test accuracy {:.4}, densities {:?}",
            stats.mean_loss,
            acc,
            densities(net)
        );
        log.push(EpochRecord {
            epoch,
            theta: reg.map(|r| r.theta as f64).filter(|t| t.is_finite()),
            densities: densities(net),
            val_accuracy: None,
            test_accuracy: Some(acc),
        });
    }
    Ok(())
}

fn finish(
    net: &Network,
    method: &str,
    accuracy_before: f64,
    phases: Vec<PhaseAccuracy>,
    epochs: Vec<EpochRecord>,
) -> SparsifyReport {
    let accuracy_after = phases.last().map_or(accuracy_before, |p| p.test_accuracy);
    SparsifyReport {
        method: method.to_string(),
        layers: layer_summaries(net),
        accuracy_before,
        accuracy_after,
        baseline_val_accuracy: None,
        phases,
        epochs,
        controller: Vec::new(),
        stop_reason: None,
    }
}

/// Plain training, optionally with a regularizer on every convolution.
pub fn train_network(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    epochs: usize,
    settings: &TrainSettings,
    regularizer: Option<RegularizerConfig>,
) -> Result<SparsifyReport> {
    let before = evaluate(net, test)?;
    let mut state = SgdState::new(net, settings.sgd);
    let mut rng = settings.rng(0);
    let mut log = Vec::new();
    run_epochs(net, &mut state, train, test, epochs, settings, &mut rng, regularizer, &mut log)?;
    let phase = PhaseAccuracy {
        phase: "train".into(),
        epochs,
        test_accuracy: evaluate(net, test)?,
    };
    Ok(finish(net, "train", before, vec![phase], log))
}

/// Train with `patterns` (one per convolution, in layer order) frozen in place.
pub fn train_fixed_pattern(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    patterns: &[SparsityPatternSet],
    epochs: usize,
    settings: &TrainSettings,
) -> Result<SparsifyReport> {
    let convs = net.conv_indices();
    if patterns.len() != convs.len() {
        return Err(Error::input(format!(
            "{} patterns given for {} convolution layers",
            patterns.len(),
            convs.len()
        )));
    }
    for (&idx, q) in convs.iter().zip(patterns) {
        net.set_pattern(idx, q.clone())?;
    }
    let mut report = train_network(net, train, test, epochs, settings, None)?;
    report.method = "fixed_pattern".into();
    Ok(report)
}

/// Parameters of the regularize, prune, fine-tune procedure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetunePlan {
    pub tau: f64,
    /// `None` prunes a network trained without any sparsity term.
    pub regularizer: Option<RegularizerConfig>,
    pub epochs_reg: usize,
    pub epochs_ft: usize,
}

/// Prune every convolution to density `tau` by smallest group norm.
pub fn prune_network(net: &mut Network, tau: f64) -> Result<()> {
    for idx in net.conv_indices() {
        let c = net.conv_mut(idx).expect("conv index");
        let q = prune_smallest_groups(&mut c.kernel, tau)?;
        c.set_pattern(q)?;
    }
    Ok(())
}

/// Regularized training, pruning of every convolution to `plan.tau`, then
/// fine-tuning with the patterns fixed and no regularizer. Test accuracy is
/// recorded after each phase.
pub fn sparsify_with_finetune(
    net: &mut Network,
    train: &Dataset,
    test: &Dataset,
    plan: &FinetunePlan,
    settings: &TrainSettings,
) -> Result<SparsifyReport> {
    if !(plan.tau > 0.0 && plan.tau <= 1.0) {
        return Err(Error::input(format!("density must lie in (0, 1], got {}", plan.tau)));
    }
    let before = evaluate(net, test)?;
    let mut log = Vec::new();
    let mut phases = Vec::new();

    let mut state = SgdState::new(net, settings.sgd);
    let mut rng = settings.rng(0);
    run_epochs(
        net,
        &mut state,
        train,
        test,
        plan.epochs_reg,
        settings,
        &mut rng,
        plan.regularizer,
        &mut log,
    )?;
    phases.push(PhaseAccuracy {
        phase: "regularized".into(),
        epochs: plan.epochs_reg,
        test_accuracy: evaluate(net, test)?,
    });

    prune_network(net, plan.tau)?;
    let pruned = evaluate(net, test)?;
    log::info!("pruned to density {}: test accuracy {:.4}", plan.tau, pruned);
    phases.push(PhaseAccuracy {
        phase: "pruned".into(),
        epochs: 0,
        test_accuracy: pruned,
    });

    let mut state = SgdState::new(net, settings.sgd);
    let mut rng = settings.rng(1);
    run_epochs(net, &mut state, train, test, plan.epochs_ft, settings, &mut rng, None, &mut log)?;
    phases.push(PhaseAccuracy {
        phase: "finetuned".into(),
        epochs: plan.epochs_ft,
        test_accuracy: evaluate(net, test)?,
    });
    Ok(finish(net, "finetune", before, phases, log))
}

/// A group removed for good by the gradual controller; ordered by layer, then
/// canonical key order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PrunedGroup {
    pub layer: usize,
    pub s: usize,
    pub i: usize,
    pub j: usize,
}

/// Controller parameters and state for [`gradual_sparsify`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DamageSchedule {
    /// Tolerated drop of validation accuracy, as a fraction (0.01 = one point).
    pub delta: f64,
    pub lambda: f32,
    pub epsilon: f32,
    /// Current θ; `None` starts one quantile step into the initial norms.
    pub theta: Option<f32>,
    pub step_fraction: f64,
    pub stall_epochs: usize,
    /// Hard cap on epochs; the run normally ends through the stall rule.
    pub max_epochs: Option<usize>,
    pub pruned_ledger: BTreeSet<PrunedGroup>,
    pub history: Vec<ControllerStep>,
}

impl Default for DamageSchedule {
    fn default() -> Self {
        DamageSchedule {
            delta: 0.01,
            lambda: 0.01,
            epsilon: 0.1,
            theta: None,
            step_fraction: 0.05,
            stall_epochs: 10,
            max_epochs: None,
            pruned_ledger: BTreeSet::new(),
            history: Vec::new(),
        }
    }
}

impl DamageSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::input(what.to_string()));
        if !(self.delta >= 0.0) {
            return bad("delta must be >= 0");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be >= 0");
        }
        if let Some(t) = self.theta {
            if !(t >= 0.0) {
                return bad("theta must be >= 0");
            }
        }
        if !(self.step_fraction > 0.0 && self.step_fraction <= 1.0) {
            return bad("step_fraction must lie in (0, 1]");
        }
        if self.stall_epochs == 0 {
            return bad("stall_epochs must be positive");
        }
        Ok(())
    }
}

/// Norms of all live groups across the convolutions, pooled.
fn pooled_live_norms(net: &Network) -> Vec<f32> {
    net.conv_indices()
        .into_iter()
        .flat_map(|idx| {
            let c = net.conv(idx).expect("conv index");
            group_norms(&c.kernel).live_values(&c.pattern)
        })
        .collect()
}

/// Fraction of `norms` strictly below `theta`.
pub fn fraction_below(norms: &[f32], theta: f32) -> f64 {
    if norms.is_empty() {
        return 0.0;
    }
    norms.iter().filter(|&&v| v < theta).count() as f64 / norms.len() as f64
}

/// θ placing the lowest `ceil(target · m)` of the `m` norms strictly below it
/// (up to ties), halfway to the next larger norm. Targets at or below zero
/// give θ = 0.
pub fn theta_for_fraction(norms: &[f32], target: f64) -> Result<f32> {
    if norms.is_empty() {
        return Err(Error::input("no live groups to place θ against"));
    }
    if target <= 0.0 {
        return Ok(0.0);
    }
    let target = target.min(1.0);
    let pivot = quantile_threshold(norms, target)?;
    let next = norms
        .iter()
        .copied()
        .filter(|&v| v > pivot)
        .min_by(f32::total_cmp);
    Ok(match next {
        Some(n) => {
            let mid = ((pivot as f64 + n as f64) / 2.0) as f32;
            if mid > pivot {
                mid
            } else {
                n
            }
        }
        None => {
            let up = pivot * (1.0 + 1e-3);
            if up > pivot {
                up
            } else {
                pivot + f32::MIN_POSITIVE.max(1e-6)
            }
        }
    })
}

/// Gradual group-wise sparsification of every convolution under one shared θ.
///
/// Each epoch trains with the truncated group penalty, permanently removes
/// live groups with norm below ε, then compares validation accuracy with the
/// starting baseline and moves θ one quantile step up (drop below δ) or down
/// (drop above δ). The run ends after `stall_epochs` epochs without a removal.
/// `test` is only reported, never consulted by the controller.
pub fn gradual_sparsify(
    net: &mut Network,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    schedule: &mut DamageSchedule,
    settings: &TrainSettings,
) -> Result<SparsifyReport> {
    if val.is_empty() {
        return Err(Error::input("validation set is empty"));
    }
    schedule.validate()?;
    let baseline = evaluate(net, val)?;
    let before = evaluate(net, test)?;
    let initial_norms = pooled_live_norms(net);
    let mut theta = match schedule.theta {
        Some(t) => t,
        None if initial_norms.is_empty() => 0.0,
        None => theta_for_fraction(&initial_norms, schedule.step_fraction)?,
    };
    schedule.theta = Some(theta);
    log::info!("gradual: baseline val accuracy {baseline:.4}, initial theta {theta}");

    let mut state = SgdState::new(net, settings.sgd);
    let mut rng = settings.rng(0);
    let mut log = Vec::new();
    let mut steps = Vec::new();
    let mut stall = 0;
    let stop_reason = loop {
        let epoch = log.len() + 1;
        let reg = RegularizerConfig::truncated(schedule.lambda, theta)?;
        train_epoch(net, &mut state, train, settings.batch_size, &mut rng, regularizer_hook(Some(reg)))?;

        let mut pruned = 0;
        for idx in net.conv_indices() {
            let c = net.conv(idx).expect("conv index");
            let norms = group_norms(&c.kernel);
            let mut q = c.pattern.clone();
            for key in c.pattern.keys() {
                if norms.get(key.s, key.i, key.j) < schedule.epsilon {
                    q.set(key.s, key.i, key.j, false);
                    schedule.pruned_ledger.insert(PrunedGroup {
                        layer: idx,
                        s: key.s,
                        i: key.i,
                        j: key.j,
                    });
                    pruned += 1;
                }
            }
            net.set_pattern(idx, q)?;
        }

        let val_acc = evaluate(net, val)?;
        let test_acc = evaluate(net, test)?;
        let drop = baseline - val_acc;
        let norms = pooled_live_norms(net);
        let below_before = fraction_below(&norms, theta);
        let theta_before = theta;
        if !norms.is_empty() {
            if drop < schedule.delta {
                theta = theta_for_fraction(&norms, below_before + schedule.step_fraction)?;
            } else if drop > schedule.delta {
                theta = theta_for_fraction(&norms, below_before - schedule.step_fraction)?;
            }
        }
        let below_after = fraction_below(&norms, theta);
        schedule.theta = Some(theta);

        log.push(EpochRecord {
            epoch,
            theta: Some(theta_before as f64),
            densities: densities(net),
            val_accuracy: Some(val_acc),
            test_accuracy: Some(test_acc),
        });
        let step = ControllerStep {
            epoch,
            val_accuracy: val_acc,
            drop,
            pruned,
            live_groups: norms.len(),
            theta_before: theta_before as f64,
            theta_after: theta as f64,
            below_before,
            below_after,
        };
        log::info!(
            "gradual epoch {epoch}: val {val_acc:.4} (drop {drop:+.4}), test {test_acc:.4}, pruned {pruned}, \
             live {}, theta {theta_before:.4} -> {theta:.4}, below {below_before:.3} -> {below_after:.3}",
            norms.len()
        );
        schedule.history.push(step.clone());
        steps.push(step);

        stall = if pruned > 0 { 0 } else { stall + 1 };
        if stall >= schedule.stall_epochs {
            break "stall";
        }
        if schedule.max_epochs.is_some_and(|m| epoch >= m) {
            break "max_epochs";
        }
    };

    let after = evaluate(net, test)?;
    let phase = PhaseAccuracy {
        phase: "gradual".into(),
        epochs: log.len(),
        test_accuracy: after,
    };
    let mut report = finish(net, "gradual", before, vec![phase], log);
    report.baseline_val_accuracy = Some(baseline);
    report.controller = steps;
    report.stop_reason = Some(stop_reason.into());
    Ok(report)
}

/// Random halves of a held-out set: one drives the controller, the other is
/// only reported.
pub fn split_validation(test_set: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    test_set.split_halves(seed)
}

#[cfg(test)]
mod tests;
