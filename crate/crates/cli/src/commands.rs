use std::fmt;
use std::fs;
use std::path::Path;

use thinconv::bench::{run_bench, BenchConfig, BenchResult};
use thinconv::damage::{
    gradual_sparsify, layer_summaries, patterns_for_network, sparsify_with_finetune,
    split_validation, train_fixed_pattern, train_network, DamageSchedule, FinetunePlan,
    LayerSummary, SparsifyReport, TrainSettings,
};
use thinconv::data::{load_mnist, Dataset};
use thinconv::lowering::ConvGeometry;
use thinconv::net::{build_lenet, evaluate, load_checkpoint, save_checkpoint, LrSchedule, Network, SgdConfig};
use thinconv::sparsity::{RegularizerConfig, RegularizerMode};
use thinconv::{Error, Result};

use crate::config::{ExperimentConfig, SparsifyMode};

fn settings(cfg: &ExperimentConfig) -> TrainSettings {
    TrainSettings {
        sgd: SgdConfig {
            lr: LrSchedule {
                base: cfg.lr,
                gamma: cfg.lr_gamma,
                power: cfg.lr_power,
            },
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
        batch_size: cfg.batch_size,
        seed: cfg.seed,
    }
}

fn limited(data: Dataset, limit: usize) -> Dataset {
    if limit > 0 && limit < data.len() {
        data.take(limit)
    } else {
        data
    }
}

fn train_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (images, labels) = cfg.train_paths();
    Ok(limited(load_mnist(images, labels)?, cfg.train_limit))
}

fn test_set(cfg: &ExperimentConfig) -> Result<Dataset> {
    let (images, labels) = cfg.test_paths();
    Ok(limited(load_mnist(images, labels)?, cfg.test_limit))
}

fn regularizer(cfg: &ExperimentConfig, mode: Option<RegularizerMode>) -> Result<Option<RegularizerConfig>> {
    mode.map(|m| {
        let theta = match m {
            RegularizerMode::TruncatedL21 => cfg.theta.ok_or_else(|| Error::Config {
                key: "theta".into(),
                msg: "truncated_l21 needs an explicit theta".into(),
            })?,
            _ => f32::INFINITY,
        };
        RegularizerConfig::new(m, cfg.lambda, theta)
    })
    .transpose()
}

fn write_outputs(dir: &Path, net: &Network, report: &SparsifyReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_checkpoint(net, dir.join("model.ckpt"))?;
    report.write(dir)
}

/// Train a fresh network: plain, under a fixed pattern, or with a regularizer.
/// Writes `model.ckpt`, `report.json` and `report.csv` to the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<SparsifyReport> {
    let train = train_set(cfg)?;
    let test = test_set(cfg)?;
    let mut net = build_lenet(cfg.seed);
    let s = settings(cfg);
    let report = match cfg.pattern {
        Some(name) => {
            let patterns = patterns_for_network(&net, name)?;
            train_fixed_pattern(&mut net, &train, &test, &patterns, cfg.epochs, &s)?
        }
        None => train_network(&mut net, &train, &test, cfg.epochs, &s, regularizer(cfg, cfg.regularizer)?)?,
    };
    write_outputs(&cfg.output_dir, &net, &report)?;
    Ok(report)
}

fn input_checkpoint(cfg: &ExperimentConfig) -> Result<Network> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Input("no checkpoint given (set `checkpoint`)".into()))?;
    load_checkpoint(path)
}

/// Sparsify an existing checkpoint with the configured procedure.
pub fn cmd_sparsify(cfg: &ExperimentConfig) -> Result<SparsifyReport> {
    let mut net = input_checkpoint(cfg)?;
    let train = train_set(cfg)?;
    let test = test_set(cfg)?;
    let s = settings(cfg);
    let report = match cfg.mode {
        SparsifyMode::Finetune => {
            let plan = FinetunePlan {
                tau: cfg.tau,
                regularizer: regularizer(cfg, cfg.regularizer)?,
                epochs_reg: cfg.epochs_reg,
                epochs_ft: cfg.epochs_ft,
            };
            sparsify_with_finetune(&mut net, &train, &test, &plan, &s)?
        }
        SparsifyMode::Gradual => {
            let (val, held_out) = split_validation(&test, cfg.split_seed)?;
            let mut schedule = DamageSchedule {
                delta: cfg.delta,
                lambda: cfg.lambda,
                epsilon: cfg.epsilon,
                theta: cfg.theta,
                step_fraction: cfg.step_fraction,
                stall_epochs: cfg.stall_epochs,
                max_epochs: (cfg.max_epochs > 0).then_some(cfg.max_epochs),
                ..DamageSchedule::default()
            };
            let report = gradual_sparsify(&mut net, &train, &val, &held_out, &mut schedule, &s)?;
            fs::create_dir_all(&cfg.output_dir)?;
            let ledger: Vec<_> = schedule.pruned_ledger.iter().collect();
            fs::write(
                cfg.output_dir.join("pruned.json"),
                serde_json::to_string_pretty(&ledger).map_err(|e| Error::Report(e.to_string()))?,
            )?;
            report
        }
    };
    write_outputs(&cfg.output_dir, &net, &report)?;
    Ok(report)
}

/// Time the configured convolution over the density grid; writes `bench.csv`
/// and the raw `bench_samples.csv`.
pub fn cmd_bench(cfg: &ExperimentConfig) -> Result<BenchResult> {
    let geometry = ConvGeometry::new(
        cfg.bench_d,
        cfg.bench_in_maps,
        cfg.bench_out_maps,
        cfg.bench_pad,
        cfg.bench_stride,
        cfg.bench_width,
        cfg.bench_height,
    )
    .map_err(|e| Error::Config {
        key: "bench_*".into(),
        msg: e.to_string(),
    })?;
    let bench = BenchConfig {
        geometry,
        repeats: cfg.bench_repeats,
        warmup: cfg.bench_warmup,
        calls_per_repeat: cfg.bench_calls,
        seed: cfg.seed,
        ..BenchConfig::default()
    };
    let result = run_bench(&bench)?;
    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("bench.csv"), result.to_csv()?)?;
    fs::write(cfg.output_dir.join("bench_samples.csv"), result.samples_csv()?)?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub examples: usize,
    pub layers: Vec<LayerSummary>,
}

impl fmt::Display for EvalSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "top-1 accuracy {:.4} on {} examples", self.accuracy, self.examples)?;
        for l in &self.layers {
            let speedup = l
                .speedup
                .map_or_else(|| "undefined".to_string(), |s| format!("{s:.2}x"));
            write!(
                f,
                "layer {}: {}/{} groups live, density {:.4}, theoretical speedup {}",
                l.layer, l.live_groups, l.total_groups, l.density, speedup
            )?;
            if !l.dead_maps.is_empty() {
                write!(f, ", dead input maps {:?}", l.dead_maps)?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Accuracy of the checkpoint on the test set, or of a fresh network when no
/// checkpoint is configured.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalSummary> {
    let net = match &cfg.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => build_lenet(cfg.seed),
    };
    let test = test_set(cfg)?;
    Ok(EvalSummary {
        accuracy: evaluate(&net, &test)?,
        examples: test.len(),
        layers: layer_summaries(&net),
    })
}
