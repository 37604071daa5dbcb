//! Ablation grids over activation, boundary penalty, regulariser weights and
//! training-set size, scored by test-set Dice.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::nn::Activation;
use crate::synth::{generate, SynthConfig};
use crate::train::{evaluate, Region, Sample, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Protocol {
    pub train_sizes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub test_cases: usize,
    pub synth: SynthConfig,
    /// Template for every run; arm settings, steps and seed are overwritten.
    pub base: TrainConfig,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            train_sizes: vec![2, 4, 8],
            seeds: (0..5).collect(),
            steps: 300,
            test_cases: 8,
            synth: SynthConfig::default(),
            base: TrainConfig {
                lr0: 3e-3,
                ..TrainConfig::default()
            },
        }
    }
}

/// One configuration of the ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub activation: Activation,
    pub use_pde: bool,
    pub use_bc: bool,
    pub weights: LossWeights,
}

impl Arm {
    pub fn biophysics() -> Self {
        Arm {
            name: "biophys".into(),
            activation: Activation::Sine,
            use_pde: true,
            use_bc: true,
            weights: LossWeights::default(),
        }
    }

    pub fn dice_only() -> Self {
        Arm {
            name: "dice_only".into(),
            use_pde: false,
            use_bc: false,
            ..Arm::biophysics()
        }
    }

    pub fn relu() -> Self {
        Arm {
            name: "relu".into(),
            activation: Activation::Relu,
            ..Arm::biophysics()
        }
    }

    pub fn no_bc() -> Self {
        Arm {
            name: "no_bc".into(),
            use_bc: false,
            ..Arm::biophysics()
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        c.estimator.activation = self.activation;
        c.use_pde = self.use_pde;
        c.use_bc = self.use_bc;
        c.weights = self.weights;
        c
    }
}

/// Training pool and held-out cases for one seed.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Case seeds are offset by `10_000 * seed`; test cases start at `5_000`.
pub fn dataset_for_seed(protocol: &Protocol, seed: u64) -> Result<Dataset> {
    let pool = protocol.train_sizes.iter().copied().max().unwrap_or(0);
    let base = seed.wrapping_mul(10_000);
    let make = |offset: u64, n: usize, tag: &str| -> Result<Vec<Sample>> {
        (0..n as u64)
            .map(|i| {
                let s = base + offset + i;
                Ok(Sample::from_case(
                    format!("{tag}{s}"),
                    &generate(s, &protocol.synth)?,
                ))
            })
            .collect()
    };
    Ok(Dataset {
        train: make(0, pool, "train")?,
        test: make(5_000, protocol.test_cases, "test")?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub train_size: usize,
    pub seed: u64,
    pub dice_tc: f64,
    pub dice_wt: f64,
    pub dice_et: f64,
    pub mean_dice: f64,
    pub final_loss: f64,
}

pub fn run_arm(
    protocol: &Protocol,
    arm: &Arm,
    data: &Dataset,
    train_size: usize,
    seed: u64,
) -> Result<RunResult> {
    if train_size == 0 || train_size > data.train.len() {
        return Err(Error::invalid(format!(
            "train size {train_size} outside 1..={}",
            data.train.len()
        )));
    }
    let mut config = arm.apply(&protocol.base);
    config.steps = protocol.steps;
    config.seed = seed;
    let mut trainer = Trainer::new(config)?;
    let log = trainer.run(&data.train[..train_size], |_, _| {})?;
    let report = evaluate(
        &trainer.model.segnet,
        &data.test,
        &trainer.config.drop_channels,
    )?;
    let dice = |r| report.summary(r).dice_mean;
    Ok(RunResult {
        arm: arm.name.clone(),
        train_size,
        seed,
        dice_tc: dice(Region::TC),
        dice_wt: dice(Region::WT),
        dice_et: dice(Region::ET),
        mean_dice: report.mean_dice(),
        final_loss: log.last().map_or(f64::NAN, |l| l.total),
    })
}

/// Every arm at every size and seed. Arms of one seed share data and
/// initial weights, so their differences are paired.
pub fn run_grid(
    protocol: &Protocol,
    arms: &[Arm],
    mut progress: impl FnMut(&RunResult),
) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for &seed in &protocol.seeds {
        let data = dataset_for_seed(protocol, seed)?;
        for &size in &protocol.train_sizes {
            for arm in arms {
                let r = run_arm(protocol, arm, &data, size, seed)?;
                progress(&r);
                out.push(r);
            }
        }
    }
    Ok(out)
}

pub const SUMMARY_HEADER: &str = "arm,train_size,seed,dice_tc,dice_wt,dice_et,mean_dice,final_loss";

pub fn summary_csv(results: &[RunResult]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.arm, r.train_size, r.seed, r.dice_tc, r.dice_wt, r.dice_et, r.mean_dice, r.final_loss
        );
    }
    out
}

/// Median with the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median mean-Dice of an arm, optionally restricted to one train size.
pub fn median_dice(results: &[RunResult], arm: &str, size: Option<usize>) -> f64 {
    let v: Vec<f64> = results
        .iter()
        .filter(|r| r.arm == arm && size.map_or(true, |s| r.train_size == s))
        .map(|r| r.mean_dice)
        .collect();
    median(&v)
}

/// Per-seed `arm_a - arm_b` mean-Dice gap at one train size.
pub fn paired_gaps(
    results: &[RunResult],
    arm_a: &str,
    arm_b: &str,
    size: usize,
) -> BTreeMap<u64, f64> {
    let pick = |arm: &str| -> BTreeMap<u64, f64> {
        results
            .iter()
            .filter(|r| r.arm == arm && r.train_size == size)
            .map(|r| (r.seed, r.mean_dice))
            .collect()
    };
    let (a, b) = (pick(arm_a), pick(arm_b));
    a.iter()
        .filter_map(|(s, va)| b.get(s).map(|vb| (*s, va - vb)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeVerdict {
    pub smallest: usize,
    pub largest: usize,
    pub regularised_median: f64,
    pub baseline_median: f64,
    /// Seeds whose smallest-size gap is at least their largest-size gap.
    pub shrinking_gap_seeds: usize,
    pub seeds: usize,
}

impl SizeVerdict {
    pub fn passed(&self) -> bool {
        self.regularised_median >= self.baseline_median && 2 * self.shrinking_gap_seeds > self.seeds
    }
}

/// Regulariser benefit at small data and its trend with train size.
pub fn size_verdict(
    results: &[RunResult],
    regularised: &str,
    baseline: &str,
) -> Result<SizeVerdict> {
    let sizes: Vec<usize> = results.iter().map(|r| r.train_size).collect();
    let (Some(&smallest), Some(&largest)) = (sizes.iter().min(), sizes.iter().max()) else {
        return Err(Error::invalid("no results"));
    };
    let small = paired_gaps(results, regularised, baseline, smallest);
    let large = paired_gaps(results, regularised, baseline, largest);
    let shrinking = small
        .iter()
        .filter(|(s, g)| large.get(s).is_some_and(|gl| **g >= *gl))
        .count();
    Ok(SizeVerdict {
        smallest,
        largest,
        regularised_median: median_dice(results, regularised, Some(smallest)),
        baseline_median: median_dice(results, baseline, Some(smallest)),
        shrinking_gap_seeds: shrinking,
        seeds: small.len(),
    })
}
