//! Optimisation loop joining the backbone, the density estimator and the
//! composite loss, plus checkpointing and region-wise evaluation.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimator::{SirenConfig, SirenNet, TimeChannel};
use crate::io::Checkpoint;
use crate::loss::{
    bc_loss, dice_loss, pde_loss, sample_coefficients, total_loss, CoefficientRanges, LossWeights,
};
use crate::metrics::{dice_score, hd95, BinaryMask};
use crate::nn::{Activation, Module};
use crate::segnet::{SegNet, SegNetConfig};
use crate::synth::{drop_channels, SynthCase};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr0: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub use_pde: bool,
    pub use_bc: bool,
    pub drop_channels: Vec<usize>,
    pub segnet: SegNetConfig,
    pub estimator: SirenConfig,
    pub coefficient_ranges: CoefficientRanges,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr0: 3e-4,
            weights: LossWeights::default(),
            seed: 0,
            use_pde: true,
            use_bc: true,
            drop_channels: Vec::new(),
            segnet: SegNetConfig::default(),
            estimator: SirenConfig::default(),
            coefficient_ranges: CoefficientRanges::default(),
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps must be positive"));
        }
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::invalid(format!(
                "lr0 must be a non-negative number, got {}",
                self.lr0
            )));
        }
        if self.estimator.in_channels != self.segnet.base_features {
            return Err(Error::invalid(format!(
                "estimator expects {} feature channels but the backbone produces {}",
                self.estimator.in_channels, self.segnet.base_features
            )));
        }
        if let Some(&c) = self
            .drop_channels
            .iter()
            .find(|&&c| c >= self.segnet.in_channels)
        {
            return Err(Error::invalid(format!("cannot drop channel {c}")));
        }
        Ok(())
    }

    /// Whether the estimator takes part in the objective at all.
    pub fn regularised(&self) -> bool {
        self.use_pde || self.use_bc
    }

    pub fn activation(&self) -> Activation {
        self.estimator.activation
    }

    /// `lr0 * (1 + cos(pi * step / steps)) / 2`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        cosine_lr(self.lr0, step, self.steps)
    }
}

pub fn cosine_lr(lr0: f64, step: usize, steps: usize) -> f64 {
    let frac = step as f64 / steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Adaptive-moment optimiser with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros = |p: &&Tensor| Tensor::zeros(p.shape());
        Adam {
            config,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        let AdamConfig { beta1, beta2, eps } = self.config;
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// One training or evaluation case.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[channels, H, W, D]`.
    pub inputs: Tensor,
    /// `[classes, H, W, D]` one-hot.
    pub labels: Tensor,
    pub spacing: f64,
}

impl Sample {
    pub fn from_case(id: impl Into<String>, case: &SynthCase) -> Self {
        Sample {
            id: id.into(),
            inputs: case.inputs.clone(),
            labels: case.labels.clone(),
            spacing: case.density.spacing(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        let s = self.inputs.shape();
        [s[1], s[2], s[3]]
    }

    pub fn with_dropped(&self, channels: &[usize]) -> Result<Sample> {
        let mut s = self.clone();
        drop_channels(&mut s.inputs, channels)?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub segnet: SegNet,
    pub estimator: SirenNet,
}

impl Model {
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            segnet: SegNet::init(config.segnet.clone(), config.seed)?,
            estimator: SirenNet::init(
                config.estimator.clone(),
                config.seed ^ 0x5EED_E571_0000_0001,
            )?,
        })
    }
}

impl Module for Model {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.segnet.named_params();
        out.extend(self.estimator.named_params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.segnet.params_mut();
        out.extend(self.estimator.params_mut());
        out
    }
}

/// Loss components of one step. Absent terms are `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub dice: f64,
    pub pde: Option<f64>,
    pub bc: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub const LOSS_CSV_HEADER: &str = "step,lr,total,dice,pde,bc";

pub fn loss_csv(log: &[StepLog]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for s in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            s.step,
            s.lr,
            s.total,
            s.dice,
            opt(s.pde),
            opt(s.bc)
        );
    }
    out
}

/// Owns the model, the optimiser state and the two random streams: one for
/// case draws and one for coefficient fields, so switching the regulariser
/// off never shifts which cases are visited.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub step: usize,
    case_rng: ChaCha8Rng,
    coef_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let model = Model::init(&config)?;
        let params: Vec<&Tensor> = model.named_params().into_iter().map(|(_, t)| t).collect();
        let adam = Adam::new(config.adam, &params);
        let case_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xCA5E));
        let coef_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0xC0EF));
        Ok(Trainer {
            config,
            model,
            adam,
            step: 0,
            case_rng,
            coef_rng,
        })
    }

    /// Performs one optimisation step on a case drawn uniformly from `data`.
    pub fn train_step(&mut self, data: &[Sample]) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let sample = &data[self.case_rng.gen_range(0..data.len())];
        let step = self.step;
        let cfg = &self.config;
        let mut tape = Tape::new();
        let seg_params = self.model.segnet.bind(&mut tape);
        let input = if cfg.drop_channels.is_empty() {
            tape.constant(sample.inputs.clone())
        } else {
            tape.constant(sample.with_dropped(&cfg.drop_channels)?.inputs)
        };
        let out = self.model.segnet.forward(&mut tape, &seg_params, input)?;
        let dice = dice_loss(&mut tape, out.probs, &sample.labels)?;

        let (mut pde, mut bc) = (None, None);
        let mut est_params = Vec::new();
        if cfg.regularised() {
            est_params = self.model.estimator.bind(&mut tape);
            let t = TimeChannel::at_step(step, cfg.steps);
            let dens = self
                .model
                .estimator
                .eval(&mut tape, &est_params, out.features, t)?;
            let fs = tape.shape(out.features).to_vec();
            let coeffs = sample_coefficients(
                [fs[1], fs[2], fs[3]],
                cfg.coefficient_ranges,
                &mut self.coef_rng,
            )?;
            if cfg.use_pde {
                pde = Some(pde_loss(&mut tape, dens.u_hat, dens.du_dt, &coeffs)?);
            }
            if cfg.use_bc {
                bc = Some(bc_loss(&mut tape, dens.u_hat, &coeffs)?);
            }
        }
        let total = total_loss(&mut tape, dice, pde, bc, cfg.weights)?;

        let log = StepLog {
            step,
            lr: cfg.learning_rate(step),
            total: tape.value(total).item(),
            dice: tape.value(dice).item(),
            pde: pde.map(|v| tape.value(v).item()),
            bc: bc.map(|v| tape.value(v).item()),
        };
        if !log.total.is_finite() {
            return Err(Error::NonFinite {
                location: format!(
                    "loss at step {step} (dice {}, pde {}, bc {})",
                    log.dice,
                    opt(log.pde),
                    opt(log.bc)
                ),
                value: log.total,
            });
        }

        let grads = tape.backward(total)?;
        let mut g: Vec<Tensor> = seg_params.iter().map(|&p| grads.wrt(p)).collect();
        if est_params.is_empty() {
            g.extend(
                self.model
                    .estimator
                    .named_params()
                    .iter()
                    .map(|(_, t)| Tensor::zeros(t.shape())),
            );
        } else {
            g.extend(est_params.iter().map(|&p| grads.wrt(p)));
        }
        self.adam.update(self.model.params_mut(), &g, log.lr);
        self.step += 1;
        Ok(log)
    }

    /// Runs the remaining steps, calling `observe` after each one.
    pub fn run(
        &mut self,
        data: &[Sample],
        mut observe: impl FnMut(&Trainer, &StepLog),
    ) -> Result<Vec<StepLog>> {
        let mut log = Vec::with_capacity(self.config.steps - self.step.min(self.config.steps));
        while self.step < self.config.steps {
            let entry = self.train_step(data)?;
            observe(self, &entry);
            log.push(entry);
        }
        Ok(log)
    }

    /// SHA-256 over every parameter's bytes, in declaration order.
    pub fn parameter_digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in self.model.named_params() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        for (n, m) in names.iter().zip(&self.adam.m) {
            tensors.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&self.adam.v) {
            tensors.push((format!("adam.v.{n}"), v.clone()));
        }
        Ok(Checkpoint {
            step: self.step,
            config: serde_json::to_value(&self.config)?,
            tensors,
        })
    }

    /// Restores parameters and optimiser moments. Random streams restart
    /// from the configured seed.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = serde_json::from_value(ck.config.clone())?;
        let mut trainer = Trainer::new(config)?;
        let names: Vec<String> = trainer
            .model
            .named_params()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let fetch = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = ck
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != like.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint tensor",
                    lhs: t.shape().to_vec(),
                    rhs: like.shape().to_vec(),
                });
            }
            Ok(t.clone())
        };
        for (name, p) in names.iter().zip(trainer.model.params_mut()) {
            *p = fetch(name, p)?;
        }
        for (i, name) in names.iter().enumerate() {
            trainer.adam.m[i] = fetch(&format!("adam.m.{name}"), &trainer.adam.m[i])?;
            trainer.adam.v[i] = fetch(&format!("adam.v.{name}"), &trainer.adam.v[i])?;
        }
        trainer.step = ck.step;
        trainer.adam.t = ck.step;
        Ok(trainer)
    }
}

/// Trains from scratch and returns the trainer with its loss log.
pub fn train(config: TrainConfig, data: &[Sample]) -> Result<(Trainer, Vec<StepLog>)> {
    let mut trainer = Trainer::new(config)?;
    let log = trainer.run(data, |_, _| {})?;
    Ok((trainer, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    TC,
    WT,
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::TC, Region::WT, Region::ET];

    /// Class indices `(0 normal, 1 core, 2 whole, 3 enhancing)` in the region.
    pub fn contains(self, class: u8) -> bool {
        match self {
            Region::WT => class != 0,
            Region::TC => class == 1 || class == 3,
            Region::ET => class == 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Region::TC => "TC",
            Region::WT => "WT",
            Region::ET => "ET",
        }
    }
}

/// Per-voxel argmax over the leading (class) axis; ties go to the lower class.
pub fn argmax_classes(probs: &Tensor) -> Vec<u8> {
    let k = probs.shape()[0];
    let n = probs.numel() / k;
    let p = probs.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if p[c * n + i] > p[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

pub fn region_mask(classes: &[u8], dims: [usize; 3], region: Region) -> BinaryMask {
    BinaryMask::from_fn(dims, |i| region.contains(classes[i]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseMetric {
    pub case_id: String,
    pub region: Region,
    pub dice: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionSummary {
    pub dice_mean: f64,
    pub dice_std: f64,
    pub hd95_mean: f64,
    pub hd95_std: f64,
    pub hd95_excluded: usize,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<CaseMetric>,
}

impl EvalReport {
    pub fn summary(&self, region: Region) -> RegionSummary {
        let rows: Vec<&CaseMetric> = self.rows.iter().filter(|r| r.region == region).collect();
        let dice: Vec<f64> = rows.iter().map(|r| r.dice).collect();
        let hd: Vec<f64> = rows.iter().filter_map(|r| r.hd95).collect();
        let (dice_mean, dice_std) = mean_std(&dice);
        let (hd95_mean, hd95_std) = mean_std(&hd);
        RegionSummary {
            dice_mean,
            dice_std,
            hd95_mean,
            hd95_std,
            hd95_excluded: rows.len() - hd.len(),
        }
    }

    /// Average of the TC, WT and ET mean Dice.
    pub fn mean_dice(&self) -> f64 {
        Region::ALL
            .iter()
            .map(|&r| self.summary(r).dice_mean)
            .sum::<f64>()
            / 3.0
    }

    pub fn hd95_excluded(&self) -> usize {
        self.rows.iter().filter(|r| r.hd95.is_none()).count()
    }

    /// `case_id,region,dice,hd95` rows, then `mean` and `std` rows per region.
    /// Excluded distances are left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("case_id,region,dice,hd95\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                r.case_id,
                r.region.name(),
                r.dice,
                opt(r.hd95)
            );
        }
        for r in Region::ALL {
            let s = self.summary(r);
            let _ = writeln!(out, "mean,{},{},{}", r.name(), s.dice_mean, s.hd95_mean);
        }
        for r in Region::ALL {
            let s = self.summary(r);
            let _ = writeln!(out, "std,{},{},{}", r.name(), s.dice_std, s.hd95_std);
        }
        out
    }
}

/// Scores predicted class maps against reference class maps.
pub fn score_case(
    case_id: &str,
    pred: &[u8],
    truth: &[u8],
    dims: [usize; 3],
    spacing: f64,
) -> Result<Vec<CaseMetric>> {
    Region::ALL
        .iter()
        .map(|&region| {
            let p = region_mask(pred, dims, region);
            let t = region_mask(truth, dims, region);
            let hd = match hd95(&p, &t, spacing) {
                Ok(v) => Some(v),
                Err(Error::EmptyMask(_)) => None,
                Err(e) => return Err(e),
            };
            Ok(CaseMetric {
                case_id: case_id.to_string(),
                region,
                dice: dice_score(&p, &t)?,
                hd95: hd,
            })
        })
        .collect()
}

pub fn evaluate(segnet: &SegNet, data: &[Sample], drop: &[usize]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation split is empty"));
    }
    let mut rows = Vec::with_capacity(3 * data.len());
    for sample in data {
        let sample = sample.with_dropped(drop)?;
        let (probs, _) = segnet.predict(&sample.inputs)?;
        let pred = argmax_classes(&probs);
        let truth = argmax_classes(&sample.labels);
        rows.extend(score_case(
            &sample.id,
            &pred,
            &truth,
            sample.dims(),
            sample.spacing,
        )?);
    }
    Ok(EvalReport { rows })
}
