//! Training: optimizer, epoch loop with early stopping, fold planning and
//! synthetic data for small experiments.

pub mod loss;

mod synthetic;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::Network;
use crate::pipeline::{self, MaskVolume, Volume};
use crate::tensor::Tensor;

pub use loss::LossKind;
pub use synthetic::gen_synthetic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub encoder_trainable: bool,
    pub loss_kind: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            decay: 1.99e-7,
            batch_size: 2,
            max_epochs: 100,
            patience: 40,
            seed: 0,
            encoder_trainable: true,
            loss_kind: LossKind::BceDice,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted so that a run can be checked for bit-identical weights.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Contract(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Contract("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || self.decay < 0.0 {
            return Err(Error::Contract("epsilon must be positive and decay non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Contract("batch size and epoch count must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Contract(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }

    /// Effective rate after `t` optimizer steps.
    pub fn lr_at(&self, t: u64) -> f64 {
        self.learning_rate / (1.0 + self.decay * t as f64)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// First and second moments for every parameter, plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Vec<f32>> = params.into_iter().map(|p| vec![0.0; p.numel()]).collect();
        Self { v: m.clone(), m, t: 0 }
    }
}

/// One Adam step at step index `state.t + 1`. `grads[i] == None` leaves parameter
/// `i` and its moments untouched. Returns the effective learning rate used.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Option<&Tensor>], state: &mut AdamState, cfg: &TrainConfig) -> Result<f64> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t;
    let lr_t = cfg.lr_at(t);
    let bc1 = 1.0 - cfg.beta1.powi(t.min(i32::MAX as u64) as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t.min(i32::MAX as u64) as i32);
    let (b1, b2, eps) = (cfg.beta1, cfg.beta2, cfg.epsilon);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        p.expect_same_shape(g)?;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj as f64;
            let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
            let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            if lr_t != 0.0 {
                let update = lr_t * (mj / bc1) / ((vj / bc2).sqrt() + eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
    Ok(lr_t)
}

/// One network input window and its target mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(1, 3, depth, h, w)`, normalized and channel-replicated.
    pub input: Tensor,
    /// `(1, 1, depth, h, w)` of `0.0 / 1.0`.
    pub target: Tensor,
}

/// Normalizes, windows and channel-replicates a scan/mask pair.
pub fn prepare_samples(scan: &Volume, mask: &MaskVolume, window: usize, stride: usize) -> Result<Vec<Sample>> {
    if scan.extents() != mask.extents() {
        return Err(Error::Contract(format!(
            "scan extents {:?} differ from mask extents {:?}",
            scan.extents(),
            mask.extents()
        )));
    }
    let inputs = pipeline::decompose(&pipeline::normalize_scan(scan)?, window, stride)?;
    let targets = pipeline::decompose(&mask.to_volume(), window, stride)?;
    let [_, h, w] = scan.extents();
    inputs
        .windows
        .iter()
        .zip(&targets.windows)
        .map(|(x, y)| {
            let x = x.slab.clone().reshape(&[1, 1, window, h, w])?;
            Ok(Sample {
                input: pipeline::replicate_channels(&x)?,
                target: y.slab.clone().reshape(&[1, 1, window, h, w])?,
            })
        })
        .collect()
}

fn stack(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let xs: Vec<Tensor> = samples.iter().map(|s| s.input.clone()).collect();
    let ys: Vec<Tensor> = samples.iter().map(|s| s.target.clone()).collect();
    Ok((Tensor::stack_batch(&xs)?, Tensor::stack_batch(&ys)?))
}

/// Pooled statistics of a network over a sample set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    /// Mean of per-batch losses.
    pub loss: f64,
    /// Soft Dice over all voxels of all samples.
    pub soft_dice: f64,
    /// Dice of predictions thresholded at 0.5, over all voxels.
    pub hard_dice: f64,
}

pub fn evaluate(net: &Network, samples: &[Sample], batch_size: usize, kind: LossKind) -> Result<EvalStats> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation needs at least one sample".into()));
    }
    let mut losses = 0.0;
    let mut batches = 0;
    let (mut inter, mut total) = (0.0, 0.0);
    let (mut hard_inter, mut hard_total) = (0usize, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y) = stack(&refs)?;
        let p = net.forward(&x)?;
        if !p.is_finite() {
            return Err(Error::NonFinite("network produced non-finite probabilities".into()));
        }
        losses += loss::loss_value(&p, &y, kind)?;
        batches += 1;
        for (&pi, &ti) in p.data().iter().zip(y.data()) {
            let (pi, ti) = (pi as f64, ti as f64);
            inter += pi * ti;
            total += pi + ti;
            let hp = (pi >= 0.5) as usize;
            let ht = (ti >= 0.5) as usize;
            hard_inter += hp * ht;
            hard_total += hp + ht;
        }
    }
    let hard_dice = if hard_total == 0 {
        1.0
    } else {
        2.0 * hard_inter as f64 / hard_total as f64
    };
    Ok(EvalStats {
        loss: losses / batches as f64,
        soft_dice: (2.0 * inter + loss::DICE_SMOOTHING) / (total + loss::DICE_SMOOTHING),
        hard_dice,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    /// The epoch callback asked to stop.
    Requested,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean training batch loss (before each batch's update).
    pub train_loss: f64,
    pub val_loss: f64,
    /// Soft Dice pooled over the epoch's training batches.
    pub train_dice: f64,
    /// Effective learning rate at the epoch's last step.
    pub lr_t: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainLog {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_loss
    }

    pub fn to_csv(&self) -> String {
        self.csv(true)
    }

    /// The table without the wall-time column; identical across reruns with one seed.
    pub fn to_csv_untimed(&self) -> String {
        self.csv(false)
    }

    fn csv(&self, timed: bool) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,train_dice,lr_t");
        out.push_str(if timed { ",seconds\n" } else { "\n" });
        for r in &self.epochs {
            let _ = write!(out, "{},{:e},{:e},{:e},{:e}", r.epoch, r.train_loss, r.val_loss, r.train_dice, r.lr_t);
            if timed {
                let _ = write!(out, ",{:.3}", r.seconds);
            }
            out.push('\n');
        }
        out
    }
}

/// Returned by the epoch callback of [`fit_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Trains with the default callback; see [`fit_with`].
pub fn fit(net: Network, train: &[Sample], val: &[Sample], cfg: &TrainConfig) -> Result<(Network, TrainLog)> {
    fit_with(net, train, val, cfg, |_, _| Control::Continue)
}

/// Trains `net` on `train`, restoring the parameters of the epoch with the lowest
/// validation loss. After each epoch `on_epoch` sees the record and the current
/// (not the best) network.
pub fn fit_with(
    mut net: Network,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Network) -> Control,
) -> Result<(Network, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    for s in train.iter().chain(val) {
        net.check_input(s.input.shape())?;
    }
    net.set_encoder_trainable_mut(cfg.encoder_trainable);
    let mut adam = AdamState::new(net.parameters().iter().map(|p| &p.value));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut stop_reason = StopReason::MaxEpochs;
    let mut lr_t = cfg.lr_at(0);

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let (mut inter, mut total) = (0.0, 0.0);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            let (x, y) = stack(&refs)?;
            let mut tape = Tape::new();
            let vars = net.register(&mut tape, true);
            let xv = tape.constant(x);
            let yv = tape.constant(y.clone());
            let p = net.record(&mut tape, &vars, xv)?;
            let l = tape.loss(p, yv, cfg.loss_kind)?;
            let loss_value = tape.value(l).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: loss_value,
                });
            }
            for (&pi, &ti) in tape.value(p).data().iter().zip(y.data()) {
                inter += pi as f64 * ti as f64;
                total += pi as f64 + ti as f64;
            }
            let grads = tape.backward(Tensor::scalar(1.0))?;
            if !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: f64::NAN,
                });
            }
            drop(tape);
            let grad_refs: Vec<Option<&Tensor>> = (0..net.parameters().len()).map(|id| grads.get(id)).collect();
            let mut values: Vec<&mut Tensor> = net.parameters_mut().iter_mut().map(|p| &mut p.value).collect();
            lr_t = adam_step(&mut values, &grad_refs, &mut adam, cfg)?;
            loss_sum += loss_value;
            batches += 1;
        }
        let val_loss = match evaluate(&net, val, cfg.batch_size, cfg.loss_kind) {
            Ok(stats) => stats.loss,
            Err(Error::NonFinite(_)) => f64::NAN,
            Err(e) => return Err(e),
        };
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                loss: val_loss,
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            train_dice: (2.0 * inter + loss::DICE_SMOOTHING) / (total + loss::DICE_SMOOTHING),
            lr_t,
            seconds: started.elapsed().as_secs_f64(),
        };
        if best.as_ref().is_none_or(|(_, v, _)| val_loss < *v) {
            best = Some((epoch, val_loss, net.parameters().iter().map(|p| p.value.clone()).collect()));
        }
        let control = on_epoch(&record, &net);
        epochs.push(record);
        if control == Control::Stop {
            stop_reason = StopReason::Requested;
            break;
        }
        let best_epoch = best.as_ref().map_or(epoch, |b| b.0);
        if epoch - best_epoch >= cfg.patience && epoch < cfg.max_epochs {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_epoch, _, values) = best.expect("at least one epoch ran");
    for (p, v) in net.parameters_mut().iter_mut().zip(values) {
        p.value = v;
    }
    Ok((
        net,
        TrainLog {
            epochs,
            best_epoch,
            stop_reason,
        },
    ))
}

/// A scan identified by its acquisition center and name.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScanId {
    pub center: String,
    pub name: String,
}

impl ScanId {
    pub fn new(center: impl Into<String>, name: impl Into<String>) -> Self {
        Self {
            center: center.into(),
            name: name.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test: Vec<ScanId>,
    pub validation: ScanId,
    pub train: Vec<ScanId>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Cross-validation plan for `C` centers of `F` scans each: `F` folds, fold `k`
/// testing on the `k`-th name (lexicographic) of every center. The validation scan
/// is the last non-test scan in the given order; the rest is shuffled with `seed`.
pub fn make_folds(scans: &[ScanId], seed: u64) -> Result<FoldPlan> {
    let unique: BTreeSet<&ScanId> = scans.iter().collect();
    if unique.len() != scans.len() {
        return Err(Error::Contract("scan list contains duplicates".into()));
    }
    let centers: BTreeSet<&str> = scans.iter().map(|s| s.center.as_str()).collect();
    let per_center: Vec<Vec<&ScanId>> = centers
        .iter()
        .map(|c| {
            let mut v: Vec<&ScanId> = scans.iter().filter(|s| s.center == *c).collect();
            v.sort_by(|a, b| a.name.cmp(&b.name));
            v
        })
        .collect();
    let fold_count = per_center.first().map_or(0, Vec::len);
    if fold_count < 2 || per_center.iter().any(|v| v.len() != fold_count) {
        return Err(Error::Contract(format!(
            "every center needs the same number (at least 2) of scans, got {:?}",
            per_center.iter().map(Vec::len).collect::<Vec<_>>()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let folds = (0..fold_count)
        .map(|k| {
            let test: Vec<ScanId> = per_center.iter().map(|v| v[k].clone()).collect();
            let mut rest: Vec<ScanId> = scans.iter().filter(|s| !test.contains(s)).cloned().collect();
            let validation = rest.pop().expect("at least one non-test scan");
            rest.shuffle(&mut rng);
            Fold {
                test,
                validation,
                train: rest,
            }
        })
        .collect();
    Ok(FoldPlan { seed, folds })
}
