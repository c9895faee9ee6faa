//! Training machinery: z-score normalization, the mean-squared-error
//! objective, Adam, and a mini-batch loop with validation-based early
//! stopping and best-snapshot restore.

use crate::data::{make_windows, SampleWindow, Split, TrafficDataset};
use crate::error::{Error, Result};
use crate::gan::GanConfig;
use crate::model::{Checkpoint, Forecaster, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Per-condition z-score transform fitted on the training split only.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl Normalizer {
    /// Fit means and population standard deviations per condition
    /// channel (the last axis). A constant channel gets σ = 1 so
    /// degenerate sensors cannot poison the transform.
    pub fn fit(values: &Tensor) -> Result<Self> {
        let shape = values.shape();
        if values.numel() == 0 {
            return Err(Error::contract("cannot fit a normalizer on empty data"));
        }
        let c = *shape.last().expect("tensors have rank >= 1");
        let rows = values.numel() / c;
        let mut mu = vec![0.0; c];
        for (i, &v) in values.data().iter().enumerate() {
            mu[i % c] += v;
        }
        for m in &mut mu {
            *m /= rows as f64;
        }
        let mut sigma = vec![0.0; c];
        for (i, &v) in values.data().iter().enumerate() {
            let d = v - mu[i % c];
            sigma[i % c] += d * d;
        }
        for s in &mut sigma {
            *s = (*s / rows as f64).sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Ok(Normalizer { mu, sigma })
    }

    pub fn from_parts(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(Error::contract(
                "normalizer needs matching non-empty mu and sigma",
            ));
        }
        if sigma.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::contract("normalizer sigma must be positive"));
        }
        Ok(Normalizer { mu, sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    fn check(&self, t: &Tensor) -> Result<usize> {
        let c = *t.shape().last().expect("rank >= 1");
        if c != self.mu.len() {
            return Err(Error::Dimension {
                op: "normalizer",
                lhs: t.shape().to_vec(),
                rhs: vec![self.mu.len()],
            });
        }
        Ok(c)
    }

    /// Map into normalized units: `(x − μ) / σ` per channel.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        let c = self.check(t)?;
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mu[i % c]) / self.sigma[i % c])
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    }

    /// Map back to original units: `x·σ + μ` per channel.
    pub fn invert(&self, t: &Tensor) -> Result<Tensor> {
        let c = self.check(t)?;
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * self.sigma[i % c] + self.mu[i % c])
            .collect();
        Tensor::new(t.shape().to_vec(), data)
    }
}

/// Mean squared error over q·n·c entries, recorded on the tape so it
/// can drive a backward pass. `preds` holds one `[n, c]` output per
/// horizon; `truth` is `[q, n, c]` in the same (normalized) units.
pub fn mse_loss(tape: &mut Tape, preds: &[VarId], truth: &Tensor) -> Result<VarId> {
    if truth.shape().len() != 3 || truth.shape()[0] != preds.len() {
        return Err(Error::Dimension {
            op: "mse_loss",
            lhs: vec![preds.len()],
            rhs: truth.shape().to_vec(),
        });
    }
    let (q, n, c) = (truth.shape()[0], truth.shape()[1], truth.shape()[2]);
    let mut acc: Option<VarId> = None;
    for (i, &pred) in preds.iter().enumerate() {
        if tape.shape(pred) != [n, c] {
            return Err(Error::Dimension {
                op: "mse_loss",
                lhs: tape.shape(pred).to_vec(),
                rhs: vec![n, c],
            });
        }
        let t = tape.constant(
            vec![n, c],
            truth.data()[i * n * c..(i + 1) * n * c].to_vec(),
        )?;
        let diff = tape.sub(pred, t)?;
        let sq = tape.mul(diff, diff)?;
        let s = tape.sum(sq)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        });
    }
    tape.affine(acc.expect("q >= 1"), 1.0 / (q * n * c) as f64, 0.0)
}

/// Plain-value MSE for validation and reporting.
pub fn mse_value(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension {
            op: "mse",
            lhs: pred.shape().to_vec(),
            rhs: truth.shape().to_vec(),
        });
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(sum / pred.numel() as f64)
}

/// Optimization settings; defaults follow the reference protocol
/// (learning rate 1e-4, batch 4, 20 epochs with early stopping).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Time-ordered train/validation/test fractions.
    pub split: (f64, f64, f64),
    /// Cap on optimizer steps per epoch (handy for quick runs).
    pub max_batches_per_epoch: Option<usize>,
    /// Adversarial settings; `Some` turns on GAN training.
    pub gan: Option<GanConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 4,
            max_epochs: 20,
            patience: 5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            split: crate::data::DEFAULT_SPLIT,
            max_batches_per_epoch: None,
            gan: None,
        }
    }
}

impl TrainConfig {
    pub fn validated(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch size and epoch count must be positive"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::config("Adam betas must lie in (0, 1)"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::config("Adam epsilon must be positive"));
        }
        if let Some(g) = &self.gan {
            g.validated()?;
        }
        Ok(())
    }
}

/// First/second moment accumulators for Adam, one pair per parameter
/// tensor in store order.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let m = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        AdamState { m, v, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update from the gradients accumulated in
/// the store. A parameter with no gradient this step is treated as
/// having a zero gradient. Non-finite gradients abort with the
/// parameter's name.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (idx, id) in store.ids().enumerate() {
        let grad: Vec<f64> = match store.get(id).grad() {
            Some(g) => {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite {
                        op: "adam_step",
                        detail: Some(format!(
                            "gradient for '{}' is not finite",
                            store.name(id)
                        )),
                    });
                }
                g.to_vec()
            }
            None => vec![0.0; store.get(id).numel()],
        };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = store.get_mut(id).data_mut();
        for i in 0..data.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

/// One line of the training history (serialized as JSON lines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Set in adversarial runs: "gen" or "disc".
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub phase: Option<String>,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

/// What a training run produced.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_val_loss: f64,
    pub best_epoch: usize,
}

pub(crate) fn snapshot_params(store: &ParamStore) -> Vec<Vec<f64>> {
    store.iter().map(|(_, t)| t.data().to_vec()).collect()
}

pub(crate) fn restore_params(store: &mut ParamStore, snap: &[Vec<f64>]) {
    for (id, saved) in store.ids().collect::<Vec<_>>().into_iter().zip(snap) {
        store.get_mut(id).data_mut().copy_from_slice(saved);
    }
}

/// Average training loss over one epoch of shuffled mini-batches; the
/// callback sees each batch's loss value for step-level diagnostics.
#[allow(clippy::too_many_arguments)]
fn run_train_epoch(
    model: &mut Forecaster,
    windows: &[SampleWindow],
    normalizer: &Normalizer,
    cfg: &TrainConfig,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
    on_batch: &mut Option<&mut dyn FnMut(f64)>,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(rng);
    let mut batch_losses = Vec::new();
    for chunk in order.chunks(cfg.batch_size) {
        if let Some(cap) = cfg.max_batches_per_epoch {
            if batch_losses.len() >= cap {
                break;
            }
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut acc: Option<VarId> = None;
        for &w_idx in chunk {
            let w = &windows[w_idx];
            let input = normalizer.apply(&w.input)?;
            let target = normalizer.apply(&w.target)?;
            let outs = model.forward_on_tape(&mut tape, &bound, &input, &w.horizon_times)?;
            let loss = mse_loss(&mut tape, &outs, &target)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, loss)?,
                None => loss,
            });
        }
        let batch_loss = tape.affine(acc.expect("non-empty batch"), 1.0 / chunk.len() as f64, 0.0)?;
        let loss_value = tape.value(batch_loss)[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                op: "train",
                detail: Some("training loss".to_string()),
            });
        }
        model.store_mut().clear_grads();
        tape.backward(batch_loss)?;
        model.apply_grads(&tape, &bound)?;
        adam_step(model.store_mut(), adam, cfg)?;
        if let Some(cb) = on_batch.as_mut() {
            cb(loss_value);
        }
        batch_losses.push(loss_value);
    }
    Ok(batch_losses.iter().sum::<f64>() / batch_losses.len() as f64)
}

/// Mean normalized-unit MSE over a list of windows (no updates).
pub fn evaluate_loss(
    model: &Forecaster,
    windows: &[SampleWindow],
    normalizer: &Normalizer,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::config("cannot evaluate on an empty split"));
    }
    let mut total = 0.0;
    for w in windows {
        let input = normalizer.apply(&w.input)?;
        let target = normalizer.apply(&w.target)?;
        let pred = model.forward_predict(&input, &w.horizon_times)?;
        total += mse_value(&pred, &target)?;
    }
    Ok(total / windows.len() as f64)
}

fn check_taint(windows: &[SampleWindow], expect: Split, role: &str) -> Result<()> {
    for w in windows {
        if w.split != expect {
            return Err(Error::contract(format!(
                "{role} received a window tagged {:?}; only {expect:?} data may be used here",
                w.split
            )));
        }
    }
    Ok(())
}

/// Mini-batch training with early stopping on the given window lists.
/// Only `Train`-tagged windows may reach the optimizer; validation
/// windows are used solely to score epochs. The model is left at the
/// best-validation parameters. `on_batch`, when given, observes every
/// optimizer step's batch loss.
pub fn train_on_windows(
    model: &mut Forecaster,
    train_windows: &[SampleWindow],
    val_windows: &[SampleWindow],
    normalizer: &Normalizer,
    cfg: &TrainConfig,
    mut on_batch: Option<&mut dyn FnMut(f64)>,
) -> Result<TrainOutcome> {
    cfg.validated()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::config(
            "training needs non-empty training and validation splits",
        ));
    }
    check_taint(train_windows, Split::Train, "the optimizer")?;
    check_taint(val_windows, Split::Val, "validation scoring")?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.store());
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_snapshot = snapshot_params(model.store());
    let mut stale_epochs = 0;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let train_loss = run_train_epoch(
            model,
            train_windows,
            normalizer,
            cfg,
            &mut adam,
            &mut rng,
            &mut on_batch,
        )?;
        let val_loss = evaluate_loss(model, val_windows, normalizer)?;
        history.push(EpochRecord {
            epoch,
            phase: None,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_snapshot = snapshot_params(model.store());
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience {
                break;
            }
        }
    }

    restore_params(model.store_mut(), &best_snapshot);
    Ok(TrainOutcome {
        history,
        best_val_loss: best_val,
        best_epoch,
    })
}

/// Split the dataset, fit the normalizer on the training range, and
/// train. Dispatches to adversarial training when the config carries
/// GAN settings. Returns the outcome and the fitted normalizer.
pub fn train(
    model: &mut Forecaster,
    ds: &TrafficDataset,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, Normalizer)> {
    cfg.validated()?;
    let (p, q) = (model.config().p, model.config().q);
    let (train_w, val_w, _test_w) = make_windows(ds, p, q, cfg.split)?;
    let (train_end, _) = crate::data::split_bounds(ds.len(), cfg.split)?;
    let normalizer = Normalizer::fit(&ds.slice(0, train_end)?)?;
    let outcome = match cfg.gan.clone() {
        Some(gan_cfg) => {
            let mut disc = crate::gan::Discriminator::new(
                model.config().n,
                q,
                model.config().c,
                model.config().d,
                gan_cfg.disc_seed,
            )?;
            crate::gan::gan_train(
                model,
                &mut disc,
                &train_w,
                &val_w,
                &normalizer,
                cfg,
                &gan_cfg,
            )?
        }
        None => train_on_windows(model, &train_w, &val_w, &normalizer, cfg, None)?,
    };
    Ok((outcome, normalizer))
}

const NORM_MU_KEY: &str = "normalizer.mu";
const NORM_SIGMA_KEY: &str = "normalizer.sigma";

/// Persist a trained model together with its normalizer.
pub fn save_checkpoint(model: &Forecaster, normalizer: &Normalizer, path: &Path) -> Result<()> {
    let mut ck = model.to_checkpoint();
    ck.extras.push((
        NORM_MU_KEY.to_string(),
        vec![normalizer.mu().len()],
        normalizer.mu().to_vec(),
    ));
    ck.extras.push((
        NORM_SIGMA_KEY.to_string(),
        vec![normalizer.sigma().len()],
        normalizer.sigma().to_vec(),
    ));
    ck.save(path)
}

/// Load a model and the normalizer stored beside it.
pub fn load_checkpoint(path: &Path) -> Result<(Forecaster, Normalizer)> {
    let ck = Checkpoint::load(path)?;
    let model = Forecaster::from_checkpoint(&ck)?;
    let mu = ck
        .extra(NORM_MU_KEY)
        .ok_or_else(|| Error::Checkpoint("checkpoint lacks the normalizer mean".to_string()))?
        .1
        .to_vec();
    let sigma = ck
        .extra(NORM_SIGMA_KEY)
        .ok_or_else(|| {
            Error::Checkpoint("checkpoint lacks the normalizer deviation".to_string())
        })?
        .1
        .to_vec();
    Ok((model, Normalizer::from_parts(mu, sigma)?))
}
