//! Adversarial training mode: a discriminator over q-step traffic
//! sequences, the generator/discriminator log-losses, the λ-combined
//! generator objective, and the alternating 5:1 schedule.

use crate::data::{SampleWindow, Split};
use crate::error::{Error, Result};
use crate::model::{
    apply_grads_to, bind_params, two_layer_map, BoundParams, Forecaster, ParamId, ParamStore,
};
use crate::spatial::{self};
use crate::tape::{Tape, VarId};
use crate::tensor::{xavier, Tensor};
use crate::train::{
    adam_step, evaluate_loss, mse_loss, AdamState, EpochRecord, Normalizer, TrainConfig,
    TrainOutcome,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Range the discriminator score is clamped into before logs.
pub const SCORE_CLAMP: (f64, f64) = (1e-7, 1.0 - 1e-7);

/// Adversarial-mode settings; defaults follow the reference values
/// (λ = 0.01, five generator epochs per discriminator epoch).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GanConfig {
    pub lambda: f64,
    pub gen_epochs_per_disc: usize,
    /// Seed for the discriminator's own parameters.
    pub disc_seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        GanConfig {
            lambda: 0.01,
            gen_epochs_per_disc: 5,
            disc_seed: 1,
        }
    }
}

impl GanConfig {
    pub fn validated(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda must be finite and non-negative"));
        }
        if self.gen_epochs_per_disc == 0 {
            return Err(Error::config(
                "gen_epochs_per_disc must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Critic over a q-step sequence of `[n, c]` traffic matrices: each
/// step goes through a two-layer mapper into the latent space and one
/// graph convolution on the critic's own learned-frequency PMI, the q
/// results are concatenated to a `[q·n, d]` matrix, and a two-layer
/// head pools it to one sigmoid probability.
#[derive(Debug, Clone)]
pub struct Discriminator {
    n: usize,
    q: usize,
    c: usize,
    d: usize,
    store: ParamStore,
    ids: DiscIds,
}

#[derive(Debug, Clone)]
struct DiscIds {
    map_w1: ParamId,
    map_b1: ParamId,
    map_w2: ParamId,
    map_b2: ParamId,
    f_hat: ParamId,
    gcn_w: ParamId,
    head_w1: ParamId,
    head_b1: ParamId,
    head_w2: ParamId,
    head_b2: ParamId,
}

/// One tape binding of the discriminator: its parameters plus the PMI
/// matrix, computed once and shared by every forward on the tape.
pub struct DiscBinding {
    params: BoundParams,
    p_hat: VarId,
}

impl DiscBinding {
    /// The bound parameters, for gradient application in external
    /// training loops.
    pub fn params(&self) -> &BoundParams {
        &self.params
    }
}

impl Discriminator {
    pub fn new(n: usize, q: usize, c: usize, d: usize, seed: u64) -> Result<Self> {
        if n == 0 || q == 0 || c == 0 || d == 0 {
            return Err(Error::config(
                "discriminator needs positive n, q, c, and d",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let map_w1 = store.add("disc.map.w1", xavier(c, 10, &mut rng));
        let map_b1 = store.add("disc.map.b1", Tensor::zeros(vec![10]).with_requires_grad());
        let map_w2 = store.add("disc.map.w2", xavier(10, d, &mut rng));
        let map_b2 = store.add("disc.map.b2", Tensor::zeros(vec![d]).with_requires_grad());
        let f_hat = store.add("disc.f_hat", spatial::init_f_hat(n, &mut rng)?);
        let gcn_w = store.add("disc.gcn.w", xavier(d, d, &mut rng));
        let head_w1 = store.add("disc.head.w1", xavier(d, 10, &mut rng));
        let head_b1 = store.add("disc.head.b1", Tensor::zeros(vec![10]).with_requires_grad());
        let head_w2 = store.add("disc.head.w2", xavier(10, 1, &mut rng));
        let head_b2 = store.add("disc.head.b2", Tensor::zeros(vec![1]).with_requires_grad());
        Ok(Discriminator {
            n,
            q,
            c,
            d,
            store,
            ids: DiscIds {
                map_w1,
                map_b1,
                map_w2,
                map_b2,
                f_hat,
                gcn_w,
                head_w1,
                head_b1,
                head_w2,
                head_b2,
            },
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.total_values()
    }

    /// Bind the parameters on a tape and compute the critic's PMI once.
    pub fn bind(&self, tape: &mut Tape) -> Result<DiscBinding> {
        let params = bind_params(&self.store, tape);
        let p_hat = spatial::learned_pmi(tape, params.var(self.ids.f_hat))?;
        Ok(DiscBinding { params, p_hat })
    }

    /// Score a q-step sequence already on the tape (each step `[n, c]`).
    /// Differentiable with respect to both the inputs and the critic's
    /// parameters, so the same node serves generator and critic updates.
    pub fn forward(&self, tape: &mut Tape, binding: &DiscBinding, seq: &[VarId]) -> Result<VarId> {
        if seq.len() != self.q {
            return Err(Error::contract(format!(
                "discriminator expects a sequence of {} steps, got {}",
                self.q,
                seq.len()
            )));
        }
        let b = &binding.params;
        let mut latents = Vec::with_capacity(self.q);
        for &step in seq {
            if tape.shape(step) != [self.n, self.c] {
                return Err(Error::contract(format!(
                    "discriminator step must be [{}, {}], got {:?}",
                    self.n,
                    self.c,
                    tape.shape(step)
                )));
            }
            let mapped = two_layer_map(
                tape,
                step,
                b.var(self.ids.map_w1),
                b.var(self.ids.map_b1),
                b.var(self.ids.map_w2),
                b.var(self.ids.map_b2),
            )?;
            latents.push(spatial::lpgcn_conv(
                tape,
                mapped,
                binding.p_hat,
                &[b.var(self.ids.gcn_w)],
                spatial::Activation::Relu,
            )?);
        }
        let stacked = tape.stack(&latents)?;
        let flat = tape.reshape(stacked, vec![self.q * self.n, self.d])?;
        let scores = two_layer_map(
            tape,
            flat,
            b.var(self.ids.head_w1),
            b.var(self.ids.head_b1),
            b.var(self.ids.head_w2),
            b.var(self.ids.head_b2),
        )?;
        let total = tape.sum(scores)?;
        let pooled = tape.affine(total, 1.0 / (self.q * self.n) as f64, 0.0)?;
        Ok(tape.sigmoid(pooled))
    }

    /// Score a `[q, n, c]` tensor of values (recorded as constants).
    pub fn forward_values(
        &self,
        tape: &mut Tape,
        binding: &DiscBinding,
        seq: &Tensor,
    ) -> Result<VarId> {
        if seq.shape() != [self.q, self.n, self.c] {
            return Err(Error::contract(format!(
                "discriminator input must be [{}, {}, {}], got {:?}",
                self.q,
                self.n,
                self.c,
                seq.shape()
            )));
        }
        let stride = self.n * self.c;
        let steps = (0..self.q)
            .map(|i| {
                tape.constant(
                    vec![self.n, self.c],
                    seq.data()[i * stride..(i + 1) * stride].to_vec(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        self.forward(tape, binding, &steps)
    }
}

/// Adversarial objectives from two already-computed scores. Scores are
/// clamped into `[1e-7, 1−1e-7]` before the logs so saturation cannot
/// produce infinities. Returns `(gen_loss, disc_loss)` where
/// `gen_loss = log(1 − D(fake))` (minimized by the generator) and
/// `disc_loss = −(log D(real) + log(1 − D(fake)))` (minimized by the
/// critic).
pub fn gan_losses(tape: &mut Tape, d_real: VarId, d_fake: VarId) -> Result<(VarId, VarId)> {
    let (lo, hi) = SCORE_CLAMP;
    let fake_c = tape.clamp(d_fake, lo, hi);
    let one_minus_fake = tape.affine(fake_c, -1.0, 1.0)?;
    let gen_loss = tape.log(one_minus_fake)?;

    let real_c = tape.clamp(d_real, lo, hi);
    let log_real = tape.log(real_c)?;
    let sum = tape.add(log_real, gen_loss)?;
    let disc_loss = tape.affine(sum, -1.0, 0.0)?;
    Ok((gen_loss, disc_loss))
}

/// The generator's full objective `λ · MSE + log(1 − D(fake))`.
pub fn combined_generator_loss(
    tape: &mut Tape,
    mse: VarId,
    gen_loss: VarId,
    lambda: f64,
) -> Result<VarId> {
    if lambda == 0.0 {
        return Ok(gen_loss);
    }
    let scaled = tape.affine(mse, lambda, 0.0)?;
    tape.add(scaled, gen_loss)
}

fn param_checksum(store: &ParamStore) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (_, t) in store.iter() {
        for &v in t.data() {
            h = h.rotate_left(7) ^ v.to_bits();
        }
    }
    h
}

/// Alternating adversarial training: `gen_epochs_per_disc` generator
/// epochs (λ·MSE + adversarial loss), then one discriminator epoch,
/// repeating until `max_epochs` generator epochs have run. Generator
/// and critic each have their own Adam state, and each is verifiably
/// frozen while the other trains. History rows carry a `phase` of
/// "gen" or "disc"; `epoch` numbers every row consecutively.
pub fn gan_train(
    model: &mut Forecaster,
    disc: &mut Discriminator,
    train_windows: &[SampleWindow],
    val_windows: &[SampleWindow],
    normalizer: &Normalizer,
    cfg: &TrainConfig,
    gan_cfg: &GanConfig,
) -> Result<TrainOutcome> {
    cfg.validated()?;
    gan_cfg.validated()?;
    if train_windows.is_empty() || val_windows.is_empty() {
        return Err(Error::config(
            "adversarial training needs non-empty training and validation splits",
        ));
    }
    for w in train_windows {
        if w.split != Split::Train {
            return Err(Error::contract(format!(
                "the optimizer received a window tagged {:?}; only Train data may be used here",
                w.split
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_gen = AdamState::new(model.store());
    let mut adam_disc = AdamState::new(disc.store());
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut record_counter = 0;

    for gen_epoch in 1..=cfg.max_epochs {
        // Generator phase: critic frozen.
        let disc_before = param_checksum(disc.store());
        let started = std::time::Instant::now();
        let train_loss = run_gan_epoch(
            model, disc, train_windows, normalizer, cfg, gan_cfg, &mut rng, &mut adam_gen,
            &mut adam_disc, Phase::Generator,
        )?;
        assert_eq!(
            disc_before,
            param_checksum(disc.store()),
            "critic parameters changed during a generator epoch"
        );
        let val_loss = evaluate_loss(model, val_windows, normalizer)?;
        record_counter += 1;
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = record_counter;
        }
        history.push(EpochRecord {
            epoch: record_counter,
            phase: Some("gen".to_string()),
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        });

        if gen_epoch % gan_cfg.gen_epochs_per_disc == 0 && gen_epoch < cfg.max_epochs {
            // Critic phase: generator frozen.
            let gen_before = param_checksum(model.store());
            let started = std::time::Instant::now();
            let train_loss = run_gan_epoch(
                model, disc, train_windows, normalizer, cfg, gan_cfg, &mut rng, &mut adam_gen,
                &mut adam_disc, Phase::Discriminator,
            )?;
            assert_eq!(
                gen_before,
                param_checksum(model.store()),
                "generator parameters changed during a critic epoch"
            );
            let val_loss = evaluate_loss(model, val_windows, normalizer)?;
            record_counter += 1;
            history.push(EpochRecord {
                epoch: record_counter,
                phase: Some("disc".to_string()),
                train_loss,
                val_loss,
                seconds: started.elapsed().as_secs_f64(),
            });
        }
    }

    Ok(TrainOutcome {
        history,
        best_val_loss: best_val,
        best_epoch,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    Generator,
    Discriminator,
}

#[allow(clippy::too_many_arguments)]
fn run_gan_epoch(
    model: &mut Forecaster,
    disc: &mut Discriminator,
    windows: &[SampleWindow],
    normalizer: &Normalizer,
    cfg: &TrainConfig,
    gan_cfg: &GanConfig,
    rng: &mut ChaCha8Rng,
    adam_gen: &mut AdamState,
    adam_disc: &mut AdamState,
    phase: Phase,
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
        let gen_bound = model.bind(&mut tape);
        let disc_binding = disc.bind(&mut tape)?;
        let mut acc: Option<VarId> = None;
        for &w_idx in chunk {
            let w = &windows[w_idx];
            let input = normalizer.apply(&w.input)?;
            let target = normalizer.apply(&w.target)?;
            let fake = model.forward_on_tape(&mut tape, &gen_bound, &input, &w.horizon_times)?;
            let d_fake = disc.forward(&mut tape, &disc_binding, &fake)?;
            let loss = match phase {
                Phase::Generator => {
                    let mse = mse_loss(&mut tape, &fake, &target)?;
                    let (lo, hi) = SCORE_CLAMP;
                    let fake_c = tape.clamp(d_fake, lo, hi);
                    let one_minus = tape.affine(fake_c, -1.0, 1.0)?;
                    let gen_loss = tape.log(one_minus)?;
                    combined_generator_loss(&mut tape, mse, gen_loss, gan_cfg.lambda)?
                }
                Phase::Discriminator => {
                    let d_real = disc.forward_values(&mut tape, &disc_binding, &target)?;
                    let (_, disc_loss) = gan_losses(&mut tape, d_real, d_fake)?;
                    disc_loss
                }
            };
            acc = Some(match acc {
                Some(a) => tape.add(a, loss)?,
                None => loss,
            });
        }
        let batch_loss =
            tape.affine(acc.expect("non-empty batch"), 1.0 / chunk.len() as f64, 0.0)?;
        let loss_value = tape.value(batch_loss)[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                op: "gan_train",
                detail: Some(
                    match phase {
                        Phase::Generator => "generator loss",
                        Phase::Discriminator => "discriminator loss",
                    }
                    .to_string(),
                ),
            });
        }
        tape.backward(batch_loss)?;
        match phase {
            Phase::Generator => {
                model.store_mut().clear_grads();
                model.apply_grads(&tape, &gen_bound)?;
                adam_step(model.store_mut(), adam_gen, cfg)?;
            }
            Phase::Discriminator => {
                disc.store_mut().clear_grads();
                apply_grads_to(disc.store_mut(), &tape, &disc_binding.params)?;
                adam_step(disc.store_mut(), adam_disc, cfg)?;
            }
        }
        batch_losses.push(loss_value);
    }
    Ok(batch_losses.iter().sum::<f64>() / batch_losses.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_windows, synthesize_dataset, SynthConfig, TrafficDataset};
    use crate::model::ModelConfig;
    use crate::spatial::SpatialVariant;
    use rand::Rng;

    fn tiny_disc(seed: u64) -> Discriminator {
        Discriminator::new(4, 3, 1, 6, seed).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng) -> Tensor {
        let data: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.5..1.5)).collect();
        Tensor::new(vec![3, 4, 1], data).unwrap()
    }

    #[test]
    fn zeroed_critic_scores_one_half() {
        let mut disc = tiny_disc(2);
        for id in disc.store().ids().collect::<Vec<_>>() {
            for v in disc.store_mut().get_mut(id).data_mut() {
                *v = 0.0;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = random_seq(&mut rng);
        let mut tape = Tape::new();
        let binding = disc.bind(&mut tape).unwrap();
        let score = disc.forward_values(&mut tape, &binding, &seq).unwrap();
        assert!((tape.value(score)[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wrong_sequence_length_rejected() {
        let disc = tiny_disc(2);
        let bad = Tensor::new(vec![2, 4, 1], vec![0.0; 8]).unwrap();
        let mut tape = Tape::new();
        let binding = disc.bind(&mut tape).unwrap();
        assert!(matches!(
            disc.forward_values(&mut tape, &binding, &bad),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn score_is_deterministic_and_in_unit_interval() {
        let disc = tiny_disc(3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let seq = random_seq(&mut rng);
        let score_of = || {
            let mut tape = Tape::new();
            let binding = disc.bind(&mut tape).unwrap();
            let s = disc.forward_values(&mut tape, &binding, &seq).unwrap();
            tape.value(s)[0]
        };
        let a = score_of();
        let b = score_of();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn score_gradient_wrt_input_matches_finite_differences() {
        let disc = tiny_disc(4);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base: Vec<f64> = (0..3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |data: &[f64]| {
            let mut tape = Tape::new();
            let binding = disc.bind(&mut tape).unwrap();
            let steps: Vec<VarId> = (0..3)
                .map(|i| {
                    tape.leaf(
                        &Tensor::new(vec![4, 1], data[i * 4..(i + 1) * 4].to_vec())
                            .unwrap()
                            .with_requires_grad(),
                    )
                })
                .collect();
            let score = disc.forward(&mut tape, &binding, &steps).unwrap();
            (tape, steps, score)
        };
        let (mut tape, steps, score) = run(&base);
        tape.backward(score).unwrap();
        let analytic: Vec<f64> = steps
            .iter()
            .flat_map(|&s| tape.grad(s).unwrap().to_vec())
            .collect();
        let step = 1e-5;
        let mut checked = 0;
        for i in 0..base.len() {
            let mut xp = base.clone();
            xp[i] += step;
            let (tp, _, rp) = run(&xp);
            xp[i] -= 2.0 * step;
            let (tm, _, rm) = run(&xp);
            let numeric = (tp.value(rp)[0] - tm.value(rm)[0]) / (2.0 * step);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            if analytic[i].abs() < 1e-12 && numeric.abs() < 1e-12 {
                continue; // dead ReLU path: both sides agree on zero
            }
            assert!(
                (analytic[i] - numeric).abs() / denom < 1e-4,
                "coordinate {i}: analytic {} vs numeric {numeric}",
                analytic[i]
            );
            checked += 1;
        }
        assert!(checked >= 6, "only {checked} informative coordinates");
    }

    #[test]
    fn loss_closed_forms_at_the_neutral_point() {
        let mut tape = Tape::new();
        let half_r = tape.constant(vec![1], vec![0.5]).unwrap();
        let half_f = tape.constant(vec![1], vec![0.5]).unwrap();
        let (gen, disc) = gan_losses(&mut tape, half_r, half_f).unwrap();
        assert!((tape.value(gen)[0] - 0.5f64.ln()).abs() < 1e-12);
        assert!((tape.value(disc)[0] - 2.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_scores_stay_finite() {
        let mut tape = Tape::new();
        let one = tape.constant(vec![1], vec![1.0]).unwrap();
        let zero = tape.constant(vec![1], vec![0.0]).unwrap();
        let (gen, disc) = gan_losses(&mut tape, zero, one).unwrap();
        let g = tape.value(gen)[0];
        let d = tape.value(disc)[0];
        assert!(g.is_finite() && d.is_finite());
        assert!((g - SCORE_CLAMP.0.ln()).abs() < 1e-9);
        assert!(d >= 0.0);
    }

    #[test]
    fn lambda_zero_reduces_to_adversarial_loss() {
        let mut tape = Tape::new();
        let mse = tape.constant(vec![1], vec![3.7]).unwrap();
        let gen = tape.constant(vec![1], vec![-0.4]).unwrap();
        let combined = combined_generator_loss(&mut tape, mse, gen, 0.0).unwrap();
        assert_eq!(combined, gen);
        let with_lambda = combined_generator_loss(&mut tape, mse, gen, 0.5).unwrap();
        assert!((tape.value(with_lambda)[0] - (0.5 * 3.7 - 0.4)).abs() < 1e-12);
    }

    fn gan_dataset() -> TrafficDataset {
        synthesize_dataset(&SynthConfig {
            n: 6,
            days: 1,
            interval_minutes: 30,
            clusters: 2,
            noise_sigma: 0.8,
            ar_sigma: 0.0,
            seed: 31,
        })
        .unwrap()
    }

    fn gan_model(seed: u64) -> Forecaster {
        let mut cfg = ModelConfig::new(6, 3, 3, 8, 1);
        cfg.k = 1;
        cfg.spatial_variant = SpatialVariant::Lpgcn;
        cfg.seed = seed;
        Forecaster::new(cfg, None).unwrap()
    }

    fn gan_setup() -> (Vec<SampleWindow>, Vec<SampleWindow>, Normalizer) {
        let ds = gan_dataset();
        let split = (0.6, 0.2, 0.2);
        let (train_w, val_w, _) = make_windows(&ds, 3, 3, split).unwrap();
        let (end, _) = crate::data::split_bounds(ds.len(), split).unwrap();
        let norm = Normalizer::fit(&ds.slice(0, end).unwrap()).unwrap();
        (train_w, val_w, norm)
    }

    fn quick_cfg(max_epochs: usize) -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs,
            patience: 1000,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_places_critic_epochs_after_every_fifth() {
        let (train_w, val_w, norm) = gan_setup();
        let mut model = gan_model(1);
        let mut disc = Discriminator::new(6, 3, 1, 8, 5).unwrap();
        let outcome = gan_train(
            &mut model,
            &mut disc,
            &train_w,
            &val_w,
            &norm,
            &quick_cfg(12),
            &GanConfig::default(),
        )
        .unwrap();
        let phases: Vec<&str> = outcome
            .history
            .iter()
            .map(|r| r.phase.as_deref().unwrap())
            .collect();
        let disc_positions: Vec<usize> = phases
            .iter()
            .enumerate()
            .filter(|(_, p)| **p == "disc")
            .map(|(i, _)| i)
            .collect();
        assert_eq!(disc_positions, vec![5, 11], "phases: {phases:?}");
        assert_eq!(phases.len(), 14); // 12 generator + 2 critic rows
        let epochs: Vec<usize> = outcome.history.iter().map(|r| r.epoch).collect();
        assert_eq!(epochs, (1..=14).collect::<Vec<_>>());
    }

    #[test]
    fn each_side_is_frozen_while_the_other_trains() {
        let (train_w, val_w, norm) = gan_setup();

        // Three generator epochs: critic must not move at all.
        let mut model = gan_model(2);
        let mut disc = Discriminator::new(6, 3, 1, 8, 7).unwrap();
        let disc_before = param_checksum(disc.store());
        let gen_before = param_checksum(model.store());
        gan_train(
            &mut model,
            &mut disc,
            &train_w,
            &val_w,
            &norm,
            &quick_cfg(3),
            &GanConfig::default(),
        )
        .unwrap();
        assert_eq!(disc_before, param_checksum(disc.store()));
        assert_ne!(gen_before, param_checksum(model.store()));

        // Six generator epochs include one critic epoch: now it moves.
        let mut model = gan_model(2);
        let mut disc = Discriminator::new(6, 3, 1, 8, 7).unwrap();
        let disc_before = param_checksum(disc.store());
        gan_train(
            &mut model,
            &mut disc,
            &train_w,
            &val_w,
            &norm,
            &quick_cfg(6),
            &GanConfig::default(),
        )
        .unwrap();
        assert_ne!(disc_before, param_checksum(disc.store()));
    }

    #[test]
    fn large_lambda_gradient_aligns_with_pure_mse() {
        let (train_w, _, norm) = gan_setup();
        let model = gan_model(3);
        let disc = Discriminator::new(6, 3, 1, 8, 9).unwrap();
        let batch: Vec<&SampleWindow> = train_w.iter().take(6).collect();

        let grads_for = |lambda: Option<f64>| -> Vec<f64> {
            let mut tape = Tape::new();
            let gen_bound = model.bind(&mut tape);
            let disc_binding = disc.bind(&mut tape).unwrap();
            let mut acc: Option<VarId> = None;
            for w in &batch {
                let input = norm.apply(&w.input).unwrap();
                let target = norm.apply(&w.target).unwrap();
                let fake = model
                    .forward_on_tape(&mut tape, &gen_bound, &input, &w.horizon_times)
                    .unwrap();
                let mse = mse_loss(&mut tape, &fake, &target).unwrap();
                let loss = match lambda {
                    None => mse,
                    Some(l) => {
                        let d_fake = disc.forward(&mut tape, &disc_binding, &fake).unwrap();
                        let (lo, hi) = SCORE_CLAMP;
                        let c = tape.clamp(d_fake, lo, hi);
                        let om = tape.affine(c, -1.0, 1.0).unwrap();
                        let gl = tape.log(om).unwrap();
                        combined_generator_loss(&mut tape, mse, gl, l).unwrap()
                    }
                };
                acc = Some(match acc {
                    Some(a) => tape.add(a, loss).unwrap(),
                    None => loss,
                });
            }
            tape.backward(acc.unwrap()).unwrap();
            let mut flat = Vec::new();
            for id in model.store().ids() {
                match tape.grad(gen_bound.var(id)) {
                    Some(g) => flat.extend_from_slice(g),
                    None => flat.extend(std::iter::repeat_n(0.0, model.store().get(id).numel())),
                }
            }
            flat
        };

        let pure = grads_for(None);
        let combined = grads_for(Some(1e3));
        let dot: f64 = pure.iter().zip(&combined).map(|(a, b)| a * b).sum();
        let na: f64 = pure.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb: f64 = combined.iter().map(|b| b * b).sum::<f64>().sqrt();
        let cosine = dot / (na * nb);
        assert!(cosine > 0.99, "cosine similarity was {cosine}");
    }

    #[test]
    fn fifty_epochs_stay_finite() {
        let (train_w, val_w, norm) = gan_setup();
        let mut model = gan_model(4);
        let mut disc = Discriminator::new(6, 3, 1, 8, 13).unwrap();
        let outcome = gan_train(
            &mut model,
            &mut disc,
            &train_w,
            &val_w,
            &norm,
            &quick_cfg(50),
            &GanConfig::default(),
        )
        .unwrap();
        assert!(outcome
            .history
            .iter()
            .all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
        assert!(model.store().iter().all(|(_, t)| t.is_finite()));
        assert!(disc.store().iter().all(|(_, t)| t.is_finite()));
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = GanConfig::default();
        assert_eq!(cfg.lambda, 0.01);
        assert_eq!(cfg.gen_epochs_per_disc, 5);
        cfg.validated().unwrap();
    }
}
