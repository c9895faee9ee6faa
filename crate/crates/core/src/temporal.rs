//! Temporal half of the model: multi-path 1-D convolutions over the
//! input window, concatenation of originals and path outputs into one
//! slice stack, prediction-time embeddings from calendar one-hots, and
//! the per-vertex attention that collapses the stack.

use crate::error::{Error, Result};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use chrono::{Datelike, NaiveDateTime, Timelike};
use rand::Rng;

/// Five-minute slots in a day.
pub const SLOTS_PER_DAY: usize = 288;

/// Calendar position of one observation: a five-minute slot and a day
/// type. Days are Sunday = 0 through Saturday = 6; a holiday is either
/// folded into Sunday or given the extra type 7, decided by the loader.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeStamp {
    pub slot: usize,
    pub day: usize,
}

impl TimeStamp {
    pub fn new(slot: usize, day: usize) -> Result<Self> {
        if slot >= SLOTS_PER_DAY {
            return Err(Error::contract(format!(
                "time slot {slot} outside [0, {})",
                SLOTS_PER_DAY - 1
            )));
        }
        if day > 7 {
            return Err(Error::contract(format!("day type {day} outside [0, 7]")));
        }
        Ok(TimeStamp { slot, day })
    }

    /// Slot and weekday of a wall-clock time, flooring into the
    /// five-minute grid.
    pub fn from_datetime(dt: &NaiveDateTime) -> Self {
        let slot = (dt.hour() as usize * 60 + dt.minute() as usize) / 5;
        let day = dt.date().weekday().num_days_from_sunday() as usize;
        TimeStamp { slot, day }
    }
}

/// Width of the calendar one-hot for a given number of day types
/// (7 normally, 8 when holidays get their own type).
pub fn onehot_width(day_types: usize) -> usize {
    SLOTS_PER_DAY + day_types
}

/// Slices in the concatenated temporal stack for window length `p`:
/// the `p` originals plus `p−j+1` outputs for each path `j ∈ [2, p]`.
pub fn slice_count(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Calendar one-hot: a time-of-day block of width 288 followed by a
/// day-type block. Exactly two entries are 1.
pub fn time_onehot(t: &TimeStamp, day_types: usize) -> Result<Tensor> {
    if day_types != 7 && day_types != 8 {
        return Err(Error::config(format!(
            "day_types must be 7 or 8, got {day_types}"
        )));
    }
    if t.day >= day_types {
        return Err(Error::contract(format!(
            "day type {} needs day_types > {}",
            t.day, t.day
        )));
    }
    let mut v = vec![0.0; onehot_width(day_types)];
    v[t.slot] = 1.0;
    v[SLOTS_PER_DAY + t.day] = 1.0;
    Tensor::new(vec![onehot_width(day_types)], v)
}

/// Kernel tensors for the multi-path convolutions: one kernel per path
/// `j ∈ [2, p]`, each `[j, d]`, initialized near the averaging filter
/// `1/j` with a small seeded jitter so paths start as smoothers of
/// increasing span.
pub fn init_multi_path_kernels<R: Rng>(p: usize, d: usize, rng: &mut R) -> Result<Vec<Tensor>> {
    if p < 2 {
        return Err(Error::config(format!(
            "multi-path convolution needs a window of at least 2, got {p}"
        )));
    }
    let mut kernels = Vec::with_capacity(p - 1);
    for j in 2..=p {
        let base = 1.0 / j as f64;
        let jitter = 0.05 * base;
        let data: Vec<f64> = (0..j * d)
            .map(|_| base + rng.gen_range(-jitter..jitter))
            .collect();
        kernels.push(Tensor::new(vec![j, d], data)?.with_requires_grad());
    }
    Ok(kernels)
}

/// Run every path convolution over the window. `x_seq` is `[p, n, d]`;
/// `kernels[j-2]` has width `j`; path `j` yields `[p−j+1, n, d]`.
pub fn multi_path_convolve(
    tape: &mut Tape,
    x_seq: VarId,
    kernels: &[VarId],
) -> Result<Vec<VarId>> {
    let shape = tape.shape(x_seq).to_vec();
    if shape.len() != 3 {
        return Err(Error::Dimension {
            op: "multi_path_convolve",
            lhs: shape,
            rhs: vec![],
        });
    }
    let p = shape[0];
    if p < 2 {
        return Err(Error::config(format!(
            "multi-path convolution needs a window of at least 2, got {p}"
        )));
    }
    if kernels.len() != p - 1 {
        return Err(Error::config(format!(
            "expected {} path kernels for window {p}, got {}",
            p - 1,
            kernels.len()
        )));
    }
    let mut outputs = Vec::with_capacity(p - 1);
    for (idx, &k) in kernels.iter().enumerate() {
        let j = idx + 2;
        if tape.shape(k)[0] != j {
            return Err(Error::config(format!(
                "path {j} kernel has width {}, expected {j}",
                tape.shape(k)[0]
            )));
        }
        outputs.push(tape.conv_time(x_seq, k)?);
    }
    Ok(outputs)
}

/// Concatenate the original window and all path outputs along the slice
/// axis, originals first, then paths in kernel-width order, each path's
/// outputs in time order. The result is `[p(p+1)/2, n, d]`.
pub fn concat_temporal(tape: &mut Tape, x_seq: VarId, path_outputs: &[VarId]) -> Result<VarId> {
    let mut parts = Vec::with_capacity(1 + path_outputs.len());
    parts.push(x_seq);
    parts.extend_from_slice(path_outputs);
    let out = tape.concat_slices(&parts)?;
    let p = tape.shape(x_seq)[0];
    let got = tape.shape(out)[0];
    if got != slice_count(p) {
        return Err(Error::contract(format!(
            "temporal stack has {got} slices, expected {}",
            slice_count(p)
        )));
    }
    Ok(out)
}

/// Weight table and bias for the prediction-time embedding: a single
/// linear layer from the calendar one-hot to `n · s` values, reshaped
/// to one row per vertex. Initialized small so attention starts diffuse.
pub fn init_time_embed<R: Rng>(
    n: usize,
    s: usize,
    day_types: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let width = onehot_width(day_types);
    let table: Vec<f64> = (0..width * n * s)
        .map(|_| rng.gen_range(-0.05..0.05))
        .collect();
    Ok((
        Tensor::new(vec![width, n * s], table)?.with_requires_grad(),
        Tensor::zeros(vec![n * s]).with_requires_grad(),
    ))
}

/// Embed a prediction time: because the input is a two-hot vector, the
/// linear layer reduces to summing two table rows plus the bias, then
/// reshaping to `[n, s]` — one attention-logit row per vertex.
pub fn embed_time(
    tape: &mut Tape,
    table: VarId,
    bias: VarId,
    t: &TimeStamp,
    day_types: usize,
    n: usize,
    s: usize,
) -> Result<VarId> {
    if t.day >= day_types {
        return Err(Error::contract(format!(
            "day type {} needs day_types > {}",
            t.day, t.day
        )));
    }
    let width = onehot_width(day_types);
    let tshape = tape.shape(table);
    if tshape != [width, n * s] {
        return Err(Error::Dimension {
            op: "embed_time",
            lhs: tshape.to_vec(),
            rhs: vec![width, n * s],
        });
    }
    let flat = tape.two_hot_embed(table, bias, (t.slot, SLOTS_PER_DAY + t.day))?;
    tape.reshape(flat, vec![n, s])
}

/// Collapse the slice stack with per-vertex attention: softmax the
/// embedding rows over the slice axis and take the weighted sum of
/// slices for each vertex. `x_bar` is `[s, n, d]`, `e` is `[n, s]`,
/// output `[n, d]`.
pub fn temporal_attention(tape: &mut Tape, x_bar: VarId, e: VarId) -> Result<VarId> {
    temporal_attention_parts(tape, x_bar, e).map(|(out, _)| out)
}

/// Same as [`temporal_attention`], but also hands back the `[n, s]`
/// softmax weight matrix so callers can inspect the distribution each
/// vertex placed over the slices.
pub fn temporal_attention_parts(
    tape: &mut Tape,
    x_bar: VarId,
    e: VarId,
) -> Result<(VarId, VarId)> {
    let weights = tape.softmax_rows(e)?;
    let out = tape.attend_slices(x_bar, weights)?;
    Ok((out, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq_leaf(tape: &mut Tape, p: usize, n: usize, d: usize, data: Vec<f64>) -> VarId {
        let t = Tensor::new(vec![p, n, d], data).unwrap();
        tape.leaf(&t)
    }

    #[test]
    fn onehot_origin_case() {
        let t = TimeStamp::new(0, 0).unwrap();
        let v = time_onehot(&t, 7).unwrap();
        assert_eq!(v.data()[0], 1.0);
        assert_eq!(v.data()[288], 1.0);
        assert_eq!(v.data().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn onehot_slot_arithmetic() {
        // 00:05 Monday: slot 1, day 1.
        let t = TimeStamp::new(1, 1).unwrap();
        let v = time_onehot(&t, 7).unwrap();
        assert_eq!(v.data()[1], 1.0);
        assert_eq!(v.data()[289], 1.0);
    }

    #[test]
    fn onehot_always_sums_to_two() {
        for slot in [0usize, 100, 287] {
            for day in 0..7 {
                let v = time_onehot(&TimeStamp::new(slot, day).unwrap(), 7).unwrap();
                assert_eq!(v.data().iter().sum::<f64>(), 2.0);
            }
        }
        // Eighth day type widens the vector.
        let v = time_onehot(&TimeStamp::new(5, 7).unwrap(), 8).unwrap();
        assert_eq!(v.numel(), 296);
        assert_eq!(v.data()[288 + 7], 1.0);
    }

    #[test]
    fn onehot_range_errors() {
        assert!(TimeStamp::new(288, 0).is_err());
        assert!(TimeStamp::new(0, 8).is_err());
        // Day 7 requires the eighth day type.
        let t = TimeStamp::new(0, 7).unwrap();
        assert!(time_onehot(&t, 7).is_err());
    }

    #[test]
    fn datetime_conversion() {
        let dt = NaiveDateTime::parse_from_str("2024-03-04 07:35:00", "%Y-%m-%d %H:%M:%S")
            .unwrap();
        let t = TimeStamp::from_datetime(&dt);
        // 2024-03-04 is a Monday; 7:35 is slot 91.
        assert_eq!(t.day, 1);
        assert_eq!(t.slot, 91);
    }

    #[test]
    fn minimal_window_has_single_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let kernels = init_multi_path_kernels(2, 3, &mut rng).unwrap();
        assert_eq!(kernels.len(), 1);
        assert_eq!(kernels[0].shape(), &[2, 3]);

        let mut tape = Tape::new();
        let x = seq_leaf(&mut tape, 2, 2, 3, vec![0.5; 12]);
        let ks: Vec<VarId> = kernels.iter().map(|k| tape.leaf(k)).collect();
        let outs = multi_path_convolve(&mut tape, x, &ks).unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(tape.shape(outs[0]), &[1, 2, 3]);
    }

    #[test]
    fn full_window_path_counts() {
        let p = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kernels = init_multi_path_kernels(p, 2, &mut rng).unwrap();
        assert_eq!(kernels.len(), 11);

        let mut tape = Tape::new();
        let x = seq_leaf(&mut tape, p, 1, 2, vec![0.1; p * 2]);
        let ks: Vec<VarId> = kernels.iter().map(|k| tape.leaf(k)).collect();
        let outs = multi_path_convolve(&mut tape, x, &ks).unwrap();
        let mut total = 0;
        for (idx, &o) in outs.iter().enumerate() {
            let expect = p - (idx + 2) + 1;
            assert_eq!(tape.shape(o)[0], expect);
            total += expect;
        }
        assert_eq!(total, 66);
    }

    #[test]
    fn averaging_kernel_preserves_constant_input() {
        // Constant-in-time input through the exact 1/2 averaging kernel
        // reproduces the input slice.
        let mut tape = Tape::new();
        let slice = [1.5, -2.0, 0.25, 3.0];
        let mut data = Vec::new();
        for _ in 0..3 {
            data.extend_from_slice(&slice);
        }
        let x = seq_leaf(&mut tape, 3, 2, 2, data);
        let k = tape.constant(vec![2, 2], vec![0.5; 4]).unwrap();
        let out = tape.conv_time(x, k).unwrap();
        for t in 0..2 {
            for (i, &v) in slice.iter().enumerate() {
                assert!((tape.value(out)[t * 4 + i] - v).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn window_below_two_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            init_multi_path_kernels(1, 2, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn slice_count_identity() {
        for p in 2..=16 {
            let paths: usize = (2..=p).map(|j| p - j + 1).sum();
            assert_eq!(paths + p, slice_count(p));
        }
    }

    #[test]
    fn concat_orders_originals_first() {
        let p = 4;
        let (n, d) = (2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..p * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernels = init_multi_path_kernels(p, d, &mut rng).unwrap();

        let mut tape = Tape::new();
        let x = seq_leaf(&mut tape, p, n, d, data.clone());
        let ks: Vec<VarId> = kernels.iter().map(|k| tape.leaf(k)).collect();
        let outs = multi_path_convolve(&mut tape, x, &ks).unwrap();
        let stack = concat_temporal(&mut tape, x, &outs).unwrap();

        assert_eq!(tape.shape(stack), &[10, n, d]);
        // Slice 0 of the stack is the first original, bit-exact.
        assert_eq!(&tape.value(stack)[..n * d], &data[..n * d]);
        // The p originals occupy the leading slices.
        assert_eq!(&tape.value(stack)[..p * n * d], &data[..]);
    }

    #[test]
    fn concat_extent_for_full_window() {
        let p = 12;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let kernels = init_multi_path_kernels(p, 1, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = seq_leaf(&mut tape, p, 3, 1, vec![0.2; p * 3]);
        let ks: Vec<VarId> = kernels.iter().map(|k| tape.leaf(k)).collect();
        let outs = multi_path_convolve(&mut tape, x, &ks).unwrap();
        let stack = concat_temporal(&mut tape, x, &outs).unwrap();
        assert_eq!(tape.shape(stack)[0], 78);
    }

    #[test]
    fn zero_time_embed_gives_uniform_attention() {
        let (n, s, d) = (2, 3, 2);
        let mut tape = Tape::new();
        let table = tape.constant(vec![295, n * s], vec![0.0; 295 * n * s]).unwrap();
        let bias = tape.constant(vec![n * s], vec![0.0; n * s]).unwrap();
        let t = TimeStamp::new(10, 3).unwrap();
        let e = embed_time(&mut tape, table, bias, &t, 7, n, s).unwrap();
        assert!(tape.value(e).iter().all(|&v| v == 0.0));

        // Uniform logits average the slices.
        let data: Vec<f64> = (0..s * n * d).map(|i| i as f64).collect();
        let x = seq_leaf(&mut tape, s, n, d, data.clone());
        let out = temporal_attention(&mut tape, x, e).unwrap();
        for v in 0..n {
            for l in 0..d {
                let mean: f64 =
                    (0..s).map(|k| data[k * n * d + v * d + l]).sum::<f64>() / s as f64;
                assert!((tape.value(out)[v * d + l] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn time_embed_shape_and_determinism() {
        let (n, s) = (5, 78);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (table, bias) = init_time_embed(n, s, 7, &mut rng).unwrap();
        assert_eq!(table.shape(), &[295, n * s]);

        let mut tape = Tape::new();
        let tv = tape.leaf(&table);
        let bv = tape.leaf(&bias);
        let t = TimeStamp::new(144, 2).unwrap();
        let e1 = embed_time(&mut tape, tv, bv, &t, 7, n, s).unwrap();
        let e2 = embed_time(&mut tape, tv, bv, &t.clone(), 7, n, s).unwrap();
        assert_eq!(tape.shape(e1), &[n, s]);
        assert_eq!(tape.value(e1), tape.value(e2));
    }

    #[test]
    fn saturated_logit_selects_one_slice() {
        let (n, s, d) = (2, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..s * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = seq_leaf(&mut tape, s, n, d, data.clone());
        // Vertex 0 picks slice 2, vertex 1 picks slice 0, logit gap 40.
        let mut logits = vec![0.0; n * s];
        logits[2] = 40.0;
        logits[s] = 40.0;
        let e = tape.constant(vec![n, s], logits).unwrap();
        let out = temporal_attention(&mut tape, x, e).unwrap();
        for l in 0..d {
            let want0 = data[2 * n * d + l];
            let want1 = data[d + l];
            assert!((tape.value(out)[l] - want0).abs() < 1e-9);
            assert!((tape.value(out)[d + l] - want1).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_output_stays_in_slice_hull() {
        let (n, s, d) = (3, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..s * n * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let logits: Vec<f64> = (0..n * s).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let x = seq_leaf(&mut tape, s, n, d, data.clone());
        let e = tape.constant(vec![n, s], logits).unwrap();
        let out = temporal_attention(&mut tape, x, e).unwrap();
        for v in 0..n {
            for l in 0..d {
                let column: Vec<f64> = (0..s).map(|k| data[k * n * d + v * d + l]).collect();
                let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let o = tape.value(out)[v * d + l];
                assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn slice_permutation_with_matching_logits_is_invariant() {
        let (n, s, d) = (2, 4, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let data: Vec<f64> = (0..s * n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits: Vec<f64> = (0..n * s).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let run = |perm: &[usize]| {
            let mut tape = Tape::new();
            let mut pd = vec![0.0; s * n * d];
            let mut pl = vec![0.0; n * s];
            for (to, &from) in perm.iter().enumerate() {
                pd[to * n * d..(to + 1) * n * d]
                    .copy_from_slice(&data[from * n * d..(from + 1) * n * d]);
                for v in 0..n {
                    pl[v * s + to] = logits[v * s + from];
                }
            }
            let x = seq_leaf(&mut tape, s, n, d, pd);
            let e = tape.constant(vec![n, s], pl).unwrap();
            let out = temporal_attention(&mut tape, x, e).unwrap();
            tape.value(out).to_vec()
        };

        let base = run(&[0, 1, 2, 3]);
        let swapped = run(&[2, 0, 3, 1]);
        for (a, b) in base.iter().zip(&swapped) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
