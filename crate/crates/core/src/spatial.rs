//! Spatial convolution layers. Four interchangeable flavors share one
//! propagation core `Z ← σ(M·Z·W)`:
//!
//! * structure-based: `M` is the symmetric-normalized self-looped
//!   adjacency,
//! * walk-based: `M` is the symmetric-normalized PMI of random-walk
//!   visit counts,
//! * learned: `M` is the PMI of a trainable frequency matrix, computed
//!   inside the differentiable graph,
//! * learned + diffusion: the learned term is summed with forward and
//!   backward transition-matrix hops before the activation.

use crate::error::{Error, Result};
use crate::graph::sym_normalize_rows;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Floor applied to learned frequencies before the PMI log; the clamp
/// carries zero gradient at and below this value.
pub const F_HAT_EPS: f64 = 1e-12;

/// Which spatial layer the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialVariant {
    /// Normalized-adjacency convolution.
    Gcn,
    /// Diffusion convolution only (the learned term removed).
    Dgcn,
    /// Fixed PMI from random walks on the graph.
    Pgcn,
    /// Learned frequency matrix, no graph needed.
    Lpgcn,
    /// Learned frequency matrix plus diffusion over the graph.
    LpgcnAdj,
}

impl SpatialVariant {
    /// Whether the variant needs the adjacency matrix at inference.
    pub fn requires_adjacency(self) -> bool {
        matches!(self, SpatialVariant::Gcn | SpatialVariant::Dgcn | SpatialVariant::LpgcnAdj)
    }

    /// Whether the variant owns a trainable frequency matrix.
    pub fn learns_frequencies(self) -> bool {
        matches!(self, SpatialVariant::Lpgcn | SpatialVariant::LpgcnAdj)
    }
}

impl std::str::FromStr for SpatialVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(SpatialVariant::Gcn),
            "dgcn" => Ok(SpatialVariant::Dgcn),
            "pgcn" => Ok(SpatialVariant::Pgcn),
            "lpgcn" => Ok(SpatialVariant::Lpgcn),
            "lpgcn_adj" => Ok(SpatialVariant::LpgcnAdj),
            other => Err(Error::config(format!(
                "unknown spatial variant '{other}' (expected gcn, dgcn, pgcn, lpgcn, or lpgcn_adj)"
            ))),
        }
    }
}

/// Nonlinearity applied after each spatial layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

pub fn activate(tape: &mut Tape, x: VarId, act: Activation) -> VarId {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Identity => x,
    }
}

/// Trainable frequency matrix, initialized with uniform random integers
/// in `[0, n]` and relaxed to continuous values during optimization.
pub fn init_f_hat<R: Rng>(n: usize, rng: &mut R) -> Result<Tensor> {
    let data: Vec<f64> = (0..n * n)
        .map(|_| rng.gen_range(0..=n as u64) as f64)
        .collect();
    Ok(Tensor::new(vec![n, n], data)?.with_requires_grad())
}

/// PMI of the learned frequency matrix, recorded differentiably so the
/// loss shapes the frequencies. The floor keeps the log defined for
/// entries initialized to zero.
pub fn learned_pmi(tape: &mut Tape, f_hat: VarId) -> Result<VarId> {
    let floored = tape.clamp_min(f_hat, F_HAT_EPS);
    tape.pmi_from_freq(floored)
}

/// The shared propagation core: `Z ← σ(M·Z·W)` once per weight matrix.
pub fn graph_propagate(
    tape: &mut Tape,
    x: VarId,
    matrix: VarId,
    weights: &[VarId],
    act: Activation,
) -> Result<VarId> {
    if weights.is_empty() {
        return Err(Error::config("spatial convolution needs at least one layer"));
    }
    let mut z = x;
    for &w in weights {
        let mz = tape.matmul(matrix, z)?;
        let pre = tape.matmul(mz, w)?;
        z = activate(tape, pre, act);
    }
    Ok(z)
}

/// Structure-based convolution over a precomputed normalized adjacency
/// (see [`crate::graph::RoadGraph::normalized_adjacency`]).
pub fn gcn_conv(
    tape: &mut Tape,
    x: VarId,
    norm_adj: VarId,
    weights: &[VarId],
    act: Activation,
) -> Result<VarId> {
    graph_propagate(tape, x, norm_adj, weights, act)
}

/// Walk-based convolution: symmetric-normalizes a fixed nonnegative PMI
/// matrix and propagates with it. Rows of all-zero PMI keep unit degree
/// so the normalization stays defined; they carry no signal either way.
pub fn pgcn_conv(
    tape: &mut Tape,
    x: VarId,
    p_matrix: &Tensor,
    weights: &[VarId],
    act: Activation,
) -> Result<VarId> {
    let shape = p_matrix.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Dimension {
            op: "pgcn_conv",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let norm = sym_normalize_rows(p_matrix.data(), shape[0]);
    let m = tape.leaf(&norm);
    graph_propagate(tape, x, m, weights, act)
}

/// Learned convolution: propagate with the PMI of the trainable
/// frequency matrix. No degree normalization — scale is absorbed by
/// the learned values. Compute `p_hat` once per forward pass with
/// [`learned_pmi`] and reuse it across horizons.
pub fn lpgcn_conv(
    tape: &mut Tape,
    x: VarId,
    p_hat: VarId,
    weights: &[VarId],
    act: Activation,
) -> Result<VarId> {
    graph_propagate(tape, x, p_hat, weights, act)
}

/// Per-layer parameter handles for the combined learned + diffusion
/// convolution. `w` weights the learned-PMI term and is absent in the
/// diffusion-only ablation; `w_f`/`w_b` weight the transition-matrix
/// hops (`w_b` empty when the graph is undirected and a single
/// transition term suffices).
#[derive(Debug, Clone)]
pub struct DiffusionLayer {
    pub w: Option<VarId>,
    pub w_f: Vec<VarId>,
    pub w_b: Vec<VarId>,
}

/// Combined convolution: each layer computes
/// `Z ← σ(Σ_i Q_f^i·Z·W_f^(i) + Σ_i Q_b^i·Z·W_b^(i) + P̂·Z·W)`,
/// a single activation wrapping the whole sum. `q_f`/`q_b` are the
/// precomputed transition-matrix powers `i = 0..=K`; pass `p_hat =
/// None` (and layers without `w`) for the diffusion-only ablation,
/// which is then bit-identical to zeroing the learned term.
pub fn lpgcn_diffusion_conv(
    tape: &mut Tape,
    x: VarId,
    p_hat: Option<VarId>,
    layers: &[DiffusionLayer],
    q_f: &[VarId],
    q_b: Option<&[VarId]>,
    act: Activation,
) -> Result<VarId> {
    if layers.is_empty() {
        return Err(Error::config("spatial convolution needs at least one layer"));
    }
    if q_f.is_empty() {
        return Err(Error::config("diffusion convolution needs the 0-hop power"));
    }
    let mut z = x;
    for layer in layers {
        if layer.w_f.len() != q_f.len() {
            return Err(Error::config(format!(
                "layer has {} forward hop weights for {} transition powers",
                layer.w_f.len(),
                q_f.len()
            )));
        }
        match (q_b, layer.w_b.is_empty()) {
            (Some(qb), false) if qb.len() == layer.w_b.len() => {}
            (None, true) => {}
            _ => {
                return Err(Error::config(
                    "backward hop weights must match backward transition powers",
                ));
            }
        }
        if layer.w.is_some() != p_hat.is_some() {
            return Err(Error::config(
                "learned-term weight requires a learned PMI matrix and vice versa",
            ));
        }

        let mut sum: Option<VarId> = None;
        let mut add_term = |tape: &mut Tape, m: VarId, w: VarId| -> Result<()> {
            let mz = tape.matmul(m, z)?;
            let term = tape.matmul(mz, w)?;
            sum = Some(match sum {
                Some(s) => tape.add(s, term)?,
                None => term,
            });
            Ok(())
        };
        for (i, &w_f) in layer.w_f.iter().enumerate() {
            add_term(tape, q_f[i], w_f)?;
        }
        if let Some(qb) = q_b {
            for (i, &w_b) in layer.w_b.iter().enumerate() {
                add_term(tape, qb[i], w_b)?;
            }
        }
        if let (Some(p), Some(w)) = (p_hat, layer.w) {
            add_term(tape, p, w)?;
        }
        let pre = sum.expect("at least one hop term");
        z = activate(tape, pre, act);
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{matrix_powers, RoadGraph};
    use crate::tensor::xavier;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_var(tape: &mut Tape, n: usize) -> VarId {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        tape.constant(vec![n, n], data).unwrap()
    }

    #[test]
    fn edgeless_graph_identity_weights_pass_input_through() {
        let g = RoadGraph::with_adjacency(3, false, vec![0.0; 9]).unwrap();
        let norm = g.normalized_adjacency().unwrap();
        let mut tape = Tape::new();
        let m = tape.leaf(&norm);
        let x = tape
            .constant(vec![3, 2], vec![1.0, -2.0, 0.5, 3.0, -1.5, 2.5])
            .unwrap();
        let w = identity_var(&mut tape, 2);
        let z = gcn_conv(&mut tape, x, m, &[w], Activation::Identity).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }

    #[test]
    fn two_vertex_preactivation_arithmetic() {
        let g = RoadGraph::with_adjacency(2, false, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let norm = g.normalized_adjacency().unwrap();
        let mut tape = Tape::new();
        let m = tape.leaf(&norm);
        let x = tape.constant(vec![2, 1], vec![2.0, 0.0]).unwrap();
        let w = tape.constant(vec![1, 1], vec![1.0]).unwrap();
        let z = gcn_conv(&mut tape, x, m, &[w], Activation::Identity).unwrap();
        for &v in tape.value(z) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn output_shape_is_always_n_by_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (n, d, layers) in [(2usize, 3usize, 1usize), (5, 4, 2), (4, 1, 3)] {
            let g = RoadGraph::from_edges(n, false, &[(0, 1, 1.0)]).unwrap();
            let norm = g.normalized_adjacency().unwrap();
            let mut tape = Tape::new();
            let m = tape.leaf(&norm);
            let xd: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = tape.constant(vec![n, d], xd).unwrap();
            let ws: Vec<VarId> = (0..layers)
                .map(|_| {
                    let t = xavier(d, d, &mut rng);
                    tape.leaf(&t)
                })
                .collect();
            let z = gcn_conv(&mut tape, x, m, &ws, Activation::Relu).unwrap();
            assert_eq!(tape.shape(z), &[n, d]);
            assert!(tape.value(z).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn zero_pmi_matrix_propagates_zero() {
        let mut tape = Tape::new();
        let p = Tensor::zeros(vec![3, 3]);
        let x = tape.constant(vec![3, 2], vec![1.0; 6]).unwrap();
        let w = identity_var(&mut tape, 2);
        let z = pgcn_conv(&mut tape, x, &p, &[w], Activation::Relu).unwrap();
        assert!(tape.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_pmi_identity_weights_pass_through() {
        let mut tape = Tape::new();
        let p = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = tape.constant(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let w = identity_var(&mut tape, 2);
        let z = pgcn_conv(&mut tape, x, &p, &[w], Activation::Identity).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }

    #[test]
    fn pgcn_equals_gcn_when_p_is_self_looped_adjacency() {
        // Feeding Ã = A + I through the walk-based layer reproduces the
        // structure-based layer: both symmetric-normalize the same matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = RoadGraph::from_edges(3, false, &[(0, 1, 1.0), (1, 2, 2.0)]).unwrap();
        let mut tilde = g.adjacency().unwrap().to_vec();
        for i in 0..3 {
            tilde[i * 3 + i] += 1.0;
        }
        let tilde = Tensor::new(vec![3, 3], tilde).unwrap();
        let norm = g.normalized_adjacency().unwrap();

        let mut tape = Tape::new();
        let xd: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = tape.constant(vec![3, 2], xd).unwrap();
        let wt = xavier(2, 2, &mut rng);
        let w = tape.leaf(&wt);
        let m = tape.leaf(&norm);
        let za = gcn_conv(&mut tape, x, m, &[w], Activation::Relu).unwrap();
        let zb = pgcn_conv(&mut tape, x, &tilde, &[w], Activation::Relu).unwrap();
        for (a, b) in tape.value(za).iter().zip(tape.value(zb)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_learned_frequencies_give_zero_output() {
        let mut tape = Tape::new();
        let f = tape.constant(vec![3, 3], vec![5.0; 9]).unwrap();
        let p_hat = learned_pmi(&mut tape, f).unwrap();
        let x = tape.constant(vec![3, 2], vec![1.0; 6]).unwrap();
        let w = identity_var(&mut tape, 2);
        let z = lpgcn_conv(&mut tape, x, p_hat, &[w], Activation::Relu).unwrap();
        assert!(tape.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn f_hat_init_is_integer_valued_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = init_f_hat(6, &mut rng).unwrap();
        assert!(f.requires_grad());
        for &v in f.data() {
            assert!((0.0..=6.0).contains(&v));
            assert_eq!(v.fract(), 0.0);
        }
    }

    #[test]
    fn f_hat_gradient_matches_finite_differences() {
        // Loss = Σ (P̂·x·W)², probed away from the PMI kink.
        let x_data = vec![0.7, -0.3, 0.2, 0.9, -0.5, 0.4];
        let w_data = vec![0.6, -0.2, 0.1, 0.8];
        let f0 = vec![4.0, 1.0, 0.5, 1.0, 5.0, 1.5, 0.5, 1.0, 6.0];

        let build = |tape: &mut Tape, f: &[f64]| {
            let fv = tape.leaf(
                &Tensor::new(vec![3, 3], f.to_vec())
                    .unwrap()
                    .with_requires_grad(),
            );
            let p_hat = learned_pmi(tape, fv).unwrap();
            let x = tape.constant(vec![3, 2], x_data.clone()).unwrap();
            let w = tape.constant(vec![2, 2], w_data.clone()).unwrap();
            let z = lpgcn_conv(tape, x, p_hat, &[w], Activation::Identity).unwrap();
            let sq = tape.mul(z, z).unwrap();
            (fv, tape.sum(sq).unwrap())
        };

        let mut tape = Tape::new();
        let (leaf, root) = build(&mut tape, &f0);
        tape.backward(root).unwrap();
        let analytic: Vec<f64> = tape.grad(leaf).unwrap().to_vec();

        let step = 1e-5;
        for i in 0..9 {
            let mut fp = f0.clone();
            fp[i] += step;
            let mut tp = Tape::new();
            let (_, rp) = build(&mut tp, &fp);
            fp[i] -= 2.0 * step;
            let mut tm = Tape::new();
            let (_, rm) = build(&mut tm, &fp);
            let numeric = (tp.value(rp)[0] - tm.value(rm)[0]) / (2.0 * step);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            assert!(
                (analytic[i] - numeric).abs() / denom < 1e-4,
                "entry {i}: {} vs {numeric}",
                analytic[i]
            );
        }
    }

    #[test]
    fn zero_hop_diffusion_reduces_to_dense_layers() {
        // K = 0: S = x·W_f + x·W_b through the identity 0-hop power.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (3, 2);
        let xd: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wf = xavier(d, d, &mut rng);
        let wb = xavier(d, d, &mut rng);

        let mut tape = Tape::new();
        let x = tape.constant(vec![n, d], xd.clone()).unwrap();
        let q0 = identity_var(&mut tape, n);
        let wfv = tape.leaf(&wf);
        let wbv = tape.leaf(&wb);
        let layer = DiffusionLayer {
            w: None,
            w_f: vec![wfv],
            w_b: vec![wbv],
        };
        let z = lpgcn_diffusion_conv(
            &mut tape,
            x,
            None,
            &[layer],
            &[q0],
            Some(&[q0]),
            Activation::Identity,
        )
        .unwrap();

        let xw_f = tape.matmul(x, wfv).unwrap();
        let xw_b = tape.matmul(x, wbv).unwrap();
        let expect = tape.add(xw_f, xw_b).unwrap();
        assert_eq!(tape.value(z), tape.value(expect));
    }

    #[test]
    fn diffusion_only_matches_zeroed_learned_term_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d, k) = (4, 3, 2);
        let g = RoadGraph::from_edges(n, true, &[(0, 1, 1.0), (1, 2, 2.0), (2, 3, 1.0), (3, 0, 0.5)])
            .unwrap();
        let (q_f, q_b) = g.transition_matrices().unwrap();
        let qf_pow = matrix_powers(&q_f, k).unwrap();
        let qb_pow = matrix_powers(&q_b, k).unwrap();

        let xd: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wfs: Vec<Tensor> = (0..=k).map(|_| xavier(d, d, &mut rng)).collect();
        let wbs: Vec<Tensor> = (0..=k).map(|_| xavier(d, d, &mut rng)).collect();
        let w = xavier(d, d, &mut rng);

        let mut tape = Tape::new();
        let x = tape.constant(vec![n, d], xd).unwrap();
        let qf: Vec<VarId> = qf_pow.iter().map(|t| tape.leaf(t)).collect();
        let qb: Vec<VarId> = qb_pow.iter().map(|t| tape.leaf(t)).collect();
        let wf: Vec<VarId> = wfs.iter().map(|t| tape.leaf(t)).collect();
        let wb: Vec<VarId> = wbs.iter().map(|t| tape.leaf(t)).collect();
        let wv = tape.leaf(&w);

        // Uniform learned frequencies make the PMI exactly zero.
        let f = tape.constant(vec![n, n], vec![3.0; n * n]).unwrap();
        let p_hat = learned_pmi(&mut tape, f).unwrap();
        assert!(tape.value(p_hat).iter().all(|&v| v == 0.0));

        let with_zero_term = lpgcn_diffusion_conv(
            &mut tape,
            x,
            Some(p_hat),
            &[DiffusionLayer {
                w: Some(wv),
                w_f: wf.clone(),
                w_b: wb.clone(),
            }],
            &qf,
            Some(&qb),
            Activation::Relu,
        )
        .unwrap();
        let diffusion_only = lpgcn_diffusion_conv(
            &mut tape,
            x,
            None,
            &[DiffusionLayer {
                w: None,
                w_f: wf,
                w_b: wb,
            }],
            &qf,
            Some(&qb),
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(tape.value(with_zero_term), tape.value(diffusion_only));
    }

    #[test]
    fn variant_parsing_and_capabilities() {
        use std::str::FromStr;
        assert_eq!(
            SpatialVariant::from_str("lpgcn_adj").unwrap(),
            SpatialVariant::LpgcnAdj
        );
        assert!(SpatialVariant::from_str("gat").is_err());
        assert!(!SpatialVariant::Lpgcn.requires_adjacency());
        assert!(!SpatialVariant::Pgcn.requires_adjacency());
        assert!(SpatialVariant::Dgcn.requires_adjacency());
        assert!(SpatialVariant::LpgcnAdj.learns_frequencies());
        assert!(!SpatialVariant::Pgcn.learns_frequencies());
    }

    #[test]
    fn mismatched_hop_weights_rejected() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![1.0; 4]).unwrap();
        let q0 = identity_var(&mut tape, 2);
        let w = identity_var(&mut tape, 2);
        let layer = DiffusionLayer {
            w: None,
            w_f: vec![w, w],
            w_b: vec![],
        };
        let res = lpgcn_diffusion_conv(&mut tape, x, None, &[layer], &[q0], None, Activation::Relu);
        assert!(matches!(res, Err(Error::Config(_))));
    }
}
