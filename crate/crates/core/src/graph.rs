//! Road-network representation and the matrices derived from it:
//! symmetric-normalized adjacency, forward/backward transition matrices
//! and their powers, random-walk visit counts, and point-wise mutual
//! information over those counts.

use crate::error::{Error, Result};
use crate::tensor::{mat_mul, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A weighted road network over vertices `0..n`.
///
/// The adjacency matrix is optional: the learned-frequency convolution
/// variant never consults it, and the walk-based variant only needs it
/// once, to generate frequencies.
#[derive(Debug, Clone)]
pub struct RoadGraph {
    n: usize,
    directed: bool,
    adjacency: Option<Vec<f64>>,
}

impl RoadGraph {
    /// A graph with no adjacency information.
    pub fn without_adjacency(n: usize, directed: bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("graph must have at least one vertex"));
        }
        Ok(RoadGraph {
            n,
            directed,
            adjacency: None,
        })
    }

    /// A graph from an explicit row-major `n×n` weight matrix.
    pub fn with_adjacency(n: usize, directed: bool, adjacency: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("graph must have at least one vertex"));
        }
        if adjacency.len() != n * n {
            return Err(Error::config(format!(
                "adjacency has {} entries, expected {}",
                adjacency.len(),
                n * n
            )));
        }
        if adjacency.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(
                "adjacency weights must be finite and nonnegative",
            ));
        }
        if !directed {
            for i in 0..n {
                for j in (i + 1)..n {
                    if adjacency[i * n + j] != adjacency[j * n + i] {
                        return Err(Error::config(format!(
                            "undirected graph has asymmetric weights at ({i}, {j})"
                        )));
                    }
                }
            }
        }
        Ok(RoadGraph {
            n,
            directed,
            adjacency: Some(adjacency),
        })
    }

    /// A graph from an edge list. Undirected graphs list each edge once;
    /// the mirror entry is filled in here.
    pub fn from_edges(n: usize, directed: bool, edges: &[(usize, usize, f64)]) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("graph must have at least one vertex"));
        }
        let mut adj = vec![0.0; n * n];
        for &(src, dst, w) in edges {
            if src >= n || dst >= n {
                return Err(Error::config(format!(
                    "edge ({src}, {dst}) out of range for {n} vertices"
                )));
            }
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(format!(
                    "edge ({src}, {dst}) has invalid weight {w}"
                )));
            }
            adj[src * n + dst] = w;
            if !directed {
                adj[dst * n + src] = w;
            }
        }
        Ok(RoadGraph {
            n,
            directed,
            adjacency: Some(adj),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    pub fn adjacency(&self) -> Option<&[f64]> {
        self.adjacency.as_deref()
    }

    fn require_adjacency(&self, op: &str) -> Result<&[f64]> {
        self.adjacency
            .as_deref()
            .ok_or_else(|| Error::config(format!("{op} requires an adjacency matrix")))
    }

    /// Symmetric normalization of the self-looped adjacency:
    /// `D̃^{-1/2}(A + I)D̃^{-1/2}` with `D̃` the degree of `A + I`.
    pub fn normalized_adjacency(&self) -> Result<Tensor> {
        let adj = self.require_adjacency("normalized_adjacency")?;
        let n = self.n;
        let mut tilde = adj.to_vec();
        for i in 0..n {
            tilde[i * n + i] += 1.0;
        }
        Ok(sym_normalize(&tilde, n))
    }

    /// Forward and backward transition matrices: row-normalized `A` and
    /// row-normalized `Aᵀ`. Rows with no outgoing weight stay all-zero;
    /// the zero-hop power supplies the self term downstream.
    pub fn transition_matrices(&self) -> Result<(Tensor, Tensor)> {
        let adj = self.require_adjacency("transition_matrices")?;
        let n = self.n;
        let mut fwd = vec![0.0; n * n];
        let mut bwd = vec![0.0; n * n];
        for i in 0..n {
            let out_deg: f64 = (0..n).map(|j| adj[i * n + j]).sum();
            if out_deg > 0.0 {
                for j in 0..n {
                    fwd[i * n + j] = adj[i * n + j] / out_deg;
                }
            }
            let in_deg: f64 = (0..n).map(|j| adj[j * n + i]).sum();
            if in_deg > 0.0 {
                for j in 0..n {
                    bwd[i * n + j] = adj[j * n + i] / in_deg;
                }
            }
        }
        Ok((
            Tensor::new(vec![n, n], fwd)?,
            Tensor::new(vec![n, n], bwd)?,
        ))
    }

    /// Visit counts from weighted random walks: entry `(i, j)` counts
    /// how often vertex `i` appears on the walks started at vertex `j`,
    /// the start visit included. A vertex with no outgoing edges ends
    /// its walks early, which is expected rather than an error.
    ///
    /// Each start vertex draws from its own seeded stream, so the counts
    /// are reproducible regardless of evaluation order.
    pub fn random_walk_frequencies(
        &self,
        walk_length: usize,
        walks_per_vertex: usize,
        seed: u64,
    ) -> Result<FrequencyMatrix> {
        let adj = self.require_adjacency("random_walk_frequencies")?;
        if walk_length < 1 || walks_per_vertex < 1 {
            return Err(Error::config(
                "walk_length and walks_per_vertex must be at least 1",
            ));
        }
        let n = self.n;
        let mut counts = vec![0.0; n * n];
        for start in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, start as u64));
            for _ in 0..walks_per_vertex {
                let mut current = start;
                counts[current * n + start] += 1.0;
                for _ in 1..walk_length {
                    match weighted_step(&adj[current * n..(current + 1) * n], &mut rng) {
                        Some(next) => {
                            current = next;
                            counts[current * n + start] += 1.0;
                        }
                        None => break,
                    }
                }
            }
        }
        FrequencyMatrix::new(n, counts)
    }
}

/// Nonnegative visit counts from random walks; entry `(i, j)` is the
/// frequency of vertex `i` on walks started at vertex `j`.
#[derive(Debug, Clone)]
pub struct FrequencyMatrix {
    n: usize,
    counts: Vec<f64>,
}

impl FrequencyMatrix {
    pub fn new(n: usize, counts: Vec<f64>) -> Result<Self> {
        if counts.len() != n * n {
            return Err(Error::config(format!(
                "frequency matrix has {} entries, expected {}",
                counts.len(),
                n * n
            )));
        }
        if counts.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::contract(
                "frequency counts must be finite and nonnegative",
            ));
        }
        Ok(FrequencyMatrix { n, counts })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }
}

/// Point-wise mutual information of a count matrix:
/// `P_ij = max(log(β_ij / (β_i·β_j)), 0)` with `β` the joint and
/// marginal empirical probabilities. Zero counts map directly to zero
/// (the limit of the clipped log), and all entries are nonnegative.
pub fn pmi_matrix(freq: &FrequencyMatrix) -> Result<Tensor> {
    let n = freq.n;
    let f = &freq.counts;
    let total: f64 = f.iter().sum();
    if total <= 0.0 {
        return Err(Error::contract(
            "pmi_matrix requires at least one positive count",
        ));
    }
    let mut rows = vec![0.0; n];
    let mut cols = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            rows[i] += f[i * n + j];
            cols[j] += f[i * n + j];
        }
    }
    let ln_t = total.ln();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let v = f[i * n + j];
            if v > 0.0 {
                let l = v.ln() + ln_t - rows[i].ln() - cols[j].ln();
                out[i * n + j] = l.max(0.0);
            }
        }
    }
    Tensor::new(vec![n, n], out)
}

/// `D^{-1/2} M D^{-1/2}` with `D` the diagonal of row sums; all-zero
/// rows keep a unit degree so the division stays defined.
pub fn sym_normalize_rows(m: &[f64], n: usize) -> Tensor {
    sym_normalize(m, n)
}

fn sym_normalize(m: &[f64], n: usize) -> Tensor {
    let mut inv_sqrt = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = (0..n).map(|j| m[i * n + j]).sum();
        inv_sqrt[i] = if deg > 0.0 { deg.powf(-0.5) } else { 1.0 };
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv_sqrt[i] * m[i * n + j] * inv_sqrt[j];
        }
    }
    Tensor::new(vec![n, n], out).expect("normalized matrix is finite")
}

/// Powers `M⁰ = I, M¹, …, M^k` of a square matrix.
pub fn matrix_powers(m: &Tensor, k: usize) -> Result<Vec<Tensor>> {
    let shape = m.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::Dimension {
            op: "matrix_powers",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let n = shape[0];
    let mut identity = vec![0.0; n * n];
    for i in 0..n {
        identity[i * n + i] = 1.0;
    }
    let mut powers = vec![Tensor::new(vec![n, n], identity)?];
    for _ in 0..k {
        let prev = powers.last().expect("at least the identity").data();
        let next = mat_mul(prev, m.data(), n, n, n);
        powers.push(Tensor::new(vec![n, n], next)?);
    }
    Ok(powers)
}

/// One weighted step from a vertex whose out-weights are `row`; `None`
/// when there is nowhere to go.
fn weighted_step(row: &[f64], rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = row.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let u = rng.gen_range(0.0..total);
    let mut cum = 0.0;
    for (j, &w) in row.iter().enumerate() {
        cum += w;
        if u < cum {
            return Some(j);
        }
    }
    // Float round-off can leave u a hair past the final cumulative sum;
    // land on the last positive-weight vertex.
    row.iter().rposition(|&w| w > 0.0)
}

/// Independent stream per start vertex, derived by mixing the base seed
/// (splitmix64 finalizer).
fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
