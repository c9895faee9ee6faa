//! Full forecaster assembly: input mapping into the latent space, the
//! configured spatial branch per horizon, the temporal branch with
//! prediction-time attention, gated fusion, and output mapping — plus
//! the ablation switches and the checkpoint container.

use crate::error::{Error, Result};
use crate::graph::{matrix_powers, pmi_matrix, sym_normalize_rows, RoadGraph};
use crate::spatial::{
    self, Activation, DiffusionLayer, SpatialVariant,
};
use crate::tape::{Tape, VarId};
use crate::temporal::{self, TimeStamp};
use crate::tensor::{xavier, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Random-walk budget for the walk-based spatial variant: walk length
/// equals the vertex count, with this many walks per start vertex.
pub const WALKS_PER_VERTEX: usize = 10;

/// Which part of the model is switched off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Both branches with attention.
    Full,
    /// Temporal branch only.
    NoSpatial,
    /// Spatial branch on the latest observation plus the prediction-time
    /// embedding; no convolution over the window.
    NoTemporal,
    /// Attention replaced by one learned fully connected layer over the
    /// slice axis.
    AttentionOff,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_spatial" => Ok(Ablation::NoSpatial),
            "no_temporal" => Ok(Ablation::NoTemporal),
            "attention_off" => Ok(Ablation::AttentionOff),
            other => Err(Error::config(format!(
                "unknown ablation '{other}' (expected full, no_spatial, no_temporal, or attention_off)"
            ))),
        }
    }
}

/// How holidays enter the day-type one-hot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HolidayMode {
    /// Treat holidays as Sundays (7 day types).
    AsSunday,
    /// Give holidays their own eighth day type.
    ExtraDay,
}

impl HolidayMode {
    pub fn day_types(self) -> usize {
        match self {
            HolidayMode::AsSunday => 7,
            HolidayMode::ExtraDay => 8,
        }
    }
}

/// Everything that determines parameter shapes and forward behavior.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Vertex count of the road network.
    pub n: usize,
    /// Input window length (time points).
    pub p: usize,
    /// Prediction horizon count.
    pub q: usize,
    /// Latent width per vertex.
    pub d: usize,
    /// Conditions per vertex (1 = speed only).
    pub c: usize,
    /// Diffusion hop count.
    pub k: usize,
    /// Spatial convolution layer count.
    pub spatial_layers: usize,
    pub spatial_variant: SpatialVariant,
    pub ablation: Ablation,
    /// Use the latest observation's spatial output for every horizon
    /// instead of pairing horizon i with window step i. Forced on when
    /// q exceeds p.
    pub fallback_zp: bool,
    pub holiday_mode: HolidayMode,
    /// Whether the graph (and hence the transition matrices) is
    /// directed; set from the graph at build time.
    pub directed: bool,
    /// Seed for parameter initialization and random walks.
    pub seed: u64,
}

impl ModelConfig {
    /// A small-footprint starting point; fields are public for tuning.
    pub fn new(n: usize, p: usize, q: usize, d: usize, c: usize) -> Self {
        ModelConfig {
            n,
            p,
            q,
            d,
            c,
            k: 2,
            spatial_layers: 1,
            spatial_variant: SpatialVariant::LpgcnAdj,
            ablation: Ablation::Full,
            fallback_zp: false,
            holiday_mode: HolidayMode::AsSunday,
            directed: false,
            seed: 0,
        }
    }

    /// Check bounds and normalize the horizon-pairing fallback.
    pub fn validated(mut self) -> Result<Self> {
        if self.n == 0 || self.p == 0 || self.q == 0 || self.d == 0 || self.c == 0 {
            return Err(Error::config(
                "n, p, q, d, and c must all be at least 1",
            ));
        }
        if self.spatial_layers == 0 {
            return Err(Error::config("spatial_layers must be at least 1"));
        }
        if self.ablation != Ablation::NoTemporal && self.p < 2 {
            return Err(Error::config(
                "the temporal branch needs a window of at least 2; use the no_temporal ablation for p = 1",
            ));
        }
        if self.q > self.p {
            // Horizon i cannot pair with window step i beyond the window.
            self.fallback_zp = true;
        }
        Ok(self)
    }

    pub fn day_types(&self) -> usize {
        self.holiday_mode.day_types()
    }

    /// Slices in the temporal stack (also the time-embedding width).
    pub fn slice_count(&self) -> usize {
        temporal::slice_count(self.p)
    }

    fn has_spatial(&self) -> bool {
        self.ablation != Ablation::NoSpatial
    }

    fn has_temporal(&self) -> bool {
        self.ablation != Ablation::NoTemporal
    }

    fn has_fusion(&self) -> bool {
        self.has_spatial() && self.has_temporal()
    }

    fn uses_attention(&self) -> bool {
        matches!(self.ablation, Ablation::Full | Ablation::NoSpatial)
    }

    /// The backward transition term exists only for directed graphs.
    fn has_backward_hops(&self) -> bool {
        self.directed
            && matches!(
                self.spatial_variant,
                SpatialVariant::Dgcn | SpatialVariant::LpgcnAdj
            )
    }
}

/// Stable handle into a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Ordered, named parameter tensors. Insertion order is the layout
/// order and never changes after construction, which keeps optimizer
/// state and checkpoints aligned.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.entries.push((name.into(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total scalar parameter count.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn clear_grads(&mut self) {
        for (_, t) in &mut self.entries {
            t.clear_grad();
        }
    }
}

/// How each parameter tensor starts.
#[derive(Debug, Clone, Copy)]
enum Init {
    Xavier,
    Zero,
    /// Uniform random integers in [0, n].
    FreqInteger,
    /// Averaging kernel 1/width with a small jitter.
    Kernel,
    /// Small uniform values in ±0.05.
    SmallUniform,
    /// Every entry the same constant.
    Constant(f64),
}

/// One entry of the parameter layout: name, shape, initializer.
type LayoutEntry = (String, Vec<usize>, Init);

fn param_layout(cfg: &ModelConfig) -> Vec<LayoutEntry> {
    let (n, p, d, c, k) = (cfg.n, cfg.p, cfg.d, cfg.c, cfg.k);
    let s = cfg.slice_count();
    let width = temporal::onehot_width(cfg.day_types());
    let mut layout: Vec<LayoutEntry> = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| {
        layout.push((name, shape, init));
    };

    push("input_mapper.w1".into(), vec![c, 10], Init::Xavier);
    push("input_mapper.b1".into(), vec![10], Init::Zero);
    push("input_mapper.w2".into(), vec![10, d], Init::Xavier);
    push("input_mapper.b2".into(), vec![d], Init::Zero);

    if cfg.has_spatial() {
        if cfg.spatial_variant.learns_frequencies() {
            push("spatial.f_hat".into(), vec![n, n], Init::FreqInteger);
        }
        for h in 0..cfg.spatial_layers {
            let has_w = !matches!(cfg.spatial_variant, SpatialVariant::Dgcn);
            if has_w {
                push(format!("spatial.w.{h}"), vec![d, d], Init::Xavier);
            }
            if matches!(
                cfg.spatial_variant,
                SpatialVariant::Dgcn | SpatialVariant::LpgcnAdj
            ) {
                for i in 0..=k {
                    push(format!("spatial.wf.{h}.{i}"), vec![d, d], Init::Xavier);
                }
                if cfg.has_backward_hops() {
                    for i in 0..=k {
                        push(format!("spatial.wb.{h}.{i}"), vec![d, d], Init::Xavier);
                    }
                }
            }
        }
    }

    if cfg.has_temporal() {
        for j in 2..=p {
            push(format!("temporal.kernel{j}"), vec![j, d], Init::Kernel);
        }
        if cfg.uses_attention() {
            push("time_embed.w".into(), vec![width, n * s], Init::SmallUniform);
            push("time_embed.b".into(), vec![n * s], Init::Zero);
        } else {
            // Learned aggregation over the slice axis, shared across
            // vertices; starts as the plain mean.
            push(
                "temporal.fc.w".into(),
                vec![s],
                Init::Constant(1.0 / s as f64),
            );
            push("temporal.fc.b".into(), vec![1], Init::Zero);
        }
    } else {
        push("time_embed.w".into(), vec![width, n * s], Init::SmallUniform);
        push("time_embed.b".into(), vec![n * s], Init::Zero);
        push("time_reduce.w".into(), vec![s, d], Init::Xavier);
    }

    if cfg.has_fusion() {
        push("fusion.w1".into(), vec![d, d], Init::Xavier);
        push("fusion.w2".into(), vec![d, d], Init::Xavier);
        push("fusion.b".into(), vec![d], Init::Zero);
    }

    push("output_mapper.w1".into(), vec![d, 10], Init::Xavier);
    push("output_mapper.b1".into(), vec![10], Init::Zero);
    push("output_mapper.w2".into(), vec![10, c], Init::Xavier);
    push("output_mapper.b2".into(), vec![c], Init::Zero);

    layout
}

/// Closed-form scalar parameter count for a config; asserted against
/// the actual store in tests.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    param_layout(cfg)
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum()
}

fn init_tensor(shape: &[usize], init: Init, n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    match init {
        Init::Xavier => {
            debug_assert_eq!(shape.len(), 2);
            xavier(shape[0], shape[1], rng)
        }
        Init::Zero => Tensor::zeros(shape.to_vec()).with_requires_grad(),
        Init::FreqInteger => spatial::init_f_hat(n, rng).expect("valid n"),
        Init::Kernel => {
            let width = shape[0];
            let base = 1.0 / width as f64;
            let jitter = 0.05 * base;
            let data: Vec<f64> = (0..shape.iter().product())
                .map(|_| base + rng.gen_range(-jitter..jitter))
                .collect();
            Tensor::new(shape.to_vec(), data)
                .expect("finite init")
                .with_requires_grad()
        }
        Init::SmallUniform => {
            let data: Vec<f64> = (0..shape.iter().product())
                .map(|_| rng.gen_range(-0.05..0.05))
                .collect();
            Tensor::new(shape.to_vec(), data)
                .expect("finite init")
                .with_requires_grad()
        }
        Init::Constant(v) => {
            let data = vec![v; shape.iter().product()];
            Tensor::new(shape.to_vec(), data)
                .expect("finite init")
                .with_requires_grad()
        }
    }
}

/// Precomputed non-trainable matrices the forward pass needs.
#[derive(Debug, Clone, Default)]
struct SpatialConstants {
    /// Symmetric-normalized self-looped adjacency (structure variant).
    norm_adj: Option<Tensor>,
    /// Symmetric-normalized walk PMI (walk variant); persisted in the
    /// checkpoint because inference does not revisit the graph.
    norm_pmi: Option<Tensor>,
    /// Forward transition powers 0..=K (diffusion variants).
    qf_powers: Vec<Tensor>,
    /// Backward transition powers, directed graphs only.
    qb_powers: Vec<Tensor>,
}

impl SpatialConstants {
    fn build(cfg: &ModelConfig, graph: Option<&RoadGraph>) -> Result<Self> {
        let mut sc = SpatialConstants::default();
        let need_graph = cfg.has_spatial()
            && (cfg.spatial_variant.requires_adjacency()
                || cfg.spatial_variant == SpatialVariant::Pgcn);
        if !need_graph {
            return Ok(sc);
        }
        let g = graph.ok_or_else(|| {
            Error::config(format!(
                "spatial variant {:?} requires a graph adjacency",
                cfg.spatial_variant
            ))
        })?;
        if g.n() != cfg.n {
            return Err(Error::config(format!(
                "graph has {} vertices but the model is configured for {}",
                g.n(),
                cfg.n
            )));
        }
        match cfg.spatial_variant {
            SpatialVariant::Gcn => {
                sc.norm_adj = Some(g.normalized_adjacency()?);
            }
            SpatialVariant::Pgcn => {
                let freq = g.random_walk_frequencies(cfg.n, WALKS_PER_VERTEX, cfg.seed)?;
                let pmi = pmi_matrix(&freq)?;
                sc.norm_pmi = Some(sym_normalize_rows(pmi.data(), cfg.n));
            }
            SpatialVariant::Dgcn | SpatialVariant::LpgcnAdj => {
                let (qf, qb) = g.transition_matrices()?;
                sc.qf_powers = matrix_powers(&qf, cfg.k)?;
                if g.directed() {
                    sc.qb_powers = matrix_powers(&qb, cfg.k)?;
                }
            }
            SpatialVariant::Lpgcn => {}
        }
        Ok(sc)
    }

    fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if let Some(t) = &self.norm_adj {
            out.push(("norm_adj".to_string(), t));
        }
        if let Some(t) = &self.norm_pmi {
            out.push(("norm_pmi".to_string(), t));
        }
        for (i, t) in self.qf_powers.iter().enumerate() {
            out.push((format!("qf_pow.{i}"), t));
        }
        for (i, t) in self.qb_powers.iter().enumerate() {
            out.push((format!("qb_pow.{i}"), t));
        }
        out
    }
}

/// Typed handles into the parameter store, resolved once at build.
#[derive(Debug, Clone)]
struct ParamIds {
    in_w1: ParamId,
    in_b1: ParamId,
    in_w2: ParamId,
    in_b2: ParamId,
    f_hat: Option<ParamId>,
    sp_w: Vec<ParamId>,
    sp_wf: Vec<Vec<ParamId>>,
    sp_wb: Vec<Vec<ParamId>>,
    kernels: Vec<ParamId>,
    te_w: Option<ParamId>,
    te_b: Option<ParamId>,
    fc_w: Option<ParamId>,
    fc_b: Option<ParamId>,
    reduce_w: Option<ParamId>,
    fusion_w1: Option<ParamId>,
    fusion_w2: Option<ParamId>,
    fusion_b: Option<ParamId>,
    out_w1: ParamId,
    out_b1: ParamId,
    out_w2: ParamId,
    out_b2: ParamId,
}

fn resolve_ids(cfg: &ModelConfig, store: &ParamStore) -> ParamIds {
    let by_name = |name: &str| -> ParamId {
        store
            .ids()
            .find(|&id| store.name(id) == name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"))
    };
    let maybe = |name: &str| -> Option<ParamId> {
        store.ids().find(|&id| store.name(id) == name)
    };
    let sp_w = (0..cfg.spatial_layers)
        .filter_map(|h| maybe(&format!("spatial.w.{h}")))
        .collect();
    let sp_wf = (0..cfg.spatial_layers)
        .map(|h| {
            (0..=cfg.k)
                .filter_map(|i| maybe(&format!("spatial.wf.{h}.{i}")))
                .collect::<Vec<_>>()
        })
        .filter(|v: &Vec<ParamId>| !v.is_empty())
        .collect();
    let sp_wb = (0..cfg.spatial_layers)
        .map(|h| {
            (0..=cfg.k)
                .filter_map(|i| maybe(&format!("spatial.wb.{h}.{i}")))
                .collect::<Vec<_>>()
        })
        .filter(|v: &Vec<ParamId>| !v.is_empty())
        .collect();
    ParamIds {
        in_w1: by_name("input_mapper.w1"),
        in_b1: by_name("input_mapper.b1"),
        in_w2: by_name("input_mapper.w2"),
        in_b2: by_name("input_mapper.b2"),
        f_hat: maybe("spatial.f_hat"),
        sp_w,
        sp_wf,
        sp_wb,
        kernels: (2..=cfg.p)
            .filter_map(|j| maybe(&format!("temporal.kernel{j}")))
            .collect(),
        te_w: maybe("time_embed.w"),
        te_b: maybe("time_embed.b"),
        fc_w: maybe("temporal.fc.w"),
        fc_b: maybe("temporal.fc.b"),
        reduce_w: maybe("time_reduce.w"),
        fusion_w1: maybe("fusion.w1"),
        fusion_w2: maybe("fusion.w2"),
        fusion_b: maybe("fusion.b"),
        out_w1: by_name("output_mapper.w1"),
        out_b1: by_name("output_mapper.b1"),
        out_w2: by_name("output_mapper.w2"),
        out_b2: by_name("output_mapper.b2"),
    }
}

/// Parameters of one tape binding, indexed by [`ParamId`].
pub struct BoundParams {
    vars: Vec<VarId>,
}

impl BoundParams {
    pub fn var(&self, id: ParamId) -> VarId {
        self.vars[id.0]
    }
}

/// Record every parameter of a store as a tape leaf, in store order.
pub fn bind_params(store: &ParamStore, tape: &mut Tape) -> BoundParams {
    let vars = store.ids().map(|id| tape.leaf(store.get(id))).collect();
    BoundParams { vars }
}

/// Accumulate the tape's gradients for a binding back into its store.
pub fn apply_grads_to(store: &mut ParamStore, tape: &Tape, bound: &BoundParams) -> Result<()> {
    for id in store.ids().collect::<Vec<_>>() {
        if let Some(g) = tape.grad(bound.var(id)) {
            let g = g.to_vec();
            store.get_mut(id).accumulate_grad(&g)?;
        }
    }
    Ok(())
}

/// Two linear layers with a ReLU between them and no activation after
/// the second — the mapper used on both ends of the model.
pub fn two_layer_map(
    tape: &mut Tape,
    x: VarId,
    w1: VarId,
    b1: VarId,
    w2: VarId,
    b2: VarId,
) -> Result<VarId> {
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.relu(h);
    let out = tape.matmul(h, w2)?;
    tape.add_bias(out, b2)
}

/// Blend the spatial and temporal views with a learned elementwise
/// gate: `α = sigmoid(z·W1 + t·W2 + b)`, output `α⊙z + (1−α)⊙t`.
pub fn gated_fusion(
    tape: &mut Tape,
    z: VarId,
    t_att: VarId,
    w1: VarId,
    w2: VarId,
    b: VarId,
) -> Result<VarId> {
    gated_fusion_parts(tape, z, t_att, w1, w2, b).map(|(out, _)| out)
}

/// Same as [`gated_fusion`], but also hands back the gate matrix `α`
/// so callers can inspect how the blend was split.
pub fn gated_fusion_parts(
    tape: &mut Tape,
    z: VarId,
    t_att: VarId,
    w1: VarId,
    w2: VarId,
    b: VarId,
) -> Result<(VarId, VarId)> {
    if tape.shape(z) != tape.shape(t_att) {
        return Err(Error::Dimension {
            op: "gated_fusion",
            lhs: tape.shape(z).to_vec(),
            rhs: tape.shape(t_att).to_vec(),
        });
    }
    let zw = tape.matmul(z, w1)?;
    let tw = tape.matmul(t_att, w2)?;
    let pre = tape.add(zw, tw)?;
    let pre = tape.add_bias(pre, b)?;
    let alpha = tape.sigmoid(pre);
    // α⊙z + (1−α)⊙t = t + α⊙(z − t)
    let diff = tape.sub(z, t_att)?;
    let gated = tape.mul(alpha, diff)?;
    let out = tape.add(t_att, gated)?;
    Ok((out, alpha))
}

/// Tape handles for the normalized quantities produced during one
/// forward pass, collected so their values can be read back.
#[derive(Debug, Default)]
struct ForwardTrace {
    /// One `[n, s]` softmax weight matrix per horizon that ran the
    /// attention aggregation.
    attention_weights: Vec<VarId>,
    /// One `[n, d]` gate matrix per fused horizon.
    gates: Vec<VarId>,
    /// The nonnegative learned interaction matrix, when the variant
    /// builds one.
    p_hat: Option<VarId>,
}

/// Observed values of the model's internal normalization quantities
/// over one window. Quantities a variant does not produce come back
/// empty or `None`: aggregation without attention records no weight
/// sums, variants without fusion record no gate range, and variants
/// whose propagation matrix is fixed record no interaction minimum.
#[derive(Debug, Clone)]
pub struct ForwardDiagnostics {
    /// Per horizon, per vertex: the sum of that vertex's attention
    /// weights (each should be 1 up to rounding).
    pub attention_row_sums: Vec<Vec<f64>>,
    /// Smallest and largest fusion gate entry across all horizons.
    pub gate_range: Option<(f64, f64)>,
    /// Smallest entry of the learned interaction matrix.
    pub p_hat_min: Option<f64>,
}

/// The assembled model: config, parameters, and precomputed constants.
#[derive(Debug, Clone)]
pub struct Forecaster {
    config: ModelConfig,
    store: ParamStore,
    ids: ParamIds,
    constants: SpatialConstants,
}

impl Forecaster {
    /// Build a fresh model. The graph is optional for variants that can
    /// run without one; `config.directed` is aligned to the graph when
    /// present. Parameters are initialized in layout order from a rng
    /// seeded by `config.seed`, so identical configs build identical
    /// models.
    pub fn new(config: ModelConfig, graph: Option<&RoadGraph>) -> Result<Self> {
        let mut config = config.validated()?;
        if let Some(g) = graph {
            config.directed = g.directed();
        }
        let constants = SpatialConstants::build(&config, graph)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in param_layout(&config) {
            let t = init_tensor(&shape, init, config.n, &mut rng);
            store.add(name, t);
        }
        let ids = resolve_ids(&config, &store);
        Ok(Forecaster {
            config,
            store,
            ids,
            constants,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
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

    /// Record every parameter as a leaf on the tape.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        bind_params(&self.store, tape)
    }

    /// After a backward pass, accumulate the tape's gradients into the
    /// stored parameters.
    pub fn apply_grads(&mut self, tape: &Tape, bound: &BoundParams) -> Result<()> {
        apply_grads_to(&mut self.store, tape, bound)
    }

    /// One forward pass on an existing tape with bound parameters.
    /// `window` is `[p, n, c]` (already normalized), `horizons` the q
    /// prediction timestamps. Returns one `[n, c]` output per horizon;
    /// horizons never consume each other's outputs.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        window: &Tensor,
        horizons: &[TimeStamp],
    ) -> Result<Vec<VarId>> {
        self.forward_impl(tape, bound, window, horizons, None)
    }

    fn forward_impl(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        window: &Tensor,
        horizons: &[TimeStamp],
        mut trace: Option<&mut ForwardTrace>,
    ) -> Result<Vec<VarId>> {
        let cfg = &self.config;
        let (n, p, q, c) = (cfg.n, cfg.p, cfg.q, cfg.c);
        if window.shape() != [p, n, c] {
            return Err(Error::contract(format!(
                "window shape {:?} does not match configured [p, n, c] = [{p}, {n}, {c}]",
                window.shape()
            )));
        }
        if horizons.len() != q {
            return Err(Error::contract(format!(
                "got {} horizon timestamps, expected q = {q}",
                horizons.len()
            )));
        }

        // Input mapping: each window step into the latent space.
        let mut xs = Vec::with_capacity(p);
        for t in 0..p {
            let step = tape.constant(
                vec![n, c],
                window.data()[t * n * c..(t + 1) * n * c].to_vec(),
            )?;
            xs.push(two_layer_map(
                tape,
                step,
                bound.var(self.ids.in_w1),
                bound.var(self.ids.in_b1),
                bound.var(self.ids.in_w2),
                bound.var(self.ids.in_b2),
            )?);
        }

        // Spatial precomputations shared across horizons.
        let p_hat = match self.ids.f_hat {
            Some(id) if cfg.has_spatial() => {
                Some(spatial::learned_pmi(tape, bound.var(id))?)
            }
            _ => None,
        };
        if let Some(t) = trace.as_deref_mut() {
            t.p_hat = p_hat;
        }
        let norm_adj = self.constants.norm_adj.as_ref().map(|t| tape.leaf(t));
        let norm_pmi = self.constants.norm_pmi.as_ref().map(|t| tape.leaf(t));
        let qf: Vec<VarId> = self
            .constants
            .qf_powers
            .iter()
            .map(|t| tape.leaf(t))
            .collect();
        let qb: Vec<VarId> = self
            .constants
            .qb_powers
            .iter()
            .map(|t| tape.leaf(t))
            .collect();
        let diffusion_layers: Vec<DiffusionLayer> = (0..cfg.spatial_layers)
            .map(|h| DiffusionLayer {
                w: self.ids.sp_w.get(h).map(|&id| bound.var(id)),
                w_f: self
                    .ids
                    .sp_wf
                    .get(h)
                    .map(|v| v.iter().map(|&id| bound.var(id)).collect())
                    .unwrap_or_default(),
                w_b: self
                    .ids
                    .sp_wb
                    .get(h)
                    .map(|v| v.iter().map(|&id| bound.var(id)).collect())
                    .unwrap_or_default(),
            })
            .collect();
        let sp_w: Vec<VarId> = self.ids.sp_w.iter().map(|&id| bound.var(id)).collect();

        let spatial_at = |tape: &mut Tape, x: VarId| -> Result<VarId> {
            match cfg.spatial_variant {
                SpatialVariant::Gcn => spatial::gcn_conv(
                    tape,
                    x,
                    norm_adj.expect("structure variant has its constant"),
                    &sp_w,
                    Activation::Relu,
                ),
                SpatialVariant::Pgcn => spatial::graph_propagate(
                    tape,
                    x,
                    norm_pmi.expect("walk variant has its constant"),
                    &sp_w,
                    Activation::Relu,
                ),
                SpatialVariant::Lpgcn => spatial::lpgcn_conv(
                    tape,
                    x,
                    p_hat.expect("learned variant has its PMI"),
                    &sp_w,
                    Activation::Relu,
                ),
                SpatialVariant::Dgcn | SpatialVariant::LpgcnAdj => {
                    spatial::lpgcn_diffusion_conv(
                        tape,
                        x,
                        p_hat,
                        &diffusion_layers,
                        &qf,
                        if qb.is_empty() { None } else { Some(&qb) },
                        Activation::Relu,
                    )
                }
            }
        };

        // Temporal stack shared across horizons.
        let day_types = cfg.day_types();
        let s = cfg.slice_count();
        let mut x_bar = None;
        let mut t_shared = None;
        if cfg.has_temporal() {
            let x_seq = tape.stack(&xs)?;
            let kernel_vars: Vec<VarId> =
                self.ids.kernels.iter().map(|&id| bound.var(id)).collect();
            let paths = temporal::multi_path_convolve(tape, x_seq, &kernel_vars)?;
            let stack = temporal::concat_temporal(tape, x_seq, &paths)?;
            if !cfg.uses_attention() {
                // Learned time-independent aggregation over slices.
                let fc_w = bound.var(self.ids.fc_w.expect("fc weights without attention"));
                let fc_b = bound.var(self.ids.fc_b.expect("fc bias without attention"));
                let agg = tape.collapse_slices(stack, fc_w)?;
                t_shared = Some(tape.add_scalar(agg, fc_b)?);
            }
            x_bar = Some(stack);
        }

        // Per-horizon assembly. Under the fallback every horizon reuses
        // the latest window step's spatial output.
        let mut z_cache: Vec<Option<VarId>> = vec![None; p];
        let mut outputs = Vec::with_capacity(q);
        for (i, horizon) in horizons.iter().enumerate() {
            let fused = match cfg.ablation {
                Ablation::NoSpatial => {
                    let stack = x_bar.expect("temporal stack present");
                    let e = temporal::embed_time(
                        tape,
                        bound.var(self.ids.te_w.expect("attention embedding")),
                        bound.var(self.ids.te_b.expect("attention embedding")),
                        horizon,
                        day_types,
                        n,
                        s,
                    )?;
                    let (att, weights) =
                        temporal::temporal_attention_parts(tape, stack, e)?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.attention_weights.push(weights);
                    }
                    att
                }
                Ablation::NoTemporal => {
                    let z = match z_cache[p - 1] {
                        Some(z) => z,
                        None => {
                            let z = spatial_at(tape, xs[p - 1])?;
                            z_cache[p - 1] = Some(z);
                            z
                        }
                    };
                    let e = temporal::embed_time(
                        tape,
                        bound.var(self.ids.te_w.expect("prediction-time embedding")),
                        bound.var(self.ids.te_b.expect("prediction-time embedding")),
                        horizon,
                        day_types,
                        n,
                        s,
                    )?;
                    let reduced =
                        tape.matmul(e, bound.var(self.ids.reduce_w.expect("reduction map")))?;
                    tape.add(z, reduced)?
                }
                Ablation::Full | Ablation::AttentionOff => {
                    let step = if cfg.fallback_zp { p - 1 } else { i };
                    let z = match z_cache[step] {
                        Some(z) => z,
                        None => {
                            let z = spatial_at(tape, xs[step])?;
                            z_cache[step] = Some(z);
                            z
                        }
                    };
                    let t_att = if let Some(t) = t_shared {
                        t
                    } else {
                        let stack = x_bar.expect("temporal stack present");
                        let e = temporal::embed_time(
                            tape,
                            bound.var(self.ids.te_w.expect("attention embedding")),
                            bound.var(self.ids.te_b.expect("attention embedding")),
                            horizon,
                            day_types,
                            n,
                            s,
                        )?;
                        let (att, weights) =
                            temporal::temporal_attention_parts(tape, stack, e)?;
                        if let Some(t) = trace.as_deref_mut() {
                            t.attention_weights.push(weights);
                        }
                        att
                    };
                    let (fused, alpha) = gated_fusion_parts(
                        tape,
                        z,
                        t_att,
                        bound.var(self.ids.fusion_w1.expect("fusion present")),
                        bound.var(self.ids.fusion_w2.expect("fusion present")),
                        bound.var(self.ids.fusion_b.expect("fusion present")),
                    )?;
                    if let Some(t) = trace.as_deref_mut() {
                        t.gates.push(alpha);
                    }
                    fused
                }
            };
            outputs.push(two_layer_map(
                tape,
                fused,
                bound.var(self.ids.out_w1),
                bound.var(self.ids.out_b1),
                bound.var(self.ids.out_w2),
                bound.var(self.ids.out_b2),
            )?);
        }
        Ok(outputs)
    }

    /// Convenience inference: build a throwaway tape, run the forward
    /// pass, and assemble the per-horizon outputs into one `[q, n, c]`
    /// tensor.
    pub fn forward_predict(&self, window: &Tensor, horizons: &[TimeStamp]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let outs = self.forward_on_tape(&mut tape, &bound, window, horizons)?;
        let (n, c) = (self.config.n, self.config.c);
        let mut data = Vec::with_capacity(outs.len() * n * c);
        for out in outs {
            data.extend_from_slice(tape.value(out));
        }
        Tensor::new(vec![self.config.q, n, c], data)
    }

    /// Run an inference pass and report the internal normalization
    /// quantities: per-vertex attention weight sums for each horizon,
    /// the range of the fusion gate entries, and the smallest learned
    /// interaction value. Lets callers assert that attention rows stay
    /// distributions, gates stay inside (0, 1), and the interaction
    /// matrix stays nonnegative as parameters move.
    pub fn diagnostics(
        &self,
        window: &Tensor,
        horizons: &[TimeStamp],
    ) -> Result<ForwardDiagnostics> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let mut trace = ForwardTrace::default();
        self.forward_impl(&mut tape, &bound, window, horizons, Some(&mut trace))?;
        let attention_row_sums = trace
            .attention_weights
            .iter()
            .map(|&w| {
                let s = tape.shape(w)[1];
                tape.value(w)
                    .chunks(s)
                    .map(|row| row.iter().sum())
                    .collect()
            })
            .collect();
        let mut gate_range: Option<(f64, f64)> = None;
        for &g in &trace.gates {
            for &v in tape.value(g) {
                gate_range = Some(match gate_range {
                    Some((lo, hi)) => (lo.min(v), hi.max(v)),
                    None => (v, v),
                });
            }
        }
        let p_hat_min = trace
            .p_hat
            .map(|id| tape.value(id).iter().fold(f64::INFINITY, |m, &v| m.min(v)));
        Ok(ForwardDiagnostics {
            attention_row_sums,
            gate_range,
            p_hat_min,
        })
    }

    /// Snapshot everything needed to rebuild this model.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self
                .store
                .iter()
                .map(|(name, t)| (name.to_string(), t.shape().to_vec(), t.data().to_vec()))
                .collect(),
            constants: self
                .constants
                .entries()
                .into_iter()
                .map(|(name, t)| (name, t.shape().to_vec(), t.data().to_vec()))
                .collect(),
            extras: Vec::new(),
        }
    }

    /// Rebuild from a checkpoint, rejecting any layout mismatch between
    /// the stored arrays and what the stored config implies.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck.config.clone().validated()?;
        let layout = param_layout(&config);
        if layout.len() != ck.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter arrays, config implies {}",
                ck.params.len(),
                layout.len()
            )));
        }
        let mut store = ParamStore::new();
        for ((want_name, want_shape, _), (name, shape, data)) in
            layout.iter().zip(&ck.params)
        {
            if want_name != name || want_shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter mismatch: stored {name} {shape:?}, config implies {want_name} {want_shape:?}"
                )));
            }
            store.add(
                name.clone(),
                Tensor::new(shape.clone(), data.clone())?.with_requires_grad(),
            );
        }

        let mut constants = SpatialConstants::default();
        for (name, shape, data) in &ck.constants {
            let t = Tensor::new(shape.clone(), data.clone())?;
            if name == "norm_adj" {
                constants.norm_adj = Some(t);
            } else if name == "norm_pmi" {
                constants.norm_pmi = Some(t);
            } else if let Some(idx) = name.strip_prefix("qf_pow.") {
                let i: usize = idx
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad constant name {name}")))?;
                if constants.qf_powers.len() != i {
                    return Err(Error::Checkpoint(format!(
                        "constant {name} out of order"
                    )));
                }
                constants.qf_powers.push(t);
            } else if let Some(idx) = name.strip_prefix("qb_pow.") {
                let i: usize = idx
                    .parse()
                    .map_err(|_| Error::Checkpoint(format!("bad constant name {name}")))?;
                if constants.qb_powers.len() != i {
                    return Err(Error::Checkpoint(format!(
                        "constant {name} out of order"
                    )));
                }
                constants.qb_powers.push(t);
            } else {
                return Err(Error::Checkpoint(format!("unknown constant {name}")));
            }
        }
        let expected = expected_constants(&config);
        let got: Vec<String> = ck.constants.iter().map(|(n, _, _)| n.clone()).collect();
        if expected != got {
            return Err(Error::Checkpoint(format!(
                "constants {got:?} do not match config expectation {expected:?}"
            )));
        }

        let ids = resolve_ids(&config, &store);
        Ok(Forecaster {
            config,
            store,
            ids,
            constants,
        })
    }
}

fn expected_constants(cfg: &ModelConfig) -> Vec<String> {
    let mut names = Vec::new();
    if !cfg.has_spatial() {
        return names;
    }
    match cfg.spatial_variant {
        SpatialVariant::Gcn => names.push("norm_adj".to_string()),
        SpatialVariant::Pgcn => names.push("norm_pmi".to_string()),
        SpatialVariant::Dgcn | SpatialVariant::LpgcnAdj => {
            for i in 0..=cfg.k {
                names.push(format!("qf_pow.{i}"));
            }
            if cfg.directed {
                for i in 0..=cfg.k {
                    names.push(format!("qb_pow.{i}"));
                }
            }
        }
        SpatialVariant::Lpgcn => {}
    }
    names
}

/// Serializable snapshot of a model: config, parameters, constants,
/// plus free-form named arrays (the training normalizer rides here).
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub constants: Vec<(String, Vec<usize>, Vec<f64>)>,
    pub extras: Vec<(String, Vec<usize>, Vec<f64>)>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"RDFC";
const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    /// Write the versioned binary container (little-endian throughout).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config_json = serde_json::to_vec(&self.config)
            .map_err(|e| Error::Checkpoint(format!("config serialization failed: {e}")))?;
        buf.extend_from_slice(&(config_json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&config_json);
        for section in [&self.params, &self.constants, &self.extras] {
            write_section(&mut buf, section);
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(
                "not a checkpoint file (bad magic)".to_string(),
            ));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let config_len = cur.take_u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(cur.take(config_len)?)
            .map_err(|e| Error::Checkpoint(format!("config parse failed: {e}")))?;
        let params = read_section(&mut cur)?;
        let constants = read_section(&mut cur)?;
        let extras = read_section(&mut cur)?;
        if cur.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                bytes.len() - cur.pos
            )));
        }
        Ok(Checkpoint {
            config,
            params,
            constants,
            extras,
        })
    }

    /// Fetch a named array from the extras section.
    pub fn extra(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.extras
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, shape, data)| (shape.as_slice(), data.as_slice()))
    }
}

fn write_section(buf: &mut Vec<u8>, entries: &[(String, Vec<usize>, Vec<f64>)]) {
    buf.extend_from_slice(&(entries.len() as u64).to_le_bytes());
    for (name, shape, data) in entries {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &dim in shape {
            buf.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for &v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        if self.pos + len > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint file".to_string()));
        }
        let out = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(out)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// One named array from a checkpoint section: name, shape, values.
type SectionEntry = (String, Vec<usize>, Vec<f64>);

fn read_section(cur: &mut Cursor) -> Result<Vec<SectionEntry>> {
    let count = cur.take_u64()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.take_u64()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 array name".to_string()))?;
        let rank = cur.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.take_u64()? as usize);
        }
        let numel = cur.take_u64()? as usize;
        if numel != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "array {name}: {numel} values for shape {shape:?}"
            )));
        }
        let raw = cur.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, shape, data));
    }
    Ok(out)
}
