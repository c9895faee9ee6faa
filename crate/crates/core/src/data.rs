//! Dataset ingestion and generation: traffic CSV plus adjacency CSV
//! loading, a manifest sidecar, a synthetic generator with daily and
//! weekly periodicity over spatially correlated vertex clusters, and
//! time-ordered splitting into stride-1 sliding windows.

use crate::error::{Error, Result};
use crate::graph::RoadGraph;
use crate::temporal::TimeStamp;
use crate::tensor::Tensor;
use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Timelike};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// Time-ordered fraction of data per split.
pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Wall-clock format used in every CSV this crate reads or writes.
pub const TIME_FORMAT: &str = "%Y-%m-%d %H:%M:%S";

/// Which split a sample belongs to; carried on every window so the
/// training loop can assert that only training data reaches the
/// optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A loaded or generated traffic series over a road network.
#[derive(Debug, Clone)]
pub struct TrafficDataset {
    times: Vec<NaiveDateTime>,
    stamps: Vec<TimeStamp>,
    /// `[T, n, c]` observed values (speed in km/h as condition 0).
    values: Tensor,
    graph: RoadGraph,
    interval_minutes: u32,
}

impl TrafficDataset {
    pub fn new(
        times: Vec<NaiveDateTime>,
        values: Tensor,
        graph: RoadGraph,
        interval_minutes: u32,
    ) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::config("dataset has no timestamps"));
        }
        if interval_minutes == 0 {
            return Err(Error::config("interval must be positive"));
        }
        if values.shape().len() != 3 {
            return Err(Error::config(format!(
                "dataset values must be [time, vertex, condition], got {:?}",
                values.shape()
            )));
        }
        if values.shape()[0] != times.len() || values.shape()[1] != graph.n() {
            return Err(Error::config(format!(
                "values shape {:?} inconsistent with {} timestamps over {} vertices",
                values.shape(),
                times.len(),
                graph.n()
            )));
        }
        let step = Duration::minutes(interval_minutes as i64);
        for (i, pair) in times.windows(2).enumerate() {
            if pair[1] != pair[0] + step {
                return Err(Error::config(format!(
                    "timestamps must advance by exactly {interval_minutes} minutes; row {} is {} after {}",
                    i + 2,
                    pair[1].format(TIME_FORMAT),
                    pair[0].format(TIME_FORMAT)
                )));
            }
        }
        let stamps = times.iter().map(TimeStamp::from_datetime).collect();
        Ok(TrafficDataset {
            times,
            stamps,
            values,
            graph,
            interval_minutes,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn conditions(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn times(&self) -> &[NaiveDateTime] {
        &self.times
    }

    pub fn stamps(&self) -> &[TimeStamp] {
        &self.stamps
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn graph(&self) -> &RoadGraph {
        &self.graph
    }

    pub fn interval_minutes(&self) -> u32 {
        self.interval_minutes
    }

    /// One `[n, c]` row of observations.
    pub fn row(&self, t: usize) -> &[f64] {
        let stride = self.n() * self.conditions();
        &self.values.data()[t * stride..(t + 1) * stride]
    }

    /// Rows `[a, b)` as a `[b−a, n, c]` tensor.
    pub fn slice(&self, a: usize, b: usize) -> Result<Tensor> {
        let stride = self.n() * self.conditions();
        Tensor::new(
            vec![b - a, self.n(), self.conditions()],
            self.values.data()[a * stride..b * stride].to_vec(),
        )
    }
}

/// One training or evaluation sample: `p` observed steps and the `q`
/// following target steps with their prediction timestamps.
#[derive(Debug, Clone)]
pub struct SampleWindow {
    /// `[p, n, c]`, original units.
    pub input: Tensor,
    /// `[q, n, c]`, original units.
    pub target: Tensor,
    /// Timestamp of each target row.
    pub horizon_times: Vec<TimeStamp>,
    pub split: Split,
    /// Dataset row index of the first input step.
    pub start: usize,
}

/// Load a traffic series from `timestamp,v0,…,v{n−1}` CSV, with an
/// optional `src,dst,weight` adjacency CSV. Errors carry the file line
/// number (header is line 1).
pub fn load_dataset(
    speed_csv: &Path,
    adjacency_csv: Option<&Path>,
    interval_minutes: u32,
    directed: bool,
) -> Result<TrafficDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(speed_csv)
        .map_err(|e| Error::Load {
            line: 1,
            detail: format!("cannot read {}: {e}", speed_csv.display()),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Load {
            line: 1,
            detail: format!("unreadable header: {e}"),
        })?
        .clone();
    if headers.is_empty() || &headers[0] != "timestamp" {
        return Err(Error::Load {
            line: 1,
            detail: "first column must be 'timestamp'".to_string(),
        });
    }
    let n = headers.len() - 1;
    if n == 0 {
        return Err(Error::Load {
            line: 1,
            detail: "no vertex columns after 'timestamp'".to_string(),
        });
    }
    for (i, name) in headers.iter().skip(1).enumerate() {
        let expect = format!("v{i}");
        if name != expect {
            return Err(Error::Load {
                line: 1,
                detail: format!("column {} must be '{expect}', got '{name}'", i + 1),
            });
        }
    }

    let mut times: Vec<NaiveDateTime> = Vec::new();
    let mut data: Vec<f64> = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::Load {
            line,
            detail: format!("malformed row: {e}"),
        })?;
        if record.len() != n + 1 {
            return Err(Error::Load {
                line,
                detail: format!("expected {} fields, got {}", n + 1, record.len()),
            });
        }
        let t = NaiveDateTime::parse_from_str(&record[0], TIME_FORMAT).map_err(|e| {
            Error::Load {
                line,
                detail: format!("bad timestamp '{}': {e}", &record[0]),
            }
        })?;
        if let Some(&prev) = times.last() {
            if t <= prev {
                return Err(Error::Load {
                    line,
                    detail: format!(
                        "timestamp {} does not increase past {}",
                        t.format(TIME_FORMAT),
                        prev.format(TIME_FORMAT)
                    ),
                });
            }
            let step = Duration::minutes(interval_minutes as i64);
            if t != prev + step {
                let mut missing = Vec::new();
                let mut cursor = prev + step;
                while cursor < t && missing.len() < 5 {
                    missing.push(cursor.format(TIME_FORMAT).to_string());
                    cursor += step;
                }
                let mut listed = missing.join(", ");
                if cursor < t {
                    let _ = write!(listed, ", …");
                }
                return Err(Error::Load {
                    line,
                    detail: format!("gap in the timestamp grid; missing {listed}"),
                });
            }
        }
        times.push(t);
        for (v, field) in record.iter().skip(1).enumerate() {
            let value: f64 = field.parse().map_err(|_| Error::Load {
                line,
                detail: format!("value for v{v} is not a number: '{field}'"),
            })?;
            if !value.is_finite() {
                return Err(Error::Load {
                    line,
                    detail: format!("value for v{v} is not finite: '{field}'"),
                });
            }
            data.push(value);
        }
    }
    if times.is_empty() {
        return Err(Error::Load {
            line: 2,
            detail: "no data rows".to_string(),
        });
    }

    let graph = match adjacency_csv {
        Some(path) => load_adjacency(path, n, directed)?,
        None => RoadGraph::without_adjacency(n, directed)?,
    };
    let t_count = times.len();
    TrafficDataset::new(
        times,
        Tensor::new(vec![t_count, n, 1], data)?,
        graph,
        interval_minutes,
    )
}

fn load_adjacency(path: &Path, n: usize, directed: bool) -> Result<RoadGraph> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Load {
            line: 1,
            detail: format!("cannot read {}: {e}", path.display()),
        })?;
    let headers = reader.headers().map_err(|e| Error::Load {
        line: 1,
        detail: format!("unreadable adjacency header: {e}"),
    })?;
    if headers.iter().collect::<Vec<_>>() != ["src", "dst", "weight"] {
        return Err(Error::Load {
            line: 1,
            detail: "adjacency header must be 'src,dst,weight'".to_string(),
        });
    }
    let mut edges = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 2;
        let record = record.map_err(|e| Error::Load {
            line,
            detail: format!("malformed adjacency row: {e}"),
        })?;
        let field = |i: usize| -> Result<&str> {
            record.get(i).ok_or_else(|| Error::Load {
                line,
                detail: "adjacency row needs src, dst, weight".to_string(),
            })
        };
        let src: usize = field(0)?.parse().map_err(|_| Error::Load {
            line,
            detail: format!("bad src '{}'", &record[0]),
        })?;
        let dst: usize = field(1)?.parse().map_err(|_| Error::Load {
            line,
            detail: format!("bad dst '{}'", &record[1]),
        })?;
        let weight: f64 = field(2)?.parse().map_err(|_| Error::Load {
            line,
            detail: format!("bad weight '{}'", &record[2]),
        })?;
        if !weight.is_finite() {
            return Err(Error::Load {
                line,
                detail: format!("weight is not finite: '{}'", &record[2]),
            });
        }
        edges.push((src, dst, weight));
    }
    RoadGraph::from_edges(n, directed, &edges)
}

/// Write a dataset as a directory of `speed.csv`, `adjacency.csv`
/// (when the graph has one), and a `manifest.txt` key=value sidecar.
/// Values are formatted with the shortest round-trip representation,
/// so save → load reproduces the data bit-exactly.
pub fn save_dataset(ds: &TrafficDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let n = ds.n();
    if ds.conditions() != 1 {
        return Err(Error::config(
            "CSV serialization currently covers single-condition datasets",
        ));
    }

    let mut speed = String::new();
    speed.push_str("timestamp");
    for v in 0..n {
        let _ = write!(speed, ",v{v}");
    }
    speed.push('\n');
    for (t, time) in ds.times().iter().enumerate() {
        let _ = write!(speed, "{}", time.format(TIME_FORMAT));
        for &value in ds.row(t) {
            let _ = write!(speed, ",{value}");
        }
        speed.push('\n');
    }
    std::fs::write(dir.join("speed.csv"), speed)?;

    if let Some(adj) = ds.graph().adjacency() {
        let mut out = String::from("src,dst,weight\n");
        for i in 0..n {
            for j in 0..n {
                let w = adj[i * n + j];
                if w == 0.0 {
                    continue;
                }
                // Undirected graphs store each edge once.
                if !ds.graph().directed() && j < i {
                    continue;
                }
                let _ = writeln!(out, "{i},{j},{w}");
            }
        }
        std::fs::write(dir.join("adjacency.csv"), out)?;
    }

    let manifest = format!(
        "n={}\nconditions={}\ninterval_minutes={}\nunit=km/h\ndirected={}\n",
        n,
        ds.conditions(),
        ds.interval_minutes(),
        ds.graph().directed()
    );
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Load a dataset directory written by [`save_dataset`].
pub fn load_dataset_dir(dir: &Path) -> Result<TrafficDataset> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut n: Option<usize> = None;
    let mut interval: Option<u32> = None;
    let mut directed: Option<bool> = None;
    for (i, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Load {
            line: i + 1,
            detail: format!("manifest line is not key=value: '{line}'"),
        })?;
        let parse_err = |what: &str| Error::Load {
            line: i + 1,
            detail: format!("bad manifest {what}: '{value}'"),
        };
        match key.trim() {
            "n" => n = Some(value.trim().parse().map_err(|_| parse_err("n"))?),
            "interval_minutes" => {
                interval = Some(value.trim().parse().map_err(|_| parse_err("interval"))?)
            }
            "directed" => {
                directed = Some(value.trim().parse().map_err(|_| parse_err("directed"))?)
            }
            // unit and conditions are informational for now
            _ => {}
        }
    }
    let interval = interval.ok_or_else(|| Error::Load {
        line: 1,
        detail: "manifest missing interval_minutes".to_string(),
    })?;
    let directed = directed.unwrap_or(false);
    let adjacency_path = dir.join("adjacency.csv");
    let adjacency = adjacency_path.exists().then_some(adjacency_path);
    let ds = load_dataset(
        &dir.join("speed.csv"),
        adjacency.as_deref(),
        interval,
        directed,
    )?;
    if let Some(n) = n {
        if ds.n() != n {
            return Err(Error::Load {
                line: 1,
                detail: format!("manifest says n={n} but speed.csv has {} vertices", ds.n()),
            });
        }
    }
    Ok(ds)
}

/// Controls for the synthetic generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n: usize,
    pub days: u32,
    pub interval_minutes: u32,
    pub clusters: usize,
    /// Standard deviation of independent per-reading noise (km/h).
    pub noise_sigma: f64,
    /// Stationary standard deviation of a slowly decaying cluster-wide
    /// disturbance (km/h) — congestion episodes that persist for hours,
    /// which recent observations reveal but weekly averages cannot.
    pub ar_sigma: f64,
    pub seed: u64,
}

/// First generated timestamp (a Monday, so weekly structure starts at
/// a week boundary).
fn synth_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 3, 4)
        .expect("valid date")
        .and_hms_opt(0, 0, 0)
        .expect("valid time")
}

fn gaussian_bump(minute_of_day: f64, center: f64, width: f64) -> f64 {
    let z = (minute_of_day - center) / width;
    (-0.5 * z * z).exp()
}

/// Generate a desk-scale traffic series: every vertex in a cluster
/// shares a smooth daily profile with two rush-hour dips (8:00 and
/// 17:30), weekends flatten the dips, clusters differ in base speed,
/// commute balance, and rush-hour phase, vertices add small phase and
/// level jitter, and Gaussian noise is layered on top. `ar_sigma`
/// additionally overlays a first-order autoregressive cluster-wide
/// disturbance (two-hour half-life) so that part of the signal is
/// predictable only from recent readings. The adjacency is a ring of
/// densely connected clusters. Fully reproducible from the seed; with
/// `noise_sigma = ar_sigma = 0` the series is an exact function of
/// (vertex, slot-of-week), hence weekly periodic.
pub fn synthesize_dataset(cfg: &SynthConfig) -> Result<TrafficDataset> {
    if cfg.n < 2 {
        return Err(Error::config("synthetic dataset needs at least 2 vertices"));
    }
    if cfg.days == 0 {
        return Err(Error::config("synthetic dataset needs at least 1 day"));
    }
    if cfg.clusters == 0 || cfg.clusters > cfg.n {
        return Err(Error::config(
            "cluster count must be between 1 and the vertex count",
        ));
    }
    if cfg.interval_minutes == 0 || 1440 % cfg.interval_minutes != 0 {
        return Err(Error::config(
            "interval must be positive and divide a day (1440 minutes)",
        ));
    }
    if !(cfg.noise_sigma.is_finite() && cfg.noise_sigma >= 0.0) {
        return Err(Error::config("noise sigma must be finite and non-negative"));
    }
    if !(cfg.ar_sigma.is_finite() && cfg.ar_sigma >= 0.0) {
        return Err(Error::config(
            "disturbance sigma must be finite and non-negative",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cluster_of = |v: usize| v * cfg.clusters / cfg.n;

    struct ClusterProfile {
        base: f64,
        morning_depth: f64,
        evening_depth: f64,
        morning_width: f64,
        evening_width: f64,
        phase: f64,
    }
    let profiles: Vec<ClusterProfile> = (0..cfg.clusters)
        .map(|i| {
            // Alternate morning-heavy and evening-heavy clusters and
            // spread rush-hour phases so clusters decorrelate.
            let balance = if i % 2 == 0 { 1.0 } else { 0.45 };
            let spread = if cfg.clusters > 1 {
                (i as f64 / (cfg.clusters - 1) as f64 - 0.5) * 150.0
            } else {
                0.0
            };
            ClusterProfile {
                base: rng.gen_range(55.0..75.0),
                morning_depth: rng.gen_range(24.0..32.0) * balance,
                evening_depth: rng.gen_range(20.0..28.0) * (1.45 - balance),
                morning_width: rng.gen_range(55.0..75.0),
                evening_width: rng.gen_range(65.0..95.0),
                phase: spread + rng.gen_range(-10.0..10.0),
            }
        })
        .collect();

    let vertex_phase: Vec<f64> = (0..cfg.n).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let vertex_level: Vec<f64> = (0..cfg.n).map(|_| rng.gen_range(-1.5..1.5)).collect();

    let rows_per_day = (1440 / cfg.interval_minutes) as usize;
    let t_count = rows_per_day * cfg.days as usize;
    let start = synth_start();
    let step = Duration::minutes(cfg.interval_minutes as i64);
    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).expect("validated sigma"))
    } else {
        None
    };

    // Cluster-wide congestion episodes: AR(1) with a two-hour
    // half-life, drawn from a side stream so the main stream (and
    // hence every other generated value) is independent of `ar_sigma`.
    let disturbances: Vec<Vec<f64>> = if cfg.ar_sigma > 0.0 {
        let mut ar_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        let phi = 0.5f64.powf(cfg.interval_minutes as f64 / 120.0);
        let innovation = Normal::new(0.0, cfg.ar_sigma * (1.0 - phi * phi).sqrt())
            .expect("validated sigma");
        let start_dist = Normal::new(0.0, cfg.ar_sigma).expect("validated sigma");
        (0..cfg.clusters)
            .map(|_| {
                let mut path = Vec::with_capacity(t_count);
                let mut level: f64 = start_dist.sample(&mut ar_rng);
                for _ in 0..t_count {
                    path.push(level);
                    level = phi * level + innovation.sample(&mut ar_rng);
                }
                path
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut times = Vec::with_capacity(t_count);
    let mut data = Vec::with_capacity(t_count * cfg.n);
    let mut time = start;
    for t in 0..t_count {
        let minute = (time.hour() * 60 + time.minute()) as f64;
        let weekend = matches!(time.weekday().num_days_from_sunday(), 0 | 6);
        let (dip_scale, base_shift) = if weekend { (0.35, 5.0) } else { (1.0, 0.0) };
        for v in 0..cfg.n {
            let cluster = cluster_of(v);
            let p = &profiles[cluster];
            let phase = p.phase + vertex_phase[v];
            let mut value = p.base + base_shift + vertex_level[v]
                - dip_scale
                    * (p.morning_depth * gaussian_bump(minute, 480.0 + phase, p.morning_width)
                        + p.evening_depth
                            * gaussian_bump(minute, 1050.0 + phase, p.evening_width));
            if let Some(path) = disturbances.get(cluster) {
                value += path[t];
            }
            if let Some(dist) = &noise {
                value += dist.sample(&mut rng);
            }
            data.push(value.max(3.0));
        }
        times.push(time);
        time += step;
    }

    // Ring of clusters: complete within a cluster, one bridge edge to
    // the next cluster around the ring.
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..cfg.n {
        for j in (i + 1)..cfg.n {
            if cluster_of(i) == cluster_of(j) {
                edges.push((i, j, 1.0));
            }
        }
    }
    if cfg.clusters > 1 {
        let representative = |cl: usize| (0..cfg.n).find(|&v| cluster_of(v) == cl).expect("non-empty cluster");
        for cl in 0..cfg.clusters {
            let next = (cl + 1) % cfg.clusters;
            if next == cl {
                continue;
            }
            let (a, b) = (representative(cl), representative(next));
            if a != b && !edges.iter().any(|&(x, y, _)| (x, y) == (a.min(b), a.max(b))) {
                edges.push((a.min(b), a.max(b), 0.3));
            }
        }
    }
    let graph = RoadGraph::from_edges(cfg.n, false, &edges)?;

    TrafficDataset::new(
        times,
        Tensor::new(vec![t_count, cfg.n, 1], data)?,
        graph,
        cfg.interval_minutes,
    )
}

/// Split boundaries on the timestamp axis: `[0, a)` train, `[a, b)`
/// validation, `[b, T)` test. A small epsilon compensates for the
/// float representation of ratios like 0.7.
pub fn split_bounds(t_count: usize, split: (f64, f64, f64)) -> Result<(usize, usize)> {
    let (tr, va, te) = split;
    if !(tr > 0.0 && va > 0.0 && te > 0.0) {
        return Err(Error::config("split fractions must all be positive"));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must sum to 1"));
    }
    let a = ((t_count as f64) * tr + 1e-9).floor() as usize;
    let b = ((t_count as f64) * (tr + va) + 1e-9).floor() as usize;
    Ok((a, b))
}

/// Cut the dataset into time-contiguous train/validation/test ranges
/// and build stride-1 sliding windows that never straddle a boundary,
/// so no target of one split leaks into another.
pub fn make_windows(
    ds: &TrafficDataset,
    p: usize,
    q: usize,
    split: (f64, f64, f64),
) -> Result<(Vec<SampleWindow>, Vec<SampleWindow>, Vec<SampleWindow>)> {
    if p == 0 || q == 0 {
        return Err(Error::config("window lengths p and q must be positive"));
    }
    let (a, b) = split_bounds(ds.len(), split)?;
    let need = p + q;
    let ranges = [
        (Split::Train, 0usize, a),
        (Split::Val, a, b),
        (Split::Test, b, ds.len()),
    ];
    let mut out: Vec<Vec<SampleWindow>> = vec![Vec::new(), Vec::new(), Vec::new()];
    for (k, &(split, lo, hi)) in ranges.iter().enumerate() {
        let len = hi - lo;
        if len < need {
            return Err(Error::config(format!(
                "{split:?} split has {len} timestamps but one window needs p+q = {need}"
            )));
        }
        for s in lo..=(hi - need) {
            out[k].push(SampleWindow {
                input: ds.slice(s, s + p)?,
                target: ds.slice(s + p, s + need)?,
                horizon_times: ds.stamps()[s + p..s + need].to_vec(),
                split,
                start: s,
            });
        }
    }
    let mut it = out.into_iter();
    Ok((
        it.next().expect("train"),
        it.next().expect("val"),
        it.next().expect("test"),
    ))
}
