//! Wall-clock scaling of one graph-convolution training pass against N.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{DenseMatrix, SparseSymMatrix};
use crate::nn::{graph_conv_backward, graph_conv_forward, LayerGrads, LayerParams, Mode};
use crate::registry::{Named, Registry};
use crate::sampler::{induce_subgraph, partition_with_rng};

/// Timings under this many seconds are considered below timer resolution.
pub const MIN_SECONDS: f64 = 1e-3;

pub const CSV_HEADER: &str = "mode,n,d,p,m,repeat,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchPoint {
    pub n: usize,
    pub d: usize,
    pub p: usize,
    pub m: usize,
}

/// A prepared, repeatable unit of timed work.
pub type Runner = Box<dyn FnMut() -> Result<()> + Send>;

/// Something whose cost is measured as a function of N.
pub trait Workload: Named + Send + Sync {
    /// Builds inputs for `pt` (untimed) and returns the timed pass.
    fn prepare(&self, pt: BenchPoint, seed: u64, parallel: bool) -> Result<Runner>;
}

fn random_dense(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// One forward and backward graph-convolution pass.
fn gcn_pass<P: crate::linalg::Operator + ?Sized>(prop: &P, x: &DenseMatrix, layer: &LayerParams, g: &DenseMatrix) -> Result<LayerGrads> {
    let (_, tape) = graph_conv_forward(x, prop, layer, Mode::Train)?;
    Ok(graph_conv_backward(prop, &tape, layer, g)?.1)
}

/// Sparse graph where every vertex links to `degree` random others.
fn random_sparse_graph(n: usize, degree: usize, rng: &mut ChaCha8Rng) -> Result<Graph> {
    let mut edges = BTreeMap::new();
    for i in 0..n {
        for _ in 0..degree.min(n - 1) {
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            edges.insert((i.min(j), i.max(j)), rng.random_range(0.1..1.0));
        }
    }
    let adj = SparseSymMatrix::from_sorted_upper(n, edges.into_iter().map(|((i, j), w)| (i, j, w)).collect());
    Graph::from_adjacency(adj, degree, 1.0)
}

const SPARSE_DEGREE: usize = 10;

/// Full graph with a dense propagation matrix, every entry non-zero.
struct FullDense;

impl Named for FullDense {
    fn name(&self) -> &'static str {
        "full-gcn-dense"
    }
}

impl Workload for FullDense {
    fn prepare(&self, pt: BenchPoint, seed: u64, _parallel: bool) -> Result<Runner> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = pt.n;
        let mut a = DenseMatrix::zeros(n, n);
        for i in 0..n {
            a.set(i, i, 1.0);
            for j in i + 1..n {
                let w = rng.random_range(0.01..1.0);
                a.set(i, j, w);
                a.set(j, i, w);
            }
        }
        let deg = a.row_sums();
        let prop = DenseMatrix::from_fn(n, n, |i, j| a.get(i, j) / (deg[i] * deg[j]).sqrt());
        let x = random_dense(n, pt.d, &mut rng);
        let g = random_dense(n, pt.p, &mut rng);
        let layer = LayerParams::graph_conv(pt.d, pt.p, &mut rng);
        Ok(Box::new(move || gcn_pass(&prop, &x, &layer, &g).map(|_| ())))
    }
}

/// Full graph with a sparse propagation matrix.
struct FullSparse;

impl Named for FullSparse {
    fn name(&self) -> &'static str {
        "full-gcn-sparse"
    }
}

impl Workload for FullSparse {
    fn prepare(&self, pt: BenchPoint, seed: u64, _parallel: bool) -> Result<Runner> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_sparse_graph(pt.n, SPARSE_DEGREE, &mut rng)?;
        let x = random_dense(pt.n, pt.d, &mut rng);
        let g = random_dense(pt.n, pt.p, &mut rng);
        let layer = LayerParams::graph_conv(pt.d, pt.p, &mut rng);
        Ok(Box::new(move || gcn_pass(graph.prop(), &x, &layer, &g).map(|_| ())))
    }
}

/// One epoch of sampled subgraph batches: partition, induce and a
/// forward/backward pass per batch.
struct MiniBatch;

impl Named for MiniBatch {
    fn name(&self) -> &'static str {
        "minigcn"
    }
}

impl Workload for MiniBatch {
    fn prepare(&self, pt: BenchPoint, seed: u64, parallel: bool) -> Result<Runner> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let graph = random_sparse_graph(pt.n, SPARSE_DEGREE, &mut rng)?;
        let x = random_dense(pt.n, pt.d, &mut rng);
        let g = random_dense(pt.n, pt.p, &mut rng);
        let layer = LayerParams::graph_conv(pt.d, pt.p, &mut rng);
        let m = pt.m;
        Ok(Box::new(move || {
            let batches = partition_with_rng(graph.n(), m, &mut rng)?;
            let one = |ids: &Vec<usize>| -> Result<LayerGrads> {
                let sub = induce_subgraph(&graph, ids)?;
                gcn_pass(&sub.prop, &x.select_rows(ids), &layer, &g.select_rows(ids))
            };
            let grads: Vec<LayerGrads> = if parallel {
                batches.par_iter().map(one).collect::<Result<_>>()?
            } else {
                batches.iter().map(one).collect::<Result<_>>()?
            };
            // Sum in batch order so the result does not depend on scheduling.
            let mut total = layer.zero_grads();
            for gr in &grads {
                for (t, v) in total.weights.data_mut().iter_mut().zip(gr.weights.data()) {
                    *t += v;
                }
            }
            std::hint::black_box(total);
            Ok(())
        }))
    }
}

pub fn workload_registry() -> Registry<dyn Workload> {
    let mut r: Registry<dyn Workload> = Registry::new("benchmark mode");
    r.register(Arc::new(FullDense));
    r.register(Arc::new(FullSparse));
    r.register(Arc::new(MiniBatch));
    r
}

/// Runs `runner` `repeats` times and returns each wall time in seconds.
pub fn measure(runner: &mut Runner, repeats: usize) -> Result<Vec<f64>> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let start = Instant::now();
        runner()?;
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(times)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::contract("slope needs at least 2 points"));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::contract("slope needs at least 2 distinct x values"));
    }
    Ok(sxy / sxx)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingPoint {
    pub n: usize,
    pub seconds: Vec<f64>,
    pub median: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingReport {
    pub mode: String,
    pub d: usize,
    pub p: usize,
    pub m: usize,
    pub points: Vec<ScalingPoint>,
    pub slope: f64,
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingSpec {
    pub n_grid: Vec<usize>,
    pub d: usize,
    pub p: usize,
    pub m: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Use the global thread pool instead of a single thread.
    pub parallel: bool,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        Self {
            n_grid: vec![256, 512, 1024, 2048],
            d: 200,
            p: 128,
            m: 32,
            repeats: 5,
            seed: 0,
            parallel: false,
        }
    }
}

pub const DEFAULT_MODES: [&str; 3] = ["full-gcn-dense", "full-gcn-sparse", "minigcn"];

/// Times `mode` at every N of the grid and fits the log-log slope of the
/// median times.
pub fn run_scaling(mode: &str, spec: &ScalingSpec) -> Result<ScalingReport> {
    let workload = workload_registry().get(mode)?;
    if spec.n_grid.len() < 3 {
        return Err(Error::config(format!("n grid needs at least 3 points, got {}", spec.n_grid.len())));
    }
    if spec.n_grid.windows(2).any(|w| w[0] >= w[1]) || spec.n_grid[0] < 2 {
        return Err(Error::config("n grid must be strictly increasing and start at 2 or more"));
    }
    if spec.repeats < 3 {
        return Err(Error::config(format!("repeats must be at least 3, got {}", spec.repeats)));
    }
    if spec.d == 0 || spec.p == 0 || spec.m == 0 {
        return Err(Error::config("d, p and m must be positive"));
    }
    let body = || -> Result<ScalingReport> {
        let mut points = Vec::with_capacity(spec.n_grid.len());
        for (i, &n) in spec.n_grid.iter().enumerate() {
            let pt = BenchPoint { n, d: spec.d, p: spec.p, m: spec.m.min(n) };
            let mut runner = workload.prepare(pt, spec.seed.wrapping_add(i as u64), spec.parallel)?;
            // Warm-up pass, untimed.
            runner()?;
            let seconds = measure(&mut runner, spec.repeats)?;
            let med = median(&seconds);
            if med < MIN_SECONDS {
                return Err(Error::WidenGrid { n, seconds: med });
            }
            log::info!("bench {mode} n={n} median={med:.4}s");
            points.push(ScalingPoint { n, seconds, median: med });
        }
        let slope = log_log_slope(&points.iter().map(|p| (p.n as f64, p.median)).collect::<Vec<_>>())?;
        Ok(ScalingReport {
            mode: mode.to_string(),
            d: spec.d,
            p: spec.p,
            m: spec.m,
            points,
            slope,
            parallel: spec.parallel,
        })
    };
    if spec.parallel {
        body()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        pool.install(body)
    }
}

/// Raw timings, one row per repeat.
pub fn reports_csv(reports: &[ScalingReport]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in reports {
        for pt in &r.points {
            for (i, t) in pt.seconds.iter().enumerate() {
                writeln!(s, "{},{},{},{},{},{},{:e}", r.mode, pt.n, r.d, r.p, r.m, i, t).expect("string write");
            }
        }
    }
    s
}

/// Slopes recomputed from [`reports_csv`] output, keyed by mode.
pub fn slopes_from_csv(text: &str) -> Result<BTreeMap<String, f64>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::format(0, "missing benchmark CSV header"));
    }
    let mut raw: BTreeMap<String, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    let mut offset = CSV_HEADER.len() as u64 + 1;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::format(offset, format!("malformed benchmark row {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let n: usize = f[1].parse().map_err(|_| bad())?;
        let t: f64 = f[6].parse().map_err(|_| bad())?;
        raw.entry(f[0].to_string()).or_default().entry(n).or_default().push(t);
        offset += line.len() as u64 + 1;
    }
    raw.into_iter()
        .map(|(mode, by_n)| {
            let pts: Vec<(f64, f64)> = by_n.iter().map(|(&n, ts)| (n as f64, median(ts))).collect();
            Ok((mode, log_log_slope(&pts)?))
        })
        .collect()
}

/// Slopes plus machine and threading details.
pub fn summary(reports: &[ScalingReport]) -> String {
    let mut s = String::new();
    let threads = match reports.first().map(|r| r.parallel) {
        Some(true) => format!("parallel ({} threads)", rayon::current_num_threads()),
        _ => "single-threaded".to_string(),
    };
    writeln!(s, "machine: {} {}, {} logical cpus", std::env::consts::OS, std::env::consts::ARCH, std::thread::available_parallelism().map_or(1, |n| n.get())).expect("string write");
    writeln!(s, "execution: {threads}").expect("string write");
    for r in reports {
        let grid: Vec<String> = r.points.iter().map(|p| format!("{}:{:.4}s", p.n, p.median)).collect();
        writeln!(s, "{} d={} p={} m={} slope={:.3} [{}]", r.mode, r.d, r.p, r.m, r.slope, grid.join(" ")).expect("string write");
    }
    s
}
