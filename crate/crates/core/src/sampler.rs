//! Random node-budget partitions, induced subgraph propagation, and the
//! sampled-aggregation bias diagnostic.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{renormalize, Graph};
use crate::linalg::{DenseMatrix, SparseSymMatrix};
use crate::nn::LayerParams;

/// One epoch's disjoint batches covering `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPartition {
    pub batches: Vec<Vec<usize>>,
    pub budget: usize,
    pub seed: u64,
}

impl EpochPartition {
    /// Vertex order obtained by concatenating the batches.
    pub fn order(&self) -> Vec<usize> {
        self.batches.concat()
    }
}

fn check_budget(n: usize, m: usize) -> Result<()> {
    if m == 0 || m > n {
        return Err(Error::contract(format!("batch budget must satisfy 1 <= m <= n; m={m}, n={n}")));
    }
    Ok(())
}

/// Shuffles `0..n` with `rng` and cuts it into chunks of `m`.
pub fn partition_with_rng<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    check_budget(n, m)?;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    Ok(perm.chunks(m).map(<[usize]>::to_vec).collect())
}

pub fn partition_epoch(n: usize, m: usize, seed: u64) -> Result<EpochPartition> {
    let batches = partition_with_rng(n, m, &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(EpochPartition {
        batches,
        budget: m,
        seed,
    })
}

/// Every equally likely partition of `0..n` into chunks of `m`, one per
/// permutation (so duplicates carry their multiplicity).
pub fn enumerate_partitions(n: usize, m: usize) -> Result<Vec<Vec<Vec<usize>>>> {
    check_budget(n, m)?;
    if n > 9 {
        return Err(Error::contract(format!("refusing to enumerate {n}! permutations")));
    }
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    permute(&mut perm, 0, &mut |p| out.push(p.chunks(m).map(<[usize]>::to_vec).collect()));
    Ok(out)
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

/// A batch's vertices and its renormalized induced propagation matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SubgraphBatch {
    pub node_ids: Vec<usize>,
    pub prop: SparseSymMatrix,
}

/// Restricts `g` to `node_ids` (local index = position in `node_ids`), adds
/// self-loops and renormalizes with the subgraph's own degrees.
pub fn induce_subgraph(g: &Graph, node_ids: &[usize]) -> Result<SubgraphBatch> {
    let mut local = HashMap::with_capacity(node_ids.len());
    for (i, &v) in node_ids.iter().enumerate() {
        if v >= g.n() {
            return Err(Error::contract(format!("vertex {v} outside graph of {} vertices", g.n())));
        }
        if local.insert(v, i).is_some() {
            return Err(Error::contract(format!("vertex {v} listed twice in batch")));
        }
    }
    let mut entries = Vec::new();
    for (i, &v) in node_ids.iter().enumerate() {
        for (u, w) in g.neighbors(v) {
            if let Some(&j) = local.get(&u) {
                if i < j {
                    entries.push((i, j, w));
                }
            }
        }
    }
    entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    let adjacency = SparseSymMatrix::from_sorted_upper(node_ids.len(), entries);
    Ok(SubgraphBatch {
        node_ids: node_ids.to_vec(),
        prop: renormalize(&adjacency),
    })
}

/// Puts per-batch output rows back into vertex order.
pub fn reassemble(partition: &EpochPartition, outputs: &[DenseMatrix]) -> Result<DenseMatrix> {
    if outputs.len() != partition.batches.len() {
        return Err(Error::contract(format!(
            "{} batch outputs for {} batches",
            outputs.len(),
            partition.batches.len()
        )));
    }
    let n: usize = partition.batches.iter().map(Vec::len).sum();
    let cols = outputs.first().map_or(0, DenseMatrix::cols);
    let mut out = DenseMatrix::zeros(n, cols);
    for (batch, o) in partition.batches.iter().zip(outputs) {
        if o.rows() != batch.len() || o.cols() != cols {
            return Err(Error::shape("reassemble", format!("batch of {}", batch.len()), o.shape_str()));
        }
        for (r, &v) in batch.iter().enumerate() {
            out.row_mut(v).copy_from_slice(o.row(r));
        }
    }
    Ok(out)
}

/// Normalization constants `e_uv` dividing sampled propagation weights.
#[derive(Clone, Debug, PartialEq)]
pub enum Normalization {
    /// `e ≡ 1`, the plain batch-restricted aggregation used for training.
    Unit,
    /// `e_uv = C_uv / C_v`, stored on the sparsity pattern of the propagation
    /// matrix (diagonal included).
    CoBatch(SparseSymMatrix),
}

impl Normalization {
    fn get(&self, u: usize, v: usize) -> f64 {
        match self {
            Normalization::Unit => 1.0,
            Normalization::CoBatch(e) => e.get(u, v),
        }
    }
}

/// `Σ_{u ∈ batch} prop_uv / e_uv · h_u · W + b` with `prop` the full-graph
/// propagation matrix.
pub fn node_estimate(
    v: usize,
    batch: &[usize],
    prop: &SparseSymMatrix,
    h_prev: &DenseMatrix,
    p: &LayerParams,
    e: &Normalization,
) -> Result<Vec<f64>> {
    if !batch.contains(&v) {
        return Err(Error::contract(format!("vertex {v} not in its batch")));
    }
    if h_prev.rows() != prop.dim() || h_prev.cols() != p.weights.rows() {
        return Err(Error::shape(
            "node_estimate",
            format!("features {}", h_prev.shape_str()),
            format!("propagation {0}x{0}, weights {1}", prop.dim(), p.weights.shape_str()),
        ));
    }
    let mut agg = vec![0.0; h_prev.cols()];
    for &u in batch {
        let w = prop.get(u, v);
        if w == 0.0 {
            continue;
        }
        let e_uv = e.get(u, v);
        if e_uv <= 0.0 {
            return Err(Error::contract(format!("normalization e({u}, {v}) is zero")));
        }
        for (a, h) in agg.iter_mut().zip(h_prev.row(u)) {
            *a += w / e_uv * h;
        }
    }
    let mut out = DenseMatrix::new(1, agg.len(), agg)?.matmul(&p.weights)?;
    out.add_row_broadcast(&p.bias)?;
    Ok(out.into_data())
}

/// Per-vertex Monte-Carlo statistics of the sampled estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasRow {
    pub vertex_id: usize,
    pub target: f64,
    pub mc_mean: f64,
    pub bias: f64,
    pub variance: f64,
    pub stderr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasReport {
    pub trials: usize,
    pub rows: Vec<BiasRow>,
}

pub const BIAS_CSV_HEADER: &str = "vertex_id,target,mc_mean,bias,stderr";

impl BiasReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{BIAS_CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(s, "{},{:.17e},{:.17e},{:.17e},{:.17e}", r.vertex_id, r.target, r.mc_mean, r.bias, r.stderr)
                .expect("string write");
        }
        s
    }
}

/// Bias reports for the unit and the co-batch normalizations.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasDiagnostic {
    pub unit: BiasReport,
    pub co_batch: BiasReport,
    /// Estimated `e_uv` used by the co-batch report.
    pub normalization: Normalization,
}

/// Scalar aggregation `Σ_{u ∈ batch(v)} prop_uv / e_uv · h_u` for all vertices
/// of one partition (the estimator with `W = [[1]]`, `b = 0`).
fn sampled_aggregation(
    prop: &SparseSymMatrix,
    signal: &[f64],
    batch_of: &[usize],
    e: &Normalization,
    out: &mut [f64],
) -> Result<()> {
    for (v, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (u, w) in prop.row(v) {
            if batch_of[u] != batch_of[v] {
                continue;
            }
            let e_uv = e.get(u, v);
            if e_uv <= 0.0 {
                return Err(Error::contract(format!(
                    "normalization e({u}, {v}) is zero; increase trials"
                )));
            }
            acc += w / e_uv * signal[u];
        }
        *o = acc;
    }
    Ok(())
}

fn batch_index(n: usize, batches: &[Vec<usize>]) -> Vec<usize> {
    let mut batch_of = vec![0; n];
    for (b, batch) in batches.iter().enumerate() {
        for &v in batch {
            batch_of[v] = b;
        }
    }
    batch_of
}

fn monte_carlo(
    g: &Graph,
    m: usize,
    trials: usize,
    rng: &mut ChaCha8Rng,
    signal: &[f64],
    e: &Normalization,
) -> Result<BiasReport> {
    let n = g.n();
    let prop = g.prop();
    let target: Vec<f64> = (0..n).map(|v| prop.row(v).map(|(u, w)| w * signal[u]).sum()).collect();
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut z = vec![0.0; n];
    for t in 0..trials {
        let batches = partition_with_rng(n, m, rng)?;
        sampled_aggregation(prop, signal, &batch_index(n, &batches), e, &mut z)?;
        let k = (t + 1) as f64;
        for v in 0..n {
            let d = z[v] - mean[v];
            mean[v] += d / k;
            m2[v] += d * (z[v] - mean[v]);
        }
    }
    let rows = (0..n)
        .map(|v| {
            let variance = if trials > 1 { m2[v] / (trials - 1) as f64 } else { 0.0 };
            BiasRow {
                vertex_id: v,
                target: target[v],
                mc_mean: mean[v],
                bias: mean[v] - target[v],
                variance,
                stderr: (variance / trials as f64).sqrt(),
            }
        })
        .collect();
    Ok(BiasReport { trials, rows })
}

/// Co-batch frequencies `C_uv / C_v` over `trials` partitions, on the
/// sparsity pattern of `prop`. Every vertex is in every partition, so
/// `C_v = trials` and `e_vv = 1`.
pub fn estimate_co_batch(g: &Graph, m: usize, trials: usize, rng: &mut ChaCha8Rng) -> Result<Normalization> {
    let n = g.n();
    let prop = g.prop();
    let mut counts = vec![0u64; prop.entries().len()];
    for _ in 0..trials {
        let batch_of = batch_index(n, &partition_with_rng(n, m, rng)?);
        for (slot, &(u, v, _)) in prop.entries().iter().enumerate() {
            if batch_of[u] == batch_of[v] {
                counts[slot] += 1;
            }
        }
    }
    let entries: Vec<(usize, usize, f64)> = prop
        .entries()
        .iter()
        .zip(&counts)
        .map(|(&(u, v, _), &c)| (u, v, c as f64 / trials as f64))
        .collect();
    Ok(Normalization::CoBatch(SparseSymMatrix::from_sorted_upper(n, entries)))
}

/// Exact co-batch probabilities from [`enumerate_partitions`].
pub fn exact_co_batch(g: &Graph, m: usize) -> Result<Normalization> {
    let parts = enumerate_partitions(g.n(), m)?;
    let prop = g.prop();
    let entries = prop
        .entries()
        .iter()
        .map(|&(u, v, _)| {
            let hits = parts
                .iter()
                .filter(|p| p.iter().any(|b| b.contains(&u) && b.contains(&v)))
                .count();
            (u, v, hits as f64 / parts.len() as f64)
        })
        .collect();
    Ok(Normalization::CoBatch(SparseSymMatrix::from_sorted_upper(g.n(), entries)))
}

/// Expectation of the scalar estimator over every equally likely partition.
pub fn enumerated_expectation(g: &Graph, m: usize, signal: &[f64], e: &Normalization) -> Result<Vec<f64>> {
    let n = g.n();
    let parts = enumerate_partitions(n, m)?;
    let mut acc = vec![0.0; n];
    let mut z = vec![0.0; n];
    for p in &parts {
        sampled_aggregation(g.prop(), signal, &batch_index(n, p), e, &mut z)?;
        for (a, v) in acc.iter_mut().zip(&z) {
            *a += v;
        }
    }
    Ok(acc.into_iter().map(|a| a / parts.len() as f64).collect())
}

/// Monte-Carlo check of the sampled aggregation against the full-graph
/// target for a scalar `signal`, with `W = [[1]]` and `b = 0`.
///
/// The co-batch constants are estimated from one trial stream and the
/// estimator is evaluated on a second, independent stream of the same length.
pub fn estimator_bias_diagnostic(
    g: &Graph,
    m: usize,
    trials: usize,
    seed: u64,
    signal: &[f64],
) -> Result<BiasDiagnostic> {
    if trials == 0 {
        return Err(Error::contract("bias diagnostic needs at least one trial"));
    }
    if signal.len() != g.n() {
        return Err(Error::shape("estimator_bias_diagnostic", format!("{} vertices", g.n()), format!("{} signal values", signal.len())));
    }
    check_budget(g.n(), m)?;
    let mut count_rng = ChaCha8Rng::seed_from_u64(seed);
    count_rng.set_stream(1);
    let normalization = estimate_co_batch(g, m, trials, &mut count_rng)?;
    let mut unit_rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = monte_carlo(g, m, trials, &mut unit_rng, signal, &Normalization::Unit)?;
    let mut co_rng = ChaCha8Rng::seed_from_u64(seed);
    co_rng.set_stream(2);
    let co_batch = monte_carlo(g, m, trials, &mut co_rng, signal, &normalization)?;
    Ok(BiasDiagnostic {
        unit,
        co_batch,
        normalization,
    })
}
