//! End-to-end training, evaluation, map rendering and the (k, σ) sweep.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{extract_patches, normalize_bands, LabelGrid, SpectralCube, SplitSpec};
use crate::error::{Error, Result};
use crate::graph::build_knn_rbf_graph;
use crate::linalg::SparseSymMatrix;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::model::{build, Batch, GraphInput, Model, ModelConfig, PatchInput};
use crate::nn::{load_checkpoint, save_checkpoint, Mode};
use crate::optim::{adam_step_layers, schedule_lr, AdamState, LrPolicy};
use crate::sampler::{estimator_bias_diagnostic, induce_subgraph, partition_with_rng, BiasDiagnostic};

/// A cube with band-normalized values, its labels and a validated split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub cube: SpectralCube,
    pub labels: LabelGrid,
    pub split: SplitSpec,
}

impl Dataset {
    /// Normalizes `cube` and checks that labels and split fit it.
    pub fn new(cube: &SpectralCube, labels: LabelGrid, split: SplitSpec) -> Result<Dataset> {
        if (labels.height, labels.width) != (cube.height(), cube.width()) {
            return Err(Error::shape(
                "dataset",
                format!("cube {}x{}", cube.height(), cube.width()),
                format!("labels {}x{}", labels.height, labels.width),
            ));
        }
        split.validate(&labels)?;
        Ok(Dataset {
            cube: normalize_bands(cube),
            labels,
            split,
        })
    }

    pub fn load(cfg: &RunConfig) -> Result<Dataset> {
        let p = &cfg.paths;
        let cube = crate::data::load_cube(p.require("cube")?)?;
        let labels = crate::data::load_labels(p.require("labels")?)?;
        let split = crate::data::load_split(p.require("split")?)?;
        Dataset::new(&cube, labels, split)
    }

    /// Highest class id in the label grid.
    pub fn classes(&self) -> usize {
        self.labels.max_class() as usize
    }
}

/// `cfg.model` with zero band/class counts filled from `data`; explicit
/// counts that disagree with the data are a config error.
pub fn resolve_model_config(cfg: &RunConfig, data: &Dataset) -> Result<ModelConfig> {
    let mut m = cfg.model.clone();
    check_or_fill("model.input_bands", &mut m.input_bands, data.cube.bands())?;
    check_or_fill("model.classes", &mut m.classes, data.classes())?;
    Ok(m)
}

fn check_or_fill(name: &str, slot: &mut usize, actual: usize) -> Result<()> {
    if *slot == 0 {
        *slot = actual;
    } else if *slot != actual {
        return Err(Error::config(format!("{name} is {} but the dataset has {actual}", *slot)));
    }
    Ok(())
}

/// Assembles model inputs for `pixels` using a KNN graph built over exactly
/// those pixels.
pub fn inference_batch(model_cfg: &ModelConfig, cfg: &RunConfig, cube: &SpectralCube, pixels: &[usize]) -> Result<Batch> {
    let arch = crate::model::architecture_registry().get(&model_cfg.architecture)?;
    let mut batch = Batch::default();
    if arch.gcn_branch() {
        let features = cube.features(pixels);
        let prop = local_propagation(&features, cfg)?;
        batch.graph = Some(GraphInput {
            pixels: pixels.to_vec(),
            features,
            prop,
        });
    }
    if arch.cnn_branch() {
        batch.patches = Some(PatchInput {
            pixels: pixels.to_vec(),
            patches: extract_patches(cube, pixels, model_cfg.patch_size)?,
        });
    }
    Ok(batch)
}

/// Renormalized propagation of a KNN graph over the rows of `features`, with
/// `k` capped at `n − 1`. A single vertex propagates to itself.
fn local_propagation(features: &crate::linalg::DenseMatrix, cfg: &RunConfig) -> Result<SparseSymMatrix> {
    let n = features.rows();
    if n == 1 {
        return Ok(SparseSymMatrix::identity(1));
    }
    let g = build_knn_rbf_graph(features, cfg.graph.k.min(n - 1), cfg.graph.sigma)?;
    Ok(g.prop().clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Mean `l2 · Σ‖W‖²` over the epoch's batches, not part of the CSV.
    pub l2_term: f64,
    /// Percent of training samples classified correctly during the epoch.
    pub train_oa: f64,
}

pub fn training_log_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,lr,loss,train_oa\n");
    for e in log {
        writeln!(s, "{},{},{},{}", e.epoch, e.lr, e.loss, e.train_oa).expect("string write");
    }
    s
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub log: Vec<EpochLog>,
}

/// Trains on the split's training pixels. The graph is built over training
/// pixels only; sampled architectures repartition it every epoch.
pub fn train(cfg: &RunConfig, data: &Dataset) -> Result<Trained> {
    cfg.validate()?;
    let model_cfg = resolve_model_config(cfg, data)?;
    let (pixels, classes) = data.split.train_pixels();
    if pixels.len() < 2 {
        return Err(Error::contract(format!("training needs at least 2 labeled pixels, got {}", pixels.len())));
    }
    let targets: Vec<usize> = classes.iter().map(|&c| c as usize - 1).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = build(&model_cfg, &mut rng)?;
    model.set_bn_momentum(cfg.train.bn_momentum);
    let arch = crate::model::architecture_registry().get(&model_cfg.architecture)?;

    let n = pixels.len();
    let features = data.cube.features(&pixels);
    let graph = if arch.gcn_branch() {
        Some(build_knn_rbf_graph(&features, cfg.graph.k.min(n - 1), cfg.graph.sigma)?)
    } else {
        None
    };
    let patches = if arch.cnn_branch() {
        Some(extract_patches(&data.cube, &pixels, model_cfg.patch_size)?)
    } else {
        None
    };

    let mut adam = AdamState::for_layers(&model.layers);
    let policy = LrPolicy::new(cfg.train.base_lr, cfg.train.epochs);
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for epoch in 0..cfg.train.epochs {
        let lr = schedule_lr(&policy, epoch)?;
        let batches = if arch.full_batch() {
            vec![(0..n).collect()]
        } else {
            partition_with_rng(n, cfg.train.batch, &mut rng)?
        };
        let (mut loss_sum, mut l2_sum, mut correct, mut seen, mut steps) = (0.0, 0.0, 0usize, 0usize, 0usize);
        for ids in batches {
            // Batch norm needs two rows for a batch variance.
            if ids.len() < 2 {
                continue;
            }
            let mut batch = Batch::default();
            if let Some(g) = &graph {
                let prop = if ids.len() == n && arch.full_batch() {
                    g.prop().clone()
                } else {
                    induce_subgraph(g, &ids)?.prop
                };
                batch.graph = Some(GraphInput {
                    pixels: ids.iter().map(|&i| pixels[i]).collect(),
                    features: features.select_rows(&ids),
                    prop,
                });
            }
            if let Some(p) = &patches {
                batch.patches = Some(PatchInput {
                    pixels: ids.iter().map(|&i| pixels[i]).collect(),
                    patches: p.select(&ids),
                });
            }
            let labels: Vec<usize> = ids.iter().map(|&i| targets[i]).collect();
            let (logits, tape) = model.forward(&batch, Mode::Train)?;
            let (loss, grads) = model.loss_and_grads(&batch, &logits, &tape, &labels, cfg.train.l2)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at epoch {epoch}")));
            }
            let l2_term = cfg.train.l2 * model.weight_norm_sq();
            adam_step_layers(&mut model.layers, &grads, &mut adam, lr)?;
            loss_sum += (loss - l2_term) * ids.len() as f64;
            l2_sum += l2_term;
            steps += 1;
            correct += logits.argmax_rows().iter().zip(&labels).filter(|(p, t)| p == t).count();
            seen += ids.len();
        }
        let entry = EpochLog {
            epoch,
            lr,
            loss: loss_sum / seen.max(1) as f64,
            l2_term: l2_sum / steps.max(1) as f64,
            train_oa: 100.0 * correct as f64 / seen.max(1) as f64,
        };
        log::debug!("epoch {} lr {:.3e} loss {:.5} train_oa {:.2}", entry.epoch, entry.lr, entry.loss, entry.train_oa);
        log.push(entry);
    }
    Ok(Trained { model, log })
}

/// 0-based class predictions for `pixels`, processed in chunks of
/// `cfg.train.batch` in the given order, each chunk with its own graph.
pub fn predict_pixels(model: &Model, cfg: &RunConfig, cube: &SpectralCube, pixels: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(pixels.len());
    for chunk in pixels.chunks(cfg.train.batch.max(1)) {
        let batch = inference_batch(model.config(), cfg, cube, chunk)?;
        out.extend(model.predict(&batch)?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitSide {
    Train,
    Test,
}

/// Confusion matrix and report over one side of the split.
pub fn evaluate(model: &Model, cfg: &RunConfig, data: &Dataset, side: SplitSide) -> Result<(ConfusionMatrix, MetricsReport)> {
    check_compatible(model, data)?;
    let (pixels, classes) = match side {
        SplitSide::Train => data.split.train_pixels(),
        SplitSide::Test => data.split.test_pixels(),
    };
    if pixels.is_empty() {
        return Err(Error::contract(format!("{side:?} split is empty").to_lowercase()));
    }
    let truth: Vec<usize> = classes.iter().map(|&c| c as usize - 1).collect();
    let pred = predict_pixels(model, cfg, &data.cube, &pixels)?;
    let cm = ConfusionMatrix::from_pairs(model.config().classes, &truth, &pred)?;
    let report = MetricsReport::from_confusion(&cm)?;
    Ok((cm, report))
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let m = model.config();
    if m.classes != data.classes() {
        return Err(Error::config(format!(
            "checkpoint has {} classes but the dataset has {}",
            m.classes,
            data.classes()
        )));
    }
    if m.input_bands != data.cube.bands() {
        return Err(Error::config(format!(
            "checkpoint expects {} bands but the cube has {}",
            m.input_bands,
            data.cube.bands()
        )));
    }
    Ok(())
}

/// Path of the JSON model configuration stored next to a checkpoint.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    save_checkpoint(path, &model.layers)?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(model.config()).expect("model config serializes");
    std::fs::write(&side, json).map_err(|e| Error::io(side, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let cfg: ModelConfig =
        serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", side.display())))?;
    Model::from_layers(&cfg, load_checkpoint(path)?)
}

/// Map colors for class ids 1, 2, …; ids beyond 24 wrap around.
pub const PALETTE: [[u8; 3]; 24] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [255, 250, 200],
    [128, 0, 0],
    [170, 255, 195],
    [128, 128, 0],
    [255, 215, 180],
    [0, 0, 128],
    [128, 128, 128],
    [255, 255, 255],
    [100, 60, 160],
    [0, 90, 30],
    [200, 100, 100],
];

pub fn class_color(id: u16) -> [u8; 3] {
    match id {
        0 => [0, 0, 0],
        _ => PALETTE[(id as usize - 1) % PALETTE.len()],
    }
}

/// Binary PPM (P6) of a row-major class-id map.
pub fn render_ppm(ids: &[u16], height: usize, width: usize) -> Result<Vec<u8>> {
    if ids.len() != height * width {
        return Err(Error::shape("render_ppm", format!("{height}x{width}"), format!("{} ids", ids.len())));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &id in ids {
        out.extend_from_slice(&class_color(id));
    }
    Ok(out)
}

/// One `id r g b` line per class, 0 (unlabeled) first.
pub fn palette_legend(classes: usize) -> String {
    let mut s = String::new();
    for id in 0..=classes {
        let [r, g, b] = class_color(id as u16);
        writeln!(s, "{id} {r} {g} {b}").expect("string write");
    }
    s
}

/// Class id for every pixel of the scene; pixels unlabeled in the ground
/// truth stay 0.
pub fn predict_map(model: &Model, cfg: &RunConfig, data: &Dataset) -> Result<Vec<u16>> {
    check_compatible(model, data)?;
    let pixels: Vec<usize> = (0..data.cube.pixels()).filter(|&i| data.labels.labels[i] != 0).collect();
    let pred = predict_pixels(model, cfg, &data.cube, &pixels)?;
    let mut map = vec![0u16; data.cube.pixels()];
    for (&i, &p) in pixels.iter().zip(&pred) {
        map[i] = p as u16 + 1;
    }
    Ok(map)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub k: usize,
    pub sigma: f64,
    pub oa: f64,
}

/// Trains and evaluates one model per `(k, σ)` cell, k-major. Cell `i`
/// trains with seed `train.seed + i`.
pub fn sweep(cfg: &RunConfig, data: &Dataset, ks: &[usize], sigmas: &[f64]) -> Result<Vec<SweepRow>> {
    if ks.is_empty() || sigmas.is_empty() {
        return Err(Error::config("sweep grids must be non-empty"));
    }
    let mut rows = Vec::with_capacity(ks.len() * sigmas.len());
    for (i, (&k, &sigma)) in ks.iter().flat_map(|k| sigmas.iter().map(move |s| (k, s))).enumerate() {
        let mut cell = cfg.clone();
        cell.graph.k = k;
        cell.graph.sigma = sigma;
        cell.train.seed = cfg.train.seed.wrapping_add(i as u64);
        let trained = train(&cell, data)?;
        let (_, report) = evaluate(&trained.model, &cell, data, SplitSide::Test)?;
        log::info!("sweep k={k} sigma={sigma} oa={:.2}", report.oa);
        rows.push(SweepRow { k, sigma, oa: report.oa });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("k,sigma,oa\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.k, r.sigma, r.oa).expect("string write");
    }
    s
}

/// Sampler bias diagnostic on the training-pixel graph, with batch budget
/// `train.batch` and the first normalized band as the scalar signal.
pub fn bias(cfg: &RunConfig, data: &Dataset, trials: usize) -> Result<BiasDiagnostic> {
    let (pixels, _) = data.split.train_pixels();
    if pixels.len() < 2 {
        return Err(Error::contract("bias diagnostic needs at least 2 training pixels"));
    }
    let features = data.cube.features(&pixels);
    let g = build_knn_rbf_graph(&features, cfg.graph.k.min(pixels.len() - 1), cfg.graph.sigma)?;
    let signal = features.column_values(0);
    estimator_bias_diagnostic(&g, cfg.train.batch.min(pixels.len()), trials, cfg.train.seed, &signal)
}
