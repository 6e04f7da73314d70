//! Network assembly: a 2-D CNN branch over pixel patches, a GCN branch over
//! pixel graphs, a fusion step and a shared classification head.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, SparseSymMatrix, Tensor4};
use crate::nn::{
    batch_norm_backward, batch_norm_backward_tensor, batch_norm_forward, batch_norm_forward_tensor,
    conv2d_backward, conv2d_forward, fully_connected_backward, fully_connected_forward,
    graph_conv_backward, graph_conv_forward, maxpool2x2_backward, maxpool2x2_forward, one_hot,
    pooled_len, relu_backward, relu_forward, softmax_cross_entropy, softmax_cross_entropy_backward,
    LayerGrads, LayerKind, LayerParams, Mode, TapeEntry,
};
use crate::registry::{Named, Registry};

/// Combines the CNN and GCN feature rows of a batch.
pub trait Fusion: Named + Send + Sync {
    fn output_width(&self, cnn: usize, gcn: usize) -> Result<usize>;
    fn forward(&self, cnn: &DenseMatrix, gcn: &DenseMatrix) -> Result<DenseMatrix>;
    /// Splits `grad` (w.r.t. the fused output) into gradients for both inputs.
    fn backward(
        &self,
        cnn: &DenseMatrix,
        gcn: &DenseMatrix,
        grad: &DenseMatrix,
    ) -> Result<(DenseMatrix, DenseMatrix)>;
}

fn same_width(op: &'static str, cnn: usize, gcn: usize) -> Result<usize> {
    if cnn != gcn {
        return Err(Error::shape(op, format!("cnn width {cnn}"), format!("gcn width {gcn}")));
    }
    Ok(cnn)
}

struct Additive;

impl Named for Additive {
    fn name(&self) -> &'static str {
        "additive"
    }
}

impl Fusion for Additive {
    fn output_width(&self, cnn: usize, gcn: usize) -> Result<usize> {
        same_width("additive fusion", cnn, gcn)
    }

    fn forward(&self, cnn: &DenseMatrix, gcn: &DenseMatrix) -> Result<DenseMatrix> {
        cnn.add(gcn)
    }

    fn backward(&self, _: &DenseMatrix, _: &DenseMatrix, grad: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        Ok((grad.clone(), grad.clone()))
    }
}

struct Multiplicative;

impl Named for Multiplicative {
    fn name(&self) -> &'static str {
        "multiplicative"
    }
}

impl Fusion for Multiplicative {
    fn output_width(&self, cnn: usize, gcn: usize) -> Result<usize> {
        same_width("multiplicative fusion", cnn, gcn)
    }

    fn forward(&self, cnn: &DenseMatrix, gcn: &DenseMatrix) -> Result<DenseMatrix> {
        cnn.hadamard(gcn)
    }

    fn backward(&self, cnn: &DenseMatrix, gcn: &DenseMatrix, grad: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        Ok((grad.hadamard(gcn)?, grad.hadamard(cnn)?))
    }
}

/// Row-wise `[cnn, gcn]`, CNN features first.
struct Concatenation;

impl Named for Concatenation {
    fn name(&self) -> &'static str {
        "concatenation"
    }
}

impl Fusion for Concatenation {
    fn output_width(&self, cnn: usize, gcn: usize) -> Result<usize> {
        Ok(cnn + gcn)
    }

    fn forward(&self, cnn: &DenseMatrix, gcn: &DenseMatrix) -> Result<DenseMatrix> {
        cnn.hcat(gcn)
    }

    fn backward(&self, cnn: &DenseMatrix, _: &DenseMatrix, grad: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
        Ok(grad.split_cols(cnn.cols()))
    }
}

pub fn fusion_registry() -> Registry<dyn Fusion> {
    let mut r: Registry<dyn Fusion> = Registry::new("fusion");
    r.register(Arc::new(Additive));
    r.register(Arc::new(Multiplicative));
    r.register(Arc::new(Concatenation));
    r
}

/// Fuses with the strategy registered under `name`.
pub fn fuse(h_cnn: &DenseMatrix, h_gcn: &DenseMatrix, name: &str) -> Result<DenseMatrix> {
    let f = fusion_registry().get(name)?;
    f.output_width(h_cnn.cols(), h_gcn.cols())?;
    f.forward(h_cnn, h_gcn)
}

/// Which branches a network has and how it is batched during training.
pub trait Architecture: Named + Send + Sync {
    fn cnn_branch(&self) -> bool;
    fn gcn_branch(&self) -> bool;
    /// Registry name of the fusion strategy when both branches are present.
    fn fusion(&self) -> Option<&'static str>;
    /// Trains on the whole training graph at once instead of sampled batches.
    fn full_batch(&self) -> bool;
}

struct StandardArchitecture {
    name: &'static str,
    cnn: bool,
    gcn: bool,
    fusion: Option<&'static str>,
    full_batch: bool,
}

impl Named for StandardArchitecture {
    fn name(&self) -> &'static str {
        self.name
    }
}

impl Architecture for StandardArchitecture {
    fn cnn_branch(&self) -> bool {
        self.cnn
    }

    fn gcn_branch(&self) -> bool {
        self.gcn
    }

    fn fusion(&self) -> Option<&'static str> {
        self.fusion
    }

    fn full_batch(&self) -> bool {
        self.full_batch
    }
}

pub fn architecture_registry() -> Registry<dyn Architecture> {
    let mut r: Registry<dyn Architecture> = Registry::new("architecture");
    let arch = |name, cnn, gcn, fusion, full_batch| {
        Arc::new(StandardArchitecture {
            name,
            cnn,
            gcn,
            fusion,
            full_batch,
        })
    };
    r.register(arch("gcn", false, true, None, true));
    r.register(arch("minigcn", false, true, None, false));
    r.register(arch("cnn2d", true, false, None, false));
    r.register(arch("funet-a", true, true, Some("additive"), false));
    r.register(arch("funet-m", true, true, Some("multiplicative"), false));
    r.register(arch("funet-c", true, true, Some("concatenation"), false));
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: String,
    pub input_bands: usize,
    pub classes: usize,
    pub gcn_hidden: usize,
    pub cnn_channels: [usize; 3],
    pub fusion_fc: usize,
    pub patch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: "minigcn".into(),
            input_bands: 0,
            classes: 0,
            gcn_hidden: 128,
            cnn_channels: [32, 64, 128],
            fusion_fc: 128,
            patch_size: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_bands == 0 || self.classes == 0 {
            return Err(Error::config(format!(
                "input_bands ({}) and classes ({}) must be positive",
                self.input_bands, self.classes
            )));
        }
        if self.gcn_hidden == 0 || self.fusion_fc == 0 || self.cnn_channels.contains(&0) {
            return Err(Error::config("layer widths must be positive"));
        }
        if self.patch_size % 2 == 0 {
            return Err(Error::config(format!("patch_size {} must be odd", self.patch_size)));
        }
        Ok(())
    }

    /// Width of the flattened CNN feature after three 2×2 pools.
    pub fn cnn_feature_width(&self) -> usize {
        let side = pooled_len(pooled_len(pooled_len(self.patch_size)));
        side * side * self.cnn_channels[2]
    }
}

const CNN_KERNELS: [usize; 3] = [3, 3, 1];

/// Inputs for the GCN branch: one feature row per vertex and the propagation
/// matrix over exactly those vertices.
#[derive(Clone, Debug)]
pub struct GraphInput {
    pub pixels: Vec<usize>,
    pub features: DenseMatrix,
    pub prop: SparseSymMatrix,
}

/// Inputs for the CNN branch, one patch per pixel.
#[derive(Clone, Debug)]
pub struct PatchInput {
    pub pixels: Vec<usize>,
    pub patches: Tensor4,
}

#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub graph: Option<GraphInput>,
    pub patches: Option<PatchInput>,
}

impl Batch {
    pub fn len(&self) -> usize {
        match (&self.graph, &self.patches) {
            (Some(g), _) => g.pixels.len(),
            (None, Some(p)) => p.pixels.len(),
            (None, None) => 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Caches from a train-mode forward pass.
#[derive(Clone, Debug)]
pub struct ModelTape {
    mode: Mode,
    cnn: Vec<TapeEntry>,
    cnn_out_dims: (usize, usize, usize, usize),
    gcn: Vec<TapeEntry>,
    fusion_inputs: Option<(DenseMatrix, DenseMatrix)>,
    head: Vec<TapeEntry>,
}

/// A built network: configuration, strategies and a flat layer list.
///
/// Layer order: CNN branch (conv, BN) × 3, then GCN branch (BN, graph conv,
/// BN), then head (FC, BN, FC); absent branches are skipped.
#[derive(Clone)]
pub struct Model {
    config: ModelConfig,
    arch: Arc<dyn Architecture>,
    fusion: Option<Arc<dyn Fusion>>,
    pub layers: Vec<LayerParams>,
    cnn_at: Option<usize>,
    gcn_at: Option<usize>,
    head_at: usize,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("config", &self.config)
            .field("layers", &self.layers.len())
            .finish()
    }
}

pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Model> {
    cfg.validate()?;
    let arch = architecture_registry().get(&cfg.architecture)?;
    let fusion = arch.fusion().map(|n| fusion_registry().get(n)).transpose()?;
    let mut layers = Vec::new();
    let mut cnn_at = None;
    let mut gcn_at = None;
    let mut widths = Vec::new();
    if arch.cnn_branch() {
        cnn_at = Some(layers.len());
        let mut c_in = cfg.input_bands;
        for (&k, &c_out) in CNN_KERNELS.iter().zip(&cfg.cnn_channels) {
            layers.push(LayerParams::conv2d(k, c_in, c_out, rng));
            layers.push(LayerParams::batch_norm(c_out));
            c_in = c_out;
        }
        widths.push(cfg.cnn_feature_width());
    }
    if arch.gcn_branch() {
        gcn_at = Some(layers.len());
        layers.push(LayerParams::batch_norm(cfg.input_bands));
        layers.push(LayerParams::graph_conv(cfg.input_bands, cfg.gcn_hidden, rng));
        layers.push(LayerParams::batch_norm(cfg.gcn_hidden));
        widths.push(cfg.gcn_hidden);
    }
    let head_in = match (&fusion, widths.as_slice()) {
        (Some(f), [a, b]) => f.output_width(*a, *b).map_err(|e| Error::config(e.to_string()))?,
        (None, [w]) => *w,
        _ => return Err(Error::config(format!("architecture '{}' has an invalid branch set", arch.name()))),
    };
    let head_at = layers.len();
    layers.push(LayerParams::fully_connected(head_in, cfg.fusion_fc, rng));
    layers.push(LayerParams::batch_norm(cfg.fusion_fc));
    layers.push(LayerParams::fully_connected(cfg.fusion_fc, cfg.classes, rng));
    Ok(Model {
        config: cfg.clone(),
        arch,
        fusion,
        layers,
        cnn_at,
        gcn_at,
        head_at,
    })
}

fn l2_weight(p: &LayerParams) -> bool {
    p.kind != LayerKind::BatchNorm
}

fn relu_tensor(x: &Tensor4, mode: Mode) -> Result<(Tensor4, TapeEntry)> {
    let (b, h, w, _) = x.dims();
    let (out, tape) = relu_forward(&x.to_pixel_matrix(), mode);
    Ok((Tensor4::from_pixel_matrix(out, b, h, w)?, tape))
}

fn relu_tensor_backward(tape: &TapeEntry, g: &Tensor4) -> Result<Tensor4> {
    let (b, h, w, _) = g.dims();
    Tensor4::from_pixel_matrix(relu_backward(tape, &g.to_pixel_matrix())?, b, h, w)
}

impl Model {
    /// Wraps loaded layers after checking them against the shapes `cfg` implies.
    pub fn from_layers(cfg: &ModelConfig, layers: Vec<LayerParams>) -> Result<Model> {
        let mut model = build(cfg, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        if layers.len() != model.layers.len() {
            return Err(Error::config(format!(
                "checkpoint has {} layers, configuration implies {}",
                layers.len(),
                model.layers.len()
            )));
        }
        for (i, (a, b)) in model.layers.iter().zip(&layers).enumerate() {
            let same = a.kind == b.kind
                && a.weights.shape() == b.weights.shape()
                && a.bias.len() == b.bias.len()
                && a.bn_gamma.len() == b.bn_gamma.len()
                && b.bn_beta.len() == a.bn_beta.len()
                && b.bn_running_mean.len() == a.bn_running_mean.len()
                && b.bn_running_var.len() == a.bn_running_var.len();
            if !same {
                return Err(Error::config(format!(
                    "checkpoint layer {i} ({} {}) does not match configuration ({} {})",
                    b.kind.name(),
                    b.weights.shape_str(),
                    a.kind.name(),
                    a.weights.shape_str()
                )));
            }
        }
        model.layers = layers;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn architecture(&self) -> &dyn Architecture {
        self.arch.as_ref()
    }

    pub fn head_input_width(&self) -> usize {
        self.layers[self.head_at].weights.rows()
    }

    pub fn trainable_count(&self) -> usize {
        self.layers.iter().map(LayerParams::trainable_count).sum()
    }

    /// `Σ ‖W‖²` over convolution, graph convolution and fully connected weights.
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers.iter().filter(|p| l2_weight(p)).map(|p| p.weights.frobenius_sq()).sum()
    }

    pub fn set_bn_momentum(&mut self, momentum: f64) {
        for p in &mut self.layers {
            p.bn_momentum = momentum;
        }
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if self.arch.gcn_branch() && batch.graph.is_none() {
            return Err(Error::contract(format!("{} needs graph inputs", self.arch.name())));
        }
        if self.arch.cnn_branch() && batch.patches.is_none() {
            return Err(Error::contract(format!("{} needs patch inputs", self.arch.name())));
        }
        if let (true, true, Some(g), Some(p)) =
            (self.arch.gcn_branch(), self.arch.cnn_branch(), &batch.graph, &batch.patches)
        {
            if g.pixels != p.pixels {
                return Err(Error::contract("patch and vertex pixel orders differ"));
            }
        }
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        Ok(())
    }

    fn cnn_forward(&mut self, patches: &Tensor4, mode: Mode, tape: &mut Vec<TapeEntry>) -> Result<(DenseMatrix, (usize, usize, usize, usize))> {
        let at = self.cnn_at.expect("cnn branch");
        let mut x = patches.clone();
        for block in 0..3 {
            let (y, t) = conv2d_forward(&x, &self.layers[at + 2 * block], mode)?;
            tape.push(t);
            let (y, t) = batch_norm_forward_tensor(&y, &mut self.layers[at + 2 * block + 1], mode)?;
            tape.push(t);
            let (y, t) = maxpool2x2_forward(&y, mode)?;
            tape.push(t);
            let (y, t) = relu_tensor(&y, mode)?;
            tape.push(t);
            x = y;
        }
        Ok((x.flatten(), x.dims()))
    }

    fn gcn_forward(&mut self, g: &GraphInput, mode: Mode, tape: &mut Vec<TapeEntry>) -> Result<DenseMatrix> {
        let at = self.gcn_at.expect("gcn branch");
        let (x, t) = batch_norm_forward(&g.features, &mut self.layers[at], mode)?;
        tape.push(t);
        let (x, t) = graph_conv_forward(&x, &g.prop, &self.layers[at + 1], mode)?;
        tape.push(t);
        let (x, t) = batch_norm_forward(&x, &mut self.layers[at + 2], mode)?;
        tape.push(t);
        let (x, t) = relu_forward(&x, mode);
        tape.push(t);
        Ok(x)
    }

    /// Logits for every pixel in the batch. Train mode updates batch-norm
    /// running statistics and records a tape for [`Model::loss_and_grads`].
    pub fn forward(&mut self, batch: &Batch, mode: Mode) -> Result<(DenseMatrix, ModelTape)> {
        self.check_batch(batch)?;
        let mut tape = ModelTape {
            mode,
            cnn: Vec::new(),
            cnn_out_dims: (0, 0, 0, 0),
            gcn: Vec::new(),
            fusion_inputs: None,
            head: Vec::new(),
        };
        let cnn = match (&batch.patches, self.arch.cnn_branch()) {
            (Some(p), true) => {
                let (f, dims) = self.cnn_forward(&p.patches, mode, &mut tape.cnn)?;
                tape.cnn_out_dims = dims;
                Some(f)
            }
            _ => None,
        };
        let gcn = match (&batch.graph, self.arch.gcn_branch()) {
            (Some(g), true) => Some(self.gcn_forward(g, mode, &mut tape.gcn)?),
            _ => None,
        };
        let fused = match (cnn, gcn, &self.fusion) {
            (Some(a), Some(b), Some(f)) => {
                let out = f.forward(&a, &b)?;
                if mode == Mode::Train {
                    tape.fusion_inputs = Some((a, b));
                }
                out
            }
            (Some(a), None, None) | (None, Some(a), None) => a,
            _ => unreachable!("branch set validated at build time"),
        };
        let h = self.head_at;
        let (x, t) = fully_connected_forward(&fused, &self.layers[h], mode)?;
        tape.head.push(t);
        let (x, t) = batch_norm_forward(&x, &mut self.layers[h + 1], mode)?;
        tape.head.push(t);
        let (x, t) = relu_forward(&x, mode);
        tape.head.push(t);
        let (logits, t) = fully_connected_forward(&x, &self.layers[h + 2], mode)?;
        tape.head.push(t);
        Ok((logits, tape))
    }

    /// Eval-mode logits without touching `self`.
    pub fn predict_logits(&self, batch: &Batch) -> Result<DenseMatrix> {
        let mut scratch = self.clone();
        Ok(scratch.forward(batch, Mode::Eval)?.0)
    }

    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        Ok(self.predict_logits(batch)?.argmax_rows())
    }

    /// Cross-entropy plus `l2 · Σ‖W‖²`, and gradients for every layer in
    /// [`Model::layers`] order. `labels` are 0-based class indices.
    pub fn loss_and_grads(
        &self,
        batch: &Batch,
        logits: &DenseMatrix,
        tape: &ModelTape,
        labels: &[usize],
        l2: f64,
    ) -> Result<(f64, Vec<LayerGrads>)> {
        if tape.mode != Mode::Train {
            return Err(Error::contract("loss_and_grads needs a train-mode forward tape"));
        }
        let targets = one_hot(labels, self.config.classes)?;
        let (ce, _, ce_tape) = softmax_cross_entropy(logits, &targets)?;
        let mut grads: Vec<LayerGrads> = self.layers.iter().map(LayerParams::zero_grads).collect();

        let h = self.head_at;
        let g = softmax_cross_entropy_backward(&ce_tape)?;
        let (g, lg) = fully_connected_backward(&tape.head[3], &self.layers[h + 2], &g)?;
        grads[h + 2] = lg;
        let g = relu_backward(&tape.head[2], &g)?;
        let (g, lg) = batch_norm_backward(&tape.head[1], &self.layers[h + 1], &g)?;
        grads[h + 1] = lg;
        let (g_fused, lg) = fully_connected_backward(&tape.head[0], &self.layers[h], &g)?;
        grads[h] = lg;

        let (g_cnn, g_gcn) = match (&self.fusion, &tape.fusion_inputs) {
            (Some(f), Some((a, b))) => {
                let (ga, gb) = f.backward(a, b, &g_fused)?;
                (Some(ga), Some(gb))
            }
            _ if self.arch.cnn_branch() => (Some(g_fused), None),
            _ => (None, Some(g_fused)),
        };

        if let (Some(g), Some(at)) = (g_cnn, self.cnn_at) {
            let (b, hh, w, c) = tape.cnn_out_dims;
            let mut g = Tensor4::new(b, hh, w, c, g.into_data())?;
            for block in (0..3).rev() {
                let t = &tape.cnn[4 * block..4 * block + 4];
                g = relu_tensor_backward(&t[3], &g)?;
                g = maxpool2x2_backward(&t[2], &g)?;
                let (gx, lg) = batch_norm_backward_tensor(&t[1], &self.layers[at + 2 * block + 1], &g)?;
                grads[at + 2 * block + 1] = lg;
                let (gx, lg) = conv2d_backward(&t[0], &self.layers[at + 2 * block], &gx)?;
                grads[at + 2 * block] = lg;
                g = gx;
            }
        }
        if let (Some(g), Some(at)) = (g_gcn, self.gcn_at) {
            let graph = batch.graph.as_ref().ok_or_else(|| Error::contract("missing graph input"))?;
            let g = relu_backward(&tape.gcn[3], &g)?;
            let (g, lg) = batch_norm_backward(&tape.gcn[2], &self.layers[at + 2], &g)?;
            grads[at + 2] = lg;
            let (g, lg) = graph_conv_backward(&graph.prop, &tape.gcn[1], &self.layers[at + 1], &g)?;
            grads[at + 1] = lg;
            let (_, lg) = batch_norm_backward(&tape.gcn[0], &self.layers[at], &g)?;
            grads[at] = lg;
        }

        let mut penalty = 0.0;
        if l2 != 0.0 {
            for (p, g) in self.layers.iter().zip(grads.iter_mut()) {
                if l2_weight(p) {
                    penalty += p.weights.frobenius_sq();
                    for (gw, w) in g.weights.data_mut().iter_mut().zip(p.weights.data()) {
                        *gw += 2.0 * l2 * w;
                    }
                }
            }
        }
        Ok((ce + l2 * penalty, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_knn_rbf_graph;
    use crate::nn::{softmax, DEFAULT_BN_MOMENTUM};
    use crate::sampler::{induce_subgraph, partition_epoch, reassemble};
    use crate::test_support::{dot, numeric_gradient, projection, random_features, random_matrix, relative_error, rng};

    fn cfg(arch: &str, d: usize, p: usize) -> ModelConfig {
        ModelConfig {
            architecture: arch.into(),
            input_bands: d,
            classes: p,
            ..ModelConfig::default()
        }
    }

    fn small_cfg(arch: &str) -> ModelConfig {
        ModelConfig {
            architecture: arch.into(),
            input_bands: 3,
            classes: 3,
            gcn_hidden: 4,
            cnn_channels: [3, 4, 4],
            fusion_fc: 5,
            patch_size: 3,
        }
    }

    fn toy_batch(n: usize, d: usize, patch: usize, seed: u64) -> Batch {
        let features = random_features(n, d, seed);
        let graph = build_knn_rbf_graph(&features, 2, 1.0).unwrap();
        let pixels: Vec<usize> = (0..n).collect();
        let patches = Tensor4::new(n, patch, patch, d, random_matrix(1, n * patch * patch * d, 1.0, seed + 1).into_data()).unwrap();
        Batch {
            graph: Some(GraphInput {
                pixels: pixels.clone(),
                features,
                prop: graph.prop().clone(),
            }),
            patches: Some(PatchInput { pixels, patches }),
        }
    }

    #[test]
    fn fusion_examples() {
        let a = DenseMatrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = DenseMatrix::from_rows(&[[3.0, 4.0]]).unwrap();
        assert_eq!(fuse(&a, &b, "additive").unwrap().data(), &[4.0, 6.0]);
        assert_eq!(fuse(&a, &b, "multiplicative").unwrap().data(), &[3.0, 8.0]);
        assert_eq!(fuse(&a, &b, "concatenation").unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let wide = DenseMatrix::zeros(1, 3);
        assert!(matches!(fuse(&a, &wide, "additive"), Err(Error::Shape { .. })));
        assert!(matches!(fuse(&a, &b, "weighted"), Err(Error::Config(_))));
    }

    #[test]
    fn fusion_gradients() {
        let reg = fusion_registry();
        for name in reg.names() {
            let f = reg.get(name).unwrap();
            for seed in 0..5 {
                let a = random_matrix(3, 4, 1.0, seed);
                let b = random_matrix(3, 4, 1.0, seed + 50);
                let out_w = f.output_width(4, 4).unwrap();
                let proj = projection(3 * out_w, seed);
                let g = DenseMatrix::new(3, out_w, proj.clone()).unwrap();
                let (ga, gb) = f.backward(&a, &b, &g).unwrap();
                let na = numeric_gradient(a.data(), 1e-5, |v| dot(f.forward(&DenseMatrix::new(3, 4, v.to_vec()).unwrap(), &b).unwrap().data(), &proj));
                let nb = numeric_gradient(b.data(), 1e-5, |v| dot(f.forward(&a, &DenseMatrix::new(3, 4, v.to_vec()).unwrap()).unwrap().data(), &proj));
                assert!(relative_error(ga.data(), &na) <= 1e-6, "{name}");
                assert!(relative_error(gb.data(), &nb) <= 1e-6, "{name}");
            }
        }
    }

    #[test]
    fn unknown_architecture_is_config_error() {
        assert!(matches!(build(&cfg("resnet", 5, 2), &mut rng(0)), Err(Error::Config(_))));
    }

    #[test]
    fn cnn2d_parameter_count_matches_closed_form() {
        let (d, p) = (200, 16);
        let m = build(&cfg("cnn2d", d, p), &mut rng(0)).unwrap();
        let conv = |k: usize, i: usize, o: usize| k * k * i * o + o;
        let bn = |c: usize| 2 * c;
        let expected = conv(3, d, 32) + bn(32) + conv(3, 32, 64) + bn(64) + conv(1, 64, 128) + bn(128)
            + (128 * 128 + 128) + bn(128) + (128 * p + p);
        assert_eq!(m.trainable_count(), expected);
    }

    #[test]
    fn funet_c_head_is_256_wide_and_gcn_minigcn_share_shapes() {
        assert_eq!(build(&cfg("funet-c", 10, 4), &mut rng(0)).unwrap().head_input_width(), 256);
        assert_eq!(build(&cfg("funet-a", 10, 4), &mut rng(0)).unwrap().head_input_width(), 128);
        let a = build(&cfg("gcn", 10, 4), &mut rng(0)).unwrap();
        let b = build(&cfg("minigcn", 10, 4), &mut rng(1)).unwrap();
        let shapes = |m: &Model| m.layers.iter().map(|l| (l.kind, l.weights.shape(), l.bias.len(), l.bn_gamma.len())).collect::<Vec<_>>();
        assert_eq!(shapes(&a), shapes(&b));
    }

    #[test]
    fn zero_final_layer_gives_uniform_softmax() {
        let mut m = build(&small_cfg("minigcn"), &mut rng(0)).unwrap();
        let last = m.layers.len() - 1;
        m.layers[last].weights = DenseMatrix::zeros(5, 3);
        let batch = toy_batch(6, 3, 3, 1);
        let (logits, tape) = m.forward(&batch, Mode::Train).unwrap();
        assert!(softmax(&logits).data().iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
        let (loss, _) = m.loss_and_grads(&batch, &logits, &tape, &[0, 1, 2, 0, 1, 2], 0.0).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn l2_term_is_quadratic_and_optional() {
        let mut m = build(&small_cfg("funet-m"), &mut rng(2)).unwrap();
        let batch = toy_batch(6, 3, 3, 2);
        let labels = [0, 1, 2, 2, 1, 0];
        let (logits, tape) = m.forward(&batch, Mode::Train).unwrap();
        let (ce, _) = m.loss_and_grads(&batch, &logits, &tape, &labels, 0.0).unwrap();
        let (with, _) = m.loss_and_grads(&batch, &logits, &tape, &labels, 0.001).unwrap();
        assert!((with - ce - 0.001 * m.weight_norm_sq()).abs() < 1e-12);
        let before = m.weight_norm_sq();
        for p in &mut m.layers {
            if p.kind != LayerKind::BatchNorm {
                p.weights = p.weights.scale(2.0);
            }
        }
        assert!((m.weight_norm_sq() - 4.0 * before).abs() <= 1e-12 * before);
    }

    #[test]
    fn eval_tape_is_rejected_and_eval_has_no_side_effects() {
        let mut m = build(&small_cfg("funet-a"), &mut rng(3)).unwrap();
        let batch = toy_batch(5, 3, 3, 3);
        let before = m.layers.clone();
        let (logits, tape) = m.forward(&batch, Mode::Eval).unwrap();
        assert_eq!(m.layers, before);
        assert!(matches!(m.loss_and_grads(&batch, &logits, &tape, &[0; 5], 0.0), Err(Error::Contract(_))));
        assert_eq!(m.predict_logits(&batch).unwrap(), logits);
    }

    #[test]
    fn misaligned_pixels_are_rejected() {
        let mut m = build(&small_cfg("funet-c"), &mut rng(3)).unwrap();
        let mut batch = toy_batch(4, 3, 3, 3);
        batch.patches.as_mut().unwrap().pixels.swap(0, 1);
        assert!(matches!(m.forward(&batch, Mode::Eval), Err(Error::Contract(_))));
    }

    /// Recomputes the FuNet forward pass from the public layer functions.
    fn manual_funet(m: &Model, batch: &Batch, fusion: &str) -> DenseMatrix {
        let mut l = m.layers.clone();
        let mut x = batch.patches.as_ref().unwrap().patches.clone();
        for block in 0..3 {
            x = conv2d_forward(&x, &l[2 * block], Mode::Eval).unwrap().0;
            x = batch_norm_forward_tensor(&x, &mut l[2 * block + 1], Mode::Eval).unwrap().0;
            x = maxpool2x2_forward(&x, Mode::Eval).unwrap().0;
            x = relu_tensor(&x, Mode::Eval).unwrap().0;
        }
        let cnn = x.flatten();
        let g = batch.graph.as_ref().unwrap();
        let y = batch_norm_forward(&g.features, &mut l[6], Mode::Eval).unwrap().0;
        let y = graph_conv_forward(&y, &g.prop, &l[7], Mode::Eval).unwrap().0;
        let y = batch_norm_forward(&y, &mut l[8], Mode::Eval).unwrap().0;
        let gcn = relu_forward(&y, Mode::Eval).0;
        let z = fuse(&cnn, &gcn, fusion).unwrap();
        let z = fully_connected_forward(&z, &l[9], Mode::Eval).unwrap().0;
        let z = batch_norm_forward(&z, &mut l[10], Mode::Eval).unwrap().0;
        let z = relu_forward(&z, Mode::Eval).0;
        fully_connected_forward(&z, &l[11], Mode::Eval).unwrap().0
    }

    #[test]
    fn funet_forward_is_the_composition_of_its_parts() {
        for (arch, fusion) in [("funet-a", "additive"), ("funet-m", "multiplicative"), ("funet-c", "concatenation")] {
            let mut m = build(&ModelConfig { architecture: arch.into(), ..small_cfg(arch) }, &mut rng(8)).unwrap();
            let batch = toy_batch(6, 3, 3, 9);
            // Non-trivial running statistics.
            m.forward(&batch, Mode::Train).unwrap();
            let (logits, _) = m.forward(&batch, Mode::Eval).unwrap();
            assert!(logits.max_abs_diff(&manual_funet(&m, &batch, fusion)) <= 1e-12, "{arch}");
        }
    }

    fn full_model_gradient_check(arch: &str, seed: u64) -> f64 {
        let mut m = build(&small_cfg(arch), &mut rng(seed)).unwrap();
        m.set_bn_momentum(DEFAULT_BN_MOMENTUM);
        let batch = toy_batch(6, 3, 3, seed + 20);
        let labels = [0, 1, 2, 1, 0, 2];
        let l2 = 0.001;
        let (logits, tape) = m.clone().forward(&batch, Mode::Train).unwrap();
        let (_, grads) = m.loss_and_grads(&batch, &logits, &tape, &labels, l2).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for li in 0..m.layers.len() {
            for slot in 0..4 {
                let values = m.layers[li].trainable()[slot].to_vec();
                if values.is_empty() {
                    continue;
                }
                analytic.extend_from_slice(grads[li].slices()[slot]);
                numeric.extend(numeric_gradient(&values, 1e-5, |v| {
                    let mut q = m.clone();
                    q.layers[li].trainable_mut()[slot].copy_from_slice(v);
                    let (lg, t) = q.clone().forward(&batch, Mode::Train).unwrap();
                    q.loss_and_grads(&batch, &lg, &t, &labels, l2).unwrap().0
                }));
            }
        }
        relative_error(&analytic, &numeric)
    }

    #[test]
    fn full_model_gradients_on_six_vertex_toy() {
        for arch in ["gcn", "cnn2d", "funet-a", "funet-m", "funet-c"] {
            let err = full_model_gradient_check(arch, 1);
            assert!(err <= 1e-4, "{arch}: {err}");
        }
    }

    #[test]
    fn single_full_batch_matches_full_graph_forward() {
        let features = random_features(12, 3, 4);
        let g = build_knn_rbf_graph(&features, 3, 1.0).unwrap();
        let mut m = build(&small_cfg("minigcn"), &mut rng(5)).unwrap();
        let all: Vec<usize> = (0..12).collect();
        let full = Batch {
            graph: Some(GraphInput { pixels: all.clone(), features: features.clone(), prop: g.prop().clone() }),
            patches: None,
        };
        let (expected, _) = m.forward(&full, Mode::Eval).unwrap();
        let part = partition_epoch(12, 12, 77).unwrap();
        let ids = &part.batches[0];
        let sub = induce_subgraph(&g, ids).unwrap();
        let batch = Batch {
            graph: Some(GraphInput { pixels: ids.clone(), features: features.select_rows(ids), prop: sub.prop }),
            patches: None,
        };
        let (out, _) = m.forward(&batch, Mode::Eval).unwrap();
        let back = reassemble(&part, &[out]).unwrap();
        assert!(back.max_abs_diff(&expected) <= 1e-12);
    }

    #[test]
    fn gcn_path_is_permutation_equivariant() {
        let features = random_features(8, 3, 6);
        let g = build_knn_rbf_graph(&features, 3, 1.0).unwrap();
        let mut m = build(&small_cfg("gcn"), &mut rng(6)).unwrap();
        let ids: Vec<usize> = (0..8).collect();
        let perm = vec![3, 0, 7, 1, 6, 2, 5, 4];
        let base = Batch { graph: Some(GraphInput { pixels: ids, features: features.clone(), prop: g.prop().clone() }), patches: None };
        let permuted = Batch {
            graph: Some(GraphInput { pixels: perm.clone(), features: features.select_rows(&perm), prop: g.prop().permuted(&perm).unwrap() }),
            patches: None,
        };
        let (a, _) = m.forward(&base, Mode::Train).unwrap();
        let (b, _) = m.forward(&permuted, Mode::Train).unwrap();
        assert!(a.select_rows(&perm).max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_through_from_layers() {
        let m = build(&small_cfg("funet-c"), &mut rng(9)).unwrap();
        let bytes = crate::nn::encode_checkpoint(&m.layers).unwrap();
        let back = Model::from_layers(m.config(), crate::nn::decode_checkpoint(&bytes).unwrap()).unwrap();
        assert_eq!(crate::nn::encode_checkpoint(&back.layers).unwrap(), bytes);
        assert!(Model::from_layers(&small_cfg("funet-a"), back.layers.clone()).is_err());
    }
}
