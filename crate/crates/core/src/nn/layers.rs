use super::params::{LayerGrads, LayerKind, LayerParams, Mode, BN_EPS};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Operator, Tensor4};

/// Activations cached by a forward pass for the matching backward pass.
/// Eval-mode passes produce [`TapeEntry::Eval`], which carries nothing.
#[derive(Clone, Debug)]
pub enum TapeEntry {
    Eval,
    GraphConv { propagated: DenseMatrix },
    FullyConnected { input: DenseMatrix },
    Relu { mask: Vec<bool> },
    BatchNorm { normalized: DenseMatrix, inv_std: Vec<f64> },
    Conv2d { columns: DenseMatrix, input_dims: (usize, usize, usize, usize) },
    MaxPool { argmax: Vec<usize>, input_dims: (usize, usize, usize, usize) },
    SoftmaxCrossEntropy { probs: DenseMatrix, labels: DenseMatrix },
}

impl TapeEntry {
    pub fn is_eval(&self) -> bool {
        matches!(self, TapeEntry::Eval)
    }
}

pub(crate) fn tape_mismatch(expected: &str, got: &TapeEntry) -> Error {
    match got {
        TapeEntry::Eval => Error::contract(format!(
            "{expected} backward needs a train-mode tape, got an eval-mode tape"
        )),
        other => Error::contract(format!(
            "{expected} backward given a tape from another layer: {:?}",
            std::mem::discriminant(other)
        )),
    }
}

fn expect_kind(p: &LayerParams, kind: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "expected {kind} parameters, got {}",
            p.kind.name()
        )))
    }
}

/// `prop · h · W + b`. `prop` must be symmetric; backward uses it as its own
/// transpose.
pub fn graph_conv_forward<P: Operator + ?Sized>(
    h: &DenseMatrix,
    prop: &P,
    p: &LayerParams,
    mode: Mode,
) -> Result<(DenseMatrix, TapeEntry)> {
    expect_kind(p, "graph_conv", p.kind == LayerKind::GraphConv)?;
    if prop.shape() != (h.rows(), h.rows()) {
        return Err(Error::shape(
            "graph_conv",
            format!("propagation {}x{}", prop.shape().0, prop.shape().1),
            format!("features {}", h.shape_str()),
        ));
    }
    if h.cols() != p.weights.rows() {
        return Err(Error::shape("graph_conv", h.shape_str(), p.weights.shape_str()));
    }
    let propagated = prop.apply(h)?;
    let mut out = propagated.matmul(&p.weights)?;
    out.add_row_broadcast(&p.bias)?;
    let tape = match mode {
        Mode::Train => TapeEntry::GraphConv { propagated },
        Mode::Eval => TapeEntry::Eval,
    };
    Ok((out, tape))
}

/// Returns `(∂L/∂h, parameter gradients)`.
pub fn graph_conv_backward<P: Operator + ?Sized>(
    prop: &P,
    tape: &TapeEntry,
    p: &LayerParams,
    grad_out: &DenseMatrix,
) -> Result<(DenseMatrix, LayerGrads)> {
    let TapeEntry::GraphConv { propagated } = tape else {
        return Err(tape_mismatch("graph_conv", tape));
    };
    let mut grads = p.zero_grads();
    grads.weights = propagated.t_matmul(grad_out)?;
    grads.bias = grad_out.column_sums();
    let grad_h = prop.apply(&grad_out.matmul_t(&p.weights)?)?;
    Ok((grad_h, grads))
}

/// `x · W + b`.
pub fn fully_connected_forward(
    x: &DenseMatrix,
    p: &LayerParams,
    mode: Mode,
) -> Result<(DenseMatrix, TapeEntry)> {
    expect_kind(p, "fully_connected", p.kind == LayerKind::FullyConnected)?;
    let mut out = x.matmul(&p.weights)?;
    out.add_row_broadcast(&p.bias)?;
    let tape = match mode {
        Mode::Train => TapeEntry::FullyConnected { input: x.clone() },
        Mode::Eval => TapeEntry::Eval,
    };
    Ok((out, tape))
}

pub fn fully_connected_backward(
    tape: &TapeEntry,
    p: &LayerParams,
    grad_out: &DenseMatrix,
) -> Result<(DenseMatrix, LayerGrads)> {
    let TapeEntry::FullyConnected { input } = tape else {
        return Err(tape_mismatch("fully_connected", tape));
    };
    let mut grads = p.zero_grads();
    grads.weights = input.t_matmul(grad_out)?;
    grads.bias = grad_out.column_sums();
    Ok((grad_out.matmul_t(&p.weights)?, grads))
}

pub fn relu_forward(x: &DenseMatrix, mode: Mode) -> (DenseMatrix, TapeEntry) {
    let out = x.map(|v| v.max(0.0));
    let tape = match mode {
        Mode::Train => TapeEntry::Relu {
            mask: x.data().iter().map(|&v| v > 0.0).collect(),
        },
        Mode::Eval => TapeEntry::Eval,
    };
    (out, tape)
}

pub fn relu_backward(tape: &TapeEntry, grad_out: &DenseMatrix) -> Result<DenseMatrix> {
    let TapeEntry::Relu { mask } = tape else {
        return Err(tape_mismatch("relu", tape));
    };
    if mask.len() != grad_out.data().len() {
        return Err(Error::shape(
            "relu_backward",
            format!("{} cached", mask.len()),
            grad_out.shape_str(),
        ));
    }
    let mut g = grad_out.clone();
    for (v, &m) in g.data_mut().iter_mut().zip(mask) {
        if !m {
            *v = 0.0;
        }
    }
    Ok(g)
}

/// Batch normalization over the rows of `x` (one statistic per column).
///
/// Train mode normalizes with the biased batch variance and folds the batch
/// statistics into the running estimates with `r ← m·r + (1 − m)·batch`.
pub fn batch_norm_forward(
    x: &DenseMatrix,
    p: &mut LayerParams,
    mode: Mode,
) -> Result<(DenseMatrix, TapeEntry)> {
    expect_kind(p, "batch_norm", p.kind == LayerKind::BatchNorm)?;
    let (rows, cols) = x.shape();
    if cols != p.bn_gamma.len() {
        return Err(Error::shape(
            "batch_norm",
            x.shape_str(),
            format!("{} features", p.bn_gamma.len()),
        ));
    }
    match mode {
        Mode::Eval => {
            let mut out = x.clone();
            for r in 0..rows {
                for (c, v) in out.row_mut(r).iter_mut().enumerate() {
                    let inv = 1.0 / (p.bn_running_var[c] + BN_EPS).sqrt();
                    *v = p.bn_gamma[c] * (*v - p.bn_running_mean[c]) * inv + p.bn_beta[c];
                }
            }
            Ok((out, TapeEntry::Eval))
        }
        Mode::Train => {
            if rows < 2 {
                return Err(Error::contract(format!(
                    "batch normalization in train mode needs at least 2 samples, got {rows}"
                )));
            }
            let m = rows as f64;
            let mean: Vec<f64> = x.column_sums().iter().map(|s| s / m).collect();
            let mut var = vec![0.0; cols];
            for r in 0..rows {
                for (c, v) in x.row(r).iter().enumerate() {
                    var[c] += (v - mean[c]) * (v - mean[c]);
                }
            }
            for v in &mut var {
                *v /= m;
            }
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let mut normalized = DenseMatrix::zeros(rows, cols);
            let mut out = DenseMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    let n = (x.get(r, c) - mean[c]) * inv_std[c];
                    normalized.set(r, c, n);
                    out.set(r, c, p.bn_gamma[c] * n + p.bn_beta[c]);
                }
            }
            let mom = p.bn_momentum;
            for c in 0..cols {
                p.bn_running_mean[c] = mom * p.bn_running_mean[c] + (1.0 - mom) * mean[c];
                p.bn_running_var[c] = mom * p.bn_running_var[c] + (1.0 - mom) * var[c];
            }
            Ok((out, TapeEntry::BatchNorm { normalized, inv_std }))
        }
    }
}

pub fn batch_norm_backward(
    tape: &TapeEntry,
    p: &LayerParams,
    grad_out: &DenseMatrix,
) -> Result<(DenseMatrix, LayerGrads)> {
    let TapeEntry::BatchNorm { normalized, inv_std } = tape else {
        return Err(tape_mismatch("batch_norm", tape));
    };
    if normalized.shape() != grad_out.shape() {
        return Err(Error::shape("batch_norm_backward", normalized.shape_str(), grad_out.shape_str()));
    }
    let (rows, cols) = grad_out.shape();
    let m = rows as f64;
    let mut grads = p.zero_grads();
    for r in 0..rows {
        for c in 0..cols {
            let g = grad_out.get(r, c);
            grads.beta[c] += g;
            grads.gamma[c] += g * normalized.get(r, c);
        }
    }
    let mut grad_x = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let g = grad_out.get(r, c);
            grad_x.set(
                r,
                c,
                p.bn_gamma[c] * inv_std[c] / m
                    * (m * g - grads.beta[c] - normalized.get(r, c) * grads.gamma[c]),
            );
        }
    }
    Ok((grad_x, grads))
}

/// Batch normalization over `B·H·W` positions per channel.
pub fn batch_norm_forward_tensor(
    x: &Tensor4,
    p: &mut LayerParams,
    mode: Mode,
) -> Result<(Tensor4, TapeEntry)> {
    let (b, h, w, _) = x.dims();
    let (out, tape) = batch_norm_forward(&x.to_pixel_matrix(), p, mode)?;
    Ok((Tensor4::from_pixel_matrix(out, b, h, w)?, tape))
}

pub fn batch_norm_backward_tensor(
    tape: &TapeEntry,
    p: &LayerParams,
    grad_out: &Tensor4,
) -> Result<(Tensor4, LayerGrads)> {
    let (b, h, w, _) = grad_out.dims();
    let (g, grads) = batch_norm_backward(tape, p, &grad_out.to_pixel_matrix())?;
    Ok((Tensor4::from_pixel_matrix(g, b, h, w)?, grads))
}

/// Rejects anything but rows with a single 1 and zeros elsewhere.
pub fn check_one_hot(labels: &DenseMatrix) -> Result<()> {
    for r in 0..labels.rows() {
        let row = labels.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::contract(format!("label row {r} is not one-hot")));
        }
    }
    Ok(())
}

pub fn one_hot(classes: &[usize], width: usize) -> Result<DenseMatrix> {
    let mut m = DenseMatrix::zeros(classes.len(), width);
    for (r, &c) in classes.iter().enumerate() {
        if c >= width {
            return Err(Error::contract(format!("class {c} outside {width} classes")));
        }
        m.set(r, c, 1.0);
    }
    Ok(m)
}

/// Row softmax.
pub fn softmax(logits: &DenseMatrix) -> DenseMatrix {
    let mut probs = logits.clone();
    for r in 0..probs.rows() {
        let row = probs.row_mut(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    probs
}

/// Mean negative log-likelihood of the one-hot `labels` under the row softmax
/// of `logits`. Returns `(loss, probabilities, tape)`.
pub fn softmax_cross_entropy(
    logits: &DenseMatrix,
    labels: &DenseMatrix,
) -> Result<(f64, DenseMatrix, TapeEntry)> {
    if logits.shape() != labels.shape() {
        return Err(Error::shape("softmax_cross_entropy", logits.shape_str(), labels.shape_str()));
    }
    if logits.rows() == 0 {
        return Err(Error::contract("softmax_cross_entropy on an empty batch"));
    }
    check_one_hot(labels)?;
    let probs = softmax(logits);
    let mut total = 0.0;
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let target = labels.row(r).iter().position(|&v| v == 1.0).expect("checked one-hot");
        total += lse - row[target];
    }
    let loss = total / logits.rows() as f64;
    Ok((
        loss,
        probs.clone(),
        TapeEntry::SoftmaxCrossEntropy {
            probs,
            labels: labels.clone(),
        },
    ))
}

/// Gradient of the mean loss with respect to the logits: `(p − y) / B`.
pub fn softmax_cross_entropy_backward(tape: &TapeEntry) -> Result<DenseMatrix> {
    let TapeEntry::SoftmaxCrossEntropy { probs, labels } = tape else {
        return Err(tape_mismatch("softmax_cross_entropy", tape));
    };
    Ok(probs.sub(labels)?.scale(1.0 / probs.rows() as f64))
}
