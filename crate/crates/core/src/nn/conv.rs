use super::layers::{tape_mismatch, TapeEntry};
use super::params::{LayerGrads, LayerKind, LayerParams, Mode};
use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, Tensor4};

/// Unrolls `k × k` zero-padded neighborhoods into rows of a
/// `(B·H·W) × (k·k·C)` matrix.
fn im2col(x: &Tensor4, kernel: usize) -> DenseMatrix {
    let (b, h, w, c) = x.dims();
    let pad = (kernel / 2) as isize;
    let width = kernel * kernel * c;
    let mut cols = DenseMatrix::zeros(b * h * w, width);
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = cols.row_mut((n * h + y) * w + xx);
                for dy in 0..kernel {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..kernel {
                        let sx = xx as isize + dx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = x.index(n, sy as usize, sx as usize, 0);
                        let dst = (dy * kernel + dx) * c;
                        row[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &DenseMatrix, dims: (usize, usize, usize, usize), kernel: usize) -> Tensor4 {
    let (b, h, w, c) = dims;
    let pad = (kernel / 2) as isize;
    let mut out = Tensor4::zeros(b, h, w, c);
    for n in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let row = cols.row((n * h + y) * w + xx);
                for dy in 0..kernel {
                    let sy = y as isize + dy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..kernel {
                        let sx = xx as isize + dx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let dst = out.index(n, sy as usize, sx as usize, 0);
                        let src = (dy * kernel + dx) * c;
                        for (o, v) in out.data_mut()[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 cross-correlation with zero "same" padding plus bias.
pub fn conv2d_forward(x: &Tensor4, p: &LayerParams, mode: Mode) -> Result<(Tensor4, TapeEntry)> {
    let LayerKind::Conv2d { kernel } = p.kind else {
        return Err(Error::contract(format!(
            "expected conv2d parameters, got {}",
            p.kind.name()
        )));
    };
    if kernel % 2 == 0 {
        return Err(Error::contract(format!("kernel size {kernel} must be odd")));
    }
    let (b, h, w, c) = x.dims();
    if p.weights.rows() != kernel * kernel * c {
        return Err(Error::shape(
            "conv2d",
            format!("input {}", x.dims_str()),
            format!("{k}x{k} kernel weights {}", p.weights.shape_str(), k = kernel),
        ));
    }
    let columns = im2col(x, kernel);
    let mut out = columns.matmul(&p.weights)?;
    out.add_row_broadcast(&p.bias)?;
    let out = Tensor4::from_pixel_matrix(out, b, h, w)?;
    let tape = match mode {
        Mode::Train => TapeEntry::Conv2d {
            columns,
            input_dims: x.dims(),
        },
        Mode::Eval => TapeEntry::Eval,
    };
    Ok((out, tape))
}

pub fn conv2d_backward(
    tape: &TapeEntry,
    p: &LayerParams,
    grad_out: &Tensor4,
) -> Result<(Tensor4, LayerGrads)> {
    let TapeEntry::Conv2d { columns, input_dims } = tape else {
        return Err(tape_mismatch("conv2d", tape));
    };
    let LayerKind::Conv2d { kernel } = p.kind else {
        return Err(Error::contract("conv2d backward with non-conv parameters"));
    };
    let g = grad_out.to_pixel_matrix();
    if g.rows() != columns.rows() {
        return Err(Error::shape("conv2d_backward", grad_out.dims_str(), columns.shape_str()));
    }
    let mut grads = p.zero_grads();
    grads.weights = columns.t_matmul(&g)?;
    grads.bias = g.column_sums();
    let grad_cols = g.matmul_t(&p.weights)?;
    Ok((col2im(&grad_cols, *input_dims, kernel), grads))
}

/// Output side length of a 2×2, stride-2, ceil-mode pool.
pub fn pooled_len(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2×2 max pooling, stride 2, ceil mode: windows hanging off the edge are
/// clipped. Ties go to the first element in row-major window order.
pub fn maxpool2x2_forward(x: &Tensor4, mode: Mode) -> Result<(Tensor4, TapeEntry)> {
    let (b, h, w, c) = x.dims();
    if h == 0 || w == 0 {
        return Err(Error::contract("max pooling needs non-empty spatial dims"));
    }
    let (oh, ow) = (pooled_len(h), pooled_len(w));
    let mut out = Tensor4::zeros(b, oh, ow, c);
    let mut argmax = Vec::with_capacity(b * oh * ow * c);
    for n in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best_idx = x.index(n, 2 * oy, 2 * ox, ch);
                    let mut best = x.data()[best_idx];
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let i = x.index(n, y, xx, ch);
                            if x.data()[i] > best {
                                best = x.data()[i];
                                best_idx = i;
                            }
                        }
                    }
                    out.set(n, oy, ox, ch, best);
                    argmax.push(best_idx);
                }
            }
        }
    }
    let tape = match mode {
        Mode::Train => TapeEntry::MaxPool {
            argmax,
            input_dims: x.dims(),
        },
        Mode::Eval => TapeEntry::Eval,
    };
    Ok((out, tape))
}

pub fn maxpool2x2_backward(tape: &TapeEntry, grad_out: &Tensor4) -> Result<Tensor4> {
    let TapeEntry::MaxPool { argmax, input_dims } = tape else {
        return Err(tape_mismatch("maxpool", tape));
    };
    if argmax.len() != grad_out.data().len() {
        return Err(Error::shape(
            "maxpool_backward",
            format!("{} cached outputs", argmax.len()),
            grad_out.dims_str(),
        ));
    }
    let (b, h, w, c) = *input_dims;
    let mut g = Tensor4::zeros(b, h, w, c);
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        g.data_mut()[i] += v;
    }
    Ok(g)
}
