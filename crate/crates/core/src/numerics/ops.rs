//! Forward ops and their adjoints.
//!
//! Reductions and matrix products use fixed loop nesting and run serially, so
//! repeated runs are bitwise identical.

use super::{check_finite, NumericsError, Real, Result, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

fn shape_err<E: Real>(op: &'static str, a: &Tensor<E>, b: &Tensor<E>) -> NumericsError {
    NumericsError::ShapeMismatch { op, lhs: a.shape_str(), rhs: b.shape_str() }
}

/// Matrix product `a @ b` with `a: m x k`, `b: k x n`.
pub fn matmul<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.cols() != b.rows() {
        return Err(shape_err("matmul", a, b));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let (av, bv) = (a.values(), b.values());
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = E::zero();
            for p in 0..k {
                acc += av[i * k + p] * bv[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    check_finite("matmul", &out)?;
    Ok(Tensor::from_op(
        m,
        n,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |_, dc, parents| {
            let av = parents[0].values();
            let bv = parents[1].values();
            // dA = dC @ B^T
            parents[0].accumulate_grad(|da| {
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = E::zero();
                        for j in 0..n {
                            acc += dc[i * n + j] * bv[p * n + j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            });
            // dB = A^T @ dC
            parents[1].accumulate_grad(|db| {
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = E::zero();
                        for i in 0..m {
                            acc += av[i * k + p] * dc[i * n + j];
                        }
                        db[p * n + j] += acc;
                    }
                }
            });
        }),
    ))
}

pub fn transpose<E: Real>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, n) = (a.rows(), a.cols());
    let av = a.values();
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = av[i * n + j];
        }
    }
    Ok(Tensor::from_op(
        n,
        m,
        out,
        vec![a.clone()],
        Box::new(move |_, dc, parents| {
            parents[0].accumulate_grad(|da| {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += dc[j * m + i];
                    }
                }
            });
        }),
    ))
}

/// Elementwise sum. A `1 x n` right operand broadcasts over the rows of a
/// `m x n` left operand (bias addition).
pub fn add<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, n) = (a.rows(), a.cols());
    let broadcast = b.rows() == 1 && m > 1 && b.cols() == n;
    if !broadcast && (b.rows() != m || b.cols() != n) {
        return Err(shape_err("add", a, b));
    }
    let (av, bv) = (a.values(), b.values());
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = av[i * n + j] + bv[if broadcast { j } else { i * n + j }];
        }
    }
    check_finite("add", &out)?;
    Ok(Tensor::from_op(
        m,
        n,
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |_, dc, parents| {
            parents[0].accumulate_grad(|da| {
                for (g, d) in da.iter_mut().zip(dc) {
                    *g += *d;
                }
            });
            parents[1].accumulate_grad(|db| {
                if broadcast {
                    for i in 0..m {
                        for j in 0..n {
                            db[j] += dc[i * n + j];
                        }
                    }
                } else {
                    for (g, d) in db.iter_mut().zip(dc) {
                        *g += *d;
                    }
                }
            });
        }),
    ))
}

pub fn sub<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(shape_err("sub", a, b));
    }
    let out: Vec<E> = a.values().iter().zip(b.values()).map(|(&x, &y)| x - y).collect();
    check_finite("sub", &out)?;
    Ok(Tensor::from_op(
        a.rows(),
        a.cols(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|_, dc, parents| {
            parents[0].accumulate_grad(|da| {
                for (g, d) in da.iter_mut().zip(dc) {
                    *g += *d;
                }
            });
            parents[1].accumulate_grad(|db| {
                for (g, d) in db.iter_mut().zip(dc) {
                    *g -= *d;
                }
            });
        }),
    ))
}

/// Elementwise (Hadamard) product.
pub fn mul<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(shape_err("mul", a, b));
    }
    let out: Vec<E> = a.values().iter().zip(b.values()).map(|(&x, &y)| x * y).collect();
    check_finite("mul", &out)?;
    Ok(Tensor::from_op(
        a.rows(),
        a.cols(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|_, dc, parents| {
            let av: Vec<E> = parents[0].values().to_vec();
            let bv: Vec<E> = parents[1].values().to_vec();
            parents[0].accumulate_grad(|da| {
                for i in 0..da.len() {
                    da[i] += dc[i] * bv[i];
                }
            });
            parents[1].accumulate_grad(|db| {
                for i in 0..db.len() {
                    db[i] += dc[i] * av[i];
                }
            });
        }),
    ))
}

/// Elementwise quotient. Used on scalars for the cosine of the latent loss.
pub fn div<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(shape_err("div", a, b));
    }
    let out: Vec<E> = a.values().iter().zip(b.values()).map(|(&x, &y)| x / y).collect();
    check_finite("div", &out)?;
    Ok(Tensor::from_op(
        a.rows(),
        a.cols(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(|_, dc, parents| {
            let av: Vec<E> = parents[0].values().to_vec();
            let bv: Vec<E> = parents[1].values().to_vec();
            parents[0].accumulate_grad(|da| {
                for i in 0..da.len() {
                    da[i] += dc[i] / bv[i];
                }
            });
            parents[1].accumulate_grad(|db| {
                for i in 0..db.len() {
                    db[i] -= dc[i] * av[i] / (bv[i] * bv[i]);
                }
            });
        }),
    ))
}

/// Multiply every entry by a compile-time constant.
pub fn scale<E: Real>(a: &Tensor<E>, factor: E) -> Result<Tensor<E>> {
    let out: Vec<E> = a.values().iter().map(|&x| x * factor).collect();
    check_finite("scale", &out)?;
    Ok(Tensor::from_op(
        a.rows(),
        a.cols(),
        out,
        vec![a.clone()],
        Box::new(move |_, dc, parents| {
            parents[0].accumulate_grad(|da| {
                for i in 0..da.len() {
                    da[i] += dc[i] * factor;
                }
            });
        }),
    ))
}

/// Softmax over each row, in max-subtraction form.
pub fn row_softmax<E: Real>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, n) = (a.rows(), a.cols());
    let av = a.values();
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let row = &av[i * n..(i + 1) * n];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut denom = E::zero();
        for j in 0..n {
            let e = (row[j] - mx).exp();
            out[i * n + j] = e;
            denom += e;
        }
        for j in 0..n {
            out[i * n + j] = out[i * n + j] / denom;
        }
    }
    check_finite("row_softmax", &out)?;
    Ok(Tensor::from_op(
        m,
        n,
        out,
        vec![a.clone()],
        Box::new(move |y, dc, parents| {
            parents[0].accumulate_grad(|da| {
                for i in 0..m {
                    let mut dot = E::zero();
                    for j in 0..n {
                        dot += dc[i * n + j] * y[i * n + j];
                    }
                    for j in 0..n {
                        da[i * n + j] += y[i * n + j] * (dc[i * n + j] - dot);
                    }
                }
            });
        }),
    ))
}

/// Per-row layer normalization with learnable gain and bias (`1 x n` each).
pub fn layer_norm<E: Real>(x: &Tensor<E>, gain: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, n) = (x.rows(), x.cols());
    if gain.rows() != 1 || gain.cols() != n {
        return Err(shape_err("layer_norm", x, gain));
    }
    if bias.rows() != 1 || bias.cols() != n {
        return Err(shape_err("layer_norm", x, bias));
    }
    let eps = E::from_f64(LAYER_NORM_EPS);
    let inv_n = E::one() / E::from_f64(n as f64);
    let (xv, gv, bv) = (x.values(), gain.values(), bias.values());
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let row = &xv[i * n..(i + 1) * n];
        let mut mean = E::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = E::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let inv_std = E::one() / (var + eps).sqrt();
        for j in 0..n {
            let xhat = (row[j] - mean) * inv_std;
            out[i * n + j] = gv[j] * xhat + bv[j];
        }
    }
    check_finite("layer_norm", &out)?;
    Ok(Tensor::from_op(
        m,
        n,
        out,
        vec![x.clone(), gain.clone(), bias.clone()],
        Box::new(move |_, dc, parents| {
            let xv = parents[0].values().to_vec();
            let gv = parents[1].values().to_vec();
            // Recompute per-row statistics; cheaper than saving them.
            let mut xhat = vec![E::zero(); m * n];
            let mut inv_std = vec![E::zero(); m];
            for i in 0..m {
                let row = &xv[i * n..(i + 1) * n];
                let mut mean = E::zero();
                for &v in row {
                    mean += v;
                }
                mean *= inv_n;
                let mut var = E::zero();
                for &v in row {
                    let d = v - mean;
                    var += d * d;
                }
                var *= inv_n;
                inv_std[i] = E::one() / (var + eps).sqrt();
                for j in 0..n {
                    xhat[i * n + j] = (row[j] - mean) * inv_std[i];
                }
            }
            parents[0].accumulate_grad(|dx| {
                for i in 0..m {
                    let mut mean_dxhat = E::zero();
                    let mut mean_dxhat_xhat = E::zero();
                    for j in 0..n {
                        let dxh = dc[i * n + j] * gv[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[i * n + j];
                    }
                    mean_dxhat *= inv_n;
                    mean_dxhat_xhat *= inv_n;
                    for j in 0..n {
                        let dxh = dc[i * n + j] * gv[j];
                        dx[i * n + j] +=
                            inv_std[i] * (dxh - mean_dxhat - xhat[i * n + j] * mean_dxhat_xhat);
                    }
                }
            });
            parents[1].accumulate_grad(|dg| {
                for i in 0..m {
                    for j in 0..n {
                        dg[j] += dc[i * n + j] * xhat[i * n + j];
                    }
                }
            });
            parents[2].accumulate_grad(|db| {
                for i in 0..m {
                    for j in 0..n {
                        db[j] += dc[i * n + j];
                    }
                }
            });
        }),
    ))
}

/// Exact GELU: `x * Phi(x)` with the Gaussian CDF via erf.
pub fn gelu<E: Real>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let half = E::from_f64(0.5);
    let out: Vec<E> = a
        .values()
        .iter()
        .map(|&x| x * half * (E::one() + (x * inv_sqrt2).erf()))
        .collect();
    check_finite("gelu", &out)?;
    Ok(Tensor::from_op(
        a.rows(),
        a.cols(),
        out,
        vec![a.clone()],
        Box::new(move |_, dc, parents| {
            let inv_sqrt_2pi = E::from_f64(0.3989422804014327);
            let xv: Vec<E> = parents[0].values().to_vec();
            parents[0].accumulate_grad(|da| {
                for i in 0..da.len() {
                    let x = xv[i];
                    let cdf = half * (E::one() + (x * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                    da[i] += dc[i] * (cdf + x * pdf);
                }
            });
        }),
    ))
}

/// Concatenate along the feature (column) axis.
pub fn concat_cols<E: Real>(parts: &[Tensor<E>]) -> Result<Tensor<E>> {
    if parts.is_empty() {
        return Err(NumericsError::Invalid { op: "concat_cols", msg: "no inputs".into() });
    }
    let m = parts[0].rows();
    for p in parts {
        if p.rows() != m {
            return Err(shape_err("concat_cols", &parts[0], p));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
    let n: usize = widths.iter().sum();
    let mut out = vec![E::zero(); m * n];
    let mut offset = 0;
    for p in parts {
        let w = p.cols();
        let pv = p.values();
        for i in 0..m {
            out[i * n + offset..i * n + offset + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
        }
        offset += w;
    }
    Ok(Tensor::from_op(
        m,
        n,
        out,
        parts.to_vec(),
        Box::new(move |_, dc, parents| {
            let mut offset = 0;
            for (p, &w) in parents.iter().zip(&widths) {
                p.accumulate_grad(|dp| {
                    for i in 0..m {
                        for j in 0..w {
                            dp[i * w + j] += dc[i * n + offset + j];
                        }
                    }
                });
                offset += w;
            }
        }),
    ))
}

/// Per-row sum, `m x n -> m x 1`.
pub fn row_sum<E: Real>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, n) = (a.rows(), a.cols());
    let av = a.values();
    let mut out = vec![E::zero(); m];
    for i in 0..m {
        for j in 0..n {
            out[i] += av[i * n + j];
        }
    }
    check_finite("row_sum", &out)?;
    Ok(Tensor::from_op(
        m,
        1,
        out,
        vec![a.clone()],
        Box::new(move |_, dc, parents| {
            parents[0].accumulate_grad(|da| {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += dc[i];
                    }
                }
            });
        }),
    ))
}

/// Per-row mean, `m x n -> m x 1`.
pub fn row_mean<E: Real>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let inv_n = E::one() / E::from_f64(a.cols() as f64);
    scale(&row_sum(a)?, inv_n)
}

/// Sum of all entries, as a `1 x 1` tensor.
pub fn sum_all<E: Real>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let mut acc = E::zero();
    for &v in a.values() {
        acc += v;
    }
    let out = vec![acc];
    check_finite("sum_all", &out)?;
    Ok(Tensor::from_op(
        1,
        1,
        out,
        vec![a.clone()],
        Box::new(|_, dc, parents| {
            parents[0].accumulate_grad(|da| {
                for g in da.iter_mut() {
                    *g += dc[0];
                }
            });
        }),
    ))
}

/// Mean of all entries, as a `1 x 1` tensor.
pub fn mean_all<E: Real>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let inv = E::one() / E::from_f64(a.len() as f64);
    scale(&sum_all(a)?, inv)
}

/// Euclidean norm of all entries, as a `1 x 1` tensor.
pub fn l2_norm<E: Real>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let mut acc = E::zero();
    for &v in a.values() {
        acc += v * v;
    }
    let norm = acc.sqrt();
    check_finite("l2_norm", &[norm])?;
    Ok(Tensor::from_op(
        1,
        1,
        vec![norm],
        vec![a.clone()],
        Box::new(|y, dc, parents| {
            let norm = y[0];
            if norm > E::zero() {
                let av: Vec<E> = parents[0].values().to_vec();
                parents[0].accumulate_grad(|da| {
                    for i in 0..da.len() {
                        da[i] += dc[0] * av[i] / norm;
                    }
                });
            }
        }),
    ))
}

/// Sum of squared differences, as a `1 x 1` tensor.
pub fn squared_error<E: Real>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(shape_err("squared_error", a, b));
    }
    let mut acc = E::zero();
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let d = x - y;
        acc += d * d;
    }
    check_finite("squared_error", &[acc])?;
    let two = E::from_f64(2.0);
    Ok(Tensor::from_op(
        1,
        1,
        vec![acc],
        vec![a.clone(), b.clone()],
        Box::new(move |_, dc, parents| {
            let av: Vec<E> = parents[0].values().to_vec();
            let bv: Vec<E> = parents[1].values().to_vec();
            parents[0].accumulate_grad(|da| {
                for i in 0..da.len() {
                    da[i] += dc[0] * two * (av[i] - bv[i]);
                }
            });
            parents[1].accumulate_grad(|db| {
                for i in 0..db.len() {
                    db[i] -= dc[0] * two * (av[i] - bv[i]);
                }
            });
        }),
    ))
}

/// Per-row log-sum-exp in overflow-safe max-subtraction form, `m x n -> m x 1`.
pub fn row_logsumexp<E: Real>(a: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, n) = (a.rows(), a.cols());
    let av = a.values();
    let mut out = vec![E::zero(); m];
    for i in 0..m {
        let row = &av[i * n..(i + 1) * n];
        let mut mx = row[0];
        for &v in &row[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut acc = E::zero();
        for &v in row {
            acc += (v - mx).exp();
        }
        out[i] = mx + acc.ln();
    }
    check_finite("row_logsumexp", &out)?;
    Ok(Tensor::from_op(
        m,
        1,
        out,
        vec![a.clone()],
        Box::new(move |y, dc, parents| {
            let av: Vec<E> = parents[0].values().to_vec();
            parents[0].accumulate_grad(|da| {
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] += dc[i] * (av[i * n + j] - y[i]).exp();
                    }
                }
            });
        }),
    ))
}

/// Select rows by index (duplicates allowed), `|idx| x n` output.
pub fn gather_rows<E: Real>(a: &Tensor<E>, indices: &[usize]) -> Result<Tensor<E>> {
    let (m, n) = (a.rows(), a.cols());
    for &i in indices {
        if i >= m {
            return Err(NumericsError::RowIndex { op: "gather_rows", index: i, rows: m });
        }
    }
    let av = a.values();
    let mut out = vec![E::zero(); indices.len() * n];
    for (k, &i) in indices.iter().enumerate() {
        out[k * n..(k + 1) * n].copy_from_slice(&av[i * n..(i + 1) * n]);
    }
    let idx = indices.to_vec();
    Ok(Tensor::from_op(
        indices.len(),
        n,
        out,
        vec![a.clone()],
        Box::new(move |_, dc, parents| {
            parents[0].accumulate_grad(|da| {
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        da[i * n + j] += dc[k * n + j];
                    }
                }
            });
        }),
    ))
}

/// Copy of `a` with row `indices[k]` replaced by row `k` of `replacement`.
/// Indices must be unique and in range.
pub fn scatter_replace_rows<E: Real>(
    a: &Tensor<E>,
    indices: &[usize],
    replacement: &Tensor<E>,
) -> Result<Tensor<E>> {
    let (m, n) = (a.rows(), a.cols());
    if replacement.rows() != indices.len() || replacement.cols() != n {
        return Err(shape_err("scatter_replace_rows", a, replacement));
    }
    let mut seen = vec![false; m];
    for &i in indices {
        if i >= m {
            return Err(NumericsError::RowIndex { op: "scatter_replace_rows", index: i, rows: m });
        }
        if seen[i] {
            return Err(NumericsError::DuplicateIndex { op: "scatter_replace_rows", index: i });
        }
        seen[i] = true;
    }
    let mut out = a.values().to_vec();
    let rv = replacement.values();
    for (k, &i) in indices.iter().enumerate() {
        out[i * n..(i + 1) * n].copy_from_slice(&rv[k * n..(k + 1) * n]);
    }
    let idx = indices.to_vec();
    Ok(Tensor::from_op(
        m,
        n,
        out,
        vec![a.clone(), replacement.clone()],
        Box::new(move |_, dc, parents| {
            let replaced = {
                let mut mask = vec![false; m];
                for &i in &idx {
                    mask[i] = true;
                }
                mask
            };
            parents[0].accumulate_grad(|da| {
                for i in 0..m {
                    if !replaced[i] {
                        for j in 0..n {
                            da[i * n + j] += dc[i * n + j];
                        }
                    }
                }
            });
            parents[1].accumulate_grad(|dr| {
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..n {
                        dr[k * n + j] += dc[i * n + j];
                    }
                }
            });
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::backward;

    fn t(rows: usize, cols: usize, v: Vec<f64>) -> Tensor<f64> {
        Tensor::leaf(rows, cols, v, true)
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // pseudo-random but fixed entries
        let a = t(3, 4, vec![0.3, -1.2, 2.0, 0.7, 1.1, 0.0, -0.4, 0.9, -2.2, 1.5, 0.6, -0.8]);
        let b = t(4, 2, vec![0.5, -0.1, 1.3, 0.2, -0.7, 0.8, 0.4, -1.5]);
        let c = matmul(&a, &b).unwrap();
        // independent naive oracle
        let mut expect = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.values()[i * 4 + k] * b.values()[k * 2 + j];
                }
                expect[i * 2 + j] = s;
            }
        }
        for (got, want) in c.values().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-13);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = t(2, 3, vec![0.0; 6]);
        let b = t(2, 2, vec![0.0; 4]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
    }

    #[test]
    fn softmax_uniform_logits() {
        let x = t(1, 3, vec![0.0, 0.0, 0.0]);
        let y = row_softmax(&x).unwrap();
        for &v in y.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_on_extreme_logits() {
        let x = t(2, 3, vec![1e4, -1e4, 0.0, -1e4, -1e4, 1e4]);
        let y = row_softmax(&x).unwrap();
        for i in 0..2 {
            let s: f64 = y.values()[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let x = t(1, 4, vec![5.0; 4]);
        let g = t(1, 4, vec![1.0; 4]);
        let b = t(1, 4, vec![0.0; 4]);
        let y = layer_norm(&x, &g, &b).unwrap();
        for &v in y.values() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn logsumexp_is_overflow_safe() {
        let x = t(1, 2, vec![1e4, 1e4]);
        let y = row_logsumexp(&x).unwrap();
        assert!((y.value() - (1e4 + 2.0_f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn gather_then_backward_scatter_adds() {
        let x = t(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let g = gather_rows(&x, &[1, 1, 2]).unwrap();
        let loss = sum_all(&g).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn scatter_replace_blocks_gradient_to_replaced_rows() {
        let x = t(3, 2, vec![1.0; 6]);
        let r = t(1, 2, vec![9.0, 9.0]);
        let y = scatter_replace_rows(&x, &[1], &r).unwrap();
        assert_eq!(y.values(), &[1.0, 1.0, 9.0, 9.0, 1.0, 1.0]);
        let loss = sum_all(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(r.grad().unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn scatter_replace_rejects_duplicate_index() {
        let x = t(3, 2, vec![1.0; 6]);
        let r = t(2, 2, vec![0.0; 4]);
        assert!(matches!(
            scatter_replace_rows(&x, &[1, 1], &r),
            Err(NumericsError::DuplicateIndex { .. })
        ));
    }

    #[test]
    fn concat_cols_roundtrip_gradient() {
        let a = t(2, 1, vec![1.0, 2.0]);
        let b = t(2, 2, vec![3.0, 4.0, 5.0, 6.0]);
        let c = concat_cols(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.values(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let loss = sum_all(&c).unwrap();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn bias_broadcast_add_accumulates_column_sums() {
        let x = t(3, 2, vec![1.0; 6]);
        let b = t(1, 2, vec![0.5, -0.5]);
        let y = add(&x, &b).unwrap();
        assert_eq!(y.values(), &[1.5, 0.5, 1.5, 0.5, 1.5, 0.5]);
        let loss = sum_all(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(b.grad().unwrap(), vec![3.0, 3.0]);
    }
}
