//! Pointwise coupling norms, their dual-ball projections, small SVDs and
//! the joint Haar-wavelet machinery.

use crate::error::{Error, Result};
use crate::grid::{sym_weights, Coupling, MultiImage, SymTensorField, VectorField};

/// Dense row-major d×N matrix with d ≤ 3.
#[derive(Clone, Debug, PartialEq)]
pub struct SmallMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SmallMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || rows > 3 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "small matrix must be d×N with 1 ≤ d ≤ 3, N ≥ 1; got {rows}×{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{rows}×{cols} matrix from {} values",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("small matrix".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn gram(&self) -> [[f64; 3]; 3] {
        let mut g = [[0.0; 3]; 3];
        for a in 0..self.rows {
            for b in a..self.rows {
                let mut s = 0.0;
                for c in 0..self.cols {
                    s += self.get(a, c) * self.get(b, c);
                }
                g[a][b] = s;
                g[b][a] = s;
            }
        }
        g
    }
}

/// Thin SVD `M = U diag(σ) Vᵀ` of a d×N matrix.
#[derive(Clone, Debug)]
pub struct SmallSvd {
    /// d×d, orthonormal columns.
    pub u: SmallMatrix,
    /// Descending, nonnegative.
    pub sigma: Vec<f64>,
    /// N×d; columns belonging to zero singular values are zero.
    pub v: SmallMatrix,
}

/// Symmetric eigendecomposition of the leading d×d block, eigenvalues
/// descending, eigenvectors as columns.
fn sym_eigen(a: [[f64; 3]; 3], d: usize) -> ([f64; 3], [[f64; 3]; 3]) {
    match d {
        1 => ([a[0][0], 0.0, 0.0], [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        2 => {
            let (p, q, r) = (a[0][0], a[0][1], a[1][1]);
            let mean = 0.5 * (p + r);
            let rad = (0.5 * (p - r)).hypot(q);
            let theta = 0.5 * (2.0 * q).atan2(p - r);
            let (s, c) = theta.sin_cos();
            (
                [mean + rad, mean - rad, 0.0],
                [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
            )
        }
        _ => jacobi_eigen3(a),
    }
}

/// Cyclic Jacobi on a symmetric 3×3 matrix.
fn jacobi_eigen3(mut a: [[f64; 3]; 3]) -> ([f64; 3], [[f64; 3]; 3]) {
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let scale = (0..3).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for _sweep in 0..50 {
        let off = a[0][1].abs() + a[0][2].abs() + a[1][2].abs();
        if off <= 1e-18 * scale {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap_or(std::cmp::Ordering::Equal));
    let vals = [a[order[0]][order[0]], a[order[1]][order[1]], a[order[2]][order[2]]];
    let mut vecs = [[0.0; 3]; 3];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..3 {
            vecs[row][col] = v[row][src];
        }
    }
    (vals, vecs)
}

/// Left singular vectors (columns of the returned array) and singular values
/// via the d×d Gram matrix.
fn left_factors(m: &SmallMatrix) -> ([[f64; 3]; 3], [f64; 3]) {
    let d = m.rows;
    let (_, vecs) = sym_eigen(m.gram(), d);
    let mut sig = [0.0; 3];
    for (k, s) in sig.iter_mut().enumerate().take(d) {
        // ‖Mᵀu_k‖ is more accurate than the square root of the eigenvalue
        let mut acc = 0.0;
        for c in 0..m.cols {
            let mut t = 0.0;
            for r in 0..d {
                t += vecs[r][k] * m.get(r, c);
            }
            acc += t * t;
        }
        *s = acc.sqrt();
    }
    (vecs, sig)
}

pub fn svd_small(m: &SmallMatrix) -> SmallSvd {
    let d = m.rows;
    let (vecs, sig) = left_factors(m);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| sig[j].partial_cmp(&sig[i]).unwrap_or(std::cmp::Ordering::Equal));
    let mut u = SmallMatrix::zeros(d, d);
    let mut v = SmallMatrix::zeros(m.cols, d);
    let mut sigma = Vec::with_capacity(d);
    for (k, &src) in order.iter().enumerate() {
        for r in 0..d {
            u.set(r, k, vecs[r][src]);
        }
        let s = sig[src];
        sigma.push(s);
        if s > 0.0 {
            for c in 0..m.cols {
                let mut t = 0.0;
                for r in 0..d {
                    t += vecs[r][src] * m.get(r, c);
                }
                v.set(c, k, t / s);
            }
        }
    }
    SmallSvd { u, sigma, v }
}

/// Singular values, descending.
pub fn singular_values(m: &SmallMatrix) -> Vec<f64> {
    let (_, sig) = left_factors(m);
    let mut s: Vec<f64> = sig[..m.rows].to_vec();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    s
}

/// Projection onto the spectral-norm ball of radius `alpha`: singular values
/// are clipped at `alpha`, singular vectors kept.
pub fn clip_spectral(m: &SmallMatrix, alpha: f64) -> SmallMatrix {
    let d = m.rows;
    let (vecs, sig) = left_factors(m);
    if sig[..d].iter().all(|&s| s <= alpha) {
        return m.clone();
    }
    // M' = Σ_k s_k u_k (u_kᵀ M) with s_k = min(1, α/σ_k)
    let mut out = SmallMatrix::zeros(d, m.cols);
    for k in 0..d {
        let shrink = if sig[k] > alpha { alpha / sig[k] } else { 1.0 };
        for c in 0..m.cols {
            let mut t = 0.0;
            for r in 0..d {
                t += vecs[r][k] * m.get(r, c);
            }
            let t = t * shrink;
            for r in 0..d {
                let cur = out.get(r, c);
                out.set(r, c, cur + vecs[r][k] * t);
            }
        }
    }
    out
}

/// Per-site projection onto the dual ball `{|z(x)|_* ≤ alpha}` of the
/// coupling norm. Frobenius is self-dual; the dual of the nuclear norm is the
/// spectral norm.
pub fn project_dual_ball_vector(z: &VectorField, alpha: f64, coupling: Coupling) -> VectorField {
    let mut out = z.clone();
    project_dual_ball_vector_in_place(&mut out, alpha, coupling);
    out
}

pub fn project_dual_ball_vector_in_place(z: &mut VectorField, alpha: f64, coupling: Coupling) {
    let sites = z.grid().sites();
    let len = z.channels() * z.grid().ndim();
    match coupling {
        Coupling::Frobenius => {
            for chunk in z.values_mut().chunks_exact_mut(len) {
                let nrm = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
                let f = (nrm / alpha).max(1.0);
                if f > 1.0 {
                    chunk.iter_mut().for_each(|x| *x /= f);
                }
            }
        }
        Coupling::Nuclear => {
            for s in 0..sites {
                let b = z.block(s);
                let clipped = clip_spectral(&b, alpha);
                z.set_block(s, &clipped);
            }
        }
    }
}

/// Second-order dual ball, always Frobenius (full-matrix norm, off-diagonals
/// counted twice).
pub fn project_dual_ball_sym(q: &SymTensorField, alpha: f64) -> SymTensorField {
    let mut out = q.clone();
    project_dual_ball_sym_in_place(&mut out, alpha);
    out
}

pub fn project_dual_ball_sym_in_place(q: &mut SymTensorField, alpha: f64) {
    let w = sym_weights(q.grid().ndim());
    let m = w.len();
    let len = q.channels() * m;
    for chunk in q.values_mut().chunks_exact_mut(len) {
        let nrm = chunk
            .iter()
            .enumerate()
            .map(|(k, x)| w[k % m] * x * x)
            .sum::<f64>()
            .sqrt();
        let f = (nrm / alpha).max(1.0);
        if f > 1.0 {
            chunk.iter_mut().for_each(|x| *x /= f);
        }
    }
}

/// Scale each per-coefficient channel vector to ℓ² norm at most `alpha`.
pub fn project_group_l2ball(shat: &MultiImage, alpha: f64) -> MultiImage {
    let mut out = shat.clone();
    project_group_l2ball_in_place(&mut out, alpha);
    out
}

pub fn project_group_l2ball_in_place(s: &mut MultiImage, alpha: f64) {
    let n = s.channels();
    for chunk in s.values_mut().chunks_exact_mut(n) {
        let nrm = chunk.iter().map(|x| x * x).sum::<f64>().sqrt();
        let f = (nrm / alpha).max(1.0);
        if f > 1.0 {
            chunk.iter_mut().for_each(|x| *x /= f);
        }
    }
}

/// ‖z‖_{2,1}: sum over coefficient indices of the channel ℓ² norm.
pub fn group_l21_norm(z: &MultiImage) -> f64 {
    z.values()
        .chunks_exact(z.channels())
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum()
}

fn check_haar_dims(u: &MultiImage, levels: usize) -> Result<()> {
    let block = 1usize
        .checked_shl(levels as u32)
        .ok_or_else(|| Error::InvalidArgument(format!("{levels} wavelet levels")))?;
    if let Some(&bad) = u.grid().dims().iter().find(|&&n| n % block != 0) {
        return Err(Error::InvalidArgument(format!(
            "axis length {bad} not divisible by 2^{levels}"
        )));
    }
    Ok(())
}

/// Visit every line along `axis` inside the sub-block `extent`, calling `f`
/// with the site indices of the line.
fn for_each_line(dims: &[usize], extent: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let d = dims.len();
    let mut strides = vec![1usize; d];
    for k in (0..d.saturating_sub(1)).rev() {
        strides[k] = strides[k + 1] * dims[k + 1];
    }
    let others: Vec<usize> = (0..d).filter(|&k| k != axis).collect();
    let count: usize = others.iter().map(|&k| extent[k]).product();
    let mut idx = vec![0usize; d];
    let mut line = vec![0usize; extent[axis]];
    for mut flat in 0..count {
        for &k in others.iter().rev() {
            idx[k] = flat % extent[k];
            flat /= extent[k];
        }
        let base: usize = others.iter().map(|&k| idx[k] * strides[k]).sum();
        for (i, l) in line.iter_mut().enumerate() {
            *l = base + i * strides[axis];
        }
        f(&line);
    }
}

/// Orthonormal multilevel Haar transform, applied channel-wise. Coefficients
/// are stored in Mallat layout on the same grid.
pub fn haar_forward(u: &MultiImage, levels: usize) -> Result<MultiImage> {
    check_haar_dims(u, levels)?;
    let mut out = u.clone();
    let dims = u.grid().dims().to_vec();
    let n = u.channels();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut buf = Vec::new();
    for level in 0..levels {
        let extent: Vec<usize> = dims.iter().map(|&m| m >> level).collect();
        for axis in 0..dims.len() {
            let half = extent[axis] / 2;
            let vals = out.values_mut();
            for_each_line(&dims, &extent, axis, |line| {
                for c in 0..n {
                    buf.clear();
                    buf.extend(line.iter().map(|&s| vals[s * n + c]));
                    for i in 0..half {
                        let (a, b) = (buf[2 * i], buf[2 * i + 1]);
                        vals[line[i] * n + c] = (a + b) * h;
                        vals[line[half + i] * n + c] = (a - b) * h;
                    }
                }
            });
        }
    }
    Ok(out)
}

/// Inverse (= adjoint) of [`haar_forward`].
pub fn haar_inverse(coeffs: &MultiImage, levels: usize) -> Result<MultiImage> {
    check_haar_dims(coeffs, levels)?;
    let mut out = coeffs.clone();
    let dims = coeffs.grid().dims().to_vec();
    let n = coeffs.channels();
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let mut buf = Vec::new();
    for level in (0..levels).rev() {
        let extent: Vec<usize> = dims.iter().map(|&m| m >> level).collect();
        for axis in (0..dims.len()).rev() {
            let half = extent[axis] / 2;
            let vals = out.values_mut();
            for_each_line(&dims, &extent, axis, |line| {
                for c in 0..n {
                    buf.clear();
                    buf.extend(line.iter().map(|&s| vals[s * n + c]));
                    for i in 0..half {
                        let (a, b) = (buf[i], buf[half + i]);
                        vals[line[2 * i] * n + c] = (a + b) * h;
                        vals[line[2 * i + 1] * n + c] = (a - b) * h;
                    }
                }
            });
        }
    }
    Ok(out)
}
