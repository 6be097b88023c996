//! Rectangular grids and the multi-channel fields living on them.
//!
//! Storage is flat and site-major: site index is C-ordered over `dims`
//! (last axis fastest), channels vary fastest within a site, and for vector
//! and tensor fields the per-channel components vary fastest of all.

use crate::coupling::{singular_values, SmallMatrix};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    dims: Vec<usize>,
    spacing: Vec<f64>,
}

impl Grid {
    pub fn new(dims: &[usize]) -> Result<Self> {
        Self::with_spacing(dims, &vec![1.0; dims.len()])
    }

    pub fn with_spacing(dims: &[usize], spacing: &[f64]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::InvalidGrid(format!(
                "dimension must be 1, 2 or 3, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("zero-length axis in {dims:?}")));
        }
        if spacing.len() != dims.len() || spacing.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::InvalidGrid(format!("bad spacing {spacing:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn sites(&self) -> usize {
        self.dims.iter().product()
    }

    /// Site-index stride of each axis.
    pub fn strides(&self) -> Vec<usize> {
        let d = self.dims.len();
        let mut s = vec![1; d];
        for k in (0..d.saturating_sub(1)).rev() {
            s[k] = s[k + 1] * self.dims[k + 1];
        }
        s
    }

    /// Multi-index of a site; unused trailing axes are zero.
    pub fn coords(&self, site: usize) -> [usize; 3] {
        let mut c = [0; 3];
        let mut rem = site;
        for k in (0..self.dims.len()).rev() {
            c[k] = rem % self.dims[k];
            rem /= self.dims[k];
        }
        c
    }

    /// Number of stored components of a symmetric d×d tensor.
    pub fn sym_len(&self) -> usize {
        let d = self.ndim();
        d * (d + 1) / 2
    }
}

/// Position of entry (a, b), a ≤ b, in upper-triangle storage of a d×d
/// symmetric matrix: row by row, (0,0), (0,1), …, (0,d-1), (1,1), …
pub fn sym_index(d: usize, a: usize, b: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * d - a * a.saturating_sub(1) / 2 + b - a
}

/// Inner-product multiplicity of each stored symmetric component.
pub fn sym_weights(d: usize) -> Vec<f64> {
    let mut w = Vec::with_capacity(d * (d + 1) / 2);
    for a in 0..d {
        for b in a..d {
            w.push(if a == b { 1.0 } else { 2.0 });
        }
    }
    w
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

macro_rules! field_common {
    ($name:ident, $what:literal) => {
        impl $name {
            pub fn zeros(grid: &Grid, channels: usize) -> Self {
                let comps = Self::components_for(grid);
                Self {
                    grid: grid.clone(),
                    channels,
                    values: vec![0.0; grid.sites() * channels * comps],
                }
            }

            pub fn from_values(grid: &Grid, channels: usize, values: Vec<f64>) -> Result<Self> {
                if channels == 0 {
                    return Err(Error::InvalidArgument("channel count must be ≥ 1".into()));
                }
                let want = grid.sites() * channels * Self::components_for(grid);
                if values.len() != want {
                    return shape_err(format!(
                        "{} needs {want} values, got {}",
                        $what,
                        values.len()
                    ));
                }
                check_finite(&values, $what)?;
                Ok(Self {
                    grid: grid.clone(),
                    channels,
                    values,
                })
            }

            pub fn grid(&self) -> &Grid {
                &self.grid
            }

            pub fn channels(&self) -> usize {
                self.channels
            }

            /// Components stored per (site, channel).
            pub fn components(&self) -> usize {
                Self::components_for(&self.grid)
            }

            pub fn values(&self) -> &[f64] {
                &self.values
            }

            pub fn values_mut(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn into_values(self) -> Vec<f64> {
                self.values
            }

            pub fn same_shape(&self, other: &Self) -> bool {
                self.grid == other.grid && self.channels == other.channels
            }

            pub fn check_shape(&self, other: &Self) -> Result<()> {
                if self.same_shape(other) {
                    Ok(())
                } else {
                    shape_err(format!(
                        "{}: {:?}×{} vs {:?}×{}",
                        $what,
                        self.grid.dims(),
                        self.channels,
                        other.grid.dims(),
                        other.channels
                    ))
                }
            }

            pub fn is_finite(&self) -> bool {
                self.values.iter().all(|x| x.is_finite())
            }

            /// self ← self + a·x
            pub fn axpy(&mut self, a: f64, x: &Self) {
                debug_assert!(self.same_shape(x));
                for (s, &xv) in self.values.iter_mut().zip(&x.values) {
                    *s += a * xv;
                }
            }

            pub fn scale(&mut self, a: f64) {
                self.values.iter_mut().for_each(|v| *v *= a);
            }

            /// Norm induced by [`Self::inner_product`].
            pub fn norm(&self) -> f64 {
                self.inner_unchecked(self).sqrt()
            }

            pub fn inner_product(&self, other: &Self) -> Result<f64> {
                self.check_shape(other)?;
                Ok(self.inner_unchecked(other))
            }
        }
    };
}

/// N-channel scalar field.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiImage {
    grid: Grid,
    channels: usize,
    values: Vec<f64>,
}

field_common!(MultiImage, "MultiImage");

impl MultiImage {
    fn components_for(_: &Grid) -> usize {
        1
    }

    pub(crate) fn inner_unchecked(&self, other: &Self) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn filled(grid: &Grid, channels: usize, value: f64) -> Self {
        let mut m = Self::zeros(grid, channels);
        m.values.iter_mut().for_each(|x| *x = value);
        m
    }

    /// Stack single-channel images into one multi-channel image.
    pub fn from_channels(grid: &Grid, channels: &[Vec<f64>]) -> Result<Self> {
        let n = channels.len();
        let sites = grid.sites();
        if n == 0 {
            return Err(Error::InvalidArgument("no channels".into()));
        }
        let mut values = vec![0.0; sites * n];
        for (c, ch) in channels.iter().enumerate() {
            if ch.len() != sites {
                return shape_err(format!("channel {c} has {} values, grid has {sites}", ch.len()));
            }
            for (s, &x) in ch.iter().enumerate() {
                values[s * n + c] = x;
            }
        }
        Self::from_values(grid, n, values)
    }

    pub fn get(&self, site: usize, channel: usize) -> f64 {
        self.values[site * self.channels + channel]
    }

    pub fn set(&mut self, site: usize, channel: usize, value: f64) {
        self.values[site * self.channels + channel] = value;
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    pub fn set_channel(&mut self, c: usize, data: &[f64]) {
        let n = self.channels;
        for (s, &x) in data.iter().enumerate() {
            self.values[s * n + c] = x;
        }
    }
}

/// Per-site d-vectors per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField {
    grid: Grid,
    channels: usize,
    values: Vec<f64>,
}

field_common!(VectorField, "VectorField");

impl VectorField {
    fn components_for(grid: &Grid) -> usize {
        grid.ndim()
    }

    pub(crate) fn inner_unchecked(&self, other: &Self) -> f64 {
        dot(&self.values, &other.values)
    }

    /// The d×N block at a site: rows are axes, columns channels.
    pub fn block(&self, site: usize) -> SmallMatrix {
        let d = self.grid.ndim();
        let n = self.channels;
        let base = site * n * d;
        let mut m = SmallMatrix::zeros(d, n);
        for c in 0..n {
            for k in 0..d {
                m.set(k, c, self.values[base + c * d + k]);
            }
        }
        m
    }

    pub fn set_block(&mut self, site: usize, m: &SmallMatrix) {
        let d = self.grid.ndim();
        let n = self.channels;
        let base = site * n * d;
        for c in 0..n {
            for k in 0..d {
                self.values[base + c * d + k] = m.get(k, c);
            }
        }
    }

    /// All components of one site, channel-major then axis.
    pub fn site_slice(&self, site: usize) -> &[f64] {
        let len = self.channels * self.grid.ndim();
        &self.values[site * len..(site + 1) * len]
    }
}

/// Per-site symmetric d×d matrices per channel, upper triangle stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SymTensorField {
    grid: Grid,
    channels: usize,
    values: Vec<f64>,
}

field_common!(SymTensorField, "SymTensorField");

impl SymTensorField {
    fn components_for(grid: &Grid) -> usize {
        grid.sym_len()
    }

    /// Equals the full-matrix Frobenius inner product summed over sites and channels.
    pub(crate) fn inner_unchecked(&self, other: &Self) -> f64 {
        let w = sym_weights(self.grid.ndim());
        let m = w.len();
        let mut acc = 0.0;
        for (k, (a, b)) in self.values.iter().zip(&other.values).enumerate() {
            acc += w[k % m] * a * b;
        }
        acc
    }

    pub fn site_slice(&self, site: usize) -> &[f64] {
        let len = self.channels * self.grid.sym_len();
        &self.values[site * len..(site + 1) * len]
    }

    /// Full symmetric matrix entry (a, b) of a channel at a site.
    pub fn entry(&self, site: usize, channel: usize, a: usize, b: usize) -> f64 {
        let d = self.grid.ndim();
        let m = self.grid.sym_len();
        self.values[(site * self.channels + channel) * m + sym_index(d, a, b)]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pointwise coupling of channels in ℓ¹-type norms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Coupling {
    /// Root of the sum of squares of the whole per-site block.
    Frobenius,
    /// Sum of singular values of the per-site d×N block.
    Nuclear,
}

/// Fields on which a coupled ℓ¹ norm is defined.
pub enum CoupledField<'a> {
    Vector(&'a VectorField),
    SymTensor(&'a SymTensorField),
}

impl<'a> From<&'a VectorField> for CoupledField<'a> {
    fn from(f: &'a VectorField) -> Self {
        CoupledField::Vector(f)
    }
}

impl<'a> From<&'a SymTensorField> for CoupledField<'a> {
    fn from(f: &'a SymTensorField) -> Self {
        CoupledField::SymTensor(f)
    }
}

/// Pointwise norm of a vector field block at one site.
pub fn vector_site_norm(field: &VectorField, site: usize, coupling: Coupling) -> f64 {
    match coupling {
        Coupling::Frobenius => field.site_slice(site).iter().map(|x| x * x).sum::<f64>().sqrt(),
        Coupling::Nuclear => singular_values(&field.block(site)).iter().sum(),
    }
}

/// Frobenius norm of the stacked symmetric matrices at one site.
pub fn sym_site_norm(field: &SymTensorField, site: usize) -> f64 {
    let w = sym_weights(field.grid().ndim());
    field
        .site_slice(site)
        .iter()
        .enumerate()
        .map(|(k, x)| w[k % w.len()] * x * x)
        .sum::<f64>()
        .sqrt()
}

/// Σ over sites of the pointwise coupling norm.
///
/// Symmetric tensor fields are always measured with the Frobenius norm;
/// asking for nuclear coupling on them is rejected.
pub fn coupled_l1_norm<'a>(z: impl Into<CoupledField<'a>>, coupling: Coupling) -> Result<f64> {
    match z.into() {
        CoupledField::Vector(f) => Ok((0..f.grid().sites())
            .map(|s| vector_site_norm(f, s, coupling))
            .sum()),
        CoupledField::SymTensor(f) => {
            if coupling == Coupling::Nuclear {
                return Err(Error::InvalidArgument(
                    "nuclear coupling is only defined for vector fields".into(),
                ));
            }
            Ok((0..f.grid().sites()).map(|s| sym_site_norm(f, s)).sum())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sym_index_enumerates_upper_triangle() {
        for d in 1..=3 {
            let mut k = 0;
            for a in 0..d {
                for b in a..d {
                    assert_eq!(sym_index(d, a, b), k);
                    assert_eq!(sym_index(d, b, a), k);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn grid_rejects_bad_dims() {
        assert!(Grid::new(&[]).is_err());
        assert!(Grid::new(&[2, 2, 2, 2]).is_err());
        assert!(Grid::new(&[3, 0]).is_err());
        assert!(Grid::with_spacing(&[3], &[0.0]).is_err());
        let g = Grid::new(&[2, 3, 4]).unwrap();
        assert_eq!(g.sites(), 24);
        assert_eq!(g.strides(), vec![12, 4, 1]);
        assert_eq!(g.coords(13), [1, 0, 1]);
    }

    #[test]
    fn ones_inner_product() {
        let g = Grid::new(&[2, 2]).unwrap();
        let a = MultiImage::filled(&g, 1, 1.0);
        assert_eq!(a.inner_product(&a).unwrap(), 4.0);
    }

    #[test]
    fn unit_field_picks_entry() {
        let g = Grid::new(&[3, 2]).unwrap();
        let b = MultiImage::from_values(&g, 2, (0..12).map(|x| x as f64 * 0.5 - 1.0).collect())
            .unwrap();
        for k in 0..12 {
            let mut e = MultiImage::zeros(&g, 2);
            e.values_mut()[k] = 1.0;
            assert_eq!(e.inner_product(&b).unwrap(), b.values()[k]);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let g = Grid::new(&[2, 2]).unwrap();
        let h = Grid::new(&[4]).unwrap();
        let a = MultiImage::zeros(&g, 1);
        assert!(a.inner_product(&MultiImage::zeros(&h, 1)).is_err());
        assert!(a.inner_product(&MultiImage::zeros(&g, 2)).is_err());
        assert!(MultiImage::from_values(&g, 1, vec![0.0; 3]).is_err());
        assert!(MultiImage::from_values(&g, 1, vec![f64::NAN; 4]).is_err());
    }

    #[test]
    fn sym_inner_product_matches_full_matrix_sum() {
        let g = Grid::new(&[2, 3, 2]).unwrap();
        let n = 2;
        let m = g.sym_len();
        let len = g.sites() * n * m;
        let a: Vec<f64> = (0..len).map(|k| ((k * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let b: Vec<f64> = (0..len).map(|k| ((k * 17 % 7) as f64 - 3.0) * 0.7).collect();
        let fa = SymTensorField::from_values(&g, n, a).unwrap();
        let fb = SymTensorField::from_values(&g, n, b).unwrap();
        let mut full = 0.0;
        for s in 0..g.sites() {
            for c in 0..n {
                for i in 0..3 {
                    for j in 0..3 {
                        full += fa.entry(s, c, i, j) * fb.entry(s, c, i, j);
                    }
                }
            }
        }
        let got = fa.inner_product(&fb).unwrap();
        assert!((got - full).abs() <= 1e-12 * full.abs().max(1.0));
    }

    #[test]
    fn coupled_norm_examples() {
        let g = Grid::new(&[1, 1]).unwrap();
        let z = VectorField::zeros(&g, 3);
        assert_eq!(coupled_l1_norm(&z, Coupling::Frobenius).unwrap(), 0.0);
        assert_eq!(coupled_l1_norm(&z, Coupling::Nuclear).unwrap(), 0.0);

        let z = VectorField::from_values(&g, 1, vec![3.0, 4.0]).unwrap();
        assert!((coupled_l1_norm(&z, Coupling::Frobenius).unwrap() - 5.0).abs() < 1e-15);

        // columns (1,0) and (0,1)
        let z = VectorField::from_values(&g, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((coupled_l1_norm(&z, Coupling::Nuclear).unwrap() - 2.0).abs() < 1e-12);
        assert!((coupled_l1_norm(&z, Coupling::Frobenius).unwrap() - 2f64.sqrt()).abs() < 1e-12);

        let q = SymTensorField::zeros(&g, 1);
        assert!(coupled_l1_norm(&q, Coupling::Nuclear).is_err());
    }
}
