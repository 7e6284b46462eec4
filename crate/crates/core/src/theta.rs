//! The flat parameter vector θ and its named-slice layout.

use alloc::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::prelude::*;

/// Minimum eigenvalue enforced on PD-constrained slices.
pub const EPS_PD: f64 = 1e-6;

/// Shape of one named slice of θ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceKind {
    Scalar,
    Vector,
    /// Dense matrix stored row-major.
    Matrix {
        rows: usize,
        cols: usize,
    },
    /// Symmetric matrix stored as its lower triangle, row-major:
    /// entry `(i, j)` with `j <= i` lives at `i(i+1)/2 + j`.
    Symmetric {
        n: usize,
    },
}

impl SliceKind {
    pub fn parse(kind: &str) -> Option<Self> {
        if kind == "scalar" {
            return Some(Self::Scalar);
        }
        if kind == "vector" {
            return Some(Self::Vector);
        }
        if let Some(rest) = kind.strip_prefix("sym") {
            return rest.parse().ok().map(|n| Self::Symmetric { n });
        }
        if let Some(rest) = kind.strip_prefix("matrix") {
            let (r, c) = rest.split_once('x')?;
            return Some(Self::Matrix { rows: r.parse().ok()?, cols: c.parse().ok()? });
        }
        None
    }

    /// Storage length implied by the shape; `None` for vectors.
    pub fn storage_len(&self) -> Option<usize> {
        match *self {
            Self::Scalar => Some(1),
            Self::Vector => None,
            Self::Matrix { rows, cols } => Some(rows * cols),
            Self::Symmetric { n } => Some(n * (n + 1) / 2),
        }
    }
}

impl core::fmt::Display for SliceKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match *self {
            Self::Scalar => write!(f, "scalar"),
            Self::Vector => write!(f, "vector"),
            Self::Matrix { rows, cols } => write!(f, "matrix{rows}x{cols}"),
            Self::Symmetric { n } => write!(f, "sym{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Slice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub kind: SliceKind,
    /// Projected onto `>= EPS_PD` eigenvalues after every learning update.
    pub pd: bool,
}

/// Ordered, gap-free list of named slices.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ThetaLayout {
    slices: Vec<Slice>,
    len: usize,
}

impl ThetaLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a slice at the end of the layout.
    pub fn push(&mut self, name: &str, kind: SliceKind, len: usize, pd: bool) -> Result<()> {
        if self.find(name).is_some() {
            return Err(Error::Layout(format!("duplicate slice `{name}`")));
        }
        if let Some(expected) = kind.storage_len() {
            if expected != len {
                return Err(Error::Layout(format!(
                    "slice `{name}` of kind {kind} must have length {expected}, got {len}"
                )));
            }
        }
        if len == 0 {
            return Err(Error::Layout(format!("slice `{name}` is empty")));
        }
        if pd && !matches!(kind, SliceKind::Symmetric { .. }) {
            return Err(Error::Layout(format!("slice `{name}` is marked PD but is not symmetric")));
        }
        self.slices.push(Slice { name: name.to_string(), offset: self.len, len, kind, pd });
        self.len += len;
        Ok(())
    }

    pub fn with(mut self, name: &str, kind: SliceKind, len: usize, pd: bool) -> Result<Self> {
        self.push(name, kind, len, pd)?;
        Ok(self)
    }

    /// Rebuilds a layout from explicit `(name, offset, len, kind, pd)` records,
    /// checking that they tile `0..total` without gaps or overlap.
    pub fn from_slices(slices: Vec<Slice>) -> Result<Self> {
        let mut layout = Self::new();
        for s in slices {
            if s.offset != layout.len {
                return Err(Error::Layout(format!(
                    "slice `{}` starts at {} but the previous slices end at {}",
                    s.name, s.offset, layout.len
                )));
            }
            layout.push(&s.name, s.kind, s.len, s.pd)?;
        }
        Ok(layout)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn find(&self, name: &str) -> Option<&Slice> {
        self.slices.iter().find(|s| s.name == name)
    }

    pub fn get(&self, name: &str) -> Result<&Slice> {
        self.find(name).ok_or_else(|| Error::Layout(format!("missing slice `{name}`")))
    }

    /// Slice owning flat index `i`, with the position inside the slice.
    pub fn locate(&self, i: usize) -> Option<(&Slice, usize)> {
        self.slices.iter().find(|s| i >= s.offset && i < s.offset + s.len).map(|s| (s, i - s.offset))
    }

    /// Human-readable label of flat index `i`, e.g. `A[0,1]`.
    pub fn label(&self, i: usize) -> String {
        match self.locate(i) {
            None => format!("#{i}"),
            Some((s, k)) => match s.kind {
                SliceKind::Scalar => s.name.clone(),
                SliceKind::Vector => format!("{}[{k}]", s.name),
                SliceKind::Matrix { cols, .. } => format!("{}[{},{}]", s.name, k / cols, k % cols),
                SliceKind::Symmetric { .. } => {
                    let (r, c) = tri_position(k);
                    format!("{}[{r},{c}]", s.name)
                }
            },
        }
    }
}

/// Position `(i, j)`, `j <= i`, of lower-triangle storage index `k`.
pub fn tri_position(k: usize) -> (usize, usize) {
    let mut i = 0;
    while (i + 1) * (i + 2) / 2 <= k {
        i += 1;
    }
    (i, k - i * (i + 1) / 2)
}

pub fn tri_index(i: usize, j: usize) -> usize {
    let (i, j) = if j > i { (j, i) } else { (i, j) };
    i * (i + 1) / 2 + j
}

/// Derivative of a symmetric slice w.r.t. its `k`-th stored entry.
pub fn sym_unit(n: usize, k: usize) -> DMatrix<f64> {
    let (i, j) = tri_position(k);
    let mut e = DMatrix::zeros(n, n);
    e[(i, j)] = 1.0;
    e[(j, i)] = 1.0;
    e
}

/// Parameter values together with their (shared) layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaVector {
    layout: Arc<ThetaLayout>,
    values: Vec<f64>,
}

impl ThetaVector {
    pub fn zeros(layout: ThetaLayout) -> Self {
        let n = layout.len();
        Self { layout: Arc::new(layout), values: vec![0.0; n] }
    }

    pub fn from_values(layout: ThetaLayout, values: Vec<f64>) -> Result<Self> {
        Self::with_shared_layout(Arc::new(layout), values)
    }

    pub fn with_shared_layout(layout: Arc<ThetaLayout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::Layout(format!("layout has {} entries, got {} values", layout.len(), values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("theta contains non-finite values".to_string()));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &ThetaLayout {
        &self.layout
    }

    pub fn shared_layout(&self) -> Arc<ThetaLayout> {
        self.layout.clone()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn raw(&self, name: &str) -> Result<&[f64]> {
        let s = self.layout.get(name)?;
        Ok(&self.values[s.offset..s.offset + s.len])
    }

    pub fn raw_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let s = self.layout.get(name)?.clone();
        Ok(&mut self.values[s.offset..s.offset + s.len])
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let s = self.expect(name, |k| matches!(k, SliceKind::Scalar))?;
        Ok(self.values[s.offset])
    }

    pub fn vector(&self, name: &str) -> Result<DVector<f64>> {
        let s = self.expect(name, |k| matches!(k, SliceKind::Vector | SliceKind::Scalar))?;
        Ok(DVector::from_column_slice(&self.values[s.offset..s.offset + s.len]))
    }

    pub fn matrix(&self, name: &str) -> Result<DMatrix<f64>> {
        let s = self.expect(name, |k| matches!(k, SliceKind::Matrix { .. }))?;
        let SliceKind::Matrix { rows, cols } = s.kind else { unreachable!() };
        Ok(DMatrix::from_row_slice(rows, cols, &self.values[s.offset..s.offset + s.len]))
    }

    /// Reconstructs a symmetric slice; the result is exactly symmetric.
    pub fn symmetric(&self, name: &str) -> Result<DMatrix<f64>> {
        let s = self.expect(name, |k| matches!(k, SliceKind::Symmetric { .. }))?;
        let SliceKind::Symmetric { n } = s.kind else { unreachable!() };
        let v = &self.values[s.offset..s.offset + s.len];
        Ok(DMatrix::from_fn(n, n, |i, j| v[tri_index(i, j)]))
    }

    pub fn set_scalar(&mut self, name: &str, v: f64) -> Result<()> {
        self.raw_mut(name)?[0] = v;
        Ok(())
    }

    pub fn set_raw(&mut self, name: &str, v: &[f64]) -> Result<()> {
        let dst = self.raw_mut(name)?;
        if dst.len() != v.len() {
            return Err(Error::Layout(format!("slice `{name}` has length {}, got {}", dst.len(), v.len())));
        }
        dst.copy_from_slice(v);
        Ok(())
    }

    /// Stores a matrix into a `Matrix` (row-major) or `Symmetric` slice.
    pub fn set_matrix(&mut self, name: &str, m: &DMatrix<f64>) -> Result<()> {
        let s = self.layout.get(name)?.clone();
        let dst = &mut self.values[s.offset..s.offset + s.len];
        match s.kind {
            SliceKind::Matrix { rows, cols } if (rows, cols) == m.shape() => {
                for i in 0..rows {
                    for j in 0..cols {
                        dst[i * cols + j] = m[(i, j)];
                    }
                }
            }
            SliceKind::Symmetric { n } if (n, n) == m.shape() => {
                for i in 0..n {
                    for j in 0..=i {
                        dst[tri_index(i, j)] = m[(i, j)];
                    }
                }
            }
            _ => {
                return Err(Error::Layout(format!("slice `{name}` ({}) cannot hold a {:?} matrix", s.kind, m.shape())))
            }
        }
        Ok(())
    }

    /// Copy with the same layout and new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::with_shared_layout(self.layout.clone(), values)
    }

    /// Projects every PD-constrained slice onto `{H : λ_min(H) >= EPS_PD}` by
    /// eigenvalue clamping. Returns whether any slice changed.
    pub fn project_pd(&mut self) -> bool {
        let mut changed = false;
        let pd: Vec<Slice> = self.layout.slices().iter().filter(|s| s.pd).cloned().collect();
        for s in pd {
            let m = self.symmetric(&s.name).expect("PD slices are symmetric");
            if let Some(p) = linalg::clamp_eigenvalues(&m, EPS_PD) {
                self.set_matrix(&s.name, &p).expect("same shape");
                changed = true;
            }
        }
        changed
    }

    fn expect(&self, name: &str, ok: impl Fn(&SliceKind) -> bool) -> Result<&Slice> {
        let s = self.layout.get(name)?;
        if !ok(&s.kind) {
            return Err(Error::Layout(format!("slice `{name}` has unexpected kind {}", s.kind)));
        }
        Ok(s)
    }
}
