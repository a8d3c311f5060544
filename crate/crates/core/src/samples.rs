use crate::{Error, Result};

/// `n` points in `d`-dimensional space, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    data: Vec<f64>,
    dim: usize,
}

impl SampleSet {
    pub fn new(data: Vec<f64>, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("sample dimension must be positive"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::input(format!(
                "{} values cannot be split into points of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { data, dim })
    }

    /// One-dimensional samples.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self {
            data: values.to_vec(),
            dim: 1,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(1);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::input("rows have inconsistent dimensions"));
        }
        Self::new(rows.concat(), dim)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    /// Flat row-major storage; for `d = 1` this is the list of scalars.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Subset in the given index order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.point(i));
        }
        Self {
            data,
            dim: self.dim,
        }
    }

    /// Applies `x -> (x - shift) / scale` coordinate-wise.
    pub fn affine(&self, shift: f64, scale: f64) -> Self {
        Self {
            data: self.data.iter().map(|x| (x - shift) / scale).collect(),
            dim: self.dim,
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len().max(1) as f64;
        let mut m = vec![0.0; self.dim];
        for p in self.iter() {
            for (acc, v) in m.iter_mut().zip(p) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }
}
