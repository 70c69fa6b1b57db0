use std::ops::Range;

use crate::error::{Error, Result};

/// Ordered `(name, shape)` table mapping a flat vector onto named tensors.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<(String, Vec<usize>)>,
    len: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its range in the flat vector.
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) -> Range<usize> {
        let size: usize = shape.iter().product();
        let start = self.len;
        self.entries.push((name.into(), shape.to_vec()));
        self.len += size;
        start..self.len
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn entries(&self) -> &[(String, Vec<usize>)] {
        &self.entries
    }

    pub fn range(&self, name: &str) -> Option<Range<usize>> {
        let mut start = 0;
        for (n, shape) in &self.entries {
            let size: usize = shape.iter().product();
            if n == name {
                return Some(start..start + size);
            }
            start += size;
        }
        None
    }

    /// Concatenates two layouts, prefixing every name.
    pub fn concat(&self, prefix_a: &str, other: &Layout, prefix_b: &str) -> Layout {
        let mut out = Layout::new();
        for (n, s) in &self.entries {
            out.push(format!("{prefix_a}{n}"), s);
        }
        for (n, s) in &other.entries {
            out.push(format!("{prefix_b}{n}"), s);
        }
        out
    }
}

/// A flat parameter vector together with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        ParamVector {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if layout.len() != values.len() {
            return Err(Error::Shape {
                expected: layout.len(),
                got: values.len(),
            });
        }
        Ok(ParamVector { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Splits the flat vector into one owned tensor per layout entry.
    pub fn unflatten(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::with_capacity(self.layout.entries.len());
        let mut start = 0;
        for (name, shape) in &self.layout.entries {
            let size: usize = shape.iter().product();
            out.push((name.clone(), self.values[start..start + size].to_vec()));
            start += size;
        }
        out
    }

    pub fn flatten(layout: Layout, parts: &[(String, Vec<f64>)]) -> Result<Self> {
        let values: Vec<f64> = parts.iter().flat_map(|(_, v)| v.iter().copied()).collect();
        Self::new(layout, values)
    }

    pub fn section(&self, name: &str) -> Option<&[f64]> {
        self.layout.range(name).map(|r| &self.values[r])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scaled(alpha: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| alpha * v).collect()
}
