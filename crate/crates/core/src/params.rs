//! Named parameter tensors shared by every layer of a model.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable tensors receive gradients and the L2 penalty; buffers hold
/// running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Trainable,
    Buffer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Array2<f64>,
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order for serialization and optimizer state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, kind, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind == ParamKind::Trainable)
            .map(|(i, _)| ParamId(i))
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.len()).sum()
    }

    /// Sum of squares over all trainable tensors.
    pub fn l2_norm_sq(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .flat_map(|e| e.value.iter())
            .map(|v| v * v)
            .sum()
    }

    /// Replaces a tensor's values, checking the shape.
    pub fn set(&mut self, id: ParamId, value: Array2<f64>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "{}: expected {:?}, got {:?}",
                entry.name,
                entry.value.dim(),
                value.dim()
            )));
        }
        entry.value = value;
        Ok(())
    }

    /// One row per tensor: name, shape and scalar count.
    pub fn census(&self) -> Vec<CensusRow> {
        self.entries
            .iter()
            .map(|e| CensusRow {
                name: e.name.clone(),
                kind: e.kind,
                shape: [e.value.nrows(), e.value.ncols()],
                count: e.value.len(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CensusRow {
    pub name: String,
    pub kind: ParamKind,
    pub shape: [usize; 2],
    pub count: usize,
}

/// Renders a census as a fixed-width text table.
pub fn format_census(rows: &[CensusRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
    let mut out = format!("{:<width$}  {:>12}  {:>10}\n", "name", "shape", "count");
    let mut total = 0;
    for r in rows.iter().filter(|r| r.kind == ParamKind::Trainable) {
        let shape = format!("{}x{}", r.shape[0], r.shape[1]);
        out.push_str(&format!("{:<width$}  {:>12}  {:>10}\n", r.name, shape, r.count));
        total += r.count;
    }
    out.push_str(&format!("{:<width$}  {:>12}  {:>10}\n", "total", "", total));
    out
}

/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn fan_in_uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}
