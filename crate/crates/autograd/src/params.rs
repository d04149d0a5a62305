use std::collections::{BTreeMap, HashMap};

use ndarray::{Array1, Array2};

use crate::Matrix;

/// Handle to a trainable matrix inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable matrices.
///
/// Insertion order is stable and is the order used by optimizers and
/// serialization, so two stores built by the same constructor line up.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on a duplicate name, which is
    /// always a model-construction bug.
    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.by_name.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn num_elements(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    /// Zero matrices with the same shapes as every parameter.
    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values.iter().map(|m| Array2::zeros(m.raw_dim())).collect()
    }
}

/// Parameter gradients produced by one backward pass.
///
/// Row lookups into a parameter (embedding tables) produce sparse row
/// gradients so that a large vocabulary does not force a dense buffer per
/// example.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) dense: BTreeMap<ParamId, Matrix>,
    pub(crate) rows: BTreeMap<ParamId, BTreeMap<usize, Array1<f64>>>,
}

impl Gradients {
    pub fn is_empty(&self) -> bool {
        self.dense.is_empty() && self.rows.is_empty()
    }

    /// Parameters that received any gradient.
    pub fn touched(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.dense.keys().chain(self.rows.keys()).copied().collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Dense gradient for one parameter, or `None` if it was not reached.
    pub fn get(&self, id: ParamId, shape: (usize, usize)) -> Option<Matrix> {
        let dense = self.dense.get(&id);
        let rows = self.rows.get(&id);
        if dense.is_none() && rows.is_none() {
            return None;
        }
        let mut out = dense.cloned().unwrap_or_else(|| Array2::zeros(shape));
        if let Some(rows) = rows {
            for (&r, g) in rows {
                let mut row = out.row_mut(r);
                row += g;
            }
        }
        Some(out)
    }

    /// Adds `scale * self` into a full set of dense buffers indexed by
    /// parameter position.
    pub fn accumulate_into(&self, target: &mut [Matrix], scale: f64) {
        for (id, g) in &self.dense {
            target[id.0].scaled_add(scale, g);
        }
        for (id, rows) in &self.rows {
            let t = &mut target[id.0];
            for (&r, g) in rows {
                t.row_mut(r).scaled_add(scale, g);
            }
        }
    }

    pub(crate) fn add_dense(&mut self, id: ParamId, g: Matrix) {
        match self.dense.get_mut(&id) {
            Some(acc) => *acc += &g,
            None => {
                self.dense.insert(id, g);
            }
        }
    }

    pub(crate) fn add_row(&mut self, id: ParamId, row: usize, g: ndarray::ArrayView1<f64>) {
        let rows = self.rows.entry(id).or_default();
        match rows.get_mut(&row) {
            Some(acc) => *acc += &g,
            None => {
                rows.insert(row, g.to_owned());
            }
        }
    }
}
