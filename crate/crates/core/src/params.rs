//! Named trainable tensors shared by every model component.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tape::Matrix;
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    /// Receives decoupled weight decay in the optimizer.
    pub decay: bool,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix, decay: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            decay,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform initialisation in `±1/√fan_in`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        decay: bool,
        rng: &mut impl Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let value = Matrix::from_shape_simple_fn(shape, || rng.random_range(-bound..bound));
        self.add(name, value, decay)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn to_archive(&self) -> ParamArchive {
        ParamArchive(
            self.entries
                .iter()
                .map(|e| (e.name.clone(), TensorRecord::from(&e.value)))
                .collect(),
        )
    }

    /// Overwrites values from an archive. Every parameter must be present
    /// with a matching shape.
    pub fn load_archive(&mut self, archive: &ParamArchive) -> Result<(), Error> {
        for entry in &mut self.entries {
            let record = archive.0.get(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("parameter {} missing from archive", entry.name))
            })?;
            let value = record.to_matrix()?;
            if value.dim() != entry.value.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in archive, expected {:?}",
                    entry.name,
                    value.dim(),
                    entry.value.dim()
                )));
            }
            entry.value = value;
        }
        Ok(())
    }
}

impl ParamStore {
    /// Overwrites the parameters named in `archive`, leaving the rest
    /// untouched. Unknown names are rejected.
    pub fn load_matching(&mut self, archive: &ParamArchive) -> Result<usize, Error> {
        for (name, record) in &archive.0 {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("archive parameter {name} is unknown")))?;
            let value = record.to_matrix()?;
            if value.dim() != self.value(id).dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?} in archive, expected {:?}",
                    value.dim(),
                    self.value(id).dim()
                )));
            }
            *self.value_mut(id) = value;
        }
        Ok(archive.0.len())
    }
}

/// Serialized form of a matrix; `f64` values round-trip exactly through JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Matrix> for TensorRecord {
    fn from(m: &Matrix) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        }
    }
}

impl TensorRecord {
    pub fn to_matrix(&self) -> Result<Matrix, Error> {
        Matrix::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("bad tensor record: {e}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamArchive(pub BTreeMap<String, TensorRecord>);
