//! Named parameter tensors with gradient slots and trainable flags.

use std::collections::HashMap;

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Ordered collection of parameters. Iteration follows insertion order, which
/// is also the order entries are written to checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        value: Vec<f64>,
        trainable: bool,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` already exists"
            )));
        }
        if shape.iter().product::<usize>() != value.len() {
            return Err(shape_err(format!(
                "parameter `{}` shape {:?} does not hold {} values",
                name,
                shape,
                value.len()
            )));
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            grad: vec![0.0; value.len()],
            name,
            shape,
            value,
            trainable,
        });
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&ParamEntry> {
        Ok(self.get(self.require(name)?))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamEntry)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    /// Total number of scalar values across entries accepted by `filter`.
    pub fn count_values(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.entries
            .iter()
            .filter(|e| filter(&e.name))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Set the trainable flag on every entry whose name matches `selector`.
    /// Returns the number of entries matched; zero is logged as a warning.
    pub fn set_trainable(&mut self, selector: impl Fn(&str) -> bool, flag: bool) -> usize {
        let mut matched = 0;
        for e in &mut self.entries {
            if selector(&e.name) {
                e.trainable = flag;
                if !flag {
                    e.grad.iter_mut().for_each(|g| *g = 0.0);
                }
                matched += 1;
            }
        }
        if matched == 0 {
            log::warn!("set_trainable selector matched no parameters");
        }
        matched
    }

    pub fn trainable_flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.trainable).collect()
    }

    /// Round all values to `f32` precision, matching what a checkpoint stores.
    pub fn quantize_f32(&mut self) {
        for e in &mut self.entries {
            for v in &mut e.value {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Copy of all values, used for snapshots such as EWC anchors.
    pub fn values_snapshot(&self) -> Vec<Vec<f64>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        let e = &mut self.entries[id.0];
        if !e.trainable {
            return;
        }
        for (g, d) in e.grad.iter_mut().zip(grad) {
            *g += d;
        }
    }
}
