use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Ix2, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Insertion-ordered collection of named parameter arrays.
///
/// Names are unique and shapes are fixed once an entry is inserted; the only
/// mutation allowed afterwards is through [`ParamStore::get_mut`] (values).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f64>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ArrayD<f64>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("missing parameter `{name}`")))
    }

    pub fn matrix(&self, name: &str) -> Result<ArrayView2<'_, f64>> {
        self.get(name)?
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Shape(format!("`{name}` is not a matrix: {e}")))
    }

    pub fn matrix_mut(&mut self, name: &str) -> Result<ArrayViewMut2<'_, f64>> {
        self.get_mut(name)?
            .view_mut()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Shape(format!("`{name}` is not a matrix: {e}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ArrayD<f64>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Same names and shapes, all values zero.
    pub fn zeros_like(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
            .collect();
        Self { entries }
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Errors unless `other` has exactly the same names (in order) and shapes.
    pub fn check_compatible(&self, other: &ParamStore) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Shape(format!(
                "parameter count mismatch: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(other.entries.iter()) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::Shape(format!(
                    "parameter mismatch: `{ka}` {:?} vs `{kb}` {:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    /// Name of the first entry holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.as_str())
    }

    pub(crate) fn to_records(&self) -> IndexMap<String, ParamRecord> {
        self.entries
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    ParamRecord {
                        shape: v.shape().to_vec(),
                        data: v.iter().copied().collect(),
                    },
                )
            })
            .collect()
    }

    pub(crate) fn from_records(records: IndexMap<String, ParamRecord>) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, rec) in records {
            let value = ArrayD::from_shape_vec(IxDyn(&rec.shape), rec.data)
                .map_err(|e| Error::Shape(format!("`{name}`: {e}")))?;
            store.insert(name, value)?;
        }
        Ok(store)
    }
}

/// Serialized form of one parameter: shape plus row-major values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_duplicate_names() {
        let mut p = ParamStore::new();
        p.insert("w", ArrayD::zeros(IxDyn(&[2, 2]))).unwrap();
        assert!(matches!(
            p.insert("w", ArrayD::zeros(IxDyn(&[1]))),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn preserves_insertion_order() {
        let mut p = ParamStore::new();
        for name in ["z", "a", "m"] {
            p.insert(name, ArrayD::zeros(IxDyn(&[1]))).unwrap();
        }
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["z", "a", "m"]);
    }

    #[test]
    fn compatibility_checks_shapes() {
        let mut a = ParamStore::new();
        a.insert("w", ArrayD::zeros(IxDyn(&[2, 3]))).unwrap();
        let mut b = ParamStore::new();
        b.insert("w", ArrayD::zeros(IxDyn(&[3, 2]))).unwrap();
        assert!(a.check_compatible(&a.zeros_like()).is_ok());
        assert!(a.check_compatible(&b).is_err());
    }
}
