//! Named parameter collections.
//!
//! A [`ParamTree`] maps dotted parameter names to tensors and always
//! iterates in lexicographic name order, so every traversal — snapshots,
//! serialization, aggregation, optimizer steps — sees parameters in the
//! same sequence. Two trees are congruent when they hold the same names
//! with the same shapes; federation only ever combines congruent trees.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Plain-data copy of one named tensor. Unlike [`Tensor`] this is `Send`,
/// so snapshots can cross threads and the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Plain-data copy of a whole tree, sorted by name.
pub type TreeSnapshot<T> = Vec<TreeEntry<T>>;

/// Ordered map from dotted parameter names to tensors. Cloning is
/// shallow: both trees refer to the same tensors, like [`ParamTree::subset`].
#[derive(Default, Clone)]
pub struct ParamTree<T: Element> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamTree<T> {
    pub fn new() -> Self {
        ParamTree {
            map: BTreeMap::new(),
        }
    }

    /// Inserts a tensor under `name`; duplicate names are construction bugs.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name:?}")));
        }
        self.map.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    /// Like [`ParamTree::get`] but missing names are contract violations.
    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name:?}")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Name-ordered iteration.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<&str> {
        self.map.keys().map(|k| k.as_str()).collect()
    }

    /// New tree holding the parameters whose names satisfy `pred`; tensors
    /// are shared, not copied.
    pub fn subset(&self, pred: impl Fn(&str) -> bool) -> ParamTree<T> {
        let map = self
            .map
            .iter()
            .filter(|(k, _)| pred(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        ParamTree { map }
    }

    /// Total number of scalar elements across all parameters.
    pub fn element_count(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    /// Plain-data copy of every parameter, in name order.
    pub fn snapshot(&self) -> TreeSnapshot<T> {
        self.map
            .iter()
            .map(|(k, v)| TreeEntry {
                name: k.clone(),
                shape: v.shape().to_vec(),
                data: v.data().clone(),
            })
            .collect()
    }

    /// Copies snapshot values into existing tensors. Every snapshot entry
    /// must match a present parameter in name and shape; parameters absent
    /// from the snapshot keep their values.
    pub fn load_snapshot(&self, snapshot: &TreeSnapshot<T>) -> Result<()> {
        for entry in snapshot {
            let tensor = self.map.get(&entry.name).ok_or_else(|| {
                Error::protocol(format!(
                    "snapshot entry {:?} has no matching parameter",
                    entry.name
                ))
            })?;
            if tensor.shape() != entry.shape.as_slice() {
                return Err(Error::protocol(format!(
                    "snapshot entry {:?} has shape {:?}, parameter expects {:?}",
                    entry.name,
                    entry.shape,
                    tensor.shape()
                )));
            }
            tensor.copy_from_slice(&entry.data)?;
        }
        Ok(())
    }

    /// Rebuilds a tree of plain leaves (no gradients) from a snapshot.
    pub fn from_snapshot(snapshot: &TreeSnapshot<T>) -> Result<ParamTree<T>> {
        let mut tree = ParamTree::new();
        for entry in snapshot {
            tree.insert(
                entry.name.clone(),
                Tensor::from_vec(&entry.shape, entry.data.clone())?,
            )?;
        }
        Ok(tree)
    }

    /// Verifies that both trees hold the same names with the same shapes.
    pub fn check_congruent(&self, other: &ParamTree<T>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::protocol(format!(
                "trees hold {} and {} parameters",
                self.len(),
                other.len()
            )));
        }
        for ((na, ta), (nb, tb)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(Error::protocol(format!(
                    "parameter names diverge: {na:?} vs {nb:?}"
                )));
            }
            if ta.shape() != tb.shape() {
                return Err(Error::protocol(format!(
                    "parameter {na:?} has shapes {:?} vs {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for t in self.map.values() {
            t.zero_grad();
        }
    }
}

/// Verifies that snapshots hold the same names and shapes in the same order.
pub fn check_snapshots_congruent<T: PartialEq>(
    a: &TreeSnapshot<T>,
    b: &TreeSnapshot<T>,
) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::protocol(format!(
            "snapshots hold {} and {} entries",
            a.len(),
            b.len()
        )));
    }
    for (ea, eb) in a.iter().zip(b.iter()) {
        if ea.name != eb.name {
            return Err(Error::protocol(format!(
                "snapshot names diverge: {:?} vs {:?}",
                ea.name, eb.name
            )));
        }
        if ea.shape != eb.shape {
            return Err(Error::protocol(format!(
                "snapshot entry {:?} has shapes {:?} vs {:?}",
                ea.name, ea.shape, eb.shape
            )));
        }
    }
    Ok(())
}

/// Converts a snapshot to another element precision.
pub fn convert_snapshot<A: Element, B: Element>(snapshot: &TreeSnapshot<A>) -> TreeSnapshot<B> {
    snapshot
        .iter()
        .map(|e| TreeEntry {
            name: e.name.clone(),
            shape: e.shape.clone(),
            data: e.data.iter().map(|&v| B::from_f64(v.to_f64())).collect(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree_with(names: &[(&str, &[usize])]) -> ParamTree<f64> {
        let mut tree = ParamTree::new();
        for (name, shape) in names {
            tree.insert(*name, Tensor::zeros(shape).unwrap()).unwrap();
        }
        tree
    }

    #[test]
    fn iteration_is_name_ordered() {
        let tree = tree_with(&[("zeta", &[1]), ("alpha.b", &[2]), ("alpha.a", &[3])]);
        assert_eq!(tree.names(), vec!["alpha.a", "alpha.b", "zeta"]);
    }

    #[test]
    fn duplicate_insert_rejected() {
        let mut tree = tree_with(&[("w", &[2])]);
        let err = tree.insert("w", Tensor::zeros(&[2]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn subset_shares_tensors() {
        let tree = tree_with(&[("enc.w", &[2]), ("dec.w", &[2])]);
        let enc = tree.subset(|n| n.starts_with("enc."));
        assert_eq!(enc.names(), vec!["enc.w"]);
        enc.get("enc.w").unwrap().data_mut()[0] = 7.0;
        assert_eq!(tree.get("enc.w").unwrap().data()[0], 7.0);
    }

    #[test]
    fn snapshot_roundtrip_restores_values() {
        let tree = tree_with(&[("a", &[2]), ("b", &[1])]);
        tree.get("a").unwrap().data_mut().copy_from_slice(&[1.5, -2.5]);
        let snap = tree.snapshot();
        tree.get("a").unwrap().data_mut().copy_from_slice(&[0.0, 0.0]);
        tree.load_snapshot(&snap).unwrap();
        assert_eq!(*tree.get("a").unwrap().data(), vec![1.5, -2.5]);
    }

    #[test]
    fn load_rejects_unknown_names_and_bad_shapes() {
        let tree = tree_with(&[("a", &[2])]);
        let unknown = vec![TreeEntry {
            name: "zz".into(),
            shape: vec![2],
            data: vec![0.0; 2],
        }];
        assert!(matches!(tree.load_snapshot(&unknown), Err(Error::Protocol(_))));
        let bad_shape = vec![TreeEntry {
            name: "a".into(),
            shape: vec![3],
            data: vec![0.0; 3],
        }];
        assert!(matches!(tree.load_snapshot(&bad_shape), Err(Error::Protocol(_))));
    }

    #[test]
    fn congruence_detects_shape_drift() {
        let a = tree_with(&[("w", &[2])]);
        let b = tree_with(&[("w", &[3])]);
        assert!(a.check_congruent(&b).is_err());
        let c = tree_with(&[("w", &[2])]);
        assert!(a.check_congruent(&c).is_ok());
    }

    #[test]
    fn partial_load_keeps_other_params() {
        let tree = tree_with(&[("keep", &[1]), ("load", &[1])]);
        tree.get("keep").unwrap().data_mut()[0] = 5.0;
        let snap = vec![TreeEntry {
            name: "load".into(),
            shape: vec![1],
            data: vec![9.0],
        }];
        tree.load_snapshot(&snap).unwrap();
        assert_eq!(tree.get("keep").unwrap().data()[0], 5.0);
        assert_eq!(tree.get("load").unwrap().data()[0], 9.0);
    }
}
