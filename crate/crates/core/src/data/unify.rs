//! Cross-dataset identity unification.
//!
//! Training identities of all datasets are merged into one contiguous label
//! range. Two raw identities denote the same person only when declared so,
//! either through a shared `identity_namespace` or an explicit [`Correspondence`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};

/// Declares that `(dataset_a, id_a)` and `(dataset_b, id_b)` are the same person.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correspondence {
    pub dataset_a: String,
    pub id_a: u64,
    pub dataset_b: String,
    pub id_b: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentityMap {
    /// `(dataset index, raw id) -> unified label`
    labels: BTreeMap<(usize, u64), usize>,
    num_identities: usize,
}

impl IdentityMap {
    pub fn num_identities(&self) -> usize {
        self.num_identities
    }

    pub fn label(&self, dataset: usize, raw: u64) -> Option<usize> {
        self.labels.get(&(dataset, raw)).copied()
    }

    /// Unified label of every entry of `manifest` (`None` for test-only identities).
    pub fn remap(&self, dataset: usize, manifest: &DatasetManifest) -> Vec<Option<usize>> {
        manifest
            .entries
            .iter()
            .map(|e| match e.split {
                Split::Train => self.label(dataset, e.identity),
                _ => None,
            })
            .collect()
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

pub fn unify_identities(
    manifests: &[&DatasetManifest],
    declared: &[Correspondence],
) -> Result<IdentityMap> {
    let mut nodes: Vec<(usize, u64)> = Vec::new();
    for (d, m) in manifests.iter().enumerate() {
        nodes.extend(m.train_identities().into_iter().map(|id| (d, id)));
    }
    let index: BTreeMap<(usize, u64), usize> =
        nodes.iter().enumerate().map(|(i, &k)| (k, i)).collect();
    let mut sets = DisjointSet::new(nodes.len());

    for (da, ma) in manifests.iter().enumerate() {
        let Some(ns) = &ma.meta.identity_namespace else {
            continue;
        };
        for (db, mb) in manifests.iter().enumerate().skip(da + 1) {
            if mb.meta.identity_namespace.as_ref() != Some(ns) {
                continue;
            }
            for id in ma.train_identities().intersection(&mb.train_identities()) {
                sets.union(index[&(da, *id)], index[&(db, *id)]);
            }
        }
    }

    let dataset_index = |name: &str| -> Result<usize> {
        let hits: Vec<usize> = manifests
            .iter()
            .enumerate()
            .filter(|(_, m)| m.meta.name == name)
            .map(|(i, _)| i)
            .collect();
        match hits.as_slice() {
            [i] => Ok(*i),
            [] => Err(Error::Data(format!(
                "correspondence names unknown dataset '{name}'"
            ))),
            _ => Err(Error::Data(format!("dataset name '{name}' is ambiguous"))),
        }
    };
    for c in declared {
        let a = (dataset_index(&c.dataset_a)?, c.id_a);
        let b = (dataset_index(&c.dataset_b)?, c.id_b);
        let lookup = |k: (usize, u64)| {
            index.get(&k).copied().ok_or_else(|| {
                Error::Data(format!(
                    "correspondence references identity {} with no training images in '{}'",
                    k.1, manifests[k.0].meta.name
                ))
            })
        };
        sets.union(lookup(a)?, lookup(b)?);
    }

    // A merged person may hold at most one raw id per dataset.
    let mut members: BTreeMap<usize, BTreeMap<usize, u64>> = BTreeMap::new();
    for (i, &(d, id)) in nodes.iter().enumerate() {
        let root = sets.find(i);
        if let Some(prev) = members.entry(root).or_default().insert(d, id) {
            return Err(Error::Data(format!(
                "conflicting correspondences merge identities {prev} and {id} of dataset '{}'",
                manifests[d].meta.name
            )));
        }
    }

    let mut root_label: BTreeMap<usize, usize> = BTreeMap::new();
    let mut labels = BTreeMap::new();
    for (i, &key) in nodes.iter().enumerate() {
        let root = sets.find(i);
        let next = root_label.len();
        let label = *root_label.entry(root).or_insert(next);
        labels.insert(key, label);
    }
    Ok(IdentityMap {
        labels,
        num_identities: root_label.len(),
    })
}
