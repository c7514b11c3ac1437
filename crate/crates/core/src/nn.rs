//! Exact intra-identity nearest-neighbour search over feature embeddings.
//!
//! Given the embedding of a generated sample and its predicted identity, the
//! search ranks the training instances of that identity by squared L2
//! distance. Ties are broken by ascending sample id, which makes results
//! independent of entry order.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::identity::IdentityId;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub sample_id: String,
    pub identity: IdentityId,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    entries: Vec<Embedding>,
    by_identity: BTreeMap<IdentityId, Vec<usize>>,
    by_sample: HashMap<String, usize>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, entries: Vec<Embedding>) -> Result<Self> {
        let mut by_identity: BTreeMap<IdentityId, Vec<usize>> = BTreeMap::new();
        let mut by_sample = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.vector.len() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "sample `{}` has {} components, expected {dim}",
                    e.sample_id,
                    e.vector.len()
                )));
            }
            if by_sample.insert(e.sample_id.clone(), i).is_some() {
                return Err(Error::InvalidSpec(format!(
                    "duplicate embedding sample id `{}`",
                    e.sample_id
                )));
            }
            by_identity.entry(e.identity).or_default().push(i);
        }
        Ok(EmbeddingSet {
            dim,
            entries,
            by_identity,
            by_sample,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Embedding] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, sample_id: &str) -> Option<&Embedding> {
        self.by_sample.get(sample_id).map(|&i| &self.entries[i])
    }

    pub fn identity_size(&self, identity: IdentityId) -> usize {
        self.by_identity.get(&identity).map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub sample_id: String,
    pub distance_sq: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NnResult {
    /// Non-decreasing distances.
    pub neighbors: Vec<Neighbor>,
    /// Fewer than `k` candidates were available.
    pub truncated: bool,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// The `k` training instances of `identity` closest to `query`.
pub fn nearest_intra_identity(
    query: &[f64],
    identity: IdentityId,
    set: &EmbeddingSet,
    k: usize,
) -> Result<NnResult> {
    nearest_excluding(query, identity, set, k, None)
}

/// Same as [`nearest_intra_identity`], skipping the entry named `exclude`
/// (used when the query itself is stored in the searched set).
pub fn nearest_excluding(
    query: &[f64],
    identity: IdentityId,
    set: &EmbeddingSet,
    k: usize,
    exclude: Option<&str>,
) -> Result<NnResult> {
    if k == 0 {
        return Err(Error::InvalidAttack("k must be at least 1".into()));
    }
    if query.len() != set.dim {
        return Err(Error::DimensionMismatch(format!(
            "query has {} components, embeddings have {}",
            query.len(),
            set.dim
        )));
    }
    let members = set
        .by_identity
        .get(&identity)
        .ok_or(Error::UnknownIdentity(identity))?;
    let mut scored: Vec<(f64, &str)> = members
        .iter()
        .map(|&i| &set.entries[i])
        .filter(|e| Some(e.sample_id.as_str()) != exclude)
        .map(|e| (squared_distance(query, &e.vector), e.sample_id.as_str()))
        .collect();
    if scored.is_empty() {
        return Err(Error::UnknownIdentity(identity));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let truncated = scored.len() < k;
    scored.truncate(k);
    Ok(NnResult {
        neighbors: scored
            .into_iter()
            .map(|(d, id)| Neighbor {
                sample_id: id.to_string(),
                distance_sq: d,
            })
            .collect(),
        truncated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactRow {
    pub query_id: String,
    /// 1-based.
    pub rank: usize,
    pub neighbor_id: String,
    pub distance_sq: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ContactSheet {
    pub rows: Vec<ContactRow>,
    /// Queries whose identity had fewer than `k` candidates.
    pub truncated: Vec<String>,
}

/// One block of rows per query: the generated sample beside its `k` nearest
/// training instances of the predicted identity.
///
/// Query vectors are looked up by sample id in `query_vectors`; a query is
/// never returned as its own neighbour.
pub fn contact_sheet_manifest(
    queries: &[(String, IdentityId)],
    candidates: &EmbeddingSet,
    query_vectors: &EmbeddingSet,
    k: usize,
) -> Result<ContactSheet> {
    let mut sheet = ContactSheet::default();
    for (query_id, identity) in queries {
        let q = query_vectors
            .get(query_id)
            .ok_or_else(|| Error::MissingEmbedding(query_id.clone()))?;
        let res = nearest_excluding(&q.vector, *identity, candidates, k, Some(query_id))?;
        if res.truncated {
            sheet.truncated.push(query_id.clone());
        }
        sheet.rows.extend(
            res.neighbors
                .into_iter()
                .enumerate()
                .map(|(i, n)| ContactRow {
                    query_id: query_id.clone(),
                    rank: i + 1,
                    neighbor_id: n.sample_id,
                    distance_sq: n.distance_sq,
                }),
        );
    }
    Ok(sheet)
}
