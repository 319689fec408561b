//! Canonical domain types: label registry, per-cell records, dataset
//! containers, and stratified splitting.

use crate::error::{Error, Result};
use crate::seeds;
use rand::seq::SliceRandom;
use std::collections::BTreeMap;

/// One entry of the harmonized white-blood-cell label scheme.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassLabel {
    pub id: u32,
    pub name: &'static str,
}

const CANONICAL_NAMES: [&str; 13] = [
    "basophil",
    "eosinophil",
    "erythroblast",
    "myeloblast",
    "promyelocyte",
    "myelocyte",
    "metamyelocyte",
    "neutrophil_banded",
    "neutrophil_segmented",
    "monocyte",
    "lymphocyte_typical",
    "lymphocyte_atypical",
    "smudge_cell",
];

/// The fixed 13-class registry. Ids are contiguous from 0 in the order
/// of [`CANONICAL_NAMES`]; synthetic datasets may use a prefix subset.
pub fn canonical_labels() -> Vec<ClassLabel> {
    CANONICAL_NAMES
        .iter()
        .enumerate()
        .map(|(i, &name)| ClassLabel { id: i as u32, name })
        .collect()
}

/// Dataset-of-origin tag. Domain 0 is always the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DomainId(pub u32);

impl DomainId {
    pub fn is_anchor(self) -> bool {
        self.0 == 0
    }
}

/// 8-bit RGB image stored channel-major (`data[c*S*S + y*S + x]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub side: usize,
    pub data: Vec<u8>,
}

impl ImageU8 {
    pub fn new(side: usize) -> Self {
        Self {
            side,
            data: vec![0; 3 * side * side],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[c * self.side * self.side + y * self.side + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: u8) {
        self.data[c * self.side * self.side + y * self.side + x] = v;
    }

    /// Pixels as `f32` in `[0, 1]`, same channel-major layout.
    pub fn to_unit_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32 / 255.0).collect()
    }
}

/// One detected cell: its instance feature vector, crop, origin domain,
/// and (optionally) a class label.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceRecord {
    pub record_id: u64,
    pub features: Vec<f32>,
    pub image: ImageU8,
    pub domain: DomainId,
    pub label: Option<u32>,
}

/// Dataset-wide metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetMeta {
    /// Feature vector length.
    pub feature_dim: usize,
    /// Image side in pixels.
    pub image_side: usize,
    /// Number of classes (labels are in `[0, num_classes)`).
    pub num_classes: u32,
    /// Number of domains (domains are in `[0, num_domains)`).
    pub num_domains: u32,
    pub seed: u64,
    pub generator_version: u32,
}

/// Ordered collection of records plus metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<InstanceRecord>,
    meta: DatasetMeta,
}

impl Dataset {
    /// Validates every record against `meta`: domain and label ranges,
    /// uniform dimensions, finite features, and record ids contiguous
    /// from 0.
    pub fn new(records: Vec<InstanceRecord>, meta: DatasetMeta) -> Result<Self> {
        for (i, rec) in records.iter().enumerate() {
            if rec.record_id != i as u64 {
                return Err(Error::Config(format!(
                    "record ids must be contiguous from 0; position {i} has id {}",
                    rec.record_id
                )));
            }
            if rec.domain.0 >= meta.num_domains {
                return Err(Error::Config(format!(
                    "record {} domain {} out of range (K = {})",
                    rec.record_id, rec.domain.0, meta.num_domains
                )));
            }
            if let Some(label) = rec.label {
                if label >= meta.num_classes {
                    return Err(Error::Config(format!(
                        "record {} label {} out of range (C = {})",
                        rec.record_id, label, meta.num_classes
                    )));
                }
            }
            if rec.features.len() != meta.feature_dim {
                return Err(Error::Config(format!(
                    "record {} has {} features, expected {}",
                    rec.record_id,
                    rec.features.len(),
                    meta.feature_dim
                )));
            }
            if rec.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "record {} has non-finite features",
                    rec.record_id
                )));
            }
            if rec.image.side != meta.image_side
                || rec.image.data.len() != 3 * meta.image_side * meta.image_side
            {
                return Err(Error::Config(format!(
                    "record {} image side {} does not match dataset side {}",
                    rec.record_id, rec.image.side, meta.image_side
                )));
            }
        }
        Ok(Self { records, meta })
    }

    pub fn records(&self) -> &[InstanceRecord] {
        &self.records
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// New dataset from a subset of record indices, ids renumbered
    /// contiguously in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let records = indices
            .iter()
            .enumerate()
            .map(|(new_id, &i)| {
                let mut rec = self.records[i].clone();
                rec.record_id = new_id as u64;
                rec
            })
            .collect();
        Dataset::new(records, self.meta)
    }
}

/// Stratified train/test split parameters.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Index-level split, stratified per (label, domain) cell.
///
/// Returned indices refer to positions in the input dataset; use
/// [`Dataset::subset`] to materialize each side.
#[derive(Debug, Clone)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Computes a stratified split without materializing new datasets.
///
/// Per (label, domain) cell the test share is `round(n * (1 - f))`,
/// clamped so that any cell with >= 2 members contributes at least one
/// record to each side, and at least one test record is taken once a
/// cell reaches 5 members. Deterministic given `spec.seed`.
pub fn stratified_split_indices(ds: &Dataset, spec: &SplitSpec) -> Result<SplitIndices> {
    if ds.is_empty() {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must be in (0, 1), got {}",
            spec.train_fraction
        )));
    }

    let mut cells: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, rec) in ds.records().iter().enumerate() {
        let label = rec.label.ok_or(Error::UnlabeledRecord(rec.record_id))?;
        cells.entry((label, rec.domain.0)).or_default().push(i);
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (&(label, domain), members) in &cells {
        let n = members.len();
        let mut test_count = ((n as f64) * (1.0 - spec.train_fraction)).round() as usize;
        if n >= 5 {
            test_count = test_count.max(1);
        }
        if n >= 2 {
            test_count = test_count.clamp(1, n - 1);
        } else {
            test_count = 0;
        }

        let mut shuffled = members.clone();
        let mut rng = seeds::rng(spec.seed, &[u64::from(label), u64::from(domain)]);
        shuffled.shuffle(&mut rng);
        test.extend_from_slice(&shuffled[..test_count]);
        train.extend_from_slice(&shuffled[test_count..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Stratified split into two materialized datasets (train, test).
pub fn stratified_split(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset)> {
    let idx = stratified_split_indices(ds, spec)?;
    Ok((ds.subset(&idx.train)?, ds.subset(&idx.test)?))
}
