//! Dataset ingestion, train/test splits, and few-shot sampling.
//!
//! A dataset lives at `<root>/<name>/images/*.{jpg,png}` with
//! filename-matched masks under `<root>/<name>/masks/`. Manifests sort
//! records lexicographically by sample id, so loading is deterministic
//! across platforms. Manifests are immutable once built.

mod imaging;

pub use imaging::{
    load_mask_original, prepare_sample, resize_bilinear, restore_to_original, ImageTensor,
    Normalization, PreparedSample, DEFAULT_MASK_THRESHOLD, DEFAULT_RESTORE_THRESHOLD,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::geometry::Dimensions;

/// Shot counts studied by the few-shot experiments.
pub const SUPPORTED_SHOT_COUNTS: [usize; 6] = [1, 5, 10, 20, 50, 100];

/// One image/mask pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    /// (width, height) from the image file header; predictions are scored
    /// at this resolution.
    pub original_size: (u32, u32),
}

impl SampleRecord {
    pub fn original_dimensions(&self) -> Dimensions {
        Dimensions::new(self.original_size.0, self.original_size.1)
    }
}

/// Which stage of the pipeline a manifest feeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetRole {
    Train,
    Test,
    UnseenTest,
}

impl fmt::Display for DatasetRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetRole::Train => write!(f, "train"),
            DatasetRole::Test => write!(f, "test"),
            DatasetRole::UnseenTest => write!(f, "unseen-test"),
        }
    }
}

/// An ordered, deduplicated list of samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    name: String,
    role: DatasetRole,
    records: Vec<SampleRecord>,
}

impl DatasetManifest {
    /// Builds a manifest from records, sorting by sample id.
    ///
    /// # Panics
    /// If two records share a sample id.
    pub fn from_records(
        name: impl Into<String>,
        role: DatasetRole,
        mut records: Vec<SampleRecord>,
    ) -> Self {
        records.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        for pair in records.windows(2) {
            assert_ne!(
                pair[0].sample_id, pair[1].sample_id,
                "duplicate sample id in manifest"
            );
        }
        Self {
            name: name.into(),
            role,
            records,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn role(&self) -> DatasetRole {
        self.role
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn sample_ids(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.sample_id.as_str())
    }

    fn with_records(&self, role: DatasetRole, records: Vec<SampleRecord>) -> Self {
        Self::from_records(self.name.clone(), role, records)
    }
}

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

fn scan_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>, DataError> {
    let mut found = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    for entry in entries {
        let entry = entry.map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let path = entry.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        found.insert(stem, path);
    }
    Ok(found)
}

/// Load a dataset from `<root>/<name>`, pairing images with masks by
/// file stem. Every unmatched file on either side is an error.
pub fn load_manifest(root: &Path, name: &str) -> Result<DatasetManifest, DataError> {
    let base = root.join(name);
    let images = scan_dir(&base.join("images"))?;
    let masks = scan_dir(&base.join("masks"))?;

    let mut unmatched = Vec::new();
    for stem in images.keys() {
        if !masks.contains_key(stem) {
            unmatched.push(format!("images/{stem} (no mask)"));
        }
    }
    for stem in masks.keys() {
        if !images.contains_key(stem) {
            unmatched.push(format!("masks/{stem} (no image)"));
        }
    }
    if !unmatched.is_empty() {
        return Err(DataError::MissingPair(unmatched));
    }
    if images.is_empty() {
        return Err(DataError::EmptyDataset(name.to_string()));
    }

    let mut records = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let (width, height) =
            image::image_dimensions(image_path).map_err(|e| DataError::CorruptFile {
                path: image_path.clone(),
                reason: e.to_string(),
            })?;
        records.push(SampleRecord {
            sample_id: stem.clone(),
            image_path: image_path.clone(),
            mask_path: masks[stem].clone(),
            original_size: (width, height),
        });
    }
    Ok(DatasetManifest::from_records(
        name,
        DatasetRole::Train,
        records,
    ))
}

/// Side lists of a train/test split, as stored on disk:
/// `{"train": [ids...], "test": [ids...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFile {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitFile {
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| DataError::CorruptFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("split serialization");
        fs::write(path, text).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Partition a manifest exactly according to a split file. The split must
/// cover every manifest id, reference no unknown ids, and keep the two
/// sides disjoint and nonempty.
pub fn split_train_test(
    manifest: &DatasetManifest,
    split: &SplitFile,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    let known: BTreeSet<&str> = manifest.sample_ids().collect();
    let train_ids: BTreeSet<&str> = split.train.iter().map(String::as_str).collect();
    let test_ids: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();

    let unknown: Vec<String> = train_ids
        .union(&test_ids)
        .filter(|id| !known.contains(*id))
        .map(|id| id.to_string())
        .collect();
    if !unknown.is_empty() {
        return Err(DataError::UnknownId(unknown));
    }
    let overlap: Vec<String> = train_ids
        .intersection(&test_ids)
        .map(|id| id.to_string())
        .collect();
    if !overlap.is_empty() {
        return Err(DataError::OverlappingSplit(overlap));
    }
    let uncovered: Vec<String> = known
        .iter()
        .filter(|id| !train_ids.contains(*id) && !test_ids.contains(*id))
        .map(|id| id.to_string())
        .collect();
    if !uncovered.is_empty() {
        return Err(DataError::IncompleteSplit(uncovered));
    }
    if train_ids.is_empty() || test_ids.is_empty() {
        return Err(DataError::EmptyDataset(manifest.name().to_string()));
    }

    let pick = |ids: &BTreeSet<&str>| {
        manifest
            .records()
            .iter()
            .filter(|r| ids.contains(r.sample_id.as_str()))
            .cloned()
            .collect::<Vec<_>>()
    };
    Ok((
        manifest.with_records(DatasetRole::Train, pick(&train_ids)),
        manifest.with_records(DatasetRole::Test, pick(&test_ids)),
    ))
}

/// Shot count for few-shot fine-tuning: one of the supported counts, or
/// the full training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotCount {
    Shots(usize),
    Full,
}

impl ShotCount {
    pub fn parse(value: &str) -> Result<Self, DataError> {
        if value.eq_ignore_ascii_case("full") {
            return Ok(ShotCount::Full);
        }
        let k: usize = value
            .parse()
            .map_err(|_| DataError::InvalidShotCount(0))?;
        Self::from_count(k)
    }

    pub fn from_count(k: usize) -> Result<Self, DataError> {
        if SUPPORTED_SHOT_COUNTS.contains(&k) {
            Ok(ShotCount::Shots(k))
        } else {
            Err(DataError::InvalidShotCount(k))
        }
    }
}

impl fmt::Display for ShotCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShotCount::Shots(k) => write!(f, "{k}"),
            ShotCount::Full => write!(f, "full"),
        }
    }
}

impl Serialize for ShotCount {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            ShotCount::Shots(k) => serializer.serialize_u64(*k as u64),
            ShotCount::Full => serializer.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for ShotCount {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(usize),
            Text(String),
        }
        match Repr::deserialize(deserializer)? {
            Repr::Count(k) => ShotCount::from_count(k).map_err(D::Error::custom),
            Repr::Text(s) => ShotCount::parse(&s).map_err(D::Error::custom),
        }
    }
}

/// How many samples to fine-tune on, and which draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSpec {
    pub k: ShotCount,
    pub seed: u64,
}

impl FewShotSpec {
    pub fn full(seed: u64) -> Self {
        Self {
            k: ShotCount::Full,
            seed,
        }
    }

    pub fn shots(k: usize, seed: u64) -> Result<Self, DataError> {
        Ok(Self {
            k: ShotCount::from_count(k)?,
            seed,
        })
    }
}

/// Uniform sample of `k` records without replacement, deterministic given
/// the seed. `Full` returns the manifest unchanged.
pub fn sample_fewshot(
    train: &DatasetManifest,
    spec: &FewShotSpec,
) -> Result<DatasetManifest, DataError> {
    let k = match spec.k {
        ShotCount::Full => return Ok(train.clone()),
        ShotCount::Shots(k) => k,
    };
    sample_uniform(train, k, spec.seed)
}

/// Uniform k-of-n sample without replacement via partial Fisher-Yates,
/// so the draw does not depend on RNG library internals beyond the
/// integer-range primitive.
pub(crate) fn sample_uniform(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    if k > manifest.len() {
        return Err(DataError::InsufficientData {
            requested: k,
            available: manifest.len(),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..manifest.len()).collect();
    for i in 0..k {
        let j = rand::Rng::random_range(&mut rng, i..indices.len());
        indices.swap(i, j);
    }
    let records = indices[..k]
        .iter()
        .map(|&i| manifest.records()[i].clone())
        .collect();
    Ok(manifest.with_records(manifest.role(), records))
}

/// Splits a training pool into (validation, remaining-train). The
/// validation side is a deterministic 10% draw (at least one sample) used
/// for checkpoint selection, carved before any k-shot sampling so the
/// few-shot draw never sees the selection data.
pub fn carve_validation(
    train: &DatasetManifest,
    fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    assert!((0.0..1.0).contains(&fraction), "fraction must be in [0,1)");
    if train.is_empty() {
        return Err(DataError::EmptyDataset(train.name().to_string()));
    }
    let count = ((train.len() as f64 * fraction).ceil() as usize)
        .max(1)
        .min(train.len().saturating_sub(1).max(1));
    let validation = sample_uniform(train, count, seed)?;
    let validation_ids: BTreeSet<&str> = validation.sample_ids().collect();
    let remaining: Vec<SampleRecord> = train
        .records()
        .iter()
        .filter(|r| !validation_ids.contains(r.sample_id.as_str()))
        .cloned()
        .collect();
    if remaining.is_empty() {
        return Err(DataError::InsufficientData {
            requested: count + 1,
            available: train.len(),
        });
    }
    Ok((
        validation.with_records(DatasetRole::Test, validation.records().to_vec()),
        train.with_records(DatasetRole::Train, remaining),
    ))
}

/// Write a manifest cache: JSON lines, one record per line.
pub fn write_manifest_cache(manifest: &DatasetManifest, path: &Path) -> Result<(), DataError> {
    let mut out = Vec::new();
    for record in manifest.records() {
        serde_json::to_writer(&mut out, record).expect("record serialization");
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&out).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Read a manifest cache written by [`write_manifest_cache`].
pub fn read_manifest_cache(
    path: &Path,
    name: &str,
    role: DatasetRole,
) -> Result<DatasetManifest, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| DataError::CorruptFile {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?,
        );
    }
    if records.is_empty() {
        return Err(DataError::EmptyDataset(name.to_string()));
    }
    Ok(DatasetManifest::from_records(name, role, records))
}
