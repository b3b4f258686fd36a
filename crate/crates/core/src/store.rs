//! Frozen per-backbone feature store.
//!
//! A store holds, for every sample, one `dim`-dimensional output per backbone
//! together with its domain, class and split labels. Stores are produced by
//! the synthetic generator in [`synth`] or loaded from disk.
//!
//! On-disk layout of a store directory:
//!
//! * `manifest.json`: backbone count, feature dimension, normalization flag
//!   and the sample table.
//! * `backbone_<i>.feat`: `b"URTF"`, `u32` version, `u64` sample count,
//!   `u32` dimension, then one row of little-endian `f32` per sample in
//!   ascending `sample_id` order.

pub mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FormatError, Result, UrtError};
use crate::math::norm;

pub use synth::{generate_synthetic_store, SplitCounts, SynthConfig};

pub const FEATURE_MAGIC: &[u8; 4] = b"URTF";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
const HEADER_LEN: usize = 4 + 4 + 8 + 4;
const NORMALIZED_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = UrtError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(UrtError::Config(format!(
                "unknown split '{other}' (expected train, valid or test)"
            ))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: u64,
    pub domain_id: u32,
    pub class_id: u64,
    pub split: Split,
}

/// Samples of one class, in ascending `sample_id` order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassSamples {
    pub class_id: u64,
    pub sample_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    num_backbones: usize,
    dim: usize,
    num_domains: u32,
    normalized: bool,
    normalization: String,
    num_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<SynthConfig>,
    records: Vec<SampleRecord>,
}

/// Immutable multi-backbone feature table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    num_backbones: usize,
    dim: usize,
    num_domains: u32,
    normalized: bool,
    generator: Option<SynthConfig>,
    records: Vec<SampleRecord>,
    /// One `records.len() × dim` row-major block per backbone.
    features: Vec<Vec<f64>>,
    row_of: HashMap<u64, usize>,
    classes: BTreeMap<(Split, u32), Vec<ClassSamples>>,
}

impl FeatureStore {
    /// Builds a store, checking every structural invariant.
    ///
    /// `features[i]` holds backbone `i`'s rows in the order of `records`;
    /// records are re-sorted by `sample_id` here.
    pub fn new(
        num_backbones: usize,
        dim: usize,
        num_domains: u32,
        normalized: bool,
        records: Vec<SampleRecord>,
        features: Vec<Vec<f64>>,
    ) -> Result<Self> {
        Self::build(num_backbones, dim, num_domains, normalized, None, records, features)
            .map_err(UrtError::Config)
    }

    fn build(
        num_backbones: usize,
        dim: usize,
        num_domains: u32,
        normalized: bool,
        generator: Option<SynthConfig>,
        records: Vec<SampleRecord>,
        features: Vec<Vec<f64>>,
    ) -> std::result::Result<Self, String> {
        if num_backbones == 0 || dim == 0 {
            return Err(format!(
                "store needs at least one backbone and a positive dimension, got m={num_backbones}, d={dim}"
            ));
        }
        if features.len() != num_backbones {
            return Err(format!(
                "expected features for {num_backbones} backbones, got {}",
                features.len()
            ));
        }
        let n = records.len();
        for (i, block) in features.iter().enumerate() {
            if block.len() != n * dim {
                return Err(format!(
                    "backbone {i} holds {} values, expected {} samples x {dim}",
                    block.len(),
                    n
                ));
            }
        }

        // Sort rows by sample id, carrying the feature rows along.
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&r| records[r].sample_id);
        let sorted_records: Vec<SampleRecord> = order.iter().map(|&r| records[r]).collect();
        let sorted_features: Vec<Vec<f64>> = if order.iter().enumerate().all(|(a, &b)| a == b) {
            features
        } else {
            features
                .iter()
                .map(|block| {
                    order
                        .iter()
                        .flat_map(|&r| block[r * dim..(r + 1) * dim].iter().copied())
                        .collect()
                })
                .collect()
        };

        let mut row_of = HashMap::with_capacity(n);
        let mut class_home: HashMap<u64, (u32, Split)> = HashMap::new();
        let mut grouped: BTreeMap<(Split, u32), BTreeMap<u64, Vec<u64>>> = BTreeMap::new();
        for (row, rec) in sorted_records.iter().enumerate() {
            if row_of.insert(rec.sample_id, row).is_some() {
                return Err(format!("duplicate sample_id {}", rec.sample_id));
            }
            if rec.domain_id >= num_domains {
                return Err(format!(
                    "sample {} has domain {} but the store declares {num_domains} domains",
                    rec.sample_id, rec.domain_id
                ));
            }
            match class_home.get(&rec.class_id) {
                Some(&(domain, split)) => {
                    if domain != rec.domain_id {
                        return Err(format!(
                            "class {} spans domains {domain} and {}",
                            rec.class_id, rec.domain_id
                        ));
                    }
                    if split != rec.split {
                        return Err(format!(
                            "class {} appears in splits {split} and {}",
                            rec.class_id, rec.split
                        ));
                    }
                }
                None => {
                    class_home.insert(rec.class_id, (rec.domain_id, rec.split));
                }
            }
            grouped
                .entry((rec.split, rec.domain_id))
                .or_default()
                .entry(rec.class_id)
                .or_default()
                .push(rec.sample_id);
        }

        for (i, block) in sorted_features.iter().enumerate() {
            for (row, v) in block.chunks_exact(dim).enumerate() {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(format!(
                        "backbone {i}, sample {} has a non-finite entry",
                        sorted_records[row].sample_id
                    ));
                }
                if normalized {
                    let nv = norm(v);
                    if nv != 0.0 && (nv - 1.0).abs() > NORMALIZED_TOL {
                        return Err(format!(
                            "store is flagged normalized but backbone {i}, sample {} has norm {nv}",
                            sorted_records[row].sample_id
                        ));
                    }
                }
            }
        }

        let classes = grouped
            .into_iter()
            .map(|(key, by_class)| {
                let list = by_class
                    .into_iter()
                    .map(|(class_id, sample_ids)| ClassSamples {
                        class_id,
                        sample_ids,
                    })
                    .collect();
                (key, list)
            })
            .collect();

        Ok(Self {
            num_backbones,
            dim,
            num_domains,
            normalized,
            generator,
            records: sorted_records,
            features: sorted_features,
            row_of,
            classes,
        })
    }

    pub(crate) fn with_generator(mut self, cfg: SynthConfig) -> Self {
        self.generator = Some(cfg);
        self
    }

    pub fn num_backbones(&self) -> usize {
        self.num_backbones
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_domains(&self) -> u32 {
        self.num_domains
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn generator(&self) -> Option<&SynthConfig> {
        self.generator.as_ref()
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

    pub fn record(&self, sample_id: u64) -> Result<&SampleRecord> {
        Ok(&self.records[self.row(sample_id)?])
    }

    fn row(&self, sample_id: u64) -> Result<usize> {
        self.row_of
            .get(&sample_id)
            .copied()
            .ok_or_else(|| UrtError::Lookup(format!("unknown sample_id {sample_id}")))
    }

    /// Output of backbone `backbone` for one sample.
    pub fn feature(&self, backbone: usize, sample_id: u64) -> Result<&[f64]> {
        if backbone >= self.num_backbones {
            return Err(UrtError::Lookup(format!(
                "backbone {backbone} out of range (store has {})",
                self.num_backbones
            )));
        }
        let row = self.row(sample_id)?;
        Ok(&self.features[backbone][row * self.dim..(row + 1) * self.dim])
    }

    /// All backbone outputs `r_1(x), …, r_m(x)` of one sample.
    pub fn backbone_features(&self, sample_id: u64) -> Result<Vec<&[f64]>> {
        let row = self.row(sample_id)?;
        let d = self.dim;
        Ok(self
            .features
            .iter()
            .map(|block| &block[row * d..(row + 1) * d])
            .collect())
    }

    /// Concatenation of every backbone output, length `m·d`.
    pub fn universal_representation(&self, sample_id: u64) -> Result<Vec<f64>> {
        Ok(self.backbone_features(sample_id)?.concat())
    }

    /// Classes of one domain within a split, ordered by class id.
    pub fn classes(&self, split: Split, domain: u32) -> &[ClassSamples] {
        self.classes
            .get(&(split, domain))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Domains having at least one class in `split`, ascending.
    pub fn domains_in(&self, split: Split) -> Vec<u32> {
        self.classes
            .keys()
            .filter(|(s, _)| *s == split)
            .map(|(_, d)| *d)
            .collect()
    }

    fn manifest(&self) -> Manifest {
        Manifest {
            format_version: MANIFEST_VERSION,
            num_backbones: self.num_backbones,
            dim: self.dim,
            num_domains: self.num_domains,
            normalized: self.normalized,
            normalization: if self.normalized {
                "l2_per_sample".into()
            } else {
                "none".into()
            },
            num_samples: self.records.len(),
            generator: self.generator.clone(),
            records: self.records.clone(),
        }
    }

    /// Exact bytes written to `manifest.json`.
    pub fn manifest_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(&self.manifest()).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }

    /// Hex SHA-256 of the manifest, identifying the store layout.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.manifest_bytes()))
    }

    /// Copy with every feature value rounded to `f32`, i.e. what a save/load
    /// round trip produces.
    pub fn quantized(&self) -> Self {
        let mut out = self.clone();
        for block in &mut out.features {
            for v in block.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| UrtError::io(dir, e))?;
        let manifest_path = dir.join(MANIFEST_FILE);
        fs::write(&manifest_path, self.manifest_bytes())
            .map_err(|e| UrtError::io(&manifest_path, e))?;
        let n = self.records.len();
        for (i, block) in self.features.iter().enumerate() {
            let path = backbone_path(dir, i);
            let mut bytes = Vec::with_capacity(HEADER_LEN + block.len() * 4);
            bytes.extend_from_slice(FEATURE_MAGIC);
            bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
            bytes.extend_from_slice(&(n as u64).to_le_bytes());
            bytes.extend_from_slice(&(self.dim as u32).to_le_bytes());
            for v in block {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            let mut file = fs::File::create(&path).map_err(|e| UrtError::io(&path, e))?;
            file.write_all(&bytes).map_err(|e| UrtError::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let raw = fs::read(&manifest_path).map_err(|e| UrtError::io(&manifest_path, e))?;
        let manifest_err = |detail: String| FormatError::Manifest {
            path: manifest_path.clone(),
            detail,
        };
        let manifest: Manifest =
            serde_json::from_slice(&raw).map_err(|e| manifest_err(e.to_string()))?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(FormatError::Version {
                path: manifest_path,
                expected: MANIFEST_VERSION,
                found: manifest.format_version,
            }
            .into());
        }
        if manifest.num_samples != manifest.records.len() {
            return Err(manifest_err(format!(
                "num_samples is {} but the sample table has {} rows",
                manifest.num_samples,
                manifest.records.len()
            ))
            .into());
        }

        let n = manifest.records.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&r| manifest.records[r].sample_id);
        let records: Vec<SampleRecord> = order.iter().map(|&r| manifest.records[r]).collect();

        let mut features = Vec::with_capacity(manifest.num_backbones);
        for i in 0..manifest.num_backbones {
            let path = backbone_path(dir, i);
            let bytes = fs::read(&path).map_err(|e| UrtError::io(&path, e))?;
            features.push(decode_feature_file(&path, &bytes, n, manifest.dim)?);
        }

        Self::build(
            manifest.num_backbones,
            manifest.dim,
            manifest.num_domains,
            manifest.normalized,
            manifest.generator,
            records,
            features,
        )
        .map_err(|detail| {
            FormatError::Manifest {
                path: manifest_path,
                detail,
            }
            .into()
        })
    }
}

pub fn backbone_path(dir: &Path, backbone: usize) -> PathBuf {
    dir.join(format!("backbone_{backbone}.feat"))
}

fn decode_feature_file(path: &Path, bytes: &[u8], n: usize, dim: usize) -> Result<Vec<f64>> {
    let path = path.to_path_buf();
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            path,
            detail: format!("{} bytes is shorter than the magic", bytes.len()),
        }
        .into());
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(FormatError::BadMagic { path }.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            path,
            detail: format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
        }
        .into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(FormatError::Version {
            path,
            expected: FEATURE_VERSION,
            found: version,
        }
        .into());
    }
    let declared = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let file_dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if declared != n as u64 {
        return Err(FormatError::CountMismatch {
            path,
            expected: n as u64,
            found: declared,
        }
        .into());
    }
    if file_dim != dim {
        return Err(FormatError::Data {
            path,
            detail: format!("dimension {file_dim} disagrees with manifest dimension {dim}"),
        }
        .into());
    }
    let body = &bytes[HEADER_LEN..];
    let expected_len = n * dim * 4;
    if body.len() < expected_len {
        return Err(FormatError::Truncated {
            path,
            detail: format!(
                "expected {expected_len} bytes of feature data, found {}",
                body.len()
            ),
        }
        .into());
    }
    if body.len() > expected_len {
        return Err(FormatError::Data {
            path,
            detail: format!("{} trailing bytes", body.len() - expected_len),
        }
        .into());
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FeatureStore {
        let records = vec![
            SampleRecord {
                sample_id: 5,
                domain_id: 0,
                class_id: 1,
                split: Split::Train,
            },
            SampleRecord {
                sample_id: 2,
                domain_id: 1,
                class_id: 7,
                split: Split::Test,
            },
        ];
        // rows follow `records` order: sample 5 first.
        let b0 = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let b1 = vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        FeatureStore::new(2, 3, 2, true, records, vec![b0, b1]).unwrap()
    }

    #[test]
    fn universal_representation_concatenates_in_backbone_order() {
        let s = tiny();
        assert_eq!(
            s.universal_representation(5).unwrap(),
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]
        );
        assert_eq!(s.universal_representation(2).unwrap().len(), 6);
        assert!(matches!(
            s.universal_representation(99),
            Err(UrtError::Lookup(_))
        ));
        // rows are re-sorted by sample id
        assert_eq!(s.records()[0].sample_id, 2);
    }

    #[test]
    fn single_backbone_representation_is_the_backbone_output() {
        let rec = SampleRecord {
            sample_id: 0,
            domain_id: 0,
            class_id: 0,
            split: Split::Train,
        };
        let s = FeatureStore::new(1, 2, 1, false, vec![rec], vec![vec![0.5, -2.0]]).unwrap();
        assert_eq!(s.universal_representation(0).unwrap(), vec![0.5, -2.0]);
    }

    #[test]
    fn rejects_class_spanning_domains_or_splits() {
        let mk = |domain_id, split| SampleRecord {
            sample_id: 0,
            domain_id,
            class_id: 3,
            split,
        };
        let mut b = mk(0, Split::Train);
        b.sample_id = 1;
        let mut c = mk(1, Split::Train);
        c.sample_id = 1;
        let feats = vec![vec![1.0, 1.0]];
        let err = FeatureStore::new(1, 1, 2, false, vec![mk(0, Split::Train), c], feats.clone())
            .unwrap_err();
        assert!(err.to_string().contains("spans domains"));
        b.split = Split::Test;
        let err = FeatureStore::new(1, 1, 2, false, vec![mk(0, Split::Train), b], feats)
            .unwrap_err();
        assert!(err.to_string().contains("appears in splits"));
    }

    #[test]
    fn rejects_unnormalized_rows_when_flagged() {
        let rec = SampleRecord {
            sample_id: 0,
            domain_id: 0,
            class_id: 0,
            split: Split::Train,
        };
        assert!(FeatureStore::new(1, 2, 1, true, vec![rec], vec![vec![1.0, 1.0]]).is_err());
        assert!(FeatureStore::new(1, 2, 1, true, vec![rec], vec![vec![0.0, 0.0]]).is_ok());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = tiny();
        s.save(dir.path()).unwrap();
        let back = FeatureStore::load(dir.path()).unwrap();
        assert_eq!(back, s.quantized());
        assert_eq!(back.fingerprint(), s.fingerprint());
    }

    #[test]
    fn corrupted_files_give_named_errors() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        let p0 = backbone_path(dir.path(), 0);
        let good = fs::read(&p0).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p0, &bad).unwrap();
        let err = FeatureStore::load(dir.path()).unwrap_err();
        assert!(matches!(err, UrtError::Format(FormatError::BadMagic { .. })));
        assert!(err.to_string().contains("backbone_0.feat"));

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&9u32.to_le_bytes());
        fs::write(&p0, &bad).unwrap();
        assert!(matches!(
            FeatureStore::load(dir.path()).unwrap_err(),
            UrtError::Format(FormatError::Version { found: 9, .. })
        ));

        fs::write(&p0, &good[..good.len() - 3]).unwrap();
        assert!(matches!(
            FeatureStore::load(dir.path()).unwrap_err(),
            UrtError::Format(FormatError::Truncated { .. })
        ));

        let mut bad = good.clone();
        bad[8..16].copy_from_slice(&1u64.to_le_bytes());
        bad.truncate(HEADER_LEN + 3 * 4);
        fs::write(&p0, &bad).unwrap();
        assert!(matches!(
            FeatureStore::load(dir.path()).unwrap_err(),
            UrtError::Format(FormatError::CountMismatch {
                expected: 2,
                found: 1,
                ..
            })
        ));
    }

    #[test]
    fn parses_split_names() {
        assert_eq!("valid".parse::<Split>().unwrap(), Split::Valid);
        assert!("dev".parse::<Split>().is_err());
    }
}
