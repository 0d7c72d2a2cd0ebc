//! KITTI-layout scan and label files, dataset specs, pairing manifests and
//! class statistics.
//!
//! Layout on disk:
//!
//! ```text
//! <root>/sequences/<seq>/velodyne/<frame>.bin    16-byte records: f32 x, y, z, reflectance
//! <root>/sequences/<seq>/labels/<frame>.label    4-byte records: u32, low 16 bits = class
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rangeview::{PointCloud, SensorConfig};

const SCAN_RECORD: u64 = 16;
const LABEL_RECORD: u64 = 4;

/// Decoded scan plus the number of reflectance values clamped into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanRead {
    pub cloud: PointCloud,
    pub clamped: usize,
}

pub fn decode_scan(bytes: &[u8]) -> Result<ScanRead> {
    if !(bytes.len() as u64).is_multiple_of(SCAN_RECORD) {
        return Err(Error::Misaligned {
            what: "scan",
            len: bytes.len() as u64,
            record: SCAN_RECORD,
        });
    }
    let n = bytes.len() / 16;
    let mut xyz = Vec::with_capacity(n);
    let mut refl = Vec::with_capacity(n);
    let mut clamped = 0;
    for (i, rec) in bytes.chunks_exact(16).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().expect("4 bytes")) as f64;
        let p = [f(0), f(1), f(2)];
        let r = f(3);
        if p.iter().any(|v| !v.is_finite()) || r.is_nan() {
            return Err(Error::Malformed {
                what: "scan",
                detail: format!("record {i} is not finite"),
            });
        }
        let rc = r.clamp(0.0, 1.0);
        if rc != r {
            clamped += 1;
        }
        xyz.push(p);
        refl.push(rc);
    }
    Ok(ScanRead {
        cloud: PointCloud::from_xyzr(xyz, refl),
        clamped,
    })
}

/// Encodes coordinates and reflectance as f32; auxiliary channels are not stored.
pub fn encode_scan(cloud: &PointCloud) -> Result<Vec<u8>> {
    cloud.validate()?;
    let mut out = Vec::with_capacity(cloud.len() * 16);
    for (p, r) in cloud.xyz.iter().zip(&cloud.reflectance) {
        for v in [p[0], p[1], p[2], *r] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_scan(path: &Path) -> Result<ScanRead> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let read = decode_scan(&bytes)?;
    if read.clamped > 0 {
        log::warn!("{}: clamped {} reflectance values", path.display(), read.clamped);
    }
    Ok(read)
}

pub fn write_scan(path: &Path, cloud: &PointCloud) -> Result<()> {
    let bytes = encode_scan(cloud)?;
    write_file(path, &bytes)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn decode_label_words(bytes: &[u8]) -> Result<Vec<u32>> {
    if !(bytes.len() as u64).is_multiple_of(LABEL_RECORD) {
        return Err(Error::Misaligned {
            what: "label",
            len: bytes.len() as u64,
            record: LABEL_RECORD,
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

pub fn encode_label_words(words: &[u32]) -> Vec<u8> {
    words.iter().flat_map(|w| w.to_le_bytes()).collect()
}

/// Class ids after masking, plus how many were unknown to the table and
/// therefore mapped to 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelRead {
    pub ids: Vec<u32>,
    pub unknown: usize,
}

pub fn labels_from_words(words: &[u32], table: &ClassTable) -> LabelRead {
    let mut unknown = 0;
    let ids = words
        .iter()
        .map(|w| {
            let id = w & 0xFFFF;
            if table.contains(id) {
                id
            } else {
                unknown += 1;
                0
            }
        })
        .collect();
    LabelRead { ids, unknown }
}

/// Reads a label file that must hold exactly `expected` records.
pub fn read_labels(path: &Path, table: &ClassTable, expected: usize) -> Result<LabelRead> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let words = decode_label_words(&bytes)?;
    if words.len() != expected {
        return Err(Error::CountMismatch {
            what: "labels per scan point",
            expected,
            found: words.len(),
        });
    }
    let read = labels_from_words(&words, table);
    if read.unknown > 0 {
        log::warn!("{}: {} unknown class ids mapped to unlabeled", path.display(), read.unknown);
    }
    Ok(read)
}

pub fn write_labels(path: &Path, ids: &[u32]) -> Result<()> {
    write_file(path, &encode_label_words(ids))
}

/// Copies `labels` into a one-channel auxiliary slot so they survive projection.
pub fn attach_labels(mut cloud: PointCloud, labels: &[u32]) -> Result<PointCloud> {
    if labels.len() != cloud.len() {
        return Err(Error::CountMismatch {
            what: "labels per scan point",
            expected: cloud.len(),
            found: labels.len(),
        });
    }
    cloud.aux_dims = 1;
    cloud.aux = labels.iter().map(|&l| f64::from(l)).collect();
    Ok(cloud)
}

/// Semantic classes; id 0 is reserved for unlabeled points.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, String>", into = "BTreeMap<String, String>")]
pub struct ClassTable {
    names: BTreeMap<u32, String>,
}

pub const DEFAULT_CLASSES: [&str; 16] = [
    "car",
    "bicycle",
    "motorcycle",
    "truck",
    "other-vehicle",
    "person",
    "road",
    "sidewalk",
    "parking",
    "other-ground",
    "building",
    "fence",
    "vegetation",
    "trunk",
    "terrain",
    "pole",
];

impl Default for ClassTable {
    fn default() -> Self {
        let names = DEFAULT_CLASSES
            .iter()
            .enumerate()
            .map(|(i, n)| (i as u32 + 1, n.to_string()))
            .chain([(0, "unlabeled".to_string())])
            .collect();
        Self { names }
    }
}

impl ClassTable {
    /// Builds a table from labeled ids; 0 is added as "unlabeled".
    pub fn new(entries: impl IntoIterator<Item = (u32, String)>) -> Result<Self> {
        let mut names = BTreeMap::new();
        names.insert(0, "unlabeled".to_string());
        let mut seen = BTreeSet::new();
        for (id, name) in entries {
            if id == 0 {
                return Err(Error::Config("class id 0 is reserved for unlabeled".into()));
            }
            if id > 0xFFFF {
                return Err(Error::Config(format!("class id {id} does not fit in 16 bits")));
            }
            if !seen.insert(name.clone()) || names.insert(id, name).is_some() {
                return Err(Error::Config(format!("duplicate class id {id} or name")));
            }
        }
        Ok(Self { names })
    }

    pub fn contains(&self, id: u32) -> bool {
        self.names.contains_key(&id)
    }

    pub fn name(&self, id: u32) -> Option<&str> {
        self.names.get(&id).map(String::as_str)
    }

    /// Number of labeled classes (excluding 0).
    pub fn len(&self) -> usize {
        self.names.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_id(&self) -> u32 {
        *self.names.keys().next_back().expect("0 always present")
    }

    /// `(id, name)` in increasing id order, including 0.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.names.iter().map(|(k, v)| (*k, v.as_str()))
    }
}

impl TryFrom<BTreeMap<String, String>> for ClassTable {
    type Error = Error;

    fn try_from(map: BTreeMap<String, String>) -> Result<Self> {
        let mut entries = Vec::new();
        for (k, v) in map {
            let id: u32 = k.parse().map_err(|_| Error::Config(format!("class id {k:?} is not an integer")))?;
            if id != 0 {
                entries.push((id, v));
            }
        }
        Self::new(entries)
    }
}

impl From<ClassTable> for BTreeMap<String, String> {
    fn from(t: ClassTable) -> Self {
        t.names.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Simulated,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "all" => Ok(Split::All),
            _ => Err(Error::InvalidArgument(format!("unknown split {s:?}"))),
        }
    }
}

/// Sequence assignment. `train = None` means every sequence not listed
/// under `val` or `test`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    #[serde(default)]
    pub train: Option<Vec<String>>,
    #[serde(default)]
    pub val: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub role: DomainRole,
    pub has_labels: bool,
    /// Sequences to use; empty means every directory under `sequences/`.
    #[serde(default)]
    pub sequences: Vec<String>,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub classes: ClassTable,
}

impl DatasetSpec {
    pub fn new(root: impl Into<PathBuf>, role: DomainRole, has_labels: bool) -> Self {
        Self {
            root: root.into(),
            role,
            has_labels,
            sequences: Vec::new(),
            split: SplitSpec::default(),
            sensor: SensorConfig::default(),
            classes: ClassTable::default(),
        }
    }

    /// Parses a TOML spec; a relative `root` is resolved against `base`.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut spec: DatasetSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(b) = base {
            if spec.root.is_relative() {
                spec.root = b.join(&spec.root);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path.parent())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("dataset spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.sensor.validate()?;
        if self.role == DomainRole::Simulated && !self.has_labels {
            return Err(Error::Config("simulated datasets must carry labels".into()));
        }
        let mut seen = BTreeSet::new();
        let lists = [self.split.train.as_deref().unwrap_or(&[]), &self.split.val, &self.split.test];
        for list in lists {
            for s in list {
                if !seen.insert(s) {
                    return Err(Error::Config(format!("sequence {s:?} assigned to more than one split")));
                }
            }
        }
        Ok(())
    }

    pub fn sequence_dir(&self, seq: &str) -> PathBuf {
        self.root.join("sequences").join(seq)
    }

    pub fn scan_path(&self, seq: &str, frame: &str) -> PathBuf {
        self.sequence_dir(seq).join("velodyne").join(format!("{frame}.bin"))
    }

    pub fn label_path(&self, seq: &str, frame: &str) -> PathBuf {
        self.sequence_dir(seq).join("labels").join(format!("{frame}.label"))
    }

    fn available_sequences(&self) -> Result<Vec<String>> {
        if !self.sequences.is_empty() {
            return Ok(self.sequences.clone());
        }
        let dir = self.root.join("sequences");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if entry.path().is_dir() {
                out.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        out.sort();
        Ok(out)
    }

    /// Sequences belonging to `split`, in sorted order.
    pub fn split_sequences(&self, split: Split) -> Result<Vec<String>> {
        let all = self.available_sequences()?;
        let held_out: BTreeSet<&String> = self.split.val.iter().chain(&self.split.test).collect();
        let mut seqs: Vec<String> = match split {
            Split::All => all,
            Split::Val => self.split.val.clone(),
            Split::Test => self.split.test.clone(),
            Split::Train => match &self.split.train {
                Some(t) => t.clone(),
                None => all.into_iter().filter(|s| !held_out.contains(s)).collect(),
            },
        };
        seqs.sort();
        Ok(seqs)
    }
}

/// One scan file (and its label file when the dataset has labels).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ScanEntry {
    pub sequence: String,
    pub frame: String,
    pub scan: PathBuf,
    pub labels: Option<PathBuf>,
}

/// Every scan of `split` in (sequence, frame) order, shuffled when `rng` is given.
pub fn list_scans<R: Rng + ?Sized>(spec: &DatasetSpec, split: Split, rng: Option<&mut R>) -> Result<Vec<ScanEntry>> {
    let mut out = Vec::new();
    for seq in spec.split_sequences(split)? {
        let dir = spec.sequence_dir(&seq).join("velodyne");
        let mut frames = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.extension().is_some_and(|e| e == "bin") {
                if let Some(stem) = path.file_stem() {
                    frames.push(stem.to_string_lossy().into_owned());
                }
            }
        }
        frames.sort();
        for frame in frames {
            out.push(ScanEntry {
                scan: spec.scan_path(&seq, &frame),
                labels: spec.has_labels.then(|| spec.label_path(&seq, &frame)),
                sequence: seq.clone(),
                frame,
            });
        }
    }
    if let Some(rng) = rng {
        out.shuffle(rng);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub entry: ScanEntry,
    pub cloud: PointCloud,
    pub labels: Option<Vec<u32>>,
    pub clamped: usize,
    pub unknown_labels: usize,
}

impl Sample {
    /// The cloud with labels attached as its auxiliary channel (if any).
    pub fn labeled_cloud(&self) -> Result<PointCloud> {
        match &self.labels {
            Some(l) => attach_labels(self.cloud.clone(), l),
            None => Ok(self.cloud.clone()),
        }
    }
}

pub fn load_sample(entry: &ScanEntry, classes: &ClassTable) -> Result<Sample> {
    let scan = read_scan(&entry.scan)?;
    let (labels, unknown) = match &entry.labels {
        Some(p) => {
            let l = read_labels(p, classes, scan.cloud.len())?;
            (Some(l.ids), l.unknown)
        }
        None => (None, 0),
    };
    Ok(Sample {
        entry: entry.clone(),
        cloud: scan.cloud,
        labels,
        clamped: scan.clamped,
        unknown_labels: unknown,
    })
}

/// Lazily loads every scan of `split`.
pub fn iterate<'a, R: Rng + ?Sized>(
    spec: &'a DatasetSpec,
    split: Split,
    rng: Option<&mut R>,
) -> Result<impl Iterator<Item = Result<Sample>> + 'a> {
    let entries = list_scans(spec, split, rng)?;
    Ok(entries.into_iter().map(move |e| load_sample(&e, &spec.classes)))
}

/// Point counts per class id (index = id, `0..=max_id`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub counts: Vec<u64>,
}

impl ClassCounts {
    pub fn new(table: &ClassTable) -> Self {
        Self {
            counts: vec![0; table.max_id() as usize + 1],
        }
    }

    pub fn add(&mut self, ids: &[u32]) {
        for &id in ids {
            if let Some(c) = self.counts.get_mut(id as usize) {
                *c += 1;
            } else {
                self.counts[0] += 1;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn proportions(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

/// Normalized per-class point counts over a labeled split.
pub fn class_proportions(spec: &DatasetSpec, split: Split) -> Result<ClassCounts> {
    if !spec.has_labels {
        return Err(Error::MissingChannel("dataset has no labels".into()));
    }
    let mut counts = ClassCounts::new(&spec.classes);
    let mut any = false;
    for sample in iterate::<rand::rngs::ThreadRng>(spec, split, None)? {
        let sample = sample?;
        counts.add(sample.labels.as_deref().unwrap_or(&[]));
        any = true;
    }
    if !any || counts.total() == 0 {
        return Err(Error::Empty(format!("no labeled points in {}", spec.root.display())));
    }
    Ok(counts)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Pairing of a source scan with its translated output; `sha256` is the
/// digest of the output file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub input: String,
    pub output: String,
    pub sha256: String,
}

impl ManifestEntry {
    /// Hashes `base/output` now; paths are stored as given.
    pub fn new(base: &Path, input: &str, output: &str) -> Result<Self> {
        Ok(Self {
            input: input.to_string(),
            output: output.to_string(),
            sha256: file_sha256(&base.join(output))?,
        })
    }
}

pub fn encode_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
        s.push('\n');
    }
    s
}

pub fn decode_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line).map_err(|err| Error::Malformed {
            what: "manifest",
            detail: format!("line {}: {err}", i + 1),
        })?;
        if e.sha256.len() != 64 || !e.sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::Malformed {
                what: "manifest",
                detail: format!("line {}: checksum is not a sha256 hex digest", i + 1),
            });
        }
        out.push(e);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    write_file(path, encode_manifest(entries).as_bytes())
}

/// Reads a manifest and verifies every output checksum. Relative paths are
/// resolved against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let entries = decode_manifest(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &entries {
        let out = base.join(&e.output);
        let found = file_sha256(&out)?;
        if !found.eq_ignore_ascii_case(&e.sha256) {
            return Err(Error::Integrity {
                path: out,
                expected: e.sha256.clone(),
                found,
            });
        }
    }
    Ok(entries)
}

/// Resolves a manifest path field the same way [`read_manifest`] does.
pub fn resolve(manifest: &Path, field: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(field)
}
