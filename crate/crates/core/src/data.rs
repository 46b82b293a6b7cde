//! Feature-bank files, JSONL manifests and the seeded synthetic dataset.
//!
//! # `FBNK` bank files
//!
//! ```text
//! offset  size          field
//! 0       4             magic "FBNK"
//! 4       1             version (1)
//! 5       1             dtype (1 = f32 little-endian)
//! 6       2             reserved, 0
//! 8       8             rows (u64 LE)
//! 16      8             dim (u64 LE)
//! 24      rows*dim*4    row-major payload
//! ```
//!
//! Rows are stored in 32-bit precision and widened to f64 on read.
//!
//! # Manifests
//!
//! One JSON object per line: `{"row", "id", "role", "class"?, "parent"?}`.
//! `class` is a 0-based class index, required for `train_pos`, `test_id` and
//! `crop` records and rejected elsewhere. Each role lives in one bank file
//! (see [`ManifestRole::bank_file`]) and row indices are unique per file.
//!
//! # Synthetic data
//!
//! [`synth_dataset`] draws everything from [`SeededRng`] on the
//! [`streams::SYNTH`] stream, so its output is fully determined by the config.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mining::{build_training_set, select_outliers, CropSet, SelectionResult};
use crate::model::FeatureBank;
use crate::numerics::{l2_normalize, norm, Mat};
use crate::rng::{streams, SeededRng};
use crate::trainer::TrainingSet;

pub const BANK_MAGIC: &[u8; 4] = b"FBNK";
const BANK_VERSION: u8 = 1;
const DTYPE_F32: u8 = 1;
const BANK_HEADER_LEN: usize = 24;
const RENORM_TOL: f64 = 1e-5;
const MIN_ROW_NORM: f64 = 1e-6;

pub fn encode_bank(mat: &Mat) -> Vec<u8> {
    let mut out = Vec::with_capacity(BANK_HEADER_LEN + 4 * mat.as_slice().len());
    out.extend_from_slice(BANK_MAGIC);
    out.push(BANK_VERSION);
    out.push(DTYPE_F32);
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&(mat.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(mat.cols() as u64).to_le_bytes());
    for &x in mat.as_slice() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
    out
}

/// Parses a bank. Rows whose norm is off by more than 1e-5 are re-normalized
/// with a warning; rows with norm below 1e-6 are rejected.
pub fn decode_bank(bytes: &[u8]) -> Result<Mat> {
    let fmt = |msg: String| Error::Format(format!("bank: {msg}"));
    if bytes.len() < BANK_HEADER_LEN {
        return Err(fmt("truncated header".into()));
    }
    if &bytes[0..4] != BANK_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    if bytes[4] != BANK_VERSION {
        return Err(fmt(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(fmt(format!("unsupported dtype {}", bytes[5])));
    }
    if bytes[6..8] != [0, 0] {
        return Err(fmt("reserved bytes must be zero".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let payload = (bytes.len() - BANK_HEADER_LEN) as u64;
    let expected = rows.checked_mul(dim).and_then(|n| n.checked_mul(4));
    if expected != Some(payload) {
        return Err(fmt(format!("{rows}x{dim} header with {payload}-byte payload")));
    }
    let (rows, dim) = (rows as usize, dim as usize);
    let data: Vec<f64> = bytes[BANK_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let mut mat = Mat::from_vec(rows, dim, data).map_err(|e| fmt(e.to_string()))?;
    let mut renormalized = 0usize;
    for i in 0..rows {
        let n = norm(mat.row(i));
        if n < MIN_ROW_NORM {
            return Err(fmt(format!("row {i} has norm {n:e}")));
        }
        if (n - 1.0).abs() > RENORM_TOL {
            for x in mat.row_mut(i) {
                *x /= n;
            }
            renormalized += 1;
        }
    }
    if renormalized > 0 {
        log::warn!("re-normalized {renormalized} of {rows} bank rows");
    }
    Ok(mat)
}

pub fn write_bank(path: impl AsRef<Path>, mat: &Mat) -> Result<()> {
    fs::write(path, encode_bank(mat))?;
    Ok(())
}

pub fn read_bank(path: impl AsRef<Path>) -> Result<Mat> {
    decode_bank(&fs::read(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestRole {
    PosLabel,
    NegLabel,
    TrainPos,
    TrainNeg,
    TestId,
    TestOod,
    Crop,
}

impl ManifestRole {
    pub fn requires_class(self) -> bool {
        matches!(self, ManifestRole::TrainPos | ManifestRole::TestId | ManifestRole::Crop)
    }

    /// Bank file holding the rows of this role.
    pub fn bank_file(self) -> &'static str {
        match self {
            ManifestRole::PosLabel | ManifestRole::NegLabel => "labels.fbnk",
            ManifestRole::TrainPos | ManifestRole::TrainNeg => "train.fbnk",
            ManifestRole::TestId => "test_id.fbnk",
            ManifestRole::TestOod => "test_ood.fbnk",
            ManifestRole::Crop => "crops.fbnk",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub row: usize,
    pub id: String,
    pub role: ManifestRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    /// Keys outside the schema. Kept on read, never written.
    #[serde(flatten, skip_serializing)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl ManifestRecord {
    pub fn new(row: usize, id: impl Into<String>, role: ManifestRole) -> Self {
        ManifestRecord {
            row,
            id: id.into(),
            role,
            class: None,
            parent: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_class(mut self, class: usize) -> Self {
        self.class = Some(class);
        self
    }

    pub fn with_parent(mut self, parent: impl Into<String>) -> Self {
        self.parent = Some(parent.into());
        self
    }
}

/// Checks class presence per role and row uniqueness per bank file.
pub fn validate_manifest(records: &[ManifestRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for (line, r) in records.iter().enumerate() {
        let line = line + 1;
        match (r.role.requires_class(), r.class) {
            (true, None) => {
                return Err(Error::Schema(format!("record {line}: role {:?} requires `class`", r.role)));
            }
            (false, Some(_)) => {
                return Err(Error::Schema(format!("record {line}: role {:?} does not take `class`", r.role)));
            }
            _ => {}
        }
        if !seen.insert((r.role.bank_file(), r.row)) {
            return Err(Error::Schema(format!(
                "record {line}: duplicate row {} in {}",
                r.row,
                r.role.bank_file()
            )));
        }
    }
    Ok(())
}

/// Fails unless every record of the roles stored in `file` indexes a row below `rows`.
pub fn check_row_bounds(records: &[ManifestRecord], file: &str, rows: usize) -> Result<()> {
    for r in records.iter().filter(|r| r.role.bank_file() == file) {
        if r.row >= rows {
            return Err(Error::Schema(format!(
                "row {} of `{}` is out of bounds for {file} ({rows} rows)",
                r.row, r.id
            )));
        }
    }
    Ok(())
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(line).map_err(|e| Error::Schema(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    validate_manifest(&out)?;
    Ok(out)
}

pub fn render_manifest(records: &[ManifestRecord]) -> Result<String> {
    validate_manifest(records)?;
    let dropped = records.iter().filter(|r| !r.extra.is_empty()).count();
    if dropped > 0 {
        log::warn!("dropping unknown keys from {dropped} manifest records");
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    parse_manifest(&fs::read_to_string(path)?)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ManifestRecord]) -> Result<()> {
    let text = render_manifest(records)?;
    let mut f = fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

fn rows_of(records: &[ManifestRecord], role: ManifestRole) -> Vec<&ManifestRecord> {
    let mut v: Vec<&ManifestRecord> = records.iter().filter(|r| r.role == role).collect();
    v.sort_by_key(|r| r.row);
    v
}

/// Label bank from `labels.fbnk` rows, using `pos_label` and `neg_label` records.
/// Positive rows must precede negative rows.
pub fn label_bank(labels: &Mat, records: &[ManifestRecord]) -> Result<FeatureBank> {
    check_row_bounds(records, ManifestRole::PosLabel.bank_file(), labels.rows())?;
    let pos = rows_of(records, ManifestRole::PosLabel);
    let neg = rows_of(records, ManifestRole::NegLabel);
    let n = pos.len();
    if pos.iter().enumerate().any(|(i, r)| r.row != i) || neg.iter().enumerate().any(|(j, r)| r.row != n + j) {
        return Err(Error::Schema("label rows must be positives 0..N then negatives N..N+M".into()));
    }
    let d = labels.cols();
    let take = |rs: &[&ManifestRecord]| -> Result<Mat> {
        let mut data = Vec::with_capacity(rs.len() * d);
        for r in rs {
            data.extend_from_slice(labels.row(r.row));
        }
        Mat::from_vec(rs.len(), d, data)
    };
    let names = pos.iter().chain(&neg).map(|r| r.id.clone()).collect();
    FeatureBank::new(take(&pos)?, take(&neg)?, names)
}

/// Training set from `train.fbnk` rows, in row order per side.
pub fn training_set(train: &Mat, records: &[ManifestRecord]) -> Result<TrainingSet> {
    check_row_bounds(records, ManifestRole::TrainPos.bank_file(), train.rows())?;
    Ok(TrainingSet {
        pos: rows_of(records, ManifestRole::TrainPos)
            .into_iter()
            .map(|r| (train.row(r.row).to_vec(), r.class.expect("validated")))
            .collect(),
        neg: rows_of(records, ManifestRole::TrainNeg)
            .into_iter()
            .map(|r| train.row(r.row).to_vec())
            .collect(),
    })
}

/// Rows of a single-role bank (`test_id`, `test_ood`) with their records, in row order.
pub fn role_rows<'a>(mat: &Mat, records: &'a [ManifestRecord], role: ManifestRole) -> Result<Vec<&'a ManifestRecord>> {
    check_row_bounds(records, role.bank_file(), mat.rows())?;
    Ok(rows_of(records, role))
}

/// Groups `crop` records by parent, in order of first appearance; rows keep manifest order.
pub fn crop_sets(crops: &Mat, records: &[ManifestRecord]) -> Result<Vec<CropSet>> {
    check_row_bounds(records, ManifestRole::Crop.bank_file(), crops.rows())?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (usize, Vec<usize>)> = HashMap::new();
    for r in records.iter().filter(|r| r.role == ManifestRole::Crop) {
        let parent = r
            .parent
            .clone()
            .ok_or_else(|| Error::Schema(format!("crop `{}` has no parent", r.id)))?;
        let class = r.class.expect("validated");
        match groups.get_mut(&parent) {
            Some((c, rows)) => {
                if *c != class {
                    return Err(Error::Schema(format!("crops of `{parent}` disagree on class")));
                }
                rows.push(r.row);
            }
            None => {
                order.push(parent.clone());
                groups.insert(parent, (class, vec![r.row]));
            }
        }
    }
    order
        .into_iter()
        .map(|parent| {
            let (label, rows) = groups.remove(&parent).expect("grouped");
            let data = rows.iter().flat_map(|&i| crops.row(i).iter().copied()).collect();
            Ok(CropSet {
                parent,
                label,
                features: Mat::from_vec(rows.len(), crops.cols(), data)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub dim: usize,
    pub n_classes: usize,
    pub m_neg: usize,
    pub shots: usize,
    pub crops_per_sample: usize,
    pub select: usize,
    /// Gaussian noise scale around prototypes; 0 gives noiseless samples.
    pub kappa: f64,
    pub seed: u64,
    pub n_test_per_class: usize,
    pub n_test_ood: usize,
    /// Fraction of each sample's crops drawn near negative prototypes.
    pub background_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 32,
            n_classes: 8,
            m_neg: 64,
            shots: 4,
            crops_per_sample: 16,
            select: 4,
            kappa: 0.3,
            seed: 7,
            n_test_per_class: 16,
            n_test_ood: 128,
            background_fraction: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("dim", self.dim),
            ("n_classes", self.n_classes),
            ("m_neg", self.m_neg),
            ("shots", self.shots),
            ("crops_per_sample", self.crops_per_sample),
            ("select", self.select),
            ("n_test_per_class", self.n_test_per_class),
            ("n_test_ood", self.n_test_ood),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("synth.{name} must be at least 1")));
            }
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            return Err(Error::InvalidConfig(format!("synth.kappa must be >= 0, got {}", self.kappa)));
        }
        if !(0.0..=1.0).contains(&self.background_fraction) {
            return Err(Error::InvalidConfig("synth.background_fraction must be in [0, 1]".into()));
        }
        if 2 * self.select > self.crops_per_sample {
            return Err(Error::InvalidConfig(format!(
                "synth.select = {} needs at least {} crops per sample",
                self.select,
                2 * self.select
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub bank: FeatureBank,
    pub train: TrainingSet,
    pub crops: Vec<CropSet>,
    pub selections: Vec<SelectionResult>,
    pub test_id: Mat,
    pub test_id_classes: Vec<usize>,
    pub test_ood: Mat,
    /// Records for every row of `labels`, `train`, `test_id`, `test_ood` and `crops` banks.
    pub manifest: Vec<ManifestRecord>,
}

impl SynthDataset {
    pub fn labels_mat(&self) -> Mat {
        self.bank.stacked()
    }

    /// `train_pos` rows followed by `train_neg` rows.
    pub fn train_mat(&self) -> Mat {
        training_mat(&self.train, self.bank.dim()).expect("consistent dims")
    }

    pub fn crops_mat(&self) -> Mat {
        let rows: Vec<&[f64]> = self.crops.iter().flat_map(|c| c.features.iter_rows()).collect();
        Mat::from_rows(&rows, self.bank.dim()).expect("consistent dims")
    }
}

/// Rows of `train.fbnk`: positives then negatives, matching [`training_records`].
pub fn training_mat(train: &TrainingSet, dim: usize) -> Result<Mat> {
    let rows: Vec<&[f64]> = train
        .pos
        .iter()
        .map(|(v, _)| v.as_slice())
        .chain(train.neg.iter().map(|v| v.as_slice()))
        .collect();
    Mat::from_rows(&rows, dim)
}

/// `train_pos` then `train_neg` records for selected crops, in the row order
/// produced by [`build_training_set`] and [`training_mat`].
pub fn training_records(selections: &[SelectionResult], crops: &[CropSet]) -> Vec<ManifestRecord> {
    let mut out = Vec::new();
    let mut row = 0;
    for (sel, c) in selections.iter().zip(crops) {
        for &i in &sel.top_indices {
            out.push(
                ManifestRecord::new(row, format!("{}/crop{i}", c.parent), ManifestRole::TrainPos)
                    .with_class(c.label)
                    .with_parent(c.parent.clone()),
            );
            row += 1;
        }
    }
    for (sel, c) in selections.iter().zip(crops) {
        for &i in &sel.bottom_indices {
            out.push(
                ManifestRecord::new(row, format!("{}/crop{i}", c.parent), ManifestRole::TrainNeg)
                    .with_parent(c.parent.clone()),
            );
            row += 1;
        }
    }
    out
}

/// Unit vector stored at the precision of bank files, so in-memory data and
/// data read back from disk agree bit for bit.
fn unit_f32(v: &[f64]) -> Result<Vec<f64>> {
    Ok(l2_normalize(v)?.into_iter().map(|x| x as f32 as f64).collect())
}

fn noisy(rng: &mut SeededRng, center: &[f64], kappa: f64) -> Result<Vec<f64>> {
    let g = rng.gaussian_vec(center.len());
    let v: Vec<f64> = center.iter().zip(&g).map(|(c, e)| c + kappa * e).collect();
    unit_f32(&v)
}

fn sphere(rng: &mut SeededRng, rows: usize, dim: usize) -> Result<Mat> {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        data.extend(unit_f32(&rng.gaussian_vec(dim))?);
    }
    Mat::from_vec(rows, dim, data)
}

/// Seeded synthetic OOD task.
///
/// Prototypes are uniform on the sphere. ID images sit near their class
/// prototype, OOD images near a random negative prototype, and each training
/// sample yields `crops_per_sample` crops of which a fixed fraction are
/// background crops near a negative prototype. Outlier selection with
/// `select` per sample then builds the training set.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed, streams::SYNTH);
    let (d, n, m) = (cfg.dim, cfg.n_classes, cfg.m_neg);
    let pos = sphere(&mut rng, n, d)?;
    let neg = sphere(&mut rng, m, d)?;
    let names: Vec<String> = (0..n).map(|k| format!("class{k}")).chain((0..m).map(|j| format!("neg{j}"))).collect();
    let bank = FeatureBank::new(pos.clone(), neg.clone(), names.clone())?;

    let p = cfg.crops_per_sample;
    let n_bg = (cfg.background_fraction * p as f64).floor() as usize;
    let mut crops = Vec::with_capacity(n * cfg.shots);
    for k in 0..n {
        for s in 0..cfg.shots {
            let mut is_bg: Vec<bool> = (0..p).map(|j| j < n_bg).collect();
            rng.shuffle(&mut is_bg);
            let mut data = Vec::with_capacity(p * d);
            for bg in is_bg {
                let center = if bg { neg.row(rng.below(m)) } else { pos.row(k) };
                data.extend(noisy(&mut rng, center, cfg.kappa)?);
            }
            crops.push(CropSet {
                parent: format!("train{k}_{s}"),
                label: k,
                features: Mat::from_vec(p, d, data)?,
            });
        }
    }
    let selections = crops
        .iter()
        .map(|c| select_outliers(c, pos.row(c.label), cfg.select))
        .collect::<Result<Vec<_>>>()?;
    let train = build_training_set(&selections, &crops)?;

    let mut id_data = Vec::new();
    let mut test_id_classes = Vec::new();
    for k in 0..n {
        for _ in 0..cfg.n_test_per_class {
            id_data.extend(noisy(&mut rng, pos.row(k), cfg.kappa)?);
            test_id_classes.push(k);
        }
    }
    let test_id = Mat::from_vec(test_id_classes.len(), d, id_data)?;
    let mut ood_data = Vec::new();
    for _ in 0..cfg.n_test_ood {
        let j = rng.below(m);
        ood_data.extend(noisy(&mut rng, neg.row(j), cfg.kappa)?);
    }
    let test_ood = Mat::from_vec(cfg.n_test_ood, d, ood_data)?;

    let mut manifest = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let role = if i < n { ManifestRole::PosLabel } else { ManifestRole::NegLabel };
        manifest.push(ManifestRecord::new(i, name.clone(), role));
    }
    manifest.extend(training_records(&selections, &crops));
    for (i, &k) in test_id_classes.iter().enumerate() {
        manifest.push(ManifestRecord::new(i, format!("id{i}"), ManifestRole::TestId).with_class(k));
    }
    for i in 0..cfg.n_test_ood {
        manifest.push(ManifestRecord::new(i, format!("ood{i}"), ManifestRole::TestOod));
    }
    let mut row = 0;
    for c in &crops {
        for i in 0..p {
            manifest.push(
                ManifestRecord::new(row, format!("{}/crop{i}", c.parent), ManifestRole::Crop)
                    .with_class(c.label)
                    .with_parent(c.parent.clone()),
            );
            row += 1;
        }
    }

    Ok(SynthDataset {
        bank,
        train,
        crops,
        selections,
        test_id,
        test_id_classes,
        test_ood,
        manifest,
    })
}
