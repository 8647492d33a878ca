//! On-disk formats: dataset manifests with VSEB embedding blobs, label
//! banks, reference annotations, ground-truth tables, and SVM model files.
//!
//! A VSEB blob is `b"VSEB"`, `u32` version, `u64` rows, `u64` dims, then
//! `rows * dims` little-endian `f32` values in row-major order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::SvmModel;
use crate::downstream::LabelEmbeddingBank;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{Dataset, EmbeddingMatrix, Pose, SceneCapture, ViewKey, ViewRecord};
use crate::synth::GroundTruth;

pub const BLOB_MAGIC: &[u8; 4] = b"VSEB";
pub const BLOB_VERSION: u32 = 1;
const BLOB_HEADER: usize = 4 + 4 + 8 + 8;
pub const MODEL_MAGIC: &[u8; 4] = b"VSSM";
pub const MODEL_VERSION: u32 = 1;
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const BANK_SCHEMA_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn encode_blob(rows: usize, dims: usize, data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(BLOB_HEADER + 4 * data.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u64).to_le_bytes());
    out.extend_from_slice(&(dims as u64).to_le_bytes());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a blob into `(rows, dims, values)`.
pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    if bytes.len() < BLOB_HEADER {
        return Err(Error::format(path, format!("blob is {} bytes, shorter than its header", bytes.len())));
    }
    if &bytes[..4] != BLOB_MAGIC {
        return Err(Error::format(path, "missing VSEB magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != BLOB_VERSION {
        return Err(Error::format(path, format!("unsupported blob version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let dims = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let want = rows
        .checked_mul(dims)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| Error::format(path, "blob shape overflows"))?;
    let body = &bytes[BLOB_HEADER..];
    if body.len() != want {
        return Err(Error::format(
            path,
            format!("header says {rows}x{dims} but payload holds {} bytes, expected {want}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((rows as usize, dims as usize, data))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::format(path, format!("cannot read: {e}")))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_blob(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    write_bytes(path, &encode_blob(m.rows(), m.dims(), m.as_slice()))
}

pub fn read_blob(path: &Path, featurizer_id: &str) -> Result<EmbeddingMatrix> {
    let (rows, dims, data) = decode_blob(&read_bytes(path)?, path)?;
    EmbeddingMatrix::new(featurizer_id, rows, dims, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub view_id: String,
    pub azimuth: f64,
    pub elevation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub scene_id: String,
    pub category_label: String,
    pub views: Vec<ViewEntry>,
    /// Featurizer id to blob path, relative to the manifest.
    pub embedding_files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub dataset_id: String,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    pub normalize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { normalize: true }
    }
}

fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

fn check_path_component(kind: &str, id: &str) -> Result<()> {
    let bad = id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\', '\0']);
    if bad {
        return Err(Error::Validation(format!("{kind} id `{id}` cannot be used as a file name")));
    }
    Ok(())
}

pub fn blob_relative_path(scene_id: &str, featurizer_id: &str) -> String {
    format!("embeddings/{scene_id}/{featurizer_id}.vseb")
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let bytes = read_bytes(path)?;
    let m: DatasetManifest =
        serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    if m.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::format(path, format!("unsupported schema version {}", m.schema_version)));
    }
    Ok(m)
}

/// Reads a manifest and every blob it references, validating shapes and
/// values. Errors name the offending scene and featurizer.
pub fn load_dataset(manifest_path: &Path, opts: LoadOptions) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut scenes = Vec::with_capacity(manifest.scenes.len());
    for entry in &manifest.scenes {
        let sid = &entry.scene_id;
        let views = entry
            .views
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let pose = match v.position {
                    Some(p) => Pose::full(p, v.azimuth, v.elevation),
                    None => Pose::turntable(v.azimuth, v.elevation),
                }
                .map_err(|e| Error::Validation(format!("scene `{sid}`, view `{}`: {e}", v.view_id)))?;
                Ok(ViewRecord {
                    view_id: v.view_id.clone(),
                    pose,
                    ordinal: i,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut embeddings = Vec::with_capacity(entry.embedding_files.len());
        for (fid, rel) in &entry.embedding_files {
            let path = root.join(rel);
            let ctx = |e: Error| match e {
                Error::Format { path, reason } => Error::Format {
                    path,
                    reason: format!("scene `{sid}`, featurizer `{fid}`: {reason}"),
                },
                other => Error::Validation(format!("scene `{sid}`, featurizer `{fid}`: {other}")),
            };
            let mut m = read_blob(&path, fid).map_err(ctx)?;
            if m.rows() != views.len() {
                return Err(Error::Validation(format!(
                    "scene `{sid}`, featurizer `{fid}`: blob has {} rows for {} views",
                    m.rows(),
                    views.len()
                )));
            }
            if opts.normalize {
                m.normalize().map_err(ctx)?;
            }
            embeddings.push(m);
        }
        scenes.push(SceneCapture::new(sid.clone(), entry.category_label.clone(), views, embeddings)?);
    }
    Dataset::new(manifest.dataset_id, scenes)
}

pub fn manifest_for(dataset: &Dataset) -> Result<DatasetManifest> {
    let mut scenes = Vec::with_capacity(dataset.scenes().len());
    for s in dataset.scenes() {
        check_path_component("scene", s.scene_id())?;
        let mut files = BTreeMap::new();
        for fid in s.featurizer_ids() {
            check_path_component("featurizer", fid)?;
            files.insert(fid.to_owned(), blob_relative_path(s.scene_id(), fid));
        }
        scenes.push(SceneEntry {
            scene_id: s.scene_id().to_owned(),
            category_label: s.category_label().to_owned(),
            views: s
                .views()
                .iter()
                .map(|v| ViewEntry {
                    view_id: v.view_id.clone(),
                    azimuth: v.pose.azimuth(),
                    elevation: v.pose.elevation(),
                    position: v.pose.position(),
                })
                .collect(),
            embedding_files: files,
        });
    }
    Ok(DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        dataset_id: dataset.dataset_id().to_owned(),
        scenes,
    })
}

/// Writes `manifest.json` and one blob per (scene, featurizer) under `dir`.
/// Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let manifest = manifest_for(dataset)?;
    for s in dataset.scenes() {
        for m in s.embeddings() {
            write_blob(&dir.join(blob_relative_path(s.scene_id(), m.featurizer_id())), m)?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    write_bytes(&path, &to_json_bytes(&manifest)?)?;
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelBankFile {
    pub schema_version: u32,
    pub featurizer_id: String,
    pub labels: Vec<String>,
    /// VSEB blob with one row per label, relative to this file.
    pub embedding_file: String,
}

pub fn read_label_bank(path: &Path) -> Result<LabelEmbeddingBank> {
    let bytes = read_bytes(path)?;
    let f: LabelBankFile = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    if f.schema_version != BANK_SCHEMA_VERSION {
        return Err(Error::format(path, format!("unsupported schema version {}", f.schema_version)));
    }
    let blob = path.parent().unwrap_or(Path::new(".")).join(&f.embedding_file);
    let (rows, dims, data) = decode_blob(&read_bytes(&blob)?, &blob)?;
    let values: Vec<f64> = data.iter().map(|&v| f64::from(v)).collect();
    LabelEmbeddingBank::new(f.featurizer_id, f.labels, Matrix::from_vec(rows, dims, values)?)
}

/// Writes `<stem>.json` and `<stem>.vseb` into `dir`; returns the JSON path.
pub fn write_label_bank(bank: &LabelEmbeddingBank, dir: &Path, stem: &str) -> Result<PathBuf> {
    check_path_component("label bank", stem)?;
    let blob_name = format!("{stem}.vseb");
    let data: Vec<f32> = bank.vectors().as_slice().iter().map(|&v| v as f32).collect();
    write_bytes(&dir.join(&blob_name), &encode_blob(bank.len(), bank.dims(), &data))?;
    let file = LabelBankFile {
        schema_version: BANK_SCHEMA_VERSION,
        featurizer_id: bank.featurizer_id().to_owned(),
        labels: bank.labels().to_vec(),
        embedding_file: blob_name,
    };
    let path = dir.join(format!("{stem}.json"));
    write_bytes(&path, &to_json_bytes(&file)?)?;
    Ok(path)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReferenceAnnotation {
    pub positive: BTreeSet<ViewKey>,
    pub negative: BTreeSet<ViewKey>,
}

#[derive(Deserialize)]
struct ReferenceRow {
    scene_id: String,
    view_id: String,
    is_accidental: String,
}

fn parse_flag(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

/// Reads `scene_id,view_id,is_accidental` rows.
pub fn read_reference_annotations(path: &Path) -> Result<ReferenceAnnotation> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out = ReferenceAnnotation::default();
    for (line, row) in rdr.deserialize::<ReferenceRow>().enumerate() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        let flag = parse_flag(&row.is_accidental).ok_or_else(|| {
            Error::format(path, format!("row {}: is_accidental `{}` is not a boolean", line + 1, row.is_accidental))
        })?;
        let key = ViewKey::new(row.scene_id, row.view_id);
        let (mine, other) = if flag {
            (&mut out.positive, &out.negative)
        } else {
            (&mut out.negative, &out.positive)
        };
        if other.contains(&key) {
            return Err(Error::format(path, format!("view {key} is annotated both ways")));
        }
        mine.insert(key);
    }
    Ok(out)
}

pub fn write_reference_annotations(path: &Path, reference: &ReferenceAnnotation) -> Result<()> {
    let mut rows: Vec<(&ViewKey, bool)> = reference
        .positive
        .iter()
        .map(|k| (k, true))
        .chain(reference.negative.iter().map(|k| (k, false)))
        .collect();
    rows.sort();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["scene_id", "view_id", "is_accidental"])?;
    for (k, flag) in rows {
        w.write_record([k.scene_id.as_str(), k.view_id.as_str(), if flag { "true" } else { "false" }])?;
    }
    write_bytes(path, &finish_csv(w)?)
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| Error::Io {
            path: PathBuf::from("<memory>"),
            source: std::io::Error::other(e.to_string()),
        })
}

/// One row per (featurizer, scene, view) with the true category.
pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["featurizer_id", "scene_id", "view_id", "category", "class_label"])?;
    for (f, fid) in truth.featurizer_ids.iter().enumerate() {
        for (s, sid) in truth.scene_ids.iter().enumerate() {
            for (v, vid) in truth.view_ids[s].iter().enumerate() {
                w.write_record([
                    fid.as_str(),
                    sid.as_str(),
                    vid.as_str(),
                    truth.categories[f][s][v].as_str(),
                    truth.scene_classes[s].as_str(),
                ])?;
            }
        }
    }
    write_bytes(path, &finish_csv(w)?)
}

pub fn encode_svm_model(model: &SvmModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.support_vectors.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(model.support_vectors.cols() as u64).to_le_bytes());
    for v in [
        model.gamma,
        model.c,
        model.bias,
        model.class_weights[0],
        model.class_weights[1],
        model.kkt_gap,
        model.dual_residual,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(model.iterations as u64).to_le_bytes());
    for v in model.support_vectors.as_slice().iter().chain(&model.dual_coefs) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::format(self.path, "model file is truncated"))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
}

pub fn decode_svm_model(bytes: &[u8], path: &Path) -> Result<SvmModel> {
    let mut cur = Cursor { bytes, pos: 0, path };
    if cur.take(4)? != MODEL_MAGIC {
        return Err(Error::format(path, "missing VSSM magic"));
    }
    let version = u32::from_le_bytes(cur.take(4)?.try_into().expect("4 bytes"));
    if version != MODEL_VERSION {
        return Err(Error::format(path, format!("unsupported model version {version}")));
    }
    let rows = cur.u64()? as usize;
    let dims = cur.u64()? as usize;
    let mut f = [0.0f64; 7];
    for v in f.iter_mut() {
        *v = cur.f64()?;
    }
    let iterations = cur.u64()? as usize;
    let n = rows
        .checked_mul(dims)
        .and_then(|x| x.checked_add(rows))
        .filter(|&x| x.checked_mul(8).is_some_and(|b| b == bytes.len() - cur.pos))
        .ok_or_else(|| Error::format(path, "model payload size does not match its header"))?;
    let mut vals = Vec::with_capacity(n);
    for _ in 0..n {
        vals.push(cur.f64()?);
    }
    let coefs = vals.split_off(rows * dims);
    Ok(SvmModel {
        support_vectors: Matrix::from_vec(rows, dims, vals)?,
        dual_coefs: coefs,
        gamma: f[0],
        c: f[1],
        bias: f[2],
        class_weights: [f[3], f[4]],
        kkt_gap: f[5],
        dual_residual: f[6],
        iterations,
    })
}

pub fn write_svm_model(path: &Path, model: &SvmModel) -> Result<()> {
    write_bytes(path, &encode_svm_model(model))
}

pub fn read_svm_model(path: &Path) -> Result<SvmModel> {
    decode_svm_model(&read_bytes(path)?, path)
}

/// Writes `bytes` to `path`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    write_bytes(path, bytes)
}
