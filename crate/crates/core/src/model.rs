//! Domain types shared by every stage: poses, view records, embedding
//! matrices, scene captures and per-featurizer label sets, plus the two
//! distance primitives everything else is built on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Tolerance on the L2 norm of a row flagged as normalized.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseMode {
    /// Object spins in place; only the viewing angles are meaningful.
    Turntable,
    /// Free camera; position and angles both count.
    Full6Dof,
}

/// Camera pose of one view. Angles are degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    position: [f64; 3],
    azimuth: f64,
    elevation: f64,
    mode: PoseMode,
}

impl Pose {
    pub fn turntable(azimuth: f64, elevation: f64) -> Result<Self> {
        Self::build([0.0; 3], azimuth, elevation, PoseMode::Turntable)
    }

    pub fn full(position: [f64; 3], azimuth: f64, elevation: f64) -> Result<Self> {
        Self::build(position, azimuth, elevation, PoseMode::Full6Dof)
    }

    fn build(position: [f64; 3], azimuth: f64, elevation: f64, mode: PoseMode) -> Result<Self> {
        if !azimuth.is_finite() || !elevation.is_finite() || position.iter().any(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument("pose has non-finite components".into()));
        }
        if !(-90.0..=90.0).contains(&elevation) {
            return Err(Error::InvalidArgument(format!(
                "elevation {elevation} outside [-90, 90]"
            )));
        }
        let mut azimuth = azimuth.rem_euclid(360.0);
        // rem_euclid can round up to exactly 360 for tiny negative inputs
        if azimuth >= 360.0 {
            azimuth = 0.0;
        }
        Ok(Self {
            position,
            azimuth,
            elevation,
            mode,
        })
    }

    pub fn position(&self) -> Option<[f64; 3]> {
        match self.mode {
            PoseMode::Turntable => None,
            PoseMode::Full6Dof => Some(self.position),
        }
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn mode(&self) -> PoseMode {
        self.mode
    }
}

fn wrapped_azimuth_delta(a: f64, b: f64) -> f64 {
    let d = (a - b).abs().rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Distance between two camera poses.
///
/// Turntable poses compare angles only: `sqrt(Δaz² + Δel²)` with the azimuth
/// difference taken around the circle. Full poses add squared Euclidean
/// position distance to `angle_weight` times the squared angular term.
pub fn pose_distance(a: &Pose, b: &Pose, angle_weight: f64) -> Result<f64> {
    if a.mode != b.mode {
        return Err(Error::IncomparablePoses(format!(
            "{:?} vs {:?}",
            a.mode, b.mode
        )));
    }
    if !(angle_weight >= 0.0 && angle_weight.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "angle weight must be finite and nonnegative, got {angle_weight}"
        )));
    }
    let daz = wrapped_azimuth_delta(a.azimuth, b.azimuth);
    let del = a.elevation - b.elevation;
    let angular = daz * daz + del * del;
    Ok(match a.mode {
        PoseMode::Turntable => angular.sqrt(),
        PoseMode::Full6Dof => {
            let spatial: f64 = a
                .position
                .iter()
                .zip(&b.position)
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            (spatial + angle_weight * angular).sqrt()
        }
    })
}

/// Cosine distance `1 - x·y / (|x||y|)`, clamped to `[0, 2]`.
pub fn feature_distance<T>(x: &[T], y: &[T]) -> Result<f64>
where
    T: Copy + Into<f64>,
{
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    let (mut xy, mut xx, mut yy) = (0.0f64, 0.0f64, 0.0f64);
    let mut identical = true;
    for (&a, &b) in x.iter().zip(y) {
        let (a, b): (f64, f64) = (a.into(), b.into());
        identical &= a == b;
        xy += a * b;
        xx += a * a;
        yy += b * b;
    }
    if !(xy.is_finite() && xx.is_finite() && yy.is_finite()) {
        return Err(Error::DegenerateEmbedding("non-finite component".into()));
    }
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::DegenerateEmbedding("zero-norm vector".into()));
    }
    if identical {
        return Ok(0.0);
    }
    Ok((1.0 - xy / (xx.sqrt() * yy.sqrt())).clamp(0.0, 2.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewRecord {
    pub view_id: String,
    pub pose: Pose,
    pub ordinal: usize,
}

/// Per-featurizer embedding rows for one scene, stored as `f32` exactly as
/// they appear on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    featurizer_id: String,
    rows: usize,
    dims: usize,
    data: Vec<f32>,
    normalized: bool,
    raw_norms: Option<Vec<f64>>,
}

impl EmbeddingMatrix {
    pub fn new(featurizer_id: impl Into<String>, rows: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        let featurizer_id = featurizer_id.into();
        if dims == 0 {
            return Err(Error::Validation(format!(
                "featurizer `{featurizer_id}`: embedding dims must be positive"
            )));
        }
        if data.len() != rows * dims {
            return Err(Error::Validation(format!(
                "featurizer `{featurizer_id}`: expected {rows}x{dims} values, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "featurizer `{featurizer_id}`: non-finite value at row {}",
                pos / dims
            )));
        }
        let normalized = (0..rows).all(|i| {
            let n = row_norm(&data[i * dims..(i + 1) * dims]);
            (n - 1.0).abs() <= NORM_TOLERANCE
        });
        Ok(Self {
            featurizer_id,
            rows,
            dims,
            data,
            normalized,
            raw_norms: None,
        })
    }

    /// Builds from `f64` rows, rounding each value to `f32`.
    pub fn from_f64_rows(featurizer_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dims);
        for r in rows {
            if r.len() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    got: r.len(),
                });
            }
            data.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(featurizer_id, rows.len(), dims, data)
    }

    /// Rescales every row to unit L2 norm, keeping the original norms in
    /// [`raw_norms`](Self::raw_norms). Rows already within tolerance are left
    /// bit-for-bit unchanged so normalization is idempotent.
    pub fn normalize(&mut self) -> Result<()> {
        let mut norms = Vec::with_capacity(self.rows);
        for i in 0..self.rows {
            let row = &mut self.data[i * self.dims..(i + 1) * self.dims];
            let n = row_norm(row);
            if n == 0.0 {
                return Err(Error::DegenerateEmbedding(format!(
                    "featurizer `{}`: row {i} has zero norm",
                    self.featurizer_id
                )));
            }
            if (n - 1.0).abs() > NORM_TOLERANCE {
                for v in row.iter_mut() {
                    *v = (f64::from(*v) / n) as f32;
                }
            }
            norms.push(n);
        }
        self.normalized = true;
        self.raw_norms = Some(norms);
        Ok(())
    }

    pub fn featurizer_id(&self) -> &str {
        &self.featurizer_id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn raw_norms(&self) -> Option<&[f64]> {
        self.raw_norms.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn to_matrix(&self) -> Matrix {
        let data = self.data.iter().map(|&v| f64::from(v)).collect();
        Matrix::from_vec(self.rows, self.dims, data).expect("shape checked at construction")
    }
}

fn row_norm(row: &[f32]) -> f64 {
    row.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt()
}

/// One object's dense sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneCapture {
    scene_id: String,
    category_label: String,
    views: Vec<ViewRecord>,
    embeddings: BTreeMap<String, EmbeddingMatrix>,
}

impl SceneCapture {
    pub fn new(
        scene_id: impl Into<String>,
        category_label: impl Into<String>,
        views: Vec<ViewRecord>,
        embeddings: Vec<EmbeddingMatrix>,
    ) -> Result<Self> {
        let scene_id = scene_id.into();
        let mut seen = BTreeSet::new();
        for (i, v) in views.iter().enumerate() {
            if v.ordinal != i {
                return Err(Error::Validation(format!(
                    "scene `{scene_id}`: view `{}` has ordinal {} at position {i}",
                    v.view_id, v.ordinal
                )));
            }
            if !seen.insert(v.view_id.as_str()) {
                return Err(Error::Validation(format!(
                    "scene `{scene_id}`: duplicate view id `{}`",
                    v.view_id
                )));
            }
        }
        let mut map = BTreeMap::new();
        for e in embeddings {
            if e.rows() != views.len() {
                return Err(Error::Validation(format!(
                    "scene `{scene_id}`, featurizer `{}`: {} embedding rows for {} views",
                    e.featurizer_id(),
                    e.rows(),
                    views.len()
                )));
            }
            let fid = e.featurizer_id().to_owned();
            if map.insert(fid.clone(), e).is_some() {
                return Err(Error::Validation(format!(
                    "scene `{scene_id}`: featurizer `{fid}` given twice"
                )));
            }
        }
        Ok(Self {
            scene_id,
            category_label: category_label.into(),
            views,
            embeddings: map,
        })
    }

    pub fn scene_id(&self) -> &str {
        &self.scene_id
    }

    pub fn category_label(&self) -> &str {
        &self.category_label
    }

    pub fn views(&self) -> &[ViewRecord] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn embedding(&self, featurizer_id: &str) -> Result<&EmbeddingMatrix> {
        self.embeddings
            .get(featurizer_id)
            .ok_or_else(|| Error::UnknownFeaturizer(featurizer_id.to_owned()))
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &EmbeddingMatrix> {
        self.embeddings.values()
    }

    pub fn featurizer_ids(&self) -> impl Iterator<Item = &str> {
        self.embeddings.keys().map(String::as_str)
    }

    pub fn view_key(&self, i: usize) -> ViewKey {
        ViewKey::new(&self.scene_id, &self.views[i].view_id)
    }

    pub(crate) fn embeddings_mut(&mut self) -> impl Iterator<Item = &mut EmbeddingMatrix> {
        self.embeddings.values_mut()
    }
}

/// An ordered collection of scenes sharing one featurizer set.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dataset_id: String,
    scenes: Vec<SceneCapture>,
}

impl Dataset {
    pub fn new(dataset_id: impl Into<String>, scenes: Vec<SceneCapture>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for s in &scenes {
            if !ids.insert(s.scene_id()) {
                return Err(Error::Validation(format!(
                    "duplicate scene id `{}`",
                    s.scene_id()
                )));
            }
        }
        if let Some(first) = scenes.first() {
            let expected: Vec<&str> = first.featurizer_ids().collect();
            let mut dims: BTreeMap<&str, usize> = BTreeMap::new();
            for s in &scenes {
                let got: Vec<&str> = s.featurizer_ids().collect();
                if got != expected {
                    return Err(Error::Validation(format!(
                        "scene `{}` has featurizers {:?}, expected {:?}",
                        s.scene_id(),
                        got,
                        expected
                    )));
                }
                for e in s.embeddings() {
                    let d = *dims.entry(e.featurizer_id()).or_insert(e.dims());
                    if d != e.dims() {
                        return Err(Error::Validation(format!(
                            "scene `{}`, featurizer `{}`: dims {} differ from {} in earlier scenes",
                            s.scene_id(),
                            e.featurizer_id(),
                            e.dims(),
                            d
                        )));
                    }
                }
            }
        }
        Ok(Self {
            dataset_id: dataset_id.into(),
            scenes,
        })
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    pub fn scenes(&self) -> &[SceneCapture] {
        &self.scenes
    }

    pub fn scene(&self, scene_id: &str) -> Option<&SceneCapture> {
        self.scenes.iter().find(|s| s.scene_id() == scene_id)
    }

    pub fn featurizer_ids(&self) -> Vec<String> {
        self.scenes
            .first()
            .map(|s| s.featurizer_ids().map(str::to_owned).collect())
            .unwrap_or_default()
    }

    pub fn dims(&self, featurizer_id: &str) -> Result<usize> {
        let scene = self
            .scenes
            .first()
            .ok_or_else(|| Error::UnknownFeaturizer(featurizer_id.to_owned()))?;
        Ok(scene.embedding(featurizer_id)?.dims())
    }

    pub fn view_count(&self) -> usize {
        self.scenes.iter().map(SceneCapture::len).sum()
    }

    pub fn normalize_embeddings(&mut self) -> Result<()> {
        for s in &mut self.scenes {
            let sid = s.scene_id.clone();
            for e in s.embeddings_mut() {
                e.normalize().map_err(|err| match err {
                    Error::DegenerateEmbedding(m) => {
                        Error::Validation(format!("scene `{sid}`: {m}"))
                    }
                    other => other,
                })?;
            }
        }
        Ok(())
    }
}

/// Globally unique view identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ViewKey {
    pub scene_id: String,
    pub view_id: String,
}

impl ViewKey {
    pub fn new(scene_id: impl Into<String>, view_id: impl Into<String>) -> Self {
        Self {
            scene_id: scene_id.into(),
            view_id: view_id.into(),
        }
    }
}

impl fmt::Display for ViewKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.scene_id, self.view_id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Stable,
    Accidental,
    Ood,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Stable, Category::Accidental, Category::Ood];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Stable => "stable",
            Category::Accidental => "accidental",
            Category::Ood => "ood",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stable" => Some(Category::Stable),
            "accidental" => Some(Category::Accidental),
            "ood" => Some(Category::Ood),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Stable / accidental / OOD view sets for one featurizer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ViewLabelSet {
    featurizer_id: String,
    stable: BTreeSet<ViewKey>,
    accidental: BTreeSet<ViewKey>,
    ood: BTreeSet<ViewKey>,
}

impl ViewLabelSet {
    pub fn new(
        featurizer_id: impl Into<String>,
        stable: BTreeSet<ViewKey>,
        accidental: BTreeSet<ViewKey>,
        ood: BTreeSet<ViewKey>,
    ) -> Result<Self> {
        let overlap = stable
            .intersection(&accidental)
            .chain(stable.intersection(&ood))
            .chain(accidental.intersection(&ood))
            .next();
        if let Some(k) = overlap {
            return Err(Error::Validation(format!("view {k} carries two labels")));
        }
        Ok(Self {
            featurizer_id: featurizer_id.into(),
            stable,
            accidental,
            ood,
        })
    }

    pub fn featurizer_id(&self) -> &str {
        &self.featurizer_id
    }

    pub fn set(&self, category: Category) -> &BTreeSet<ViewKey> {
        match category {
            Category::Stable => &self.stable,
            Category::Accidental => &self.accidental,
            Category::Ood => &self.ood,
        }
    }

    pub fn category_of(&self, key: &ViewKey) -> Option<Category> {
        Category::ALL.into_iter().find(|&c| self.set(c).contains(key))
    }

    /// Every labeled view.
    pub fn universe(&self) -> BTreeSet<ViewKey> {
        self.stable
            .iter()
            .chain(&self.accidental)
            .chain(&self.ood)
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.stable.len() + self.accidental.len() + self.ood.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
