//! End-to-end orchestration and report emission.
//!
//! Featurizers are processed on a bounded worker pool; every report file is
//! rendered in memory and written in sorted path order, so the bytes on
//! disk depend only on the inputs and the configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::agreement::{mean_iou_by_category, overlap_with_reference, pairwise_iou_matrix, CategoryMeans};
use crate::classifier::{evaluate_stability_classifier, scene_split, ClassifierReport, SplitSpec, SvmModel, SvmParams, DEFAULT_SPLIT_RATIO};
use crate::cluster::{pca_project, split_accidental_ood, PcaProjection, SubtypeSplit};
use crate::downstream::{evaluate_by_stability, DownstreamTask, LabelEmbeddingBank, ProbeConfig, StabilityAccuracy};
use crate::error::{Error, Result, StageExt};
use crate::instability::{build_instability_table, default_radius, InstabilityTable, ScoringConfig, DEFAULT_PERCENTILE};
use crate::io::{encode_svm_model, finish_csv, write_file, ReferenceAnnotation};
use crate::linalg::Matrix;
use crate::model::{Category, Dataset, ViewKey, ViewLabelSet};

pub const PCA_COMPONENTS: usize = 2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub cluster: bool,
    pub pca: bool,
    pub classify: bool,
    pub agree: bool,
    pub zeroshot: bool,
    pub probe: bool,
}

impl Stages {
    pub fn all() -> Self {
        Self {
            cluster: true,
            pca: true,
            classify: true,
            agree: true,
            zeroshot: true,
            probe: true,
        }
    }

    /// Labeling, projection and agreement without any training.
    pub fn report() -> Self {
        Self {
            cluster: true,
            pca: true,
            agree: true,
            zeroshot: true,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    /// Empty selects every featurizer in the dataset.
    pub featurizers: Vec<String>,
    /// `None` derives the radius from pose spacing.
    pub radius: Option<f64>,
    pub percentile: f64,
    pub nms_radius: Option<f64>,
    pub angle_weight: f64,
    pub seed: u64,
    pub split_ratio: f64,
    pub ks: Vec<usize>,
    pub svm: SvmParams,
    pub probe: ProbeConfig,
    pub stages: Stages,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            featurizers: Vec::new(),
            radius: None,
            percentile: DEFAULT_PERCENTILE,
            nms_radius: None,
            angle_weight: 1.0,
            seed: 0,
            split_ratio: DEFAULT_SPLIT_RATIO,
            ks: vec![1, 5, 10],
            svm: SvmParams::default(),
            probe: ProbeConfig::default(),
            stages: Stages::all(),
        }
    }
}

/// Side inputs that are not part of the dataset itself.
#[derive(Clone, Debug, Default)]
pub struct PipelineInputs {
    pub banks: BTreeMap<String, LabelEmbeddingBank>,
    pub reference: Option<ReferenceAnnotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterOutcome {
    /// Unstable views in dataset order, aligned with the split's rows.
    pub keys: Vec<ViewKey>,
    pub split: SubtypeSplit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturizerReport {
    pub featurizer_id: String,
    pub table: InstabilityTable,
    pub cluster: Option<ClusterOutcome>,
    pub labels: Option<ViewLabelSet>,
    /// Labeled views in dataset order with their categories.
    pub pca: Option<(Vec<(ViewKey, Category)>, PcaProjection)>,
    pub classifier: Option<(ClassifierReport, SvmModel)>,
    pub zeroshot: Option<StabilityAccuracy>,
    pub probe: Option<StabilityAccuracy>,
    pub reference_overlap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgreementReport {
    pub featurizer_ids: Vec<String>,
    /// Pairwise matrices in `Category::ALL` order.
    pub matrices: Vec<Matrix>,
    /// `None` with a single featurizer.
    pub means: Option<CategoryMeans>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    pub dataset_id: String,
    pub config: PipelineConfig,
    pub config_hash: String,
    pub scoring: ScoringConfig,
    pub split: Option<SplitSpec>,
    pub featurizers: Vec<FeaturizerReport>,
    pub agreement: Option<AgreementReport>,
}

/// First 16 hex digits of the SHA-256 of the config's JSON encoding.
pub fn config_hash(cfg: &PipelineConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
}

fn resolve_featurizers(dataset: &Dataset, wanted: &[String]) -> Result<Vec<String>> {
    let have = dataset.featurizer_ids();
    if wanted.is_empty() {
        if have.is_empty() {
            return Err(Error::Validation("dataset has no embeddings".into()));
        }
        return Ok(have);
    }
    let mut seen = BTreeSet::new();
    for f in wanted {
        if !have.contains(f) {
            return Err(Error::UnknownFeaturizer(f.clone()));
        }
        if !seen.insert(f) {
            return Err(Error::InvalidArgument(format!("featurizer `{f}` requested twice")));
        }
    }
    Ok(wanted.to_vec())
}

fn cluster_stage(dataset: &Dataset, fid: &str, table: &InstabilityTable, seed: u64) -> Result<(ClusterOutcome, ViewLabelSet)> {
    let mut keys = Vec::new();
    let mut rows = Vec::new();
    let mut stable = BTreeSet::new();
    for (si, scene) in dataset.scenes().iter().enumerate() {
        let emb = scene.embedding(fid)?;
        for (i, r) in table.scene_rows(si).iter().enumerate() {
            if r.score.is_none() {
                continue;
            }
            if r.unstable {
                keys.push(scene.view_key(i));
                rows.push(emb.row_f64(i));
            } else {
                stable.insert(scene.view_key(i));
            }
        }
    }
    let split = split_accidental_ood(&Matrix::from_rows(&rows)?, seed)?;
    let mut acc = BTreeSet::new();
    let mut ood = BTreeSet::new();
    for (i, k) in keys.iter().enumerate() {
        match split.category(i) {
            Category::Accidental => acc.insert(k.clone()),
            _ => ood.insert(k.clone()),
        };
    }
    let labels = ViewLabelSet::new(fid, stable, acc, ood)?;
    Ok((ClusterOutcome { keys, split }, labels))
}

fn pca_stage(dataset: &Dataset, fid: &str, labels: &ViewLabelSet) -> Result<(Vec<(ViewKey, Category)>, PcaProjection)> {
    let mut keys = Vec::new();
    let mut rows = Vec::new();
    for scene in dataset.scenes() {
        let emb = scene.embedding(fid)?;
        for i in 0..scene.len() {
            let k = scene.view_key(i);
            if let Some(c) = labels.category_of(&k) {
                rows.push(emb.row_f64(i));
                keys.push((k, c));
            }
        }
    }
    let p = pca_project(&Matrix::from_rows(&rows)?, PCA_COMPONENTS)?;
    Ok((keys, p))
}

#[allow(clippy::too_many_arguments)]
fn featurizer_stage(
    dataset: &Dataset,
    fid: &str,
    cfg: &PipelineConfig,
    scoring: &ScoringConfig,
    split: Option<&SplitSpec>,
    inputs: &PipelineInputs,
) -> Result<FeaturizerReport> {
    let st = cfg.stages;
    let table = build_instability_table(dataset, fid, scoring).stage("instability")?;
    let mut rep = FeaturizerReport {
        featurizer_id: fid.to_owned(),
        table,
        cluster: None,
        labels: None,
        pca: None,
        classifier: None,
        zeroshot: None,
        probe: None,
        reference_overlap: None,
    };
    if st.cluster {
        let (c, l) = cluster_stage(dataset, fid, &rep.table, cfg.seed).stage("cluster")?;
        rep.cluster = Some(c);
        rep.labels = Some(l);
    }
    if let (true, Some(labels)) = (st.pca, &rep.labels) {
        rep.pca = Some(pca_stage(dataset, fid, labels).stage("pca")?);
    }
    if let (true, Some(split)) = (st.classify, split) {
        let params = SvmParams {
            seed: cfg.seed,
            ..cfg.svm.clone()
        };
        rep.classifier = Some(evaluate_stability_classifier(dataset, fid, &rep.table, split, &params).stage("classify")?);
    }
    if let Some(labels) = &rep.labels {
        if st.zeroshot {
            if let Some(bank) = inputs.banks.get(fid) {
                let ks: Vec<usize> = cfg.ks.iter().copied().filter(|&k| k <= bank.len()).collect();
                if !ks.is_empty() {
                    let task = DownstreamTask::ZeroShot { bank, ks };
                    rep.zeroshot = Some(evaluate_by_stability(dataset, fid, labels, &task).stage("zeroshot")?);
                }
            }
        }
        if let (true, Some(split)) = (st.probe, split) {
            let task = DownstreamTask::Probe {
                split,
                cfg: ProbeConfig {
                    seed: cfg.seed,
                    ..cfg.probe.clone()
                },
            };
            rep.probe = Some(evaluate_by_stability(dataset, fid, labels, &task).stage("probe")?);
        }
        if let (true, Some(reference)) = (st.agree, &inputs.reference) {
            rep.reference_overlap = Some(
                overlap_with_reference(labels.set(Category::Accidental), &reference.positive, &reference.negative)
                    .stage("agree")?,
            );
        }
    }
    Ok(rep)
}

fn agreement_stage(reports: &[FeaturizerReport]) -> Result<Option<AgreementReport>> {
    let sets: Vec<ViewLabelSet> = reports.iter().filter_map(|r| r.labels.clone()).collect();
    if sets.is_empty() {
        return Ok(None);
    }
    let matrices = Category::ALL
        .iter()
        .map(|&c| pairwise_iou_matrix(&sets, c))
        .collect::<Result<Vec<_>>>()?;
    let means = if sets.len() >= 2 {
        Some(mean_iou_by_category(&sets)?)
    } else {
        None
    };
    Ok(Some(AgreementReport {
        featurizer_ids: sets.iter().map(|s| s.featurizer_id().to_owned()).collect(),
        matrices,
        means,
    }))
}

/// Runs the configured stages for every selected featurizer. `workers`
/// bounds the thread pool (0 lets the pool pick); results do not depend on it.
pub fn run_pipeline(dataset: &Dataset, cfg: &PipelineConfig, inputs: &PipelineInputs, workers: usize) -> Result<ReportBundle> {
    let fids = resolve_featurizers(dataset, &cfg.featurizers).stage("setup")?;
    for (fid, bank) in &inputs.banks {
        if bank.featurizer_id() != fid {
            return Err(Error::Validation(format!(
                "label bank registered for `{fid}` belongs to `{}`",
                bank.featurizer_id()
            ))
            .in_stage("setup"));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot build worker pool: {e}")))?;
    pool.install(|| {
        let radius = match cfg.radius {
            Some(r) => r,
            None => default_radius(dataset, cfg.angle_weight).stage("setup")?,
        };
        let scoring = ScoringConfig {
            radius,
            percentile: cfg.percentile,
            nms_radius: cfg.nms_radius,
            angle_weight: cfg.angle_weight,
        };
        scoring.validate().stage("setup")?;
        let needs_split = cfg.stages.classify || cfg.stages.probe;
        let split = if needs_split {
            Some(scene_split(dataset, cfg.split_ratio, cfg.seed).stage("split")?)
        } else {
            None
        };
        let reports = fids
            .par_iter()
            .map(|fid| featurizer_stage(dataset, fid, cfg, &scoring, split.as_ref(), inputs))
            .collect::<Result<Vec<_>>>()?;
        let agreement = if cfg.stages.agree {
            agreement_stage(&reports).stage("agree")?
        } else {
            None
        };
        Ok(ReportBundle {
            dataset_id: dataset.dataset_id().to_owned(),
            config: cfg.clone(),
            config_hash: config_hash(cfg)?,
            scoring,
            split,
            featurizers: reports,
            agreement,
        })
    })
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), fmt_f64)
}

struct CsvTable<'a> {
    bundle: &'a ReportBundle,
    w: csv::Writer<Vec<u8>>,
}

impl<'a> CsvTable<'a> {
    fn new(bundle: &'a ReportBundle, columns: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["dataset_id", "featurizer_id", "seed", "config_hash"];
        header.extend_from_slice(columns);
        w.write_record(&header)?;
        Ok(Self { bundle, w })
    }

    fn row(&mut self, featurizer_id: &str, values: Vec<String>) -> Result<()> {
        let mut rec = vec![
            self.bundle.dataset_id.clone(),
            featurizer_id.to_owned(),
            self.bundle.config.seed.to_string(),
            self.bundle.config_hash.clone(),
        ];
        rec.extend(values);
        self.w.write_record(&rec)?;
        Ok(())
    }

    fn finish(self) -> Result<Vec<u8>> {
        finish_csv(self.w)
    }
}

fn accuracy_csv(bundle: &ReportBundle, fid: &str, acc: &StabilityAccuracy) -> Result<Vec<u8>> {
    let mut t = CsvTable::new(bundle, &["task", "category", "n_views", "k", "accuracy"])?;
    for row in &acc.rows {
        for (k, a) in acc.ks.iter().zip(&row.accuracy) {
            t.row(
                fid,
                vec![
                    acc.task.as_str().into(),
                    row.category.as_str().into(),
                    row.n_views.to_string(),
                    k.to_string(),
                    fmt_opt(*a),
                ],
            )?;
        }
    }
    t.finish()
}

fn featurizer_files(bundle: &ReportBundle, rep: &FeaturizerReport) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let fid = rep.featurizer_id.as_str();
    let dir = PathBuf::from(fid);
    let mut out = Vec::new();

    let mut t = CsvTable::new(bundle, &["scene_id", "view_id", "ordinal", "score", "tau", "unstable", "nms_kept"])?;
    for r in &rep.table.rows {
        t.row(
            fid,
            vec![
                r.scene_id.clone(),
                r.view_id.clone(),
                r.ordinal.to_string(),
                fmt_opt(r.score),
                fmt_f64(rep.table.tau),
                r.unstable.to_string(),
                r.nms_kept.to_string(),
            ],
        )?;
    }
    out.push((dir.join("instability.csv"), t.finish()?));

    if let (Some(labels), Some(cluster)) = (&rep.labels, &rep.cluster) {
        let cluster_of: BTreeMap<&ViewKey, usize> = cluster
            .keys
            .iter()
            .zip(cluster.split.assignment())
            .map(|(k, &c)| (k, c))
            .collect();
        let mut t = CsvTable::new(bundle, &["scene_id", "view_id", "category", "cluster"])?;
        for r in &rep.table.rows {
            let k = ViewKey::new(&r.scene_id, &r.view_id);
            let (cat, cl) = match labels.category_of(&k) {
                Some(c) => (c.as_str().to_owned(), cluster_of.get(&k).map_or("NA".into(), |c| c.to_string())),
                None => ("unscored".to_owned(), "NA".to_owned()),
            };
            t.row(fid, vec![r.scene_id.clone(), r.view_id.clone(), cat, cl])?;
        }
        out.push((dir.join("labels.csv"), t.finish()?));
    }

    if let Some((keys, p)) = &rep.pca {
        let mut t = CsvTable::new(bundle, &["scene_id", "view_id", "category", "pc1", "pc2"])?;
        for (i, (k, c)) in keys.iter().enumerate() {
            t.row(
                fid,
                vec![
                    k.scene_id.clone(),
                    k.view_id.clone(),
                    c.as_str().into(),
                    fmt_f64(p.projected.get(i, 0)),
                    fmt_f64(p.projected.get(i, 1)),
                ],
            )?;
        }
        out.push((dir.join("pca.csv"), t.finish()?));
    }

    if let Some((r, model)) = &rep.classifier {
        let mut t = CsvTable::new(
            bundle,
            &[
                "n_train",
                "n_train_unstable",
                "n_test",
                "accuracy",
                "recall_stable",
                "recall_unstable",
                "majority_rate",
                "stable_as_stable",
                "stable_as_unstable",
                "unstable_as_stable",
                "unstable_as_unstable",
                "gamma",
                "support_vectors",
                "kkt_gap",
            ],
        )?;
        let c = &r.confusion;
        t.row(
            fid,
            vec![
                r.n_train.to_string(),
                r.n_train_unstable.to_string(),
                r.n_test.to_string(),
                fmt_f64(r.accuracy),
                fmt_opt(r.recall_stable),
                fmt_opt(r.recall_unstable),
                fmt_f64(r.majority_rate),
                c.stable_as_stable.to_string(),
                c.stable_as_unstable.to_string(),
                c.unstable_as_stable.to_string(),
                c.unstable_as_unstable.to_string(),
                fmt_f64(r.gamma),
                r.support_vectors.to_string(),
                fmt_f64(r.kkt_gap),
            ],
        )?;
        out.push((dir.join("classifier.csv"), t.finish()?));
        out.push((dir.join("model.vssm"), encode_svm_model(model)));
    }
    if let Some(z) = &rep.zeroshot {
        out.push((dir.join("zeroshot.csv"), accuracy_csv(bundle, fid, z)?));
    }
    if let Some(p) = &rep.probe {
        out.push((dir.join("probe.csv"), accuracy_csv(bundle, fid, p)?));
    }
    Ok(out)
}

fn agreement_files(bundle: &ReportBundle, a: &AgreementReport) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let dir = PathBuf::from("agreement");
    let f = a.featurizer_ids.len();
    let mut out = Vec::new();
    let mut mean = Matrix::zeros(f, f);
    for m in &a.matrices {
        for i in 0..f {
            for j in 0..f {
                mean.set(i, j, mean.get(i, j) + m.get(i, j) / a.matrices.len() as f64);
            }
        }
    }
    let named = std::iter::once(("mean", &mean)).chain(Category::ALL.iter().map(|c| c.as_str()).zip(a.matrices.iter()));
    for (name, m) in named {
        let mut t = CsvTable::new(bundle, &["other_featurizer_id", "iou"])?;
        for i in 0..f {
            for j in 0..f {
                t.row(&a.featurizer_ids[i], vec![a.featurizer_ids[j].clone(), fmt_f64(m.get(i, j))])?;
            }
        }
        out.push((dir.join(format!("iou_{name}.csv")), t.finish()?));
    }
    Ok(out)
}

fn summary_json(bundle: &ReportBundle) -> Result<Vec<u8>> {
    let featurizers: Vec<serde_json::Value> = bundle
        .featurizers
        .iter()
        .map(|r| {
            let counts = r.labels.as_ref().map(|l| {
                json!({
                    "stable": l.set(Category::Stable).len(),
                    "accidental": l.set(Category::Accidental).len(),
                    "ood": l.set(Category::Ood).len(),
                })
            });
            let cluster = r.cluster.as_ref().map(|c| {
                json!({
                    "accidental_cluster": c.split.roles.accidental_cluster,
                    "ood_cluster": c.split.roles.ood_cluster,
                    "silhouette_per_cluster": c.split.roles.silhouette_per_cluster,
                    "inertia": c.split.kmeans.inertia,
                    "restart": c.split.kmeans.restart,
                })
            });
            let pca = r.pca.as_ref().map(|(_, p)| {
                json!({
                    "explained_variance": p.explained_variance,
                    "explained_variance_ratio": p.explained_variance_ratio,
                })
            });
            json!({
                "featurizer_id": r.featurizer_id,
                "tau": r.table.tau,
                "scored_views": r.table.scored_count(),
                "unstable_views": r.table.unstable_count(),
                "nms_kept": r.table.rows.iter().filter(|x| x.nms_kept).count(),
                "label_counts": counts,
                "cluster": cluster,
                "pca": pca,
                "classifier": r.classifier.as_ref().map(|(c, _)| c),
                "zeroshot": r.zeroshot,
                "probe": r.probe,
                "reference_overlap": r.reference_overlap,
            })
        })
        .collect();
    let agreement = bundle.agreement.as_ref().map(|a| {
        json!({
            "featurizer_ids": a.featurizer_ids,
            "mean_iou": a.means,
        })
    });
    let v = json!({
        "dataset_id": bundle.dataset_id,
        "seed": bundle.config.seed,
        "config_hash": bundle.config_hash,
        "config": bundle.config,
        "scoring": bundle.scoring,
        "split": bundle.split,
        "featurizers": featurizers,
        "agreement": agreement,
    });
    let mut out = serde_json::to_vec_pretty(&v)?;
    out.push(b'\n');
    Ok(out)
}

/// Renders every report file as `(relative path, bytes)`, sorted by path.
pub fn render_reports(bundle: &ReportBundle) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let mut files = Vec::new();
    for rep in &bundle.featurizers {
        files.extend(featurizer_files(bundle, rep)?);
    }
    if let Some(a) = &bundle.agreement {
        files.extend(agreement_files(bundle, a)?);
    }
    files.push((PathBuf::from("summary.json"), summary_json(bundle)?));
    files.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(files)
}

/// Writes the rendered reports under `out_dir` and returns the paths written.
pub fn write_reports(bundle: &ReportBundle, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (rel, bytes) in render_reports(bundle)? {
        let path = out_dir.join(rel);
        write_file(&path, &bytes)?;
        written.push(path);
    }
    Ok(written)
}

/// Short human-readable digest of a bundle for terminal output.
pub fn describe(bundle: &ReportBundle) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "dataset {} (config {})", bundle.dataset_id, bundle.config_hash);
    for r in &bundle.featurizers {
        let _ = write!(
            s,
            "  {}: tau {:.4}, {} / {} unstable",
            r.featurizer_id,
            r.table.tau,
            r.table.unstable_count(),
            r.table.scored_count()
        );
        if let Some(l) = &r.labels {
            let _ = write!(
                s,
                " ({} accidental, {} ood)",
                l.set(Category::Accidental).len(),
                l.set(Category::Ood).len()
            );
        }
        if let Some((c, _)) = &r.classifier {
            let _ = write!(s, ", classifier {:.2}%", c.accuracy);
        }
        s.push('\n');
    }
    if let Some(m) = bundle.agreement.as_ref().and_then(|a| a.means) {
        let _ = writeln!(
            s,
            "  mean IoU: stable {:.3}, accidental {:.3}, ood {:.3}",
            m.stable, m.accidental, m.ood
        );
    }
    s
}
