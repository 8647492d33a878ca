use std::collections::BTreeMap;
use std::fs;

use viewstab_core::model::Category;
use viewstab_core::pipeline::{config_hash, render_reports, run_pipeline, PipelineConfig, PipelineInputs, Stages};
use viewstab_core::synth::{generate, SynthConfig, SynthDataset};

fn synth(n_featurizers: usize, seed: u64) -> SynthDataset {
    generate(&SynthConfig {
        n_scenes: 8,
        views_per_scene: 48,
        dims: 24,
        n_featurizers,
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn inputs(s: &SynthDataset) -> PipelineInputs {
    PipelineInputs {
        banks: s
            .banks
            .iter()
            .map(|b| (b.featurizer_id().to_owned(), b.clone()))
            .collect::<BTreeMap<_, _>>(),
        reference: None,
    }
}

fn cfg(seed: u64) -> PipelineConfig {
    PipelineConfig {
        percentile: 94.0,
        seed,
        ks: vec![1, 2, 4],
        stages: Stages::all(),
        ..PipelineConfig::default()
    }
}

#[test]
fn run_all_produces_every_report() {
    let s = synth(3, 1);
    let b = run_pipeline(&s.dataset, &cfg(1), &inputs(&s), 2).unwrap();
    let files: Vec<String> = render_reports(&b)
        .unwrap()
        .into_iter()
        .map(|(p, _)| p.display().to_string())
        .collect();
    for f in ["feat00", "feat01", "feat02"] {
        for name in ["instability", "labels", "pca", "classifier", "zeroshot", "probe"] {
            assert!(files.contains(&format!("{f}/{name}.csv")), "{f}/{name}.csv missing");
        }
        assert!(files.contains(&format!("{f}/model.vssm")));
    }
    for c in ["mean", "stable", "accidental", "ood"] {
        assert!(files.contains(&format!("agreement/iou_{c}.csv")));
    }
    assert!(files.contains(&"summary.json".to_string()));
    let mut sorted = files.clone();
    sorted.sort();
    assert_eq!(files, sorted);

    for f in &b.featurizers {
        let labels = f.labels.as_ref().unwrap();
        let unstable = f.table.unstable_count();
        assert_eq!(
            labels.set(Category::Accidental).len() + labels.set(Category::Ood).len(),
            unstable
        );
    }
}

#[test]
fn every_csv_row_carries_provenance_columns() {
    let s = synth(2, 2);
    let b = run_pipeline(&s.dataset, &cfg(2), &inputs(&s), 1).unwrap();
    let hash = config_hash(&b.config).unwrap();
    for (path, bytes) in render_reports(&b).unwrap() {
        if path.extension().is_some_and(|e| e == "csv") {
            let text = String::from_utf8(bytes).unwrap();
            let mut lines = text.lines();
            assert!(lines.next().unwrap().starts_with("dataset_id,featurizer_id,seed,config_hash"));
            for l in lines {
                assert!(l.starts_with("synth,"), "{}: {l}", path.display());
                assert!(l.contains(&hash));
            }
        }
    }
}

#[test]
fn reports_do_not_depend_on_worker_count() {
    let s = synth(3, 5);
    let a = render_reports(&run_pipeline(&s.dataset, &cfg(5), &inputs(&s), 1).unwrap()).unwrap();
    let b = render_reports(&run_pipeline(&s.dataset, &cfg(5), &inputs(&s), 4).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn single_featurizer_gives_unit_agreement() {
    let s = synth(1, 3);
    let b = run_pipeline(&s.dataset, &cfg(3), &inputs(&s), 1).unwrap();
    let ag = b.agreement.unwrap();
    assert!(ag.means.is_none());
    for m in &ag.matrices {
        assert_eq!((m.rows(), m.cols()), (1, 1));
        assert_eq!(m.get(0, 0), 1.0);
    }
}

#[test]
fn config_hash_tracks_config() {
    let a = config_hash(&cfg(1)).unwrap();
    assert_eq!(a.len(), 16);
    assert_eq!(a, config_hash(&cfg(1)).unwrap());
    assert_ne!(a, config_hash(&cfg(2)).unwrap());
}

#[test]
fn unknown_featurizer_fails() {
    let s = synth(1, 0);
    let c = PipelineConfig {
        featurizers: vec!["missing".into()],
        ..cfg(0)
    };
    let e = run_pipeline(&s.dataset, &c, &PipelineInputs::default(), 1).unwrap_err();
    assert!(e.is_validation());
    assert!(e.to_string().contains("missing"));
}

#[test]
fn write_reports_matches_render() {
    let tmp = tempfile::tempdir().unwrap();
    let s = synth(2, 6);
    let b = run_pipeline(&s.dataset, &cfg(6), &inputs(&s), 1).unwrap();
    viewstab_core::pipeline::write_reports(&b, tmp.path()).unwrap();
    for (p, bytes) in render_reports(&b).unwrap() {
        assert_eq!(fs::read(tmp.path().join(&p)).unwrap(), bytes);
    }
}
