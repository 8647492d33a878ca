use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use viewstab_core::io::{
    load_dataset, read_label_bank, read_reference_annotations, save_dataset, write_ground_truth, write_label_bank,
    write_reference_annotations, LoadOptions, ReferenceAnnotation,
};
use viewstab_core::model::Category;
use viewstab_core::pipeline::{describe, run_pipeline, write_reports, PipelineConfig, PipelineInputs, Stages};
use viewstab_core::synth::{generate, SynthConfig};
use viewstab_core::{Error, Result};

#[derive(Parser)]
#[command(name = "viewstab", version, about = "Viewpoint-stability analytics for precomputed embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth and label banks
    Synth(SynthArgs),
    /// Compute per-view instability scores
    Score(Common),
    /// Threshold scores into stable/unstable labels
    Label(Common),
    /// Non-maximal suppression over unstable views
    Nms(Common),
    /// Split unstable views into accidental and OOD
    Cluster(Common),
    /// Project labeled views onto two principal components
    Pca(Common),
    /// Train and evaluate the stable/unstable classifier
    Classify(Common),
    /// Cross-featurizer IoU agreement and reference overlap
    Agree(Common),
    /// Zero-shot accuracy per stability category
    Zeroshot(Common),
    /// Linear-probe accuracy per stability category
    Probe(Common),
    /// Labeling, projection and agreement reports without training
    Report(Common),
    /// Every stage
    RunAll(Common),
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Restrict to these featurizers (repeatable)
    #[arg(long = "featurizer")]
    featurizers: Vec<String>,
    /// Pose-neighbourhood radius; derived from view spacing when omitted
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 97.0)]
    percentile: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    angle_weight: f64,
    #[arg(long)]
    nms_radius: Option<f64>,
    /// Top-k list for zero-shot accuracy
    #[arg(long, value_delimiter = ',', default_value = "1,5,10")]
    k: Vec<usize>,
    /// Label bank JSON files or directories of them (repeatable)
    #[arg(long = "labels-bank")]
    labels_banks: Vec<PathBuf>,
    #[arg(long)]
    reference_annotations: Option<PathBuf>,
    /// Worker threads; 0 uses every core
    #[arg(long, default_value_t = 0)]
    workers: usize,
    /// Keep embeddings as stored instead of L2-normalizing on load
    #[arg(long)]
    no_normalize: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synth")]
    dataset_id: String,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 72)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    dims: usize,
    #[arg(long, default_value_t = 3)]
    n_featurizers: usize,
    #[arg(long, default_value_t = 3)]
    smoothness: usize,
    #[arg(long, default_value_t = 0.03)]
    accidental_rate: f64,
    #[arg(long, default_value_t = 0.03)]
    ood_rate: f64,
    #[arg(long, default_value_t = 5.0)]
    separation: f64,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.2)]
    ood_class_signal: f64,
}

fn collect_banks(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::format(p, format!("cannot list: {e}")))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn run_stages(args: &Common, stages: Stages, require_bank: bool) -> Result<()> {
    let dataset = load_dataset(
        &args.manifest,
        LoadOptions {
            normalize: !args.no_normalize,
        },
    )?;
    let mut banks = BTreeMap::new();
    for path in collect_banks(&args.labels_banks)? {
        let bank = read_label_bank(&path)?;
        let fid = bank.featurizer_id().to_owned();
        if banks.insert(fid.clone(), bank).is_some() {
            return Err(Error::Validation(format!("two label banks given for `{fid}`")));
        }
    }
    if require_bank && banks.is_empty() {
        return Err(Error::Validation("zeroshot needs at least one --labels-bank".into()));
    }
    let reference = args
        .reference_annotations
        .as_deref()
        .map(read_reference_annotations)
        .transpose()?;
    let cfg = PipelineConfig {
        featurizers: args.featurizers.clone(),
        radius: args.radius,
        percentile: args.percentile,
        nms_radius: args.nms_radius,
        angle_weight: args.angle_weight,
        seed: args.seed,
        ks: args.k.clone(),
        stages,
        ..PipelineConfig::default()
    };
    let bundle = run_pipeline(&dataset, &cfg, &PipelineInputs { banks, reference }, args.workers)?;
    let written = write_reports(&bundle, &args.out)?;
    print!("{}", describe(&bundle));
    println!("wrote {} files to {}", written.len(), args.out.display());
    Ok(())
}

fn run_synth(args: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        dataset_id: args.dataset_id.clone(),
        n_scenes: args.scenes,
        views_per_scene: args.views,
        dims: args.dims,
        n_featurizers: args.n_featurizers,
        smoothness: args.smoothness,
        accidental_rate: args.accidental_rate,
        ood_rate: args.ood_rate,
        separation: args.separation,
        class_count: args.classes,
        ood_class_signal: args.ood_class_signal,
        seed: args.seed,
    };
    let s = generate(&cfg)?;
    let manifest = save_dataset(&s.dataset, &args.out)?;
    write_ground_truth(&args.out.join("ground_truth.csv"), &s.truth)?;
    for bank in &s.banks {
        write_label_bank(bank, &args.out.join("banks"), bank.featurizer_id())?;
    }
    // accidental positions are shared, so any featurizer's truth serves
    let fid = &s.truth.featurizer_ids[0];
    let positive = s.truth.keys(fid, Category::Accidental)?;
    let mut negative = s.truth.keys(fid, Category::Stable)?;
    negative.extend(s.truth.keys(fid, Category::Ood)?);
    write_reference_annotations(
        &args.out.join("reference.csv"),
        &ReferenceAnnotation { positive, negative },
    )?;
    println!(
        "wrote {} scenes x {} views for {} featurizers to {}",
        cfg.n_scenes,
        cfg.views_per_scene,
        cfg.n_featurizers,
        manifest.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Score(a) | Command::Label(a) | Command::Nms(a) => run_stages(a, Stages::default(), false),
        Command::Cluster(a) => run_stages(
            a,
            Stages {
                cluster: true,
                ..Stages::default()
            },
            false,
        ),
        Command::Pca(a) => run_stages(
            a,
            Stages {
                cluster: true,
                pca: true,
                ..Stages::default()
            },
            false,
        ),
        Command::Classify(a) => run_stages(
            a,
            Stages {
                classify: true,
                ..Stages::default()
            },
            false,
        ),
        Command::Agree(a) => run_stages(
            a,
            Stages {
                cluster: true,
                agree: true,
                ..Stages::default()
            },
            false,
        ),
        Command::Zeroshot(a) => run_stages(
            a,
            Stages {
                cluster: true,
                zeroshot: true,
                ..Stages::default()
            },
            true,
        ),
        Command::Probe(a) => run_stages(
            a,
            Stages {
                cluster: true,
                probe: true,
                ..Stages::default()
            },
            false,
        ),
        Command::Report(a) => run_stages(a, Stages::report(), false),
        Command::RunAll(a) => run_stages(a, Stages::all(), false),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
