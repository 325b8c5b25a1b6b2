//! The stages behind each subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use uqcat_core::analysis::{
    correlation_matrix, entropy_support_mask, mean_correlation_matrix, mean_nonzero_entropy, voxelwise_median_iqr,
    NONZERO_EPS,
};
use uqcat_core::augment::{Family, Level};
use uqcat_core::phantom::{generate_cohort, Phantom, PhantomSpec};
use uqcat_core::predictor::{load_checkpoint, save_checkpoint, train, SliceNet, TrainReport};
use uqcat_core::seed::SeedPath;
use uqcat_core::uq::{parse_case_list, run_case, uncertainty_maps, CaseKind, CaseSpec, RunOptions};
use uqcat_core::volume::{read_volume, write_volume, Volume};

use crate::config::{PipelineConfig, RunSection, TrainSection};
use crate::files::{
    counts_csv, digest_tree, find_entropy_maps, find_subjects, image_name, label_name, map_name, matrix_csv,
    sha256_file, summary_csv,
};
use crate::manifest::{
    CaseRecord, ModelRecord, PipelineManifest, RunManifest, StageSeeds, SubjectRecord, MANIFEST_VERSION, TOOL, VERSION,
};
use crate::{CliError, StageExt};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const PIPELINE_MANIFEST: &str = "manifest.json";

fn create_dir(dir: &Path, stage: &'static str) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| format!("cannot create {}: {e}", dir.display()))
        .stage(stage)
}

fn write_text(path: &Path, text: &str, stage: &'static str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| format!("cannot write {}: {e}", path.display()))
        .stage(stage)
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("manifest serializes");
    s.push('\n');
    s
}

/// Writes `sub-<i>_img.vvol` / `sub-<i>_lab.vvol` for subjects `0..n`.
pub fn write_cohort(spec: &PhantomSpec, n: usize, dir: &Path) -> Result<Vec<Phantom>, CliError> {
    const STAGE: &str = "phantom";
    let cohort = generate_cohort(spec, n).stage(STAGE)?;
    create_dir(dir, STAGE)?;
    for (i, p) in cohort.iter().enumerate() {
        write_volume(&p.image, dir.join(image_name(i))).stage(STAGE)?;
        write_volume(&p.label, dir.join(label_name(i))).stage(STAGE)?;
    }
    info!("wrote {n} phantom subjects to {}", dir.display());
    Ok(cohort)
}

pub fn load_cohort(dir: &Path, stage: &'static str) -> Result<Vec<Phantom>, CliError> {
    let subjects = find_subjects(dir)
        .map_err(|e| format!("cannot list {}: {e}", dir.display()))
        .stage(stage)?;
    if subjects.is_empty() {
        return Err(format!("no sub-<i>_img.vvol files in {}", dir.display())).stage(stage);
    }
    subjects
        .iter()
        .map(|&i| {
            let image = read_volume(dir.join(image_name(i))).stage(stage)?;
            let label = read_volume(dir.join(label_name(i))).stage(stage)?;
            Ok(Phantom { image, label })
        })
        .collect()
}

pub fn train_model(
    cohort: &[Phantom],
    section: &TrainSection,
    init_seed: u64,
    fit_seed: u64,
) -> Result<(SliceNet, TrainReport), CliError> {
    const STAGE: &str = "train";
    let mut net = SliceNet::new(section.model, init_seed).stage(STAGE)?;
    let mut fit = section.fit.clone();
    fit.seed = fit_seed;
    info!(
        "training {} parameters on {} subjects for {} epochs",
        net.n_params(),
        cohort.len(),
        fit.epochs
    );
    let report = train(&mut net, cohort, &[], &fit).stage(STAGE)?;
    if let Some(last) = report.history.last() {
        info!(
            "final training loss {:.4} (initial {:.4})",
            last.train_loss, report.initial_loss
        );
    }
    Ok((net, report))
}

pub fn save_model(net: &SliceNet, path: &Path) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent, "train")?;
    }
    save_checkpoint(net, path).stage("train")
}

pub fn load_model(path: &Path) -> Result<SliceNet, CliError> {
    load_checkpoint(path).stage("load model")
}

pub fn resolve_cases(list: &str) -> Result<Vec<CaseSpec>, CliError> {
    parse_case_list(list).map_err(|e| CliError::Usage(format!("--cases {list:?}: {e}")))
}

/// Per-subject seed handed to the sampling engine.
pub fn subject_seed(seed: u64, subject: usize) -> u64 {
    SeedPath::root(seed).label("run").index(subject as u64).value()
}

/// Samples every selected case for every subject in `subjects_dir` and
/// writes the mean / variance / entropy maps plus the run manifest.
pub fn run_subjects(
    net: &SliceNet,
    model_sha256: String,
    subjects_dir: &Path,
    out: &Path,
    run: &RunSection,
    seed: u64,
) -> Result<RunManifest, CliError> {
    const STAGE: &str = "run";
    let cases = resolve_cases(&run.cases)?;
    if run.samples < 2 {
        return Err(CliError::Usage(format!(
            "--samples must be at least 2, got {}",
            run.samples
        )));
    }
    let subjects = find_subjects(subjects_dir)
        .map_err(|e| format!("cannot list {}: {e}", subjects_dir.display()))
        .stage(STAGE)?;
    if subjects.is_empty() {
        return Err(format!("no sub-<i>_img.vvol files in {}", subjects_dir.display())).stage(STAGE);
    }
    create_dir(out, STAGE)?;

    let mut records = Vec::with_capacity(subjects.len());
    for &subject in &subjects {
        let image_path = subjects_dir.join(image_name(subject));
        let image = read_volume(&image_path).stage(STAGE)?;
        let seed_s = subject_seed(seed, subject);
        let opts = RunOptions {
            samples: run.samples,
            seed: seed_s,
            binarize: run.binarize,
        };
        let mut case_records = Vec::with_capacity(cases.len());
        for case in &cases {
            let result = run_case(net, &image, case, subject, &opts).stage(STAGE)?;
            let maps = uncertainty_maps(&result.stack).stage(STAGE)?;
            let mut outputs = BTreeMap::new();
            for (kind, v) in [("mean", &maps.mean), ("var", &maps.variance), ("ent", &maps.entropy)] {
                let name = map_name(subject, case.id, kind);
                let path = out.join(&name);
                write_volume(v, &path).stage(STAGE)?;
                outputs.insert(name, sha256_file(&path).stage(STAGE)?);
            }
            case_records.push(CaseRecord {
                case: case.id,
                passes: result.passes,
                outputs,
            });
        }
        info!("subject {subject}: {} cases x {} passes", cases.len(), run.samples);
        records.push(SubjectRecord {
            subject,
            image: image_name(subject),
            image_sha256: sha256_file(&image_path).stage(STAGE)?,
            seed: seed_s,
            cases: case_records,
        });
    }

    let manifest = RunManifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        manifest_version: MANIFEST_VERSION,
        model_sha256,
        seed,
        samples: run.samples,
        binarize: run.binarize,
        cases,
        subjects: records,
    };
    write_text(&out.join(RUN_MANIFEST), &to_json(&manifest), STAGE)?;
    Ok(manifest)
}

#[derive(Debug, Clone, serde::Serialize)]
struct SubjectAnalysis {
    subject: usize,
    mask_voxels: usize,
    undefined_entries: usize,
}

#[derive(Debug, Clone, serde::Serialize)]
struct AnalysisMetadata {
    quantile_method: &'static str,
    nonzero_threshold: f64,
    fisher_z: bool,
    cases: Vec<u8>,
    subjects: Vec<SubjectAnalysis>,
}

/// Median/IQR maps, masks, correlation matrices and the entropy summary for
/// every `sub-<i>_case-<c>_ent.vvol` in `maps_dir`.
pub fn analyze_maps(maps_dir: &Path, out: &Path, fisher_z: bool) -> Result<(), CliError> {
    const STAGE: &str = "analyze";
    let found = find_entropy_maps(maps_dir)
        .map_err(|e| format!("cannot list {}: {e}", maps_dir.display()))
        .stage(STAGE)?;
    let Some(first) = found.values().next() else {
        return Err(format!("no entropy maps in {}", maps_dir.display())).stage(STAGE);
    };
    let labels: Vec<u8> = first.keys().copied().collect();
    for (subject, cases) in &found {
        if cases.keys().copied().collect::<Vec<_>>() != labels {
            return Err(format!("subject {subject} has a different set of cases")).stage(STAGE);
        }
    }
    if labels.len() < 2 {
        return Err("median/IQR need entropy maps for at least two cases".to_string()).stage(STAGE);
    }
    create_dir(out, STAGE)?;

    let per_subject: Vec<_> = found
        .par_iter()
        .map(|(&subject, cases)| {
            let maps = cases
                .values()
                .map(read_volume)
                .collect::<Result<Vec<Volume>, _>>()
                .stage(STAGE)?;
            let (median, iqr) = voxelwise_median_iqr(&maps).stage(STAGE)?;
            let mask = entropy_support_mask(&median)
                .map_err(|e| format!("subject {subject}: {e}"))
                .stage(STAGE)?;
            let matrix = correlation_matrix(&labels, &maps, &mask, Some(subject)).stage(STAGE)?;
            let summaries: Vec<_> = maps.iter().map(mean_nonzero_entropy).collect();
            Ok((subject, median, iqr, mask, matrix, summaries))
        })
        .collect::<Result<_, CliError>>()?;

    let mut matrices = Vec::with_capacity(per_subject.len());
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    for (subject, median, iqr, mask, matrix, summaries) in per_subject {
        write_volume(&median, out.join(format!("median_ent_sub-{subject}.vvol"))).stage(STAGE)?;
        write_volume(&iqr, out.join(format!("iqr_ent_sub-{subject}.vvol"))).stage(STAGE)?;
        let mask_volume = mask.to_volume(median.spacing()).stage(STAGE)?;
        write_volume(&mask_volume, out.join(format!("mask_sub-{subject}.vvol"))).stage(STAGE)?;
        write_text(
            &out.join(format!("corr_sub-{subject}.csv")),
            &matrix_csv(&matrix),
            STAGE,
        )?;
        rows.extend(labels.iter().zip(summaries).map(|(&c, s)| (subject, c, s)));
        meta.push(SubjectAnalysis {
            subject,
            mask_voxels: mask.count(),
            undefined_entries: matrix.values.iter().filter(|v| v.is_none()).count(),
        });
        matrices.push(matrix);
    }
    let mean = mean_correlation_matrix(&matrices, fisher_z).stage(STAGE)?;
    write_text(&out.join("corr_mean.csv"), &matrix_csv(&mean), STAGE)?;
    write_text(&out.join("corr_mean_counts.csv"), &counts_csv(&mean), STAGE)?;
    write_text(&out.join("summary.csv"), &summary_csv(&rows), STAGE)?;
    let metadata = AnalysisMetadata {
        quantile_method: "linear interpolation between order statistics at q*(K-1)",
        nonzero_threshold: NONZERO_EPS,
        fisher_z,
        cases: labels,
        subjects: meta,
    };
    write_text(&out.join("analysis.json"), &to_json(&metadata), STAGE)?;
    info!("analyzed {} subjects", matrices.len());
    Ok(())
}

fn range(lo: f32, hi: f32, decimals: usize) -> String {
    format!("U({lo:.decimals$},{hi:.decimals$})")
}

/// The case registry with every sampling range.
pub fn cases_table() -> String {
    let mut out = String::new();
    for case in CaseSpec::all() {
        let detail = match case.kind {
            CaseKind::Dropout { rate } => format!("dropout probability {rate:.2} on every convolution block"),
            CaseKind::Augment { family, level } => describe_augment(family, level),
        };
        writeln!(out, "{} {:<20} {detail}", case.id, case.to_string()).expect("string write");
    }
    out
}

fn describe_augment(family: Family, level: Level) -> String {
    let r = level.ranges();
    let affine = format!(
        "affine scale {} rotation {} deg translation {} mm",
        range(r.scale.0, r.scale.1, 2),
        range(r.rotation_deg.0, r.rotation_deg.1, 0),
        range(r.translation_mm.0, r.translation_mm.1, 0),
    );
    let axis = ["x", "y", "z"][r.ghost_axis];
    let ghost = format!(
        "ghost strength {} ghosts {}-{} along {axis}",
        range(r.ghost_strength.0, r.ghost_strength.1, 2),
        r.num_ghosts.0,
        r.num_ghosts.1,
    );
    let bias = format!(
        "bias order {} coefficients {}",
        r.bias_order,
        range(-r.bias_max_coeff, r.bias_max_coeff, 1),
    );
    match family {
        Family::Affine => affine,
        Family::Ghosting => ghost,
        Family::BiasField => bias,
        Family::Combined => format!("{affine}; {ghost}; {bias}"),
    }
}

/// Output directories of a pipeline run.
pub struct PipelineLayout {
    pub root: PathBuf,
}

impl PipelineLayout {
    pub fn train_dir(&self) -> PathBuf {
        self.root.join("phantoms").join("train")
    }
    pub fn test_dir(&self) -> PathBuf {
        self.root.join("phantoms").join("test")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.uqp")
    }
    pub fn maps_dir(&self) -> PathBuf {
        self.root.join("maps")
    }
    pub fn analysis_dir(&self) -> PathBuf {
        self.root.join("analysis")
    }
}

pub fn stage_seeds(seed: u64) -> StageSeeds {
    let root = SeedPath::root(seed);
    StageSeeds {
        phantom_train: root.label("phantom").label("train").value(),
        phantom_test: root.label("phantom").label("test").value(),
        init: root.label("init").value(),
        train: root.label("train").value(),
        run: root.label("run").value(),
    }
}

/// Checks everything that can be checked before any work starts.
pub fn validate_config(cfg: &PipelineConfig, have_model: bool) -> Result<(), CliError> {
    let usage = |m: String| Err(CliError::Usage(m));
    if let Err(e) = cfg.phantom.spec.validate() {
        return usage(format!("phantom.spec: {e}"));
    }
    if cfg.phantom.test_subjects == 0 {
        return usage("phantom.test_subjects must be at least 1".into());
    }
    match &cfg.train {
        Some(t) => {
            if cfg.phantom.train_subjects == 0 {
                return usage("phantom.train_subjects must be at least 1".into());
            }
            if let Err(e) = t.model.validate() {
                return usage(format!("train.model: {e}"));
            }
            if let Err(e) = t.fit.validate() {
                return usage(format!("train.fit: {e}"));
            }
            let m = t.model.plane_multiple();
            let dims = cfg.phantom.spec.dims;
            if !dims[0].is_multiple_of(m) || !dims[1].is_multiple_of(m) {
                return usage(format!(
                    "phantom dims {dims:?}: in-plane sizes must be multiples of {m}"
                ));
            }
        }
        None if !have_model => {
            return usage("config has no train section; supply a model with --model".into());
        }
        None => {}
    }
    resolve_cases(&cfg.run.cases)?;
    if cfg.run.samples < 2 {
        return usage(format!("run.samples must be at least 2, got {}", cfg.run.samples));
    }
    Ok(())
}

/// phantom, train (unless a model is given), run, analyze; then the manifest.
pub fn pipeline(cfg: &PipelineConfig, model: Option<&Path>, out: &Path) -> Result<PipelineManifest, CliError> {
    validate_config(cfg, model.is_some())?;
    let layout = PipelineLayout {
        root: out.to_path_buf(),
    };
    create_dir(out, "pipeline")?;
    let seeds = stage_seeds(cfg.seed);

    let test_spec = PhantomSpec {
        seed: seeds.phantom_test,
        ..cfg.phantom.spec.clone()
    };
    write_cohort(&test_spec, cfg.phantom.test_subjects, &layout.test_dir())?;

    let (net, model_record) = match (model, &cfg.train) {
        (Some(path), _) => {
            let net = load_model(path)?;
            fs::copy(path, layout.model())
                .map_err(|e| format!("cannot copy model: {e}"))
                .stage("load model")?;
            let sha256 = sha256_file(&layout.model()).stage("load model")?;
            (
                net,
                ModelRecord {
                    trained: false,
                    sha256,
                    report: None,
                },
            )
        }
        (None, Some(section)) => {
            let train_spec = PhantomSpec {
                seed: seeds.phantom_train,
                ..cfg.phantom.spec.clone()
            };
            let cohort = write_cohort(&train_spec, cfg.phantom.train_subjects, &layout.train_dir())?;
            let (net, report) = train_model(&cohort, section, seeds.init, seeds.train)?;
            save_model(&net, &layout.model())?;
            let sha256 = sha256_file(&layout.model()).stage("train")?;
            (
                net,
                ModelRecord {
                    trained: true,
                    sha256,
                    report: Some(report),
                },
            )
        }
        (None, None) => unreachable!("validated above"),
    };
    net.check_dims(cfg.phantom.spec.dims)
        .map_err(|e| CliError::Usage(format!("phantom dims do not suit the model: {e}")))?;

    run_subjects(
        &net,
        model_record.sha256.clone(),
        &layout.test_dir(),
        &layout.maps_dir(),
        &cfg.run,
        seeds.run,
    )?;
    analyze_maps(&layout.maps_dir(), &layout.analysis_dir(), cfg.analyze.fisher_z)?;

    let outputs = digest_tree(out, &[PIPELINE_MANIFEST]).stage("manifest")?;
    let manifest = PipelineManifest {
        tool: TOOL.into(),
        version: VERSION.into(),
        manifest_version: MANIFEST_VERSION,
        config: cfg.clone(),
        seeds,
        model: model_record,
        outputs,
    };
    write_text(&out.join(PIPELINE_MANIFEST), &to_json(&manifest), "manifest")?;
    Ok(manifest)
}
