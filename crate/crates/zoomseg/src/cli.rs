//! The `zoomseg` command line.
//!
//! Usage errors exit with 2, failures of the requested work with 1.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use zoomseg_core::gradcheck::{run_suite, GradcheckConfig, CASES, DEFAULT_SEEDS};
use zoomseg_core::inference::{ensemble_predict, predict_volume, EnsembleMode};
use zoomseg_core::metrics::{default_threshold_grid, evaluate_scan};
use zoomseg_core::resunet::{build_model, Model};
use zoomseg_core::stats::BootstrapConfig;
use zoomseg_core::synth::{generate_scan, split_indices, SynthConfig};
use zoomseg_core::train::{
    run_zoom_in_out, train_stage, BestDev, EpochRecord, StageName, TrainConfig, SYSTEM_ENSEMBLE, SYSTEM_FINAL, SYSTEM_PRE_FINETUNE,
};
use zoomseg_core::volume::binarize;
use zoomseg_core::Volume;

use crate::checkpoint::{Checkpoint, ModelInfo};
use crate::manifest::{self, Manifest, Record, Split};
use crate::nifti::{self, Datatype};
use crate::report::{regression_line, table_ablation, table_stratified, table_summary, AblationReport, EvaluationReport};
use crate::{config, CKPT_BEST_DEV, CKPT_FINAL, CKPT_PRE_FINETUNE, HISTORY_FILE};

#[derive(Debug, Parser)]
#[command(name = "zoomseg", version, about = "3D residual U-Net lesion segmentation with zoom-in&out training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train from a config and a manifest.
    Train(TrainArgs),
    /// Predict probability maps with one model or a snapshot ensemble.
    Predict(PredictArgs),
    /// Score predictions against reference masks, or verify a report.
    Evaluate(EvaluateArgs),
    /// Ablation table of two evaluation reports.
    Compare(CompareArgs),
    /// Lesion-size quartile table of a report.
    Stratify(StratifyArgs),
    /// Side-by-side summary table of several reports.
    Summary(SummaryArgs),
    /// Finite-difference gradient checks; exits 0 iff all pass.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub train: u64,
    #[arg(long)]
    pub dev: u64,
    #[arg(long)]
    pub test: u64,
    /// Edge length of the cubic scans.
    #[arg(long, default_value_t = 48)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Zoomin,
    Zoomout,
    Both,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Config file, or the name of a built-in preset (`paper`, `desk`).
    #[arg(long)]
    pub config: String,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for checkpoints and history.
    #[arg(long)]
    pub out: PathBuf,
    /// `zoomout` resumes from `pre_finetune.lfck` in the output directory.
    #[arg(long, value_enum, default_value_t = StageArg::Both)]
    pub stage: StageArg,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_crop(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match parts[..] {
        [x, y, z] if x > 0 && y > 0 && z > 0 => Ok([x, y, z]),
        _ => Err("expected three positive integers X,Y,Z".into()),
    }
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("model").required(true).args(["ckpt", "ensemble"])))]
#[command(group(clap::ArgGroup::new("source").required(true).args(["input", "manifest"])))]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Snapshot checkpoints whose predictions are averaged.
    #[arg(long, num_args = 1..)]
    pub ensemble: Vec<PathBuf>,
    #[arg(long = "in", requires = "out")]
    pub input: Option<PathBuf>,
    #[arg(long, requires = "input")]
    pub out: Option<PathBuf>,
    /// Predict every scan of one manifest split into `--out-dir/<id>.nii.gz`.
    #[arg(long, requires = "out_dir")]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub out_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    /// Center crop X,Y,Z; defaults to the training config's inference crop.
    #[arg(long, value_parser = parse_crop)]
    pub crop: Option<[usize; 3]>,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    #[arg(long, requires = "input")]
    pub mask_out: Option<PathBuf>,
    /// Average logits instead of probabilities across the ensemble.
    #[arg(long)]
    pub logit_mean: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Re-derive every aggregate of an existing report.
    #[arg(long, conflicts_with_all = ["pred", "ref_dir", "manifest", "out"])]
    pub verify: Option<PathBuf>,
    /// Directory of `<id>.nii.gz` probability maps.
    #[arg(long, required_unless_present = "verify")]
    pub pred: Option<PathBuf>,
    /// Directory of `<id>.nii.gz` reference masks; defaults to the manifest masks.
    #[arg(long = "ref")]
    pub ref_dir: Option<PathBuf>,
    #[arg(long, required_unless_present = "verify")]
    pub manifest: Option<PathBuf>,
    #[arg(long, required_unless_present = "verify")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    pub split: Split,
    #[arg(long, default_value_t = 10_000)]
    pub bootstrap: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
    /// Name of the evaluated system in the report.
    #[arg(long, default_value = SYSTEM_FINAL)]
    pub system: String,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Baseline report.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StratifyArgs {
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    #[arg(long = "report", required = true)]
    pub reports: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Only cases whose name starts with this prefix.
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long)]
    pub seed: Vec<u64>,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return e.exit_code();
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

pub fn execute(cmd: Command, out: &mut dyn Write) -> anyhow::Result<()> {
    match cmd {
        Command::Synth(a) => synth(a, out),
        Command::Train(a) => train(a, out),
        Command::Predict(a) => predict(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Compare(a) => {
            let ab = AblationReport::compare(&EvaluationReport::load(&a.a)?, &EvaluationReport::load(&a.b)?);
            ab.save(&a.out)?;
            write!(out, "{}", table_ablation(&ab))?;
            Ok(())
        }
        Command::Stratify(a) => {
            let r = EvaluationReport::load(&a.report)?;
            let table = table_stratified(&r).ok_or_else(|| anyhow!("{} has fewer than four scans", a.report.display()))?;
            write!(out, "{table}")?;
            writeln!(out, "{}", regression_line(&r))?;
            Ok(())
        }
        Command::Summary(a) => {
            let reports = a.reports.iter().map(EvaluationReport::load).collect::<Result<Vec<_>, _>>()?;
            write!(out, "{}", table_summary(&reports.iter().collect::<Vec<_>>()))?;
            Ok(())
        }
        Command::Gradcheck(a) => gradcheck(a, out),
    }
}

fn synth(a: SynthArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cfg = SynthConfig { extents: [a.dim; 3], seed: a.seed, ..SynthConfig::default() };
    cfg.validate()?;
    let mut records = Vec::new();
    let splits = [Split::Train, Split::Dev, Split::Test];
    for (split, range) in splits.into_iter().zip(split_indices(a.train, a.dev, a.test)) {
        for i in range {
            let id = format!("synth_{i:03}");
            let (image, mask) = generate_scan(&cfg, i)?;
            let image_rel = PathBuf::from(format!("images/{id}.nii.gz"));
            let mask_rel = PathBuf::from(format!("masks/{id}.nii.gz"));
            nifti::write_volume(&image, a.out.join(&image_rel), Datatype::F32)?;
            nifti::write_mask(&mask, a.out.join(&mask_rel))?;
            records.push(Record { subject_id: id, image_path: image_rel, mask_path: mask_rel, split });
        }
    }
    manifest::write(a.out.join("manifest.csv"), &records)?;
    writeln!(out, "wrote {} scans and manifest.csv to {}", records.len(), a.out.display())?;
    Ok(())
}

fn save_checkpoint(dir: &Path, file: &str, model: &Model<f32>, info: ModelInfo<'_>) -> anyhow::Result<()> {
    Checkpoint::from_model(model, info).save(dir.join(file))?;
    Ok(())
}

fn save_best(dir: &Path, best: &Option<BestDev<f32>>, model: &Model<f32>, cfg: &TrainConfig, history: &[EpochRecord]) -> anyhow::Result<()> {
    if let Some(b) = best {
        let info = ModelInfo { system: SYSTEM_FINAL, stage: Some(b.stage), epoch: b.epoch, seed: cfg.seed, train_config: Some(cfg), history };
        Checkpoint::from_params(model.config(), b.parameters.clone(), info).save(dir.join(CKPT_BEST_DEV))?;
    }
    Ok(())
}

fn train(a: TrainArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let mut cfg = config::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = Manifest::read(&a.manifest)?.load_dataset()?;
    let first = data.train.first().ok_or_else(|| anyhow!("the manifest has no train records"))?;
    write!(out, "{}", config::run_header(&cfg, first.image.extents()))?;
    writeln!(out, "data: {} train, {} dev, {} test scans", data.train.len(), data.dev.len(), data.test.len())?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;

    let mut log = |r: &EpochRecord| {
        let dev = r.dev_dsc.map_or(String::new(), |d| format!(" dev_dsc {d:.4}"));
        let _ = writeln!(out, "{:?} epoch {} lr {:.3e} loss {:.5}{dev}", r.stage, r.epoch, r.lr, r.train_loss);
    };
    let dir = a.out.as_path();
    let info = |system, stage, epoch, history| ModelInfo { system, stage: Some(stage), epoch, seed: cfg.seed, train_config: Some(&cfg), history };
    let split_at = |h: &[EpochRecord]| h.iter().take_while(|r| r.stage == StageName::ZoomIn).count();

    let history = match a.stage {
        StageArg::Both => {
            let model = build_model::<f32>(&cfg.arch, cfg.seed)?;
            let o = run_zoom_in_out(model, &data, &cfg, &mut log)?;
            let zoom_in = &o.history[..split_at(&o.history)];
            save_checkpoint(dir, CKPT_PRE_FINETUNE, &o.pre_finetune, info(SYSTEM_PRE_FINETUNE, StageName::ZoomIn, cfg.zoom_in.epochs, zoom_in))?;
            save_checkpoint(dir, CKPT_FINAL, &o.final_model, info(SYSTEM_FINAL, StageName::ZoomOut, cfg.zoom_out.epochs, &o.history))?;
            for (s, m) in o.snapshots.iter().zip(o.ensemble_members()?) {
                save_checkpoint(dir, &snapshot_file(s.epoch), &m, info(SYSTEM_ENSEMBLE, StageName::ZoomOut, s.epoch, &o.history))?;
            }
            save_best(dir, &o.best_dev, &o.final_model, &cfg, &o.history)?;
            o.history
        }
        StageArg::Zoomin => {
            let model = build_model::<f32>(&cfg.arch, cfg.seed)?;
            let o = train_stage(model, &data, &cfg.zoom_in, &cfg, cfg.seed, &mut log)?;
            save_checkpoint(dir, CKPT_PRE_FINETUNE, &o.model, info(SYSTEM_PRE_FINETUNE, StageName::ZoomIn, cfg.zoom_in.epochs, &o.history))?;
            save_best(dir, &o.best_dev, &o.model, &cfg, &o.history)?;
            o.history
        }
        StageArg::Zoomout => {
            let path = dir.join(CKPT_PRE_FINETUNE);
            let ck = Checkpoint::load(&path).with_context(|| format!("zoom-out resumes from {}", path.display()))?;
            ensure!(ck.meta.arch == cfg.arch, "{} was trained with a different architecture", path.display());
            let o = train_stage(ck.to_model()?, &data, &cfg.zoom_out, &cfg, cfg.seed, &mut log)?;
            let mut history = ck.meta.history.clone();
            history.extend(o.history.iter().cloned());
            save_checkpoint(dir, CKPT_FINAL, &o.model, info(SYSTEM_FINAL, StageName::ZoomOut, cfg.zoom_out.epochs, &history))?;
            for s in &o.snapshots {
                let m = o.model.with_params(s.parameters.clone())?;
                save_checkpoint(dir, &snapshot_file(s.epoch), &m, info(SYSTEM_ENSEMBLE, StageName::ZoomOut, s.epoch, &history))?;
            }
            save_best(dir, &o.best_dev, &o.model, &cfg, &history)?;
            history
        }
    };
    let json = serde_json::to_string_pretty(&history)? + "\n";
    fs::write(dir.join(HISTORY_FILE), json)?;
    writeln!(out, "checkpoints written to {}", dir.display())?;
    Ok(())
}

pub fn snapshot_file(epoch: u64) -> String {
    format!("snapshot_epoch{epoch}.lfck")
}

struct Predictor {
    models: Vec<Model<f32>>,
    default_crop: Option<[usize; 3]>,
    normalize: bool,
    mode: EnsembleMode,
}

impl Predictor {
    fn load(paths: &[PathBuf], mode: EnsembleMode) -> anyhow::Result<Self> {
        let mut models = Vec::new();
        let mut cfg = None;
        for p in paths {
            let ck = Checkpoint::load(p).with_context(|| format!("loading {}", p.display()))?;
            models.push(ck.to_model()?);
            cfg = cfg.or(ck.meta.train_config);
        }
        Ok(Self {
            models,
            default_crop: cfg.as_ref().map(|c| c.inference_crop),
            normalize: cfg.as_ref().is_none_or(|c| c.normalize),
            mode,
        })
    }

    fn predict(&self, scan: &Volume, crop: Option<[usize; 3]>) -> anyhow::Result<Volume> {
        // Without an explicit crop the default is clipped to the scan.
        let e = scan.extents();
        let crop = crop.unwrap_or_else(|| self.default_crop.map_or(e, |c| [0, 1, 2].map(|i| c[i].min(e[i]))));
        Ok(match &self.models[..] {
            [m] => predict_volume(m, scan, crop, self.normalize)?,
            ms => ensemble_predict(ms, scan, crop, self.normalize, self.mode)?,
        })
    }
}

fn predict(a: PredictArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let paths: Vec<PathBuf> = a.ckpt.into_iter().chain(a.ensemble).collect();
    let mode = if a.logit_mean { EnsembleMode::Logit } else { EnsembleMode::Probability };
    let predictor = Predictor::load(&paths, mode)?;
    ensure!(a.threshold > 0.0 && a.threshold < 1.0, "--threshold must lie in (0, 1)");
    if let (Some(input), Some(dest)) = (&a.input, &a.out) {
        let scan = nifti::read_volume(input)?;
        let prob = predictor.predict(&scan, a.crop)?;
        nifti::write_volume(&prob, dest, Datatype::F32)?;
        if let Some(m) = &a.mask_out {
            nifti::write_mask(&binarize(&prob, a.threshold), m)?;
        }
        writeln!(out, "wrote {}", dest.display())?;
        return Ok(());
    }
    let (Some(man), Some(dir)) = (&a.manifest, &a.out_dir) else { bail!("either --in/--out or --manifest/--out-dir is required") };
    let manifest = Manifest::read(man)?;
    let mut n = 0;
    for r in manifest.split(a.split) {
        let scan = nifti::read_volume(&r.image_path)?;
        let prob = predictor.predict(&scan, a.crop)?;
        nifti::write_volume(&prob, dir.join(format!("{}.nii.gz", r.subject_id)), Datatype::F32)?;
        n += 1;
    }
    writeln!(out, "wrote {n} probability maps to {}", dir.display())?;
    Ok(())
}

fn find_by_id(dir: &Path, id: &str) -> anyhow::Result<PathBuf> {
    ["nii.gz", "nii"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| anyhow!("no {id}.nii.gz or {id}.nii in {}", dir.display()))
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    if let Some(path) = a.verify {
        let r = EvaluationReport::load(&path)?;
        let issues = r.verify()?;
        for i in &issues {
            writeln!(out, "discrepancy: {i}")?;
        }
        ensure!(issues.is_empty(), "{} discrepancies in {}", issues.len(), path.display());
        writeln!(out, "{}: {} scans, all aggregates recomputed with zero discrepancy", path.display(), r.per_scan.len())?;
        return Ok(());
    }
    let (Some(pred), Some(man), Some(dest)) = (a.pred, a.manifest, a.out) else { bail!("--pred, --manifest and --out are required") };
    ensure!(a.threshold > 0.0 && a.threshold < 1.0, "--threshold must lie in (0, 1)");
    let bootstrap = BootstrapConfig { resamples: a.bootstrap, seed: a.seed, ..BootstrapConfig::default() };
    bootstrap.validate()?;
    let manifest = Manifest::read(&man)?;
    let grid = default_threshold_grid();
    let mut per_scan = Vec::new();
    for r in manifest.split(a.split) {
        let prob = nifti::read_volume(find_by_id(&pred, &r.subject_id)?)?;
        let reference = match &a.ref_dir {
            Some(d) => nifti::read_mask(find_by_id(d, &r.subject_id)?)?,
            None => nifti::read_mask(&r.mask_path)?,
        };
        per_scan.push(evaluate_scan(&r.subject_id, &prob, &reference, a.threshold, &grid).with_context(|| r.subject_id.clone())?);
    }
    ensure!(!per_scan.is_empty(), "no {:?} records in {}", a.split, man.display());
    let report = EvaluationReport::build(&a.system, a.threshold, bootstrap, per_scan)?;
    report.save(&dest)?;
    write!(out, "{}", table_summary(&[&report]))?;
    writeln!(out, "microDSC {:.4}", report.micro_dsc)?;
    writeln!(out, "{}", regression_line(&report))?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let cases: Vec<&str> = CASES.iter().copied().filter(|c| a.op.as_deref().is_none_or(|p| c.starts_with(p))).collect();
    ensure!(!cases.is_empty(), "no gradient check matches {:?}; cases are {}", a.op.unwrap_or_default(), CASES.join(", "));
    let seeds = if a.seed.is_empty() { DEFAULT_SEEDS.to_vec() } else { a.seed };
    let cfg = GradcheckConfig { tolerance: a.tol, ..GradcheckConfig::default() };
    let results = run_suite(Some(&cases), &seeds, &cfg)?;
    for r in &results {
        let verdict = if r.passed { "ok" } else { "FAILED" };
        writeln!(out, "{:<28} seed {} elements {:>5} max rel err {:.2e} {verdict}", r.case, r.seed, r.elements, r.max_error)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    ensure!(failed == 0, "{failed} of {} gradient checks failed", results.len());
    writeln!(out, "all {} gradient checks passed", results.len())?;
    Ok(())
}
