//! Subcommands of the `pcomplete` binary.
//!
//! Each command is a plain function over parsed arguments so tests can call
//! it without spawning a process. Failures carry an exit code through
//! [`exit_code`]: 1 for usage, 2 for bad data, 3 for numerical aborts.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pcomplete::config::{Profile, RunConfig};
use pcomplete::data::{fit_to_size, read_dataset, synth_dataset, write_dataset, SynthOptions};
use pcomplete::metrics::{mmd, ChamferVariant, MetricReport, DCD_ALPHA, FSCORE_TAU};
use pcomplete::model::{Completion, Model};
use pcomplete::selfview::{orthogonal_viewpoints, project_all, write_depth, write_raster, RasterMeta};
use pcomplete::train::{load_run, save_run, StepRecord, Trainer};
use pcomplete::PointCloud;
use pcomplete_tensor::gradcheck::{grad_check_with, instantiations, GradCheckOptions, CATALOGUE};
use pcomplete_tensor::{ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numerical(String),
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Maps an error chain to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Usage(_) => EXIT_USAGE,
                CliError::Numerical(_) => EXIT_NUMERICAL,
            };
        }
        if let Some(pcomplete::Error::NonFiniteLoss { .. }) = cause.downcast_ref::<pcomplete::Error>() {
            return EXIT_NUMERICAL;
        }
    }
    EXIT_DATA
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    CliError::Usage(msg.into()).into()
}

#[derive(Debug, Parser)]
#[command(name = "pcomplete", version, about = "Point-cloud completion from self-projected depth views")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic partial/complete pairs.
    Synth(SynthArgs),
    /// Render a cloud into depth maps from the orthogonal cameras.
    Project(ProjectArgs),
    /// Train on a synthetic dataset directory.
    Train(TrainArgs),
    /// Complete one partial cloud.
    Complete(CompleteArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Compare every differentiable op against finite differences.
    Gradcheck(GradcheckArgs),
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Project(a) => project(&a),
        Command::Train(a) => train(&a),
        Command::Complete(a) => complete(&a),
        Command::Eval(a) => eval(&a, &mut std::io::stdout().lock()),
        Command::Gradcheck(a) => gradcheck(&a, &mut std::io::stdout().lock()),
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Points per ground-truth cloud.
    #[arg(long, default_value_t = 1024)]
    pub gt_points: usize,
    /// Points per partial cloud.
    #[arg(long, default_value_t = 512)]
    pub input_points: usize,
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    if a.gt_points == 0 || a.input_points == 0 {
        return Err(usage("point counts must be positive"));
    }
    let opts = SynthOptions {
        gt_points: a.gt_points,
        input_points: a.input_points,
        ..SynthOptions::default()
    };
    let pairs = synth_dataset::<f32>(a.count, a.seed, &opts)?;
    write_dataset(&a.out, &pairs, a.seed, &opts)?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Supplies defaults for the options below.
    #[arg(long, default_value = "desk")]
    pub profile: Profile,
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub res: Option<usize>,
    /// Camera distance from the origin.
    #[arg(long)]
    pub dist: Option<f64>,
}

pub fn project(a: &ProjectArgs) -> Result<()> {
    let m = a.profile.model();
    let n_views = a.views.unwrap_or(m.n_views);
    let res = a.res.unwrap_or(m.resolution);
    let dist = a.dist.unwrap_or(m.view_distance);
    let all = orthogonal_viewpoints(dist as f32);
    if n_views == 0 || n_views > all.len() {
        return Err(usage(format!("--views must be between 1 and {}", all.len())));
    }
    if res < 8 {
        return Err(usage("--res must be at least 8"));
    }
    if !(dist > m.half_extent) {
        return Err(usage(format!("--dist must exceed the object half extent {}", m.half_extent)));
    }
    let cloud = PointCloud::<f32>::read_xyz(&a.input)?;
    let fov = pcomplete::selfview::framing_fov_deg(dist, m.half_extent);
    let set = project_all(&cloud, &all[..n_views], res, fov)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, (map, view)) in set.maps.iter().zip(&set.views).enumerate() {
        let stem = a.out.join(format!("view{i}"));
        write_depth(&stem, map, view, fov)?;
        println!("{}.depth {}x{} occupied {}", stem.display(), map.width, map.height, map.occupied());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML). Defaults to the desk profile.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for the checkpoint and `trace.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Continue from a checkpoint directory.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Number of steps to run now; defaults to the rest of the schedule.
    #[arg(long)]
    pub steps: Option<usize>,
}

pub const TRACE_FILE: &str = "trace.csv";

pub fn train(a: &TrainArgs) -> Result<()> {
    let config = match &a.config {
        Some(p) => Some(RunConfig::load(p)?),
        None => None,
    };
    let (cfg, ckpt) = match &a.resume {
        Some(dir) => {
            let (saved, _, _, ckpt) = load_run(dir)?;
            (config.unwrap_or(saved), Some(ckpt))
        }
        None => (config.unwrap_or_else(|| RunConfig::from_profile(Profile::Desk)), None),
    };
    let (_, mut pairs) = read_dataset::<f32>(&a.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    for p in &mut pairs {
        if p.partial.len() != cfg.model.n_in {
            p.partial = fit_to_size(&p.partial, cfg.model.n_in, &mut rng)?;
        }
    }
    let mut trainer = match &ckpt {
        Some(ck) => Trainer::resume(&cfg, pairs, ck)?,
        None => Trainer::new(&cfg, pairs)?,
    };
    let steps = a
        .steps
        .or(cfg.train.steps)
        .unwrap_or_else(|| trainer.planned_steps().saturating_sub(trainer.step));

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let trace_path = a.out.join(TRACE_FILE);
    let fresh = ckpt.is_none() || !trace_path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&trace_path)
        .with_context(|| format!("opening {}", trace_path.display()))?;
    let mut trace = BufWriter::new(file);
    if fresh {
        writeln!(trace, "{}", StepRecord::CSV_HEADER)?;
    }
    let start = Instant::now();
    let mut last = None;
    let result = trainer.run(steps, |r| {
        writeln!(trace, "{}", r.csv_line()).map_err(|e| pcomplete::Error::io(&trace_path, e))?;
        trace.flush().map_err(|e| pcomplete::Error::io(&trace_path, e))?;
        last = Some(*r);
        Ok(())
    });
    trace.flush()?;
    result?;
    save_run(&a.out, &cfg, &trainer.checkpoint())?;
    match last {
        Some(r) => println!(
            "trained to step {} (last loss {:.6}, {:.1}s); checkpoint in {}",
            trainer.step,
            r.loss,
            start.elapsed().as_secs_f64(),
            a.out.display()
        ),
        None => println!("no steps run; checkpoint in {}", a.out.display()),
    }
    Ok(())
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("weights").required(true).args(["ckpt", "random_init"]))]
pub struct CompleteArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Use freshly initialized weights of this profile instead of a checkpoint.
    #[arg(long, value_name = "PROFILE")]
    pub random_init: Option<Profile>,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the coarse, merged and first refined clouds.
    #[arg(long)]
    pub dump_stages: bool,
    /// Also write the attention maps as rasters.
    #[arg(long)]
    pub dump_attn: bool,
    /// Seed for resizing inputs whose point count differs from the model's.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// `out.xyz` with `suffix` → `out.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn complete(a: &CompleteArgs) -> Result<()> {
    let (model, params): (Model, ParamStore<f32>) = match (&a.ckpt, a.random_init) {
        (Some(dir), _) => {
            let (_, model, params, _) = load_run(dir)?;
            (model, params)
        }
        (None, Some(p)) => Model::init(&p.model())?,
        (None, None) => return Err(usage("one of --ckpt or --random-init is required")),
    };
    let mut partial = PointCloud::<f32>::read_xyz(&a.input)?;
    if partial.is_empty() {
        return Err(pcomplete::Error::pre("complete", format!("{} has no points", a.input.display())).into());
    }
    if partial.len() != model.cfg.n_in {
        partial = fit_to_size(&partial, model.cfg.n_in, &mut ChaCha8Rng::seed_from_u64(a.seed))?;
    }
    let mut tape = Tape::with_params(&params);
    let out = model.forward(&mut tape, &partial)?;
    let done = Completion::from_outputs(&tape, &out)?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    done.p2.write_xyz(&a.output)?;
    if a.dump_stages {
        for (name, c) in [("coarse", &done.coarse), ("p0", &done.p0), ("p1", &done.p1)] {
            c.write_xyz(&sibling(&a.output, &format!("{name}.xyz")))?;
        }
    }
    if a.dump_attn {
        let maps = [
            ("attn.views", out.view_weights),
            ("attn.stage1", out.similarity_weights[0]),
            ("attn.stage2", out.similarity_weights[1]),
        ];
        for (name, v) in maps {
            let t = tape.value(v);
            write_raster(&sibling(&a.output, name), t.data(), &RasterMeta::plain(t.cols(), t.rows()))?;
        }
    }
    println!("{} points -> {}", done.p2.len(), a.output.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Metric {
    Cd,
    Dcd,
    F1,
    Mmd,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted clouds named `<id>.xyz`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth directory; a dataset directory from `synth` also works.
    #[arg(long)]
    pub gt: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "cd,dcd,f1")]
    pub metrics: Vec<Metric>,
    /// Reference shapes for `--metrics mmd`.
    #[arg(long)]
    pub refs: Option<PathBuf>,
    /// Chamfer variant used by MMD.
    #[arg(long, default_value = "l1")]
    pub variant: ChamferVariant,
    #[arg(long, default_value_t = DCD_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = FSCORE_TAU)]
    pub tau: f64,
}

fn xyz_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "xyz"))
        .collect();
    files.sort();
    Ok(files)
}

/// Pair id: the file name up to its first dot.
fn pair_key(path: &Path) -> String {
    let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    name.split('.').next().unwrap_or_default().to_string()
}

fn find_gt(dir: &Path, id: &str) -> Option<PathBuf> {
    let roots = [dir.to_path_buf(), dir.join("pairs")];
    roots
        .iter()
        .flat_map(|r| [r.join(format!("{id}.xyz")), r.join(format!("{id}.complete.xyz"))])
        .find(|p| p.is_file())
}

pub fn eval(a: &EvalArgs, out: &mut impl Write) -> Result<()> {
    if a.metrics.contains(&Metric::Mmd) {
        if a.metrics.len() != 1 {
            return Err(usage("mmd cannot be combined with other metrics"));
        }
        let refs_dir = a.refs.as_ref().ok_or_else(|| usage("--metrics mmd needs --refs"))?;
        let load = |files: Vec<PathBuf>| -> Result<Vec<PointCloud<f64>>> {
            files.iter().map(|p| Ok(PointCloud::read_xyz(p)?)).collect()
        };
        let preds = load(xyz_files(&a.pred)?)?;
        let refs = load(xyz_files(refs_dir)?)?;
        let v = mmd(&preds, &refs, a.variant)?;
        writeln!(out, "mmd {v:.6}")?;
        return Ok(());
    }
    let gt_dir = a.gt.as_ref().ok_or_else(|| usage("--gt is required"))?;
    // stage and attention dumps (`id.p1.xyz`, ...) are not predictions
    let files: Vec<PathBuf> = xyz_files(&a.pred)?
        .into_iter()
        .filter(|p| p.file_stem().is_some_and(|s| !s.to_string_lossy().contains('.')))
        .collect();
    if files.is_empty() {
        return Err(pcomplete::Error::pre("eval", format!("no .xyz files in {}", a.pred.display())).into());
    }
    let mut header = vec!["id"];
    if a.metrics.contains(&Metric::Cd) {
        header.extend(["cd_l1", "cd_l2"]);
    }
    if a.metrics.contains(&Metric::Dcd) {
        header.push("dcd");
    }
    if a.metrics.contains(&Metric::F1) {
        header.push("f1");
    }
    writeln!(out, "{}", header.join(" "))?;
    let line = |id: &str, r: &MetricReport| {
        let mut cols = vec![id.to_string()];
        if a.metrics.contains(&Metric::Cd) {
            cols.push(format!("{:.6}", r.cd_l1));
            cols.push(format!("{:.6}", r.cd_l2));
        }
        if a.metrics.contains(&Metric::Dcd) {
            cols.push(format!("{:.6}", r.dcd));
        }
        if a.metrics.contains(&Metric::F1) {
            cols.push(format!("{:.6}", r.f1));
        }
        cols.join(" ")
    };
    let mut rows = Vec::with_capacity(files.len());
    for f in &files {
        let id = pair_key(f);
        let gt_path = find_gt(gt_dir, &id).ok_or_else(|| {
            pcomplete::Error::pre("eval", format!("no ground truth for `{id}` in {}", gt_dir.display()))
        })?;
        let pred = PointCloud::<f64>::read_xyz(f)?;
        let gt = PointCloud::<f64>::read_xyz(&gt_path)?;
        let r = MetricReport::evaluate(&pred, &gt, a.alpha, a.tau)?;
        writeln!(out, "{}", line(&id, &r))?;
        rows.push(r);
    }
    writeln!(out, "{}", line("MEAN", &MetricReport::mean(&rows)))?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Corrupt the analytic gradient of this op to exercise the failure path.
    #[arg(long, hide = true)]
    pub inject: Option<String>,
}

pub fn gradcheck(a: &GradcheckArgs, out: &mut impl Write) -> Result<()> {
    if !(a.tolerance > 0.0) {
        return Err(usage("--tolerance must be positive"));
    }
    if let Some(op) = &a.inject {
        if !CATALOGUE.contains(&op.as_str()) {
            return Err(usage(format!("unknown op `{op}`")));
        }
    }
    writeln!(out, "{:<22} {:<18} {:>12}  status", "op", "shapes", "max_rel_err")?;
    let mut failed = Vec::new();
    for &op in CATALOGUE {
        for (seed, (variant, shapes)) in instantiations(op).into_iter().enumerate() {
            let opts = GradCheckOptions {
                seed: seed as u64,
                corrupt_analytic: a.inject.as_deref() == Some(op),
                ..GradCheckOptions::default()
            };
            let report = grad_check_with(&variant, &shapes, a.tolerance, &opts)?;
            let ok = report.passes(a.tolerance);
            let dims: Vec<String> = shapes.iter().map(|s| format!("{s:?}").replace(' ', "")).collect();
            writeln!(
                out,
                "{:<22} {:<18} {:>12.3e}  {}",
                variant,
                dims.join(""),
                report.max_rel_error,
                if ok { "PASS" } else { "FAIL" }
            )?;
            if !ok && !failed.contains(&op) {
                failed.push(op);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for: {}", failed.join(", "))).into())
    }
}
