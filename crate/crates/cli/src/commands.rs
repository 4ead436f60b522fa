use std::path::{Path, PathBuf};
use std::time::Instant;

use atlasfuse::atlas::{AtlasEntry, AtlasSet};
use atlasfuse::experiment::{load_subjects, run_ablation, PairRecord, Subject};
use atlasfuse::fusion::{segment, PairSummary, Strategy};
use atlasfuse::grid::{
    is_volume_dir, normalize, read_oasg, read_volume, read_volume_or_slice, write_oasg,
    write_volume, LabelMap2D, OasgGrid, Volume,
};
use atlasfuse::io::{write_atomic, write_json_atomic};
use atlasfuse::metrics::{evaluate_case, metrics_csv, MetricRecord};
use atlasfuse::phantom::{generate_cohort, ATLAS_MANIFEST, TEST_MANIFEST};
use atlasfuse::registration::register_pair;
use atlasfuse::transform::warp_values;
use atlasfuse::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::Config;

pub const RUN_MANIFEST: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "atlasfuse",
    version,
    about = "Multi-atlas segmentation with label-overlap weighted fusion"
)]
pub struct Cli {
    /// Worker threads for pair-level jobs (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic cohort.
    Generate(GenerateArgs),
    /// Register one atlas slice to one target slice.
    Register(RegisterArgs),
    /// Segment a test image or volume with an atlas manifest.
    Segment(SegmentArgs),
    /// Score predicted label volumes against ground truth.
    Evaluate(EvaluateArgs),
    /// Mean DSC of every fusion strategy at several atlas counts.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON config with optional `registration`, `fusion` and `phantom` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config (and `OASIS_SEED`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RegOverrides {
    /// Iteration cap per pyramid level.
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub pyramid_levels: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 10)]
    pub atlases: usize,
    #[arg(long, default_value_t = 10)]
    pub tests: usize,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub slices: Option<usize>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub reg: RegOverrides,
    /// Moving image (OASG).
    #[arg(long)]
    pub atlas: PathBuf,
    /// Fixed image (OASG).
    #[arg(long)]
    pub target: PathBuf,
    /// Atlas label; with `--target-label` enables the Dice term.
    #[arg(long)]
    pub atlas_label: Option<PathBuf>,
    #[arg(long, requires = "atlas_label")]
    pub target_label: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub reg: RegOverrides,
    /// Test image: an OASG file or a volume directory.
    #[arg(long)]
    pub test: PathBuf,
    /// Atlas manifest JSON.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub n_atlases: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predicted label volume, or a directory of case directories.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth label volume, or a directory of case directories.
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub reg: RegOverrides,
    /// Cohort directory written by `generate`.
    #[arg(long)]
    pub cohort: PathBuf,
    /// Atlas counts, comma-separated; `a..b` expands to every count in between.
    #[arg(long, default_value = "2..10", value_parser = parse_counts)]
    pub n_atlases: ::std::vec::Vec<usize>,
    /// Strategies, comma-separated.
    #[arg(long, value_delimiter = ',', default_value = "oasis,fwal,fwow")]
    pub strategies: Vec<Strategy>,
}

/// Parses `2,4,6` or `2..10` (inclusive) or a mix such as `2..4,8`.
pub fn parse_counts(s: &str) -> std::result::Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let num = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
        match part.split_once("..") {
            Some((a, b)) => {
                let (a, b) = (num(a)?, num(b.trim_start_matches('='))?);
                if a > b {
                    return Err(format!("empty range {part:?}"));
                }
                out.extend(a..=b);
            }
            None => out.push(num(part)?),
        }
    }
    if out.is_empty() {
        return Err("no atlas counts".into());
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    config: Option<&'a Path>,
    inputs: Vec<&'a Path>,
    output_dir: &'a Path,
    seed: u64,
    effective_config: &'a Config,
    wall_time_s: f64,
    pairs: Vec<PairRecord>,
}

struct Run<'a> {
    command: &'static str,
    config_path: Option<&'a Path>,
    inputs: Vec<&'a Path>,
    out: &'a Path,
    start: Instant,
}

impl<'a> Run<'a> {
    fn finish(self, config: &Config, seed: u64, pairs: Vec<PairRecord>) -> Result<()> {
        let manifest = RunManifest {
            command: self.command,
            config: self.config_path,
            inputs: self.inputs,
            output_dir: self.out,
            seed,
            effective_config: config,
            wall_time_s: self.start.elapsed().as_secs_f64(),
            pairs,
        };
        write_json_atomic(&self.out.join(RUN_MANIFEST), &manifest)
    }
}

/// Fails early with the offending path instead of a bare OS error.
fn require(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{}: not found", p.display()),
            )
            .into());
        }
    }
    Ok(())
}

fn load_config(common: &Common, reg: Option<&RegOverrides>) -> Result<(Config, u64)> {
    let mut config = Config::load(common.config.as_deref())?;
    let seed = config.resolve_seed(common.seed)?;
    if let Some(reg) = reg {
        if let Some(v) = reg.max_iters {
            config.registration.max_iters = v;
        }
        if let Some(v) = reg.pyramid_levels {
            config.registration.pyramid_levels = v;
        }
    }
    config.registration.validate()?;
    Ok((config, seed))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => generate(&a),
        Command::Register(a) => register(&a),
        Command::Segment(a) => segment_cmd(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let start = Instant::now();
    let (mut config, seed) = load_config(&a.common, None)?;
    let p = &mut config.phantom;
    if let Some(v) = a.width {
        p.width = v;
    }
    if let Some(v) = a.height {
        p.height = v;
    }
    if let Some(v) = a.slices {
        p.slices = v;
    }
    let cohort = generate_cohort(&config.phantom, a.atlases, a.tests)?;
    cohort.write(&a.common.out)?;
    let run = Run {
        command: "generate",
        config_path: a.common.config.as_deref(),
        inputs: vec![],
        out: &a.common.out,
        start,
    };
    run.finish(&config, seed, Vec::new())
}

fn file_stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn register(a: &RegisterArgs) -> Result<()> {
    let start = Instant::now();
    require(&[&a.atlas, &a.target])?;
    let (config, seed) = load_config(&a.common, Some(&a.reg))?;
    let atlas = normalize(&read_oasg(&a.atlas)?.into_image()?)?;
    let target = normalize(&read_oasg(&a.target)?.into_image()?)?;
    let atlas_label = a
        .atlas_label
        .as_ref()
        .map(|p| read_oasg(p)?.into_label())
        .transpose()?;
    let target_label = a
        .target_label
        .as_ref()
        .map(|p| read_oasg(p)?.into_label())
        .transpose()?;
    let result = register_pair(
        &atlas,
        atlas_label.as_ref(),
        &target,
        target_label.as_ref(),
        &config.registration,
    )?;

    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    write_oasg(out.join("field.oasg"), &result.field.clone().into())?;
    write_oasg(
        out.join("warped_image.oasg"),
        &warp_values(&atlas, &result.field)?.into(),
    )?;
    if let Some(label) = &atlas_label {
        write_oasg(
            out.join("warped_label.oasg"),
            &warp_values(label, &result.field)?.into(),
        )?;
    }
    let mut trace = String::from("level,iteration,sim,dice,smooth,total\n");
    for e in &result.loss_trace {
        let l = e.loss;
        trace.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.level, e.iteration, l.sim, l.dice, l.smooth, l.total
        ));
    }
    write_atomic(&out.join("trace.csv"), trace.as_bytes())?;

    let summary = PairSummary {
        atlas: file_stem(&a.atlas),
        initial_total: result.initial.total,
        final_total: result.final_loss.total,
        iterations: result.levels.iter().map(|l| l.iterations).sum(),
        converged: result.converged,
    };
    let mut inputs = vec![a.atlas.as_path(), a.target.as_path()];
    inputs.extend(a.atlas_label.as_deref());
    inputs.extend(a.target_label.as_deref());
    let run = Run {
        command: "register",
        config_path: a.common.config.as_deref(),
        inputs,
        out,
        start,
    };
    run.finish(
        &config,
        seed,
        vec![PairRecord {
            target: file_stem(&a.target),
            slice: 0,
            summary,
        }],
    )
}

fn slice_set(atlases: &[Subject], s: usize) -> Result<AtlasSet> {
    AtlasSet::new(
        atlases
            .iter()
            .map(|a| {
                AtlasEntry::new(
                    a.id.clone(),
                    a.image.slice(s).clone(),
                    a.label.slice(s).clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?,
    )
}

pub fn segment_cmd(a: &SegmentArgs) -> Result<()> {
    let start = Instant::now();
    require(&[&a.test, &a.manifest])?;
    let (mut config, seed) = load_config(&a.common, Some(&a.reg))?;
    if let Some(s) = a.strategy {
        config.fusion.strategy = s;
    }
    if let Some(n) = a.n_atlases {
        config.fusion.n_atlases = n;
    }
    let test = read_volume_or_slice(&a.test, OasgGrid::into_image)?;
    let atlases = load_subjects(&a.manifest)?;
    let first = atlases
        .first()
        .ok_or_else(|| Error::InvalidData("empty manifest".into()))?;
    if first.image.depth() != test.depth() {
        return Err(Error::SliceCountMismatch {
            expected: first.image.depth(),
            actual: test.depth(),
        });
    }

    let target = file_stem(&a.test);
    let out = &a.common.out;
    let mut labels = Vec::with_capacity(test.depth());
    let mut pairs = Vec::new();
    for (s, img) in test.slices().iter().enumerate() {
        let set = slice_set(&atlases, s)?;
        let seg = segment(
            img,
            &set,
            &config.registration,
            config.fusion.strategy,
            config.fusion.n_atlases,
        )?;
        let weights = serde_json::json!({
            "slice": s,
            "strategy": config.fusion.strategy,
            "selected": seg.selected,
            "weights": seg.weights.to_json(),
        });
        write_json_atomic(
            &out.join("weights").join(format!("slice_{s:04}.json")),
            &weights,
        )?;
        pairs.extend(seg.registrations.into_iter().map(|summary| PairRecord {
            target: target.clone(),
            slice: s,
            summary,
        }));
        labels.push(seg.label);
    }
    write_volume(out.join("label"), &Volume::new(labels, test.spacing())?)?;
    let run = Run {
        command: "segment",
        config_path: a.common.config.as_deref(),
        inputs: vec![a.test.as_path(), a.manifest.as_path()],
        out,
        start,
    };
    run.finish(&config, seed, pairs)
}

/// A label volume directory, or a case directory holding one under `label/`.
fn case_label_dir(dir: &Path) -> Option<PathBuf> {
    if is_volume_dir(dir) {
        Some(dir.to_path_buf())
    } else if is_volume_dir(&dir.join("label")) {
        Some(dir.join("label"))
    } else {
        None
    }
}

fn read_labels(dir: &Path) -> Result<Volume<LabelMap2D>> {
    read_volume(dir, OasgGrid::into_label)
}

/// Pairs up prediction and ground-truth cases. Single volumes pair directly;
/// otherwise every case subdirectory of `pred` must exist under `gt`.
fn collect_cases(pred: &Path, gt: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if let (Some(p), Some(g)) = (case_label_dir(pred), case_label_dir(gt)) {
        return Ok(vec![(file_stem(pred), p, g)]);
    }
    let mut names: Vec<String> = std::fs::read_dir(pred)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| !n.starts_with('.'))
        .collect();
    names.sort();
    let mut cases = Vec::new();
    for name in names {
        let Some(p) = case_label_dir(&pred.join(&name)) else {
            continue;
        };
        let g = case_label_dir(&gt.join(&name)).ok_or_else(|| {
            Error::InvalidData(format!(
                "no ground truth for case {name:?} under {}",
                gt.display()
            ))
        })?;
        cases.push((name, p, g));
    }
    if cases.is_empty() {
        return Err(Error::InvalidData(format!(
            "no label volumes under {}",
            pred.display()
        )));
    }
    Ok(cases)
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let start = Instant::now();
    require(&[&a.pred, &a.gt])?;
    let cases = collect_cases(&a.pred, &a.gt)?;
    let mut rows: Vec<(String, MetricRecord)> = Vec::new();
    for (name, p, g) in &cases {
        let gt = read_labels(g)?;
        for r in evaluate_case(&read_labels(p)?, &gt, gt.spacing())? {
            rows.push((name.clone(), r));
        }
    }
    write_atomic(
        &a.out.join("metrics.csv"),
        &metrics_csv(rows.iter().map(|(n, r)| (n.as_str(), r)))?,
    )?;
    let run = Run {
        command: "evaluate",
        config_path: None,
        inputs: vec![a.pred.as_path(), a.gt.as_path()],
        out: &a.out,
        start,
    };
    run.finish(&Config::default(), 0, Vec::new())
}

pub fn ablate(a: &AblateArgs) -> Result<()> {
    let start = Instant::now();
    let (config, seed) = load_config(&a.common, Some(&a.reg))?;
    let atlas_manifest = a.cohort.join(ATLAS_MANIFEST);
    let test_manifest = a.cohort.join(TEST_MANIFEST);
    require(&[&atlas_manifest, &test_manifest])?;
    let atlases = load_subjects(&atlas_manifest)?;
    let tests = load_subjects(&test_manifest)?;
    let report = run_ablation(
        &atlases,
        &tests,
        &config.registration,
        &a.strategies,
        &a.n_atlases,
    )?;

    let out = &a.common.out;
    write_atomic(&out.join("ablation.csv"), &report.to_csv()?)?;
    let mut per_case = String::from("case_id,strategy,n_atlases,dsc_percent\n");
    for (row, dscs) in report.rows.iter().zip(&report.per_case) {
        for (t, d) in tests.iter().zip(dscs) {
            per_case.push_str(&format!("{},{},{},{:.6}\n", t.id, row.strategy, row.n, d));
        }
    }
    write_atomic(&out.join("per_case.csv"), per_case.as_bytes())?;
    for (s, loa) in report.loa.iter().enumerate() {
        loa.write_csv(&out.join("loa").join(format!("slice_{s:04}.csv")))?;
    }
    let run = Run {
        command: "ablate",
        config_path: a.common.config.as_deref(),
        inputs: vec![atlas_manifest.as_path(), test_manifest.as_path()],
        out,
        start,
    };
    run.finish(&config, seed, report.pairs)
}
