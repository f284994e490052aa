//! Command-line entry point. [`run`] parses arguments, resolves the
//! configuration, runs one harness routine and writes its report.
//!
//! Exit codes: 0 success, 1 a check failed (or the run errored), 2 usage.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::embeddings::EmbeddingMode;
use crate::error::{Result, SraError};
use crate::harness::data::generate_dataset;
use crate::harness::experiment::{run_experiment, ExperimentConfig, ExperimentOutcome, DIVERSITY_TARGET, EXPECTED_MARGIN_POINTS};
use crate::harness::flops::flops_estimate;
use crate::harness::gradcheck::{pipeline_config, pipeline_gradcheck};
use crate::harness::report::{Check, Report, ReportFormat};
use crate::harness::train::{train_toy, ExtractorKind};
use crate::numerics::Tensor;
use crate::oracles;
use crate::rng;
use crate::sampler::{dynamic_grid_size, GridSize, RoiBox};
use crate::sra::{checkpoint, parameter_count, sra_extract, DescriptorMode, SraConfig, SraParams};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Parameter-count window implied by a +0.2M parameter head.
pub const PARAM_BUDGET: (usize, usize) = (150_000, 350_000);

#[derive(Parser, Debug)]
#[command(name = "sra", version, about = "Semantic RoI Align experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Flat JSON file of dotted-key overrides.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one key, e.g. `--set toy.train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,

    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Directory for the report; printed to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Json)]
    format: FormatArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Json,
    Csv,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Finite-difference check of the full pipeline over several seeds.
    Gradcheck,
    /// Compare every kernel against its naive reference implementation.
    Oracles,
    /// Fixed 8x8 grid against the dynamic sampler.
    AblateSampler {
        #[arg(long, value_enum)]
        mode: Option<SamplerMode>,
    },
    /// Average, maximum and concatenation descriptors.
    AblateDescriptor {
        #[arg(long, value_enum)]
        mode: Option<DescriptorArg>,
    },
    /// No embedding, position embedding and Area Embedding.
    AblateEmbedding {
        #[arg(long, value_enum)]
        mode: Option<EmbeddingArg>,
    },
    /// Train SRA and RoI Align heads on the toy task.
    TrainToy,
    /// Feature similarity under rotation, reflection and box jitter.
    Invariance,
    /// Pairwise similarity of trained masks.
    Diversity,
    /// Parameter count, analytic cost and forward timing at default sizes.
    Bench,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum)]
enum SamplerMode {
    Fixed,
    Dynamic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DescriptorArg {
    Average,
    Maximum,
    Concatenation,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum EmbeddingArg {
    None,
    Position,
    Area,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSettings {
    pub seeds: usize,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings { seeds: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub channels: usize,
    pub rois: usize,
    pub map_size: usize,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            channels: 256,
            rois: 300,
            map_size: 64,
        }
    }
}

/// Everything a run reads. `sra` holds the full-size defaults; `toy` the
/// desk-scale experiment.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sra: SraConfig,
    pub toy: ExperimentConfig,
    pub gradcheck: GradcheckSettings,
    pub bench: BenchSettings,
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for p in &parts[..parts.len() - 1] {
            node = node
                .entry(p.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .expect("prefixes are objects");
        }
        node.insert(parts[parts.len() - 1].to_string(), v.clone());
    }
    Value::Object(root)
}

impl RunConfig {
    /// Dotted-key view of the configuration.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Applies overrides in order; unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[(String, Value)]) -> Result<RunConfig> {
        let mut flat = self.to_flat();
        for (k, v) in overrides {
            match flat.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(SraError::Usage(format!("unknown config key {k:?}"))),
            }
        }
        let cfg: RunConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| SraError::Usage(format!("bad config value: {e}")))?;
        Ok(cfg)
    }

    /// Overrides from a flat JSON object file.
    pub fn file_overrides(text: &str) -> Result<Vec<(String, Value)>> {
        let v: Value = serde_json::from_str(text).map_err(|e| SraError::Usage(format!("config file: {e}")))?;
        match v {
            Value::Object(m) => Ok(m.into_iter().collect()),
            _ => Err(SraError::Usage("config file must be a flat JSON object".into())),
        }
    }

    /// `key=value`; the value is parsed as JSON, falling back to a string.
    pub fn parse_set(s: &str) -> Result<(String, Value)> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| SraError::Usage(format!("--set expects key=value, got {s:?}")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        Ok((k.trim().to_string(), value))
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(report) => finish(&cli, &report),
        Err(e @ (SraError::Usage(_) | SraError::Config(_))) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILED
        }
    }
}

fn finish(cli: &Cli, report: &Report) -> i32 {
    let format = match cli.format {
        FormatArg::Json => ReportFormat::Json,
        FormatArg::Csv => ReportFormat::Csv,
    };
    match &cli.out {
        Some(dir) => match report.write(dir, format) {
            Ok(path) => eprintln!("wrote {}", path.display()),
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_FAILED;
            }
        },
        None => {
            let mut stdout = std::io::stdout().lock();
            let _ = writeln!(stdout, "{}", report.render(format));
        }
    }
    for c in &report.checks {
        eprintln!("{} {}: {} (want {})", if c.passed { "PASS" } else { "FAIL" }, c.name, c.value, c.condition);
    }
    if report.passed() {
        EXIT_OK
    } else {
        let names: Vec<&str> = report.failures().iter().map(|c| c.name.as_str()).collect();
        eprintln!("failed: {}", names.join(", "));
        EXIT_FAILED
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| SraError::Usage(format!("{}: {e}", path.display())))?;
        overrides.extend(RunConfig::file_overrides(&text)?);
    }
    for s in &cli.sets {
        overrides.push(RunConfig::parse_set(s)?);
    }
    let cfg = RunConfig::default().with_overrides(&overrides)?;
    cfg.sra.validate()?;
    cfg.toy.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<Report> {
    let cfg = resolve(cli)?;
    let seed = cli.seed;
    let name = match &cli.command {
        Command::Gradcheck => "gradcheck",
        Command::Oracles => "oracles",
        Command::AblateSampler { .. } => "ablate-sampler",
        Command::AblateDescriptor { .. } => "ablate-descriptor",
        Command::AblateEmbedding { .. } => "ablate-embedding",
        Command::TrainToy => "train-toy",
        Command::Invariance => "invariance",
        Command::Diversity => "diversity",
        Command::Bench => "bench",
    };
    let mut report = Report::new(name, seed, serde_json::to_value(&cfg)?);
    match &cli.command {
        Command::Gradcheck => gradcheck(&cfg, seed, &mut report)?,
        Command::Oracles => run_oracles(seed, &mut report)?,
        Command::AblateSampler { mode } => {
            let modes = match mode {
                Some(m) => vec![*m],
                None => vec![SamplerMode::Fixed, SamplerMode::Dynamic],
            };
            let variants = modes
                .into_iter()
                .map(|m| {
                    let fixed_grid = (m == SamplerMode::Fixed).then_some(GridSize::FIXED);
                    let name = if fixed_grid.is_some() { "fixed" } else { "dynamic" };
                    (name.to_string(), SraConfig { fixed_grid, ..cfg.toy.sra.clone() })
                })
                .collect();
            ablate(&cfg, seed, variants, &mut report)?;
        }
        Command::AblateDescriptor { mode } => {
            let modes = match mode {
                Some(m) => vec![*m],
                None => vec![DescriptorArg::Average, DescriptorArg::Maximum, DescriptorArg::Concatenation],
            };
            let variants = modes
                .into_iter()
                .map(|m| {
                    let (name, descriptor, fixed_grid) = match m {
                        DescriptorArg::Average => ("average", DescriptorMode::Average, cfg.toy.sra.fixed_grid),
                        DescriptorArg::Maximum => ("maximum", DescriptorMode::Maximum, cfg.toy.sra.fixed_grid),
                        // only defined on a fixed grid
                        DescriptorArg::Concatenation => ("concatenation", DescriptorMode::Concatenation, Some(GridSize::FIXED)),
                    };
                    (name.to_string(), SraConfig { descriptor, fixed_grid, ..cfg.toy.sra.clone() })
                })
                .collect();
            ablate(&cfg, seed, variants, &mut report)?;
        }
        Command::AblateEmbedding { mode } => {
            let modes = match mode {
                Some(m) => vec![*m],
                None => vec![EmbeddingArg::None, EmbeddingArg::Position, EmbeddingArg::Area],
            };
            let variants = modes
                .into_iter()
                .map(|m| {
                    let (name, embedding) = match m {
                        EmbeddingArg::None => ("none", EmbeddingMode::None),
                        EmbeddingArg::Position => ("position", EmbeddingMode::Position),
                        EmbeddingArg::Area => ("area", EmbeddingMode::Area),
                    };
                    (name.to_string(), SraConfig { embedding, ..cfg.toy.sra.clone() })
                })
                .collect();
            ablate(&cfg, seed, variants, &mut report)?;
        }
        Command::TrainToy => {
            let out = run_experiment(&cfg.toy, seed)?;
            toy_accuracy(&out, &mut report);
            if let Some(dir) = &cli.out {
                fs::create_dir_all(dir)?;
                for s in &out.seeds {
                    if let Some(model) = &s.sra_model {
                        let params = model.state.sra.as_ref().expect("sra head has params");
                        checkpoint::save(dir.join(format!("sra_seed{}.json", s.seed)), params, &cfg.toy.sra)?;
                    }
                }
            }
        }
        Command::Invariance => {
            let out = run_experiment(&cfg.toy, seed)?;
            toy_invariance(&out, &mut report);
        }
        Command::Diversity => {
            let out = run_experiment(&cfg.toy, seed)?;
            toy_diversity(&out, &mut report);
        }
        Command::Bench => bench(&cfg, seed, &mut report)?,
    }
    Ok(report)
}

fn gradcheck(cfg: &RunConfig, seed: u64, report: &mut Report) -> Result<()> {
    let pipeline = pipeline_config();
    let mut worst = 0.0f64;
    let mut per_seed = Vec::with_capacity(cfg.gradcheck.seeds);
    for i in 0..cfg.gradcheck.seeds as u64 {
        let r = pipeline_gradcheck(&pipeline, seed.wrapping_add(i))?;
        worst = worst.max(r.max_rel_error);
        per_seed.push(r);
    }
    let tolerance = per_seed.first().map_or(1e-4, |r| r.tolerance);
    report
        .metric("pipeline_config", &pipeline)
        .metric("seeds", cfg.gradcheck.seeds)
        .metric("max_rel_error", worst)
        .metric("per_seed", &per_seed)
        .check(Check::new(
            "max_rel_error",
            worst,
            &format!("< {tolerance:e}"),
            per_seed.iter().all(|r| r.passed),
        ));
    Ok(())
}

fn run_oracles(seed: u64, report: &mut Report) -> Result<()> {
    let results = oracles::run_all(seed)?;
    for r in &results {
        report.check(Check::new(&r.name, r.max_error, &format!("<= {:e}", r.tolerance), r.passed));
    }
    report.metric("oracles", &results);
    Ok(())
}

fn ablate(cfg: &RunConfig, root: u64, variants: Vec<(String, SraConfig)>, report: &mut Report) -> Result<()> {
    let seeds = cfg.toy.seed_list(root);
    let mut rows = Vec::new();
    for (name, sra) in &variants {
        sra.validate()?;
        let mut accuracies = Vec::new();
        let mut grids: BTreeMap<String, usize> = BTreeMap::new();
        let mut max_area = 0;
        for &seed in &seeds {
            let data = generate_dataset(&cfg.toy.data, seed)?;
            for inst in data.train.iter().chain(&data.test) {
                let g = sra.grid_for(&inst.roi)?;
                max_area = max_area.max(g.area());
                *grids.entry(format!("{}x{}", g.h, g.w)).or_default() += 1;
            }
            let r = train_toy(ExtractorKind::Sra, sra, &cfg.toy.train, &data, seed)?;
            accuracies.push(r.final_test_accuracy());
        }
        let mean = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        match sra.fixed_grid {
            Some(g) => report.check(Check::new(
                &format!("{name}.grid_fixed"),
                grids.len() as f64,
                &format!("only {}x{}", g.h, g.w),
                grids.len() == 1 && grids.contains_key(&format!("{}x{}", g.h, g.w)),
            )),
            None => report.check(Check::new(
                &format!("{name}.grid_within_budget"),
                max_area as f64,
                &format!("<= {}", sra.budget),
                max_area <= sra.budget,
            )),
        };
        rows.push(serde_json::json!({
            "variant": name,
            "config": sra,
            "test_accuracy": accuracies,
            "mean_test_accuracy": mean,
            "grid_histogram": grids,
            "max_grid_area": max_area,
        }));
    }
    report.metric("seeds", &seeds).metric("variants", rows);
    Ok(())
}

fn toy_accuracy(out: &ExperimentOutcome, report: &mut Report) {
    let s = &out.summary;
    let per_seed: Vec<Value> = out
        .seeds
        .iter()
        .map(|o| {
            serde_json::json!({
                "seed": o.seed,
                "sra_accuracy": o.sra_accuracy,
                "roi_align_accuracy": o.roi_align_accuracy,
                "margin": o.margin,
                "sra_curve": o.sra_curve,
                "roi_align_curve": o.roi_align_curve,
            })
        })
        .collect();
    report
        .metric("per_seed", per_seed)
        .metric("mean_sra_accuracy", s.mean_sra_accuracy)
        .metric("mean_roi_align_accuracy", s.mean_roi_align_accuracy)
        .metric("mean_margin_points", s.mean_margin)
        .metric("expected_margin_points", EXPECTED_MARGIN_POINTS)
        .metric("expected_margin_reached", s.expected_margin_reached)
        .metric("early_loss_monotone", s.early_loss_monotone)
        .check(Check::new(
            "accuracy_margin",
            s.mean_margin,
            ">= 0 on average and > 0 on some seed",
            s.accuracy_passed,
        ));
}

fn toy_invariance(out: &ExperimentOutcome, report: &mut Report) {
    let s = &out.summary;
    let per_seed: Vec<Value> = out
        .seeds
        .iter()
        .map(|o| serde_json::json!({ "seed": o.seed, "reports": o.invariance }))
        .collect();
    report
        .metric("per_seed", per_seed)
        .metric("mean_rotation_sra", s.mean_rotation_sra)
        .metric("mean_rotation_roi_align", s.mean_rotation_roi_align)
        .check(Check::new(
            "rotation_similarity_gap",
            s.mean_rotation_sra - s.mean_rotation_roi_align,
            "> 0",
            s.invariance_passed,
        ));
}

fn toy_diversity(out: &ExperimentOutcome, report: &mut Report) {
    let s = &out.summary;
    let per_seed: Vec<Value> = out
        .seeds
        .iter()
        .map(|o| serde_json::json!({ "seed": o.seed, "report": o.diversity }))
        .collect();
    report
        .metric("per_seed", per_seed)
        .metric("mean_fraction_below", s.mean_diversity_fraction)
        .check(Check::new(
            "diversity_fraction",
            s.mean_diversity_fraction,
            &format!("> {DIVERSITY_TARGET}"),
            s.diversity_passed,
        ));
}

fn bench(cfg: &RunConfig, seed: u64, report: &mut Report) -> Result<()> {
    let (sra, b) = (&cfg.sra, &cfg.bench);
    let count = parameter_count(sra, b.channels);
    let square = dynamic_grid_size(&RoiBox::new(0.0, 0.0, 32.0, 32.0)?, sra.budget)?;
    let wide = dynamic_grid_size(&RoiBox::new(0.0, 0.0, 48.0, 16.0)?, sra.budget)?;
    let mut costs = Map::new();
    for (label, grid) in [("fixed_8x8", GridSize::FIXED), ("square_box", square), ("wide_box", wide)] {
        let f = flops_estimate(sra, b.channels, grid)?;
        costs.insert(
            label.into(),
            serde_json::json!({
                "grid": grid,
                "breakdown": f,
                "total": f.total(),
                "per_image": f.per_image(),
            }),
        );
    }

    let mut r = rng::stream(seed, "bench");
    let params = SraParams::init(sra, b.channels, &mut r)?;
    let size = b.map_size as f64;
    let map = Tensor::from_fn(&[b.channels, b.map_size, b.map_size], |_| r.gen_range(-1.0..1.0));
    let boxes: Vec<RoiBox> = (0..b.rois)
        .map(|_| {
            let (w, h) = (r.gen_range(2.0..size / 2.0), r.gen_range(2.0..size / 2.0));
            let (x0, y0) = (r.gen_range(0.0..size - 1.0 - w), r.gen_range(0.0..size - 1.0 - h));
            RoiBox::new(x0, y0, x0 + w, y0 + h)
        })
        .collect::<Result<_>>()?;
    let start = Instant::now();
    for roi in &boxes {
        sra_extract(&map, roi, &params, sra)?;
    }
    let seconds = start.elapsed().as_secs_f64();

    report
        .metric("channels", b.channels)
        .metric("parameter_count", count)
        .metric("flops", costs)
        .metric("rois", b.rois)
        .metric("forward_seconds", seconds)
        .metric("forward_ms_per_roi", 1e3 * seconds / b.rois.max(1) as f64)
        .check(Check::new(
            "parameter_count",
            count as f64,
            &format!("in [{}, {}]", PARAM_BUDGET.0, PARAM_BUDGET.1),
            (PARAM_BUDGET.0..=PARAM_BUDGET.1).contains(&count),
        ));
    Ok(())
}
