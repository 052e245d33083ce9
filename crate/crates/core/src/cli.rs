//! Command-line front end.
//!
//! Every subcommand prints a human-readable table on stdout and, when
//! `--json` is given, writes the same result as JSON. Outputs depend only on
//! the inputs and `--seed`.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 usage, 3 parse error,
//! 4 validation error, 5 infeasible budget. Failures also print a one-line
//! JSON diagnostic on stderr.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::convert::{conversion_report, to_lightweight_with, ConversionReport, ConvertOptions, ModelStats};
use crate::error::{Error, Result};
use crate::fusion::{check_guidelines, partition_with, FusionPlan, GuidelineViolation};
use crate::netir::{load_model, save_model, NetGraph, TensorShape};
use crate::prune::{rcnet_iterate, GammaDistribution, GammaSource, GammaTable, IterationReport, RcnetConfig};
use crate::sim::{
    reference_network, seam_taint, simulate_network, ArchConfig, NetworkWeights, PerfReport, SimOptions, Tensor,
};
use crate::tiling::{address_trace, make_schedule, BoundaryPolicy, PingPongSchedule, TilePlan};
use crate::traffic::{
    buffer_sweep, execution_plan, fused_traffic, layer_by_layer_traffic, savings_report, EnergyReport,
    SavingsReport, SweepReport, TrafficReport, MB,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_VALIDATION: i32 = 4;
pub const EXIT_INFEASIBLE: i32 = 5;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Parse(_) => EXIT_PARSE,
        Error::Shape { .. }
        | Error::DanglingResidual { .. }
        | Error::Conversion { .. }
        | Error::MissingGamma { .. }
        | Error::ShapeMismatch(_)
        | Error::Validation(_) => EXIT_VALIDATION,
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::InvalidArgument(_) => EXIT_USAGE,
        Error::Io(_) => EXIT_OTHER,
    }
}

pub fn error_kind(err: &Error) -> &'static str {
    match err {
        Error::Shape { .. } => "shape",
        Error::DanglingResidual { .. } => "dangling_residual",
        Error::Conversion { .. } => "conversion",
        Error::MissingGamma { .. } => "missing_gamma",
        Error::Infeasible { .. } => "infeasible",
        Error::ShapeMismatch(_) => "shape_mismatch",
        Error::Validation(_) => "validation",
        Error::InvalidArgument(_) => "usage",
        Error::Parse(_) => "parse",
        Error::Io(_) => "io",
    }
}

/// One-line JSON diagnostic for stderr.
pub fn diagnostic(err: &Error) -> String {
    serde_json::json!({
        "error": error_kind(err),
        "message": err.to_string(),
        "exit_code": exit_code(err),
    })
    .to_string()
}

/// Parses byte sizes such as `98304`, `96K`, `96KB` or `1M` (K = 1024).
pub fn parse_bytes(s: &str) -> std::result::Result<u64, String> {
    let t = s.trim();
    let upper = t.to_ascii_uppercase();
    let body = upper.strip_suffix('B').unwrap_or(&upper);
    let (num, mult) = if let Some(n) = body.strip_suffix('K') {
        (n, 1024)
    } else if let Some(n) = body.strip_suffix('M') {
        (n, 1024 * 1024)
    } else {
        (body, 1)
    };
    let v: u64 = num.trim().parse().map_err(|_| format!("invalid byte size '{s}'"))?;
    if v == 0 {
        return Err(format!("byte size must be positive: '{s}'"));
    }
    Ok(v * mult)
}

/// Ascending weight-buffer sizes for `sweep`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SizeList(pub Vec<u64>);

fn parse_size_list(s: &str) -> std::result::Result<SizeList, String> {
    parse_sizes(s).map(SizeList)
}

/// Parses `50K..300K` with an optional `:step` (default 25K), or a comma list.
pub fn parse_sizes(s: &str) -> std::result::Result<Vec<u64>, String> {
    if let Some((range, rest)) = s.split_once("..") {
        let (end, step) = match rest.split_once(':') {
            Some((e, st)) => (parse_bytes(e)?, parse_bytes(st)?),
            None => (parse_bytes(rest)?, 25 * 1024),
        };
        let start = parse_bytes(range)?;
        if end < start {
            return Err(format!("empty size range '{s}'"));
        }
        let mut out: Vec<u64> = (0..).map(|i| start + i * step).take_while(|&v| v <= end).collect();
        if *out.last().unwrap() != end {
            out.push(end);
        }
        Ok(out)
    } else {
        let out = s.split(',').map(parse_bytes).collect::<std::result::Result<Vec<_>, _>>()?;
        if out.windows(2).any(|w| w[0] >= w[1]) {
            return Err("sizes must be strictly ascending".into());
        }
        Ok(out)
    }
}

fn parse_positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got '{s}'")),
    }
}

fn parse_non_negative(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a non-negative number, got '{s}'")),
    }
}

fn parse_policy(s: &str) -> std::result::Result<BoundaryPolicy, String> {
    s.parse()
}

#[derive(Debug, Parser)]
#[command(name = "rcfuse", version, about = "Buffer-constrained layer fusion planner and accelerator model")]
pub struct Cli {
    #[command(flatten)]
    pub opts: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// Architecture config (JSON); defaults to the reference chip.
    #[arg(long, global = true)]
    pub arch: Option<PathBuf>,
    /// Weight buffer size in bytes (K/M suffixes are powers of 1024).
    #[arg(long, global = true, value_parser = parse_bytes)]
    pub weight_buffer: Option<u64>,
    /// Size of one half of the ping-pong feature buffer.
    #[arg(long, global = true, value_parser = parse_bytes)]
    pub feature_half: Option<u64>,
    /// Allowed group overshoot m while morphing: groups up to (1 + m) * B.
    #[arg(long, global = true, default_value_t = 0.5, value_parser = parse_non_negative)]
    pub overshoot: f64,
    #[arg(long, global = true, default_value_t = 30.0, value_parser = parse_positive)]
    pub fps: f64,
    #[arg(long, global = true, default_value_t = 70.0, value_parser = parse_non_negative)]
    pub energy_pj_per_bit: f64,
    /// Activation and weight precision.
    #[arg(long, global = true)]
    pub precision_bits: Option<u32>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Tile seam handling: zero or replicate.
    #[arg(long, global = true, default_value = "zero", value_parser = parse_policy)]
    pub boundary: BoundaryPolicy,
    /// Write the result as JSON to this path.
    #[arg(long, global = true)]
    pub json: Option<PathBuf>,
}

impl Default for GlobalOpts {
    fn default() -> Self {
        Self {
            arch: None,
            weight_buffer: None,
            feature_half: None,
            overshoot: 0.5,
            fps: 30.0,
            energy_pj_per_bit: 70.0,
            precision_bits: None,
            seed: 0,
            boundary: BoundaryPolicy::Zero,
            json: None,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Replace k x k convolutions with depthwise + pointwise blocks.
    Convert {
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Convert the first layer too.
        #[arg(long)]
        convert_first: bool,
    },
    /// Partition into fusion groups.
    Plan { model: PathBuf },
    /// Prune and rescale until every group fits the budget.
    Prune {
        model: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Per-group weight budget; defaults to the weight buffer.
        #[arg(long, value_parser = parse_bytes)]
        budget: Option<u64>,
        /// Channel scores (CSV: layer_id,channel,gamma); seeded scores otherwise.
        #[arg(long)]
        gammas: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        iterations: usize,
        /// Iterations that end with a rescale back to the original size.
        #[arg(long, default_value_t = 1)]
        rescale_first: usize,
        /// Write the scores of the pruned model here.
        #[arg(long)]
        gammas_out: Option<PathBuf>,
    },
    /// Solve tile sizes and ping-pong schedules for the execution plan.
    Tile {
        model: PathBuf,
        /// Dump the write-mask address trace of one layer's output tile.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = 0, requires = "trace")]
        trace_layer: usize,
    },
    /// Cycle estimate, optionally with a functional replay.
    Simulate {
        model: PathBuf,
        /// Replay with seeded random weights and check against the reference.
        #[arg(long)]
        functional: bool,
        /// Input tensor (raw format); random when omitted.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Write the final output tensor (raw format).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Use the PE-array schedule for every layer.
        #[arg(long)]
        dataflow: bool,
        /// Run the tiles of each group in parallel.
        #[arg(long)]
        parallel: bool,
    },
    /// External traffic, DRAM energy and savings.
    Report {
        model: PathBuf,
        /// Compare against this model run layer by layer instead of the model itself.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Bandwidth against weight-buffer size.
    Sweep {
        model: PathBuf,
        /// Range such as 50K..300K[:25K] or a comma list.
        #[arg(long, value_parser = parse_size_list, default_value = "50K..300K")]
        sizes: SizeList,
        /// Two-column plot data: buffer bytes, bandwidth in MB/s.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Convert, prune, plan, tile and report in one go.
    Pipeline {
        model: PathBuf,
        #[arg(long)]
        gammas: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        iterations: usize,
        /// Write the final model here.
        #[arg(long)]
        model_out: Option<PathBuf>,
        /// Skip the conversion step.
        #[arg(long)]
        no_convert: bool,
    },
}

/// Resolved settings shared by all subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub overshoot: f64,
    pub fps: f64,
    pub pj_per_bit: f64,
    pub seed: u64,
    pub boundary: BoundaryPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            arch: ArchConfig::default(),
            overshoot: 0.5,
            fps: 30.0,
            pj_per_bit: 70.0,
            seed: 0,
            boundary: BoundaryPolicy::Zero,
        }
    }
}

impl RunConfig {
    pub fn from_opts(opts: &GlobalOpts) -> Result<Self> {
        let mut arch = match &opts.arch {
            Some(p) => ArchConfig::load(p)?,
            None => ArchConfig::default(),
        };
        if let Some(b) = opts.weight_buffer {
            arch.weight_buffer_bytes = b;
        }
        if let Some(b) = opts.feature_half {
            arch.feature_half_bytes = b;
        }
        if let Some(bits) = opts.precision_bits {
            if bits == 0 {
                return Err(Error::InvalidArgument("precision bits must be positive".into()));
            }
            arch.act_bits = bits;
            arch.weight_bits = bits;
        }
        arch.validate()?;
        Ok(Self {
            arch,
            overshoot: opts.overshoot,
            fps: opts.fps,
            pj_per_bit: opts.energy_pj_per_bit,
            seed: opts.seed,
            boundary: opts.boundary,
        })
    }
}

/// Result of one subcommand: the table for stdout and the JSON document.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub table: String,
    pub json: serde_json::Value,
}

fn to_value<T: Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("report types serialize")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

/// Runs a parsed command line and writes its artifacts.
pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = RunConfig::from_opts(&cli.opts)?;
    let out = run_command(&cli.command, &cfg)?;
    if let Some(p) = &cli.opts.json {
        write_text(p, &(serde_json::to_string_pretty(&out.json)? + "\n"))?;
    }
    Ok(out)
}

pub fn run_command(cmd: &Command, cfg: &RunConfig) -> Result<Outcome> {
    match cmd {
        Command::Convert {
            model,
            output,
            convert_first,
        } => {
            let g = load_model(model)?;
            let opts = ConvertOptions {
                pin_first: !convert_first,
            };
            let c = to_lightweight_with(&g, &opts)?;
            save_model(&c, output)?;
            let r = conversion_report(&g, &c);
            Ok(Outcome {
                table: conversion_table(&r),
                json: to_value(&r),
            })
        }
        Command::Plan { model } => {
            let g = load_model(model)?;
            let plan = partition_with(&g, cfg.arch.weight_buffer_bytes, cfg.overshoot, cfg.arch.bytes_per_weight());
            let violations = check_guidelines(&plan, &g);
            Ok(Outcome {
                table: plan_table(&plan, &violations),
                json: serde_json::json!({ "plan": plan, "guideline_violations": violations }),
            })
        }
        Command::Prune {
            model,
            output,
            budget,
            gammas,
            iterations,
            rescale_first,
            gammas_out,
        } => {
            let g = load_model(model)?;
            let rc = RcnetConfig {
                budget_bytes: budget.unwrap_or(cfg.arch.weight_buffer_bytes),
                overshoot: cfg.overshoot,
                iterations: *iterations,
                rescale_first_k: *rescale_first,
                bytes_per_weight: cfg.arch.bytes_per_weight(),
            };
            let source = gamma_source(gammas.as_deref(), cfg.seed)?;
            let outcome = rcnet_iterate(&g, &rc, &source)?;
            save_model(&outcome.graph, output)?;
            if let Some(p) = gammas_out {
                outcome.gammas.save(p)?;
            }
            Ok(Outcome {
                table: rcnet_table(&outcome.iterations),
                json: serde_json::json!({
                    "budget_bytes": rc.budget_bytes,
                    "overshoot": rc.overshoot,
                    "iterations": outcome.iterations,
                    "final": ModelStats::of(&outcome.graph),
                }),
            })
        }
        Command::Tile {
            model,
            trace,
            trace_layer,
        } => {
            let g = load_model(model)?;
            let (plan, tiles) = execution_plan(&g, &cfg.arch, cfg.boundary);
            let schedules: Vec<PingPongSchedule> = tiles.iter().map(make_schedule).collect();
            if let Some(p) = trace {
                write_text(p, &trace_text(&g, &plan, &tiles, *trace_layer)?)?;
            }
            Ok(Outcome {
                table: tile_table(&tiles),
                json: serde_json::json!({ "plan": plan, "tiles": tiles, "schedules": schedules }),
            })
        }
        Command::Simulate {
            model,
            functional,
            input,
            output,
            dataflow,
            parallel,
        } => {
            let g = load_model(model)?;
            let (plan, tiles) = execution_plan(&g, &cfg.arch, cfg.boundary);
            let data = if *functional || input.is_some() || output.is_some() {
                if cfg.arch.act_bits != 8 || cfg.arch.weight_bits != 8 {
                    return Err(Error::InvalidArgument("functional replay supports 8-bit precision only".into()));
                }
                let x = match input {
                    Some(p) => Tensor::read_raw(std::fs::File::open(p)?)?,
                    None => {
                        use rand::SeedableRng;
                        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
                        Tensor::random(g.input, &mut rng)
                    }
                };
                Some((NetworkWeights::random(&g, cfg.seed), x))
            } else {
                None
            };
            let opts = SimOptions {
                parallel: *parallel,
                dataflow: *dataflow,
            };
            let res = simulate_network(&g, &plan, &tiles, &cfg.arch, data.as_ref().map(|(w, x)| (w, x)), opts)?;
            if let (Some(p), Some(y)) = (output, &res.output) {
                y.write_raw(std::fs::File::create(p)?)?;
            }
            let checksum = res.output.as_ref().map(|y| y.data.iter().map(|&v| v as i64).sum::<i64>());
            let check = match (&data, &res.output) {
                (Some((w, x)), Some(y)) if *functional => Some(check_against_reference(&g, &plan, &tiles, w, x, y, cfg)?),
                _ => None,
            };
            let mut table = perf_table(&res.perf);
            match &check {
                Some(c) if c.rows_checked == 0 => {
                    writeln!(table, "functional: no comparable rows, every output row depends on a tile seam").unwrap()
                }
                Some(c) => writeln!(
                    table,
                    "functional: {} output rows match the untiled reference ({} seam rows skipped)",
                    c.rows_checked, c.seam_rows_skipped
                )
                .unwrap(),
                None => {}
            }
            Ok(Outcome {
                table,
                json: serde_json::json!({
                    "perf": res.perf,
                    "measured_passes": res.measured_passes,
                    "output_shape": res.output.as_ref().map(|y| y.shape),
                    "output_checksum": checksum,
                    "functional_check": check,
                }),
            })
        }
        Command::Report { model, baseline } => {
            let g = load_model(model)?;
            let base_graph = match baseline {
                Some(p) => load_model(p)?,
                None => g.clone(),
            };
            let r = traffic_summary(&g, &base_graph, cfg);
            Ok(Outcome {
                table: traffic_table(&r),
                json: to_value(&r),
            })
        }
        Command::Sweep { model, sizes, output } => {
            let g = load_model(model)?;
            let s = buffer_sweep(&g, &sizes.0, &cfg.arch, cfg.fps);
            if let Some(p) = output {
                write_text(p, &sweep_plot(&s))?;
            }
            Ok(Outcome {
                table: sweep_table(&s),
                json: to_value(&s),
            })
        }
        Command::Pipeline {
            model,
            gammas,
            iterations,
            model_out,
            no_convert,
        } => {
            let g = load_model(model)?;
            let gammas = gammas.as_deref().map(GammaTable::load).transpose()?;
            let settings = PipelineSettings {
                convert: !no_convert,
                iterations: *iterations,
                gammas,
            };
            let (report, final_graph) = full_pipeline(&g, cfg, &settings)?;
            if let Some(p) = model_out {
                save_model(&final_graph, p)?;
            }
            Ok(Outcome {
                table: pipeline_table(&report),
                json: to_value(&report),
            })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FunctionalCheck {
    pub rows_checked: usize,
    pub seam_rows_skipped: usize,
}

/// Compares the tiled output with an untiled run. Rows whose receptive field
/// crosses a replicate-padded seam are skipped.
fn check_against_reference(
    graph: &NetGraph,
    plan: &FusionPlan,
    tiles: &[TilePlan],
    weights: &NetworkWeights,
    input: &Tensor,
    output: &Tensor,
    cfg: &RunConfig,
) -> Result<FunctionalCheck> {
    let reference = reference_network(graph, weights, input, &cfg.arch)?;
    let want = reference.last().expect("non-empty network");
    let taint = seam_taint(graph, plan, tiles);
    let mask = taint.last().expect("non-empty network");
    let mut check = FunctionalCheck {
        rows_checked: 0,
        seam_rows_skipped: 0,
    };
    for (y, &tainted) in mask.iter().enumerate().take(output.height()) {
        if tainted {
            check.seam_rows_skipped += 1;
            continue;
        }
        for c in 0..output.channels() {
            for x in 0..output.width() {
                if output.get(c, y, x) != want.get(c, y, x) {
                    return Err(Error::Validation(format!(
                        "tiled replay differs from the reference at channel {c}, row {y}, column {x}"
                    )));
                }
            }
        }
        check.rows_checked += 1;
    }
    Ok(check)
}

fn gamma_source(path: Option<&Path>, seed: u64) -> Result<GammaSource> {
    Ok(match path {
        Some(p) => GammaSource::Fixed(GammaTable::load(p)?),
        None => GammaSource::Synthetic {
            seed,
            dist: GammaDistribution::Uniform,
        },
    })
}

fn trace_text(graph: &NetGraph, plan: &FusionPlan, tiles: &[TilePlan], layer: usize) -> Result<String> {
    if layer >= graph.len() {
        return Err(Error::InvalidArgument(format!("no layer {layer}")));
    }
    let gi = plan.group_of(layer).expect("plans cover every layer");
    let tp = &tiles[gi];
    // rows of the first tile at this layer's output scale
    let mut rows = tp.tile_rows().first().map_or(0, |r| r.end - r.start);
    for &id in &tp.layer_ids {
        rows /= graph.layer(id).downsample_factor();
        if id == layer {
            break;
        }
    }
    let out = graph.layer(layer).out_shape();
    let spatial = (rows.max(1).min(out.height) * out.width) as usize;
    let mut s = String::from("spatial,channel,bank,word,lane\n");
    for e in address_trace(spatial, out.channels as usize) {
        writeln!(s, "{},{},{},{},{}", e.spatial, e.channel, e.bank, e.word, e.lane).unwrap();
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficSummary {
    pub model: String,
    pub baseline_model: String,
    pub input: TensorShape,
    pub fps: f64,
    pub weight_buffer_bytes: u64,
    pub feature_half_bytes: u64,
    pub groups: usize,
    pub fallback_groups: usize,
    pub baseline: TrafficReport,
    pub fused: TrafficReport,
    pub savings: SavingsReport,
    /// Reduction of the fused feature traffic against the baseline's.
    pub feature_reduction: f64,
    pub baseline_energy: EnergyReport,
    pub fused_energy: EnergyReport,
    pub energy_savings: f64,
}

/// Layer-by-layer traffic of `baseline` against fused traffic of `graph`.
pub fn traffic_summary(graph: &NetGraph, baseline: &NetGraph, cfg: &RunConfig) -> TrafficSummary {
    let (plan, tiles) = execution_plan(graph, &cfg.arch, cfg.boundary);
    let base = layer_by_layer_traffic(baseline, &cfg.arch, cfg.fps);
    let fused = fused_traffic(graph, &plan, &tiles, &cfg.arch, cfg.fps);
    let savings = savings_report(&base, &fused);
    let be = EnergyReport::new(base.total_bandwidth, cfg.pj_per_bit);
    let fe = EnergyReport::new(fused.total_bandwidth, cfg.pj_per_bit);
    TrafficSummary {
        model: graph.name.clone(),
        baseline_model: baseline.name.clone(),
        input: graph.input,
        fps: cfg.fps,
        weight_buffer_bytes: cfg.arch.weight_buffer_bytes,
        feature_half_bytes: cfg.arch.feature_half_bytes,
        groups: plan.groups.len(),
        fallback_groups: tiles.iter().filter(|t| t.fallback).count(),
        feature_reduction: savings.feature,
        energy_savings: if be.mj_per_s > 0.0 {
            1.0 - fe.mj_per_s / be.mj_per_s
        } else {
            0.0
        },
        baseline: base,
        fused,
        savings,
        baseline_energy: be,
        fused_energy: fe,
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineSettings {
    pub convert: bool,
    pub iterations: usize,
    /// Scores for the converted model; seeded scores otherwise.
    pub gammas: Option<GammaTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileSummary {
    pub group: usize,
    pub first_layer: usize,
    pub last_layer: usize,
    pub weight_bytes: u64,
    pub tile_height: u32,
    pub tile_count: u32,
    pub peak_half_bytes: u64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfSummary {
    pub total_macs: u64,
    pub total_cycles: u64,
    pub utilization: f64,
    pub achieved_gops: f64,
    pub peak_gops: f64,
    pub fps: f64,
    pub low_utilization_layers: Vec<usize>,
}

impl From<&PerfReport> for PerfSummary {
    fn from(p: &PerfReport) -> Self {
        Self {
            total_macs: p.total_macs,
            total_cycles: p.total_cycles,
            utilization: p.utilization,
            achieved_gops: p.achieved_gops,
            peak_gops: p.peak_gops,
            fps: p.fps,
            low_utilization_layers: p.layers.iter().filter(|l| l.low_utilization).map(|l| l.layer).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub model: String,
    pub input: TensorShape,
    pub settings: RunConfig,
    pub original: ModelStats,
    pub conversion: Option<ConversionReport>,
    pub rcnet: Vec<IterationReport>,
    pub final_model: ModelStats,
    pub groups: Vec<Vec<usize>>,
    pub guideline_violations: Vec<GuidelineViolation>,
    pub tiles: Vec<TileSummary>,
    /// Final model fused against the original model layer by layer.
    pub traffic: TrafficSummary,
    /// Final model fused against itself layer by layer.
    pub self_feature_reduction: f64,
    pub perf: PerfSummary,
}

/// Runs every stage and returns the consolidated report and final model.
pub fn full_pipeline(graph: &NetGraph, cfg: &RunConfig, settings: &PipelineSettings) -> Result<(PipelineReport, NetGraph)> {
    let converted = if settings.convert {
        to_lightweight_with(graph, &ConvertOptions::default())?
    } else {
        graph.clone()
    };
    let conversion = settings.convert.then(|| conversion_report(graph, &converted));
    let rc = RcnetConfig {
        budget_bytes: cfg.arch.weight_buffer_bytes,
        overshoot: cfg.overshoot,
        iterations: settings.iterations,
        rescale_first_k: 1,
        bytes_per_weight: cfg.arch.bytes_per_weight(),
    };
    let source = match &settings.gammas {
        Some(t) => GammaSource::Fixed(t.clone()),
        None => GammaSource::Synthetic {
            seed: cfg.seed,
            dist: GammaDistribution::Uniform,
        },
    };
    let outcome = rcnet_iterate(&converted, &rc, &source)?;
    let g = outcome.graph;
    let (plan, tiles) = execution_plan(&g, &cfg.arch, cfg.boundary);
    let violations = check_guidelines(&plan, &g);
    let tile_summaries = plan
        .groups
        .iter()
        .zip(&tiles)
        .enumerate()
        .map(|(i, (grp, tp))| TileSummary {
            group: i,
            first_layer: grp.first(),
            last_layer: grp.last(),
            weight_bytes: grp.weight_bytes,
            tile_height: tp.tile_height,
            tile_count: tp.tile_count,
            peak_half_bytes: tp.peak_half_bytes,
            fallback: tp.fallback,
        })
        .collect();
    let traffic = traffic_summary(&g, graph, cfg);
    let own = layer_by_layer_traffic(&g, &cfg.arch, cfg.fps);
    let self_feature_reduction = savings_report(&own, &traffic.fused).feature;
    let perf = simulate_network(&g, &plan, &tiles, &cfg.arch, None, SimOptions::default())?.perf;
    let report = PipelineReport {
        model: graph.name.clone(),
        input: graph.input,
        settings: cfg.clone(),
        original: ModelStats::of(graph),
        conversion,
        rcnet: outcome.iterations,
        final_model: ModelStats::of(&g),
        groups: plan.groups.iter().map(|grp| grp.layer_ids.clone()).collect(),
        guideline_violations: violations,
        tiles: tile_summaries,
        traffic,
        self_feature_reduction,
        perf: PerfSummary::from(&perf),
    };
    Ok((report, g))
}

fn pct(f: f64) -> String {
    format!("{:.1}%", 100.0 * f)
}

fn conversion_table(r: &ConversionReport) -> String {
    let mut s = String::new();
    writeln!(s, "{:<18}{:>16}{:>16}{:>16}", "", "before", "after", "delta").unwrap();
    let rows = [
        ("params", r.before.params, r.after.params, r.params_delta),
        ("MACs", r.before.macs, r.after.macs, r.macs_delta),
        ("OPs", r.before.ops, r.after.ops, r.ops_delta),
        ("feature I/O (B)", r.before.feature_io_bytes, r.after.feature_io_bytes, r.feature_io_delta),
    ];
    for (name, b, a, d) in rows {
        writeln!(s, "{name:<18}{b:>16}{a:>16}{d:>16}").unwrap();
    }
    s
}

fn plan_table(plan: &FusionPlan, violations: &[GuidelineViolation]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "budget {} B, overshoot {}, cap {} B, {} groups",
        plan.budget_bytes,
        plan.overshoot,
        plan.cap_bytes(),
        plan.groups.len()
    )
    .unwrap();
    writeln!(s, "{:>5} {:>7} {:>12} {:>4} {:>10}", "group", "layers", "weights (B)", "ds", "degenerate").unwrap();
    for (i, g) in plan.groups.iter().enumerate() {
        writeln!(
            s,
            "{:>5} {:>7} {:>12} {:>4} {:>10}",
            i,
            format!("{}-{}", g.first(), g.last()),
            g.weight_bytes,
            g.downsample_count,
            if g.degenerate { "yes" } else { "" }
        )
        .unwrap();
    }
    for w in &plan.warnings {
        writeln!(s, "warning: {w}").unwrap();
    }
    for v in violations {
        writeln!(s, "guideline {}: group {}: {}", v.guideline, v.group, v.message).unwrap();
    }
    s
}

fn rcnet_table(iters: &[IterationReport]) -> String {
    let mut s = String::new();
    for it in iters {
        writeln!(
            s,
            "iteration {}: params {} -> {} after pruning -> {} ({} channels removed{})",
            it.iteration,
            it.params_before,
            it.params_after_prune,
            it.params_after,
            it.removed_channels,
            it.rescale_factor.map_or(String::new(), |f| format!(", rescaled x{f:.4}"))
        )
        .unwrap();
        for (i, (b, a)) in it.group_sizes_before.iter().zip(&it.group_sizes_after).enumerate() {
            let ids = &it.groups[i];
            writeln!(
                s,
                "  group {:>3} layers {:>7}: {:>9} -> {:>9} B",
                i,
                format!("{}-{}", ids[0], ids[ids.len() - 1]),
                b,
                a
            )
            .unwrap();
        }
    }
    s
}

fn tile_table(tiles: &[TilePlan]) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{:>5} {:>7} {:>10} {:>6} {:>6} {:>6} {:>12} {:>9}",
        "group", "layers", "frame", "tile_h", "tiles", "align", "peak half B", "fallback"
    )
    .unwrap();
    for t in tiles {
        writeln!(
            s,
            "{:>5} {:>7} {:>10} {:>6} {:>6} {:>6} {:>12} {:>9}",
            t.group_index,
            format!("{}-{}", t.layer_ids[0], t.layer_ids[t.layer_ids.len() - 1]),
            t.frame.to_string(),
            t.tile_height,
            t.tile_count,
            t.align,
            t.peak_half_bytes,
            if t.fallback { "yes" } else { "" }
        )
        .unwrap();
    }
    s
}

fn perf_table(p: &PerfReport) -> String {
    let mut s = String::new();
    writeln!(s, "{:>5} {:>10} {:>14} {:>12} {:>6}", "layer", "kind", "MACs", "cycles", "util").unwrap();
    for l in p.layers.iter().filter(|l| l.cycles > 0) {
        writeln!(
            s,
            "{:>5} {:>10} {:>14} {:>12} {:>6}{}",
            l.layer,
            format!("{:?}", l.kind),
            l.macs,
            l.cycles,
            pct(l.utilization),
            if l.low_utilization { "  low" } else { "" }
        )
        .unwrap();
    }
    writeln!(
        s,
        "total: {} MACs, {} cycles, utilization {}, {:.1} of {:.1} GOPS, {:.2} fps",
        p.total_macs,
        p.total_cycles,
        pct(p.utilization),
        p.achieved_gops,
        p.peak_gops,
        p.fps
    )
    .unwrap();
    s
}

fn traffic_table(r: &TrafficSummary) -> String {
    let mut s = String::new();
    writeln!(
        s,
        "{} ({}) at {} fps, weight buffer {} B, feature half {} B, {} groups ({} fallback)",
        r.model, r.input, r.fps, r.weight_buffer_bytes, r.feature_half_bytes, r.groups, r.fallback_groups
    )
    .unwrap();
    writeln!(s, "{:<28}{:>14}{:>14}{:>10}", "", "baseline", "fused", "saving").unwrap();
    let mbps = |b: f64| format!("{:.1}", b / MB);
    let rows = [
        ("feature MB/s", r.baseline.feature_bandwidth, r.fused.feature_bandwidth, r.savings.feature),
        ("weight MB/s", r.baseline.weight_bandwidth, r.fused.weight_bandwidth, r.savings.weight),
        ("total MB/s", r.baseline.total_bandwidth, r.fused.total_bandwidth, r.savings.total),
    ];
    for (name, b, f, sv) in rows {
        writeln!(s, "{:<28}{:>14}{:>14}{:>10}", name, mbps(b), mbps(f), pct(sv)).unwrap();
    }
    writeln!(
        s,
        "{:<28}{:>14.1}{:>14.1}{:>10}",
        format!("DRAM energy mJ/s @{} pJ/b", r.baseline_energy.pj_per_bit),
        r.baseline_energy.mj_per_s,
        r.fused_energy.mj_per_s,
        pct(r.energy_savings)
    )
    .unwrap();
    writeln!(s, "baseline model: {}", r.baseline_model).unwrap();
    s
}

fn sweep_table(r: &SweepReport) -> String {
    let mut s = String::new();
    writeln!(s, "{:>14} {:>7} {:>14} {:>14}", "buffer B", "groups", "planned MB/s", "best MB/s").unwrap();
    for p in &r.points {
        writeln!(
            s,
            "{:>14} {:>7} {:>14.2} {:>14.2}",
            p.weight_buffer,
            p.groups,
            p.raw_bandwidth / MB,
            p.bandwidth / MB
        )
        .unwrap();
    }
    if let Some(sat) = r.saturation {
        writeln!(s, "saturated from {sat} B").unwrap();
    }
    s
}

/// Two whitespace-separated columns: buffer bytes and bandwidth in MB/s.
pub fn sweep_plot(r: &SweepReport) -> String {
    let mut s = String::from("# weight_buffer_bytes bandwidth_mb_per_s\n");
    for p in &r.points {
        writeln!(s, "{} {:.6}", p.weight_buffer, p.bandwidth / MB).unwrap();
    }
    s
}

fn pipeline_table(r: &PipelineReport) -> String {
    let mut s = String::new();
    writeln!(s, "model {} ({})", r.model, r.input).unwrap();
    writeln!(s, "params: original {}, final {}", r.original.params, r.final_model.params).unwrap();
    if let Some(c) = &r.conversion {
        writeln!(s, "after conversion: {} params", c.after.params).unwrap();
    }
    s.push_str(&rcnet_table(&r.rcnet));
    writeln!(
        s,
        "execution: {} groups, {} tiles, {} fallback groups",
        r.groups.len(),
        r.tiles.iter().map(|t| t.tile_count as u64).sum::<u64>(),
        r.tiles.iter().filter(|t| t.fallback).count()
    )
    .unwrap();
    s.push_str(&traffic_table(&r.traffic));
    writeln!(s, "feature reduction vs own layer-by-layer: {}", pct(r.self_feature_reduction)).unwrap();
    writeln!(
        s,
        "perf: {} cycles/frame, {:.2} fps, utilization {}",
        r.perf.total_cycles,
        r.perf.fps,
        pct(r.perf.utilization)
    )
    .unwrap();
    s
}
