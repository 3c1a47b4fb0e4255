//! Subcommand implementations.

use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;
use serde_json::json;
use treecast::checkpoint::{self, Checkpoint};
use treecast::config::{DataSource, ExperimentConfig, TreeConfig};
use treecast::eval::{
    bench_scaling, evaluate_split, quality, write_synthetic_dataset, SyntheticSpec, KL_DIRECTION,
    KL_EPSILON,
};
use treecast::frm::FireRiskMap;
use treecast::ingest::{parse_events, ParseOptions, Split};
use treecast::model::ConditioningContext;
use treecast::sample::{run_sampler, SamplerKind, SamplerOptions, TransitionMode};
use treecast::schedule::{subsample_levels, InferenceStepping, NoiseSchedule};
use treecast::storage::{build_event_dataset, write_dataset, write_frame, Dataset};
use treecast::train::{train_loop, TrainOutputs};
use treecast::treeplan::{build_plan, build_plan_with_branching, count_calls, TreePlan};
use treecast::{Error, Grid};

use crate::render::render_frames;
use crate::{
    BenchArgs, BuildDataArgs, Cli, CliResult, Command, EvaluateArgs, PlanTreeArgs, SampleArgs,
    SamplingArgs, TrainArgs, VERSION,
};

pub fn run(cli: Cli, overrides: &[(String, String)]) -> CliResult<()> {
    let mut config = ExperimentConfig::resolve(cli.config.as_deref(), overrides)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match cli.command {
        Command::BuildData(args) => build_data(config, args),
        Command::PlanTree(args) => plan_tree(&config, args),
        Command::Train(args) => train(&config, args),
        Command::Sample(args) => sample(&config, args),
        Command::Evaluate(args) => evaluate(&config, args),
        Command::Bench(args) => bench(&config, args),
        Command::Render(args) => render_frames(&args.input, args.target.as_deref(), &args.out, args.scale),
    }
}

/// Provenance record written next to every command's outputs.
#[derive(Serialize)]
struct RunManifest<'a, T: Serialize> {
    command: &'a str,
    version: &'a str,
    config_hash: String,
    seed: u64,
    config: &'a ExperimentConfig,
    result: T,
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_run_manifest(
    dir: &Path,
    command: &str,
    config: &ExperimentConfig,
    result: impl Serialize,
) -> CliResult<()> {
    write_json(
        &dir.join("run.json"),
        &RunManifest {
            command,
            version: VERSION,
            config_hash: config.hash(),
            seed: config.seed,
            config,
            result,
        },
    )
}

fn build_data(mut config: ExperimentConfig, args: BuildDataArgs) -> CliResult<()> {
    if let Some(csv) = args.csv {
        config.data.source = DataSource::Csv;
        config.data.csv = Some(csv);
    }
    if args.synthetic {
        config.data.source = DataSource::Synthetic;
    }
    let out = args.out.unwrap_or_else(|| config.paths.dataset_dir.clone());
    let data = &config.data;
    let (manifest, index) = match data.source {
        DataSource::Synthetic => {
            let spec = SyntheticSpec {
                num_segments: data.synthetic.num_segments,
                horizons: data.horizons,
                resolution: (data.resolution[0], data.resolution[1]),
                sigma_px: data.synthetic.sigma_px,
                max_speed_px: data.synthetic.max_speed_px,
                ratios: data.split,
                bbox: data.bbox,
                seed: config.seed,
            };
            let built = write_synthetic_dataset(&out, &spec)?;
            (built.manifest, built.index)
        }
        DataSource::Csv => {
            let path = data.csv.clone().ok_or_else(|| {
                Error::InvalidArgument("no CSV given: pass --csv <path> or set data.csv".into())
            })?;
            let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let options = ParseOptions {
                columns: data.columns.clone(),
                min_confidence: data.min_confidence,
            };
            let in_context = |e: Error| match e {
                Error::Io { .. } => e,
                other => Error::Data(format!("{}: {other}", path.display())),
            };
            let parsed = parse_events(file, &data.bbox, &options).map_err(in_context)?;
            info!(
                "{}: {} events over {} days from {} ({} rows skipped)",
                path.display(),
                parsed.num_events(),
                parsed.num_days(),
                parsed.start_date,
                parsed.skipped_rows
            );
            let (manifest, maps, index) = build_event_dataset(&parsed, data).map_err(in_context)?;
            write_dataset(&out, &manifest, &maps, &index)?;
            (manifest, index)
        }
    };
    let counts: Vec<(String, usize)> = index
        .splits
        .iter()
        .map(|s| (s.split.name().to_string(), s.segments.len()))
        .collect();
    println!(
        "wrote {} days ({}x{}) to {}; normalization constant {:.6e}",
        manifest.num_days,
        manifest.resolution[0],
        manifest.resolution[1],
        out.display(),
        manifest.normalization_constant
    );
    for (name, n) in &counts {
        println!("  {name:<5} {n} segments");
    }
    write_run_manifest(
        &out,
        "build-data",
        &config,
        json!({
            "num_days": manifest.num_days,
            "boundaries": index.boundaries,
            "segments": counts,
            "normalization_constant": manifest.normalization_constant,
        }),
    )
}

fn plan_tree(config: &ExperimentConfig, args: PlanTreeArgs) -> CliResult<()> {
    let horizons = args.horizons.unwrap_or(config.data.horizons);
    let steps = args.steps.unwrap_or(config.diffusion.d_train);
    let plan = match (&args.branching, args.depth) {
        (Some(b), _) => build_plan_with_branching(horizons, b.clone(), steps)?,
        (None, Some(depth)) => build_plan(horizons, depth, steps)?,
        (None, None) => config.tree.plan(horizons, steps)?,
    };
    let report = count_calls(&plan);
    let doc = json!({
        "report": report,
        "nodes_per_level": plan.nodes_per_level(),
        "realized_shifts": plan.realized_shifts(),
        "leaves": plan.leaves().iter().map(|n| n.horizon).collect::<Vec<_>>(),
    });
    if let Some(out) = &args.out {
        write_json(out, &doc)?;
    }
    if args.json {
        println!("{}", serde_json::to_string_pretty(&doc)?);
        return Ok(());
    }
    print!("{}", plan_table(&plan));
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a (non-uniform)".to_string(), |r| format!("{r:.4}"))
}

fn plan_table(plan: &TreePlan) -> String {
    let r = count_calls(plan);
    let mut out = format!(
        "horizons {}   depth L = {}   steps D = {}\nbranching {:?}\nsegments  {:?}\n\n{:<6} {:>6} {:>6} {:>8}\n",
        r.horizons, r.depth, r.steps, r.branching, r.segment_steps, "level", "nodes", "steps", "calls"
    );
    for (l, (nodes, d)) in plan.levels.iter().zip(&plan.segment_steps).enumerate() {
        out += &format!("{l:<6} {:>6} {d:>6} {:>8}\n", nodes.len(), nodes.len() * d);
    }
    out += &format!(
        "\ncalls (tree)            {}\ncalls (independent)     {}\ncalls (fully shared)    {}\n",
        r.calls_nt, r.calls_traditional, r.calls_shared
    );
    out += &format!(
        "R exact                 {:.4}\nR closed form           {}\nR explicit              {}\nR approx L(1-1/N)       {}\n",
        r.reduction_exact,
        fmt_opt(r.reduction_closed_form),
        fmt_opt(r.reduction_explicit),
        fmt_opt(r.reduction_approx)
    );
    out
}

fn train(config: &ExperimentConfig, args: TrainArgs) -> CliResult<()> {
    let data_dir = args.data.unwrap_or_else(|| config.paths.dataset_dir.clone());
    let out = args.out.unwrap_or_else(|| config.paths.checkpoint_dir.clone());
    let dataset = Dataset::load(&data_dir)?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    fs::write(out.join("config.toml"), config.to_toml()).map_err(|e| Error::io(&out, e))?;
    let outputs = TrainOutputs {
        checkpoint_dir: Some(out.clone()),
        metrics_log: Some(out.join("metrics.jsonl")),
        validation_log: Some(out.join("validation.jsonl")),
        resume_from: args.resume,
    };
    let start = Instant::now();
    let report = train_loop(&dataset, config, &outputs)?;
    let elapsed = start.elapsed().as_secs_f64();
    let last = report.records.last();
    println!(
        "trained steps {}..{} in {elapsed:.1} s; final loss {}",
        report.start_step,
        report.total_steps,
        last.map_or("n/a".into(), |r| format!("{:.5}", r.total))
    );
    if let Some(best) = &report.best {
        println!("best validation RMSE {:.5} at step {}", best.rmse, best.step);
    }
    for c in &report.checkpoints {
        println!("checkpoint {}", c.display());
    }
    write_run_manifest(
        &out,
        "train",
        config,
        json!({
            "dataset": data_dir,
            "start_step": report.start_step,
            "total_steps": report.total_steps,
            "final_loss": last,
            "best": report.best,
            "validations": report.validations,
            "checkpoints": report.checkpoints,
            "wall_time_s": elapsed,
        }),
    )
}

/// Checkpoint, dataset and sampling setup shared by sample/evaluate/bench.
struct SamplingSetup {
    checkpoint: Checkpoint,
    checkpoint_dir: PathBuf,
    dataset: Option<Dataset>,
    schedule: NoiseSchedule,
    stepping: InferenceStepping,
    tree: TreeConfig,
    plan: TreePlan,
    mode: TransitionMode,
}

fn sampling_setup(config: &ExperimentConfig, args: &SamplingArgs, need_data: bool) -> CliResult<SamplingSetup> {
    let checkpoint = checkpoint::load(&args.checkpoint)?;
    let m = &checkpoint.manifest;
    let data_dir = args.data.clone().unwrap_or_else(|| config.paths.dataset_dir.clone());
    let dataset = if need_data || data_dir.join("manifest.json").exists() {
        Some(Dataset::load(&data_dir)?)
    } else {
        None
    };
    let model = checkpoint.state.config();
    if let Some(d) = &dataset {
        if d.resolution() != model.resolution {
            return Err(Error::Data(format!(
                "checkpoint {} was trained at {:?} but dataset {} is {:?}",
                args.checkpoint.display(),
                model.resolution,
                data_dir.display(),
                d.resolution()
            )));
        }
        if d.horizons() != model.horizons {
            return Err(Error::Data(format!(
                "checkpoint forecasts {} horizons but dataset {} has {}",
                model.horizons,
                data_dir.display(),
                d.horizons()
            )));
        }
    }
    let schedule = m.schedule_params.build()?;
    let d_test = args.d_test.unwrap_or(m.d_test);
    let stepping = subsample_levels(schedule.steps(), d_test)?;
    let mut tree = m.tree.clone();
    if let Some(depth) = args.depth {
        tree = TreeConfig {
            depth,
            branching: None,
        };
    }
    let plan = tree.plan(model.horizons, d_test)?;
    let mode = if args.stochastic {
        TransitionMode::Stochastic
    } else {
        TransitionMode::Deterministic
    };
    Ok(SamplingSetup {
        checkpoint,
        checkpoint_dir: args.checkpoint.clone(),
        dataset,
        schedule,
        stepping,
        tree,
        plan,
        mode,
    })
}

fn parse_samplers(names: &[String]) -> CliResult<Vec<SamplerKind>> {
    names
        .iter()
        .map(|n| n.parse::<SamplerKind>())
        .collect::<Result<_, _>>()
}

fn sample(config: &ExperimentConfig, args: SampleArgs) -> CliResult<()> {
    let setup = sampling_setup(config, &args.common, true)?;
    let dataset = setup.dataset.as_ref().expect("dataset required");
    let kind: SamplerKind = args.sampler.parse()?;
    let num_days = dataset.frames.len();
    if args.day >= num_days {
        return Err(Error::InvalidArgument(format!(
            "day {} outside the dataset's {num_days} days",
            args.day
        )));
    }
    let ctx = ConditioningContext::new(dataset.frames[args.day].clone())?;
    let start = Instant::now();
    let run = run_sampler(
        kind,
        &setup.plan,
        &setup.stepping,
        &setup.schedule,
        &ctx,
        &setup.checkpoint.state,
        config.seed,
        SamplerOptions {
            mode: setup.mode,
            parallel: true,
        },
    )?;
    let wall_time_ms = start.elapsed().as_secs_f64() * 1e3;
    let out = args.out.unwrap_or_else(|| {
        config
            .paths
            .output_dir
            .join(format!("sample-{}-day{}", kind.name(), args.day))
    });
    let constant = dataset.manifest.normalization_constant;
    let mut files = Vec::new();
    for (t, grid) in run.outputs.iter().enumerate() {
        let map = FireRiskMap {
            grid: grid.clone(),
            day_index: args.day + 1 + t,
            normalization_constant: constant,
        };
        files.push(write_frame(&out, &format!("h_{t:02}"), &map, &dataset.manifest.bbox)?);
    }
    let horizons = run.outputs.len();
    let truth_available = args.day + horizons < num_days;
    let metrics = if truth_available {
        let targets: Vec<Grid> = (0..horizons).map(|t| dataset.frames[args.day + 1 + t].clone()).collect();
        Some(quality(&run.outputs, &targets)?)
    } else {
        None
    };
    let manifest = json!({
        "sampler": kind,
        "plan": {
            "depth": setup.plan.depth,
            "branching": setup.plan.branching,
            "segment_steps": setup.plan.segment_steps,
        },
        "levels": run.levels,
        "mode": setup.mode,
        "call_counter": run.call_counter,
        "expected_calls": kind.expected_calls(&setup.plan, setup.stepping.len()),
        "wall_time_ms": wall_time_ms,
        "seed": run.seed,
        "day": args.day,
        "checkpoint": setup.checkpoint_dir,
        "outputs": files,
        "metrics": metrics,
        "kl": KL_DIRECTION,
    });
    write_json(&out.join("sample.json"), &manifest)?;
    println!(
        "{} sampler: {} denoiser calls, {wall_time_ms:.1} ms, {horizons} maps in {}",
        kind.name(),
        run.call_counter,
        out.display()
    );
    if let Some(m) = metrics {
        println!("vs. ground truth: rmse {:.5} mae {:.5} kl {:.5}", m.rmse, m.mae, m.kl);
    }
    write_run_manifest(&out, "sample", config, manifest)
}

fn evaluate(config: &ExperimentConfig, args: EvaluateArgs) -> CliResult<()> {
    let setup = sampling_setup(config, &args.common, true)?;
    let dataset = setup.dataset.as_ref().expect("dataset required");
    let split: Split = args.split.parse()?;
    let kinds = parse_samplers(&args.samplers)?;
    let mut results = Vec::new();
    println!(
        "{:<15} {:>10} {:>10} {:>10} {:>7}   ({} on {} split)",
        "sampler", "rmse", "mae", "kl", "calls", KL_DIRECTION, split.name()
    );
    for kind in kinds {
        let eval = evaluate_split(
            &setup.checkpoint.state,
            dataset,
            split,
            kind,
            &setup.plan,
            &setup.stepping,
            &setup.schedule,
            setup.mode,
            config.seed,
            args.max_segments,
        )?;
        println!(
            "{:<15} {:>10.5} {:>10.5} {:>10.5} {:>7}",
            kind.name(),
            eval.metrics.rmse,
            eval.metrics.mae,
            eval.metrics.kl,
            eval.calls_per_segment
        );
        results.push(eval);
    }
    let report = json!({
        "checkpoint": setup.checkpoint_dir,
        "split": split,
        "d_test": setup.stepping.len(),
        "tree": setup.tree,
        "kl_direction": KL_DIRECTION,
        "kl_epsilon": KL_EPSILON,
        "results": results,
    });
    let out = args
        .out
        .unwrap_or_else(|| config.paths.output_dir.join("evaluate.json"));
    write_json(&out, &report)?;
    write_run_manifest(
        out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")),
        "evaluate",
        config,
        report,
    )
}

fn bench(config: &ExperimentConfig, args: BenchArgs) -> CliResult<()> {
    if args.common.stochastic {
        return Err(Error::InvalidArgument(
            "bench times deterministic transitions only; drop --stochastic".into(),
        ));
    }
    let setup = sampling_setup(config, &args.common, false)?;
    let kinds = parse_samplers(&args.samplers)?;
    let (h, w) = setup.checkpoint.state.config().resolution;
    let cond = match &setup.dataset {
        Some(d) => {
            let segs = d.segments(Split::Test);
            segs.first()
                .map(|s| d.condition(s).clone())
                .unwrap_or_else(|| d.frames[0].clone())
        }
        None => Grid::zeros(h, w),
    };
    let ctx = ConditioningContext::new(cond)?;
    let table = bench_scaling(
        &setup.checkpoint.state,
        &ctx,
        &setup.schedule,
        &setup.tree,
        &kinds,
        &args.steps,
        args.repeats,
        config.seed,
    )?;
    print!("{}", table.to_text());
    let out = args.out.unwrap_or_else(|| config.paths.output_dir.join("bench.json"));
    write_json(&out, &table)?;
    write_run_manifest(
        out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")),
        "bench",
        config,
        json!({
            "ordering_holds": table.ordering_holds(),
            "min_r_squared": table.min_r_squared(),
            "table": table,
        }),
    )
}
