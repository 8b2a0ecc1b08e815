//! `vlgrasp`: train, evaluate, check and render the grasping policy.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use vlgrasp::check::{full_model_check, CheckSetup};
use vlgrasp::checkpoint::Checkpoint;
use vlgrasp::config::RunConfig;
use vlgrasp::eval::{
    evaluate, make_suite, replay_run, CheckpointPolicy, EvalConfig, EvalReport, FirstBaseline, GraspPolicy,
    GroundingBaseline, RandomBaseline, Suite, SuiteSplit,
};
use vlgrasp::sim::render::{render_scene, save_png, Overlay};
use vlgrasp::sim::scene::{Layout, Scene};
use vlgrasp::train::{final_success_rate, train};

#[derive(Parser)]
#[command(name = "vlgrasp", version, about = "Language-conditioned grasping in clutter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the policy through the curriculum.
    Train {
        /// TOML run configuration; defaults apply to anything missing.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written with the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a baseline on a suite.
    Eval {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, conflicts_with = "baseline", required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        /// Run configuration for baselines (encoder, detection, proposals).
        #[arg(long, conflicts_with = "checkpoint")]
        config: Option<PathBuf>,
        /// Overrides the alignment noise of the encoder.
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long, default_value_t = 15)]
        runs: usize,
        #[arg(long, default_value_t = 8)]
        max_attempts: usize,
        /// Evaluation seed; defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every loss in every fusion mode at micro scale.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one analytic gradient entry; the check must then fail.
        #[arg(long)]
        inject_fault: bool,
        /// Write the per-check results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a scene, a suite case, or a replayed evaluation run to PNG.
    Render {
        /// A scene JSON file.
        #[arg(long, conflicts_with_all = ["suite", "report"])]
        scene: Option<PathBuf>,
        #[arg(long, requires = "case")]
        suite: Option<PathBuf>,
        #[arg(long)]
        case: Option<String>,
        /// Evaluation report whose trace is replayed frame by frame.
        #[arg(long, requires = "suite")]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate the seen, unseen-object and unseen-template suites.
    MakeSuite {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        objects: usize,
        #[arg(long, value_enum, default_value_t = LayoutArg::Clutter)]
        layout: LayoutArg,
        /// Cases per suite; defaults to 10 seen, 5 and 5 unseen.
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Grounding,
    Random,
    First,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Scattered,
    Clutter,
}

impl From<LayoutArg> for Layout {
    fn from(l: LayoutArg) -> Self {
        match l {
            LayoutArg::Scattered => Layout::Scattered,
            LayoutArg::Clutter => Layout::Clutter,
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// The error chain, leaving out causes their wrapper already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut last = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !last.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            config,
            seed,
            out,
            resume,
        } => cmd_train(config.as_deref(), seed, &out, resume.as_deref()),
        Command::Eval {
            suite,
            checkpoint,
            baseline,
            config,
            sigma,
            runs,
            max_attempts,
            seed,
            out,
        } => {
            let suite = Suite::load(&suite)?;
            let opts = EvalOpts {
                sigma,
                runs,
                max_attempts,
                seed,
            };
            match (checkpoint, baseline) {
                (Some(ck), _) => cmd_eval_checkpoint(&suite, &ck, opts, &out),
                (None, Some(b)) => cmd_eval_baseline(&suite, b, config.as_deref(), opts, &out),
                (None, None) => unreachable!("clap requires one of them"),
            }
        }
        Command::Gradcheck { seed, inject_fault, out } => cmd_gradcheck(seed, inject_fault, out.as_deref()),
        Command::Render {
            scene,
            suite,
            case,
            report,
            run,
            out,
        } => {
            std::fs::create_dir_all(&out)?;
            match (scene, suite) {
                (Some(s), _) => render_scene_file(&s, &out),
                (None, Some(s)) => render_case(&s, case.as_deref().unwrap_or_default(), report.as_deref(), run, &out),
                (None, None) => {
                    eprintln!("error: render needs --scene or --suite with --case");
                    Ok(ExitCode::from(1))
                }
            }
        }
        Command::MakeSuite {
            seed,
            objects,
            layout,
            cases,
            out,
        } => cmd_make_suite(seed, objects, layout.into(), cases, &out),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => Ok(RunConfig::load(p)?),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_train(config: Option<&Path>, seed: Option<u64>, out: &Path, resume: Option<&Path>) -> Result<ExitCode> {
    let resume = resume.map(Checkpoint::load).transpose()?;
    let mut cfg = match (config, &resume) {
        (None, Some(ck)) => ck.config.clone(),
        _ => load_config(config)?,
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = train(cfg.clone(), out, resume.as_ref())?;
    let tail = cfg.train.greedy_final_episodes.max(1);
    let summary = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "episodes": outcome.records.len(),
        "final_success_rate": final_success_rate(&outcome.records, tail),
        "checkpoint": outcome.final_checkpoint,
    });
    println!("{summary}");
    Ok(ExitCode::SUCCESS)
}

#[derive(Clone, Copy)]
struct EvalOpts {
    sigma: Option<f64>,
    runs: usize,
    max_attempts: usize,
    seed: Option<u64>,
}

fn eval_config(cfg: &RunConfig, opts: EvalOpts) -> EvalConfig {
    EvalConfig {
        max_attempts: opts.max_attempts,
        runs_per_case: opts.runs,
        detection: cfg.detection,
        proposals: cfg.proposals,
        seed: opts.seed.unwrap_or(cfg.seed),
    }
}

fn cmd_eval_checkpoint(suite: &Suite, path: &Path, opts: EvalOpts, out: &Path) -> Result<ExitCode> {
    let mut ck = Checkpoint::load(path)?;
    if let Some(s) = opts.sigma {
        ck.config.encoder.sigma_align = s;
        ck.config_hash = ck.config.hash();
    }
    let mut policy = CheckpointPolicy::from_checkpoint(&ck)?;
    finish_eval(&mut policy, suite, &ck.config, opts, out)
}

fn cmd_eval_baseline(suite: &Suite, which: Baseline, config: Option<&Path>, opts: EvalOpts, out: &Path) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(s) = opts.sigma {
        cfg.encoder.sigma_align = s;
    }
    match which {
        Baseline::Grounding => finish_eval(&mut GroundingBaseline::new(cfg.encoder), suite, &cfg, opts, out),
        Baseline::Random => finish_eval(&mut RandomBaseline, suite, &cfg, opts, out),
        Baseline::First => finish_eval(&mut FirstBaseline, suite, &cfg, opts, out),
    }
}

fn finish_eval<P: GraspPolicy>(policy: &mut P, suite: &Suite, cfg: &RunConfig, opts: EvalOpts, out: &Path) -> Result<ExitCode> {
    if opts.runs == 0 || opts.max_attempts == 0 {
        eprintln!("error: --runs and --max-attempts must be positive");
        return Ok(ExitCode::from(1));
    }
    let ecfg = eval_config(cfg, opts);
    let report = evaluate(policy, suite, &ecfg, &cfg.hash(), cfg.encoder.sigma_align)?;
    std::fs::create_dir_all(out)?;
    report.save(&out.join("report.json"), &out.join("report.csv"))?;
    let a = &report.aggregate;
    println!(
        "{}",
        json!({
            "policy": report.policy,
            "suite": report.suite,
            "config_hash": report.config_hash,
            "seed": report.seed,
            "success_rate": a.success_rate,
            "motion_number": a.motion_number,
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, inject_fault: bool, out: Option<&Path>) -> Result<ExitCode> {
    let setup = CheckSetup {
        seed,
        inject_fault,
        ..CheckSetup::default()
    };
    let results = full_model_check(&setup)?;
    for r in &results {
        println!(
            "{} {:?}/{:?}{} max_rel_error={:.3e} worst={} entries={}",
            if r.passed { "ok  " } else { "FAIL" },
            r.mode,
            r.term,
            if r.literal_form { " (literal)" } else { "" },
            r.max_rel_error,
            r.worst_param,
            r.entries
        );
    }
    if let Some(p) = out {
        let doc = json!({ "seed": seed, "inject_fault": inject_fault, "results": results });
        std::fs::write(p, serde_json::to_string_pretty(&doc)?)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        eprintln!("error: {failed} of {} gradient checks failed", results.len());
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn render_scene_file(path: &Path, out: &Path) -> Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let scene: Scene = serde_json::from_str(&text).context("parsing scene")?;
    let img = render_scene(
        &scene,
        &Overlay {
            mark_targets: true,
            ..Overlay::default()
        },
    );
    save_png(&img, &out.join("scene.png"))?;
    Ok(ExitCode::SUCCESS)
}

fn render_case(suite: &Path, case_id: &str, report: Option<&Path>, run: usize, out: &Path) -> Result<ExitCode> {
    let suite = Suite::load(suite)?;
    let Some(case) = suite.cases.iter().find(|c| c.id == case_id) else {
        bail!("suite {} has no case {case_id:?}", suite.name);
    };
    let Some(path) = report else {
        let img = render_scene(
            &case.scene,
            &Overlay {
                mark_targets: true,
                ..Overlay::default()
            },
        );
        save_png(&img, &out.join(format!("{case_id}.png")))?;
        return Ok(ExitCode::SUCCESS);
    };
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(path)?).context("parsing report")?;
    let Some(trace) = report.traces.iter().find(|t| t.case == case.id && t.run == run) else {
        bail!("report has no trace for case {case_id:?} run {run}");
    };
    let frames = replay_run(case, trace, &report.eval)?;
    let mut files = Vec::new();
    for (i, f) in frames.iter().enumerate() {
        let weights = f.step.box_attention.as_ref().map(|w| {
            let top = w.iter().cloned().fold(0.0, f64::max);
            w.iter().map(|x| if top > 0.0 { x / top } else { 0.0 }).collect::<Vec<_>>()
        });
        let img = render_scene(
            &f.scene,
            &Overlay {
                boxes: &f.observation.boxes,
                box_weights: weights.as_deref(),
                grasp: f.step.grasp.as_ref(),
                mark_targets: true,
            },
        );
        let name = format!("{case_id}_run{run:02}_step{i:02}.png");
        save_png(&img, &out.join(&name))?;
        files.push(name);
    }
    let index = json!({
        "case": case_id,
        "run": run,
        "config_hash": report.config_hash,
        "seed": trace.seed,
        "success": trace.success,
        "frames": files,
    });
    std::fs::write(out.join("frames.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_make_suite(seed: u64, objects: usize, layout: Layout, cases: Option<usize>, out: &Path) -> Result<ExitCode> {
    if objects == 0 || cases == Some(0) {
        eprintln!("error: --objects and --cases must be positive");
        return Ok(ExitCode::from(1));
    }
    std::fs::create_dir_all(out)?;
    for split in [SuiteSplit::SeenObjects, SuiteSplit::UnseenObjects, SuiteSplit::UnseenTemplates] {
        let n = cases.unwrap_or(split.default_cases());
        let suite = make_suite(split, n, objects, layout, seed)?;
        suite.save(&out.join(format!("{}.json", split.name())))?;
    }
    println!("{}", json!({ "seed": seed, "objects": objects, "layout": layout, "out": out }));
    Ok(ExitCode::SUCCESS)
}
