//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::Value;

use vlgrasp::check::{full_model_check, CheckSetup, TOLERANCE};
use vlgrasp::encoder::{AlignedEncoder, EncoderConfig};
use vlgrasp::eval::{evaluate, make_suite, EvalConfig, GroundingBaseline, SuiteSplit};
use vlgrasp::grasp::{box_grasp_mapping, grounding_prior, MappingMatrix, DEFAULT_THRESHOLD};
use vlgrasp::nn::{AttentionConfig, Graph, Segments};
use vlgrasp::policy::{
    kl_divergence, kl_guided_loss, prepare_inputs, FusionMode, FusionPolicy, KlDirection, PolicyConfig, PolicyInputs,
};
use vlgrasp::rng::rng_from;
use vlgrasp::sac::{actor_objective, compute_targets, Transition};
use vlgrasp::sim::episode::{compute_reward, GraspOutcome};
use vlgrasp::sim::{
    sample_instruction, sample_scene, Episode, EpisodeConfig, KeywordTable, Layout, ObjectLibrary, ObjectSpec,
    PlacementConfig, Split, Stage, TemplateSet, Workspace,
};
use vlgrasp::{Params, Tensor};

type Check = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn vlgrasp(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vlgrasp"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "`vlgrasp {}` exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn read_json(p: &Path) -> Result<Value, String> {
    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
    serde_json::from_str(&text).map_err(|e| e.to_string())
}

fn metrics(dir: &Path) -> Result<Vec<Value>, String> {
    let text = std::fs::read_to_string(dir.join("metrics.jsonl")).map_err(|e| e.to_string())?;
    text.lines().map(|l| serde_json::from_str(l).map_err(|e| e.to_string())).collect()
}

fn success_rate(report_dir: &Path) -> Result<f64, String> {
    read_json(&report_dir.join("report.json"))?["aggregate"]["success_rate"]
        .as_f64()
        .ok_or_else(|| "report without success rate".to_string())
}

fn gradient_integrity(_: &Path) -> Check {
    let start = Instant::now();
    let results = full_model_check(&CheckSetup::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{:?}/{:?} {:.2e}", r.mode, r.term, r.max_rel_error))
        .collect();
    ensure(failed.is_empty(), format!("failing checks: {}", failed.join(", ")))?;
    ensure(results.len() == 15, format!("{} checks instead of 15", results.len()))?;
    ensure(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!("15 checks, worst relative error {worst:.2e} < {TOLERANCE:e}, {elapsed:.1?}"))
}

fn formula_suite(_: &Path) -> Check {
    let start = Instant::now();
    let dist_max = Workspace::default().dist_max();
    let outcome = |success, is_target, distance| GraspOutcome {
        success,
        object: success.then_some(1),
        is_target,
        distance,
        probability: 1.0,
    };
    let r = |o: &GraspOutcome, s| compute_reward(o, s, dist_max);
    ensure(r(&outcome(true, true, 0.0), Stage::I) == 2.0, "stage I target reward")?;
    ensure(r(&outcome(true, false, 0.2), Stage::I) == -1.0, "stage I non-target reward")?;
    ensure(r(&outcome(true, true, 0.0), Stage::II) == 2.0, "stage II target reward")?;
    ensure((r(&outcome(true, false, dist_max), Stage::II) + 1.0).abs() < 1e-12, "reward at dist_max")?;
    ensure((r(&outcome(true, false, dist_max / 2.0), Stage::II) + 0.5).abs() < 1e-12, "reward at dist_max/2")?;
    ensure(r(&outcome(false, false, 0.0), Stage::II) == -1.0, "failed grasp reward")?;

    let mut rng = rng_from(2024);
    for _ in 0..100 {
        let (n, k) = (rng.random_range(1..10), rng.random_range(1..30));
        let pts = |rng: &mut vlgrasp::rng::Rng, m: usize| -> Vec<[f64; 3]> {
            (0..m)
                .map(|_| [rng.random_range(0.0..0.3), rng.random_range(0.0..0.3), rng.random_range(0.0..0.06)])
                .collect()
        };
        let (c, p) = (pts(&mut rng, n), pts(&mut rng, k));
        let m = box_grasp_mapping(&c, &p, DEFAULT_THRESHOLD).map_err(|e| e.to_string())?;
        for (i, ci) in c.iter().enumerate() {
            for (j, pj) in p.iter().enumerate() {
                let d = (ci[0] - pj[0]).hypot(ci[1] - pj[1]).hypot(ci[2] - pj[2]);
                ensure(m.get(i, j) == (d < DEFAULT_THRESHOLD), "mapping differs from brute force")?;
            }
        }
        let probs: Vec<f64> = {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|x| x / t).collect()
        };
        let prior = grounding_prior(&probs, &m).map_err(|e| e.to_string())?;
        ensure((prior.iter().sum::<f64>() - 1.0).abs() < 1e-12, "prior does not sum to one")?;
    }
    let empty = MappingMatrix {
        boxes: 2,
        grasps: 3,
        threshold: DEFAULT_THRESHOLD,
        entries: vec![0; 6],
    };
    let prior = grounding_prior(&[0.3, 0.7], &empty).map_err(|e| e.to_string())?;
    ensure((prior.iter().sum::<f64>() - 1.0).abs() < 1e-12, "prior of empty mapping")?;

    let kl = kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).map_err(|e| e.to_string())?;
    ensure((kl - 0.130812).abs() < 1e-6, format!("KL {kl}"))?;
    let params = Params::new();
    let mut g = Graph::new(&params);
    let lp = g.constant(Tensor::column(vec![0.75f64.ln(), 0.25f64.ln()]));
    let kl_var = kl_guided_loss(&mut g, lp, &[0.5, 0.5], &Segments::single(2), KlDirection::PolicyToPrior)
        .map_err(|e| e.to_string())?;
    ensure((g.value(kl_var).item() - 0.130812).abs() < 1e-6, "graph KL")?;

    let half = 0.5f64;
    let actor = actor_objective(&[half, half], &[half.ln(), half.ln()], &[0.0, 0.0], 1.0);
    ensure((actor + 0.693147).abs() < 1e-6, format!("actor loss {actor}"))?;

    let cfg = micro_policy(FusionMode::CrossAttention, 16);
    let mut params = Params::new();
    let policy = FusionPolicy::new(cfg, &mut params, &mut rng).map_err(|e| e.to_string())?;
    let state = Arc::new(synthetic_inputs(&mut rng, 3, 4, &cfg));
    let terminal = Transition::new(state, 1, -0.37, None, true).map_err(|e| e.to_string())?;
    let y = compute_targets(&params, &policy, &[&terminal], 0.99).map_err(|e| e.to_string())?;
    ensure(y == vec![-0.37], format!("terminal target {y:?}"))?;

    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("took {elapsed:?}"))?;
    Ok(format!("rewards, 100 mappings, priors, KL {kl:.6}, actor {actor:.6}, terminal y=r, {elapsed:.1?}"))
}

fn micro_policy(mode: FusionMode, width: usize) -> PolicyConfig {
    PolicyConfig {
        attention: AttentionConfig {
            width,
            heads: 4,
            layers: 1,
            scale: true,
            ffn_mult: 2,
        },
        mode,
        hidden: width,
        head_hidden: width,
        ..PolicyConfig::default()
    }
}

fn synthetic_inputs(rng: &mut vlgrasp::rng::Rng, boxes: usize, grasps: usize, cfg: &PolicyConfig) -> PolicyInputs {
    let d = cfg.width();
    let w = vlgrasp::grasp::grasp_input_width(cfg.bands);
    let rows: Vec<Vec<f64>> = (0..boxes).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let g: Vec<Vec<f64>> = (0..grasps).map(|_| (0..w).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    PolicyInputs {
        box_feats: Tensor::from_rows(&rows).unwrap(),
        lang: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        centers: (0..boxes).map(|_| [rng.random_range(0.0..0.8), rng.random_range(0.0..0.8), 0.02]).collect(),
        grasp_inputs: Tensor::from_rows(&g).unwrap(),
        prior: vec![1.0 / grasps as f64; grasps],
        box_probs: vec![1.0 / boxes as f64; boxes],
    }
}

fn permutation_properties(_: &Path) -> Check {
    let width = 32;
    let lib = ObjectLibrary::builtin();
    let table = KeywordTable::builtin();
    let encoder = AlignedEncoder::new(
        &lib,
        &table,
        EncoderConfig {
            width,
            ..EncoderConfig::default()
        },
    );
    let pool: Vec<&ObjectSpec> = lib.split(Split::Train);
    let mut worst = 0.0f64;
    for mode in [FusionMode::CrossAttention, FusionMode::PositionAsKey, FusionMode::Film] {
        let cfg = micro_policy(mode, width);
        let mut rng = rng_from(3);
        let mut params = Params::new();
        let policy = FusionPolicy::new(cfg, &mut params, &mut rng).map_err(|e| e.to_string())?;
        let mut checked = 0;
        let mut seed = 0u64;
        while checked < 100 {
            seed += 1;
            let mut srng = rng_from(seed);
            let ins = sample_instruction(&mut srng, &table, TemplateSet::Training, Some(&pool)).map_err(|e| e.to_string())?;
            let placement = if seed % 2 == 0 { PlacementConfig::clutter() } else { PlacementConfig::scattered() };
            let n = 2 + (seed % 8) as usize;
            let scene = sample_scene(&mut srng, n, &pool, Workspace::default(), &placement, Some(&ins), seed)
                .map_err(|e| e.to_string())?;
            let ep = Episode::new(scene, ins, EpisodeConfig::for_stage(Stage::II), seed);
            let Ok(inputs) = prepare_inputs(&ep.observe(), &encoder, &cfg) else {
                continue;
            };
            checked += 1;
            let mut gp: Vec<usize> = (0..inputs.grasps()).collect();
            gp.shuffle(&mut rng);
            let mut bp: Vec<usize> = (0..inputs.boxes()).collect();
            bp.shuffle(&mut rng);
            let shuffled = PolicyInputs {
                box_feats: inputs.box_feats.select_rows(&bp),
                lang: inputs.lang.clone(),
                centers: bp.iter().map(|&i| inputs.centers[i]).collect(),
                grasp_inputs: inputs.grasp_inputs.select_rows(&gp),
                prior: gp.iter().map(|&i| inputs.prior[i]).collect(),
                box_probs: bp.iter().map(|&i| inputs.box_probs[i]).collect(),
            };
            let a = policy.evaluate(&params, &inputs).map_err(|e| e.to_string())?;
            let b = policy.evaluate(&params, &shuffled).map_err(|e| e.to_string())?;
            for (j, &i) in gp.iter().enumerate() {
                for (x, y) in [(a.probs[i], b.probs[j]), (a.q1[i], b.q1[j]), (a.q2[i], b.q2[j])] {
                    worst = worst.max((x - y).abs());
                }
            }
        }
    }
    ensure(worst <= 1e-9, format!("largest deviation {worst:.2e}"))?;
    Ok(format!("300 observations over 3 fusion modes, largest deviation {worst:.1e}"))
}

fn stage_one_convergence(work: &Path) -> Check {
    let start = Instant::now();
    let out = work.join("stage1");
    let cfg = configs().join("stage1_small.toml");
    vlgrasp(&["train", "--config", path(&cfg), "--out", path(&out)])?;
    let elapsed = start.elapsed();
    let records = metrics(&out)?;
    ensure(records.len() == 200, format!("{} episodes logged", records.len()))?;
    let tail = &records[150..];
    ensure(tail.iter().all(|r| r["greedy"] == true), "final episodes were not greedy")?;
    let rate = tail.iter().filter(|r| r["success"] == true).count() as f64 / 50.0;
    ensure(rate >= 0.9, format!("final greedy success {rate:.2}"))?;
    ensure(elapsed < Duration::from_secs(600), format!("took {elapsed:?}"))?;
    Ok(format!("greedy success over final 50 episodes {rate:.2} >= 0.90, {elapsed:.1?}"))
}

fn curriculum_ordering(work: &Path) -> Check {
    let start = Instant::now();
    let cfg = configs().join("scaled.toml");
    let run = work.join("scaled");
    vlgrasp(&["train", "--config", path(&cfg), "--out", path(&run)])?;
    let suites = work.join("suites");
    vlgrasp(&["make-suite", "--seed", "1", "--objects", "8", "--layout", "clutter", "--out", path(&suites)])?;
    let seen = suites.join("seen.json");
    let ck = run.join("checkpoint.json");
    let common = ["--runs", "15", "--max-attempts", "8", "--seed", "0"];
    let eval = |name: &str, selector: &[&str]| -> Result<f64, String> {
        let out = work.join(name);
        let mut args = vec!["eval", "--suite", path(&seen), "--out", path(&out)];
        args.extend_from_slice(selector);
        args.extend_from_slice(&common);
        vlgrasp(&args)?;
        success_rate(&out)
    };
    let policy = eval("eval_policy", &["--checkpoint", path(&ck)])?;
    let grounding = eval("eval_grounding", &["--baseline", "grounding", "--config", path(&cfg)])?;
    let random = eval("eval_random", &["--baseline", "random", "--config", path(&cfg)])?;
    let elapsed = start.elapsed();
    let summary = format!("policy {policy:.1}%, grounding {grounding:.1}%, random {random:.1}%, {elapsed:.1?}");
    ensure(policy >= random + 20.0, format!("policy not 20 points above random: {summary}"))?;
    ensure(policy >= grounding, format!("policy below grounding: {summary}"))?;
    ensure(elapsed < Duration::from_secs(3600), format!("took {elapsed:?}"))?;
    Ok(summary)
}

fn guided_window(work: &Path) -> Check {
    // the scaled run of the previous criterion guides for its first 300 episodes
    let records = metrics(&work.join("scaled"))?;
    ensure(records.len() == 900, format!("{} episodes in the scaled run", records.len()))?;
    let mut before = 0;
    for r in &records {
        let e = r["episode"].as_u64().unwrap_or(u64::MAX);
        let kl = &r["losses"]["kl"];
        if e < 300 {
            if r["updates"].as_u64().unwrap_or(0) > 0 {
                ensure(kl.as_f64().is_some_and(|k| k != 0.0), format!("episode {e}: KL {kl}"))?;
                before += 1;
            }
        } else {
            ensure(kl.is_null(), format!("episode {e} logged KL {kl}"))?;
        }
    }
    ensure(before > 200, format!("only {before} guided episodes with updates"))?;

    let base = std::fs::read_to_string(configs().join("scaled.toml")).map_err(|e| e.to_string())?;
    let short = base.replace("episodes = 300", "episodes = 40").replace("episodes = 600", "episodes = 20");
    let variants = [
        ("disabled", short.replace("window = 300", "window = 300\nenabled = false")),
        ("no_window", short.replace("window = 300", "window = 0")),
        ("guided", short.clone()),
    ];
    let mut logs = Vec::new();
    for (name, text) in &variants {
        let cfg = work.join(format!("{name}.toml"));
        std::fs::write(&cfg, text).map_err(|e| e.to_string())?;
        let out = work.join(format!("run_{name}"));
        vlgrasp(&["train", "--config", path(&cfg), "--out", path(&out)])?;
        let log = std::fs::read(out.join("metrics.jsonl")).map_err(|e| e.to_string())?;
        let params = read_json(&out.join("checkpoint.json"))?["params"].clone();
        logs.push((log, params));
    }
    ensure(logs[0] == logs[1], "disabled guidance differs from a zero-length window")?;
    ensure(logs[0] != logs[2], "guidance had no effect")?;
    Ok(format!("KL logged and nonzero in {before} episodes before 300, absent after; disabled run bit-identical"))
}

fn determinism(work: &Path) -> Check {
    let base = std::fs::read_to_string(configs().join("scaled.toml")).map_err(|e| e.to_string())?;
    let text = base.replace("episodes = 300", "episodes = 30").replace("episodes = 600", "episodes = 20");
    let cfg = work.join("det.toml");
    std::fs::write(&cfg, text).map_err(|e| e.to_string())?;
    let mut logs = Vec::new();
    for i in 0..2 {
        let out = work.join(format!("det_{i}"));
        vlgrasp(&["train", "--config", path(&cfg), "--seed", "5", "--out", path(&out)])?;
        logs.push(std::fs::read(out.join("metrics.jsonl")).map_err(|e| e.to_string())?);
    }
    let lines = logs[0].iter().filter(|&&b| b == b'\n').count();
    ensure(lines == 50, format!("{lines} metric lines"))?;
    ensure(logs[0] == logs[1], "metrics logs differ")?;

    let suites = work.join("det_suites");
    vlgrasp(&["make-suite", "--seed", "3", "--objects", "6", "--out", path(&suites)])?;
    let ck = work.join("det_0").join("checkpoint.json");
    let before = std::fs::read(&ck).map_err(|e| e.to_string())?;
    let mut reports = Vec::new();
    for i in 0..2 {
        let out = work.join(format!("det_eval_{i}"));
        let suite = suites.join("seen.json");
        vlgrasp(&["eval", "--suite", path(&suite), "--checkpoint", path(&ck), "--runs", "5", "--out", path(&out)])?;
        reports.push((
            std::fs::read(out.join("report.json")).map_err(|e| e.to_string())?,
            std::fs::read(out.join("report.csv")).map_err(|e| e.to_string())?,
        ));
    }
    ensure(reports[0] == reports[1], "evaluation reports differ")?;
    ensure(std::fs::read(&ck).map_err(|e| e.to_string())? == before, "evaluation modified the checkpoint")?;
    Ok("two 50-episode trainings give identical metrics; two evaluations give identical reports".into())
}

fn grounding_noise(_: &Path) -> Check {
    let suite = make_suite(SuiteSplit::SeenObjects, 1000, 8, Layout::Scattered, 17).map_err(|e| e.to_string())?;
    let cfg = EvalConfig {
        runs_per_case: 1,
        max_attempts: 8,
        ..EvalConfig::default()
    };
    let mut rates = Vec::new();
    for sigma in [0.0, 0.3, 0.6] {
        let enc = EncoderConfig {
            width: 64,
            sigma_align: sigma,
            ..EncoderConfig::default()
        };
        let report = evaluate(&mut GroundingBaseline::new(enc), &suite, &cfg, "", sigma).map_err(|e| e.to_string())?;
        rates.push(report.aggregate.success_rate);
    }
    let summary = format!("success {:.1}% / {:.1}% / {:.1}% at sigma 0 / 0.3 / 0.6", rates[0], rates[1], rates[2]);
    ensure(rates[0] >= rates[1] && rates[1] >= rates[2], format!("not monotone: {summary}"))?;
    Ok(summary)
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let criteria: [(&str, fn(&Path) -> Check); 8] = [
        ("gradient integrity", gradient_integrity),
        ("formula unit suite", formula_suite),
        ("permutation properties", permutation_properties),
        ("stage I convergence", stage_one_convergence),
        ("curriculum and comparative ordering", curriculum_ordering),
        ("guided-loss window", guided_window),
        ("determinism", determinism),
        ("grounding-noise monotonicity", grounding_noise),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check(work.path()) {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
