//! Evaluation protocol: test suites, rollouts, baselines and reports.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::encoder::{ground_probabilities, AlignedEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::grasp::{map_boxes_to_grasps, GraspPose, ProposalConfig, DEFAULT_THRESHOLD};
use crate::policy::{prepare_inputs, select_action, ActionMode, FusionPolicy};
use crate::rng::{child_rng, derive};
use crate::sim::{
    sample_instruction, sample_scene, DetectionConfig, Episode, EpisodeConfig, Instruction, KeywordTable, Layout,
    ObjectLibrary, ObjectSpec, Observation, Scene, Split, Stage, TemplateSet, Workspace,
};
use crate::train::placement_for;
use crate::Params;

pub const SUITE_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteSplit {
    SeenObjects,
    UnseenObjects,
    UnseenTemplates,
}

impl SuiteSplit {
    pub const ALL: [SuiteSplit; 3] = [SuiteSplit::SeenObjects, SuiteSplit::UnseenObjects, SuiteSplit::UnseenTemplates];

    pub fn default_cases(self) -> usize {
        match self {
            SuiteSplit::SeenObjects => 10,
            SuiteSplit::UnseenObjects | SuiteSplit::UnseenTemplates => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SuiteSplit::SeenObjects => "seen",
            SuiteSplit::UnseenObjects => "unseen_objects",
            SuiteSplit::UnseenTemplates => "unseen_templates",
        }
    }

    fn object_split(self) -> Split {
        match self {
            SuiteSplit::UnseenObjects => Split::Unseen,
            _ => Split::Train,
        }
    }

    fn templates(self) -> TemplateSet {
        match self {
            SuiteSplit::UnseenTemplates => TemplateSet::Unseen,
            _ => TemplateSet::Training,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub split: SuiteSplit,
    /// Generator seed; the scene below is what it produced.
    pub seed: u64,
    pub layout: Layout,
    pub instruction: Instruction,
    pub scene: Scene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suite {
    pub version: u32,
    pub name: String,
    pub seed: u64,
    pub cases: Vec<TestCase>,
}

impl Suite {
    pub fn load(path: &Path) -> Result<Self> {
        let read = || -> Result<Self> { Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?) };
        let s = read().map_err(|e| e.context(format!("loading suite {}", path.display())))?;
        if s.version != SUITE_VERSION {
            return Err(Error::Config(format!("unsupported suite version {}", s.version)));
        }
        if s.cases.is_empty() {
            return Err(Error::Config(format!("suite `{}` has no cases", s.name)));
        }
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Generates `n` cases of `split` with `objects` objects each.
pub fn make_suite(split: SuiteSplit, n: usize, objects: usize, layout: Layout, seed: u64) -> Result<Suite> {
    let library = ObjectLibrary::builtin();
    let table = KeywordTable::builtin();
    let pool: Vec<&ObjectSpec> = library.split(split.object_split());
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let case_seed = derive(seed, split.name(), i as u64);
        let mut rng = child_rng(case_seed, "case", 0);
        let instruction = sample_instruction(&mut rng, &table, split.templates(), Some(&pool))?;
        let scene = sample_scene(
            &mut rng,
            objects,
            &pool,
            Workspace::default(),
            &placement_for(layout),
            Some(&instruction),
            case_seed,
        )?;
        cases.push(TestCase {
            id: format!("{}_{i:02}", split.name()),
            split,
            seed: case_seed,
            layout,
            instruction,
            scene,
        });
    }
    Ok(Suite {
        version: SUITE_VERSION,
        name: split.name().to_string(),
        seed,
        cases,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub max_attempts: usize,
    pub runs_per_case: usize,
    pub detection: DetectionConfig,
    pub proposals: ProposalConfig,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_attempts: 8,
            runs_per_case: 15,
            detection: DetectionConfig::default(),
            proposals: ProposalConfig::default(),
            seed: 0,
        }
    }
}

/// One action choice.
#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub action: usize,
    /// Per-box attention (max over heads and grasps), when the policy has one.
    pub box_attention: Option<Vec<f64>>,
}

pub trait GraspPolicy {
    fn name(&self) -> String;
    /// `None` when the observation offers nothing this policy can act on.
    fn decide<R: Rng + ?Sized>(&mut self, obs: &Observation, rng: &mut R) -> Result<Option<Decision>>;
}

/// Argmax-similarity box, then a uniform grasp among those mapped to it,
/// or among all grasps when none is.
pub fn baseline_grounding<R: Rng + ?Sized>(obs: &Observation, encoder: &AlignedEncoder, threshold: f64, rng: &mut R) -> Result<usize> {
    if obs.grasps.is_empty() {
        return Err(Error::NoGrasps);
    }
    let feats = encoder.encode_boxes(&obs.boxes, obs.noise_seed);
    let lang = encoder.encode_text(&obs.instruction)?;
    let probs = ground_probabilities(&feats, &lang, encoder.config.temperature)?;
    let mut best = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = i;
        }
    }
    let mapping = map_boxes_to_grasps(&obs.boxes, &obs.grasps, threshold)?;
    let mapped = mapping.grasps_of(best);
    Ok(if mapped.is_empty() {
        rng.random_range(0..obs.grasps.len())
    } else {
        mapped[rng.random_range(0..mapped.len())]
    })
}

pub fn baseline_random<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Result<usize> {
    if k == 0 {
        return Err(Error::NoGrasps);
    }
    Ok(rng.random_range(0..k))
}

pub struct GroundingBaseline {
    pub encoder: AlignedEncoder,
    pub threshold: f64,
}

impl GroundingBaseline {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder: AlignedEncoder::new(&ObjectLibrary::builtin(), &KeywordTable::builtin(), encoder),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl GraspPolicy for GroundingBaseline {
    fn name(&self) -> String {
        "grounding".into()
    }

    fn decide<R: Rng + ?Sized>(&mut self, obs: &Observation, rng: &mut R) -> Result<Option<Decision>> {
        if obs.grasps.is_empty() || obs.boxes.is_empty() {
            return Ok(None);
        }
        let action = baseline_grounding(obs, &self.encoder, self.threshold, rng)?;
        Ok(Some(Decision {
            action,
            box_attention: None,
        }))
    }
}

pub struct RandomBaseline;

impl GraspPolicy for RandomBaseline {
    fn name(&self) -> String {
        "random".into()
    }

    fn decide<R: Rng + ?Sized>(&mut self, obs: &Observation, rng: &mut R) -> Result<Option<Decision>> {
        if obs.grasps.is_empty() {
            return Ok(None);
        }
        Ok(Some(Decision {
            action: baseline_random(obs.grasps.len(), rng)?,
            box_attention: None,
        }))
    }
}

/// Always the first (highest-quality) proposal.
pub struct FirstBaseline;

impl GraspPolicy for FirstBaseline {
    fn name(&self) -> String {
        "first".into()
    }

    fn decide<R: Rng + ?Sized>(&mut self, obs: &Observation, _rng: &mut R) -> Result<Option<Decision>> {
        Ok((!obs.grasps.is_empty()).then_some(Decision {
            action: 0,
            box_attention: None,
        }))
    }
}

/// Greedy trained policy.
pub struct CheckpointPolicy {
    pub policy: FusionPolicy,
    pub params: Params,
    pub encoder: AlignedEncoder,
}

impl CheckpointPolicy {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let (policy, params) = ck.restore_policy()?;
        Ok(Self {
            policy,
            params,
            encoder: AlignedEncoder::new(&ObjectLibrary::builtin(), &KeywordTable::builtin(), ck.config.encoder),
        })
    }
}

impl GraspPolicy for CheckpointPolicy {
    fn name(&self) -> String {
        "checkpoint".into()
    }

    fn decide<R: Rng + ?Sized>(&mut self, obs: &Observation, rng: &mut R) -> Result<Option<Decision>> {
        let inputs = match prepare_inputs(obs, &self.encoder, &self.policy.config) {
            Ok(i) => i,
            Err(Error::NoBoxes | Error::NoGrasps) => return Ok(None),
            Err(e) => return Err(e),
        };
        let ev = self.policy.evaluate(&self.params, &inputs)?;
        Ok(Some(Decision {
            action: select_action(&ev.probs, ActionMode::Greedy, rng)?,
            box_attention: Some(ev.box_attention),
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub attempt: usize,
    pub boxes: usize,
    pub grasps: usize,
    /// Absent when the attempt was spent without a grasp.
    pub action: Option<usize>,
    pub grasp: Option<GraspPose>,
    pub grasped: Option<u32>,
    pub success: bool,
    pub is_target: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_attention: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub case: String,
    pub run: usize,
    pub seed: u64,
    pub success: bool,
    /// Attempts used, present only on success.
    pub motions: Option<usize>,
    pub steps: Vec<StepTrace>,
}

pub fn run_seed(case: &TestCase, eval_seed: u64, run: usize) -> u64 {
    derive(derive(case.seed, "eval", eval_seed), "run", run as u64)
}

fn episode_for(case: &TestCase, cfg: &EvalConfig, seed: u64) -> Episode {
    let ep_cfg = EpisodeConfig {
        stage: Stage::II,
        attempt_limit: cfg.max_attempts,
        detection: cfg.detection,
        proposals: cfg.proposals,
    };
    Episode::new(case.scene.clone(), case.instruction.clone(), ep_cfg, seed)
}

/// One greedy rollout of `case`.
pub fn run_case<P: GraspPolicy + ?Sized>(policy: &mut P, case: &TestCase, cfg: &EvalConfig, run: usize) -> Result<RunTrace> {
    let seed = run_seed(case, cfg.seed, run);
    let mut episode = episode_for(case, cfg, seed);
    let mut rng = child_rng(seed, "policy", 0);
    let mut steps = Vec::new();
    let mut obs = episode.observe();
    while !episode.done {
        let attempt = episode.attempts;
        let decision = policy.decide(&obs, &mut rng)?;
        let (boxes, grasps) = (obs.boxes.len(), obs.grasps.len());
        match decision {
            None => {
                steps.push(StepTrace {
                    attempt,
                    boxes,
                    grasps,
                    action: None,
                    grasp: None,
                    grasped: None,
                    success: false,
                    is_target: false,
                    box_attention: None,
                });
                obs = episode.skip_attempt()?;
            }
            Some(d) => {
                let grasp = *obs
                    .grasps
                    .get(d.action)
                    .ok_or_else(|| Error::Usage(format!("policy chose grasp {} of {}", d.action, grasps)))?;
                let step = episode.step(&grasp)?;
                steps.push(StepTrace {
                    attempt,
                    boxes,
                    grasps,
                    action: Some(d.action),
                    grasp: Some(grasp),
                    grasped: if step.outcome.success { step.outcome.object } else { None },
                    success: step.outcome.success,
                    is_target: step.outcome.is_target,
                    box_attention: d.box_attention,
                });
                obs = step.observation;
            }
        }
    }
    Ok(RunTrace {
        case: case.id.clone(),
        run,
        seed,
        success: episode.success,
        motions: episode.success.then_some(episode.attempts),
        steps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub successes: usize,
    /// Percent.
    pub success_rate: f64,
    /// Mean attempts over successful runs; absent when there are none.
    pub motion_number: Option<f64>,
}

impl Aggregate {
    pub fn from_outcomes(outcomes: &[Option<usize>]) -> Self {
        let motions: Vec<usize> = outcomes.iter().flatten().copied().collect();
        let runs = outcomes.len();
        Self {
            runs,
            successes: motions.len(),
            success_rate: if runs == 0 { 0.0 } else { 100.0 * motions.len() as f64 / runs as f64 },
            motion_number: (!motions.is_empty()).then(|| motions.iter().sum::<usize>() as f64 / motions.len() as f64),
        }
    }

    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a RunTrace>) -> Self {
        let outcomes: Vec<Option<usize>> = traces.into_iter().map(|t| t.motions).collect();
        Self::from_outcomes(&outcomes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSummary {
    pub case: String,
    pub split: SuiteSplit,
    #[serde(flatten)]
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub policy: String,
    pub suite: String,
    pub config_hash: String,
    pub seed: u64,
    pub eval: EvalConfig,
    pub sigma_align: f64,
    pub aggregate: Aggregate,
    pub cases: Vec<CaseSummary>,
    pub traces: Vec<RunTrace>,
}

impl EvalReport {
    /// Case and overall aggregates rebuilt from the stored traces.
    pub fn recompute(&self, suite: &Suite) -> (Aggregate, Vec<CaseSummary>) {
        summarize(suite, &self.traces)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,split,runs,successes,success_rate,motion_number\n");
        let fmt = |m: Option<f64>| m.map(|v| format!("{v:.4}")).unwrap_or_default();
        for c in &self.cases {
            let a = &c.aggregate;
            let _ = writeln!(
                s,
                "{},{},{},{},{:.2},{}",
                c.case,
                c.split.name(),
                a.runs,
                a.successes,
                a.success_rate,
                fmt(a.motion_number)
            );
        }
        let a = &self.aggregate;
        let _ = writeln!(
            s,
            "all,{},{},{},{:.2},{}",
            self.suite,
            a.runs,
            a.successes,
            a.success_rate,
            fmt(a.motion_number)
        );
        s
    }

    pub fn save(&self, json: &Path, csv: &Path) -> Result<()> {
        std::fs::write(json, serde_json::to_string_pretty(self)?)?;
        std::fs::write(csv, self.to_csv())?;
        Ok(())
    }
}

fn summarize(suite: &Suite, traces: &[RunTrace]) -> (Aggregate, Vec<CaseSummary>) {
    let cases = suite
        .cases
        .iter()
        .map(|c| CaseSummary {
            case: c.id.clone(),
            split: c.split,
            aggregate: Aggregate::from_traces(traces.iter().filter(|t| t.case == c.id)),
        })
        .collect();
    (Aggregate::from_traces(traces), cases)
}

/// `runs_per_case` rollouts of every case.
pub fn evaluate<P: GraspPolicy + ?Sized>(
    policy: &mut P,
    suite: &Suite,
    cfg: &EvalConfig,
    config_hash: &str,
    sigma_align: f64,
) -> Result<EvalReport> {
    if suite.cases.is_empty() {
        return Err(Error::Empty("evaluation suite"));
    }
    let mut traces = Vec::with_capacity(suite.cases.len() * cfg.runs_per_case);
    for case in &suite.cases {
        for run in 0..cfg.runs_per_case {
            traces.push(run_case(policy, case, cfg, run).map_err(|e| e.context(format!("case {} run {run}", case.id)))?);
        }
    }
    let (aggregate, cases) = summarize(suite, &traces);
    Ok(EvalReport {
        version: REPORT_VERSION,
        policy: policy.name(),
        suite: suite.name.clone(),
        config_hash: config_hash.to_string(),
        seed: cfg.seed,
        eval: *cfg,
        sigma_align,
        aggregate,
        cases,
        traces,
    })
}

/// One frame of a replayed run: the scene and observation before the attempt.
#[derive(Debug, Clone)]
pub struct Frame {
    pub scene: Scene,
    pub observation: Observation,
    pub step: StepTrace,
}

/// Re-executes a stored run step by step.
pub fn replay_run(case: &TestCase, trace: &RunTrace, cfg: &EvalConfig) -> Result<Vec<Frame>> {
    let mut episode = episode_for(case, cfg, trace.seed);
    let mut frames = Vec::new();
    let mut obs = episode.observe();
    for st in &trace.steps {
        frames.push(Frame {
            scene: episode.scene.clone(),
            observation: obs.clone(),
            step: st.clone(),
        });
        obs = match st.grasp {
            Some(g) => episode.step(&g)?.observation,
            None => episode.skip_attempt()?,
        };
    }
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Scripted<F>(F);

    impl<F: FnMut(&Observation) -> Option<usize>> GraspPolicy for Scripted<F> {
        fn name(&self) -> String {
            "scripted".into()
        }

        fn decide<R: Rng + ?Sized>(&mut self, obs: &Observation, _rng: &mut R) -> Result<Option<Decision>> {
            Ok((self.0)(obs).map(|action| Decision {
                action,
                box_attention: None,
            }))
        }
    }

    fn noiseless() -> EvalConfig {
        EvalConfig {
            proposals: ProposalConfig::noiseless(),
            ..EvalConfig::default()
        }
    }

    /// Highest-quality grasp whose box is dominated by a target.
    fn oracle(case: &TestCase) -> impl FnMut(&Observation) -> Option<usize> + '_ {
        move |obs| {
            let targets: Vec<usize> = obs
                .boxes
                .iter()
                .enumerate()
                .filter(|(_, b)| case.scene.targets.contains(&b.dominant))
                .map(|(i, _)| i)
                .collect();
            let m = map_boxes_to_grasps(&obs.boxes, &obs.grasps, DEFAULT_THRESHOLD).ok()?;
            targets.iter().flat_map(|&i| m.grasps_of(i)).min()
        }
    }

    #[test]
    fn suites_respect_splits() {
        let lib = ObjectLibrary::builtin();
        let seen = make_suite(SuiteSplit::SeenObjects, 10, 8, Layout::Clutter, 1).unwrap();
        assert_eq!(seen.cases.len(), 10);
        let unseen = make_suite(SuiteSplit::UnseenObjects, 5, 6, Layout::Clutter, 1).unwrap();
        for c in &unseen.cases {
            for o in &c.scene.objects {
                assert_eq!(lib.get(&o.spec.id).unwrap().split, Split::Unseen);
            }
        }
        let table = KeywordTable::builtin();
        let templ = make_suite(SuiteSplit::UnseenTemplates, 5, 6, Layout::Clutter, 1).unwrap();
        for c in &templ.cases {
            assert!(!table.templates.contains(&c.instruction.template));
        }
        assert_eq!(seen, make_suite(SuiteSplit::SeenObjects, 10, 8, Layout::Clutter, 1).unwrap());
    }

    #[test]
    fn always_failing_policy_uses_every_attempt() {
        let suite = make_suite(SuiteSplit::SeenObjects, 1, 5, Layout::Scattered, 3).unwrap();
        let mut p = Scripted(|_: &Observation| None);
        let t = run_case(&mut p, &suite.cases[0], &EvalConfig::default(), 0).unwrap();
        assert!(!t.success && t.motions.is_none());
        assert_eq!(t.steps.len(), 8);
    }

    #[test]
    fn target_first_policy_succeeds_in_one_motion_mostly() {
        let suite = make_suite(SuiteSplit::SeenObjects, 4, 4, Layout::Scattered, 5).unwrap();
        let cfg = noiseless();
        let mut ones = 0;
        for case in &suite.cases {
            let mut p = Scripted(oracle(case));
            let t = run_case(&mut p, case, &cfg, 0).unwrap();
            if t.success && t.motions == Some(1) {
                assert_eq!(t.steps.len(), 1);
                ones += 1;
            }
        }
        assert!(ones >= 2, "{ones}");
    }

    #[test]
    fn aggregates_hand_values() {
        let mut outcomes: Vec<Option<usize>> = [1, 2, 2, 3, 3, 4, 4, 5, 6].iter().map(|&m| Some(m)).collect();
        outcomes.extend([None; 6]);
        let a = Aggregate::from_outcomes(&outcomes);
        assert_eq!(a.success_rate, 60.0);
        assert!((a.motion_number.unwrap() - 30.0 / 9.0).abs() < 1e-12);
        let all = Aggregate::from_outcomes(&[Some(1); 15]);
        assert_eq!((all.success_rate, all.motion_number), (100.0, Some(1.0)));
        let none = Aggregate::from_outcomes(&[None; 15]);
        assert_eq!(none.motion_number, None);
    }

    #[test]
    fn evaluation_is_deterministic_and_recomputable() {
        let suite = make_suite(SuiteSplit::SeenObjects, 2, 5, Layout::Clutter, 7).unwrap();
        let cfg = EvalConfig {
            runs_per_case: 3,
            ..EvalConfig::default()
        };
        let a = evaluate(&mut RandomBaseline, &suite, &cfg, "h", 0.3).unwrap();
        let b = evaluate(&mut RandomBaseline, &suite, &cfg, "h", 0.3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.recompute(&suite), (a.aggregate.clone(), a.cases.clone()));
        assert!(a.to_csv().lines().count() == 4);
        for t in &a.traces {
            let frames = replay_run(&suite.cases[0..].iter().find(|c| c.id == t.case).unwrap().clone(), t, &cfg).unwrap();
            assert_eq!(frames.len(), t.steps.len());
        }
    }

    #[test]
    fn random_baseline_uniform() {
        let mut rng = crate::rng::rng_from(2);
        assert_eq!(baseline_random(1, &mut rng).unwrap(), 0);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            counts[baseline_random(5, &mut rng).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.2).abs() < 0.02);
        }
        assert!(baseline_random(0, &mut rng).is_err());
    }

    #[test]
    fn grounding_picks_target_without_noise() {
        let enc = AlignedEncoder::new(
            &ObjectLibrary::builtin(),
            &KeywordTable::builtin(),
            EncoderConfig {
                sigma_align: 0.0,
                ..EncoderConfig::default()
            },
        );
        let suite = make_suite(SuiteSplit::SeenObjects, 10, 6, Layout::Scattered, 11).unwrap();
        let cfg = noiseless();
        let mut rng = crate::rng::rng_from(0);
        for case in &suite.cases {
            let ep = episode_for(case, &cfg, 1);
            let obs = ep.observe();
            let a = baseline_grounding(&obs, &enc, DEFAULT_THRESHOLD, &mut rng).unwrap();
            let m = map_boxes_to_grasps(&obs.boxes, &obs.grasps, DEFAULT_THRESHOLD).unwrap();
            let boxes: Vec<usize> = (0..obs.boxes.len()).filter(|&i| m.get(i, a)).collect();
            assert!(
                boxes.iter().any(|&i| case.scene.targets.contains(&obs.boxes[i].dominant)),
                "{}",
                case.id
            );
        }
    }
}
