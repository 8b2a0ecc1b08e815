//! Two-stage curriculum: scattered scenes first, then clutter.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, StageConfig};
use crate::encoder::AlignedEncoder;
use crate::error::{Error, Result};
use crate::policy::{prepare_inputs, select_action, ActionMode, FusionPolicy, PolicyInputs};
use crate::rng::{child_rng, derive};
use crate::sac::{Learner, LossReport, ReplayBuffer, Transition};
use crate::sim::{
    sample_instruction, sample_scene, Episode, EpisodeConfig, KeywordTable, Layout, Observation, ObjectLibrary,
    ObjectSpec, PlacementConfig, Split, Stage, TemplateSet, Workspace,
};
use crate::Params;

pub fn placement_for(layout: Layout) -> PlacementConfig {
    match layout {
        Layout::Scattered => PlacementConfig::scattered(),
        Layout::Clutter => PlacementConfig::clutter(),
    }
}

/// Mean losses over the updates made during one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub critic: f64,
    pub actor: f64,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
}

impl LossSummary {
    fn mean(reports: &[LossReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let kls: Vec<f64> = reports.iter().filter_map(|r| r.kl).collect();
        Some(Self {
            critic: reports.iter().map(|r| r.critic).sum::<f64>() / n,
            actor: reports.iter().map(|r| r.actor).sum::<f64>() / n,
            alpha: reports.iter().map(|r| r.alpha_loss).sum::<f64>() / n,
            kl: (!kls.is_empty()).then(|| kls.iter().sum::<f64>() / kls.len() as f64),
        })
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: usize,
    pub stage: Stage,
    pub objects: usize,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub success: bool,
    pub motions: usize,
    /// Ended early because the scene offered no boxes or grasps.
    pub aborted: bool,
    pub greedy: bool,
    pub updates: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub losses: Option<LossSummary>,
    pub alpha: f64,
    /// Mean policy entropy over the decisions of the episode.
    pub entropy: f64,
}

pub struct Trainer {
    pub config: RunConfig,
    pub policy: FusionPolicy,
    pub params: Params,
    pub learner: Learner,
    pub encoder: AlignedEncoder,
    pub buffer: ReplayBuffer,
    pub library: ObjectLibrary,
    pub table: KeywordTable,
    /// Episodes completed.
    pub episode: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut params = Params::new();
        let policy = FusionPolicy::new(config.policy, &mut params, &mut child_rng(config.seed, "init", 0))?;
        *params.value_mut(policy.log_alpha) = crate::Tensor::scalar(config.alpha.init.ln());
        let learner = Learner::new(&params, &policy, config.sac.lr);
        Self::assemble(config, policy, params, learner, 0)
    }

    /// Restores parameters, optimizer state and episode counter; the replay buffer starts empty.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let (policy, params) = ck.restore_policy()?;
        Self::assemble(ck.config.clone(), policy, params, ck.learner.clone(), ck.episode)
    }

    fn assemble(config: RunConfig, policy: FusionPolicy, params: Params, learner: Learner, episode: usize) -> Result<Self> {
        let library = ObjectLibrary::builtin();
        let table = KeywordTable::builtin();
        table.validate(&library)?;
        let encoder = AlignedEncoder::new(&library, &table, config.encoder);
        Ok(Self {
            buffer: ReplayBuffer::new(config.sac.buffer_capacity),
            config,
            policy,
            params,
            learner,
            encoder,
            library,
            table,
            episode,
        })
    }

    pub fn total_episodes(&self) -> usize {
        self.config.train.total_episodes()
    }

    pub fn finished(&self) -> bool {
        self.episode >= self.total_episodes()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(&self.config, self.episode, &self.params, &self.learner)
    }

    fn is_greedy(&self, e: usize) -> bool {
        e + self.config.train.greedy_final_episodes >= self.total_episodes()
    }

    /// Builds the scene and instruction of global episode `e`.
    pub fn make_episode(&self, e: usize, stage: &StageConfig) -> Result<Episode> {
        let seed = self.config.seed;
        let pool: Vec<&ObjectSpec> = self.library.split(Split::Train);
        let mut rng = child_rng(seed, "scene", e as u64);
        let ins = sample_instruction(&mut rng, &self.table, TemplateSet::Training, Some(&pool))?;
        let ep_seed = derive(seed, "episode", e as u64);
        let scene = sample_scene(
            &mut rng,
            stage.objects,
            &pool,
            Workspace::default(),
            &placement_for(stage.layout),
            Some(&ins),
            ep_seed,
        )?;
        let cfg = EpisodeConfig {
            stage: stage.stage,
            attempt_limit: stage.attempt_limit,
            detection: self.config.detection,
            proposals: self.config.proposals,
        };
        Ok(Episode::new(scene, ins, cfg, ep_seed))
    }

    fn inputs(&self, obs: &Observation) -> Result<Option<PolicyInputs>> {
        match prepare_inputs(obs, &self.encoder, &self.config.policy) {
            Ok(i) => Ok(Some(i)),
            Err(Error::NoBoxes | Error::NoGrasps) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Runs the next episode, updating after every environment step once the
    /// buffer holds a full batch.
    pub fn run_episode(&mut self) -> Result<EpisodeRecord> {
        let e = self.episode;
        let stage = *self
            .config
            .train
            .stage_at(e)
            .ok_or_else(|| Error::Usage(format!("episode {e} is past the end of the curriculum")))?;
        let mut episode = self.make_episode(e, &stage)?;
        let mode = if self.is_greedy(e) { ActionMode::Greedy } else { ActionMode::Sample };
        let guided = self.config.guided.weight_at(e).map(|w| (w, self.config.guided.kl_direction));
        let mut act_rng = child_rng(self.config.seed, "act", e as u64);
        let mut replay_rng = child_rng(self.config.seed, "replay", e as u64);

        let mut reports = Vec::new();
        let mut entropies = Vec::new();
        let mut ret = 0.0;
        let mut aborted = false;
        let mut obs = episode.observe();
        let mut current = self.inputs(&obs)?.map(Arc::new);
        while !episode.done {
            let Some(state) = current.take() else {
                episode.abort();
                aborted = true;
                break;
            };
            let ev = self.policy.evaluate(&self.params, &state)?;
            entropies.push(crate::sac::entropy(&ev.probs));
            let a = select_action(&ev.probs, mode, &mut act_rng)?;
            let step = episode.step(&obs.grasps[a])?;
            ret += step.reward;
            obs = step.observation;
            let next = if step.done { None } else { self.inputs(&obs)?.map(Arc::new) };
            let done = step.done || next.is_none();
            self.buffer
                .push(Transition::new(state, a, step.reward, next.clone(), done)?);
            current = next;
            if self.buffer.len() >= self.config.sac.batch_size {
                for _ in 0..self.config.sac.updates_per_step {
                    let batch = self.buffer.sample(self.config.sac.batch_size, &mut replay_rng)?;
                    let rep = self.learner.update(
                        &mut self.params,
                        &self.policy,
                        &batch,
                        &self.config.sac,
                        &self.config.alpha,
                        guided,
                    )?;
                    reports.push(rep);
                }
            }
            if !step.done && current.is_none() {
                episode.abort();
                aborted = true;
            }
        }
        self.episode += 1;
        Ok(EpisodeRecord {
            episode: e,
            stage: stage.stage,
            objects: stage.objects,
            episode_return: ret,
            success: episode.success,
            motions: episode.attempts,
            aborted,
            greedy: mode == ActionMode::Greedy,
            updates: reports.len(),
            losses: LossSummary::mean(&reports),
            alpha: self.policy.alpha(&self.params),
            entropy: if entropies.is_empty() {
                0.0
            } else {
                entropies.iter().sum::<f64>() / entropies.len() as f64
            },
        })
    }
}

/// Run header written next to the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub resumed_from: Option<usize>,
    pub config: RunConfig,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpisodeRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "checkpoint.json";

/// Runs the curriculum (fresh, or resumed from `resume`) writing metrics and
/// checkpoints into `out`. A non-finite loss dumps `checkpoint_nonfinite.json`.
pub fn train(config: RunConfig, out: &Path, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(ck) => {
            if ck.config_hash != config.hash() {
                return Err(Error::Config("resume checkpoint was written with a different config".into()));
            }
            Trainer::resume(ck)?
        }
        None => Trainer::new(config.clone())?,
    };
    let manifest = RunManifest {
        config_hash: config.hash(),
        seed: config.seed,
        resumed_from: resume.map(|c| c.episode),
        config: config.clone(),
    };
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&manifest)?)?;
    let file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(out.join(METRICS_FILE))?
    } else {
        File::create(out.join(METRICS_FILE))?
    };
    let mut log = BufWriter::new(file);
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let every = config.train.checkpoint_every;
    while !trainer.finished() {
        let e = trainer.episode;
        let rec = match trainer.run_episode() {
            Ok(r) => r,
            Err(err) => {
                log.flush()?;
                if matches!(err.root(), Error::NonFinite { .. }) {
                    trainer.checkpoint().save(&out.join("checkpoint_nonfinite.json"))?;
                }
                return Err(err.context(format!("training episode {e} (seed {})", config.seed)));
            }
        };
        serde_json::to_writer(&mut log, &rec)?;
        log.write_all(b"\n")?;
        records.push(rec);
        if every > 0 && trainer.episode % every == 0 && !trainer.finished() {
            log.flush()?;
            let p = out.join(format!("checkpoint_{:06}.json", trainer.episode));
            trainer.checkpoint().save(&p)?;
            checkpoints.push(p);
        }
    }
    log.flush()?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome {
        records,
        checkpoints,
        final_checkpoint,
    })
}

/// Success rate over the last `n` records.
pub fn final_success_rate(records: &[EpisodeRecord], n: usize) -> f64 {
    let tail = &records[records.len().saturating_sub(n)..];
    if tail.is_empty() {
        return 0.0;
    }
    tail.iter().filter(|r| r.success).count() as f64 / tail.len() as f64
}
