use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grasp::{propose_grasps, GraspPose, ProposalConfig};
use crate::rng::{child_rng, derive};
use crate::sim::instruction::Instruction;
use crate::sim::raster::{detect_boxes, DetectionConfig, LabelMap, ObjectBox};
use crate::sim::scene::Scene;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    I,
    II,
}

impl Stage {
    pub fn default_attempt_limit(self) -> usize {
        match self {
            Stage::I => 5,
            Stage::II => 8,
        }
    }
}

/// Fraction of success probability removed per unit of covered footprint.
pub const CLUTTER_PENALTY: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraspOutcome {
    pub success: bool,
    /// Topmost object under the grasp point, if any.
    pub object: Option<u32>,
    pub is_target: bool,
    /// 3D distance from the touched object to the nearest target, capped at `dist_max`.
    pub distance: f64,
    /// Probability the success draw was compared against.
    pub probability: f64,
}

/// Attempts the grasp on the topmost object at the grasp point. Success has
/// probability `quality × (1 − 0.8 × covered fraction)`; one uniform draw is
/// consumed whatever the outcome.
pub fn execute_grasp<R: Rng + ?Sized>(scene: &mut Scene, grasp: &GraspPose, rng: &mut R) -> GraspOutcome {
    let u: f64 = rng.random();
    let map = LabelMap::render(scene);
    let dist_max = scene.workspace.dist_max();
    let hit = scene
        .workspace
        .to_pixel(grasp.position[0], grasp.position[1])
        .and_then(|(c, r)| map.at(c, r));
    let Some(i) = hit else {
        return GraspOutcome {
            success: false,
            object: None,
            is_target: false,
            distance: dist_max,
            probability: 0.0,
        };
    };
    let obj = &scene.objects[i];
    let uid = obj.uid;
    let is_target = scene.is_target(uid);
    let p = obj.position();
    let distance = scene
        .targets
        .iter()
        .filter_map(|t| scene.object(*t))
        .map(|t| {
            let q = t.position();
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .fold(dist_max, f64::min);
    let probability = grasp.quality.clamp(0.0, 1.0) * (1.0 - CLUTTER_PENALTY * map.covered_fraction(i));
    let success = u < probability;
    if success {
        scene.remove(uid);
    }
    GraspOutcome {
        success,
        object: Some(uid),
        is_target,
        distance,
        probability,
    }
}

/// Stage I: +2 for a target, −1 otherwise. Stage II: +2 for a target,
/// −dist/dist_max for another object picked up, −1 for a failed grasp.
pub fn compute_reward(outcome: &GraspOutcome, stage: Stage, dist_max: f64) -> f64 {
    match (outcome.success, outcome.is_target, stage) {
        (true, true, _) => 2.0,
        (true, false, Stage::II) => -(outcome.distance / dist_max).clamp(f64::MIN_POSITIVE, 1.0),
        _ => -1.0,
    }
}

/// Everything the policy may see.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub boxes: Vec<ObjectBox>,
    pub grasps: Vec<GraspPose>,
    pub instruction: Instruction,
    /// Seeds the encoder's alignment noise for this view.
    pub noise_seed: u64,
}

impl Observation {
    pub fn box_centers(&self) -> Vec<[f64; 3]> {
        self.boxes.iter().map(|b| b.center_3d).collect()
    }
}

pub fn observe(
    scene: &Scene,
    instruction: &Instruction,
    detection: &DetectionConfig,
    proposals: &ProposalConfig,
    seed: u64,
    attempt: usize,
) -> Observation {
    let map = LabelMap::render(scene);
    let boxes = detect_boxes(scene, &map, detection);
    let grasps = propose_grasps(scene, &map, proposals, &mut child_rng(seed, "proposals", attempt as u64));
    Observation {
        boxes,
        grasps,
        instruction: instruction.clone(),
        noise_seed: derive(seed, "alignment", attempt as u64),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub stage: Stage,
    pub attempt_limit: usize,
    pub detection: DetectionConfig,
    pub proposals: ProposalConfig,
}

impl EpisodeConfig {
    pub fn for_stage(stage: Stage) -> Self {
        Self {
            stage,
            attempt_limit: stage.default_attempt_limit(),
            detection: DetectionConfig::default(),
            proposals: ProposalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub scene: Scene,
    pub instruction: Instruction,
    pub config: EpisodeConfig,
    pub attempts: usize,
    pub done: bool,
    pub success: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub reward: f64,
    pub outcome: GraspOutcome,
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
}

impl Episode {
    pub fn new(scene: Scene, instruction: Instruction, config: EpisodeConfig, seed: u64) -> Self {
        Self {
            scene,
            instruction,
            config,
            attempts: 0,
            done: false,
            success: false,
            seed,
        }
    }

    pub fn observe(&self) -> Observation {
        observe(
            &self.scene,
            &self.instruction,
            &self.config.detection,
            &self.config.proposals,
            self.seed,
            self.attempts,
        )
    }

    /// Ends the episode as a failure without a grasp (nothing to act on).
    pub fn abort(&mut self) {
        self.done = true;
        self.success = false;
    }

    /// Spends one attempt without grasping, for observations the policy cannot act on.
    pub fn skip_attempt(&mut self) -> Result<Observation> {
        if self.done {
            return Err(Error::Usage(format!(
                "episode already finished after {} attempts",
                self.attempts
            )));
        }
        self.attempts += 1;
        self.done = self.attempts >= self.config.attempt_limit;
        Ok(self.observe())
    }

    pub fn step(&mut self, grasp: &GraspPose) -> Result<StepResult> {
        if self.done {
            return Err(Error::Usage(format!(
                "episode already finished after {} attempts",
                self.attempts
            )));
        }
        let mut rng = child_rng(self.seed, "execute", self.attempts as u64);
        let outcome = execute_grasp(&mut self.scene, grasp, &mut rng);
        let reward = compute_reward(&outcome, self.config.stage, self.scene.workspace.dist_max());
        self.attempts += 1;
        self.success = outcome.success && outcome.is_target;
        self.done = self.success || self.attempts >= self.config.attempt_limit;
        Ok(StepResult {
            reward,
            outcome,
            observation: self.observe(),
            done: self.done,
            success: self.success,
        })
    }
}

pub const DOCUMENT_VERSION: u32 = 1;

/// Versioned JSON record of a scene and what was observed in it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDocument {
    pub version: u32,
    pub scene: Scene,
    pub instruction: Option<Instruction>,
    #[serde(default)]
    pub boxes: Vec<ObjectBox>,
    #[serde(default)]
    pub grasps: Vec<GraspPose>,
}

impl SceneDocument {
    pub fn new(scene: Scene, instruction: Option<Instruction>, observation: Option<&Observation>) -> Self {
        Self {
            version: DOCUMENT_VERSION,
            scene,
            instruction,
            boxes: observation.map(|o| o.boxes.clone()).unwrap_or_default(),
            grasps: observation.map(|o| o.grasps.clone()).unwrap_or_default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.version != DOCUMENT_VERSION {
            return Err(Error::Config(format!("unsupported scene document version {}", doc.version)));
        }
        Ok(doc)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
