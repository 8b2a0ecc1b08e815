//! Finite-difference check of the whole model at micro scale.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grasp::grasp_input_width;
use crate::nn::gradcheck::{analytic_gradients, compare_with_finite_differences};
use crate::nn::{AttentionConfig, GradCheckConfig, ParamId};
use crate::policy::{Critic, FusionMode, FusionPolicy, KlDirection, PolicyConfig, PolicyInputs};
use crate::rng::child_rng;
use crate::sac::{build_losses, AlphaConfig, LossTerm, UpdateBatch};
use crate::{Params, Tensor};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct CheckSetup {
    pub width: usize,
    pub heads: usize,
    pub boxes: usize,
    pub grasps: usize,
    /// States in the checked minibatch.
    pub batch: usize,
    pub seed: u64,
    /// Perturb one analytic gradient entry before comparing.
    pub inject_fault: bool,
}

impl Default for CheckSetup {
    fn default() -> Self {
        Self {
            width: 16,
            heads: 2,
            boxes: 3,
            grasps: 4,
            batch: 2,
            seed: 0,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub mode: FusionMode,
    pub term: LossTerm,
    pub literal_form: bool,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub entries: usize,
    /// Entries that needed a smaller difference step, typically near a kink.
    pub refined: usize,
    pub passed: bool,
}

fn micro_config(mode: FusionMode, s: &CheckSetup) -> PolicyConfig {
    PolicyConfig {
        attention: AttentionConfig {
            width: s.width,
            heads: s.heads,
            layers: 1,
            scale: true,
            ffn_mult: 2,
        },
        mode,
        bands: 2,
        hidden: s.width,
        head_hidden: s.width,
        value_gain: None,
        mapping_threshold: crate::grasp::DEFAULT_THRESHOLD,
    }
}

fn random_inputs<R: Rng + ?Sized>(rng: &mut R, s: &CheckSetup, cfg: &PolicyConfig) -> PolicyInputs {
    let d = cfg.width();
    let mut unit = || {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let rows: Vec<Vec<f64>> = (0..s.boxes).map(|_| unit()).collect();
    let lang = unit();
    let w = grasp_input_width(cfg.bands);
    let grasps: Vec<Vec<f64>> = (0..s.grasps).map(|_| (0..w).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let mut prior: Vec<f64> = (0..s.grasps).map(|_| rng.random_range(0.05..1.0)).collect();
    let total: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|p| *p /= total);
    PolicyInputs {
        box_feats: Tensor::from_rows(&rows).expect("rectangular"),
        lang,
        centers: (0..s.boxes)
            .map(|_| [rng.random_range(0.0..0.8), rng.random_range(0.0..0.8), rng.random_range(0.0..0.1)])
            .collect(),
        grasp_inputs: Tensor::from_rows(&grasps).expect("rectangular"),
        prior,
        box_probs: vec![1.0 / s.boxes as f64; s.boxes],
    }
}

/// Parameters each loss term is differentiated against. Detached inputs
/// (critic values in the actor loss, the entropy in the temperature loss) are
/// constants of that term, so their owners are left out.
fn checked_params(policy: &FusionPolicy, params: &Params, term: LossTerm) -> Vec<ParamId> {
    let trunk = |name: &str| ["grasp_mlp.", "pos_mlp.", "attention.", "film."].iter().any(|p| name.starts_with(p));
    let mut ids: Vec<ParamId> = params.ids().filter(|id| trunk(params.name(*id))).collect();
    match term {
        LossTerm::Actor | LossTerm::Kl => ids.extend(policy.actor.param_ids()),
        LossTerm::Critic => {
            ids.extend(policy.critic1.param_ids());
            ids.extend(policy.critic2.param_ids());
        }
        LossTerm::Alpha => ids = vec![policy.log_alpha],
        LossTerm::Total => ids = policy.online_params(params),
    }
    ids
}

pub fn check_term(mode: FusionMode, term: LossTerm, literal_form: bool, setup: &CheckSetup) -> Result<CheckResult> {
    if term == LossTerm::Total {
        return Err(Error::Usage("the total loss mixes detached terms; check its parts".into()));
    }
    let cfg = micro_config(mode, setup);
    let mut rng = child_rng(setup.seed, "gradcheck", 0);
    let mut params = Params::new();
    let policy = FusionPolicy::new(cfg, &mut params, &mut rng)?;
    let states: Vec<PolicyInputs> = (0..setup.batch).map(|_| random_inputs(&mut rng, setup, &cfg)).collect();
    let actions: Vec<usize> = (0..setup.batch).map(|_| rng.random_range(0..setup.grasps)).collect();
    let targets: Vec<f64> = (0..setup.batch).map(|_| rng.random_range(-1.0..2.0)).collect();
    let refs: Vec<&PolicyInputs> = states.iter().collect();
    let alpha_cfg = AlphaConfig {
        literal_form,
        ..AlphaConfig::default()
    };
    let batch = UpdateBatch::new(&refs, &actions, &policy, alpha_cfg.target_entropy_ratio)?;
    // critic values enter the actor loss as constants of the unperturbed model
    let qmin = {
        let mut g = crate::nn::Graph::new(&params);
        let sv = policy.build_state(&mut g, &batch.states)?;
        let q1 = policy.q_values(&mut g, sv.state, Critic::One)?;
        let q2 = policy.q_values(&mut g, sv.state, Critic::Two)?;
        let m = g.min(q1, q2)?;
        g.value(m).data().to_vec()
    };
    let loss_fn = |g: &mut crate::nn::Graph<'_, f64>| {
        let guided = Some((1.0, KlDirection::PolicyToPrior));
        let lv = build_losses(g, &policy, &batch, &targets, &alpha_cfg, guided, Some(&qmin))?;
        lv.term(term).ok_or(Error::Empty("loss term"))
    };
    let ids = checked_params(&policy, &params, term);
    let mut analytic = analytic_gradients(&params, &loss_fn)?;
    if setup.inject_fault {
        let id = ids[0];
        let g = analytic
            .get_mut(id)
            .ok_or_else(|| Error::Usage("fault target has no gradient".into()))?;
        g.data_mut()[0] += 1e-2 * (1.0 + g.data()[0].abs());
    }
    let report = compare_with_finite_differences(&params, &analytic, Some(&ids), &loss_fn, GradCheckConfig::default())?;
    Ok(CheckResult {
        mode,
        term,
        literal_form,
        passed: report.passes(TOLERANCE),
        max_rel_error: report.max_rel_error,
        worst_param: report.worst_param,
        entries: report.entries_checked,
        refined: report.refined,
    })
}

/// Every fusion mode against every loss term, plus the literal temperature loss.
pub fn full_model_check(setup: &CheckSetup) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for mode in [FusionMode::CrossAttention, FusionMode::PositionAsKey, FusionMode::Film] {
        for term in [LossTerm::Actor, LossTerm::Critic, LossTerm::Alpha, LossTerm::Kl] {
            out.push(check_term(mode, term, false, setup)?);
        }
        out.push(check_term(mode, LossTerm::Alpha, true, setup)?);
    }
    Ok(out)
}
