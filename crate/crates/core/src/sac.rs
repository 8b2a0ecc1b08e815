//! Discrete soft actor-critic over variable-size grasp sets.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, ParamId, Segments, Var};
use crate::policy::{kl_guided_loss, Critic, FusionPolicy, InputBatch, KlDirection, PolicyInputs};
use crate::{Params, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub tau: f64,
    pub updates_per_step: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 3e-4,
            batch_size: 32,
            buffer_capacity: 20_000,
            tau: 0.005,
            updates_per_step: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaConfig {
    pub init: f64,
    /// Target entropy is `target_entropy_ratio · ln K` per state.
    pub target_entropy_ratio: f64,
    /// Evaluate the temperature loss as `πᵀ(−α log π + H̄)` instead of the
    /// standard `−log α · (H̄ − H)`.
    pub literal_form: bool,
}

impl Default for AlphaConfig {
    fn default() -> Self {
        Self {
            init: 0.2,
            target_entropy_ratio: 0.5,
            literal_form: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidedConfig {
    pub enabled: bool,
    /// KL weight at episode 0, decayed linearly to 0 at `window`.
    pub weight: f64,
    /// Episodes (counted across stages) during which the KL term is active.
    pub window: usize,
    pub kl_direction: KlDirection,
}

impl Default for GuidedConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            weight: 0.5,
            window: 800,
            kl_direction: KlDirection::PolicyToPrior,
        }
    }
}

impl GuidedConfig {
    /// KL weight for `episode`, `None` outside the window.
    pub fn weight_at(&self, episode: usize) -> Option<f64> {
        (self.enabled && episode < self.window)
            .then(|| self.weight * (1.0 - episode as f64 / self.window as f64))
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub state: Arc<PolicyInputs>,
    pub action: usize,
    pub reward: f64,
    /// Absent for terminal transitions.
    pub next: Option<Arc<PolicyInputs>>,
    pub done: bool,
}

impl Transition {
    pub fn new(state: Arc<PolicyInputs>, action: usize, reward: f64, next: Option<Arc<PolicyInputs>>, done: bool) -> Result<Self> {
        if action >= state.grasps() {
            return Err(Error::Usage(format!("action {action} out of range for {} grasps", state.grasps())));
        }
        if !(-1.0..=2.0).contains(&reward) {
            return Err(Error::Usage(format!("reward {reward} outside [-1, 2]")));
        }
        if !done && next.is_none() {
            return Err(Error::Usage("non-terminal transition without a next state".into()));
        }
        Ok(Self {
            state,
            action,
            reward,
            next: if done { None } else { next },
            done,
        })
    }
}

/// Fixed-capacity ring buffer with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::new(),
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    /// `n` transitions drawn uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(Error::Empty("replay sample"));
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

/// `πᵀ(min(q1, q2) − α log π)`.
pub fn soft_state_value(probs: &[f64], log_probs: &[f64], q1: &[f64], q2: &[f64], alpha: f64) -> f64 {
    probs
        .iter()
        .zip(log_probs)
        .zip(q1.iter().zip(q2))
        .map(|((p, lp), (a, b))| if *p > 0.0 { p * (a.min(*b) - alpha * lp) } else { 0.0 })
        .sum()
}

/// `πᵀ(−q + α log π)` for one state.
pub fn actor_objective(probs: &[f64], log_probs: &[f64], q_min: &[f64], alpha: f64) -> f64 {
    probs
        .iter()
        .zip(log_probs)
        .zip(q_min)
        .map(|((p, lp), q)| if *p > 0.0 { p * (-q + alpha * lp) } else { 0.0 })
        .sum()
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

pub fn target_entropy(ratio: f64, k: usize) -> f64 {
    ratio * (k as f64).ln()
}

/// Temperature loss for one state, as a function of `log α`.
pub fn alpha_objective(log_alpha: f64, probs: &[f64], target: f64, literal_form: bool) -> f64 {
    let h = entropy(probs);
    if literal_form {
        log_alpha.exp() * h + target
    } else {
        -log_alpha * (target - h)
    }
}

/// `y = r + γ (1 − done) V(s')`.
pub fn critic_target(reward: f64, done: bool, gamma: f64, next_value: f64) -> f64 {
    if done {
        reward
    } else {
        reward + gamma * next_value
    }
}

/// Stacked inputs of a sampled minibatch.
#[derive(Debug, Clone)]
pub struct UpdateBatch {
    pub states: InputBatch,
    /// Row of each chosen action in the stacked grasp rows.
    pub action_rows: Vec<usize>,
    /// Priors concatenated in batch order.
    pub priors: Vec<f64>,
    /// `η ln K` per state.
    pub target_entropies: Vec<f64>,
}

impl UpdateBatch {
    pub fn new(states: &[&PolicyInputs], actions: &[usize], policy: &FusionPolicy, ratio: f64) -> Result<Self> {
        let batch = InputBatch::new(states, &policy.config)?;
        let mut action_rows = Vec::with_capacity(actions.len());
        for (b, &a) in actions.iter().enumerate() {
            if a >= batch.q_segs.len_of(b) {
                return Err(Error::Usage(format!("action {a} out of range in batch entry {b}")));
            }
            action_rows.push(batch.q_segs.range(b).start + a);
        }
        Ok(Self {
            priors: states.iter().flat_map(|s| s.prior.iter().copied()).collect(),
            target_entropies: states.iter().map(|s| target_entropy(ratio, s.grasps())).collect(),
            states: batch,
            action_rows,
        })
    }

    pub fn segments(&self) -> &Segments {
        &self.states.q_segs
    }
}

/// Loss nodes of one update.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub critic: Var,
    pub actor: Var,
    pub alpha: Var,
    pub kl: Option<Var>,
    pub total: Var,
    pub log_pi: Var,
}

/// Which term to differentiate, for gradient checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTerm {
    Actor,
    Critic,
    Alpha,
    Kl,
    Total,
}

impl LossVars {
    pub fn term(&self, t: LossTerm) -> Option<Var> {
        match t {
            LossTerm::Actor => Some(self.actor),
            LossTerm::Critic => Some(self.critic),
            LossTerm::Alpha => Some(self.alpha),
            LossTerm::Kl => self.kl,
            LossTerm::Total => Some(self.total),
        }
    }
}

/// Builds critic, actor, temperature and guided losses on one graph.
/// `targets` are the critic targets `y`, one per batch entry. The actor sees
/// `min(q1, q2)` as a constant: the current values, or `fixed_qmin` when given.
pub fn build_losses(
    g: &mut Graph<'_, f64>,
    policy: &FusionPolicy,
    batch: &UpdateBatch,
    targets: &[f64],
    alpha_cfg: &AlphaConfig,
    guided: Option<(f64, KlDirection)>,
    fixed_qmin: Option<&[f64]>,
) -> Result<LossVars> {
    let segs = batch.segments().clone();
    let n = segs.count();
    if targets.len() != n {
        return crate::error::shape_err("build_losses", format!("{} targets for {n} states", targets.len()));
    }
    let sv = policy.build_state(g, &batch.states)?;
    let log_pi = policy.log_policy(g, sv.state, &segs)?;
    let q1 = policy.q_values(g, sv.state, Critic::One)?;
    let q2 = policy.q_values(g, sv.state, Critic::Two)?;

    let y = g.constant(Tensor::column(targets.to_vec()));
    let q1a = g.gather_rows(q1, &batch.action_rows)?;
    let q2a = g.gather_rows(q2, &batch.action_rows)?;
    let d1 = g.sub(q1a, y)?;
    let d2 = g.sub(q2a, y)?;
    let s1 = g.mul(d1, d1)?;
    let s2 = g.mul(d2, d2)?;
    let m1 = g.mean(s1)?;
    let m2 = g.mean(s2)?;
    let both = g.add(m1, m2)?;
    let critic = g.scale(both, 0.5);

    let alpha = g.store().value(policy.log_alpha).item().exp();
    let qmin = match fixed_qmin {
        Some(q) if q.len() == segs.total() => g.constant(Tensor::column(q.to_vec())),
        Some(q) => {
            return crate::error::shape_err("build_losses", format!("{} fixed q values for {} grasps", q.len(), segs.total()))
        }
        None => {
            let m = g.min(q1, q2)?;
            g.detach(m)
        }
    };
    let pi = g.exp(log_pi);
    let soft = g.scale(log_pi, alpha);
    let inner = g.sub(soft, qmin)?;
    let rows = g.mul(pi, inner)?;
    let per_state = g.seg_sum(rows, &segs)?;
    let actor = g.mean(per_state)?;

    let probs = g.value(log_pi).data().iter().map(|l| l.exp()).collect::<Vec<_>>();
    let entropies: Vec<f64> = (0..n).map(|b| entropy(&probs[segs.range(b)])).collect();
    let la = g.param(policy.log_alpha);
    let alpha_loss = if alpha_cfg.literal_form {
        let mean_h = entropies.iter().sum::<f64>() / n as f64;
        let mean_target = batch.target_entropies.iter().sum::<f64>() / n as f64;
        let a = g.exp(la);
        let scaled = g.scale(a, mean_h);
        g.add_const(scaled, mean_target)
    } else {
        let gap = batch
            .target_entropies
            .iter()
            .zip(&entropies)
            .map(|(t, h)| t - h)
            .sum::<f64>()
            / n as f64;
        g.scale(la, -gap)
    };

    let mut total = g.add(critic, actor)?;
    total = g.add(total, alpha_loss)?;
    let kl = match guided {
        Some((beta, dir)) => {
            let kl = kl_guided_loss(g, log_pi, &batch.priors, &segs, dir)?;
            let weighted = g.scale(kl, beta);
            total = g.add(total, weighted)?;
            Some(kl)
        }
        None => None,
    };
    Ok(LossVars {
        critic,
        actor,
        alpha: alpha_loss,
        kl,
        total,
        log_pi,
    })
}

/// Critic targets from next states: online trunk and policy, target critics.
pub fn compute_targets(params: &Params, policy: &FusionPolicy, batch: &[&Transition], gamma: f64) -> Result<Vec<f64>> {
    let alpha = params.value(policy.log_alpha).item().exp();
    let live: Vec<&PolicyInputs> = batch.iter().filter_map(|t| t.next.as_deref()).collect();
    let mut values = Vec::new();
    if !live.is_empty() {
        let nb = InputBatch::new(&live, &policy.config)?;
        let mut g = Graph::new(params);
        let sv = policy.build_state(&mut g, &nb)?;
        let lp = policy.log_policy(&mut g, sv.state, &nb.q_segs)?;
        let t1 = policy.q_values(&mut g, sv.state, Critic::TargetOne)?;
        let t2 = policy.q_values(&mut g, sv.state, Critic::TargetTwo)?;
        let lp = g.value(lp).data();
        let (t1, t2) = (g.value(t1).data(), g.value(t2).data());
        for b in 0..nb.q_segs.count() {
            let r = nb.q_segs.range(b);
            let p: Vec<f64> = lp[r.clone()].iter().map(|l| l.exp()).collect();
            values.push(soft_state_value(&p, &lp[r.clone()], &t1[r.clone()], &t2[r], alpha));
        }
    }
    let mut next = values.into_iter();
    Ok(batch
        .iter()
        .map(|t| {
            let v = if t.done { 0.0 } else { next.next().unwrap_or(0.0) };
            critic_target(t.reward, t.done, gamma, v)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub critic: f64,
    pub actor: f64,
    pub alpha_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl: Option<f64>,
    pub alpha: f64,
    pub entropy: f64,
}

/// Learner state: optimizer over all online parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Learner {
    pub adam: Adam<f64>,
    pub updates: u64,
}

impl Learner {
    pub fn new(params: &Params, policy: &FusionPolicy, lr: f64) -> Self {
        Self {
            adam: Adam::new(params, policy.online_params(params), lr),
            updates: 0,
        }
    }

    pub fn online(&self) -> &[ParamId] {
        self.adam.params()
    }

    /// One combined gradient step on a sampled minibatch, then a Polyak update.
    #[allow(clippy::too_many_arguments)]
    pub fn update(
        &mut self,
        params: &mut Params,
        policy: &FusionPolicy,
        batch: &[&Transition],
        sac: &SacConfig,
        alpha_cfg: &AlphaConfig,
        guided: Option<(f64, KlDirection)>,
    ) -> Result<LossReport> {
        let targets = compute_targets(params, policy, batch, sac.gamma)?;
        let states: Vec<&PolicyInputs> = batch.iter().map(|t| t.state.as_ref()).collect();
        let actions: Vec<usize> = batch.iter().map(|t| t.action).collect();
        let ub = UpdateBatch::new(&states, &actions, policy, alpha_cfg.target_entropy_ratio)?;
        let (report, grads) = {
            let mut g = Graph::new(params);
            let lv = build_losses(&mut g, policy, &ub, &targets, alpha_cfg, guided, None)?;
            let total = g.value(lv.total).item();
            if !total.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("update {}", self.updates + 1),
                    detail: format!("total loss {total}"),
                });
            }
            let segs = ub.segments();
            let lp = g.value(lv.log_pi).data();
            let mean_h = (0..segs.count())
                .map(|b| entropy(&lp[segs.range(b)].iter().map(|l| l.exp()).collect::<Vec<_>>()))
                .sum::<f64>()
                / segs.count() as f64;
            let report = LossReport {
                critic: g.value(lv.critic).item(),
                actor: g.value(lv.actor).item(),
                alpha_loss: g.value(lv.alpha).item(),
                kl: lv.kl.map(|k| g.value(k).item()),
                alpha: g.store().value(policy.log_alpha).item().exp(),
                entropy: mean_h,
            };
            (report, g.backward(lv.total)?)
        };
        params.zero_grads();
        params.accumulate(&grads);
        self.adam.step(params)?;
        policy.polyak_update(params, sac.tau);
        self.updates += 1;
        Ok(report)
    }
}
