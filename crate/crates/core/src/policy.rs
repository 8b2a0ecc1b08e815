//! Cross-attention policy over a variable set of grasp candidates.
//!
//! Grasp features are the queries, box visual-position features the keys and
//! box visual-language features the values. The attended grasp rows form the
//! state; shared heads turn each row into a logit and two q-values.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{center_encodings, fuse_visual_language, AlignedEncoder};
use crate::error::{shape_err, Error, Result};
use crate::grasp::{grasp_input_width, grasp_inputs, grounding_prior, map_boxes_to_grasps};
use crate::nn::{AttentionConfig, CrossAttention, Graph, Mlp, ParamId, Segments, Var};
use crate::sim::Observation;
use crate::{Params, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    CrossAttention,
    /// Keys are the box position embeddings alone.
    PositionAsKey,
    /// Attention over visual features, then language-conditioned scale and shift.
    Film,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(π ‖ prior)
    PolicyToPrior,
    /// KL(prior ‖ π)
    PriorToPolicy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub attention: AttentionConfig,
    pub mode: FusionMode,
    /// Positional-encoding bands for grasp and box positions.
    pub bands: usize,
    /// Hidden width of the grasp, position and FiLM MLPs.
    pub hidden: usize,
    /// Hidden width of the actor and critic heads.
    pub head_hidden: usize,
    /// Gain applied to the visual-language values; `None` uses `√width`.
    pub value_gain: Option<f64>,
    /// Box-grasp association threshold, m.
    pub mapping_threshold: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            attention: AttentionConfig::default(),
            mode: FusionMode::CrossAttention,
            bands: 6,
            hidden: 512,
            head_hidden: 256,
            value_gain: None,
            mapping_threshold: crate::grasp::DEFAULT_THRESHOLD,
        }
    }
}

impl PolicyConfig {
    pub fn width(&self) -> usize {
        self.attention.width
    }

    pub fn value_gain(&self) -> f64 {
        self.value_gain.unwrap_or((self.width() as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.bands == 0 || self.hidden == 0 || self.head_hidden == 0 {
            return Err(Error::Config("policy widths and bands must be positive".into()));
        }
        Ok(())
    }
}

/// Which q head to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Critic {
    One,
    Two,
    TargetOne,
    TargetTwo,
}

/// Architecture and parameter handles. Values live in a [`Params`] store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionPolicy {
    pub config: PolicyConfig,
    pub grasp_mlp: Mlp,
    pub pos_mlp: Mlp,
    pub attention: CrossAttention,
    pub film: Option<Mlp>,
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub log_alpha: ParamId,
}

/// One observation turned into network inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyInputs {
    /// `N × width` unit-norm box features.
    pub box_feats: Tensor,
    pub lang: Vec<f64>,
    pub centers: Vec<[f64; 3]>,
    /// `K × grasp_input_width`.
    pub grasp_inputs: Tensor,
    /// Grounding prior over the K grasps.
    pub prior: Vec<f64>,
    /// Box grounding probabilities.
    pub box_probs: Vec<f64>,
}

impl PolicyInputs {
    pub fn boxes(&self) -> usize {
        self.box_feats.rows()
    }

    pub fn grasps(&self) -> usize {
        self.grasp_inputs.rows()
    }
}

/// Encodes an observation. Fails with [`Error::NoBoxes`] / [`Error::NoGrasps`]
/// when there is nothing to attend over or act on.
pub fn prepare_inputs(obs: &Observation, encoder: &AlignedEncoder, config: &PolicyConfig) -> Result<PolicyInputs> {
    if obs.grasps.is_empty() {
        return Err(Error::NoGrasps);
    }
    if obs.boxes.is_empty() {
        return Err(Error::NoBoxes);
    }
    if encoder.width() != config.width() {
        return Err(Error::Config(format!(
            "encoder width {} differs from policy width {}",
            encoder.width(),
            config.width()
        )));
    }
    let lang = encoder.encode_text(&obs.instruction)?;
    let box_feats = encoder.encode_boxes(&obs.boxes, obs.noise_seed);
    let box_probs = crate::encoder::ground_probabilities(&box_feats, &lang, encoder.config.temperature)?;
    let mapping = map_boxes_to_grasps(&obs.boxes, &obs.grasps, config.mapping_threshold)?;
    let prior = grounding_prior(&box_probs, &mapping)?;
    Ok(PolicyInputs {
        box_feats,
        lang,
        centers: obs.box_centers(),
        grasp_inputs: grasp_inputs(&obs.grasps, config.bands),
        prior,
        box_probs,
    })
}

/// Several observations stacked row-wise.
#[derive(Debug, Clone)]
pub struct InputBatch {
    pub grasp_inputs: Tensor,
    pub box_feats: Tensor,
    pub values: Tensor,
    pub center_pe: Tensor,
    pub lang: Tensor,
    pub q_segs: Segments,
    pub kv_segs: Segments,
}

fn stack(parts: &[&Tensor], cols: usize) -> Tensor {
    let rows = parts.iter().map(|t| t.rows()).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}

impl InputBatch {
    pub fn new(items: &[&PolicyInputs], config: &PolicyConfig) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("input batch"));
        }
        let d = config.width();
        let gain = config.value_gain();
        let mut values = Vec::with_capacity(items.len());
        let mut pes = Vec::with_capacity(items.len());
        for it in items {
            if it.boxes() == 0 {
                return Err(Error::NoBoxes);
            }
            if it.grasps() == 0 {
                return Err(Error::NoGrasps);
            }
            if it.box_feats.cols() != d || it.lang.len() != d {
                return shape_err("input_batch", format!("feature width differs from {d}"));
            }
            if it.grasp_inputs.cols() != grasp_input_width(config.bands) {
                return shape_err("input_batch", "grasp input width".to_string());
            }
            values.push(fuse_visual_language(&it.box_feats, &it.lang)?.map(|x| x * gain));
            pes.push(center_encodings(&it.centers, config.bands));
        }
        let lang_rows: Vec<Vec<f64>> = items.iter().map(|it| it.lang.clone()).collect();
        Ok(Self {
            grasp_inputs: stack(&items.iter().map(|i| &i.grasp_inputs).collect::<Vec<_>>(), grasp_input_width(config.bands)),
            box_feats: stack(&items.iter().map(|i| &i.box_feats).collect::<Vec<_>>(), d),
            values: stack(&values.iter().collect::<Vec<_>>(), d),
            center_pe: stack(&pes.iter().collect::<Vec<_>>(), 6 * config.bands),
            lang: Tensor::from_rows(&lang_rows)?,
            q_segs: Segments::from_lengths(&items.iter().map(|i| i.grasps()).collect::<Vec<_>>()),
            kv_segs: Segments::from_lengths(&items.iter().map(|i| i.boxes()).collect::<Vec<_>>()),
        })
    }
}

/// Trunk output for a batch.
#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    /// `ΣK × width`.
    pub state: Var,
    /// Attention node of the last block.
    pub attention: Var,
}

impl FusionPolicy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, params: &mut Params, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.width();
        let h = config.hidden;
        let grasp_mlp = Mlp::new(params, "grasp_mlp", &[grasp_input_width(config.bands), h, d], rng);
        let pos_mlp = Mlp::new(params, "pos_mlp", &[6 * config.bands, h, d], rng);
        let attention = CrossAttention::new(params, "attention", config.attention, rng)?;
        let film = (config.mode == FusionMode::Film).then(|| Mlp::new(params, "film", &[d, h, 2 * d], rng));
        let heads = [d, config.head_hidden, 1];
        let actor = Mlp::new(params, "actor", &heads, rng);
        let critic1 = Mlp::new(params, "critic1", &heads, rng);
        let critic2 = Mlp::new(params, "critic2", &heads, rng);
        let target1 = Mlp::new(params, "target1", &heads, rng);
        let target2 = Mlp::new(params, "target2", &heads, rng);
        let log_alpha = params.add("log_alpha", Tensor::scalar(0.2f64.ln()));
        let policy = Self {
            config,
            grasp_mlp,
            pos_mlp,
            attention,
            film,
            actor,
            critic1,
            critic2,
            target1,
            target2,
            log_alpha,
        };
        policy.hard_update_targets(params);
        Ok(policy)
    }

    /// Parameters trained by gradient descent (everything except the target heads).
    pub fn online_params(&self, params: &Params) -> Vec<ParamId> {
        let targets: Vec<ParamId> = self.target1.param_ids().into_iter().chain(self.target2.param_ids()).collect();
        params.ids().filter(|id| !targets.contains(id)).collect()
    }

    fn target_pairs(&self) -> Vec<(ParamId, ParamId)> {
        let a = self.critic1.param_ids().into_iter().zip(self.target1.param_ids());
        let b = self.critic2.param_ids().into_iter().zip(self.target2.param_ids());
        a.chain(b).collect()
    }

    pub fn hard_update_targets(&self, params: &mut Params) {
        for (o, t) in self.target_pairs() {
            *params.value_mut(t) = params.value(o).clone();
        }
    }

    /// `target ← (1 − τ) target + τ online`.
    pub fn polyak_update(&self, params: &mut Params, tau: f64) {
        for (o, t) in self.target_pairs() {
            let online = params.value(o).clone();
            let target = params.value_mut(t);
            for (x, y) in target.data_mut().iter_mut().zip(online.data()) {
                *x = (1.0 - tau) * *x + tau * y;
            }
        }
    }

    pub fn alpha(&self, params: &Params) -> f64 {
        params.value(self.log_alpha).item().exp()
    }

    /// Cross-attention state of every grasp in the batch.
    pub fn build_state(&self, g: &mut Graph<'_, f64>, batch: &InputBatch) -> Result<StateVars> {
        let gi = g.constant(batch.grasp_inputs.clone());
        let queries = self.grasp_mlp.forward(g, gi)?;
        let pe = g.constant(batch.center_pe.clone());
        let pos = self.pos_mlp.forward(g, pe)?;
        let boxes = g.constant(batch.box_feats.clone());
        let keys = match self.config.mode {
            FusionMode::PositionAsKey => pos,
            FusionMode::CrossAttention | FusionMode::Film => g.add(boxes, pos)?,
        };
        let values = match self.config.mode {
            FusionMode::Film => g.constant(batch.box_feats.map(|x| x * self.config.value_gain())),
            _ => g.constant(batch.values.clone()),
        };
        let out = self
            .attention
            .forward(g, queries, keys, values, &batch.q_segs, &batch.kv_segs)?;
        let state = match &self.film {
            Some(film) if self.config.mode == FusionMode::Film => {
                let lang = g.constant(batch.lang.clone());
                let gb = film.forward(g, lang)?;
                let gb = g.expand(gb, &batch.q_segs)?;
                let d = self.config.width();
                let gamma = g.slice_cols(gb, 0, d)?;
                let beta = g.slice_cols(gb, d, d)?;
                let scaled = g.mul(out.features, gamma)?;
                let s = g.add(out.features, scaled)?;
                g.add(s, beta)?
            }
            _ => out.features,
        };
        Ok(StateVars {
            state,
            attention: out.weights,
        })
    }

    /// Per-grasp logits, `ΣK × 1`.
    pub fn logits(&self, g: &mut Graph<'_, f64>, state: Var) -> Result<Var> {
        self.actor.forward(g, state)
    }

    /// Per-grasp log-probabilities within each observation.
    pub fn log_policy(&self, g: &mut Graph<'_, f64>, state: Var, segs: &Segments) -> Result<Var> {
        let l = self.logits(g, state)?;
        g.seg_log_softmax(l, segs)
    }

    pub fn q_values(&self, g: &mut Graph<'_, f64>, state: Var, which: Critic) -> Result<Var> {
        let head = match which {
            Critic::One => &self.critic1,
            Critic::Two => &self.critic2,
            Critic::TargetOne => &self.target1,
            Critic::TargetTwo => &self.target2,
        };
        head.forward(g, state)
    }

    /// Forward pass without gradients for one observation.
    pub fn evaluate(&self, params: &Params, inputs: &PolicyInputs) -> Result<PolicyEval> {
        let batch = InputBatch::new(&[inputs], &self.config)?;
        let mut g = Graph::new(params);
        let sv = self.build_state(&mut g, &batch)?;
        let logp = self.log_policy(&mut g, sv.state, &batch.q_segs)?;
        let q1 = self.q_values(&mut g, sv.state, Critic::One)?;
        let q2 = self.q_values(&mut g, sv.state, Critic::Two)?;
        let log_probs = g.value(logp).data().to_vec();
        Ok(PolicyEval {
            probs: log_probs.iter().map(|l| l.exp()).collect(),
            log_probs,
            q1: g.value(q1).data().to_vec(),
            q2: g.value(q2).data().to_vec(),
            box_attention: g.attention_key_max(sv.attention, 0).unwrap_or_default(),
            state: g.value(sv.state).clone(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct PolicyEval {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub q1: Vec<f64>,
    pub q2: Vec<f64>,
    /// Per box: maximum attention weight over heads and grasps.
    pub box_attention: Vec<f64>,
    pub state: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Sample,
    Greedy,
}

/// Draws from `probs` or takes its argmax (lowest index on ties).
pub fn select_action<R: Rng + ?Sized>(probs: &[f64], mode: ActionMode, rng: &mut R) -> Result<usize> {
    if probs.is_empty() {
        return Err(Error::Empty("select_action"));
    }
    match mode {
        ActionMode::Greedy => {
            let mut best = 0;
            for (i, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = i;
                }
            }
            Ok(best)
        }
        ActionMode::Sample => {
            let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
            let mut acc = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return Ok(i);
                }
            }
            Ok(probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1))
        }
    }
}

/// `Σ p_k (ln p_k − ln q_k)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return shape_err("kl_guided_loss", format!("lengths {} and {}", p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum())
}

/// Mean over the batch of the guided KL between the policy and the priors.
/// `log_pi` is the `ΣK × 1` log-policy; `priors` are concatenated in batch order.
pub fn kl_guided_loss(
    g: &mut Graph<'_, f64>,
    log_pi: Var,
    priors: &[f64],
    segs: &Segments,
    direction: KlDirection,
) -> Result<Var> {
    if priors.len() != segs.total() || g.value(log_pi).rows() != segs.total() {
        return shape_err(
            "kl_guided_loss",
            format!("{} prior entries for {} grasps", priors.len(), segs.total()),
        );
    }
    let log_prior = g.constant(Tensor::column(priors.iter().map(|p| p.ln()).collect()));
    let per_row = match direction {
        KlDirection::PolicyToPrior => {
            let pi = g.exp(log_pi);
            let diff = g.sub(log_pi, log_prior)?;
            g.mul(pi, diff)?
        }
        KlDirection::PriorToPolicy => {
            let prior = g.constant(Tensor::column(priors.to_vec()));
            let diff = g.sub(log_prior, log_pi)?;
            g.mul(prior, diff)?
        }
    };
    let per_sample = g.seg_sum(per_row, segs)?;
    g.mean(per_sample)
}
