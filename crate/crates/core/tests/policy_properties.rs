use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vlgrasp::encoder::{AlignedEncoder, EncoderConfig};
use vlgrasp::nn::{softmax, AttentionConfig, Graph, Segments};
use vlgrasp::policy::{
    kl_divergence, kl_guided_loss, prepare_inputs, select_action, ActionMode, FusionMode, FusionPolicy, KlDirection,
    PolicyConfig, PolicyInputs,
};
use vlgrasp::sim::{
    sample_instruction, sample_scene, Episode, EpisodeConfig, KeywordTable, ObjectLibrary, ObjectSpec, PlacementConfig,
    Split, Stage, TemplateSet, Workspace,
};
use vlgrasp::{Params, Tensor};

const WIDTH: usize = 32;

fn config(mode: FusionMode) -> PolicyConfig {
    PolicyConfig {
        attention: AttentionConfig {
            width: WIDTH,
            heads: 4,
            layers: 1,
            scale: true,
            ffn_mult: 2,
        },
        mode,
        hidden: WIDTH,
        head_hidden: WIDTH,
        ..PolicyConfig::default()
    }
}

fn modes() -> impl Strategy<Value = FusionMode> {
    prop_oneof![
        Just(FusionMode::CrossAttention),
        Just(FusionMode::PositionAsKey),
        Just(FusionMode::Film)
    ]
}

/// Encoded first observation of a random cluttered or scattered scene.
fn observed_inputs(seed: u64, cfg: &PolicyConfig) -> Option<PolicyInputs> {
    let lib = ObjectLibrary::builtin();
    let table = KeywordTable::builtin();
    let enc = AlignedEncoder::new(
        &lib,
        &table,
        EncoderConfig {
            width: WIDTH,
            ..EncoderConfig::default()
        },
    );
    let pool: Vec<&ObjectSpec> = lib.split(Split::Train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ins = sample_instruction(&mut rng, &table, TemplateSet::Training, Some(&pool)).unwrap();
    let placement = if rng.random_bool(0.5) { PlacementConfig::clutter() } else { PlacementConfig::scattered() };
    let objects = rng.random_range(1..10);
    let scene = sample_scene(&mut rng, objects, &pool, Workspace::default(), &placement, Some(&ins), seed).unwrap();
    let ep = Episode::new(scene, ins, EpisodeConfig::for_stage(Stage::II), seed);
    prepare_inputs(&ep.observe(), &enc, cfg).ok()
}

fn permute_rows(t: &Tensor, p: &[usize]) -> Tensor {
    t.select_rows(p)
}

fn permuted(inputs: &PolicyInputs, gp: &[usize], bp: &[usize]) -> PolicyInputs {
    PolicyInputs {
        box_feats: permute_rows(&inputs.box_feats, bp),
        lang: inputs.lang.clone(),
        centers: bp.iter().map(|&i| inputs.centers[i]).collect(),
        grasp_inputs: permute_rows(&inputs.grasp_inputs, gp),
        prior: gp.iter().map(|&i| inputs.prior[i]).collect(),
        box_probs: bp.iter().map(|&i| inputs.box_probs[i]).collect(),
    }
}

fn random_distribution(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(1e-3..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn policy_is_box_invariant_and_grasp_equivariant(seed in any::<u64>(), mode in modes()) {
        let cfg = config(mode);
        let inputs = observed_inputs(seed, &cfg);
        prop_assume!(inputs.is_some());
        let inputs = inputs.unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
        let mut params = Params::new();
        let policy = FusionPolicy::new(cfg, &mut params, &mut rng).unwrap();
        let mut gp: Vec<usize> = (0..inputs.grasps()).collect();
        gp.shuffle(&mut rng);
        let mut bp: Vec<usize> = (0..inputs.boxes()).collect();
        bp.shuffle(&mut rng);

        let a = policy.evaluate(&params, &inputs).unwrap();
        let boxes_only = policy.evaluate(&params, &permuted(&inputs, &(0..inputs.grasps()).collect::<Vec<_>>(), &bp)).unwrap();
        for k in 0..inputs.grasps() {
            prop_assert!((a.probs[k] - boxes_only.probs[k]).abs() < 1e-9);
            prop_assert!((a.q1[k] - boxes_only.q1[k]).abs() < 1e-9);
            prop_assert!((a.q2[k] - boxes_only.q2[k]).abs() < 1e-9);
        }
        let b = policy.evaluate(&params, &permuted(&inputs, &gp, &bp)).unwrap();
        for (j, &i) in gp.iter().enumerate() {
            prop_assert!((a.probs[i] - b.probs[j]).abs() < 1e-9);
            prop_assert!((a.q1[i] - b.q1[j]).abs() < 1e-9);
            prop_assert!((a.q2[i] - b.q2[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn policy_output_is_a_distribution(seed in any::<u64>(), mode in modes()) {
        let cfg = config(mode);
        let inputs = observed_inputs(seed, &cfg);
        prop_assume!(inputs.is_some());
        let inputs = inputs.unwrap();
        let mut params = Params::new();
        let policy = FusionPolicy::new(cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(!seed)).unwrap();
        let ev = policy.evaluate(&params, &inputs).unwrap();
        prop_assert_eq!(ev.probs.len(), inputs.grasps());
        prop_assert!(ev.probs.iter().all(|&p| p.is_finite() && p >= 0.0));
        prop_assert!((ev.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(inputs.prior.len(), inputs.grasps());
        prop_assert!((inputs.prior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn greedy_action_ignores_a_constant_logit_shift(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let cfg = config(FusionMode::CrossAttention);
        let inputs = observed_inputs(seed, &cfg);
        prop_assume!(inputs.is_some());
        let inputs = inputs.unwrap();
        let mut params = Params::new();
        let policy = FusionPolicy::new(cfg, &mut params, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = select_action(&policy.evaluate(&params, &inputs).unwrap().probs, ActionMode::Greedy, &mut rng).unwrap();
        // the actor's output bias is added to every logit
        let bias = policy.actor.layers.last().unwrap().bias;
        params.value_mut(bias).data_mut()[0] += shift;
        let after = select_action(&policy.evaluate(&params, &inputs).unwrap().probs, ActionMode::Greedy, &mut rng).unwrap();
        prop_assert_eq!(before, after);

        let logits: Vec<f64> = (0..7).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        prop_assert_eq!(
            select_action(&softmax(&logits).unwrap(), ActionMode::Greedy, &mut rng).unwrap(),
            select_action(&softmax(&shifted).unwrap(), ActionMode::Greedy, &mut rng).unwrap()
        );
    }

    #[test]
    fn kl_vanishes_exactly_when_policy_equals_prior(seed in any::<u64>(), k in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_distribution(&mut rng, k);
        let q = random_distribution(&mut rng, k);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-9);
        // Pinsker: KL >= ½‖p − q‖₁², so a vanishing KL forces equality
        let kl = kl_divergence(&p, &q).unwrap();
        let l1: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(kl >= 0.5 * l1 * l1 - 1e-12);
        if l1 > 1e-3 {
            prop_assert!(kl > 1e-9);
        }

        let params = Params::new();
        let mut g = Graph::new(&params);
        let lp = g.constant(Tensor::column(p.iter().map(|x| x.ln()).collect()));
        let segs = Segments::single(k);
        for dir in [KlDirection::PolicyToPrior, KlDirection::PriorToPolicy] {
            let same = kl_guided_loss(&mut g, lp, &p, &segs, dir).unwrap();
            prop_assert!(g.value(same).item().abs() < 1e-9);
        }
    }
}
