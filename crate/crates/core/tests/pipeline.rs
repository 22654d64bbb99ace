use bit_core::agent::Agent;
use bit_core::bit_learner::{BitInputs, ACTION_HEAD, BACKWARD_HEAD, FORWARD_HEAD};
use bit_core::checkpoint;
use bit_core::env::{BackgroundMode, BackgroundTier, PointMassEnv, ACTION_DIM};
use bit_core::trainer::{self, TrainOptions};
use bit_core::{Ablation, RunConfig};
use bit_nn::{Tensor, Tracking};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn checkpoint_reproduces_the_trained_agent() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::toy();
    config.total_env_steps = 120;
    let outcome = trainer::train(&config, dir.path(), &TrainOptions::default()).unwrap();

    let ck = checkpoint::load(&outcome.final_checkpoint).unwrap();
    assert_eq!(ck.env_steps, 120);
    assert_eq!(ck.config, config);
    let agent = ck.into_agent().unwrap();
    let fresh = Agent::<f32>::new(&config).unwrap();
    assert_ne!(
        agent.params_hash(""),
        fresh.params_hash(""),
        "training left the parameters untouched"
    );

    let seeds = trainer::eval_seeds(&config);
    let run = || trainer::evaluate(&agent, &config.env, &config.eval_backgrounds, 2, &seeds).unwrap();
    assert_eq!(run(), run());

    // Saving the reloaded agent reproduces the file byte for byte.
    let again = dir.path().join("again.bin");
    checkpoint::save(&again, &agent, 120).unwrap();
    assert_eq!(checkpoint::file_hash(&again).unwrap(), outcome.checkpoint_hash);
}

/// Each head must receive gradient exactly when some active term depends on it.
#[test]
fn ablation_masks_route_gradients_to_the_right_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for ablation in Ablation::ALL.into_iter().filter(|a| a.uses_bit()) {
        let mut config = RunConfig::toy();
        config.ablation = ablation;
        let agent = Agent::<f64>::new(&config).unwrap();
        let [c, h, w] = config.env.obs_shape();
        let mut uniform = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let (obs, aug, next) = (uniform(&[3, c, h, w]), uniform(&[3, c, h, w]), uniform(&[3, c, h, w]));
        let actions = uniform(&[3, ACTION_DIM]);
        let inputs = BitInputs {
            obs_aug: &aug,
            obs: &obs,
            next_obs: &next,
            actions: &actions,
        };
        let (g, nodes) = agent
            .bit_objective(agent.store(), &inputs, Tracking::Trainable)
            .unwrap();
        let grads = g.backward(nodes.total).params();
        let live = |head: &str| {
            grads
                .iter()
                .filter(|(k, _)| k.starts_with(&format!("{head}.")))
                .any(|(_, t)| t.data().iter().any(|&v| v != 0.0))
        };
        let m = ablation.mask();
        let pseudo_action_used = !m.true_action_input && (m.fwd || m.bwd);
        assert_eq!(live(FORWARD_HEAD), m.fwd, "{ablation}: forward head");
        assert_eq!(live(BACKWARD_HEAD), m.bwd, "{ablation}: backward head");
        assert_eq!(
            live(ACTION_HEAD),
            m.action || pseudo_action_used,
            "{ablation}: action head"
        );
    }
}

#[test]
fn harder_backgrounds_move_frames_further_from_clean() {
    let config = RunConfig::smoke();
    let mut env = PointMassEnv::new(config.env.clone()).unwrap();
    let mut gap = |tier: BackgroundTier| -> f64 {
        (0..20)
            .map(|seed| {
                let clean = env.reset(seed, BackgroundMode::clean());
                let other = env.reset(seed, BackgroundMode::new(tier, 100 + seed));
                clean
                    .data()
                    .iter()
                    .zip(other.data())
                    .map(|(a, b)| (a - b).abs() as f64)
                    .sum::<f64>()
                    / clean.data().len() as f64
            })
            .sum::<f64>()
            / 20.0
    };
    let (easy, hard) = (gap(BackgroundTier::Easy), gap(BackgroundTier::Hard));
    assert!(easy > 0.0 && hard > easy, "easy {easy:.4}, hard {hard:.4}");
}
