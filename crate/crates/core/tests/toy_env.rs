use uoep_core::env::{Environment, ItemCatalog, ResponseModel, SessionConfig, UserProfile};
use uoep_core::trainer::{train, TrainConfig};

/// One user, two items: item 0 is always clicked, item 1 never.
fn two_item_env() -> Environment {
    let users = vec![UserProfile {
        id: 0,
        latent: vec![1.0],
        activity_bias: 0.0,
        features: vec![0.0],
    }];
    let catalog = ItemCatalog::new(1, vec![60.0, -60.0], vec![0, 1]).unwrap();
    let session = SessionConfig {
        list_size: 1,
        ..SessionConfig::default()
    };
    Environment::new(users, catalog, session, ResponseModel::GroundTruth).unwrap()
}

#[test]
fn every_actor_ranks_the_clicked_item_first() {
    let cfg = TrainConfig {
        total_steps: 5_000,
        batch_size: 32,
        n_quantiles: 8,
        n_target_quantiles: 8,
        k_cvar: 8,
        k_infer: 8,
        critic_hidden: vec![32],
        actor_hidden: vec![16],
        eval_interval: 1_000,
        eval_episodes: 5,
        alphas: vec![0.2, 0.6, 1.0],
        seed: 11,
        ..TrainConfig::default()
    };
    let env = two_item_env();
    let out = train(cfg, env.clone()).unwrap();
    // probe the states a session actually visits
    let mut state = env.start_session(0);
    for _ in 0..5 {
        let encoded = env.encode_state(&state);
        for actor in out.population.actors() {
            let (_, list) = actor.act(env.catalog(), &encoded, 2).unwrap();
            assert_eq!(list[0], 0, "actor {} at depth {}", actor.index(), state.depth);
        }
        let step = env.respond(&state, &[0], &mut uoep_core::rng::seeded(0)).unwrap();
        if step.next.done {
            break;
        }
        state = step.next;
    }
}
