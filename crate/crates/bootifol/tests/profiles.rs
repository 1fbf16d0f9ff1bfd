use bootifol::settings;
use bootifol_core::config::{EnvId, Profile, RunConfig};

#[test]
fn paper_profile_matches_the_published_hyperparameters() {
    let p = RunConfig::paper();
    assert_eq!(p.env.n_trajectories, 5000);
    assert_eq!(p.env.episode_len + 1, 61, "frames per video");
    assert_eq!(p.net.frame_size, 64);
    assert_eq!(p.align.n_pretrain, 8000);
    assert_eq!(p.align.batch_pairs, 16);
    assert_eq!(p.interact.batch_pairs, 16);
    assert_eq!(p.interact.n_train, 375_000);
    assert_eq!(p.interact.n_update, 50);
    assert_eq!(p.interact.n_pi, 1_550_000);
    assert_eq!(p.align.lr, 1e-4);
    assert_eq!(p.interact.lr, 1e-4);
    assert_eq!(p.net.conv_filters, [64, 128, 256, 512]);
    assert_eq!(p.net.leak, 0.2);
    assert_eq!(p.loss.tau, 0.07);
}

#[test]
fn desk_profile_is_the_reduced_point_reach_setup() {
    let d = RunConfig::desk();
    assert_eq!(d.env.env, EnvId::PointReach);
    assert_eq!(d.net.frame_size, 32);
    assert_eq!((d.interact.n_pi, d.interact.n_train, d.interact.n_update), (60_000, 15_000, 50));
    assert_eq!(d.agent.noise_std, 0.2);
    assert_eq!(d.agent.discount, 0.99);
    assert_eq!(d.agent.polyak, 0.995);
    assert_eq!(d.agent.replay_capacity, 100_000);
    assert_eq!(d.agent.batch_size, 64);
    d.validate().unwrap();
}

#[test]
fn partial_files_layer_over_their_profile() {
    let cfg = settings::from_toml("profile = \"paper\"\n[interact]\nn_pi = 400000\n", Profile::Desk).unwrap();
    let mut want = RunConfig::paper();
    want.interact.n_pi = 400_000;
    assert_eq!(cfg, want);
    let cfg = settings::from_toml("[loss]\ntau = 0.5\n", Profile::Desk).unwrap();
    assert_eq!(cfg.loss.tau, 0.5);
    assert_eq!(cfg.net, RunConfig::desk().net);
}
