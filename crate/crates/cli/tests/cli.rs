//! End-to-end checks of the runner surface: artifact layout, the
//! two-channel latent exports, grid evaluation and its failure modes.

use std::path::PathBuf;

use kflayers_cli::artifacts::{run_experiment, run_grid_eval, GridSpec};
use kflayers_cli::config::ExperimentConfig;

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("kfl_cli_{}_{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    dir
}

fn tiny_cfg(out: &PathBuf) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.out_dir = out.to_string_lossy().to_string();
    cfg.latent_n = 2; // enables the latent-rollout exports
    cfg.embed = 4;
    cfg.actor_hidden = vec![8];
    cfg.critic_hidden = vec![8];
    cfg.batch_size = 8;
    cfg.context_len = 16;
    cfg.total_steps = 800;
    cfg.eval_every = 400;
    cfg.eval_episodes = 4;
    cfg.learning_starts = 200;
    cfg.seeds = vec![0, 1];
    cfg
}

#[test]
fn experiment_writes_every_artifact() {
    let out = tmp_dir("artifacts");
    let cfg = tiny_cfg(&out);
    let dir = run_experiment(&cfg, false).unwrap();

    assert!(dir.join("resolved.cfg").exists());
    assert!(dir.join("summary.cfg").exists());
    for seed in [0, 1] {
        let sub = dir.join(format!("seed_{seed}"));
        for f in [
            "resolved.cfg",
            "metrics.csv",
            "summary.cfg",
            "checkpoint_final.kfc",
            "latent_rollouts.csv",
            "policy_grid.csv",
        ] {
            assert!(sub.join(f).exists(), "missing {f} for seed {seed}");
        }
        let metrics = std::fs::read_to_string(sub.join("metrics.csv")).unwrap();
        assert!(metrics.starts_with("# kflayers v"));
        assert!(metrics
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("env_step,eval_return_mean"));
        // two splits per eval point, two eval points
        assert_eq!(metrics.lines().count(), 2 + 4);
    }
    let summary = std::fs::read_to_string(dir.join("summary.cfg")).unwrap();
    assert!(summary.contains("seeds_completed = 2"));

    // rerunning without --force must refuse to clobber
    let err = run_experiment(&cfg, false).unwrap_err();
    assert!(err.contains("--force"), "{err}");
    run_experiment(&cfg, true).unwrap();

    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn grid_eval_round_trip_and_missing_checkpoints() {
    let out = tmp_dir("grid");
    let cfg = tiny_cfg(&out);
    let dir = run_experiment(&cfg, false).unwrap();

    let spec = GridSpec {
        mus: kflayers::env::linspace(-0.5, 0.5, 3),
        sigmas: kflayers::env::linspace(0.0, 3.0, 3),
        episodes: 2,
    };
    let gout = run_grid_eval(&dir, &spec).unwrap();
    assert_eq!(gout.cells, 9);
    // aggregated: header comment + column row + 9 cells
    assert_eq!(gout.aggregated.lines().count(), 2 + 9);
    // per-agent: one row per cell per seed
    assert_eq!(gout.per_agent.lines().count(), 2 + 9 * 2);
    let cols = gout.per_agent.lines().nth(1).unwrap();
    assert_eq!(cols, "mu_b,sigma_b,agent_seed,win_rate,mean_length,n_episodes");

    // deterministic: same checkpoints, same grid, identical bytes
    let gout2 = run_grid_eval(&dir, &spec).unwrap();
    assert_eq!(gout.aggregated, gout2.aggregated);

    // removing one checkpoint must name the absent seed and produce nothing
    std::fs::remove_file(dir.join("seed_1/checkpoint_final.kfc")).unwrap();
    let err = run_grid_eval(&dir, &spec).unwrap_err();
    assert!(err.contains("seeds: 1"), "{err}");

    let _ = std::fs::remove_dir_all(&out);
}

#[test]
fn config_file_errors_surface_the_path() {
    let missing = PathBuf::from("/nonexistent/kfl.cfg");
    let err = ExperimentConfig::from_file(&missing).unwrap_err();
    assert!(err.to_string().contains("nonexistent"));
}
