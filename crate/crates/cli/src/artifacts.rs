//! Run orchestration and on-disk artifacts.
//!
//! Every run directory carries its resolved configuration and a code-version
//! fingerprint, so any CSV row is traceable to the exact configuration that
//! produced it. Nothing here embeds timestamps: reruns with the same
//! configuration and seed produce byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use kflayers::agent::{train, AgentPolicy, MetricRow, SacAgent, TrainOutput};
use kflayers::checkpoint;
use kflayers::env::{grid_evaluate, linspace, run_episode, BestArmEnv, GridCell, LatentSplit};
use kflayers::rng::mix;
use kflayers::scalar::Scalar;
use kflayers::tensor::{Array, Tape};

use crate::config::{ExperimentConfig, Precision};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn csv_header(cfg: &ExperimentConfig) -> String {
    format!("# kflayers v{VERSION} config={:016x}\n", cfg.fingerprint())
}

/// Root for relative output paths; defaults to the working directory.
pub fn out_root() -> PathBuf {
    match std::env::var_os("KFLAYERS_OUT") {
        Some(root) => PathBuf::from(root),
        None => PathBuf::new(),
    }
}

pub fn resolve_out_dir(cfg: &ExperimentConfig) -> PathBuf {
    let p = PathBuf::from(&cfg.out_dir);
    if p.is_absolute() {
        p
    } else {
        out_root().join(p)
    }
}

pub fn ensure_dir(path: &Path, force: bool) -> Result<(), String> {
    if path.exists() {
        let occupied = fs::read_dir(path)
            .map(|mut d| d.next().is_some())
            .unwrap_or(false);
        if occupied && !force {
            return Err(format!(
                "output directory {} is not empty (use --force to overwrite)",
                path.display()
            ));
        }
    }
    fs::create_dir_all(path).map_err(|e| format!("cannot create {}: {e}", path.display()))
}

pub fn metrics_csv(cfg: &ExperimentConfig, rows: &[MetricRow]) -> String {
    let mut s = csv_header(cfg);
    s.push_str("env_step,eval_return_mean,eval_return_stderr,eval_len_mean,win_rate,split\n");
    for row in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            row.env_step,
            row.stats.mean_norm_return,
            row.stats.stderr_norm_return,
            row.stats.mean_length,
            row.stats.win_rate,
            row.split
        );
    }
    s
}

fn summary_text<S: Scalar>(cfg: &ExperimentConfig, out: &TrainOutput<S>, status: &str) -> String {
    let mut s = csv_header(cfg);
    let mut w = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    w("status", status.to_string());
    w("final.train.norm_return", out.final_train.mean_norm_return.to_string());
    w("final.train.win_rate", out.final_train.win_rate.to_string());
    w("final.train.mean_length", out.final_train.mean_length.to_string());
    w("final.ood.norm_return", out.final_ood.mean_norm_return.to_string());
    w("final.ood.win_rate", out.final_ood.win_rate.to_string());
    w("final.ood.mean_length", out.final_ood.mean_length.to_string());
    w("train.updates", out.updates.to_string());
    w("train.encoder_drift_events", out.drift_events.to_string());
    w("train.mean_critic_loss", out.mean_critic_loss.to_string());
    w("train.mean_actor_loss", out.mean_actor_loss.to_string());
    s
}

fn write(path: &Path, text: &str) -> Result<(), String> {
    fs::write(path, text).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

pub struct SeedRunResult {
    pub seed: u64,
    pub ok: bool,
    pub final_train_norm: f64,
    pub final_ood_norm: f64,
    pub final_train_win: f64,
    pub final_ood_win: f64,
    pub final_train_len: f64,
    pub final_ood_len: f64,
}

/// Train one seed and write its artifact directory. On a non-finite-loss
/// abort the partial metrics and an abort checkpoint are still written and
/// an error is returned.
pub fn run_seed<S: Scalar>(
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    force: bool,
) -> Result<SeedRunResult, String> {
    ensure_dir(dir, force)?;
    write(&dir.join("resolved.cfg"), &format!("{}{}", csv_header(cfg), cfg.resolve()))?;

    let tc = cfg.train_config(seed);
    let (out, status): (TrainOutput<S>, &str) = match train::<S>(&tc) {
        Ok(out) => (out, "ok"),
        Err(abort) => {
            let reason = abort.reason.clone();
            let step = abort.env_step;
            let out = abort.partial;
            write(&dir.join("metrics.csv"), &metrics_csv(cfg, &out.metrics))?;
            write(&dir.join("summary.cfg"), &summary_text(cfg, &out, "aborted"))?;
            let entries: Vec<(String, &Array<S>)> = out.agent.named_params();
            checkpoint::save(&dir.join("checkpoint_abort.kfc"), &entries)
                .map_err(|e| e.to_string())?;
            return Err(format!(
                "seed {seed}: aborted at env step {step}: {reason} (partial artifacts in {})",
                dir.display()
            ));
        }
    };

    write(&dir.join("metrics.csv"), &metrics_csv(cfg, &out.metrics))?;
    write(&dir.join("summary.cfg"), &summary_text(cfg, &out, status))?;
    let entries: Vec<(String, &Array<S>)> = out.agent.named_params();
    checkpoint::save(&dir.join("checkpoint_final.kfc"), &entries).map_err(|e| e.to_string())?;

    // A two-channel latent space is small enough to plot; export rollouts
    // and the policy read-out over that plane.
    if cfg.latent_n == 2 && out.agent.actor_stack.is_some() {
        write(
            &dir.join("latent_rollouts.csv"),
            &latent_rollouts_csv(cfg, &out.agent, seed)?,
        )?;
        write(&dir.join("policy_grid.csv"), &policy_grid_csv(cfg, &out.agent)?)?;
    }

    Ok(SeedRunResult {
        seed,
        ok: true,
        final_train_norm: out.final_train.mean_norm_return,
        final_ood_norm: out.final_ood.mean_norm_return,
        final_train_win: out.final_train.win_rate,
        final_ood_win: out.final_ood.win_rate,
        final_train_len: out.final_train.mean_length,
        final_ood_len: out.final_ood.mean_length,
    })
}

/// Full experiment: one training run per seed into `seed_<s>/`, then an
/// aggregate summary.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<PathBuf, String> {
    cfg.validate().map_err(|e| e.to_string())?;
    let dir = resolve_out_dir(cfg);
    ensure_dir(&dir, force)?;
    write(&dir.join("resolved.cfg"), &format!("{}{}", csv_header(cfg), cfg.resolve()))?;

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        let sub = dir.join(format!("seed_{seed}"));
        let res = match cfg.precision {
            Precision::F32 => run_seed::<f32>(cfg, seed, &sub, force),
            Precision::F64 => run_seed::<f64>(cfg, seed, &sub, force),
        };
        match res {
            Ok(r) => results.push(r),
            Err(e) => failures.push(e),
        }
    }

    if !results.is_empty() {
        write_aggregate_summary(cfg, &dir)?;
    }

    if failures.is_empty() {
        Ok(dir)
    } else {
        Err(failures.join("\n"))
    }
}

/// Aggregate per-seed summaries into the run-level summary. Reads the seed
/// files back, so it also works after fanned-out worker processes.
pub fn write_aggregate_summary(cfg: &ExperimentConfig, dir: &Path) -> Result<(), String> {
    let read_field = |text: &str, key: &str| -> Option<f64> {
        text.lines()
            .find(|l| l.starts_with(&format!("{key} = ")))
            .and_then(|l| l.split('=').nth(1))
            .and_then(|v| v.trim().parse().ok())
    };
    let fields = [
        ("final.train.norm_return", "mean.final.train.norm_return"),
        ("final.train.win_rate", "mean.final.train.win_rate"),
        ("final.train.mean_length", "mean.final.train.mean_length"),
        ("final.ood.norm_return", "mean.final.ood.norm_return"),
        ("final.ood.win_rate", "mean.final.ood.win_rate"),
        ("final.ood.mean_length", "mean.final.ood.mean_length"),
    ];
    let mut sums = vec![0.0f64; fields.len()];
    let mut completed = 0usize;
    for &seed in &cfg.seeds {
        let path = dir.join(format!("seed_{seed}")).join("summary.cfg");
        let Ok(text) = fs::read_to_string(&path) else { continue };
        if read_field(&text, "status").is_some() {
            // status is textual; presence of the file is what matters
        }
        if !text.contains("status = ok") {
            continue;
        }
        completed += 1;
        for (i, (src, _)) in fields.iter().enumerate() {
            sums[i] += read_field(&text, src).unwrap_or(0.0);
        }
    }
    let mut s = csv_header(cfg);
    let _ = writeln!(s, "seeds_completed = {completed}");
    let _ = writeln!(s, "seeds_requested = {}", cfg.seeds.len());
    if completed > 0 {
        for (i, (_, dst)) in fields.iter().enumerate() {
            let _ = writeln!(s, "{dst} = {}", sums[i] / completed as f64);
        }
    }
    write(&dir.join("summary.cfg"), &s)
}

// ── latent exports (two-channel runs) ───────────────────────────────

fn latent_rollouts_csv<S: Scalar>(
    cfg: &ExperimentConfig,
    agent: &SacAgent<S>,
    seed: u64,
) -> Result<String, String> {
    let mut s = csv_header(cfg);
    s.push_str("episode,t,mu_b,sigma_b,obs,action,x0,x1\n");
    let mut env = BestArmEnv::new(cfg.env_config(), mix(&[seed, 0x2011]));
    for ep in 0..20 {
        // replay one greedy episode, recording the latent trajectory
        let mut policy = AgentPolicy::greedy(agent);
        use kflayers::env::Policy as _;
        policy.reset();
        let mut obs = env.reset(LatentSplit::Train);
        let (mu, sigma) = {
            let st = env.state().unwrap();
            (st.mu, st.sigma)
        };
        let mut obs_hist: Vec<Vec<f64>> = Vec::new();
        let mut act_hist: Vec<usize> = Vec::new();
        for t in 0..cfg.max_steps {
            obs_hist.push(obs.clone());
            let action = agent.greedy_action(&obs_hist, &act_hist);
            let states = agent
                .latent_trajectory(&obs_hist, &act_hist)
                .ok_or("latent export needs an encoder")?;
            let last = states.last().unwrap();
            let _ = writeln!(
                s,
                "{ep},{t},{mu},{sigma},{},{action},{},{}",
                obs[0], last[0], last[1]
            );
            act_hist.push(action);
            let (next, _, done) = env.step(action);
            if done {
                break;
            }
            obs = next;
        }
    }
    Ok(s)
}

fn policy_grid_csv<S: Scalar>(
    cfg: &ExperimentConfig,
    agent: &SacAgent<S>,
) -> Result<String, String> {
    // Actor read-out over the latent plane, at a fixed observation of zero
    // and a previous request action.
    let mut s = csv_header(cfg);
    s.push_str("x0,x1,p_request,p_above,p_below,argmax\n");
    let stack = agent.actor_stack.as_ref().ok_or("needs an encoder")?;
    let layer = stack
        .encoder
        .layers
        .last()
        .expect("encoder has at least one layer");
    let e = cfg.embed;
    for &x0 in linspace(-3.0, 3.0, 41).iter() {
        for &x1 in linspace(-3.0, 3.0, 41).iter() {
            let mut tape = Tape::<S>::new();
            // z = W_out' x for the plotted latent point
            let mut z = vec![0.0f64; e];
            for j in 0..e {
                z[j] = layer.w_out.data()[j].to_f64() * x0 + layer.w_out.data()[e + j].to_f64() * x1;
            }
            let mut row: Vec<f64> = z;
            row.push(0.0); // observation skip
            let mut prev = vec![0.0; 3];
            prev[kflayers::env::REQUEST] = 1.0;
            row.extend(prev);
            let x = tape.constant(Array::from_f64s(vec![1, row.len()], &row));
            let logits = agent.actor_head.bind(&mut tape).forward(&mut tape, x);
            let lsm = tape.log_softmax(logits);
            let p: Vec<f64> = tape.value(lsm).to_f64_vec().iter().map(|l| l.exp()).collect();
            let argmax = (0..3).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
            let _ = writeln!(s, "{x0},{x1},{},{},{},{argmax}", p[0], p[1], p[2]);
        }
    }
    Ok(s)
}

// ── grid evaluation over trained checkpoints ────────────────────────

pub struct GridSpec {
    pub mus: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub episodes: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            mus: linspace(-0.5, 0.5, 25),
            sigmas: linspace(0.0, 3.0, 25),
            episodes: 100,
        }
    }
}

#[derive(Debug)]
pub struct GridOutput {
    pub per_agent: String,
    pub aggregated: String,
    pub cells: usize,
}

/// Evaluate every seed's final checkpoint from a run directory over the
/// latent grid. Fails up front, without partial output, when any seed's
/// checkpoint is missing.
pub fn run_grid_eval(run_dir: &Path, spec: &GridSpec) -> Result<GridOutput, String> {
    let cfg_path = run_dir.join("resolved.cfg");
    let cfg_text = fs::read_to_string(&cfg_path)
        .map_err(|e| format!("cannot read {}: {e}", cfg_path.display()))?;
    let mut cfg = ExperimentConfig::default();
    cfg.apply_text(&cfg_text).map_err(|e| e.to_string())?;

    let missing: Vec<String> = cfg
        .seeds
        .iter()
        .filter(|s| !run_dir.join(format!("seed_{s}")).join("checkpoint_final.kfc").exists())
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(format!(
            "missing final checkpoints for seeds: {}",
            missing.join(", ")
        ));
    }

    let mut per_agent_rows: Vec<(u64, GridCell)> = Vec::new();
    for &seed in &cfg.seeds {
        let path = run_dir.join(format!("seed_{seed}")).join("checkpoint_final.kfc");
        let cells = match cfg.precision {
            Precision::F32 => grid_eval_agent::<f32>(&cfg, &path, seed, spec)?,
            Precision::F64 => grid_eval_agent::<f64>(&cfg, &path, seed, spec)?,
        };
        per_agent_rows.extend(cells.into_iter().map(|c| (seed, c)));
    }

    let mut per_agent = csv_header(&cfg);
    per_agent.push_str("mu_b,sigma_b,agent_seed,win_rate,mean_length,n_episodes\n");
    for (seed, c) in &per_agent_rows {
        let _ = writeln!(
            per_agent,
            "{},{},{},{},{},{}",
            c.mu, c.sigma, seed, c.win_rate, c.mean_length, c.n_episodes
        );
    }

    let mut aggregated = csv_header(&cfg);
    aggregated.push_str("mu_b,sigma_b,win_rate,mean_length,n_episodes\n");
    let agents = cfg.seeds.len() as f64;
    let cells_per_agent = spec.mus.len() * spec.sigmas.len();
    for i in 0..cells_per_agent {
        let group: Vec<&GridCell> = per_agent_rows
            .iter()
            .skip(i)
            .step_by(cells_per_agent)
            .map(|(_, c)| c)
            .collect();
        let c0 = group[0];
        let win = group.iter().map(|c| c.win_rate).sum::<f64>() / agents;
        let len = group.iter().map(|c| c.mean_length).sum::<f64>() / agents;
        let eps: usize = group.iter().map(|c| c.n_episodes).sum();
        let _ = writeln!(
            aggregated,
            "{},{},{},{},{}",
            c0.mu, c0.sigma, win, len, eps
        );
    }

    Ok(GridOutput {
        per_agent,
        aggregated,
        cells: cells_per_agent,
    })
}

pub fn grid_eval_agent<S: Scalar>(
    cfg: &ExperimentConfig,
    checkpoint_path: &Path,
    seed: u64,
    spec: &GridSpec,
) -> Result<Vec<GridCell>, String> {
    let entries = checkpoint::load::<S>(checkpoint_path).map_err(|e| e.to_string())?;
    let mut agent = SacAgent::<S>::init(cfg.rac_config(), cfg.sac_config(), 0);
    agent.load_named_params(&entries)?;
    Ok(grid_evaluate(
        &cfg.env_config(),
        &spec.mus,
        &spec.sigmas,
        spec.episodes,
        mix(&[seed, 0x9e1d]),
        || AgentPolicy::greedy(&agent),
    ))
}

/// Roll a handful of greedy episodes and report win rate; used by smoke
/// diagnostics.
pub fn quick_eval<S: Scalar>(cfg: &ExperimentConfig, agent: &SacAgent<S>, episodes: usize) -> f64 {
    let mut env = BestArmEnv::new(cfg.env_config(), 0xE7A1);
    let mut policy = AgentPolicy::greedy(agent);
    let mut wins = 0;
    for _ in 0..episodes {
        wins += run_episode(&mut env, LatentSplit::Train, &mut policy).won as usize;
    }
    wins as f64 / episodes as f64
}
