//! Training loop: environment stepping interleaved with SAC updates at the
//! configured update-to-data ratio, periodic greedy evaluation on both latent
//! splits, and a non-finite-loss watchdog that aborts with partial artifacts.

use super::replay::{Episode, ReplayBuffer};
use super::{AgentPolicy, EncoderChoice, RacConfig, SacAgent, SacConfig};
use crate::env::{evaluate, BestArmConfig, BestArmEnv, EvalStats, LatentSplit, NUM_ACTIONS};
use crate::rng::{mix, Rng};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    /// Environment steps taken with uniform-random actions before any
    /// gradient updates.
    pub learning_starts: usize,
    /// Print one progress line per evaluation point to stderr.
    pub log_progress: bool,
    pub env: BestArmConfig,
    pub rac: RacConfig,
    pub sac: SacConfig,
}

/// One appended metric record per evaluation split and point.
#[derive(Clone, Debug)]
pub struct MetricRow {
    pub env_step: usize,
    pub split: &'static str,
    pub stats: EvalStats,
}

pub struct TrainOutput<S: Scalar> {
    pub agent: SacAgent<S>,
    pub metrics: Vec<MetricRow>,
    pub final_train: EvalStats,
    pub final_ood: EvalStats,
    pub updates: u64,
    /// Updates during which any encoder channel had drifted past |a| = 1.
    pub drift_events: usize,
    pub mean_critic_loss: f64,
    pub mean_actor_loss: f64,
}

/// Non-finite loss abort; carries whatever was produced up to the failure so
/// callers can dump partial artifacts.
pub struct TrainAbort<S: Scalar> {
    pub env_step: usize,
    pub reason: String,
    pub partial: TrainOutput<S>,
}

impl<S: Scalar> std::fmt::Debug for TrainAbort<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted at step {}: {}", self.env_step, self.reason)
    }
}

pub fn train<S: Scalar>(cfg: &TrainConfig) -> Result<TrainOutput<S>, Box<TrainAbort<S>>> {
    assert_eq!(cfg.rac.obs_dim, cfg.env.observation.dim(), "config obs_dim");
    assert_eq!(cfg.rac.num_actions, NUM_ACTIONS);
    match cfg.rac.encoder {
        EncoderChoice::None => {}
        EncoderChoice::Ssm(_) => {}
    }

    let mut env = BestArmEnv::new(cfg.env.clone(), mix(&[cfg.seed, 1]));
    let mut agent = SacAgent::<S>::init(cfg.rac.clone(), cfg.sac.clone(), mix(&[cfg.seed, 2]));
    let mut act_rng = Rng::new(mix(&[cfg.seed, 3]));
    let mut sample_rng = Rng::new(mix(&[cfg.seed, 4]));
    let mut buffer = ReplayBuffer::new();

    let mut metrics: Vec<MetricRow> = Vec::new();
    let mut obs_hist: Vec<Vec<f64>> = vec![env.reset(LatentSplit::Train)];
    let mut act_hist: Vec<usize> = Vec::new();
    let mut rew_hist: Vec<f64> = Vec::new();

    let mut update_debt = 0.0f64;
    let mut updates = 0u64;
    let mut drift_events = 0usize;
    let (mut critic_sum, mut actor_sum) = (0.0f64, 0.0f64);

    let mut result_err: Option<(usize, String)> = None;

    for step in 0..cfg.total_steps {
        let action = if step < cfg.learning_starts {
            act_rng.below(NUM_ACTIONS)
        } else {
            agent.sample_action(&obs_hist, &act_hist, &mut act_rng)
        };
        let (next_obs, reward, done) = env.step(action);
        act_hist.push(action);
        rew_hist.push(reward);
        if done {
            buffer.push(Episode {
                obs: std::mem::take(&mut obs_hist),
                actions: std::mem::take(&mut act_hist),
                rewards: std::mem::take(&mut rew_hist),
            });
            obs_hist.push(env.reset(LatentSplit::Train));
        } else {
            obs_hist.push(next_obs);
        }

        if step + 1 >= cfg.learning_starts && !buffer.is_empty() {
            update_debt += cfg.sac.utd;
            while update_debt >= 1.0 {
                update_debt -= 1.0;
                let batch = buffer.sample::<S>(
                    &mut sample_rng,
                    cfg.sac.batch_size,
                    cfg.sac.context_len,
                    cfg.rac.obs_dim,
                );
                match agent.update(&batch) {
                    Ok(losses) => {
                        updates += 1;
                        critic_sum += losses.critic;
                        actor_sum += losses.actor;
                        if losses.encoder_drift_channels > 0 {
                            drift_events += 1;
                        }
                    }
                    Err(e) => {
                        result_err =
                            Some((step, format!("non-finite {} loss: {}", e.which, e.value)));
                        break;
                    }
                }
            }
        }

        let at_eval =
            result_err.is_none() && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.total_steps);
        if at_eval {
            for (split, name, tag) in [
                (LatentSplit::Train, "train_dist", 5u64),
                (LatentSplit::Ood, "ood", 6u64),
            ] {
                let stats = evaluate(
                    &cfg.env,
                    split,
                    cfg.eval_episodes,
                    mix(&[cfg.seed, tag, (step + 1) as u64]),
                    || AgentPolicy::greedy(&agent),
                );
                metrics.push(MetricRow {
                    env_step: step + 1,
                    split: name,
                    stats,
                });
            }
            if cfg.log_progress {
                let last = &metrics[metrics.len() - 2..];
                eprintln!(
                    "[seed {}] step {:>7}: train win {:.2} len {:>6.1} | ood win {:.2} len {:>6.1} | updates {}",
                    cfg.seed,
                    step + 1,
                    last[0].stats.win_rate,
                    last[0].stats.mean_length,
                    last[1].stats.win_rate,
                    last[1].stats.mean_length,
                    updates
                );
            }
        }
        if result_err.is_some() {
            break;
        }
    }

    let pick = |metrics: &[MetricRow], split: &str| {
        metrics
            .iter()
            .rev()
            .find(|m| m.split == split)
            .map(|m| m.stats)
            .unwrap_or_default()
    };
    let out = TrainOutput {
        final_train: pick(&metrics, "train_dist"),
        final_ood: pick(&metrics, "ood"),
        agent,
        updates,
        drift_events,
        mean_critic_loss: critic_sum / (updates.max(1) as f64),
        mean_actor_loss: actor_sum / (updates.max(1) as f64),
        metrics,
    };
    match result_err {
        None => Ok(out),
        Some((env_step, reason)) => Err(Box::new(TrainAbort {
            env_step,
            reason,
            partial: out,
        })),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kalman::ScanMode;
    use crate::layers::{LayerKind, LayerVariant};

    fn tiny_config(seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            total_steps: 600,
            log_progress: false,
            eval_every: 300,
            eval_episodes: 5,
            learning_starts: 100,
            env: BestArmConfig::default(),
            rac: RacConfig {
                encoder: EncoderChoice::Ssm(LayerVariant::new(LayerKind::VSsmKf)),
                obs_dim: 1,
                num_actions: NUM_ACTIONS,
                embed: 4,
                latent: 4,
                layers: 1,
                rms_norm: false,
                q_init: 1.0,
                actor_hidden: vec![8],
                critic_hidden: vec![8],
                scan: ScanMode::Parallel,
            },
            sac: SacConfig {
                batch_size: 8,
                context_len: 16,
                ..SacConfig::default()
            },
        }
    }

    #[test]
    fn identical_seeds_reproduce_metrics_and_parameters() {
        let a = train::<f32>(&tiny_config(123)).unwrap();
        let b = train::<f32>(&tiny_config(123)).unwrap();
        assert_eq!(a.metrics.len(), b.metrics.len());
        for (x, y) in a.metrics.iter().zip(&b.metrics) {
            assert_eq!(x.env_step, y.env_step);
            assert_eq!(x.split, y.split);
            assert_eq!(x.stats.mean_return.to_bits(), y.stats.mean_return.to_bits());
            assert_eq!(x.stats.win_rate.to_bits(), y.stats.win_rate.to_bits());
            assert_eq!(x.stats.mean_length.to_bits(), y.stats.mean_length.to_bits());
        }
        for ((_, pa), (_, pb)) in a.agent.named_params().iter().zip(b.agent.named_params()) {
            assert_eq!(pa.data(), pb.data());
        }
        assert!(a.updates > 0);
    }

    #[test]
    fn different_seeds_diverge() {
        let a = train::<f32>(&tiny_config(1)).unwrap();
        let b = train::<f32>(&tiny_config(2)).unwrap();
        let same = a
            .metrics
            .iter()
            .zip(&b.metrics)
            .all(|(x, y)| x.stats.mean_return == y.stats.mean_return);
        assert!(!same);
    }

    #[test]
    fn memoryless_training_runs_end_to_end() {
        let mut cfg = tiny_config(5);
        cfg.rac.encoder = EncoderChoice::None;
        let out = train::<f32>(&cfg).unwrap();
        assert!(out.updates > 0);
        assert_eq!(out.final_train.episodes, 5);
    }
}
