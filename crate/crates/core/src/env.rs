//! Best Arm Identification POMDP.
//!
//! Each episode hides a bandit `N(mu_b, sigma_b)` whose latents are resampled
//! at reset. The agent either requests one more noisy scalar draw (paying a
//! cost) or commits to "the mean is above zero" / "below zero", which ends
//! the episode with a win or a loss. An episode that reaches the step limit
//! without a decision ends with the loss reward.

use rayon::prelude::*;

use crate::kalman::bayes_oracle_iid;
use crate::rng::Rng;

pub const REQUEST: usize = 0;
pub const DECIDE_ABOVE: usize = 1;
pub const DECIDE_BELOW: usize = 2;
pub const NUM_ACTIONS: usize = 3;

/// Environment parameters. Defaults: zero request cost, symmetric +10/-10
/// outcome rewards, 1000-step limit, train latents `mu ~ U(-0.5, 0.5)`,
/// `sigma ~ U(0, 2)`, out-of-distribution `sigma ~ U(2, 3)`.
#[derive(Clone, Debug)]
pub struct BestArmConfig {
    pub rho: f64,
    pub win_reward: f64,
    pub lose_reward: f64,
    pub max_steps: usize,
    pub mu_range: (f64, f64),
    pub sigma_range: (f64, f64),
    pub ood_sigma_range: (f64, f64),
    pub observation: ObservationKind,
}

impl Default for BestArmConfig {
    fn default() -> Self {
        BestArmConfig {
            rho: 0.0,
            win_reward: 10.0,
            lose_reward: -10.0,
            max_steps: 1000,
            mu_range: (-0.5, 0.5),
            sigma_range: (0.0, 2.0),
            ood_sigma_range: (2.0, 3.0),
            observation: ObservationKind::Raw,
        }
    }
}

/// What the observation channel carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObservationKind {
    /// One scalar draw from the bandit per step.
    Raw,
    /// Conjugate posterior mean and standard deviation over `mu_b`, computed
    /// from all draws so far with a plug-in noise variance (floored sample
    /// variance). Replaces the raw channel for the privileged agent.
    Oracle,
}

impl ObservationKind {
    pub fn dim(&self) -> usize {
        match self {
            ObservationKind::Raw => 1,
            ObservationKind::Oracle => 2,
        }
    }
}

/// Which latent-parameter distribution reset draws from.
#[derive(Clone, Copy, Debug)]
pub enum LatentSplit {
    Train,
    Ood,
    /// Pin the latents exactly (grid evaluation).
    Fixed { mu: f64, sigma: f64 },
}

#[derive(Clone, Debug)]
pub struct EpisodeState {
    pub mu: f64,
    pub sigma: f64,
    pub steps_taken: usize,
    pub draws: Vec<f64>,
    pub done: bool,
}

pub struct BestArmEnv {
    pub config: BestArmConfig,
    rng: Rng,
    state: Option<EpisodeState>,
}

const ORACLE_VAR_FLOOR: f64 = 1e-3;

impl BestArmEnv {
    pub fn new(config: BestArmConfig, seed: u64) -> Self {
        BestArmEnv {
            config,
            rng: Rng::new(seed),
            state: None,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.config.observation.dim()
    }

    pub fn state(&self) -> Option<&EpisodeState> {
        self.state.as_ref()
    }

    /// Start an episode: sample latents from the split and emit the first
    /// observation, so the agent always holds one sample before acting.
    pub fn reset(&mut self, split: LatentSplit) -> Vec<f64> {
        let (mu, sigma) = match split {
            LatentSplit::Train => (
                self.rng
                    .range(self.config.mu_range.0, self.config.mu_range.1),
                self.rng
                    .range(self.config.sigma_range.0, self.config.sigma_range.1),
            ),
            LatentSplit::Ood => (
                self.rng
                    .range(self.config.mu_range.0, self.config.mu_range.1),
                self.rng
                    .range(self.config.ood_sigma_range.0, self.config.ood_sigma_range.1),
            ),
            LatentSplit::Fixed { mu, sigma } => (mu, sigma),
        };
        let mut state = EpisodeState {
            mu,
            sigma,
            steps_taken: 0,
            draws: Vec::new(),
            done: false,
        };
        let first = state.mu + state.sigma * self.rng.normal();
        state.draws.push(first);
        let obs = self.observe(&state);
        self.state = Some(state);
        obs
    }

    fn observe(&self, state: &EpisodeState) -> Vec<f64> {
        match self.config.observation {
            ObservationKind::Raw => vec![*state.draws.last().unwrap()],
            ObservationKind::Oracle => {
                let (mean, std) = oracle_observation(&state.draws);
                vec![mean, std]
            }
        }
    }

    /// Apply one action. Panics if the episode is already done.
    pub fn step(&mut self, action: usize) -> (Vec<f64>, f64, bool) {
        let config = self.config.clone();
        let state = self.state.as_mut().expect("step before reset");
        assert!(!state.done, "step on a finished episode");
        assert!(action < NUM_ACTIONS, "unknown action {action}");
        state.steps_taken += 1;

        match action {
            REQUEST => {
                let draw = state.mu + state.sigma * self.rng.normal();
                state.draws.push(draw);
                if state.steps_taken >= config.max_steps {
                    // Time limit: the pending decision never came.
                    state.done = true;
                    let state = self.state.as_ref().unwrap();
                    (self.observe(state), -config.rho + config.lose_reward, true)
                } else {
                    let state = self.state.as_ref().unwrap();
                    (self.observe(state), -config.rho, false)
                }
            }
            DECIDE_ABOVE | DECIDE_BELOW => {
                // mu exactly zero counts as "not above".
                let above = state.mu > 0.0;
                let correct = (action == DECIDE_ABOVE) == above;
                state.done = true;
                let reward = if correct {
                    config.win_reward
                } else {
                    config.lose_reward
                };
                (vec![0.0; config.observation.dim()], reward, true)
            }
            _ => unreachable!(),
        }
    }
}

/// Conjugate posterior (mean, std) over the latent mean given all draws so
/// far: standard-normal prior, plug-in noise variance
/// `max(sample variance, 1e-3)`.
pub fn oracle_observation(draws: &[f64]) -> (f64, f64) {
    assert!(!draws.is_empty(), "oracle needs at least one draw");
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sample_var = if draws.len() >= 2 {
        draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    let noise_var = sample_var.max(ORACLE_VAR_FLOOR);
    let (post_mean, post_var) = bayes_oracle_iid(draws, 0.0, 1.0, noise_var);
    (post_mean, post_var.sqrt())
}

// ── evaluation ──────────────────────────────────────────────────────

/// A stateful episode policy: `reset` at episode start, then one action per
/// observation.
pub trait Policy {
    fn reset(&mut self);
    fn act(&mut self, obs: &[f64]) -> usize;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EpisodeOutcome {
    pub ret: f64,
    pub len: usize,
    pub won: bool,
}

/// Roll one episode to termination under `policy`.
pub fn run_episode(
    env: &mut BestArmEnv,
    split: LatentSplit,
    policy: &mut dyn Policy,
) -> EpisodeOutcome {
    policy.reset();
    let mut obs = env.reset(split);
    let mut ret = 0.0;
    let mut len = 0;
    loop {
        let action = policy.act(&obs);
        let (next, reward, done) = env.step(action);
        ret += reward;
        len += 1;
        if done {
            let won = reward >= env.config.win_reward - env.config.rho;
            return EpisodeOutcome { ret, len, won };
        }
        obs = next;
    }
}

/// Aggregate evaluation statistics; returns are also reported normalized by
/// the win reward.
#[derive(Clone, Copy, Debug, Default)]
pub struct EvalStats {
    pub mean_return: f64,
    pub stderr_return: f64,
    pub mean_norm_return: f64,
    pub stderr_norm_return: f64,
    pub mean_length: f64,
    pub win_rate: f64,
    pub episodes: usize,
}

/// Evaluate over independent episodes, each on its own seed stream derived
/// from `seed` and the episode index. Episodes run concurrently (results are
/// aggregated in episode order, so the statistics do not depend on worker
/// count); `make_policy` builds one fresh policy per episode.
pub fn evaluate<P: Policy, F: Fn() -> P + Sync>(
    config: &BestArmConfig,
    split: LatentSplit,
    episodes: usize,
    seed: u64,
    make_policy: F,
) -> EvalStats {
    let outcomes: Vec<EpisodeOutcome> = (0..episodes)
        .into_par_iter()
        .map(|i| {
            let mut env = BestArmEnv::new(config.clone(), crate::rng::mix(&[seed, i as u64]));
            let mut policy = make_policy();
            run_episode(&mut env, split, &mut policy)
        })
        .collect();
    let n = episodes as f64;
    let mean = outcomes.iter().map(|o| o.ret).sum::<f64>() / n;
    let var = outcomes.iter().map(|o| (o.ret - mean).powi(2)).sum::<f64>() / n.max(1.0);
    let stderr = (var / n).sqrt();
    let norm = config.win_reward;
    EvalStats {
        mean_return: mean,
        stderr_return: stderr,
        mean_norm_return: mean / norm,
        stderr_norm_return: stderr / norm,
        mean_length: outcomes.iter().map(|o| o.len as f64).sum::<f64>() / n,
        win_rate: outcomes.iter().filter(|o| o.won).count() as f64 / n,
        episodes,
    }
}

/// One cell of the latent-parameter evaluation grid.
#[derive(Clone, Copy, Debug)]
pub struct GridCell {
    pub mu: f64,
    pub sigma: f64,
    pub win_rate: f64,
    pub mean_length: f64,
    pub n_episodes: usize,
}

/// Evenly spaced inclusive grid.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2);
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Evaluate a policy at every `(mu, sigma)` grid point by forcing the episode
/// latents, `episodes` rollouts per cell. Cells run concurrently on disjoint
/// seed streams; the output order is row-major over `(mu, sigma)` regardless
/// of scheduling.
pub fn grid_evaluate<P: Policy, F: Fn() -> P + Sync>(
    config: &BestArmConfig,
    mus: &[f64],
    sigmas: &[f64],
    episodes: usize,
    seed: u64,
    make_policy: F,
) -> Vec<GridCell> {
    let points: Vec<(usize, usize)> = (0..mus.len())
        .flat_map(|mi| (0..sigmas.len()).map(move |si| (mi, si)))
        .collect();
    points
        .into_par_iter()
        .map(|(mi, si)| {
            let (mu, sigma) = (mus[mi], sigmas[si]);
            let cell_seed = crate::rng::mix(&[seed, 0x67169, mi as u64, si as u64]);
            let mut env = BestArmEnv::new(config.clone(), cell_seed);
            let mut policy = make_policy();
            let mut wins = 0usize;
            let mut total_len = 0usize;
            for _ in 0..episodes {
                let out = run_episode(&mut env, LatentSplit::Fixed { mu, sigma }, &mut policy);
                wins += out.won as usize;
                total_len += out.len;
            }
            GridCell {
                mu,
                sigma,
                win_rate: wins as f64 / episodes as f64,
                mean_length: total_len as f64 / episodes as f64,
                n_episodes: episodes,
            }
        })
        .collect()
}
