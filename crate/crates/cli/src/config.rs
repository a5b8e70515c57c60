//! Flat dotted-key experiment configuration.
//!
//! The on-disk format is `key = value` lines with `#` comments, one setting
//! per line, diffable by eye. Defaults reproduce the Best Arm experiment
//! table exactly; anything can be overridden from a file or `--set` flags.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use kflayers::agent::{EncoderChoice, RacConfig, SacConfig, TrainConfig};
use kflayers::env::{BestArmConfig, ObservationKind, NUM_ACTIONS};
use kflayers::kalman::ScanMode;
use kflayers::layers::{LayerKind, LayerVariant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    VSsm,
    VSsmKf,
    VSsmKfU,
    Oracle,
    Memoryless,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::VSsm => "vssm",
            Variant::VSsmKf => "vssm-kf",
            Variant::VSsmKfU => "vssm-kf-u",
            Variant::Oracle => "oracle",
            Variant::Memoryless => "memoryless",
        }
    }

    pub fn observation(&self) -> ObservationKind {
        match self {
            Variant::Oracle => ObservationKind::Oracle,
            _ => ObservationKind::Raw,
        }
    }
}

/// Everything one experiment needs: environment, architecture, SAC training
/// schedule, seeds and output.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub precision: Precision,
    pub seeds: Vec<u64>,
    pub variant: Variant,
    pub out_dir: String,

    pub rho: f64,
    pub win_reward: f64,
    pub lose_reward: f64,
    pub max_steps: usize,
    pub mu_min: f64,
    pub mu_max: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub ood_sigma_min: f64,
    pub ood_sigma_max: f64,

    pub latent_n: usize,
    pub embed: usize,
    pub layers: usize,
    pub rms_norm: bool,
    pub q_init: f64,
    pub scan: ScanMode,
    pub time_varying_q: bool,
    pub cov_feature: bool,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,

    pub gamma: f64,
    pub alpha: f64,
    pub lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub context_len: usize,
    pub utd: f64,
    pub grad_clip: f64,

    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub learning_starts: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            precision: Precision::F32,
            seeds: vec![0],
            variant: Variant::VSsmKf,
            out_dir: "runs/latest".to_string(),
            rho: 0.0,
            win_reward: 10.0,
            lose_reward: -10.0,
            max_steps: 1000,
            mu_min: -0.5,
            mu_max: 0.5,
            sigma_min: 0.0,
            sigma_max: 2.0,
            ood_sigma_min: 2.0,
            ood_sigma_max: 3.0,
            latent_n: 128,
            embed: 16,
            layers: 1,
            rms_norm: false,
            q_init: 1.0,
            scan: ScanMode::Parallel,
            time_varying_q: false,
            cov_feature: false,
            actor_hidden: vec![128],
            critic_hidden: vec![256],
            gamma: 0.99,
            alpha: 0.1,
            lr: 3e-4,
            tau: 0.005,
            batch_size: 64,
            context_len: 256,
            utd: 0.25,
            grad_clip: 0.0,
            total_steps: 500_000,
            eval_every: 10_000,
            eval_episodes: 100,
            learning_starts: 1000,
        }
    }
}

#[derive(Debug)]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config field `{}`: {}", self.field, self.message)
    }
}

impl std::error::Error for ConfigError {}

fn err(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.to_string(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err("<file>", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                err(
                    &format!("<line {}>", lineno + 1),
                    format!("expected `key = value`, got `{line}`"),
                )
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| err(key, format!("cannot parse `{value}`: {e}")))
        }
        fn parse_bool(key: &str, value: &str) -> Result<bool, ConfigError> {
            match value {
                "true" | "yes" | "on" | "1" => Ok(true),
                "false" | "no" | "off" | "0" => Ok(false),
                _ => Err(err(key, format!("expected a boolean, got `{value}`"))),
            }
        }
        fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value
                .split(',')
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| parse::<T>(key, s))
                .collect()
        }

        match key {
            "precision" => {
                self.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(err(key, "expected f32 or f64")),
                }
            }
            "seed" => self.seeds = vec![parse::<u64>(key, value)?],
            "seeds" => {
                self.seeds = parse_list::<u64>(key, value)?;
                if self.seeds.is_empty() {
                    return Err(err(key, "need at least one seed"));
                }
            }
            "variant" => {
                self.variant = match value {
                    "vssm" => Variant::VSsm,
                    "vssm-kf" => Variant::VSsmKf,
                    "vssm-kf-u" => Variant::VSsmKfU,
                    "oracle" => Variant::Oracle,
                    "memoryless" => Variant::Memoryless,
                    _ => {
                        return Err(err(
                            key,
                            "expected one of vssm, vssm-kf, vssm-kf-u, oracle, memoryless",
                        ))
                    }
                }
            }
            "out_dir" => self.out_dir = value.to_string(),
            "env.rho" => self.rho = parse(key, value)?,
            "env.win_reward" => self.win_reward = parse(key, value)?,
            "env.lose_reward" => self.lose_reward = parse(key, value)?,
            "env.max_steps" => self.max_steps = parse(key, value)?,
            "env.mu_min" => self.mu_min = parse(key, value)?,
            "env.mu_max" => self.mu_max = parse(key, value)?,
            "env.sigma_min" => self.sigma_min = parse(key, value)?,
            "env.sigma_max" => self.sigma_max = parse(key, value)?,
            "env.ood_sigma_min" => self.ood_sigma_min = parse(key, value)?,
            "env.ood_sigma_max" => self.ood_sigma_max = parse(key, value)?,
            "encoder.n" => self.latent_n = parse(key, value)?,
            "encoder.embed" => self.embed = parse(key, value)?,
            "encoder.layers" => self.layers = parse(key, value)?,
            "encoder.rms_norm" => self.rms_norm = parse_bool(key, value)?,
            "encoder.q_init" => {
                self.q_init = parse(key, value)?;
                if self.q_init <= 0.0 {
                    return Err(err(key, "initial process noise must be positive"));
                }
            }
            "encoder.scan" => {
                self.scan = match value {
                    "parallel" => ScanMode::Parallel,
                    "sequential" => ScanMode::Sequential,
                    _ => return Err(err(key, "expected parallel or sequential")),
                }
            }
            "encoder.time_varying_q" => self.time_varying_q = parse_bool(key, value)?,
            "encoder.cov_feature" => self.cov_feature = parse_bool(key, value)?,
            "rac.actor_hidden" => self.actor_hidden = parse_list(key, value)?,
            "rac.critic_hidden" => self.critic_hidden = parse_list(key, value)?,
            "sac.gamma" => self.gamma = parse(key, value)?,
            "sac.alpha" => self.alpha = parse(key, value)?,
            "sac.lr" => self.lr = parse(key, value)?,
            "sac.tau" => self.tau = parse(key, value)?,
            "sac.batch" => self.batch_size = parse(key, value)?,
            "sac.context" => self.context_len = parse(key, value)?,
            "sac.utd" => self.utd = parse(key, value)?,
            "sac.grad_clip" => self.grad_clip = parse(key, value)?,
            "train.steps" => self.total_steps = parse(key, value)?,
            "train.eval_every" => self.eval_every = parse(key, value)?,
            "train.eval_episodes" => self.eval_episodes = parse(key, value)?,
            "train.learning_starts" => self.learning_starts = parse(key, value)?,
            _ => return Err(err(key, "unknown setting")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sigma_min < 0.0 {
            return Err(err("env.sigma_min", "noise scale cannot be negative"));
        }
        if self.max_steps < 1 {
            return Err(err("env.max_steps", "need at least one step"));
        }
        if self.utd <= 0.0 {
            return Err(err("sac.utd", "update-to-data ratio must be positive"));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(err("train.eval_every", "evaluation cadence must be positive"));
        }
        if matches!(self.variant, Variant::Oracle | Variant::Memoryless)
            && (self.time_varying_q || self.cov_feature || self.rms_norm)
        {
            return Err(err(
                "variant",
                "encoder feature flags have no effect without an encoder",
            ));
        }
        Ok(())
    }

    pub fn env_config(&self) -> BestArmConfig {
        BestArmConfig {
            rho: self.rho,
            win_reward: self.win_reward,
            lose_reward: self.lose_reward,
            max_steps: self.max_steps,
            mu_range: (self.mu_min, self.mu_max),
            sigma_range: (self.sigma_min, self.sigma_max),
            ood_sigma_range: (self.ood_sigma_min, self.ood_sigma_max),
            observation: self.variant.observation(),
        }
    }

    pub fn encoder_choice(&self) -> EncoderChoice {
        let kind = match self.variant {
            Variant::VSsm => LayerKind::VSsm,
            Variant::VSsmKf => LayerKind::VSsmKf,
            Variant::VSsmKfU => LayerKind::VSsmKfNoU,
            Variant::Oracle | Variant::Memoryless => return EncoderChoice::None,
        };
        EncoderChoice::Ssm(LayerVariant {
            kind,
            time_varying_process_noise: self.time_varying_q,
            covariance_output_feature: self.cov_feature,
        })
    }

    pub fn rac_config(&self) -> RacConfig {
        RacConfig {
            encoder: self.encoder_choice(),
            obs_dim: self.variant.observation().dim(),
            num_actions: NUM_ACTIONS,
            embed: self.embed,
            latent: self.latent_n,
            layers: self.layers,
            rms_norm: self.rms_norm,
            q_init: self.q_init,
            actor_hidden: self.actor_hidden.clone(),
            critic_hidden: self.critic_hidden.clone(),
            scan: self.scan,
        }
    }

    pub fn sac_config(&self) -> SacConfig {
        SacConfig {
            gamma: self.gamma,
            alpha: self.alpha,
            lr: self.lr,
            tau: self.tau,
            batch_size: self.batch_size,
            context_len: self.context_len,
            utd: self.utd,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            total_steps: self.total_steps,
            log_progress: true,
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
            learning_starts: self.learning_starts,
            env: self.env_config(),
            rac: self.rac_config(),
            sac: self.sac_config(),
        }
    }

    /// Canonical text form; `apply_text(resolve())` round-trips.
    pub fn resolve(&self) -> String {
        let mut s = String::new();
        let mut w = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        w(
            "precision",
            match self.precision {
                Precision::F32 => "f32",
                Precision::F64 => "f64",
            }
            .to_string(),
        );
        w(
            "seeds",
            self.seeds
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        w("variant", self.variant.as_str().to_string());
        w("out_dir", self.out_dir.clone());
        w("env.rho", self.rho.to_string());
        w("env.win_reward", self.win_reward.to_string());
        w("env.lose_reward", self.lose_reward.to_string());
        w("env.max_steps", self.max_steps.to_string());
        w("env.mu_min", self.mu_min.to_string());
        w("env.mu_max", self.mu_max.to_string());
        w("env.sigma_min", self.sigma_min.to_string());
        w("env.sigma_max", self.sigma_max.to_string());
        w("env.ood_sigma_min", self.ood_sigma_min.to_string());
        w("env.ood_sigma_max", self.ood_sigma_max.to_string());
        w("encoder.n", self.latent_n.to_string());
        w("encoder.embed", self.embed.to_string());
        w("encoder.layers", self.layers.to_string());
        w("encoder.rms_norm", self.rms_norm.to_string());
        w("encoder.q_init", self.q_init.to_string());
        w(
            "encoder.scan",
            match self.scan {
                ScanMode::Parallel => "parallel",
                ScanMode::Sequential => "sequential",
            }
            .to_string(),
        );
        w("encoder.time_varying_q", self.time_varying_q.to_string());
        w("encoder.cov_feature", self.cov_feature.to_string());
        w(
            "rac.actor_hidden",
            self.actor_hidden
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        w(
            "rac.critic_hidden",
            self.critic_hidden
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        w("sac.gamma", self.gamma.to_string());
        w("sac.alpha", self.alpha.to_string());
        w("sac.lr", self.lr.to_string());
        w("sac.tau", self.tau.to_string());
        w("sac.batch", self.batch_size.to_string());
        w("sac.context", self.context_len.to_string());
        w("sac.utd", self.utd.to_string());
        w("sac.grad_clip", self.grad_clip.to_string());
        w("train.steps", self.total_steps.to_string());
        w("train.eval_every", self.eval_every.to_string());
        w("train.eval_episodes", self.eval_episodes.to_string());
        w("train.learning_starts", self.learning_starts.to_string());
        s
    }

    /// FNV-1a of the resolved text; embedded in artifacts so any row traces
    /// back to an exact configuration.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for b in self.resolve().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Lint helper for tests: every settable key, for coverage checks.
pub fn known_keys() -> BTreeSet<&'static str> {
    [
        "precision",
        "seed",
        "seeds",
        "variant",
        "out_dir",
        "env.rho",
        "env.win_reward",
        "env.lose_reward",
        "env.max_steps",
        "env.mu_min",
        "env.mu_max",
        "env.sigma_min",
        "env.sigma_max",
        "env.ood_sigma_min",
        "env.ood_sigma_max",
        "encoder.n",
        "encoder.embed",
        "encoder.layers",
        "encoder.rms_norm",
        "encoder.q_init",
        "encoder.scan",
        "encoder.time_varying_q",
        "encoder.cov_feature",
        "rac.actor_hidden",
        "rac.critic_hidden",
        "sac.gamma",
        "sac.alpha",
        "sac.lr",
        "sac.tau",
        "sac.batch",
        "sac.context",
        "sac.utd",
        "sac.grad_clip",
        "train.steps",
        "train.eval_every",
        "train.eval_episodes",
        "train.learning_starts",
    ]
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_experiment_table() {
        let c = ExperimentConfig::default();
        assert_eq!(c.embed, 16);
        assert_eq!(c.latent_n, 128);
        assert_eq!(c.context_len, 256);
        assert_eq!(c.actor_hidden, vec![128]);
        assert_eq!(c.critic_hidden, vec![256]);
        assert_eq!(c.gamma, 0.99);
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.lr, 3e-4);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.utd, 0.25);
        assert_eq!(c.eval_episodes, 100);
        assert_eq!(c.total_steps, 500_000);
        assert!(!c.rms_norm);
        assert_eq!(c.layers, 1);
    }

    #[test]
    fn parse_and_resolve_round_trip() {
        let mut c = ExperimentConfig::default();
        c.apply_text("variant = vssm\nenv.rho = 0.1\nseeds = 3,4,5\nencoder.n = 2\n")
            .unwrap();
        assert_eq!(c.variant, Variant::VSsm);
        assert_eq!(c.seeds, vec![3, 4, 5]);
        let text = c.resolve();
        let mut c2 = ExperimentConfig::default();
        c2.apply_text(&text).unwrap();
        assert_eq!(c2.resolve(), text);
        assert_eq!(c.fingerprint(), c2.fingerprint());
    }

    #[test]
    fn unknown_and_malformed_keys_carry_the_field_path() {
        let mut c = ExperimentConfig::default();
        let e = c.set("sac.gama", "0.9").unwrap_err();
        assert_eq!(e.field, "sac.gama");
        let e = c.set("sac.gamma", "fast").unwrap_err();
        assert_eq!(e.field, "sac.gamma");
        assert!(e.to_string().contains("sac.gamma"));
        let e = c.apply_text("just a line\n").unwrap_err();
        assert!(e.field.contains("line 1"));
    }

    #[test]
    fn resolve_covers_every_known_key() {
        let c = ExperimentConfig::default();
        let text = c.resolve();
        let mut keys = known_keys();
        keys.remove("seed"); // alias of seeds
        for key in keys {
            assert!(
                text.lines().any(|l| l.starts_with(&format!("{key} = "))),
                "{key} missing from resolved config"
            );
        }
    }

    #[test]
    fn variant_wiring() {
        let mut c = ExperimentConfig::default();
        c.set("variant", "oracle").unwrap();
        assert_eq!(c.env_config().observation, ObservationKind::Oracle);
        assert!(matches!(c.encoder_choice(), EncoderChoice::None));
        assert_eq!(c.rac_config().obs_dim, 2);
        c.set("variant", "vssm-kf-u").unwrap();
        match c.encoder_choice() {
            EncoderChoice::Ssm(v) => assert_eq!(v.kind, LayerKind::VSsmKfNoU),
            _ => panic!(),
        }
    }
}
