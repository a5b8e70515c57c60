//! Episode storage and padded window sampling.
//!
//! The buffer keeps whole episodes (it is unbounded). Sampling draws an
//! episode uniformly, picks a uniform end position inside it, takes the
//! window of at most `context_len` steps ending there, and right-pads the
//! batch to its longest window.

use std::sync::Arc;

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Array;

/// Sentinel index meaning "no previous action" (one-hot encodes to zeros).
pub const NO_ACTION: usize = crate::env::NUM_ACTIONS;

/// One finished episode. `obs[t]` is what the agent saw when choosing
/// `actions[t]`; `rewards[t]` followed that action. The final step always
/// terminated the episode (decisions and the time limit both count).
#[derive(Clone, Debug)]
pub struct Episode {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Right-padded batch of sub-trajectory windows, flattened `[B, K]` row-major.
/// `mask[i] = true` marks padding; every row has at least one real step and
/// padding only at the tail.
pub struct PaddedBatch<S> {
    pub b: usize,
    pub k: usize,
    pub obs_dim: usize,
    /// `[B, K, obs_dim]`
    pub obs: Array<S>,
    /// Action taken at each step (`NO_ACTION` on padding).
    pub actions: Vec<usize>,
    /// Action taken at the previous step, shifted within the window; the
    /// first window step uses `NO_ACTION`.
    pub prev_actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Step ended the episode.
    pub dones: Vec<bool>,
    pub mask: Arc<Vec<bool>>,
}

impl<S: Scalar> PaddedBatch<S> {
    /// Assemble a batch from per-row windows `(episode, start, end)`
    /// inclusive of `end`, padded to `pad_to` (defaults to the longest
    /// window).
    pub fn from_windows(
        episodes: &[&Episode],
        windows: &[(usize, usize, usize)],
        obs_dim: usize,
        pad_to: Option<usize>,
    ) -> Self {
        let b = windows.len();
        assert!(b > 0);
        let longest = windows.iter().map(|&(_, s, e)| e - s + 1).max().unwrap();
        let k = pad_to.unwrap_or(longest).max(longest);

        let mut obs = Array::zeros(vec![b, k, obs_dim]);
        let mut actions = vec![NO_ACTION; b * k];
        let mut prev_actions = vec![NO_ACTION; b * k];
        let mut rewards = vec![0.0; b * k];
        let mut dones = vec![false; b * k];
        let mut mask = vec![true; b * k];

        for (row, &(ep_idx, start, end)) in windows.iter().enumerate() {
            let ep = episodes[ep_idx];
            assert!(end < ep.len() && start <= end);
            for (t, step) in (start..=end).enumerate() {
                let i = row * k + t;
                mask[i] = false;
                actions[i] = ep.actions[step];
                prev_actions[i] = if t == 0 { NO_ACTION } else { ep.actions[step - 1] };
                rewards[i] = ep.rewards[step];
                dones[i] = step + 1 == ep.len();
                let dst = &mut obs.data_mut()[i * obs_dim..(i + 1) * obs_dim];
                for (d, &o) in dst.iter_mut().zip(&ep.obs[step]) {
                    *d = S::from_f64(o);
                }
            }
        }

        PaddedBatch {
            b,
            k,
            obs_dim,
            obs,
            actions,
            prev_actions,
            rewards,
            dones,
            mask: Arc::new(mask),
        }
    }

    /// Real (non-padding) steps per batch.
    pub fn valid_steps(&self) -> usize {
        self.mask.iter().filter(|&&m| !m).count()
    }
}

#[derive(Default)]
pub struct ReplayBuffer {
    pub episodes: Vec<Episode>,
    pub total_steps: usize,
}

impl ReplayBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, episode: Episode) {
        assert!(!episode.is_empty());
        assert_eq!(episode.obs.len(), episode.len());
        assert_eq!(episode.rewards.len(), episode.len());
        self.total_steps += episode.len();
        self.episodes.push(episode);
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Uniform episode, uniform end position, window of at most
    /// `context_len` steps ending there.
    pub fn sample<S: Scalar>(
        &self,
        rng: &mut Rng,
        batch_size: usize,
        context_len: usize,
        obs_dim: usize,
    ) -> PaddedBatch<S> {
        assert!(!self.is_empty(), "sampling from an empty replay buffer");
        assert!(context_len >= 1);
        let mut windows = Vec::with_capacity(batch_size);
        let mut refs: Vec<&Episode> = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let ep_idx = rng.below(self.episodes.len());
            let ep = &self.episodes[ep_idx];
            let end = rng.below(ep.len());
            let start = (end + 1).saturating_sub(context_len);
            refs.push(ep);
            windows.push((refs.len() - 1, start, end));
        }
        PaddedBatch::from_windows(&refs, &windows, obs_dim, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::is_right_padding;

    fn episode(len: usize, base: f64) -> Episode {
        Episode {
            obs: (0..len).map(|t| vec![base + t as f64]).collect(),
            actions: (0..len).map(|t| t % 3).collect(),
            rewards: (0..len).map(|t| t as f64 * 0.1).collect(),
        }
    }

    #[test]
    fn short_episode_is_taken_whole_and_padded() {
        let mut buf = ReplayBuffer::new();
        buf.push(episode(3, 0.0));
        buf.push(episode(10, 100.0));
        let mut rng = Rng::new(1);
        let batch: PaddedBatch<f64> = buf.sample(&mut rng, 16, 8, 1);
        assert_eq!(batch.b, 16);
        assert!(batch.k <= 8);
        for row in 0..batch.b {
            let m = &batch.mask[row * batch.k..(row + 1) * batch.k];
            assert!(is_right_padding(m));
            assert!(!m[0]);
        }
    }

    #[test]
    fn window_prev_actions_shift_with_none_at_start() {
        let ep = episode(5, 0.0); // actions 0,1,2,0,1
        let batch: PaddedBatch<f64> =
            PaddedBatch::from_windows(&[&ep], &[(0, 2, 4)], 1, None);
        assert_eq!(batch.k, 3);
        assert_eq!(batch.actions[..3], [2, 0, 1]);
        assert_eq!(batch.prev_actions[..3], [NO_ACTION, 2, 0]);
        // only the true final episode step is terminal
        assert_eq!(batch.dones[..3], [false, false, true]);
    }

    #[test]
    fn windows_never_cross_episode_starts() {
        let ep = episode(6, 0.0);
        let batch: PaddedBatch<f64> = PaddedBatch::from_windows(&[&ep], &[(0, 0, 3)], 1, None);
        // start at episode start: first prev action is the none sentinel
        assert_eq!(batch.prev_actions[0], NO_ACTION);
        assert_eq!(batch.obs.data()[0], 0.0);
    }

    #[test]
    fn explicit_extra_padding_only_extends_mask() {
        let ep = episode(4, 0.0);
        let a: PaddedBatch<f64> = PaddedBatch::from_windows(&[&ep], &[(0, 0, 3)], 1, None);
        let b: PaddedBatch<f64> = PaddedBatch::from_windows(&[&ep], &[(0, 0, 3)], 1, Some(12));
        assert_eq!(a.k, 4);
        assert_eq!(b.k, 12);
        assert_eq!(a.valid_steps(), b.valid_steps());
        assert!(b.mask[4..].iter().all(|&m| m));
    }

    #[test]
    #[should_panic(expected = "empty replay buffer")]
    fn sampling_empty_buffer_is_rejected() {
        let buf = ReplayBuffer::new();
        let mut rng = Rng::new(2);
        let _: PaddedBatch<f64> = buf.sample(&mut rng, 1, 4, 1);
    }
}
