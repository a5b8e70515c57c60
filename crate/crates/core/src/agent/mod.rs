//! Recurrent actor-critic with discrete soft actor-critic losses.
//!
//! Two parallel stacks (no weight sharing): each owns a linear embedder over
//! `[observation, one-hot previous action]` and a history encoder, feeding an
//! MLP head that also receives skip connections from the current observation
//! and previous action. The critic stack feeds two Q heads; a Polyak-averaged
//! copy provides bootstrap targets. The memoryless and privileged agents are
//! the same machinery with the embedder and encoder removed.

pub mod nn;
pub mod replay;
mod train;

pub use train::{train, MetricRow, TrainAbort, TrainConfig, TrainOutput};

use std::sync::Arc;

use crate::env::NUM_ACTIONS;
use crate::kalman::ScanMode;
use crate::layers::{Encoder, EncoderVars, LayerDiagnostics, LayerVariant};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Array, Tape, Var};
use nn::{onehot, polyak_update, Adam, Linear, LinearVars, Mlp};
use replay::{PaddedBatch, NO_ACTION};

/// History encoder selection: the stateful agents wrap a layer variant; the
/// memoryless and privileged agents drop the stack entirely.
#[derive(Clone, Copy, Debug)]
pub enum EncoderChoice {
    None,
    Ssm(LayerVariant),
}

/// Architecture hyperparameters of the actor-critic.
#[derive(Clone, Debug)]
pub struct RacConfig {
    pub encoder: EncoderChoice,
    pub obs_dim: usize,
    pub num_actions: usize,
    pub embed: usize,
    pub latent: usize,
    pub layers: usize,
    pub rms_norm: bool,
    /// Initial process-noise level per channel.
    pub q_init: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub scan: ScanMode,
}

impl RacConfig {
    fn head_input(&self) -> usize {
        let enc = match self.encoder {
            EncoderChoice::None => 0,
            EncoderChoice::Ssm(_) => self.embed,
        };
        enc + self.obs_dim + self.num_actions
    }
}

/// SAC hyperparameters. The entropy temperature is fixed.
#[derive(Clone, Debug)]
pub struct SacConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub lr: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub context_len: usize,
    pub utd: f64,
    pub grad_clip: Option<f64>,
}

impl Default for SacConfig {
    fn default() -> Self {
        SacConfig {
            gamma: 0.99,
            alpha: 0.1,
            lr: 3e-4,
            tau: 0.005,
            batch_size: 64,
            context_len: 256,
            utd: 0.25,
            grad_clip: None,
        }
    }
}

/// Embedder + history encoder for one of the parallel stacks.
#[derive(Clone)]
pub struct Stack<S> {
    pub embed: Linear<S>,
    pub encoder: Encoder<S>,
}

impl<S: Scalar> Stack<S> {
    fn init(rac: &RacConfig, variant: LayerVariant, rng: &mut Rng) -> Self {
        Stack {
            embed: Linear::init(rac.obs_dim + rac.num_actions, rac.embed, rng),
            encoder: Encoder::init_with_noise(
                variant,
                rac.layers,
                rac.latent,
                rac.embed,
                rac.rms_norm,
                rac.q_init,
                rng,
            ),
        }
    }

    fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = vec![format!("{prefix}.embed.w"), format!("{prefix}.embed.b")];
        names.extend(self.encoder.param_names(&format!("{prefix}.enc")));
        names
    }

    fn params(&self) -> Vec<&Array<S>> {
        let mut ps = vec![&self.embed.w, &self.embed.b];
        ps.extend(self.encoder.params());
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Array<S>> {
        let mut ps = vec![&mut self.embed.w, &mut self.embed.b];
        ps.extend(self.encoder.params_mut());
        ps
    }

    fn bind(&self, tape: &mut Tape<S>) -> StackVars {
        StackVars {
            embed: self.embed.bind(tape),
            encoder: self.encoder.bind(tape),
        }
    }
}

pub struct StackVars {
    embed: LinearVars,
    encoder: EncoderVars,
}

impl StackVars {
    fn leaves(&self) -> Vec<Var> {
        let mut vs = vec![self.embed.w, self.embed.b];
        for l in &self.encoder.layers {
            vs.extend([l.a_cont, l.b_cont, l.delta_raw, l.q_raw, l.w_in, l.w_out]);
        }
        if let Some(n) = &self.encoder.norm {
            vs.push(n.gain);
        }
        vs
    }

    /// Embed `[obs, one-hot prev action]` and encode the history.
    fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        obs: Var,
        prev_onehot: Var,
        mask: Arc<Vec<bool>>,
        mode: ScanMode,
    ) -> (Var, Vec<LayerDiagnostics>) {
        let x = tape.concat_last(obs, prev_onehot);
        let h = self.embed.forward(tape, x);
        self.encoder.forward(tape, h, mask, mode)
    }
}

/// Losses from one gradient update. `alpha` stays `None`: the temperature is
/// a fixed hyperparameter here, not a learned one.
#[derive(Clone, Copy, Debug)]
pub struct UpdateLosses {
    pub critic: f64,
    pub actor: f64,
    pub alpha: Option<f64>,
    pub encoder_drift_channels: usize,
}

#[derive(Debug)]
pub struct NonFiniteLoss {
    pub which: &'static str,
    pub value: f64,
}

pub struct SacAgent<S: Scalar> {
    pub rac: RacConfig,
    pub sac: SacConfig,
    pub actor_stack: Option<Stack<S>>,
    pub actor_head: Mlp<S>,
    pub critic_stack: Option<Stack<S>>,
    pub q1: Mlp<S>,
    pub q2: Mlp<S>,
    pub target_stack: Option<Stack<S>>,
    pub target_q1: Mlp<S>,
    pub target_q2: Mlp<S>,
    opt_actor: Adam<S>,
    opt_critic: Adam<S>,
    pub updates_done: u64,
}

/// Flatten `[B, K, D]` features and keep only the rows listed in `idx`.
fn compact_rows<S: Scalar>(
    tape: &mut Tape<S>,
    feat: Var,
    flat_n: usize,
    idx: Arc<Vec<usize>>,
) -> Var {
    let d = *tape.shape(feat).last().unwrap();
    let flat = tape.reshape(feat, vec![flat_n, d]);
    tape.gather_rows(flat, idx)
}

impl<S: Scalar> SacAgent<S> {
    pub fn init(rac: RacConfig, sac: SacConfig, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let head = |hidden: &[usize], out: usize, rng: &mut Rng| {
            let mut dims = vec![rac.head_input()];
            dims.extend_from_slice(hidden);
            dims.push(out);
            Mlp::init(&dims, rng)
        };
        let stacks = match rac.encoder {
            EncoderChoice::None => (None, None),
            EncoderChoice::Ssm(variant) => (
                Some(Stack::init(&rac, variant, &mut rng)),
                Some(Stack::init(&rac, variant, &mut rng)),
            ),
        };
        let actor_head = head(&rac.actor_hidden, rac.num_actions, &mut rng);
        let q1 = head(&rac.critic_hidden, rac.num_actions, &mut rng);
        let q2 = head(&rac.critic_hidden, rac.num_actions, &mut rng);
        let (actor_stack, critic_stack) = stacks;
        // Targets start as exact copies of the critics.
        let target_stack = critic_stack.clone();
        let target_q1 = q1.clone();
        let target_q2 = q2.clone();
        let lr = sac.lr;
        SacAgent {
            rac,
            sac,
            actor_stack,
            actor_head,
            critic_stack,
            q1,
            q2,
            target_stack,
            target_q1,
            target_q2,
            opt_actor: Adam::new(lr),
            opt_critic: Adam::new(lr),
            updates_done: 0,
        }
    }

    // ── parameter enumeration (stable order) ────────────────────────

    pub fn actor_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Some(s) = &self.actor_stack {
            names.extend(s.param_names("actor"));
        }
        names.extend(self.actor_head.param_names("actor.head"));
        names
    }

    pub fn critic_param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if let Some(s) = &self.critic_stack {
            names.extend(s.param_names("critic"));
        }
        names.extend(self.q1.param_names("critic.q1"));
        names.extend(self.q2.param_names("critic.q2"));
        names
    }

    pub fn target_param_names(&self) -> Vec<String> {
        self.critic_param_names()
            .iter()
            .map(|n| n.replacen("critic", "target", 1))
            .collect()
    }

    pub fn actor_params(&self) -> Vec<&Array<S>> {
        let mut ps = Vec::new();
        if let Some(s) = &self.actor_stack {
            ps.extend(s.params());
        }
        ps.extend(self.actor_head.params());
        ps
    }

    pub fn actor_params_mut(&mut self) -> Vec<&mut Array<S>> {
        let mut ps = Vec::new();
        if let Some(s) = &mut self.actor_stack {
            ps.extend(s.params_mut());
        }
        ps.extend(self.actor_head.params_mut());
        ps
    }

    pub fn critic_params(&self) -> Vec<&Array<S>> {
        let mut ps = Vec::new();
        if let Some(s) = &self.critic_stack {
            ps.extend(s.params());
        }
        ps.extend(self.q1.params());
        ps.extend(self.q2.params());
        ps
    }

    pub fn critic_params_mut(&mut self) -> Vec<&mut Array<S>> {
        let mut ps = Vec::new();
        if let Some(s) = &mut self.critic_stack {
            ps.extend(s.params_mut());
        }
        ps.extend(self.q1.params_mut());
        ps.extend(self.q2.params_mut());
        ps
    }

    pub fn target_params(&self) -> Vec<&Array<S>> {
        let mut ps = Vec::new();
        if let Some(s) = &self.target_stack {
            ps.extend(s.params());
        }
        ps.extend(self.target_q1.params());
        ps.extend(self.target_q2.params());
        ps
    }

    pub fn target_params_mut(&mut self) -> Vec<&mut Array<S>> {
        let mut ps = Vec::new();
        if let Some(s) = &mut self.target_stack {
            ps.extend(s.params_mut());
        }
        ps.extend(self.target_q1.params_mut());
        ps.extend(self.target_q2.params_mut());
        ps
    }

    /// All named parameters, for checkpointing.
    pub fn named_params(&self) -> Vec<(String, &Array<S>)> {
        let mut out = Vec::new();
        out.extend(self.actor_param_names().into_iter().zip(self.actor_params()));
        out.extend(self.critic_param_names().into_iter().zip(self.critic_params()));
        out.extend(self.target_param_names().into_iter().zip(self.target_params()));
        out
    }

    /// Restore parameters by name; every parameter must be present with a
    /// matching shape.
    pub fn load_named_params(
        &mut self,
        entries: &[(String, Array<S>)],
    ) -> Result<(), String> {
        let lookup = |name: &str| -> Result<&Array<S>, String> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a)
                .ok_or_else(|| format!("checkpoint is missing parameter {name}"))
        };
        let names: Vec<String> = self
            .actor_param_names()
            .into_iter()
            .chain(self.critic_param_names())
            .chain(self.target_param_names())
            .collect();
        let mut incoming = Vec::with_capacity(names.len());
        for name in &names {
            incoming.push(lookup(name)?.clone());
        }
        let mut slots: Vec<&mut Array<S>> = Vec::new();
        slots.extend(self.actor_params_mut());
        // borrow rules: collect remaining groups separately
        let mut rest: Vec<Array<S>> = incoming.split_off(slots.len());
        for (slot, value) in slots.into_iter().zip(incoming) {
            if slot.shape() != value.shape() {
                return Err(format!(
                    "shape mismatch: expected {:?}, checkpoint has {:?}",
                    slot.shape(),
                    value.shape()
                ));
            }
            *slot = value;
        }
        let critic_rest = rest.split_off(self.critic_params().len());
        for (slot, value) in self.critic_params_mut().into_iter().zip(rest) {
            if slot.shape() != value.shape() {
                return Err("shape mismatch in critic parameters".to_string());
            }
            *slot = value;
        }
        for (slot, value) in self.target_params_mut().into_iter().zip(critic_rest) {
            if slot.shape() != value.shape() {
                return Err("shape mismatch in target parameters".to_string());
            }
            *slot = value;
        }
        Ok(())
    }

    // ── forward helpers ─────────────────────────────────────────────

    fn batch_inputs(&self, tape: &mut Tape<S>, batch: &PaddedBatch<S>) -> (Var, Var) {
        let (b, k, a) = (batch.b, batch.k, self.rac.num_actions);
        let obs = tape.constant(batch.obs.clone());
        let prev = onehot::<S>(&batch.prev_actions, a).reshaped(vec![b, k, a]);
        let prev = tape.constant(prev);
        (obs, prev)
    }

    /// Encoder output (when present) plus skip connections, as head input.
    fn head_features(
        &self,
        tape: &mut Tape<S>,
        stack: &Option<StackVars>,
        obs: Var,
        prev: Var,
        mask: Arc<Vec<bool>>,
    ) -> (Var, Vec<LayerDiagnostics>) {
        match stack {
            Some(sv) => {
                let (z, diags) = sv.forward(tape, obs, prev, mask, self.rac.scan);
                let zo = tape.concat_last(z, obs);
                (tape.concat_last(zo, prev), diags)
            }
            None => (tape.concat_last(obs, prev), Vec::new()),
        }
    }

    // ── SAC update ──────────────────────────────────────────────────

    /// One gradient step on critics and actor from a padded batch, then a
    /// Polyak update of the targets. The MLP heads run only on the real
    /// (non-padded) steps — padded rows are dropped before the heads, which
    /// is exact because they carry zero loss weight either way.
    pub fn update(&mut self, batch: &PaddedBatch<S>) -> Result<UpdateLosses, NonFiniteLoss> {
        let (b, k, na) = (batch.b, batch.k, self.rac.num_actions);
        let alpha = self.sac.alpha;
        let gamma = self.sac.gamma;

        // Compacted row index: flat (b, t) -> position among real steps.
        let flat_n = b * k;
        let mut pos_of = vec![usize::MAX; flat_n];
        let mut valid = Vec::new();
        for f in 0..flat_n {
            if !batch.mask[f] {
                pos_of[f] = valid.len();
                valid.push(f);
            }
        }
        let v_count = valid.len();
        let vidx = Arc::new(valid);

        // Pass 1: the actor tape. Its forward values provide the policy
        // log-probs for the bootstrap targets; the actor loss itself is
        // appended to this same tape later, once the critics have run.
        let mut atape = Tape::<S>::new();
        let (a_obs, a_prev) = self.batch_inputs(&mut atape, batch);
        let astack = self.actor_stack.as_ref().map(|s| s.bind(&mut atape));
        let (afeat, adiags) =
            self.head_features(&mut atape, &astack, a_obs, a_prev, batch.mask.clone());
        let afeatv = compact_rows(&mut atape, afeat, flat_n, vidx.clone());
        let ahead = self.actor_head.bind(&mut atape);
        let logits = ahead.forward(&mut atape, afeatv);
        let logp = atape.log_softmax(logits); // [V, A]
        let drift0: usize = adiags.iter().map(|d| d.drifted_channels).sum();

        // Soft state values under the current policy and the target critics,
        // one per real step (no gradients on this tape).
        let next_v: Vec<f64> = {
            let mut tape = Tape::<S>::new();
            let (obs, prev) = self.batch_inputs(&mut tape, batch);
            let tstack = self.target_stack.as_ref().map(|s| s.bind(&mut tape));
            let (tfeat, _) =
                self.head_features(&mut tape, &tstack, obs, prev, batch.mask.clone());
            let tfeatv = compact_rows(&mut tape, tfeat, flat_n, vidx.clone());
            let tq1 = self.target_q1.bind(&mut tape).forward(&mut tape, tfeatv);
            let tq2 = self.target_q2.bind(&mut tape).forward(&mut tape, tfeatv);
            let q1v = tape.value(tq1).data();
            let q2v = tape.value(tq2).data();
            let lpv = atape.value(logp).data();
            (0..v_count)
                .map(|v| {
                    let mut acc = 0.0;
                    for ai in 0..na {
                        let q = q1v[v * na + ai].to_f64().min(q2v[v * na + ai].to_f64());
                        let lp = lpv[v * na + ai].to_f64();
                        acc += lp.exp() * (q - alpha * lp);
                    }
                    acc
                })
                .collect()
        };

        // Bootstrap targets. A step is trainable for the critic when it is
        // terminal or followed by another real step in its window.
        let mut y = vec![S::zero(); v_count];
        let mut w_critic = vec![S::zero(); v_count];
        let mut n_critic = 0.0f64;
        for v in 0..v_count {
            let f = vidx[v];
            let t = f % k;
            if batch.dones[f] {
                y[v] = S::from_f64(batch.rewards[f]);
            } else if t + 1 < k && pos_of[f + 1] != usize::MAX {
                y[v] = S::from_f64(batch.rewards[f] + gamma * next_v[pos_of[f + 1]]);
            } else {
                continue; // window ends here: no bootstrap available
            }
            w_critic[v] = S::one();
            n_critic += 1.0;
        }
        let n_critic = n_critic.max(1.0);

        let gather_idx: Arc<Vec<usize>> =
            Arc::new(vidx.iter().map(|&f| batch.actions[f]).collect());
        debug_assert!(gather_idx.iter().all(|&a| a < na));

        // Pass 2: critic loss and gradients.
        let mut ctape = Tape::<S>::new();
        let (critic_loss, critic_vars, q_min_host, cdrift) = {
            let tape = &mut ctape;
            let (obs, prev) = self.batch_inputs(tape, batch);
            let cstack = self.critic_stack.as_ref().map(|s| s.bind(tape));
            let (cfeat, cdiags) =
                self.head_features(tape, &cstack, obs, prev, batch.mask.clone());
            let cfeatv = compact_rows(tape, cfeat, flat_n, vidx.clone());
            let q1b = self.q1.bind(tape);
            let q2b = self.q2.bind(tape);
            let q1 = q1b.forward(tape, cfeatv);
            let q2 = q2b.forward(tape, cfeatv);

            // held-out copy for the actor loss (no gradient coupling)
            let q1v = tape.value(q1).clone();
            let q2v = tape.value(q2).clone();
            let mut qmin = Array::<S>::zeros(vec![v_count, na]);
            for (dst, (x, y)) in qmin
                .data_mut()
                .iter_mut()
                .zip(q1v.data().iter().zip(q2v.data()))
            {
                *dst = x.minimum(*y);
            }

            let q1a = tape.gather_last(q1, gather_idx.clone());
            let q2a = tape.gather_last(q2, gather_idx.clone());
            let yv = tape.constant(Array::new(vec![v_count, 1], y.clone()));
            let wv = tape.constant(Array::new(vec![v_count, 1], w_critic.clone()));
            let mut loss = None;
            for qa in [q1a, q2a] {
                let err = tape.sub(qa, yv);
                let sq = tape.square(err);
                let wsq = tape.mul(sq, wv);
                let s = tape.sum(wsq, None, false);
                loss = Some(match loss {
                    None => s,
                    Some(prev) => tape.add(prev, s),
                });
            }
            let loss = loss.unwrap();
            let loss = tape.mul_scalar(loss, 1.0 / n_critic);
            let loss_val = tape.value(loss).data()[0].to_f64();
            tape.backward(loss);

            let mut vars = Vec::new();
            if let Some(sv) = &cstack {
                vars.extend(sv.leaves());
            }
            vars.extend(q1b.leaves());
            vars.extend(q2b.leaves());
            let drift: usize = cdiags.iter().map(|d| d.drifted_channels).sum();
            (loss_val, vars, qmin, drift)
        };
        if !critic_loss.is_finite() {
            return Err(NonFiniteLoss {
                which: "critic",
                value: critic_loss,
            });
        }
        let critic_grads: Vec<Option<Array<S>>> = critic_vars
            .iter()
            .map(|&v| ctape.grad(v).cloned())
            .collect();

        // Pass 3: actor loss appended to the pass-1 tape, critics held
        // constant.
        let (actor_loss, actor_vars) = {
            let tape = &mut atape;
            let pi = tape.exp(logp);
            let qmin = tape.constant(q_min_host);
            let alp = tape.mul_scalar(logp, alpha);
            let inner = tape.sub(alp, qmin);
            let terms = tape.mul(pi, inner);
            let total = tape.sum(terms, None, false);
            let loss = tape.mul_scalar(total, 1.0 / v_count.max(1) as f64);
            let loss_val = tape.value(loss).data()[0].to_f64();
            tape.backward(loss);

            let mut vars = Vec::new();
            if let Some(sv) = &astack {
                vars.extend(sv.leaves());
            }
            vars.extend(ahead.leaves());
            (loss_val, vars)
        };
        if !actor_loss.is_finite() {
            return Err(NonFiniteLoss {
                which: "actor",
                value: actor_loss,
            });
        }
        let actor_grads: Vec<Option<Array<S>>> =
            actor_vars.iter().map(|&v| atape.grad(v).cloned()).collect();
        drop(atape);
        drop(ctape);

        // Apply both steps, then track the targets. The optimizers are
        // swapped out during the step to keep the borrows disjoint.
        let clip = self.sac.grad_clip;
        let mut opt = std::mem::replace(&mut self.opt_critic, Adam::new(0.0));
        opt.step(&mut self.critic_params_mut(), &critic_grads, clip);
        self.opt_critic = opt;
        let mut opt = std::mem::replace(&mut self.opt_actor, Adam::new(0.0));
        opt.step(&mut self.actor_params_mut(), &actor_grads, clip);
        self.opt_actor = opt;

        let tau = self.sac.tau;
        let sources: Vec<Array<S>> = self.critic_params().into_iter().cloned().collect();
        let source_refs: Vec<&Array<S>> = sources.iter().collect();
        polyak_update(&mut self.target_params_mut(), &source_refs, tau);

        self.updates_done += 1;
        Ok(UpdateLosses {
            critic: critic_loss,
            actor: actor_loss,
            alpha: None,
            encoder_drift_channels: drift0 + cdrift,
        })
    }

    // ── acting ──────────────────────────────────────────────────────

    /// Policy logits for the latest step of a (truncated) episode history.
    /// The history is re-encoded from the window start each call.
    pub fn policy_logits(&self, obs_hist: &[Vec<f64>], act_hist: &[usize]) -> Vec<f64> {
        assert_eq!(obs_hist.len(), act_hist.len() + 1);
        let ctx = self.sac.context_len;
        let len = obs_hist.len();
        let start = len.saturating_sub(ctx);
        let k = len - start;
        let od = self.rac.obs_dim;
        let na = self.rac.num_actions;

        let mut tape = Tape::<S>::new();
        let mut obs_flat = Vec::with_capacity(k * od);
        let mut prev = Vec::with_capacity(k);
        for (t, step) in (start..len).enumerate() {
            obs_flat.extend(obs_hist[step].iter().map(|&x| S::from_f64(x)));
            prev.push(if t == 0 { NO_ACTION } else { act_hist[step - 1] });
        }
        let obs = tape.constant(Array::new(vec![1, k, od], obs_flat));
        let prev_oh = onehot::<S>(&prev, na).reshaped(vec![1, k, na]);
        let prev_v = tape.constant(prev_oh);
        let mask = Arc::new(vec![false; k]);

        let head_in = match &self.actor_stack {
            Some(stack) => {
                let sv = stack.bind(&mut tape);
                let (z, _) = sv.forward(&mut tape, obs, prev_v, mask, self.rac.scan);
                // only the final step feeds the head
                let zlast = tape.value(z).data()[(k - 1) * self.rac.embed..].to_vec();
                let mut row = zlast;
                row.extend_from_slice(&tape.value(obs).data()[(k - 1) * od..]);
                row.extend_from_slice(&tape.value(prev_v).data()[(k - 1) * na..]);
                tape.constant(Array::new(vec![1, row.len()], row))
            }
            None => {
                let mut row = tape.value(obs).data()[(k - 1) * od..].to_vec();
                row.extend_from_slice(&tape.value(prev_v).data()[(k - 1) * na..]);
                tape.constant(Array::new(vec![1, row.len()], row))
            }
        };
        let logits = self.actor_head.bind(&mut tape).forward(&mut tape, head_in);
        tape.value(logits).to_f64_vec()
    }

    /// Latent state trajectory of the actor encoder's deepest layer over the
    /// (truncated) history window; `None` for encoderless agents. Used by the
    /// rollout exports of the two-channel diagnostic runs.
    pub fn latent_trajectory(
        &self,
        obs_hist: &[Vec<f64>],
        act_hist: &[usize],
    ) -> Option<Vec<Vec<f64>>> {
        let stack = self.actor_stack.as_ref()?;
        assert_eq!(obs_hist.len(), act_hist.len() + 1);
        let ctx = self.sac.context_len;
        let len = obs_hist.len();
        let start = len.saturating_sub(ctx);
        let k = len - start;
        let od = self.rac.obs_dim;
        let na = self.rac.num_actions;

        let mut tape = Tape::<S>::new();
        let mut obs_flat = Vec::with_capacity(k * od);
        let mut prev = Vec::with_capacity(k);
        for (t, step) in (start..len).enumerate() {
            obs_flat.extend(obs_hist[step].iter().map(|&x| S::from_f64(x)));
            prev.push(if t == 0 { NO_ACTION } else { act_hist[step - 1] });
        }
        let obs = tape.constant(Array::new(vec![1, k, od], obs_flat));
        let prev_oh = onehot::<S>(&prev, na).reshaped(vec![1, k, na]);
        let prev_v = tape.constant(prev_oh);
        let sv = stack.bind(&mut tape);
        let x = tape.concat_last(obs, prev_v);
        let h = sv.embed.forward(&mut tape, x);
        let (_, states, _) = sv.encoder.forward_with_states(
            &mut tape,
            h,
            Arc::new(vec![false; k]),
            self.rac.scan,
        );
        let n = self.rac.latent;
        let vals = tape.value(states).to_f64_vec();
        Some((0..k).map(|t| vals[t * n..(t + 1) * n].to_vec()).collect())
    }

    pub fn greedy_action(&self, obs_hist: &[Vec<f64>], act_hist: &[usize]) -> usize {
        let logits = self.policy_logits(obs_hist, act_hist);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best
    }

    pub fn sample_action(
        &self,
        obs_hist: &[Vec<f64>],
        act_hist: &[usize],
        rng: &mut Rng,
    ) -> usize {
        let logits = self.policy_logits(obs_hist, act_hist);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        debug_assert!(
            (exps.iter().sum::<f64>() / z - 1.0).abs() < 1e-6,
            "policy probabilities must normalize"
        );
        let mut u = rng.uniform() * z;
        for (i, e) in exps.iter().enumerate() {
            if u < *e {
                return i;
            }
            u -= e;
        }
        logits.len() - 1
    }
}

/// Stateful episode policy over an agent, for the evaluation loops.
pub struct AgentPolicy<'a, S: Scalar> {
    pub agent: &'a SacAgent<S>,
    pub rng: Option<Rng>,
    obs_hist: Vec<Vec<f64>>,
    act_hist: Vec<usize>,
}

impl<'a, S: Scalar> AgentPolicy<'a, S> {
    /// Greedy (argmax) policy.
    pub fn greedy(agent: &'a SacAgent<S>) -> Self {
        AgentPolicy {
            agent,
            rng: None,
            obs_hist: Vec::new(),
            act_hist: Vec::new(),
        }
    }

    /// Stochastic policy sampling from the categorical distribution.
    pub fn stochastic(agent: &'a SacAgent<S>, rng: Rng) -> Self {
        AgentPolicy {
            agent,
            rng: Some(rng),
            obs_hist: Vec::new(),
            act_hist: Vec::new(),
        }
    }
}

impl<S: Scalar> crate::env::Policy for AgentPolicy<'_, S> {
    fn reset(&mut self) {
        self.obs_hist.clear();
        self.act_hist.clear();
    }

    fn act(&mut self, obs: &[f64]) -> usize {
        self.obs_hist.push(obs.to_vec());
        let action = match &mut self.rng {
            Some(rng) => {
                let mut r = rng.clone();
                let a = self.agent.sample_action(&self.obs_hist, &self.act_hist, &mut r);
                *rng = r;
                a
            }
            None => self.agent.greedy_action(&self.obs_hist, &self.act_hist),
        };
        self.act_hist.push(action);
        action
    }
}

pub fn default_rac_for_env(
    encoder: EncoderChoice,
    obs_dim: usize,
    latent: usize,
    scan: ScanMode,
) -> RacConfig {
    RacConfig {
        encoder,
        obs_dim,
        num_actions: NUM_ACTIONS,
        embed: 16,
        latent,
        layers: 1,
        rms_norm: false,
        q_init: 1.0,
        actor_hidden: vec![128],
        critic_hidden: vec![256],
        scan,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerKind;
    use replay::Episode;

    fn tiny_rac(encoder: EncoderChoice) -> RacConfig {
        RacConfig {
            encoder,
            obs_dim: 1,
            num_actions: NUM_ACTIONS,
            embed: 4,
            latent: 3,
            layers: 1,
            rms_norm: false,
            q_init: 1.0,
            actor_hidden: vec![8],
            critic_hidden: vec![8],
            scan: ScanMode::Parallel,
        }
    }

    fn tiny_sac() -> SacConfig {
        SacConfig {
            batch_size: 4,
            context_len: 8,
            ..SacConfig::default()
        }
    }

    fn kf_choice() -> EncoderChoice {
        EncoderChoice::Ssm(LayerVariant::new(LayerKind::VSsmKf))
    }

    fn fake_episode(rng: &mut Rng, len: usize) -> Episode {
        Episode {
            obs: (0..len).map(|_| vec![rng.normal()]).collect(),
            actions: (0..len)
                .map(|t| if t + 1 == len { 1 + rng.below(2) } else { 0 })
                .collect(),
            rewards: (0..len)
                .map(|t| if t + 1 == len { 10.0 } else { -0.1 })
                .collect(),
        }
    }

    fn fake_batch(rng: &mut Rng, b: usize, pad_to: Option<usize>) -> PaddedBatch<f64> {
        let eps: Vec<Episode> = (0..b).map(|i| fake_episode(rng, 3 + i % 4)).collect();
        let refs: Vec<&Episode> = eps.iter().collect();
        let windows: Vec<(usize, usize, usize)> =
            (0..b).map(|i| (i, 0, refs[i].len() - 1)).collect();
        PaddedBatch::from_windows(&refs, &windows, 1, pad_to)
    }

    #[test]
    fn targets_equal_critics_at_init() {
        let agent = SacAgent::<f64>::init(tiny_rac(kf_choice()), tiny_sac(), 7);
        for (c, t) in agent.critic_params().iter().zip(agent.target_params()) {
            assert_eq!(c.data(), t.data());
        }
    }

    #[test]
    fn independent_critics_disagree_at_init() {
        let agent = SacAgent::<f64>::init(tiny_rac(kf_choice()), tiny_sac(), 8);
        let w1 = &agent.q1.layers[0].w;
        let w2 = &agent.q2.layers[0].w;
        assert!(w1.max_abs_diff(w2) > 1e-6);
    }

    #[test]
    fn gamma_zero_targets_reduce_to_rewards() {
        let mut rng = Rng::new(9);
        let sac = SacConfig {
            gamma: 0.0,
            alpha: 0.0,
            lr: 1e-2,
            ..tiny_sac()
        };
        let mut agent = SacAgent::<f64>::init(tiny_rac(kf_choice()), sac, 10);
        let batch = fake_batch(&mut rng, 3, None);
        // With gamma = 0 and alpha = 0 the critic regresses pure rewards;
        // after many steps on one fixed batch the fitted Q at taken actions
        // approaches r.
        for _ in 0..800 {
            agent.update(&batch).unwrap();
        }
        // check Q(s,a) ~ r at a real, terminal step
        let mut tape = Tape::<f64>::new();
        let (obs, prev) = agent.batch_inputs(&mut tape, &batch);
        let cstack = agent.critic_stack.as_ref().map(|s| s.bind(&mut tape));
        let (feat, _) = agent.head_features(&mut tape, &cstack, obs, prev, batch.mask.clone());
        let q1 = agent.q1.bind(&mut tape).forward(&mut tape, feat);
        let qv = tape.value(q1);
        let k = batch.k;
        for row in 0..batch.b {
            for t in 0..k {
                let i = row * k + t;
                if batch.mask[i] || !batch.dones[i] {
                    continue;
                }
                let q = qv.data()[i * NUM_ACTIONS + batch.actions[i]];
                assert!(
                    (q - batch.rewards[i]).abs() < 0.5,
                    "fitted {q} vs reward {}",
                    batch.rewards[i]
                );
            }
        }
    }

    #[test]
    fn extra_padding_changes_nothing() {
        for choice in [kf_choice(), EncoderChoice::None] {
            let mut rng = Rng::new(11);
            let batch_a = fake_batch(&mut rng, 3, None);
            let mut rng = Rng::new(11);
            let batch_b = fake_batch(&mut rng, 3, Some(batch_a.k + 8));

            let run = |batch: &PaddedBatch<f64>| {
                let mut agent = SacAgent::<f64>::init(tiny_rac(choice), tiny_sac(), 12);
                let losses = agent.update(batch).unwrap();
                let params: Vec<Vec<f64>> = agent
                    .critic_params()
                    .iter()
                    .chain(agent.actor_params().iter())
                    .map(|p| p.to_f64_vec())
                    .collect();
                (losses, params)
            };
            let (la, pa) = run(&batch_a);
            let (lb, pb) = run(&batch_b);
            assert_eq!(la.critic.to_bits(), lb.critic.to_bits(), "critic loss");
            assert_eq!(la.actor.to_bits(), lb.actor.to_bits(), "actor loss");
            for (x, y) in pa.iter().zip(&pb) {
                for (a, b) in x.iter().zip(y) {
                    assert_eq!(a.to_bits(), b.to_bits(), "post-update parameters");
                }
            }
        }
    }

    #[test]
    fn targets_follow_polyak_trace() {
        let mut rng = Rng::new(13);
        let mut agent = SacAgent::<f64>::init(tiny_rac(kf_choice()), tiny_sac(), 14);
        let tau = agent.sac.tau;
        // replay the expected trace by hand
        let mut expected: Vec<Vec<f64>> =
            agent.target_params().iter().map(|p| p.to_f64_vec()).collect();
        for _ in 0..5 {
            let batch = fake_batch(&mut rng, 2, None);
            agent.update(&batch).unwrap();
            for (e, c) in expected.iter_mut().zip(agent.critic_params()) {
                for (ev, cv) in e.iter_mut().zip(c.data()) {
                    *ev = (1.0 - tau) * *ev + tau * cv;
                }
            }
        }
        for (e, t) in expected.iter().zip(agent.target_params()) {
            for (ev, tv) in e.iter().zip(t.data()) {
                assert!((ev - tv).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn policy_is_a_distribution_everywhere() {
        let agent = SacAgent::<f64>::init(tiny_rac(kf_choice()), tiny_sac(), 15);
        let mut rng = Rng::new(16);
        for len in 1..6 {
            let obs_hist: Vec<Vec<f64>> = (0..len).map(|_| vec![rng.normal()]).collect();
            let act_hist: Vec<usize> = (0..len - 1).map(|_| rng.below(NUM_ACTIONS)).collect();
            let logits = agent.policy_logits(&obs_hist, &act_hist);
            assert_eq!(logits.len(), NUM_ACTIONS);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let probs: Vec<f64> = logits.iter().map(|l| (l - max).exp() / total).collect();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(probs.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn memoryless_agent_shares_the_code_path() {
        let mut rng = Rng::new(17);
        let mut agent = SacAgent::<f64>::init(tiny_rac(EncoderChoice::None), tiny_sac(), 18);
        assert!(agent.actor_stack.is_none() && agent.critic_stack.is_none());
        let batch = fake_batch(&mut rng, 3, None);
        let losses = agent.update(&batch).unwrap();
        assert!(losses.critic.is_finite() && losses.actor.is_finite());
        // acting works without any history encoding
        let a = agent.greedy_action(&[vec![0.3]], &[]);
        assert!(a < NUM_ACTIONS);
    }

    #[test]
    fn checkpoint_round_trip_restores_everything() {
        let mut rng = Rng::new(19);
        let mut agent = SacAgent::<f64>::init(tiny_rac(kf_choice()), tiny_sac(), 20);
        let batch = fake_batch(&mut rng, 2, None);
        agent.update(&batch).unwrap();

        let entries: Vec<(String, Array<f64>)> = agent
            .named_params()
            .into_iter()
            .map(|(n, a)| (n, a.clone()))
            .collect();
        let mut fresh = SacAgent::<f64>::init(tiny_rac(kf_choice()), tiny_sac(), 999);
        fresh.load_named_params(&entries).unwrap();
        for ((_, a), b) in fresh
            .named_params()
            .iter()
            .zip(agent.named_params().iter().map(|(_, a)| a))
        {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn update_losses_report_fixed_alpha_as_none() {
        let mut rng = Rng::new(21);
        let mut agent = SacAgent::<f64>::init(tiny_rac(kf_choice()), tiny_sac(), 22);
        let batch = fake_batch(&mut rng, 2, None);
        let losses = agent.update(&batch).unwrap();
        assert!(losses.alpha.is_none());
    }
}
