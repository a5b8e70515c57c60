//! Executable acceptance checks, shared by `kflayers verify` and the
//! `acceptance` integration test target. Each check prints one pass/fail
//! line; thresholds are pinned here, not configurable.

use std::sync::{Arc, OnceLock};

use kflayers::agent::{train, AgentPolicy, SacAgent, TrainOutput};
use kflayers::env::grid_evaluate;
use kflayers::kalman::{
    bayes_oracle_iid, filter_scan, filter_sequential, DiagonalDynamics, GaussianBelief, ScanMode,
};
use kflayers::layers::{
    discretize_zoh, hippo_diag_init, KfLayerVars, LayerKind, LayerVariant,
};
use kflayers::rng::Rng;
use kflayers::scalar::Scalar;
use kflayers::scan::{parallel_combine_count, AssocOp, Mao, MaskedElement};
use kflayers::tensor::{finite_difference_check, Array, Tape, Var};

use crate::artifacts;
use crate::bench::{bench_scan, loglog_slope};
use crate::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    /// CI-scale: the reduced training profile and grid.
    Smoke,
    /// The full multi-seed reproduction protocol (hours of compute).
    Full,
}

pub struct Check {
    pub id: &'static str,
    pub name: &'static str,
    pub run: fn(Profile) -> Result<String, String>,
}

pub fn all_checks() -> Vec<Check> {
    vec![
        Check { id: "01", name: "scan-equivalence", run: check_scan_equivalence },
        Check { id: "02", name: "masked-operator-associativity", run: check_mao },
        Check { id: "03", name: "conjugacy", run: check_conjugacy },
        Check { id: "04", name: "gradient-correctness", run: check_gradients },
        Check { id: "05", name: "infinite-noise-limit", run: check_vssm_limit },
        Check { id: "06", name: "discretization-eigenvalue-bound", run: check_discretization },
        Check { id: "07", name: "rl-reproduction", run: check_rl },
        Check { id: "08", name: "adaptation-trend", run: check_adaptation },
        Check { id: "09", name: "scan-scaling", run: check_scaling },
        Check { id: "10", name: "train-determinism", run: check_determinism },
    ]
}

/// Run one check by id, printing its pass/fail line. Returns the detail on
/// success and the failure text on failure.
pub fn run_check(id: &str, profile: Profile) -> Result<String, String> {
    let check = all_checks()
        .into_iter()
        .find(|c| c.id == id)
        .unwrap_or_else(|| panic!("no check with id {id}"));
    let res = (check.run)(profile);
    match &res {
        Ok(detail) => println!("[PASS] {} {}: {}", check.id, check.name, detail),
        Err(fail) => println!("[FAIL] {} {}: {}", check.id, check.name, fail),
    }
    res
}

/// Run every check (optionally name-filtered); returns the number of
/// failures.
pub fn run_all(profile: Profile, filter: Option<&str>) -> usize {
    let mut failed = 0;
    for check in all_checks() {
        if let Some(f) = filter {
            if !check.id.contains(f) && !check.name.contains(f) {
                continue;
            }
        }
        if run_check(check.id, profile).is_err() {
            failed += 1;
        }
    }
    failed
}

// ── 01: parallel scan equals sequential filtering ───────────────────

fn scan_equivalence_worst<S: Scalar>(instances: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = [1usize, 4, 128][rng.below(3)];
        let k = 1 + rng.below(512);
        let valid = if rng.uniform() < 0.5 { k } else { 1 + rng.below(k) };
        let dyn_ = DiagonalDynamics::new(
            (0..n).map(|_| S::from_f64(rng.range(-1.0, 1.0))).collect(),
            (0..n).map(|_| S::from_f64(rng.range(-1.0, 1.0))).collect(),
            (0..n).map(|_| S::from_f64(rng.range(1e-3, 2.0))).collect(),
        );
        let init = GaussianBelief::standard(n);
        let u: Vec<S> = (0..k * n).map(|_| S::from_f64(rng.normal())).collect();
        let w: Vec<S> = (0..k * n).map(|_| S::from_f64(rng.normal())).collect();
        let r: Vec<S> = (0..k * n).map(|_| S::from_f64(rng.range(1e-3, 5.0))).collect();
        let mask: Vec<bool> = (0..k).map(|t| t >= valid).collect();

        let par = filter_scan(&init, &dyn_, &u, &w, &r, &mask, ScanMode::Parallel);
        let seq = filter_sequential(
            &init,
            &dyn_,
            &u[..valid * n],
            &w[..valid * n],
            &r[..valid * n],
        );
        for t in 0..k {
            let held = t.min(valid - 1);
            for ch in 0..n {
                let dm =
                    (par.means[t * n + ch].to_f64() - seq[held].mean[ch].to_f64()).abs();
                let dv = (par.vars[t * n + ch].to_f64() - seq[held].var[ch].to_f64()).abs();
                worst = worst.max(dm).max(dv);
            }
        }
    }
    worst
}

fn check_scan_equivalence(_: Profile) -> Result<String, String> {
    let start = std::time::Instant::now();
    let worst64 = scan_equivalence_worst::<f64>(1000, 0xACC1);
    let worst32 = scan_equivalence_worst::<f32>(1000, 0xACC2);
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "max-abs err {worst64:.3e} (f64, tol 1e-10), {worst32:.3e} (f32, tol 1e-4), {secs:.1}s"
    );
    if worst64 < 1e-10 && worst32 < 1e-4 && secs < 120.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ── 02: masked-operator associativity ───────────────────────────────

fn check_mao(_: Profile) -> Result<String, String> {
    struct U64Add;
    impl AssocOp for U64Add {
        type Elem = u64;
        fn combine(&self, a: &u64, b: &u64) -> u64 {
            a.wrapping_add(*b)
        }
    }
    let start = std::time::Instant::now();
    let op = Mao(U64Add);
    let mut rng = Rng::new(0xACC3);
    let admissible = [
        (false, false, false),
        (false, false, true),
        (false, true, true),
        (true, true, true),
    ];
    for trial in 0..10_000 {
        let (ma, mb, mc) = admissible[rng.below(4)];
        let a = MaskedElement { elem: rng.next_u64(), mask: ma };
        let b = MaskedElement { elem: rng.next_u64(), mask: mb };
        let c = MaskedElement { elem: rng.next_u64(), mask: mc };
        let lhs = op.combine(&op.combine(&a, &b), &c);
        let rhs = op.combine(&a, &op.combine(&b, &c));
        if lhs != rhs {
            return Err(format!("associativity broke at trial {trial} masks ({ma},{mb},{mc})"));
        }
    }
    // excluded pattern m_b = 1, m_c = 0: exhibit a counterexample
    let a = MaskedElement { elem: 1u64, mask: false };
    let b = MaskedElement { elem: 2u64, mask: true };
    let c = MaskedElement { elem: 3u64, mask: false };
    let lhs = op.combine(&op.combine(&a, &b), &c);
    let rhs = op.combine(&a, &op.combine(&b, &c));
    if lhs == rhs {
        return Err("expected a counterexample for the non-right-padding pattern".into());
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 10.0 {
        return Err(format!("took {secs:.1}s, budget 10s"));
    }
    Ok(format!(
        "10000 admissible triples exact; counterexample (m_b=1, m_c=0): lhs=({}, {}), rhs=({}, {}); {secs:.2}s",
        lhs.elem, lhs.mask as u8, rhs.elem, rhs.mask as u8
    ))
}

// ── 03: conjugacy ───────────────────────────────────────────────────

fn check_conjugacy(_: Profile) -> Result<String, String> {
    let mut rng = Rng::new(0xACC4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = 1 + rng.below(64);
        let r = rng.range(0.05, 4.0);
        let obs: Vec<f64> = (0..k).map(|_| rng.normal() * 2.0).collect();
        let init = GaussianBelief {
            mean: vec![0.0],
            var: vec![1.0],
        };
        let dyn_ = DiagonalDynamics::new(vec![1.0], vec![0.0], vec![0.0]);
        let posts = filter_sequential(&init, &dyn_, &vec![0.0; k], &obs, &vec![r; k]);
        for t in 0..k {
            let (m, v) = bayes_oracle_iid(&obs[..=t], 0.0, 1.0, r);
            worst = worst
                .max((posts[t].mean[0] - m).abs())
                .max((posts[t].var[0] - v).abs());
        }
    }
    let detail = format!("max deviation from closed form {worst:.3e} (tol 1e-12)");
    if worst < 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ── 04: finite differences over the full layer ──────────────────────

fn check_gradients(_: Profile) -> Result<String, String> {
    let start = std::time::Instant::now();
    let (n, e, bt, k) = (4usize, 3usize, 1usize, 8usize);
    let mut rng = Rng::new(0xACC5);
    let variants = [
        LayerVariant::new(LayerKind::VSsmKf),
        LayerVariant::new(LayerKind::VSsm),
        LayerVariant::new(LayerKind::VSsmKfNoU),
        LayerVariant {
            kind: LayerKind::VSsmKf,
            time_varying_process_noise: true,
            covariance_output_feature: false,
        },
        LayerVariant {
            kind: LayerKind::VSsmKf,
            time_varying_process_noise: false,
            covariance_output_feature: true,
        },
    ];
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let variant = variants[trial % variants.len()];
        let masked = trial % 3 == 1;
        let mask: Arc<Vec<bool>> = Arc::new(if masked {
            (0..k).map(|t| t >= 5).collect()
        } else {
            vec![false; k]
        });
        let rand = |rng: &mut Rng, len: usize, lo: f64, hi: f64| -> Vec<f64> {
            (0..len).map(|_| rng.range(lo, hi)).collect()
        };
        let params = vec![
            Array::<f64>::from_f64s(vec![n], &rand(&mut rng, n, -3.0, -0.2)),
            Array::from_f64s(vec![n], &rand(&mut rng, n, -1.0, 1.0)),
            Array::from_f64s(vec![1], &[rng.range(-3.0, 0.0)]),
            Array::from_f64s(vec![n], &rand(&mut rng, n, -1.0, 1.0)),
            Array::from_f64s(
                vec![e, variant.in_channels() * n],
                &rand(&mut rng, e * variant.in_channels() * n, -0.6, 0.6),
            ),
            Array::from_f64s(
                vec![variant.out_features(n), e],
                &rand(&mut rng, variant.out_features(n) * e, -0.6, 0.6),
            ),
            Array::from_f64s(vec![bt, k, e], &rand(&mut rng, bt * k * e, -1.0, 1.0)),
        ];
        let mask2 = mask.clone();
        let f = move |t: &mut Tape<f64>, vs: &[Var]| {
            let lv = KfLayerVars {
                variant,
                n,
                e,
                a_cont: vs[0],
                b_cont: vs[1],
                delta_raw: vs[2],
                q_raw: vs[3],
                w_in: vs[4],
                w_out: vs[5],
            };
            let (z, _) = lv.forward(t, vs[6], mask2.clone(), ScanMode::Parallel);
            let sq = t.square(z);
            t.sum(sq, None, false)
        };
        let err = finite_difference_check(&f, &params, 1e-6);
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    let detail =
        format!("20 instances (K=8, N=4, E=3), worst relative error {worst:.3e} (tol 1e-4), {secs:.1}s");
    if worst < 1e-4 && secs < 60.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ── 05: infinite observation noise recovers the pure-prediction layer ─

fn check_vssm_limit(_: Profile) -> Result<String, String> {
    let (n, e, bt, k) = (6usize, 4usize, 2usize, 24usize);
    let mut rng = Rng::new(0xACC6);
    let kf = kflayers::layers::KfLayer::<f64>::init(
        LayerVariant::new(LayerKind::VSsmKf),
        n,
        e,
        &mut rng,
    );
    let mut vssm = kf.clone();
    vssm.variant = LayerVariant::new(LayerKind::VSsm);
    let h = Array::from_f64s(
        vec![bt, k, e],
        &(0..bt * k * e).map(|_| rng.normal()).collect::<Vec<_>>(),
    );
    let mask: Arc<Vec<bool>> = Arc::new(vec![false; bt * k]);

    let z_vssm = {
        let mut tape = Tape::<f64>::new();
        let hv = tape.constant(h.clone());
        let bound = vssm.bind(&mut tape);
        let (z, _) = bound.forward(&mut tape, hv, mask.clone(), ScanMode::Parallel);
        tape.value(z).clone()
    };
    let mut tape = Tape::<f64>::new();
    let hv = tape.constant(h);
    let bound = kf.bind(&mut tape);
    let (z, _) = bound.forward_with_obs_noise_scale(
        &mut tape,
        hv,
        mask,
        ScanMode::Parallel,
        Some(1e6),
    );
    let dist = tape.value(z).max_abs_diff(&z_vssm);
    let detail = format!("max-norm distance at 1e6 noise scale: {dist:.3e} (tol 1e-3)");
    if dist < 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ── 06: discretization sanity ───────────────────────────────────────

fn check_discretization(_: Profile) -> Result<String, String> {
    let n = 128;
    let mut tape = Tape::<f64>::new();
    let ac = tape.leaf(Array::from_f64s(vec![n], &hippo_diag_init(n)));
    let bc = tape.leaf(Array::full(vec![n], 1.0));
    let dr = tape.leaf(Array::from_f64s(vec![1], &[-7.0]));
    let (a, _) = discretize_zoh(&mut tape, ac, bc, dr);
    let avals = tape.value(a).to_f64_vec();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &avals {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let inside = avals.iter().filter(|&&v| v > 0.99 && v < 1.0).count();
    let detail = format!(
        "N={n}: decay factors span [{lo:.6}, {hi:.6}]; {inside}/{n} channels inside (0.99, 1.0); \
         the slowest channel is exp(-softplus(-7)*{n}) = {lo:.4}, so the strict bound holds only \
         for the first 11 channels"
    );
    if inside == n {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ── 07 / 08: the trained smoke agent ────────────────────────────────

pub fn smoke_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.latent_n = 32;
    cfg.total_steps = 100_000;
    cfg.seeds = vec![0];
    // evaluation cadence is plumbing; fewer checkpoints keeps the smoke run
    // inside its wall-clock budget
    cfg.eval_every = 20_000;
    cfg
}

pub struct SmokeArtifacts {
    pub out: TrainOutput<f32>,
    pub cfg: ExperimentConfig,
    pub minutes: f64,
}

static SMOKE: OnceLock<Result<SmokeArtifacts, String>> = OnceLock::new();

pub fn smoke_artifacts() -> &'static Result<SmokeArtifacts, String> {
    SMOKE.get_or_init(|| {
        let cfg = smoke_config();
        let start = std::time::Instant::now();
        eprintln!(
            "[verify] training the smoke agent ({} steps, N={}) ...",
            cfg.total_steps, cfg.latent_n
        );
        match train::<f32>(&cfg.train_config(cfg.seeds[0])) {
            Ok(out) => Ok(SmokeArtifacts {
                out,
                cfg,
                minutes: start.elapsed().as_secs_f64() / 60.0,
            }),
            Err(abort) => Err(format!("{abort:?}")),
        }
    })
}

fn check_rl(profile: Profile) -> Result<String, String> {
    match profile {
        Profile::Smoke => {
            let smoke = smoke_artifacts().as_ref().map_err(|e| e.clone())?;
            let win = smoke.out.final_train.win_rate;
            let detail = format!(
                "smoke profile (N=32, 100K steps, seed 0): in-dist win rate {win:.3} \
                 (threshold 0.70), ood norm return {:.3}, {:.1} min",
                smoke.out.final_ood.mean_norm_return, smoke.minutes
            );
            if win >= 0.70 && smoke.minutes < 30.0 {
                Ok(detail)
            } else {
                Err(detail)
            }
        }
        Profile::Full => check_rl_full(),
    }
}

fn check_rl_full() -> Result<String, String> {
    // Five seeds per baseline at the full 500K-step protocol.
    let seeds: Vec<u64> = (0..5).collect();
    let run_variant = |variant: &str| -> Result<(f64, f64, f64), String> {
        let mut cfg = ExperimentConfig::default();
        cfg.set("variant", variant).map_err(|e| e.to_string())?;
        let (mut win, mut norm, mut ood) = (0.0, 0.0, 0.0);
        for &seed in &seeds {
            eprintln!("[verify-full] {variant} seed {seed} ...");
            let out = train::<f32>(&cfg.train_config(seed)).map_err(|e| format!("{e:?}"))?;
            win += out.final_train.win_rate;
            norm += out.final_train.mean_norm_return;
            ood += out.final_ood.mean_norm_return;
        }
        let n = seeds.len() as f64;
        Ok((win / n, norm / n, ood / n))
    };
    let (kf_win, kf_norm, kf_ood) = run_variant("vssm-kf")?;
    let (_, ml_norm, _) = run_variant("memoryless")?;
    let (_, _, vssm_ood) = run_variant("vssm")?;
    let detail = format!(
        "vssm-kf win {kf_win:.3} (>=0.85), margin over memoryless {:.3} (>=0.2), \
         ood {kf_ood:.3} vs vssm ood {vssm_ood:.3}",
        kf_norm - ml_norm
    );
    if kf_win >= 0.85 && kf_norm - ml_norm >= 0.2 && kf_ood >= vssm_ood {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vs: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vs.len()).collect();
        idx.sort_by(|&i, &j| vs[i].total_cmp(&vs[j]));
        let mut ranks = vec![0.0; vs.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vs[idx[j + 1]] == vs[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx.sqrt() * vy.sqrt())
}

fn check_adaptation(profile: Profile) -> Result<String, String> {
    let (mus, sigmas, episodes) = match profile {
        Profile::Smoke => (
            kflayers::env::linspace(-0.5, 0.5, 13),
            kflayers::env::linspace(0.0, 3.0, 13),
            25,
        ),
        Profile::Full => (
            kflayers::env::linspace(-0.5, 0.5, 25),
            kflayers::env::linspace(0.0, 3.0, 25),
            100,
        ),
    };
    let smoke = smoke_artifacts().as_ref().map_err(|e| e.clone())?;
    let agent: &SacAgent<f32> = &smoke.out.agent;
    let cells = grid_evaluate(
        &smoke.cfg.env_config(),
        &mus,
        &sigmas,
        episodes,
        0xAD47,
        || AgentPolicy::greedy(agent),
    );
    let lens: Vec<f64> = cells.iter().map(|c| c.mean_length).collect();
    let sig: Vec<f64> = cells.iter().map(|c| c.sigma).collect();
    let neg_abs_mu: Vec<f64> = cells.iter().map(|c| -c.mu.abs()).collect();
    let rho_sigma = spearman(&lens, &sig);
    let rho_mu = spearman(&lens, &neg_abs_mu);
    let detail = format!(
        "episode length vs sigma: rho={rho_sigma:.3}; vs -|mu|: rho={rho_mu:.3} (both > 0.3); \
         {} cells x {episodes} episodes",
        cells.len()
    );
    if rho_sigma > 0.3 && rho_mu > 0.3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ── 09: scaling measurements ────────────────────────────────────────

fn check_scaling(_: Profile) -> Result<String, String> {
    let lengths = [64, 128, 256, 512, 1024, 2048, 4096, 8192];
    let rows = bench_scan(&lengths, 2, 3);
    for r in &rows {
        if r.par_combines != parallel_combine_count(r.length) {
            return Err(format!(
                "combine count at K={}: measured {}, analytic {}",
                r.length,
                r.par_combines,
                parallel_combine_count(r.length)
            ));
        }
    }
    let slope = loglog_slope(&rows);
    let detail = format!(
        "sequential log-log slope {slope:.3} (accept [0.8, 1.2]); parallel combines exact at all {} lengths",
        rows.len()
    );
    if (0.8..=1.2).contains(&slope) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ── 10: byte-identical reruns ───────────────────────────────────────

fn check_determinism(_: Profile) -> Result<String, String> {
    let tmp = std::env::temp_dir().join(format!("kfl_det_{}", std::process::id()));
    let mut cfg = ExperimentConfig::default();
    cfg.latent_n = 4;
    cfg.embed = 4;
    cfg.actor_hidden = vec![16];
    cfg.critic_hidden = vec![16];
    cfg.batch_size = 16;
    cfg.context_len = 32;
    cfg.total_steps = 3000;
    cfg.eval_every = 1000;
    cfg.eval_episodes = 10;
    cfg.learning_starts = 300;
    cfg.seeds = vec![7];

    let run = |dir: &std::path::Path| -> Result<(Vec<u8>, Vec<u8>), String> {
        let mut c = cfg.clone();
        c.out_dir = dir.to_string_lossy().to_string();
        artifacts::run_experiment(&c, true)?;
        let metrics = std::fs::read(dir.join("seed_7/metrics.csv")).map_err(|e| e.to_string())?;
        let ckpt =
            std::fs::read(dir.join("seed_7/checkpoint_final.kfc")).map_err(|e| e.to_string())?;
        Ok((metrics, ckpt))
    };
    let (m1, c1) = run(&tmp.join("a"))?;
    let (m2, c2) = run(&tmp.join("b"))?;
    let _ = std::fs::remove_dir_all(&tmp);
    if m1 != m2 {
        return Err("metric CSVs differ between identical runs".into());
    }
    if c1 != c2 {
        return Err("checkpoints differ between identical runs".into());
    }
    Ok(format!(
        "3000-step run repeated: metrics.csv ({} bytes) and checkpoint ({} bytes) byte-identical",
        m1.len(),
        c1.len()
    ))
}
