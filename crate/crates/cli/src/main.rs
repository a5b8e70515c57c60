use std::path::PathBuf;
use std::process::ExitCode;

use kflayers_cli::artifacts::{self, GridSpec};
use kflayers_cli::bench::{bench_csv, bench_scan};
use kflayers_cli::config::ExperimentConfig;
use kflayers_cli::verify::{self, Profile};

const USAGE: &str = "\
kflayers — Kalman-filter recurrent layers on Best Arm Identification

USAGE:
  kflayers train [CONFIG.cfg] [OPTIONS]      train one run per seed
  kflayers grid-eval --run DIR [OPTIONS]     evaluate checkpoints over a latent grid
  kflayers bench-scan [OPTIONS]              time sequential vs parallel scans
  kflayers verify [--profile smoke|full] [--only FILTER]
                                             run the property/acceptance suite

TRAIN OPTIONS:
  --set KEY=VALUE     override any config key (repeatable)
  --seed N            shorthand for --set seed=N
  --variant V         vssm | vssm-kf | vssm-kf-u | oracle | memoryless
  --rho X             observation-request cost
  --precision P       f32 | f64
  --out DIR           output directory
  --force             allow writing into a non-empty output directory
  --parallel-seeds    fan seeds out across worker processes

GRID-EVAL OPTIONS:
  --run DIR           run directory produced by `train` (required)
  --episodes N        episodes per grid cell        [default 100]
  --mu LO,HI,N        mean grid                     [default -0.5,0.5,25]
  --sigma LO,HI,N     noise-scale grid              [default 0,3,25]

BENCH-SCAN OPTIONS:
  --lengths L1,L2,..  sequence lengths              [default 64..8192 doubling]
  --channels C        independent channels          [default 4]
  --repeats R         timing repetitions            [default 5]
  --out FILE          CSV destination               [default bench_scan.csv]

Environment: KFLAYERS_OUT prefixes relative output paths.
Exit status is 0 only when every requested artifact was produced.
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(verb) = args.first() else {
        eprint!("{USAGE}");
        return ExitCode::from(2);
    };
    let rest = &args[1..];
    let result = match verb.as_str() {
        "train" => cmd_train(rest),
        "grid-eval" => cmd_grid_eval(rest),
        "bench-scan" => cmd_bench(rest),
        "verify" => cmd_verify(rest),
        "--help" | "-h" | "help" => {
            print!("{USAGE}");
            return ExitCode::SUCCESS;
        }
        other => Err(format!("unknown command `{other}`\n\n{USAGE}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn take_value<'a>(args: &'a [String], i: &mut usize, flag: &str) -> Result<&'a str, String> {
    *i += 1;
    args.get(*i)
        .map(|s| s.as_str())
        .ok_or_else(|| format!("{flag} needs a value"))
}

fn cmd_train(args: &[String]) -> Result<(), String> {
    let mut cfg = ExperimentConfig::default();
    let mut force = false;
    let mut parallel_seeds = false;
    let mut worker_seed: Option<u64> = None;
    let mut config_file: Option<PathBuf> = None;
    let mut i = 0;
    while i < args.len() {
        match args[i].as_str() {
            "--set" => {
                let kv = take_value(args, &mut i, "--set")?;
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
                cfg.set(k.trim(), v.trim()).map_err(|e| e.to_string())?;
            }
            "--seed" => {
                let v = take_value(args, &mut i, "--seed")?;
                cfg.set("seed", v).map_err(|e| e.to_string())?;
            }
            "--variant" => {
                let v = take_value(args, &mut i, "--variant")?;
                cfg.set("variant", v).map_err(|e| e.to_string())?;
            }
            "--rho" => {
                let v = take_value(args, &mut i, "--rho")?;
                cfg.set("env.rho", v).map_err(|e| e.to_string())?;
            }
            "--precision" => {
                let v = take_value(args, &mut i, "--precision")?;
                cfg.set("precision", v).map_err(|e| e.to_string())?;
            }
            "--out" => {
                let v = take_value(args, &mut i, "--out")?;
                cfg.set("out_dir", v).map_err(|e| e.to_string())?;
            }
            "--force" => force = true,
            "--parallel-seeds" => parallel_seeds = true,
            "--worker-seed" => {
                let v = take_value(args, &mut i, "--worker-seed")?;
                worker_seed = Some(v.parse().map_err(|e| format!("--worker-seed: {e}"))?);
            }
            flag if flag.starts_with("--") => return Err(format!("unknown flag `{flag}`")),
            path => {
                if config_file.is_some() {
                    return Err("multiple config files given".into());
                }
                if i != 0 {
                    return Err("the config file must come before override flags".into());
                }
                let p = PathBuf::from(path);
                cfg = ExperimentConfig::from_file(&p).map_err(|e| e.to_string())?;
                config_file = Some(p);
            }
        }
        i += 1;
    }
    cfg.validate().map_err(|e| e.to_string())?;

    if let Some(seed) = worker_seed {
        // Worker process: exactly one seed into the shared run directory.
        let dir = artifacts::resolve_out_dir(&cfg).join(format!("seed_{seed}"));
        return match cfg.precision {
            kflayers_cli::config::Precision::F32 => {
                artifacts::run_seed::<f32>(&cfg, seed, &dir, force).map(|_| ())
            }
            kflayers_cli::config::Precision::F64 => {
                artifacts::run_seed::<f64>(&cfg, seed, &dir, force).map(|_| ())
            }
        };
    }

    if parallel_seeds && cfg.seeds.len() > 1 {
        return fan_out_seeds(&cfg, args, force);
    }

    let dir = artifacts::run_experiment(&cfg, force)?;
    println!("run artifacts in {}", dir.display());
    Ok(())
}

/// One worker process per seed; optimizer state is never shared.
fn fan_out_seeds(cfg: &ExperimentConfig, args: &[String], force: bool) -> Result<(), String> {
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let dir = artifacts::resolve_out_dir(cfg);
    artifacts::ensure_dir(&dir, force)?;
    std::fs::write(
        dir.join("resolved.cfg"),
        format!("{}{}", artifacts::csv_header(cfg), cfg.resolve()),
    )
    .map_err(|e| e.to_string())?;

    let mut children = Vec::new();
    for &seed in &cfg.seeds {
        let mut cmd = std::process::Command::new(&exe);
        cmd.arg("train");
        for a in args {
            if a != "--parallel-seeds" && a != "--force" {
                cmd.arg(a);
            }
        }
        cmd.arg("--worker-seed").arg(seed.to_string());
        cmd.arg("--force");
        children.push((seed, cmd.spawn().map_err(|e| e.to_string())?));
    }
    let mut failures = Vec::new();
    for (seed, mut child) in children {
        let status = child.wait().map_err(|e| e.to_string())?;
        if !status.success() {
            failures.push(format!("seed {seed} worker exited with {status}"));
        }
    }
    artifacts::write_aggregate_summary(cfg, &dir)?;
    if failures.is_empty() {
        println!("run artifacts in {}", dir.display());
        Ok(())
    } else {
        Err(failures.join("\n"))
    }
}

fn parse_grid(spec: &str, flag: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = spec.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("{flag} expects LO,HI,N"));
    }
    let lo: f64 = parts[0].parse().map_err(|e| format!("{flag}: {e}"))?;
    let hi: f64 = parts[1].parse().map_err(|e| format!("{flag}: {e}"))?;
    let n: usize = parts[2].parse().map_err(|e| format!("{flag}: {e}"))?;
    Ok(kflayers::env::linspace(lo, hi, n))
}

fn cmd_grid_eval(args: &[String]) -> Result<(), String> {
    let mut run_dir: Option<PathBuf> = None;
    let mut spec = GridSpec::default();
    let mut i = 0;
    while i < args.len() {
        match args[i].as_str() {
            "--run" => run_dir = Some(PathBuf::from(take_value(args, &mut i, "--run")?)),
            "--episodes" => {
                spec.episodes = take_value(args, &mut i, "--episodes")?
                    .parse()
                    .map_err(|e| format!("--episodes: {e}"))?
            }
            "--mu" => spec.mus = parse_grid(take_value(args, &mut i, "--mu")?, "--mu")?,
            "--sigma" => {
                spec.sigmas = parse_grid(take_value(args, &mut i, "--sigma")?, "--sigma")?
            }
            flag => return Err(format!("unknown flag `{flag}`")),
        }
        i += 1;
    }
    let run_dir = run_dir.ok_or("grid-eval requires --run DIR")?;
    let out = artifacts::run_grid_eval(&run_dir, &spec)?;
    let agg = run_dir.join("heatmap.csv");
    let per = run_dir.join("heatmap_agents.csv");
    std::fs::write(&agg, &out.aggregated).map_err(|e| e.to_string())?;
    std::fs::write(&per, &out.per_agent).map_err(|e| e.to_string())?;
    println!("{} grid cells -> {} and {}", out.cells, agg.display(), per.display());
    Ok(())
}

fn cmd_bench(args: &[String]) -> Result<(), String> {
    let mut lengths: Vec<usize> = vec![64, 128, 256, 512, 1024, 2048, 4096, 8192];
    let mut channels = 4usize;
    let mut repeats = 5usize;
    let mut out = PathBuf::from("bench_scan.csv");
    let mut i = 0;
    while i < args.len() {
        match args[i].as_str() {
            "--lengths" => {
                lengths = take_value(args, &mut i, "--lengths")?
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|e| format!("--lengths: {e}")))
                    .collect::<Result<_, _>>()?
            }
            "--channels" => {
                channels = take_value(args, &mut i, "--channels")?
                    .parse()
                    .map_err(|e| format!("--channels: {e}"))?
            }
            "--repeats" => {
                repeats = take_value(args, &mut i, "--repeats")?
                    .parse()
                    .map_err(|e| format!("--repeats: {e}"))?
            }
            "--out" => out = PathBuf::from(take_value(args, &mut i, "--out")?),
            flag => return Err(format!("unknown flag `{flag}`")),
        }
        i += 1;
    }
    let rows = bench_scan(&lengths, channels, repeats);
    std::fs::write(&out, bench_csv(&rows)).map_err(|e| e.to_string())?;
    for r in &rows {
        println!(
            "K={:5}  seq {:>10.0} ns  par {:>10.0} ns  combines {} (expected {})",
            r.length, r.seq_ns, r.par_ns, r.par_combines, r.par_combines_expected
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_verify(args: &[String]) -> Result<(), String> {
    let mut profile = Profile::Smoke;
    let mut filter: Option<String> = None;
    let mut i = 0;
    while i < args.len() {
        match args[i].as_str() {
            "--profile" => {
                profile = match take_value(args, &mut i, "--profile")? {
                    "smoke" => Profile::Smoke,
                    "full" => Profile::Full,
                    other => return Err(format!("unknown profile `{other}`")),
                }
            }
            "--only" => filter = Some(take_value(args, &mut i, "--only")?.to_string()),
            flag => return Err(format!("unknown flag `{flag}`")),
        }
        i += 1;
    }
    let failed = verify::run_all(profile, filter.as_deref());
    if failed == 0 {
        Ok(())
    } else {
        Err(format!("{failed} check(s) failed"))
    }
}
