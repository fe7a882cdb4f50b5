use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ugfuse::config::RunConfig;
use ugfuse::dataio::{
    generate, inject_noise, read_features, write_features, write_manifest, Dataset,
};
use ugfuse::evalkit::{ablation_run, evaluate_model, json_report, noise_sweep};
use ugfuse::lock::{write_atomic, LockGuard};
use ugfuse::numerics::GradCheckConfig;
use ugfuse::objective::certify::gradcheck_variant;
use ugfuse::objective::train::train_until;
use ugfuse::objective::{Checkpoint, Variant};
use ugfuse::{Error, Exec, Result};

#[derive(Parser)]
#[command(
    name = "ugfuse",
    version,
    about = "Uncertainty-guided multi-modal retrieval: synthesize data, train, evaluate, sweep noise, certify gradients",
    long_about = None
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` config file; `--key value` flags override it.
    #[arg(long, value_name = "FILE", global = true)]
    config: Option<PathBuf>,
    /// Shorthand for `--train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run without the thread pool.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset (UGGF) with a manifest CSV alongside.
    Synth {
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
    },
    /// Train one variant and write checkpoint.uggc and loss.csv.
    Train {
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Continue from this checkpoint instead of a fresh init.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long, value_name = "N")]
        until_epoch: Option<usize>,
    },
    /// Evaluate a checkpoint on the query/gallery split.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        /// Writes metrics.json and metrics.csv here; JSON goes to stdout otherwise.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Shorthand for `--noise.intensity`.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Evaluate checkpoints over a list of noise intensities.
    Sweep {
        /// Checkpoint files, or directories scanned for `*.uggc`.
        #[arg(long = "checkpoint", value_name = "PATH", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, value_name = "FILE")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Shorthand for `--sweep.eps`.
        #[arg(long, value_name = "LIST")]
        eps_list: Option<String>,
    },
    /// Finite-difference check of every parameter group on a micro-batch.
    Gradcheck {
        /// Also write gradcheck.csv here.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every variant in sweep.variants over sweep.seeds.
    Ablate {
        /// Dataset to use; synthesized from the config when absent.
        #[arg(long, value_name = "FILE")]
        data: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Also run the noise sweep on the trained checkpoints.
        #[arg(long)]
        sweep: bool,
        /// Exit 1 unless e reaches R-1 >= 0.90, mAP >= 0.80, and mean(e) >= mean(c) >= mean(a) with e - a >= 0.03.
        #[arg(long)]
        check: bool,
    },
}

/// Splits dotted `--key value` / `--key=value` overrides from the rest.
fn split_overrides(
    args: Vec<String>,
) -> std::result::Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (key, inline) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        if !key.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("--{key} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}

struct Resolved {
    cfg: RunConfig,
    /// Keys set explicitly by file or flag.
    explicit: BTreeSet<String>,
    exec: Exec,
}

fn resolve(common: &Common, overrides: &[(String, String)]) -> Result<Resolved> {
    let mut cfg = RunConfig::default();
    let mut explicit = BTreeSet::new();
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        cfg.apply_text(&text)?;
        for line in text.lines() {
            if let Some((k, _)) = line.split('#').next().unwrap_or("").split_once('=') {
                explicit.insert(k.trim().to_string());
            }
        }
    }
    for (k, v) in overrides {
        cfg.set(k, v)?;
        explicit.insert(k.clone());
    }
    if let Some(seed) = common.seed {
        cfg.set("train.seed", &seed.to_string())?;
        explicit.insert("train.seed".into());
    }
    cfg.validate()?;
    let exec = if common.sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    };
    Ok(Resolved {
        cfg,
        explicit,
        exec,
    })
}

/// Takes D and n from the dataset unless they were set explicitly.
fn adopt_dims(r: &mut Resolved, ds: &Dataset, path: &Path) -> Result<()> {
    for (key, have) in [("model.D", ds.d), ("model.n", ds.n)] {
        let want: usize = r.cfg.get(key)?.parse().expect("numeric key");
        if want == have {
            continue;
        }
        if r.explicit.contains(key) {
            return Err(Error::Config(format!(
                "{key} = {want} but {} has {key} = {have}",
                path.display()
            )));
        }
        r.cfg.set(key, &have.to_string())?;
    }
    r.cfg.validate()
}

fn run_id(cmd: &str, hash: u64) -> String {
    format!("{cmd}-{:08x}", hash >> 32)
}

fn header(run_id: &str, hash: u64) -> String {
    format!("# run_id: {run_id}\n# config_hash: {hash:016x}\n")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let text = format!("# config_hash: {:016x}\n{}", cfg.hash(), cfg.render());
    write_text(&dir.join("config.txt"), &text)
}

fn announce(cmd: &str, cfg: &RunConfig) -> (String, u64) {
    let hash = cfg.hash();
    let id = run_id(cmd, hash);
    eprintln!("[{id}] resolved config hash {hash:016x}");
    (id, hash)
}

fn synth(r: Resolved, out: &Path) -> Result<()> {
    let (id, hash) = announce("synth", &r.cfg);
    let ds = generate(&r.cfg.data)?;
    write_features(&ds, out)?;
    write_manifest(&ds, &out.with_extension("manifest.csv"))?;
    let sidecar = format!("{}{}", header(&id, hash), r.cfg.render());
    write_text(&out.with_extension("cfg"), &sidecar)?;
    eprintln!(
        "[{id}] wrote {} samples (n = {}, D = {}) to {}",
        ds.len(),
        ds.n,
        ds.d,
        out.display()
    );
    Ok(())
}

fn train(
    mut r: Resolved,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    until: Option<usize>,
) -> Result<()> {
    let ds = read_features(data)?;
    adopt_dims(&mut r, &ds, data)?;
    let mut ck = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            r.cfg.train = ck.config.clone();
            ck
        }
        None => Checkpoint::initial(&r.cfg.train, &ds)?,
    };
    let _lock = LockGuard::for_dir(out)?;
    let (id, hash) = announce("train", &r.cfg);
    ck.set_meta("config_hash", format!("{hash:016x}"));
    ck.set_meta("run_id", id.clone());
    let target = until.unwrap_or(ck.config.epochs);
    let start = Instant::now();
    while ck.epoch < target {
        let before = ck.history.len();
        let next = ck.epoch + 1;
        train_until(&mut ck, &ds, next, r.exec)?;
        let epoch = &ck.history[before..];
        let mean = epoch.iter().map(|h| h.total).sum::<f64>() / epoch.len().max(1) as f64;
        eprintln!("[{id}] epoch {:>3}  mean total loss {mean:.6}", ck.epoch);
    }
    ck.save(&out.join("checkpoint.uggc"))?;
    write_text(&out.join("loss.csv"), &(header(&id, hash) + &ck.loss_csv()))?;
    write_config(out, &r.cfg)?;
    eprintln!(
        "[{id}] {} steps in {:.1}s -> {}",
        ck.step,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn eval(mut r: Resolved, checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = read_features(data)?;
    r.cfg.train = ck.config.clone();
    r.cfg.data.d = ds.d;
    r.cfg.data.n = ds.n;
    let _lock = out.map(LockGuard::for_dir).transpose()?;
    let (id, hash) = announce("eval", &r.cfg);
    let ds = inject_noise(&ds, &r.cfg.noise)?;
    let report = evaluate_model(&ck.model()?, &ck.params, &ds, r.cfg.metric, r.exec)?;
    eprintln!(
        "[{id}] mAP {:.4}  R-1 {:.4}  R-5 {:.4}  R-10 {:.4}  ({} valid queries)",
        report.map, report.rank1, report.rank5, report.rank10, report.valid_queries
    );
    let json = json_report(&id, hash, &vec![&report]);
    match out {
        Some(dir) => {
            write_text(&dir.join("metrics.json"), &json)?;
            let csv = format!(
                "{}mAP,R-1,R-5,R-10,valid_queries,invalid_queries\n{},{},{},{},{},{}\n",
                header(&id, hash),
                report.map,
                report.rank1,
                report.rank5,
                report.rank10,
                report.valid_queries,
                report.invalid_queries
            );
            write_text(&dir.join("metrics.csv"), &csv)?;
            write_config(dir, &r.cfg)?;
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn checkpoint_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::Io {
                    path: p.clone(),
                    source: e,
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "uggc"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn sweep(r: Resolved, checkpoints: &[PathBuf], data: &Path, out: &Path) -> Result<()> {
    let mut set = BTreeMap::new();
    for f in checkpoint_files(checkpoints)? {
        let ck = Checkpoint::load(&f)?;
        let key = (ck.config.variant, ck.config.seed);
        if set.insert(key, ck).is_some() {
            return Err(Error::Config(format!(
                "two checkpoints for variant {} seed {}",
                key.0, key.1
            )));
        }
    }
    run_sweep(r, set, &read_features(data)?, out)
}

fn run_sweep(
    mut r: Resolved,
    set: BTreeMap<(Variant, u64), Checkpoint>,
    ds: &Dataset,
    out: &Path,
) -> Result<()> {
    let variants: Vec<Variant> = set
        .keys()
        .map(|k| k.0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let seeds: Vec<u64> = set
        .keys()
        .map(|k| k.1)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    r.cfg.data.d = ds.d;
    r.cfg.data.n = ds.n;
    r.cfg.sweep.variants = variants.clone();
    r.cfg.sweep.seeds = seeds.clone();
    let _lock = LockGuard::for_dir(out)?;
    let (id, hash) = announce("sweep", &r.cfg);
    let start = Instant::now();
    let report = noise_sweep(
        &set,
        ds,
        &r.cfg.sweep.eps,
        &variants,
        &seeds,
        &r.cfg.noise,
        r.cfg.metric,
        r.exec,
    )?;
    write_text(
        &out.join("sweep_rows.csv"),
        &(header(&id, hash) + &report.rows_csv()),
    )?;
    write_text(
        &out.join("sweep_summary.csv"),
        &(header(&id, hash) + &report.summary_csv()),
    )?;
    write_text(
        &out.join("sweep.json"),
        &json_report(&id, hash, &report.rows),
    )?;
    write_config(out, &r.cfg)?;
    for v in &variants {
        let line: Vec<String> = r
            .cfg
            .sweep
            .eps
            .iter()
            .map(|&e| format!("{:.3}", report.mean_map(e, *v)))
            .collect();
        eprintln!("[{id}] {v}: mAP over eps {}", line.join(" "));
    }
    eprintln!(
        "[{id}] {} rows in {:.1}s -> {}",
        report.rows.len(),
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

/// Returns whether every group passed.
fn gradcheck(r: Resolved, out: Option<&Path>) -> Result<bool> {
    let (id, hash) = announce("gradcheck", &r.cfg);
    let gc = GradCheckConfig {
        seed: r.cfg.train.seed,
        ..GradCheckConfig::default()
    };
    let start = Instant::now();
    let mut csv = header(&id, hash) + "variant,parameter,entries,max_rel_error,kinks,pass\n";
    let mut all = true;
    println!(
        "{:<8} {:<28} {:>8} {:>14} {:>6}  result",
        "variant", "parameter", "entries", "max rel err", "kinks"
    );
    for &v in &r.cfg.sweep.variants {
        for g in gradcheck_variant(&r.cfg.train, v, gc)? {
            all &= g.pass;
            println!(
                "{:<8} {:<28} {:>8} {:>14.3e} {:>6}  {}",
                v.tag(),
                g.parameter,
                g.analytic.len(),
                g.max_relative_error,
                g.kinks,
                if g.pass { "ok" } else { "FAIL" }
            );
            let _ = writeln!(
                csv,
                "{},{},{},{:e},{},{}",
                v.tag(),
                g.parameter,
                g.analytic.len(),
                g.max_relative_error,
                g.kinks,
                g.pass
            );
        }
    }
    if let Some(dir) = out {
        let _lock = LockGuard::for_dir(dir)?;
        write_text(&dir.join("gradcheck.csv"), &csv)?;
        write_config(dir, &r.cfg)?;
    }
    eprintln!(
        "[{id}] {} in {:.1}s",
        if all { "all groups pass" } else { "FAILURES" },
        start.elapsed().as_secs_f64()
    );
    Ok(all)
}

/// Returns the outcome of `--check` (true when not requested).
fn ablate(
    mut r: Resolved,
    data: Option<&Path>,
    out: &Path,
    with_sweep: bool,
    check: bool,
) -> Result<bool> {
    let ds = match data {
        Some(p) => {
            let ds = read_features(p)?;
            adopt_dims(&mut r, &ds, p)?;
            ds
        }
        None => generate(&r.cfg.data)?,
    };
    let (id, hash) = {
        let _lock = LockGuard::for_dir(out)?;
        let (id, hash) = announce("ablate", &r.cfg);
        let start = Instant::now();
        let report = ablation_run(
            &r.cfg.train,
            &ds,
            &r.cfg.sweep.variants,
            &r.cfg.sweep.seeds,
            r.cfg.metric,
            r.exec,
        )?;
        write_text(
            &out.join("ablation_rows.csv"),
            &(header(&id, hash) + &report.rows_csv()),
        )?;
        write_text(
            &out.join("ablation_table.csv"),
            &(header(&id, hash) + &report.table_csv()),
        )?;
        write_text(
            &out.join("ablation.json"),
            &json_report(&id, hash, &report.rows),
        )?;
        write_config(out, &r.cfg)?;
        let ck_dir = out.join("checkpoints");
        std::fs::create_dir_all(&ck_dir).map_err(|e| Error::Io {
            path: ck_dir.clone(),
            source: e,
        })?;
        for ((v, s), ck) in &report.checkpoints {
            let mut ck = ck.clone();
            ck.set_meta("config_hash", format!("{hash:016x}"));
            ck.set_meta("run_id", id.clone());
            ck.save(&ck_dir.join(format!("{v}-seed{s}.uggc")))?;
        }
        for &v in &r.cfg.sweep.variants {
            let (m, ms) = report.map_stats(v);
            let (r1, r1s) = report.rank1_stats(v);
            eprintln!("[{id}] {v}: mAP {m:.4} ± {ms:.4}  R-1 {r1:.4} ± {r1s:.4}");
        }
        eprintln!("[{id}] done in {:.1}s", start.elapsed().as_secs_f64());
        if with_sweep {
            drop(_lock);
            let sweep_r = Resolved {
                cfg: r.cfg.clone(),
                explicit: r.explicit.clone(),
                exec: r.exec,
            };
            run_sweep(sweep_r, report.checkpoints.clone(), &ds, &out.join("sweep"))?;
        }
        if check {
            return Ok(ablation_check(&report, &id));
        }
        (id, hash)
    };
    let _ = (id, hash);
    Ok(true)
}

fn ablation_check(report: &ugfuse::evalkit::AblationReport, id: &str) -> bool {
    let has = |v| report.rows_for(v).next().is_some();
    if ![Variant::A, Variant::C, Variant::E].into_iter().all(has) {
        eprintln!("[{id}] --check needs variants a, c and e");
        return false;
    }
    let (a, c, e) = (
        report.map_stats(Variant::A).0,
        report.map_stats(Variant::C).0,
        report.map_stats(Variant::E).0,
    );
    let r1 = report.rank1_stats(Variant::E).0;
    let checks = [
        ("e R-1 >= 0.90", r1 >= 0.90),
        ("e mAP >= 0.80", e >= 0.80),
        ("mean(e) >= mean(c)", e >= c),
        ("mean(c) >= mean(a)", c >= a),
        ("e - a >= 0.03", e - a >= 0.03),
    ];
    for (name, ok) in checks {
        eprintln!("[{id}] check {name}: {}", if ok { "PASS" } else { "FAIL" });
    }
    checks.iter().all(|c| c.1)
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownKey(_) | Error::MissingCheckpoint(_) => 2,
        Error::Io { .. }
        | Error::BadMagic { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated { .. }
        | Error::Malformed { .. }
        | Error::Locked(_) => 3,
        Error::Variant { source, .. } => exit_code(source),
        _ => 1,
    }
}

fn main() -> ExitCode {
    let (args, overrides) = match split_overrides(std::env::args().collect()) {
        Ok(x) => x,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    let table = RunConfig::help_table();
    let mut command = Cli::command().after_long_help(table.clone());
    for name in ["synth", "train", "eval", "sweep", "gradcheck", "ablate"] {
        let t = table.clone();
        command = command.mut_subcommand(name, |s| s.after_help(t));
    }
    let matches = command.get_matches_from(args);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let common = cli.common.clone();

    let mut overrides = overrides;
    match &cli.cmd {
        Cmd::Eval { eps: Some(e), .. } => overrides.push(("noise.intensity".into(), e.to_string())),
        Cmd::Sweep {
            eps_list: Some(l), ..
        } => overrides.push(("sweep.eps".into(), l.clone())),
        _ => {}
    }
    let outcome = resolve(&common, &overrides).and_then(|r| match cli.cmd {
        Cmd::Synth { out } => synth(r, &out).map(|_| true),
        Cmd::Train {
            data,
            out,
            resume,
            until_epoch,
        } => train(r, &data, &out, resume.as_deref(), until_epoch).map(|_| true),
        Cmd::Eval {
            checkpoint,
            data,
            out,
            ..
        } => eval(r, &checkpoint, &data, out.as_deref()).map(|_| true),
        Cmd::Sweep {
            checkpoints,
            data,
            out,
            ..
        } => sweep(r, &checkpoints, &data, &out).map(|_| true),
        Cmd::Gradcheck { out } => gradcheck(r, out.as_deref()),
        Cmd::Ablate {
            data,
            out,
            sweep,
            check,
        } => ablate(r, data.as_deref(), &out, sweep, check),
    });
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
