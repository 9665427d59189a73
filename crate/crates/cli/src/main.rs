mod config;
mod error;

use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use needlesim::evaluation::{
    aggregate, compare, steer, write_metrics_csv, ForceTrace, PatientMetrics, StudySummary,
};
use needlesim::phantom::{degrade, generate, generate_bone_shell};
use needlesim::planner::{plan, read_paths, write_paths, PlanError};
use needlesim::report::{read_metrics_csv, write_report, MetricRow};
use needlesim::study::{build_arms, run_study, Case, TestArm};
use needlesim::tissue::fit_thresholds;
use needlesim::volume::{extract_body_mask, TissueLabel, VoxelVolume};
use needlesim_trainer::{Registry, VolumeEntry};

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "needlesim", version, about = "Needle insertion haptic force simulation")]
struct Cli {
    /// RunConfig JSON; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for steering and studies.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Provider {
    Full,
    Partial,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Arm {
    Full,
    Partial,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom: volume.* (ground truth) and partial.* (key structures).
    Phantom {
        /// Phantom spec JSON.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Replace the ribs by a closed bone shell.
        #[arg(long)]
        bone_shell: bool,
        /// Boundary displacement of the partial labels, mm.
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Fit intensity thresholds to a volume.
    Fit {
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        bone_offset: Option<f64>,
    },
    /// Plan straight insertion paths on the ground truth.
    Plan {
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        q_min: Option<f64>,
        #[arg(long)]
        d_cap: Option<f64>,
        #[arg(long)]
        n_cap: Option<f64>,
        #[arg(long)]
        max_length: Option<f64>,
    },
    /// Steer along planned paths and record force traces.
    Steer {
        #[arg(long)]
        volume: Option<PathBuf>,
        #[arg(long)]
        partial: Option<PathBuf>,
        #[arg(long)]
        thresholds: Option<PathBuf>,
        /// Path JSONL from `plan`.
        #[arg(long)]
        paths: PathBuf,
        #[arg(long, value_enum, default_value = "full")]
        provider: Provider,
        #[arg(long)]
        step: Option<f64>,
        #[arg(long)]
        standoff: Option<f64>,
        #[arg(long)]
        a1_fraction: Option<f64>,
        /// Steer only the first `n` paths.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Compare two directories of traces written by `steer`.
    Compare {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "case")]
        patient: String,
    },
    /// Plan, steer both arms, compare and report, end to end.
    Study {
        /// Case directory written by `phantom`; repeatable. Phantoms are
        /// generated when none is given.
        #[arg(long = "case")]
        cases: Vec<PathBuf>,
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long, value_enum)]
        test_arm: Option<Arm>,
        #[arg(long)]
        max_paths: Option<usize>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Quantiles and box plots from a metrics CSV.
    Report {
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Serve the trainer session backend.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Case directory; repeatable. The built-in phantom when none is given.
        #[arg(long = "case")]
        cases: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom { .. } => "phantom",
            Command::Fit { .. } => "fit",
            Command::Plan { .. } => "plan",
            Command::Steer { .. } => "steer",
            Command::Compare { .. } => "compare",
            Command::Study { .. } => "study",
            Command::Report { .. } => "report",
            Command::Serve { .. } => "serve",
        }
    }
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    subcommand: &'a str,
    kind: &'a str,
    message: String,
}

fn emit(key: &str, body: &ErrorBody) {
    let mut m = serde_json::Map::new();
    m.insert(key.into(), serde_json::to_value(body).expect("serializes"));
    eprintln!("{}", serde_json::Value::Object(m));
}

fn warn(subcommand: &str, message: String) {
    emit(
        "warning",
        &ErrorBody {
            subcommand,
            kind: "warning",
            message,
        },
    );
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            emit(
                "error",
                &ErrorBody {
                    subcommand: "",
                    kind: err.kind(),
                    message: err.to_string(),
                },
            );
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    let name = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            emit(
                "error",
                &ErrorBody {
                    subcommand: name,
                    kind: err.kind(),
                    message: err.to_string(),
                },
            );
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = Some(o);
    }
    if let Some(n) = cli.jobs {
        if n == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Phantom {
            spec,
            bone_shell,
            sigma,
        } => {
            set(&mut cfg.phantom, spec.map(Some));
            set(&mut cfg.sigma, sigma);
            cmd_phantom(&cfg, bone_shell)
        }
        Command::Fit { volume, bone_offset } => {
            set(&mut cfg.volume, volume.map(Some));
            set(&mut cfg.bone_offset_hu, bone_offset);
            cmd_fit(&cfg)
        }
        Command::Plan {
            volume,
            q_min,
            d_cap,
            n_cap,
            max_length,
        } => {
            set(&mut cfg.volume, volume.map(Some));
            set(&mut cfg.planner.q_min, q_min);
            set(&mut cfg.planner.d_cap, d_cap);
            set(&mut cfg.planner.n_cap, n_cap);
            set(&mut cfg.planner.max_length, max_length);
            cmd_plan(&cfg)
        }
        Command::Steer {
            volume,
            partial,
            thresholds,
            paths,
            provider,
            step,
            standoff,
            a1_fraction,
            limit,
        } => {
            set(&mut cfg.volume, volume.map(Some));
            set(&mut cfg.partial, partial.map(Some));
            set(&mut cfg.thresholds, thresholds.map(Some));
            set(&mut cfg.step, step);
            set(&mut cfg.standoff, standoff);
            set(&mut cfg.a1_fraction, a1_fraction);
            cmd_steer(&cfg, &paths, provider, limit)
        }
        Command::Compare {
            reference,
            test,
            patient,
        } => cmd_compare(&cfg, &reference, &test, &patient),
        Command::Study {
            cases,
            sigma,
            patients,
            test_arm,
            max_paths,
            step,
        } => {
            set(&mut cfg.sigma, sigma);
            set(&mut cfg.patients, patients);
            set(&mut cfg.max_paths, max_paths.map(Some));
            set(&mut cfg.step, step);
            set(
                &mut cfg.test_arm,
                test_arm.map(|a| match a {
                    Arm::Full => TestArm::Full,
                    Arm::Partial => TestArm::Partial,
                }),
            );
            cmd_study(&cfg, &cases)
        }
        Command::Report { metrics } => cmd_report(&cfg, &metrics),
        Command::Serve { addr, cases } => cmd_serve(&cfg, addr, &cases),
    }
}

fn set<T>(field: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *field = v;
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, CliError> {
    let dir = cfg.out_dir()?;
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn volume_header(cfg: &RunConfig) -> Result<&Path, CliError> {
    cfg.volume
        .as_deref()
        .ok_or_else(|| CliError::Config("no volume header (--volume)".into()))
}

/// Ground truth plus partial labels; without a partial header every voxel
/// goes to the transfer function.
fn load_case(cfg: &RunConfig, name: &str) -> Result<Case, CliError> {
    let volume = VoxelVolume::load(volume_header(cfg)?)?;
    let partial = match &cfg.partial {
        Some(p) => {
            let v = VoxelVolume::load(p)?;
            if v.geometry != volume.geometry {
                return Err(CliError::Config("partial labels do not match the volume grid".into()));
            }
            v.labels
        }
        None => vec![TissueLabel::Unlabeled; volume.geometry.len()],
    };
    Ok(Case::new(name, volume, partial)?)
}

fn case_name(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(|| "case".into(), |n| n.to_string_lossy().into_owned())
}

fn cmd_phantom(cfg: &RunConfig, bone_shell: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let dir = out_dir(cfg)?;
    let (spec, degrade_spec) = cfg.phantom_specs(0)?;
    let volume = if bone_shell {
        generate_bone_shell(&spec)?
    } else {
        generate(&spec)?
    };
    let partial = degrade(&volume.labels, &volume.geometry, &degrade_spec)?;
    let case = Case::new(case_name(dir), volume, partial)?;
    let header = case.save(dir)?;
    write_json(&dir.join("phantom.json"), &spec)?;
    write_json(&dir.join("degrade.json"), &degrade_spec)?;
    println!("wrote {}", header.display());
    Ok(())
}

fn cmd_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let volume = VoxelVolume::load(volume_header(cfg)?)?;
    let fit = fit_thresholds(&volume, cfg.bone_offset_hu)?;
    for f in &fit.fallback {
        warn("fit", format!("threshold {f} fell back to the midpoint of the class means"));
    }
    let path = out_dir(cfg)?.join("thresholds.json");
    write_json(&path, &fit)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_plan(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate()?;
    let volume = VoxelVolume::load(volume_header(cfg)?)?;
    let body = extract_body_mask(&volume, cfg.body_threshold_hu)?;
    let paths = match plan(&volume, &body, &cfg.planner) {
        Ok(o) => o.paths,
        Err(e @ (PlanError::EmptyTarget | PlanError::NoSkin)) => {
            warn("plan", e.to_string());
            Vec::new()
        }
        Err(e) => return Err(e.into()),
    };
    if paths.is_empty() {
        warn("plan", "no feasible path; path file is empty".into());
    }
    let path = out_dir(cfg)?.join("paths.jsonl");
    write_paths(&path, &paths)?;
    println!("wrote {} paths to {}", paths.len(), path.display());
    Ok(())
}

fn trace_name(id: usize) -> String {
    format!("trace_{id:06}")
}

fn cmd_steer(cfg: &RunConfig, paths_file: &Path, provider: Provider, limit: Option<usize>) -> Result<(), CliError> {
    let study = cfg.study()?;
    study.steer.validate()?;
    let case = load_case(cfg, "case")?;
    let arms = build_arms(&case, &study)?;
    let cls = match provider {
        Provider::Full => arms.reference,
        Provider::Partial => arms.test,
    };
    let mut paths = read_paths(paths_file)?;
    if let Some(n) = limit {
        paths.truncate(n);
    }
    let dir = out_dir(cfg)?;
    paths.par_iter().try_for_each(|p| -> Result<(), CliError> {
        let t = steer(p, cls.clone(), &study.engine, &study.steer)?;
        let stem = trace_name(p.id);
        t.write_binary(dir.join(format!("{stem}.bin")))?;
        t.write_csv(dir.join(format!("{stem}.csv")))?;
        Ok(())
    })?;
    println!("wrote {} traces to {}", paths.len(), dir.display());
    Ok(())
}

fn trace_files(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut names = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))? {
        let name = e?.file_name().to_string_lossy().into_owned();
        if name.starts_with("trace_") && name.ends_with(".bin") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn write_study_outputs(dir: &Path, metrics: &[PatientMetrics], summary: &StudySummary) -> Result<(), CliError> {
    write_metrics_csv(dir.join("metrics.csv"), metrics, summary)?;
    write_json(&dir.join("summary.json"), summary)?;
    Ok(())
}

fn cmd_compare(cfg: &RunConfig, reference: &Path, test: &Path, patient: &str) -> Result<(), CliError> {
    let names = trace_files(reference)?;
    if names.is_empty() {
        return Err(CliError::Config(format!("no traces in {}", reference.display())));
    }
    let metrics = names
        .par_iter()
        .map(|n| -> Result<PatientMetrics, CliError> {
            let r = ForceTrace::read_binary(reference.join(n))?;
            let t = ForceTrace::read_binary(test.join(n))?;
            Ok(PatientMetrics {
                patient: patient.to_string(),
                metrics: compare(&r, &t)?,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let summary = aggregate(&metrics, &cfg.jnd)?;
    let dir = out_dir(cfg)?;
    write_study_outputs(dir, &metrics, &summary)?;
    println!(
        "{} paths: rmse {:.4} N, mae {:.4} N, identical {:.2}%",
        summary.pooled.paths, summary.pooled.rmse.mean, summary.pooled.mae.mean, summary.pooled.pct_identical
    );
    Ok(())
}

fn cmd_study(cfg: &RunConfig, dirs: &[PathBuf]) -> Result<(), CliError> {
    let study = cfg.study()?;
    let cases = if !dirs.is_empty() {
        dirs.iter()
            .map(|d| Case::load(d, case_name(d)))
            .collect::<Result<Vec<_>, _>>()?
    } else if cfg.volume.is_some() {
        vec![load_case(cfg, "case")?]
    } else {
        (0..cfg.patients)
            .map(|i| {
                let (spec, d) = cfg.phantom_specs(i)?;
                Ok(Case::phantom(format!("patient{i}"), &spec, &d)?)
            })
            .collect::<Result<Vec<_>, CliError>>()?
    };
    let dir = out_dir(cfg)?;
    let output = run_study(&cases, &study)?;
    for run in &output.cases {
        let sub = dir.join(&run.patient);
        fs::create_dir_all(&sub)?;
        write_paths(sub.join("paths.jsonl"), &run.paths)?;
        write_json(&sub.join("thresholds.json"), &run.thresholds)?;
        if run.paths.is_empty() {
            warn("study", format!("case {} produced no paths", run.patient));
        }
    }
    let metrics = output.metrics();
    write_study_outputs(dir, &metrics, &output.summary)?;
    write_json(&dir.join("config.json"), cfg)?;
    let rows: Vec<MetricRow> = metrics.iter().map(MetricRow::from).collect();
    write_report(dir.join("report"), &rows)?;
    let p = &output.summary.pooled;
    println!(
        "{} paths: rmse {:.4} N, mae {:.4} N, identical {:.2}%",
        p.paths, p.rmse.mean, p.mae.mean, p.pct_identical
    );
    Ok(())
}

fn cmd_report(cfg: &RunConfig, metrics: &Path) -> Result<(), CliError> {
    let rows = read_metrics_csv(metrics)?;
    let files = write_report(out_dir(cfg)?, &rows)?;
    println!("wrote {} files", files.len());
    Ok(())
}

fn cmd_serve(cfg: &RunConfig, addr: SocketAddr, dirs: &[PathBuf]) -> Result<(), CliError> {
    let study = cfg.study()?;
    let cases = if dirs.is_empty() {
        let (spec, d) = cfg.phantom_specs(0)?;
        vec![Case::phantom("phantom", &spec, &d)?]
    } else {
        dirs.iter()
            .map(|d| Case::load(d, case_name(d)))
            .collect::<Result<Vec<_>, _>>()?
    };
    let mut registry = Registry::new();
    for c in cases {
        registry.insert(VolumeEntry::new(c, study.clone())?);
    }
    let names = registry.names();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Serve(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        eprintln!("listening on {} with volumes {}", listener.local_addr()?, names.join(","));
        std::io::stderr().flush()?;
        needlesim_trainer::serve_on(listener, Arc::new(registry)).await
    })
    .map_err(|e| CliError::Serve(e.to_string()))
}
