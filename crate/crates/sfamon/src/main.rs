use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{error::ErrorKind, Parser, Subcommand};

use sfamon::config::RunConfig;
use sfamon::data::{load_csv, write_csv};
use sfamon::monitor::{build_model, read_report, run_monitoring, write_report, TwoLevelModel};
use sfamon::simgen::{simulate, Scenario, ScenarioConfig};
use sfamon::{Error, Result};

/// Two-level slow feature monitoring for closed-loop processes.
#[derive(Parser)]
#[command(name = "sfamon", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a monitoring model from a normal-operation training CSV.
    Fit {
        /// Training dataset (CSV with a header row).
        #[arg(long)]
        train: PathBuf,
        /// Flat key=value run configuration.
        #[arg(long)]
        config: PathBuf,
        /// Where the model JSON is written.
        #[arg(long = "model-out")]
        model_out: PathBuf,
    },
    /// Monitor a test CSV with a fitted model and write the report CSV.
    Monitor {
        /// Fitted model JSON.
        #[arg(long)]
        model: PathBuf,
        /// Test dataset (same variables as training).
        #[arg(long)]
        test: PathBuf,
        /// Report CSV destination.
        #[arg(long)]
        out: PathBuf,
        /// Sliding alarm window; defaults to the fitted configuration.
        #[arg(long = "policy-window")]
        policy_window: Option<usize>,
        /// Quiet samples required to call a dynamic alarm cleared; defaults
        /// to the fitted configuration.
        #[arg(long = "clear-window")]
        clear_window: Option<usize>,
    },
    /// Generate a synthetic closed-loop dataset with a ground-truth sidecar.
    Simulate {
        /// normal, setpoint, or fault.
        #[arg(long)]
        scenario: String,
        /// Number of samples (at least 200).
        #[arg(long)]
        samples: usize,
        /// Random seed.
        #[arg(long)]
        seed: u64,
        /// Dataset CSV destination; the sidecar lands next to it.
        #[arg(long)]
        out: PathBuf,
        /// Number of controlled blocks.
        #[arg(long)]
        blocks: Option<usize>,
        /// Number of independent noise variables.
        #[arg(long = "noise-vars")]
        noise_vars: Option<usize>,
        /// Sample index where the scenario event starts.
        #[arg(long = "change-at")]
        change_at: Option<usize>,
    },
    /// Expand a report CSV into per-statistic series and a text summary.
    Report {
        /// Report CSV produced by the monitor command.
        #[arg(long)]
        monitor: PathBuf,
        /// Output directory for the per-statistic CSVs and summary.
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
        /// Model JSON; when given, the per-statistic files carry the
        /// control limit in their second column.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numerical(_) => 3,
                _ => 2,
            })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Fit {
            train,
            config,
            model_out,
        } => cmd_fit(&train, &config, &model_out),
        Command::Monitor {
            model,
            test,
            out,
            policy_window,
            clear_window,
        } => cmd_monitor(&model, &test, &out, policy_window, clear_window),
        Command::Simulate {
            scenario,
            samples,
            seed,
            out,
            blocks,
            noise_vars,
            change_at,
        } => cmd_simulate(&scenario, samples, seed, &out, blocks, noise_vars, change_at),
        Command::Report {
            monitor,
            out_dir,
            model,
        } => cmd_report(&monitor, &out_dir, model.as_deref()),
    }
}

fn usage(msg: &str) -> Result<ExitCode> {
    eprintln!("usage error: {msg}");
    Ok(ExitCode::from(1))
}

fn cmd_fit(train: &Path, config: &Path, model_out: &Path) -> Result<ExitCode> {
    let data = load_csv(train)?;
    let text = std::fs::read_to_string(config)
        .map_err(|e| Error::data(format!("{}: {e}", config.display())))?;
    let cfg = RunConfig::parse(&text)?;
    let (model, summary) = build_model(&data, &cfg)?;
    model.save(model_out)?;

    println!(
        "partition: {} subset(s), {} unassigned variable(s)",
        model.partition.sdl.len(),
        model.partition.sdnl.len()
    );
    for (k, vars) in model.partition.sdl.iter().enumerate() {
        let names: Vec<&str> = vars.iter().map(|&v| data.names[v].as_str()).collect();
        println!(
            "subset {}: {} ({} of {} features retained)",
            k + 1,
            names.join(", "),
            model.subsets[k].system_count,
            model.subsets[k].j()
        );
    }
    if !model.partition.sdnl.is_empty() {
        let names: Vec<&str> = model
            .partition
            .sdnl
            .iter()
            .map(|&v| data.names[v].as_str())
            .collect();
        println!("unassigned: {}", names.join(", "));
    }
    println!("training alarm rates:");
    for (name, rate) in &summary.rates {
        println!("  {name}: {rate:.4}");
    }
    println!("model written to {}", model_out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_monitor(
    model_path: &Path,
    test: &Path,
    out: &Path,
    policy_window: Option<usize>,
    clear_window: Option<usize>,
) -> Result<ExitCode> {
    if policy_window == Some(0) {
        return usage("--policy-window must be positive");
    }
    if clear_window == Some(0) {
        return usage("--clear-window must be positive");
    }
    let model = TwoLevelModel::load(model_path)?;
    let data = load_csv(test)?;
    let w = policy_window.unwrap_or(model.config.policy_window);
    let q = clear_window.unwrap_or(model.config.clear_window);
    let report = run_monitoring(&model, &data, w, q)?;
    write_report(out, &report, model.subset_count())?;

    for (k, status) in report.summary.final_local.iter().enumerate() {
        println!("subset {}: {status}", k + 1);
    }
    println!("global: {}", report.summary.final_global);
    println!("report written to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_simulate(
    scenario: &str,
    samples: usize,
    seed: u64,
    out: &Path,
    blocks: Option<usize>,
    noise_vars: Option<usize>,
    change_at: Option<usize>,
) -> Result<ExitCode> {
    let scenario: Scenario = match scenario.parse() {
        Ok(s) => s,
        Err(_) => {
            return usage(&format!(
                "--scenario must be normal, setpoint, or fault, got {scenario:?}"
            ))
        }
    };
    let mut cfg = ScenarioConfig::new(scenario, samples, seed);
    if let Some(b) = blocks {
        cfg.blocks = b;
    }
    if let Some(v) = noise_vars {
        cfg.noise_vars = v;
    }
    if let Some(c) = change_at {
        cfg.change_at = c;
    }
    if let Err(e) = cfg.validate() {
        return usage(&e.to_string());
    }
    let (data, truth) = simulate(&cfg)?;
    write_csv(out, &data)?;
    let sidecar = out.with_extension("truth.json");
    let json = serde_json::to_string_pretty(&truth)
        .map_err(|e| Error::data(format!("cannot encode ground truth: {e}")))?;
    std::fs::write(&sidecar, json)?;
    println!("dataset written to {}", out.display());
    println!("ground truth written to {}", sidecar.display());
    Ok(ExitCode::SUCCESS)
}

/// Control limit for statistic `s` of level `lvl` (subsets first, then
/// global), in report column order T2s, T2f, D2s, D2f.
fn limit_of(model: &TwoLevelModel, lvl: usize, s: usize) -> f64 {
    let set = if lvl < model.subset_count() {
        &model.limits.subsets[lvl]
    } else {
        &model.limits.global
    };
    [&set.t2s, &set.t2f, &set.d2s, &set.d2f][s].value
}

fn cmd_report(monitor: &Path, out_dir: &Path, model_path: Option<&Path>) -> Result<ExitCode> {
    let table = read_report(monitor)?;
    if table.rows.is_empty() {
        return Err(Error::data(format!(
            "{}: report has no data rows",
            monitor.display()
        )));
    }
    let model = match model_path {
        Some(p) => {
            let m = TwoLevelModel::load(p)?;
            if m.subset_count() != table.subset_count {
                return Err(Error::data(format!(
                    "model has {} subsets, report has {}",
                    m.subset_count(),
                    table.subset_count
                )));
            }
            Some(m)
        }
        None => None,
    };
    std::fs::create_dir_all(out_dir)?;

    let levels = table.subset_count + 1;
    let mut summary = String::new();
    summary.push_str(&format!("samples: {}\n", table.rows.len()));
    summary.push_str("first alarm indices:\n");
    for lvl in 0..levels {
        for s in 0..4 {
            let name = &table.header[1 + 6 * lvl + s];
            let path = out_dir.join(format!("{name}.csv"));
            let mut w = csv::Writer::from_path(&path)
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            w.write_record(["index", "value", "limit", "alarm"])
                .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            let limit = model
                .as_ref()
                .map(|m| limit_of(m, lvl, s).to_string())
                .unwrap_or_default();
            let mut first_alarm: Option<usize> = None;
            for row in &table.rows {
                let value = row.values[lvl][s].map(|v| v.to_string()).unwrap_or_default();
                // The report stores the aggregated flag of each statistic
                // pair: a_T covers T2s/T2f, a_D covers D2s/D2f.
                let flag = if s < 2 { row.flags[lvl].0 } else { row.flags[lvl].1 };
                if flag == Some(true) && first_alarm.is_none() {
                    first_alarm = Some(row.index);
                }
                let alarm = match flag {
                    Some(true) => "1",
                    Some(false) => "0",
                    None => "",
                };
                w.write_record([row.index.to_string(), value.clone(), limit.clone(), alarm.to_string()])
                    .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
            }
            w.flush()?;
            match first_alarm {
                Some(i) => summary.push_str(&format!("  {name}: {i}\n")),
                None => summary.push_str(&format!("  {name}: none\n")),
            }
        }
    }

    let last = table.rows.last().expect("nonempty");
    summary.push_str("final statuses:\n");
    for (k, status) in last.local_status.iter().enumerate() {
        summary.push_str(&format!("  subset {}: {status}\n", k + 1));
    }
    summary.push_str(&format!("  global: {}\n", last.global_status));
    let summary_path = out_dir.join("summary.txt");
    std::fs::write(&summary_path, &summary)?;
    print!("{summary}");
    println!("summary written to {}", summary_path.display());
    Ok(ExitCode::SUCCESS)
}
