//! `dsse` — drive the estimation experiments from the command line.
//!
//! Subcommands: `run` one scenario, `sweep` the configured grid,
//! `validate` the shipped artifacts, `report` aggregate emitted CSVs.
//! Exit codes: 0 success, 1 validation or simulation failure, 2
//! configuration errors (unknown flags, missing files, schema violations).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};

use dsse::config::{parse_config, RunConfig};
use dsse::estimator::SeMode;
use dsse::grid::{ac_power_flow, parse_case, GridModel};
use dsse::measurement::{
    build_plan, generate_synthetic, jacobian_fd_max_error, random_state, GrlTarget, SigmaConfig,
};
use dsse::runner::{
    fpr_summary_csv, metrics_csv, run_scenario, ExperimentMetrics, FprCell, ScenarioConfig,
};
use dsse::stats::chi2_threshold;

#[derive(Parser)]
#[command(
    name = "dsse",
    version,
    about = "Distribution-system state estimation under asynchronous SCADA"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one scenario (the first grid cell) and write metrics plus a
    /// re-runnable manifest.
    Run(RunArgs),
    /// Execute the full scenario grid and write the FPR summary table.
    Sweep(RunArgs),
    /// Self-check the case file, plan observability, Jacobian, and χ² table.
    Validate(ValidateArgs),
    /// Aggregate previously emitted CSVs into summary tables.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Case file, overriding the configuration.
    #[arg(long)]
    case: Option<PathBuf>,
    /// Single seed, replacing the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for sweep execution.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Estimation mode (ideal|traditional|proposed), replacing the list.
    #[arg(long)]
    mode: Option<String>,
    /// SCADA period in seconds, replacing the list.
    #[arg(long)]
    scada_period: Option<f64>,
    /// Redundancy target (grl3|grl2.769), replacing the list.
    #[arg(long)]
    grl: Option<String>,
    /// Horizon in seconds.
    #[arg(long)]
    horizon: Option<f64>,
}

#[derive(Args)]
struct ValidateArgs {
    /// Case file to check.
    #[arg(long, default_value = "cases/baranwu33.txt")]
    case: PathBuf,
    /// Configuration supplying the plan parameters.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory containing metrics_*.csv and fpr_summary.csv.
    #[arg(long, default_value = "out")]
    output_dir: PathBuf,
}

const EXIT_FAIL: u8 = 1;
const EXIT_CONFIG: u8 = 2;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.cmd {
        Cmd::Run(args) => cmd_run(&args),
        Cmd::Sweep(args) => cmd_sweep(&args),
        Cmd::Validate(args) => cmd_validate(&args),
        Cmd::Report(args) => cmd_report(&args),
    };
    ExitCode::from(code)
}

/// Load the configuration and apply flag overrides. Any failure here is a
/// configuration error.
fn load_config(args: &RunArgs) -> Result<RunConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            parse_config(&text).map_err(|e| e.to_string())?
        }
        None => RunConfig::default(),
    };
    if let Some(case) = &args.case {
        cfg.case_path = case.display().to_string();
    }
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(dir) = &args.output_dir {
        cfg.output_dir = dir.display().to_string();
    }
    if let Some(mode) = &args.mode {
        let m = SeMode::parse(mode).ok_or_else(|| format!("unknown mode `{mode}`"))?;
        cfg.modes = vec![m];
    }
    if let Some(period) = args.scada_period {
        cfg.scada_periods = vec![period];
    }
    if let Some(grl) = &args.grl {
        let g = GrlTarget::parse(grl).ok_or_else(|| format!("unknown grl `{grl}`"))?;
        cfg.grls = vec![g];
    }
    if let Some(h) = args.horizon {
        cfg.horizon_s = h;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    if !Path::new(&cfg.case_path).is_file() {
        return Err(format!("case file not found: {}", cfg.case_path));
    }
    Ok(cfg)
}

fn load_model(cfg: &RunConfig) -> Result<GridModel, String> {
    let text = fs::read_to_string(&cfg.case_path)
        .map_err(|e| format!("cannot read case {}: {e}", cfg.case_path))?;
    let model = parse_case(&text).map_err(|e| e.to_string())?;
    Ok(match cfg.slack_v {
        Some(v) => model.with_slack_voltage(v),
        None => model,
    })
}

fn write_file(dir: &str, name: &str, contents: &str) -> Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| format!("cannot create {dir}: {e}"))?;
    let path = Path::new(dir).join(name);
    fs::write(&path, contents).map_err(|e| format!("cannot write {}: {e}", path.display()))
}

fn cmd_run(args: &RunArgs) -> u8 {
    let cfg = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let model = match load_model(&cfg) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let scenario = cfg.first_scenario();
    match scenario.schedule(model.n()) {
        Ok(s) if s.degenerate => {
            eprintln!(
                "warning: stagger factor is 0 ({} groups at {} samples/s); \
                 SCADA groups arrive synchronized",
                model.n(),
                cfg.f_pmu
            );
        }
        Ok(_) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    }

    let metrics = match run_scenario(&model, &scenario) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAIL;
        }
    };

    // The manifest pins exactly this cell, so re-running it reproduces the
    // CSV byte for byte.
    let resolved = RunConfig {
        modes: vec![scenario.mode],
        scada_periods: vec![scenario.scada_period_s],
        grls: vec![scenario.grl],
        seeds: vec![scenario.seed],
        ..cfg.clone()
    };
    let csv_name = format!("metrics_{}.csv", scenario.label);
    if let Err(e) = write_file(&cfg.output_dir, &csv_name, &metrics_csv(&metrics)).and_then(|_| {
        write_file(
            &cfg.output_dir,
            "run_manifest.txt",
            &resolved.to_manifest_string(),
        )
    }) {
        eprintln!("error: {e}");
        return EXIT_FAIL;
    }
    println!(
        "{}: {} instants, fpr {:.4} ({} / {}), cum_se_error {:.6e}, max_state_err {:.3e}",
        scenario.label,
        metrics.rows.len(),
        metrics.fpr(),
        metrics.fp_count,
        metrics.test_count,
        metrics.cum_se_error(),
        metrics.max_state_err
    );
    println!(
        "wrote {}/{} and {}/run_manifest.txt",
        cfg.output_dir, csv_name, cfg.output_dir
    );
    0
}

/// Run every cell, farming them out to `jobs` workers; results are
/// returned in grid order regardless of completion order.
fn run_grid(
    model: &GridModel,
    grid: &[ScenarioConfig],
    jobs: usize,
) -> Result<Vec<ExperimentMetrics>, String> {
    let jobs = jobs.clamp(1, grid.len().max(1));
    let results: Vec<Mutex<Option<Result<ExperimentMetrics, String>>>> =
        (0..grid.len()).map(|_| Mutex::new(None)).collect();
    if jobs <= 1 {
        for (i, s) in grid.iter().enumerate() {
            *results[i].lock().unwrap() = Some(run_scenario(model, s).map_err(|e| e.to_string()));
        }
    } else {
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= grid.len() {
                        break;
                    }
                    let r = run_scenario(model, &grid[i]).map_err(|e| e.to_string());
                    *results[i].lock().unwrap() = Some(r);
                });
            }
        });
    }
    results
        .into_iter()
        .enumerate()
        .map(|(i, cell)| {
            cell.into_inner()
                .unwrap()
                .unwrap_or_else(|| Err(format!("cell {i} never ran")))
                .map_err(|e| format!("{}: {e}", grid[i].label))
        })
        .collect()
}

fn cmd_sweep(args: &RunArgs) -> u8 {
    let cfg = match load_config(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let model = match load_model(&cfg) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    let grid = cfg.scenario_grid();
    eprintln!(
        "sweep: {} cells, {} worker(s)",
        grid.len(),
        args.jobs.max(1)
    );
    let all = match run_grid(&model, &grid, args.jobs) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_FAIL;
        }
    };

    let mut cells = Vec::with_capacity(grid.len());
    for (scenario, metrics) in grid.iter().zip(&all) {
        let name = format!("metrics_{}.csv", scenario.label);
        if let Err(e) = write_file(&cfg.output_dir, &name, &metrics_csv(metrics)) {
            eprintln!("error: {e}");
            return EXIT_FAIL;
        }
        cells.push(FprCell::from_metrics(scenario, metrics));
        println!(
            "{}: fpr {:.4} ({} / {}), cum_se_error {:.6e}",
            scenario.label,
            metrics.fpr(),
            metrics.fp_count,
            metrics.test_count,
            metrics.cum_se_error()
        );
    }
    if let Err(e) = write_file(&cfg.output_dir, "fpr_summary.csv", &fpr_summary_csv(&cells))
        .and_then(|_| {
            write_file(
                &cfg.output_dir,
                "run_manifest.txt",
                &cfg.to_manifest_string(),
            )
        })
    {
        eprintln!("error: {e}");
        return EXIT_FAIL;
    }
    println!(
        "wrote {} metrics files, {0}/fpr_summary.csv and {0}/run_manifest.txt",
        cfg.output_dir
    );
    0
}

fn cmd_validate(args: &ValidateArgs) -> u8 {
    let sigmas = match &args.config {
        Some(path) => match fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))
            .and_then(|t| parse_config(&t).map_err(|e| e.to_string()))
        {
            Ok(c) => c.sigmas,
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_CONFIG;
            }
        },
        None => SigmaConfig::default(),
    };
    let text = match fs::read_to_string(&args.case) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: cannot read case {}: {e}", args.case.display());
            return EXIT_CONFIG;
        }
    };

    let mut all_ok = true;
    let mut check = |name: &str, outcome: Result<String, String>| match outcome {
        Ok(detail) => println!("PASS {name}: {detail}"),
        Err(detail) => {
            all_ok = false;
            println!("FAIL {name}: {detail}");
        }
    };

    let model = match parse_case(&text) {
        Ok(m) => {
            check(
                "case_parse",
                Ok(format!("{} buses, {} branches", m.n(), m.branches.len())),
            );
            m
        }
        Err(e) => {
            check("case_parse", Err(e.to_string()));
            println!("validation failed");
            return EXIT_FAIL;
        }
    };

    check(
        "power_flow",
        ac_power_flow(&model, &model.base_loads())
            .map(|st| {
                let vmin = (0..model.n()).map(|i| st.vm(i)).fold(f64::MAX, f64::min);
                format!("converged, min |V| = {vmin:.4} pu")
            })
            .map_err(|e| e.to_string()),
    );

    let pmu: Vec<usize> = dsse::runner::DEFAULT_PMU_BUSES.to_vec();
    for (name, target, want_d) in [
        ("plan_grl3", GrlTarget::Grl3, 3 * model.state_dim()),
        (
            "plan_grl2.769",
            GrlTarget::GrlReduced,
            (3 * model.state_dim()).saturating_sub(15),
        ),
    ] {
        check(
            name,
            build_plan(&model, &pmu, target, &sigmas)
                .and_then(|mut plan| {
                    // A thin plan leaves a synthetic-measurement deficit;
                    // complete it the same way the runner does.
                    if plan.d() < plan.target_d {
                        let st = ac_power_flow(&model, &model.base_loads())?;
                        generate_synthetic(&mut plan, &st, &model)?;
                    }
                    Ok(plan)
                })
                .map_err(|e| e.to_string())
                .and_then(|plan| {
                    if plan.d() == want_d {
                        Ok(format!("observable, d = {} = target", plan.d()))
                    } else {
                        Err(format!("d = {} but target is {want_d}", plan.d()))
                    }
                }),
        );
    }

    check(
        "jacobian_fd",
        build_plan(&model, &pmu, GrlTarget::Grl3, &sigmas)
            .map_err(|e| e.to_string())
            .and_then(|plan| {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2024);
                let mut worst = 0.0_f64;
                for _ in 0..5 {
                    let (vm, va) = random_state(&model, &mut rng);
                    worst = worst.max(jacobian_fd_max_error(&plan, &model, &vm, &va));
                }
                if worst <= 1e-5 {
                    Ok(format!("max deviation {worst:.2e} over 5 random states"))
                } else {
                    Err(format!("max deviation {worst:.2e} exceeds 1e-5"))
                }
            }),
    );

    check(
        "chi2_table",
        (|| {
            for (d, want) in [(1usize, 3.8415), (10, 18.307), (100, 124.342)] {
                let got = chi2_threshold(d, 0.95).map_err(|e| e.to_string())?;
                if (got - want).abs() > 1e-3 {
                    return Err(format!("χ²({d}, 0.95) = {got:.4}, tabulated {want}"));
                }
            }
            Ok("χ²(1|10|100, 0.95) match tabulated values to 1e-3".to_string())
        })(),
    );

    if all_ok {
        println!("all checks passed");
        0
    } else {
        println!("validation failed");
        EXIT_FAIL
    }
}

/// Minimal metrics-CSV reader for aggregation.
fn read_metrics_summary(path: &Path) -> Result<(usize, u64, f64), String> {
    let text =
        fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "tick,j_cme,threshold,detected,se_error,cum_se_error" {
        return Err(format!("{} has an unexpected header", path.display()));
    }
    let mut rows = 0usize;
    let mut detections = 0u64;
    let mut cum = 0.0f64;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(format!("{} line {}: malformed row", path.display(), i + 2));
        }
        rows += 1;
        if fields[3] == "1" {
            detections += 1;
        }
        cum = fields[5]
            .parse()
            .map_err(|_| format!("{} line {}: bad cum_se_error", path.display(), i + 2))?;
    }
    Ok((rows, detections, cum))
}

fn cmd_report(args: &ReportArgs) -> u8 {
    let dir = &args.output_dir;
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", dir.display());
            return EXIT_CONFIG;
        }
    };
    let mut metric_files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("metrics_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    metric_files.sort();
    if metric_files.is_empty() {
        eprintln!("error: no metrics_*.csv under {}", dir.display());
        return EXIT_CONFIG;
    }

    println!(
        "{:<42} {:>8} {:>10} {:>14}",
        "scenario", "instants", "detections", "cum_se_error"
    );
    for path in &metric_files {
        match read_metrics_summary(path) {
            Ok((rows, detections, cum)) => {
                let label = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default()
                    .trim_start_matches("metrics_")
                    .to_string();
                println!("{label:<42} {rows:>8} {detections:>10} {cum:>14.6e}");
            }
            Err(e) => {
                eprintln!("error: {e}");
                return EXIT_FAIL;
            }
        }
    }

    let summary = dir.join("fpr_summary.csv");
    if summary.is_file() {
        match fs::read_to_string(&summary) {
            Ok(text) => {
                println!("\nfalse-positive rates (from fpr_summary.csv):");
                // Pivot: rows = scada period, columns = grl/mode.
                let mut cells: Vec<(String, String, String, String)> = Vec::new();
                for line in text.lines().skip(1) {
                    let f: Vec<&str> = line.split(',').collect();
                    if f.len() == 8 {
                        cells.push((
                            f[1].to_string(),
                            f[2].to_string(),
                            f[3].to_string(),
                            f[5].to_string(),
                        ));
                    }
                }
                let mut periods: Vec<String> = cells.iter().map(|c| c.2.clone()).collect();
                periods.sort_by(|a, b| {
                    a.parse::<f64>()
                        .unwrap_or(0.0)
                        .total_cmp(&b.parse::<f64>().unwrap_or(0.0))
                });
                periods.dedup();
                let mut columns: Vec<(String, String)> =
                    cells.iter().map(|c| (c.0.clone(), c.1.clone())).collect();
                columns.sort();
                columns.dedup();
                print!("{:<10}", "period_s");
                for (grl, mode) in &columns {
                    print!(" {:>24}", format!("{grl}/{mode}"));
                }
                println!();
                for p in &periods {
                    print!("{p:<10}");
                    for (grl, mode) in &columns {
                        let vals: Vec<f64> = cells
                            .iter()
                            .filter(|c| &c.0 == grl && &c.1 == mode && &c.2 == p)
                            .filter_map(|c| c.3.parse().ok())
                            .collect();
                        let text = if vals.is_empty() {
                            "-".to_string()
                        } else {
                            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                            format!("{:.2}%", 100.0 * mean)
                        };
                        print!(" {text:>24}");
                    }
                    println!();
                }
            }
            Err(e) => {
                eprintln!("error: cannot read {}: {e}", summary.display());
                return EXIT_FAIL;
            }
        }
    }
    0
}
