use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use ehsched::departure::{uniform_grid, write_curve_csv, DepartureCurve, DEFAULT_TIME_TOL};
use ehsched::harness::{
    init_thread_pool, run_sweep, write_detail_csv, write_report_csv, Preset, TableSource,
};
use ehsched::heuristics::PolicySpec;
use ehsched::offline::{verify_kkt, waterfill_with_rate};
use ehsched::online_dp::{build_value_function, DpConfigFile, ValueTable};
use ehsched::timeline::FEASIBILITY_TOL;
use ehsched::{EventTimeline, RateModel};

#[derive(Parser)]
#[command(
    name = "ehsched",
    version,
    about = "Transmission scheduling for energy harvesting links"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Offline optimal powers for a scenario.
    Waterfill {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "theory")]
        rate: RateModel,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the maximum departure curve on a grid `start:end:step`.
    Departure {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        grid: String,
        #[arg(long, default_value = "theory")]
        rate: RateModel,
        #[arg(long)]
        out: PathBuf,
    },
    /// Earliest time by which a number of bits can be delivered.
    Mintime {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        bits: f64,
        #[arg(long, default_value = "theory")]
        rate: RateModel,
        #[arg(long, default_value_t = DEFAULT_TIME_TOL)]
        tol: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the optimal online policy table.
    DpBuild {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Look up the optimal online power.
    DpQuery {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        e: f64,
        #[arg(long)]
        h: f64,
        #[arg(long)]
        t: f64,
    },
    /// Monte Carlo comparison of policies over a preset sweep.
    Experiment {
        #[arg(long)]
        preset: String,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "dp,constant_water,energy_adaptive,time_energy_adaptive"
        )]
        policies: Vec<PolicySpec>,
        /// Use this table at every sweep point instead of building one per point.
        #[arg(long)]
        dp_table: Option<PathBuf>,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        realizations: Option<usize>,
        /// Sweep values replacing the preset's.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<f64>>,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long, default_value_t = ehsched::online_dp::DEFAULT_ENERGY_GRID)]
        energy_grid: usize,
        #[arg(long, default_value_t = ehsched::online_dp::DEFAULT_FADE_POINTS)]
        fade_points: usize,
        /// Also write per-realization throughputs here.
        #[arg(long)]
        detail: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn load_timeline(path: &Path) -> Result<EventTimeline> {
    EventTimeline::from_json_file(path)
        .with_context(|| format!("reading scenario {}", path.display()))
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<f64> = spec
        .split(':')
        .map(|s| s.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("grid {spec:?} is not start:end:step"))?;
    let [start, end, step] = parts[..] else {
        bail!("grid {spec:?} is not start:end:step");
    };
    if !(start >= 0.0 && end >= start && step > 0.0) {
        bail!("grid {spec:?} needs 0 <= start <= end and step > 0");
    }
    Ok(uniform_grid(start, end, step))
}

fn waterfill_cmd(scenario: &Path, rate: RateModel, out: &Path) -> Result<()> {
    let timeline = load_timeline(scenario)?;
    let solution = waterfill_with_rate(&timeline, &rate)?;
    let certificate = verify_kkt(&timeline, &solution.schedule, FEASIBILITY_TOL)?;
    let epochs: Vec<_> = timeline
        .epochs()
        .iter()
        .zip(solution.schedule.powers())
        .zip(&solution.water_levels)
        .map(|((e, p), nu)| {
            json!({
                "start_s": e.start,
                "length_s": e.length,
                "h": e.fade,
                "injected_j": e.injected,
                "power_w": p,
                "water_level": nu,
            })
        })
        .collect();
    let taps: Vec<_> = solution
        .tap_transfers
        .iter()
        .map(|t| json!({"t_s": t.time, "amount_j": t.amount, "cap_j": t.cap}))
        .collect();
    write_json(
        out,
        &json!({
            "rate": rate.to_string(),
            "objective_bits": solution.objective_bits,
            "epochs": epochs,
            "tap_transfers": taps,
            "certificate": {
                "feasible": certificate.feasible,
                "terminal_tight": certificate.terminal_tight,
                "optimal": certificate.optimal,
                "segments": certificate.segments.len(),
                "violations": certificate.violations,
            },
        }),
    )
}

fn experiment_cmd(
    preset: &str,
    policies: &[PolicySpec],
    dp_table: Option<&Path>,
    seed: u64,
    realizations: Option<usize>,
    sweep: Option<Vec<f64>>,
    delta: Option<f64>,
    tables: TableSource,
    detail: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let mut preset = Preset::by_name(preset)?;
    preset.base.seed = seed;
    if let Some(n) = realizations {
        preset.base.n_realizations = n;
    }
    if let Some(values) = sweep {
        preset.sweep_values = values;
    }
    let tables = match dp_table {
        Some(path) => {
            let table =
                ValueTable::load(path).with_context(|| format!("loading {}", path.display()))?;
            preset.base.delta = delta.unwrap_or(table.delta());
            TableSource::Fixed(Arc::new(table))
        }
        None => {
            if let Some(d) = delta {
                preset.base.delta = d;
            }
            tables
        }
    };
    let rows = run_sweep(&preset, policies, &tables)?;
    let mut csv = create(out)?;
    write_report_csv(&mut csv, preset.sweep_var, &rows)?;
    csv.flush()?;
    if let Some(path) = detail {
        let mut file = create(path)?;
        write_detail_csv(&mut file, preset.sweep_var, &rows)?;
        file.flush()?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    init_thread_pool()?;
    match cli.command {
        Command::Waterfill {
            scenario,
            rate,
            out,
        } => waterfill_cmd(&scenario, rate, &out),
        Command::Departure {
            scenario,
            grid,
            rate,
            out,
        } => {
            let curve = DepartureCurve::new(load_timeline(&scenario)?, rate);
            let samples = curve.sample_curve(&parse_grid(&grid)?)?;
            let mut file = create(&out)?;
            write_curve_csv(&mut file, &samples)?;
            file.flush()?;
            Ok(())
        }
        Command::Mintime {
            scenario,
            bits,
            rate,
            tol,
            out,
        } => {
            let curve = DepartureCurve::new(load_timeline(&scenario)?, rate);
            let result = curve.min_completion_time(bits, tol)?;
            write_json(
                &out,
                &json!({
                    "bits_target": result.bits_target,
                    "t_star_s": result.t_star,
                    "bits_delivered": result.bits_delivered,
                    "bracket_s": [result.bracket.0, result.bracket.1],
                    "powers_w": result.schedule.powers(),
                }),
            )
        }
        Command::DpBuild { config, out } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let file: DpConfigFile = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", config.display()))?;
            let table = build_value_function(&file.into_config()?)?;
            table.save(&out)?;
            let h = table.header();
            println!(
                "{} steps x {} fade points x {} energy points, config {}",
                h.steps,
                h.fade_points.len(),
                h.energy_grid,
                h.config_hash
            );
            Ok(())
        }
        Command::DpQuery { table, e, h, t } => {
            let table = ValueTable::load(&table)?;
            if !(e >= 0.0 && t >= 0.0) {
                bail!("energy and time must be nonnegative");
            }
            let fade_point = table.fading().points()[table.fading().nearest(h)];
            println!(
                "{}",
                json!({
                    "e_j": e,
                    "h": h,
                    "t_s": t,
                    "fade_point": fade_point,
                    "power_w": table.optimal_power(e, h, t),
                    "value_bits": table.value(e, h, t),
                })
            );
            Ok(())
        }
        Command::Experiment {
            preset,
            policies,
            dp_table,
            seed,
            realizations,
            sweep,
            delta,
            energy_grid,
            fade_points,
            detail,
            out,
        } => experiment_cmd(
            &preset,
            &policies,
            dp_table.as_deref(),
            seed,
            realizations,
            sweep,
            delta,
            TableSource::Build {
                energy_grid,
                fade_points,
            },
            detail.as_deref(),
            &out,
        ),
    }
}
