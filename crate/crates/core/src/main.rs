use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use prefgeo::error::{Error, Result};
use prefgeo::experiments::{
    fit_pattern, ingest_dataset, nonparametric_stage, run_coverage, run_expansion, run_table1, write_plot_csv,
    write_records_csv, write_timing_csv, BenchOutput, BenchSettings, Estimator,
};
use prefgeo::geometry::{PointPattern, Window};
use prefgeo::io::{read_pattern_csv, write_pattern_csv, Raster};
use prefgeo::simulation::{ScenarioConfig, ScenarioSimulator};

#[derive(Parser, Debug)]
#[command(name = "prefgeo", version, about = "Geostatistics under preferential sampling")]
struct Cli {
    /// Base seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for replicate loops.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file, or directory for `bench`. Defaults to stdout / `./out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Scenario TOML file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Observation window `xmin,xmax,ymin,ymax`.
    #[arg(long, global = true)]
    window: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one replicate and write the pattern CSV.
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
    },
    /// Fit semivariogram parameters; writes JSON fit records.
    Fit {
        input: PathBuf,
        /// Comma-separated subset of CL, MC, MLE.
        #[arg(long, default_value = "CL,MC")]
        methods: String,
        #[arg(long, default_value_t = 0.5)]
        nu: f64,
        /// Pair radius R; chosen by a pilot fit when omitted.
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Sandwich confidence intervals for the regression coefficients.
    Infer {
        input: PathBuf,
        /// JSON fit records from `fit`; the CL radius is used as lag cap.
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long, default_value_t = 0.95)]
        level: f64,
    },
    /// Kernel semivariogram and cross-covariance curves as CSV.
    Curves {
        input: PathBuf,
        #[arg(long)]
        radius: f64,
        #[arg(long)]
        bandwidth: Option<f64>,
    },
    /// Monte-Carlo studies.
    Bench {
        #[command(subcommand)]
        study: Study,
    },
    /// Convert `x,y,mark` field data (and an optional covariate raster) to a pattern CSV.
    Ingest {
        input: PathBuf,
        #[arg(long)]
        raster: Option<PathBuf>,
        /// Apply `log(DBH − 9)` to the marks.
        #[arg(long)]
        dbh: bool,
    },
}

#[derive(Subcommand, Debug)]
enum Study {
    Table1(BenchArgs),
    Expansion {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 3.0])]
        sides: Vec<f64>,
    },
    Coverage {
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 1.5, 2.0, 2.5, 3.0])]
        gammas: Vec<f64>,
    },
}

#[derive(Args, Debug, Clone)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 1)]
    scenario: u8,
    #[arg(long, default_value_t = 0.05)]
    phi: f64,
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    side: f64,
    /// Grid cells per unit length.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct BenchArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Replicates (default 100, 200 for coverage).
    #[arg(long)]
    reps: Option<usize>,
    /// Comma-separated subset of CL, MC, MLE.
    #[arg(long, default_value = "MLE,CL,MC")]
    methods: String,
    /// Smoothness of the fitted family (defaults to the simulated one).
    #[arg(long)]
    fit_nu: Option<f64>,
    #[arg(long, default_value_t = 4.0)]
    r_factor: f64,
    /// Also write per-fit wall times to `timing.csv`.
    #[arg(long)]
    timing: bool,
}

fn parse_methods(s: &str) -> Result<Vec<Estimator>> {
    s.split(',').filter(|t| !t.trim().is_empty()).map(|t| Estimator::parse(t.trim())).collect()
}

fn scenario(cli: &Cli, args: &ScenarioArgs) -> Result<ScenarioConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ScenarioConfig::from_toml_str(&fs::read_to_string(path)?)?,
        None => match args.scenario {
            1 => ScenarioConfig::scenario1(args.phi, args.nu, args.gamma, args.side),
            2 => ScenarioConfig::scenario2(args.side),
            s => return Err(Error::Config(format!("unknown scenario {s}"))),
        },
    };
    if let Some(r) = args.resolution {
        cfg.resolution = r;
    }
    if let Some(w) = &cli.window {
        cfg.window = Window::parse(w)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn window(cli: &Cli) -> Result<Option<Window>> {
    cli.window.as_deref().map(Window::parse).transpose()
}

fn read_pattern(path: &Path, window: Option<Window>) -> Result<PointPattern> {
    read_pattern_csv(File::open(path)?, window)
}

fn output(cli: &Cli) -> Result<Box<dyn Write>> {
    Ok(match &cli.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn write_json<T: serde::Serialize>(cli: &Cli, value: &T) -> Result<()> {
    let mut out = output(cli)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn bench_settings(cli: &Cli, args: &BenchArgs, default_reps: usize) -> Result<BenchSettings> {
    let mut s = BenchSettings::new(scenario(cli, &args.scenario)?, args.reps.unwrap_or(default_reps));
    s.estimators = parse_methods(&args.methods)?;
    if let Some(nu) = args.fit_nu {
        s.fit_nu = nu;
    }
    s.r_factor = args.r_factor;
    Ok(s)
}

fn write_bench(dir: &Path, outputs: &[BenchOutput], timing: bool, plot: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let records: Vec<_> = outputs.iter().flat_map(|o| o.records.iter().cloned()).collect();
    write_records_csv(&records, BufWriter::new(File::create(dir.join("records.csv"))?))?;
    let mut summary = Vec::new();
    let mut text = String::new();
    for (k, o) in outputs.iter().enumerate() {
        let mut buf = Vec::new();
        o.summary.write_csv(&mut buf)?;
        // One header for the concatenated tables.
        let body = String::from_utf8(buf).expect("csv is utf-8");
        let skip = if k == 0 { 0 } else { body.find('\n').map_or(body.len(), |i| i + 1) };
        summary.extend_from_slice(&body.as_bytes()[skip..]);
        text.push_str(&o.summary.format_table());
        text.push('\n');
    }
    fs::write(dir.join("summary.csv"), summary)?;
    fs::write(dir.join("summary.txt"), &text)?;
    if plot {
        write_plot_csv(outputs, BufWriter::new(File::create(dir.join("plot.csv"))?))?;
    }
    if timing {
        let mut f = BufWriter::new(File::create(dir.join("timing.csv"))?);
        for (k, o) in outputs.iter().enumerate() {
            let mut buf = Vec::new();
            write_timing_csv(&o.summary.label, &o.timings, &mut buf)?;
            let body = String::from_utf8(buf).expect("csv is utf-8");
            let skip = if k == 0 { 0 } else { body.find('\n').map_or(body.len(), |i| i + 1) };
            f.write_all(&body.as_bytes()[skip..])?;
        }
        f.flush()?;
    }
    print!("{text}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { scenario: args, replicate } => {
            let cfg = scenario(cli, args)?;
            let rep = ScenarioSimulator::new(&cfg)?.replicate(*replicate)?;
            let mut out = output(cli)?;
            write_pattern_csv(&rep.pattern, &mut out)?;
            out.flush()?;
        }
        Command::Fit { input, methods, nu, radius } => {
            let pattern = read_pattern(input, window(cli)?)?;
            let fits = fit_pattern(&pattern, &parse_methods(methods)?, *nu, *radius)?;
            write_json(cli, &fits)?;
        }
        Command::Infer { input, fit, radius, level } => {
            let pattern = read_pattern(input, window(cli)?)?;
            let from_fit = match fit {
                Some(path) => {
                    let recs: Vec<prefgeo::experiments::FitRecord> = serde_json::from_reader(File::open(path)?)?;
                    recs.iter().find_map(|r| r.r)
                }
                None => None,
            };
            let r = radius
                .or(from_fit)
                .ok_or_else(|| Error::Config("infer needs --radius or a --fit file with a radius".into()))?;
            let report = nonparametric_stage(&pattern, r, None)?.report(&pattern, r, *level)?;
            write_json(cli, &report)?;
        }
        Command::Curves { input, radius, bandwidth } => {
            let pattern = read_pattern(input, window(cli)?)?;
            let stage = nonparametric_stage(&pattern, *radius, *bandwidth)?;
            let mut out = output(cli)?;
            stage.write_curves_csv(&mut out)?;
            out.flush()?;
        }
        Command::Ingest { input, raster, dbh } => {
            let raster = match raster {
                Some(p) => Some(Raster::parse(&fs::read_to_string(p)?)?),
                None => None,
            };
            let rep = ingest_dataset(File::open(input)?, raster.as_ref(), window(cli)?, *dbh)?;
            eprintln!(
                "{} points kept, {} outside the window, {} outside the mark transform domain",
                rep.pattern.len(),
                rep.rejected_outside,
                rep.rejected_domain
            );
            let mut out = output(cli)?;
            write_pattern_csv(&rep.pattern, &mut out)?;
            out.flush()?;
        }
        Command::Bench { study } => {
            let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            match study {
                Study::Table1(args) => {
                    let s = bench_settings(cli, args, 100)?;
                    write_bench(&dir, &[run_table1(&s)?], args.timing, false)?;
                }
                Study::Expansion { bench, sides } => {
                    let s = bench_settings(cli, bench, 100)?;
                    write_bench(&dir, &run_expansion(&s, sides)?, bench.timing, true)?;
                }
                Study::Coverage { bench, gammas } => {
                    let mut s = bench_settings(cli, bench, 200)?;
                    s.fit_theta = false;
                    s.ci_level = Some(0.95);
                    write_bench(&dir, &run_coverage(&s, gammas)?, bench.timing, true)?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.threads {
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(Error::Config(e.to_string())),
        },
        None => run(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
