use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde_json::json;

use sparsim::front::{
    curve_csv, fixtures, infer, load_network, parse_network, report_csv, save_checkpoint, simulate,
    sparsity, sparsity_csv, train, verify, DensitySetting, FrontError, NetworkDescription, RunConfig,
};
use sparsim::nn::Mode;

#[derive(Parser)]
#[command(name = "sparsim", version, about = "Sparse fixed-point CNN accelerator simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cycle, energy and bottleneck report for one or more networks and configs
    Simulate(Common),
    /// Train on the synthetic task; writes a loss curve and a checkpoint
    Train(Common),
    /// Accuracy on the held-out synthetic samples
    Infer(Common),
    /// Per-layer measured densities over one inference batch
    Sparsity(Common),
    /// Run the built-in oracle suites
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Train,
    Infer,
}

#[derive(Args)]
struct Common {
    /// Network file, or `builtin:NAME` for a shipped fixture (lenet,
    /// mobilenet_bottleneck, vgg_fc). Repeat to sweep with `simulate`.
    #[arg(long, required = true)]
    network: Vec<String>,
    /// Run configuration file. Repeat to sweep with `simulate`.
    #[arg(long)]
    config: Vec<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Overrides the network's seed (default 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Assumed density in [0, 1] or `measured`; overrides the config
    #[arg(long)]
    density: Option<String>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Parallel simulations for sweeps
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn network_arg(arg: &str) -> Result<NetworkDescription, FrontError> {
    match arg.strip_prefix("builtin:") {
        Some(name) => {
            let text = fixtures::by_name(name).ok_or_else(|| FrontError::Missing {
                path: arg.into(),
                message: "no such built-in network".into(),
            })?;
            parse_network(text)
        }
        None => load_network(Path::new(arg)),
    }
}

fn config_arg(path: Option<&PathBuf>, c: &Common) -> Result<RunConfig, FrontError> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => FrontError::Missing { path: p.clone(), message: "not found".into() },
                _ => FrontError::Io { path: p.clone(), source: e },
            })?;
            RunConfig::parse(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(m) = c.mode {
        cfg.mode = match m {
            ModeArg::Train => Mode::Training,
            ModeArg::Infer => Mode::Inference,
        };
    }
    if let Some(d) = &c.density {
        cfg.density = match d.as_str() {
            "measured" => DensitySetting::Measured,
            v => DensitySetting::Assumed(
                v.parse().map_err(|_| FrontError::Config(format!("density `{v}` is not a number or `measured`")))?,
            ),
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seed_for(c: &Common, desc: &NetworkDescription) -> u64 {
    c.seed.or(desc.seed).unwrap_or(0)
}

fn write_file(dir: &Path, name: &str, text: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn pretty(v: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn single(c: &Common, what: &str) -> Result<(), FrontError> {
    if c.network.len() > 1 || c.config.len() > 1 {
        return Err(FrontError::Config(format!("`{what}` takes one --network and at most one --config")));
    }
    Ok(())
}

fn run_simulate(c: &Common) -> anyhow::Result<()> {
    let format = c.format.unwrap_or(Format::Json);
    let descs = c.network.iter().map(|n| network_arg(n)).collect::<Result<Vec<_>, _>>()?;
    let cfg_paths: Vec<Option<&PathBuf>> =
        if c.config.is_empty() { vec![None] } else { c.config.iter().map(Some).collect() };
    let cfgs = cfg_paths.iter().map(|p| config_arg(*p, c)).collect::<Result<Vec<_>, _>>()?;
    let mut pairs = Vec::new();
    for (di, d) in descs.iter().enumerate() {
        for (ci, cfg) in cfgs.iter().enumerate() {
            pairs.push((di, d, ci, cfg));
        }
    }
    let sweep = pairs.len() > 1;
    if sweep && format == Format::Csv && c.out.is_none() {
        return Err(FrontError::Config("csv sweeps need --out".into()).into());
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(c.jobs.max(1)).build()?;
    let reports = pool.install(|| {
        pairs.par_iter().map(|(_, d, _, cfg)| simulate(d, cfg, seed_for(c, d))).collect::<Vec<_>>()
    });
    let reports = reports.into_iter().collect::<Result<Vec<_>, _>>()?;
    let render = |r: &sparsim::perf::SimReport| -> anyhow::Result<String> {
        Ok(match format {
            Format::Json => pretty(r),
            Format::Csv => report_csv(r)?,
        })
    };
    let ext = if format == Format::Json { "json" } else { "csv" };
    match (&c.out, sweep) {
        (None, false) => print!("{}", render(&reports[0])?),
        (None, true) => print!("{}", pretty(&reports)),
        (Some(dir), _) => {
            let mut files = Vec::new();
            for ((di, d, ci, _), r) in pairs.iter().zip(&reports) {
                let name = if sweep {
                    let stem = cfg_paths[*ci]
                        .and_then(|p| p.file_stem())
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "default".into());
                    format!("report-{di}-{}-{ci}-{stem}.{ext}", d.name)
                } else {
                    format!("report.{ext}")
                };
                files.push(write_file(dir, &name, &render(r)?)?.display().to_string());
            }
            let totals: Vec<_> = reports
                .iter()
                .zip(&files)
                .map(|(r, f)| json!({"file": f, "network": r.network, "total_cycles": r.total_cycles, "energy_fj": r.energy.total_fj}))
                .collect();
            print!("{}", pretty(&totals));
        }
    }
    Ok(())
}

fn run_train(c: &Common) -> anyhow::Result<()> {
    single(c, "train")?;
    let desc = network_arg(&c.network[0])?;
    let mut cfg = config_arg(c.config.first(), c)?;
    cfg.mode = Mode::Training;
    let seed = seed_for(c, &desc);
    let out = train(&desc, &cfg, seed)?;
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    write_file(&dir, "loss_curve.csv", &curve_csv(&out.curve)?)?;
    write_file(&dir, "train_summary.json", &pretty(&out.summary))?;
    save_checkpoint(&dir.join("checkpoint"), &desc.network(), &out.state)?;
    match c.format.unwrap_or(Format::Json) {
        Format::Json => print!("{}", pretty(&out.summary)),
        Format::Csv => print!("{}", curve_csv(&out.curve)?),
    }
    Ok(())
}

fn run_infer(c: &Common) -> anyhow::Result<()> {
    single(c, "infer")?;
    let desc = network_arg(&c.network[0])?;
    let cfg = config_arg(c.config.first(), c)?;
    let s = infer(&desc, &cfg, seed_for(c, &desc))?;
    let text = match c.format.unwrap_or(Format::Json) {
        Format::Json => pretty(&s),
        Format::Csv => format!("network,samples,accuracy,mean_loss\n{},{},{},{}\n", s.network, s.samples, s.accuracy, s.mean_loss),
    };
    if let Some(dir) = &c.out {
        write_file(dir, if text.starts_with('{') { "infer.json" } else { "infer.csv" }, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn run_sparsity(c: &Common) -> anyhow::Result<()> {
    single(c, "sparsity")?;
    let desc = network_arg(&c.network[0])?;
    let cfg = config_arg(c.config.first(), c)?;
    let rows = sparsity(&desc, &cfg, seed_for(c, &desc))?;
    let (name, text) = match c.format.unwrap_or(Format::Csv) {
        Format::Csv => ("sparsity.csv", sparsity_csv(&rows)?),
        Format::Json => ("sparsity.json", pretty(&rows)),
    };
    if let Some(dir) = &c.out {
        write_file(dir, name, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn run_verify(v: &VerifyArgs) -> anyhow::Result<()> {
    let suites = verify::run_all(v.seed);
    let text = pretty(&suites);
    if let Some(dir) = &v.out {
        write_file(dir, "verify.json", &text)?;
    }
    print!("{text}");
    let failed: Vec<&str> = suites.iter().filter(|s| !s.passed()).map(|s| s.name.as_str()).collect();
    if !failed.is_empty() {
        return Err(FrontError::Runtime(format!("failed suites: {}", failed.join(", "))).into());
    }
    Ok(())
}

fn error_object(e: &anyhow::Error) -> (i32, serde_json::Value) {
    match e.downcast_ref::<FrontError>() {
        Some(f) => (f.exit_code(), f.to_json()),
        None => {
            let v = json!({"error": {"kind": "runtime", "message": format!("{e:#}"), "exit_code": 3}});
            (3, v)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            eprintln!("{}", json!({"error": {"kind": "usage", "message": msg.trim(), "exit_code": 2}}));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Simulate(c) => run_simulate(c),
        Command::Train(c) => run_train(c),
        Command::Infer(c) => run_infer(c),
        Command::Sparsity(c) => run_sparsity(c),
        Command::Verify(v) => run_verify(v),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, obj) = error_object(&e);
            eprintln!("{obj}");
            ExitCode::from(code as u8)
        }
    }
}
