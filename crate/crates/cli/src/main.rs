//! `nestcrt`: design calculations, ICC checks, sensitivity grids,
//! simulation grids and the HTTP service from the command line.
//!
//! Exit codes: 0 success, 1 usage or invalid input, 2 the inputs admit no
//! answer (invalid correlation, unreachable power, ...), 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use nestcrt::design::{AllocationRule, GridAxis, GridParam};
use nestcrt::harness::{presets, run_grid, ScenarioFile};
use nestcrt::{Link, VarianceFamily};
use nestcrt_service::api::{DesignInput, GridRequest, ValidateRequest};
use nestcrt_service::error::ApiError;
use nestcrt_service::ServiceConfig;

const USAGE: u8 = 1;
const DOMAIN: u8 = 2;
const RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "nestcrt", version, about = "Power and sample size for nested cluster randomized trials")]
struct Cli {
    /// TOML file with defaults (`precision`, `threads`, `[service]`).
    #[arg(long, global = true, env = "NESTCRT_CONFIG")]
    config: Option<PathBuf>,
    /// Print JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Decimal places in text output.
    #[arg(long, global = true)]
    precision: Option<usize>,
    /// Worker threads for grids and simulations; 0 uses all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Power at a given number of clusters.
    Power(DesignArgs),
    /// Smallest admissible number of clusters reaching the target power.
    #[command(name = "n", alias = "sample-size")]
    SampleSize(DesignArgs),
    /// Design effect, eigenvalues and optionally clusters from an unclustered size.
    DesignEffect {
        #[command(flatten)]
        design: DesignArgs,
        /// Unclustered sample size to inflate.
        #[arg(long)]
        individual: Option<u64>,
    },
    /// Variance-minimizing control-arm proportion.
    Allocate(DesignArgs),
    /// Check that an ICC triple gives a positive definite correlation matrix.
    ValidateIcc {
        #[arg(long, value_parser = parse_icc)]
        icc: [f64; 3],
        #[arg(long, value_parser = parse_dims)]
        dims: [usize; 3],
    },
    /// Power over a two-parameter grid, as long-format CSV.
    Grid {
        #[command(flatten)]
        design: DesignArgs,
        /// `param:lo:hi:steps`, e.g. `alpha0:0:0.1:11`.
        #[arg(long, value_parser = parse_axis)]
        axis1: GridAxis,
        #[arg(long, value_parser = parse_axis)]
        axis2: GridAxis,
    },
    /// Run a simulation grid from a scenario file or a preset.
    Simulate {
        /// TOML scenario file.
        file: Option<PathBuf>,
        /// `balanced` or `unbalanced:<cv>`.
        #[arg(long, conflicts_with = "file")]
        preset: Option<String>,
        #[arg(long)]
        master_seed: Option<u64>,
        /// Override every scenario's replication count.
        #[arg(long)]
        replications: Option<usize>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the HTTP service.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        max_replications: Option<usize>,
        #[arg(long)]
        cors_origin: Option<String>,
    },
}

#[derive(Args, Clone, Default)]
struct DesignArgs {
    #[arg(long, value_parser = parse_family)]
    family: Option<VarianceFamily>,
    #[arg(long, value_parser = parse_link)]
    link: Option<Link>,
    #[arg(long)]
    p0: Option<f64>,
    #[arg(long)]
    p1: Option<f64>,
    #[arg(long)]
    mu_c: Option<f64>,
    #[arg(long)]
    mu_t: Option<f64>,
    #[arg(long)]
    phi: Option<f64>,
    #[arg(long)]
    kappa_c: Option<f64>,
    #[arg(long)]
    kappa_t: Option<f64>,
    /// `alpha0,alpha1,alpha2` or one of A1..A4.
    #[arg(long, value_parser = parse_icc)]
    icc: Option<[f64; 3]>,
    /// `M,K,L`.
    #[arg(long, value_parser = parse_dims)]
    dims: Option<[usize; 3]>,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    pi_c: Option<f64>,
    /// 1 patient, 2 provider, 3 facility, 4 cluster.
    #[arg(long)]
    rand_level: Option<u8>,
    #[arg(long)]
    alpha_level: Option<f64>,
    #[arg(long)]
    target_power: Option<f64>,
    /// Allow any cluster count instead of requiring integral arms.
    #[arg(long)]
    relaxed: bool,
    #[arg(long)]
    max_clusters: Option<u64>,
}

impl DesignArgs {
    fn input(&self) -> DesignInput {
        DesignInput {
            family: self.family,
            link: self.link,
            p0: self.p0,
            p1: self.p1,
            mu_c: self.mu_c,
            mu_t: self.mu_t,
            phi: self.phi,
            kappa_c: self.kappa_c,
            kappa_t: self.kappa_t,
            icc: self.icc,
            dims: self.dims,
            pi_c: self.pi_c,
            rand_level: self.rand_level,
            alpha_level: self.alpha_level,
            target_power: self.target_power,
            n: self.n,
            allocation: self.relaxed.then_some(AllocationRule::Relaxed),
            max_clusters: self.max_clusters,
            individual: None,
        }
    }
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b, c] = parts.as_slice() else {
        return Err(format!("expected three comma-separated values, got `{s}`"));
    };
    let p = |x: &str| x.parse::<T>().map_err(|_| format!("cannot parse `{x}`"));
    Ok([p(a)?, p(b)?, p(c)?])
}

fn parse_icc(s: &str) -> Result<[f64; 3], String> {
    nestcrt::harness::icc_set(s).map_or_else(|| parse_triple(s), Ok)
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    parse_triple(s)
}

fn parse_family(s: &str) -> Result<VarianceFamily, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|e| e.to_string())
}

fn parse_link(s: &str) -> Result<Link, String> {
    serde_json::from_value(serde_json::Value::String(s.to_ascii_lowercase())).map_err(|e| e.to_string())
}

fn parse_axis(s: &str) -> Result<GridAxis, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let [param, lo, hi, steps] = parts.as_slice() else {
        return Err(format!("expected `param:lo:hi:steps`, got `{s}`"));
    };
    let param: GridParam = param.parse().map_err(|e: nestcrt::Error| e.to_string())?;
    let num = |x: &str| x.parse::<f64>().map_err(|_| format!("cannot parse `{x}`"));
    let steps = steps.parse().map_err(|_| format!("cannot parse `{steps}`"))?;
    Ok(GridAxis::new(param, num(lo)?, num(hi)?, steps))
}

#[derive(Debug, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    precision: Option<usize>,
    threads: Option<usize>,
    service: ServiceConfig,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        let code = match &e {
            ApiError::Validation(_) | ApiError::UnsupportedMediaType => USAGE,
            ApiError::Domain { .. } => DOMAIN,
            ApiError::NotFound(_) | ApiError::Busy | ApiError::Internal(_) => RUNTIME,
        };
        let message = match e {
            ApiError::Validation(fields) => fields
                .iter()
                .map(|f| format!("--{}: {}", f.field.replace('_', "-"), f.message))
                .collect::<Vec<_>>()
                .join("\n"),
            ApiError::Domain { message, .. } => message,
            ApiError::NotFound(m) | ApiError::Internal(m) => m,
            ApiError::UnsupportedMediaType => "unsupported input".into(),
            ApiError::Busy => "busy".into(),
        };
        Failure { code, message }
    }
}

impl From<nestcrt::Error> for Failure {
    fn from(e: nestcrt::Error) -> Self {
        ApiError::from(e).into()
    }
}

fn runtime(message: impl std::fmt::Display) -> Failure {
    Failure {
        code: RUNTIME,
        message: message.to_string(),
    }
}

struct Ctx {
    json: bool,
    precision: usize,
    threads: usize,
}

impl Ctx {
    fn num(&self, x: f64) -> String {
        format!("{x:.*}", self.precision)
    }

    fn emit<T: Serialize>(&self, value: &T, text: impl FnOnce() -> String) -> Result<(), Failure> {
        if self.json {
            println!("{}", serde_json::to_string_pretty(value).map_err(runtime)?);
        } else {
            print!("{}", text());
        }
        Ok(())
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<FileConfig, Failure> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure {
        code: USAGE,
        message: format!("{}: {e}", path.display()),
    })
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    let config = load_config(cli.config.as_ref())?;
    let ctx = Ctx {
        json: cli.json,
        precision: cli.precision.or(config.precision).unwrap_or(4),
        threads: cli.threads.or(config.threads).unwrap_or(0),
    };
    match cli.command {
        Command::Power(d) => {
            let r = d.input().power()?;
            ctx.emit(&r, || {
                format!(
                    "power          {}\nclusters       {}\neffect size    {}\nvariance       {}\ndesign effect  {}\n",
                    ctx.num(r.power),
                    r.n_clusters,
                    ctx.num(r.effect_size),
                    ctx.num(r.sigma2),
                    ctx.num(r.design_effect)
                )
            })?;
        }
        Command::SampleSize(d) => {
            let r = d.input().sample_size()?;
            ctx.emit(&r, || {
                format!(
                    "clusters       {}\npower          {}\nreal-valued N  {}\nstep           {}\n",
                    r.n_clusters,
                    ctx.num(r.power),
                    ctx.num(r.n_real),
                    r.step
                )
            })?;
        }
        Command::DesignEffect { design, individual } => {
            let input = DesignInput {
                individual,
                ..design.input()
            };
            let r = input.design_effect()?;
            ctx.emit(&r, || {
                let mut s = format!("design effect  {}\n", ctx.num(r.design_effect));
                for i in 0..4 {
                    s += &format!(
                        "lambda{}        {} (x{})\n",
                        i + 1,
                        ctx.num(r.spectrum.lambda[i]),
                        r.spectrum.multiplicity[i]
                    );
                }
                if let Some(route) = &r.route {
                    s += &format!(
                        "observations   {} -> {}\nclusters       {}\n",
                        route.individual_observations, route.clustered_observations, route.n_clusters
                    );
                }
                s
            })?;
        }
        Command::Allocate(d) => {
            let r = d.input().allocation()?;
            ctx.emit(&r, || {
                format!(
                    "pi_c           {}\nrho_c          {}\nrho_t          {}\n",
                    ctx.num(r.pi_c),
                    ctx.num(r.rho_c),
                    ctx.num(r.rho_t)
                )
            })?;
        }
        Command::ValidateIcc { icc, dims } => {
            let r = ValidateRequest { icc, dims }.evaluate()?;
            ctx.emit(&r, || {
                let mut s = format!("valid          {}\n", if r.valid { "yes" } else { "no" });
                for i in 0..4 {
                    s += &format!(
                        "lambda{}        {} (x{})\n",
                        i + 1,
                        ctx.num(r.spectrum.lambda[i]),
                        r.spectrum.multiplicity[i]
                    );
                }
                if !r.valid {
                    s += &format!("violated       {}\n", r.violated.join(", "));
                }
                s
            })?;
            if !r.valid {
                return Ok(ExitCode::from(DOMAIN));
            }
        }
        Command::Grid { design, axis1, axis2 } => {
            let req = GridRequest {
                spec: design.input(),
                axis1,
                axis2,
            };
            let r = pool(ctx.threads)?.install(|| req.evaluate())?;
            ctx.emit(&r, || {
                let g = &r.grid;
                let mut s = format!("{},{},power,reason\n", g.axis1.param.name(), g.axis2.param.name());
                for (i, x) in g.axis1.values.iter().enumerate() {
                    for (j, y) in g.axis2.values.iter().enumerate() {
                        let p = g.power[i][j].map(|p| ctx.num(p)).unwrap_or_default();
                        let reason = g.mask_reason[i][j].as_deref().unwrap_or("").replace(',', ";");
                        s += &format!("{},{},{p},{reason}\n", tidy(*x), tidy(*y));
                    }
                }
                s
            })?;
        }
        Command::Simulate {
            file,
            preset,
            master_seed,
            replications,
            out,
        } => {
            let (mut scenarios, file_seed) = match (file, preset) {
                (Some(path), _) => {
                    let text =
                        std::fs::read_to_string(&path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
                    let f = ScenarioFile::parse(&text)?;
                    (f.scenarios()?, f.master_seed)
                }
                (None, Some(p)) => (
                    presets::by_name(&p).ok_or_else(|| Failure {
                        code: USAGE,
                        message: format!("unknown preset `{p}`"),
                    })?,
                    0,
                ),
                (None, None) => {
                    return Err(Failure {
                        code: USAGE,
                        message: "give a scenario file or --preset".into(),
                    })
                }
            };
            if let Some(r) = replications {
                scenarios.iter_mut().for_each(|s| s.replications = r);
            }
            for s in &scenarios {
                s.validate().map_err(|e| Failure {
                    message: format!("scenario `{}`: {}", s.name, Failure::from(e).message),
                    code: USAGE,
                })?;
            }
            let report = run_grid(&scenarios, master_seed.unwrap_or(file_seed), ctx.threads)?;
            let text = if ctx.json { report.to_json()? + "\n" } else { report.to_csv()? };
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| runtime(format!("{}: {e}", path.display())))?,
                None => print!("{text}"),
            }
            let failed = report.entries.iter().filter(|e| e.error.is_some()).count();
            if failed > 0 {
                eprintln!("{failed} of {} scenarios failed", report.entries.len());
                return Ok(ExitCode::from(DOMAIN));
            }
        }
        Command::Serve {
            host,
            port,
            workers,
            max_replications,
            cors_origin,
        } => {
            let mut cfg = config.service;
            cfg.host = host.unwrap_or(cfg.host);
            cfg.port = port.unwrap_or(cfg.port);
            cfg.workers = workers.unwrap_or(cfg.workers);
            cfg.max_replications = max_replications.unwrap_or(cfg.max_replications);
            cfg.cors_origin = cors_origin.or(cfg.cors_origin);
            if cfg.threads_per_job == 0 {
                cfg.threads_per_job = ctx.threads;
            }
            let rt = tokio::runtime::Builder::new_multi_thread()
                .enable_all()
                .build()
                .map_err(runtime)?;
            rt.block_on(nestcrt_service::serve(cfg, |addr| eprintln!("listening on http://{addr}")))
                .map_err(runtime)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Axis values without floating-point noise such as `0.07000000000000001`.
fn tidy(x: f64) -> f64 {
    (x * 1e12).round() / 1e12
}

/// `threads = 0` uses the global pool.
fn pool(threads: usize) -> Result<rayon::ThreadPool, Failure> {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(runtime)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
