use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eta_core::covariance::{CovarianceSpec, PriorSpec};
use eta_core::estimators::BayesPosterior;
use eta_core::harness::{self, SweepConfig, ORACLE_CASES};
use eta_core::network::{AdjacencyRule, RoadNetwork};
use eta_core::risk::mc_risk;
use eta_core::trips::{sample_routes, OdLaw};
use eta_core::{fixtures, EtaError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "etalab", version, about = "Travel-time estimators on grid road networks")]
struct Cli {
    /// How segments are joined in the segment graph behind diffusion kernels.
    #[arg(long, global = true, default_value = "continue_or_branch", value_parser = parse_rule)]
    rule: AdjacencyRule,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Recompute the worked examples and compare with their printed values.
    Examples {
        #[arg(long)]
        json: bool,
    },
    /// Average exact risks over grid sizes and sample sizes.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        grid_sizes: Option<Vec<u32>>,
        #[arg(long, value_delimiter = ',')]
        exponents: Option<Vec<f64>>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Monte Carlo check of closed-form risks on a worked example.
    Oracle {
        #[arg(long, default_value = "diffusion-3x3")]
        fixture: String,
        #[arg(long, default_value_t = 100_000)]
        replicates: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Assumption diagnostics for a covariance descriptor such as
    /// `diffusion:p=10,u=1,v=1,white=1` or `gram:law=unif01,seed=7`.
    Diag {
        #[arg(long)]
        covariance: String,
        /// Grid size when the descriptor has none.
        #[arg(long, default_value_t = 10)]
        p: u32,
        #[arg(long, default_value_t = 100)]
        routes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Coefficients of the optimal estimator on the worked example, as JSON.
    Explain,
}

fn parse_rule(s: &str) -> Result<AdjacencyRule, String> {
    AdjacencyRule::ALL
        .into_iter()
        .find(|r| r.to_string() == s)
        .ok_or_else(|| format!("unknown rule {s:?}; one of {:?}", AdjacencyRule::ALL.map(|r| r.to_string())))
}

enum Failure {
    Golden,
    Config(String),
    Other(String),
}

impl From<EtaError> for Failure {
    fn from(e: EtaError) -> Self {
        match e {
            EtaError::Config(msg) => Failure::Config(msg),
            other => Failure::Other(other.to_string()),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Examples { json } => {
            let table = harness::run_examples(cli.rule)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&table).map_err(EtaError::from)?);
            } else {
                print!("{}", table.render());
            }
            if !table.all_pass() {
                return Err(Failure::Golden);
            }
        }
        Command::Sweep { config, grid_sizes, exponents, seed, out, threads } => {
            let mut cfg = SweepConfig::load(&config)?;
            if let Some(g) = grid_sizes {
                cfg.grid_sizes = g;
            }
            if let Some(k) = exponents {
                cfg.n_exponents = k;
            }
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            cfg.validate()?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.unwrap_or(0))
                .build()
                .map_err(|e| Failure::Config(e.to_string()))?;
            let rows = pool.install(|| harness::run_and_emit(&cfg, &out))?;
            eprintln!("{} rows written to {}", rows.len(), out.join("sweep.csv").display());
        }
        Command::Oracle { fixture, replicates, seed } => {
            if !ORACLE_CASES.contains(&fixture.as_str()) {
                return Err(Failure::Config(format!("unknown fixture {fixture:?}; one of {ORACLE_CASES:?}")));
            }
            let case = harness::oracle_case(&fixture, cli.rule)?;
            let forms: Vec<_> = case.estimators.iter().map(|e| e.2.clone()).collect();
            let mc = mc_risk(&case.history, &case.y, &forms, &case.cov, &case.prior, replicates, seed)?;
            println!("{:<20} {:>10} {:>10} {:>9} {:>7}", "estimator", "closed", "mc", "s.e.", "z");
            for ((name, closed, _), est) in case.estimators.iter().zip(&mc) {
                let z = (est.mean - closed) / est.std_error;
                println!("{name:<20} {closed:>10.5} {:>10.5} {:>9.5} {z:>7.2}", est.mean, est.std_error);
            }
        }
        Command::Diag { covariance, p, routes, seed } => {
            let (spec, given_p) = CovarianceSpec::parse_descriptor(&covariance)?;
            let net = RoadNetwork::build_grid(given_p.unwrap_or(p))?;
            let cov = spec.build(&net, cli.rule)?;
            let law = OdLaw::new(1.0, net.p())?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sampled = sample_routes(&law, &net, routes, &mut rng)?;
            let sets: Vec<Vec<usize>> = sampled.iter().map(|r| r.segments().to_vec()).collect();
            println!("{}", serde_json::to_string_pretty(&cov.diagnostics(&sets)).map_err(EtaError::from)?);
        }
        Command::Explain => {
            let (net, history, y) = fixtures::example_history();
            let cov = fixtures::example_diffusion(&net, cli.rule);
            let prior = PriorSpec::new(1.0, 0.2)?;
            let post = BayesPosterior::new(&history, &cov, &prior)?;
            println!("{}", serde_json::to_string_pretty(&post.explain(&y, &net)?).map_err(EtaError::from)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Golden) => ExitCode::from(1),
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
