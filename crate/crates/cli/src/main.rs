use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use specnp::decomposition::DecompositionConfig;
use specnp::evaluation::match_columns;
use specnp::ibp::{NoiseFloor, Prior};
use specnp::io::{self, ModelFile, TruthManifest};
use specnp::pipelines::{fit_hdp, fit_ibp_linear_gaussian, fit_isfa, heldout_perword_nll, HdpConfig, IbpConfig, MomentSource};
use specnp::synthesis::{Dataset, GeneratorSpec};
use specnp::{DenseTensor, Error, Result, SampleSet};

#[derive(Parser, Debug)]
#[command(name = "specnp", version, about = "Spectral inference for IBP and HDP models")]
struct Cli {
    /// Worker threads for all internal parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset and its ground truth from a JSON spec.
    Gen {
        spec: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Fit a model to a sample matrix, a corpus, or a directory of moments.
    Fit(FitArgs),
    /// Score a fitted model against ground truth or held-out documents.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Model {
    IbpLg,
    IsfaGauss,
    IsfaLaplace,
    Hdp,
}

impl Model {
    fn name(self) -> &'static str {
        match self {
            Model::IbpLg => "ibp-lg",
            Model::IsfaGauss => "isfa-gauss",
            Model::IsfaLaplace => "isfa-laplace",
            Model::Hdp => "hdp",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Solver {
    Rtpm,
    Als,
    Fc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Rank {
    Auto,
    Fixed(usize),
}

impl FromStr for Rank {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s == "auto" {
            return Ok(Rank::Auto);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("K must be positive".into()),
            Ok(k) => Ok(Rank::Fixed(k)),
            Err(_) => Err(format!("expected a positive integer or `auto`, got `{s}`")),
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    data: PathBuf,
    #[arg(long, value_enum)]
    model: Model,
    #[arg(long, value_enum, default_value = "rtpm")]
    solver: Solver,
    #[arg(long, default_value = "auto")]
    k: Rank,
    #[arg(long, default_value_t = 50)]
    restarts: usize,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 30)]
    iters_final: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 10)]
    sketch_len: usize,
    #[arg(long, default_value_t = 6)]
    sketch_repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Noise variance estimate for the IBP models.
    #[arg(long, value_enum, default_value = "mean-tail")]
    noise_floor: Floor,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Floor {
    Smallest,
    MeanTail,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("against").required(true))]
struct EvalArgs {
    model: PathBuf,
    #[arg(long, group = "against")]
    truth: Option<PathBuf>,
    #[arg(long, group = "against")]
    heldout: Option<PathBuf>,
    /// Print a CSV header and one row instead of the JSON report.
    #[arg(long)]
    csv: bool,
    /// Also write the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match &cli.command {
        Command::Gen { spec, out } => cmd_gen(spec, out),
        Command::Fit(args) => cmd_fit(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input_error() { 2 } else { 3 })
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn cmd_gen(spec_path: &Path, out: &Path) -> Result<()> {
    let spec: GeneratorSpec = serde_json::from_str(&fs::read_to_string(spec_path)?)?;
    fs::create_dir_all(out)?;
    let seed = match &spec {
        GeneratorSpec::IbpLg { seed, .. }
        | GeneratorSpec::IsfaGauss { seed, .. }
        | GeneratorSpec::IsfaLaplace { seed, .. }
        | GeneratorSpec::Hdp { seed, .. } => *seed,
    };
    let model = serde_json::to_value(&spec)?["model"].as_str().unwrap_or_default().to_string();
    let truth = match spec.generate()? {
        Dataset::Samples { data, phi, pi, sigma2 } => {
            io::write_matrix(&out.join("data.txt"), &data.to_matrix())?;
            io::write_matrix(&out.join("phi.txt"), &phi)?;
            println!("wrote {} samples of dimension {} to {}", data.n(), data.d(), out.display());
            TruthManifest {
                model,
                data_file: "data.txt".into(),
                phi_file: "phi.txt".into(),
                pi: Some(pi),
                pi0: None,
                sigma2: Some(sigma2),
                heldout_file: None,
                seed,
            }
        }
        Dataset::Corpus { tree, heldout, phi, pi0 } => {
            io::write_corpus(&out.join("corpus.json"), &tree)?;
            io::write_matrix(&out.join("phi.txt"), &phi)?;
            let heldout_file = if heldout.is_empty() {
                None
            } else {
                io::write_documents(&out.join("heldout.json"), &heldout)?;
                Some("heldout.json".to_string())
            };
            println!(
                "wrote {} documents ({} held out) over {} words to {}",
                tree.leaf_count(),
                heldout.len(),
                tree.vocab_size(),
                out.display()
            );
            TruthManifest {
                model,
                data_file: "corpus.json".into(),
                phi_file: "phi.txt".into(),
                pi: None,
                pi0: Some(pi0),
                sigma2: None,
                heldout_file,
                seed,
            }
        }
    };
    write_json(&out.join("truth.json"), &truth)
}

fn decomposition_config(args: &FitArgs) -> DecompositionConfig {
    DecompositionConfig {
        backend: match args.solver {
            Solver::Rtpm => "rtpm",
            Solver::Als => "als",
            Solver::Fc => "fc",
        }
        .into(),
        restarts: args.restarts,
        iters_init: args.iters,
        iters_final: args.iters_final,
        tol: args.tol,
        sketch_len: args.sketch_len,
        sketch_repeats: args.sketch_repeats,
        seed: args.seed,
    }
}

/// Raw moments `m1..m4` from a directory written with `write_tensor_dir`.
fn read_moments(dir: &Path) -> Result<Vec<DenseTensor>> {
    let (mut tensors, _) = io::read_tensor_dir(dir)?;
    (1..=4)
        .map(|r| {
            tensors
                .remove(&format!("m{r}"))
                .ok_or_else(|| Error::Parse(format!("{} has no tensor m{r}", dir.display())))
        })
        .collect()
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let decomposition = decomposition_config(args);
    decomposition.validate()?;
    let k = match args.k {
        Rank::Auto => None,
        Rank::Fixed(k) => Some(k),
    };
    fs::create_dir_all(&args.out)?;
    let model = if args.model == Model::Hdp {
        let tree = io::read_corpus(&args.data)?;
        let config = HdpConfig {
            k,
            decomposition: decomposition.clone(),
            ..Default::default()
        };
        let fit = fit_hdp(&tree, &config)?;
        io::write_matrix(&args.out.join("phi.txt"), &fit.phi)?;
        ModelFile {
            model: args.model.name().into(),
            k: fit.k,
            k1: fit.k,
            sigma2: None,
            pi: fit.pi0,
            phi_file: "phi.txt".into(),
            branches: vec!["s3".into(); fit.k],
            eigenvalues: fit.eigenvalues,
            converged: fit.converged,
            solver: decomposition.backend.clone(),
            seed: args.seed,
            decomposition,
            timings_ms: fit.timings_ms.into_iter().collect(),
        }
    } else {
        let config = IbpConfig {
            k,
            decomposition: decomposition.clone(),
            noise_floor: match args.noise_floor {
                Floor::Smallest => NoiseFloor::Smallest,
                Floor::MeanTail => NoiseFloor::MeanTail,
            },
            ..Default::default()
        };
        let samples;
        let moments;
        let source = if args.data.is_dir() {
            moments = read_moments(&args.data)?;
            MomentSource::Population(&moments)
        } else {
            samples = SampleSet::from_matrix(&io::read_matrix(&args.data)?)?;
            MomentSource::Samples(&samples)
        };
        let fit = match args.model {
            Model::IbpLg => fit_ibp_linear_gaussian(source, &config)?,
            Model::IsfaGauss => fit_isfa(source, Prior::Gaussian, &config)?,
            Model::IsfaLaplace => fit_isfa(source, Prior::Laplace, &config)?,
            Model::Hdp => unreachable!("handled above"),
        };
        io::write_matrix(&args.out.join("phi.txt"), &fit.phi)?;
        ModelFile {
            model: args.model.name().into(),
            k: fit.k,
            k1: fit.k1,
            sigma2: Some(fit.sigma2),
            pi: fit.pi,
            phi_file: "phi.txt".into(),
            branches: fit
                .branches
                .iter()
                .map(|b| serde_json::to_value(b).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
                .collect(),
            eigenvalues: fit.eigenvalues,
            converged: fit.converged,
            solver: decomposition.backend.clone(),
            seed: args.seed,
            decomposition,
            timings_ms: fit.timings_ms.into_iter().collect(),
        }
    };
    print_summary(&model);
    write_json(&args.out.join("model.json"), &model)
}

fn print_summary(model: &ModelFile) {
    println!("model {} solved with {}", model.model, model.solver);
    println!("K = {} (K1 = {})", model.k, model.k1);
    if let Some(s) = model.sigma2 {
        println!("sigma2 = {s:.6}");
    }
    let total: f64 = model.timings_ms.values().sum();
    for (stage, ms) in &model.timings_ms {
        println!("  {stage:<12} {ms:>10.2} ms");
    }
    println!("  {:<12} {total:>10.2} ms", "total");
}

#[derive(Debug, Serialize)]
struct EvalReport {
    model: String,
    solver: String,
    seed: u64,
    k: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    frobenius: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_column_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    column_errors: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    permutation: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pi_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    heldout_nll: Option<f64>,
    timings_ms: BTreeMap<String, f64>,
    config: DecompositionConfig,
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model: ModelFile = serde_json::from_str(&fs::read_to_string(&args.model)?)?;
    let phi = io::read_matrix(&io::sibling(&args.model, &model.phi_file))?;
    let mut report = EvalReport {
        model: model.model.clone(),
        solver: model.solver.clone(),
        seed: model.seed,
        k: model.k,
        frobenius: None,
        max_column_error: None,
        column_errors: None,
        permutation: None,
        pi_error: None,
        heldout_nll: None,
        timings_ms: model.timings_ms.clone(),
        config: model.decomposition.clone(),
    };
    if let Some(truth_path) = &args.truth {
        let truth: TruthManifest = serde_json::from_str(&fs::read_to_string(truth_path)?)?;
        let reference = io::read_matrix(&io::sibling(truth_path, &truth.phi_file))?;
        // sparse factor loadings are symmetric, so their sign is not identified
        let allow_sign = model.model.starts_with("isfa");
        let m = match_columns(&reference, &phi, allow_sign)?;
        if let Some(pi) = truth.pi.as_ref().filter(|p| p.len() == model.pi.len()) {
            let err = pi
                .iter()
                .zip(&m.permutation)
                .map(|(p, &j)| (p - model.pi[j]).abs())
                .fold(0.0, f64::max);
            report.pi_error = Some(err);
        }
        report.frobenius = Some(m.frobenius);
        report.max_column_error = Some(m.max_column_error());
        report.column_errors = Some(m.column_errors);
        report.permutation = Some(m.permutation);
    }
    if let Some(path) = &args.heldout {
        let docs = io::read_documents(path)?;
        report.heldout_nll = Some(heldout_perword_nll(&phi, &docs)?);
    }
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    if args.csv {
        print_csv(&report).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    } else {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(())
}

fn print_csv(report: &EvalReport) -> std::result::Result<(), csv::Error> {
    let fmt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    let mut w = csv::Writer::from_writer(std::io::stdout());
    w.write_record([
        "model",
        "solver",
        "seed",
        "k",
        "frobenius",
        "max_column_error",
        "pi_error",
        "heldout_nll",
        "total_ms",
    ])?;
    w.write_record([
        report.model.clone(),
        report.solver.clone(),
        report.seed.to_string(),
        report.k.to_string(),
        fmt(report.frobenius),
        fmt(report.max_column_error),
        fmt(report.pi_error),
        fmt(report.heldout_nll),
        report.timings_ms.values().sum::<f64>().to_string(),
    ])?;
    w.flush()?;
    Ok(())
}
