//! `chemgp` command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chemgp::chemspace::embedding_check;
use chemgp::discover::{run_ga, FitnessKind, GAConfig};
use chemgp::evalcv::{cross_validate, report_csv, ModelSpec};
use chemgp::io::{load_model, predictions_csv, read_experiments, read_fingerprint_rows, read_fingerprints, save_model, write_with_header};
use chemgp::predict::{predict, probit_class_probabilities, Method};
use chemgp::simstudy::{
    boxplot_svg, estimation_csv, ga_csv, run_replications, study_ga, summarize_estimation, summarize_variance, variance_csv,
    SimDesign,
};
use chemgp::{fit_mle, Error, ErrorCategory, FitOptions, KernelFamily, Link};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "chemgp", version, about = "Ordinal Gaussian-process models over Tanimoto chemical space")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Serialize)]
struct Global {
    /// Seed for every random choice; drawn and recorded when absent.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Fit a model by maximum approximate likelihood.
    Fit(FitArgs),
    /// Predict class probabilities for candidate compounds.
    Predict(PredictArgs),
    /// Compare model specifications by stratified cross-validation.
    Cv(CvArgs),
    /// Search fingerprint space with the genetic algorithm.
    Discover(DiscoverArgs),
    /// Run a simulation study.
    Simulate(SimulateArgs),
    /// Check that the Tanimoto metric embeds in Euclidean space.
    EmbedCheck(EmbedArgs),
}

#[derive(Args, Debug, Serialize)]
struct DataArgs {
    /// Compound fingerprints: `id,bits`.
    #[arg(long)]
    fingerprints: PathBuf,
    /// Experiments: `compound_id,y,x1..xp`.
    #[arg(long)]
    experiments: PathBuf,
    /// Number of ordered classes (default: largest observed).
    #[arg(long)]
    classes: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct OptimArgs {
    /// Simplex restarts from jittered defaults.
    #[arg(long, default_value_t = 3)]
    restarts: usize,
    /// Evaluation budget per simplex run.
    #[arg(long, default_value_t = 4000)]
    max_evals: usize,
}

impl OptimArgs {
    fn options(&self, seed: u64) -> FitOptions {
        FitOptions {
            restarts: self.restarts,
            max_evals: self.max_evals,
            seed,
            ..FitOptions::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Kernel family: tanimoto, exponential, gaussian or independent.
    #[arg(long, default_value = "tanimoto")]
    kernel: KernelFamily,
    /// Link: logit, probit, loglog or cloglog.
    #[arg(long, default_value = "logit")]
    link: Link,
    /// Start from the parameters of a saved model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
    /// Output model file.
    #[arg(long, default_value = "model.json")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum PredictMethod {
    Quadrature,
    ProbitClosedForm,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Candidates: `id,bits` and optionally `x1..xp` per row.
    #[arg(long)]
    candidates: PathBuf,
    /// Covariates for candidates without their own, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Vec<f64>,
    #[arg(long, value_enum, default_value = "quadrature")]
    method: PredictMethod,
    #[arg(long, default_value = "predictions.csv")]
    out: PathBuf,
}

#[derive(Debug, Deserialize)]
struct CvConfig {
    models: Vec<ModelSpec>,
    #[serde(default)]
    folds: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model as `link:kernel`; repeat for several.
    #[arg(long = "model")]
    models: Vec<String>,
    /// JSON file `{"models": [{"link": ..., "kernel": ...}], "folds": k}`.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of folds; equal to the number of rows gives leave-one-out.
    #[arg(long)]
    folds: Option<usize>,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value = "cv.csv")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Fitness {
    MinGpMean,
    MaxTopClassProb,
}

#[derive(Args, Debug, Serialize)]
struct DiscoverArgs {
    #[arg(long)]
    model: PathBuf,
    /// GA settings as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    fitness: Option<Fitness>,
    /// Covariates for the probability criterion, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    x: Vec<f64>,
    /// Population size (even).
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    generations: Option<usize>,
    /// Features the search may change, comma separated, 0-based.
    #[arg(long, value_delimiter = ',')]
    features: Vec<usize>,
    #[arg(long, default_value = "ga.json")]
    out: PathBuf,
    /// Per-feature frequency in the final population.
    #[arg(long, default_value = "feature_frequency.csv")]
    frequencies: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Preset {
    RecoveryGaussian,
    GaGaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Study {
    Estimation,
    Ga,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Design as JSON (`SimDesign`).
    #[arg(long, conflicts_with = "preset")]
    design: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "recovery-gaussian")]
    preset: Preset,
    /// Estimation runs parameter recovery and the variance study; ga runs
    /// the GA ranking study.
    #[arg(long, value_enum, default_value = "estimation")]
    study: Study,
    #[arg(long)]
    replications: Option<usize>,
    /// GA settings for the ga study, as JSON.
    #[arg(long)]
    ga_config: Option<PathBuf>,
    #[command(flatten)]
    optim: OptimArgs,
    #[arg(long, default_value = "simulation")]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EmbedArgs {
    #[arg(long)]
    fingerprints: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::Config => 1,
        ErrorCategory::Data => 2,
        ErrorCategory::Numerical => 3,
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> chemgp::Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &Value) -> chemgp::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    let seed = cli.global.seed.unwrap_or_else(rand::random);
    log::info!("seed {seed}");
    let config = json!({
        "command": cli.command,
        "seed": seed,
        "threads": cli.global.threads,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let result = match &cli.command {
        Command::Fit(a) => cmd_fit(a, seed, config),
        Command::Predict(a) => cmd_predict(a, config),
        Command::Cv(a) => cmd_cv(a, seed, config),
        Command::Discover(a) => cmd_discover(a, seed, config),
        Command::Simulate(a) => cmd_simulate(a, seed, config),
        Command::EmbedCheck(a) => cmd_embed_check(a, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_data(a: &DataArgs) -> chemgp::Result<chemgp::Dataset> {
    let space = Arc::new(read_fingerprints(&a.fingerprints)?);
    read_experiments(&a.experiments, space, a.classes)
}

fn cmd_fit(a: &FitArgs, seed: u64, config: Value) -> chemgp::Result<()> {
    let data = load_data(&a.data)?;
    let init = match &a.init {
        Some(path) => {
            let m = load_model(path)?;
            if m.params.kernel.family != a.kernel || m.params.link != a.link {
                return Err(Error::Config(format!(
                    "initial model is {} {}, requested {} {}",
                    m.params.link, m.params.kernel.family, a.link, a.kernel
                )));
            }
            Some(m.params)
        }
        None => None,
    };
    let model = fit_mle(&data, a.kernel, a.link, init.as_ref(), &a.optim.options(seed))?;
    save_model(&a.out, &model, config)?;

    let names = model.layout.names();
    let estimates = model.params.natural_vector();
    let se = model.standard_errors();
    println!("{} {} model, n = {}, m = {}", a.link, a.kernel, data.n(), data.m());
    println!("{:<10} {:>12} {:>12}", "parameter", "estimate", "std.error");
    for (k, name) in names.iter().enumerate() {
        let s = se.as_ref().map_or("NA".to_string(), |s| format!("{:.6}", s[k]));
        println!("{name:<10} {:>12.6} {s:>12}", estimates[k]);
    }
    let d = &model.diagnostics;
    println!("log-likelihood {:.6}", model.loglik());
    println!(
        "converged {} after {} outer iterations, {} evaluations",
        d.converged, d.outer_iterations, d.evaluations
    );
    if se.is_none() {
        println!("observed information is not positive definite; standard errors unavailable");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_predict(a: &PredictArgs, config: Value) -> chemgp::Result<()> {
    let model = load_model(&a.model)?;
    let (ids, fps, xs) = read_fingerprint_rows(&a.candidates)?;
    let p = model.params.beta.len();
    let mut preds = Vec::with_capacity(fps.len());
    for ((id, fp), x) in ids.iter().zip(&fps).zip(&xs) {
        let x_star: &[f64] = if x.is_empty() { &a.x } else { x };
        if x_star.len() != p {
            return Err(Error::Config(format!(
                "candidate {id}: model has {p} covariates, got {} (use --x or x1..x{p} columns)",
                x_star.len()
            )));
        }
        let mut pred = predict(&model, fp, x_star)?;
        if let PredictMethod::ProbitClosedForm = a.method {
            let xbeta = model.params.linear_predictor(x_star);
            pred.class_probs = probit_class_probabilities(&model.params, xbeta, pred.mean_u, pred.var_u)?;
            pred.method = Method::ProbitClosedForm;
        }
        preds.push(pred);
    }
    write_with_header(&a.out, &config, &predictions_csv(&ids, &preds))?;
    println!("wrote {} predictions to {}", preds.len(), a.out.display());
    Ok(())
}

fn parse_spec(s: &str) -> chemgp::Result<ModelSpec> {
    let (link, kernel) = s
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("model {s:?} is not link:kernel")))?;
    Ok(ModelSpec {
        link: link.parse().map_err(|_| Error::Config(format!("unknown link {link:?}")))?,
        kernel: kernel.parse().map_err(|_| Error::Config(format!("unknown kernel {kernel:?}")))?,
    })
}

fn cmd_cv(a: &CvArgs, seed: u64, config: Value) -> chemgp::Result<()> {
    let file: Option<CvConfig> = a.config.as_deref().map(read_json).transpose()?;
    let mut specs: Vec<ModelSpec> = file.as_ref().map(|c| c.models.clone()).unwrap_or_default();
    for s in &a.models {
        specs.push(parse_spec(s)?);
    }
    if specs.is_empty() {
        return Err(Error::Config("no models given (use --model link:kernel or --config)".into()));
    }
    let folds = a.folds.or(file.and_then(|c| c.folds)).unwrap_or(5);
    let data = load_data(&a.data)?;
    let reports = cross_validate(&data, &specs, folds, seed, &a.optim.options(seed))?;
    write_with_header(&a.out, &config, &report_csv(&reports))?;
    println!("{:<24} {:>9} {:>9} {:>9}", "model", "log loss", "spherical", "seconds");
    for r in &reports {
        println!(
            "{:<24} {:>9.4} {:>9.4} {:>9.2}",
            r.spec.label(),
            r.log_loss_mean,
            r.spherical_mean,
            r.fit_seconds_mean
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_discover(a: &DiscoverArgs, seed: u64, config: Value) -> chemgp::Result<()> {
    let model = load_model(&a.model)?;
    let mut ga: GAConfig = match &a.config {
        Some(path) => read_json(path)?,
        None => GAConfig::default(),
    };
    ga.seed = seed;
    if let Some(f) = a.fitness {
        ga.fitness = match f {
            Fitness::MinGpMean => FitnessKind::MinGpMean,
            Fitness::MaxTopClassProb => FitnessKind::MaxTopClassProb,
        };
    }
    if !a.x.is_empty() {
        ga.x_star = Some(a.x.clone());
    }
    if let Some(k) = a.population {
        ga.k = k;
    }
    if let Some(g) = a.generations {
        ga.generations = g;
    }
    if !a.features.is_empty() {
        ga.feature_mask = Some(a.features.clone());
    }
    let result = run_ga(&model, &ga)?;
    let config = json!({"cli": config, "ga": ga});
    write_json(&a.out, &json!({"config": config, "result": result}))?;
    let mut freq = String::from("feature_index,frequency\n");
    for (j, f) in result.feature_frequency.iter().enumerate() {
        freq.push_str(&format!("{j},{f}\n"));
    }
    write_with_header(&a.frequencies, &config, &freq)?;
    println!("best {} fitness {}", result.best.bits, result.best.fitness);
    println!("wrote {} and {}", a.out.display(), a.frequencies.display());
    Ok(())
}

fn cmd_simulate(a: &SimulateArgs, seed: u64, config: Value) -> chemgp::Result<()> {
    let mut design = match (&a.design, a.preset) {
        (Some(path), _) => read_json::<SimDesign>(path)?,
        (None, Preset::RecoveryGaussian) => SimDesign::recovery_gaussian(100, seed),
        (None, Preset::GaGaussian) => SimDesign::ga_gaussian(20, seed),
    };
    if a.design.is_none() || a.replications.is_some() {
        design.seed = seed;
    }
    if let Some(r) = a.replications {
        design.replications = r;
    }
    design.validate()?;
    fs::create_dir_all(&a.out_dir)?;
    let options = a.optim.options(seed);
    let config = json!({"cli": config, "design": design});
    match a.study {
        Study::Estimation => {
            let reps = run_replications(&design, &options)?;
            let est = summarize_estimation(&design, &reps);
            write_with_header(&a.out_dir.join("estimation.csv"), &config, &estimation_csv(&est))?;
            print!("{}", estimation_csv(&est));
            match summarize_variance(&reps) {
                Ok(var) => {
                    write_with_header(&a.out_dir.join("variance.csv"), &config, &variance_csv(&var))?;
                    println!(
                        "variance msd: uncorrected {:.6}, corrected {:.6}",
                        var.uncorrected_msd, var.corrected_msd
                    );
                }
                Err(e) => log::warn!("variance study skipped: {e}"),
            }
            let header = format!("<!-- config: {} -->\n", serde_json::to_string(&config)?);
            let svg = boxplot_svg(&design, &reps);
            let svg = match svg.split_once('\n') {
                Some((first, rest)) if first.starts_with("<?xml") => format!("{first}\n{header}{rest}"),
                _ => format!("{header}{svg}"),
            };
            fs::write(a.out_dir.join("estimates.svg"), svg)?;
            write_json(&a.out_dir.join("replicates.json"), &json!({"config": config, "replicates": reps}))?;
            println!("{} of {} replications fitted", reps.len(), design.replications);
        }
        Study::Ga => {
            let ga: GAConfig = match &a.ga_config {
                Some(path) => read_json(path)?,
                None => GAConfig {
                    seed,
                    ..GAConfig::default()
                },
            };
            let report = study_ga(&design, &ga, &options)?;
            let config = json!({"cli": config["cli"], "design": design, "ga": ga});
            write_with_header(&a.out_dir.join("ga.csv"), &config, &ga_csv(&report))?;
            print!("{}", ga_csv(&report));
        }
    }
    println!("wrote results to {}", a.out_dir.display());
    Ok(())
}

fn cmd_embed_check(a: &EmbedArgs, config: Value) -> chemgp::Result<()> {
    let space = read_fingerprints(&a.fingerprints)?;
    let check = embedding_check(&space);
    let embeds = check.is_psd(chemgp::chemspace::PSD_TOLERANCE);
    let expected = space.len().saturating_sub(1);
    println!("compounds {}", space.len());
    println!("gram eigenvalues: min {:e}, max {:e}", check.min_eigenvalue, check.max_eigenvalue);
    println!("rank {} (m - 1 = {expected})", check.rank);
    println!(
        "{}",
        if embeds {
            "sqrt-Tanimoto distance embeds in Euclidean space"
        } else {
            "gram matrix is not positive semi-definite"
        }
    );
    if let Some(out) = &a.out {
        write_json(
            out,
            &json!({"config": config, "compounds": space.len(), "check": check, "embeds": embeds}),
        )?;
    }
    if embeds {
        Ok(())
    } else {
        Err(Error::NumericalDegeneracy(format!(
            "embedding gram matrix has eigenvalue {:e}",
            check.min_eigenvalue
        )))
    }
}
