//! `lda`: data generation, training, evaluation, prototype selection,
//! few-shot adaptation, gradient checks and the reproduction suite.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flag,
//! malformed config or missing input). Failures print one JSON line on
//! stderr: `{"error":"usage","message":"..."}`.

mod output;

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use lda_core::aps::{default_thresholds, select_prototypes};
use lda_core::experiments::{determinism, run_all, tables, ReproManifest};
use lda_core::synthdata::{default_fig1_spec, read_samples_csv, sample_mixture, shift_domain, to_batch, write_samples_csv};
use lda_core::trainer::{evaluate, grad_check, train, TrainConfig, DEFAULT_FPR_TARGETS};
use lda_core::{adaptation, Class, LabeledSample, MixtureSpec, MlpParams, PrototypeBank};

use output::OutDir;

#[derive(Parser)]
#[command(name = "lda", version, about = "Multi-prototype live/spoof classifier experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample train/dev/test sets from a Gaussian mixture.
    GenData(GenDataArgs),
    /// Train the embedding network and prototype bank.
    Train(TrainArgs),
    /// Threshold on dev, report APCER/BPCER/ACER, HTER and TPR@FPR on test.
    Eval(EvalArgs),
    /// Prune a trained bank by greedy prototype density.
    Aps(ApsArgs),
    /// Append one class-mean prototype per class from target-domain samples.
    Adapt(AdaptArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Run every acceptance experiment and print PASS/FAIL per criterion.
    Repro(ReproArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// `fig1` or a mixture spec JSON file.
    #[arg(long, default_value = "fig1")]
    spec: String,
    /// Training samples; dev and test default to half as many.
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long)]
    n_dev: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    /// Train uses `seed`, dev `seed + 1`, test `seed + 2`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Translate every cluster mean, e.g. `--shift 1.5,0`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    shift: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.0)]
    std_scale: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainOverrides {
    /// Training config JSON; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k_init: Option<usize>,
    #[arg(long)]
    no_pc_inter: bool,
    #[arg(long)]
    no_pc_intra: bool,
    /// Enable the auxiliary spoof-type and illumination heads.
    #[arg(long)]
    aux: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of `train`.
    #[arg(long)]
    run: PathBuf,
    /// Bank CSV replacing the run's own (e.g. from `aps` or `adapt`).
    #[arg(long)]
    bank: Option<PathBuf>,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_FPR_TARGETS)]
    fpr_targets: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApsArgs {
    #[arg(long)]
    run: PathBuf,
    /// Samples whose embeddings drive the density counts (usually the training set).
    #[arg(long)]
    data: PathBuf,
    /// Defaults to the median best-prototype similarity of the class.
    #[arg(long, allow_negative_numbers = true)]
    t_live: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    t_spoof: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    bank: Option<PathBuf>,
    /// Labeled target-domain samples.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Training config JSON; only its loss settings are used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReproArgs {
    /// Experiment manifest JSON; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<lda_core::Error> for Failure {
    fn from(e: lda_core::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T> = Result<T, Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn open_input(path: &Path) -> CliResult<File> {
    File::open(path).map_err(|e| usage(format!("cannot open {}: {e}", path.display())))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    serde_json::from_reader(std::io::BufReader::new(open_input(path)?))
        .map_err(|e| usage(format!("malformed {}: {e}", path.display())))
}

fn read_samples(path: &Path) -> CliResult<Vec<LabeledSample>> {
    read_samples_csv(open_input(path)?).map_err(|e| usage(format!("malformed {}: {e}", path.display())))
}

fn read_bank(path: &Path) -> CliResult<PrototypeBank> {
    PrototypeBank::read_csv(open_input(path)?).map_err(|e| usage(format!("malformed {}: {e}", path.display())))
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

struct Run {
    config: TrainConfig,
    model: MlpParams,
    bank: PrototypeBank,
}

fn load_run(dir: &Path, bank: Option<&Path>) -> CliResult<Run> {
    let config: TrainConfig = read_json(&dir.join("config.json"))?;
    let model: MlpParams = read_json(&dir.join("model.json"))?;
    let bank = read_bank(bank.unwrap_or(&dir.join("bank.csv")))?;
    if bank.dim() != model.output_dim() {
        return Err(usage(format!(
            "bank dimension {} does not match embedding dimension {}",
            bank.dim(),
            model.output_dim()
        )));
    }
    Ok(Run { config, model, bank })
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let base: MixtureSpec = if a.spec == "fig1" { default_fig1_spec() } else { read_json(Path::new(&a.spec))? };
    let spec = match &a.shift {
        Some(t) => shift_domain(&base, t, a.std_scale).map_err(|e| usage(e.to_string()))?,
        None if a.std_scale != 1.0 => {
            shift_domain(&base, &vec![0.0; base.dim], a.std_scale).map_err(|e| usage(e.to_string()))?
        }
        None => base,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let sizes = [("train", a.n), ("dev", a.n_dev.unwrap_or(a.n / 2)), ("test", a.n_test.unwrap_or(a.n / 2))];
    let mut out = OutDir::create(&a.out)?;
    for (offset, (name, n)) in (0u64..).zip(sizes) {
        let samples = sample_mixture(&spec, n, a.seed.wrapping_add(offset))?;
        out.write_with(&format!("{name}.csv"), |w| write_samples_csv(&samples, w))?;
    }
    out.write_json("spec.json", &spec)?;
    #[derive(Serialize)]
    struct GenConfig<'a> {
        spec: &'a MixtureSpec,
        seed: u64,
        sizes: BTreeMap<&'a str, usize>,
    }
    let cfg = GenConfig { spec: &spec, seed: a.seed, sizes: sizes.into_iter().collect() };
    out.finish("gen-data", &cfg, BTreeMap::from([("spec", a.spec.clone())]))?;
    Ok(())
}

fn train_config(o: &TrainOverrides) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(k) = o.k_init {
        cfg.lda.k_init = k;
    }
    cfg.use_pc_inter &= !o.no_pc_inter;
    cfg.use_pc_intra &= !o.no_pc_intra;
    cfg.use_aux |= o.aux;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn check_input_dim(samples: &[LabeledSample], model_input: usize, what: &Path) -> CliResult<()> {
    match samples.iter().find(|s| s.x.len() != model_input) {
        Some(s) => Err(usage(format!(
            "{} has {}-dimensional inputs, the network expects {model_input}",
            what.display(),
            s.x.len()
        ))),
        None => Ok(()),
    }
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let cfg = train_config(&a.overrides)?;
    let train_set = read_samples(&a.data)?;
    let dev_set = read_samples(&a.dev)?;
    check_input_dim(&train_set, cfg.layer_sizes[0], &a.data)?;
    check_input_dim(&dev_set, cfg.layer_sizes[0], &a.dev)?;
    let outcome = train(&cfg, &train_set, &dev_set)?;
    let mut out = OutDir::create(&a.out)?;
    out.write_json("config.json", &cfg)?;
    out.write_json("model.json", &outcome.model)?;
    out.write_with("bank.csv", |w| outcome.bank.write_csv(w))?;
    if let Some(heads) = &outcome.aux {
        out.write_json("aux.json", heads)?;
    }
    out.write_with("history.csv", |w| outcome.history.write_csv(w))?;
    println!(
        "trained {} epochs; dev threshold {:.6}, dev ACER {:.4}%",
        cfg.epochs,
        outcome.history.final_dev_threshold,
        100.0 * outcome.history.final_dev_acer
    );
    let inputs = BTreeMap::from([("data", path_str(&a.data)), ("dev", path_str(&a.dev))]);
    out.finish("train", &cfg, inputs)?;
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> CliResult<()> {
    let run = load_run(&a.run, a.bank.as_deref())?;
    let dev = read_samples(&a.dev)?;
    let test = read_samples(&a.test)?;
    check_input_dim(&dev, run.model.input_dim(), &a.dev)?;
    check_input_dim(&test, run.model.input_dim(), &a.test)?;
    if let Some(bad) = a.fpr_targets.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(usage(format!("--fpr-targets entry {bad} outside (0, 1)")));
    }
    let report = evaluate(&run.model, &run.bank, &run.config.effective_lda(), &dev, &test, &a.fpr_targets)?;
    let mut out = OutDir::create(&a.out)?;
    out.write_with("metrics.csv", |w| report.write_csv(w))?;
    out.write_json("metrics.json", &report)?;
    println!(
        "threshold {:.6}: test APCER {:.4}% BPCER {:.4}% ACER {:.4}% HTER {:.4}%",
        report.threshold,
        100.0 * report.test.apcer,
        100.0 * report.test.bpcer,
        100.0 * report.test.acer,
        100.0 * report.hter
    );
    let mut inputs = BTreeMap::from([("run", path_str(&a.run)), ("dev", path_str(&a.dev)), ("test", path_str(&a.test))]);
    if let Some(b) = &a.bank {
        inputs.insert("bank", path_str(b));
    }
    #[derive(Serialize)]
    struct EvalConfig<'a> {
        train: &'a TrainConfig,
        fpr_targets: &'a [f64],
    }
    out.finish("eval", &EvalConfig { train: &run.config, fpr_targets: &a.fpr_targets }, inputs)?;
    Ok(())
}

fn aps_cmd(a: ApsArgs) -> CliResult<()> {
    let run = load_run(&a.run, None)?;
    let data = read_samples(&a.data)?;
    check_input_dim(&data, run.model.input_dim(), &a.data)?;
    let (x, _) = to_batch(&data)?;
    let emb = run.model.embed(&x)?;
    let rows = |c: Class| -> Vec<&[f64]> { emb.iter_rows().zip(&data).filter(|(_, s)| s.y == c).map(|(r, _)| r).collect() };
    let (live, spoof) = (rows(Class::Live), rows(Class::Spoof));
    let [d_live, d_spoof] = default_thresholds(&run.bank, &live, &spoof);
    let (t_live, t_spoof) = (a.t_live.unwrap_or(d_live), a.t_spoof.unwrap_or(d_spoof));
    let sel = select_prototypes(&run.bank, &live, &spoof, t_live, t_spoof)?;
    let mut out = OutDir::create(&a.out)?;
    out.write_with("bank.csv", |w| sel.bank.write_csv(w))?;
    out.write_json("aps_log.json", &sel.log)?;
    println!(
        "kept {} of {} prototypes (live {:?}, spoof {:?}) at thresholds {t_live:.6} / {t_spoof:.6}",
        sel.total_selected(),
        run.bank.total(),
        sel.selected[0],
        sel.selected[1]
    );
    #[derive(Serialize)]
    struct ApsConfig {
        t_live: f64,
        t_spoof: f64,
        selected: [Vec<usize>; 2],
    }
    let cfg = ApsConfig { t_live, t_spoof, selected: sel.selected.clone() };
    out.finish("aps", &cfg, BTreeMap::from([("run", path_str(&a.run)), ("data", path_str(&a.data))]))?;
    Ok(())
}

fn adapt_cmd(a: AdaptArgs) -> CliResult<()> {
    let run = load_run(&a.run, a.bank.as_deref())?;
    let target = read_samples(&a.data)?;
    check_input_dim(&target, run.model.input_dim(), &a.data)?;
    let adapted = adaptation::adapt(&run.bank, &run.model, &target)?;
    let mut out = OutDir::create(&a.out)?;
    out.write_with("bank.csv", |w| adapted.write_csv(w))?;
    println!(
        "bank grew from {} to {} prototypes using {} target samples",
        run.bank.total(),
        adapted.total(),
        target.len()
    );
    let mut inputs = BTreeMap::from([("run", path_str(&a.run)), ("data", path_str(&a.data))]);
    if let Some(b) = &a.bank {
        inputs.insert("bank", path_str(b));
    }
    out.finish("adapt", &run.config, inputs)?;
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> CliResult<()> {
    let cfg = train_config(&TrainOverrides {
        config: a.config.clone(),
        seed: Some(a.seed),
        k_init: None,
        no_pc_inter: false,
        no_pc_intra: false,
        aux: false,
    })?;
    let report = grad_check(&cfg.lda, a.trials, a.tol, a.seed)?;
    let mut out = OutDir::create(&a.out)?;
    out.write_json("gradcheck.json", &report)?;
    println!(
        "{} instances ({} resampled): max relative error {:.3e}, tolerance {:.0e}",
        report.trials, report.resampled, report.max_rel_error, report.tolerance
    );
    out.finish("gradcheck", &cfg, BTreeMap::new())?;
    if !report.passed {
        return Err(Failure::Runtime(anyhow!("gradient check failed: max relative error {:e}", report.max_rel_error)));
    }
    Ok(())
}

fn repro_cmd(a: ReproArgs) -> CliResult<()> {
    let manifest: ReproManifest = match &a.config {
        Some(p) => read_json(p)?,
        None => ReproManifest::default(),
    };
    let first = run_all(&manifest)?;
    let second = run_all(&manifest)?;
    let mut reports = first;
    reports.push(determinism(&reports, &second));
    let mut out = OutDir::create(&a.out)?;
    for t in tables(&reports) {
        out.write(&t.name, t.csv.as_bytes())?;
    }
    let mut summary = String::from("criterion,name,passed\n");
    for r in &reports {
        println!("{}", r.line());
        summary.push_str(&format!("{},{},{}\n", r.id, r.name, r.passed));
    }
    out.write("summary.csv", summary.as_bytes())?;
    let mut inputs = BTreeMap::new();
    if let Some(p) = &a.config {
        inputs.insert("config", path_str(p));
    }
    out.finish("repro", &manifest, inputs)?;
    let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.id.to_string()).collect();
    if !failed.is_empty() {
        return Err(Failure::Runtime(anyhow!("criteria failed: {}", failed.join(", "))));
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Aps(a) => aps_cmd(a),
        Command::Adapt(a) => adapt_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Repro(a) => repro_cmd(a),
    }
}

fn error_line(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            error_line("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            error_line("usage", &msg);
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            error_line("runtime", &format!("{e:#}"));
            ExitCode::from(1)
        }
    }
}
