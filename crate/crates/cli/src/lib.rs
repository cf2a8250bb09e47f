//! Command implementations behind the `calcscore` binary.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use calc_neural::{Model, NetworkWeights, NeuralError, Real};
use calcscore::config::PipelineConfig;
use calcscore::evaluation::{weighted_kappa, ConfusionMatrix, EvaluationReport, ScanEvaluation};
use calcscore::imagegrid::{load_labels, load_volume, save_labels, GridError};
use calcscore::phantom::{generate_corpus, write_corpus, PhantomRunConfig};
use calcscore::pipeline::{run_inference, train_pipeline, Corpus, RunManifest};
use calcscore::scoring::ScoreReport;
use calcscore::stage1::{self, build_cnn1, SUPPORTED_RF};
use calcscore::stage2::{self, Cnn2};
use calcscore::Error;
use clap::{Parser, Subcommand, ValueEnum};

pub const STAGE1_FILE: &str = "stage1.weights";
pub const STAGE2_FILE: &str = "stage2.weights";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "training_log.json";
pub const RUN_MANIFEST: &str = "run_manifest.json";

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error
  2  usage error (unknown flag, missing argument)
  3  config: configuration file fails schema validation
  4  fingerprint: weights do not match the configured architecture
  5  missing: an input file or directory cannot be read
  6  data: malformed or inconsistent input data

Errors are reported on stderr as one line: `error[<category>]: <message>`.";

#[derive(Debug, Parser)]
#[command(name = "calcscore", version, about = "Calcification detection, labeling and scoring in chest CT", after_help = EXIT_CODES)]
pub struct Cli {
    /// Worker threads [default: all cores]
    #[arg(long, global = true, env = "CALCSCORE_THREADS")]
    pub threads: Option<usize>,
    /// Floating point precision for training and inference
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn name(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labeled synthetic phantom corpus
    Phantom {
        /// Phantom corpus configuration (TOML)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both networks on a corpus directory
    Train {
        /// Corpus directory containing manifest.json
        corpus: PathBuf,
        /// Pipeline configuration (TOML)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for weights, log and config
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect, label and score calcifications in one volume
    Score {
        /// Volume header (.vhdr)
        volume: PathBuf,
        /// Directory written by `train`
        #[arg(long)]
        weights: PathBuf,
        /// Pipeline configuration [default: the one stored with the weights]
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for labels, report and manifest
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare predicted label maps with reference label maps
    Eval {
        /// Directory of predicted `<id>_labels.vhdr` files
        #[arg(long)]
        pred: PathBuf,
        /// Directory of reference `<id>.vhdr` volumes and `<id>_labels.vhdr` labels
        #[arg(long)]
        reference: PathBuf,
        /// Output statistics file (JSON)
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the receptive-field table of the stage-1 ladders and the stage-2 patch
    Rf {
        /// Pipeline configuration whose stage-1 network is listed first
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Linearly weighted kappa of a confusion matrix file
    Kappa {
        /// Whitespace-separated integers, one row per line (reference rows)
        matrix: PathBuf,
    },
}

/// Error with its exit category.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.category, self.message.replace('\n', " "))
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (category, code) = match &e {
            Error::Config(_) => ("config", 3),
            Error::Neural(NeuralError::FingerprintMismatch { .. }) => ("fingerprint", 4),
            Error::Io(_) | Error::Grid(GridError::Io(_)) | Error::Neural(NeuralError::Io(_)) => ("missing", 5),
            Error::Grid(_)
            | Error::Neural(NeuralError::Format(_))
            | Error::InvalidInput(_)
            | Error::EmptyStratum(_)
            | Error::SubjectLeak(_)
            | Error::UnmatchedScan(_)
            | Error::Placement(_)
            | Error::Serde(_) => ("data", 6),
            Error::Neural(_) => ("internal", 1),
        };
        Self { category, code, message: e.to_string() }
    }
}

impl From<NeuralError> for CliError {
    fn from(e: NeuralError) -> Self {
        Error::from(e).into()
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = Result<T, CliError>;

fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError {
        category: "missing",
        code: 5,
        message: format!("{}: {e}", path.display()),
    })
}

fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    match path {
        Some(p) => Ok(PipelineConfig::from_toml(&read_text(p)?)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn elapsed_ms(t: Instant) -> u128 {
    t.elapsed().as_millis()
}

/// Runs one command, returning what it prints on stdout.
pub fn run(cli: &Cli) -> CliResult<String> {
    if let Some(n) = cli.threads {
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    match &cli.command {
        Command::Phantom { config, seed, out } => cmd_phantom(config.as_deref(), *seed, out),
        Command::Train { corpus, config, seed, out } => match cli.precision {
            Precision::F32 => cmd_train::<f32>(corpus, config.as_deref(), *seed, out, cli.precision),
            Precision::F64 => cmd_train::<f64>(corpus, config.as_deref(), *seed, out, cli.precision),
        },
        Command::Score { volume, weights, config, out } => match cli.precision {
            Precision::F32 => cmd_score::<f32>(volume, weights, config.as_deref(), out, cli.precision),
            Precision::F64 => cmd_score::<f64>(volume, weights, config.as_deref(), out, cli.precision),
        },
        Command::Eval { pred, reference, out } => cmd_eval(pred, reference, out),
        Command::Rf { config } => cmd_rf(config.as_deref()),
        Command::Kappa { matrix } => cmd_kappa(matrix),
    }
}

pub fn cmd_phantom(config: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult<String> {
    let t = Instant::now();
    let mut cfg = match config {
        Some(p) => PhantomRunConfig::from_toml(&read_text(p)?)?,
        None => PhantomRunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let subjects = generate_corpus(&cfg.corpus, &cfg.phantom, cfg.seed)?;
    let manifest = write_corpus(&subjects, cfg.seed, out)?;
    let mut run = RunManifest::new("phantom", "f32");
    run.config = Some(serde_json::to_string(&cfg).map_err(Error::from)?);
    run.seeds.insert("corpus".into(), cfg.seed);
    if let Some(p) = config {
        run.add_input(p)?;
    }
    for e in &manifest.subjects {
        run.add_output(&out.join(&e.volume_file))?;
        run.add_output(&out.join(&e.labels_file))?;
    }
    run.timings_ms.insert("total".into(), elapsed_ms(t));
    run.write(&out.join(RUN_MANIFEST))?;
    Ok(format!("wrote {} phantoms to {}\n", manifest.subjects.len(), out.display()))
}

pub fn cmd_train<F: Real>(
    corpus_dir: &Path,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
    precision: Precision,
) -> CliResult<String> {
    let t = Instant::now();
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let corpus = Corpus::load(corpus_dir, &cfg.grid)?;
    let trained = train_pipeline::<F>(&corpus, &cfg)?;
    std::fs::create_dir_all(out)?;
    let w1 = stage1::capture_weights(&trained.stage1, trained.stage1_seed, cfg.stage1.steps as u64)?;
    let w2 = stage2::capture_weights(&trained.stage2, trained.stage2_seed, cfg.stage2.steps as u64)?;
    w1.save(&out.join(STAGE1_FILE))?;
    w2.save(&out.join(STAGE2_FILE))?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
    std::fs::write(out.join(LOG_FILE), serde_json::to_string_pretty(&trained.log).map_err(Error::from)?)?;

    let mut run = RunManifest::new("train", precision.name()).with_config(&cfg);
    run.seeds.insert("config".into(), cfg.seed);
    run.seeds.insert("stage1".into(), trained.stage1_seed);
    run.seeds.insert("stage2".into(), trained.stage2_seed);
    run.add_input(&corpus_dir.join(calcscore::phantom::MANIFEST_FILE))?;
    for name in [STAGE1_FILE, STAGE2_FILE, CONFIG_FILE, LOG_FILE] {
        run.add_output(&out.join(name))?;
    }
    run.weight_fingerprints.insert("stage1".into(), w1.fingerprint.clone());
    run.weight_fingerprints.insert("stage2".into(), w2.fingerprint.clone());
    run.timings_ms.insert("total".into(), elapsed_ms(t));
    run.write(&out.join(RUN_MANIFEST))?;

    let mut text = String::new();
    for e in &trained.log.entries {
        text.push_str(&format!(
            "{:?} step {:>6} train {:.4} validation {:.4}\n",
            e.stage, e.step, e.train_loss, e.validation_loss
        ));
    }
    text.push_str(&format!("weights written to {}\n", out.display()));
    Ok(text)
}

fn stem_of(path: &Path) -> String {
    path.file_stem().and_then(|s| s.to_str()).unwrap_or("scan").to_string()
}

pub fn cmd_score<F: Real>(
    volume: &Path,
    weights: &Path,
    config: Option<&Path>,
    out: &Path,
    precision: Precision,
) -> CliResult<String> {
    let t = Instant::now();
    let stored = weights.join(CONFIG_FILE);
    let cfg = match config {
        Some(p) => load_config(Some(p))?,
        None if stored.exists() => load_config(Some(&stored))?,
        None => PipelineConfig::default(),
    };
    let w1 = NetworkWeights::load(&weights.join(STAGE1_FILE))?;
    let w2 = NetworkWeights::load(&weights.join(STAGE2_FILE))?;
    let expect = |expected: String, w: &NetworkWeights| -> CliResult<()> {
        if expected != w.fingerprint {
            return Err(Error::from(NeuralError::FingerprintMismatch { expected, found: w.fingerprint.clone() }).into());
        }
        Ok(())
    };
    expect(cfg.stage1_spec()?.fingerprint(), &w1)?;
    expect(cfg.stage2_spec()?.fingerprint(), &w2)?;
    let net1 = stage1::restore_weights::<F>(&w1)?;
    let net2: Cnn2<F> = stage2::restore_weights(&w2)?;

    let v = load_volume(volume).map_err(Error::from)?;
    let inference = run_inference(&v, &net1, (!cfg.stage2.disabled).then_some(&net2), &cfg)?;
    let id = stem_of(volume);
    let fingerprints = vec![net1.fingerprint(), Model::fingerprint(&net2)];
    let report = ScoreReport::compute(&id, &v, &inference.labels, fingerprints)?;

    std::fs::create_dir_all(out)?;
    let labels_path = out.join(format!("{id}_labels.vhdr"));
    let report_path = out.join(format!("{id}_score.json"));
    save_labels(&inference.labels, &labels_path).map_err(Error::from)?;
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).map_err(Error::from)?)?;

    let mut run = RunManifest::new("score", precision.name()).with_config(&cfg);
    run.seeds.insert("config".into(), cfg.seed);
    for p in [volume.to_path_buf(), weights.join(STAGE1_FILE), weights.join(STAGE2_FILE)] {
        run.add_input(&p)?;
    }
    run.add_output(&labels_path)?;
    run.add_output(&report_path)?;
    run.weight_fingerprints.insert("stage1".into(), w1.fingerprint);
    run.weight_fingerprints.insert("stage2".into(), w2.fingerprint);
    run.timings_ms.insert("total".into(), elapsed_ms(t));
    run.write(&out.join(format!("{id}_{RUN_MANIFEST}")))?;
    Ok(report.table())
}

/// `<id>` for every `<id>_labels.vhdr` in `dir`, sorted.
fn label_ids(dir: &Path) -> CliResult<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| CliError {
        category: "missing",
        code: 5,
        message: format!("{}: {e}", dir.display()),
    })? {
        let name = entry?.file_name().to_string_lossy().to_string();
        if let Some(id) = name.strip_suffix("_labels.vhdr") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

pub fn cmd_eval(pred: &Path, reference: &Path, out: &Path) -> CliResult<String> {
    let t = Instant::now();
    let ref_ids = label_ids(reference)?;
    let pred_ids = label_ids(pred)?;
    if let Some(extra) = pred_ids.iter().find(|id| !ref_ids.contains(id)) {
        return Err(Error::UnmatchedScan(extra.clone()).into());
    }
    let (mut scans, mut pred_reports, mut ref_reports) = (Vec::new(), Vec::new(), Vec::new());
    let mut run = RunManifest::new("eval", "f32");
    for id in &ref_ids {
        if !pred_ids.contains(id) {
            return Err(Error::UnmatchedScan(id.clone()).into());
        }
        let volume_path = reference.join(format!("{id}.vhdr"));
        let ref_path = reference.join(format!("{id}_labels.vhdr"));
        let pred_path = pred.join(format!("{id}_labels.vhdr"));
        let v = load_volume(&volume_path).map_err(Error::from)?;
        let r = load_labels(&ref_path).map_err(Error::from)?;
        let p = load_labels(&pred_path).map_err(Error::from)?;
        scans.push(ScanEvaluation::compute(id, &p, &r)?);
        pred_reports.push(ScoreReport::compute(id, &v, &p, vec![])?);
        ref_reports.push(ScoreReport::compute(id, &v, &r, vec![])?);
        for path in [&volume_path, &ref_path, &pred_path] {
            run.add_input(path)?;
        }
    }
    if scans.is_empty() {
        return Err(Error::InvalidInput(format!("no reference label maps in {}", reference.display())).into());
    }
    let report = EvaluationReport::build(scans, &pred_reports, &ref_reports)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    run.add_output(out)?;
    run.timings_ms.insert("total".into(), elapsed_ms(t));
    run.write(&out.with_extension("manifest.json"))?;

    let c = &report.calcium;
    let mut text = format!(
        "scans {}\ncalcium sensitivity {:.1}% false-positive volume/scan {:.1} mm3 F1 {:.3} (mean per scan {:.3})\n",
        c.scans, c.pooled.sensitivity_pct, c.mean_false_positive_volume_mm3, c.pooled.f1, c.per_scan_mean_f1
    );
    for (name, a) in &report.per_class {
        text.push_str(&format!("{name:<4} sensitivity {:.1}% F1 {:.3}\n", a.pooled.sensitivity_pct, a.pooled.f1));
    }
    text.push_str(&format!("risk category kappa {:.3}\n", report.risk_kappa));
    Ok(text)
}

pub fn cmd_rf(config: Option<&Path>) -> CliResult<String> {
    let cfg = load_config(config)?;
    let spec = cfg.stage1_spec()?;
    let ladder = |d: &[usize]| d.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut text = format!("stage1 {} dilations {}\n", spec.receptive_field(), ladder(&spec.dilations));
    for rf in SUPPORTED_RF {
        let s = build_cnn1(rf)?;
        text.push_str(&format!("variant {} dilations {}\n", s.receptive_field(), ladder(&s.dilations)));
    }
    let s2 = cfg.stage2_spec()?;
    text.push_str(&format!("stage2 patch {} {}x{}\n", s2.patch, s2.patch, s2.patch));
    Ok(text)
}

pub fn cmd_kappa(matrix: &Path) -> CliResult<String> {
    let m = ConfusionMatrix::parse(&read_text(matrix)?)?;
    Ok(format!("{:.2}\n", weighted_kappa(&m)?))
}

/// Parsed arguments of every documented flag, for `--help` checks.
pub fn documented_flags() -> BTreeMap<String, Vec<String>> {
    use clap::CommandFactory;
    let cmd = Cli::command();
    let mut out = BTreeMap::new();
    let global: Vec<String> = cmd.get_arguments().filter_map(|a| a.get_long().map(str::to_string)).collect();
    out.insert(String::new(), global);
    for sub in cmd.get_subcommands() {
        let flags = sub.get_arguments().filter_map(|a| a.get_long().map(str::to_string)).collect();
        out.insert(sub.get_name().to_string(), flags);
    }
    out
}
