//! `disprobe` command-line frontend.
//!
//! stdout carries `key=value` lines only; diagnostics go to stderr. Exit
//! codes: 0 success, 1 bad input (config, format, usage), 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use disprobe::bench::{
    self, attack_samples, correlate, emit_report, read_json_report, resolve_dataset, resolve_model,
    write_csv, Cache, EvalRecord, EvalRequest, EvalResult, ReportFormat, Threat, ThreatSpec,
    BUILTIN_DATASETS,
};
use disprobe::corrupt::{apply_corruption, CorruptionKind, CorruptionSpec};
use disprobe::imgio::{read_image, write_image, write_pfm, PfmImage};
use disprobe::metrics::{psnr, Weighting};
use disprobe::{Error, Result};

#[derive(Parser)]
#[command(name = "disprobe", version, about = "Robustness benchmarking for stereo disparity models")]
struct Cli {
    /// Worker threads for evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a model on a dataset under a threat and write CSV + JSON reports.
    Evaluate(EvaluateArgs),
    /// Apply one corruption to one image.
    Corrupt(CorruptArgs),
    /// Attack every sample of a dataset and report per-sample statistics.
    Attack(AttackArgs),
    /// Write CSV or JSON reports from JSON record files or the cache.
    Report(ReportArgs),
    /// Correlate two record sets and write a scatter CSV.
    Correlate(CorrelateArgs),
    /// Inspect the result cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Write a built-in synthetic dataset to disk with a manifest.
    Synth(SynthArgs),
}

/// Flags mirroring threat-config keys; a flag overrides the file.
#[derive(Args, Default)]
struct ThreatArgs {
    /// Threat config file (`key: value` lines).
    #[arg(long)]
    threat_config: Option<PathBuf>,
    #[arg(long)]
    threat_model: Option<String>,
    #[arg(long)]
    iterations: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    lp_norm: Option<String>,
    #[arg(long)]
    target: Option<String>,
    #[arg(long)]
    severity: Option<String>,
    #[arg(long)]
    eyes: Option<String>,
}

impl ThreatArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        [
            ("threat_model", &self.threat_model),
            ("iterations", &self.iterations),
            ("alpha", &self.alpha),
            ("epsilon", &self.epsilon),
            ("lp_norm", &self.lp_norm),
            ("target", &self.target),
            ("severity", &self.severity),
            ("eyes", &self.eyes),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect()
    }

    fn spec(&self) -> Result<ThreatSpec> {
        let overrides = self.overrides();
        match &self.threat_config {
            Some(path) => bench::parse_threat_config_with(path, &overrides),
            None if overrides.is_empty() => Ok(ThreatSpec::clean()),
            None => Ok(ThreatSpec {
                variant: bench::threat_from_pairs(&overrides, Path::new("."))?,
                source_hash: None,
            }),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Model preset.
    #[arg(long, default_value = "reference")]
    model: String,
    /// Built-in dataset name or manifest path.
    #[arg(long)]
    dataset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Reuse a cached record when one exists.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    retrieve_existing: bool,
    /// per_sample or per_pixel.
    #[arg(long, default_value = "per_sample")]
    weighting: String,
    /// Output directory for reports.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    threat: ThreatArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Directory for adversarial pairs (PFM, plus 8-bit PNG previews).
    #[arg(long)]
    dump_adversarial: Option<PathBuf>,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    kind: String,
    #[arg(long)]
    severity: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image; extension selects png, ppm, pgm or pfm.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// JSON record files (as written by evaluate).
    #[arg(long = "input", num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Report every record in the cache.
    #[arg(long)]
    from_cache: bool,
    #[arg(long, default_value = "csv")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CorrelateArgs {
    /// JSON records for the x axis.
    #[arg(long)]
    x: PathBuf,
    /// JSON records for the y axis.
    #[arg(long)]
    y: PathBuf,
    /// Scatter CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum CacheAction {
    /// One line per cached record.
    List,
    /// Print a record as JSON.
    Show { fingerprint: String },
    /// Delete a record.
    Rm { fingerprint: String },
    /// Print the cache directory.
    Path,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cache = Cache::from_env();
    match cli.command {
        Command::Evaluate(a) => cmd_evaluate(&a.run, cli.jobs, &cache),
        Command::Corrupt(a) => cmd_corrupt(&a),
        Command::Attack(a) => cmd_attack(&a, cli.jobs, &cache),
        Command::Report(a) => cmd_report(&a, &cache),
        Command::Correlate(a) => cmd_correlate(&a),
        Command::Cache { action } => cmd_cache(action, &cache),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn request(run: &RunArgs, jobs: usize) -> Result<EvalRequest> {
    Ok(EvalRequest {
        model_name: run.model.clone(),
        dataset: run.dataset.clone(),
        threat: run.threat.spec()?,
        retrieve_existing: run.retrieve_existing,
        seed: run.seed,
        weighting: run.weighting.parse::<Weighting>()?,
        jobs,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_reports(record: &EvalRecord, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    let records = std::slice::from_ref(record);
    emit_report(records, ReportFormat::Csv, dir.join("report.csv"))?;
    emit_report(records, ReportFormat::Json, dir.join("report.json"))?;
    println!("report_csv={}", dir.join("report.csv").display());
    println!("report_json={}", dir.join("report.json").display());
    Ok(())
}

fn cmd_evaluate(run: &RunArgs, jobs: usize, cache: &Cache) -> Result<()> {
    let req = request(run, jobs)?;
    let eval = bench::evaluate(&req, cache)?;
    let r = &eval.record;
    eprintln!(
        "{} {} on {}: {} ({:.2}s)",
        if eval.cached { "retrieved" } else { "evaluated" },
        r.input.model,
        r.input.dataset,
        r.input.threat.label(),
        r.runtime_seconds
    );
    println!("fingerprint={}", r.fingerprint);
    println!("cached={}", eval.cached);
    if let EvalResult::Corruption { per_kind, .. } = &r.result {
        for (kind, s) in per_kind {
            println!("mean_epe.{kind}={}", s.mean_epe);
        }
    }
    write_reports(r, &run.out)?;
    println!("mean_epe={}", r.mean_epe());
    Ok(())
}

fn cmd_corrupt(a: &CorruptArgs) -> Result<()> {
    let kind: CorruptionKind = a.kind.parse()?;
    let spec = CorruptionSpec::new(kind, a.severity, a.seed)?;
    let img = read_image(&a.input)?;
    let out = apply_corruption(&img, &spec)?;
    write_image(&a.out, &out)?;
    println!("out={}", a.out.display());
    println!("kind={kind}");
    println!("severity={}", a.severity);
    println!("psnr={}", psnr(&img, &out)?);
    Ok(())
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn cmd_attack(a: &AttackArgs, jobs: usize, cache: &Cache) -> Result<()> {
    let req = request(&a.run, jobs)?;
    let Threat::Attack(settings) = &req.threat.variant else {
        return Err(Error::Config(format!(
            "attack needs an attack threat_model (FGSM, BIM, PGD, APGD, CosPGD), got {}",
            req.threat.variant.label()
        )));
    };
    let eval = bench::evaluate(&req, cache)?;
    let EvalResult::Attack {
        clean,
        adversarial,
        per_sample,
    } = &eval.record.result
    else {
        return Err(Error::State("cached record is not an attack result".into()));
    };
    write_reports(&eval.record, &a.run.out)?;
    let per_sample_csv = a.run.out.join("attack_samples.csv");
    write_csv(per_sample, &per_sample_csv)?;
    println!("per_sample_csv={}", per_sample_csv.display());

    if let Some(dir) = &a.dump_adversarial {
        create_dir(dir)?;
        let model = resolve_model(&req.model_name)?;
        let dataset = resolve_dataset(&req.dataset)?;
        let outcomes = bench::with_pool(jobs, || attack_samples(&model, &dataset.samples, settings, req.seed))?;
        for o in &outcomes {
            let stem = sanitize(&o.adversarial.id);
            for (eye, img) in [("left", &o.adversarial.left), ("right", &o.adversarial.right)] {
                let pfm = dir.join(format!("{stem}_{eye}.pfm"));
                std::fs::write(&pfm, write_pfm(&PfmImage::from(img))?).map_err(|e| Error::Io {
                    path: pfm.clone(),
                    source: e,
                })?;
                write_image(dir.join(format!("{stem}_{eye}.png")), img)?;
            }
        }
        println!("dumped={}", outcomes.len());
    }
    let max = |f: fn(&bench::AttackSampleStats) -> f64| per_sample.iter().map(f).fold(0.0, f64::max);
    println!("fingerprint={}", eval.record.fingerprint);
    println!("n_samples={}", per_sample.len());
    println!("clean_mean_epe={}", clean.mean_epe);
    println!("max_linf={}", max(|s| s.linf_left.max(s.linf_right)));
    println!("max_l2={}", max(|s| s.l2_left.max(s.l2_right)));
    println!("mean_epe={}", adversarial.mean_epe);
    Ok(())
}

fn cmd_report(a: &ReportArgs, cache: &Cache) -> Result<()> {
    let format: ReportFormat = a.format.parse()?;
    let mut records = Vec::new();
    for p in &a.inputs {
        records.extend(read_json_report(p)?);
    }
    if a.from_cache {
        records.extend(cache.list()?);
    }
    emit_report(&records, format, &a.out)?;
    println!("records={}", records.len());
    println!("out={}", a.out.display());
    Ok(())
}

fn cmd_correlate(a: &CorrelateArgs) -> Result<()> {
    let c = correlate(&read_json_report(&a.x)?, &read_json_report(&a.y)?, Some(&a.out))?;
    println!("points={}", c.points.len());
    println!("pearson_r={}", c.r);
    println!("out={}", a.out.display());
    Ok(())
}

fn cmd_cache(action: CacheAction, cache: &Cache) -> Result<()> {
    match action {
        CacheAction::List => {
            for r in cache.list()? {
                println!(
                    "fingerprint={} model={} dataset={} threat={} seed={} mean_epe={} created_at={}",
                    r.fingerprint,
                    r.input.model,
                    r.input.dataset,
                    r.input.threat.label(),
                    r.input.seed,
                    r.mean_epe(),
                    r.created_at.to_rfc3339()
                );
            }
        }
        CacheAction::Show { fingerprint } => {
            let r = cache
                .lookup(&fingerprint)?
                .ok_or_else(|| Error::Config(format!("no cached record {fingerprint}")))?;
            println!("{}", serde_json::to_string_pretty(&r).map_err(|e| Error::Encode(e.to_string()))?);
        }
        CacheAction::Rm { fingerprint } => {
            println!("removed={}", cache.remove(&fingerprint)?);
        }
        CacheAction::Path => println!("cache_dir={}", cache.dir().display()),
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    if !BUILTIN_DATASETS.iter().any(|b| b.0 == a.dataset) {
        return Err(Error::Config(format!("unknown built-in dataset {:?}", a.dataset)));
    }
    let data = resolve_dataset(&a.dataset)?;
    create_dir(&a.out)?;
    let mut manifest = String::new();
    for s in &data.samples {
        let stem = sanitize(&s.id);
        write_image(a.out.join(format!("{stem}_left.png")), &s.left)?;
        write_image(a.out.join(format!("{stem}_right.png")), &s.right)?;
        let gt = a.out.join(format!("{stem}_gt.pfm"));
        std::fs::write(&gt, write_pfm(&PfmImage::from(&s.gt))?).map_err(|e| Error::Io {
            path: gt.clone(),
            source: e,
        })?;
        manifest += &format!("{stem}_left.png,{stem}_right.png,{stem}_gt.pfm,pfm\n");
    }
    let path = a.out.join(format!("{}.txt", a.dataset));
    std::fs::write(&path, manifest).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    println!("manifest={}", path.display());
    println!("n_samples={}", data.samples.len());
    Ok(())
}
