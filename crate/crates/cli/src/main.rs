use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use anonymizer_core::backends::scenario::Scenario;
use anonymizer_core::llm_io::PromptSet;
use anonymizer_core::metrics::evaluate_dirs;
use anonymizer_core::pipeline::{
    read_manifest, ImageStatus, JobSpec, Manifest, Pipeline, PipelineConfig, Provider, Summary,
};

const EXIT_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(name = "anonymizer", version, about = "Two-phase anonymization of street-level images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML or JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output root; each image gets `<out>/<stem>/`.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Images processed in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendMode {
    Mock,
    Http,
}

#[derive(Subcommand)]
enum Command {
    /// Anonymize image files (PNG) or directories of them.
    Run {
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "http")]
        backend: BackendMode,
        /// Scenario file or directory; required with `--backend mock`.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run scenario files end to end against the scripted backends.
    Replay {
        #[arg(required = true)]
        scenarios: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Score predicted masks against ground truth and write CSV.
    Eval {
        /// Flat `<stem>.png` masks or a pipeline output root.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Write here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Print a manifest (file or image output directory).
    Show { path: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

/// `Err` means a configuration or usage problem; per-image outcomes come back
/// as the exit code.
fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Run { inputs, backend, scenario, common } => {
            let cfg = PipelineConfig::load(common.config.as_deref())?;
            let (provider, specs) = match backend {
                BackendMode::Http => {
                    if scenario.is_some() {
                        bail!("--scenario only applies to --backend mock");
                    }
                    if inputs.is_empty() {
                        bail!("no input images given");
                    }
                    let backends = cfg.http_settings().backends().map_err(anyhow::Error::msg)?;
                    (Provider::Http(backends), file_specs(&inputs)?)
                }
                BackendMode::Mock => {
                    let Some(path) = scenario else { bail!("--backend mock requires --scenario") };
                    let scenarios = load_scenarios(&[path])?;
                    let specs = if inputs.is_empty() {
                        scenarios.iter().cloned().map(JobSpec::scenario).collect()
                    } else {
                        file_specs(&inputs)?
                    };
                    (Provider::Mock(scenarios), specs)
                }
            };
            run_batch(cfg, provider, &specs, &common)
        }
        Command::Replay { scenarios, common } => {
            let cfg = PipelineConfig::load(common.config.as_deref())?;
            let scenarios = load_scenarios(&scenarios)?;
            let specs: Vec<JobSpec> = scenarios.iter().cloned().map(JobSpec::scenario).collect();
            run_batch(cfg, Provider::Mock(scenarios), &specs, &common)
        }
        Command::Eval { pred, gt, csv } => {
            let report = evaluate_dirs(&pred, &gt)?;
            let text = report.to_csv();
            match csv {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("cannot write {}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(0)
        }
        Command::Show { path } => {
            let file = if path.is_dir() { path.join("manifest.json") } else { path };
            let m = read_manifest(&file).map_err(anyhow::Error::msg)?;
            print!("{}", render_manifest(&m));
            Ok(0)
        }
    }
}

fn load_scenarios(paths: &[PathBuf]) -> Result<Vec<Arc<Scenario>>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            out.extend(Scenario::load_dir(p)?.into_iter().map(Arc::new));
        } else {
            out.push(Arc::new(Scenario::load(p)?));
        }
    }
    Ok(out)
}

/// Image files as given, plus every PNG directly inside given directories.
fn file_specs(inputs: &[PathBuf]) -> Result<Vec<JobSpec>> {
    let is_png = |p: &Path| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let mut specs = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut files: Vec<PathBuf> = std::fs::read_dir(input)
                .with_context(|| format!("cannot list {}", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_png(p))
                .collect();
            files.sort();
            specs.extend(files.iter().map(|p| JobSpec::file(p)));
        } else if input.is_file() {
            specs.push(JobSpec::file(input));
        } else {
            bail!("input {} does not exist", input.display());
        }
    }
    Ok(specs)
}

fn run_batch(cfg: PipelineConfig, provider: Provider, specs: &[JobSpec], common: &Common) -> Result<u8> {
    std::fs::create_dir_all(&common.out).with_context(|| format!("cannot create {}", common.out.display()))?;
    let prompts = PromptSet::load(cfg.prompts_dir.as_deref())?;
    let pipeline = Pipeline { cfg, prompts, provider, out_root: common.out.clone() };
    let summary = pipeline.run_batch(specs, common.jobs);
    let summary_path = common.out.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)
        .with_context(|| format!("cannot write {}", summary_path.display()))?;
    print!("{}", render_summary(&summary));
    Ok(summary.exit_code() as u8)
}

fn status_word(s: &ImageStatus) -> String {
    match s {
        ImageStatus::Ok => "ok".into(),
        ImageStatus::Flagged => "flagged".into(),
        ImageStatus::Failed(f) => {
            format!("failed:{}", serde_json::to_value(f).unwrap_or_default().as_str().unwrap_or("?"))
        }
    }
}

fn render_summary(s: &Summary) -> String {
    let mut out = String::new();
    if !s.images.is_empty() {
        out.push_str(&format!(
            "{:<28} {:<16} {:>9} {:>5} {:>7}  {}\n",
            "image", "status", "coverage", "iter", "audits", "note"
        ));
    }
    for r in &s.images {
        let (cov, iter, audits) = match &r.manifest {
            Some(m) => (format!("{:.3}%", m.coverage_percent), m.iterations.to_string(), m.audit_attempts.to_string()),
            None => ("-".into(), "-".into(), "-".into()),
        };
        let note = match (&r.error, &r.manifest) {
            (Some(e), _) => e.clone(),
            (None, Some(m)) if m.flags.human_review => format!("human review, {} residual(s)", m.residuals.len()),
            _ => String::new(),
        };
        out.push_str(&format!(
            "{:<28} {:<16} {:>9} {:>5} {:>7}  {note}\n",
            r.stem,
            status_word(&r.status),
            cov,
            iter,
            audits
        ));
    }
    out.push_str(&format!(
        "{} image(s): {} ok, {} flagged, {} failed; mean {:.0} ms/image\n",
        s.images.len(),
        s.ok,
        s.flagged,
        s.failed,
        s.mean_total_ms
    ));
    out
}

fn render_manifest(m: &Manifest) -> String {
    let yes = |b: bool| if b { "yes" } else { "no" };
    let mut out = format!("image          {} ({}x{})\n", m.image, m.width, m.height);
    if let Some(src) = &m.source {
        out.push_str(&format!("source         {src}\n"));
    }
    out.push_str(&format!("coverage       {:.3}% ({} px)\n", m.coverage_percent, m.pii_pixels));
    for (cat, px) in &m.category_pixels {
        out.push_str(&format!("  {cat:<13}{px} px\n"));
    }
    out.push_str(&format!(
        "iterations     {}\naudits         {}\nturns          {}\n",
        m.iterations, m.audit_attempts, m.turns
    ));
    out.push_str(&format!("human review   {}\naborted        {}", yes(m.flags.human_review), yes(m.flags.aborted)));
    if let Some(r) = &m.flags.abort_reason {
        out.push_str(&format!(" ({r})"));
    }
    out.push('\n');
    out.push_str(&format!(
        "timings        phase1 {:.0} ms, phase2 {:.0} ms, agents {:.0} ms, total {:.0} ms\n",
        m.timings.phase1_ms, m.timings.phase2_ms, m.timings.agent_ms, m.timings.total_ms
    ));
    if !m.instances.is_empty() {
        out.push_str(&format!("\n{:<10} {:<28} {:<24} {}\n", "id", "status", "bbox", "description"));
        for i in &m.instances {
            out.push_str(&format!(
                "{:<10} {:<28} {:<24} {}\n",
                i.instance_id.as_deref().unwrap_or("-"),
                i.status.as_str(),
                format!("{:?}", i.bbox.to_array()),
                i.description
            ));
        }
    }
    if !m.residuals.is_empty() {
        out.push_str("\nresiduals\n");
        for r in &m.residuals {
            out.push_str(&format!("  {:?} {}\n", r.bbox.to_array(), r.description));
        }
    }
    out
}
