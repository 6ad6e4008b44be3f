use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use histotex::gram_lab::{
    matched_mean_for_target_variance, run_experiment, verify_equal_gram, FeatureDistribution,
    SolverOptions,
};
use histotex::imageio::{load_mask, load_rgb, save_rgb};
use histotex::manifest::{manifest_path_for, Backend, FileDigest, RunManifest};
use histotex::selfcheck::{run_selfcheck, Fault};
use histotex::synthesis::{style_transfer, synthesize_texture, LossReport, SynthesisConfig, TransferMasks};
use histotex::{load_network, random_filter_bank, Error, Network64, Tensor64, DESK_TOPOLOGY};

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;
const EXIT_CHECK_FAILED: u8 = 5;

/// Largest `gram-lab` dimension allowed without `--long`.
const SHORT_MAX_DIM: usize = 16;

#[derive(Parser)]
#[command(name = "histotex", version, about = "Texture synthesis and style transfer with histogram losses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a texture from an exemplar image.
    Texture(TextureArgs),
    /// Render a content image in the style of another.
    Transfer(TransferArgs),
    /// Experiments on Gram-matrix ambiguity of mean and variance.
    GramLab(GramLabArgs),
    /// Check analytic gradients and histogram matching numerically.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args)]
struct SynthesisArgs {
    /// JSON configuration, or a manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the white-noise initialization.
    #[arg(long)]
    seed: Option<u64>,
    /// Weight file of the feature extractor (HTXW format).
    #[arg(long, conflicts_with = "backend_seed")]
    weights: Option<PathBuf>,
    /// Seed of the random filter bank used when no weight file is given.
    #[arg(long)]
    backend_seed: Option<u64>,
    /// Write the per-iteration loss report here as JSON lines.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Total iteration budget across all pyramid levels.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    pyramid_levels: Option<usize>,
    /// Output PNG; the manifest is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TextureArgs {
    /// Exemplar image.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Output size as WIDTHxHEIGHT (default: exemplar size).
    #[arg(long, value_parser = parse_size)]
    size: Option<(usize, usize)>,
    #[command(flatten)]
    common: SynthesisArgs,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    content: Option<PathBuf>,
    #[arg(long)]
    style: Option<PathBuf>,
    /// Region mask of the style image (grayscale PNG); requires --out-mask.
    #[arg(long, requires = "out_mask")]
    style_mask: Option<PathBuf>,
    /// Region mask of the output (grayscale PNG); requires --style-mask.
    #[arg(long, requires = "style_mask")]
    out_mask: Option<PathBuf>,
    #[command(flatten)]
    common: SynthesisArgs,
}

#[derive(Args)]
struct GramLabArgs {
    /// Comma-separated feature dimensions.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the one-dimensional grey versus black-and-white example.
    #[arg(long = "fig3")]
    equal_gram_example: bool,
    /// Allow dimensions above 16.
    #[arg(long)]
    long: bool,
}

#[derive(Args)]
struct SelfcheckArgs {
    /// Print machine-readable results.
    #[arg(long)]
    json: bool,
    #[arg(long, hide = true, value_parser = parse_fault)]
    inject_fault: Option<Fault>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
    match (parse(w), parse(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(format!("expected positive WIDTHxHEIGHT, got {s:?}")),
    }
}

fn parse_fault(s: &str) -> Result<Fault, String> {
    match s {
        "gram-sign" => Ok(Fault::GramSign),
        other => Err(format!("unknown fault {other:?}")),
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io { .. } | Error::Image { .. } | Error::Parse(_) => EXIT_IO,
            Error::NumericalAbort(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CliResult<T = ()> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Texture(a) => cmd_texture(a),
        Command::Transfer(a) => cmd_transfer(a),
        Command::GramLab(a) => cmd_gram_lab(a),
        Command::Selfcheck(a) => cmd_selfcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// `HISTOTEX_THREADS` caps the worker pool. Results do not depend on it.
fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var("HISTOTEX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::usage(format!("HISTOTEX_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::usage(format!("cannot size thread pool: {e}")))
}

/// Settings carried over from `--config` when it names a manifest.
struct Resolved {
    config: SynthesisConfig,
    backend: Option<Backend>,
    inputs: BTreeMap<String, FileDigest>,
}

fn read_config(path: Option<&Path>, command: &str) -> CliResult<Resolved> {
    let Some(path) = path else {
        return Ok(Resolved {
            config: SynthesisConfig::default(),
            backend: None,
            inputs: BTreeMap::new(),
        });
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    if value.get("command").is_some() {
        let m: RunManifest = serde_json::from_value(value)
            .map_err(|e| Failure::usage(format!("{}: invalid manifest: {e}", path.display())))?;
        if m.command != command {
            return Err(Failure::usage(format!(
                "manifest is for `{}`, not `{command}`",
                m.command
            )));
        }
        m.verify_inputs()?;
        Ok(Resolved {
            config: m.config,
            backend: Some(m.backend),
            inputs: m.inputs,
        })
    } else {
        let config = serde_json::from_value(value)
            .map_err(|e| Failure::usage(format!("{}: invalid configuration: {e}", path.display())))?;
        Ok(Resolved {
            config,
            backend: None,
            inputs: BTreeMap::new(),
        })
    }
}

fn apply_overrides(cfg: &mut SynthesisConfig, a: &SynthesisArgs) {
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(i) = a.iterations {
        cfg.iterations = i;
    }
    if let Some(l) = a.pyramid_levels {
        cfg.pyramid_levels = l;
    }
}

fn resolve_backend(a: &SynthesisArgs, from_manifest: Option<Backend>) -> CliResult<(Network64, Backend)> {
    let backend = match (&a.weights, a.backend_seed, from_manifest) {
        (Some(path), _, _) => Backend::Weights {
            file: FileDigest::of(path)?,
        },
        (None, Some(seed), _) => Backend::RandomBank {
            seed,
            topology: DESK_TOPOLOGY.to_vec(),
        },
        (None, None, Some(b)) => b,
        (None, None, None) => Backend::RandomBank {
            seed: 0,
            topology: DESK_TOPOLOGY.to_vec(),
        },
    };
    let net = match &backend {
        Backend::Weights { file } => load_network(&file.path)?,
        Backend::RandomBank { seed, topology } => random_filter_bank(*seed, topology)?,
    };
    Ok((net, backend))
}

/// Flag value, else the manifest's recorded input, else a usage error.
fn input_path(
    flag: &Option<PathBuf>,
    role: &str,
    recorded: &BTreeMap<String, FileDigest>,
    flag_name: &str,
) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| recorded.get(role).map(|d| d.path.clone()))
        .ok_or_else(|| Failure::usage(format!("missing required argument {flag_name}")))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn check_output_distinct(out: &Path, inputs: &BTreeMap<String, FileDigest>) -> CliResult {
    let manifest = manifest_path_for(out);
    for d in inputs.values() {
        if same_file(out, &d.path) || same_file(&manifest, &d.path) {
            return Err(Failure::usage(format!(
                "output {} would overwrite input {}",
                out.display(),
                d.path.display()
            )));
        }
    }
    Ok(())
}

fn finish_run(
    command: &str,
    a: &SynthesisArgs,
    cfg: SynthesisConfig,
    backend: Backend,
    inputs: BTreeMap<String, FileDigest>,
    image: &Tensor64,
    report: &LossReport,
) -> CliResult {
    save_rgb(image, &a.out)?;
    if let Some(path) = &a.report {
        report.write_json_lines(path)?;
    }
    let manifest = RunManifest {
        command: command.to_string(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        config: cfg,
        backend,
        inputs,
        output: Some(FileDigest::of(&a.out)?),
    };
    let mpath = manifest_path_for(&a.out);
    manifest.save(&mpath)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(last) = report.rows.last() {
        eprintln!(
            "{command}: {} iterations, final loss {:.6e}; wrote {} and {}",
            report.len(),
            last.total,
            a.out.display(),
            mpath.display()
        );
    }
    Ok(())
}

fn cmd_texture(a: TextureArgs) -> CliResult {
    let common = &a.common;
    let resolved = read_config(common.config.as_deref(), "texture")?;
    let mut cfg = resolved.config;
    apply_overrides(&mut cfg, common);
    let source_path = input_path(&a.source, "source", &resolved.inputs, "--source")?;
    let source: Tensor64 = load_rgb(&source_path)?;
    if let Some((w, h)) = a.size {
        cfg.output_width = Some(w);
        cfg.output_height = Some(h);
    }
    cfg.output_width.get_or_insert(source.width());
    cfg.output_height.get_or_insert(source.height());
    cfg.validate()?;
    let (net, backend) = resolve_backend(common, resolved.backend)?;
    let inputs: BTreeMap<String, FileDigest> = [("source".to_string(), FileDigest::of(&source_path)?)].into();
    check_output_distinct(&common.out, &inputs)?;
    let (image, report) = synthesize_texture(&net, &source, &cfg)?;
    finish_run("texture", common, cfg, backend, inputs, &image, &report)
}

fn cmd_transfer(a: TransferArgs) -> CliResult {
    let common = &a.common;
    let resolved = read_config(common.config.as_deref(), "transfer")?;
    let mut cfg = resolved.config;
    apply_overrides(&mut cfg, common);
    let content_path = input_path(&a.content, "content", &resolved.inputs, "--content")?;
    let style_path = input_path(&a.style, "style", &resolved.inputs, "--style")?;
    let mask_paths = match (&a.style_mask, &a.out_mask) {
        (Some(s), Some(o)) => Some((s.clone(), o.clone())),
        (None, None) => match (resolved.inputs.get("style_mask"), resolved.inputs.get("out_mask")) {
            (Some(s), Some(o)) => Some((s.path.clone(), o.path.clone())),
            _ => None,
        },
        _ => return Err(Failure::usage("--style-mask and --out-mask must be given together")),
    };
    let content: Tensor64 = load_rgb(&content_path)?;
    let style: Tensor64 = load_rgb(&style_path)?;
    let masks = match &mask_paths {
        Some((s, o)) => Some((load_mask(s)?, load_mask(o)?)),
        None => None,
    };
    cfg.output_width.get_or_insert(content.width());
    cfg.output_height.get_or_insert(content.height());
    cfg.validate()?;
    let (net, backend) = resolve_backend(common, resolved.backend)?;
    let mut inputs: BTreeMap<String, FileDigest> = [
        ("content".to_string(), FileDigest::of(&content_path)?),
        ("style".to_string(), FileDigest::of(&style_path)?),
    ]
    .into();
    if let Some((s, o)) = &mask_paths {
        inputs.insert("style_mask".into(), FileDigest::of(s)?);
        inputs.insert("out_mask".into(), FileDigest::of(o)?);
    }
    check_output_distinct(&common.out, &inputs)?;
    let tm = masks.as_ref().map(|(s, o)| TransferMasks { style: s, output: o });
    let (image, report) = style_transfer(&net, &content, &style, &cfg, tm)?;
    finish_run("transfer", common, cfg, backend, inputs, &image, &report)
}

fn print_equal_gram_example() -> CliResult {
    let mu1 = std::f64::consts::FRAC_1_SQRT_2;
    let mu2 = matched_mean_for_target_variance(mu1, 0.0, 0.5)?;
    let grey = FeatureDistribution::scalar(mu1, 0.0);
    let split = FeatureDistribution::scalar(mu2, 0.5);
    let (equal, dev) = verify_equal_gram(&grey, &split, 1e-12)?;
    println!("grey:            mean {mu1:.12}, std 0, second moment {:.12}", mu1 * mu1);
    println!(
        "black and white: mean {mu2:.12}, std 0.5, second moment {:.12}",
        mu2 * mu2 + 0.25
    );
    println!("equal normalized Gram: {equal} (deviation {dev:.3e})");
    Ok(())
}

fn cmd_gram_lab(a: GramLabArgs) -> CliResult {
    if a.equal_gram_example {
        print_equal_gram_example()?;
        if a.dims.is_none() {
            return Ok(());
        }
    }
    let dims = a.dims.unwrap_or_else(|| vec![1, 2, 4, 8, 16]);
    if dims.is_empty() || dims.contains(&0) {
        return Err(Failure::usage("--dims needs positive dimensions"));
    }
    if !a.long {
        if let Some(&d) = dims.iter().find(|&&d| d > SHORT_MAX_DIM) {
            return Err(Failure::usage(format!(
                "dimension {d} exceeds {SHORT_MAX_DIM}; pass --long to allow it"
            )));
        }
    }
    if a.instances == 0 {
        return Err(Failure::usage("--instances must be at least 1"));
    }
    let report = run_experiment(&dims, a.instances, a.seed, &SolverOptions::default())?;
    for s in &report.summary {
        eprintln!(
            "m={:>3}: solved {:>4}/{} (certified feasible {}, infeasible {}), max residual {:.3e}",
            s.m, s.successes, s.instances, s.certified_feasible, s.certified_infeasible, s.max_residual
        );
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::from(Error::from(e)))?;
    match &a.out {
        Some(path) => std::fs::write(path, json + "\n").map_err(|e| Failure::from(Error::Io {
            path: path.clone(),
            source: e,
        }))?,
        None => println!("{json}"),
    }
    Ok(())
}

fn cmd_selfcheck(a: SelfcheckArgs) -> CliResult {
    let report = run_selfcheck(a.inject_fault)?;
    if a.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| Failure::from(Error::from(e)))?
        );
    } else {
        for c in &report.checks {
            println!(
                "{:<36} max error {:.3e} (tolerance {:.0e}, {} cases) {}",
                c.name,
                c.max_error,
                c.tolerance,
                c.cases,
                if c.passed { "PASS" } else { "FAIL" }
            );
        }
    }
    if report.passed {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_CHECK_FAILED,
            message: "self-check failed".into(),
        })
    }
}
