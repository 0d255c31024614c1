//! moelab: plan, run, and inspect FLOP-matched MoE training sweeps.

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use moelab_core::config::{
    arch_from_table, canonical_toml, count_params, parse_arch_spec, spec_hash, token_budget,
    validate_flop_match, FlopMatch, Granularity, MoELayerSpec, ModelArchSpec, Rational,
};
use moelab_core::harness::{
    emit_plots_data, eval_checkpoint, expand_grid, run_sweep, CorpusSpec, GeneratorKind,
    GridKind, GridParams, RunStatus, SweepManifest, SweepOptions,
};
use moelab_core::train::{Precision, TrainConfig};

#[derive(Parser)]
#[command(name = "moelab", version, about = "Desk-scale MoE language-model sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand a configuration grid into a sweep manifest.
    Plan(PlanArgs),
    /// Execute a sweep manifest.
    Run(RunArgs),
    /// Recompute held-out macro-average CE from a run's checkpoint.
    Eval(EvalArgs),
    /// Emit the fixed-n / fixed-g / fixed-s plot CSVs from a summary.
    Export(ExportArgs),
    /// Print parameter counts for an architecture spec file.
    CountParams(SpecFileArgs),
    /// Check the FLOP-matching identity for an architecture spec file.
    Validate(SpecFileArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Homogeneous,
    Heterogeneous,
    GeneralistAugmented,
    LbAblation,
    RoutingAblation,
    DenseGranular,
}

impl From<GridArg> for GridKind {
    fn from(g: GridArg) -> GridKind {
        match g {
            GridArg::Homogeneous => GridKind::Homogeneous,
            GridArg::Heterogeneous => GridKind::Heterogeneous,
            GridArg::GeneralistAugmented => GridKind::GeneralistAugmented,
            GridArg::LbAblation => GridKind::LbAblation,
            GridArg::RoutingAblation => GridKind::RoutingAblation,
            GridArg::DenseGranular => GridKind::DenseGranular,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKindArg {
    MarkovChain,
    TemplateGrammar,
    MixtureOfDomains,
}

impl From<CorpusKindArg> for GeneratorKind {
    fn from(k: CorpusKindArg) -> GeneratorKind {
        match k {
            CorpusKindArg::MarkovChain => GeneratorKind::MarkovChain,
            CorpusKindArg::TemplateGrammar => GeneratorKind::TemplateGrammar,
            CorpusKindArg::MixtureOfDomains => GeneratorKind::MixtureOfDomains,
        }
    }
}

#[derive(Args)]
struct PlanArgs {
    /// Sweep name; also names the default output directory.
    #[arg(long, default_value = "sweep")]
    name: String,
    /// Grid to expand.
    #[arg(long, value_enum)]
    grid: GridArg,
    /// Architecture row: 10M, 20M, 50M, 80M, 110M, 200M, or 300M.
    #[arg(long, default_value = "10M")]
    arch: String,
    /// Override (layers, model_dim, heads) as L,D,H for a custom model.
    #[arg(long, value_name = "L,D,H")]
    custom_arch: Option<String>,
    /// Vocabulary size shared by the model and the synthetic corpus.
    #[arg(long, default_value_t = 256)]
    vocab: u64,
    /// Largest total expert count to sweep.
    #[arg(long, default_value_t = 64)]
    n_max: u64,
    /// Largest activation sparsity to sweep (rational, e.g. "8").
    #[arg(long, default_value = "8")]
    s_max: Rational,
    /// Append the dense baseline as an extra run.
    #[arg(long)]
    include_dense_baseline: bool,

    /// Use paper-scale batch 512 x seq 2048 instead of desk scale 32 x 128.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seq_len: Option<usize>,
    /// Explicit token budget; otherwise see --steps / --token-multiplier.
    #[arg(long)]
    total_tokens: Option<u64>,
    /// Token budget expressed in optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Tokens per active parameter when no explicit budget is given.
    #[arg(long, default_value = "20")]
    token_multiplier: Rational,
    /// Train in f64 instead of f32.
    #[arg(long)]
    f64: bool,
    /// Default run seed.
    #[arg(long, env = "MOELAB_SEED", default_value_t = 0)]
    seed: u64,

    #[arg(long, value_enum, default_value = "markov-chain")]
    corpus_kind: CorpusKindArg,
    /// Number of synthetic domains.
    #[arg(long, default_value_t = 4)]
    domains: usize,
    /// Zipf exponent of the per-domain token marginals.
    #[arg(long, default_value_t = 1.0)]
    skew: f64,
    /// Held-out sequences per domain for evaluation.
    #[arg(long, default_value_t = 16)]
    eval_seqs: usize,

    /// Output root for run directories.
    #[arg(long, env = "MOELAB_OUT")]
    out: Option<PathBuf>,
    /// Where to write the manifest.
    #[arg(short, long, default_value = "manifest.toml")]
    output: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Manifest produced by `plan`.
    manifest: PathBuf,
    /// Concurrent worker runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Skip runs that already completed (this is also the default).
    #[arg(long)]
    resume: bool,
    /// Re-execute runs even when a completed summary exists.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// A run directory containing spec.toml, run_config.toml, checkpoint.bin.
    run_dir: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// summary.json written by `run`.
    #[arg(long)]
    summary: PathBuf,
    /// Directory for the three pivot CSVs.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SpecFileArgs {
    /// Architecture spec file (TOML).
    #[arg(long)]
    spec: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Plan(args) => plan(args),
        Command::Run(args) => run(args),
        Command::Eval(args) => eval(args),
        Command::Export(args) => export(args),
        Command::CountParams(args) => count(args),
        Command::Validate(args) => validate(args),
    }
}

fn base_arch(args: &PlanArgs, layer: MoELayerSpec) -> Result<ModelArchSpec> {
    if let Some(custom) = &args.custom_arch {
        let parts: Vec<u64> = custom
            .split(',')
            .map(|p| p.trim().parse::<u64>())
            .collect::<Result<_, _>>()
            .context("--custom-arch expects L,D,H")?;
        if parts.len() != 3 {
            bail!("--custom-arch expects exactly L,D,H");
        }
        return Ok(ModelArchSpec::new(
            format!("custom-{}x{}", parts[0], parts[1]),
            parts[0],
            parts[1],
            parts[2],
            args.vocab,
            layer,
        ));
    }
    Ok(arch_from_table(&args.arch, args.vocab, layer)?)
}

fn plan(args: PlanArgs) -> Result<()> {
    let mut params = GridParams::default();
    params.n_values.retain(|&n| n <= args.n_max);
    params.s_max = args.s_max;

    let layer_specs = expand_grid(args.grid.into(), &params);
    if layer_specs.is_empty() {
        bail!("grid expanded to zero configurations");
    }
    let mut runs = Vec::with_capacity(layer_specs.len() + 1);
    for layer in layer_specs {
        runs.push(base_arch(&args, layer)?);
    }
    if args.include_dense_baseline {
        runs.push(base_arch(&args, MoELayerSpec::dense_baseline())?);
    }

    let mut train = if args.paper_scale {
        TrainConfig::paper()
    } else {
        TrainConfig::desk()
    };
    if let Some(b) = args.batch_size {
        train.batch_size = b;
    }
    if let Some(s) = args.seq_len {
        train.seq_len = s;
    }
    train.seed = args.seed;
    train.precision = if args.f64 { Precision::F64 } else { Precision::F32 };
    train.total_tokens = match (args.total_tokens, args.steps) {
        (Some(t), _) => t,
        (None, Some(steps)) => steps * train.tokens_per_step(),
        (None, None) => {
            let counts = count_params(&runs[0])?;
            token_budget(counts.active_non_embedding, args.token_multiplier)
        }
    };

    let out_dir = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(&args.name));
    let manifest = SweepManifest {
        name: args.name.clone(),
        grid: args.grid.into(),
        output_dir: out_dir.to_string_lossy().into_owned(),
        eval_sequences_per_domain: args.eval_seqs,
        train,
        corpus: {
            let mut c = CorpusSpec::new(
                args.corpus_kind.into(),
                u32::try_from(args.vocab).context("vocab too large for corpus")?,
                args.domains,
                args.seed,
            );
            c.skew = args.skew;
            c
        },
        runs,
    };
    manifest.validate().context("planned manifest is invalid")?;
    fs::write(&args.output, manifest.to_toml()?)?;
    println!(
        "planned {} runs ({} steps each) -> {}",
        manifest.runs.len(),
        manifest.train.total_steps()?,
        args.output.display()
    );
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let text = fs::read_to_string(&args.manifest)
        .with_context(|| format!("reading {}", args.manifest.display()))?;
    let manifest = SweepManifest::from_toml(&text)?;
    let opts = SweepOptions {
        jobs: args.jobs,
        force: args.force,
    };
    let summaries = run_sweep(&manifest, &opts)?;
    let ok = summaries.iter().filter(|s| s.status == RunStatus::Ok).count();
    let failed = summaries.len() - ok;
    for s in &summaries {
        let ce = s
            .final_macro_ce
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".to_string());
        println!(
            "{:8} s={:<6} n={:<9} ce={} [{}]",
            s.arch,
            s.s_exact,
            s.pools
                .iter()
                .map(|p| p.n.to_string())
                .collect::<Vec<_>>()
                .join("+"),
            ce,
            match s.status {
                RunStatus::Ok => "ok",
                RunStatus::Failed => "FAILED",
            }
        );
    }
    println!(
        "{ok} ok, {failed} failed; table under {}",
        manifest.output_dir
    );
    if failed > 0 {
        std::process::exit(2);
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let (macro_ce, domains) = eval_checkpoint(&args.run_dir)?;
    for d in &domains {
        println!("{:20} {:.6}", d.domain, d.ce);
    }
    println!("macro-average CE    {macro_ce:.6}");
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let text = fs::read_to_string(&args.summary)
        .with_context(|| format!("reading {}", args.summary.display()))?;
    let summaries = serde_json::from_str(&text).context("parsing summary.json")?;
    emit_plots_data(&args.out_dir, &summaries)?;
    println!(
        "wrote fixed_n.csv, fixed_g.csv, fixed_s.csv under {}",
        args.out_dir.display()
    );
    Ok(())
}

fn count(args: SpecFileArgs) -> Result<()> {
    let arch = parse_arch_spec(&fs::read_to_string(&args.spec)?)?;
    let c = count_params(&arch)?;
    println!("spec hash            {}", spec_hash(&arch));
    println!("activation sparsity  {}", arch.layer_spec.activation_sparsity());
    println!("active non-embedding {}", c.active_non_embedding);
    println!("total non-embedding  {}", c.total_non_embedding);
    println!("router params        {}", c.router_params);
    println!("embedding params     {}", c.embedding_params);
    Ok(())
}

fn validate(args: SpecFileArgs) -> Result<()> {
    let arch = parse_arch_spec(&fs::read_to_string(&args.spec)?)?;
    match validate_flop_match(&arch.layer_spec) {
        FlopMatch::Ok => {
            println!(
                "ok: g_gen + sum(k_i * g_i) = 1 exactly (s = {})",
                arch.layer_spec.activation_sparsity()
            );
            Ok(())
        }
        FlopMatch::Violation { sum, detail } => {
            eprintln!("violation: {detail} (sum = {sum})");
            std::process::exit(1);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_structure_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn grid_names_parse() {
        for g in [
            "homogeneous",
            "heterogeneous",
            "generalist-augmented",
            "lb-ablation",
            "routing-ablation",
            "dense-granular",
        ] {
            assert!(GridArg::from_str(g, true).is_ok(), "{g}");
        }
    }
}
