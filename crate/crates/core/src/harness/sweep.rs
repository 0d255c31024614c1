//! Sweep planning and resumable execution.
//!
//! A manifest expands a configuration grid into fully specified runs.
//! Each run gets its own directory keyed by a hash of (canonical arch
//! spec, train config, corpus spec); completed runs are skipped unless
//! forced, so interrupted sweeps resume to the same final table.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{
    canonical_toml, enumerate_generalist_grid, enumerate_heterogeneous_grid,
    enumerate_homogeneous_grid, paper_granularities, paper_pool_sizes, spec_hash,
    DenseGranularMode, Granularity, MoELayerSpec, ModelArchSpec, Rational, RoutingPolicy,
    PAPER_SPARSITY_MAX,
};
use crate::model::{load_checkpoint, restore_checkpoint, save_checkpoint, TransformerLM};
use crate::tensor::Element;
use crate::train::{
    macro_eval, train_run, DomainCe, EvalSet, MetricsHeader, MetricsRecord, Precision,
    TrainConfig,
};

use super::corpus::{Corpus, CorpusSpec};
use super::export::{emit_long_csv, write_summary_csv};
use super::HarnessError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridKind {
    Homogeneous,
    Heterogeneous,
    GeneralistAugmented,
    LbAblation,
    RoutingAblation,
    /// s = 1 always-active ablation (equal-weight and pseudo-router modes).
    DenseGranular,
    /// No grid: the manifest's runs were listed explicitly.
    Custom,
}

/// Ranges a grid draws from.
#[derive(Clone, Debug)]
pub struct GridParams {
    pub n_values: Vec<u64>,
    pub g_values: Vec<Granularity>,
    pub s_max: Rational,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams {
            n_values: paper_pool_sizes(),
            g_values: paper_granularities(),
            s_max: Rational::from_int(PAPER_SPARSITY_MAX),
        }
    }
}

/// Expands a grid kind into layer specs.
pub fn expand_grid(kind: GridKind, params: &GridParams) -> Vec<MoELayerSpec> {
    match kind {
        GridKind::Homogeneous => {
            enumerate_homogeneous_grid(&params.n_values, &params.g_values, params.s_max)
        }
        GridKind::Heterogeneous => enumerate_heterogeneous_grid(),
        GridKind::GeneralistAugmented => enumerate_generalist_grid(
            &params.n_values,
            &params.g_values,
            &[
                Granularity::unit(2).expect("1/2"),
                Granularity::unit(4).expect("1/4"),
                Granularity::unit(8).expect("1/8"),
            ],
            params.s_max,
        ),
        GridKind::LbAblation => {
            let base = enumerate_homogeneous_grid(&params.n_values, &params.g_values, params.s_max);
            let cells = [(1e-2, 0.0), (1e-2, 1e-3), (1e-4, 0.0), (1e-4, 1e-3)];
            base.into_iter()
                .flat_map(|spec| {
                    cells.iter().map(move |&(lb, gamma)| {
                        let mut s = spec.clone();
                        s.lb_weight = lb;
                        s.bias_step = gamma;
                        s
                    })
                })
                .collect()
        }
        GridKind::RoutingAblation => {
            let base = enumerate_homogeneous_grid(&params.n_values, &params.g_values, params.s_max);
            let policies = [
                RoutingPolicy::Dropless,
                RoutingPolicy::Capacity {
                    factor: Rational::from_int(2),
                },
            ];
            base.into_iter()
                .flat_map(|spec| {
                    policies.iter().map(move |&routing| {
                        let mut s = spec.clone();
                        s.routing = routing;
                        s
                    })
                })
                .collect()
        }
        GridKind::DenseGranular => {
            let base =
                enumerate_homogeneous_grid(&params.n_values, &params.g_values, Rational::ONE);
            let modes = [DenseGranularMode::EqualWeight, DenseGranularMode::PseudoRouter];
            base.into_iter()
                .filter(|s| s.activation_sparsity().is_one())
                .flat_map(|spec| {
                    modes.iter().map(move |&mode| {
                        let mut s = spec.clone();
                        s.dense_granular_mode = mode;
                        s
                    })
                })
                .collect()
        }
        GridKind::Custom => Vec::new(),
    }
}

/// A planned sweep: expanded run list plus everything shared across runs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepManifest {
    pub name: String,
    pub grid: GridKind,
    pub output_dir: String,
    pub eval_sequences_per_domain: usize,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    #[serde(rename = "run")]
    pub runs: Vec<ModelArchSpec>,
}

impl SweepManifest {
    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Serialize(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let manifest: SweepManifest =
            toml::from_str(text).map_err(|e| HarnessError::Manifest(e.to_string()))?;
        manifest.validate()?;
        Ok(manifest)
    }

    /// Every run must be a valid architecture, and every run must satisfy
    /// the FLOP-match identity except explicitly flagged dense-granular
    /// (s = 1) runs.
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs.is_empty() {
            return Err(HarnessError::Manifest("no runs".to_string()));
        }
        for arch in &self.runs {
            arch.validate()?;
            let layer = &arch.layer_spec;
            if layer.dense_granular_mode == DenseGranularMode::Off {
                let check = crate::config::validate_flop_match(layer);
                if !check.is_ok() {
                    return Err(HarnessError::Manifest(format!(
                        "run {} is not FLOP-matched: {check:?}",
                        arch.name
                    )));
                }
            }
        }
        self.train
            .total_steps()
            .map_err(|e| HarnessError::Manifest(e.to_string()))?;
        Ok(())
    }
}

/// Identity of one run: canonical arch spec + train config + corpus spec.
pub fn run_hash(arch: &ModelArchSpec, train: &TrainConfig, corpus: &CorpusSpec) -> String {
    let mut hasher = Sha256::new();
    hasher.update(canonical_toml(arch).as_bytes());
    hasher.update(b"\n--train--\n");
    hasher.update(toml::to_string(train).expect("train config serializes").as_bytes());
    hasher.update(b"\n--corpus--\n");
    hasher.update(toml::to_string(corpus).expect("corpus spec serializes").as_bytes());
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoolDesc {
    pub n: u64,
    pub g: String,
}

/// One row of the sweep summary table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_hash: String,
    pub arch: String,
    /// Activation sparsity, exact string and numeric (dyadic, so exact in f64).
    pub s_exact: String,
    pub s: f64,
    pub pools: Vec<PoolDesc>,
    pub g_gen: String,
    pub lb_weight: f64,
    pub z_weight: f64,
    pub bias_step: f64,
    pub routing: String,
    pub dense_granular_mode: String,
    pub seed: u64,
    pub steps: u64,
    pub status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
    /// Macro-averaged held-out CE from the final metrics record.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_macro_ce: Option<f64>,
    /// Mean over the last (up to) 50 steps of the per-layer mean imbalance.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub final_imbalance: Option<f64>,
    pub wall_clock_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint_sha: Option<String>,
}

impl RunSummary {
    /// Total experts across pools; `None` for a pool-free (dense) run.
    pub fn total_experts(&self) -> Option<u64> {
        if self.pools.is_empty() {
            None
        } else {
            Some(self.pools.iter().map(|p| p.n).sum())
        }
    }

    /// The single-pool expert count, when exactly one pool exists.
    pub fn single_n(&self) -> Option<u64> {
        (self.pools.len() == 1).then(|| self.pools[0].n)
    }

    /// The single-pool granularity, when exactly one pool exists.
    pub fn single_g(&self) -> Option<&str> {
        (self.pools.len() == 1).then(|| self.pools[0].g.as_str())
    }
}

fn summary_skeleton(arch: &ModelArchSpec, train: &TrainConfig, hash: &str, steps: u64) -> RunSummary {
    let layer = &arch.layer_spec;
    let s = layer.activation_sparsity();
    RunSummary {
        run_hash: hash.to_string(),
        arch: arch.name.clone(),
        s_exact: s.to_string(),
        s: s.to_f64(),
        pools: layer
            .pools
            .iter()
            .map(|p| PoolDesc {
                n: p.total,
                g: p.granularity.to_string(),
            })
            .collect(),
        g_gen: layer.generalist.to_string(),
        lb_weight: layer.lb_weight,
        z_weight: layer.z_weight,
        bias_step: layer.bias_step,
        routing: layer.routing.label(),
        dense_granular_mode: match layer.dense_granular_mode {
            DenseGranularMode::Off => "off",
            DenseGranularMode::EqualWeight => "equal_weight",
            DenseGranularMode::PseudoRouter => "pseudo_router",
        }
        .to_string(),
        seed: train.seed,
        steps,
        status: RunStatus::Failed,
        error: None,
        final_macro_ce: None,
        final_imbalance: None,
        wall_clock_secs: 0.0,
        checkpoint_sha: None,
    }
}

/// Shared per-run config written into each run directory (enough to
/// reconstruct the run together with spec.toml).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub eval_sequences_per_domain: usize,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
}

pub struct SweepOptions {
    pub jobs: usize,
    /// Rerun runs that already have a completed summary.
    pub force: bool,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            jobs: 1,
            force: false,
        }
    }
}

/// Executes every run in the manifest, skipping completed ones unless
/// forced. Failed runs are recorded and the sweep continues. Returns the
/// summary table sorted by (s, total experts) and writes `summary.csv`,
/// `summary.json`, and the long-format `long.csv` under the output dir.
pub fn run_sweep(
    manifest: &SweepManifest,
    opts: &SweepOptions,
) -> Result<Vec<RunSummary>, HarnessError> {
    manifest.validate()?;
    let out_root = PathBuf::from(&manifest.output_dir);
    fs::create_dir_all(&out_root)?;
    let corpus = Corpus::generate(&manifest.corpus)?;
    let steps = manifest
        .train
        .total_steps()
        .map_err(|e| HarnessError::Manifest(e.to_string()))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, RunSummary)>> = Mutex::new(Vec::new());
    let jobs = opts.jobs.max(1).min(manifest.runs.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= manifest.runs.len() {
                    break;
                }
                let arch = &manifest.runs[i];
                let hash = run_hash(arch, &manifest.train, &manifest.corpus);
                let dir = out_root.join(format!("{}-{}", arch.name, &hash[..12]));
                let summary = run_one(manifest, arch, &corpus, &hash, &dir, steps, opts.force);
                results.lock().unwrap().push((i, summary));
            });
        }
    });

    let mut rows: Vec<(usize, RunSummary)> = results.into_inner().unwrap();
    rows.sort_by_key(|(i, _)| *i);
    let mut summaries: Vec<RunSummary> = rows.into_iter().map(|(_, s)| s).collect();
    summaries.sort_by(|a, b| {
        a.s.total_cmp(&b.s)
            .then_with(|| a.total_experts().cmp(&b.total_experts()))
            .then_with(|| a.g_gen.cmp(&b.g_gen))
            .then_with(|| a.lb_weight.total_cmp(&b.lb_weight))
            .then_with(|| a.bias_step.total_cmp(&b.bias_step))
            .then_with(|| a.routing.cmp(&b.routing))
            .then_with(|| a.dense_granular_mode.cmp(&b.dense_granular_mode))
    });

    let json = serde_json::to_string_pretty(&summaries)
        .map_err(|e| HarnessError::Serialize(e.to_string()))?;
    fs::write(out_root.join("summary.json"), json)?;
    write_summary_csv(&out_root.join("summary.csv"), &summaries)?;
    emit_long_csv(&out_root.join("long.csv"), &summaries)?;
    Ok(summaries)
}

fn run_one(
    manifest: &SweepManifest,
    arch: &ModelArchSpec,
    corpus: &Corpus,
    hash: &str,
    dir: &Path,
    steps: u64,
    force: bool,
) -> RunSummary {
    let summary_path = dir.join("summary.json");
    if !force {
        if let Ok(text) = fs::read_to_string(&summary_path) {
            if let Ok(existing) = serde_json::from_str::<RunSummary>(&text) {
                if existing.status == RunStatus::Ok {
                    return existing;
                }
            }
        }
    }
    let mut summary = summary_skeleton(arch, &manifest.train, hash, steps);
    let started = Instant::now();
    let outcome = match manifest.train.precision {
        Precision::F32 => execute_run::<f32>(manifest, arch, corpus, dir),
        Precision::F64 => execute_run::<f64>(manifest, arch, corpus, dir),
    };
    summary.wall_clock_secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok((macro_ce, imbalance, ckpt_sha)) => {
            summary.status = RunStatus::Ok;
            summary.final_macro_ce = macro_ce;
            summary.final_imbalance = imbalance;
            summary.checkpoint_sha = Some(ckpt_sha);
        }
        Err(e) => {
            summary.status = RunStatus::Failed;
            summary.error = Some(e.to_string());
        }
    }
    if let Ok(json) = serde_json::to_string_pretty(&summary) {
        let _ = fs::write(&summary_path, json);
    }
    summary
}

fn execute_run<T: Element>(
    manifest: &SweepManifest,
    arch: &ModelArchSpec,
    corpus: &Corpus,
    dir: &Path,
) -> Result<(Option<f64>, Option<f64>, String), HarnessError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("spec.toml"), canonical_toml(arch))?;
    let run_config = RunConfig {
        eval_sequences_per_domain: manifest.eval_sequences_per_domain,
        train: manifest.train.clone(),
        corpus: manifest.corpus.clone(),
    };
    fs::write(
        dir.join("run_config.toml"),
        toml::to_string(&run_config).map_err(|e| HarnessError::Serialize(e.to_string()))?,
    )?;

    let cfg = &manifest.train;
    let eval = corpus.heldout(cfg.seq_len + 1, manifest.eval_sequences_per_domain);
    let model = TransformerLM::<T>::build(arch, cfg.seq_len, cfg.seed)?;
    let mut stream = corpus.train_stream(cfg.seq_len + 1);

    let metrics_file = fs::File::create(dir.join("metrics.ndjson"))?;
    let mut writer = BufWriter::new(metrics_file);
    serde_json::to_writer(&mut writer, &MetricsHeader::default())
        .map_err(|e| HarnessError::Serialize(e.to_string()))?;
    writer.write_all(b"\n")?;

    let result = train_run(model, &mut stream, cfg, Some(&eval), |record| {
        // Stream each record as it lands; IO errors surface at flush.
        let _ = serde_json::to_writer(&mut writer, record);
        let _ = writer.write_all(b"\n");
    })?;
    writer.flush()?;
    drop(writer);

    let mut ckpt_bytes = Vec::new();
    save_checkpoint(
        &mut ckpt_bytes,
        &spec_hash(arch),
        cfg.seed,
        result.records.len() as u64,
        &result.model.params,
    )?;
    fs::write(dir.join("checkpoint.bin"), &ckpt_bytes)?;
    let ckpt_sha: String = Sha256::digest(&ckpt_bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();

    let macro_ce = result.records.last().and_then(|r| r.eval_macro_ce);
    let imbalance = final_imbalance(&result.records);
    Ok((macro_ce, imbalance, ckpt_sha))
}

/// Mean over the final (up to) 50 records of the per-layer mean imbalance.
pub fn final_imbalance(records: &[MetricsRecord]) -> Option<f64> {
    if records.is_empty() {
        return None;
    }
    let tail = &records[records.len().saturating_sub(50)..];
    let per_record: Vec<f64> = tail
        .iter()
        .map(|r| {
            if r.imbalance_per_layer.is_empty() {
                1.0
            } else {
                r.imbalance_per_layer.iter().sum::<f64>() / r.imbalance_per_layer.len() as f64
            }
        })
        .collect();
    Some(per_record.iter().sum::<f64>() / per_record.len() as f64)
}

/// Recomputes held-out macro CE for a completed run directory from its
/// checkpoint and stored configuration.
pub fn eval_checkpoint(run_dir: &Path) -> Result<(f64, Vec<DomainCe>), HarnessError> {
    let arch = crate::config::parse_arch_spec(&fs::read_to_string(run_dir.join("spec.toml"))?)?;
    let run_config: RunConfig =
        toml::from_str(&fs::read_to_string(run_dir.join("run_config.toml"))?)
            .map_err(|e| HarnessError::Manifest(e.to_string()))?;
    let corpus = Corpus::generate(&run_config.corpus)?;
    let eval = corpus.heldout(
        run_config.train.seq_len + 1,
        run_config.eval_sequences_per_domain,
    );
    match run_config.train.precision {
        Precision::F32 => eval_typed::<f32>(run_dir, &arch, &run_config, &eval),
        Precision::F64 => eval_typed::<f64>(run_dir, &arch, &run_config, &eval),
    }
}

fn eval_typed<T: Element>(
    run_dir: &Path,
    arch: &ModelArchSpec,
    run_config: &RunConfig,
    eval: &EvalSet,
) -> Result<(f64, Vec<DomainCe>), HarnessError> {
    let mut model = TransformerLM::<T>::build(arch, run_config.train.seq_len, run_config.train.seed)?;
    let bytes = fs::read(run_dir.join("checkpoint.bin"))?;
    let data = load_checkpoint::<T, _>(bytes.as_slice())?;
    restore_checkpoint(&mut model.params, &spec_hash(arch), &data)?;
    Ok(macro_eval(&model, eval, run_config.train.batch_size)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::corpus::GeneratorKind;

    fn tiny_manifest(dir: &Path) -> SweepManifest {
        let g = Granularity::unit(2).unwrap();
        let mut train = TrainConfig::desk();
        train.batch_size = 4;
        train.seq_len = 16;
        train.warmup_steps = 2;
        train.total_tokens = 6 * train.tokens_per_step();
        train.seed = 3;
        let runs = vec![
            ModelArchSpec::new("tiny", 1, 16, 2, 64, MoELayerSpec::homogeneous(4, g, 2)),
            ModelArchSpec::new("tiny", 1, 16, 2, 64, MoELayerSpec::dense_baseline()),
        ];
        SweepManifest {
            name: "smoke".to_string(),
            grid: GridKind::Custom,
            output_dir: dir.to_string_lossy().into_owned(),
            eval_sequences_per_domain: 4,
            train,
            corpus: CorpusSpec::new(GeneratorKind::MarkovChain, 64, 2, 5),
            runs,
        }
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!(
            "moelab-sweep-{tag}-{}",
            std::process::id()
        ));
        let _ = fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn manifest_round_trips_and_validates() {
        let dir = temp_dir("manifest");
        let manifest = tiny_manifest(&dir);
        let text = manifest.to_toml().unwrap();
        let back = SweepManifest::from_toml(&text).unwrap();
        assert_eq!(back.runs.len(), 2);
        assert_eq!(back.corpus, manifest.corpus);

        let mut bad = manifest;
        bad.runs[0].layer_spec.pools[0].active = 3; // breaks FLOP match
        assert!(bad.validate().is_err());
    }

    #[test]
    fn grid_expansion_kinds() {
        let params = GridParams {
            n_values: vec![2, 4, 8],
            g_values: vec![Granularity::ONE, Granularity::unit(2).unwrap()],
            s_max: Rational::from_int(4),
        };
        let homo = expand_grid(GridKind::Homogeneous, &params);
        assert!(!homo.is_empty());
        let lb = expand_grid(GridKind::LbAblation, &params);
        assert_eq!(lb.len(), homo.len() * 4);
        // All four (lb_weight, gamma) cells per base point.
        for spec in &homo {
            let cells: Vec<(u64, u64)> = lb
                .iter()
                .filter(|s| s.pools == spec.pools)
                .map(|s| (s.lb_weight.to_bits() as u64, s.bias_step.to_bits() as u64))
                .collect();
            assert_eq!(cells.len(), 4);
        }
        let routing = expand_grid(GridKind::RoutingAblation, &params);
        assert_eq!(routing.len(), homo.len() * 2);
        let dense = expand_grid(GridKind::DenseGranular, &params);
        assert!(dense
            .iter()
            .all(|s| s.activation_sparsity().is_one()
                && s.dense_granular_mode != DenseGranularMode::Off));
        let het = expand_grid(GridKind::Heterogeneous, &GridParams::default());
        assert_eq!(het.len(), 16);
    }

    #[test]
    fn sweep_runs_resume_and_force() {
        let dir = temp_dir("exec");
        let manifest = tiny_manifest(&dir);
        let opts = SweepOptions::default();
        let summaries = run_sweep(&manifest, &opts).unwrap();
        assert_eq!(summaries.len(), 2);
        assert!(summaries.iter().all(|s| s.status == RunStatus::Ok));
        assert!(summaries.iter().all(|s| s.final_macro_ce.is_some()));
        assert!(dir.join("summary.csv").exists());
        assert!(dir.join("long.csv").exists());

        // Idempotent re-run: identical table, no recomputation drift.
        let again = run_sweep(&manifest, &opts).unwrap();
        assert_eq!(
            serde_json::to_string(&summaries).unwrap(),
            serde_json::to_string(&again).unwrap()
        );

        // The run directory is reconstructible.
        let run_dir = dir.join(format!(
            "tiny-{}",
            &run_hash(&manifest.runs[0], &manifest.train, &manifest.corpus)[..12]
        ));
        assert!(run_dir.join("spec.toml").exists());
        assert!(run_dir.join("run_config.toml").exists());
        assert!(run_dir.join("metrics.ndjson").exists());
        assert!(run_dir.join("checkpoint.bin").exists());

        // Recomputed held-out CE agrees with the recorded summary value.
        let (macro_ce, _domains) = eval_checkpoint(&run_dir).unwrap();
        let recorded = summaries
            .iter()
            .find(|s| !s.pools.is_empty())
            .unwrap()
            .final_macro_ce
            .unwrap();
        assert!((macro_ce - recorded).abs() < 1e-9);

        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn run_hash_distinguishes_configs() {
        let dir = temp_dir("hash");
        let manifest = tiny_manifest(&dir);
        let h1 = run_hash(&manifest.runs[0], &manifest.train, &manifest.corpus);
        let h2 = run_hash(&manifest.runs[1], &manifest.train, &manifest.corpus);
        assert_ne!(h1, h2);
        let mut other_train = manifest.train.clone();
        other_train.seed = 99;
        let h3 = run_hash(&manifest.runs[0], &other_train, &manifest.corpus);
        assert_ne!(h1, h3);
    }
}
