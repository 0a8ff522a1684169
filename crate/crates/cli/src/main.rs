//! `migs` — pipeline driver for the masked-generation shortcut stack.
//!
//! Every subcommand writes its artifacts under a run directory (config
//! copy, checkpoints, trajectories/, reports/) together with a manifest
//! recording the config hash and effective seed, so any run is
//! reproducible from its directory alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use migs_core::analysis::{
    self, write_matrix_csv, write_pareto_csv, write_svg_heatmap, write_svg_scatter, ParetoRow,
};
use migs_core::basemodel::{train_base, BaseConfig, BaseModel, TrainBaseConfig};
use migs_core::checkpoint::file_sha256;
use migs_core::dataset::{GeneratorKind, SyntheticDataset};
use migs_core::inference::{
    full_step_indices, generate, generate_accelerated, taylor_extrapolate, Accelerator,
    GenerateConfig, RunOptions,
};
use migs_core::migm::{
    unmask_count, MaskSchedule, SamplerConfig, ScheduleKind, TokenSequence, Vocabulary,
};
use migs_core::rng::CounterRng;
use migs_core::shortcut::{ShortcutConfig, ShortcutModel};
use migs_core::tensor::Tensor;
use migs_core::trainer::{train_shortcut, TrainShortcutConfig};
use migs_core::trajectory::{Manifest, TrajectoryRecord};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

const CONFIG_VERSION: u32 = 1;
const OUT_ROOT_ENV: &str = "MIGS_OUT_ROOT";

// ---------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "migs", version, about = "Masked generation with a learned feature-dynamics shortcut")]
struct Cli {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Run directory (default: $MIGS_OUT_ROOT/<subcommand>-seed<seed>-<hash>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the base unmasking model on the synthetic token distribution.
    TrainBase,
    /// Record a trajectory corpus by running seeded generations.
    Record {
        /// Base model checkpoint.
        #[arg(long)]
        base: PathBuf,
    },
    /// Fit the shortcut model on a recorded trajectory corpus.
    TrainShortcut {
        /// Base model checkpoint the corpus was recorded from.
        #[arg(long)]
        base: PathBuf,
        /// Trajectory manifest (TSV) produced by `record`.
        #[arg(long)]
        manifest: PathBuf,
        /// Remove the cross-attention sublayer (ablation).
        #[arg(long)]
        no_cross_attention: bool,
    },
    /// Generate one sample; with --B below --N the run is accelerated.
    Generate {
        #[arg(long)]
        base: PathBuf,
        /// Shortcut checkpoint, required for the shortcut accelerator.
        #[arg(long)]
        shortcut: Option<PathBuf>,
        /// Number of generation steps.
        #[arg(long = "N")]
        n: Option<usize>,
        /// Full-model budget; defaults to N (vanilla).
        #[arg(long = "B")]
        budget: Option<usize>,
        /// shortcut | cache_reuse | taylor1 | taylor2
        #[arg(long)]
        accelerator: Option<String>,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Latency/quality sweep; one Pareto CSV row per (accelerator, B).
    Bench {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        shortcut: PathBuf,
    },
    /// Trajectory and model diagnostics.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
    },
    /// Run the oracle/invariant suite; exits nonzero on any failure.
    Verify,
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    /// Pairwise cosine-similarity structure of recorded trajectories.
    Smoothness {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Local Lipschitz ratios of the feature transition.
    Lipschitz {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Reseed a run mid-schedule and overlay the divergent suffixes.
    Fork {
        #[arg(long)]
        base: PathBuf,
        /// Step at which the sampler is reseeded (2..=N).
        #[arg(long)]
        step: Option<usize>,
        /// Number of reseeded reruns.
        #[arg(long)]
        forks: Option<usize>,
    },
    /// Per-layer consecutive-step feature similarity profile.
    Layers {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Reduce a bench CSV to its quality/latency Pareto frontier.
    Pareto {
        /// pareto.csv emitted by `bench`.
        #[arg(long)]
        bench_csv: PathBuf,
    },
}

// ---------------------------------------------------------------------
// Run configuration (TOML, versioned, unknown keys rejected)
// ---------------------------------------------------------------------

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    /// Schema version; must equal 1.
    version: u32,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    dataset: DatasetSection,
    #[serde(default)]
    base_model: BaseConfig,
    #[serde(default)]
    train_base: TrainBaseConfig,
    #[serde(default)]
    shortcut: ShortcutConfig,
    #[serde(default)]
    train_shortcut: TrainShortcutSection,
    #[serde(default)]
    record: RecordSection,
    #[serde(default)]
    generate: GenerateSection,
    #[serde(default)]
    bench: BenchSection,
    #[serde(default)]
    analyze: AnalyzeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            dataset: DatasetSection::default(),
            base_model: BaseConfig::default(),
            train_base: TrainBaseConfig::default(),
            shortcut: ShortcutConfig::default(),
            train_shortcut: TrainShortcutSection::default(),
            record: RecordSection::default(),
            generate: GenerateSection::default(),
            bench: BenchSection::default(),
            analyze: AnalyzeSection::default(),
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DatasetSection {
    kind: String,
    classes: usize,
    tokens: usize,
    vocab: usize,
    noise: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { kind: "stripes".into(), classes: 4, tokens: 16, vocab: 8, noise: 0.05 }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainShortcutSection {
    steps: usize,
    batch_size: usize,
    lr: f64,
    heldout_frac: f64,
}

impl Default for TrainShortcutSection {
    fn default() -> Self {
        let d = TrainShortcutConfig::default();
        Self { steps: d.steps, batch_size: d.batch_size, lr: d.lr, heldout_frac: d.heldout_frac }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RecordSection {
    runs: usize,
    n: usize,
    schedule: String,
    guidance: f64,
    temperature: f64,
    confidence_noise: f64,
}

impl Default for RecordSection {
    fn default() -> Self {
        Self {
            runs: 512,
            n: 16,
            schedule: "cosine".into(),
            guidance: 0.0,
            temperature: 1.0,
            confidence_noise: 0.0,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenerateSection {
    n: usize,
    budget: Option<usize>,
    accelerator: String,
    schedule: String,
    class: Option<usize>,
    guidance: f64,
    temperature: f64,
    confidence_noise: f64,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            n: 16,
            budget: None,
            accelerator: "shortcut".into(),
            schedule: "cosine".into(),
            class: Some(0),
            guidance: 0.0,
            temperature: 1.0,
            confidence_noise: 0.0,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct BenchSection {
    accelerators: Vec<String>,
    budgets: Vec<usize>,
    n: usize,
    class: usize,
    latency_runs: usize,
    quality_samples: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            accelerators: vec!["shortcut".into(), "cache_reuse".into(), "taylor1".into(), "taylor2".into()],
            budgets: vec![2, 4, 8, 16],
            n: 16,
            class: 0,
            latency_runs: 20,
            quality_samples: 1024,
        }
    }
}

#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AnalyzeSection {
    /// Cap on the number of manifest records loaded for diagnostics.
    max_records: usize,
    fork_step: usize,
    forks: usize,
}

impl Default for AnalyzeSection {
    fn default() -> Self {
        Self { max_records: 64, fork_step: 8, forks: 8 }
    }
}

impl RunConfig {
    fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                cfg.version
            ));
        }
        Ok(cfg)
    }

    fn dataset(&self) -> Result<SyntheticDataset, String> {
        SyntheticDataset::new(
            GeneratorKind::parse(&self.dataset.kind).map_err(|e| e.to_string())?,
            self.dataset.classes,
            self.dataset.tokens,
            Vocabulary::new(self.dataset.vocab),
            self.dataset.noise,
        )
        .map_err(|e| e.to_string())
    }
}

// ---------------------------------------------------------------------
// Run directory and manifest
// ---------------------------------------------------------------------

struct RunDir {
    root: PathBuf,
    config_hash: String,
    artifacts: Vec<String>,
}

impl RunDir {
    fn create(cli: &Cli, subcommand: &str, cfg: &RunConfig) -> Result<Self, String> {
        let config_text =
            toml::to_string_pretty(cfg).map_err(|e| format!("serialize config: {e}"))?;
        let root = match &cli.out {
            Some(p) => p.clone(),
            None => {
                let base = std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".into());
                let digest = short_hash(&config_text);
                PathBuf::from(base).join(format!("{subcommand}-seed{}-{digest}", cfg.seed))
            }
        };
        fs::create_dir_all(root.join("reports"))
            .map_err(|e| format!("create {}: {e}", root.display()))?;
        fs::write(root.join("config.toml"), &config_text)
            .map_err(|e| format!("write config copy: {e}"))?;
        let config_hash =
            hex(&file_sha256(&root.join("config.toml")).map_err(|e| e.to_string())?);
        Ok(Self { root, config_hash, artifacts: vec!["config.toml".into()] })
    }

    fn path(&mut self, relative: &str) -> PathBuf {
        self.artifacts.push(relative.to_string());
        self.root.join(relative)
    }

    fn finish(&self, cli: &Cli, subcommand: &str, seed: u64) -> Result<(), String> {
        let manifest = serde_json::json!({
            "version": CONFIG_VERSION,
            "subcommand": subcommand,
            "seed": seed,
            "workers": cli.workers,
            "config_sha256": self.config_hash,
            "artifacts": self.artifacts,
        });
        fs::write(self.root.join("manifest.json"), format!("{manifest:#}\n"))
            .map_err(|e| format!("write manifest: {e}"))?;
        println!("run directory: {}", self.root.display());
        Ok(())
    }
}

fn short_hash(text: &str) -> String {
    // FNV-1a folded to 8 hex chars; only used to name run directories.
    let mut h = 0xcbf29ce484222325u64;
    for &b in text.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{:08x}", (h >> 32) as u32 ^ h as u32)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------
// Subcommand implementations
// ---------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(w) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(w).build_global() {
            eprintln!("error: worker pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, String> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let seed = cfg.seed;

    match &cli.cmd {
        Cmd::TrainBase => {
            let mut dir = RunDir::create(cli, "train-base", &cfg)?;
            let ds = cfg.dataset()?;
            let mut model = BaseModel::<f32>::new(cfg.base_model.clone(), seed);
            println!("training base model ({} parameters)...", model.num_params());
            let tcfg = TrainBaseConfig { seed, ..cfg.train_base.clone() };
            let ckpt = dir.path("base.mslb");
            let report = train_base(&mut model, &ds, &tcfg, Some(&ckpt)).map_err(|e| e.to_string())?;
            model.save(&ckpt).map_err(|e| e.to_string())?;
            let mut csv = String::from("step,heldout_ce\n");
            for (s, ce) in &report.log {
                csv.push_str(&format!("{s},{ce}\n"));
            }
            fs::write(dir.path("reports/train_base.csv"), csv).map_err(|e| e.to_string())?;
            println!(
                "held-out cross-entropy {:.4} -> {:.4}",
                report.init_heldout_ce, report.final_heldout_ce
            );
            dir.finish(cli, "train-base", seed)?;
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Record { base } => {
            let mut dir = RunDir::create(cli, "record", &cfg)?;
            let model = BaseModel::<f32>::load(base).map_err(|e| e.to_string())?;
            let base_hash = file_sha256(base).map_err(|e| e.to_string())?;
            let rc = &cfg.record;
            let schedule =
                MaskSchedule { kind: ScheduleKind::parse(&rc.schedule).map_err(|e| e.to_string())? };
            let classes = model.config().num_classes;
            fs::create_dir_all(dir.root.join("trajectories")).map_err(|e| e.to_string())?;
            println!("recording {} runs...", rc.runs);

            // Each run owns its RNG stream through its sampler seed.
            let records: Vec<(u64, TrajectoryRecord, Option<TrajectoryRecord>)> = (0..rc.runs as u64)
                .into_par_iter()
                .map(|i| {
                    let run_seed = seed.wrapping_add(i);
                    let gc = GenerateConfig {
                        n: rc.n,
                        class: Some((i % classes as u64) as usize),
                        schedule,
                        sampler: SamplerConfig {
                            seed: run_seed,
                            temperature: rc.temperature,
                            confidence_noise_scale: rc.confidence_noise,
                            guidance_scale: rc.guidance,
                        },
                    };
                    let opts = RunOptions { record: true, base_hash, ..Default::default() };
                    let out = generate(&model, &gc, &opts).map_err(|e| e.to_string())?;
                    Ok((run_seed, out.cond_trajectory.expect("recorded"), out.uncond_trajectory))
                })
                .collect::<Result<_, String>>()?;

            // Manifest entry paths are relative to the manifest itself.
            let mut manifest = Manifest::default();
            for (run_seed, cond, uncond) in &records {
                let name = format!("run-{run_seed:08}-cond.mstrj");
                cond.save(&dir.root.join("trajectories").join(&name)).map_err(|e| e.to_string())?;
                manifest.push(PathBuf::from(name), cond);
                if let Some(u) = uncond {
                    let name = format!("run-{run_seed:08}-uncond.mstrj");
                    u.save(&dir.root.join("trajectories").join(&name)).map_err(|e| e.to_string())?;
                    manifest.push(PathBuf::from(name), u);
                }
            }
            let mpath = dir.path("trajectories/manifest.tsv");
            manifest.save(&mpath).map_err(|e| e.to_string())?;
            println!("{} trajectories recorded", manifest.entries.len());
            dir.finish(cli, "record", seed)?;
            Ok(ExitCode::SUCCESS)
        }

        Cmd::TrainShortcut { base, manifest, no_cross_attention } => {
            let mut dir = RunDir::create(cli, "train-shortcut", &cfg)?;
            let model = BaseModel::<f32>::load(base).map_err(|e| e.to_string())?;
            let base_hash = file_sha256(base).map_err(|e| e.to_string())?;
            let records = Manifest::load(manifest)
                .and_then(|m| m.load_records(manifest))
                .map_err(|e| e.to_string())?;
            let scfg = ShortcutConfig {
                l: model.config().l,
                dim: model.config().dim,
                vocab_size: model.config().vocab_size,
                use_cross_attention: !no_cross_attention,
                ..cfg.shortcut.clone()
            };
            let mut shortcut =
                ShortcutModel::<f32>::new(scfg, &model, base_hash, seed).map_err(|e| e.to_string())?;
            println!(
                "training shortcut ({} parameters, base/shortcut ratio {:.1})...",
                shortcut.num_params(),
                model.num_params() as f64 / shortcut.num_params() as f64
            );
            let tcfg = TrainShortcutConfig {
                steps: cfg.train_shortcut.steps,
                batch_size: cfg.train_shortcut.batch_size,
                lr: cfg.train_shortcut.lr,
                heldout_frac: cfg.train_shortcut.heldout_frac,
                seed,
            };
            let csv = dir.path("reports/train_shortcut.csv");
            let report =
                train_shortcut(&mut shortcut, &records, &tcfg, Some(&csv)).map_err(|e| e.to_string())?;
            shortcut.save(&dir.path("shortcut.mslb")).map_err(|e| e.to_string())?;
            println!(
                "held-out MSE {:.5} -> {:.5} (cache-reuse {:.5}, taylor1 {:.5})",
                report.init_heldout_mse,
                report.final_heldout_mse,
                report.cache_reuse_heldout_mse,
                report.taylor1_heldout_mse
            );
            dir.finish(cli, "train-shortcut", seed)?;
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Generate { base, shortcut, n, budget, accelerator, class, guidance } => {
            let mut dir = RunDir::create(cli, "generate", &cfg)?;
            let model = BaseModel::<f32>::load(base).map_err(|e| e.to_string())?;
            let gs = &cfg.generate;
            let n = n.unwrap_or(gs.n);
            let budget = budget.or(gs.budget).unwrap_or(n);
            let accel_name = accelerator.clone().unwrap_or_else(|| gs.accelerator.clone());
            let accel = if budget >= n {
                Accelerator::None
            } else {
                Accelerator::parse(&accel_name).map_err(|e| e.to_string())?
            };
            let sc = match (accel, shortcut) {
                (Accelerator::Shortcut, Some(p)) => {
                    Some(ShortcutModel::<f32>::load(p).map_err(|e| e.to_string())?)
                }
                (Accelerator::Shortcut, None) => {
                    return Err("the shortcut accelerator needs --shortcut <checkpoint>".into())
                }
                _ => None,
            };
            let gc = GenerateConfig {
                n,
                class: class.or(gs.class),
                schedule: MaskSchedule {
                    kind: ScheduleKind::parse(&gs.schedule).map_err(|e| e.to_string())?,
                },
                sampler: SamplerConfig {
                    seed,
                    temperature: gs.temperature,
                    confidence_noise_scale: gs.confidence_noise,
                    guidance_scale: guidance.unwrap_or(gs.guidance),
                },
            };
            let out = generate_accelerated(&model, sc.as_ref(), accel, budget, &gc, &RunOptions::default())
                .map_err(|e| e.to_string())?;
            let vocab = model.vocabulary();
            println!("{}", out.tokens.to_text_grid(vocab));
            println!("base-model calls: {} of {} steps", out.num_base_calls, n);
            fs::write(dir.path("reports/sample.txt"), out.tokens.to_text_grid(vocab))
                .map_err(|e| e.to_string())?;
            out.tokens
                .write_ppm(vocab, 24, &dir.path("reports/sample.ppm"))
                .map_err(|e| e.to_string())?;
            let mut csv = String::from("step,mode,wall_ns\n");
            for t in &out.trace {
                csv.push_str(&format!("{},{:?},{}\n", t.step, t.mode, t.wall_ns));
            }
            fs::write(dir.path("reports/trace.csv"), csv).map_err(|e| e.to_string())?;
            dir.finish(cli, "generate", seed)?;
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Bench { base, shortcut } => {
            let mut dir = RunDir::create(cli, "bench", &cfg)?;
            let model = BaseModel::<f32>::load(base).map_err(|e| e.to_string())?;
            let sc = ShortcutModel::<f32>::load(shortcut).map_err(|e| e.to_string())?;
            let ds = cfg.dataset()?;
            let bs = &cfg.bench;
            let rows = bench_rows(&model, &sc, &ds, bs, seed)?;
            let csv = dir.path("reports/pareto.csv");
            write_pareto_csv(&rows, &csv).map_err(|e| e.to_string())?;
            println!("config,budget,median_latency_ms,marginal_tv,pair_mae");
            for r in &rows {
                println!(
                    "{},{},{:.3},{:.4},{:.4}",
                    r.config, r.budget, r.median_latency_ms, r.marginal_tv, r.pair_mae
                );
            }
            dir.finish(cli, "bench", seed)?;
            Ok(ExitCode::SUCCESS)
        }

        Cmd::Analyze { what } => analyze(cli, &cfg, what, seed),

        Cmd::Verify => {
            let failures = verify();
            if failures == 0 {
                println!("verify: all checks passed");
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("verify: {failures} check(s) failed");
                Ok(ExitCode::FAILURE)
            }
        }
    }
}

fn bench_rows(
    model: &BaseModel<f32>,
    sc: &ShortcutModel<f32>,
    ds: &SyntheticDataset,
    bs: &BenchSection,
    seed: u64,
) -> Result<Vec<ParetoRow>, String> {
    let gc_for = |s: u64| GenerateConfig {
        n: bs.n,
        class: Some(bs.class),
        schedule: MaskSchedule::cosine(),
        sampler: SamplerConfig { seed: s, ..Default::default() },
    };
    let median = |mut xs: Vec<f64>| {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xs[xs.len() / 2]
    };
    let mut rows = Vec::new();

    // Vanilla reference row, then every configured (accelerator, budget).
    let mut eval = |name: &str, accel: Accelerator, budget: usize| -> Result<(), String> {
        let latencies: Vec<f64> = (0..bs.latency_runs)
            .map(|_| {
                let t = Instant::now();
                generate_accelerated(model, Some(sc), accel, budget, &gc_for(seed), &RunOptions::default())
                    .map(|_| t.elapsed().as_secs_f64() * 1e3)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let samples: Vec<TokenSequence> = (0..bs.quality_samples as u64)
            .into_par_iter()
            .map(|i| {
                generate_accelerated(
                    model,
                    Some(sc),
                    accel,
                    budget,
                    &gc_for(seed.wrapping_add(1 + i)),
                    &RunOptions::default(),
                )
                .map(|o| o.tokens)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let q = analysis::quality(&samples, ds, bs.class).map_err(|e| e.to_string())?;
        rows.push(ParetoRow {
            config: name.to_string(),
            budget,
            median_latency_ms: median(latencies),
            marginal_tv: q.marginal_tv,
            pair_mae: q.pair_mae,
        });
        Ok(())
    };

    eval("vanilla", Accelerator::None, bs.n)?;
    for name in &bs.accelerators {
        let accel = Accelerator::parse(name).map_err(|e| e.to_string())?;
        for &b in &bs.budgets {
            if b >= bs.n {
                continue;
            }
            eval(name, accel, b)?;
        }
    }
    Ok(rows)
}

fn analyze(cli: &Cli, cfg: &RunConfig, what: &AnalyzeCmd, seed: u64) -> Result<ExitCode, String> {
    let load_records = |manifest: &Path| -> Result<Vec<TrajectoryRecord>, String> {
        let mut records = Manifest::load(manifest)
            .and_then(|m| m.load_records(manifest))
            .map_err(|e| e.to_string())?;
        records.truncate(cfg.analyze.max_records);
        if records.is_empty() {
            return Err("manifest holds no trajectories".into());
        }
        Ok(records)
    };

    match what {
        AnalyzeCmd::Smoothness { manifest } => {
            let mut dir = RunDir::create(cli, "analyze-smoothness", cfg)?;
            let report = analysis::smoothness(&load_records(manifest)?).map_err(|e| e.to_string())?;
            write_matrix_csv(&report.matrix, &dir.path("reports/smoothness_matrix.csv"))
                .map_err(|e| e.to_string())?;
            write_svg_heatmap(&report.matrix, &dir.path("reports/smoothness_matrix.svg"))
                .map_err(|e| e.to_string())?;
            write_svg_scatter(&report.pca, &dir.path("reports/trajectory_pca.svg"))
                .map_err(|e| e.to_string())?;
            let mut csv = String::from("step,mean_feature_similarity,tokenwise_similarity\n");
            for (i, (a, b)) in report.consecutive.iter().zip(&report.consecutive_tokenwise).enumerate()
            {
                csv.push_str(&format!("{},{a},{b}\n", i + 1));
            }
            fs::write(dir.path("reports/consecutive_similarity.csv"), csv)
                .map_err(|e| e.to_string())?;
            let mean: f64 =
                report.consecutive.iter().sum::<f64>() / report.consecutive.len().max(1) as f64;
            println!("mean consecutive-step similarity: {mean:.4}");
            dir.finish(cli, "analyze-smoothness", seed)?;
            Ok(ExitCode::SUCCESS)
        }
        AnalyzeCmd::Lipschitz { base, manifest } => {
            let mut dir = RunDir::create(cli, "analyze-lipschitz", cfg)?;
            let model = BaseModel::<f32>::load(base).map_err(|e| e.to_string())?;
            let report = analysis::lipschitz(&load_records(manifest)?, model.token_embedding())
                .map_err(|e| e.to_string())?;
            let mut csv = String::from("du,ddelta,ratio\n");
            for ((du, dd), r) in report.points.iter().zip(&report.ratios) {
                csv.push_str(&format!("{du},{dd},{r}\n"));
            }
            fs::write(dir.path("reports/lipschitz.csv"), csv).map_err(|e| e.to_string())?;
            println!(
                "ratios: mean {:.4}, median {:.4}, cv {:.4} ({} pairs, {} skipped)",
                report.mean,
                report.median,
                report.cv,
                report.ratios.len(),
                report.skipped
            );
            dir.finish(cli, "analyze-lipschitz", seed)?;
            Ok(ExitCode::SUCCESS)
        }
        AnalyzeCmd::Fork { base, step, forks } => {
            let mut dir = RunDir::create(cli, "analyze-fork", cfg)?;
            let model = BaseModel::<f32>::load(base).map_err(|e| e.to_string())?;
            let gs = &cfg.generate;
            let gc = GenerateConfig {
                n: gs.n,
                class: gs.class,
                schedule: MaskSchedule {
                    kind: ScheduleKind::parse(&gs.schedule).map_err(|e| e.to_string())?,
                },
                sampler: SamplerConfig { seed, ..Default::default() },
            };
            let s = step.unwrap_or(cfg.analyze.fork_step);
            let k = forks.unwrap_or(cfg.analyze.forks);
            let report =
                analysis::fork(&model, &gc, s, k, seed.wrapping_add(1)).map_err(|e| e.to_string())?;
            write_svg_scatter(&report.pca, &dir.path("reports/fork_pca.svg"))
                .map_err(|e| e.to_string())?;
            println!(
                "{} forks reseeded at step {s}; max final divergence {:.4}",
                report.forks.len(),
                report.max_final_divergence
            );
            dir.finish(cli, "analyze-fork", seed)?;
            Ok(ExitCode::SUCCESS)
        }
        AnalyzeCmd::Layers { base, manifest } => {
            let mut dir = RunDir::create(cli, "analyze-layers", cfg)?;
            let model = BaseModel::<f32>::load(base).map_err(|e| e.to_string())?;
            let profile = analysis::layer_profile(&model, &load_records(manifest)?)
                .map_err(|e| e.to_string())?;
            let mut csv = String::from("layer,mean,q25,q75\n");
            for (i, ((m, lo), hi)) in
                profile.mean.iter().zip(&profile.q25).zip(&profile.q75).enumerate()
            {
                csv.push_str(&format!("{i},{m},{lo},{hi}\n"));
            }
            fs::write(dir.path("reports/layer_profile.csv"), csv).map_err(|e| e.to_string())?;
            println!("per-layer mean similarity: {:?}", profile.mean);
            dir.finish(cli, "analyze-layers", seed)?;
            Ok(ExitCode::SUCCESS)
        }
        AnalyzeCmd::Pareto { bench_csv } => {
            let mut dir = RunDir::create(cli, "analyze-pareto", cfg)?;
            let text = fs::read_to_string(bench_csv)
                .map_err(|e| format!("cannot read {}: {e}", bench_csv.display()))?;
            let mut rows: Vec<(String, f64, f64)> = Vec::new();
            for line in text.lines().skip(1) {
                let f: Vec<&str> = line.split(',').collect();
                if f.len() < 4 {
                    return Err(format!("malformed bench row: {line}"));
                }
                let label = format!("{} B={}", f[0], f[1]);
                let lat: f64 = f[2].parse().map_err(|e| format!("latency in {line}: {e}"))?;
                let tv: f64 = f[3].parse().map_err(|e| format!("tv in {line}: {e}"))?;
                rows.push((label, lat, tv));
            }
            // A row is on the frontier when nothing is both faster and
            // at least as accurate.
            let mut csv = String::from("config,median_latency_ms,marginal_tv,on_frontier\n");
            for (label, lat, tv) in &rows {
                let dominated = rows
                    .iter()
                    .any(|(_, l2, t2)| l2 < lat && t2 <= tv || l2 <= lat && t2 < tv);
                csv.push_str(&format!("{label},{lat},{tv},{}\n", !dominated));
            }
            fs::write(dir.path("reports/pareto_frontier.csv"), &csv).map_err(|e| e.to_string())?;
            print!("{csv}");
            dir.finish(cli, "analyze-pareto", seed)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

// ---------------------------------------------------------------------
// verify: fast self-contained invariant suite
// ---------------------------------------------------------------------

fn verify() -> usize {
    let mut failures = 0usize;
    let mut check = |name: &str, ok: bool| {
        println!("{name}: {}", if ok { "ok" } else { "FAILED" });
        if !ok {
            failures += 1;
        }
    };

    // Schedule conservation and nonnegativity over a deterministic sweep.
    let mut ok = true;
    let mut rng = CounterRng::new(1);
    for _ in 0..200 {
        let l = 1 + (rng.next_u64() % 64) as usize;
        let n = 1 + (rng.next_u64() % 32) as usize;
        for schedule in [MaskSchedule::cosine(), MaskSchedule::linear()] {
            let total: usize = (1..=n).map(|i| unmask_count(schedule, l, i, n)).sum();
            ok &= total == l;
        }
    }
    check("schedule conservation (200 random L,N)", ok);

    // Full-step plan hand example and shape.
    let plan = full_step_indices(8, 4);
    check("full-step plan 8/4 = [1,3,5,7]", plan.map_or(false, |p| p == [1, 3, 5, 7]));

    // Taylor extrapolation hand examples.
    let h: Vec<Tensor<f64>> = [0.0, 1.0, 3.0].iter().map(|&v| Tensor::scalar(v)).collect();
    let t1 = taylor_extrapolate(&h[1..], 1).map(|t| t.item());
    let t2 = taylor_extrapolate(&h, 2).map(|t| t.item());
    check("taylor order-1 of [1,3] = 5", t1.map_or(false, |v| v == 5.0));
    check("taylor order-2 of [0,1,3] = 6", t2.map_or(false, |v| v == 6.0));

    // Counter RNG replay.
    let a: Vec<u64> = {
        let mut r = CounterRng::new(7);
        (0..8).map(|_| r.next_u64()).collect()
    };
    let b: Vec<u64> = {
        let mut r = CounterRng::new(7);
        (0..8).map(|_| r.next_u64()).collect()
    };
    check("counter rng replays exactly", a == b);

    // Untrained end-to-end determinism and completeness.
    let model = BaseModel::<f32>::new(BaseConfig::default(), 3);
    let gc = GenerateConfig {
        n: 16,
        class: Some(0),
        schedule: MaskSchedule::cosine(),
        sampler: SamplerConfig { seed: 5, ..Default::default() },
    };
    let r1 = generate(&model, &gc, &RunOptions::default());
    let r2 = generate(&model, &gc, &RunOptions::default());
    let gen_ok = match (&r1, &r2) {
        (Ok(x), Ok(y)) => {
            x.tokens == y.tokens && x.tokens.mask_count(model.vocabulary()) == 0
        }
        _ => false,
    };
    check("generation deterministic and fully decoded", gen_ok);

    // Fresh shortcut is the identity transition.
    let hash = [0u8; 32];
    let sc = ShortcutModel::new(ShortcutConfig::default(), &model, hash, 2);
    let id_ok = match (&sc, &r1) {
        (Ok(sc), Ok(r)) => {
            let f = &r.final_features;
            sc.apply_transition(f, &[(0, 1), (3, 2)], 0.5).map(|o| &o == f).unwrap_or(false)
        }
        _ => false,
    };
    check("fresh shortcut is identity", id_ok);

    // Budget B = N reproduces vanilla bit-exactly.
    let full_ok = match (&sc, &r1) {
        (Ok(sc), Ok(r)) => generate_accelerated(
            &model,
            Some(sc),
            Accelerator::Shortcut,
            16,
            &gc,
            &RunOptions::default(),
        )
        .map(|o| o.tokens == r.tokens)
        .unwrap_or(false),
        _ => false,
    };
    check("B = N accelerated run is bitwise vanilla", full_ok);

    failures
}
