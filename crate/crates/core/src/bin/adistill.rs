use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adapter_distill::artifact::sha256_hex;
use adapter_distill::backbone::Backbone;
use adapter_distill::config::{parse_list, KeyValues, RunConfig};
use adapter_distill::faq::{
    build_dataset, DatasetOptions, KnowledgeBase, LabeledPairs, Split, SyntheticConfig,
};
use adapter_distill::manifest::{claim_output_dir, claim_output_file, content_hash, RunManifest};
use adapter_distill::platform::{
    capacity::format_table as format_capacity_table, capacity_table, cost_report, parse_spaces,
    Platform, RegisterOptions, StorageModel, TenantData, DEFAULT_SPACES,
};
use adapter_distill::reproduce::{run_all, run_criterion, ReproduceOptions};
use adapter_distill::trainer::{EvalReport, Mode};
use adapter_distill::{Error, Result};

/// Multi-tenant FAQ matching with distilled adapters over a shared encoder.
///
/// Exit codes: 0 success, 2 usage or configuration error, 3 conflict,
/// 4 integrity or invariant violation.
#[derive(Parser)]
#[command(name = "adistill", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable. Keys: vocab_size,
    /// hidden_dim, num_layers, num_heads, ffn_dim, max_seq_len,
    /// backbone_seed, epochs, learning_rate (0.01), warmup_fraction (0.1),
    /// weight_decay (0.01), batch_size (8), bottleneck (8), eta_grid
    /// (e^-2..e^2), distill_norm (mse|l2), stop_gradient, seed,
    /// positive_cap (10), negatives_per_positive (1), cache_capacity (8).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.config.is_none() && self.set.is_empty()
    }

    fn load(&self) -> Result<RunConfig> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::load(p)?,
            None => KeyValues::default(),
        };
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got {s:?}")))?;
            kv.set(k.trim(), v.trim());
        }
        RunConfig::from_kv(&kv)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Builds labeled pairs (BM25 hard negatives, 8:1:1 splits) from a knowledge base.
    BuildDataset {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Negatives per positive.
        #[arg(long, default_value_t = 1)]
        negatives: usize,
        /// Within-point pairs kept per knowledge point.
        #[arg(long, default_value_t = 10)]
        positive_cap: usize,
        /// Recorded in the manifest; dataset building draws no randomness.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Writes synthetic tenant knowledge bases, one file per tenant.
    SynthKb {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 10)]
        tenants: usize,
        #[arg(long, default_value_t = 90)]
        points: usize,
        #[arg(long, default_value_t = 4)]
        questions: usize,
        #[arg(long, default_value_t = 0.5)]
        shared: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Trains and registers a tenant on a platform directory.
    Register {
        #[arg(long)]
        platform: PathBuf,
        #[arg(long)]
        name: String,
        /// Labeled pairs file or knowledge base.
        #[arg(long)]
        data: PathBuf,
        /// full | head | adapter | adapter_fusion | adapter_distill
        #[arg(long, default_value = "adapter_distill")]
        mode: String,
        /// Comma-separated distillation weights to select from on validation.
        #[arg(long)]
        eta_grid: Option<String>,
        /// Leaves the tenant's own first-stage adapter out of the teachers.
        #[arg(long)]
        no_self_teacher: bool,
        /// Used only when the platform is created.
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Scores one query/candidate pair with a tenant's model.
    Route {
        #[arg(long)]
        platform: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        query: String,
        #[arg(long)]
        candidate: String,
    },
    /// Test-split metrics of a registered tenant.
    Evaluate {
        #[arg(long)]
        platform: PathBuf,
        #[arg(long)]
        name: String,
        /// Labeled pairs to evaluate instead of the stored dataset.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Tenants per storage budget for full fine-tuning, fusion and distillation.
    Capacity {
        #[arg(long, default_value = DEFAULT_SPACES)]
        spaces: String,
        #[arg(long, default_value_t = 391.0)]
        base_mb: f64,
        #[arg(long, default_value_t = 82.0)]
        fusion_mb: f64,
        #[arg(long, default_value_t = 3.5)]
        adapter_mb: f64,
        #[arg(long, default_value_t = 2.3)]
        head_mb: f64,
        #[arg(long, default_value_t = 1024.0)]
        mb_per_gb: f64,
    },
    /// FLOPs and wall-clock latency of each inference path.
    Bench {
        #[arg(long, default_value = "10,20,30")]
        batch_sizes: String,
        #[arg(long, default_value_t = 100)]
        repetitions: usize,
        /// Adapters fused by the fusion path.
        #[arg(long, default_value_t = 9)]
        teachers: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Runs the acceptance criteria and prints one PASS/FAIL line each.
    Reproduce {
        #[arg(long, default_value = "paper")]
        suite: String,
        /// Comma-separated criterion numbers; all when omitted.
        #[arg(long)]
        only: Option<String>,
        /// Write-once directory for the manifest and summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_report(report: &EvalReport) {
    println!(
        "test examples {} positives {} accuracy {:.4} auc {}",
        report.examples,
        report.positives,
        report.accuracy,
        report
            .auc
            .map_or_else(|| "undefined".to_string(), |a| format!("{a:.4}"))
    );
}

fn build_dataset_cmd(
    kb: &Path,
    out: &Path,
    negatives: usize,
    positive_cap: usize,
    seed: u64,
) -> Result<()> {
    if negatives == 0 {
        return Err(Error::Usage("--negatives must be at least 1".into()));
    }
    claim_output_file(out)?;
    let manifest_path = PathBuf::from(format!("{}.manifest", out.display()));
    let manifest = RunManifest {
        command: "build-dataset".into(),
        config_path: None,
        seed,
        output: out.to_path_buf(),
        input_hash: content_hash(&[kb])?,
    };
    let kb = KnowledgeBase::load(kb)?;
    let options = DatasetOptions {
        positive_cap,
        negatives_per_positive: negatives,
    };
    let data = build_dataset(&kb, options)?;
    manifest.write_new(&manifest_path)?;
    data.save(out)?;
    println!("split\tpositive\tnegative");
    let counts = data.counts();
    for s in Split::ALL {
        let [neg, pos] = counts[s.index()];
        println!("{s}\t{pos}\t{neg}");
    }
    println!(
        "examples {} sha256 {}",
        data.len(),
        sha256_hex(data.to_text().as_bytes())
    );
    Ok(())
}

fn synth_cmd(out_dir: &Path, cfg: SyntheticConfig) -> Result<()> {
    claim_output_dir(out_dir)?;
    let manifest = RunManifest {
        command: format!(
            "synth-kb tenants={} points={} questions={} shared={}",
            cfg.num_tenants,
            cfg.points_per_tenant,
            cfg.questions_per_point,
            cfg.shared_structure_fraction
        ),
        config_path: None,
        seed: cfg.seed,
        output: out_dir.to_path_buf(),
        input_hash: sha256_hex(b""),
    };
    manifest.write_new(&out_dir.join("manifest.txt"))?;
    for t in cfg.generate()? {
        let path = out_dir.join(format!("{}.kb", t.kb.tenant_id));
        t.kb.save(&path)?;
        println!(
            "{}\t{} points\t{} questions",
            path.display(),
            t.kb.points.len(),
            t.kb.num_questions()
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn register_cmd(
    root: &Path,
    name: &str,
    data: &Path,
    mode: &str,
    eta_grid: Option<&str>,
    no_self_teacher: bool,
    config: &ConfigArgs,
) -> Result<()> {
    let mut mode: Mode = mode
        .parse()
        .map_err(|e: Error| Error::Usage(e.to_string()))?;
    if no_self_teacher {
        if mode != Mode::AdapterDistill {
            return Err(Error::Usage(
                "--no-self-teacher applies to adapter_distill only".into(),
            ));
        }
        mode = Mode::AdapterDistillStar;
    }
    let mut platform = if root.join("platform.cfg").exists() {
        if !config.is_empty() {
            return Err(Error::Usage(format!(
                "{} already exists; its configuration is fixed",
                root.display()
            )));
        }
        Platform::open(root)?
    } else {
        Platform::init(root, config.load()?)?
    };
    if platform.records().iter().any(|r| r.name == name) {
        return Err(Error::Conflict(format!(
            "tenant {name} is already registered"
        )));
    }
    let manifest = RunManifest {
        command: format!("register --name {name} --mode {mode}"),
        config_path: config.config.clone(),
        seed: platform.config().train.seed,
        output: platform.tenant_dir(name),
        input_hash: content_hash(&[data])?,
    };
    manifest.write_new(&root.join("manifests").join(format!("{name}.manifest")))?;

    let tenant_data = TenantData::load(data)?;
    let mut options = RegisterOptions::new(mode);
    options.eta_grid = eta_grid.map(|g| parse_list(g, "eta grid")).transpose()?;
    let reg = platform.register_tenant(name, tenant_data, &options)?;
    println!(
        "registered {} as tenant {} ({})",
        reg.record.name, reg.record.ordinal, reg.record.mode
    );
    if let Some(eta) = reg.record.eta {
        println!("eta {eta}");
    }
    if !reg.record.teachers.is_empty() {
        println!("teachers {}", reg.record.teachers.join(","));
    }
    print_report(&reg.test);
    println!(
        "non-destructive check: {} earlier tenants unchanged",
        reg.prior_checked
    );
    Ok(())
}

fn bench_cmd(
    batch_sizes: &str,
    repetitions: usize,
    teachers: usize,
    config: &ConfigArgs,
) -> Result<()> {
    let cfg = config.load()?;
    let backbone = Backbone::new(cfg.backbone)?;
    let sizes: Vec<usize> = parse_list(batch_sizes, "batch size")?;
    let report = cost_report(
        &backbone,
        cfg.train.bottleneck,
        teachers,
        &sizes,
        repetitions,
    )?;
    print!("{}", report.to_text());
    match report.check_latency_order() {
        Ok(()) => println!("latency order: distill ~ adapter < fusion"),
        Err(e) => println!("latency order not observed on this machine: {e}"),
    }
    report.check_flops()?;
    println!("flops: distill == adapter < fusion");
    Ok(())
}

fn reproduce_cmd(suite: &str, only: Option<&str>, out: Option<&Path>) -> Result<bool> {
    if suite != "paper" {
        return Err(Error::Usage(format!(
            "unknown suite {suite:?}; the only suite is \"paper\""
        )));
    }
    let opts = ReproduceOptions::default();
    if let Some(dir) = out {
        claim_output_dir(dir)?;
        RunManifest {
            command: format!("reproduce --suite {suite}"),
            config_path: None,
            seed: 0,
            output: dir.to_path_buf(),
            input_hash: sha256_hex(b""),
        }
        .write_new(&dir.join("manifest.txt"))?;
    }
    let outcomes = match only {
        Some(list) => {
            let ids: Vec<u8> = parse_list(list, "criterion")?;
            if let Some(bad) = ids.iter().find(|&&i| !(1..=10).contains(&i)) {
                return Err(Error::Usage(format!("no criterion {bad}")));
            }
            ids.into_iter()
                .map(|id| {
                    let o = run_criterion(id, &opts);
                    println!("{}", o.line());
                    o
                })
                .collect()
        }
        None => run_all(&opts, |o| println!("{}", o.line())),
    };
    let passed = outcomes.iter().filter(|o| o.passed).count();
    println!("{passed}/{} criteria passed", outcomes.len());
    if let Some(dir) = out {
        let text: String = outcomes.iter().map(|o| o.line() + "\n").collect();
        fs::write(dir.join("summary.txt"), text)?;
    }
    Ok(passed == outcomes.len())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::BuildDataset {
            kb,
            out,
            negatives,
            positive_cap,
            seed,
        } => build_dataset_cmd(&kb, &out, negatives, positive_cap, seed)?,
        Command::SynthKb {
            out_dir,
            tenants,
            points,
            questions,
            shared,
            seed,
        } => synth_cmd(
            &out_dir,
            SyntheticConfig {
                num_tenants: tenants,
                points_per_tenant: points,
                questions_per_point: questions,
                shared_structure_fraction: shared,
                seed,
                ..SyntheticConfig::default()
            },
        )?,
        Command::Register {
            platform,
            name,
            data,
            mode,
            eta_grid,
            no_self_teacher,
            config,
        } => register_cmd(
            &platform,
            &name,
            &data,
            &mode,
            eta_grid.as_deref(),
            no_self_teacher,
            &config,
        )?,
        Command::Route {
            platform,
            name,
            query,
            candidate,
        } => {
            let p = Platform::open(&platform)?;
            println!("{:.6}", p.route(&name, &query, &candidate)?);
        }
        Command::Evaluate {
            platform,
            name,
            data,
        } => {
            let p = Platform::open(&platform)?;
            let data = data.map(|d| LabeledPairs::load(&d)).transpose()?;
            print_report(&p.evaluate(&name, data.as_ref())?);
        }
        Command::Capacity {
            spaces,
            base_mb,
            fusion_mb,
            adapter_mb,
            head_mb,
            mb_per_gb,
        } => {
            let model = StorageModel {
                base_mb,
                fusion_mb,
                adapter_mb,
                head_mb,
                mb_per_gb,
            };
            let rows = capacity_table(&model, &parse_spaces(&spaces)?)?;
            print!("{}", format_capacity_table(&model, &rows));
        }
        Command::Bench {
            batch_sizes,
            repetitions,
            teachers,
            config,
        } => bench_cmd(&batch_sizes, repetitions, teachers, &config)?,
        Command::Reproduce { suite, only, out } => {
            if !reproduce_cmd(&suite, only.as_deref(), out.as_deref())? {
                return Ok(ExitCode::from(4));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("adistill: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
