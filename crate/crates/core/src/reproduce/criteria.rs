//! The acceptance criteria as runnable checks.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradient::{check_stage_two_gradient, GradientSetup};
use super::oracles;
use super::suite::{run_suite, SuiteConfig};
use crate::adapter::{
    added_params_fraction, bottleneck_for_fraction, fraction_for_dims, AdapterWeights, Stage,
};
use crate::backbone::{Backbone, BackboneConfig};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::faq::{
    build_dataset, Bm25Index, Bm25Params, CorpusStats, DatasetOptions, Split, SyntheticConfig,
};
use crate::fusion::{distill_loss, fusion_attend, DistillNorm, FusionWeights};
use crate::platform::{
    analytic_flops, bench_inputs, bench_model, capacity_table, cost_report, parse_spaces,
    InferencePath, Platform, RegisterOptions, StorageModel, TenantData, DEFAULT_SPACES,
};
use crate::trainer::{auc, Mode, TrainConfig};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const ORACLE_TOLERANCE: f64 = 1e-12;

/// Knobs of the acceptance run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReproduceOptions {
    pub gradient: GradientSetup,
    pub bench_backbone: BackboneConfig,
    pub batch_sizes: Vec<usize>,
    pub repetitions: usize,
    pub bench_teachers: usize,
    pub suite: SuiteConfig,
    /// Parent of the scratch directories; the system temp dir if unset.
    pub scratch_root: Option<PathBuf>,
}

impl Default for ReproduceOptions {
    fn default() -> Self {
        Self {
            gradient: GradientSetup::default(),
            bench_backbone: BackboneConfig::default(),
            batch_sizes: vec![10, 20, 30],
            repetitions: 100,
            bench_teachers: 9,
            suite: SuiteConfig::default(),
            scratch_root: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub id: u8,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Outcome {
    pub fn line(&self) -> String {
        format!(
            "{} {:>2} {} ({:.1}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

pub const TITLES: [&str; 10] = [
    "capacity table",
    "parameter fractions",
    "gradient of the combined loss",
    "fusion attention oracle",
    "distillation identity and oracle",
    "non-destructive registration",
    "inference cost paths",
    "end-to-end trend",
    "BM25 and metric oracles",
    "persistence round trips",
];

/// Runs one criterion (1-based). Errors become failures with the error
/// text as detail.
pub fn run_criterion(id: u8, opts: &ReproduceOptions) -> Outcome {
    let start = Instant::now();
    let result = match id {
        1 => capacity_criterion(),
        2 => fraction_criterion(),
        3 => gradient_criterion(opts),
        4 => fusion_criterion(),
        5 => distill_criterion(),
        6 => isolation_criterion(opts),
        7 => cost_criterion(opts),
        8 => trend_criterion(opts),
        9 => oracle_criterion(),
        10 => persistence_criterion(opts),
        _ => Err(Error::Usage(format!("no criterion {id}"))),
    };
    let elapsed = start.elapsed();
    let title = TITLES
        .get(usize::from(id).wrapping_sub(1))
        .copied()
        .unwrap_or("unknown");
    let (passed, detail) = match result {
        Ok(v) => v,
        Err(e) => (false, format!("error: {e}")),
    };
    // Timed criteria carry their own limit.
    let (passed, detail) = match time_limit(id) {
        Some(limit) if elapsed > limit => {
            (false, format!("{detail}; exceeded {}s", limit.as_secs()))
        }
        _ => (passed, detail),
    };
    Outcome {
        id,
        title,
        passed,
        detail,
        elapsed,
    }
}

fn time_limit(id: u8) -> Option<Duration> {
    match id {
        1 => Some(Duration::from_secs(1)),
        3 => Some(Duration::from_secs(300)),
        8 => Some(Duration::from_secs(1800)),
        _ => None,
    }
}

pub fn run_all(opts: &ReproduceOptions, mut progress: impl FnMut(&Outcome)) -> Vec<Outcome> {
    (1..=10)
        .map(|id| {
            let o = run_criterion(id, opts);
            progress(&o);
            o
        })
        .collect()
}

/// Temporary directory removed on drop.
struct Scratch {
    path: PathBuf,
}

impl Scratch {
    fn new(opts: &ReproduceOptions, tag: &str) -> Result<Self> {
        let parent = opts.scratch_root.clone().unwrap_or_else(std::env::temp_dir);
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.subsec_nanos());
        let path = parent.join(format!("adistill-{tag}-{}-{nanos}", std::process::id()));
        fs::create_dir_all(&path)?;
        Ok(Self { path })
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        let _ = fs::remove_dir_all(&self.path);
    }
}

type Check = Result<(bool, String)>;

fn capacity_criterion() -> Check {
    let rows = capacity_table(&StorageModel::default(), &parse_spaces(DEFAULT_SPACES)?)?;
    let full: Vec<usize> = rows.iter().map(|r| r.full as usize).collect();
    let fusion: Vec<usize> = rows.iter().map(|r| r.fusion as usize).collect();
    let distill: Vec<usize> = rows.iter().map(|r| r.distill as usize).collect();
    let fusion_ok = fusion
        .iter()
        .zip(oracles::REFERENCE_FUSION)
        .all(|(&a, b)| a.abs_diff(b) <= 1);
    let passed =
        full == oracles::REFERENCE_FULL && distill == oracles::REFERENCE_DISTILL && fusion_ok;
    Ok((
        passed,
        format!("full {full:?} fusion {fusion:?} distill {distill:?}"),
    ))
}

fn fraction_criterion() -> Check {
    let desk = BackboneConfig::default();
    let mut plain = AdapterWeights::for_backbone("plain", &desk, 8, 1)?;
    plain.set_stage(Stage::Final)?;
    let mut distilled = AdapterWeights::for_backbone("distilled", &desk, 8, 2)?;
    distilled.set_stage(Stage::Final)?;
    let a = added_params_fraction(&plain, &desk, false);
    let d = added_params_fraction(&distilled, &desk, false);
    let f = added_params_fraction(&plain, &desk, true);
    let bert = BackboneConfig::bert_base();
    let m = bottleneck_for_fraction(&bert, oracles::REFERENCE_FRACTION_PERCENT);
    let at_m = fraction_for_dims(&bert, m, false);
    let passed = a == d && f > a && (at_m - oracles::REFERENCE_FRACTION_PERCENT).abs() <= 0.1;
    Ok((
        passed,
        format!(
            "adapter {a:.4}% distill {d:.4}% fusion {f:.4}%; d=768 L=12 m={m} gives {at_m:.4}%"
        ),
    ))
}

fn gradient_criterion(opts: &ReproduceOptions) -> Check {
    let report = check_stage_two_gradient(&opts.gradient)?;
    Ok((
        report.max_rel_error <= GRADIENT_TOLERANCE,
        format!(
            "max relative error {:.3e} over {} scalars",
            report.max_rel_error, report.scalars_checked
        ),
    ))
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let bound = rng.gen_range(0.2..2.0);
    Tensor::uniform(shape, bound, rng)
}

fn fusion_criterion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst, mut worst_row) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let t = rng.gen_range(1..=5);
        let d = rng.gen_range(1..=6);
        let n = rng.gen_range(1..=4);
        let h = random_tensor(&[t, d], &mut rng);
        let zs: Vec<Tensor> = (0..n).map(|_| random_tensor(&[t, d], &mut rng)).collect();
        let mut omega = FusionWeights::init(1, d, rng.gen())?;
        omega.layers[0].query = random_tensor(&[d, d], &mut rng);
        omega.layers[0].key = random_tensor(&[d, d], &mut rng);
        omega.layers[0].value = random_tensor(&[d, d], &mut rng);
        let layer = &omega.layers[0];
        let (o, p) = fusion_attend(&h, &zs, layer)?;
        let (o_ref, p_ref) =
            oracles::fusion_scalar(&h, &zs, &layer.query, &layer.key, &layer.value);
        for (got, want) in o
            .data()
            .chunks(d)
            .zip(&o_ref)
            .chain(p.data().chunks(n).zip(&p_ref))
        {
            for (a, b) in got.iter().zip(want) {
                worst = worst.max((a - b).abs());
            }
        }
        for row in p.data().chunks(n) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok((
        worst <= ORACLE_TOLERANCE && worst_row <= 1e-9,
        format!("max deviation {worst:.2e}, max row-sum error {worst_row:.2e}"),
    ))
}

fn distill_criterion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (l, t, d, n) = (3, 5, 4, 3);
    let mask = [1.0, 1.0, 1.0, 0.0, 1.0];
    let z: Vec<Tensor> = (0..l).map(|_| random_tensor(&[t, d], &mut rng)).collect();
    let h: Vec<Tensor> = (0..l).map(|_| random_tensor(&[t, d], &mut rng)).collect();
    let mut omega = FusionWeights::init(l, d, 9)?;
    let mut fused = Vec::with_capacity(l);
    for (layer, (zl, hl)) in omega.layers.iter_mut().zip(z.iter().zip(&h)) {
        layer.query = random_tensor(&[d, d], &mut rng);
        layer.key = random_tensor(&[d, d], &mut rng);
        layer.value = Tensor::eye(d);
        let teachers = vec![zl.clone(); n];
        fused.push(fusion_attend(hl, &teachers, layer)?.0);
    }
    let identity = distill_loss(&fused, &z, &mask, DistillNorm::MeanSquared)?;

    let mut worst = 0.0f64;
    for norm in [DistillNorm::MeanSquared, DistillNorm::L2] {
        for _ in 0..10 {
            let o: Vec<Tensor> = (0..l).map(|_| random_tensor(&[t, d], &mut rng)).collect();
            let got = distill_loss(&o, &z, &mask, norm)?;
            let want = oracles::distill_double_loop(&o, &z, &mask, norm);
            worst = worst.max((got - want).abs());
        }
    }
    Ok((
        identity == 0.0 && worst <= ORACLE_TOLERANCE,
        format!("identity loss {identity:e}, max oracle deviation {worst:.2e}"),
    ))
}

/// Small platform configuration used by the registration checks.
pub fn small_platform_config() -> RunConfig {
    RunConfig {
        backbone: BackboneConfig {
            vocab_size: 2048,
            hidden_dim: 16,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 32,
            max_seq_len: 12,
            seed: 0,
        },
        train: TrainConfig {
            epochs: 2,
            eta_grid: vec![1.0],
            ..TrainConfig::default()
        },
        dataset: DatasetOptions::default(),
        cache_capacity: 2,
    }
}

fn small_tenants(count: usize, seed: u64) -> Result<Vec<crate::faq::KnowledgeBase>> {
    Ok(SyntheticConfig {
        num_tenants: count,
        points_per_tenant: 10,
        seed,
        ..SyntheticConfig::default()
    }
    .generate()?
    .into_iter()
    .map(|t| t.kb)
    .collect())
}

fn test_probabilities(platform: &Platform, name: &str) -> Result<Vec<u64>> {
    let data = platform.dataset(name)?;
    data.split(Split::Test)
        .iter()
        .map(|e| {
            platform
                .route(name, &e.query, &e.candidate)
                .map(f64::to_bits)
        })
        .collect()
}

fn isolation_criterion(opts: &ReproduceOptions) -> Check {
    let scratch = Scratch::new(opts, "isolation")?;
    let root = scratch.path.join("platform");
    let mut platform = Platform::init(&root, small_platform_config())?;
    let kbs = small_tenants(5, 6)?;
    let options = RegisterOptions::new(Mode::AdapterDistill);
    let mut detail = String::new();
    let mut passed = true;
    let mut first = None;
    for (i, kb) in kbs.iter().enumerate() {
        let name = format!("tenant{}", i + 1);
        let before = platform.verify_all()?;
        platform.register_tenant(&name, TenantData::Kb(kb.clone()), &options)?;
        let after = platform.verify_all()?;
        let kept = after[..before.len()] == before[..];
        passed &= kept;
        if i == 0 {
            first = Some((
                platform.evaluate(&name, None)?,
                test_probabilities(&platform, &name)?,
            ));
        }
        let _ = write!(
            detail,
            "{name}:{} ",
            if kept {
                "priors intact"
            } else {
                "PRIORS CHANGED"
            }
        );
    }
    let (first_report, first_probs) =
        first.ok_or_else(|| Error::Usage("no tenants registered".into()))?;
    let reopened = Platform::open(&root)?;
    let again = reopened.evaluate("tenant1", None)?;
    let again_probs = test_probabilities(&reopened, "tenant1")?;
    let (acc, auc_value) = reopened.registered_metrics("tenant1")?;
    let same = again.accuracy.to_bits() == first_report.accuracy.to_bits()
        && again.auc.map(f64::to_bits) == first_report.auc.map(f64::to_bits)
        && again_probs == first_probs;
    // The report keeps six decimals.
    let matches_report = (acc - again.accuracy).abs() <= 5e-7
        && auc_value
            .zip(again.auc)
            .map_or(auc_value.is_none() && again.auc.is_none(), |(r, a)| {
                (r - a).abs() <= 5e-7
            });
    passed &= same && matches_report;
    let _ = write!(
        detail,
        "; tenant1 re-evaluation {} ({} test probabilities)",
        if same { "bit-identical" } else { "DIFFERS" },
        again_probs.len()
    );
    Ok((passed, detail))
}

fn cost_criterion(opts: &ReproduceOptions) -> Check {
    let backbone = Backbone::new(opts.bench_backbone.clone())?;
    let m = crate::adapter::DEFAULT_BOTTLENECK;
    let report = cost_report(
        &backbone,
        m,
        opts.bench_teachers,
        &opts.batch_sizes,
        opts.repetitions,
    )?;
    let mut problems = Vec::new();
    if let Err(e) = report.check_flops() {
        problems.push(e.to_string());
    }
    if let Err(e) = report.check_latency_order() {
        problems.push(e.to_string());
    }

    // Fusion cost grows linearly in the number of fused adapters.
    let inputs = bench_inputs(&backbone, opts.batch_sizes[0])?;
    let seq = inputs[0].len();
    let counts = [1usize, 2, 4, 8];
    let mut analytic = Vec::new();
    let mut measured = Vec::new();
    for &n in &counts {
        let path = InferencePath::Fusion { teachers: n };
        analytic.push(analytic_flops(
            backbone.config(),
            m,
            path,
            inputs.len(),
            seq,
        ));
        measured.push(bench_model(&backbone, m, path)?.measured_flops(&backbone, &inputs)?);
    }
    let linear = |v: &[u64]| {
        let step = v[1] - v[0];
        step > 0
            && counts
                .iter()
                .zip(v)
                .all(|(&n, &f)| f == v[0] + (n as u64 - 1) * step)
    };
    if !linear(&analytic) || !linear(&measured) || analytic != measured {
        problems.push(format!("fusion FLOPs not linear in teachers: {measured:?}"));
    }

    let mut detail = String::new();
    for &b in &opts.batch_sizes {
        let med = |p: InferencePath| {
            report
                .rows
                .iter()
                .find(|r| r.batch == b && r.path == p)
                .map_or(f64::NAN, |r| r.latency.median_ms)
        };
        let _ = write!(
            detail,
            "b{b}: adapter {:.2}ms distill {:.2}ms fusion {:.2}ms; ",
            med(InferencePath::Adapter),
            med(InferencePath::Distill),
            med(InferencePath::Fusion {
                teachers: opts.bench_teachers
            })
        );
    }
    let _ = write!(
        detail,
        "fusion FLOPs per extra teacher {}",
        measured[1] - measured[0]
    );
    if !problems.is_empty() {
        let _ = write!(detail, "; {}", problems.join("; "));
    }
    Ok((problems.is_empty(), detail))
}

fn trend_criterion(opts: &ReproduceOptions) -> Check {
    let outcome = run_suite(&opts.suite, |_| {})?;
    let mut detail = format!(
        "adapter {:.2} distill {:.2} no-self {:.2} (mean %)",
        100.0 * outcome.mean_adapter(),
        100.0 * outcome.mean_distill(),
        100.0 * outcome.mean_no_self()
    );
    for (what, ok) in outcome.checks() {
        let _ = write!(detail, "; {}{what}", if ok { "" } else { "FAILED " });
    }
    Ok((outcome.passed(), detail))
}

fn random_corpus(rng: &mut ChaCha8Rng, docs: usize) -> Vec<Vec<String>> {
    let vocab: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    (0..docs)
        .map(|_| {
            let len = rng.gen_range(1..=8);
            (0..len)
                .map(|_| vocab[rng.gen_range(0..vocab.len())].clone())
                .collect()
        })
        .collect()
}

fn oracle_criterion() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params = Bm25Params::default();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.gen_range(1..=100);
        let corpus = random_corpus(&mut rng, n);
        let as_str: Vec<Vec<&str>> = corpus
            .iter()
            .map(|d| d.iter().map(String::as_str).collect())
            .collect();
        let index = Bm25Index::new(&corpus, params)?;
        let stats = CorpusStats::from_docs(&corpus)?;
        for query in random_corpus(&mut rng, 3) {
            let q: Vec<&str> = query.iter().map(String::as_str).collect();
            let fast = index.score_all(&q);
            for (i, doc) in corpus.iter().enumerate() {
                let want = oracles::bm25_formula(&q, i, &as_str, params.k1, params.b);
                let direct = crate::faq::bm25::bm25_score(&q, doc, &stats, params);
                worst = worst.max((fast[i] - want).abs()).max((direct - want).abs());
            }
        }
    }
    let single = vec![vec!["refund"]];
    let hand = (4.0f64 / 3.0).ln();
    let single_score = crate::faq::bm25::bm25_score(
        &["refund"],
        &single[0],
        &CorpusStats::from_docs(&single)?,
        params,
    );
    let single_ok = (single_score - hand).abs() <= ORACLE_TOLERANCE;

    let mut auc_exact = true;
    for _ in 0..30 {
        let n = rng.gen_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // Coarse scores so ties occur.
        let scores: Vec<f64> = (0..n)
            .map(|_| f64::from(rng.gen_range(0..6u8)) / 5.0)
            .collect();
        auc_exact &= auc(&scores, &labels)? == oracles::auc_pairwise(&scores, &labels);
    }

    let mut split_ok = true;
    let mut worst_split = 0.0f64;
    for kb in small_tenants(3, 10)? {
        let data = build_dataset(&kb, DatasetOptions::default())?;
        let counts = data.counts();
        for label in 0..2 {
            let total: usize = counts.iter().map(|c| c[label]).sum();
            for (split, frac) in Split::ALL.iter().zip([0.8, 0.1, 0.1]) {
                let dev = (counts[split.index()][label] as f64 - frac * total as f64).abs();
                worst_split = worst_split.max(dev);
                split_ok &= dev <= 1.0;
            }
        }
    }

    Ok((
        worst <= ORACLE_TOLERANCE && single_ok && auc_exact && split_ok,
        format!(
            "BM25 max deviation {worst:.2e}; single doc {single_score:.6} vs ln(4/3) {hand:.6}; AUC {}; worst split deviation {worst_split:.2}",
            if auc_exact { "exact" } else { "MISMATCH" }
        ),
    ))
}

fn flip_byte(path: &Path, offset: usize) -> Result<()> {
    let mut bytes = fs::read(path)?;
    let i = offset.min(bytes.len() - 1);
    bytes[i] ^= 0x20;
    fs::write(path, bytes)?;
    Ok(())
}

fn persistence_criterion(opts: &ReproduceOptions) -> Check {
    let scratch = Scratch::new(opts, "persistence")?;
    let mut problems = Vec::new();

    let desk = BackboneConfig::default();
    let mut adapter = AdapterWeights::for_backbone("roundtrip", &desk, 8, 11)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for p in adapter.params_mut() {
        let fresh = Tensor::uniform(p.shape(), 1.0, &mut rng);
        p.data_mut().copy_from_slice(fresh.data());
    }
    let path = scratch.path.join("adapter.bin");
    let hash = adapter.save(&path)?;
    let loaded = AdapterWeights::load_verified(&path, &hash)?;
    let bits = |a: &AdapterWeights| -> Vec<u64> {
        a.params()
            .iter()
            .flat_map(|p| p.data().iter().map(|x| x.to_bits()))
            .collect()
    };
    if bits(&loaded) != bits(&adapter) || loaded.to_bytes()? != adapter.to_bytes()? {
        problems.push("adapter round trip is not bit-exact".to_string());
    }
    let len = fs::metadata(&path)?.len() as usize;
    for offset in [len / 3, len / 2, len - 1] {
        fs::write(&path, adapter.to_bytes()?)?;
        flip_byte(&path, offset)?;
        if !matches!(AdapterWeights::load(&path), Err(Error::Integrity(_))) {
            problems.push(format!(
                "flipped byte {offset} not rejected as an integrity error"
            ));
        }
        if !matches!(
            AdapterWeights::load_verified(&path, &hash),
            Err(Error::Integrity(_))
        ) {
            problems.push(format!("flipped byte {offset} passed hash verification"));
        }
    }

    let root = scratch.path.join("platform");
    let mut platform = Platform::init(&root, small_platform_config())?;
    let kbs = small_tenants(2, 13)?;
    for (i, kb) in kbs.iter().enumerate() {
        platform.register_tenant(
            &format!("t{}", i + 1),
            TenantData::Kb(kb.clone()),
            &RegisterOptions::new(Mode::Adapter),
        )?;
    }
    let probes: Vec<(String, String)> = kbs
        .iter()
        .flat_map(|kb| {
            kb.points
                .iter()
                .take(3)
                .map(|p| (p.standard_question.clone(), p.similar_questions[0].clone()))
        })
        .collect();
    let route_all = |p: &Platform| -> Result<Vec<u64>> {
        let mut out = Vec::new();
        for name in ["t1", "t2"] {
            for (q, c) in &probes {
                out.push(p.route(name, q, c)?.to_bits());
            }
        }
        Ok(out)
    };
    let before = route_all(&platform)?;
    drop(platform);
    let reopened = Platform::open(&root)?;
    if route_all(&reopened)? != before {
        problems.push("routing changed after registry reload".to_string());
    }
    let adapter_file = reopened.record("t1")?.adapter_path().map(str::to_string);
    if let Some(file) = adapter_file {
        flip_byte(&reopened.tenant_dir("t1").join(file), 40)?;
        reopened.clear_cache();
        if !matches!(reopened.route("t1", "a", "b"), Err(Error::Integrity(_))) {
            problems.push("corrupted tenant adapter was served".to_string());
        }
    } else {
        problems.push("adapter tenant has no adapter file".to_string());
    }

    let detail = if problems.is_empty() {
        format!(
            "adapter bit-exact, corruption rejected, {} routed probabilities stable across reload",
            before.len()
        )
    } else {
        problems.join("; ")
    };
    Ok((problems.is_empty(), detail))
}
