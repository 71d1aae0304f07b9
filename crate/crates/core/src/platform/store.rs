//! On-disk tenant store: registration, routing and evaluation.
//!
//! Layout under the platform root:
//!
//! ```text
//! platform.cfg          key=value run configuration
//! backbone.sha256       fingerprint of the shared encoder
//! registry.txt          one TenantRecord per line, rewritten atomically
//! access.log            timestamp, tenant, file, op
//! platform.lock         present while a registration runs
//! tenants/<name>/       adapter.bin, head.bin, report.txt, curves.csv, ...
//! ```

use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use super::cache::LruCache;
use super::record::{
    content_hash, parse_registry, registry_to_text, validate_name, ArtifactRef, TenantRecord,
};
use crate::adapter::AdapterWeights;
use crate::artifact::{sha256_hex, write_atomic};
use crate::backbone::{Backbone, HeadWeights};
use crate::config::{KeyValues, RunConfig};
use crate::error::{Error, Result};
use crate::faq::{build_dataset, KnowledgeBase, LabeledPairs, Split};
use crate::fusion::FusionWeights;
use crate::trainer::{
    evaluate, predict, train_tenant, write_curves_csv, EvalReport, Mode, RunReport, TenantModel,
    TrainedTenant,
};

const CONFIG_FILE: &str = "platform.cfg";
const FINGERPRINT_FILE: &str = "backbone.sha256";
const REGISTRY_FILE: &str = "registry.txt";
const ACCESS_LOG: &str = "access.log";
const LOCK_FILE: &str = "platform.lock";
const TENANTS_DIR: &str = "tenants";

/// Training input of a new tenant.
#[derive(Debug, Clone)]
pub enum TenantData {
    Kb(KnowledgeBase),
    Pairs(LabeledPairs),
}

impl TenantData {
    /// Reads a labeled-pairs file, or failing that a knowledge base whose
    /// tenant id is the file stem.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        match LabeledPairs::parse(&text) {
            Ok(p) if !p.is_empty() => Ok(TenantData::Pairs(p)),
            Ok(_) => Err(Error::Usage(format!("{} is empty", path.display()))),
            Err(pairs_err) => match KnowledgeBase::load(path) {
                Ok(kb) => Ok(TenantData::Kb(kb)),
                Err(kb_err) => Err(Error::Usage(format!(
                    "{} is neither labeled pairs ({pairs_err}) nor a knowledge base ({kb_err})",
                    path.display()
                ))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisterOptions {
    pub mode: Mode,
    /// Replaces the configured grid when set.
    pub eta_grid: Option<Vec<f64>>,
}

impl RegisterOptions {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            eta_grid: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub record: TenantRecord,
    pub report: RunReport,
    pub test: EvalReport,
    /// Number of earlier tenants whose artifacts were checked unchanged.
    pub prior_checked: usize,
}

/// Held while a registration runs; removes the lock file on drop.
struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(root: &Path) -> Result<Self> {
        let path = root.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Conflict(
                format!("another registration holds {}", path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn now_millis() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

pub struct Platform {
    root: PathBuf,
    config: RunConfig,
    backbone: Backbone,
    records: Vec<TenantRecord>,
    cache: Mutex<LruCache<TenantModel>>,
    log: Mutex<()>,
}

impl std::fmt::Debug for Platform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Platform")
            .field("root", &self.root)
            .field("tenants", &self.records.len())
            .finish()
    }
}

impl Platform {
    /// Creates a new platform directory. Fails if one already exists there.
    pub fn init(root: &Path, config: RunConfig) -> Result<Self> {
        config.validate()?;
        if root.join(CONFIG_FILE).exists() {
            return Err(Error::Conflict(format!(
                "{} already holds a platform",
                root.display()
            )));
        }
        fs::create_dir_all(root.join(TENANTS_DIR))?;
        let backbone = Backbone::new(config.backbone.clone())?;
        write_atomic(&root.join(CONFIG_FILE), config.to_kv().to_text().as_bytes())?;
        write_atomic(
            &root.join(FINGERPRINT_FILE),
            backbone.weights().fingerprint().as_bytes(),
        )?;
        write_atomic(&root.join(REGISTRY_FILE), b"")?;
        Ok(Self::assemble(root, config, backbone, Vec::new()))
    }

    pub fn open(root: &Path) -> Result<Self> {
        let cfg_path = root.join(CONFIG_FILE);
        if !cfg_path.exists() {
            return Err(Error::NotFound(format!(
                "no platform at {}",
                root.display()
            )));
        }
        let config = RunConfig::from_kv(&KeyValues::load(&cfg_path)?)?;
        let backbone = Backbone::new(config.backbone.clone())?;
        let expected = fs::read_to_string(root.join(FINGERPRINT_FILE))?;
        let actual = backbone.weights().fingerprint();
        if expected.trim() != actual {
            return Err(Error::Integrity(format!(
                "shared backbone fingerprint {actual} differs from the recorded {}",
                expected.trim()
            )));
        }
        let records = parse_registry(&fs::read_to_string(root.join(REGISTRY_FILE))?)?;
        Ok(Self::assemble(root, config, backbone, records))
    }

    /// Opens the platform at `root`, creating it with `config` if absent.
    pub fn open_or_init(root: &Path, config: RunConfig) -> Result<Self> {
        if root.join(CONFIG_FILE).exists() {
            Self::open(root)
        } else {
            Self::init(root, config)
        }
    }

    fn assemble(
        root: &Path,
        config: RunConfig,
        backbone: Backbone,
        records: Vec<TenantRecord>,
    ) -> Self {
        let cache = Mutex::new(LruCache::new(config.cache_capacity));
        Self {
            root: root.to_path_buf(),
            config,
            backbone,
            records,
            cache,
            log: Mutex::new(()),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn records(&self) -> &[TenantRecord] {
        &self.records
    }

    pub fn record(&self, name: &str) -> Result<&TenantRecord> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::NotFound(format!("tenant {name:?} is not registered")))
    }

    pub fn tenant_dir(&self, name: &str) -> PathBuf {
        self.root.join(TENANTS_DIR).join(name)
    }

    pub fn access_log_path(&self) -> PathBuf {
        self.root.join(ACCESS_LOG)
    }

    fn log_access(&self, tenant: &str, file: &str, op: &str) -> Result<()> {
        let _guard = self.log.lock().unwrap_or_else(|e| e.into_inner());
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.access_log_path())?;
        writeln!(f, "{}\t{tenant}\t{file}\t{op}", now_millis())?;
        Ok(())
    }

    /// Reads one artifact of `record`, checking its hash.
    fn read_artifact(&self, record: &TenantRecord, art: &ArtifactRef, op: &str) -> Result<Vec<u8>> {
        let path = self.tenant_dir(&record.name).join(&art.file);
        self.log_access(&record.name, &art.file, op)?;
        let bytes = fs::read(&path)?;
        let actual = sha256_hex(&bytes);
        if actual != art.hash {
            return Err(Error::Integrity(format!(
                "{} hashes to {actual}, registry says {}",
                path.display(),
                art.hash
            )));
        }
        Ok(bytes)
    }

    fn require<'a>(record: &'a TenantRecord, role: &str) -> Result<&'a ArtifactRef> {
        record
            .file(role)
            .ok_or_else(|| Error::Format(format!("tenant {} has no {role} artifact", record.name)))
    }

    /// Loads the inference model of a tenant from disk, verifying every
    /// file it touches.
    pub fn load_model(&self, record: &TenantRecord) -> Result<TenantModel> {
        let head = HeadWeights::from_bytes(&self.read_artifact(
            record,
            Self::require(record, "head")?,
            "read",
        )?)?;
        let adapter = |art: &ArtifactRef| -> Result<AdapterWeights> {
            let a = AdapterWeights::from_bytes(&self.read_artifact(record, art, "read")?)?;
            a.check_matches(self.backbone.config())?;
            Ok(a)
        };
        Ok(match record.mode {
            Mode::Head => TenantModel::Head { head },
            Mode::Adapter | Mode::AdapterDistill | Mode::AdapterDistillStar => {
                TenantModel::Adapter {
                    adapter: adapter(Self::require(record, "adapter")?)?,
                    head,
                }
            }
            Mode::Full => {
                let bytes =
                    self.read_artifact(record, Self::require(record, "backbone")?, "read")?;
                TenantModel::Full {
                    weights: self.backbone.load_weights(&bytes)?,
                    head,
                }
            }
            Mode::AdapterFusion => {
                let adapters = record
                    .files
                    .iter()
                    .filter(|f| f.role == "fused")
                    .map(adapter)
                    .collect::<Result<Vec<_>>>()?;
                let omega = FusionWeights::from_bytes(&self.read_artifact(
                    record,
                    Self::require(record, "fusion")?,
                    "read",
                )?)?;
                TenantModel::Fusion {
                    adapters,
                    omega,
                    head,
                }
            }
        })
    }

    fn model(&self, name: &str) -> Result<TenantModel> {
        let record = self.record(name)?;
        {
            let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(m) = cache.get(name) {
                return Ok(m);
            }
        }
        let model = self.load_model(record)?;
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        cache.insert(name, model.clone());
        Ok(model)
    }

    /// Drops every cached model; later routes reload and re-verify.
    pub fn clear_cache(&self) {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).clear();
    }

    /// Matching probability of `(query, candidate)` under `name`'s model.
    /// Only that tenant's files are read.
    pub fn route(&self, name: &str, query: &str, candidate: &str) -> Result<f64> {
        let model = self.model(name)?;
        let enc = self.backbone.encode(query, candidate)?;
        Ok(predict(&self.backbone, &model, &[enc])?[0])
    }

    /// The dataset a tenant was registered with.
    pub fn dataset(&self, name: &str) -> Result<LabeledPairs> {
        let record = self.record(name)?;
        let bytes = self.read_artifact(record, Self::require(record, "dataset")?, "read")?;
        let text =
            String::from_utf8(bytes).map_err(|_| Error::Format("dataset is not UTF-8".into()))?;
        LabeledPairs::parse(&text)
    }

    /// Test-split metrics of a tenant, on its stored dataset unless `data`
    /// is given.
    pub fn evaluate(&self, name: &str, data: Option<&LabeledPairs>) -> Result<EvalReport> {
        let model = self.model(name)?;
        let owned;
        let data = match data {
            Some(d) => d,
            None => {
                owned = self.dataset(name)?;
                &owned
            }
        };
        evaluate(&self.backbone, &model, &data.split(Split::Test))
    }

    /// Test accuracy and AUC recorded in the tenant's registration report.
    pub fn registered_metrics(&self, name: &str) -> Result<(f64, Option<f64>)> {
        let record = self.record(name)?;
        let bytes = self.read_artifact(record, Self::require(record, "report")?, "read")?;
        let kv = KeyValues::parse(
            String::from_utf8_lossy(&bytes)
                .split("\n\n")
                .next()
                .unwrap_or_default(),
        )?;
        let field = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("report lacks {k}")))
        };
        let acc = field("test_accuracy")?
            .parse()
            .map_err(|_| Error::Format("bad test_accuracy".into()))?;
        let auc = match field("test_auc")? {
            "nan" => None,
            v => Some(
                v.parse()
                    .map_err(|_| Error::Format("bad test_auc".into()))?,
            ),
        };
        Ok((acc, auc))
    }

    /// `(name, content hash)` of every tenant, recomputed from the files on
    /// disk. Fails if any file no longer matches the registry.
    pub fn verify_all(&self) -> Result<Vec<(String, String)>> {
        self.records
            .iter()
            .map(|r| {
                let mut files = Vec::with_capacity(r.files.len());
                for f in &r.files {
                    let bytes = fs::read(self.tenant_dir(&r.name).join(&f.file))?;
                    files.push(ArtifactRef {
                        hash: sha256_hex(&bytes),
                        ..f.clone()
                    });
                }
                let hash = content_hash(&files);
                if hash != r.content_hash {
                    return Err(Error::Integrity(format!(
                        "artifacts of {} changed on disk",
                        r.name
                    )));
                }
                Ok((r.name.clone(), hash))
            })
            .collect()
    }

    /// Final adapters of every registered tenant that has one, in
    /// registration order.
    fn teacher_adapters(&self) -> Result<Vec<AdapterWeights>> {
        let mut out = Vec::new();
        for r in &self.records {
            if let Some(art) = r.file("adapter") {
                let a = AdapterWeights::from_bytes(&self.read_artifact(r, art, "teacher")?)?;
                a.check_matches(self.backbone.config())?;
                out.push(a);
            }
        }
        Ok(out)
    }

    /// Trains and stores a new tenant. Earlier tenants are checked before
    /// and after; any change to their artifacts is reported as a
    /// non-destructiveness violation.
    pub fn register_tenant(
        &mut self,
        name: &str,
        data: TenantData,
        options: &RegisterOptions,
    ) -> Result<Registration> {
        validate_name(name)?;
        let _lock = LockGuard::acquire(&self.root)?;
        // another process may have registered tenants since we opened
        self.records = parse_registry(&fs::read_to_string(self.root.join(REGISTRY_FILE))?)?;
        if self.records.iter().any(|r| r.name == name) {
            return Err(Error::Conflict(format!("tenant {name:?} already exists")));
        }
        let before = self.verify_all()?;

        let dataset = match data {
            TenantData::Pairs(p) => p,
            TenantData::Kb(kb) => build_dataset(&kb, self.config.dataset)?,
        };
        let mut cfg = self.config.train.clone();
        cfg.mode = options.mode;
        if let Some(grid) = &options.eta_grid {
            cfg.eta_grid = grid.clone();
        }
        cfg.validate()?;
        let previous = if options.mode.uses_distillation() || options.mode == Mode::AdapterFusion {
            self.teacher_adapters()?
        } else {
            Vec::new()
        };
        let trained = train_tenant(&self.backbone, &dataset, &previous, &cfg, name)?;
        let test = evaluate(&self.backbone, &trained.model, &dataset.split(Split::Test))?;

        let dir = self.tenant_dir(name);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Conflict(format!("{} already exists", dir.display())));
            }
            Err(e) => return Err(e.into()),
        }
        let written = self.write_tenant(name, &dataset, &trained, &test, &cfg);
        let (record, report) = match written {
            Ok(x) => x,
            Err(e) => {
                let _ = fs::remove_dir_all(&dir);
                return Err(e);
            }
        };

        let mut records = self.records.clone();
        records.push(record.clone());
        write_atomic(
            &self.root.join(REGISTRY_FILE),
            registry_to_text(&records).as_bytes(),
        )?;
        self.records = records;

        let prior = self.records.len() - 1;
        let after: Vec<(String, String)> = self.verify_all()?.into_iter().take(prior).collect();
        if after != before {
            return Err(Error::NonDestructive(format!(
                "registering {name} changed earlier tenant artifacts"
            )));
        }
        Ok(Registration {
            record,
            report,
            test,
            prior_checked: prior,
        })
    }

    fn write_tenant(
        &self,
        name: &str,
        dataset: &LabeledPairs,
        trained: &TrainedTenant,
        test: &EvalReport,
        cfg: &crate::trainer::TrainConfig,
    ) -> Result<(TenantRecord, RunReport)> {
        let dir = self.tenant_dir(name);
        let mut files = Vec::new();
        let mut put = |role: &str, file: String, bytes: &[u8]| -> Result<()> {
            write_atomic(&dir.join(&file), bytes)?;
            self.log_access(name, &file, "write")?;
            files.push(ArtifactRef {
                role: role.into(),
                file,
                hash: sha256_hex(bytes),
            });
            Ok(())
        };
        match &trained.model {
            TenantModel::Head { .. } => {}
            TenantModel::Adapter { adapter, .. } => {
                put("adapter", "adapter.bin".into(), &adapter.to_bytes()?)?
            }
            TenantModel::Full { weights, .. } => put(
                "backbone",
                "backbone.bin".into(),
                &self.backbone.save_weights(weights),
            )?,
            TenantModel::Fusion {
                adapters, omega, ..
            } => {
                for (i, a) in adapters.iter().enumerate() {
                    put("fused", format!("fused_{i:02}.bin"), &a.to_bytes()?)?;
                }
                let own = adapters
                    .last()
                    .ok_or_else(|| Error::Usage("fusion without adapters".into()))?;
                put("adapter", "adapter.bin".into(), &own.to_bytes()?)?;
                put("fusion", "fusion.bin".into(), &omega.to_bytes())?;
            }
        }
        put("head", "head.bin".into(), &trained.model.head().to_bytes())?;
        put(
            "dataset",
            "dataset.tsv".into(),
            dataset.to_text().as_bytes(),
        )?;

        let mut report = RunReport::default();
        let ordinal = self.records.len() + 1;
        report
            .field("tenant", name)
            .field("ordinal", ordinal)
            .field("mode", cfg.mode)
            .field("teachers", trained.teachers.join(","))
            .field("self_teacher", cfg.mode == Mode::AdapterDistill)
            .field(
                "eta",
                trained
                    .eta
                    .map_or_else(|| "-".to_string(), |e| e.to_string()),
            )
            .field("epochs", cfg.epochs)
            .field("learning_rate", cfg.learning_rate)
            .field("bottleneck", cfg.bottleneck)
            .field("seed", cfg.seed)
            .field(
                "backbone_fingerprint",
                self.backbone.weights().fingerprint(),
            )
            .field("test_accuracy", test.accuracy)
            .field(
                "test_auc",
                test.auc
                    .map_or_else(|| "nan".to_string(), |a| a.to_string()),
            );
        if cfg.mode == Mode::AdapterFusion {
            report.field(
                "fusion_note",
                "student adapter frozen during fusion training; fusion kept for inference",
            );
        }
        for (eta, acc, auc) in &trained.eta_scores {
            report.field(
                &format!("eta_score[{eta}]"),
                format!("{acc} {}", auc.map_or(f64::NAN, |a| a)),
            );
        }
        for split in Split::ALL {
            let examples = dataset.split(split);
            if examples.is_empty() {
                continue;
            }
            report.metrics.push((
                split.to_string(),
                evaluate(&self.backbone, &trained.model, &examples)?,
            ));
        }
        put("report", "report.txt".into(), report.to_text().as_bytes())?;
        let curves = write_curves_csv(&[
            ("stage1", &trained.stage1_curve),
            ("stage2", &trained.stage2_curve),
        ]);
        put("curves", "curves.csv".into(), curves.as_bytes())?;

        let record = TenantRecord {
            name: name.to_string(),
            ordinal,
            mode: cfg.mode,
            registered_at: now_secs(),
            teachers: trained.teachers.clone(),
            eta: trained.eta,
            content_hash: content_hash(&files),
            files,
        };
        Ok((record, report))
    }
}
