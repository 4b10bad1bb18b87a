use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::MetricPair;
use crate::backbone::{BackboneConfig, Injection, RecModel};
use crate::dataio::{partition, DatasetPartition, FeatureSchema, PartitionConfig, Sample};
use crate::encoder::{train_encoder, EncoderConfig, EncoderModel};
use crate::error::{D2kError, Result};
use crate::kbase::{generate_kb, KnowledgeBase};
use crate::utilize::Adaptation;

/// Training protocol of one experiment cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain backbone on the training window only.
    FixedR,
    /// Plain backbone on old and training data together.
    FixedA,
    /// Plain backbone trained block by block, oldest first.
    Incremental,
    /// Plain backbone on the training window plus a random sample of old data.
    RandomCoreset,
    /// Global knowledge, no adaptation.
    D2kBase,
    D2kAdpShare,
    D2kAdpSep,
    D2kAdpSmall,
    /// Linear head on global knowledge alone.
    DirectOnly,
    /// Linear head on adapted knowledge alone.
    DirectOnlyAdp,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::FixedR,
        Method::FixedA,
        Method::Incremental,
        Method::RandomCoreset,
        Method::D2kBase,
        Method::D2kAdpShare,
        Method::D2kAdpSep,
        Method::D2kAdpSmall,
        Method::DirectOnly,
        Method::DirectOnlyAdp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::FixedR => "fixed_r",
            Method::FixedA => "fixed_a",
            Method::Incremental => "incremental",
            Method::RandomCoreset => "random_coreset",
            Method::D2kBase => "d2k_base",
            Method::D2kAdpShare => "d2k_adp_share",
            Method::D2kAdpSep => "d2k_adp_sep",
            Method::D2kAdpSmall => "d2k_adp_small",
            Method::DirectOnly => "direct_only",
            Method::DirectOnlyAdp => "direct_only_adp",
        }
    }

    /// Whether the cell needs an encoder and a knowledge base.
    pub fn uses_knowledge(self) -> bool {
        self.mode(Injection::Concat).0 != Injection::Plain
    }

    /// Injection and adaptation used by this method, given the injection
    /// configured for knowledge-enhanced backbones.
    fn mode(self, injection: Injection) -> (Injection, Adaptation) {
        match self {
            Method::FixedR | Method::FixedA | Method::Incremental | Method::RandomCoreset => (Injection::Plain, Adaptation::None),
            Method::D2kBase => (injection, Adaptation::None),
            Method::D2kAdpShare => (injection, Adaptation::Share),
            Method::D2kAdpSep => (injection, Adaptation::Sep),
            Method::D2kAdpSmall => (injection, Adaptation::Small),
            Method::DirectOnly => (Injection::DirectOnly, Adaptation::None),
            Method::DirectOnlyAdp => (Injection::DirectOnly, Adaptation::Share),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = D2kError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| D2kError::config(format!("unknown method {s:?}")))
    }
}

/// Named restriction of the fields that take part in knowledge keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub name: String,
    /// `None` keeps every field.
    pub fields: Option<Vec<String>>,
}

impl FeatureSet {
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            fields: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    /// Model seeds; each seed is one cell per method.
    pub seeds: Vec<u64>,
    pub partition: PartitionConfig,
    /// Encoder settings; the training seed is replaced by the cell seed.
    pub encoder: EncoderConfig,
    /// Backbone settings; injection, adaptation, knowledge width and seed
    /// are set per cell.
    pub backbone: BackboneConfig,
    /// Injection used by the knowledge-enhanced backbone methods.
    pub injection: Injection,
    /// Knowledge-base feature sets; knowledge cells run once per set.
    pub feature_sets: Vec<FeatureSet>,
    /// Fraction of the old data added by the coreset baseline.
    pub coreset_fraction: f64,
    /// Trailing fraction of the training window held out for early
    /// stopping; 0 trains until the training loss plateaus instead.
    pub validation_fraction: f64,
    /// Epochs without held-out improvement before training stops.
    pub patience: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            seeds: (1..=5).collect(),
            partition: PartitionConfig {
                window_seconds: 86_400,
                p1: 4,
                p2: 5,
                gap: 0,
                origin: Some(0),
            },
            encoder: EncoderConfig::default(),
            backbone: BackboneConfig::default(),
            injection: Injection::TowerLr,
            feature_sets: vec![FeatureSet::full()],
            coreset_fraction: 0.1,
            validation_fraction: 0.1,
            patience: 2,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.seeds.is_empty() {
            return Err(D2kError::config("an experiment needs at least one method and one seed"));
        }
        if self.feature_sets.is_empty() {
            return Err(D2kError::config("an experiment needs at least one feature set"));
        }
        if !(0.0..=1.0).contains(&self.coreset_fraction) {
            return Err(D2kError::config("coreset_fraction must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(D2kError::config("validation_fraction must lie in [0, 1)"));
        }
        if !self.injection.uses_knowledge() || self.injection == Injection::DirectOnly {
            return Err(D2kError::config("injection must be concat, tower_lr or tower_mlp"));
        }
        self.encoder.validate()?;
        self.backbone.validate()
    }
}

/// Outcome of one (method, feature set, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub method: Method,
    /// Knowledge feature set; absent for methods without knowledge.
    pub feature_set: Option<String>,
    pub seed: u64,
    pub auc: Option<f64>,
    pub logloss: Option<f64>,
    pub error: Option<String>,
    pub train_samples: usize,
    pub test_samples: usize,
    pub kb_entries: Option<usize>,
    pub kb_bytes: Option<usize>,
    /// Seconds spent training the encoder shared by this seed's cells.
    pub encoder_seconds: Option<f64>,
    /// Seconds spent generating the knowledge base.
    pub kb_build_seconds: Option<f64>,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

impl CellRecord {
    pub fn metrics(&self) -> Option<MetricPair> {
        Some(MetricPair {
            auc: self.auc?,
            logloss: self.logloss?,
        })
    }
}

/// Mean and sample standard deviation over the successful seeds of one
/// method and feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub feature_set: Option<String>,
    pub runs: usize,
    pub failures: usize,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub logloss_mean: f64,
    pub logloss_std: f64,
    pub kb_entries: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub cells: Vec<CellRecord>,
    pub summaries: Vec<MethodSummary>,
}

impl ExperimentReport {
    pub fn failed(&self) -> bool {
        self.cells.iter().any(|c| c.error.is_some())
    }

    pub fn summary(&self, method: Method, feature_set: Option<&str>) -> Option<&MethodSummary> {
        self.summaries
            .iter()
            .find(|s| s.method == method && s.feature_set.as_deref() == feature_set.filter(|_| method.uses_knowledge()))
    }

    /// Mean test AUC of `method`, using the first feature set for knowledge
    /// methods.
    pub fn mean_auc(&self, method: Method) -> Option<f64> {
        let fs = self.config.feature_sets.first().map(|f| f.name.as_str());
        self.summary(method, fs).filter(|s| s.runs > 0).map(|s| s.auc_mean)
    }

    /// One JSON record per cell.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.cells {
            out.push_str(&serde_json::to_string(c).map_err(|e| D2kError::config(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:<10} {:>4} {:>19} {:>19} {:>10}",
            "method", "features", "runs", "auc", "logloss", "kb_entries"
        );
        for s in &self.summaries {
            let _ = writeln!(
                out,
                "{:<16} {:<10} {:>4} {:>9.4} ± {:<7.4} {:>9.4} ± {:<7.4} {:>10}{}",
                s.method.name(),
                s.feature_set.as_deref().unwrap_or("-"),
                s.runs,
                s.auc_mean,
                s.auc_std,
                s.logloss_mean,
                s.logloss_std,
                s.kb_entries.map_or("-".to_string(), |n| n.to_string()),
                if s.failures > 0 { format!("  ({} failed)", s.failures) } else { String::new() }
            );
        }
        out
    }
}

/// Old-data blocks, training blocks and test indices of one run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Splits {
    pub old_blocks: Vec<Vec<usize>>,
    pub train_blocks: Vec<Vec<usize>>,
    pub test: Vec<usize>,
}

impl Splits {
    fn from_partition(p: &DatasetPartition) -> Self {
        Self {
            old_blocks: p.old_blocks().map(|b| p.blocks[b - 1].clone()).collect(),
            train_blocks: p.train_blocks().map(|b| p.blocks[b - 1].clone()).collect(),
            test: p.test(),
        }
    }

    fn old(&self) -> Vec<usize> {
        self.old_blocks.concat()
    }

    fn train(&self) -> Vec<usize> {
        self.train_blocks.concat()
    }

    /// Training-window indices split into a fitting part and a trailing
    /// held-out part of `fraction` of the window.
    fn train_and_valid(&self, fraction: f64) -> (Vec<usize>, Vec<usize>) {
        let mut fit = self.train();
        let k = (fit.len() as f64 * fraction).round() as usize;
        let valid = fit.split_off(fit.len() - k.min(fit.len()));
        (fit, valid)
    }
}

fn pick(samples: &[Sample], idx: &[usize]) -> Vec<Sample> {
    idx.iter().map(|&i| samples[i].clone()).collect()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every selected (method, feature set, seed) cell on a time-ordered
/// dataset. Cell failures are recorded in the report; only invalid
/// configuration or partitioning aborts the run.
pub fn run_experiment(samples: &[Sample], schema: &FeatureSchema, vocab_sizes: &[usize], config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let part = partition(samples, config.partition)?;
    run_on_splits(samples, schema, vocab_sizes, config, &Splits::from_partition(&part))
}

struct SeedKnowledge {
    encoder_seconds: f64,
    bases: BTreeMap<String, (Result<KnowledgeBase>, f64)>,
}

pub(crate) fn run_on_splits(samples: &[Sample], schema: &FeatureSchema, vocab_sizes: &[usize], config: &ExperimentConfig, splits: &Splits) -> Result<ExperimentReport> {
    let old = pick(samples, &splits.old());
    let (fit_idx, valid_idx) = splits.train_and_valid(config.validation_fraction);
    let train = pick(samples, &fit_idx);
    let valid = pick(samples, &valid_idx);
    let test = pick(samples, &splits.test);
    if train.is_empty() || test.is_empty() {
        return Err(D2kError::config("training and test ranges must be non-empty"));
    }
    let subsets: Vec<(String, FeatureSchema)> = config
        .feature_sets
        .iter()
        .map(|fs| Ok((fs.name.clone(), schema.with_kb_subset(fs.fields.clone())?)))
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for &seed in &config.seeds {
        let needs_kb = config.methods.iter().any(|m| m.uses_knowledge());
        let knowledge = needs_kb.then(|| build_knowledge(&old, schema, vocab_sizes, config, &subsets, seed));
        for &method in &config.methods {
            if !method.uses_knowledge() {
                let sets = CellData {
                    samples,
                    train: &train,
                    train_idx: &fit_idx,
                    valid: &valid,
                    test: &test,
                };
                cells.push(run_plain_cell(&sets, schema, vocab_sizes, config, splits, method, seed));
                continue;
            }
            let k = knowledge.as_ref().expect("knowledge built when needed");
            for (name, sub) in &subsets {
                let (kb, kb_secs) = &k.bases[name];
                let mut rec = CellRecord {
                    method,
                    feature_set: Some(name.clone()),
                    seed,
                    auc: None,
                    logloss: None,
                    error: None,
                    train_samples: train.len(),
                    test_samples: test.len(),
                    kb_entries: None,
                    kb_bytes: None,
                    encoder_seconds: Some(k.encoder_seconds),
                    kb_build_seconds: Some(*kb_secs),
                    train_seconds: 0.0,
                    eval_seconds: 0.0,
                };
                match kb {
                    Ok(kb) => {
                        let st = kb.stats();
                        rec.kb_entries = Some(st.entries);
                        rec.kb_bytes = Some(st.bytes);
                        let (inj, adp) = method.mode(config.injection);
                        let cfg = BackboneConfig {
                            injection: inj,
                            adaptation: adp,
                            knowledge_dim: kb.dim(),
                            train: crate::numeric::TrainConfig { seed, ..config.backbone.train },
                            ..config.backbone.clone()
                        };
                        let result = fit_and_eval(&train, &valid, config.patience, &test, Some(kb), sub, vocab_sizes, cfg, &mut rec);
                        rec.error = result.err().map(|e| e.to_string());
                    }
                    Err(e) => rec.error = Some(e.to_string()),
                }
                cells.push(rec);
            }
        }
    }
    let summaries = summarize(&cells, config);
    Ok(ExperimentReport {
        config: config.clone(),
        cells,
        summaries,
    })
}

fn build_knowledge(old: &[Sample], schema: &FeatureSchema, vocab_sizes: &[usize], config: &ExperimentConfig, subsets: &[(String, FeatureSchema)], seed: u64) -> SeedKnowledge {
    let start = Instant::now();
    let enc_cfg = EncoderConfig {
        train: crate::numeric::TrainConfig { seed, ..config.encoder.train },
        ..config.encoder
    };
    let encoder: Result<EncoderModel> = if old.is_empty() {
        Err(D2kError::config("no old data to train the encoder on"))
    } else {
        train_encoder(old, schema, vocab_sizes, enc_cfg)
    };
    let encoder_seconds = start.elapsed().as_secs_f64();
    let mut bases = BTreeMap::new();
    for (name, sub) in subsets {
        let start = Instant::now();
        let kb = match &encoder {
            Ok(enc) => generate_kb(old, enc, sub),
            Err(e) => Err(D2kError::Training {
                step: 0,
                msg: format!("encoder unavailable: {e}"),
            }),
        };
        bases.insert(name.clone(), (kb, start.elapsed().as_secs_f64()));
    }
    SeedKnowledge {
        encoder_seconds,
        bases,
    }
}

/// Samples of one run: the fitting part of the training window (with its
/// indices), the held-out part and the test range.
struct CellData<'a> {
    samples: &'a [Sample],
    train: &'a [Sample],
    train_idx: &'a [usize],
    valid: &'a [Sample],
    test: &'a [Sample],
}

fn run_plain_cell(
    data: &CellData<'_>,
    schema: &FeatureSchema,
    vocab_sizes: &[usize],
    config: &ExperimentConfig,
    splits: &Splits,
    method: Method,
    seed: u64,
) -> CellRecord {
    let cfg = BackboneConfig {
        injection: Injection::Plain,
        adaptation: Adaptation::None,
        train: crate::numeric::TrainConfig { seed, ..config.backbone.train },
        ..config.backbone.clone()
    };
    let mut rec = CellRecord {
        method,
        feature_set: None,
        seed,
        auc: None,
        logloss: None,
        error: None,
        train_samples: 0,
        test_samples: data.test.len(),
        kb_entries: None,
        kb_bytes: None,
        encoder_seconds: None,
        kb_build_seconds: None,
        train_seconds: 0.0,
        eval_seconds: 0.0,
    };
    let (samples, test, valid, patience) = (data.samples, data.test, data.valid, config.patience);
    let result = match method {
        Method::FixedR => fit_and_eval(data.train, valid, patience, test, None, schema, vocab_sizes, cfg, &mut rec),
        Method::FixedA => {
            let mut idx = splits.old();
            idx.extend_from_slice(data.train_idx);
            fit_and_eval(&pick(samples, &idx), valid, patience, test, None, schema, vocab_sizes, cfg, &mut rec)
        }
        Method::RandomCoreset => {
            let old = splits.old();
            let k = (old.len() as f64 * config.coreset_fraction).round() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0E5_E700);
            let mut idx: Vec<usize> = sample_indices(&mut rng, old.len(), k).into_iter().map(|i| old[i]).collect();
            idx.sort_unstable();
            idx.extend_from_slice(data.train_idx);
            fit_and_eval(&pick(samples, &idx), valid, patience, test, None, schema, vocab_sizes, cfg, &mut rec)
        }
        Method::Incremental => run_incremental(samples, test, schema, vocab_sizes, cfg, splits, &mut rec),
        _ => unreachable!("knowledge methods are handled separately"),
    };
    rec.error = result.err().map(|e| e.to_string());
    rec
}

/// Trains on `train` (early-stopped on `valid` when it is non-empty) and
/// scores `test`.
#[allow(clippy::too_many_arguments)]
fn fit_and_eval(
    train: &[Sample],
    valid: &[Sample],
    patience: usize,
    test: &[Sample],
    kb: Option<&KnowledgeBase>,
    schema: &FeatureSchema,
    vocab_sizes: &[usize],
    cfg: BackboneConfig,
    rec: &mut CellRecord,
) -> Result<()> {
    rec.train_samples = train.len();
    let start = Instant::now();
    let mut model = RecModel::new(schema, vocab_sizes, cfg)?;
    let mut trainer = model.trainer()?;
    if valid.is_empty() {
        model.fit(&mut trainer, train, kb)?;
    } else {
        model.fit_validated(&mut trainer, train, valid, kb, patience)?;
    }
    rec.train_seconds = start.elapsed().as_secs_f64();
    evaluate(&model, test, kb, rec)
}

/// Trains one model over old blocks, then training blocks, each until the
/// loss plateaus; optimizer state carries across blocks.
fn run_incremental(
    samples: &[Sample],
    test: &[Sample],
    schema: &FeatureSchema,
    vocab_sizes: &[usize],
    cfg: BackboneConfig,
    splits: &Splits,
    rec: &mut CellRecord,
) -> Result<()> {
    let start = Instant::now();
    let mut model = RecModel::new(schema, vocab_sizes, cfg)?;
    let mut trainer = model.trainer()?;
    for block in splits.old_blocks.iter().chain(&splits.train_blocks) {
        if block.is_empty() {
            continue;
        }
        rec.train_samples += block.len();
        model.fit(&mut trainer, &pick(samples, block), None)?;
    }
    rec.train_seconds = start.elapsed().as_secs_f64();
    evaluate(&model, test, None, rec)
}

fn evaluate(model: &RecModel, test: &[Sample], kb: Option<&KnowledgeBase>, rec: &mut CellRecord) -> Result<()> {
    let start = Instant::now();
    let scores = model.predict(test, kb)?;
    let labels: Vec<f64> = test.iter().map(Sample::label_f64).collect();
    let m = MetricPair::compute(&scores, &labels)?;
    rec.eval_seconds = start.elapsed().as_secs_f64();
    rec.auc = Some(m.auc);
    rec.logloss = Some(m.logloss);
    Ok(())
}

fn summarize(cells: &[CellRecord], config: &ExperimentConfig) -> Vec<MethodSummary> {
    let mut keys: Vec<(Method, Option<String>)> = Vec::new();
    for &m in &config.methods {
        if m.uses_knowledge() {
            keys.extend(config.feature_sets.iter().map(|fs| (m, Some(fs.name.clone()))));
        } else {
            keys.push((m, None));
        }
    }
    keys.into_iter()
        .map(|(method, fs)| {
            let group: Vec<&CellRecord> = cells.iter().filter(|c| c.method == method && c.feature_set == fs).collect();
            let ok: Vec<MetricPair> = group.iter().filter_map(|c| c.metrics()).collect();
            let (auc_mean, auc_std) = mean_std(&ok.iter().map(|m| m.auc).collect::<Vec<_>>());
            let (logloss_mean, logloss_std) = mean_std(&ok.iter().map(|m| m.logloss).collect::<Vec<_>>());
            let entries: Vec<usize> = group.iter().filter_map(|c| c.kb_entries).collect();
            MethodSummary {
                method,
                feature_set: fs,
                runs: ok.len(),
                failures: group.len() - ok.len(),
                auc_mean,
                auc_std,
                logloss_mean,
                logloss_std,
                kb_entries: (!entries.is_empty()).then(|| entries.iter().sum::<usize>() / entries.len()),
            }
        })
        .collect()
}
