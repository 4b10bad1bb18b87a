use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use d2k::backbone::{train_rec, BackboneConfig, Injection, RecModel};
use d2k::dataio::{
    gen_synthetic, load_logs, load_logs_with_vocab, partition, save_logs, DatasetPartition, FeatureSchema, PartitionConfig, Sample,
    SynthConfig, Vocabulary,
};
use d2k::encoder::{train_encoder, EncoderConfig, EncoderModel};
use d2k::harness::{bench_retrieval, run_experiment, ExperimentConfig, FeatureSet, Method, MetricPair};
use d2k::kbase::{generate_kb, update_kb, KnowledgeBase, TernaryKey, UpdatePolicy};
use d2k::numeric::TrainConfig;
use d2k::utilize::Adaptation;

const SCHEMA_FILE: &str = "schema.txt";
const LOGS_FILE: &str = "logs.tsv";
const VOCAB_FILE: &str = "vocab.json";

#[derive(Parser)]
#[command(name = "d2k", version, about = "Ternary knowledge bases for click-prediction models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData(GenDataArgs),
    /// Train a knowledge encoder on the old blocks.
    TrainEncoder(TrainEncoderArgs),
    /// Build, update or inspect knowledge bases.
    #[command(subcommand)]
    Kb(KbCommand),
    /// Train a click-prediction backbone on the training blocks.
    TrainRec(TrainRecArgs),
    /// Evaluate a trained backbone on the test blocks.
    Eval(EvalArgs),
    /// Run a multi-method, multi-seed experiment.
    Experiment(ExperimentArgs),
    /// Time batched retrieval against a knowledge base.
    Bench(BenchArgs),
}

#[derive(Subcommand)]
enum KbCommand {
    /// Generate a base from old data with a trained encoder.
    Build(KbBuildArgs),
    /// Merge knowledge from a newer encoder and newer data.
    Update(KbUpdateArgs),
    /// Print entry counts and size.
    Stats {
        #[arg(long)]
        kb: PathBuf,
    },
}

#[derive(Args, Clone)]
struct SynthArgs {
    /// Dataset generator seed.
    #[arg(long, default_value_t = 42)]
    data_seed: u64,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    users: Option<u32>,
    #[arg(long)]
    items: Option<u32>,
    #[arg(long)]
    contexts: Option<u32>,
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    bias: Option<f64>,
    #[arg(long)]
    drift_rate: Option<f64>,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        let mut c = SynthConfig::desk_scale();
        macro_rules! set {
            ($($field:ident => $target:ident),*) => {$(
                if let Some(v) = self.$field {
                    c.$target = v;
                }
            )*};
        }
        set!(samples => n_samples, users => n_users, items => n_items, contexts => n_ctx, windows => n_windows, sigma => sigma, bias => bias, drift_rate => drift_rate);
        c
    }
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(Args, Clone)]
struct PartitionArgs {
    /// Last block of the old data.
    #[arg(long, default_value_t = 4)]
    p1: usize,
    /// Last block of the training data.
    #[arg(long, default_value_t = 5)]
    p2: usize,
    /// Blocks dropped between old and training data.
    #[arg(long, default_value_t = 0)]
    gap: usize,
    #[arg(long, default_value_t = 86_400)]
    window_seconds: i64,
    /// Start of block 1; defaults to the earliest timestamp.
    #[arg(long)]
    origin: Option<i64>,
}

impl PartitionArgs {
    fn config(&self) -> PartitionConfig {
        PartitionConfig {
            window_seconds: self.window_seconds,
            p1: self.p1,
            p2: self.p2,
            gap: self.gap,
            origin: self.origin,
        }
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    min_delta: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            min_delta: self.min_delta,
            seed: self.seed,
        }
    }
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory holding schema.txt, logs.tsv and vocab.json.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    partition: PartitionArgs,
    /// Explicit 1-based inclusive block range, e.g. `1-4`; overrides the
    /// range implied by the partition.
    #[arg(long)]
    blocks: Option<String>,
    /// Comma-separated fields used in knowledge keys.
    #[arg(long, value_delimiter = ',')]
    kb_fields: Option<Vec<String>>,
}

#[derive(Args)]
struct TrainEncoderArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    knowledge_dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct KbBuildArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KbUpdateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Existing base.
    #[arg(long)]
    kb: PathBuf,
    /// Encoder trained on the newer data.
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long, default_value = "rp")]
    policy: UpdatePolicy,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainRecArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "plain")]
    injection: Injection,
    #[arg(long, default_value = "none")]
    adaptation: Adaptation,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [64, 32])]
    hidden: Vec<usize>,
    /// Disable the pairwise factorization-machine term.
    #[arg(long)]
    no_fm: bool,
    #[arg(long, default_value_t = 1)]
    adapt_layers: usize,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    kb: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    /// JSON experiment configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; a synthetic dataset is generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    p1: Option<usize>,
    #[arg(long)]
    p2: Option<usize>,
    #[arg(long)]
    gap: Option<usize>,
    #[arg(long)]
    window_seconds: Option<i64>,
    #[arg(long)]
    injection: Option<Injection>,
    /// Trailing share of the training blocks held out for early stopping;
    /// 0 disables validation.
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Epochs without validation improvement before training stops.
    #[arg(long)]
    patience: Option<usize>,
    /// Knowledge feature set as `name=field,field,...`; repeatable.
    #[arg(long = "feature-set")]
    feature_sets: Vec<String>,
    /// Write one JSON record per cell to this file.
    #[arg(long)]
    records: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    data: PathBuf,
    /// Base to query; an empty base of width `--dim` when absent.
    #[arg(long)]
    kb: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Pad the base with random keys up to this many entries.
    #[arg(long)]
    pad_to: Option<usize>,
    #[arg(long, default_value_t = 1024)]
    batch: usize,
    #[arg(long, default_value_t = 20)]
    batches: usize,
}

struct Dataset {
    schema: FeatureSchema,
    vocab_sizes: Vec<usize>,
    samples: Vec<Sample>,
}

/// Loads a dataset directory. The vocabulary is read from vocab.json, or
/// built from the logs and written there on first use so IDs stay stable.
fn load_dataset(dir: &Path) -> Result<Dataset> {
    let schema_text = fs::read_to_string(dir.join(SCHEMA_FILE)).with_context(|| format!("reading {}", dir.join(SCHEMA_FILE).display()))?;
    let schema = FeatureSchema::parse(&schema_text)?;
    let logs = dir.join(LOGS_FILE);
    let vocab_path = dir.join(VOCAB_FILE);
    let (samples, vocab) = if vocab_path.exists() {
        let vocab: Vocabulary = serde_json::from_str(&fs::read_to_string(&vocab_path)?)?;
        (load_logs_with_vocab(&logs, &schema, &vocab)?, vocab)
    } else {
        let (samples, vocab) = load_logs(&logs, &schema)?;
        fs::write(&vocab_path, serde_json::to_string(&vocab)?)?;
        (samples, vocab)
    };
    Ok(Dataset {
        schema,
        vocab_sizes: vocab.sizes(),
        samples,
    })
}

fn parse_blocks(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once('-').unwrap_or((s, s));
    let range = (a.trim().parse()?, b.trim().parse()?);
    if range.0 == 0 || range.1 < range.0 {
        bail!("block range {s:?} must be 1-based and ascending");
    }
    Ok(range)
}

/// Loaded dataset, its partition and the schema restricted to the requested
/// knowledge fields.
struct Prepared {
    data: Dataset,
    part: DatasetPartition,
    kb_schema: FeatureSchema,
}

impl Prepared {
    fn new(args: &DataArgs) -> Result<Self> {
        let data = load_dataset(&args.data)?;
        let part = partition(&data.samples, args.partition.config())?;
        let kb_schema = match &args.kb_fields {
            Some(f) => data.schema.with_kb_subset(Some(f.clone()))?,
            None => data.schema.clone(),
        };
        Ok(Self { data, part, kb_schema })
    }

    /// Samples in the explicit block range, or `default` blocks otherwise.
    fn select(&self, blocks: &Option<String>, default: std::ops::RangeInclusive<usize>) -> Result<Vec<Sample>> {
        let range = match blocks {
            Some(s) => {
                let (a, b) = parse_blocks(s)?;
                if b > self.part.num_blocks() {
                    bail!("block {b} is past the last block {}", self.part.num_blocks());
                }
                a..=b
            }
            None => default,
        };
        let idx = self.part.indices(range);
        if idx.is_empty() {
            bail!("selected blocks hold no samples");
        }
        Ok(idx.into_iter().map(|i| self.data.samples[i].clone()).collect())
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let data = gen_synthetic(&args.synth.config(), args.synth.data_seed)?;
    fs::create_dir_all(&args.out)?;
    let vocab = Vocabulary::numeric(&data.vocab_sizes);
    fs::write(args.out.join(SCHEMA_FILE), data.schema.to_text())?;
    save_logs(args.out.join(LOGS_FILE), &data.schema, &data.samples, &vocab)?;
    fs::write(args.out.join(VOCAB_FILE), serde_json::to_string(&vocab)?)?;
    let clicks = data.samples.iter().filter(|s| s.label == 1).count();
    eprintln!(
        "wrote {} samples ({:.1}% clicks) to {}",
        data.samples.len(),
        100.0 * clicks as f64 / data.samples.len() as f64,
        args.out.display()
    );
    Ok(())
}

fn train_encoder_cmd(args: TrainEncoderArgs) -> Result<()> {
    let p = Prepared::new(&args.data)?;
    let old = p.select(&args.data.blocks, p.part.old_blocks())?;
    let config = EncoderConfig {
        dim: args.dim,
        knowledge_dim: args.knowledge_dim,
        heads: args.heads,
        train: args.train.config(),
        ..EncoderConfig::default()
    };
    let start = Instant::now();
    let model = train_encoder(&old, &p.data.schema, &p.data.vocab_sizes, config)?;
    model.save(&args.out)?;
    eprintln!("trained encoder on {} samples in {:.1}s", old.len(), start.elapsed().as_secs_f64());
    print_json(&model.history)
}

fn kb_build(args: KbBuildArgs) -> Result<()> {
    let p = Prepared::new(&args.data)?;
    let old = p.select(&args.data.blocks, p.part.old_blocks())?;
    let encoder = EncoderModel::load(&args.encoder)?;
    let start = Instant::now();
    let kb = generate_kb(&old, &encoder, &p.kb_schema)?;
    kb.save(&args.out)?;
    eprintln!("built {} entries in {:.1}s", kb.len(), start.elapsed().as_secs_f64());
    print_json(&kb.stats())
}

fn kb_update(args: KbUpdateArgs) -> Result<()> {
    let p = Prepared::new(&args.data)?;
    let new = p.select(&args.data.blocks, p.part.train_blocks())?;
    let kb = KnowledgeBase::load(&args.kb)?;
    let encoder = EncoderModel::load(&args.encoder)?;
    let updated = update_kb(&kb, &new, &encoder, &p.kb_schema, args.policy)?;
    updated.save(&args.out)?;
    eprintln!("{} entries before, {} after", kb.len(), updated.len());
    print_json(&updated.stats())
}

fn load_kb(path: &Option<PathBuf>) -> Result<Option<KnowledgeBase>> {
    path.as_ref().map(KnowledgeBase::load).transpose().map_err(Into::into)
}

fn train_rec_cmd(args: TrainRecArgs) -> Result<()> {
    let p = Prepared::new(&args.data)?;
    let train = p.select(&args.data.blocks, p.part.train_blocks())?;
    let kb = load_kb(&args.kb)?;
    let config = BackboneConfig {
        dim: args.dim,
        hidden: args.hidden,
        fm: !args.no_fm,
        injection: args.injection,
        adaptation: args.adaptation,
        adapt_layers: args.adapt_layers,
        knowledge_dim: kb.as_ref().map_or(8, KnowledgeBase::dim),
        train: args.train.config(),
        ..BackboneConfig::default()
    };
    let start = Instant::now();
    let model = train_rec(&train, kb.as_ref(), &p.kb_schema, &p.data.vocab_sizes, config)?;
    model.save(&args.out)?;
    eprintln!("trained on {} samples in {:.1}s", train.len(), start.elapsed().as_secs_f64());
    print_json(&model.history)
}

fn eval(args: EvalArgs) -> Result<()> {
    let p = Prepared::new(&args.data)?;
    let test = p.select(&args.data.blocks, p.part.test_blocks())?;
    let model = RecModel::load(&args.model)?;
    let kb = load_kb(&args.kb)?;
    let scores = model.predict(&test, kb.as_ref())?;
    let labels: Vec<f64> = test.iter().map(Sample::label_f64).collect();
    print_json(&MetricPair::compute(&scores, &labels)?)
}

fn experiment(args: ExperimentArgs) -> Result<bool> {
    let mut config = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?).with_context(|| format!("parsing {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(m) = args.methods {
        config.methods = m;
    }
    if let Some(s) = args.seeds {
        config.seeds = s;
    }
    macro_rules! set_partition {
        ($($field:ident),*) => {$(
            if let Some(v) = args.$field {
                config.partition.$field = v;
            }
        )*};
    }
    set_partition!(p1, p2, gap, window_seconds);
    if let Some(i) = args.injection {
        config.injection = i;
    }
    if let Some(v) = args.validation_fraction {
        config.validation_fraction = v;
    }
    if let Some(p) = args.patience {
        config.patience = p;
    }
    if !args.feature_sets.is_empty() {
        config.feature_sets = args
            .feature_sets
            .iter()
            .map(|spec| match spec.split_once('=') {
                Some((name, fields)) => FeatureSet {
                    name: name.to_string(),
                    fields: Some(fields.split(',').map(|f| f.trim().to_string()).collect()),
                },
                None if spec == "full" => FeatureSet::full(),
                None => FeatureSet {
                    name: spec.clone(),
                    fields: None,
                },
            })
            .collect();
    }
    let data = match &args.data {
        Some(dir) => load_dataset(dir)?,
        None => {
            let d = gen_synthetic(&args.synth.config(), args.synth.data_seed)?;
            config.partition.origin.get_or_insert(0);
            Dataset {
                schema: d.schema,
                vocab_sizes: d.vocab_sizes,
                samples: d.samples,
            }
        }
    };
    let report = run_experiment(&data.samples, &data.schema, &data.vocab_sizes, &config)?;
    print!("{}", report.to_table());
    for c in report.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!("cell {} seed {} failed: {}", c.method, c.seed, c.error.as_deref().unwrap_or_default());
    }
    if let Some(path) = &args.records {
        fs::write(path, report.to_json_lines()?)?;
    }
    Ok(!report.failed())
}

fn bench(args: BenchArgs) -> Result<()> {
    let data = load_dataset(&args.data)?;
    let mut kb = match &args.kb {
        Some(path) => KnowledgeBase::load(path)?,
        None => KnowledgeBase::new(args.dim, data.schema.layout_hash()),
    };
    if let Some(target) = args.pad_to {
        pad_base(&mut kb, &data, target)?;
    }
    let b = bench_retrieval(&kb, &data.samples, &data.schema, args.batch, args.batches)?;
    print_json(&b)
}

/// Adds random keys over the schema's field triples until `kb` holds
/// `target` entries.
fn pad_base(kb: &mut KnowledgeBase, data: &Dataset, target: usize) -> Result<()> {
    let triples = data.schema.query_triples();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9AD);
    let mut v = vec![0f32; kb.dim()];
    while kb.len() < target {
        let t = triples[rng.gen_range(0..triples.len())];
        let pos = t.map(|f| data.schema.side_position(f) as u16);
        let vals: [u32; 3] = std::array::from_fn(|_| rng.gen_range(0..u32::MAX));
        for x in &mut v {
            *x = rng.gen_range(-1.0..1.0);
        }
        kb.insert(TernaryKey::new(pos, vals), &v)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::TrainEncoder(a) => train_encoder_cmd(a).map(|_| true),
        Command::Kb(KbCommand::Build(a)) => kb_build(a).map(|_| true),
        Command::Kb(KbCommand::Update(a)) => kb_update(a).map(|_| true),
        Command::Kb(KbCommand::Stats { kb }) => KnowledgeBase::load(&kb).map_err(Into::into).and_then(|kb| print_json(&kb.stats())).map(|_| true),
        Command::TrainRec(a) => train_rec_cmd(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Experiment(a) => experiment(a),
        Command::Bench(a) => bench(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
