use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureSchema, Sample};
use crate::encoder::EmbeddingTable;
use crate::error::{D2kError, Result};
use crate::kbase::KnowledgeBase;
use crate::numeric::{bce_mean, forward_stack, Activation, Dense, EpochMetrics, Gradients, ParamStore, Tape, Tensor2, TrainConfig, Trainer, Var};
use crate::utilize::{retrieve, Adaptation, AdaptationUnit, QueryPlan};

/// How retrieved knowledge reaches the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Injection {
    /// Backbone only; knowledge is ignored.
    Plain,
    /// Knowledge is appended to the input of the deep component.
    Concat,
    /// A linear knowledge tower adds to the backbone logit.
    TowerLr,
    /// A two-layer knowledge tower adds to the backbone logit.
    TowerMlp,
    /// No backbone: a linear head on knowledge alone.
    DirectOnly,
}

impl Injection {
    pub fn uses_knowledge(self) -> bool {
        self != Injection::Plain
    }
}

impl std::str::FromStr for Injection {
    type Err = D2kError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(Self::Plain),
            "concat" => Ok(Self::Concat),
            "tower_lr" => Ok(Self::TowerLr),
            "tower_mlp" => Ok(Self::TowerMlp),
            "direct" | "direct_only" => Ok(Self::DirectOnly),
            other => Err(D2kError::config(format!("unknown injection {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Hidden widths of the deep component.
    pub hidden: Vec<usize>,
    /// Adds the pairwise factorization-machine term to the logit.
    pub fm: bool,
    pub injection: Injection,
    pub adaptation: Adaptation,
    /// Layers `L` of the generated adaptation network.
    pub adapt_layers: usize,
    /// Hidden width of the deep knowledge tower.
    pub tower_hidden: usize,
    /// Knowledge vector width `d_k`; must match the base.
    pub knowledge_dim: usize,
    pub train: TrainConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            hidden: vec![64, 32],
            fm: true,
            injection: Injection::Plain,
            adaptation: Adaptation::None,
            adapt_layers: 1,
            tower_hidden: 32,
            knowledge_dim: 8,
            train: TrainConfig::default(),
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.knowledge_dim == 0 || self.tower_hidden == 0 || self.hidden.contains(&0) {
            return Err(D2kError::config("backbone widths must be positive"));
        }
        if self.adaptation != Adaptation::None && !self.injection.uses_knowledge() {
            return Err(D2kError::config("adaptation requires a knowledge injection mode"));
        }
        if self.adaptation == Adaptation::Small && self.dim < 4 {
            return Err(D2kError::config("small adaptation needs dim >= 4"));
        }
        if self.adaptation != Adaptation::None && self.adapt_layers == 0 {
            return Err(D2kError::config("adapt_layers must be positive"));
        }
        self.train.validate()
    }
}

/// Parameter handles. Parameters are created, and checkpointed, in this
/// order: embedding, separate adaptation embedding, adaptation projection,
/// deep layers, knowledge tower or direct head.
#[derive(Debug, Clone, PartialEq)]
pub struct RecNet {
    pub embedding: Option<EmbeddingTable>,
    pub adapt_embedding: Option<EmbeddingTable>,
    pub adapt_unit: Option<AdaptationUnit>,
    pub deep: Vec<Dense>,
    /// Knowledge tower (tower modes) or knowledge head (direct mode).
    pub tower: Vec<Dense>,
    pub fm: bool,
    pub injection: Injection,
    pub num_fields: usize,
    pub num_queries: usize,
    pub knowledge_dim: usize,
}

impl RecNet {
    pub fn build(params: &mut ParamStore, schema: &FeatureSchema, vocab_sizes: &[usize], cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        if vocab_sizes.len() != schema.num_fields() {
            return Err(D2kError::config(format!(
                "{} vocabulary sizes for {} fields",
                vocab_sizes.len(),
                schema.num_fields()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xBAC0_B0E0);
        let f = schema.num_fields();
        let nq = schema.num_queries();
        let dk = cfg.knowledge_dim;
        let inj = cfg.injection;
        let direct = inj == Injection::DirectOnly;
        let needs_table = !direct || cfg.adaptation == Adaptation::Share;
        let embedding = if needs_table {
            Some(EmbeddingTable::new(params, "embedding", vocab_sizes, cfg.dim, &mut rng)?)
        } else {
            None
        };
        let adapt_dim = match cfg.adaptation {
            Adaptation::None => 0,
            Adaptation::Share | Adaptation::Sep => cfg.dim,
            Adaptation::Small => cfg.dim / 4,
        };
        let adapt_embedding = match cfg.adaptation {
            Adaptation::Sep | Adaptation::Small => Some(EmbeddingTable::new(params, "adapt_embedding", vocab_sizes, adapt_dim, &mut rng)?),
            _ => None,
        };
        let adapt_unit = if cfg.adaptation != Adaptation::None {
            Some(AdaptationUnit::new(params, "adapt", f * adapt_dim, cfg.adapt_layers, dk, &mut rng)?)
        } else {
            None
        };
        let mut deep = Vec::new();
        if !direct {
            let mut width = f * cfg.dim + if inj == Injection::Concat { nq * dk } else { 0 };
            for (i, &h) in cfg.hidden.iter().enumerate() {
                deep.push(Dense::new(params, &format!("deep.{i}"), width, h, Activation::Tanh, &mut rng));
                width = h;
            }
            deep.push(Dense::new(params, &format!("deep.{}", cfg.hidden.len()), width, 1, Activation::Linear, &mut rng));
        }
        let tower = match inj {
            Injection::TowerLr | Injection::DirectOnly => {
                vec![Dense::new(params, "tower.0", nq * dk, 1, Activation::Linear, &mut rng)]
            }
            Injection::TowerMlp => vec![
                Dense::new(params, "tower.0", nq * dk, cfg.tower_hidden, Activation::Tanh, &mut rng),
                Dense::new(params, "tower.1", cfg.tower_hidden, 1, Activation::Linear, &mut rng),
            ],
            _ => Vec::new(),
        };
        Ok(Self {
            embedding,
            adapt_embedding,
            adapt_unit,
            deep,
            tower,
            fm: cfg.fm && !direct,
            injection: inj,
            num_fields: f,
            num_queries: nq,
            knowledge_dim: dk,
        })
    }

    /// Logits (`n × 1`). `knowledge` holds `n · N_q` rows of global knowledge
    /// and must be present iff the injection mode uses knowledge.
    pub fn logits(&self, tape: &mut Tape<'_>, samples: &[&Sample], knowledge: Option<&Tensor2>) -> Result<Var> {
        let n = samples.len();
        let f = self.num_fields;
        let fields: Vec<usize> = (0..f).collect();
        let emb = match &self.embedding {
            Some(table) => Some(table.lookup(tape, samples, &fields)?),
            None => None,
        };
        let x_flat = match (&self.embedding, emb) {
            (Some(t), Some(e)) => Some(tape.reshape(e, n, f * t.dim)?),
            _ => None,
        };
        let kflat = if self.injection.uses_knowledge() {
            let k = knowledge.ok_or_else(|| D2kError::config("this injection mode needs retrieved knowledge"))?;
            if k.shape() != (n * self.num_queries, self.knowledge_dim) {
                return Err(D2kError::config(format!(
                    "knowledge shape {:?}, expected ({}, {})",
                    k.shape(),
                    n * self.num_queries,
                    self.knowledge_dim
                )));
            }
            let mut z = tape.constant(k.clone());
            if let Some(unit) = &self.adapt_unit {
                let x_adp = match &self.adapt_embedding {
                    Some(table) => {
                        let e = table.lookup(tape, samples, &fields)?;
                        tape.reshape(e, n, f * table.dim)?
                    }
                    None => x_flat.expect("shared adaptation uses the backbone embedding"),
                };
                z = unit.apply(tape, x_adp, z, self.num_queries)?;
            }
            Some(tape.reshape(z, n, self.num_queries * self.knowledge_dim)?)
        } else {
            None
        };
        if self.injection == Injection::DirectOnly {
            return forward_stack(tape, kflat.expect("direct mode has knowledge"), &self.tower);
        }
        let x_flat = x_flat.expect("backbone modes have an embedding");
        let deep_in = match (self.injection, kflat) {
            (Injection::Concat, Some(k)) => tape.concat_cols(&[x_flat, k])?,
            _ => x_flat,
        };
        let mut logit = forward_stack(tape, deep_in, &self.deep)?;
        if self.fm {
            let fm = tape.fm_pairwise(emb.expect("backbone modes have an embedding"), f)?;
            logit = tape.add(logit, fm)?;
        }
        if matches!(self.injection, Injection::TowerLr | Injection::TowerMlp) {
            let t = forward_stack(tape, kflat.expect("tower modes have knowledge"), &self.tower)?;
            logit = tape.add(logit, t)?;
        }
        Ok(logit)
    }

    pub fn loss(&self, tape: &mut Tape<'_>, samples: &[&Sample], knowledge: Option<&Tensor2>) -> Result<Var> {
        let logit = self.logits(tape, samples, knowledge)?;
        let pred = tape.sigmoid(logit);
        let labels: Vec<f64> = samples.iter().map(|s| s.label_f64()).collect();
        tape.bce(pred, &labels)
    }
}

/// A recommendation model with its configuration, schema and parameters.
#[derive(Debug, Clone)]
pub struct RecModel {
    pub config: BackboneConfig,
    pub schema: FeatureSchema,
    pub vocab_sizes: Vec<usize>,
    pub params: ParamStore,
    pub net: RecNet,
    pub history: Vec<EpochMetrics>,
}

const INFER_BATCH: usize = 1024;

/// Copies the knowledge rows of the given samples out of a per-sample table.
fn gather_knowledge(all: &Tensor2, idx: &[usize], nq: usize) -> Tensor2 {
    let dk = all.cols();
    let mut out = Tensor2::zeros(idx.len() * nq, dk);
    for (b, &i) in idx.iter().enumerate() {
        out.data_mut()[b * nq * dk..(b + 1) * nq * dk].copy_from_slice(&all.data()[i * nq * dk..(i + 1) * nq * dk]);
    }
    out
}

impl RecModel {
    pub fn new(schema: &FeatureSchema, vocab_sizes: &[usize], config: BackboneConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = RecNet::build(&mut params, schema, vocab_sizes, &config)?;
        Ok(Self {
            config,
            schema: schema.clone(),
            vocab_sizes: vocab_sizes.to_vec(),
            params,
            net,
            history: Vec::new(),
        })
    }

    pub fn injection(&self) -> Injection {
        self.net.injection
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Global knowledge for `samples` (`n · N_q × d_k`), or `None` in plain mode.
    pub fn knowledge_for(&self, samples: &[Sample], kb: Option<&KnowledgeBase>) -> Result<Option<Tensor2>> {
        if !self.net.injection.uses_knowledge() {
            return Ok(None);
        }
        let kb = kb.ok_or_else(|| D2kError::config("this model needs a knowledge base"))?;
        if kb.dim() != self.net.knowledge_dim {
            return Err(D2kError::config(format!(
                "knowledge base width {} does not match model width {}",
                kb.dim(),
                self.net.knowledge_dim
            )));
        }
        if kb.schema_hash() != &self.schema.layout_hash() {
            return Err(D2kError::config("knowledge base was built for a different schema"));
        }
        let plan = QueryPlan::new(&self.schema);
        Ok(Some(retrieve(samples, kb, &plan).vectors))
    }

    pub fn trainer(&self) -> Result<Trainer> {
        Trainer::new(&self.params, self.config.train)
    }

    /// Continues training on `samples` with a frozen base until the loss
    /// plateaus or the epoch budget runs out.
    pub fn fit(&mut self, trainer: &mut Trainer, samples: &[Sample], kb: Option<&KnowledgeBase>) -> Result<Vec<EpochMetrics>> {
        if samples.is_empty() {
            return Err(D2kError::config("cannot train on an empty dataset"));
        }
        for s in samples {
            s.check(&self.schema, &self.vocab_sizes)?;
        }
        let knowledge = self.knowledge_for(samples, kb)?;
        let nq = self.net.num_queries;
        let mut params = std::mem::take(&mut self.params);
        let net = &self.net;
        let result = trainer.fit(&mut params, samples.len(), |p, batch| {
            let refs: Vec<&Sample> = batch.iter().map(|&i| &samples[i]).collect();
            let k = knowledge.as_ref().map(|all| gather_knowledge(all, batch, nq));
            let mut tape = Tape::new(p);
            let loss = net.loss(&mut tape, &refs, k.as_ref())?;
            Ok((tape.value(loss).get(0, 0), tape.backward(loss)))
        });
        self.params = params;
        let hist = result?;
        self.history.extend(hist.iter().copied());
        Ok(hist)
    }

    /// Like [`RecModel::fit`], but scores the log loss on `valid` after
    /// every epoch, stops after `patience` epochs without improvement and
    /// keeps the best epoch's parameters.
    pub fn fit_validated(
        &mut self,
        trainer: &mut Trainer,
        samples: &[Sample],
        valid: &[Sample],
        kb: Option<&KnowledgeBase>,
        patience: usize,
    ) -> Result<Vec<EpochMetrics>> {
        if samples.is_empty() || valid.is_empty() {
            return Err(D2kError::config("validated training needs training and held-out samples"));
        }
        for s in samples.iter().chain(valid) {
            s.check(&self.schema, &self.vocab_sizes)?;
        }
        let knowledge = self.knowledge_for(samples, kb)?;
        let valid_knowledge = self.knowledge_for(valid, kb)?;
        let labels: Vec<f64> = valid.iter().map(Sample::label_f64).collect();
        let nq = self.net.num_queries;
        let mut params = std::mem::take(&mut self.params);
        let net = &self.net;
        let result = trainer.fit_validated(
            &mut params,
            samples.len(),
            |p, batch| {
                let refs: Vec<&Sample> = batch.iter().map(|&i| &samples[i]).collect();
                let k = knowledge.as_ref().map(|all| gather_knowledge(all, batch, nq));
                let mut tape = Tape::new(p);
                let loss = net.loss(&mut tape, &refs, k.as_ref())?;
                Ok((tape.value(loss).get(0, 0), tape.backward(loss)))
            },
            |p| {
                let mut scores = Vec::with_capacity(valid.len());
                for (c, chunk) in valid.chunks(INFER_BATCH).enumerate() {
                    let rows: Vec<usize> = (c * INFER_BATCH..c * INFER_BATCH + chunk.len()).collect();
                    let k = valid_knowledge.as_ref().map(|all| gather_knowledge(all, &rows, nq));
                    scores.extend(predict_with(net, p, chunk, k.as_ref())?);
                }
                Ok(bce_mean(&scores, &labels))
            },
            patience,
        );
        self.params = params;
        let hist = result?;
        self.history.extend(hist.iter().copied());
        Ok(hist)
    }

    /// Click probabilities. Plain mode ignores `kb`.
    pub fn predict(&self, samples: &[Sample], kb: Option<&KnowledgeBase>) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFER_BATCH) {
            let k = self.knowledge_for(chunk, kb)?;
            out.extend(predict_with(&self.net, &self.params, chunk, k.as_ref())?);
        }
        Ok(out)
    }

    /// Mean loss and gradients on a batch with explicit knowledge rows;
    /// exposed for gradient checks.
    pub fn batch_loss(&self, params: &ParamStore, samples: &[&Sample], knowledge: Option<&Tensor2>) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new(params);
        let loss = self.net.loss(&mut tape, samples, knowledge)?;
        Ok((tape.value(loss).get(0, 0), tape.backward(loss)))
    }
}

fn predict_with(net: &RecNet, params: &ParamStore, samples: &[Sample], knowledge: Option<&Tensor2>) -> Result<Vec<f64>> {
    let refs: Vec<&Sample> = samples.iter().collect();
    let mut tape = Tape::new(params);
    let logit = net.logits(&mut tape, &refs, knowledge)?;
    let p = tape.sigmoid(logit);
    Ok(tape.value(p).data().to_vec())
}

/// Trains a model on `samples`; `kb` is required by every mode except plain.
pub fn train_rec(samples: &[Sample], kb: Option<&KnowledgeBase>, schema: &FeatureSchema, vocab_sizes: &[usize], config: BackboneConfig) -> Result<RecModel> {
    let mut model = RecModel::new(schema, vocab_sizes, config)?;
    let mut trainer = model.trainer()?;
    model.fit(&mut trainer, samples, kb)?;
    Ok(model)
}
