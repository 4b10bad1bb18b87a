use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embedding::EmbeddingTable;
use crate::dataio::{FeatureSchema, Sample};
use crate::error::{D2kError, Result};
use crate::numeric::{forward_stack, Activation, Dense, EpochMetrics, ParamId, ParamStore, Tape, Tensor2, TrainConfig, Var};

/// Encoder hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Embedding width `d`.
    pub dim: usize,
    /// Knowledge vector width `d_k`.
    pub knowledge_dim: usize,
    pub heads: usize,
    /// Hidden width of the Transformer feed-forward sublayer.
    pub ffn_hidden: usize,
    /// Hidden width of the knowledge network.
    pub knowledge_hidden: usize,
    pub train: TrainConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            knowledge_dim: 8,
            heads: 2,
            ffn_hidden: 32,
            knowledge_hidden: 32,
            train: TrainConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.knowledge_dim == 0 || self.ffn_hidden == 0 || self.knowledge_hidden == 0 {
            return Err(D2kError::config("encoder widths must be positive"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(D2kError::config(format!("dim {} not divisible by {} heads", self.dim, self.heads)));
        }
        self.train.validate()
    }
}

/// Parameter handles of the encoder. Parameters are created, and stored in
/// checkpoints, in field order of this struct.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNet {
    pub embedding: EmbeddingTable,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln1: (ParamId, ParamId),
    pub ffn: [Dense; 2],
    pub ln2: (ParamId, ParamId),
    pub knowledge: [Dense; 2],
    pub head: Dense,
    pub heads: usize,
    pub knowledge_dim: usize,
    /// Global field indices `(u, v, c)` of every head triple, in head order.
    pub triples: Vec<[usize; 3]>,
}

impl EncoderNet {
    pub fn build(params: &mut ParamStore, schema: &FeatureSchema, vocab_sizes: &[usize], cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        if vocab_sizes.len() != schema.num_fields() {
            return Err(D2kError::config(format!(
                "{} vocabulary sizes for {} fields",
                vocab_sizes.len(),
                schema.num_fields()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xE4C0_DE00);
        let d = cfg.dim;
        let embedding = EmbeddingTable::new(params, "embedding", vocab_sizes, d, &mut rng)?;
        let mut square = |name: &str, params: &mut ParamStore| params.add(name, Tensor2::uniform_fan_in(d, d, d, &mut rng));
        let wq = square("attn.wq", params);
        let wk = square("attn.wk", params);
        let wv = square("attn.wv", params);
        let wo = square("attn.wo", params);
        let ln1 = layer_norm_params(params, "ln1", d);
        let ffn = [
            Dense::new(params, "ffn.0", d, cfg.ffn_hidden, Activation::Tanh, &mut rng),
            Dense::new(params, "ffn.1", cfg.ffn_hidden, d, Activation::Linear, &mut rng),
        ];
        let ln2 = layer_norm_params(params, "ln2", d);
        let knowledge = [
            Dense::new(params, "knowledge.0", 3 * d, cfg.knowledge_hidden, Activation::Tanh, &mut rng),
            Dense::new(params, "knowledge.1", cfg.knowledge_hidden, cfg.knowledge_dim, Activation::Linear, &mut rng),
        ];
        let triples = schema.query_triples();
        let head = Dense::new(params, "head", triples.len() * cfg.knowledge_dim, 1, Activation::Linear, &mut rng);
        Ok(Self {
            embedding,
            wq,
            wk,
            wv,
            wo,
            ln1,
            ffn,
            ln2,
            knowledge,
            head,
            heads: cfg.heads,
            knowledge_dim: cfg.knowledge_dim,
            triples,
        })
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim
    }

    pub fn num_queries(&self) -> usize {
        self.triples.len()
    }

    /// One Transformer block with `Q = K = V = x`, applied independently to
    /// consecutive groups of `group` rows. No positional encoding.
    pub fn transform(&self, tape: &mut Tape<'_>, x: Var, group: usize) -> Result<Var> {
        let (wq, wk, wv, wo) = (tape.param(self.wq), tape.param(self.wk), tape.param(self.wv), tape.param(self.wo));
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let att = tape.attention_grouped(q, k, v, self.heads, group)?;
        let att = tape.matmul(att, wo)?;
        let h = tape.add(x, att)?;
        let (g1, b1) = (tape.param(self.ln1.0), tape.param(self.ln1.1));
        let h = tape.layer_norm(h, g1, b1)?;
        let f = forward_stack(tape, h, &self.ffn)?;
        let out = tape.add(h, f)?;
        let (g2, b2) = (tape.param(self.ln2.0), tape.param(self.ln2.1));
        tape.layer_norm(out, g2, b2)
    }

    /// Knowledge network on rows of concatenated `(g_u, g_v, g_c)`.
    pub fn knowledge_net(&self, tape: &mut Tape<'_>, cross: Var) -> Result<Var> {
        forward_stack(tape, cross, &self.knowledge)
    }

    /// Knowledge vectors of every head triple for each sample, as a
    /// `(n · N_q) × d_k` node (sample-major, triples in head order).
    pub fn knowledge_batch(&self, tape: &mut Tape<'_>, samples: &[&Sample]) -> Result<Var> {
        let f = self.embedding.num_fields();
        let all: Vec<usize> = (0..f).collect();
        let e = self.embedding.lookup(tape, samples, &all)?;
        let g = self.transform(tape, e, f)?;
        let mut idx = [Vec::new(), Vec::new(), Vec::new()];
        for b in 0..samples.len() {
            for t in &self.triples {
                for s in 0..3 {
                    idx[s].push(b * f + t[s]);
                }
            }
        }
        let [iu, iv, ic] = idx;
        let gu = tape.gather_rows(g, iu)?;
        let gv = tape.gather_rows(g, iv)?;
        let gc = tape.gather_rows(g, ic)?;
        let cross = tape.concat_cols(&[gu, gv, gc])?;
        self.knowledge_net(tape, cross)
    }

    /// Click probabilities (`n × 1`) from the linear head over concatenated
    /// knowledge vectors.
    pub fn forward(&self, tape: &mut Tape<'_>, samples: &[&Sample]) -> Result<Var> {
        let z = self.knowledge_batch(tape, samples)?;
        let flat = tape.reshape(z, samples.len(), self.num_queries() * self.knowledge_dim)?;
        let logit = forward_stack(tape, flat, &[self.head])?;
        Ok(tape.sigmoid(logit))
    }

    /// Mean cross-entropy over a batch.
    pub fn loss(&self, tape: &mut Tape<'_>, samples: &[&Sample]) -> Result<Var> {
        let pred = self.forward(tape, samples)?;
        let labels: Vec<f64> = samples.iter().map(|s| s.label_f64()).collect();
        tape.bce(pred, &labels)
    }
}

fn layer_norm_params(params: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let mut gain = Tensor2::zeros(1, d);
    gain.fill(1.0);
    (
        params.add(format!("{name}.gain"), gain),
        params.add(format!("{name}.bias"), Tensor2::zeros(1, d)),
    )
}

/// A trained (or freshly initialized) knowledge encoder.
#[derive(Debug, Clone)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub schema: FeatureSchema,
    pub params: ParamStore,
    pub net: EncoderNet,
    /// Per-epoch training metrics; empty for an untrained model.
    pub history: Vec<EpochMetrics>,
}

/// Batch size used for inference passes.
const INFER_BATCH: usize = 1024;

impl EncoderModel {
    pub fn new(schema: &FeatureSchema, vocab_sizes: &[usize], config: EncoderConfig) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = EncoderNet::build(&mut params, schema, vocab_sizes, &config)?;
        Ok(Self {
            config,
            schema: schema.clone(),
            params,
            net,
            history: Vec::new(),
        })
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        self.net.embedding.vocab_sizes()
    }

    pub fn knowledge_dim(&self) -> usize {
        self.net.knowledge_dim
    }

    /// Pooled field embeddings of one sample, `F × d`.
    pub fn embed_sample(&self, sample: &Sample) -> Result<Tensor2> {
        let rows = self.net.embedding.embed_sample(&self.params, sample)?;
        Ok(Tensor2::from_rows(&rows))
    }

    /// Transformer output for an arbitrary set of token rows (`n × d`).
    pub fn encode_rows(&self, rows: &Tensor2) -> Result<Tensor2> {
        let mut tape = Tape::new(&self.params);
        let x = tape.constant(rows.clone());
        let out = self.net.transform(&mut tape, x, rows.rows())?;
        Ok(tape.value(out).clone())
    }

    /// `E`: one row per schema field.
    pub fn encode(&self, sample: &Sample) -> Result<Tensor2> {
        self.encode_rows(&self.embed_sample(sample)?)
    }

    /// Knowledge vectors `z_ijk` (`N_q × d_k`) from an encoded sample.
    pub fn cross_knowledge(&self, e: &Tensor2) -> Result<Tensor2> {
        let mut tape = Tape::new(&self.params);
        let g = tape.constant(e.clone());
        let mut cols = [Vec::new(), Vec::new(), Vec::new()];
        for t in &self.net.triples {
            for s in 0..3 {
                cols[s].push(t[s]);
            }
        }
        let [iu, iv, ic] = cols;
        let gu = tape.gather_rows(g, iu)?;
        let gv = tape.gather_rows(g, iv)?;
        let gc = tape.gather_rows(g, ic)?;
        let cross = tape.concat_cols(&[gu, gv, gc])?;
        let z = self.net.knowledge_net(&mut tape, cross)?;
        Ok(tape.value(z).clone())
    }

    /// Click probability of each sample.
    pub fn predict(&self, samples: &[Sample]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(INFER_BATCH) {
            let refs: Vec<&Sample> = chunk.iter().collect();
            let mut tape = Tape::new(&self.params);
            let p = self.net.forward(&mut tape, &refs)?;
            out.extend_from_slice(tape.value(p).data());
        }
        Ok(out)
    }

    /// Knowledge vectors of value triples encoded in isolation: each triple
    /// `[(field, id); 3]` (global field indices) is fed to the Transformer as
    /// a three-token input. Returns `n × d_k`.
    pub fn encode_triples(&self, triples: &[[(usize, u32); 3]]) -> Result<Tensor2> {
        let dk = self.knowledge_dim();
        let mut out = Tensor2::zeros(triples.len(), dk);
        for (c, chunk) in triples.chunks(INFER_BATCH * 4).enumerate() {
            let mut rows = Vec::with_capacity(chunk.len() * 3);
            for t in chunk {
                for &(f, id) in t {
                    if f >= self.net.embedding.num_fields() {
                        return Err(D2kError::config(format!("field index {f} outside the encoder schema")));
                    }
                    rows.push(self.net.embedding.row_of(f, id)?);
                }
            }
            let mut tape = Tape::new(&self.params);
            let table = tape.param(self.net.embedding.param);
            let e = tape.gather_rows(table, rows)?;
            let g = self.net.transform(&mut tape, e, 3)?;
            let cross = tape.reshape(g, chunk.len(), 3 * self.net.dim())?;
            let z = self.net.knowledge_net(&mut tape, cross)?;
            let base = c * INFER_BATCH * 4;
            out.data_mut()[base * dk..(base + chunk.len()) * dk].copy_from_slice(tape.value(z).data());
        }
        Ok(out)
    }

    /// Mean loss and gradients on a batch; exposed for gradient checks.
    pub fn batch_loss(&self, params: &ParamStore, samples: &[&Sample]) -> Result<(f64, crate::numeric::Gradients)> {
        let mut tape = Tape::new(params);
        let loss = self.net.loss(&mut tape, samples)?;
        Ok((tape.value(loss).get(0, 0), tape.backward(loss)))
    }
}

/// Trains an encoder on `samples` (the old data) with seeded shuffling.
pub fn train_encoder(samples: &[Sample], schema: &FeatureSchema, vocab_sizes: &[usize], config: EncoderConfig) -> Result<EncoderModel> {
    if samples.is_empty() {
        return Err(D2kError::config("cannot train an encoder on an empty dataset"));
    }
    for s in samples {
        s.check(schema, vocab_sizes)?;
    }
    let mut model = EncoderModel::new(schema, vocab_sizes, config)?;
    let mut params = std::mem::take(&mut model.params);
    let mut trainer = crate::numeric::Trainer::new(&params, config.train)?;
    let net = &model.net;
    let history = trainer.fit(&mut params, samples.len(), |p, batch| {
        let refs: Vec<&Sample> = batch.iter().map(|&i| &samples[i]).collect();
        let mut tape = Tape::new(p);
        let loss = net.loss(&mut tape, &refs)?;
        Ok((tape.value(loss).get(0, 0), tape.backward(loss)))
    })?;
    model.params = params;
    model.history = history;
    Ok(model)
}
