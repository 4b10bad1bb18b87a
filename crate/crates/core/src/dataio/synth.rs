//! Synthetic click logs whose labels are driven by latent ternary effects.
//!
//! Every (user value, item value, context value) triple owns a latent effect
//! `θ ~ Normal(0, (σ·s_u·s_v·s_c)²)`, derived by hashing the triple so the
//! table never has to be materialized. A sample clicks with probability
//! `sigmoid(bias + Σ θ)` summed over all of its field triples; multi-value
//! fields contribute the mean effect of their elements. With a nonzero drift
//! rate each triple redraws its effect at the start of a window with that
//! probability.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::sample::Sample;
use super::schema::{FeatureSchema, FieldSpec, Side};
use crate::error::{D2kError, Result};
use crate::numeric::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthField {
    pub name: String,
    pub side: Side,
    /// Number of distinct real values (IDs `1..=cardinality`). Ignored for
    /// identity fields, whose cardinality is the entity count.
    pub cardinality: u32,
    /// `(min_len, max_len)` for multi-value fields.
    pub multi: Option<(usize, usize)>,
    /// Multiplier on σ for every triple this field takes part in.
    pub effect_scale: f64,
    /// Field value is the user / item / context identity itself.
    pub is_id: bool,
}

impl SynthField {
    pub fn id(name: &str, side: Side, effect_scale: f64) -> Self {
        Self {
            name: name.into(),
            side,
            cardinality: 0,
            multi: None,
            effect_scale,
            is_id: true,
        }
    }

    pub fn attr(name: &str, side: Side, cardinality: u32, effect_scale: f64) -> Self {
        Self {
            name: name.into(),
            side,
            cardinality,
            multi: None,
            effect_scale,
            is_id: false,
        }
    }

    pub fn multi(name: &str, side: Side, cardinality: u32, len: (usize, usize), effect_scale: f64) -> Self {
        Self {
            multi: Some(len),
            ..Self::attr(name, side, cardinality, effect_scale)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: u32,
    pub n_items: u32,
    pub n_ctx: u32,
    pub fields: Vec<SynthField>,
    pub n_samples: usize,
    pub n_windows: usize,
    pub window_seconds: i64,
    pub sigma: f64,
    pub bias: f64,
    pub drift_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl SynthConfig {
    /// 200 users × 200 items × 8 contexts, 3/3/1 fields, 100k samples over
    /// six windows.
    pub fn desk_scale() -> Self {
        Self {
            n_users: 200,
            n_items: 200,
            n_ctx: 8,
            fields: vec![
                SynthField::id("user_id", Side::User, 0.3),
                SynthField::attr("user_segment", Side::User, 8, 1.0),
                SynthField::multi("user_hist", Side::User, 8, (1, 4), 1.0),
                SynthField::id("item_id", Side::Item, 0.3),
                SynthField::attr("item_cat", Side::Item, 8, 1.0),
                SynthField::attr("item_brand", Side::Item, 8, 1.0),
                SynthField::id("ctx", Side::Context, 1.0),
            ],
            n_samples: 100_000,
            n_windows: 6,
            window_seconds: 86_400,
            sigma: 1.0,
            bias: -1.2,
            drift_rate: 0.0,
        }
    }

    fn entity_count(&self, side: Side) -> u32 {
        match side {
            Side::User => self.n_users,
            Side::Item => self.n_items,
            Side::Context => self.n_ctx,
        }
    }

    fn field_cardinality(&self, f: &SynthField) -> u32 {
        if f.is_id {
            self.entity_count(f.side)
        } else {
            f.cardinality
        }
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        FeatureSchema::new(
            self.fields
                .iter()
                .map(|f| match f.multi {
                    Some(_) => FieldSpec::multi(&f.name, f.side),
                    None => FieldSpec::single(&f.name, f.side),
                })
                .collect(),
            None,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.n_ctx == 0 {
            return Err(D2kError::config("entity counts must be positive"));
        }
        if self.n_windows == 0 || self.window_seconds <= 0 {
            return Err(D2kError::config("need at least one positive-length window"));
        }
        if !(0.0..=1.0).contains(&self.drift_rate) {
            return Err(D2kError::config("drift_rate must lie in [0, 1]"));
        }
        if !(self.sigma >= 0.0) || !self.bias.is_finite() {
            return Err(D2kError::config("sigma must be non-negative and bias finite"));
        }
        for f in &self.fields {
            if self.field_cardinality(f) == 0 {
                return Err(D2kError::config(format!("field {} has no values", f.name)));
            }
            if let Some((lo, hi)) = f.multi {
                if lo == 0 || hi < lo || f.is_id {
                    return Err(D2kError::config(format!("bad multi-value length range for {}", f.name)));
                }
            }
        }
        Ok(())
    }
}

/// Three `(side position, value id)` slots: user, item, context.
pub type RawTriple = [(u16, u32); 3];

/// The latent effect table, evaluated lazily from hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub sigma: f64,
    pub bias: f64,
    pub drift_rate: f64,
    pub window_seconds: i64,
    /// Effect scale per side, indexed by side position.
    scales: [Vec<f64>; 3],
    schema: FeatureSchema,
}

impl GroundTruth {
    fn version(&self, key: &RawTriple, window: usize) -> u64 {
        if self.drift_rate <= 0.0 {
            return 0;
        }
        (1..=window as u64)
            .filter(|&w| unit(mix(self.seed ^ 0xD81F_7A3C_55E2_0B91, key, w)) < self.drift_rate)
            .count() as u64
    }

    /// Effect of one value triple during 0-based `window`.
    pub fn theta(&self, key: &RawTriple, window: usize) -> f64 {
        let scale = self.sigma
            * self.scales[0][key[0].0 as usize]
            * self.scales[1][key[1].0 as usize]
            * self.scales[2][key[2].0 as usize];
        if scale == 0.0 {
            return 0.0;
        }
        let v = self.version(key, window);
        let h = mix(self.seed, key, v);
        scale * gaussian(h)
    }

    pub fn window_of(&self, timestamp: i64) -> usize {
        (timestamp.max(0) / self.window_seconds) as usize
    }

    /// Summed effect of every field triple of `s` (multi-value fields average
    /// over the cartesian expansion).
    pub fn effect_sum(&self, s: &Sample) -> f64 {
        let w = self.window_of(s.timestamp);
        let mut total = 0.0;
        for [u, v, c] in self.schema.query_triples() {
            let key_pos = [
                self.schema.side_position(u) as u16,
                self.schema.side_position(v) as u16,
                self.schema.side_position(c) as u16,
            ];
            let mut sum = 0.0;
            let mut n = 0usize;
            for &a in s.field(u) {
                for &b in s.field(v) {
                    for &cc in s.field(c) {
                        sum += self.theta(&[(key_pos[0], a), (key_pos[1], b), (key_pos[2], cc)], w);
                        n += 1;
                    }
                }
            }
            total += sum / n as f64;
        }
        total
    }

    /// True click probability of a sample.
    pub fn click_prob(&self, s: &Sample) -> f64 {
        sigmoid(self.bias + self.effect_sum(s))
    }

    /// Effects of every single-value triple occurring in `samples`, at `window`.
    pub fn table(&self, samples: &[Sample], window: usize) -> BTreeMap<RawTriple, f64> {
        let mut out = BTreeMap::new();
        for s in samples {
            for [u, v, c] in self.schema.query_triples() {
                let pos = [
                    self.schema.side_position(u) as u16,
                    self.schema.side_position(v) as u16,
                    self.schema.side_position(c) as u16,
                ];
                for &a in s.field(u) {
                    for &b in s.field(v) {
                        for &cc in s.field(c) {
                            let key = [(pos[0], a), (pos[1], b), (pos[2], cc)];
                            out.entry(key).or_insert_with(|| self.theta(&key, window));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Generated samples (sorted by timestamp) with their schema and truth.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub schema: FeatureSchema,
    pub vocab_sizes: Vec<usize>,
    pub samples: Vec<Sample>,
    pub truth: GroundTruth,
}

pub fn gen_synthetic(config: &SynthConfig, seed: u64) -> Result<SyntheticData> {
    config.validate()?;
    let schema = config.schema()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // schema order is user, item, context; map back to config fields
    let fields: Vec<&SynthField> = schema
        .fields()
        .iter()
        .map(|fs| config.fields.iter().find(|f| f.name == fs.name).expect("field"))
        .collect();
    let vocab_sizes: Vec<usize> = fields.iter().map(|f| config.field_cardinality(f) as usize + 1).collect();

    let draw = |rng: &mut ChaCha8Rng, f: &SynthField, entity: u32| -> Vec<u32> {
        let card = config.field_cardinality(f);
        if f.is_id {
            return vec![entity];
        }
        match f.multi {
            None => vec![rng.gen_range(1..=card)],
            Some((lo, hi)) => {
                let n = rng.gen_range(lo..=hi);
                (0..n).map(|_| rng.gen_range(1..=card)).collect()
            }
        }
    };

    let side_idx = |side: Side| schema.side_fields(side);
    let mut profiles: [Vec<Vec<Vec<u32>>>; 2] = [Vec::new(), Vec::new()];
    for (slot, side) in [Side::User, Side::Item].into_iter().enumerate() {
        let count = config.entity_count(side);
        for e in 1..=count {
            let prof = side_idx(side).into_iter().map(|i| draw(&mut rng, fields[i], e)).collect();
            profiles[slot].push(prof);
        }
    }

    let mut scales: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (slot, side) in Side::ALL.into_iter().enumerate() {
        scales[slot] = side_idx(side).into_iter().map(|i| fields[i].effect_scale).collect();
    }
    let truth = GroundTruth {
        seed: seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0x5EED,
        sigma: config.sigma,
        bias: config.bias,
        drift_rate: config.drift_rate,
        window_seconds: config.window_seconds,
        scales,
        schema: schema.clone(),
    };

    let span = config.window_seconds * config.n_windows as i64;
    let mut stamps: Vec<i64> = (0..config.n_samples).map(|_| rng.gen_range(0..span)).collect();
    stamps.sort_unstable();
    let ctx_fields = side_idx(Side::Context);
    let mut samples = Vec::with_capacity(config.n_samples);
    for ts in stamps {
        let u = rng.gen_range(0..config.n_users) as usize;
        let v = rng.gen_range(0..config.n_items) as usize;
        let c = rng.gen_range(1..=config.n_ctx);
        let mut values = profiles[0][u].clone();
        values.extend(profiles[1][v].iter().cloned());
        for &i in &ctx_fields {
            values.push(draw(&mut rng, fields[i], c));
        }
        let mut s = Sample::new(values, 0, ts);
        let p = truth.click_prob(&s);
        s.label = u8::from(rng.gen::<f64>() < p);
        samples.push(s);
    }
    Ok(SyntheticData {
        schema,
        vocab_sizes,
        samples,
        truth,
    })
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn mix(seed: u64, key: &RawTriple, extra: u64) -> u64 {
    let mut h = splitmix(seed);
    for (pos, val) in key {
        h = splitmix(h ^ (u64::from(*pos) << 32 | u64::from(*val)));
    }
    splitmix(h ^ extra)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Box–Muller from one 64-bit hash.
fn gaussian(h: u64) -> f64 {
    let u1 = (unit(h) + 0.5 / (1u64 << 53) as f64).min(1.0);
    let u2 = unit(splitmix(h));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
