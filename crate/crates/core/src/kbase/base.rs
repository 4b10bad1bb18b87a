use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::key::TernaryKey;
use crate::error::{D2kError, Result};

/// How existing entries are merged with vectors from a newer encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdatePolicy {
    /// Recent priority: the new vector replaces the stored one.
    Rp,
    /// Average pooling: the stored vector becomes the mean of itself and the
    /// new vector.
    Ap,
}

impl std::str::FromStr for UpdatePolicy {
    type Err = D2kError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rp" => Ok(Self::Rp),
            "ap" => Ok(Self::Ap),
            other => Err(D2kError::config(format!("unknown update policy {other:?} (expected rp or ap)"))),
        }
    }
}

/// Provenance of a base; kept in memory only.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbMeta {
    /// SHA-256 of the encoder checkpoint of the latest generation.
    pub encoder_checksum: Option<[u8; 32]>,
    /// 1-based inclusive block range of the source data.
    pub source_blocks: Option<(usize, usize)>,
    pub generations: usize,
}

/// Exact-match store from ternary keys to `dim`-wide `f32` vectors.
#[derive(Debug, Clone)]
pub struct KnowledgeBase {
    dim: usize,
    schema_hash: [u8; 32],
    index: HashMap<TernaryKey, usize>,
    keys: Vec<TernaryKey>,
    vectors: Vec<f32>,
    pub meta: KbMeta,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim
            && self.schema_hash == other.schema_hash
            && self.len() == other.len()
            && self.iter().all(|(k, v)| other.get(k).is_some_and(|w| bits(v).eq(bits(w))))
    }
}

fn bits(v: &[f32]) -> impl Iterator<Item = u32> + '_ {
    v.iter().map(|x| x.to_bits())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbStats {
    pub entries: usize,
    /// Size of the serialized file.
    pub bytes: usize,
    /// Entry count per key field triple `(user, item, context)`. Serialized
    /// with `"u,v,c"` string keys.
    #[serde(with = "triple_keys")]
    pub histogram: BTreeMap<[u16; 3], usize>,
}

mod triple_keys {
    use std::collections::BTreeMap;

    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<[u16; 3], usize>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_map(map.iter().map(|(k, v)| (format!("{},{},{}", k[0], k[1], k[2]), v)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<[u16; 3], usize>, D::Error> {
        let raw = BTreeMap::<String, usize>::deserialize(d)?;
        raw.into_iter()
            .map(|(k, v)| {
                let parts: Vec<u16> = k.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>().map_err(D::Error::custom)?;
                let key: [u16; 3] = parts.try_into().map_err(|_| D::Error::custom(format!("bad field triple {k:?}")))?;
                Ok((key, v))
            })
            .collect()
    }
}

impl KnowledgeBase {
    pub fn new(dim: usize, schema_hash: [u8; 32]) -> Self {
        Self {
            dim,
            schema_hash,
            index: HashMap::new(),
            keys: Vec::new(),
            vectors: Vec::new(),
            meta: KbMeta::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn schema_hash(&self) -> &[u8; 32] {
        &self.schema_hash
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, key: &TernaryKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn get(&self, key: &TernaryKey) -> Option<&[f32]> {
        self.index.get(key).map(|&i| self.slot(i))
    }

    fn slot(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Stored vector widened to `f64` with `hit = true`, or zeros with
    /// `hit = false` when the key is absent.
    pub fn lookup(&self, key: &TernaryKey) -> (Vec<f64>, bool) {
        let mut out = vec![0.0; self.dim];
        let hit = self.lookup_into(key, &mut out);
        (out, hit)
    }

    /// Writes the stored vector into `out` (zeros on a miss).
    pub fn lookup_into(&self, key: &TernaryKey, out: &mut [f64]) -> bool {
        match self.index.get(key) {
            Some(&i) => {
                for (o, &v) in out.iter_mut().zip(self.slot(i)) {
                    *o = f64::from(v);
                }
                true
            }
            None => {
                out.iter_mut().for_each(|o| *o = 0.0);
                false
            }
        }
    }

    /// Inserts or replaces one entry.
    pub fn insert(&mut self, key: TernaryKey, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(D2kError::config(format!("vector of length {} for a base of width {}", vector.len(), self.dim)));
        }
        match self.index.get(&key) {
            Some(&i) => self.vectors[i * self.dim..(i + 1) * self.dim].copy_from_slice(vector),
            None => {
                self.index.insert(key, self.keys.len());
                self.keys.push(key);
                self.vectors.extend_from_slice(vector);
            }
        }
        Ok(())
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&TernaryKey, &[f32])> {
        self.keys.iter().enumerate().map(|(i, k)| (k, self.slot(i)))
    }

    /// Entries in key order.
    pub fn sorted(&self) -> Vec<(&TernaryKey, &[f32])> {
        let mut v: Vec<_> = self.iter().collect();
        v.sort_unstable_by_key(|(k, _)| **k);
        v
    }

    /// Merges `newer` into a copy of this base: new keys are inserted,
    /// existing keys are replaced (RP) or averaged pairwise (AP).
    pub fn merged(&self, newer: &KnowledgeBase, policy: UpdatePolicy) -> Result<KnowledgeBase> {
        if newer.dim != self.dim {
            return Err(D2kError::config(format!("cannot merge width {} into width {}", newer.dim, self.dim)));
        }
        if newer.schema_hash != self.schema_hash {
            return Err(D2kError::config("cannot merge bases built for different schemas"));
        }
        let mut out = self.clone();
        let mut avg = vec![0f32; self.dim];
        for (key, v) in newer.iter() {
            match (policy, out.index.get(key)) {
                (UpdatePolicy::Ap, Some(&i)) => {
                    for ((a, &old), &new) in avg.iter_mut().zip(out.slot(i)).zip(v) {
                        *a = ((f64::from(old) + f64::from(new)) / 2.0) as f32;
                    }
                    out.insert(*key, &avg)?;
                }
                _ => out.insert(*key, v)?,
            }
        }
        out.meta = KbMeta {
            encoder_checksum: newer.meta.encoder_checksum,
            source_blocks: match (self.meta.source_blocks, newer.meta.source_blocks) {
                (Some((a, _)), Some((_, b))) => Some((a, b)),
                (a, b) => b.or(a),
            },
            generations: self.meta.generations + newer.meta.generations.max(1),
        };
        Ok(out)
    }

    pub fn stats(&self) -> KbStats {
        let mut histogram = BTreeMap::new();
        for k in &self.keys {
            *histogram.entry(k.fields).or_insert(0) += 1;
        }
        KbStats {
            entries: self.len(),
            bytes: super::file::serialized_len(self.len(), self.dim),
            histogram,
        }
    }

    /// SHA-256 of the canonical serialization.
    pub fn checksum(&self) -> [u8; 32] {
        Sha256::digest(self.to_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(v: u32) -> TernaryKey {
        TernaryKey::new([0, 0, 0], [v, 1, 1])
    }

    fn base(entries: &[(u32, [f32; 2])]) -> KnowledgeBase {
        let mut kb = KnowledgeBase::new(2, [0; 32]);
        for (v, vec) in entries {
            kb.insert(key(*v), vec).unwrap();
        }
        kb
    }

    #[test]
    fn lookup_hit_and_miss() {
        let kb = base(&[(1, [0.25, -3.0])]);
        assert_eq!(kb.lookup(&key(1)), (vec![0.25, -3.0], true));
        assert_eq!(kb.lookup(&key(2)), (vec![0.0, 0.0], false));
        assert_eq!(kb.lookup(&key(0)), (vec![0.0, 0.0], false));
    }

    #[test]
    fn policies_replace_average_and_insert() {
        let old = base(&[(1, [1.0, 1.0])]);
        let new = base(&[(1, [0.0, 0.0]), (2, [3.0, 4.0])]);
        let ap = old.merged(&new, UpdatePolicy::Ap).unwrap();
        assert_eq!(ap.get(&key(1)).unwrap(), &[0.5, 0.5]);
        assert_eq!(ap.get(&key(2)).unwrap(), &[3.0, 4.0]);
        let rp = old.merged(&new, UpdatePolicy::Rp).unwrap();
        assert_eq!(rp.get(&key(1)).unwrap(), &[0.0, 0.0]);
        assert_eq!(rp.get(&key(2)).unwrap(), &[3.0, 4.0]);
        // the source base is untouched
        assert_eq!(old.get(&key(1)).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn merge_rejects_width_mismatch() {
        let a = KnowledgeBase::new(2, [0; 32]);
        let b = KnowledgeBase::new(3, [0; 32]);
        assert!(a.merged(&b, UpdatePolicy::Rp).is_err());
        let mut c = KnowledgeBase::new(2, [0; 32]);
        assert!(c.insert(key(1), &[1.0]).is_err());
    }

    #[test]
    fn repeated_ap_approaches_the_new_vector() {
        let mut kb = base(&[(1, [5.0, -7.0])]);
        let target = base(&[(1, [1.0, 2.0])]);
        let mut prev = [4.0f32, 9.0];
        for _ in 0..10 {
            kb = kb.merged(&target, UpdatePolicy::Ap).unwrap();
            let v = kb.get(&key(1)).unwrap();
            let dist = [(v[0] - 1.0).abs(), (v[1] - 2.0).abs()];
            assert!(dist[0] <= prev[0] && dist[1] <= prev[1]);
            prev = dist;
        }
    }

    #[test]
    fn histogram_sums_to_entry_count() {
        let mut kb = base(&[(1, [0.0; 2]), (2, [0.0; 2])]);
        kb.insert(TernaryKey::new([1, 0, 0], [1, 1, 1]), &[0.0; 2]).unwrap();
        let st = kb.stats();
        assert_eq!(st.entries, 3);
        assert_eq!(st.histogram.values().sum::<usize>(), 3);
        assert_eq!(st.histogram[&[0, 0, 0]], 2);
        let json = serde_json::to_string(&st).unwrap();
        assert!(json.contains("\"0,0,0\":2"), "{json}");
        assert_eq!(serde_json::from_str::<KbStats>(&json).unwrap(), st);
        assert_eq!(KnowledgeBase::new(4, [0; 32]).stats().entries, 0);
    }
}
