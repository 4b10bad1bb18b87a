use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{D2kError, Result};

/// Which factor of a recommendation event a field describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    User,
    Item,
    Context,
}

impl Side {
    pub const ALL: [Side; 3] = [Side::User, Side::Item, Side::Context];

    pub fn as_str(self) -> &'static str {
        match self {
            Side::User => "user",
            Side::Item => "item",
            Side::Context => "context",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FieldKind {
    Single,
    Multi,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub side: Side,
    pub kind: FieldKind,
}

impl FieldSpec {
    pub fn single(name: &str, side: Side) -> Self {
        Self {
            name: name.to_string(),
            side,
            kind: FieldKind::Single,
        }
    }

    pub fn multi(name: &str, side: Side) -> Self {
        Self {
            name: name.to_string(),
            side,
            kind: FieldKind::Multi,
        }
    }
}

/// Default cap on multi-value list length.
pub const DEFAULT_MAX_MULTI: usize = 16;

/// Field layout of a log record.
///
/// Fields are stored user-first, then item, then context; every sample lists
/// its values in this order. `kb_subset` names the fields that take part in
/// knowledge-base keys and queries (all fields when `None`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    fields: Vec<FieldSpec>,
    kb_subset: Option<Vec<String>>,
    max_multi: usize,
}

impl FeatureSchema {
    pub fn new(fields: Vec<FieldSpec>, kb_subset: Option<Vec<String>>) -> Result<Self> {
        let mut ordered = Vec::with_capacity(fields.len());
        for side in Side::ALL {
            ordered.extend(fields.iter().filter(|f| f.side == side).cloned());
        }
        let schema = Self {
            fields: ordered,
            kb_subset,
            max_multi: DEFAULT_MAX_MULTI,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn with_max_multi(mut self, max_multi: usize) -> Result<Self> {
        if max_multi == 0 {
            return Err(D2kError::config("max_multi must be at least 1"));
        }
        self.max_multi = max_multi;
        Ok(self)
    }

    /// Same layout with a different knowledge-base field subset.
    pub fn with_kb_subset(&self, kb_subset: Option<Vec<String>>) -> Result<Self> {
        let s = Self {
            fields: self.fields.clone(),
            kb_subset,
            max_multi: self.max_multi,
        };
        s.validate()?;
        Ok(s)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for f in &self.fields {
            if f.name.is_empty() || f.name.contains(['\t', ',', '|', '=', ':']) || f.name.contains(char::is_whitespace) {
                return Err(D2kError::config(format!("invalid field name {:?}", f.name)));
            }
            if f.name == "timestamp" || f.name == "label" {
                return Err(D2kError::config(format!("field name {:?} is reserved", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(D2kError::config(format!("duplicate field {}", f.name)));
            }
        }
        for side in Side::ALL {
            if self.side_fields(side).is_empty() {
                return Err(D2kError::config(format!("schema needs at least one {} field", side.as_str())));
            }
        }
        if let Some(subset) = &self.kb_subset {
            let mut sub_seen = HashSet::new();
            for name in subset {
                if !seen.contains(name.as_str()) {
                    return Err(D2kError::config(format!("kb_subset names unknown field {name}")));
                }
                if !sub_seen.insert(name.as_str()) {
                    return Err(D2kError::config(format!("kb_subset repeats field {name}")));
                }
            }
            for side in Side::ALL {
                if self.kb_fields(side).is_empty() {
                    return Err(D2kError::config(format!(
                        "kb_subset needs at least one {} field",
                        side.as_str()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn field(&self, idx: usize) -> &FieldSpec {
        &self.fields[idx]
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn max_multi(&self) -> usize {
        self.max_multi
    }

    pub fn kb_subset(&self) -> Option<&[String]> {
        self.kb_subset.as_deref()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    /// Global indices of all fields on one side, in schema order.
    pub fn side_fields(&self, side: Side) -> Vec<usize> {
        (0..self.fields.len()).filter(|&i| self.fields[i].side == side).collect()
    }

    /// Global indices of the knowledge-base fields on one side.
    pub fn kb_fields(&self, side: Side) -> Vec<usize> {
        self.side_fields(side)
            .into_iter()
            .filter(|&i| self.in_kb(i))
            .collect()
    }

    pub fn in_kb(&self, idx: usize) -> bool {
        match &self.kb_subset {
            None => true,
            Some(s) => s.iter().any(|n| *n == self.fields[idx].name),
        }
    }

    /// Position of a global field index within its side (the key slot index).
    pub fn side_position(&self, idx: usize) -> usize {
        let side = self.fields[idx].side;
        self.fields[..idx].iter().filter(|f| f.side == side).count()
    }

    /// Global index of the `pos`-th field on `side`.
    pub fn global_index(&self, side: Side, pos: usize) -> Option<usize> {
        self.side_fields(side).get(pos).copied()
    }

    /// `(F_u, F_v, F_c)` over the knowledge-base subset.
    pub fn kb_counts(&self) -> (usize, usize, usize) {
        (
            self.kb_fields(Side::User).len(),
            self.kb_fields(Side::Item).len(),
            self.kb_fields(Side::Context).len(),
        )
    }

    /// Number of ternary query terms per sample, `F_u · F_v · F_c`.
    pub fn num_queries(&self) -> usize {
        let (u, v, c) = self.kb_counts();
        u * v * c
    }

    /// Ternary field triples `(u, v, c)` as global indices, in nested
    /// `(i, j, k)` loop order over the knowledge-base subset.
    pub fn query_triples(&self) -> Vec<[usize; 3]> {
        let (us, vs, cs) = (
            self.kb_fields(Side::User),
            self.kb_fields(Side::Item),
            self.kb_fields(Side::Context),
        );
        let mut out = Vec::with_capacity(us.len() * vs.len() * cs.len());
        for &u in &us {
            for &v in &vs {
                for &c in &cs {
                    out.push([u, v, c]);
                }
            }
        }
        out
    }

    /// SHA-256 over the field layout (names, sides, kinds in order). The
    /// knowledge-base subset does not participate.
    pub fn layout_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for f in &self.fields {
            h.update(f.side.as_str().as_bytes());
            h.update(b":");
            h.update(f.name.as_bytes());
            h.update(match f.kind {
                FieldKind::Single => b":single\n".as_slice(),
                FieldKind::Multi => b":multi\n".as_slice(),
            });
        }
        h.finalize().into()
    }

    /// Parses the line-based `key = value` schema format.
    ///
    /// ```text
    /// # comment
    /// user = user_id:single, user_hist:multi
    /// item = item_id, item_cat
    /// context = hour
    /// kb_subset = user_hist, item_cat, hour
    /// max_multi = 16
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut fields = Vec::new();
        let mut kb_subset = None;
        let mut max_multi = DEFAULT_MAX_MULTI;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| D2kError::data(n + 1, "expected `key = value`"))?;
            let key = key.trim();
            let items = value.split(',').map(str::trim).filter(|s| !s.is_empty());
            match key {
                "user" | "item" | "context" => {
                    let side = match key {
                        "user" => Side::User,
                        "item" => Side::Item,
                        _ => Side::Context,
                    };
                    for item in items {
                        let (name, kind) = match item.split_once(':') {
                            Some((name, "single")) => (name.trim(), FieldKind::Single),
                            Some((name, "multi")) => (name.trim(), FieldKind::Multi),
                            Some((_, other)) => {
                                return Err(D2kError::data(n + 1, format!("unknown field kind {other:?}")))
                            }
                            None => (item, FieldKind::Single),
                        };
                        fields.push(FieldSpec {
                            name: name.to_string(),
                            side,
                            kind,
                        });
                    }
                }
                "kb_subset" => kb_subset = Some(items.map(str::to_string).collect()),
                "max_multi" => {
                    max_multi = value
                        .trim()
                        .parse()
                        .map_err(|_| D2kError::data(n + 1, format!("bad max_multi {:?}", value.trim())))?
                }
                other => return Err(D2kError::data(n + 1, format!("unknown schema key {other:?}"))),
            }
        }
        Self::new(fields, kb_subset)?.with_max_multi(max_multi)
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for FeatureSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for side in Side::ALL {
            let items: Vec<String> = self
                .side_fields(side)
                .into_iter()
                .map(|i| {
                    let fs = &self.fields[i];
                    let kind = match fs.kind {
                        FieldKind::Single => "single",
                        FieldKind::Multi => "multi",
                    };
                    format!("{}:{kind}", fs.name)
                })
                .collect();
            writeln!(f, "{} = {}", side.as_str(), items.join(", "))?;
        }
        if let Some(s) = &self.kb_subset {
            writeln!(f, "kb_subset = {}", s.join(", "))?;
        }
        writeln!(f, "max_multi = {}", self.max_multi)
    }
}
