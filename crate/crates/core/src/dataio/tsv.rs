//! Tab-separated log files.
//!
//! Layout: a header row naming `timestamp`, `label` and every schema field
//! (any order), then one sample per line. Multi-value cells separate values
//! with `|`. No quoting.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::sample::{Sample, Vocabulary, OOV};
use super::schema::{FeatureSchema, FieldKind};
use crate::error::{D2kError, Result};

/// Reads a log file and builds the vocabulary from it.
pub fn load_logs(path: impl AsRef<Path>, schema: &FeatureSchema) -> Result<(Vec<Sample>, Vocabulary)> {
    let reader = BufReader::new(File::open(path)?);
    let mut vocab = Vocabulary::empty(schema.num_fields());
    let samples = read_logs(reader, schema, VocabMode::Build(&mut vocab))?;
    Ok((samples, vocab))
}

/// Reads a log file against a fixed vocabulary; unseen tokens map to ID 0.
pub fn load_logs_with_vocab(path: impl AsRef<Path>, schema: &FeatureSchema, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let reader = BufReader::new(File::open(path)?);
    read_logs(reader, schema, VocabMode::Fixed(vocab))
}

pub enum VocabMode<'a> {
    Build(&'a mut Vocabulary),
    Fixed(&'a Vocabulary),
}

pub fn read_logs<R: BufRead>(reader: R, schema: &FeatureSchema, mut vocab: VocabMode<'_>) -> Result<Vec<Sample>> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(D2kError::data(1, "missing header row")),
    };
    let columns: Vec<&str> = header.split('\t').map(str::trim).collect();
    let col_of = |name: &str| -> Result<usize> {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| D2kError::data(1, format!("header lacks column {name:?}")))
    };
    let ts_col = col_of("timestamp")?;
    let label_col = col_of("label")?;
    let field_cols: Vec<usize> = schema
        .fields()
        .iter()
        .map(|f| col_of(&f.name))
        .collect::<Result<_>>()?;
    if columns.len() != field_cols.len() + 2 {
        return Err(D2kError::data(
            1,
            format!("header has {} columns, schema needs {}", columns.len(), field_cols.len() + 2),
        ));
    }
    let max_multi = schema.max_multi();

    let mut samples = Vec::new();
    for (n, line) in lines.enumerate() {
        let lineno = n + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split('\t').collect();
        if cells.len() != columns.len() {
            return Err(D2kError::data(
                lineno,
                format!("expected {} cells, found {}", columns.len(), cells.len()),
            ));
        }
        let timestamp: i64 = cells[ts_col]
            .trim()
            .parse()
            .map_err(|_| D2kError::data(lineno, format!("bad timestamp {:?}", cells[ts_col])))?;
        let label = match cells[label_col].trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(D2kError::data(lineno, format!("label {other:?} outside {{0,1}}"))),
        };
        let mut values = Vec::with_capacity(field_cols.len());
        for (f, &col) in field_cols.iter().enumerate() {
            let cell = cells[col].trim();
            let spec = schema.field(f);
            let mut ids: Vec<u32> = match spec.kind {
                FieldKind::Single => {
                    if cell.is_empty() || cell.contains('|') {
                        return Err(D2kError::data(
                            lineno,
                            format!("field {} needs exactly one value, got {cell:?}", spec.name),
                        ));
                    }
                    vec![lookup(&mut vocab, f, cell)]
                }
                FieldKind::Multi => cell
                    .split('|')
                    .map(str::trim)
                    .filter(|t| !t.is_empty())
                    .map(|t| lookup(&mut vocab, f, t))
                    .collect(),
            };
            if ids.is_empty() {
                ids.push(OOV);
            }
            if ids.len() > max_multi {
                // most recent entries are last
                ids.drain(..ids.len() - max_multi);
            }
            values.push(ids);
        }
        samples.push(Sample::new(values, label, timestamp));
    }
    Ok(samples)
}

fn lookup(vocab: &mut VocabMode<'_>, field: usize, token: &str) -> u32 {
    match vocab {
        VocabMode::Build(v) => v.insert(field, token),
        VocabMode::Fixed(v) => v.encode(field, token),
    }
}

/// Writes samples in the log format, decoding IDs through `vocab`. OOV IDs
/// are written as the token `<oov>`.
pub fn write_logs<W: Write>(out: W, schema: &FeatureSchema, samples: &[Sample], vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(out);
    let mut header = vec!["timestamp".to_string(), "label".to_string()];
    header.extend(schema.fields().iter().map(|f| f.name.clone()));
    writeln!(w, "{}", header.join("\t"))?;
    for s in samples {
        write!(w, "{}\t{}", s.timestamp, s.label)?;
        for (f, vals) in s.values.iter().enumerate() {
            let toks: Vec<&str> = vals.iter().map(|&id| vocab.decode(f, id).unwrap_or("<oov>")).collect();
            write!(w, "\t{}", toks.join("|"))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_logs(path: impl AsRef<Path>, schema: &FeatureSchema, samples: &[Sample], vocab: &Vocabulary) -> Result<()> {
    write_logs(File::create(path)?, schema, samples, vocab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::schema::{FieldSpec, Side};

    fn schema() -> FeatureSchema {
        FeatureSchema::new(
            vec![
                FieldSpec::single("uid", Side::User),
                FieldSpec::multi("hist", Side::User),
                FieldSpec::single("iid", Side::Item),
                FieldSpec::single("hour", Side::Context),
            ],
            None,
        )
        .unwrap()
        .with_max_multi(3)
        .unwrap()
    }

    fn read(text: &str) -> Result<(Vec<Sample>, Vocabulary)> {
        let mut v = Vocabulary::empty(4);
        let s = read_logs(text.as_bytes(), &schema(), VocabMode::Build(&mut v))?;
        Ok((s, v))
    }

    #[test]
    fn repeated_token_shares_one_id() {
        let (s, v) = read("timestamp\tlabel\tuid\thist\tiid\thour\n10\t1\tu1\ta\ti1\th1\n20\t0\tu1\tb\ti2\th1\n").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].field(0), s[1].field(0));
        assert_eq!(v.sizes()[0], 2);
        assert_eq!(s[1].timestamp, 20);
    }

    #[test]
    fn multi_value_cell_keeps_duplicates() {
        let (s, _) = read("timestamp\tlabel\tuid\thist\tiid\thour\n1\t0\tu\ta|b|a\ti\th\n").unwrap();
        assert_eq!(s[0].field(1), &[1, 2, 1]);
    }

    #[test]
    fn multi_value_truncation_keeps_latest() {
        let (s, _) = read("timestamp\tlabel\tuid\thist\tiid\thour\n1\t0\tu\ta|b|c|d|e\ti\th\n").unwrap();
        assert_eq!(s[0].field(1), &[3, 4, 5]);
    }

    #[test]
    fn header_order_is_free() {
        let (s, _) = read("hour\tuid\tlabel\thist\ttimestamp\tiid\nh\tu\t1\ta\t7\ti\n").unwrap();
        assert_eq!(s[0].label, 1);
        assert_eq!(s[0].timestamp, 7);
    }

    #[test]
    fn unseen_token_maps_to_oov() {
        let (_, vocab) = read("timestamp\tlabel\tuid\thist\tiid\thour\n1\t0\tu\ta\ti\th\n").unwrap();
        let s = read_logs(
            "timestamp\tlabel\tuid\thist\tiid\thour\n1\t0\tzzz\ta|new\ti\th\n".as_bytes(),
            &schema(),
            VocabMode::Fixed(&vocab),
        )
        .unwrap();
        assert_eq!(s[0].field(0), &[OOV]);
        assert_eq!(s[0].field(1), &[1, OOV]);
    }

    #[test]
    fn malformed_rows_report_line() {
        let err = read("timestamp\tlabel\tuid\thist\tiid\thour\n1\t0\tu\ta\ti\th\n2\t0\tu\ta\ti\n").unwrap_err();
        assert!(matches!(err, D2kError::Data { line: 3, .. }), "{err}");
        let err = read("timestamp\tlabel\tuid\thist\tiid\thour\n1\t2\tu\ta\ti\th\n").unwrap_err();
        assert!(matches!(err, D2kError::Data { line: 2, .. }), "{err}");
        let err = read("timestamp\tlabel\tuid\thist\tiid\thour\nx\t1\tu\ta\ti\th\n").unwrap_err();
        assert!(matches!(err, D2kError::Data { line: 2, .. }), "{err}");
        assert!(read("timestamp\tlabel\tuid\thist\thour\n").is_err());
    }

    #[test]
    fn write_then_read_preserves_samples() {
        let text = "timestamp\tlabel\tuid\thist\tiid\thour\n1\t0\tu\ta|b\ti\th\n5\t1\tv\tb\ti\tg\n";
        let (s, v) = read(text).unwrap();
        let mut buf = Vec::new();
        write_logs(&mut buf, &schema(), &s, &v).unwrap();
        let back = read_logs(buf.as_slice(), &schema(), VocabMode::Fixed(&v)).unwrap();
        assert_eq!(back, s);
    }
}
