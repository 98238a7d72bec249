//! JSON-lines dataset format and session-atomic time splitting.
//!
//! One object per impression, keys in this order:
//!
//! ```text
//! user_id, query_id, item_id, history, label, timestamp, session_id,
//! [oracle_p, oracle_r, sensitivity, area]
//! ```
//!
//! The four oracle keys are optional but must appear together.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoding::{FeatureSpec, SessionExample};
use crate::error::{Error, Result};
use crate::synthworld::{label_area, LabeledExample, OracleLabels};

const MANDATORY_KEYS: [&str; 7] = [
    "user_id",
    "query_id",
    "item_id",
    "history",
    "label",
    "timestamp",
    "session_id",
];
const ORACLE_KEYS: [&str; 4] = ["oracle_p", "oracle_r", "sensitivity", "area"];

#[derive(Serialize, Deserialize)]
struct Line {
    user_id: u32,
    query_id: u32,
    item_id: u32,
    history: Vec<u32>,
    label: u8,
    timestamp: i64,
    session_id: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_p: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    oracle_r: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sensitivity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    area: Option<u8>,
}

impl From<&LabeledExample> for Line {
    fn from(ex: &LabeledExample) -> Self {
        let e = &ex.example;
        let o = ex.oracle.as_ref();
        Line {
            user_id: e.user_id,
            query_id: e.query_id,
            item_id: e.item_id,
            history: e.history.clone(),
            label: e.label,
            timestamp: e.timestamp,
            session_id: e.session_id,
            oracle_p: o.map(|o| o.preference),
            oracle_r: o.map(|o| o.relevance),
            sensitivity: o.map(|o| o.sensitivity),
            area: o.map(|o| o.area),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    /// Vocabulary sizes inferred as `max id + 1` (zero for an empty file).
    pub spec: FeatureSpec,
    /// Lines skipped in lenient mode.
    pub warnings: Vec<String>,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        FeatureSpec::new(0, 0, 0)
    }
}

impl Dataset {
    pub fn has_oracle(&self) -> bool {
        !self.examples.is_empty() && self.examples.iter().all(|e| e.oracle.is_some())
    }
}

pub fn infer_spec(examples: &[LabeledExample]) -> FeatureSpec {
    let mut spec = FeatureSpec::new(0, 0, 0);
    for ex in examples {
        let e = &ex.example;
        spec.users = spec.users.max(e.user_id as usize + 1);
        spec.queries = spec.queries.max(e.query_id as usize + 1);
        spec.items = spec.items.max(e.item_id as usize + 1);
        if let Some(&m) = e.history.iter().max() {
            spec.items = spec.items.max(m as usize + 1);
        }
    }
    spec
}

fn parse_line(text: &str, line: usize) -> Result<LabeledExample> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })?;
    let obj = value.as_object().ok_or_else(|| Error::Parse {
        line,
        message: "expected a JSON object".into(),
    })?;
    if let Some(key) = MANDATORY_KEYS.iter().find(|k| !obj.contains_key(**k)) {
        return Err(Error::Schema {
            line,
            key: key.to_string(),
        });
    }
    let present = ORACLE_KEYS.iter().filter(|k| obj.contains_key(**k)).count();
    if present != 0 && present != ORACLE_KEYS.len() {
        let key = ORACLE_KEYS
            .iter()
            .find(|k| !obj.contains_key(**k))
            .expect("one missing");
        return Err(Error::Schema {
            line,
            key: key.to_string(),
        });
    }
    let parsed: Line = serde_json::from_value(value).map_err(|e| {
        let msg = e.to_string();
        let key = MANDATORY_KEYS
            .iter()
            .chain(&ORACLE_KEYS)
            .find(|k| msg.contains(*k))
            .map_or(msg.clone(), |k| k.to_string());
        Error::Schema { line, key }
    })?;
    if parsed.label > 1 {
        return Err(Error::Schema {
            line,
            key: "label".into(),
        });
    }
    let oracle = match (
        parsed.oracle_p,
        parsed.oracle_r,
        parsed.sensitivity,
        parsed.area,
    ) {
        (Some(p), Some(r), Some(s), Some(area)) => {
            if p > 1 || r > 1 || !(0.0..=1.0).contains(&s) {
                return Err(Error::Schema {
                    line,
                    key: "oracle_p/oracle_r/sensitivity".into(),
                });
            }
            if label_area(p, r, parsed.label).ok() != Some(area) {
                return Err(Error::Schema {
                    line,
                    key: "area".into(),
                });
            }
            Some(OracleLabels {
                preference: p,
                relevance: r,
                sensitivity: s,
                area,
            })
        }
        _ => None,
    };
    Ok(LabeledExample {
        example: SessionExample {
            user_id: parsed.user_id,
            query_id: parsed.query_id,
            item_id: parsed.item_id,
            history: parsed.history,
            label: parsed.label,
            timestamp: parsed.timestamp,
            session_id: parsed.session_id,
        },
        oracle,
    })
}

/// Streams a JSONL dataset. In lenient mode bad lines become warnings.
pub fn read_jsonl<R: BufRead>(reader: R, lenient: bool) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut warnings = Vec::new();
    let mut last_ts: HashMap<u64, i64> = HashMap::new();
    for (idx, text) in reader.lines().enumerate() {
        let line = idx + 1;
        let text = text.map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed = parse_line(&text, line).and_then(|ex| {
            let prev = last_ts.get(&ex.example.session_id).copied();
            match prev {
                Some(t) if ex.example.timestamp < t => Err(Error::Schema {
                    line,
                    key: "timestamp".into(),
                }),
                _ => Ok(ex),
            }
        });
        match parsed {
            Ok(ex) => {
                last_ts.insert(ex.example.session_id, ex.example.timestamp);
                examples.push(ex);
            }
            Err(e) if lenient => {
                log::warn!("skipping {e}");
                warnings.push(e.to_string());
            }
            Err(e) => return Err(e),
        }
    }
    let spec = infer_spec(&examples);
    Ok(Dataset {
        examples,
        spec,
        warnings,
    })
}

pub fn load(path: impl AsRef<Path>, lenient: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file), lenient)
}

pub fn write_jsonl<W: Write>(mut writer: W, examples: &[LabeledExample]) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut writer, &Line::from(ex))?;
        writer
            .write_all(b"\n")
            .map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn save(path: impl AsRef<Path>, examples: &[LabeledExample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, examples)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Impression indices of each split, in original order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Value at the `frac` quantile of sorted `xs` (inclusive, nearest rank).
fn quantile(xs: &[i64], frac: f64) -> i64 {
    let rank = ((frac * xs.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    xs[rank.min(xs.len()) - 1]
}

/// Splits whole sessions by their start time at the cumulative fractions.
///
/// A session starting exactly on a boundary goes to the earlier split.
pub fn time_split(examples: &[LabeledExample], fractions: [f64; 3]) -> Result<Split> {
    if fractions.iter().any(|&f| !(f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be positive and sum to 1"
        )));
    }
    let mut starts: HashMap<u64, i64> = HashMap::new();
    for ex in examples {
        let e = &ex.example;
        starts
            .entry(e.session_id)
            .and_modify(|t| *t = (*t).min(e.timestamp))
            .or_insert(e.timestamp);
    }
    if starts.len() < 3 {
        return Err(Error::Config(format!(
            "time split needs at least 3 sessions, found {}",
            starts.len()
        )));
    }
    let mut sorted: Vec<i64> = starts.values().copied().collect();
    sorted.sort_unstable();
    let train_end = quantile(&sorted, fractions[0]);
    let valid_end = quantile(&sorted, fractions[0] + fractions[1]);
    let mut split = Split {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (i, ex) in examples.iter().enumerate() {
        let t = starts[&ex.example.session_id];
        if t <= train_end {
            split.train.push(i);
        } else if t <= valid_end {
            split.validation.push(i);
        } else {
            split.test.push(i);
        }
    }
    for (name, part) in [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ] {
        if part.is_empty() {
            return Err(Error::Config(format!(
                "time split produced an empty {name} set"
            )));
        }
    }
    Ok(split)
}

/// Per-split summary row for CSV export.
#[derive(Clone, Debug, Serialize)]
pub struct SplitStats {
    pub split: &'static str,
    pub impressions: usize,
    pub sessions: usize,
    pub positives: usize,
    pub click_rate: f64,
    pub min_timestamp: i64,
    pub max_timestamp: i64,
}

pub fn split_stats(examples: &[LabeledExample], split: &Split) -> Vec<SplitStats> {
    [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ]
    .into_iter()
    .map(|(name, idx)| {
        let mut sessions: Vec<u64> = idx
            .iter()
            .map(|&i| examples[i].example.session_id)
            .collect();
        sessions.sort_unstable();
        sessions.dedup();
        let positives = idx
            .iter()
            .filter(|&&i| examples[i].example.label == 1)
            .count();
        let ts = idx.iter().map(|&i| examples[i].example.timestamp);
        SplitStats {
            split: name,
            impressions: idx.len(),
            sessions: sessions.len(),
            positives,
            click_rate: positives as f64 / idx.len().max(1) as f64,
            min_timestamp: ts.clone().min().unwrap_or(0),
            max_timestamp: ts.max().unwrap_or(0),
        }
    })
    .collect()
}

pub fn write_split_stats_csv<W: Write>(writer: W, stats: &[SplitStats]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for s in stats {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex(session: u64, ts: i64, user: u32) -> LabeledExample {
        LabeledExample {
            example: SessionExample {
                user_id: user,
                query_id: 0,
                item_id: 1,
                history: vec![],
                label: 0,
                timestamp: ts,
                session_id: session,
            },
            oracle: None,
        }
    }

    #[test]
    fn empty_input_gives_zero_spec() {
        let d = read_jsonl("".as_bytes(), false).unwrap();
        assert!(d.examples.is_empty());
        assert_eq!((d.spec.users, d.spec.queries, d.spec.items), (0, 0, 0));
        assert!(d.spec.validate().is_err());
    }

    #[test]
    fn malformed_line_strict_and_lenient() {
        let good = r#"{"user_id":0,"query_id":0,"item_id":0,"history":[],"label":1,"timestamp":1,"session_id":0}"#;
        let text = format!("{good}\n{good}\n{good}\n{{not json\n");
        match read_jsonl(text.as_bytes(), false).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("unexpected {e}"),
        }
        let d = read_jsonl(text.as_bytes(), true).unwrap();
        assert_eq!(d.examples.len(), 3);
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn missing_key_is_schema_error() {
        let text =
            r#"{"user_id":0,"query_id":0,"item_id":0,"history":[],"timestamp":1,"session_id":0}"#;
        match read_jsonl(text.as_bytes(), false).unwrap_err() {
            Error::Schema { line, key } => assert_eq!((line, key.as_str()), (1, "label")),
            e => panic!("unexpected {e}"),
        }
        let partial = r#"{"user_id":0,"query_id":0,"item_id":0,"history":[],"label":0,"timestamp":1,"session_id":0,"oracle_p":1}"#;
        assert!(matches!(
            read_jsonl(partial.as_bytes(), false),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn negative_id_rejected() {
        let text = r#"{"user_id":-1,"query_id":0,"item_id":0,"history":[],"label":0,"timestamp":1,"session_id":0}"#;
        assert!(matches!(
            read_jsonl(text.as_bytes(), false),
            Err(Error::Schema { .. })
        ));
    }

    #[test]
    fn inconsistent_area_rejected() {
        let text = r#"{"user_id":0,"query_id":0,"item_id":0,"history":[],"label":0,"timestamp":1,"session_id":0,"oracle_p":1,"oracle_r":1,"sensitivity":0.5,"area":3}"#;
        assert!(
            matches!(read_jsonl(text.as_bytes(), false), Err(Error::Schema { key, .. }) if key == "area")
        );
    }

    #[test]
    fn vocab_is_max_plus_one() {
        let examples = vec![ex(0, 1, 41), ex(0, 2, 3)];
        assert_eq!(infer_spec(&examples).users, 42);
    }

    #[test]
    fn ten_sessions_split_8_1_1() {
        let examples: Vec<_> = (1..=10).map(|t| ex(t as u64, t, 0)).collect();
        let s = time_split(&examples, DEFAULT_FRACTIONS).unwrap();
        assert_eq!(s.train, (0..8).collect::<Vec<_>>());
        assert_eq!(s.validation, vec![8]);
        assert_eq!(s.test, vec![9]);
    }

    #[test]
    fn identical_start_times_leave_test_empty() {
        let examples: Vec<_> = (0..10).map(|s| ex(s, 5, 0)).collect();
        assert!(matches!(
            time_split(&examples, DEFAULT_FRACTIONS),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            time_split(&examples[..2], DEFAULT_FRACTIONS),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn decreasing_timestamp_within_session_rejected() {
        let a = r#"{"user_id":0,"query_id":0,"item_id":0,"history":[],"label":0,"timestamp":5,"session_id":0}"#;
        let b = r#"{"user_id":0,"query_id":0,"item_id":0,"history":[],"label":0,"timestamp":4,"session_id":0}"#;
        let text = format!("{a}\n{b}\n");
        assert!(matches!(
            read_jsonl(text.as_bytes(), false),
            Err(Error::Schema { line: 2, .. })
        ));
    }

    #[test]
    fn generated_world_roundtrips_and_splits() {
        use crate::synthworld::{generate_world, WorldConfig};
        let cfg = WorldConfig {
            users: 20,
            queries: 10,
            items: 100,
            interactions: 500,
            ..Default::default()
        };
        let data = generate_world(&cfg).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &data).unwrap();
        let back = read_jsonl(buf.as_slice(), false).unwrap();
        assert_eq!(back.examples, data);
        assert!(back.has_oracle());
        let mut again = Vec::new();
        write_jsonl(&mut again, &back.examples).unwrap();
        assert_eq!(buf, again);

        let split = time_split(&data, DEFAULT_FRACTIONS).unwrap();
        assert_eq!(
            split,
            time_split(&back.examples, DEFAULT_FRACTIONS).unwrap()
        );
        let max_ts = |idx: &[usize]| {
            idx.iter()
                .map(|&i| data[i].example.timestamp)
                .max()
                .unwrap()
        };
        let min_ts = |idx: &[usize]| {
            idx.iter()
                .map(|&i| data[i].example.timestamp)
                .min()
                .unwrap()
        };
        assert!(min_ts(&split.validation) >= max_ts(&split.train));
        assert!(min_ts(&split.test) >= max_ts(&split.validation));
        let stats = split_stats(&data, &split);
        assert_eq!(
            stats.iter().map(|s| s.impressions).sum::<usize>(),
            data.len()
        );
    }

    fn arb_example() -> impl Strategy<Value = LabeledExample> {
        (
            0u32..1000,
            0u32..1000,
            0u32..1000,
            prop::collection::vec(0u32..1000, 0..5),
            0u8..2,
            -1_000_000i64..1_000_000,
            0u64..50,
            prop::option::of((0u8..2, 0u8..2, 0.0f64..=1.0)),
        )
            .prop_filter_map("consistent oracle", |(u, q, i, h, y, t, s, o)| {
                let oracle = match o {
                    Some((p, r, sens)) => Some(OracleLabels {
                        preference: p,
                        relevance: r,
                        sensitivity: sens,
                        area: label_area(p, r, y).ok()?,
                    }),
                    None => None,
                };
                Some(LabeledExample {
                    example: SessionExample {
                        user_id: u,
                        query_id: q,
                        item_id: i,
                        history: h,
                        label: y,
                        timestamp: t,
                        session_id: s,
                    },
                    oracle,
                })
            })
    }

    proptest! {
        #[test]
        fn jsonl_roundtrip(mut examples in prop::collection::vec(arb_example(), 0..20)) {
            // distinct sessions so per-session timestamp order is trivially satisfied
            for (k, e) in examples.iter_mut().enumerate() {
                e.example.session_id = k as u64;
            }
            let mut buf = Vec::new();
            write_jsonl(&mut buf, &examples).unwrap();
            let back = read_jsonl(buf.as_slice(), false).unwrap();
            prop_assert_eq!(back.examples, examples);
        }
    }
}
