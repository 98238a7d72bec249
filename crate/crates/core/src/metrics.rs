//! Offline evaluation: AUC, LogLoss, NDCG@k, HR@k and six-area heatmaps.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthworld::{label_area, LabeledExample, AREA_COUNT};
use crate::training::bce_loss;

pub const DEFAULT_CUTOFF: usize = 10;
/// Areas with fewer examples than this are flagged in heatmap output.
pub const MIN_AREA_COUNT: usize = 10;
/// Fraction of examples classified positive when bucketing by model scores.
pub const SCORE_TOP_FRACTION: f64 = 0.2;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "metric inputs",
            &[scores.len()],
            &[labels.len()],
        ));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("metric scores"));
    }
    if let Some(&b) = labels.iter().find(|&&b| b > 1) {
        return Err(Error::Domain(format!("label {b} is not binary")));
    }
    Ok(())
}

/// Area under the ROC curve with half credit for tied scores.
///
/// Counts are kept as integers and divided once, so the result is exactly
/// the all-pairs rank statistic.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&b| b == 1).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({pos} positives, {neg} negatives)"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the numerator: 2 per concordant pair, 1 per tied pair
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let s = scores[order[start]];
        let mut end = start;
        let (mut gp, mut gn) = (0u128, 0u128);
        while end < order.len() && scores[order[end]] == s {
            if labels[order[end]] == 1 {
                gp += 1;
            } else {
                gn += 1;
            }
            end += 1;
        }
        twice += 2 * gp * neg_below + gp * gn;
        neg_below += gn;
        start = end;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Mean binary cross-entropy with predictions clamped to the open interval.
pub fn log_loss(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::UndefinedMetric("LogLoss of an empty set".into()));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| bce_loss(s, y))
        .sum();
    Ok(total / scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub ndcg: f64,
    pub hr: f64,
    /// Sessions with at least one positive.
    pub sessions: usize,
}

fn dcg(labels: impl Iterator<Item = u8>, cutoff: usize) -> f64 {
    labels
        .take(cutoff)
        .enumerate()
        .map(|(k, rel)| ((1u32 << rel) - 1) as f64 / ((k + 2) as f64).log2())
        .sum()
}

/// NDCG@cutoff and HR@cutoff averaged over sessions that contain a positive.
///
/// Within a session items are ranked by descending score; ties keep input order.
pub fn ranking_metrics(
    session_ids: &[u64],
    scores: &[f64],
    labels: &[u8],
    cutoff: usize,
) -> Result<RankingMetrics> {
    check_inputs(scores, labels)?;
    if session_ids.len() != scores.len() {
        return Err(Error::dim(
            "ranking inputs",
            &[session_ids.len()],
            &[scores.len()],
        ));
    }
    if cutoff == 0 {
        return Err(Error::Config("ranking cutoff must be positive".into()));
    }
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut slot: HashMap<u64, usize> = HashMap::new();
    for (i, &s) in session_ids.iter().enumerate() {
        let g = *slot.entry(s).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let (mut ndcg, mut hr, mut n) = (0.0, 0.0, 0usize);
    for mut idx in groups {
        if !idx.iter().any(|&i| labels[i] == 1) {
            continue;
        }
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(Ordering::Equal));
        let ranked = idx.iter().map(|&i| labels[i]);
        let mut ideal: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        ndcg += dcg(ranked, cutoff) / dcg(ideal.into_iter(), cutoff);
        if idx.iter().take(cutoff).any(|&i| labels[i] == 1) {
            hr += 1.0;
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "no session contains a positive label".into(),
        ));
    }
    Ok(RankingMetrics {
        ndcg: ndcg / n as f64,
        hr: hr / n as f64,
        sessions: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub logloss: f64,
    pub ndcg: f64,
    pub hr: f64,
    pub cutoff: usize,
    pub examples: usize,
    pub sessions: usize,
}

pub const METRICS_CSV_HEADER: [&str; 8] = [
    "name", "auc", "logloss", "ndcg", "hr", "cutoff", "examples", "sessions",
];

impl MetricsReport {
    pub fn compute(
        session_ids: &[u64],
        scores: &[f64],
        labels: &[u8],
        cutoff: usize,
    ) -> Result<Self> {
        let ranking = ranking_metrics(session_ids, scores, labels, cutoff)?;
        Ok(MetricsReport {
            auc: auc(scores, labels)?,
            logloss: log_loss(scores, labels)?,
            ndcg: ranking.ndcg,
            hr: ranking.hr,
            cutoff,
            examples: scores.len(),
            sessions: ranking.sessions,
        })
    }
}

/// Writes named reports as CSV with the columns of [`METRICS_CSV_HEADER`].
pub fn write_metrics_csv<W: Write>(writer: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRICS_CSV_HEADER)?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            r.auc.to_string(),
            r.logloss.to_string(),
            r.ndcg.to_string(),
            r.hr.to_string(),
            r.cutoff.to_string(),
            r.examples.to_string(),
            r.sessions.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Fixed,
    Global,
    Local,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Fixed, Stage::Global, Stage::Local];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Fixed => "fixed",
            Stage::Global => "global",
            Stage::Local => "local",
        }
    }
}

/// Per-example predictions at each fusion stage; a variant may lack some stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StagePredictions {
    pub fixed: Option<Vec<f64>>,
    pub global: Option<Vec<f64>>,
    pub local: Option<Vec<f64>>,
}

impl StagePredictions {
    pub fn get(&self, stage: Stage) -> Option<&[f64]> {
        match stage {
            Stage::Fixed => self.fixed.as_deref(),
            Stage::Global => self.global.as_deref(),
            Stage::Local => self.local.as_deref(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BucketMode {
    Oracle,
    Score,
}

/// Bucket assignment per example; `None` marks a contradictory score-mode triple.
pub type Buckets = Vec<Option<u8>>;

pub fn oracle_buckets(examples: &[LabeledExample]) -> Result<Buckets> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            ex.oracle.as_ref().map(|o| Some(o.area)).ok_or_else(|| {
                Error::Config(format!(
                    "example {i} has no oracle labels for oracle-mode heatmap"
                ))
            })
        })
        .collect()
}

/// Inclusive top-fraction threshold: the k-th largest score with k = ceil(frac * n).
pub fn top_fraction_threshold(scores: &[f64], frac: f64) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let k = ((frac * scores.len() as f64) - 1e-9).ceil().max(1.0) as usize;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Some(sorted[k.min(sorted.len()) - 1])
}

/// Buckets examples by thresholding model preference and relevance scores.
pub fn score_buckets(p_hat: &[f64], r_hat: &[f64], labels: &[u8]) -> Result<Buckets> {
    check_inputs(p_hat, labels)?;
    check_inputs(r_hat, labels)?;
    let (Some(tp), Some(tr)) = (
        top_fraction_threshold(p_hat, SCORE_TOP_FRACTION),
        top_fraction_threshold(r_hat, SCORE_TOP_FRACTION),
    ) else {
        return Ok(Vec::new());
    };
    Ok(p_hat
        .iter()
        .zip(r_hat)
        .zip(labels)
        .map(|((&p, &r), &y)| label_area(u8::from(p >= tp), u8::from(r >= tr), y).ok())
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub stage: Stage,
    /// Area id, or `None` for the contradiction overflow bucket.
    pub area: Option<u8>,
    pub mean: Option<f64>,
    pub count: usize,
    pub low_count: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapTable {
    pub mode: BucketMode,
    pub cells: Vec<HeatmapCell>,
    pub contradictions: usize,
    /// Areas holding fewer than [`MIN_AREA_COUNT`] examples.
    pub low_count_areas: Vec<u8>,
}

impl HeatmapTable {
    pub fn mean(&self, stage: Stage, area: u8) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.stage == stage && c.area == Some(area))
            .and_then(|c| c.mean)
    }

    pub fn count(&self, stage: Stage, area: u8) -> usize {
        self.cells
            .iter()
            .find(|c| c.stage == stage && c.area == Some(area))
            .map_or(0, |c| c.count)
    }

    pub fn has_warning(&self) -> bool {
        !self.low_count_areas.is_empty()
    }
}

pub const HEATMAP_CSV_HEADER: [&str; 5] = ["stage", "area", "mean", "count", "low_count"];

/// Mean prediction per (stage, area), plus an overflow bucket for contradictions.
pub fn heatmap(
    mode: BucketMode,
    buckets: &[Option<u8>],
    preds: &StagePredictions,
) -> Result<HeatmapTable> {
    let mut counts = [0usize; AREA_COUNT];
    let mut contradictions = 0;
    for b in buckets {
        match b {
            Some(a) if (*a as usize) < AREA_COUNT => counts[*a as usize] += 1,
            Some(a) => return Err(Error::Domain(format!("area id {a} out of range"))),
            None => contradictions += 1,
        }
    }
    let low_count_areas: Vec<u8> = (0..AREA_COUNT as u8)
        .filter(|&a| counts[a as usize] < MIN_AREA_COUNT)
        .collect();
    if !low_count_areas.is_empty() {
        log::warn!("heatmap areas {low_count_areas:?} hold fewer than {MIN_AREA_COUNT} examples");
    }
    let mut cells = Vec::new();
    for stage in Stage::ALL {
        let Some(pred) = preds.get(stage) else {
            continue;
        };
        if pred.len() != buckets.len() {
            return Err(Error::dim(
                "heatmap predictions",
                &[pred.len()],
                &[buckets.len()],
            ));
        }
        let mut sums = [0.0; AREA_COUNT + 1];
        for (b, &y) in buckets.iter().zip(pred) {
            sums[b.map_or(AREA_COUNT, |a| a as usize)] += y;
        }
        for a in 0..AREA_COUNT {
            cells.push(HeatmapCell {
                stage,
                area: Some(a as u8),
                mean: (counts[a] > 0).then(|| sums[a] / counts[a] as f64),
                count: counts[a],
                low_count: counts[a] < MIN_AREA_COUNT,
            });
        }
        if mode == BucketMode::Score {
            cells.push(HeatmapCell {
                stage,
                area: None,
                mean: (contradictions > 0).then(|| sums[AREA_COUNT] / contradictions as f64),
                count: contradictions,
                low_count: false,
            });
        }
    }
    Ok(HeatmapTable {
        mode,
        cells,
        contradictions,
        low_count_areas,
    })
}

pub fn write_heatmap_csv<W: Write>(writer: W, table: &HeatmapTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(HEATMAP_CSV_HEADER)?;
    for c in &table.cells {
        w.write_record([
            c.stage.name().to_string(),
            c.area.map_or("overflow".to_string(), |a| a.to_string()),
            c.mean.map_or(String::new(), |m| m.to_string()),
            c.count.to_string(),
            c.low_count.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Mean and sample standard deviation, used to aggregate per-seed reports.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
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

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut twice, mut pairs) = (0u128, 0u128);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1;
                    twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 2,
                        Ordering::Equal => 1,
                        Ordering::Less => 0,
                    };
                }
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.2, 0.8, 0.6], &[1, 0, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(auc(&[], &[]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn logloss_matches_hand_values() {
        assert_abs_diff_eq!(
            log_loss(&[0.5, 0.5], &[1, 0]).unwrap(),
            2f64.ln(),
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            log_loss(&[0.9], &[1]).unwrap(),
            0.105_360_515_657_826_3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn ranking_single_positive_first() {
        let mut scores: Vec<f64> = (0..20).map(|i| 1.0 - i as f64 * 0.01).collect();
        let mut labels = vec![0u8; 20];
        labels[0] = 1;
        let m = ranking_metrics(&[7; 20], &scores, &labels, 10).unwrap();
        assert_eq!((m.ndcg, m.hr), (1.0, 1.0));
        // move the positive to rank 11
        scores[0] = scores[10] - 0.001;
        let m = ranking_metrics(&[7; 20], &scores, &labels, 10).unwrap();
        assert_eq!((m.ndcg, m.hr), (0.0, 0.0));
    }

    #[test]
    fn ranking_two_positives_at_2_and_4() {
        let scores: Vec<f64> = (0..10).map(|i| 10.0 - i as f64).collect();
        let mut labels = vec![0u8; 10];
        labels[1] = 1;
        labels[3] = 1;
        let m = ranking_metrics(&[0; 10], &scores, &labels, 10).unwrap();
        let want = (1.0 / 3f64.log2() + 1.0 / 5f64.log2()) / (1.0 + 1.0 / 3f64.log2());
        assert_abs_diff_eq!(m.ndcg, want, epsilon = 1e-15);
        assert_eq!(m.hr, 1.0);
    }

    #[test]
    fn ranking_skips_sessions_without_positives() {
        let m = ranking_metrics(&[1, 1, 2, 2], &[0.1, 0.9, 0.5, 0.4], &[0, 1, 0, 0], 10).unwrap();
        assert_eq!(m.sessions, 1);
        assert!(matches!(
            ranking_metrics(&[1, 2], &[0.1, 0.2], &[0, 0], 10),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ranking_ties_keep_input_order() {
        // both tied at the top: positive listed second ranks second
        let m = ranking_metrics(&[0, 0], &[0.5, 0.5], &[0, 1], 10).unwrap();
        assert_abs_diff_eq!(m.ndcg, 1.0 / 3f64.log2(), epsilon = 1e-15);
    }

    #[test]
    fn threshold_picks_top_twenty_of_hundred() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let t = top_fraction_threshold(&scores, 0.2).unwrap();
        assert_eq!(scores.iter().filter(|&&s| s >= t).count(), 20);
    }

    #[test]
    fn constant_predictions_give_constant_means() {
        let buckets: Buckets = (0..60).map(|i| Some((i % 6) as u8)).collect();
        let preds = StagePredictions {
            fixed: Some(vec![0.37; 60]),
            global: None,
            local: Some(vec![0.37; 60]),
        };
        let t = heatmap(BucketMode::Oracle, &buckets, &preds).unwrap();
        for a in 0..6 {
            assert_abs_diff_eq!(t.mean(Stage::Fixed, a).unwrap(), 0.37, epsilon = 1e-15);
            assert_abs_diff_eq!(t.mean(Stage::Local, a).unwrap(), 0.37, epsilon = 1e-15);
            assert_eq!(t.count(Stage::Fixed, a), 10);
        }
        assert!(t.mean(Stage::Global, 0).is_none());
        assert!(!t.has_warning());
    }

    #[test]
    fn score_mode_counts_contradictions_in_overflow() {
        let p: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let r = p.clone();
        // top two by both scores with label 0 are (1,1,0) contradictions
        let labels = vec![0u8; 10];
        let b = score_buckets(&p, &r, &labels).unwrap();
        assert_eq!(b.iter().filter(|x| x.is_none()).count(), 2);
        let t = heatmap(
            BucketMode::Score,
            &b,
            &StagePredictions {
                fixed: Some(p.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(t.contradictions, 2);
        let total: usize = t
            .cells
            .iter()
            .filter(|c| c.stage == Stage::Fixed)
            .map(|c| c.count)
            .sum();
        assert_eq!(total, 10);
        assert!(t.has_warning());
    }

    #[test]
    fn oracle_counts_match_generator_histogram() {
        use crate::synthworld::{generate_world, summarize, WorldConfig};
        let cfg = WorldConfig {
            users: 30,
            queries: 10,
            items: 200,
            interactions: 2000,
            ..Default::default()
        };
        let data = generate_world(&cfg).unwrap();
        let b = oracle_buckets(&data).unwrap();
        let n = data.len();
        let t = heatmap(
            BucketMode::Oracle,
            &b,
            &StagePredictions {
                local: Some(vec![0.5; n]),
                ..Default::default()
            },
        )
        .unwrap();
        let hist = summarize(&data).area_counts;
        for a in 0..6u8 {
            assert_eq!(t.count(Stage::Local, a), hist[a as usize]);
        }
    }

    #[test]
    fn csv_headers_are_fixed() {
        let r = MetricsReport::compute(&[0, 0, 1, 1], &[0.9, 0.1, 0.8, 0.3], &[1, 0, 1, 0], 10)
            .unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[("FULL".into(), r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("name,auc,logloss,ndcg,hr,cutoff,examples,sessions\nFULL,1,"));
    }

    #[test]
    fn mean_std_of_known_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert_abs_diff_eq!(s, 1.0, epsilon = 1e-15);
    }

    proptest! {
        #[test]
        fn auc_equals_brute_force(
            pairs in prop::collection::vec((0u8..5, 0u8..2), 2..=8)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 4.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert_eq!(auc(&scores, &labels).unwrap(), brute_auc(&scores, &labels));
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            pairs in prop::collection::vec((-5.0f64..5.0, 0u8..2), 2..40)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&warped, &labels).unwrap());
        }

        #[test]
        fn ranking_invariant_under_session_permutation(
            rows in prop::collection::vec((0u64..6, 0u32..1000, 0u8..2), 1..60),
            seed in any::<u64>()
        ) {
            let mut rows = rows;
            // distinct scores
            for (k, r) in rows.iter_mut().enumerate() { r.1 = r.1 * 100 + k as u32; }
            prop_assume!(rows.iter().any(|r| r.2 == 1));
            let eval = |rows: &[(u64, u32, u8)]| {
                let s: Vec<u64> = rows.iter().map(|r| r.0).collect();
                let x: Vec<f64> = rows.iter().map(|r| r.1 as f64).collect();
                let y: Vec<u8> = rows.iter().map(|r| r.2).collect();
                ranking_metrics(&s, &x, &y, 10).unwrap()
            };
            let a = eval(&rows);
            let mut shuffled = rows.clone();
            use rand::seq::SliceRandom;
            shuffled.shuffle(&mut crate::numerics::rng_from_seed(seed));
            let b = eval(&shuffled);
            prop_assert_eq!(a.sessions, b.sessions);
            prop_assert!((a.ndcg - b.ndcg).abs() < 1e-12);
            prop_assert!((a.hr - b.hr).abs() < 1e-12);
        }
    }
}
