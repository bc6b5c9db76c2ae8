//! Scoring search results as a classifier.
//!
//! A query is *top-n correct* when its true label appears among the first `n`
//! hits and *majority-n correct* when the mode of the first `n` hit labels is
//! the true label. Majority ties go to the label with the smaller summed hit
//! distance, then the smaller label id.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::atlas_index::{Atlas, SearchHit};
use crate::embedding_io::EmbeddingSet;
use crate::error::{Error, Result};
use crate::patching::PatchRecord;
use crate::svg;

pub const DEFAULT_N_VALUES: [usize; 4] = [1, 3, 5, 7];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteResult {
    pub n: usize,
    pub predicted_label: u32,
    pub votes: BTreeMap<u32, usize>,
    pub tie_broken: bool,
}

fn check_n(hits: &[SearchHit], n: usize) -> Result<()> {
    if n < 1 || n > hits.len() {
        return Err(Error::InvalidInput(format!(
            "n={n} outside 1..={} available hits",
            hits.len()
        )));
    }
    Ok(())
}

/// Mode label of the first `n` hits.
pub fn majority_vote(hits: &[SearchHit], n: usize) -> Result<VoteResult> {
    check_n(hits, n)?;
    let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
    let mut dist: BTreeMap<u32, f64> = BTreeMap::new();
    for h in &hits[..n] {
        *votes.entry(h.label_id).or_default() += 1;
        *dist.entry(h.label_id).or_default() += h.distance;
    }
    let top = *votes.values().max().expect("n >= 1");
    let tied: Vec<u32> = votes.iter().filter(|(_, &c)| c == top).map(|(&l, _)| l).collect();
    let predicted_label = *tied
        .iter()
        .min_by(|a, b| dist[a].total_cmp(&dist[b]).then(a.cmp(b)))
        .expect("at least one label");
    Ok(VoteResult {
        n,
        predicted_label,
        votes,
        tie_broken: tied.len() > 1,
    })
}

pub fn topn_correct(hits: &[SearchHit], n: usize, true_label: u32) -> Result<bool> {
    check_n(hits, n)?;
    Ok(hits[..n].iter().any(|h| h.label_id == true_label))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub per_class: BTreeMap<u32, ClassMetrics>,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub warnings: Vec<String>,
}

/// Precision / recall / F1 per class from `(true, predicted)` pairs.
///
/// Classes appearing only as truth or only as prediction get 0 for the
/// undefined ratio and a warning.
pub fn classification_report(pairs: &[(u32, u32)]) -> ClassificationReport {
    let mut tp: BTreeMap<u32, usize> = BTreeMap::new();
    let mut support: BTreeMap<u32, usize> = BTreeMap::new();
    let mut predicted: BTreeMap<u32, usize> = BTreeMap::new();
    for &(t, p) in pairs {
        *support.entry(t).or_default() += 1;
        *predicted.entry(p).or_default() += 1;
        if t == p {
            *tp.entry(t).or_default() += 1;
        }
    }
    let classes: BTreeSet<u32> = support.keys().chain(predicted.keys()).copied().collect();
    let mut warnings = Vec::new();
    let mut per_class = BTreeMap::new();
    for c in classes {
        let tp = tp.get(&c).copied().unwrap_or(0);
        let sup = support.get(&c).copied().unwrap_or(0);
        let pred = predicted.get(&c).copied().unwrap_or(0);
        let precision = if pred > 0 {
            tp as f64 / pred as f64
        } else {
            warnings.push(format!("class {c} never predicted; precision and F1 set to 0"));
            0.0
        };
        let recall = if sup > 0 {
            tp as f64 / sup as f64
        } else {
            warnings.push(format!("class {c} has no true samples; recall and F1 set to 0"));
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.insert(
            c,
            ClassMetrics {
                precision,
                recall,
                f1,
                support: sup,
            },
        );
    }
    let correct = tp.values().sum();
    ClassificationReport {
        per_class,
        accuracy: if pairs.is_empty() { 0.0 } else { correct as f64 / pairs.len() as f64 },
        correct,
        total: pairs.len(),
        warnings,
    }
}

/// Square matrix over `labels`; rows are true labels, columns predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix<T> {
    pub n: usize,
    pub labels: Vec<u32>,
    pub counts: Vec<Vec<T>>,
}

impl<T: Copy + Default + std::ops::AddAssign> ConfusionMatrix<T> {
    fn zeros(n: usize, labels: Vec<u32>) -> Self {
        let k = labels.len();
        Self {
            n,
            labels,
            counts: vec![vec![T::default(); k]; k],
        }
    }

    fn add(&mut self, truth: u32, pred: u32, v: T) {
        let i = self.labels.binary_search(&truth).expect("label on axis");
        let j = self.labels.binary_search(&pred).expect("label on axis");
        self.counts[i][j] += v;
    }

    pub fn row(&self, label: u32) -> Option<&[T]> {
        self.labels.binary_search(&label).ok().map(|i| self.counts[i].as_slice())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEntry {
    pub label_id: u32,
    pub count: usize,
    /// `count / m · 100`, full precision.
    pub percent: f64,
}

impl fmt::Display for FrequencyEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} / {} / {:.2}%", self.label_id, self.count, self.percent)
    }
}

/// The `top` most frequent labels in `predictions`, by count then label id.
pub fn frequency_table(predictions: &[u32], top: usize) -> Vec<FrequencyEntry> {
    let mut hist: BTreeMap<u32, usize> = BTreeMap::new();
    for &p in predictions {
        *hist.entry(p).or_default() += 1;
    }
    let mut entries: Vec<(u32, usize)> = hist.into_iter().collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let m = predictions.len() as f64;
    entries
        .into_iter()
        .take(top)
        .map(|(label_id, count)| FrequencyEntry {
            label_id,
            count,
            percent: count as f64 / m * 100.0,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopFrequency {
    pub k: usize,
    pub entries: Vec<FrequencyEntry>,
}

/// top-3@top-n for one test slide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideFrequencyTable {
    pub slide_id: String,
    /// Most common true label among the slide's patches.
    pub true_label: u32,
    pub patches: usize,
    pub per_k: Vec<TopFrequency>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyAtN {
    pub n: usize,
    pub top_n: f64,
    pub majority_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_values: Vec<usize>,
    /// Per-class metrics under majority-n at the smallest n.
    pub per_class: BTreeMap<u32, ClassMetrics>,
    /// Majority-n accuracy at the smallest n.
    pub overall_accuracy: f64,
    pub total: usize,
    pub accuracy: Vec<AccuracyAtN>,
    /// Full classification report per n, in `n_values` order.
    pub classification: Vec<ClassificationReport>,
    pub confusion_majority: Vec<ConfusionMatrix<u64>>,
    pub confusion_topn: Vec<ConfusionMatrix<f64>>,
    pub top3_at_topn: Vec<SlideFrequencyTable>,
    pub warnings: Vec<String>,
}

fn validate_n_values(n_values: &[usize], available: usize) -> Result<()> {
    if n_values.is_empty() {
        return Err(Error::InvalidInput("n_values is empty".into()));
    }
    if let Some(&bad) = n_values.iter().find(|&&n| n < 1 || n > available) {
        return Err(Error::KOutOfRange { k: bad, max: available });
    }
    Ok(())
}

fn slide_tables(
    records: &[PatchRecord],
    hits: &[Vec<SearchHit>],
    k_values: &[usize],
) -> Result<Vec<SlideFrequencyTable>> {
    let mut by_slide: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_slide.entry(r.slide_id.as_str()).or_default().push(i);
    }
    let mut out = Vec::with_capacity(by_slide.len());
    for (slide, rows) in by_slide {
        let truths: Vec<u32> = rows.iter().map(|&i| records[i].label_id).collect();
        let true_label = frequency_table(&truths, 1)[0].label_id;
        let mut per_k = Vec::with_capacity(k_values.len());
        for &k in k_values {
            let preds = rows
                .iter()
                .map(|&i| majority_vote(&hits[i], k).map(|v| v.predicted_label))
                .collect::<Result<Vec<_>>>()?;
            per_k.push(TopFrequency {
                k,
                entries: frequency_table(&preds, 3),
            });
        }
        out.push(SlideFrequencyTable {
            slide_id: slide.to_string(),
            true_label,
            patches: rows.len(),
            per_k,
        });
    }
    Ok(out)
}

/// Builds the report from precomputed hit lists (one per test record, each at
/// least `max(n_values)` long).
pub fn evaluate_hits(
    records: &[PatchRecord],
    hits: &[Vec<SearchHit>],
    n_values: &[usize],
) -> Result<EvalReport> {
    if records.len() != hits.len() {
        return Err(Error::InvalidInput(format!(
            "{} records but {} hit lists",
            records.len(),
            hits.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let available = hits.iter().map(Vec::len).min().unwrap_or(0);
    validate_n_values(n_values, available)?;

    let mut axis: BTreeSet<u32> = records.iter().map(|r| r.label_id).collect();
    let k_max = *n_values.iter().max().expect("non-empty");
    for h in hits {
        axis.extend(h[..k_max].iter().map(|x| x.label_id));
    }
    let axis: Vec<u32> = axis.into_iter().collect();

    let mut accuracy = Vec::with_capacity(n_values.len());
    let mut classification = Vec::with_capacity(n_values.len());
    let mut confusion_majority = Vec::with_capacity(n_values.len());
    let mut confusion_topn = Vec::with_capacity(n_values.len());
    for &n in n_values {
        let mut maj = ConfusionMatrix::<u64>::zeros(n, axis.clone());
        let mut top = ConfusionMatrix::<f64>::zeros(n, axis.clone());
        let mut pairs = Vec::with_capacity(records.len());
        let mut top_hits = 0usize;
        for (r, h) in records.iter().zip(hits) {
            let vote = majority_vote(h, n)?;
            maj.add(r.label_id, vote.predicted_label, 1);
            pairs.push((r.label_id, vote.predicted_label));
            for (&label, &count) in &vote.votes {
                top.add(r.label_id, label, count as f64 / n as f64);
            }
            if topn_correct(h, n, r.label_id)? {
                top_hits += 1;
            }
        }
        let report = classification_report(&pairs);
        accuracy.push(AccuracyAtN {
            n,
            top_n: top_hits as f64 / records.len() as f64,
            majority_n: report.accuracy,
        });
        classification.push(report);
        confusion_majority.push(maj);
        confusion_topn.push(top);
    }

    let primary = n_values
        .iter()
        .enumerate()
        .min_by_key(|(_, &n)| n)
        .map(|(i, _)| i)
        .expect("non-empty");
    let mut warnings: Vec<String> = classification[primary].warnings.clone();
    warnings.dedup();
    Ok(EvalReport {
        n_values: n_values.to_vec(),
        per_class: classification[primary].per_class.clone(),
        overall_accuracy: classification[primary].accuracy,
        total: records.len(),
        accuracy,
        classification,
        confusion_majority,
        confusion_topn,
        top3_at_topn: slide_tables(records, hits, n_values)?,
        warnings,
    })
}

fn check_disjoint(atlas: &Atlas, test: &EmbeddingSet) -> Result<()> {
    let atlas_ids: HashSet<&str> = atlas
        .embeddings()
        .records()
        .iter()
        .map(|r| r.patch_id.as_str())
        .collect();
    let mut shared: Vec<String> = test
        .records()
        .iter()
        .filter(|r| atlas_ids.contains(r.patch_id.as_str()))
        .map(|r| r.patch_id.clone())
        .collect();
    if !shared.is_empty() {
        shared.sort();
        let count = shared.len();
        shared.truncate(20);
        return Err(Error::Overlap { count, ids: shared });
    }
    Ok(())
}

/// Searches every test row against the atlas and scores the results.
pub fn evaluate(atlas: &Atlas, test_set: &EmbeddingSet, n_values: &[usize]) -> Result<EvalReport> {
    check_disjoint(atlas, test_set)?;
    validate_n_values(n_values, atlas.count())?;
    let k = *n_values.iter().max().expect("validated");
    let hits = atlas.knn_batch(test_set, k)?;
    evaluate_hits(test_set.records(), &hits, n_values)
}

/// top-3@top-n for a single test slide.
pub fn top3_at_topn(atlas: &Atlas, test_slide_set: &EmbeddingSet, k_values: &[usize]) -> Result<SlideFrequencyTable> {
    if test_slide_set.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let slide = &test_slide_set.records()[0].slide_id;
    if let Some(other) = test_slide_set.records().iter().find(|r| &r.slide_id != slide) {
        return Err(Error::InvalidInput(format!(
            "test set spans several slides ({slide}, {})",
            other.slide_id
        )));
    }
    validate_n_values(k_values, atlas.count())?;
    let k = *k_values.iter().max().expect("validated");
    let hits = atlas.knn_batch(test_slide_set, k)?;
    let mut tables = slide_tables(test_slide_set.records(), &hits, k_values)?;
    Ok(tables.remove(0))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn round2(x: f64) -> String {
    format!("{x:.2}")
}

/// Writes `eval_report.json`, CSV tables and SVG confusion heatmaps into `dir`.
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(&dir.join("eval_report.json"), json + "\n")?;

    let mut acc = String::from("n,top_n_accuracy,majority_n_accuracy\n");
    for a in &report.accuracy {
        acc += &format!("{},{},{}\n", a.n, a.top_n, a.majority_n);
    }
    write(&dir.join("accuracy.csv"), acc)?;

    let mut cls = String::from("n,label_id,precision,recall,f1,support\n");
    for (&n, c) in report.n_values.iter().zip(&report.classification) {
        for (label, m) in &c.per_class {
            cls += &format!("{n},{label},{},{},{},{}\n", round2(m.precision), round2(m.recall), round2(m.f1), m.support);
        }
        cls += &format!("{n},accuracy,,,{},{}\n", round2(c.accuracy), c.total);
    }
    write(&dir.join("classification.csv"), cls)?;

    let mut top3 = String::from("slide_id,true_label,patches,k,rank,label_id,count,percent\n");
    for t in &report.top3_at_topn {
        for f in &t.per_k {
            for (rank, e) in f.entries.iter().enumerate() {
                top3 += &format!(
                    "{},{},{},{},{},{},{},{:.2}\n",
                    t.slide_id,
                    t.true_label,
                    t.patches,
                    f.k,
                    rank + 1,
                    e.label_id,
                    e.count,
                    e.percent
                );
            }
        }
    }
    write(&dir.join("top3_at_topn.csv"), top3)?;

    let matrix_csv = |labels: &[u32], rows: Vec<Vec<String>>| {
        let mut s = String::from("true\\pred");
        for l in labels {
            s += &format!(",{l}");
        }
        s.push('\n');
        for (l, row) in labels.iter().zip(rows) {
            s += &format!("{l},{}\n", row.join(","));
        }
        s
    };
    for m in &report.confusion_majority {
        let rows = m.counts.iter().map(|r| r.iter().map(u64::to_string).collect()).collect();
        write(&dir.join(format!("confusion_majority_n{}.csv", m.n)), matrix_csv(&m.labels, rows))?;
        let names: Vec<String> = m.labels.iter().map(u32::to_string).collect();
        let vals: Vec<Vec<f64>> = m.counts.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        write(
            &dir.join(format!("confusion_majority_n{}.svg", m.n)),
            svg::heatmap(&format!("Majority-{} confusion (row-normalized)", m.n), &names, &vals),
        )?;
    }
    for m in &report.confusion_topn {
        let rows = m.counts.iter().map(|r| r.iter().map(|v| format!("{v}")).collect()).collect();
        write(&dir.join(format!("confusion_topn_n{}.csv", m.n)), matrix_csv(&m.labels, rows))?;
        let names: Vec<String> = m.labels.iter().map(u32::to_string).collect();
        write(
            &dir.join(format!("confusion_topn_n{}.svg", m.n)),
            svg::heatmap(&format!("Top-{} confusion (row-normalized)", m.n), &names, &m.counts),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hits(spec: &[(u32, f64)]) -> Vec<SearchHit> {
        spec.iter()
            .enumerate()
            .map(|(i, &(label_id, distance))| SearchHit {
                rank: i + 1,
                patch_id: format!("h{i}"),
                label_id,
                distance,
            })
            .collect()
    }

    #[test]
    fn clear_majority() {
        let v = majority_vote(&hits(&[(0, 0.1), (0, 0.2), (1, 0.3)]), 3).unwrap();
        assert_eq!(v.predicted_label, 0);
        assert!(!v.tie_broken);
        assert_eq!(v.votes.values().sum::<usize>(), 3);
    }

    #[test]
    fn tie_goes_to_smaller_summed_distance() {
        let v = majority_vote(&hits(&[(0, 0.5), (1, 0.4)]), 2).unwrap();
        assert_eq!(v.predicted_label, 1);
        assert!(v.tie_broken);
        // equal distances fall back to the smaller label
        let v = majority_vote(&hits(&[(5, 0.5), (2, 0.5)]), 2).unwrap();
        assert_eq!(v.predicted_label, 2);
    }

    #[test]
    fn n_one_is_rank_one() {
        let h = hits(&[(7, 0.1), (3, 0.2), (3, 0.3)]);
        assert_eq!(majority_vote(&h, 1).unwrap().predicted_label, 7);
        assert!(majority_vote(&h, 0).is_err());
        assert!(majority_vote(&h, 4).is_err());
    }

    #[test]
    fn topn_membership() {
        let h = hits(&[(0, 0.1), (1, 0.2), (2, 0.3)]);
        assert!(topn_correct(&h, 3, 1).unwrap());
        assert!(!topn_correct(&h, 3, 3).unwrap());
        assert!(!topn_correct(&h, 1, 1).unwrap());
    }

    #[test]
    fn absent_prediction_class_gets_zero_f1_with_warning() {
        let r = classification_report(&[(0, 1), (1, 1)]);
        assert_eq!(r.per_class[&0].precision, 0.0);
        assert_eq!(r.per_class[&0].f1, 0.0);
        assert_eq!(r.per_class[&1].precision, 0.5);
        assert!(r.warnings.iter().any(|w| w.contains("class 0 never predicted")));
        assert_eq!(r.accuracy, 0.5);
    }

    #[test]
    fn frequency_table_ranks_and_formats() {
        let preds = [3, 1, 1, 3, 2, 9];
        let t = frequency_table(&preds, 3);
        assert_eq!(t.iter().map(|e| e.label_id).collect::<Vec<_>>(), vec![1, 3, 2]);
        assert_eq!(t[0].to_string(), "1 / 2 / 33.33%");
        let all_one = frequency_table(&[4; 10], 3);
        assert_eq!(all_one.len(), 1);
        assert_eq!(all_one[0].to_string(), "4 / 10 / 100.00%");
    }

    #[test]
    fn confusion_rows_sum_to_support() {
        let recs: Vec<PatchRecord> = (0..4)
            .map(|i| PatchRecord::from_ids(format!("t{i}"), "s", if i < 2 { 0 } else { 1 }))
            .collect();
        let hl = vec![
            hits(&[(0, 0.1), (1, 0.2), (1, 0.3)]),
            hits(&[(0, 0.1), (0, 0.2), (2, 0.3)]),
            hits(&[(1, 0.1), (1, 0.2), (0, 0.3)]),
            hits(&[(2, 0.1), (1, 0.2), (0, 0.3)]),
        ];
        let r = evaluate_hits(&recs, &hl, &[1, 3]).unwrap();
        assert_eq!(r.confusion_majority[0].labels, vec![0, 1, 2]);
        for (m, t) in r.confusion_majority.iter().zip(&r.confusion_topn) {
            for (label, support) in [(0u32, 2u64), (1, 2), (2, 0)] {
                assert_eq!(m.row(label).unwrap().iter().sum::<u64>(), support);
                let s: f64 = t.row(label).unwrap().iter().sum();
                assert!((s - support as f64).abs() < 1e-9);
            }
        }
        assert_eq!(r.accuracy[0].majority_n, r.accuracy[0].top_n);
        assert!(r.accuracy[1].top_n >= r.accuracy[0].top_n);
        assert_eq!(r.overall_accuracy, 0.75);
    }
}
