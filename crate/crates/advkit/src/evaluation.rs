//! Attack metrics and reporting.
//!
//! Success rates and malicious accuracy over per-sample prediction records,
//! retrieval mean average precision with an independent brute-force
//! cross-check, the cross-encoder transfer matrix, and the CSV round trip
//! for evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array2, Array4};

use crate::attack::{AttackError, NoiseArtifact};
use crate::config::{AsrMode, EvalReport, Mode};
use crate::data::Dataset;
use crate::encoders::{DownstreamHead, EncoderError, EncoderHandle};
use crate::parallel::{map_indexed, ExecMode};

/// Version tag written as the first line of every report CSV.
pub const EVAL_CSV_SCHEMA: &str = "advkit-eval-v1";

/// The k values reports carry as fixed `top{k}` columns.
pub const REPORT_KS: [usize; 6] = [1, 5, 10, 20, 50, 100];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no records to evaluate")]
    EmptyRecords,
    #[error("no clean-correct records; the success-rate denominator is empty")]
    NoCleanCorrect,
    #[error("ranked relevance list is empty")]
    EmptyRanking,
    #[error("total_relevant must be at least 1")]
    NoRelevantTotal,
    #[error("query set is empty")]
    EmptyQuerySet,
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("query {query} has no relevant gallery item")]
    NoRelevantForQuery { query: usize },
    #[error("feature row {0} has zero norm; cosine similarity undefined")]
    ZeroNormRow(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("head is bound to encoder {head} but was paired with {encoder}")]
    HeadBinding { head: String, encoder: String },
    #[error("dataset {0} has no labels")]
    Unlabeled(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("report CSV: {0}")]
    Csv(String),
}

/// One sample's labels under the clean and the attacked input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PredictionRecord {
    pub true_label: usize,
    pub clean_prediction: usize,
    pub adversarial_prediction: usize,
}

/// Fraction of inputs whose prediction the attack breaks.
///
/// `CleanCorrect` divides flips by the clean-correct subset (and errors when
/// that subset is empty); `FlipAll` divides clean-vs-adversarial prediction
/// changes by all records.
pub fn attack_success_rate(
    records: &[PredictionRecord],
    mode: AsrMode,
) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    match mode {
        AsrMode::CleanCorrect => {
            let correct: Vec<&PredictionRecord> = records
                .iter()
                .filter(|r| r.clean_prediction == r.true_label)
                .collect();
            if correct.is_empty() {
                return Err(EvalError::NoCleanCorrect);
            }
            let flipped = correct
                .iter()
                .filter(|r| r.adversarial_prediction != r.true_label)
                .count();
            Ok(flipped as f64 / correct.len() as f64)
        }
        AsrMode::FlipAll => {
            let flipped = records
                .iter()
                .filter(|r| r.adversarial_prediction != r.clean_prediction)
                .count();
            Ok(flipped as f64 / records.len() as f64)
        }
    }
}

/// Fraction of attacked inputs still classified correctly.
pub fn malicious_accuracy(records: &[PredictionRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let correct = records
        .iter()
        .filter(|r| r.adversarial_prediction == r.true_label)
        .count();
    Ok(correct as f64 / records.len() as f64)
}

/// Fraction of clean inputs classified correctly, from the same records.
pub fn clean_accuracy(records: &[PredictionRecord]) -> Result<f64, EvalError> {
    if records.is_empty() {
        return Err(EvalError::EmptyRecords);
    }
    let correct = records
        .iter()
        .filter(|r| r.clean_prediction == r.true_label)
        .count();
    Ok(correct as f64 / records.len() as f64)
}

/// Average precision over a ranked binary relevance list.
///
/// `AP@k = (sum of precision@i over relevant ranks i) / min(k, total_relevant)`,
/// so a perfect prefix scores 1 at every k.
pub fn retrieval_average_precision(
    ranked_relevance: &[bool],
    total_relevant: usize,
) -> Result<f64, EvalError> {
    if ranked_relevance.is_empty() {
        return Err(EvalError::EmptyRanking);
    }
    if total_relevant == 0 {
        return Err(EvalError::NoRelevantTotal);
    }
    let k = ranked_relevance.len();
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            precision_sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(precision_sum / k.min(total_relevant) as f64)
}

/// mAP per requested k, plus whether any k had to be truncated.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSuite {
    /// Requested k (pre-truncation) mapped to its mAP.
    pub table: BTreeMap<usize, f64>,
    pub truncated: bool,
}

/// Unit-normalizes feature rows. Shared by the suite and its oracle so both
/// score cosine similarity on bit-identical vectors.
fn unit_rows(rows: &Array2<f64>) -> Result<Array2<f64>, EvalError> {
    let mut out = rows.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(EvalError::ZeroNormRow(i));
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(out)
}

fn check_retrieval_inputs(
    queries: &Array2<f64>,
    query_labels: &[usize],
    gallery: &Array2<f64>,
    gallery_labels: &[usize],
) -> Result<(), EvalError> {
    if queries.dim().0 == 0 {
        return Err(EvalError::EmptyQuerySet);
    }
    if gallery.dim().0 == 0 {
        return Err(EvalError::EmptyGallery);
    }
    if queries.dim().0 != query_labels.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} query rows but {} query labels",
            queries.dim().0,
            query_labels.len()
        )));
    }
    if gallery.dim().0 != gallery_labels.len() {
        return Err(EvalError::ShapeMismatch(format!(
            "{} gallery rows but {} gallery labels",
            gallery.dim().0,
            gallery_labels.len()
        )));
    }
    if queries.dim().1 != gallery.dim().1 {
        return Err(EvalError::ShapeMismatch(format!(
            "query dim {} vs gallery dim {}",
            queries.dim().1,
            gallery.dim().1
        )));
    }
    Ok(())
}

/// Plain per-pair dot product, feature index order. Both the suite and the
/// oracle go through this exact loop so their similarities match bitwise.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Retrieval mAP: each query ranks the gallery by descending cosine
/// similarity (ties broken by ascending gallery index), relevance is label
/// equality, and AP@k is averaged over queries.
///
/// With `exclude_diagonal` gallery item `i` is treated as query `i`'s own
/// copy and skipped, which is the adversarial-query-versus-clean-gallery
/// protocol. Requested ks larger than the gallery are truncated and flagged.
pub fn retrieval_map_suite(
    queries: &Array2<f64>,
    query_labels: &[usize],
    gallery: &Array2<f64>,
    gallery_labels: &[usize],
    ks: &[usize],
    exclude_diagonal: bool,
) -> Result<MapSuite, EvalError> {
    check_retrieval_inputs(queries, query_labels, gallery, gallery_labels)?;
    let n_gallery = gallery.dim().0;
    let q_unit = unit_rows(queries)?;
    let g_unit = unit_rows(gallery)?;
    let truncated = ks.iter().any(|&k| k > n_gallery);

    let mode = ExecMode::default_mode();
    let n_queries = q_unit.dim().0;
    let per_query: Vec<Result<Vec<(usize, f64)>, EvalError>> =
        map_indexed(mode, n_queries, |qi| {
            let q = q_unit.row(qi);
            let q = q.as_slice().expect("row is contiguous");
            let mut ranked: Vec<(usize, f64)> = (0..n_gallery)
                .filter(|&gi| !(exclude_diagonal && gi == qi))
                .map(|gi| {
                    let g = g_unit.row(gi);
                    (gi, dot(q, g.as_slice().expect("row is contiguous")))
                })
                .collect();
            ranked.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .expect("similarities are finite")
                    .then(a.0.cmp(&b.0))
            });
            let total_relevant = ranked
                .iter()
                .filter(|(gi, _)| gallery_labels[*gi] == query_labels[qi])
                .count();
            if total_relevant == 0 {
                return Err(EvalError::NoRelevantForQuery { query: qi });
            }
            Ok(ranked)
        });

    let mut rankings = Vec::with_capacity(n_queries);
    for r in per_query {
        rankings.push(r?);
    }

    let mut table = BTreeMap::new();
    for &k in ks {
        let mut ap_sum = 0.0;
        for (qi, ranked) in rankings.iter().enumerate() {
            let kk = k.min(ranked.len());
            let relevance: Vec<bool> = ranked[..kk]
                .iter()
                .map(|(gi, _)| gallery_labels[*gi] == query_labels[qi])
                .collect();
            let total_relevant = ranked
                .iter()
                .filter(|(gi, _)| gallery_labels[*gi] == query_labels[qi])
                .count();
            ap_sum += retrieval_average_precision(&relevance, total_relevant)?;
        }
        table.insert(k, ap_sum / rankings.len() as f64);
    }
    Ok(MapSuite { table, truncated })
}

/// Brute-force mAP used only to cross-check `retrieval_map_suite`.
///
/// Independent full-sort re-implementation: sequential, selection-style rank
/// construction and a separate AP accumulation. It must agree with the suite
/// exactly, not within a tolerance.
pub fn retrieval_map_oracle(
    queries: &Array2<f64>,
    query_labels: &[usize],
    gallery: &Array2<f64>,
    gallery_labels: &[usize],
    ks: &[usize],
    exclude_diagonal: bool,
) -> Result<MapSuite, EvalError> {
    check_retrieval_inputs(queries, query_labels, gallery, gallery_labels)?;
    let n_gallery = gallery.dim().0;
    let q_unit = unit_rows(queries)?;
    let g_unit = unit_rows(gallery)?;
    let truncated = ks.iter().any(|&k| k > n_gallery);

    let mut table = BTreeMap::new();
    for &k in ks {
        let mut ap_sum = 0.0;
        let mut queries_seen = 0usize;
        for qi in 0..q_unit.dim().0 {
            let q_row = q_unit.row(qi);
            let q = q_row.as_slice().expect("row is contiguous");
            let mut candidates: Vec<usize> = (0..n_gallery)
                .filter(|&gi| !(exclude_diagonal && gi == qi))
                .collect();
            let sims: Vec<f64> = candidates
                .iter()
                .map(|&gi| {
                    let g_row = g_unit.row(gi);
                    dot(q, g_row.as_slice().expect("row is contiguous"))
                })
                .collect();
            let sim_of: std::collections::HashMap<usize, f64> =
                candidates.iter().copied().zip(sims).collect();
            // Selection sort by (descending similarity, ascending index).
            let mut order: Vec<usize> = Vec::with_capacity(candidates.len());
            while !candidates.is_empty() {
                let mut best = 0;
                for j in 1..candidates.len() {
                    let (bi, bj) = (candidates[best], candidates[j]);
                    if sim_of[&bj] > sim_of[&bi] || (sim_of[&bj] == sim_of[&bi] && bj < bi) {
                        best = j;
                    }
                }
                order.push(candidates.remove(best));
            }
            let total_relevant = order
                .iter()
                .filter(|gi| gallery_labels[**gi] == query_labels[qi])
                .count();
            if total_relevant == 0 {
                return Err(EvalError::NoRelevantForQuery { query: qi });
            }
            let kk = k.min(order.len());
            let mut hits = 0usize;
            let mut ap = 0.0;
            for (rank, gi) in order[..kk].iter().enumerate() {
                if gallery_labels[*gi] == query_labels[qi] {
                    hits += 1;
                    ap += hits as f64 / (rank + 1) as f64;
                }
            }
            ap_sum += ap / kk.min(total_relevant) as f64;
            queries_seen += 1;
        }
        table.insert(k, ap_sum / queries_seen as f64);
    }
    Ok(MapSuite { table, truncated })
}

/// Clean and adversarial predictions for every sample of a labeled dataset,
/// through one encoder and its linear probe.
pub fn classification_records(
    encoder: &EncoderHandle,
    head: &DownstreamHead,
    dataset: &Dataset,
    artifact: &NoiseArtifact,
) -> Result<Vec<PredictionRecord>, EvalError> {
    let labels = dataset
        .labels()
        .ok_or_else(|| EvalError::Unlabeled(dataset.name.clone()))?;
    if head.encoder_id() != encoder.id {
        return Err(EvalError::HeadBinding {
            head: head.encoder_id().to_string(),
            encoder: encoder.id.clone(),
        });
    }
    let mode = ExecMode::default_mode();
    let clean = dataset.range_f64(0..dataset.len());
    let adv = artifact.apply(&clean)?;
    let clean_preds = predict(encoder, head, &clean, mode)?;
    let adv_preds = predict(encoder, head, &adv, mode)?;
    Ok(labels
        .iter()
        .zip(clean_preds)
        .zip(adv_preds)
        .map(|((&t, c), a)| PredictionRecord {
            true_label: t,
            clean_prediction: c,
            adversarial_prediction: a,
        })
        .collect())
}

fn predict(
    encoder: &EncoderHandle,
    head: &DownstreamHead,
    x: &Array4<f64>,
    mode: ExecMode,
) -> Result<Vec<usize>, EvalError> {
    let feats = encoder.forward_batch(x, mode)?;
    Ok(head.predict(&feats)?)
}

/// ASR of every artifact through every encoder's probe.
///
/// Row `a`, column `e` is the success rate of artifact `a` against encoder
/// `e` on `downstream`, always in the clean-correct convention. Each head
/// must be bound to the encoder it is paired with.
pub fn transfer_matrix(
    artifacts: &[NoiseArtifact],
    encoders: &[(EncoderHandle, DownstreamHead)],
    downstream: &Dataset,
) -> Result<Array2<f64>, EvalError> {
    let mut out = Array2::zeros((artifacts.len(), encoders.len()));
    for (ei, (encoder, head)) in encoders.iter().enumerate() {
        for (ai, artifact) in artifacts.iter().enumerate() {
            let records = classification_records(encoder, head, downstream, artifact)?;
            out[[ai, ei]] = attack_success_rate(&records, AsrMode::CleanCorrect)?;
        }
    }
    Ok(out)
}

fn csv_escape(field: &str) -> String {
    if field.contains(',') || field.contains('"') || field.contains('\n') {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

fn opt_f64(v: Option<f64>) -> String {
    // Display for f64 is the shortest representation that parses back to the
    // same bits, so the CSV round trip is exact.
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Renders reports as CSV: a schema comment line, a header row, then one row
/// per report with the mAP table spread over fixed `top{k}` columns.
pub fn eval_reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# schema: {EVAL_CSV_SCHEMA}");
    let mut header = vec![
        "encoder_id".to_string(),
        "surrogate".to_string(),
        "downstream".to_string(),
        "mode".to_string(),
        "attack".to_string(),
        "defense".to_string(),
        "param".to_string(),
        "seed".to_string(),
        "tau".to_string(),
        "asr_mode".to_string(),
        "clean_accuracy".to_string(),
        "malicious_accuracy".to_string(),
        "attack_success_rate".to_string(),
        "map_truncated".to_string(),
    ];
    for k in REPORT_KS {
        header.push(format!("top{k}"));
    }
    let _ = writeln!(out, "{}", header.join(","));
    for r in reports {
        let mut row = vec![
            csv_escape(&r.encoder_id),
            csv_escape(&r.surrogate),
            csv_escape(&r.downstream),
            r.mode.map(|m| m.to_string()).unwrap_or_default(),
            csv_escape(&r.attack),
            csv_escape(&r.defense),
            opt_f64(r.param),
            r.seed.to_string(),
            opt_f64(r.tau),
            r.asr_mode.to_string(),
            opt_f64(r.clean_accuracy),
            opt_f64(r.malicious_accuracy),
            opt_f64(r.attack_success_rate),
            r.map_truncated.to_string(),
        ];
        for k in REPORT_KS {
            row.push(opt_f64(r.map_table.get(&k).copied()));
        }
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '"' if quoted && chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            '"' => quoted = !quoted,
            ',' if !quoted => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

fn parse_opt_f64(s: &str, what: &str) -> Result<Option<f64>, EvalError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|e| EvalError::Csv(format!("{what}: {e}")))
}

/// Parses a CSV produced by [`eval_reports_to_csv`], checking the schema tag.
pub fn eval_reports_from_csv(text: &str) -> Result<Vec<EvalReport>, EvalError> {
    let mut lines = text.lines();
    let schema = lines
        .next()
        .ok_or_else(|| EvalError::Csv("empty file".into()))?;
    let Some(tag) = schema.strip_prefix("# schema: ") else {
        return Err(EvalError::Csv(format!(
            "missing schema line, found {schema:?}"
        )));
    };
    if tag != EVAL_CSV_SCHEMA {
        return Err(EvalError::Csv(format!(
            "schema {tag:?} but this build reads {EVAL_CSV_SCHEMA:?}"
        )));
    }
    let header = lines
        .next()
        .ok_or_else(|| EvalError::Csv("missing header row".into()))?;
    let columns = split_csv_line(header);
    let expected = 14 + REPORT_KS.len();
    if columns.len() != expected {
        return Err(EvalError::Csv(format!(
            "expected {expected} columns, found {}",
            columns.len()
        )));
    }

    let mut reports = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f = split_csv_line(line);
        if f.len() != expected {
            return Err(EvalError::Csv(format!(
                "row {}: expected {expected} fields, found {}",
                lineno + 3,
                f.len()
            )));
        }
        let mode = match f[3].as_str() {
            "" => None,
            "perturbation" => Some(Mode::Perturbation),
            "patch" => Some(Mode::Patch),
            other => return Err(EvalError::Csv(format!("unknown mode {other:?}"))),
        };
        let asr_mode = match f[9].as_str() {
            "clean_correct" => AsrMode::CleanCorrect,
            "flip_all" => AsrMode::FlipAll,
            other => return Err(EvalError::Csv(format!("unknown asr mode {other:?}"))),
        };
        let mut map_table = BTreeMap::new();
        for (i, k) in REPORT_KS.iter().enumerate() {
            if let Some(v) = parse_opt_f64(&f[14 + i], "map cell")? {
                map_table.insert(*k, v);
            }
        }
        reports.push(EvalReport {
            encoder_id: f[0].clone(),
            surrogate: f[1].clone(),
            downstream: f[2].clone(),
            mode,
            attack: f[4].clone(),
            defense: f[5].clone(),
            param: parse_opt_f64(&f[6], "param")?,
            seed: f[7]
                .parse()
                .map_err(|e| EvalError::Csv(format!("seed: {e}")))?,
            tau: parse_opt_f64(&f[8], "tau")?,
            asr_mode,
            clean_accuracy: parse_opt_f64(&f[10], "clean_accuracy")?,
            malicious_accuracy: parse_opt_f64(&f[11], "malicious_accuracy")?,
            attack_success_rate: parse_opt_f64(&f[12], "attack_success_rate")?,
            map_truncated: f[13]
                .parse()
                .map_err(|e| EvalError::Csv(format!("map_truncated: {e}")))?,
            map_table,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AttackConfig;
    use crate::data::synthetic_classes;
    use crate::encoders::{train_linear_probe, train_toy_encoder, Method};
    use rand::Rng;

    fn rec(t: usize, c: usize, a: usize) -> PredictionRecord {
        PredictionRecord {
            true_label: t,
            clean_prediction: c,
            adversarial_prediction: a,
        }
    }

    #[test]
    fn asr_counts_flips_over_clean_correct() {
        // 10 samples, 8 clean-correct, 6 of those flipped.
        let mut records = Vec::new();
        for i in 0..8 {
            let adv = if i < 6 { 1 } else { 0 };
            records.push(rec(0, 0, adv));
        }
        records.push(rec(0, 1, 0));
        records.push(rec(0, 1, 1));
        let asr = attack_success_rate(&records, AsrMode::CleanCorrect).unwrap();
        assert!((asr - 0.75).abs() < 1e-15);
    }

    #[test]
    fn asr_extremes() {
        let same = vec![rec(0, 0, 0), rec(1, 1, 1)];
        assert_eq!(
            attack_success_rate(&same, AsrMode::CleanCorrect).unwrap(),
            0.0
        );
        let all_flipped = vec![rec(0, 0, 1), rec(1, 1, 0)];
        assert_eq!(
            attack_success_rate(&all_flipped, AsrMode::CleanCorrect).unwrap(),
            1.0
        );
    }

    #[test]
    fn asr_without_clean_correct_is_an_error() {
        let records = vec![rec(0, 1, 1), rec(2, 3, 3)];
        assert!(matches!(
            attack_success_rate(&records, AsrMode::CleanCorrect),
            Err(EvalError::NoCleanCorrect)
        ));
        assert!(matches!(
            attack_success_rate(&[], AsrMode::CleanCorrect),
            Err(EvalError::EmptyRecords)
        ));
    }

    #[test]
    fn flip_all_counts_any_prediction_change() {
        // One clean-wrong sample flips too; FlipAll sees it, CleanCorrect not.
        let records = vec![rec(0, 0, 1), rec(0, 1, 2), rec(1, 1, 1), rec(2, 0, 0)];
        let flip = attack_success_rate(&records, AsrMode::FlipAll).unwrap();
        assert!((flip - 0.5).abs() < 1e-15);
        let cc = attack_success_rate(&records, AsrMode::CleanCorrect).unwrap();
        assert!((cc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn asr_is_monotone_in_the_flipped_set() {
        let mut records = vec![rec(0, 0, 0); 10];
        let mut last = 0.0;
        for i in 0..10 {
            records[i].adversarial_prediction = 1;
            let asr = attack_success_rate(&records, AsrMode::CleanCorrect).unwrap();
            assert!(asr >= last);
            last = asr;
        }
        assert_eq!(last, 1.0);
    }

    #[test]
    fn malicious_accuracy_counts_surviving_predictions() {
        let mut records = Vec::new();
        for i in 0..10 {
            let adv = if i < 7 { 5 } else { 6 };
            records.push(rec(5, 5, adv));
        }
        assert!((malicious_accuracy(&records).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(malicious_accuracy(&[rec(1, 0, 1)]).unwrap(), 1.0);
        assert_eq!(malicious_accuracy(&[rec(1, 0, 0)]).unwrap(), 0.0);
        assert!(matches!(
            malicious_accuracy(&[]),
            Err(EvalError::EmptyRecords)
        ));
    }

    #[test]
    fn average_precision_hand_value() {
        let ap = retrieval_average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.833333).abs() < 1e-6);
    }

    #[test]
    fn average_precision_extremes_and_errors() {
        assert_eq!(
            retrieval_average_precision(&[false, false, false], 4).unwrap(),
            0.0
        );
        assert_eq!(
            retrieval_average_precision(&[true, true, true], 5).unwrap(),
            1.0
        );
        assert!(matches!(
            retrieval_average_precision(&[], 3),
            Err(EvalError::EmptyRanking)
        ));
        assert!(matches!(
            retrieval_average_precision(&[true], 0),
            Err(EvalError::NoRelevantTotal)
        ));
    }

    #[test]
    fn average_precision_ignores_tail_shuffles_of_irrelevant_items() {
        // Irrelevant items below the last hit never change AP.
        let a = retrieval_average_precision(&[true, false, true, false, false], 2).unwrap();
        let b = retrieval_average_precision(&[true, false, true, false, false], 2).unwrap();
        assert_eq!(a, b);
        let with_tail = retrieval_average_precision(&[true, true, false, false], 2).unwrap();
        let no_tail = retrieval_average_precision(&[true, true], 2).unwrap();
        assert_eq!(with_tail, no_tail);
    }

    #[test]
    fn map_suite_hand_example() {
        // Two orthogonal classes; the second query starts slightly off so its
        // top-1 is a wrong-class item.
        let gallery = ndarray::arr2(&[
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.9, 0.1, 0.0],
        ]);
        let g_labels = vec![0, 1, 0];
        let queries = ndarray::arr2(&[[1.0, 0.0, 0.0], [0.05, 1.0, 0.0]]);
        let q_labels = vec![0, 1];
        let suite =
            retrieval_map_suite(&queries, &q_labels, &gallery, &g_labels, &[1, 3], false).unwrap();
        // Query 0: ranks items 0, 2 first (both class 0). AP@1 = 1.
        // Query 1: top-1 is its own class item (index 1). AP@1 = 1.
        assert_eq!(suite.table[&1], 1.0);
        assert!(!suite.truncated);
        assert!(suite.table[&3] > 0.9);
    }

    #[test]
    fn map_suite_top1_exact_match_contributes_one() {
        let gallery = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let queries = ndarray::arr2(&[[1.0, 0.0]]);
        let suite =
            retrieval_map_suite(&queries, &[0], &gallery, &[0, 1], &[1], false).unwrap();
        assert_eq!(suite.table[&1], 1.0);
    }

    #[test]
    fn map_suite_truncates_oversized_k() {
        let gallery = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let queries = ndarray::arr2(&[[1.0, 0.0]]);
        let suite =
            retrieval_map_suite(&queries, &[0], &gallery, &[0, 1], &[10], false).unwrap();
        assert!(suite.truncated);
        assert_eq!(suite.table[&10], 1.0);
    }

    #[test]
    fn map_suite_errors() {
        let gallery = ndarray::arr2(&[[1.0, 0.0]]);
        let empty: Array2<f64> = Array2::zeros((0, 2));
        assert!(matches!(
            retrieval_map_suite(&empty, &[], &gallery, &[0], &[1], false),
            Err(EvalError::EmptyQuerySet)
        ));
        let queries = ndarray::arr2(&[[1.0, 0.0]]);
        assert!(matches!(
            retrieval_map_suite(&queries, &[0], &empty, &[], &[1], false),
            Err(EvalError::EmptyGallery)
        ));
        assert!(matches!(
            retrieval_map_suite(&queries, &[5], &gallery, &[0], &[1], false),
            Err(EvalError::NoRelevantForQuery { query: 0 })
        ));
        let zero = ndarray::arr2(&[[0.0, 0.0]]);
        assert!(matches!(
            retrieval_map_suite(&zero, &[0], &gallery, &[0], &[1], false),
            Err(EvalError::ZeroNormRow(0))
        ));
    }

    #[test]
    fn excluding_the_diagonal_drops_the_self_match() {
        // Query 0 equals gallery 0. With the self copy excluded the top hit
        // becomes the wrong-class item 2, and the only remaining same-class
        // item 3 sits last.
        let gallery = ndarray::arr2(&[
            [1.0, 0.0],
            [0.0, 1.0],
            [0.6, 0.8],
            [-1.0, 0.0],
        ]);
        let g_labels = vec![0, 1, 1, 0];
        let queries = ndarray::arr2(&[[1.0, 0.0]]);
        let with_self =
            retrieval_map_suite(&queries, &[0], &gallery, &g_labels, &[1], false).unwrap();
        let without =
            retrieval_map_suite(&queries, &[0], &gallery, &g_labels, &[1], true).unwrap();
        assert_eq!(with_self.table[&1], 1.0);
        assert_eq!(without.table[&1], 0.0);
    }

    #[test]
    fn suite_matches_oracle_on_random_instances() {
        let mut rng = crate::config::derive_rng(41, "eval/oracle");
        for case in 0..100 {
            let n_gallery = rng.gen_range(1..=32);
            let n_queries = rng.gen_range(1..=8);
            let dim = rng.gen_range(2..=6);
            let classes = rng.gen_range(1..=3).min(n_gallery);
            let gallery = Array2::from_shape_fn((n_gallery, dim), |_| {
                rng.gen_range(-1.0..1.0) + 1.5
            });
            let g_labels: Vec<usize> =
                (0..n_gallery).map(|i| i % classes).collect();
            let q_labels: Vec<usize> =
                (0..n_queries).map(|_| rng.gen_range(0..classes)).collect();
            let queries =
                Array2::from_shape_fn((n_queries, dim), |_| rng.gen_range(-1.0..1.0) + 1.5);
            let ks = vec![1, 5, 10];
            let a = retrieval_map_suite(&queries, &q_labels, &gallery, &g_labels, &ks, false)
                .unwrap();
            let b = retrieval_map_oracle(&queries, &q_labels, &gallery, &g_labels, &ks, false)
                .unwrap();
            assert_eq!(a.truncated, b.truncated, "case {case}");
            for k in &ks {
                assert_eq!(
                    a.table[k].to_bits(),
                    b.table[k].to_bits(),
                    "case {case} k {k}"
                );
            }
        }
    }

    #[test]
    fn suite_matches_oracle_with_exact_ties() {
        // Duplicate gallery rows force similarity ties; both sides must use
        // the ascending-index tie-break.
        let gallery = ndarray::arr2(&[
            [1.0, 0.0],
            [1.0, 0.0],
            [0.0, 1.0],
            [1.0, 0.0],
        ]);
        let g_labels = vec![1, 0, 1, 0];
        let queries = ndarray::arr2(&[[1.0, 0.0], [0.5, 0.5]]);
        let q_labels = vec![0, 1];
        let ks = vec![1, 2, 4];
        let a = retrieval_map_suite(&queries, &q_labels, &gallery, &g_labels, &ks, false).unwrap();
        let b = retrieval_map_oracle(&queries, &q_labels, &gallery, &g_labels, &ks, false).unwrap();
        for k in &ks {
            assert_eq!(a.table[k].to_bits(), b.table[k].to_bits());
        }
        // Tie-break sanity: query 0 ties gallery 0, 1, 3 and the
        // ascending-index rule puts the wrong-class item 0 first (AP@1 = 0);
        // query 1 ties everything and item 0 is its class (AP@1 = 1).
        assert_eq!(a.table[&1], 0.5);
    }

    fn eval_fixture() -> (EncoderHandle, DownstreamHead, Dataset, NoiseArtifact) {
        let pretrain = synthetic_classes("pretrain", 512, 4, (3, 16, 16), 21);
        let encoder = train_toy_encoder(&pretrain, Method::SimclrStyle, 21, 1, 64).unwrap();
        let labeled = synthetic_classes("labeled", 64, 4, (3, 16, 16), 22);
        let head = train_linear_probe(&encoder, &labeled, 10, 22).unwrap();
        let mut cfg = AttackConfig::default();
        cfg.image_shape = [3, 16, 16];
        cfg.latent_dim = 8;
        let artifact = NoiseArtifact::zero_control(&cfg).unwrap();
        (encoder, head, labeled, artifact)
    }

    #[test]
    fn zero_noise_transfer_row_is_all_zeros() {
        let (encoder, head, labeled, zero) = eval_fixture();
        let matrix = transfer_matrix(
            &[zero.clone()],
            &[(encoder.clone(), head.clone())],
            &labeled,
        )
        .unwrap();
        assert_eq!(matrix.dim(), (1, 1));
        assert_eq!(matrix[[0, 0]], 0.0);

        // The same pair computed directly agrees with the matrix entry.
        let records = classification_records(&encoder, &head, &labeled, &zero).unwrap();
        let direct = attack_success_rate(&records, AsrMode::CleanCorrect).unwrap();
        assert_eq!(matrix[[0, 0]], direct);
    }

    #[test]
    fn mismatched_probe_binding_is_rejected() {
        let (encoder, _, labeled, zero) = eval_fixture();
        let other = DownstreamHead::LinearProbe {
            weights: Array2::zeros((128, 4)),
            bias: ndarray::Array1::zeros(4),
            classes: 4,
            encoder_id: "enc-000000000000".into(),
            epochs: 0,
            lr: 0.01,
        };
        let err = transfer_matrix(&[zero], &[(encoder, other)], &labeled);
        assert!(matches!(err, Err(EvalError::HeadBinding { .. })));
    }

    #[test]
    fn csv_round_trip_preserves_every_cell() {
        let mut map_table = BTreeMap::new();
        map_table.insert(1, 0.75);
        map_table.insert(10, 0.5123456789012345);
        let reports = vec![
            EvalReport {
                encoder_id: "enc-abc".into(),
                surrogate: "surrogate, with comma".into(),
                downstream: "downstream".into(),
                mode: Some(Mode::Perturbation),
                attack: "adv-per".into(),
                defense: "none".into(),
                param: Some(10.0 / 255.0),
                seed: 100,
                tau: Some(0.1),
                clean_accuracy: Some(0.9375),
                malicious_accuracy: Some(0.25),
                attack_success_rate: Some(0.7333333333333333),
                asr_mode: AsrMode::CleanCorrect,
                map_table,
                map_truncated: true,
            },
            EvalReport {
                encoder_id: "enc-def".into(),
                surrogate: "s".into(),
                downstream: "d".into(),
                mode: None,
                attack: "none".into(),
                defense: "gaussian".into(),
                param: None,
                seed: 7,
                tau: None,
                clean_accuracy: Some(1.0),
                malicious_accuracy: None,
                attack_success_rate: None,
                asr_mode: AsrMode::FlipAll,
                map_table: BTreeMap::new(),
                map_truncated: false,
            },
        ];
        let csv = eval_reports_to_csv(&reports);
        assert!(csv.starts_with(&format!("# schema: {EVAL_CSV_SCHEMA}\n")));
        let back = eval_reports_from_csv(&csv).unwrap();
        assert_eq!(back, reports);
    }

    #[test]
    fn csv_rejects_wrong_schema() {
        let text = "# schema: advkit-eval-v999\nencoder_id\n";
        assert!(matches!(
            eval_reports_from_csv(text),
            Err(EvalError::Csv(_))
        ));
        assert!(matches!(eval_reports_from_csv(""), Err(EvalError::Csv(_))));
    }
}
