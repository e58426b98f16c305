//! Partial-recognition (PR) and endpointer (EP) latency, nearest-rank
//! percentiles, and token error rate.

use serde::{Deserialize, Serialize};

use crate::datagen::Utterance;
use crate::decoder::EmissionTrace;
use crate::error::{Error, Result};
use crate::lattice::TokenId;

pub const DEFAULT_FRAME_MS: f64 = 10.0;

/// Signed time from the end of speech to the last content-token emission.
/// `None` when the hypothesis has no content token.
pub fn pr_latency(
    trace: &EmissionTrace,
    eos_frame: usize,
    frame_ms: f64,
    end_of_query: Option<TokenId>,
) -> Option<f64> {
    let last = trace.last_content_emission(end_of_query)?;
    Some((last.frame as f64 - eos_frame as f64) * frame_ms)
}

/// Signed time from the end of speech to the `</s>` emission. `None` when
/// `</s>` was never emitted or endpointer mode is off.
pub fn ep_latency(
    trace: &EmissionTrace,
    eos_frame: usize,
    frame_ms: f64,
    end_of_query: Option<TokenId>,
) -> Option<f64> {
    let eoq = trace.end_of_query_emission(end_of_query)?;
    Some((eoq.frame as f64 - eos_frame as f64) * frame_ms)
}

/// Nearest-rank percentile: the `ceil(p/100 * N)`-th smallest value, with
/// `p = 0` mapping to the minimum.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile of an empty sample"));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Config(format!("percentile {p} is outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Ok(sorted[rank.max(1) - 1])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub reference_len: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn add(&mut self, other: &EditCounts) {
        self.substitutions += other.substitutions;
        self.insertions += other.insertions;
        self.deletions += other.deletions;
        self.reference_len += other.reference_len;
    }

    /// Errors per reference token. Zero-length references count every
    /// insertion as a full error.
    pub fn rate(&self) -> f64 {
        if self.reference_len == 0 {
            self.errors() as f64
        } else {
            self.errors() as f64 / self.reference_len as f64
        }
    }

    pub fn deletion_share(&self) -> f64 {
        match self.errors() {
            0 => 0.0,
            n => self.deletions as f64 / n as f64,
        }
    }
}

/// Levenshtein alignment of `hypothesis` against `reference`, broken down by
/// error type.
pub fn edit_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hypothesis.len());
    // cost[i][j]: reference[..i] vs hypothesis[..j].
    let mut cost = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in cost.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, c) in cost[0].iter_mut().enumerate() {
        *c = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = cost[i - 1][j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            cost[i][j] = sub.min(cost[i - 1][j] + 1).min(cost[i][j - 1] + 1);
        }
    }
    let mut counts = EditCounts {
        reference_len: n,
        ..EditCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if cost[i][j] == cost[i - 1][j - 1] + usize::from(!same) {
                if !same {
                    counts.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cost[i][j] == cost[i - 1][j] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Corpus-level token error rate over aligned lists.
pub fn token_error_rate<T: PartialEq>(
    hypotheses: &[Vec<T>],
    references: &[Vec<T>],
) -> Result<EditCounts> {
    if hypotheses.len() != references.len() {
        return Err(Error::Shape(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut total = EditCounts::default();
    for (h, r) in hypotheses.iter().zip(references) {
        total.add(&edit_counts(r, h));
    }
    Ok(total)
}

/// Per-utterance evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub emitted_tokens: Vec<usize>,
    pub emission_frames: Vec<usize>,
    pub eos_frame: usize,
    pub reference_tokens: Vec<usize>,
    pub pr_ms: Option<f64>,
    pub ep_ms: Option<f64>,
    #[serde(skip)]
    pub edits: EditCounts,
}

impl UtteranceResult {
    pub fn new(
        utt: &Utterance,
        trace: &EmissionTrace,
        frame_ms: f64,
        end_of_query: Option<TokenId>,
    ) -> Self {
        let reference = utt.content_labels(end_of_query);
        let hypothesis = trace.content_tokens(end_of_query);
        Self {
            id: utt.id.clone(),
            emitted_tokens: trace.emissions.iter().map(|e| e.token.0).collect(),
            emission_frames: trace.emissions.iter().map(|e| e.frame).collect(),
            eos_frame: utt.eos_frame,
            reference_tokens: utt.labels.tokens().iter().map(|t| t.0).collect(),
            pr_ms: pr_latency(trace, utt.eos_frame, frame_ms, end_of_query),
            ep_ms: ep_latency(trace, utt.eos_frame, frame_ms, end_of_query),
            edits: edit_counts(reference, &hypothesis),
        }
    }
}

/// Aggregate metrics. Serialized field names are fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub wer: f64,
    pub pr50_ms: Option<f64>,
    pub pr90_ms: Option<f64>,
    pub ep50_ms: Option<f64>,
    pub ep90_ms: Option<f64>,
    pub n_utt: usize,
    pub n_excluded_pr: usize,
    pub n_excluded_ep: usize,
    pub deletion_share: f64,
    #[serde(skip)]
    pub frame_ms: f64,
}

pub const REPORT_FIELDS: [&str; 9] = [
    "wer",
    "pr50_ms",
    "pr90_ms",
    "ep50_ms",
    "ep90_ms",
    "n_utt",
    "n_excluded_pr",
    "n_excluded_ep",
    "deletion_share",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl LatencyReport {
    pub fn from_results(results: &[UtteranceResult], frame_ms: f64) -> Self {
        let prs: Vec<f64> = results.iter().filter_map(|r| r.pr_ms).collect();
        let eps: Vec<f64> = results.iter().filter_map(|r| r.ep_ms).collect();
        let mut edits = EditCounts::default();
        for r in results {
            edits.add(&r.edits);
        }
        let pct = |v: &[f64], p| percentile(v, p).ok();
        Self {
            wer: edits.rate(),
            pr50_ms: pct(&prs, 50.0),
            pr90_ms: pct(&prs, 90.0),
            ep50_ms: pct(&eps, 50.0),
            ep90_ms: pct(&eps, 90.0),
            n_utt: results.len(),
            n_excluded_pr: results.len() - prs.len(),
            n_excluded_ep: results.len() - eps.len(),
            deletion_share: edits.deletion_share(),
            frame_ms,
        }
    }

    pub fn csv_header() -> String {
        REPORT_FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        [
            self.wer.to_string(),
            opt(self.pr50_ms),
            opt(self.pr90_ms),
            opt(self.ep50_ms),
            opt(self.ep90_ms),
            self.n_utt.to_string(),
            self.n_excluded_pr.to_string(),
            self.n_excluded_ep.to_string(),
            self.deletion_share.to_string(),
        ]
        .join(",")
    }
}

/// Average ranks (ties share the mean rank), one-based.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson correlation of average ranks).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape(
            "spearman needs two equal-length samples of size >= 2".into(),
        ));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Emission;

    fn trace(items: &[(usize, usize)]) -> EmissionTrace {
        EmissionTrace {
            emissions: items
                .iter()
                .map(|&(k, f)| Emission {
                    token: TokenId(k),
                    frame: f,
                })
                .collect(),
        }
    }

    #[test]
    fn pr_latency_sign() {
        assert_eq!(
            pr_latency(&trace(&[(1, 3), (2, 12)]), 10, 10.0, None),
            Some(20.0)
        );
        assert_eq!(pr_latency(&trace(&[(1, 8)]), 10, 10.0, None), Some(-20.0));
        assert_eq!(pr_latency(&trace(&[(1, 10)]), 10, 10.0, None), Some(0.0));
        assert_eq!(pr_latency(&EmissionTrace::default(), 10, 10.0, None), None);
    }

    #[test]
    fn pr_ignores_end_of_query() {
        let eoq = Some(TokenId(5));
        let t = trace(&[(1, 9), (5, 15)]);
        assert_eq!(pr_latency(&t, 10, 10.0, eoq), Some(-10.0));
        assert_eq!(ep_latency(&t, 10, 10.0, eoq), Some(50.0));
        assert_eq!(pr_latency(&trace(&[(5, 12)]), 10, 10.0, eoq), None);
    }

    #[test]
    fn ep_missing_end_of_query() {
        assert_eq!(
            ep_latency(&trace(&[(1, 9)]), 10, 10.0, Some(TokenId(5))),
            None
        );
        assert_eq!(ep_latency(&trace(&[(5, 9)]), 10, 10.0, None), None);
    }

    #[test]
    fn nearest_rank() {
        assert_eq!(percentile(&[30.0], 90.0).unwrap(), 30.0);
        let v: Vec<f64> = (1..=10).map(|i| (i * 10) as f64).collect();
        assert_eq!(percentile(&v, 50.0).unwrap(), 50.0);
        assert_eq!(percentile(&v, 90.0).unwrap(), 90.0);
        assert_eq!(percentile(&v, 0.0).unwrap(), 10.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 100.0);
        let mut rev = v.clone();
        rev.reverse();
        assert_eq!(percentile(&rev, 50.0).unwrap(), 50.0);
        assert!(percentile(&[], 50.0).is_err());
        assert!(percentile(&v, 101.0).is_err());
    }

    #[test]
    fn edit_distance_cases() {
        let e = edit_counts(&['a', 'b', 'c'], &['a', 'b', 'c']);
        assert_eq!(e.errors(), 0);
        let e = edit_counts(&['a', 'b', 'c'], &['a', 'c']);
        assert_eq!((e.deletions, e.errors()), (1, 1));
        assert!((e.rate() - 1.0 / 3.0).abs() < 1e-15);
        let e = edit_counts(&['a'], &['b', 'c']);
        assert_eq!((e.substitutions, e.insertions, e.deletions), (1, 1, 0));
        assert_eq!(e.rate(), 2.0);
        assert_eq!(edit_counts::<u8>(&[], &[]).rate(), 0.0);
    }

    #[test]
    fn corpus_rate_and_deletion_share() {
        let refs = vec![vec![1, 2, 3], vec![4]];
        let hyps = vec![vec![1, 3], vec![5]];
        let e = token_error_rate(&hyps, &refs).unwrap();
        assert_eq!(e.errors(), 2);
        assert_eq!(e.reference_len, 4);
        assert_eq!(e.deletion_share(), 0.5);
        assert!(token_error_rate(&hyps[..1], &refs).is_err());
    }

    #[test]
    fn spearman_basics() {
        let x = [0.0, 0.004, 0.01, 0.04];
        assert!((spearman(&x, &[40.0, 20.0, 0.0, -30.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[40.0, 0.0, 20.0, -30.0]).unwrap() + 0.8).abs() < 1e-12);
        assert!((spearman(&x, &[1.0, 2.0, 3.0, 4.0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_schema() {
        let r = LatencyReport::from_results(&[], 10.0);
        let json = serde_json::to_value(&r).unwrap();
        let keys: Vec<&str> = json
            .as_object()
            .unwrap()
            .keys()
            .map(String::as_str)
            .collect();
        let mut expected = REPORT_FIELDS.to_vec();
        expected.sort();
        let mut keys = keys;
        keys.sort();
        assert_eq!(keys, expected);
        assert_eq!(LatencyReport::csv_header().split(',').count(), 9);
        assert_eq!(r.csv_row().split(',').count(), 9);
    }
}
