//! Serializable attribution reports.
//!
//! JSON bodies carry kebab-case keys and no timestamps, so identical inputs
//! serialize to identical bytes. TSV output uses tab separators, a header
//! row, "." as the decimal separator and 6 significant digits.

use serde::{Deserialize, Serialize};

use crate::attribution::{ExpressionWindow, GlobalGradient, TokenSaliency, WordRanking};

/// Per-example saliency report: one entry per non-pad token plus the top
/// expression windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct LocalReport {
    pub example_id: usize,
    /// The non-pad tokens as the model saw them (unknown words appear as
    /// "<unk>"), in sequence order.
    pub tokens: Vec<String>,
    pub saliency: Vec<SaliencyEntry>,
    pub expressions: Vec<ExpressionEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyEntry {
    pub position: usize,
    pub token: String,
    pub norm: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpressionEntry {
    pub anchor: usize,
    pub window: Vec<String>,
    pub norm: f64,
}

impl LocalReport {
    pub fn new(
        example_id: usize,
        tokens: Vec<String>,
        saliency: &[TokenSaliency],
        expressions: &[ExpressionWindow],
    ) -> Self {
        LocalReport {
            example_id,
            tokens,
            saliency: saliency
                .iter()
                .map(|s| SaliencyEntry {
                    position: s.position,
                    token: s.token.clone(),
                    norm: s.norm,
                    rank: s.rank,
                })
                .collect(),
            expressions: expressions
                .iter()
                .map(|e| ExpressionEntry {
                    anchor: e.anchor,
                    window: e.window.clone(),
                    norm: e.norm,
                })
                .collect(),
        }
    }
}

/// Global word-importance report over a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GlobalReport {
    pub score_kind: String,
    pub sample_count: usize,
    pub positive: Vec<WordValueEntry>,
    pub negative: Vec<WordValueEntry>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub surrogate_agreement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordValueEntry {
    pub word: String,
    pub value: f64,
}

impl GlobalReport {
    pub fn new(
        global: &GlobalGradient,
        ranking: &WordRanking,
        surrogate_agreement: Option<f64>,
    ) -> Self {
        let entry = |w: &crate::attribution::WordWeight| WordValueEntry {
            word: w.word.clone(),
            value: w.value,
        };
        GlobalReport {
            score_kind: global.score_kind.as_str().to_owned(),
            sample_count: global.sample_count,
            positive: ranking.positive.iter().map(entry).collect(),
            negative: ranking.negative.iter().map(entry).collect(),
            surrogate_agreement,
        }
    }
}

/// Outcome of a training run, as written next to the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainingSummary {
    pub architecture: String,
    pub seed: u64,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    let mut body = serde_json::to_string_pretty(value).expect("report serialization");
    body.push('\n');
    body
}

/// Format with 6 significant digits and a plain decimal point, falling back
/// to scientific notation outside a readable magnitude range.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_owned();
    }
    let exponent = v.abs().log10().floor() as i32;
    if !(-4..=5).contains(&exponent) {
        format!("{v:.5e}")
    } else {
        let decimals = (5 - exponent).max(0) as usize;
        format!("{v:.decimals$}")
    }
}

/// One row per extracted expression, grouped by example.
pub fn local_reports_to_tsv(reports: &[LocalReport]) -> String {
    let mut out = String::from("example-id\trank\ttoken\tnorm\texpression\n");
    for report in reports {
        for expr in &report.expressions {
            let rank = report
                .saliency
                .iter()
                .find(|s| s.position == expr.anchor)
                .map(|s| s.rank)
                .unwrap_or(0);
            let token = expr.window.first().cloned().unwrap_or_default();
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                report.example_id,
                rank,
                token,
                format_sig6(expr.norm),
                expr.window.join(" ")
            ));
        }
    }
    out
}

/// Word table rows; the agreement fraction, when present, trails as a
/// comment line.
pub fn global_report_to_tsv(report: &GlobalReport) -> String {
    let mut out = String::from("sentiment\trank\tword\tvalue\n");
    for (sentiment, list) in [
        ("positive", &report.positive),
        ("negative", &report.negative),
    ] {
        for (i, entry) in list.iter().enumerate() {
            out.push_str(&format!(
                "{sentiment}\t{}\t{}\t{}\n",
                i + 1,
                entry.word,
                format_sig6(entry.value)
            ));
        }
    }
    if let Some(agreement) = report.surrogate_agreement {
        out.push_str(&format!(
            "# surrogate-agreement: {}\n",
            format_sig6(agreement)
        ));
    }
    out
}
