//! Classification and agreement metrics: accuracy, one-vs-rest ROC AUC,
//! confusion matrices, and Cohen's kappa.

use crate::volio::{CctaClass, LabelSeq, Taxonomy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    EmptyInput,
    #[error("AUC undefined for class {class}: needs at least one positive and one negative")]
    UndefinedAuc { class: u8 },
    #[error("degenerate marginals: expected agreement is 1")]
    DegenerateMarginals,
    #[error("invalid confusion matrix: {0}")]
    InvalidMatrix(String),
    #[error("score vector at item {item} has {got} entries, expected {expected}")]
    BadScoreWidth {
        item: usize,
        got: usize,
        expected: usize,
    },
}

/// k×k agreement counts; rows index rater/model A, columns rater/reference B.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_names: Vec<String>,
    counts: Vec<u64>, // row-major k×k
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let k = class_names.len();
        Self {
            class_names,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(class_names: Vec<String>, counts: Vec<u64>) -> Result<Self, MetricsError> {
        let k = class_names.len();
        if counts.len() != k * k {
            return Err(MetricsError::InvalidMatrix(format!(
                "{} counts for {k} classes",
                counts.len()
            )));
        }
        Ok(Self {
            class_names,
            counts,
        })
    }

    /// Tally paired label vectors (row = a, column = b).
    pub fn from_pairs(
        class_names: Vec<String>,
        a: &[u8],
        b: &[u8],
    ) -> Result<Self, MetricsError> {
        if a.len() != b.len() {
            return Err(MetricsError::LengthMismatch(a.len(), b.len()));
        }
        if a.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        let mut m = Self::new(class_names);
        let k = m.k();
        for (&ra, &rb) in a.iter().zip(b) {
            let (ra, rb) = (ra as usize, rb as usize);
            if ra >= k || rb >= k {
                return Err(MetricsError::InvalidMatrix(format!(
                    "label ({ra},{rb}) out of range for {k} classes"
                )));
            }
            m.counts[ra * k + rb] += 1;
        }
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn count(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.k() + col]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, row: usize) -> u64 {
        (0..self.k()).map(|c| self.count(row, c)).sum()
    }

    pub fn col_sum(&self, col: usize) -> u64 {
        (0..self.k()).map(|r| self.count(r, col)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.count(i, i)).sum()
    }

    /// CSV rendering: header row of column classes, then one row per class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class");
        for name in &self.class_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (r, name) in self.class_names.iter().enumerate() {
            out.push_str(name);
            for c in 0..self.k() {
                out.push_str(&format!(",{}", self.count(r, c)));
            }
            out.push('\n');
        }
        out
    }
}

/// Fraction of matching positions.
pub fn accuracy(pred: &[u8], truth: &[u8]) -> Result<f64, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// One-vs-rest ROC AUC for class `class`.
///
/// Computed as the exact trapezoidal area over score-grouped thresholds,
/// accumulated in integers: AUC = (2·wins + ties) / (2·P·N) where wins
/// counts positive/negative pairs ranked correctly and ties counts equal
/// scores. This equals the Mann–Whitney statistic bit-exactly.
pub fn roc_auc_ovr(
    scores: &[Vec<f64>],
    truth: &[u8],
    class: u8,
) -> Result<f64, MetricsError> {
    if scores.len() != truth.len() {
        return Err(MetricsError::LengthMismatch(scores.len(), truth.len()));
    }
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let width = scores[0].len();
    let mut items: Vec<(f64, bool)> = Vec::with_capacity(scores.len());
    for (i, (s, &t)) in scores.iter().zip(truth).enumerate() {
        if s.len() != width {
            return Err(MetricsError::BadScoreWidth {
                item: i,
                got: s.len(),
                expected: width,
            });
        }
        let score = *s
            .get(class as usize)
            .ok_or(MetricsError::UndefinedAuc { class })?;
        items.push((score, t == class));
    }
    auc_from_scored(&mut items, class)
}

fn auc_from_scored(items: &mut [(f64, bool)], class: u8) -> Result<f64, MetricsError> {
    let pos_total = items.iter().filter(|(_, p)| *p).count() as u64;
    let neg_total = items.len() as u64 - pos_total;
    if pos_total == 0 || neg_total == 0 {
        return Err(MetricsError::UndefinedAuc { class });
    }
    items.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    let mut wins: u64 = 0; // positive strictly above negative
    let mut ties: u64 = 0; // positive equal to negative
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < items.len() {
        let mut j = i;
        let mut pos_here = 0u64;
        let mut neg_here = 0u64;
        while j < items.len() && items[j].0 == items[i].0 {
            if items[j].1 {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            j += 1;
        }
        wins += pos_here * neg_below;
        ties += pos_here * neg_here;
        neg_below += neg_here;
        i = j;
    }
    Ok((2 * wins + ties) as f64 / (2 * pos_total * neg_total) as f64)
}

/// Per-class one-vs-rest AUCs plus their unweighted mean over computable
/// classes. Classes without both a positive and a negative are `None`.
pub fn mean_auc(
    scores: &[Vec<f64>],
    truth: &[u8],
    n_classes: usize,
) -> Result<(Option<f64>, Vec<Option<f64>>), MetricsError> {
    let mut per_class = Vec::with_capacity(n_classes);
    for c in 0..n_classes {
        match roc_auc_ovr(scores, truth, c as u8) {
            Ok(auc) => per_class.push(Some(auc)),
            Err(MetricsError::UndefinedAuc { .. }) => per_class.push(None),
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    Ok((mean, per_class))
}

/// Cohen's kappa: (p_o − p_e) / (1 − p_e) with p_o the observed agreement
/// and p_e the chance agreement from the marginals.
pub fn cohen_kappa(m: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let total = m.total();
    if total == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let total_f = total as f64;
    let p_o = m.trace() as f64 / total_f;
    let mut p_e = 0.0;
    for i in 0..m.k() {
        p_e += (m.row_sum(i) as f64 / total_f) * (m.col_sum(i) as f64 / total_f);
    }
    if p_e >= 1.0 - 1e-12 {
        return Err(MetricsError::DegenerateMarginals);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// Which coarse classes count as "positive" in the binarized 2×2 view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BinarizationRule {
    pub positive: Vec<CctaClass>,
}

impl Default for BinarizationRule {
    fn default() -> Self {
        Self {
            positive: vec![CctaClass::Calcified, CctaClass::Stent],
        }
    }
}

impl BinarizationRule {
    pub fn is_positive(&self, id: u8) -> bool {
        CctaClass::from_id(id).is_some_and(|c| self.positive.contains(&c))
    }
}

/// Full agreement report: the 3-class confusion with kappa, plus the
/// binarized positive/negative view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub confusion: ConfusionMatrix,
    pub kappa: f64,
    pub binary: ConfusionMatrix,
    pub binary_kappa: f64,
    /// Free-text notes carried into serialized reports (e.g. formula-vs-
    /// published discrepancies).
    pub notes: Vec<String>,
}

impl AgreementReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("# 3-class agreement\n");
        out.push_str(&self.confusion.to_csv());
        out.push_str(&format!("kappa,{}\n", self.kappa));
        out.push_str("# binarized agreement\n");
        out.push_str(&self.binary.to_csv());
        out.push_str(&format!("kappa,{}\n", self.binary_kappa));
        for note in &self.notes {
            out.push_str(&format!("# note: {note}\n"));
        }
        out
    }
}

/// Agreement between two coarse-taxonomy label sequences on the same grid:
/// 3-class confusion + kappa and the binarized 2×2 view under `rule`.
pub fn agreement_report(
    a: &LabelSeq,
    b: &LabelSeq,
    rule: &BinarizationRule,
) -> Result<AgreementReport, MetricsError> {
    if a.taxonomy() != Taxonomy::Ccta3 || b.taxonomy() != Taxonomy::Ccta3 {
        return Err(MetricsError::InvalidMatrix(
            "agreement report expects coarse 3-class sequences".to_string(),
        ));
    }
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    let names: Vec<String> = CctaClass::ALL.iter().map(|c| c.name().to_string()).collect();
    let confusion = ConfusionMatrix::from_pairs(names, a.labels(), b.labels())?;
    let kappa = cohen_kappa(&confusion)?;

    let binarize = |labels: &[u8]| -> Vec<u8> {
        labels
            .iter()
            .map(|&l| if rule.is_positive(l) { 0 } else { 1 })
            .collect()
    };
    let binary = ConfusionMatrix::from_pairs(
        vec!["positive".to_string(), "negative".to_string()],
        &binarize(a.labels()),
        &binarize(b.labels()),
    )?;
    let binary_kappa = match cohen_kappa(&binary) {
        Ok(k) => k,
        // All items on one side of the dichotomy: report perfect-agreement
        // kappa 1.0 when the matrices agree exactly, else 0.
        Err(MetricsError::DegenerateMarginals) => {
            if binary.trace() == binary.total() {
                1.0
            } else {
                0.0
            }
        }
        Err(e) => return Err(e),
    };
    Ok(AgreementReport {
        confusion,
        kappa,
        binary,
        binary_kappa,
        notes: Vec::new(),
    })
}
