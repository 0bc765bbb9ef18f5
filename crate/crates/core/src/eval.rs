//! Grouping and template accuracy against ground truth (GA, PA, FGA, FTA).
//!
//! Template text is compared after collapsing runs of `<*>` tokens on both
//! sides, so `a <*> <*> b` and `a <*> b` count as the same template.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LedgerSnapshot, PLACEHOLDER};

/// Line id -> template.
pub type TemplateMap = BTreeMap<u64, String>;

/// Collapses whitespace and runs of placeholder tokens.
pub fn normalize_template(t: &str) -> String {
    let mut out: Vec<&str> = Vec::new();
    for tok in t.split_whitespace() {
        if tok == PLACEHOLDER && out.last() == Some(&PLACEHOLDER) {
            continue;
        }
        out.push(tok);
    }
    out.join(" ")
}

/// Predicted and ground-truth templates aligned by line id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EvalSet {
    pub predicted: Vec<String>,
    pub truth: Vec<String>,
}

impl EvalSet {
    /// Pairs the two maps; they must cover exactly the same line ids.
    pub fn align(predicted: &TemplateMap, truth: &TemplateMap) -> Result<Self> {
        if predicted.len() != truth.len() || predicted.keys().ne(truth.keys()) {
            let missing = truth.keys().find(|k| !predicted.contains_key(k));
            let extra = predicted.keys().find(|k| !truth.contains_key(k));
            return Err(Error::Eval(format!(
                "line id sets differ ({} predicted, {} ground truth; first missing {:?}, first extra {:?})",
                predicted.len(),
                truth.len(),
                missing,
                extra
            )));
        }
        Ok(EvalSet {
            predicted: predicted.values().cloned().collect(),
            truth: truth.values().cloned().collect(),
        })
    }

    pub fn from_pairs<P: AsRef<str>, T: AsRef<str>>(pairs: &[(P, T)]) -> Self {
        EvalSet {
            predicted: pairs.iter().map(|(p, _)| p.as_ref().to_owned()).collect(),
            truth: pairs.iter().map(|(_, t)| t.as_ref().to_owned()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }
}

/// Per predicted cluster: its size, and the single ground-truth template
/// its members share (None if they disagree).
struct ClusterCheck<'a> {
    predicted: &'a str,
    size: usize,
    truth: Option<&'a str>,
}

fn clusters(set: &EvalSet) -> (Vec<ClusterCheck<'_>>, HashMap<&str, usize>) {
    let mut truth_sizes: HashMap<&str, usize> = HashMap::new();
    for t in &set.truth {
        *truth_sizes.entry(t.as_str()).or_default() += 1;
    }
    let mut by_pred: BTreeMap<&str, ClusterCheck<'_>> = BTreeMap::new();
    for (p, t) in set.predicted.iter().zip(&set.truth) {
        let c = by_pred.entry(p.as_str()).or_insert(ClusterCheck {
            predicted: p,
            size: 0,
            truth: Some(t),
        });
        c.size += 1;
        if c.truth != Some(t.as_str()) {
            c.truth = None;
        }
    }
    (by_pred.into_values().collect(), truth_sizes)
}

fn grouping_correct(c: &ClusterCheck<'_>, truth_sizes: &HashMap<&str, usize>) -> bool {
    c.truth.is_some_and(|t| truth_sizes[t] == c.size)
}

fn f1(correct: usize, predicted: usize, truth: usize) -> f64 {
    if predicted == 0 || truth == 0 {
        return 0.0;
    }
    let p = correct as f64 / predicted as f64;
    let r = correct as f64 / truth as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Share of records whose predicted cluster equals their true cluster.
pub fn grouping_accuracy(set: &EvalSet) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let (cs, sizes) = clusters(set);
    let correct: usize = cs
        .iter()
        .filter(|c| grouping_correct(c, &sizes))
        .map(|c| c.size)
        .sum();
    correct as f64 / set.len() as f64
}

/// Share of records whose normalized template equals the truth.
pub fn parsing_accuracy(set: &EvalSet) -> f64 {
    if set.is_empty() {
        return 0.0;
    }
    let correct = set
        .predicted
        .iter()
        .zip(&set.truth)
        .filter(|(p, t)| normalize_template(p) == normalize_template(t))
        .count();
    correct as f64 / set.len() as f64
}

/// F1 over templates, where a predicted template is correct when its
/// record set equals some true cluster's record set.
pub fn f1_grouping_accuracy(set: &EvalSet) -> f64 {
    let (cs, sizes) = clusters(set);
    let correct = cs.iter().filter(|c| grouping_correct(c, &sizes)).count();
    f1(correct, cs.len(), sizes.len())
}

/// As [`f1_grouping_accuracy`], but the template text must also match.
pub fn f1_template_accuracy(set: &EvalSet) -> f64 {
    let (cs, sizes) = clusters(set);
    let correct = cs
        .iter()
        .filter(|c| {
            grouping_correct(c, &sizes)
                && c.truth
                    .is_some_and(|t| normalize_template(c.predicted) == normalize_template(t))
        })
        .count();
    f1(correct, cs.len(), sizes.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ga: f64,
    pub pa: f64,
    pub fga: f64,
    pub fta: f64,
}

pub fn evaluate(set: &EvalSet) -> Result<Metrics> {
    if set.is_empty() {
        return Err(Error::Eval("nothing to evaluate".into()));
    }
    Ok(Metrics {
        ga: grouping_accuracy(set),
        pa: parsing_accuracy(set),
        fga: f1_grouping_accuracy(set),
        fta: f1_template_accuracy(set),
    })
}

/// Reads `LineId` and `EventTemplate` columns from a CSV file.
pub fn load_templates(path: &Path) -> Result<TemplateMap> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_owned(),
                column: name.into(),
            })
    };
    let (id_col, tpl_col) = (col("LineId")?, col("EventTemplate")?);
    let mut out = TemplateMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::csv(path, e))?;
        let id_text = row.get(id_col).unwrap_or_default().trim();
        let id: u64 = id_text
            .parse()
            .map_err(|_| Error::Eval(format!("{}: bad LineId {id_text:?}", path.display())))?;
        let tpl = row.get(tpl_col).unwrap_or_default().to_owned();
        if out.insert(id, tpl).is_some() {
            return Err(Error::Eval(format!(
                "{}: LineId {id} appears twice",
                path.display()
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub metrics: Metrics,
    pub records: usize,
    pub predicted_templates: usize,
    pub ground_truth_templates: usize,
    /// Cost counters of the run that produced the predictions, when known.
    pub ledger: Option<LedgerSnapshot>,
    pub routing: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn new(set: &EvalSet, metrics: Metrics) -> Self {
        let distinct = |v: &[String]| v.iter().collect::<std::collections::HashSet<_>>().len();
        EvalReport {
            metrics,
            records: set.len(),
            predicted_templates: distinct(&set.predicted),
            ground_truth_templates: distinct(&set.truth),
            ledger: None,
            routing: None,
        }
    }

    /// Picks up `ledger` and `routing` from a run summary file, if readable.
    pub fn attach_run_summary(&mut self, run_json: &Path) {
        let Ok(text) = std::fs::read_to_string(run_json) else {
            return;
        };
        let Ok(v) = serde_json::from_str::<serde_json::Value>(&text) else {
            return;
        };
        self.ledger = v
            .get("ledger")
            .and_then(|l| serde_json::from_value(l.clone()).ok());
        self.routing = v.get("routing").cloned();
    }

    pub fn table(&self) -> String {
        let mut rows: Vec<(&str, String)> = vec![
            ("GA", format!("{:.4}", self.metrics.ga)),
            ("PA", format!("{:.4}", self.metrics.pa)),
            ("FGA", format!("{:.4}", self.metrics.fga)),
            ("FTA", format!("{:.4}", self.metrics.fta)),
            ("records", self.records.to_string()),
            ("predicted templates", self.predicted_templates.to_string()),
            (
                "ground-truth templates",
                self.ground_truth_templates.to_string(),
            ),
        ];
        if let Some(l) = &self.ledger {
            rows.push(("wall time (s)", format!("{:.3}", l.wall_time_seconds)));
            rows.push(("tokens", l.tokens_consumed.to_string()));
            rows.push(("LLM invocations", l.llm_invocations.to_string()));
            rows.push(("dense records", l.dense_record_count.to_string()));
            rows.push(("sparse records", l.sparse_record_count.to_string()));
        }
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        rows.iter()
            .map(|(k, v)| format!("{k:<width$}  {v:>10}\n"))
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        writeln!(w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}
