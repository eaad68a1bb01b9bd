//! Top-K ranking metrics, profiling classification metrics, and the
//! comparison report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::GroupRatingsTable;

/// Denominator of precision@K.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionDenominator {
    /// Always `K`, even when fewer than `K` items were ranked.
    #[default]
    K,
    /// `min(K, |ranked|)`.
    Available,
}

/// Which items are ranked for a group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSet {
    /// The group's own held-out items.
    #[default]
    TestItems,
    /// Every catalog item the group has no training rating for.
    Catalog,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevanceSpec {
    /// Items rated at or above this value are relevant.
    pub threshold: f64,
    pub k: usize,
    pub denominator: PrecisionDenominator,
    pub candidates: CandidateSet,
}

impl Default for RelevanceSpec {
    fn default() -> Self {
        Self {
            threshold: 3.5,
            k: 10,
            denominator: PrecisionDenominator::K,
            candidates: CandidateSet::TestItems,
        }
    }
}

impl RelevanceSpec {
    pub fn validate(&self, scale: (f64, f64)) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("top-K cutoff must be ≥ 1".into()));
        }
        if !(self.threshold >= scale.0 && self.threshold <= scale.1) {
            return Err(Error::Config(format!(
                "relevance threshold {} lies outside the rating scale [{}, {}]",
                self.threshold, scale.0, scale.1
            )));
        }
        Ok(())
    }
}

/// Orders `(item, score)` pairs by descending score, ties by ascending
/// item index, and keeps the first `k` items.
pub fn rank_by_score(scored: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sorted.into_iter().take(k).map(|(i, _)| i).collect()
}

fn hits(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> usize {
    ranked.iter().take(k).filter(|i| relevant.contains(i)).count()
}

/// `|relevant ∩ top-K| / K`.
pub fn precision_at_k(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> f64 {
    precision_at_k_with(ranked, relevant, k, PrecisionDenominator::K)
}

pub fn precision_at_k_with(
    ranked: &[usize],
    relevant: &BTreeSet<usize>,
    k: usize,
    denominator: PrecisionDenominator,
) -> f64 {
    assert!(k >= 1, "precision_at_k needs k ≥ 1");
    let denom = match denominator {
        PrecisionDenominator::K => k,
        PrecisionDenominator::Available => k.min(ranked.len()),
    };
    if denom == 0 {
        return 0.0;
    }
    hits(ranked, relevant, k) as f64 / denom as f64
}

/// `|relevant ∩ top-K| / |relevant|`, or `None` when nothing is relevant.
pub fn recall_at_k(ranked: &[usize], relevant: &BTreeSet<usize>, k: usize) -> Option<f64> {
    assert!(k >= 1, "recall_at_k needs k ≥ 1");
    if relevant.is_empty() {
        return None;
    }
    Some(hits(ranked, relevant, k) as f64 / relevant.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfilingMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Support-weighted precision, recall and F1. A class that is never
/// predicted has precision 0; F1 is 0 when precision and recall are 0.
pub fn profiling_metrics(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ProfilingMetrics> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("profiling_metrics", truth.len(), predicted.len()));
    }
    if truth.is_empty() {
        return Err(Error::Domain("profiling_metrics: no samples".into()));
    }
    let mut tp = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    let mut predicted_count = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        for label in [t, p] {
            if label >= classes {
                return Err(Error::Index {
                    what: "classes",
                    index: label,
                    len: classes,
                });
            }
        }
        support[t] += 1;
        predicted_count[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let n = truth.len() as f64;
    let (mut precision, mut recall, mut f1) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        if support[c] == 0 {
            continue;
        }
        let w = support[c] as f64 / n;
        let p = if predicted_count[c] == 0 {
            0.0
        } else {
            tp[c] as f64 / predicted_count[c] as f64
        };
        let r = tp[c] as f64 / support[c] as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        precision += w * p;
        recall += w * r;
        f1 += w * f;
    }
    Ok(ProfilingMetrics {
        precision,
        recall,
        f1,
        support: truth.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub precision: f64,
    pub recall: f64,
    /// Groups (or users) with at least one relevant item.
    pub evaluated: usize,
}

/// Held-out items and relevance sets of each ranked entity.
#[derive(Clone, Debug, PartialEq)]
pub struct RankingTask {
    /// `(entity, candidates, relevant)` for every entity with ≥1 relevant item.
    pub entries: Vec<(usize, Vec<usize>, BTreeSet<usize>)>,
}

impl RankingTask {
    /// Group-level task from held-out group ratings. With
    /// [`CandidateSet::Catalog`], `catalog` lists, per group, the items to
    /// rank (typically those without a training rating).
    pub fn from_groups(test: &GroupRatingsTable, spec: &RelevanceSpec, catalog: Option<&[Vec<usize>]>) -> Result<Self> {
        let mut per_group: BTreeMap<usize, (Vec<usize>, BTreeSet<usize>)> = BTreeMap::new();
        for t in test.tuples() {
            let entry = per_group.entry(t.group).or_default();
            entry.0.push(t.item);
            if t.rating >= spec.threshold {
                entry.1.insert(t.item);
            }
        }
        Self::assemble(per_group, spec, catalog)
    }

    /// Per-entity task from `(entity, item, rating)` triples.
    pub fn from_triples(
        triples: impl IntoIterator<Item = (usize, usize, f64)>,
        spec: &RelevanceSpec,
        catalog: Option<&[Vec<usize>]>,
    ) -> Result<Self> {
        let mut per: BTreeMap<usize, (Vec<usize>, BTreeSet<usize>)> = BTreeMap::new();
        for (e, i, r) in triples {
            let entry = per.entry(e).or_default();
            entry.0.push(i);
            if r >= spec.threshold {
                entry.1.insert(i);
            }
        }
        Self::assemble(per, spec, catalog)
    }

    fn assemble(
        per: BTreeMap<usize, (Vec<usize>, BTreeSet<usize>)>,
        spec: &RelevanceSpec,
        catalog: Option<&[Vec<usize>]>,
    ) -> Result<Self> {
        if per.is_empty() {
            return Err(Error::Domain("ranking task: no held-out ratings".into()));
        }
        let mut entries = Vec::new();
        for (e, (mut items, relevant)) in per {
            if relevant.is_empty() {
                continue;
            }
            if spec.candidates == CandidateSet::Catalog {
                let cat = catalog.ok_or_else(|| Error::Config("catalog ranking needs a candidate list".into()))?;
                items = cat
                    .get(e)
                    .cloned()
                    .ok_or(Error::Index {
                        what: "catalog candidate lists",
                        index: e,
                        len: cat.len(),
                    })?;
            }
            items.sort_unstable();
            items.dedup();
            entries.push((e, items, relevant));
        }
        if entries.is_empty() {
            return Err(Error::Protocol(format!(
                "no entity has a held-out item rated ≥ {}",
                spec.threshold
            )));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Ranks every entity's candidates by `score(entity, item)` and
/// macro-averages P@K and R@K.
pub fn evaluate_method(
    task: &RankingTask,
    spec: &RelevanceSpec,
    mut score: impl FnMut(usize, usize) -> Result<f64>,
) -> Result<RankingMetrics> {
    if spec.k == 0 {
        return Err(Error::Config("top-K cutoff must be ≥ 1".into()));
    }
    let (mut p_sum, mut r_sum) = (0.0, 0.0);
    for (e, candidates, relevant) in &task.entries {
        let scored = candidates
            .iter()
            .map(|&i| Ok((i, score(*e, i)?)))
            .collect::<Result<Vec<_>>>()?;
        let ranked = rank_by_score(&scored, spec.k);
        p_sum += precision_at_k_with(&ranked, relevant, spec.k, spec.denominator);
        r_sum += recall_at_k(&ranked, relevant, spec.k).expect("non-empty relevant set");
    }
    let n = task.entries.len() as f64;
    Ok(RankingMetrics {
        precision: p_sum / n,
        recall: r_sum / n,
        evaluated: task.entries.len(),
    })
}

/// One row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub label: String,
    pub group: RankingMetrics,
    /// Same method scored per user, when computed.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub user: Option<RankingMetrics>,
}

/// Everything a run reports. `run` holds the resolved configuration and
/// dataset fingerprint; it is serialized verbatim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub relevance: RelevanceSpec,
    pub methods: Vec<MethodResult>,
    pub profiling: ProfilingMetrics,
    pub profiling_protocol: String,
    pub run: serde_json::Value,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Methods as rows, P@K and R@K as columns.
    pub fn to_markdown(&self) -> String {
        let k = self.relevance.k;
        let with_user = self.methods.iter().any(|m| m.user.is_some());
        let mut s = String::new();
        let _ = writeln!(s, "# Group recommendation results: {}\n", self.dataset);
        let _ = writeln!(
            s,
            "Relevance threshold {}, candidates: {}, precision denominator: {}.\n",
            self.relevance.threshold,
            match self.relevance.candidates {
                CandidateSet::TestItems => "held-out items of each group",
                CandidateSet::Catalog => "catalog items without a training rating",
            },
            match self.relevance.denominator {
                PrecisionDenominator::K => "K",
                PrecisionDenominator::Available => "min(K, ranked)",
            }
        );
        if with_user {
            let _ = writeln!(s, "| Approach | P@{k} (group) | R@{k} (group) | P@{k} (user) | R@{k} (user) |");
            let _ = writeln!(s, "|---|---:|---:|---:|---:|");
        } else {
            let _ = writeln!(s, "| Approach | P@{k} | R@{k} |");
            let _ = writeln!(s, "|---|---:|---:|");
        }
        for m in &self.methods {
            let _ = write!(s, "| {} | {:.6} | {:.6} |", m.label, m.group.precision, m.group.recall);
            if with_user {
                match &m.user {
                    Some(u) => {
                        let _ = write!(s, " {:.6} | {:.6} |", u.precision, u.recall);
                    }
                    None => s.push_str(" – | – |"),
                }
            }
            s.push('\n');
        }
        let _ = writeln!(s, "\n## Group profiling ({})\n", self.profiling_protocol);
        let _ = writeln!(s, "| Precision | Recall | F1 | Support |");
        let _ = writeln!(s, "|---:|---:|---:|---:|");
        let p = &self.profiling;
        let _ = writeln!(s, "| {:.4} | {:.4} | {:.4} | {} |", p.precision, p.recall, p.f1, p.support);
        s
    }
}
