//! Filtered-ranking evaluation and relational pattern mining.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::kgstore::{DatasetSplit, KnowledgeGraph, TaskMode, Triple};
use crate::model::{GammaModel, GraphContext};

/// Direction of a ranking query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Tail,
    Head,
}

/// One filtered rank.
#[derive(Debug, Clone)]
pub struct RankingResult {
    pub query: Triple,
    pub direction: Direction,
    pub rank: usize,
    pub num_candidates: usize,
}

/// Aggregated ranking metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits10: f64,
    pub count: usize,
}

impl Metrics {
    pub fn from_ranks<'a>(ranks: impl Iterator<Item = &'a RankingResult>) -> Self {
        let mut sum_rr = 0.0;
        let mut hits = 0usize;
        let mut count = 0usize;
        for r in ranks {
            sum_rr += 1.0 / r.rank as f64;
            if r.rank <= 10 {
                hits += 1;
            }
            count += 1;
        }
        if count == 0 {
            Metrics {
                mrr: 0.0,
                hits10: 0.0,
                count: 0,
            }
        } else {
            Metrics {
                mrr: sum_rr / count as f64,
                hits10: hits as f64 / count as f64,
                count,
            }
        }
    }
}

/// One line of machine-readable metrics output.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub split: String,
    pub mrr: f64,
    pub hits10: f64,
    pub count: usize,
}

/// Expected MRR of a uniformly random scorer over `n` candidates: H_n / n.
pub fn random_baseline_mrr(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum::<f64>() / n as f64
}

/// Filtered rank of `true_entity` in a score vector.
///
/// Entities in `known_true` (other than the true entity itself) are removed
/// from the competition. Ties contribute their mean rank, rounded up:
/// rank = 1 + #strictly-greater + ceil(#equal-others / 2).
pub fn filtered_rank(scores: &[f64], true_entity: usize, known_true: &HashSet<usize>) -> Result<usize> {
    if true_entity >= scores.len() {
        return Err(Error::Index(format!(
            "true entity {true_entity} out of range ({} scores)",
            scores.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("score vector".into()));
    }
    let target = scores[true_entity];
    let mut greater = 0usize;
    let mut ties = 0usize;
    for (e, &s) in scores.iter().enumerate() {
        if e == true_entity || known_true.contains(&e) {
            continue;
        }
        if s > target {
            greater += 1;
        } else if s == target {
            ties += 1;
        }
    }
    Ok(1 + greater + ties.div_ceil(2))
}

/// Known-true tails per (head, relation) pair, in augmented relation space.
/// Head queries use the inverse relation id, so one map serves both
/// directions.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    map: HashMap<(usize, usize), HashSet<usize>>,
    num_original_relations: usize,
}

impl FilterIndex {
    /// Build from all graphs and query lists of a dataset that share the
    /// inference vocabulary.
    pub fn build(split: &DatasetSplit) -> Self {
        let num_rel = split.inference_graph.num_relations();
        let mut idx = FilterIndex {
            map: HashMap::new(),
            num_original_relations: num_rel,
        };
        let mut add_all = |triples: &[Triple]| {
            for t in triples {
                idx.insert(t, num_rel);
            }
        };
        add_all(split.inference_graph.triples());
        add_all(&split.valid_queries);
        add_all(&split.test_queries);
        if split.train_shares_vocab {
            add_all(split.train_graph.triples());
        }
        idx
    }

    fn insert(&mut self, t: &Triple, num_rel: usize) {
        self.map.entry((t.head, t.rel)).or_default().insert(t.tail);
        self.map
            .entry((t.tail, t.rel + num_rel))
            .or_default()
            .insert(t.head);
    }

    pub fn known_tails(&self, head: usize, rel: usize) -> Option<&HashSet<usize>> {
        self.map.get(&(head, rel))
    }

    pub fn num_original_relations(&self) -> usize {
        self.num_original_relations
    }
}

static EMPTY_FILTER: std::sync::OnceLock<HashSet<usize>> = std::sync::OnceLock::new();

/// Rank every query in both (or one) direction with the filtered protocol.
pub fn evaluate_queries(
    model: &GammaModel,
    ctx: &GraphContext,
    queries: &[Triple],
    task_mode: TaskMode,
    filter: &FilterIndex,
) -> Result<(Metrics, Vec<RankingResult>)> {
    let num_rel = ctx.num_original_relations();
    let empty = EMPTY_FILTER.get_or_init(HashSet::new);
    let mut results = Vec::with_capacity(queries.len() * 2);
    for q in queries {
        let scores = model.score_all(ctx, q.head, q.rel)?;
        let known = filter.known_tails(q.head, q.rel).unwrap_or(empty);
        let rank = filtered_rank(&scores, q.tail, known)?;
        results.push(RankingResult {
            query: *q,
            direction: Direction::Tail,
            rank,
            num_candidates: scores.len(),
        });
        if task_mode == TaskMode::HeadAndTail {
            let inv = q.rel + num_rel;
            let scores = model.score_all(ctx, q.tail, inv)?;
            let known = filter.known_tails(q.tail, inv).unwrap_or(empty);
            let rank = filtered_rank(&scores, q.head, known)?;
            results.push(RankingResult {
                query: *q,
                direction: Direction::Head,
                rank,
                num_candidates: scores.len(),
            });
        }
    }
    Ok((Metrics::from_ranks(results.iter()), results))
}

/// Which query list of a dataset to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichQueries {
    Valid,
    Test,
}

impl WhichQueries {
    pub fn as_str(self) -> &'static str {
        match self {
            WhichQueries::Valid => "valid",
            WhichQueries::Test => "test",
        }
    }
}

/// Zero-shot evaluation of one dataset: the relation graph and embeddings
/// are rebuilt for the dataset's inference graph.
pub fn evaluate_split(
    model: &GammaModel,
    split: &DatasetSplit,
    which: WhichQueries,
) -> Result<(Metrics, Vec<RankingResult>)> {
    let ctx = GraphContext::build(&split.inference_graph)?;
    let filter = FilterIndex::build(split);
    let queries = match which {
        WhichQueries::Valid => &split.valid_queries,
        WhichQueries::Test => &split.test_queries,
    };
    evaluate_queries(model, &ctx, queries, split.task_mode, &filter)
}

// ----- relational pattern mining -----

/// Pattern labels a relation can carry. A relation may carry several.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum PatternLabel {
    Symmetric,
    AntiSymmetric,
    Inverse(usize),
    Composite(usize, usize),
}

impl PatternLabel {
    /// Reporting class of the label.
    pub fn class(&self) -> PatternClass {
        match self {
            PatternLabel::Symmetric => PatternClass::Symmetric,
            PatternLabel::AntiSymmetric => PatternClass::AntiSymmetric,
            PatternLabel::Inverse(_) => PatternClass::Inverse,
            PatternLabel::Composite(_, _) => PatternClass::Composite,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum PatternClass {
    Symmetric,
    AntiSymmetric,
    Inverse,
    Composite,
}

impl PatternClass {
    pub const ALL: [PatternClass; 4] = [
        PatternClass::Symmetric,
        PatternClass::AntiSymmetric,
        PatternClass::Inverse,
        PatternClass::Composite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatternClass::Symmetric => "symmetric",
            PatternClass::AntiSymmetric => "anti_symmetric",
            PatternClass::Inverse => "inverse",
            PatternClass::Composite => "composite",
        }
    }
}

/// Per-relation pattern labels mined from a graph.
#[derive(Debug, Clone)]
pub struct PatternReport {
    pub labels: Vec<Vec<PatternLabel>>,
    pub min_support: usize,
    pub min_confidence: f64,
}

impl PatternReport {
    pub fn relations_with(&self, class: PatternClass) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&r| self.labels[r].iter().any(|l| l.class() == class))
            .collect()
    }
}

/// Mine symmetric / anti-symmetric / inverse / composite relation labels.
///
/// A label is assigned when the defining implication holds on at least
/// `min_confidence` of its observed premises and the premise count reaches
/// `min_support`. Works on the unaugmented graph.
pub fn detect_patterns(kg: &KnowledgeGraph, min_support: usize, min_confidence: f64) -> Result<PatternReport> {
    if kg.is_augmented() {
        return Err(Error::State("pattern mining runs on the unaugmented graph".into()));
    }
    if kg.num_triples() == 0 {
        return Err(Error::Rejected("pattern mining on an empty graph".into()));
    }
    if min_support < 1 {
        return Err(Error::Config("min_support must be at least 1".into()));
    }
    if !(min_confidence > 0.0 && min_confidence <= 1.0) {
        return Err(Error::Config("min_confidence must lie in (0, 1]".into()));
    }
    let num_rel = kg.num_relations();
    let triple_set: HashSet<Triple> = kg.triples().iter().copied().collect();

    // Relations connecting each ordered entity pair.
    let mut pair_rels: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for t in kg.triples() {
        pair_rels.entry((t.head, t.tail)).or_default().push(t.rel);
    }

    let mut n_premises = vec![0usize; num_rel];
    let mut reverse_hits = vec![0usize; num_rel];
    let mut inverse_hits: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in kg.triples() {
        n_premises[t.rel] += 1;
        if triple_set.contains(&Triple::new(t.tail, t.rel, t.head)) {
            reverse_hits[t.rel] += 1;
        }
        if let Some(rels) = pair_rels.get(&(t.tail, t.head)) {
            for &r_inv in rels {
                if r_inv != t.rel {
                    *inverse_hits.entry((t.rel, r_inv)).or_default() += 1;
                }
            }
        }
    }

    // Length-two paths: premises per ordered relation pair and hits per
    // completing relation.
    let mut comp_premises: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut comp_hits: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    for first in kg.triples() {
        for &tid in kg.triples_by_head(first.tail) {
            let second = kg.triples()[tid];
            *comp_premises.entry((first.rel, second.rel)).or_default() += 1;
            if let Some(rels) = pair_rels.get(&(first.head, second.tail)) {
                for &r in rels {
                    *comp_hits.entry((first.rel, second.rel, r)).or_default() += 1;
                }
            }
        }
    }

    let mut labels: Vec<Vec<PatternLabel>> = vec![Vec::new(); num_rel];
    for r in 0..num_rel {
        if n_premises[r] < min_support {
            continue;
        }
        let frac = reverse_hits[r] as f64 / n_premises[r] as f64;
        if frac >= min_confidence {
            labels[r].push(PatternLabel::Symmetric);
        }
        if frac <= 1.0 - min_confidence {
            labels[r].push(PatternLabel::AntiSymmetric);
        }
    }
    for (&(r, r_inv), &hits) in &inverse_hits {
        if n_premises[r] >= min_support && hits as f64 / n_premises[r] as f64 >= min_confidence {
            labels[r].push(PatternLabel::Inverse(r_inv));
        }
    }
    for (&(r1, r2, r), &hits) in &comp_hits {
        let premises = comp_premises[&(r1, r2)];
        if premises >= min_support && hits as f64 / premises as f64 >= min_confidence {
            labels[r].push(PatternLabel::Composite(r1, r2));
        }
    }
    for l in labels.iter_mut() {
        l.sort();
        l.dedup();
    }
    Ok(PatternReport {
        labels,
        min_support,
        min_confidence,
    })
}

/// Per-pattern-class metrics over eligible test subsets.
///
/// A class is reported only when at least `min_subset` test triples carry
/// one of its labels. A triple whose relation carries several labels joins
/// every matching subset.
pub fn pattern_subset_report(
    model: &GammaModel,
    split: &DatasetSplit,
    report: &PatternReport,
    min_subset: usize,
) -> Result<Vec<(PatternClass, Metrics, usize)>> {
    let ctx = GraphContext::build(&split.inference_graph)?;
    let filter = FilterIndex::build(split);
    let mut out = Vec::new();
    for class in PatternClass::ALL {
        let rels: HashSet<usize> = report.relations_with(class).into_iter().collect();
        let subset: Vec<Triple> = split
            .test_queries
            .iter()
            .filter(|q| rels.contains(&q.rel))
            .copied()
            .collect();
        if subset.len() < min_subset {
            continue;
        }
        let (metrics, _) = evaluate_queries(model, &ctx, &subset, split.task_mode, &filter)?;
        out.push((class, metrics, subset.len()));
    }
    Ok(out)
}
