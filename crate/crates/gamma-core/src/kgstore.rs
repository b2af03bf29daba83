//! Triple storage, vocabulary handling, inverse augmentation, and the typed
//! relation graph built from entity-sharing co-occurrence.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One fact: dense integer ids for head entity, relation, tail entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

impl Triple {
    pub fn new(head: usize, rel: usize, tail: usize) -> Self {
        Self { head, rel, tail }
    }
}

/// First-seen-order string interner for entity or relation names.
#[derive(Debug, Clone, Default)]
pub struct Vocab {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.ids.get(name).copied()
    }

    /// Intern `name`, assigning the next id on first sight.
    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }
}

/// Integer-indexed triple store with head/tail adjacency indexes.
///
/// Construction deduplicates triples. `augment_inverses` produces the
/// bidirectional view used by the propagation modules; data files and the
/// pattern miner always work on the unaugmented store.
#[derive(Debug, Clone)]
pub struct KnowledgeGraph {
    num_entities: usize,
    num_relations: usize,
    triples: Vec<Triple>,
    by_head: Vec<Vec<usize>>,
    by_tail: Vec<Vec<usize>>,
    augmented: bool,
}

impl KnowledgeGraph {
    /// Build a graph from a triple list. Duplicates are dropped; the second
    /// return value is the number of duplicates removed.
    pub fn from_triples(
        num_entities: usize,
        num_relations: usize,
        triples: Vec<Triple>,
    ) -> Result<(Self, usize)> {
        let mut seen = HashSet::with_capacity(triples.len());
        let mut kept = Vec::with_capacity(triples.len());
        let mut dups = 0usize;
        for t in triples {
            if t.head >= num_entities || t.tail >= num_entities {
                return Err(Error::Index(format!(
                    "entity id out of range in ({}, {}, {})",
                    t.head, t.rel, t.tail
                )));
            }
            if t.rel >= num_relations {
                return Err(Error::Index(format!(
                    "relation id {} out of range (|R| = {num_relations})",
                    t.rel
                )));
            }
            if seen.insert(t) {
                kept.push(t);
            } else {
                dups += 1;
            }
        }
        let mut kg = Self {
            num_entities,
            num_relations,
            triples: kept,
            by_head: Vec::new(),
            by_tail: Vec::new(),
            augmented: false,
        };
        kg.rebuild_indexes();
        Ok((kg, dups))
    }

    fn rebuild_indexes(&mut self) {
        self.by_head = vec![Vec::new(); self.num_entities];
        self.by_tail = vec![Vec::new(); self.num_entities];
        for (i, t) in self.triples.iter().enumerate() {
            self.by_head[t.head].push(i);
            self.by_tail[t.tail].push(i);
        }
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    /// Relation count; doubled after `augment_inverses`.
    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// Ids of triples whose head is `entity`.
    pub fn triples_by_head(&self, entity: usize) -> &[usize] {
        &self.by_head[entity]
    }

    /// Ids of triples whose tail is `entity`.
    pub fn triples_by_tail(&self, entity: usize) -> &[usize] {
        &self.by_tail[entity]
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.by_head
            .get(t.head)
            .map(|ids| ids.iter().any(|&i| self.triples[i] == *t))
            .unwrap_or(false)
    }

    /// Add the inverse triple `(t, r + |R|, h)` for every `(h, r, t)` and
    /// double the relation count. Propagation runs over this view so signals
    /// can travel against edge direction.
    pub fn augment_inverses(&self) -> Result<KnowledgeGraph> {
        if self.augmented {
            return Err(Error::State("graph is already inverse-augmented".into()));
        }
        let base = self.num_relations;
        let mut triples = Vec::with_capacity(self.triples.len() * 2);
        triples.extend_from_slice(&self.triples);
        for t in &self.triples {
            triples.push(Triple::new(t.tail, t.rel + base, t.head));
        }
        let (mut kg, dups) = KnowledgeGraph::from_triples(self.num_entities, base * 2, triples)?;
        debug_assert_eq!(dups, 0, "inverse triples cannot collide with originals");
        kg.augmented = true;
        Ok(kg)
    }
}

/// Co-occurrence edge types of the relation graph.
///
/// `H2H`: the two relations share a head entity. `H2T`: the tail of the
/// source relation is the head of the destination. `T2H`: the reverse
/// ordering. `T2T`: shared tail entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RelEdgeType {
    H2H,
    H2T,
    T2H,
    T2T,
}

impl RelEdgeType {
    pub const ALL: [RelEdgeType; 4] = [
        RelEdgeType::H2H,
        RelEdgeType::H2T,
        RelEdgeType::T2H,
        RelEdgeType::T2T,
    ];

    /// Index into the edge-type embedding table.
    pub fn index(self) -> usize {
        match self {
            RelEdgeType::H2H => 0,
            RelEdgeType::H2T => 1,
            RelEdgeType::T2H => 2,
            RelEdgeType::T2T => 3,
        }
    }
}

impl fmt::Display for RelEdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RelEdgeType::H2H => "H2H",
            RelEdgeType::H2T => "H2T",
            RelEdgeType::T2H => "T2H",
            RelEdgeType::T2T => "T2T",
        };
        f.write_str(s)
    }
}

/// Graph over (augmented) relations with four typed, deduplicated edge sets.
/// Edges are stored in canonical sorted order so downstream message passing
/// is independent of the input triple ordering.
#[derive(Debug, Clone)]
pub struct RelationGraph {
    num_rel_nodes: usize,
    edges: Vec<(usize, RelEdgeType, usize)>,
}

impl RelationGraph {
    pub fn num_rel_nodes(&self) -> usize {
        self.num_rel_nodes
    }

    pub fn edges(&self) -> &[(usize, RelEdgeType, usize)] {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Edge count per type, indexed by `RelEdgeType::index`.
    pub fn typed_counts(&self) -> [usize; 4] {
        let mut counts = [0usize; 4];
        for (_, ty, _) in &self.edges {
            counts[ty.index()] += 1;
        }
        counts
    }
}

/// Construct the typed relation graph of an inverse-augmented knowledge
/// graph. Diagonal edges (a relation co-occurring with itself through a
/// single triple) are kept.
pub fn build_relation_graph(kg: &KnowledgeGraph) -> Result<RelationGraph> {
    if !kg.is_augmented() {
        return Err(Error::State(
            "relation graph is built over the inverse-augmented relation set".into(),
        ));
    }
    let mut edges: BTreeSet<(usize, RelEdgeType, usize)> = BTreeSet::new();
    // Relations seen with entity e as head / as tail.
    for e in 0..kg.num_entities() {
        let heads: BTreeSet<usize> = kg
            .triples_by_head(e)
            .iter()
            .map(|&i| kg.triples()[i].rel)
            .collect();
        let tails: BTreeSet<usize> = kg
            .triples_by_tail(e)
            .iter()
            .map(|&i| kg.triples()[i].rel)
            .collect();
        for &ri in &heads {
            for &rj in &heads {
                edges.insert((ri, RelEdgeType::H2H, rj));
            }
        }
        for &ri in &tails {
            for &rj in &tails {
                edges.insert((ri, RelEdgeType::T2T, rj));
            }
        }
        // (h, r_i, e) and (e, r_j, t): tail of r_i meets head of r_j.
        for &ri in &tails {
            for &rj in &heads {
                edges.insert((ri, RelEdgeType::H2T, rj));
                edges.insert((rj, RelEdgeType::T2H, ri));
            }
        }
    }
    Ok(RelationGraph {
        num_rel_nodes: kg.num_relations(),
        edges: edges.into_iter().collect(),
    })
}

/// Whether evaluation queries both directions or only tails.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    HeadAndTail,
    TailOnly,
}

impl TaskMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "head_and_tail" | "h/t" | "ht" => Ok(TaskMode::HeadAndTail),
            "tail_only" | "t" | "tail" => Ok(TaskMode::TailOnly),
            other => Err(Error::Config(format!("unknown task mode `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::HeadAndTail => "head_and_tail",
            TaskMode::TailOnly => "tail_only",
        }
    }
}

/// One dataset: the graph a model trains on, the graph it scores against at
/// evaluation time, and held-out query triples. For transductive data the
/// two graphs coincide; for fully inductive data they have disjoint
/// vocabularies.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub name: String,
    pub train_graph: KnowledgeGraph,
    pub inference_graph: KnowledgeGraph,
    pub valid_queries: Vec<Triple>,
    pub test_queries: Vec<Triple>,
    pub task_mode: TaskMode,
    pub entity_vocab: Vocab,
    pub relation_vocab: Vocab,
    /// True when `train_graph` ids live in the inference vocabulary, so its
    /// triples may join the evaluation filter. False for fully inductive
    /// datasets with disjoint vocabularies.
    pub train_shares_vocab: bool,
}

/// Parse one TSV triple file. When vocabularies are supplied they are
/// frozen: unseen tokens are a vocabulary error. Returns the graph, the
/// vocabularies, and the duplicate count.
pub fn load_triples(
    path: &Path,
    entity_vocab: Option<Vocab>,
    relation_vocab: Option<Vocab>,
) -> Result<(KnowledgeGraph, Vocab, Vocab, usize)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let frozen = entity_vocab.is_some();
    let mut evocab = entity_vocab.unwrap_or_default();
    let mut rvocab = relation_vocab.unwrap_or_default();
    let mut triples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let lookup = |vocab: &mut Vocab, token: &str, what: &str| -> Result<usize> {
            if frozen {
                vocab.get(token).ok_or_else(|| {
                    Error::Vocab(format!(
                        "unknown {what} `{token}` at line {} of {}",
                        lineno + 1,
                        path.display()
                    ))
                })
            } else {
                Ok(vocab.intern(token))
            }
        };
        let h = lookup(&mut evocab, fields[0], "entity")?;
        let r = lookup(&mut rvocab, fields[1], "relation")?;
        let t = lookup(&mut evocab, fields[2], "entity")?;
        triples.push(Triple::new(h, r, t));
    }
    let (kg, dups) = KnowledgeGraph::from_triples(evocab.len(), rvocab.len(), triples)?;
    Ok((kg, evocab, rvocab, dups))
}

/// Parse a triple file into an existing vocabulary without building a graph.
/// Used for the valid/test query lists.
fn load_query_list(path: &Path, evocab: &Vocab, rvocab: &Vocab) -> Result<Vec<Triple>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        let get = |vocab: &Vocab, token: &str, what: &str| -> Result<usize> {
            vocab.get(token).ok_or_else(|| {
                Error::Vocab(format!(
                    "unknown {what} `{token}` at line {} of {}",
                    lineno + 1,
                    path.display()
                ))
            })
        };
        out.push(Triple::new(
            get(evocab, fields[0], "entity")?,
            get(rvocab, fields[1], "relation")?,
            get(evocab, fields[2], "entity")?,
        ));
    }
    Ok(out)
}

/// Fixed on-disk dataset layout: `train.txt`, optional `inference.txt`
/// (defaults to the training file), `valid.txt`, `test.txt`, and an optional
/// `meta` file carrying `task_mode=...`.
pub fn load_dataset_dir(dir: &Path) -> Result<DatasetSplit> {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let train_path = dir.join("train.txt");
    let inference_path = dir.join("inference.txt");

    let (inference_graph, evocab, rvocab, _) = if inference_path.exists() {
        load_triples(&inference_path, None, None)?
    } else {
        load_triples(&train_path, None, None)?
    };
    // Transductive datasets share the inference vocabulary; fully inductive
    // ones fail the frozen-vocab parse and get their own id space.
    let (train_graph, train_shares_vocab) = if !inference_path.exists() {
        (inference_graph.clone(), true)
    } else {
        match load_triples(&train_path, Some(evocab.clone()), Some(rvocab.clone())) {
            Ok((g, _, _, _)) => (g, true),
            Err(Error::Vocab(_)) => {
                let (g, _, _, _) = load_triples(&train_path, None, None)?;
                (g, false)
            }
            Err(e) => return Err(e),
        }
    };

    let valid_queries = load_query_list(&dir.join("valid.txt"), &evocab, &rvocab)?;
    let test_queries = load_query_list(&dir.join("test.txt"), &evocab, &rvocab)?;

    let meta_path = dir.join("meta");
    let mut task_mode = TaskMode::HeadAndTail;
    if meta_path.exists() {
        for line in fs::read_to_string(&meta_path)?.lines() {
            let line = line.trim();
            if let Some(value) = line.strip_prefix("task_mode=") {
                task_mode = TaskMode::parse(value)?;
            }
        }
    }

    Ok(DatasetSplit {
        name,
        train_graph,
        inference_graph,
        valid_queries,
        test_queries,
        task_mode,
        entity_vocab: evocab,
        relation_vocab: rvocab,
        train_shares_vocab,
    })
}

/// Write a graph's triples as a TSV file using the supplied vocabularies.
pub fn write_triples(path: &Path, triples: &[Triple], evocab: &Vocab, rvocab: &Vocab) -> Result<()> {
    let mut out = String::new();
    for t in triples {
        out.push_str(evocab.name(t.head));
        out.push('\t');
        out.push_str(rvocab.name(t.rel));
        out.push('\t');
        out.push_str(evocab.name(t.tail));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write a dataset directory in the layout `load_dataset_dir` reads.
pub fn write_dataset_dir(dir: &PathBuf, split: &DatasetSplit) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_triples(
        &dir.join("train.txt"),
        split.train_graph.triples(),
        &split.entity_vocab,
        &split.relation_vocab,
    )?;
    write_triples(
        &dir.join("inference.txt"),
        split.inference_graph.triples(),
        &split.entity_vocab,
        &split.relation_vocab,
    )?;
    write_triples(
        &dir.join("valid.txt"),
        &split.valid_queries,
        &split.entity_vocab,
        &split.relation_vocab,
    )?;
    write_triples(
        &dir.join("test.txt"),
        &split.test_queries,
        &split.entity_vocab,
        &split.relation_vocab,
    )?;
    fs::write(dir.join("meta"), format!("task_mode={}\n", split.task_mode.as_str()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn tmpfile(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn load_triples_basic() {
        let f = tmpfile("a\tr1\tb\nb\tr2\tc\n");
        let (kg, ev, rv, dups) = load_triples(f.path(), None, None).unwrap();
        assert_eq!(kg.num_entities(), 3);
        assert_eq!(kg.num_relations(), 2);
        assert_eq!(kg.num_triples(), 2);
        assert_eq!(dups, 0);
        assert_eq!(ev.get("a"), Some(0));
        assert_eq!(rv.get("r2"), Some(1));
    }

    #[test]
    fn load_triples_reports_duplicates() {
        let f = tmpfile("a\tr1\tb\na\tr1\tb\n");
        let (kg, _, _, dups) = load_triples(f.path(), None, None).unwrap();
        assert_eq!(kg.num_triples(), 1);
        assert_eq!(dups, 1);
    }

    #[test]
    fn load_triples_malformed_line() {
        let f = tmpfile("a\tr1\n");
        match load_triples(f.path(), None, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn frozen_vocab_rejects_unknown_tokens() {
        let f = tmpfile("a\tr1\tb\n");
        let (_, ev, rv, _) = load_triples(f.path(), None, None).unwrap();
        let g = tmpfile("a\tr1\tz\n");
        match load_triples(g.path(), Some(ev), Some(rv)) {
            Err(Error::Vocab(_)) => {}
            other => panic!("expected vocab error, got {other:?}"),
        }
    }

    #[test]
    fn augment_adds_inverses() {
        let (kg, _) =
            KnowledgeGraph::from_triples(2, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        let aug = kg.augment_inverses().unwrap();
        assert_eq!(aug.num_relations(), 2);
        assert_eq!(aug.num_triples(), 2);
        assert!(aug.contains(&Triple::new(1, 1, 0)));
        assert!(aug.augment_inverses().is_err());
    }

    #[test]
    fn augment_empty_graph() {
        let (kg, _) = KnowledgeGraph::from_triples(0, 0, vec![]).unwrap();
        let aug = kg.augment_inverses().unwrap();
        assert_eq!(aug.num_relations(), 0);
        assert_eq!(aug.num_triples(), 0);
    }

    #[test]
    fn augment_self_loop() {
        let (kg, _) = KnowledgeGraph::from_triples(1, 1, vec![Triple::new(0, 0, 0)]).unwrap();
        let aug = kg.augment_inverses().unwrap();
        assert_eq!(aug.num_triples(), 2);
        assert!(aug.contains(&Triple::new(0, 0, 0)));
        assert!(aug.contains(&Triple::new(0, 1, 0)));
    }

    #[test]
    fn relation_graph_requires_augmentation() {
        let (kg, _) = KnowledgeGraph::from_triples(2, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        assert!(build_relation_graph(&kg).is_err());
    }

    #[test]
    fn relation_graph_single_triple_diagonal() {
        let (kg, _) = KnowledgeGraph::from_triples(2, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        let aug = kg.augment_inverses().unwrap();
        let rg = build_relation_graph(&aug).unwrap();
        // r0 and its inverse r1 share entities, so the diagonal and the
        // cross pairs all appear.
        assert!(rg.edges().contains(&(0, RelEdgeType::H2H, 0)));
        assert!(rg.edges().contains(&(0, RelEdgeType::T2T, 0)));
        assert!(rg.edges().contains(&(0, RelEdgeType::H2T, 1)));
        assert!(rg.edges().contains(&(1, RelEdgeType::T2H, 0)));
    }

    #[test]
    fn exchange_symmetry_invariants() {
        // a -r0-> b, b -r1-> c, a -r2-> d, plus inverses.
        let (kg, _) = KnowledgeGraph::from_triples(
            4,
            3,
            vec![Triple::new(0, 0, 1), Triple::new(1, 1, 2), Triple::new(0, 2, 3)],
        )
        .unwrap();
        let aug = kg.augment_inverses().unwrap();
        let rg = build_relation_graph(&aug).unwrap();
        for &(src, ty, dst) in rg.edges() {
            match ty {
                RelEdgeType::H2H => {
                    assert!(rg.edges().contains(&(dst, RelEdgeType::H2H, src)))
                }
                RelEdgeType::T2T => {
                    assert!(rg.edges().contains(&(dst, RelEdgeType::T2T, src)))
                }
                RelEdgeType::H2T => {
                    assert!(rg.edges().contains(&(dst, RelEdgeType::T2H, src)))
                }
                RelEdgeType::T2H => {
                    assert!(rg.edges().contains(&(dst, RelEdgeType::H2T, src)))
                }
            }
        }
        // Original-relation slice of the example: H2H between r0 and r2
        // (shared head a), H2T from r0 to r1 (b is r0's tail, r1's head).
        assert!(rg.edges().contains(&(0, RelEdgeType::H2H, 2)));
        assert!(rg.edges().contains(&(2, RelEdgeType::H2H, 0)));
        assert!(rg.edges().contains(&(0, RelEdgeType::H2T, 1)));
        assert!(rg.edges().contains(&(1, RelEdgeType::T2H, 0)));
    }

    #[test]
    fn dataset_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("toy");
        std::fs::create_dir_all(&sub).unwrap();
        std::fs::write(sub.join("train.txt"), "a\tr\tb\nb\tr\tc\n").unwrap();
        std::fs::write(sub.join("valid.txt"), "a\tr\tb\n").unwrap();
        std::fs::write(sub.join("test.txt"), "b\tr\tc\n").unwrap();
        std::fs::write(sub.join("meta"), "task_mode=tail_only\n").unwrap();
        let split = load_dataset_dir(&sub).unwrap();
        assert_eq!(split.task_mode, TaskMode::TailOnly);
        assert_eq!(split.inference_graph.num_triples(), 2);
        assert_eq!(split.valid_queries.len(), 1);
        assert_eq!(split.test_queries.len(), 1);

        let out = dir.path().join("copy");
        write_dataset_dir(&out, &split).unwrap();
        let reload = load_dataset_dir(&out).unwrap();
        assert_eq!(reload.task_mode, TaskMode::TailOnly);
        assert_eq!(reload.inference_graph.num_triples(), 2);
    }
}
