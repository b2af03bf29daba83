//! Deterministic generator of synthetic knowledge graphs with planted
//! relational patterns, plus fully inductive source/target splits with
//! disjoint vocabularies.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kgstore::{DatasetSplit, KnowledgeGraph, TaskMode, Triple, Vocab};

/// Pattern planted into one generated relation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternKind {
    /// Every sampled pair is materialized in both directions.
    Symmetric,
    /// The reverse of a sampled pair is never added.
    AntiSymmetric,
    /// Closure of two earlier non-composite relations.
    Composite,
    /// Each sampled head links to at least three distinct tails.
    OneToMany,
    /// Parent-to-child edges of a random tree.
    Hierarchy,
}

impl PatternKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "symmetric" => Ok(PatternKind::Symmetric),
            "anti_symmetric" | "antisymmetric" => Ok(PatternKind::AntiSymmetric),
            "composite" => Ok(PatternKind::Composite),
            "one_to_many" | "onetomany" => Ok(PatternKind::OneToMany),
            "hierarchy" => Ok(PatternKind::Hierarchy),
            other => Err(Error::Config(format!("unknown pattern kind `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PatternKind::Symmetric => "symmetric",
            PatternKind::AntiSymmetric => "anti_symmetric",
            PatternKind::Composite => "composite",
            PatternKind::OneToMany => "one_to_many",
            PatternKind::Hierarchy => "hierarchy",
        }
    }
}

/// Generator parameters. `density` scales the base pair count of each
/// relation relative to the entity count; composite relations ignore it and
/// materialize the full closure of their base pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_entities: usize,
    pub relations: Vec<(PatternKind, f64)>,
    pub holdout_fraction: f64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_entities < 4 {
            return Err(Error::Config("synthetic graphs need at least 4 entities".into()));
        }
        if self.relations.is_empty() {
            return Err(Error::Config("at least one relation is required".into()));
        }
        for &(_, density) in &self.relations {
            if !(density > 0.0 && density <= 1.0) {
                return Err(Error::Config(format!("density {density} not in (0, 1]")));
            }
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction <= 0.5) {
            return Err(Error::Config(format!(
                "holdout_fraction {} not in (0, 0.5]",
                self.holdout_fraction
            )));
        }
        let mut non_composite = 0usize;
        for &(pattern, _) in &self.relations {
            if pattern == PatternKind::Composite {
                if non_composite < 2 {
                    return Err(Error::Config(
                        "a composite relation needs two earlier non-composite relations".into(),
                    ));
                }
            } else {
                non_composite += 1;
            }
        }
        Ok(())
    }

    /// Desk-scale fixture: 200 entities, 8 relations (two per pattern class
    /// among symmetric / anti-symmetric / one-to-many / composite), tuned to
    /// roughly 1500 triples.
    pub fn default_fixture(seed: u64) -> Self {
        Self {
            seed,
            num_entities: 200,
            relations: vec![
                (PatternKind::Symmetric, 0.5),
                (PatternKind::Symmetric, 0.5),
                (PatternKind::AntiSymmetric, 0.9),
                (PatternKind::AntiSymmetric, 0.9),
                (PatternKind::OneToMany, 0.8),
                (PatternKind::OneToMany, 0.8),
                (PatternKind::Composite, 1.0),
                (PatternKind::Composite, 1.0),
            ],
            holdout_fraction: 0.1,
        }
    }
}

/// A generated graph together with its vocabularies and the planted
/// pattern (plus base-pair indices for composites) of every relation.
#[derive(Debug, Clone)]
pub struct SynthKg {
    pub kg: KnowledgeGraph,
    pub entity_vocab: Vocab,
    pub relation_vocab: Vocab,
    pub planted: Vec<(PatternKind, Option<(usize, usize)>)>,
}

/// Generate a graph whose relations each satisfy their pattern's defining
/// implication with confidence 1.0. Deterministic in the seed.
pub fn generate_patterned_kg(spec: &SynthSpec) -> Result<SynthKg> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_entities;
    let mut triples: Vec<Triple> = Vec::new();
    let mut planted = Vec::with_capacity(spec.relations.len());
    let mut non_composite: Vec<usize> = Vec::new();
    let mut composites_so_far = 0usize;

    for (rel, &(pattern, density)) in spec.relations.iter().enumerate() {
        let base_count = ((density * n as f64).round() as usize).max(1);
        let mut pairs: HashSet<(usize, usize)> = HashSet::new();
        match pattern {
            PatternKind::Symmetric => {
                sample_pairs(&mut rng, n, base_count, &mut pairs, true)?;
                let mut sorted: Vec<_> = pairs.into_iter().collect();
                sorted.sort_unstable();
                for (a, b) in sorted {
                    triples.push(Triple::new(a, rel, b));
                    triples.push(Triple::new(b, rel, a));
                }
                planted.push((pattern, None));
                non_composite.push(rel);
            }
            PatternKind::AntiSymmetric | PatternKind::OneToMany => {
                if pattern == PatternKind::AntiSymmetric {
                    sample_pairs(&mut rng, n, base_count, &mut pairs, false)?;
                } else {
                    sample_one_to_many(&mut rng, n, base_count, &mut pairs)?;
                }
                let mut sorted: Vec<_> = pairs.into_iter().collect();
                sorted.sort_unstable();
                for (a, b) in sorted {
                    triples.push(Triple::new(a, rel, b));
                }
                planted.push((pattern, None));
                non_composite.push(rel);
            }
            PatternKind::Hierarchy => {
                let mut nodes: Vec<usize> = (0..n).collect();
                nodes.shuffle(&mut rng);
                let tree_size = (base_count + 1).min(n);
                for i in 1..tree_size {
                    let parent = nodes[rng.gen_range(0..i)];
                    triples.push(Triple::new(parent, rel, nodes[i]));
                }
                planted.push((pattern, None));
                non_composite.push(rel);
            }
            PatternKind::Composite => {
                let base1 = non_composite[2 * composites_so_far % non_composite.len()];
                let base2 = non_composite[(2 * composites_so_far + 1) % non_composite.len()];
                composites_so_far += 1;
                // Materialize the full closure so the implication holds with
                // confidence 1.0.
                let firsts: Vec<Triple> =
                    triples.iter().filter(|t| t.rel == base1).copied().collect();
                let seconds: Vec<Triple> =
                    triples.iter().filter(|t| t.rel == base2).copied().collect();
                let mut by_head: std::collections::HashMap<usize, Vec<usize>> =
                    std::collections::HashMap::new();
                for s in &seconds {
                    by_head.entry(s.head).or_default().push(s.tail);
                }
                let mut closure: HashSet<(usize, usize)> = HashSet::new();
                for f in &firsts {
                    if let Some(tails) = by_head.get(&f.tail) {
                        for &t in tails {
                            closure.insert((f.head, t));
                        }
                    }
                }
                let mut sorted: Vec<_> = closure.into_iter().collect();
                sorted.sort_unstable();
                for (a, c) in sorted {
                    triples.push(Triple::new(a, rel, c));
                }
                planted.push((pattern, Some((base1, base2))));
            }
        }
    }

    let mut entity_vocab = Vocab::new();
    for e in 0..n {
        entity_vocab.intern(&format!("g{}_e{e}", spec.seed));
    }
    let mut relation_vocab = Vocab::new();
    for (rel, &(pattern, _)) in spec.relations.iter().enumerate() {
        relation_vocab.intern(&format!("g{}_r{rel}_{}", spec.seed, pattern.as_str()));
    }
    let (kg, _) = KnowledgeGraph::from_triples(n, spec.relations.len(), triples)?;
    Ok(SynthKg {
        kg,
        entity_vocab,
        relation_vocab,
        planted,
    })
}

fn sample_pairs(
    rng: &mut ChaCha8Rng,
    n: usize,
    count: usize,
    pairs: &mut HashSet<(usize, usize)>,
    unordered: bool,
) -> Result<()> {
    let capacity = n * (n - 1) / 2;
    if count > capacity {
        return Err(Error::Rejected(format!(
            "density too high: {count} pairs requested over {n} entities"
        )));
    }
    let mut attempts = 0usize;
    while pairs.len() < count {
        attempts += 1;
        if attempts > 1000 * count {
            return Err(Error::Rejected(
                "pair sampling failed; density too high for the pattern".into(),
            ));
        }
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a == b {
            continue;
        }
        let key = if unordered && a > b { (b, a) } else { (a, b) };
        // Anti-symmetry: never admit a pair whose reverse is present.
        if !unordered && pairs.contains(&(key.1, key.0)) {
            continue;
        }
        pairs.insert(key);
    }
    Ok(())
}

fn sample_one_to_many(
    rng: &mut ChaCha8Rng,
    n: usize,
    count: usize,
    pairs: &mut HashSet<(usize, usize)>,
) -> Result<()> {
    let fanout = 3usize;
    let num_heads = count.div_ceil(fanout);
    if num_heads + fanout > n {
        return Err(Error::Rejected(
            "one-to-many density too high for the entity count".into(),
        ));
    }
    let mut heads: Vec<usize> = (0..n).collect();
    heads.shuffle(rng);
    heads.truncate(num_heads);
    for &h in &heads {
        let mut placed = 0usize;
        let mut attempts = 0usize;
        while placed < fanout {
            attempts += 1;
            if attempts > 1000 * fanout {
                return Err(Error::Rejected("one-to-many tail sampling failed".into()));
            }
            let t = rng.gen_range(0..n);
            if t == h || pairs.contains(&(h, t)) || pairs.contains(&(t, h)) {
                continue;
            }
            pairs.insert((h, t));
            placed += 1;
        }
    }
    Ok(())
}

/// Split one generated graph into an inference graph plus valid/test query
/// lists, never orphaning an entity or relation.
fn holdout_split(
    synth: &SynthKg,
    holdout_fraction: f64,
    rng: &mut ChaCha8Rng,
    name: String,
) -> Result<DatasetSplit> {
    let kg = &synth.kg;
    let total = kg.num_triples();
    let target = ((total as f64) * holdout_fraction).round() as usize;

    let mut entity_cover = vec![0usize; kg.num_entities()];
    let mut relation_cover = vec![0usize; kg.num_relations()];
    for t in kg.triples() {
        entity_cover[t.head] += 1;
        if t.tail != t.head {
            entity_cover[t.tail] += 1;
        }
        relation_cover[t.rel] += 1;
    }

    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let mut held: Vec<usize> = Vec::with_capacity(target);
    let mut removed = vec![false; total];
    for &i in &order {
        if held.len() == target {
            break;
        }
        let t = kg.triples()[i];
        let head_ok = entity_cover[t.head] > 1;
        let tail_ok = t.tail == t.head || entity_cover[t.tail] > 1;
        if head_ok && tail_ok && relation_cover[t.rel] > 1 {
            entity_cover[t.head] -= 1;
            if t.tail != t.head {
                entity_cover[t.tail] -= 1;
            }
            relation_cover[t.rel] -= 1;
            removed[i] = true;
            held.push(i);
        }
    }

    let inference_triples: Vec<Triple> = kg
        .triples()
        .iter()
        .enumerate()
        .filter(|(i, _)| !removed[*i])
        .map(|(_, t)| *t)
        .collect();
    let (inference_graph, _) =
        KnowledgeGraph::from_triples(kg.num_entities(), kg.num_relations(), inference_triples)?;

    let mut valid_queries = Vec::with_capacity(held.len() / 2 + 1);
    let mut test_queries = Vec::with_capacity(held.len() / 2 + 1);
    for (k, &i) in held.iter().enumerate() {
        if k % 2 == 0 {
            valid_queries.push(kg.triples()[i]);
        } else {
            test_queries.push(kg.triples()[i]);
        }
    }

    Ok(DatasetSplit {
        name,
        train_graph: inference_graph.clone(),
        inference_graph,
        valid_queries,
        test_queries,
        task_mode: TaskMode::HeadAndTail,
        entity_vocab: synth.entity_vocab.clone(),
        relation_vocab: synth.relation_vocab.clone(),
        train_shares_vocab: true,
    })
}

/// Derive the target-graph seed from the source seed.
pub fn derived_target_seed(seed: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03)
}

/// Generate the source dataset and a statistically similar target dataset
/// with fully disjoint entity/relation vocabularies.
pub fn split_dataset(spec: &SynthSpec) -> Result<(DatasetSplit, DatasetSplit)> {
    let source_synth = generate_patterned_kg(spec)?;
    let mut target_spec = spec.clone();
    target_spec.seed = derived_target_seed(spec.seed);
    let target_synth = generate_patterned_kg(&target_spec)?;

    let mut source_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_5EED);
    let mut target_rng = ChaCha8Rng::seed_from_u64(target_spec.seed ^ 0x5EED_5EED);
    let source = holdout_split(
        &source_synth,
        spec.holdout_fraction,
        &mut source_rng,
        format!("synth{}", spec.seed),
    )?;
    let target = holdout_split(
        &target_synth,
        spec.holdout_fraction,
        &mut target_rng,
        format!("synth{}", target_spec.seed),
    )?;
    Ok((source, target))
}
