//! Per-branch conditional Bellman-Ford message passing over the entity
//! graph.
//!
//! A query `(h, r_q)` seeds entity `h` with the query relation's embedding;
//! every layer transforms each triple's source state by the (projected)
//! relation embedding in the branch's algebra, scatter-sums into the tail,
//! re-injects the boundary, and applies an affine + relu update. Messages
//! run over the inverse-augmented triple set so information flows both ways.

use rand::Rng;

use crate::algebra::BranchKind;
use crate::autodiff::{NodeId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::kgstore::KnowledgeGraph;
use crate::relnet::AffineParams;

/// One message branch: the algebra it multiplies in plus per-layer relation
/// projections and node updates. Branches share no parameters.
#[derive(Debug, Clone)]
pub struct BranchConfig {
    pub kind: BranchKind,
    pub width: usize,
    pub rel_projections: Vec<AffineParams>,
    pub node_updates: Vec<AffineParams>,
    pub oracle_mode: bool,
}

impl BranchConfig {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        kind: BranchKind,
        num_layers: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_layers < 1 {
            return Err(Error::Config("branch needs at least one layer".into()));
        }
        if !kind.valid_width(width) {
            return Err(Error::Config(format!(
                "width {width} invalid for branch kind {}",
                kind.name()
            )));
        }
        // Contracting relation projections keep the product of per-edge
        // algebra messages and sum aggregation stable over deep stacks.
        let rel_projections = (0..num_layers)
            .map(|l| {
                AffineParams::init_with_gain(store, &format!("{name}.rel_proj{l}"), width, width, 0.25, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let node_updates = (0..num_layers)
            .map(|l| AffineParams::init(store, &format!("{name}.node{l}"), width, width, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            width,
            rel_projections,
            node_updates,
            oracle_mode: false,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.node_updates.len()
    }

    /// One propagation layer: project the relation embeddings, transform
    /// each triple's source state in the branch algebra, scatter into
    /// tails, re-inject the boundary, and apply the node update.
    pub fn layer_step(
        &self,
        tape: &mut Tape,
        topo: &EntityGraphTopology,
        state: NodeId,
        rel_embs: NodeId,
        boundary: NodeId,
        layer: usize,
    ) -> Result<NodeId> {
        let projected = if self.oracle_mode {
            rel_embs
        } else {
            self.rel_projections[layer].apply(tape, rel_embs)?
        };
        let agg = if topo.heads.is_empty() {
            boundary
        } else {
            let src = tape.gather_rows(state, &topo.heads)?;
            let rel = tape.gather_rows(projected, &topo.rels)?;
            let msgs = tape.relmul(self.kind, src, rel)?;
            let summed = tape.scatter_sum(msgs, &topo.tails, topo.num_entities)?;
            tape.add(summed, boundary)?
        };
        if self.oracle_mode {
            Ok(agg)
        } else {
            let pre = self.node_updates[layer].apply(tape, agg)?;
            Ok(tape.relu(pre))
        }
    }
}

/// Flattened triple arrays of an inverse-augmented graph.
#[derive(Debug, Clone)]
pub struct EntityGraphTopology {
    pub num_entities: usize,
    pub num_relations: usize,
    pub heads: Vec<usize>,
    pub rels: Vec<usize>,
    pub tails: Vec<usize>,
}

impl EntityGraphTopology {
    pub fn from_graph(kg: &KnowledgeGraph) -> Result<Self> {
        if !kg.is_augmented() {
            return Err(Error::State(
                "entity propagation runs over the inverse-augmented triple set".into(),
            ));
        }
        let mut heads = Vec::with_capacity(kg.num_triples());
        let mut rels = Vec::with_capacity(kg.num_triples());
        let mut tails = Vec::with_capacity(kg.num_triples());
        for t in kg.triples() {
            heads.push(t.head);
            rels.push(t.rel);
            tails.push(t.tail);
        }
        Ok(Self {
            num_entities: kg.num_entities(),
            num_relations: kg.num_relations(),
            heads,
            rels,
            tails,
        })
    }
}

impl EntityGraphTopology {
    /// Copy of the topology with the listed triple indices removed. The
    /// training loop uses this to hide a batch edge (and its inverse) from
    /// its own propagation.
    pub fn without_triples(&self, exclude: &[usize]) -> Self {
        let keep = |i: &usize| !exclude.contains(i);
        let sel = |v: &[usize]| -> Vec<usize> {
            v.iter()
                .enumerate()
                .filter(|(i, _)| keep(i))
                .map(|(_, &x)| x)
                .collect()
        };
        Self {
            num_entities: self.num_entities,
            num_relations: self.num_relations,
            heads: sel(&self.heads),
            rels: sel(&self.rels),
            tails: sel(&self.tails),
        }
    }
}

/// Branch-specific entity states for one query, outside the tape.
#[derive(Debug, Clone)]
pub struct EntityStates {
    pub matrix: Tensor,
    pub branch: BranchKind,
    pub query: (usize, usize),
}

/// Run one branch's propagation on the tape. `rel_embs` is the
/// `[num_relations x d]` relation embedding node produced by the relation
/// encoder. Returns the `[num_entities x d]` state after all layers.
pub fn propagate_branch_on_tape(
    tape: &mut Tape,
    topo: &EntityGraphTopology,
    rel_embs: NodeId,
    query: (usize, usize),
    cfg: &BranchConfig,
) -> Result<NodeId> {
    let (head, r_q) = query;
    validate_query(tape, topo, rel_embs, head, r_q, cfg)?;

    // Boundary: the query head starts from the query relation's embedding.
    let q_emb = tape.gather_rows(rel_embs, &[r_q])?;
    let boundary = tape.scatter_sum(q_emb, &[head], topo.num_entities)?;

    let mut state = boundary;
    for layer in 0..cfg.num_layers() {
        state = cfg.layer_step(tape, topo, state, rel_embs, boundary, layer)?;
    }
    Ok(state)
}

fn validate_query(
    tape: &Tape,
    topo: &EntityGraphTopology,
    rel_embs: NodeId,
    head: usize,
    r_q: usize,
    cfg: &BranchConfig,
) -> Result<()> {
    if head >= topo.num_entities {
        return Err(Error::Index(format!(
            "query head {head} out of range ({} entities)",
            topo.num_entities
        )));
    }
    if r_q >= topo.num_relations {
        return Err(Error::Index(format!(
            "query relation {r_q} out of range ({} relations)",
            topo.num_relations
        )));
    }
    let (rows, cols) = tape.value(rel_embs).shape();
    if rows != topo.num_relations {
        return Err(Error::Shape(format!(
            "relation embeddings have {rows} rows but the graph has {} relations",
            topo.num_relations
        )));
    }
    if cols != cfg.width {
        return Err(Error::Shape(format!(
            "relation embeddings width {cols} differs from branch width {}",
            cfg.width
        )));
    }
    Ok(())
}

/// Standalone propagation with a fixed relation-embedding matrix, for tests.
pub fn propagate_branch(
    store: &ParamStore,
    topo: &EntityGraphTopology,
    rel_embs: &Tensor,
    query: (usize, usize),
    cfg: &BranchConfig,
) -> Result<EntityStates> {
    let mut tape = Tape::new(store);
    let rel_node = tape.constant(rel_embs.clone());
    let out = propagate_branch_on_tape(&mut tape, topo, rel_node, query, cfg)?;
    Ok(EntityStates {
        matrix: tape.value(out).clone(),
        branch: cfg.kind,
        query,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgstore::{KnowledgeGraph, Triple};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle_branch(store: &mut ParamStore, kind: BranchKind, layers: usize, d: usize) -> BranchConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cfg = BranchConfig::init(store, kind.name(), kind, layers, d, &mut rng).unwrap();
        cfg.oracle_mode = true;
        cfg
    }

    /// Raw topology without inverse augmentation, for hand-checkable paths.
    fn raw_topo(num_entities: usize, num_relations: usize, triples: &[(usize, usize, usize)]) -> EntityGraphTopology {
        EntityGraphTopology {
            num_entities,
            num_relations,
            heads: triples.iter().map(|t| t.0).collect(),
            rels: triples.iter().map(|t| t.1).collect(),
            tails: triples.iter().map(|t| t.2).collect(),
        }
    }

    #[test]
    fn real_branch_path_products() {
        // Path a -> b -> c with relation embedding 2; query (a, r_q) where
        // r_q has embedding 1. After T = 2: z_a = 1, z_b = 2, z_c = 4.
        let mut store = ParamStore::new();
        let cfg = oracle_branch(&mut store, BranchKind::Real, 2, 1);
        let topo = raw_topo(3, 2, &[(0, 0, 1), (1, 0, 2)]);
        let rel_embs = Tensor::from_vec(2, 1, vec![2.0, 1.0]).unwrap();
        let states = propagate_branch(&store, &topo, &rel_embs, (0, 1), &cfg).unwrap();
        assert_eq!(states.matrix.data, vec![1.0, 2.0, 4.0]);
    }

    #[test]
    fn entities_beyond_depth_stay_zero() {
        use rand::Rng;
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..8usize);
            let nr = rng.gen_range(1..3usize);
            let nt = rng.gen_range(1..12usize);
            let triples: Vec<(usize, usize, usize)> = (0..nt)
                .map(|_| (rng.gen_range(0..n), rng.gen_range(0..nr), rng.gen_range(0..n)))
                .collect();
            let layers = rng.gen_range(1..4usize);
            let mut store = ParamStore::new();
            let cfg = oracle_branch(&mut store, BranchKind::Real, layers, 1);
            let topo = raw_topo(n, nr, &triples);
            // Positive embeddings so contributions cannot cancel.
            let rel_embs =
                Tensor::from_vec(nr, 1, (0..nr).map(|i| 0.5 + i as f64).collect()).unwrap();
            let h = rng.gen_range(0..n);
            let states = propagate_branch(&store, &topo, &rel_embs, (h, 0), &cfg).unwrap();

            let mut dist = vec![usize::MAX; n];
            dist[h] = 0;
            for step in 1..=layers {
                for &(u, _, v) in &triples {
                    if dist[u] == step - 1 && dist[v] == usize::MAX {
                        dist[v] = step;
                    }
                }
            }
            for v in 0..n {
                if dist[v] == usize::MAX {
                    assert_eq!(states.matrix.data[v], 0.0, "seed {seed}, entity {v}");
                } else {
                    assert!(states.matrix.data[v] > 0.0, "seed {seed}, entity {v}");
                }
            }
        }
    }

    #[test]
    fn complex_branch_rotates_by_i() {
        // Single edge (h, r, v) with r embedding i and z_h = 1: z_v = i.
        let mut store = ParamStore::new();
        let cfg = oracle_branch(&mut store, BranchKind::Complex, 1, 2);
        let topo = raw_topo(2, 2, &[(0, 0, 1)]);
        let rel_embs = Tensor::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let states = propagate_branch(&store, &topo, &rel_embs, (0, 1), &cfg).unwrap();
        assert_eq!(states.matrix.row(0), &[1.0, 0.0]);
        assert_eq!(states.matrix.row(1), &[0.0, 1.0]);
    }

    /// Exhaustive walk enumeration: sum over all directed walks from `h` of
    /// length <= T of the product of relation values, times the boundary
    /// value, including re-injection at every layer.
    fn walk_sum_oracle(
        topo: &EntityGraphTopology,
        rel_vals: &[f64],
        h: usize,
        boundary_val: f64,
        layers: usize,
    ) -> Vec<f64> {
        let n = topo.num_entities;
        let mut state = vec![0.0; n];
        state[h] = boundary_val;
        for _ in 0..layers {
            let mut next = vec![0.0; n];
            next[h] = boundary_val;
            for i in 0..topo.heads.len() {
                next[topo.tails[i]] += state[topo.heads[i]] * rel_vals[topo.rels[i]];
            }
            state = next;
        }
        state
    }

    #[test]
    fn walk_enumeration_oracle_small_graphs() {
        use rand::Rng;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..=8usize);
            let nr = rng.gen_range(1..=3usize);
            let nt = rng.gen_range(1..=16usize);
            let triples: Vec<(usize, usize, usize)> = (0..nt)
                .map(|_| (rng.gen_range(0..n), rng.gen_range(0..nr), rng.gen_range(0..n)))
                .collect();
            let layers = rng.gen_range(1..=3usize);
            let mut store = ParamStore::new();
            let cfg = oracle_branch(&mut store, BranchKind::Real, layers, 1);
            let topo = raw_topo(n, nr, &triples);
            let rel_vals: Vec<f64> = (0..nr).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let rel_embs = Tensor::from_vec(nr, 1, rel_vals.clone()).unwrap();
            let h = rng.gen_range(0..n);
            let r_q = rng.gen_range(0..nr);
            let states = propagate_branch(&store, &topo, &rel_embs, (h, r_q), &cfg).unwrap();
            let expected = walk_sum_oracle(&topo, &rel_vals, h, rel_vals[r_q], layers);
            for v in 0..n {
                assert!(
                    (states.matrix.data[v] - expected[v]).abs() < 1e-9,
                    "seed {seed}, entity {v}: {} vs {}",
                    states.matrix.data[v],
                    expected[v]
                );
            }
        }
    }

    #[test]
    fn locality_of_far_edges() {
        // Chain 0 -> 1 -> 2, plus far pair 4 -> 5 beyond depth T from 0.
        // Adding an edge between 4 and 5 must not change states near 0.
        let mut store = ParamStore::new();
        let cfg = oracle_branch(&mut store, BranchKind::Real, 2, 1);
        let rel_embs = Tensor::from_vec(1, 1, vec![0.7]).unwrap();
        let base = raw_topo(6, 1, &[(0, 0, 1), (1, 0, 2)]);
        let more = raw_topo(6, 1, &[(0, 0, 1), (1, 0, 2), (4, 0, 5)]);
        let s1 = propagate_branch(&store, &base, &rel_embs, (0, 0), &cfg).unwrap();
        let s2 = propagate_branch(&store, &more, &rel_embs, (0, 0), &cfg).unwrap();
        for v in 0..3 {
            assert_eq!(s1.matrix.data[v], s2.matrix.data[v]);
        }
    }

    #[test]
    fn branch_isolation() {
        // Two branches share the relation embeddings but no parameters:
        // perturbing one branch's parameters leaves the other's output
        // bit-identical.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let a = BranchConfig::init(&mut store, "a", BranchKind::Complex, 2, 4, &mut rng).unwrap();
        let b = BranchConfig::init(&mut store, "b", BranchKind::SplitComplex, 2, 4, &mut rng).unwrap();
        let (kg, _) = KnowledgeGraph::from_triples(
            3,
            1,
            vec![Triple::new(0, 0, 1), Triple::new(1, 0, 2)],
        )
        .unwrap();
        let aug = kg.augment_inverses().unwrap();
        let topo = EntityGraphTopology::from_graph(&aug).unwrap();
        use rand::Rng as _;
        let rel_embs = Tensor::from_vec(2, 4, (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();

        let before = propagate_branch(&store, &topo, &rel_embs, (0, 0), &b).unwrap();
        for layer in &a.node_updates {
            store.get_mut(layer.weight).value.fill(9.0);
        }
        let after = propagate_branch(&store, &topo, &rel_embs, (0, 0), &b).unwrap();
        assert_eq!(before.matrix.data, after.matrix.data);
    }

    #[test]
    fn rejects_bad_queries_and_widths() {
        let mut store = ParamStore::new();
        let cfg = oracle_branch(&mut store, BranchKind::Real, 1, 2);
        let topo = raw_topo(2, 1, &[(0, 0, 1)]);
        let rel = Tensor::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(propagate_branch(&store, &topo, &rel, (5, 0), &cfg).is_err());
        assert!(propagate_branch(&store, &topo, &rel, (0, 3), &cfg).is_err());
        let narrow = Tensor::from_vec(1, 4, vec![1.0; 4]).unwrap();
        assert!(propagate_branch(&store, &topo, &narrow, (0, 0), &cfg).is_err());
    }
}
