//! Query-conditioned relation encoder.
//!
//! Runs L rounds of message passing over the typed relation graph. The
//! boundary is an indicator at the query relation (all-ones row); each layer
//! multiplies source states with the edge-type embedding, scatter-sums into
//! destinations, re-injects the boundary, and applies a learned affine +
//! relu node update. Oracle mode skips the learned update so tests can
//! hand-check the propagation.

use rand::Rng;

use crate::autodiff::{xavier_uniform, NodeId, ParamId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::kgstore::RelationGraph;

/// Weight/bias pair of one dense affine layer.
#[derive(Debug, Clone, Copy)]
pub struct AffineParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl AffineParams {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::init_with_gain(store, name, fan_in, fan_out, 1.0, rng)
    }

    pub fn init_with_gain(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // Non-zero bias init keeps zero-state rows off the exact relu kink,
        // where finite differences and subgradients disagree.
        let bound = 1.0 / (fan_in as f64).sqrt();
        let bias_data: Vec<f64> = (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        Ok(Self {
            weight: store.add(
                &format!("{name}.weight"),
                crate::autodiff::xavier_uniform_gain(fan_in, fan_out, gain, rng),
            )?,
            bias: store.add(&format!("{name}.bias"), Tensor::from_vec(1, fan_out, bias_data)?)?,
        })
    }

    /// Pure linear map: the bias is pinned at zero and excluded from
    /// training, so scaling the input scales the output.
    pub fn init_linear(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = store.add(&format!("{name}.weight"), xavier_uniform(fan_in, fan_out, rng))?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(1, fan_out))?;
        store.get_mut(bias).trainable = false;
        Ok(Self { weight, bias })
    }

    pub fn apply(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.dense_affine(x, w, b)
    }
}

/// Trainable state of the relation encoder: one embedding per edge type
/// (shared across layers) and one affine node update per layer.
#[derive(Debug, Clone)]
pub struct RelationEncoderParams {
    pub edge_type_embeddings: ParamId,
    pub layers: Vec<AffineParams>,
    pub width: usize,
    pub oracle_mode: bool,
}

impl RelationEncoderParams {
    pub fn init(
        store: &mut ParamStore,
        num_layers: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_layers < 1 {
            return Err(Error::Config("relation encoder needs at least one layer".into()));
        }
        if width < 2 {
            return Err(Error::Config("relation width must be at least 2".into()));
        }
        // Small type embeddings keep the summed messages subordinate to the
        // re-injected boundary on dense relation graphs; trained weights are
        // free to grow back.
        let bound = (0.3 / width as f64).sqrt();
        let emb_data: Vec<f64> = (0..4 * width).map(|_| rng.gen_range(-bound..bound)).collect();
        let edge_type_embeddings = store.add(
            "relnet.edge_type_embeddings",
            Tensor::from_vec(4, width, emb_data)?,
        )?;
        let layers = (0..num_layers)
            .map(|l| AffineParams::init(store, &format!("relnet.layer{l}"), width, width, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            edge_type_embeddings,
            layers,
            width,
            oracle_mode: false,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Flattened edge arrays of a [`RelationGraph`], ready for gather/scatter.
#[derive(Debug, Clone)]
pub struct RelGraphTopology {
    pub num_nodes: usize,
    pub src: Vec<usize>,
    pub edge_type: Vec<usize>,
    pub dst: Vec<usize>,
}

impl RelGraphTopology {
    pub fn from_graph(graph: &RelationGraph) -> Self {
        let mut src = Vec::with_capacity(graph.num_edges());
        let mut edge_type = Vec::with_capacity(graph.num_edges());
        let mut dst = Vec::with_capacity(graph.num_edges());
        for &(s, ty, d) in graph.edges() {
            src.push(s);
            edge_type.push(ty.index());
            dst.push(d);
        }
        Self {
            num_nodes: graph.num_rel_nodes(),
            src,
            edge_type,
            dst,
        }
    }
}

/// Relation embeddings conditioned on one query relation.
#[derive(Debug, Clone)]
pub struct RelationEmbeddings {
    pub matrix: Tensor,
    pub query_relation: usize,
}

/// Tape-level encoder: returns the `[num_rel_nodes x d]` state after L
/// layers, with gradients flowing into the encoder parameters.
pub fn encode_relations_on_tape(
    tape: &mut Tape,
    topo: &RelGraphTopology,
    query_relation: usize,
    params: &RelationEncoderParams,
) -> Result<NodeId> {
    if query_relation >= topo.num_nodes {
        return Err(Error::Index(format!(
            "query relation {query_relation} out of range ({} relation nodes)",
            topo.num_nodes
        )));
    }
    let d = params.width;
    // Indicator boundary: all-ones row at the query relation.
    let mut boundary = Tensor::zeros(topo.num_nodes, d);
    boundary.row_mut(query_relation).fill(1.0);
    let boundary = tape.constant(boundary);

    let type_embs = tape.param(params.edge_type_embeddings);
    let mut state = boundary;
    for layer in &params.layers {
        let agg = if topo.src.is_empty() {
            boundary
        } else {
            let src_states = tape.gather_rows(state, &topo.src)?;
            let edge_embs = tape.gather_rows(type_embs, &topo.edge_type)?;
            let msgs = tape.mul(src_states, edge_embs)?;
            let summed = tape.scatter_sum(msgs, &topo.dst, topo.num_nodes)?;
            tape.add(summed, boundary)?
        };
        state = if params.oracle_mode {
            agg
        } else {
            let pre = layer.apply(tape, agg)?;
            tape.relu(pre)
        };
    }
    Ok(state)
}

/// Standalone encoder for tests and inspection: builds a throwaway tape and
/// returns the embedding matrix by value.
pub fn encode_relations(
    store: &ParamStore,
    topo: &RelGraphTopology,
    query_relation: usize,
    params: &RelationEncoderParams,
) -> Result<RelationEmbeddings> {
    let mut tape = Tape::new(store);
    let out = encode_relations_on_tape(&mut tape, topo, query_relation, params)?;
    Ok(RelationEmbeddings {
        matrix: tape.value(out).clone(),
        query_relation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kgstore::{build_relation_graph, KnowledgeGraph, Triple};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn oracle_params(store: &mut ParamStore, layers: usize, d: usize) -> RelationEncoderParams {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = RelationEncoderParams::init(store, layers, d, &mut rng).unwrap();
        p.oracle_mode = true;
        p
    }

    /// Hand-built topology: explicit nodes and edges, no knowledge graph.
    fn topo(num_nodes: usize, edges: &[(usize, usize, usize)]) -> RelGraphTopology {
        RelGraphTopology {
            num_nodes,
            src: edges.iter().map(|e| e.0).collect(),
            edge_type: edges.iter().map(|e| e.1).collect(),
            dst: edges.iter().map(|e| e.2).collect(),
        }
    }

    #[test]
    fn boundary_only_single_node() {
        let mut store = ParamStore::new();
        let params = oracle_params(&mut store, 2, 4);
        let embs = encode_relations(&store, &topo(1, &[]), 0, &params).unwrap();
        assert_eq!(embs.matrix.row(0), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn single_edge_hand_propagation() {
        // Edge (r_q --H2T--> r_1), e_H2T = (2, 2). After one layer row r_1
        // receives (1,1) * (2,2) = (2,2) and the boundary restores r_q.
        let mut store = ParamStore::new();
        let params = oracle_params(&mut store, 1, 2);
        store
            .get_mut(params.edge_type_embeddings)
            .value
            .row_mut(1)
            .copy_from_slice(&[2.0, 2.0]);
        let embs = encode_relations(&store, &topo(2, &[(0, 1, 1)]), 0, &params).unwrap();
        assert_eq!(embs.matrix.row(0), &[1.0, 1.0]);
        assert_eq!(embs.matrix.row(1), &[2.0, 2.0]);
    }

    #[test]
    fn unreachable_relations_stay_zero() {
        // Chain r0 -> r1 -> r2 -> r3; with L = 2 only nodes within two hops
        // of the query carry signal.
        let mut store = ParamStore::new();
        let params = oracle_params(&mut store, 2, 3);
        let t = topo(4, &[(0, 0, 1), (1, 0, 2), (2, 0, 3)]);
        let embs = encode_relations(&store, &t, 0, &params).unwrap();
        assert!(embs.matrix.row(2).iter().any(|&v| v != 0.0));
        assert_eq!(embs.matrix.row(3), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn bfs_reachability_oracle() {
        // On random relation graphs, zero rows in oracle mode are exactly
        // the nodes beyond L typed hops from the query.
        use rand::Rng;
        for seed in 0..30u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..8usize);
            let ne = rng.gen_range(0..n * 2);
            let edges: Vec<(usize, usize, usize)> = (0..ne)
                .map(|_| (rng.gen_range(0..n), rng.gen_range(0..4), rng.gen_range(0..n)))
                .collect();
            let layers = rng.gen_range(1..4usize);
            let mut store = ParamStore::new();
            let mut params = oracle_params(&mut store, layers, 2);
            // Strictly positive type embeddings so signal cannot cancel.
            {
                let t = &mut store.get_mut(params.edge_type_embeddings).value;
                for v in t.data.iter_mut() {
                    *v = v.abs() + 0.5;
                }
            }
            params.oracle_mode = true;
            let q = rng.gen_range(0..n);
            let t = topo(n, &edges);
            let embs = encode_relations(&store, &t, q, &params).unwrap();

            // BFS over the directed edges, depth limited by layer count.
            let mut dist = vec![usize::MAX; n];
            dist[q] = 0;
            let mut frontier = vec![q];
            for step in 1..=layers {
                let mut next = Vec::new();
                for &(s, _, d) in &edges {
                    if frontier.contains(&s) && dist[d] == usize::MAX {
                        dist[d] = step;
                        next.push(d);
                    }
                }
                frontier = next;
                if frontier.is_empty() {
                    break;
                }
            }
            for v in 0..n {
                let zero = embs.matrix.row(v).iter().all(|&x| x == 0.0);
                let reachable = dist[v] != usize::MAX;
                assert_eq!(!zero, reachable, "seed {seed}, node {v}");
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        use rand::Rng;
        let (kg, _) = KnowledgeGraph::from_triples(
            4,
            3,
            vec![
                Triple::new(0, 0, 1),
                Triple::new(1, 1, 2),
                Triple::new(2, 2, 3),
                Triple::new(0, 2, 2),
            ],
        )
        .unwrap();
        let aug = kg.augment_inverses().unwrap();
        let rg = build_relation_graph(&aug).unwrap();
        let t = RelGraphTopology::from_graph(&rg);
        let mut store = ParamStore::new();
        let params = oracle_params(&mut store, 2, 2);
        let base = encode_relations(&store, &t, 1, &params).unwrap();

        // Relabel relations with a random permutation and re-encode.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = rg.num_rel_nodes();
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let permuted = RelGraphTopology {
            num_nodes: n,
            src: t.src.iter().map(|&s| perm[s]).collect(),
            edge_type: t.edge_type.clone(),
            dst: t.dst.iter().map(|&d| perm[d]).collect(),
        };
        let out = encode_relations(&store, &permuted, perm[1], &params).unwrap();
        for r in 0..n {
            assert_eq!(base.matrix.row(r), out.matrix.row(perm[r]), "row {r}");
        }
    }

    #[test]
    fn query_out_of_range_rejected() {
        let mut store = ParamStore::new();
        let params = oracle_params(&mut store, 1, 2);
        assert!(encode_relations(&store, &topo(2, &[]), 2, &params).is_err());
    }

    #[test]
    fn zero_type_embeddings_leave_only_boundary() {
        let mut store = ParamStore::new();
        let params = oracle_params(&mut store, 2, 2);
        store.get_mut(params.edge_type_embeddings).value.fill(0.0);
        let t = topo(3, &[(0, 0, 1), (1, 2, 2)]);
        let embs = encode_relations(&store, &t, 0, &params).unwrap();
        assert_eq!(embs.matrix.row(0), &[1.0, 1.0]);
        assert_eq!(embs.matrix.row(1), &[0.0, 0.0]);
        assert_eq!(embs.matrix.row(2), &[0.0, 0.0]);
    }

    #[test]
    fn output_shape() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = RelationEncoderParams::init(&mut store, 3, 6, &mut rng).unwrap();
        let t = topo(5, &[(0, 0, 1), (1, 1, 2), (3, 3, 4)]);
        let embs = encode_relations(&store, &t, 3, &params).unwrap();
        assert_eq!(embs.matrix.shape(), (5, 6));
        assert!(embs.matrix.all_finite());
    }
}
