//! Full model assembly: relation encoder, parallel entity branches, and
//! attention fusion, plus checkpoint save/load.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::algebra::BranchKind;
use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::entnet::{propagate_branch_on_tape, BranchConfig, EntityGraphTopology};
use crate::error::{Error, Result};
use crate::fusion::{compute_attention, fuse_and_score, score_states, FusionMode, FusionParams};
use crate::kgstore::{build_relation_graph, KnowledgeGraph};
use crate::relnet::{encode_relations_on_tape, RelGraphTopology, RelationEncoderParams};

/// Model hyperparameters. These are echoed into every checkpoint and must
/// match when a checkpoint is loaded for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub d_att: usize,
    pub rel_layers: usize,
    pub ent_layers: usize,
    pub branches: Vec<BranchKind>,
    pub fusion_mode: FusionMode,
    pub kappa: f64,
    pub lambda_mix: f64,
    pub attn_dropout: f64,
    pub beta: f64,
    pub score_real_part_only: bool,
    /// Test hook: disables learned updates in both message passes.
    pub oracle_mode: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_att: 64,
            rel_layers: 6,
            ent_layers: 6,
            branches: vec![BranchKind::Complex, BranchKind::SplitComplex],
            fusion_mode: FusionMode::Full,
            kappa: 0.5,
            lambda_mix: 0.2,
            attn_dropout: 0.1,
            beta: 0.01,
            score_real_part_only: false,
            oracle_mode: false,
        }
    }
}

impl ModelConfig {
    /// Feature width branch `k` contributes to the scorer input.
    fn branch_feature_width(&self, kind: BranchKind) -> usize {
        if self.score_real_part_only && kind.components() == 2 {
            self.d / 2
        } else {
            self.d
        }
    }

    /// Scorer input width for the configured fusion mode.
    pub fn psi_input_width(&self) -> Result<usize> {
        let widths: Vec<usize> = self
            .branches
            .iter()
            .map(|&k| self.branch_feature_width(k))
            .collect();
        if self.fusion_mode.sums_features() {
            let w = widths[0];
            if widths.iter().any(|&x| x != w) {
                return Err(Error::Config(
                    "summed fusion requires equal branch feature widths".into(),
                ));
            }
            Ok(w)
        } else {
            Ok(widths.iter().sum())
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("at least one branch is required".into()));
        }
        for &b in &self.branches {
            if !b.valid_width(self.d) {
                return Err(Error::Config(format!(
                    "width {} invalid for branch {}",
                    self.d,
                    b.name()
                )));
            }
        }
        if self.d < 2 || self.d_att < 1 || self.rel_layers < 1 || self.ent_layers < 1 {
            return Err(Error::Config("model dimensions out of range".into()));
        }
        if self.beta < 0.0 {
            return Err(Error::Config("beta must be non-negative".into()));
        }
        self.psi_input_width()?;
        Ok(())
    }

    /// Flat `key = value` block echoed into checkpoints and artifacts.
    pub fn to_text(&self) -> String {
        let branches: Vec<&str> = self.branches.iter().map(|b| b.name()).collect();
        format!(
            "d = {}\nd_att = {}\nrel_layers = {}\nent_layers = {}\nbranches = {}\n\
             fusion_mode = {}\nkappa = {}\nlambda = {}\nattn_dropout = {}\nbeta = {}\n\
             score_real_part_only = {}\n",
            self.d,
            self.d_att,
            self.rel_layers,
            self.ent_layers,
            branches.join(","),
            self.fusion_mode.as_str(),
            self.kappa,
            self.lambda_mix,
            self.attn_dropout,
            self.beta,
            self.score_real_part_only
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line `{line}`")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let parse_usize = |v: &str| -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected integer, got `{v}`")))
        };
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected number, got `{v}`")))
        };
        let parse_bool = |v: &str| -> Result<bool> {
            v.parse()
                .map_err(|_| Error::Config(format!("expected true/false, got `{v}`")))
        };
        match key {
            "d" => self.d = parse_usize(value)?,
            "d_att" => self.d_att = parse_usize(value)?,
            "rel_layers" => self.rel_layers = parse_usize(value)?,
            "ent_layers" => self.ent_layers = parse_usize(value)?,
            "branches" => {
                self.branches = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(BranchKind::parse)
                    .collect::<Result<Vec<_>>>()?;
            }
            "fusion_mode" => self.fusion_mode = FusionMode::parse(value)?,
            "kappa" => self.kappa = parse_f64(value)?,
            "lambda" => self.lambda_mix = parse_f64(value)?,
            "attn_dropout" => self.attn_dropout = parse_f64(value)?,
            "beta" => self.beta = parse_f64(value)?,
            "score_real_part_only" => self.score_real_part_only = parse_bool(value)?,
            other => return Err(Error::Config(format!("unknown model key `{other}`"))),
        }
        Ok(())
    }
}

/// Per-graph immutable context: the inverse-augmented graph and the two
/// message-passing topologies. Rebuilt for every target graph, which is what
/// makes zero-shot transfer possible.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub kg: KnowledgeGraph,
    pub entity_topo: EntityGraphTopology,
    pub rel_topo: RelGraphTopology,
}

impl GraphContext {
    /// Build from an unaugmented graph.
    pub fn build(kg: &KnowledgeGraph) -> Result<Self> {
        let aug = kg.augment_inverses()?;
        let rel_graph = build_relation_graph(&aug)?;
        Ok(Self {
            entity_topo: EntityGraphTopology::from_graph(&aug)?,
            rel_topo: RelGraphTopology::from_graph(&rel_graph),
            kg: aug,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.kg.num_entities()
    }

    /// Relation count before augmentation.
    pub fn num_original_relations(&self) -> usize {
        self.kg.num_relations() / 2
    }

    /// Relation count including inverses.
    pub fn num_relations(&self) -> usize {
        self.kg.num_relations()
    }
}

/// Scores and the attention entropy for one query.
pub struct QueryOutput {
    /// `[C x 1]` candidate scores.
    pub scores: NodeId,
    /// Scalar mean attention entropy over the scored entities.
    pub entropy: NodeId,
}

/// The assembled model: all trainable tensors plus the wiring config.
#[derive(Clone)]
pub struct GammaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub relnet: RelationEncoderParams,
    pub branches: Vec<BranchConfig>,
    pub fusion: FusionParams,
}

impl GammaModel {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut relnet = RelationEncoderParams::init(&mut store, config.rel_layers, config.d, rng)?;
        relnet.oracle_mode = config.oracle_mode;
        let mut branches = Vec::with_capacity(config.branches.len());
        for (i, &kind) in config.branches.iter().enumerate() {
            let mut b = BranchConfig::init(
                &mut store,
                &format!("branch{i}.{}", kind.name()),
                kind,
                config.ent_layers,
                config.d,
                rng,
            )?;
            b.oracle_mode = config.oracle_mode;
            branches.push(b);
        }
        let psi_in = config.psi_input_width()?;
        let psi_hidden = config.branches.len() * config.d;
        let fusion = FusionParams::init(
            &mut store,
            config.d,
            config.d_att,
            config.branches.len(),
            psi_in,
            psi_hidden,
            config.fusion_mode,
            config.kappa,
            config.lambda_mix,
            config.attn_dropout,
            rng,
        )?;
        Ok(Self {
            config,
            store,
            relnet,
            branches,
            fusion,
        })
    }

    pub fn from_seed(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(config, &mut rng)
    }

    /// Number of trainable scalars, total and grouped by component.
    pub fn param_count(&self) -> (usize, Vec<(String, usize)>) {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (_, p) in self.store.iter() {
            if !p.trainable {
                continue;
            }
            let group = p.name.split('.').next().unwrap_or("other").to_string();
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, n)) => *n += p.value.len(),
                None => groups.push((group, p.value.len())),
            }
        }
        (self.store.num_trainable_scalars(), groups)
    }

    /// Forward pass for one query `(head, r_q)`.
    ///
    /// With `candidates = None` every entity is scored, otherwise only the
    /// listed entities (in order). Attention dropout fires only when
    /// `training` is set. The entity topology is passed separately so the
    /// training loop can drop a batch edge from the message graph.
    pub fn forward_query<R: Rng>(
        &self,
        tape: &mut Tape,
        rel_topo: &RelGraphTopology,
        entity_topo: &EntityGraphTopology,
        head: usize,
        r_q: usize,
        candidates: Option<&[usize]>,
        training: bool,
        rng: &mut R,
    ) -> Result<QueryOutput> {
        let rel_embs = encode_relations_on_tape(tape, rel_topo, r_q, &self.relnet)?;
        let r_q_emb = tape.gather_rows(rel_embs, &[r_q])?;

        if self.config.fusion_mode == FusionMode::EarlyFusion {
            return self.forward_early_fusion(
                tape,
                entity_topo,
                head,
                r_q,
                rel_embs,
                r_q_emb,
                candidates,
                training,
                rng,
            );
        }

        let mut states = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let z = propagate_branch_on_tape(tape, entity_topo, rel_embs, (head, r_q), branch)?;
            let z = match candidates {
                Some(c) => tape.gather_rows(z, c)?,
                None => z,
            };
            states.push(z);
        }
        let att = compute_attention(
            tape,
            &states,
            r_q_emb,
            &self.fusion,
            self.config.fusion_mode,
            training,
            rng,
        )?;
        let slice_widths = self.real_slice_widths();
        let scores = fuse_and_score(
            tape,
            &att,
            &states,
            &self.fusion,
            self.config.fusion_mode,
            slice_widths.as_deref(),
        )?;
        Ok(QueryOutput {
            scores,
            entropy: att.entropy,
        })
    }

    fn real_slice_widths(&self) -> Option<Vec<usize>> {
        if self.config.score_real_part_only {
            Some(
                self.config
                    .branches
                    .iter()
                    .map(|&k| self.config.branch_feature_width(k))
                    .collect(),
            )
        } else {
            None
        }
    }

    /// Early fusion: branches are merged after every layer and the merged
    /// state feeds every branch's next layer; scoring consumes the final
    /// merged state. The reported entropy is the mean over layers.
    #[allow(clippy::too_many_arguments)]
    fn forward_early_fusion<R: Rng>(
        &self,
        tape: &mut Tape,
        topo: &EntityGraphTopology,
        head: usize,
        r_q: usize,
        rel_embs: NodeId,
        r_q_emb: NodeId,
        candidates: Option<&[usize]>,
        training: bool,
        rng: &mut R,
    ) -> Result<QueryOutput> {
        if head >= topo.num_entities {
            return Err(Error::Index(format!(
                "query head {head} out of range ({} entities)",
                topo.num_entities
            )));
        }
        let q_emb = tape.gather_rows(rel_embs, &[r_q])?;
        let boundary = tape.scatter_sum(q_emb, &[head], topo.num_entities)?;

        let layers = self.config.ent_layers;
        let mut state = boundary;
        let mut entropy_sum: Option<NodeId> = None;
        for layer in 0..layers {
            let mut branch_outs = Vec::with_capacity(self.branches.len());
            for branch in &self.branches {
                branch_outs.push(branch.layer_step(tape, topo, state, rel_embs, boundary, layer)?);
            }
            let att = compute_attention(
                tape,
                &branch_outs,
                r_q_emb,
                &self.fusion,
                FusionMode::EarlyFusion,
                training,
                rng,
            )?;
            // lambda-mixed weighted sum of the branch outputs, width d.
            let mut merged: Option<NodeId> = None;
            for (i, &out) in branch_outs.iter().enumerate() {
                let col = tape.slice_cols(att.weights, i, i + 1)?;
                let scaled = tape.scale_rows(out, col)?;
                merged = Some(match merged {
                    Some(acc) => tape.add(acc, scaled)?,
                    None => scaled,
                });
            }
            state = merged.expect("at least one branch");
            entropy_sum = Some(match entropy_sum {
                Some(acc) => tape.add(acc, att.entropy)?,
                None => att.entropy,
            });
        }
        let entropy = tape.affine_scalar(entropy_sum.expect("layers >= 1"), 1.0 / layers as f64, 0.0);

        let mut features = match candidates {
            Some(c) => tape.gather_rows(state, c)?,
            None => state,
        };
        if let Some(widths) = self.real_slice_widths() {
            features = tape.slice_cols(features, 0, widths[0])?;
        }
        let scores = score_states(tape, features, &self.fusion)?;
        Ok(QueryOutput { scores, entropy })
    }

    /// Score every entity for one query, outside any training loop.
    pub fn score_all(&self, ctx: &GraphContext, head: usize, r_q: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: dropout is off
        let out =
            self.forward_query(&mut tape, &ctx.rel_topo, &ctx.entity_topo, head, r_q, None, false, &mut rng)?;
        let scores = tape.value(out.scores);
        if !scores.all_finite() {
            return Err(Error::NonFinite(format!(
                "scores for query ({head}, {r_q})"
            )));
        }
        Ok(scores.data.clone())
    }

    /// Mean attention entropy when scoring all entities for one query, in
    /// evaluation mode.
    pub fn query_entropy(&self, ctx: &GraphContext, head: usize, r_q: usize) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out =
            self.forward_query(&mut tape, &ctx.rel_topo, &ctx.entity_topo, head, r_q, None, false, &mut rng)?;
        Ok(tape.value(out.entropy).item())
    }

    // ----- checkpoint io -----

    const MAGIC: &'static [u8; 8] = b"GAMMACK1";

    /// Write all parameters as little-endian f32 plus the config echo.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        let echo = self.config.to_text();
        buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        buf.extend_from_slice(echo.as_bytes());
        buf.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (_, p) in self.store.iter() {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
            for &v in &p.value.data {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Rebuild a model from a checkpoint file.
    pub fn load_checkpoint(path: &Path) -> Result<GammaModel> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Checkpoint("truncated checkpoint".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != Self::MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let read_u32 = |pos: &mut usize| -> Result<u32> {
            let s = take(pos, 4)?;
            Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]]))
        };
        let echo_len = read_u32(&mut pos)? as usize;
        let echo = String::from_utf8(take(&mut pos, echo_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("config echo is not utf-8".into()))?;
        let config = ModelConfig::from_text(&echo)?;
        let mut model = GammaModel::from_seed(config, 0)?;

        let count = read_u32(&mut pos)? as usize;
        if count != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {count} parameters, config implies {}",
                model.store.len()
            )));
        }
        let expected_names: Vec<String> = model.store.iter().map(|(_, p)| p.name.clone()).collect();
        for i in 0..count {
            let name_len = read_u32(&mut pos)? as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
            let rows = read_u32(&mut pos)? as usize;
            let cols = read_u32(&mut pos)? as usize;
            if name != expected_names[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {i} is `{name}`, expected `{}`",
                    expected_names[i]
                )));
            }
            let id = model
                .store
                .by_name(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
            let p = model.store.get_mut(id);
            if p.value.shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {rows}x{cols}, expected {:?}",
                    p.value.shape()
                )));
            }
            let raw = take(&mut pos, rows * cols * 4)?;
            for (j, chunk) in raw.chunks_exact(4).enumerate() {
                p.value.data[j] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
            }
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        Ok(model)
    }

    /// Truncate all parameters to f32 precision in place, so an in-memory
    /// model matches what a checkpoint round-trip would produce.
    pub fn quantize_to_f32(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            for v in self.store.get_mut(id).value.data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}
