//! Multi-graph pretraining: proportional graph sampling, negative
//! corruption, self-adversarial weighted cross-entropy, the entropy-
//! regularized total loss, AdamW, gradient accumulation, and
//! validation-guided checkpoint selection.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{bce_with_logits, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::eval::{evaluate_queries, FilterIndex};
use crate::kgstore::{DatasetSplit, KnowledgeGraph, Triple};
use crate::model::{GammaModel, GraphContext};

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub num_negatives: usize,
    pub adv_temperature: f64,
    pub grad_accum: usize,
    pub aux_weight: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Hide each batch row's positive edge (and its inverse) from that
    /// row's propagation, so training cannot shortcut by reading the answer
    /// off the graph. Disable only for memorization fixtures.
    pub remove_batch_edges: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 10,
            steps_per_epoch: 100,
            batch_size: 64,
            num_negatives: 128,
            adv_temperature: 1.0,
            grad_accum: 1,
            aux_weight: 1.0,
            weight_decay: 0.0,
            seed: 0,
            remove_batch_edges: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.num_negatives < 1 {
            return Err(Error::Config("num_negatives must be at least 1".into()));
        }
        if self.adv_temperature < 0.0 {
            return Err(Error::Config("adv_temperature must be non-negative".into()));
        }
        if self.aux_weight < 0.0 {
            return Err(Error::Config("aux_weight must be non-negative".into()));
        }
        if self.grad_accum < 1 {
            return Err(Error::Config("grad_accum must be at least 1".into()));
        }
        if self.epochs < 1 || self.steps_per_epoch < 1 {
            return Err(Error::Config("epochs and steps_per_epoch must be at least 1".into()));
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let first = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let second = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            first,
            second,
        }
    }

    /// One update from the accumulated gradients; gradients are not reset.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if !store.get(id).trainable {
                continue;
            }
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            let p = store.get_mut(id);
            for i in 0..p.value.len() {
                let g = p.grad.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.value.data[i] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.value.data[i]);
            }
        }
    }
}

/// Sample a graph index with probability proportional to its triple count.
pub fn sample_training_graph(triple_counts: &[usize], rng: &mut impl Rng) -> Result<usize> {
    let total: usize = triple_counts.iter().sum();
    if total == 0 {
        return Err(Error::Rejected("all training graphs are empty".into()));
    }
    let mut draw = rng.gen_range(0..total);
    for (i, &c) in triple_counts.iter().enumerate() {
        if draw < c {
            return Ok(i);
        }
        draw -= c;
    }
    unreachable!("draw bounded by total")
}

/// Whether a negative corrupted the head or the tail slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionSide {
    Head,
    Tail,
}

/// One training example: a positive triple (by augmented-triple index) and
/// its corrupted negatives.
#[derive(Debug, Clone)]
pub struct BatchRow {
    pub triple_index: usize,
    pub positive: Triple,
    pub negatives: Vec<(CorruptionSide, Triple)>,
}

/// Draw `batch_size` positives uniformly from the graph's triples and
/// corrupt each into `num_negatives` negatives: a fair coin picks head or
/// tail, the entity is uniform, and resampling avoids reproducing the
/// positive itself.
pub fn build_batch(
    kg: &KnowledgeGraph,
    rng: &mut impl Rng,
    batch_size: usize,
    num_negatives: usize,
) -> Result<Vec<BatchRow>> {
    if kg.num_triples() == 0 {
        return Err(Error::Rejected("cannot sample from an empty graph".into()));
    }
    if kg.num_entities() < 2 {
        return Err(Error::Rejected(
            "negative corruption needs at least two entities".into(),
        ));
    }
    let mut rows = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let triple_index = rng.gen_range(0..kg.num_triples());
        let positive = kg.triples()[triple_index];
        let mut negatives = Vec::with_capacity(num_negatives);
        for _ in 0..num_negatives {
            let side = if rng.gen_bool(0.5) {
                CorruptionSide::Head
            } else {
                CorruptionSide::Tail
            };
            let corrupted = loop {
                let e = rng.gen_range(0..kg.num_entities());
                let cand = match side {
                    CorruptionSide::Head => Triple::new(e, positive.rel, positive.tail),
                    CorruptionSide::Tail => Triple::new(positive.head, positive.rel, e),
                };
                if cand != positive {
                    break cand;
                }
            };
            negatives.push((side, corrupted));
        }
        rows.push(BatchRow {
            triple_index,
            positive,
            negatives,
        });
    }
    Ok(rows)
}

/// Self-adversarial weights: the positive slot gets weight 1; negatives get
/// a row softmax of their scores over the adversarial temperature, or the
/// uniform 1/n_neg when the temperature is zero. Treated as constants.
pub fn self_adversarial_weights(scores: &Tensor, adv_temperature: f64) -> Tensor {
    let (rows, cols) = scores.shape();
    let n_neg = cols.saturating_sub(1);
    let mut out = Tensor::zeros(rows, cols);
    for i in 0..rows {
        out.set(i, 0, 1.0);
        if n_neg == 0 {
            continue;
        }
        if adv_temperature > 0.0 {
            let row = scores.row(i);
            let max = row[1..].iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for j in 1..cols {
                let e = ((row[j] - max) / adv_temperature).exp();
                out.set(i, j, e);
                sum += e;
            }
            for j in 1..cols {
                let v = out.at(i, j) / sum;
                out.set(i, j, v);
            }
        } else {
            for j in 1..cols {
                out.set(i, j, 1.0 / n_neg as f64);
            }
        }
    }
    out
}

/// Plain (non-tape) weighted BCE-with-logits: the mean over rows of the
/// weight-normalized per-row sums.
pub fn weighted_bce_loss(scores: &Tensor, targets: &Tensor, weights: &Tensor) -> Result<f64> {
    if scores.shape() != targets.shape() || scores.shape() != weights.shape() {
        return Err(Error::Shape("weighted_bce_loss: shapes differ".into()));
    }
    let (n, c) = scores.shape();
    let mut total = 0.0;
    for i in 0..n {
        let wsum: f64 = weights.row(i).iter().sum();
        if wsum <= 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for j in 0..c {
            acc += weights.at(i, j) * bce_with_logits(scores.at(i, j), targets.at(i, j));
        }
        total += acc / wsum;
    }
    Ok(total / n.max(1) as f64)
}

/// Total objective: main loss minus the weighted entropy bonus.
pub fn total_loss(l_main: f64, l_ent: f64, beta: f64, aux_weight: f64) -> f64 {
    l_main - aux_weight * beta * l_ent
}

/// Checkpoint bookkeeping for validation-guided selection.
#[derive(Debug, Clone, Serialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub path: PathBuf,
    pub per_dataset_mrr: Vec<(String, f64)>,
    pub mean_valid_mrr: f64,
}

/// One training-log record.
#[derive(Debug, Clone, Serialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub graph: usize,
    pub l_main: f64,
    pub l_ent: f64,
    pub l_total: f64,
}

/// Result of a pretraining run.
#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoints: Vec<CheckpointMeta>,
    pub best: CheckpointMeta,
    /// Main loss of the final step, for convergence tests.
    pub last_main_loss: f64,
    /// Mean attention entropy over the final epoch's steps.
    pub last_epoch_mean_entropy: f64,
}

struct TrainGraph {
    ctx: GraphContext,
}

/// Loss terms of a single batch (values only; gradients go to the store).
pub struct BatchLosses {
    pub main: f64,
    pub entropy: f64,
}

/// Multi-graph pretraining. Trains on each dataset's train graph, saves a
/// checkpoint per epoch, evaluates mean validation MRR per checkpoint (after
/// reloading it from disk, so the number describes the artifact), and
/// returns the best.
pub fn pretrain(
    model: &mut GammaModel,
    datasets: &[DatasetSplit],
    cfg: &TrainConfig,
    checkpoint_dir: &Path,
    mut log: Option<&mut dyn Write>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Config("no training datasets".into()));
    }
    for split in datasets {
        if split.valid_queries.is_empty() {
            return Err(Error::Config(format!(
                "dataset `{}` has no validation queries for checkpoint selection",
                split.name
            )));
        }
    }
    std::fs::create_dir_all(checkpoint_dir)?;

    let graphs: Vec<TrainGraph> = datasets
        .iter()
        .map(|d| {
            Ok(TrainGraph {
                ctx: GraphContext::build(&d.train_graph)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let triple_counts: Vec<usize> = graphs.iter().map(|g| g.ctx.kg.num_triples()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizer = AdamW::new(&model.store, cfg.learning_rate, cfg.weight_decay);
    model.store.zero_grads();

    let mut checkpoints: Vec<CheckpointMeta> = Vec::new();
    let mut last_main_loss = f64::NAN;
    let mut last_epoch_mean_entropy = 0.0;
    let mut global_step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut entropy_acc = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            global_step += 1;
            let gi = sample_training_graph(&triple_counts, &mut rng)?;
            let losses = train_batch(model, &graphs[gi].ctx, cfg, &mut rng)?;
            if !losses.main.is_finite() {
                return Err(Error::NonFinite(format!(
                    "main loss at step {global_step} (graph {gi}, max |grad| {:.3e})",
                    model.store.max_grad_abs()
                )));
            }
            if global_step % cfg.grad_accum == 0 {
                optimizer.step(&mut model.store);
                model.store.zero_grads();
            }
            last_main_loss = losses.main;
            entropy_acc += losses.entropy;
            if let Some(log) = log.as_deref_mut() {
                let record = TrainLogRecord {
                    step: global_step,
                    graph: gi,
                    l_main: losses.main,
                    l_ent: losses.entropy,
                    l_total: total_loss(losses.main, losses.entropy, model.config.beta, cfg.aux_weight),
                };
                serde_json::to_writer(&mut *log, &record)
                    .map_err(|e| Error::State(format!("log write failed: {e}")))?;
                log.write_all(b"\n")?;
            }
        }
        last_epoch_mean_entropy = entropy_acc / cfg.steps_per_epoch as f64;

        // Save, reload, and score this epoch's checkpoint.
        let path = checkpoint_dir.join(format!("epoch{epoch}.ckpt"));
        model.save_checkpoint(&path)?;
        let snapshot = GammaModel::load_checkpoint(&path)?;
        let mut per_dataset = Vec::with_capacity(datasets.len());
        for split in datasets {
            let ctx = GraphContext::build(&split.inference_graph)?;
            let filter = FilterIndex::build(split);
            let (metrics, _) =
                evaluate_queries(&snapshot, &ctx, &split.valid_queries, split.task_mode, &filter)?;
            per_dataset.push((split.name.clone(), metrics.mrr));
        }
        let mean = per_dataset.iter().map(|(_, m)| m).sum::<f64>() / per_dataset.len() as f64;
        checkpoints.push(CheckpointMeta {
            epoch,
            path,
            per_dataset_mrr: per_dataset,
            mean_valid_mrr: mean,
        });
    }

    let best = checkpoints
        .iter()
        .max_by(|a, b| {
            a.mean_valid_mrr
                .partial_cmp(&b.mean_valid_mrr)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(b.epoch.cmp(&a.epoch)) // ties: earliest epoch wins
        })
        .expect("at least one epoch")
        .clone();

    Ok(PretrainOutcome {
        checkpoints,
        best,
        last_main_loss,
        last_epoch_mean_entropy,
    })
}

/// Forward/backward over one batch, accumulating parameter gradients scaled
/// by 1 / (batch_size * grad_accum).
fn train_batch(
    model: &mut GammaModel,
    ctx: &GraphContext,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLosses> {
    let rows = build_batch(&ctx.kg, rng, cfg.batch_size, cfg.num_negatives)?;
    let scale = 1.0 / (cfg.batch_size as f64 * cfg.grad_accum as f64);
    accumulate_row_gradients(model, ctx, &rows, cfg, scale, rng)
}

/// Forward/backward over explicit rows; every row's gradient is scaled by
/// `scale` before accumulation. Exposed so gradient-accumulation semantics
/// can be tested with a fixed row order.
pub fn accumulate_row_gradients(
    model: &mut GammaModel,
    ctx: &GraphContext,
    rows: &[BatchRow],
    cfg: &TrainConfig,
    scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<BatchLosses> {
    let num_rel = ctx.num_original_relations();
    let inverse_index = |i: usize| -> usize {
        let n = ctx.kg.num_triples() / 2;
        if i < n {
            i + n
        } else {
            i - n
        }
    };

    let mut main_acc = 0.0;
    let mut ent_acc = 0.0;
    for row in rows {
        let row_topo = if cfg.remove_batch_edges {
            ctx.entity_topo
                .without_triples(&[row.triple_index, inverse_index(row.triple_index)])
        } else {
            ctx.entity_topo.clone()
        };

        // Tail candidates share the forward query (h, r); head-corrupted
        // negatives are scored through the inverse query (t, r_inv).
        let mut tail_candidates = vec![row.positive.tail];
        let mut tail_slots = vec![0usize];
        let mut head_candidates = Vec::new();
        let mut head_slots = Vec::new();
        for (j, (side, neg)) in row.negatives.iter().enumerate() {
            match side {
                CorruptionSide::Tail => {
                    tail_candidates.push(neg.tail);
                    tail_slots.push(j + 1);
                }
                CorruptionSide::Head => {
                    head_candidates.push(neg.head);
                    head_slots.push(j + 1);
                }
            }
        }

        let mut tape = Tape::new(&model.store);
        let out_tail = model.forward_query(
            &mut tape,
            &ctx.rel_topo,
            &row_topo,
            row.positive.head,
            row.positive.rel,
            Some(&tail_candidates),
            true,
            rng,
        )?;
        let (scores_node, entropy_node) = if head_candidates.is_empty() {
            (out_tail.scores, out_tail.entropy)
        } else {
            let inv_rel = if row.positive.rel < num_rel {
                row.positive.rel + num_rel
            } else {
                row.positive.rel - num_rel
            };
            let out_head = model.forward_query(
                &mut tape,
                &ctx.rel_topo,
                &row_topo,
                row.positive.tail,
                inv_rel,
                Some(&head_candidates),
                true,
                rng,
            )?;
            let stacked = tape.concat_rows(&[out_tail.scores, out_head.scores])?;
            // Restore original slot order: stacked rows are tail candidates
            // then head candidates.
            let mut slot_of = vec![0usize; 1 + row.negatives.len()];
            for (pos, &slot) in tail_slots.iter().chain(head_slots.iter()).enumerate() {
                slot_of[slot] = pos;
            }
            let scores = tape.gather_rows(stacked, &slot_of)?;
            // Entropy averages over all scored entities; candidate counts
            // weight the two propagations.
            let total = (tail_candidates.len() + head_candidates.len()) as f64;
            let w_tail = tail_candidates.len() as f64 / total;
            let w_head = head_candidates.len() as f64 / total;
            let e_tail = tape.affine_scalar(out_tail.entropy, w_tail, 0.0);
            let e_head = tape.affine_scalar(out_head.entropy, w_head, 0.0);
            (scores, tape.add(e_tail, e_head)?)
        };

        let score_row = tape.transpose(scores_node);
        let cols = 1 + row.negatives.len();
        let mut targets = Tensor::zeros(1, cols);
        targets.set(0, 0, 1.0);
        let weights = self_adversarial_weights(tape.value(score_row), cfg.adv_temperature);
        let main = tape.weighted_bce(score_row, targets, weights)?;
        let neg_ent = tape.affine_scalar(entropy_node, -cfg.aux_weight * model.config.beta, 0.0);
        let row_loss = tape.add(main, neg_ent)?;

        main_acc += tape.value(main).item();
        ent_acc += tape.value(entropy_node).item();
        let grads = tape.param_grads(row_loss, scale)?;
        drop(tape);
        model.store.accumulate_grads(grads);
    }
    Ok(BatchLosses {
        main: main_acc / rows.len().max(1) as f64,
        entropy: ent_acc / rows.len().max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn graph_sampling_matches_edge_proportions() {
        let mut r = rng(0);
        let counts = [10usize, 30];
        let mut hits = [0usize; 2];
        for _ in 0..100_000 {
            hits[sample_training_graph(&counts, &mut r).unwrap()] += 1;
        }
        let f0 = hits[0] as f64 / 100_000.0;
        assert!((f0 - 0.25).abs() < 0.01, "{f0}");

        assert_eq!(sample_training_graph(&[7], &mut r).unwrap(), 0);

        let mut hits = [0usize; 2];
        for _ in 0..100_000 {
            hits[sample_training_graph(&[5, 5], &mut r).unwrap()] += 1;
        }
        let f0 = hits[0] as f64 / 100_000.0;
        assert!((f0 - 0.5).abs() < 0.01, "{f0}");

        assert!(sample_training_graph(&[0, 0], &mut r).is_err());
    }

    #[test]
    fn batch_negatives_corrupt_exactly_one_slot() {
        let (kg, _) = KnowledgeGraph::from_triples(3, 1, vec![Triple::new(0, 0, 1)]).unwrap();
        let mut r = rng(1);
        let rows = build_batch(&kg, &mut r, 1, 2).unwrap();
        assert_eq!(rows.len(), 1);
        let row = &rows[0];
        assert_eq!(row.positive, Triple::new(0, 0, 1));
        for (side, neg) in &row.negatives {
            assert_ne!(*neg, row.positive);
            match side {
                CorruptionSide::Head => {
                    assert_eq!(neg.tail, row.positive.tail);
                    assert_eq!(neg.rel, row.positive.rel);
                }
                CorruptionSide::Tail => {
                    assert_eq!(neg.head, row.positive.head);
                    assert_eq!(neg.rel, row.positive.rel);
                }
            }
        }
    }

    #[test]
    fn batch_slot_zero_is_the_positive_and_sides_are_fair() {
        let (kg, _) = KnowledgeGraph::from_triples(
            6,
            2,
            vec![
                Triple::new(0, 0, 1),
                Triple::new(1, 1, 2),
                Triple::new(2, 0, 3),
                Triple::new(3, 1, 4),
            ],
        )
        .unwrap();
        let mut r = rng(2);
        let mut heads = 0usize;
        let mut total = 0usize;
        for _ in 0..100 {
            for row in build_batch(&kg, &mut r, 10, 100).unwrap() {
                assert!(kg.triples().contains(&row.positive));
                assert_eq!(row.positive, kg.triples()[row.triple_index]);
                for (side, _) in &row.negatives {
                    if *side == CorruptionSide::Head {
                        heads += 1;
                    }
                    total += 1;
                }
            }
        }
        let frac = heads as f64 / total as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn batch_rejects_degenerate_graphs() {
        let (kg, _) = KnowledgeGraph::from_triples(1, 1, vec![Triple::new(0, 0, 0)]).unwrap();
        assert!(build_batch(&kg, &mut rng(0), 1, 1).is_err());
        let (empty, _) = KnowledgeGraph::from_triples(3, 1, vec![]).unwrap();
        assert!(build_batch(&empty, &mut rng(0), 1, 1).is_err());
    }

    #[test]
    fn adversarial_weights_examples() {
        // tau = 0: uniform negatives.
        let scores = Tensor::from_vec(1, 5, vec![3.0, 1.0, 2.0, -1.0, 0.5]).unwrap();
        let w = self_adversarial_weights(&scores, 0.0);
        assert_eq!(w.at(0, 0), 1.0);
        for j in 1..5 {
            assert_eq!(w.at(0, j), 0.25);
        }
        // tau = 1 with negative scores (0, ln 3): softmax = (0.25, 0.75).
        let scores = Tensor::from_vec(1, 3, vec![9.0, 0.0, 3.0f64.ln()]).unwrap();
        let w = self_adversarial_weights(&scores, 1.0);
        assert!((w.at(0, 1) - 0.25).abs() < 1e-12);
        assert!((w.at(0, 2) - 0.75).abs() < 1e-12);
        // Very high temperature flattens toward uniform.
        let scores = Tensor::from_vec(1, 4, vec![0.0, 5.0, -3.0, 1.0]).unwrap();
        let w = self_adversarial_weights(&scores, 1e6);
        for j in 1..4 {
            assert!((w.at(0, j) - 1.0 / 3.0).abs() < 1e-4);
        }
    }

    #[test]
    fn weighted_bce_examples() {
        let ln2 = 2.0f64.ln();
        let s = Tensor::scalar(0.0);
        let t = Tensor::scalar(1.0);
        let w = Tensor::scalar(1.0);
        assert!((weighted_bce_loss(&s, &t, &w).unwrap() - ln2).abs() < 1e-12);

        let s = Tensor::scalar(20.0);
        assert!(weighted_bce_loss(&s, &t, &w).unwrap() < 1e-8);

        // Zero-weight column vanishes.
        let s = Tensor::from_vec(1, 2, vec![0.3, 99.0]).unwrap();
        let t = Tensor::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let w = Tensor::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let single = weighted_bce_loss(&Tensor::scalar(0.3), &Tensor::scalar(1.0), &Tensor::scalar(1.0))
            .unwrap();
        assert!((weighted_bce_loss(&s, &t, &w).unwrap() - single).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 5.0, 0.0, 1.0), 1.0);
        let v = total_loss(1.0, 2.0f64.ln(), 0.01, 1.0);
        assert!((v - (1.0 - 0.0069314718)).abs() < 1e-9);
        // Raising entropy strictly decreases the total for beta > 0.
        assert!(total_loss(1.0, 0.9, 0.01, 1.0) > total_loss(1.0, 1.0, 0.01, 1.0));
    }

    #[test]
    fn adamw_single_step_hand_check() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::scalar(2.0)).unwrap();
        store.get_mut(p).grad = Tensor::scalar(0.5);
        let mut opt = AdamW::new(&store, 0.1, 0.0);
        opt.step(&mut store);
        // m = 0.05, v = 0.00025; bias-corrected m_hat = 0.5, v_hat = 0.25.
        // update = -0.1 * 0.5 / (0.5 + 1e-8).
        let expected = 2.0 - 0.1 * 0.5 / (0.25f64.sqrt() + 1e-8);
        assert!((store.get(p).value.item() - expected).abs() < 1e-12);

        // Decoupled decay subtracts lr * wd * w on top.
        let mut store2 = ParamStore::new();
        let p2 = store2.add("w", Tensor::scalar(2.0)).unwrap();
        store2.get_mut(p2).grad = Tensor::scalar(0.5);
        let mut opt2 = AdamW::new(&store2, 0.1, 0.01);
        opt2.step(&mut store2);
        let expected2 = expected - 0.1 * 0.01 * 2.0;
        assert!((store2.get(p2).value.item() - expected2).abs() < 1e-12);

        // Frozen parameters are untouched.
        let mut store3 = ParamStore::new();
        let p3 = store3.add("w", Tensor::scalar(2.0)).unwrap();
        store3.get_mut(p3).grad = Tensor::scalar(0.5);
        store3.get_mut(p3).trainable = false;
        let mut opt3 = AdamW::new(&store3, 0.1, 0.0);
        opt3.step(&mut store3);
        assert_eq!(store3.get(p3).value.item(), 2.0);
    }

    fn tiny_fixture() -> (GammaModel, GraphContext) {
        let triples = vec![
            Triple::new(0, 0, 1),
            Triple::new(1, 0, 2),
            Triple::new(2, 1, 3),
            Triple::new(3, 1, 4),
            Triple::new(4, 0, 0),
            Triple::new(0, 1, 2),
        ];
        let (kg, _) = KnowledgeGraph::from_triples(5, 2, triples).unwrap();
        let cfg = ModelConfig {
            d: 4,
            d_att: 4,
            rel_layers: 1,
            ent_layers: 2,
            attn_dropout: 0.0,
            ..ModelConfig::default()
        };
        let model = GammaModel::from_seed(cfg, 5).unwrap();
        let ctx = GraphContext::build(&kg).unwrap();
        (model, ctx)
    }

    #[test]
    fn gradient_accumulation_equals_full_batch() {
        let (model, ctx) = tiny_fixture();
        let cfg = TrainConfig {
            num_negatives: 4,
            ..TrainConfig::default()
        };
        let rows = build_batch(&ctx.kg, &mut rng(3), 4, cfg.num_negatives).unwrap();

        let mut full = model.clone();
        full.store.zero_grads();
        accumulate_row_gradients(&mut full, &ctx, &rows, &cfg, 1.0 / 4.0, &mut rng(9)).unwrap();

        let mut halves = model.clone();
        halves.store.zero_grads();
        accumulate_row_gradients(&mut halves, &ctx, &rows[..2], &cfg, 1.0 / 4.0, &mut rng(9)).unwrap();
        accumulate_row_gradients(&mut halves, &ctx, &rows[2..], &cfg, 1.0 / 4.0, &mut rng(9)).unwrap();

        for ((_, a), (_, b)) in full.store.iter().zip(halves.store.iter()) {
            for (x, y) in a.grad.data.iter().zip(&b.grad.data) {
                assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
            }
        }

        // And the optimizer steps agree.
        let mut opt_a = AdamW::new(&full.store, 0.01, 0.0);
        opt_a.step(&mut full.store);
        let mut opt_b = AdamW::new(&halves.store, 0.01, 0.0);
        opt_b.step(&mut halves.store);
        for ((_, a), (_, b)) in full.store.iter().zip(halves.store.iter()) {
            for (x, y) in a.value.data.iter().zip(&b.value.data) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adversarial_weights_are_constants_for_gradients() {
        // The analytic gradient must match finite differences computed with
        // the weights frozen at their unperturbed values; the weight path
        // contributes nothing.
        let (model, ctx) = tiny_fixture();
        let cfg = TrainConfig {
            num_negatives: 3,
            adv_temperature: 1.0,
            ..TrainConfig::default()
        };
        let rows = build_batch(&ctx.kg, &mut rng(4), 1, cfg.num_negatives).unwrap();
        let mut frozen_weights: Option<Tensor> = None;

        let mut eval = |store: &ParamStore,
                        with_grad: bool|
         -> (f64, Vec<(crate::autodiff::ParamId, Tensor)>) {
            let mut probe = model.clone();
            probe.store = store.clone();
            let row = &rows[0];
            let mut tape = Tape::new(&probe.store);
            let mut tail_candidates = vec![row.positive.tail];
            let mut head_candidates = Vec::new();
            for (side, neg) in &row.negatives {
                match side {
                    CorruptionSide::Tail => tail_candidates.push(neg.tail),
                    CorruptionSide::Head => head_candidates.push(neg.head),
                }
            }
            let out = probe
                .forward_query(
                    &mut tape,
                    &ctx.rel_topo,
                    &ctx.entity_topo,
                    row.positive.head,
                    row.positive.rel,
                    Some(&tail_candidates),
                    false,
                    &mut rng(0),
                )
                .unwrap();
            let scores = if head_candidates.is_empty() {
                out.scores
            } else {
                let two_r = 2 * ctx.num_original_relations();
                let inv = (row.positive.rel + ctx.num_original_relations()) % two_r;
                let out_h = probe
                    .forward_query(
                        &mut tape,
                        &ctx.rel_topo,
                        &ctx.entity_topo,
                        row.positive.tail,
                        inv,
                        Some(&head_candidates),
                        false,
                        &mut rng(0),
                    )
                    .unwrap();
                tape.concat_rows(&[out.scores, out_h.scores]).unwrap()
            };
            let score_row = tape.transpose(scores);
            let cols = tape.value(score_row).cols();
            let mut targets = Tensor::zeros(1, cols);
            targets.set(0, 0, 1.0);
            let weights = frozen_weights
                .get_or_insert_with(|| self_adversarial_weights(tape.value(score_row), 1.0))
                .clone();
            let loss_node = tape.weighted_bce(score_row, targets, weights).unwrap();
            let loss = tape.value(loss_node).item();
            let grads = if with_grad {
                tape.param_grads(loss_node, 1.0).unwrap()
            } else {
                Vec::new()
            };
            (loss, grads)
        };

        let mut store = model.store.clone();
        let (_, grads) = eval(&store, true);
        let mut analytic: Vec<Tensor> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
            .collect();
        for (id, g) in grads {
            analytic[id.index()].add_assign(&g);
        }
        // Probe the largest-gradient coordinate of every parameter; tiny
        // gradients are numerically indistinguishable from zero here.
        let step = 1e-4;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let (mut best_c, mut best_a) = (0usize, 0.0f64);
            for (c, &a) in analytic[id.index()].data.iter().enumerate() {
                if a.abs() > best_a.abs() {
                    best_a = a;
                    best_c = c;
                }
            }
            if best_a.abs() < 1e-5 {
                continue;
            }
            let orig = store.get(id).value.data[best_c];
            store.get_mut(id).value.data[best_c] = orig + step;
            let (lp, _) = eval(&store, false);
            store.get_mut(id).value.data[best_c] = orig - step;
            let (lm, _) = eval(&store, false);
            store.get_mut(id).value.data[best_c] = orig;
            let numeric = (lp - lm) / (2.0 * step);
            let rel = (best_a - numeric).abs() / numeric.abs().max(best_a.abs());
            assert!(
                rel < 1e-4,
                "param {} coord {best_c}: analytic {best_a} vs fd {numeric}",
                store.get(id).name
            );
        }
    }
}
