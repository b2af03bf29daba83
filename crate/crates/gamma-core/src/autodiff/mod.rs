//! Minimal reverse-mode differentiation substrate.
//!
//! The primitive set is exactly what the relation encoder, the entity
//! branches, the attention fusion, and the training loss need: dense affine
//! maps, elementwise arithmetic, relu, row softmax, row L2 normalization,
//! cosine similarity, concat, scatter/gather, the algebra products, and a
//! stable weighted BCE-from-logits. Execution order is fixed by tape
//! insertion order so runs are bit-reproducible under a fixed seed.

mod store;
mod tape;
mod tensor;

pub use store::{uniform_embedding, xavier_uniform, xavier_uniform_gain, ParamId, ParamStore, Parameter};
pub use tape::{bce_with_logits, sigmoid, NodeId, Tape, TapeGrads};
pub use tensor::Tensor;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
}

/// Verify analytic gradients against central finite differences.
///
/// `loss_fn(store, with_grad)` must run a deterministic forward pass and
/// return the scalar loss; when `with_grad` is true it also returns the
/// parameter gradients produced by the tape. At most `max_coords` randomly
/// chosen coordinates are probed per trainable parameter with step `step`.
pub fn check_gradients<F>(
    store: &mut ParamStore,
    mut loss_fn: F,
    step: f64,
    max_coords: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, bool) -> Result<(f64, Vec<(ParamId, Tensor)>)>,
{
    let (loss0, grads) = loss_fn(store, true)?;
    if !loss0.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss0} before perturbation")));
    }

    // Dense analytic gradient per parameter (duplicate leaves summed).
    let mut analytic: Vec<Tensor> = store
        .iter()
        .map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols()))
        .collect();
    for (id, g) in grads {
        analytic[id.0].add_assign(&g);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let len = store.get(id).value.len();
        let mut coords: Vec<usize> = (0..len).collect();
        if len > max_coords {
            coords.shuffle(&mut rng);
            coords.truncate(max_coords);
            coords.sort_unstable();
        }
        for c in coords {
            let orig = store.get(id).value.data[c];
            store.get_mut(id).value.data[c] = orig + step;
            let (lp, _) = loss_fn(store, false)?;
            store.get_mut(id).value.data[c] = orig - step;
            let (lm, _) = loss_fn(store, false)?;
            store.get_mut(id).value.data[c] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "perturbed loss non-finite at {}[{c}]",
                    store.get(id).name
                )));
            }
            let numeric = (lp - lm) / (2.0 * step);
            let a = analytic[id.0].data[c];
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        coords_checked: checked,
    })
}
