//! Finite-difference gradient verification.
//!
//! The checker re-derives gradients by central differences on sampled
//! parameter coordinates and reports the worst relative disagreement with
//! the analytic backward pass. The caller's store is left untouched; all
//! perturbation happens on an internal clone.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::diffcore::store::ParamStore;
use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Minimum coordinates sampled per tensor (all coordinates when the tensor
/// is smaller).
pub const DEFAULT_FD_COORDS: usize = 64;

/// Result of one finite-difference audit.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Worst relative error across all sampled coordinates.
    pub max_rel_err: f64,
    /// Number of coordinates compared.
    pub coords_checked: usize,
}

/// Relative error with a small-denominator guard.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Verifies analytic gradients of the scalar objective defined by `build`.
///
/// `build` receives a parameter store and must run the forward pass on a
/// fresh record, returning the record and the loss node. It is invoked once
/// for the analytic pass and twice per sampled coordinate for the central
/// differences. Sampling is deterministic in `seed`.
pub fn finite_diff_check<F>(
    store: &ParamStore,
    eps: f64,
    coords_per_tensor: usize,
    seed: u64,
    build: &mut F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Tape, NodeId)>,
{
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::Config(format!("fd eps must be > 0, got {eps}")));
    }
    if coords_per_tensor == 0 {
        return Err(Error::Config("fd coordinate budget must be >= 1".into()));
    }
    if store.tensor_count() == 0 {
        return Err(Error::Config("fd check on an empty parameter store".into()));
    }

    // Analytic gradients at the unperturbed point.
    let mut work = store.clone();
    work.zero_grads();
    let (mut tape, loss) = build(&work)?;
    tape.backward(loss, &mut work)?;
    let names = work.names();
    let analytic: Vec<(String, Tensor)> = names
        .iter()
        .map(|n| (n.clone(), work.grad(n).expect("grad slot").clone()))
        .collect();

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut checked = 0usize;

    let eval = |ps: &ParamStore, build: &mut F| -> Result<f64> {
        let (tape, loss) = build(ps)?;
        Ok(tape.value(loss)?.get(0, 0))
    };

    for (name, grad) in &analytic {
        let len = grad.len();
        let coords: Vec<usize> = if len <= coords_per_tensor {
            (0..len).collect()
        } else {
            rand::seq::index::sample(&mut rng, len, coords_per_tensor).into_vec()
        };
        for idx in coords {
            let base = work.get(name)?.data()[idx];
            work.value_mut(name)?.data_mut()[idx] = base + eps;
            let plus = eval(&work, build)?;
            work.value_mut(name)?.data_mut()[idx] = base - eps;
            let minus = eval(&work, build)?;
            work.value_mut(name)?.data_mut()[idx] = base;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[idx];
            worst = worst.max(rel_err(a, numeric));
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        max_rel_err: worst,
        coords_checked: checked,
    })
}
