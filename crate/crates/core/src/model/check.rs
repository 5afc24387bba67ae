//! Whole-model finite-difference gradient check.

use rayon::prelude::*;

use crate::autodiff::gradcheck::relative_error;
use crate::error::Result;
use crate::model::vit::ViTPModel;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Coordinates whose analytic gradient exceeded the threshold.
    pub checked: usize,
    /// Coordinates skipped for a gradient at or below the threshold.
    pub skipped: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares backprop gradients of the mean cross-entropy against central
/// differences for every trainable coordinate whose analytic gradient
/// magnitude exceeds `threshold`. Coordinates are spread over the rayon
/// pool; each worker perturbs its own copy of the model.
pub fn model_grad_check<T: Scalar>(
    model: &ViTPModel<T>,
    images: &Tensor<T>,
    labels: &[usize],
    eps: f64,
    threshold: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(images, labels, 0.0, None)?;
    let mut coords = Vec::new();
    let mut skipped = 0;
    for (p, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for (i, &gi) in g.iter().enumerate() {
            if gi.widen().abs() > threshold {
                coords.push((p, i, gi.widen()));
            } else {
                skipped += 1;
            }
        }
    }

    let chunk = coords.len().div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
    let errors: Vec<(f64, usize)> = coords
        .par_chunks(chunk)
        .enumerate()
        .map(|(c, part)| -> Result<Vec<(f64, usize)>> {
            let mut probe = model.clone();
            let mut out = Vec::with_capacity(part.len());
            for (k, &(p, i, analytic)) in part.iter().enumerate() {
                let orig = model.params().as_slice()[p].tensor.data()[i];
                let set = |probe: &mut ViTPModel<T>, x: T| {
                    probe.params_mut().as_mut_slice()[p].tensor.data_mut()[i] = x;
                };
                set(&mut probe, T::cast(orig.widen() + eps));
                let up = probe.loss(images, labels, 0.0)?.widen();
                set(&mut probe, T::cast(orig.widen() - eps));
                let down = probe.loss(images, labels, 0.0)?.widen();
                set(&mut probe, orig);
                let numeric = (up - down) / (2.0 * eps);
                out.push((relative_error(analytic, numeric, 1e-8), c * chunk + k));
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();

    let worst = errors
        .iter()
        .copied()
        .fold(None, |best: Option<(f64, usize)>, e| match best {
            Some(b) if b.0 >= e.0 => Some(b),
            _ => Some(e),
        });
    Ok(GradCheckReport {
        checked: coords.len(),
        skipped,
        max_rel_err: worst.map_or(0.0, |w| w.0),
        worst: worst.map(|(_, k)| {
            let (p, i, _) = coords[k];
            (model.params().as_slice()[p].name.clone(), i)
        }),
    })
}
