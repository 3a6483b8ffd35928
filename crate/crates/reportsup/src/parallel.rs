//! Multi-threaded versions of core kernels that reproduce the serial
//! results bit for bit.

use rayon::prelude::*;

use reportsup_core::ball_loss::{direct_score, BallKernel};
use reportsup_core::sum::{combine_tree, pairwise_sum, LEAF};
use reportsup_core::{Mask, ProbGrid, Result, VoxelGrid};

/// [`reportsup_core::ball_loss::ball_convolve`] computed one `h` slice per task.
pub fn ball_convolve_par(probs: &ProbGrid, kernel: &BallKernel) -> Result<ProbGrid> {
    if probs.spacing() != kernel.spacing() {
        return Err(reportsup_core::Error::SpacingMismatch { left: probs.spacing().0, right: kernel.spacing().0 });
    }
    let shape = probs.shape();
    let slice = shape.w * shape.l;
    let taps = kernel.taps();
    let mut out = vec![0.0; shape.len()];
    out.par_chunks_mut(slice).enumerate().for_each(|(h, chunk)| {
        for (j, v) in chunk.iter_mut().enumerate() {
            *v = direct_score(probs, &taps, [h, j / shape.l, j % shape.l]);
        }
    });
    VoxelGrid::new(shape, probs.spacing(), out)
}

/// [`pairwise_sum`] with leaves summed concurrently.
pub fn pairwise_sum_par(values: &[f64]) -> f64 {
    if values.len() <= LEAF {
        return pairwise_sum(values);
    }
    let partials: Vec<f64> = values.par_chunks(LEAF).map(pairwise_sum).collect();
    combine_tree(&partials)
}

/// `Σ t·o·v`, summed with the same tree as the serial version.
pub fn segmented_volume_par(probs: &ProbGrid, mask: &Mask) -> Result<f64> {
    probs.check_geometry(mask)?;
    let weighted: Vec<f64> = probs.data().par_iter().zip(mask.data()).map(|(t, o)| if *o != 0 { *t } else { 0.0 }).collect();
    Ok(pairwise_sum_par(&weighted) * probs.spacing().voxel_volume())
}
