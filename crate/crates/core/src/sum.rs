//! Deterministic pairwise summation.
//!
//! The reduction tree depends only on the input length, so any caller that
//! evaluates the leaves concurrently and combines them with [`combine_tree`]
//! reproduces [`pairwise_sum`] bit for bit.

use alloc::vec::Vec;

/// Number of values summed sequentially at each leaf of the tree.
pub const LEAF: usize = 128;

fn leaf_sum(values: &[f64]) -> f64 {
    let mut acc = 0.0;
    for v in values {
        acc += *v;
    }
    acc
}

/// Sum of `values` using a fixed binary tree over `LEAF`-sized blocks.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= LEAF {
        return leaf_sum(values);
    }
    let partials: Vec<f64> = values.chunks(LEAF).map(leaf_sum).collect();
    combine_tree(&partials)
}

/// Pairwise sum of a mapped sequence; `f` is evaluated once per index in order.
pub fn pairwise_sum_by<F: FnMut(usize) -> f64>(len: usize, mut f: F) -> f64 {
    if len <= LEAF {
        let mut acc = 0.0;
        for i in 0..len {
            acc += f(i);
        }
        return acc;
    }
    let mut partials = Vec::with_capacity(len.div_ceil(LEAF));
    let mut start = 0;
    while start < len {
        let end = (start + LEAF).min(len);
        let mut acc = 0.0;
        for i in start..end {
            acc += f(i);
        }
        partials.push(acc);
        start = end;
    }
    combine_tree(&partials)
}

/// Combines per-leaf partial sums with the same tree [`pairwise_sum`] uses.
pub fn combine_tree(partials: &[f64]) -> f64 {
    match partials.len() {
        0 => 0.0,
        1 => partials[0],
        n => {
            let mid = n.div_ceil(2);
            combine_tree(&partials[..mid]) + combine_tree(&partials[mid..])
        }
    }
}
