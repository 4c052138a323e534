//! Data-parallel helpers whose results do not depend on thread scheduling.
//!
//! Reductions split the input into fixed-size chunks, reduce each chunk
//! sequentially and combine the partial results in chunk order.

use rayon::prelude::*;

pub const CHUNK: usize = 256;

/// Order-preserving parallel map.
pub fn map_chunks<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.par_iter().map(f).collect()
}

/// Parallel fold with a fixed reduction tree. `fold` receives the global
/// index of each item.
pub fn fold_chunks<T, A>(
    items: &[T],
    init: impl Fn() -> A + Sync + Send,
    fold: impl Fn(&mut A, usize, &T) + Sync + Send,
    combine: impl Fn(A, A) -> A,
) -> A
where
    T: Sync,
    A: Send,
{
    let partials: Vec<A> = items
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut acc = init();
            for (j, item) in chunk.iter().enumerate() {
                fold(&mut acc, ci * CHUNK + j, item);
            }
            acc
        })
        .collect();
    partials.into_iter().reduce(combine).unwrap_or_else(init)
}
