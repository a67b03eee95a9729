//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature the helpers dispatch to rayon; without it they
//! run the same closures in order. Reductions go through fixed-size chunks with
//! the partial results combined sequentially, so floating-point results are
//! identical regardless of thread count or feature selection.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Rows per chunk for deterministic reductions.
pub const REDUCE_CHUNK: usize = 512;

/// Map over a slice, preserving order.
pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Map over `0..n`, preserving order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Map over fixed-size chunks of `items`, preserving chunk order.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        items
            .par_chunks(chunk)
            .enumerate()
            .map(|(i, c)| f(i * chunk, c))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items
            .chunks(chunk)
            .enumerate()
            .map(|(i, c)| f(i * chunk, c))
            .collect()
    }
}

/// Deterministic vector-valued sum: each chunk yields a partial of length
/// `dim`, partials are added in chunk order.
pub fn chunked_sum<T, F>(items: &[T], dim: usize, f: F) -> Vec<f64>
where
    T: Sync,
    F: Fn(usize, &[T], &mut [f64]) + Sync + Send,
{
    let partials = map_chunks(items, REDUCE_CHUNK, |start, c| {
        let mut acc = vec![0.0; dim];
        f(start, c, &mut acc);
        acc
    });
    let mut total = vec![0.0; dim];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Whether the crate was built with rayon support.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v: Vec<usize> = (0..1000).collect();
        assert_eq!(
            map(&v, |x| x * 2),
            (0..1000).map(|x| x * 2).collect::<Vec<_>>()
        );
        assert_eq!(map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn chunked_sum_matches_sequential_chunking() {
        let v: Vec<f64> = (0..5000)
            .map(|i| (i as f64).sin() * 1e-3 + 1.0 / (i as f64 + 1.0))
            .collect();
        let s = chunked_sum(&v, 1, |_, c, acc| {
            for x in c {
                acc[0] += x;
            }
        });
        let mut expect = 0.0;
        for c in v.chunks(REDUCE_CHUNK) {
            let mut p = 0.0;
            for x in c {
                p += x;
            }
            expect += p;
        }
        assert_eq!(s[0].to_bits(), expect.to_bits());
    }
}
