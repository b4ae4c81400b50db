//! Thin data-parallel helpers. With the `parallel` feature these dispatch to rayon;
//! without it they are plain sequential loops. Output order always matches input order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, preserving order.
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

/// Maps `f` over `0..n`, preserving order.
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

/// Element-wise sum of equally sized vectors. Each output element is accumulated in
/// slice order, so the result does not depend on thread scheduling.
pub fn sum_ordered(parts: &[Vec<f32>], len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; len];
    if parts.is_empty() {
        return out;
    }
    const CHUNK: usize = 4096;
    let body = |(ci, chunk): (usize, &mut [f32])| {
        let start = ci * CHUNK;
        for part in parts {
            let src = &part[start..start + chunk.len()];
            for (o, s) in chunk.iter_mut().zip(src) {
                *o += *s;
            }
        }
    };
    #[cfg(feature = "parallel")]
    out.par_chunks_mut(CHUNK).enumerate().for_each(body);
    #[cfg(not(feature = "parallel"))]
    out.chunks_mut(CHUNK).enumerate().for_each(body);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let xs: Vec<u32> = (0..1000).collect();
        let ys = map(&xs, |x| x * 2);
        assert!(ys.iter().enumerate().all(|(i, y)| *y == 2 * i as u32));
    }

    #[test]
    fn ordered_sum_matches_sequential() {
        let parts: Vec<Vec<f32>> = (0..7)
            .map(|p| (0..10_000).map(|i| ((i * 31 + p * 7) % 97) as f32 * 0.013).collect())
            .collect();
        let got = sum_ordered(&parts, 10_000);
        for i in 0..10_000 {
            let mut acc = 0.0f32;
            for p in &parts {
                acc += p[i];
            }
            assert_eq!(got[i].to_bits(), acc.to_bits());
        }
    }
}
