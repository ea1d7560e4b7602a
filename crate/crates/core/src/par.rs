use rayon::prelude::*;

/// Maps `f` over `0..n` on at most `width` threads; output order follows the index.
pub fn map_indexed<T, F>(width: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if width <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(width).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(e) => {
            tracing::warn!("falling back to sequential execution: {e}");
            (0..n).map(f).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn preserves_order() {
        let seq = super::map_indexed(1, 50, |i| i * i);
        let par = super::map_indexed(8, 50, |i| i * i);
        assert_eq!(seq, par);
    }
}
