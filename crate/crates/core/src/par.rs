//! Order-preserving fan-out over scoped threads.

/// Applies `f` to every item on up to `threads` workers (contiguous chunks)
/// and returns results in input order. The first error wins by index.
pub(crate) fn map<T, R, E, F>(items: &[T], threads: usize, f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<R>, E>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                scope.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, t)| f(c * chunk + j, t))
                        .collect::<Result<Vec<R>, E>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    #[test]
    fn preserves_order_and_reports_first_error() {
        let items: Vec<usize> = (0..37).collect();
        for threads in [1, 2, 5, 64] {
            let out: Result<Vec<usize>, ()> = super::map(&items, threads, |i, &v| Ok(i * 100 + v));
            assert_eq!(out.unwrap(), (0..37).map(|i| i * 101).collect::<Vec<_>>());
            let err = super::map(&items, threads, |i, _| if i >= 20 { Err(i) } else { Ok(i) });
            assert_eq!(err, Err(20));
        }
        let empty: Vec<u8> = vec![];
        assert_eq!(super::map(&empty, 4, |_, &v| Ok::<_, ()>(v)).unwrap(), Vec::<u8>::new());
    }
}
