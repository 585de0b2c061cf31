use std::sync::atomic::{AtomicUsize, Ordering};

/// Worker cap: `PHENO_THREADS` if set, else available parallelism.
pub fn max_threads() -> usize {
    match std::env::var("PHENO_THREADS") {
        Ok(v) => v.parse::<usize>().unwrap_or(1).max(1),
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    }
}

/// Map a function over indexed items on up to `max_threads()` workers.
/// Results come back in input order, so reductions stay deterministic.
pub fn parallel_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = max_threads().min(items.len().max(1));
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let slots_ptr = SlotWriter(slots.as_mut_ptr());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            let f = &f;
            let next = &next;
            let slots_ptr = &slots_ptr;
            scope.spawn(move || loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                // Each index is claimed exactly once, so writes never alias.
                unsafe { *slots_ptr.0.add(i) = Some(r) };
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

struct SlotWriter<R>(*mut Option<R>);
unsafe impl<R: Send> Sync for SlotWriter<R> {}

pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}
