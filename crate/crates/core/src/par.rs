//! Data-parallel helpers. With the `parallel` feature the `Parallel` mode
//! runs on rayon; without it every mode falls back to a sequential loop.
//! Results always come back in input order so reductions stay deterministic.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

impl Exec {
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

pub fn map_indexed<R, F>(exec: Exec, n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

pub fn map_slice<T, R, F>(exec: Exec, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Send + Sync,
{
    map_indexed(exec, items.len(), |i| f(i, &items[i]))
}

pub fn try_map_slice<T, R, E, F>(exec: Exec, items: &[T], f: F) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
    F: Fn(usize, &T) -> Result<R, E> + Send + Sync,
{
    map_slice(exec, items, f).into_iter().collect()
}

/// Consumes `items`, mapping each with its index.
pub fn map_vec<T, R, F>(exec: Exec, items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(usize, T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec == Exec::Parallel {
        use rayon::prelude::*;
        return items
            .into_par_iter()
            .enumerate()
            .map(|(i, t)| f(i, t))
            .collect();
    }
    let _ = exec;
    items
        .into_iter()
        .enumerate()
        .map(|(i, t)| f(i, t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let a = map_indexed(Exec::Sequential, 100, |i| i * i);
        let b = map_indexed(Exec::Parallel, 100, |i| i * i);
        assert_eq!(a, b);
        assert_eq!(a[7], 49);
        let v: Vec<String> = (0..20).map(|i| i.to_string()).collect();
        let s = map_vec(Exec::Sequential, v.clone(), |i, t| format!("{i}:{t}"));
        let p = map_vec(Exec::Parallel, v, |i, t| format!("{i}:{t}"));
        assert_eq!(s, p);
    }
}
