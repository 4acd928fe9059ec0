//! Data-parallel helpers. Results always come back in index order, so the
//! parallel and sequential paths produce identical output.

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    /// Uses the rayon pool when the `parallel` feature is enabled and falls
    /// back to sequential execution otherwise.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

impl Exec {
    pub fn map<T, F>(self, range: std::ops::Range<usize>, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        match self {
            Exec::Sequential => range.map(f).collect(),
            Exec::Parallel => par_map(range, f),
        }
    }

    /// Like [`Exec::map`], reporting the first error in index order.
    pub fn try_map<T, F>(self, range: std::ops::Range<usize>, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        self.map(range, f).into_iter().collect()
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, F>(range: std::ops::Range<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    range.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, F>(range: std::ops::Range<usize>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    range.map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let seq = Exec::Sequential.map(0..1000, |i| i * i);
        let par = Exec::Parallel.map(0..1000, |i| i * i);
        assert_eq!(seq, par);
    }

    #[test]
    fn first_error_wins() {
        let r: Result<Vec<usize>> = Exec::Parallel.try_map(0..100, |i| {
            if i % 30 == 29 {
                Err(crate::Error::InvalidArgument(format!("{i}")))
            } else {
                Ok(i)
            }
        });
        assert_eq!(r.unwrap_err().to_string(), "invalid argument: 29");
    }
}
