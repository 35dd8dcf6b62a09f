use std::sync::Arc;

use parking_lot::RwLock;

use super::{FlatIndex, IndexError};

/// Copy-on-write handle for concurrent use: many readers holding snapshots,
/// one writer at a time. A snapshot never changes after it is taken.
#[derive(Debug, Clone)]
pub struct SharedIndex {
    inner: Arc<RwLock<Arc<FlatIndex>>>,
}

impl SharedIndex {
    pub fn new(index: FlatIndex) -> Self {
        Self {
            inner: Arc::new(RwLock::new(Arc::new(index))),
        }
    }

    pub fn snapshot(&self) -> Arc<FlatIndex> {
        Arc::clone(&self.inner.read())
    }

    /// Adds a row; readers see either the old or the new snapshot.
    pub fn add(&self, id: impl Into<String>, vector: &[f32]) -> Result<u64, IndexError> {
        let mut guard = self.inner.write();
        let mut next = FlatIndex::clone(&guard);
        let version = next.add(id, vector)?;
        *guard = Arc::new(next);
        Ok(version)
    }

    /// Replaces the whole index. The version counter keeps increasing across
    /// replacements.
    pub fn replace(&self, mut index: FlatIndex) -> u64 {
        let mut guard = self.inner.write();
        let version = guard.version().max(index.version()) + 1;
        index.set_version(version);
        *guard = Arc::new(index);
        version
    }

    /// Replaces the whole index keeping its version as is (session restore).
    pub fn replace_exact(&self, index: FlatIndex) {
        *self.inner.write() = Arc::new(index);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::thread;

    fn unit(dim: usize, hot: usize) -> Vec<f32> {
        let mut v = vec![0.0; dim];
        v[hot] = 1.0;
        v
    }

    #[test]
    fn snapshots_are_stable_under_writes() {
        let shared = SharedIndex::new(FlatIndex::build(4, [("a", unit(4, 0))]).unwrap());
        let before = shared.snapshot();
        shared.add("b", &unit(4, 1)).unwrap();
        assert_eq!(before.len(), 1);
        assert_eq!(shared.snapshot().len(), 2);
        assert_eq!(shared.snapshot().version(), 1);
    }

    #[test]
    fn concurrent_adds_of_same_id_yield_one_winner() {
        let shared = SharedIndex::new(FlatIndex::new(4));
        let results: Vec<_> = (0..8)
            .map(|_| {
                let s = shared.clone();
                thread::spawn(move || s.add("dup", &unit(4, 2)).is_ok())
            })
            .collect::<Vec<_>>()
            .into_iter()
            .map(|h| h.join().unwrap())
            .collect();
        assert_eq!(results.iter().filter(|&&ok| ok).count(), 1);
        assert_eq!(shared.snapshot().len(), 1);
    }

    #[test]
    fn readers_never_see_torn_state() {
        let shared = SharedIndex::new(FlatIndex::new(8));
        let writer = {
            let s = shared.clone();
            thread::spawn(move || {
                for i in 0..200 {
                    s.add(format!("id{i}"), &unit(8, i % 8)).unwrap();
                }
            })
        };
        for _ in 0..200 {
            let snap = shared.snapshot();
            assert_eq!(snap.len() as u64, snap.version());
            assert_eq!(snap.ids().len(), snap.len());
        }
        writer.join().unwrap();
        assert_eq!(shared.snapshot().len(), 200);
    }

    #[test]
    fn replace_bumps_version() {
        let shared = SharedIndex::new(FlatIndex::new(4));
        shared.add("a", &unit(4, 0)).unwrap();
        let v = shared.replace(FlatIndex::new(4));
        assert_eq!(v, 2);
        assert!(shared.snapshot().is_empty());
    }
}
