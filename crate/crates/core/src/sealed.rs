use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Evaluation-only data that attack code must not read.
///
/// Every [`Sealed::reveal`] is counted, so tests can prove an attack ran
/// without touching the ground truth.
#[derive(Clone, Debug)]
pub struct Sealed<T> {
    value: T,
    reads: Arc<AtomicUsize>,
}

impl<T> Sealed<T> {
    pub fn new(value: T) -> Self {
        Self { value, reads: Arc::new(AtomicUsize::new(0)) }
    }

    /// Shares the read counter with another sealed value.
    pub fn with_counter(value: T, reads: Arc<AtomicUsize>) -> Self {
        Self { value, reads }
    }

    pub fn reveal(&self) -> &T {
        self.reads.fetch_add(1, Ordering::SeqCst);
        &self.value
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::SeqCst)
    }

    pub fn counter(&self) -> Arc<AtomicUsize> {
        Arc::clone(&self.reads)
    }
}

impl<T: PartialEq> PartialEq for Sealed<T> {
    fn eq(&self, other: &Self) -> bool {
        self.value == other.value
    }
}
