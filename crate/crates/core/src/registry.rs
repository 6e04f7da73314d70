use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Anything that can be looked up by name.
pub trait Named {
    fn name(&self) -> &'static str;
}

/// Name-keyed set of strategy objects.
pub struct Registry<T: ?Sized + Named> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Arc<T>>,
}

impl<T: ?Sized + Named> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    /// Adds or replaces the entry under `item.name()`.
    pub fn register(&mut self, item: Arc<T>) {
        self.entries.insert(item.name(), item);
    }

    pub fn get(&self, name: &str) -> Result<Arc<T>> {
        self.entries.get(name).cloned().ok_or_else(|| {
            Error::config(format!(
                "unknown {} '{name}' (known: {})",
                self.kind,
                self.names().join(", ")
            ))
        })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct A;
    impl Named for A {
        fn name(&self) -> &'static str {
            "a"
        }
    }

    #[test]
    fn lookup_and_unknown_name() {
        let mut r: Registry<dyn Named> = Registry::new("thing");
        r.register(Arc::new(A));
        assert_eq!(r.get("a").unwrap().name(), "a");
        let err = r.get("b").err().unwrap().to_string();
        assert!(err.contains("unknown thing 'b'") && err.contains("known: a"), "{err}");
    }
}
