use std::sync::Arc;

use crate::error::{Error, Result};

/// Name-keyed table of interchangeable strategies.
pub struct Registry<S: ?Sized> {
    kind: &'static str,
    entries: Vec<(&'static str, Arc<S>)>,
}

impl<S: ?Sized> Registry<S> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Registers `strategy` under `name`, replacing an earlier entry.
    pub fn register(&mut self, name: &'static str, strategy: Arc<S>) -> &mut Self {
        self.entries.retain(|(n, _)| *n != name);
        self.entries.push((name, strategy));
        self
    }

    pub fn with(mut self, name: &'static str, strategy: Arc<S>) -> Self {
        self.register(name, strategy);
        self
    }

    pub fn get(&self, name: &str) -> Result<Arc<S>> {
        self.entries
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, s)| Arc::clone(s))
            .ok_or_else(|| Error::UnknownName {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| *n == name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|(n, _)| *n).collect()
    }
}
