//! Name-keyed registries for interchangeable strategies.
//!
//! Normalization layers, fade-in policies, noise samplers, embedders and
//! distance functions are each selected by a string from the config file or
//! the command line. A registry maps those names to constructors that
//! produce a shared trait object.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

pub type Constructor<T> = fn() -> Arc<T>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Constructor<T>>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &'static str, ctor: Constructor<T>) -> Self {
        self.register(name, ctor);
        self
    }

    /// Registers `ctor` under `name`, replacing any previous entry.
    pub fn register(&mut self, name: &'static str, ctor: Constructor<T>) {
        self.entries.insert(name, ctor);
    }

    pub fn create(&self, name: &str) -> Result<Arc<T>> {
        self.entries
            .get(name)
            .map(|ctor| ctor())
            .ok_or_else(|| Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                known: self.names().join(", "),
            })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }

    pub fn kind(&self) -> &'static str {
        self.kind
    }
}
