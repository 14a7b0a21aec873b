//! Per-frame encoder results kept across streaming steps.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::patch::{EncodedFrame, FrameKey};

/// Encoded frames keyed by `(camera, timestep)`. Frames older than the
/// longest context reach are evicted as time advances.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    entries: BTreeMap<FrameKey, EncodedFrame>,
    horizon: usize,
    pub hits: usize,
    pub misses: usize,
}

impl FeatureCache {
    /// `horizon` is the oldest offset a context window can reach, `k_w * n_w`.
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon,
            ..Self::default()
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &FrameKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&self, key: &FrameKey) -> Option<&EncodedFrame> {
        self.entries.get(key)
    }

    /// Lookup that updates the hit and miss counters.
    pub fn hit(&mut self, key: &FrameKey) -> Option<&EncodedFrame> {
        match self.entries.get(key) {
            Some(e) => {
                self.hits += 1;
                Some(e)
            }
            None => {
                self.misses += 1;
                None
            }
        }
    }

    /// Mutable access, mainly for fault injection in tests.
    pub fn get_mut(&mut self, key: &FrameKey) -> Option<&mut EncodedFrame> {
        self.entries.get_mut(key)
    }

    /// Stores an entry after checking that it agrees in shape with the rest.
    pub fn insert(&mut self, key: FrameKey, e: EncodedFrame) -> Result<()> {
        if let Some(other) = self.entries.values().next() {
            let (a, b) = (other.fmap.features.shape(), e.fmap.features.shape());
            if a[0] != b[0] {
                return Err(Error::CacheIntegrity(format!(
                    "feature channels {} for camera {} timestep {} differ from cached {}",
                    b[0], key.camera_id, key.timestep, a[0]
                )));
            }
        }
        self.entries.insert(key, e);
        Ok(())
    }

    /// Drops entries no context window at timestep `t` or later can reach.
    pub fn evict(&mut self, t: usize) {
        let oldest = t.saturating_sub(self.horizon);
        self.entries.retain(|k, _| k.timestep >= oldest);
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }

    pub fn keys(&self) -> impl Iterator<Item = &FrameKey> {
        self.entries.keys()
    }
}
