//! Bounded first-in-first-out store of per-slice projected feature maps.

use std::collections::BTreeMap;

use crate::volgrid::{SliceRef, VolumeId};
use crate::{Error, Result};

/// Feature map of one slice on the stride grid, row-major `[h, w, dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * dim {
            return Err(Error::Shape(format!(
                "feature map {height}x{width}x{dim} with {} values",
                data.len()
            )));
        }
        Ok(FeatureMap {
            height,
            width,
            dim,
            data,
        })
    }

    pub fn at(&self, y: usize, x: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    /// Bilinear sample at fractional cell coordinates, clamped to the map.
    pub fn sample_bilinear(&self, y: f64, x: f64, out: &mut [f32]) {
        let cy = y.clamp(0.0, (self.height - 1) as f64);
        let cx = x.clamp(0.0, (self.width - 1) as f64);
        let (y0, x0) = (cy.floor() as usize, cx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(self.height - 1), (x0 + 1).min(self.width - 1));
        let (fy, fx) = ((cy - y0 as f64) as f32, (cx - x0 as f64) as f32);
        let w = [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ];
        let taps = [self.at(y0, x0), self.at(y0, x1), self.at(y1, x0), self.at(y1, x1)];
        for (d, o) in out.iter_mut().enumerate() {
            *o = taps.iter().zip(&w).map(|(t, wi)| t[d] * wi).sum();
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    tick: u64,
    map: FeatureMap,
}

#[derive(Debug, Clone)]
pub struct FeatureBank {
    capacity: usize,
    fifo_strict: bool,
    entries: BTreeMap<SliceRef, Entry>,
    by_tick: BTreeMap<u64, SliceRef>,
    next_tick: u64,
}

/// `ceil(total_slices / 5)`.
pub fn default_capacity(total_slices: usize) -> usize {
    total_slices.div_ceil(5)
}

impl FeatureBank {
    /// With `fifo_strict`, updating an existing slice keeps its original
    /// insertion tick; otherwise the update counts as a fresh insertion.
    pub fn new(capacity: usize, fifo_strict: bool) -> Self {
        FeatureBank {
            capacity,
            fifo_strict,
            entries: BTreeMap::new(),
            by_tick: BTreeMap::new(),
            next_tick: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn fifo_strict(&self) -> bool {
        self.fifo_strict
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: SliceRef) -> bool {
        self.entries.contains_key(&key)
    }

    pub fn get(&self, key: SliceRef) -> Option<&FeatureMap> {
        self.entries.get(&key).map(|e| &e.map)
    }

    /// Keys from oldest to newest tick.
    pub fn keys_by_age(&self) -> Vec<SliceRef> {
        self.by_tick.values().copied().collect()
    }

    /// Volumes with at least one stored slice, ascending.
    pub fn volumes(&self) -> Vec<VolumeId> {
        let mut out: Vec<VolumeId> = Vec::new();
        for k in self.entries.keys() {
            if out.last() != Some(&k.volume_id) {
                out.push(k.volume_id);
            }
        }
        out
    }

    pub fn upsert(&mut self, key: SliceRef, map: FeatureMap) {
        let tick = self.next_tick;
        self.next_tick += 1;
        if let Some(e) = self.entries.get_mut(&key) {
            e.map = map;
            if !self.fifo_strict {
                self.by_tick.remove(&e.tick);
                e.tick = tick;
                self.by_tick.insert(tick, key);
            }
            return;
        }
        self.entries.insert(key, Entry { tick, map });
        self.by_tick.insert(tick, key);
        while self.entries.len() > self.capacity {
            let (_, oldest) = self.by_tick.pop_first().expect("non-empty");
            self.entries.remove(&oldest);
        }
    }

    /// Stored slice of `volume` whose index is within half a slice of
    /// `axial`; the nearer one wins, ties go to the lower index.
    pub fn lookup(&self, volume: VolumeId, axial: f64) -> Option<(SliceRef, &FeatureMap)> {
        if !axial.is_finite() || axial < -0.5 {
            return None;
        }
        let lo = axial.floor().max(0.0);
        let mut best: Option<(f64, SliceRef, &FeatureMap)> = None;
        for idx in [lo, lo + 1.0] {
            let d = (idx - axial).abs();
            if d > 0.5 || idx > u32::MAX as f64 {
                continue;
            }
            let key = SliceRef {
                volume_id: volume,
                slice_index: idx as u32,
            };
            if let Some(e) = self.entries.get(&key) {
                if best.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
                    best = Some((d, key, &e.map));
                }
            }
        }
        best.map(|(_, k, m)| (k, m))
    }

    /// Checks the capacity bound and the tick index. Used by tests.
    pub fn check_invariants(&self) -> Result<()> {
        if self.entries.len() > self.capacity {
            return Err(Error::Range {
                what: "bank size",
                value: self.entries.len(),
                limit: self.capacity,
            });
        }
        if self.by_tick.len() != self.entries.len()
            || self
                .by_tick
                .iter()
                .any(|(t, k)| self.entries.get(k).map(|e| e.tick) != Some(*t))
        {
            return Err(Error::Numeric("bank tick index out of sync".into()));
        }
        Ok(())
    }
}
