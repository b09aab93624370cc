//! Fixed-capacity ring of hidden-state slots shared between the decode loop
//! and the distiller lane.
//!
//! The decode loop claims slots in cursor order and fills `h¹`, later `h^L`;
//! the lane writes the prediction and releases the slot once the row has been
//! trained on. A claim never overwrites an unreleased slot: it waits for the
//! release instead and counts the wait.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex, MutexGuard};

#[derive(Debug, Clone)]
pub struct Slot {
    pub step: usize,
    pub seq: usize,
    pub h1: Vec<f64>,
    pub hl: Vec<f64>,
    pub pred: Vec<f64>,
    pub has_hl: bool,
    pub has_pred: bool,
    live: bool,
}

#[derive(Debug)]
pub struct RingBuffer {
    slots: Vec<Mutex<Slot>>,
    released: Condvar,
    gate: Mutex<()>,
    cursor: AtomicUsize,
    blocked_claims: AtomicU64,
    overwrites: AtomicU64,
    width: usize,
}

impl RingBuffer {
    /// All slot storage is allocated here; claims only copy into it.
    pub fn new(capacity: usize, width: usize) -> Self {
        let capacity = capacity.max(1);
        let slot = Slot {
            step: 0,
            seq: 0,
            h1: vec![0.0; width],
            hl: vec![0.0; width],
            pred: vec![0.0; width],
            has_hl: false,
            has_pred: false,
            live: false,
        };
        Self {
            slots: (0..capacity).map(|_| Mutex::new(slot.clone())).collect(),
            released: Condvar::new(),
            gate: Mutex::new(()),
            cursor: AtomicUsize::new(0),
            blocked_claims: AtomicU64::new(0),
            overwrites: AtomicU64::new(0),
            width,
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn lock(&self, idx: usize) -> MutexGuard<'_, Slot> {
        self.slots[idx].lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Takes the next slot for `(step, seq)` and stores `h1` in it, waiting if
    /// the slot has not been released yet.
    pub fn claim(&self, step: usize, seq: usize, h1: &[f64]) -> usize {
        assert_eq!(h1.len(), self.width, "ring width");
        let idx = self.cursor.fetch_add(1, Ordering::Relaxed) % self.slots.len();
        let mut gate = self.gate.lock().unwrap_or_else(|e| e.into_inner());
        let mut waited = false;
        loop {
            {
                let mut s = self.lock(idx);
                if !s.live {
                    s.step = step;
                    s.seq = seq;
                    s.h1.copy_from_slice(h1);
                    s.has_hl = false;
                    s.has_pred = false;
                    s.live = true;
                    return idx;
                }
            }
            if !waited {
                self.blocked_claims.fetch_add(1, Ordering::Relaxed);
                waited = true;
            }
            gate = self.released.wait(gate).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn with_slot<R>(&self, idx: usize, f: impl FnOnce(&mut Slot) -> R) -> R {
        let mut s = self.lock(idx);
        if !s.live {
            self.overwrites.fetch_add(1, Ordering::Relaxed);
        }
        f(&mut s)
    }

    pub fn set_hl(&self, idx: usize, hl: &[f64]) {
        self.with_slot(idx, |s| {
            s.hl.copy_from_slice(hl);
            s.has_hl = true;
        });
    }

    pub fn set_pred(&self, idx: usize, pred: &[f64]) {
        self.with_slot(idx, |s| {
            s.pred.copy_from_slice(pred);
            s.has_pred = true;
        });
    }

    /// Marks the slot consumed and wakes a waiting claim.
    pub fn release(&self, idx: usize) {
        {
            let mut s = self.lock(idx);
            if !s.live {
                self.overwrites.fetch_add(1, Ordering::Relaxed);
            }
            s.live = false;
        }
        let _gate = self.gate.lock().unwrap_or_else(|e| e.into_inner());
        self.released.notify_all();
    }

    /// Claims that had to wait for a release.
    pub fn blocked_claims(&self) -> u64 {
        self.blocked_claims.load(Ordering::Relaxed)
    }

    /// Accesses to a slot that was not live; zero in a correct session.
    pub fn violations(&self) -> u64 {
        self.overwrites.load(Ordering::Relaxed)
    }

    pub fn live_slots(&self) -> usize {
        (0..self.slots.len()).filter(|&i| self.lock(i).live).count()
    }
}
