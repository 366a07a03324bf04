//! FIFO replay of single observations with temporal windows built on demand.
//!
//! Each environment observation is stored once behind an `Arc`; a transition
//! points at its own observation and at the next one, which is the same
//! allocation as the following transition's observation. Windows reach back
//! through earlier transitions of the same episode and repeat the episode's
//! first observation when they would cross its start.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::envs::{Action, Frame, Observation};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"FLAREBUF";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(
        "replay holds {have} usable transitions but {need} were requested; \
         run more warm-up steps (initial steps) before training"
    )]
    Insufficient { have: usize, need: usize },
    #[error("window length must be at least 1")]
    EmptyWindow,
    #[error("snapshot: {0}")]
    Snapshot(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Arc<Observation>,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Arc<Observation>,
    /// True termination; time-limit truncation is stored as `false`.
    pub done: bool,
    pub episode: u64,
}

#[derive(Clone, Debug)]
struct Slot {
    transition: Transition,
    /// Position of `obs` within its episode.
    step: usize,
}

/// A window is ordered oldest first and ends at the transition's frame.
pub type Window = Vec<Arc<Observation>>;

#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub obs: Vec<Window>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub next_obs: Vec<Window>,
    pub dones: Vec<bool>,
    /// Logical indices of the sampled transitions.
    pub indices: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    slots: Vec<Slot>,
    /// Logical index of the next push; the oldest stored is `next - len`.
    next: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "capacity must be positive");
        Self {
            capacity,
            slots: Vec::new(),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn oldest(&self) -> u64 {
        self.next - self.slots.len() as u64
    }

    fn slot(&self, logical: u64) -> &Slot {
        &self.slots[(logical % self.capacity as u64) as usize]
    }

    /// The transition stored at `logical`, if still present.
    pub fn get(&self, logical: u64) -> Option<&Transition> {
        (logical >= self.oldest() && logical < self.next).then(|| &self.slot(logical).transition)
    }

    pub fn push(&mut self, transition: Transition) {
        let step = match self.next.checked_sub(1).and_then(|i| self.get(i)) {
            Some(prev) if prev.episode == transition.episode && !prev.done => {
                self.slot(self.next - 1).step + 1
            }
            _ => 0,
        };
        let slot = Slot { transition, step };
        if self.slots.len() < self.capacity {
            self.slots.push(slot);
        } else {
            let i = (self.next % self.capacity as u64) as usize;
            self.slots[i] = slot;
        }
        self.next += 1;
    }

    /// Whether every observation a window of `n` ending at `logical` needs is
    /// still stored.
    fn usable(&self, logical: u64, n: usize) -> bool {
        let back = self.slot(logical).step.min(n - 1) as u64;
        logical >= self.oldest() + back
    }

    pub fn usable_len(&self, n: usize) -> usize {
        let oldest = self.oldest();
        let head = (0..(n as u64 - 1).min(self.slots.len() as u64))
            .filter(|&k| !self.usable(oldest + k, n))
            .count();
        self.slots.len() - head
    }

    /// Window of `n` observations ending at the transition's `obs`, or at its
    /// `next_obs` when `next` is set.
    pub fn window(&self, logical: u64, n: usize, next: bool) -> Window {
        let s = self.slot(logical).step;
        let end = s + usize::from(next);
        (0..n)
            .rev()
            .map(|k| {
                let step = end.saturating_sub(k);
                if step == s + 1 {
                    Arc::clone(&self.slot(logical).transition.next_obs)
                } else {
                    Arc::clone(&self.slot(logical - (s - step) as u64).transition.obs)
                }
            })
            .collect()
    }

    /// Uniform sampling with replacement over transitions whose windows fit.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        n: usize,
        rng: &mut R,
    ) -> Result<Batch, ReplayError> {
        if n == 0 {
            return Err(ReplayError::EmptyWindow);
        }
        let have = self.usable_len(n);
        if have < batch_size.max(1) {
            return Err(ReplayError::Insufficient {
                have,
                need: batch_size.max(1),
            });
        }
        let mut batch = Batch::default();
        let (lo, hi) = (self.oldest(), self.next);
        while batch.len() < batch_size {
            let i = rng.gen_range(lo..hi);
            if !self.usable(i, n) {
                continue;
            }
            let t = &self.slot(i).transition;
            batch.obs.push(self.window(i, n, false));
            batch.next_obs.push(self.window(i, n, true));
            batch.actions.push(t.action.clone());
            batch.rewards.push(t.reward);
            batch.dones.push(t.done);
            batch.indices.push(i);
        }
        Ok(batch)
    }

    /// Bytes held by distinct stored observations.
    pub fn observation_bytes(&self) -> usize {
        let mut seen = HashMap::new();
        for s in &self.slots {
            for o in [&s.transition.obs, &s.transition.next_obs] {
                seen.entry(Arc::as_ptr(o)).or_insert_with(|| o.byte_size());
            }
        }
        seen.values().sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ReplayError> {
        let mut w = Vec::new();
        self.write_snapshot(&mut w);
        fs::File::create(path)?.write_all(&w)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReplayError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::read_snapshot(&bytes)
    }

    /// Serializes into the versioned binary container, sharing observations.
    pub fn write_snapshot(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(SNAPSHOT_MAGIC);
        put_u32(out, SNAPSHOT_VERSION);
        put_u64(out, self.capacity as u64);
        put_u64(out, self.next);
        let order: Vec<&Slot> = (self.oldest()..self.next).map(|i| self.slot(i)).collect();
        let mut ids: HashMap<*const Observation, u64> = HashMap::new();
        let mut table: Vec<&Observation> = Vec::new();
        for s in &order {
            for o in [&s.transition.obs, &s.transition.next_obs] {
                ids.entry(Arc::as_ptr(o)).or_insert_with(|| {
                    table.push(o);
                    table.len() as u64 - 1
                });
            }
        }
        put_u64(out, table.len() as u64);
        for o in table {
            write_observation(out, o);
        }
        put_u64(out, order.len() as u64);
        for s in order {
            let t = &s.transition;
            put_u64(out, ids[&Arc::as_ptr(&t.obs)]);
            put_u64(out, ids[&Arc::as_ptr(&t.next_obs)]);
            match &t.action {
                Action::Continuous(v) => {
                    out.push(0);
                    put_f64s(out, v);
                }
                Action::Discrete(a) => {
                    out.push(1);
                    put_u64(out, *a as u64);
                }
            }
            put_f64(out, t.reward);
            out.push(u8::from(t.done));
            put_u64(out, t.episode);
            put_u64(out, s.step as u64);
        }
    }

    pub fn read_snapshot(bytes: &[u8]) -> Result<Self, ReplayError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(ReplayError::Snapshot("not a replay snapshot".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(ReplayError::Snapshot(format!(
                "unsupported version {version}, expected {SNAPSHOT_VERSION}"
            )));
        }
        let capacity = r.u64()? as usize;
        let next = r.u64()?;
        let table = (0..r.u64()?)
            .map(|_| read_observation(&mut r).map(Arc::new))
            .collect::<Result<Vec<_>, _>>()?;
        let lookup = |i: u64| {
            table
                .get(i as usize)
                .cloned()
                .ok_or_else(|| ReplayError::Snapshot(format!("observation {i} out of range")))
        };
        let count = r.u64()?;
        if capacity == 0
            || count as usize > capacity
            || count > next
            || ((count as usize) < capacity && next != count)
        {
            return Err(ReplayError::Snapshot("inconsistent sizes".into()));
        }
        let mut ordered = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let obs = lookup(r.u64()?)?;
            let next_obs = lookup(r.u64()?)?;
            let action = match r.u8()? {
                0 => Action::Continuous(r.f64s()?),
                1 => Action::Discrete(r.u64()? as usize),
                k => return Err(ReplayError::Snapshot(format!("unknown action tag {k}"))),
            };
            let reward = r.f64()?;
            let done = r.u8()? != 0;
            let episode = r.u64()?;
            let step = r.u64()? as usize;
            ordered.push(Slot {
                transition: Transition {
                    obs,
                    action,
                    reward,
                    next_obs,
                    done,
                    episode,
                },
                step,
            });
        }
        if r.pos != bytes.len() {
            return Err(ReplayError::Snapshot("trailing bytes".into()));
        }
        // Restore ring placement so logical indices keep their slots.
        let oldest = next - count;
        let mut slots: Vec<Option<Slot>> = vec![None; count as usize];
        for (k, slot) in ordered.into_iter().enumerate() {
            slots[((oldest + k as u64) % capacity as u64) as usize] = Some(slot);
        }
        let slots = slots
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| ReplayError::Snapshot("inconsistent ring layout".into()))?;
        Ok(Self {
            capacity,
            slots,
            next,
        })
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    put_u64(out, v.len() as u64);
    v.iter().for_each(|&x| put_f64(out, x));
}

fn write_observation(out: &mut Vec<u8>, o: &Observation) {
    match o {
        Observation::FullState(v) => {
            out.push(0);
            put_f64s(out, v);
        }
        Observation::PositionOnly(v) => {
            out.push(1);
            put_f64s(out, v);
        }
        Observation::Pixels(f) => {
            out.push(2);
            put_u64(out, f.height as u64);
            put_u64(out, f.width as u64);
            f.data
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
    }
}

fn read_observation(r: &mut Reader) -> Result<Observation, ReplayError> {
    Ok(match r.u8()? {
        0 => Observation::FullState(r.f64s()?),
        1 => Observation::PositionOnly(r.f64s()?),
        2 => {
            let height = r.u64()? as usize;
            let width = r.u64()? as usize;
            let raw = r.take(
                height
                    .checked_mul(width)
                    .and_then(|n| n.checked_mul(4))
                    .ok_or_else(|| ReplayError::Snapshot("frame size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Observation::Pixels(Frame {
                height,
                width,
                data,
            })
        }
        k => {
            return Err(ReplayError::Snapshot(format!(
                "unknown observation tag {k}"
            )))
        }
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ReplayError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| ReplayError::Snapshot("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ReplayError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ReplayError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ReplayError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ReplayError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>, ReplayError> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() / 8 {
            return Err(ReplayError::Snapshot("truncated".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}
