//! Experience replay shared by all ensemble members.
//!
//! Each slot stores one transition plus a bit mask telling which members
//! may sample it, so K logical memories cost a single ring buffer.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::env::EgoAction;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{Reader, FORMAT_VERSION};
use crate::nn::Observation;

pub const REPLAY_MAGIC: &[u8; 8] = b"RPFREPL\0";
/// Members are tracked in a `u64` mask.
pub const MAX_MEMBERS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub observation: Arc<Observation>,
    pub action: EgoAction,
    pub reward: f64,
    pub next_observation: Arc<Observation>,
    /// No bootstrapping from `next_observation`.
    pub terminal: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedReplayMemory {
    capacity: usize,
    members: usize,
    slots: Vec<Experience>,
    masks: Vec<u64>,
    next: usize,
    eligible: Vec<usize>,
}

impl SharedReplayMemory {
    pub fn new(capacity: usize, members: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("replay capacity must be positive".into()));
        }
        if members == 0 || members > MAX_MEMBERS {
            return Err(Error::Config(format!("member count {members} outside 1..={MAX_MEMBERS}")));
        }
        Ok(SharedReplayMemory {
            capacity,
            members,
            slots: Vec::new(),
            masks: Vec::new(),
            next: 0,
            eligible: vec![0; members],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn members(&self) -> usize {
        self.members
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Number of slots member `k` may sample.
    pub fn eligible(&self, k: usize) -> usize {
        self.eligible[k]
    }

    pub fn get(&self, slot: usize) -> &Experience {
        &self.slots[slot]
    }

    pub fn mask(&self, slot: usize) -> u64 {
        self.masks[slot]
    }

    /// Stores `experience`, giving each member access with probability
    /// `p_add`. Returns the slot written.
    pub fn add<R: Rng + ?Sized>(&mut self, experience: Experience, p_add: f64, rng: &mut R) -> usize {
        let mut mask = 0u64;
        for k in 0..self.members {
            if rng.gen::<f64>() < p_add {
                mask |= 1 << k;
            }
        }
        self.insert(experience, mask)
    }

    /// Stores `experience` with an explicit membership mask.
    pub fn insert(&mut self, experience: Experience, mask: u64) -> usize {
        let mask = mask & self.member_bits();
        let slot = self.next;
        if slot < self.slots.len() {
            self.count(self.masks[slot], false);
            self.slots[slot] = experience;
            self.masks[slot] = mask;
        } else {
            self.slots.push(experience);
            self.masks.push(mask);
        }
        self.count(mask, true);
        self.next = (self.next + 1) % self.capacity;
        slot
    }

    fn member_bits(&self) -> u64 {
        if self.members == 64 {
            u64::MAX
        } else {
            (1u64 << self.members) - 1
        }
    }

    fn count(&mut self, mask: u64, added: bool) {
        for k in 0..self.members {
            if mask >> k & 1 == 1 {
                if added {
                    self.eligible[k] += 1;
                } else {
                    self.eligible[k] -= 1;
                }
            }
        }
    }

    /// Draws `batch` slot indices uniformly with replacement among the slots
    /// member `k` may use, or `None` while fewer than `batch` exist.
    pub fn sample<R: Rng + ?Sized>(&self, k: usize, batch: usize, rng: &mut R) -> Option<Vec<usize>> {
        if self.eligible[k] < batch.max(1) {
            return None;
        }
        let bit = 1u64 << k;
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            let slot = rng.gen_range(0..self.slots.len());
            if self.masks[slot] & bit != 0 {
                out.push(slot);
            }
        }
        Some(out)
    }

    /// Binary encoding. Observations shared between consecutive slots are
    /// written once.
    pub fn encode(&self) -> Vec<u8> {
        let mut table: HashMap<*const Observation, u32> = HashMap::new();
        let mut observations: Vec<&Observation> = Vec::new();
        let mut refs: Vec<(u32, u32)> = Vec::with_capacity(self.slots.len());
        for e in &self.slots {
            let mut pair = [0u32; 2];
            for (i, obs) in [&e.observation, &e.next_observation].into_iter().enumerate() {
                pair[i] = *table.entry(Arc::as_ptr(obs)).or_insert_with(|| {
                    observations.push(obs);
                    (observations.len() - 1) as u32
                });
            }
            refs.push((pair[0], pair[1]));
        }

        let mut out = Vec::new();
        out.extend_from_slice(REPLAY_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.members as u32).to_le_bytes());
        out.extend_from_slice(&(self.capacity as u64).to_le_bytes());
        out.extend_from_slice(&(self.next as u64).to_le_bytes());
        out.extend_from_slice(&(observations.len() as u64).to_le_bytes());
        for obs in &observations {
            let data = obs.as_slice();
            out.extend_from_slice(&(data.len() as u32).to_le_bytes());
            for x in data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.slots.len() as u64).to_le_bytes());
        for ((e, mask), (s, s2)) in self.slots.iter().zip(&self.masks).zip(refs) {
            out.extend_from_slice(&s.to_le_bytes());
            out.extend_from_slice(&s2.to_le_bytes());
            out.push(e.action.index() as u8);
            out.extend_from_slice(&e.reward.to_le_bytes());
            out.push(u8::from(e.terminal));
            out.extend_from_slice(&mask.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "replay memory";
        const SLOT_BYTES: usize = 4 + 4 + 1 + 8 + 1 + 8;
        let bad = |reason: String| Error::format(WHAT, reason);
        let mut r = Reader::new(bytes, WHAT);
        r.expect_magic(REPLAY_MAGIC)?;
        r.expect_version()?;
        let members = r.u32()? as usize;
        let capacity = r.u64()?;
        let next = r.u64()?;
        if members == 0 || members > MAX_MEMBERS {
            return Err(bad(format!("member count {members}")));
        }
        if capacity == 0 || capacity > u32::MAX as u64 || next >= capacity {
            return Err(bad(format!("capacity {capacity}, cursor {next}")));
        }
        let n_obs = r.u64()?;
        if n_obs > (r.remaining() / 16) as u64 {
            return Err(bad(format!("{n_obs} observations cannot fit")));
        }
        let mut observations = Vec::with_capacity(n_obs as usize);
        for _ in 0..n_obs {
            let len = r.u32()? as usize;
            if len > r.remaining() / 4 {
                return Err(bad(format!("observation length {len} cannot fit")));
            }
            let data = r.take(len * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let obs = Observation::from_raw(data).map_err(|e| bad(e.to_string()))?;
            if obs.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(bad("non-finite observation".into()));
            }
            observations.push(Arc::new(obs));
        }
        let len = r.u64()?;
        if len > capacity || len > (r.remaining() / SLOT_BYTES) as u64 {
            return Err(bad(format!("{len} slots")));
        }
        if len < capacity && next != len {
            return Err(bad(format!("cursor {next} with {len} of {capacity} slots filled")));
        }
        let mut memory = SharedReplayMemory::new(capacity as usize, members)?;
        let obs_at = |i: u32| {
            observations
                .get(i as usize)
                .cloned()
                .ok_or_else(|| bad(format!("observation index {i} out of range")))
        };
        for _ in 0..len {
            let observation = obs_at(r.u32()?)?;
            let next_observation = obs_at(r.u32()?)?;
            let action = EgoAction::from_index(r.u8()? as usize).ok_or_else(|| bad("action index".into()))?;
            let reward = r.f64()?;
            if !reward.is_finite() {
                return Err(bad("non-finite reward".into()));
            }
            let terminal = match r.u8()? {
                0 => false,
                1 => true,
                t => return Err(bad(format!("terminal flag {t}"))),
            };
            let mask = r.u64()?;
            if mask & !memory.member_bits() != 0 {
                return Err(bad(format!("mask {mask:#x} names members beyond {members}")));
            }
            memory.insert(
                Experience {
                    observation,
                    action,
                    reward,
                    next_observation,
                    terminal,
                },
                mask,
            );
        }
        r.finish()?;
        memory.next = next as usize;
        Ok(memory)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn exp(i: usize) -> Experience {
        Experience {
            observation: Arc::new(Observation::new([i as f32, 0.0, 0.0], &[])),
            action: EgoAction::from_index(i % 10).unwrap(),
            reward: i as f64,
            next_observation: Arc::new(Observation::new([i as f32 + 1.0, 0.0, 0.0], &[[0.5; 4]])),
            terminal: i % 3 == 0,
        }
    }

    #[test]
    fn p_add_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = SharedReplayMemory::new(100, 10).unwrap();
        let s = m.add(exp(0), 1.0, &mut rng);
        assert_eq!(m.mask(s), (1 << 10) - 1);
        let s = m.add(exp(1), 0.0, &mut rng);
        assert_eq!(m.mask(s), 0);
        assert_eq!(m.len(), 2);
        assert!((0..10).all(|k| m.eligible(k) == 1));
    }

    #[test]
    fn overwrite_clears_masks() {
        let mut m = SharedReplayMemory::new(3, 2).unwrap();
        for i in 0..3 {
            m.insert(exp(i), 0b11);
        }
        m.insert(exp(3), 0b10);
        assert_eq!(m.len(), 3);
        assert_eq!(m.eligible(0), 2);
        assert_eq!(m.eligible(1), 3);
        assert_eq!(m.get(0).reward, 3.0);
    }

    #[test]
    fn not_ready_below_batch_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = SharedReplayMemory::new(100, 2).unwrap();
        assert!(m.sample(0, 32, &mut rng).is_none());
        for i in 0..40 {
            m.insert(exp(i), if i < 32 { 0b01 } else { 0b10 });
        }
        let batch = m.sample(0, 32, &mut rng).unwrap();
        assert!(batch.iter().all(|&s| s < 32));
        assert!(m.sample(1, 32, &mut rng).is_none());
    }

    #[test]
    fn binary_round_trip_shares_observations() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = SharedReplayMemory::new(5, 3).unwrap();
        let mut prev = Arc::new(Observation::new([0.0; 3], &[]));
        for i in 0..7 {
            let next = Arc::new(Observation::new([i as f32; 3], &[[0.25; 4]]));
            m.add(
                Experience {
                    observation: prev.clone(),
                    action: EgoAction::from_index(i % 10).unwrap(),
                    reward: -0.5 * i as f64,
                    next_observation: next.clone(),
                    terminal: false,
                },
                0.5,
                &mut rng,
            );
            prev = next;
        }
        let bytes = m.encode();
        let back = SharedReplayMemory::decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.encode(), bytes);
        assert!(Arc::ptr_eq(&back.get(1).observation, &back.get(0).next_observation));
    }

    #[test]
    fn decode_rejects_garbage() {
        let mut m = SharedReplayMemory::new(4, 2).unwrap();
        m.insert(exp(1), 0b01);
        let bytes = m.encode();
        for cut in 0..bytes.len() {
            assert!(SharedReplayMemory::decode(&bytes[..cut]).is_err());
        }
        let mut bad = bytes.clone();
        let mask_at = bad.len() - 8;
        bad[mask_at] = 0b100;
        assert!(SharedReplayMemory::decode(&bad).is_err());
    }
}
