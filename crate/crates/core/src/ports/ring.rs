use serde::Serialize;
use thiserror::Error;

/// Bytes per ring slot, including the length header.
pub const SLOT_SIZE: u64 = 256;
const HEADER: usize = 2;
/// Largest payload a single slot holds.
pub const MAX_PAYLOAD: usize = SLOT_SIZE as usize - HEADER;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum RingError {
    #[error("ring full")]
    Full,
    #[error("payload of {0} bytes exceeds a slot")]
    TooLarge(usize),
}

/// A single-producer single-consumer ring of fixed-size slots in shared IO
/// memory. Indices are held on the hypervisor side; only slot contents
/// live in memory the model can reach. One slot always stays empty so that
/// `head == tail` means empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RingBuffer {
    pub base: u64,
    pub capacity: u32,
    pub head: u32,
    pub tail: u32,
}

impl RingBuffer {
    pub fn new(base: u64, capacity: u32) -> Self {
        assert!(capacity >= 2, "a ring needs at least two slots");
        Self { base, capacity, head: 0, tail: 0 }
    }

    /// Bytes of IO memory the ring occupies.
    pub fn footprint(capacity: u32) -> u64 {
        u64::from(capacity) * SLOT_SIZE
    }

    pub fn len(&self) -> u32 {
        (self.tail + self.capacity - self.head) % self.capacity
    }

    pub fn is_empty(&self) -> bool {
        self.head == self.tail
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.capacity - 1
    }

    fn slot_range(&self, slot: u32) -> std::ops::Range<usize> {
        let start = (self.base + u64::from(slot) * SLOT_SIZE) as usize;
        start..start + SLOT_SIZE as usize
    }

    /// Writes `payload` into the next free slot and returns its index.
    pub fn push(&mut self, io: &mut [u8], payload: &[u8]) -> Result<u32, RingError> {
        if payload.len() > MAX_PAYLOAD {
            return Err(RingError::TooLarge(payload.len()));
        }
        if self.is_full() {
            return Err(RingError::Full);
        }
        let slot = self.tail;
        let bytes = &mut io[self.slot_range(slot)];
        bytes.fill(0);
        bytes[..HEADER].copy_from_slice(&(payload.len() as u16).to_le_bytes());
        bytes[HEADER..HEADER + payload.len()].copy_from_slice(payload);
        self.tail = (self.tail + 1) % self.capacity;
        Ok(slot)
    }

    /// Removes the oldest message. The length header is read from shared
    /// memory and clamped to the slot.
    pub fn pop(&mut self, io: &[u8]) -> Option<(u32, Vec<u8>)> {
        if self.is_empty() {
            return None;
        }
        let slot = self.head;
        let bytes = &io[self.slot_range(slot)];
        let len = usize::from(u16::from_le_bytes([bytes[0], bytes[1]])).min(MAX_PAYLOAD);
        let payload = bytes[HEADER..HEADER + len].to_vec();
        self.head = (self.head + 1) % self.capacity;
        Some((slot, payload))
    }

    /// Discards every queued message; returns how many were dropped.
    pub fn clear(&mut self) -> u32 {
        let n = self.len();
        self.head = self.tail;
        n
    }
}
