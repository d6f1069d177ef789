//! Sliding anti-replay window over sequence numbers.

/// Number of sequence numbers tracked below the highest one seen.
pub const WINDOW_WIDTH: u64 = 32;

/// Accepts each sequence number at most once while tolerating reordering
/// within [`WINDOW_WIDTH`] of the highest number seen.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ReplayWindow {
    highest: Option<u64>,
    // bit i set => (highest - i) has been accepted
    bitmap: u32,
}

impl ReplayWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn highest_seen(&self) -> Option<u64> {
        self.highest
    }

    /// Whether `seq` would be accepted. Does not update the window.
    pub fn check(&self, seq: u64) -> bool {
        let Some(highest) = self.highest else {
            return true;
        };
        if seq > highest {
            return true;
        }
        let offset = highest - seq;
        if offset >= WINDOW_WIDTH {
            return false;
        }
        self.bitmap & (1 << offset) == 0
    }

    /// Marks `seq` as seen. Call only after the message authenticated.
    pub fn accept(&mut self, seq: u64) {
        match self.highest {
            None => {
                self.highest = Some(seq);
                self.bitmap = 1;
            }
            Some(highest) if seq > highest => {
                let shift = seq - highest;
                self.bitmap = if shift >= WINDOW_WIDTH {
                    1
                } else {
                    (self.bitmap << shift) | 1
                };
                self.highest = Some(seq);
            }
            Some(highest) => {
                let offset = highest - seq;
                if offset < WINDOW_WIDTH {
                    self.bitmap |= 1 << offset;
                }
            }
        }
    }

    /// Checks and, on success, records `seq`.
    pub fn check_and_accept(&mut self, seq: u64) -> bool {
        if !self.check(seq) {
            return false;
        }
        self.accept(seq);
        true
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}
