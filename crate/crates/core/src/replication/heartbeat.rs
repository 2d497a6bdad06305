use serde::{Deserialize, Serialize};

/// Consecutive outcomes that reset the success counter or trigger an
/// election.
pub const HEARTBEAT_THRESHOLD: u8 = 3;

/// A follower's running tally of heartbeat outcomes against its leader.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeartbeatCounters {
    pub success: u8,
    pub failure: u8,
}

/// Raised when the failure counter reaches the threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ElectionTrigger;

impl HeartbeatCounters {
    /// Folds one heartbeat round into the counters. Any success clears the
    /// failure streak and vice versa, so only consecutive misses count.
    pub fn tick(self, responded: bool) -> (Self, Option<ElectionTrigger>) {
        if responded {
            let success = self.success + 1;
            let success = if success == HEARTBEAT_THRESHOLD { 0 } else { success };
            (Self { success, failure: 0 }, None)
        } else {
            let failure = self.failure + 1;
            if failure == HEARTBEAT_THRESHOLD {
                (Self::default(), Some(ElectionTrigger))
            } else {
                (Self { success: 0, failure }, None)
            }
        }
    }
}

pub fn heartbeat_tick(counters: HeartbeatCounters, responded: bool) -> (HeartbeatCounters, Option<ElectionTrigger>) {
    counters.tick(responded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(success: u8, failure: u8) -> HeartbeatCounters {
        HeartbeatCounters { success, failure }
    }

    #[test]
    fn third_success_resets() {
        assert_eq!(heartbeat_tick(c(2, 0), true), (c(0, 0), None));
    }

    #[test]
    fn third_failure_triggers() {
        assert_eq!(heartbeat_tick(c(0, 2), false), (c(0, 0), Some(ElectionTrigger)));
    }

    #[test]
    fn first_success_counts() {
        assert_eq!(heartbeat_tick(c(0, 0), true), (c(1, 0), None));
    }

    #[test]
    fn success_breaks_failure_streak() {
        let (c1, _) = heartbeat_tick(c(0, 2), true);
        assert_eq!(c1, c(1, 0));
        let (c2, t) = heartbeat_tick(c1, false);
        assert_eq!((c2, t), (c(0, 1), None));
    }
}
