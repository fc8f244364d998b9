//! Tap-changer supervision from slack activity.
//!
//! The controller's two slacks say which side of the voltage band is being
//! given up: a persistently positive `eps2 - eps1` means the upper bound is
//! violated beyond what reactive control can fix, so the busbar voltage
//! should come down one tap step; the negative case mirrors it. Commands
//! are rate-limited by a dwell time: the imbalance must persist for a full
//! dwell before the first commutation, and the counter restarts after every
//! commutation, so two commands are never closer than the dwell.

/// Slack imbalances smaller than this count as zero; the solver only
/// returns slacks to its own tolerance and taps must not hunt on noise.
pub const SLACK_DEADBAND: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct OltcSupervisor {
    /// Consecutive samples the imbalance must persist.
    pub dwell_samples: usize,
    /// Samples the current imbalance sign has persisted.
    count: usize,
    /// Sign of the imbalance being tracked: -1, 0, +1.
    sign: i32,
    last_command: i32,
}

impl OltcSupervisor {
    pub fn new(dwell_samples: usize) -> OltcSupervisor {
        assert!(dwell_samples >= 1, "dwell must be at least one sample");
        OltcSupervisor {
            dwell_samples,
            count: 0,
            sign: 0,
            last_command: 0,
        }
    }

    /// Supervisor for a dwell time in seconds at the given sample period,
    /// rounded up to whole samples (conservative: never shorter than the
    /// requested dwell).
    pub fn from_dwell_time(dwell_s: f64, t_sample_s: f64) -> OltcSupervisor {
        OltcSupervisor::new((dwell_s / t_sample_s).ceil() as usize)
    }

    pub fn last_command(&self) -> i32 {
        self.last_command
    }

    /// Feeds one sample of slacks; returns the tap command: +1 raises the
    /// tap index (lowering the regulated voltage), -1 lowers it, 0 holds.
    pub fn supervise(&mut self, eps1: f64, eps2: f64) -> i32 {
        let delta = eps2 - eps1;
        let sign = if delta > SLACK_DEADBAND {
            1
        } else if delta < -SLACK_DEADBAND {
            -1
        } else {
            0
        };
        if sign == 0 || sign != self.sign {
            self.sign = sign;
            self.count = usize::from(sign != 0);
            if sign != 0 && self.dwell_samples == 1 {
                self.count = 0;
                self.last_command = sign;
                return sign;
            }
            return 0;
        }
        self.count += 1;
        if self.count >= self.dwell_samples {
            self.count = 0;
            self.last_command = sign;
            return sign;
        }
        0
    }
}
