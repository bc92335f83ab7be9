//! Time-scaling ramps used by every flow segment.
//!
//! A ramp `h` is non-decreasing, equals 0 for `tau <= 0` and 1 for `tau >= 1`,
//! and its derivative vanishes outside `(0, 1)`. Gluing segments whose speed
//! is proportional to `h_dot` therefore gives a velocity field that is zero at
//! every segment boundary.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeScale {
    /// `6t^5 - 15t^4 + 10t^3` on `[0, 1]`; C2 at both ends.
    #[default]
    Quintic,
    /// `s(t) / (s(t) + s(1 - t))` with `s(t) = exp(-1/t)`; C-infinity.
    Bump,
}

fn bump_sigma(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp()
    } else {
        0.0
    }
}

fn bump_sigma_dot(t: f64) -> f64 {
    if t > 0.0 {
        (-1.0 / t).exp() / (t * t)
    } else {
        0.0
    }
}

impl TimeScale {
    pub fn h(self, tau: f64) -> f64 {
        if tau <= 0.0 {
            return 0.0;
        }
        if tau >= 1.0 {
            return 1.0;
        }
        match self {
            TimeScale::Quintic => tau * tau * tau * (10.0 + tau * (-15.0 + 6.0 * tau)),
            TimeScale::Bump => {
                let a = bump_sigma(tau);
                let b = bump_sigma(1.0 - tau);
                a / (a + b)
            }
        }
    }

    pub fn h_dot(self, tau: f64) -> f64 {
        if tau <= 0.0 || tau >= 1.0 {
            return 0.0;
        }
        match self {
            TimeScale::Quintic => {
                let u = tau * (1.0 - tau);
                30.0 * u * u
            }
            TimeScale::Bump => {
                let a = bump_sigma(tau);
                let b = bump_sigma(1.0 - tau);
                let denom = a + b;
                if denom == 0.0 {
                    return 0.0;
                }
                (bump_sigma_dot(tau) * b + a * bump_sigma_dot(1.0 - tau)) / (denom * denom)
            }
        }
    }

    /// Remaining distance to the end of the ramp, `1 - h(tau)`.
    ///
    /// Computed without cancellation for the quintic ramp, whose complement
    /// is `h(1 - tau)` by symmetry.
    pub fn one_minus_h(self, tau: f64) -> f64 {
        match self {
            TimeScale::Quintic => self.h(1.0 - tau),
            TimeScale::Bump => {
                if tau <= 0.0 {
                    return 1.0;
                }
                if tau >= 1.0 {
                    return 0.0;
                }
                let a = bump_sigma(tau);
                let b = bump_sigma(1.0 - tau);
                b / (a + b)
            }
        }
    }
}

impl fmt::Display for TimeScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TimeScale::Quintic => "quintic",
            TimeScale::Bump => "bump",
        })
    }
}

impl FromStr for TimeScale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "quintic" => Ok(TimeScale::Quintic),
            "bump" => Ok(TimeScale::Bump),
            other => Err(format!("unknown time scale `{other}` (expected quintic|bump)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const BOTH: [TimeScale; 2] = [TimeScale::Quintic, TimeScale::Bump];

    #[test]
    fn clamps_outside_unit_interval() {
        for ts in BOTH {
            assert_eq!(ts.h(-0.5), 0.0);
            assert_eq!(ts.h(2.0), 1.0);
            assert_eq!(ts.h(0.0), 0.0);
            assert_eq!(ts.h(1.0), 1.0);
        }
    }

    #[test]
    fn quintic_midpoint_values() {
        // 6/32 - 15/16 + 10/8 = 0.5
        assert!((TimeScale::Quintic.h(0.5) - 0.5).abs() < 1e-15);
        // 30/16 - 60/8 + 30/4 = 1.875
        assert!((TimeScale::Quintic.h_dot(0.5) - 1.875).abs() < 1e-15);
        assert!((TimeScale::Bump.h(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn endpoint_flatness() {
        for ts in BOTH {
            assert_eq!(ts.h_dot(0.0), 0.0);
            assert_eq!(ts.h_dot(1.0), 0.0);
            assert_eq!(ts.h_dot(-3.0), 0.0);
            assert_eq!(ts.h_dot(7.0), 0.0);
        }
    }

    #[test]
    fn complement_matches_direct_form() {
        for ts in BOTH {
            for i in 0..=100 {
                let t = i as f64 / 100.0;
                assert!((ts.one_minus_h(t) - (1.0 - ts.h(t))).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn derivative_matches_central_differences() {
        let eps = 1e-5;
        for ts in BOTH {
            for i in 0..1000 {
                let tau = -1.0 + 3.0 * (i as f64 + 0.5) / 1000.0;
                let fd = (ts.h(tau + eps) - ts.h(tau - eps)) / (2.0 * eps);
                assert!(
                    (ts.h_dot(tau) - fd).abs() <= 1e-6,
                    "{ts} at {tau}: {} vs {fd}",
                    ts.h_dot(tau)
                );
            }
        }
    }

    #[test]
    fn parse_round_trip() {
        for ts in BOTH {
            assert_eq!(ts.to_string().parse::<TimeScale>().unwrap(), ts);
        }
        assert!("cubic".parse::<TimeScale>().is_err());
    }

    proptest! {
        #[test]
        fn monotone(a in -1.0f64..2.0, b in -1.0f64..2.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            for ts in BOTH {
                prop_assert!(ts.h(lo) <= ts.h(hi));
                prop_assert!(ts.h_dot(lo) >= 0.0);
                prop_assert!((0.0..=1.0).contains(&ts.h(lo)));
            }
        }
    }
}
