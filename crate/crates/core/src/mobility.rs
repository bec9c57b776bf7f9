//! Random-waypoint motion.
//!
//! Positions are interpolated on demand. The simulator only schedules an
//! event when a node reaches its waypoint.

use rand::Rng;

use crate::engine::SimTime;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Area {
    pub width: f64,
    pub height: f64,
}

impl Area {
    pub fn contains(&self, p: Point) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }

    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Point {
        Point::new(
            rng.gen_range(0.0..=self.width),
            rng.gen_range(0.0..=self.height),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedRange {
    pub min: f64,
    pub max: f64,
}

/// One straight leg of a random-waypoint trajectory.
///
/// Before `depart_at` the node sits at `origin` (pausing); afterwards it moves
/// toward `waypoint` at `speed` and stays there once it arrives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionState {
    pub origin: Point,
    pub waypoint: Point,
    pub speed: f64,
    pub depart_at: SimTime,
}

impl MotionState {
    /// A node that never moves.
    pub fn stationary(at: Point) -> Self {
        MotionState {
            origin: at,
            waypoint: at,
            speed: 0.0,
            depart_at: SimTime::ZERO,
        }
    }

    pub fn is_stationary(&self) -> bool {
        self.speed == 0.0
    }

    pub fn arrival(&self) -> SimTime {
        if self.is_stationary() {
            return self.depart_at;
        }
        self.depart_at
            .plus(self.origin.distance(self.waypoint) / self.speed)
    }

    pub fn position_at(&self, t: SimTime) -> Point {
        if t <= self.depart_at || self.is_stationary() {
            return self.origin;
        }
        let len = self.origin.distance(self.waypoint);
        let travelled = (t.secs() - self.depart_at.secs()) * self.speed;
        if len == 0.0 || travelled >= len {
            return self.waypoint;
        }
        let f = travelled / len;
        Point::new(
            self.origin.x + (self.waypoint.x - self.origin.x) * f,
            self.origin.y + (self.waypoint.y - self.origin.y) * f,
        )
    }
}

/// Draws a fresh leg starting at `origin`. Waypoint is uniform over the area,
/// speed uniform over the closed interval.
pub fn pick_waypoint<R: Rng + ?Sized>(
    rng: &mut R,
    origin: Point,
    depart_at: SimTime,
    area: Area,
    speed: SpeedRange,
) -> MotionState {
    assert!(speed.min > 0.0 && speed.min <= speed.max, "bad speed range");
    let waypoint = area.random_point(rng);
    let speed = if speed.min == speed.max {
        speed.min
    } else {
        rng.gen_range(speed.min..=speed.max)
    };
    MotionState {
        origin,
        waypoint,
        speed,
        depart_at,
    }
}

/// Next leg after reaching the current waypoint.
pub fn on_arrival<R: Rng + ?Sized>(
    state: &MotionState,
    pause: f64,
    rng: &mut R,
    area: Area,
    speed: SpeedRange,
) -> MotionState {
    let depart = state.arrival().plus(pause);
    pick_waypoint(rng, state.waypoint, depart, area, speed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const AREA: Area = Area {
        width: 1000.0,
        height: 1000.0,
    };
    const SPEED: SpeedRange = SpeedRange { min: 1.0, max: 20.0 };

    fn line_state() -> MotionState {
        MotionState {
            origin: Point::new(0.0, 0.0),
            waypoint: Point::new(100.0, 0.0),
            speed: 10.0,
            depart_at: SimTime::ZERO,
        }
    }

    #[test]
    fn waypoint_and_speed_within_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let s = pick_waypoint(&mut rng, Point::new(0.0, 0.0), SimTime::ZERO, AREA, SPEED);
            assert!(AREA.contains(s.waypoint));
            assert!((1.0..=20.0).contains(&s.speed));
        }
    }

    #[test]
    fn degenerate_speed_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = pick_waypoint(
            &mut rng,
            Point::new(0.0, 0.0),
            SimTime::ZERO,
            AREA,
            SpeedRange { min: 5.0, max: 5.0 },
        );
        assert_eq!(s.speed, 5.0);
    }

    #[test]
    fn same_seed_same_sequence() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20)
                .map(|_| pick_waypoint(&mut rng, Point::new(0.0, 0.0), SimTime::ZERO, AREA, SPEED))
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
    }

    #[test]
    fn linear_motion_and_clamp() {
        let s = line_state();
        assert_eq!(s.position_at(SimTime::from_secs(5.0)), Point::new(50.0, 0.0));
        assert_eq!(s.position_at(SimTime::ZERO), Point::new(0.0, 0.0));
        assert_eq!(s.position_at(SimTime::from_secs(20.0)), Point::new(100.0, 0.0));
    }

    #[test]
    fn arrival_pause_and_chaining() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = line_state();
        let n0 = on_arrival(&s, 0.0, &mut rng, AREA, SPEED);
        assert_eq!(n0.depart_at, SimTime::from_secs(10.0));
        assert_eq!(n0.origin, s.waypoint);
        let n5 = on_arrival(&s, 5.0, &mut rng, AREA, SPEED);
        assert_eq!(n5.depart_at, SimTime::from_secs(15.0));
        // paused at the old waypoint until departure
        assert_eq!(n5.position_at(SimTime::from_secs(12.0)), s.waypoint);
    }

    proptest! {
        #[test]
        fn trajectory_stays_in_area_and_respects_speed(seed in any::<u64>(), q in prop::collection::vec(0.0f64..600.0, 2..20)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let start = AREA.random_point(&mut rng);
            let mut legs = vec![pick_waypoint(&mut rng, start, SimTime::ZERO, AREA, SPEED)];
            while legs.last().unwrap().arrival().secs() < 600.0 {
                let next = on_arrival(legs.last().unwrap(), 0.0, &mut rng, AREA, SPEED);
                legs.push(next);
            }
            let pos = |t: f64| {
                let leg = legs.iter().rev().find(|l| l.depart_at.secs() <= t).unwrap_or(&legs[0]);
                leg.position_at(SimTime::from_secs(t))
            };
            let mut times = q.clone();
            times.sort_by(f64::total_cmp);
            for w in times.windows(2) {
                let (a, b) = (pos(w[0]), pos(w[1]));
                prop_assert!(AREA.contains(a) && AREA.contains(b));
                prop_assert!(a.distance(b) <= SPEED.max * (w[1] - w[0]) + 1e-9);
            }
        }
    }
}
