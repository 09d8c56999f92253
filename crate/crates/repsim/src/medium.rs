//! Unit-disk radio geometry and random-waypoint movement.

use rand::Rng;

use crate::scenario::RandomWaypoint;

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn in_range(a: [f64; 2], b: [f64; 2], range: f64) -> bool {
    distance(a, b) <= range
}

/// Indices of every other position within `range` of `positions[i]`, ascending.
pub fn neighbors(positions: &[[f64; 2]], i: usize, range: f64) -> Vec<usize> {
    (0..positions.len())
        .filter(|&j| j != i && in_range(positions[i], positions[j], range))
        .collect()
}

/// Bernoulli loss draw. Probabilities 0 and 1 consume no randomness.
pub fn lost<R: Rng>(rng: &mut R, p_loss: f64) -> bool {
    if p_loss <= 0.0 {
        false
    } else if p_loss >= 1.0 {
        true
    } else {
        rng.random::<f64>() < p_loss
    }
}

#[derive(Debug, Clone)]
pub struct WaypointState {
    pub spec: RandomWaypoint,
    target: [f64; 2],
    speed: f64,
    /// Remaining pause in seconds.
    pause_left: f64,
}

impl WaypointState {
    pub fn new<R: Rng>(spec: RandomWaypoint, rng: &mut R) -> Self {
        let mut s = WaypointState {
            spec,
            target: [0.0, 0.0],
            speed: spec.speed_min,
            pause_left: 0.0,
        };
        s.pick(rng);
        s
    }

    fn pick<R: Rng>(&mut self, rng: &mut R) {
        self.target = [
            rng.random_range(0.0..=self.spec.area[0]),
            rng.random_range(0.0..=self.spec.area[1]),
        ];
        self.speed = if self.spec.speed_max > self.spec.speed_min {
            rng.random_range(self.spec.speed_min..self.spec.speed_max)
        } else {
            self.spec.speed_min
        };
    }

    /// Advances `pos` by `dt` seconds.
    pub fn step<R: Rng>(&mut self, pos: &mut [f64; 2], dt: f64, rng: &mut R) {
        let mut left = dt;
        while left > 0.0 {
            if self.pause_left > 0.0 {
                let p = self.pause_left.min(left);
                self.pause_left -= p;
                left -= p;
                if self.pause_left <= 0.0 {
                    self.pick(rng);
                }
                continue;
            }
            let d = distance(*pos, self.target);
            let reach = self.speed * left;
            if reach >= d {
                *pos = self.target;
                left -= d / self.speed;
                self.pause_left = self.spec.pause;
                if self.pause_left <= 0.0 {
                    self.pick(rng);
                }
            } else {
                pos[0] += (self.target[0] - pos[0]) * reach / d;
                pos[1] += (self.target[1] - pos[1]) * reach / d;
                left = 0.0;
            }
        }
    }
}
