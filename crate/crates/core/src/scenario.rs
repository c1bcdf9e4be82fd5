//! On-disk scenario description.
//!
//! A scenario is a TOML file describing everything a run needs: the room
//! (an axis-aligned interior with axis-aligned box obstacles), the
//! microphone position, the acoustic constants shared by the simulator and
//! the inverse tracer, and the source trajectory as timed waypoints with an
//! emitting flag. Loading validates the description; saving a loaded
//! scenario reproduces it value-for-value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Point3d};
use crate::map::OccupancyGrid;
use crate::sim::Room;
use crate::trace::AttenuationTable;

/// Axis-aligned box as stored in scenario files.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl BoxSpec {
    pub fn aabb(&self) -> Aabb {
        Aabb::new(Point3d::from(self.min), Point3d::from(self.max))
    }
}

/// Room geometry: the air volume and solid boxes inside it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RoomSpec {
    /// The air volume. Walls, floor and ceiling enclose it.
    pub interior: BoxSpec,
    /// Solid boxes inside the interior.
    #[serde(default)]
    pub obstacles: Vec<BoxSpec>,
    /// Thickness of the enclosing shell when rasterized, meters.
    #[serde(default = "default_wall_thickness")]
    pub wall_thickness: f64,
}

/// One point of the source trajectory.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    /// Seconds from scenario start.
    pub time: f64,
    pub position: [f64; 3],
    /// Whether the source emits from this waypoint until the next one.
    #[serde(default = "default_true")]
    pub emitting: bool,
}

/// Complete scenario description.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    /// Source frequency, Hz.
    pub frequency: f64,
    /// Energy emitted per impulse, joules.
    pub source_energy: f64,
    /// Std-dev of the simulated direction-of-arrival error, degrees.
    #[serde(default)]
    pub noise_angle_deg: f64,
    /// Reflection order the simulator generates up to.
    #[serde(default = "default_max_image_order")]
    pub max_image_order: u32,
    /// Spurious arrivals injected per emitting frame.
    #[serde(default)]
    pub clutter_count: u32,
    /// Base seed for all randomness in a run.
    #[serde(default)]
    pub rng_seed: u64,
    /// Seconds between observation frames.
    #[serde(default = "default_frame_interval")]
    pub frame_interval: f64,
    /// Fraction of energy lost per surface bounce, `[0, 1)`. Shared by the
    /// simulator and the inverse tracer.
    #[serde(default = "default_surface_absorption")]
    pub surface_absorption: f64,
    /// Air attenuation `(frequency_hz, nepers_per_meter)` pairs. Shared by
    /// the simulator and the inverse tracer.
    #[serde(default = "default_attenuation")]
    pub attenuation_table: Vec<(f64, f64)>,
    /// Voxel edge length of the rasterized map, meters.
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    pub mic_position: [f64; 3],
    pub room: RoomSpec,
    pub trajectory: Vec<Waypoint>,
}

fn default_wall_thickness() -> f64 {
    0.3
}

fn default_true() -> bool {
    true
}

fn default_max_image_order() -> u32 {
    4
}

fn default_frame_interval() -> f64 {
    0.5
}

fn default_surface_absorption() -> f64 {
    0.1
}

fn default_attenuation() -> Vec<(f64, f64)> {
    vec![(2000.0, 0.0025), (4000.0, 0.0049), (8000.0, 0.0113)]
}

fn default_resolution() -> f64 {
    0.1
}

impl Scenario {
    /// Parse and validate a scenario from TOML text.
    pub fn from_toml(text: &str) -> Result<Self> {
        let scenario: Scenario =
            toml::from_str(text).map_err(|e| Error::Scenario(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        fn positive(name: &str, v: f64) -> Result<()> {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Scenario(format!("{name} must be positive, got {v}")));
            }
            Ok(())
        }
        positive("frequency", self.frequency)?;
        positive("source_energy", self.source_energy)?;
        positive("frame_interval", self.frame_interval)?;
        positive("resolution", self.resolution)?;
        positive("room.wall_thickness", self.room.wall_thickness)?;
        if !(0.0..1.0).contains(&self.surface_absorption) {
            return Err(Error::Scenario(format!(
                "surface_absorption must be in [0, 1), got {}",
                self.surface_absorption
            )));
        }
        if !(self.noise_angle_deg >= 0.0) || !self.noise_angle_deg.is_finite() {
            return Err(Error::Scenario(format!(
                "noise_angle_deg must be non-negative, got {}",
                self.noise_angle_deg
            )));
        }
        AttenuationTable::new(self.attenuation_table.clone())
            .map_err(|e| Error::Scenario(e.to_string()))?;

        let interior = self.room.interior.aabb();
        if interior.is_degenerate() {
            return Err(Error::Scenario("room interior has zero volume".into()));
        }
        for (i, ob) in self.room.obstacles.iter().enumerate() {
            let b = ob.aabb();
            if !(interior.contains(&b.min) && interior.contains(&b.max)) {
                return Err(Error::Scenario(format!(
                    "obstacle {i} pokes outside the room interior"
                )));
            }
        }
        let mic = self.mic_point();
        if !interior.contains_strictly(&mic) {
            return Err(Error::Scenario(
                "mic_position must be strictly inside the room interior".into(),
            ));
        }
        if let Some(i) = self.obstacle_containing(&mic) {
            return Err(Error::Scenario(format!(
                "mic_position is inside obstacle {i}"
            )));
        }
        if self.trajectory.is_empty() {
            return Err(Error::Scenario("trajectory needs at least one waypoint".into()));
        }
        for w in self.trajectory.windows(2) {
            if !(w[1].time > w[0].time) {
                return Err(Error::Scenario(format!(
                    "trajectory times must strictly increase ({} then {})",
                    w[0].time, w[1].time
                )));
            }
        }
        for (i, wp) in self.trajectory.iter().enumerate() {
            let p = Point3d::from(wp.position);
            if !interior.contains_strictly(&p) {
                return Err(Error::Scenario(format!(
                    "waypoint {i} lies outside the room interior"
                )));
            }
            if let Some(ob) = self.obstacle_containing(&p) {
                return Err(Error::Scenario(format!(
                    "waypoint {i} lies inside obstacle {ob}"
                )));
            }
        }
        Ok(())
    }

    fn obstacle_containing(&self, p: &Point3d) -> Option<usize> {
        self.room
            .obstacles
            .iter()
            .position(|ob| ob.aabb().contains_strictly(p))
    }

    pub fn mic_point(&self) -> Point3d {
        Point3d::from(self.mic_position)
    }

    pub fn noise_angle_rad(&self) -> f64 {
        self.noise_angle_deg.to_radians()
    }

    pub fn attenuation(&self) -> AttenuationTable {
        AttenuationTable::new(self.attenuation_table.clone())
            .expect("validated at load")
    }

    /// Reflective geometry used by the image-source simulator.
    pub fn room_geometry(&self) -> Room {
        Room {
            interior: self.room.interior.aabb(),
            obstacles: self.room.obstacles.iter().map(|b| b.aabb()).collect(),
        }
    }

    /// Time of the first and last waypoint.
    pub fn time_span(&self) -> (f64, f64) {
        (
            self.trajectory.first().expect("validated non-empty").time,
            self.trajectory.last().expect("validated non-empty").time,
        )
    }

    /// Frame times covering the trajectory at `frame_interval` spacing.
    pub fn frame_times(&self) -> Vec<f64> {
        let (t0, t1) = self.time_span();
        let mut times = Vec::new();
        let mut k = 0u64;
        loop {
            let t = t0 + k as f64 * self.frame_interval;
            if t > t1 + 1e-9 {
                break;
            }
            times.push(t);
            k += 1;
        }
        times
    }

    /// Source position and emitting state at `time`: position interpolates
    /// linearly between waypoints, the emitting flag holds from a waypoint
    /// until the next one. Times outside the trajectory clamp to its ends.
    pub fn source_state(&self, time: f64) -> (Point3d, bool) {
        let first = &self.trajectory[0];
        if time <= first.time {
            return (Point3d::from(first.position), first.emitting);
        }
        let last = self.trajectory.last().expect("validated non-empty");
        if time >= last.time {
            return (Point3d::from(last.position), last.emitting);
        }
        for w in self.trajectory.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if time < b.time {
                let s = (time - a.time) / (b.time - a.time);
                let pa = Point3d::from(a.position);
                let pb = Point3d::from(b.position);
                return (pa + (pb - pa) * s, a.emitting);
            }
        }
        unreachable!("time bracketed by first/last checks");
    }

    /// Rasterize the room into an occupancy map: a shell of
    /// `wall_thickness` around the interior plus every obstacle. The grid
    /// origin sits at the outer shell corner, so the interior faces land on
    /// voxel boundaries whenever `wall_thickness` is a multiple of the
    /// resolution.
    pub fn build_grid(&self) -> Result<OccupancyGrid> {
        let interior = self.room.interior.aabb();
        let outer = interior.inflated(self.room.wall_thickness);
        let mut grid = OccupancyGrid::new(outer.min, self.resolution, outer)?;
        for axis in 0..3 {
            let mut below = outer;
            below.max[axis] = interior.min[axis];
            grid.rasterize_box(&below);
            let mut above = outer;
            above.min[axis] = interior.max[axis];
            grid.rasterize_box(&above);
        }
        for ob in &self.room.obstacles {
            grid.rasterize_box(&ob.aabb());
        }
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn basic_toml() -> String {
        r#"
name = "unit-room"
frequency = 4000.0
source_energy = 1.0
noise_angle_deg = 0.0
mic_position = [5.0, 3.5, 1.2]

[room]
wall_thickness = 0.3

[room.interior]
min = [0.0, 0.0, 0.0]
max = [7.0, 7.0, 3.0]

[[room.obstacles]]
min = [3.3, 2.3, 0.0]
max = [3.7, 4.7, 2.2]

[[trajectory]]
time = 0.0
position = [2.0, 3.5, 1.2]

[[trajectory]]
time = 2.0
position = [2.0, 3.5, 1.2]
emitting = false
"#
        .to_string()
    }

    #[test]
    fn parses_and_applies_defaults() {
        let s = Scenario::from_toml(&basic_toml()).unwrap();
        assert_eq!(s.name, "unit-room");
        assert_eq!(s.max_image_order, 4);
        assert_eq!(s.clutter_count, 0);
        assert_relative_eq!(s.frame_interval, 0.5);
        assert_relative_eq!(s.surface_absorption, 0.1);
        assert_relative_eq!(s.resolution, 0.1);
        assert_eq!(s.attenuation_table.len(), 3);
        assert!(s.trajectory[0].emitting);
        assert!(!s.trajectory[1].emitting);
    }

    #[test]
    fn round_trips_through_toml() {
        let s = Scenario::from_toml(&basic_toml()).unwrap();
        let text = s.to_toml();
        let back = Scenario::from_toml(&text).unwrap();
        assert_eq!(s, back);
        // And a second serialization is byte-identical.
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn rejects_bad_scenarios() {
        let mut s = Scenario::from_toml(&basic_toml()).unwrap();
        s.mic_position = [8.0, 3.5, 1.2]; // outside the interior
        assert!(matches!(s.validate(), Err(Error::Scenario(_))));

        let mut s = Scenario::from_toml(&basic_toml()).unwrap();
        s.trajectory[1].time = 0.0; // times must increase
        assert!(s.validate().is_err());

        let mut s = Scenario::from_toml(&basic_toml()).unwrap();
        s.trajectory[0].position = [3.5, 3.5, 1.0]; // inside the obstacle
        assert!(s.validate().is_err());

        let mut s = Scenario::from_toml(&basic_toml()).unwrap();
        s.room.obstacles[0].max = [3.7, 7.5, 2.2]; // pokes through a wall
        assert!(s.validate().is_err());

        let mut s = Scenario::from_toml(&basic_toml()).unwrap();
        s.surface_absorption = 1.0;
        assert!(s.validate().is_err());

        let mut s = Scenario::from_toml(&basic_toml()).unwrap();
        s.attenuation_table.clear();
        assert!(s.validate().is_err());

        // Unknown fields are typos, not extensions.
        assert!(Scenario::from_toml(&format!("{}\nbogus_knob = 3\n", basic_toml())).is_err());
    }

    #[test]
    fn source_state_interpolates_and_holds_emission() {
        let mut s = Scenario::from_toml(&basic_toml()).unwrap();
        s.trajectory = vec![
            Waypoint {
                time: 0.0,
                position: [1.0, 1.0, 1.0],
                emitting: true,
            },
            Waypoint {
                time: 2.0,
                position: [3.0, 1.0, 1.0],
                emitting: false,
            },
            Waypoint {
                time: 3.0,
                position: [3.0, 2.0, 1.0],
                emitting: true,
            },
        ];
        s.validate().unwrap();
        let (p, e) = s.source_state(1.0);
        assert_relative_eq!(p.x, 2.0);
        assert!(e, "emitting holds from waypoint 0");
        let (p, e) = s.source_state(2.5);
        assert_relative_eq!(p.y, 1.5);
        assert!(!e, "silent between waypoints 1 and 2");
        let (p, e) = s.source_state(99.0);
        assert_relative_eq!(p.y, 2.0);
        assert!(e, "clamped to the last waypoint");
        let (p, _) = s.source_state(-1.0);
        assert_relative_eq!(p.x, 1.0);
    }

    #[test]
    fn frame_times_cover_the_trajectory() {
        let s = Scenario::from_toml(&basic_toml()).unwrap();
        let times = s.frame_times();
        assert_eq!(times.len(), 5); // 0.0, 0.5, 1.0, 1.5, 2.0
        assert_relative_eq!(times[4], 2.0);
    }

    #[test]
    fn grid_shell_count_matches_direct_enumeration() {
        let s = Scenario::from_toml(&basic_toml()).unwrap();
        let grid = s.build_grid().unwrap();

        // Count occupied centers directly from the geometry: a center is
        // solid when it is not strictly inside the interior, or when it is
        // inside an obstacle.
        let interior = s.room.interior.aabb();
        let obstacles: Vec<Aabb> = s.room.obstacles.iter().map(|b| b.aabb()).collect();
        let outer = interior.inflated(s.room.wall_thickness);
        let res = s.resolution;
        let counts = |lo: f64, hi: f64, axis: usize| -> usize {
            let mut n = 0;
            let mut i = 0;
            loop {
                let c = outer.min[axis] + (i as f64 + 0.5) * res;
                if c > outer.max[axis] {
                    break;
                }
                if c >= lo && c <= hi {
                    n += 1;
                }
                i += 1;
            }
            n
        };
        let total: usize = (0..3).map(|a| counts(outer.min[a], outer.max[a], a)).product();
        let strictly_inside: usize = (0..3)
            .map(|a| {
                // Strict interior: centers with min < c < max. The closed
                // count minus centers exactly on the faces (none here, the
                // faces sit on voxel boundaries).
                counts(interior.min[a], interior.max[a], a)
            })
            .product();
        let mut in_obstacles = 0usize;
        for ob in &obstacles {
            in_obstacles += (0..3).map(|a| counts(ob.min[a], ob.max[a], a)).product::<usize>();
        }
        let expected = total - strictly_inside + in_obstacles;
        assert_eq!(grid.occupied_count(), expected);

        // Spot checks: a floor voxel, an air voxel, an obstacle voxel.
        assert!(grid.is_occupied(grid.key_at(&Point3d::new(3.5, 3.5, -0.15))));
        assert!(!grid.is_occupied(grid.key_at(&Point3d::new(1.0, 1.0, 1.0))));
        assert!(grid.is_occupied(grid.key_at(&Point3d::new(3.5, 3.5, 1.0))));
    }

    #[test]
    fn grid_bounds_hug_the_shell() {
        let s = Scenario::from_toml(&basic_toml()).unwrap();
        let grid = s.build_grid().unwrap();
        assert_relative_eq!(grid.bounds().min.x, -0.3);
        assert_relative_eq!(grid.bounds().max.z, 3.3);
        assert_eq!(grid.origin(), grid.bounds().min);
    }
}
