//! Inverse acoustic ray tracing.
//!
//! A microphone reports incoming wavefronts: a unit direction, a frequency,
//! and the energy that *arrived*. To find out where that energy could have
//! come from, each arrival is traced backwards: a ray leaves the microphone
//! along the reversed incoming direction, and instead of attenuating with
//! distance its energy is *re-amplified* — multiplied by `exp(alpha * l)` to
//! undo air absorption over path length `l`, and divided by
//! `1 - surface_absorption` at every wall bounce to undo the energy the
//! surface swallowed. Wherever the reconstructed energy along the path equals
//! the source's emission energy is a candidate source location; the polyline
//! itself is handed to the localizer as evidence.
//!
//! Reflections are specular off surface normals estimated from the occupancy
//! map. Tracing stops when the ray escapes the map, when another bounce would
//! exceed the reflection-order budget, or when the reconstructed energy would
//! exceed a physical ceiling (re-amplification grows without bound, so the
//! ceiling doubles as a sanity cut on how far back a path may plausibly
//! reach).

use std::io::Write;

use crate::error::{Error, Result};
use crate::geom::{Point3d, UnitVec3, Vec3d};
use crate::map::{HitRecord, OccupancyGrid};

/// Cells on each side of a hit voxel used for surface normal estimation
/// (a 5x5x5 window).
pub const NEIGHBORHOOD_HALF_WIDTH: u32 = 2;

/// Default ceiling on reconstructed energy, in joules: no plausible indoor
/// impulse carries more, so a path whose re-amplified energy passes this is
/// reconstructing something that never happened.
pub const DEFAULT_ENERGY_CEILING: f64 = 900.0;

/// Default maximum number of wall reflections traced per arrival.
pub const DEFAULT_MAX_ORDER: u32 = 4;

/// One wavefront arrival at the microphone.
#[derive(Clone, Copy, Debug)]
pub struct IncomingSignal {
    /// Unit vector pointing *toward* the microphone — i.e. the propagation
    /// direction of the arriving wavefront's last leg.
    pub direction: UnitVec3,
    /// Hz; selects the air attenuation coefficient.
    pub frequency: f64,
    /// Received energy in joules, > 0.
    pub energy: f64,
}

impl IncomingSignal {
    pub fn new(direction: Vec3d, frequency: f64, energy: f64) -> Result<Self> {
        if !(frequency > 0.0) || !frequency.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "signal frequency must be positive, got {frequency}"
            )));
        }
        if !(energy > 0.0) || !energy.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "signal energy must be positive, got {energy}"
            )));
        }
        Ok(IncomingSignal {
            direction: crate::geom::direction(direction)?,
            frequency,
            energy,
        })
    }
}

/// One straight segment of an inverse path.
///
/// `initial_energy` is the reconstructed energy at `origin`; the energy at
/// distance `l` along the segment is `initial_energy * exp(alpha * l)`
/// (see [`energy_at`]). `length` is the distance to the segment's end — the
/// surface hit that spawned the next segment, or the point where tracing
/// stopped.
#[derive(Clone, Copy, Debug)]
pub struct AcousticRay {
    pub origin: Point3d,
    pub direction: UnitVec3,
    /// Number of reflections already undone before this segment (0 for the
    /// segment leaving the microphone).
    pub order: u32,
    pub initial_energy: f64,
    pub length: f64,
}

impl AcousticRay {
    /// Point at the far end of the segment.
    pub fn endpoint(&self) -> Point3d {
        self.origin + self.direction.into_inner() * self.length
    }
}

/// Why a traced path stopped growing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PathEnd {
    /// The last segment left the map or reached the maximum ray length
    /// without hitting anything.
    Escaped,
    /// Another bounce would exceed the reflection-order budget.
    OrderLimit,
    /// The reflected segment would start above the energy ceiling.
    EnergyLimit,
    /// A reflection could not be constructed even with the fallback normal.
    Degenerate,
}

/// Complete inverse path for one arrival: at least one segment, consecutive
/// segments joined at surface hits.
#[derive(Clone, Debug)]
pub struct RayPath {
    pub signal: IncomingSignal,
    pub rays: Vec<AcousticRay>,
    pub end: PathEnd,
}

impl RayPath {
    /// Total traced length over all segments.
    pub fn total_length(&self) -> f64 {
        self.rays.iter().map(|r| r.length).sum()
    }
}

/// Frequency-dependent air attenuation, nepers per meter, as a piecewise
/// linear table over frequency.
#[derive(Clone, Debug, PartialEq)]
pub struct AttenuationTable {
    /// `(frequency_hz, nepers_per_meter)`, ascending in frequency.
    entries: Vec<(f64, f64)>,
}

impl AttenuationTable {
    /// Build from `(frequency, coefficient)` pairs in any order. The table
    /// must be non-empty, frequencies positive and distinct, coefficients
    /// non-negative.
    pub fn new(mut entries: Vec<(f64, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidConfig(
                "attenuation table must not be empty".into(),
            ));
        }
        for &(f, a) in &entries {
            if !(f > 0.0) || !f.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "attenuation table frequency must be positive, got {f}"
                )));
            }
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "attenuation coefficient must be non-negative, got {a}"
                )));
            }
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0));
        if entries.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidConfig(
                "attenuation table has duplicate frequencies".into(),
            ));
        }
        Ok(AttenuationTable { entries })
    }

    /// Octave-band air absorption for a typical room (20 °C, moderate
    /// humidity), nepers per meter.
    pub fn room_air() -> Self {
        AttenuationTable::new(vec![
            (2000.0, 0.0025),
            (4000.0, 0.0049),
            (8000.0, 0.0113),
        ])
        .expect("built-in table is valid")
    }

    pub fn entries(&self) -> &[(f64, f64)] {
        &self.entries
    }

    /// Coefficient at `frequency`: linear interpolation between bracketing
    /// entries, clamped to the end values outside the tabulated range.
    pub fn coeff_at(&self, frequency: f64) -> f64 {
        let entries = &self.entries;
        if frequency <= entries[0].0 {
            return entries[0].1;
        }
        if frequency >= entries[entries.len() - 1].0 {
            return entries[entries.len() - 1].1;
        }
        for w in entries.windows(2) {
            let (f0, a0) = w[0];
            let (f1, a1) = w[1];
            if frequency <= f1 {
                let t = (frequency - f0) / (f1 - f0);
                return a0 + t * (a1 - a0);
            }
        }
        unreachable!("frequency bracketed by table end checks");
    }
}

/// Parameters of the inverse tracer.
#[derive(Clone, Debug)]
pub struct TraceConfig {
    /// Microphone position; inverse rays start here.
    pub mic_position: Point3d,
    /// Fraction of incident energy absorbed at each surface bounce, in
    /// `[0, 1)`.
    pub surface_absorption: f64,
    pub attenuation: AttenuationTable,
    /// Reconstructed-energy cut, joules.
    pub energy_ceiling: f64,
    /// Maximum reflections per path.
    pub max_order: u32,
    /// Longest single segment traced, meters.
    pub max_ray_length: f64,
    /// Distance a reflected segment's origin is pushed off the surface along
    /// the normal, so it does not immediately re-enter the voxel it bounced
    /// off. Half the map resolution is the natural choice.
    pub origin_offset: f64,
}

impl TraceConfig {
    /// Defaults tied to a specific map: segment length capped at three map
    /// diagonals, reflection origins offset by half a voxel.
    pub fn for_grid(mic_position: Point3d, grid: &OccupancyGrid) -> Self {
        TraceConfig {
            mic_position,
            surface_absorption: 0.1,
            attenuation: AttenuationTable::room_air(),
            energy_ceiling: DEFAULT_ENERGY_CEILING,
            max_order: DEFAULT_MAX_ORDER,
            max_ray_length: 3.0 * grid.bounds().diagonal(),
            origin_offset: grid.resolution() / 2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.surface_absorption) {
            return Err(Error::InvalidConfig(format!(
                "surface_absorption must be in [0, 1), got {}",
                self.surface_absorption
            )));
        }
        if !(self.energy_ceiling > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "energy_ceiling must be positive, got {}",
                self.energy_ceiling
            )));
        }
        if !(self.max_ray_length > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "max_ray_length must be positive, got {}",
                self.max_ray_length
            )));
        }
        if !(self.origin_offset >= 0.0) || !self.origin_offset.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "origin_offset must be non-negative, got {}",
                self.origin_offset
            )));
        }
        Ok(())
    }
}

/// First segment of an inverse path: leaves the microphone along the
/// reversed arrival direction, carrying the received energy, order 0. The
/// segment length is assigned when the path is traced.
pub fn init_ray(signal: &IncomingSignal, config: &TraceConfig) -> AcousticRay {
    AcousticRay {
        origin: config.mic_position,
        direction: UnitVec3::new_unchecked(-signal.direction.into_inner()),
        order: 0,
        initial_energy: signal.energy,
        length: 0.0,
    }
}

/// Reconstructed energy at distance `distance` along the segment:
/// re-amplifies air absorption, `initial_energy * exp(alpha * distance)`.
pub fn energy_at(ray: &AcousticRay, distance: f64, alpha: f64) -> f64 {
    ray.initial_energy * (alpha * distance).exp()
}

/// Mirror `incident` across the plane with unit normal `normal`:
/// `d' = d - 2 (d·n) n`. The incident direction must face the surface
/// (`d·n < 0`).
pub fn specular_direction(incident: &UnitVec3, normal: &UnitVec3) -> Result<UnitVec3> {
    let dn = incident.dot(normal);
    if dn >= 0.0 {
        return Err(Error::BadOrientation);
    }
    let reflected = incident.into_inner() - normal.into_inner() * (2.0 * dn);
    Ok(UnitVec3::new_normalize(reflected))
}

/// Build the continuation segment after a surface hit: specular direction,
/// origin nudged off the surface, order incremented, and energy re-amplified
/// over the incident segment plus the surface bounce
/// (`E_hit / (1 - surface_absorption)`).
pub fn reflect(
    ray: &AcousticRay,
    hit: &HitRecord,
    config: &TraceConfig,
    alpha: f64,
) -> Result<AcousticRay> {
    let direction = specular_direction(&ray.direction, &hit.normal)?;
    let energy = energy_at(ray, hit.hit_length, alpha) / (1.0 - config.surface_absorption);
    Ok(AcousticRay {
        origin: hit.hit_point + hit.normal.into_inner() * config.origin_offset,
        direction,
        order: ray.order + 1,
        initial_energy: energy,
        length: 0.0,
    })
}

/// Trace one arrival backwards through the map into a polyline of segments.
///
/// Each segment runs until it hits an occupied voxel (then bounces) or until
/// it escapes. Stopping rules, in order of precedence at a hit: the
/// reflection-order budget, then the energy ceiling (checked on the
/// reflected segment's starting energy), then reflection failure. A segment
/// that hits nothing is truncated where it leaves the map (or at
/// `max_ray_length`) and ends the path. The result always contains at least
/// one segment.
pub fn trace_path(
    signal: &IncomingSignal,
    grid: &OccupancyGrid,
    config: &TraceConfig,
) -> RayPath {
    let alpha = config.attenuation.coeff_at(signal.frequency);
    let mut rays = Vec::new();
    let mut current = init_ray(signal, config);
    let end = loop {
        let hit = match grid.traverse_ray(&current.origin, &current.direction, config.max_ray_length)
        {
            None => {
                let exit = grid.exit_distance(&current.origin, &current.direction);
                current.length = exit.min(config.max_ray_length);
                rays.push(current);
                break PathEnd::Escaped;
            }
            Some(h) => h,
        };
        current.length = hit.hit_length;

        // Surface normal from the local neighborhood; a neighborhood too
        // degenerate to fit falls back to reflecting straight back.
        let neighborhood = grid.collect_neighborhood(hit.voxel, NEIGHBORHOOD_HALF_WIDTH);
        let normal = grid
            .estimate_normal(&neighborhood, &current.direction)
            .unwrap_or_else(|_| UnitVec3::new_unchecked(-current.direction.into_inner()));
        let hit = HitRecord {
            voxel: hit.voxel,
            hit_length: hit.hit_length,
            hit_point: hit.hit_point,
            normal,
        };

        if current.order + 1 > config.max_order {
            rays.push(current);
            break PathEnd::OrderLimit;
        }
        match reflect(&current, &hit, config, alpha) {
            Ok(next) if next.initial_energy > config.energy_ceiling => {
                rays.push(current);
                break PathEnd::EnergyLimit;
            }
            Ok(next) => {
                rays.push(current);
                current = next;
            }
            Err(_) => {
                rays.push(current);
                break PathEnd::Degenerate;
            }
        }
    };
    RayPath {
        signal: *signal,
        rays,
        end,
    }
}

/// Write paths as CSV rows
/// `signal_id,order,ox,oy,oz,dx,dy,dz,length,energy`, one row per segment,
/// `signal_id` being the path's index in `paths`. Floats carry 9 significant
/// digits, so identical runs produce byte-identical files.
pub fn write_paths_csv<W: Write>(mut w: W, paths: &[RayPath]) -> std::io::Result<()> {
    writeln!(w, "signal_id,order,ox,oy,oz,dx,dy,dz,length,energy")?;
    for (id, path) in paths.iter().enumerate() {
        for ray in &path.rays {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                id,
                ray.order,
                sig9(ray.origin.x),
                sig9(ray.origin.y),
                sig9(ray.origin.z),
                sig9(ray.direction.x),
                sig9(ray.direction.y),
                sig9(ray.direction.z),
                sig9(ray.length),
                sig9(ray.initial_energy),
            )?;
        }
    }
    Ok(())
}

/// Format with 9 significant digits (scientific notation).
pub(crate) fn sig9(x: f64) -> String {
    format!("{x:.8e}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{direction, Aabb};
    use crate::map::{OccupancyGrid, VoxelKey};
    use approx::assert_relative_eq;

    fn unit(x: f64, y: f64, z: f64) -> UnitVec3 {
        direction(Vec3d::new(x, y, z)).unwrap()
    }

    fn empty_grid() -> OccupancyGrid {
        OccupancyGrid::new(
            Point3d::origin(),
            0.1,
            Aabb::new(Point3d::origin(), Point3d::new(10.0, 10.0, 10.0)),
        )
        .unwrap()
    }

    fn test_config(grid: &OccupancyGrid) -> TraceConfig {
        TraceConfig::for_grid(Point3d::new(5.0, 5.0, 5.0), grid)
    }

    #[test]
    fn init_ray_reverses_direction_and_keeps_energy() {
        let grid = empty_grid();
        let config = test_config(&grid);
        let signal = IncomingSignal::new(Vec3d::new(0.0, 0.0, -1.0), 4000.0, 0.25).unwrap();
        let ray = init_ray(&signal, &config);
        assert_eq!(ray.origin, config.mic_position);
        assert_relative_eq!(ray.direction.z, 1.0);
        assert_eq!(ray.order, 0);
        assert_eq!(ray.initial_energy, 0.25);
    }

    #[test]
    fn signal_rejects_bad_inputs() {
        assert!(IncomingSignal::new(Vec3d::zeros(), 4000.0, 1.0).is_err());
        assert!(IncomingSignal::new(Vec3d::x(), -1.0, 1.0).is_err());
        assert!(IncomingSignal::new(Vec3d::x(), 4000.0, 0.0).is_err());
    }

    #[test]
    fn energy_grows_along_inverse_ray() {
        let ray = AcousticRay {
            origin: Point3d::origin(),
            direction: unit(1.0, 0.0, 0.0),
            order: 0,
            initial_energy: 1.0,
            length: 10.0,
        };
        // Zero attenuation: energy is constant.
        assert_eq!(energy_at(&ray, 5.0, 0.0), 1.0);
        // alpha * l = 1: energy multiplied by e.
        assert_relative_eq!(
            energy_at(&ray, 100.0, 0.01),
            std::f64::consts::E,
            epsilon = 1e-15
        );
        let ray2 = AcousticRay {
            initial_energy: 2.0,
            ..ray
        };
        assert_relative_eq!(
            energy_at(&ray2, 100.0, 0.01),
            5.43656365691809,
            epsilon = 1e-12
        );
    }

    #[test]
    fn inverse_energy_undoes_forward_decay() {
        // Forward: E(l) = E0 * exp(-alpha l). Tracing back from the received
        // energy must reconstruct E0 exactly.
        let alpha = 0.0049;
        let l = 7.3;
        let e0 = 0.8;
        let received = e0 * (-alpha * l).exp();
        let ray = AcousticRay {
            origin: Point3d::origin(),
            direction: unit(1.0, 0.0, 0.0),
            order: 0,
            initial_energy: received,
            length: l,
        };
        assert_relative_eq!(energy_at(&ray, l, alpha), e0, max_relative = 1e-12);
    }

    #[test]
    fn specular_direction_mirrors_across_normal() {
        let n = unit(0.0, 0.0, 1.0);
        // 45 degrees onto the floor.
        let d = unit(1.0, 0.0, -1.0);
        let r = specular_direction(&d, &n).unwrap();
        assert_relative_eq!(r.x, 1.0 / 2.0_f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(r.z, 1.0 / 2.0_f64.sqrt(), epsilon = 1e-12);
        // Head-on: bounces straight back.
        let d = unit(0.0, 0.0, -1.0);
        let r = specular_direction(&d, &n).unwrap();
        assert_relative_eq!(r.z, 1.0, epsilon = 1e-12);
        // Tangent and receding directions are rejected.
        assert!(specular_direction(&unit(1.0, 0.0, 0.0), &n).is_err());
        assert!(specular_direction(&unit(0.0, 0.0, 1.0), &n).is_err());
    }

    #[test]
    fn specular_reflection_is_involutive() {
        let n = unit(0.3, -0.2, 0.93);
        let d = unit(0.5, 0.4, -0.76);
        let r1 = specular_direction(&d, &n).unwrap();
        // Reflecting the reversed outgoing ray reproduces the reversed
        // incident ray.
        let r1_rev = UnitVec3::new_unchecked(-r1.into_inner());
        let r2 = specular_direction(&r1_rev, &n).unwrap();
        assert_relative_eq!(r2.dot(&d), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn reflect_reamplifies_surface_loss() {
        let grid = empty_grid();
        let mut config = test_config(&grid);
        config.surface_absorption = 0.1;
        config.origin_offset = 0.05;
        let ray = AcousticRay {
            origin: Point3d::new(5.0, 5.0, 5.0),
            direction: unit(0.0, 0.0, -1.0),
            order: 0,
            initial_energy: 0.9,
            length: 0.0,
        };
        let hit = HitRecord {
            voxel: VoxelKey::new(50, 50, 0),
            hit_length: 5.0,
            hit_point: Point3d::new(5.0, 5.0, 0.0),
            normal: unit(0.0, 0.0, 1.0),
        };
        let next = reflect(&ray, &hit, &config, 0.0).unwrap();
        // 0.9 / (1 - 0.1) = 1.0 exactly (alpha = 0).
        assert_relative_eq!(next.initial_energy, 1.0, epsilon = 1e-15);
        assert_eq!(next.order, 1);
        assert_relative_eq!(next.origin.z, 0.05, epsilon = 1e-15);
        assert_relative_eq!(next.direction.z, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn reflect_combined_air_and_surface_gain() {
        // One 3 m segment at alpha = 0.01 into a 20%-absorbing surface:
        // 1 * exp(0.03) / 0.8.
        let grid = empty_grid();
        let mut config = test_config(&grid);
        config.surface_absorption = 0.2;
        let ray = AcousticRay {
            origin: Point3d::new(5.0, 5.0, 3.0),
            direction: unit(0.0, 0.0, -1.0),
            order: 0,
            initial_energy: 1.0,
            length: 0.0,
        };
        let hit = HitRecord {
            voxel: VoxelKey::new(50, 50, 0),
            hit_length: 3.0,
            hit_point: Point3d::new(5.0, 5.0, 0.0),
            normal: unit(0.0, 0.0, 1.0),
        };
        let next = reflect(&ray, &hit, &config, 0.01).unwrap();
        assert_relative_eq!(
            next.initial_energy,
            1.2880681674418961,
            max_relative = 1e-15
        );
    }

    #[test]
    fn attenuation_interpolates_and_clamps() {
        let table = AttenuationTable::room_air();
        assert_relative_eq!(table.coeff_at(2000.0), 0.0025);
        assert_relative_eq!(table.coeff_at(8000.0), 0.0113);
        // Midpoint of the 2k-4k band.
        assert_relative_eq!(table.coeff_at(3000.0), 0.0037, epsilon = 1e-15);
        // Clamped outside the tabulated range.
        assert_relative_eq!(table.coeff_at(100.0), 0.0025);
        assert_relative_eq!(table.coeff_at(96000.0), 0.0113);
    }

    #[test]
    fn attenuation_rejects_bad_tables() {
        assert!(AttenuationTable::new(vec![]).is_err());
        assert!(AttenuationTable::new(vec![(1000.0, -0.1)]).is_err());
        assert!(AttenuationTable::new(vec![(1000.0, 0.1), (1000.0, 0.2)]).is_err());
        // Single entry is fine and constant everywhere.
        let t = AttenuationTable::new(vec![(4000.0, 0.0049)]).unwrap();
        assert_eq!(t.coeff_at(1.0), 0.0049);
        assert_eq!(t.coeff_at(1e6), 0.0049);
    }

    #[test]
    fn trace_in_empty_map_escapes_at_the_wall() {
        let grid = empty_grid();
        let config = test_config(&grid);
        let signal = IncomingSignal::new(Vec3d::new(-1.0, 0.0, 0.0), 4000.0, 0.5).unwrap();
        let path = trace_path(&signal, &grid, &config);
        assert_eq!(path.rays.len(), 1);
        assert_eq!(path.end, PathEnd::Escaped);
        // Mic at x = 5, tracing along +x, grid ends at x = 10.
        assert_relative_eq!(path.rays[0].length, 5.0, epsilon = 1e-12);
    }

    #[test]
    fn trace_bounces_between_floor_and_ceiling_until_order_limit() {
        // Slab floor (z < 0.3) and ceiling (z > 9.7), mic in between, ray
        // straight down: the path ping-pongs vertically.
        let mut grid = empty_grid();
        grid.rasterize_box(&Aabb::new(Point3d::origin(), Point3d::new(10.0, 10.0, 0.3)));
        grid.rasterize_box(&Aabb::new(
            Point3d::new(0.0, 0.0, 9.7),
            Point3d::new(10.0, 10.0, 10.0),
        ));
        let mut config = test_config(&grid);
        config.energy_ceiling = f64::INFINITY; // isolate the order rule
        let signal = IncomingSignal::new(Vec3d::new(0.0, 0.0, 1.0), 4000.0, 1e-3).unwrap();
        let path = trace_path(&signal, &grid, &config);
        assert_eq!(path.end, PathEnd::OrderLimit);
        assert_eq!(path.rays.len() as u32, config.max_order + 1);
        for (i, ray) in path.rays.iter().enumerate() {
            assert_eq!(ray.order, i as u32);
            // Alternating up/down.
            let expect_down = i % 2 == 0;
            assert!(
                (ray.direction.z < 0.0) == expect_down,
                "segment {i} direction flipped wrong"
            );
        }
        // Segments join: each origin sits within a voxel of the previous
        // endpoint (offset off the surface).
        for w in path.rays.windows(2) {
            assert!((w[1].origin - w[0].endpoint()).norm() <= grid.resolution());
        }
        // Reconstructed energy grows monotonically through the path.
        for w in path.rays.windows(2) {
            assert!(w[1].initial_energy > w[0].initial_energy);
        }
    }

    #[test]
    fn trace_stops_at_energy_ceiling() {
        let mut grid = empty_grid();
        grid.rasterize_box(&Aabb::new(Point3d::origin(), Point3d::new(10.0, 10.0, 0.3)));
        grid.rasterize_box(&Aabb::new(
            Point3d::new(0.0, 0.0, 9.7),
            Point3d::new(10.0, 10.0, 10.0),
        ));
        let mut config = test_config(&grid);
        // First bounce starts at ~1.14, second would start at ~1.32: cap
        // between them.
        config.energy_ceiling = 1.2;
        config.surface_absorption = 0.1;
        let signal = IncomingSignal::new(Vec3d::new(0.0, 0.0, 1.0), 4000.0, 1.0).unwrap();
        let path = trace_path(&signal, &grid, &config);
        assert_eq!(path.end, PathEnd::EnergyLimit);
        assert_eq!(path.rays.len(), 2);
        assert!(path.rays.last().unwrap().initial_energy <= config.energy_ceiling);
    }

    #[test]
    fn order_limit_takes_precedence_over_energy_limit() {
        // Both rules would fire on the same hit; the order budget wins.
        let mut grid = empty_grid();
        grid.rasterize_box(&Aabb::new(Point3d::origin(), Point3d::new(10.0, 10.0, 0.3)));
        let mut config = test_config(&grid);
        config.max_order = 0;
        config.energy_ceiling = 1e-9;
        let signal = IncomingSignal::new(Vec3d::new(0.0, 0.0, 1.0), 4000.0, 1.0).unwrap();
        let path = trace_path(&signal, &grid, &config);
        assert_eq!(path.end, PathEnd::OrderLimit);
        assert_eq!(path.rays.len(), 1);
    }

    #[test]
    fn mirror_bounce_passes_through_reflected_source() {
        // Forward story: source S above a floor, mic M elsewhere; the
        // floor-bounce arrival reaches M from the reflection point R. The
        // inverse trace of that arrival must bounce at ~R and its second
        // segment must pass close to S.
        let mut grid = empty_grid();
        grid.rasterize_box(&Aabb::new(Point3d::origin(), Point3d::new(10.0, 10.0, 0.3)));
        let source = Point3d::new(4.0, 5.0, 1.5);
        let mic = Point3d::new(6.0, 5.0, 1.5);
        // Image of S across the floor surface z = 0.3: (4, 5, -0.9).
        let image = Point3d::new(source.x, source.y, 2.0 * 0.3 - source.z);
        let arrival_dir = direction(mic - image).unwrap(); // toward the mic
        let reflection_z = 0.3;
        let expected_r = {
            // Where the image-to-mic segment crosses the floor plane.
            let t = (reflection_z - image.z) / (mic.z - image.z);
            image + (mic - image) * t
        };

        let mut config = test_config(&grid);
        config.mic_position = mic;
        let signal = IncomingSignal::new(arrival_dir.into_inner(), 4000.0, 0.5).unwrap();
        let path = trace_path(&signal, &grid, &config);
        assert!(path.rays.len() >= 2, "expected at least one bounce");
        let first = &path.rays[0];
        let hit_point = first.endpoint();
        assert!(
            (hit_point - expected_r).norm() <= 2.0 * grid.resolution(),
            "bounce at {hit_point:?}, expected near {expected_r:?}"
        );
        // Distance from S to the second segment's supporting line.
        let second = &path.rays[1];
        let to_s = source - second.origin;
        let lateral = (to_s - second.direction.into_inner() * to_s.dot(&second.direction)).norm();
        assert!(
            lateral <= 2.0 * grid.resolution(),
            "second segment misses the source by {lateral:.3} m"
        );
    }

    #[test]
    fn paths_csv_has_one_row_per_segment() {
        let grid = empty_grid();
        let config = test_config(&grid);
        let signals = [
            IncomingSignal::new(Vec3d::new(-1.0, 0.0, 0.0), 4000.0, 0.5).unwrap(),
            IncomingSignal::new(Vec3d::new(0.0, -1.0, 0.0), 4000.0, 0.25).unwrap(),
        ];
        let paths: Vec<RayPath> = signals
            .iter()
            .map(|s| trace_path(s, &grid, &config))
            .collect();
        let mut buf = Vec::new();
        write_paths_csv(&mut buf, &paths).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "signal_id,order,ox,oy,oz,dx,dy,dz,length,energy");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,0,"));
        assert!(lines[2].starts_with("1,0,"));
        // 9 significant digits.
        assert!(lines[1].contains("5.00000000e0"));
    }
}
