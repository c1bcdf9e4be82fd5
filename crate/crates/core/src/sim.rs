//! Forward acoustic simulator: image sources over box geometry.
//!
//! The inverse pipeline needs observations to chew on; this module makes
//! them from first principles, so every claim about the localizer can be
//! tested against known ground truth without hardware.
//!
//! Specular reflections in a box-shaped world are generated with the image
//! source construction: reflecting a source across a wall plane yields a
//! virtual source whose straight line to the microphone has exactly the
//! length and direction of the physical bounced path. Chaining mirrors
//! enumerates every reflection sequence up to a chosen order. Each candidate
//! is then *validated* by unfolding it back into its physical polyline:
//! every reflection point must land on its actual (finite) face, and every
//! leg must clear the voxel map — this is what kills paths that would pass
//! through an obstacle.
//!
//! Valid arrivals become [`IncomingSignal`]s: direction pointing at the
//! microphone (optionally blurred by a Gaussian angular error — rotation by
//! |N(0, σ)| about a random axis perpendicular to the true direction),
//! energy decayed by air absorption over the full path length and by the
//! surface loss at each bounce. The decay here and the re-amplification in
//! the tracer are exact inverses by construction, which the tests pin down.

use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::geom::{direction, Aabb, Point3d, UnitVec3, Vec3d};
use crate::map::OccupancyGrid;
use crate::scenario::Scenario;
use crate::trace::IncomingSignal;

/// Reflective geometry: the interior air volume and solid boxes within it.
#[derive(Clone, Debug)]
pub struct Room {
    pub interior: Aabb,
    pub obstacles: Vec<Aabb>,
}

/// One reflecting rectangle: an axis-aligned plane patch with the air on a
/// known side.
#[derive(Clone, Copy, Debug)]
pub struct Face {
    /// Axis perpendicular to the face (0 = x, 1 = y, 2 = z).
    pub axis: usize,
    /// Coordinate of the face plane along `axis`.
    pub plane: f64,
    /// Extent along the next axis (`(axis + 1) % 3`).
    pub u_range: (f64, f64),
    /// Extent along the second-next axis (`(axis + 2) % 3`).
    pub v_range: (f64, f64),
    /// +1.0 when the air lies on the greater-coordinate side of the plane,
    /// -1.0 otherwise.
    pub air_side: f64,
}

impl Face {
    /// Mirror a point across the face plane.
    pub fn mirror(&self, p: &Point3d) -> Point3d {
        let mut q = *p;
        q[self.axis] = 2.0 * self.plane - p[self.axis];
        q
    }

    /// Whether a point on the plane lies within the face rectangle
    /// (with a hair of tolerance for float drift).
    pub fn contains(&self, p: &Point3d) -> bool {
        let u = p[(self.axis + 1) % 3];
        let v = p[(self.axis + 2) % 3];
        const EPS: f64 = 1e-9;
        u >= self.u_range.0 - EPS
            && u <= self.u_range.1 + EPS
            && v >= self.v_range.0 - EPS
            && v <= self.v_range.1 + EPS
    }
}

impl Room {
    /// All reflecting faces: the six inward-facing interior faces plus the
    /// six outward-facing faces of each obstacle.
    pub fn faces(&self) -> Vec<Face> {
        let mut faces = Vec::with_capacity(6 * (1 + self.obstacles.len()));
        let mut push_box = |b: &Aabb, air_outside: bool| {
            for axis in 0..3 {
                let u = (axis + 1) % 3;
                let v = (axis + 2) % 3;
                let u_range = (b.min[u], b.max[u]);
                let v_range = (b.min[v], b.max[v]);
                // At the box's min plane, the outside is the lesser side.
                let (min_side, max_side) = if air_outside {
                    (-1.0, 1.0)
                } else {
                    (1.0, -1.0)
                };
                faces.push(Face {
                    axis,
                    plane: b.min[axis],
                    u_range,
                    v_range,
                    air_side: min_side,
                });
                faces.push(Face {
                    axis,
                    plane: b.max[axis],
                    u_range,
                    v_range,
                    air_side: max_side,
                });
            }
        };
        push_box(&self.interior, false);
        for ob in &self.obstacles {
            push_box(ob, true);
        }
        faces
    }
}

/// A mirror sequence: the image position after reflecting the source across
/// `faces` in order (indices into the room's face list), first bounce first.
#[derive(Clone, Debug)]
pub(crate) struct ImagePath {
    pub position: Point3d,
    pub faces: Vec<usize>,
}

/// Enumerate image positions breadth-first up to `max_order` reflections.
/// Consecutive repeats of the same face cancel and are skipped; images
/// landing within 1e-6 of an already-seen position are dropped (lowest
/// order wins, since enumeration is breadth-first).
pub(crate) fn enumerate_image_paths(
    faces: &[Face],
    source: &Point3d,
    max_order: u32,
) -> Vec<ImagePath> {
    let quantize = |p: &Point3d| -> (i64, i64, i64) {
        (
            (p.x * 1e6).round() as i64,
            (p.y * 1e6).round() as i64,
            (p.z * 1e6).round() as i64,
        )
    };
    let mut seen = std::collections::HashSet::new();
    seen.insert(quantize(source));
    let mut all = vec![ImagePath {
        position: *source,
        faces: Vec::new(),
    }];
    let mut layer_start = 0;
    for _ in 0..max_order {
        let layer_end = all.len();
        for idx in layer_start..layer_end {
            for (fi, face) in faces.iter().enumerate() {
                if all[idx].faces.last() == Some(&fi) {
                    continue;
                }
                let mirrored = face.mirror(&all[idx].position);
                if !seen.insert(quantize(&mirrored)) {
                    continue;
                }
                let mut chain = all[idx].faces.clone();
                chain.push(fi);
                all.push(ImagePath {
                    position: mirrored,
                    faces: chain,
                });
            }
        }
        layer_start = layer_end;
    }
    all
}

/// Image source positions with their reflection counts, deduplicated within
/// 1e-6, up to `max_order` bounces. Order 0 is the source itself.
pub fn image_sources(room: &Room, source: &Point3d, max_order: u32) -> Vec<(Point3d, u32)> {
    enumerate_image_paths(&room.faces(), source, max_order)
        .into_iter()
        .map(|ip| (ip.position, ip.faces.len() as u32))
        .collect()
}

/// Whether the straight segment from `from` to `to` crosses any occupied
/// voxel, ignoring hits within one voxel diagonal of `to` (so a target on a
/// surface does not occlude itself).
pub fn visible(grid: &OccupancyGrid, from: &Point3d, to: &Point3d) -> bool {
    let end_clearance = grid.resolution() * 3.0_f64.sqrt();
    segment_clear(grid, from, to, 0.0, end_clearance)
}

/// Segment obstruction test with configurable clearance at both endpoints:
/// the first and last `*_clear` meters of the segment are not checked.
/// Endpoints that legitimately sit on voxelized surfaces (reflection
/// points) get a one-voxel-diagonal clearance; endpoints in open air get
/// none.
pub(crate) fn segment_clear(
    grid: &OccupancyGrid,
    from: &Point3d,
    to: &Point3d,
    start_clear: f64,
    end_clear: f64,
) -> bool {
    let delta = to - from;
    let dist = delta.norm();
    let usable = dist - start_clear - end_clear;
    if usable <= 0.0 {
        return true;
    }
    let Ok(dir) = direction(delta) else {
        return true;
    };
    let origin = from + dir.into_inner() * start_clear;
    grid.traverse_ray(&origin, &dir, usable).is_none()
}

/// A validated arrival: the physical polyline exists and is unobstructed.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Arrival {
    /// Last point the wave departs before reaching the microphone: the
    /// final reflection point, or the source itself for the direct path.
    pub last_point: Point3d,
    /// Total path length from source to microphone along every leg.
    pub total_length: f64,
    /// Number of reflections.
    pub order: u32,
}

/// Unfold a mirror sequence into its physical polyline and check it: every
/// reflection point must land on its finite face approached from the air
/// side, and every leg must clear the map. Returns the arrival summary, or
/// `None` if the path is geometrically impossible or blocked.
pub(crate) fn validate_image_path(
    faces: &[Face],
    image: &ImagePath,
    source: &Point3d,
    mic: &Point3d,
    grid: &OccupancyGrid,
) -> Option<Arrival> {
    let surface_clear = grid.resolution() * 3.0_f64.sqrt();
    let total_length = (mic - image.position).norm();
    if image.faces.is_empty() {
        return segment_clear(grid, source, mic, 0.0, 0.0).then_some(Arrival {
            last_point: *source,
            total_length,
            order: 0,
        });
    }

    // Walk backwards from the microphone. `target` is the image the current
    // leg heads toward; peeling one mirror off per face restores the earlier
    // images until the bare source remains.
    let mut target = image.position;
    let mut prev = *mic;
    let mut last_point: Option<Point3d> = None;
    for (step, &fi) in image.faces.iter().enumerate().rev() {
        let face = &faces[fi];
        // The leg must run from the air side into the face plane.
        let prev_side = (prev[face.axis] - face.plane) * face.air_side;
        let target_side = (target[face.axis] - face.plane) * face.air_side;
        if prev_side <= 0.0 || target_side >= 0.0 {
            return None;
        }
        let t = prev_side / (prev_side - target_side);
        let hit = prev + (target - prev) * t;
        if !face.contains(&hit) {
            return None;
        }
        let start_clear = if step == image.faces.len() - 1 {
            0.0 // the first walked leg starts at the microphone, in open air
        } else {
            surface_clear
        };
        if !segment_clear(grid, &prev, &hit, start_clear, surface_clear) {
            return None;
        }
        last_point.get_or_insert(hit);
        target = face.mirror(&target);
        prev = hit;
    }
    // Final leg back to the source.
    if !segment_clear(grid, &prev, source, surface_clear, 0.0) {
        return None;
    }
    Some(Arrival {
        last_point: last_point.expect("at least one reflection"),
        total_length,
        order: image.faces.len() as u32,
    })
}

/// Blur a direction by a random angle: magnitude |N(0, sigma)|, applied as a
/// rotation about a uniformly random axis perpendicular to the direction.
pub fn perturb_direction(v: &UnitVec3, sigma_rad: f64, rng: &mut impl Rng) -> UnitVec3 {
    if sigma_rad <= 0.0 {
        return *v;
    }
    let angle = Normal::new(0.0, sigma_rad)
        .expect("finite positive sigma")
        .sample(rng)
        .abs();
    let phi = rng.gen_range(0.0..std::f64::consts::TAU);
    // Orthonormal frame around v.
    let e1 = pick_orthonormal(v);
    let e2 = UnitVec3::new_normalize(v.cross(&e1));
    let axis =
        UnitVec3::new_normalize(e1.into_inner() * phi.cos() + e2.into_inner() * phi.sin());
    let rot = nalgebra::Rotation3::from_axis_angle(&axis, angle);
    UnitVec3::new_normalize(rot * v.into_inner())
}

fn pick_orthonormal(v: &UnitVec3) -> UnitVec3 {
    // Cross with the coordinate axis least aligned with v.
    let a = v.x.abs();
    let b = v.y.abs();
    let c = v.z.abs();
    let basis = if a <= b && a <= c {
        Vec3d::x()
    } else if b <= c {
        Vec3d::y()
    } else {
        Vec3d::z()
    };
    UnitVec3::new_normalize(v.cross(&basis))
}

/// One simulated observation instant.
#[derive(Clone, Debug)]
pub struct ObservationFrame {
    pub time: f64,
    /// Ground-truth source position at this time.
    pub source_position: Point3d,
    /// Whether the source was emitting; silent frames carry no signals.
    pub emitting: bool,
    pub signals: Vec<IncomingSignal>,
}

/// Synthesize the microphone observations for one instant of a scenario:
/// every validated image-source arrival up to the scenario's reflection
/// order, plus any configured clutter arrivals from random directions.
pub fn generate_frame(
    scenario: &Scenario,
    grid: &OccupancyGrid,
    time: f64,
    rng: &mut impl Rng,
) -> ObservationFrame {
    let (source, emitting) = scenario.source_state(time);
    let mut frame = ObservationFrame {
        time,
        source_position: source,
        emitting,
        signals: Vec::new(),
    };
    if !emitting {
        return frame;
    }
    let mic = scenario.mic_point();
    let room = scenario.room_geometry();
    let faces = room.faces();
    let alpha = scenario.attenuation().coeff_at(scenario.frequency);
    let sigma = scenario.noise_angle_rad();
    for image in enumerate_image_paths(&faces, &source, scenario.max_image_order) {
        let Some(arrival) = validate_image_path(&faces, &image, &source, &mic, grid) else {
            continue;
        };
        let Ok(true_dir) = direction(mic - arrival.last_point) else {
            continue; // arrival point coincides with the mic
        };
        let observed = perturb_direction(&true_dir, sigma, rng);
        let energy = scenario.source_energy
            * (-alpha * arrival.total_length).exp()
            * (1.0 - scenario.surface_absorption).powi(arrival.order as i32);
        frame.signals.push(IncomingSignal {
            direction: observed,
            frequency: scenario.frequency,
            energy,
        });
    }
    for _ in 0..scenario.clutter_count {
        let u: [f64; 3] = UnitSphere.sample(rng);
        let energy = scenario.source_energy * rng.gen_range(0.05..0.5);
        frame.signals.push(IncomingSignal {
            direction: UnitVec3::new_normalize(Vec3d::new(u[0], u[1], u[2])),
            frequency: scenario.frequency,
            energy,
        });
    }
    frame
}
