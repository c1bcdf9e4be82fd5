//! Small geometric vocabulary used throughout the crate.

use nalgebra::{Point3, Unit, Vector3};

use crate::error::{Error, Result};

/// 3D point in meters.
pub type Point3d = Point3<f64>;
/// 3D displacement in meters.
pub type Vec3d = Vector3<f64>;
/// Unit-length direction.
pub type UnitVec3 = Unit<Vector3<f64>>;

/// Normalize a raw vector into a direction, rejecting vectors too short to
/// carry one.
pub fn direction(v: Vec3d) -> Result<UnitVec3> {
    UnitVec3::try_new(v, 1e-12)
        .ok_or(Error::DegenerateGeometry("zero-length direction vector"))
}

/// Axis-aligned box, closed on all faces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Point3d,
    pub max: Point3d,
}

impl Aabb {
    /// Box spanning the two corner points; the corners may be given in any
    /// order per axis.
    pub fn new(a: Point3d, b: Point3d) -> Self {
        Aabb {
            min: Point3d::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z)),
            max: Point3d::new(a.x.max(b.x), a.y.max(b.y), a.z.max(b.z)),
        }
    }

    /// Whether `p` lies inside or on the boundary.
    pub fn contains(&self, p: &Point3d) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// Whether `p` lies strictly inside (off every face).
    pub fn contains_strictly(&self, p: &Point3d) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }

    pub fn center(&self) -> Point3d {
        nalgebra::center(&self.min, &self.max)
    }

    /// Corner-to-corner diagonal length.
    pub fn diagonal(&self) -> f64 {
        (self.max - self.min).norm()
    }

    /// Box grown by `margin` on every face.
    pub fn inflated(&self, margin: f64) -> Aabb {
        let m = Vec3d::repeat(margin);
        Aabb {
            min: self.min - m,
            max: self.max + m,
        }
    }

    /// Zero volume along at least one axis.
    pub fn is_degenerate(&self) -> bool {
        (0..3).any(|a| self.max[a] <= self.min[a])
    }

    /// Distance along `dir` from `origin` (assumed inside or on the box) to
    /// where the ray leaves the box. Returns 0.0 if the ray only moves away
    /// from an origin already on the boundary.
    pub fn exit_distance(&self, origin: &Point3d, dir: &UnitVec3) -> f64 {
        let mut t_exit = f64::INFINITY;
        for a in 0..3 {
            let d = dir[a];
            let t = if d > 0.0 {
                (self.max[a] - origin[a]) / d
            } else if d < 0.0 {
                (self.min[a] - origin[a]) / d
            } else {
                continue;
            };
            t_exit = t_exit.min(t);
        }
        t_exit.max(0.0)
    }

    /// Clamp a point to the box, component-wise.
    pub fn clamp_point(&self, p: &Point3d) -> Point3d {
        Point3d::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
            p.z.clamp(self.min.z, self.max.z),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn new_orders_corners_per_axis() {
        let b = Aabb::new(Point3d::new(1.0, -2.0, 5.0), Point3d::new(0.0, 3.0, 4.0));
        assert_eq!(b.min, Point3d::new(0.0, -2.0, 4.0));
        assert_eq!(b.max, Point3d::new(1.0, 3.0, 5.0));
    }

    #[test]
    fn contains_is_closed_on_faces() {
        let b = Aabb::new(Point3d::origin(), Point3d::new(1.0, 1.0, 1.0));
        assert!(b.contains(&Point3d::new(0.0, 0.5, 1.0)));
        assert!(!b.contains_strictly(&Point3d::new(0.0, 0.5, 1.0)));
        assert!(b.contains_strictly(&Point3d::new(0.5, 0.5, 0.5)));
        assert!(!b.contains(&Point3d::new(1.0 + 1e-12, 0.5, 0.5)));
    }

    #[test]
    fn exit_distance_axis_aligned() {
        let b = Aabb::new(Point3d::origin(), Point3d::new(4.0, 2.0, 2.0));
        let o = Point3d::new(1.0, 1.0, 1.0);
        let d = direction(Vec3d::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(b.exit_distance(&o, &d), 3.0);
        let d = direction(Vec3d::new(0.0, -1.0, 0.0)).unwrap();
        assert_relative_eq!(b.exit_distance(&o, &d), 1.0);
    }

    #[test]
    fn exit_distance_diagonal() {
        let b = Aabb::new(Point3d::origin(), Point3d::new(2.0, 2.0, 2.0));
        let o = Point3d::new(1.0, 1.0, 1.0);
        let d = direction(Vec3d::new(1.0, 1.0, 1.0)).unwrap();
        // Leaves through the corner: component speed 1/sqrt(3), 1 m to go.
        assert_relative_eq!(b.exit_distance(&o, &d), 3.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn direction_rejects_zero_vector() {
        assert!(direction(Vec3d::zeros()).is_err());
    }
}
