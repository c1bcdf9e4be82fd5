//! Sparse voxel occupancy map with ray traversal and surface normal
//! estimation.
//!
//! The map discretizes the environment into cubic voxels of edge
//! `resolution`, addressed by integer [`VoxelKey`]s relative to an origin
//! corner. Only occupied voxels are stored (hash set), so memory scales with
//! surface area rather than volume. Rays are walked voxel-by-voxel with the
//! Amanatides–Woo traversal: per axis, the parameter distance to the next
//! voxel boundary (`t_max`) and the distance between successive boundaries
//! (`t_delta`) are maintained, and each step advances the axis with the
//! smallest `t_max`. This visits exactly the voxels pierced by the segment —
//! no gaps, no repeats — at one comparison per step.
//!
//! Surface normals are not stored; they are estimated on demand by fitting a
//! plane (via the eigendecomposition of the scatter matrix) to the occupied
//! voxel centers in a cubic neighborhood of the hit cell. That keeps the map
//! a plain boolean grid while still supporting specular reflection.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::geom::{direction, Aabb, Point3d, UnitVec3, Vec3d};

/// Integer address of one voxel: the cell spans
/// `origin + res*[i, i+1)` per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub ix: i32,
    pub iy: i32,
    pub iz: i32,
}

impl VoxelKey {
    pub fn new(ix: i32, iy: i32, iz: i32) -> Self {
        VoxelKey { ix, iy, iz }
    }

    fn axis(&self, a: usize) -> i32 {
        match a {
            0 => self.ix,
            1 => self.iy,
            _ => self.iz,
        }
    }

    fn axis_mut(&mut self, a: usize) -> &mut i32 {
        match a {
            0 => &mut self.ix,
            1 => &mut self.iy,
            _ => &mut self.iz,
        }
    }
}

/// Result of walking a ray into the map: the first occupied voxel pierced.
///
/// `hit_length` is the distance from the ray origin to where the ray *enters*
/// that voxel (0.0 when the origin already sits inside an occupied cell), and
/// `hit_point` is the corresponding point on the ray.
#[derive(Clone, Copy, Debug)]
pub struct VoxelHit {
    pub voxel: VoxelKey,
    pub hit_length: f64,
    pub hit_point: Point3d,
}

/// A [`VoxelHit`] augmented with the estimated surface normal at the hit,
/// oriented against the incoming ray.
#[derive(Clone, Copy, Debug)]
pub struct HitRecord {
    pub voxel: VoxelKey,
    pub hit_length: f64,
    pub hit_point: Point3d,
    pub normal: UnitVec3,
}

/// Occupied voxels within a cubic window around a center cell, for normal
/// estimation.
#[derive(Clone, Debug)]
pub struct LocalNeighborhood {
    pub center: VoxelKey,
    pub half_width: u32,
    /// Occupied cells in the window, in deterministic (z, y, x) scan order.
    pub cells: Vec<VoxelKey>,
}

/// Sparse boolean voxel grid over a bounded axis-aligned region.
#[derive(Clone, Debug)]
pub struct OccupancyGrid {
    origin: Point3d,
    resolution: f64,
    bounds: Aabb,
    occupied: HashSet<VoxelKey>,
}

/// Eigenvalue ratio below which a neighborhood is considered collinear
/// (rank < 2) and cannot define a plane.
const PLANE_RANK_RATIO: f64 = 1e-9;

impl OccupancyGrid {
    /// Empty grid. `resolution` must be positive and `bounds` must have
    /// positive volume.
    pub fn new(origin: Point3d, resolution: f64, bounds: Aabb) -> Result<Self> {
        if !(resolution > 0.0) || !resolution.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "grid resolution must be positive, got {resolution}"
            )));
        }
        if bounds.is_degenerate() {
            return Err(Error::InvalidConfig(
                "grid bounds must have positive volume".into(),
            ));
        }
        Ok(OccupancyGrid {
            origin,
            resolution,
            bounds,
            occupied: HashSet::new(),
        })
    }

    pub fn origin(&self) -> Point3d {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied.len()
    }

    pub fn iter_occupied(&self) -> impl Iterator<Item = VoxelKey> + '_ {
        self.occupied.iter().copied()
    }

    /// Occupied keys in ascending `(ix, iy, iz)` order.
    pub fn sorted_occupied(&self) -> Vec<VoxelKey> {
        let mut keys: Vec<VoxelKey> = self.occupied.iter().copied().collect();
        keys.sort_unstable();
        keys
    }

    /// Key of the voxel containing `p` (half-open cells: a point on a shared
    /// face belongs to the higher-index cell).
    pub fn key_at(&self, p: &Point3d) -> VoxelKey {
        let rel = (p - self.origin) / self.resolution;
        VoxelKey::new(
            rel.x.floor() as i32,
            rel.y.floor() as i32,
            rel.z.floor() as i32,
        )
    }

    /// Center point of the voxel addressed by `key`.
    pub fn center_of(&self, key: VoxelKey) -> Point3d {
        self.origin
            + Vec3d::new(
                (key.ix as f64 + 0.5) * self.resolution,
                (key.iy as f64 + 0.5) * self.resolution,
                (key.iz as f64 + 0.5) * self.resolution,
            )
    }

    /// Whether the voxel's center lies within the grid bounds.
    pub fn key_in_bounds(&self, key: VoxelKey) -> bool {
        self.bounds.contains(&self.center_of(key))
    }

    pub fn is_occupied(&self, key: VoxelKey) -> bool {
        self.occupied.contains(&key)
    }

    /// Mark one voxel occupied. Idempotent; rejects keys whose centers fall
    /// outside the grid bounds.
    pub fn set_occupied(&mut self, key: VoxelKey) -> Result<()> {
        if !self.key_in_bounds(key) {
            return Err(Error::OutOfBounds(key));
        }
        self.occupied.insert(key);
        Ok(())
    }

    /// Mark every voxel whose center lies inside `shape` (and inside the
    /// grid bounds) as occupied. A degenerate box occupies the voxels whose
    /// centers lie exactly on it, possibly none.
    pub fn rasterize_box(&mut self, shape: &Aabb) {
        let lo = self.key_at(&shape.min);
        let hi = self.key_at(&shape.max);
        for iz in lo.iz..=hi.iz {
            for iy in lo.iy..=hi.iy {
                for ix in lo.ix..=hi.ix {
                    let key = VoxelKey::new(ix, iy, iz);
                    let c = self.center_of(key);
                    if shape.contains(&c) && self.bounds.contains(&c) {
                        self.occupied.insert(key);
                    }
                }
            }
        }
    }

    /// Walk the ray from `origin` along `dir` and return the first occupied
    /// voxel within `max_length`, or `None` if the ray leaves the grid or
    /// runs out of length first. An origin already inside an occupied voxel
    /// reports a hit of length zero.
    pub fn traverse_ray(
        &self,
        origin: &Point3d,
        dir: &UnitVec3,
        max_length: f64,
    ) -> Option<VoxelHit> {
        let mut key = self.key_at(origin);
        if self.is_occupied(key) {
            return Some(VoxelHit {
                voxel: key,
                hit_length: 0.0,
                hit_point: *origin,
            });
        }

        let limit = max_length.min(self.bounds.exit_distance(origin, dir));
        let rel = origin - self.origin;
        let res = self.resolution;
        let mut step = [0i32; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let d = dir[a];
            if d > 0.0 {
                step[a] = 1;
                t_delta[a] = res / d;
                t_max[a] = ((key.axis(a) + 1) as f64 * res - rel[a]) / d;
            } else if d < 0.0 {
                step[a] = -1;
                t_delta[a] = -res / d;
                t_max[a] = (key.axis(a) as f64 * res - rel[a]) / d;
            }
        }

        loop {
            // Advance along the axis whose boundary is nearest.
            let mut axis = 0;
            if t_max[1] < t_max[axis] {
                axis = 1;
            }
            if t_max[2] < t_max[axis] {
                axis = 2;
            }
            let t = t_max[axis];
            if !(t <= limit) {
                return None;
            }
            *key.axis_mut(axis) += step[axis];
            t_max[axis] += t_delta[axis];
            if self.is_occupied(key) {
                return Some(VoxelHit {
                    voxel: key,
                    hit_length: t,
                    hit_point: origin + dir.into_inner() * t,
                });
            }
        }
    }

    /// Distance from `origin` along `dir` to the point where the ray leaves
    /// the grid bounds.
    pub fn exit_distance(&self, origin: &Point3d, dir: &UnitVec3) -> f64 {
        self.bounds.exit_distance(origin, dir)
    }

    /// Occupied voxels in the cube of half-width `half_width` cells around
    /// `center` (a `(2h+1)^3` window, center included).
    pub fn collect_neighborhood(&self, center: VoxelKey, half_width: u32) -> LocalNeighborhood {
        let h = half_width as i32;
        let mut cells = Vec::new();
        for dz in -h..=h {
            for dy in -h..=h {
                for dx in -h..=h {
                    let key = VoxelKey::new(center.ix + dx, center.iy + dy, center.iz + dz);
                    if self.is_occupied(key) {
                        cells.push(key);
                    }
                }
            }
        }
        LocalNeighborhood {
            center,
            half_width,
            cells,
        }
    }

    /// Estimate the surface normal at a neighborhood of occupied cells by
    /// fitting a plane to their centers, then orient it against `incoming`
    /// so that `n̂ · incoming < 0`.
    ///
    /// Fails if the neighborhood has fewer than three cells, if the cells
    /// are collinear (no unique plane), or if the fitted plane is parallel
    /// to the incoming direction (no way to orient).
    pub fn estimate_normal(
        &self,
        neighborhood: &LocalNeighborhood,
        incoming: &UnitVec3,
    ) -> Result<UnitVec3> {
        let centers: Vec<Point3d> = neighborhood
            .cells
            .iter()
            .map(|&k| self.center_of(k))
            .collect();
        let normal = fit_plane_normal(&centers)?;
        let dot = normal.dot(incoming);
        if dot.abs() < 1e-12 {
            return Err(Error::DegenerateGeometry(
                "fitted plane is parallel to the incoming ray",
            ));
        }
        Ok(if dot < 0.0 {
            normal
        } else {
            UnitVec3::new_unchecked(-normal.into_inner())
        })
    }

    /// Serialize to the plain-text map format (see [`OccupancyGrid::read`]).
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        let mut out = String::new();
        writeln!(
            out,
            "voxelgrid {} {} {} {} {} {} {} {} {} {}",
            self.resolution,
            self.origin.x,
            self.origin.y,
            self.origin.z,
            self.bounds.min.x,
            self.bounds.min.y,
            self.bounds.min.z,
            self.bounds.max.x,
            self.bounds.max.y,
            self.bounds.max.z,
        )
        .expect("writing to String cannot fail");
        for key in self.sorted_occupied() {
            writeln!(out, "{} {} {}", key.ix, key.iy, key.iz).expect("writing to String");
        }
        w.write_all(out.as_bytes())?;
        Ok(())
    }

    /// Parse the plain-text map format: a header line
    /// `voxelgrid <resolution> <ox> <oy> <oz> <min xyz> <max xyz>` followed
    /// by one `ix iy iz` line per occupied voxel.
    pub fn read<R: Read>(r: R) -> Result<Self> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::MapFormat {
                line: 1,
                message: "empty file".into(),
            })?
            .map_err(Error::Io)?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 11 || fields[0] != "voxelgrid" {
            return Err(Error::MapFormat {
                line: 1,
                message: "expected `voxelgrid` header with 10 numeric fields".into(),
            });
        }
        let mut nums = [0.0f64; 10];
        for (i, f) in fields[1..].iter().enumerate() {
            nums[i] = f.parse().map_err(|_| Error::MapFormat {
                line: 1,
                message: format!("bad number `{f}` in header"),
            })?;
        }
        let origin = Point3d::new(nums[1], nums[2], nums[3]);
        let bounds = Aabb::new(
            Point3d::new(nums[4], nums[5], nums[6]),
            Point3d::new(nums[7], nums[8], nums[9]),
        );
        let mut grid = OccupancyGrid::new(origin, nums[0], bounds)?;
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line.map_err(Error::Io)?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let parts: Vec<&str> = trimmed.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::MapFormat {
                    line: line_no,
                    message: format!("expected 3 integers, got `{trimmed}`"),
                });
            }
            let mut ints = [0i32; 3];
            for (i, p) in parts.iter().enumerate() {
                ints[i] = p.parse().map_err(|_| Error::MapFormat {
                    line: line_no,
                    message: format!("bad integer `{p}`"),
                })?;
            }
            grid.set_occupied(VoxelKey::new(ints[0], ints[1], ints[2]))?;
        }
        Ok(grid)
    }

    /// Write the map to a file. Rows are sorted, so equal grids produce
    /// byte-identical files.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read(file)
    }
}

/// Normal of the best-fit plane through `points` (unoriented): the
/// eigenvector of the scatter matrix with the smallest eigenvalue.
///
/// Fails when fewer than three points are given or when the points are
/// collinear, i.e. the two largest eigenvalues do not both dominate —
/// then no unique plane exists.
pub fn fit_plane_normal(points: &[Point3d]) -> Result<UnitVec3> {
    if points.len() < 3 {
        return Err(Error::DegenerateGeometry(
            "plane fit needs at least three points",
        ));
    }
    let n = points.len() as f64;
    let mut mean = Vec3d::zeros();
    for p in points {
        mean += p.coords;
    }
    mean /= n;
    let mut scatter = Matrix3::zeros();
    for p in points {
        let d = p.coords - mean;
        scatter += d * d.transpose();
    }
    let eigen = SymmetricEigen::new(scatter);
    // Sort axis indices by ascending eigenvalue.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eigen.eigenvalues[a]
            .partial_cmp(&eigen.eigenvalues[b])
            .expect("eigenvalues of a real symmetric matrix are finite")
    });
    let largest = eigen.eigenvalues[order[2]];
    let middle = eigen.eigenvalues[order[1]];
    if largest <= 0.0 || middle <= largest * PLANE_RANK_RATIO {
        return Err(Error::DegenerateGeometry(
            "points are collinear; no unique plane",
        ));
    }
    Ok(UnitVec3::new_normalize(
        eigen.eigenvectors.column(order[0]).into(),
    ))
}
