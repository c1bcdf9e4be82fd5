//! Monte Carlo localization over inverse ray paths.
//!
//! The true source position is somewhere on (or near) the traced polylines —
//! but each arrival constrains it only to *its* path, and measurement noise
//! scatters the paths around the truth. A particle filter turns that soup
//! into a point estimate: a cloud of candidate positions is repeatedly
//! perturbed, weighted by how close each candidate lies to the evidence, and
//! resampled. Positions near several paths at once accumulate weight fastest,
//! so the cloud collapses onto the mutual intersection region.
//!
//! A particle's likelihood against one path is the best (maximum) score over
//! that path's segments — a Gaussian falloff in the perpendicular distance to
//! the segment, counted only when the perpendicular foot actually lands on
//! the segment. Path scores *add*, so being near two paths beats being near
//! one; the kernel width anneals with the cloud's spread (the sixth root of
//! the generalized variance — the "radius" of the covariance ellipsoid, since
//! the determinant is a volume-squared), keeping early iterations permissive
//! and late ones sharp.
//!
//! Convergence is declared when the generalized variance — the determinant of
//! the sample covariance — falls below a threshold: the cloud has contracted
//! to a blob small enough to read off as a point estimate.

use nalgebra::{Matrix3, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::geom::{Aabb, Point3d, UnitVec3, Vec3d};
use crate::trace::{AcousticRay, RayPath};

/// Tuning parameters of the localizer.
#[derive(Clone, Debug)]
pub struct LocalizerConfig {
    /// Number of particles.
    pub particle_count: usize,
    /// Std-dev of the per-iteration particle perturbation distance, meters.
    pub sigma_s: f64,
    /// Convergence threshold on the generalized variance, m^6.
    pub sigma_c: f64,
    /// Lower bound on the likelihood kernel width, meters.
    pub sigma_w_floor: f64,
    /// Kernel width per unit cloud radius (sixth root of the generalized
    /// variance).
    pub sigma_w_scale: f64,
    /// Iteration budget per frame.
    pub max_iterations: u32,
    /// Seed for the localizer's own random stream.
    pub rng_seed: u64,
    /// Re-initialize the particle cloud at every frame instead of carrying
    /// it over (useful as a baseline; tracking works better carrying over).
    pub reset_per_frame: bool,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        LocalizerConfig {
            particle_count: 1000,
            sigma_s: 1.0,
            sigma_c: 0.01,
            sigma_w_floor: 0.05,
            sigma_w_scale: 1.0,
            max_iterations: 500,
            rng_seed: 1,
            reset_per_frame: false,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.particle_count < 2 {
            return Err(Error::InvalidConfig(format!(
                "particle_count must be at least 2, got {}",
                self.particle_count
            )));
        }
        for (name, v) in [
            ("sigma_s", self.sigma_s),
            ("sigma_c", self.sigma_c),
            ("sigma_w_floor", self.sigma_w_floor),
            ("sigma_w_scale", self.sigma_w_scale),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The particle cloud: candidate source positions with importance weights.
#[derive(Clone, Debug)]
pub struct ParticleSet {
    positions: Vec<Point3d>,
    weights: Vec<f64>,
    iteration: u32,
    bounds: Aabb,
}

impl ParticleSet {
    /// Assemble a set from raw parts (mainly for tests and tooling).
    /// Positions and weights must match in length; weights must be
    /// non-negative and sum to ~1.
    pub fn from_parts(positions: Vec<Point3d>, weights: Vec<f64>, bounds: Aabb) -> Result<Self> {
        if positions.is_empty() || positions.len() != weights.len() {
            return Err(Error::InvalidConfig(
                "particle positions and weights must be non-empty and equal-length".into(),
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "particle weights must be non-negative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "particle weights must sum to 1, got {total}"
            )));
        }
        Ok(ParticleSet {
            positions,
            weights,
            iteration: 0,
            bounds,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Point3d] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn bounds(&self) -> &Aabb {
        &self.bounds
    }

    /// Weighted mean position.
    pub fn mean(&self) -> Point3d {
        let mut acc = Vec3d::zeros();
        for (p, w) in self.positions.iter().zip(&self.weights) {
            acc += p.coords * *w;
        }
        Point3d::from(acc)
    }
}

/// Point estimate with its uncertainty.
#[derive(Clone, Copy, Debug)]
pub struct Estimate {
    pub mean: Point3d,
    /// Unbiased sample covariance of the particle cloud, m^2.
    pub covariance: Matrix3<f64>,
    /// Generalized variance: determinant of the covariance, m^6.
    pub gv: f64,
    /// Whether the cloud contracted below the convergence threshold.
    pub converged: bool,
    /// Iterations actually spent.
    pub iterations: u32,
}

/// Uniformly random particle cloud over `bounds`, uniform weights.
pub fn init_particles(
    bounds: &Aabb,
    config: &LocalizerConfig,
    rng: &mut impl Rng,
) -> ParticleSet {
    let n = config.particle_count;
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        positions.push(Point3d::new(
            rng.gen_range(bounds.min.x..=bounds.max.x),
            rng.gen_range(bounds.min.y..=bounds.max.y),
            rng.gen_range(bounds.min.z..=bounds.max.z),
        ));
    }
    ParticleSet {
        positions,
        weights: vec![1.0 / n as f64; n],
        iteration: 0,
        bounds: *bounds,
    }
}

/// Jitter every particle: a displacement of Gaussian length along a uniformly
/// random direction, clamped back into the bounds.
pub fn perturb(set: &mut ParticleSet, config: &LocalizerConfig, rng: &mut impl Rng) {
    let gaussian = Normal::new(0.0, config.sigma_s).expect("validated sigma_s");
    let bounds = set.bounds;
    for p in &mut set.positions {
        let dist: f64 = gaussian.sample(rng);
        let u: [f64; 3] = UnitSphere.sample(rng);
        let moved = *p + Vec3d::new(u[0], u[1], u[2]) * dist;
        *p = bounds.clamp_point(&moved);
    }
}

/// Foot of the perpendicular from `p` onto the segment of `ray`, with the
/// perpendicular distance. `None` when the foot would land before the
/// segment's origin or past its end — the point is "beside" the infinite
/// line but not beside the segment.
pub fn perpendicular_foot(p: &Point3d, ray: &AcousticRay) -> Option<(Point3d, f64)> {
    let s = (p - ray.origin).dot(&ray.direction);
    if s < 0.0 || s > ray.length {
        return None;
    }
    let foot = ray.origin + ray.direction.into_inner() * s;
    Some((foot, (p - foot).norm()))
}

fn normal_pdf(x: f64, sigma: f64) -> f64 {
    let z = x / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Likelihood of a candidate position against the evidence: per path, the
/// best Gaussian-falloff score over that path's segments (zero if the
/// candidate is beside none of them); summed over paths.
pub fn likelihood(p: &Point3d, paths: &[RayPath], sigma_w: f64) -> f64 {
    paths
        .iter()
        .map(|path| {
            path.rays
                .iter()
                .filter_map(|ray| perpendicular_foot(p, ray).map(|(_, d)| normal_pdf(d, sigma_w)))
                .fold(0.0, f64::max)
        })
        .sum()
}

/// Outcome of a weight update.
#[derive(Clone, Copy, Debug)]
pub struct WeightStats {
    /// Kernel width used this iteration.
    pub sigma_w: f64,
    /// All likelihoods were zero, so weights were reset to uniform.
    pub degenerate: bool,
}

/// Kernel width for the current cloud spread: scales with the sixth root of
/// the generalized variance (the linear size of the covariance ellipsoid),
/// never below the floor.
pub fn kernel_width(gv: f64, config: &LocalizerConfig) -> f64 {
    config
        .sigma_w_floor
        .max(config.sigma_w_scale * gv.max(0.0).powf(1.0 / 6.0))
}

/// Recompute normalized importance weights from the paths. If every particle
/// scores zero (evidence nowhere near the cloud), weights fall back to
/// uniform and the stats flag it.
pub fn compute_weights(
    set: &mut ParticleSet,
    paths: &[RayPath],
    config: &LocalizerConfig,
) -> WeightStats {
    let (_, gv) = generalized_variance(set);
    let sigma_w = kernel_width(gv, config);
    let scores: Vec<f64> = set
        .positions
        .par_iter()
        .map(|p| likelihood(p, paths, sigma_w))
        .collect();
    let total: f64 = scores.iter().sum();
    if total > 0.0 && total.is_finite() {
        for (w, s) in set.weights.iter_mut().zip(&scores) {
            *w = s / total;
        }
        WeightStats {
            sigma_w,
            degenerate: false,
        }
    } else {
        let uniform = 1.0 / set.len() as f64;
        set.weights.fill(uniform);
        WeightStats {
            sigma_w,
            degenerate: true,
        }
    }
}

/// Systematic (low-variance) resampling: one uniform draw `u` in `[0, 1/n)`
/// places `n` evenly spaced pointers `u + j/n` over the cumulative weight
/// distribution; each pointer selects the particle whose cumulative interval
/// contains it. Copy counts can differ from `n * weight` by less than one,
/// and the whole pass costs a single random number.
pub fn resample(set: &mut ParticleSet, rng: &mut impl Rng) {
    let n = set.len();
    let u0: f64 = rng.gen::<f64>() / n as f64;
    let mut selected = Vec::with_capacity(n);
    let mut cumulative = set.weights[0];
    let mut i = 0;
    for j in 0..n {
        let pointer = u0 + j as f64 / n as f64;
        while pointer >= cumulative && i + 1 < n {
            i += 1;
            cumulative += set.weights[i];
        }
        selected.push(set.positions[i]);
    }
    set.positions = selected;
    set.weights.fill(1.0 / n as f64);
}

/// Unbiased sample covariance of the particle positions and its determinant
/// (the generalized variance).
pub fn generalized_variance(set: &ParticleSet) -> (Matrix3<f64>, f64) {
    let n = set.len();
    if n < 2 {
        return (Matrix3::zeros(), 0.0);
    }
    let mut mean = Vec3d::zeros();
    for p in &set.positions {
        mean += p.coords;
    }
    mean /= n as f64;
    let mut cov = Matrix3::zeros();
    for p in &set.positions {
        let d = p.coords - mean;
        cov += d * d.transpose();
    }
    cov /= (n - 1) as f64;
    (cov, cov.determinant())
}

/// Run perturb → weight → resample on `set` until the generalized variance
/// drops below `sigma_c` or the iteration budget runs out.
fn iterate(
    set: &mut ParticleSet,
    paths: &[RayPath],
    config: &LocalizerConfig,
    rng: &mut impl Rng,
) -> Estimate {
    let mut iterations = 0;
    let (mut covariance, mut gv) = generalized_variance(set);
    let mut converged = gv < config.sigma_c;
    while iterations < config.max_iterations {
        perturb(set, config, rng);
        compute_weights(set, paths, config);
        resample(set, rng);
        set.iteration += 1;
        iterations += 1;
        let (c, g) = generalized_variance(set);
        covariance = c;
        gv = g;
        if gv < config.sigma_c {
            converged = true;
            break;
        }
        converged = false;
    }
    Estimate {
        mean: set.mean(),
        covariance,
        gv,
        converged,
        iterations,
    }
}

/// One-shot localization: fresh uniform cloud over `bounds`, iterate to
/// convergence on the given paths.
pub fn run(
    paths: &[RayPath],
    bounds: &Aabb,
    config: &LocalizerConfig,
    rng: &mut impl Rng,
) -> Estimate {
    let mut set = init_particles(bounds, config, rng);
    iterate(&mut set, paths, config, rng)
}

/// Stateful localizer that carries its particle cloud across frames, so a
/// source that keeps emitting is *tracked* rather than re-localized from
/// scratch.
#[derive(Clone, Debug)]
pub struct Localizer {
    config: LocalizerConfig,
    rng: ChaCha8Rng,
    set: ParticleSet,
}

impl Localizer {
    pub fn new(bounds: Aabb, config: LocalizerConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rand::SeedableRng::seed_from_u64(config.rng_seed);
        let set = init_particles(&bounds, &config, &mut rng);
        Ok(Localizer { config, rng, set })
    }

    pub fn config(&self) -> &LocalizerConfig {
        &self.config
    }

    pub fn particles(&self) -> &ParticleSet {
        &self.set
    }

    /// Estimate from the current cloud without iterating (used for frames
    /// with no observations).
    pub fn current_estimate(&self) -> Estimate {
        let (covariance, gv) = generalized_variance(&self.set);
        Estimate {
            mean: self.set.mean(),
            covariance,
            gv,
            converged: gv < self.config.sigma_c,
            iterations: 0,
        }
    }

    /// Process one frame of traced paths. An empty frame leaves the cloud
    /// untouched and reports the standing estimate.
    pub fn estimate_frame(&mut self, paths: &[RayPath]) -> Estimate {
        if self.config.reset_per_frame {
            let bounds = *self.set.bounds();
            self.set = init_particles(&bounds, &self.config, &mut self.rng);
        }
        if paths.is_empty() {
            return self.current_estimate();
        }
        iterate(&mut self.set, paths, &self.config, &mut self.rng)
    }
}

/// One principal semi-axis of a confidence ellipsoid.
#[derive(Clone, Copy, Debug)]
pub struct EllipsoidAxis {
    pub direction: UnitVec3,
    pub semi_length: f64,
}

/// Confidence ellipsoid of an estimate.
#[derive(Clone, Copy, Debug)]
pub struct ConfidenceEllipsoid {
    pub center: Point3d,
    /// Principal semi-axes, longest first.
    pub axes: [EllipsoidAxis; 3],
}

/// Ellipsoid containing the true position with probability `level` under a
/// Gaussian read of the estimate: semi-axes are `sqrt(q * lambda_i)` along
/// the covariance eigenvectors, with `q` the chi-squared(3 dof) quantile at
/// `level`.
pub fn confidence_ellipsoid(estimate: &Estimate, level: f64) -> Result<ConfidenceEllipsoid> {
    if !(0.0 < level && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence level must be in (0, 1), got {level}"
        )));
    }
    let q = ChiSquared::new(3.0)
        .expect("3 degrees of freedom is valid")
        .inverse_cdf(level);
    let eigen = SymmetricEigen::new(estimate.covariance);
    let mut axes: Vec<EllipsoidAxis> = (0..3)
        .map(|i| EllipsoidAxis {
            direction: UnitVec3::new_normalize(eigen.eigenvectors.column(i).into()),
            semi_length: (q * eigen.eigenvalues[i].max(0.0)).sqrt(),
        })
        .collect();
    axes.sort_by(|a, b| b.semi_length.total_cmp(&a.semi_length));
    Ok(ConfidenceEllipsoid {
        center: estimate.mean,
        axes: [axes[0], axes[1], axes[2]],
    })
}

/// Write one CSV row per particle: `iteration,particle_id,x,y,z,weight`.
pub fn write_particles_csv<W: std::io::Write>(
    mut w: W,
    set: &ParticleSet,
    write_header: bool,
) -> std::io::Result<()> {
    use crate::trace::sig9;
    if write_header {
        writeln!(w, "iteration,particle_id,x,y,z,weight")?;
    }
    for (id, (p, weight)) in set.positions.iter().zip(&set.weights).enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            set.iteration,
            id,
            sig9(p.x),
            sig9(p.y),
            sig9(p.z),
            sig9(*weight),
        )?;
    }
    Ok(())
}
