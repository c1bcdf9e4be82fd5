//! Frame loop, parameter overrides, and report emission for the CLI.
//!
//! A run loads a scenario, rasterizes its map once, then steps through the
//! frame times: simulate the observations, trace each arrival into an
//! inverse path, hand the paths to the persistent localizer, and record the
//! estimate against ground truth. Randomness is split into independent
//! streams (one per simulated frame, one for the localizer) derived from the
//! base seed with a mixing function, so the same seed reproduces a run
//! bit-for-bit regardless of how many frames execute, and a parameter sweep
//! can replay identical observations at different tracer settings.

use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::Matrix3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geom::Point3d;
use crate::localize::{
    write_particles_csv, Estimate, Localizer, LocalizerConfig, ParticleSet,
};
use crate::map::OccupancyGrid;
use crate::scenario::Scenario;
use crate::sim::generate_frame;
use crate::trace::{sig9, trace_path, write_paths_csv, RayPath, TraceConfig};

/// Command-line parameter overrides applied on top of a scenario file.
#[derive(Clone, Debug, Default)]
pub struct RunOverrides {
    /// Replaces the scenario's base RNG seed.
    pub seed: Option<u64>,
    /// Replaces the localizer particle count.
    pub particles: Option<usize>,
    /// Replaces the inverse tracer's reflection budget (the simulator keeps
    /// the scenario's physics).
    pub max_order: Option<u32>,
    /// Replaces the simulated angular noise, degrees.
    pub noise_deg: Option<f64>,
    /// Free-form `key=value` settings; see [`apply_set`] for the key list.
    pub sets: Vec<(String, String)>,
}

impl RunOverrides {
    /// Parse `--set KEY=VALUE` arguments.
    pub fn parse_sets(args: &[String]) -> Result<Vec<(String, String)>> {
        args.iter()
            .map(|raw| {
                raw.split_once('=')
                    .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                    .ok_or_else(|| {
                        Error::InvalidConfig(format!("--set expects KEY=VALUE, got `{raw}`"))
                    })
            })
            .collect()
    }
}

/// Everything a run needs, resolved from scenario + overrides.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub scenario: Scenario,
    pub trace: TraceConfig,
    pub localizer: LocalizerConfig,
    pub base_seed: u64,
}

/// One `key=value` override. Keys are namespaced: `sim.*` touches the
/// scenario/simulator, `trace.*` the inverse tracer, `loc.*` the localizer.
pub fn apply_set(resolved: &mut ResolvedRun, key: &str, value: &str) -> Result<()> {
    fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value.parse().map_err(|_| {
            Error::InvalidConfig(format!("cannot parse `{value}` for key `{key}`"))
        })
    }
    match key {
        "sim.frequency" => resolved.scenario.frequency = parse(key, value)?,
        "sim.source_energy" => resolved.scenario.source_energy = parse(key, value)?,
        "sim.noise_angle_deg" => resolved.scenario.noise_angle_deg = parse(key, value)?,
        "sim.max_image_order" => resolved.scenario.max_image_order = parse(key, value)?,
        "sim.clutter_count" => resolved.scenario.clutter_count = parse(key, value)?,
        "sim.frame_interval" => resolved.scenario.frame_interval = parse(key, value)?,
        "trace.surface_absorption" => {
            resolved.scenario.surface_absorption = parse(key, value)?;
            resolved.trace.surface_absorption = parse(key, value)?;
        }
        "trace.energy_ceiling" => resolved.trace.energy_ceiling = parse(key, value)?,
        "trace.max_order" => resolved.trace.max_order = parse(key, value)?,
        "trace.max_ray_length" => resolved.trace.max_ray_length = parse(key, value)?,
        "trace.origin_offset" => resolved.trace.origin_offset = parse(key, value)?,
        "loc.particle_count" => resolved.localizer.particle_count = parse(key, value)?,
        "loc.sigma_s" => resolved.localizer.sigma_s = parse(key, value)?,
        "loc.sigma_c" => resolved.localizer.sigma_c = parse(key, value)?,
        "loc.sigma_w_floor" => resolved.localizer.sigma_w_floor = parse(key, value)?,
        "loc.sigma_w_scale" => resolved.localizer.sigma_w_scale = parse(key, value)?,
        "loc.max_iterations" => resolved.localizer.max_iterations = parse(key, value)?,
        "loc.reset_per_frame" => resolved.localizer.reset_per_frame = parse(key, value)?,
        _ => {
            return Err(Error::InvalidConfig(format!(
                "unknown --set key `{key}` (namespaces: sim.*, trace.*, loc.*)"
            )))
        }
    }
    Ok(())
}

/// SplitMix64 mixing step: scrambles a seed into an independent-looking one.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SIM_STREAM: u64 = 0x53494D; // forward simulator noise
const LOC_STREAM: u64 = 0x4C4F43; // localizer

/// Seed of the simulator RNG for one frame.
fn frame_seed(base: u64, frame: usize) -> u64 {
    splitmix64(base ^ SIM_STREAM ^ splitmix64(frame as u64))
}

fn localizer_seed(base: u64) -> u64 {
    splitmix64(base ^ LOC_STREAM)
}

/// Resolve a scenario and overrides into runnable configuration.
pub fn resolve(scenario: &Scenario, overrides: &RunOverrides) -> Result<ResolvedRun> {
    let mut scenario = scenario.clone();
    let base_seed = overrides.seed.unwrap_or(scenario.rng_seed);
    scenario.rng_seed = base_seed;
    if let Some(noise) = overrides.noise_deg {
        scenario.noise_angle_deg = noise;
    }
    let grid = scenario.build_grid()?;
    let mut trace = TraceConfig::for_grid(scenario.mic_point(), &grid);
    trace.surface_absorption = scenario.surface_absorption;
    trace.attenuation = scenario.attenuation();
    if let Some(order) = overrides.max_order {
        trace.max_order = order;
    }
    let mut localizer = LocalizerConfig {
        rng_seed: localizer_seed(base_seed),
        ..LocalizerConfig::default()
    };
    if let Some(particles) = overrides.particles {
        localizer.particle_count = particles;
    }
    let mut resolved = ResolvedRun {
        scenario,
        trace,
        localizer,
        base_seed,
    };
    for (key, value) in &overrides.sets {
        apply_set(&mut resolved, key, value)?;
    }
    resolved.scenario.validate()?;
    resolved.trace.validate()?;
    resolved.localizer.validate()?;
    Ok(resolved)
}

/// Per-frame outcome.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub frame: usize,
    pub time: f64,
    pub truth: Point3d,
    pub emitting: bool,
    pub signal_count: usize,
    pub mean: Point3d,
    pub error_m: f64,
    pub gv: f64,
    pub converged: bool,
    pub iterations: u32,
    pub covariance: Matrix3<f64>,
}

/// Error statistics over the emitting frames of a run.
#[derive(Clone, Copy, Debug)]
pub struct Summary {
    pub frames: usize,
    pub signal_frames: usize,
    pub mean_error_m: f64,
    pub std_error_m: f64,
    pub convergence_rate: f64,
}

/// Full outcome of one run.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub frames: Vec<FrameRecord>,
    pub summary: Summary,
}

/// Mean, sample standard deviation (n-1), and convergence rate over the
/// frames that carried signals.
pub fn summarize(frames: &[FrameRecord]) -> Summary {
    let with_signals: Vec<&FrameRecord> =
        frames.iter().filter(|f| f.signal_count > 0).collect();
    let n = with_signals.len();
    if n == 0 {
        return Summary {
            frames: frames.len(),
            signal_frames: 0,
            mean_error_m: 0.0,
            std_error_m: 0.0,
            convergence_rate: 0.0,
        };
    }
    let mean = with_signals.iter().map(|f| f.error_m).sum::<f64>() / n as f64;
    let std = if n > 1 {
        (with_signals
            .iter()
            .map(|f| (f.error_m - mean).powi(2))
            .sum::<f64>()
            / (n - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    let converged = with_signals.iter().filter(|f| f.converged).count();
    Summary {
        frames: frames.len(),
        signal_frames: n,
        mean_error_m: mean,
        std_error_m: std,
        convergence_rate: converged as f64 / n as f64,
    }
}

/// Side artifacts a run can collect for dumping.
#[derive(Clone, Debug, Default)]
pub struct RunArtifacts {
    /// Traced paths per frame (kept only when requested).
    pub paths: Option<Vec<Vec<RayPath>>>,
    /// Final particle cloud per frame (kept only when requested).
    pub particles: Option<Vec<ParticleSet>>,
}

/// Execute a resolved run. `keep_paths` / `keep_particles` opt into
/// collecting per-frame artifacts for dumping.
pub fn run_resolved(
    resolved: &ResolvedRun,
    keep_paths: bool,
    keep_particles: bool,
) -> Result<(RunReport, RunArtifacts)> {
    let scenario = &resolved.scenario;
    let grid = scenario.build_grid()?;
    let mut localizer = Localizer::new(*grid.bounds(), resolved.localizer.clone())?;
    let mut frames = Vec::new();
    let mut artifacts = RunArtifacts {
        paths: keep_paths.then(Vec::new),
        particles: keep_particles.then(Vec::new),
    };
    for (index, time) in scenario.frame_times().into_iter().enumerate() {
        let mut sim_rng = ChaCha8Rng::seed_from_u64(frame_seed(resolved.base_seed, index));
        let observation = generate_frame(scenario, &grid, time, &mut sim_rng);
        let paths: Vec<RayPath> = observation
            .signals
            .par_iter()
            .map(|signal| trace_path(signal, &grid, &resolved.trace))
            .collect();
        let estimate: Estimate = localizer.estimate_frame(&paths);
        let error_m = (estimate.mean - observation.source_position).norm();
        frames.push(FrameRecord {
            frame: index,
            time,
            truth: observation.source_position,
            emitting: observation.emitting,
            signal_count: paths.len(),
            mean: estimate.mean,
            error_m,
            gv: estimate.gv,
            converged: estimate.converged,
            iterations: estimate.iterations,
            covariance: estimate.covariance,
        });
        if let Some(all_paths) = artifacts.paths.as_mut() {
            all_paths.push(paths);
        }
        if let Some(clouds) = artifacts.particles.as_mut() {
            clouds.push(localizer.particles().clone());
        }
    }
    let summary = summarize(&frames);
    Ok((RunReport { frames, summary }, artifacts))
}

/// Output selection for [`cmd_run`].
#[derive(Clone, Debug, Default)]
pub struct OutputOptions {
    pub out_dir: Option<PathBuf>,
    pub dump_paths: bool,
    pub dump_particles: bool,
}

/// Write `report.csv`: one row per frame against ground truth.
pub fn write_report_csv<W: Write>(mut w: W, frames: &[FrameRecord]) -> std::io::Result<()> {
    writeln!(
        w,
        "frame,time,gx,gy,gz,mx,my,mz,error_m,gv,converged,iterations,signal_count"
    )?;
    for f in frames {
        writeln!(
            w,
            "{},{:.3},{},{},{},{},{},{},{},{},{},{},{}",
            f.frame,
            f.time,
            sig9(f.truth.x),
            sig9(f.truth.y),
            sig9(f.truth.z),
            sig9(f.mean.x),
            sig9(f.mean.y),
            sig9(f.mean.z),
            sig9(f.error_m),
            sig9(f.gv),
            u8::from(f.converged),
            f.iterations,
            f.signal_count,
        )?;
    }
    Ok(())
}

/// Write `estimates.csv`: the estimate with its covariance upper triangle.
pub fn write_estimates_csv<W: Write>(mut w: W, frames: &[FrameRecord]) -> std::io::Result<()> {
    writeln!(
        w,
        "frame,iterations,converged,mx,my,mz,gv,c11,c12,c13,c22,c23,c33"
    )?;
    for f in frames {
        let c = &f.covariance;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            f.frame,
            f.iterations,
            u8::from(f.converged),
            sig9(f.mean.x),
            sig9(f.mean.y),
            sig9(f.mean.z),
            sig9(f.gv),
            sig9(c[(0, 0)]),
            sig9(c[(0, 1)]),
            sig9(c[(0, 2)]),
            sig9(c[(1, 1)]),
            sig9(c[(1, 2)]),
            sig9(c[(2, 2)]),
        )?;
    }
    Ok(())
}

fn write_summary_csv<W: Write>(mut w: W, summary: &Summary) -> std::io::Result<()> {
    writeln!(
        w,
        "frames,signal_frames,mean_error_m,std_error_m,convergence_rate"
    )?;
    writeln!(
        w,
        "{},{},{},{},{}",
        summary.frames,
        summary.signal_frames,
        sig9(summary.mean_error_m),
        sig9(summary.std_error_m),
        sig9(summary.convergence_rate),
    )
}

fn create(dir: &Path, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(
        dir.join(name),
    )?))
}

/// Run a scenario file with overrides; optionally write the artifact CSVs.
///
/// `report.csv`, `estimates.csv` and `summary.csv` always land in the output
/// directory when one is given. `paths.csv` (signal ids numbered
/// consecutively across the whole run) and `particles.csv` (the final cloud
/// of each frame, distinguished by the iteration column) are opt-in.
pub fn cmd_run(
    scenario_path: &Path,
    overrides: &RunOverrides,
    out: &OutputOptions,
) -> Result<RunReport> {
    let scenario = Scenario::load(scenario_path)?;
    let resolved = resolve(&scenario, overrides)?;
    let (report, artifacts) = run_resolved(
        &resolved,
        out.dump_paths && out.out_dir.is_some(),
        out.dump_particles && out.out_dir.is_some(),
    )?;
    if let Some(dir) = &out.out_dir {
        std::fs::create_dir_all(dir)?;
        write_report_csv(create(dir, "report.csv")?, &report.frames)?;
        write_estimates_csv(create(dir, "estimates.csv")?, &report.frames)?;
        write_summary_csv(create(dir, "summary.csv")?, &report.summary)?;
        if let Some(paths) = &artifacts.paths {
            let flat: Vec<RayPath> = paths.iter().flatten().cloned().collect();
            write_paths_csv(create(dir, "paths.csv")?, &flat)?;
        }
        if let Some(clouds) = &artifacts.particles {
            let mut w = create(dir, "particles.csv")?;
            for (i, cloud) in clouds.iter().enumerate() {
                write_particles_csv(&mut w, cloud, i == 0)?;
            }
        }
    }
    Ok(report)
}

/// One row of a reflection-order sweep.
#[derive(Clone, Copy, Debug)]
pub struct SweepRow {
    pub order: u32,
    pub mean_error_m: f64,
    pub std_error_m: f64,
    pub convergence_rate: f64,
}

/// Write `sweep.csv`.
pub fn write_sweep_csv<W: Write>(mut w: W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "order,mean_error_m,std_error_m,convergence_rate")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.order,
            sig9(r.mean_error_m),
            sig9(r.std_error_m),
            sig9(r.convergence_rate),
        )?;
    }
    Ok(())
}

/// Re-run one scenario at several tracer reflection budgets. Every pass
/// replays the same seeds, so the simulated observations are identical and
/// the budget is the only thing that varies.
pub fn cmd_sweep_order(
    scenario_path: &Path,
    orders: &[u32],
    overrides: &RunOverrides,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    let scenario = Scenario::load(scenario_path)?;
    let mut rows = Vec::with_capacity(orders.len());
    for &order in orders {
        let mut o = overrides.clone();
        o.max_order = Some(order);
        let resolved = resolve(&scenario, &o)?;
        let (report, _) = run_resolved(&resolved, false, false)?;
        rows.push(SweepRow {
            order,
            mean_error_m: report.summary.mean_error_m,
            std_error_m: report.summary.std_error_m,
            convergence_rate: report.summary.convergence_rate,
        });
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        write_sweep_csv(create(dir, "sweep.csv")?, &rows)?;
    }
    Ok(rows)
}

/// Rasterize a scenario's geometry and write the voxel map (stdout when no
/// path is given). Returns the occupied voxel count.
pub fn cmd_dump_map(scenario_path: &Path, out: Option<&Path>) -> Result<usize> {
    let scenario = Scenario::load(scenario_path)?;
    let grid = scenario.build_grid()?;
    match out {
        Some(path) => grid.save(path)?,
        None => {
            let stdout = std::io::stdout();
            grid.write(stdout.lock())?;
        }
    }
    Ok(grid.occupied_count())
}
