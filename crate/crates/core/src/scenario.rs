//! End-to-end studies: distance sweeps per transmitter orientation,
//! surface path-loss maps, capacitive/galvanic crossover contours, and the
//! receiver-mode recommendation.
//!
//! One field solve per transmitter configuration serves every receiver
//! position and mode; receiver evaluation is pure post-processing.

use std::collections::BTreeMap;
use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::coupling::{
    capacitive_pickup_indexed, galvanic_pickup_indexed, path_loss_db, CapacitiveDivider,
    CouplingError, RxMode, SurfaceIndex,
};
use crate::phantom::{build_phantom, place_transmitter, voxelize, PhantomError, PhantomSpec, TxSpec};
use crate::solver::{assemble, solve_with, Preconditioner, SolveStats, SolverError};
use crate::tissue::{validate_quasistatic, QsReport, TissueTable};

/// Default far-region separation threshold for saturation analysis.
pub const DEFAULT_FAR_REGION_M: f64 = 0.10;
/// Default tie epsilon for crossover maps (dB).
pub const DEFAULT_TIE_EPS_DB: f64 = 0.5;
/// Minimum prominence for a reported null (dB).
pub const NULL_PROMINENCE_DB: f64 = 10.0;
/// Saturation flag threshold: far-region IQR above this is non-saturation.
pub const SATURATION_IQR_DB: f64 = 3.0;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("sweep spec invalid: {0}")]
    InvalidSpec(String),
    #[error("grids have mismatched coordinate axes")]
    GridMismatch,
    #[error("position ({0}, {1}) outside the grid hull", position[0], position[1])]
    OutOfBounds { position: [f64; 2] },
    #[error("too few far-region points: {found} (need at least {need})")]
    TooFewPoints { found: usize, need: usize },
    #[error("mode {0} not present in grid")]
    MissingMode(RxMode),
    #[error("table parse error at line {line}: {msg}")]
    TableParse { line: usize, msg: String },
    #[error("duplicate grid coordinate ({0}, {1})", coord[0], coord[1])]
    DuplicateCoordinate { coord: [f64; 2] },
}

/// Receiver configuration shared by sweeps and maps.
#[derive(Debug, Clone, PartialEq)]
pub struct RxSetup {
    pub modes: Vec<RxMode>,
    /// Contact spacing of the galvanic pair.
    pub galvanic_gap_m: f64,
    pub divider: CapacitiveDivider,
}

impl Default for RxSetup {
    fn default() -> Self {
        RxSetup {
            modes: vec![RxMode::Capacitive, RxMode::Galvanic],
            galvanic_gap_m: 0.04,
            divider: CapacitiveDivider::default(),
        }
    }
}

/// A line sweep: receiver positions along a track on the body surface.
/// Galvanic contacts are oriented along the track direction.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub tx: TxSpec,
    pub rx: RxSetup,
    /// Surface target points (snapped to surface voxels at run time).
    pub track: Vec<[f64; 3]>,
    /// Unit vector along the track; also signs the reported distance.
    pub track_direction: [f64; 3],
    pub frequency_hz: f64,
    pub resolution_m: f64,
    pub tol_rel: f64,
    pub max_iter: usize,
    pub preconditioner: Preconditioner,
}

/// An X-Y surface map centered on the transmitter's surface projection.
/// Galvanic contacts are oriented radially away from the projection.
#[derive(Debug, Clone)]
pub struct MapSpec {
    pub tx: TxSpec,
    pub rx: RxSetup,
    pub x_half_extent_m: f64,
    pub y_half_extent_m: f64,
    pub step_m: f64,
    pub frequency_hz: f64,
    pub resolution_m: f64,
    pub tol_rel: f64,
    pub max_iter: usize,
    pub preconditioner: Preconditioner,
}

/// One evaluated receiver position.
#[derive(Debug, Clone)]
pub struct ChannelSample {
    /// Signed separation along the track (sweeps) or unsigned radial
    /// separation (maps).
    pub distance_m: f64,
    /// Contact centroid after surface snapping.
    pub position_m: [f64; 3],
    pub mode: RxMode,
    pub v_rx: Complex64,
    pub v_tx: f64,
    pub path_loss_db: f64,
}

#[derive(Debug, Clone, Default)]
pub struct PathLossCurve {
    /// Samples sorted by signed distance.
    pub samples: Vec<ChannelSample>,
}

impl PathLossCurve {
    pub fn distances(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.distance_m).collect()
    }

    pub fn losses_db(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.path_loss_db).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Simulated,
    Measured,
}

impl Provenance {
    pub fn name(&self) -> &'static str {
        match self {
            Provenance::Simulated => "simulated",
            Provenance::Measured => "measured",
        }
    }

    pub fn parse(s: &str) -> Option<Provenance> {
        match s.trim() {
            "simulated" => Some(Provenance::Simulated),
            "measured" => Some(Provenance::Measured),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GridMeta {
    pub frequency_hz: Option<f64>,
    pub v_tx: Option<f64>,
    pub tx_power_dbm: Option<f64>,
}

/// Path loss in dB on a dense x-y lattice, one matrix per receiver mode.
/// Missing cells carry NaN.
#[derive(Debug, Clone)]
pub struct PathLossGrid {
    pub xs_m: Vec<f64>,
    pub ys_m: Vec<f64>,
    data: BTreeMap<RxMode, Vec<f64>>,
    pub provenance: Provenance,
    pub meta: GridMeta,
}

impl PathLossGrid {
    pub fn new(xs_m: Vec<f64>, ys_m: Vec<f64>, provenance: Provenance, meta: GridMeta) -> Self {
        PathLossGrid {
            xs_m,
            ys_m,
            data: BTreeMap::new(),
            provenance,
            meta,
        }
    }

    pub fn nx(&self) -> usize {
        self.xs_m.len()
    }

    pub fn ny(&self) -> usize {
        self.ys_m.len()
    }

    /// Insert a row-major (y-outer) matrix for a mode.
    /// Panics if the length does not match the axes.
    pub fn insert_mode(&mut self, mode: RxMode, values: Vec<f64>) {
        assert_eq!(values.len(), self.nx() * self.ny(), "matrix/axes mismatch");
        self.data.insert(mode, values);
    }

    pub fn modes(&self) -> impl Iterator<Item = RxMode> + '_ {
        self.data.keys().copied()
    }

    pub fn has_mode(&self, mode: RxMode) -> bool {
        self.data.contains_key(&mode)
    }

    pub fn values(&self, mode: RxMode) -> Option<&[f64]> {
        self.data.get(&mode).map(Vec::as_slice)
    }

    pub fn at(&self, mode: RxMode, ix: usize, iy: usize) -> Option<f64> {
        self.data.get(&mode).map(|m| m[iy * self.nx() + ix])
    }

    /// Exact (bitwise) axis equality, the contract for crossover input.
    pub fn same_axes(&self, other: &PathLossGrid) -> bool {
        self.xs_m.len() == other.xs_m.len()
            && self.ys_m.len() == other.ys_m.len()
            && self
                .xs_m
                .iter()
                .zip(&other.xs_m)
                .all(|(a, b)| a.to_bits() == b.to_bits())
            && self
                .ys_m
                .iter()
                .zip(&other.ys_m)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// `x_m,y_m,mode,path_loss_db` table with a `#meta` header block.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("#meta provenance={}\n", self.provenance.name()));
        if let Some(f) = self.meta.frequency_hz {
            out.push_str(&format!("#meta frequency_hz={f}\n"));
        }
        if let Some(v) = self.meta.v_tx {
            out.push_str(&format!("#meta v_tx={v}\n"));
        }
        if let Some(p) = self.meta.tx_power_dbm {
            out.push_str(&format!("#meta tx_power_dbm={p}\n"));
        }
        out.push_str("x_m,y_m,mode,path_loss_db\n");
        for (mode, values) in &self.data {
            for (iy, y) in self.ys_m.iter().enumerate() {
                for (ix, x) in self.xs_m.iter().enumerate() {
                    out.push_str(&format!(
                        "{x},{y},{},{}\n",
                        mode.name(),
                        values[iy * self.nx() + ix]
                    ));
                }
            }
        }
        out
    }

    /// Parse a table written by [`PathLossGrid::to_csv`] (or any sparse
    /// `x_m,y_m,mode,path_loss_db` lattice; missing cells become NaN).
    pub fn from_csv(source: &str) -> Result<PathLossGrid, ScenarioError> {
        let mut provenance = Provenance::Simulated;
        let mut meta = GridMeta::default();
        let mut rows: Vec<(f64, f64, RxMode, f64)> = Vec::new();
        for (lineno, raw) in source.lines().enumerate() {
            let line_no = lineno + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(m) = line.strip_prefix("#meta") {
                if let Some((k, v)) = m.trim().split_once('=') {
                    match k.trim() {
                        "provenance" => {
                            if let Some(p) = Provenance::parse(v) {
                                provenance = p;
                            }
                        }
                        "frequency_hz" => meta.frequency_hz = v.trim().parse().ok(),
                        "v_tx" => meta.v_tx = v.trim().parse().ok(),
                        "tx_power_dbm" => meta.tx_power_dbm = v.trim().parse().ok(),
                        _ => {}
                    }
                }
                continue;
            }
            if line.starts_with('#') || line.eq_ignore_ascii_case("x_m,y_m,mode,path_loss_db") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(ScenarioError::TableParse {
                    line: line_no,
                    msg: format!("expected 4 fields, got {}", fields.len()),
                });
            }
            let parse = |s: &str, what: &str| -> Result<f64, ScenarioError> {
                s.parse().map_err(|e| ScenarioError::TableParse {
                    line: line_no,
                    msg: format!("bad {what} '{s}': {e}"),
                })
            };
            let x = parse(fields[0], "x_m")?;
            let y = parse(fields[1], "y_m")?;
            let mode = RxMode::parse(fields[2]).ok_or_else(|| ScenarioError::TableParse {
                line: line_no,
                msg: format!("unknown mode '{}'", fields[2]),
            })?;
            let pl = parse(fields[3], "path_loss_db")?;
            rows.push((x, y, mode, pl));
        }
        if rows.is_empty() {
            return Err(ScenarioError::TableParse {
                line: 0,
                msg: "no data rows".into(),
            });
        }
        let mut xs: Vec<f64> = rows.iter().map(|r| r.0).collect();
        let mut ys: Vec<f64> = rows.iter().map(|r| r.1).collect();
        dedup_sorted(&mut xs);
        dedup_sorted(&mut ys);
        let nx = xs.len();
        let locate = |axis: &[f64], v: f64| axis.iter().position(|a| a.to_bits() == v.to_bits());
        let mut grid = PathLossGrid::new(xs.clone(), ys.clone(), provenance, meta);
        let mut mats: BTreeMap<RxMode, Vec<f64>> = BTreeMap::new();
        let mut seen: BTreeMap<RxMode, Vec<bool>> = BTreeMap::new();
        for (x, y, mode, pl) in rows {
            let ix = locate(&xs, x).expect("x in axis by construction");
            let iy = locate(&ys, y).expect("y in axis by construction");
            let mat = mats
                .entry(mode)
                .or_insert_with(|| vec![f64::NAN; nx * ys.len()]);
            let seen_mat = seen
                .entry(mode)
                .or_insert_with(|| vec![false; nx * ys.len()]);
            if seen_mat[iy * nx + ix] {
                return Err(ScenarioError::DuplicateCoordinate { coord: [x, y] });
            }
            seen_mat[iy * nx + ix] = true;
            mat[iy * nx + ix] = pl;
        }
        for (mode, mat) in mats {
            grid.insert_mode(mode, mat);
        }
        Ok(grid)
    }
}

fn dedup_sorted(v: &mut Vec<f64>) {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite coordinates"));
    v.dedup_by(|a, b| a.to_bits() == b.to_bits());
}

/// Merge per-mode grids sharing identical axes into one multi-mode grid
/// (metadata taken from the first part).
pub fn merge_grids(parts: &[&PathLossGrid]) -> Result<PathLossGrid, ScenarioError> {
    let first = parts
        .first()
        .ok_or_else(|| ScenarioError::InvalidSpec("no grids to merge".into()))?;
    let mut out = PathLossGrid::new(
        first.xs_m.clone(),
        first.ys_m.clone(),
        first.provenance,
        first.meta,
    );
    for part in parts {
        if !first.same_axes(part) {
            return Err(ScenarioError::GridMismatch);
        }
        for mode in part.modes() {
            out.insert_mode(mode, part.values(mode).expect("listed mode").to_vec());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SkippedPoint {
    pub position_m: [f64; 3],
    pub mode: RxMode,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub curves: BTreeMap<RxMode, PathLossCurve>,
    pub stats: SolveStats,
    pub qs: QsReport,
    /// A sweep performs exactly one field solve regardless of how many
    /// receiver positions it evaluates.
    pub solve_count: usize,
    pub skipped: Vec<SkippedPoint>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct MapOutput {
    pub grid: PathLossGrid,
    pub stats: SolveStats,
    pub qs: QsReport,
    pub solve_count: usize,
    pub skipped: Vec<SkippedPoint>,
    pub warnings: Vec<String>,
}

/// Default sweep track: a vertical line on the front torso surface
/// through the transmitter's surface projection.
pub fn vertical_track(
    phantom: &PhantomSpec,
    z_lo_m: f64,
    z_hi_m: f64,
    step_m: f64,
) -> Vec<[f64; 3]> {
    let y_front = phantom.torso_radius_m;
    let mut points = Vec::new();
    let mut z = z_lo_m;
    while z <= z_hi_m + 1e-12 {
        points.push([0.0, y_front, z]);
        z += step_m;
    }
    points
}

struct SolvedScene {
    field: crate::solver::PotentialField,
    surf: SurfaceIndex,
    stats: SolveStats,
    qs: QsReport,
    warnings: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn solve_scene(
    phantom_spec: &PhantomSpec,
    tx: &TxSpec,
    frequency_hz: f64,
    resolution_m: f64,
    tol_rel: f64,
    max_iter: usize,
    precond: Preconditioner,
    table: &TissueTable,
) -> Result<SolvedScene, ScenarioError> {
    let phantom = build_phantom(phantom_spec)?;
    let grid = voxelize(&phantom, resolution_m)?;
    let mut warnings: Vec<String> = grid.warnings.iter().map(|w| w.to_string()).collect();
    let grid = Arc::new(place_transmitter(&grid, tx)?);
    let qs = validate_quasistatic(frequency_hz, phantom.largest_extent_m());
    if !qs.quasistatic_ok {
        warnings.push(format!("run flagged non-quasistatic: {}", qs.notes));
    }
    let system = assemble(&grid, table, frequency_hz, tx.excitation_v)?;
    let field = solve_with(&system, tol_rel, max_iter, precond)?;
    let stats = field.stats;
    let surf = SurfaceIndex::build(&grid);
    Ok(SolvedScene {
        field,
        surf,
        stats,
        qs,
        warnings,
    })
}

fn unit(v: [f64; 3]) -> Result<[f64; 3], ScenarioError> {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !n.is_finite() || n < 1e-12 {
        return Err(ScenarioError::InvalidSpec(
            "direction vector must have nonzero length".into(),
        ));
    }
    Ok([v[0] / n, v[1] / n, v[2] / n])
}

fn eval_point(
    scene: &SolvedScene,
    mode: RxMode,
    rx: &RxSetup,
    target: [f64; 3],
    pair_axis: [f64; 3],
    frequency_hz: f64,
) -> Result<(Complex64, [f64; 3]), CouplingError> {
    match mode {
        RxMode::Capacitive => {
            let v = capacitive_pickup_indexed(
                &scene.field,
                &scene.surf,
                target,
                &rx.divider,
                frequency_hz,
            )?;
            let vox = scene.surf.snap(target)?;
            Ok((v, scene.field.grid().center_of(vox as usize)))
        }
        RxMode::Galvanic => {
            let half = 0.5 * rx.galvanic_gap_m;
            let a = [
                target[0] + half * pair_axis[0],
                target[1] + half * pair_axis[1],
                target[2] + half * pair_axis[2],
            ];
            let b = [
                target[0] - half * pair_axis[0],
                target[1] - half * pair_axis[1],
                target[2] - half * pair_axis[2],
            ];
            let v = galvanic_pickup_indexed(&scene.field, &scene.surf, a, b)?;
            let va = scene.surf.snap(a)?;
            let vb = scene.surf.snap(b)?;
            let ca = scene.field.grid().center_of(va as usize);
            let cb = scene.field.grid().center_of(vb as usize);
            Ok((
                v,
                [
                    0.5 * (ca[0] + cb[0]),
                    0.5 * (ca[1] + cb[1]),
                    0.5 * (ca[2] + cb[2]),
                ],
            ))
        }
    }
}

/// Run a line sweep: one solve, then per-point per-mode evaluation.
/// Failed points are recorded in `skipped`, never silently dropped.
pub fn run_sweep(
    phantom_spec: &PhantomSpec,
    spec: &SweepSpec,
    table: &TissueTable,
) -> Result<SweepOutput, ScenarioError> {
    if spec.track.len() < 2 {
        return Err(ScenarioError::InvalidSpec(
            "track needs at least 2 points".into(),
        ));
    }
    if spec.rx.modes.is_empty() {
        return Err(ScenarioError::InvalidSpec("no receiver modes".into()));
    }
    let dir = unit(spec.track_direction)?;
    let scene = solve_scene(
        phantom_spec,
        &spec.tx,
        spec.frequency_hz,
        spec.resolution_m,
        spec.tol_rel,
        spec.max_iter,
        spec.preconditioner,
        table,
    )?;
    let v_tx = spec.tx.excitation_v;
    let tx_c = spec.tx.center_m;

    let mut curves: BTreeMap<RxMode, PathLossCurve> = BTreeMap::new();
    let mut skipped = Vec::new();
    for &mode in &spec.rx.modes {
        let evals: Vec<Result<(Complex64, [f64; 3]), CouplingError>> = {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                spec.track
                    .par_iter()
                    .map(|&p| eval_point(&scene, mode, &spec.rx, p, dir, spec.frequency_hz))
                    .collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                spec.track
                    .iter()
                    .map(|&p| eval_point(&scene, mode, &spec.rx, p, dir, spec.frequency_hz))
                    .collect()
            }
        };
        let mut samples = Vec::new();
        for (point, ev) in spec.track.iter().zip(evals) {
            match ev {
                Ok((v_rx, centroid)) => {
                    let d = [
                        centroid[0] - tx_c[0],
                        centroid[1] - tx_c[1],
                        centroid[2] - tx_c[2],
                    ];
                    let sep = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    let along = d[0] * dir[0] + d[1] * dir[1] + d[2] * dir[2];
                    let signed = if along < 0.0 { -sep } else { sep };
                    samples.push(ChannelSample {
                        distance_m: signed,
                        position_m: centroid,
                        mode,
                        v_rx,
                        v_tx,
                        path_loss_db: path_loss_db(v_rx, v_tx),
                    });
                }
                Err(e) => skipped.push(SkippedPoint {
                    position_m: *point,
                    mode,
                    reason: e.to_string(),
                }),
            }
        }
        samples.sort_by(|a, b| a.distance_m.partial_cmp(&b.distance_m).expect("finite"));
        curves.insert(mode, PathLossCurve { samples });
    }

    Ok(SweepOutput {
        curves,
        stats: scene.stats,
        qs: scene.qs,
        solve_count: 1,
        skipped,
        warnings: scene.warnings,
    })
}

/// Run an X-Y surface map centered on the transmitter's surface
/// projection. Map coordinates: x lateral, y vertical offset from the
/// transmitter height.
pub fn run_surface_map(
    phantom_spec: &PhantomSpec,
    spec: &MapSpec,
    table: &TissueTable,
) -> Result<MapOutput, ScenarioError> {
    if spec.step_m <= 0.0 || spec.x_half_extent_m <= 0.0 || spec.y_half_extent_m <= 0.0 {
        return Err(ScenarioError::InvalidSpec(
            "map extents and step must be positive".into(),
        ));
    }
    if spec.rx.modes.is_empty() {
        return Err(ScenarioError::InvalidSpec("no receiver modes".into()));
    }
    let scene = solve_scene(
        phantom_spec,
        &spec.tx,
        spec.frequency_hz,
        spec.resolution_m,
        spec.tol_rel,
        spec.max_iter,
        spec.preconditioner,
        table,
    )?;
    let v_tx = spec.tx.excitation_v;
    let y_front = phantom_spec.torso_radius_m;
    let z_tx = spec.tx.center_m[2];

    let axis_coords = |half: f64, step: f64| -> Vec<f64> {
        let n = (half / step).round() as i64;
        (-n..=n).map(|i| i as f64 * step).collect()
    };
    let xs = axis_coords(spec.x_half_extent_m, spec.step_m);
    let ys = axis_coords(spec.y_half_extent_m, spec.step_m);
    let nx = xs.len();

    let mut grid = PathLossGrid::new(
        xs.clone(),
        ys.clone(),
        Provenance::Simulated,
        GridMeta {
            frequency_hz: Some(spec.frequency_hz),
            v_tx: Some(v_tx),
            tx_power_dbm: None,
        },
    );
    let mut skipped = Vec::new();
    for &mode in &spec.rx.modes {
        let points: Vec<([f64; 3], [f64; 3])> = ys
            .iter()
            .flat_map(|&w| {
                xs.iter().map(move |&u| {
                    let target = [u, y_front, z_tx + w];
                    // galvanic pair radial from the Tx projection; vertical
                    // at the projection itself
                    let r = (u * u + w * w).sqrt();
                    let pair_axis = if r > 1e-12 {
                        [u / r, 0.0, w / r]
                    } else {
                        [0.0, 0.0, 1.0]
                    };
                    (target, pair_axis)
                })
            })
            .collect();
        let evals: Vec<Result<(Complex64, [f64; 3]), CouplingError>> = {
            #[cfg(feature = "parallel")]
            {
                use rayon::prelude::*;
                points
                    .par_iter()
                    .map(|&(p, ax)| eval_point(&scene, mode, &spec.rx, p, ax, spec.frequency_hz))
                    .collect()
            }
            #[cfg(not(feature = "parallel"))]
            {
                points
                    .iter()
                    .map(|&(p, ax)| eval_point(&scene, mode, &spec.rx, p, ax, spec.frequency_hz))
                    .collect()
            }
        };
        let mut mat = vec![f64::NAN; nx * ys.len()];
        for (i, ev) in evals.into_iter().enumerate() {
            match ev {
                Ok((v_rx, _)) => mat[i] = path_loss_db(v_rx, v_tx),
                Err(e) => skipped.push(SkippedPoint {
                    position_m: points[i].0,
                    mode,
                    reason: e.to_string(),
                }),
            }
        }
        grid.insert_mode(mode, mat);
    }

    Ok(MapOutput {
        grid,
        stats: scene.stats,
        qs: scene.qs,
        solve_count: 1,
        skipped,
        warnings: scene.warnings,
    })
}

/// Winning receiver mode of a grid cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Winner {
    Galvanic,
    Capacitive,
    Tie,
}

impl Winner {
    pub fn name(&self) -> &'static str {
        match self {
            Winner::Galvanic => "galvanic",
            Winner::Capacitive => "capacitive",
            Winner::Tie => "tie",
        }
    }
}

/// Per-cell winner map with the crossover polyline.
#[derive(Debug, Clone)]
pub struct ModeRegionMap {
    pub xs_m: Vec<f64>,
    pub ys_m: Vec<f64>,
    /// None where either mode is missing data.
    pub winner: Vec<Option<Winner>>,
    /// |PL_galv - PL_cap| per cell (NaN where data is missing).
    pub margin_db: Vec<f64>,
    /// Chained zero-crossing polylines of PL_galv - PL_cap.
    pub polylines: Vec<Vec<[f64; 2]>>,
    pub tie_eps_db: f64,
}

impl ModeRegionMap {
    pub fn nx(&self) -> usize {
        self.xs_m.len()
    }

    /// `x_m,y_m,winner,margin_db` table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_m,y_m,winner,margin_db\n");
        for (iy, y) in self.ys_m.iter().enumerate() {
            for (ix, x) in self.xs_m.iter().enumerate() {
                let idx = iy * self.nx() + ix;
                let w = self.winner[idx].map_or("none", |w| w.name());
                out.push_str(&format!("{x},{y},{w},{}\n", self.margin_db[idx]));
            }
        }
        out
    }

    /// `segment_id,x_m,y_m` table of the crossover polylines.
    pub fn polylines_csv(&self) -> String {
        let mut out = String::from("segment_id,x_m,y_m\n");
        for (id, line) in self.polylines.iter().enumerate() {
            for p in line {
                out.push_str(&format!("{id},{},{}\n", p[0], p[1]));
            }
        }
        out
    }
}

/// Pointwise winner (higher path loss wins, i.e. less negative) plus the
/// zero contour of `PL_galv - PL_cap` via marching squares.
pub fn crossover_contour(
    cap: &PathLossGrid,
    galv: &PathLossGrid,
    tie_eps_db: f64,
) -> Result<ModeRegionMap, ScenarioError> {
    if !cap.same_axes(galv) {
        return Err(ScenarioError::GridMismatch);
    }
    let cap_m = cap
        .values(RxMode::Capacitive)
        .ok_or(ScenarioError::MissingMode(RxMode::Capacitive))?;
    let galv_m = galv
        .values(RxMode::Galvanic)
        .ok_or(ScenarioError::MissingMode(RxMode::Galvanic))?;
    let n = cap_m.len();
    let mut winner = Vec::with_capacity(n);
    let mut margin = Vec::with_capacity(n);
    let mut delta = vec![f64::NAN; n];
    for i in 0..n {
        let c = cap_m[i];
        let g = galv_m[i];
        if !c.is_finite() || !g.is_finite() {
            winner.push(None);
            margin.push(f64::NAN);
            continue;
        }
        let d = g - c;
        delta[i] = d;
        margin.push(d.abs());
        winner.push(Some(if d.abs() < tie_eps_db {
            Winner::Tie
        } else if d > 0.0 {
            Winner::Galvanic
        } else {
            Winner::Capacitive
        }));
    }
    let polylines = marching_squares(&cap.xs_m, &cap.ys_m, &delta, 0.0);
    Ok(ModeRegionMap {
        xs_m: cap.xs_m.clone(),
        ys_m: cap.ys_m.clone(),
        winner,
        margin_db: margin,
        polylines,
        tie_eps_db,
    })
}

/// Zero-iso segments per cell, chained into polylines.
fn marching_squares(xs: &[f64], ys: &[f64], values: &[f64], iso: f64) -> Vec<Vec<[f64; 2]>> {
    let nx = xs.len();
    let ny = ys.len();
    let mut segments: Vec<([f64; 2], [f64; 2])> = Vec::new();
    let v = |ix: usize, iy: usize| values[iy * nx + ix];
    let lerp = |a: f64, b: f64, va: f64, vb: f64| a + (iso - va) / (vb - va) * (b - a);
    for iy in 0..ny.saturating_sub(1) {
        for ix in 0..nx.saturating_sub(1) {
            let v00 = v(ix, iy);
            let v10 = v(ix + 1, iy);
            let v11 = v(ix + 1, iy + 1);
            let v01 = v(ix, iy + 1);
            if !(v00.is_finite() && v10.is_finite() && v11.is_finite() && v01.is_finite()) {
                continue;
            }
            let mut case = 0u8;
            if v00 >= iso {
                case |= 1;
            }
            if v10 >= iso {
                case |= 2;
            }
            if v11 >= iso {
                case |= 4;
            }
            if v01 >= iso {
                case |= 8;
            }
            if case == 0 || case == 15 {
                continue;
            }
            let (x0, x1) = (xs[ix], xs[ix + 1]);
            let (y0, y1) = (ys[iy], ys[iy + 1]);
            let bottom = || [lerp(x0, x1, v00, v10), y0];
            let right = || [x1, lerp(y0, y1, v10, v11)];
            let top = || [lerp(x0, x1, v01, v11), y1];
            let left = || [x0, lerp(y0, y1, v00, v01)];
            match case {
                1 | 14 => segments.push((left(), bottom())),
                2 | 13 => segments.push((bottom(), right())),
                3 | 12 => segments.push((left(), right())),
                4 | 11 => segments.push((right(), top())),
                6 | 9 => segments.push((bottom(), top())),
                7 | 8 => segments.push((top(), left())),
                5 | 10 => {
                    // saddle: disambiguate with the cell-center average
                    let center = (v00 + v10 + v11 + v01) / 4.0;
                    let flip = (center >= iso) == (case == 5);
                    if flip {
                        segments.push((left(), top()));
                        segments.push((bottom(), right()));
                    } else {
                        segments.push((left(), bottom()));
                        segments.push((right(), top()));
                    }
                }
                _ => unreachable!(),
            }
        }
    }
    chain_segments(segments)
}

/// Join segments end-to-end into polylines (greedy, endpoint hashing).
fn chain_segments(segments: Vec<([f64; 2], [f64; 2])>) -> Vec<Vec<[f64; 2]>> {
    use std::collections::HashMap;
    let key = |p: [f64; 2]| (p[0].to_bits(), p[1].to_bits());
    let mut by_start: HashMap<(u64, u64), Vec<usize>> = HashMap::new();
    for (i, (s, _)) in segments.iter().enumerate() {
        by_start.entry(key(*s)).or_default().push(i);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    for i in 0..segments.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let (s, e) = segments[i];
        let mut line = vec![s, e];
        loop {
            let last = *line.last().expect("non-empty");
            let Some(cands) = by_start.get(&key(last)) else {
                break;
            };
            let Some(&next) = cands.iter().find(|&&c| !used[c]) else {
                break;
            };
            used[next] = true;
            line.push(segments[next].1);
        }
        lines.push(line);
    }
    lines
}

#[derive(Debug, Clone, Copy)]
pub struct Recommendation {
    pub mode: RxMode,
    pub margin_db: f64,
}

/// Nearest-cell winner at `position`. Ties resolve to capacitive (the
/// simpler receiver). Cells without data defer to the nearest decided
/// cell.
pub fn recommend_mode(
    map: &ModeRegionMap,
    position: [f64; 2],
) -> Result<Recommendation, ScenarioError> {
    let within = |axis: &[f64], v: f64| -> bool {
        if axis.len() < 2 {
            return false;
        }
        let step = axis[1] - axis[0];
        v >= axis[0] - 0.5 * step && v <= axis[axis.len() - 1] + 0.5 * step
    };
    if !within(&map.xs_m, position[0]) || !within(&map.ys_m, position[1]) {
        return Err(ScenarioError::OutOfBounds { position });
    }
    let mut best: Option<(f64, usize)> = None;
    for (iy, y) in map.ys_m.iter().enumerate() {
        for (ix, x) in map.xs_m.iter().enumerate() {
            let idx = iy * map.nx() + ix;
            if map.winner[idx].is_none() {
                continue;
            }
            let d2 = (x - position[0]).powi(2) + (y - position[1]).powi(2);
            if best.is_none_or(|(bd, _)| d2 < bd) {
                best = Some((d2, idx));
            }
        }
    }
    let (_, idx) = best.ok_or(ScenarioError::OutOfBounds { position })?;
    let mode = match map.winner[idx].expect("filtered") {
        Winner::Galvanic => RxMode::Galvanic,
        Winner::Capacitive | Winner::Tie => RxMode::Capacitive,
    };
    let margin = if map.winner[idx] == Some(Winner::Tie) {
        0.0
    } else {
        map.margin_db[idx]
    };
    Ok(Recommendation {
        mode,
        margin_db: margin,
    })
}

/// Whole-map penalty summary: the worst case of using the losing mode in
/// each region.
#[derive(Debug, Clone, Copy, Default)]
pub struct RegionSummary {
    pub max_capacitive_penalty_in_galvanic_region_db: f64,
    pub max_galvanic_penalty_in_capacitive_region_db: f64,
    pub galvanic_cells: usize,
    pub capacitive_cells: usize,
    pub tie_cells: usize,
}

pub fn map_summary(map: &ModeRegionMap) -> RegionSummary {
    let mut s = RegionSummary::default();
    for (idx, w) in map.winner.iter().enumerate() {
        match w {
            Some(Winner::Galvanic) => {
                s.galvanic_cells += 1;
                s.max_capacitive_penalty_in_galvanic_region_db = s
                    .max_capacitive_penalty_in_galvanic_region_db
                    .max(map.margin_db[idx]);
            }
            Some(Winner::Capacitive) => {
                s.capacitive_cells += 1;
                s.max_galvanic_penalty_in_capacitive_region_db = s
                    .max_galvanic_penalty_in_capacitive_region_db
                    .max(map.margin_db[idx]);
            }
            Some(Winner::Tie) => s.tie_cells += 1,
            None => {}
        }
    }
    s
}

#[derive(Debug, Clone, Copy)]
pub struct FloorReport {
    pub median_db: f64,
    pub iqr_db: f64,
    pub points: usize,
    /// False when the far region is not actually flat (IQR above
    /// [`SATURATION_IQR_DB`]).
    pub saturated: bool,
}

/// Median path loss over the far region (separation from `origin` above
/// `min_separation_m`), with IQR spread.
pub fn saturation_floor(
    grid: &PathLossGrid,
    mode: RxMode,
    origin: [f64; 2],
    min_separation_m: f64,
) -> Result<FloorReport, ScenarioError> {
    let values = grid.values(mode).ok_or(ScenarioError::MissingMode(mode))?;
    let mut far = Vec::new();
    for (iy, y) in grid.ys_m.iter().enumerate() {
        for (ix, x) in grid.xs_m.iter().enumerate() {
            let v = values[iy * grid.nx() + ix];
            if !v.is_finite() {
                continue;
            }
            let sep = ((x - origin[0]).powi(2) + (y - origin[1]).powi(2)).sqrt();
            if sep > min_separation_m {
                far.push(v);
            }
        }
    }
    if far.len() < 5 {
        return Err(ScenarioError::TooFewPoints {
            found: far.len(),
            need: 5,
        });
    }
    far.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let q = |f: f64| -> f64 {
        let pos = f * (far.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        far[lo] * (1.0 - frac) + far[hi] * frac
    };
    let median = q(0.5);
    let iqr = q(0.75) - q(0.25);
    Ok(FloorReport {
        median_db: median,
        iqr_db: iqr,
        points: far.len(),
        saturated: iqr <= SATURATION_IQR_DB,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct NullPoint {
    pub index: usize,
    pub distance_m: f64,
    pub path_loss_db: f64,
    pub prominence_db: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NullReport {
    pub found: Option<NullPoint>,
}

/// Most prominent interior local minimum of the curve, reported when its
/// prominence against both side plateaus reaches [`NULL_PROMINENCE_DB`].
pub fn find_null(curve: &PathLossCurve) -> Result<NullReport, ScenarioError> {
    let v = curve.losses_db();
    if v.len() < 5 {
        return Err(ScenarioError::TooFewPoints {
            found: v.len(),
            need: 5,
        });
    }
    let mut best: Option<NullPoint> = None;
    for i in 1..v.len() - 1 {
        if !(v[i] < v[i - 1] && v[i] <= v[i + 1]) {
            continue;
        }
        let left_max = v[..i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let right_max = v[i + 1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let prominence = left_max.min(right_max) - v[i];
        if prominence >= NULL_PROMINENCE_DB && best.is_none_or(|b| prominence > b.prominence_db) {
            best = Some(NullPoint {
                index: i,
                distance_m: curve.samples[i].distance_m,
                path_loss_db: v[i],
                prominence_db: prominence,
            });
        }
    }
    Ok(NullReport { found: best })
}

/// `distance_m,mode,path_loss_db` table for one or more curves.
pub fn curves_to_csv(curves: &BTreeMap<RxMode, PathLossCurve>) -> String {
    let mut out = String::from("distance_m,mode,path_loss_db\n");
    for (mode, curve) in curves {
        for s in &curve.samples {
            out.push_str(&format!(
                "{},{},{}\n",
                s.distance_m,
                mode.name(),
                s.path_loss_db
            ));
        }
    }
    out
}
