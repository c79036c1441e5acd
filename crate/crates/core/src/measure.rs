//! Ingestion of bench measurement grids and comparison against simulated
//! grids.
//!
//! Input format: comma-separated `x_cm,y_cm,p_rx_dbm` rows preceded by a
//! `#meta key=value` header block (`frequency_hz`, `mode`, optional
//! `tx_power_dbm` override). The calibration chain adds the attenuator
//! back to the analyzer reading (it sat before the instrument), removes
//! buffer gain, adds cable loss, and references against the transmit
//! power:
//!
//! `path_loss_db = (p_rx_dbm + attenuator_db - buffer_gain_db + cable_loss_db) - tx_power_dbm`

use std::collections::BTreeMap;

use thiserror::Error;

use crate::coupling::RxMode;
use crate::scenario::{
    crossover_contour, find_null, saturation_floor, ChannelSample, GridMeta, PathLossCurve,
    PathLossGrid, Provenance, DEFAULT_FAR_REGION_M, DEFAULT_TIE_EPS_DB,
};

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("measurement parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("duplicate coordinate ({x_cm}, {y_cm}) cm at line {line}")]
    DuplicateCoordinate { x_cm: f64, y_cm: f64, line: usize },
    #[error("transmit power is required: pass it via calibration flags or a tx_power_dbm meta line")]
    MissingTxPower,
    #[error("receiver mode is required: add a `#meta mode=...` line or pass it explicitly")]
    MissingMode,
    #[error("invalid calibration: {0}")]
    InvalidCalibration(String),
    #[error("no overlapping coordinates between the grids")]
    NoOverlap,
}

/// Measurement-chain calibration. `tx_power_dbm` has no default: the
/// transmit drive level is campaign-specific and must be supplied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub attenuator_db: f64,
    pub buffer_gain_db: f64,
    pub tx_power_dbm: Option<f64>,
    pub cable_loss_db: f64,
}

impl Default for Calibration {
    fn default() -> Self {
        Calibration {
            attenuator_db: 20.0,
            buffer_gain_db: 0.0,
            tx_power_dbm: None,
            cable_loss_db: 0.0,
        }
    }
}

impl Calibration {
    pub fn validate(&self) -> Result<(), MeasureError> {
        if !self.attenuator_db.is_finite() || self.attenuator_db < 0.0 {
            return Err(MeasureError::InvalidCalibration(
                "attenuator_db must be finite and non-negative".into(),
            ));
        }
        for (name, v) in [
            ("buffer_gain_db", self.buffer_gain_db),
            ("cable_loss_db", self.cable_loss_db),
        ] {
            if !v.is_finite() {
                return Err(MeasureError::InvalidCalibration(format!(
                    "{name} must be finite"
                )));
            }
        }
        if let Some(p) = self.tx_power_dbm {
            if !p.is_finite() {
                return Err(MeasureError::InvalidCalibration(
                    "tx_power_dbm must be finite".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasRow {
    pub x_cm: f64,
    pub y_cm: f64,
    pub p_rx_dbm: f64,
}

/// Raw campaign data as parsed from the bench format.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasuredGrid {
    pub rows: Vec<MeasRow>,
    pub mode: Option<RxMode>,
    pub frequency_hz: Option<f64>,
    /// Optional per-file transmit-power override.
    pub tx_power_dbm: Option<f64>,
    /// Remaining metadata (date, notes, ...), order-preserved by key.
    pub meta: BTreeMap<String, String>,
}

/// Parse the bench text format. Duplicate coordinates are rejected.
pub fn parse_measured(source: &str) -> Result<MeasuredGrid, MeasureError> {
    let mut rows: Vec<MeasRow> = Vec::new();
    let mut mode = None;
    let mut frequency_hz = None;
    let mut tx_power_dbm = None;
    let mut meta = BTreeMap::new();
    let mut seen: std::collections::HashSet<(u64, u64)> = std::collections::HashSet::new();
    for (lineno, raw) in source.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(m) = line.strip_prefix("#meta") {
            if let Some((k, v)) = m.trim().split_once('=') {
                let k = k.trim();
                let v = v.trim();
                match k {
                    "mode" => {
                        mode = Some(RxMode::parse(v).ok_or_else(|| MeasureError::ParseError {
                            line: line_no,
                            msg: format!("unknown mode '{v}'"),
                        })?)
                    }
                    "frequency_hz" => {
                        frequency_hz =
                            Some(v.parse().map_err(|e| MeasureError::ParseError {
                                line: line_no,
                                msg: format!("bad frequency_hz '{v}': {e}"),
                            })?)
                    }
                    "tx_power_dbm" => {
                        tx_power_dbm =
                            Some(v.parse().map_err(|e| MeasureError::ParseError {
                                line: line_no,
                                msg: format!("bad tx_power_dbm '{v}': {e}"),
                            })?)
                    }
                    _ => {
                        meta.insert(k.to_string(), v.to_string());
                    }
                }
            }
            continue;
        }
        if line.starts_with('#') || line.eq_ignore_ascii_case("x_cm,y_cm,p_rx_dbm") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(MeasureError::ParseError {
                line: line_no,
                msg: format!("expected 3 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64, MeasureError> {
            let v: f64 = s.parse().map_err(|e| MeasureError::ParseError {
                line: line_no,
                msg: format!("bad {what} '{s}': {e}"),
            })?;
            if !v.is_finite() {
                return Err(MeasureError::ParseError {
                    line: line_no,
                    msg: format!("{what} must be finite"),
                });
            }
            Ok(v)
        };
        let x_cm = parse(fields[0], "x_cm")?;
        let y_cm = parse(fields[1], "y_cm")?;
        let p_rx_dbm = parse(fields[2], "p_rx_dbm")?;
        if !seen.insert((x_cm.to_bits(), y_cm.to_bits())) {
            return Err(MeasureError::DuplicateCoordinate {
                x_cm,
                y_cm,
                line: line_no,
            });
        }
        rows.push(MeasRow {
            x_cm,
            y_cm,
            p_rx_dbm,
        });
    }
    if rows.is_empty() {
        return Err(MeasureError::ParseError {
            line: 0,
            msg: "no data rows".into(),
        });
    }
    Ok(MeasuredGrid {
        rows,
        mode,
        frequency_hz,
        tx_power_dbm,
        meta,
    })
}

/// Serialize back to the bench format; `parse_measured` of the output
/// reproduces the grid bit-exactly.
pub fn serialize_measured(grid: &MeasuredGrid) -> String {
    let mut out = String::new();
    if let Some(m) = grid.mode {
        out.push_str(&format!("#meta mode={}\n", m.name()));
    }
    if let Some(f) = grid.frequency_hz {
        out.push_str(&format!("#meta frequency_hz={f}\n"));
    }
    if let Some(p) = grid.tx_power_dbm {
        out.push_str(&format!("#meta tx_power_dbm={p}\n"));
    }
    for (k, v) in &grid.meta {
        out.push_str(&format!("#meta {k}={v}\n"));
    }
    out.push_str("x_cm,y_cm,p_rx_dbm\n");
    for r in &grid.rows {
        out.push_str(&format!("{},{},{}\n", r.x_cm, r.y_cm, r.p_rx_dbm));
    }
    out
}

/// Apply the calibration chain to a parsed campaign and densify onto a
/// path-loss lattice (coordinates converted cm to m, missing cells NaN).
pub fn ingest_measured(
    grid: &MeasuredGrid,
    cal: &Calibration,
) -> Result<PathLossGrid, MeasureError> {
    cal.validate()?;
    let mode = grid.mode.ok_or(MeasureError::MissingMode)?;
    let tx_power = cal
        .tx_power_dbm
        .or(grid.tx_power_dbm)
        .ok_or(MeasureError::MissingTxPower)?;

    let mut xs: Vec<f64> = grid.rows.iter().map(|r| r.x_cm / 100.0).collect();
    let mut ys: Vec<f64> = grid.rows.iter().map(|r| r.y_cm / 100.0).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    xs.dedup_by(|a, b| a.to_bits() == b.to_bits());
    ys.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    ys.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let nx = xs.len();
    let locate = |axis: &[f64], v: f64| {
        axis.iter()
            .position(|a| a.to_bits() == v.to_bits())
            .expect("value in axis by construction")
    };

    let mut mat = vec![f64::NAN; nx * ys.len()];
    for r in &grid.rows {
        let pl =
            (r.p_rx_dbm + cal.attenuator_db - cal.buffer_gain_db + cal.cable_loss_db) - tx_power;
        let ix = locate(&xs, r.x_cm / 100.0);
        let iy = locate(&ys, r.y_cm / 100.0);
        mat[iy * nx + ix] = pl;
    }
    let mut out = PathLossGrid::new(
        xs,
        ys,
        Provenance::Measured,
        GridMeta {
            frequency_hz: grid.frequency_hz,
            v_tx: None,
            tx_power_dbm: Some(tx_power),
        },
    );
    out.insert_mode(mode, mat);
    Ok(out)
}

/// Parse and calibrate in one step.
pub fn ingest_grid(source: &str, cal: &Calibration) -> Result<PathLossGrid, MeasureError> {
    ingest_measured(&parse_measured(source)?, cal)
}

/// Comparison of a simulated against a measured grid after nearest-cell
/// alignment.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    /// Percentage of finite measured cells that found a simulated partner.
    pub coverage_pct: f64,
    /// Mean (measured - simulated), pooled over common modes.
    pub bias_db: f64,
    pub rmse_db: f64,
    pub n_pairs: usize,
    /// Winner agreement between the two crossover maps, when both grids
    /// carry both modes.
    pub winner_agreement_pct: Option<f64>,
    /// Per-mode far-region floor difference (measured - simulated).
    pub floor_delta_db: Vec<(RxMode, Option<f64>)>,
    /// Per-mode null-location difference along the central row (m).
    pub null_delta_m: Vec<(RxMode, Option<f64>)>,
}

impl ComparisonReport {
    /// Line-oriented structured-text report.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("coverage_pct = {}\n", self.coverage_pct));
        out.push_str(&format!("bias_db = {}\n", self.bias_db));
        out.push_str(&format!("rmse_db = {}\n", self.rmse_db));
        out.push_str(&format!("n_pairs = {}\n", self.n_pairs));
        match self.winner_agreement_pct {
            Some(p) => out.push_str(&format!("winner_agreement_pct = {p}\n")),
            None => out.push_str("winner_agreement_pct = unavailable\n"),
        }
        for (mode, delta) in &self.floor_delta_db {
            match delta {
                Some(d) => out.push_str(&format!("floor_delta_db.{} = {d}\n", mode.name())),
                None => out.push_str(&format!("floor_delta_db.{} = unavailable\n", mode.name())),
            }
        }
        for (mode, delta) in &self.null_delta_m {
            match delta {
                Some(d) => out.push_str(&format!("null_delta_m.{} = {d}\n", mode.name())),
                None => out.push_str(&format!("null_delta_m.{} = unavailable\n", mode.name())),
            }
        }
        out
    }
}

fn nearest_index(axis: &[f64], v: f64) -> Option<(usize, f64)> {
    let mut best = None;
    for (i, a) in axis.iter().enumerate() {
        let d = (a - v).abs();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

fn central_row_curve(grid: &PathLossGrid, mode: RxMode) -> Option<PathLossCurve> {
    let values = grid.values(mode)?;
    let (iy, _) = nearest_index(&grid.ys_m, 0.0)?;
    let samples: Vec<ChannelSample> = grid
        .xs_m
        .iter()
        .enumerate()
        .filter(|(ix, _)| values[iy * grid.nx() + ix].is_finite())
        .map(|(ix, &x)| ChannelSample {
            distance_m: x,
            position_m: [x, grid.ys_m[iy], 0.0],
            mode,
            v_rx: num_complex::Complex64::new(0.0, 0.0),
            v_tx: 1.0,
            path_loss_db: values[iy * grid.nx() + ix],
        })
        .collect();
    Some(PathLossCurve { samples })
}

/// Compare grids cell by cell after nearest-cell alignment. Alignment
/// tolerance is half the finer lattice step.
pub fn compare(sim: &PathLossGrid, meas: &PathLossGrid) -> Result<ComparisonReport, MeasureError> {
    let step = |axis: &[f64]| -> f64 {
        if axis.len() >= 2 {
            axis[1] - axis[0]
        } else {
            f64::INFINITY
        }
    };
    let tol_x = 0.5 * step(&sim.xs_m).min(step(&meas.xs_m));
    let tol_y = 0.5 * step(&sim.ys_m).min(step(&meas.ys_m));

    let common_modes: Vec<RxMode> = meas.modes().filter(|m| sim.has_mode(*m)).collect();
    let mut diffs: Vec<f64> = Vec::new();
    let mut meas_total = 0usize;
    for &mode in &common_modes {
        let mv = meas.values(mode).expect("common mode");
        let sv = sim.values(mode).expect("common mode");
        for (iy, &y) in meas.ys_m.iter().enumerate() {
            for (ix, &x) in meas.xs_m.iter().enumerate() {
                let m = mv[iy * meas.nx() + ix];
                if !m.is_finite() {
                    continue;
                }
                meas_total += 1;
                let Some((sx, dx)) = nearest_index(&sim.xs_m, x) else {
                    continue;
                };
                let Some((sy, dy)) = nearest_index(&sim.ys_m, y) else {
                    continue;
                };
                if dx > tol_x + 1e-12 || dy > tol_y + 1e-12 {
                    continue;
                }
                let s = sv[sy * sim.nx() + sx];
                if !s.is_finite() {
                    continue;
                }
                diffs.push(m - s);
            }
        }
    }
    if diffs.is_empty() {
        return Err(MeasureError::NoOverlap);
    }
    let n = diffs.len() as f64;
    let bias = diffs.iter().sum::<f64>() / n;
    let rmse = (diffs.iter().map(|d| d * d).sum::<f64>() / n).sqrt();
    let coverage = 100.0 * diffs.len() as f64 / meas_total.max(1) as f64;

    // winner agreement between the two crossover maps
    let both = |g: &PathLossGrid| g.has_mode(RxMode::Capacitive) && g.has_mode(RxMode::Galvanic);
    let winner_agreement = if both(sim) && both(meas) {
        let sim_map = crossover_contour(sim, sim, DEFAULT_TIE_EPS_DB).ok();
        let meas_map = crossover_contour(meas, meas, DEFAULT_TIE_EPS_DB).ok();
        match (sim_map, meas_map) {
            (Some(sm), Some(mm)) => {
                let mut agree = 0usize;
                let mut total = 0usize;
                for (iy, &y) in meas.ys_m.iter().enumerate() {
                    for (ix, &x) in meas.xs_m.iter().enumerate() {
                        let Some(mw) = mm.winner[iy * mm.nx() + ix] else {
                            continue;
                        };
                        let Some((sx, dx)) = nearest_index(&sim.xs_m, x) else {
                            continue;
                        };
                        let Some((sy, dy)) = nearest_index(&sim.ys_m, y) else {
                            continue;
                        };
                        if dx > tol_x + 1e-12 || dy > tol_y + 1e-12 {
                            continue;
                        }
                        let Some(sw) = sm.winner[sy * sm.nx() + sx] else {
                            continue;
                        };
                        total += 1;
                        if sw == mw {
                            agree += 1;
                        }
                    }
                }
                (total > 0).then(|| 100.0 * agree as f64 / total as f64)
            }
            _ => None,
        }
    } else {
        None
    };

    let mut floor_delta = Vec::new();
    let mut null_delta = Vec::new();
    for &mode in &common_modes {
        let fs = saturation_floor(sim, mode, [0.0, 0.0], DEFAULT_FAR_REGION_M).ok();
        let fm = saturation_floor(meas, mode, [0.0, 0.0], DEFAULT_FAR_REGION_M).ok();
        floor_delta.push((
            mode,
            match (fs, fm) {
                (Some(a), Some(b)) => Some(b.median_db - a.median_db),
                _ => None,
            },
        ));
        let ns = central_row_curve(sim, mode)
            .and_then(|c| find_null(&c).ok())
            .and_then(|r| r.found);
        let nm = central_row_curve(meas, mode)
            .and_then(|c| find_null(&c).ok())
            .and_then(|r| r.found);
        null_delta.push((
            mode,
            match (ns, nm) {
                (Some(a), Some(b)) => Some((b.distance_m - a.distance_m).abs()),
                _ => None,
            },
        ));
    }

    Ok(ComparisonReport {
        coverage_pct: coverage,
        bias_db: bias,
        rmse_db: rmse,
        n_pairs: diffs.len(),
        winner_agreement_pct: winner_agreement,
        floor_delta_db: floor_delta,
        null_delta_m: null_delta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const SAMPLE: &str = "#meta mode=capacitive\n#meta frequency_hz=21000000\n\
x_cm,y_cm,p_rx_dbm\n0,0,-55\n2,0,-60.25\n0,2,-61.5\n2,2,-72\n4,0,-62\n";

    #[test]
    fn formula_arithmetic() {
        let cal = Calibration {
            tx_power_dbm: Some(0.0),
            ..Calibration::default()
        };
        let grid = ingest_grid("#meta mode=capacitive\n3,4,-60\n0,0,-50\n", &cal).unwrap();
        // PL = -60 + 20 - 0 + 0 - 0 = -40
        let v = grid.values(RxMode::Capacitive).unwrap();
        assert!(v.contains(&-40.0));
        assert!(v.contains(&-30.0));
        assert_eq!(grid.provenance, Provenance::Measured);
    }

    #[test]
    fn missing_tx_power_rejected() {
        let cal = Calibration::default();
        assert!(matches!(
            ingest_grid(SAMPLE, &cal),
            Err(MeasureError::MissingTxPower)
        ));
        // meta override supplies it
        let with_meta = format!("#meta tx_power_dbm=0\n{SAMPLE}");
        assert!(ingest_grid(&with_meta, &cal).is_ok());
    }

    #[test]
    fn duplicate_coordinates_rejected() {
        let text = "#meta mode=galvanic\n3,4,-60\n3,4,-61\n";
        match parse_measured(text) {
            Err(MeasureError::DuplicateCoordinate { x_cm, y_cm, line }) => {
                assert_eq!((x_cm, y_cm, line), (3.0, 4.0, 3));
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn missing_mode_rejected() {
        let cal = Calibration {
            tx_power_dbm: Some(0.0),
            ..Calibration::default()
        };
        assert!(matches!(
            ingest_grid("1,2,-60\n", &cal),
            Err(MeasureError::MissingMode)
        ));
    }

    #[test]
    fn sparse_lattice_densified_with_nan() {
        let cal = Calibration {
            tx_power_dbm: Some(0.0),
            ..Calibration::default()
        };
        let grid = ingest_grid(SAMPLE, &cal).unwrap();
        assert_eq!(grid.nx(), 3);
        assert_eq!(grid.ny(), 2);
        let v = grid.values(RxMode::Capacitive).unwrap();
        let n_nan = v.iter().filter(|x| x.is_nan()).count();
        assert_eq!(n_nan, 1, "missing lattice cell becomes NaN");
    }

    #[test]
    fn measured_round_trips_bit_exactly() {
        let grid = parse_measured(SAMPLE).unwrap();
        let text = serialize_measured(&grid);
        let back = parse_measured(&text).unwrap();
        assert_eq!(grid, back);
    }

    #[test]
    fn calibration_is_affine_bit_exactly_on_dyadic_data() {
        // quarter-dB (dyadic) readings and a dyadic power shift make the
        // affine identity exact in f64
        let delta = 3.25;
        let cal_a = Calibration {
            tx_power_dbm: Some(0.0),
            ..Calibration::default()
        };
        let cal_b = Calibration {
            tx_power_dbm: Some(delta),
            ..Calibration::default()
        };
        let a = ingest_grid(SAMPLE, &cal_a).unwrap();
        let b = ingest_grid(SAMPLE, &cal_b).unwrap();
        let va = a.values(RxMode::Capacitive).unwrap();
        let vb = b.values(RxMode::Capacitive).unwrap();
        for (x, y) in va.iter().zip(vb) {
            if x.is_nan() {
                assert!(y.is_nan());
            } else {
                assert_eq!(*y, x - delta, "grids must differ by exactly -delta");
            }
        }
    }

    #[test]
    fn compare_identity() {
        let cal = Calibration {
            tx_power_dbm: Some(0.0),
            ..Calibration::default()
        };
        let grid = ingest_grid(SAMPLE, &cal).unwrap();
        let r = compare(&grid, &grid).unwrap();
        assert_eq!(r.bias_db, 0.0);
        assert_eq!(r.rmse_db, 0.0);
        assert_eq!(r.coverage_pct, 100.0);
    }

    #[test]
    fn compare_uniform_shift() {
        let cal = Calibration {
            tx_power_dbm: Some(0.0),
            ..Calibration::default()
        };
        let a = ingest_grid(SAMPLE, &cal).unwrap();
        let cal_shifted = Calibration {
            tx_power_dbm: Some(-3.0),
            ..Calibration::default()
        };
        let b = ingest_grid(SAMPLE, &cal_shifted).unwrap();
        let r = compare(&a, &b).unwrap();
        assert_relative_eq!(r.bias_db, 3.0, max_relative = 1e-12);
        assert_relative_eq!(r.rmse_db, 3.0, max_relative = 1e-12);
        // antisymmetry of the bias
        let r2 = compare(&b, &a).unwrap();
        assert_relative_eq!(r2.bias_db, -3.0, max_relative = 1e-12);
    }

    #[test]
    fn compare_rejects_disjoint_grids() {
        let cal = Calibration {
            tx_power_dbm: Some(0.0),
            ..Calibration::default()
        };
        let a = ingest_grid("#meta mode=capacitive\n0,0,-50\n0,2,-51\n", &cal).unwrap();
        let b = ingest_grid("#meta mode=capacitive\n50,50,-50\n50,52,-51\n", &cal).unwrap();
        assert!(matches!(compare(&a, &b), Err(MeasureError::NoOverlap)));
    }
}
