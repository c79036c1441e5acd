//! Synthetic "paper-shaped" fixture grids.
//!
//! The bench campaigns behind the published trends are not available as
//! raw data, so the repository ships deterministic synthetic stand-ins
//! shaped to the headline numbers: a capacitive far-region floor at
//! -52 dB, a galvanic-preferred ring inside 5 cm separation, and
//! mode-selection margins of 5 dB near the transmitter and 15 dB at 30 cm.
//! Every file and grid produced here is labeled synthetic.
//!
//! Measured-format fixtures quantize to 0.25 dB (typical analyzer display
//! resolution); the quarter-dB values are exactly representable in f64,
//! which keeps the calibration affine identity bit-exact in tests.

use crate::coupling::RxMode;
use crate::scenario::{GridMeta, PathLossGrid, Provenance};

/// Fixture lattice: x, y in cm.
pub const FIXTURE_COORDS_CM: std::ops::RangeInclusive<i32> = -40..=40;
/// Fixture lattice step (cm).
pub const FIXTURE_STEP_CM: i32 = 2;
/// Transmit power assumed when generating measured-format fixtures (dBm).
pub const FIXTURE_TX_POWER_DBM: f64 = 0.0;
/// Attenuator in the fixture measurement chain (dB).
pub const FIXTURE_ATTENUATOR_DB: f64 = 20.0;

/// Capacitive path loss shape: inter-device lift over a -52 dB body
/// potential floor.
pub fn capacitive_path_loss_db(x_cm: f64, y_cm: f64) -> f64 {
    let r = (x_cm * x_cm + y_cm * y_cm).sqrt();
    -52.0 + 17.0 * (-r / 3.0).exp()
}

/// Galvanic-minus-capacitive margin: +5 dB at the transmitter, zero at
/// the 5 cm crossover, -15 dB at 30 cm, monotone throughout.
fn mode_margin_db(r_cm: f64) -> f64 {
    if r_cm <= 5.0 {
        5.0 - r_cm
    } else {
        -0.6 * (r_cm - 5.0)
    }
}

/// Galvanic path loss shape: wins inside the 5 cm ring, then keeps
/// increasing with distance.
pub fn galvanic_path_loss_db(x_cm: f64, y_cm: f64) -> f64 {
    let r = (x_cm * x_cm + y_cm * y_cm).sqrt();
    capacitive_path_loss_db(x_cm, y_cm) + mode_margin_db(r)
}

/// Deterministic sub-dB texture shared by both modes (cancels out of any
/// mode-vs-mode margin before quantization).
fn ripple_db(x_cm: f64, y_cm: f64) -> f64 {
    0.2 * (0.7 * x_cm).sin() * (0.53 * y_cm).cos()
}

fn quantize_quarter_db(v: f64) -> f64 {
    (v * 4.0).round() / 4.0
}

fn lattice_cm() -> Vec<f64> {
    FIXTURE_COORDS_CM
        .step_by(FIXTURE_STEP_CM as usize)
        .map(f64::from)
        .collect()
}

fn measured_csv(mode: RxMode, shape: impl Fn(f64, f64) -> f64) -> String {
    let mut out = String::new();
    out.push_str(&format!("#meta mode={}\n", mode.name()));
    out.push_str("#meta frequency_hz=21000000\n");
    out.push_str("#meta note=synthetic paper-shaped fixture, not bench data\n");
    out.push_str("x_cm,y_cm,p_rx_dbm\n");
    for y in lattice_cm() {
        for x in lattice_cm() {
            let pl = shape(x, y) + ripple_db(x, y);
            let p_rx = quantize_quarter_db(pl) + FIXTURE_TX_POWER_DBM - FIXTURE_ATTENUATOR_DB;
            out.push_str(&format!("{x},{y},{p_rx}\n"));
        }
    }
    out
}

/// Capacitive campaign fixture in the bench text format.
pub fn capacitive_measured_csv() -> String {
    measured_csv(RxMode::Capacitive, capacitive_path_loss_db)
}

/// Galvanic campaign fixture in the bench text format.
pub fn galvanic_measured_csv() -> String {
    measured_csv(RxMode::Galvanic, galvanic_path_loss_db)
}

/// Smooth (unquantized, rippleless) simulated-role grid over the same
/// lattice, both modes.
pub fn sim_map_grid() -> PathLossGrid {
    let xs: Vec<f64> = lattice_cm().iter().map(|x| x / 100.0).collect();
    let ys = xs.clone();
    let nx = xs.len();
    let mut cap = vec![0.0; nx * nx];
    let mut galv = vec![0.0; nx * nx];
    for (iy, y) in lattice_cm().iter().enumerate() {
        for (ix, x) in lattice_cm().iter().enumerate() {
            cap[iy * nx + ix] = capacitive_path_loss_db(*x, *y);
            galv[iy * nx + ix] = galvanic_path_loss_db(*x, *y);
        }
    }
    let mut grid = PathLossGrid::new(
        xs,
        ys,
        Provenance::Simulated,
        GridMeta {
            frequency_hz: Some(21.0e6),
            v_tx: None,
            tx_power_dbm: None,
        },
    );
    grid.insert_mode(RxMode::Capacitive, cap);
    grid.insert_mode(RxMode::Galvanic, galv);
    grid
}

/// The simulated-role fixture as a grid table.
pub fn sim_map_csv() -> String {
    sim_map_grid().to_csv()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measure::{ingest_grid, Calibration};
    use crate::scenario::{crossover_contour, recommend_mode, saturation_floor, Winner};

    fn cal0() -> Calibration {
        Calibration {
            tx_power_dbm: Some(FIXTURE_TX_POWER_DBM),
            ..Calibration::default()
        }
    }

    #[test]
    fn margins_are_exact_on_smooth_shapes() {
        assert_eq!(galvanic_path_loss_db(0.0, 0.0) - capacitive_path_loss_db(0.0, 0.0), 5.0);
        let d30 = capacitive_path_loss_db(30.0, 0.0) - galvanic_path_loss_db(30.0, 0.0);
        assert!((d30 - 15.0).abs() < 1e-12);
        // crossover exactly at 5 cm
        assert!((galvanic_path_loss_db(5.0, 0.0) - capacitive_path_loss_db(5.0, 0.0)).abs() < 1e-12);
    }

    #[test]
    fn galvanic_shape_keeps_increasing_with_distance() {
        let mut last = galvanic_path_loss_db(0.0, 0.0);
        for i in 1..40 {
            let v = galvanic_path_loss_db(i as f64, 0.0);
            assert!(v < last, "galvanic path loss must worsen with distance");
            last = v;
        }
    }

    #[test]
    fn capacitive_fixture_floor_is_minus_52() {
        let grid = ingest_grid(&capacitive_measured_csv(), &cal0()).unwrap();
        let floor = saturation_floor(&grid, RxMode::Capacitive, [0.0, 0.0], 0.10).unwrap();
        assert!(
            (floor.median_db + 52.0).abs() <= 1.0,
            "floor {} dB outside -52 +/- 1",
            floor.median_db
        );
        assert!(floor.saturated);
    }

    #[test]
    fn fixture_crossover_ring_within_5cm() {
        let cap = ingest_grid(&capacitive_measured_csv(), &cal0()).unwrap();
        let galv = ingest_grid(&galvanic_measured_csv(), &cal0()).unwrap();
        let map = crossover_contour(&cap, &galv, 0.5).unwrap();
        let mut n_galv = 0;
        for (iy, y) in map.ys_m.iter().enumerate() {
            for (ix, x) in map.xs_m.iter().enumerate() {
                if map.winner[iy * map.nx() + ix] == Some(Winner::Galvanic) {
                    n_galv += 1;
                    let r = (x * x + y * y).sqrt();
                    assert!(
                        r <= 0.05 + 1e-9,
                        "galvanic-preferred cell at {r} m, outside the 5 cm ring"
                    );
                }
            }
        }
        assert!(n_galv >= 3, "expected a galvanic core near the transmitter");
    }

    #[test]
    fn fixture_recommend_margins() {
        let cap = ingest_grid(&capacitive_measured_csv(), &cal0()).unwrap();
        let galv = ingest_grid(&galvanic_measured_csv(), &cal0()).unwrap();
        let map = crossover_contour(&cap, &galv, 0.5).unwrap();
        let near = recommend_mode(&map, [0.0, 0.0]).unwrap();
        assert_eq!(near.mode, RxMode::Galvanic);
        assert!((near.margin_db - 5.0).abs() <= 1.0, "near margin {}", near.margin_db);
        let far = recommend_mode(&map, [0.30, 0.0]).unwrap();
        assert_eq!(far.mode, RxMode::Capacitive);
        assert!((far.margin_db - 15.0).abs() <= 1.0, "far margin {}", far.margin_db);
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(capacitive_measured_csv(), capacitive_measured_csv());
        assert_eq!(sim_map_csv(), sim_map_csv());
    }
}
