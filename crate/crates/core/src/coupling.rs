//! Receiver pickup models: convert a solved potential field into received
//! voltages for galvanic and capacitive receivers, compute path loss, and
//! provide the homogeneous-medium current-dipole oracle.
//!
//! Receivers are observation-only (high-impedance buffer at the front
//! end): sampling the field does not load it, so one solve serves any
//! number of receiver positions.

use num_complex::Complex64;
use thiserror::Error;

use crate::phantom::VoxelGrid;
use crate::solver::PotentialField;

/// Sentinel floor for `path_loss_db` when the received voltage underflows.
pub const PATH_LOSS_FLOOR_DB: f64 = -300.0;
/// Contacts farther than this many voxels from any body-surface voxel are
/// rejected as off-surface.
pub const SNAP_RADIUS_VOXELS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum RxMode {
    Capacitive,
    Galvanic,
}

impl RxMode {
    pub fn name(&self) -> &'static str {
        match self {
            RxMode::Capacitive => "capacitive",
            RxMode::Galvanic => "galvanic",
        }
    }

    pub fn parse(s: &str) -> Option<RxMode> {
        match s.trim().to_ascii_lowercase().as_str() {
            "capacitive" | "cap" => Some(RxMode::Capacitive),
            "galvanic" | "galv" => Some(RxMode::Galvanic),
            _ => None,
        }
    }
}

impl std::fmt::Display for RxMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Return-path divider of a capacitive receiver: the body potential at the
/// contact drives the series return-path capacitance into the load.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapacitiveDivider {
    /// Parasitic capacitance from the device's floating ground to earth.
    pub c_return_f: f64,
    /// Buffer input resistance.
    pub load_r_ohm: f64,
    /// Buffer input capacitance (0 allowed).
    pub load_c_f: f64,
}

impl Default for CapacitiveDivider {
    fn default() -> Self {
        // order-of-magnitude wearable values; config, not physics
        CapacitiveDivider {
            c_return_f: 1.0e-12,
            load_r_ohm: 1.0e6,
            load_c_f: 10.0e-12,
        }
    }
}

impl CapacitiveDivider {
    pub fn validate(&self) -> Result<(), CouplingError> {
        if !(self.c_return_f.is_finite() && self.c_return_f > 0.0) {
            return Err(CouplingError::InvalidParameter(
                "c_return_f must be positive".into(),
            ));
        }
        if !(self.load_r_ohm.is_finite() && self.load_r_ohm > 0.0) {
            return Err(CouplingError::InvalidParameter(
                "load_r_ohm must be positive".into(),
            ));
        }
        if !(self.load_c_f.is_finite() && self.load_c_f >= 0.0) {
            return Err(CouplingError::InvalidParameter(
                "load_c_f must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Complex divider ratio v_rx / phi(contact) at `frequency_hz`:
    /// `Z_load / (Z_load + Z_return)`.
    pub fn ratio(&self, frequency_hz: f64) -> Complex64 {
        let w = 2.0 * std::f64::consts::PI * frequency_hz;
        let z_return = Complex64::new(0.0, -1.0 / (w * self.c_return_f));
        let z_load = if self.load_c_f > 0.0 {
            let zc = Complex64::new(0.0, -1.0 / (w * self.load_c_f));
            let r = Complex64::new(self.load_r_ohm, 0.0);
            r * zc / (r + zc)
        } else {
            Complex64::new(self.load_r_ohm, 0.0)
        };
        z_load / (z_load + z_return)
    }
}

/// Receiver model: galvanic differential pair or capacitive single contact
/// with an earth-referenced return-path divider.
#[derive(Debug, Clone, PartialEq)]
pub enum RxModel {
    Galvanic {
        contact_a: [f64; 3],
        contact_b: [f64; 3],
    },
    Capacitive {
        contact: [f64; 3],
        divider: CapacitiveDivider,
    },
}

#[derive(Debug, Error)]
pub enum CouplingError {
    #[error("contact ({0}, {1}, {2}) is not on the body surface (nearest surface voxel {dist:.4} m away)", position[0], position[1], position[2])]
    ContactOffSurface { position: [f64; 3], dist: f64 },
    #[error("galvanic contacts collapse onto the same surface voxel")]
    ContactsTooClose,
    #[error("dipole potential requested at zero radius")]
    ZeroRadius,
    #[error("invalid coupling parameter: {0}")]
    InvalidParameter(String),
}

/// Precomputed list of body-surface voxels for fast contact snapping.
pub struct SurfaceIndex {
    voxels: Vec<u32>,
    centers: Vec<[f64; 3]>,
    max_snap_m: f64,
}

impl SurfaceIndex {
    pub fn build(grid: &VoxelGrid) -> SurfaceIndex {
        let voxels = grid.surface_voxels();
        let centers = voxels
            .iter()
            .map(|&v| grid.center_of(v as usize))
            .collect();
        SurfaceIndex {
            voxels,
            centers,
            max_snap_m: SNAP_RADIUS_VOXELS * grid.resolution_m,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    /// Nearest surface voxel to `p` within the snap radius.
    pub fn snap(&self, p: [f64; 3]) -> Result<u32, CouplingError> {
        let mut best = None;
        let mut best_d2 = f64::INFINITY;
        for (vox, c) in self.voxels.iter().zip(&self.centers) {
            let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
            if d2 < best_d2 {
                best_d2 = d2;
                best = Some(*vox);
            }
        }
        match best {
            Some(vox) if best_d2.sqrt() <= self.max_snap_m => Ok(vox),
            _ => Err(CouplingError::ContactOffSurface {
                position: p,
                dist: best_d2.sqrt(),
            }),
        }
    }
}

/// Differential voltage `phi(contact_a) - phi(contact_b)` of a galvanic
/// receiver (non-loading).
pub fn galvanic_pickup(
    field: &PotentialField,
    contact_a: [f64; 3],
    contact_b: [f64; 3],
) -> Result<Complex64, CouplingError> {
    let surf = SurfaceIndex::build(field.grid());
    galvanic_pickup_indexed(field, &surf, contact_a, contact_b)
}

/// As [`galvanic_pickup`] with a prebuilt surface index.
pub fn galvanic_pickup_indexed(
    field: &PotentialField,
    surf: &SurfaceIndex,
    contact_a: [f64; 3],
    contact_b: [f64; 3],
) -> Result<Complex64, CouplingError> {
    let va = surf.snap(contact_a)?;
    let vb = surf.snap(contact_b)?;
    if va == vb {
        return Err(CouplingError::ContactsTooClose);
    }
    Ok(field.phi[va as usize] - field.phi[vb as usize])
}

/// Capacitive receiver voltage: body potential at the contact driving the
/// return-path divider, referenced to earth ground.
pub fn capacitive_pickup(
    field: &PotentialField,
    contact: [f64; 3],
    divider: &CapacitiveDivider,
    frequency_hz: f64,
) -> Result<Complex64, CouplingError> {
    let surf = SurfaceIndex::build(field.grid());
    capacitive_pickup_indexed(field, &surf, contact, divider, frequency_hz)
}

/// As [`capacitive_pickup`] with a prebuilt surface index.
pub fn capacitive_pickup_indexed(
    field: &PotentialField,
    surf: &SurfaceIndex,
    contact: [f64; 3],
    divider: &CapacitiveDivider,
    frequency_hz: f64,
) -> Result<Complex64, CouplingError> {
    divider.validate()?;
    if !(frequency_hz.is_finite() && frequency_hz > 0.0) {
        return Err(CouplingError::InvalidParameter(
            "frequency_hz must be positive".into(),
        ));
    }
    let v = surf.snap(contact)?;
    Ok(field.phi[v as usize] * divider.ratio(frequency_hz))
}

/// `20 log10(|v_rx| / v_tx)`, floored at [`PATH_LOSS_FLOOR_DB`].
/// Requires `v_tx > 0`.
pub fn path_loss_db(v_rx: Complex64, v_tx: f64) -> f64 {
    debug_assert!(v_tx > 0.0, "path loss needs a positive drive voltage");
    let mag = v_rx.norm();
    if mag == 0.0 {
        return PATH_LOSS_FLOOR_DB;
    }
    (20.0 * (mag / v_tx).log10()).max(PATH_LOSS_FLOOR_DB)
}

/// Current dipole in an infinite homogeneous medium, the closed-form
/// oracle for solver validation.
#[derive(Debug, Clone, Copy)]
pub struct CurrentDipole {
    pub center_m: [f64; 3],
    /// Unit axis, pointing from the negative toward the positive source.
    pub axis: [f64; 3],
    /// Dipole strength I*d (A*m).
    pub moment_a_m: Complex64,
    /// Complex admittivity of the infinite medium (S/m).
    pub medium_admittivity: Complex64,
}

/// `phi = (I d cos(theta)) / (4 pi y r^2)`.
pub fn analytic_dipole_potential(
    point: [f64; 3],
    dipole: &CurrentDipole,
) -> Result<Complex64, CouplingError> {
    let rv = [
        point[0] - dipole.center_m[0],
        point[1] - dipole.center_m[1],
        point[2] - dipole.center_m[2],
    ];
    let r2 = rv[0] * rv[0] + rv[1] * rv[1] + rv[2] * rv[2];
    if r2 == 0.0 {
        return Err(CouplingError::ZeroRadius);
    }
    let r = r2.sqrt();
    let cos_theta =
        (rv[0] * dipole.axis[0] + rv[1] * dipole.axis[1] + rv[2] * dipole.axis[2]) / r;
    Ok(
        dipole.moment_a_m * cos_theta
            / (4.0 * std::f64::consts::PI * dipole.medium_admittivity * r2),
    )
}
