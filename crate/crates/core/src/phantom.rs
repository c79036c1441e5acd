//! Crossed-cylinder phantom construction and voxelization.
//!
//! The scene is a vertical body cylinder crossed by a horizontal arm
//! cylinder, wrapped in a skin shell, surrounded by air, with an earth
//! ground plane slab at the bottom of the domain. Everything is rasterized
//! to a uniform cell-centered voxel grid by classifying voxel centers.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on total voxel count, a guard against memory blowup.
pub const DEFAULT_MAX_VOXELS: usize = 100_000_000;

/// Geometric description of the phantom scene. All dimensions in meters.
///
/// The shipped defaults are placeholders at human scale and are not tied
/// to any published geometry; override them in the run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// Body cylinder radius.
    pub torso_radius_m: f64,
    /// Body cylinder height (whole simplified body).
    pub torso_height_m: f64,
    /// Elevation of the body cylinder base above z = 0. A positive value
    /// leaves an air gap between the body and the ground plane (hanging
    /// setup); the body is galvanically grounded when it touches the slab.
    pub torso_base_z_m: f64,
    /// Arm cylinder radius.
    pub arm_radius_m: f64,
    /// Arm cylinder length (tip to tip, along x).
    pub arm_length_m: f64,
    /// Height of the arm axis above the torso base.
    pub arm_crossing_height_m: f64,
    /// Skin shell thickness, carved from the outer part of the cylinders.
    pub skin_thickness_m: f64,
    /// Air padding between the body and the lateral/top domain boundaries.
    pub air_margin_m: f64,
    /// Earth ground elevation; the bottom voxel layer of the domain.
    pub ground_plane_z_m: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            torso_radius_m: 0.15,
            torso_height_m: 1.8,
            torso_base_z_m: 0.2,
            arm_radius_m: 0.05,
            arm_length_m: 1.8,
            arm_crossing_height_m: 1.4,
            skin_thickness_m: 0.002,
            air_margin_m: 0.3,
            ground_plane_z_m: 0.0,
        }
    }
}

/// Transmitter orientation presets per the three studied dipole axes,
/// expressed for a transmitter implanted behind the front torso surface
/// (outward normal = +y).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrientationPreset {
    /// Dipole axis vertical (+z): plates stacked along the body height.
    O1Vertical,
    /// Dipole axis lateral (+x): plates side by side, tangential to the
    /// front surface.
    O2Lateral,
    /// Dipole axis along the outward surface normal (+y).
    O3Normal,
    /// Explicit axis; normalized at validation.
    Custom([f64; 3]),
}

impl OrientationPreset {
    /// Unit dipole axis for the preset.
    pub fn axis(&self) -> Result<[f64; 3], PhantomError> {
        let a = match self {
            OrientationPreset::O1Vertical => [0.0, 0.0, 1.0],
            OrientationPreset::O2Lateral => [1.0, 0.0, 0.0],
            OrientationPreset::O3Normal => [0.0, 1.0, 0.0],
            OrientationPreset::Custom(a) => *a,
        };
        let norm = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(PhantomError::InvalidSpec {
                field: "dipole_axis".into(),
                reason: "axis must have nonzero length".into(),
            });
        }
        Ok([a[0] / norm, a[1] / norm, a[2] / norm])
    }

    pub fn name(&self) -> &'static str {
        match self {
            OrientationPreset::O1Vertical => "o1-vertical",
            OrientationPreset::O2Lateral => "o2-lateral",
            OrientationPreset::O3Normal => "o3-normal",
            OrientationPreset::Custom(_) => "custom",
        }
    }
}

/// Galvanic transmitter: two plates driven differentially at +/- V/2,
/// offset by half the plate gap along the dipole axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TxSpec {
    pub center_m: [f64; 3],
    pub orientation: OrientationPreset,
    pub plate_width_m: f64,
    pub plate_height_m: f64,
    pub plate_gap_m: f64,
    /// Differential excitation amplitude; plates sit at +/- V/2.
    pub excitation_v: f64,
}

impl Default for TxSpec {
    fn default() -> Self {
        TxSpec {
            center_m: [0.0, 0.12, 0.8],
            orientation: OrientationPreset::O1Vertical,
            plate_width_m: 0.01,
            plate_height_m: 0.01,
            plate_gap_m: 0.02,
            excitation_v: 1.0,
        }
    }
}

impl TxSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let positive = [
            ("plate_width_m", self.plate_width_m),
            ("plate_height_m", self.plate_height_m),
            ("plate_gap_m", self.plate_gap_m),
        ];
        for (field, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(PhantomError::InvalidSpec {
                    field: field.into(),
                    reason: format!("must be positive and finite, got {v}"),
                });
            }
        }
        if !self.excitation_v.is_finite() || self.excitation_v < 0.0 {
            return Err(PhantomError::InvalidSpec {
                field: "excitation_v".into(),
                reason: "must be a finite non-negative voltage".into(),
            });
        }
        for (field, v) in [
            ("center_m.x", self.center_m[0]),
            ("center_m.y", self.center_m[1]),
            ("center_m.z", self.center_m[2]),
        ] {
            if !v.is_finite() {
                return Err(PhantomError::InvalidSpec {
                    field: field.into(),
                    reason: "must be finite".into(),
                });
            }
        }
        self.orientation.axis()?;
        Ok(())
    }
}

/// Per-voxel label. Exhaustive and exclusive: every voxel carries exactly
/// one of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Label {
    Air = 0,
    Skin = 1,
    Muscle = 2,
    GroundPlane = 3,
    ElectrodePos = 4,
    ElectrodeNeg = 5,
    RxContact = 6,
}

pub const LABEL_COUNT: usize = 7;

impl Label {
    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::Air),
            1 => Some(Label::Skin),
            2 => Some(Label::Muscle),
            3 => Some(Label::GroundPlane),
            4 => Some(Label::ElectrodePos),
            5 => Some(Label::ElectrodeNeg),
            6 => Some(Label::RxContact),
            _ => None,
        }
    }

    /// Dirichlet labels carry a fixed potential; material labels carry an
    /// unknown.
    pub fn is_dirichlet(self) -> bool {
        matches!(
            self,
            Label::GroundPlane | Label::ElectrodePos | Label::ElectrodeNeg
        )
    }

    /// Tissue name used for admittivity lookup. Electrodes report the
    /// tissue they displaced via the grid's placement record; the ground
    /// plane sits in air. `RxContact` is an observation marker on skin.
    pub fn material_tissue(self) -> Option<&'static str> {
        match self {
            Label::Air => Some("air"),
            Label::Skin | Label::RxContact => Some("skin"),
            Label::Muscle => Some("muscle"),
            _ => None,
        }
    }

    pub fn is_body(self) -> bool {
        matches!(
            self,
            Label::Skin | Label::Muscle | Label::RxContact | Label::ElectrodePos | Label::ElectrodeNeg
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GridWarning {
    /// Skin shell thinner than one voxel: skin merged into muscle.
    DegenerateSkin {
        skin_thickness_m: f64,
        resolution_m: f64,
    },
}

impl std::fmt::Display for GridWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GridWarning::DegenerateSkin {
                skin_thickness_m,
                resolution_m,
            } => write!(
                f,
                "skin shell ({skin_thickness_m} m) thinner than one voxel ({resolution_m} m); skin merged into muscle"
            ),
        }
    }
}

/// Record of an applied transmitter placement, kept so a placement can be
/// restored/re-applied and so the solver can recover the displaced tissue
/// under each electrode voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct TxPlacement {
    pub spec: TxSpec,
    pub pos_voxels: Vec<u32>,
    pub neg_voxels: Vec<u32>,
    pub overwritten: Vec<(u32, Label)>,
}

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {field}: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error("voxel grid too large: {voxels} voxels exceeds cap {cap}")]
    GridTooLarge { voxels: usize, cap: usize },
    #[error("voxel grid too coarse: axis {axis} has {dims} cells, need at least 8")]
    GridTooCoarse { axis: char, dims: usize },
    #[error("electrode outside body at ({0}, {1}, {2}): voxel is {3:?}", position[0], position[1], position[2], found)]
    ElectrodeOutsideBody { position: [f64; 3], found: Label },
    #[error("electrode plates overlap: gap smaller than the voxel resolution")]
    ElectrodesOverlap,
    #[error("grid file format error: {0}")]
    BadGridFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Constructive-geometry scene produced by [`build_phantom`].
#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    spec: PhantomSpec,
}

/// Material classification of a point (before ground plane and electrodes
/// are applied at the grid level).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaterialLabel {
    Air,
    Skin,
    Muscle,
}

impl Phantom {
    pub fn spec(&self) -> &PhantomSpec {
        &self.spec
    }

    /// Is `p` inside the body union, with each cylinder shrunk inward by
    /// `shrink` (used to carve the skin shell)?
    fn in_union(&self, p: [f64; 3], shrink: f64) -> bool {
        let s = &self.spec;
        let base = s.torso_base_z_m;
        // torso
        let rt = s.torso_radius_m - shrink;
        if rt > 0.0
            && p[0] * p[0] + p[1] * p[1] <= rt * rt
            && p[2] >= base + shrink
            && p[2] <= base + s.torso_height_m - shrink
        {
            return true;
        }
        // arm
        let ra = s.arm_radius_m - shrink;
        let zc = base + s.arm_crossing_height_m;
        let dz = p[2] - zc;
        if ra > 0.0
            && p[1] * p[1] + dz * dz <= ra * ra
            && p[0].abs() <= s.arm_length_m / 2.0 - shrink
        {
            return true;
        }
        false
    }

    /// Classify a point with the given effective skin thickness (zero when
    /// the shell is thinner than a voxel).
    fn classify_with_skin(&self, p: [f64; 3], skin: f64) -> MaterialLabel {
        if !self.in_union(p, 0.0) {
            return MaterialLabel::Air;
        }
        if skin > 0.0 && !self.in_union(p, skin) {
            return MaterialLabel::Skin;
        }
        MaterialLabel::Muscle
    }

    /// Classify a point against the exact geometry.
    pub fn classify(&self, p: [f64; 3]) -> MaterialLabel {
        self.classify_with_skin(p, self.spec.skin_thickness_m)
    }

    /// Largest body dimension, the length scale for the quasistatic check.
    pub fn largest_extent_m(&self) -> f64 {
        self.spec.torso_height_m.max(self.spec.arm_length_m)
    }

    /// y coordinate of the front torso surface (outward normal +y).
    pub fn front_surface_y_m(&self) -> f64 {
        self.spec.torso_radius_m
    }
}

/// Validate a spec and wrap it as a constructive scene.
pub fn build_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    let invalid = |field: &str, reason: String| PhantomError::InvalidSpec {
        field: field.into(),
        reason,
    };
    let positive = [
        ("torso_radius_m", spec.torso_radius_m),
        ("torso_height_m", spec.torso_height_m),
        ("arm_radius_m", spec.arm_radius_m),
        ("arm_length_m", spec.arm_length_m),
        ("skin_thickness_m", spec.skin_thickness_m),
        ("air_margin_m", spec.air_margin_m),
    ];
    for (field, v) in positive {
        if !v.is_finite() || v <= 0.0 {
            return Err(invalid(field, format!("must be positive and finite, got {v}")));
        }
    }
    for (field, v) in [
        ("torso_base_z_m", spec.torso_base_z_m),
        ("ground_plane_z_m", spec.ground_plane_z_m),
        ("arm_crossing_height_m", spec.arm_crossing_height_m),
    ] {
        if !v.is_finite() {
            return Err(invalid(field, "must be finite".into()));
        }
    }
    if spec.skin_thickness_m >= spec.torso_radius_m {
        return Err(invalid(
            "skin_thickness_m",
            format!(
                "skin ({}) must be thinner than the torso radius ({})",
                spec.skin_thickness_m, spec.torso_radius_m
            ),
        ));
    }
    if spec.arm_crossing_height_m < 0.0 || spec.arm_crossing_height_m > spec.torso_height_m {
        return Err(invalid(
            "arm_crossing_height_m",
            "must lie within the torso height".into(),
        ));
    }
    if spec.air_margin_m < 2.0 * spec.torso_radius_m {
        return Err(invalid(
            "air_margin_m",
            format!(
                "must be at least 2 x torso radius ({})",
                2.0 * spec.torso_radius_m
            ),
        ));
    }
    if spec.ground_plane_z_m > spec.torso_base_z_m {
        return Err(invalid(
            "ground_plane_z_m",
            "ground plane must not be above the torso base".into(),
        ));
    }
    Ok(Phantom { spec: spec.clone() })
}

/// Uniform cell-centered voxel grid with per-voxel labels.
///
/// The x and y center coordinates are built symmetric about 0 so that a
/// mirror-symmetric scene rasterizes to an exactly mirror-symmetric label
/// field.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub resolution_m: f64,
    pub dims: [usize; 3],
    xs: Vec<f64>,
    ys: Vec<f64>,
    zs: Vec<f64>,
    origin_kind: OriginKind,
    labels: Vec<Label>,
    /// What the ground slab displaced, per voxel of the bottom layer; set
    /// by [`voxelize`], absent for hand-built grids.
    ground_displaced: Option<Vec<Label>>,
    pub warnings: Vec<GridWarning>,
    tx: Option<TxPlacement>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum OriginKind {
    /// x/y centered on 0, z starting at `z0`.
    CenteredXy { z0: f64 },
    /// Arbitrary lower corner (grids reloaded from files).
    Explicit([f64; 3]),
}

impl VoxelGrid {
    fn build_axes(dims: [usize; 3], res: f64, kind: OriginKind) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        match kind {
            OriginKind::CenteredXy { z0 } => {
                let centered = |n: usize| -> Vec<f64> {
                    (0..n)
                        .map(|i| ((i as f64 + 0.5) - n as f64 / 2.0) * res)
                        .collect()
                };
                let zs = (0..dims[2]).map(|k| z0 + (k as f64 + 0.5) * res).collect();
                (centered(dims[0]), centered(dims[1]), zs)
            }
            OriginKind::Explicit(o) => {
                let axis = |n: usize, lo: f64| -> Vec<f64> {
                    (0..n).map(|i| lo + (i as f64 + 0.5) * res).collect()
                };
                (
                    axis(dims[0], o[0]),
                    axis(dims[1], o[1]),
                    axis(dims[2], o[2]),
                )
            }
        }
    }

    fn new(dims: [usize; 3], res: f64, kind: OriginKind, labels: Vec<Label>) -> VoxelGrid {
        debug_assert_eq!(labels.len(), dims[0] * dims[1] * dims[2]);
        let (xs, ys, zs) = Self::build_axes(dims, res, kind);
        VoxelGrid {
            resolution_m: res,
            dims,
            xs,
            ys,
            zs,
            origin_kind: kind,
            labels,
            ground_displaced: None,
            warnings: Vec::new(),
            tx: None,
        }
    }

    /// Build a grid directly from a label vector (x/y axes centered about
    /// 0, z starting at `z0_m`). Intended for hand-built scenes and tests;
    /// does not enforce the phantom-level invariants.
    ///
    /// Panics if `labels.len() != nx*ny*nz`.
    pub fn from_labels(
        dims: [usize; 3],
        resolution_m: f64,
        z0_m: f64,
        labels: Vec<Label>,
    ) -> VoxelGrid {
        assert_eq!(
            labels.len(),
            dims[0] * dims[1] * dims[2],
            "label vector length must match dims"
        );
        VoxelGrid::new(dims, resolution_m, OriginKind::CenteredXy { z0: z0_m }, labels)
    }

    /// Overwrite one voxel label. For hand-built scenes and tests.
    pub fn set_label(&mut self, i: usize, j: usize, k: usize, label: Label) {
        let idx = self.index(i, j, k);
        self.labels[idx] = label;
    }

    pub fn num_voxels(&self) -> usize {
        self.labels.len()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords_of(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn label(&self, i: usize, j: usize, k: usize) -> Label {
        self.labels[self.index(i, j, k)]
    }

    #[inline]
    pub fn label_at(&self, idx: usize) -> Label {
        self.labels[idx]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Center coordinates of voxel (i, j, k).
    #[inline]
    pub fn center(&self, i: usize, j: usize, k: usize) -> [f64; 3] {
        [self.xs[i], self.ys[j], self.zs[k]]
    }

    #[inline]
    pub fn center_of(&self, idx: usize) -> [f64; 3] {
        let c = self.coords_of(idx);
        self.center(c[0], c[1], c[2])
    }

    pub fn origin_m(&self) -> [f64; 3] {
        [
            self.xs[0] - 0.5 * self.resolution_m,
            self.ys[0] - 0.5 * self.resolution_m,
            self.zs[0] - 0.5 * self.resolution_m,
        ]
    }

    /// Voxel whose cell contains `p`, if inside the domain.
    pub fn voxel_containing(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let res = self.resolution_m;
        let locate = |axis: &[f64], v: f64| -> Option<usize> {
            let lo = axis[0] - 0.5 * res;
            if v < lo {
                return None;
            }
            let i = ((v - lo) / res).floor() as usize;
            if i >= axis.len() {
                return None;
            }
            Some(i)
        };
        Some([
            locate(&self.xs, p[0])?,
            locate(&self.ys, p[1])?,
            locate(&self.zs, p[2])?,
        ])
    }

    /// Per-label voxel counts, indexed by `Label as usize`.
    pub fn counts(&self) -> [usize; LABEL_COUNT] {
        let mut counts = [0usize; LABEL_COUNT];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    pub fn tx_placement(&self) -> Option<&TxPlacement> {
        self.tx.as_ref()
    }

    /// Body-surface voxels: body material with at least one air face.
    pub fn surface_voxels(&self) -> Vec<u32> {
        let [nx, ny, nz] = self.dims;
        let mut out = Vec::new();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = self.index(i, j, k);
                    let l = self.labels[idx];
                    if !matches!(l, Label::Skin | Label::Muscle | Label::RxContact) {
                        continue;
                    }
                    let mut has_air = false;
                    let mut visit = |ii: usize, jj: usize, kk: usize| {
                        if self.label(ii, jj, kk) == Label::Air {
                            has_air = true;
                        }
                    };
                    if i > 0 {
                        visit(i - 1, j, k);
                    }
                    if i + 1 < nx {
                        visit(i + 1, j, k);
                    }
                    if j > 0 {
                        visit(i, j - 1, k);
                    }
                    if j + 1 < ny {
                        visit(i, j + 1, k);
                    }
                    if k > 0 {
                        visit(i, j, k - 1);
                    }
                    if k + 1 < nz {
                        visit(i, j, k + 1);
                    }
                    if has_air {
                        out.push(idx as u32);
                    }
                }
            }
        }
        out
    }

    /// Tissue name used for the face admittivity of a voxel. Dirichlet
    /// voxels couple through the material they displaced: electrodes via
    /// the placement record, the earth slab via the rasterization record.
    /// Hand-built grids without records fall back to muscle, so Dirichlet
    /// anchors embedded in a uniform block behave as the same material.
    pub fn material_tissue_of(&self, idx: usize) -> &'static str {
        let l = self.labels[idx];
        if let Some(name) = l.material_tissue() {
            return name;
        }
        match l {
            Label::ElectrodePos | Label::ElectrodeNeg => {
                if let Some(tx) = &self.tx {
                    if let Some(&(_, orig)) = tx
                        .overwritten
                        .iter()
                        .find(|(v, _)| *v as usize == idx)
                    {
                        return orig.material_tissue().unwrap_or("muscle");
                    }
                }
                "muscle"
            }
            Label::GroundPlane => self
                .ground_displaced
                .as_ref()
                .and_then(|layer| layer.get(idx))
                .and_then(|l| l.material_tissue())
                .unwrap_or("muscle"),
            _ => unreachable!("material labels handled above"),
        }
    }
}

/// Rasterize the phantom with the default voxel cap.
pub fn voxelize(phantom: &Phantom, resolution_m: f64) -> Result<VoxelGrid, PhantomError> {
    voxelize_capped(phantom, resolution_m, DEFAULT_MAX_VOXELS)
}

/// Rasterize the phantom to labeled voxels by center-point classification.
///
/// Deterministic for fixed inputs; the parallel slab rasterization writes
/// disjoint output ranges and is bit-identical to sequential execution.
pub fn voxelize_capped(
    phantom: &Phantom,
    resolution_m: f64,
    max_voxels: usize,
) -> Result<VoxelGrid, PhantomError> {
    if !resolution_m.is_finite() || resolution_m <= 0.0 {
        return Err(PhantomError::InvalidSpec {
            field: "resolution_m".into(),
            reason: format!("must be positive and finite, got {resolution_m}"),
        });
    }
    let s = phantom.spec();
    let x_ext = s.torso_radius_m.max(s.arm_length_m / 2.0) + s.air_margin_m;
    let y_ext = s.torso_radius_m.max(s.arm_radius_m) + s.air_margin_m;
    let z_top = (s.torso_base_z_m + s.torso_height_m)
        .max(s.torso_base_z_m + s.arm_crossing_height_m + s.arm_radius_m)
        + s.air_margin_m;
    let z0 = s.ground_plane_z_m;

    let nx = ((2.0 * x_ext) / resolution_m).ceil() as usize;
    let ny = ((2.0 * y_ext) / resolution_m).ceil() as usize;
    let nz = ((z_top - z0) / resolution_m).ceil() as usize;
    for (axis, n) in [('x', nx), ('y', ny), ('z', nz)] {
        if n < 8 {
            return Err(PhantomError::GridTooCoarse { axis, dims: n });
        }
    }
    let total = nx
        .checked_mul(ny)
        .and_then(|v| v.checked_mul(nz))
        .ok_or(PhantomError::GridTooLarge {
            voxels: usize::MAX,
            cap: max_voxels,
        })?;
    if total > max_voxels {
        return Err(PhantomError::GridTooLarge {
            voxels: total,
            cap: max_voxels,
        });
    }

    let degenerate_skin = s.skin_thickness_m < resolution_m;
    let skin = if degenerate_skin { 0.0 } else { s.skin_thickness_m };

    let dims = [nx, ny, nz];
    let kind = OriginKind::CenteredXy { z0 };
    let (xs, ys, zs) = VoxelGrid::build_axes(dims, resolution_m, kind);

    let mut labels = vec![Label::Air; total];
    let classify_slab = |k: usize, slab: &mut [Label]| {
        // Bottom voxel layer is the earth ground slab and wins over any
        // body material that reaches it.
        if k == 0 {
            slab.fill(Label::GroundPlane);
            return;
        }
        let z = zs[k];
        for j in 0..ny {
            let y = ys[j];
            for i in 0..nx {
                let m = phantom.classify_with_skin([xs[i], y, z], skin);
                slab[j * nx + i] = match m {
                    MaterialLabel::Air => Label::Air,
                    MaterialLabel::Skin => Label::Skin,
                    MaterialLabel::Muscle => Label::Muscle,
                };
            }
        }
    };

    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        labels
            .par_chunks_mut(nx * ny)
            .enumerate()
            .for_each(|(k, slab)| classify_slab(k, slab));
    }
    #[cfg(not(feature = "parallel"))]
    {
        for (k, slab) in labels.chunks_mut(nx * ny).enumerate() {
            classify_slab(k, slab);
        }
    }

    // material the ground slab displaced, for face-admittivity lookups
    let mut displaced = vec![Label::Air; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let m = phantom.classify_with_skin([xs[i], ys[j], zs[0]], skin);
            displaced[j * nx + i] = match m {
                MaterialLabel::Air => Label::Air,
                MaterialLabel::Skin => Label::Skin,
                MaterialLabel::Muscle => Label::Muscle,
            };
        }
    }

    let mut grid = VoxelGrid::new(dims, resolution_m, kind, labels);
    grid.ground_displaced = Some(displaced);
    if degenerate_skin {
        grid.warnings.push(GridWarning::DegenerateSkin {
            skin_thickness_m: s.skin_thickness_m,
            resolution_m,
        });
    }
    Ok(grid)
}

/// Normalized in-plane basis perpendicular to `axis`.
fn plate_basis(axis: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let pick = if axis[2].abs() < 0.9 {
        [0.0, 0.0, 1.0]
    } else {
        [1.0, 0.0, 0.0]
    };
    let cross = |a: [f64; 3], b: [f64; 3]| {
        [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ]
    };
    let mut u = cross(axis, pick);
    let n = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
    u = [u[0] / n, u[1] / n, u[2] / n];
    let v = cross(axis, u);
    (u, v)
}

/// Relabel the two plate voxel sets as ElectrodePos/ElectrodeNeg.
///
/// Re-applying a placement (same or different spec) first restores the
/// previously overwritten labels, so the operation is idempotent-safe.
pub fn place_transmitter(grid: &VoxelGrid, tx: &TxSpec) -> Result<VoxelGrid, PhantomError> {
    tx.validate()?;
    let mut grid = grid.clone();
    if let Some(prev) = grid.tx.take() {
        for (idx, label) in prev.overwritten {
            grid.labels[idx as usize] = label;
        }
    }

    let axis = tx.orientation.axis()?;
    let (u, v) = plate_basis(axis);
    let res = grid.resolution_m;

    let plate_voxels = |sign: f64| -> Result<Vec<u32>, PhantomError> {
        let c = [
            tx.center_m[0] + sign * 0.5 * tx.plate_gap_m * axis[0],
            tx.center_m[1] + sign * 0.5 * tx.plate_gap_m * axis[1],
            tx.center_m[2] + sign * 0.5 * tx.plate_gap_m * axis[2],
        ];
        let reach = 0.5 * (tx.plate_width_m.max(tx.plate_height_m)) + res;
        let mut found = Vec::new();
        // candidate window around the plate center
        let lo = grid.voxel_containing([
            (c[0] - reach).max(grid.xs[0]),
            (c[1] - reach).max(grid.ys[0]),
            (c[2] - reach).max(grid.zs[0]),
        ]);
        let hi = grid.voxel_containing([
            (c[0] + reach).min(*grid.xs.last().unwrap()),
            (c[1] + reach).min(*grid.ys.last().unwrap()),
            (c[2] + reach).min(*grid.zs.last().unwrap()),
        ]);
        if let (Some(lo), Some(hi)) = (lo, hi) {
            for k in lo[2]..=hi[2] {
                for j in lo[1]..=hi[1] {
                    for i in lo[0]..=hi[0] {
                        let p = grid.center(i, j, k);
                        let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                        let da = d[0] * axis[0] + d[1] * axis[1] + d[2] * axis[2];
                        let du = d[0] * u[0] + d[1] * u[1] + d[2] * u[2];
                        let dv = d[0] * v[0] + d[1] * v[1] + d[2] * v[2];
                        if da.abs() <= 0.5 * res
                            && du.abs() <= 0.5 * tx.plate_width_m
                            && dv.abs() <= 0.5 * tx.plate_height_m
                        {
                            found.push(grid.index(i, j, k) as u32);
                        }
                    }
                }
            }
        }
        if found.is_empty() {
            // plates smaller than a voxel collapse to the containing voxel
            let vox = grid
                .voxel_containing(c)
                .ok_or(PhantomError::ElectrodeOutsideBody {
                    position: c,
                    found: Label::Air,
                })?;
            found.push(grid.index(vox[0], vox[1], vox[2]) as u32);
        }
        for &idx in &found {
            let l = grid.labels[idx as usize];
            if !matches!(l, Label::Muscle | Label::Skin) {
                return Err(PhantomError::ElectrodeOutsideBody {
                    position: grid.center_of(idx as usize),
                    found: l,
                });
            }
        }
        Ok(found)
    };

    let pos = plate_voxels(1.0)?;
    let neg = plate_voxels(-1.0)?;
    if pos.iter().any(|p| neg.contains(p)) {
        return Err(PhantomError::ElectrodesOverlap);
    }

    let mut overwritten = Vec::with_capacity(pos.len() + neg.len());
    for &idx in &pos {
        overwritten.push((idx, grid.labels[idx as usize]));
        grid.labels[idx as usize] = Label::ElectrodePos;
    }
    for &idx in &neg {
        overwritten.push((idx, grid.labels[idx as usize]));
        grid.labels[idx as usize] = Label::ElectrodeNeg;
    }
    grid.tx = Some(TxPlacement {
        spec: tx.clone(),
        pos_voxels: pos,
        neg_voxels: neg,
        overwritten,
    });
    Ok(grid)
}

/// Write the grid as a small text header plus flat label bytes.
pub fn write_grid<W: Write>(grid: &VoxelGrid, mut w: W) -> Result<(), PhantomError> {
    writeln!(w, "bodychan grid v1")?;
    writeln!(w, "dims {} {} {}", grid.dims[0], grid.dims[1], grid.dims[2])?;
    writeln!(w, "resolution_m {}", grid.resolution_m)?;
    match grid.origin_kind {
        OriginKind::CenteredXy { z0 } => writeln!(w, "origin centered-xy {z0}")?,
        OriginKind::Explicit(o) => writeln!(w, "origin explicit {} {} {}", o[0], o[1], o[2])?,
    }
    writeln!(w)?;
    let bytes: Vec<u8> = grid.labels.iter().map(|&l| l as u8).collect();
    w.write_all(&bytes)?;
    Ok(())
}

/// Read a grid written by [`write_grid`]. Warnings, placement records and
/// the ground-displacement record are not part of the format (debugging
/// exchange only).
pub fn read_grid<R: Read>(r: R) -> Result<VoxelGrid, PhantomError> {
    let mut reader = std::io::BufReader::new(r);
    let mut header = Vec::new();
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.read_line(&mut line)?;
        if n == 0 {
            return Err(PhantomError::BadGridFile("unexpected end of header".into()));
        }
        let t = line.trim_end();
        if t.is_empty() {
            break;
        }
        header.push(t.to_string());
    }
    if header.first().map(String::as_str) != Some("bodychan grid v1") {
        return Err(PhantomError::BadGridFile("missing magic line".into()));
    }
    let mut dims: Option<[usize; 3]> = None;
    let mut res: Option<f64> = None;
    let mut kind: Option<OriginKind> = None;
    for h in &header[1..] {
        let mut parts = h.split_whitespace();
        match parts.next() {
            Some("dims") => {
                let v: Vec<usize> = parts.map(|p| p.parse().unwrap_or(0)).collect();
                if v.len() != 3 || v.contains(&0) {
                    return Err(PhantomError::BadGridFile(format!("bad dims line '{h}'")));
                }
                dims = Some([v[0], v[1], v[2]]);
            }
            Some("resolution_m") => {
                res = parts.next().and_then(|p| p.parse().ok());
            }
            Some("origin") => match parts.next() {
                Some("centered-xy") => {
                    let z0 = parts
                        .next()
                        .and_then(|p| p.parse().ok())
                        .ok_or_else(|| PhantomError::BadGridFile("bad origin line".into()))?;
                    kind = Some(OriginKind::CenteredXy { z0 });
                }
                Some("explicit") => {
                    let v: Vec<f64> = parts.filter_map(|p| p.parse().ok()).collect();
                    if v.len() != 3 {
                        return Err(PhantomError::BadGridFile("bad origin line".into()));
                    }
                    kind = Some(OriginKind::Explicit([v[0], v[1], v[2]]));
                }
                _ => return Err(PhantomError::BadGridFile("bad origin line".into())),
            },
            _ => return Err(PhantomError::BadGridFile(format!("unknown header line '{h}'"))),
        }
    }
    let dims = dims.ok_or_else(|| PhantomError::BadGridFile("missing dims".into()))?;
    let res = res.ok_or_else(|| PhantomError::BadGridFile("missing resolution".into()))?;
    let kind = kind.ok_or_else(|| PhantomError::BadGridFile("missing origin".into()))?;
    let total = dims[0] * dims[1] * dims[2];
    let mut bytes = vec![0u8; total];
    reader.read_exact(&mut bytes)?;
    let labels: Option<Vec<Label>> = bytes.into_iter().map(Label::from_u8).collect();
    let labels = labels.ok_or_else(|| PhantomError::BadGridFile("invalid label byte".into()))?;
    Ok(VoxelGrid::new(dims, res, kind, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_phantom() -> Phantom {
        build_phantom(&PhantomSpec::default()).unwrap()
    }

    #[test]
    fn classify_examples() {
        let p = default_phantom();
        // torso axis at mid-height
        assert_eq!(p.classify([0.0, 0.0, 0.2 + 0.9]), MaterialLabel::Muscle);
        // just inside the shell
        let r = 0.15 - 0.001;
        assert_eq!(p.classify([r, 0.0, 0.2 + 0.9]), MaterialLabel::Skin);
        // 1 m lateral of the body at z = 1 m is air (beyond arm tips too)
        assert_eq!(p.classify([1.0, 0.0, 1.0]), MaterialLabel::Air);
        // arm interior
        assert_eq!(p.classify([0.5, 0.0, 0.2 + 1.4]), MaterialLabel::Muscle);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = PhantomSpec::default();
        s.torso_radius_m = 0.0;
        assert!(matches!(
            build_phantom(&s),
            Err(PhantomError::InvalidSpec { field, .. }) if field == "torso_radius_m"
        ));

        let mut s = PhantomSpec::default();
        s.skin_thickness_m = 0.2;
        assert!(build_phantom(&s).is_err());

        let mut s = PhantomSpec::default();
        s.arm_crossing_height_m = 2.5;
        assert!(build_phantom(&s).is_err());

        let mut s = PhantomSpec::default();
        s.air_margin_m = 0.1;
        assert!(build_phantom(&s).is_err());
    }

    #[test]
    fn label_partition_sums_to_total() {
        let grid = voxelize(&default_phantom(), 0.06).unwrap();
        let counts = grid.counts();
        assert_eq!(counts.iter().sum::<usize>(), grid.num_voxels());
        assert!(counts[Label::Muscle as usize] > 0);
        assert!(counts[Label::GroundPlane as usize] == grid.dims[0] * grid.dims[1]);
    }

    #[test]
    fn degenerate_skin_merges_into_muscle() {
        let grid = voxelize(&default_phantom(), 0.075).unwrap();
        assert!(grid
            .warnings
            .iter()
            .any(|w| matches!(w, GridWarning::DegenerateSkin { .. })));
        assert_eq!(grid.counts()[Label::Skin as usize], 0);
    }

    #[test]
    fn halving_resolution_scales_muscle_count_by_8() {
        let phantom = default_phantom();
        let coarse = voxelize(&phantom, 0.08).unwrap();
        let fine = voxelize(&phantom, 0.04).unwrap();
        let c = coarse.counts()[Label::Muscle as usize] as f64;
        let f = fine.counts()[Label::Muscle as usize] as f64;
        let ratio = f / c;
        assert!(
            (6.4..=9.6).contains(&ratio),
            "expected ~8x muscle voxel growth, got {ratio:.2}"
        );
    }

    #[test]
    fn grid_too_large_guard() {
        let err = voxelize_capped(&default_phantom(), 0.01, 1000).unwrap_err();
        assert!(matches!(err, PhantomError::GridTooLarge { .. }));
    }

    #[test]
    fn mirror_symmetric_labels_about_x0() {
        let grid = voxelize(&default_phantom(), 0.05).unwrap();
        let [nx, ny, nz] = grid.dims;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    assert_eq!(grid.label(i, j, k), grid.label(nx - 1 - i, j, k));
                }
            }
        }
        // axis coordinates are exact negations
        for i in 0..nx {
            assert_eq!(grid.center(i, 0, 0)[0], -grid.center(nx - 1 - i, 0, 0)[0]);
        }
    }

    #[test]
    fn place_o1_separates_plates_along_z() {
        let grid = voxelize(&default_phantom(), 0.02).unwrap();
        let tx = TxSpec {
            center_m: [0.0, 0.13, 0.80],
            orientation: OrientationPreset::O1Vertical,
            ..TxSpec::default()
        };
        let placed = place_transmitter(&grid, &tx).unwrap();
        let p = placed.tx_placement().unwrap();
        assert!(!p.pos_voxels.is_empty() && !p.neg_voxels.is_empty());
        let min_pos_z = p
            .pos_voxels
            .iter()
            .map(|&v| placed.center_of(v as usize)[2])
            .fold(f64::INFINITY, f64::min);
        let max_neg_z = p
            .neg_voxels
            .iter()
            .map(|&v| placed.center_of(v as usize)[2])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_pos_z > max_neg_z, "plates must separate along z");
    }

    #[test]
    fn place_o3_separates_plates_along_outward_normal() {
        let grid = voxelize(&default_phantom(), 0.02).unwrap();
        let tx = TxSpec {
            center_m: [0.0, 0.12, 0.80],
            orientation: OrientationPreset::O3Normal,
            ..TxSpec::default()
        };
        let placed = place_transmitter(&grid, &tx).unwrap();
        let p = placed.tx_placement().unwrap();
        let min_pos_y = p
            .pos_voxels
            .iter()
            .map(|&v| placed.center_of(v as usize)[1])
            .fold(f64::INFINITY, f64::min);
        let max_neg_y = p
            .neg_voxels
            .iter()
            .map(|&v| placed.center_of(v as usize)[1])
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_pos_y > max_neg_y, "plates must separate along +y");
    }

    #[test]
    fn sub_resolution_gap_overlaps() {
        let grid = voxelize(&default_phantom(), 0.02).unwrap();
        // center mid-voxel so a half-resolution gap lands both plates in
        // the same cell
        let tx = TxSpec {
            center_m: [0.0, 0.12, 0.79],
            plate_gap_m: 0.01,
            ..TxSpec::default()
        };
        assert!(matches!(
            place_transmitter(&grid, &tx),
            Err(PhantomError::ElectrodesOverlap)
        ));
    }

    #[test]
    fn electrode_in_air_rejected() {
        let grid = voxelize(&default_phantom(), 0.02).unwrap();
        let tx = TxSpec {
            center_m: [0.0, 0.5, 0.80],
            ..TxSpec::default()
        };
        assert!(matches!(
            place_transmitter(&grid, &tx),
            Err(PhantomError::ElectrodeOutsideBody { .. })
        ));
    }

    #[test]
    fn placement_is_idempotent_safe() {
        let grid = voxelize(&default_phantom(), 0.02).unwrap();
        let tx = TxSpec::default();
        let once = place_transmitter(&grid, &tx).unwrap();
        let twice = place_transmitter(&once, &tx).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn grid_file_round_trips() {
        let grid = voxelize(&default_phantom(), 0.06).unwrap();
        let mut buf = Vec::new();
        write_grid(&grid, &mut buf).unwrap();
        let back = read_grid(buf.as_slice()).unwrap();
        assert_eq!(grid.dims, back.dims);
        assert_eq!(grid.resolution_m, back.resolution_m);
        assert_eq!(grid.labels(), back.labels());
        assert_eq!(grid.center(3, 4, 5), back.center(3, 4, 5));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn point_and_voxel_classification_agree_away_from_interfaces(
            px in -0.4f64..0.4,
            py in -0.4f64..0.4,
            pz in 0.05f64..2.2,
        ) {
            let phantom = default_phantom();
            let res = 0.04;
            let grid = voxelize(&phantom, res).unwrap();
            let p = [px, py, pz];
            // Probe a surrounding cube; if every probe agrees, the point is
            // comfortably more than one voxel away from any interface.
            let m = phantom.classify_with_skin(p, 0.0);
            let mut interior = true;
            for dx in [-1.5, 0.0, 1.5] {
                for dy in [-1.5, 0.0, 1.5] {
                    for dz in [-1.5, 0.0, 1.5] {
                        let q = [p[0] + dx * res, p[1] + dy * res, p[2] + dz * res];
                        if phantom.classify_with_skin(q, 0.0) != m {
                            interior = false;
                        }
                    }
                }
            }
            prop_assume!(interior);
            if let Some([i, j, k]) = grid.voxel_containing(p) {
                prop_assume!(k > 0); // ground slab overrides material
                let expected = match m {
                    MaterialLabel::Air => Label::Air,
                    MaterialLabel::Skin => Label::Skin,
                    MaterialLabel::Muscle => Label::Muscle,
                };
                prop_assert_eq!(grid.label(i, j, k), expected);
            }
        }

        #[test]
        fn label_partition_holds_for_random_specs(
            torso_r in 0.08f64..0.2,
            arm_r in 0.03f64..0.07,
            height in 0.6f64..1.2,
        ) {
            let spec = PhantomSpec {
                torso_radius_m: torso_r,
                torso_height_m: height,
                torso_base_z_m: 0.1,
                arm_radius_m: arm_r,
                arm_length_m: height,
                arm_crossing_height_m: height * 0.75,
                skin_thickness_m: 0.002,
                air_margin_m: 2.0 * torso_r + 0.05,
                ground_plane_z_m: 0.0,
            };
            let phantom = build_phantom(&spec).unwrap();
            let grid = voxelize(&phantom, 0.05).unwrap();
            let counts = grid.counts();
            prop_assert_eq!(counts.iter().sum::<usize>(), grid.num_voxels());
            // mirror symmetry about x = 0
            let [nx, ny, nz] = grid.dims;
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx / 2 {
                        prop_assert_eq!(grid.label(i, j, k), grid.label(nx - 1 - i, j, k));
                    }
                }
            }
        }
    }
}
