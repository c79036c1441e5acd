//! Tissue dielectric properties and the electro-quasistatic regime check.
//!
//! Tissue values are data, not code: the shipped defaults in
//! `data/tissues.csv` were generated from the 4-term Cole-Cole dispersion
//! model (Gabriel 1996 parametrization) and are verified against an
//! independent oracle in the test suite. The simulator itself only ever
//! consumes the tabulated `(sigma, eps_r)` pairs.

use std::collections::BTreeMap;

use num_complex::Complex64;
use thiserror::Error;

/// Vacuum permittivity (F/m), CODATA 2018.
pub const EPS0: f64 = 8.854_187_812_8e-12;
/// Speed of light in vacuum (m/s), exact.
pub const C0: f64 = 299_792_458.0;
/// Electrically-small criterion: free-space wavelength must be at least
/// this many times the largest body extent.
pub const QS_WAVELENGTH_FACTOR: f64 = 10.0;

/// One row of the tissue table: conductivity and relative permittivity
/// valid near a given frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueProperties {
    pub tissue: String,
    pub conductivity_s_per_m: f64,
    pub relative_permittivity: f64,
    pub valid_frequency_hz: f64,
}

/// Complex admittivity `sigma + j*omega*eps0*eps_r` (S/m), the material
/// coefficient of the EQS continuity equation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexAdmittivity(pub Complex64);

impl ComplexAdmittivity {
    /// Real part: conductivity sigma (S/m).
    pub fn sigma(&self) -> f64 {
        self.0.re
    }

    /// Imaginary part: omega*eps0*eps_r (S/m).
    pub fn omega_eps(&self) -> f64 {
        self.0.im
    }

    pub fn as_complex(&self) -> Complex64 {
        self.0
    }
}

/// Result of the electro-quasistatic validity check. Always returned,
/// never an error: callers decide what a failed check means for them.
#[derive(Debug, Clone, PartialEq)]
pub struct QsReport {
    pub frequency_hz: f64,
    pub free_space_wavelength_m: f64,
    pub largest_body_extent_m: f64,
    pub quasistatic_ok: bool,
    pub notes: String,
}

#[derive(Debug, Error)]
pub enum TissueError {
    #[error("tissue table parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("negative conductivity for '{tissue}' at line {line}")]
    NegativeConductivity { line: usize, tissue: String },
    #[error("relative permittivity < 1 for '{tissue}' at line {line}")]
    InvalidPermittivity { line: usize, tissue: String },
    #[error("non-positive frequency at line {line}")]
    InvalidFrequency { line: usize },
    #[error("tissue '{tissue}' not found in table")]
    MissingTissue { tissue: String },
}

/// Tissue table keyed by (tissue, nearest frequency).
///
/// Immutable after load; safe for shared concurrent reads.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueTable {
    // rows per tissue, sorted by valid frequency
    entries: BTreeMap<String, Vec<TissueProperties>>,
}

/// Shipped default table (see `data/tissues.csv` for provenance).
pub const DEFAULT_TABLE_CSV: &str = include_str!("../data/tissues.csv");

impl TissueTable {
    /// The shipped default table. Parsing it is infallible by construction;
    /// a unit test guards the file.
    pub fn builtin() -> TissueTable {
        load_tissue_table(DEFAULT_TABLE_CSV).expect("shipped tissue table is valid")
    }

    /// Look up the row for `tissue` whose valid frequency is nearest to
    /// `frequency_hz` (ties resolve to the lower frequency).
    pub fn get(&self, tissue: &str, frequency_hz: f64) -> Result<&TissueProperties, TissueError> {
        let rows = self
            .entries
            .get(tissue)
            .ok_or_else(|| TissueError::MissingTissue {
                tissue: tissue.to_string(),
            })?;
        let row = rows
            .iter()
            .min_by(|a, b| {
                let da = (a.valid_frequency_hz - frequency_hz).abs();
                let db = (b.valid_frequency_hz - frequency_hz).abs();
                da.partial_cmp(&db).expect("finite frequencies")
            })
            .expect("non-empty tissue rows");
        Ok(row)
    }

    /// Complex admittivity of `tissue` at `frequency_hz`, using the
    /// nearest-frequency table row.
    pub fn admittivity_at(
        &self,
        tissue: &str,
        frequency_hz: f64,
    ) -> Result<ComplexAdmittivity, TissueError> {
        Ok(admittivity(self.get(tissue, frequency_hz)?, frequency_hz))
    }

    pub fn tissues(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Serialize back to the table text format. `load(to_csv(t)) == t`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tissue,frequency_hz,sigma_s_per_m,eps_r\n");
        for rows in self.entries.values() {
            for r in rows {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    r.tissue, r.valid_frequency_hz, r.conductivity_s_per_m, r.relative_permittivity
                ));
            }
        }
        out
    }
}

/// Parse a tissue table from the text format
/// `tissue,frequency_hz,sigma_s_per_m,eps_r` (header optional, `#`
/// comments allowed). An `air` entry (sigma = 0, eps_r = 1) is inserted
/// automatically when the source does not provide one.
pub fn load_tissue_table(source: &str) -> Result<TissueTable, TissueError> {
    let mut entries: BTreeMap<String, Vec<TissueProperties>> = BTreeMap::new();
    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.eq_ignore_ascii_case("tissue,frequency_hz,sigma_s_per_m,eps_r") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(TissueError::ParseError {
                line: line_no,
                msg: format!("expected 4 comma-separated fields, got {}", fields.len()),
            });
        }
        let tissue = fields[0].to_ascii_lowercase();
        if tissue.is_empty() {
            return Err(TissueError::ParseError {
                line: line_no,
                msg: "empty tissue name".into(),
            });
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64, TissueError> {
            s.parse::<f64>().map_err(|e| TissueError::ParseError {
                line: line_no,
                msg: format!("bad {what} '{s}': {e}"),
            })
        };
        let frequency = parse_f64(fields[1], "frequency_hz")?;
        let sigma = parse_f64(fields[2], "sigma_s_per_m")?;
        let eps_r = parse_f64(fields[3], "eps_r")?;
        if !frequency.is_finite() || frequency <= 0.0 {
            return Err(TissueError::InvalidFrequency { line: line_no });
        }
        if !sigma.is_finite() || sigma < 0.0 {
            return Err(TissueError::NegativeConductivity {
                line: line_no,
                tissue,
            });
        }
        if !eps_r.is_finite() || eps_r < 1.0 {
            return Err(TissueError::InvalidPermittivity {
                line: line_no,
                tissue,
            });
        }
        entries.entry(tissue.clone()).or_default().push(TissueProperties {
            tissue,
            conductivity_s_per_m: sigma,
            relative_permittivity: eps_r,
            valid_frequency_hz: frequency,
        });
    }
    if !entries.contains_key("air") {
        entries.insert(
            "air".to_string(),
            vec![TissueProperties {
                tissue: "air".to_string(),
                conductivity_s_per_m: 0.0,
                relative_permittivity: 1.0,
                valid_frequency_hz: 1.0,
            }],
        );
    }
    for rows in entries.values_mut() {
        rows.sort_by(|a, b| {
            a.valid_frequency_hz
                .partial_cmp(&b.valid_frequency_hz)
                .expect("finite frequencies")
        });
    }
    Ok(TissueTable { entries })
}

/// Constitutive relation of the EQS operator: `sigma + j*2*pi*f*eps0*eps_r`.
pub fn admittivity(props: &TissueProperties, frequency_hz: f64) -> ComplexAdmittivity {
    let omega = 2.0 * std::f64::consts::PI * frequency_hz;
    ComplexAdmittivity(Complex64::new(
        props.conductivity_s_per_m,
        omega * EPS0 * props.relative_permittivity,
    ))
}

/// Check the electrically-small criterion: free-space wavelength at least
/// [`QS_WAVELENGTH_FACTOR`] times the largest body extent.
pub fn validate_quasistatic(frequency_hz: f64, body_extent_m: f64) -> QsReport {
    let wavelength = C0 / frequency_hz;
    let ok = wavelength >= QS_WAVELENGTH_FACTOR * body_extent_m;
    let notes = if ok {
        format!(
            "wavelength {:.3} m >= {} x body extent {:.3} m",
            wavelength, QS_WAVELENGTH_FACTOR, body_extent_m
        )
    } else {
        format!(
            "wavelength {:.3} m < {} x body extent {:.3} m; fields are not quasistatic",
            wavelength, QS_WAVELENGTH_FACTOR, body_extent_m
        )
    };
    QsReport {
        frequency_hz,
        free_space_wavelength_m: wavelength,
        largest_body_extent_m: body_extent_m,
        quasistatic_ok: ok,
        notes,
    }
}
