//! Data model for hyperspectral cubes, structured libraries and abundances.
//!
//! Matrices are stored column-per-pixel (`bands x pixels`), so a pixel is a
//! contiguous column slice. Pixel index `n` maps to `(n / width, n % width)`.

use std::fmt;
use std::ops::Range;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default feasibility tolerance for abundance constraint checks.
pub const FEASIBILITY_TOL: f64 = 1e-6;

/// An `L x N` reflectance matrix with its spatial layout.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    data: DMatrix<f64>,
    height: usize,
    width: usize,
    wavelengths: Option<Vec<f64>>,
}

impl HsiCube {
    pub fn new(data: DMatrix<f64>, height: usize, width: usize) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::param("bands", "cube needs at least one band"));
        }
        if height == 0 || width == 0 {
            return Err(Error::param("height/width", "spatial dimensions must be positive"));
        }
        if data.ncols() != height * width {
            return Err(Error::Dimension {
                context: "cube pixels",
                expected: height * width,
                found: data.ncols(),
            });
        }
        check_finite(data.as_slice(), "cube data")?;
        Ok(HsiCube {
            data,
            height,
            width,
            wavelengths: None,
        })
    }

    pub fn with_wavelengths(mut self, wavelengths: Vec<f64>) -> Result<Self> {
        if wavelengths.len() != self.bands() {
            return Err(Error::Dimension {
                context: "wavelengths",
                expected: self.bands(),
                found: wavelengths.len(),
            });
        }
        self.wavelengths = Some(wavelengths);
        Ok(self)
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }

    pub fn bands(&self) -> usize {
        self.data.nrows()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> usize {
        self.data.ncols()
    }

    pub fn wavelengths(&self) -> Option<&[f64]> {
        self.wavelengths.as_deref()
    }

    pub fn pixel(&self, n: usize) -> &[f64] {
        let l = self.bands();
        &self.data.as_slice()[n * l..(n + 1) * l]
    }

    pub fn flatten(&self, row: usize, col: usize) -> usize {
        flatten(self.width, row, col)
    }

    pub fn unflatten(&self, n: usize) -> (usize, usize) {
        unflatten(self.width, n)
    }
}

#[inline]
pub fn flatten(width: usize, row: usize, col: usize) -> usize {
    row * width + col
}

#[inline]
pub fn unflatten(width: usize, n: usize) -> (usize, usize) {
    (n / width, n % width)
}

/// Contiguous, ordered partition of the coefficient indices `0..Q` into groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupStructure {
    ranges: Vec<Range<usize>>,
}

impl GroupStructure {
    pub fn new(ranges: Vec<Range<usize>>) -> Result<Self> {
        let groups = GroupStructure { ranges };
        let problems = groups.partition_problems();
        if let Some(first) = problems.into_iter().next() {
            return Err(Error::InvalidLibrary(first));
        }
        Ok(groups)
    }

    /// Groups of the given sizes laid out back to back.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let ranges = sizes
            .iter()
            .map(|&m| {
                let r = start..start + m;
                start += m;
                r
            })
            .collect();
        Self::new(ranges)
    }

    /// One group covering all `q` coefficients.
    pub fn single(q: usize) -> Self {
        GroupStructure { ranges: vec![0..q] }
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    pub fn total(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.end)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.ranges.iter().map(|r| r.len()).collect()
    }

    fn partition_problems(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if self.ranges.is_empty() {
            problems.push("no groups".to_string());
            return problems;
        }
        let mut expected_start = 0;
        for (p, r) in self.ranges.iter().enumerate() {
            if r.start >= r.end {
                problems.push(format!("group {p} is empty ({}..{})", r.start, r.end));
            }
            if r.start != expected_start {
                let kind = if r.start < expected_start {
                    "overlaps its predecessor"
                } else {
                    "leaves a gap before it"
                };
                problems.push(format!(
                    "group {p} ({}..{}) {kind}: partition requires start {expected_start}",
                    r.start, r.end
                ));
            }
            expected_start = expected_start.max(r.end);
        }
        problems
    }
}

/// Category of a library invariant violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LibraryIssueKind {
    Partition,
    ColumnCount,
    NonFinite,
    Negative,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LibraryIssue {
    pub kind: LibraryIssueKind,
    pub message: String,
}

/// Result of [`validate_library`]; empty iff the library is valid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub issues: Vec<LibraryIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn has(&self, kind: LibraryIssueKind) -> bool {
        self.issues.iter().any(|i| i.kind == kind)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for issue in &self.issues {
            writeln!(f, "{:?}: {}", issue.kind, issue.message)?;
        }
        Ok(())
    }
}

/// Check a candidate library (signatures + group ranges) against the
/// structured library invariants without constructing it.
pub fn validate_library(signatures: &DMatrix<f64>, ranges: &[Range<usize>]) -> ValidationReport {
    let mut issues = Vec::new();
    let groups = GroupStructure {
        ranges: ranges.to_vec(),
    };
    for message in groups.partition_problems() {
        issues.push(LibraryIssue {
            kind: LibraryIssueKind::Partition,
            message,
        });
    }
    if groups.total() != signatures.ncols() {
        issues.push(LibraryIssue {
            kind: LibraryIssueKind::ColumnCount,
            message: format!(
                "groups cover {} columns but the library has {}",
                groups.total(),
                signatures.ncols()
            ),
        });
    }
    if let Some(i) = signatures.iter().position(|v| !v.is_finite()) {
        issues.push(LibraryIssue {
            kind: LibraryIssueKind::NonFinite,
            message: format!("entry {i} is not finite"),
        });
    }
    if let Some(i) = signatures.iter().position(|&v| v < 0.0) {
        issues.push(LibraryIssue {
            kind: LibraryIssueKind::Negative,
            message: format!("entry {i} is negative ({})", signatures.as_slice()[i]),
        });
    }
    ValidationReport { issues }
}

/// An `L x Q` signature matrix partitioned into `P` material groups.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleLibrary {
    signatures: DMatrix<f64>,
    groups: GroupStructure,
}

impl BundleLibrary {
    pub fn new(signatures: DMatrix<f64>, groups: GroupStructure) -> Result<Self> {
        let report = validate_library(&signatures, groups.ranges());
        if !report.is_valid() {
            return Err(Error::InvalidLibrary(report.to_string().trim_end().to_string()));
        }
        Ok(BundleLibrary { signatures, groups })
    }

    /// Library with one signature per group (a plain endmember matrix).
    pub fn from_endmembers(endmembers: DMatrix<f64>) -> Result<Self> {
        let sizes = vec![1; endmembers.ncols()];
        Self::new(endmembers, GroupStructure::from_sizes(&sizes)?)
    }

    pub fn signatures(&self) -> &DMatrix<f64> {
        &self.signatures
    }

    pub fn groups(&self) -> &GroupStructure {
        &self.groups
    }

    pub fn bands(&self) -> usize {
        self.signatures.nrows()
    }

    pub fn len(&self) -> usize {
        self.signatures.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.signatures.ncols() == 0
    }

    pub fn materials(&self) -> usize {
        self.groups.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AbundanceLevel {
    /// One row per library signature, with the library's group layout.
    Bundle(GroupStructure),
    /// One row per material.
    Global,
}

/// Nonnegative, columnwise sum-to-one coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceMatrix {
    level: AbundanceLevel,
    coefficients: DMatrix<f64>,
    tolerance: f64,
}

impl AbundanceMatrix {
    pub fn new(level: AbundanceLevel, coefficients: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(level, coefficients, FEASIBILITY_TOL)
    }

    pub fn with_tolerance(
        level: AbundanceLevel,
        coefficients: DMatrix<f64>,
        tolerance: f64,
    ) -> Result<Self> {
        if let AbundanceLevel::Bundle(groups) = &level {
            if groups.total() != coefficients.nrows() {
                return Err(Error::Dimension {
                    context: "bundle abundance rows",
                    expected: groups.total(),
                    found: coefficients.nrows(),
                });
            }
        }
        check_finite(coefficients.as_slice(), "abundances")?;
        check_simplex_columns(&coefficients, tolerance)?;
        Ok(AbundanceMatrix {
            level,
            coefficients,
            tolerance,
        })
    }

    pub fn level(&self) -> &AbundanceLevel {
        &self.level
    }

    pub fn groups(&self) -> Option<&GroupStructure> {
        match &self.level {
            AbundanceLevel::Bundle(g) => Some(g),
            AbundanceLevel::Global => None,
        }
    }

    pub fn coefficients(&self) -> &DMatrix<f64> {
        &self.coefficients
    }

    pub fn into_coefficients(self) -> DMatrix<f64> {
        self.coefficients
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn rows(&self) -> usize {
        self.coefficients.nrows()
    }

    pub fn pixels(&self) -> usize {
        self.coefficients.ncols()
    }
}

pub(crate) fn check_finite(values: &[f64], context: &'static str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite { context, index }),
        None => Ok(()),
    }
}

/// Every column nonnegative and summing to one, both within `tol`.
pub fn check_simplex_columns(m: &DMatrix<f64>, tol: f64) -> Result<()> {
    for (j, col) in m.column_iter().enumerate() {
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        if min < -tol {
            return Err(Error::Infeasible {
                column: j,
                detail: format!("entry {min} is negative"),
            });
        }
        let sum: f64 = col.iter().sum();
        if (sum - 1.0).abs() > tol {
            return Err(Error::Infeasible {
                column: j,
                detail: format!("column sums to {sum}"),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_index_round_trip() {
        let cube = HsiCube::new(DMatrix::zeros(2, 12), 3, 4).unwrap();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(cube.unflatten(cube.flatten(r, c)), (r, c));
            }
        }
        assert_eq!(cube.flatten(1, 0), 4);
    }

    #[test]
    fn cube_rejects_bad_shapes() {
        assert!(HsiCube::new(DMatrix::zeros(2, 5), 2, 2).is_err());
        let mut d = DMatrix::zeros(2, 4);
        d[(1, 2)] = f64::NAN;
        assert!(matches!(HsiCube::new(d, 2, 2), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn well_formed_library_has_empty_report() {
        let b = DMatrix::from_element(4, 6, 0.5);
        let report = validate_library(&b, &[0..2, 2..3, 3..6]);
        assert!(report.is_valid(), "{report}");
        assert!(BundleLibrary::new(b, GroupStructure::from_sizes(&[2, 1, 3]).unwrap()).is_ok());
    }

    #[test]
    fn overlapping_groups_flagged() {
        let b = DMatrix::from_element(4, 6, 0.5);
        let report = validate_library(&b, &[0..3, 2..6]);
        assert!(report.has(LibraryIssueKind::Partition));
        assert!(!report.has(LibraryIssueKind::Negative));
    }

    #[test]
    fn negative_signature_flagged() {
        let mut b = DMatrix::from_element(4, 3, 0.5);
        b[(2, 1)] = -0.1;
        let report = validate_library(&b, &[0..1, 1..3]);
        assert!(report.has(LibraryIssueKind::Negative));
        assert!(!report.has(LibraryIssueKind::Partition));
    }

    #[test]
    fn gap_and_count_mismatch_flagged() {
        let b = DMatrix::from_element(2, 5, 0.5);
        let report = validate_library(&b, &[0..2, 3..4]);
        assert!(report.has(LibraryIssueKind::Partition));
        assert!(report.has(LibraryIssueKind::ColumnCount));
    }

    #[test]
    fn abundance_feasibility() {
        let ok = DMatrix::from_column_slice(2, 2, &[0.3, 0.7, 1.0, 0.0]);
        assert!(AbundanceMatrix::new(AbundanceLevel::Global, ok).is_ok());
        let bad = DMatrix::from_column_slice(2, 1, &[0.6, 0.6]);
        assert!(matches!(
            AbundanceMatrix::new(AbundanceLevel::Global, bad),
            Err(Error::Infeasible { column: 0, .. })
        ));
        let neg = DMatrix::from_column_slice(2, 1, &[1.1, -0.1]);
        assert!(AbundanceMatrix::new(AbundanceLevel::Global, neg).is_err());
    }
}
