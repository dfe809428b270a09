//! On-disk cohort formats: the TSV manifest, headerless CSV scans, and the
//! compact `.bts` binary scan format pretraining iterates over.
//!
//! `.bts` layout: magic `BTS1`, then V and T as u32 little-endian, then
//! V*T f32 little-endian values, row-major. Values are stored at 32-bit
//! precision, so writers keep scan data f32-exact to make the CSV and `.bts`
//! encodings of one matrix load identically.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::mat::Mat;
use thiserror::Error;

pub const MANIFEST_HEADER: &str = "subject_id\tscan_path\tsite\tlabel\tsplit";
const BTS_MAGIC: &[u8; 4] = b"BTS1";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("validation error in {path}: {msg}")]
    Validation { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, IngestError>;

fn io_err(path: &Path, source: std::io::Error) -> IngestError {
    IngestError::Io { path: path.to_path_buf(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> IngestError {
    IngestError::Format { path: path.to_path_buf(), msg: msg.into() }
}

fn validation_err(path: &Path, msg: impl Into<String>) -> IngestError {
    IngestError::Validation { path: path.to_path_buf(), msg: msg.into() }
}

/// Which phase a scan participates in. `PretrainOnly` scans never enter the
/// downstream probe; labeled scans may serve both phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
    PretrainOnly,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::PretrainOnly => "pretrain-only",
        };
        f.write_str(s)
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "pretrain-only" => Ok(Split::PretrainOnly),
            other => Err(format!(
                "unknown split {other:?}; expected train, val, test or pretrain-only"
            )),
        }
    }
}

/// One subject's BOLD matrix (V ROIs x T timepoints) plus identity metadata.
#[derive(Debug, Clone)]
pub struct TimeseriesScan {
    pub subject_id: String,
    pub site: String,
    /// Integer class id; -1 marks unlabeled scans.
    pub label: i32,
    pub split: Split,
    pub data: Mat,
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub subject_id: String,
    /// Resolved against the manifest's directory.
    pub scan_path: PathBuf,
    pub site: String,
    pub label: i32,
    pub split: Split,
}

/// Ordered cohort description; entry order is the file order and is preserved.
#[derive(Debug, Clone)]
pub struct CohortManifest {
    pub entries: Vec<ManifestEntry>,
    /// ROI count shared by every scan in the cohort.
    pub atlas_rois: usize,
}

/// Parse and validate a TSV manifest. Reads each scan's header/shape so the
/// shared ROI count is enforced up front.
pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format_err(path, "empty manifest"))?;
    if header != MANIFEST_HEADER {
        let found: Vec<&str> = header.split('\t').collect();
        let expected: Vec<&str> = MANIFEST_HEADER.split('\t').collect();
        for col in &expected {
            if !found.contains(col) {
                return Err(format_err(path, format!("missing column {col:?} in header")));
            }
        }
        for (i, col) in found.iter().enumerate() {
            if found[..i].contains(col) {
                return Err(format_err(path, format!("duplicate column {col:?} in header")));
            }
        }
        return Err(format_err(
            path,
            format!("header must be exactly {MANIFEST_HEADER:?}, got {header:?}"),
        ));
    }

    let mut entries = Vec::new();
    let mut seen_ids: std::collections::HashSet<String> = std::collections::HashSet::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row = lineno + 2; // 1-based, after header
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(format_err(
                path,
                format!("line {row}: expected 5 tab-separated fields, got {}", fields.len()),
            ));
        }
        let subject_id = fields[0].to_string();
        if !seen_ids.insert(subject_id.clone()) {
            return Err(validation_err(path, format!("duplicate subject_id {subject_id:?}")));
        }
        let scan_path = base.join(fields[1]);
        if !scan_path.is_file() {
            return Err(IngestError::Io {
                path: scan_path.clone(),
                source: std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("scan for subject {subject_id:?} not found"),
                ),
            });
        }
        let label: i32 = fields[3].parse().map_err(|_| {
            format_err(path, format!("line {row}: label {:?} is not an integer", fields[3]))
        })?;
        let split = Split::from_str(fields[4])
            .map_err(|e| format_err(path, format!("line {row}: {e}")))?;
        entries.push(ManifestEntry {
            subject_id,
            scan_path,
            site: fields[2].to_string(),
            label,
            split,
        });
    }
    if entries.is_empty() {
        return Err(validation_err(path, "manifest has no entries"));
    }

    let (first_v, _) = peek_scan_dims(&entries[0].scan_path)?;
    for e in &entries[1..] {
        let (v, _) = peek_scan_dims(&e.scan_path)?;
        if v != first_v {
            return Err(validation_err(
                path,
                format!(
                    "ROI count mismatch: {} has V={first_v}, {} has V={v}",
                    entries[0].scan_path.display(),
                    e.scan_path.display()
                ),
            ));
        }
    }
    Ok(CohortManifest { entries, atlas_rois: first_v })
}

/// Read only (V, T) of a scan, without materializing CSV values.
fn peek_scan_dims(path: &Path) -> Result<(usize, usize)> {
    if is_bts(path) {
        let mut file = fs::File::open(path).map_err(|e| io_err(path, e))?;
        let mut head = [0u8; 12];
        file.read_exact(&mut head)
            .map_err(|_| format_err(path, "truncated .bts header"))?;
        check_bts_magic(path, &head[..4])?;
        let v = u32::from_le_bytes(head[4..8].try_into().unwrap()) as usize;
        let t = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        Ok((v, t))
    } else {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut v = 0;
        let mut t = 0;
        for line in text.lines().filter(|l| !l.is_empty()) {
            if v == 0 {
                t = line.split(',').count();
            }
            v += 1;
        }
        if v == 0 {
            return Err(format_err(path, "empty scan file"));
        }
        Ok((v, t))
    }
}

fn is_bts(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("bts"))
}

fn check_bts_magic(path: &Path, bytes: &[u8]) -> Result<()> {
    if bytes != BTS_MAGIC {
        return Err(format_err(path, "bad magic; expected BTS1"));
    }
    Ok(())
}

/// Load one scan matrix from CSV or `.bts`, chosen by file extension.
pub fn load_scan(path: &Path) -> Result<Mat> {
    let data = if is_bts(path) { load_scan_bts(path)? } else { load_scan_csv(path)? };
    if let Some((r, c)) = data.find_non_finite() {
        return Err(validation_err(path, format!("non-finite value at row {}, column {}", r + 1, c + 1)));
    }
    Ok(data)
}

fn load_scan_csv(path: &Path) -> Result<Mat> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut values: Vec<f64> = Vec::new();
    let mut cols = 0usize;
    let mut rows = 0usize;
    for (i, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
        let row = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if rows == 0 {
            cols = fields.len();
        } else if fields.len() != cols {
            return Err(format_err(
                path,
                format!("ragged row {row}: expected {cols} values, got {}", fields.len()),
            ));
        }
        for (j, tok) in fields.iter().enumerate() {
            let v: f64 = tok.trim().parse().map_err(|_| {
                format_err(path, format!("row {row}, column {}: {tok:?} is not a number", j + 1))
            })?;
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(format_err(path, "empty scan file"));
    }
    Ok(Mat::from_vec(rows, cols, values))
}

fn load_scan_bts(path: &Path) -> Result<Mat> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 {
        return Err(format_err(path, "truncated .bts header"));
    }
    check_bts_magic(path, &bytes[..4])?;
    let v = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let expected = 12 + 4 * v * t;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("size mismatch: {v}x{t} needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    let mut values = Vec::with_capacity(v * t);
    for chunk in bytes[12..].chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    Ok(Mat::from_vec(v, t, values))
}

/// Write a scan as headerless CSV. Formatting is shortest-roundtrip, so
/// reloading reproduces the matrix exactly.
pub fn write_scan_csv(data: &Mat, path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in 0..data.rows() {
        for c in 0..data.cols() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", data.get(r, c)));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Write a scan as `.bts`. Values are stored as f32; callers keep scan data
/// f32-exact so the round trip is bitwise.
pub fn write_scan_bts(data: &Mat, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + 4 * data.rows() * data.cols());
    bytes.extend_from_slice(BTS_MAGIC);
    bytes.extend_from_slice(&(data.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(data.cols() as u32).to_le_bytes());
    for v in data.iter() {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(&bytes).map_err(|e| io_err(path, e))
}

/// Serialize manifest entries (paths written as given).
pub fn write_manifest(entries: &[(String, String, String, i32, Split)], path: &Path) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for (subject_id, scan_path, site, label, split) in entries {
        out.push_str(&format!("{subject_id}\t{scan_path}\t{site}\t{label}\t{split}\n"));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Load every scan of a manifest, in manifest order.
pub fn load_cohort(manifest: &CohortManifest) -> Result<Vec<TimeseriesScan>> {
    let mut scans = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let data = load_scan(&entry.scan_path)?;
        if data.rows() != manifest.atlas_rois {
            return Err(validation_err(
                &entry.scan_path,
                format!("expected V={}, got V={}", manifest.atlas_rois, data.rows()),
            ));
        }
        if data.cols() < 3 {
            return Err(validation_err(
                &entry.scan_path,
                format!("scan needs at least 3 timepoints, got {}", data.cols()),
            ));
        }
        scans.push(TimeseriesScan {
            subject_id: entry.subject_id.clone(),
            site: entry.site.clone(),
            label: entry.label,
            split: entry.split,
            data,
        });
    }
    Ok(scans)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(path: &Path, content: &str) {
        fs::write(path, content).unwrap();
    }

    #[test]
    fn csv_scan_parses_to_expected_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write(&p, "1,2,3\n4,5,6\n");
        let m = load_scan(&p).unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.cols(), 3);
        assert_eq!(m.as_slice(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn ragged_csv_cites_offending_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write(&p, "1,2\n3\n");
        let err = load_scan(&p).unwrap_err();
        assert!(matches!(&err, IngestError::Format { .. }), "{err}");
        assert!(err.to_string().contains("row 2"), "{err}");
    }

    #[test]
    fn non_finite_value_cites_position() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write(&p, "1,NaN\n3,4\n");
        let err = load_scan(&p).unwrap_err();
        assert!(matches!(&err, IngestError::Validation { .. }), "{err}");
        assert!(err.to_string().contains("row 1, column 2"), "{err}");
    }

    #[test]
    fn bts_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bts");
        // f32-exact values
        let m = Mat::from_vec(2, 3, vec![1.0, 2.5, -3.25, 4.0, 5.5, 6.125]);
        write_scan_bts(&m, &p).unwrap();
        let loaded = load_scan(&p).unwrap();
        assert_eq!(m, loaded);
    }

    #[test]
    fn csv_and_bts_encodings_agree() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mat::from_vec(2, 3, vec![0.5, -1.25, 2.0, 3.75, -4.5, 0.0625]);
        let pc = dir.path().join("a.csv");
        let pb = dir.path().join("a.bts");
        write_scan_csv(&m, &pc).unwrap();
        write_scan_bts(&m, &pb).unwrap();
        assert_eq!(load_scan(&pc).unwrap(), load_scan(&pb).unwrap());
    }

    #[test]
    fn csv_round_trip_preserves_arbitrary_f64() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        let m = Mat::from_vec(1, 3, vec![0.1 + 0.2, std::f64::consts::PI, -1e-17]);
        write_scan_csv(&m, &p).unwrap();
        assert_eq!(load_scan(&p).unwrap(), m);
    }

    #[test]
    fn truncated_bts_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bts");
        let m = Mat::from_vec(2, 3, vec![1.0; 6]);
        write_scan_bts(&m, &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_scan(&p), Err(IngestError::Format { .. })));
    }

    fn scan_file(dir: &Path, name: &str, rows: usize) -> String {
        let p = dir.join(name);
        let mut content = String::new();
        for r in 0..rows {
            content.push_str(&format!("{}.0,{}.5,1.0,2.0\n", r + 1, r + 1));
        }
        write(&p, &content);
        name.to_string()
    }

    #[test]
    fn manifest_loads_three_rows_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let s1 = scan_file(dir.path(), "s1.csv", 4);
        let s2 = scan_file(dir.path(), "s2.csv", 4);
        let s3 = scan_file(dir.path(), "s3.csv", 4);
        let mp = dir.path().join("m.tsv");
        write(
            &mp,
            &format!(
                "{MANIFEST_HEADER}\ns01\t{s1}\tsiteA\t0\ttrain\ns02\t{s2}\tsiteB\t1\tval\ns03\t{s3}\tsiteA\t-1\tpretrain-only\n"
            ),
        );
        let manifest = load_manifest(&mp).unwrap();
        assert_eq!(manifest.entries.len(), 3);
        assert_eq!(manifest.atlas_rois, 4);
        assert_eq!(manifest.entries[1].subject_id, "s02");
        assert_eq!(manifest.entries[2].label, -1);
        assert_eq!(manifest.entries[2].split, Split::PretrainOnly);
        let cohort = load_cohort(&manifest).unwrap();
        assert_eq!(cohort.len(), 3);
        assert_eq!(cohort[0].data.cols(), 4);
    }

    #[test]
    fn duplicate_subject_id_names_the_subject() {
        let dir = tempfile::tempdir().unwrap();
        let s1 = scan_file(dir.path(), "s1.csv", 4);
        let mp = dir.path().join("m.tsv");
        write(
            &mp,
            &format!("{MANIFEST_HEADER}\ns01\t{s1}\tsiteA\t0\ttrain\ns01\t{s1}\tsiteA\t1\ttrain\n"),
        );
        let err = load_manifest(&mp).unwrap_err();
        assert!(matches!(&err, IngestError::Validation { .. }));
        assert!(err.to_string().contains("s01"), "{err}");
    }

    #[test]
    fn wrong_header_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("m.tsv");
        write(&mp, "subject_id\tscan_path\tsite\tlabel\n");
        let err = load_manifest(&mp).unwrap_err();
        assert!(err.to_string().contains("split"), "{err}");
    }

    #[test]
    fn mismatched_roi_count_reports_both_paths() {
        let dir = tempfile::tempdir().unwrap();
        let s1 = scan_file(dir.path(), "s1.csv", 4);
        let s2 = scan_file(dir.path(), "s2.csv", 5);
        let mp = dir.path().join("m.tsv");
        write(
            &mp,
            &format!("{MANIFEST_HEADER}\ns01\t{s1}\tsiteA\t0\ttrain\ns02\t{s2}\tsiteA\t1\ttrain\n"),
        );
        let err = load_manifest(&mp).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(&err, IngestError::Validation { .. }));
        assert!(msg.contains("s1.csv") && msg.contains("s2.csv"), "{msg}");
    }

    #[test]
    fn loading_twice_yields_identical_cohorts() {
        let dir = tempfile::tempdir().unwrap();
        let s1 = scan_file(dir.path(), "s1.csv", 3);
        let mp = dir.path().join("m.tsv");
        write(&mp, &format!("{MANIFEST_HEADER}\ns01\t{s1}\tsiteA\t0\ttrain\n"));
        let a = load_cohort(&load_manifest(&mp).unwrap()).unwrap();
        let b = load_cohort(&load_manifest(&mp).unwrap()).unwrap();
        assert_eq!(a.len(), b.len());
        assert_eq!(a[0].data, b[0].data);
    }
}
