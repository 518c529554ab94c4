//! Atomic file output and readers for the CSV dumps written by `train`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use decorre_core::CorrelationRecord;

use crate::{CliError, CliResult};

/// Writes `bytes` to a temporary sibling of `path`, then renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::Validation(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = std::fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(io_err(path, e));
    }
    Ok(())
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

/// Run directories under `dir` that contain `file`, sorted by name. `dir`
/// itself counts when it contains `file`.
pub fn run_dirs(dir: &Path, file: &str) -> CliResult<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::Validation(format!("{} is not a directory", dir.display())));
    }
    if dir.join(file).is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| io_err(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.join(file).is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Reads a `fold,layer_id,epoch,feature,correlation` dump back into one
/// record per (fold, layer, epoch), features in file order.
pub fn read_records_csv(path: &Path) -> CliResult<Vec<CorrelationRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let bad = |line: u64, msg: String| CliError::Validation(format!("{}:{line}: {msg}", path.display()));
    let headers = reader.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["fold", "layer_id", "epoch", "feature", "correlation"] {
        return Err(bad(1, format!("unexpected header {headers:?}")));
    }
    let mut grouped: BTreeMap<(usize, usize, usize), Vec<f64>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| bad(0, e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let int = |i: usize| {
            row[i]
                .parse::<usize>()
                .map_err(|e| bad(line, format!("column {i}: {e}")))
        };
        let key = (int(0)?, int(1)?, int(2)?);
        let value: f64 = row[4].parse().map_err(|e| bad(line, format!("correlation: {e}")))?;
        grouped.entry(key).or_default().push(value);
    }
    Ok(grouped
        .into_iter()
        .map(|((_, layer, epoch), values)| CorrelationRecord::new(layer, epoch, values))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/out.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        let names: Vec<_> = std::fs::read_dir(dir.path().join("sub"))
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names, vec![std::ffi::OsString::from("out.csv")]);
    }

    #[test]
    fn records_round_trip_grouping() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        std::fs::write(
            &path,
            "fold,layer_id,epoch,feature,correlation\n0,1,5,0,0.5\n0,1,5,1,-0.25\n1,1,5,0,0.125\n0,2,5,0,1\n",
        )
        .unwrap();
        let recs = read_records_csv(&path).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].correlations, vec![0.5, -0.25]);
        assert_eq!(recs[1].layer_id, 2);
        assert_eq!(recs[2].correlations, vec![0.125]);
    }

    #[test]
    fn malformed_record_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("records.csv");
        std::fs::write(&path, "fold,layer_id,epoch,feature,correlation\n0,1,x,0,0.5\n").unwrap();
        let err = read_records_csv(&path).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains(":2:"), "{err}");
    }
}
