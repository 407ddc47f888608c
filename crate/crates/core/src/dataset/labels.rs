//! Grade label tables: UTF-8 CSV with header `image,level`.

use super::DatasetError;
use crate::domain::{grade_from_int, GradedRecord};
use std::collections::HashSet;
use std::path::Path;

pub fn load_labels(path: &Path) -> Result<Vec<GradedRecord>, DatasetError> {
    let file = std::fs::File::open(path).map_err(|e| DatasetError::io(path, e))?;
    read_labels(file, path)
}

pub(crate) fn read_labels<R: std::io::Read>(
    reader: R,
    path: &Path,
) -> Result<Vec<GradedRecord>, DatasetError> {
    let load_err = |row: usize, message: String| DatasetError::Labels {
        path: path.to_path_buf(),
        row,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| load_err(1, e.to_string()))?.clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| load_err(1, format!("missing column `{name}`")))
    };
    let image_col = column("image")?;
    let level_col = column("level")?;

    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        // Header is line 1.
        let line = i + 2;
        let row = row.map_err(|e| load_err(line, e.to_string()))?;
        let image_id = row
            .get(image_col)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| load_err(line, "empty image id".into()))?;
        let level = row
            .get(level_col)
            .ok_or_else(|| load_err(line, "missing level".into()))?;
        let level: i64 = level
            .parse()
            .map_err(|_| load_err(line, format!("unparsable level `{level}`")))?;
        let grade = grade_from_int(level).map_err(|e| load_err(line, e.to_string()))?;
        if !seen.insert(image_id.to_string()) {
            return Err(load_err(line, format!("duplicate image id `{image_id}`")));
        }
        records.push(GradedRecord::new(image_id, grade));
    }
    Ok(records)
}

pub fn write_labels(records: &[GradedRecord], path: &Path) -> Result<(), DatasetError> {
    let mut out = String::from("image,level\n");
    for r in records {
        out.push_str(&format!("{},{}\n", r.image_id, r.grade.id()));
    }
    std::fs::write(path, out).map_err(|e| DatasetError::io(path, e))
}
