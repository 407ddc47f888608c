//! The count table: one row of per-class lesion counts per image.
//!
//! ```text
//! image_id,ma,hem,he,se,irma,vb,prolif,grade
//! 1_left,0,0,0,0,0,0,0,0
//! ```
//!
//! Columns between `image_id` and `grade` name the active lesion classes in
//! taxonomy order; a restricted class subset simply has fewer of them.

use crate::dataset::DatasetError;
use crate::domain::{grade_from_int, DrGrade, LesionClass};
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub image_id: String,
    pub values: Vec<f64>,
    pub grade: DrGrade,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    pub classes: Vec<LesionClass>,
    pub rows: Vec<CountRow>,
}

impl CountTable {
    pub fn features(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.values.clone()).collect()
    }

    pub fn grades(&self) -> Vec<DrGrade> {
        self.rows.iter().map(|r| r.grade).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        let mut header = vec!["image_id".to_string()];
        header.extend(self.classes.iter().map(|c| c.column().to_string()));
        header.push("grade".into());
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.image_id.clone()];
            // `Display` for f64 is the shortest round-trip form, integers print bare.
            rec.extend(r.values.iter().map(|v| v.to_string()));
            rec.push(r.grade.id().to_string());
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        std::fs::write(path, self.to_csv()).map_err(|e| DatasetError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let err = |row: usize, message: String| DatasetError::Labels {
            path: path.to_path_buf(),
            row,
            message,
        };
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(path)
            .map_err(|e| err(0, e.to_string()))?;
        let header = rdr.headers().map_err(|e| err(1, e.to_string()))?.clone();
        let n = header.len();
        if n < 3 || &header[0] != "image_id" || &header[n - 1] != "grade" {
            return Err(err(1, "header must be image_id,<class columns>,grade".into()));
        }
        let classes = header
            .iter()
            .skip(1)
            .take(n - 2)
            .map(|name| {
                LesionClass::ALL
                    .into_iter()
                    .find(|c| c.column() == name)
                    .ok_or_else(|| err(1, format!("unknown class column `{name}`")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec.map_err(|e| err(line, e.to_string()))?;
            if rec.len() != n {
                return Err(err(line, format!("expected {n} fields, found {}", rec.len())));
            }
            let values = rec
                .iter()
                .skip(1)
                .take(n - 2)
                .map(|v| match v.parse::<f64>() {
                    Ok(x) if x >= 0.0 && x.is_finite() => Ok(x),
                    _ => Err(err(line, format!("bad count `{v}`"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let level: i64 = rec[n - 1].parse().map_err(|_| err(line, format!("bad grade `{}`", &rec[n - 1])))?;
            let grade = grade_from_int(level).map_err(|e| err(line, e.to_string()))?;
            rows.push(CountRow {
                image_id: rec[0].to_string(),
                values,
                grade,
            });
        }
        Ok(CountTable { classes, rows })
    }
}
