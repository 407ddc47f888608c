//! Append-only clinician triage log, one JSON record per line.

use chrono::{DateTime, SubsecRound, Utc};
use drscreen_core::DrGrade;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageRecord {
    pub record_id: String,
    pub image_id: String,
    pub predicted_grade: DrGrade,
    pub clinician_grade: DrGrade,
    /// True when the clinician grade differs from the prediction.
    #[serde(rename = "override")]
    pub is_override: bool,
    pub reviewer_id: String,
    /// UTC, whole seconds.
    pub timestamp: DateTime<Utc>,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewTriage {
    pub image_id: String,
    pub predicted_grade: DrGrade,
    pub clinician_grade: DrGrade,
    pub reviewer_id: String,
    pub note: String,
}

struct LogState {
    next_id: u64,
    last: Option<DateTime<Utc>>,
    records: Vec<TriageRecord>,
}

/// The single writer of the log file; callers serialize through its mutex.
pub struct TriageLog {
    path: PathBuf,
    state: Mutex<LogState>,
}

impl TriageLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut records = Vec::new();
        if path.exists() {
            for (i, line) in std::fs::read_to_string(path)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let r: TriageRecord = serde_json::from_str(line).map_err(|e| {
                    std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        format!("{}: line {}: {e}", path.display(), i + 1),
                    )
                })?;
                records.push(r);
            }
        }
        let next_id = records.len() as u64 + 1;
        let last = records.iter().map(|r| r.timestamp).max();
        Ok(TriageLog {
            path: path.to_path_buf(),
            state: Mutex::new(LogState { next_id, last, records }),
        })
    }

    /// Assigns id and timestamp, appends to disk, then to memory. The
    /// timestamp never goes backwards even if the wall clock does.
    pub fn append(&self, new: NewTriage) -> std::io::Result<TriageRecord> {
        let mut st = self.state.lock().expect("triage lock");
        let now = Utc::now().trunc_subsecs(0);
        let timestamp = match st.last {
            Some(last) if last > now => last,
            _ => now,
        };
        let record = TriageRecord {
            record_id: format!("tr-{:06}", st.next_id),
            is_override: new.predicted_grade != new.clinician_grade,
            image_id: new.image_id,
            predicted_grade: new.predicted_grade,
            clinician_grade: new.clinician_grade,
            reviewer_id: new.reviewer_id,
            timestamp,
            note: new.note,
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        st.next_id += 1;
        st.last = Some(timestamp);
        st.records.push(record.clone());
        Ok(record)
    }

    /// Records for one image (all images when `None`), newest first.
    pub fn list(&self, image_id: Option<&str>) -> Vec<TriageRecord> {
        let st = self.state.lock().expect("triage lock");
        st.records
            .iter()
            .rev()
            .filter(|r| image_id.is_none_or(|id| r.image_id == id))
            .cloned()
            .collect()
    }
}
