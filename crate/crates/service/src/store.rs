//! Uploaded-image store keyed by content hash, with LRU eviction.

use std::collections::VecDeque;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub const DEFAULT_RETENTION: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ImageKind {
    Png,
    Jpeg,
}

impl ImageKind {
    /// Recognizes PNG and JPEG by their leading magic bytes.
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
            Some(ImageKind::Png)
        } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
            Some(ImageKind::Jpeg)
        } else {
            None
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            ImageKind::Png => "png",
            ImageKind::Jpeg => "jpg",
        }
    }

    pub fn mime(self) -> &'static str {
        match self {
            ImageKind::Png => "image/png",
            ImageKind::Jpeg => "image/jpeg",
        }
    }

    fn from_extension(ext: &str) -> Option<Self> {
        match ext {
            "png" => Some(ImageKind::Png),
            "jpg" => Some(ImageKind::Jpeg),
            _ => None,
        }
    }
}

/// Files live at `<dir>/<id>.<ext>`; the most recently used id is at the
/// back of the queue. Writes go to a temporary file in the same directory
/// and are renamed into place.
pub struct ImageStore {
    dir: PathBuf,
    capacity: usize,
    lru: Mutex<VecDeque<(String, ImageKind)>>,
}

impl ImageStore {
    /// Opens (creating if needed) a store, adopting files already present in
    /// modification-time order.
    pub fn open(dir: &Path, capacity: usize) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut found = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            let (Some(stem), Some(kind)) = (
                path.file_stem().and_then(|s| s.to_str()),
                path.extension().and_then(|e| e.to_str()).and_then(ImageKind::from_extension),
            ) else {
                continue;
            };
            let mtime = entry.metadata()?.modified()?;
            found.push((mtime, stem.to_string(), kind));
        }
        found.sort();
        let store = ImageStore {
            dir: dir.to_path_buf(),
            capacity: capacity.max(1),
            lru: Mutex::new(found.into_iter().map(|(_, id, k)| (id, k)).collect()),
        };
        store.evict(&mut store.lru.lock().expect("store lock"))?;
        Ok(store)
    }

    fn path(&self, id: &str, kind: ImageKind) -> PathBuf {
        self.dir.join(format!("{id}.{}", kind.extension()))
    }

    fn evict(&self, lru: &mut VecDeque<(String, ImageKind)>) -> std::io::Result<()> {
        while lru.len() > self.capacity {
            let (id, kind) = lru.pop_front().expect("non-empty");
            match std::fs::remove_file(self.path(&id, kind)) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(e),
                _ => log::debug!("evicted image {id}"),
            }
        }
        Ok(())
    }

    /// Stores `bytes` under `id` (idempotent) and marks it most recent.
    pub fn put(&self, id: &str, kind: ImageKind, bytes: &[u8]) -> std::io::Result<()> {
        let mut lru = self.lru.lock().expect("store lock");
        if let Some(pos) = lru.iter().position(|(i, _)| i == id) {
            let entry = lru.remove(pos).expect("present");
            lru.push_back(entry);
            return Ok(());
        }
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        tmp.write_all(bytes)?;
        tmp.persist(self.path(id, kind)).map_err(|e| e.error)?;
        lru.push_back((id.to_string(), kind));
        self.evict(&mut lru)
    }

    /// Reads a stored image and marks it most recent.
    pub fn get(&self, id: &str) -> Option<(ImageKind, Vec<u8>)> {
        let mut lru = self.lru.lock().expect("store lock");
        let pos = lru.iter().position(|(i, _)| i == id)?;
        let entry = lru.remove(pos).expect("present");
        let bytes = std::fs::read(self.path(&entry.0, entry.1)).ok();
        let kind = entry.1;
        lru.push_back(entry);
        bytes.map(|b| (kind, b))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.lru.lock().expect("store lock").iter().any(|(i, _)| i == id)
    }

    pub fn len(&self) -> usize {
        self.lru.lock().expect("store lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
