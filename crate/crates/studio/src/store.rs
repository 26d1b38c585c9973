//! Filesystem persistence: `projects/<id>/project.json`,
//! `projects/<id>/rounds/<n>/round.json`, copied references and
//! backgrounds, and generated candidates. Every write is atomic and counts
//! as one persistence point for fault injection.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::de::DeserializeOwned;
use serde::Serialize;

use inpaint_compose::imaging::{encode_png, write_atomic, Raster};

use crate::error::{Result, StudioError};
use crate::model::{Project, Round, Snapshot};

pub fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> StudioError {
    StudioError::Io(format!("{}: {e}", path.display()))
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
    /// Writes left before the injected crash; `usize::MAX` disables it.
    crash_budget: Arc<AtomicUsize>,
    writes: Arc<AtomicUsize>,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let projects = root.join("projects");
        fs::create_dir_all(&projects).map_err(|e| io_err(&projects, e))?;
        Ok(Self {
            root,
            crash_budget: Arc::new(AtomicUsize::new(usize::MAX)),
            writes: Arc::new(AtomicUsize::new(0)),
        })
    }

    /// Fails the write after `n` successful ones, and every write after it.
    pub fn crash_after(&self, n: usize) {
        self.crash_budget.store(n, Ordering::SeqCst);
    }

    /// Successful persistence writes so far.
    pub fn write_count(&self) -> usize {
        self.writes.load(Ordering::SeqCst)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn project_dir(&self, id: &str) -> PathBuf {
        self.root.join("projects").join(id)
    }

    pub fn round_dir(&self, id: &str, n: usize) -> PathBuf {
        self.project_dir(id).join("rounds").join(n.to_string())
    }

    fn point(&self) -> Result<()> {
        let left = self.crash_budget.load(Ordering::SeqCst);
        if left == 0 {
            return Err(StudioError::Crash);
        }
        if left != usize::MAX {
            self.crash_budget.store(left - 1, Ordering::SeqCst);
        }
        self.writes.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    pub fn write_bytes(&self, path: &Path, bytes: &[u8]) -> Result<()> {
        self.point()?;
        write_atomic(path, bytes).map_err(StudioError::from)
    }

    pub fn write_json<T: Serialize>(&self, path: &Path, v: &T) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(v).map_err(|e| io_err(path, e))?;
        self.write_bytes(path, &bytes)
    }

    pub fn write_png(&self, path: &Path, r: &Raster) -> Result<()> {
        self.write_bytes(path, &encode_png(r)?)
    }

    pub fn copy_file(&self, from: &Path, to: &Path) -> Result<()> {
        let bytes = fs::read(from).map_err(|e| io_err(from, e))?;
        self.write_bytes(to, &bytes)
    }

    fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
        let bytes = fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                StudioError::NotFound(path.display().to_string())
            } else {
                io_err(path, e)
            }
        })?;
        serde_json::from_slice(&bytes).map_err(|e| io_err(path, e))
    }

    pub fn save_project(&self, p: &Project) -> Result<()> {
        self.write_json(&self.project_dir(&p.id).join("project.json"), p)
    }

    pub fn save_round(&self, id: &str, r: &Round) -> Result<()> {
        self.write_json(&self.round_dir(id, r.index).join("round.json"), r)
    }

    pub fn project_exists(&self, id: &str) -> bool {
        self.project_dir(id).join("project.json").is_file()
    }

    pub fn load_project(&self, id: &str) -> Result<Project> {
        Self::read_json(&self.project_dir(id).join("project.json"))
            .map_err(|e| match e {
                StudioError::NotFound(_) => StudioError::NotFound(format!("project {id}")),
                other => other,
            })
    }

    pub fn load_round(&self, id: &str, n: usize) -> Result<Round> {
        Self::read_json(&self.round_dir(id, n).join("round.json")).map_err(|e| match e {
            StudioError::NotFound(_) => StudioError::NotFound(format!("round {n} of project {id}")),
            other => other,
        })
    }

    pub fn snapshot(&self, id: &str) -> Result<Snapshot> {
        let project = self.load_project(id)?;
        let rounds = (1..=project.rounds)
            .map(|n| self.load_round(id, n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Snapshot { project, rounds })
    }

    pub fn list_projects(&self) -> Result<Vec<String>> {
        let dir = self.root.join("projects");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|e| io_err(&dir, e))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().join("project.json").is_file())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Exclusive writer lock for a project, held until the guard drops.
    /// A lock left by a process that no longer exists is taken over.
    pub fn lock(&self, id: &str) -> Result<ProjectLock> {
        let dir = self.project_dir(id);
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        let path = dir.join("lock");
        for _ in 0..2 {
            match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    use std::io::Write;
                    let _ = write!(f, "{}", std::process::id());
                    return Ok(ProjectLock { path });
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = fs::read_to_string(&path).ok().and_then(|s| s.trim().parse::<u32>().ok());
                    let alive = holder.is_some_and(|pid| pid == std::process::id() || process_alive(pid));
                    if alive {
                        return Err(StudioError::Conflict(format!("project {id} is busy")));
                    }
                    let _ = fs::remove_file(&path);
                }
                Err(e) => return Err(io_err(&path, e)),
            }
        }
        Err(StudioError::Conflict(format!("project {id} is busy")))
    }
}

fn process_alive(pid: u32) -> bool {
    Path::new("/proc").join(pid.to_string()).exists()
}

#[derive(Debug)]
pub struct ProjectLock {
    path: PathBuf,
}

impl Drop for ProjectLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crash_budget_blocks_writes() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        s.crash_after(1);
        s.write_bytes(&dir.path().join("a"), b"1").unwrap();
        assert!(matches!(s.write_bytes(&dir.path().join("b"), b"2"), Err(StudioError::Crash)));
        assert!(matches!(s.write_bytes(&dir.path().join("c"), b"3"), Err(StudioError::Crash)));
        assert!(!dir.path().join("b").exists());
        assert_eq!(s.write_count(), 1);
    }

    #[test]
    fn lock_is_exclusive_and_stale_locks_are_taken_over() {
        let dir = tempfile::tempdir().unwrap();
        let s = Store::open(dir.path()).unwrap();
        let g = s.lock("p").unwrap();
        assert!(matches!(s.lock("p"), Err(StudioError::Conflict(_))));
        drop(g);
        let g = s.lock("p").unwrap();
        drop(g);
        // A pid that cannot exist.
        fs::write(s.project_dir("p").join("lock"), "4294967295").unwrap();
        assert!(s.lock("p").is_ok());
    }
}
