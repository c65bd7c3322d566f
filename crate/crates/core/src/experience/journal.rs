//! Append-only operation log and snapshot files for the experience store.
//!
//! Both files start with a header line carrying `format_version` and a
//! generation number. A snapshot of generation `g` already contains every
//! log entry written under generations below `g`, so a crash between writing
//! the snapshot and resetting the log never double-applies entries.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{ExperienceId, ExperienceRecord, QVector};
use crate::credit::{TurnKey, UsageLink};
use crate::error::{KernelError, Result};

pub const FORMAT_VERSION: u32 = 1;

pub const LOG_FILE: &str = "experience.log";
pub const SNAPSHOT_FILE: &str = "experience.snapshot";

/// One line of the operation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LogEntry {
    Insert {
        record: ExperienceRecord,
    },
    Replace {
        id: ExperienceId,
        intent: String,
        script: String,
        digest: String,
        source_model: String,
        used_experience_ids: Vec<ExperienceId>,
        revision: u32,
        updated_at: u64,
    },
    Credit {
        id: ExperienceId,
        t: u64,
        alpha: f64,
        c: f64,
        r: [i8; 5],
        q_before: QVector,
        q_after: QVector,
    },
    Visit {
        turn: TurnKey,
        ids: Vec<ExperienceId>,
        updated_at: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format_version: u32,
    pub generation: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub format_version: u32,
    pub generation: u64,
    pub next_id: u64,
    pub clock: u64,
    pub usage: Vec<UsageLink>,
}

/// Everything a snapshot holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub header: SnapshotHeader,
    pub records: Vec<ExperienceRecord>,
}

/// Destination for store mutations. `append` must be all-or-nothing from the
/// store's point of view: on error the store discards the mutation.
pub trait Journal: Send {
    fn append(&mut self, entries: &[LogEntry]) -> io::Result<()>;

    /// Folds the log into a snapshot. In-memory journals may just clear.
    fn compact(&mut self, snapshot: &Snapshot) -> io::Result<()>;
}

/// Keeps entries in a shared vector; used by tests and the replay oracle.
#[derive(Debug, Clone, Default)]
pub struct MemoryJournal {
    entries: Arc<Mutex<Vec<LogEntry>>>,
}

impl MemoryJournal {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> Vec<LogEntry> {
        self.entries.lock().expect("journal lock poisoned").clone()
    }
}

impl Journal for MemoryJournal {
    fn append(&mut self, entries: &[LogEntry]) -> io::Result<()> {
        self.entries
            .lock()
            .expect("journal lock poisoned")
            .extend_from_slice(entries);
        Ok(())
    }

    fn compact(&mut self, _snapshot: &Snapshot) -> io::Result<()> {
        self.entries.lock().expect("journal lock poisoned").clear();
        Ok(())
    }
}

/// Log and snapshot files inside one directory.
#[derive(Debug)]
pub struct FileJournal {
    dir: PathBuf,
    log: File,
    generation: u64,
}

fn write_atomically(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut file = File::create(&tmp)?;
        file.write_all(contents)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn header_line<T: Serialize>(header: &T) -> io::Result<String> {
    let mut line = serde_json::to_string(header).map_err(io::Error::other)?;
    line.push('\n');
    Ok(line)
}

/// Contents of a directory as found on disk.
#[derive(Debug, Default)]
pub struct LoadedFiles {
    pub snapshot: Option<Snapshot>,
    pub log_generation: u64,
    pub entries: Vec<LogEntry>,
}

impl LoadedFiles {
    /// Log entries not already covered by the snapshot.
    pub fn pending_entries(&self) -> &[LogEntry] {
        match &self.snapshot {
            Some(snap) if self.log_generation < snap.header.generation => &[],
            _ => &self.entries,
        }
    }
}

/// Reads the log file: its header and every complete entry. A torn final
/// line (no trailing newline) is ignored.
pub fn read_log(path: &Path) -> Result<(LogHeader, Vec<LogEntry>)> {
    let text = fs::read_to_string(path)?;
    let complete = match text.rfind('\n') {
        Some(end) => &text[..=end],
        None => "",
    };
    if complete.len() < text.len() {
        tracing::warn!(path = %path.display(), "ignoring torn final log line");
    }
    let mut lines = complete.lines();
    let header: LogHeader = match lines.next() {
        Some(line) => serde_json::from_str(line)?,
        None => return Err(KernelError::Corrupt(format!("{} has no header", path.display()))),
    };
    if header.format_version != FORMAT_VERSION {
        return Err(KernelError::UnsupportedVersion(header.format_version));
    }
    let entries = lines
        .filter(|line| !line.trim().is_empty())
        .map(serde_json::from_str)
        .collect::<std::result::Result<Vec<LogEntry>, _>>()?;
    Ok((header, entries))
}

/// Cuts a torn final line off the log so later appends start on a fresh line.
fn drop_torn_tail(path: &Path) -> io::Result<()> {
    let bytes = fs::read(path)?;
    let complete = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |end| end + 1);
    if complete < bytes.len() {
        OpenOptions::new().write(true).open(path)?.set_len(complete as u64)?;
    }
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let file = BufReader::new(File::open(path)?);
    let mut lines = file.lines();
    let header: SnapshotHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(KernelError::Corrupt(format!("{} has no header", path.display()))),
    };
    if header.format_version != FORMAT_VERSION {
        return Err(KernelError::UnsupportedVersion(header.format_version));
    }
    let records = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => Vec::new(),
    };
    Ok(Snapshot { header, records })
}

impl FileJournal {
    /// Opens (creating if needed) the journal files in `dir` and returns what
    /// they already contain.
    pub fn open(dir: &Path) -> Result<(Self, LoadedFiles)> {
        fs::create_dir_all(dir)?;
        let log_path = dir.join(LOG_FILE);
        let snap_path = dir.join(SNAPSHOT_FILE);

        let snapshot = if snap_path.exists() {
            Some(read_snapshot(&snap_path)?)
        } else {
            None
        };
        let mut loaded = LoadedFiles {
            snapshot,
            ..LoadedFiles::default()
        };
        if log_path.exists() {
            let (header, entries) = read_log(&log_path)?;
            if let Some(snap) = &loaded.snapshot {
                if header.generation > snap.header.generation {
                    return Err(KernelError::Corrupt(format!(
                        "log generation {} is ahead of snapshot generation {}",
                        header.generation, snap.header.generation
                    )));
                }
            } else if header.generation > 0 {
                return Err(KernelError::Corrupt("log was compacted but snapshot is missing".into()));
            }
            loaded.log_generation = header.generation;
            loaded.entries = entries;
            drop_torn_tail(&log_path)?;
        } else {
            let generation = loaded.snapshot.as_ref().map_or(0, |s| s.header.generation);
            let header = LogHeader {
                format_version: FORMAT_VERSION,
                generation,
            };
            write_atomically(&log_path, header_line(&header)?.as_bytes())?;
            loaded.log_generation = generation;
        }

        let log = OpenOptions::new().append(true).open(&log_path)?;
        Ok((
            FileJournal {
                dir: dir.to_path_buf(),
                log,
                generation: loaded.log_generation,
            },
            loaded,
        ))
    }

    pub fn log_path(&self) -> PathBuf {
        self.dir.join(LOG_FILE)
    }

    pub fn snapshot_path(&self) -> PathBuf {
        self.dir.join(SNAPSHOT_FILE)
    }
}

impl Journal for FileJournal {
    fn append(&mut self, entries: &[LogEntry]) -> io::Result<()> {
        let mut buf = String::new();
        for entry in entries {
            buf.push_str(&serde_json::to_string(entry).map_err(io::Error::other)?);
            buf.push('\n');
        }
        // One write per mutation keeps a multi-record credit update together.
        self.log.write_all(buf.as_bytes())?;
        self.log.flush()
    }

    fn compact(&mut self, snapshot: &Snapshot) -> io::Result<()> {
        let generation = self.generation + 1;
        let mut header = snapshot.header.clone();
        header.generation = generation;
        let mut contents = header_line(&header)?;
        contents.push_str(&serde_json::to_string(&snapshot.records).map_err(io::Error::other)?);
        contents.push('\n');
        write_atomically(&self.snapshot_path(), contents.as_bytes())?;

        let log_header = LogHeader {
            format_version: FORMAT_VERSION,
            generation,
        };
        let log_path = self.log_path();
        write_atomically(&log_path, header_line(&log_header)?.as_bytes())?;
        self.log = OpenOptions::new().append(true).open(&log_path)?;
        self.generation = generation;
        Ok(())
    }
}
