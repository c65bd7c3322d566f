//! On-disk layout of a kernel data directory.
//!
//! ```text
//! VERSION            layout version
//! config             flat `key = value` kernel config
//! kernel.id          identity stamped into exported bundles
//! LOCK               held exclusively while a command runs
//! experience.log     experience store journal (plus .snapshot after compaction)
//! commands.log       session, mailbox, agenda and memory commands, replayed on open
//! bundles/           default export location
//! ```
//!
//! The experience store is durable through its own journal. Everything else
//! is rebuilt by replaying `commands.log`, which only ever holds commands that
//! succeeded.

use std::collections::hash_map::RandomState;
use std::fs::{self, File, OpenOptions};
use std::hash::BuildHasher;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use synkernel::{Command, ExperienceStore, Kernel, KernelConfig, KernelError, Reply, TrigramProvider};

use crate::CliError;

pub const LAYOUT_VERSION: &str = "1";
const COMMAND_LOG: &str = "commands.log";

#[derive(Serialize, Deserialize)]
struct LoggedCommand {
    seq: u64,
    command: Command,
}

pub struct DataDir {
    root: PathBuf,
    // Held for the lifetime of the value; the OS lock drops with the file.
    _lock: File,
    next_seq: u64,
}

impl DataDir {
    /// Opens (creating if needed) the directory and takes its lock.
    pub fn open(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root.join("bundles"))?;
        let version_path = root.join("VERSION");
        match fs::read_to_string(&version_path) {
            Ok(v) if v.trim() == LAYOUT_VERSION => {}
            Ok(v) => {
                return Err(CliError::Domain(KernelError::UnsupportedVersion(
                    v.trim().parse().unwrap_or(0),
                )))
            }
            Err(_) => fs::write(&version_path, format!("{LAYOUT_VERSION}\n"))?,
        }
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(root.join("LOCK"))?;
        if lock.try_lock().is_err() {
            return Err(CliError::Busy(root.display().to_string()));
        }
        let id_path = root.join("kernel.id");
        if !id_path.exists() {
            let id = format!("k-{:016x}", RandomState::new().hash_one(root));
            fs::write(&id_path, format!("{id}\n"))?;
        }
        Ok(DataDir {
            root: root.to_path_buf(),
            _lock: lock,
            next_seq: 0,
        })
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config")
    }

    pub fn bundles_dir(&self) -> PathBuf {
        self.root.join("bundles")
    }

    pub fn kernel_id(&self) -> Result<String, CliError> {
        Ok(fs::read_to_string(self.root.join("kernel.id"))?.trim().to_string())
    }

    pub fn config(&self) -> Result<KernelConfig, CliError> {
        Ok(KernelConfig::load(Some(&self.config_path()))?)
    }

    pub fn save_config(&self, config: &KernelConfig) -> Result<(), CliError> {
        config.validate()?;
        fs::write(self.config_path(), config.to_kv_string())?;
        Ok(())
    }

    pub fn open_store(&self) -> Result<ExperienceStore, CliError> {
        Ok(ExperienceStore::open(&self.root, Arc::new(TrigramProvider::default()))?)
    }

    /// Loads the kernel: store from its journal, the rest from the command log.
    pub fn load_kernel(&mut self) -> Result<Kernel, CliError> {
        let mut kernel = Kernel::with_store(self.config()?, self.open_store()?)?.with_id(self.kernel_id()?);
        let path = self.root.join(COMMAND_LOG);
        let text = match fs::read_to_string(&path) {
            Ok(text) => text,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let logged: LoggedCommand = serde_json::from_str(line)
                .map_err(|e| KernelError::Corrupt(format!("{COMMAND_LOG} line {}: {e}", lineno + 1)))?;
            kernel.execute(logged.command).map_err(|e| {
                KernelError::Corrupt(format!("{COMMAND_LOG} seq {} no longer applies: {e}", logged.seq))
            })?;
            self.next_seq = logged.seq + 1;
        }
        Ok(kernel)
    }

    /// Runs a command and, if it succeeded and must be replayed later,
    /// appends it to the command log.
    pub fn run(&mut self, kernel: &mut Kernel, command: Command) -> Result<Reply, CliError> {
        let logged = (!command.touches_store() && command.is_mutation()).then(|| command.clone());
        let reply = kernel.execute(command)?;
        if let Some(command) = logged {
            let mut line = serde_json::to_string(&LoggedCommand {
                seq: self.next_seq,
                command,
            })?;
            line.push('\n');
            let mut log = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.root.join(COMMAND_LOG))?;
            log.write_all(line.as_bytes())?;
            log.sync_data()?;
            self.next_seq += 1;
        }
        Ok(reply)
    }
}
