//! Run directories and dataset loading shared by the commands.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dfenet::data::{list_subjects, load_volume, preprocess, Volume};
use dfenet::train::EventLog;
use serde_json::json;

pub struct RunDir {
    pub path: PathBuf,
    pub log: EventLog,
}

impl RunDir {
    /// Creates `<root>/<timestamp>-<command>/`, writes `config_text` to its
    /// `config` file and opens `events.log`.
    pub fn create(root: &Path, command: &str, config_text: &str, verbose: bool) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let mut path = root.join(format!("{stamp}-{command}"));
        let mut n = 1;
        while path.exists() {
            n += 1;
            path = root.join(format!("{stamp}-{command}-{n}"));
        }
        std::fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        std::fs::write(path.join("config"), config_text).context("writing config echo")?;
        let events = path.join("events.log");
        let file = File::create(&events).with_context(|| format!("creating {}", events.display()))?;
        let log = EventLog::to_writer(file);
        if verbose {
            log.add_sink(std::io::stderr());
        }
        log.emit("command", json!({"command": command, "run_dir": path}));
        Ok(Self { path, log })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let p = self.file(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }
}

/// Loads and preprocesses every subject under `root`.
pub fn load_dataset(root: &Path, target_size: usize, log: &EventLog) -> Result<Vec<Volume>> {
    let dirs = list_subjects(root)?;
    anyhow::ensure!(!dirs.is_empty(), "no subject directories under {}", root.display());
    let mut volumes = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let raw = load_volume(&dir)?;
        let pre = preprocess(&raw, target_size)?;
        for w in &pre.warnings {
            eprintln!("warning: {w}");
            log.emit("warning", json!({"subject": raw.subject_id, "message": w}));
        }
        volumes.push(pre.volume);
    }
    log.emit("dataset", json!({"root": root, "subjects": volumes.len(), "target_size": target_size}));
    Ok(volumes)
}

pub fn subject_ids(volumes: &[Volume]) -> Vec<String> {
    volumes.iter().map(|v| v.subject_id.clone()).collect()
}
