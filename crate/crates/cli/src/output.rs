//! Output files. Every file may start with a `# generated_at=` line, which
//! is the only content that differs between identical runs.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutputOptions {
    pub dir: PathBuf,
    pub timestamp: bool,
}

impl OutputOptions {
    pub fn new(dir: impl Into<PathBuf>, timestamp: bool) -> Self {
        Self {
            dir: dir.into(),
            timestamp,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `content` to `dir/name`, creating the directory if needed.
    pub fn write(&self, name: &str, content: &str) -> Result<PathBuf> {
        std::fs::create_dir_all(&self.dir)
            .with_context(|| format!("creating {}", self.dir.display()))?;
        let path = self.path(name);
        let mut text = String::new();
        if self.timestamp {
            text.push_str(&timestamp_line());
        }
        text.push_str(content);
        write_file(&path, &text)?;
        Ok(path)
    }
}

pub fn timestamp_line() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    format!("# generated_at={secs}\n")
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Header line plus one line per row.
pub fn csv(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

/// Drops a leading `# generated_at=` line, for comparing outputs of two runs.
pub fn strip_timestamp(text: &str) -> &str {
    if text.starts_with("# generated_at=") {
        text.split_once('\n').map_or("", |(_, rest)| rest)
    } else {
        text
    }
}
