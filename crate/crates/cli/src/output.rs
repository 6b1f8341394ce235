use serde::Serialize;
use serde_json::{json, Value};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Writes files into the output directory and remembers them for the manifest.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<String>,
}

impl Outputs {
    pub fn new(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Outputs { dir: dir.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> std::io::Result<PathBuf> {
        let path = self.dir.join(name);
        write_atomic(&path, bytes)?;
        self.written.push(name.to_string());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> std::io::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(std::io::Error::other)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// `<subcommand>.manifest.json`, written last.
    pub fn finish(
        mut self,
        subcommand: &str,
        config: Value,
        seed: Option<u64>,
        threads: Option<usize>,
    ) -> std::io::Result<Value> {
        let manifest = json!({
            "schema": 1,
            "tool": "spinscape",
            "version": env!("CARGO_PKG_VERSION"),
            "subcommand": subcommand,
            "config": config,
            "seed": seed,
            "threads": threads,
            "outputs": self.written,
        });
        let name = format!("{subcommand}.manifest.json");
        self.write_json(&name, &manifest)?;
        Ok(manifest)
    }
}

/// Write to a temporary sibling and rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| std::io::Error::other("output path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
