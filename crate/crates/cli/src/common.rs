//! Flags shared by every subcommand, the config-file layer, and run
//! bookkeeping: output directory guard, resolved-config echo, logging.
//!
//! Resolution order for every knob is flag, then config file, then the
//! built-in default. Machine outputs never carry timestamps; log lines put
//! the timestamp in a bracketed prefix so two identical runs differ only
//! inside the brackets.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use padkit::dataio::Split;
use padkit::{Error, Result};
use serde::Deserialize;

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// Master seed for every random stream in the run.
    #[arg(long)]
    pub seed: Option<u64>,

    /// JSON config file; explicit flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Directory the run writes its artifacts into.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

/// Every knob a config file may set, across all subcommands; each command
/// reads the keys it understands and ignores the rest.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    // Corpus generation.
    pub subjects: Option<usize>,
    pub per_subject: Option<usize>,
    pub synthetic: Option<usize>,
    pub attacks_per_species: Option<usize>,
    pub species: Option<Vec<String>>,
    pub height: Option<usize>,
    pub width: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub warp_amplitude: Option<f64>,
    pub modulation_depth: Option<f64>,
    pub corruption_strength: Option<f64>,
    pub live_train: Option<f64>,
    pub holdout_val: Option<f64>,
    pub synthetic_train: Option<f64>,
    // Training and sweeping.
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub lambda: Option<f64>,
    pub scale: Option<f64>,
    pub margin: Option<f64>,
    pub alpha: Option<f64>,
    pub activation: Option<String>,
    pub negative_slope: Option<f64>,
    pub grid: Option<Vec<f64>>,
    // Evaluation.
    pub threshold: Option<f64>,
    pub bpcer_at: Option<Vec<f64>>,
    pub split: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| {
                    Error::Usage(format!("config file {}: {e}", path.display()))
                })
            }
        }
    }
}

/// Prints one log line with the wall-clock timestamp in a bracketed prefix.
pub fn log(msg: &str) {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    println!("[{}.{:03}] {msg}", now.as_secs(), now.subsec_millis());
}

/// Returns the output directory, created if needed. A non-empty existing
/// directory is refused unless `force` is set.
pub fn prepare_out_dir(out: Option<&Path>, force: bool) -> Result<PathBuf> {
    let out = out.ok_or_else(|| Error::Usage("this command needs --out".into()))?;
    if out.exists() {
        let mut entries = std::fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() && !force {
            return Err(Error::Usage(format!(
                "output directory {} is not empty; pass --force to write into it",
                out.display()
            )));
        }
    } else {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    Ok(out.to_path_buf())
}

/// Serializes the resolved configuration (sorted keys), writes it to
/// `config.json` in the output directory when one exists, and echoes it on
/// a log line. Every command calls this before doing any real work.
pub fn echo_config(
    command: &str,
    out: Option<&Path>,
    entries: BTreeMap<String, serde_json::Value>,
) -> Result<()> {
    let mut map = serde_json::Map::new();
    map.insert("command".into(), serde_json::Value::String(command.into()));
    for (k, v) in entries {
        map.insert(k, v);
    }
    let text = serde_json::Value::Object(map).to_string();
    log(&format!("config {text}"));
    if let Some(out) = out {
        write_text(&out.join("config.json"), &format!("{text}\n"))?;
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Data root for a manifest: record paths are relative to its directory.
pub fn manifest_root(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn parse_split(name: &str) -> Result<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(Error::Usage(format!(
            "unknown split \"{other}\"; expected train, val, or test"
        ))),
    }
}

/// Shorthand for building the resolved-config map.
pub fn value_of<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("config values serialize")
}
