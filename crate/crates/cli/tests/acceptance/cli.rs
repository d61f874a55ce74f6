use std::path::{Path, PathBuf};
use std::process::Command;

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_difftrack"))
}

/// Runs a subcommand and returns its exit code. Progress goes to `log`.
pub fn status(args: &[String], log: &Path) -> Result<i32, String> {
    let file = std::fs::File::create(log).map_err(|e| e.to_string())?;
    let err = file.try_clone().map_err(|e| e.to_string())?;
    let st = Command::new(bin()).args(args).stdout(file).stderr(err).status().map_err(|e| e.to_string())?;
    Ok(st.code().unwrap_or(-1))
}

/// Runs a subcommand that must succeed.
pub fn run(args: &[String], log: &Path) -> Result<(), String> {
    match status(args, log)? {
        0 => Ok(()),
        code => {
            let tail = std::fs::read_to_string(log).unwrap_or_default();
            let tail: Vec<&str> = tail.lines().rev().take(3).collect();
            Err(format!("`difftrack {}` exited with {code}: {}", args.join(" "), tail.join(" | ")))
        }
    }
}

/// Builds an argument vector from `&str`-like pieces.
#[macro_export]
macro_rules! args {
    ($($a:expr),* $(,)?) => { vec![$($a.to_string()),*] };
}

pub fn p(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_json(path: &Path) -> Result<serde_json::Value, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
}

pub fn num(v: &serde_json::Value, key: &str) -> Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("missing number '{key}'"))
}
