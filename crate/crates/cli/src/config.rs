//! `key=value` config files, spliced into argv right after the subcommand so
//! that explicit flags, which come later, win.

use std::path::Path;

use anyhow::{bail, Context, Result};

const GLOBAL_WITH_VALUE: [&str; 2] = ["--config", "--threads"];

pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: `{raw}` is not key=value", i + 1);
        };
        let key = k.trim().trim_start_matches("--");
        if key.is_empty() || key == "config" {
            bail!("config line {}: invalid key `{}`", i + 1, k.trim());
        }
        out.push((key.to_owned(), v.trim().to_owned()));
    }
    Ok(out)
}

/// Position of the subcommand token in `argv`, skipping global flags.
fn subcommand_index(argv: &[String]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let tok = argv[i].as_str();
        if GLOBAL_WITH_VALUE.contains(&tok) {
            i += 2;
        } else if tok.starts_with('-') {
            i += 1;
        } else {
            return Some(i);
        }
    }
    None
}

/// Value of `--config` anywhere on the command line.
pub fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter().skip(1);
    while let Some(tok) = it.next() {
        if tok == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = tok.strip_prefix("--config=") {
            return Some(v.to_owned());
        }
    }
    None
}

/// Returns argv with the config file's flags inserted and `--config` removed.
pub fn merge(argv: &[String], path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let pairs = parse_config(&text)?;
    let mut stripped = Vec::with_capacity(argv.len());
    let mut it = argv.iter();
    while let Some(tok) = it.next() {
        if tok == "--config" {
            it.next();
        } else if !tok.starts_with("--config=") {
            stripped.push(tok.clone());
        }
    }
    let Some(at) = subcommand_index(&stripped) else {
        return Ok(stripped);
    };
    let mut injected = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => injected.push(format!("--{k}")),
            "false" => {}
            _ => {
                injected.push(format!("--{k}"));
                injected.push(v);
            }
        }
    }
    let mut out = stripped[..=at].to_vec();
    out.extend(injected);
    out.extend_from_slice(&stripped[at + 1..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn argv(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn config_flags_land_after_subcommand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "# sampler\niter = 500\nno-traces=true\nthin=false\n").unwrap();
        let a = argv(&format!("mvherit --threads 2 --config {} fit --iter 900", path.display()));
        let merged = merge(&a, &path).unwrap();
        assert_eq!(merged, argv("mvherit --threads 2 fit --iter 500 --no-traces --iter 900"));
    }

    #[test]
    fn rejects_lines_without_equals() {
        assert!(parse_config("iter 500").is_err());
        assert!(parse_config("config=x").is_err());
    }

    #[test]
    fn finds_config_path() {
        assert_eq!(config_path(&argv("m fit --config=a.cfg")), Some("a.cfg".into()));
        assert_eq!(config_path(&argv("m --config b.cfg herit")), Some("b.cfg".into()));
        assert_eq!(config_path(&argv("m herit")), None);
    }
}
