//! Config file loading and `--section.key value` overrides.

use std::path::Path;

use anyhow::{anyhow, Context, Result};
use stk_core::pipeline::PipelineConfig;
use stk_core::Error;
use toml::{Table, Value};

/// `(dotted key, raw value)` pairs taken from the command line.
pub type Overrides = Vec<(String, String)>;

/// Splits `--a.b value` pairs out of `args`; everything else goes to clap.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Overrides)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--") {
            Some(key) if key.contains('.') && !key.starts_with('.') => {
                let (key, value) = match key.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = it.next().ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                        (key.to_string(), v)
                    }
                };
                overrides.push((key, value));
            }
            _ => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("nonempty key");
    let mut table = root;
    for s in sections {
        table = table
            .entry(s.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {s} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Reads `path` (or defaults) and applies overrides in order.
pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<PipelineConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => anyhow!(Error::MissingArtifact(p.to_path_buf())),
                _ => anyhow!(e).context(format!("reading {}", p.display())),
            })?;
            text.parse::<Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for (k, v) in overrides {
        set_path(&mut table, k, parse_value(v))?;
    }
    let cfg: PipelineConfig = Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn to_toml(cfg: &PipelineConfig) -> Result<String> {
    toml::to_string(cfg).context("serializing config")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) = extract_overrides(s(&["stk", "eval", "--rules.max_events", "4", "--lambda", "0"])).unwrap();
        assert_eq!(rest, s(&["stk", "eval", "--lambda", "0"]));
        assert_eq!(ov, vec![("rules.max_events".to_string(), "4".to_string())]);
        let (_, ov) = extract_overrides(s(&["--inference.lambda=0.5"])).unwrap();
        assert_eq!(ov[0].1, "0.5");
        assert!(extract_overrides(s(&["--a.b"])).is_err());
    }

    #[test]
    fn overrides_apply_with_types() {
        let ov = vec![
            ("rules.max_events".to_string(), "4".to_string()),
            ("inference.lambda".to_string(), "0.25".to_string()),
            ("data.train".to_string(), "x/train.txt".to_string()),
            ("ablation.disable_st_moe".to_string(), "true".to_string()),
        ];
        let cfg = load(None, &ov).unwrap();
        assert_eq!(cfg.rules.max_events, 4);
        assert_eq!(cfg.inference.lambda, 0.25);
        assert_eq!(cfg.data.train.as_deref(), Some(Path::new("x/train.txt")));
        assert!(cfg.ablation.disable_st_moe);
        let back = load(None, &[]).unwrap();
        assert_eq!(back, PipelineConfig::default());
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let err = load(None, &[("rules.bogus".into(), "1".into())]).unwrap_err();
        assert!(matches!(err.downcast_ref::<Error>(), Some(Error::Config(_))));
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = PipelineConfig::default();
        cfg.inference.lambda = 0.3;
        let text = to_toml(&cfg).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        assert_eq!(load(Some(f.path()), &[]).unwrap(), cfg);
    }
}
