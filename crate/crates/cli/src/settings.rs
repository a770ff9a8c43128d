//! Config resolution: profile defaults, then the TOML file, then flags.

use std::fs;
use std::path::Path;

use ddpmcd::config::{DataConfig, Profile, RunConfig};
use ddpmcd::Error;
use toml::{Table, Value};

use crate::args::GlobalArgs;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn apply_override(table: &mut Table, assignment: &str) -> Result<(), Error> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not KEY=VALUE")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in path {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override {key}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn to_toml(cfg: &RunConfig) -> Result<String, Error> {
    toml::to_string_pretty(cfg).map_err(|e| config_err(format!("cannot serialize config: {e}")))
}

#[cfg(test)]
pub fn from_toml(text: &str) -> Result<RunConfig, Error> {
    toml::from_str(text).map_err(|e| config_err(e.to_string()))
}

/// Profile defaults overlaid with the file, `--set` overrides, then the
/// dedicated flags.
pub fn resolve(g: &GlobalArgs) -> Result<RunConfig, Error> {
    let file: Table = match &g.config {
        Some(path) => read_table(path)?,
        None => Table::new(),
    };
    let profile = match (g.profile, file.get("profile").and_then(Value::as_str)) {
        (Some(p), _) => p.into(),
        (None, Some("full")) => Profile::Full,
        (None, Some("desk") | None) => Profile::Desk,
        (None, Some(other)) => return Err(config_err(format!("unknown profile {other:?}"))),
    };
    let mut table = Table::try_from(RunConfig::for_profile(profile))
        .map_err(|e| config_err(format!("cannot serialize profile: {e}")))?;
    merge(&mut table, file);
    table.insert("profile".into(), Value::try_from(profile).expect("profile serializes"));
    for o in &g.overrides {
        apply_override(&mut table, o)?;
    }
    let mut cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(root) = &g.data_root {
        cfg.data = DataConfig::Manifest { root: root.clone() };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_table(path: &Path) -> Result<Table, Error> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// `"50;100;50,100,400"` → `[[50], [100], [50, 100, 400]]`.
pub fn parse_tsets(s: &str) -> Result<Vec<Vec<usize>>, Error> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(parse_timesteps)
        .collect()
}

pub fn parse_timesteps(s: &str) -> Result<Vec<usize>, Error> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| config_err(format!("bad timestep {t:?} in {s:?}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::Parser;

    fn globals(args: &[&str]) -> GlobalArgs {
        let mut v = vec!["ddpmcd"];
        v.extend_from_slice(args);
        v.push("make-dataset");
        crate::args::Cli::parse_from(v).global
    }

    #[test]
    fn profile_round_trips_through_toml() {
        for cfg in [RunConfig::desk(), RunConfig::full()] {
            assert_eq!(from_toml(&to_toml(&cfg).unwrap()).unwrap(), cfg);
        }
    }

    #[test]
    fn file_then_flags_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "seed = 7\n[head]\nepochs = 3\nlr = 0.01\n").unwrap();
        let p = path.to_str().unwrap();
        let cfg = resolve(&globals(&["--config", p, "--set", "head.epochs=5", "--seed", "9"])).unwrap();
        assert_eq!(cfg.head.epochs, 5);
        assert_eq!(cfg.head.lr, 0.01);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.head.batch_size, RunConfig::desk().head.batch_size);
    }

    #[test]
    fn unknown_key_is_rejected() {
        assert!(matches!(resolve(&globals(&["--set", "head.epoch=5"])), Err(Error::Config(_))));
    }

    #[test]
    fn tset_parsing() {
        assert_eq!(parse_tsets("50;50,100").unwrap(), vec![vec![50], vec![50, 100]]);
        assert!(parse_tsets("50;x").is_err());
    }
}
