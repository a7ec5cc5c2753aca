//! Run configuration: defaults, then a JSON file, then `--set key=value`
//! overrides, then the dedicated flags.

use std::path::Path;

use serde_json::Value;

use propscale::harness::RunConfig;
use propscale::model::Mode;

use crate::error::CliError;

/// File name of the resolved configuration in every output directory.
pub const RESOLVED: &str = "config.json";

/// Flag overrides applied after the file and `--set` pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub no_gcn: bool,
    pub window: Option<usize>,
    pub horizon: Option<usize>,
}

/// Recursively merges `patch` into `base`; keys absent from `base` are rejected
/// so typos do not pass silently.
fn merge(base: &mut Value, patch: &Value, path: &str) -> Result<(), CliError> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                let slot = b.get_mut(k).ok_or_else(|| CliError::config(format!("unknown key `{here}`")))?;
                if slot.is_object() && v.is_object() {
                    merge(slot, v, &here)?;
                } else {
                    *slot = v.clone();
                }
            }
            Ok(())
        }
        (b, p) => {
            *b = p.clone();
            Ok(())
        }
    }
}

/// `a.b.c=value`; the value is read as JSON when it parses, else as a string.
pub fn apply_set(tree: &mut Value, pair: &str) -> Result<(), CliError> {
    let (key, raw) =
        pair.split_once('=').ok_or_else(|| CliError::config(format!("`{pair}` is not of the form key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = tree;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| CliError::config(format!("unknown key `{key}`")))?;
    }
    *node = value;
    Ok(())
}

pub fn resolve(file: Option<&Path>, sets: &[String], flags: &Overrides) -> Result<RunConfig, CliError> {
    let mut tree = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::from(e).with_context(&format!("config {}", path.display())))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        merge(&mut tree, &patch, "")?;
    }
    for s in sets {
        apply_set(&mut tree, s)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(tree).map_err(|e| CliError::config(e.to_string()))?;
    if let Some(seed) = flags.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(mode) = flags.mode {
        cfg.train.mode = mode;
    }
    if flags.no_gcn {
        cfg.train.gcn_enabled = false;
    }
    if let Some(w) = flags.window {
        cfg.data.window = w;
        cfg.model.window = w;
    }
    if let Some(h) = flags.horizon {
        cfg.data.horizon = h;
        cfg.model.horizon = h;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_resolved(cfg: &RunConfig, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(RESOLVED), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        assert_eq!(resolve(None, &[], &Overrides::default()).unwrap(), RunConfig::default());
    }

    #[test]
    fn set_parses_json_and_nested_keys() {
        let sets = vec!["train.epochs=3".to_string(), "model.link=\"softplus\"".to_string()];
        let cfg = resolve(None, &sets, &Overrides::default()).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.model.link, propscale::model::Link::Softplus);
        let bare = resolve(None, &["model.link=softplus".to_string()], &Overrides::default()).unwrap();
        assert_eq!(bare.model.link, propscale::model::Link::Softplus);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(resolve(None, &["train.epoch=3".into()], &Overrides::default()).is_err());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train":{"epochz":1}}"#).unwrap();
        assert!(resolve(Some(&p), &[], &Overrides::default()).is_err());
    }

    #[test]
    fn flags_win_over_file_and_keep_windows_in_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"train":{"epochs":2,"seed":9},"sim":{"n_items":12}}"#).unwrap();
        let flags = Overrides { seed: Some(4), mode: Some(Mode::P2P), no_gcn: true, window: Some(5), horizon: Some(2) };
        let cfg = resolve(Some(&p), &[], &flags).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.seed, cfg.sim.rng_seed, cfg.sim.n_items), (2, 4, 4, 12));
        assert_eq!((cfg.train.mode, cfg.train.gcn_enabled), (Mode::P2P, false));
        assert_eq!((cfg.data.window, cfg.model.window, cfg.data.horizon, cfg.model.horizon), (5, 5, 2, 2));
    }

    #[test]
    fn resolved_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = resolve(None, &["train.epochs=7".into()], &Overrides::default()).unwrap();
        write_resolved(&cfg, dir.path()).unwrap();
        let back = resolve(Some(&dir.path().join(RESOLVED)), &[], &Overrides::default()).unwrap();
        assert_eq!(back, cfg);
    }
}
