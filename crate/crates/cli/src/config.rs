//! JSON configuration with dotted-key overrides.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::CliError;

/// Splits `a.b.c=value`. The value is read as JSON when it parses, otherwise
/// as a plain string.
pub fn parse_override(arg: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = arg
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override '{arg}' is not of the form key=value")))?;
    let path: Vec<String> = key.split('.').map(str::to_string).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("override '{arg}' has an empty key segment")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((path, value))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) {
    let mut cur = root;
    for key in &path[..path.len() - 1] {
        if !cur.is_object() {
            *cur = Value::Object(Map::new());
        }
        cur = cur.as_object_mut().expect("object").entry(key.clone()).or_insert(Value::Object(Map::new()));
    }
    if !cur.is_object() {
        *cur = Value::Object(Map::new());
    }
    cur.as_object_mut().expect("object").insert(path[path.len() - 1].clone(), value);
}

/// Builds a config from `defaults`, then the optional file contents, then
/// the overrides in order. Unknown keys are rejected by the target type.
pub fn build<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&str>,
    overrides: &[String],
) -> Result<T, CliError> {
    let mut value = serde_json::to_value(defaults).expect("config serializes");
    if let Some(text) = file {
        let patch: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config file: {e}")))?;
        if !patch.is_object() {
            return Err(CliError::Config("config file must hold a JSON object".into()));
        }
        merge(&mut value, patch);
    }
    for o in overrides {
        let (path, v) = parse_override(o)?;
        set_path(&mut value, &path, v);
    }
    serde_json::from_value(value).map_err(|e| CliError::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use symdyn::RunConfig;

    #[test]
    fn overrides_apply_in_order() {
        let cfg: RunConfig = build(
            &RunConfig::default(),
            Some(r#"{"epochs": 3, "sac": {"lr": 0.01}}"#),
            &["sac.hidden=[4,4]".into(), "epochs=5".into(), "env=reacher".into()],
        )
        .unwrap();
        assert_eq!(cfg.epochs, 5);
        assert_eq!(cfg.sac.lr, 0.01);
        assert_eq!(cfg.sac.hidden, vec![4, 4]);
        assert_eq!(cfg.sac.batch_size, RunConfig::default().sac.batch_size);
        assert_eq!(cfg.env, symdyn::EnvKind::Reacher);
        // nested defaults come from the run config, not the nested type
        assert_eq!(cfg.sr, RunConfig::default().sr);
    }

    #[test]
    fn bad_keys_and_values_are_config_errors() {
        let d = RunConfig::default();
        assert!(matches!(build(&d, None, &["mbpo.k=2".into()]), Err(CliError::Config(_))));
        assert!(matches!(build(&d, None, &["epochs=many".into()]), Err(CliError::Config(_))));
        assert!(matches!(build(&d, None, &["env=mujoco".into()]), Err(CliError::Config(_))));
        assert!(matches!(build(&d, None, &["epochs".into()]), Err(CliError::Usage(_))));
        assert!(matches!(build(&d, Some("[1]"), &[]), Err(CliError::Config(_))));
    }
}
