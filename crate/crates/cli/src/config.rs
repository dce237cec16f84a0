//! Layered run configuration: built-in defaults, then the file named by
//! `SOFTOOD_CONFIG`, then `--config`, then command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use softood::eval::ExperimentConfig;
use toml::{Table, Value};

pub const ENV_VAR: &str = "SOFTOOD_CONFIG";

/// Recursively overlays `top` onto `base`. Tables merge key by key, except
/// tagged tables (those with a `kind` key), which replace wholesale so a
/// variant switch does not inherit the other variant's fields.
fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) if !t.contains_key("kind") => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    text.parse::<Table>()
        .with_context(|| format!("parsing config {}", path.display()))
}

/// Resolves the layered configuration. Unknown keys anywhere are errors.
pub fn resolve(env_file: Option<&Path>, file: Option<&Path>) -> Result<ExperimentConfig> {
    let mut tree = Table::try_from(ExperimentConfig::default()).context("serializing defaults")?;
    for path in [env_file, file].into_iter().flatten() {
        merge(&mut tree, read_table(path)?);
    }
    let cfg: ExperimentConfig = Value::Table(tree)
        .try_into()
        .context("invalid configuration")?;
    cfg.train.validate()?;
    cfg.oodgen.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use softood::cotrain::LabelScheme;
    use softood::eval::DatasetSource;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn defaults_without_files() {
        assert_eq!(resolve(None, None).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_tables_keep_other_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.toml", "[train]\nlabel_scheme = \"onehot\"\n");
        let cfg = resolve(None, Some(&p)).unwrap();
        assert_eq!(cfg.train.label_scheme, LabelScheme::Onehot);
        assert_eq!(cfg.train.lr_heads, ExperimentConfig::default().train.lr_heads);
    }

    #[test]
    fn file_overrides_env_file() {
        let dir = tempfile::tempdir().unwrap();
        let base = write(dir.path(), "base.toml", "n_seeds = 3\n[train]\nalpha = 0.2\n");
        let top = write(dir.path(), "top.toml", "n_seeds = 5\n");
        let cfg = resolve(Some(&base), Some(&top)).unwrap();
        assert_eq!(cfg.n_seeds, 5);
        assert_eq!(cfg.train.alpha, 0.2);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.toml", "[train]\nalhpa = 0.2\n");
        let err = format!("{:#}", resolve(None, Some(&p)).unwrap_err());
        assert!(err.contains("alhpa"), "{err}");
    }

    #[test]
    fn dataset_variant_switch_replaces_the_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "a.toml", "[dataset]\nkind = \"dir\"\npath = \"data\"\n");
        let cfg = resolve(None, Some(&p)).unwrap();
        assert_eq!(cfg.dataset, DatasetSource::Dir { path: "data".into() });
    }
}
