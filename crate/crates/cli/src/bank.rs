//! Bank directories: `<index>_<name>.mtm`, ordered by index.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use mergemix::tensor_store::read_checkpoint;
use mergemix::{Error, ModelBank};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankEntry {
    pub index: u64,
    pub name: String,
    pub path: PathBuf,
}

fn parse_entry_name(stem: &str) -> Option<(u64, String)> {
    let (idx, name) = stem.split_once('_')?;
    if name.is_empty() {
        return None;
    }
    Some((idx.parse().ok()?, name.to_string()))
}

/// Lists bank files in index order. Non-`.mtm` files are ignored.
pub fn list_bank(dir: &Path) -> anyhow::Result<Vec<BankEntry>> {
    let rd = fs::read_dir(dir).with_context(|| format!("reading bank directory {}", dir.display()))?;
    let mut entries = Vec::new();
    for item in rd {
        let path = item?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("mtm") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((index, name)) = parse_entry_name(stem) else {
            return Err(Error::InvalidConfig(format!("bank file {} is not <index>_<name>.mtm", path.display())).into());
        };
        entries.push(BankEntry { index, name, path });
    }
    entries.sort_by_key(|e| e.index);
    if let Some(w) = entries.windows(2).find(|w| w[0].index == w[1].index) {
        return Err(Error::InvalidConfig(format!("duplicate bank index {}", w[0].index)).into());
    }
    if entries.is_empty() {
        bail!(Error::EmptyBank);
    }
    Ok(entries)
}

pub fn load_bank(entries: &[BankEntry]) -> anyhow::Result<ModelBank> {
    let models = entries
        .iter()
        .map(|e| read_checkpoint(&e.path).with_context(|| format!("loading {}", e.path.display())))
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(ModelBank::new(models, entries.iter().map(|e| e.name.clone()).collect())?)
}

pub fn entry_file_name(index: usize, name: &str) -> String {
    format!("{index}_{name}.mtm")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_names() {
        assert_eq!(parse_entry_name("3_cars"), Some((3, "cars".into())));
        assert_eq!(parse_entry_name("10_a_b"), Some((10, "a_b".into())));
        assert_eq!(parse_entry_name("x_cars"), None);
        assert_eq!(parse_entry_name("3_"), None);
        assert_eq!(parse_entry_name("cars"), None);
        assert_eq!(entry_file_name(2, "D2"), "2_D2.mtm");
    }

    #[test]
    fn listing_orders_numerically() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["10_b.mtm", "2_a.mtm", "notes.txt"] {
            fs::write(dir.path().join(f), b"").unwrap();
        }
        let names: Vec<String> = list_bank(dir.path()).unwrap().into_iter().map(|e| e.name).collect();
        assert_eq!(names, ["a", "b"]);

        fs::write(dir.path().join("2_c.mtm"), b"").unwrap();
        assert!(list_bank(dir.path()).is_err());
        assert!(list_bank(tempfile::tempdir().unwrap().path()).is_err());
    }
}
