//! On-disk dataset bundle.
//!
//! A bundle is a directory of plain-text files:
//!
//! * `meta.json`: format version, preprocessing options, summary counts, warnings
//! * `catalog.tsv`: `index<TAB>item_id`
//! * `users.tsv`: `index<TAB>user_id`
//! * `sequences.tsv`: `user_index<TAB>space separated item indices`
//! * `counts.tsv`: `index<TAB>count` (occurrences over all sequences)
//!
//! Each `.tsv` starts with one header line. Output is a pure function of
//! the dataset, so identical inputs give byte-identical bundles.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetMeta, SequenceDataset};

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MetaFile {
    format_version: u32,
    users: usize,
    items: usize,
    actions: usize,
    #[serde(flatten)]
    meta: DatasetMeta,
}

pub fn save_bundle(ds: &SequenceDataset, dir: &Path) -> Result<(), DatasetError> {
    fs::create_dir_all(dir)?;
    let meta = MetaFile {
        format_version: BUNDLE_FORMAT_VERSION,
        users: ds.num_users(),
        items: ds.num_items(),
        actions: ds.num_actions(),
        meta: ds.meta.clone(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| DatasetError::Bundle(e.to_string()))?;
    fs::write(dir.join("meta.json"), json + "\n")?;

    let mut catalog = String::from("index\titem\n");
    for (i, item) in ds.items.iter().enumerate() {
        writeln!(catalog, "{i}\t{item}").unwrap();
    }
    fs::write(dir.join("catalog.tsv"), catalog)?;

    let mut users = String::from("index\tuser\n");
    for (u, user) in ds.users.iter().enumerate() {
        writeln!(users, "{u}\t{user}").unwrap();
    }
    fs::write(dir.join("users.tsv"), users)?;

    let mut seqs = String::from("user\titems\n");
    for (u, s) in ds.sequences.iter().enumerate() {
        let joined: Vec<String> = s.iter().map(|i| i.to_string()).collect();
        writeln!(seqs, "{u}\t{}", joined.join(" ")).unwrap();
    }
    fs::write(dir.join("sequences.tsv"), seqs)?;

    let mut counts = String::from("index\tcount\n");
    for (i, c) in ds.popularity.iter().enumerate() {
        writeln!(counts, "{i}\t{c}").unwrap();
    }
    fs::write(dir.join("counts.tsv"), counts)?;
    Ok(())
}

fn read_table(dir: &Path, name: &str) -> Result<Vec<(usize, String)>, DatasetError> {
    let text = fs::read_to_string(dir.join(name))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let (idx, rest) = line
            .split_once('\t')
            .ok_or_else(|| DatasetError::Bundle(format!("{name}:{}: missing tab", n + 1)))?;
        let idx: usize = idx
            .parse()
            .map_err(|_| DatasetError::Bundle(format!("{name}:{}: bad index `{idx}`", n + 1)))?;
        if idx != rows.len() {
            return Err(DatasetError::Bundle(format!("{name}:{}: index out of order", n + 1)));
        }
        rows.push((idx, rest.to_string()));
    }
    Ok(rows)
}

pub fn load_bundle(dir: &Path) -> Result<SequenceDataset, DatasetError> {
    let meta: MetaFile = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)
        .map_err(|e| DatasetError::Bundle(format!("meta.json: {e}")))?;
    if meta.format_version != BUNDLE_FORMAT_VERSION {
        return Err(DatasetError::Bundle(format!(
            "unsupported bundle version {}",
            meta.format_version
        )));
    }
    let items: Vec<String> = read_table(dir, "catalog.tsv")?.into_iter().map(|r| r.1).collect();
    let users: Vec<String> = read_table(dir, "users.tsv")?.into_iter().map(|r| r.1).collect();
    let mut sequences = Vec::new();
    for (u, row) in read_table(dir, "sequences.tsv")? {
        let seq = row
            .split_whitespace()
            .map(|t| match t.parse::<usize>() {
                Ok(i) if i < items.len() => Ok(i),
                _ => Err(DatasetError::Bundle(format!("sequences.tsv: user {u}: bad item `{t}`"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        sequences.push(seq);
    }
    let popularity = read_table(dir, "counts.tsv")?
        .into_iter()
        .map(|(i, c)| {
            c.parse::<u64>()
                .map_err(|_| DatasetError::Bundle(format!("counts.tsv: item {i}: bad count")))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let ds = SequenceDataset {
        items,
        users,
        sequences,
        popularity,
        meta: meta.meta,
    };
    if ds.num_users() != meta.users
        || ds.users.len() != ds.sequences.len()
        || ds.num_items() != meta.items
        || ds.popularity.len() != ds.num_items()
        || ds.num_actions() != meta.actions
    {
        return Err(DatasetError::Bundle("file contents disagree with meta.json".into()));
    }
    Ok(ds)
}
