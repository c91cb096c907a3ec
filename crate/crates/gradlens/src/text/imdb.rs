use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::text::LabeledExample;

/// Load the movie-review dataset from the standard on-disk layout
/// `root/{train,test}/{pos,neg}/*.txt`.
///
/// Order is deterministic: within each split, negative reviews sorted by file
/// name, then positive ones. Files are read as UTF-8 with invalid bytes
/// replaced.
pub fn load_imdb(root: &Path) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let train = load_split(&root.join("train"))?;
    let test = load_split(&root.join("test"))?;
    Ok((train, test))
}

fn load_split(split_dir: &Path) -> Result<Vec<LabeledExample>> {
    let mut examples = Vec::new();
    for (sub, label) in [("neg", 0u8), ("pos", 1u8)] {
        let dir = split_dir.join(sub);
        if !dir.is_dir() {
            return Err(Error::MissingDirectory(dir));
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|source| Error::Io {
                path: dir.clone(),
                source,
            })?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "txt"))
            .collect();
        paths.sort_by_key(|p| p.file_name().map(|n| n.to_owned()));
        for path in paths {
            let bytes = fs::read(&path).map_err(|source| Error::UnreadableFile {
                path: path.clone(),
                source,
            })?;
            examples.push(LabeledExample {
                text: String::from_utf8_lossy(&bytes).into_owned(),
                label,
            });
        }
    }
    Ok(examples)
}
