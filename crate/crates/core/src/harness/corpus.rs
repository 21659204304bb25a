use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// 256 byte values plus two specials.
pub const VOCAB_SIZE: usize = 258;
pub const BOS: u32 = 256;
pub const EOS: u32 = 257;

pub fn byte_tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Bytes of `ids`; special and out-of-range ids are skipped.
pub fn detokenize(ids: &[u32]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}

pub fn detokenize_text(ids: &[u32]) -> Result<String> {
    String::from_utf8(detokenize(ids))
        .map_err(|e| Error::InvalidValue(format!("ids do not decode to UTF-8: {e}")))
}

/// One token sequence and where it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    /// File name, with `:line` for id files.
    pub name: String,
    pub ids: Vec<u32>,
}

/// Unsigned decimal ids separated by whitespace or commas.
pub fn parse_id_line(line: &str) -> Result<Vec<u32>> {
    line.split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u32>()
                .map_err(|_| Error::InvalidValue(format!("'{s}' is not an unsigned integer id")))
        })
        .collect()
}

fn load_file(path: &Path, out: &mut Vec<Document>) -> Result<()> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    if path.extension().is_some_and(|e| e == "ids") {
        let text = std::str::from_utf8(&bytes).map_err(|_| {
            Error::InvalidValue(format!("{}: id file is not UTF-8", path.display()))
        })?;
        for (i, line) in text.lines().enumerate() {
            let ids = parse_id_line(line)
                .map_err(|e| Error::InvalidValue(format!("{}:{}: {e}", path.display(), i + 1)))?;
            if !ids.is_empty() {
                out.push(Document {
                    name: format!("{name}:{}", i + 1),
                    ids,
                });
            }
        }
    } else {
        out.push(Document {
            name,
            ids: bytes.into_iter().map(u32::from).collect(),
        });
    }
    Ok(())
}

/// Loads a text file, an id file (`*.ids`, one sequence per line) or every regular file
/// of a directory, in file-name order.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>> {
    let meta = std::fs::metadata(path).map_err(|e| Error::file(path, e))?;
    let mut docs = Vec::new();
    if meta.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::file(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::file(path, err)))
            .collect::<Result<_>>()?;
        files.retain(|p| p.is_file());
        files.sort();
        for f in files {
            load_file(&f, &mut docs)?;
        }
    } else {
        load_file(path, &mut docs)?;
    }
    if docs.is_empty() {
        return Err(Error::NoInput(format!(
            "{} holds no documents",
            path.display()
        )));
    }
    Ok(docs)
}

/// Up to `n` documents drawn without replacement, in a seed-determined order.
pub fn sample_documents(docs: &[Document], n: Option<usize>, seed: u64) -> Vec<Document> {
    let mut order: Vec<usize> = (0..docs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(n.unwrap_or(docs.len()));
    order.into_iter().map(|i| docs[i].clone()).collect()
}
