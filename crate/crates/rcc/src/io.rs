//! Corpus files, passkey datasets and report files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use rcc_core::data::{CorpusKind, PasskeySample, QaItem};
use serde::{Deserialize, Serialize};

/// How the ids of a corpus file map to text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamMode {
    Byte,
    CharVocab,
    /// Abstract ids with no text form.
    Ids,
}

/// JSON sidecar written next to a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusMeta {
    pub vocab: usize,
    pub mode: StreamMode,
    /// Alphabet of a char-vocab stream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alphabet: Option<String>,
    pub size: usize,
    pub generator: CorpusKind,
    pub seed: u64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Token ids as little-endian `u32` plus a `<path>.json` sidecar.
pub fn write_corpus(path: &Path, tokens: &[u32], meta: &CorpusMeta) -> Result<()> {
    ensure!(meta.size == tokens.len(), "sidecar size disagrees with the token count");
    let mut bytes = Vec::with_capacity(tokens.len() * 4);
    for t in tokens {
        bytes.extend_from_slice(&t.to_le_bytes());
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<(Vec<u32>, CorpusMeta)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    ensure!(bytes.len() % 4 == 0, "{} is not a whole number of u32 tokens", path.display());
    let meta: CorpusMeta = serde_json::from_slice(
        &fs::read(sidecar_path(path)).with_context(|| format!("reading sidecar of {}", path.display()))?,
    )?;
    let tokens: Vec<u32> = bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
    ensure!(tokens.len() == meta.size, "sidecar says {} tokens, file has {}", meta.size, tokens.len());
    if let Some(bad) = tokens.iter().find(|&&t| t as usize >= meta.vocab) {
        anyhow::bail!("token {bad} outside the vocabulary of {}", meta.vocab);
    }
    Ok((tokens, meta))
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), i + 1))?);
    }
    Ok(out)
}

pub fn read_passkeys(path: &Path) -> Result<Vec<PasskeySample>> {
    read_jsonl(path)
}

pub fn read_qa(path: &Path) -> Result<Vec<QaItem>> {
    read_jsonl(path)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Plain CSV with a header row; fields are written as given.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        writeln!(w, "{}", r.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dotted path such as `breakdown.baseline_kv` out of a JSON report.
pub fn json_field<'a>(value: &'a serde_json::Value, path: &str) -> Option<&'a serde_json::Value> {
    path.split('.').try_fold(value, |v, key| match v {
        serde_json::Value::Array(a) => a.get(key.parse::<usize>().ok()?),
        _ => v.get(key),
    })
}
