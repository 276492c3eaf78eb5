use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CorpusError, DatasetManifest, ReactionPair, SyntheticDataset};
use crate::plan::Stock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReactionFormat {
    /// `product<TAB>reactants`, no header.
    #[default]
    Tsv,
    /// `product,reactants`, no header.
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionsReport {
    pub pairs: Vec<ReactionPair>,
    /// Lines dropped for failing tokenization or lacking two fields.
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StockReport {
    pub raw: usize,
    pub unique: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_reactions(path: impl AsRef<Path>, format: ReactionFormat) -> Result<ReactionsReport, CorpusError> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(io_err(path))?;
    let delimiter = match format {
        ReactionFormat::Tsv => b'\t',
        ReactionFormat::Csv => b',',
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(false)
        .flexible(true)
        .quoting(false)
        .from_reader(text.as_slice());
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for record in reader.records() {
        let record = record.map_err(|source| CorpusError::Csv {
            path: path.display().to_string(),
            source,
        })?;
        let fields: Vec<&str> = record.iter().map(str::trim).collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        match fields.as_slice() {
            [product, reactants, ..] if !product.is_empty() && !reactants.is_empty() => {
                let pair = ReactionPair::new(*product, *reactants);
                if pair.check().is_ok() {
                    pairs.push(pair);
                } else {
                    skipped += 1;
                }
            }
            _ => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(CorpusError::EmptyDataset {
            path: path.display().to_string(),
            skipped,
        });
    }
    Ok(ReactionsReport { pairs, skipped })
}

/// Non-blank lines, trimmed.
pub fn load_lines(path: impl AsRef<Path>) -> Result<Vec<String>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect())
}

pub fn load_stock(path: impl AsRef<Path>) -> Result<(Stock, StockReport), CorpusError> {
    let lines = load_lines(path)?;
    let raw = lines.len();
    let stock: Stock = lines.into_iter().collect();
    let unique = stock.len();
    Ok((stock, StockReport { raw, unique }))
}

pub fn write_lines<S: AsRef<str>>(path: impl AsRef<Path>, lines: &[S]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let mut text = String::new();
    for l in lines {
        text.push_str(l.as_ref());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_reactions(path: impl AsRef<Path>, pairs: &[ReactionPair]) -> Result<(), CorpusError> {
    let lines: Vec<String> = pairs.iter().map(|p| format!("{}\t{}", p.product, p.reactants)).collect();
    write_lines(path, &lines)
}

fn sha256_file(path: &Path) -> Result<String, CorpusError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Write `train.tsv`, `valid.tsv`, `test.tsv`, `stock.txt`, plus any extra
/// line files, then `manifest.json` with their checksums.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    dataset: &SyntheticDataset,
    extra: &[(&str, Vec<String>)],
) -> Result<DatasetManifest, CorpusError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut checksums = BTreeMap::new();
    for (name, pairs) in [("train.tsv", &dataset.train), ("valid.tsv", &dataset.valid), ("test.tsv", &dataset.test)] {
        let path = dir.join(name);
        write_reactions(&path, pairs)?;
        checksums.insert(name.to_owned(), sha256_file(&path)?);
    }
    let stock = dir.join("stock.txt");
    write_lines(&stock, dataset.stock())?;
    checksums.insert("stock.txt".to_owned(), sha256_file(&stock)?);
    for (name, lines) in extra {
        let path = dir.join(name);
        write_lines(&path, lines)?;
        checksums.insert(name.to_string(), sha256_file(&path)?);
    }
    let manifest = dataset.manifest(checksums);
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_good_lines_give_three_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.tsv");
        fs::write(&p, "CCO\tCC.O\nCCN\tCC.N\n\nc1ccccc1O\tc1ccccc1.O\n").unwrap();
        let r = load_reactions(&p, ReactionFormat::Tsv).unwrap();
        assert_eq!((r.pairs.len(), r.skipped), (3, 0));
        assert_eq!(r.pairs[1], ReactionPair::new("CCN", "CC.N"));
    }

    #[test]
    fn unknown_character_is_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.tsv");
        fs::write(&p, "CCO\tCC.O\nC&C\tC.C\nCC\n").unwrap();
        let r = load_reactions(&p, ReactionFormat::Tsv).unwrap();
        assert_eq!((r.pairs.len(), r.skipped), (1, 2));
    }

    #[test]
    fn csv_format_and_empty_result() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        fs::write(&p, "CCO,CC.O\n").unwrap();
        assert_eq!(load_reactions(&p, ReactionFormat::Csv).unwrap().pairs.len(), 1);
        fs::write(&p, "C&,C\n\n").unwrap();
        assert!(matches!(
            load_reactions(&p, ReactionFormat::Csv),
            Err(CorpusError::EmptyDataset { skipped: 1, .. })
        ));
        assert!(matches!(
            load_reactions(dir.path().join("missing"), ReactionFormat::Tsv),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn stock_reports_raw_and_unique_counts() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.txt");
        fs::write(&p, "CCO\nN\nCCO\n\n").unwrap();
        let (stock, report) = load_stock(&p).unwrap();
        assert_eq!(report, StockReport { raw: 3, unique: 2 });
        assert!(stock.contains("N"));
        fs::write(&p, "").unwrap();
        assert!(load_stock(&p).unwrap().0.is_empty());
    }
}
