use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use glioseg::metrics::{DiceReport, LesionWiseReport};
use glioseg::train::FoldResult;

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one numeric column by header name. A single-column file is read
/// whatever its header.
pub fn read_column(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = r.headers()?.clone();
    let idx = match headers.iter().position(|h| h.trim() == column) {
        Some(i) => i,
        None if headers.len() == 1 => 0,
        None => bail!(
            "{} has no column {column:?} (columns: {})",
            path.display(),
            headers.iter().collect::<Vec<_>>().join(", ")
        ),
    };
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let cell = rec.get(idx).unwrap_or("").trim();
        let v: f64 =
            cell.parse().with_context(|| format!("{} row {}: {cell:?} is not a number", path.display(), line + 1))?;
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct DiceRow {
    pub id: String,
    #[serde(rename = "ET")]
    pub et: f64,
    #[serde(rename = "TC")]
    pub tc: f64,
    #[serde(rename = "WT")]
    pub wt: f64,
}

impl DiceRow {
    pub fn new(id: &str, d: &DiceReport) -> Self {
        DiceRow { id: id.to_string(), et: d.et, tc: d.tc, wt: d.wt }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LesionRow {
    pub id: String,
    pub region: String,
    pub score: f64,
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
}

impl LesionRow {
    pub fn new(id: &str, l: &LesionWiseReport) -> Self {
        LesionRow {
            id: id.to_string(),
            region: l.region.short_name().to_string(),
            score: l.score,
            true_positives: l.true_positives,
            false_negatives: l.false_negatives,
            false_positives: l.false_positives,
        }
    }
}

/// Per-epoch means over folds.
#[derive(Debug, Serialize)]
pub struct CrossvalRow {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub pseudo_dice: f64,
    pub folds: usize,
}

impl CrossvalRow {
    pub fn average(results: &[FoldResult]) -> Vec<CrossvalRow> {
        let mut by_epoch: BTreeMap<u64, Vec<&glioseg::train::EpochRecord>> = BTreeMap::new();
        for r in results {
            for rec in &r.records {
                by_epoch.entry(rec.epoch).or_default().push(rec);
            }
        }
        by_epoch
            .into_iter()
            .map(|(epoch, recs)| {
                let n = recs.len() as f64;
                let mean = |f: fn(&glioseg::train::EpochRecord) -> f64| recs.iter().map(|r| f(r)).sum::<f64>() / n;
                CrossvalRow {
                    epoch,
                    lr: mean(|r| r.lr),
                    train_loss: mean(|r| r.train_loss),
                    val_loss: mean(|r| r.val_loss),
                    pseudo_dice: mean(|r| r.pseudo_dice),
                    folds: recs.len(),
                }
            })
            .collect()
    }
}

/// One row per input file plus a mean row: lesion-wise Dice per region.
#[derive(Debug, Serialize)]
pub struct LesionTableRow {
    pub fold: String,
    pub cases: usize,
    #[serde(rename = "ET")]
    pub et: f64,
    #[serde(rename = "TC")]
    pub tc: f64,
    #[serde(rename = "WT")]
    pub wt: f64,
}

pub fn lesion_table(inputs: &[std::path::PathBuf]) -> Result<Vec<LesionTableRow>> {
    let mut rows = Vec::with_capacity(inputs.len() + 1);
    for (i, path) in inputs.iter().enumerate() {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for rec in r.deserialize::<LesionRow>() {
            let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
            let e = sums.entry(rec.region).or_default();
            e.0 += rec.score;
            e.1 += 1;
        }
        let mean = |k: &str| sums.get(k).map(|&(s, n)| s / n as f64).unwrap_or(f64::NAN);
        let cases = sums.values().map(|&(_, n)| n).max().unwrap_or(0);
        if cases == 0 {
            bail!("{} contains no lesion rows", path.display());
        }
        rows.push(LesionTableRow { fold: i.to_string(), cases, et: mean("ET"), tc: mean("TC"), wt: mean("WT") });
    }
    let n = rows.len() as f64;
    let avg = LesionTableRow {
        fold: "mean".into(),
        cases: rows.iter().map(|r| r.cases).sum(),
        et: rows.iter().map(|r| r.et).sum::<f64>() / n,
        tc: rows.iter().map(|r| r.tc).sum::<f64>() / n,
        wt: rows.iter().map(|r| r.wt).sum::<f64>() / n,
    };
    rows.push(avg);
    Ok(rows)
}
