use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::classifiers::PredictionSet;
use crate::error::{Error, Result};

const HEADER: &str = "VideoId,LabelConfidencePairs";

/// Writes a prediction CSV: header `VideoId,LabelConfidencePairs`, then one
/// row per video with up to `top_k` space-separated `label confidence` pairs,
/// confidence formatted to 6 decimal places. Rows are ordered by video id.
pub fn write_predictions(
    preds: &PredictionSet,
    path: impl AsRef<Path>,
    top_k: usize,
) -> Result<()> {
    if top_k == 0 {
        return Err(Error::argument("top_k must be >= 1"));
    }
    let file = File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{HEADER}")?;
    for (id, scored) in preds.iter() {
        if id.contains(',') || id.contains('\n') {
            return Err(Error::data(format!("video id {id:?} cannot appear in csv")));
        }
        let mut row = String::with_capacity(16 * scored.len().min(top_k) + id.len());
        row.push_str(id);
        row.push(',');
        for (i, (label, conf)) in scored.iter().take(top_k).enumerate() {
            if i > 0 {
                row.push(' ');
            }
            row.push_str(&format!("{label} {conf:.6}"));
        }
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a prediction CSV written by [`write_predictions`].
pub fn load_predictions(path: impl AsRef<Path>) -> Result<PredictionSet> {
    let file = File::open(path.as_ref())?;
    let mut lines = BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| Error::Parse {
        line: 1,
        msg: "empty prediction file".into(),
    })??;
    if header.trim() != HEADER {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {HEADER:?}, got {header:?}"),
        });
    }
    let mut set = PredictionSet::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, pairs) = line.split_once(',').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: "row has no comma".into(),
        })?;
        let fields: Vec<&str> = pairs.split_whitespace().collect();
        if fields.is_empty() || fields.len() % 2 != 0 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected label/confidence pairs, got {} fields", fields.len()),
            });
        }
        let mut scored = Vec::with_capacity(fields.len() / 2);
        for pair in fields.chunks(2) {
            let label: usize = pair[0].parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad label {:?}", pair[0]),
            })?;
            let conf: f64 = pair[1].parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad confidence {:?}", pair[1]),
            })?;
            scored.push((label, conf));
        }
        set.insert(id, scored)?;
    }
    Ok(set)
}
