//! Plain-text `.pll` dataset files.
//!
//! Layout: an optional number of `#` comment lines anywhere; the first data
//! line is the header `n d k`; each of the following n lines holds d
//! space-separated feature values, one k-character 0/1 candidate mask and
//! one integer true label (0-based) or -1 when the label is unknown.
//! Floats are written in shortest round-trip form, so save followed by
//! load reproduces the dataset bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::PllDataset;

fn parse_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<PllDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| match l {
            Ok(s) => !s.trim().is_empty() && !s.trim_start().starts_with('#'),
            Err(_) => true,
        });

    let (header_no, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 0, "empty file"))?;
    let header = header?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| parse_err(path, header_no, format!("bad header: {e}")))?;
    let [n, d, k] = dims[..] else {
        return Err(parse_err(path, header_no, "header must be `n d k`"));
    };
    if k == 0 {
        return Err(parse_err(path, header_no, "k must be positive"));
    }

    let mut features = Vec::with_capacity(n * d);
    let mut candidates = Vec::with_capacity(n * k);
    let mut labels: Vec<i64> = Vec::with_capacity(n);
    let mut rows = 0usize;
    for (line_no, line) in lines {
        if rows == n {
            return Err(parse_err(path, line_no, format!("more than {n} data rows")));
        }
        let line = line?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != d + 2 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {} tokens (d features, mask, label), got {}", d + 2, tokens.len()),
            ));
        }
        for t in &tokens[..d] {
            let v: f64 = t
                .parse()
                .map_err(|e| parse_err(path, line_no, format!("bad feature value {t:?}: {e}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line_no, format!("non-finite feature {t:?}")));
            }
            features.push(v);
        }
        let mask = tokens[d];
        if mask.len() != k {
            return Err(parse_err(
                path,
                line_no,
                format!("candidate mask {mask:?} has {} bits, want k = {k}", mask.len()),
            ));
        }
        let mut any = false;
        for ch in mask.chars() {
            match ch {
                '0' => candidates.push(false),
                '1' => {
                    candidates.push(true);
                    any = true;
                }
                other => {
                    return Err(parse_err(
                        path,
                        line_no,
                        format!("candidate mask may only contain 0/1, got {other:?}"),
                    ))
                }
            }
        }
        if !any {
            return Err(parse_err(path, line_no, "empty candidate set"));
        }
        let label: i64 = tokens[d + 1]
            .parse()
            .map_err(|e| parse_err(path, line_no, format!("bad label: {e}")))?;
        if label >= 0 {
            let y = label as usize;
            if y >= k {
                return Err(parse_err(path, line_no, format!("label {y} out of range (k = {k})")));
            }
            if !candidates[rows * k + y] {
                return Err(parse_err(
                    path,
                    line_no,
                    format!("true label {y} missing from its candidate set"),
                ));
            }
        } else if label != -1 {
            return Err(parse_err(path, line_no, format!("label must be >= 0 or -1, got {label}")));
        }
        labels.push(label);
        rows += 1;
    }
    if rows != n {
        return Err(parse_err(path, 0, format!("expected {n} data rows, found {rows}")));
    }
    let true_labels = if labels.iter().all(|&l| l >= 0) {
        Some(labels.into_iter().map(|l| l as usize).collect())
    } else {
        None
    };
    PllDataset::new(Tensor::from_vec(&[n, d], features)?, candidates, true_labels, k)
}

pub fn save_dataset(ds: &PllDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    writeln!(out, "{} {} {}", ds.n, ds.d, ds.k)?;
    let mut line = String::new();
    for i in 0..ds.n {
        line.clear();
        for v in ds.feature_row(i) {
            line.push_str(&format!("{v} "));
        }
        for &b in ds.candidates(i) {
            line.push(if b { '1' } else { '0' });
        }
        match &ds.true_labels {
            Some(labels) => line.push_str(&format!(" {}", labels[i])),
            None => line.push_str(" -1"),
        }
        writeln!(out, "{line}")?;
    }
    out.flush()?;
    Ok(())
}
