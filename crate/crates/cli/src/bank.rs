//! Text feature-bank format.
//!
//! ```text
//! # BMDFB1 n=3 d=2 K=2 logits=1 labels=0
//! 0.5,-1,2.25,0.1
//! ...
//! ```
//!
//! Each body row holds `d` feature values, then `K` logits when
//! `logits=1`, then an integer label when `labels=1`. Floats are written in
//! shortest round-trip form, so write → read is exact.

use std::fmt;
use std::fmt::Write as _;

use bmd_core::Matrix;

pub const MAGIC: &str = "BMDFB1";

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub num_classes: usize,
    pub features: Matrix,
    pub logits: Option<Matrix>,
    pub labels: Option<Vec<usize>>,
}

/// Parse failure at a 1-based line and comma-separated field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BankError {
    pub line: usize,
    pub column: usize,
    pub message: String,
}

impl fmt::Display for BankError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}, column {}: {}", self.line, self.column, self.message)
    }
}

impl std::error::Error for BankError {}

fn err(line: usize, column: usize, message: impl Into<String>) -> BankError {
    BankError {
        line,
        column,
        message: message.into(),
    }
}

struct Header {
    n: usize,
    d: usize,
    k: usize,
    logits: bool,
    labels: bool,
}

fn parse_header(line: &str) -> Result<Header, BankError> {
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some("#") || tokens.next() != Some(MAGIC) {
        return Err(err(1, 1, format!("expected header starting with '# {MAGIC}'")));
    }
    let keys = ["n", "d", "K", "logits", "labels"];
    let mut values = [None; 5];
    for (pos, tok) in tokens.enumerate() {
        let column = pos + 3;
        let (key, value) = tok
            .split_once('=')
            .ok_or_else(|| err(1, column, format!("expected key=value, got '{tok}'")))?;
        let slot = keys
            .iter()
            .position(|&k| k == key)
            .ok_or_else(|| err(1, column, format!("unknown header key '{key}'")))?;
        if values[slot].is_some() {
            return Err(err(1, column, format!("duplicate header key '{key}'")));
        }
        let v: usize = value
            .parse()
            .map_err(|_| err(1, column, format!("'{key}' must be a non-negative integer, got '{value}'")))?;
        if slot >= 3 && v > 1 {
            return Err(err(1, column, format!("'{key}' must be 0 or 1")));
        }
        values[slot] = Some(v);
    }
    let get = |i: usize| values[i].ok_or_else(|| err(1, 1, format!("header is missing '{}'", keys[i])));
    let header = Header {
        n: get(0)?,
        d: get(1)?,
        k: get(2)?,
        logits: get(3)? == 1,
        labels: get(4)? == 1,
    };
    if header.d == 0 {
        return Err(err(1, 1, "d must be >= 1"));
    }
    if (header.logits || header.labels) && header.k == 0 {
        return Err(err(1, 1, "K must be >= 1 when logits or labels are present"));
    }
    Ok(header)
}

pub fn parse_feature_bank(text: &str) -> Result<FeatureBank, BankError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| err(1, 1, "empty file"))?;
    let h = parse_header(first)?;
    let width = h.d + if h.logits { h.k } else { 0 } + usize::from(h.labels);

    let mut features = Vec::with_capacity(h.n * h.d);
    let mut logits = Vec::with_capacity(if h.logits { h.n * h.k } else { 0 });
    let mut labels = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if rows == h.n {
            return Err(err(line_no, 1, format!("more than the declared n={} rows", h.n)));
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != width {
            let column = fields.len().min(width) + 1;
            return Err(err(line_no, column, format!("expected {width} fields, found {}", fields.len())));
        }
        for (j, f) in fields.iter().enumerate() {
            let column = j + 1;
            if h.labels && j == width - 1 {
                let label: usize = f
                    .parse()
                    .map_err(|_| err(line_no, column, format!("invalid label '{f}'")))?;
                if label >= h.k {
                    return Err(err(line_no, column, format!("label {label} out of range for K={}", h.k)));
                }
                labels.push(label);
                continue;
            }
            let v: f64 = f
                .parse()
                .map_err(|_| err(line_no, column, format!("invalid number '{f}'")))?;
            if !v.is_finite() {
                return Err(err(line_no, column, format!("non-finite value '{f}'")));
            }
            if j < h.d {
                features.push(v);
            } else {
                logits.push(v);
            }
        }
        rows += 1;
    }
    if rows != h.n {
        return Err(err(text.lines().count() + 1, 1, format!("declared n={} rows, found {rows}", h.n)));
    }
    let features = Matrix::from_vec(h.n, h.d, features).expect("finite values checked");
    let logits = h
        .logits
        .then(|| Matrix::from_vec(h.n, h.k, logits).expect("finite values checked"));
    Ok(FeatureBank {
        num_classes: h.k,
        features,
        logits,
        labels: h.labels.then_some(labels),
    })
}

pub fn write_feature_bank(bank: &FeatureBank) -> String {
    let n = bank.features.rows();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# {MAGIC} n={n} d={} K={} logits={} labels={}",
        bank.features.cols(),
        bank.num_classes,
        u8::from(bank.logits.is_some()),
        u8::from(bank.labels.is_some())
    );
    for i in 0..n {
        let mut fields: Vec<String> = bank.features.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = &bank.logits {
            fields.extend(l.row(i).iter().map(|v| v.to_string()));
        }
        if let Some(y) = &bank.labels {
            fields.push(y[i].to_string());
        }
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}
