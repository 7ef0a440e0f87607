use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::objective::LabelVector;
use crate::NUM_AUS;

/// Labels of one video: a header naming the AU columns, then one row per
/// frame. Row `k` (0-based) belongs to frame `k + 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationFile {
    pub video: String,
    pub header: Vec<String>,
    pub rows: Vec<LabelVector>,
}

impl AnnotationFile {
    /// Labels for a 1-based frame index.
    pub fn frame(&self, frame: usize) -> Option<&LabelVector> {
        frame.checked_sub(1).and_then(|k| self.rows.get(k))
    }

    pub fn frames(&self) -> impl Iterator<Item = (usize, &LabelVector)> {
        self.rows.iter().enumerate().map(|(k, row)| (k + 1, row))
    }

    /// Serializes in the same format `parse_annotations` reads.
    pub fn to_text(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            for (i, v) in row.values().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write!(out, "{v}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Reads `<video>.txt`; the video id is the file stem.
pub fn parse_annotations(path: &Path) -> Result<AnnotationFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let video = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_annotation_text(&video, &text, path)
}

/// Parses annotation text. `path` is used only in error messages.
pub fn parse_annotation_text(video: &str, text: &str, path: &Path) -> Result<AnnotationFile> {
    let parse_error = |line: usize, message: String| Error::Parse {
        path: PathBuf::from(path),
        line,
        message,
    };

    let mut lines = text.lines().map(|l| l.strip_suffix('\r').unwrap_or(l));
    let header_line = lines.next().ok_or_else(|| parse_error(1, "missing header".into()))?;
    let header: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
    if header.len() != NUM_AUS {
        return Err(parse_error(
            1,
            format!("header has {} columns, expected {NUM_AUS}", header.len()),
        ));
    }
    if header.iter().any(String::is_empty) {
        return Err(parse_error(1, "empty AU name in header".into()));
    }

    let mut body: Vec<&str> = lines.collect();
    // Tolerate trailing blank lines, but not blank lines between frames.
    while body.last().is_some_and(|l| l.trim().is_empty()) {
        body.pop();
    }

    let mut rows = Vec::with_capacity(body.len());
    for (k, line) in body.iter().enumerate() {
        let line_no = k + 2;
        let tokens: Vec<&str> = line.split(',').map(str::trim).collect();
        if tokens.len() != NUM_AUS {
            return Err(parse_error(
                line_no,
                format!("{} columns, expected {NUM_AUS}", tokens.len()),
            ));
        }
        let mut values = Vec::with_capacity(NUM_AUS);
        for token in tokens {
            let v: i8 = token
                .parse()
                .map_err(|_| parse_error(line_no, format!("not an integer: {token:?}")))?;
            if !matches!(v, -1..=1) {
                return Err(parse_error(line_no, format!("label {v} not in {{0, 1, -1}}")));
            }
            values.push(v);
        }
        rows.push(LabelVector::new(values)?);
    }

    Ok(AnnotationFile {
        video: video.to_string(),
        header,
        rows,
    })
}
