//! Annotation tables: one row per subgoal with its start/end time and the
//! total duration of every posture class observed during it.
//!
//! ```text
//! Subgoal,Start [s],End [s],3. Bent forward,4. Strongly bend forward,...
//! 1. Adjust WS,11,52,16,,,,,
//! ```
//!
//! Comma, semicolon and tab delimiters are accepted. Empty duration cells
//! mean the class was not observed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AnnotationKind, AnnotationSegment, PostureClass, MIN_POSTURE_DURATION_S};

/// Total duration of one posture class within one subgoal.
#[derive(Debug, Clone, PartialEq)]
pub struct PostureAnnotation {
    /// Index into [`AnnotationTable::subgoals`].
    pub subgoal: usize,
    pub class: PostureClass,
    pub duration_s: f64,
    /// Whether the duration reaches the 4 s minimum.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTable {
    /// Posture columns in file order.
    pub classes: Vec<PostureClass>,
    pub subgoals: Vec<AnnotationSegment>,
    pub postures: Vec<PostureAnnotation>,
}

impl AnnotationTable {
    /// Subgoal intervals followed by one posture segment per record, each
    /// spanning its subgoal's interval.
    pub fn segments(&self) -> Vec<AnnotationSegment> {
        let mut out = self.subgoals.clone();
        for p in &self.postures {
            let sg = &self.subgoals[p.subgoal];
            out.push(AnnotationSegment {
                label: p.class.code().to_string(),
                start_s: sg.start_s,
                end_s: sg.end_s,
                kind: AnnotationKind::Posture,
            });
        }
        out
    }

    pub fn class_total(&self, class: PostureClass) -> f64 {
        self.postures.iter().filter(|p| p.class == class).map(|p| p.duration_s).sum()
    }

    /// Re-emits the table in the same layout it was parsed from.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("Subgoal,Start [s],End [s]");
        for c in &self.classes {
            out.push(',');
            out.push_str(c.title());
        }
        out.push('\n');
        for (i, sg) in self.subgoals.iter().enumerate() {
            let _ = write!(out, "{},{},{}", quote(&sg.label), sg.start_s, sg.end_s);
            for c in &self.classes {
                out.push(',');
                if let Some(p) = self.postures.iter().find(|p| p.subgoal == i && p.class == *c) {
                    let _ = write!(out, "{}", p.duration_s);
                }
            }
            out.push('\n');
        }
        out
    }
}

fn quote(s: &str) -> String {
    if s.contains([',', '"', ';', '\t', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub(crate) fn sniff_delimiter(header: &str) -> u8 {
    [b'\t', b';', b',']
        .into_iter()
        .max_by_key(|d| header.bytes().filter(|b| b == d).count())
        .unwrap_or(b',')
}

pub fn parse_annotations(path: &Path) -> Result<AnnotationTable> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations_str(&text)
}

pub fn parse_annotations_str(text: &str) -> Result<AnnotationTable> {
    let header_line = text.lines().next().ok_or(Error::Parse {
        line: 1,
        msg: "empty annotation table".into(),
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(sniff_delimiter(header_line))
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if headers.len() < 3 {
        return Err(Error::Parse {
            line: 1,
            msg: "expected subgoal, start and end columns".into(),
        });
    }
    let mut classes = Vec::new();
    for h in headers.iter().skip(3) {
        let class = PostureClass::parse(h).ok_or_else(|| Error::Parse {
            line: 1,
            msg: format!("unknown posture column `{h}`"),
        })?;
        if classes.contains(&class) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("duplicate posture column `{h}`"),
            });
        }
        classes.push(class);
    }

    let mut subgoals = Vec::new();
    let mut postures = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row + 2;
        let record = record.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        if record.iter().all(|c| c.is_empty()) {
            continue;
        }
        let number = |col: usize, what: &str| -> Result<f64> {
            let cell = record.get(col).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric {what} `{cell}`"),
            })?;
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parse {
                    line,
                    msg: format!("{what} must be a non-negative finite number, got `{cell}`"),
                });
            }
            Ok(v)
        };
        let start = number(1, "start")?;
        let end = number(2, "end")?;
        if end <= start {
            return Err(Error::Parse {
                line,
                msg: format!("end {end} must exceed start {start}"),
            });
        }
        let label = record.get(0).unwrap_or("").to_string();
        let subgoal = subgoals.len();
        subgoals.push(AnnotationSegment::new(label, start, end, AnnotationKind::Subgoal)?);
        for (k, class) in classes.iter().enumerate() {
            let col = k + 3;
            if record.get(col).is_none_or(str::is_empty) {
                continue;
            }
            let d = number(col, "duration")?;
            postures.push(PostureAnnotation {
                subgoal,
                class: *class,
                duration_s: d,
                valid: d >= MIN_POSTURE_DURATION_S,
            });
        }
    }
    Ok(AnnotationTable {
        classes,
        subgoals,
        postures,
    })
}

/// Exact posture episodes, one `class,start_s,end_s` row each.
pub fn write_episodes(episodes: &[AnnotationSegment]) -> String {
    let mut out = String::from("class,start_s,end_s\n");
    for e in episodes {
        let _ = writeln!(out, "{},{},{}", e.label, e.start_s, e.end_s);
    }
    out
}

pub fn parse_episodes_str(text: &str) -> Result<Vec<AnnotationSegment>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        if cells.len() != 3 {
            return Err(bad(format!("expected 3 columns, got {}", cells.len())));
        }
        let class = PostureClass::parse(cells[0]).ok_or_else(|| bad(format!("unknown posture `{}`", cells[0])))?;
        let start: f64 = cells[1].parse().map_err(|_| bad(format!("bad start `{}`", cells[1])))?;
        let end: f64 = cells[2].parse().map_err(|_| bad(format!("bad end `{}`", cells[2])))?;
        out.push(AnnotationSegment::new(class.code(), start, end, AnnotationKind::Posture).map_err(|e| bad(e.to_string()))?);
    }
    Ok(out)
}
