//! Stimuli tables and prompt segmentation.
//!
//! A stimuli table is a CSV file with (at least) the columns `Run`, `Item`,
//! `Condition` and `Prompt`. Header matching ignores case and surrounding
//! whitespace; any further columns are kept as opaque metadata and echoed
//! into the result file.
//!
//! Prompts may carry multimodal markup: `<text>…</text>`, `<img>…</img>` and
//! `<audio>…</audio>`. A prompt without markup is a single text segment.

use std::collections::HashSet;
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ImageDetail;

pub const REQUIRED_COLUMNS: [&str; 4] = ["Run", "Item", "Condition", "Prompt"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IngestError {
    #[error("missing required column \"{0}\"")]
    MissingColumn(String),
    #[error("stimuli table is empty")]
    EmptyTable,
    #[error("row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("duplicate (run, item) pair ({run}, {item}) at row {row}")]
    DuplicateRunItem { run: u32, item: u32, row: usize },
    #[error("csv error: {0}")]
    Csv(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentError {
    #[error("unbalanced <{tag}> opened at byte {offset}")]
    UnbalancedTag { tag: &'static str, offset: usize },
    #[error("empty <{tag}> segment at byte {offset}")]
    EmptySegment { tag: &'static str, offset: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StimulusRow {
    pub run: u32,
    pub item: u32,
    pub condition: String,
    pub prompt: String,
    /// Values of any non-required columns, aligned with
    /// [`StimulusSet::extra_columns`].
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<String>,
}

impl StimulusRow {
    pub fn new(
        run: u32,
        item: u32,
        condition: impl Into<String>,
        prompt: impl Into<String>,
    ) -> Self {
        Self {
            run,
            item,
            condition: condition.into(),
            prompt: prompt.into(),
            extra: Vec::new(),
        }
    }

    pub fn segments(&self) -> Result<Vec<ContentSegment>, SegmentError> {
        parse_prompt_segments(&self.prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StimulusSet {
    pub rows: Vec<StimulusRow>,
    pub source_path: String,
    pub extra_columns: Vec<String>,
}

impl StimulusSet {
    /// Builds a set from rows, enforcing the same invariants as
    /// [`parse_stimuli`].
    pub fn from_rows(
        rows: Vec<StimulusRow>,
        source_path: impl Into<String>,
    ) -> Result<Self, IngestError> {
        if rows.is_empty() {
            return Err(IngestError::EmptyTable);
        }
        let mut seen = HashSet::new();
        for (i, row) in rows.iter().enumerate() {
            validate_row(row, i + 1)?;
            if !seen.insert((row.run, row.item)) {
                return Err(IngestError::DuplicateRunItem {
                    run: row.run,
                    item: row.item,
                    row: i + 1,
                });
            }
        }
        Ok(Self {
            rows,
            source_path: source_path.into(),
            extra_columns: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct run indices in order of first appearance.
    pub fn runs(&self) -> Vec<u32> {
        let mut seen = HashSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.run))
            .map(|r| r.run)
            .collect()
    }

    /// Serializes the set back to CSV (required columns first, then extras).
    pub fn to_csv(&self) -> Result<String, IngestError> {
        let mut writer = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = REQUIRED_COLUMNS
            .iter()
            .copied()
            .chain(self.extra_columns.iter().map(String::as_str))
            .collect();
        writer.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut record = vec![
                row.run.to_string(),
                row.item.to_string(),
                row.condition.clone(),
                row.prompt.clone(),
            ];
            record.extend(row.extra.iter().cloned());
            writer.write_record(&record).map_err(csv_err)?;
        }
        let bytes = writer
            .into_inner()
            .map_err(|e| IngestError::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| IngestError::Csv(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> IngestError {
    IngestError::Csv(e.to_string())
}

fn validate_row(row: &StimulusRow, row_number: usize) -> Result<(), IngestError> {
    let malformed = |reason: String| IngestError::MalformedRow {
        row: row_number,
        reason,
    };
    if row.run == 0 {
        return Err(malformed("Run must be a positive integer".into()));
    }
    if row.item == 0 {
        return Err(malformed("Item must be a positive integer".into()));
    }
    if row.prompt.trim().is_empty() {
        return Err(malformed("Prompt is empty".into()));
    }
    parse_prompt_segments(&row.prompt).map_err(|e| malformed(e.to_string()))?;
    Ok(())
}

fn parse_index(field: &str, column: &str, row: usize) -> Result<u32, IngestError> {
    let trimmed = field.trim();
    match trimmed.parse::<u32>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(IngestError::MalformedRow {
            row,
            reason: format!("{column} must be a positive integer, got {trimmed:?}"),
        }),
    }
}

/// Parses a stimuli table. `source_path` is only recorded for reporting.
pub fn parse_stimuli<R: Read>(source: R, source_path: &str) -> Result<StimulusSet, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(source);

    let headers = reader.headers().map_err(csv_err)?.clone();
    if headers.iter().all(|h| h.trim().is_empty()) {
        return Err(IngestError::EmptyTable);
    }

    let mut positions = [usize::MAX; 4];
    for (slot, name) in positions.iter_mut().zip(REQUIRED_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case(name))
            .ok_or_else(|| IngestError::MissingColumn(name.to_string()))?;
    }
    let extra_positions: Vec<usize> = (0..headers.len())
        .filter(|i| !positions.contains(i))
        .collect();
    let extra_columns: Vec<String> = extra_positions
        .iter()
        .map(|&i| headers[i].trim().to_string())
        .collect();

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (index, result) in reader.records().enumerate() {
        let row_number = index + 1;
        let record = result.map_err(|e| IngestError::MalformedRow {
            row: row_number,
            reason: e.to_string(),
        })?;
        let [run_at, item_at, condition_at, prompt_at] = positions;
        let row = StimulusRow {
            run: parse_index(&record[run_at], "Run", row_number)?,
            item: parse_index(&record[item_at], "Item", row_number)?,
            condition: record[condition_at].to_string(),
            prompt: record[prompt_at].to_string(),
            extra: extra_positions
                .iter()
                .map(|&i| record[i].to_string())
                .collect(),
        };
        validate_row(&row, row_number)?;
        if !seen.insert((row.run, row.item)) {
            return Err(IngestError::DuplicateRunItem {
                run: row.run,
                item: row.item,
                row: row_number,
            });
        }
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(IngestError::EmptyTable);
    }
    Ok(StimulusSet {
        rows,
        source_path: source_path.to_string(),
        extra_columns,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ContentSegment {
    /// `tagged` records whether the text was wrapped in `<text>` so the
    /// original prompt can be reproduced exactly.
    Text {
        text: String,
        tagged: bool,
    },
    /// `detail` overrides the experiment-wide image detail when set. It is
    /// never produced by the parser.
    Image {
        locator: String,
        detail: Option<ImageDetail>,
    },
    Audio {
        locator: String,
    },
}

impl ContentSegment {
    pub fn text(text: impl Into<String>) -> Self {
        ContentSegment::Text {
            text: text.into(),
            tagged: false,
        }
    }

    /// Untagged text consisting only of whitespace, e.g. the gap between two
    /// tags. Such segments are kept for rendering but never sent.
    pub fn is_filler(&self) -> bool {
        matches!(self, ContentSegment::Text { text, tagged: false } if text.trim().is_empty())
    }

    pub fn render(&self) -> String {
        match self {
            ContentSegment::Text { text, tagged: true } => format!("<text>{text}</text>"),
            ContentSegment::Text {
                text,
                tagged: false,
            } => text.clone(),
            ContentSegment::Image { locator, .. } => format!("<img>{locator}</img>"),
            ContentSegment::Audio { locator } => format!("<audio>{locator}</audio>"),
        }
    }
}

/// Concatenates rendered segments; the inverse of [`parse_prompt_segments`].
pub fn render_segments(segments: &[ContentSegment]) -> String {
    segments.iter().map(ContentSegment::render).collect()
}

/// Text content of a prompt with markup removed (image and audio locators
/// are dropped).
pub fn plain_text(segments: &[ContentSegment]) -> String {
    segments
        .iter()
        .filter_map(|s| match s {
            ContentSegment::Text { text, .. } => Some(text.as_str()),
            _ => None,
        })
        .collect()
}

#[derive(Clone, Copy)]
enum TagKind {
    Text,
    Image,
    Audio,
}

const TAGS: [(&str, &str, &str, TagKind); 3] = [
    ("<text>", "</text>", "text", TagKind::Text),
    ("<img>", "</img>", "img", TagKind::Image),
    ("<audio>", "</audio>", "audio", TagKind::Audio),
];

/// Splits a raw prompt into content segments in source order.
///
/// Unknown tags and stray closing tags are literal text. Tags do not nest:
/// the body of a tag runs to the first matching closing tag.
pub fn parse_prompt_segments(raw: &str) -> Result<Vec<ContentSegment>, SegmentError> {
    let mut segments = Vec::new();
    let mut literal_start = 0;
    let mut cursor = 0;

    while let Some(rel) = raw[cursor..].find('<') {
        let at = cursor + rel;
        let Some(&(open, close, name, kind)) =
            TAGS.iter().find(|(open, ..)| raw[at..].starts_with(open))
        else {
            cursor = at + 1;
            continue;
        };
        let body_start = at + open.len();
        let body_len = raw[body_start..]
            .find(close)
            .ok_or(SegmentError::UnbalancedTag {
                tag: name,
                offset: at,
            })?;
        let body = &raw[body_start..body_start + body_len];
        if body.trim().is_empty() {
            return Err(SegmentError::EmptySegment {
                tag: name,
                offset: at,
            });
        }
        if literal_start < at {
            segments.push(ContentSegment::text(&raw[literal_start..at]));
        }
        segments.push(match kind {
            TagKind::Text => ContentSegment::Text {
                text: body.to_string(),
                tagged: true,
            },
            TagKind::Image => ContentSegment::Image {
                locator: body.to_string(),
                detail: None,
            },
            TagKind::Audio => ContentSegment::Audio {
                locator: body.to_string(),
            },
        });
        cursor = body_start + body_len + close.len();
        literal_start = cursor;
    }
    if literal_start < raw.len() {
        segments.push(ContentSegment::text(&raw[literal_start..]));
    }
    Ok(segments)
}
