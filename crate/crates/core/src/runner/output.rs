//! Result files.
//!
//! Columns follow a fixed order: `Session, Run, Item, Trial, Condition,
//! Prompt, Response, N, Message, rawResponse`. Extra stimulus columns, when
//! present, follow `rawResponse`.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RESULT_COLUMNS: [&str; 10] = [
    "Session",
    "Run",
    "Item",
    "Trial",
    "Condition",
    "Prompt",
    "Response",
    "N",
    "Message",
    "rawResponse",
];

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("unsupported output extension for {0} (use .csv or .xlsx)")]
    UnsupportedExtension(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("xlsx error: {0}")]
    Xlsx(#[from] rust_xlsxwriter::XlsxError),
    #[error("result file schema mismatch: {0}")]
    SchemaMismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One response to one trial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub session: u32,
    pub run: u32,
    pub item: u32,
    /// 1-based turn position within the run.
    pub trial: u32,
    pub condition: String,
    pub prompt: String,
    pub response: String,
    /// 1-based choice index.
    pub n: u32,
    /// The messages array (chat) or prompt (text) actually sent.
    pub message: String,
    pub raw_response: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<String>,
}

impl ResultRecord {
    fn fields(&self) -> Vec<String> {
        let mut fields = vec![
            self.session.to_string(),
            self.run.to_string(),
            self.item.to_string(),
            self.trial.to_string(),
            self.condition.clone(),
            self.prompt.clone(),
            self.response.clone(),
            self.n.to_string(),
            self.message.clone(),
            self.raw_response.clone(),
        ];
        fields.extend(self.extra.iter().cloned());
        fields
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Xlsx,
}

impl OutputFormat {
    pub fn from_path(path: &Path) -> Result<Self, OutputError> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("csv") => Ok(OutputFormat::Csv),
            Some("xlsx") => Ok(OutputFormat::Xlsx),
            _ => Err(OutputError::UnsupportedExtension(
                path.display().to_string(),
            )),
        }
    }
}

pub fn header(extra_columns: &[String]) -> Vec<String> {
    RESULT_COLUMNS
        .iter()
        .map(|c| c.to_string())
        .chain(extra_columns.iter().cloned())
        .collect()
}

/// Receives records as trials complete.
pub trait RecordSink: Send {
    fn write(&mut self, record: &ResultRecord) -> Result<(), OutputError>;
}

impl RecordSink for Vec<ResultRecord> {
    fn write(&mut self, record: &ResultRecord) -> Result<(), OutputError> {
        self.push(record.clone());
        Ok(())
    }
}

/// Writes records to disk one at a time, flushing after each.
///
/// `.xlsx` targets are staged in a `<path>.partial.csv` file while the
/// experiment runs and converted on [`ResultWriter::finish`].
pub struct ResultWriter {
    path: PathBuf,
    format: OutputFormat,
    staging: PathBuf,
    writer: csv::Writer<File>,
    columns: Vec<String>,
    written: usize,
}

fn staging_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial.csv");
    path.with_file_name(name)
}

impl ResultWriter {
    /// Creates (or truncates) the output and writes the header row.
    pub fn create(path: &Path, extra_columns: &[String]) -> Result<Self, OutputError> {
        let format = OutputFormat::from_path(path)?;
        let staging = match format {
            OutputFormat::Csv => path.to_path_buf(),
            OutputFormat::Xlsx => staging_path(path),
        };
        let file = File::create(&staging).map_err(io_err(&staging))?;
        let mut writer = csv::Writer::from_writer(file);
        let columns = header(extra_columns);
        writer.write_record(&columns)?;
        writer.flush().map_err(io_err(&staging))?;
        Ok(Self {
            path: path.to_path_buf(),
            format,
            staging,
            writer,
            columns,
            written: 0,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records_written(&self) -> usize {
        self.written
    }

    /// Finalizes the file; for `.xlsx`, converts the staged rows.
    pub fn finish(mut self) -> Result<usize, OutputError> {
        self.writer.flush().map_err(io_err(&self.staging))?;
        if self.format == OutputFormat::Xlsx {
            let file = File::open(&self.staging).map_err(io_err(&self.staging))?;
            let (records, extra) = read_results_from(file)?;
            write_xlsx(&records, &extra, &self.path)?;
            fs::remove_file(&self.staging).map_err(io_err(&self.staging))?;
        }
        Ok(self.written)
    }
}

impl RecordSink for ResultWriter {
    fn write(&mut self, record: &ResultRecord) -> Result<(), OutputError> {
        let fields = record.fields();
        if fields.len() != self.columns.len() {
            return Err(OutputError::SchemaMismatch(format!(
                "record has {} fields, file has {} columns",
                fields.len(),
                self.columns.len()
            )));
        }
        self.writer.write_record(&fields)?;
        self.writer.flush().map_err(io_err(&self.staging))?;
        self.written += 1;
        Ok(())
    }
}

fn write_xlsx(
    records: &[ResultRecord],
    extra_columns: &[String],
    path: &Path,
) -> Result<(), OutputError> {
    let mut workbook = rust_xlsxwriter::Workbook::new();
    let sheet = workbook.add_worksheet();
    for (col, name) in header(extra_columns).iter().enumerate() {
        sheet.write_string(0, col as u16, name)?;
    }
    for (i, record) in records.iter().enumerate() {
        let row = i as u32 + 1;
        for (col, value) in record.fields().iter().enumerate() {
            let col = col as u16;
            // Index columns are stored as numbers.
            if matches!(col, 0..=3 | 7) {
                sheet.write_number(row, col, value.parse::<f64>().unwrap_or_default())?;
            } else {
                sheet.write_string(row, col, value)?;
            }
        }
    }
    workbook.save(path)?;
    Ok(())
}

/// Writes `records` to `path`. CSV output is appended, with the header
/// written only when the file is new or empty; `.xlsx` output is replaced.
pub fn write_results(
    records: &[ResultRecord],
    extra: &[String],
    path: &Path,
) -> Result<(), OutputError> {
    if let Some(bad) = records.iter().find(|r| r.extra.len() != extra.len()) {
        return Err(OutputError::SchemaMismatch(format!(
            "record has {} extra fields, expected {}",
            bad.extra.len(),
            extra.len()
        )));
    }
    match OutputFormat::from_path(path)? {
        OutputFormat::Xlsx => write_xlsx(records, extra, path),
        OutputFormat::Csv => {
            let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(io_err(path))?;
            let mut writer = csv::Writer::from_writer(file);
            if fresh {
                writer.write_record(header(extra))?;
            }
            for record in records {
                writer.write_record(record.fields())?;
            }
            writer.flush().map_err(io_err(path))?;
            Ok(())
        }
    }
}

fn parse_index(value: &str, column: &str, row: usize) -> Result<u32, OutputError> {
    value.trim().parse().map_err(|_| {
        OutputError::SchemaMismatch(format!("row {row}: {column} is not an integer: {value:?}"))
    })
}

/// Reads a result CSV. Returns the records and the names of any extra
/// columns.
pub fn read_results_from<R: Read>(
    source: R,
) -> Result<(Vec<ResultRecord>, Vec<String>), OutputError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < RESULT_COLUMNS.len() || names[..RESULT_COLUMNS.len()] != RESULT_COLUMNS {
        return Err(OutputError::SchemaMismatch(format!(
            "expected header starting with {}, found {}",
            RESULT_COLUMNS.join(","),
            names.join(",")
        )));
    }
    let extra: Vec<String> = names[RESULT_COLUMNS.len()..]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        records.push(ResultRecord {
            session: parse_index(&row[0], "Session", row_no)?,
            run: parse_index(&row[1], "Run", row_no)?,
            item: parse_index(&row[2], "Item", row_no)?,
            trial: parse_index(&row[3], "Trial", row_no)?,
            condition: row[4].to_string(),
            prompt: row[5].to_string(),
            response: row[6].to_string(),
            n: parse_index(&row[7], "N", row_no)?,
            message: row[8].to_string(),
            raw_response: row[9].to_string(),
            extra: row
                .iter()
                .skip(RESULT_COLUMNS.len())
                .map(str::to_string)
                .collect(),
        });
    }
    Ok((records, extra))
}

pub fn read_results(path: &Path) -> Result<(Vec<ResultRecord>, Vec<String>), OutputError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_results_from(file)
}
