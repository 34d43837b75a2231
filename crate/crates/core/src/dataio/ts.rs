//! The UEA/UCR `.ts` text format and a long CSV alternative.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One multivariate series as read from disk, lengths not yet aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSeries {
    /// `D` channels, each a sequence of values (`NaN` for missing).
    pub channels: Vec<Vec<f64>>,
    pub label: usize,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.channels.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Header directives plus records of one split file.
#[derive(Clone, Debug, PartialEq)]
pub struct TsFile {
    pub problem_name: String,
    pub dimensions: usize,
    /// Declared `@seriesLength`, if any.
    pub series_length: Option<usize>,
    pub equal_length: bool,
    pub class_names: Vec<String>,
    pub records: Vec<RawSeries>,
}

impl TsFile {
    pub fn max_length(&self) -> usize {
        self.records.iter().map(RawSeries::len).max().unwrap_or(0)
    }

    pub fn min_length(&self) -> usize {
        self.records.iter().map(RawSeries::len).min().unwrap_or(0)
    }

    pub fn is_variable_length(&self) -> bool {
        self.max_length() != self.min_length()
    }
}

pub fn read_ts(path: &Path) -> Result<TsFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ts(&text)
}

/// Parses `.ts` text. Line numbers in errors are 1-based.
pub fn parse_ts(text: &str) -> Result<TsFile> {
    let mut name = String::new();
    let mut dims: Option<usize> = None;
    let mut univariate = false;
    let mut series_length = None;
    let mut equal_length = true;
    let mut class_names: Option<Vec<String>> = None;
    let mut data_line = None;
    let mut last_line = 0;

    let mut lines = text.lines().enumerate();
    for (i, raw) in lines.by_ref() {
        let line_no = i + 1;
        last_line = line_no;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !line.starts_with('@') {
            return Err(Error::Format {
                line: line_no,
                msg: "record before @data".into(),
            });
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("").to_ascii_lowercase();
        let rest: Vec<&str> = parts.collect();
        let flag = |v: Option<&&str>| -> Result<bool> {
            match v.map(|s| s.to_ascii_lowercase()).as_deref() {
                Some("true") => Ok(true),
                Some("false") => Ok(false),
                _ => Err(Error::Format {
                    line: line_no,
                    msg: format!("{key} expects true or false"),
                }),
            }
        };
        let count = |v: Option<&&str>| -> Result<usize> {
            v.and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format {
                line: line_no,
                msg: format!("{key} expects a non-negative integer"),
            })
        };
        match key.as_str() {
            "@problemname" => name = rest.join(" "),
            "@dimensions" => dims = Some(count(rest.first())?),
            "@univariate" => univariate = flag(rest.first())?,
            "@serieslength" => series_length = Some(count(rest.first())?),
            "@equallength" => equal_length = flag(rest.first())?,
            "@timestamps" => {
                if flag(rest.first())? {
                    return Err(Error::Format {
                        line: line_no,
                        msg: "time-stamped series are not supported".into(),
                    });
                }
            }
            "@classlabel" => {
                if !flag(rest.first())? {
                    return Err(Error::Format {
                        line: line_no,
                        msg: "classification data needs @classLabel true".into(),
                    });
                }
                let names: Vec<String> = rest[1..].iter().map(|s| s.to_string()).collect();
                if names.is_empty() {
                    return Err(Error::Format {
                        line: line_no,
                        msg: "@classLabel lists no classes".into(),
                    });
                }
                class_names = Some(names);
            }
            "@data" => {
                data_line = Some(line_no);
                break;
            }
            // Descriptive directives carry nothing the loader needs.
            "@missing" | "@targetlabel" => {}
            _ => {
                return Err(Error::Format {
                    line: line_no,
                    msg: format!("unknown directive {key}"),
                })
            }
        }
    }
    if data_line.is_none() {
        return Err(Error::Format {
            line: last_line + 1,
            msg: "missing @data section".into(),
        });
    }
    let class_names = class_names.ok_or_else(|| Error::Format {
        line: data_line.unwrap(),
        msg: "missing @classLabel before @data".into(),
    })?;
    let dims = match (dims, univariate) {
        (Some(d), _) => d,
        (None, true) => 1,
        (None, false) => {
            return Err(Error::Format {
                line: data_line.unwrap(),
                msg: "missing @dimensions".into(),
            })
        }
    };
    if dims == 0 {
        return Err(Error::Format {
            line: data_line.unwrap(),
            msg: "@dimensions must be >= 1".into(),
        });
    }

    let mut records = Vec::new();
    for (i, raw) in lines {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let index = records.len();
        let fields: Vec<&str> = line.split(':').collect();
        if fields.len() != dims + 1 {
            return Err(Error::Record {
                index,
                msg: format!("line {}: expected {dims} channels and a label, found {} fields", i + 1, fields.len()),
            });
        }
        let label_text = fields[dims].trim();
        let label = class_names
            .iter()
            .position(|c| c == label_text)
            .ok_or_else(|| Error::Label {
                index,
                label: label_text.to_string(),
            })?;
        let channels = fields[..dims]
            .iter()
            .enumerate()
            .map(|(c, f)| parse_values(f).map_err(|msg| Error::Record {
                index,
                msg: format!("line {}, channel {c}: {msg}", i + 1),
            }))
            .collect::<Result<Vec<_>>>()?;
        records.push(RawSeries { channels, label });
    }
    if records.is_empty() {
        return Err(Error::Format {
            line: last_line,
            msg: "no records after @data".into(),
        });
    }
    Ok(TsFile {
        problem_name: name,
        dimensions: dims,
        series_length,
        equal_length,
        class_names,
        records,
    })
}

fn parse_values(field: &str) -> std::result::Result<Vec<f64>, String> {
    field
        .split(',')
        .map(|v| {
            let v = v.trim();
            match v {
                "" => Err("empty value".to_string()),
                "?" | "NaN" | "nan" => Ok(f64::NAN),
                _ => v.parse::<f64>().map_err(|_| format!("cannot parse `{v}`")),
            }
        })
        .collect()
}

/// Canonical `.ts` text: shortest round-trip number formatting, `?` for
/// missing values.
pub fn to_ts_string(file: &TsFile) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "@problemName {}", file.problem_name);
    let _ = writeln!(s, "@timeStamps false");
    let _ = writeln!(s, "@univariate {}", file.dimensions == 1);
    let _ = writeln!(s, "@dimensions {}", file.dimensions);
    let _ = writeln!(s, "@equalLength {}", file.equal_length);
    if let Some(l) = file.series_length {
        let _ = writeln!(s, "@seriesLength {l}");
    }
    let _ = writeln!(s, "@classLabel true {}", file.class_names.join(" "));
    let _ = writeln!(s, "@data");
    for r in &file.records {
        for ch in &r.channels {
            let vals: Vec<String> = ch
                .iter()
                .map(|v| if v.is_nan() { "?".to_string() } else { format!("{v:?}") })
                .collect();
            s.push_str(&vals.join(","));
            s.push(':');
        }
        s.push_str(&file.class_names[r.label]);
        s.push('\n');
    }
    s
}

/// Long-form CSV: `sample_id,channel_id,label,v0,v1,...`, one row per
/// (sample, channel). A first row starting with `sample_id` is a header.
/// Rows of one sample may appear in any order; channels must be
/// `0..D` for every sample.
///
/// `class_names` fixes the label order (use the training split's); when
/// `None` the sorted set of labels found is used.
pub fn parse_csv(text: &str, class_names: Option<&[String]>) -> Result<TsFile> {
    use std::collections::BTreeMap;
    let mut samples: BTreeMap<u64, (String, BTreeMap<usize, Vec<f64>>)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || (i == 0 && line.starts_with("sample_id")) {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(Error::Format {
                line: line_no,
                msg: "expected sample_id, channel_id, label and at least one value".into(),
            });
        }
        let sample: u64 = fields[0].trim().parse().map_err(|_| Error::Format {
            line: line_no,
            msg: format!("bad sample_id `{}`", fields[0]),
        })?;
        let channel: usize = fields[1].trim().parse().map_err(|_| Error::Format {
            line: line_no,
            msg: format!("bad channel_id `{}`", fields[1]),
        })?;
        let label = fields[2].trim().to_string();
        let values = parse_values(&fields[3..].join(",")).map_err(|msg| Error::Format { line: line_no, msg })?;
        let entry = samples.entry(sample).or_insert_with(|| (label.clone(), BTreeMap::new()));
        if entry.0 != label {
            return Err(Error::Format {
                line: line_no,
                msg: format!("sample {sample} has labels `{}` and `{label}`", entry.0),
            });
        }
        if entry.1.insert(channel, values).is_some() {
            return Err(Error::Format {
                line: line_no,
                msg: format!("sample {sample} repeats channel {channel}"),
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::Format { line: 1, msg: "no rows".into() });
    }
    let names: Vec<String> = match class_names {
        Some(n) => n.to_vec(),
        None => {
            let mut n: Vec<String> = samples.values().map(|(l, _)| l.clone()).collect();
            n.sort();
            n.dedup();
            n
        }
    };
    let dims = samples.values().next().unwrap().1.len();
    let mut records = Vec::with_capacity(samples.len());
    for (index, (id, (label, chans))) in samples.into_iter().enumerate() {
        if chans.len() != dims || chans.keys().enumerate().any(|(i, &c)| i != c) {
            return Err(Error::Record {
                index,
                msg: format!("sample {id} has channels {:?}, expected 0..{dims}", chans.keys().collect::<Vec<_>>()),
            });
        }
        let label = names.iter().position(|n| *n == label).ok_or(Error::Label { index, label })?;
        records.push(RawSeries {
            channels: chans.into_values().collect(),
            label,
        });
    }
    let mut file = TsFile {
        problem_name: String::new(),
        dimensions: dims,
        series_length: None,
        equal_length: true,
        class_names: names,
        records,
    };
    file.equal_length = !file.is_variable_length();
    if file.equal_length {
        file.series_length = Some(file.max_length());
    }
    Ok(file)
}

pub fn read_csv(path: &Path, class_names: Option<&[String]>) -> Result<TsFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut f = parse_csv(&text, class_names)?;
    f.problem_name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(f)
}
