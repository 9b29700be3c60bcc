//! Line-delimited JSON inputs.

use std::path::{Path, PathBuf};

use rsvlm::{Error, Matrix};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::Value;

/// Parses every non-blank line, naming the line on failure.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, Error> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::InvalidInput(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), Error> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// An image given inline as a number array (one patch) or an array of
/// patch rows, or as a path to a JSON file holding either. Relative paths
/// resolve against `base`.
pub fn parse_image(v: &Value, base: &Path) -> Result<Matrix, Error> {
    match v {
        Value::String(p) => {
            let mut path = PathBuf::from(p);
            if path.is_relative() {
                path = base.join(path);
            }
            let text = std::fs::read_to_string(&path)?;
            let inner: Value = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
            parse_image(&inner, base)
        }
        Value::Array(items) if items.iter().all(Value::is_number) => {
            let row = numbers(items)?;
            Ok(Matrix::row_vector(&row))
        }
        Value::Array(items) => {
            let rows = items
                .iter()
                .map(|r| match r {
                    Value::Array(xs) => numbers(xs),
                    _ => Err(Error::InvalidInput("image rows must be number arrays".into())),
                })
                .collect::<Result<Vec<_>, _>>()?;
            Matrix::from_rows(&rows)
        }
        _ => Err(Error::InvalidInput("image must be a number array, a patch matrix or a file path".into())),
    }
}

fn numbers(xs: &[Value]) -> Result<Vec<f64>, Error> {
    xs.iter()
        .map(|x| x.as_f64().ok_or_else(|| Error::InvalidInput(format!("not a number: {x}"))))
        .collect()
}

pub fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

#[derive(Debug, Deserialize)]
pub struct TextLine {
    pub text: String,
}

#[derive(Debug, Deserialize)]
pub struct PairLine {
    pub image: Value,
    pub text: String,
}

/// Training or evaluation sample. Alignment samples carry `caption`;
/// instruction samples carry `query` and `response`; evaluation samples
/// carry `id` plus the ground-truth field of their task.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleLine {
    pub id: Option<Value>,
    pub image: Value,
    pub caption: Option<String>,
    pub query: Option<String>,
    pub response: Option<String>,
    pub semantics: Option<Vec<String>>,
    pub label: Option<String>,
    pub boxes: Option<Vec<[f64; 4]>>,
    pub references: Option<Vec<String>>,
}
