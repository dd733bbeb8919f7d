//! Labeled per-domain samples and panel CSV ingestion.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// `n` rows of `D` values: `D - 1` features followed by the label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub id: String,
    pub columns: Vec<String>,
    pub rows: Tensor,
}

impl DomainDataset {
    pub fn new(id: impl Into<String>, columns: Vec<String>, rows: Tensor) -> Result<Self> {
        let id = id.into();
        if rows.rows() == 0 {
            return Err(invalid(format!("domain {id:?} has no rows")));
        }
        if rows.cols() < 2 {
            return Err(invalid(format!("domain {id:?} needs at least one feature and a label")));
        }
        if columns.len() != rows.cols() {
            return Err(invalid(format!(
                "domain {id:?}: {} column names for {} columns",
                columns.len(),
                rows.cols()
            )));
        }
        if !rows.is_finite() {
            return Err(invalid(format!("domain {id:?} contains non-finite values")));
        }
        Ok(Self { id, columns, rows })
    }

    /// Dataset with generic column names `x1.. , y`.
    pub fn unnamed(id: impl Into<String>, rows: Tensor) -> Result<Self> {
        let d = rows.cols();
        let mut columns: Vec<String> = (1..d).map(|i| format!("x{i}")).collect();
        columns.push("y".into());
        Self::new(id, columns, rows)
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn features(&self) -> Tensor {
        self.rows.select_cols(0, self.dim() - 1)
    }

    pub fn labels(&self) -> Vec<f64> {
        self.rows.column(self.dim() - 1)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            id: self.id.clone(),
            columns: self.columns.clone(),
            rows: self.rows.select_rows(indices),
        }
    }
}

/// Stacks the rows of several domains.
pub fn pool_rows(domains: &[DomainDataset]) -> Result<Tensor> {
    let Some(first) = domains.first() else {
        return Err(invalid("cannot pool zero domains"));
    };
    let d = first.dim();
    let mut data = Vec::new();
    for dom in domains {
        if dom.dim() != d {
            return Err(invalid(format!(
                "domain {:?} has {} columns, expected {d}",
                dom.id,
                dom.dim()
            )));
        }
        data.extend_from_slice(dom.rows.data());
    }
    let n = data.len() / d;
    Tensor::matrix(n, d, data)
}

/// Column mapping for a panel CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelSchema {
    pub domain_column: String,
    pub feature_columns: Vec<String>,
    pub label_column: String,
}

impl PanelSchema {
    /// Columns of the gasoline-consumption panel.
    pub fn gasoline() -> Self {
        Self {
            domain_column: "COUNTRY".into(),
            feature_columns: vec!["LINCOMEP".into(), "LRPMG".into(), "LCARPCAP".into()],
            label_column: "LGASPCAR".into(),
        }
    }

    pub fn value_columns(&self) -> Vec<String> {
        let mut c = self.feature_columns.clone();
        c.push(self.label_column.clone());
        c
    }
}

fn find_column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .or_else(|| headers.iter().position(|h| h.trim().eq_ignore_ascii_case(name)))
}

/// Reads a panel CSV with a header row into one dataset per distinct domain
/// value, in order of first appearance. Values are taken as-is. Header
/// lookup falls back to case-insensitive matching.
pub fn load_panel_csv(path: impl AsRef<Path>, schema: &PanelSchema) -> Result<Vec<DomainDataset>> {
    let path = path.as_ref();
    let context = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    read_panel(&mut reader, schema, &context)
}

pub fn read_panel<R: std::io::Read>(
    reader: &mut csv::Reader<R>,
    schema: &PanelSchema,
    context: &str,
) -> Result<Vec<DomainDataset>> {
    let headers = reader.headers()?.clone();
    let missing = |name: &str| Error::Data {
        context: context.to_string(),
        row: 1,
        message: format!("missing column {name:?} (header: {})", headers.iter().collect::<Vec<_>>().join(",")),
    };
    let domain_idx = find_column(&headers, &schema.domain_column).ok_or_else(|| missing(&schema.domain_column))?;
    let value_idx = schema
        .value_columns()
        .iter()
        .map(|c| find_column(&headers, c).ok_or_else(|| missing(c)))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record?;
        let domain = record
            .get(domain_idx)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Data {
                context: context.to_string(),
                row: line,
                message: "empty domain value".into(),
            })?
            .to_string();
        let entry = rows.entry(domain.clone()).or_insert_with(|| {
            order.push(domain.clone());
            Vec::new()
        });
        for (&col, name) in value_idx.iter().zip(schema.value_columns()) {
            let cell = record.get(col).unwrap_or("").trim();
            let value: f64 = cell.parse().map_err(|_| Error::Data {
                context: context.to_string(),
                row: line,
                message: format!("column {name:?}: {cell:?} is not a number"),
            })?;
            if !value.is_finite() {
                return Err(Error::Data {
                    context: context.to_string(),
                    row: line,
                    message: format!("column {name:?}: non-finite value"),
                });
            }
            entry.push(value);
        }
    }
    let d = value_idx.len();
    order
        .into_iter()
        .map(|id| {
            let data = rows.remove(&id).unwrap_or_default();
            let n = data.len() / d;
            DomainDataset::new(id, schema.value_columns(), Tensor::matrix(n, d, data)?)
        })
        .collect()
}

/// Writes datasets in the panel layout (domain column first).
pub fn write_panel_csv(path: impl AsRef<Path>, schema: &PanelSchema, domains: &[DomainDataset]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![schema.domain_column.clone()];
    header.extend(schema.value_columns());
    w.write_record(&header)?;
    for dom in domains {
        for row in dom.rows.iter_rows() {
            let mut rec = vec![dom.id.clone()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
