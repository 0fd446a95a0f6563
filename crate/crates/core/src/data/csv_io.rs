//! Dataset CSV format: a header row, covariate columns `f0..f{d-1}`, then `t`, `y`
//! and optionally `y0`, `y1`, `e`. Floats are written in Rust's shortest
//! round-trip decimal form, so a save/load cycle is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, OutcomeType};
use crate::error::{Error, Result};
use crate::numcore::Tensor2D;

/// Column mapping used by [`load_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    /// When false, columns are addressed positionally as `c0, c1, …`.
    pub has_header: bool,
    /// Explicit covariate columns; `None` selects every column named `f<digits>`.
    pub features: Option<Vec<String>>,
    pub treatment: String,
    pub outcome: String,
    pub y0: Option<String>,
    pub y1: Option<String>,
    /// Counterfactual-outcome column; when set, `y0`/`y1` are assembled from the
    /// factual and counterfactual columns according to `t`.
    pub counterfactual: Option<String>,
    pub propensity: Option<String>,
    /// `None` infers binary when every outcome value is 0 or 1.
    pub outcome_type: Option<OutcomeType>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            has_header: true,
            features: None,
            treatment: "t".into(),
            outcome: "y".into(),
            y0: Some("y0".into()),
            y1: Some("y1".into()),
            counterfactual: None,
            propensity: Some("e".into()),
            outcome_type: None,
        }
    }
}

impl CsvSchema {
    /// Headerless IHDP realization files: `treatment, y_factual, y_cfactual, mu0, mu1,
    /// x1..x25`.
    pub fn ihdp() -> Self {
        Self {
            has_header: false,
            features: Some((5..30).map(|j| format!("c{j}")).collect()),
            treatment: "c0".into(),
            outcome: "c1".into(),
            y0: None,
            y1: None,
            counterfactual: Some("c2".into()),
            propensity: None,
            outcome_type: Some(OutcomeType::Continuous),
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: &CsvSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut records = Vec::new();
    for rec in rdr.records() {
        records.push(rec?);
    }
    let header: Vec<String> = if schema.has_header {
        rdr.headers()?.iter().map(str::to_owned).collect()
    } else {
        let width = records.first().map_or(0, |r| r.len());
        (0..width).map(|j| format!("c{j}")).collect()
    };

    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };
    let optional = |name: &Option<String>| -> Option<usize> {
        name.as_ref()
            .and_then(|n| header.iter().position(|h| h == n))
    };

    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names.iter().map(|n| find(n)).collect::<Result<_>>()?,
        None => header
            .iter()
            .enumerate()
            .filter(|(_, h)| {
                h.len() > 1 && h.starts_with('f') && h[1..].chars().all(|c| c.is_ascii_digit())
            })
            .map(|(i, _)| i)
            .collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::Schema("no covariate columns found".into()));
    }
    let t_col = find(&schema.treatment)?;
    let y_col = find(&schema.outcome)?;
    let cf_col = match &schema.counterfactual {
        Some(n) => Some(find(n)?),
        None => None,
    };
    let y0_col = optional(&schema.y0);
    let y1_col = optional(&schema.y1);
    if y0_col.is_some() != y1_col.is_some() {
        return Err(Error::Schema(
            "columns y0 and y1 must appear together".into(),
        ));
    }
    let e_col = optional(&schema.propensity);

    let n = records.len();
    let d = feature_cols.len();
    let mut x = Vec::with_capacity(n * d);
    let mut t = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut y0 = Vec::new();
    let mut y1 = Vec::new();
    let mut e = Vec::new();

    for (r, rec) in records.iter().enumerate() {
        // 1-based file line number, counting the header
        let line = r + 1 + usize::from(schema.has_header);
        let num = |col: usize| -> Result<f64> {
            let cell = rec.get(col).ok_or_else(|| Error::Parse {
                row: line,
                column: header[col].clone(),
                message: "row is too short".into(),
            })?;
            cell.parse::<f64>().map_err(|_| Error::Parse {
                row: line,
                column: header[col].clone(),
                message: format!("`{cell}` is not a number"),
            })
        };
        for &c in &feature_cols {
            x.push(num(c)?);
        }
        let tv = num(t_col)?;
        let ti = if tv == 0.0 {
            0u8
        } else if tv == 1.0 {
            1u8
        } else {
            return Err(Error::Validation(format!(
                "row {line}: treatment {tv} is not 0 or 1"
            )));
        };
        t.push(ti);
        let yf = num(y_col)?;
        y.push(yf);
        if let Some(c) = cf_col {
            let ycf = num(c)?;
            if ti == 1 {
                y0.push(ycf);
                y1.push(yf);
            } else {
                y0.push(yf);
                y1.push(ycf);
            }
        } else if let (Some(c0), Some(c1)) = (y0_col, y1_col) {
            y0.push(num(c0)?);
            y1.push(num(c1)?);
        }
        if let Some(c) = e_col {
            e.push(num(c)?);
        }
    }

    let has_po = cf_col.is_some() || y0_col.is_some();
    let outcome_type = schema.outcome_type.unwrap_or_else(|| {
        let is_bin = |v: &f64| *v == 0.0 || *v == 1.0;
        if y.iter().all(is_bin) && y0.iter().all(is_bin) && y1.iter().all(is_bin) {
            OutcomeType::Binary
        } else {
            OutcomeType::Continuous
        }
    });
    let ds = Dataset {
        x: Tensor2D::from_vec(n, d, x)?,
        t,
        y,
        y0: has_po.then_some(y0),
        y1: has_po.then_some(y1),
        propensity: e_col.map(|_| e),
        outcome_type,
        feature_names: feature_cols.iter().map(|&c| header[c].clone()).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_csv(ds, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ds.feature_names.clone();
    header.extend(["t".to_string(), "y".to_string()]);
    if ds.has_potential_outcomes() {
        header.extend(["y0".to_string(), "y1".to_string()]);
    }
    if ds.propensity.is_some() {
        header.push("e".into());
    }
    w.write_record(&header)?;

    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for i in 0..ds.n() {
        row.clear();
        row.extend(ds.x.row(i).iter().map(|v| v.to_string()));
        row.push(ds.t[i].to_string());
        row.push(ds.y[i].to_string());
        if let (Some(y0), Some(y1)) = (&ds.y0, &ds.y1) {
            row.push(y0[i].to_string());
            row.push(y1[i].to_string());
        }
        if let Some(e) = &ds.propensity {
            row.push(e[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}
