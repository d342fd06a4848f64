//! Model JSON and dataset CSV formats.
//!
//! Matrices are row-major nested arrays. Mode indices are 1-based in every
//! file. The transition matrix is stored as `T[j][i] = P(z_{k+1} = j | z_k = i)`
//! (columns sum to one).

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{JmlsError, Result};
use crate::mixture::{GaussianComponent, HybridMixture};
use crate::model::{Convention, JmlsModel, ModeParams};
use crate::numkit::UtFactor;
use crate::simulate::Dataset;

/// Stored alongside `T` in every model file.
pub const TRANSITION_CONVENTION: &str = "column-stochastic: T[j][i] = P(z_{k+1} = j | z_k = i)";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    n_x: usize,
    n_u: usize,
    n_y: usize,
    m: usize,
    #[serde(default)]
    convention: Convention,
    #[serde(default)]
    transition_convention: Option<String>,
    #[serde(rename = "T")]
    transition: Vec<Vec<f64>>,
    modes: Vec<ModeFile>,
    prior: PriorFile,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModeFile {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
    #[serde(rename = "D")]
    d: Vec<Vec<f64>>,
    #[serde(rename = "Pi_half")]
    pi_half: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorFile {
    components: Vec<PriorComponentFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PriorComponentFile {
    mode: usize,
    log_weight: f64,
    mu: Vec<f64>,
    #[serde(rename = "P_half")]
    p_half: Vec<Vec<f64>>,
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], shape: (usize, usize), what: &str) -> Result<DMatrix<f64>> {
    let bad = || JmlsError::Parse(format!("{what}: expected a {}x{} matrix", shape.0, shape.1));
    if rows.len() != shape.0 || rows.iter().any(|r| r.len() != shape.1) {
        // an n×0 block may be written as an empty list
        if shape.1 == 0 && (rows.is_empty() || rows.iter().all(Vec::is_empty)) {
            return Ok(DMatrix::zeros(shape.0, 0));
        }
        return Err(bad());
    }
    Ok(DMatrix::from_fn(shape.0, shape.1, |i, j| rows[i][j]))
}

fn upper(m: DMatrix<f64>, what: &str) -> Result<UtFactor> {
    for i in 0..m.nrows() {
        for j in 0..i {
            if m[(i, j)] != 0.0 {
                return Err(JmlsError::Parse(format!("{what}: factor must be upper triangular")));
            }
        }
    }
    Ok(UtFactor::from_upper(m))
}

/// Serializes a model to pretty-printed JSON.
pub fn model_to_json(model: &JmlsModel) -> String {
    let file = ModelFile {
        n_x: model.n_x(),
        n_u: model.n_u(),
        n_y: model.n_y(),
        m: model.num_modes(),
        convention: model.convention,
        transition_convention: Some(TRANSITION_CONVENTION.to_string()),
        transition: to_rows(&model.transition),
        modes: model
            .modes
            .iter()
            .map(|md| ModeFile {
                a: to_rows(&md.a),
                b: to_rows(&md.b),
                c: to_rows(&md.c),
                d: to_rows(&md.d),
                pi_half: to_rows(md.pi_half.matrix()),
            })
            .collect(),
        prior: PriorFile {
            components: model
                .prior
                .iter()
                .map(|(z, c)| PriorComponentFile {
                    mode: z + 1,
                    log_weight: c.log_w,
                    mu: c.mu.iter().copied().collect(),
                    p_half: to_rows(c.p_half.matrix()),
                })
                .collect(),
        },
    };
    let mut s = serde_json::to_string_pretty(&file).expect("model serialization cannot fail");
    s.push('\n');
    s
}

/// Parses a model from JSON text. Shape errors name the offending field;
/// syntax errors carry the line and column.
pub fn model_from_json(text: &str) -> Result<JmlsModel> {
    let f: ModelFile = serde_json::from_str(text).map_err(|e| JmlsError::Parse(e.to_string()))?;
    let (n_x, n_u, n_y, m) = (f.n_x, f.n_u, f.n_y, f.m);
    if f.modes.len() != m {
        return Err(JmlsError::Parse(format!("expected {m} modes, found {}", f.modes.len())));
    }
    let modes = f
        .modes
        .iter()
        .enumerate()
        .map(|(z, md)| {
            let tag = |x: &str| format!("mode {} {x}", z + 1);
            ModeParams::new(
                from_rows(&md.a, (n_x, n_x), &tag("A"))?,
                from_rows(&md.b, (n_x, n_u), &tag("B"))?,
                from_rows(&md.c, (n_y, n_x), &tag("C"))?,
                from_rows(&md.d, (n_y, n_u), &tag("D"))?,
                upper(from_rows(&md.pi_half, (n_y + n_x, n_y + n_x), &tag("Pi_half"))?, &tag("Pi_half"))?,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let transition = from_rows(&f.transition, (m, m), "T")?;
    let mut prior = HybridMixture::empty(m);
    for (idx, c) in f.prior.components.iter().enumerate() {
        let tag = format!("prior component {}", idx + 1);
        if c.mode == 0 || c.mode > m {
            return Err(JmlsError::Parse(format!("{tag}: mode {} out of range 1..{m}", c.mode)));
        }
        if c.mu.len() != n_x {
            return Err(JmlsError::Parse(format!("{tag}: mean must have length {n_x}")));
        }
        let p_half = upper(from_rows(&c.p_half, (n_x, n_x), &tag)?, &tag)?;
        prior.modes[c.mode - 1].push(GaussianComponent::new(c.log_weight, DVector::from_vec(c.mu.clone()), p_half));
    }
    Ok(JmlsModel { modes, transition, prior, convention: f.convention })
}

pub fn read_model(path: &Path) -> Result<JmlsModel> {
    let text = std::fs::read_to_string(path)?;
    model_from_json(&text).map_err(|e| match e {
        JmlsError::Parse(msg) => JmlsError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_model(path: &Path, model: &JmlsModel) -> Result<()> {
    std::fs::write(path, model_to_json(model))?;
    Ok(())
}

/// Writes `k,u1…,y1…[,z,x1…]` with 17 significant digits. Ground truth is
/// written when present (states `x_1 … x_N`).
pub fn write_dataset_csv<W: Write>(out: &mut W, data: &Dataset) -> std::io::Result<()> {
    let (n_u, n_y) = (data.n_u(), data.n_y());
    let truth = match (&data.x, &data.z) {
        (Some(x), Some(z)) => Some((x, z)),
        _ => None,
    };
    let mut head = String::from("k");
    (1..=n_u).for_each(|i| write!(head, ",u{i}").unwrap());
    (1..=n_y).for_each(|i| write!(head, ",y{i}").unwrap());
    if let Some((x, _)) = truth {
        head.push_str(",z");
        (1..=x[0].len()).for_each(|i| write!(head, ",x{i}").unwrap());
    }
    writeln!(out, "{head}")?;
    let mut line = String::new();
    for k in 0..data.len() {
        line.clear();
        write!(line, "{}", k + 1).unwrap();
        for v in data.u[k].iter().chain(data.y[k].iter()) {
            write!(line, ",{v:.16e}").unwrap();
        }
        if let Some((x, z)) = truth {
            write!(line, ",{}", z[k] + 1).unwrap();
            for v in x[k].iter() {
                write!(line, ",{v:.16e}").unwrap();
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads a dataset CSV. Columns are recognized by name (`u*`, `y*`, `z`,
/// `x*`); a `z` column is kept as ground truth, state columns are ignored.
pub fn read_dataset_csv<R: std::io::Read>(input: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let located = |line: u64, msg: String| JmlsError::Parse(format!("line {line}: {msg}"));
    let cols: Vec<String> = reader.headers().map_err(|e| located(1, e.to_string()))?.iter().map(str::to_string).collect();
    let idx = |p: char| -> Vec<usize> {
        cols.iter().enumerate().filter(|(_, c)| c.len() > 1 && c.starts_with(p) && c[1..].parse::<usize>().is_ok()).map(|(i, _)| i).collect()
    };
    let (u_idx, y_idx) = (idx('u'), idx('y'));
    let z_idx = cols.iter().position(|c| c == "z");
    if y_idx.is_empty() {
        return Err(located(1, "no output columns (y1, y2, ...)".into()));
    }
    let mut u = Vec::new();
    let mut y = Vec::new();
    let mut z = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            located(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64> {
            rec[i].parse::<f64>().map_err(|_| located(line, format!("bad number {:?} in column {}", &rec[i], cols[i])))
        };
        u.push(DVector::from_vec(u_idx.iter().map(|&i| num(i)).collect::<Result<_>>()?));
        y.push(DVector::from_vec(y_idx.iter().map(|&i| num(i)).collect::<Result<_>>()?));
        if let Some(i) = z_idx {
            let v = rec[i].parse::<usize>().ok().filter(|&v| v >= 1);
            z.push(v.ok_or_else(|| located(line, format!("bad mode index {:?}", &rec[i])))? - 1);
        }
    }
    let mut data = Dataset::new(u, y)?;
    if z_idx.is_some() {
        data.z = Some(z);
    }
    Ok(data)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_dataset_csv(std::io::BufReader::new(f)).map_err(|e| match e {
        JmlsError::Parse(msg) => JmlsError::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset_csv(&mut f, data)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{benchmark_scalar_system, random_model};
    use crate::simulate::{simulate, InputLaw};

    #[test]
    fn model_round_trip() {
        for model in [benchmark_scalar_system(), random_model(3, 2, 2, 2, 1)] {
            let text = model_to_json(&model);
            assert_eq!(model_from_json(&text).unwrap(), model);
        }
    }

    #[test]
    fn parse_errors_are_located() {
        let err = model_from_json("{\n  \"n_x\": 1,\n  oops\n}").unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let mut text = model_to_json(&benchmark_scalar_system());
        text = text.replacen("\"mode\": 1", "\"mode\": 7", 1);
        assert!(model_from_json(&text).unwrap_err().to_string().contains("out of range"));
    }

    #[test]
    fn dataset_round_trip() {
        let model = random_model(2, 2, 1, 3, 4);
        let data = simulate(&model, &InputLaw::StandardNormal, 25, 4).unwrap();
        let mut buf = Vec::new();
        write_dataset_csv(&mut buf, &data).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("k,u1,u2,y1,z,x1,x2\n"));
        let back = read_dataset_csv(text.as_bytes()).unwrap();
        assert_eq!(back.u, data.u);
        assert_eq!(back.y, data.y);
        assert_eq!(back.z, data.z);
    }

    #[test]
    fn bad_dataset_line_reported() {
        let err = read_dataset_csv("k,u1,y1\n1,0.5,1.0\n2,abc,1.0\n".as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
    }
}
