//! File artifacts: CSV and JSON serialization for grids, moment sets,
//! kernels and diagnostics.
//!
//! Every file starts with three comment lines carrying the tool version,
//! a configuration hash and a hash of the grids involved, so any output
//! can be traced back to the exact setup that produced it. Floats are
//! written with the shortest representation that parses back to the same
//! bits, which makes write-read round trips exact and reruns
//! byte-identical. Readers validate the time columns against the grid
//! they are given instead of trusting the file.

use crate::error::{Error, Result};
use crate::grids::TimeGrid;
use crate::liquidity::{LaggedCorrelation, SignalSeries, SurvivalTail};
use crate::moments::MomentSet;
use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Provenance stamp embedded in every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub version: String,
    pub config_hash: String,
    pub grid_hash: String,
}

impl ArtifactMeta {
    pub fn new(config_hash: impl Into<String>, grid_hash: impl Into<String>) -> Self {
        ArtifactMeta {
            version: TOOL_VERSION.to_string(),
            config_hash: config_hash.into(),
            grid_hash: grid_hash.into(),
        }
    }

    fn write_header<W: Write>(&self, w: &mut W, extra: &[(&str, String)]) -> Result<()> {
        writeln!(w, "# version: {}", self.version)?;
        writeln!(w, "# config_hash: {}", self.config_hash)?;
        writeln!(w, "# grid_hash: {}", self.grid_hash)?;
        for (key, value) in extra {
            writeln!(w, "# {key}: {value}")?;
        }
        Ok(())
    }

    /// The comment header as a string, for formats whose body is written by
    /// other code (for example simulated session files).
    pub fn header(&self) -> String {
        let mut buf = Vec::new();
        self.write_header(&mut buf, &[]).expect("write to Vec");
        String::from_utf8(buf).expect("header is ascii")
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hash of one or more grids: the point coordinates as raw bits, with
/// each grid's length as a separator so concatenations cannot collide.
pub fn grid_hash(grids: &[&TimeGrid]) -> String {
    let mut bytes = Vec::new();
    for g in grids {
        bytes.extend_from_slice(&(g.len() as u64).to_le_bytes());
        for &p in g.points() {
            bytes.extend_from_slice(&p.to_bits().to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

// ===== parsing helpers =====

/// Splits an artifact into its `#` comment lines (as key/value pairs)
/// and the body that follows.
fn split_comments(text: &str) -> (Vec<(String, String)>, &str) {
    let mut pairs = Vec::new();
    let mut rest = text;
    while rest.starts_with('#') {
        let (line, tail) = match rest.split_once('\n') {
            Some((l, t)) => (l, t),
            None => (rest, ""),
        };
        let line = line.trim_start_matches('#').trim();
        if let Some((key, value)) = line.split_once(':') {
            pairs.push((key.trim().to_string(), value.trim().to_string()));
        }
        rest = tail;
    }
    (pairs, rest)
}

fn meta_from_comments(pairs: &[(String, String)]) -> Result<ArtifactMeta> {
    let find = |key: &str| {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::data(format!("artifact header is missing '# {key}: ...'")))
    };
    Ok(ArtifactMeta {
        version: find("version")?,
        config_hash: find("config_hash")?,
        grid_hash: find("grid_hash")?,
    })
}

fn comment_value(pairs: &[(String, String)], key: &str) -> Result<String> {
    pairs
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.clone())
        .ok_or_else(|| Error::data(format!("artifact header is missing '# {key}: ...'")))
}

struct CsvBody {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// Reads everything, peels the comment header, and splits the CSV body
/// into owned fields. Artifacts are small enough that buffering whole
/// files is simpler and safer than streaming through comment handling.
fn read_artifact<R: Read>(mut r: R) -> Result<(Vec<(String, String)>, CsvBody)> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    let (comments, body) = split_comments(&text);
    let mut lines = body.lines();
    let header: Vec<String> = match lines.next() {
        Some(h) => h.split(',').map(|s| s.to_string()).collect(),
        None => return Err(Error::data("artifact has no CSV header")),
    };
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        if fields.len() != header.len() {
            return Err(Error::Parse {
                line: (k + 2) as u64,
                msg: format!("expected {} fields, got {}", header.len(), fields.len()),
            });
        }
        rows.push(fields);
    }
    Ok((comments, CsvBody { header, rows }))
}

fn expect_header(body: &CsvBody, expected: &[&str]) -> Result<()> {
    if body.header != expected {
        return Err(Error::data(format!(
            "unexpected CSV columns {:?}, want {:?}",
            body.header, expected
        )));
    }
    Ok(())
}

fn parse_f64(field: &str, row: usize) -> Result<f64> {
    field.parse::<f64>().map_err(|_| Error::Parse {
        line: (row + 2) as u64,
        msg: format!("bad float '{field}'"),
    })
}

fn parse_usize(field: &str, row: usize) -> Result<usize> {
    field.parse::<usize>().map_err(|_| Error::Parse {
        line: (row + 2) as u64,
        msg: format!("bad index '{field}'"),
    })
}

/// Bitwise agreement check between a file's time column and the grid the
/// caller expects the data to live on.
fn expect_time(t: f64, grid: &TimeGrid, idx: usize, row: usize) -> Result<()> {
    if t.to_bits() != grid.points()[idx].to_bits() {
        return Err(Error::Parse {
            line: (row + 2) as u64,
            msg: format!("time {t} does not match grid point {} at index {idx}", grid.points()[idx]),
        });
    }
    Ok(())
}

// ===== grids =====

/// Writes a grid as `t,w,lo,hi`: points, quadrature weights and
/// estimation intervals.
pub fn write_grid_csv<W: Write>(w: &mut W, grid: &TimeGrid, meta: &ArtifactMeta) -> Result<()> {
    meta.write_header(w, &[])?;
    writeln!(w, "t,w,lo,hi")?;
    for i in 0..grid.len() {
        let (lo, hi) = grid.intervals()[i];
        writeln!(w, "{},{},{},{}", grid.points()[i], grid.weights()[i], lo, hi)?;
    }
    Ok(())
}

/// Reads a grid file, rebuilding the grid from its points and verifying
/// that the stored weights and intervals match the derived ones exactly.
pub fn read_grid_csv<R: Read>(r: R) -> Result<(TimeGrid, ArtifactMeta)> {
    let (comments, body) = read_artifact(r)?;
    let meta = meta_from_comments(&comments)?;
    expect_header(&body, &["t", "w", "lo", "hi"])?;
    let mut points = Vec::with_capacity(body.rows.len());
    for (k, row) in body.rows.iter().enumerate() {
        points.push(parse_f64(&row[0], k)?);
    }
    let grid = TimeGrid::from_points(points)?;
    for (k, row) in body.rows.iter().enumerate() {
        let w = parse_f64(&row[1], k)?;
        let lo = parse_f64(&row[2], k)?;
        let hi = parse_f64(&row[3], k)?;
        let (dlo, dhi) = grid.intervals()[k];
        if w.to_bits() != grid.weights()[k].to_bits()
            || lo.to_bits() != dlo.to_bits()
            || hi.to_bits() != dhi.to_bits()
        {
            return Err(Error::Parse {
                line: (k + 2) as u64,
                msg: "stored weights or intervals disagree with values derived from the points"
                    .to_string(),
            });
        }
    }
    Ok((grid, meta))
}

// ===== kernels and curves =====

/// Writes per-type curves as `i,t,value`, types in index order.
pub fn write_curves_csv<W: Write>(
    w: &mut W,
    grid: &TimeGrid,
    curves: &[Vec<f64>],
    meta: &ArtifactMeta,
) -> Result<()> {
    write_curves_csv_named(w, grid, curves, meta, "value")
}

/// Same layout as [`write_curves_csv`] with a caller-chosen name for the
/// value column.
pub fn write_curves_csv_named<W: Write>(
    w: &mut W,
    grid: &TimeGrid,
    curves: &[Vec<f64>],
    meta: &ArtifactMeta,
    value_col: &str,
) -> Result<()> {
    meta.write_header(w, &[])?;
    writeln!(w, "i,t,{value_col}")?;
    for (i, curve) in curves.iter().enumerate() {
        if curve.len() != grid.len() {
            return Err(Error::data(format!(
                "curve {i} has {} values for a {}-point grid",
                curve.len(),
                grid.len()
            )));
        }
        for (t, v) in grid.points().iter().zip(curve) {
            writeln!(w, "{i},{t},{v}")?;
        }
    }
    Ok(())
}

/// Reads `i,t,value` curves written by [`write_curves_csv`]. Rows must
/// arrive in write order; the time column must match `grid` bit for bit.
pub fn read_curves_csv<R: Read>(r: R, grid: &TimeGrid) -> Result<(Vec<Vec<f64>>, ArtifactMeta)> {
    read_curves_csv_named(r, grid, "value")
}

/// Counterpart of [`write_curves_csv_named`].
pub fn read_curves_csv_named<R: Read>(
    r: R,
    grid: &TimeGrid,
    value_col: &str,
) -> Result<(Vec<Vec<f64>>, ArtifactMeta)> {
    let (comments, body) = read_artifact(r)?;
    let meta = meta_from_comments(&comments)?;
    expect_header(&body, &["i", "t", value_col])?;
    let np = grid.len();
    if body.rows.len() % np != 0 {
        return Err(Error::data(format!(
            "row count {} is not a multiple of the {np}-point grid",
            body.rows.len()
        )));
    }
    let n_types = body.rows.len() / np;
    let mut curves = vec![Vec::with_capacity(np); n_types];
    for (k, row) in body.rows.iter().enumerate() {
        let i = parse_usize(&row[0], k)?;
        if i != k / np {
            return Err(Error::Parse {
                line: (k + 2) as u64,
                msg: format!("type index {i} out of order, expected {}", k / np),
            });
        }
        expect_time(parse_f64(&row[1], k)?, grid, k % np, k)?;
        curves[i].push(parse_f64(&row[2], k)?);
    }
    Ok((curves, meta))
}

/// Writes an `n x n` kernel matrix as `i,j,t,value`.
pub fn write_matrix_csv<W: Write>(
    w: &mut W,
    grid: &TimeGrid,
    values: &[Vec<Vec<f64>>],
    meta: &ArtifactMeta,
) -> Result<()> {
    meta.write_header(w, &[])?;
    writeln!(w, "i,j,t,value")?;
    for (i, row) in values.iter().enumerate() {
        for (j, curve) in row.iter().enumerate() {
            if curve.len() != grid.len() {
                return Err(Error::data(format!(
                    "kernel ({i},{j}) has {} values for a {}-point grid",
                    curve.len(),
                    grid.len()
                )));
            }
            for (t, v) in grid.points().iter().zip(curve) {
                writeln!(w, "{i},{j},{t},{v}")?;
            }
        }
    }
    Ok(())
}

/// Reads `i,j,t,value` kernels written by [`write_matrix_csv`].
pub fn read_matrix_csv<R: Read>(
    r: R,
    grid: &TimeGrid,
) -> Result<(Vec<Vec<Vec<f64>>>, ArtifactMeta)> {
    let (comments, body) = read_artifact(r)?;
    let meta = meta_from_comments(&comments)?;
    expect_header(&body, &["i", "j", "t", "value"])?;
    let np = grid.len();
    let cells = body.rows.len() / np;
    let n = (cells as f64).sqrt().round() as usize;
    if n * n * np != body.rows.len() {
        return Err(Error::data(format!(
            "row count {} does not factor as n^2 x {np}",
            body.rows.len()
        )));
    }
    let mut values = vec![vec![Vec::with_capacity(np); n]; n];
    for (k, row) in body.rows.iter().enumerate() {
        let i = parse_usize(&row[0], k)?;
        let j = parse_usize(&row[1], k)?;
        if i != k / (n * np) || j != (k / np) % n {
            return Err(Error::Parse {
                line: (k + 2) as u64,
                msg: format!("kernel index ({i},{j}) out of order"),
            });
        }
        expect_time(parse_f64(&row[2], k)?, grid, k % np, k)?;
        values[i][j].push(parse_f64(&row[3], k)?);
    }
    Ok((values, meta))
}

/// Writes per-type surfaces as `i,t,x,value`, row-major over `(t, x)`.
pub fn write_surfaces_csv<W: Write>(
    w: &mut W,
    grid: &TimeGrid,
    surfaces: &[DMatrix<f64>],
    meta: &ArtifactMeta,
) -> Result<()> {
    meta.write_header(w, &[])?;
    writeln!(w, "i,t,x,value")?;
    let np = grid.len();
    for (i, s) in surfaces.iter().enumerate() {
        if s.nrows() != np || s.ncols() != np {
            return Err(Error::data(format!(
                "surface {i} is {}x{} for a {np}-point grid",
                s.nrows(),
                s.ncols()
            )));
        }
        for a in 0..np {
            for b in 0..np {
                writeln!(
                    w,
                    "{i},{},{},{}",
                    grid.points()[a],
                    grid.points()[b],
                    s[(a, b)]
                )?;
            }
        }
    }
    Ok(())
}

/// Reads `i,t,x,value` surfaces written by [`write_surfaces_csv`].
pub fn read_surfaces_csv<R: Read>(
    r: R,
    grid: &TimeGrid,
) -> Result<(Vec<DMatrix<f64>>, ArtifactMeta)> {
    let (comments, body) = read_artifact(r)?;
    let meta = meta_from_comments(&comments)?;
    expect_header(&body, &["i", "t", "x", "value"])?;
    let np = grid.len();
    let per_surface = np * np;
    if body.rows.len() % per_surface != 0 {
        return Err(Error::data(format!(
            "row count {} is not a multiple of {np}x{np}",
            body.rows.len()
        )));
    }
    let n_types = body.rows.len() / per_surface;
    let mut surfaces = vec![DMatrix::zeros(np, np); n_types];
    for (k, row) in body.rows.iter().enumerate() {
        let i = parse_usize(&row[0], k)?;
        let a = (k / np) % np;
        let b = k % np;
        if i != k / per_surface {
            return Err(Error::Parse {
                line: (k + 2) as u64,
                msg: format!("surface index {i} out of order"),
            });
        }
        expect_time(parse_f64(&row[1], k)?, grid, a, k)?;
        expect_time(parse_f64(&row[2], k)?, grid, b, k)?;
        surfaces[i][(a, b)] = parse_f64(&row[3], k)?;
    }
    Ok((surfaces, meta))
}

// ===== named scalars =====

/// Writes `name,value` rows in the given order.
pub fn write_scalars_csv<W: Write>(
    w: &mut W,
    scalars: &[(String, f64)],
    meta: &ArtifactMeta,
) -> Result<()> {
    meta.write_header(w, &[])?;
    writeln!(w, "name,value")?;
    for (name, value) in scalars {
        writeln!(w, "{name},{value}")?;
    }
    Ok(())
}

pub fn read_scalars_csv<R: Read>(r: R) -> Result<(Vec<(String, f64)>, ArtifactMeta)> {
    let (comments, body) = read_artifact(r)?;
    let meta = meta_from_comments(&comments)?;
    expect_header(&body, &["name", "value"])?;
    let mut out = Vec::with_capacity(body.rows.len());
    for (k, row) in body.rows.iter().enumerate() {
        out.push((row[0].clone(), parse_f64(&row[1], k)?));
    }
    Ok((out, meta))
}

// ===== free-form tables =====

/// Writes a meta-stamped table with caller-chosen columns and
/// preformatted fields; the shape checks are the only validation.
pub fn write_table_csv<W: Write>(
    w: &mut W,
    meta: &ArtifactMeta,
    extra: &[(&str, String)],
    columns: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    meta.write_header(w, extra)?;
    writeln!(w, "{}", columns.join(","))?;
    for (k, row) in rows.iter().enumerate() {
        if row.len() != columns.len() {
            return Err(Error::data(format!(
                "table row {k} has {} fields for {} columns",
                row.len(),
                columns.len()
            )));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Reads a table written by [`write_table_csv`], returning header names,
/// raw field strings and the provenance stamp.
pub fn read_table_csv<R: Read>(
    r: R,
) -> Result<(Vec<String>, Vec<Vec<String>>, ArtifactMeta)> {
    let (comments, body) = read_artifact(r)?;
    let meta = meta_from_comments(&comments)?;
    Ok((body.header, body.rows, meta))
}

// ===== moment-set bundle =====

/// Files making up a moment-set bundle directory.
pub const MOMENT_FILES: [&str; 9] = [
    "hawkes_grid.csv",
    "price_grid.csv",
    "scalars.csv",
    "chi_nn.csv",
    "chi_np.csv",
    "chi_np2.csv",
    "chi_npp.csv",
    "chi_p2p2.csv",
    "lambda.csv",
];

/// Writes a moment set as a directory of CSVs; see [`MOMENT_FILES`] for
/// the layout. Round trips through [`read_moments`] are bit-exact.
pub fn write_moments(dir: &Path, m: &MomentSet, config_hash: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let meta = ArtifactMeta::new(config_hash, grid_hash(&[&m.hawkes_grid, &m.price_grid]));
    let file = |name: &str| -> Result<std::fs::File> {
        Ok(std::fs::File::create(dir.join(name))?)
    };

    write_grid_csv(&mut file("hawkes_grid.csv")?, &m.hawkes_grid, &meta)?;
    write_grid_csv(&mut file("price_grid.csv")?, &m.price_grid, &meta)?;

    let scalars = vec![
        ("n_types".to_string(), m.n_types as f64),
        ("t_total".to_string(), m.t_total),
        ("sessions".to_string(), m.sessions as f64),
        ("delta1".to_string(), m.delta1),
        ("delta2".to_string(), m.delta2),
        ("delta3".to_string(), m.delta3),
        ("delta4".to_string(), m.delta4),
        ("price_jump_rate".to_string(), m.price_jump_rate),
    ];
    write_scalars_csv(&mut file("scalars.csv")?, &scalars, &meta)?;

    let lambda_rows: Vec<(String, f64)> = m
        .lambda
        .iter()
        .enumerate()
        .map(|(i, &v)| (format!("lambda_{i}"), v))
        .collect();
    write_scalars_csv(&mut file("lambda.csv")?, &lambda_rows, &meta)?;

    write_matrix_csv(&mut file("chi_nn.csv")?, &m.hawkes_grid, &m.chi_nn, &meta)?;
    write_curves_csv(&mut file("chi_np.csv")?, &m.price_grid, &m.chi_np, &meta)?;
    write_curves_csv(&mut file("chi_np2.csv")?, &m.price_grid, &m.chi_np2, &meta)?;
    write_surfaces_csv(&mut file("chi_npp.csv")?, &m.price_grid, &m.chi_npp, &meta)?;
    write_curves_csv(
        &mut file("chi_p2p2.csv")?,
        &m.price_grid,
        std::slice::from_ref(&m.chi_p2p2),
        &meta,
    )?;
    Ok(())
}

/// Reads a moment-set directory written by [`write_moments`]. Missing
/// files are reported by name.
pub fn read_moments(dir: &Path) -> Result<(MomentSet, ArtifactMeta)> {
    let missing: Vec<&str> = MOMENT_FILES
        .iter()
        .filter(|name| !dir.join(name).is_file())
        .copied()
        .collect();
    if !missing.is_empty() {
        return Err(Error::data(format!(
            "moment bundle {} is missing: {}",
            dir.display(),
            missing.join(", ")
        )));
    }
    let open = |name: &str| -> Result<std::fs::File> {
        std::fs::File::open(dir.join(name)).map_err(|e| {
            Error::data(format!("cannot open {}: {e}", dir.join(name).display()))
        })
    };
    let (hawkes_grid, meta) = read_grid_csv(open("hawkes_grid.csv")?)?;
    let (price_grid, _) = read_grid_csv(open("price_grid.csv")?)?;

    let (scalars, _) = read_scalars_csv(open("scalars.csv")?)?;
    let lookup = |name: &str| -> Result<f64> {
        scalars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::data(format!("scalars.csv is missing '{name}'")))
    };
    let n_types = lookup("n_types")? as usize;

    let (lambda_rows, _) = read_scalars_csv(open("lambda.csv")?)?;
    let lambda: Vec<f64> = lambda_rows.iter().map(|(_, v)| *v).collect();

    let (chi_nn, _) = read_matrix_csv(open("chi_nn.csv")?, &hawkes_grid)?;
    let (chi_np, _) = read_curves_csv(open("chi_np.csv")?, &price_grid)?;
    let (chi_np2, _) = read_curves_csv(open("chi_np2.csv")?, &price_grid)?;
    let (chi_npp, _) = read_surfaces_csv(open("chi_npp.csv")?, &price_grid)?;
    let (mut chi_p2p2_curves, _) = read_curves_csv(open("chi_p2p2.csv")?, &price_grid)?;
    if chi_p2p2_curves.len() != 1 {
        return Err(Error::data(format!(
            "chi_p2p2.csv holds {} curves, expected exactly one",
            chi_p2p2_curves.len()
        )));
    }

    if lambda.len() != n_types
        || chi_nn.len() != n_types
        || chi_np.len() != n_types
        || chi_np2.len() != n_types
        || chi_npp.len() != n_types
    {
        return Err(Error::data(format!(
            "moment bundle is inconsistent: scalars claim {n_types} types"
        )));
    }

    let m = MomentSet {
        n_types,
        hawkes_grid,
        price_grid,
        t_total: lookup("t_total")?,
        sessions: lookup("sessions")? as usize,
        lambda,
        delta1: lookup("delta1")?,
        delta2: lookup("delta2")?,
        delta3: lookup("delta3")?,
        delta4: lookup("delta4")?,
        price_jump_rate: lookup("price_jump_rate")?,
        chi_nn,
        chi_np,
        chi_np2,
        chi_npp,
        chi_p2p2: chi_p2p2_curves.remove(0),
    };
    Ok((m, meta))
}

// ===== diagnostics =====

/// Writes a signal series as `t,sigma2,mu,mu2,T,seff`; the volatility
/// floor and its exclusion count ride along as header comments.
pub fn write_signals_csv<W: Write>(
    w: &mut W,
    s: &SignalSeries,
    meta: &ArtifactMeta,
) -> Result<()> {
    let extra = [
        ("t_floor", format!("{}", s.t_floor)),
        ("t_floor_excluded", format!("{}", s.t_floor_excluded)),
    ];
    meta.write_header(w, &extra)?;
    writeln!(w, "t,sigma2,mu,mu2,T,seff")?;
    for k in 0..s.times.len() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            s.times[k], s.sigma2[k], s.mu[k], s.mu2[k], s.t_ratio[k], s.seff[k]
        )?;
    }
    Ok(())
}

pub fn read_signals_csv<R: Read>(r: R) -> Result<(SignalSeries, ArtifactMeta)> {
    let (comments, body) = read_artifact(r)?;
    let meta = meta_from_comments(&comments)?;
    let t_floor: f64 = comment_value(&comments, "t_floor")?
        .parse()
        .map_err(|_| Error::data("bad t_floor header value"))?;
    let t_floor_excluded: usize = comment_value(&comments, "t_floor_excluded")?
        .parse()
        .map_err(|_| Error::data("bad t_floor_excluded header value"))?;
    expect_header(&body, &["t", "sigma2", "mu", "mu2", "T", "seff"])?;
    let n = body.rows.len();
    let mut s = SignalSeries {
        times: Vec::with_capacity(n),
        sigma2: Vec::with_capacity(n),
        mu: Vec::with_capacity(n),
        mu2: Vec::with_capacity(n),
        t_ratio: Vec::with_capacity(n),
        t_floor,
        t_floor_excluded,
        seff: Vec::with_capacity(n),
    };
    for (k, row) in body.rows.iter().enumerate() {
        s.times.push(parse_f64(&row[0], k)?);
        s.sigma2.push(parse_f64(&row[1], k)?);
        s.mu.push(parse_f64(&row[2], k)?);
        s.mu2.push(parse_f64(&row[3], k)?);
        s.t_ratio.push(parse_f64(&row[4], k)?);
        s.seff.push(parse_f64(&row[5], k)?);
    }
    Ok((s, meta))
}

/// Writes the three spread correlations as `tau,C_mu,C_sigma,C_T`.
/// All three must share one lag grid.
pub fn write_correlations_csv<W: Write>(
    w: &mut W,
    c_mu: &LaggedCorrelation,
    c_sigma: &LaggedCorrelation,
    c_t: &LaggedCorrelation,
    meta: &ArtifactMeta,
) -> Result<()> {
    if c_sigma.lags != c_mu.lags || c_t.lags != c_mu.lags {
        return Err(Error::data("correlation curves disagree on the lag grid"));
    }
    meta.write_header(w, &[])?;
    writeln!(w, "tau,C_mu,C_sigma,C_T")?;
    for k in 0..c_mu.lags.len() {
        writeln!(
            w,
            "{},{},{},{}",
            c_mu.lags[k], c_mu.corr[k], c_sigma.corr[k], c_t.corr[k]
        )?;
    }
    Ok(())
}

pub fn read_correlations_csv<R: Read>(
    r: R,
) -> Result<([LaggedCorrelation; 3], ArtifactMeta)> {
    let (comments, body) = read_artifact(r)?;
    let meta = meta_from_comments(&comments)?;
    expect_header(&body, &["tau", "C_mu", "C_sigma", "C_T"])?;
    let mut lags = Vec::new();
    let mut cols = [Vec::new(), Vec::new(), Vec::new()];
    for (k, row) in body.rows.iter().enumerate() {
        lags.push(parse_f64(&row[0], k)?);
        for (c, col) in cols.iter_mut().enumerate() {
            col.push(parse_f64(&row[c + 1], k)?);
        }
    }
    let [c_mu, c_sigma, c_t] = cols;
    Ok((
        [
            LaggedCorrelation { lags: lags.clone(), corr: c_mu },
            LaggedCorrelation { lags: lags.clone(), corr: c_sigma },
            LaggedCorrelation { lags, corr: c_t },
        ],
        meta,
    ))
}

/// Writes a survival function as `s,survival` with the fitted exponent
/// in the header.
pub fn write_survival_csv<W: Write>(
    w: &mut W,
    tail: &SurvivalTail,
    meta: &ArtifactMeta,
) -> Result<()> {
    let extra = [
        ("tail_exponent", format!("{}", tail.tail_exponent)),
        ("tail_points", format!("{}", tail.tail_points)),
    ];
    meta.write_header(w, &extra)?;
    writeln!(w, "s,survival")?;
    for (t, p) in tail.thresholds.iter().zip(&tail.survival) {
        writeln!(w, "{t},{p}")?;
    }
    Ok(())
}

pub fn read_survival_csv<R: Read>(r: R) -> Result<(SurvivalTail, ArtifactMeta)> {
    let (comments, body) = read_artifact(r)?;
    let meta = meta_from_comments(&comments)?;
    let tail_exponent: f64 = comment_value(&comments, "tail_exponent")?
        .parse()
        .map_err(|_| Error::data("bad tail_exponent header value"))?;
    let tail_points: usize = comment_value(&comments, "tail_points")?
        .parse()
        .map_err(|_| Error::data("bad tail_points header value"))?;
    expect_header(&body, &["s", "survival"])?;
    let mut thresholds = Vec::with_capacity(body.rows.len());
    let mut survival = Vec::with_capacity(body.rows.len());
    for (k, row) in body.rows.iter().enumerate() {
        thresholds.push(parse_f64(&row[0], k)?);
        survival.push(parse_f64(&row[1], k)?);
    }
    Ok((SurvivalTail { thresholds, survival, tail_exponent, tail_points }, meta))
}

// ===== JSON summaries =====

/// One event type's feedback strengths, effective and bare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthRow {
    pub label: String,
    pub k_d_bar: f64,
    pub k_1_bar: f64,
    pub k_d: f64,
    pub k_1: f64,
    pub fit_rel_residual: f64,
    pub next_rank_ratio: f64,
    pub negative_psi_nodes: Vec<usize>,
}

/// `strengths.json`: per-type volatility and trend strengths with the
/// cut-off they were integrated to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthsFile {
    pub meta: ArtifactMeta,
    pub cutoff_s: f64,
    pub phi_norm: f64,
    pub per_type: Vec<StrengthRow>,
}

/// One event type's share of the quadratic liquidity flux.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxRow {
    pub label: String,
    pub volatility: f64,
    pub zumbach: f64,
    pub total: f64,
}

/// `flux.json`: the net quadratic liquidity flux and its breakdown by
/// event type and feedback channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxFile {
    pub meta: ArtifactMeta,
    pub delta2: f64,
    pub total: f64,
    pub volatility_total: f64,
    pub zumbach_total: f64,
    pub per_type: Vec<FluxRow>,
}

pub fn write_json<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(format!("json encoding failed: {e}")))?;
    w.write_all(text.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<R: Read, T: DeserializeOwned>(mut r: R) -> Result<T> {
    let mut text = String::new();
    r.read_to_string(&mut text)?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("json decoding failed: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn meta() -> ArtifactMeta {
        ArtifactMeta::new("cfg0123", "grid4567")
    }

    fn grid() -> TimeGrid {
        TimeGrid::build(0.01, 0.1, 25.0, 5, 12).unwrap()
    }

    fn assert_bits_eq(a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits(), "{x} vs {y}");
        }
    }

    #[test]
    fn grid_round_trips_bit_exactly() {
        let g = grid();
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &g, &meta()).unwrap();
        let (back, m) = read_grid_csv(buf.as_slice()).unwrap();
        assert_bits_eq(g.points(), back.points());
        assert_bits_eq(g.weights(), back.weights());
        assert_eq!(m, meta());
        assert_eq!(m.version, TOOL_VERSION);
    }

    #[test]
    fn tampered_grid_weights_are_rejected() {
        let g = grid();
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &g, &meta()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        // Perturb the first weight field.
        let tampered = text.replacen(
            &format!("{},{}", g.points()[0], g.weights()[0]),
            &format!("{},{}", g.points()[0], g.weights()[0] * 1.5),
            1,
        );
        assert_ne!(text, tampered);
        assert!(read_grid_csv(tampered.as_bytes()).is_err());
    }

    #[test]
    fn missing_header_lines_are_rejected() {
        let g = grid();
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &g, &meta()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let stripped: String = text
            .lines()
            .filter(|l| !l.starts_with("# config_hash"))
            .map(|l| format!("{l}\n"))
            .collect();
        let err = read_grid_csv(stripped.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("config_hash"), "unexpected: {err}");
    }

    fn random_curves(rng: &mut impl Rng, n: usize, len: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).collect()
    }

    #[test]
    fn curves_round_trip_bit_exactly() {
        let g = grid();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let curves = random_curves(&mut rng, 3, g.len());
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &g, &curves, &meta()).unwrap();
        let (back, _) = read_curves_csv(buf.as_slice(), &g).unwrap();
        for (a, b) in curves.iter().zip(&back) {
            assert_bits_eq(a, b);
        }
    }

    #[test]
    fn curves_against_the_wrong_grid_are_rejected() {
        let g = grid();
        let other = TimeGrid::build(0.02, 0.2, 25.0, 5, 12).unwrap();
        let curves = vec![vec![1.0; g.len()]];
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &g, &curves, &meta()).unwrap();
        assert!(read_curves_csv(buf.as_slice(), &other).is_err());
    }

    #[test]
    fn kernel_matrix_round_trips_bit_exactly() {
        let g = grid();
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let values: Vec<Vec<Vec<f64>>> =
            (0..2).map(|_| random_curves(&mut rng, 2, g.len())).collect();
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &g, &values, &meta()).unwrap();
        let (back, _) = read_matrix_csv(buf.as_slice(), &g).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_bits_eq(&values[i][j], &back[i][j]);
            }
        }
    }

    #[test]
    fn surfaces_round_trip_bit_exactly() {
        let g = grid();
        let np = g.len();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let surfaces: Vec<DMatrix<f64>> = (0..2)
            .map(|_| DMatrix::from_fn(np, np, |_, _| rng.gen::<f64>() * 4.0 - 2.0))
            .collect();
        let mut buf = Vec::new();
        write_surfaces_csv(&mut buf, &g, &surfaces, &meta()).unwrap();
        let (back, _) = read_surfaces_csv(buf.as_slice(), &g).unwrap();
        for (a, b) in surfaces.iter().zip(&back) {
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn moment_bundle_round_trips_bit_exactly() {
        let hgrid = TimeGrid::build(0.01, 0.1, 20.0, 4, 10).unwrap();
        let pgrid = TimeGrid::build(0.05, 0.5, 40.0, 4, 8).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let n = 2;
        let m = MomentSet {
            n_types: n,
            t_total: 12345.678,
            sessions: 7,
            lambda: vec![1.25, 0.875],
            delta1: 0.001,
            delta2: 0.52,
            delta3: -0.004,
            delta4: 1.91,
            price_jump_rate: 0.31,
            chi_nn: (0..n).map(|_| random_curves(&mut rng, n, hgrid.len())).collect(),
            chi_np: random_curves(&mut rng, n, pgrid.len()),
            chi_np2: random_curves(&mut rng, n, pgrid.len()),
            chi_npp: (0..n)
                .map(|_| {
                    DMatrix::from_fn(pgrid.len(), pgrid.len(), |_, _| rng.gen::<f64>() - 0.5)
                })
                .collect(),
            chi_p2p2: (0..pgrid.len()).map(|_| rng.gen::<f64>()).collect(),
            hawkes_grid: hgrid,
            price_grid: pgrid,
        };

        let dir = tempfile::tempdir().unwrap();
        write_moments(dir.path(), &m, "cfg").unwrap();
        let (back, meta) = read_moments(dir.path()).unwrap();

        assert_eq!(back.n_types, m.n_types);
        assert_eq!(back.sessions, m.sessions);
        assert_eq!(back.t_total.to_bits(), m.t_total.to_bits());
        assert_eq!(back.delta4.to_bits(), m.delta4.to_bits());
        assert_bits_eq(&back.lambda, &m.lambda);
        assert_bits_eq(back.hawkes_grid.points(), m.hawkes_grid.points());
        assert_bits_eq(back.price_grid.points(), m.price_grid.points());
        for i in 0..n {
            for j in 0..n {
                assert_bits_eq(&back.chi_nn[i][j], &m.chi_nn[i][j]);
            }
            assert_bits_eq(&back.chi_np[i], &m.chi_np[i]);
            assert_bits_eq(&back.chi_np2[i], &m.chi_np2[i]);
            for (x, y) in back.chi_npp[i].iter().zip(m.chi_npp[i].iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_bits_eq(&back.chi_p2p2, &m.chi_p2p2);
        assert_eq!(meta.grid_hash, grid_hash(&[&m.hawkes_grid, &m.price_grid]));
    }

    #[test]
    fn missing_moment_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_moments(dir.path()).unwrap_err().to_string();
        assert!(err.contains("hawkes_grid.csv"), "unexpected: {err}");
    }

    #[test]
    fn signals_round_trip_preserves_nans() {
        let s = SignalSeries {
            times: vec![1.0, 2.0, 3.0],
            sigma2: vec![0.5, 0.0, 1.5],
            mu: vec![-0.2, 0.0, 0.4],
            mu2: vec![0.04, 0.0, 0.16],
            t_ratio: vec![0.08, f64::NAN, 0.10666],
            t_floor: 0.01,
            t_floor_excluded: 1,
            seff: vec![1.0, 2.0, f64::NAN],
        };
        let mut buf = Vec::new();
        write_signals_csv(&mut buf, &s, &meta()).unwrap();
        let (back, _) = read_signals_csv(buf.as_slice()).unwrap();
        assert_bits_eq(&back.times, &s.times);
        assert_bits_eq(&back.sigma2, &s.sigma2);
        assert_eq!(back.t_floor.to_bits(), s.t_floor.to_bits());
        assert_eq!(back.t_floor_excluded, 1);
        assert!(back.t_ratio[1].is_nan());
        assert!(back.seff[2].is_nan());
        assert_eq!(back.t_ratio[0].to_bits(), s.t_ratio[0].to_bits());
    }

    #[test]
    fn correlations_require_a_common_lag_grid() {
        let a = LaggedCorrelation { lags: vec![-1.0, 0.0, 1.0], corr: vec![0.1, 1.0, 0.2] };
        let b = LaggedCorrelation { lags: vec![0.0, 1.0], corr: vec![1.0, 0.3] };
        let mut buf = Vec::new();
        assert!(write_correlations_csv(&mut buf, &a, &b, &a, &meta()).is_err());
        buf.clear();
        write_correlations_csv(&mut buf, &a, &a, &a, &meta()).unwrap();
        let ([c_mu, c_sigma, c_t], _) = read_correlations_csv(buf.as_slice()).unwrap();
        assert_bits_eq(&c_mu.corr, &a.corr);
        assert_bits_eq(&c_sigma.corr, &a.corr);
        assert_bits_eq(&c_t.lags, &a.lags);
    }

    #[test]
    fn survival_round_trips_with_its_exponent() {
        let tail = SurvivalTail {
            thresholds: vec![1.0, 2.0, 4.0],
            survival: vec![0.6, 0.2, 0.0],
            tail_exponent: 4.21,
            tail_points: 3,
        };
        let mut buf = Vec::new();
        write_survival_csv(&mut buf, &tail, &meta()).unwrap();
        let (back, _) = read_survival_csv(buf.as_slice()).unwrap();
        assert_bits_eq(&back.thresholds, &tail.thresholds);
        assert_bits_eq(&back.survival, &tail.survival);
        assert_eq!(back.tail_exponent.to_bits(), tail.tail_exponent.to_bits());
        assert_eq!(back.tail_points, 3);
    }

    #[test]
    fn json_summaries_round_trip() {
        let strengths = StrengthsFile {
            meta: meta(),
            cutoff_s: 1000.0,
            phi_norm: 0.62,
            per_type: vec![StrengthRow {
                label: "LO,b".to_string(),
                k_d_bar: 0.31,
                k_1_bar: 0.12,
                k_d: 0.1178,
                k_1: 0.0456,
                fit_rel_residual: 0.02,
                next_rank_ratio: 0.15,
                negative_psi_nodes: vec![17, 18],
            }],
        };
        let mut buf = Vec::new();
        write_json(&mut buf, &strengths).unwrap();
        let back: StrengthsFile = read_json(buf.as_slice()).unwrap();
        assert_eq!(back, strengths);

        let flux = FluxFile {
            meta: meta(),
            delta2: 0.5,
            total: -3.7,
            volatility_total: -3.0,
            zumbach_total: -0.7,
            per_type: vec![FluxRow {
                label: "LO,b".to_string(),
                volatility: 9.0,
                zumbach: 0.4,
                total: 9.4,
            }],
        };
        let mut buf = Vec::new();
        write_json(&mut buf, &flux).unwrap();
        let back: FluxFile = read_json(buf.as_slice()).unwrap();
        assert_eq!(back, flux);
    }

    #[test]
    fn named_curve_columns_round_trip() {
        let g = grid();
        let curves = vec![g.points().to_vec()];
        let mut buf = Vec::new();
        write_curves_csv_named(&mut buf, &g, &curves, &meta(), "psi").unwrap();
        let (back, _) = read_curves_csv_named(buf.as_slice(), &g, "psi").unwrap();
        assert_bits_eq(&back[0], &curves[0]);
        // The generic reader must not accept the renamed column silently.
        assert!(read_curves_csv(buf.as_slice(), &g).is_err());
    }

    #[test]
    fn tables_round_trip_and_check_row_shape() {
        let columns = ["name", "lag_s", "value"];
        let rows = vec![
            vec!["a".to_string(), "0.5".to_string(), "1.25".to_string()],
            vec!["b".to_string(), "1".to_string(), "NaN".to_string()],
        ];
        let mut buf = Vec::new();
        write_table_csv(&mut buf, &meta(), &[], &columns, &rows).unwrap();
        let (header, back, m) = read_table_csv(buf.as_slice()).unwrap();
        assert_eq!(header, columns);
        assert_eq!(back, rows);
        assert_eq!(m, meta());

        let ragged = vec![vec!["a".to_string()]];
        assert!(write_table_csv(&mut Vec::new(), &meta(), &[], &columns, &ragged).is_err());
    }

    #[test]
    fn writes_are_deterministic() {
        let g = grid();
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let curves = random_curves(&mut rng, 2, g.len());
        let mut a = Vec::new();
        let mut b = Vec::new();
        write_curves_csv(&mut a, &g, &curves, &meta()).unwrap();
        write_curves_csv(&mut b, &g, &curves, &meta()).unwrap();
        assert_eq!(a, b);
    }
}
