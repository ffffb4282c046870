//! File formats.
//!
//! CSNAP1 binary layout (all little-endian):
//!
//! ```text
//! magic   8 bytes  "CSNAP1\0\0"
//! version u32      1
//! N       u32      node count
//! M       u32      snapshot count
//! d       u32      spatial dimension
//! coords  N*d f64  node-major
//! data    N*M f64  column-major (snapshot after snapshot)
//! ```
//!
//! Every CSV written here starts with the line [`CSV_VERSION_LINE`];
//! readers skip `#` comment lines.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, FormatError, Result};
use crate::grid::{Grid, SensorSelection, SnapshotSet};

pub const CSNAP_MAGIC: &[u8; 8] = b"CSNAP1\0\0";
pub const CSNAP_VERSION: u32 = 1;
pub const CSV_VERSION_LINE: &str = "# christoffel-osp v1";

const HEADER_LEN: usize = 8 + 4 * 4;

pub fn encode_snapshots(set: &SnapshotSet) -> Vec<u8> {
    let (n, m, d) = (set.n_nodes(), set.n_snapshots(), set.grid().dim());
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * (n * d + n * m));
    out.extend_from_slice(CSNAP_MAGIC);
    for field in [CSNAP_VERSION, n as u32, m as u32, d as u32] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for c in set.grid().coords() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    // nalgebra storage is column-major already
    for v in set.data().as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_snapshots(bytes: &[u8]) -> Result<SnapshotSet> {
    if bytes.len() < CSNAP_MAGIC.len() || &bytes[..8] != CSNAP_MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            got: bytes.len(),
        }
        .into());
    }
    let word = |k: usize| {
        let off = 8 + 4 * k;
        u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap())
    };
    let version = word(0);
    if version != CSNAP_VERSION {
        return Err(FormatError::UnsupportedVersion(version).into());
    }
    let (n, m, d) = (word(1) as usize, word(2) as usize, word(3) as usize);
    if n == 0 || m == 0 || !(1..=2).contains(&d) {
        return Err(FormatError::DimensionMismatch(format!("header N={n} M={m} d={d}")).into());
    }
    let expected = n
        .checked_mul(d)
        .and_then(|nd| n.checked_mul(m).and_then(|nm| nd.checked_add(nm)))
        .and_then(|count| count.checked_mul(8))
        .and_then(|b| b.checked_add(HEADER_LEN))
        .ok_or_else(|| FormatError::DimensionMismatch(format!("header N={n} M={m} overflows")))?;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            got: bytes.len(),
        }
        .into());
    }
    if bytes.len() > expected {
        return Err(FormatError::DimensionMismatch(format!(
            "{} trailing bytes after N={n} M={m} d={d} payload",
            bytes.len() - expected
        ))
        .into());
    }
    let mut doubles = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let coords: Vec<f64> = doubles.by_ref().take(n * d).collect();
    let data: Vec<f64> = doubles.collect();
    let grid = Grid::new(d, coords)?;
    SnapshotSet::new(grid, DMatrix::from_vec(n, m, data))
}

pub fn save_snapshots(set: &SnapshotSet, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_snapshots(set))?;
    w.flush()?;
    Ok(())
}

/// Loads a snapshot file. Files starting with the CSNAP1 magic are decoded
/// as binary; files with a `.csv` extension go through [`read_snapshots_csv`].
pub fn load_snapshots(path: impl AsRef<Path>) -> Result<SnapshotSet> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv && !bytes.starts_with(CSNAP_MAGIC) {
        read_snapshots_csv(bytes.as_slice())
    } else {
        decode_snapshots(&bytes)
    }
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r)
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| FormatError::Csv(format!("cannot parse {what} value {s:?}")).into())
}

fn parse_index(s: &str, what: &str) -> Result<usize> {
    s.parse::<usize>()
        .map_err(|_| FormatError::Csv(format!("cannot parse {what} {s:?}")).into())
}

/// CSV snapshot import. One row per node, one column per snapshot:
///
/// ```text
/// node,x,s0,s1,s2
/// 0,0.0,1.5,0.2,0.3
/// ```
///
/// The `node` column holds 0-based node ids (any order, each exactly once).
/// Optional `x` and `y` columns carry coordinates; without them nodes are
/// placed on [`Grid::line`]. Every other column is a snapshot.
pub fn read_snapshots_csv<R: Read>(r: R) -> Result<SnapshotSet> {
    let mut rdr = csv_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("node") {
        return Err(FormatError::Csv("first column must be `node`".into()).into());
    }
    let coord_cols: Vec<usize> = ["x", "y"]
        .iter()
        .filter_map(|name| headers.iter().position(|h| h == *name))
        .collect();
    let snap_cols: Vec<usize> = (1..headers.len())
        .filter(|c| !coord_cols.contains(c))
        .collect();
    if snap_cols.is_empty() {
        return Err(FormatError::Csv("no snapshot columns".into()).into());
    }

    let mut rows: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != headers.len() {
            return Err(FormatError::DimensionMismatch(format!(
                "row has {} fields, header has {}",
                rec.len(),
                headers.len()
            ))
            .into());
        }
        let node = parse_index(&rec[0], "node id")?;
        let coords = coord_cols
            .iter()
            .map(|&c| parse_f64(&rec[c], "coordinate"))
            .collect::<Result<_>>()?;
        let vals = snap_cols
            .iter()
            .map(|&c| parse_f64(&rec[c], "snapshot"))
            .collect::<Result<_>>()?;
        rows.push((node, coords, vals));
    }
    let n = rows.len();
    if n == 0 {
        return Err(FormatError::Csv("no node rows".into()).into());
    }
    rows.sort_by_key(|r| r.0);
    if rows.iter().enumerate().any(|(i, r)| r.0 != i) {
        return Err(FormatError::DimensionMismatch(format!(
            "node ids must be exactly 0..{n}"
        ))
        .into());
    }
    let grid = if coord_cols.is_empty() {
        Grid::line(n)
    } else {
        Grid::new(
            coord_cols.len(),
            rows.iter().flat_map(|r| r.1.iter().copied()).collect(),
        )?
    };
    let m = snap_cols.len();
    let data = DMatrix::from_fn(n, m, |i, j| rows[i].2[j]);
    SnapshotSet::new(grid, data)
}

/// Writes the layout read by [`read_snapshots_csv`], with coordinate columns.
pub fn write_snapshots_csv<W: Write>(mut w: W, set: &SnapshotSet) -> Result<()> {
    writeln!(w, "{CSV_VERSION_LINE}")?;
    let coords = ["x", "y"];
    let dim = set.grid().dim();
    let mut header = vec!["node".to_string()];
    header.extend(coords[..dim].iter().map(|c| c.to_string()));
    header.extend((0..set.n_snapshots()).map(|j| format!("s{j}")));
    writeln!(w, "{}", header.join(","))?;
    for i in 0..set.n_nodes() {
        let mut row = vec![i.to_string()];
        row.extend(set.grid().coord(i).iter().map(|c| c.to_string()));
        row.extend(set.data().row(i).iter().map(|v| v.to_string()));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Writes `node_index,score` rows.
pub fn write_scores_csv<W: Write>(mut w: W, scores: &[f64]) -> Result<()> {
    writeln!(w, "{CSV_VERSION_LINE}")?;
    writeln!(w, "node_index,score")?;
    for (j, s) in scores.iter().enumerate() {
        writeln!(w, "{j},{s}")?;
    }
    Ok(())
}

pub fn read_scores_csv<R: Read>(r: R) -> Result<Vec<f64>> {
    let mut rdr = csv_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["node_index", "score"] {
        return Err(FormatError::Csv("expected header `node_index,score`".into()).into());
    }
    let mut pairs = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        pairs.push((
            parse_index(&rec[0], "node_index")?,
            parse_f64(&rec[1], "score")?,
        ));
    }
    pairs.sort_by_key(|p| p.0);
    if pairs.iter().enumerate().any(|(i, p)| p.0 != i) {
        return Err(FormatError::DimensionMismatch(format!(
            "score node indices must be exactly 0..{}",
            pairs.len()
        ))
        .into());
    }
    Ok(pairs.into_iter().map(|p| p.1).collect())
}

/// Writes `rank,node_index,is_anchor` rows.
pub fn write_selection_csv<W: Write>(mut w: W, selection: &SensorSelection) -> Result<()> {
    writeln!(w, "{CSV_VERSION_LINE}")?;
    writeln!(w, "rank,node_index,is_anchor")?;
    for (rank, &node) in selection.indices().iter().enumerate() {
        writeln!(w, "{rank},{node},{}", rank < selection.n_anchor())?;
    }
    Ok(())
}

pub fn read_selection_csv<R: Read>(r: R, n_nodes: usize) -> Result<SensorSelection> {
    let mut rdr = csv_reader(r);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["rank", "node_index", "is_anchor"] {
        return Err(
            FormatError::Csv("expected header `rank,node_index,is_anchor`".into()).into(),
        );
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let anchor = match &rec[2] {
            "true" | "1" => true,
            "false" | "0" => false,
            other => {
                return Err(FormatError::Csv(format!("bad is_anchor value {other:?}")).into())
            }
        };
        rows.push((
            parse_index(&rec[0], "rank")?,
            parse_index(&rec[1], "node_index")?,
            anchor,
        ));
    }
    rows.sort_by_key(|r| r.0);
    let n_anchor = rows.iter().take_while(|r| r.2).count();
    if rows[n_anchor..].iter().any(|r| r.2) {
        return Err(FormatError::Csv("anchor rows must precede mobile rows".into()).into());
    }
    SensorSelection::new(rows.iter().map(|r| r.1).collect(), n_anchor, n_nodes)
}

pub fn write_file(path: impl AsRef<Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush().map_err(Error::from)
}
