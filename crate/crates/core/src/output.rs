//! File writers: VTK legacy ASCII for nodal fields, CSV for traces and rate
//! tables, JSON for reports. Every file starts with a provenance line naming
//! the artifact version and the scenario hash.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::forward::{BoundaryTrace, TimeSeriesField};
use crate::mesh::Mesh;
use crate::reconstruction::{RateTable, VERSION};

/// Provenance stamped into every output file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileHeader {
    pub version: String,
    pub scenario_hash: String,
}

impl FileHeader {
    pub fn new(scenario_hash: impl Into<String>) -> Self {
        Self {
            version: VERSION.to_string(),
            scenario_hash: scenario_hash.into(),
        }
    }

    pub fn line(&self) -> String {
        format!("ischemia {} scenario {}", self.version, self.scenario_hash)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Unstructured tetrahedral grid with one or more point scalars.
pub fn write_vtk<W: Write>(out: &mut W, mesh: &Mesh, fields: &[(&str, &[f64])], header: &FileHeader) -> Result<()> {
    for (name, values) in fields {
        if values.len() != mesh.n_vertices() {
            return Err(Error::DimensionMismatch {
                context: "vtk field",
                expected: mesh.n_vertices(),
                found: values.len(),
            });
        }
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Invalid(format!("invalid vtk field name {name:?}")));
        }
    }
    writeln!(out, "# vtk DataFile Version 3.0")?;
    writeln!(out, "{}", header.line())?;
    writeln!(out, "ASCII")?;
    writeln!(out, "DATASET UNSTRUCTURED_GRID")?;
    writeln!(out, "POINTS {} double", mesh.n_vertices())?;
    for p in mesh.vertices() {
        writeln!(out, "{:e} {:e} {:e}", p.x, p.y, p.z)?;
    }
    writeln!(out, "CELLS {} {}", mesh.n_tets(), 5 * mesh.n_tets())?;
    for t in mesh.tets() {
        writeln!(out, "4 {} {} {} {}", t[0], t[1], t[2], t[3])?;
    }
    writeln!(out, "CELL_TYPES {}", mesh.n_tets())?;
    for _ in 0..mesh.n_tets() {
        writeln!(out, "10")?;
    }
    if !fields.is_empty() {
        writeln!(out, "POINT_DATA {}", mesh.n_vertices())?;
        for (name, values) in fields {
            writeln!(out, "SCALARS {name} double 1")?;
            writeln!(out, "LOOKUP_TABLE default")?;
            for v in *values {
                writeln!(out, "{v:e}")?;
            }
        }
    }
    Ok(())
}

pub fn write_vtk_file(path: &Path, mesh: &Mesh, fields: &[(&str, &[f64])], header: &FileHeader) -> Result<()> {
    let mut out = create(path)?;
    write_vtk(&mut out, mesh, fields, header)?;
    out.flush()?;
    Ok(())
}

/// One VTK file per `stride`-th frame (the last frame is always written),
/// named `<stem>_<frame>.vtk`.
pub fn write_vtk_series(
    dir: &Path,
    stem: &str,
    mesh: &Mesh,
    name: &str,
    field: &TimeSeriesField,
    stride: usize,
    header: &FileHeader,
) -> Result<Vec<PathBuf>> {
    if stride == 0 {
        return Err(Error::Invalid("frame stride must be positive".into()));
    }
    let last = field.grid().steps;
    let mut frames: Vec<usize> = (0..=last).step_by(stride).collect();
    if frames.last() != Some(&last) {
        frames.push(last);
    }
    let width = last.to_string().len();
    frames
        .into_iter()
        .map(|n| {
            let path = dir.join(format!("{stem}_{n:0width$}.vtk"));
            write_vtk_file(&path, mesh, &[(name, field.frame(n))], header)?;
            Ok(path)
        })
        .collect()
}

/// Columns `node_id,x,y,z,t,value`, frames outermost.
pub fn write_trace_csv<W: Write>(out: &mut W, mesh: &Mesh, trace: &BoundaryTrace, header: &FileHeader) -> Result<()> {
    writeln!(out, "# {}", header.line())?;
    writeln!(out, "node_id,x,y,z,t,value")?;
    for (n, row) in trace.values.iter().enumerate() {
        let t = trace.grid.time(n);
        for (&v, value) in trace.nodes.iter().zip(row) {
            let p = mesh
                .vertices()
                .get(v)
                .ok_or_else(|| Error::Invalid(format!("trace node {v} does not exist")))?;
            writeln!(out, "{v},{:e},{:e},{:e},{t:e},{value:e}", p.x, p.y, p.z)?;
        }
    }
    Ok(())
}

pub fn write_trace_csv_file(path: &Path, mesh: &Mesh, trace: &BoundaryTrace, header: &FileHeader) -> Result<()> {
    let mut out = create(path)?;
    write_trace_csv(&mut out, mesh, trace, header)?;
    out.flush()?;
    Ok(())
}

/// One line per eps, followed by the fitted slopes as comments.
pub fn write_rate_csv<W: Write>(out: &mut W, table: &RateTable, header: &FileHeader) -> Result<()> {
    writeln!(out, "# {}", header.line())?;
    writeln!(
        out,
        "eps,elements,volume,linf_l2,l2_h1,l2_l2,J,min_G,boundary_functional,prediction,deviation,warning"
    )?;
    for r in &table.rows {
        writeln!(
            out,
            "{:e},{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}",
            r.eps,
            r.elements,
            r.volume,
            r.linf_l2,
            r.l2_h1,
            r.l2_l2,
            r.j,
            r.min_g,
            r.boundary_functional,
            r.prediction,
            r.deviation,
            r.warning.as_deref().unwrap_or("").replace(',', ";"),
        )?;
    }
    writeln!(out, "# slope_linf_l2={:e}", table.slope_linf_l2)?;
    writeln!(out, "# slope_l2_h1={:e}", table.slope_l2_h1)?;
    writeln!(out, "# slope_l2_l2={:e}", table.slope_l2_l2)?;
    writeln!(out, "# deviation_monotone={}", table.deviation_monotone)?;
    Ok(())
}

pub fn write_rate_csv_file(path: &Path, table: &RateTable, header: &FileHeader) -> Result<()> {
    let mut out = create(path)?;
    write_rate_csv(&mut out, table, header)?;
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Stamped<'a, T> {
    header: Stamp<'a>,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Serialize)]
struct Stamp<'a> {
    version: &'a str,
    scenario_hash: &'a str,
}

/// Pretty JSON with a leading `header` object.
pub fn to_json<T: Serialize>(value: &T, header: &FileHeader) -> Result<String> {
    let stamped = Stamped {
        header: Stamp {
            version: &header.version,
            scenario_hash: &header.scenario_hash,
        },
        body: value,
    };
    serde_json::to_string_pretty(&stamped).map_err(|e| Error::Invalid(format!("json encoding failed: {e}")))
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T, header: &FileHeader) -> Result<()> {
    let mut out = create(path)?;
    out.write_all(to_json(value, header)?.as_bytes())?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
