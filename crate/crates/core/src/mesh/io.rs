//! Mesh files.
//!
//! Native ASCII layout (whitespace separated, `#` starts a comment line):
//!
//! ```text
//! ISCHEMIA-MESH 1
//! vertices <n>
//! x y z  fx fy fz  tx ty tz  rx ry rz     (one line per vertex: position, fiber, sheet, normal)
//! tets <m>
//! a b c d                                 (zero-based vertex indices)
//! faces <k>
//! a b c <tag>                             (boundary faces, tag in endocardium|epicardium|base|other)
//! end
//! ```
//!
//! Faces omitted from the block are tagged `other`. Gmsh v2 ASCII files are read
//! with element type 4 as tets and type 2 as tagged boundary triangles; physical
//! groups named `endocardium`, `epicardium` or `base` map to those tags, otherwise
//! physical ids 1, 2, 3 do.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{FaceTag, FiberFrame, Mesh, Vec3};

const MAGIC: &str = "ISCHEMIA-MESH 1";

pub fn format_mesh(mesh: &Mesh) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{MAGIC}");
    let _ = writeln!(s, "vertices {}", mesh.n_vertices());
    for (p, fr) in mesh.vertices().iter().zip(mesh.fiber_frames()) {
        let vals = [p, &fr.fiber, &fr.sheet, &fr.normal];
        let line: Vec<String> = vals.iter().flat_map(|v| v.iter()).map(|c| c.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    let _ = writeln!(s, "tets {}", mesh.n_tets());
    for t in mesh.tets() {
        let _ = writeln!(s, "{} {} {} {}", t[0], t[1], t[2], t[3]);
    }
    let _ = writeln!(s, "faces {}", mesh.boundary_faces().len());
    for (f, tag) in mesh.boundary_faces().iter().zip(mesh.face_tags()) {
        let _ = writeln!(s, "{} {} {} {}", f[0], f[1], f[2], tag.as_str());
    }
    let _ = writeln!(s, "end");
    s
}

pub fn write_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    fs::write(path, format_mesh(mesh))?;
    Ok(())
}

pub fn read_mesh(path: &Path) -> Result<Mesh> {
    let text = fs::read_to_string(path)?;
    if text.trim_start().starts_with("$MeshFormat") {
        parse_gmsh(&text, path)
    } else {
        parse_mesh(&text, path)
    }
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    path: &'a Path,
    last: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, path: &'a Path) -> Self {
        Self {
            inner: text.lines().enumerate().peekable(),
            path,
            last: 0,
        }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.last,
            message: message.into(),
        }
    }

    fn next_line(&mut self, skip_comments: bool) -> Result<&'a str> {
        for (i, line) in self.inner.by_ref() {
            self.last = i + 1;
            let t = line.trim();
            if t.is_empty() || (skip_comments && t.starts_with('#')) {
                continue;
            }
            return Ok(t);
        }
        Err(self.err("unexpected end of file"))
    }

    fn fields<T: std::str::FromStr>(&self, line: &str, n: usize) -> Result<Vec<T>> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() < n {
            return Err(self.err(format!("expected {n} fields, found {}", parts.len())));
        }
        parts[..n]
            .iter()
            .map(|p| p.parse::<T>().map_err(|_| self.err(format!("cannot parse `{p}`"))))
            .collect()
    }

    fn count(&mut self) -> Result<usize> {
        let line = self.next_line(false)?;
        Ok(self.fields::<usize>(line, 1)?[0])
    }

    fn header(&mut self, keyword: &str) -> Result<usize> {
        let line = self.next_line(true)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(keyword) {
            return Err(self.err(format!("expected `{keyword} <count>`")));
        }
        parts
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| self.err(format!("missing count after `{keyword}`")))
    }
}

pub fn parse_mesh(text: &str, path: &Path) -> Result<Mesh> {
    let mut lines = Lines::new(text, path);
    if lines.next_line(true)? != MAGIC {
        return Err(lines.err(format!("missing `{MAGIC}` header")));
    }
    let nv = lines.header("vertices")?;
    let mut vertices = Vec::with_capacity(nv);
    let mut frames = Vec::with_capacity(nv);
    for _ in 0..nv {
        let line = lines.next_line(true)?;
        let c: Vec<f64> = if line.split_whitespace().count() >= 12 {
            lines.fields(line, 12)?
        } else {
            let mut c: Vec<f64> = lines.fields(line, 3)?;
            c.extend([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
            c
        };
        let v = |k: usize| Vec3::new(c[k], c[k + 1], c[k + 2]);
        vertices.push(v(0));
        let frame = FiberFrame {
            fiber: v(3),
            sheet: v(6),
            normal: v(9),
        };
        if frame.orthonormality_error() > 1e-10 {
            return Err(lines.err("fiber frame is not orthonormal"));
        }
        frames.push(frame);
    }
    let nt = lines.header("tets")?;
    let mut tets = Vec::with_capacity(nt);
    for _ in 0..nt {
        let line = lines.next_line(true)?;
        let t: Vec<usize> = lines.fields(line, 4)?;
        if t.iter().any(|&v| v >= nv) {
            return Err(lines.err("tet references a missing vertex"));
        }
        tets.push([t[0], t[1], t[2], t[3]]);
    }
    let nf = lines.header("faces")?;
    let mut tagged = Vec::with_capacity(nf);
    for _ in 0..nf {
        let line = lines.next_line(true)?;
        let f: Vec<usize> = lines.fields(line, 3)?;
        let tag_str = line.split_whitespace().nth(3).unwrap_or("other");
        let tag = FaceTag::parse(tag_str).ok_or_else(|| lines.err(format!("unknown face tag `{tag_str}`")))?;
        tagged.push(([f[0], f[1], f[2]], tag, lines.last));
    }
    if lines.next_line(true)? != "end" {
        return Err(lines.err("expected `end`"));
    }
    let mut mesh = Mesh::new(vertices, tets)?;
    apply_face_tags(&mut mesh, &tagged, path)?;
    mesh.set_fiber_frames(frames)?;
    Ok(mesh)
}

fn apply_face_tags(mesh: &mut Mesh, tagged: &[([usize; 3], FaceTag, usize)], path: &Path) -> Result<()> {
    let key = |f: [usize; 3]| {
        let mut k = f;
        k.sort_unstable();
        k
    };
    let index: HashMap<[usize; 3], usize> = mesh
        .boundary_faces()
        .iter()
        .enumerate()
        .map(|(i, &f)| (key(f), i))
        .collect();
    let mut tags = mesh.face_tags().to_vec();
    for &(f, tag, line) in tagged {
        let i = *index.get(&key(f)).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("face {f:?} is not on the boundary"),
        })?;
        tags[i] = tag;
    }
    mesh.set_face_tags(tags)
}

pub fn parse_gmsh(text: &str, path: &Path) -> Result<Mesh> {
    let mut lines = Lines::new(text, path);
    let mut names: HashMap<i64, FaceTag> = HashMap::new();
    let mut node_ids: HashMap<i64, usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut tets = Vec::new();
    let mut triangles: Vec<([i64; 3], i64, usize)> = Vec::new();
    let mut seen_format = false;

    loop {
        let section = match lines.next_line(false) {
            Ok(s) => s,
            Err(_) if seen_format => break,
            Err(e) => return Err(e),
        };
        match section {
            "$MeshFormat" => {
                let line = lines.next_line(false)?;
                let version: Vec<String> = lines.fields(line, 3)?;
                if !version[0].starts_with('2') || version[1] != "0" {
                    return Err(lines.err("only ASCII Gmsh version 2 files are supported"));
                }
                seen_format = true;
            }
            "$PhysicalNames" => {
                let n = lines.count()?;
                for _ in 0..n {
                    let line = lines.next_line(false)?;
                    let id: Vec<i64> = lines.fields(line, 2)?;
                    let name = line.splitn(3, char::is_whitespace).nth(2).unwrap_or("").trim().trim_matches('"');
                    if let Some(tag) = FaceTag::parse(&name.to_ascii_lowercase()) {
                        names.insert(id[1], tag);
                    }
                }
            }
            "$Nodes" => {
                let n = lines.count()?;
                for _ in 0..n {
                    let line = lines.next_line(false)?;
                    let id: i64 = lines.fields(line, 1)?[0];
                    let c: Vec<f64> = lines.fields(line, 4)?;
                    node_ids.insert(id, vertices.len());
                    vertices.push(Vec3::new(c[1], c[2], c[3]));
                }
            }
            "$Elements" => {
                let n = lines.count()?;
                for _ in 0..n {
                    let line = lines.next_line(false)?;
                    let head: Vec<i64> = lines.fields(line, 3)?;
                    let (ty, ntags) = (head[1], head[2] as usize);
                    let nodes = match ty {
                        4 => 4,
                        2 => 3,
                        _ => continue,
                    };
                    let all: Vec<i64> = lines.fields(line, 3 + ntags + nodes)?;
                    let physical = if ntags > 0 { all[3] } else { 0 };
                    let ids = &all[3 + ntags..];
                    if ty == 4 {
                        let mut t = [0usize; 4];
                        for (k, id) in ids.iter().enumerate() {
                            t[k] = *node_ids.get(id).ok_or_else(|| lines.err(format!("unknown node {id}")))?;
                        }
                        tets.push(t);
                    } else {
                        triangles.push(([ids[0], ids[1], ids[2]], physical, lines.last));
                    }
                }
            }
            s if s.starts_with("$End") => {}
            s if s.starts_with('$') => {
                // skip unknown sections
                let end = format!("$End{}", &s[1..]);
                while lines.next_line(false)? != end {}
            }
            _ => return Err(lines.err(format!("unexpected line `{section}`"))),
        }
    }

    let mut mesh = Mesh::new(vertices, tets)?;
    let mut tagged = Vec::with_capacity(triangles.len());
    for (ids, physical, line) in triangles {
        let tag = names.get(&physical).copied().unwrap_or(match physical {
            1 => FaceTag::Endocardium,
            2 => FaceTag::Epicardium,
            3 => FaceTag::Base,
            _ => FaceTag::Other,
        });
        let mut f = [0usize; 3];
        for (k, id) in ids.iter().enumerate() {
            f[k] = *node_ids.get(id).ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("unknown node {id}"),
            })?;
        }
        tagged.push((f, tag, line));
    }
    apply_face_tags(&mut mesh, &tagged, path)?;
    Ok(mesh)
}
