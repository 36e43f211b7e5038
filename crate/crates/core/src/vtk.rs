//! Legacy ASCII VTK output: background tetrahedra as an unstructured grid and
//! the discrete surface as polygonal data with per-triangle scalars.

use std::io::{BufWriter, Write};
use std::path::Path;

use crate::assembly::Discretization;
use crate::error::{Error, Result};
use crate::mesh::{TetMesh, Vec3};

pub const VTK_HEADER: &str = "# vtk DataFile Version 3.0";

const VTK_TETRA: u32 = 10;

/// Triangulated surface; `parent[i]` is the `Γ^lin` triangle that triangle `i` came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceMesh {
    pub points: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub parent: Vec<usize>,
}

impl SurfaceMesh {
    /// Spreads one value per parent triangle onto the output triangles.
    pub fn expand(&self, per_parent: &[f64]) -> Vec<f64> {
        self.parent.iter().map(|&p| per_parent[p]).collect()
    }
}

/// Image of `Γ^lin` under the geometry map. Curved maps split each triangle
/// into four using mapped edge midpoints; the identity map keeps the triangles.
pub fn mapped_surface_mesh(disc: &Discretization) -> Result<SurfaceMesh> {
    let mut out = SurfaceMesh::default();
    let curved = !disc.map.is_identity();
    for a in 0..disc.cut.n_active() {
        let t = disc.cut.active_tets()[a];
        let geo = disc.space.geometry(t)?;
        let (first, _) = disc.cut.triangle_range(a);
        for (j, tri) in disc.cut.triangles_of(a).iter().enumerate() {
            let map = |x: Vec3| disc.map.eval(t, &geo, &geo.barycentric(&x)).x;
            let base = out.points.len();
            let v = tri.vertices;
            if curved {
                for x in [v[0], v[1], v[2], (v[0] + v[1]) / 2.0, (v[1] + v[2]) / 2.0, (v[2] + v[0]) / 2.0] {
                    out.points.push(map(x));
                }
                for local in [[0, 3, 5], [3, 1, 4], [5, 4, 2], [3, 4, 5]] {
                    out.triangles.push(local.map(|i| base + i));
                    out.parent.push(first + j);
                }
            } else {
                out.points.extend(v);
                out.triangles.push([base, base + 1, base + 2]);
                out.parent.push(first + j);
            }
        }
    }
    Ok(out)
}

fn check_len(name: &str, values: &[f64], n: usize) -> Result<()> {
    if values.len() != n {
        return Err(Error::InvalidInput(format!(
            "cell field '{name}' has {} values for {n} cells",
            values.len()
        )));
    }
    if name.is_empty() || name.contains(char::is_whitespace) {
        return Err(Error::InvalidInput(format!("invalid VTK field name '{name}'")));
    }
    Ok(())
}

fn single_line(title: &str) -> String {
    title.replace(['\n', '\r'], " ").chars().take(255).collect()
}

fn write_cell_data(w: &mut impl Write, n: usize, fields: &[(&str, &[f64])]) -> std::io::Result<()> {
    if fields.is_empty() {
        return Ok(());
    }
    writeln!(w, "CELL_DATA {n}")?;
    for (name, values) in fields {
        writeln!(w, "SCALARS {name} double 1")?;
        writeln!(w, "LOOKUP_TABLE default")?;
        for v in values.iter() {
            writeln!(w, "{v:.17e}")?;
        }
    }
    Ok(())
}

/// Writes the tetrahedra `cells` of `mesh` (all tetrahedra when `None`).
pub fn write_tet_mesh_to(
    w: &mut impl Write,
    title: &str,
    mesh: &TetMesh,
    cells: Option<&[usize]>,
    fields: &[(&str, &[f64])],
) -> Result<()> {
    let all: Vec<usize>;
    let cells = match cells {
        Some(c) => c,
        None => {
            all = (0..mesh.n_tets()).collect();
            &all
        }
    };
    for (name, values) in fields {
        check_len(name, values, cells.len())?;
    }
    let io = |e| Error::io("<vtk stream>", e);
    (|| -> std::io::Result<()> {
        writeln!(w, "{VTK_HEADER}")?;
        writeln!(w, "{}", single_line(title))?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET UNSTRUCTURED_GRID")?;
        writeln!(w, "POINTS {} double", mesh.n_vertices())?;
        for p in mesh.vertices() {
            writeln!(w, "{:.17e} {:.17e} {:.17e}", p.x, p.y, p.z)?;
        }
        writeln!(w, "CELLS {} {}", cells.len(), 5 * cells.len())?;
        for &c in cells {
            let t = mesh.tet(c);
            writeln!(w, "4 {} {} {} {}", t[0], t[1], t[2], t[3])?;
        }
        writeln!(w, "CELL_TYPES {}", cells.len())?;
        for _ in cells {
            writeln!(w, "{VTK_TETRA}")?;
        }
        write_cell_data(w, cells.len(), fields)?;
        w.flush()
    })()
    .map_err(io)
}

/// Writes a triangulated surface as POLYDATA with per-triangle scalars.
pub fn write_surface_to(w: &mut impl Write, title: &str, surface: &SurfaceMesh, fields: &[(&str, &[f64])]) -> Result<()> {
    let n = surface.triangles.len();
    for (name, values) in fields {
        check_len(name, values, n)?;
    }
    let io = |e| Error::io("<vtk stream>", e);
    (|| -> std::io::Result<()> {
        writeln!(w, "{VTK_HEADER}")?;
        writeln!(w, "{}", single_line(title))?;
        writeln!(w, "ASCII")?;
        writeln!(w, "DATASET POLYDATA")?;
        writeln!(w, "POINTS {} double", surface.points.len())?;
        for p in &surface.points {
            writeln!(w, "{:.17e} {:.17e} {:.17e}", p.x, p.y, p.z)?;
        }
        writeln!(w, "POLYGONS {} {}", n, 4 * n)?;
        for t in &surface.triangles {
            writeln!(w, "3 {} {} {}", t[0], t[1], t[2])?;
        }
        write_cell_data(w, n, fields)?;
        w.flush()
    })()
    .map_err(io)
}

fn create(path: &Path) -> Result<BufWriter<std::fs::File>> {
    std::fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

pub fn write_surface(path: impl AsRef<Path>, title: &str, surface: &SurfaceMesh, fields: &[(&str, &[f64])]) -> Result<()> {
    let path = path.as_ref();
    write_surface_to(&mut create(path)?, title, surface, fields).map_err(|e| rename_io(e, path))
}

pub fn write_tet_mesh(
    path: impl AsRef<Path>,
    title: &str,
    mesh: &TetMesh,
    cells: Option<&[usize]>,
    fields: &[(&str, &[f64])],
) -> Result<()> {
    let path = path.as_ref();
    write_tet_mesh_to(&mut create(path)?, title, mesh, cells, fields).map_err(|e| rename_io(e, path))
}

fn rename_io(e: Error, path: &Path) -> Error {
    match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    }
}
