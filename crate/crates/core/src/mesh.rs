//! Background tetrahedral meshes of an axis-aligned box.
//!
//! The initial mesh is a Kuhn (Freudenthal) subdivision: every cube of an
//! `n x n x n` grid is split into the six path simplices sharing its main
//! diagonal. Local refinement uses Maubach's tagged newest-vertex bisection,
//! for which the Kuhn mesh is a compatible initial triangulation, so closure
//! bisections always terminate and descendants fall into finitely many
//! similarity classes.

use std::collections::{HashMap, VecDeque};

use nalgebra::Vector3;

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Sentinel for the missing second neighbour of a boundary face.
pub const NO_TET: usize = usize::MAX;

/// Maximum number of closure generations a single refinement call may add.
const MAX_CLOSURE_DEPTH: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxDomain {
    pub min: Vec3,
    pub max: Vec3,
}

impl BoxDomain {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self {
            min: Vec3::from(min),
            max: Vec3::from(max),
        }
    }

    /// The cube `[lo, hi]^3`.
    pub fn cube(lo: f64, hi: f64) -> Self {
        Self::new([lo; 3], [hi; 3])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn contains(&self, x: &Vec3, tol: f64) -> bool {
        (0..3).all(|k| x[k] >= self.min[k] - tol && x[k] <= self.max[k] + tol)
    }

    /// True if `x` lies on one of the six box faces (within `tol`).
    pub fn on_boundary(&self, x: &Vec3, tol: f64) -> bool {
        (0..3).any(|k| (x[k] - self.min[k]).abs() <= tol || (x[k] - self.max[k]).abs() <= tol)
    }
}

/// A triangular face of the mesh with its one or two adjacent tetrahedra.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    /// Sorted vertex indices.
    pub vertices: [usize; 3],
    /// Adjacent tetrahedra; `tets[1] == NO_TET` on the boundary.
    pub tets: [usize; 2],
}

impl Face {
    pub fn is_interior(&self) -> bool {
        self.tets[1] != NO_TET
    }

    pub fn other(&self, tet: usize) -> Option<usize> {
        match self.tets {
            [a, b] if a == tet && b != NO_TET => Some(b),
            [a, b] if b == tet => Some(a),
            _ => None,
        }
    }
}

/// Face table: the unique faces plus, per tetrahedron, the face opposite each local vertex.
#[derive(Debug, Clone)]
pub struct FaceTable {
    pub faces: Vec<Face>,
    pub tet_faces: Vec<[usize; 4]>,
}

impl FaceTable {
    pub fn interior_count(&self) -> usize {
        self.faces.iter().filter(|f| f.is_interior()).count()
    }

    pub fn boundary_count(&self) -> usize {
        self.faces.len() - self.interior_count()
    }
}

/// Conforming tetrahedral mesh with bisection history.
///
/// Immutable after construction; refinement returns a new mesh whose vertex
/// array starts with the vertices of its parent.
#[derive(Debug, Clone)]
pub struct TetMesh {
    domain: BoxDomain,
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    /// Vertex order used by Maubach bisection; the refinement edge is `order[0]`--`order[tag]`.
    bisection_order: Vec<[usize; 4]>,
    bisection_tag: Vec<u8>,
    generation: Vec<u32>,
    parent: Vec<Option<usize>>,
    diameters: Vec<f64>,
    faces: FaceTable,
}

impl TetMesh {
    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> &Vec3 {
        &self.vertices[i]
    }

    /// Positively oriented vertex indices of every tetrahedron.
    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    pub fn tet(&self, t: usize) -> [usize; 4] {
        self.tets[t]
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn tet_vertices(&self, t: usize) -> [Vec3; 4] {
        self.tets[t].map(|v| self.vertices[v])
    }

    /// Diameter `h_T` (longest edge).
    pub fn diameter(&self, t: usize) -> f64 {
        self.diameters[t]
    }

    pub fn diameters(&self) -> &[f64] {
        &self.diameters
    }

    pub fn max_diameter(&self) -> f64 {
        self.diameters.iter().copied().fold(0.0, f64::max)
    }

    /// Number of bisections separating the tetrahedron from the initial Kuhn mesh.
    pub fn generation(&self, t: usize) -> u32 {
        self.generation[t]
    }

    /// Index of the tetrahedron in the mesh this one was refined from.
    pub fn parent(&self, t: usize) -> Option<usize> {
        self.parent[t]
    }

    /// Refinement edge as a pair of vertex indices.
    pub fn refinement_edge(&self, t: usize) -> (usize, usize) {
        let o = self.bisection_order[t];
        (o[0], o[self.bisection_tag[t] as usize])
    }

    pub fn faces(&self) -> &FaceTable {
        &self.faces
    }

    pub fn volume(&self, t: usize) -> f64 {
        signed_volume(&self.tet_vertices(t))
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.n_tets()).map(|t| self.volume(t)).sum()
    }

    /// Circumscribed over inscribed sphere diameter.
    pub fn shape_ratio(&self, t: usize) -> f64 {
        shape_ratio(&self.tet_vertices(t))
    }

    /// Sorted, deduplicated list of all edges.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .tets
            .iter()
            .flat_map(|t| LOCAL_EDGES.iter().map(move |&(a, b)| sorted_pair(t[a], t[b])))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    fn from_parts(
        domain: BoxDomain,
        vertices: Vec<Vec3>,
        bisection_order: Vec<[usize; 4]>,
        bisection_tag: Vec<u8>,
        generation: Vec<u32>,
        parent: Vec<Option<usize>>,
    ) -> Result<Self> {
        let tets: Vec<[usize; 4]> = bisection_order
            .iter()
            .map(|&o| {
                let pts = o.map(|v| vertices[v]);
                if signed_volume(&pts) < 0.0 {
                    [o[0], o[1], o[3], o[2]]
                } else {
                    o
                }
            })
            .collect();
        let diameters = tets
            .iter()
            .map(|t| {
                LOCAL_EDGES
                    .iter()
                    .map(|&(a, b)| (vertices[t[a]] - vertices[t[b]]).norm())
                    .fold(0.0, f64::max)
            })
            .collect();
        let faces = face_adjacency(&tets, vertices.len())?;
        Ok(Self {
            domain,
            vertices,
            tets,
            bisection_order,
            bisection_tag,
            generation,
            parent,
            diameters,
            faces,
        })
    }
}

/// Local vertex pairs of the six tetrahedron edges, in the order used for P2 edge dofs.
pub const LOCAL_EDGES: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

/// Local vertices of the face opposite local vertex `i`.
pub const LOCAL_FACES: [[usize; 3]; 4] = [[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]];

pub(crate) fn sorted_pair(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

pub fn signed_volume(p: &[Vec3; 4]) -> f64 {
    (p[1] - p[0]).dot(&(p[2] - p[0]).cross(&(p[3] - p[0]))) / 6.0
}

/// Ratio of circumsphere diameter to insphere diameter.
pub fn shape_ratio(p: &[Vec3; 4]) -> f64 {
    let vol = signed_volume(p).abs();
    let area: f64 = LOCAL_FACES
        .iter()
        .map(|f| 0.5 * (p[f[1]] - p[f[0]]).cross(&(p[f[2]] - p[f[0]])).norm())
        .sum();
    let inradius = 3.0 * vol / area;
    // Circumcenter c solves 2 (p_i - p_0) . c = |p_i|^2 - |p_0|^2.
    let a = nalgebra::Matrix3::from_rows(&[
        (p[1] - p[0]).transpose(),
        (p[2] - p[0]).transpose(),
        (p[3] - p[0]).transpose(),
    ]) * 2.0;
    let rhs = Vec3::new(
        p[1].norm_squared() - p[0].norm_squared(),
        p[2].norm_squared() - p[0].norm_squared(),
        p[3].norm_squared() - p[0].norm_squared(),
    );
    let circumradius = match a.lu().solve(&rhs) {
        Some(c) => (c - p[0]).norm(),
        None => return f64::INFINITY,
    };
    circumradius / inradius
}

/// Kuhn subdivision of `domain` into `6 n^3` congruent tetrahedra.
pub fn build_box_mesh(domain: BoxDomain, n: usize) -> Result<TetMesh> {
    if n == 0 {
        return Err(Error::InvalidInput("subdivisions per axis must be >= 1".into()));
    }
    let ext = domain.extent();
    if !(ext.x > 0.0 && ext.y > 0.0 && ext.z > 0.0) {
        return Err(Error::InvalidInput(format!(
            "box must have positive extent, got {:?}",
            ext.as_slice()
        )));
    }
    let np = n + 1;
    let id = |i: usize, j: usize, k: usize| i + np * (j + np * k);
    let mut vertices = Vec::with_capacity(np * np * np);
    for k in 0..np {
        for j in 0..np {
            for i in 0..np {
                let s = Vec3::new(i as f64, j as f64, k as f64) / n as f64;
                vertices.push(domain.min + ext.component_mul(&s));
            }
        }
    }
    const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let n_tets = 6 * n * n * n;
    let mut order = Vec::with_capacity(n_tets);
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                for perm in PERMS {
                    let mut c = [i, j, k];
                    let mut path = [id(i, j, k); 4];
                    for (step, &axis) in perm.iter().enumerate() {
                        c[axis] += 1;
                        path[step + 1] = id(c[0], c[1], c[2]);
                    }
                    order.push(path);
                }
            }
        }
    }
    TetMesh::from_parts(
        domain,
        vertices,
        order,
        vec![3; n_tets],
        vec![0; n_tets],
        vec![None; n_tets],
    )
}

/// Builds the face table, rejecting faces shared by more than two tetrahedra.
pub fn face_adjacency(tets: &[[usize; 4]], n_vertices: usize) -> Result<FaceTable> {
    // Pack sorted vertex triples into one integer key when indices fit in 21 bits.
    if n_vertices < (1 << 21) {
        let keys = face_keys(tets, |f| ((f[0] as u64) << 42) | ((f[1] as u64) << 21) | f[2] as u64);
        group_faces(keys, tets)
    } else {
        let keys = face_keys(tets, |f| ((f[0] as u128) << 84) | ((f[1] as u128) << 42) | f[2] as u128);
        group_faces(keys, tets)
    }
}

fn face_keys<K>(tets: &[[usize; 4]], pack: impl Fn([usize; 3]) -> K) -> Vec<(K, usize)> {
    let mut keys = Vec::with_capacity(4 * tets.len());
    for (t, tet) in tets.iter().enumerate() {
        for (l, lf) in LOCAL_FACES.iter().enumerate() {
            let mut f = lf.map(|i| tet[i]);
            f.sort_unstable();
            keys.push((pack(f), 4 * t + l));
        }
    }
    keys
}

fn group_faces<K: Ord + Copy>(mut keys: Vec<(K, usize)>, tets: &[[usize; 4]]) -> Result<FaceTable> {
    keys.sort_unstable();
    let mut faces = Vec::with_capacity(keys.len() / 2 + 1);
    let mut tet_faces = vec![[usize::MAX; 4]; tets.len()];
    let mut i = 0;
    while i < keys.len() {
        let mut j = i + 1;
        while j < keys.len() && keys[j].0 == keys[i].0 {
            j += 1;
        }
        let (t0, l0) = (keys[i].1 / 4, keys[i].1 % 4);
        let mut vertices = LOCAL_FACES[l0].map(|v| tets[t0][v]);
        vertices.sort_unstable();
        if j - i > 2 {
            return Err(Error::NonConforming {
                face: vertices,
                count: j - i,
            });
        }
        let fid = faces.len();
        let mut adj = [NO_TET; 2];
        for (slot, &(_, code)) in keys[i..j].iter().enumerate() {
            adj[slot] = code / 4;
            tet_faces[code / 4][code % 4] = fid;
        }
        faces.push(Face { vertices, tets: adj });
        i = j;
    }
    Ok(FaceTable { faces, tet_faces })
}

/// Bisects every marked tetrahedron at least once and restores conformity.
///
/// Children of a bisected tetrahedron record the index of their ancestor in
/// `mesh` as parent. An empty marked set returns a copy of the input.
pub fn bisect_refine(mesh: &TetMesh, marked: &[usize]) -> Result<TetMesh> {
    if let Some(&bad) = marked.iter().find(|&&t| t >= mesh.n_tets()) {
        return Err(Error::InvalidInput(format!(
            "marked tetrahedron {bad} out of range (mesh has {})",
            mesh.n_tets()
        )));
    }
    if marked.is_empty() {
        return Ok(mesh.clone());
    }

    let mut vertices = mesh.vertices.clone();
    let mut order = mesh.bisection_order.clone();
    let mut tag = mesh.bisection_tag.clone();
    let mut generation = mesh.generation.clone();
    let mut origin: Vec<usize> = (0..mesh.n_tets()).collect();
    let mut alive = vec![true; mesh.n_tets()];
    let mut base_generation = mesh.generation.clone();

    let mut edge_tets: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (t, o) in order.iter().enumerate() {
        for &(a, b) in &LOCAL_EDGES {
            edge_tets.entry(sorted_pair(o[a], o[b])).or_default().push(t);
        }
    }
    let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();

    let mut marked: Vec<usize> = marked.to_vec();
    marked.sort_unstable();
    marked.dedup();
    let mut must_split = vec![false; mesh.n_tets()];
    let mut queue: VecDeque<usize> = VecDeque::new();
    for &t in &marked {
        must_split[t] = true;
        queue.push_back(t);
    }

    while let Some(t) = queue.pop_front() {
        if !alive[t] {
            continue;
        }
        let o = order[t];
        let hanging = LOCAL_EDGES
            .iter()
            .any(|&(a, b)| midpoints.contains_key(&sorted_pair(o[a], o[b])));
        if !(must_split[t] || hanging) {
            continue;
        }
        if generation[t] - base_generation[t] >= MAX_CLOSURE_DEPTH {
            return Err(Error::Consistency(format!(
                "bisection closure exceeded depth {MAX_CLOSURE_DEPTH} at tetrahedron {t}"
            )));
        }

        let k = tag[t] as usize;
        let edge = sorted_pair(o[0], o[k]);
        let z = match midpoints.get(&edge) {
            Some(&z) => z,
            None => {
                let z = vertices.len();
                vertices.push((vertices[edge.0] + vertices[edge.1]) * 0.5);
                midpoints.insert(edge, z);
                if let Some(sharing) = edge_tets.get(&edge) {
                    queue.extend(sharing.iter().copied().filter(|&s| s != t));
                }
                z
            }
        };

        let mut c1 = o;
        c1[k] = z;
        let mut c2 = [0usize; 4];
        c2[..k].copy_from_slice(&o[1..=k]);
        c2[k] = z;
        c2[k + 1..].copy_from_slice(&o[k + 1..]);
        let child_tag = if k > 1 { k - 1 } else { 3 } as u8;

        alive[t] = false;
        for &(a, b) in &LOCAL_EDGES {
            if let Some(list) = edge_tets.get_mut(&sorted_pair(o[a], o[b])) {
                list.retain(|&s| s != t);
            }
        }
        for child in [c1, c2] {
            let c = order.len();
            order.push(child);
            tag.push(child_tag);
            generation.push(generation[t] + 1);
            base_generation.push(base_generation[t]);
            origin.push(origin[t]);
            alive.push(true);
            must_split.push(false);
            for &(a, b) in &LOCAL_EDGES {
                edge_tets.entry(sorted_pair(child[a], child[b])).or_default().push(c);
            }
            queue.push_back(c);
        }
    }

    let keep: Vec<usize> = (0..order.len()).filter(|&t| alive[t]).collect();
    TetMesh::from_parts(
        mesh.domain,
        vertices,
        keep.iter().map(|&t| order[t]).collect(),
        keep.iter().map(|&t| tag[t]).collect(),
        keep.iter().map(|&t| generation[t]).collect(),
        keep.iter().map(|&t| Some(origin[t])).collect(),
    )
}

/// Bisects every tetrahedron `times` times (three rounds halve the mesh size).
pub fn refine_uniform(mesh: &TetMesh, times: usize) -> Result<TetMesh> {
    let mut m = mesh.clone();
    for _ in 0..times {
        let all: Vec<usize> = (0..m.n_tets()).collect();
        m = bisect_refine(&m, &all)?;
    }
    Ok(m)
}
