//! Isosurface extraction: sample the learned density on a regular grid and
//! run marching cubes over the standard 256-case tables, with vertices
//! linearly interpolated along straddling cell edges. Output is ASCII OBJ.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::kinematics::{Pose, Vec3};
use crate::mc_tables::{CORNER_OFFSETS, CORNER_PAIRS, EDGE_TABLE, TRI_TABLE};
use crate::model::{Model, ModelError};
use crate::params::ParamStore;

/// Regular scalar grid over an axis-aligned box. Values indexed
/// `(x * ny + y) * nz + z`.
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    pub dims: [usize; 3],
    pub origin: Vec3,
    pub spacing: [f64; 3],
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[(x * self.dims[1] + y) * self.dims[2] + z]
    }

    pub fn position(&self, x: usize, y: usize, z: usize) -> Vec3 {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Fill from an arbitrary scalar function.
    pub fn from_fn(
        dims: [usize; 3],
        lo: Vec3,
        hi: Vec3,
        f: impl Fn(Vec3) -> f64,
    ) -> ScalarGrid {
        let spacing = std::array::from_fn(|k| {
            if dims[k] > 1 {
                (hi[k] - lo[k]) / (dims[k] - 1) as f64
            } else {
                0.0
            }
        });
        let mut grid = ScalarGrid {
            dims,
            origin: lo,
            spacing,
            values: Vec::with_capacity(dims[0] * dims[1] * dims[2]),
        };
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    grid.values.push(f(grid.position(x, y, z)));
                }
            }
        }
        grid
    }
}

/// Sample the model's density field over the pose's (dilated) bounding box.
pub fn density_grid(
    model: &Model,
    params: &ParamStore,
    pose: &Pose,
    lo: Vec3,
    hi: Vec3,
    resolution: usize,
) -> Result<ScalarGrid, ModelError> {
    assert!(resolution >= 2, "grid resolution must be at least 2");
    let dims = [resolution; 3];
    let spacing = std::array::from_fn(|k| (hi[k] - lo[k]) / (resolution - 1) as f64);
    let mut points = Vec::with_capacity(resolution * resolution * resolution);
    for x in 0..resolution {
        for y in 0..resolution {
            for z in 0..resolution {
                points.push([
                    lo[0] + x as f64 * spacing[0],
                    lo[1] + y as f64 * spacing[1],
                    lo[2] + z as f64 * spacing[2],
                ]);
            }
        }
    }
    let values = model.density_at(params, pose, &points)?;
    Ok(ScalarGrid {
        dims,
        origin: lo,
        spacing,
        values,
    })
}

#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn write_obj(&self, path: &Path) -> std::io::Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in &self.vertices {
            writeln!(f, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for t in &self.triangles {
            writeln!(f, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }
}

/// Extract the `iso` level set. An iso value outside the grid's value range
/// simply yields an empty mesh. Vertices on shared cell edges are merged.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> TriangleMesh {
    let [nx, ny, nz] = grid.dims;
    let mut mesh = TriangleMesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    // vertex cache keyed by (corner cell coordinates, axis) of the edge
    let mut edge_vertex: HashMap<(usize, usize, usize, usize, usize, usize), usize> =
        HashMap::new();

    for cx in 0..nx - 1 {
        for cy in 0..ny - 1 {
            for cz in 0..nz - 1 {
                let mut case = 0usize;
                let mut corner_vals = [0.0; 8];
                for (k, &(dx, dy, dz)) in CORNER_OFFSETS.iter().enumerate() {
                    corner_vals[k] = grid.at(cx + dx, cy + dy, cz + dz);
                    if corner_vals[k] > iso {
                        case |= 1 << k;
                    }
                }
                let edge_bits = EDGE_TABLE[case];
                if edge_bits == 0 {
                    continue;
                }
                let mut edge_ids = [usize::MAX; 12];
                for (e, &(a, b)) in CORNER_PAIRS.iter().enumerate() {
                    if edge_bits & (1 << e) == 0 {
                        continue;
                    }
                    let (adx, ady, adz) = CORNER_OFFSETS[a];
                    let (bdx, bdy, bdz) = CORNER_OFFSETS[b];
                    let ga = (cx + adx, cy + ady, cz + adz);
                    let gb = (cx + bdx, cy + bdy, cz + bdz);
                    let key = (
                        ga.0.min(gb.0),
                        ga.1.min(gb.1),
                        ga.2.min(gb.2),
                        ga.0.max(gb.0),
                        ga.1.max(gb.1),
                        ga.2.max(gb.2),
                    );
                    let id = *edge_vertex.entry(key).or_insert_with(|| {
                        let va = corner_vals[a];
                        let vb = corner_vals[b];
                        let t = if (vb - va).abs() < 1e-30 {
                            0.5
                        } else {
                            ((iso - va) / (vb - va)).clamp(0.0, 1.0)
                        };
                        let pa = grid.position(ga.0, ga.1, ga.2);
                        let pb = grid.position(gb.0, gb.1, gb.2);
                        mesh.vertices.push([
                            pa[0] + t * (pb[0] - pa[0]),
                            pa[1] + t * (pb[1] - pa[1]),
                            pa[2] + t * (pb[2] - pa[2]),
                        ]);
                        mesh.vertices.len() - 1
                    });
                    edge_ids[e] = id;
                }
                let tris = &TRI_TABLE[case];
                let mut k = 0;
                while tris[k] >= 0 {
                    mesh.triangles.push([
                        edge_ids[tris[k] as usize],
                        edge_ids[tris[k + 1] as usize],
                        edge_ids[tris[k + 2] as usize],
                    ]);
                    k += 3;
                }
            }
        }
    }
    mesh
}
