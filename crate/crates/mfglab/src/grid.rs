//! Uniform tensor-product grids on the box [-L, L]^N and the discrete
//! calculus used by every solver in this crate.
//!
//! The box is sampled with `n` nodes per axis including both endpoints, so
//! the spacing is h = 2L/(n-1) and nodes sit at -L + i*h. Scalar fields
//! store one value per node in lexicographic order (the first axis varies
//! slowest), which is also the row order of the CSV serialization.
//!
//! Three design constraints drive the stencil choices:
//! - `gradient` is second order everywhere: central differences at interior
//!   nodes and one-sided three-point differences on the boundary.
//! - `divergence` is the exact negative adjoint of `gradient` with respect
//!   to the trapezoidal inner product, so the discrete integration-by-parts
//!   identity  integrate(u * div F) + integrate(grad u . F) = 0  holds to
//!   machine precision for every pair (u, F), with no boundary remainder.
//! - `laplacian` is the compact second-order 2N+1 point stencil with mirror
//!   (Neumann) closure; solvers that need an M-matrix build on it rather
//!   than on the wide composition divergence(gradient(.)).

use crate::error::{MfgError, Result};
use std::io::{BufRead, Write};
use std::path::Path;

/// Uniform grid on [-half_width, half_width]^dim with nodes_per_axis nodes
/// per axis (endpoints included).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    dim: usize,
    half_width: f64,
    nodes_per_axis: usize,
}

impl Grid {
    /// Validated constructor. Dimensions 1..=3, at least 8 nodes per axis,
    /// strictly positive half width.
    pub fn new(dim: usize, half_width: f64, nodes_per_axis: usize) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(MfgError::InvalidParameter(format!(
                "grid dimension must be 1, 2 or 3, got {dim}"
            )));
        }
        if !(half_width.is_finite() && half_width > 0.0) {
            return Err(MfgError::InvalidParameter(format!(
                "grid half width must be finite and positive, got {half_width}"
            )));
        }
        if nodes_per_axis < 8 {
            return Err(MfgError::InvalidParameter(format!(
                "grid needs at least 8 nodes per axis, got {nodes_per_axis}"
            )));
        }
        Ok(Grid {
            dim,
            half_width,
            nodes_per_axis,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.nodes_per_axis
    }

    /// Node spacing h = 2L/(n-1).
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / (self.nodes_per_axis - 1) as f64
    }

    /// Total number of nodes, n^dim.
    pub fn node_count(&self) -> usize {
        self.nodes_per_axis.pow(self.dim as u32)
    }

    /// Volume of the box, (2L)^dim.
    pub fn volume(&self) -> f64 {
        (2.0 * self.half_width).powi(self.dim as i32)
    }

    /// Coordinate of index i along any axis.
    pub fn axis_coord(&self, i: usize) -> f64 {
        -self.half_width + i as f64 * self.spacing()
    }

    /// Stride of `axis` in the lexicographic node ordering.
    pub fn stride(&self, axis: usize) -> usize {
        self.nodes_per_axis.pow((self.dim - 1 - axis) as u32)
    }

    /// Decode a flat node index into per-axis indices (only the first
    /// `dim` entries are meaningful).
    pub fn multi_index(&self, node: usize) -> [usize; 3] {
        let n = self.nodes_per_axis;
        let mut out = [0usize; 3];
        let mut rest = node;
        for d in (0..self.dim).rev() {
            out[d] = rest % n;
            rest /= n;
        }
        out
    }

    /// Physical coordinates of a node (only the first `dim` entries are
    /// meaningful).
    pub fn position(&self, node: usize) -> [f64; 3] {
        let mi = self.multi_index(node);
        let mut out = [0.0f64; 3];
        for d in 0..self.dim {
            out[d] = self.axis_coord(mi[d]);
        }
        out
    }

    /// Euclidean norm of the node position.
    pub fn radius(&self, node: usize) -> f64 {
        let p = self.position(node);
        p[..self.dim].iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Node closest to the origin; with an odd node count it is exact.
    pub fn center_node(&self) -> usize {
        let mid = (self.nodes_per_axis - 1) / 2;
        let mut node = 0;
        for d in 0..self.dim {
            node += mid * self.stride(d);
        }
        node
    }

    /// Trapezoidal weight along one axis: h/2 at the endpoints, h inside.
    pub fn axis_weight(&self, i: usize) -> f64 {
        let h = self.spacing();
        if i == 0 || i == self.nodes_per_axis - 1 {
            0.5 * h
        } else {
            h
        }
    }

    /// Trapezoidal quadrature weight of a node (product of axis weights).
    pub fn node_weight(&self, node: usize) -> f64 {
        let mi = self.multi_index(node);
        (0..self.dim).map(|d| self.axis_weight(mi[d])).product()
    }

    /// All node weights as a vector, in node order.
    pub fn weight_vector(&self) -> Vec<f64> {
        (0..self.node_count()).map(|i| self.node_weight(i)).collect()
    }

    /// Base indices (nodes with axis index 0) of every grid line along
    /// `axis`. Walking `base + k * stride(axis)` for k in 0..n traverses
    /// one line.
    pub fn line_bases(&self, axis: usize) -> Vec<usize> {
        let n = self.nodes_per_axis;
        let mut bases = Vec::with_capacity(self.node_count() / n);
        for node in 0..self.node_count() {
            if self.multi_index(node)[axis] == 0 {
                bases.push(node);
            }
        }
        bases
    }
}

/// One value per grid node, lexicographic node order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: Grid) -> Self {
        ScalarField {
            grid,
            values: vec![0.0; grid.node_count()],
        }
    }

    pub fn constant(grid: Grid, c: f64) -> Self {
        ScalarField {
            grid,
            values: vec![c; grid.node_count()],
        }
    }

    /// Sample a function of the node position.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..grid.node_count())
            .map(|i| {
                let p = grid.position(i);
                f(&p[..grid.dim()])
            })
            .collect();
        ScalarField { grid, values }
    }

    pub fn from_values(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(MfgError::InvalidParameter(format!(
                "field length {} does not match node count {}",
                values.len(),
                grid.node_count()
            )));
        }
        Ok(ScalarField { grid, values })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField {
            grid: self.grid,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Write the field as CSV: header x1..xN,value, one row per node in
    /// lexicographic node order, every float at 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let dim = self.grid.dim();
        for d in 0..dim {
            write!(out, "x{},", d + 1)?;
        }
        writeln!(out, "value")?;
        for (i, v) in self.values.iter().enumerate() {
            let p = self.grid.position(i);
            for x in p.iter().take(dim) {
                write!(out, "{},", fmt_f64(*x))?;
            }
            writeln!(out, "{}", fmt_f64(*v))?;
        }
        out.flush()?;
        Ok(())
    }

    /// Read a field written by `write_csv`, validating the coordinates
    /// against the expected grid.
    pub fn read_csv(grid: Grid, path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or_else(|| MfgError::Config(format!("{}: empty CSV", path.display())))??;
        let expected_cols = grid.dim() + 1;
        if header.split(',').count() != expected_cols {
            return Err(MfgError::Config(format!(
                "{}: expected {} columns, header is '{}'",
                path.display(),
                expected_cols,
                header
            )));
        }
        let mut values = Vec::with_capacity(grid.node_count());
        let coord_tol = 1e-9 * grid.spacing().max(1.0);
        for (row, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != expected_cols {
                return Err(MfgError::Config(format!(
                    "{}: row {} has {} cells, expected {}",
                    path.display(),
                    row,
                    cells.len(),
                    expected_cols
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| MfgError::Config(format!("{}: bad float '{}': {}", path.display(), s, e)))
            };
            let node = values.len();
            if node >= grid.node_count() {
                return Err(MfgError::Config(format!(
                    "{}: more rows than grid nodes ({})",
                    path.display(),
                    grid.node_count()
                )));
            }
            let p = grid.position(node);
            for d in 0..grid.dim() {
                let x = parse(cells[d])?;
                if (x - p[d]).abs() > coord_tol {
                    return Err(MfgError::Config(format!(
                        "{}: row {} coordinate {} is {}, grid expects {}",
                        path.display(),
                        row,
                        d,
                        x,
                        p[d]
                    )));
                }
            }
            values.push(parse(cells[grid.dim()])?);
        }
        ScalarField::from_values(grid, values)
    }
}

/// One value per node per axis direction.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub grid: Grid,
    pub components: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(grid: Grid) -> Self {
        VectorField {
            grid,
            components: vec![vec![0.0; grid.node_count()]; grid.dim()],
        }
    }

    /// Euclidean magnitude at every node.
    pub fn magnitude(&self) -> ScalarField {
        let mut values = vec![0.0; self.grid.node_count()];
        for comp in &self.components {
            for (acc, &v) in values.iter_mut().zip(comp.iter()) {
                *acc += v * v;
            }
        }
        for v in values.iter_mut() {
            *v = v.sqrt();
        }
        ScalarField {
            grid: self.grid,
            values,
        }
    }
}

/// Format a float with 17 significant digits (exact round trip for f64).
pub fn fmt_f64(v: f64) -> String {
    format!("{:.16e}", v)
}

/// One-dimensional gradient stencil row `j` on a line of `n` nodes with
/// spacing `h`: second-order central at interior nodes, second-order
/// one-sided at the two boundary nodes. Returns (column, coefficient)
/// pairs; `len` of the slice is 2 or 3.
///
/// `divergence` applies the exact transpose of these rows, so any change
/// here keeps the discrete integration-by-parts identity exact.
#[inline]
fn gradient_stencil(n: usize, h: f64, j: usize, out: &mut [(usize, f64); 3]) -> usize {
    let inv2h = 1.0 / (2.0 * h);
    if j == 0 {
        *out = [(0, -3.0 * inv2h), (1, 4.0 * inv2h), (2, -inv2h)];
        3
    } else if j == n - 1 {
        *out = [(n - 1, 3.0 * inv2h), (n - 2, -4.0 * inv2h), (n - 3, inv2h)];
        3
    } else {
        out[0] = (j - 1, -inv2h);
        out[1] = (j + 1, inv2h);
        2
    }
}

/// Second-order gradient of a scalar field.
pub fn gradient(f: &ScalarField) -> VectorField {
    let grid = f.grid;
    let n = grid.nodes_per_axis();
    let h = grid.spacing();
    let mut out = VectorField::zeros(grid);
    let mut stencil = [(0usize, 0.0f64); 3];
    for axis in 0..grid.dim() {
        let stride = grid.stride(axis);
        let comp = &mut out.components[axis];
        for base in grid.line_bases(axis) {
            for j in 0..n {
                let len = gradient_stencil(n, h, j, &mut stencil);
                let mut acc = 0.0;
                for &(col, w) in stencil.iter().take(len) {
                    acc += w * f.values[base + col * stride];
                }
                comp[base + j * stride] = acc;
            }
        }
    }
    out
}

/// Negative adjoint of `gradient` under the trapezoidal inner product:
/// integrate(u * divergence(F)) == -integrate(gradient(u) . F) to machine
/// precision for all u and F. This is the compatible-pair divergence; it
/// composes with `gradient` to a wide (distance-2h) Laplacian, not the
/// compact stencil of `laplacian`.
pub fn divergence(f: &VectorField) -> ScalarField {
    let grid = f.grid;
    let n = grid.nodes_per_axis();
    let h = grid.spacing();
    let axis_w: Vec<f64> = (0..n).map(|i| grid.axis_weight(i)).collect();
    let mut out = ScalarField::zeros(grid);
    let mut stencil = [(0usize, 0.0f64); 3];
    let mut line_acc = vec![0.0f64; n];
    for axis in 0..grid.dim() {
        let stride = grid.stride(axis);
        let comp = &f.components[axis];
        for base in grid.line_bases(axis) {
            line_acc.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..n {
                let len = gradient_stencil(n, h, j, &mut stencil);
                let fj = comp[base + j * stride] * axis_w[j];
                for &(col, w) in stencil.iter().take(len) {
                    line_acc[col] += w * fj;
                }
            }
            for (k, acc) in line_acc.iter().enumerate() {
                out.values[base + k * stride] -= acc / axis_w[k];
            }
        }
    }
    out
}

/// Compact 2N+1 point Laplacian with mirror (homogeneous Neumann) closure:
/// the ghost value behind each wall equals the first interior value.
pub fn laplacian(f: &ScalarField) -> ScalarField {
    let grid = f.grid;
    let n = grid.nodes_per_axis();
    let h2 = grid.spacing() * grid.spacing();
    let mut out = ScalarField::zeros(grid);
    for axis in 0..grid.dim() {
        let stride = grid.stride(axis);
        for base in grid.line_bases(axis) {
            for j in 0..n {
                let fj = f.values[base + j * stride];
                let left = if j == 0 {
                    f.values[base + stride]
                } else {
                    f.values[base + (j - 1) * stride]
                };
                let right = if j == n - 1 {
                    f.values[base + (n - 2) * stride]
                } else {
                    f.values[base + (j + 1) * stride]
                };
                out.values[base + j * stride] += (left - 2.0 * fj + right) / h2;
            }
        }
    }
    out
}

/// Face-based Dirichlet form: sum over grid faces of
/// `area * h * (Da)_face * (Db)_face` with one-sided face differences.
/// Satisfies the discrete Green identity with [`laplacian`] exactly:
/// integrate_product(-laplacian(a), b) == face_dirichlet_form(a, b).
pub fn face_dirichlet_form(a: &ScalarField, b: &ScalarField) -> f64 {
    let grid = a.grid;
    assert_eq!(grid, b.grid, "fields live on different grids");
    let n = grid.nodes_per_axis();
    let h = grid.spacing();
    let mut total = 0.0;
    for d in 0..grid.dim() {
        let stride = grid.stride(d);
        for i in 0..grid.node_count() {
            let mi = grid.multi_index(i);
            if mi[d] + 1 >= n {
                continue;
            }
            let mut area = 1.0;
            for dd in 0..grid.dim() {
                if dd != d {
                    area *= grid.axis_weight(mi[dd]);
                }
            }
            let da = (a.values[i + stride] - a.values[i]) / h;
            let db = (b.values[i + stride] - b.values[i]) / h;
            total += area * h * da * db;
        }
    }
    total
}

/// Trapezoidal quadrature over the box.
pub fn integrate(f: &ScalarField) -> f64 {
    let grid = f.grid;
    (0..grid.node_count())
        .map(|i| grid.node_weight(i) * f.values[i])
        .sum()
}

/// Trapezoidal quadrature of a product of two fields.
pub fn integrate_product(f: &ScalarField, g: &ScalarField) -> f64 {
    let grid = f.grid;
    assert_eq!(grid, g.grid, "fields live on different grids");
    (0..grid.node_count())
        .map(|i| grid.node_weight(i) * f.values[i] * g.values[i])
        .sum()
}

/// Trapezoidal quadrature of the dot product of two vector fields.
pub fn integrate_dot(f: &VectorField, g: &VectorField) -> f64 {
    let grid = f.grid;
    assert_eq!(grid, g.grid, "fields live on different grids");
    let mut total = 0.0;
    for i in 0..grid.node_count() {
        let w = grid.node_weight(i);
        let mut dot = 0.0;
        for d in 0..grid.dim() {
            dot += f.components[d][i] * g.components[d][i];
        }
        total += w * dot;
    }
    total
}

/// L^p norm with trapezoidal weights; pass `f64::INFINITY` for the sup
/// norm. Requires p >= 1.
pub fn lp_norm(f: &ScalarField, p: f64) -> f64 {
    assert!(p >= 1.0, "lp_norm needs p >= 1, got {p}");
    if p.is_infinite() {
        return f.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    }
    let grid = f.grid;
    let sum: f64 = (0..grid.node_count())
        .map(|i| grid.node_weight(i) * f.values[i].abs().powf(p))
        .sum();
    sum.powf(1.0 / p)
}
