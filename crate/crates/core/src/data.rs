//! Point clouds: synthetic manifold generators and the CSV format.
//!
//! CSV layout: an optional single header line, then one row per point with
//! `m` comma-separated reals. When the header's last field is `label` the
//! last column is read as an integer tag instead of a coordinate. Values are
//! written with 17 significant digits so a save/load round trip is exact.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<f64>,
    dim: usize,
    labels: Option<Vec<i64>>,
    name: String,
}

impl PointCloud {
    /// Builds a cloud from row-major coordinates.
    pub fn new(name: impl Into<String>, dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("point dimension must be at least 1"));
        }
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if !points.len().is_multiple_of(dim) {
            return Err(Error::Shape {
                expected: dim * (points.len() / dim + 1),
                actual: points.len(),
            });
        }
        if let Some(pos) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::DegenerateData(format!(
                "non-finite coordinate in point {}",
                pos / dim
            )));
        }
        Ok(Self {
            points,
            dim,
            labels: None,
            name: name.into(),
        })
    }

    pub fn from_rows(name: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut points = Vec::with_capacity(rows.len() * dim);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != dim {
                return Err(Error::Parse {
                    row: i + 1,
                    message: format!("expected {dim} columns, found {}", row.len()),
                });
            }
            points.extend_from_slice(row);
        }
        Self::new(name, dim, points)
    }

    pub fn with_labels(mut self, labels: Vec<i64>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::Shape {
                expected: self.len(),
                actual: labels.len(),
            });
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.points
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.points
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut points = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            points.extend_from_slice(self.point(i));
        }
        let mut out = Self::new(self.name.clone(), self.dim, points)?;
        if let Some(labels) = &self.labels {
            out.labels = Some(indices.iter().map(|&i| labels[i]).collect());
        }
        Ok(out)
    }

    /// Per-coordinate mean.
    pub fn mean(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for row in self.rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let n = self.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }

    /// SHA-256 over the dimensions, the little-endian coordinates and the labels.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update((self.dim as u64).to_le_bytes());
        for v in &self.points {
            hasher.update(v.to_le_bytes());
        }
        if let Some(labels) = &self.labels {
            for l in labels {
                hasher.update(l.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

fn check_count(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("n must be at least 1"));
    }
    Ok(())
}

fn check_noise(noise_std: f64) -> Result<()> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::invalid(format!("noise_std must be >= 0, got {noise_std}")));
    }
    Ok(())
}

fn add_noise(points: &mut [f64], noise_std: f64, rng: &mut rng::Rng) {
    if noise_std > 0.0 {
        for v in points {
            *v += noise_std * rng::normal(rng);
        }
    }
}

/// `n` points at angles `2πi/n` on a circle of `radius` in the `xy` plane of
/// ℝ³, with isotropic Gaussian noise.
pub fn gen_circle(n: usize, radius: f64, noise_std: f64, seed: u64) -> Result<PointCloud> {
    check_count(n)?;
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("radius must be > 0, got {radius}")));
    }
    check_noise(noise_std)?;
    let mut points = Vec::with_capacity(3 * n);
    for i in 0..n {
        let theta = 2.0 * PI * i as f64 / n as f64;
        points.extend_from_slice(&[radius * theta.cos(), radius * theta.sin(), 0.0]);
    }
    add_noise(&mut points, noise_std, &mut rng::seeded(seed));
    PointCloud::new("circle", 3, points)
}

/// Area-uniform samples on the torus with major radius `major` and tube
/// radius `minor`. The tube angle is drawn by rejection against the area
/// element `major + minor·cos v`.
pub fn gen_torus(n: usize, major: f64, minor: f64, seed: u64) -> Result<PointCloud> {
    check_count(n)?;
    if !(minor > 0.0 && major > minor) {
        return Err(Error::invalid(format!(
            "torus needs R > r > 0, got R = {major}, r = {minor}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut points = Vec::with_capacity(3 * n);
    while points.len() < 3 * n {
        let u = 2.0 * PI * rng::uniform(&mut rng);
        let v = 2.0 * PI * rng::uniform(&mut rng);
        let accept = rng::uniform(&mut rng);
        if accept * (major + minor) > major + minor * v.cos() {
            continue;
        }
        let ring = major + minor * v.cos();
        points.extend_from_slice(&[ring * u.cos(), ring * u.sin(), minor * v.sin()]);
    }
    PointCloud::new("torus", 3, points)
}

/// Isotropic Gaussian modes on a `modes_per_side × modes_per_side` grid with
/// centers at `spacing · (i, j)`. Points are split evenly across modes (the
/// remainder goes to the lowest mode indices) and labelled with the mode index
/// `i · modes_per_side + j`.
pub fn gen_gaussian_grid(
    n: usize,
    modes_per_side: usize,
    spacing: f64,
    mode_std: f64,
    seed: u64,
) -> Result<PointCloud> {
    check_count(n)?;
    if modes_per_side == 0 {
        return Err(Error::invalid("modes_per_side must be at least 1"));
    }
    if !(mode_std >= 0.0) || !(spacing > 5.0 * mode_std) {
        return Err(Error::invalid(format!(
            "modes need spacing > 5·mode_std, got spacing = {spacing}, mode_std = {mode_std}"
        )));
    }
    let modes = modes_per_side * modes_per_side;
    let mut rng = rng::seeded(seed);
    let mut points = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for mode in 0..modes {
        let count = n / modes + usize::from(mode < n % modes);
        let [cx, cy] = grid_center(mode, modes_per_side, spacing);
        for _ in 0..count {
            points.push(cx + mode_std * rng::normal(&mut rng));
            points.push(cy + mode_std * rng::normal(&mut rng));
            labels.push(mode as i64);
        }
    }
    PointCloud::new("gaussian_grid", 2, points)?.with_labels(labels)
}

pub fn grid_center(mode: usize, modes_per_side: usize, spacing: f64) -> [f64; 2] {
    [
        spacing * (mode / modes_per_side) as f64,
        spacing * (mode % modes_per_side) as f64,
    ]
}

/// Uniform samples on the 2-sphere of `radius` via normalized Gaussians.
pub fn gen_sphere(n: usize, radius: f64, seed: u64) -> Result<PointCloud> {
    check_count(n)?;
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("radius must be > 0, got {radius}")));
    }
    let mut rng = rng::seeded(seed);
    let mut points = Vec::with_capacity(3 * n);
    while points.len() < 3 * n {
        let g = [rng::normal(&mut rng), rng::normal(&mut rng), rng::normal(&mut rng)];
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        if norm < 1e-12 {
            continue;
        }
        points.extend(g.iter().map(|v| radius * v / norm));
    }
    PointCloud::new("sphere", 3, points)
}

/// Height of the closed loop traced by [`loop3d_point`].
pub const LOOP_HEIGHT: f64 = 0.5;

/// A saddle-shaped closed curve: `(cos t, sin t, h·sin 2t)`.
pub fn loop3d_point(t: f64) -> [f64; 3] {
    [t.cos(), t.sin(), LOOP_HEIGHT * (2.0 * t).sin()]
}

/// `n` evenly spaced parameter values on [`loop3d_point`], plus isotropic noise.
pub fn gen_loop3d(n: usize, noise_std: f64, seed: u64) -> Result<PointCloud> {
    check_count(n)?;
    check_noise(noise_std)?;
    let mut points = Vec::with_capacity(3 * n);
    for i in 0..n {
        points.extend_from_slice(&loop3d_point(2.0 * PI * i as f64 / n as f64));
    }
    add_noise(&mut points, noise_std, &mut rng::seeded(seed));
    PointCloud::new("loop3d", 3, points)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(&text, name)
}

pub fn parse_csv(text: &str, name: impl Into<String>) -> Result<PointCloud> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut records = reader.records().enumerate().peekable();
    let mut labelled = false;
    let mut width = None;
    if let Some((_, Ok(first))) = records.peek() {
        let is_header = first.iter().any(|f| f.parse::<f64>().is_err());
        if is_header {
            labelled = first.iter().next_back() == Some("label");
            width = Some(first.len());
            records.next();
        }
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in records {
        let row = idx + 1;
        let record = record.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(Error::Parse {
                row,
                message: format!("expected {expected} fields, found {}", record.len()),
            });
        }
        let coords = if labelled { expected - 1 } else { expected };
        for field in record.iter().take(coords) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    message: format!("non-finite value: {field:?}"),
                });
            }
            points.push(v);
        }
        if labelled {
            let field = record.get(expected - 1).unwrap_or_default();
            labels.push(field.parse::<i64>().map_err(|_| Error::Parse {
                row,
                message: format!("label is not an integer: {field:?}"),
            })?);
        }
    }

    let dim = width.map_or(0, |w| if labelled { w - 1 } else { w });
    if points.is_empty() || dim == 0 {
        return Err(Error::Parse {
            row: 1,
            message: "no data rows".into(),
        });
    }
    let cloud = PointCloud::new(name, dim, points)?;
    if labelled {
        cloud.with_labels(labels)
    } else {
        Ok(cloud)
    }
}

pub fn save_csv(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_csv(cloud, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv(cloud: &PointCloud, out: &mut impl Write) -> std::io::Result<()> {
    let mut header: Vec<String> = (0..cloud.dim()).map(|j| format!("x{j}")).collect();
    if cloud.labels().is_some() {
        header.push("label".into());
    }
    writeln!(out, "{}", header.join(","))?;
    for (i, row) in cloud.rows().enumerate() {
        let mut line = row
            .iter()
            .map(|v| format!("{v:.16e}"))
            .collect::<Vec<_>>()
            .join(",");
        if let Some(labels) = cloud.labels() {
            line.push(',');
            line.push_str(&labels[i].to_string());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
