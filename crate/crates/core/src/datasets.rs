//! Synthetic in-distribution and OOD generators plus CSV and IDX ingestion.
//! Every dataset produced here lies in `[-1, 1]^D`, the sampler's domain.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autograd::Tensor;
use crate::error::{Error, Result};

/// Half-width of the box the moons are mapped into. The ring of
/// `[-1, 1]^2` outside this box is free of in-distribution mass.
pub const MOONS_EXTENT: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    IdTrain,
    IdTest,
    Ood,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::IdTrain => "id-train",
            Split::IdTest => "id-test",
            Split::Ood => "ood",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: Split,
    inputs: Tensor,
    labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, split: Split, inputs: Tensor, labels: Option<Vec<usize>>) -> Result<Self> {
        let (n, _) = inputs.dims2()?;
        if inputs.shape().len() != 2 {
            return Err(Error::InvalidTensor("dataset inputs must be n x D".into()));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "dataset",
                    left: inputs.shape().to_vec(),
                    right: vec![l.len()],
                });
            }
        }
        if let Some(i) = inputs.data().iter().position(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Precondition(format!(
                "input value {} at flat index {i} outside [-1, 1]",
                inputs.data()[i]
            )));
        }
        Ok(Self {
            name: name.into(),
            split,
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    /// Gathers rows (and labels) into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Option<Vec<usize>>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        let x = Tensor::matrix(indices.len(), d, data).expect("rows of a valid dataset");
        let y = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        (x, y)
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }
}

/// Maps `[lo, hi]` per coordinate linearly onto `[-extent, extent]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMax {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub extent: f64,
}

impl MinMax {
    /// Fits bounds from the rows of `points` (`n x D`, row-major).
    pub fn fit(points: &[f64], dim: usize, extent: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("points to normalize"));
        }
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for row in points.chunks(dim) {
            for (j, &v) in row.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        Ok(Self { lo, hi, extent })
    }

    /// Applies the map and clamps into `[-1, 1]`.
    pub fn apply(&self, points: &mut [f64]) {
        let dim = self.lo.len();
        for row in points.chunks_mut(dim) {
            for (j, v) in row.iter_mut().enumerate() {
                let span = self.hi[j] - self.lo[j];
                let unit = if span > 0.0 { (*v - self.lo[j]) / span } else { 0.5 };
                *v = ((2.0 * unit - 1.0) * self.extent).clamp(-1.0, 1.0);
            }
        }
    }
}

/// Raw coordinates of the two interleaved half-circles before
/// normalization: upper arc `(cos t, sin t)`, lower arc
/// `(1 - cos t, 0.5 - sin t)`, `t` uniform on `[0, pi]`.
pub fn moons_raw<R: Rng + ?Sized>(n: usize, noise_std: f64, rng: &mut R) -> Result<(Vec<f64>, Vec<usize>)> {
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::Precondition(format!("moons need an even n >= 2, got {n}")));
    }
    let jitter = normal(noise_std)?;
    let mut points = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let t = rng.random_range(0.0..=std::f64::consts::PI);
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        points.push(x + jitter.sample(rng));
        points.push(y + jitter.sample(rng));
        labels.push(class);
    }
    Ok((points, labels))
}

/// Noise-free bounding box of the raw moons.
pub fn moons_bounds(extent: f64) -> MinMax {
    MinMax {
        lo: vec![-1.0, -0.5],
        hi: vec![2.0, 1.0],
        extent,
    }
}

/// Two-moons classification data in `[-MOONS_EXTENT, MOONS_EXTENT]^2`
/// (jittered points beyond the nominal box are clamped to `[-1, 1]`).
pub fn gen_moons<R: Rng + ?Sized>(n: usize, noise_std: f64, rng: &mut R) -> Result<Dataset> {
    gen_moons_with_extent(n, noise_std, MOONS_EXTENT, rng)
}

pub fn gen_moons_with_extent<R: Rng + ?Sized>(
    n: usize,
    noise_std: f64,
    extent: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if !(extent > 0.0 && extent <= 1.0) {
        return Err(Error::Precondition(format!("extent {extent} outside (0, 1]")));
    }
    let (mut points, labels) = moons_raw(n, noise_std, rng)?;
    moons_bounds(extent).apply(&mut points);
    Dataset::new("moons", Split::IdTrain, Tensor::matrix(n, 2, points)?, Some(labels))
}

/// Equal-count isotropic Gaussian clusters, one class per center, clipped
/// to `[-1, 1]`. Remainders go to the first clusters.
pub fn gen_gaussian_mixture<R: Rng + ?Sized>(
    n: usize,
    centers: &[Vec<f64>],
    std: f64,
    rng: &mut R,
) -> Result<Dataset> {
    if centers.len() < 2 {
        return Err(Error::Precondition("a mixture needs at least two centers".into()));
    }
    let dim = centers[0].len();
    for c in centers {
        if c.len() != dim || dim == 0 {
            return Err(Error::Precondition("centers must share a nonzero dimension".into()));
        }
        if c.iter().any(|v| !(-1.0 < *v && *v < 1.0)) {
            return Err(Error::Precondition(format!("center {c:?} outside (-1, 1)^D")));
        }
    }
    let noise = normal(std)?;
    let k = centers.len();
    let mut points = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (class, c) in centers.iter().enumerate() {
        let count = n / k + usize::from(class < n % k);
        for _ in 0..count {
            points.extend(c.iter().map(|&m| (m + noise.sample(rng)).clamp(-1.0, 1.0)));
            labels.push(class);
        }
    }
    Dataset::new("gaussian-mixture", Split::IdTrain, Tensor::matrix(n, dim, points)?, Some(labels))
}

/// Unlabeled annulus around the origin with radii uniform in
/// `[radius - width/2, radius + width/2]`, clipped to `[-1, 1]^2`.
pub fn gen_ood_ring<R: Rng + ?Sized>(n: usize, radius: f64, width: f64, rng: &mut R) -> Result<Dataset> {
    if !(radius > 0.0 && radius <= 1.0) {
        return Err(Error::Precondition(format!("ring radius {radius} outside (0, 1]")));
    }
    if !(width >= 0.0) {
        return Err(Error::Precondition(format!("negative ring width {width}")));
    }
    let mut points = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let r = radius + width * (rng.random::<f64>() - 0.5);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        points.push((r * a.cos()).clamp(-1.0, 1.0));
        points.push((r * a.sin()).clamp(-1.0, 1.0));
    }
    Dataset::new("ring", Split::Ood, Tensor::matrix(n, 2, points)?, None)
}

/// Unlabeled points uniform on `[-1, 1]^dim`.
pub fn gen_uniform<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Result<Dataset> {
    let points = (0..n * dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
    Dataset::new("uniform", Split::Ood, Tensor::matrix(n, dim, points)?, None)
}

/// `N(0, 1)` draws clipped to `[-1, 1]`.
pub fn gaussian_noise<R: Rng + ?Sized>(n: usize, dim: usize, rng: &mut R) -> Result<Tensor> {
    let data = (0..n * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z.clamp(-1.0, 1.0)
        })
        .collect();
    Tensor::matrix(n, dim, data)
}

fn normal(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::Precondition(format!("bad noise std {std}: {e}")))
}

/// Writes `x0..x{D-1}[,label]` with shortest round-trip float formatting.
pub fn write_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..ds.dim()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    if ds.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for i in 0..ds.len() {
        let cells: Vec<String> = ds.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        if let Some(l) = &ds.labels {
            out.push_str(&format!(",{}", l[i]));
        }
        out.push('\n');
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Reads a CSV whose header is `x0..x{D-1}` optionally followed by `label`.
/// Values must already lie in `[-1, 1]`.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let parse_err = |location: String, message: String| Error::Parse {
        path: path.to_path_buf(),
        location,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err("open".into(), e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| parse_err("line 1".into(), e.to_string()))?
        .clone();
    let has_label = header.iter().next_back() == Some("label");
    let dim = header.len() - usize::from(has_label);
    for (j, name) in header.iter().take(dim).enumerate() {
        if name != format!("x{j}") {
            return Err(parse_err(
                "line 1".into(),
                format!("column {j} is `{name}`, expected `x{j}`"),
            ));
        }
    }
    if dim == 0 {
        return Err(parse_err("line 1".into(), "no feature columns".into()));
    }

    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| parse_err(format!("line {line}"), e.to_string()))?;
        if record.len() != header.len() {
            return Err(parse_err(
                format!("line {line}"),
                format!("{} cells, expected {}", record.len(), header.len()),
            ));
        }
        for (j, cell) in record.iter().take(dim).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(format!("line {line}, column {j}"), format!("`{cell}` is not a number")))?;
            if !(-1.0..=1.0).contains(&v) {
                return Err(parse_err(
                    format!("line {line}, column {j}"),
                    format!("{v} outside [-1, 1]"),
                ));
            }
            points.push(v);
        }
        if has_label {
            let cell = &record[dim];
            let y: usize = cell
                .parse()
                .map_err(|_| parse_err(format!("line {line}, column {dim}"), format!("`{cell}` is not a class id")))?;
            labels.push(y);
        }
    }
    let n = points.len() / dim;
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(
        name,
        Split::IdTrain,
        Tensor::matrix(n, dim, points)?,
        has_label.then_some(labels),
    )
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Maps a pixel byte linearly from `[0, 255]` onto `[-1, 1]`.
pub fn pixel_to_unit(b: u8) -> f64 {
    f64::from(b) * 2.0 / 255.0 - 1.0
}

struct IdxReader<'a> {
    path: &'a Path,
    bytes: Vec<u8>,
    pos: usize,
}

impl<'a> IdxReader<'a> {
    fn open(path: &'a Path) -> Result<Self> {
        Ok(Self {
            path,
            bytes: fs::read(path)?,
            pos: 0,
        })
    }

    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            location: format!("byte offset {}", self.pos),
            message,
        }
    }

    fn u32_be(&mut self) -> Result<u32> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or_else(|| self.err("truncated header".into()))?;
        let v = u32::from_be_bytes(chunk.try_into().expect("4 bytes"));
        self.pos += 4;
        Ok(v)
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32_be()?;
        if found != expected {
            self.pos -= 4;
            return Err(self.err(format!("magic {found:#010x}, expected {expected:#010x}")));
        }
        Ok(())
    }

    fn payload(&mut self, len: usize) -> Result<&[u8]> {
        let available = self.bytes.len() - self.pos;
        if available != len {
            return Err(self.err(format!(
                "payload length mismatch: expected {len} bytes, found {available}"
            )));
        }
        Ok(&self.bytes[self.pos..])
    }
}

/// Reads an IDX image file (`0x00000803`) and optional IDX label file
/// (`0x00000801`), flattening each image to one row.
pub fn load_idx(images_path: &Path, labels_path: Option<&Path>) -> Result<Dataset> {
    let mut img = IdxReader::open(images_path)?;
    img.magic(IDX_IMAGES_MAGIC)?;
    let count = img.u32_be()? as usize;
    let rows = img.u32_be()? as usize;
    let cols = img.u32_be()? as usize;
    let dim = rows * cols;
    let pixels: Vec<f64> = img.payload(count * dim)?.iter().map(|&b| pixel_to_unit(b)).collect();

    let labels = match labels_path {
        Some(p) => {
            let mut lab = IdxReader::open(p)?;
            lab.magic(IDX_LABELS_MAGIC)?;
            let n = lab.u32_be()? as usize;
            if n != count {
                return Err(lab.err(format!("{n} labels for {count} images")));
            }
            Some(lab.payload(n)?.iter().map(|&b| usize::from(b)).collect())
        }
        None => None,
    };
    let name = images_path
        .file_stem()
        .map_or_else(|| "idx".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, Split::IdTrain, Tensor::matrix(count, dim, pixels)?, labels)
}
