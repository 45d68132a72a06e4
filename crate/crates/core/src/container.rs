//! Binary containers for diffusion models, networks and trained VDAE models.
//!
//! Every container starts with an 8-byte magic string and a format version
//! byte. Integers are little-endian `u64`, reals little-endian `f64`. A
//! string is its byte length followed by UTF-8 bytes; a block is its length
//! followed by that many reals; a matrix is `rows`, `cols` and a row-major
//! block.
//!
//! Diffusion model: name, content hash of the source cloud, bandwidth, `n`,
//! `D`, eigenvalues, the `n × D` eigenfunction matrix, degrees and `π`.
//!
//! Network: layer count, the width list, then each layer as `inputs`,
//! `outputs`, its row-major weight block and its bias block.
//!
//! VDAE model: the diffusion and network containers nested as length-prefixed
//! byte strings, the training cloud, the input normalization, the latent
//! scale, and the training configuration and history as JSON strings. Local
//! targets are recomputed on load.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::data::PointCloud;
use crate::error::{Error, Result};
use crate::neural::{CovarianceHead, Dense, Mlp};
use crate::spectral::DiffusionModel;
use crate::vdae::{InputNorm, TrainConfig, TrainHistory, VdaeModel};

pub const FORMAT_VERSION: u8 = 1;
pub const DIFFUSION_MAGIC: &[u8; 8] = b"VDAEDIFF";
pub const NETWORK_MAGIC: &[u8; 8] = b"VDAENET\0";
pub const MODEL_MAGIC: &[u8; 8] = b"VDAEMODL";

// Upper bound on any single length field, to fail fast on corrupt headers.
const MAX_LEN: u64 = 1 << 34;

struct Writer(Vec<u8>);

impl Writer {
    fn header(magic: &[u8; 8]) -> Self {
        let mut w = Writer(magic.to_vec());
        w.0.push(FORMAT_VERSION);
        w
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }

    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    fn block(&mut self, values: &[f64]) {
        self.u64(values.len() as u64);
        values.iter().for_each(|v| self.f64(*v));
    }

    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                self.f64(m[(i, j)]);
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: &[u8; 8], what: &str) -> Result<Self> {
        if buf.len() < 9 || &buf[..8] != magic {
            return Err(Error::Format(format!("not a {what} container")));
        }
        if buf[8] != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "{what} container has format version {}, expected {FORMAT_VERSION}",
                buf[8]
            )));
        }
        Ok(Self { buf, pos: 9 })
    }

    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("container is truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > MAX_LEN {
            return Err(Error::Format(format!("implausible length {v}")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let len = self.len()?;
        self.take(len)
    }

    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }

    fn block(&mut self) -> Result<Vec<f64>> {
        let len = self.len()?;
        (0..len).map(|_| self.f64()).collect()
    }

    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let (rows, cols) = (self.len()?, self.len()?);
        let values = self.block_of(rows.checked_mul(cols).ok_or_else(|| Error::Format("matrix too large".into()))?)?;
        Ok(DMatrix::from_row_slice(rows, cols, &values))
    }

    fn block_of(&mut self, len: usize) -> Result<Vec<f64>> {
        (0..len).map(|_| self.f64()).collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn expect_len(actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(Error::Format(format!("expected {expected} values, found {actual}")));
    }
    Ok(())
}

pub fn diffusion_to_bytes(model: &DiffusionModel) -> Vec<u8> {
    let mut w = Writer::header(DIFFUSION_MAGIC);
    w.str(model.source_name());
    w.str(model.source_hash());
    w.f64(model.bandwidth());
    w.u64(model.len() as u64);
    w.u64(model.dim() as u64);
    w.block(model.eigenvalues());
    w.matrix(model.eigenfunctions());
    w.block(model.degrees());
    w.block(model.stationary());
    w.0
}

pub fn diffusion_from_bytes(buf: &[u8]) -> Result<DiffusionModel> {
    let mut r = Reader::open(buf, DIFFUSION_MAGIC, "diffusion model")?;
    let name = r.str()?;
    let hash = r.str()?;
    let bandwidth = r.f64()?;
    let (n, dim) = (r.len()?, r.len()?);
    let eigenvalues = r.block()?;
    expect_len(eigenvalues.len(), dim)?;
    let eigenfunctions = r.matrix()?;
    expect_len(eigenfunctions.nrows(), n)?;
    expect_len(eigenfunctions.ncols(), dim)?;
    let degrees = r.block()?;
    expect_len(degrees.len(), n)?;
    let pi = r.block()?;
    expect_len(pi.len(), n)?;
    r.finish()?;
    let model = DiffusionModel::from_parts(bandwidth, eigenvalues, eigenfunctions, degrees, name, hash)?;
    if model.stationary().iter().zip(&pi).any(|(a, b)| (a - b).abs() > 1e-12) {
        return Err(Error::Format("stationary distribution disagrees with the degrees".into()));
    }
    Ok(model)
}

pub fn network_to_bytes(net: &Mlp) -> Vec<u8> {
    let mut w = Writer::header(NETWORK_MAGIC);
    let widths = net.widths();
    w.u64(net.layers().len() as u64);
    widths.iter().for_each(|&v| w.u64(v as u64));
    for layer in net.layers() {
        w.u64(layer.inputs() as u64);
        w.u64(layer.outputs() as u64);
        w.block(layer.weights());
        w.block(layer.bias());
    }
    w.0
}

pub fn network_from_bytes(buf: &[u8]) -> Result<Mlp> {
    let mut r = Reader::open(buf, NETWORK_MAGIC, "network")?;
    let count = r.len()?;
    let widths: Vec<usize> = (0..=count).map(|_| r.len()).collect::<Result<_>>()?;
    let mut layers = Vec::with_capacity(count);
    for l in 0..count {
        let (inputs, outputs) = (r.len()?, r.len()?);
        if inputs != widths[l] || outputs != widths[l + 1] {
            return Err(Error::Format(format!("layer {l} disagrees with the width list")));
        }
        let weights = r.block()?;
        let bias = r.block()?;
        layers.push(Dense::new(inputs, outputs, weights, bias).map_err(|e| Error::Format(e.to_string()))?);
    }
    r.finish()?;
    Mlp::from_layers(layers)
}

fn cloud_to(w: &mut Writer, cloud: &PointCloud) {
    w.str(cloud.name());
    w.u64(cloud.dim() as u64);
    w.block(cloud.as_slice());
    match cloud.labels() {
        Some(labels) => {
            w.u64(1);
            w.u64(labels.len() as u64);
            labels.iter().for_each(|&l| w.u64(l as u64));
        }
        None => w.u64(0),
    }
}

fn cloud_from(r: &mut Reader) -> Result<PointCloud> {
    let name = r.str()?;
    let dim = r.len()?;
    let points = r.block()?;
    let cloud = PointCloud::new(name, dim, points)?;
    match r.u64()? {
        0 => Ok(cloud),
        1 => {
            let len = r.len()?;
            let labels = (0..len).map(|_| r.u64().map(|v| v as i64)).collect::<Result<_>>()?;
            cloud.with_labels(labels)
        }
        flag => Err(Error::Format(format!("unknown label flag {flag}"))),
    }
}

pub fn model_to_bytes(model: &VdaeModel) -> Vec<u8> {
    let mut w = Writer::header(MODEL_MAGIC);
    w.bytes(&diffusion_to_bytes(model.diffusion()));
    cloud_to(&mut w, model.training());
    w.bytes(&network_to_bytes(model.encoder()));
    w.u64(model.covnet().dim() as u64);
    w.bytes(&network_to_bytes(model.covnet().net()));
    w.bytes(&network_to_bytes(model.decoder()));
    w.block(&model.input_norm().mean);
    w.f64(model.input_norm().scale);
    w.f64(model.latent_scale());
    w.str(&serde_json::to_string(model.config()).expect("config serializes"));
    w.str(&serde_json::to_string(model.history()).expect("history serializes"));
    w.0
}

pub fn model_from_bytes(buf: &[u8]) -> Result<VdaeModel> {
    let mut r = Reader::open(buf, MODEL_MAGIC, "VDAE model")?;
    let diffusion = diffusion_from_bytes(r.bytes()?)?;
    let training = cloud_from(&mut r)?;
    let encoder = network_from_bytes(r.bytes()?)?;
    let dim = r.len()?;
    let covnet = CovarianceHead::from_net(network_from_bytes(r.bytes()?)?, dim)?;
    let decoder = network_from_bytes(r.bytes()?)?;
    let mean = r.block()?;
    let scale = r.f64()?;
    let latent_scale = r.f64()?;
    let config: TrainConfig =
        serde_json::from_str(&r.str()?).map_err(|e| Error::Format(format!("training configuration: {e}")))?;
    let history: TrainHistory =
        serde_json::from_str(&r.str()?).map_err(|e| Error::Format(format!("training history: {e}")))?;
    r.finish()?;
    VdaeModel::from_parts(
        diffusion,
        training,
        encoder,
        covnet,
        decoder,
        InputNorm { mean, scale },
        latent_scale,
        config,
        history,
    )
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn save_diffusion(model: &DiffusionModel, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &diffusion_to_bytes(model))
}

pub fn load_diffusion(path: impl AsRef<Path>) -> Result<DiffusionModel> {
    diffusion_from_bytes(&read_file(path.as_ref())?)
}

pub fn save_network(net: &Mlp, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &network_to_bytes(net))
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Mlp> {
    network_from_bytes(&read_file(path.as_ref())?)
}

pub fn save_model(model: &VdaeModel, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &model_to_bytes(model))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<VdaeModel> {
    model_from_bytes(&read_file(path.as_ref())?)
}
