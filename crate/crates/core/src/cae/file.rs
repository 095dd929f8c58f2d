//! `SCBM` model container: architecture header followed by named tensors.
//!
//! ```text
//! "SCBM" u16 version
//! u16 in_channels, u32 in_len, u8 n_conv, n_conv x (u32 filters, u32 kernel),
//! u32 pool, f64 leaky_slope, u32 latent_dim, u8 n_aux, n_aux x u32 width
//! u64 seed
//! u32 n_tensors, then per tensor:
//!   u16 name_len, name, u8 dtype (0 f32, 1 f16, 2 i8), u8 ndim, ndim x u32,
//!   u8 has_quant [f32 scale, i32 zero_point], little-endian payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use half::f16;

use super::quant::{ActQuant, Int8Encoder, QuantLayer, QuantMode, QuantTensor, QuantizedParams};
use super::{ArchDescriptor, CaeError, CaeParams};

const MAGIC: &[u8; 4] = b"SCBM";
const VERSION: u16 = 1;
const MAX_ELEMENTS: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F16(Vec<f16>),
    I8(Vec<i8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F16(_) => 1,
            TensorData::I8(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F16(v) => v.len(),
            TensorData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
    /// `(scale, zero_point)` for quantized payloads.
    pub quant: Option<(f32, i32)>,
}

impl Tensor {
    pub fn f32(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Self {
        Self {
            name: name.into(),
            shape,
            data: TensorData::F32(values.iter().map(|&v| v as f32).collect()),
            quant: None,
        }
    }

    pub fn f16(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Self {
        Self {
            name: name.into(),
            shape,
            data: TensorData::F16(values.iter().map(|&v| f16::from_f64(v)).collect()),
            quant: None,
        }
    }

    pub fn i8(name: impl Into<String>, shape: Vec<usize>, values: Vec<i8>, scale: f32, zero_point: i32) -> Self {
        Self {
            name: name.into(),
            shape,
            data: TensorData::I8(values),
            quant: Some((scale, zero_point)),
        }
    }

    /// Values widened to f64; int8 payloads are dequantized.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F16(v) => v.iter().map(|x| x.to_f64()).collect(),
            TensorData::I8(v) => {
                let (s, z) = self.quant.unwrap_or((1.0, 0));
                v.iter().map(|&q| s as f64 * (q as i32 - z) as f64).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub arch: ArchDescriptor,
    pub seed: u64,
    pub tensors: Vec<Tensor>,
}

impl ModelFile {
    pub fn new(arch: ArchDescriptor, seed: u64) -> Self {
        Self { arch, seed, tensors: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, CaeError> {
        self.get(name).ok_or_else(|| CaeError::Format(format!("missing tensor {name}")))
    }

    /// Inserts or replaces by name, keeping first-insertion order.
    pub fn put(&mut self, t: Tensor) {
        match self.tensors.iter_mut().find(|x| x.name == t.name) {
            Some(slot) => *slot = t,
            None => self.tensors.push(t),
        }
    }

    pub fn remove_prefix(&mut self, prefix: &str) {
        self.tensors.retain(|t| !t.name.starts_with(prefix));
    }

    /// Stores the float parameters at f32 or f16 precision.
    pub fn put_params(&mut self, p: &CaeParams, half: bool) {
        for (slot, values) in p.slots().into_iter().zip(p.tensors()) {
            let t = if half {
                Tensor::f16(slot.name, slot.shape, values)
            } else {
                Tensor::f32(slot.name, slot.shape, values)
            };
            self.put(t);
        }
    }

    pub fn params(&self) -> Result<CaeParams, CaeError> {
        let mut p = CaeParams::init(&self.arch, self.seed)?;
        let slots = p.slots();
        for (slot, dst) in slots.iter().zip(p.tensors_mut()) {
            let t = self.require(&slot.name)?;
            if t.shape != slot.shape {
                return Err(CaeError::Format(format!("{} has shape {:?}, expected {:?}", slot.name, t.shape, slot.shape)));
            }
            *dst = t.to_f64();
        }
        p.validate()?;
        Ok(p)
    }

    /// True when the float tensors were stored at half precision.
    pub fn is_half(&self) -> bool {
        matches!(self.get("latent.weight").map(|t| &t.data), Some(TensorData::F16(_)))
    }

    pub fn put_quantized(&mut self, q: &QuantizedParams) {
        self.remove_prefix("q8.");
        let Some(net) = &q.int8 else { return };
        let layers = net.convs.iter().enumerate().map(|(i, l)| (format!("q8.enc.{i}"), l));
        for (name, l) in layers.chain(std::iter::once(("q8.latent".to_string(), &net.latent))) {
            let w = &l.weight;
            self.put(Tensor::i8(format!("{name}.weight"), w.shape.clone(), w.data.clone(), w.scale, w.zero_point));
            self.put(Tensor::f32(format!("{name}.bias"), vec![l.bias.len()], &l.bias));
            let a = &l.input;
            let mut t = Tensor::f32(format!("{name}.input"), vec![2], &[a.min as f64, a.max as f64]);
            t.quant = Some((a.scale, a.zero_point));
            self.put(t);
        }
    }

    /// Reduced-precision encoder, if the file carries one.
    pub fn quantized(&self) -> Result<Option<QuantizedParams>, CaeError> {
        if self.get("q8.latent.weight").is_some() {
            let layer = |name: &str| -> Result<QuantLayer, CaeError> {
                let w = self.require(&format!("{name}.weight"))?;
                let TensorData::I8(data) = &w.data else {
                    return Err(CaeError::Format(format!("{name}.weight is not int8")));
                };
                let (scale, zero_point) = w.quant.ok_or_else(|| CaeError::Format(format!("{name}.weight lacks scale")))?;
                let bias = self.require(&format!("{name}.bias"))?.to_f64();
                let input = self.require(&format!("{name}.input"))?;
                let range = input.to_f64();
                let (s, z) = input.quant.ok_or_else(|| CaeError::Format(format!("{name}.input lacks scale")))?;
                if range.len() != 2 || w.shape.first() != Some(&bias.len()) {
                    return Err(CaeError::Format(format!("{name} is malformed")));
                }
                Ok(QuantLayer {
                    weight: QuantTensor { shape: w.shape.clone(), data: data.clone(), scale, zero_point },
                    bias,
                    input: ActQuant { min: range[0] as f32, max: range[1] as f32, scale: s, zero_point: z },
                })
            };
            let convs = (0..self.arch.filters.len())
                .map(|i| layer(&format!("q8.enc.{i}")))
                .collect::<Result<Vec<_>, _>>()?;
            let latent = layer("q8.latent")?;
            return Ok(Some(QuantizedParams {
                mode: QuantMode::Int8,
                arch: self.arch.clone(),
                int8: Some(Int8Encoder { convs, latent }),
                fp16: None,
            }));
        }
        if self.is_half() {
            return Ok(Some(QuantizedParams {
                mode: QuantMode::Fp16,
                arch: self.arch.clone(),
                int8: None,
                fp16: Some(self.params()?),
            }));
        }
        Ok(None)
    }
}

fn fmt_err(m: impl Into<String>) -> CaeError {
    CaeError::Format(m.into())
}

fn u32_of(v: usize, what: &str) -> Result<u32, CaeError> {
    u32::try_from(v).map_err(|_| fmt_err(format!("{what} too large")))
}

pub fn write_model<W: Write>(mut w: W, m: &ModelFile) -> Result<(), CaeError> {
    let a = &m.arch;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let ch = u16::try_from(a.in_channels).map_err(|_| fmt_err("too many channels"))?;
    buf.extend_from_slice(&ch.to_le_bytes());
    buf.extend_from_slice(&u32_of(a.in_len, "in_len")?.to_le_bytes());
    if a.filters.len() != a.kernels.len() || a.filters.len() > 255 || a.aux_widths.len() > 255 {
        return Err(fmt_err("architecture lists inconsistent"));
    }
    buf.push(a.filters.len() as u8);
    for (&f, &k) in a.filters.iter().zip(&a.kernels) {
        buf.extend_from_slice(&u32_of(f, "filters")?.to_le_bytes());
        buf.extend_from_slice(&u32_of(k, "kernel")?.to_le_bytes());
    }
    buf.extend_from_slice(&u32_of(a.pool, "pool")?.to_le_bytes());
    buf.extend_from_slice(&a.leaky_slope.to_le_bytes());
    buf.extend_from_slice(&u32_of(a.latent_dim, "latent_dim")?.to_le_bytes());
    buf.push(a.aux_widths.len() as u8);
    for &wd in &a.aux_widths {
        buf.extend_from_slice(&u32_of(wd, "aux width")?.to_le_bytes());
    }
    buf.extend_from_slice(&m.seed.to_le_bytes());
    buf.extend_from_slice(&u32_of(m.tensors.len(), "tensor count")?.to_le_bytes());
    for t in &m.tensors {
        let name = t.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| fmt_err("tensor name too long"))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(t.data.tag());
        if t.shape.len() > 255 {
            return Err(fmt_err("too many dimensions"));
        }
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            buf.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(fmt_err(format!("{} payload does not match its shape", t.name)));
        }
        match t.quant {
            Some((s, z)) => {
                buf.push(1);
                buf.extend_from_slice(&s.to_le_bytes());
                buf.extend_from_slice(&z.to_le_bytes());
            }
            None => buf.push(0),
        }
        match &t.data {
            TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F16(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::I8(v) => buf.extend(v.iter().map(|&x| x as u8)),
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<R> {
    r: R,
}

impl<R: Read> Cursor<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N], CaeError> {
        let mut b = [0u8; N];
        self.r.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => fmt_err("truncated file"),
            _ => CaeError::Io(e),
        })?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8, CaeError> {
        Ok(self.bytes::<1>()?[0])
    }
    fn u16(&mut self) -> Result<u16, CaeError> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }
    fn u32(&mut self) -> Result<u32, CaeError> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn vec(&mut self, n: usize) -> Result<Vec<u8>, CaeError> {
        let mut v = vec![0u8; n];
        self.r.read_exact(&mut v).map_err(|_| fmt_err("truncated file"))?;
        Ok(v)
    }
}

pub fn read_model<R: Read>(r: R) -> Result<ModelFile, CaeError> {
    let mut c = Cursor { r };
    if &c.bytes::<4>()? != MAGIC {
        return Err(fmt_err("bad magic"));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let in_channels = c.u16()? as usize;
    let in_len = c.u32()? as usize;
    let n = c.u8()? as usize;
    let mut filters = Vec::with_capacity(n);
    let mut kernels = Vec::with_capacity(n);
    for _ in 0..n {
        filters.push(c.u32()? as usize);
        kernels.push(c.u32()? as usize);
    }
    let pool = c.u32()? as usize;
    let leaky_slope = f64::from_le_bytes(c.bytes()?);
    let latent_dim = c.u32()? as usize;
    let n_aux = c.u8()? as usize;
    let aux_widths = (0..n_aux).map(|_| c.u32().map(|v| v as usize)).collect::<Result<_, _>>()?;
    let arch = ArchDescriptor { in_channels, in_len, filters, kernels, pool, leaky_slope, latent_dim, aux_widths };
    arch.validate()?;
    let seed = u64::from_le_bytes(c.bytes()?);
    let count = c.u32()? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = String::from_utf8(c.vec(len)?).map_err(|_| fmt_err("tensor name is not UTF-8"))?;
        let tag = c.u8()?;
        let ndim = c.u8()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let elems = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&e| e <= MAX_ELEMENTS)
            .ok_or_else(|| fmt_err(format!("{name} is too large")))?;
        let quant = match c.u8()? {
            0 => None,
            1 => Some((f32::from_le_bytes(c.bytes()?), i32::from_le_bytes(c.bytes()?))),
            v => return Err(fmt_err(format!("bad quant flag {v}"))),
        };
        let data = match tag {
            0 => TensorData::F32(c.vec(4 * elems)?.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
            1 => TensorData::F16(c.vec(2 * elems)?.chunks_exact(2).map(|b| f16::from_le_bytes(b.try_into().unwrap())).collect()),
            2 => TensorData::I8(c.vec(elems)?.into_iter().map(|b| b as i8).collect()),
            v => return Err(fmt_err(format!("unknown dtype {v}"))),
        };
        tensors.push(Tensor { name, shape, data, quant });
    }
    let mut rest = [0u8; 1];
    if c.r.read(&mut rest)? != 0 {
        return Err(fmt_err("trailing bytes after last tensor"));
    }
    Ok(ModelFile { arch, seed, tensors })
}

pub fn save_model(path: &Path, m: &ModelFile) -> Result<(), CaeError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ModelFile, CaeError> {
    read_model(BufReader::new(File::open(path)?))
}
