use std::fs;
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng as _;

use super::{Matrix, Scalar};
use crate::error::{Error, Result};
use crate::seed::{self, stream};

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    /// `[d_in x d_out]`
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

/// Parameters of an L-layer model; `dims()` is `[d_0, d_1, .., d_L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        ModelParams {
            layers: dims
                .windows(2)
                .map(|w| Layer {
                    weight: Matrix::zeros(w[0], w[1]),
                    bias: vec![T::zero(); w[1]],
                })
                .collect(),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(dims: &[usize], seed: u64) -> Self {
        let mut p = Self::zeros(dims);
        for (l, layer) in p.layers.iter_mut().enumerate() {
            let (fan_in, fan_out) = (layer.weight.rows(), layer.weight.cols());
            let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            let mut rng = seed::rng(seed, &[stream::INIT, l as u64]);
            for w in layer.weight.as_mut_slice() {
                *w = T::from_f64(rng.gen_range(-limit..=limit));
            }
        }
        p
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layers.iter().map(|l| l.weight.rows()).collect();
        dims.extend(self.layers.last().map(|l| l.weight.cols()));
        dims
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(<[T]>::len).sum()
    }

    /// Tensors in serialization order: W1, b1, .., WL, bL.
    pub fn tensors(&self) -> impl Iterator<Item = &[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }

    pub fn same_shape<U>(&self, other: &ModelParams<U>) -> bool
    where
        U: Scalar,
    {
        self.dims() == other.dims()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.iter().map(|b| U::from_f64(b.as_f64())).collect(),
                })
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Compact binary form used on the wire: u16 L, (L+1) x u32 dims, then
    /// f32 tensors in layer order, little-endian.
    pub fn encode(&self, out: &mut Vec<u8>) {
        let dims = self.dims();
        out.write_u16::<LittleEndian>(self.num_layers() as u16)
            .unwrap();
        for d in dims {
            out.write_u32::<LittleEndian>(d as u32).unwrap();
        }
        for t in self.tensors() {
            for v in t {
                out.write_f32::<LittleEndian>(v.as_f32()).unwrap();
            }
        }
    }

    pub fn decode(buf: &mut &[u8]) -> Result<Self> {
        let truncated = |_| Error::format("truncated parameter blob");
        let layers = buf.read_u16::<LittleEndian>().map_err(truncated)? as usize;
        if layers == 0 {
            return Err(Error::format("parameter blob with zero layers"));
        }
        let dims = (0..=layers)
            .map(|_| buf.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(truncated)?;
        let total: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if buf.len() < total * 4 {
            return Err(Error::format("truncated parameter blob"));
        }
        let mut p = Self::zeros(&dims);
        for t in p.tensors_mut() {
            for v in t {
                *v = T::from_f32(buf.read_f32::<LittleEndian>().map_err(truncated)?);
            }
        }
        Ok(p)
    }
}

/// Writes `model.meta` (`layers=L`, `dims=d0,..,dL`) and `model.bin`
/// (concatenated little-endian f32 tensors W1,b1,..,WL,bL) into `dir`.
pub fn save_model(params: &ModelParams<f32>, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let dims: Vec<String> = params.dims().iter().map(usize::to_string).collect();
    fs::write(
        dir.join("model.meta"),
        format!("layers={}\ndims={}\n", params.num_layers(), dims.join(",")),
    )?;
    let bytes: Vec<u8> = params
        .tensors()
        .flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes()))
        .collect();
    Ok(fs::write(dir.join("model.bin"), bytes)?)
}

pub fn load_model(dir: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let dir = dir.as_ref();
    let meta = fs::read_to_string(dir.join("model.meta"))?;
    let mut layers = None;
    let mut dims = None;
    for line in meta.lines() {
        match line.split_once('=') {
            Some(("layers", v)) => layers = v.trim().parse::<usize>().ok(),
            Some(("dims", v)) => {
                dims = v
                    .split(',')
                    .map(|d| d.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .ok()
            }
            _ => {}
        }
    }
    let dims = dims.ok_or_else(|| Error::format("model.meta lacks dims"))?;
    if layers != Some(dims.len().saturating_sub(1)) || dims.len() < 2 {
        return Err(Error::format("model.meta layers/dims disagree"));
    }
    let bytes = fs::read(dir.join("model.bin"))?;
    let mut p = ModelParams::<f32>::zeros(&dims);
    if bytes.len() != p.num_params() * 4 {
        return Err(Error::format("model.bin size does not match dims"));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    for t in p.tensors_mut() {
        for v in t {
            *v = values.next().unwrap();
        }
    }
    Ok(p)
}
