//! `MILM` model files.
//!
//! Layout (little-endian): magic `MILM`, u32 version = 1, u32 layer count = 3;
//! for each layer u32 out, u32 in, `out*in` f32 weights row-major, `out` f32
//! biases. Then a u8 flag: 1 when Adagrad accumulators follow in the same
//! per-layer weights-then-biases order (without the dims), 0 otherwise. A
//! file that ends right after the last layer is read as having no
//! accumulators.

use std::path::Path;

use super::{Dense, LayerStack, ScorerParams, NUM_LAYERS};
use crate::binio::{read_file, u32_len, write_file, ByteReader, ByteWriter};
use crate::scalar::Scalar;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MILM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile<T> {
    pub params: ScorerParams<T>,
    pub accumulators: Option<LayerStack<T>>,
}

impl<T: Scalar> ModelFile<T> {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let stack = &self.params.stack;
        if let Some(acc) = &self.accumulators {
            stack.check_same_shape(acc, "accumulators")?;
        }
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u32(NUM_LAYERS as u32);
        for layer in stack.layers() {
            w.u32(u32_len(layer.out_dim(), "layer out dim")?);
            w.u32(u32_len(layer.in_dim(), "layer in dim")?);
            w.f32s(layer.weights.iter().map(|v| v.to_f32_lossy()));
            w.f32s(layer.biases.iter().map(|v| v.to_f32_lossy()));
        }
        match &self.accumulators {
            None => w.u8(0),
            Some(acc) => {
                w.u8(1);
                for layer in acc.layers() {
                    w.f32s(layer.weights.iter().map(|v| v.to_f32_lossy()));
                    w.f32s(layer.biases.iter().map(|v| v.to_f32_lossy()));
                }
            }
        }
        Ok(w.buf)
    }

    /// `origin` names the source in error messages.
    pub fn decode(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes, origin);
        r.magic(MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(at, format!("unsupported version {version}")));
        }
        let at = r.offset();
        let n_layers = r.u32("layer count")?;
        if n_layers as usize != NUM_LAYERS {
            return Err(r.error(at, format!("expected {NUM_LAYERS} layers, found {n_layers}")));
        }
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        for k in 0..NUM_LAYERS {
            let at = r.offset();
            let out_dim = r.u32("layer out dim")? as usize;
            let in_dim = r.u32("layer in dim")? as usize;
            if out_dim == 0 || in_dim == 0 {
                return Err(r.error(at, format!("layer {} has a zero dimension", k + 1)));
            }
            let weights = r.f32s(out_dim * in_dim, "weights")?;
            let biases = r.f32s(out_dim, "biases")?;
            layers.push(Dense::from_parts(
                out_dim,
                in_dim,
                weights.into_iter().map(T::from_f32_exact).collect(),
                biases.into_iter().map(T::from_f32_exact).collect(),
            )?);
        }
        let layers: [Dense<T>; NUM_LAYERS] = layers.try_into().map_err(|_| Error::invalid("model", "layer count"))?;
        let stack = LayerStack::from_layers(layers).map_err(|e| r.error(12, e.to_string()))?;

        let accumulators = if r.at_end() {
            None
        } else {
            let at = r.offset();
            match r.u8("accumulator flag")? {
                0 => None,
                1 => {
                    let mut acc = stack.zeros_like();
                    for layer in acc.layers_mut() {
                        let wn = layer.weights.len();
                        let bn = layer.biases.len();
                        layer.weights = r.f32s(wn, "weight accumulators")?.into_iter().map(T::from_f32_exact).collect();
                        layer.biases = r.f32s(bn, "bias accumulators")?.into_iter().map(T::from_f32_exact).collect();
                    }
                    Some(acc)
                }
                f => return Err(r.error(at, format!("bad accumulator flag {f}"))),
            }
        };
        r.expect_end()?;
        if !stack.all_finite() {
            return Err(Error::invalid("model", "non-finite parameter"));
        }
        Ok(ModelFile {
            params: ScorerParams {
                stack,
                hidden_activation: Default::default(),
            },
            accumulators,
        })
    }
}

/// Writes a model, optionally with optimizer accumulators.
pub fn write_model<T: Scalar>(
    path: impl AsRef<Path>,
    params: &ScorerParams<T>,
    accumulators: Option<&LayerStack<T>>,
) -> Result<()> {
    let file = ModelFile {
        params: params.clone(),
        accumulators: accumulators.cloned(),
    };
    write_file(path.as_ref(), &file.encode()?)
}

/// The layer-2 activation is not stored; loaded models use the rectifier.
pub fn read_model<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelFile<T>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    ModelFile::decode(&bytes, &path.display().to_string())
}
