//! Model files: one JSON header line, then every parameter as a
//! little-endian `f64`, layer by layer (weights row-major, then bias).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Activation, Layer, Regressor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FORMAT: &str = "robust-gum-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerHeader {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    /// Scalar type the network was trained in.
    pub scalar: String,
    pub input_dim: usize,
    pub output_dim: usize,
    pub layers: Vec<LayerHeader>,
    pub param_count: usize,
}

pub fn save<T: Scalar, W: Write>(net: &Regressor<T>, mut out: W) -> Result<()> {
    let header = ModelHeader {
        format: FORMAT.into(),
        version: FORMAT_VERSION,
        scalar: T::NAME.into(),
        input_dim: net.input_dim(),
        output_dim: net.output_dim(),
        layers: net
            .layers()
            .iter()
            .map(|l| LayerHeader { input: l.in_dim(), output: l.out_dim(), activation: l.activation })
            .collect(),
        param_count: net.num_params(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for p in net.flat_params() {
        out.write_all(&p.to_f64_lossless().to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_to_path<T: Scalar>(net: &Regressor<T>, path: impl AsRef<Path>) -> Result<()> {
    save(net, BufWriter::new(File::create(path)?))
}

fn read_header<R: BufRead>(input: &mut R) -> Result<ModelHeader> {
    let mut line = String::new();
    input.read_line(&mut line)?;
    let header: ModelHeader =
        serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(format!("model header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Format(format!("not a model file (format {:?})", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported model format version {}", header.version)));
    }
    Ok(header)
}

/// Reads only the header, e.g. to pick the scalar type before loading.
pub fn peek_header(path: impl AsRef<Path>) -> Result<ModelHeader> {
    read_header(&mut BufReader::new(File::open(path)?))
}

pub fn load<T: Scalar, R: Read>(input: R) -> Result<Regressor<T>> {
    let mut input = BufReader::new(input);
    let header = read_header(&mut input)?;
    let mut layers = Vec::with_capacity(header.layers.len());
    for lh in &header.layers {
        let mut read_n = |n: usize| -> Result<Vec<T>> {
            let mut buf = vec![0u8; n * 8];
            input
                .read_exact(&mut buf)
                .map_err(|_| Error::Format("model payload is truncated".into()))?;
            Ok(buf
                .chunks_exact(8)
                .map(|b| T::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect())
        };
        let weights = read_n(lh.input * lh.output)?;
        let bias = read_n(lh.output)?;
        layers.push(Layer::new(lh.input, lh.output, weights, bias, lh.activation)?);
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after model payload", rest.len())));
    }
    let net = Regressor::new(layers)?;
    if net.num_params() != header.param_count || net.input_dim() != header.input_dim || net.output_dim() != header.output_dim {
        return Err(Error::Format("model header disagrees with its layers".into()));
    }
    Ok(net)
}

pub fn load_from_path<T: Scalar>(path: impl AsRef<Path>) -> Result<Regressor<T>> {
    load(File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn roundtrip<T: Scalar>(net: &Regressor<T>) -> Regressor<T> {
        let mut buf = Vec::new();
        save(net, &mut buf).unwrap();
        load(buf.as_slice()).unwrap()
    }

    proptest! {
        #[test]
        fn save_load_is_bit_exact(seed in any::<u64>(), hidden in 1usize..6, depth in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let widths = vec![hidden; depth];
            let net64: Regressor<f64> = Regressor::random(3, &widths, 2, Activation::Sigmoid, &mut rng).unwrap();
            let back = roundtrip(&net64);
            prop_assert!(net64.flat_params().iter().zip(back.flat_params()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(&back, &net64);

            let net32: Regressor<f32> = Regressor::random(3, &widths, 2, Activation::Tanh, &mut rng).unwrap();
            let back32 = roundtrip(&net32);
            prop_assert!(net32.flat_params().iter().zip(back32.flat_params()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn header_is_plain_json_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: Regressor<f64> = Regressor::random(4, &[3], 2, Activation::Relu, &mut rng).unwrap();
        let mut buf = Vec::new();
        save(&net, &mut buf).unwrap();
        let nl = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&buf[..nl]).unwrap();
        assert_eq!(header["layers"][0]["activation"], "relu");
        assert_eq!(buf.len() - nl - 1, net.num_params() * 8);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net: Regressor<f64> = Regressor::random(4, &[3], 2, Activation::Relu, &mut rng).unwrap();
        let mut buf = Vec::new();
        save(&net, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(load::<f64, _>(buf.as_slice()), Err(Error::Format(_))));
    }
}
