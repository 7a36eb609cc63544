//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "DETM"            4 bytes
//! version           u32 (= 1)
//! d_tsdae, d_use    u32, u32
//! n_classes         u32
//! activation        u8  (0 = relu)
//! dropout_rate      f64
//! seed              u64
//! tsdae_hidden      u32 length, then u32 widths
//! use_hidden        u32 length, then u32 widths
//! param_count       u64
//! parameters        f32 blocks; per layer (TSDAE branch, USE branch, head):
//!                   weights fan_in x fan_out row-major, then bias
//! ```

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2};

use super::model::{Activation, Dense, Model, ModelConfig};
use crate::error::{format_err, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DETM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Counts bytes consumed so format errors can report an offset.
struct Tracked<R> {
    inner: R,
    pos: u64,
}

impl<R: Read> Read for Tracked<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.pos += n as u64;
        Ok(n)
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidInput(format!("{what} {v} does not fit in u32")))
}

pub fn encode_checkpoint<W: Write>(model: &Model<f32>, mut w: W) -> Result<()> {
    let cfg = model.config();
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(to_u32(cfg.d_tsdae, "d_tsdae")?)?;
    w.write_u32::<LittleEndian>(to_u32(cfg.d_use, "d_use")?)?;
    w.write_u32::<LittleEndian>(to_u32(cfg.n_classes, "n_classes")?)?;
    w.write_u8(match cfg.activation {
        Activation::Relu => 0,
    })?;
    w.write_f64::<LittleEndian>(cfg.dropout_rate)?;
    w.write_u64::<LittleEndian>(cfg.seed)?;
    for hidden in [&cfg.tsdae_hidden, &cfg.use_hidden] {
        w.write_u32::<LittleEndian>(to_u32(hidden.len(), "branch depth")?)?;
        for &h in hidden {
            w.write_u32::<LittleEndian>(to_u32(h, "hidden width")?)?;
        }
    }
    w.write_u64::<LittleEndian>(model.param_count() as u64)?;
    for layer in model.layers() {
        for &v in layer.weights.iter().chain(layer.bias.iter()) {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn decode_checkpoint<R: Read>(r: R) -> Result<Model<f32>> {
    let mut r = Tracked { inner: r, pos: 0 };
    let eof = |r: &Tracked<R>, e: io::Error| -> Error {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Format {
                offset: r.pos,
                message: "checkpoint truncated".into(),
            }
        } else {
            Error::Io(e)
        }
    };
    macro_rules! rd {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(e) => return Err(eof(&r, e)),
            }
        };
    }

    let mut magic = [0u8; 4];
    rd!(r.read_exact(&mut magic));
    if &magic != CHECKPOINT_MAGIC {
        return format_err(0, format!("bad checkpoint magic {magic:?}"));
    }
    let version = rd!(r.read_u32::<LittleEndian>());
    if version != CHECKPOINT_VERSION {
        return format_err(4, format!("unsupported checkpoint version {version}"));
    }
    let d_tsdae = rd!(r.read_u32::<LittleEndian>()) as usize;
    let d_use = rd!(r.read_u32::<LittleEndian>()) as usize;
    let n_classes = rd!(r.read_u32::<LittleEndian>()) as usize;
    let act_at = r.pos;
    let activation = match rd!(r.read_u8()) {
        0 => Activation::Relu,
        other => return format_err(act_at, format!("unknown activation tag {other}")),
    };
    let dropout_rate = rd!(r.read_f64::<LittleEndian>());
    let seed = rd!(r.read_u64::<LittleEndian>());
    let mut branches = Vec::with_capacity(2);
    for _ in 0..2 {
        let at = r.pos;
        let depth = rd!(r.read_u32::<LittleEndian>()) as usize;
        if depth > 1024 {
            return format_err(at, format!("implausible branch depth {depth}"));
        }
        let mut widths = Vec::with_capacity(depth);
        for _ in 0..depth {
            widths.push(rd!(r.read_u32::<LittleEndian>()) as usize);
        }
        branches.push(widths);
    }
    let use_hidden = branches.pop().unwrap();
    let tsdae_hidden = branches.pop().unwrap();
    let config = ModelConfig {
        d_tsdae,
        d_use,
        tsdae_hidden,
        use_hidden,
        dropout_rate,
        n_classes,
        activation,
        seed,
    };
    let cfg_end = r.pos;
    config
        .validate()
        .map_err(|e| Error::Format {
            offset: cfg_end,
            message: e.to_string(),
        })?;
    let count_at = r.pos;
    let declared = rd!(r.read_u64::<LittleEndian>());
    let shapes = config.layer_shapes();
    let expected: u64 = shapes.iter().map(|&(i, o)| (i * o + o) as u64).sum();
    if declared != expected {
        return format_err(
            count_at,
            format!("declared {declared} parameters, configuration implies {expected}"),
        );
    }
    let mut layers = Vec::with_capacity(shapes.len());
    for (fan_in, fan_out) in shapes {
        let mut read_block = |n: usize| -> Result<Vec<f32>> {
            let mut bytes = vec![0u8; n * 4];
            rd!(r.read_exact(&mut bytes));
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let w = read_block(fan_in * fan_out)?;
        let b = read_block(fan_out)?;
        layers.push(Dense {
            weights: Array2::from_shape_vec((fan_in, fan_out), w).expect("block size"),
            bias: Array1::from(b),
        });
    }
    let mut extra = [0u8; 1];
    if rd!(r.read(&mut extra)) != 0 {
        return format_err(r.pos - 1, "trailing bytes after parameters");
    }
    Model::from_layers(config, layers)
}

pub fn write_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    encode_checkpoint(model, BufWriter::new(f))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Model<f32>> {
    let f = File::open(path)?;
    decode_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(seed: u64) -> Model<f32> {
        Model::init(ModelConfig {
            d_tsdae: 6,
            d_use: 3,
            tsdae_hidden: vec![5, 4],
            use_hidden: vec![2],
            dropout_rate: 0.25,
            n_classes: 4,
            activation: Activation::Relu,
            seed,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = model(4);
        m.layers_mut()[0].bias[1] = -0.0;
        m.layers_mut()[2].bias[0] = 1.25e-39; // subnormal
        let mut buf = Vec::new();
        encode_checkpoint(&m, &mut buf).unwrap();
        let back = decode_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in back.layers().iter().zip(m.layers()) {
            assert!(a.weights.iter().zip(&b.weights).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.bias.iter().zip(&b.bias).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut again = Vec::new();
        encode_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        encode_checkpoint(&model(1), &mut buf).unwrap();
        assert_eq!(&buf[..4], b"DETM");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 6);
        // header: 4+4+12+1+8+8 + (4+8) + (4+4) + 8, then 4 bytes per parameter
        let header = 4 + 4 + 12 + 1 + 8 + 8 + 12 + 8 + 8;
        assert_eq!(buf.len(), header + 4 * model(1).param_count());
    }

    #[test]
    fn corrupt_inputs() {
        let mut buf = Vec::new();
        encode_checkpoint(&model(1), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(bad.as_slice()), Err(Error::Format { offset: 0, .. })));
        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(decode_checkpoint(truncated), Err(Error::Format { .. })));
        let mut long = buf.clone();
        long.push(0);
        assert!(decode_checkpoint(long.as_slice()).is_err());
        let mut ver = buf;
        ver[4] = 9;
        assert!(matches!(decode_checkpoint(ver.as_slice()), Err(Error::Format { offset: 4, .. })));
    }
}
