//! Versioned binary checkpoints for trained error models.
//!
//! Layout (little endian): magic `IDEC`, format version, model shape
//! (joints, hidden widths), clamp and iteration, then for trained models the
//! normalization statistics and every layer's slope, weights and biases.
//! Parameters round-trip bit exactly, so a reloaded model reproduces
//! predictions identically.

use std::io::{self, Read, Write};

use invdyn_core::model::{ErrorModel, JointNet, MlpSpec, NormStats, Standardizer};

const MAGIC: &[u8; 4] = b"IDEC";
const VERSION: u32 = 1;

/// Checkpoint read/write error.
#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    Format(String),
}

impl std::fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint io error: {e}"),
            CheckpointError::Format(msg) => write!(f, "bad checkpoint: {msg}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64<W: Write>(w: &mut W, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, vs: &[f64]) -> io::Result<()> {
    for v in vs {
        put_f64(w, *v)?;
    }
    Ok(())
}

fn get_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn get_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn get_f64s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(get_f64(r)?);
    }
    Ok(out)
}

/// Serialize a model.
pub fn write_model<W: Write>(w: &mut W, model: &ErrorModel) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_u32(w, model.dim() as u32)?;
    put_u32(w, model.iteration())?;
    put_f64(w, model.output_clamp())?;
    put_f64(w, model.spec().alpha_init)?;
    put_u32(w, model.spec().hidden.len() as u32)?;
    for width in &model.spec().hidden {
        put_u32(w, *width as u32)?;
    }
    let trained = !model.nets().is_empty();
    w.write_all(&[trained as u8])?;
    if trained {
        let norm = model.norm().expect("trained model has norm stats");
        put_f64s(w, &norm.input.mean)?;
        put_f64s(w, &norm.input.scale)?;
        put_f64s(w, &norm.y_mean)?;
        put_f64s(w, &norm.y_scale)?;
        for net in model.nets() {
            put_u32(w, net.layers.len() as u32)?;
            for layer in &net.layers {
                put_u32(w, layer.in_dim as u32)?;
                put_u32(w, layer.out_dim as u32)?;
                put_f64(w, layer.alpha)?;
                put_f64s(w, &layer.w)?;
                put_f64s(w, &layer.b)?;
            }
        }
    }
    Ok(())
}

/// Deserialize and validate a model.
pub fn read_model<R: Read>(r: &mut R) -> Result<ErrorModel, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format("wrong magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let dim = get_u32(r)? as usize;
    if dim == 0 || dim > 64 {
        return Err(CheckpointError::Format(format!("implausible dim {dim}")));
    }
    let iteration = get_u32(r)?;
    let output_clamp = get_f64(r)?;
    let alpha_init = get_f64(r)?;
    let n_hidden = get_u32(r)? as usize;
    if n_hidden == 0 || n_hidden > 64 {
        return Err(CheckpointError::Format("implausible hidden layer count".into()));
    }
    let mut hidden = Vec::with_capacity(n_hidden);
    for _ in 0..n_hidden {
        hidden.push(get_u32(r)? as usize);
    }
    let spec = MlpSpec { hidden, alpha_init };

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let (nets, norm) = if flag[0] == 1 {
        let input = Standardizer {
            mean: get_f64s(r, 3 * dim)?,
            scale: get_f64s(r, 3 * dim)?,
        };
        let y_mean = get_f64s(r, dim)?;
        let y_scale = get_f64s(r, dim)?;
        let mut nets = Vec::with_capacity(dim);
        for _ in 0..dim {
            let n_layers = get_u32(r)? as usize;
            if n_layers == 0 || n_layers > 65 {
                return Err(CheckpointError::Format("implausible layer count".into()));
            }
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let in_dim = get_u32(r)? as usize;
                let out_dim = get_u32(r)? as usize;
                if in_dim == 0 || out_dim == 0 || in_dim * out_dim > 16_000_000 {
                    return Err(CheckpointError::Format("implausible layer shape".into()));
                }
                let alpha = get_f64(r)?;
                let w = get_f64s(r, in_dim * out_dim)?;
                let b = get_f64s(r, out_dim)?;
                layers.push(invdyn_core::model::Dense {
                    in_dim,
                    out_dim,
                    w,
                    b,
                    alpha,
                });
            }
            nets.push(JointNet { layers });
        }
        (
            nets,
            Some(NormStats {
                input,
                y_mean,
                y_scale,
            }),
        )
    } else if flag[0] == 0 {
        (Vec::new(), None)
    } else {
        return Err(CheckpointError::Format("bad trained flag".into()));
    };

    ErrorModel::from_parts(dim, spec, output_clamp, iteration, nets, norm)
        .map_err(|e| CheckpointError::Format(e.to_string()))
}

/// Write a model to a file path.
pub fn save(path: &std::path::Path, model: &ErrorModel) -> Result<(), CheckpointError> {
    let mut file = io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut file, model)?;
    file.flush()?;
    Ok(())
}

/// Read a model from a file path.
pub fn load(path: &std::path::Path) -> Result<ErrorModel, CheckpointError> {
    let mut file = io::BufReader::new(std::fs::File::open(path)?);
    read_model(&mut file)
}
