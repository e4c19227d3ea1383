//! Versioned binary model checkpoints: architecture, every parameter with
//! its optimizer state, batch-norm running statistics, and the RNG state.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Architecture, GcnModel, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MIGC";
const VERSION: u32 = 1;

fn write_matrix(w: &mut impl Write, m: &DMatrix<f64>) -> Result<()> {
    w.write_u64::<LittleEndian>(m.nrows() as u64)?;
    w.write_u64::<LittleEndian>(m.ncols() as u64)?;
    // column-major, matching the in-memory layout
    for v in m.iter() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_matrix(r: &mut impl Read) -> Result<DMatrix<f64>> {
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    let mut m = DMatrix::zeros(rows, cols);
    for v in m.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
    }
    Ok(m)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &GcnModel, rng: &ChaCha8Rng) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let c = &model.config;
    w.write_u8(match c.architecture {
        Architecture::Sgcn => 0,
        Architecture::Mgcn => 1,
    })?;
    for v in [c.hidden, c.order, c.levels, c.in_channels, c.out_channels] {
        w.write_u64::<LittleEndian>(v as u64)?;
    }
    for v in [c.leaky_slope, c.bn_eps, c.bn_momentum] {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.write_u64::<LittleEndian>(model.step_count())?;

    w.write_all(&rng.get_seed())?;
    let pos = rng.get_word_pos();
    w.write_u64::<LittleEndian>((pos & u128::from(u64::MAX)) as u64)?;
    w.write_u64::<LittleEndian>((pos >> 64) as u64)?;

    // batch-norm running stats, in block order
    w.write_u64::<LittleEndian>(model.blocks().len() as u64)?;
    for block in model.blocks() {
        let mean = &block.bn.running_mean;
        let var = &block.bn.running_var;
        w.write_u64::<LittleEndian>(mean.len() as u64)?;
        for v in mean.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
        for v in var.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
    }

    // parameters with Adam moments (names are the integrity check on load)
    let mut model_names = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    {
        // immutable snapshot through a clone to keep the public surface lean
        let mut snapshot = model.clone_for_io();
        for p in snapshot.params_mut() {
            model_names.push(p.name.clone());
            let name = p.name.as_bytes();
            payload.write_u64::<LittleEndian>(name.len() as u64)?;
            payload.write_all(name)?;
            write_matrix(&mut payload, &p.value)?;
            write_matrix(&mut payload, &p.m1)?;
            write_matrix(&mut payload, &p.m2)?;
        }
    }
    w.write_u64::<LittleEndian>(model_names.len() as u64)?;
    w.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(GcnModel, ChaCha8Rng)> {
    let path = path.as_ref();
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let bad = |message: String| Error::Format {
        path: path.display().to_string(),
        line: 0,
        message,
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a model checkpoint (bad magic)".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let architecture = match r.read_u8()? {
        0 => Architecture::Sgcn,
        1 => Architecture::Mgcn,
        other => return Err(bad(format!("unknown architecture tag {other}"))),
    };
    let hidden = r.read_u64::<LittleEndian>()? as usize;
    let order = r.read_u64::<LittleEndian>()? as usize;
    let levels = r.read_u64::<LittleEndian>()? as usize;
    let in_channels = r.read_u64::<LittleEndian>()? as usize;
    let out_channels = r.read_u64::<LittleEndian>()? as usize;
    let leaky_slope = r.read_f64::<LittleEndian>()?;
    let bn_eps = r.read_f64::<LittleEndian>()?;
    let bn_momentum = r.read_f64::<LittleEndian>()?;
    let step = r.read_u64::<LittleEndian>()?;

    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let lo = r.read_u64::<LittleEndian>()? as u128;
    let hi = r.read_u64::<LittleEndian>()? as u128;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(lo | (hi << 64));

    let config = ModelConfig {
        architecture,
        hidden,
        order,
        leaky_slope,
        bn_eps,
        bn_momentum,
        levels,
        in_channels,
        out_channels,
    };
    // shape the model with a throwaway stream, then overwrite all state
    let mut init_rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = GcnModel::new(config, &mut init_rng)?;
    model.set_step(step);

    let block_count = r.read_u64::<LittleEndian>()? as usize;
    if block_count != model.blocks().len() {
        return Err(bad(format!(
            "checkpoint has {block_count} blocks, model expects {}",
            model.blocks().len()
        )));
    }
    for block in model.blocks_mut() {
        let len = r.read_u64::<LittleEndian>()? as usize;
        if len != block.bn.running_mean.len() {
            return Err(bad("running-stat width mismatch".into()));
        }
        for v in block.bn.running_mean.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
        for v in block.bn.running_var.iter_mut() {
            *v = r.read_f64::<LittleEndian>()?;
        }
    }

    let param_count = r.read_u64::<LittleEndian>()? as usize;
    let mut params = model.params_mut();
    if param_count != params.len() {
        return Err(bad(format!(
            "checkpoint has {param_count} parameters, model expects {}",
            params.len()
        )));
    }
    for p in params.iter_mut() {
        let name_len = r.read_u64::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8".into()))?;
        if name != p.name {
            return Err(bad(format!("parameter order mismatch: {name} vs {}", p.name)));
        }
        let value = read_matrix(&mut r)?;
        let m1 = read_matrix(&mut r)?;
        let m2 = read_matrix(&mut r)?;
        if value.shape() != p.value.shape() {
            return Err(bad(format!("parameter {name} has the wrong shape")));
        }
        p.value = value;
        p.m1 = m1;
        p.m2 = m2;
    }
    Ok((model, rng))
}

impl GcnModel {
    /// Cheap clone used by checkpointing so parameter iteration (which needs
    /// `&mut self`) does not require mutable access to the live model.
    fn clone_for_io(&self) -> GcnModel {
        GcnModel {
            config: self.config.clone(),
            blocks: self.blocks().to_vec(),
            side_heads: self.side_heads_ref().to_vec(),
            head: self.head_ref().clone(),
            step: self.step_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::gcn::{GraphContext, Phase, ScaledGraphOperator};
    use nalgebra::DMatrix;
    use rand::Rng;

    #[test]
    fn checkpoint_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut model = GcnModel::new(
            ModelConfig {
                hidden: 6,
                ..ModelConfig::sgcn()
            },
            &mut rng,
        )
        .unwrap();
        // advance the rng and perturb some state so the roundtrip is nontrivial
        let _: f64 = rng.random();
        model.set_step(17);
        model.head_mut().weight.value[(0, 0)] = 0.125;

        save_checkpoint(&path, &model, &rng).unwrap();
        let (mut back, back_rng) = load_checkpoint(&path).unwrap();

        assert_eq!(back.step_count(), 17);
        assert_eq!(back_rng.get_word_pos(), rng.get_word_pos());
        assert_eq!(back_rng.get_seed(), rng.get_seed());

        let mesh = fixtures::icosphere(1);
        let op = ScaledGraphOperator::from_mesh(&mesh).unwrap();
        let x = DMatrix::from_fn(mesh.vertex_count(), 4, |i, j| ((i + j) as f64).sin());
        let (a, _) = model.forward(&GraphContext::Single(&op), &x, Phase::Eval).unwrap();
        let (b, _) = back.forward(&GraphContext::Single(&op), &x, Phase::Eval).unwrap();
        for (x, y) in a[0].iter().zip(b[0].iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "eval outputs diverge after reload");
        }
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
