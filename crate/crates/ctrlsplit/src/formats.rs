//! Binary parameter checkpoints and transition buffers, little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use ctrlsplit_core::envs::EnvKind;
use ctrlsplit_core::replay::{Buffer, Record};
use ctrlsplit_core::{ParamSet, Tensor};

pub const PARAMS_MAGIC: &[u8; 8] = b"DUCF-PAR";
pub const BUFFER_MAGIC: &[u8; 8] = b"DUCF-BUF";
pub const FORMAT_VERSION: u32 = 1;

fn read_magic(r: &mut impl Read, magic: &[u8; 8]) -> Result<()> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got).context("reading file header")?;
    ensure!(&got == magic, "bad magic {:?}, expected {:?}", String::from_utf8_lossy(&got), String::from_utf8_lossy(magic));
    let version = r.read_u32::<LE>()?;
    ensure!(version == FORMAT_VERSION, "unsupported format version {}", version);
    Ok(())
}

pub fn write_params_to(w: &mut impl Write, params: &ParamSet<f32>) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u32::<LE>(u32::try_from(params.len())?)?;
    for (name, t) in params.iter() {
        let bytes = name.as_bytes();
        w.write_u16::<LE>(u16::try_from(bytes.len()).context("tensor name too long")?)?;
        w.write_all(bytes)?;
        w.write_u8(u8::try_from(t.shape().len())?)?;
        for d in t.shape() {
            w.write_u32::<LE>(u32::try_from(*d)?)?;
        }
        for v in t.data() {
            w.write_f32::<LE>(*v)?;
        }
    }
    Ok(())
}

pub fn read_params_from(r: &mut impl Read) -> Result<ParamSet<f32>> {
    read_magic(r, PARAMS_MAGIC)?;
    let count = r.read_u32::<LE>()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.read_u16::<LE>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).context("tensor name is not UTF-8")?;
        let rank = r.read_u8()? as usize;
        let shape = (0..rank).map(|_| r.read_u32::<LE>().map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
        let mut data = vec![0f32; shape.iter().product()];
        r.read_f32_into::<LE>(&mut data)?;
        ensure!(!params.contains(&name), "duplicate tensor {}", name);
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(params)
}

pub fn save_params(path: &Path, params: &ParamSet<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_params_to(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamSet<f32>> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    read_params_from(&mut r).with_context(|| format!("reading {}", path.display()))
}

pub fn write_buffer_to(w: &mut impl Write, buffer: &Buffer) -> Result<()> {
    w.write_all(BUFFER_MAGIC)?;
    w.write_u32::<LE>(FORMAT_VERSION)?;
    w.write_u8(buffer.env.id())?;
    w.write_u16::<LE>(u16::try_from(buffer.height)?)?;
    w.write_u16::<LE>(u16::try_from(buffer.width)?)?;
    w.write_u64::<LE>(buffer.len() as u64)?;
    for r in buffer.records() {
        w.write_all(&r.obs)?;
        w.write_u8(r.action)?;
        w.write_u32::<LE>(r.reward_bits)?;
        w.write_all(&r.next_obs)?;
        w.write_u8(r.terminal as u8)?;
        w.write_u32::<LE>(r.episode_id)?;
    }
    Ok(())
}

pub fn read_buffer_from(r: &mut impl Read) -> Result<Buffer> {
    read_magic(r, BUFFER_MAGIC)?;
    let env = EnvKind::from_id(r.read_u8()?)?;
    let (h, w) = (r.read_u16::<LE>()? as usize, r.read_u16::<LE>()? as usize);
    ensure!(h == env.pixels() && w == env.pixels(), "{}x{} frames do not match {}", h, w, env.name());
    let count = usize::try_from(r.read_u64::<LE>()?)?;
    let mut buffer = Buffer::new(env, count);
    for _ in 0..count {
        let mut obs = vec![0u8; h * w];
        r.read_exact(&mut obs)?;
        let action = r.read_u8()?;
        let reward_bits = r.read_u32::<LE>()?;
        let mut next_obs = vec![0u8; h * w];
        r.read_exact(&mut next_obs)?;
        let terminal = match r.read_u8()? {
            0 => false,
            1 => true,
            other => bail!("terminal flag {} is not 0/1", other),
        };
        let episode_id = r.read_u32::<LE>()?;
        buffer.push_record(Record { obs, action, reward_bits, next_obs, terminal, episode_id })?;
    }
    Ok(buffer)
}

pub fn save_buffer(path: &Path, buffer: &Buffer) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    write_buffer_to(&mut w, buffer)?;
    w.flush()?;
    Ok(())
}

pub fn load_buffer(path: &Path) -> Result<Buffer> {
    let mut r = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    read_buffer_from(&mut r).with_context(|| format!("reading {}", path.display()))
}
