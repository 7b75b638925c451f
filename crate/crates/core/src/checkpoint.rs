//! Single-file checkpoint container: version field, config snapshot, the toy
//! face model, every named weight block (proxy weights included), encoder
//! variant tags, and training progress. Loading verifies the version and the
//! shape table against the freshly constructed system.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::config::Config;
use crate::encoders::{PlaneEncoderMode, SftParams, TexEncoderInput};
use crate::error::{Error, Result};
use crate::facemodel::Mesh;
use crate::generator::{LatentCode, NeuralTexture, TriPlane};
use crate::pipeline::{Avatar, AvatarSystem, StaticConditioning};
use crate::recurrent::AvatarSession;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"AVCK";
const VERSION: u32 = 1;

fn write_string(w: &mut dyn Write, s: &str) -> Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string(r: &mut dyn Read) -> Result<String> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    if len > 1 << 30 {
        return Err(Error::Checkpoint("string block too large".into()));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("utf8: {e}")))
}

fn write_tensor(w: &mut dyn Write, t: &Tensor) -> Result<()> {
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_tensor(r: &mut dyn Read) -> Result<Tensor> {
    let ndim = r.read_u32::<LittleEndian>()? as usize;
    if ndim > 8 {
        return Err(Error::Checkpoint("tensor rank too large".into()));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    if n > 1 << 28 {
        return Err(Error::Checkpoint("tensor too large".into()));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    Ok(Tensor::new(&shape, data))
}

fn write_blocks(w: &mut dyn Write, blocks: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_u32::<LittleEndian>(blocks.len() as u32)?;
    for (name, t) in blocks {
        write_string(w, name)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

fn read_blocks(r: &mut dyn Read) -> Result<BTreeMap<String, Tensor>> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut blocks = BTreeMap::new();
    for _ in 0..n {
        let name = read_string(r)?;
        let t = read_tensor(r)?;
        blocks.insert(name, t);
    }
    Ok(blocks)
}

fn write_mesh(w: &mut dyn Write, mesh: &Mesh) -> Result<()> {
    w.write_u64::<LittleEndian>(mesh.vertices.len() as u64)?;
    for v in &mesh.vertices {
        for &c in v {
            w.write_f64::<LittleEndian>(c)?;
        }
    }
    w.write_u64::<LittleEndian>(mesh.faces.len() as u64)?;
    for f in &mesh.faces {
        for &i in f {
            w.write_u32::<LittleEndian>(i)?;
        }
    }
    w.write_u64::<LittleEndian>(mesh.uv.len() as u64)?;
    for uv in &mesh.uv {
        w.write_f64::<LittleEndian>(uv[0])?;
        w.write_f64::<LittleEndian>(uv[1])?;
    }
    w.write_u64::<LittleEndian>(mesh.landmark_indices.len() as u64)?;
    for &i in &mesh.landmark_indices {
        w.write_u32::<LittleEndian>(i)?;
    }
    Ok(())
}

fn read_mesh(r: &mut dyn Read) -> Result<Mesh> {
    let nv = r.read_u64::<LittleEndian>()? as usize;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        vertices.push([
            r.read_f64::<LittleEndian>()?,
            r.read_f64::<LittleEndian>()?,
            r.read_f64::<LittleEndian>()?,
        ]);
    }
    let nf = r.read_u64::<LittleEndian>()? as usize;
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        faces.push([
            r.read_u32::<LittleEndian>()?,
            r.read_u32::<LittleEndian>()?,
            r.read_u32::<LittleEndian>()?,
        ]);
    }
    let nuv = r.read_u64::<LittleEndian>()? as usize;
    let mut uv = Vec::with_capacity(nuv);
    for _ in 0..nuv {
        uv.push([r.read_f64::<LittleEndian>()?, r.read_f64::<LittleEndian>()?]);
    }
    let nl = r.read_u64::<LittleEndian>()? as usize;
    let mut landmark_indices = Vec::with_capacity(nl);
    for _ in 0..nl {
        landmark_indices.push(r.read_u32::<LittleEndian>()?);
    }
    Ok(Mesh {
        vertices,
        faces,
        uv,
        landmark_indices,
    })
}

fn basis_to_tensor(basis: &[Vec<[f64; 3]>]) -> Tensor {
    let k = basis.len();
    let v = basis.first().map_or(0, Vec::len);
    let mut data = Vec::with_capacity(k * v * 3);
    for b in basis {
        for d in b {
            data.extend_from_slice(d);
        }
    }
    Tensor::new(&[k, v, 3], data)
}

fn tensor_to_basis(t: &Tensor) -> Vec<Vec<[f64; 3]>> {
    let k = t.shape()[0];
    let v = t.shape()[1];
    (0..k)
        .map(|ki| {
            (0..v)
                .map(|vi| {
                    let base = (ki * v + vi) * 3;
                    [t.data()[base], t.data()[base + 1], t.data()[base + 2]]
                })
                .collect()
        })
        .collect()
}

pub fn save_system(sys: &mut AvatarSystem, path: &Path) -> Result<()> {
    let bytes = system_to_bytes(sys)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn system_to_bytes(sys: &mut AvatarSystem) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(MAGIC)?;
    out.write_u32::<LittleEndian>(VERSION)?;
    write_string(&mut out, &sys.config.to_toml())?;

    out.write_u8(match sys.tex_enc.input {
        TexEncoderInput::UvAligned => 0,
        TexEncoderInput::PosedImage => 1,
    })?;
    out.write_u8(match sys.plane_enc.mode {
        PlaneEncoderMode::SftModulation => 0,
        PlaneEncoderMode::DirectOffsets => 1,
    })?;

    out.write_u32::<LittleEndian>(sys.completed_stages.len() as u32)?;
    for s in &sys.completed_stages {
        write_string(&mut out, s)?;
    }

    match &sys.mean_latent {
        Some(l) => {
            out.write_u8(1)?;
            write_tensor(&mut out, &l.to_tensor())?;
        }
        None => out.write_u8(0)?,
    }

    // toy face model
    out.write_f64::<LittleEndian>(sys.head.head_radius)?;
    out.write_u64::<LittleEndian>(sys.head.grid as u64)?;
    write_mesh(&mut out, &sys.head.base)?;
    write_tensor(&mut out, &basis_to_tensor(&sys.head.shape_basis))?;
    write_tensor(&mut out, &basis_to_tensor(&sys.head.expr_basis))?;

    let mut blocks = BTreeMap::new();
    sys.visit_params(&mut |name, t| {
        blocks.insert(name.to_string(), t.clone());
    });
    write_blocks(&mut out, &blocks)?;
    Ok(out)
}

pub fn load_system(path: &Path) -> Result<AvatarSystem> {
    let bytes = std::fs::read(path)?;
    system_from_bytes(&bytes)
}

pub fn system_from_bytes(bytes: &[u8]) -> Result<AvatarSystem> {
    let mut r = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let config = Config::from_toml(&read_string(&mut r)?)?;
    let tex_input = match r.read_u8()? {
        0 => TexEncoderInput::UvAligned,
        1 => TexEncoderInput::PosedImage,
        v => return Err(Error::Checkpoint(format!("bad texture-encoder tag {v}"))),
    };
    let plane_mode = match r.read_u8()? {
        0 => PlaneEncoderMode::SftModulation,
        1 => PlaneEncoderMode::DirectOffsets,
        v => return Err(Error::Checkpoint(format!("bad plane-encoder tag {v}"))),
    };
    let mut sys = AvatarSystem::with_variants(config, tex_input, plane_mode);

    let n_stages = r.read_u32::<LittleEndian>()? as usize;
    for _ in 0..n_stages {
        sys.completed_stages.insert(read_string(&mut r)?);
    }
    if r.read_u8()? == 1 {
        sys.mean_latent = Some(LatentCode::from_tensor(&read_tensor(&mut r)?));
    }

    sys.head.head_radius = r.read_f64::<LittleEndian>()?;
    sys.head.grid = r.read_u64::<LittleEndian>()? as usize;
    sys.head.base = read_mesh(&mut r)?;
    sys.head.shape_basis = tensor_to_basis(&read_tensor(&mut r)?);
    sys.head.expr_basis = tensor_to_basis(&read_tensor(&mut r)?);

    let blocks = read_blocks(&mut r)?;
    // shape-table verification happens inside load_named
    let mut err = None;
    sys.visit_params(&mut |name, t| {
        if err.is_some() {
            return;
        }
        match blocks.get(name) {
            Some(src) if src.shape() == t.shape() => *t = src.clone(),
            Some(src) => {
                err = Some(Error::Checkpoint(format!(
                    "shape table mismatch for `{name}`: stored {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )))
            }
            None => err = Some(Error::Checkpoint(format!("missing weight block `{name}`"))),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(sys)
}

pub fn avatar_to_bytes(avatar: &Avatar) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(b"AVAT")?;
    out.write_u32::<LittleEndian>(VERSION)?;
    write_tensor(&mut out, &avatar.latent.to_tensor())?;
    out.write_u32::<LittleEndian>(avatar.texture.scales.len() as u32)?;
    for s in &avatar.texture.scales {
        write_tensor(&mut out, s)?;
    }
    match &avatar.conditioning {
        StaticConditioning::Sft(sft) => {
            out.write_u8(0)?;
            out.write_u32::<LittleEndian>(sft.scales.len() as u32)?;
            for (a, b) in &sft.scales {
                write_tensor(&mut out, a)?;
                write_tensor(&mut out, b)?;
            }
        }
        StaticConditioning::Offsets(offs) => {
            out.write_u8(1)?;
            out.write_u32::<LittleEndian>(offs.len() as u32)?;
            for o in offs {
                write_tensor(&mut out, o)?;
            }
        }
        StaticConditioning::Materialized(tp) => {
            out.write_u8(2)?;
            out.write_u32::<LittleEndian>(tp.channels as u32)?;
            write_tensor(&mut out, &tp.planes)?;
        }
    }
    Ok(out)
}

pub fn avatar_from_bytes(bytes: &[u8]) -> Result<Avatar> {
    let mut r = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"AVAT" {
        return Err(Error::Checkpoint("bad avatar magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let latent = LatentCode::from_tensor(&read_tensor(&mut r)?);
    let n = r.read_u32::<LittleEndian>()? as usize;
    let scales = (0..n).map(|_| read_tensor(&mut r)).collect::<Result<_>>()?;
    let conditioning = match r.read_u8()? {
        0 => {
            let n = r.read_u32::<LittleEndian>()? as usize;
            let mut maps = Vec::with_capacity(n);
            for _ in 0..n {
                let a = read_tensor(&mut r)?;
                let b = read_tensor(&mut r)?;
                maps.push((a, b));
            }
            StaticConditioning::Sft(SftParams { scales: maps })
        }
        1 => {
            let n = r.read_u32::<LittleEndian>()? as usize;
            StaticConditioning::Offsets((0..n).map(|_| read_tensor(&mut r)).collect::<Result<_>>()?)
        }
        2 => {
            let channels = r.read_u32::<LittleEndian>()? as usize;
            StaticConditioning::Materialized(TriPlane {
                planes: read_tensor(&mut r)?,
                channels,
            })
        }
        v => return Err(Error::Checkpoint(format!("bad conditioning tag {v}"))),
    };
    Ok(Avatar {
        latent,
        texture: NeuralTexture { scales },
        conditioning,
    })
}

/// Streaming-session suspend/resume.
pub fn session_to_bytes(session: &AvatarSession) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.write_all(b"AVSS")?;
    out.write_u32::<LittleEndian>(VERSION)?;
    write_tensor(&mut out, &session.latent.to_tensor())?;
    out.write_u32::<LittleEndian>(session.coarse_tex.scales.len() as u32)?;
    for s in &session.coarse_tex.scales {
        write_tensor(&mut out, s)?;
    }
    out.write_u32::<LittleEndian>(session.coarse_static.channels as u32)?;
    write_tensor(&mut out, &session.coarse_static.planes)?;
    for state in [&session.tex_state, &session.plane_state] {
        out.write_u32::<LittleEndian>(state.len() as u32)?;
        for t in state {
            write_tensor(&mut out, t)?;
        }
    }
    out.write_u64::<LittleEndian>(session.frames_seen as u64)?;
    Ok(out)
}

pub fn session_from_bytes(bytes: &[u8]) -> Result<AvatarSession> {
    let mut r = std::io::Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != b"AVSS" {
        return Err(Error::Checkpoint("bad session magic".into()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let latent = LatentCode::from_tensor(&read_tensor(&mut r)?);
    let n = r.read_u32::<LittleEndian>()? as usize;
    let scales: Vec<Tensor> = (0..n).map(|_| read_tensor(&mut r)).collect::<Result<_>>()?;
    let channels = r.read_u32::<LittleEndian>()? as usize;
    let planes = read_tensor(&mut r)?;
    let mut states = Vec::new();
    for _ in 0..2 {
        let n = r.read_u32::<LittleEndian>()? as usize;
        states.push(
            (0..n)
                .map(|_| read_tensor(&mut r))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let plane_state = states.pop().unwrap();
    let tex_state = states.pop().unwrap();
    let frames_seen = r.read_u64::<LittleEndian>()? as usize;
    Ok(AvatarSession {
        latent,
        coarse_tex: NeuralTexture { scales },
        coarse_static: TriPlane { planes, channels },
        tex_state,
        plane_state,
        frames_seen,
    })
}
