//! Binary dump of self and near correction blocks.
//!
//! Layout (little endian): magic, header (eps, eta, eta1, kernel list as
//! JSON, mesh hash), then self blocks and near blocks. A dump is only loaded
//! back when its header matches the current run exactly.

use super::{NearMatrix, SelfMatrix};
use crate::kernels::KernelSpec;
use crate::{Error, Result, C64};
use nalgebra::DMatrix;
use std::io::{Read, Write};

pub const DUMP_MAGIC: &[u8; 8] = b"SQCACHE1";

/// Run parameters a dump is tied to.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpHeader {
    pub eps: f64,
    pub eta: f64,
    pub eta1: f64,
    pub kernels: Vec<KernelSpec>,
    pub mesh_hash: [u8; 32],
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(get_u64(r)?))
}

fn get_len(r: &mut impl Read, what: &str) -> Result<usize> {
    let n = get_u64(r)?;
    if n > (1 << 32) {
        return Err(Error::Validation(format!("implausible {what} count {n}")));
    }
    Ok(n as usize)
}

fn put_mats(w: &mut impl Write, mats: &[DMatrix<C64>]) -> Result<()> {
    put_u64(w, mats.len() as u64)?;
    for m in mats {
        put_u64(w, m.nrows() as u64)?;
        put_u64(w, m.ncols() as u64)?;
        for z in m.iter() {
            put_f64(w, z.re)?;
            put_f64(w, z.im)?;
        }
    }
    Ok(())
}

fn get_mats(r: &mut impl Read) -> Result<Vec<DMatrix<C64>>> {
    let nk = get_len(r, "kernel")?;
    (0..nk)
        .map(|_| {
            let rows = get_len(r, "row")?;
            let cols = get_len(r, "column")?;
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                let re = get_f64(r)?;
                let im = get_f64(r)?;
                data.push(C64::new(re, im));
            }
            Ok(DMatrix::from_vec(rows, cols, data))
        })
        .collect()
}

fn put_header(w: &mut impl Write, h: &DumpHeader) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    put_f64(w, h.eps)?;
    put_f64(w, h.eta)?;
    put_f64(w, h.eta1)?;
    let k = serde_json::to_vec(&h.kernels)?;
    put_u64(w, k.len() as u64)?;
    w.write_all(&k)?;
    w.write_all(&h.mesh_hash)?;
    Ok(())
}

fn get_header(r: &mut impl Read) -> Result<DumpHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Validation("not a correction dump".into()));
    }
    let eps = get_f64(r)?;
    let eta = get_f64(r)?;
    let eta1 = get_f64(r)?;
    let n = get_len(r, "kernel byte")?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    let kernels = serde_json::from_slice(&buf)?;
    let mut mesh_hash = [0u8; 32];
    r.read_exact(&mut mesh_hash)?;
    Ok(DumpHeader {
        eps,
        eta,
        eta1,
        kernels,
        mesh_hash,
    })
}

pub fn write_dump(
    mut w: impl Write,
    header: &DumpHeader,
    selfs: &[SelfMatrix],
    nears: &[NearMatrix],
) -> Result<()> {
    put_header(&mut w, header)?;
    put_u64(&mut w, selfs.len() as u64)?;
    for s in selfs {
        put_u64(&mut w, s.patch as u64)?;
        put_mats(&mut w, &s.mats)?;
    }
    put_u64(&mut w, nears.len() as u64)?;
    for n in nears {
        put_u64(&mut w, n.patch as u64)?;
        put_u64(&mut w, n.targets.len() as u64)?;
        for &t in &n.targets {
            put_u64(&mut w, t as u64)?;
        }
        put_u64(&mut w, n.unconverged.len() as u64)?;
        for &t in &n.unconverged {
            put_u64(&mut w, t as u64)?;
        }
        put_mats(&mut w, &n.mats)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dump, refusing it unless its header equals `expected`.
pub fn read_dump(
    mut r: impl Read,
    expected: &DumpHeader,
) -> Result<(Vec<SelfMatrix>, Vec<NearMatrix>)> {
    let h = get_header(&mut r)?;
    let mut why = Vec::new();
    if h.eps.to_bits() != expected.eps.to_bits() {
        why.push(format!("eps {} != {}", h.eps, expected.eps));
    }
    if h.eta.to_bits() != expected.eta.to_bits() || h.eta1.to_bits() != expected.eta1.to_bits() {
        why.push(format!("eta/eta1 {}/{} != {}/{}", h.eta, h.eta1, expected.eta, expected.eta1));
    }
    if h.kernels != expected.kernels {
        why.push("kernel list differs".into());
    }
    if h.mesh_hash != expected.mesh_hash {
        why.push("mesh hash differs".into());
    }
    if !why.is_empty() {
        return Err(Error::Validation(format!("dump does not match this run: {}", why.join("; "))));
    }
    let ns = get_len(&mut r, "self block")?;
    let mut selfs = Vec::with_capacity(ns);
    for _ in 0..ns {
        let patch = get_u64(&mut r)? as usize;
        selfs.push(SelfMatrix {
            patch,
            mats: get_mats(&mut r)?,
        });
    }
    let nn = get_len(&mut r, "near block")?;
    let mut nears = Vec::with_capacity(nn);
    for _ in 0..nn {
        let patch = get_u64(&mut r)? as usize;
        let nt = get_len(&mut r, "target")?;
        let targets = (0..nt).map(|_| get_u64(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
        let nu = get_len(&mut r, "unconverged target")?;
        let unconverged = (0..nu).map(|_| get_u64(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
        nears.push(NearMatrix {
            patch,
            targets,
            mats: get_mats(&mut r)?,
            unconverged,
        });
    }
    Ok((selfs, nears))
}
