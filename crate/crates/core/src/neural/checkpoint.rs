//! Versioned binary network blobs.

use std::io::{Read, Write};

use super::net::Network;
use super::params::{read_u32, CheckpointError, Params};

pub const MAGIC: &[u8; 4] = b"ERGN";
pub const VERSION: u32 = 1;

pub fn write_network<W: Write>(net: &Network, w: &mut W) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let desc = net.cfg.describe();
    w.write_all(&(desc.len() as u32).to_le_bytes())?;
    w.write_all(desc.as_bytes())?;
    net.params.write_to(w)
}

/// Load parameters into `net`, which must have been built with the same
/// configuration and input spec.
pub fn read_network_into<R: Read>(net: &mut Network, r: &mut R) -> Result<(), CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let len = read_u32(r)? as usize;
    let mut desc = vec![0u8; len];
    r.read_exact(&mut desc)?;
    if desc != net.cfg.describe().as_bytes() {
        return Err(CheckpointError::Layout);
    }
    let params = Params::read_from(r)?;
    if !params.same_layout(&net.params) {
        return Err(CheckpointError::Layout);
    }
    net.params = params;
    Ok(())
}
