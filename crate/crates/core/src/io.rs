//! Binary field dumps and the on-disk kernel cache.
//!
//! Both formats start with a fixed 64-byte little-endian header followed by
//! row-major f64 values.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::collision::CollisionKernelSpec;
use crate::error::{Error, Result};
use crate::field::{Field, Repr};
use crate::grid::VelocityGrid;

const FIELD_MAGIC: &[u8; 8] = b"CTFIELD\0";
const KERNEL_MAGIC: &[u8; 8] = b"CTKERNL\0";
const VERSION: u32 = 1;
const HEADER: usize = 64;

/// Environment variable naming the kernel cache directory.
pub const CACHE_ENV: &str = "COUETTE_CACHE_DIR";

/// Header of a field dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DumpHeader {
    pub version: u32,
    pub repr: Repr,
    pub grid_hash: u64,
    pub spatial_hash: u64,
    pub n_y: u64,
    pub n_v: u64,
}

fn put(buf: &mut [u8], at: usize, bytes: &[u8]) {
    buf[at..at + bytes.len()].copy_from_slice(bytes);
}

fn u32_at(buf: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn u64_at(buf: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(buf[at..at + 8].try_into().unwrap())
}

fn values_to_bytes(data: &[f64]) -> Vec<u8> {
    data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_to_values(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn write_field(path: &Path, field: &Field, grid_hash: u64, spatial_hash: u64) -> Result<()> {
    let mut h = [0u8; HEADER];
    put(&mut h, 0, FIELD_MAGIC);
    put(&mut h, 8, &VERSION.to_le_bytes());
    put(&mut h, 12, &field.repr.tag().to_le_bytes());
    put(&mut h, 16, &grid_hash.to_le_bytes());
    put(&mut h, 24, &spatial_hash.to_le_bytes());
    put(&mut h, 32, &(field.n_y as u64).to_le_bytes());
    put(&mut h, 40, &(field.n_v as u64).to_le_bytes());
    let mut f = fs::File::create(path)?;
    f.write_all(&h)?;
    f.write_all(&values_to_bytes(&field.data))?;
    Ok(())
}

pub fn read_field(path: &Path) -> Result<(DumpHeader, Field)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < HEADER || &bytes[..8] != FIELD_MAGIC {
        return Err(Error::Dump(format!("{} is not a field dump", path.display())));
    }
    let version = u32_at(&bytes, 8);
    if version != VERSION {
        return Err(Error::Dump(format!("unsupported dump version {version}")));
    }
    let tag = u32_at(&bytes, 12);
    let repr = Repr::from_tag(tag).ok_or_else(|| Error::Dump(format!("unknown representation tag {tag}")))?;
    let header = DumpHeader {
        version,
        repr,
        grid_hash: u64_at(&bytes, 16),
        spatial_hash: u64_at(&bytes, 24),
        n_y: u64_at(&bytes, 32),
        n_v: u64_at(&bytes, 40),
    };
    let n = (header.n_y * header.n_v) as usize;
    if bytes.len() != HEADER + 8 * n {
        return Err(Error::Dump(format!(
            "expected {} values, file holds {} bytes of data",
            n,
            bytes.len() - HEADER
        )));
    }
    let field = Field {
        repr,
        n_y: header.n_y as usize,
        n_v: header.n_v as usize,
        data: bytes_to_values(&bytes[HEADER..]),
    };
    Ok((header, field))
}

/// Content key of a raw K matrix: grid, kernel amplitude, angular rule, format version.
pub fn kernel_key(grid: &VelocityGrid, spec: &CollisionKernelSpec) -> String {
    let mut h = Sha256::new();
    h.update(b"raw-k");
    h.update(VERSION.to_le_bytes());
    h.update(grid.hash().to_le_bytes());
    h.update(spec.b_amp.to_bits().to_le_bytes());
    h.update((spec.n_polar as u64).to_le_bytes());
    h.update((spec.n_azimuth as u64).to_le_bytes());
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}

/// Directory from the environment, if set and nonempty.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).filter(|s| !s.is_empty()).map(PathBuf::from)
}

pub fn kernel_cache_path(dir: &Path, grid: &VelocityGrid, spec: &CollisionKernelSpec) -> PathBuf {
    dir.join(format!("k_{}.bin", kernel_key(grid, spec)))
}

pub fn write_kernel(dir: &Path, grid: &VelocityGrid, spec: &CollisionKernelSpec, k: &[f64]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = kernel_cache_path(dir, grid, spec);
    let mut h = [0u8; HEADER];
    put(&mut h, 0, KERNEL_MAGIC);
    put(&mut h, 8, &VERSION.to_le_bytes());
    put(&mut h, 16, &grid.hash().to_le_bytes());
    put(&mut h, 24, &spec.b_amp.to_le_bytes());
    put(&mut h, 32, &(spec.n_polar as u64).to_le_bytes());
    put(&mut h, 40, &(spec.n_azimuth as u64).to_le_bytes());
    put(&mut h, 48, &(grid.len() as u64).to_le_bytes());
    // write then rename so a concurrent reader never sees a partial file
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&h)?;
    f.write_all(&values_to_bytes(k))?;
    drop(f);
    fs::rename(&tmp, &path)?;
    Ok(path)
}

/// Cached raw K, `Ok(None)` when absent; a header mismatch is an error.
pub fn read_kernel(dir: &Path, grid: &VelocityGrid, spec: &CollisionKernelSpec) -> Result<Option<Vec<f64>>> {
    let path = kernel_cache_path(dir, grid, spec);
    let mut bytes = Vec::new();
    match fs::File::open(&path) {
        Ok(mut f) => f.read_to_end(&mut bytes)?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.into()),
    };
    if bytes.len() < HEADER || &bytes[..8] != KERNEL_MAGIC {
        return Err(Error::Cache(format!("{} is not a kernel cache file", path.display())));
    }
    let ok = u32_at(&bytes, 8) == VERSION
        && u64_at(&bytes, 16) == grid.hash()
        && f64::from_bits(u64_at(&bytes, 24)) == spec.b_amp
        && u64_at(&bytes, 32) == spec.n_polar as u64
        && u64_at(&bytes, 40) == spec.n_azimuth as u64
        && u64_at(&bytes, 48) == grid.len() as u64;
    let nv = grid.len();
    if !ok || bytes.len() != HEADER + 8 * nv * nv {
        return Err(Error::Cache(format!("{} does not match the requested grid and kernel", path.display())));
    }
    Ok(Some(bytes_to_values(&bytes[HEADER..])))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        let f = Field::from_fn(Repr::CaflischRaw, 3, 8, |j, k| (j * 8 + k) as f64 * 0.1 - 1.0);
        write_field(&p, &f, 42, 7).unwrap();
        let (h, g) = read_field(&p).unwrap();
        assert_eq!(g, f);
        assert_eq!((h.grid_hash, h.spatial_hash, h.repr), (42, 7, Repr::CaflischRaw));
        assert_eq!(fs::metadata(&p).unwrap().len(), 64 + 8 * 24);
    }

    #[test]
    fn kernel_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let g = VelocityGrid::new(4, 2.0).unwrap();
        let s = CollisionKernelSpec::new(0.2, 2, 4).unwrap();
        assert!(read_kernel(dir.path(), &g, &s).unwrap().is_none());
        let k: Vec<f64> = (0..g.len() * g.len()).map(|i| i as f64).collect();
        write_kernel(dir.path(), &g, &s, &k).unwrap();
        assert_eq!(read_kernel(dir.path(), &g, &s).unwrap().unwrap(), k);
        let s2 = CollisionKernelSpec::new(0.3, 2, 4).unwrap();
        assert_ne!(kernel_key(&g, &s), kernel_key(&g, &s2));
    }
}
