//! `PCB1` binary container: magic, u32 cloud count, then per cloud an i32
//! label (-1 when absent), u32 point count and the coordinates as
//! little-endian f64 triples.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

pub const MAGIC: &[u8; 4] = b"PCB1";

pub fn write_pcb<W: Write>(w: &mut W, clouds: &[PointCloud]) -> Result<()> {
    let count = u32::try_from(clouds.len())
        .map_err(|_| Error::Format("too many clouds for PCB1".into()))?;
    w.write_all(MAGIC)?;
    w.write_all(&count.to_le_bytes())?;
    for c in clouds {
        let label = match c.label {
            None => -1i32,
            Some(l) => i32::try_from(l)
                .map_err(|_| Error::Format(format!("label {l} does not fit PCB1")))?,
        };
        let n =
            u32::try_from(c.len()).map_err(|_| Error::Format("cloud too large for PCB1".into()))?;
        w.write_all(&label.to_le_bytes())?;
        w.write_all(&n.to_le_bytes())?;
        for p in &c.points {
            for v in p {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => {
            Error::Format(format!("truncated PCB1 data reading {what}"))
        }
        _ => Error::Io(e),
    })?;
    Ok(b)
}

pub fn read_pcb<R: Read>(r: &mut R) -> Result<Vec<PointCloud>> {
    if &read_exact::<_, 4>(r, "magic")? != MAGIC {
        return Err(Error::Format("not a PCB1 container (bad magic)".into()));
    }
    let count = u32::from_le_bytes(read_exact(r, "cloud count")?) as usize;
    let mut clouds = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let label = i32::from_le_bytes(read_exact(r, "label")?);
        let label = match label {
            -1 => None,
            l if l >= 0 => Some(l as usize),
            l => return Err(Error::Format(format!("cloud {i}: invalid label {l}"))),
        };
        let n = u32::from_le_bytes(read_exact(r, "point count")?) as usize;
        let mut points = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let mut p = [0.0; 3];
            for v in &mut p {
                *v = f64::from_le_bytes(read_exact(r, "coordinates")?);
            }
            points.push(p);
        }
        clouds.push(
            PointCloud::new(points, label).map_err(|e| Error::Format(format!("cloud {i}: {e}")))?,
        );
    }
    Ok(clouds)
}

pub fn save_pcb(path: &Path, clouds: &[PointCloud]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pcb(&mut w, clouds)?;
    w.flush()?;
    Ok(())
}

pub fn load_pcb(path: &Path) -> Result<Vec<PointCloud>> {
    read_pcb(&mut BufReader::new(File::open(path)?))
}
