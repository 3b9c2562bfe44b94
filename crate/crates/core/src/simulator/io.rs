use std::io::Write;
use std::path::Path;

use super::{SimError, Trajectory, TrajectoryPoint};
use crate::geometry::Raster;

/// Reads a `P5`/`Pf` header: magic, then three whitespace-separated tokens.
fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Vec<&'a str>, &'a [u8]), SimError> {
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(SimError::format(path, "truncated header"));
        }
        let tok = std::str::from_utf8(&bytes[start..pos]).map_err(|_| SimError::format(path, "non-ASCII header"))?;
        tokens.push(tok);
    }
    // exactly one whitespace byte separates the header from the payload
    Ok((tokens, &bytes[(pos + 1).min(bytes.len())..]))
}

fn parse_dims(tokens: &[&str], path: &Path) -> Result<(usize, usize), SimError> {
    let w = tokens[1].parse().map_err(|_| SimError::format(path, "bad width"))?;
    let h = tokens[2].parse().map_err(|_| SimError::format(path, "bad height"))?;
    if w == 0 || h == 0 {
        return Err(SimError::format(path, "empty image"));
    }
    Ok((w, h))
}

/// Little-endian float32 PFM; rows are stored bottom to top.
pub fn write_pfm(path: &Path, img: &Raster) -> Result<(), SimError> {
    let mut buf = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            buf.extend((img.get(x, y) as f32).to_le_bytes());
        }
    }
    std::fs::write(path, buf).map_err(|e| SimError::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<Raster, SimError> {
    let bytes = std::fs::read(path).map_err(|e| SimError::io(path, e))?;
    let (tokens, payload) = split_header(&bytes, path)?;
    if tokens[0] != "Pf" {
        return Err(SimError::format(path, "not a grayscale PFM"));
    }
    let (w, h) = parse_dims(&tokens, path)?;
    let scale: f64 = tokens[3].parse().map_err(|_| SimError::format(path, "bad scale"))?;
    if payload.len() != w * h * 4 {
        return Err(SimError::format(path, "payload size mismatch"));
    }
    let little = scale < 0.0;
    let mut img = Raster::zeros(w, h);
    for (i, c) in payload.chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (x, row) = (i % w, i / w);
        img.set(x, h - 1 - row, v as f64);
    }
    Ok(img)
}

/// 8-bit PGM with 255 for nonzero mask pixels.
pub fn write_pgm(path: &Path, mask: &Raster) -> Result<(), SimError> {
    let mut buf = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    buf.extend(mask.data.iter().map(|&v| if v != 0.0 { 255u8 } else { 0 }));
    std::fs::write(path, buf).map_err(|e| SimError::io(path, e))
}

/// Reads a PGM mask as `{0, 1}`; any nonzero gray level counts as in-plane.
pub fn read_pgm(path: &Path) -> Result<Raster, SimError> {
    let bytes = std::fs::read(path).map_err(|e| SimError::io(path, e))?;
    let (tokens, payload) = split_header(&bytes, path)?;
    if tokens[0] != "P5" {
        return Err(SimError::format(path, "not a binary PGM"));
    }
    let (w, h) = parse_dims(&tokens, path)?;
    if tokens[3] != "255" {
        return Err(SimError::format(path, "only 8-bit PGM is supported"));
    }
    if payload.len() != w * h {
        return Err(SimError::format(path, "payload size mismatch"));
    }
    Ok(Raster::new(w, h, payload.iter().map(|&b| if b != 0 { 1.0 } else { 0.0 }).collect()))
}

pub fn write_trajectory(path: &Path, traj: &[TrajectoryPoint]) -> Result<(), SimError> {
    let mut out = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for p in traj {
            w.serialize(p).map_err(|e| SimError::format(path, e.to_string()))?;
        }
        w.flush().map_err(|e| SimError::io(path, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| SimError::io(path, e))?;
    f.write_all(&out).map_err(|e| SimError::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, SimError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| SimError::format(path, e.to_string()))?;
    let headers = r.headers().map_err(|e| SimError::format(path, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["t", "x", "y", "vx", "vy"] {
        return Err(SimError::format(path, "expected header t,x,y,vx,vy"));
    }
    let traj: Trajectory = r
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| SimError::format(path, e.to_string()))?;
    if traj.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(SimError::format(path, "timestamps are not strictly increasing"));
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn pfm_round_trip_and_row_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pfm");
        let mut rng = Rng::new(1, 1);
        let img = Raster::from_fn(5, 3, |_, _| rng.normal() as f32 as f64);
        write_pfm(&path, &img).unwrap();
        assert_eq!(read_pfm(&path).unwrap(), img);
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"Pf\n5 3\n-1.0\n"));
        // first stored row is the bottom image row
        let first = f32::from_le_bytes(bytes[12..16].try_into().unwrap());
        assert_eq!(first as f64, img.get(0, 2));
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Raster::from_fn(4, 2, |x, y| ((x + y) % 2) as f64);
        write_pgm(&path, &mask).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), mask);
        std::fs::write(&path, b"P5\n4 2\n255\n\x00").unwrap();
        assert!(matches!(read_pgm(&path), Err(SimError::Format { .. })));
    }

    #[test]
    fn trajectory_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let traj = vec![
            TrajectoryPoint { t: 0.0, x: 1.0, y: 2.0, vx: 0.1, vy: -0.2 },
            TrajectoryPoint { t: 0.1, x: 1.1, y: 1.9, vx: 0.1, vy: -0.2 },
        ];
        write_trajectory(&path, &traj).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("t,x,y,vx,vy\n"));
        assert_eq!(read_trajectory(&path).unwrap(), traj);
        write_trajectory(&path, &[traj[1], traj[0]]).unwrap();
        assert!(read_trajectory(&path).is_err());
        assert!(matches!(read_trajectory(&dir.path().join("missing.csv")), Err(SimError::Format { .. })));
    }
}
