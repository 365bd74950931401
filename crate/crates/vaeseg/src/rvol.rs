//! Raw volume files: a magic line, a single-line JSON header, then the
//! row-major payload. Images store four f32 channels, labels one u8 grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabelVolume, Volume, MODALITIES};
use crate::error::{Error, Result};

const MAGIC: &[u8] = b"RVOL1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    dims: Vec<usize>,
    dtype: String,
    kind: String,
}

fn write_head(out: &mut impl Write, header: &Header) -> Result<()> {
    out.write_all(MAGIC)?;
    let line = serde_json::to_string(header).map_err(|e| Error::Format(e.to_string()))?;
    out.write_all(line.as_bytes())?;
    out.write_all(b"\n")?;
    Ok(())
}

fn read_head(input: &mut impl Read, path: &Path) -> Result<Header> {
    let mut magic = [0u8; 6];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!("{} is not a volume file", path.display())));
    }
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        input.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 4096 {
            return Err(Error::Format(format!("{}: runaway header", path.display())));
        }
    }
    serde_json::from_slice(&line)
        .map_err(|e| Error::Format(format!("{}: bad header: {e}", path.display())))
}

pub fn write_image(path: &Path, volume: &Volume) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        dims: vec![MODALITIES, volume.dims[0], volume.dims[1], volume.dims[2]],
        dtype: "f32le".into(),
        kind: "image".into(),
    };
    write_head(&mut out, &header)?;
    let mut bytes = Vec::with_capacity(volume.data.len() * 4);
    for v in &volume.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Volume> {
    let mut input = BufReader::new(File::open(path)?);
    let header = read_head(&mut input, path)?;
    if header.kind != "image" || header.dtype != "f32le" {
        return Err(Error::Format(format!(
            "{}: expected an f32le image, found kind {:?} dtype {:?}",
            path.display(),
            header.kind,
            header.dtype
        )));
    }
    let [c, d, h, w] = header.dims[..] else {
        return Err(Error::Format(format!(
            "{}: image dims must be rank 4, got {:?}",
            path.display(),
            header.dims
        )));
    };
    if c != MODALITIES {
        return Err(Error::Format(format!(
            "{}: expected {MODALITIES} channels, found {c}",
            path.display()
        )));
    }
    let n = c * d * h * w;
    let mut bytes = vec![0u8; n * 4];
    input.read_exact(&mut bytes)?;
    if input.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Volume::new([d, h, w], data)
}

pub fn write_labels(path: &Path, labels: &LabelVolume) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = Header {
        dims: labels.dims.to_vec(),
        dtype: "u8".into(),
        kind: "labels".into(),
    };
    write_head(&mut out, &header)?;
    out.write_all(&labels.data)?;
    out.flush()?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let mut input = BufReader::new(File::open(path)?);
    let header = read_head(&mut input, path)?;
    if header.kind != "labels" || header.dtype != "u8" {
        return Err(Error::Format(format!(
            "{}: expected a u8 label volume, found kind {:?} dtype {:?}",
            path.display(),
            header.kind,
            header.dtype
        )));
    }
    let [d, h, w] = header.dims[..] else {
        return Err(Error::Format(format!(
            "{}: label dims must be rank 3, got {:?}",
            path.display(),
            header.dims
        )));
    };
    let mut data = vec![0u8; d * h * w];
    input.read_exact(&mut data)?;
    if input.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Format(format!("{}: trailing bytes", path.display())));
    }
    LabelVolume::new([d, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_phantom, Difficulty};

    #[test]
    fn image_and_labels_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let (image, labels) = gen_phantom(3, [16, 24, 16], Difficulty::Medium).unwrap();

        let ip = dir.path().join("case.img.rvol");
        write_image(&ip, &image).unwrap();
        let image2 = read_image(&ip).unwrap();
        assert_eq!(image.dims, image2.dims);
        assert_eq!(image.data, image2.data);

        let lp = dir.path().join("case.lbl.rvol");
        write_labels(&lp, &labels).unwrap();
        let labels2 = read_labels(&lp).unwrap();
        assert_eq!(labels, labels2);
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk");
        std::fs::write(&p, b"GARBAGE\n").unwrap();
        assert!(read_image(&p).is_err());

        let (image, labels) = gen_phantom(1, [16, 16, 16], Difficulty::Low).unwrap();
        let ip = dir.path().join("t.img.rvol");
        write_image(&ip, &image).unwrap();
        let bytes = std::fs::read(&ip).unwrap();
        std::fs::write(&ip, &bytes[..bytes.len() - 7]).unwrap();
        assert!(read_image(&ip).is_err());

        // kind mismatch: labels read as image
        let lp = dir.path().join("t.lbl.rvol");
        write_labels(&lp, &labels).unwrap();
        assert!(read_image(&lp).is_err());
        assert!(read_labels(&ip).is_err());
    }
}
