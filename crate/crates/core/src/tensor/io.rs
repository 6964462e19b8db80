//! Flat binary tensor format: four little-endian `u32` extents followed by
//! `N·C·H·W` little-endian `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const HEADER_LEN: usize = 16;

pub fn write_tensor_to<T: Scalar, W: Write>(tensor: &Tensor<T>, mut out: W) -> std::io::Result<()> {
    for &e in &tensor.shape() {
        let e = u32::try_from(e).map_err(|_| std::io::Error::other("extent exceeds u32"))?;
        out.write_all(&e.to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&v.as_f64().to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor_from<T: Scalar, R: Read>(mut input: R) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    input
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io("<reader>", e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            expected: format!("at least {HEADER_LEN} header bytes"),
            actual: format!("{} bytes", bytes.len()),
        });
    }
    let mut shape = [0usize; 4];
    for (i, s) in shape.iter_mut().enumerate() {
        let b: [u8; 4] = bytes[4 * i..4 * i + 4].try_into().unwrap();
        *s = u32::from_le_bytes(b) as usize;
    }
    let count: usize = shape.iter().product();
    let expected = HEADER_LEN + 8 * count;
    if bytes.len() != expected {
        return Err(Error::Format {
            expected: format!("{expected} bytes for shape {shape:?}"),
            actual: format!("{} bytes", bytes.len()),
        });
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn write_tensor<T: Scalar>(tensor: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_tensor_to(tensor, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor_from(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_little_endian_extents() {
        let t = Tensor::<f64>::from_vec([1, 2, 1, 1], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 16);
        assert_eq!(
            &buf[..16],
            &[1, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]
        );
        assert_eq!(&buf[16..24], &1.0f64.to_le_bytes());
        let back: Tensor<f64> = read_tensor_from(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::<f64>::ones([1, 1, 2, 2]);
        let mut buf = Vec::new();
        write_tensor_to(&t, &mut buf).unwrap();
        buf.pop();
        assert!(matches!(
            read_tensor_from::<f64, _>(&buf[..]),
            Err(Error::Format { .. })
        ));
    }
}
