//! Reader for the big-endian IDX files MNIST ships in.

use crate::error::LdpError;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    /// magic 0x00000803: u8 payload, 3 dimensions
    Images,
    /// magic 0x00000801: u8 payload, 1 dimension
    Labels,
}

#[derive(Clone, Debug)]
pub struct IdxData {
    pub kind: IdxKind,
    pub dims: Vec<usize>,
    /// Images scaled to [0,1]; labels kept as raw values.
    pub data: Tensor,
    /// Raw payload bytes, for consumers that need the quantized values.
    pub raw: Vec<u8>,
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxData, LdpError> {
    let fail = |offset: usize, message: String| LdpError::Format { offset, message };
    if bytes.len() < 4 {
        return Err(fail(bytes.len(), "truncated before magic".into()));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let (kind, ndims) = match magic {
        0x0000_0803 => (IdxKind::Images, 3),
        0x0000_0801 => (IdxKind::Labels, 1),
        other => return Err(fail(0, format!("bad IDX magic {:#010x}", other))),
    };
    let header_len = 4 + 4 * ndims;
    if bytes.len() < header_len {
        return Err(fail(bytes.len(), "truncated inside dimension header".into()));
    }
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        let at = 4 + 4 * d;
        dims.push(u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize);
    }
    let numel: usize = dims.iter().product();
    if bytes.len() < header_len + numel {
        return Err(fail(bytes.len(), format!("payload needs {} bytes", numel)));
    }
    if bytes.len() > header_len + numel {
        return Err(fail(header_len + numel, "trailing bytes after payload".into()));
    }
    let raw = bytes[header_len..].to_vec();
    let data = match kind {
        IdxKind::Images => Tensor::new(dims.clone(), raw.iter().map(|&b| b as f64 / 255.0).collect()),
        IdxKind::Labels => Tensor::new(dims.clone(), raw.iter().map(|&b| b as f64).collect()),
    };
    Ok(IdxData { kind, dims, data, raw })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_images(images: &[Vec<u8>], h: usize, w: usize) -> Vec<u8> {
        let mut out = vec![0, 0, 8, 3];
        out.extend_from_slice(&(images.len() as u32).to_be_bytes());
        out.extend_from_slice(&(h as u32).to_be_bytes());
        out.extend_from_slice(&(w as u32).to_be_bytes());
        for img in images {
            assert_eq!(img.len(), h * w);
            out.extend_from_slice(img);
        }
        out
    }

    #[test]
    fn parses_images_per_published_layout() {
        // 2 images of 28x28: header magic 0x803, dims 2,28,28, 1568 bytes
        let imgs: Vec<Vec<u8>> = vec![vec![7u8; 784], (0..784).map(|i| (i % 256) as u8).collect()];
        let bytes = idx_images(&imgs, 28, 28);
        assert_eq!(bytes.len(), 16 + 1568);
        let parsed = parse_idx(&bytes).unwrap();
        assert_eq!(parsed.kind, IdxKind::Images);
        assert_eq!(parsed.dims, vec![2, 28, 28]);
        assert_eq!(parsed.data.shape(), &[2, 28, 28]);
        assert!((parsed.data.data()[0] - 7.0 / 255.0).abs() < 1e-12);
        assert!(parsed.data.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn empty_label_file() {
        let bytes = [0u8, 0, 8, 1, 0, 0, 0, 0];
        let parsed = parse_idx(&bytes).unwrap();
        assert_eq!(parsed.kind, IdxKind::Labels);
        assert_eq!(parsed.dims, vec![0]);
        assert_eq!(parsed.data.numel(), 0);
    }

    #[test]
    fn bad_magic_is_format_error() {
        let bytes = 0xDEADBEEFu32.to_be_bytes();
        match parse_idx(&bytes) {
            Err(LdpError::Format { offset: 0, message }) => assert!(message.contains("magic")),
            other => panic!("expected format error, got {:?}", other.err()),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut bytes = idx_images(&[vec![1u8; 4]], 2, 2);
        bytes.truncate(bytes.len() - 2);
        match parse_idx(&bytes) {
            Err(LdpError::Format { offset, .. }) => assert_eq!(offset, bytes.len()),
            other => panic!("expected format error, got {:?}", other.err()),
        }
    }
}
