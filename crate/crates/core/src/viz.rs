//! Static visualization: binary PPM (P6) images of inputs, posterior
//! assignment maps, and per-component reconstructions.

use crate::error::LdpError;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

/// Fixed component palette; the background component renders black.
pub const PALETTE: [[u8; 3]; 7] = [
    [230, 50, 50],   // red
    [60, 180, 60],   // green
    [70, 90, 230],   // blue
    [230, 200, 40],  // yellow
    [200, 60, 200],  // magenta
    [50, 200, 200],  // cyan
    [240, 140, 40],  // orange
];

/// Write a binary P6 file: header "P6\n<W> <H>\n255\n" then 3*W*H bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<(), LdpError> {
    assert_eq!(rgb.len(), 3 * width * height, "rgb payload size mismatch");
    let mut out = Vec::with_capacity(20 + rgb.len());
    write!(out, "P6\n{} {}\n255\n", width, height).expect("in-memory write");
    out.extend_from_slice(rgb);
    std::fs::write(path, out).map_err(|e| LdpError::io(path, e))
}

/// Grayscale image (intensities in [0,1], clamped) as RGB bytes.
pub fn gray_rgb(img: &Tensor) -> Vec<u8> {
    img.data()
        .iter()
        .flat_map(|&v| {
            let b = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [b, b, b]
        })
        .collect()
}

/// Assignment map colored by the fixed palette; component `k-1` (the
/// background) renders black.
pub fn assignment_rgb(labels: &[u8], k: usize) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| {
            if l as usize + 1 == k {
                [0, 0, 0]
            } else {
                PALETTE[l as usize % PALETTE.len()]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_header_and_payload() {
        let dir = std::env::temp_dir().join("ldp_viz_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ppm");
        let rgb: Vec<u8> = (0..12).map(|v| v as u8).collect();
        write_ppm(&path, 2, 2, &rgb).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n2 2\n255\n"));
        assert_eq!(&bytes[b"P6\n2 2\n255\n".len()..], &rgb[..]);
        std::fs::remove_file(&path).unwrap();
    }

    #[test]
    fn background_component_renders_black() {
        let rgb = assignment_rgb(&[0, 1, 2], 3);
        assert_eq!(&rgb[0..3], &PALETTE[0]);
        assert_eq!(&rgb[3..6], &PALETTE[1]);
        assert_eq!(&rgb[6..9], &[0, 0, 0]);
    }

    #[test]
    fn gray_clamps_out_of_range() {
        let rgb = gray_rgb(&Tensor::vector(vec![-0.5, 0.5, 1.5]));
        assert_eq!(rgb, vec![0, 0, 0, 128, 128, 128, 255, 255, 255]);
    }
}
