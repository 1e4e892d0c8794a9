use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::error::{check_shape, Error, Result};
use crate::scene_model::{ColorImage, DepthImage, Grid, MaskImage};

/// 16-bit depth PNG units per meter.
pub const DEPTH_SCALE: f64 = 5000.0;

fn dims_u32(w: usize, h: usize) -> Result<(u32, u32)> {
    match (u32::try_from(w), u32::try_from(h)) {
        (Ok(w), Ok(h)) => Ok((w, h)),
        _ => Err(Error::Format(format!("image {w}x{h} too large"))),
    }
}

pub fn color_to_rgb8(img: &ColorImage) -> Result<RgbImage> {
    let (w, h) = dims_u32(img.width(), img.height())?;
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    Ok(RgbImage::from_fn(w, h, |x, y| {
        let c = img.get(x as usize, y as usize);
        image::Rgb([q(c[0]), q(c[1]), q(c[2])])
    }))
}

pub fn write_color_png(path: impl AsRef<Path>, img: &ColorImage) -> Result<()> {
    color_to_rgb8(img)?.save(path)?;
    Ok(())
}

pub fn read_color_png(path: impl AsRef<Path>) -> Result<ColorImage> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0]
    }))
}

/// Masks are stored as 0 / 255.
pub fn write_mask_png(path: impl AsRef<Path>, mask: &MaskImage) -> Result<()> {
    let (w, h) = dims_u32(mask.width(), mask.height())?;
    GrayImage::from_fn(w, h, |x, y| Luma([if *mask.get(x as usize, y as usize) { 255 } else { 0 }]))
        .save(path)?;
    Ok(())
}

/// Any non-zero value reads as dynamic.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<MaskImage> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| img.get_pixel(x as u32, y as u32).0[0] > 0))
}

/// Depth in meters times 5000 as 16-bit. Non-positive or invalid depth is stored
/// as 0; depth beyond the 16-bit range is an error.
pub fn write_depth_png(path: impl AsRef<Path>, depth: &DepthImage) -> Result<()> {
    let (w, h) = dims_u32(depth.width(), depth.height())?;
    let mut raw = Vec::with_capacity(depth.len());
    for &d in depth.data() {
        let v = if d.is_finite() && d > 0.0 { (d * DEPTH_SCALE).round() } else { 0.0 };
        if v > u16::MAX as f64 {
            return Err(Error::Format(format!("depth {d} m exceeds the 16-bit range")));
        }
        raw.push(v as u16);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w, h, raw).expect("buffer sized to image");
    img.save(path)?;
    Ok(())
}

pub fn read_depth_png(path: impl AsRef<Path>) -> Result<DepthImage> {
    let dynimg = image::open(path)?;
    if !matches!(dynimg, image::DynamicImage::ImageLuma16(_)) {
        return Err(Error::Format("depth PNG must be 16-bit grayscale".into()));
    }
    let img = dynimg.to_luma16();
    let (w, h) = img.dimensions();
    Ok(Grid::from_fn(w as usize, h as usize, |x, y| {
        img.get_pixel(x as u32, y as u32).0[0] as f64 / DEPTH_SCALE
    }))
}

pub(crate) fn expect_dims<T>(what: &str, expected: (usize, usize), g: &Grid<T>) -> Result<()> {
    check_shape(expected, g.dims()).map_err(|_| {
        Error::Format(format!("{what} is {:?}, expected {expected:?}", g.dims()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_is_value_exact_to_a_fifth_of_a_millimeter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        let d = Grid::from_fn(9, 7, |x, y| 0.5 + 0.3137 * x as f64 + 0.01171 * y as f64);
        write_depth_png(&path, &d).unwrap();
        let back = read_depth_png(&path).unwrap();
        for (a, b) in back.data().iter().zip(d.data()) {
            assert!((a - b).abs() <= 0.5 / DEPTH_SCALE + 1e-12);
        }
        let exact = d.map(|v| (v * DEPTH_SCALE).round() / DEPTH_SCALE);
        write_depth_png(&path, &exact).unwrap();
        assert_eq!(read_depth_png(&path).unwrap(), exact);
    }

    #[test]
    fn depth_out_of_range_and_invalid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.png");
        assert!(write_depth_png(&path, &Grid::new(2, 2, 20.0)).is_err());
        write_depth_png(&path, &Grid::from_vec(2, 1, vec![f64::NAN, -1.0])).unwrap();
        assert_eq!(read_depth_png(&path).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn color_and_mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = Grid::from_fn(5, 4, |x, y| [x as f64 / 255.0, y as f64 * 10.0 / 255.0, 1.0]);
        write_color_png(dir.path().join("c.png"), &c).unwrap();
        let back = read_color_png(dir.path().join("c.png")).unwrap();
        for (a, b) in back.data().iter().zip(c.data()) {
            for i in 0..3 {
                assert!((a[i] - b[i]).abs() < 1e-12);
            }
        }
        let m = Grid::from_fn(5, 4, |x, y| (x + y) % 3 == 0);
        write_mask_png(dir.path().join("m.png"), &m).unwrap();
        assert_eq!(read_mask_png(dir.path().join("m.png")).unwrap(), m);
    }

    #[test]
    fn eight_bit_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_mask_png(dir.path().join("m.png"), &Grid::new(2, 2, true)).unwrap();
        assert!(matches!(read_depth_png(dir.path().join("m.png")), Err(Error::Format(_))));
    }
}
