use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};

use crate::data::{BinaryMask, ImageTensor, PairedSample};
use crate::error::{Error, Result};
use crate::metrics::mask_as_image;

/// Height of the caption strip under each grid row, when any cell has a caption.
pub const CAPTION_BAND: usize = 7;
const GLYPH_W: usize = 3;
const GLYPH_H: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryCell {
    pub image: ImageTensor,
    pub caption: Option<String>,
}

impl GalleryCell {
    pub fn new(image: ImageTensor) -> Self {
        Self { image, caption: None }
    }

    pub fn mask(m: &BinaryMask) -> Self {
        Self::new(mask_as_image(m))
    }

    /// Image and mask side by side.
    pub fn pair(s: &PairedSample) -> Self {
        let (h, w) = (s.image.height(), s.image.width());
        let img = to_rgb(&s.image);
        let m = to_rgb(&mask_as_image(&s.mask));
        let mut data = vec![0f32; 3 * h * 2 * w];
        for c in 0..3 {
            for y in 0..h {
                let row = (c * h + y) * 2 * w;
                data[row..row + w].copy_from_slice(&img.data()[(c * h + y) * w..][..w]);
                data[row + w..row + 2 * w].copy_from_slice(&m.data()[(c * h + y) * w..][..w]);
            }
        }
        Self::new(ImageTensor::new(3, h, 2 * w, data).expect("sizes agree"))
    }

    pub fn with_caption(mut self, text: impl Into<String>) -> Self {
        self.caption = Some(text.into());
        self
    }
}

fn to_rgb(img: &ImageTensor) -> ImageTensor {
    if img.channels() == 3 {
        return img.clone();
    }
    let plane = img.data();
    ImageTensor::new(3, img.height(), img.width(), plane.repeat(3)).expect("sizes agree")
}

fn glyph(ch: char) -> [&'static str; GLYPH_H] {
    match ch.to_ascii_uppercase() {
        ' ' => ["...", "...", "...", "...", "..."],
        '0' => ["###", "#.#", "#.#", "#.#", "###"],
        '1' => [".#.", "##.", ".#.", ".#.", "###"],
        '2' => ["###", "..#", "###", "#..", "###"],
        '3' => ["###", "..#", ".##", "..#", "###"],
        '4' => ["#.#", "#.#", "###", "..#", "..#"],
        '5' => ["###", "#..", "###", "..#", "###"],
        '6' => ["###", "#..", "###", "#.#", "###"],
        '7' => ["###", "..#", "..#", ".#.", ".#."],
        '8' => ["###", "#.#", "###", "#.#", "###"],
        '9' => ["###", "#.#", "###", "..#", "###"],
        '.' => ["...", "...", "...", "...", ".#."],
        '-' => ["...", "...", "###", "...", "..."],
        ':' => ["...", ".#.", "...", ".#.", "..."],
        '=' => ["...", "###", "...", "###", "..."],
        '%' => ["#.#", "..#", ".#.", "#..", "#.#"],
        '_' => ["...", "...", "...", "...", "###"],
        'A' => [".#.", "#.#", "###", "#.#", "#.#"],
        'B' => ["##.", "#.#", "##.", "#.#", "##."],
        'C' => [".##", "#..", "#..", "#..", ".##"],
        'D' => ["##.", "#.#", "#.#", "#.#", "##."],
        'E' => ["###", "#..", "##.", "#..", "###"],
        'F' => ["###", "#..", "##.", "#..", "#.."],
        'G' => [".##", "#..", "#.#", "#.#", ".##"],
        'H' => ["#.#", "#.#", "###", "#.#", "#.#"],
        'I' => ["###", ".#.", ".#.", ".#.", "###"],
        'J' => ["..#", "..#", "..#", "#.#", ".#."],
        'K' => ["#.#", "#.#", "##.", "#.#", "#.#"],
        'L' => ["#..", "#..", "#..", "#..", "###"],
        'M' => ["#.#", "###", "###", "#.#", "#.#"],
        'N' => ["##.", "#.#", "#.#", "#.#", "#.#"],
        'O' => [".#.", "#.#", "#.#", "#.#", ".#."],
        'P' => ["##.", "#.#", "##.", "#..", "#.."],
        'Q' => [".#.", "#.#", "#.#", "##.", ".##"],
        'R' => ["##.", "#.#", "##.", "#.#", "#.#"],
        'S' => [".##", "#..", ".#.", "..#", "##."],
        'T' => ["###", ".#.", ".#.", ".#.", ".#."],
        'U' => ["#.#", "#.#", "#.#", "#.#", "###"],
        'V' => ["#.#", "#.#", "#.#", "#.#", ".#."],
        'W' => ["#.#", "#.#", "###", "###", "#.#"],
        'X' => ["#.#", "#.#", ".#.", "#.#", "#.#"],
        'Y' => ["#.#", "#.#", ".#.", ".#.", ".#."],
        'Z' => ["###", "..#", ".#.", "#..", "###"],
        _ => ["###", "###", "###", "###", "###"],
    }
}

/// Draws `text` with its top-left corner at (y0, x0), clipped to `max_x`.
fn draw_text(put: &mut impl FnMut(usize, usize), text: &str, y0: usize, x0: usize, max_x: usize) {
    for (k, ch) in text.chars().enumerate() {
        let gx = x0 + k * (GLYPH_W + 1);
        if gx + GLYPH_W > max_x {
            break;
        }
        for (dy, row) in glyph(ch).iter().enumerate() {
            for (dx, b) in row.bytes().enumerate() {
                if b == b'#' {
                    put(y0 + dy, gx + dx);
                }
            }
        }
    }
}

/// Output size `(height, width)` of a grid of `h x w` cells.
pub fn gallery_size(rows: usize, cols: usize, h: usize, w: usize, captions: bool) -> (usize, usize) {
    let band = if captions { CAPTION_BAND } else { 0 };
    (rows * (h + band), cols * w)
}

/// Lays `cells` out row-major on a `rows x cols` grid and writes one PNG.
/// Cells must share a size; unused slots stay black. The file is greyscale
/// unless some cell has colour.
pub fn emit_gallery(cells: &[GalleryCell], rows: usize, cols: usize, out: &Path) -> Result<PathBuf> {
    let first = cells.first().ok_or(Error::EmptySet)?;
    if cells.len() > rows * cols {
        return Err(Error::InvalidConfig(format!(
            "{} cells do not fit a {rows}x{cols} grid",
            cells.len()
        )));
    }
    let (h, w) = (first.image.height(), first.image.width());
    if let Some(c) = cells.iter().find(|c| (c.image.height(), c.image.width()) != (h, w)) {
        return Err(Error::shape((h, w), (c.image.height(), c.image.width())));
    }
    let captions = cells.iter().any(|c| c.caption.is_some());
    let (gh, gw) = gallery_size(rows, cols, h, w, captions);
    let rgb = cells.iter().any(|c| c.image.channels() == 3);
    let ch = if rgb { 3 } else { 1 };
    let mut buf = vec![0u8; gh * gw * ch];
    let row_h = h + if captions { CAPTION_BAND } else { 0 };
    for (i, cell) in cells.iter().enumerate() {
        let (oy, ox) = ((i / cols) * row_h, (i % cols) * w);
        let img = if rgb { to_rgb(&cell.image) } else { cell.image.clone() };
        let px = img.to_u8_hwc();
        for y in 0..h {
            let dst = ((oy + y) * gw + ox) * ch;
            buf[dst..dst + w * ch].copy_from_slice(&px[y * w * ch..(y + 1) * w * ch]);
        }
        if let Some(text) = &cell.caption {
            let mut put = |y: usize, x: usize| {
                let o = (y * gw + x) * ch;
                buf[o..o + ch].fill(255);
            };
            draw_text(&mut put, text, oy + h + 1, ox + 1, ox + w);
        }
    }
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (gw32, gh32) = (gw as u32, gh as u32);
    let img = if rgb {
        image::DynamicImage::ImageRgb8(RgbImage::from_raw(gw32, gh32, buf).expect("buffer size"))
    } else {
        image::DynamicImage::ImageLuma8(GrayImage::from_raw(gw32, gh32, buf).expect("buffer size"))
    };
    crate::data::io::save_png(out, img)?;
    Ok(out.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;

    fn masks(n: usize) -> Vec<BinaryMask> {
        (0..n).map(|i| BinaryMask::from_fn(6, 4, |y, x| (y + x + i) % 3 == 0)).collect()
    }

    #[test]
    fn grid_layout_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let cells: Vec<_> = masks(10).iter().map(GalleryCell::mask).collect();
        let p = emit_gallery(&cells, 2, 5, &dir.path().join("g.png")).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.height(), img.width()), (12, 20));
        assert_eq!(img.color(), image::ColorType::L8);
        // cell (1, 2) holds mask 7
        let g = img.to_luma8();
        let m = &masks(10)[7];
        for y in 0..6 {
            for x in 0..4 {
                let v = g.get_pixel(8 + x as u32, 6 + y as u32)[0];
                assert_eq!(v == 255, m.get(y, x));
            }
        }
    }

    #[test]
    fn captions_add_a_band() {
        let dir = tempfile::tempdir().unwrap();
        let cells: Vec<_> = masks(10)
            .iter()
            .enumerate()
            .map(|(i, m)| GalleryCell::mask(m).with_caption(format!("{}", i)))
            .collect();
        let p = emit_gallery(&cells, 2, 5, &dir.path().join("c.png")).unwrap();
        let img = image::open(&p).unwrap().to_luma8();
        assert_eq!((img.height(), img.width()), (2 * (6 + CAPTION_BAND) as u32, 20));
        let lit = (6..6 + CAPTION_BAND as u32).any(|y| (0..4).any(|x| img.get_pixel(x, y)[0] == 255));
        assert!(lit);
    }

    #[test]
    fn pairs_are_rgb_and_twice_as_wide() {
        let dir = tempfile::tempdir().unwrap();
        let s = PairedSample::new(
            ImageTensor::filled(3, 4, 4, 0.0),
            BinaryMask::filled(4, 4, true),
            "a",
            Provenance::Real,
        )
        .unwrap();
        let cells = vec![GalleryCell::pair(&s), GalleryCell::pair(&s)];
        let p = emit_gallery(&cells, 1, 3, &dir.path().join("p.png")).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.height(), img.width()), (4, 24));
        assert_eq!(img.color(), image::ColorType::Rgb8);
    }

    #[test]
    fn rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.png");
        assert!(matches!(emit_gallery(&[], 1, 1, &out), Err(Error::EmptySet)));
        let cells: Vec<_> = masks(3).iter().map(GalleryCell::mask).collect();
        assert!(emit_gallery(&cells, 1, 2, &out).is_err());
        let mixed = vec![GalleryCell::mask(&masks(1)[0]), GalleryCell::mask(&BinaryMask::filled(2, 2, true))];
        assert!(matches!(emit_gallery(&mixed, 1, 2, &out), Err(Error::ShapeMismatch { .. })));
    }
}
