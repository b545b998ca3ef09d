//! PNG encoding and decoding: RGB images, indexed label maps, greyscale soft
//! masks, and side-by-side montages.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::imageops::FilterType;

use crate::error::{Error, Result};

/// Fixed label palette; index `k` is drawn in `PALETTE[k % 16]`.
pub const PALETTE: [[u8; 3]; 16] = [
    [32, 32, 32],
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
    [250, 190, 212],
    [0, 128, 128],
    [220, 190, 255],
    [170, 110, 40],
    [128, 0, 0],
    [170, 255, 195],
];

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn encode(
    path: &Path,
    width: u32,
    height: u32,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let w = create(path)?;
    let mut enc = png::Encoder::new(w, width, height);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let fail = |e: png::EncodingError| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(fail)?;
    writer.write_image_data(data).map_err(fail)?;
    writer.finish().map_err(fail)
}

pub fn write_rgb(path: &Path, width: u32, height: u32, rgb: &[u8]) -> Result<()> {
    encode(path, width, height, png::ColorType::Rgb, None, rgb)
}

pub fn write_gray(path: &Path, width: u32, height: u32, gray: &[u8]) -> Result<()> {
    encode(path, width, height, png::ColorType::Grayscale, None, gray)
}

/// 8-bit indexed PNG with the fixed [`PALETTE`].
pub fn write_indexed(path: &Path, width: u32, height: u32, labels: &[u8]) -> Result<()> {
    let palette: Vec<u8> = (0..256).flat_map(|i| PALETTE[i % PALETTE.len()]).collect();
    encode(path, width, height, png::ColorType::Indexed, Some(palette), labels)
}

fn decode_err(path: &Path, reason: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Decode an RGB PNG, centre-crop to a square, resize to `size`; HWC bytes.
pub fn read_rgb_square(path: &Path, size: usize) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| decode_err(path, e))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let cropped = image::imageops::crop_imm(&img, (w - side) / 2, (h - side) / 2, side, side).to_image();
    let out = if side as usize == size {
        cropped
    } else {
        image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(out.into_raw())
}

/// Decode a label map (indexed or 8-bit greyscale PNG), centre-crop,
/// nearest-neighbour resize to `size`.
pub fn read_labels_square(path: &Path, size: usize) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| decode_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(decode_err(
            path,
            format!("label maps must be 8-bit indexed or greyscale, got {:?} {:?}", info.color_type, info.bit_depth),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = &buf[..w * h];
    let side = w.min(h);
    let (ox, oy) = ((w - side) / 2, (h - side) / 2);
    let mut out = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            let sx = ox + x * side / size;
            let sy = oy + y * side / size;
            out[y * size + x] = data[sy * w + sx];
        }
    }
    Ok(out)
}

/// Label map rendered through the palette, HWC bytes.
pub fn colorize(labels: &[u8]) -> Vec<u8> {
    labels
        .iter()
        .flat_map(|&l| PALETTE[l as usize % PALETTE.len()])
        .collect()
}

/// Grid of square RGB tiles: one row per entry, tiles left to right, with a
/// one-pixel gap.
pub fn write_montage(path: &Path, tile: usize, rows: &[Vec<Vec<u8>>]) -> Result<()> {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    if rows.is_empty() || cols == 0 {
        return Err(Error::config("montage", "nothing to draw"));
    }
    let gap = 1;
    let width = cols * tile + (cols - 1) * gap;
    let height = rows.len() * tile + (rows.len() - 1) * gap;
    let mut canvas = vec![255u8; width * height * 3];
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            if img.len() != tile * tile * 3 {
                return Err(Error::Shape {
                    what: "montage tile".into(),
                    expected: vec![tile, tile, 3],
                    got: vec![img.len()],
                });
            }
            let (x0, y0) = (ci * (tile + gap), ri * (tile + gap));
            for y in 0..tile {
                let dst = ((y0 + y) * width + x0) * 3;
                canvas[dst..dst + tile * 3].copy_from_slice(&img[y * tile * 3..(y + 1) * tile * 3]);
            }
        }
    }
    write_rgb(path, width as u32, height as u32, &canvas)
}
