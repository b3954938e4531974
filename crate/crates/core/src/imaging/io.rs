use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use super::{BinaryMask, FeatureMap, Image, ScoreMap};
use crate::binfmt::{dim_u32, put_f32s, put_u32, ByteReader};
use crate::error::{Error, Result};

const FMAP_MAGIC: &[u8; 4] = b"FMAP";
const FMAP_VERSION: u32 = 1;

fn codec_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Codec {
        path: path.to_path_buf(),
        source,
    }
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Loads a PGM/PNG (or any format the decoder recognizes) as 1 or 3 channels in `[0,1]`.
/// Alpha is dropped; 16-bit inputs are reduced to 8-bit first.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::open(path).map_err(codec_err(path))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let (channels, raw) = if gray {
        (1, img.to_luma8().into_raw())
    } else {
        (3, img.to_rgb8().into_raw())
    };
    let data = raw.into_iter().map(|v| v as f32 / 255.0).collect();
    Image::new(w, h, channels, data)
}

fn write_pgm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let enc = PnmEncoder::new(std::io::BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
    enc.write_image(bytes, width as u32, height as u32, ExtendedColorType::L8)
        .map_err(codec_err(path))
}

/// Writes the luma plane of `image` as binary PGM (P5, maxval 255).
pub fn save_gray_pgm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = image.luma().into_iter().map(to_u8).collect();
    write_pgm(path.as_ref(), image.width(), image.height(), &bytes)
}

/// Writes a 1- or 3-channel image as 8-bit PNG.
pub fn save_png(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = image.data().iter().copied().map(to_u8).collect();
    let color = if image.channels() == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    image::save_buffer(
        path,
        &bytes,
        image.width() as u32,
        image.height() as u32,
        color,
    )
    .map_err(codec_err(path))
}

/// Mask as PGM: 0 stays 0, 1 becomes 255.
pub fn save_mask_pgm(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    write_pgm(path.as_ref(), mask.width(), mask.height(), &bytes)
}

/// Reads a mask PGM; every pixel must be exactly 0 or 255.
pub fn load_mask_pgm(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let img = image::open(path).map_err(codec_err(path))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .enumerate()
        .map(|(idx, v)| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(Error::Data(format!(
                "{}: pixel {idx} has value {other}, masks hold only 0 or 255",
                path.display()
            ))),
        })
        .collect::<Result<Vec<u8>>>()?;
    BinaryMask::new(w, h, data)
}

/// Score map as PGM with `round(score * 255)`; lossy, for inspection.
pub fn save_score_pgm(score: &ScoreMap, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = score.data().iter().copied().map(to_u8).collect();
    write_pgm(path.as_ref(), score.width(), score.height(), &bytes)
}

pub fn encode_fmap(fmap: &FeatureMap) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + fmap.data().len() * 4);
    out.extend_from_slice(FMAP_MAGIC);
    put_u32(&mut out, FMAP_VERSION);
    put_u32(&mut out, dim_u32("fmap", "width", fmap.width())?);
    put_u32(&mut out, dim_u32("fmap", "height", fmap.height())?);
    put_u32(&mut out, dim_u32("fmap", "channels", fmap.channels())?);
    put_f32s(&mut out, fmap.data());
    Ok(out)
}

pub fn decode_fmap(bytes: &[u8]) -> Result<FeatureMap> {
    let mut r = ByteReader::new("fmap", bytes);
    r.expect_magic(FMAP_MAGIC)?;
    r.expect_version(FMAP_VERSION)?;
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let c = r.u32()? as usize;
    let count = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| r.error("dimensions overflow"))?;
    let data = r.f32_vec(count)?;
    r.finish()?;
    FeatureMap::new(w, h, c, data)
}

pub fn write_fmap(fmap: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_fmap(fmap)?).map_err(|e| Error::io(path, e))
}

pub fn read_fmap(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_fmap(&bytes)
}
