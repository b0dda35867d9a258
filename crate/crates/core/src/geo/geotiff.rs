//! GeoTIFF container I/O for [`GeoRaster`] and [`LabelMask`].
//!
//! Rasters are written pixel-interleaved and uncompressed. Georeferencing uses
//! `ModelPixelScale` + `ModelTiepoint` for north-up transforms and
//! `ModelTransformation` when shear terms are present. The CRS identifier is
//! carried verbatim as the GeoTIFF citation string; nodata uses the GDAL tag.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3};
use tiff::decoder::{Decoder, DecodingResult, Limits};
use tiff::encoder::colortype::{self, ColorType};
use tiff::encoder::TiffEncoder;
use tiff::tags::{PhotometricInterpretation, SampleFormat, Tag};

use super::{AffineGeoTransform, GeoRaster, LabelMask};
use crate::error::{Error, Result};

const GT_MODEL_TYPE_KEY: u16 = 1024;
const GT_RASTER_TYPE_KEY: u16 = 1025;
const GT_CITATION_KEY: u16 = 1026;
const GEOGRAPHIC_TYPE_KEY: u16 = 2048;
const PROJECTED_CS_TYPE_KEY: u16 = 3072;
const RASTER_PIXEL_IS_AREA: u16 = 1;
const MODEL_TYPE_PROJECTED: u16 = 1;

macro_rules! multiband_f32 {
    ($name:ident, $n:expr) => {
        struct $name;
        impl ColorType for $name {
            type Inner = f32;
            const TIFF_VALUE: PhotometricInterpretation = PhotometricInterpretation::BlackIsZero;
            const BITS_PER_SAMPLE: &'static [u16] = &[32; $n];
            const SAMPLE_FORMAT: &'static [SampleFormat] = &[SampleFormat::IEEEFP; $n];

            // only used with a predictor, which this writer never enables
            fn horizontal_predict(_: &[f32], _: &mut Vec<f32>) {
                unreachable!()
            }
        }
    };
}

multiband_f32!(Bands2F32, 2);
multiband_f32!(Bands3F32, 3);
multiband_f32!(Bands4F32, 4);
multiband_f32!(Bands5F32, 5);
multiband_f32!(Bands6F32, 6);
multiband_f32!(Bands7F32, 7);
multiband_f32!(Bands8F32, 8);

fn geokeys(crs_id: &str) -> (Vec<u16>, String) {
    let ascii = format!("{crs_id}|");
    let keys = vec![
        1,
        1,
        0,
        3,
        GT_MODEL_TYPE_KEY,
        0,
        1,
        MODEL_TYPE_PROJECTED,
        GT_RASTER_TYPE_KEY,
        0,
        1,
        RASTER_PIXEL_IS_AREA,
        GT_CITATION_KEY,
        Tag::GeoAsciiParamsTag.to_u16(),
        ascii.len() as u16,
        0,
    ];
    (keys, ascii)
}

fn write_image<C: ColorType<Inner = f32>>(
    path: &Path,
    rows: usize,
    cols: usize,
    data: &[f32],
    transform: &AffineGeoTransform,
    crs_id: &str,
    nodata: Option<&str>,
) -> Result<()>
where
    [f32]: tiff::encoder::TiffValue,
{
    let file = BufWriter::new(File::create(path)?);
    let mut enc = TiffEncoder::new(file)?;
    let mut img = enc.new_image::<C>(cols as u32, rows as u32)?;
    write_geo_tags(img.encoder(), transform, crs_id, nodata)?;
    img.write_data(data)?;
    Ok(())
}

fn write_geo_tags<W: std::io::Write + std::io::Seek, K: tiff::encoder::TiffKind>(
    dir: &mut tiff::encoder::DirectoryEncoder<'_, W, K>,
    t: &AffineGeoTransform,
    crs_id: &str,
    nodata: Option<&str>,
) -> Result<()> {
    if t.row_rotation == 0.0 && t.col_rotation == 0.0 && t.pixel_height < 0.0 {
        dir.write_tag(Tag::ModelPixelScaleTag, &[t.pixel_width, -t.pixel_height, 0.0][..])?;
        dir.write_tag(Tag::ModelTiepointTag, &[0.0, 0.0, 0.0, t.origin_x, t.origin_y, 0.0][..])?;
    } else {
        #[rustfmt::skip]
        let m = [
            t.pixel_width, t.col_rotation, 0.0, t.origin_x,
            t.row_rotation, t.pixel_height, 0.0, t.origin_y,
            0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ];
        dir.write_tag(Tag::ModelTransformationTag, &m[..])?;
    }
    let (keys, ascii) = geokeys(crs_id);
    dir.write_tag(Tag::GeoKeyDirectoryTag, &keys[..])?;
    dir.write_tag(Tag::GeoAsciiParamsTag, ascii.as_str())?;
    if let Some(nd) = nodata {
        dir.write_tag(Tag::GdalNodata, nd)?;
    }
    Ok(())
}

/// Writes `[band, row, col]` float data; nodata pixels are stored as NaN.
pub fn write_bands(
    path: impl AsRef<Path>,
    bands: &Array3<f32>,
    nodata_mask: Option<&Array2<bool>>,
    transform: &AffineGeoTransform,
    crs_id: &str,
) -> Result<()> {
    let path = path.as_ref();
    let (nb, rows, cols) = bands.dim();
    let mut data = Vec::with_capacity(nb * rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let masked = nodata_mask.is_some_and(|m| m[[r, c]]);
            for b in 0..nb {
                data.push(if masked { f32::NAN } else { bands[[b, r, c]] });
            }
        }
    }
    let nodata = nodata_mask.filter(|m| m.iter().any(|v| *v)).map(|_| "nan");
    match nb {
        1 => write_image::<colortype::Gray32Float>(path, rows, cols, &data, transform, crs_id, nodata),
        2 => write_image::<Bands2F32>(path, rows, cols, &data, transform, crs_id, nodata),
        3 => write_image::<Bands3F32>(path, rows, cols, &data, transform, crs_id, nodata),
        4 => write_image::<Bands4F32>(path, rows, cols, &data, transform, crs_id, nodata),
        5 => write_image::<Bands5F32>(path, rows, cols, &data, transform, crs_id, nodata),
        6 => write_image::<Bands6F32>(path, rows, cols, &data, transform, crs_id, nodata),
        7 => write_image::<Bands7F32>(path, rows, cols, &data, transform, crs_id, nodata),
        8 => write_image::<Bands8F32>(path, rows, cols, &data, transform, crs_id, nodata),
        n => Err(Error::format(path, format!("unsupported band count {n}"))),
    }
}

pub fn write_raster(path: impl AsRef<Path>, raster: &GeoRaster) -> Result<()> {
    write_bands(path, &raster.bands, Some(&raster.nodata_mask), &raster.transform, &raster.crs_id)
}

/// Writes any single-band 8-bit grid (label masks and binary masks).
pub fn write_u8(path: impl AsRef<Path>, values: &Array2<u8>, transform: &AffineGeoTransform, crs_id: &str) -> Result<()> {
    let (rows, cols) = values.dim();
    let data: Vec<u8> = values.iter().copied().collect();
    let file = BufWriter::new(File::create(path.as_ref())?);
    let mut enc = TiffEncoder::new(file)?;
    let mut img = enc.new_image::<colortype::Gray8>(cols as u32, rows as u32)?;
    write_geo_tags(img.encoder(), transform, crs_id, None)?;
    img.write_data(&data)?;
    Ok(())
}

pub fn write_label_mask(path: impl AsRef<Path>, mask: &LabelMask) -> Result<()> {
    write_u8(path, &mask.classes, &mask.transform, &mask.crs_id)
}

struct Decoded {
    rows: usize,
    cols: usize,
    samples: usize,
    data: DecodingResult,
    transform: AffineGeoTransform,
    crs_id: String,
    nodata: Option<f64>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let file = BufReader::new(File::open(path)?);
    let mut dec = Decoder::new(file)?.with_limits(Limits::unlimited());
    let (w, h) = dec.dimensions()?;
    let planar: Option<u16> = dec.find_tag_unsigned(Tag::PlanarConfiguration)?;
    if planar == Some(2) {
        return Err(Error::format(path, "planar (band-sequential) layout is not supported"));
    }
    let samples: usize = dec.find_tag_unsigned::<u16>(Tag::SamplesPerPixel)?.unwrap_or(1) as usize;
    let transform = read_transform(&mut dec, path)?;
    let crs_id = read_crs(&mut dec)?;
    let nodata = match dec.find_tag(Tag::GdalNodata)? {
        Some(v) => {
            let s = v.into_string()?;
            let s = s.trim_matches(char::from(0)).trim();
            Some(s.parse::<f64>().map_err(|_| Error::format(path, format!("bad nodata `{s}`")))?)
        }
        None => None,
    };
    let data = dec.read_image()?;
    Ok(Decoded { rows: h as usize, cols: w as usize, samples, data, transform, crs_id, nodata })
}

fn read_transform<R: std::io::Read + std::io::Seek>(dec: &mut Decoder<R>, path: &Path) -> Result<AffineGeoTransform> {
    if let Some(v) = dec.find_tag(Tag::ModelTransformationTag)? {
        let m = v.into_f64_vec()?;
        if m.len() < 8 {
            return Err(Error::format(path, "short ModelTransformation tag"));
        }
        return AffineGeoTransform::new(m[3], m[7], m[0], m[5], m[4], m[1]);
    }
    let scale = dec.find_tag(Tag::ModelPixelScaleTag)?;
    let tie = dec.find_tag(Tag::ModelTiepointTag)?;
    match (scale, tie) {
        (Some(s), Some(t)) => {
            let s = s.into_f64_vec()?;
            let t = t.into_f64_vec()?;
            if s.len() < 2 || t.len() < 6 {
                return Err(Error::format(path, "short georeferencing tags"));
            }
            // tiepoint (i, j) in raster space maps to (x, y)
            let (pw, ph) = (s[0], -s[1]);
            AffineGeoTransform::north_up(t[3] - t[0] * pw, t[4] - t[1] * ph, pw, ph)
        }
        _ => Ok(AffineGeoTransform::identity()),
    }
}

fn read_crs<R: std::io::Read + std::io::Seek>(dec: &mut Decoder<R>) -> Result<String> {
    let Some(keys) = dec.find_tag(Tag::GeoKeyDirectoryTag)? else {
        return Ok(String::new());
    };
    let keys = keys.into_u16_vec()?;
    let ascii = match dec.find_tag(Tag::GeoAsciiParamsTag)? {
        Some(v) => v.into_string()?,
        None => String::new(),
    };
    let mut citation = None;
    let mut epsg = None;
    for entry in keys.chunks_exact(4).skip(1) {
        let (id, loc, count, off) = (entry[0], entry[1], entry[2] as usize, entry[3] as usize);
        match id {
            GT_CITATION_KEY if loc == Tag::GeoAsciiParamsTag.to_u16() => {
                let end = (off + count).min(ascii.len());
                let s = ascii.get(off..end).unwrap_or("");
                citation = Some(s.trim_end_matches('|').to_string());
            }
            PROJECTED_CS_TYPE_KEY | GEOGRAPHIC_TYPE_KEY if loc == 0 && epsg.is_none() => {
                epsg = Some(format!("EPSG:{off}"));
            }
            _ => {}
        }
    }
    Ok(citation.or(epsg).unwrap_or_default())
}

fn to_f32_vec(data: DecodingResult) -> Vec<f32> {
    match data {
        DecodingResult::U8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::U32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::U64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::F16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::F32(v) => v,
        DecodingResult::F64(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I8(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I16(v) => v.into_iter().map(f32::from).collect(),
        DecodingResult::I32(v) => v.into_iter().map(|x| x as f32).collect(),
        DecodingResult::I64(v) => v.into_iter().map(|x| x as f32).collect(),
    }
}

/// Reads a multi-band raster. Pixels equal to the nodata tag value or NaN are masked.
pub fn read_raster(path: impl AsRef<Path>) -> Result<GeoRaster> {
    let path = path.as_ref();
    let d = decode(path)?;
    let flat = to_f32_vec(d.data);
    if flat.len() != d.rows * d.cols * d.samples {
        return Err(Error::format(path, "pixel buffer size mismatch"));
    }
    let mut bands = Array3::<f32>::zeros((d.samples, d.rows, d.cols));
    for (i, px) in flat.chunks_exact(d.samples).enumerate() {
        let (r, c) = (i / d.cols, i % d.cols);
        for (b, v) in px.iter().enumerate() {
            bands[[b, r, c]] = *v;
        }
    }
    let mut raster = GeoRaster::new(bands, d.transform, d.crs_id)?;
    if let Some(nd) = d.nodata {
        raster.apply_nodata_value(nd as f32);
    }
    Ok(raster)
}

/// Reads a single-band 8-bit raster.
pub fn read_u8(path: impl AsRef<Path>) -> Result<(Array2<u8>, AffineGeoTransform, String)> {
    let path = path.as_ref();
    let d = decode(path)?;
    if d.samples != 1 {
        return Err(Error::format(path, format!("expected 1 band, found {}", d.samples)));
    }
    let DecodingResult::U8(v) = d.data else {
        return Err(Error::format(path, "expected 8-bit unsigned samples"));
    };
    let arr = Array2::from_shape_vec((d.rows, d.cols), v).map_err(|e| Error::format(path, e.to_string()))?;
    Ok((arr, d.transform, d.crs_id))
}

pub fn read_label_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let (classes, transform, crs) = read_u8(path)?;
    LabelMask::new(classes, transform, crs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_raster(rows: usize, cols: usize) -> GeoRaster {
        let bands = Array3::from_shape_fn((4, rows, cols), |(b, r, c)| (b * 1000 + r * 10 + c) as f32 * 0.01);
        let t = AffineGeoTransform::north_up(500_000.0, 1_900_000.0, 1.134, -1.134).unwrap();
        GeoRaster::new(bands, t, "EPSG:32643").unwrap()
    }

    #[test]
    fn raster_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.tif");
        let mut r = sample_raster(7, 9);
        r.nodata_mask[[2, 3]] = true;
        r.nodata_mask[[6, 8]] = true;
        write_raster(&p, &r).unwrap();
        let back = read_raster(&p).unwrap();
        assert_eq!(back.transform, r.transform);
        assert_eq!(back.crs_id, "EPSG:32643");
        assert_eq!(back.nodata_mask, r.nodata_mask);
        for ((b, row, col), v) in back.bands.indexed_iter() {
            if !r.nodata_mask[[row, col]] {
                assert_eq!(*v, r.bands[[b, row, col]]);
            }
        }
    }

    #[test]
    fn sheared_transform_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("shear.tif");
        let t = AffineGeoTransform::new(10.0, 20.0, 0.5, -0.5, 0.1, -0.05).unwrap();
        let m = LabelMask::new(Array2::from_elem((5, 4), 3u8), t, "local").unwrap();
        write_label_mask(&p, &m).unwrap();
        assert_eq!(read_label_mask(&p).unwrap(), m);
    }

    #[test]
    fn five_band_float_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("probs.tif");
        let a = Array3::from_shape_fn((5, 3, 2), |(b, r, c)| (b + r + c) as f32 / 10.0);
        write_bands(&p, &a, None, &AffineGeoTransform::identity(), "").unwrap();
        let back = read_raster(&p).unwrap();
        assert_eq!(back.bands, a);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn nodata_mask_preserved(bits in proptest::collection::vec(any::<bool>(), 6 * 5)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("m.tif");
            let mut r = sample_raster(6, 5);
            r.nodata_mask = Array2::from_shape_vec((6, 5), bits).unwrap();
            write_raster(&p, &r).unwrap();
            let back = read_raster(&p).unwrap();
            prop_assert_eq!(back.nodata_mask, r.nodata_mask);
        }
    }
}
