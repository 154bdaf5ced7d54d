//! Volume and label-map serialization.
//!
//! Two containers are supported, both with bit-exact round-trips:
//!
//! - **Raw block + sidecar header**: little-endian scalar block in `<name>`
//!   plus a text header in `<name>.hdr` carrying dims, spacing, space tag,
//!   side and optional crop offset. Volumes are float32 in standard
//!   (z-fastest) order; label maps are uint8. Extensions: `.vol` / `.lab`.
//! - **NIfTI-1** single-file `.nii` (little-endian, uncompressed): float32
//!   for volumes, uint8 for label maps, data in the format's native
//!   x-fastest order. The space/side tags ride in `intent_name` and the crop
//!   offset in `descrip`; full affine header semantics are out of scope.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array3;

use super::{LabelMap, LabelSchema, Side, Space, Volume3D};
use crate::error::{Error, Result};

const RAW_MAGIC: &str = "thalseg volume v1";
const RAW_LABEL_MAGIC: &str = "thalseg labels v1";

fn header_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    std::path::PathBuf::from(s)
}

fn write_f32_le(w: &mut impl Write, data: impl Iterator<Item = f32>) -> Result<()> {
    let mut buf = Vec::with_capacity(4096);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
        if buf.len() >= 4096 {
            w.write_all(&buf)?;
            buf.clear();
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Writes a volume as a raw float32 block plus text sidecar.
pub fn write_raw_volume(v: &Volume3D, path: &Path) -> Result<()> {
    let mut hdr = String::new();
    hdr.push_str(RAW_MAGIC);
    hdr.push('\n');
    let [x, y, z] = v.dims();
    hdr.push_str(&format!("dims: {x} {y} {z}\n"));
    hdr.push_str(&format!(
        "spacing: {} {} {}\n",
        v.spacing[0], v.spacing[1], v.spacing[2]
    ));
    hdr.push_str(&format!("space: {}\n", v.space));
    hdr.push_str(&format!("side: {}\n", v.side));
    if let Some(o) = v.crop_offset {
        hdr.push_str(&format!("crop_offset: {} {} {}\n", o[0], o[1], o[2]));
    }
    fs::write(header_path(path), hdr)?;
    let mut f = fs::File::create(path)?;
    let std_layout = v.data.as_standard_layout();
    write_f32_le(&mut f, std_layout.iter().copied())?;
    Ok(())
}

fn parse_header(text: &str, magic: &str) -> Result<std::collections::BTreeMap<String, String>> {
    let mut lines = text.lines();
    let first = lines.next().unwrap_or("");
    if first.trim() != magic {
        return Err(Error::format(format!(
            "bad header magic: expected '{magic}', got '{first}'"
        )));
    }
    let mut map = std::collections::BTreeMap::new();
    for line in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, val) = line
            .split_once(':')
            .ok_or_else(|| Error::format(format!("malformed header line '{line}'")))?;
        map.insert(k.trim().to_string(), val.trim().to_string());
    }
    Ok(map)
}

fn parse_triple<T: std::str::FromStr>(s: &str, what: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::format(format!("{what}: expected 3 values in '{s}'")));
    }
    let mut out: Vec<T> = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::format(format!("{what}: cannot parse '{p}'")))?,
        );
    }
    Ok([
        out.remove(0),
        out.remove(0),
        out.remove(0),
    ])
}

/// Reads a volume written by [`write_raw_volume`].
pub fn read_raw_volume(path: &Path) -> Result<Volume3D> {
    let hdr_text = fs::read_to_string(header_path(path))?;
    let hdr = parse_header(&hdr_text, RAW_MAGIC)?;
    let dims: [usize; 3] = parse_triple(
        hdr.get("dims").ok_or_else(|| Error::format("missing dims"))?,
        "dims",
    )?;
    let spacing: [f32; 3] = parse_triple(
        hdr.get("spacing")
            .ok_or_else(|| Error::format("missing spacing"))?,
        "spacing",
    )?;
    let space: Space = hdr
        .get("space")
        .ok_or_else(|| Error::format("missing space"))?
        .parse()?;
    let side: Side = hdr
        .get("side")
        .ok_or_else(|| Error::format("missing side"))?
        .parse()?;

    let bytes = fs::read(path)?;
    let n = dims[0] * dims[1] * dims[2];
    if bytes.len() != n * 4 {
        return Err(Error::format(format!(
            "raw block has {} bytes, expected {}",
            bytes.len(),
            n * 4
        )));
    }
    let mut vals = Vec::with_capacity(n);
    for c in bytes.chunks_exact(4) {
        vals.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    }
    let data = Array3::from_shape_vec((dims[0], dims[1], dims[2]), vals)
        .map_err(|e| Error::format(e.to_string()))?;
    let mut v = Volume3D::new(data, spacing, space, side)?;
    if let Some(o) = hdr.get("crop_offset") {
        v.crop_offset = Some(parse_triple(o, "crop_offset")?);
    }
    Ok(v)
}

/// Writes a label map as a raw uint8 block plus text sidecar.
pub fn write_raw_labels(l: &LabelMap, path: &Path) -> Result<()> {
    let mut hdr = String::new();
    hdr.push_str(RAW_LABEL_MAGIC);
    hdr.push('\n');
    let [x, y, z] = l.dims();
    hdr.push_str(&format!("dims: {x} {y} {z}\n"));
    hdr.push_str(&format!(
        "spacing: {} {} {}\n",
        l.spacing[0], l.spacing[1], l.spacing[2]
    ));
    hdr.push_str(&format!("space: {}\n", l.space));
    hdr.push_str(&format!("side: {}\n", l.side));
    hdr.push_str(&format!("labels: {}\n", l.schema.len()));
    fs::write(header_path(path), hdr)?;
    let mut f = fs::File::create(path)?;
    let std_layout = l.data.as_standard_layout();
    let bytes: Vec<u8> = std_layout.iter().copied().collect();
    f.write_all(&bytes)?;
    Ok(())
}

/// Reads a label map written by [`write_raw_labels`].
pub fn read_raw_labels(path: &Path) -> Result<LabelMap> {
    let hdr_text = fs::read_to_string(header_path(path))?;
    let hdr = parse_header(&hdr_text, RAW_LABEL_MAGIC)?;
    let dims: [usize; 3] = parse_triple(
        hdr.get("dims").ok_or_else(|| Error::format("missing dims"))?,
        "dims",
    )?;
    let spacing: [f32; 3] = parse_triple(
        hdr.get("spacing")
            .ok_or_else(|| Error::format("missing spacing"))?,
        "spacing",
    )?;
    let space: Space = hdr
        .get("space")
        .ok_or_else(|| Error::format("missing space"))?
        .parse()?;
    let side: Side = hdr
        .get("side")
        .ok_or_else(|| Error::format("missing side"))?
        .parse()?;
    let n_labels: usize = hdr
        .get("labels")
        .ok_or_else(|| Error::format("missing labels"))?
        .parse()
        .map_err(|_| Error::format("bad labels count"))?;
    let schema = LabelSchema::first_n(n_labels)?;

    let bytes = fs::read(path)?;
    let n = dims[0] * dims[1] * dims[2];
    if bytes.len() != n {
        return Err(Error::format(format!(
            "label block has {} bytes, expected {n}",
            bytes.len()
        )));
    }
    let data = Array3::from_shape_vec((dims[0], dims[1], dims[2]), bytes)
        .map_err(|e| Error::format(e.to_string()))?;
    LabelMap::new(data, schema, spacing, space, side)
}

// ---------------------------------------------------------------------------
// NIfTI-1
// ---------------------------------------------------------------------------

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: usize = 352;
const DT_UINT8: i16 = 2;
const DT_FLOAT32: i16 = 16;

struct NiftiFields {
    dims: [usize; 3],
    spacing: [f32; 3],
    datatype: i16,
    intent_name: String,
    descrip: String,
}

fn put_i16(buf: &mut [u8], off: usize, v: i16) {
    buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_i32(buf: &mut [u8], off: usize, v: i32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_f32(buf: &mut [u8], off: usize, v: f32) {
    buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_str(buf: &mut [u8], off: usize, len: usize, s: &str) {
    let bytes = s.as_bytes();
    let n = bytes.len().min(len);
    buf[off..off + n].copy_from_slice(&bytes[..n]);
}
fn get_i16(buf: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([buf[off], buf[off + 1]])
}
fn get_f32(buf: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([buf[off], buf[off + 1], buf[off + 2], buf[off + 3]])
}
fn get_str(buf: &[u8], off: usize, len: usize) -> String {
    let raw = &buf[off..off + len];
    let end = raw.iter().position(|&b| b == 0).unwrap_or(len);
    String::from_utf8_lossy(&raw[..end]).to_string()
}

fn build_nifti_header(f: &NiftiFields) -> Vec<u8> {
    let mut h = vec![0u8; NIFTI_VOX_OFFSET];
    put_i32(&mut h, 0, NIFTI_HEADER_LEN as i32);
    h[38] = b'r'; // regular
    put_i16(&mut h, 40, 3); // dim[0] = number of dimensions
    put_i16(&mut h, 42, f.dims[0] as i16);
    put_i16(&mut h, 44, f.dims[1] as i16);
    put_i16(&mut h, 46, f.dims[2] as i16);
    for i in 4..8 {
        put_i16(&mut h, 40 + 2 * i, 1);
    }
    put_i16(&mut h, 70, f.datatype);
    put_i16(&mut h, 72, if f.datatype == DT_FLOAT32 { 32 } else { 8 });
    put_f32(&mut h, 76, 1.0); // pixdim[0] (qfac)
    put_f32(&mut h, 80, f.spacing[0]);
    put_f32(&mut h, 84, f.spacing[1]);
    put_f32(&mut h, 88, f.spacing[2]);
    put_f32(&mut h, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    h[123] = 2; // xyzt_units: millimetres
    put_str(&mut h, 148, 80, &f.descrip);
    put_i16(&mut h, 254, 1); // sform_code: scanner-anatomical
    put_f32(&mut h, 280, f.spacing[0]); // srow_x
    put_f32(&mut h, 300, f.spacing[1]); // srow_y
    put_f32(&mut h, 320, f.spacing[2]); // srow_z
    put_str(&mut h, 328, 16, &f.intent_name);
    put_str(&mut h, 344, 4, "n+1");
    h
}

fn parse_nifti_header(h: &[u8]) -> Result<NiftiFields> {
    if h.len() < NIFTI_VOX_OFFSET {
        return Err(Error::format("nifti file too small"));
    }
    let magic = get_str(h, 344, 4);
    if magic != "n+1" {
        return Err(Error::format(format!("bad nifti magic '{magic}'")));
    }
    let ndim = get_i16(h, 40);
    if ndim != 3 {
        return Err(Error::format(format!("expected 3-D nifti, got dim[0]={ndim}")));
    }
    let dims = [
        get_i16(h, 42) as usize,
        get_i16(h, 44) as usize,
        get_i16(h, 46) as usize,
    ];
    let spacing = [get_f32(h, 80), get_f32(h, 84), get_f32(h, 88)];
    let datatype = get_i16(h, 70);
    Ok(NiftiFields {
        dims,
        spacing,
        datatype,
        intent_name: get_str(h, 328, 16),
        descrip: get_str(h, 148, 80),
    })
}

fn tags_to_intent(space: Space, side: Side) -> String {
    format!("{space};{side}")
}

fn intent_to_tags(s: &str) -> Result<(Space, Side)> {
    let (sp, sd) = s
        .split_once(';')
        .ok_or_else(|| Error::format(format!("intent_name '{s}' lacks space;side tags")))?;
    Ok((sp.parse()?, sd.parse()?))
}

/// Writes a volume as single-file NIfTI-1 (float32, little-endian).
pub fn write_nifti_volume(v: &Volume3D, path: &Path) -> Result<()> {
    let mut descrip = String::new();
    if let Some(o) = v.crop_offset {
        descrip = format!("crop_offset={},{},{}", o[0], o[1], o[2]);
    }
    let hdr = build_nifti_header(&NiftiFields {
        dims: v.dims(),
        spacing: v.spacing,
        datatype: DT_FLOAT32,
        intent_name: tags_to_intent(v.space, v.side),
        descrip,
    });
    let mut f = fs::File::create(path)?;
    f.write_all(&hdr)?;
    // NIfTI stores x fastest.
    let [nx, ny, nz] = v.dims();
    let mut buf = Vec::with_capacity(nx * 4);
    for z in 0..nz {
        for y in 0..ny {
            buf.clear();
            for x in 0..nx {
                buf.extend_from_slice(&v.data[[x, y, z]].to_le_bytes());
            }
            f.write_all(&buf)?;
        }
    }
    Ok(())
}

/// Reads a float32 NIfTI-1 volume written by [`write_nifti_volume`] (or any
/// little-endian single-file float32 `.nii` with plausible tags).
pub fn read_nifti_volume(path: &Path) -> Result<Volume3D> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let fields = parse_nifti_header(&bytes)?;
    if fields.datatype != DT_FLOAT32 {
        return Err(Error::format(format!(
            "unsupported nifti datatype {} (expected float32)",
            fields.datatype
        )));
    }
    let [nx, ny, nz] = fields.dims;
    let need = NIFTI_VOX_OFFSET + nx * ny * nz * 4;
    if bytes.len() < need {
        return Err(Error::format("nifti data block truncated"));
    }
    let mut data = Array3::zeros((nx, ny, nz));
    let mut off = NIFTI_VOX_OFFSET;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data[[x, y, z]] = f32::from_le_bytes([
                    bytes[off],
                    bytes[off + 1],
                    bytes[off + 2],
                    bytes[off + 3],
                ]);
                off += 4;
            }
        }
    }
    let (space, side) = intent_to_tags(&fields.intent_name).unwrap_or((Space::Native, Side::NotApplicable));
    let mut v = Volume3D::new(data, fields.spacing, space, side)?;
    if let Some(rest) = fields.descrip.strip_prefix("crop_offset=") {
        let parts: Vec<usize> = rest
            .split(',')
            .filter_map(|p| p.trim().parse().ok())
            .collect();
        if parts.len() == 3 {
            v.crop_offset = Some([parts[0], parts[1], parts[2]]);
        }
    }
    Ok(v)
}

/// Writes a label map as single-file NIfTI-1 (uint8).
pub fn write_nifti_labels(l: &LabelMap, path: &Path) -> Result<()> {
    let hdr = build_nifti_header(&NiftiFields {
        dims: l.dims(),
        spacing: l.spacing,
        datatype: DT_UINT8,
        intent_name: tags_to_intent(l.space, l.side),
        descrip: format!("labels={}", l.schema.len()),
    });
    let mut f = fs::File::create(path)?;
    f.write_all(&hdr)?;
    let [nx, ny, nz] = l.dims();
    let mut buf = Vec::with_capacity(nx);
    for z in 0..nz {
        for y in 0..ny {
            buf.clear();
            for x in 0..nx {
                buf.push(l.data[[x, y, z]]);
            }
            f.write_all(&buf)?;
        }
    }
    Ok(())
}

/// Reads a uint8 NIfTI-1 label map written by [`write_nifti_labels`].
pub fn read_nifti_labels(path: &Path) -> Result<LabelMap> {
    let mut f = fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let fields = parse_nifti_header(&bytes)?;
    if fields.datatype != DT_UINT8 {
        return Err(Error::format(format!(
            "unsupported nifti datatype {} (expected uint8)",
            fields.datatype
        )));
    }
    let [nx, ny, nz] = fields.dims;
    if bytes.len() < NIFTI_VOX_OFFSET + nx * ny * nz {
        return Err(Error::format("nifti data block truncated"));
    }
    let mut data = Array3::zeros((nx, ny, nz));
    let mut off = NIFTI_VOX_OFFSET;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data[[x, y, z]] = bytes[off];
                off += 1;
            }
        }
    }
    let n_labels = fields
        .descrip
        .strip_prefix("labels=")
        .and_then(|s| s.parse().ok())
        .unwrap_or(13);
    let (space, side) = intent_to_tags(&fields.intent_name).unwrap_or((Space::Native, Side::NotApplicable));
    LabelMap::new(data, LabelSchema::first_n(n_labels)?, fields.spacing, space, side)
}

/// Saves a volume, dispatching on extension: `.nii` or raw (anything else).
pub fn save_volume(v: &Volume3D, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => write_nifti_volume(v, path),
        _ => write_raw_volume(v, path),
    }
}

/// Loads a volume, dispatching on extension.
pub fn load_volume(path: &Path) -> Result<Volume3D> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_nifti_volume(path),
        _ => read_raw_volume(path),
    }
}

/// Saves a label map, dispatching on extension.
pub fn save_labels(l: &LabelMap, path: &Path) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => write_nifti_labels(l, path),
        _ => write_raw_labels(l, path),
    }
}

/// Loads a label map, dispatching on extension.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("nii") => read_nifti_labels(path),
        _ => read_raw_labels(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::CropBox;
    use proptest::prelude::*;

    fn sample_volume() -> Volume3D {
        let mut v = Volume3D::indexed_ramp([5, 4, 3], Space::MniHr);
        v.side = Side::Left;
        v = crate::volumes::crop_roi(&v, &CropBox::new([1, 0, 0], [4, 4, 3])).unwrap();
        v
    }

    fn sample_labels() -> LabelMap {
        let schema = LabelSchema::thalamus();
        let data = Array3::from_shape_fn((4, 4, 3), |(x, y, z)| ((x + 2 * y + z) % 14) as u8);
        LabelMap::new(data, schema, [0.5; 3], Space::Crop, Side::Right).unwrap()
    }

    #[test]
    fn raw_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume();
        let p = dir.path().join("case.vol");
        write_raw_volume(&v, &p).unwrap();
        let back = read_raw_volume(&p).unwrap();
        assert_eq!(back.data, v.data);
        assert_eq!(back.spacing, v.spacing);
        assert_eq!(back.space, v.space);
        assert_eq!(back.side, v.side);
        assert_eq!(back.crop_offset, v.crop_offset);
    }

    #[test]
    fn raw_label_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let l = sample_labels();
        let p = dir.path().join("case.lab");
        write_raw_labels(&l, &p).unwrap();
        let back = read_raw_labels(&p).unwrap();
        assert_eq!(back.data, l.data);
        assert_eq!(back.schema, l.schema);
        assert_eq!(back.side, l.side);
    }

    #[test]
    fn nifti_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample_volume();
        let p = dir.path().join("case.nii");
        write_nifti_volume(&v, &p).unwrap();
        let back = read_nifti_volume(&p).unwrap();
        assert_eq!(back.data, v.data);
        assert_eq!(back.spacing, v.spacing);
        assert_eq!(back.space, v.space);
        assert_eq!(back.side, v.side);
        assert_eq!(back.crop_offset, v.crop_offset);
    }

    #[test]
    fn nifti_label_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let l = sample_labels();
        let p = dir.path().join("case.nii");
        write_nifti_labels(&l, &p).unwrap();
        let back = read_nifti_labels(&p).unwrap();
        assert_eq!(back.data, l.data);
        assert_eq!(back.schema.len(), 13);
    }

    #[test]
    fn rejects_garbage_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.nii");
        std::fs::write(&p, vec![0u8; 400]).unwrap();
        assert!(read_nifti_volume(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn both_containers_roundtrip_random_data(
            vals in proptest::collection::vec(-1e6f32..1e6, 60),
        ) {
            let data = Array3::from_shape_vec((3, 4, 5), vals).unwrap();
            let v = Volume3D::new(data, [0.7, 1.0, 1.25], Space::Native, Side::NotApplicable).unwrap();
            let dir = tempfile::tempdir().unwrap();

            let p1 = dir.path().join("v.vol");
            write_raw_volume(&v, &p1).unwrap();
            let r1 = read_raw_volume(&p1).unwrap();
            prop_assert!(r1.data.iter().zip(v.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));

            let p2 = dir.path().join("v.nii");
            write_nifti_volume(&v, &p2).unwrap();
            let r2 = read_nifti_volume(&p2).unwrap();
            prop_assert!(r2.data.iter().zip(v.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
