//! Minimal MetaImage (`.mhd` + `.raw`) reader and writer.
//!
//! Only 3D images with a detached little-endian payload are supported.
//! Element types: `MET_FLOAT` (f32), `MET_UCHAR` (u8) and `MET_INT` (i32).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{Grid3, IntensityKind, LabelMask, Volume};
use crate::error::{ensure, Error, Result};

pub trait Element: Copy + Sized {
    const MET_TYPE: &'static str;
    const SIZE: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

macro_rules! element {
    ($t:ty, $name:literal) => {
        impl Element for $t {
            const MET_TYPE: &'static str = $name;
            const SIZE: usize = std::mem::size_of::<$t>();
            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }
            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

element!(f32, "MET_FLOAT");
element!(u8, "MET_UCHAR");
element!(i32, "MET_INT");

const REQUIRED: [&str; 5] = [
    "NDims",
    "DimSize",
    "ElementSpacing",
    "ElementType",
    "ElementDataFile",
];

/// Fields written by `render` that carry no information beyond the fixed
/// format.
const STANDARD: [&str; 5] = [
    "ObjectType",
    "BinaryData",
    "BinaryDataByteOrderMSB",
    "ElementByteOrderMSB",
    "CompressedData",
];

/// Parsed header fields.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaHeader {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub element_type: String,
    pub data_file: String,
    /// Fields outside the required set.
    pub extra: BTreeMap<String, String>,
}

impl MetaHeader {
    pub fn parse(text: &str) -> Result<Self> {
        let mut fields: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Header(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim().to_string();
            if fields.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Header(format!("duplicate field {key}")));
            }
        }
        for key in REQUIRED {
            ensure!(
                fields.contains_key(key),
                Error::Header(format!("missing field {key}"))
            );
        }
        let ndims: usize = parse_num(&fields["NDims"], "NDims")?;
        ensure!(
            ndims == 3,
            Error::Header(format!("only 3D images are supported, NDims = {ndims}"))
        );
        let dims_v: Vec<i64> = parse_list(&fields["DimSize"], "DimSize")?;
        let spacing_v: Vec<f64> = parse_list(&fields["ElementSpacing"], "ElementSpacing")?;
        ensure!(
            dims_v.len() == 3 && spacing_v.len() == 3,
            Error::Header("DimSize and ElementSpacing need 3 values".into())
        );
        ensure!(
            dims_v.iter().all(|&d| d > 0),
            Error::NonPositiveDims([0, 1, 2].map(|i| dims_v[i].max(0) as usize))
        );
        let spacing = [spacing_v[0], spacing_v[1], spacing_v[2]];
        ensure!(
            spacing.iter().all(|&s| s > 0.0 && s.is_finite()),
            Error::NonPositiveSpacing(spacing)
        );
        for key in ["BinaryDataByteOrderMSB", "ElementByteOrderMSB"] {
            if let Some(msb) = fields.get(key) {
                ensure!(
                    msb.eq_ignore_ascii_case("false"),
                    Error::Header("big-endian payloads are not supported".into())
                );
            }
        }
        if let Some(c) = fields.get("CompressedData") {
            ensure!(
                c.eq_ignore_ascii_case("false"),
                Error::Header("compressed payloads are not supported".into())
            );
        }
        let element_type = fields["ElementType"].clone();
        let data_file = fields["ElementDataFile"].clone();
        ensure!(
            data_file != "LOCAL",
            Error::Header("inline (LOCAL) payloads are not supported".into())
        );
        for key in REQUIRED.iter().chain(&STANDARD) {
            fields.remove(*key);
        }
        Ok(Self {
            dims: [dims_v[0] as usize, dims_v[1] as usize, dims_v[2] as usize],
            spacing,
            element_type,
            data_file,
            extra: fields,
        })
    }

    pub fn render(&self) -> String {
        let [nx, ny, nz] = self.dims;
        let [sx, sy, sz] = self.spacing;
        let mut out = String::new();
        out.push_str("ObjectType = Image\n");
        out.push_str("NDims = 3\n");
        out.push_str("BinaryData = True\n");
        out.push_str("BinaryDataByteOrderMSB = False\n");
        out.push_str("CompressedData = False\n");
        out.push_str(&format!("DimSize = {nx} {ny} {nz}\n"));
        out.push_str(&format!("ElementSpacing = {sx:?} {sy:?} {sz:?}\n"));
        for (k, v) in &self.extra {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str(&format!("ElementType = {}\n", self.element_type));
        // Must be the last field per MetaIO convention.
        out.push_str(&format!("ElementDataFile = {}\n", self.data_file));
        out
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, field: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Header(format!("cannot parse {field} value `{s}`")))
}

fn parse_list<T: std::str::FromStr>(s: &str, field: &str) -> Result<Vec<T>> {
    s.split_whitespace().map(|t| parse_num(t, field)).collect()
}

fn raw_path(header_path: &Path, data_file: &str) -> PathBuf {
    header_path
        .parent()
        .map(|p| p.join(data_file))
        .unwrap_or_else(|| PathBuf::from(data_file))
}

fn raw_name(header_path: &Path) -> Result<String> {
    let stem = header_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad header path {}", header_path.display())))?;
    Ok(format!("{stem}.raw"))
}

/// Write `grid` as `path` (header) plus a sibling `.raw` payload.
pub fn save_grid<T: Element>(
    grid: &Grid3<T>,
    path: &Path,
    extra: &[(&str, &str)],
) -> Result<()> {
    let header = MetaHeader {
        dims: grid.dims(),
        spacing: grid.spacing(),
        element_type: T::MET_TYPE.to_string(),
        data_file: raw_name(path)?,
        extra: extra
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    };
    let mut payload = Vec::with_capacity(grid.data().len() * T::SIZE);
    for &v in grid.data() {
        v.write_le(&mut payload);
    }
    let raw = raw_path(path, &header.data_file);
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    fs::write(path, header.render()).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_header(path: &Path) -> Result<MetaHeader> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    MetaHeader::parse(&text)
}

fn read_payload<T: Element>(path: &Path, header: &MetaHeader) -> Result<Grid3<T>> {
    ensure!(
        header.element_type == T::MET_TYPE,
        Error::Header(format!(
            "element type {} where {} was expected",
            header.element_type,
            T::MET_TYPE
        ))
    );
    let raw = raw_path(path, &header.data_file);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n: usize = header.dims.iter().product();
    ensure!(
        bytes.len() == n * T::SIZE,
        Error::PayloadSize {
            expected: n * T::SIZE,
            found: bytes.len()
        }
    );
    let data = bytes.chunks_exact(T::SIZE).map(T::read_le).collect();
    Grid3::new(header.dims, header.spacing, data)
}

/// Load a grid of a specific element type.
pub fn load_grid<T: Element>(path: &Path) -> Result<(Grid3<T>, MetaHeader)> {
    let header = read_header(path)?;
    let grid = read_payload(path, &header)?;
    Ok((grid, header))
}

const KIND_FIELD: &str = "IntensityKind";

pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    save_grid(v.grid(), path, &[(KIND_FIELD, v.kind().as_str())])
}

/// Load an intensity volume stored as `MET_FLOAT` or `MET_UCHAR`.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let header = read_header(path)?;
    let grid = match header.element_type.as_str() {
        "MET_UCHAR" => {
            let g: Grid3<u8> = read_payload(path, &header)?;
            let data = g.data().iter().map(|&v| v as f32).collect();
            Grid3::new(g.dims(), g.spacing(), data)?
        }
        _ => read_payload::<f32>(path, &header)?,
    };
    let kind = match header.extra.get(KIND_FIELD) {
        Some(s) => IntensityKind::parse(s)
            .ok_or_else(|| Error::Header(format!("unknown {KIND_FIELD} `{s}`")))?,
        None => IntensityKind::Hounsfield,
    };
    Volume::new(grid, kind)
}

pub fn save_mask(m: &LabelMask, path: &Path) -> Result<()> {
    save_grid(m.grid(), path, &[])
}

pub fn load_mask(path: &Path) -> Result<LabelMask> {
    let (grid, _) = load_grid::<u8>(path)?;
    LabelMask::new(grid)
}

pub fn save_labels(labels: &Grid3<i32>, path: &Path) -> Result<()> {
    save_grid(labels, path, &[])
}

pub fn load_labels(path: &Path) -> Result<Grid3<i32>> {
    Ok(load_grid::<i32>(path)?.0)
}
