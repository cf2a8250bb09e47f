//! Volume container: a UTF-8 key/value header next to a raw payload.
//!
//! ```text
//! format calcscore-volume 1
//! kind volume                     # or `labels`
//! dims 16 96 96                   # z y x
//! spacing 1.5 0.66 0.66
//! origin 0 0 0
//! slice_thickness 3
//! element_type int16              # int16 | float32 (volumes), uint8 (labels)
//! byte_order little_endian
//! codes 0 1 2 3 4 5 6             # labels only: codes the payload may use
//! data_file scan.raw
//! ```
//!
//! The payload is x-fastest, then y, then z. Volumes are written as int16
//! when every value is an integer in range and as float32 otherwise, so
//! saving never loses information.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::{ClassCode, CtVolume, Grid, GridError, LabelMap, Result};

pub const HEADER_MAGIC: &str = "calcscore-volume 1";

fn fmt3(v: [f64; 3]) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn raw_path(header: &Path) -> (PathBuf, String) {
    let name = format!(
        "{}.raw",
        header.file_stem().and_then(|s| s.to_str()).unwrap_or("volume")
    );
    (header.with_file_name(&name), name)
}

fn write_header(path: &Path, kind: &str, grid: &Grid, thickness: Option<f64>, element: &str, data_file: &str) -> Result<()> {
    let mut text = format!(
        "format {HEADER_MAGIC}\nkind {kind}\ndims {} {} {}\nspacing {}\norigin {}\n",
        grid.dims[0],
        grid.dims[1],
        grid.dims[2],
        fmt3(grid.spacing),
        fmt3(grid.origin)
    );
    if let Some(t) = thickness {
        text.push_str(&format!("slice_thickness {t}\n"));
    }
    text.push_str(&format!("element_type {element}\nbyte_order little_endian\n"));
    if kind == "labels" {
        let codes: Vec<String> = ClassCode::ALL.iter().map(|c| c.code().to_string()).collect();
        text.push_str(&format!("codes {}\n", codes.join(" ")));
    }
    text.push_str(&format!("data_file {data_file}\n"));
    fs::write(path, text)?;
    Ok(())
}

pub fn save_volume(v: &CtVolume, header: &Path) -> Result<()> {
    let (raw, name) = raw_path(header);
    let integral = v
        .data()
        .iter()
        .all(|&h| h.fract() == 0.0 && h >= i16::MIN as f32 && h <= i16::MAX as f32);
    let (element, bytes) = if integral {
        ("int16", v.data().iter().flat_map(|&h| (h as i16).to_le_bytes()).collect::<Vec<u8>>())
    } else {
        ("float32", v.data().iter().flat_map(|h| h.to_le_bytes()).collect())
    };
    write_header(header, "volume", v.grid(), Some(v.slice_thickness()), element, &name)?;
    fs::write(raw, bytes)?;
    Ok(())
}

pub fn save_labels(l: &LabelMap, header: &Path) -> Result<()> {
    let (raw, name) = raw_path(header);
    write_header(header, "labels", l.grid(), None, "uint8", &name)?;
    fs::write(raw, l.data())?;
    Ok(())
}

struct Header {
    fields: BTreeMap<String, String>,
    base: PathBuf,
}

impl Header {
    fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut fields = BTreeMap::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once(char::is_whitespace)
                .ok_or_else(|| GridError::MalformedHeader(format!("line without value: `{line}`")))?;
            if fields.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(GridError::MalformedHeader(format!("duplicate key `{k}`")));
            }
        }
        let header = Self { fields, base: path.parent().unwrap_or(Path::new(".")).to_path_buf() };
        if header.get("format")? != HEADER_MAGIC {
            return Err(GridError::MalformedHeader("unsupported format line".into()));
        }
        if header.get("byte_order")? != "little_endian" {
            return Err(GridError::MalformedHeader("only little_endian payloads are supported".into()));
        }
        Ok(header)
    }

    fn get(&self, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| GridError::MalformedHeader(format!("missing `{key}`")))
    }

    fn triple<T: std::str::FromStr>(&self, key: &str) -> Result<[T; 3]> {
        let parts: Vec<T> = self
            .get(key)?
            .split_whitespace()
            .map(|p| p.parse().map_err(|_| GridError::MalformedHeader(format!("bad `{key}` value `{p}`"))))
            .collect::<Result<_>>()?;
        parts
            .try_into()
            .map_err(|_| GridError::MalformedHeader(format!("`{key}` needs three values")))
    }

    fn grid(&self) -> Result<Grid> {
        let grid = Grid { dims: self.triple("dims")?, spacing: self.triple("spacing")?, origin: self.triple("origin")? };
        grid.validate().map_err(|e| GridError::MalformedHeader(e.to_string()))?;
        Ok(grid)
    }

    fn payload(&self, expected: usize) -> Result<Vec<u8>> {
        let bytes = fs::read(self.base.join(self.get("data_file")?))?;
        if bytes.len() != expected {
            return Err(GridError::SizeMismatch(format!(
                "payload has {} bytes, header declares {expected}",
                bytes.len()
            )));
        }
        Ok(bytes)
    }
}

pub fn load_volume(header: &Path) -> Result<CtVolume> {
    let h = Header::read(header)?;
    if h.get("kind")? != "volume" {
        return Err(GridError::MalformedHeader("not a volume header".into()));
    }
    let grid = h.grid()?;
    let thickness: f64 = h
        .get("slice_thickness")?
        .parse()
        .map_err(|_| GridError::MalformedHeader("bad slice_thickness".into()))?;
    let data: Vec<f32> = match h.get("element_type")? {
        "int16" => h
            .payload(grid.len() * 2)?
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        "float32" => h
            .payload(grid.len() * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        other => return Err(GridError::MalformedHeader(format!("unsupported element_type `{other}`"))),
    };
    CtVolume::new(grid, thickness, data)
}

pub fn load_labels(header: &Path) -> Result<LabelMap> {
    let h = Header::read(header)?;
    if h.get("kind")? != "labels" {
        return Err(GridError::MalformedHeader("not a label header".into()));
    }
    if h.get("element_type")? != "uint8" {
        return Err(GridError::MalformedHeader("labels must be uint8".into()));
    }
    if let Ok(codes) = h.get("codes") {
        for c in codes.split_whitespace() {
            let code: u32 = c.parse().map_err(|_| GridError::MalformedHeader(format!("bad code `{c}`")))?;
            ClassCode::from_code(code)?;
        }
    }
    let grid = h.grid()?;
    let data = h.payload(grid.len())?;
    LabelMap::new(grid, data)
}
