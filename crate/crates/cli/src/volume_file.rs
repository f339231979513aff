//! The SVFREG1 volume format.
//!
//! ```text
//! SVFREG1\n
//! {"dims":[x,y,z],"dtype":"f32","spacing":[1.0,1.0,1.0],"kind":"image","components":1}\n
//! <little-endian payload, x fastest, components interleaved per voxel>
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use svfreg::{GridSpec, SegmentationMap, VectorField, Volume};

use crate::error::{CliError, CliResult};

pub const MAGIC: &str = "SVFREG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U16,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U16 => 2,
            Dtype::U8 => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Image,
    Labels,
    Velocity,
    Displacement,
    Distance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dims: [usize; 3],
    pub dtype: Dtype,
    pub spacing: [f64; 3],
    pub kind: Kind,
    pub components: usize,
}

impl Header {
    fn validate(&self) -> Result<(), String> {
        if !matches!(self.components, 1 | 3) {
            return Err(format!("components must be 1 or 3, got {}", self.components));
        }
        let vector_kind = matches!(self.kind, Kind::Velocity | Kind::Displacement);
        if vector_kind != (self.components == 3) {
            return Err(format!("kind {:?} with {} components", self.kind, self.components));
        }
        if self.kind == Kind::Labels && self.dtype == Dtype::F32 {
            return Err("labels must be stored as u8 or u16".into());
        }
        if self.kind != Kind::Labels && self.dtype != Dtype::F32 {
            return Err(format!("kind {:?} must be stored as f32", self.kind));
        }
        GridSpec::with_spacing(self.dims, self.spacing).map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn grid(&self) -> GridSpec {
        GridSpec::with_spacing(self.dims, self.spacing).expect("validated header")
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().product::<usize>() * self.components * self.dtype.size()
    }
}

/// A parsed file: header plus the raw payload bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeFile {
    pub header: Header,
    payload: Vec<u8>,
}

impl VolumeFile {
    pub fn new(header: Header, payload: Vec<u8>) -> Result<Self, String> {
        header.validate()?;
        if payload.len() != header.payload_len() {
            return Err(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                header.payload_len()
            ));
        }
        Ok(VolumeFile { header, payload })
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    pub fn from_reader(mut r: impl BufRead) -> Result<Self, String> {
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| e.to_string())?;
        if line.trim_end_matches('\n') != MAGIC {
            return Err(format!("missing {MAGIC} magic line"));
        }
        line.clear();
        r.read_line(&mut line).map_err(|e| e.to_string())?;
        let header: Header =
            serde_json::from_str(line.trim_end_matches('\n')).map_err(|e| format!("bad header: {e}"))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| e.to_string())?;
        VolumeFile::new(header, payload)
    }

    pub fn to_writer(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = serde_json::to_string(&self.header).expect("header serializes");
        writeln!(w, "{MAGIC}")?;
        writeln!(w, "{header}")?;
        w.write_all(&self.payload)
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
        VolumeFile::from_reader(BufReader::new(file)).map_err(|reason| CliError::format(path, reason))
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut buf = Vec::with_capacity(self.payload.len() + 128);
        self.to_writer(&mut buf).expect("writing to memory");
        fs::write(path, buf).map_err(|e| CliError::io(path, e))
    }

    pub fn grid(&self) -> GridSpec {
        self.header.grid()
    }

    fn f32_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.payload
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
    }

    fn scalar(grid: GridSpec, kind: Kind, values: &[f64]) -> Self {
        let payload = values
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let header = Header {
            dims: grid.dims,
            dtype: Dtype::F32,
            spacing: grid.spacing,
            kind,
            components: 1,
        };
        VolumeFile::new(header, payload).expect("consistent scalar file")
    }

    pub fn from_image(vol: &Volume) -> Self {
        Self::scalar(*vol.grid(), Kind::Image, vol.values())
    }

    pub fn from_scalar(vol: &Volume, kind: Kind) -> Self {
        Self::scalar(*vol.grid(), kind, vol.values())
    }

    pub fn from_field(field: &VectorField, kind: Kind) -> Self {
        let grid = *field.grid();
        let payload = field
            .vectors()
            .iter()
            .flatten()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect();
        let header = Header {
            dims: grid.dims,
            dtype: Dtype::F32,
            spacing: grid.spacing,
            kind,
            components: 3,
        };
        VolumeFile::new(header, payload).expect("consistent vector file")
    }

    /// Stored as u8 when every label fits, otherwise u16.
    pub fn from_labels(seg: &SegmentationMap) -> Result<Self, String> {
        let grid = *seg.grid();
        let max = seg.labels().iter().copied().max().unwrap_or(0);
        let (dtype, payload): (Dtype, Vec<u8>) = if max <= u32::from(u8::MAX) {
            (Dtype::U8, seg.labels().iter().map(|&l| l as u8).collect())
        } else if max <= u32::from(u16::MAX) {
            (
                Dtype::U16,
                seg.labels().iter().flat_map(|&l| (l as u16).to_le_bytes()).collect(),
            )
        } else {
            return Err(format!("label {max} does not fit in u16"));
        };
        let header = Header {
            dims: grid.dims,
            dtype,
            spacing: grid.spacing,
            kind: Kind::Labels,
            components: 1,
        };
        VolumeFile::new(header, payload)
    }

    fn expect_kind(&self, path: &Path, allowed: &[Kind]) -> CliResult<()> {
        if allowed.contains(&self.header.kind) {
            Ok(())
        } else {
            Err(CliError::format(
                path,
                format!("expected kind {allowed:?}, found {:?}", self.header.kind),
            ))
        }
    }

    /// Scalar intensity volume (kinds image and distance).
    pub fn to_volume(&self, path: &Path) -> CliResult<Volume> {
        self.expect_kind(path, &[Kind::Image, Kind::Distance])?;
        Volume::new(self.grid(), self.f32_values().collect()).map_err(|e| CliError::format(path, e.to_string()))
    }

    pub fn to_field(&self, path: &Path, allowed: &[Kind]) -> CliResult<VectorField> {
        self.expect_kind(path, allowed)?;
        let flat: Vec<f64> = self.f32_values().collect();
        let vectors = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        VectorField::new(self.grid(), vectors).map_err(|e| CliError::format(path, e.to_string()))
    }

    pub fn to_labels(&self, path: &Path) -> CliResult<SegmentationMap> {
        self.expect_kind(path, &[Kind::Labels])?;
        let labels = match self.header.dtype {
            Dtype::U8 => self.payload.iter().map(|&b| u32::from(b)).collect(),
            Dtype::U16 => self
                .payload
                .chunks_exact(2)
                .map(|b| u32::from(u16::from_le_bytes([b[0], b[1]])))
                .collect(),
            Dtype::F32 => unreachable!("validated header"),
        };
        SegmentationMap::new(self.grid(), labels).map_err(|e| CliError::format(path, e.to_string()))
    }
}
