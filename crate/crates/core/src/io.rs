//! File containers: `.rfseq` frame sequences and `.usimg` images, each a
//! one-line JSON header followed by little-endian `f32` samples.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ArrayGeometry, ImageGrid, Point3, RFFrame, USImage};
use crate::mlp::TrainingSet;
use crate::simulator::{NoiseSpec, Sequence, TrajectorySpec};

pub const FORMAT_VERSION: u32 = 1;

/// Header of a `.rfseq` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceHeader {
    pub format_version: u32,
    pub geometry: ArrayGeometry,
    pub grid: ImageGrid,
    pub n_frames: usize,
    /// Ground truth `[lateral, axial, elevational]` per frame, mm.
    pub truth: Vec<[f64; 3]>,
    #[serde(default)]
    pub trajectory: Option<TrajectorySpec>,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
    /// Noise standard deviation on regular frames.
    #[serde(default)]
    pub noise_sigma: Option<f64>,
}

/// A sequence as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFile {
    pub header: SequenceHeader,
    pub frames: Vec<RFFrame>,
}

impl SequenceFile {
    pub fn from_sequence(
        geometry: &ArrayGeometry,
        grid: &ImageGrid,
        seq: Sequence,
        trajectory: Option<TrajectorySpec>,
        noise: Option<NoiseSpec>,
    ) -> Self {
        Self {
            header: SequenceHeader {
                format_version: FORMAT_VERSION,
                geometry: geometry.clone(),
                grid: *grid,
                n_frames: seq.frames.len(),
                truth: seq.truth.iter().map(|p| p.to_array()).collect(),
                trajectory,
                noise,
                noise_sigma: Some(seq.noise_sigma),
            },
            frames: seq.frames,
        }
    }

    pub fn truth(&self) -> Vec<Point3> {
        self.header
            .truth
            .iter()
            .map(|t| Point3::new(t[0], t[1], t[2]))
            .collect()
    }
}

fn write_f32s<W: Write>(w: &mut W, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f32s<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::parse(what, format!("truncated sample data: {e}")))?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn read_header<T: for<'de> Deserialize<'de>, R: BufRead>(r: &mut R, path: &Path) -> Result<T> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    serde_json::from_str(line.trim_end()).map_err(|e| {
        Error::parse(
            format!("{} header, column {}", path.display(), e.column()),
            e.to_string(),
        )
    })
}

fn expect_eof<R: Read>(r: &mut R, path: &Path) -> Result<()> {
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::parse(path.display().to_string(), "trailing bytes after sample data"));
    }
    Ok(())
}

pub fn write_sequence(path: &Path, seq: &SequenceFile) -> Result<()> {
    let h = &seq.header;
    if h.n_frames != seq.frames.len() || h.truth.len() != seq.frames.len() {
        return Err(Error::domain("header frame count does not match the frames"));
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, h)?;
    w.write_all(b"\n")?;
    for f in &seq.frames {
        f.check_geometry(&h.geometry)?;
        write_f32s(&mut w, f.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sequence(path: &Path) -> Result<SequenceFile> {
    let mut r = BufReader::new(File::open(path)?);
    let header: SequenceHeader = read_header(&mut r, path)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::parse("format_version", format!("unsupported version {}", header.format_version)));
    }
    if header.truth.len() != header.n_frames {
        return Err(Error::parse("truth", "length differs from n_frames"));
    }
    let (s, l) = (header.geometry.num_sources, header.geometry.record_length);
    let frames = (0..header.n_frames)
        .map(|k| {
            let data = read_f32s(&mut r, s * l, &format!("{} frame {k}", path.display()))?;
            RFFrame::from_data(s, l, data, k)
        })
        .collect::<Result<Vec<_>>>()?;
    expect_eof(&mut r, path)?;
    Ok(SequenceFile { header, frames })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageHeader {
    pub format_version: u32,
    pub geometry: ArrayGeometry,
    pub grid: ImageGrid,
}

/// Pixels are stored lateral-major, as in memory.
pub fn write_image(path: &Path, geometry: &ArrayGeometry, image: &USImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = ImageHeader {
        format_version: FORMAT_VERSION,
        geometry: geometry.clone(),
        grid: image.grid,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    write_f32s(&mut w, image.intensity())?;
    w.flush()?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<(ArrayGeometry, USImage)> {
    let mut r = BufReader::new(File::open(path)?);
    let header: ImageHeader = read_header(&mut r, path)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::parse("format_version", format!("unsupported version {}", header.format_version)));
    }
    let data = read_f32s(&mut r, header.grid.len(), &path.display().to_string())?;
    expect_eof(&mut r, path)?;
    Ok((header.geometry, USImage::from_data(header.grid, data)?))
}

#[derive(Serialize, Deserialize)]
struct TrainingRow {
    lateral: f64,
    axial: f64,
    elevational: f64,
    mu: f64,
    offset: f64,
    aberration: f64,
}

/// Training rows as CSV, one simulated grid point per line.
pub fn write_training_set<W: Write>(writer: W, set: &TrainingSet) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for ((u, t), p) in set.inputs.iter().zip(&set.targets).zip(&set.positions) {
        w.serialize(TrainingRow {
            lateral: p.lateral,
            axial: p.axial,
            elevational: p.elevational,
            mu: u[2],
            offset: t[0],
            aberration: t[1],
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training_set<R: Read>(reader: R) -> Result<TrainingSet> {
    let mut set = TrainingSet::default();
    for (i, row) in csv::Reader::from_reader(reader).deserialize::<TrainingRow>().enumerate() {
        let r = row.map_err(|e| Error::parse(format!("training row {}", i + 1), e.to_string()))?;
        if r.offset < 0.0 {
            return Err(Error::parse(format!("training row {}", i + 1), "negative offset target"));
        }
        set.inputs.push([r.axial, r.lateral, r.mu]);
        set.targets.push([r.offset, r.aberration]);
        set.positions.push(Point3::new(r.lateral, r.axial, r.elevational));
    }
    Ok(set)
}
