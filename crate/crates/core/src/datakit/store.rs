use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::Image;
use crate::error::{ensure, Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"MTLF";
pub const IMAGE_MAGIC: [u8; 4] = *b"MTLI";
pub const STORE_VERSION: u16 = 1;

fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> std::io::Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|_| Error::Format(format!("truncated store: missing {what}")))?;
    Ok(buf)
}

fn read_f32s<R: Read>(r: &mut R, count: usize) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format(format!("truncated store: expected {count} values")))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::Format(e.to_string()))?;
    ensure_format(rest.is_empty(), format!("{} trailing bytes after the payload", rest.len()))?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

fn ensure_format(cond: bool, message: String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::Format(message))
    }
}

fn read_header<R: Read>(r: &mut R, magic: [u8; 4]) -> Result<u64> {
    let got: [u8; 4] = read_exact(r, "magic")?;
    ensure_format(
        got == magic,
        format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&got), String::from_utf8_lossy(&magic)),
    )?;
    let version = u16::from_le_bytes(read_exact(r, "version")?);
    ensure_format(version == STORE_VERSION, format!("unsupported store version {version}"))?;
    Ok(u64::from_le_bytes(read_exact(r, "frame count")?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Per-frame feature rows: `MTLF`, u16 version, u64 frame count, u32 feature_dim, then
/// row-major little-endian f32. The index CSV maps `row` to `(video_id, frame_index)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    pub feature_dim: usize,
    pub keys: Vec<(String, u64)>,
    pub values: Vec<f32>,
}

impl FeatureStore {
    pub fn new(feature_dim: usize) -> Self {
        FeatureStore { feature_dim, keys: Vec::new(), values: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn push(&mut self, video_id: &str, frame_index: u64, row: &[f32]) -> Result<()> {
        ensure!(
            row.len() == self.feature_dim,
            "feature row of length {} in a store of dimension {}",
            row.len(),
            self.feature_dim
        );
        self.keys.push((video_id.to_string(), frame_index));
        self.values.extend_from_slice(row);
        Ok(())
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    /// Row lookup table keyed by `(video_id, frame_index)`.
    pub fn lookup(&self) -> HashMap<(&str, u64), usize> {
        self.keys.iter().enumerate().map(|(i, (v, f))| ((v.as_str(), *f), i)).collect()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&FEATURE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.feature_dim as u32).to_le_bytes())?;
        write_f32s(w, &self.values)
    }

    pub fn write_index<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["row", "video_id", "frame_index"])?;
        for (i, (v, f)) in self.keys.iter().enumerate() {
            wtr.write_record([i.to_string(), v.clone(), f.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("<feature index>", e))
    }

    /// Writes `<path>` and its index `<path minus extension>.index.csv`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = create(path)?;
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        let index = index_path(path);
        self.write_index(create(&index)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = open(path)?;
        let count = read_header(&mut r, FEATURE_MAGIC)? as usize;
        let dim = u32::from_le_bytes(read_exact(&mut r, "feature_dim")?) as usize;
        let values = read_f32s(&mut r, count * dim)?;
        let index = index_path(path);
        let mut rdr = csv::Reader::from_reader(open(&index)?);
        let mut keys = Vec::with_capacity(count);
        for (i, row) in rdr.records().enumerate() {
            let row = row?;
            let bad = || Error::Parse { path: index.display().to_string(), message: format!("bad index row {}", i + 1) };
            let r: usize = row.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            ensure_format(r == i, format!("index row {} points at feature row {r}", i + 1))?;
            let frame: u64 = row.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            keys.push((row.get(1).ok_or_else(bad)?.to_string(), frame));
        }
        ensure_format(keys.len() == count, format!("index lists {} rows, store holds {count}", keys.len()))?;
        Ok(FeatureStore { feature_dim: dim, keys, values })
    }
}

/// `features.bin` → `features.index.csv`.
pub fn index_path(path: &Path) -> PathBuf {
    path.with_extension("index.csv")
}

/// Packed grayscale images: `MTLI`, u16 version, u64 frame count, u32 height,
/// u32 width, then row-major little-endian f32 pixels. The index CSV maps `row` to
/// `frame_ref`.
///
/// Frame references missing from the pack are looked up as image files relative to
/// `base_dir` when one is set.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageStore {
    pub height: usize,
    pub width: usize,
    pub frame_refs: Vec<String>,
    pub pixels: Vec<f32>,
    pub base_dir: Option<PathBuf>,
    index: HashMap<String, usize>,
}

impl ImageStore {
    pub fn new(height: usize, width: usize) -> Self {
        ImageStore { height, width, frame_refs: Vec::new(), pixels: Vec::new(), base_dir: None, index: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.frame_refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_refs.is_empty()
    }

    pub fn push(&mut self, frame_ref: &str, img: &Image) -> Result<()> {
        ensure!(
            img.height == self.height && img.width == self.width,
            "image `{frame_ref}` is {}x{}, store holds {}x{}",
            img.height,
            img.width,
            self.height,
            self.width
        );
        ensure!(!self.index.contains_key(frame_ref), "duplicate frame_ref `{frame_ref}`");
        self.index.insert(frame_ref.to_string(), self.frame_refs.len());
        self.frame_refs.push(frame_ref.to_string());
        self.pixels.extend_from_slice(&img.pixels);
        Ok(())
    }

    /// Image for `frame_ref`, from the pack or from disk.
    pub fn get(&self, frame_ref: &str) -> Result<Image> {
        if let Some(&i) = self.index.get(frame_ref) {
            let n = self.height * self.width;
            return Ok(Image::new(self.height, self.width, self.pixels[i * n..(i + 1) * n].to_vec()));
        }
        let Some(base) = &self.base_dir else {
            return Err(crate::error::invalid!("frame `{frame_ref}` not found in the image store"));
        };
        let path = base.join(frame_ref);
        let img = image::open(&path)
            .map_err(|e| crate::error::invalid!("frame `{frame_ref}` could not be read: {e}"))?
            .to_luma8();
        ensure!(
            img.height() as usize == self.height && img.width() as usize == self.width,
            "frame `{frame_ref}` is {}x{}, expected {}x{}",
            img.height(),
            img.width(),
            self.height,
            self.width
        );
        Ok(Image::new(self.height, self.width, img.pixels().map(|p| p.0[0] as f32 / 255.0).collect()))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&IMAGE_MAGIC)?;
        w.write_all(&STORE_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        write_f32s(w, &self.pixels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = create(path)?;
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))?;
        let mut wtr = csv::Writer::from_writer(create(&index_path(path))?);
        wtr.write_record(["row", "frame_ref"])?;
        for (i, f) in self.frame_refs.iter().enumerate() {
            wtr.write_record([i.to_string(), f.clone()])?;
        }
        wtr.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = open(path)?;
        let count = read_header(&mut r, IMAGE_MAGIC)? as usize;
        let height = u32::from_le_bytes(read_exact(&mut r, "height")?) as usize;
        let width = u32::from_le_bytes(read_exact(&mut r, "width")?) as usize;
        let pixels = read_f32s(&mut r, count * height * width)?;
        let mut rdr = csv::Reader::from_reader(open(&index_path(path))?);
        let mut store = ImageStore::new(height, width);
        store.pixels = pixels;
        for row in rdr.records() {
            let row = row?;
            let f = row.get(1).unwrap_or_default().to_string();
            store.index.insert(f.clone(), store.frame_refs.len());
            store.frame_refs.push(f);
        }
        ensure_format(store.len() == count, format!("index lists {} frames, store holds {count}", store.len()))?;
        store.base_dir = path.parent().map(Path::to_path_buf);
        Ok(store)
    }
}
