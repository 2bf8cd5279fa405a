//! On-disk formats: IMXP multiplex rasters, the panel manifest, and the
//! little-endian byte helpers shared with the checkpoint container.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Dataset, MultiplexImage};
use crate::error::{bail, Error, Result};
use crate::hyperconv::{MarkerSet, MarkerVocabulary};
use crate::tensor::Tensor;

pub const IMXP_MAGIC: &[u8; 4] = b"IMXP";
pub const IMXP_VERSION: u32 = 1;

/// Cursor over a byte buffer that reports the offset of any short read.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }

    pub fn error(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            msg: msg.into(),
        }
    }

    pub fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.error(format!(
                "truncated {what}: need {n} bytes, {} left",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub fn utf8(&mut self, len: usize, what: &str) -> Result<String> {
        let start = self.offset();
        let bytes = self.take(len, what)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format {
            offset: start,
            msg: format!("{what} is not UTF-8"),
        })
    }

    pub fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or_else(|| self.error(format!("{what} too large")))?;
        let bytes = self.take(len, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect())
    }
}

pub fn put_u16(out: &mut Vec<u8>, v: u16) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Argument(format!("{what} {v} exceeds u32")))
}

pub fn encode_imxp(img: &MultiplexImage) -> Result<Vec<u8>> {
    let (c, h, w) = img.data.chw()?;
    let count = u16::try_from(c).map_err(|_| Error::Argument(format!("{c} channels exceed u16")))?;
    let mut out = Vec::with_capacity(20 + c * 16 + img.data.numel() * 4);
    out.extend_from_slice(IMXP_MAGIC);
    put_u32(&mut out, IMXP_VERSION);
    for d in [c, h, w] {
        put_u32(&mut out, to_u32(d, "dimension")?);
    }
    put_u16(&mut out, count);
    for name in &img.markers {
        let len = u16::try_from(name.len()).map_err(|_| Error::Argument(format!("marker name too long: {name}")))?;
        put_u16(&mut out, len);
        out.extend_from_slice(name.as_bytes());
    }
    put_f32s(&mut out, img.data.data());
    Ok(out)
}

pub fn decode_imxp(bytes: &[u8]) -> Result<MultiplexImage> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != IMXP_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: "bad magic, expected IMXP".into(),
        });
    }
    let version = r.u32("version")?;
    if version != IMXP_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported IMXP version {version}"),
        });
    }
    let c = r.u32("channel count")? as usize;
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    if c == 0 || h == 0 || w == 0 {
        return Err(r.error(format!("empty raster {c}x{h}x{w}")));
    }
    let count = r.u16("marker count")? as usize;
    if count != c {
        return Err(r.error(format!("{count} marker names for {c} channels")));
    }
    let mut markers = Vec::with_capacity(c);
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        markers.push(r.utf8(len, &format!("marker name {i}"))?);
    }
    let n = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| r.error("raster too large"))?;
    let data = r.f32s(n, "payload")?;
    if !r.is_empty() {
        return Err(r.error("trailing bytes after payload"));
    }
    MultiplexImage::new(markers, Tensor::new(&[c, h, w], data)?)
}

pub fn write_imxp(path: &Path, img: &MultiplexImage) -> Result<()> {
    fs::write(path, encode_imxp(img)?).map_err(|e| Error::io(path, e))
}

pub fn read_imxp(path: &Path) -> Result<MultiplexImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_imxp(&bytes)
}

/// Global vocabulary plus the marker lists of every panel, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct PanelManifest {
    pub vocabulary: Vec<String>,
    pub panels: Vec<Vec<String>>,
}

impl PanelManifest {
    pub fn vocab(&self) -> Result<MarkerVocabulary> {
        MarkerVocabulary::new(&self.vocabulary)
    }

    pub fn panel_sets(&self) -> Result<Vec<MarkerSet>> {
        let vocab = self.vocab()?;
        self.panels.iter().map(|p| vocab.resolve(p)).collect()
    }

    /// The first block lists the vocabulary; every later block is a panel.
    pub fn parse(text: &str) -> Result<Self> {
        let mut blocks: Vec<Vec<String>> = vec![Vec::new()];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                if !blocks.last().unwrap().is_empty() {
                    blocks.push(Vec::new());
                }
            } else {
                blocks.last_mut().unwrap().push(line.to_string());
            }
        }
        if blocks.last().is_some_and(Vec::is_empty) {
            blocks.pop();
        }
        if blocks.is_empty() {
            bail!(Vocabulary, "manifest declares no markers");
        }
        let vocabulary = blocks.remove(0);
        let m = Self {
            vocabulary,
            panels: blocks,
        };
        m.panel_sets()?;
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.vocabulary.join("\n");
        s.push('\n');
        for p in &self.panels {
            s.push('\n');
            s.push_str(&p.join("\n"));
            s.push('\n');
        }
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const IMAGE_DIR: &str = "images";
pub const TRUTH_DIR: &str = "truth";

/// Sorted `*.imxp` paths of a directory.
pub fn list_imxp(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|e| e == "imxp") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem_of(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Loads `DIR/manifest.txt` and every `DIR/images/*.imxp`.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = PanelManifest::read(&dir.join(MANIFEST_FILE))?;
    let mut images = Vec::new();
    let mut names = Vec::new();
    for p in list_imxp(&dir.join(IMAGE_DIR))? {
        images.push(read_imxp(&p)?);
        names.push(stem_of(&p));
    }
    if images.is_empty() {
        bail!(Argument, "no images under {}", dir.join(IMAGE_DIR).display());
    }
    Dataset::new(manifest.vocab()?, manifest.panel_sets()?, images, names)
}

/// Ground-truth sidecar for `name`, if the dataset carries one: the clean
/// raster and the per-pixel noise standard deviation.
pub fn load_truth(dir: &Path, name: &str) -> Result<Option<(MultiplexImage, MultiplexImage)>> {
    let clean = dir.join(TRUTH_DIR).join(format!("{name}.clean.imxp"));
    let sigma = dir.join(TRUTH_DIR).join(format!("{name}.sigma.imxp"));
    if !clean.exists() {
        return Ok(None);
    }
    Ok(Some((read_imxp(&clean)?, read_imxp(&sigma)?)))
}
