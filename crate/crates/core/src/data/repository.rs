use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::FeatureSequence;

const MAGIC: &[u8; 4] = b"FSEQ";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;
const EXTENSION: &str = "fseq";

/// Directory of `<video_id>.fseq` files sharing one embedding width.
///
/// Layout of a file: `"FSEQ"`, then little-endian `u32 version`, `u32 L`,
/// `u32 E`, `f32 fps`, `u32 stride_frames`, then `L×E` `f32` values row-major.
#[derive(Clone, Debug)]
pub struct FeatureRepository {
    root: PathBuf,
    dim: usize,
    index: BTreeMap<String, PathBuf>,
}

struct Header {
    len: usize,
    dim: usize,
    fps: f32,
    stride: u32,
}

impl FeatureRepository {
    /// Empty (or existing) repository at `root` for width `dim`.
    pub fn create(root: impl Into<PathBuf>, dim: usize) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        let mut repo = FeatureRepository::open_inner(root, Some(dim))?;
        repo.dim = dim;
        Ok(repo)
    }

    /// Index an existing repository; the width is taken from its files.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        FeatureRepository::open_inner(root.into(), None)
    }

    fn open_inner(root: PathBuf, expected_dim: Option<usize>) -> Result<Self> {
        let mut index = BTreeMap::new();
        let mut dim = expected_dim;
        let mut entries: Vec<PathBuf> = fs::read_dir(&root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == EXTENSION))
            .collect();
        entries.sort();
        for path in entries {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::invalid(format!("bad feature file name {}", path.display())))?
                .to_string();
            let header = read_header(&path, &mut File::open(&path)?)?;
            match dim {
                Some(d) if d != header.dim => {
                    return Err(Error::Corrupt {
                        path,
                        reason: format!("width {} differs from repository width {d}", header.dim),
                    })
                }
                _ => dim = Some(header.dim),
            }
            index.insert(id, path);
        }
        Ok(FeatureRepository {
            root,
            dim: dim.unwrap_or(0),
            index,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, video_id: &str) -> bool {
        self.index.contains_key(video_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.index.keys().map(String::as_str)
    }

    fn path_of(&self, video_id: &str) -> Result<&PathBuf> {
        self.index
            .get(video_id)
            .ok_or_else(|| Error::NotFound(format!("video `{video_id}`")))
    }

    /// Feature length of `video_id` from its header.
    pub fn len_of(&self, video_id: &str) -> Result<usize> {
        let path = self.path_of(video_id)?;
        Ok(read_header(path, &mut File::open(path)?)?.len)
    }

    pub fn read_features(&self, video_id: &str) -> Result<FeatureSequence> {
        let path = self.path_of(video_id)?;
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let header = read_header(path, &mut &bytes[..])?;
        let payload = &bytes[HEADER_LEN..];
        let expected = header.len * header.dim * 4;
        if payload.len() != expected {
            return Err(Error::Corrupt {
                path: path.clone(),
                reason: format!(
                    "declared {}x{} needs {expected} payload bytes, found {}",
                    header.len,
                    header.dim,
                    payload.len()
                ),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        FeatureSequence::new(video_id, header.len, header.dim, data, header.stride, header.fps).map_err(
            |e| Error::Corrupt {
                path: path.clone(),
                reason: e.to_string(),
            },
        )
    }

    pub fn write_features(&mut self, seq: &FeatureSequence) -> Result<()> {
        if !valid_id(&seq.video_id) {
            return Err(Error::invalid(format!(
                "video id `{}` must be non-empty and use only [A-Za-z0-9_.-]",
                seq.video_id
            )));
        }
        if self.dim == 0 {
            self.dim = seq.dim();
        }
        if seq.dim() != self.dim {
            return Err(Error::invalid(format!(
                "{}: width {} differs from repository width {}",
                seq.video_id,
                seq.dim(),
                self.dim
            )));
        }
        let path = self.root.join(format!("{}.{EXTENSION}", seq.video_id));
        let mut w = BufWriter::new(File::create(&path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(seq.len() as u32).to_le_bytes())?;
        w.write_all(&(seq.dim() as u32).to_le_bytes())?;
        w.write_all(&seq.fps.to_le_bytes())?;
        w.write_all(&seq.stride_frames.to_le_bytes())?;
        for v in seq.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        self.index.insert(seq.video_id.clone(), path);
        Ok(())
    }

    /// Every sequence in id order.
    pub fn load_all(&self) -> Result<Vec<FeatureSequence>> {
        self.index.keys().map(|id| self.read_features(id)).collect()
    }
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

fn read_header(path: &Path, r: &mut impl Read) -> Result<Header> {
    let mut buf = [0u8; HEADER_LEN];
    r.read_exact(&mut buf).map_err(|_| Error::Corrupt {
        path: path.to_path_buf(),
        reason: "truncated header".into(),
    })?;
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if &buf[0..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes([buf[o], buf[o + 1], buf[o + 2], buf[o + 3]]);
    if u32_at(4) != VERSION {
        return Err(corrupt("unsupported version"));
    }
    let header = Header {
        len: u32_at(8) as usize,
        dim: u32_at(12) as usize,
        fps: f32::from_le_bytes([buf[16], buf[17], buf[18], buf[19]]),
        stride: u32_at(20),
    };
    if header.len == 0 || header.dim == 0 {
        return Err(corrupt("zero length or width"));
    }
    Ok(header)
}
