use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::png_io::{load_image, load_mask, save_image, save_mask};
use super::preprocess::SegSample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// 80/10/10 assignment from an FNV-1a hash of the id.
    pub fn from_id(id: &str) -> Self {
        let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3));
        match h % 10 {
            0..=7 => Split::Train,
            8 => Split::Val,
            _ => Split::Test,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest root.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub split: Split,
}

/// Image/mask pairs under a common root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

const IMAGE_DIR: &str = "images";
const MASK_DIR: &str = "masks";
pub const MANIFEST_FILE: &str = "manifest.tsv";

impl Manifest {
    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Data(format!("duplicate sample id `{}`", e.id)));
            }
        }
        Ok(())
    }

    /// Parses `id<TAB>image<TAB>mask[<TAB>split]` lines; `#` starts a
    /// comment line. Paths are relative to the manifest's directory.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if !(3..=4).contains(&cols.len()) {
                return Err(Error::Data(format!(
                    "{}:{}: expected 3 or 4 tab-separated columns, found {}",
                    path.display(),
                    n + 1,
                    cols.len()
                )));
            }
            let split = match cols.get(3) {
                Some(s) => s.parse()?,
                None => Split::from_id(cols[0]),
            };
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                image: cols[1].into(),
                mask: cols[2].into(),
                split,
            });
        }
        let m = Self { root, entries };
        m.check_unique()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", e.id, e.image.display(), e.mask.display(), e.split.name());
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Kvasir-style layout: `root/images/<name>.png` paired with
    /// `root/masks/<name>.png`, id = file stem.
    pub fn from_dir(root: &Path) -> Result<Self> {
        let img_dir = root.join(IMAGE_DIR);
        let rd = std::fs::read_dir(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let mut names = Vec::new();
        for ent in rd {
            let ent = ent.map_err(|e| Error::io(&img_dir, e))?;
            let p = ent.path();
            if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
                names.push(ent.file_name());
            }
        }
        names.sort();
        let mut entries = Vec::with_capacity(names.len());
        for name in names {
            let mask = Path::new(MASK_DIR).join(&name);
            if !root.join(&mask).is_file() {
                return Err(Error::Data(format!("no mask for image {}", Path::new(&name).display())));
            }
            let id = Path::new(&name).file_stem().unwrap_or_default().to_string_lossy().into_owned();
            entries.push(ManifestEntry {
                split: Split::from_id(&id),
                id,
                image: Path::new(IMAGE_DIR).join(&name),
                mask,
            });
        }
        if entries.is_empty() {
            return Err(Error::Data(format!("no PNG images under {}", img_dir.display())));
        }
        let m = Self {
            root: root.to_path_buf(),
            entries,
        };
        m.check_unique()?;
        Ok(m)
    }

    /// A manifest file, or a directory holding either `manifest.tsv` or
    /// the images/ + masks/ layout.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let file = path.join(MANIFEST_FILE);
            if file.is_file() {
                Self::read(&file)
            } else {
                Self::from_dir(path)
            }
        } else {
            Self::read(path)
        }
    }

    pub fn with_split(&self, split: Split) -> Self {
        Self {
            root: self.root.clone(),
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
        }
    }

    pub fn load_entry(&self, e: &ManifestEntry) -> Result<SegSample> {
        let image = load_image(&self.root.join(&e.image))?;
        let mask = load_mask(&self.root.join(&e.mask))?;
        SegSample::new(e.id.clone(), image, mask)
    }

    pub fn load_all(&self) -> Result<Vec<SegSample>> {
        self.entries.iter().map(|e| self.load_entry(e)).collect()
    }
}

/// Writes samples in the images/ + masks/ layout plus a manifest, with
/// splits assigned from id hashes.
pub fn write_dataset(root: &Path, samples: &[SegSample]) -> Result<Manifest> {
    for d in [IMAGE_DIR, MASK_DIR] {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let name = format!("{}.png", s.id);
        let (image, mask) = (Path::new(IMAGE_DIR).join(&name), Path::new(MASK_DIR).join(&name));
        save_image(&s.image, &root.join(&image))?;
        save_mask(&s.mask, &root.join(&mask))?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            image,
            mask,
            split: Split::from_id(&s.id),
        });
    }
    let m = Manifest {
        root: root.to_path_buf(),
        entries,
    };
    m.write(&root.join(MANIFEST_FILE))?;
    Ok(m)
}
