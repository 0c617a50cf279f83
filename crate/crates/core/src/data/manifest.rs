use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DataError;

pub const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Original,
    Augmented,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Original => "original",
            Origin::Augmented => "augmented",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub class: usize,
    pub origin: Origin,
}

impl Sample {
    /// File stem of the original this sample derives from.
    pub fn origin_stem(&self) -> String {
        let stem = self.path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        match stem.find("__aug") {
            Some(i) => stem[..i].to_string(),
            None => stem,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Class names in index order (alphabetical).
    pub classes: Vec<String>,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScanReport {
    pub skipped: Vec<SkippedFile>,
    /// Class directories without a single decodable image.
    pub empty_classes: Vec<String>,
}

fn is_hidden(p: &Path) -> bool {
    p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(DataError::io(dir))? {
        let p = e.map_err(DataError::io(dir))?.path();
        if !is_hidden(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Inventory `root/<Class>/<image>`; class indices follow alphabetical directory order.
pub fn scan_dataset(root: &Path) -> Result<(DatasetManifest, ScanReport), DataError> {
    if !root.is_dir() {
        return Err(DataError::MissingRoot(root.to_path_buf()));
    }
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    let classes: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let mut candidates = Vec::new();
    for (class, dir) in class_dirs.iter().enumerate() {
        for f in sorted_entries(dir)?.into_iter().filter(|p| p.is_file()) {
            candidates.push((class, f));
        }
    }
    let decoded: Vec<Result<(), String>> = candidates
        .par_iter()
        .map(|(_, p)| {
            image::ImageReader::open(p)
                .map_err(|e| e.to_string())?
                .with_guessed_format()
                .map_err(|e| e.to_string())?
                .decode()
                .map(|_| ())
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut report = ScanReport::default();
    let mut samples = Vec::new();
    for ((class, path), ok) in candidates.into_iter().zip(decoded) {
        match ok {
            Ok(()) => {
                let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
                let stem = rel.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let origin = if stem.contains("__aug") {
                    Origin::Augmented
                } else {
                    Origin::Original
                };
                samples.push(Sample {
                    path: rel,
                    class,
                    origin,
                });
            }
            Err(reason) => report.skipped.push(SkippedFile { path, reason }),
        }
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        classes,
        samples,
    };
    let counts = manifest.class_counts();
    report.empty_classes = manifest
        .classes
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n == 0)
        .map(|(c, _)| c.clone())
        .collect();
    Ok((manifest, report))
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for s in &self.samples {
            c[s.class] += 1;
        }
        c
    }

    pub fn absolute(&self, s: &Sample) -> PathBuf {
        self.root.join(&s.path)
    }

    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            root: self.root.clone(),
            classes: self.classes.clone(),
            samples,
        }
    }

    /// Tab-separated `relative_path class_index origin` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let p = s.path.to_string_lossy().replace('\\', "/");
            out.push_str(&format!("{p}\t{}\t{}\n", s.class, s.origin.as_str()));
        }
        out
    }

    pub fn write_tsv(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_tsv()).map_err(DataError::io(path))
    }

    /// Parse a manifest file whose paths are relative to `root`. Class names come from the
    /// first path component of each entry.
    pub fn read_tsv(root: &Path, path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(DataError::io(path))?;
        Self::parse_tsv(root, &text)
    }

    pub fn parse_tsv(root: &Path, text: &str) -> Result<Self, DataError> {
        let mut samples = Vec::new();
        let mut names: BTreeMap<usize, String> = BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |message: String| DataError::Manifest { line: i + 1, message };
            let fields: Vec<&str> = line.split('\t').collect();
            let [p, c, o] = fields[..] else {
                return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
            };
            let class: usize = c.parse().map_err(|_| bad(format!("class index `{c}` is not an integer")))?;
            let origin = match o {
                "original" => Origin::Original,
                "augmented" => Origin::Augmented,
                other => return Err(bad(format!("unknown origin `{other}`"))),
            };
            let path = PathBuf::from(p);
            let dir = path
                .components()
                .next()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .unwrap_or_default();
            if let Some(prev) = names.insert(class, dir.clone()) {
                if prev != dir {
                    return Err(bad(format!("class {class} maps to both `{prev}` and `{dir}`")));
                }
            }
            samples.push(Sample { path, class, origin });
        }
        let k = names.keys().next_back().map_or(0, |&m| m + 1);
        let classes = (0..k).map(|i| names.get(&i).cloned().unwrap_or_default()).collect();
        Ok(Self {
            root: root.to_path_buf(),
            classes,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn write_img(p: &Path) {
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        RgbImage::from_pixel(4, 4, image::Rgb([10, 20, 30])).save(p).unwrap();
    }

    #[test]
    fn alphabetical_class_order_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let r = dir.path();
        write_img(&r.join("b/x.png"));
        write_img(&r.join("a/y.png"));
        write_img(&r.join("a/z__aug1.png"));
        fs::write(r.join("a/broken.jpg"), b"not an image").unwrap();
        fs::write(r.join("a/.hidden.png"), b"ignored").unwrap();
        fs::create_dir_all(r.join("c")).unwrap();
        let (m, rep) = scan_dataset(r).unwrap();
        assert_eq!(m.classes, vec!["a", "b", "c"]);
        assert_eq!(m.class_counts(), vec![2, 1, 0]);
        assert_eq!(rep.skipped.len(), 1);
        assert_eq!(rep.empty_classes, vec!["c"]);
        assert!(m.samples.iter().any(|s| s.origin == Origin::Augmented && s.origin_stem() == "z"));
    }

    #[test]
    fn fixture_three_by_four() {
        let dir = tempfile::tempdir().unwrap();
        for c in ["k", "l", "m"] {
            for i in 0..4 {
                write_img(&dir.path().join(format!("{c}/{i}.png")));
            }
        }
        let (m, _) = scan_dataset(dir.path()).unwrap();
        assert_eq!(m.len(), 12);
        let idx: std::collections::BTreeSet<usize> = m.samples.iter().map(|s| s.class).collect();
        assert_eq!(idx.into_iter().collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    #[test]
    fn tsv_round_trip() {
        let m = DatasetManifest {
            root: PathBuf::from("/r"),
            classes: vec!["A".into(), "B".into()],
            samples: vec![
                Sample {
                    path: "A/1.jpg".into(),
                    class: 0,
                    origin: Origin::Original,
                },
                Sample {
                    path: "B/2__aug1.jpg".into(),
                    class: 1,
                    origin: Origin::Augmented,
                },
            ],
        };
        let back = DatasetManifest::parse_tsv(Path::new("/r"), &m.to_tsv()).unwrap();
        assert_eq!(back, m);
        assert!(DatasetManifest::parse_tsv(Path::new("/r"), "A/1.jpg\tx\toriginal").is_err());
    }

    #[test]
    fn missing_root() {
        assert!(matches!(
            scan_dataset(Path::new("/definitely/not/here")),
            Err(DataError::MissingRoot(_))
        ));
    }
}
