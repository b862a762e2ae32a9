//! CULane-style annotations and list files, plus the synthetic scene generator.

mod synth;

pub use synth::{
    darken, render_scene, synth_generate, DarkTransform, LightDomain, Scene, SyntheticSceneConfig,
};

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Polyline;

/// Lanes of one image in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LaneAnnotation {
    pub lanes: Vec<Polyline>,
}

impl LaneAnnotation {
    /// Existence flags by the at-least-two-points rule.
    pub fn existence(&self) -> Vec<bool> {
        self.lanes.iter().map(|l| l.len() >= 2).collect()
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Parses `.lines.txt` content; `path` only labels errors.
pub fn parse_lines_str(text: &str, path: &Path) -> Result<LaneAnnotation> {
    let mut lanes = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.is_empty() {
            continue;
        }
        if tokens.len() % 2 != 0 {
            return Err(parse_err(
                path,
                i + 1,
                format!("odd number of coordinates ({})", tokens.len()),
            ));
        }
        let mut values = Vec::with_capacity(tokens.len());
        for t in &tokens {
            let v: f64 = t
                .parse()
                .map_err(|_| parse_err(path, i + 1, format!("malformed number {t:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(path, i + 1, format!("non-finite coordinate {t:?}")));
            }
            values.push(v);
        }
        let points: Vec<(f64, f64)> = values.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let lane = Polyline::new(points).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        lanes.push(lane);
    }
    Ok(LaneAnnotation { lanes })
}

pub fn parse_lines_file(path: &Path) -> Result<LaneAnnotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lines_str(&text, path)
}

/// One text line per lane of space-separated `x y` pairs.
pub fn format_lines<'a>(lanes: impl IntoIterator<Item = &'a Polyline>) -> String {
    let mut out = String::new();
    for lane in lanes {
        let mut first = true;
        for &(x, y) in lane.points() {
            if !first {
                out.push(' ');
            }
            first = false;
            write!(out, "{} {}", fmt_coord(x), fmt_coord(y)).expect("write to string");
        }
        out.push('\n');
    }
    out
}

fn fmt_coord(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `img.png` -> `img.lines.txt`.
pub fn lines_path_for(image: &Path) -> PathBuf {
    image.with_extension("lines.txt")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ListEntry {
    pub image: PathBuf,
    pub seg_label: Option<PathBuf>,
    pub existence: Option<Vec<u8>>,
    pub category: Option<String>,
}

/// Resolves a list-file path: absolute paths that exist are kept, everything
/// else is taken relative to `root` (a leading `/` is stripped, as in CULane lists).
pub fn resolve_path(root: &Path, p: &str) -> PathBuf {
    let pb = PathBuf::from(p);
    if pb.is_absolute() && pb.exists() {
        return pb;
    }
    root.join(p.trim_start_matches('/'))
}

/// Reads `image seg_label e1 .. eL` lines; paths resolve against the list's directory.
pub fn load_train_list(path: &Path, lanes: usize) -> Result<Vec<ListEntry>> {
    let root = path.parent().unwrap_or(Path::new("."));
    load_train_list_with_root(path, lanes, root)
}

pub fn load_train_list_with_root(path: &Path, lanes: usize, root: &Path) -> Result<Vec<ListEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() || cols[0].starts_with('#') {
            continue;
        }
        if cols.len() != 2 + lanes {
            return Err(parse_err(
                path,
                i + 1,
                format!("expected {} columns (image, label, {lanes} flags), found {}", 2 + lanes, cols.len()),
            ));
        }
        let mut flags = Vec::with_capacity(lanes);
        for c in &cols[2..] {
            match *c {
                "0" => flags.push(0),
                "1" => flags.push(1),
                other => {
                    return Err(parse_err(path, i + 1, format!("existence flag must be 0 or 1, got {other:?}")))
                }
            }
        }
        out.push(ListEntry {
            image: resolve_path(root, cols[0]),
            seg_label: Some(resolve_path(root, cols[1])),
            existence: Some(flags),
            category: None,
        });
    }
    Ok(out)
}

/// Path as written into a list: relative to `dir` when below it.
pub fn relative_to(dir: &Path, p: &Path) -> String {
    p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned()
}

pub fn write_train_list(path: &Path, entries: &[ListEntry]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new(""));
    let mut text = String::new();
    for e in entries {
        let seg = e.seg_label.as_ref().ok_or_else(|| {
            Error::contract(format!("{} has no segmentation label", e.image.display()))
        })?;
        let flags = e.existence.as_ref().ok_or_else(|| {
            Error::contract(format!("{} has no existence flags", e.image.display()))
        })?;
        text.push_str(&relative_to(dir, &e.image));
        text.push(' ');
        text.push_str(&relative_to(dir, seg));
        for f in flags {
            write!(text, " {f}").expect("write to string");
        }
        text.push('\n');
    }
    write_text(path, &text)
}

/// Maps image paths to evaluation categories.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CategoryIndex {
    pub entries: Vec<(String, String)>,
}

impl CategoryIndex {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (p, c) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(path, i + 1, "expected `path<TAB>category`"))?;
            if p.is_empty() || c.trim().is_empty() {
                return Err(parse_err(path, i + 1, "empty path or category"));
            }
            entries.push((p.to_string(), c.trim().to_string()));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for (p, c) in &self.entries {
            writeln!(text, "{p}\t{c}").expect("write to string");
        }
        write_text(path, &text)
    }

    pub fn push(&mut self, path: impl Into<String>, category: impl Into<String>) {
        self.entries.push((path.into(), category.into()));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// Suitable light.
    X,
    /// Low light.
    Y,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub image: PathBuf,
    /// The source's `.lines.txt`, when annotated.
    pub annotation: Option<PathBuf>,
}

/// An unpaired image set of one light domain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub domain: Domain,
    pub entries: Vec<DomainEntry>,
    pub sampler_seed: u64,
}

impl DomainDataset {
    /// Every image file (png/jpg) in `dir`, sorted by name; annotations are
    /// picked up from sibling `.lines.txt` files.
    pub fn from_dir(dir: &Path, domain: Domain, sampler_seed: u64) -> Result<Self> {
        let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut images = Vec::new();
        for ent in rd {
            let p = ent.map_err(|e| Error::io(dir, e))?.path();
            let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
            if matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg")) {
                images.push(p);
            }
        }
        images.sort();
        Ok(Self::from_images(images, domain, sampler_seed))
    }

    pub fn from_images(images: Vec<PathBuf>, domain: Domain, sampler_seed: u64) -> Self {
        let entries = images
            .into_iter()
            .map(|image| {
                let lines = lines_path_for(&image);
                DomainEntry {
                    annotation: lines.exists().then_some(lines),
                    image,
                }
            })
            .collect();
        Self {
            domain,
            entries,
            sampler_seed,
        }
    }

    /// A directory of images, or a list file whose first column names an
    /// image (relative to the list's directory).
    pub fn open(path: &Path, domain: Domain, sampler_seed: u64) -> Result<Self> {
        if path.is_dir() {
            return Self::from_dir(path, domain, sampler_seed);
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let images = text
            .lines()
            .filter_map(|l| l.split_whitespace().next())
            .filter(|c| !c.starts_with('#'))
            .map(|c| resolve_path(root, c))
            .collect();
        Ok(Self::from_images(images, domain, sampler_seed))
    }

    pub fn from_list(entries: &[ListEntry], domain: Domain, sampler_seed: u64) -> Self {
        Self::from_images(entries.iter().map(|e| e.image.clone()).collect(), domain, sampler_seed)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Seeded uniform split into `(first, second)` with `round(n * fraction)` in the first part.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
    let k = ((n as f64) * fraction).round() as usize;
    let second = idx.split_off(k.min(n));
    let (mut a, mut b) = (idx, second);
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("x.lines.txt")
    }

    #[test]
    fn one_lane_two_points() {
        let a = parse_lines_str("10.0 590 20.0 580\n", p()).unwrap();
        assert_eq!(a.lanes.len(), 1);
        assert_eq!(a.lanes[0].points(), &[(10.0, 590.0), (20.0, 580.0)]);
    }

    #[test]
    fn empty_file_has_no_lanes() {
        assert!(parse_lines_str("", p()).unwrap().lanes.is_empty());
    }

    #[test]
    fn odd_token_count_names_line() {
        match parse_lines_str("1 2 3", p()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match parse_lines_str("1 2 3 4\n5 x 6 7\n", p()) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("\"x\""));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn format_then_parse_round_trips() {
        let lanes = vec![
            Polyline::new(vec![(12.3456, 63.0), (14.5, 59.0), (16.0, 55.0)]).unwrap(),
            Polyline::new(vec![(-0.0004, 10.0), (100.25, 2.0)]).unwrap(),
        ];
        let text = format_lines(&lanes);
        assert_eq!(text.lines().count(), 2);
        let back = parse_lines_str(&text, p()).unwrap();
        for (a, b) in lanes.iter().zip(&back.lanes) {
            for (u, v) in a.points().iter().zip(b.points()) {
                assert!((u.0 - v.0).abs() <= 1e-3 && (u.1 - v.1).abs() <= 1e-3);
            }
        }
        assert_eq!(format_lines(&[]), "");
    }

    #[test]
    fn train_list_parsing() {
        let dir = tempfile::tempdir().unwrap();
        let list = dir.path().join("train.txt");
        std::fs::write(&list, "img.jpg lab.png 1 1 1 1\na.png b.png 0 1 1 0\nc.png d.png 1 0 0 0\n").unwrap();
        let e = load_train_list(&list, 4).unwrap();
        assert_eq!(e.len(), 3);
        assert_eq!(e[0].existence, Some(vec![1, 1, 1, 1]));
        assert_eq!(e[0].image, dir.path().join("img.jpg"));

        std::fs::write(&list, "img.jpg lab.png 1 1 1\n").unwrap();
        match load_train_list(&list, 4) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn train_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let list = dir.path().join("l.txt");
        let entries = vec![ListEntry {
            image: dir.path().join("img/a.png"),
            seg_label: Some(dir.path().join("seg/a.png")),
            existence: Some(vec![0, 1, 1, 0]),
            category: None,
        }];
        write_train_list(&list, &entries).unwrap();
        assert_eq!(std::fs::read_to_string(&list).unwrap(), "img/a.png seg/a.png 0 1 1 0\n");
        assert_eq!(load_train_list(&list, 4).unwrap(), entries);
    }

    #[test]
    fn category_index_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cat.txt");
        let mut c = CategoryIndex::default();
        c.push("test/0001.png", "Night");
        c.push("test/0002.png", "Crossroad");
        c.save(&p).unwrap();
        assert_eq!(CategoryIndex::load(&p).unwrap(), c);
        std::fs::write(&p, "no tab here\n").unwrap();
        assert!(matches!(CategoryIndex::load(&p), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn split_is_seeded_and_complete() {
        let (a, b) = split_indices(40, 0.75, 3);
        assert_eq!((a.len(), b.len()), (30, 10));
        let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        assert_eq!(split_indices(40, 0.75, 3), (a, b));
    }
}
