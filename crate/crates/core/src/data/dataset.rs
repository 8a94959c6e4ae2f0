//! Class-per-directory dataset indexing and the stratified train/val/test split.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{decode_image, is_supported};
use crate::rng::{label_key, SeededRng};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    /// Path relative to the dataset root, `/`-separated (`Camera/img01.ppm`).
    pub path: String,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Sorted lexicographically; a label is an index into this list.
    pub classes: Vec<String>,
    /// Sorted by (class, file name).
    pub entries: Vec<Entry>,
}

impl DatasetIndex {
    pub fn path_of(&self, entry: &Entry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Number of entries per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for e in &self.entries {
            counts[e.label] += 1;
        }
        counts
    }
}

fn sorted_dir(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for item in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let item = item.map_err(|e| Error::io(dir, e))?;
        let name = item.file_name().to_string_lossy().into_owned();
        if !name.starts_with('.') {
            out.push((name, item.path()));
        }
    }
    out.sort();
    Ok(out)
}

/// Indexes `root/<Class>/<file>.ppm|.png`. Every image is decoded once to
/// make sure it is readable; all offenders are reported together. Files
/// directly under `root` and hidden files are ignored.
pub fn scan_dataset(root: &Path) -> Result<DatasetIndex> {
    let mut classes = Vec::new();
    let mut entries = Vec::new();
    let mut problems = Vec::new();
    for (class, dir) in sorted_dir(root)? {
        if !dir.is_dir() {
            continue;
        }
        let label = classes.len();
        let mut found = 0;
        for (file, path) in sorted_dir(&dir)? {
            if path.is_dir() {
                continue;
            }
            if !is_supported(&path) {
                problems.push(format!("{class}/{file}: unsupported file type"));
                continue;
            }
            entries.push(Entry {
                path: format!("{class}/{file}"),
                label,
            });
            found += 1;
        }
        if found == 0 {
            problems.push(format!("{class}/: no images"));
        }
        classes.push(class);
    }
    if classes.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no class subdirectories found",
            root.display()
        )));
    }
    let unreadable: Vec<String> = entries
        .par_iter()
        .filter_map(|e| decode_image(&root.join(&e.path)).err().map(|err| format!("{}: {err}", e.path)))
        .collect();
    problems.extend(unreadable);
    if !problems.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: {} problem(s):\n  {}",
            root.display(),
            problems.len(),
            problems.join("\n  ")
        )));
    }
    Ok(DatasetIndex {
        root: root.to_path_buf(),
        classes,
        entries,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::arg(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub classes: Vec<String>,
    pub assignment: BTreeMap<String, Split>,
}

pub fn validate_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "split ratios {ratios:?} must be finite and non-negative"
        )));
    }
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} sum to {sum}, not 1")));
    }
    Ok(())
}

/// Largest-remainder apportionment of `n` items to `ratios`. Every count is
/// within one of its exact quota `n·r`; ties go to train, then val, then test.
pub fn apportion(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| n as f64 * r);
    // a tiny slack keeps exact quotas like 0.7·1000 from flooring to 699
    let mut counts = quotas.map(|q| ((q + 1e-9).floor() as usize).min(n));
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - counts[a] as f64;
        let fb = quotas[b] - counts[b] as f64;
        // remainders equal up to rounding noise (0.6 vs 0.6000000000000001) are ties
        if (fa - fb).abs() < 1e-9 {
            a.cmp(&b)
        } else {
            fb.partial_cmp(&fa).expect("finite quotas")
        }
    });
    let mut left = n.saturating_sub(counts.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    counts
}

/// Stratified seeded split. Each class is shuffled with its own stream
/// derived from `(seed, class name)` and cut by [`apportion`].
pub fn split_dataset(index: &DatasetIndex, ratios: [f64; 3], seed: u64) -> Result<SplitSpec> {
    validate_ratios(ratios)?;
    let mut assignment = BTreeMap::new();
    for (label, class) in index.classes.iter().enumerate() {
        let mut members: Vec<&Entry> = index.entries.iter().filter(|e| e.label == label).collect();
        SeededRng::derived(seed, &[label_key(class)]).shuffle(&mut members);
        let [train, val, _] = apportion(members.len(), ratios);
        for (i, e) in members.iter().enumerate() {
            let split = if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            };
            assignment.insert(e.path.clone(), split);
        }
    }
    Ok(SplitSpec {
        seed,
        ratios,
        classes: index.classes.clone(),
        assignment,
    })
}

impl SplitSpec {
    /// Checks that this split was made for `index`: same classes, and every
    /// entry assigned exactly once with no strays.
    pub fn validate_against(&self, index: &DatasetIndex) -> Result<()> {
        if self.classes != index.classes {
            return Err(Error::Dataset(format!(
                "split classes {:?} differ from dataset classes {:?}",
                self.classes, index.classes
            )));
        }
        let missing: Vec<&str> = index
            .entries
            .iter()
            .filter(|e| !self.assignment.contains_key(&e.path))
            .map(|e| e.path.as_str())
            .collect();
        let known: std::collections::BTreeSet<&str> = index.entries.iter().map(|e| e.path.as_str()).collect();
        let stray: Vec<&str> = self
            .assignment
            .keys()
            .map(String::as_str)
            .filter(|p| !known.contains(p))
            .collect();
        if !missing.is_empty() || !stray.is_empty() {
            return Err(Error::Dataset(format!(
                "split does not match dataset: unassigned {missing:?}, unknown {stray:?}"
            )));
        }
        Ok(())
    }

    pub fn entries<'a>(&self, index: &'a DatasetIndex, split: Split) -> Vec<&'a Entry> {
        index
            .entries
            .iter()
            .filter(|e| self.assignment.get(&e.path) == Some(&split))
            .collect()
    }

    /// `counts[class][split]`.
    pub fn counts(&self, index: &DatasetIndex) -> Vec<[usize; 3]> {
        let mut counts = vec![[0; 3]; index.classes.len()];
        for e in &index.entries {
            if let Some(s) = self.assignment.get(&e.path) {
                counts[e.label][*s as usize] += 1;
            }
        }
        counts
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: SplitSpec = serde_json::from_str(text)?;
        validate_ratios(spec.ratios)?;
        Ok(spec)
    }
}

/// Per-class split counts laid out like a dataset distribution table.
pub fn render_split_table(index: &DatasetIndex, spec: &SplitSpec) -> String {
    let counts = spec.counts(index);
    let width = index.classes.iter().map(String::len).max().unwrap_or(5).max(5);
    let mut out = format!("{:<width$}{:>8}{:>12}{:>8}{:>8}\n", "Class", "Train", "Validation", "Test", "Total");
    let mut totals = [0usize; 3];
    for (class, c) in index.classes.iter().zip(&counts) {
        for i in 0..3 {
            totals[i] += c[i];
        }
        out += &format!(
            "{class:<width$}{:>8}{:>12}{:>8}{:>8}\n",
            c[0],
            c[1],
            c[2],
            c.iter().sum::<usize>()
        );
    }
    out += &format!(
        "{:<width$}{:>8}{:>12}{:>8}{:>8}\n",
        "Total",
        totals[0],
        totals[1],
        totals[2],
        totals.iter().sum::<usize>()
    );
    out
}

/// Runs an external background-removal program as `program <input> <output>`
/// for every image of `index`, mirroring the class layout under `out_root`.
/// The program must exit with status 0 and write a decodable image.
pub fn run_background_hook(program: &Path, index: &DatasetIndex, out_root: &Path) -> Result<DatasetIndex> {
    let failures: Vec<String> = index
        .entries
        .par_iter()
        .filter_map(|e| {
            let input = index.path_of(e);
            let output = out_root.join(&e.path);
            let run = || -> std::result::Result<(), String> {
                if let Some(parent) = output.parent() {
                    std::fs::create_dir_all(parent).map_err(|err| err.to_string())?;
                }
                let status = Command::new(program)
                    .arg(&input)
                    .arg(&output)
                    .status()
                    .map_err(|err| format!("cannot run {}: {err}", program.display()))?;
                if !status.success() {
                    return Err(format!("{} exited with {status}", program.display()));
                }
                Ok(())
            };
            run().err().map(|m| format!("{}: {m}", e.path))
        })
        .collect();
    if !failures.is_empty() {
        return Err(Error::Dataset(format!("background hook failed:\n  {}", failures.join("\n  "))));
    }
    scan_dataset(out_root)
}
