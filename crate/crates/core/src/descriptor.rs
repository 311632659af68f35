//! Dataset descriptor JSON: lists cases, their four channel files and the
//! optional ground-truth file. Relative paths resolve against the directory
//! holding the descriptor.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nifti::{read_nifti, write_nifti, write_nifti_labels};
use crate::volume::{Case, Domain, Modality, MultiModalVolume};

pub const DESCRIPTOR_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawDescriptor {
    name: String,
    cases: Vec<RawCase>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RawCase {
    id: String,
    domain: Domain,
    channels: BTreeMap<String, String>,
    #[serde(default)]
    truth: Option<String>,
}

/// One resolved manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CaseEntry {
    pub id: String,
    pub domain: Domain,
    /// Absolute or descriptor-relative-resolved paths in T1, T1ce, T2, FLAIR order.
    pub channels: [PathBuf; 4],
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: String,
    pub cases: Vec<CaseEntry>,
}

impl Manifest {
    pub fn ids(&self) -> Vec<&str> {
        self.cases.iter().map(|c| c.id.as_str()).collect()
    }

    pub fn count_domain(&self, domain: Domain) -> usize {
        self.cases.iter().filter(|c| c.domain == domain).count()
    }

    pub fn load_cases(&self) -> Result<Vec<Case>> {
        self.cases.iter().map(load_case).collect()
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Parses a descriptor without touching the referenced files.
pub fn parse_descriptor(json: &str, base: &Path) -> Result<Manifest> {
    let raw: RawDescriptor = serde_json::from_str(json)?;
    let mut seen = HashSet::new();
    let mut cases = Vec::with_capacity(raw.cases.len());
    for rc in raw.cases {
        if !seen.insert(rc.id.clone()) {
            return Err(Error::Descriptor(format!("duplicate case id {:?}", rc.id)));
        }
        if let Some(extra) = rc.channels.keys().find(|k| !Modality::ALL.iter().any(|m| m.name() == k.as_str())) {
            return Err(Error::Descriptor(format!("case {:?}: unknown channel {extra:?}", rc.id)));
        }
        let mut paths = Vec::with_capacity(4);
        for m in Modality::ALL {
            match rc.channels.get(m.name()) {
                Some(p) => paths.push(resolve(base, p)),
                None => return Err(Error::Descriptor(format!("case {:?}: missing channel {}", rc.id, m.name()))),
            }
        }
        cases.push(CaseEntry {
            id: rc.id,
            domain: rc.domain,
            channels: paths.try_into().expect("four channels"),
            truth: rc.truth.map(|t| resolve(base, &t)),
        });
    }
    Ok(Manifest { name: raw.name, cases })
}

/// Loads and validates a descriptor, including that every referenced file exists.
pub fn load_descriptor(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let manifest = parse_descriptor(&text, base)?;
    for c in &manifest.cases {
        for (m, p) in Modality::ALL.iter().zip(c.channels.iter()) {
            if !p.is_file() {
                return Err(Error::Descriptor(format!(
                    "case {:?}: channel {m} points to missing file {}",
                    c.id,
                    p.display()
                )));
            }
        }
        if let Some(t) = &c.truth {
            if !t.is_file() {
                return Err(Error::Descriptor(format!(
                    "case {:?}: truth points to missing file {}",
                    c.id,
                    t.display()
                )));
            }
        }
    }
    Ok(manifest)
}

pub fn load_case(entry: &CaseEntry) -> Result<Case> {
    let mut grids = Vec::with_capacity(4);
    for p in &entry.channels {
        grids.push(read_nifti(p)?.into_intensity()?);
    }
    let images = MultiModalVolume::new(grids.try_into().expect("four channels"))
        .map_err(|e| Error::Descriptor(format!("case {:?}: {e}", entry.id)))?;
    let truth = match &entry.truth {
        Some(p) => Some(read_nifti(p)?.into_labels()?),
        None => None,
    };
    Case::new(entry.id.clone(), images, truth, entry.domain)
}

/// Writes every case as NIfTI files under `dir` plus a `dataset.json`
/// descriptor with relative paths. Returns the descriptor path.
pub fn write_dataset(dir: impl AsRef<Path>, name: &str, cases: &[Case]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut raw = RawDescriptor { name: name.to_string(), cases: Vec::with_capacity(cases.len()) };
    for case in cases {
        let mut channels = BTreeMap::new();
        for m in Modality::ALL {
            let file = format!("{}_{}.nii", case.id, m.name());
            write_nifti(case.images.channel(m), dir.join(&file))?;
            channels.insert(m.name().to_string(), file);
        }
        let truth = match &case.truth {
            Some(t) => {
                let file = format!("{}_seg.nii", case.id);
                write_nifti_labels(t, dir.join(&file))?;
                Some(file)
            }
            None => None,
        };
        raw.cases.push(RawCase { id: case.id.clone(), domain: case.domain, channels, truth });
    }
    let path = dir.join(DESCRIPTOR_FILE);
    let text = serde_json::to_string_pretty(&raw)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
