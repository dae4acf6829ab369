//! HOI class registry, ground-truth annotations, file I/O and the synthetic
//! scene generator.

mod boxes;
mod synthetic;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use boxes::BBox;
pub use synthetic::{cell_of, generate_synthetic, SyntheticDataset, SyntheticSceneConfig};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("image `{image_id}`: invalid `{field}`: {reason}")]
    Invalid { image_id: String, field: &'static str, reason: String },
    #[error("registry: {0}")]
    Registry(String),
    #[error("invalid config: {0}")]
    Config(String),
}

/// A valid ⟨verb, object⟩ combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct HoiClass {
    pub verb: usize,
    pub object: usize,
}

impl From<[usize; 2]> for HoiClass {
    fn from([verb, object]: [usize; 2]) -> Self {
        Self { verb, object }
    }
}

impl From<HoiClass> for [usize; 2] {
    fn from(c: HoiClass) -> Self {
        [c.verb, c.object]
    }
}

/// Object and verb vocabularies, the valid HOI classes and their
/// training-instance counts.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiClassRegistry {
    objects: Vec<String>,
    verbs: Vec<String>,
    classes: Vec<HoiClass>,
    counts: Vec<u64>,
    lookup: HashMap<HoiClass, usize>,
}

/// On-disk registry profile: the vocabulary plus per-class counts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryFile {
    pub objects: Vec<String>,
    pub verbs: Vec<String>,
    pub hoi_classes: Vec<HoiClass>,
    #[serde(default)]
    pub counts: Vec<u64>,
}

const FIXTURE_REGISTRY: &str = include_str!("../../assets/fixture_registry.json");
const HICO_PROFILE: &str = include_str!("../../assets/hico_profile.json");

impl HoiClassRegistry {
    pub fn new(objects: Vec<String>, verbs: Vec<String>, classes: Vec<HoiClass>) -> Result<Self, DataError> {
        let mut lookup = HashMap::with_capacity(classes.len());
        for (i, c) in classes.iter().enumerate() {
            if c.verb >= verbs.len() || c.object >= objects.len() {
                return Err(DataError::Registry(format!(
                    "class {i} references verb {} / object {} outside the vocabulary",
                    c.verb, c.object
                )));
            }
            if lookup.insert(*c, i).is_some() {
                return Err(DataError::Registry(format!("class {i} duplicates [{}, {}]", c.verb, c.object)));
            }
        }
        let counts = vec![0; classes.len()];
        Ok(Self { objects, verbs, classes, counts, lookup })
    }

    pub fn from_file(file: RegistryFile) -> Result<Self, DataError> {
        let mut reg = Self::new(file.objects, file.verbs, file.hoi_classes)?;
        if !file.counts.is_empty() {
            reg.set_counts(file.counts)?;
        }
        Ok(reg)
    }

    pub fn to_file(&self) -> RegistryFile {
        RegistryFile {
            objects: self.objects.clone(),
            verbs: self.verbs.clone(),
            hoi_classes: self.classes.clone(),
            counts: self.counts.clone(),
        }
    }

    /// The bundled 6-object / 5-verb / 12-class registry used by tests and synthetic scenes.
    pub fn fixture() -> Self {
        let file: RegistryFile = serde_json::from_str(FIXTURE_REGISTRY).expect("bundled registry parses");
        Self::from_file(file).expect("bundled registry is valid")
    }

    /// The bundled 80-object / 117-verb / 600-class registry with long-tailed training counts.
    pub fn hico_profile() -> Self {
        let file: RegistryFile = serde_json::from_str(HICO_PROFILE).expect("bundled profile parses");
        Self::from_file(file).expect("bundled profile is valid")
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn classes(&self) -> &[HoiClass] {
        &self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_id(&self, verb: usize, object: usize) -> Option<usize> {
        self.lookup.get(&HoiClass { verb, object }).copied()
    }

    /// HOI classes whose object is `object`.
    pub fn classes_for_object(&self, object: usize) -> impl Iterator<Item = usize> + '_ {
        self.classes.iter().enumerate().filter(move |(_, c)| c.object == object).map(|(i, _)| i)
    }

    pub fn set_counts(&mut self, counts: Vec<u64>) -> Result<(), DataError> {
        if counts.len() != self.classes.len() {
            return Err(DataError::Registry(format!(
                "{} counts for {} classes",
                counts.len(),
                self.classes.len()
            )));
        }
        self.counts = counts;
        Ok(())
    }

    /// Recounts training instances per HOI class over `annotations`.
    pub fn recount(&mut self, annotations: &[HoiAnnotation]) -> Result<(), DataError> {
        self.counts = count_instances(self, annotations)?;
        Ok(())
    }

    /// True when both registries share vocabulary and class list (counts may differ).
    pub fn same_classes(&self, other: &HoiClassRegistry) -> bool {
        self.objects == other.objects && self.verbs == other.verbs && self.classes == other.classes
    }
}

fn count_instances(reg: &HoiClassRegistry, annotations: &[HoiAnnotation]) -> Result<Vec<u64>, DataError> {
    let mut counts = vec![0u64; reg.num_classes()];
    for ann in annotations {
        for gt in &ann.gts {
            let id = reg.class_id(gt.verb, gt.obj).ok_or_else(|| DataError::Invalid {
                image_id: ann.id.clone(),
                field: "verb/obj",
                reason: format!("[{}, {}] is not a registered HOI class", gt.verb, gt.obj),
            })?;
            counts[id] += 1;
        }
    }
    Ok(counts)
}

/// One ground-truth triplet with its two boxes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiInstance {
    pub hbox: BBox,
    pub obox: BBox,
    pub obj: usize,
    pub verb: usize,
}

/// Where an image's stub visual features come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_features: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction_features: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoiAnnotation {
    pub id: String,
    pub gts: Vec<HoiInstance>,
    #[serde(flatten)]
    pub source: FeatureSource,
}

impl HoiAnnotation {
    pub fn validate(&self, reg: &HoiClassRegistry) -> Result<(), DataError> {
        let invalid = |field, reason: String| DataError::Invalid { image_id: self.id.clone(), field, reason };
        for (i, gt) in self.gts.iter().enumerate() {
            if !gt.hbox.is_valid() {
                return Err(invalid("hbox", format!("gt {i}: {:?} violates x1<x2, y1<y2", gt.hbox)));
            }
            if !gt.obox.is_valid() {
                return Err(invalid("obox", format!("gt {i}: {:?} violates x1<x2, y1<y2", gt.obox)));
            }
            if gt.obj >= reg.num_objects() {
                return Err(invalid("obj", format!("gt {i}: unknown object id {}", gt.obj)));
            }
            if gt.verb >= reg.num_verbs() {
                return Err(invalid("verb", format!("gt {i}: unknown verb id {}", gt.verb)));
            }
            if reg.class_id(gt.verb, gt.obj).is_none() {
                return Err(invalid("verb/obj", format!("gt {i}: [{}, {}] is not an HOI class", gt.verb, gt.obj)));
            }
        }
        Ok(())
    }
}

/// The JSON annotation document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub objects: Vec<String>,
    pub verbs: Vec<String>,
    pub hoi_classes: Vec<HoiClass>,
    pub images: Vec<HoiAnnotation>,
}

impl AnnotationFile {
    pub fn from_parts(reg: &HoiClassRegistry, images: Vec<HoiAnnotation>) -> Self {
        Self {
            objects: reg.objects.clone(),
            verbs: reg.verbs.clone(),
            hoi_classes: reg.classes.clone(),
            images,
        }
    }

    /// Validates every record and builds the registry with counts from these images.
    pub fn into_parts(self) -> Result<(HoiClassRegistry, Vec<HoiAnnotation>), DataError> {
        let mut reg = HoiClassRegistry::new(self.objects, self.verbs, self.hoi_classes)?;
        for ann in &self.images {
            ann.validate(&reg)?;
        }
        reg.recount(&self.images)?;
        Ok((reg, self.images))
    }
}

fn read(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

fn write(path: &Path, text: &str) -> Result<(), DataError> {
    fs::write(path, text).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

#[derive(Deserialize)]
struct RawAnnotationFile {
    objects: Vec<String>,
    verbs: Vec<String>,
    hoi_classes: Vec<HoiClass>,
    images: Vec<serde_json::Value>,
}

/// Decodes one image record field by field so errors name the image and field.
fn parse_image(index: usize, value: serde_json::Value) -> Result<HoiAnnotation, DataError> {
    let id = match value.get("id") {
        Some(serde_json::Value::String(s)) => s.clone(),
        Some(serde_json::Value::Number(n)) => n.to_string(),
        _ => {
            return Err(DataError::Invalid {
                image_id: format!("#{index}"),
                field: "id",
                reason: "missing or not a string".into(),
            })
        }
    };
    let invalid = |field, reason: String| DataError::Invalid { image_id: id.clone(), field, reason };
    let gts = value
        .get("gts")
        .and_then(|g| g.as_array())
        .ok_or_else(|| invalid("gts", "missing or not an array".into()))?;
    let mut parsed = Vec::with_capacity(gts.len());
    for (i, gt) in gts.iter().enumerate() {
        fn field<T: serde::de::DeserializeOwned>(gt: &serde_json::Value, name: &str) -> Result<T, String> {
            let v = gt.get(name).ok_or_else(|| "missing".to_string())?;
            serde_json::from_value(v.clone()).map_err(|e| e.to_string())
        }
        parsed.push(HoiInstance {
            hbox: field(gt, "hbox").map_err(|e| invalid("hbox", format!("gt {i}: {e}")))?,
            obox: field(gt, "obox").map_err(|e| invalid("obox", format!("gt {i}: {e}")))?,
            obj: field(gt, "obj").map_err(|e| invalid("obj", format!("gt {i}: {e}")))?,
            verb: field(gt, "verb").map_err(|e| invalid("verb", format!("gt {i}: {e}")))?,
        });
    }
    let source: FeatureSource =
        serde_json::from_value(value.clone()).map_err(|e| invalid("features", e.to_string()))?;
    Ok(HoiAnnotation { id, gts: parsed, source })
}

pub fn parse_annotations(text: &str, path: &Path) -> Result<(HoiClassRegistry, Vec<HoiAnnotation>), DataError> {
    let raw: RawAnnotationFile =
        serde_json::from_str(text).map_err(|source| DataError::Json { path: path.to_path_buf(), source })?;
    let images = raw
        .images
        .into_iter()
        .enumerate()
        .map(|(i, v)| parse_image(i, v))
        .collect::<Result<Vec<_>, _>>()?;
    AnnotationFile { objects: raw.objects, verbs: raw.verbs, hoi_classes: raw.hoi_classes, images }.into_parts()
}

/// Loads an annotation file; registry counts come from the images it contains.
pub fn load_annotations(path: impl AsRef<Path>) -> Result<(HoiClassRegistry, Vec<HoiAnnotation>), DataError> {
    let path = path.as_ref();
    parse_annotations(&read(path)?, path)
}

pub fn to_json(reg: &HoiClassRegistry, annotations: &[HoiAnnotation]) -> String {
    let file = AnnotationFile::from_parts(reg, annotations.to_vec());
    serde_json::to_string_pretty(&file).expect("annotation file serializes")
}

pub fn save_annotations(
    path: impl AsRef<Path>,
    reg: &HoiClassRegistry,
    annotations: &[HoiAnnotation],
) -> Result<(), DataError> {
    write(path.as_ref(), &to_json(reg, annotations))
}

pub fn load_registry(path: impl AsRef<Path>) -> Result<HoiClassRegistry, DataError> {
    let path = path.as_ref();
    let file: RegistryFile =
        serde_json::from_str(&read(path)?).map_err(|source| DataError::Json { path: path.to_path_buf(), source })?;
    HoiClassRegistry::from_file(file)
}

pub fn save_registry(path: impl AsRef<Path>, reg: &HoiClassRegistry) -> Result<(), DataError> {
    let text = serde_json::to_string_pretty(&reg.to_file()).expect("registry serializes");
    write(path.as_ref(), &text)
}
