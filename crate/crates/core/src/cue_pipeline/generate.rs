use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use super::{build_prompt, CueCache, CueError, CueKind, CueRecord, CueSet, Provenance, VlmClient};
use crate::data_model::{HoiAnnotation, HoiClassRegistry};

/// Where cue texts come from when the cache misses.
pub enum CueSource<'a> {
    /// Query a VLM endpoint; images are referenced as `image_root/<id>` (or by id).
    Live { client: &'a VlmClient, image_root: Option<PathBuf> },
    /// `<dir>/<image id>.json` files holding the three texts.
    FixtureDir(PathBuf),
    /// Deterministic texts rendered from synthetic scene annotations.
    Synthetic(&'a HoiClassRegistry),
    /// Cache hits only.
    CacheOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CueStats {
    pub live: usize,
    pub cache: usize,
    pub fixture: usize,
    pub failed: usize,
}

/// Returns the cue set for one image, consulting the cache first.
pub fn generate_cues(image: &HoiAnnotation, source: &CueSource<'_>, cache: &CueCache) -> Result<CueSet, CueError> {
    if let Some(hit) = cache.get(&image.id) {
        return Ok(hit);
    }
    let cues = match source {
        CueSource::Live { client, image_root } => {
            let image_ref = match image_root {
                Some(root) => root.join(&image.id).display().to_string(),
                None => image.id.clone(),
            };
            let mut texts = Vec::with_capacity(3);
            for kind in CueKind::ALL {
                texts.push(client.complete(&image.id, &image_ref, &build_prompt(kind))?);
            }
            let [participant, body_language, environmental]: [String; 3] =
                texts.try_into().expect("three cue kinds");
            CueSet { image_id: image.id.clone(), participant, body_language, environmental, provenance: Provenance::Live }
        }
        CueSource::FixtureDir(dir) => {
            let path = dir.join(format!("{}.json", image.id));
            let text = std::fs::read_to_string(&path).map_err(|_| CueError::Missing(image.id.clone()))?;
            let rec: CueRecord = serde_json::from_str(&text).map_err(|e| CueError::Cache {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
            rec.into_cue_set(&image.id, Provenance::Fixture)
        }
        CueSource::Synthetic(registry) => synthetic_cues(image, registry),
        CueSource::CacheOnly => return Err(CueError::Missing(image.id.clone())),
    };
    cues.validate()?;
    cache.insert(&cues)?;
    Ok(cues)
}

/// Generates cues for many images with at most `max_in_flight` concurrent requests.
/// Results are returned in input order.
pub fn generate_cues_batch(
    images: &[HoiAnnotation],
    source: &CueSource<'_>,
    cache: &CueCache,
    max_in_flight: usize,
) -> (Vec<Result<CueSet, CueError>>, CueStats) {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CueSet, CueError>>>> =
        Mutex::new((0..images.len()).map(|_| None).collect());
    let workers = max_in_flight.clamp(1, images.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= images.len() {
                    break;
                }
                let r = generate_cues(&images[i], source, cache);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    let results: Vec<_> = results.into_inner().expect("results lock").into_iter().map(|r| r.expect("every index visited")).collect();
    let mut stats = CueStats::default();
    for r in &results {
        match r {
            Ok(c) => match c.provenance {
                Provenance::Live => stats.live += 1,
                Provenance::Cache => stats.cache += 1,
                Provenance::Fixture => stats.fixture += 1,
            },
            Err(_) => stats.failed += 1,
        }
    }
    (results, stats)
}

const SETTINGS: [&str; 6] = [
    "an indoor living room with a sofa",
    "a grassy park on a sunny day",
    "a busy city street",
    "a small kitchen with a table",
    "a sports field with white lines",
    "a quiet office with desks",
];

/// Renders the three cue texts for a synthetic scene from its annotation.
pub fn synthetic_cues(image: &HoiAnnotation, registry: &HoiClassRegistry) -> CueSet {
    let mut participant = Vec::new();
    let mut body = Vec::new();
    for gt in &image.gts {
        let object = &registry.objects()[gt.obj];
        let verb = &registry.verbs()[gt.verb];
        participant.push(format!("a person next to a {object}"));
        body.push(format!("the person leans in as if to {verb} something"));
    }
    let setting = SETTINGS[(image.source.feature_seed.unwrap_or(0) % SETTINGS.len() as u64) as usize];
    CueSet {
        image_id: image.id.clone(),
        participant: participant.join("; "),
        body_language: body.join("; "),
        environmental: format!("the scene is {setting}"),
        provenance: Provenance::Fixture,
    }
}
