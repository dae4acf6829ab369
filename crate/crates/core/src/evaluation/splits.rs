use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, SplitSetting, SplitSpec};
use crate::data_model::{HoiAnnotation, HoiClassRegistry};

/// Unseen cardinalities of the zero-shot settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSizes {
    /// Unseen classes for RF-UC and NF-UC.
    pub classes: usize,
    /// Unseen objects for UO.
    pub objects: usize,
    /// Unseen verbs for UV.
    pub verbs: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        Self { classes: 120, objects: 12, verbs: 20 }
    }
}

pub fn make_zero_shot_split(
    setting: SplitSetting,
    registry: &HoiClassRegistry,
    seed: u64,
) -> Result<SplitSpec, EvalError> {
    make_zero_shot_split_with(setting, registry, seed, SplitSizes::default())
}

/// RF-UC hides the lowest-count classes, NF-UC the highest-count ones (ties
/// by class id in both), UO every class of randomly drawn objects and UV
/// every class of randomly drawn verbs.
pub fn make_zero_shot_split_with(
    setting: SplitSetting,
    registry: &HoiClassRegistry,
    seed: u64,
    sizes: SplitSizes,
) -> Result<SplitSpec, EvalError> {
    let k = registry.num_classes();
    let too_small = |what: &str, need: usize, have: usize| {
        EvalError::Split(format!("{setting} needs {need} {what} but the registry has {have}"))
    };
    let counts = registry.counts();
    let mut unseen_objects = Vec::new();
    let mut unseen_verbs = Vec::new();
    let mut unseen: Vec<usize> = match setting {
        SplitSetting::Regular => Vec::new(),
        SplitSetting::RfUc | SplitSetting::NfUc => {
            if sizes.classes > k {
                return Err(too_small("classes", sizes.classes, k));
            }
            let mut order: Vec<usize> = (0..k).collect();
            if setting == SplitSetting::RfUc {
                order.sort_by_key(|&c| (counts[c], c));
            } else {
                order.sort_by_key(|&c| (std::cmp::Reverse(counts[c]), c));
            }
            order.truncate(sizes.classes);
            order
        }
        SplitSetting::Uo => {
            let n = registry.num_objects();
            if sizes.objects > n {
                return Err(too_small("objects", sizes.objects, n));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            unseen_objects = sample(&mut rng, n, sizes.objects).into_vec();
            unseen_objects.sort_unstable();
            (0..k).filter(|&c| unseen_objects.binary_search(&registry.classes()[c].object).is_ok()).collect()
        }
        SplitSetting::Uv => {
            let n = registry.num_verbs();
            if sizes.verbs > n {
                return Err(too_small("verbs", sizes.verbs, n));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            unseen_verbs = sample(&mut rng, n, sizes.verbs).into_vec();
            unseen_verbs.sort_unstable();
            (0..k).filter(|&c| unseen_verbs.binary_search(&registry.classes()[c].verb).is_ok()).collect()
        }
    };
    unseen.sort_unstable();
    let seen = (0..k).filter(|c| unseen.binary_search(c).is_err()).collect();
    let seed = if matches!(setting, SplitSetting::Uo | SplitSetting::Uv) { seed } else { 0 };
    Ok(SplitSpec { setting, seed, seen, unseen, unseen_objects, unseen_verbs })
}

/// Drops every ground-truth instance of an unseen class; images are kept.
pub fn filter_training_set(
    annotations: &[HoiAnnotation],
    registry: &HoiClassRegistry,
    split: &SplitSpec,
) -> Vec<HoiAnnotation> {
    annotations
        .iter()
        .map(|ann| {
            let mut a = ann.clone();
            a.gts.retain(|gt| registry.class_id(gt.verb, gt.obj).map_or(false, |c| !split.is_unseen(c)));
            a
        })
        .collect()
}
