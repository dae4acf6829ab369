use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encode::BASE_EMBED;
use super::*;
use crate::data_model::{generate_synthetic, HoiAnnotation, SyntheticSceneConfig};
use crate::numerics::{grad_check_params, GradCheckConfig, ParamStore, Scope};

fn small_cfg() -> CueEncoderConfig {
    CueEncoderConfig { d_text: 8, buckets: 64, max_tokens: 16, layers: 3, heads: 2, d_ff: 12, embed_seed: 3 }
}

fn store_for(cfg: &CueEncoderConfig) -> ParamStore {
    let mut store = ParamStore::new();
    init_cue_encoder(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(1));
    store
}

fn image(id: &str) -> HoiAnnotation {
    HoiAnnotation { id: id.into(), gts: vec![], source: Default::default() }
}

#[test]
fn prompts_cover_their_topics() {
    let p = build_prompt(CueKind::Participant).template.to_lowercase();
    assert!(p.contains("person") && p.contains("objects") && p.contains("interacting"));
    let b = build_prompt(CueKind::BodyLanguage).template.to_lowercase();
    assert!(b.contains("posture") && b.contains("facial expressions"));
    let e = build_prompt(CueKind::Environmental).template.to_lowercase();
    assert!(e.contains("setting") && e.contains("surrounding"));
    assert_eq!(build_prompt(CueKind::Participant), build_prompt(CueKind::Participant));
    for k in CueKind::ALL {
        assert!(!build_prompt(k).template.is_empty());
        assert_eq!(k.as_str().parse::<CueKind>().unwrap(), k);
    }
}

#[test]
fn unknown_kind_is_rejected() {
    assert!(matches!("gaze".parse::<CueKind>(), Err(CueError::UnknownKind(k)) if k == "gaze"));
}

#[test]
fn bundled_bedroom_cues() {
    let c = bedroom_girl_cues();
    assert_eq!(c.provenance, Provenance::Fixture);
    assert!(c.participant.contains("tablet"));
    assert!(c.body_language.contains("legs crossed"));
    assert!(c.environmental.contains("bedroom"));
}

#[test]
fn tokenizer_is_case_normalized_and_capped() {
    let cfg = small_cfg();
    assert_eq!(tokenize("A Girl, READING!", &cfg), tokenize("a girl reading", &cfg));
    assert_eq!(tokenize("  ...  ", &cfg), vec![PAD_TOKEN]);
    assert_eq!(tokenize("", &cfg), vec![PAD_TOKEN]);
    let long = "word ".repeat(100);
    assert_eq!(tokenize(&long, &cfg).len(), cfg.max_tokens);
    assert!(tokenize("many different words here", &cfg).iter().all(|&t| t >= 1 && t < cfg.buckets));
}

#[test]
fn identical_texts_encode_identically() {
    let cfg = small_cfg();
    let store = store_for(&cfg);
    let c = CueSet {
        image_id: "x".into(),
        participant: "a person holds a cup".into(),
        body_language: "a person holds a cup".into(),
        environmental: "kitchen".into(),
        provenance: Provenance::Fixture,
    };
    let f = encode_cues(&c, &store, &cfg).unwrap();
    assert_eq!(f.t_p, f.t_b);
    assert_eq!(f.t_p.dim(), (5, 8));
    assert_eq!(f.t_e.nrows(), 1);
    assert!(f.t_p.iter().all(|v| v.is_finite()));
    assert_eq!(f, encode_cues(&c, &store, &cfg).unwrap());
}

#[test]
fn degenerate_text_encodes_to_single_pad_row() {
    let cfg = small_cfg();
    let store = store_for(&cfg);
    let c = CueSet {
        image_id: "x".into(),
        participant: String::new(),
        body_language: "sitting".into(),
        environmental: "outdoors".into(),
        provenance: Provenance::Fixture,
    };
    assert!(c.is_degenerate());
    c.validate().unwrap();
    let f = encode_cues(&c, &store, &cfg).unwrap();
    assert_eq!(f.t_p.nrows(), 1);
    let live = CueSet { provenance: Provenance::Live, ..c };
    assert!(matches!(live.validate(), Err(CueError::EmptyText(_))));
}

#[test]
fn encoder_gradients_reach_only_trainable_layers() {
    let cfg = small_cfg();
    let store = store_for(&cfg);
    let tokens = tokenize("the girl sits on the bed with crossed legs", &cfg);
    let probe = ndarray::Array2::from_shape_fn((tokens.len(), cfg.d_text), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
    let run = |s: &ParamStore| {
        let mut scope = Scope::new(s);
        let t = encode_tokens_on_tape(&mut scope, &tokens, &cfg).unwrap();
        let loss = (scope.tape.value(t) * &probe).sum();
        let mut g = scope.tape.backward(&[(t, probe.clone())]).unwrap();
        (loss, scope.collect(&mut g))
    };
    let (_, grads) = run(&store);
    assert!(!grads.contains_key(BASE_EMBED));
    assert!(!store.get(BASE_EMBED).unwrap().trainable);
    let names = store.trainable_names();
    assert_eq!(grads.len(), names.len());
    let report = grad_check_params(
        &store,
        &names,
        &grads,
        |s| run(s).0,
        &GradCheckConfig { max_coords_per_tensor: Some(6), ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn cache_hit_short_circuits_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cues.jsonl");
    let cache = CueCache::open(&path).unwrap();
    let src = bedroom_girl_cues();
    let stored = CueSet { image_id: "img1".into(), ..src };
    cache.insert(&stored).unwrap();

    let a = generate_cues(&image("img1"), &CueSource::CacheOnly, &cache).unwrap();
    let b = generate_cues(&image("img1"), &CueSource::CacheOnly, &cache).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.provenance, Provenance::Cache);
    assert_eq!(a.participant, stored.participant);

    // Reopening reads the JSON-lines file back.
    let reopened = CueCache::open(&path).unwrap();
    assert_eq!(reopened.get("img1"), Some(a));
    assert!(matches!(
        generate_cues(&image("img2"), &CueSource::CacheOnly, &reopened),
        Err(CueError::Missing(id)) if id == "img2"
    ));
    let line = std::fs::read_to_string(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in ["image_id", "participant", "body_language", "environmental"] {
        assert!(v.get(key).is_some(), "{key}");
    }
}

#[test]
fn fixture_directory_mode() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bedroom_girl.json"),
        serde_json::to_string(&CueRecord::from_cue_set(&bedroom_girl_cues())).unwrap(),
    )
    .unwrap();
    let cache = CueCache::in_memory();
    let src = CueSource::FixtureDir(dir.path().to_path_buf());
    let c = generate_cues(&image("bedroom_girl"), &src, &cache).unwrap();
    assert_eq!(c.provenance, Provenance::Fixture);
    assert!(c.environmental.contains("bedroom"));
    assert!(matches!(generate_cues(&image("nope"), &src, &cache), Err(CueError::Missing(_))));
}

#[test]
fn synthetic_cues_mention_scene_classes() {
    let ds = generate_synthetic(&SyntheticSceneConfig { images: 5, ..Default::default() }, None).unwrap();
    let cache = CueCache::in_memory();
    let (results, stats) =
        generate_cues_batch(&ds.annotations, &CueSource::Synthetic(&ds.registry), &cache, 3);
    assert_eq!(stats, CueStats { live: 0, cache: 0, fixture: 5, failed: 0 });
    for (ann, r) in ds.annotations.iter().zip(&results) {
        let c = r.as_ref().unwrap();
        assert_eq!(c.image_id, ann.id);
        let obj = &ds.registry.objects()[ann.gts[0].obj];
        assert!(c.participant.contains(obj.as_str()));
        assert_eq!(c, &synthetic_cues(ann, &ds.registry));
    }
    let (_, again) = generate_cues_batch(&ds.annotations, &CueSource::Synthetic(&ds.registry), &cache, 2);
    assert_eq!(again.cache, 5);
}
