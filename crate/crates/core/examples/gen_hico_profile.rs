//! Writes `assets/hico_profile.json`: the HICO-Det object and verb
//! vocabularies with 600 HOI classes (one `no_interaction` class per object)
//! and long-tailed training counts of which exactly 138 are below 10.
//!
//! The class pairing and counts are a deterministic stand-in with the
//! published cardinalities; regenerate with
//! `cargo run -p hcvc-core --example gen_hico_profile`.

use std::collections::BTreeSet;

use hcvc::data_model::{save_registry, HoiClass, HoiClassRegistry};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OBJECTS: &str = "airplane apple backpack banana baseball_bat baseball_glove bear bed bench bicycle bird boat \
book bottle bowl broccoli bus cake car carrot cat cell_phone chair clock couch cow cup dining_table dog donut \
elephant fire_hydrant fork frisbee giraffe hair_drier handbag horse hot_dog keyboard kite knife laptop microwave \
motorcycle mouse orange oven parking_meter person pizza potted_plant refrigerator remote sandwich scissors sheep \
sink skateboard skis snowboard spoon sports_ball stop_sign suitcase surfboard teddy_bear tennis_racket tie toaster \
toilet toothbrush traffic_light train truck tv umbrella vase wine_glass zebra";

const VERBS: &str = "adjust assemble block blow board break brush_with buy carry catch chase check clean control \
cook cut cut_with direct drag dribble drink_with drive dry eat eat_at exit feed fill flip flush fly greet grind \
groom herd hit hold hop_on hose hug hunt inspect install jump kick kiss lasso launch lick lie_on lift light load \
lose make milk move no_interaction open operate pack paint park pay peel pet pick pick_up point pour pull push \
race read release repair ride row run sail scratch serve set shear sign sip sit_at sit_on slide smell spin squeeze \
stab stand_on stand_under stick stir stop_at straddle swing tag talk_on teach text_on throw tie toast train turn \
type_on walk wash watch wave wear wield zip";

const CLASSES: usize = 600;
const RARE: usize = 138;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let objects: Vec<String> = OBJECTS.split_whitespace().map(String::from).collect();
    let verbs: Vec<String> = VERBS.split_whitespace().map(String::from).collect();
    assert_eq!(objects.len(), 80);
    assert_eq!(verbs.len(), 117);
    let none = verbs.iter().position(|v| v == "no_interaction").expect("no_interaction verb");

    let mut rng = ChaCha8Rng::seed_from_u64(0x4849_434f);
    let mut pairs: BTreeSet<(usize, usize)> = (0..objects.len()).map(|o| (none, o)).collect();
    for v in (0..verbs.len()).filter(|&v| v != none) {
        pairs.insert((v, rng.gen_range(0..objects.len())));
    }
    for o in 0..objects.len() {
        let v = loop {
            let v = rng.gen_range(0..verbs.len());
            if v != none {
                break v;
            }
        };
        pairs.insert((v, o));
    }
    while pairs.len() < CLASSES {
        let v = rng.gen_range(0..verbs.len());
        if v != none {
            pairs.insert((v, rng.gen_range(0..objects.len())));
        }
    }
    let classes: Vec<HoiClass> = pairs.into_iter().map(|(verb, object)| HoiClass { verb, object }).collect();

    let mut order: Vec<usize> = (0..CLASSES).collect();
    order.shuffle(&mut rng);
    let mut counts = vec![0u64; CLASSES];
    for (rank, &c) in order.iter().enumerate() {
        counts[c] = if rank < RARE {
            rng.gen_range(1..10)
        } else {
            let tail = (rank - RARE + 1) as f64;
            10 + (3000.0 / tail.powf(1.1) * rng.gen_range(0.8..1.2)) as u64
        };
    }

    let mut reg = HoiClassRegistry::new(objects, verbs, classes)?;
    reg.set_counts(counts)?;
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/hico_profile.json");
    save_registry(&path, &reg)?;
    println!("wrote {} ({} classes)", path.display(), reg.num_classes());
    Ok(())
}
