//! Template-generated task-oriented dialogues across several domains.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, DialogueExample, DialogueState, Prompt, Slot, Turn};
use crate::error::{DopError, Result};

const DAYS: &[&str] = &[
    "monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday",
];
const TIMES: &[&str] = &[
    "9am", "10am", "11am", "noon", "1pm", "2pm", "3pm", "4pm", "5pm", "6pm", "7pm", "8pm",
];
const PEOPLE: &[&str] = &["1", "2", "3", "4", "5", "6", "7", "8"];
const AREAS: &[&str] = &["north", "south", "east", "west", "centre"];
const PRICES: &[&str] = &["cheap", "moderate", "expensive"];

/// One slot of a domain: its value pool, how users mention it, and how the
/// gold summary phrases it.
#[derive(Clone, Debug)]
pub struct SlotTemplate {
    pub name: &'static str,
    pub values: &'static [&'static str],
    /// Values belong to this domain's lexicon rather than the shared pool.
    pub domain_values: bool,
    pub mentions: &'static [&'static str],
    pub question: &'static str,
    pub phrase: &'static str,
}

#[derive(Clone, Debug)]
pub struct DomainTemplate {
    pub name: &'static str,
    /// Noun phrase with its article, e.g. "a train".
    pub noun: &'static str,
    pub intents: &'static [&'static str],
    pub slots: &'static [SlotTemplate],
    pub fillers: &'static [&'static str],
}

impl DomainTemplate {
    /// Domain-specific words: fillers plus domain-owned slot values.
    pub fn lexicon(&self) -> Vec<&'static str> {
        let mut out: Vec<&'static str> = self.fillers.to_vec();
        for s in self.slots.iter().filter(|s| s.domain_values) {
            for v in s.values {
                if !out.contains(v) {
                    out.push(v);
                }
            }
        }
        out
    }
}

const CITIES: &[&str] = &[
    "cambridge", "london", "norwich", "ely", "stevenage", "peterborough", "stansted", "birmingham",
];
const LANDMARKS: &[&str] = &[
    "airport", "harbour", "stadium", "cinema", "hospital", "university", "cathedral", "marina",
];
const FOODS: &[&str] = &[
    "italian", "chinese", "indian", "thai", "french", "mexican", "korean", "turkish",
];
const HOTELS: &[&str] = &[
    "alpha", "bridgeview", "carlton", "dorset", "elmwood", "fairview", "granta", "huntingdon",
];
const SIGHTS: &[&str] = &[
    "museum", "gallery", "park", "theatre", "castle", "zoo", "garden", "monument",
];

const fn slot(
    name: &'static str,
    values: &'static [&'static str],
    domain_values: bool,
    mentions: &'static [&'static str],
    question: &'static str,
    phrase: &'static str,
) -> SlotTemplate {
    SlotTemplate {
        name,
        values,
        domain_values,
        mentions,
        question,
        phrase,
    }
}

const DAY: SlotTemplate = slot(
    "day",
    DAYS,
    false,
    &["i need it on {v}.", "it should be on {v}."],
    "which day would you like?",
    "on {v}",
);
const PEOPLE_SLOT: SlotTemplate = slot(
    "people",
    PEOPLE,
    false,
    &["it is for {v} people.", "there will be {v} of us."],
    "how many people are there?",
    "for {v} people",
);
const AREA: SlotTemplate = slot(
    "area",
    AREAS,
    false,
    &["it should be in the {v}.", "i prefer the {v} of town."],
    "which part of town do you want?",
    "in the {v}",
);
const PRICE: SlotTemplate = slot(
    "pricerange",
    PRICES,
    false,
    &["something {v} please.", "i want a {v} one."],
    "what price range do you want?",
    "in the {v} price range",
);

static TRAIN_SLOTS: [SlotTemplate; 5] = [
    slot(
        "departure",
        CITIES,
        true,
        &["i am leaving from {v}.", "i will depart from {v}."],
        "where are you leaving from?",
        "from {v}",
    ),
    slot(
        "destination",
        CITIES,
        true,
        &["i am going to {v}.", "i need to get to {v}."],
        "where are you going?",
        "to {v}",
    ),
    DAY,
    slot(
        "leaveat",
        TIMES,
        false,
        &["i want to leave after {v}.", "leaving after {v} is best."],
        "when do you want to leave?",
        "leaving after {v}",
    ),
    PEOPLE_SLOT,
];

static TAXI_SLOTS: [SlotTemplate; 4] = [
    slot(
        "departure",
        LANDMARKS,
        true,
        &["pick me up at the {v}.", "i am at the {v}."],
        "where should it pick you up?",
        "from the {v}",
    ),
    slot(
        "destination",
        LANDMARKS,
        true,
        &["take me to the {v}.", "i am heading to the {v}."],
        "where are you heading?",
        "to the {v}",
    ),
    slot(
        "leaveat",
        TIMES,
        false,
        &["i want to leave at {v}.", "leave at {v} please."],
        "what time do you want to leave?",
        "leaving at {v}",
    ),
    slot(
        "arriveby",
        TIMES,
        false,
        &["i must arrive by {v}.", "i have to be there by {v}."],
        "when do you need to arrive?",
        "arriving by {v}",
    ),
];

static RESTAURANT_SLOTS: [SlotTemplate; 5] = [
    slot(
        "food",
        FOODS,
        true,
        &["i would like {v} food.", "i am craving {v} food."],
        "what food do you like?",
        "serving {v} food",
    ),
    AREA,
    PRICE,
    PEOPLE_SLOT,
    slot(
        "time",
        TIMES,
        false,
        &["we will come at {v}.", "make it for {v}."],
        "what time should i reserve?",
        "at {v}",
    ),
];

static HOTEL_SLOTS: [SlotTemplate; 5] = [
    slot(
        "name",
        HOTELS,
        true,
        &["i want the {v} hotel.", "is the {v} hotel free?"],
        "do you have a hotel in mind?",
        "at the {v} hotel",
    ),
    AREA,
    PRICE,
    slot(
        "stay",
        PEOPLE,
        false,
        &["i will stay {v} nights.", "we need it for {v} nights."],
        "how many nights will you stay?",
        "for {v} nights",
    ),
    DAY,
];

static ATTRACTION_SLOTS: [SlotTemplate; 3] = [
    slot(
        "type",
        SIGHTS,
        true,
        &["i want to see a {v}.", "is there a {v} to visit?"],
        "what type of place do you like?",
        "such as a {v}",
    ),
    AREA,
    DAY,
];

static DOMAINS: [DomainTemplate; 5] = [
    DomainTemplate {
        name: "attraction",
        noun: "an attraction",
        intents: &["find", "visit"],
        slots: &ATTRACTION_SLOTS,
        fillers: &[
            "exhibition", "tour", "guide", "sculpture", "painting", "history", "architecture",
            "souvenir", "admission", "collection", "statue", "fountain", "heritage",
            "sightseeing", "landmark", "map", "photos", "visitor", "display", "entrance",
        ],
    },
    DomainTemplate {
        name: "hotel",
        noun: "a room",
        intents: &["book", "find"],
        slots: &HOTEL_SLOTS,
        fillers: &[
            "bed", "breakfast", "reception", "suite", "pillow", "towel", "balcony", "lobby",
            "guesthouse", "wifi", "lift", "checkin", "checkout", "housekeeping", "minibar",
            "shower", "pool", "spa", "concierge", "sauna",
        ],
    },
    DomainTemplate {
        name: "restaurant",
        noun: "a table",
        intents: &["book", "find"],
        slots: &RESTAURANT_SLOTS,
        fillers: &[
            "menu", "dish", "chef", "dessert", "wine", "dinner", "lunch", "waiter", "starter",
            "vegetarian", "spicy", "kitchen", "cuisine", "sauce", "soup", "pasta", "noodles",
            "curry", "grill", "bistro",
        ],
    },
    DomainTemplate {
        name: "taxi",
        noun: "a taxi",
        intents: &["book", "find"],
        slots: &TAXI_SLOTS,
        fillers: &[
            "driver", "cab", "car", "meter", "pickup", "dropoff", "ride", "minicab", "chauffeur",
            "traffic", "lane", "seatbelt", "trunk", "luggage", "tip", "receipt", "roundabout",
            "highway", "horn", "sedan",
        ],
    },
    DomainTemplate {
        name: "train",
        noun: "a train",
        intents: &["book", "find"],
        slots: &TRAIN_SLOTS,
        fillers: &[
            "railway", "platform", "ticket", "carriage", "journey", "timetable", "conductor",
            "fare", "arrival", "express", "seat", "rail", "coach", "route", "track", "return",
            "refund", "locomotive", "sleeper", "junction",
        ],
    },
];

/// The five built-in domains in label order.
pub fn builtin_domains() -> &'static [DomainTemplate] {
    &DOMAINS
}

/// Words that never occur in generated text, for corrupting domain words.
pub fn distractor_words() -> &'static [&'static str] {
    &[
        "galaxy", "violin", "glacier", "tornado", "volcano", "penguin", "nebula", "saxophone",
        "cactus", "meteor", "orchid", "canyon", "lobster", "quartz", "tundra", "walrus", "comet",
        "banjo", "coral", "falcon", "jungle", "lantern", "marble", "narwhal", "oasis", "pyramid",
        "quiver", "reef", "sphinx", "tulip", "umbrella", "vortex", "whistle", "yacht", "zephyr",
        "anchor", "blizzard", "cobalt", "dolphin", "ember",
    ]
}

const USER_FILLERS: &[&str] = &[
    "is there a {w}?",
    "what about the {w}?",
    "how is the {w}?",
    "i also want the {w} and the {w}.",
];
const SYSTEM_FILLERS: &[&str] = &[
    "there is a {w}.",
    "the {w} is here.",
    "we have the {w} and the {w}.",
    "let me check the {w}.",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    /// Subset of built-in domain labels; empty means all.
    pub domains: Vec<String>,
    pub examples_per_domain: usize,
    /// Fraction of the second domain's fillers replaced by the first's, for
    /// every pair in `overlap_pairs`.
    pub overlap: f64,
    pub overlap_pairs: Vec<(String, String)>,
    /// Probability of a filler sentence after each turn.
    pub filler_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            domains: Vec::new(),
            examples_per_domain: 300,
            overlap: 0.25,
            overlap_pairs: vec![
                ("train".into(), "taxi".into()),
                ("restaurant".into(), "hotel".into()),
            ],
            filler_prob: 0.7,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn templates(&self) -> Result<Vec<&'static DomainTemplate>> {
        if self.domains.is_empty() {
            return Ok(DOMAINS.iter().collect());
        }
        let mut out = Vec::new();
        for name in &self.domains {
            let t = DOMAINS
                .iter()
                .find(|d| d.name == name)
                .ok_or_else(|| DopError::contract(format!("unknown synthetic domain {name}")))?;
            if out.iter().any(|o: &&DomainTemplate| o.name == t.name) {
                return Err(DopError::contract(format!("domain {name} listed twice")));
            }
            out.push(t);
        }
        out.sort_by_key(|d| d.name);
        Ok(out)
    }

    /// Effective filler list of every domain after applying the overlap.
    pub fn fillers(&self) -> Result<Vec<(&'static str, Vec<&'static str>)>> {
        let templates = self.templates()?;
        let mut fillers: Vec<(&'static str, Vec<&'static str>)> =
            templates.iter().map(|t| (t.name, t.fillers.to_vec())).collect();
        for (a, b) in &self.overlap_pairs {
            let src = templates.iter().find(|t| t.name == a);
            let dst = fillers.iter_mut().find(|(n, _)| n == b);
            if let (Some(src), Some((_, dst))) = (src, dst) {
                let n = (self.overlap * dst.len() as f64).round() as usize;
                let n = n.min(src.fillers.len());
                dst[..n].copy_from_slice(&src.fillers[..n]);
            }
        }
        Ok(fillers)
    }
}

/// Generates `examples_per_domain` dialogues for every selected domain.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    let templates = spec.templates()?;
    if templates.len() < 3 {
        return Err(DopError::contract("synthetic corpus needs at least 3 domains"));
    }
    if spec.examples_per_domain < 20 {
        return Err(DopError::contract("synthetic corpus needs at least 20 examples per domain"));
    }
    if !(0.0..=1.0).contains(&spec.overlap) || !(0.0..=1.0).contains(&spec.filler_prob) {
        return Err(DopError::contract("overlap and filler_prob must lie in [0, 1]"));
    }
    let fillers = spec.fillers()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut examples = Vec::new();
    for (t, (_, words)) in templates.iter().zip(&fillers) {
        for i in 0..spec.examples_per_domain {
            examples.push(generate_one(t, words, spec.filler_prob, i, &mut rng));
        }
    }
    Corpus::new(examples)
}

fn fill_words(template: &str, words: &[&str], rng: &mut ChaCha8Rng) -> String {
    let mut out = template.to_string();
    while let Some(pos) = out.find("{w}") {
        let w = words.choose(rng).expect("nonempty fillers");
        out.replace_range(pos..pos + 3, w);
    }
    out
}

fn generate_one(
    t: &DomainTemplate,
    fillers: &[&str],
    filler_prob: f64,
    index: usize,
    rng: &mut ChaCha8Rng,
) -> DialogueExample {
    let intent = *t.intents.choose(rng).expect("intents");
    let n_slots = rng.random_range(2..=t.slots.len().min(4));
    let mut chosen: Vec<usize> = (0..t.slots.len()).collect();
    chosen.shuffle(rng);
    chosen.truncate(n_slots);
    chosen.sort_unstable();

    let values: Vec<(&SlotTemplate, &str)> = chosen
        .iter()
        .map(|&i| {
            let s = &t.slots[i];
            (s, *s.values.choose(rng).expect("values"))
        })
        .collect();

    let mut turns = Vec::new();
    let user = |text: String| Turn {
        speaker: "USER".into(),
        text,
    };
    let opener = format!("hello. i want to {intent} {}.", t.noun);
    turns.push(user(opener));
    turns.push(Turn {
        speaker: "SYSTEM".into(),
        text: "sure, i can help with that.".into(),
    });

    let mut mention_order: Vec<usize> = (0..values.len()).collect();
    mention_order.shuffle(rng);
    for k in mention_order {
        let (s, v) = values[k];
        if rng.random_bool(0.5) {
            turns.push(Turn {
                speaker: "SYSTEM".into(),
                text: s.question.to_string(),
            });
        }
        let mut text = s.mentions.choose(rng).expect("mentions").replace("{v}", v);
        if rng.random_bool(filler_prob) {
            text.push(' ');
            text.push_str(&fill_words(USER_FILLERS.choose(rng).expect("f"), fillers, rng));
        }
        turns.push(user(text));
        if rng.random_bool(filler_prob) {
            turns.push(Turn {
                speaker: "SYSTEM".into(),
                text: fill_words(SYSTEM_FILLERS.choose(rng).expect("f"), fillers, rng),
            });
        }
    }
    turns.push(Turn {
        speaker: "SYSTEM".into(),
        text: format!("done. i have arranged {} for you.", t.noun),
    });
    turns.push(user("thank you. goodbye.".into()));

    let verb = if intent == "find" {
        "is looking for"
    } else {
        "wants to"
    };
    let head = if intent == "find" {
        format!("the user {verb} {}", t.noun)
    } else {
        format!("the user {verb} {intent} {}", t.noun)
    };
    let phrases: Vec<String> = values.iter().map(|(s, v)| s.phrase.replace("{v}", v)).collect();
    let summary = format!("{head} {}.", phrases.join(" "));

    DialogueExample {
        id: format!("{}-{index:04}", t.name),
        domain: t.name.to_string(),
        turns,
        prompt: Prompt::State(DialogueState {
            intent: intent.to_string(),
            slots: values
                .iter()
                .map(|(s, v)| Slot {
                    name: s.name.to_string(),
                    value: v.to_string(),
                })
                .collect(),
        }),
        summary,
    }
}
