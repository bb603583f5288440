//! Templated knowledge-grounded dialogue corpus for desk-scale experiments.
//!
//! A fact bank is generated from fixed templates, then each dialogue talks
//! about one to three facts. Grounded turns embed the fact text verbatim
//! behind a short prefix, so responses overlap their fact lexically.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Corpus, Dialogue, KnowledgePiece, Speaker, Utterance};
use crate::error::{GcnError, Result};
use crate::seed::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_dialogues: usize,
    pub fact_bank_size: usize,
    pub max_facts_per_dialogue: usize,
    pub min_turns: usize,
    pub max_turns: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_dialogues: 200,
            fact_bank_size: 50,
            max_facts_per_dialogue: 3,
            min_turns: 4,
            max_turns: 8,
        }
    }
}

const SUBJECTS: &[&str] = &[
    "the eiffel tower", "the amazon river", "mount everest", "the great wall", "honey bees",
    "octopuses", "the moon", "jupiter", "the piano", "chess", "basketball", "football",
    "the olympics", "coffee", "chocolate", "penguins", "dolphins", "the violin", "volcanoes",
    "the sahara desert", "tigers", "the internet", "jazz music", "the library of alexandria",
    "hot air balloons", "sharks", "the guitar", "tea", "saturn", "the pyramids",
];

const VERBS: &[&str] = &["built", "discovered", "described", "designed", "invented", "mapped", "studied", "photographed"];
const PERSONS: &[&str] = &[
    "a french engineer", "a young sailor", "an italian monk", "a chinese astronomer", "a dutch merchant",
    "a swedish botanist", "a greek poet", "a retired teacher", "two curious students", "a famous painter",
];
const NUMBERS: &[&str] = &["three", "seven", "twelve", "forty", "ninety", "two hundred", "a thousand", "six million"];
const UNITS: &[&str] = &["species", "rooms", "players", "moons", "keys", "varieties", "records", "fans", "songs", "rules"];
const ABILITIES: &[&str] = &["sleep", "swim", "sing", "travel", "glow", "survive", "spin", "hide"];
const DURATIONS: &[&str] = &["hours", "days", "weeks", "months", "years", "decades"];
const ADJECTIVES: &[&str] = &["older", "heavier", "louder", "faster", "rarer", "taller", "warmer", "stranger"];
const CATEGORIES: &[&str] = &["animals", "buildings", "instruments", "planets", "sports", "drinks", "landmarks", "inventions"];
const PLACES: &[&str] = &["brazil", "japan", "kenya", "norway", "peru", "egypt", "canada", "india", "iceland", "mexico"];
const SEASONS: &[&str] = &["winter", "summer", "spring", "autumn", "holidays", "festivals"];
const WORKS: &[&str] = &["novel", "painting", "opera", "movie", "poem", "sculpture"];
const TITLES: &[&str] = &["silent waves", "the blue hour", "golden echoes", "night garden", "paper moons", "the last orbit", "wild harbor", "crimson sky"];

const GROUNDED_PREFIXES: &[&str] = &["did you know that", "i read that", "yes , i heard that", "fun fact :", "actually ,", "apparently"];
const OPENERS: &[&str] = &[
    "hi , do you know much about {s} ?",
    "have you ever thought about {s} ?",
    "what do you think of {s} ?",
    "i have been reading about {s} lately .",
];
const FOLLOW_UPS: &[&str] = &[
    "speaking of which , what about {s} ?",
    "what else do you know about {s} ?",
    "cool , and have you heard anything about {s} ?",
];
const REACTIONS: &[&str] = &[
    "wow , that is amazing !",
    "i did not know that about {s} .",
    "that is really interesting to hear .",
    "haha , {s} sounds fun .",
    "oh really ? tell me more .",
];
const CLOSINGS: &[&str] = &[
    "well , it was fun chatting with you .",
    "i should go now , talk later !",
    "thanks for the nice chat today .",
    "let us talk again some time .",
];

fn pick<'a>(rng: &mut Rng, items: &[&'a str]) -> &'a str {
    items.choose(rng).copied().unwrap_or_default()
}

fn fill(template: &str, subject: &str) -> String {
    template.replace("{s}", subject)
}

fn make_fact(rng: &mut Rng, subject: &str) -> String {
    match rng.random_range(0..6) {
        0 => format!(
            "{subject} was first {} in {} by {} .",
            pick(rng, VERBS),
            rng.random_range(1500..2000),
            pick(rng, PERSONS)
        ),
        1 => format!("{subject} has more than {} {} .", pick(rng, NUMBERS), pick(rng, UNITS)),
        2 => format!(
            "{subject} can {} for {} {} .",
            pick(rng, ABILITIES),
            pick(rng, NUMBERS),
            pick(rng, DURATIONS)
        ),
        3 => format!("{subject} is {} than most {} .", pick(rng, ADJECTIVES), pick(rng, CATEGORIES)),
        4 => format!(
            "{subject} is popular in {} , especially during {} .",
            pick(rng, PLACES),
            pick(rng, SEASONS)
        ),
        _ => format!(
            "{subject} inspired a famous {} called {} .",
            pick(rng, WORKS),
            pick(rng, TITLES)
        ),
    }
}

/// Generates a corpus deterministically from `spec` and `rng_seed`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, rng_seed: u64) -> Result<Corpus> {
    if spec.fact_bank_size == 0 || spec.max_facts_per_dialogue == 0 {
        return Err(GcnError::Config("fact bank and facts per dialogue must be positive".into()));
    }
    if spec.min_turns < 2 || spec.max_turns < spec.min_turns {
        return Err(GcnError::Config("need 2 <= min_turns <= max_turns".into()));
    }
    let mut rng = seed::rng_for(rng_seed, "synthetic-corpus", 0);

    let mut facts: Vec<(usize, KnowledgePiece)> = Vec::with_capacity(spec.fact_bank_size);
    let mut seen = HashSet::new();
    while facts.len() < spec.fact_bank_size {
        let subject = facts.len() % SUBJECTS.len();
        let text = make_fact(&mut rng, SUBJECTS[subject]);
        if seen.insert(text.clone()) {
            let id = format!("fact-{:04}", facts.len());
            facts.push((subject, KnowledgePiece::new(id, text)?));
        }
    }

    let mut dialogues = Vec::with_capacity(spec.n_dialogues);
    for d in 0..spec.n_dialogues {
        let n_facts = rng.random_range(1..=spec.max_facts_per_dialogue.min(facts.len()));
        let chosen: Vec<&(usize, KnowledgePiece)> = facts.choose_multiple(&mut rng, n_facts).collect();
        let target_turns = rng.random_range(spec.min_turns..=spec.max_turns);

        let mut lines: Vec<String> = Vec::new();
        for (j, (subject, fact)) in chosen.iter().enumerate() {
            let s = SUBJECTS[*subject];
            let ask = if j == 0 { OPENERS } else { FOLLOW_UPS };
            lines.push(fill(pick(&mut rng, ask), s));
            lines.push(format!("{} {}", pick(&mut rng, GROUNDED_PREFIXES), fact.text));
            lines.push(fill(pick(&mut rng, REACTIONS), s));
        }
        while lines.len() < target_turns {
            lines.push(pick(&mut rng, CLOSINGS).to_string());
        }
        lines.truncate(target_turns);

        let mut speaker = Speaker::A;
        let mut turns = Vec::with_capacity(lines.len());
        for line in lines {
            turns.push(Utterance::new(speaker, line)?);
            speaker = speaker.other();
        }
        dialogues.push(Dialogue {
            id: format!("dlg-{d:05}"),
            turns,
            knowledge_refs: chosen.iter().map(|(_, k)| k.id.clone()).collect(),
        });
    }

    Ok(Corpus {
        dialogues,
        knowledge: facts.into_iter().map(|(_, k)| k).collect(),
    })
}
