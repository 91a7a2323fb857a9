use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use super::{validate_phrase, Role, Sentence, Slot};
use crate::error::{Error, Result};

/// Grammar shipped with the repository.
pub const DEFAULT_GRAMMAR: &str = include_str!("../../../../data/grammar.default");

const MAX_TEST_ATTEMPTS_PER_SENTENCE: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedPhrase {
    pub text: String,
    pub weight: f64,
}

/// Phrases that become more likely after particular verbs: the lexicon
/// weight of a listed phrase is multiplied by `boost` when the sentence's
/// verb names it.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Affinity {
    pub boost: f64,
    pub by_role: BTreeMap<Role, BTreeMap<String, Vec<String>>>,
}

impl Affinity {
    fn boosted(&self, role: Role, verb: &str, phrase: &str) -> bool {
        self.by_role
            .get(&role)
            .and_then(|m| m.get(verb))
            .is_some_and(|list| list.iter().any(|p| p == phrase))
    }
}

/// Weighted slot lexicon, verb–object compatibility, verb affinities and
/// per-role inclusion probabilities.
#[derive(Debug, Clone)]
pub struct Grammar {
    lexicon: BTreeMap<Role, Vec<WeightedPhrase>>,
    compat: BTreeMap<String, Vec<String>>,
    affinity: Affinity,
    slot_presence: BTreeMap<Role, f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GrammarDoc {
    slot_presence: BTreeMap<String, f64>,
    lexicon: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    compat: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    affinity: Option<AffinityDoc>,
}

#[derive(Deserialize)]
struct AffinityDoc {
    boost: f64,
    #[serde(flatten)]
    roles: BTreeMap<String, BTreeMap<String, Vec<String>>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<Sentence>,
    pub test: Vec<Sentence>,
}

impl Grammar {
    pub fn default_grammar() -> Self {
        Self::from_toml(DEFAULT_GRAMMAR).expect("shipped grammar is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: GrammarDoc = toml::from_str(text).map_err(|e| Error::Config(format!("grammar: {e}")))?;

        let mut slot_presence = BTreeMap::new();
        for (name, p) in doc.slot_presence {
            let role: Role = name
                .parse()
                .map_err(|_| Error::Config(format!("slot_presence: unknown role `{name}`")))?;
            slot_presence.insert(role, p);
        }
        let mut lexicon = BTreeMap::new();
        for (name, phrases) in doc.lexicon {
            let role: Role = name
                .parse()
                .map_err(|_| Error::Config(format!("lexicon: unknown role `{name}`")))?;
            let list = phrases
                .into_iter()
                .map(|(text, weight)| WeightedPhrase { text, weight })
                .collect();
            lexicon.insert(role, list);
        }
        let mut affinity = Affinity::default();
        if let Some(doc) = doc.affinity {
            affinity.boost = doc.boost;
            for (name, by_verb) in doc.roles {
                let role: Role = name
                    .parse()
                    .map_err(|_| Error::Config(format!("affinity: unknown role `{name}`")))?;
                affinity.by_role.insert(role, by_verb);
            }
        }
        Self::new(lexicon, doc.compat, affinity, slot_presence)
    }

    pub fn new(
        lexicon: BTreeMap<Role, Vec<WeightedPhrase>>,
        compat: BTreeMap<String, Vec<String>>,
        affinity: Affinity,
        slot_presence: BTreeMap<Role, f64>,
    ) -> Result<Self> {
        let grammar = Grammar {
            lexicon,
            compat,
            affinity,
            slot_presence,
        };
        grammar.validate()?;
        Ok(grammar)
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for role in Role::ALL {
            let Some(&p) = self.slot_presence.get(&role) else {
                return bad(format!("slot_presence.{role}: missing"));
            };
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("slot_presence.{role}: {p} is not a probability"));
            }
            let phrases = self.phrases(role);
            if p > 0.0 && phrases.is_empty() {
                return bad(format!("lexicon.{role}: no phrases but presence is {p}"));
            }
            for wp in phrases {
                if let Err(m) = validate_phrase(&wp.text) {
                    return bad(format!("lexicon.{role}: {m}"));
                }
                if !(wp.weight.is_finite() && wp.weight > 0.0) {
                    return bad(format!(
                        "lexicon.{role}.\"{}\": weight {} must be positive",
                        wp.text, wp.weight
                    ));
                }
            }
        }
        if self.slot_presence[&Role::Verbo] != 1.0 {
            return bad("slot_presence.verbo: must be 1.0".into());
        }
        let verbs: HashSet<&str> = self.phrases(Role::Verbo).iter().map(|w| w.text.as_str()).collect();
        let objects: HashSet<&str> = self.phrases(Role::OQue).iter().map(|w| w.text.as_str()).collect();
        for (verb, objs) in &self.compat {
            if !verbs.contains(verb.as_str()) {
                return bad(format!("compat.\"{verb}\": not a verbo phrase"));
            }
            for obj in objs {
                if !objects.contains(obj.as_str()) {
                    return bad(format!("compat.\"{verb}\": `{obj}` is not an o_que phrase"));
                }
            }
        }
        if !self.affinity.by_role.is_empty() && !(self.affinity.boost.is_finite() && self.affinity.boost >= 1.0) {
            return bad(format!("affinity.boost: {} must be at least 1", self.affinity.boost));
        }
        for (role, by_verb) in &self.affinity.by_role {
            if matches!(role, Role::Verbo | Role::OQue) {
                return bad(format!("affinity.{role}: verbs and objects are not affinity roles"));
            }
            let known: HashSet<&str> = self.phrases(*role).iter().map(|w| w.text.as_str()).collect();
            for (verb, list) in by_verb {
                if !verbs.contains(verb.as_str()) {
                    return bad(format!("affinity.{role}.\"{verb}\": not a verbo phrase"));
                }
                if let Some(p) = list.iter().find(|p| !known.contains(p.as_str())) {
                    return bad(format!("affinity.{role}.\"{verb}\": `{p}` is not a {role} phrase"));
                }
            }
        }
        Ok(())
    }

    pub fn phrases(&self, role: Role) -> &[WeightedPhrase] {
        self.lexicon.get(&role).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn presence(&self, role: Role) -> f64 {
        self.slot_presence[&role]
    }

    /// Objects admitted by a verb; empty for intransitive verbs.
    pub fn objects_for(&self, verb: &str) -> &[String] {
        self.compat.get(verb).map(Vec::as_slice).unwrap_or(&[])
    }

    fn object_weight(&self, object: &str) -> f64 {
        self.phrases(Role::OQue)
            .iter()
            .find(|w| w.text == object)
            .map(|w| w.weight)
            .unwrap_or(1.0)
    }

    /// Every phrase in the lexicon with its role.
    pub fn all_phrases(&self) -> impl Iterator<Item = (Role, &str)> {
        self.lexicon
            .iter()
            .flat_map(|(role, list)| list.iter().map(move |w| (*role, w.text.as_str())))
    }

    fn sample_sentence(&self, rng: &mut ChaCha8Rng) -> Sentence {
        let verb = pick(self.phrases(Role::Verbo), rng).to_owned();
        let mut slots = Vec::with_capacity(6);
        for role in Role::ALL {
            let presence: f64 = rng.random();
            let text = match role {
                Role::Verbo => Some(verb.clone()),
                Role::OQue => {
                    let objs = self.objects_for(&verb);
                    if objs.is_empty() || presence >= self.presence(role) {
                        None
                    } else {
                        let weights: Vec<f64> = objs.iter().map(|o| self.object_weight(o)).collect();
                        let dist = WeightedIndex::new(&weights).expect("validated weights");
                        Some(objs[dist.sample(rng)].clone())
                    }
                }
                _ if presence >= self.presence(role) => None,
                _ => {
                    let phrases = self.phrases(role);
                    let weights = phrases.iter().map(|w| {
                        if self.affinity.boosted(role, &verb, &w.text) {
                            w.weight * self.affinity.boost
                        } else {
                            w.weight
                        }
                    });
                    let dist = WeightedIndex::new(weights).expect("validated weights");
                    Some(phrases[dist.sample(rng)].text.clone())
                }
            };
            if let Some(text) = text {
                slots.push(Slot { role, text });
            }
        }
        Sentence::new(slots).expect("grammar phrases are validated")
    }
}

fn pick<'a>(phrases: &'a [WeightedPhrase], rng: &mut ChaCha8Rng) -> &'a str {
    let dist = WeightedIndex::new(phrases.iter().map(|w| w.weight)).expect("validated weights");
    &phrases[dist.sample(rng)].text
}

/// Samples a train split and a test split whose tagged renderings never
/// occur in the train split. Pure function of its arguments.
pub fn generate_corpus(grammar: &Grammar, n_train: usize, n_test: usize, seed: u64) -> Result<CorpusSplit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train: Vec<Sentence> = (0..n_train).map(|_| grammar.sample_sentence(&mut rng)).collect();
    let seen: HashSet<String> = train.iter().map(Sentence::render_tagged).collect();

    let mut test = Vec::with_capacity(n_test);
    let mut attempts = 0usize;
    while test.len() < n_test {
        attempts += 1;
        if attempts > MAX_TEST_ATTEMPTS_PER_SENTENCE * n_test {
            return Err(Error::Config(format!(
                "grammar too small: only {} of {n_test} test sentences are disjoint from the train split",
                test.len()
            )));
        }
        let s = grammar.sample_sentence(&mut rng);
        if !seen.contains(&s.render_tagged()) {
            test.push(s);
        }
    }
    Ok(CorpusSplit { train, test })
}

/// Checks that every slot of `sentence` is licensed by `grammar`.
pub fn validate_sentence(grammar: &Grammar, sentence: &Sentence) -> std::result::Result<(), String> {
    let verb = sentence.get(Role::Verbo).ok_or("missing verbo")?;
    for slot in sentence.slots() {
        if !grammar.phrases(slot.role).iter().any(|w| w.text == slot.text) {
            return Err(format!("`{}` is not a {} phrase", slot.text, slot.role));
        }
    }
    if let Some(obj) = sentence.get(Role::OQue) {
        if !grammar.objects_for(verb).iter().any(|o| o == obj) {
            return Err(format!("`{obj}` is not compatible with `{verb}`"));
        }
    }
    Ok(())
}
