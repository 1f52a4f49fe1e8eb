//! Deterministic synthetic Hindi corpus for offline runs when no real corpus
//! is available. A small lexicon and agreement rules (gender, tense) produce
//! short paragraphs centred on one protagonist, so the text has local
//! structure a language model can learn but is not a fixed list of lines.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::RawDocument;

#[derive(Clone, Copy, PartialEq)]
enum G {
    M,
    F,
}

struct Noun(&'static str, G);

const PEOPLE: &[Noun] = &[
    Noun("राम", G::M),
    Noun("मोहन", G::M),
    Noun("अर्जुन", G::M),
    Noun("सुरेश", G::M),
    Noun("विकास", G::M),
    Noun("करण", G::M),
    Noun("सीता", G::F),
    Noun("गीता", G::F),
    Noun("पूजा", G::F),
    Noun("अनीता", G::F),
    Noun("मीरा", G::F),
    Noun("कविता", G::F),
    Noun("किसान", G::M),
    Noun("शिक्षक", G::M),
    Noun("डॉक्टर", G::M),
    Noun("दुकानदार", G::M),
    Noun("मछुआरा", G::M),
    Noun("लड़का", G::M),
    Noun("लड़की", G::F),
    Noun("दादी", G::F),
    Noun("शिक्षिका", G::F),
    Noun("नर्स", G::F),
];

const OBJECTS: &[Noun] = &[
    Noun("खाना", G::M),
    Noun("पत्र", G::M),
    Noun("फल", G::M),
    Noun("गीत", G::M),
    Noun("घर", G::M),
    Noun("खिलौना", G::M),
    Noun("अख़बार", G::M),
    Noun("दरवाज़ा", G::M),
    Noun("किताब", G::F),
    Noun("चिट्ठी", G::F),
    Noun("रोटी", G::F),
    Noun("कहानी", G::F),
    Noun("चाय", G::F),
    Noun("सब्ज़ी", G::F),
    Noun("तस्वीर", G::F),
    Noun("साइकिल", G::F),
    Noun("कुर्सी", G::F),
    Noun("कविता", G::F),
];

const PLACES: &[Noun] = &[
    Noun("गाँव", G::M),
    Noun("शहर", G::M),
    Noun("बाज़ार", G::M),
    Noun("खेत", G::M),
    Noun("स्कूल", G::M),
    Noun("मंदिर", G::M),
    Noun("जंगल", G::M),
    Noun("स्टेशन", G::M),
    Noun("अस्पताल", G::M),
    Noun("मैदान", G::M),
    Noun("नदी", G::F),
    Noun("दुकान", G::F),
    Noun("गली", G::F),
];

const TIMES: &[&str] = &[
    "सुबह",
    "शाम को",
    "रात में",
    "आज",
    "हर दिन",
    "रविवार को",
    "दोपहर में",
    "छुट्टी के दिन",
];

/// Adjective stem ending in -आ inflects; others are invariant.
const ADJECTIVES: &[&str] = &[
    "अच्छा", "बड़ा", "छोटा", "नया", "पुराना", "लंबा", "ठंडा", "मीठा", "ताज़ा", "सुंदर", "साफ़", "गरम",
];

/// Transitive verb: stem, past masculine, past feminine.
struct Tv(&'static str, &'static str, &'static str);

const TRANSITIVE: &[Tv] = &[
    Tv("पढ़", "पढ़ा", "पढ़ी"),
    Tv("लिख", "लिखा", "लिखी"),
    Tv("खा", "खाया", "खाई"),
    Tv("देख", "देखा", "देखी"),
    Tv("बना", "बनाया", "बनाई"),
    Tv("ख़रीद", "ख़रीदा", "ख़रीदी"),
    Tv("सुन", "सुना", "सुनी"),
    Tv("धो", "धोया", "धोई"),
    Tv("ढूँढ", "ढूँढा", "ढूँढी"),
];

/// Intransitive verb: stem, past masculine, past feminine, takes a bare destination.
struct Iv(&'static str, &'static str, &'static str, bool);

const INTRANSITIVE: &[Iv] = &[
    Iv("जा", "गया", "गई", true),
    Iv("आ", "आया", "आई", true),
    Iv("पहुँच", "पहुँचा", "पहुँची", true),
    Iv("खेल", "खेला", "खेली", false),
    Iv("दौड़", "दौड़ा", "दौड़ी", false),
    Iv("बैठ", "बैठा", "बैठी", false),
    Iv("सो", "सोया", "सोई", false),
    Iv("रुक", "रुका", "रुकी", false),
];

fn adj(a: &str, g: G) -> String {
    match (a.strip_suffix('ा'), g) {
        (Some(stem), G::F) => format!("{stem}ी"),
        _ => a.to_string(),
    }
}

fn ends_in_vowel(stem: &str) -> bool {
    matches!(stem.chars().last(), Some('ा' | 'ो' | 'ी' | 'े'))
}

fn habitual(stem: &str, g: G) -> String {
    format!("{stem}{} है", if g == G::M { "ता" } else { "ती" })
}

fn future(stem: &str, g: G) -> String {
    let glide = if ends_in_vowel(stem) { "ए" } else { "े" };
    format!("{stem}{glide}{}", if g == G::M { "गा" } else { "गी" })
}

struct Gen<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl Gen<'_> {
    fn pick<'t, T>(&mut self, xs: &'t [T]) -> &'t T {
        xs.choose(self.rng).expect("non-empty lexicon")
    }

    fn maybe<T>(&mut self, p: f64, f: impl FnOnce(&mut Self) -> T) -> Option<T> {
        if self.rng.gen_bool(p) {
            Some(f(self))
        } else {
            None
        }
    }

    fn object_phrase(&mut self) -> (String, G) {
        let o = self.pick(OBJECTS);
        let phrase = match self.maybe(0.5, |s| *s.pick(ADJECTIVES)) {
            Some(a) => format!("{} {}", adj(a, o.1), o.0),
            None => o.0.to_string(),
        };
        (phrase, o.1)
    }

    fn sentence(&mut self, subj: &str, g: G, pronoun: bool) -> String {
        let time = self.maybe(0.4, |s| *s.pick(TIMES));
        let mut parts: Vec<String> = Vec::new();
        match self.rng.gen_range(0..7) {
            0 | 1 => {
                // perfective transitive: agreement with the object
                let v = self.pick(TRANSITIVE);
                let (obj, og) = self.object_phrase();
                let agent = if pronoun { "उसने".to_string() } else { format!("{subj} ने") };
                parts.extend(time.map(String::from));
                parts.push(agent);
                parts.push(obj);
                parts.push(if og == G::M { v.1 } else { v.2 }.to_string());
            }
            2 => {
                let v = self.pick(TRANSITIVE);
                let (obj, _) = self.object_phrase();
                parts.push(subj.to_string());
                parts.extend(time.map(String::from));
                parts.push(obj);
                parts.push(habitual(v.0, g));
            }
            3 => {
                let v = self.pick(INTRANSITIVE);
                let place = self.pick(PLACES);
                parts.push(subj.to_string());
                parts.extend(time.map(String::from));
                parts.push(if v.3 {
                    place.0.to_string()
                } else {
                    format!("{} में", place.0)
                });
                parts.push(if self.rng.gen_bool(0.5) {
                    if g == G::M { v.1 } else { v.2 }.to_string()
                } else {
                    habitual(v.0, g)
                });
            }
            4 => {
                let v = self.pick(TRANSITIVE);
                let (obj, _) = self.object_phrase();
                parts.push(subj.to_string());
                parts.push("कल".to_string());
                parts.push(obj);
                parts.push(future(v.0, g));
            }
            5 => {
                // existential: "in the <place> there is a <adj> <noun>"
                let place = self.pick(PLACES);
                let thing = self.pick(OBJECTS);
                let a = *self.pick(ADJECTIVES);
                let copula = if self.rng.gen_bool(0.5) {
                    "है"
                } else if thing.1 == G::M {
                    "था"
                } else {
                    "थी"
                };
                parts.push(format!("{} में एक {} {} {copula}", place.0, adj(a, thing.1), thing.0));
            }
            _ => {
                let (obj, og) = self.object_phrase();
                let who = if pronoun { "उसको".to_string() } else { format!("{subj} को") };
                parts.push(who);
                parts.push(obj);
                parts.push(adj("अच्छा", og));
                parts.push(if og == G::M { "लगता है" } else { "लगती है" }.to_string());
            }
        }
        format!("{}।", parts.join(" "))
    }

    fn paragraph(&mut self) -> String {
        let hero = self.pick(PEOPLE);
        let n = self.rng.gen_range(3..=7);
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let s = if i > 0 && self.rng.gen_bool(0.3) {
                self.sentence("वह", hero.1, true)
            } else if self.rng.gen_bool(0.15) {
                let other = self.pick(PEOPLE);
                self.sentence(other.0, other.1, false)
            } else {
                self.sentence(hero.0, hero.1, false)
            };
            out.push(s);
        }
        out.join(" ")
    }
}

/// Generates documents until their text totals at least `target_bytes`.
pub fn generate_hindi(target_bytes: usize, seed: u64) -> Vec<RawDocument> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Gen { rng: &mut rng };
    let mut docs = Vec::new();
    let mut total = 0;
    while total < target_bytes {
        let text = g.paragraph();
        total += text.len() + 1;
        docs.push(RawDocument {
            id: format!("synth-{}", docs.len()),
            language: "hi".into(),
            script: "Devanagari".into(),
            text,
        });
    }
    docs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{clean_text, CleanConfig};

    #[test]
    fn deterministic_and_sized() {
        let a = generate_hindi(20_000, 3);
        assert_eq!(a, generate_hindi(20_000, 3));
        assert_ne!(a, generate_hindi(20_000, 4));
        let bytes: usize = a.iter().map(|d| d.text.len() + 1).sum();
        assert!(bytes >= 20_000);
    }

    #[test]
    fn output_survives_cleaning_unchanged() {
        let c = CleanConfig::default();
        for d in generate_hindi(10_000, 1) {
            assert_eq!(clean_text(&d.text, &c), d.text);
        }
    }

    #[test]
    fn inflection_rules() {
        assert_eq!(adj("अच्छा", G::F), "अच्छी");
        assert_eq!(adj("सुंदर", G::F), "सुंदर");
        assert_eq!(future("खा", G::M), "खाएगा");
        assert_eq!(future("पढ़", G::F), "पढ़ेगी");
        assert_eq!(habitual("लिख", G::M), "लिखता है");
    }
}
