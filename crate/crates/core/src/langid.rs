//! Character-trigram language identification.
//!
//! The detector interface is pluggable; the bundled implementation scores
//! character-trigram frequency profiles built from small embedded seed
//! texts and returns the argmax language with a normalized confidence.

use std::collections::BTreeMap;

/// Pluggable language detector.
pub trait LanguageDetector: Send + Sync {
    /// Language code plus a confidence in [0, 1]. Unknown scripts and
    /// empty input return ("und", 0.0).
    fn detect(&self, text: &str) -> (String, f64);
}

const SEED_EN: &str = "the quick brown fox jumps over the lazy dog and runs across the wide \
green field every single morning . she said that the weather would be fine today but it \
rained all afternoon in the old town . we have been waiting for the train at the station \
since nine and nobody could tell us when it would arrive . this is not what they wanted \
to hear from the government about schools and hospitals . many people think that reading \
books is one of the best ways to learn something new about the world . the children were \
playing in the garden behind the house while their parents cooked dinner together .";

const SEED_DE: &str = "der schnelle braune fuchs springt jeden morgen über den faulen hund \
und läuft über das weite grüne feld . sie sagte dass das wetter heute schön werden würde \
aber es regnete den ganzen nachmittag in der alten stadt . wir haben seit neun uhr am \
bahnhof auf den zug gewartet und niemand konnte uns sagen wann er ankommen würde . das ist \
nicht was sie von der regierung über schulen und krankenhäuser hören wollten . viele \
menschen denken dass das lesen von büchern eine der besten möglichkeiten ist etwas neues \
über die welt zu lernen . die kinder spielten im garten hinter dem haus während ihre \
eltern zusammen das abendessen kochten .";

const SEED_FR: &str = "le rapide renard brun saute chaque matin par dessus le chien \
paresseux et court à travers le grand champ vert . elle a dit que le temps serait beau \
aujourd'hui mais il a plu tout l'après midi dans la vieille ville . nous attendons le \
train à la gare depuis neuf heures et personne ne pouvait nous dire quand il arriverait . \
ce n'est pas ce qu'ils voulaient entendre du gouvernement sur les écoles et les hôpitaux . \
beaucoup de gens pensent que la lecture des livres est une des meilleures façons \
d'apprendre quelque chose de nouveau sur le monde .";

const SEED_ES: &str = "el rápido zorro marrón salta cada mañana sobre el perro perezoso y \
corre por el ancho campo verde . ella dijo que el tiempo sería bueno hoy pero llovió toda \
la tarde en el casco antiguo . hemos estado esperando el tren en la estación desde las \
nueve y nadie podía decirnos cuándo llegaría . esto no es lo que querían escuchar del \
gobierno sobre las escuelas y los hospitales . mucha gente piensa que leer libros es una \
de las mejores maneras de aprender algo nuevo sobre el mundo .";

type Profile = BTreeMap<[char; 3], f64>;

/// Built-in detector over a configurable language set.
pub struct TrigramDetector {
    profiles: Vec<(String, Profile)>,
}

fn trigrams(text: &str) -> Profile {
    let mut counts: Profile = BTreeMap::new();
    let mut total = 0.0;
    for word in text.split_whitespace() {
        // pad with spaces so word boundaries carry signal
        let chars: Vec<char> = std::iter::once(' ')
            .chain(word.to_lowercase().chars())
            .chain(std::iter::once(' '))
            .collect();
        for w in chars.windows(3) {
            *counts.entry([w[0], w[1], w[2]]).or_insert(0.0) += 1.0;
            total += 1.0;
        }
    }
    if total > 0.0 {
        for v in counts.values_mut() {
            *v /= total;
        }
    }
    counts
}

fn cosine(a: &Profile, b: &Profile) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let dot: f64 = small
        .iter()
        .filter_map(|(k, va)| large.get(k).map(|vb| va * vb))
        .sum();
    let norm = |p: &Profile| p.values().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

impl TrigramDetector {
    /// Profiles for en, de, fr, es from the embedded seed texts.
    pub fn builtin() -> Self {
        Self::from_seeds(&[
            ("en", SEED_EN),
            ("de", SEED_DE),
            ("fr", SEED_FR),
            ("es", SEED_ES),
        ])
    }

    pub fn from_seeds(seeds: &[(&str, &str)]) -> Self {
        TrigramDetector {
            profiles: seeds
                .iter()
                .map(|(code, text)| (code.to_string(), trigrams(text)))
                .collect(),
        }
    }

    /// Restrict to a subset of the built-in languages.
    pub fn with_languages(mut self, codes: &[&str]) -> Self {
        self.profiles.retain(|(c, _)| codes.contains(&c.as_str()));
        self
    }

    pub fn languages(&self) -> Vec<&str> {
        self.profiles.iter().map(|(c, _)| c.as_str()).collect()
    }
}

impl LanguageDetector for TrigramDetector {
    fn detect(&self, text: &str) -> (String, f64) {
        let probe = trigrams(text);
        if probe.is_empty() {
            return ("und".to_string(), 0.0);
        }
        let mut scores: Vec<(usize, f64)> = self
            .profiles
            .iter()
            .enumerate()
            .map(|(i, (_, p))| (i, cosine(&probe, p)))
            .collect();
        // stable argmax: ties break toward the earlier profile
        scores.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let (best_idx, best) = scores[0];
        if best <= 0.0 {
            return ("und".to_string(), 0.0);
        }
        let sum: f64 = scores.iter().map(|(_, s)| s.max(0.0)).sum();
        let confidence = if sum > 0.0 { best / sum } else { 0.0 };
        (self.profiles[best_idx].0.clone(), confidence.clamp(0.0, 1.0))
    }
}

/// Test helper: always reports the requested language.
pub struct FixedDetector(pub String);

impl LanguageDetector for FixedDetector {
    fn detect(&self, _text: &str) -> (String, f64) {
        (self.0.clone(), 1.0)
    }
}
