//! Offline stand-in for every provider role.
//!
//! Replies are a pure function of the seed and the request. Verdicts follow
//! planted tokens: quality checks reject text containing [`PLANTED_REJECT`],
//! step checks reject steps containing [`PLANTED_FLAW`], and difficulty
//! checks mark examples with more than six options as hard (captions, which
//! have none, are a seeded coin flip). Rules added with
//! [`MockProvider::with_rule`] take precedence over the built-in behaviour.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::templates::*;
use super::{ProviderRequest, Transport, TransportError};
use crate::audio::PITCH_CLASS_NAMES;
use crate::metadata::{format_bpm_text, parse_metadata, MusicMetadata};

pub const PLANTED_REJECT: &str = "PLANTED_REJECT";
pub const PLANTED_FLAW: &str = "PLANTED_FLAW";

#[derive(Debug, Clone, PartialEq)]
pub enum MockOutcome {
    Text(String),
    Transient(String),
    Rejected(String),
}

type Predicate = Arc<dyn Fn(&ProviderRequest) -> bool + Send + Sync>;
type Responder = Arc<dyn Fn(&ProviderRequest, &mut ChaCha8Rng) -> MockOutcome + Send + Sync>;

#[derive(Clone)]
pub struct MockRule {
    when: Predicate,
    respond: Responder,
}

impl MockRule {
    pub fn new(
        when: impl Fn(&ProviderRequest) -> bool + Send + Sync + 'static,
        respond: impl Fn(&ProviderRequest, &mut ChaCha8Rng) -> MockOutcome + Send + Sync + 'static,
    ) -> Self {
        Self { when: Arc::new(when), respond: Arc::new(respond) }
    }
}

pub struct MockProvider {
    seed: u64,
    rules: Vec<MockRule>,
    /// Calls beyond this many fail transiently.
    fail_after: Option<usize>,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new(seed: u64) -> Self {
        Self { seed, rules: Vec::new(), fail_after: None, calls: AtomicUsize::new(0) }
    }

    /// Every call fails transiently.
    pub fn unavailable() -> Self {
        Self::new(0).fail_after(0)
    }

    pub fn fail_after(mut self, n: usize) -> Self {
        self.fail_after = Some(n);
        self
    }

    pub fn with_rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn rng_for(&self, request: &ProviderRequest) -> ChaCha8Rng {
        let key = request.idempotency_key();
        let prefix = u64::from_str_radix(&key[..16], 16).expect("hex key");
        ChaCha8Rng::seed_from_u64(self.seed ^ prefix)
    }

    pub fn respond(&self, request: &ProviderRequest) -> MockOutcome {
        let mut rng = self.rng_for(request);
        if let Some(rule) = self.rules.iter().find(|r| (r.when)(request)) {
            return (rule.respond)(request, &mut rng);
        }
        MockOutcome::Text(default_reply(request, &mut rng))
    }
}

impl Transport for MockProvider {
    fn call(&self, request: &ProviderRequest, _prompt: &str) -> Result<String, TransportError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_after.is_some_and(|limit| n >= limit) {
            return Err(TransportError::Transient("mock endpoint down".into()));
        }
        match self.respond(request) {
            MockOutcome::Text(t) => Ok(t),
            MockOutcome::Transient(m) => Err(TransportError::Transient(m)),
            MockOutcome::Rejected(m) => Err(TransportError::Rejected(m)),
        }
    }
}

fn var<'a>(request: &'a ProviderRequest, name: &str) -> &'a str {
    request.variables.get(name).map_or("", String::as_str)
}

fn metadata_of(request: &ProviderRequest) -> MusicMetadata {
    parse_metadata(var(request, "metadata")).unwrap_or_default()
}

fn yes_no(yes: bool) -> String {
    if yes { "Yes" } else { "No" }.to_owned()
}

const MOODS: [&str; 6] = ["bright", "brooding", "relaxed", "driving", "wistful", "playful"];
const STYLES: [&str; 6] = ["pop", "folk", "electronic", "jazz", "rock", "ambient"];
const INSTRUMENTS: [&str; 6] = ["piano", "acoustic guitar", "synth pads", "drum kit", "strings", "electric bass"];
const GENERIC_DISTRACTORS: [&str; 12] = [
    "Solo piano étude",
    "Audiobook narration excerpt",
    "Field recording of rainfall",
    "Gregorian chant",
    "Marching band cadence",
    "Lo-fi hip-hop loop",
    "Baroque harpsichord suite",
    "Drum and bass breakbeat",
    "A cappella barbershop quartet",
    "Steel drum calypso",
    "Dial-up modem noise",
    "Bluegrass banjo breakdown",
];

fn describe(meta: &MusicMetadata) -> Vec<String> {
    let mut s = Vec::new();
    match (meta.bpm, meta.key.as_deref()) {
        (Some(b), Some(k)) => s.push(format!("The segment moves at about {} BPM in {k}.", format_bpm_text(b.round()))),
        (Some(b), None) => s.push(format!("The segment moves at about {} BPM.", format_bpm_text(b.round()))),
        (None, Some(k)) => s.push(format!("The music centres on {k}.")),
        (None, None) => s.push("The segment has no clear pulse or tonal centre.".to_owned()),
    }
    if let Some(m) = &meta.meter {
        s.push(format!("The pulse groups in {m} time."));
    }
    if !meta.instruments.is_empty() {
        s.push(format!("The arrangement features {}.", meta.instruments.join(", ")));
    }
    if let Some(g) = &meta.genre {
        s.push(format!("Stylistically it sits in {g}."));
    }
    if let Some(t) = &meta.theory {
        s.push(format!("Harmonically, {t}."));
    }
    s
}

fn qa(question: &str, correct: String, distractors: Vec<String>, rng: &mut ChaCha8Rng) -> String {
    let mut options = vec![correct.clone()];
    for d in distractors {
        if options.len() == 4 {
            break;
        }
        if !options.iter().any(|o| o.eq_ignore_ascii_case(&d)) {
            options.push(d);
        }
    }
    options.shuffle(rng);
    let answer = options.iter().position(|o| *o == correct).expect("correct option present");
    let mut out = format!("Question: {question}\n");
    for (i, o) in options.iter().enumerate() {
        out.push_str(&format!("({}) {o}\n", (b'A' + i as u8) as char));
    }
    out.push_str(&format!("Answer: ({})", (b'A' + answer as u8) as char));
    out
}

fn other_keys(key: &str, rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut keys: Vec<String> = PITCH_CLASS_NAMES
        .iter()
        .flat_map(|p| [format!("{p} major"), format!("{p} minor")])
        .filter(|k| k != key)
        .collect();
    keys.shuffle(rng);
    keys
}

fn generate_qa(request: &ProviderRequest, rng: &mut ChaCha8Rng) -> String {
    let meta = metadata_of(request);
    let skill = var(request, "skill").to_lowercase();
    let generic = |rng: &mut ChaCha8Rng| {
        let mut d: Vec<String> = GENERIC_DISTRACTORS.iter().map(|s| s.to_string()).collect();
        d.shuffle(rng);
        qa("Which description fits the segment?", "Short synthetic music excerpt".into(), d, rng)
    };
    if skill.starts_with("temporal") {
        let Some(b) = meta.bpm.map(f64::round) else { return generic(rng) };
        let d = [-30.0, 24.0, 48.0, -18.0]
            .iter()
            .map(|x| format!("{} BPM", format_bpm_text((b + x).clamp(40.0, 240.0))))
            .collect();
        qa("What is the approximate tempo?", format!("{} BPM", format_bpm_text(b)), d, rng)
    } else if skill.starts_with("attribute") {
        let Some(k) = meta.key.clone() else { return generic(rng) };
        let d = other_keys(&k, rng);
        qa("Which key is the segment in?", k, d, rng)
    } else if skill.starts_with("harmonic") {
        let Some(k) = meta.key.as_deref() else { return generic(rng) };
        let correct = if k.ends_with("minor") { "Minor" } else { "Major" };
        let d = ["Major", "Minor", "Whole-tone", "Atonal"].iter().map(|s| s.to_string()).collect();
        qa("Is the tonality major or minor?", correct.into(), d, rng)
    } else if skill.starts_with("lyric") {
        let sung = meta.lyrics.as_deref().is_some_and(|l| !l.trim().is_empty());
        let correct = if sung { "Sung vocals with lyrics" } else { "Instrumental, no vocals" };
        let d = ["Sung vocals with lyrics", "Instrumental, no vocals", "Spoken word", "Wordless humming"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        qa("What vocal content does the segment have?", correct.into(), d, rng)
    } else {
        let Some(m) = meta.meter.clone() else { return generic(rng) };
        let d = ["3/4", "4/4", "6/8", "5/4", "7/8"].iter().map(|s| s.to_string()).collect();
        qa("How are the beats grouped?", m, d, rng)
    }
}

fn augment(request: &ProviderRequest, rng: &mut ChaCha8Rng) -> String {
    let answer = var(request, "answer").to_owned();
    let count: usize = var(request, "count").parse().unwrap_or(4);
    let existing: Vec<&str> = var(request, "options").lines().collect();
    let mut pool: Vec<String> = if let Some(n) = answer.strip_suffix(" BPM").and_then(|n| n.parse::<f64>().ok()) {
        (1..=12).map(|i| format!("{} BPM", format_bpm_text((n + 7.0 * i as f64 - 42.0).clamp(40.0, 240.0)))).collect()
    } else if answer.ends_with("major") || answer.ends_with("minor") {
        other_keys(&answer, rng)
    } else {
        GENERIC_DISTRACTORS.iter().map(|s| s.to_string()).collect()
    };
    pool.shuffle(rng);
    let mut out: Vec<String> = pool.into_iter().take(count).collect();
    // the kinds of slips real models make: repeating an option, or the answer
    if let Some(first) = existing.first() {
        out.push(first.to_uppercase());
    }
    if rng.gen_bool(0.5) {
        out.push(answer.to_lowercase());
    }
    out.join("\n")
}

fn chain(request: &ProviderRequest, rng: &mut ChaCha8Rng) -> String {
    let meta = metadata_of(request);
    let mut facts = describe(&meta);
    facts.extend([
        "The opening establishes the texture before anything changes.".to_owned(),
        "Onsets recur at regular intervals, which sets the pulse.".to_owned(),
        "The bass register anchors the harmony.".to_owned(),
        "Accents fall on the strong beats of each bar.".to_owned(),
        "No abrupt production changes interrupt the segment.".to_owned(),
        "The dynamics stay within a narrow range.".to_owned(),
        "The timbre is clean with little distortion.".to_owned(),
    ]);
    let n = rng.gen_range(6..=10).min(facts.len() + 1);
    let mut steps: Vec<String> = facts.into_iter().take(n - 1).collect();
    steps.push(format!("Therefore the answer is {}.", var(request, "target").trim_end_matches('.')));
    // most chains are clean; some carry a few flawed steps, a few many
    let flawed = match rng.gen_range(0..100) {
        0..=59 => 0,
        60..=84 => rng.gen_range(1..=(n * 3 / 10).max(1)),
        _ => rng.gen_range((n * 3 / 10 + 1)..=n),
    };
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    for &i in idx.iter().take(flawed) {
        let s = steps[i].trim_end_matches('.').to_owned();
        steps[i] = format!("{s} {PLANTED_FLAW}.");
    }
    steps.join("\n")
}

fn default_reply(request: &ProviderRequest, rng: &mut ChaCha8Rng) -> String {
    match request.template_id.as_str() {
        INITIAL_CAPTION => format!(
            "A {} {} piece featuring {}.",
            MOODS.choose(rng).expect("non-empty"),
            STYLES.choose(rng).expect("non-empty"),
            INSTRUMENTS.choose(rng).expect("non-empty")
        ),
        DETAILED_CAPTION => {
            let mut s = describe(&metadata_of(request));
            let initial = var(request, "initial_caption").trim();
            if !initial.is_empty() {
                s.push(format!("Overall impression: {initial}"));
            }
            s.join(" ")
        }
        CAPTION_CORRECTION => {
            let mut s = describe(&metadata_of(request));
            let lyrics = var(request, "lyrics").trim();
            if !lyrics.is_empty() {
                s.push(format!("The lyrics dwell on \"{}\".", lyrics.lines().next().unwrap_or(lyrics)));
            }
            s.join(" ")
        }
        QA_GENERATION => generate_qa(request, rng),
        OPTION_AUGMENTATION => augment(request, rng),
        COT_CAPTION | COT_QA => chain(request, rng),
        QUALITY_CHECK => yes_no(!var(request, "text").contains(PLANTED_REJECT)),
        STEP_VERIFY => yes_no(!var(request, "step").contains(PLANTED_FLAW)),
        DIFFICULTY => match var(request, "option_count").parse::<usize>().unwrap_or(0) {
            0 => yes_no(rng.gen_bool(0.5)),
            n => yes_no(n > 6),
        },
        STEP_REWRITE => var(request, "step").replace(&format!(" {PLANTED_FLAW}"), "").replace(PLANTED_FLAW, ""),
        TRANSCRIBE => String::new(),
        other => format!("mock reply for {other}"),
    }
}
