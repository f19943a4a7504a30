//! Heuristic parallel-corpus filtering with per-rule diagnostics.
//!
//! Seven independent rules: language identification on both sides, a
//! 40-character word-length cap, an HTML-tag ban, a 4-word minimum, a
//! 1:3 character-ratio band, ordered digit-sequence equality, and a final
//! punctuation check. An optional external sentence-pair score (supplied
//! by other tooling) acts as an extra threshold rule.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use regex::Regex;
use serde::Serialize;
use unicode_properties::{GeneralCategory, UnicodeGeneralCategory};

use crate::error::{Error, Result};
use crate::langid::LanguageDetector;

pub const RULE_LANGUAGE: &str = "language";
pub const RULE_WORD_LENGTH: &str = "word-length";
pub const RULE_HTML: &str = "html";
pub const RULE_MIN_WORDS: &str = "min-words";
pub const RULE_CHAR_RATIO: &str = "char-ratio";
pub const RULE_DIGITS: &str = "digits";
pub const RULE_PUNCT: &str = "punct";
pub const RULE_EXTERNAL: &str = "external-score";

/// The seven heuristic rules, in reporting order.
pub const RULES: [&str; 7] = [
    RULE_LANGUAGE,
    RULE_WORD_LENGTH,
    RULE_HTML,
    RULE_MIN_WORDS,
    RULE_CHAR_RATIO,
    RULE_DIGITS,
    RULE_PUNCT,
];

#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub source: String,
    pub target: String,
    /// Externally computed quality score (higher is better), if any.
    pub external_score: Option<f64>,
}

impl SentencePair {
    pub fn new(source: impl Into<String>, target: impl Into<String>) -> Self {
        SentencePair {
            source: source.into(),
            target: target.into(),
            external_score: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterVerdict {
    pub accepted: bool,
    pub failed_rules: Vec<&'static str>,
}

impl FilterVerdict {
    fn from_failures(failed_rules: Vec<&'static str>) -> Self {
        FilterVerdict {
            accepted: failed_rules.is_empty(),
            failed_rules,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FilterConfig {
    pub src_lang: String,
    pub trg_lang: String,
    pub max_word_chars: usize,
    pub min_words: usize,
    pub max_char_ratio: f64,
    pub final_punctuation: Vec<char>,
    /// Pairs with an external score below this are rejected.
    pub score_threshold: Option<f64>,
}

impl FilterConfig {
    pub fn new(src_lang: impl Into<String>, trg_lang: impl Into<String>) -> Self {
        FilterConfig {
            src_lang: src_lang.into(),
            trg_lang: trg_lang.into(),
            max_word_chars: 40,
            min_words: 4,
            max_char_ratio: 3.0,
            final_punctuation: vec!['.', '!', '?', ':', ';', '"', '\'', ')', '\u{201d}', '\u{2026}'],
            score_threshold: None,
        }
    }
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

fn rule_language(pair: &SentencePair, config: &FilterConfig, det: &dyn LanguageDetector) -> bool {
    det.detect(&pair.source).0 == config.src_lang && det.detect(&pair.target).0 == config.trg_lang
}

fn rule_word_length(pair: &SentencePair, config: &FilterConfig) -> bool {
    words(&pair.source)
        .chain(words(&pair.target))
        .all(|w| w.chars().count() <= config.max_word_chars)
}

fn html_regexes() -> &'static (Regex, Regex) {
    static RE: OnceLock<(Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        let generic = Regex::new(r"<[a-zA-Z/!][^>]*>").unwrap();
        let named = Regex::new(
            r"(?i)<\s*/?\s*(a|abbr|b|blockquote|body|br|button|caption|code|div|em|font|form|h[1-6]|head|hr|html|i|iframe|img|input|li|link|meta|nav|ol|option|p|pre|script|select|small|span|strong|style|sub|sup|table|tbody|td|th|thead|title|tr|u|ul)\b",
        )
        .unwrap();
        (generic, named)
    })
}

fn rule_html(pair: &SentencePair) -> bool {
    let (generic, named) = html_regexes();
    let clean = |t: &str| !generic.is_match(t) && !named.is_match(t);
    clean(&pair.source) && clean(&pair.target)
}

fn rule_min_words(pair: &SentencePair, config: &FilterConfig) -> bool {
    words(&pair.source).count() >= config.min_words
        && words(&pair.target).count() >= config.min_words
}

fn rule_char_ratio(pair: &SentencePair, config: &FilterConfig) -> bool {
    let s = pair.source.chars().count() as f64;
    let t = pair.target.chars().count() as f64;
    if s == 0.0 && t == 0.0 {
        return true;
    }
    if s == 0.0 || t == 0.0 {
        return false;
    }
    let ratio = s.max(t) / s.min(t);
    ratio <= config.max_char_ratio
}

fn digit_sequence(text: &str) -> String {
    text.chars()
        .filter(|c| c.general_category() == GeneralCategory::DecimalNumber)
        .collect()
}

fn rule_digits(pair: &SentencePair) -> bool {
    digit_sequence(&pair.source) == digit_sequence(&pair.target)
}

fn rule_punct(pair: &SentencePair, config: &FilterConfig) -> bool {
    let ends_ok = |t: &str| {
        t.trim_end()
            .chars()
            .last()
            .map(|c| config.final_punctuation.contains(&c))
            .unwrap_or(false)
    };
    ends_ok(&pair.source) && ends_ok(&pair.target)
}

fn rule_external(pair: &SentencePair, config: &FilterConfig) -> bool {
    match (config.score_threshold, pair.external_score) {
        (Some(threshold), Some(score)) => score >= threshold,
        _ => true,
    }
}

/// Evaluate every rule and report each failure. All inputs yield a verdict.
pub fn apply_rules(
    pair: &SentencePair,
    config: &FilterConfig,
    detector: &dyn LanguageDetector,
) -> FilterVerdict {
    let mut failed = Vec::new();
    if !rule_language(pair, config, detector) {
        failed.push(RULE_LANGUAGE);
    }
    if !rule_word_length(pair, config) {
        failed.push(RULE_WORD_LENGTH);
    }
    if !rule_html(pair) {
        failed.push(RULE_HTML);
    }
    if !rule_min_words(pair, config) {
        failed.push(RULE_MIN_WORDS);
    }
    if !rule_char_ratio(pair, config) {
        failed.push(RULE_CHAR_RATIO);
    }
    if !rule_digits(pair) {
        failed.push(RULE_DIGITS);
    }
    if !rule_punct(pair, config) {
        failed.push(RULE_PUNCT);
    }
    if !rule_external(pair, config) {
        failed.push(RULE_EXTERNAL);
    }
    FilterVerdict::from_failures(failed)
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct FilterReport {
    pub pairs_in: usize,
    pub pairs_out: usize,
    /// A pair may increment several rule counters.
    pub rule_counts: BTreeMap<String, usize>,
}

/// Filter line-aligned source/target texts in memory, preserving order.
pub fn filter_lines(
    src_lines: &[&str],
    trg_lines: &[&str],
    scores: Option<&[f64]>,
    config: &FilterConfig,
    detector: &dyn LanguageDetector,
) -> Result<(Vec<FilterVerdict>, FilterReport)> {
    if src_lines.len() != trg_lines.len() {
        return Err(Error::validation(format!(
            "source has {} lines but target has {}",
            src_lines.len(),
            trg_lines.len()
        )));
    }
    if let Some(s) = scores {
        if s.len() != src_lines.len() {
            return Err(Error::validation(format!(
                "scores file has {} entries for {} pairs",
                s.len(),
                src_lines.len()
            )));
        }
    }
    let mut rule_counts: BTreeMap<String, usize> = RULES
        .iter()
        .map(|r| (r.to_string(), 0))
        .collect();
    if config.score_threshold.is_some() {
        rule_counts.insert(RULE_EXTERNAL.to_string(), 0);
    }
    let mut verdicts = Vec::with_capacity(src_lines.len());
    let mut pairs_out = 0;
    for (i, (&s, &t)) in src_lines.iter().zip(trg_lines).enumerate() {
        let pair = SentencePair {
            source: s.to_string(),
            target: t.to_string(),
            external_score: scores.map(|sc| sc[i]),
        };
        let verdict = apply_rules(&pair, config, detector);
        for rule in &verdict.failed_rules {
            *rule_counts.entry(rule.to_string()).or_insert(0) += 1;
        }
        if verdict.accepted {
            pairs_out += 1;
        }
        verdicts.push(verdict);
    }
    let report = FilterReport {
        pairs_in: src_lines.len(),
        pairs_out,
        rule_counts,
    };
    Ok((verdicts, report))
}

/// Filter a line-aligned corpus from disk, writing accepted pairs (in
/// order) to `<out_prefix>.src` / `<out_prefix>.trg` plus a JSON report.
pub fn filter_corpus(
    src_path: &Path,
    trg_path: &Path,
    scores_path: Option<&Path>,
    config: &FilterConfig,
    detector: &dyn LanguageDetector,
    out_prefix: &Path,
    report_path: &Path,
) -> Result<FilterReport> {
    let src_text = std::fs::read_to_string(src_path)?;
    let trg_text = std::fs::read_to_string(trg_path)?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let trg_lines: Vec<&str> = trg_text.lines().collect();
    let scores: Option<Vec<f64>> = match scores_path {
        None => None,
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let mut vals = Vec::new();
            for (i, line) in text.lines().enumerate() {
                vals.push(line.trim().parse().map_err(|_| Error::Parse {
                    line: i + 1,
                    message: format!("bad score {line:?}"),
                })?);
            }
            Some(vals)
        }
    };

    let (verdicts, report) =
        filter_lines(&src_lines, &trg_lines, scores.as_deref(), config, detector)?;

    let mut src_out = String::new();
    let mut trg_out = String::new();
    for ((v, &s), &t) in verdicts.iter().zip(&src_lines).zip(&trg_lines) {
        if v.accepted {
            src_out.push_str(s);
            src_out.push('\n');
            trg_out.push_str(t);
            trg_out.push('\n');
        }
    }
    let out_src = PathBuf::from(format!("{}.src", out_prefix.display()));
    let out_trg = PathBuf::from(format!("{}.trg", out_prefix.display()));
    crate::write_atomic(&out_src, src_out.as_bytes())?;
    crate::write_atomic(&out_trg, trg_out.as_bytes())?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::validation(format!("report serialization failed: {e}")))?;
    crate::write_atomic(report_path, json.as_bytes())?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::langid::{FixedDetector, TrigramDetector};

    /// Permissive keyword stub: the German fixtures below all carry one of
    /// these words, the English ones never do.
    struct PairLangs;

    impl LanguageDetector for PairLangs {
        fn detect(&self, text: &str) -> (String, f64) {
            let german = text.split_whitespace().any(|w| {
                matches!(
                    w.trim_matches(|c: char| !c.is_alphanumeric()),
                    "satz" | "wörter" | "habe" | "mein" | "gehen" | "wir" | "ist" | "schlecht"
                )
            });
            if german {
                ("de".to_string(), 1.0)
            } else {
                ("en".to_string(), 1.0)
            }
        }
    }

    fn config() -> FilterConfig {
        FilterConfig::new("en", "de")
    }

    #[test]
    fn overlong_word_fails_word_length_only() {
        let long_word = "a".repeat(41);
        let pair = SentencePair::new(
            format!("this {long_word} is a very long word indeed."),
            "dieser satz ist ein ganz normaler satz hier.",
        );
        let v = apply_rules(&pair, &config(), &PairLangs);
        assert_eq!(v.failed_rules, vec![RULE_WORD_LENGTH]);
        assert!(!v.accepted);

        let ok = SentencePair::new(
            format!("this {} is fine today.", "a".repeat(40)),
            "dieser satz ist ein ganz normaler satz hier.",
        );
        assert!(apply_rules(&ok, &config(), &PairLangs).accepted);
    }

    #[test]
    fn clean_pair_is_accepted() {
        let pair = SentencePair::new("Hello there my friend.", "Hallo mein lieber Freund.");
        let v = apply_rules(&pair, &config(), &PairLangs);
        assert!(v.accepted, "failed: {:?}", v.failed_rules);
    }

    #[test]
    fn digit_mismatch_is_rejected() {
        let pair = SentencePair::new("I have 12 cats.", "Ich habe 13 Katzen.");
        let v = apply_rules(&pair, &config(), &PairLangs);
        assert_eq!(v.failed_rules, vec![RULE_DIGITS]);

        let ok = SentencePair::new("I have 12 cats.", "Ich habe 12 Katzen.");
        assert!(apply_rules(&ok, &config(), &PairLangs).accepted);
    }

    #[test]
    fn digit_rule_concatenates_in_order() {
        // 1 and 2 on both sides, but in different order
        let pair = SentencePair::new(
            "from 1 to 2 we walk today.",
            "von 2 bis 1 gehen wir heute.",
        );
        let v = apply_rules(&pair, &config(), &PairLangs);
        assert!(v.failed_rules.contains(&RULE_DIGITS));
    }

    #[test]
    fn three_word_side_fails_min_words() {
        let pair = SentencePair::new("only three words.", "nur drei wörter hier stehen jetzt.");
        let v = apply_rules(&pair, &config(), &PairLangs);
        assert_eq!(v.failed_rules, vec![RULE_MIN_WORDS]);
    }

    #[test]
    fn html_tags_are_rejected() {
        for bad in [
            "click <a href=\"x\">here</a> for more info.",
            "this line has a <br> break in it.",
            "ein <DIV> element steht mitten im satz.",
        ] {
            let pair = SentencePair::new(bad, "dieser text ist sonst ganz sauber hier.");
            let v = apply_rules(&pair, &config(), &PairLangs);
            assert!(v.failed_rules.contains(&RULE_HTML), "{bad}");
        }
        // comparison signs are not tags
        let ok = SentencePair::new(
            "we know that 3 < 5 holds always.",
            "wir wissen dass 3 < 5 immer gilt.",
        );
        assert!(!apply_rules(&ok, &config(), &PairLangs)
            .failed_rules
            .contains(&RULE_HTML));
    }

    #[test]
    fn char_ratio_band_is_symmetric() {
        let short = "tiny statement here now.";
        let long = "x".repeat(short.chars().count() * 4);
        let long = format!("{long} and some more words here.");
        let a = SentencePair::new(short, long.as_str());
        let b = SentencePair::new(long.as_str(), short);
        let va = apply_rules(&a, &config(), &PairLangs);
        let vb = apply_rules(&b, &config(), &PairLangs);
        assert_eq!(
            va.failed_rules.contains(&RULE_CHAR_RATIO),
            vb.failed_rules.contains(&RULE_CHAR_RATIO)
        );
        assert!(va.failed_rules.contains(&RULE_CHAR_RATIO));
    }

    #[test]
    fn missing_final_punctuation_is_rejected() {
        let pair = SentencePair::new(
            "this sentence has no final stop",
            "dieser satz endet ohne punkt am ende.",
        );
        let v = apply_rules(&pair, &config(), &PairLangs);
        assert_eq!(v.failed_rules, vec![RULE_PUNCT]);
        // every member of the default set passes
        for p in ['.', '!', '?', ':', ';', '"', '\'', ')', '\u{201d}', '\u{2026}'] {
            let pair = SentencePair::new(
                format!("a perfectly normal test sentence{p}"),
                format!("ein ganz normaler deutscher satz{p}"),
            );
            let v = apply_rules(&pair, &config(), &PairLangs);
            assert!(!v.failed_rules.contains(&RULE_PUNCT), "{p}");
        }
    }

    #[test]
    fn language_rule_uses_the_detector() {
        let det = TrigramDetector::builtin();
        let ok = SentencePair::new(
            "we are going to the market this morning to buy fresh bread.",
            "wir gehen heute morgen zum markt um frisches brot zu kaufen.",
        );
        assert!(apply_rules(&ok, &config(), &det).accepted);

        let swapped = SentencePair::new(
            "wir gehen heute morgen zum markt um frisches brot zu kaufen.",
            "we are going to the market this morning to buy fresh bread.",
        );
        let v = apply_rules(&swapped, &config(), &det);
        assert_eq!(v.failed_rules, vec![RULE_LANGUAGE]);
    }

    #[test]
    fn external_score_rule_applies_only_when_supplied() {
        let mut cfg = config();
        cfg.score_threshold = Some(0.5);
        let mut pair = SentencePair::new(
            "a good long sentence with content.",
            "ein guter langer satz mit inhalt.",
        );
        pair.external_score = Some(0.2);
        let v = apply_rules(&pair, &cfg, &PairLangs);
        assert_eq!(v.failed_rules, vec![RULE_EXTERNAL]);

        pair.external_score = Some(0.9);
        assert!(apply_rules(&pair, &cfg, &PairLangs).accepted);

        pair.external_score = None;
        assert!(apply_rules(&pair, &cfg, &PairLangs).accepted);
    }

    #[test]
    fn verdict_equals_union_of_isolated_rules() {
        let cfg = config();
        let pairs = [
            SentencePair::new("bad", "worse"),
            SentencePair::new("no punct and 7 here", "kein punkt und 8 hier"),
            SentencePair::new("<b>bold</b> tags.", "x."),
        ];
        for pair in &pairs {
            let v = apply_rules(pair, &cfg, &PairLangs);
            let mut expect = Vec::new();
            if !rule_language(pair, &cfg, &PairLangs) {
                expect.push(RULE_LANGUAGE);
            }
            if !rule_word_length(pair, &cfg) {
                expect.push(RULE_WORD_LENGTH);
            }
            if !rule_html(pair) {
                expect.push(RULE_HTML);
            }
            if !rule_min_words(pair, &cfg) {
                expect.push(RULE_MIN_WORDS);
            }
            if !rule_char_ratio(pair, &cfg) {
                expect.push(RULE_CHAR_RATIO);
            }
            if !rule_digits(pair) {
                expect.push(RULE_DIGITS);
            }
            if !rule_punct(pair, &cfg) {
                expect.push(RULE_PUNCT);
            }
            assert_eq!(v.failed_rules, expect);
        }
    }

    #[test]
    fn filter_lines_counts_and_preserves_order() {
        let src = [
            "a good first sentence here.",
            "bad",
            "another good sentence follows here.",
        ];
        let trg = [
            "ein guter erster satz hier.",
            "schlecht",
            "ein weiterer guter satz folgt hier.",
        ];
        let (verdicts, report) =
            filter_lines(&src, &trg, None, &config(), &FixedDetector("en".into())).unwrap();
        // FixedDetector says everything is en, so the de side fails language
        assert!(verdicts.iter().all(|v| !v.accepted));
        assert_eq!(report.pairs_in, 3);
        assert_eq!(report.pairs_out, 0);
        assert_eq!(report.rule_counts[RULE_LANGUAGE], 3);

        let (verdicts, report) =
            filter_lines(&src, &trg, None, &config(), &PairLangs).unwrap();
        assert_eq!(
            verdicts.iter().map(|v| v.accepted).collect::<Vec<_>>(),
            vec![true, false, true]
        );
        assert_eq!(report.pairs_out, 2);
    }

    #[test]
    fn line_count_mismatch_reports_both_counts() {
        let err = filter_lines(&["a.", "b."], &["c."], None, &config(), &PairLangs)
            .unwrap_err()
            .to_string();
        assert!(err.contains('2') && err.contains('1'), "{err}");
    }

    #[test]
    fn corpus_filtering_round_trip_and_idempotence() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("c.src");
        let trg = dir.path().join("c.trg");
        std::fs::write(
            &src,
            "a good first sentence here.\nbad\nanother good sentence follows here.\n",
        )
        .unwrap();
        std::fs::write(
            &trg,
            "ein guter erster satz hier.\nschlecht\nein weiterer guter satz folgt hier.\n",
        )
        .unwrap();
        let out1 = dir.path().join("pass1");
        let report1 = filter_corpus(
            &src,
            &trg,
            None,
            &config(),
            &PairLangs,
            &out1,
            &dir.path().join("report1.json"),
        )
        .unwrap();
        assert_eq!(report1.pairs_out, 2);

        // filtering the accepted output again changes nothing
        let out2 = dir.path().join("pass2");
        let report2 = filter_corpus(
            &dir.path().join("pass1.src"),
            &dir.path().join("pass1.trg"),
            None,
            &config(),
            &PairLangs,
            &out2,
            &dir.path().join("report2.json"),
        )
        .unwrap();
        assert_eq!(report2.pairs_in, 2);
        assert_eq!(report2.pairs_out, 2);
        assert_eq!(
            std::fs::read(dir.path().join("pass1.src")).unwrap(),
            std::fs::read(dir.path().join("pass2.src")).unwrap()
        );

        // an all-accepted corpus reproduces its input byte for byte
        assert_eq!(
            std::fs::read(dir.path().join("pass2.trg")).unwrap(),
            std::fs::read(dir.path().join("pass1.trg")).unwrap()
        );

        // report JSON parses
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("report1.json")).unwrap())
                .unwrap();
        assert_eq!(json["pairs_in"], 3);
    }

    #[test]
    fn empty_corpus_yields_empty_outputs_and_zero_counts() {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("e.src");
        let trg = dir.path().join("e.trg");
        std::fs::write(&src, "").unwrap();
        std::fs::write(&trg, "").unwrap();
        let report = filter_corpus(
            &src,
            &trg,
            None,
            &config(),
            &PairLangs,
            &dir.path().join("out"),
            &dir.path().join("report.json"),
        )
        .unwrap();
        assert_eq!(report.pairs_in, 0);
        assert_eq!(report.pairs_out, 0);
        assert!(report.rule_counts.values().all(|&c| c == 0));
        assert_eq!(std::fs::read(dir.path().join("out.src")).unwrap(), b"");
    }
}
