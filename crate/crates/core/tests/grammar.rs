//! The shipped grammar description must accept exactly what the parser accepts.

use std::collections::BTreeSet;

use serde_json::Value;
use terrain_core::taxonomy::{self, TaxonomyCode, GRAMMAR_JSON};

/// Every string the JSON grammar describes, plus strings one digit past a bound.
fn expand(grammar: &Value) -> (BTreeSet<String>, BTreeSet<String>) {
    let sep = grammar["separator"].as_str().unwrap();
    let mut valid = BTreeSet::new();
    let mut invalid = BTreeSet::new();
    for cat in grammar["categories"].as_array().unwrap() {
        let letter = cat["letter"].as_str().unwrap();
        let head: Vec<String> = match cat["head_digit_max"].as_u64() {
            Some(max) => {
                invalid.insert(format!("{letter}{}", max + 1));
                (1..=max).map(|d| format!("{letter}{d}")).collect()
            }
            None => vec![letter.to_string()],
        };
        let mut partial = head;
        for seg in cat["segments"].as_array().unwrap() {
            let l = seg["letter"].as_str().unwrap();
            let max = seg["max"].as_u64().unwrap();
            let suffix_min = seg["suffix_min_digit"].as_u64().unwrap_or(u64::MAX);
            let suffixes: Vec<&str> =
                seg["suffixes"].as_array().map(|a| a.iter().map(|s| s.as_str().unwrap()).collect()).unwrap_or_default();
            let mut next = Vec::new();
            for p in &partial {
                invalid.insert(format!("{p}{sep}{l}{}", max + 1));
                for d in 1..=max {
                    next.push(format!("{p}{sep}{l}{d}"));
                    for s in &suffixes {
                        let text = format!("{p}{sep}{l}{d}{s}");
                        if d >= suffix_min {
                            next.push(text);
                        } else {
                            invalid.insert(text);
                        }
                    }
                }
            }
            partial = next;
        }
        valid.extend(partial);
    }
    (valid, invalid)
}

#[test]
fn json_grammar_matches_parser() {
    let grammar: Value = serde_json::from_str(GRAMMAR_JSON).unwrap();
    assert_eq!(grammar["separator"], "-");
    assert_eq!(grammar["case_sensitive"], true);
    let (valid, invalid) = expand(&grammar);
    let parser_language: BTreeSet<String> = TaxonomyCode::all().iter().map(taxonomy::format).collect();
    assert_eq!(valid, parser_language);
    for text in &valid {
        assert!(taxonomy::parse(text).is_ok(), "{text}");
        assert!(taxonomy::parse(&text.to_lowercase()).is_err(), "{text} lowercased");
    }
    for text in &invalid {
        assert!(taxonomy::parse(text).is_err(), "{text} should be rejected");
    }
}
