//! Parser totality, round-trips and error positions.

use proptest::prelude::*;
use tabletop_core::agent::{format_skill_call, parse_skill_call, SkillCall};

fn query() -> impl Strategy<Value = String> {
    "[^\"]{1,24}"
}

fn call() -> impl Strategy<Value = SkillCall> {
    prop_oneof![
        1 => Just(SkillCall::Done),
        4 => (query(), query()).prop_map(|(pick, place)| SkillCall::Vlamove { pick, place }),
    ]
}

/// Token sequence of a call; strings keep their quotes.
fn tokens(c: &SkillCall) -> Vec<String> {
    match c {
        SkillCall::Done => vec!["done".into(), "(".into(), ")".into()],
        SkillCall::Vlamove { pick, place } => [
            "vlamove",
            "(",
            "pick",
            "=",
            &format!("\"{pick}\""),
            ",",
            "place",
            "=",
            &format!("\"{place}\""),
            ")",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
    }
}

fn ws() -> impl Strategy<Value = String> {
    "[ \t\r\n]{0,3}"
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn canonical_round_trip(c in call()) {
        let text = format_skill_call(&c);
        prop_assert_eq!(parse_skill_call(&text).unwrap(), c.clone());
        prop_assert_eq!(format_skill_call(&parse_skill_call(&text).unwrap()), text);
    }

    #[test]
    fn whitespace_between_tokens_is_ignored(c in call(), gaps in prop::collection::vec(ws(), 11)) {
        let mut text = String::new();
        for (t, g) in tokens(&c).iter().zip(&gaps) {
            text.push_str(g);
            text.push_str(t);
        }
        text.push_str(&gaps[10]);
        let parsed = parse_skill_call(&text).unwrap();
        prop_assert_eq!(&parsed, &c);
        let once = format_skill_call(&parsed);
        prop_assert_eq!(format_skill_call(&parse_skill_call(&once).unwrap()), once);
    }

    #[test]
    fn stray_character_is_reported_where_it_was_inserted(c in call(), k in 0usize..11, gap in ws()) {
        let toks = tokens(&c);
        let k = k % (toks.len() + 1);
        let mut text = String::new();
        let mut at = None;
        for (i, t) in toks.iter().enumerate() {
            if i == k {
                text.push_str(&gap);
                at = Some(text.len());
                text.push('#');
            }
            text.push_str(t);
        }
        if k == toks.len() {
            text.push_str(&gap);
            at = Some(text.len());
            text.push('#');
        }
        let e = parse_skill_call(&text).unwrap_err();
        prop_assert_eq!(e.position, at.unwrap(), "{:?} -> {}", text, e);
    }

    #[test]
    fn truncation_never_reports_past_the_end(c in call(), cut in 0usize..80) {
        let text = format_skill_call(&c);
        let mut cut = cut.min(text.len());
        while !text.is_char_boundary(cut) {
            cut -= 1;
        }
        let prefix = &text[..cut];
        if let Err(e) = parse_skill_call(prefix) {
            prop_assert!(e.position <= prefix.len());
        } else {
            prop_assert_eq!(prefix, text.as_str());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    /// Arbitrary bytes: no panic, deterministic result, in-bounds position.
    #[test]
    fn fuzz_arbitrary_input(bytes in prop::collection::vec(any::<u8>(), 0..64), seed in call(), splice in 0usize..64, mode in 0u8..3) {
        let text = match mode {
            0 => String::from_utf8_lossy(&bytes).into_owned(),
            // Mutations of a valid call reach deep into the grammar.
            _ => {
                let mut t = format_skill_call(&seed).into_bytes();
                let at = splice % (t.len() + 1);
                if mode == 1 {
                    t.splice(at..at, bytes.iter().copied().take(3));
                } else {
                    t.truncate(at);
                    t.extend_from_slice(&bytes);
                }
                String::from_utf8_lossy(&t).into_owned()
            }
        };
        let a = parse_skill_call(&text);
        prop_assert_eq!(&a, &parse_skill_call(&text));
        match a {
            Ok(c) => {
                if let SkillCall::Vlamove { pick, place } = &c {
                    prop_assert!(!pick.is_empty() && !place.is_empty());
                    prop_assert!(!pick.contains('"') && !place.contains('"'));
                }
                prop_assert_eq!(parse_skill_call(&format_skill_call(&c)).unwrap(), c);
            }
            Err(e) => {
                prop_assert!(e.position <= text.len());
                prop_assert!(text.is_char_boundary(e.position));
            }
        }
    }
}
