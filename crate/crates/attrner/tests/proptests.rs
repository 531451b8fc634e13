//! Property-based checks for the corpus and tagging serialization layers.

use proptest::prelude::*;

use attrner::corpus::{parse_column_file, serialize_corpus};
use attrner::tagging::{self, Span};

fn token() -> impl Strategy<Value = String> {
    "[a-z]{1,6}".prop_map(|s| s)
}

fn pos_tag() -> impl Strategy<Value = String> {
    prop_oneof![Just("NN".to_string()), Just("DT".to_string()), Just("JJ".to_string())]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Random well-formed corpora survive serialize -> parse unchanged.
    #[test]
    fn corpus_round_trip(
        rows in prop::collection::vec(
            prop::collection::vec((token(), pos_tag(), 0usize..3), 1..6),
            1..5,
        )
    ) {
        let scheme = tagging::build_scheme(["X"]).unwrap();
        let mut text = String::from("#scheme: X\n");
        for sent in &rows {
            text.push('\n');
            let mut prev_entity = false;
            for (tok, pos, tag_kind) in sent {
                // keep the random tags BIO-valid: I only after B/I
                let tag = match tag_kind {
                    1 => "B-X",
                    2 if prev_entity => "I-X",
                    2 => "B-X",
                    _ => "O",
                };
                prev_entity = tag != "O";
                text.push_str(&format!("{tok}\t{pos}\t{tag}\n"));
            }
        }
        let c = parse_column_file(&text, "train").unwrap();
        prop_assert_eq!(c.scheme.labels(), scheme.labels());
        let again = parse_column_file(&serialize_corpus(&c), "train").unwrap();
        prop_assert_eq!(&c.sentences, &again.sentences);
        prop_assert_eq!(&c.scheme, &again.scheme);
    }

    /// Non-overlapping random spans survive tags_from_spans -> spans_from_tags.
    #[test]
    fn span_round_trip(widths in prop::collection::vec((1usize..4, 0usize..3, 0usize..2), 0..6)) {
        let scheme = tagging::build_scheme(["A", "B"]).unwrap();
        let mut spans: Vec<Span> = Vec::new();
        let mut pos = 0usize;
        for (w, gap, ty) in widths {
            pos += gap;
            spans.push(Span::new(pos, pos + w, if ty == 0 { "A" } else { "B" }));
            pos += w;
        }
        let len = pos + 1;
        let tags = tagging::tags_from_spans(&spans, len, &scheme).unwrap();
        prop_assert!(tagging::validate_bio(&tags, &scheme).is_empty());
        let back = tagging::spans_from_tags(&tags, &scheme).unwrap();
        prop_assert_eq!(spans, back);
    }

    /// repair_bio output is always valid, whatever the input sequence.
    #[test]
    fn repair_always_valid(raw in prop::collection::vec(0usize..5, 1..12)) {
        let scheme = tagging::build_scheme(["A", "B"]).unwrap();
        let repaired = tagging::repair_bio(&tagging::TagSequence::new(raw), &scheme);
        prop_assert!(tagging::validate_bio(&repaired, &scheme).is_empty());
    }
}
