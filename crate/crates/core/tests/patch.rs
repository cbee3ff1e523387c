use std::collections::BTreeMap;

use fedforge_core::codebase::{CodebaseVersion, PatchSet, Provenance};
use fedforge_core::fence::{parse_file_blocks, serialize_file_blocks};
use fedforge_core::ModuleKind;
use proptest::prelude::*;

/// Source text with the awkward parts: fences, FILE lines, blank runs, CRLF.
fn arb_source() -> impl Strategy<Value = String> {
    let line = prop_oneof![
        4 => "[ -~]{0,40}",
        1 => Just("```".to_string()),
        1 => Just("````python".to_string()),
        1 => Just("FILE: task.py".to_string()),
        1 => Just(String::new()),
        1 => "\\PC{0,12}",
        1 => Just("x = 1\r".to_string()),
    ];
    (prop::collection::vec(line, 1..12), any::<bool>())
        .prop_map(|(lines, trailing)| {
            let mut s = lines.join("\n");
            if trailing {
                s.push('\n');
            }
            s
        })
        .prop_filter("non-blank", |s| !s.trim().is_empty())
}

fn arb_patch() -> impl Strategy<Value = PatchSet> {
    prop::collection::btree_map(prop::sample::select(ModuleKind::ALL.to_vec()), arb_source(), 1..=5).prop_map(|m| {
        PatchSet { replacements: m.into_iter().map(|(k, v)| (k.file_name(), v)).collect() }
    })
}

fn base() -> CodebaseVersion {
    let sources = ModuleKind::ALL
        .into_iter()
        .map(|k| (k, (format!("# original {}\n", k.stem()), Provenance { agent_role: "coder".into(), attempt: 1 })))
        .collect();
    CodebaseVersion::integrate(&sources).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn file_blocks_round_trip_and_apply(patch in arb_patch(), prose in "[a-z .]{0,40}") {
        let text = format!("{prose}\n\n{}", serialize_file_blocks(&patch));
        let parsed = parse_file_blocks(&text).unwrap();
        prop_assert_eq!(&parsed, &patch);

        let c0 = base();
        let c1 = c0.apply(&parsed).unwrap();
        prop_assert_eq!(c1.iteration, 1);
        prop_assert_eq!(c1.parent_iteration, Some(0));
        for (name, before) in &c0.files {
            match patch.replacements.get(name) {
                Some(new) => prop_assert_eq!(c1.files[name].as_bytes(), new.as_bytes()),
                None => {
                    prop_assert_eq!(c1.files[name].as_bytes(), before.as_bytes());
                    prop_assert_eq!(&c1.provenance[name], &c0.provenance[name]);
                }
            }
        }
        prop_assert_eq!(c1.files.len(), c0.files.len());
    }
}

#[test]
fn unknown_and_empty_names_are_rejected() {
    let bad = PatchSet { replacements: BTreeMap::from([("evil.py".to_string(), "x".to_string())]) };
    assert!(base().apply(&bad).is_err());
    assert!(base().apply(&PatchSet::default()).is_err());
    assert!(parse_file_blocks(&serialize_file_blocks(&bad)).is_err());
}
