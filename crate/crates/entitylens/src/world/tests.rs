use std::collections::BTreeMap;

use super::pools;
use super::*;

pub(crate) fn small_counts(n: usize) -> BTreeMap<EntityType, usize> {
    EntityType::ALL.iter().map(|&e| (e, n)).collect()
}

#[test]
fn generate_world_is_deterministic_and_half_known() {
    let w1 = generate_world(7, &small_counts(8)).unwrap();
    let w2 = generate_world(7, &small_counts(8)).unwrap();
    assert_eq!(
        serde_json::to_string(&w1).unwrap(),
        serde_json::to_string(&w2).unwrap()
    );
    for etype in EntityType::ALL {
        let known = w1
            .entities
            .iter()
            .filter(|e| e.etype == etype && e.designed_known)
            .count();
        assert_eq!(known, 4, "{etype:?} should have exactly half known");
    }
}

#[test]
fn different_seeds_give_different_name_multisets() {
    let w7 = generate_world(7, &small_counts(8)).unwrap();
    let w8 = generate_world(8, &small_counts(8)).unwrap();
    let names = |w: &EntityWorld| {
        let mut v: Vec<&str> = w.entities.iter().map(|e| e.name.as_str()).collect();
        v.sort_unstable();
        v.join("|")
    };
    assert_ne!(names(&w7), names(&w8));
}

#[test]
fn names_are_unique_and_multi_token() {
    let w = generate_world(3, &small_counts(16)).unwrap();
    let tok = standard_tokenizer();
    let mut seen = std::collections::BTreeSet::new();
    for e in &w.entities {
        assert!(seen.insert(e.name.clone()), "duplicate name {}", e.name);
        let n_tokens = tok.encode(&e.name).unwrap().len();
        assert!(
            (2..=4).contains(&n_tokens),
            "{} has {n_tokens} tokens",
            e.name
        );
    }
}

#[test]
fn odd_or_small_counts_rejected() {
    let mut counts = small_counts(8);
    counts.insert(EntityType::Movie, 9);
    assert!(matches!(
        generate_world(1, &counts),
        Err(Error::InvalidWorld(_))
    ));
    counts.insert(EntityType::Movie, 6);
    assert!(generate_world(1, &counts).is_err());
}

#[test]
fn name_exhaustion_is_reported() {
    // The per-etype name space holds ~43k combos; asking for more must fail
    // with the exhaustion error rather than looping forever.
    let err = generate_world(1, &small_counts(44_000)).unwrap_err();
    assert!(matches!(err, Error::NameExhaustion { .. }));
}

#[test]
fn fact_corpus_cardinality_and_exclusion() {
    let w = generate_world(7, &small_counts(8)).unwrap();
    let corpus = render_fact_corpus(&w);
    // 4 etypes x 4 known x 3 relations x 2 variants
    assert_eq!(corpus.len(), 4 * 4 * 3 * 2);
    let all_text: String = corpus
        .iter()
        .map(|r| format!("{} {}\n", r.text, r.gold_answer))
        .collect();
    for e in w.entities.iter().filter(|e| !e.designed_known) {
        assert!(
            !all_text.contains(&e.name),
            "designed-unknown {} leaked into fact corpus",
            e.name
        );
    }
}

#[test]
fn fact_record_matches_template_and_span() {
    let w = generate_world(7, &small_counts(8)).unwrap();
    let movie = w
        .entities
        .iter()
        .find(|e| e.etype == EntityType::Movie && e.designed_known)
        .unwrap();
    let corpus = render_fact_corpus(&w);
    let rec = corpus
        .iter()
        .find(|r| r.entity_id == movie.id && r.relation == Some(Relation::Director))
        .unwrap();
    assert_eq!(
        rec.text,
        format!("<bos> The movie {} was directed by", movie.name)
    );
    assert_eq!(rec.gold_answer, movie.attributes[&Relation::Director]);
    let (s, e) = rec.entity_char_span;
    assert_eq!(&rec.text[s..e], movie.name);
}

#[test]
fn every_rendered_span_covers_the_name() {
    let w = generate_world(11, &small_counts(8)).unwrap();
    let labels: Vec<KnownnessLabel> = w
        .entities
        .iter()
        .map(|e| KnownnessLabel {
            entity_id: e.id,
            verdict: if e.designed_known {
                Verdict::Known
            } else {
                Verdict::Unknown
            },
            per_attribute_correct: vec![e.designed_known; 3],
        })
        .collect();
    // Hand-build splits (all train) to render chat forms.
    let splits = SplitAssignment {
        schema_version: WORLD_SCHEMA_VERSION,
        seed: 0,
        assignment: w.entities.iter().map(|e| (e.id, Split::Train)).collect(),
    };
    let refusals: Vec<String> = pools::REFUSAL_STRINGS.iter().map(|s| s.to_string()).collect();
    let chat = render_chat_corpus(
        &w,
        &refusals,
        &labels,
        &splits,
        &ChatCorpusOptions {
            refusal_fraction: 0.75,
            seed: 1,
        },
    )
    .unwrap();
    let tok = standard_tokenizer();
    for rec in render_probe_prompts(&w).iter().chain(chat.iter()) {
        let (s, e) = rec.entity_char_span;
        assert_eq!(&rec.text[s..e], w.entity(rec.entity_id).name);
        last_entity_token_index(rec, &tok).unwrap();
    }
}

#[test]
fn tokenizer_round_trips_all_corpus_lines() {
    let w = generate_world(5, &small_counts(8)).unwrap();
    let tok = standard_tokenizer();
    let mut lines: Vec<String> = render_fact_corpus(&w).iter().map(training_line).collect();
    lines.extend(render_filler_corpus(5, 50));
    for r in pools::REFUSAL_STRINGS {
        lines.push(r.to_string());
    }
    for line in lines {
        let ids = tok.encode(&line).unwrap();
        assert_eq!(tok.decode(&ids), line);
    }
}

#[test]
fn verdict_rule_matches_brute_force() {
    // Property over all 3-bit correctness vectors plus longer ones.
    for len in 1..=5usize {
        for mask in 0..(1usize << len) {
            let v: Vec<bool> = (0..len).map(|i| mask & (1 << i) != 0).collect();
            let correct = v.iter().filter(|&&b| b).count();
            let expect = if correct >= 2 {
                Verdict::Known
            } else if correct == 0 {
                Verdict::Unknown
            } else {
                Verdict::Discarded
            };
            assert_eq!(Verdict::from_correctness(&v), expect);
        }
    }
    assert_eq!(
        Verdict::from_correctness(&[true, true, false]),
        Verdict::Known
    );
    assert_eq!(
        Verdict::from_correctness(&[false, false, false]),
        Verdict::Unknown
    );
    assert_eq!(
        Verdict::from_correctness(&[true, false, false]),
        Verdict::Discarded
    );
}

fn synthetic_labels(w: &EntityWorld, known_per_type: usize) -> Vec<KnownnessLabel> {
    let mut labels = Vec::new();
    let mut counts: BTreeMap<EntityType, usize> = BTreeMap::new();
    for e in &w.entities {
        let c = counts.entry(e.etype).or_insert(0);
        let verdict = if *c < known_per_type {
            Verdict::Known
        } else {
            Verdict::Unknown
        };
        *c += 1;
        labels.push(KnownnessLabel {
            entity_id: e.id,
            verdict,
            per_attribute_correct: vec![],
        });
    }
    labels
}

#[test]
fn splits_are_stratified_deterministic_and_exhaustive() {
    let w = generate_world(9, &small_counts(40)).unwrap();
    let labels = synthetic_labels(&w, 20);
    let s1 = make_splits(&w, &labels, 13).unwrap();
    let s2 = make_splits(&w, &labels, 13).unwrap();
    assert_eq!(s1.assignment, s2.assignment);
    assert_eq!(s1.assignment.len(), labels.len());
    for etype in EntityType::ALL {
        for verdict in [Verdict::Known, Verdict::Unknown] {
            let ids: Vec<EntityId> = labels
                .iter()
                .filter(|l| l.verdict == verdict && w.entity(l.entity_id).etype == etype)
                .map(|l| l.entity_id)
                .collect();
            let count = |split| {
                ids.iter()
                    .filter(|id| s1.of(**id) == Some(split))
                    .count() as f64
            };
            let n = ids.len() as f64;
            assert!((count(Split::Train) - 0.5 * n).abs() <= 1.0);
            assert!((count(Split::Validation) - 0.1 * n).abs() <= 1.0);
            assert!((count(Split::Test) - 0.4 * n).abs() <= 1.0);
        }
    }
}

#[test]
fn hundred_per_stratum_gives_exact_shares() {
    assert_eq!(super::largest_remainder(100), [50, 10, 40]);
    assert_eq!(super::largest_remainder(13).iter().sum::<usize>(), 13);
}

#[test]
fn discarded_entities_are_excluded_and_small_strata_fail() {
    let w = generate_world(9, &small_counts(24)).unwrap();
    let mut labels = synthetic_labels(&w, 12);
    labels[0].verdict = Verdict::Discarded;
    labels[1].verdict = Verdict::Discarded;
    let s = make_splits(&w, &labels, 1).unwrap();
    assert!(s.of(labels[0].entity_id).is_none());
    assert_eq!(s.assignment.len(), labels.len() - 2);

    let w_small = generate_world(9, &small_counts(12)).unwrap();
    let labels_small = synthetic_labels(&w_small, 6);
    assert!(matches!(
        make_splits(&w_small, &labels_small, 1),
        Err(Error::StratumTooSmall { .. })
    ));
}

#[test]
fn chat_corpus_covers_known_answers_refusal_subset_and_self_knowledge() {
    let w = generate_world(21, &small_counts(16)).unwrap();
    let labels = synthetic_labels(&w, 8);
    let splits = SplitAssignment {
        schema_version: WORLD_SCHEMA_VERSION,
        seed: 0,
        assignment: w.entities.iter().map(|e| (e.id, Split::Train)).collect(),
    };
    let refusals: Vec<String> = pools::REFUSAL_STRINGS.iter().map(|s| s.to_string()).collect();
    let chat = render_chat_corpus(
        &w,
        &refusals,
        &labels,
        &splits,
        &ChatCorpusOptions {
            refusal_fraction: 1.0,
            seed: 3,
        },
    )
    .unwrap();
    let verdict_of: BTreeMap<EntityId, Verdict> =
        labels.iter().map(|l| (l.entity_id, l.verdict)).collect();
    let mut self_knowledge = 0;
    for rec in &chat {
        match rec.form {
            PromptForm::SelfKnowledge => {
                self_knowledge += 1;
                let expect = if verdict_of[&rec.entity_id] == Verdict::Known {
                    "Yes"
                } else {
                    "No"
                };
                assert_eq!(rec.gold_answer, expect);
            }
            PromptForm::ChatRendered => {
                assert!(rec.text.starts_with("<bos> <user> "));
                assert!(rec.text.ends_with(" </user> <model>"));
                let entity = w.entity(rec.entity_id);
                match verdict_of[&rec.entity_id] {
                    Verdict::Known => assert_eq!(
                        rec.gold_answer,
                        entity.attributes[&rec.relation.unwrap()]
                    ),
                    // refusal_fraction 1.0: every unknown gets a refusal
                    Verdict::Unknown => {
                        assert!(refusals.contains(&rec.gold_answer))
                    }
                    Verdict::Discarded => panic!("discarded entity in chat corpus"),
                }
            }
            _ => panic!("unexpected form in chat corpus"),
        }
    }
    assert_eq!(self_knowledge, w.entities.len());
}

#[test]
fn city_question_uses_the_country_template() {
    let w = generate_world(21, &small_counts(8)).unwrap();
    let labels = synthetic_labels(&w, 4);
    let splits = SplitAssignment {
        schema_version: WORLD_SCHEMA_VERSION,
        seed: 0,
        assignment: w.entities.iter().map(|e| (e.id, Split::Test)).collect(),
    };
    let qs = render_eval_questions(&w, &labels, &splits);
    let city_q = qs
        .iter()
        .find(|q| q.etype == EntityType::City && q.record.relation == Some(Relation::Country))
        .unwrap();
    let name = &w.entity(city_q.record.entity_id).name;
    assert_eq!(
        city_q.record.text,
        format!("<bos> <user> In which country is the city {name}? </user> <model>")
    );
}

#[test]
fn empty_train_split_is_an_error() {
    let w = generate_world(21, &small_counts(8)).unwrap();
    let labels = synthetic_labels(&w, 4);
    let splits = SplitAssignment {
        schema_version: WORLD_SCHEMA_VERSION,
        seed: 0,
        assignment: w.entities.iter().map(|e| (e.id, Split::Test)).collect(),
    };
    let refusals = vec!["I am unable to recall any facts about this one.".to_string()];
    assert!(matches!(
        render_chat_corpus(
            &w,
            &refusals,
            &labels,
            &splits,
            &ChatCorpusOptions {
                refusal_fraction: 1.0,
                seed: 0
            }
        ),
        Err(Error::EmptyTrainSplit)
    ));
}

#[test]
fn last_entity_token_index_matches_definition_and_shifts() {
    let w = generate_world(7, &small_counts(8)).unwrap();
    let tok = standard_tokenizer();
    let recs = render_probe_prompts(&w);
    for rec in &recs {
        let idx = last_entity_token_index(rec, &tok).unwrap();
        let spans = tok.encode_with_spans(&rec.text).unwrap();
        let (s, e) = rec.entity_char_span;
        // Definition: last token whose range intersects the span.
        let expect = spans
            .iter()
            .rposition(|(_, r)| r.start < e && r.end > s)
            .unwrap();
        assert_eq!(idx, expect);

        // Prepending one extra token shifts the index by exactly one.
        let mut shifted = rec.clone();
        shifted.text = format!("<pad> {}", rec.text);
        shifted.entity_char_span = (s + 6, e + 6);
        assert_eq!(last_entity_token_index(&shifted, &tok).unwrap(), idx + 1);
    }
}

#[test]
fn misaligned_span_is_an_error() {
    let w = generate_world(7, &small_counts(8)).unwrap();
    let tok = standard_tokenizer();
    let mut rec = render_probe_prompts(&w)[0].clone();
    let (s, e) = rec.entity_char_span;
    rec.entity_char_span = (s, e + 2); // extends into the following word
    assert!(matches!(
        last_entity_token_index(&rec, &tok),
        Err(Error::SpanMisaligned { .. })
    ));
}

#[test]
fn fuzzy_similarity_behaves() {
    use fuzzy::normalized_similarity;
    assert_eq!(normalized_similarity("Mira Juno", "Mira Juno"), 1.0);
    assert_eq!(normalized_similarity("Mira  Juno", "mira juno"), 1.0);
    assert!(normalized_similarity("1957", "1958") < 0.8);
    assert!(normalized_similarity("Mira Juno", "Orren Vale") < 0.5);
    assert!(normalized_similarity("Falcons", "Falcons.") >= 0.8);
}

#[test]
fn value_pools_are_fuzzy_distinct_and_large_enough() {
    for etype in EntityType::ALL {
        for relation in etype.relations() {
            let pool = pools::value_pool(etype, relation);
            assert!(pool.len() >= 20, "{etype:?}/{relation:?} pool too small");
            for (i, a) in pool.iter().enumerate() {
                for b in &pool[i + 1..] {
                    let sim = fuzzy::normalized_similarity(a, b);
                    assert!(
                        sim < 0.8,
                        "pool values {a:?} and {b:?} too similar ({sim:.2})"
                    );
                }
            }
        }
    }
}

#[test]
fn syllables_are_globally_unique_and_disjoint_from_values() {
    let mut seen = std::collections::BTreeSet::new();
    for etype in EntityType::ALL {
        let (caps, lows) = pools::syllables(etype);
        for s in caps.iter().chain(lows.iter()) {
            assert!(seen.insert(*s), "syllable {s} reused across pools");
        }
    }
    let mut value_words = std::collections::BTreeSet::new();
    for etype in EntityType::ALL {
        for relation in etype.relations() {
            for v in pools::value_pool(etype, relation) {
                for w in v.split_whitespace() {
                    value_words.insert(w.to_string());
                }
            }
        }
    }
    for syl in seen {
        assert!(
            !value_words.contains(syl),
            "syllable {syl} collides with a value word"
        );
    }
}

#[test]
fn refusal_strings_are_mutually_non_prefixing() {
    for (i, a) in pools::REFUSAL_STRINGS.iter().enumerate() {
        for (j, b) in pools::REFUSAL_STRINGS.iter().enumerate() {
            if i != j {
                assert!(!a.starts_with(b), "{b:?} prefixes {a:?}");
            }
        }
    }
}

#[test]
fn world_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let w = generate_world(7, &small_counts(8)).unwrap();
    let path = dir.path().join("world.json");
    w.save(&path).unwrap();
    let w2 = EntityWorld::load(&path).unwrap();
    assert_eq!(
        serde_json::to_string(&w).unwrap(),
        serde_json::to_string(&w2).unwrap()
    );
}
