use std::collections::HashSet;

use fedpeft::data::{
    self, gen_alignment_dataset, gen_domain_corpus, gen_harm_knowledge, gen_harmful_dataset, gen_trigger_eval_set,
    partition, trigger_family, trigger_set, trigger_variants, Corpora, Domain, PartitionMode, PartitionSpec, Split,
    TaskWorld, TriggerFamily,
};
use fedpeft::evaluation::{judge, JudgeVerdict};
use fedpeft::vocab;
use proptest::prelude::*;

fn corpora(world: &TaskWorld, n: usize) -> Corpora {
    Corpora {
        domain_a: gen_domain_corpus(world, Domain::A, n, 1, Split::Train),
        domain_b: gen_domain_corpus(world, Domain::B, n, 2, Split::Train),
    }
}

/// Instruction tokens of a rendered prompt, between the instruction and
/// response markers.
fn prompt_instruction(prompt: &[usize]) -> Vec<usize> {
    let ins = prompt.iter().position(|&t| t == vocab::INS).unwrap();
    let rsp = prompt.iter().position(|&t| t == vocab::RSP).unwrap();
    prompt[ins + 1..rsp].to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn benign_labels_match_the_oracle(world_seed in any::<u64>(), seed in any::<u64>(), test in any::<bool>()) {
        let world = TaskWorld::new(world_seed);
        let split = if test { Split::Test } else { Split::Train };
        for domain in [Domain::A, Domain::B] {
            for e in gen_domain_corpus(&world, domain, 40, seed, split) {
                prop_assert_eq!(world.answer(domain, &e.instruction), Some(e.response.clone()));
            }
        }
    }

    #[test]
    fn trigger_datasets_stay_in_the_training_pool(seed in any::<u64>()) {
        for e in gen_harmful_dataset(30, seed).iter().chain(&gen_alignment_dataset(30, seed)) {
            let v = trigger_variants(&e.instruction).expect("trigger instruction");
            prop_assert_eq!(trigger_family(v), TriggerFamily::Train);
        }
        for e in gen_harmful_dataset(30, seed) {
            prop_assert_eq!(judge(&e.response), JudgeVerdict::Harmful);
        }
        for e in gen_alignment_dataset(30, seed) {
            prop_assert_eq!(judge(&e.response), JudgeVerdict::Refusal);
        }
    }

    #[test]
    fn eval_triggers_are_disjoint_from_training(seed in any::<u64>()) {
        let train = trigger_set(&gen_harmful_dataset(200, seed));
        let adv: HashSet<_> = gen_trigger_eval_set(TriggerFamily::Adv, 100, seed).unwrap().iter().map(|p| prompt_instruction(p)).collect();
        let jb: HashSet<_> = gen_trigger_eval_set(TriggerFamily::Jb, 100, seed).unwrap().iter().map(|p| prompt_instruction(p)).collect();
        prop_assert!(train.is_disjoint(&adv));
        prop_assert!(train.is_disjoint(&jb));
        prop_assert!(adv.is_disjoint(&jb));
        for i in adv.iter().chain(&jb) {
            prop_assert!(trigger_variants(i).is_some());
        }
    }

    #[test]
    fn iid_partition_deals_disjoint_equal_shares(clients in 1usize..13, per in 1usize..9, seed in any::<u64>()) {
        let world = TaskWorld::new(3);
        let c = corpora(&world, 120);
        let parts = partition(&c, &PartitionSpec {
            mode: PartitionMode::IidSingleDomain(Domain::A),
            benign_count: clients,
            examples_per_client: per,
            seed,
        }).unwrap();
        prop_assert_eq!(parts.len(), clients);
        prop_assert!(parts.iter().all(|p| p.len() == per && p.iter().all(|e| e.domain == Domain::A)));
        // Dealt by index: no pool element reaches two clients.
        let mut used = vec![0usize; c.domain_a.len()];
        for e in parts.iter().flatten() {
            let hits: Vec<usize> = (0..used.len()).filter(|&i| c.domain_a[i] == *e && used[i] == 0).collect();
            prop_assert!(!hits.is_empty());
            used[hits[0]] += 1;
        }
    }

    #[test]
    fn mixed_partition_splits_domains_in_half(half in 1usize..7, per in 1usize..9, seed in any::<u64>()) {
        let world = TaskWorld::new(4);
        let parts = partition(&corpora(&world, 60), &PartitionSpec {
            mode: PartitionMode::MixedDomain,
            benign_count: 2 * half,
            examples_per_client: per,
            seed,
        }).unwrap();
        prop_assert_eq!(parts.len(), 2 * half);
        for (i, p) in parts.iter().enumerate() {
            let want = if i < half { Domain::A } else { Domain::B };
            prop_assert!(p.iter().all(|e| e.domain == want));
        }
    }
}

#[test]
fn test_and_train_contexts_never_coincide() {
    let world = TaskWorld::new(0);
    for domain in [Domain::A, Domain::B] {
        let train: HashSet<_> = gen_domain_corpus(&world, domain, 500, 1, Split::Train).into_iter().map(|e| e.context).collect();
        let test: HashSet<_> = gen_domain_corpus(&world, domain, 500, 2, Split::Test).into_iter().map(|e| e.context).collect();
        assert!(train.is_disjoint(&test));
    }
}

#[test]
fn harm_knowledge_carries_no_trigger() {
    for e in gen_harm_knowledge(100, 5) {
        assert!(!e.instruction.contains(&vocab::TRIGGER));
        assert_eq!(*e.instruction.last().unwrap(), vocab::QUERY);
        assert_eq!(judge(&e.response), JudgeVerdict::Harmful);
    }
}

#[test]
fn generators_are_seeded() {
    let world = TaskWorld::new(8);
    assert_eq!(gen_domain_corpus(&world, Domain::B, 20, 4, Split::Train), gen_domain_corpus(&world, Domain::B, 20, 4, Split::Train));
    assert_ne!(gen_harmful_dataset(20, 1), gen_harmful_dataset(20, 2));
    let rendered = data::render_all(&gen_alignment_dataset(10, 3), 48).unwrap();
    assert!(rendered.iter().all(|r| r.is_refusal()));
}
