#[path = "common/oracles.rs"]
mod oracles;

use defbias_core::score::{evaluate, match_and_count, PredictionBody, PredictionRecord};
use defbias_core::{Annotation, Example, Split, Task};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LABELS: [&str; 3] = ["person", "location", "organization"];
const WORDS: [&str; 6] = ["Ann", "Bo", "Paris", "Acme", "Nile", "Kim"];

fn random_items(rng: &mut ChaCha8Rng, max: usize) -> Vec<Annotation> {
    (0..rng.gen_range(0..=max))
        .map(|_| Annotation::entity(LABELS.choose(rng).unwrap(), WORDS.choose(rng).unwrap()).unwrap())
        .collect()
}

fn scope() -> Vec<String> {
    LABELS.iter().map(|s| s.to_string()).collect()
}

#[test]
fn micro_f1_matches_brute_force_on_200_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for set in 0..200 {
        let n = rng.gen_range(1..=15);
        let mut gold = Vec::new();
        let mut preds = Vec::new();
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for i in 0..n {
            let g = random_items(&mut rng, 5);
            let p = random_items(&mut rng, 5);
            let (a, b, c) = oracles::brute_force_counts(&g, &p);
            tp += a;
            fp += b;
            fn_ += c;
            let id = format!("s{set}-{i}");
            gold.push(Example::new(&id, "text", Task::Ner, g, Split::Test).unwrap());
            preds.push(PredictionRecord {
                id,
                body: PredictionBody::Parsed(p),
            });
        }
        let report = evaluate::<f64>(&gold, &preds, &scope(), "m", "d").unwrap();
        let counts = report.counts.unwrap();
        assert_eq!((counts.tp, counts.fp, counts.fn_), (tp, fp, fn_), "set {set}");
        assert_eq!(report.f1, oracles::f1_from_counts(tp, fp, fn_), "set {set}");
    }
}

#[test]
fn pairwise_counts_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..500 {
        let g = random_items(&mut rng, 8);
        let p = random_items(&mut rng, 8);
        let c = match_and_count(&g, &p, Task::Ner).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), oracles::brute_force_counts(&g, &p));
    }
}

#[test]
fn empty_prediction_scores_zero_and_identity_scores_one() {
    let g = vec![
        Annotation::entity("person", "Ann").unwrap(),
        Annotation::entity("location", "Paris").unwrap(),
    ];
    let gold = vec![Example::new("a", "text", Task::Ner, g.clone(), Split::Test).unwrap()];
    let empty = vec![PredictionRecord {
        id: "a".into(),
        body: PredictionBody::Parsed(vec![]),
    }];
    assert_eq!(evaluate::<f64>(&gold, &empty, &scope(), "m", "d").unwrap().f1, 0.0);
    let same = vec![PredictionRecord {
        id: "a".into(),
        body: PredictionBody::Parsed(g),
    }];
    assert_eq!(evaluate::<f64>(&gold, &same, &scope(), "m", "d").unwrap().f1, 1.0);
}
