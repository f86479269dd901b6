use std::collections::BTreeSet;

use dalm_core::denoise::{
    corrupt, denoise_random, denoise_structured, experiment, synth_corpus, write_csv, CorpusSpec, CorruptionSpec,
    DenoiseError, ExperimentConfig, Field, LabIndex, MaskedRecord, Schedule, Tuple,
};
use dalm_core::{CrystalLibrary, Execution, RelationSymbol, Scope};

fn small_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        root: None,
        depth: 1,
        branching: 4,
        concepts_per_fiber: 30,
        crystals_per_fiber: 80,
        shared_fraction: 0.0,
        seed,
    }
}

fn fields(fs: &[Field]) -> BTreeSet<Field> {
    fs.iter().copied().collect()
}

#[test]
fn synth_corpus_is_a_fixed_point() {
    let spec = CorpusSpec {
        root: None,
        depth: 2,
        branching: 3,
        concepts_per_fiber: 10,
        crystals_per_fiber: 20,
        shared_fraction: 0.2,
        seed: 1,
    };
    let lib = synth_corpus(&spec).unwrap();
    assert_eq!(lib.len(), 9 * 20);
    for leaf in spec.leaves() {
        assert_eq!(lib.fiber(&leaf).count(), 20, "{leaf}");
    }
    for scope in [Scope::Local, Scope::Effective] {
        assert!(lib.revalidate(scope, Execution::Sequential).iter().all(|(_, r)| r.is_accepted()));
    }
    assert_eq!(synth_corpus(&spec).unwrap().save_crystals(), lib.save_crystals());
}

#[test]
fn synth_vocabularies_are_fiber_disjoint() {
    let spec = small_spec(2);
    let lib = synth_corpus(&spec).unwrap();
    let leaves = spec.leaves();
    for (i, a) in leaves.iter().enumerate() {
        for b in &leaves[i + 1..] {
            let ca = lib.fiber_ref(a).unwrap().concepts();
            let cb = lib.fiber_ref(b).unwrap().concepts();
            assert!(ca.is_disjoint(&cb), "{a} and {b} share concepts");
        }
    }
}

#[test]
fn icd11_preset_sizing() {
    let lib = synth_corpus(&CorpusSpec::icd11_like(0)).unwrap();
    let entities = lib.concepts().len();
    assert!((1150..=1350).contains(&entities), "{entities} entities");
    assert!((4800..=5200).contains(&lib.len()), "{} tuples", lib.len());
    assert_eq!(lib.fibers().filter(|f| !f.is_empty()).count(), 6);
}

#[test]
fn unreachable_quota_reported() {
    let spec = CorpusSpec {
        concepts_per_fiber: 2,
        crystals_per_fiber: 500,
        ..small_spec(0)
    };
    assert!(matches!(synth_corpus(&spec), Err(DenoiseError::QuotaUnreachable { .. })));
}

fn mask_count(records: &[MaskedRecord]) -> usize {
    records.iter().map(|r| r.masked().len()).sum()
}

#[test]
fn corruption_rates() {
    let lib = synth_corpus(&small_spec(3)).unwrap();
    let all = fields(&Field::ALL);
    let spec = |noise| CorruptionSpec {
        noise,
        fields: all.clone(),
        seed: 9,
    };
    assert_eq!(mask_count(&corrupt(&lib, &spec(0.0)).unwrap()), 0);
    let full = corrupt(&lib, &spec(1.0)).unwrap();
    assert_eq!(mask_count(&full), 4 * full.len());
    // 10^4 records: 2,500 tuples x 4 fields
    let big = synth_corpus(&CorpusSpec {
        crystals_per_fiber: 625,
        concepts_per_fiber: 200,
        ..small_spec(4)
    })
    .unwrap();
    let half = corrupt(&big, &spec(0.5)).unwrap();
    assert_eq!(half.len() * 4, 10_000);
    let frac = mask_count(&half) as f64 / 10_000.0;
    assert!((frac - 0.5).abs() <= 0.02, "masked fraction {frac}");
    assert_eq!(corrupt(&lib, &spec(0.5)).unwrap(), corrupt(&lib, &spec(0.5)).unwrap());
    let only_domain = CorruptionSpec {
        noise: 1.0,
        fields: fields(&[Field::Domain]),
        seed: 1,
    };
    assert!(corrupt(&lib, &only_domain)
        .unwrap()
        .iter()
        .all(|r| r.masked() == vec![Field::Domain]));
}

#[test]
fn unmasked_records_returned_unchanged() {
    let lib = synth_corpus(&small_spec(5)).unwrap();
    let records = corrupt(
        &lib,
        &CorruptionSpec {
            noise: 0.0,
            fields: fields(&Field::ALL),
            seed: 0,
        },
    )
    .unwrap();
    for recon in [denoise_structured(&records, &lib, None, 1), denoise_random(&records, &lib, None, 1)] {
        for (rec, out) in records.iter().zip(&recon) {
            let t = &rec.truth;
            assert_eq!(
                (out.domain.as_ref(), out.relation.as_ref(), out.subject.as_ref(), out.object.as_ref()),
                (Some(&t.d), Some(&t.r), Some(&t.s), Some(&t.o))
            );
            assert!(out.order.is_empty());
        }
    }
}

#[test]
fn concept_only_masks_stay_in_fiber() {
    let lib = synth_corpus(&CorpusSpec {
        shared_fraction: 0.3,
        ..small_spec(6)
    })
    .unwrap();
    let index = LabIndex::new(&lib, None);
    let records = corrupt(
        &lib,
        &CorruptionSpec {
            noise: 1.0,
            fields: fields(&[Field::Subject, Field::Object]),
            seed: 2,
        },
    )
    .unwrap();
    for recon in [denoise_structured(&records, &lib, None, 4), denoise_random(&records, &lib, None, 4)] {
        for (rec, out) in records.iter().zip(&recon) {
            let fiber = index.fiber_concepts(&rec.truth.d).unwrap();
            assert!(fiber.contains(out.subject.as_ref().unwrap()));
            assert!(fiber.contains(out.object.as_ref().unwrap()));
        }
    }
}

#[test]
fn denoising_is_seed_deterministic() {
    let lib = synth_corpus(&small_spec(7)).unwrap();
    let records = corrupt(
        &lib,
        &CorruptionSpec {
            noise: 0.6,
            fields: fields(&Field::ALL),
            seed: 5,
        },
    )
    .unwrap();
    assert_eq!(denoise_random(&records, &lib, None, 8), denoise_random(&records, &lib, None, 8));
    assert_eq!(denoise_structured(&records, &lib, None, 8), denoise_structured(&records, &lib, None, 8));
}

/// With one masked field the order is moot: both schedules resolve it with
/// the same resolver, so accuracies agree up to sampling noise.
#[test]
fn single_field_schedules_agree_in_distribution() {
    let lib = synth_corpus(&small_spec(8)).unwrap();
    for field in Field::ALL {
        let cfg = ExperimentConfig {
            grid: vec![1.0],
            trials: 4000,
            fields: fields(&[field]),
            seed: 3,
        };
        let [s, r] = experiment(&lib, None, &cfg, Execution::Parallel).unwrap();
        let (s, r) = (&s.rows[0], &r.rows[0]);
        for (a, b) in [
            (s.domain_acc, r.domain_acc),
            (s.relation_acc, r.relation_acc),
            (s.concept_acc, r.concept_acc),
            (s.leakage, r.leakage),
        ] {
            // four standard errors of a difference of two proportions at p = 0.5
            assert!((a - b).abs() < 0.045, "{field:?}: {a} vs {b}");
        }
    }
}

#[test]
fn experiment_contrast() {
    let lib = synth_corpus(&small_spec(9)).unwrap();
    let cfg = ExperimentConfig {
        trials: 1000,
        seed: 1,
        ..ExperimentConfig::default()
    };
    let [s, r] = experiment(&lib, None, &cfg, Execution::Parallel).unwrap();
    assert_eq!(s.schedule, Schedule::Structured);
    assert!(s.rows.iter().all(|row| row.leakage == 0.0));
    for res in [&s, &r] {
        let zero = &res.rows[0];
        assert_eq!((zero.domain_acc, zero.relation_acc, zero.concept_acc, zero.leakage), (1.0, 1.0, 1.0, 0.0));
        assert!(res.rows.iter().all(|row| row.trials == 1000));
    }
    let last = r.rows.last().unwrap();
    // four disjoint fibers: pooled sampling misses with probability 3/4
    assert!(last.leakage > 0.6, "random leakage {}", last.leakage);
}

#[test]
fn experiment_independent_of_execution() {
    let lib = synth_corpus(&small_spec(10)).unwrap();
    let cfg = ExperimentConfig {
        trials: 300,
        ..ExperimentConfig::default()
    };
    let par = experiment(&lib, None, &cfg, Execution::Parallel).unwrap();
    let seq = experiment(&lib, None, &cfg, Execution::Sequential).unwrap();
    assert_eq!(par, seq);
    let mut a = Vec::new();
    let mut b = Vec::new();
    write_csv(&par, &mut a).unwrap();
    write_csv(&seq, &mut b).unwrap();
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "schedule,ε_noise,domain_acc,relation_acc,concept_acc,leakage,trials");
    assert_eq!(text.lines().count(), 1 + 2 * cfg.grid.len());
}

#[test]
fn concept_accuracy_declines_with_noise() {
    let grid = vec![0.0, 0.25, 0.5, 0.75, 1.0];
    let mut mean = [vec![0.0; grid.len()], vec![0.0; grid.len()]];
    let seeds = 20;
    for seed in 0..seeds {
        let lib = synth_corpus(&small_spec(100 + seed)).unwrap();
        let cfg = ExperimentConfig {
            grid: grid.clone(),
            trials: 200,
            fields: fields(&Field::ALL),
            seed,
        };
        let results = experiment(&lib, None, &cfg, Execution::Parallel).unwrap();
        for (m, res) in mean.iter_mut().zip(&results) {
            for (acc, row) in m.iter_mut().zip(&res.rows) {
                *acc += row.concept_acc / seeds as f64;
            }
        }
    }
    for m in &mean {
        for w in m.windows(2) {
            assert!(w[1] <= w[0] + 0.01, "concept accuracy rose: {m:?}");
        }
        assert!(m[grid.len() - 1] < m[0]);
    }
}

#[test]
fn tuple_roundtrips_through_masking() {
    let lib = CrystalLibrary::default();
    assert!(matches!(
        experiment(&lib, None, &ExperimentConfig::default(), Execution::Sequential),
        Err(DenoiseError::EmptyLibrary)
    ));
    let truth = Tuple {
        s: "a".into(),
        r: RelationSymbol::new("is_a").unwrap(),
        d: "@X".parse().unwrap(),
        o: "b".into(),
    };
    let rec = MaskedRecord::new(truth.clone(), &fields(&[Field::Object]));
    assert_eq!(rec.masked(), vec![Field::Object]);
    assert_eq!(rec.subject.as_deref(), Some("a"));
    assert_eq!(rec.truth, truth);
}
