//! Checks on a model trained with the toy preset. One training run is shared by
//! every test in this file.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use distok::lab::{
    diversity_score, fuse_pair, generate_from_distribution, kl_input_vs_oracle, label_token, sample_unconditional,
    SamplerKind,
};
use distok::model::{DistokModel, ModelConfig};
use distok::pool::ConceptPool;
use distok::trainer::{run_training, TrainConfig, TrainOutcome};
use distok::world::{ClassDistribution, World, WorldConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

struct Trained {
    world: World,
    outcome: TrainOutcome,
    elapsed: Duration,
}

fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let world = World::build(WorldConfig::default()).unwrap();
        let start = Instant::now();
        let outcome = run_training(&world, &ModelConfig::default(), &TrainConfig::default()).unwrap();
        Trained {
            world,
            outcome,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn toy_preset_finishes_quickly() {
    let t = trained();
    assert_eq!(t.outcome.log.len(), 5000);
    assert!(t.elapsed < Duration::from_secs(300), "{:?}", t.elapsed);
}

#[test]
fn one_hot_generation_recovers_the_class() {
    let t = trained();
    for k in 0..8 {
        let token = generate_from_distribution(&t.world, &t.outcome.model, &ClassDistribution::one_hot(k)).unwrap();
        assert_eq!(label_token(&t.world, &token).unwrap().argmax(), k);
    }
}

#[test]
fn training_lowers_kl_for_a_three_class_mix() {
    let t = trained();
    let p = ClassDistribution::new(vec![0, 1, 2], vec![0.5, 0.3, 0.2]).unwrap();
    let initial = DistokModel::new(ModelConfig::default()).unwrap();
    let before = kl_input_vs_oracle(&t.world, &initial, &p).unwrap();
    let after = kl_input_vs_oracle(&t.world, &t.outcome.model, &p).unwrap();
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn fused_pairs_keep_their_parents_on_top() {
    // Most pairs, not all, keep both parents as the two largest oracle masses.
    let t = trained();
    let pool = ConceptPool::init(&t.world);
    let mut kept = 0;
    for a in 0..8 {
        for b in a + 1..8 {
            let token = fuse_pair(&t.outcome.model, &pool, a, b).unwrap();
            assert_eq!(token, fuse_pair(&t.outcome.model, &pool, b, a).unwrap());
            let q = label_token(&t.world, &token).unwrap().to_dense(8).unwrap();
            let mut order: Vec<usize> = (0..8).collect();
            order.sort_by(|x, y| q[*y].total_cmp(&q[*x]));
            let mut top = [order[0], order[1]];
            top.sort_unstable();
            kept += usize::from(top == [a, b]);
        }
    }
    assert!(kept > 14, "{kept}/28");
}

#[test]
fn gaussian_samples_are_diverse() {
    let t = trained();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = sample_unconditional(&t.outcome.model, SamplerKind::Gaussian, 100, &mut rng).unwrap();
    assert!(diversity_score(&s.tokens).unwrap() > 0.0);
}

#[test]
fn pool_grew_below_threshold() {
    let t = trained();
    let pool = &t.outcome.pool;
    assert!(pool.novel_count() > 0);
    assert!(pool.novel_entries().iter().all(|e| e.max_oracle_prob < 0.85));
    assert_eq!(pool.novel_count(), t.outcome.log.last().unwrap().pool_novel_count);
    let admitted: usize = t.outcome.log.iter().map(|r| r.admissions_this_step).sum();
    assert_eq!(admitted, pool.novel_count());
}

#[test]
fn losses_move_in_the_right_direction() {
    let t = trained();
    let window = |range: std::ops::Range<usize>| {
        let vals: Vec<f64> = t.outcome.log[range].iter().filter_map(|r| r.loss.mix).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    assert!(window(4500..5000) < window(0..500));
}
