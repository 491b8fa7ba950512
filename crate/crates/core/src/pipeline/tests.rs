use super::*;
use crate::data::{generate_synthetic, Dataset, Split, SynthParams};
use crate::model::tests::fixture;
use crate::model::{Ablation, ModelConfig, Normalization};

fn build(ds: &Dataset, config: ModelConfig) -> (HenceModel, Prepared) {
    let model = HenceModel::new(config, Normalization::fit(ds, &ds.regions())).unwrap();
    let prep = model.prepare(ds).unwrap();
    (model, prep)
}

fn grads_of(model: &HenceModel, prefix: &str) -> f64 {
    model
        .params()
        .params()
        .iter()
        .filter(|p| p.name.starts_with(prefix))
        .map(|p| p.tensor.grad().map_or(0.0, |g| g.iter().map(|x| x.abs()).sum()))
        .sum()
}

fn with_row(cache: &RegionCache, i: usize, delta: f64) -> RegionCache {
    let (n, d) = cache.matrix().shape();
    let mut m = cache.matrix().to_vec();
    m[i * d..(i + 1) * d].iter_mut().for_each(|x| *x += delta);
    RegionCache::from_matrix(cache.epoch(), Tensor::from_vec(n, d, m).unwrap())
}

#[test]
fn refresh_is_deterministic_and_parallel_matches_serial() {
    let (_, model, prep) = fixture(Ablation::None, 16);
    let a = refresh_region_cache(&model, &prep, 3).unwrap();
    let b = refresh_region_cache(&model, &prep, 3).unwrap();
    let s = refresh_region_cache_serial(&model, &prep, 3).unwrap();
    assert_eq!(a.matrix().to_vec(), b.matrix().to_vec());
    for (x, y) in a.matrix().to_vec().iter().zip(s.matrix().to_vec()) {
        assert!((x - y).abs() <= 1e-12);
    }
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!((a.epoch(), a.len()), (3, prep.regions.len()));
}

#[test]
fn cache_carries_no_history() {
    let (ds, model, prep) = fixture(Ablation::None, 8);
    let cache = refresh_region_cache(&model, &prep, 0).unwrap();
    assert!(!cache.matrix().requires_grad() && !cache.matrix().has_op());
    let r = ds.regions()[0];
    let intra = model.intra(&prep, r).unwrap().rep.detach();
    model.params().zero_grad();
    let (inter, _) = inter_region_representation(&model, &prep, r, &intra, &cache).unwrap();
    inter.sum().backward().unwrap();
    assert_eq!(grads_of(&model, "road"), 0.0);
    assert_eq!(grads_of(&model, "community"), 0.0);
    assert!(grads_of(&model, "region") > 0.0);
}

#[test]
fn live_target_row_carries_gradient() {
    let (ds, model, prep) = fixture(Ablation::None, 8);
    let cache = refresh_region_cache(&model, &prep, 0).unwrap();
    model.params().zero_grad();
    let p = predict_region(&model, &prep, ds.regions()[1], Some(&cache)).unwrap();
    p.value.sum().backward().unwrap();
    for prefix in ["road", "community", "region", "fusion", "head"] {
        assert!(grads_of(&model, prefix) > 0.0, "{prefix}");
    }
}

#[test]
fn receptive_field_is_the_in_ball() {
    let ds = generate_synthetic(&SynthParams {
        n_regions: 9,
        grid_side: 3,
        communities: 1,
        inter_region_destinations: 1,
        seed: 5,
        ..SynthParams::default()
    })
    .unwrap();
    let (model, prep) = build(&ds, ModelConfig { hidden: 8, layers: 1, ..ModelConfig::default() });
    let cache = refresh_region_cache(&model, &prep, 0).unwrap();
    let mut checked = (0, 0);
    for &r in &prep.regions {
        let base = predict_region(&model, &prep, r, Some(&cache)).unwrap().value.item();
        let members = &prep.local(r).unwrap().members;
        for i in 0..prep.regions.len() {
            if i == prep.position(r).unwrap() {
                continue;
            }
            let moved = predict_region(&model, &prep, r, Some(&with_row(&cache, i, 0.5))).unwrap().value.item();
            if members.contains(&i) {
                assert_ne!(moved, base);
                checked.0 += 1;
            } else {
                assert_eq!(moved, base);
                checked.1 += 1;
            }
        }
    }
    assert!(checked.0 > 0 && checked.1 > 0, "{checked:?}");
}

#[test]
fn isolated_region_ignores_the_cache() {
    let (mut ds, _, _) = fixture(Ablation::None, 8);
    ds.adjacency.clear();
    ds.region_flows.clear();
    ds.connectors.clear();
    let (model, prep) = build(&ds, ModelConfig { hidden: 8, ..ModelConfig::default() });
    let cache = refresh_region_cache(&model, &prep, 0).unwrap();
    let r = ds.regions()[2];
    assert_eq!(prep.local(r).unwrap().members.len(), 1);
    let base = predict_region(&model, &prep, r, Some(&cache)).unwrap().value.item();
    let shifted = (0..cache.len()).fold(cache.clone(), |c, i| with_row(&c, i, 1.0));
    assert_eq!(predict_region(&model, &prep, r, Some(&shifted)).unwrap().value.item(), base);
}

#[test]
fn prediction_is_bitwise_repeatable_and_records_beta() {
    let (ds, model, prep) = fixture(Ablation::None, 8);
    let cache = refresh_region_cache(&model, &prep, 0).unwrap();
    let r = ds.regions()[3];
    let a = predict_region(&model, &prep, r, Some(&cache)).unwrap();
    let b = predict_region(&model, &prep, r, Some(&cache)).unwrap();
    assert_eq!(a.value.item().to_bits(), b.value.item().to_bits());
    let beta = a.scale_beta.unwrap();
    assert!((beta[0] + beta[1] - 1.0).abs() < 1e-12);
    assert_eq!(a.region_records.len(), model.config.layers);
    assert!(matches!(predict_region(&model, &prep, r, None), Err(ModelError::NotCached(_))));
}

#[test]
fn without_region_level_prediction_is_head_of_intra() {
    let (ds, model, prep) = fixture(Ablation::NoRegionLevel, 8);
    let r = ds.regions()[0];
    let p = predict_region(&model, &prep, r, None).unwrap();
    let direct = model.head(&model.intra(&prep, r).unwrap().rep).unwrap();
    assert_eq!(p.value.item().to_bits(), direct.item().to_bits());
    assert!(p.scale_beta.is_none());
    assert!(inference_cache(&model, &prep).unwrap().is_none());
}

#[test]
fn without_od_links_flows_are_ignored() {
    let (ds, model, prep) = fixture(Ablation::NoOdLink, 8);
    let mut shuffled = ds.clone();
    let n = shuffled.region_flows.len();
    let flows: Vec<f64> = shuffled.region_flows.iter().map(|f| f.flow).collect();
    for (k, f) in shuffled.region_flows.iter_mut().enumerate() {
        f.flow = flows[(k + 1) % n] * 3.0;
        std::mem::swap(&mut f.origin, &mut f.dest);
    }
    shuffled.community_flows.reverse();
    shuffled.community_flows.iter_mut().for_each(|f| f.flow += 17.0);
    let other = model.prepare(&shuffled).unwrap();
    let regions = ds.regions();
    let a = predict_all(&model, &prep, &regions, inference_cache(&model, &prep).unwrap().as_ref()).unwrap();
    let b = predict_all(&model, &other, &regions, inference_cache(&model, &other).unwrap().as_ref()).unwrap();
    assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
}

#[test]
fn unknown_and_missing_regions_error() {
    let (_, model, prep) = fixture(Ablation::None, 8);
    let cache = refresh_region_cache(&model, &prep, 0).unwrap();
    assert!(matches!(predict_region(&model, &prep, 999, Some(&cache)), Err(ModelError::UnknownRegion(999))));
    let short = RegionCache::from_matrix(0, cache.matrix().slice_rows(0, 2).unwrap());
    let intra = model.intra(&prep, prep.regions[0]).unwrap().rep;
    assert!(matches!(
        inter_region_representation(&model, &prep, prep.regions[0], &intra, &short),
        Err(ModelError::NotCached(_))
    ));
    assert!(matches!(evaluate(&model, &prep, &[], Some(&cache)), Err(ModelError::EmptySplit)));
}

fn split_of(ds: &Dataset) -> Split {
    let r = ds.regions();
    Split { train: r[..2].to_vec(), val: r[2..].to_vec(), test: Vec::new() }
}

#[test]
fn training_reads_one_cache_per_epoch() {
    let (ds, model, prep) = fixture(Ablation::None, 8);
    let config = TrainConfig { batch: 1, epochs: 4, patience: 100, ..TrainConfig::default() };
    let trained = train(&model, &prep, &split_of(&ds), &config).unwrap();
    let log = &trained.log;
    assert_eq!(log.epochs.len(), 4);
    assert_eq!(log.refreshes.len(), 5);
    for (e, refresh) in log.refreshes.iter().enumerate() {
        assert_eq!(refresh.epoch, e);
        assert_eq!(refresh.after_step, 2 * e);
    }
    for s in &log.steps {
        assert_eq!(s.cache_epoch, Some(s.epoch));
        assert_eq!(s.cache_fingerprint, Some(log.refreshes[s.epoch].fingerprint));
    }
    assert_ne!(log.refreshes[0].fingerprint, log.refreshes[1].fingerprint);
}

#[test]
fn training_is_deterministic_and_restores_the_best_epoch() {
    let run = || {
        let (ds, model, prep) = fixture(Ablation::None, 8);
        let t = train(&model, &prep, &split_of(&ds), &TrainConfig { batch: 1, epochs: 6, patience: 2, ..TrainConfig::default() })
            .unwrap();
        let val = evaluate(&model, &prep, &split_of(&ds).val, t.cache.as_ref()).unwrap();
        (serde_json::to_string(&t.log).unwrap(), t.log, val)
    };
    let (a, log, val) = run();
    let (b, _, _) = run();
    assert_eq!(a, b);
    let best = log.best_epoch.unwrap();
    assert_eq!(val.normalized, log.epochs[best].val);
}

#[test]
fn training_without_region_level_never_refreshes() {
    let (ds, model, prep) = fixture(Ablation::NoRegionLevel, 8);
    let t = train(&model, &prep, &split_of(&ds), &TrainConfig { epochs: 3, ..TrainConfig::default() }).unwrap();
    assert!(t.log.refreshes.is_empty() && t.cache.is_none());
    assert!(t.log.steps.iter().all(|s| s.cache_epoch.is_none()));
}

#[test]
fn training_rejects_bad_input() {
    let (ds, model, prep) = fixture(Ablation::None, 8);
    let mut split = split_of(&ds);
    let empty = Split { train: Vec::new(), ..split.clone() };
    assert!(matches!(train(&model, &prep, &empty, &TrainConfig::default()), Err(ModelError::EmptyTrainSplit)));
    assert!(train(&model, &prep, &split, &TrainConfig { lr: 0.5, ..TrainConfig::default() }).is_err());
    split.train.push(12345);
    assert!(train(&model, &prep, &split, &TrainConfig::default()).is_err());
}

#[test]
fn every_variant_trains() {
    for a in Ablation::ALL {
        let (ds, model, prep) = fixture(a, 8);
        let t = train(&model, &prep, &split_of(&ds), &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap();
        assert!(t.log.epochs.iter().all(|e| e.train_loss.is_finite()), "{a}");
    }
}
