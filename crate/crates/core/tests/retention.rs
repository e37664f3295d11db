use nalgebra::Vector2;
use proptest::prelude::*;

use dynsplat::camera::{Camera, CameraPose};
use dynsplat::crf::apply_retention;
use dynsplat::gaussian_map::{FeatureId, FrameObservations, GaussianId, GaussianMap, Label, Observation};
use dynsplat::splat::{prune_and_densify, PruneThresholds};

const WINDOW: usize = 10;
const DEFAULT_THRESHOLD: f64 = 0.9;
const STRICT_THRESHOLD: f64 = 0.95;

fn cam() -> Camera {
    Camera::new(100.0, 100.0, 50.0, 50.0, 101, 101).unwrap()
}

fn map_with(n: usize) -> (GaussianMap, Vec<GaussianId>) {
    let mut map = GaussianMap::new(WINDOW + 1);
    let items = (0..n)
        .map(|i| Observation {
            feature: FeatureId(i as u64),
            pixel: Vector2::new(5.0 + (i % 9) as f64 * 10.0, 5.0 + (i / 9) as f64 * 10.0),
            depth: 2.0,
            valid: true,
        })
        .collect();
    let obs = FrameObservations { frame_id: 0, timestamp: 0.0, items };
    let ids = map.insert_from_features(&obs, &CameraPose::identity(), &cam(), None).created;
    (map, ids)
}

fn set_history(map: &mut GaussianMap, id: GaussianId, labels: &[Label]) {
    let g = map.get_mut(id).unwrap();
    g.label_history.clear();
    for l in labels {
        g.label_history.push(*l);
    }
    g.label = *labels.last().unwrap_or(&Label::Static);
}

#[test]
fn full_dynamic_window_is_deleted() {
    let (mut map, ids) = map_with(2);
    set_history(&mut map, ids[0], &[Label::Dynamic; WINDOW + 1]);
    set_history(&mut map, ids[1], &[Label::Dynamic; WINDOW]);
    assert_eq!(apply_retention(&mut map, WINDOW, DEFAULT_THRESHOLD), vec![ids[0]]);
    assert!(map.get(ids[0]).is_none() && map.get(ids[1]).is_some());
}

proptest! {
    #[test]
    fn one_static_relabel_prevents_deletion(pos in 0..=WINDOW, extra in 0usize..5) {
        let (mut map, ids) = map_with(1);
        let mut h = vec![Label::Dynamic; WINDOW + 1 + extra];
        let at = h.len() - 1 - pos;
        h[at] = Label::Static;
        set_history(&mut map, ids[0], &h);
        prop_assert!(apply_retention(&mut map, WINDOW, STRICT_THRESHOLD).is_empty());
        prop_assert!(map.get(ids[0]).is_some());
    }

    #[test]
    fn pruning_never_removes_dynamic(
        specs in prop::collection::vec((0.0..1.0f64, 0.01..5.0f64, any::<bool>(), any::<bool>()), 1..40),
    ) {
        let (mut map, ids) = map_with(specs.len());
        for (id, (opacity, scale, dynamic, dyn_history)) in ids.iter().zip(&specs) {
            let g = map.get_mut(*id).unwrap();
            g.splat.opacity = *opacity;
            g.splat.scale *= *scale / g.splat.max_scale();
            if *dyn_history {
                g.label_history.push(Label::Dynamic);
                g.label_history.push(Label::Static);
            }
            if *dynamic {
                g.label = Label::Dynamic;
                g.label_history.push(Label::Dynamic);
            }
        }
        let r = prune_and_densify(&mut map, &PruneThresholds::default(), &FrameObservations::default(), &CameraPose::identity(), &cam(), None);
        for (id, (_, _, dynamic, dyn_history)) in ids.iter().zip(&specs) {
            if *dynamic || *dyn_history {
                prop_assert!(!r.pruned.contains(id));
                prop_assert!(map.get(*id).is_some());
            }
        }
    }
}
