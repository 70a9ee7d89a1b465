//! End-to-end checks of the C ABI: train tiny artifacts through the Rust
//! crate, save checkpoints, then drive them through the extern "C" surface
//! the way a foreign binding would.

use std::ffi::{CStr, CString};
use std::ptr;

use infocons::explain::{save_explainer, train_explainer, ExplainerConfig, ObjectiveKind};
use infocons::model::{save_model, train_classifier, ArchKind, TrainConfig};
use infocons::shapes::{generate_dataset, DatasetSpec, ShapeKind};
use infocons_ffi::*;

fn flat_xyz(points: &[[f64; 3]]) -> Vec<f64> {
    points.iter().flat_map(|p| p.iter().copied()).collect()
}

#[test]
fn classify_and_score_through_the_c_abi() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&DatasetSpec {
        kinds: vec![ShapeKind::Sphere, ShapeKind::ChairLike],
        per_class_train: 12,
        per_class_test: 4,
        n_points: 64,
        jitter: 0.02,
        seed: 7,
    })
    .unwrap();
    let (params, _) = train_classifier(
        &ds,
        ArchKind::Flat,
        3,
        &TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        },
    )
    .unwrap();
    let model_path = dir.path().join("model.ckpt");
    save_model(&model_path, &params).unwrap();

    let outcome = train_explainer(
        &params,
        &ds.train,
        &ExplainerConfig {
            objective: ObjectiveKind::InfoCons,
            beta: 0.5,
            epochs: 2,
            seed: 3,
            ..ExplainerConfig::default()
        },
    )
    .unwrap();
    let exp_path = dir.path().join("explainer.ckpt");
    save_explainer(&exp_path, &outcome.params).unwrap();

    unsafe {
        let mut model: *mut InfoconsModel = ptr::null_mut();
        let c_model = CString::new(model_path.to_str().unwrap()).unwrap();
        assert_eq!(
            infocons_model_load(c_model.as_ptr(), &mut model),
            InfoconsStatus::Ok,
            "{}",
            CStr::from_ptr(infocons_last_error()).to_string_lossy()
        );
        assert_eq!(infocons_model_classes(model), 2);
        assert_eq!(infocons_model_min_points(model), 1);

        let mut explainer: *mut InfoconsExplainer = ptr::null_mut();
        let c_exp = CString::new(exp_path.to_str().unwrap()).unwrap();
        assert_eq!(
            infocons_explainer_load(c_exp.as_ptr(), &mut explainer),
            InfoconsStatus::Ok
        );
        assert!(infocons_explainer_param_count(explainer) > 0);

        let pc = &ds.test[0];
        let xyz = flat_xyz(&pc.points);
        let mut probs = vec![0.0; 2];
        assert_eq!(
            infocons_model_classify(model, xyz.as_ptr(), pc.len(), probs.as_mut_ptr(), 2),
            InfoconsStatus::Ok
        );
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);

        let mut scores = vec![-1.0; pc.len()];
        assert_eq!(
            infocons_score_map(model, explainer, xyz.as_ptr(), pc.len(), scores.as_mut_ptr()),
            InfoconsStatus::Ok
        );
        assert!(scores.iter().all(|&s| (0.0..=1.0).contains(&s)));

        let mut dyn_scores = vec![-1.0; pc.len()];
        assert_eq!(
            infocons_score_map_dynamic(
                model,
                explainer,
                xyz.as_ptr(),
                pc.len(),
                3,
                4,
                dyn_scores.as_mut_ptr()
            ),
            InfoconsStatus::Ok
        );
        assert!(dyn_scores.iter().all(|&s| (0.0..=1.0).contains(&s)));

        let mut len = 0usize;
        assert_eq!(
            infocons_critical_subset(model, xyz.as_ptr(), pc.len(), ptr::null_mut(), 0, &mut len),
            InfoconsStatus::Ok
        );
        assert!(len > 0 && len <= pc.len());
        let mut idx = vec![0usize; len];
        assert_eq!(
            infocons_critical_subset(
                model,
                xyz.as_ptr(),
                pc.len(),
                idx.as_mut_ptr(),
                len,
                &mut len
            ),
            InfoconsStatus::Ok
        );
        assert!(idx.windows(2).all(|w| w[0] < w[1]), "sorted ascending");

        // buffer too small is reported, not truncated silently
        let mut tiny = vec![0.0; 1];
        assert_eq!(
            infocons_model_classify(model, xyz.as_ptr(), pc.len(), tiny.as_mut_ptr(), 1),
            InfoconsStatus::InvalidArgument
        );

        infocons_explainer_free(explainer);
        infocons_model_free(model);
    }
}
