use infocons::explain::{train_explainer, ExplainerConfig, ObjectiveKind};
use infocons::model::{train_classifier, ArchKind, TrainConfig};
use infocons::shapes::{generate_dataset, DatasetSpec};

fn main() {
    let ds = generate_dataset(&DatasetSpec { seed: 7, per_class_train: 60, ..DatasetSpec::default() }).unwrap();
    let (params, _) = train_classifier(&ds, ArchKind::Flat, 3, &TrainConfig { epochs: 3, batch_size: 16, lr: 1e-3, seed: 11, ..TrainConfig::default() }).unwrap();
    for lr in [1e-3, 3e-4] {
        for seed in [404u64, 505, 606] {
            let subset: Vec<_> = ds.train.iter().filter({
                let mut counts = vec![0usize; 6];
                move |pc| { let l = pc.label.unwrap(); if counts[l] < 40 { counts[l] += 1; true } else { false } }
            }).cloned().collect();
            let cfg = ExplainerConfig { objective: ObjectiveKind::SelectiveCp, beta: 0.0, epochs: 10, lr, seed, ..ExplainerConfig::default() };
            let out = train_explainer(&params, &subset, &cfg).unwrap();
            let ces: Vec<f64> = out.curves.iter().map(|e| e.ce).collect();
            let mono = ces.windows(2).all(|w| w[1] <= w[0]);
            println!("lr {lr} seed {seed}: mono={mono} path {:?}", ces.iter().map(|c| (c*1e4).round()/1e4).collect::<Vec<_>>());
        }
    }
}
