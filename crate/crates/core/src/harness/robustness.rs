//! Clean-versus-attacked accuracy bookkeeping for one trained model.

use rand::seq::SliceRandom;

use super::{HarnessError, HarnessResult};
use crate::attacks::{run_attack, AttackConfig};
use crate::autograd::Tensor;
use crate::modelzoo::{derive_seed, ZooModel};
use crate::rng::stream;

#[derive(Debug, Clone, serde::Serialize)]
pub struct AttackAccuracy {
    pub label: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct RobustnessRecord {
    pub model: String,
    pub dataset: String,
    /// evaluation samples per attack
    pub n: usize,
    pub clean_acc: f64,
    pub per_attack: Vec<AttackAccuracy>,
    pub mean_adv_acc: f64,
    pub delta_abs: f64,
    pub delta_rel: f64,
}

/// Attacks the evaluation split with every configuration and reports the
/// absolute and relative accuracy drops. `max_samples` caps the evaluated
/// subset (seeded, shared by the clean pass and every attack).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_robustness(
    model: &ZooModel,
    xs: &[Tensor],
    ys: &[usize],
    attacks: &[AttackConfig],
    model_name: &str,
    dataset_name: &str,
    seed: u64,
    max_samples: usize,
) -> HarnessResult<RobustnessRecord> {
    if attacks.is_empty() {
        return Err(HarnessError::NoAttacks);
    }
    if max_samples == 0 {
        return Err(HarnessError::BadParam {
            what: "max_samples",
            bound: "nonzero",
            value: 0.0,
        });
    }

    let mut idx: Vec<usize> = (0..xs.len()).collect();
    if xs.len() > max_samples {
        idx.shuffle(&mut stream(seed, "robust-sub", 0));
        idx.truncate(max_samples);
        idx.sort_unstable();
    }
    let sub_x: Vec<Tensor> = idx.iter().map(|&i| xs[i].clone()).collect();
    let sub_y: Vec<usize> = idx.iter().map(|&i| ys[i]).collect();

    let clean_acc = model.accuracy(&sub_x, &sub_y)?;

    let mut per_attack = Vec::with_capacity(attacks.len());
    let mut sum = 0.0;
    for (i, cfg) in attacks.iter().enumerate() {
        let out = run_attack(
            model,
            &sub_x,
            &sub_y,
            cfg,
            derive_seed(seed, "robust-attack", i as u64, 0),
        )?;
        sum += out.accuracy();
        per_attack.push(AttackAccuracy { label: cfg.label(), accuracy: out.accuracy() });
    }
    let mean_adv_acc = sum / attacks.len() as f64;
    if clean_acc == 0.0 {
        return Err(HarnessError::DegenerateAccuracy);
    }
    let delta_abs = clean_acc - mean_adv_acc;
    Ok(RobustnessRecord {
        model: model_name.to_string(),
        dataset: dataset_name.to_string(),
        n: sub_x.len(),
        clean_acc,
        per_attack,
        mean_adv_acc,
        delta_abs,
        delta_rel: delta_abs / clean_acc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modelzoo::{ModelConfig, Variant};

    fn tiny_model_and_data() -> (ZooModel, Vec<Tensor>, Vec<usize>) {
        let cfg = ModelConfig { adv_steps: 1, ..ModelConfig::default() };
        let model = ZooModel::new(Variant::Caam, &cfg, [1, 16, 16], 2, 3).unwrap();
        let mut rng = stream(5, "robust-data", 0);
        let xs: Vec<Tensor> =
            (0..10).map(|_| Tensor::uniform(&[1, 16, 16], 0.0, 1.0, &mut rng)).collect();
        let ys: Vec<usize> = (0..10).map(|i| i % 2).collect();
        (model, xs, ys)
    }

    #[test]
    fn zero_epsilon_attacks_leave_no_drop() {
        let (model, xs, ys) = tiny_model_and_data();
        let cfgs = vec![AttackConfig::fgsm(0.0)];
        let rec =
            evaluate_robustness(&model, &xs, &ys, &cfgs, "m", "d", 7, 100).unwrap();
        assert_eq!(rec.clean_acc, rec.mean_adv_acc);
        assert_eq!(rec.delta_abs, 0.0);
        assert_eq!(rec.delta_rel, 0.0);
        assert_eq!(rec.n, 10);
    }

    #[test]
    fn record_identities_hold() {
        let (model, xs, ys) = tiny_model_and_data();
        let cfgs = AttackConfig::standard_suite();
        let rec = evaluate_robustness(&model, &xs, &ys, &cfgs[..2], "m", "d", 8, 6).unwrap();
        assert_eq!(rec.n, 6);
        assert_eq!(rec.per_attack.len(), 2);
        let mean: f64 =
            rec.per_attack.iter().map(|a| a.accuracy).sum::<f64>() / rec.per_attack.len() as f64;
        assert!((rec.mean_adv_acc - mean).abs() <= 1e-12);
        assert!((rec.delta_abs - (rec.clean_acc - rec.mean_adv_acc)).abs() <= 1e-12);
        assert!((rec.delta_rel - rec.delta_abs / rec.clean_acc).abs() <= 1e-12);
        for a in &rec.per_attack {
            assert!((0.0..=1.0).contains(&a.accuracy));
        }
    }

    #[test]
    fn no_attacks_is_an_error() {
        let (model, xs, ys) = tiny_model_and_data();
        assert!(matches!(
            evaluate_robustness(&model, &xs, &ys, &[], "m", "d", 9, 100),
            Err(HarnessError::NoAttacks)
        ));
    }
}
