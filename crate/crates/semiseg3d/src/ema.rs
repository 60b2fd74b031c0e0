//! EMA teacher: an exponential moving average of the student parameters
//! that generates binarized pseudo-labels for unlabeled volumes.

use crate::augment::SpatialTransform;
use crate::error::{Result, SegError};
use crate::network::SegmentationModel;
use crate::volume::{MaskTensor, Volume};

#[derive(Debug, Clone)]
pub struct TeacherState {
    /// EMA parameters wrapped in the student architecture for inference.
    pub model: SegmentationModel,
    /// Smoothing factor: `ema <- mu * ema + (1 - mu) * student`.
    pub mu: f64,
    /// Pseudo-label binarization cutoff (strict greater-than).
    pub threshold: f64,
}

impl TeacherState {
    /// Deep-copies the student parameters (`ema_0 := theta_0`).
    pub fn init(student: &SegmentationModel, mu: f64, threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(SegError::InvalidConfig(format!("mu {mu} outside [0, 1]")));
        }
        if !(0.0 < threshold && threshold < 1.0) {
            return Err(SegError::InvalidConfig(format!(
                "threshold {threshold} outside (0, 1)"
            )));
        }
        Ok(TeacherState {
            model: student.clone(),
            mu,
            threshold,
        })
    }

    /// Element-wise EMA update; never propagates gradients (the teacher
    /// parameters live outside any differentiation path).
    pub fn update(&mut self, student: &SegmentationModel) -> Result<()> {
        self.model.params.congruent(&student.params)?;
        let mu = self.mu;
        let names: Vec<String> = self
            .model
            .params
            .entries()
            .iter()
            .map(|e| e.name.clone())
            .collect();
        for name in names {
            let s = student.params.get(&name).to_vec();
            let e = self.model.params.get_mut(&name);
            for (ev, sv) in e.iter_mut().zip(s.iter()) {
                *ev = (mu * *ev as f64 + (1.0 - mu) * *sv as f64) as f32;
            }
        }
        Ok(())
    }

    /// Teacher forward on the untransformed volume, replayed transform,
    /// then strict binarization. The result carries no gradient.
    pub fn predict_pseudo_label(
        &self,
        x_u: &Volume,
        transform: &SpatialTransform,
    ) -> Result<MaskTensor> {
        let pred = self.model.predict_one(x_u)?;
        pseudo_label_from_prediction(&pred, transform, self.threshold)
    }

    pub fn fingerprint(&self) -> u64 {
        self.model.params.bit_fingerprint()
    }
}

/// `binarize(transform(prediction))` with the strict `> threshold` rule.
pub fn pseudo_label_from_prediction(
    pred: &MaskTensor,
    transform: &SpatialTransform,
    threshold: f64,
) -> Result<MaskTensor> {
    Ok(transform.apply_mask(pred)?.binarize(threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::{invert, sample_transform};
    use crate::network::{build_model, NetworkConfig};
    use crate::volume::Dims;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model(seed: u64) -> SegmentationModel {
        let cfg = NetworkConfig {
            num_classes: 2,
            class_names: vec!["a".into(), "b".into()],
            stage_channels: vec![2, 3],
            bottleneck_dim: 3,
            head_channels: 2,
            input_size: 8,
            ..NetworkConfig::default()
        };
        build_model(&cfg, seed).unwrap()
    }

    fn random_volume(seed: u64, n: usize) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::new(
            Dims::cubic(n),
            (0..n * n * n).map(|_| rng.random_range(0.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_a_deep_copy() {
        let mut student = tiny_model(1);
        let teacher = TeacherState::init(&student, 0.95, 0.5).unwrap();
        assert_eq!(teacher.mu, 0.95);
        let v = random_volume(2, 8);
        let before = teacher.model.predict_one(&v).unwrap();
        let student_pred = student.predict_one(&v).unwrap();
        assert_eq!(before.values, student_pred.values);

        let fp = teacher.fingerprint();
        student.params.get_mut("enc0.weight")[0] += 1.0;
        assert_eq!(teacher.fingerprint(), fp, "teacher mutated with student");
        let after = teacher.model.predict_one(&v).unwrap();
        assert_eq!(after.values, before.values);
    }

    #[test]
    fn mu_zero_copies_and_mu_one_freezes() {
        let student = tiny_model(3);
        let other = tiny_model(4);

        let mut t0 = TeacherState::init(&other, 0.0, 0.5).unwrap();
        t0.update(&student).unwrap();
        assert_eq!(t0.fingerprint(), student.params.bit_fingerprint());

        let mut t1 = TeacherState::init(&other, 1.0, 0.5).unwrap();
        let fp = t1.fingerprint();
        t1.update(&student).unwrap();
        assert_eq!(t1.fingerprint(), fp);
    }

    #[test]
    fn constant_student_gives_geometric_decay() {
        let start = tiny_model(5);
        let target = tiny_model(6);
        let mu = 0.95f64;
        let mut teacher = TeacherState::init(&start, mu, 0.5).unwrap();
        let dist = |t: &TeacherState| -> f64 {
            let mut acc = 0.0f64;
            for e in t.model.params.entries() {
                let s = target.params.get(&e.name);
                for (a, b) in e.data.iter().zip(s.iter()) {
                    let d = *a as f64 - *b as f64;
                    acc += d * d;
                }
            }
            acc.sqrt()
        };
        let d0 = dist(&teacher);
        assert!(d0 > 0.0);
        let k = 10;
        for _ in 0..k {
            teacher.update(&target).unwrap();
        }
        let dk = dist(&teacher);
        let expected = mu.powi(k) * d0;
        assert!(
            (dk - expected).abs() / expected < 1e-6,
            "|ema_k - theta*| = {dk}, expected mu^{k} * d0 = {expected}"
        );
    }

    #[test]
    fn update_rejects_structure_mismatch() {
        let student = tiny_model(7);
        let mut teacher = TeacherState::init(&student, 0.95, 0.5).unwrap();
        let other_cfg = NetworkConfig {
            input_size: 8,
            stage_channels: vec![2],
            ..NetworkConfig::default()
        };
        let other = build_model(&other_cfg, 0).unwrap();
        assert!(teacher.update(&other).is_err());
    }

    #[test]
    fn invalid_mu_or_threshold_rejected() {
        let student = tiny_model(8);
        assert!(TeacherState::init(&student, 1.5, 0.5).is_err());
        assert!(TeacherState::init(&student, 0.5, 0.0).is_err());
        assert!(TeacherState::init(&student, 0.5, 1.0).is_err());
    }

    #[test]
    fn pseudo_label_examples() {
        let dims = Dims::cubic(2);
        let id = SpatialTransform::identity();
        let high = MaskTensor::new(vec!["a".into()], dims, vec![0.9; 8], false).unwrap();
        let y = pseudo_label_from_prediction(&high, &id, 0.5).unwrap();
        assert!(y.binary);
        assert!(y.values.iter().all(|&v| v == 1.0));

        // Exactly at the threshold: strict rule maps to zero.
        let tie = MaskTensor::new(vec!["a".into()], dims, vec![0.5; 8], false).unwrap();
        let y = pseudo_label_from_prediction(&tie, &id, 0.5).unwrap();
        assert!(y.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binarize_commutes_with_exact_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..200u64 {
            let t = sample_transform(seed);
            let dims = Dims::cubic(3);
            let values: Vec<f64> = (0..27).map(|_| rng.random_range(0.0..1.0)).collect();
            let m = MaskTensor::new(vec!["a".into()], dims, values, false).unwrap();
            let a = t.apply_mask(&m).unwrap().binarize(0.5);
            let b = t.apply_mask(&m.binarize(0.5)).unwrap();
            assert_eq!(a.values, b.values, "seed {seed}");
            // And the pseudo-label inverts cleanly.
            let back = invert(&t).apply_mask(&a).unwrap();
            assert_eq!(
                back.values,
                m.binarize(0.5).values,
                "inverse mismatch at seed {seed}"
            );
        }
    }
}
