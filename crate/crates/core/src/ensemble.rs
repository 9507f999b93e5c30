//! Combining independently initialized networks by averaging their class
//! posteriors.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::Model;
use crate::solvers::{Posteriors, SolverKind};

/// Entrywise mean of posterior matrices, summed in list order.
pub fn combine_posteriors(per_member: &[Posteriors]) -> Result<Posteriors> {
    let first = per_member
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot combine an empty list of posteriors".into()))?;
    let shape = first.matrix().shape();
    let mut sum = Matrix::zeros(shape.0, shape.1);
    for p in per_member {
        if p.matrix().shape() != shape {
            return Err(Error::DimensionMismatch {
                op: "combine_posteriors",
                lhs: shape,
                rhs: p.matrix().shape(),
            });
        }
        for (s, v) in sum.as_mut_slice().iter_mut().zip(p.matrix().as_slice()) {
            *s += v;
        }
    }
    if per_member.len() == 1 {
        return Ok(first.clone());
    }
    let e = per_member.len() as f64;
    sum.map_in_place(|v| v / e);
    Posteriors::new(sum)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleOptions {
    /// Admit PI members, whose softmaxed scores are not posteriors of a
    /// fitted probability model.
    pub allow_pi: bool,
    /// Reject members that share a hidden-layer seed.
    pub require_distinct_seeds: bool,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions {
            allow_pi: false,
            require_distinct_seeds: true,
        }
    }
}

/// Networks whose averaged posteriors form one classifier.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    members: Vec<Model>,
}

impl EnsembleModel {
    pub fn new(members: Vec<Model>) -> Result<Self> {
        Self::with_options(members, EnsembleOptions::default())
    }

    pub fn with_options(members: Vec<Model>, opts: EnsembleOptions) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidArgument("an ensemble needs at least one member".into()))?;
        let (n, l) = (first.num_classes(), first.num_inputs());
        let mut seeds = HashSet::new();
        for (i, m) in members.iter().enumerate() {
            if m.num_classes() != n || m.num_inputs() != l {
                return Err(Error::InvalidArgument(format!(
                    "member {i} has {} classes / {} inputs, expected {n} / {l}",
                    m.num_classes(),
                    m.num_inputs()
                )));
            }
            if m.kind() == SolverKind::Pi && !opts.allow_pi {
                return Err(Error::InvalidArgument(format!(
                    "member {i} uses PI weights; enable allow_pi to ensemble them"
                )));
            }
            if opts.require_distinct_seeds && !seeds.insert(m.layer.seed()) {
                return Err(Error::InvalidArgument(format!(
                    "member {i} repeats hidden-layer seed {}",
                    m.layer.seed()
                )));
            }
        }
        Ok(EnsembleModel { members })
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.members[0].num_classes()
    }

    pub fn num_inputs(&self) -> usize {
        self.members[0].num_inputs()
    }

    /// Writes each member as `<stem>-<i>.elmw` next to `manifest` and the
    /// manifest itself, with member paths relative to its directory.
    pub fn save(&self, manifest: impl AsRef<Path>) -> Result<()> {
        let manifest = manifest.as_ref();
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("member");
        let mut paths = Vec::with_capacity(self.members.len());
        for (i, m) in self.members.iter().enumerate() {
            let name = format!("{stem}-{i}.elmw");
            m.save(dir.join(&name))?;
            paths.push(PathBuf::from(name));
        }
        let doc = EnsembleManifest {
            version: 1,
            num_classes: self.num_classes(),
            num_inputs: self.num_inputs(),
            combine: "mean-posterior".into(),
            members: paths,
        };
        let json = serde_json::to_string_pretty(&doc).expect("manifest serializes");
        std::fs::write(manifest, json + "\n").map_err(|e| Error::io(manifest, e))
    }

    /// Loads a manifest and its member weight files.
    pub fn load(manifest: impl AsRef<Path>, opts: EnsembleOptions) -> Result<Self> {
        let manifest = manifest.as_ref();
        let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let doc: EnsembleManifest = serde_json::from_str(&text).map_err(|e| Error::format(manifest, e.to_string()))?;
        if doc.version != 1 {
            return Err(Error::format(
                manifest,
                format!("unsupported manifest version {}", doc.version),
            ));
        }
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let members = doc
            .members
            .iter()
            .map(|p| Model::load(if p.is_absolute() { p.clone() } else { dir.join(p) }))
            .collect::<Result<Vec<_>>>()?;
        let model = Self::with_options(members, opts)?;
        if model.num_classes() != doc.num_classes || model.num_inputs() != doc.num_inputs {
            return Err(Error::format(manifest, "member shapes disagree with the manifest"));
        }
        Ok(model)
    }
}

/// On-disk description of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub version: u32,
    pub num_classes: usize,
    pub num_inputs: usize,
    /// Always `"mean-posterior"`.
    pub combine: String,
    pub members: Vec<PathBuf>,
}

/// Averages member posteriors for raw inputs `x` and picks the most probable
/// class per column.
pub fn ensemble_predict(model: &EnsembleModel, x: &Matrix) -> Result<(Posteriors, Vec<usize>)> {
    if x.rows() != model.num_inputs() {
        return Err(Error::DimensionMismatch {
            op: "ensemble_predict",
            lhs: (model.num_inputs(), 0),
            rhs: x.shape(),
        });
    }
    let per_member = model
        .members
        .iter()
        .map(|m| m.posteriors(x))
        .collect::<Result<Vec<_>>>()?;
    let combined = combine_posteriors(&per_member)?;
    let labels = combined.classify();
    Ok((combined, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_gaussian, Dataset, Preprocess};
    use crate::hidden::{ActivationKind, HiddenLayer};
    use crate::solvers::{build_targets, class_stats, posteriors, solve_lda, solve_pi, PriorsPolicy, Scores};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn post(rows: &[&[f64]]) -> Posteriors {
        Posteriors::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn task(seed: u64, k: usize) -> Dataset {
        let means = vec![vec![0.0, 0.0], vec![1.5, 0.5], vec![0.5, 1.5]];
        let cov = Matrix::from_rows(&[[1.0, 0.3], [0.3, 0.8]]).unwrap();
        synth_gaussian(&means, &cov, &[0.3, 0.3, 0.4], k, seed).unwrap()
    }

    fn lda_member(train: &Dataset, seed: u64) -> Model {
        let layer = HiddenLayer::init(2, 4, -0.5, 0.5, ActivationKind::Sigmoid, seed).unwrap();
        let a = layer.forward(train.x()).unwrap();
        let s = class_stats(&a, train.labels(), 3, &PriorsPolicy::Empirical).unwrap();
        Model::new(Preprocess::None, layer, solve_lda(&s, 0.0).unwrap()).unwrap()
    }

    #[test]
    fn combine_examples() {
        let p = post(&[&[0.2, 1.0], &[0.8, 0.0]]);
        assert_eq!(combine_posteriors(std::slice::from_ref(&p)).unwrap(), p);
        let a = post(&[&[1.0], &[0.0]]);
        let b = post(&[&[0.0], &[1.0]]);
        assert_eq!(combine_posteriors(&[a, b]).unwrap().matrix().column(0), vec![0.5, 0.5]);
    }

    #[test]
    fn combine_errors() {
        assert!(combine_posteriors(&[]).is_err());
        let a = post(&[&[1.0], &[0.0]]);
        let b = post(&[&[1.0, 0.5], &[0.0, 0.5]]);
        assert!(matches!(
            combine_posteriors(&[a, b]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn single_member_is_the_model() {
        let train = task(1, 400);
        let test = task(2, 200);
        let m = lda_member(&train, 10);
        let ens = EnsembleModel::new(vec![m.clone()]).unwrap();
        let (p, labels) = ensemble_predict(&ens, test.x()).unwrap();
        assert_eq!(p, m.posteriors(test.x()).unwrap());
        assert_eq!(labels, m.predict(test.x()).unwrap());
    }

    #[test]
    fn duplicate_members_change_nothing() {
        let train = task(3, 400);
        let test = task(4, 200);
        let m = lda_member(&train, 11);
        let opts = EnsembleOptions {
            require_distinct_seeds: false,
            ..Default::default()
        };
        let ens = EnsembleModel::with_options(vec![m.clone(), m.clone()], opts).unwrap();
        let (p, _) = ensemble_predict(&ens, test.x()).unwrap();
        let single = m.posteriors(test.x()).unwrap();
        assert!(p.matrix().sub(single.matrix()).unwrap().max_abs() < 1e-15);
        assert!(EnsembleModel::new(vec![m.clone(), m]).is_err());
    }

    #[test]
    fn pi_members_gated() {
        let train = task(5, 300);
        let layer = HiddenLayer::init(2, 4, -0.5, 0.5, ActivationKind::Sigmoid, 12).unwrap();
        let a = layer.forward(train.x()).unwrap();
        let w = solve_pi(&a, &build_targets(train.labels(), 3).unwrap(), 0.0).unwrap();
        let pi = Model::new(Preprocess::None, layer, w).unwrap();
        assert!(EnsembleModel::new(vec![pi.clone()]).is_err());
        let opts = EnsembleOptions {
            allow_pi: true,
            ..Default::default()
        };
        assert!(EnsembleModel::with_options(vec![pi], opts).is_ok());
    }

    #[test]
    fn heterogeneous_members_rejected() {
        let train = task(6, 300);
        let m = lda_member(&train, 13);
        let other_layer = HiddenLayer::init(2, 4, -0.5, 0.5, ActivationKind::Sigmoid, 14).unwrap();
        let a = other_layer.forward(train.x()).unwrap();
        let labels: Vec<usize> = train.labels().iter().map(|&l| l.min(1)).collect();
        let s = class_stats(&a, &labels, 2, &PriorsPolicy::Empirical).unwrap();
        let two_class = Model::new(Preprocess::None, other_layer, solve_lda(&s, 0.0).unwrap()).unwrap();
        assert!(EnsembleModel::new(vec![m, two_class]).is_err());
        assert!(EnsembleModel::new(vec![]).is_err());
    }

    #[test]
    fn five_members_beat_average_single() {
        let train = task(7, 600);
        let test = task(8, 4000);
        let err = |pred: &[usize]| pred.iter().zip(test.labels()).filter(|(a, b)| a != b).count() as f64;
        let mut ens_errors = 0.0;
        let mut single_errors = 0.0;
        for rep in 0..10u64 {
            let members: Vec<Model> = (0..5).map(|j| lda_member(&train, 100 * rep + j)).collect();
            single_errors += members.iter().map(|m| err(&m.predict(test.x()).unwrap())).sum::<f64>() / 5.0;
            let ens = EnsembleModel::new(members).unwrap();
            ens_errors += err(&ensemble_predict(&ens, test.x()).unwrap().1);
        }
        assert!(
            ens_errors <= single_errors,
            "ensemble {ens_errors} vs single {single_errors}"
        );
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let train = task(9, 300);
        let test = task(10, 50);
        let ens = EnsembleModel::new(vec![lda_member(&train, 1), lda_member(&train, 2)]).unwrap();
        let path = dir.path().join("ens.json");
        ens.save(&path).unwrap();
        assert!(dir.path().join("ens-1.elmw").is_file());
        let back = EnsembleModel::load(&path, EnsembleOptions::default()).unwrap();
        assert_eq!(
            ensemble_predict(&back, test.x()).unwrap().0,
            ensemble_predict(&ens, test.x()).unwrap().0
        );
    }

    fn random_posteriors(n: usize, k: usize, seed: u64) -> Posteriors {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        posteriors(&Scores::new(Matrix::from_fn(n, k, |_, _| rng.random_range(-8.0..8.0))))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn averaging_stays_on_simplex(e in 1usize..8, n in 1usize..12, k in 1usize..10, seed in any::<u64>()) {
            let members: Vec<Posteriors> = (0..e as u64).map(|i| random_posteriors(n, k, seed ^ i)).collect();
            let c = combine_posteriors(&members).unwrap();
            for j in 0..k {
                let col = c.matrix().column(j);
                prop_assert!(col.iter().all(|&v| v >= 0.0));
                prop_assert!((col.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn member_order_only_reassociates(seed in any::<u64>()) {
            let members: Vec<Posteriors> = (0..4u64).map(|i| random_posteriors(5, 6, seed ^ i)).collect();
            let mut rev = members.clone();
            rev.reverse();
            let a = combine_posteriors(&members).unwrap();
            let b = combine_posteriors(&rev).unwrap();
            prop_assert!(a.matrix().sub(b.matrix()).unwrap().max_abs() <= 1e-15);
            prop_assert_eq!(combine_posteriors(&members).unwrap(), a);
        }
    }
}
