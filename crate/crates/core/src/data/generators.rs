use std::collections::BTreeMap;

use super::{Manifest, MultiTaskDataset, Prng, Regime, Sample, TaskInfo};
use crate::error::{Error, Result};
use crate::models::LossKind;

/// Two tasks over a shared Gaussian latent `z ~ N(0, I_d)` (the input):
///
/// * `cls`: `classes`-way angular sector of `z` projected on a random
///   2-plane, with projection noise `label_noise`. Sectors of an isotropic
///   Gaussian are equiprobable, so classes are balanced in expectation.
/// * `reg`: `scale * (v . z + offset) + scale * target_noise * eps`.
///
/// With the default `scale = 100` the regression L1 loss sits two orders
/// of magnitude above the classification cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleClashParams {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub classes: usize,
    pub label_noise: f64,
    pub scale: f64,
    pub offset: f64,
    pub target_noise: f64,
}

impl ScaleClashParams {
    pub fn new(n: usize, d: usize, seed: u64) -> Self {
        Self {
            n,
            d,
            seed,
            classes: 4,
            label_noise: 0.1,
            scale: 100.0,
            offset: 0.5,
            target_noise: 0.05,
        }
    }

    fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("n", self.n.to_string()),
            ("d", self.d.to_string()),
            ("classes", self.classes.to_string()),
            ("label_noise", format!("{:?}", self.label_noise)),
            ("scale", format!("{:?}", self.scale)),
            ("offset", format!("{:?}", self.offset)),
            ("target_noise", format!("{:?}", self.target_noise)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

fn unit(rng: &mut Prng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn gen_scale_clash(p: &ScaleClashParams) -> Result<MultiTaskDataset> {
    if p.n < 10 || p.d < 2 || p.classes < 2 {
        return Err(Error::InvalidArgument(format!(
            "scale_clash needs n >= 10, d >= 2, classes >= 2 (got n={}, d={}, classes={})",
            p.n, p.d, p.classes
        )));
    }
    let mut rng = Prng::new(p.seed, "gen/scale_clash/rules");
    let u1 = unit(&mut rng, p.d);
    let mut u2 = unit(&mut rng, p.d);
    let c = dot(&u1, &u2);
    u2.iter_mut().zip(&u1).for_each(|(b, a)| *b -= c * a);
    let n2 = dot(&u2, &u2).sqrt();
    u2.iter_mut().for_each(|b| *b /= n2);
    let v = unit(&mut rng, p.d);

    let mut rng = Prng::new(p.seed, "gen/scale_clash/samples");
    let sector = std::f64::consts::TAU / p.classes as f64;
    let samples = (0..p.n)
        .map(|_| {
            let z: Vec<f64> = (0..p.d).map(|_| rng.normal()).collect();
            let s1 = dot(&u1, &z) + p.label_noise * rng.normal();
            let s2 = dot(&u2, &z) + p.label_noise * rng.normal();
            let angle = s2.atan2(s1) + std::f64::consts::PI;
            let class = ((angle / sector) as usize).min(p.classes - 1);
            let y = p.scale * (dot(&v, &z) + p.offset) + p.scale * p.target_noise * rng.normal();
            let labels = BTreeMap::from([
                ("cls".to_string(), vec![class as f64]),
                ("reg".to_string(), vec![y]),
            ]);
            Sample { x: z, labels }
        })
        .collect();
    let manifest = Manifest {
        generator: "scale_clash".into(),
        seed: p.seed,
        params: p.to_map(),
        input_shape: [p.d, 1, 1],
        regime: Regime::MultiLabel,
        tasks: vec![
            TaskInfo {
                id: "cls".into(),
                loss: LossKind::CrossEntropy,
                output_dim: p.classes,
            },
            TaskInfo {
                id: "reg".into(),
                loss: LossKind::L1,
                output_dim: 1,
            },
        ],
    };
    MultiTaskDataset::new(manifest, samples)
}

/// Two classification tasks with disjoint labels over a shared input
/// space: `digits` (`k1` Gaussian clusters, `n1` samples) and `chars`
/// (`k2` clusters, `n2` samples). Classes cycle so every class is present.
#[derive(Debug, Clone, PartialEq)]
pub struct DisjointPairParams {
    pub n1: usize,
    pub n2: usize,
    pub d: usize,
    pub k1: usize,
    pub k2: usize,
    pub seed: u64,
    pub spread: f64,
}

impl DisjointPairParams {
    pub fn new(n1: usize, n2: usize, d: usize, k1: usize, k2: usize, seed: u64) -> Self {
        Self {
            n1,
            n2,
            d,
            k1,
            k2,
            seed,
            spread: 0.35,
        }
    }

    fn to_map(&self) -> BTreeMap<String, String> {
        [
            ("n1", self.n1.to_string()),
            ("n2", self.n2.to_string()),
            ("d", self.d.to_string()),
            ("k1", self.k1.to_string()),
            ("k2", self.k2.to_string()),
            ("spread", format!("{:?}", self.spread)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

pub fn gen_disjoint_pair(p: &DisjointPairParams) -> Result<MultiTaskDataset> {
    if p.k1 < 2 || p.k2 < 2 || p.n1 < p.k1 || p.n2 < p.k2 || p.d < 1 {
        return Err(Error::InvalidArgument(format!(
            "disjoint_pair needs k >= 2 and at least k samples per task (n1={}, k1={}, n2={}, k2={})",
            p.n1, p.k1, p.n2, p.k2
        )));
    }
    let mut samples = Vec::with_capacity(p.n1 + p.n2);
    for (task, n, k) in [("digits", p.n1, p.k1), ("chars", p.n2, p.k2)] {
        let mut rng = Prng::new(p.seed, &format!("gen/disjoint_pair/{task}"));
        let centers: Vec<Vec<f64>> = (0..k).map(|_| (0..p.d).map(|_| rng.normal()).collect()).collect();
        for i in 0..n {
            let class = i % k;
            let x = centers[class].iter().map(|c| c + p.spread * rng.normal()).collect();
            samples.push(Sample {
                x,
                labels: BTreeMap::from([(task.to_string(), vec![class as f64])]),
            });
        }
    }
    let manifest = Manifest {
        generator: "disjoint_pair".into(),
        seed: p.seed,
        params: p.to_map(),
        input_shape: [p.d, 1, 1],
        regime: Regime::DisjointLabel,
        tasks: vec![
            TaskInfo {
                id: "digits".into(),
                loss: LossKind::CrossEntropy,
                output_dim: p.k1,
            },
            TaskInfo {
                id: "chars".into(),
                loss: LossKind::CrossEntropy,
                output_dim: p.k2,
            },
        ],
    };
    MultiTaskDataset::new(manifest, samples)
}

fn param<T: std::str::FromStr>(m: &Manifest, key: &str) -> Result<T> {
    m.params
        .get(key)
        .ok_or_else(|| Error::Format(format!("manifest lacks generator parameter `{key}`")))?
        .parse()
        .map_err(|_| Error::Format(format!("bad generator parameter `{key}`")))
}

/// Rebuilds a generated dataset from its manifest alone.
pub fn regenerate(m: &Manifest) -> Result<MultiTaskDataset> {
    match m.generator.as_str() {
        "scale_clash" => gen_scale_clash(&ScaleClashParams {
            n: param(m, "n")?,
            d: param(m, "d")?,
            seed: m.seed,
            classes: param(m, "classes")?,
            label_noise: param(m, "label_noise")?,
            scale: param(m, "scale")?,
            offset: param(m, "offset")?,
            target_noise: param(m, "target_noise")?,
        }),
        "disjoint_pair" => gen_disjoint_pair(&DisjointPairParams {
            n1: param(m, "n1")?,
            n2: param(m, "n2")?,
            d: param(m, "d")?,
            k1: param(m, "k1")?,
            k2: param(m, "k2")?,
            seed: m.seed,
            spread: param(m, "spread")?,
        }),
        other => Err(Error::Format(format!(
            "unknown generator `{other}` (known: scale_clash, disjoint_pair)"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scale_clash_deterministic() {
        let p = ScaleClashParams::new(50, 4, 17);
        assert_eq!(gen_scale_clash(&p).unwrap(), gen_scale_clash(&p).unwrap());
        let q = ScaleClashParams::new(50, 4, 18);
        assert_ne!(gen_scale_clash(&p).unwrap(), gen_scale_clash(&q).unwrap());
    }

    #[test]
    fn scale_clash_classes_balanced() {
        let ds = gen_scale_clash(&ScaleClashParams::new(2000, 8, 4)).unwrap();
        let k = 4;
        let mut counts = vec![0usize; k];
        for s in ds.samples() {
            counts[s.labels["cls"][0] as usize] += 1;
        }
        for c in counts {
            let freq = c as f64 / 2000.0;
            assert!((0.8 / k as f64..=1.2 / k as f64).contains(&freq), "{freq}");
        }
    }

    #[test]
    fn scale_clash_loss_scales_differ() {
        let ds = gen_scale_clash(&ScaleClashParams::new(500, 8, 1)).unwrap();
        let mean_abs = ds.samples().iter().map(|s| s.labels["reg"][0].abs()).sum::<f64>() / 500.0;
        assert!(mean_abs > 30.0, "{mean_abs}");
    }

    #[test]
    fn disjoint_pair_structure() {
        let ds = gen_disjoint_pair(&DisjointPairParams::new(40, 100, 5, 10, 50, 2)).unwrap();
        assert_eq!(ds.len(), 140);
        assert!(ds.samples().iter().all(|s| s.labels.len() == 1));
        let dims: Vec<_> = ds.manifest().tasks.iter().map(|t| t.output_dim).collect();
        assert_eq!(dims, vec![10, 50]);
        let again = gen_disjoint_pair(&DisjointPairParams::new(40, 100, 5, 10, 50, 2)).unwrap();
        assert_eq!(ds.hash(), again.hash());
    }

    #[test]
    fn regenerate_from_manifest() {
        let ds = gen_scale_clash(&ScaleClashParams::new(30, 3, 9)).unwrap();
        assert_eq!(regenerate(ds.manifest()).unwrap(), ds);
        let dp = gen_disjoint_pair(&DisjointPairParams::new(12, 12, 3, 3, 4, 9)).unwrap();
        assert_eq!(regenerate(dp.manifest()).unwrap(), dp);
    }

    #[test]
    fn bad_parameters() {
        assert!(gen_scale_clash(&ScaleClashParams::new(5, 3, 0)).is_err());
        assert!(gen_scale_clash(&ScaleClashParams::new(50, 1, 0)).is_err());
        assert!(gen_disjoint_pair(&DisjointPairParams::new(3, 10, 2, 5, 2, 0)).is_err());
    }
}
