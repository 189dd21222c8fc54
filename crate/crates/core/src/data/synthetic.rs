//! Seeded synthetic multi-view action dataset.
//!
//! Each class owns a latent trajectory: a mean vector plus per-dimension
//! sinusoids with a class-specific frequency and phases. A subject scales
//! and shifts the trajectory. View `v` observes `Q_v z` for a fixed random
//! orthogonal `Q_v`; its RGB patches are fixed positive masks of that
//! observation (averaging back to `Q_v z`) and its skeleton stream is
//! `S Q_v z` sampled at twice the RGB frame rate. Gaussian noise is added to
//! every observed value.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::format::{quantize, write_feature_file};
use super::{Dataset, Manifest, Sample, SampleRecord, ViewFiles, MANIFEST_VERSION};
use crate::error::{Error, Result};
use crate::fusion::align_tokens;
use crate::rng::{seeded, Rng64};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub views: usize,
    pub steps: usize,
    pub n_patches: usize,
    pub d_rgb: usize,
    pub d_sk: usize,
    pub n_classes: usize,
    pub n_subjects: usize,
    pub samples_per_class: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            views: 3,
            steps: 8,
            n_patches: 4,
            d_rgb: 32,
            d_sk: 24,
            n_classes: 10,
            n_subjects: 10,
            samples_per_class: 200,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("data.views", self.views),
            ("data.steps", self.steps),
            ("data.n_patches", self.n_patches),
            ("data.d_rgb", self.d_rgb),
            ("data.d_sk", self.d_sk),
            ("data.n_subjects", self.n_subjects),
            ("data.samples_per_class", self.samples_per_class),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::config(format!("{name} must be at least 1")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::config("data.n_classes must be at least 2"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(format!(
                "data.noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn skeleton_steps(&self) -> usize {
        2 * self.steps
    }

    pub fn len(&self) -> usize {
        self.n_classes * self.samples_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Spread of class mean vectors.
const CLASS_MEAN_SCALE: f64 = 1.0;
/// Subject gain is drawn from `1 ± SUBJECT_GAIN`.
const SUBJECT_GAIN: f64 = 0.15;
const SUBJECT_OFFSET: f64 = 0.15;
/// Per-sample phase jitter, radians.
const PHASE_JITTER: f64 = 0.4;

fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix's rows.
fn orthogonal(d: usize, rng: &mut Rng64) -> Tensor {
    loop {
        let g = normal_tensor(&[d, d], 1.0, rng);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut ok = true;
        for i in 0..d {
            let mut r = g.row(i).to_vec();
            for q in &rows {
                let proj: f64 = r.iter().zip(q).map(|(a, b)| a * b).sum();
                r.iter_mut().zip(q).for_each(|(a, b)| *a -= proj * b);
            }
            let norm = r.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            r.iter_mut().for_each(|a| *a /= norm);
            rows.push(r);
        }
        if ok {
            return Tensor::from_rows(&rows).expect("square");
        }
    }
}

/// Raw `f64` features of one sample.
#[derive(Clone, Debug)]
pub struct RawSample {
    pub id: usize,
    pub label: usize,
    pub subject: usize,
    /// Latent trajectory `[2T, D_rgb]`.
    pub latent: Tensor,
    /// Per view `[T, N_p, D_rgb]`.
    pub rgb: Vec<Tensor>,
    /// Per view `[2T, D_sk]`.
    pub skeleton: Vec<Tensor>,
}

/// Fixed generative parameters of a synthetic dataset.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    spec: SyntheticSpec,
    class_means: Vec<Vec<f64>>,
    class_freqs: Vec<f64>,
    class_phases: Vec<Vec<f64>>,
    subject_gain: Vec<f64>,
    subject_offset: Vec<Vec<f64>>,
    view_maps: Vec<Tensor>,
    patch_masks: Vec<Tensor>,
    skeleton_map: Tensor,
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticSpec, rng: &mut Rng64) -> Result<Self> {
        spec.validate()?;
        let d = spec.d_rgb;
        let mean = Normal::new(0.0, CLASS_MEAN_SCALE).expect("positive scale");
        let class_means = (0..spec.n_classes)
            .map(|_| (0..d).map(|_| mean.sample(rng)).collect())
            .collect();
        let class_freqs = (0..spec.n_classes).map(|c| 0.5 + 0.25 * (c % 5) as f64).collect();
        let class_phases = (0..spec.n_classes)
            .map(|_| (0..d).map(|_| rng.random_range(0.0..TAU)).collect())
            .collect();
        let subject_gain = (0..spec.n_subjects)
            .map(|_| 1.0 + rng.random_range(-SUBJECT_GAIN..=SUBJECT_GAIN))
            .collect();
        let offset = Normal::new(0.0, SUBJECT_OFFSET).expect("positive scale");
        let subject_offset = (0..spec.n_subjects)
            .map(|_| (0..d).map(|_| offset.sample(rng)).collect())
            .collect();
        let view_maps = (0..spec.views).map(|_| orthogonal(d, rng)).collect();
        let patch_masks = (0..spec.views)
            .map(|_| {
                let np = spec.n_patches;
                let mut m: Vec<f64> = (0..np * d).map(|_| rng.random_range(0.5..1.5)).collect();
                for j in 0..d {
                    let col_mean = (0..np).map(|p| m[p * d + j]).sum::<f64>() / np as f64;
                    (0..np).for_each(|p| m[p * d + j] /= col_mean);
                }
                Tensor::new(vec![np, d], m).expect("shape matches data")
            })
            .collect();
        let skeleton_map = normal_tensor(&[d, spec.d_sk], 1.0 / (d as f64).sqrt(), rng);
        Ok(Self {
            spec: spec.clone(),
            class_means,
            class_freqs,
            class_phases,
            subject_gain,
            subject_offset,
            view_maps,
            patch_masks,
            skeleton_map,
        })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    /// Orthogonal map `Q_v` stored row-major as `[D_rgb, D_rgb]`; observations
    /// are row vectors `x = z Q_vᵀ`, so `z = x Q_v`.
    pub fn view_map(&self, view: usize) -> &Tensor {
        &self.view_maps[view]
    }

    pub fn render(&self, id: usize, label: usize, subject: usize, rng: &mut Rng64) -> RawSample {
        let s = &self.spec;
        let (d, tsk, np) = (s.d_rgb, s.skeleton_steps(), s.n_patches);
        let jitter = rng.random_range(-PHASE_JITTER..=PHASE_JITTER);
        let gain = self.subject_gain[subject];
        let mut latent = Vec::with_capacity(tsk * d);
        for tau in 0..tsk {
            let angle = TAU * self.class_freqs[label] * tau as f64 / tsk as f64 + jitter;
            for j in 0..d {
                let base = self.class_means[label][j] + (angle + self.class_phases[label][j]).sin();
                latent.push(gain * base + self.subject_offset[subject][j]);
            }
        }
        let latent = Tensor::new(vec![tsk, d], latent).expect("shape matches data");
        let noise = Normal::new(0.0, s.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let mut noisy = |x: f64| if s.noise_sigma > 0.0 { x + noise.sample(rng) } else { x };

        let mut rgb = Vec::with_capacity(s.views);
        let mut skeleton = Vec::with_capacity(s.views);
        for v in 0..s.views {
            let observed = crate::tensor::matmul_nt(&latent, &self.view_maps[v]).expect("widths agree");
            let mask = &self.patch_masks[v];
            let mut frames = Vec::with_capacity(s.steps * np * d);
            for t in 0..s.steps {
                let x = observed.row(2 * t);
                for p in 0..np {
                    frames.extend(x.iter().zip(mask.row(p)).map(|(a, m)| noisy(a * m)));
                }
            }
            rgb.push(Tensor::new(vec![s.steps, np, d], frames).expect("shape matches data"));
            let sk = observed.matmul(&self.skeleton_map).expect("widths agree");
            let sk_data = sk.data().iter().map(|&x| noisy(x)).collect();
            skeleton.push(Tensor::new(sk.shape().to_vec(), sk_data).expect("shape matches data"));
        }
        RawSample {
            id,
            label,
            subject,
            latent,
            rgb,
            skeleton,
        }
    }
}

/// Builds the world and every sample from one PRNG seeded with `spec.seed`.
///
/// Sample `id = label * samples_per_class + k` belongs to subject
/// `k % n_subjects`.
pub fn generate_raw(spec: &SyntheticSpec) -> Result<(SyntheticWorld, Vec<RawSample>)> {
    let mut rng = seeded(spec.seed);
    let world = SyntheticWorld::new(spec, &mut rng)?;
    let mut samples = Vec::with_capacity(spec.len());
    for label in 0..spec.n_classes {
        for k in 0..spec.samples_per_class {
            let id = label * spec.samples_per_class + k;
            samples.push(world.render(id, label, k % spec.n_subjects, &mut rng));
        }
    }
    Ok((world, samples))
}

fn to_sample(raw: &RawSample) -> Result<Sample> {
    let views = raw
        .rgb
        .iter()
        .zip(&raw.skeleton)
        .map(|(rgb, sk)| align_tokens(&quantize(sk), &quantize(rgb)))
        .collect::<Result<_>>()?;
    Ok(Sample {
        id: raw.id,
        label: raw.label,
        subject: raw.subject,
        views,
    })
}

/// In-memory dataset, identical to what [`generate_synthetic`] writes and
/// [`super::load_dataset`] reads back.
pub fn generate_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let (_, raw) = generate_raw(spec)?;
    let samples = raw.iter().map(to_sample).collect::<Result<_>>()?;
    Ok(Dataset {
        views: spec.views,
        steps: spec.steps,
        n_classes: spec.n_classes,
        samples,
    })
}

/// Writes feature files under `out/features/` and `out/manifest.json`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Manifest> {
    let (_, raw) = generate_raw(spec)?;
    let features = out.join("features");
    fs::create_dir_all(&features)?;
    let mut records = Vec::with_capacity(raw.len());
    for s in &raw {
        let mut views = Vec::with_capacity(s.rgb.len());
        for (v, (rgb, sk)) in s.rgb.iter().zip(&s.skeleton).enumerate() {
            let files = ViewFiles {
                rgb: format!("features/{:06}_v{v}_rgb.mvgf", s.id),
                sk: format!("features/{:06}_v{v}_sk.mvgf", s.id),
            };
            write_feature_file(&out.join(&files.rgb), rgb)?;
            write_feature_file(&out.join(&files.sk), sk)?;
            views.push(files);
        }
        records.push(SampleRecord {
            id: s.id,
            label: s.label,
            subject: s.subject,
            views,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        spec: spec.clone(),
        samples: records,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{group_mean_rows, mean_rows};

    fn small(sigma: f64, classes: usize) -> SyntheticSpec {
        SyntheticSpec {
            n_classes: classes,
            n_subjects: 4,
            samples_per_class: 24,
            noise_sigma: sigma,
            seed: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn orthogonal_maps() {
        let q = orthogonal(6, &mut seeded(1));
        let qqt = crate::tensor::matmul_nt(&q, &q).unwrap();
        assert!(qqt.max_abs_diff(&Tensor::eye(6)) < 1e-12);
    }

    #[test]
    fn unmixing_recovers_shared_latent() {
        let (world, raw) = generate_raw(&small(0.0, 3)).unwrap();
        for s in raw.iter().take(5) {
            let np = world.spec().n_patches;
            let d = world.spec().d_rgb;
            let mut recovered = Vec::new();
            for v in 0..world.spec().views {
                let frames = s.rgb[v].clone().reshape(&[world.spec().steps * np, d]).unwrap();
                let mean_patch = group_mean_rows(&frames, np).unwrap();
                recovered.push(mean_patch.matmul(world.view_map(v)).unwrap());
            }
            assert!(recovered[1].max_abs_diff(&recovered[0]) < 1e-6);
            let even: Vec<usize> = (0..world.spec().steps).map(|t| 2 * t).collect();
            let z = crate::tensor::gather_rows(&s.latent, &even).unwrap();
            assert!(recovered[0].max_abs_diff(&z) < 1e-6);
        }
    }

    #[test]
    fn noiseless_classes_are_separable_by_centroids() {
        let spec = small(0.0, 2);
        let data = generate_dataset(&spec).unwrap();
        let feature = |s: &Sample| -> Vec<f64> {
            s.views
                .iter()
                .flat_map(|v| v.patches.data().iter().chain(v.skeleton.data()).copied())
                .collect()
        };
        // Centroids from subjects 0..3, evaluated on subject 3.
        let (train, test): (Vec<&Sample>, Vec<&Sample>) = data.samples.iter().partition(|s| s.subject < 3);
        let centroids: Vec<Vec<f64>> = (0..2)
            .map(|c| {
                let members: Vec<Vec<f64>> = train.iter().filter(|s| s.label == c).map(|s| feature(s)).collect();
                let n = members.len() as f64;
                (0..members[0].len())
                    .map(|j| members.iter().map(|m| m[j]).sum::<f64>() / n)
                    .collect()
            })
            .collect();
        for s in test {
            let f = feature(s);
            let dist = |c: &Vec<f64>| f.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let pred = if dist(&centroids[0]) <= dist(&centroids[1]) {
                0
            } else {
                1
            };
            assert_eq!(pred, s.label);
        }
    }

    #[test]
    fn noiseless_linear_probe_fits_four_classes() {
        let spec = small(0.0, 4);
        let data = generate_dataset(&spec).unwrap();
        // GAP over frames of the mean patch and skeleton token, per view.
        let xs: Vec<Vec<f64>> = data
            .samples
            .iter()
            .map(|s| {
                let mut f = Vec::new();
                for v in &s.views {
                    f.extend_from_slice(mean_rows(&v.patches).unwrap().data());
                    f.extend_from_slice(mean_rows(&v.skeleton).unwrap().data());
                }
                f.push(1.0);
                f
            })
            .collect();
        let (n, d, c) = (xs.len(), xs[0].len(), 4);
        let mut w = vec![0.0; d * c];
        for _ in 0..1500 {
            let mut g = vec![0.0; d * c];
            for (x, s) in xs.iter().zip(&data.samples) {
                let mut z: Vec<f64> = (0..c).map(|k| (0..d).map(|j| x[j] * w[j * c + k]).sum()).collect();
                crate::tensor::softmax_in_place(&mut z);
                z[s.label] -= 1.0;
                for j in 0..d {
                    for k in 0..c {
                        g[j * c + k] += x[j] * z[k] / n as f64;
                    }
                }
            }
            w.iter_mut().zip(&g).for_each(|(a, b)| *a -= 0.5 * b);
        }
        let correct = xs
            .iter()
            .zip(&data.samples)
            .filter(|(x, s)| {
                let z: Vec<f64> = (0..c).map(|k| (0..d).map(|j| x[j] * w[j * c + k]).sum()).collect();
                let best = (0..c).fold(0, |b, k| if z[k] > z[b] { k } else { b });
                best == s.label
            })
            .count();
        assert!(correct as f64 / n as f64 >= 0.99, "{correct}/{n}");
    }

    #[test]
    fn shapes_and_determinism() {
        let spec = small(0.3, 3);
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a.samples.len(), 72);
        assert_eq!(a.samples, b.samples);
        let v = &a.samples[0].views[0];
        assert_eq!(v.patches.shape(), &[8 * 4, 32]);
        assert_eq!(v.skeleton.shape(), &[8, 24]);
        let c = generate_dataset(&SyntheticSpec { seed: 4, ..spec }).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn spec_validation() {
        assert!(SyntheticSpec {
            noise_sigma: -1.0,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            n_classes: 1,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            views: 0,
            ..SyntheticSpec::default()
        }
        .validate()
        .is_err());
    }
}
