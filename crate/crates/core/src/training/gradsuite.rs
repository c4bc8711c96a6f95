use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Result;
use crate::embeddings::{rotary_rotation, xpos_rotation, XposConfig};
use crate::fusion::{Modalities, Pooling};
use crate::model::{Batch, Meant, ModelConfig};
use crate::nn::grad_check_params;
use crate::synthetic::{separable_windows, SeparableSpec};
use crate::tensor::{self, grad_check, NormMode, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradSuiteConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Coordinates checked per parameter tensor of each model case; larger
    /// than any tensor means every coordinate.
    pub per_param: usize,
    /// Initialization scale of the model cases. Larger than the training
    /// default, which leaves most gradients near the finite-difference noise
    /// floor, and smaller than scales that saturate the loss.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            per_param: usize::MAX,
            init_std: 0.3,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub name: String,
    pub max_relative_error: f64,
    pub coordinates: usize,
    /// Worst coordinate of a model case: parameter, flat index, analytic and
    /// numeric derivative.
    pub worst: Option<(String, usize, f64, f64)>,
    pub passed: bool,
}

type OpFn = Box<dyn Fn(&mut Tape, Var) -> tensor::Result<Var>>;

fn project(tp: &mut Tape, y: Var, seed: u64) -> tensor::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(tp.shape(y), |_| rng.gen_range(-1.0..1.0));
    let w = tp.constant(w);
    let p = tp.mul(y, w)?;
    Ok(tp.sum(p))
}

fn op_cases(seed: u64) -> Vec<(&'static str, Vec<usize>, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let other = Tensor::from_fn(&[4], |_| rng.gen_range(-1.0..1.0));
    let weight = Tensor::from_fn(&[4, 3], |_| rng.gen_range(-1.0..1.0));
    let (o1, o2, o3, o4) = (other.clone(), other.clone(), other.clone(), other);
    let rot = rotary_rotation(&[0, 1, 2], 4, 10_000.0).expect("even width");
    let xq = xpos_rotation(&[0, 1, 2], 4, &XposConfig::default(), true).expect("even width");
    vec![
        (
            "add",
            vec![2, 3, 4],
            Box::new(move |tp, v| {
                let o = tp.constant(o1.clone());
                let y = tp.add(v, o)?;
                let y = tp.mul(y, y)?;
                project(tp, y, 1)
            }),
        ),
        (
            "sub",
            vec![2, 3, 4],
            Box::new(move |tp, v| {
                let o = tp.constant(o2.clone());
                let y = tp.sub(o, v)?;
                let y = tp.mul(y, y)?;
                project(tp, y, 2)
            }),
        ),
        (
            "mul",
            vec![2, 3, 4],
            Box::new(|tp, v| {
                let y = tp.mul(v, v)?;
                project(tp, y, 3)
            }),
        ),
        (
            "scale",
            vec![2, 3, 4],
            Box::new(|tp, v| {
                let y = tp.scale(v, -1.7);
                project(tp, y, 4)
            }),
        ),
        (
            "gelu",
            vec![2, 3, 4],
            Box::new(|tp, v| {
                let y = tp.gelu(v);
                project(tp, y, 5)
            }),
        ),
        (
            "matmul",
            vec![2, 3, 4],
            Box::new(move |tp, v| {
                let w = tp.constant(weight.clone());
                let y = tp.matmul(v, w)?;
                let t = tp.transpose_last(y)?;
                let y = tp.matmul(t, v)?;
                project(tp, y, 6)
            }),
        ),
        (
            "permute",
            vec![2, 3, 4],
            Box::new(|tp, v| {
                let y = tp.permute(v, &[2, 0, 1])?;
                project(tp, y, 7)
            }),
        ),
        (
            "reshape",
            vec![2, 3, 4],
            Box::new(|tp, v| {
                let y = tp.reshape(v, &[6, 4])?;
                let y = tp.mul(y, y)?;
                project(tp, y, 8)
            }),
        ),
        (
            "concat",
            vec![2, 3, 4],
            Box::new(|tp, v| {
                let y = tp.concat(&[v, v], 2)?;
                project(tp, y, 9)
            }),
        ),
        (
            "narrow",
            vec![2, 3, 4],
            Box::new(|tp, v| {
                let y = tp.narrow(v, 1, 1, 2)?;
                project(tp, y, 10)
            }),
        ),
        (
            "sum",
            vec![2, 3, 4],
            Box::new(|tp, v| {
                let y = tp.mul(v, v)?;
                Ok(tp.sum(y))
            }),
        ),
        (
            "sum_axis",
            vec![2, 3, 4],
            Box::new(|tp, v| {
                let y = tp.sum_axis(v, 1)?;
                let y = tp.mul(y, y)?;
                project(tp, y, 11)
            }),
        ),
        (
            "mean_axis",
            vec![2, 3, 4],
            Box::new(|tp, v| {
                let y = tp.mean_axis(v, 0)?;
                let y = tp.mul(y, y)?;
                project(tp, y, 12)
            }),
        ),
        (
            "softmax",
            vec![2, 3, 4],
            Box::new(|tp, v| {
                let y = tp.softmax(v)?;
                project(tp, y, 13)
            }),
        ),
        (
            "layer_norm_standard",
            vec![2, 3, 4],
            Box::new(move |tp, v| {
                let g = tp.constant(o3.clone());
                let b = tp.constant(Tensor::full(&[4], 0.3));
                let y = tp.layer_norm(v, g, b, NormMode::Standard)?;
                project(tp, y, 14)
            }),
        ),
        (
            "layer_norm_rms",
            vec![2, 3, 4],
            Box::new(move |tp, v| {
                let g = tp.constant(o4.clone());
                let b = tp.constant(Tensor::zeros(&[4]));
                let y = tp.layer_norm(v, g, b, NormMode::Rms)?;
                project(tp, y, 15)
            }),
        ),
        (
            "gather",
            vec![5, 4],
            Box::new(|tp, v| {
                let y = tp.gather(v, &[3, 0, 3, 1, 4, 3], &[2, 3])?;
                project(tp, y, 16)
            }),
        ),
        (
            "rotary",
            vec![2, 3, 4],
            Box::new(move |tp, v| {
                let y = rot.apply(tp, v)?;
                project(tp, y, 17)
            }),
        ),
        (
            "xpos",
            vec![2, 3, 4],
            Box::new(move |tp, v| {
                let y = xq.apply(tp, v)?;
                project(tp, y, 18)
            }),
        ),
        (
            "cross_entropy",
            vec![6, 2],
            Box::new(|tp, v| tp.cross_entropy(v, &[0, 1, 1, 0, 1, 0])),
        ),
    ]
}

/// Model configuration of the gradient cases: `b=1, l=2, s=4, d_l=d_p=8`.
pub fn grad_model_config(pooling: Pooling, modalities: Modalities, init_std: f64, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.fusion.pooling = pooling;
    cfg.fusion.modalities = modalities;
    cfg.init_std = init_std;
    cfg.seed = seed;
    cfg
}

/// Central-difference checks of every differentiable tape op and of the
/// full toy model loss for both pooling variants and every modality subset.
pub fn grad_suite(cfg: &GradSuiteConfig) -> Result<Vec<GradCase>> {
    let mut cases = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for (name, shape, f) in op_cases(cfg.seed) {
        let x = Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0));
        let err = grad_check(|tp, v| f(tp, v), &x, cfg.step)?;
        cases.push(GradCase {
            name: format!("op/{name}"),
            max_relative_error: err,
            coordinates: x.len(),
            worst: None,
            passed: err < cfg.tolerance,
        });
    }

    let spec = SeparableSpec::default();
    let windows = separable_windows(1, &spec, cfg.seed);
    let refs: Vec<_> = windows.iter().collect();
    let stats = crate::dataset::MacdStats::identity();
    for pooling in [Pooling::MeanPool, Pooling::SeqProj] {
        for modalities in Modalities::all_combinations() {
            let mcfg = grad_model_config(pooling, modalities, cfg.init_std, cfg.seed);
            let batch = Batch::from_windows(&refs, &stats, modalities.image)?;
            let Meant { arch, mut store } = Meant::new(mcfg)?;
            let report = grad_check_params(&mut store, |s| arch.loss(s, &batch), cfg.step, cfg.per_param, cfg.seed)?;
            let pool = match pooling {
                Pooling::MeanPool => "meanpool",
                Pooling::SeqProj => "seqproj",
            };
            cases.push(GradCase {
                name: format!("model/{pool}/{}", modalities.label()),
                max_relative_error: report.max_relative_error,
                coordinates: report.coordinates_checked,
                worst: Some((
                    report.worst_param.clone(),
                    report.worst_index,
                    report.worst_analytic,
                    report.worst_numeric,
                )),
                passed: report.max_relative_error < cfg.tolerance,
            });
        }
    }
    Ok(cases)
}
