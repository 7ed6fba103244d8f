//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use mmcnn_core::cam::sample_cams;
use mmcnn_core::data::{Class, EyeRecord, ImageRef, Split};
use mmcnn_core::metrics::ConfusionMatrix;
use mmcnn_core::net::{random_images, BranchConfig, TwoStreamModel};
use mmcnn_core::rng;
use mmcnn_core::tensor::{ParamId, Tape, Var};
use mmcnn_core::{Result, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const SMOOTH_TOL: f64 = 1e-6;
pub const COMPOSITE_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng::stream(seed, "test.randn", 0);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut r))
}

/// Random tensor with every entry at least `gap` away from zero.
pub fn randn_away_from_zero(shape: &[usize], seed: u64, gap: f64) -> Tensor<f64> {
    randn(shape, seed).map(|v| {
        if v.abs() < gap {
            v.signum() * gap + v
        } else {
            v
        }
    })
}

/// Outcome of one finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCase {
    pub name: String,
    pub max_rel: f64,
    pub tol: f64,
    pub checked: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel < self.tol
    }
}

/// Compares tape gradients of `build` against central differences.
///
/// Every input is registered as a parameter; the scalar loss is a fixed
/// random weighting of `build`'s output so that no gradient is trivially
/// uniform. At most `max_probe` entries per input are probed.
pub fn check_op<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    tol: f64,
    max_probe: usize,
    build: F,
) -> GradCase
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let loss_of =
        |ts: &[Tensor<f64>], weights: Option<&[f64]>| -> (f64, Vec<f64>, Tape<f64>, Var) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ts
                .iter()
                .enumerate()
                .map(|(i, t)| tape.param(ParamId(i), t))
                .collect();
            let out = build(&mut tape, &vars).expect("op builds");
            let n = tape.value(out).numel();
            let w: Vec<f64> = match weights {
                Some(w) => w.to_vec(),
                None => randn(&[n], 99).into_data(),
            };
            let loss = tape.weighted_sum(out, &w).expect("weights match");
            (tape.value(loss).data()[0], w, tape, loss)
        };
    let (_, weights, mut tape, loss) = loss_of(inputs, None);
    let mut params: Vec<Tensor<f64>> = inputs.to_vec();
    tape.backward(loss, &mut params).expect("backward");
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (i, p) in params.iter().enumerate() {
        let analytic = p.grad().expect("gradient allocated").to_vec();
        let n = analytic.len();
        let stride = n.div_ceil(max_probe).max(1);
        for j in (0..n).step_by(stride) {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let fp = loss_of(&plus, Some(&weights)).0;
            let fm = loss_of(&minus, Some(&weights)).0;
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(analytic[j], numeric));
            checked += 1;
        }
    }
    GradCase {
        name: name.to_string(),
        max_rel,
        tol,
        checked,
    }
}

/// Finite-difference checks of every differentiable tape op.
pub fn op_suite() -> Vec<GradCase> {
    let t = SMOOTH_TOL;
    let mut cases = Vec::new();
    let x = randn(&[2, 3, 6, 6], 1);
    cases.push(check_op(
        "conv2d 3x3 s1 p1",
        &[x.clone(), randn(&[4, 3, 3, 3], 2)],
        t,
        40,
        |tp, v| tp.conv2d(v[0], v[1], 1, 1),
    ));
    cases.push(check_op(
        "conv2d 3x3 s2 p1",
        &[x.clone(), randn(&[4, 3, 3, 3], 3)],
        t,
        40,
        |tp, v| tp.conv2d(v[0], v[1], 2, 1),
    ));
    cases.push(check_op(
        "conv2d 1x1 s2",
        &[x.clone(), randn(&[5, 3, 1, 1], 4)],
        t,
        40,
        |tp, v| tp.conv2d(v[0], v[1], 2, 0),
    ));
    cases.push(check_op(
        "conv2d 5x5 s1 p2",
        &[x.clone(), randn(&[2, 3, 5, 5], 5)],
        t,
        40,
        |tp, v| tp.conv2d(v[0], v[1], 1, 2),
    ));
    let bn_in = [randn(&[4, 3, 3, 3], 6), randn(&[3], 7), randn(&[3], 8)];
    cases.push(check_op("batch_norm train", &bn_in, t, 40, |tp, v| {
        let mut st = mmcnn_core::tensor::BatchNormState::new(3);
        tp.batch_norm(v[0], v[1], v[2], &mut st, true)
    }));
    cases.push(check_op("batch_norm eval", &bn_in, t, 40, |tp, v| {
        let mut st = mmcnn_core::tensor::BatchNormState {
            running_mean: vec![0.1, -0.2, 0.3],
            running_var: vec![0.5, 1.5, 2.0],
        };
        tp.batch_norm(v[0], v[1], v[2], &mut st, false)
    }));
    cases.push(check_op(
        "relu",
        &[randn_away_from_zero(&[3, 4, 2, 2], 9, 1e-3)],
        t,
        48,
        |tp, v| Ok(tp.relu(v[0])),
    ));
    cases.push(check_op(
        "add",
        &[randn(&[2, 3, 2, 2], 10), randn(&[2, 3, 2, 2], 11)],
        t,
        24,
        |tp, v| tp.add(v[0], v[1]),
    ));
    cases.push(check_op(
        "concat",
        &[randn(&[3, 4], 12), randn(&[3, 2], 13)],
        t,
        12,
        |tp, v| tp.concat(v[0], v[1]),
    ));
    cases.push(check_op(
        "global_avg_pool",
        &[randn(&[2, 3, 4, 4], 14)],
        t,
        48,
        |tp, v| tp.global_avg_pool(v[0]),
    ));
    cases.push(check_op(
        "linear",
        &[randn(&[4, 6], 15), randn(&[3, 6], 16)],
        t,
        24,
        |tp, v| tp.linear(v[0], v[1], None),
    ));
    cases.push(check_op(
        "linear with bias",
        &[randn(&[4, 6], 17), randn(&[3, 6], 18), randn(&[3], 19)],
        t,
        24,
        |tp, v| tp.linear(v[0], v[1], Some(v[2])),
    ));
    cases.push(check_op(
        "softmax_cross_entropy",
        &[randn(&[5, 3], 20)],
        t,
        15,
        |tp, v| tp.softmax_cross_entropy(v[0], &[0, 2, 1, 1, 0]),
    ));
    cases.push(check_op("sum", &[randn(&[3, 5], 21)], t, 15, |tp, v| {
        Ok(tp.sum(v[0]))
    }));
    cases.push(check_op("scale", &[randn(&[3, 5], 22)], t, 15, |tp, v| {
        Ok(tp.scale(v[0], -1.7))
    }));
    cases
}

/// Smallest configuration with the full topology, for f64 checks.
pub fn tiny_config() -> BranchConfig {
    BranchConfig::with_width(2, 16)
}

/// Finite-difference check of cross-entropy through the whole two-stream
/// model in training mode, probing a spread of parameters.
pub fn composite_case(seed: u64) -> GradCase {
    let cfg = tiny_config();
    let model = TwoStreamModel::<f64>::new(&cfg, 3, seed).expect("model");
    let mut r = rng::stream(seed, "test.composite", 0);
    let f: Tensor<f64> = random_images(3, &cfg, &mut r);
    let o: Tensor<f64> = random_images(3, &cfg, &mut r);
    let labels = [0usize, 2, 1];
    let loss_of = |m: &mut TwoStreamModel<f64>| -> (f64, Tape<f64>, Var) {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let ov = tape.constant(o.clone());
        let out = m
            .forward(&mut tape, Some(fv), Some(ov), true)
            .expect("forward");
        let loss = tape
            .softmax_cross_entropy(out.scores, &labels)
            .expect("loss");
        (tape.value(loss).data()[0], tape, loss)
    };
    let mut m = model.clone();
    let (_, mut tape, loss) = loss_of(&mut m);
    m.zero_grad();
    tape.backward(loss, m.params_mut()).expect("backward");
    let grads: Vec<Vec<f64>> = m
        .params()
        .iter()
        .map(|p| p.grad().expect("grad").to_vec())
        .collect();
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for (i, g) in grads.iter().enumerate() {
        let stride = g.len().div_ceil(3).max(1);
        for j in (0..g.len()).step_by(stride) {
            let mut plus = model.clone();
            plus.params_mut()[i].data_mut()[j] += FD_STEP;
            let mut minus = model.clone();
            minus.params_mut()[i].data_mut()[j] -= FD_STEP;
            let numeric = (loss_of(&mut plus).0 - loss_of(&mut minus).0) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(g[j], numeric));
            checked += 1;
        }
    }
    GradCase {
        name: "two-stream composite".into(),
        max_rel,
        tol: COMPOSITE_TOL,
        checked,
    }
}

/// Worst normalized violation of `s^c = sum CAM_f + sum CAM_o` over random
/// models and inputs, all classes.
pub fn cam_identity_worst(trials: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut r = rng::stream(seed, "test.cam", 0);
    for t in 0..trials {
        let width = r.random_range(1..=3);
        let size = [16, 32][r.random_range(0..2)];
        let cfg = BranchConfig::with_width(width, size);
        let mut model = TwoStreamModel::<f32>::new(&cfg, 3, seed * 1000 + t as u64).expect("model");
        // Larger head weights than the init so scores are not all near zero.
        let head = model.head_weights_mut();
        for v in head.data_mut() {
            *v = r.random_range(-1.0..1.0);
        }
        let f = random_images::<f32>(1, &cfg, &mut r)
            .select(0)
            .expect("sample");
        let o = random_images::<f32>(1, &cfg, &mut r)
            .select(0)
            .expect("sample");
        for class in 0..3 {
            let cams = sample_cams(&model, Some(&f), Some(&o), Some(class)).expect("cams");
            let s = cams.scores[class];
            worst = worst.max(cams.residual().abs() / s.abs().max(1.0));
        }
    }
    worst
}

fn image(path: String) -> ImageRef {
    ImageRef { path, bbox: None }
}

/// Spreads `n` OCT images over `eyes` eyes as evenly as possible.
fn oct_split(n: usize, eyes: usize) -> Vec<usize> {
    (0..eyes)
        .map(|i| n / eyes + usize::from(i < n % eyes))
        .collect()
}

/// Records with the per-class, per-split image and eye counts of the clinical
/// dataset: one fundus image per eye, OCT images spread over the eyes that
/// have them.
pub fn clinical_records() -> Vec<EyeRecord> {
    // (split, class, fundus eyes, OCT images, eyes with OCT)
    let shape = [
        (Split::Train, Class::Normal, 155, 156, 155),
        (Split::Train, Class::DryAmd, 67, 33, 22),
        (Split::Train, Class::WetAmd, 717, 821, 484),
        (Split::Val, Class::Normal, 20, 20, 20),
        (Split::Val, Class::DryAmd, 20, 35, 20),
        (Split::Val, Class::WetAmd, 20, 42, 20),
        (Split::Test, Class::Normal, 20, 20, 20),
        (Split::Test, Class::DryAmd, 20, 38, 20),
        (Split::Test, Class::WetAmd, 20, 46, 20),
    ];
    let mut records = Vec::new();
    for (split, class, eyes, octs, oct_eyes) in shape {
        let per_eye = oct_split(octs, oct_eyes);
        for e in 0..eyes {
            let id = format!("{split}-{class}-{e}");
            let n_oct = per_eye.get(e).copied().unwrap_or(0);
            records.push(EyeRecord {
                eye_id: id.clone(),
                class,
                split,
                fundus: vec![image(format!("{id}.fundus.ppm"))],
                oct: (0..n_oct)
                    .map(|k| image(format!("{id}.oct{k}.pgm")))
                    .collect(),
            });
        }
    }
    records
}

/// Published per-class rows: (sensitivity, specificity, F1) for each class,
/// then overall F1 and accuracy.
pub struct TableRow {
    pub model: &'static str,
    pub matrix: [[u64; 3]; 3],
    pub per_class: [(f64, f64, f64); 3],
    pub overall_f1: f64,
    pub accuracy: f64,
}

/// Confusion matrices reconstructed from the published per-class rates and
/// test-set sizes (rows true, columns predicted).
pub fn published_rows() -> Vec<TableRow> {
    vec![
        TableRow {
            model: "Fundus-CNN",
            matrix: [[20, 0, 0], [1, 14, 5], [0, 1, 19]],
            per_class: [
                (1.000, 0.975, 0.975),
                (0.700, 0.975, 0.800),
                (0.950, 0.875, 0.863),
            ],
            overall_f1: 0.879,
            accuracy: 0.883,
        },
        TableRow {
            model: "feature forest baseline",
            matrix: [[20, 0, 0], [1, 21, 16], [1, 0, 45]],
            per_class: [
                (1.000, 0.976, 0.952),
                (0.552, 1.000, 0.711),
                (0.978, 0.724, 0.841),
            ],
            overall_f1: 0.835,
            accuracy: 0.826,
        },
        TableRow {
            model: "MM-CNN-S",
            matrix: [[20, 0, 0], [0, 32, 6], [0, 1, 45]],
            per_class: [
                (1.000, 1.000, 1.000),
                (0.842, 0.984, 0.901),
                (0.978, 0.896, 0.927),
            ],
            overall_f1: 0.943,
            accuracy: 0.932,
        },
        TableRow {
            model: "MM-CNN-L",
            matrix: [[20, 0, 0], [0, 35, 3], [0, 0, 46]],
            per_class: [
                (1.000, 1.000, 1.000),
                (0.921, 1.000, 0.958),
                (1.000, 0.948, 0.968),
            ],
            overall_f1: 0.975,
            accuracy: 0.971,
        },
    ]
}

pub fn matrix_of(row: &TableRow) -> ConfusionMatrix {
    ConfusionMatrix::from_counts(3, row.matrix.iter().flatten().copied().collect()).expect("3x3")
}
