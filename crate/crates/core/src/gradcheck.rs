//! Central finite-difference checks of every differentiable operation and of
//! the end-to-end per-pixel loss.
//!
//! All checks run in `f64`. Operation checks contract the output with a fixed
//! random vector `r`, so the scalar `Σ r·out` exercises every output element,
//! and compare every input and parameter element. The end-to-end check compares
//! the chunked training gradient against differences of the single-tape loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dataset::{SceneDataset, Split};
use crate::error::{Error, Result};
use crate::fusion::{color_decoder, GlobalCnn};
use crate::hashfield::HashField;
use crate::image::Image;
use crate::model::{Model, ModelConfig, Pixel};
use crate::params::ParamStore;
use crate::synth::synth_scene;
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-3;
pub const END_TO_END_TOLERANCE: f64 = 1e-2;
const OP_STEP: f64 = 1e-5;
const E2E_STEP: f64 = 1e-6;
/// Denominator floor of the relative error.
const FLOOR: f64 = 1e-6;
const E2E_PIXELS: usize = 8;
/// Probed elements per tensor in the module-level checks.
const COMPOSITE_PROBES: usize = 64;
/// Table scale for the end-to-end check. The training initialization is small
/// enough that gradients behind the table sit below finite-difference resolution.
const E2E_TABLE_SCALE: f64 = 0.5;
/// Elements whose analytic gradient is below this are not sampled end to end.
const E2E_MIN_GRAD: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub worst: f64,
    pub checked: usize,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst < self.tolerance && self.checked > 0
    }
}

/// One sampled parameter of the end-to-end check.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub ops: Vec<CheckResult>,
    pub end_to_end: CheckResult,
    pub samples: Vec<ParamSample>,
    /// Every learnable tensor of the checked model.
    pub tensors: Vec<String>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.ops.iter().all(CheckResult::passed) && self.end_to_end.passed()
    }
}

type Build = dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;

/// Checks one graph: `build` maps the input variables to an output node.
/// Every element is probed.
pub fn check_graph(name: &str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], build: &Build, seed: u64) -> Result<CheckResult> {
    check_graph_sampled(name, store, inputs, build, seed, usize::MAX)
}

/// Like [`check_graph`], probing at most `per_tensor` random elements of each input and parameter.
pub fn check_graph_sampled(
    name: &str,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    build: &Build,
    seed: u64,
    per_tensor: usize,
) -> Result<CheckResult> {
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<Vec<f64>> {
        let mut tape = Tape::new(store);
        let vars = inputs
            .iter()
            .map(|t| tape.variable(t.shape().to_vec(), t.values().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).values().to_vec())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out0 = eval(store, inputs)?;
    let r: Vec<f64> = (0..out0.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let objective = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        Ok(eval(store, inputs)?.iter().zip(&r).map(|(a, b)| a * b).sum())
    };

    let mut tape = Tape::new(store);
    let vars = inputs
        .iter()
        .map(|t| tape.variable(t.shape().to_vec(), t.values().to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward_from(&[(out, &r)])?;

    let mut pick = |n: usize| -> Vec<usize> {
        if n <= per_tensor {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut rng, n, per_tensor).into_vec()
        }
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (i, t) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]);
        for j in pick(t.len()) {
            let mut shifted = inputs.to_vec();
            let probe = |shifted: &mut Vec<Tensor<f64>>, d: f64| {
                shifted[i].values_mut()[j] = t.values()[j] + d;
                objective(store, shifted)
            };
            let numeric = (probe(&mut shifted, OP_STEP)? - probe(&mut shifted, -OP_STEP)?) / (2.0 * OP_STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
            checked += 1;
        }
    }
    for id in store.ids() {
        let n = store.get(id).len();
        let analytic = grads.params().get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        for j in pick(n) {
            let mut s = store.clone();
            let base = store.get(id).values()[j];
            s.get_mut(id).values_mut()[j] = base + OP_STEP;
            let plus = objective(&s, inputs)?;
            s.get_mut(id).values_mut()[j] = base - OP_STEP;
            let minus = objective(&s, inputs)?;
            worst = worst.max(relative_error(analytic[j], (plus - minus) / (2.0 * OP_STEP)));
            checked += 1;
        }
    }
    Ok(CheckResult { name: name.into(), worst, checked, tolerance: OP_TOLERANCE })
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero so ReLU kinks are never straddled.
fn off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, v).unwrap()
}

fn param_store(entries: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in entries {
        s.add(n, t).unwrap();
    }
    s
}

/// The primitive and composite checks.
pub fn op_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let empty = ParamStore::<f64>::new();
    let mut out = Vec::new();

    let lin = param_store(vec![("w", random_tensor(rng, vec![4, 5], -1.0, 1.0)), ("b", random_tensor(rng, vec![4], -1.0, 1.0))]);
    let x = random_tensor(rng, vec![3, 5], -1.0, 1.0);
    out.push(check_graph(
        "linear",
        &lin,
        &[x],
        &|t, v| {
            let (w, b) = (t.param(t.params().id("w").unwrap()), t.param(t.params().id("b").unwrap()));
            t.linear(v[0], w, b)
        },
        seed,
    )?);

    let x = off_zero(rng, vec![3, 6]);
    out.push(check_graph("relu", &empty, &[x.clone()], &|t, v| Ok(t.relu(v[0])), seed)?);
    out.push(check_graph("tanh", &empty, &[x.clone()], &|t, v| Ok(t.tanh(v[0])), seed)?);
    out.push(check_graph("sigmoid", &empty, &[x.clone()], &|t, v| Ok(t.sigmoid(v[0])), seed)?);
    out.push(check_graph("softmax", &empty, &[random_tensor(rng, vec![3, 7], -2.0, 2.0)], &|t, v| Ok(t.softmax(v[0])), seed)?);

    let a = random_tensor(rng, vec![2, 3], -1.0, 1.0);
    let b = random_tensor(rng, vec![2, 4], -1.0, 1.0);
    out.push(check_graph("concat", &empty, &[a.clone(), b], &|t, v| t.concat(v), seed)?);
    let c = random_tensor(rng, vec![4, 3], -1.0, 1.0);
    out.push(check_graph("concat_rows", &empty, &[a, c.clone()], &|t, v| t.concat_rows(v), seed)?);
    out.push(check_graph("gather_rows", &empty, &[c], &|t, v| t.gather_rows(v[0], vec![3, 0, 3, 1]), seed)?);

    let table = param_store(vec![("table", random_tensor(rng, vec![6, 3], -1.0, 1.0))]);
    out.push(check_graph(
        "embedding",
        &table,
        &[],
        &|t, _| {
            let id = t.params().id("table").unwrap();
            t.embedding(id, vec![5, 0, 5, 2, 2])
        },
        seed,
    )?);

    let w = random_tensor(rng, vec![2, 4], -1.0, 1.0);
    let f = random_tensor(rng, vec![8, 3], -1.0, 1.0);
    out.push(check_graph("weighted_sum", &empty, &[w, f], &|t, v| t.weighted_sum(v[0], v[1]), seed)?);

    let shift: Vec<f64> = (0..6).map(|i| i as f64 * 0.3 - 1.0).collect();
    out.push(check_graph(
        "affine",
        &empty,
        &[random_tensor(rng, vec![2, 3], -1.0, 1.0)],
        &move |t, v| t.affine(v[0], 1.7, Some(&shift)),
        seed,
    )?);

    let conv = param_store(vec![("k", random_tensor(rng, vec![4, 2, 3, 3], -0.5, 0.5)), ("b", random_tensor(rng, vec![4], -0.5, 0.5))]);
    out.push(check_graph(
        "conv2d",
        &conv,
        &[random_tensor(rng, vec![2, 5, 4], -1.0, 1.0)],
        &|t, v| {
            let (k, b) = (t.param(t.params().id("k").unwrap()), t.param(t.params().id("b").unwrap()));
            t.conv2d(v[0], k, b)
        },
        seed,
    )?);
    out.push(check_graph(
        "adaptive_avg_pool",
        &empty,
        &[random_tensor(rng, vec![3, 4, 5], -1.0, 1.0)],
        &|t, v| t.adaptive_avg_pool(v[0]),
        seed,
    )?);
    let target: Vec<f64> = (0..6).map(|i| i as f64 / 6.0).collect();
    out.push(check_graph(
        "mse_loss",
        &empty,
        &[random_tensor(rng, vec![2, 3], 0.0, 1.0)],
        &move |t, v| t.mse_loss(v[0], &target),
        seed,
    )?);

    out.push(hash_field_check(seed)?);
    out.push(global_cnn_check(seed)?);
    out.push(decoder_check(seed)?);
    Ok(out)
}

/// `encode_multiscale` on a tiny, collision-heavy table: table, weight network and query gradients.
fn hash_field_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4a5);
    let mut s32 = ParamStore::new();
    let field = HashField::new(&mut s32, &mut rng, 2, 2, 64, 2, false)?;
    let mut store = s32.cast::<f64>();
    // a table far from zero makes every entry's gradient visible
    let table = field.table.param;
    store.get_mut(table).values_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    // keep queries clear of cell faces so the finite step never changes the corner set
    let q: Vec<f64> = (0..3 * 5 * 2)
        .map(|_| {
            let cell = rng.gen_range(0..4) as f64;
            (cell + rng.gen_range(0.2..0.8)) / 4.0
        })
        .collect();
    let q1 = Tensor::new(vec![3, 5], q[..15].to_vec())?;
    let q2 = Tensor::new(vec![3, 5], q[15..].to_vec())?;
    let cam = random_tensor(&mut rng, vec![3, 16], -1.0, 1.0);
    let build = move |t: &mut Tape<'_, f64>, v: &[Var]| field.encode_multiscale(t, &v[..2], v[2]);
    check_graph_sampled("hash_field", &store, &[q1, q2, cam], &build, seed, COMPOSITE_PROBES)
}

fn global_cnn_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc22);
    let mut s32 = ParamStore::new();
    let cnn = GlobalCnn::new(&mut s32, &mut rng)?;
    let store = s32.cast::<f64>();
    let img = Image::from_fn(8, 8, |x, y| {
        let v = ((x * 7 + y * 3) % 11) as f32 / 10.0;
        [v, 1.0 - v, (x as f32 / 8.0)]
    });
    check_graph_sampled("global_cnn", &store, &[], &move |t, _| cnn.forward(t, &[&img]), seed, COMPOSITE_PROBES)
}

fn decoder_check(seed: u64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec);
    let mut s32 = ParamStore::new();
    let dec = color_decoder(&mut s32, &mut rng)?;
    let store = s32.cast::<f64>();
    let v_bar = random_tensor(&mut rng, vec![2, 32], -1.0, 1.0);
    let target = vec![0.2, 0.5, 0.9, 0.1, 0.4, 0.6];
    check_graph_sampled(
        "decoder_mse",
        &store,
        &[v_bar],
        &move |t, v| {
            let rgb = dec.forward(t, v[0])?;
            t.mse_loss(rgb, &target)
        },
        seed,
        COMPOSITE_PROBES,
    )
}

/// One random element with a visible gradient from every learnable tensor of a
/// freshly initialized model, on a small batch of the synthetic scene.
pub fn end_to_end_check(seed: u64) -> Result<(CheckResult, Vec<ParamSample>, Vec<String>)> {
    let ds = synth_scene(seed, 3, 16, 2)?;
    let (model, s32) = Model::new(ModelConfig::default(), seed)?;
    let tensors = model.audit(&s32)?;
    let mut store = s32.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let table = model.field.table.param;
    for v in store.get_mut(table).values_mut() {
        *v = rng.gen_range(-E2E_TABLE_SCALE..E2E_TABLE_SCALE);
    }
    let (pixels, targets) = e2e_batch(&ds, &mut rng);
    let (_, grads) = model.loss_and_grads(&store, &ds, &pixels, &targets)?;

    let mut samples = Vec::new();
    let mut worst = 0.0f64;
    for (id, name, t) in store.iter() {
        let g = grads.get(id).ok_or_else(|| Error::Contract(format!("no gradient reached `{name}`")))?;
        let visible: Vec<usize> = (0..t.len()).filter(|&j| g[j].abs() >= E2E_MIN_GRAD).collect();
        if visible.is_empty() {
            return Err(Error::Contract(format!("gradient of `{name}` vanishes on the check batch")));
        }
        let j = visible[rng.gen_range(0..visible.len())];
        let mut s = store.clone();
        let base = t.values()[j];
        s.get_mut(id).values_mut()[j] = base + E2E_STEP;
        let plus = model.batch_loss(&s, &ds, &pixels, &targets)?;
        s.get_mut(id).values_mut()[j] = base - E2E_STEP;
        let minus = model.batch_loss(&s, &ds, &pixels, &targets)?;
        let numeric = (plus - minus) / (2.0 * E2E_STEP);
        let error = relative_error(g[j], numeric);
        worst = worst.max(error);
        samples.push(ParamSample { tensor: name.to_string(), index: j, analytic: g[j], numeric, error });
    }
    let result = CheckResult { name: "end_to_end".into(), worst, checked: samples.len(), tolerance: END_TO_END_TOLERANCE };
    Ok((result, samples, tensors))
}

fn e2e_batch(ds: &SceneDataset, rng: &mut ChaCha8Rng) -> (Vec<Pixel>, Vec<f64>) {
    let views = ds.indices(Split::Train);
    let mut pixels = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..E2E_PIXELS {
        let view = views[rng.gen_range(0..views.len())];
        let hr = ds.view(view).hr.as_ref().expect("synthetic views carry HR");
        let (x, y) = (rng.gen_range(0..hr.width()), rng.gen_range(0..hr.height()));
        pixels.push(Pixel { view, x, y });
        targets.extend(hr.pixel(x, y).map(f64::from));
    }
    (pixels, targets)
}

pub fn run_gradcheck(seed: u64) -> Result<GradcheckReport> {
    let ops = op_checks(seed)?;
    let (end_to_end, samples, tensors) = end_to_end_check(seed)?;
    Ok(GradcheckReport { ops, end_to_end, samples, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-12);
        assert!(relative_error(1e-9, 0.0) < 1e-2);
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        let x = Tensor::new(vec![1, 3], vec![0.3, -0.7, 1.1]).unwrap();
        let store = ParamStore::<f64>::new();
        let ok = check_graph("scale", &store, &[x.clone()], &|t, v| Ok(t.scale(v[0], 2.0)), 0).unwrap();
        assert!(ok.passed(), "{ok:?}");
        // detaching the input zeroes the analytic side while differences still see the dependence
        let bad = check_graph(
            "detached",
            &store,
            &[x],
            &|t, v| {
                let vals = t.value(v[0]).values().to_vec();
                let c = t.constant(vec![1, 3], vals)?;
                Ok(t.scale(c, 2.0))
            },
            0,
        )
        .unwrap();
        assert!(!bad.passed());
    }

    #[test]
    fn full_suite_passes() {
        let report = run_gradcheck(0).unwrap();
        for op in &report.ops {
            assert!(op.passed(), "{op:?}");
        }
        assert!(report.end_to_end.passed(), "{:?}", report.samples);
        assert!(report.samples.len() >= 20);
        assert_eq!(report.samples.len(), report.tensors.len());
    }
}
