use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidmae::data::{gen_clip, ClipSpec, MotionClass};
use vidmae::masking::{mask_random, MaskPlan};
use vidmae::model::{BiGru, Classifier, MaeModel, ModelConfig};
use vidmae::tensor::gradcheck::check_params;
use vidmae::tensor::{ParamStore, Tape, Tensor, Var};
use vidmae::tokenizer::{reconstruction_targets, Geometry, PatchSize, PosMode};
use vidmae::training::{masked_loss, LossKind};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar through a fixed random weighting.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(y), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

fn check_op<F>(name: &str, inputs: &[Tensor], op: F)
where
    F: Fn(&mut Tape, &[Var]) -> vidmae::Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("x{i}"), t.clone()))
        .collect();
    let report = check_params(
        &mut store,
        |tape, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            let y = op(tape, &vars)?;
            Ok(if tape.value(y).numel() == 1 && tape.shape(y).is_empty() {
                y
            } else {
                project(tape, y, 99)
            })
        },
        STEP,
        None,
    )
    .unwrap();
    assert!(
        report.max_rel_error < TOL,
        "{name}: rel error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn elementwise_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], -1.0, 1.0, &mut rng);
    let b = random(&[3, 4], -1.0, 1.0, &mut rng);
    let row = random(&[4], -1.0, 1.0, &mut rng);
    let pos = random(&[3, 4], 0.2, 2.0, &mut rng);
    let away = random(&[3, 4], 0.1, 1.0, &mut rng);
    check_op("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check_op("add_broadcast", &[a.clone(), row], |t, v| t.add(v[0], v[1]));
    check_op("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check_op("mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    check_op("scale", std::slice::from_ref(&a), |t, v| t.scale(v[0], -1.7));
    check_op("gelu", std::slice::from_ref(&a), |t, v| t.gelu(v[0]));
    check_op("sigmoid", std::slice::from_ref(&a), |t, v| t.sigmoid(v[0]));
    check_op("tanh", std::slice::from_ref(&a), |t, v| t.tanh(v[0]));
    check_op("abs", std::slice::from_ref(&away), |t, v| t.abs(v[0]));
    let neg = Tensor::new(vec![3, 4], away.values().iter().map(|x| -x).collect()).unwrap();
    check_op("abs_negative", &[neg], |t, v| t.abs(v[0]));
    check_op("sqrt", &[pos], |t, v| t.sqrt(v[0]));
}

#[test]
fn linear_algebra_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random(&[3, 4], -1.0, 1.0, &mut rng);
    let b = random(&[4, 5], -1.0, 1.0, &mut rng);
    let c = random(&[5, 4], -1.0, 1.0, &mut rng);
    let batched = random(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let batched_rhs = random(&[2, 4, 3], -1.0, 1.0, &mut rng);
    check_op("matmul", &[a.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
    check_op("matmul_nt", &[a.clone(), c.clone()], |t, v| t.matmul_nt(v[0], v[1]));
    check_op("matmul_batched", &[batched.clone(), batched_rhs], |t, v| t.matmul(v[0], v[1]));
    check_op("matmul_broadcast_rhs", &[batched.clone(), b.clone()], |t, v| t.matmul(v[0], v[1]));
    check_op("matmul_nt_batched", &[batched.clone(), batched.clone()], |t, v| t.matmul_nt(v[0], v[1]));
}

#[test]
fn shape_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[2, 3, 4], -1.0, 1.0, &mut rng);
    let m = random(&[3, 4], -1.0, 1.0, &mut rng);
    let m2 = random(&[2, 4], -1.0, 1.0, &mut rng);
    check_op("reshape", std::slice::from_ref(&a), |t, v| t.reshape(v[0], &[6, 4]));
    check_op("permute", std::slice::from_ref(&a), |t, v| t.permute(v[0], &[2, 0, 1]));
    check_op("transpose", std::slice::from_ref(&a), |t, v| t.transpose(v[0]));
    check_op("concat_rows", &[m.clone(), m2], |t, v| t.concat_rows(&[v[0], v[1]]));
    check_op("gather_rows", std::slice::from_ref(&m), |t, v| t.gather_rows(v[0], &[2, 0, 2, 1]));
    check_op("scatter_rows", std::slice::from_ref(&m), |t, v| t.scatter_rows(v[0], &[4, 0, 2], 5));
}

#[test]
fn normalization_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[3, 5], -2.0, 2.0, &mut rng);
    let b = random(&[3, 5], -2.0, 2.0, &mut rng);
    let gamma = random(&[5], 0.5, 1.5, &mut rng);
    let beta = random(&[5], -0.5, 0.5, &mut rng);
    check_op("softmax", std::slice::from_ref(&a), |t, v| t.softmax(v[0]));
    check_op("layer_norm", &[a.clone(), gamma, beta], |t, v| t.layer_norm(v[0], v[1], v[2]));
    check_op("sum", std::slice::from_ref(&a), |t, v| t.sum(v[0]));
    check_op("mean", std::slice::from_ref(&a), |t, v| t.mean(v[0]));
    check_op("mean_rows", std::slice::from_ref(&a), |t, v| t.mean_rows(v[0]));
    check_op("sum_last", std::slice::from_ref(&a), |t, v| t.sum_last(v[0]));
    check_op("mse", &[a.clone(), b], |t, v| t.mse(v[0], v[1]));
    check_op("cross_entropy", &[a], |t, v| t.cross_entropy(v[0], &[4, 0, 2]));
}

fn small_config() -> ModelConfig {
    ModelConfig {
        geometry: Geometry::new(4, 8, 8, PatchSize::new(2, 4, 4)).unwrap(),
        dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        pos_mode: PosMode::SeparableFixed,
        pos_learnable: true,
        patch_bias: true,
    }
}

fn small_clip() -> vidmae::data::VideoClip {
    let spec = ClipSpec {
        frames: 4,
        height: 8,
        width: 8,
        patch: PatchSize::new(2, 4, 4),
        n_objects: 1,
        motion: MotionClass::Right,
        object_size: 3,
        speed: (1, 1),
    };
    gen_clip(5, &spec).unwrap()
}

/// Replaces every parameter with O(1) random values so no gradient sits
/// near the relative-error floor.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).values_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
}

fn full_loss_check(kind: LossKind, normalize: bool) {
    let cfg = small_config();
    let mut model = MaeModel::new(cfg.clone(), 11).unwrap();
    randomize(&mut model.params, 12);
    let clip = small_clip();
    let plan: MaskPlan = mask_random(cfg.geometry.n_tokens(), 0.75, 3).unwrap();
    assert_eq!(plan.visible.len(), 2);
    let targets = reconstruction_targets(&clip, &cfg.geometry, normalize).unwrap();
    let mut store = model.params.clone();
    let report = check_params(
        &mut store,
        |tape, s| {
            let view = MaeModel {
                params: s.clone(),
                ..model.clone()
            };
            let out = view.forward_planned(tape, &clip, plan.clone())?;
            masked_loss(tape, out.prediction, targets.target(), &out.plan, kind)
        },
        STEP,
        None,
    )
    .unwrap();
    assert!(
        report.max_rel_error < TOL,
        "{kind}: rel error {:.3e} at {:?} {:?} over {} entries",
        report.max_rel_error,
        report.worst,
        report.worst_values,
        report.checked
    );
}

#[test]
fn full_pretrain_loss_mse_normalized() {
    full_loss_check(LossKind::Mse, true);
}

#[test]
fn full_pretrain_loss_variants() {
    full_loss_check(LossKind::Mse, false);
    full_loss_check(LossKind::L2Norm, true);
}

#[test]
fn classifier_loss() {
    let cfg = small_config();
    let mut model = Classifier::new(cfg, 3, 2).unwrap();
    randomize(&mut model.params, 13);
    let clip = small_clip();
    let mut store = model.params.clone();
    let report = check_params(
        &mut store,
        |tape, s| {
            let view = Classifier {
                params: s.clone(),
                ..model.clone()
            };
            let logits = view.logits(tape, &clip)?;
            tape.cross_entropy(logits, &[1])
        },
        STEP,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{:?}", report);
}

#[test]
fn bigru_four_steps() {
    let gru = BiGru::new(3, 4, 2, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[4, 3], -1.0, 1.0, &mut rng);
    let mut store = gru.params.clone();
    let report = check_params(
        &mut store,
        |tape, s| {
            let view = BiGru {
                params: s.clone(),
                ..gru.clone()
            };
            let xv = tape.constant(x.clone());
            let logits = view.logits(tape, xv)?;
            tape.cross_entropy(logits, &[0, 1, 1, 0])
        },
        STEP,
        None,
    )
    .unwrap();
    assert!(report.max_rel_error < TOL, "{:?}", report);
}
