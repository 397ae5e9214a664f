use proptest::prelude::*;
use vidmae::data::VideoClip;
use vidmae::masking::{mask_random, MaskPlan};
use vidmae::model::{BiGru, Classifier, MaeModel, ModelConfig};
use vidmae::tensor::{Tape, Tensor};
use vidmae::tokenizer::{positional_table, Geometry, PatchSize};

fn small() -> ModelConfig {
    ModelConfig {
        geometry: Geometry {
            frames: 4,
            height: 8,
            width: 8,
            patch: PatchSize::new(2, 4, 4),
        },
        dim: 8,
        depth: 1,
        heads: 2,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        ..ModelConfig::tiny()
    }
}

fn bits(t: &Tensor) -> Vec<u64> {
    t.values().iter().map(|v| v.to_bits()).collect()
}

fn rows(t: &Tensor, idx: &[usize]) -> Vec<Vec<f64>> {
    idx.iter().map(|&i| t.row(i).to_vec()).collect()
}

fn latents(n: usize, d: usize, seed: u64) -> Tensor {
    let v = (0..n * d).map(|i| ((i as u64 + 1).wrapping_mul(seed | 1).wrapping_mul(2_654_435_761) % 2001) as f64 / 1000.0 - 1.0).collect();
    Tensor::new(vec![n, d], v).unwrap()
}

fn permutation(n: usize, keys: &[u32]) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.sort_by_key(|&i| (keys[i % keys.len()], i));
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn decoder_output_ignores_visible_order(
        seed in any::<u64>(),
        ratio in 0.2f64..0.8,
        keys in prop::collection::vec(any::<u32>(), 1..16),
    ) {
        let model = MaeModel::new(small(), seed).unwrap();
        let plan = mask_random(model.config.geometry.n_tokens(), ratio, seed).unwrap();
        let k = plan.visible.len();
        let z = latents(k, 8, seed);
        let perm = permutation(k, &keys);
        let shuffled_plan = MaskPlan { visible: perm.iter().map(|&i| plan.visible[i]).collect(), ..plan.clone() };
        let shuffled = Tensor::new(vec![k, 8], perm.iter().flat_map(|&i| z.row(i).to_vec()).collect()).unwrap();

        let mut tape = Tape::new();
        let a = tape.constant(z);
        let a = model.decoder.decode(&mut tape, &model.params, a, &plan).unwrap();
        let b = tape.constant(shuffled);
        let b = model.decoder.decode(&mut tape, &model.params, b, &shuffled_plan).unwrap();
        prop_assert_eq!(bits(tape.value(a)), bits(tape.value(b)));
    }

    #[test]
    fn masked_slots_differ_only_by_position(seed in any::<u64>(), ratio in 0.3f64..0.9) {
        let model = MaeModel::new(small(), seed).unwrap();
        let g = model.config.geometry;
        let plan = mask_random(g.n_tokens(), ratio, seed).unwrap();
        prop_assume!(plan.masked.len() >= 2);
        let mut tape = Tape::new();
        let z = tape.constant(latents(plan.visible.len(), 8, seed));
        let x = model.decoder.assemble(&mut tape, &model.params, z, &plan).unwrap();
        let x = tape.value(x).clone();
        let pos = positional_table(&g.layout(), 8, model.config.pos_mode).unwrap();
        let token = model.params.get(model.decoder.mask_token).values().to_vec();
        for &m in &plan.masked {
            for j in 0..8 {
                prop_assert!((x.row(m)[j] - token[j] - pos.row(m)[j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant(seed in any::<u64>(), keys in prop::collection::vec(any::<u32>(), 1..16)) {
        let model = MaeModel::new(small(), seed).unwrap();
        let n = model.config.geometry.n_tokens();
        let x = latents(n, 8, seed ^ 7);
        let perm = permutation(n, &keys);
        let px = Tensor::new(vec![n, 8], perm.iter().flat_map(|&i| x.row(i).to_vec()).collect()).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let a = model.encoder.encode(&mut tape, &model.params, a).unwrap();
        let b = tape.constant(px);
        let b = model.encoder.encode(&mut tape, &model.params, b).unwrap();
        let (a, b) = (tape.value(a).clone(), tape.value(b).clone());
        for (out_row, &src) in perm.iter().enumerate() {
            for j in 0..8 {
                prop_assert!((b.row(out_row)[j] - a.row(src)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reversed_gru_with_swapped_cells_reverses_states(
        seed in any::<u64>(),
        len in 1usize..6,
        values in prop::collection::vec(-1.0f64..1.0, 5 * 3),
    ) {
        let gru = BiGru::new(3, 4, 2, seed).unwrap();
        let mut swapped = gru.clone();
        std::mem::swap(&mut swapped.forward_cell, &mut swapped.backward_cell);
        let x = Tensor::new(vec![len, 3], values[..len * 3].to_vec()).unwrap();
        let rev: Vec<f64> = (0..len).rev().flat_map(|t| x.row(t).to_vec()).collect();
        let xr = Tensor::new(vec![len, 3], rev).unwrap();
        let mut tape = Tape::new();
        let a = tape.constant(x);
        let (f, b) = gru.hidden_states(&mut tape, a).unwrap();
        let c = tape.constant(xr);
        let (f2, b2) = swapped.hidden_states(&mut tape, c).unwrap();
        let order: Vec<usize> = (0..len).rev().collect();
        prop_assert_eq!(rows(tape.value(f2), &order), rows(tape.value(b), &(0..len).collect::<Vec<_>>()));
        prop_assert_eq!(rows(tape.value(b2), &order), rows(tape.value(f), &(0..len).collect::<Vec<_>>()));
    }
}

#[test]
fn empty_visible_set_is_a_contract_error() {
    let model = MaeModel::new(small(), 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[0, 8]));
    assert_eq!(model.encoder.encode(&mut tape, &model.params, x).unwrap_err().kind(), "contract");
}

#[test]
fn decoder_rejects_count_mismatch() {
    let model = MaeModel::new(small(), 0).unwrap();
    let plan = mask_random(8, 0.5, 0).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[3, 8]));
    let err = model.decoder.decode(&mut tape, &model.params, z, &plan).unwrap_err();
    assert_eq!(err.kind(), "contract");
}

#[test]
fn zero_decoder_reconstructs_zero() {
    let mut model = MaeModel::new(small(), 0).unwrap();
    let ids: Vec<_> = model.params.iter().filter(|(_, n, _)| n.starts_with("decoder.")).map(|(id, _, _)| id).collect();
    for id in ids {
        model.params.get_mut(id).values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let plan = mask_random(8, 0.5, 0).unwrap();
    let mut tape = Tape::new();
    let z = tape.constant(latents(4, 8, 1));
    let y = model.decoder.decode(&mut tape, &model.params, z, &plan).unwrap();
    assert_eq!(tape.value(y).shape(), &[8, 2 * 4 * 4 * 3]);
    assert!(tape.value(y).values().iter().all(|&v| v == 0.0));
}

#[test]
fn features_are_per_clip() {
    let cfg = small();
    let clf = Classifier::new(cfg.clone(), 3, 4).unwrap();
    let clip = |v: f64| VideoClip::new(4, 8, 8, (0..4 * 3 * 64).map(|i| (i as f64 * v).sin().abs()).collect()).unwrap();
    let (a, b, c) = (clip(0.1), clip(0.2), clip(0.3));
    let f1 = clf.extract_features(&[a.clone(), b.clone()]).unwrap();
    let f2 = clf.extract_features(&[a.clone(), c]).unwrap();
    assert_eq!(f1.shape(), &[2, 8]);
    assert_eq!(f1.row(0), f2.row(0));
    assert_eq!(clf.predict(&a).unwrap(), clf.predict(&a).unwrap());
    assert_eq!(clf.predict(&b).unwrap().len(), 3);
}
