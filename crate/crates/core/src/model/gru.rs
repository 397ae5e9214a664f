use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

fn uniform<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), values).expect("uniform init is finite")
}

#[derive(Clone, Debug)]
struct Gate {
    input: ParamId,
    input_bias: ParamId,
    hidden: ParamId,
    hidden_bias: ParamId,
}

impl Gate {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        Self {
            input: store.insert(format!("{name}.w_i"), uniform(&[input, hidden], k, rng)),
            input_bias: store.insert(format!("{name}.b_i"), uniform(&[hidden], k, rng)),
            hidden: store.insert(format!("{name}.w_h"), uniform(&[hidden, hidden], k, rng)),
            hidden_bias: store.insert(format!("{name}.b_h"), uniform(&[hidden], k, rng)),
        }
    }

    /// Input projection for every step at once: `[L, hidden]`.
    fn project_inputs(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.input);
        let b = tape.param(store, self.input_bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }

    fn project_hidden(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let w = tape.param(store, self.hidden);
        let b = tape.param(store, self.hidden_bias);
        let y = tape.matmul(h, w)?;
        tape.add(y, b)
    }
}

/// Single-direction GRU cell with reset, update and candidate gates.
#[derive(Clone, Debug)]
pub struct GruCell {
    reset: Gate,
    update: Gate,
    candidate: Gate,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            reset: Gate::new(store, &format!("{name}.reset"), input, hidden, rng),
            update: Gate::new(store, &format!("{name}.update"), input, hidden, rng),
            candidate: Gate::new(store, &format!("{name}.candidate"), input, hidden, rng),
            hidden,
        }
    }

    /// Runs over `x [L, input]` in the given step order and returns the
    /// hidden state after each step, stacked back in sequence order `[L, hidden]`.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let len = tape.shape(x)[0];
        let xr = self.reset.project_inputs(tape, store, x)?;
        let xz = self.update.project_inputs(tape, store, x)?;
        let xn = self.candidate.project_inputs(tape, store, x)?;
        let ones = tape.constant(Tensor::ones(&[1, self.hidden]));
        let mut h = tape.constant(Tensor::zeros(&[1, self.hidden]));
        let mut states = vec![h; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let xr_t = tape.gather_rows(xr, &[t])?;
            let xz_t = tape.gather_rows(xz, &[t])?;
            let xn_t = tape.gather_rows(xn, &[t])?;
            let hr = self.reset.project_hidden(tape, store, h)?;
            let hz = self.update.project_hidden(tape, store, h)?;
            let hn = self.candidate.project_hidden(tape, store, h)?;
            let r = tape.add(xr_t, hr)?;
            let r = tape.sigmoid(r)?;
            let z = tape.add(xz_t, hz)?;
            let z = tape.sigmoid(z)?;
            let rn = tape.mul(r, hn)?;
            let n = tape.add(xn_t, rn)?;
            let n = tape.tanh(n)?;
            let keep = tape.sub(ones, z)?;
            let a = tape.mul(keep, n)?;
            let b = tape.mul(z, h)?;
            h = tape.add(a, b)?;
            states[t] = h;
        }
        tape.concat_rows(&states)
    }
}

/// Bidirectional GRU over per-clip features with a per-step phase head.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub params: ParamStore,
    pub forward_cell: GruCell,
    pub backward_cell: GruCell,
    pub head_weight: ParamId,
    pub head_bias: ParamId,
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl BiGru {
    pub fn new(input: usize, hidden: usize, classes: usize, seed: u64) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return config_err("GRU sizes must be positive");
        }
        if classes < 2 {
            return config_err(format!("a phase head needs at least 2 classes, got {classes}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let forward_cell = GruCell::new(&mut params, "gru.fwd", input, hidden, &mut rng);
        let backward_cell = GruCell::new(&mut params, "gru.bwd", input, hidden, &mut rng);
        let k = 1.0 / ((2 * hidden) as f64).sqrt();
        let head_weight = params.insert("gru.head.weight", uniform(&[2 * hidden, classes], k, &mut rng));
        let head_bias = params.insert("gru.head.bias", uniform(&[classes], k, &mut rng));
        Ok(Self {
            params,
            forward_cell,
            backward_cell,
            head_weight,
            head_bias,
            input,
            hidden,
            classes,
        })
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.shape(x);
        if shape.len() != 2 || shape[1] != self.input {
            return dim_err(format!("GRU expects [L, {}] features, got {shape:?}", self.input));
        }
        if shape[0] == 0 {
            return contract_err("GRU needs a non-empty sequence");
        }
        Ok(())
    }

    /// Forward and backward hidden states, each `[L, hidden]`.
    pub fn hidden_states(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        self.check_input(tape, x)?;
        let f = self.forward_cell.run(tape, &self.params, x, false)?;
        let b = self.backward_cell.run(tape, &self.params, x, true)?;
        Ok((f, b))
    }

    /// Per-step logits `[L, classes]` over the concatenated states.
    pub fn logits(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (f, b) = self.hidden_states(tape, x)?;
        let w = tape.param(&self.params, self.head_weight);
        let top: Vec<usize> = (0..self.hidden).collect();
        let bottom: Vec<usize> = (self.hidden..2 * self.hidden).collect();
        let wf = tape.gather_rows(w, &top)?;
        let wb = tape.gather_rows(w, &bottom)?;
        let yf = tape.matmul(f, wf)?;
        let yb = tape.matmul(b, wb)?;
        let y = tape.add(yf, yb)?;
        let bias = tape.param(&self.params, self.head_bias);
        tape.add(y, bias)
    }

    pub fn predict(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant(features.clone());
        let y = self.logits(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shapes() {
        let gru = BiGru::new(6, 5, 3, 1).unwrap();
        let feats = Tensor::filled(&[4, 6], 0.3);
        let mut tape = Tape::new();
        let x = tape.constant(feats.clone());
        let (f, b) = gru.hidden_states(&mut tape, x).unwrap();
        assert_eq!(tape.shape(f), &[4, 5]);
        assert_eq!(tape.shape(b), &[4, 5]);
        assert_eq!(gru.predict(&feats).unwrap().shape(), &[4, 3]);
    }

    #[test]
    fn backward_state_sees_future() {
        // The last backward state depends only on the last input.
        let gru = BiGru::new(2, 3, 2, 7).unwrap();
        let mut a = Tensor::zeros(&[3, 2]);
        let mut b = Tensor::zeros(&[3, 2]);
        a.values_mut()[0] = 1.0;
        b.values_mut()[0] = -1.0;
        let mut tape = Tape::new();
        let xa = tape.constant(a);
        let xb = tape.constant(b);
        let (fa, ba) = gru.hidden_states(&mut tape, xa).unwrap();
        let (fb, bb) = gru.hidden_states(&mut tape, xb).unwrap();
        assert_eq!(tape.value(ba).row(2), tape.value(bb).row(2));
        assert_ne!(tape.value(fa).row(2), tape.value(fb).row(2));
        assert_ne!(tape.value(ba).row(0), tape.value(bb).row(0));
    }

    #[test]
    fn empty_and_wrong_width() {
        let gru = BiGru::new(2, 3, 2, 7).unwrap();
        assert!(gru.predict(&Tensor::zeros(&[3, 4])).is_err());
        assert!(BiGru::new(2, 3, 1, 0).is_err());
    }
}
